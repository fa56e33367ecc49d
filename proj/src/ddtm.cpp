#include "mstop/ddtm.h"

#include <cmath>
#include <stdexcept>
#include <string>

#include "mstop/rng.h"

namespace mstop {

using nk::Shape;
using nk::Tape;
using nk::Tensor;

void DdtmConfig::validate() const {
  if (d == 0 || heads == 0 || ff_width == 0 || enc_layers == 0 || dec_layers == 0)
    throw std::invalid_argument("ddtm config: all extents must be positive");
  if (d % heads != 0)
    throw std::invalid_argument("ddtm config: d = " + std::to_string(d) + " not divisible by H = " +
                                std::to_string(heads));
  if (!(clip > 0.0)) throw std::invalid_argument("ddtm config: logit clamp must be positive");
}

Ddtm::Ddtm(DdtmConfig config) : config_(config) {
  config_.validate();
  const std::size_t d = config_.d;
  auto& p = params_;
  init_depot = p.add("enc.init.depot", {2, d});
  init_node = p.add("enc.init.node", {3, d});
  init_vehicle = p.add("enc.init.vehicle", {3, d});
  for (std::size_t l = 0; l < config_.enc_layers; ++l) {
    const std::string pre = "enc." + std::to_string(l) + ".";
    EncoderLayer e{};
    e.wq = p.add(pre + "wq", {d, d});
    e.wk = p.add(pre + "wk", {d, d});
    e.wv = p.add(pre + "wv", {d, d});
    e.wout = p.add(pre + "wout", {d, d});
    e.ff0 = p.add(pre + "ff0", {d, config_.ff_width});
    e.ff1 = p.add(pre + "ff1", {config_.ff_width, d});
    e.bn1_gamma = p.add(pre + "bn1.gamma", {1, d});
    e.bn1_beta = p.add(pre + "bn1.beta", {1, d});
    e.bn1_mean = p.add(pre + "bn1.running_mean", {1, d}, false);
    e.bn1_var = p.add(pre + "bn1.running_var", {1, d}, false);
    e.bn2_gamma = p.add(pre + "bn2.gamma", {1, d});
    e.bn2_beta = p.add(pre + "bn2.beta", {1, d});
    e.bn2_mean = p.add(pre + "bn2.running_mean", {1, d}, false);
    e.bn2_var = p.add(pre + "bn2.running_var", {1, d}, false);
    encoder.push_back(e);
  }
  context_proj = p.add("dec.proj", {d + 1, d});
  for (std::size_t l = 0; l < config_.dec_layers; ++l) {
    const std::string pre = "dec." + std::to_string(l) + ".";
    DecoderLayer dl{};
    for (auto [w, tag] : {std::pair{&dl.self_attn, "sa."}, std::pair{&dl.cross_attn, "att."}}) {
      w->wq = p.add(pre + tag + "wq", {d, d});
      w->wk = p.add(pre + tag + "wk", {d, d});
      w->wv = p.add(pre + tag + "wv", {d, d});
      w->wout = p.add(pre + tag + "wout", {d, d});
    }
    decoder.push_back(dl);
  }
  graph_proj = p.add("dec.graph", {d, d});
  final_q = p.add("dec.final.wq", {d, d});
  final_k = p.add("dec.final.wk", {d, d});
}

void Ddtm::init(std::uint64_t seed) {
  params_.init_uniform(seed);
  for (const auto& e : encoder) {
    for (auto i : {e.bn1_gamma, e.bn2_gamma, e.bn1_var, e.bn2_var}) std::fill(params_[i].value.begin(), params_[i].value.end(), 1.0);
    for (auto i : {e.bn1_beta, e.bn2_beta, e.bn1_mean, e.bn2_mean}) std::fill(params_[i].value.begin(), params_[i].value.end(), 0.0);
  }
}

namespace {

RouteContext::Heads split_heads(const Tensor& keys, const Tensor& values, std::size_t heads) {
  RouteContext::Heads h;
  const std::size_t w = keys.cols() / heads;
  for (std::size_t i = 0; i < heads; ++i) {
    h.keys_t.push_back(nk::transpose(nk::slice_cols(keys, i * w, w)));
    h.values.push_back(nk::slice_cols(values, i * w, w));
  }
  return h;
}

// Scaled dot-product attention for pre-split heads followed by the
// output projection. `mask` is additive over key rows (or empty).
Tensor attend(const Tensor& queries, const RouteContext::Heads& kv, const Tensor& wout,
              std::span<const double> mask) {
  const std::size_t heads = kv.keys_t.size();
  const std::size_t w = queries.cols() / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(w));
  Tensor concat;
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor q = nk::slice_cols(queries, h * w, w);
    Tensor scores = nk::scale(nk::matmul(q, kv.keys_t[h]), inv);
    Tensor z = nk::matmul(nk::softmax(scores, mask), kv.values[h]);
    concat = h == 0 ? z : nk::concat_cols(concat, z);
  }
  return nk::matmul(concat, wout);
}

}  // namespace

Embeddings encode(Tape& tape, const Ddtm& model, const State& s, nk::NormMode mode) {
  if (s.terminal()) throw ContractViolation("encode on a terminal state");
  const Instance& inst = s.instance();
  const std::size_t n = inst.n(), k = inst.k();
  const auto& cfg = model.config();

  std::vector<double> customer_feat(n * 3), vehicle_feat(k * 3);
  for (std::size_t i = 0; i < n; ++i) {
    customer_feat[i * 3] = inst.customers[i].pos.x;
    customer_feat[i * 3 + 1] = inst.customers[i].pos.y;
    customer_feat[i * 3 + 2] = s.residual(i + 1);
  }
  for (std::size_t v = 0; v < k; ++v) {
    const auto& vs = s.vehicles()[v];
    vehicle_feat[v * 3] = vs.pos.x;
    vehicle_feat[v * 3 + 1] = vs.pos.y;
    vehicle_feat[v * 3 + 2] = vs.fuel;
  }
  Tensor depot = nk::matmul(tape.constant({1, 2}, {inst.depot.x, inst.depot.y}), tape.param(model.init_depot));
  Tensor customers = nk::matmul(tape.constant({n, 3}, std::move(customer_feat)), tape.param(model.init_node));
  Tensor vehicles = nk::matmul(tape.constant({k, 3}, std::move(vehicle_feat)), tape.param(model.init_vehicle));
  const Tensor parts[] = {depot, customers, vehicles};
  Tensor h = nk::concat_rows(parts);

  Embeddings emb;
  emb.valid.assign(n + k + 1, true);
  for (std::size_t i = 1; i <= n; ++i) emb.valid[i] = !s.visited(i);
  for (std::size_t v = 0; v < k; ++v) emb.valid[n + 1 + v] = !s.vehicles()[v].done;

  // Outer-product mask: entry (i, j) is excluded when row i or column j is.
  const std::size_t rows = n + k + 1;
  std::vector<double> att_mask(rows * rows, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < rows; ++j)
      if (!emb.valid[i] || !emb.valid[j]) att_mask[i * rows + j] = nk::kMasked;

  for (const auto& layer : model.encoder) {
    Tensor q = nk::matmul(h, tape.param(layer.wq));
    Tensor kk = nk::matmul(h, tape.param(layer.wk));
    Tensor v = nk::matmul(h, tape.param(layer.wv));
    RouteContext::Heads kv = split_heads(kk, v, cfg.heads);
    Tensor mha = attend(q, kv, tape.param(layer.wout), att_mask);
    Tensor h1 = nk::batch_norm(nk::add(h, mha), tape.param(layer.bn1_gamma), tape.param(layer.bn1_beta),
                               layer.bn1_mean, layer.bn1_var, mode);
    Tensor ff = nk::matmul(nk::relu(nk::matmul(h1, tape.param(layer.ff0))), tape.param(layer.ff1));
    h = nk::batch_norm(nk::add(ff, h1), tape.param(layer.bn2_gamma), tape.param(layer.bn2_beta), layer.bn2_mean,
                       layer.bn2_var, mode);
  }
  emb.nodes = h;
  emb.valid_count = 0;
  for (bool b : emb.valid) emb.valid_count += b;
  std::vector<double> weights(rows, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    if (emb.valid[i]) weights[i] = 1.0 / static_cast<double>(emb.valid_count);
  emb.graph = nk::matmul(tape.constant({1, rows}, std::move(weights)), h);
  return emb;
}

RouteContext begin_route(Tape& tape, const Ddtm& model, const Embeddings& emb, const State& s) {
  const Instance& inst = s.instance();
  const std::size_t n = inst.n();
  RouteContext ctx;
  ctx.vehicle = s.active();
  std::vector<std::size_t> context_rows(n + 2);
  for (std::size_t i = 0; i <= n; ++i) context_rows[i] = i;
  context_rows[n + 1] = n + 1 + ctx.vehicle;
  Tensor h_node = nk::select_rows(emb.nodes, context_rows);
  for (const auto& layer : model.decoder) {
    Tensor kk = nk::matmul(h_node, tape.param(layer.cross_attn.wk));
    Tensor v = nk::matmul(h_node, tape.param(layer.cross_attn.wv));
    ctx.cross.push_back(split_heads(kk, v, model.config().heads));
  }
  std::vector<std::size_t> node_rows(n + 1);
  for (std::size_t i = 0; i <= n; ++i) node_rows[i] = i;
  ctx.final_keys_t = nk::transpose(nk::matmul(nk::select_rows(emb.nodes, node_rows), tape.param(model.final_k)));
  ctx.graph_term = nk::matmul(emb.graph, tape.param(model.graph_proj));
  ctx.history.assign(model.decoder.size(), {});
  return ctx;
}

std::vector<double> positional_encoding(std::size_t t, std::size_t d) {
  std::vector<double> pe(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double angle = static_cast<double>(t) / std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(d));
    pe[i] = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
  }
  return pe;
}

StepOutput decode_step(Tape& tape, const Ddtm& model, const Embeddings& emb, RouteContext& route, const State& s,
                       const std::vector<bool>& feasible) {
  const Instance& inst = s.instance();
  const std::size_t n = inst.n();
  const auto& cfg = model.config();
  if (s.active() != route.vehicle) throw ContractViolation("decode_step: route context belongs to another vehicle");
  if (feasible.size() != n + 1) throw std::invalid_argument("decode_step: feasibility mask has wrong length");

  const auto& veh = s.active_vehicle();
  // The vehicle's own row until it has moved, then the last chosen customer.
  const std::size_t current_row = s.decode_step() == 0 ? n + 1 + route.vehicle : veh.node;
  const std::size_t sel[] = {current_row};
  Tensor current = nk::concat_cols(nk::select_rows(emb.nodes, sel), tape.scalar(veh.fuel));
  Tensor h = nk::add(nk::matmul(current, tape.param(model.context_proj)),
                     tape.constant_row(positional_encoding(s.decode_step(), cfg.d)));

  std::vector<double> cross_mask(n + 2, 0.0);
  for (std::size_t j = 0; j <= n; ++j)
    if (!feasible[j]) cross_mask[j] = nk::kMasked;

  for (std::size_t l = 0; l < model.decoder.size(); ++l) {
    const auto& layer = model.decoder[l];
    auto& hist = route.history[l];
    hist.push_back(h);
    Tensor past = nk::concat_rows(hist);
    RouteContext::Heads self_kv = split_heads(nk::matmul(past, tape.param(layer.self_attn.wk)),
                                              nk::matmul(past, tape.param(layer.self_attn.wv)), cfg.heads);
    Tensor sa = attend(nk::matmul(h, tape.param(layer.self_attn.wq)), self_kv, tape.param(layer.self_attn.wout), {});
    h = attend(nk::matmul(sa, tape.param(layer.cross_attn.wq)), route.cross[l], tape.param(layer.cross_attn.wout),
               cross_mask);
  }

  Tensor query = nk::matmul(nk::add(h, route.graph_term), tape.param(model.final_q));
  Tensor compat = nk::scale(nk::matmul(query, route.final_keys_t), 1.0 / std::sqrt(static_cast<double>(cfg.d)));
  StepOutput out;
  out.logits = nk::scale(nk::tanh(compat), cfg.clip);
  std::vector<double> mask(n + 1, 0.0);
  for (std::size_t j = 0; j <= n; ++j)
    if (!feasible[j]) mask[j] = nk::kMasked;
  out.log_probs = nk::log_softmax(out.logits, mask);
  Tensor probs = nk::softmax(out.logits, mask);
  out.entropy = nk::scale(nk::sum(nk::mul(probs, out.log_probs)), -1.0);
  out.probs.assign(probs.values().begin(), probs.values().end());
  return out;
}

Rollout rollout(Tape& tape, const Ddtm& model, const Instance& inst, std::span<const std::size_t> order,
                const RolloutOptions& options) {
  if (tape.params() != &model.params()) throw std::invalid_argument("rollout: tape is not bound to the model");
  State s = reset(inst, order);
  Rng rng(mix64(options.seed));
  Rollout out;
  out.trajectory.order.assign(order.begin(), order.end());
  std::vector<Tensor> chosen, entropies;
  while (!s.terminal()) {
    Embeddings emb = encode(tape, model, s, options.norm);
    RouteContext route = begin_route(tape, model, emb, s);
    const std::size_t vehicle = s.active();
    while (!s.terminal() && s.active() == vehicle) {
      const auto feasible = feasible_mask(s);
      StepOutput step_out = decode_step(tape, model, emb, route, s, feasible);
      std::size_t action = 0;
      if (!options.forced_actions.empty()) {
        const std::size_t t = s.step_count();
        if (t >= options.forced_actions.size()) throw ContractViolation("rollout: forced actions end early");
        action = options.forced_actions[t];
      } else if (options.mode == DecodeMode::kGreedy) {
        for (std::size_t j = 1; j < step_out.probs.size(); ++j)
          if (step_out.probs[j] > step_out.probs[action]) action = j;
      } else {
        action = rng.categorical(step_out.probs);
        if (action >= step_out.probs.size() || !feasible[action]) action = 0;
      }
      chosen.push_back(nk::slice_cols(step_out.log_probs, action, 1));
      entropies.push_back(step_out.entropy);
      const double lp = step_out.log_probs.at(0, action);
      const double ent = step_out.entropy.item();
      step_inplace(s, action);
      out.trajectory.steps.push_back({s.step_count() - 1, vehicle, action, s.vehicles()[vehicle].fuel, lp, ent});
    }
  }
  out.trajectory.routes = s.routes();
  out.trajectory.terminal = true;
  out.trajectory.reward = collected_prize(inst, out.trajectory.routes);
  out.log_prob = nk::sum(nk::concat_rows(chosen));
  out.entropy = nk::sum(nk::concat_rows(entropies));
  return out;
}

Trajectory rollout(const Ddtm& model, const Instance& inst, std::span<const std::size_t> order,
                   const RolloutOptions& options) {
  Tape tape(&model.params());
  return rollout(tape, model, inst, order, options).trajectory;
}

}  // namespace mstop
