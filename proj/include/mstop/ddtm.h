#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mstop/env.h"
#include "mstop/numkit.h"

namespace mstop {

struct DdtmConfig {
  std::size_t d = 32;          // embedding width
  std::size_t heads = 4;
  std::size_t ff_width = 128;  // hidden width of the encoder feed-forward block
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 1;
  double clip = 10.0;          // logits are C * tanh(.)

  static DdtmConfig full_scale() { return {128, 8, 512, 4, 2, 10.0}; }
  std::size_t head_width() const { return d / heads; }
  // Throws std::invalid_argument.
  void validate() const;
  bool operator==(const DdtmConfig&) const = default;
};

// Owns every weight of the encoder/decoder, registered under unique names.
class Ddtm {
 public:
  explicit Ddtm(DdtmConfig config);

  const DdtmConfig& config() const { return config_; }
  nk::ParameterSet& params() { return params_; }
  const nk::ParameterSet& params() const { return params_; }

  // Uniform weights in [-1/sqrt(rows), 1/sqrt(rows)]; batch-norm scale 1,
  // shift 0, running mean 0 and running variance 1.
  void init(std::uint64_t seed);

  struct EncoderLayer {
    std::size_t wq, wk, wv, wout, ff0, ff1;
    std::size_t bn1_gamma, bn1_beta, bn1_mean, bn1_var;
    std::size_t bn2_gamma, bn2_beta, bn2_mean, bn2_var;
  };
  struct AttentionWeights {
    std::size_t wq, wk, wv, wout;
  };
  struct DecoderLayer {
    AttentionWeights self_attn;
    AttentionWeights cross_attn;
  };

  std::size_t init_depot = 0, init_node = 0, init_vehicle = 0;
  std::vector<EncoderLayer> encoder;
  std::size_t context_proj = 0;
  std::vector<DecoderLayer> decoder;
  std::size_t graph_proj = 0;
  std::size_t final_q = 0, final_k = 0;

 private:
  DdtmConfig config_;
  nk::ParameterSet params_;
};

// Rows: depot, customers 1..n, vehicles 1..K.
struct Embeddings {
  nk::Tensor nodes;                 // (n + K + 1) x d
  nk::Tensor graph;                 // 1 x d, mean over valid rows
  std::vector<bool> valid;          // unvisited customers, vehicles not at the depot, depot
  std::size_t valid_count = 0;
};

Embeddings encode(nk::Tape& tape, const Ddtm& model, const State& s, nk::NormMode mode);

// Per-route decoder state: cached key/value projections of the context
// nodes and the self-attention history of each decoder layer.
struct RouteContext {
  struct Heads {
    std::vector<nk::Tensor> keys_t;  // per head, width x rows (transposed)
    std::vector<nk::Tensor> values;  // per head, rows x width
  };
  std::size_t vehicle = 0;
  std::vector<Heads> cross;          // per decoder layer, over depot + customers + active vehicle
  nk::Tensor final_keys_t;           // d x (n + 1)
  nk::Tensor graph_term;             // 1 x d projected graph embedding
  std::vector<std::vector<nk::Tensor>> history;  // per decoder layer
};

RouteContext begin_route(nk::Tape& tape, const Ddtm& model, const Embeddings& emb, const State& s);

struct StepOutput {
  nk::Tensor logits;     // 1 x (n + 1), clamped to [-C, C], unmasked
  nk::Tensor log_probs;  // 1 x (n + 1), masked log-softmax
  nk::Tensor entropy;    // 1 x 1
  std::vector<double> probs;
};

// Action distribution for the active vehicle of `s`. Appends this step's
// context row to `route.history`.
StepOutput decode_step(nk::Tape& tape, const Ddtm& model, const Embeddings& emb, RouteContext& route,
                       const State& s, const std::vector<bool>& feasible);

// Positional encoding row for decode step t (flat-index parity selects
// sin or cos, exponent 2i/d).
std::vector<double> positional_encoding(std::size_t t, std::size_t d);

enum class DecodeMode { kGreedy, kSample };

struct RolloutOptions {
  DecodeMode mode = DecodeMode::kGreedy;
  std::uint64_t seed = 0;
  nk::NormMode norm = nk::NormMode::kEval;
  // When non-empty, these actions are taken instead of decoding choices
  // (used to re-evaluate a fixed trajectory under new parameters).
  std::span<const std::size_t> forced_actions;
};

struct Rollout {
  Trajectory trajectory;
  nk::Tensor log_prob;  // 1 x 1, sum of chosen-action log-probabilities
  nk::Tensor entropy;   // 1 x 1, sum of per-step entropies
};

// Encodes once per vehicle and decodes until that vehicle returns to the
// depot. The tape must be bound to model.params().
Rollout rollout(nk::Tape& tape, const Ddtm& model, const Instance& inst, std::span<const std::size_t> order,
                const RolloutOptions& options);
Trajectory rollout(const Ddtm& model, const Instance& inst, std::span<const std::size_t> order,
                   const RolloutOptions& options);

}  // namespace mstop
