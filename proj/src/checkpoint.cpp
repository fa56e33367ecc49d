#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

#include "mstop/numkit.h"

namespace mstop::nk {

namespace {

constexpr char kMagic[6] = {'M', 'S', 'T', 'O', 'P', '\0'};

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes little-endian hosts");

struct Block {
  std::string name;
  std::vector<std::uint64_t> extents;
  std::vector<double> data;
};

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4)) throw std::runtime_error("checkpoint: truncated file");
  return v;
}
std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 8)) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

void write_block(std::ostream& os, const std::string& name, std::vector<std::uint64_t> extents,
                 const std::vector<double>& data) {
  write_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_u32(os, static_cast<std::uint32_t>(extents.size()));
  for (auto e : extents) write_u64(os, e);
  os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * 8));
}

Block read_block(std::istream& is) {
  Block b;
  const auto len = read_u32(is);
  if (len > (1u << 16)) throw std::runtime_error("checkpoint: implausible block name length");
  b.name.resize(len);
  if (!is.read(b.name.data(), len)) throw std::runtime_error("checkpoint: truncated file");
  const auto rank = read_u32(is);
  if (rank > 8) throw std::runtime_error("checkpoint: implausible rank in block " + b.name);
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    b.extents.push_back(read_u64(is));
    count *= b.extents.back();
  }
  if (count > (1ull << 28)) throw std::runtime_error("checkpoint: implausible size in block " + b.name);
  b.data.resize(count);
  if (!is.read(reinterpret_cast<char*>(b.data.data()), static_cast<std::streamsize>(count * 8)))
    throw std::runtime_error("checkpoint: truncated payload in block " + b.name);
  return b;
}

std::string extents_str(const std::vector<std::uint64_t>& e) {
  std::string s = "[";
  for (std::size_t i = 0; i < e.size(); ++i) s += (i ? " x " : "") + std::to_string(e[i]);
  return s + "]";
}

}  // namespace

void save_checkpoint(const std::string& path, const ParameterSet& params, const AdamState* adam) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  os.write(kMagic, sizeof kMagic);
  write_u32(os, kCheckpointVersion);
  write_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) write_block(os, p.name, {p.shape.rows, p.shape.cols}, p.value);

  std::vector<std::pair<std::string, const std::vector<double>*>> opt;
  std::vector<double> header;
  if (adam != nullptr) {
    header = {adam->config.lr, adam->config.beta1, adam->config.beta2, adam->config.eps,
              static_cast<double>(adam->step)};
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params[i].trainable) continue;
      opt.emplace_back("adam.m." + params[i].name, &adam->m[i]);
      opt.emplace_back("adam.v." + params[i].name, &adam->v[i]);
    }
  }
  write_u32(os, adam ? static_cast<std::uint32_t>(opt.size() + 1) : 0);
  if (adam != nullptr) {
    write_block(os, "adam.state", {header.size()}, header);
    for (const auto& [name, data] : opt) {
      const auto& p = params[params.index(name.substr(7))];
      write_block(os, name, {p.shape.rows, p.shape.cols}, *data);
    }
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

void load_checkpoint(const std::string& path, ParameterSet& params, AdamState* adam) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[6];
  if (!is.read(magic, 6) || std::memcmp(magic, kMagic, 6) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const auto version = read_u32(is);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));

  std::map<std::string, Block> blocks;
  const auto nparams = read_u32(is);
  for (std::uint32_t i = 0; i < nparams; ++i) {
    auto b = read_block(is);
    blocks.emplace(b.name, std::move(b));
  }
  std::map<std::string, Block> opt_blocks;
  const auto nopt = read_u32(is);
  for (std::uint32_t i = 0; i < nopt; ++i) {
    auto b = read_block(is);
    opt_blocks.emplace(b.name, std::move(b));
  }

  // Validate everything before mutating the destination.
  for (const auto& p : params) {
    auto it = blocks.find(p.name);
    if (it == blocks.end()) throw std::runtime_error("checkpoint: missing parameter " + p.name);
    const std::vector<std::uint64_t> want{p.shape.rows, p.shape.cols};
    if (it->second.extents != want)
      throw std::runtime_error("checkpoint: shape mismatch for " + p.name + ": file " +
                               extents_str(it->second.extents) + " vs model " + extents_str(want));
  }
  for (auto& p : params) p.value = blocks.at(p.name).data;

  if (adam == nullptr) return;
  if (opt_blocks.empty()) throw std::runtime_error("checkpoint: no optimizer state in " + path);
  const auto& h = opt_blocks.at("adam.state").data;
  if (h.size() != 5) throw std::runtime_error("checkpoint: malformed optimizer header");
  AdamState s = AdamState::for_params(params, {h[0], h[1], h[2], h[3]});
  s.step = static_cast<std::uint64_t>(h[4]);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    auto m = opt_blocks.find("adam.m." + params[i].name);
    auto v = opt_blocks.find("adam.v." + params[i].name);
    if (m == opt_blocks.end() || v == opt_blocks.end())
      throw std::runtime_error("checkpoint: missing optimizer moments for " + params[i].name);
    if (m->second.data.size() != params[i].value.size() || v->second.data.size() != params[i].value.size())
      throw std::runtime_error("checkpoint: moment shape mismatch for " + params[i].name);
    s.m[i] = m->second.data;
    s.v[i] = v->second.data;
  }
  *adam = std::move(s);
}

}  // namespace mstop::nk
