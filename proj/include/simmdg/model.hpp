#pragma once

// Trainable components: per-modality encoders whose output is split into a
// shared and a specific half, the contrastive projection head, one translator
// per ordered modality pair, and the fused linear classifier.

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "simmdg/diffcalc.hpp"
#include "simmdg/errors.hpp"
#include "simmdg/rng.hpp"

namespace simmdg {

/// Module toggles: supervised contrastive learning, feature splitting,
/// distance loss, cross-modal translation.
struct Toggles {
  bool cl = true;
  bool fs = true;
  bool dl = true;
  bool ct = true;

  void validate() const {
    if (dl && !fs) throw ConfigError("toggles: distance loss (DL) requires feature splitting (FS)");
  }
  std::string label() const {
    std::string s;
    auto add = [&](bool on, const char* n) {
      if (!on) return;
      if (!s.empty()) s += '+';
      s += n;
    };
    add(cl, "CL");
    add(fs, "FS");
    add(dl, "DL");
    add(ct, "CT");
    return s.empty() ? "none" : s;
  }
  friend bool operator==(const Toggles&, const Toggles&) = default;
};

struct ModelConfig {
  std::vector<std::size_t> input_dims{32, 16, 24};
  std::size_t embed_dim = 16;  // D_E, so each embedding has 2 * embed_dim entries
  std::size_t encoder_hidden = 64;
  std::size_t proj_hidden = 64;
  std::size_t proj_dim = 16;
  std::size_t trans_hidden = 64;
  std::size_t num_classes = 7;
  Toggles toggles;

  std::size_t num_modalities() const { return input_dims.size(); }
  std::size_t full_dim() const { return 2 * embed_dim; }
  /// With feature splitting off the projection sees the whole embedding.
  std::size_t projection_input() const { return toggles.fs ? embed_dim : full_dim(); }

  void validate() const {
    if (input_dims.empty()) throw ConfigError("model: no modalities");
    for (auto d : input_dims)
      if (d == 0) throw ConfigError("model: input dims must be positive");
    if (embed_dim == 0 || encoder_hidden == 0 || proj_hidden == 0 || proj_dim == 0 ||
        trans_hidden == 0 || num_classes == 0) {
      throw ConfigError("model: all dims must be positive");
    }
    toggles.validate();
  }

  std::string canonical() const {
    std::ostringstream os;
    os << "in=";
    for (std::size_t i = 0; i < input_dims.size(); ++i) os << (i ? "," : "") << input_dims[i];
    os << ";de=" << embed_dim << ";eh=" << encoder_hidden << ";ph=" << proj_hidden
       << ";pd=" << proj_dim << ";th=" << trans_hidden << ";nc=" << num_classes
       << ";cl=" << toggles.cl << ";fs=" << toggles.fs << ";dl=" << toggles.dl
       << ";ct=" << toggles.ct;
    return os.str();
  }

  /// FNV-1a over canonical().
  std::uint64_t fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : canonical()) {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
    return h;
  }
};

struct Linear {
  ad::Node weight;  // in x out
  ad::Node bias;    // 1 x out

  ad::Node operator()(const ad::Node& x) const { return ad::add_row(ad::matmul(x, weight), bias); }
  std::size_t in() const { return weight.shape().rows; }
  std::size_t out() const { return weight.shape().cols; }
};

/// Linear layers with relu between them and none after the last.
struct Mlp {
  std::vector<Linear> layers;

  ad::Node operator()(ad::Node x) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](x);
      if (i + 1 < layers.size()) x = ad::relu(x);
    }
    return x;
  }
  std::size_t in() const { return layers.front().in(); }
  std::size_t out() const { return layers.back().out(); }
};

enum class ParamGroup { encoder, projection, translator, classifier };

inline const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::encoder: return "encoder";
    case ParamGroup::projection: return "projection";
    case ParamGroup::translator: return "translator";
    case ParamGroup::classifier: return "classifier";
  }
  return "?";
}

struct NamedParam {
  std::string name;
  ParamGroup group;
  ad::Node node;
};

/// Shared half first, specific half second. `full` is the unsplit encoder
/// output the halves were sliced from.
struct SplitEmbedding {
  ad::Node shared;
  ad::Node specific;
  ad::Node full;
  std::size_t modality = 0;
};

class ModelState {
 public:
  /// Scaled-uniform fan-in initialization: weights ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)),
  /// biases zero. Deterministic in seed.
  ModelState(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed, kInitStream);
    const auto m = cfg_.num_modalities();
    for (std::size_t k = 0; k < m; ++k) {
      encoders_.push_back(make_mlp({cfg_.input_dims[k], cfg_.encoder_hidden, cfg_.full_dim()}, rng));
    }
    projection_ = make_mlp({cfg_.projection_input(), cfg_.proj_hidden, cfg_.proj_hidden, cfg_.proj_dim}, rng);
    translators_.resize(m * m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        if (i == j) continue;
        translators_[i * m + j] = make_mlp(
            {cfg_.full_dim(), cfg_.trans_hidden, cfg_.trans_hidden, cfg_.full_dim()}, rng);
      }
    classifier_ = make_linear(m * cfg_.full_dim(), cfg_.num_classes, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  std::size_t num_modalities() const { return cfg_.num_modalities(); }

  const Mlp& encoder(std::size_t k) const { return encoders_.at(k); }
  const Mlp& projection() const { return projection_; }
  const Linear& classifier() const { return classifier_; }
  const Mlp& translator(std::size_t from, std::size_t to) const {
    const auto m = num_modalities();
    if (from >= m || to >= m) throw IndexError("translator: modality out of range");
    if (from == to) throw ContractError("translator: no self-translator for modality " + std::to_string(from));
    return translators_[from * m + to];
  }
  std::size_t translator_count() const {
    const auto m = num_modalities();
    return m * (m - 1);
  }

  /// Every parameter in canonical order (the checkpoint order).
  std::vector<NamedParam> parameters() const {
    std::vector<NamedParam> out;
    auto add_mlp = [&](const std::string& prefix, ParamGroup g, const Mlp& mlp) {
      for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
        out.push_back({prefix + ".layer" + std::to_string(l) + ".weight", g, mlp.layers[l].weight});
        out.push_back({prefix + ".layer" + std::to_string(l) + ".bias", g, mlp.layers[l].bias});
      }
    };
    const auto m = num_modalities();
    for (std::size_t k = 0; k < m; ++k) add_mlp("encoder." + std::to_string(k), ParamGroup::encoder, encoders_[k]);
    add_mlp("projection", ParamGroup::projection, projection_);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j)
        if (i != j) {
          add_mlp("translator." + std::to_string(i) + "->" + std::to_string(j), ParamGroup::translator,
                  translators_[i * m + j]);
        }
    out.push_back({"classifier.weight", ParamGroup::classifier, classifier_.weight});
    out.push_back({"classifier.bias", ParamGroup::classifier, classifier_.bias});
    return out;
  }

  std::vector<ad::Node> parameter_nodes() const {
    std::vector<ad::Node> out;
    for (auto& p : parameters()) out.push_back(p.node);
    return out;
  }
  std::vector<ad::Node> parameter_nodes(ParamGroup g) const {
    std::vector<ad::Node> out;
    for (auto& p : parameters())
      if (p.group == g) out.push_back(p.node);
    return out;
  }

  void zero_grad() const {
    for (auto& p : parameters()) p.node.zero_grad();
  }

  /// Deep copy: the clone shares no parameter storage with this state.
  ModelState clone() const {
    ModelState copy = *this;
    copy.rebind_fresh_leaves();
    return copy;
  }

  /// Copies parameter values from another state with the same config.
  void assign_from(const ModelState& other) {
    if (other.cfg_.fingerprint() != cfg_.fingerprint()) throw ContractError("assign_from: config mismatch");
    auto src = other.parameters();
    auto dst = parameters();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].node.mutable_value() = src[i].node.value();
  }

  static constexpr std::uint64_t kInitStream = 0x494E4954;  // "INIT"

 private:
  static Linear make_linear(std::size_t in, std::size_t out, Rng& rng) {
    Matrix w(in, out);
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    for (auto& v : w.values()) v = rng.uniform(-bound, bound);
    return {ad::Node::parameter(std::move(w)), ad::Node::parameter(Matrix(1, out))};
  }
  static Mlp make_mlp(std::vector<std::size_t> dims, Rng& rng) {
    Mlp mlp;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) mlp.layers.push_back(make_linear(dims[i], dims[i + 1], rng));
    return mlp;
  }

  void rebind_fresh_leaves() {
    auto fresh = [](Mlp& mlp) {
      for (auto& l : mlp.layers) {
        l.weight = ad::Node::parameter(l.weight.value());
        l.bias = ad::Node::parameter(l.bias.value());
      }
    };
    for (auto& e : encoders_) fresh(e);
    fresh(projection_);
    for (auto& t : translators_) fresh(t);
    classifier_.weight = ad::Node::parameter(classifier_.weight.value());
    classifier_.bias = ad::Node::parameter(classifier_.bias.value());
  }

  ModelConfig cfg_;
  std::vector<Mlp> encoders_;
  Mlp projection_;
  std::vector<Mlp> translators_;  // [from * M + to]; diagonal unused
  Linear classifier_;
};

inline ModelState init_model(const ModelConfig& cfg, std::uint64_t seed) { return ModelState(cfg, seed); }

// ---------------------------------------------------------------------------
// Forward pieces

/// The one place the shared-first split convention lives.
inline SplitEmbedding split_embedding(const ad::Node& full, std::size_t modality) {
  auto [shared, specific] = ad::slice_halves(full);
  return {shared, specific, full, modality};
}

inline SplitEmbedding encode_modality(const ModelState& state, std::size_t k, const ad::Node& x) {
  if (k >= state.num_modalities()) throw IndexError("encode: modality " + std::to_string(k));
  const auto want = state.config().input_dims[k];
  if (x.shape().cols != want) {
    throw DimensionError("encode: modality " + std::to_string(k) + " expects width " +
                         std::to_string(want) + ", got " + to_string(x.shape()));
  }
  return split_embedding(state.encoder(k)(x), k);
}

/// Encodes every modality; inputs[k] is (batch x input_dims[k]).
inline std::vector<SplitEmbedding> encode(const ModelState& state, std::span<const Matrix> inputs) {
  if (inputs.size() != state.num_modalities()) {
    throw DimensionError("encode: " + std::to_string(inputs.size()) + " inputs for " +
                         std::to_string(state.num_modalities()) + " modalities");
  }
  std::vector<SplitEmbedding> out;
  for (std::size_t k = 0; k < inputs.size(); ++k)
    out.push_back(encode_modality(state, k, ad::Node::constant(inputs[k])));
  return out;
}

/// Projection head; output is not normalized.
inline ad::Node project(const ModelState& state, const ad::Node& features) {
  if (features.shape().cols != state.config().projection_input()) {
    throw DimensionError("project: expects width " + std::to_string(state.config().projection_input()) +
                         ", got " + to_string(features.shape()));
  }
  return state.projection()(features);
}

/// Maps the full embedding of modality `from` to an estimate of modality `to`'s.
inline ad::Node translate(const ModelState& state, std::size_t from, std::size_t to, const ad::Node& full) {
  const auto& mlp = state.translator(from, to);
  if (full.shape().cols != state.config().full_dim()) {
    throw DimensionError("translate: expects width " + std::to_string(state.config().full_dim()) +
                         ", got " + to_string(full.shape()));
  }
  return mlp(full);
}

/// Logits from the concatenation of all M full embeddings.
inline ad::Node classify(const ModelState& state, const std::vector<ad::Node>& embeddings) {
  if (embeddings.size() != state.num_modalities()) {
    throw DimensionError("classify: " + std::to_string(embeddings.size()) + " embeddings for " +
                         std::to_string(state.num_modalities()) + " modalities");
  }
  for (const auto& e : embeddings) {
    if (e.shape().cols != state.config().full_dim()) {
      throw DimensionError("classify: embedding width " + to_string(e.shape()) + ", expected " +
                           std::to_string(state.config().full_dim()));
    }
  }
  return state.classifier()(ad::concat(embeddings));
}

// ---------------------------------------------------------------------------
// Checkpoint format (all integers and doubles little-endian):
//   8 bytes  magic "SIMMDGCK"
//   u32      format version
//   u64      config fingerprint
//   u32      parameter count
//   per parameter: u32 name length, name bytes, u64 rows, u64 cols, rows*cols f64

inline constexpr char kCheckpointMagic[8] = {'S', 'I', 'M', 'M', 'D', 'G', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace ckpt_detail {

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw LoadError("checkpoint: truncated");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace ckpt_detail

inline std::vector<std::uint8_t> serialize(const ModelState& state) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  ckpt_detail::put<std::uint32_t>(out, kCheckpointVersion);
  ckpt_detail::put<std::uint64_t>(out, state.config().fingerprint());
  const auto params = state.parameters();
  ckpt_detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    ckpt_detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.insert(out.end(), p.name.begin(), p.name.end());
    const auto& v = p.node.value();
    ckpt_detail::put<std::uint64_t>(out, v.rows());
    ckpt_detail::put<std::uint64_t>(out, v.cols());
    for (double x : v.values()) ckpt_detail::put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(x));
  }
  return out;
}

/// Rebuilds a state for `cfg` from checkpoint bytes. The stored fingerprint,
/// names and shapes must all match what `cfg` produces.
inline ModelState deserialize(std::span<const std::uint8_t> bytes, const ModelConfig& cfg) {
  ckpt_detail::Reader in(bytes);
  if (in.get_string(sizeof(kCheckpointMagic)) != std::string(kCheckpointMagic, sizeof(kCheckpointMagic))) {
    throw LoadError("checkpoint: bad magic");
  }
  if (const auto v = in.get<std::uint32_t>(); v != kCheckpointVersion) {
    throw LoadError("checkpoint: unsupported format version " + std::to_string(v));
  }
  if (const auto fp = in.get<std::uint64_t>(); fp != cfg.fingerprint()) {
    throw LoadError("checkpoint: config fingerprint mismatch (expected " + cfg.canonical() + ")");
  }
  ModelState state(cfg, 0);
  auto params = state.parameters();
  if (const auto n = in.get<std::uint32_t>(); n != params.size()) {
    throw LoadError("checkpoint: " + std::to_string(n) + " parameters, expected " + std::to_string(params.size()));
  }
  for (auto& p : params) {
    const auto name = in.get_string(in.get<std::uint32_t>());
    if (name != p.name) throw LoadError("checkpoint: expected parameter " + p.name + ", found " + name);
    const auto rows = in.get<std::uint64_t>();
    const auto cols = in.get<std::uint64_t>();
    auto& v = p.node.mutable_value();
    if (rows != v.rows() || cols != v.cols()) throw LoadError("checkpoint: shape mismatch for " + name);
    for (auto& x : v.values()) x = std::bit_cast<double>(in.get<std::uint64_t>());
  }
  if (!in.done()) throw LoadError("checkpoint: trailing bytes");
  return state;
}

inline void save_checkpoint(const std::string& path, const ModelState& state) {
  const auto bytes = serialize(state);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline ModelState load_checkpoint(const std::string& path, const ModelConfig& cfg) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize(bytes, cfg);
}

}  // namespace simmdg
