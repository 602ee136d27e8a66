#pragma once

// Test-time prediction with all modalities, or with some missing: a missing
// modality's embedding is either replaced by zeros or by the mean translation
// from the modalities that are available.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "simmdg/diffcalc.hpp"
#include "simmdg/errors.hpp"
#include "simmdg/losses.hpp"
#include "simmdg/model.hpp"
#include "simmdg/optim.hpp"
#include "simmdg/rng.hpp"
#include "simmdg/synthgen.hpp"

namespace simmdg {

struct MissingMask {
  std::set<std::size_t> missing;

  bool empty() const { return missing.empty(); }
  bool contains(std::size_t k) const { return missing.count(k) != 0; }

  /// At least one modality must stay available.
  void validate(std::size_t num_modalities) const {
    for (auto k : missing)
      if (k >= num_modalities) throw IndexError("missing mask: modality " + std::to_string(k) + " out of range");
    if (missing.size() >= num_modalities) throw ContractError("missing mask: every modality is masked");
  }

  std::string label(std::span<const std::string> names = {}, char sep = ',') const {
    if (missing.empty()) return "none";
    std::string s;
    for (auto k : missing) {
      if (!s.empty()) s += sep;
      s += k < names.size() ? names[k] : std::to_string(k);
    }
    return s;
  }
};

/// Parses "video,flow" against modality names; numeric indices are accepted too.
inline MissingMask parse_missing_mask(const std::string& text, std::span<const std::string> names) {
  MissingMask mask;
  std::istringstream in(text);
  std::string tok;
  while (std::getline(in, tok, ',')) {
    tok.erase(0, tok.find_first_not_of(" \t"));
    tok.erase(tok.find_last_not_of(" \t") + 1);
    if (tok.empty()) continue;
    auto it = std::find(names.begin(), names.end(), tok);
    if (it != names.end()) {
      mask.missing.insert(static_cast<std::size_t>(it - names.begin()));
      continue;
    }
    if (tok.find_first_not_of("0123456789") == std::string::npos) {
      mask.missing.insert(std::stoul(tok));
      continue;
    }
    std::string valid;
    for (const auto& n : names) valid += (valid.empty() ? "" : ", ") + n;
    throw ConfigError("unknown modality '" + tok + "' (valid: " + valid + ")");
  }
  return mask;
}

enum class FillMode { zero, translate };

inline const char* to_string(FillMode f) { return f == FillMode::zero ? "zero" : "translate"; }

/// Full embeddings for every modality; masked slots are filled per `fill`.
/// Masked inputs are never read and may be empty.
inline std::vector<ad::Node> fill_embeddings(const ModelState& state, std::span<const Matrix> inputs,
                                             const MissingMask& mask, FillMode fill) {
  const auto m = state.num_modalities();
  if (inputs.size() != m) {
    throw DimensionError("predict: " + std::to_string(inputs.size()) + " inputs for " + std::to_string(m) +
                         " modalities");
  }
  mask.validate(m);
  std::vector<ad::Node> full(m);
  std::vector<std::size_t> avail;
  std::size_t rows = 0;
  for (std::size_t k = 0; k < m; ++k) {
    if (mask.contains(k)) continue;
    full[k] = encode_modality(state, k, ad::Node::constant(inputs[k])).full;
    rows = full[k].shape().rows;
    avail.push_back(k);
  }
  for (auto i : mask.missing) {
    if (fill == FillMode::zero) {
      full[i] = ad::Node::constant(Matrix(rows, state.config().full_dim()));
      continue;
    }
    ad::Node acc = translate(state, avail.front(), i, full[avail.front()]);
    for (std::size_t a = 1; a < avail.size(); ++a) acc = ad::add(acc, translate(state, avail[a], i, full[avail[a]]));
    full[i] = ad::scale(acc, 1.0 / static_cast<double>(avail.size()));
  }
  return full;
}

inline Matrix predict_full(const ModelState& state, std::span<const Matrix> inputs) {
  return classify(state, fill_embeddings(state, inputs, {}, FillMode::zero)).value();
}

inline Matrix predict_zero_fill(const ModelState& state, std::span<const Matrix> inputs, const MissingMask& mask) {
  return classify(state, fill_embeddings(state, inputs, mask, FillMode::zero)).value();
}

/// Each missing slot i gets (1/|avail|) sum_{j in avail} translate_{j->i}(E^j).
/// With one modality missing this averages over all M-1 others.
inline Matrix predict_translated(const ModelState& state, std::span<const Matrix> inputs, const MissingMask& mask) {
  return classify(state, fill_embeddings(state, inputs, mask, FillMode::translate)).value();
}

inline Matrix predict(const ModelState& state, std::span<const Matrix> inputs, const MissingMask& mask,
                      FillMode fill) {
  return classify(state, fill_embeddings(state, inputs, mask, fill)).value();
}

/// Row argmax; ties go to the lowest class index.
inline std::vector<std::size_t> argmax_rows(const Matrix& logits) {
  std::vector<std::size_t> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto row = logits.row_span(i);
    out[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Translator fine-tuning

struct FinetuneSettings {
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  AdamConfig adam{};
  std::uint64_t seed = 0;
};

struct FinetuneResult {
  ModelState state;
  /// Full-pass translation loss before training and after each epoch.
  std::vector<double> trans_loss;
};

namespace infer_detail {

inline Matrix take_rows(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(idx.size(), m.cols());
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy(m.row_span(idx[r]).begin(), m.row_span(idx[r]).end(), out.row_span(r).begin());
  return out;
}

inline double full_pass_trans_loss(const ModelState& state, const std::vector<Matrix>& emb) {
  std::vector<ad::Node> nodes;
  for (const auto& e : emb) nodes.push_back(ad::Node::constant(e));
  return translation_loss(state, nodes).item();
}

}  // namespace infer_detail

/// Retrains only the translators on the translation loss with encoders frozen.
/// Every other parameter of the returned state is bit-identical to the input.
inline FinetuneResult finetune_translators(const ModelState& trained, const Dataset& data,
                                           const FinetuneSettings& s) {
  FinetuneResult result{trained.clone(), {}};
  auto& state = result.state;
  if (data.empty()) throw ContractError("finetune: no data");
  const auto m = state.num_modalities();
  if (m < 2) throw ContractError("finetune: needs at least two modalities");

  const auto idx = all_indices(data);
  const auto inputs = modality_matrices(data, idx);
  std::vector<Matrix> emb;
  for (std::size_t k = 0; k < m; ++k)
    emb.push_back(encode_modality(state, k, ad::Node::constant(inputs[k])).full.value());

  result.trans_loss.push_back(infer_detail::full_pass_trans_loss(state, emb));
  if (s.epochs == 0) return result;

  Adam opt(state.parameter_nodes(ParamGroup::translator), s.adam);
  Rng rng(s.seed, 0x46544E45);  // "FTNE"
  std::vector<std::size_t> order = idx;
  const auto bs = std::max<std::size_t>(1, s.batch_size);
  for (std::size_t epoch = 0; epoch < s.epochs; ++epoch) {
    rng.shuffle(std::span(order));
    for (std::size_t at = 0; at < order.size(); at += bs) {
      const auto batch = std::span(order).subspan(at, std::min(bs, order.size() - at));
      std::vector<ad::Node> nodes;
      for (const auto& e : emb) nodes.push_back(ad::Node::constant(infer_detail::take_rows(e, batch)));
      opt.zero_grad();
      ad::backward(translation_loss(state, nodes));
      opt.step();
    }
    result.trans_loss.push_back(infer_detail::full_pass_trans_loss(state, emb));
  }
  return result;
}

}  // namespace simmdg
