#pragma once

// The four training objectives and their weighted sum:
//   classification  mean softmax cross-entropy
//   contrastive     multi-modal supervised contrastive loss over M*N entries
//   distance        pushes each modality's specific half away from its shared half
//   translation     mean squared error of every ordered cross-modal translator

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "simmdg/diffcalc.hpp"
#include "simmdg/errors.hpp"
#include "simmdg/model.hpp"

namespace simmdg {

enum class DistanceKind { neg_sq_l2, neg_l1, cosine };

inline std::string_view to_string(DistanceKind k) {
  switch (k) {
    case DistanceKind::neg_sq_l2: return "neg-sq-l2";
    case DistanceKind::neg_l1: return "neg-l1";
    case DistanceKind::cosine: return "cosine";
  }
  return "?";
}

inline DistanceKind parse_distance_kind(std::string_view s) {
  if (s == "neg-sq-l2" || s == "l2") return DistanceKind::neg_sq_l2;
  if (s == "neg-l1" || s == "l1") return DistanceKind::neg_l1;
  if (s == "cosine") return DistanceKind::cosine;
  throw ConfigError("unknown distance kind '" + std::string(s) + "' (neg-sq-l2, neg-l1, cosine)");
}

struct LossWeights {
  double alpha_con = 3.0;
  double alpha_dis = 0.7;
  double alpha_trans = 0.1;

  void validate() const {
    if (!(alpha_con >= 0.0 && alpha_dis >= 0.0 && alpha_trans >= 0.0)) {
      throw ConfigError("loss weights must be non-negative");
    }
  }
};

/// M*N projected vectors, one row each, sample-major: row j*M + k holds
/// modality k of sample j. Labels are replicated across a sample's M rows.
struct ContrastiveBatch {
  ad::Node z;
  std::vector<std::size_t> labels;
  double tau = 0.1;
};

/// Projects each modality's shared half (or the full embedding when feature
/// splitting is off) and interleaves the rows sample-major.
/// `embeddings[k]` holds modality k for all N samples.
inline ContrastiveBatch build_contrastive_batch(const ModelState& state,
                                                const std::vector<SplitEmbedding>& embeddings,
                                                std::span<const std::size_t> labels, double tau) {
  const auto m = embeddings.size();
  const auto n = labels.size();
  if (m == 0 || n == 0) throw DimensionError("contrastive batch: need at least one sample and modality");
  std::vector<ad::Node> feats;
  for (const auto& e : embeddings) {
    const auto& f = state.config().toggles.fs ? e.shared : e.full;
    if (f.shape().rows != n) {
      throw DimensionError("contrastive batch: modality " + std::to_string(e.modality) + " has " +
                           std::to_string(f.shape().rows) + " rows for " + std::to_string(n) + " labels");
    }
    feats.push_back(f);
  }
  auto z = project(state, ad::vstack(feats));  // modality-major: row k*N + j
  std::vector<std::size_t> order(m * n);
  ContrastiveBatch batch;
  batch.labels.resize(m * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t k = 0; k < m; ++k) {
      order[j * m + k] = k * n + j;
      batch.labels[j * m + k] = labels[j];
    }
  batch.z = ad::gather_rows(z, std::move(order));
  batch.tau = tau;
  return batch;
}

/// For each anchor i with at least one positive:
///   -1/|P(i)| sum_{p in P(i)} log( exp(zi.zp/tau) / sum_{a != i} exp(zi.za/tau) )
/// summed over anchors, with z rows scaled to unit length first. Anchors with
/// no positive are skipped with a warning.
inline ad::Node supervised_contrastive_loss(const ContrastiveBatch& batch) {
  if (!(batch.tau > 0.0)) throw ConfigError("contrastive loss: tau must be positive");
  const auto n = batch.z.shape().rows;
  if (batch.labels.size() != n) throw DimensionError("contrastive loss: labels/z length mismatch");

  std::vector<std::size_t> anchors;
  std::vector<std::size_t> positives(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < n; ++p)
      if (p != i && batch.labels[p] == batch.labels[i]) ++positives[i];
    if (positives[i] > 0) anchors.push_back(i);
  }
  if (anchors.size() < n) {
    log::warn("contrastive loss: skipped " + std::to_string(n - anchors.size()) +
              " anchor(s) without a positive");
  }
  if (anchors.empty()) return ad::Node::constant(Matrix::scalar(0.0));

  const auto zn = ad::normalize_rows(batch.z);
  const auto sim = ad::scale(ad::matmul(zn, ad::transpose(zn)), 1.0 / batch.tau);
  const auto rows = ad::gather_rows(sim, anchors);

  Matrix others(anchors.size(), n, 1.0);
  Matrix weights(anchors.size(), n, 0.0);
  for (std::size_t r = 0; r < anchors.size(); ++r) {
    const auto i = anchors[r];
    others(r, i) = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      if (p != i && batch.labels[p] == batch.labels[i]) weights(r, p) = 1.0 / static_cast<double>(positives[i]);
  }
  const auto denom = ad::sum(ad::logsumexp_rows(rows, others));
  const auto attract = ad::sum(ad::mul(rows, ad::Node::constant(std::move(weights))));
  return ad::sub(denom, attract);
}

/// Mean over samples of the per-sample distance objective; with M modalities:
///   neg-sq-l2  -(1/M) sum_i |e_s - e_c|^2
///   neg-l1     -(1/M) sum_i |e_s - e_c|_1
///   cosine     +(1/M) sum_i cos(e_s, e_c), denominators guarded by 1e-8
inline ad::Node distance_loss(const std::vector<SplitEmbedding>& embeddings,
                              DistanceKind kind = DistanceKind::neg_sq_l2) {
  if (embeddings.empty()) throw ContractError("distance loss: no embeddings");
  const auto rows = embeddings.front().shared.shape().rows;
  const double norm = 1.0 / static_cast<double>(embeddings.size() * rows);
  std::vector<ad::Node> terms;
  for (const auto& e : embeddings) {
    switch (kind) {
      case DistanceKind::neg_sq_l2:
        terms.push_back(ad::sq_l2(e.specific, e.shared));
        break;
      case DistanceKind::neg_l1:
        terms.push_back(ad::sum(ad::abs(ad::sub(e.specific, e.shared))));
        break;
      case DistanceKind::cosine: {
        const auto dot = ad::sum_rows(ad::mul(e.specific, e.shared));
        const auto den = ad::add_scalar(ad::mul(ad::row_norms(e.specific), ad::row_norms(e.shared)), 1e-8);
        terms.push_back(ad::sum(ad::div(dot, den)));
        break;
      }
    }
  }
  auto total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
  return ad::scale(total, kind == DistanceKind::cosine ? norm : -norm);
}

/// (1 / (M(M-1))) sum_i sum_{j != i} |translate_{i->j}(E^i) - E^j|^2, averaged
/// over the batch. Targets stay attached to the encoder graph.
inline ad::Node translation_loss(const ModelState& state, const std::vector<ad::Node>& full) {
  const auto m = full.size();
  if (m < 2) throw ContractError("translation loss: needs at least two modalities");
  const auto rows = full.front().shape().rows;
  std::vector<ad::Node> terms;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j)
      if (i != j) terms.push_back(ad::sq_l2(translate(state, i, j, full[i]), full[j]));
  auto total = terms.front();
  for (std::size_t t = 1; t < terms.size(); ++t) total = ad::add(total, terms[t]);
  return ad::scale(total, 1.0 / static_cast<double>(m * (m - 1) * rows));
}

inline ad::Node translation_loss(const ModelState& state, const std::vector<SplitEmbedding>& embeddings) {
  std::vector<ad::Node> full;
  for (const auto& e : embeddings) full.push_back(e.full);
  return translation_loss(state, full);
}

/// Mean cross-entropy of logits rows against labels.
inline ad::Node classification_loss(const ad::Node& logits, std::span<const std::size_t> labels) {
  if (labels.empty()) throw DimensionError("classification loss: empty batch");
  return ad::mean(ad::softmax_cross_entropy(logits, labels));
}

/// Components that exist for the active toggles. A disabled component is
/// absent and contributes nothing.
struct LossTerms {
  ad::Node cls;
  std::optional<ad::Node> con;
  std::optional<ad::Node> dis;
  std::optional<ad::Node> trans;
};

/// cls + alpha_con con + alpha_dis dis + alpha_trans trans, summed in that order.
inline ad::Node total_loss(const LossTerms& terms, const LossWeights& w, const Toggles& toggles) {
  toggles.validate();
  auto total = terms.cls;
  if (toggles.cl && terms.con) total = ad::add(total, ad::scale(*terms.con, w.alpha_con));
  if (toggles.dl && terms.dis) total = ad::add(total, ad::scale(*terms.dis, w.alpha_dis));
  if (toggles.ct && terms.trans) total = ad::add(total, ad::scale(*terms.trans, w.alpha_trans));
  return total;
}

struct ObjectiveSettings {
  LossWeights weights;
  double tau = 0.1;
  DistanceKind distance = DistanceKind::neg_sq_l2;
};

/// One step's objective on a minibatch: encodes, builds only the components
/// the model's toggles enable, and combines them.
struct Objective {
  ad::Node total;
  LossTerms terms;
};

inline Objective compute_objective(const ModelState& state, std::span<const Matrix> inputs,
                                   std::span<const std::size_t> labels, const ObjectiveSettings& s) {
  const auto& tg = state.config().toggles;
  const auto emb = encode(state, inputs);
  std::vector<ad::Node> full;
  for (const auto& e : emb) full.push_back(e.full);
  Objective o;
  o.terms.cls = classification_loss(classify(state, full), labels);
  if (tg.cl) o.terms.con = supervised_contrastive_loss(build_contrastive_batch(state, emb, labels, s.tau));
  if (tg.dl) o.terms.dis = distance_loss(emb, s.distance);
  if (tg.ct && state.num_modalities() >= 2) o.terms.trans = translation_loss(state, full);
  o.total = total_loss(o.terms, s.weights, tg);
  return o;
}

}  // namespace simmdg
