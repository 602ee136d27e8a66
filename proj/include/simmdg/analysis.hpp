#pragma once

// Post-hoc analyses on trained models and on small discrete joints.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "simmdg/diffcalc.hpp"
#include "simmdg/errors.hpp"
#include "simmdg/inference.hpp"
#include "simmdg/losses.hpp"
#include "simmdg/model.hpp"
#include "simmdg/optim.hpp"
#include "simmdg/rng.hpp"
#include "simmdg/synthgen.hpp"

namespace simmdg {

// ---------------------------------------------------------------------------
// Cross-modal retrieval

enum class FeaturePart { shared, specific };

inline const char* to_string(FeaturePart p) { return p == FeaturePart::shared ? "shared" : "specific"; }

struct FeatureBank {
  Matrix features;  // one row per item
  std::vector<std::size_t> labels;
  std::size_t modality = 0;
  FeaturePart part = FeaturePart::shared;

  std::size_t size() const { return labels.size(); }
  void validate() const {
    if (features.rows() != labels.size()) throw DimensionError("feature bank: features/labels length mismatch");
  }
};

inline FeatureBank feature_bank(const ModelState& state, const Dataset& data, std::size_t modality, FeaturePart part) {
  const auto idx = all_indices(data);
  const auto e = encode_modality(state, modality, ad::Node::constant(modality_matrix(data, idx, modality)));
  FeatureBank bank;
  bank.features = (part == FeaturePart::shared ? e.shared : e.specific).value();
  for (const auto& s : data) bank.labels.push_back(s.label);
  bank.modality = modality;
  bank.part = part;
  return bank;
}

/// Fraction of queries whose k most cosine-similar gallery items include one
/// with the query's label. Ties in similarity go to the lower gallery index.
inline double retrieval_recall_at_k(const FeatureBank& query, const FeatureBank& gallery, std::size_t k) {
  query.validate();
  gallery.validate();
  if (k == 0) throw ContractError("recall@k: k must be at least 1");
  if (gallery.size() == 0) throw ContractError("recall@k: empty gallery");
  if (query.size() == 0) throw ContractError("recall@k: empty query bank");
  if (query.features.cols() != gallery.features.cols()) throw DimensionError("recall@k: bank widths differ");
  if (k > gallery.size()) {
    log::warn("recall@k: k=" + std::to_string(k) + " exceeds gallery size " + std::to_string(gallery.size()) +
              "; clamped");
    k = gallery.size();
  }
  auto norm = [](std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };
  std::vector<double> gnorm(gallery.size());
  for (std::size_t g = 0; g < gallery.size(); ++g) gnorm[g] = norm(gallery.features.row_span(g));

  std::size_t hits = 0;
  std::vector<double> sim(gallery.size());
  std::vector<std::size_t> order(gallery.size());
  for (std::size_t q = 0; q < query.size(); ++q) {
    const auto qv = query.features.row_span(q);
    const double qn = norm(qv);
    for (std::size_t g = 0; g < gallery.size(); ++g) {
      const auto gv = gallery.features.row_span(g);
      double dot = 0.0;
      for (std::size_t i = 0; i < qv.size(); ++i) dot += qv[i] * gv[i];
      const double den = qn * gnorm[g];
      sim[g] = den > 0.0 ? dot / den : 0.0;
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) { return sim[a] != sim[b] ? sim[a] > sim[b] : a < b; });
    for (std::size_t r = 0; r < k; ++r) {
      if (gallery.labels[order[r]] == query.labels[q]) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(query.size());
}

struct RetrievalRow {
  std::size_t query_modality = 0;
  std::size_t gallery_modality = 0;
  FeaturePart part = FeaturePart::shared;
  std::size_t k = 1;
  double recall = 0.0;
};

/// R@1/R@5/R@10 for both directions of every modality pair, on shared and
/// specific banks.
inline std::vector<RetrievalRow> retrieval_table(const ModelState& state, const Dataset& data,
                                                 std::span<const std::size_t> ks = std::array<std::size_t, 3>{1, 5, 10}) {
  std::vector<RetrievalRow> rows;
  const auto m = state.num_modalities();
  for (auto part : {FeaturePart::shared, FeaturePart::specific}) {
    std::vector<FeatureBank> banks;
    for (std::size_t k = 0; k < m; ++k) banks.push_back(feature_bank(state, data, k, part));
    for (std::size_t a = 0; a < m; ++a)
      for (std::size_t b = 0; b < m; ++b) {
        if (a == b) continue;
        for (auto k : ks) rows.push_back({a, b, part, k, retrieval_recall_at_k(banks[a], banks[b], k)});
      }
  }
  return rows;
}

inline void write_retrieval_report(std::ostream& os, const std::vector<RetrievalRow>& rows,
                                   std::span<const std::string> names) {
  auto name = [&](std::size_t k) { return k < names.size() ? names[k] : std::to_string(k); };
  os << "[retrieval]\n" << std::setprecision(6) << std::fixed;
  for (auto part : {FeaturePart::shared, FeaturePart::specific}) {
    os << "# " << to_string(part) << " features\n";
    std::map<std::pair<std::size_t, std::size_t>, std::vector<const RetrievalRow*>> by_dir;
    for (const auto& r : rows)
      if (r.part == part) by_dir[{r.query_modality, r.gallery_modality}].push_back(&r);
    for (const auto& [dir, rs] : by_dir) {
      os << name(dir.first) << " -> " << name(dir.second);
      for (const auto* r : rs) os << "  R@" << r->k << " = " << r->recall;
      os << '\n';
    }
  }
  os.unsetf(std::ios::fixed);
  os << '\n';
}

// ---------------------------------------------------------------------------
// Exact information quantities on discrete joints (nats)

namespace info_detail {

inline std::vector<int> project(const std::vector<int>& t, std::span<const std::size_t> vars) {
  std::vector<int> out;
  for (auto v : vars) out.push_back(t.at(v));
  return out;
}

inline std::map<std::vector<int>, double> marginal(const DiscreteJoint& j, std::span<const std::size_t> vars) {
  std::map<std::vector<int>, double> out;
  for (std::size_t i = 0; i < j.support.size(); ++i) out[project(j.support[i], vars)] += j.probs[i];
  return out;
}

inline void check_vars(const DiscreteJoint& j, std::span<const std::size_t> vars) {
  for (auto v : vars)
    if (v >= j.num_vars()) throw IndexError("joint: variable " + std::to_string(v) + " out of range");
}

}  // namespace info_detail

/// H(vars) in nats; 0 log 0 = 0.
inline double entropy(const DiscreteJoint& j, std::span<const std::size_t> vars) {
  j.validate();
  info_detail::check_vars(j, vars);
  double h = 0.0;
  for (const auto& [key, p] : info_detail::marginal(j, vars))
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

/// I(A; B) in nats, by direct enumeration of sum p(a,b) log(p(a,b) / (p(a) p(b))).
inline double mutual_information(const DiscreteJoint& j, std::span<const std::size_t> a, std::span<const std::size_t> b) {
  j.validate();
  info_detail::check_vars(j, a);
  info_detail::check_vars(j, b);
  std::vector<std::size_t> ab(a.begin(), a.end());
  ab.insert(ab.end(), b.begin(), b.end());
  const auto pab = info_detail::marginal(j, ab);
  const auto pa = info_detail::marginal(j, a);
  const auto pb = info_detail::marginal(j, b);
  double mi = 0.0;
  for (const auto& [key, p] : pab) {
    if (p <= 0.0) continue;
    std::vector<int> ka(key.begin(), key.begin() + static_cast<std::ptrdiff_t>(a.size()));
    std::vector<int> kb(key.begin() + static_cast<std::ptrdiff_t>(a.size()), key.end());
    mi += p * std::log(p / (pa.at(ka) * pb.at(kb)));
  }
  return std::max(mi, 0.0);
}

/// H(target | given) in nats.
inline double conditional_entropy(const DiscreteJoint& j, std::size_t target, std::span<const std::size_t> given) {
  std::vector<std::size_t> all(given.begin(), given.end());
  all.push_back(target);
  return entropy(j, all) - entropy(j, given);
}

struct InfoGapReport {
  std::vector<double> mi_per_modality;
  double delta_p = 0.0;
  double aligned_optimal_ce = 0.0;
  double unconstrained_optimal_ce = 0.0;
  double gap = 0.0;
  std::size_t encodings_searched = 0;
  std::size_t encodings_feasible = 0;
};

namespace info_detail {

/// Calls f(labels) for every set partition of n items, as restricted growth strings.
template <typename F>
void for_each_partition(std::size_t n, F&& f) {
  std::vector<int> a(n, 0), maxes(n, 0);
  while (true) {
    f(a);
    std::size_t i = n;
    while (i-- > 1) {
      if (a[i] <= maxes[i - 1]) {
        ++a[i];
        const int m = std::max(maxes[i - 1], a[i]);
        maxes[i] = m;
        for (std::size_t k = i + 1; k < n; ++k) {
          a[k] = 0;
          maxes[k] = m;
        }
        break;
      }
    }
    if (i == 0 || i == static_cast<std::size_t>(-1)) return;
  }
}

}  // namespace info_detail

/// Exact check of the aligned-representation penalty on a joint whose last
/// variable is y and whose other variables are the modalities.
///
/// unconstrained_optimal_ce = H(y | x_1..x_M), the infimum of expected
/// cross-entropy over predictors of the raw inputs.
/// aligned_optimal_ce = min H(y | E) over deterministic encodings
/// E = g_1(x_1) = ... = g_M(x_M) holding on every positive-mass tuple, found by
/// enumerating every partition of the first modality's alphabet and deriving
/// the other encoders from the equality constraint. Only deterministic
/// encodings are searched.
inline InfoGapReport alignment_gap_experiment(const DiscreteJoint& joint, std::size_t max_tuples = 16) {
  joint.validate();
  if (joint.support.size() > max_tuples) {
    throw SizeError("alignment gap: " + std::to_string(joint.support.size()) + " tuples exceeds limit " +
                    std::to_string(max_tuples));
  }
  const auto vars = joint.num_vars();
  if (vars < 2) throw ContractError("alignment gap: need at least one modality and a target");
  const std::size_t m = vars - 1;
  const std::size_t y = m;

  InfoGapReport rep;
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t a[] = {i};
    const std::size_t b[] = {y};
    rep.mi_per_modality.push_back(mutual_information(joint, a, b));
  }
  const auto [lo, hi] = std::minmax_element(rep.mi_per_modality.begin(), rep.mi_per_modality.end());
  rep.delta_p = *hi - *lo;
  std::vector<std::size_t> xs(m);
  std::iota(xs.begin(), xs.end(), std::size_t{0});
  rep.unconstrained_optimal_ce = conditional_entropy(joint, y, xs);

  // Alphabet of modality 0 over positive-mass tuples.
  std::vector<int> alphabet;
  for (std::size_t t = 0; t < joint.support.size(); ++t)
    if (joint.probs[t] > 0.0) alphabet.push_back(joint.support[t][0]);
  std::sort(alphabet.begin(), alphabet.end());
  alphabet.erase(std::unique(alphabet.begin(), alphabet.end()), alphabet.end());
  auto slot = [&](int v) {
    return static_cast<std::size_t>(std::lower_bound(alphabet.begin(), alphabet.end(), v) - alphabet.begin());
  };

  double best = std::numeric_limits<double>::infinity();
  info_detail::for_each_partition(alphabet.size(), [&](const std::vector<int>& g0) {
    ++rep.encodings_searched;
    // g_i(v) for i >= 1 is forced by any positive tuple holding v.
    std::vector<std::map<int, int>> forced(m);
    for (std::size_t t = 0; t < joint.support.size(); ++t) {
      if (joint.probs[t] <= 0.0) continue;
      const int e = g0[slot(joint.support[t][0])];
      for (std::size_t i = 1; i < m; ++i) {
        auto [it, fresh] = forced[i].emplace(joint.support[t][i], e);
        if (!fresh && it->second != e) return;
      }
    }
    ++rep.encodings_feasible;
    std::map<int, double> pe;
    std::map<std::pair<int, int>, double> pey;
    for (std::size_t t = 0; t < joint.support.size(); ++t) {
      if (joint.probs[t] <= 0.0) continue;
      const int e = g0[slot(joint.support[t][0])];
      pe[e] += joint.probs[t];
      pey[{e, joint.support[t][y]}] += joint.probs[t];
    }
    double h = 0.0;
    for (const auto& [key, p] : pey) h -= p * std::log(p / pe.at(key.first));
    best = std::min(best, h);
  });
  rep.aligned_optimal_ce = std::max(best, 0.0);
  rep.gap = rep.aligned_optimal_ce - rep.unconstrained_optimal_ce;
  return rep;
}

inline void write_infogap_report(std::ostream& os, const InfoGapReport& r) {
  os << "[infogap]\n" << std::setprecision(17);
  for (std::size_t i = 0; i < r.mi_per_modality.size(); ++i)
    os << "mi.x" << i << " = " << r.mi_per_modality[i] << " nats (" << r.mi_per_modality[i] / std::log(2.0)
       << " bits)\n";
  os << "delta_p = " << r.delta_p << '\n'
     << "aligned_optimal_ce = " << r.aligned_optimal_ce << '\n'
     << "unconstrained_optimal_ce = " << r.unconstrained_optimal_ce << '\n'
     << "gap = " << r.gap << '\n'
     << "encodings_searched = " << r.encodings_searched << '\n'
     << "encodings_feasible = " << r.encodings_feasible << "\n\n";
}

// ---------------------------------------------------------------------------
// Shared-features-only probe

struct ProbeSettings {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  AdamConfig adam{1e-2, 0.9, 0.999, 1e-8};
  std::uint64_t seed = 0;
};

/// Concatenated shared halves of every modality, one row per sample.
inline Matrix shared_features(const ModelState& state, const Dataset& data) {
  const auto idx = all_indices(data);
  const auto inputs = modality_matrices(data, idx);
  std::vector<ad::Node> parts;
  for (const auto& e : encode(state, inputs)) parts.push_back(e.shared);
  return ad::concat(parts).value();
}

/// Trains a fresh linear head on frozen concatenated shared features of
/// `train_data` and reports its top-1 accuracy on `test_data`.
inline double shared_only_probe(const Matrix& train_features, std::span<const std::size_t> train_labels,
                                const Matrix& test_features, std::span<const std::size_t> test_labels,
                                std::size_t num_classes, const ProbeSettings& s = {}) {
  if (train_features.rows() == 0 || test_features.rows() == 0) throw ContractError("probe: empty data");
  if (train_features.rows() != train_labels.size() || test_features.rows() != test_labels.size()) {
    throw DimensionError("probe: features/labels length mismatch");
  }
  Rng rng(s.seed, 0x50524F42);  // "PROB"
  const auto d = train_features.cols();
  Matrix w(d, num_classes);
  const double bound = std::sqrt(6.0 / static_cast<double>(d));
  for (auto& v : w.values()) v = rng.uniform(-bound, bound);
  Linear head{ad::Node::parameter(std::move(w)), ad::Node::parameter(Matrix(1, num_classes))};
  Adam opt({head.weight, head.bias}, s.adam);
  std::vector<std::size_t> order(train_labels.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto bs = std::max<std::size_t>(1, s.batch_size);
  for (std::size_t epoch = 0; epoch < s.epochs; ++epoch) {
    rng.shuffle(std::span(order));
    for (std::size_t at = 0; at < order.size(); at += bs) {
      const auto batch = std::span(order).subspan(at, std::min(bs, order.size() - at));
      Matrix x(batch.size(), d);
      std::vector<std::size_t> y;
      for (std::size_t r = 0; r < batch.size(); ++r) {
        std::copy(train_features.row_span(batch[r]).begin(), train_features.row_span(batch[r]).end(),
                  x.row_span(r).begin());
        y.push_back(train_labels[batch[r]]);
      }
      opt.zero_grad();
      ad::backward(classification_loss(head(ad::Node::constant(std::move(x))), y));
      opt.step();
    }
  }
  const auto pred = argmax_rows(head(ad::Node::constant(test_features)).value());
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == test_labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

inline double shared_only_probe(const ModelState& state, const Dataset& train_data, const Dataset& test_data,
                                const ProbeSettings& s = {}) {
  std::vector<std::size_t> ytr, yte;
  for (const auto& x : train_data) ytr.push_back(x.label);
  for (const auto& x : test_data) yte.push_back(x.label);
  return shared_only_probe(shared_features(state, train_data), ytr, shared_features(state, test_data), yte,
                           state.config().num_classes, s);
}

}  // namespace simmdg
