#pragma once

// Synthetic multi-modal, multi-domain classification data, plus small
// discrete joint distributions for exact information-theoretic checks.
//
// Generative story for one sample of class y in domain d:
//   c    ~ N(mu_y, latent_sigma^2 I)            shared latent, one per sample
//   s_k  ~ N(nu_{y,k,d}, latent_sigma^2 I)       specific latent, per modality
//   u_k  = [sqrt(w_k) c ; sqrt(1 - w_k) s_k]    w_k = shared_fraction[k]
//   x_k  = R_{d,k} (W_k u_k) + b_{d,k} + noise_sigma * eps
// mu_y and nu_{y,k} are unit vectors, nu_{y,k,d} is nu_{y,k} plus a
// per-domain perturbation of std specific_shift, W_k is a fixed random mixing map, and
// (R_{d,k}, b_{d,k}) is a per-(domain, modality) rotation-plus-offset whose
// magnitude scales with domain_shift_scale (identity at 0).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "simmdg/diffcalc.hpp"
#include "simmdg/errors.hpp"
#include "simmdg/rng.hpp"

namespace simmdg {

struct GeneratorConfig {
  std::size_t num_classes = 7;
  std::size_t num_domains = 3;
  std::size_t num_modalities = 3;
  std::size_t shared_dim = 8;
  std::vector<std::size_t> specific_dims{4, 4, 4};
  std::vector<std::size_t> obs_dims{32, 16, 24};
  /// Per modality, fraction of class signal carried by the shared latent.
  std::vector<double> shared_fraction{0.6, 0.6, 0.6};
  double latent_sigma = 0.35;
  double domain_shift_scale = 1.0;
  /// Per-plane rotation angle std (radians) and offset std at shift scale 1.
  double rotation_strength = 0.5;
  double offset_strength = 0.5;
  /// Std of a per-domain perturbation of the specific class means.
  double specific_shift = 0.0;
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("generator: " + m); };
    if (num_classes == 0 || num_domains == 0 || num_modalities == 0) fail("counts must be positive");
    if (shared_dim == 0) fail("shared_dim must be positive");
    if (specific_dims.size() != num_modalities) fail("specific_dims needs one entry per modality");
    if (obs_dims.size() != num_modalities) fail("obs_dims needs one entry per modality");
    if (shared_fraction.size() != num_modalities) fail("shared_fraction needs one entry per modality");
    for (auto d : specific_dims)
      if (d == 0) fail("specific dims must be positive");
    for (auto d : obs_dims)
      if (d == 0) fail("obs dims must be positive");
    for (double f : shared_fraction)
      if (!(f >= 0.0 && f <= 1.0)) fail("shared_fraction must lie in [0,1]");
    if (!(latent_sigma >= 0.0) || !(noise_sigma >= 0.0) || !(domain_shift_scale >= 0.0) ||
        !(rotation_strength >= 0.0) || !(offset_strength >= 0.0) || !(specific_shift >= 0.0)) {
      fail("scales must be non-negative");
    }
  }
};

struct Sample {
  std::vector<std::vector<double>> modalities;
  std::size_t label = 0;
  std::size_t domain = 0;
};

using Dataset = std::vector<Sample>;

namespace synth_detail {

inline Matrix random_unit_rows(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    double n2 = 0.0;
    while (n2 == 0.0) {
      for (auto& v : m.row_span(i)) v = rng.normal();
      n2 = 0.0;
      for (double v : m.row_span(i)) n2 += v * v;
    }
    const double n = std::sqrt(n2);
    for (auto& v : m.row_span(i)) v /= n;
  }
  return m;
}

/// Product of Givens rotations over every coordinate plane, each with angle
/// scale * N(0, 1) * strength. Exactly the identity when scale is 0.
inline Matrix random_rotation(std::size_t d, double scale, double strength, Rng& rng) {
  Matrix r(d, d);
  for (std::size_t i = 0; i < d; ++i) r(i, i) = 1.0;
  for (std::size_t p = 0; p < d; ++p)
    for (std::size_t q = p + 1; q < d; ++q) {
      const double theta = scale * strength * rng.normal() / std::sqrt(static_cast<double>(d));
      if (theta == 0.0) continue;
      const double c = std::cos(theta), s = std::sin(theta);
      for (std::size_t k = 0; k < d; ++k) {
        const double a = r(p, k), b = r(q, k);
        r(p, k) = c * a - s * b;
        r(q, k) = s * a + c * b;
      }
    }
  return r;
}

}  // namespace synth_detail

/// Immutable after construction; all sampling randomness comes from the
/// caller's Rng.
class Generator {
 public:
  explicit Generator(GeneratorConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(cfg_.seed, kParamStream);
    const auto m = cfg_.num_modalities;
    shared_means_ = synth_detail::random_unit_rows(cfg_.num_classes, cfg_.shared_dim, rng);
    for (std::size_t k = 0; k < m; ++k) {
      specific_means_.push_back(
          synth_detail::random_unit_rows(cfg_.num_classes, cfg_.specific_dims[k], rng));
    }
    for (std::size_t k = 0; k < m; ++k) {
      const auto in = cfg_.shared_dim + cfg_.specific_dims[k];
      Matrix w(cfg_.obs_dims[k], in);
      const double s = 1.0 / std::sqrt(static_cast<double>(in));
      for (auto& v : w.values()) v = s * rng.normal();
      mixing_.push_back(std::move(w));
    }
    for (std::size_t d = 0; d < cfg_.num_domains; ++d) {
      std::vector<Matrix> rots;
      std::vector<std::vector<double>> offs;
      for (std::size_t k = 0; k < m; ++k) {
        const auto dim = cfg_.obs_dims[k];
        rots.push_back(synth_detail::random_rotation(dim, cfg_.domain_shift_scale,
                                                     cfg_.rotation_strength, rng));
        std::vector<double> b(dim);
        const double s = cfg_.domain_shift_scale * cfg_.offset_strength /
                         std::sqrt(static_cast<double>(dim));
        for (auto& v : b) v = s * rng.normal();
        offs.push_back(std::move(b));
      }
      rotations_.push_back(std::move(rots));
      offsets_.push_back(std::move(offs));
    }
    for (std::size_t d = 0; d < cfg_.num_domains; ++d) {
      std::vector<Matrix> means;
      for (std::size_t k = 0; k < m; ++k) {
        Matrix nu = specific_means_[k];
        const double s = cfg_.domain_shift_scale * cfg_.specific_shift;
        if (s > 0.0)
          for (auto& v : nu.values()) v += s * rng.normal();
        means.push_back(std::move(nu));
      }
      domain_specific_means_.push_back(std::move(means));
    }
  }

  const GeneratorConfig& config() const { return cfg_; }
  const Matrix& shared_means() const { return shared_means_; }
  const Matrix& specific_means(std::size_t k) const { return specific_means_.at(k); }
  const Matrix& mixing(std::size_t k) const { return mixing_.at(k); }
  const Matrix& rotation(std::size_t domain, std::size_t k) const { return rotations_.at(domain).at(k); }
  const std::vector<double>& offset(std::size_t domain, std::size_t k) const {
    return offsets_.at(domain).at(k);
  }

  /// Latent draw for one sample, kept separate so tests can replay it.
  struct Latent {
    std::vector<double> shared;
    std::vector<std::vector<double>> specific;
  };

  Latent draw_latent(std::size_t label, Rng& rng) const { return draw_latent(label, 0, rng); }

  Latent draw_latent(std::size_t label, std::size_t domain, Rng& rng) const {
    Latent z;
    z.shared.resize(cfg_.shared_dim);
    for (std::size_t i = 0; i < cfg_.shared_dim; ++i)
      z.shared[i] = shared_means_(label, i) + cfg_.latent_sigma * rng.normal();
    for (std::size_t k = 0; k < cfg_.num_modalities; ++k) {
      std::vector<double> s(cfg_.specific_dims[k]);
      for (std::size_t i = 0; i < s.size(); ++i)
        s[i] = domain_specific_means_[domain][k](label, i) + cfg_.latent_sigma * rng.normal();
      z.specific.push_back(std::move(s));
    }
    return z;
  }

  /// Noise-free observation of modality k for a latent in a domain, plus
  /// noise drawn from rng when noise_sigma > 0.
  std::vector<double> observe(const Latent& z, std::size_t domain, std::size_t k, Rng& rng) const {
    const double wc = std::sqrt(cfg_.shared_fraction[k]);
    const double ws = std::sqrt(1.0 - cfg_.shared_fraction[k]);
    std::vector<double> u;
    u.reserve(cfg_.shared_dim + cfg_.specific_dims[k]);
    for (double v : z.shared) u.push_back(wc * v);
    for (double v : z.specific[k]) u.push_back(ws * v);
    const auto& w = mixing_[k];
    std::vector<double> mixed(w.rows(), 0.0);
    for (std::size_t i = 0; i < w.rows(); ++i)
      for (std::size_t j = 0; j < w.cols(); ++j) mixed[i] += w(i, j) * u[j];
    const auto& r = rotations_[domain][k];
    const auto& b = offsets_[domain][k];
    std::vector<double> x(w.rows(), 0.0);
    for (std::size_t i = 0; i < r.rows(); ++i) {
      for (std::size_t j = 0; j < r.cols(); ++j) x[i] += r(i, j) * mixed[j];
      x[i] += b[i];
      if (cfg_.noise_sigma > 0.0) x[i] += cfg_.noise_sigma * rng.normal();
    }
    return x;
  }

  /// n samples from one domain with uniform class labels.
  Dataset sample(std::size_t domain, std::size_t n, Rng& rng) const {
    if (domain >= cfg_.num_domains) {
      throw IndexError("sample: domain " + std::to_string(domain) + " of " +
                       std::to_string(cfg_.num_domains));
    }
    Dataset out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      Sample s;
      s.label = rng.below(cfg_.num_classes);
      s.domain = domain;
      const auto z = draw_latent(s.label, domain, rng);
      for (std::size_t k = 0; k < cfg_.num_modalities; ++k) s.modalities.push_back(observe(z, domain, k, rng));
      out.push_back(std::move(s));
    }
    return out;
  }

  /// Same as sample(), drawing from the canonical per-domain stream of
  /// (config seed, domain). The result depends only on (config, domain, n).
  Dataset sample(std::size_t domain, std::size_t n) const {
    Rng rng(cfg_.seed, kDomainStreamBase + domain);
    return sample(domain, n, rng);
  }

  static constexpr std::uint64_t kParamStream = 0x5041524D;       // "PARM"
  static constexpr std::uint64_t kDomainStreamBase = 0x444F4D00;  // "DOM\0" + domain

 private:
  GeneratorConfig cfg_;
  Matrix shared_means_;
  std::vector<Matrix> specific_means_;
  std::vector<Matrix> mixing_;
  std::vector<std::vector<Matrix>> rotations_;
  std::vector<std::vector<std::vector<double>>> offsets_;
  std::vector<std::vector<Matrix>> domain_specific_means_;
};

inline Generator build_generator(const GeneratorConfig& cfg) { return Generator(cfg); }

/// Stacks modality k of the selected samples into an (n x obs_dim) matrix.
inline Matrix modality_matrix(const Dataset& data, std::span<const std::size_t> idx, std::size_t k) {
  if (idx.empty()) return {};
  const auto dim = data[idx.front()].modalities.at(k).size();
  Matrix m(idx.size(), dim);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto& v = data[idx[r]].modalities.at(k);
    if (v.size() != dim) throw DimensionError("modality_matrix: ragged modality " + std::to_string(k));
    std::copy(v.begin(), v.end(), m.row_span(r).begin());
  }
  return m;
}

inline std::vector<Matrix> modality_matrices(const Dataset& data, std::span<const std::size_t> idx) {
  std::vector<Matrix> out;
  if (idx.empty()) return out;
  const auto m = data[idx.front()].modalities.size();
  for (std::size_t k = 0; k < m; ++k) out.push_back(modality_matrix(data, idx, k));
  return out;
}

inline std::vector<std::size_t> all_indices(const Dataset& data) {
  std::vector<std::size_t> idx(data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

// ---------------------------------------------------------------------------
// Dataset dump: header lines starting with '#', then one row per sample:
//   domain label | x_0 ... | x_1 ... | ...
// with every value written to 9 significant digits.

inline void write_config_echo(std::ostream& os, const GeneratorConfig& c) {
  auto list = [&](const auto& v) {
    std::ostringstream s;
    for (std::size_t i = 0; i < v.size(); ++i) s << (i ? "," : "") << std::setprecision(17) << v[i];
    return s.str();
  };
  os << "# num_classes = " << c.num_classes << '\n'
     << "# num_domains = " << c.num_domains << '\n'
     << "# num_modalities = " << c.num_modalities << '\n'
     << "# shared_dim = " << c.shared_dim << '\n'
     << "# specific_dims = " << list(c.specific_dims) << '\n'
     << "# obs_dims = " << list(c.obs_dims) << '\n'
     << "# shared_fraction = " << list(c.shared_fraction) << '\n'
     << std::setprecision(17) << "# latent_sigma = " << c.latent_sigma << '\n'
     << "# domain_shift_scale = " << c.domain_shift_scale << '\n'
     << "# rotation_strength = " << c.rotation_strength << '\n'
     << "# offset_strength = " << c.offset_strength << '\n'
     << "# specific_shift = " << c.specific_shift << '\n'
     << "# noise_sigma = " << c.noise_sigma << '\n'
     << "# seed = " << c.seed << '\n'
     << "# rng = " << Rng::kAlgorithm << '\n';
}

inline void write_dataset(std::ostream& os, const GeneratorConfig& cfg, const Dataset& data) {
  os << "# simmdg dataset v1\n";
  write_config_echo(os, cfg);
  os << "# samples = " << data.size() << '\n';
  os << std::setprecision(9);
  for (const auto& s : data) {
    os << s.domain << ' ' << s.label;
    for (const auto& mod : s.modalities) {
      os << " |";
      for (double v : mod) os << ' ' << v;
    }
    os << '\n';
  }
}

inline Dataset read_dataset(std::istream& is) {
  Dataset out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    std::istringstream row(line);
    Sample s;
    if (!(row >> s.domain >> s.label)) {
      throw LoadError("dataset line " + std::to_string(line_no) + ": missing domain/label");
    }
    std::string tok;
    while (row >> tok) {
      if (tok == "|") {
        s.modalities.emplace_back();
        continue;
      }
      if (s.modalities.empty()) throw LoadError("dataset line " + std::to_string(line_no) + ": value before '|'");
      try {
        s.modalities.back().push_back(std::stod(tok));
      } catch (const std::exception&) {
        throw LoadError("dataset line " + std::to_string(line_no) + ": bad value '" + tok + "'");
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Discrete joints

/// Finite joint over tuples of small integers. By convention the last
/// coordinate of each tuple is the target y.
struct DiscreteJoint {
  std::vector<std::vector<int>> support;
  std::vector<double> probs;

  std::size_t num_vars() const { return support.empty() ? 0 : support.front().size(); }

  void normalize() {
    double s = 0.0;
    for (double p : probs) {
      if (!(p >= 0.0)) throw ContractError("joint: negative or NaN probability");
      s += p;
    }
    if (!(s > 0.0)) throw ContractError("joint: zero total mass");
    for (double& p : probs) p /= s;
  }

  void validate(double tol = 1e-12) const {
    if (support.size() != probs.size()) throw ContractError("joint: support/probs length mismatch");
    if (support.empty()) throw ContractError("joint: empty support");
    double s = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (!(probs[i] >= 0.0)) throw ContractError("joint: negative or NaN probability");
      if (support[i].size() != num_vars()) throw ContractError("joint: ragged tuples");
      s += probs[i];
    }
    if (std::abs(s - 1.0) > tol) throw ContractError("joint: probabilities sum to " + std::to_string(s));
  }
};

namespace synth_detail {

inline double binary_entropy_bits(double e) {
  if (e <= 0.0 || e >= 1.0) return 0.0;
  return -(e * std::log2(e) + (1.0 - e) * std::log2(1.0 - e));
}

/// Flip probability in [0, 1/2] of a binary symmetric channel carrying
/// `bits` of information about a uniform bit.
inline double flip_for_bits(double bits) {
  if (bits >= 1.0) return 0.0;
  if (bits <= 0.0) return 0.5;
  const double target = 1.0 - bits;  // h(e) must equal this
  double lo = 0.0, hi = 0.5;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (binary_entropy_bits(mid) < target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace synth_detail

/// Joint over binary (x1, x2, y) with y uniform, x_i = y through a binary
/// symmetric channel, x1 and x2 independent given y, and
/// I(x1; y) = high_bits ln2, I(x2; y) = low_bits ln2 nats.
inline DiscreteJoint build_info_gap_joint(double high_bits, double low_bits) {
  if (!(low_bits >= 0.0 && low_bits <= high_bits && high_bits <= 1.0)) {
    throw ConstructionError("info-gap joint needs 0 <= low <= high <= 1, got high=" +
                            std::to_string(high_bits) + " low=" + std::to_string(low_bits));
  }
  const double e1 = synth_detail::flip_for_bits(high_bits);
  const double e2 = synth_detail::flip_for_bits(low_bits);
  DiscreteJoint j;
  for (int x1 = 0; x1 < 2; ++x1)
    for (int x2 = 0; x2 < 2; ++x2)
      for (int y = 0; y < 2; ++y) {
        const double p1 = x1 == y ? 1.0 - e1 : e1;
        const double p2 = x2 == y ? 1.0 - e2 : e2;
        j.support.push_back({x1, x2, y});
        j.probs.push_back(0.5 * p1 * p2);
      }
  j.normalize();
  return j;
}

/// Random joint over `arity`-ary modalities and a binary target. Roughly a
/// third of the tuples get zero mass so supports vary.
inline DiscreteJoint random_joint(std::size_t num_modalities, int arity, Rng& rng) {
  DiscreteJoint j;
  const std::size_t vars = num_modalities + 1;
  std::vector<int> t(vars, 0);
  auto next = [&] {
    for (std::size_t i = vars; i-- > 0;) {
      const int lim = i + 1 == vars ? 2 : arity;
      if (++t[i] < lim) return true;
      t[i] = 0;
    }
    return false;
  };
  do {
    j.support.push_back(t);
    j.probs.push_back(rng.uniform() < 0.35 ? 0.0 : rng.uniform());
  } while (next());
  if (std::all_of(j.probs.begin(), j.probs.end(), [](double p) { return p == 0.0; })) j.probs[0] = 1.0;
  j.normalize();
  return j;
}

}  // namespace simmdg
