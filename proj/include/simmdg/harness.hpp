#pragma once

// Training loop, evaluation and the domain-generalization protocols.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
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

enum class Protocol { multi_source, single_source };

inline const char* to_string(Protocol p) { return p == Protocol::multi_source ? "multi-source" : "single-source"; }

struct ExperimentConfig {
  GeneratorConfig data;
  std::size_t samples_per_domain = 240;
  std::vector<std::string> modality_names{"video", "audio", "flow"};
  ModelConfig model;
  LossWeights weights;
  double tau = 0.1;
  DistanceKind distance = DistanceKind::neg_sq_l2;
  AdamConfig optim;
  std::size_t batch_size = 16;
  std::size_t epochs = 15;
  double val_fraction = 0.1;
  std::size_t finetune_epochs = 10;
  Protocol protocol = Protocol::multi_source;
  std::vector<std::size_t> sources;  // empty: enumerate every arrangement
  std::vector<std::size_t> targets;  // empty: complement of sources
  std::uint64_t seed = 0;

  /// Copies the values the model and generator derive from elsewhere.
  void sync() {
    data.seed = seed;
    model.input_dims = data.obs_dims;
    model.num_classes = data.num_classes;
  }

  void validate() const {
    data.validate();
    model.validate();
    weights.validate();
    if (!(tau > 0.0)) throw ConfigError("loss.tau must be positive");
    if (!(optim.lr > 0.0)) throw ConfigError("optim.lr must be positive");
    if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("train.val_fraction must be in [0,1)");
    if (modality_names.size() != data.num_modalities) {
      throw ConfigError("data.modality_names needs one name per modality");
    }
    if (model.input_dims != data.obs_dims || model.num_classes != data.num_classes) {
      throw ConfigError("model dims disagree with data dims (call sync())");
    }
    for (auto d : sources)
      if (d >= data.num_domains) throw ConfigError("protocol.sources: domain out of range");
    for (auto d : targets) {
      if (d >= data.num_domains) throw ConfigError("protocol.targets: domain out of range");
      if (std::find(sources.begin(), sources.end(), d) != sources.end()) {
        throw ConfigError("protocol: domain " + std::to_string(d) + " is both source and target");
      }
    }
    if (!targets.empty() && sources.empty()) throw ConfigError("protocol.targets given without protocol.sources");
  }

  ObjectiveSettings objective() const { return {weights, tau, distance}; }
};

/// Ablation rows in table order: none, CL, CL+CT, CL+FS, CL+FS+DL, FS+DL+CT, all.
inline std::vector<Toggles> ablation_rows() {
  return {
      {false, false, false, false}, {true, false, false, false}, {true, false, false, true},
      {true, true, false, false},   {true, true, true, false},   {false, true, true, true},
      {true, true, true, true},
  };
}

// ---------------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  double total = 0.0;
  double cls = 0.0;
  double con = 0.0;
  double dis = 0.0;
  double trans = 0.0;
};

struct TargetScore {
  std::size_t domain = 0;
  double top1 = 0.0;
};

struct Metrics {
  std::vector<EpochRecord> train;  // epochs 1..E
  std::vector<double> val_top1;    // index 0 is the initial model
  std::size_t selected_epoch = 0;  // argmax of val_top1, earliest on ties
  std::vector<TargetScore> targets;
};

struct TrainResult {
  ModelState state;
  Metrics metrics;
};

struct EvalMode {
  FillMode fill = FillMode::zero;
  MissingMask mask;

  static EvalMode full() { return {}; }
  std::string label(std::span<const std::string> names = {}) const {
    if (mask.empty()) return "full";
    return std::string(fill == FillMode::zero ? "zero-fill" : "translate") + "(" + mask.label(names, '+') + ")";
  }
};

/// Top-1 accuracy; argmax ties resolve to the lowest class index.
inline double evaluate(const ModelState& state, const Dataset& data, const EvalMode& mode = {}) {
  if (data.empty()) throw ContractError("evaluate: empty data");
  const auto idx = all_indices(data);
  auto inputs = modality_matrices(data, idx);
  for (auto k : mode.mask.missing)
    if (k < inputs.size()) inputs[k] = Matrix();
  const auto pred = argmax_rows(predict(state, inputs, mode.mask, mode.fill));
  std::size_t hit = 0;
  for (std::size_t i = 0; i < data.size(); ++i) hit += pred[i] == data[i].label ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(data.size());
}

/// Holds out round(fraction * size) samples of every (domain, label) group,
/// chosen by a seed-fixed shuffle. Returns (train, validation).
inline std::pair<Dataset, Dataset> stratified_split(const Dataset& data, double fraction, std::uint64_t seed) {
  std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < data.size(); ++i) groups[{data[i].domain, data[i].label}].push_back(i);
  Rng rng(seed, 0x56414C53);  // "VALS"
  std::vector<bool> held(data.size(), false);
  for (auto& [key, members] : groups) {
    rng.shuffle(std::span(members));
    const auto n = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(members.size()) + 0.5));
    for (std::size_t i = 0; i < n && i < members.size(); ++i) held[members[i]] = true;
  }
  std::pair<Dataset, Dataset> out;
  for (std::size_t i = 0; i < data.size(); ++i) (held[i] ? out.second : out.first).push_back(data[i]);
  return out;
}

namespace harness_detail {

inline std::string describe(const Objective& o) {
  std::ostringstream os;
  os << std::setprecision(6) << "total=" << o.total.item() << " cls=" << o.terms.cls.item();
  if (o.terms.con) os << " con=" << o.terms.con->item();
  if (o.terms.dis) os << " dis=" << o.terms.dis->item();
  if (o.terms.trans) os << " trans=" << o.terms.trans->item();
  return os.str();
}

}  // namespace harness_detail

/// Trains on pooled source data (domain ids unused) with one joint step on
/// the weighted objective per minibatch. Validation is a stratified held-out
/// slice of the source data; the best-validation state is returned.
inline TrainResult train(const ExperimentConfig& cfg, const Dataset& source) {
  cfg.validate();
  if (source.empty()) throw ConfigError("train: empty source data");
  auto [train_set, val_set] = stratified_split(source, cfg.val_fraction, cfg.seed);
  if (train_set.empty()) throw ConfigError("train: no training samples after the validation split");
  const Dataset& val = val_set.empty() ? train_set : val_set;

  ModelState state(cfg.model, cfg.seed);
  TrainResult result{state.clone(), {}};
  auto& metrics = result.metrics;
  metrics.val_top1.push_back(evaluate(state, val));
  double best = metrics.val_top1.back();

  Adam opt(state.parameter_nodes(), cfg.optim);
  Rng rng(cfg.seed, 0x53485546);  // "SHUF"
  auto order = all_indices(train_set);
  const auto settings = cfg.objective();
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(std::span(order));
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
      const auto batch = std::span<const std::size_t>(order).subspan(at, std::min(cfg.batch_size, order.size() - at));
      const auto inputs = modality_matrices(train_set, batch);
      std::vector<std::size_t> labels;
      for (auto i : batch) labels.push_back(train_set[i].label);
      ++step;
      opt.zero_grad();
      const auto obj = compute_objective(state, inputs, labels, settings);
      if (!std::isfinite(obj.total.item())) {
        throw TrainingError("train: non-finite loss at step " + std::to_string(step) + " (" +
                            harness_detail::describe(obj) + ")");
      }
      ad::backward(obj.total);
      try {
        opt.step();
      } catch (const TrainingError& e) {
        throw TrainingError(std::string(e.what()) + "; optimizer step " + std::to_string(step) + " (" +
                            harness_detail::describe(obj) + ")");
      }
      ++rec.steps;
      rec.total += obj.total.item();
      rec.cls += obj.terms.cls.item();
      if (obj.terms.con) rec.con += obj.terms.con->item();
      if (obj.terms.dis) rec.dis += obj.terms.dis->item();
      if (obj.terms.trans) rec.trans += obj.terms.trans->item();
    }
    if (rec.steps > 0) {
      const double n = static_cast<double>(rec.steps);
      rec.total /= n;
      rec.cls /= n;
      rec.con /= n;
      rec.dis /= n;
      rec.trans /= n;
    }
    metrics.train.push_back(rec);
    metrics.val_top1.push_back(evaluate(state, val));
    if (metrics.val_top1.back() > best) {
      best = metrics.val_top1.back();
      metrics.selected_epoch = epoch;
      result.state = state.clone();
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Protocols

struct Arrangement {
  std::vector<std::size_t> sources;
  std::vector<std::size_t> targets;

  std::string label() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < sources.size(); ++i) os << (i ? "+" : "") << 'D' << sources[i];
    os << "->";
    for (std::size_t i = 0; i < targets.size(); ++i) os << (i ? "+" : "") << 'D' << targets[i];
    return os.str();
  }
};

/// Multi-source: leave one domain out per arrangement. Single-source: one
/// arrangement per source domain, tested on every other domain. An explicit
/// source list in the config yields exactly one arrangement.
inline std::vector<Arrangement> arrangements(const ExperimentConfig& cfg) {
  const auto d = cfg.data.num_domains;
  auto complement = [d](const std::vector<std::size_t>& s) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < d; ++i)
      if (std::find(s.begin(), s.end(), i) == s.end()) out.push_back(i);
    return out;
  };
  if (!cfg.sources.empty()) return {{cfg.sources, cfg.targets.empty() ? complement(cfg.sources) : cfg.targets}};
  std::vector<Arrangement> out;
  for (std::size_t i = 0; i < d; ++i) {
    if (cfg.protocol == Protocol::multi_source) {
      out.push_back({complement({i}), {i}});
    } else {
      out.push_back({{i}, complement({i})});
    }
  }
  return out;
}

inline Dataset pooled(const Generator& gen, const std::vector<std::size_t>& domains, std::size_t per_domain) {
  Dataset out;
  for (auto d : domains) {
    auto part = gen.sample(d, per_domain);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

struct ArrangementResult {
  Arrangement arrangement;
  TrainResult trained;
};

struct ProtocolResult {
  std::vector<ArrangementResult> runs;
  /// Arithmetic mean over every (arrangement, target) accuracy.
  double mean_top1 = 0.0;

  std::size_t pair_count() const {
    std::size_t n = 0;
    for (const auto& r : runs) n += r.trained.metrics.targets.size();
    return n;
  }
};

/// Trains one arrangement and scores its targets. Target samples are drawn
/// only after the selected checkpoint is fixed.
inline ArrangementResult run_arrangement(const ExperimentConfig& cfg, const Arrangement& arr) {
  const Generator gen(cfg.data);
  ArrangementResult out{arr, train(cfg, pooled(gen, arr.sources, cfg.samples_per_domain))};
  for (auto t : arr.targets) {
    out.trained.metrics.targets.push_back({t, evaluate(out.trained.state, gen.sample(t, cfg.samples_per_domain))});
  }
  return out;
}

inline ProtocolResult run_protocol(const ExperimentConfig& cfg) {
  cfg.validate();
  ProtocolResult res;
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& arr : arrangements(cfg)) {
    res.runs.push_back(run_arrangement(cfg, arr));
    for (const auto& t : res.runs.back().trained.metrics.targets) {
      sum += t.top1;
      ++n;
    }
  }
  res.mean_top1 = n ? sum / static_cast<double>(n) : 0.0;
  return res;
}

/// Every mask with `count` of the M modalities missing, in lexicographic order.
inline std::vector<MissingMask> masks_of_size(std::size_t num_modalities, std::size_t count) {
  std::vector<MissingMask> out;
  std::vector<bool> pick(num_modalities, false);
  std::fill(pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(std::min(count, num_modalities)), true);
  do {
    MissingMask m;
    for (std::size_t k = 0; k < num_modalities; ++k)
      if (pick[k]) m.missing.insert(k);
    out.push_back(m);
  } while (std::prev_permutation(pick.begin(), pick.end()));
  return out;
}

struct MissingScore {
  std::size_t domain = 0;
  MissingMask mask;
  FillMode fill = FillMode::zero;
  double top1 = 0.0;
};

struct MissingResult {
  ModelState finetuned;
  std::vector<double> trans_loss;
  std::vector<MissingScore> scores;
};

/// Retrains the translators once on the pooled source data, then scores each
/// target domain under every mask and both fills. Zero filling uses the
/// original state; it never touches a translator.
inline MissingResult run_missing(const ExperimentConfig& cfg, const ArrangementResult& r,
                                 const std::vector<MissingMask>& masks) {
  const Generator gen(cfg.data);
  FinetuneSettings fs;
  fs.epochs = cfg.finetune_epochs;
  fs.batch_size = cfg.batch_size;
  fs.adam = cfg.optim;
  fs.seed = cfg.seed;
  auto ft = finetune_translators(r.trained.state, pooled(gen, r.arrangement.sources, cfg.samples_per_domain), fs);
  MissingResult out{std::move(ft.state), std::move(ft.trans_loss), {}};
  for (auto t : r.arrangement.targets) {
    const auto target = gen.sample(t, cfg.samples_per_domain);
    for (const auto& mask : masks) {
      out.scores.push_back({t, mask, FillMode::zero, evaluate(r.trained.state, target, {FillMode::zero, mask})});
      out.scores.push_back({t, mask, FillMode::translate, evaluate(out.finetuned, target, {FillMode::translate, mask})});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metric emission

struct MetricRow {
  std::string arrangement;
  std::string mode;
  double top1 = 0.0;
};

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricRow>& rows) {
  os << "arrangement,mode,top1\n";
  for (const auto& r : rows) os << r.arrangement << ',' << r.mode << ',' << std::setprecision(17) << r.top1 << '\n';
}

/// One structured-text record per arrangement.
inline void write_arrangement_record(std::ostream& os, const ExperimentConfig& cfg, const ArrangementResult& r) {
  const auto& m = r.trained.metrics;
  os << "[arrangement]\n"
     << "protocol = " << to_string(cfg.protocol) << '\n'
     << "sources = ";
  for (std::size_t i = 0; i < r.arrangement.sources.size(); ++i) os << (i ? "," : "") << r.arrangement.sources[i];
  os << "\ntarget = ";
  for (std::size_t i = 0; i < r.arrangement.targets.size(); ++i) os << (i ? "," : "") << r.arrangement.targets[i];
  os << "\ntoggles = " << cfg.model.toggles.label() << '\n'
     << "distance = " << to_string(cfg.distance) << '\n'
     << "seed = " << cfg.seed << '\n'
     << std::setprecision(17) << "validation_curve = ";
  for (std::size_t i = 0; i < m.val_top1.size(); ++i) os << (i ? "," : "") << m.val_top1[i];
  os << "\ntrain_loss = ";
  for (std::size_t i = 0; i < m.train.size(); ++i) os << (i ? "," : "") << m.train[i].total;
  os << "\nselected_epoch = " << m.selected_epoch << '\n';
  for (const auto& t : m.targets) os << "top1.D" << t.domain << " = " << t.top1 << '\n';
  os << '\n';
}

}  // namespace simmdg
