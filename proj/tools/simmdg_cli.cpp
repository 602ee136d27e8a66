// simmdg: train, evaluate and analyse multi-modal domain generalization runs
// on synthetic data. Every subcommand writes manifest.txt and metrics.csv to
// --out; most also write report.txt.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "simmdg/simmdg.hpp"

namespace fs = std::filesystem;
using namespace simmdg;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string profile = "desk";
  std::string out = "simmdg_out";
  std::string checkpoint;
  std::string missing;
  std::string fill = "both";
};

struct Run {
  RunConfig cfg;
  fs::path out;
  std::vector<std::pair<std::string, std::string>> artifacts;
  std::vector<MetricRow> rows;
  std::ostringstream report;

  std::string path(const std::string& name) {
    const auto p = (out / name).string();
    artifacts.emplace_back(name, p);
    return p;
  }
  const std::vector<std::string>& names() const { return cfg.exp.modality_names; }
};

RunConfig resolve(const Common& c) {
  RunConfig cfg = profile_config(parse_profile(c.profile));
  if (!c.config_path.empty()) apply_config_file(cfg, c.config_path);
  for (const auto& s : c.sets) apply_override(cfg, s);
  if (c.seed) cfg.exp.seed = *c.seed;
  cfg.exp.sync();
  cfg.exp.validate();
  return cfg;
}

std::vector<FillMode> fills(const std::string& f) {
  if (f == "zero") return {FillMode::zero};
  if (f == "translate") return {FillMode::translate};
  if (f == "both") return {FillMode::zero, FillMode::translate};
  throw ConfigError("--fill: expected zero, translate or both, got '" + f + "'");
}

std::vector<MissingMask> masks_for(const Run& run, const std::string& text) {
  const auto m = run.cfg.exp.data.num_modalities;
  if (!text.empty()) {
    auto mask = parse_missing_mask(text, run.names());
    mask.validate(m);
    return {mask};
  }
  std::vector<MissingMask> out;
  for (std::size_t n = 1; n < m; ++n) {
    const auto more = masks_of_size(m, n);
    out.insert(out.end(), more.begin(), more.end());
  }
  return out;
}

std::string pair_label(const Arrangement& a, std::size_t target) { return Arrangement{a.sources, {target}}.label(); }

/// The arrangement a single-model subcommand works on: the explicit one from
/// the config, else the protocol's first.
Arrangement primary_arrangement(const ExperimentConfig& e) { return arrangements(e).front(); }

/// Loads --checkpoint when given, otherwise trains the arrangement.
ArrangementResult obtain_model(Run& run, const Common& c, const Arrangement& arr) {
  const auto& e = run.cfg.exp;
  if (c.checkpoint.empty()) {
    auto r = run_arrangement(e, arr);
    save_checkpoint(run.path("checkpoint.bin"), r.trained.state);
    write_arrangement_record(run.report, e, r);
    return r;
  }
  ArrangementResult r{arr, {load_checkpoint(c.checkpoint, e.model), {}}};
  run.artifacts.emplace_back("checkpoint.in", c.checkpoint);
  const Generator gen(e.data);
  for (auto t : arr.targets) r.trained.metrics.targets.push_back({t, evaluate(r.trained.state, gen.sample(t, e.samples_per_domain))});
  return r;
}

void cmd_train(Run& run, const Common&) {
  const auto& e = run.cfg.exp;
  const auto arrs = arrangements(e);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < arrs.size(); ++i) {
    auto r = run_arrangement(e, arrs[i]);
    const auto name = arrs.size() == 1 ? std::string("checkpoint.bin") : "checkpoint_" + std::to_string(i) + ".bin";
    save_checkpoint(run.path(name), r.trained.state);
    write_arrangement_record(run.report, e, r);
    for (const auto& t : r.trained.metrics.targets) {
      run.rows.push_back({pair_label(arrs[i], t.domain), "full", t.top1});
      sum += t.top1;
      ++n;
    }
  }
  run.rows.push_back({"mean", "full", sum / static_cast<double>(n)});
}

void cmd_eval(Run& run, const Common& c) {
  const auto& e = run.cfg.exp;
  const auto arr = primary_arrangement(e);
  auto r = obtain_model(run, c, arr);
  const Generator gen(e.data);
  MissingMask mask;
  if (!c.missing.empty()) {
    mask = parse_missing_mask(c.missing, run.names());
    mask.validate(e.data.num_modalities);
  }
  for (auto t : arr.targets) {
    const auto data = gen.sample(t, e.samples_per_domain);
    if (mask.empty()) {
      run.rows.push_back({pair_label(arr, t), "full", evaluate(r.trained.state, data)});
      continue;
    }
    for (auto f : fills(c.fill)) {
      const EvalMode mode{f, mask};
      run.rows.push_back({pair_label(arr, t), mode.label(run.names()), evaluate(r.trained.state, data, mode)});
    }
  }
}

void cmd_missing(Run& run, const Common& c) {
  const auto& e = run.cfg.exp;
  const auto arr = primary_arrangement(e);
  const auto r = obtain_model(run, c, arr);
  const auto masks = masks_for(run, c.missing);
  const auto wanted = fills(c.fill);
  const auto res = run_missing(e, r, masks);
  save_checkpoint(run.path("checkpoint_finetuned.bin"), res.finetuned);
  for (const auto& t : r.trained.metrics.targets) run.rows.push_back({pair_label(arr, t.domain), "full", t.top1});
  for (const auto& s : res.scores) {
    if (std::find(wanted.begin(), wanted.end(), s.fill) == wanted.end()) continue;
    run.rows.push_back({pair_label(arr, s.domain), EvalMode{s.fill, s.mask}.label(run.names()), s.top1});
  }
  run.report << "[finetune]\nepochs = " << e.finetune_epochs << "\ntrans_loss = " << std::setprecision(17);
  for (std::size_t i = 0; i < res.trans_loss.size(); ++i) run.report << (i ? "," : "") << res.trans_loss[i];
  run.report << "\n\n";
}

void cmd_ablate(Run& run, const Common&) {
  for (const auto& tg : ablation_rows()) {
    auto e = run.cfg.exp;
    e.model.toggles = tg;
    const auto res = run_protocol(e);
    const auto mode = "toggles=" + tg.label();
    for (const auto& r : res.runs) {
      write_arrangement_record(run.report, e, r);
      for (const auto& t : r.trained.metrics.targets)
        run.rows.push_back({pair_label(r.arrangement, t.domain), mode, t.top1});
    }
    run.rows.push_back({"mean", mode, res.mean_top1});
  }
}

void cmd_retrieval(Run& run, const Common& c) {
  const auto& e = run.cfg.exp;
  const auto arr = primary_arrangement(e);
  const auto r = obtain_model(run, c, arr);
  const Generator gen(e.data);
  const auto source = pooled(gen, arr.sources, e.samples_per_domain);
  for (auto t : arr.targets) {
    const auto data = gen.sample(t, e.samples_per_domain);
    const auto table = retrieval_table(r.trained.state, data);
    run.report << "# target D" << t << '\n';
    write_retrieval_report(run.report, table, run.names());
    for (const auto& row : table) {
      std::ostringstream mode;
      mode << "R@" << row.k << ':' << to_string(row.part) << ':' << run.names()[row.query_modality] << "->"
           << run.names()[row.gallery_modality];
      run.rows.push_back({pair_label(arr, t), mode.str(), row.recall});
    }
    ProbeSettings ps;
    ps.epochs = run.cfg.probe_epochs;
    ps.seed = e.seed;
    const double probe = shared_only_probe(r.trained.state, source, data, ps);
    run.rows.push_back({pair_label(arr, t), "probe:shared-only", probe});
    run.report << "[probe]\ntarget = " << t << "\nshared_only_top1 = " << std::setprecision(17) << probe << "\n\n";
  }
}

void cmd_infogap(Run& run, const Common&) {
  const auto& cfg = run.cfg;
  const auto rep = alignment_gap_experiment(build_info_gap_joint(cfg.infogap_high_bits, cfg.infogap_low_bits));
  write_infogap_report(run.report, rep);
  std::ostringstream label;
  label << "joint(" << std::setprecision(17) << cfg.infogap_high_bits << ';' << cfg.infogap_low_bits << ')';
  run.rows.push_back({label.str(), "delta_p", rep.delta_p});
  run.rows.push_back({label.str(), "gap", rep.gap});
  run.rows.push_back({label.str(), "aligned_ce", rep.aligned_optimal_ce});
  run.rows.push_back({label.str(), "unconstrained_ce", rep.unconstrained_optimal_ce});
  Rng rng(cfg.exp.seed, 0x4A4F494E);  // "JOIN"
  std::size_t holds = 0;
  double min_slack = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < cfg.infogap_random_joints; ++i) {
    const auto r = alignment_gap_experiment(random_joint(i % 2 == 0 ? 2 : 3, 2, rng));
    holds += r.gap >= r.delta_p - 1e-9 ? 1 : 0;
    min_slack = std::min(min_slack, r.gap - r.delta_p);
  }
  run.rows.push_back({"random_joints", "fraction_gap_ge_delta", cfg.infogap_random_joints ? static_cast<double>(holds) / static_cast<double>(cfg.infogap_random_joints) : 1.0});
  run.report << "[random_joints]\ncount = " << cfg.infogap_random_joints << "\nbound_holds = " << holds
             << "\nmin_gap_minus_delta = " << std::setprecision(17) << min_slack << "\n\n";
}

void cmd_dump(Run& run, const Common&) {
  const auto& e = run.cfg.exp;
  const Generator gen(e.data);
  Dataset all;
  for (std::size_t d = 0; d < e.data.num_domains; ++d) {
    const auto part = gen.sample(d, e.samples_per_domain);
    std::vector<double> counts(e.data.num_classes, 0.0);
    for (const auto& s : part) counts[s.label] += 1.0;
    for (std::size_t c = 0; c < counts.size(); ++c)
      run.rows.push_back({"D" + std::to_string(d), "class_fraction:" + std::to_string(c), counts[c] / static_cast<double>(part.size())});
    all.insert(all.end(), part.begin(), part.end());
  }
  std::ofstream os(run.path("dataset.txt"));
  write_dataset(os, e.data, all);
}

void write_outputs(Run& run, const std::string& command, double seconds) {
  {
    std::ofstream os(run.path("metrics.csv"));
    write_metrics_csv(os, run.rows);
  }
  if (!run.report.str().empty()) {
    std::ofstream os(run.path("report.txt"));
    os << run.report.str();
  }
  std::ofstream os(run.out / "manifest.txt");
  os << "[manifest]\ncommand = " << command << "\nversion = " << kVersion << "\nseed = " << run.cfg.exp.seed
     << "\nduration_seconds = " << std::setprecision(6) << seconds << "\n\n[artifacts]\n";
  for (const auto& [name, p] : run.artifacts) os << name << " = " << p << '\n';
  os << "\n[config]\n";
  write_config_echo(os, run.cfg);
}

int run_command(const std::string& name, const Common& c, void (*fn)(Run&, const Common&)) {
  const auto t0 = std::chrono::steady_clock::now();
  try {
    Run run;
    run.cfg = resolve(c);
    run.out = c.out;
    fs::create_directories(run.out);
    fn(run, c);
    write_outputs(run, name, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    std::cout << name << ": " << run.rows.size() << " metric rows -> " << (run.out / "metrics.csv").string() << '\n';
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const LoadError& e) {
    std::cerr << "load error: " << e.what() << '\n';
    return 3;
  } catch (const TrainingError& e) {
    std::cerr << "training error: " << e.what() << '\n';
    return 4;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-modal domain generalization on synthetic data"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));
  Common c;

  auto add_common = [&](CLI::App* sub, bool model_flags) {
    sub->add_option("--config", c.config_path, "config file of 'key = value' lines")->check(CLI::ExistingFile);
    sub->add_option("--set", c.sets, "override KEY=VALUE (repeatable)");
    sub->add_option("--seed", c.seed, "seed (overrides the config)");
    sub->add_option("--profile", c.profile, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
    sub->add_option("--out", c.out, "output directory");
    if (model_flags) sub->add_option("--checkpoint", c.checkpoint, "load this checkpoint instead of training");
  };

  struct Entry {
    const char* name;
    const char* help;
    void (*fn)(Run&, const Common&);
    bool model_flags;
    bool mask_flags;
  };
  const Entry entries[] = {
      {"train", "train every arrangement of the protocol", cmd_train, false, false},
      {"eval", "top-1 on the target domains, optionally with a missing mask", cmd_eval, true, true},
      {"missing", "zero filling vs translation filling with missing modalities", cmd_missing, true, true},
      {"ablate", "the seven module-toggle rows", cmd_ablate, false, false},
      {"retrieval", "cross-modal R@1/5/10 on shared and specific features, plus the shared-only probe", cmd_retrieval, true, false},
      {"infogap", "exact information-gap check on small discrete joints", cmd_infogap, false, false},
      {"dump-data", "write the synthetic dataset as text", cmd_dump, false, false},
  };
  std::vector<std::pair<CLI::App*, const Entry*>> subs;
  for (const auto& e : entries) {
    auto* sub = app.add_subcommand(e.name, e.help);
    add_common(sub, e.model_flags);
    if (e.mask_flags) {
      sub->add_option("--missing", c.missing, "comma-separated modality names to drop");
      sub->add_option("--fill", c.fill, "zero, translate or both")->check(CLI::IsMember({"zero", "translate", "both"}));
    }
    subs.emplace_back(sub, &e);
  }
  CLI11_PARSE(app, argc, argv);
  for (const auto& [sub, e] : subs)
    if (sub->parsed()) return run_command(e->name, c, e->fn);
  return 1;
}
