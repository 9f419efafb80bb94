// Command-line front end: data generation, the training stages, full runs,
// experiment drivers and mask reports. See README.md for the config keys.

#include "diwift/config.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace diwift;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfigFailure = 2, kDataFailure = 3, kDivergence = 4 };

struct CommonOptions {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("-c,--config", o.config, "JSON config file (defaults apply to missing keys)");
  cmd->add_option("-o,--out", o.out, "output directory (overrides output_dir)");
  cmd->add_option("--seed", o.seed, "root seed (overrides seed)");
  cmd->add_option("--set", o.overrides, "override a config key, e.g. --set pretrain.epochs=5")->take_all();
}

/// Applies `a.b.c=value`; the value is parsed as JSON when possible, else
/// taken as a string.
void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* node = &j;
  std::stringstream path(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(path, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i])) (*node)[parts[i]] = nlohmann::json::object();
    node = &(*node)[parts[i]];
    if (!node->is_object()) throw ConfigError("--set " + key + ": " + parts[i] + " is not a section");
  }
  (*node)[parts.back()] = value;
}

RunConfig resolve(const CommonOptions& o) {
  nlohmann::json j = nlohmann::json::object();
  if (!o.config.empty()) {
    std::ifstream in(o.config);
    if (!in) throw ConfigError("cannot open config " + o.config);
    j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError(o.config + ": invalid JSON");
  }
  for (const auto& a : o.overrides) apply_override(j, a);
  RunConfig c = run_config_from_json(j);
  if (!o.out.empty()) c.output_dir = o.out;
  if (o.seed) c.seed = *o.seed;
  validate(c);
  return c;
}

fs::path prepare_output(const RunConfig& c) {
  const fs::path dir(c.output_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory " + dir.string() + ": " + ec.message());
  write_json(to_json(c), (dir / "config.json").string());
  return dir;
}

Dataset load_source(const RunConfig& c, const std::string& path) {
  return load_csv(path, c.dataset.fields, c.dataset.label);
}

Splits load_splits(const RunConfig& c) {
  if (c.dataset.source == "synthetic") return synthetic_source(c.dataset.kind, c.dataset.rows, c.dataset.ratios)(c.seed);
  return resplit(load_source(c, c.dataset.path), c.dataset.ratios)(c.seed);
}

void write_history(const std::vector<EpochStat>& h, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "epoch,train_loss,valid_loss\n";
  for (const auto& e : h) out << e.epoch << ',' << format_double(e.train_loss) << ',' << format_double(e.valid_loss) << '\n';
}

void write_trace(const std::vector<SelectorEpoch>& t, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "epoch,tau,selection_loss,lissa_steps\n";
  for (const auto& e : t)
    out << e.epoch << ',' << format_double(e.tau) << ',' << format_double(e.loss) << ',' << e.lissa_steps << '\n';
}

std::string hex(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::vector<std::string> feature_names(const Dataset& ds) {
  std::vector<std::string> names;
  for (std::size_t k = 0; k < ds.dim(); ++k) names.push_back(ds.feature_name(k));
  return names;
}

// ---------------------------------------------------------------------------
// Commands.

struct GenOptions {
  std::string kind = "syn3";
  std::size_t rows = 10000;
  std::uint64_t seed = 0;
  std::string out;
  double accept_pos = 1.0;
  double accept_neg = 1.0;
};

int cmd_gen(const GenOptions& o) {
  if (o.rows == 0) throw ConfigError("--rows must be positive");
  const SynKind kind = parse_syn_kind(o.kind);
  const bool shifted = o.accept_pos < 1.0 || o.accept_neg < 1.0;
  const Dataset ds =
      shifted ? gen_syn_shifted(kind, o.rows, o.seed, o.accept_pos, o.accept_neg) : gen_syn(kind, o.rows, o.seed);
  const fs::path out(o.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_csv(ds, out.string());
  write_relevance(*ds.relevance, out.string() + ".relevance");
  write_json({{"kind", o.kind}, {"rows", o.rows}, {"seed", o.seed}, {"accept_pos", o.accept_pos},
              {"accept_neg", o.accept_neg}},
             out.string() + ".json");
  std::cout << "wrote " << ds.rows() << " rows to " << out.string() << '\n';
  return kOk;
}

int cmd_pretrain(const CommonOptions& co) {
  const RunConfig c = resolve(co);
  const fs::path dir = prepare_output(c);
  const Splits s = load_splits(c);
  const TrainConfig tc = seeded(c.pipeline, c.seed).pretrain;
  auto res = train(s.train, &s.valid, tc);
  save_basenet(res.model, (dir / "pretrained.json").string());
  write_history(res.history, dir / "pretrain_history.csv");
  if (tc.keep_checkpoints) {
    fs::create_directories(dir / "checkpoints");
    for (std::size_t e = 0; e < res.checkpoints.size(); ++e)
      save_basenet(res.checkpoints[e], (dir / "checkpoints" / ("epoch_" + std::to_string(e + 1) + ".json")).string());
  }
  std::cout << "pretrained " << res.history.size() << " epochs (model from epoch " << res.chosen_epoch
            << "), valid AUC " << auc(predict(res.model, s.valid.x), s.valid.y) << '\n';
  return kOk;
}

int cmd_select(const CommonOptions& co, const std::string& pretrained_path) {
  if (!fs::exists(pretrained_path)) throw DataError("pretrained model not found: " + pretrained_path);
  const BaseNet pre = load_basenet(pretrained_path);
  const RunConfig c = resolve(co);
  const fs::path dir = prepare_output(c);
  const Splits s = load_splits(c);
  if (pre.input_dim() != s.train.dim()) throw DataError("pretrained model input width does not match the data");
  const PipelineConfig pc = seeded(c.pipeline, c.seed);
  auto res = train_selector_with(s.train.x, influence_provider(pre, s.train, s.valid, pc.lissa), pc.selector);
  save_selector(res.model, (dir / "selector.json").string());
  write_influence(res.last_phi, pc.lissa, (dir / "influence.csv").string());
  write_trace(res.trace, dir / "selector_trace.csv");
  const MaskMatrix m = hard_mask_rows(select_prob_rows(res.model, s.train.x, pc.selector.schedule.tau_min), pc.threshold);
  write_mask_csv(m, feature_names(s.train), (dir / "mask_train.csv").string());
  std::cout << "selector trained for " << res.trace.size() << " epochs; final selection loss "
            << (res.trace.empty() ? 0.0 : res.trace.back().loss) << '\n';
  return kOk;
}

int cmd_run(const CommonOptions& co, bool identity) {
  RunConfig c = resolve(co);
  if (identity) c.pipeline.mode = SelectionMode::identity;
  const fs::path dir = prepare_output(c);
  const Splits s = load_splits(c);
  const PipelineConfig pc = seeded(c.pipeline, c.seed);
  const PipelineOutput out = run_diwift(s.train, s.valid, pc);
  save_basenet(out.pretrained, (dir / "pretrained.json").string());
  save_basenet(out.predictor.model, (dir / "final.json").string());
  if (out.selector) save_selector(*out.selector, (dir / "selector.json").string());
  const auto names = feature_names(s.train);
  write_mask_csv(out.train_mask, names, (dir / "mask_train.csv").string());
  write_mask_csv(out.valid_mask, names, (dir / "mask_valid.csv").string());
  const MaskMatrix test_mask = out.predictor.masks(s.test.x);
  write_mask_csv(test_mask, names, (dir / "mask_test.csv").string());
  write_history(out.pretrain_history, dir / "pretrain_history.csv");
  write_history(out.retrain_history, dir / "retrain_history.csv");
  write_trace(out.selector_trace, dir / "selector_trace.csv");

  const double test_auc = auc(out.predictor.scores(s.test.x), s.test.y);
  const double valid_auc = auc(out.predictor.scores(s.valid.x), s.valid.y);
  nlohmann::json m;
  m["mode"] = to_string(pc.mode);
  m["test_auc"] = test_auc;
  m["valid_auc"] = valid_auc;
  m["pretrained_epoch"] = out.pretrained_epoch;
  m["pretrain_valid_loss"] = out.pretrain_valid_loss;
  m["final_valid_loss"] = out.final_valid_loss;
  m["retrain_fingerprint"] = hex(out.retrain_fingerprint);
  m["mask_violations"] = zero_feature_violations(out.train_mask, s.train.x) +
                         zero_feature_violations(out.valid_mask, s.valid.x) +
                         zero_feature_violations(test_mask, s.test.x);
  m["selected_fraction"] = nlohmann::json::object();
  for (const auto& f : out.mask_stats) m["selected_fraction"][f.field] = f.selected_fraction;
  m["rows"] = {{"train", s.train.rows()}, {"valid", s.valid.rows()}, {"test", s.test.rows()}};
  write_json(m, (dir / "metrics.json").string());
  std::cout << "test AUC " << test_auc << " (valid " << valid_auc << "); run directory " << dir.string() << '\n';
  return kOk;
}

int cmd_experiment(const CommonOptions& co, const std::string& which) {
  const RunConfig c = resolve(co);
  const fs::path dir = prepare_output(c);
  std::vector<Method> methods;
  for (const auto& m : c.experiment.methods) methods.push_back(parse_method(m));
  const ProgressFn progress = [](const RunRecord& r) {
    std::cerr << summary_key(r) << " repeat " << r.repeat << ": "
              << (r.ok ? "AUC " + format_double(r.auc) : "failed: " + r.error) << '\n';
  };
  ExperimentReport rep;
  if (which == "compare") {
    const SplitSource src = c.dataset.source == "synthetic"
                                ? synthetic_source(c.dataset.kind, c.dataset.rows, c.dataset.ratios)
                                : resplit(load_source(c, c.dataset.path), c.dataset.ratios);
    rep = compare(src, methods, c.experiment.repeats, c.pipeline, c.seed, progress);
  } else if (which == "shift") {
    SplitSource src;
    if (c.dataset.source == "synthetic") {
      ShiftSpec spec = c.experiment.shift;
      spec.kind = c.dataset.kind;
      src = synthetic_shift_source(spec);
    } else {
      if (c.dataset.unbiased_path.empty()) throw ConfigError("shift on csv data needs dataset.unbiased_path");
      src = shifted_source(load_source(c, c.dataset.path), load_source(c, c.dataset.unbiased_path));
    }
    rep = shift_experiment(src, methods, c.experiment.repeats, c.pipeline, c.seed, progress);
  } else {
    const auto cps = c.experiment.checkpoints.empty() ? default_checkpoints(c.pipeline.pretrain.epochs)
                                                      : c.experiment.checkpoints;
    const SplitSource src = c.dataset.source == "synthetic"
                                ? synthetic_source(c.dataset.kind, c.dataset.rows, c.dataset.ratios)
                                : resplit(load_source(c, c.dataset.path), c.dataset.ratios);
    rep = sensitivity_experiment(src, cps, c.experiment.repeats, c.pipeline, c.seed, progress);
  }
  rep.config = to_json(c);
  write_json(to_json(rep), (dir / "report.json").string());
  const std::string text = to_text(rep);
  std::ofstream(dir / "report.txt") << text;
  std::cout << text;
  return kOk;
}

int cmd_report_mask(const CommonOptions& co, const std::string& run_dir, const std::vector<std::size_t>& rows,
                    std::size_t first) {
  const fs::path run(run_dir);
  for (const char* f : {"selector.json", "final.json"})
    if (!fs::exists(run / f)) throw DataError("run directory lacks " + std::string(f) + ": " + run.string());
  CommonOptions o = co;
  if (o.out.empty()) o.out = run.string();
  const RunConfig c = resolve(o);
  const fs::path dir = prepare_output(c);
  const Splits s = load_splits(c);
  Predictor pred;
  pred.model = load_basenet((run / "final.json").string());
  pred.selector = load_selector((run / "selector.json").string());
  pred.threshold = c.pipeline.threshold;
  pred.tau = c.pipeline.selector.schedule.tau_min;
  if (pred.model.input_dim() != s.test.dim() || pred.selector->input_dim() != s.test.dim())
    throw DataError("run artifacts do not match the configured data");
  std::vector<std::size_t> idx = rows;
  if (idx.empty())
    for (std::size_t i = 0; i < std::min(first, s.test.rows()); ++i) idx.push_back(i);
  const MaskReport rep = mask_report(pred, s.test, idx);
  const std::string text = mask_report_text(rep);
  std::ofstream(dir / "mask_report.txt") << text;
  std::ofstream(dir / "mask_report.csv") << mask_report_csv(rep);
  std::cout << text;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Instance-wise influential feature selection: data, training stages and experiments"};
  app.require_subcommand(1);

  GenOptions gen;
  auto* g = app.add_subcommand("gen", "write a synthetic dataset CSV and its relevance sidecar");
  g->add_option("--kind", gen.kind, "syn1, syn2 or syn3")->capture_default_str();
  g->add_option("--rows", gen.rows, "number of rows")->capture_default_str();
  g->add_option("--seed", gen.seed, "generator seed")->capture_default_str();
  g->add_option("--out", gen.out, "output CSV path")->required();
  g->add_option("--accept-pos", gen.accept_pos, "keep probability for y=1 rows (label-biased sample)");
  g->add_option("--accept-neg", gen.accept_neg, "keep probability for y=0 rows (label-biased sample)");

  CommonOptions pre_o, sel_o, run_o, rep_o, cmp_o, shift_o, sens_o;
  auto* pre = app.add_subcommand("pretrain", "train the base network on all features");
  add_common(pre, pre_o);

  std::string pretrained_path;
  auto* sel = app.add_subcommand("select", "train the selector against a pretrained model");
  add_common(sel, sel_o);
  sel->add_option("--pretrained", pretrained_path, "pretrained model JSON")->required();

  bool identity = false;
  auto* run = app.add_subcommand("run", "full pipeline: pretrain, select, mask, retrain");
  add_common(run, run_o);
  run->add_flag("--identity-mask", identity, "keep every nonzero feature (no-selection reduction)");

  auto* exp = app.add_subcommand("experiment", "repeated seeded runs and reports");
  exp->require_subcommand(1);
  auto* cmp = exp->add_subcommand("compare", "methods side by side on re-split data");
  add_common(cmp, cmp_o);
  auto* shift = exp->add_subcommand("shift", "train on a label-biased sample, evaluate on unbiased data");
  add_common(shift, shift_o);
  auto* sens = exp->add_subcommand("sensitivity", "DIWIFT from several pretraining checkpoints");
  add_common(sens, sens_o);

  std::string run_dir;
  std::vector<std::size_t> rows;
  std::size_t first = 20;
  auto* rep = app.add_subcommand("report-mask", "per-row selected features of a finished run on test rows");
  add_common(rep, rep_o);
  rep->add_option("--run", run_dir, "run directory written by `run`")->required();
  rep->add_option("--rows", rows, "test row indices")->delimiter(',');
  rep->add_option("--first", first, "report the first N test rows when --rows is absent")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigFailure;
  }

  try {
    if (*g) return cmd_gen(gen);
    if (*pre) return cmd_pretrain(pre_o);
    if (*sel) return cmd_select(sel_o, pretrained_path);
    if (*run) return cmd_run(run_o, identity);
    if (*cmp) return cmd_experiment(cmp_o, "compare");
    if (*shift) return cmd_experiment(shift_o, "shift");
    if (*sens) return cmd_experiment(sens_o, "sensitivity");
    if (*rep) return cmd_report_mask(rep_o, run_dir, rows, first);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigFailure;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kDataFailure;
  } catch (const DivergenceError& e) {
    std::cerr << "numeric divergence: " << e.what() << '\n';
    return kDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}
