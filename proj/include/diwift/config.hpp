#pragma once

#include "diwift/harness.hpp"
#include "diwift/io.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <set>
#include <string>
#include <vector>

namespace diwift {

/// Where rows come from.
struct DatasetSection {
  std::string source = "synthetic";  // "synthetic" or "csv"
  SynKind kind = SynKind::syn3;
  std::size_t rows = 10000;
  std::string path;            // csv: the full dataset
  std::string unbiased_path;   // csv, shift experiment: the unbiased source
  std::string label = "label";
  std::vector<FieldSchema> fields;  // csv: empty categories are inferred
  std::array<double, 3> ratios{3.0, 1.0, 1.0};
};

struct ExperimentSection {
  std::vector<std::string> methods{"no_selection", "diwift"};
  std::size_t repeats = 5;
  std::vector<std::size_t> checkpoints;  // sensitivity; empty = 5 spread over the last half
  ShiftSpec shift;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  DatasetSection dataset;
  PipelineConfig pipeline;
  ExperimentSection experiment;
};

inline RunConfig default_run_config() {
  RunConfig c;
  c.pipeline.retrain = c.pipeline.pretrain;
  return c;
}

// ---------------------------------------------------------------------------
// JSON mapping. Every key is optional on input; unknown keys are rejected.

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  const std::set<std::string> known(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

inline nlohmann::json train_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"l2", c.l2},
          {"hidden", c.hidden},               {"hidden_layers", c.hidden_layers},
          {"batch_size", c.batch_size},       {"epochs", c.epochs},
          {"keep_checkpoints", c.keep_checkpoints}, {"select_best", c.select_best}};
}

inline void train_from_json(const nlohmann::json& j, TrainConfig& c, const std::string& where) {
  reject_unknown(j, where,
                 {"learning_rate", "l2", "hidden", "hidden_layers", "batch_size", "epochs", "keep_checkpoints",
                  "select_best"});
  read(j, "learning_rate", c.learning_rate, where);
  read(j, "l2", c.l2, where);
  read(j, "hidden", c.hidden, where);
  read(j, "hidden_layers", c.hidden_layers, where);
  read(j, "batch_size", c.batch_size, where);
  read(j, "epochs", c.epochs, where);
  read(j, "keep_checkpoints", c.keep_checkpoints, where);
  read(j, "select_best", c.select_best, where);
}

inline void selector_from_json(const nlohmann::json& j, SelectorConfig& c) {
  const std::string w = "selector";
  reject_unknown(j, w,
                 {"embed_dim", "heads", "gate_hidden", "gate_bias_init", "tau_min", "t_max", "learning_rate", "batch_size",
                  "plateau_tolerance", "patience"});
  read(j, "embed_dim", c.embed_dim, w);
  read(j, "heads", c.heads, w);
  read(j, "gate_hidden", c.gate_hidden, w);
  read(j, "gate_bias_init", c.gate_bias_init, w);
  read(j, "tau_min", c.schedule.tau_min, w);
  read(j, "t_max", c.schedule.t_max, w);
  read(j, "learning_rate", c.learning_rate, w);
  read(j, "batch_size", c.batch_size, w);
  read(j, "plateau_tolerance", c.plateau_tolerance, w);
  read(j, "patience", c.patience, w);
}

inline nlohmann::json lissa_json(const LissaConfig& c) {
  return {{"depth", c.depth},         {"damping", c.damping},     {"scale", c.scale},
          {"batch_size", c.batch_size}, {"repeats", c.repeats},   {"tolerance", c.tolerance},
          {"window", c.window},       {"power_iterations", c.power_iterations}};
}

inline void lissa_from_json(const nlohmann::json& j, LissaConfig& c) {
  const std::string w = "lissa";
  reject_unknown(j, w, {"depth", "damping", "scale", "batch_size", "repeats", "tolerance", "window", "power_iterations"});
  read(j, "depth", c.depth, w);
  read(j, "damping", c.damping, w);
  read(j, "scale", c.scale, w);
  read(j, "batch_size", c.batch_size, w);
  read(j, "repeats", c.repeats, w);
  read(j, "tolerance", c.tolerance, w);
  read(j, "window", c.window, w);
  read(j, "power_iterations", c.power_iterations, w);
}

inline nlohmann::json field_json(const FieldSchema& f) {
  nlohmann::json j = {{"name", f.name}, {"kind", f.kind == FieldKind::categorical ? "categorical" : "numerical"}};
  if (f.kind == FieldKind::categorical) j["categories"] = f.categories;
  if (f.kind == FieldKind::numerical && f.has_bounds) {
    j["min"] = f.min;
    j["max"] = f.max;
  }
  return j;
}

inline FieldSchema field_from_json(const nlohmann::json& j) {
  const std::string w = "dataset.fields[]";
  reject_unknown(j, w, {"name", "kind", "categories", "min", "max"});
  FieldSchema f;
  std::string kind = "numerical";
  read(j, "name", f.name, w);
  read(j, "kind", kind, w);
  if (f.name.empty()) throw ConfigError("every field needs a name");
  if (kind == "categorical") {
    f.kind = FieldKind::categorical;
    read(j, "categories", f.categories, w);
    if (j.contains("min") || j.contains("max")) throw ConfigError("field " + f.name + ": categorical fields take no bounds");
  } else if (kind == "numerical") {
    f.kind = FieldKind::numerical;
    if (j.contains("categories")) throw ConfigError("field " + f.name + ": numerical fields take no categories");
    if (j.contains("min") != j.contains("max")) throw ConfigError("field " + f.name + ": give both min and max");
    if (j.contains("min")) {
      read(j, "min", f.min, w);
      read(j, "max", f.max, w);
      if (!(f.max >= f.min)) throw ConfigError("field " + f.name + ": max must be >= min");
      f.has_bounds = true;
    }
  } else {
    throw ConfigError("field " + f.name + ": kind must be 'categorical' or 'numerical'");
  }
  return f;
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json fields = nlohmann::json::array();
  for (const auto& f : c.dataset.fields) fields.push_back(detail::field_json(f));
  nlohmann::json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["dataset"] = {{"source", c.dataset.source},
                  {"kind", to_string(c.dataset.kind)},
                  {"rows", c.dataset.rows},
                  {"path", c.dataset.path},
                  {"unbiased_path", c.dataset.unbiased_path},
                  {"label", c.dataset.label},
                  {"fields", fields},
                  {"split", c.dataset.ratios}};
  j["pretrain"] = detail::train_json(c.pipeline.pretrain);
  j["retrain"] = detail::train_json(c.pipeline.retrain);
  j["selector"] = selector_config_json(c.pipeline.selector);
  j["lissa"] = detail::lissa_json(c.pipeline.lissa);
  j["pipeline"] = {{"threshold", c.pipeline.threshold},
                   {"soft_retrain", c.pipeline.soft_retrain},
                   {"mode", to_string(c.pipeline.mode)}};
  j["pipeline"]["checkpoint_epoch"] =
      c.pipeline.checkpoint_epoch ? nlohmann::json(*c.pipeline.checkpoint_epoch) : nlohmann::json(nullptr);
  j["experiment"] = {{"methods", c.experiment.methods},
                     {"repeats", c.experiment.repeats},
                     {"checkpoints", c.experiment.checkpoints},
                     {"shift",
                      {{"train_rows", c.experiment.shift.train_rows},
                       {"unbiased_rows", c.experiment.shift.unbiased_rows},
                       {"accept_pos", c.experiment.shift.accept_pos},
                       {"accept_neg", c.experiment.shift.accept_neg}}}};
  return j;
}

inline SelectionMode parse_selection_mode(const std::string& s) {
  for (auto m : {SelectionMode::influence, SelectionMode::identity, SelectionMode::oracle})
    if (to_string(m) == s) return m;
  throw ConfigError("pipeline.mode must be influence, identity or oracle");
}

/// Defaults overlaid with the document's values, then validated.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c = default_run_config();
  detail::reject_unknown(j, "config",
                         {"seed", "output_dir", "dataset", "pretrain", "retrain", "selector", "lissa", "pipeline",
                          "experiment"});
  detail::read(j, "seed", c.seed, "config");
  detail::read(j, "output_dir", c.output_dir, "config");
  if (j.contains("dataset")) {
    const auto& d = j["dataset"];
    const std::string w = "dataset";
    detail::reject_unknown(d, w, {"source", "kind", "rows", "path", "unbiased_path", "label", "fields", "split"});
    detail::read(d, "source", c.dataset.source, w);
    if (d.contains("kind")) {
      std::string k;
      detail::read(d, "kind", k, w);
      c.dataset.kind = parse_syn_kind(k);
    }
    detail::read(d, "rows", c.dataset.rows, w);
    detail::read(d, "path", c.dataset.path, w);
    detail::read(d, "unbiased_path", c.dataset.unbiased_path, w);
    detail::read(d, "label", c.dataset.label, w);
    detail::read(d, "split", c.dataset.ratios, w);
    if (d.contains("fields")) {
      if (!d["fields"].is_array()) throw ConfigError("dataset.fields must be an array");
      for (const auto& f : d["fields"]) c.dataset.fields.push_back(detail::field_from_json(f));
    }
  }
  // The retrain section starts from the pretrain values so one section is
  // enough for both stages.
  if (j.contains("pretrain")) detail::train_from_json(j["pretrain"], c.pipeline.pretrain, "pretrain");
  c.pipeline.retrain = c.pipeline.pretrain;
  c.pipeline.retrain.keep_checkpoints = false;
  if (j.contains("retrain")) detail::train_from_json(j["retrain"], c.pipeline.retrain, "retrain");
  if (j.contains("selector")) detail::selector_from_json(j["selector"], c.pipeline.selector);
  if (j.contains("lissa")) detail::lissa_from_json(j["lissa"], c.pipeline.lissa);
  if (j.contains("pipeline")) {
    const auto& p = j["pipeline"];
    const std::string w = "pipeline";
    detail::reject_unknown(p, w, {"threshold", "soft_retrain", "mode", "checkpoint_epoch"});
    detail::read(p, "threshold", c.pipeline.threshold, w);
    detail::read(p, "soft_retrain", c.pipeline.soft_retrain, w);
    if (p.contains("mode")) {
      std::string m;
      detail::read(p, "mode", m, w);
      c.pipeline.mode = parse_selection_mode(m);
    }
    if (p.contains("checkpoint_epoch") && !p["checkpoint_epoch"].is_null()) {
      std::size_t e = 0;
      detail::read(p, "checkpoint_epoch", e, w);
      c.pipeline.checkpoint_epoch = e;
    }
  }
  if (j.contains("experiment")) {
    const auto& e = j["experiment"];
    const std::string w = "experiment";
    detail::reject_unknown(e, w, {"methods", "repeats", "checkpoints", "shift"});
    detail::read(e, "methods", c.experiment.methods, w);
    detail::read(e, "repeats", c.experiment.repeats, w);
    detail::read(e, "checkpoints", c.experiment.checkpoints, w);
    if (e.contains("shift")) {
      const auto& s = e["shift"];
      detail::reject_unknown(s, "experiment.shift", {"train_rows", "unbiased_rows", "accept_pos", "accept_neg"});
      detail::read(s, "train_rows", c.experiment.shift.train_rows, "experiment.shift");
      detail::read(s, "unbiased_rows", c.experiment.shift.unbiased_rows, "experiment.shift");
      detail::read(s, "accept_pos", c.experiment.shift.accept_pos, "experiment.shift");
      detail::read(s, "accept_neg", c.experiment.shift.accept_neg, "experiment.shift");
    }
  }
  return c;
}

/// Checks everything that does not need the data itself; file references
/// must exist.
inline void validate(const RunConfig& c) {
  check_pipeline_config(c.pipeline);
  if (c.dataset.source == "synthetic") {
    if (c.dataset.rows < 5) throw ConfigError("dataset.rows must be >= 5");
  } else if (c.dataset.source == "csv") {
    if (c.dataset.path.empty()) throw ConfigError("dataset.path is required for csv sources");
    if (!std::filesystem::exists(c.dataset.path)) throw ConfigError("dataset.path does not exist: " + c.dataset.path);
    if (!c.dataset.unbiased_path.empty() && !std::filesystem::exists(c.dataset.unbiased_path))
      throw ConfigError("dataset.unbiased_path does not exist: " + c.dataset.unbiased_path);
    if (c.dataset.fields.empty()) throw ConfigError("dataset.fields must list the csv columns to use");
  } else {
    throw ConfigError("dataset.source must be 'synthetic' or 'csv'");
  }
  split_sizes(100, c.dataset.ratios);
  if (c.experiment.repeats < 1) throw ConfigError("experiment.repeats must be >= 1");
  if (c.experiment.methods.empty()) throw ConfigError("experiment.methods is empty");
  for (const auto& m : c.experiment.methods) parse_method(m);
  const auto& s = c.experiment.shift;
  if (s.train_rows < 1 || s.unbiased_rows < 2) throw ConfigError("experiment.shift row counts are too small");
  if (!(s.accept_pos > 0 && s.accept_pos <= 1 && s.accept_neg > 0 && s.accept_neg <= 1))
    throw ConfigError("experiment.shift acceptance probabilities must lie in (0,1]");
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": invalid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

/// Default sensitivity checkpoints: 5 epochs spread over the last half of
/// pretraining, ending at the final epoch.
inline std::vector<std::size_t> default_checkpoints(std::size_t epochs) {
  std::vector<std::size_t> out;
  const double first = static_cast<double>(epochs) / 2.0;
  for (int i = 0; i < 5; ++i) {
    const auto e = static_cast<std::size_t>(std::ceil(first + (static_cast<double>(epochs) - first) * i / 4.0));
    const std::size_t v = std::clamp<std::size_t>(e, 1, epochs);
    if (out.empty() || out.back() != v) out.push_back(v);
  }
  return out;
}

}  // namespace diwift
