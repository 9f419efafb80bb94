#pragma once

#include "diwift/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace diwift {

// ---------------------------------------------------------------------------
// Metrics.

/// Pairwise-ranking AUC with ties worth 1/2, via the rank-sum statistic.
/// Twice the statistic is accumulated in integers, so the result equals pair
/// enumeration exactly.
inline double auc(const Vector& scores, const Vector& labels) {
  if (scores.size() != labels.size()) throw DataError("auc: length mismatch");
  const auto n = static_cast<std::size_t>(scores.size());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[static_cast<Eigen::Index>(i)] != 0.0 && labels[static_cast<Eigen::Index>(i)] != 1.0)
      throw DataError("auc: labels must be 0 or 1");
    if (std::isnan(scores[static_cast<Eigen::Index>(i)])) throw DataError("auc: NaN score");
  }
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[static_cast<Eigen::Index>(a)] < scores[static_cast<Eigen::Index>(b)];
  });
  // Positives in a tie group beat every negative below the group and tie
  // with the negatives inside it.
  unsigned long long twice_u = 0, npos = 0, nneg = 0;
  for (std::size_t from = 0; from < n;) {
    std::size_t to = from;
    unsigned long long gp = 0, gn = 0;
    while (to < n && scores[static_cast<Eigen::Index>(order[to])] == scores[static_cast<Eigen::Index>(order[from])]) {
      (labels[static_cast<Eigen::Index>(order[to])] == 1.0 ? gp : gn) += 1;
      ++to;
    }
    twice_u += 2 * gp * nneg + gp * gn;
    npos += gp;
    nneg += gn;
    from = to;
  }
  if (npos == 0 || nneg == 0) throw DataError("auc needs both positive and negative labels");
  return static_cast<double>(twice_u) / 2.0 / static_cast<double>(npos * nneg);
}

/// sqrt((1/N) sum (v - mean)^2).
inline double std_dev(const std::vector<double>& v) {
  if (v.empty()) throw DataError("std_dev of an empty list");
  const double n = static_cast<double>(v.size());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  return std::sqrt(s / n);
}

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------
// Methods.

enum class Method { no_selection, diwift, oracle_mask, attention_only };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::no_selection: return "no_selection";
    case Method::diwift: return "diwift";
    case Method::oracle_mask: return "oracle_mask";
    case Method::attention_only: return "attention_only";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::no_selection, Method::diwift, Method::oracle_mask, Method::attention_only})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown method '" + s + "' (expected no_selection, diwift, oracle_mask or attention_only)");
}

/// Stage seeds for one end-to-end run.
inline PipelineConfig seeded(PipelineConfig cfg, std::uint64_t seed) {
  cfg.pretrain.seed = derive_seed(seed, kStreamPretrain);
  cfg.selector.seed = seed;
  cfg.lissa.seed = derive_seed(seed, kStreamLissa);
  cfg.retrain.seed = derive_seed(seed, kStreamRetrain);
  return cfg;
}

/// Selector gate and base network trained together on training cross-entropy
/// through P * X; no influence term. Masks and retraining follow run_diwift.
inline PipelineOutput run_attention_only(const Dataset& train, const Dataset& valid, const PipelineConfig& cfg) {
  check_pipeline_config(cfg);
  PipelineOutput out;
  const TrainConfig& bc = cfg.pretrain;
  BaseNet net = BaseNet::init(train.dim(), bc.hidden, bc.hidden_layers, derive_seed(bc.seed, 0));
  Selector sel = Selector::init(train.dim(), cfg.selector, derive_seed(cfg.selector.seed, kStreamSelectorInit));
  Adam opt(sel.param_count(), cfg.selector.learning_rate);
  Rng rng(derive_seed(cfg.selector.seed, kStreamSelectorTrain));
  std::vector<std::size_t> order(train.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  RowMatrix bx;
  Vector by;
  const std::size_t batch = bc.batch_size;
  for (std::size_t t = 0; t < cfg.selector.schedule.t_max; ++t) {
    const double tau = temperature(static_cast<double>(t), cfg.selector.schedule);
    rng.shuffle(order);
    for (std::size_t from = 0; from < order.size(); from += batch) {
      const std::size_t count = std::min(batch, order.size() - from);
      detail::gather_rows(train.x, train.y, std::span(order).subspan(from, count), bx, by);
      auto fwd = selector_forward(sel, bx, tau);
      const RowMatrix xr = fwd.prob.cwiseProduct(bx);
      Vector g = grad_theta_sum(net, xr, by) / static_cast<double>(count);
      g.noalias() += bc.l2 * net.flat();
      const RowMatrix dprob = grad_x_rows(net, xr, by).cwiseProduct(bx) / static_cast<double>(count);
      opt.step(sel.flat(), selector_backward(sel, bx, fwd, dprob));
      net.flat().noalias() -= bc.learning_rate * g;
    }
    SelectorEpoch ep;
    ep.epoch = t;
    ep.tau = tau;
    ep.loss = mean_loss(net, select_prob_rows(sel, train.x, tau).cwiseProduct(train.x), train.y);
    if (!std::isfinite(ep.loss) || !net.flat().allFinite() || !sel.flat().allFinite())
      throw DivergenceError("select: joint gate training diverged at epoch " + std::to_string(t));
    out.selector_trace.push_back(ep);
  }
  out.pretrained = net;
  out.pretrained_epoch = cfg.selector.schedule.t_max;
  out.pretrain_valid_loss = mean_loss(net, valid.x, valid.y);
  out.selector = sel;
  out.predictor.selector = sel;
  out.predictor.threshold = cfg.threshold;
  out.predictor.tau = cfg.selector.schedule.tau_min;
  out.train_mask = out.predictor.masks(train.x);
  out.valid_mask = out.predictor.masks(valid.x);
  out.mask_stats = mask_statistics(out.train_mask, train);
  const Dataset masked_train = apply_mask(train, out.train_mask);
  const Dataset masked_valid = apply_mask(valid, out.valid_mask);
  out.retrain_fingerprint = fingerprint(masked_train.x);
  auto res = diwift::train(masked_train, &masked_valid, cfg.retrain);
  out.retrain_history = res.history;
  out.predictor.model = std::move(res.model);
  out.final_valid_loss = mean_loss(out.predictor.model, masked_valid.x, masked_valid.y);
  return out;
}

/// One seeded end-to-end run, with its mask audit.
struct RunRecord {
  std::string method;
  std::size_t repeat = 0;
  std::uint64_t seed = 0;
  std::optional<std::size_t> checkpoint;
  bool ok = false;
  std::string error;
  double auc = std::numeric_limits<double>::quiet_NaN();
  double selected_fraction = std::numeric_limits<double>::quiet_NaN();  // mean over test rows and features
  std::size_t mask_violations = 0;                // S = 1 on a zero feature, train/valid/test
  std::optional<std::size_t> oracle_mismatches;  // oracle masks vs recomputed sign rule
  std::uint64_t retrain_fingerprint = 0;
  double seconds = 0.0;
};

/// Counts entries where `mask` disagrees with 1(phi x < 0).
inline std::size_t oracle_rule_mismatches(const MaskMatrix& mask, const RowMatrix& phi, const RowMatrix& x) {
  std::size_t bad = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index k = 0; k < x.cols(); ++k) {
      const bool keep = phi(i, k) * x(i, k) < 0.0;
      if (keep != (mask(i, k) != 0)) ++bad;
    }
  return bad;
}

struct MethodRun {
  RunRecord record;
  std::optional<PipelineOutput> output;
};

/// Runs `method` on one split; `pretrained` replaces the pretraining stage.
inline MethodRun run_method(Method method, const Splits& s, const PipelineConfig& base, std::uint64_t seed,
                            const BaseNet* pretrained = nullptr) {
  const auto start = std::chrono::steady_clock::now();
  MethodRun run;
  RunRecord& rec = run.record;
  rec.method = to_string(method);
  rec.seed = seed;
  const PipelineConfig cfg = seeded(base, seed);
  try {
    Predictor pred;
    switch (method) {
      case Method::no_selection: {
        auto res = train(s.train, &s.valid, cfg.retrain);
        pred.model = std::move(res.model);
        rec.retrain_fingerprint = fingerprint(s.train.x);
        break;
      }
      case Method::diwift:
      case Method::oracle_mask: {
        PipelineConfig c = cfg;
        c.mode = method == Method::diwift ? SelectionMode::influence : SelectionMode::oracle;
        run.output = run_diwift(s.train, s.valid, c, pretrained);
        if (method == Method::oracle_mask) {
          // Recompute phi from the pretrained model in a separate call.
          auto table = feature_influence(run.output->pretrained, s.train, s.valid, nullptr, nullptr, c.lissa);
          rec.oracle_mismatches = oracle_rule_mismatches(run.output->train_mask, table.phi, s.train.x);
        }
        break;
      }
      case Method::attention_only:
        run.output = run_attention_only(s.train, s.valid, cfg);
        break;
    }
    if (run.output) {
      pred = run.output->predictor;
      rec.retrain_fingerprint = run.output->retrain_fingerprint;
      rec.mask_violations += zero_feature_violations(run.output->train_mask, s.train.x);
      rec.mask_violations += zero_feature_violations(run.output->valid_mask, s.valid.x);
    }
    const MaskMatrix test_mask = pred.masks(s.test.x);
    rec.mask_violations += zero_feature_violations(test_mask, s.test.x);
    rec.selected_fraction = test_mask.cast<double>().mean();
    rec.auc = auc(pred.scores(s.test.x), s.test.y);
    rec.ok = true;
  } catch (const std::exception& e) {
    rec.ok = false;
    rec.error = e.what();
  }
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return run;
}

// ---------------------------------------------------------------------------
// Reports.

struct MethodSummary {
  std::string method;
  std::vector<double> aucs;  // successful runs only
  double mean = std::numeric_limits<double>::quiet_NaN();
  double std = std::numeric_limits<double>::quiet_NaN();
  std::size_t failures = 0;
};

struct ExperimentReport {
  std::string experiment;
  std::vector<RunRecord> records;
  std::vector<MethodSummary> summary;
  nlohmann::json config;
  double seconds = 0.0;
  std::optional<double> spread;  // sensitivity: max - min of per-checkpoint mean AUC

  const MethodSummary& method(const std::string& name) const {
    for (const auto& m : summary)
      if (m.method == name) return m;
    throw DataError("report has no method '" + name + "'");
  }

  std::size_t mask_violations() const {
    std::size_t v = 0;
    for (const auto& r : records) v += r.mask_violations;
    return v;
  }
};

/// Method label of a record as it appears in the summary.
inline std::string summary_key(const RunRecord& r) {
  return r.checkpoint ? r.method + "@" + std::to_string(*r.checkpoint) : r.method;
}

inline void summarize(ExperimentReport& rep) {
  rep.summary.clear();
  for (const auto& r : rep.records) {
    const std::string key = summary_key(r);
    auto it = std::find_if(rep.summary.begin(), rep.summary.end(), [&](const auto& m) { return m.method == key; });
    if (it == rep.summary.end()) {
      rep.summary.push_back({});
      it = std::prev(rep.summary.end());
      it->method = key;
    }
    if (r.ok)
      it->aucs.push_back(r.auc);
    else
      ++it->failures;
  }
  for (auto& m : rep.summary) {
    if (m.aucs.empty()) continue;
    m.mean = mean_of(m.aucs);
    m.std = std_dev(m.aucs);
  }
}

inline nlohmann::json to_json(const RunRecord& r) {
  nlohmann::json j = {{"method", r.method},
                      {"repeat", r.repeat},
                      {"seed", r.seed},
                      {"ok", r.ok},
                      {"mask_violations", r.mask_violations},
                      {"retrain_fingerprint", r.retrain_fingerprint},
                      {"seconds", r.seconds}};
  j["auc"] = r.ok ? nlohmann::json(r.auc) : nlohmann::json(nullptr);
  j["selected_fraction"] = r.ok ? nlohmann::json(r.selected_fraction) : nlohmann::json(nullptr);
  if (r.checkpoint) j["checkpoint"] = *r.checkpoint;
  if (r.oracle_mismatches) j["oracle_mismatches"] = *r.oracle_mismatches;
  if (!r.ok) j["error"] = r.error;
  return j;
}

inline nlohmann::json to_json(const ExperimentReport& rep) {
  nlohmann::json j;
  j["experiment"] = rep.experiment;
  j["config"] = rep.config;
  j["seconds"] = rep.seconds;
  j["records"] = nlohmann::json::array();
  for (const auto& r : rep.records) j["records"].push_back(to_json(r));
  j["summary"] = nlohmann::json::array();
  for (const auto& m : rep.summary) {
    nlohmann::json s = {{"method", m.method}, {"runs", m.aucs.size()}, {"failures", m.failures}};
    s["mean_auc"] = m.aucs.empty() ? nlohmann::json(nullptr) : nlohmann::json(m.mean);
    s["std_auc"] = m.aucs.empty() ? nlohmann::json(nullptr) : nlohmann::json(m.std);
    j["summary"].push_back(s);
  }
  if (rep.spread) j["spread"] = *rep.spread;
  return j;
}

inline std::string to_text(const ExperimentReport& rep) {
  std::ostringstream o;
  o << "experiment: " << rep.experiment << '\n';
  o << std::left << std::setw(22) << "method" << std::setw(8) << "runs" << std::setw(10) << "failed" << "AUC (mean ± std)\n";
  o << std::fixed << std::setprecision(4);
  for (const auto& m : rep.summary) {
    o << std::setw(22) << m.method << std::setw(8) << m.aucs.size() << std::setw(10) << m.failures;
    if (m.aucs.empty())
      o << "NA\n";
    else
      o << m.mean << " ± " << m.std << '\n';
  }
  if (rep.spread) o << "spread (max - min mean AUC): " << *rep.spread << '\n';
  for (const auto& r : rep.records)
    if (!r.ok) o << "failed: " << summary_key(r) << " repeat " << r.repeat << ": " << r.error << '\n';
  o << "mask violations: " << rep.mask_violations() << '\n';
  o << std::setprecision(1) << "runtime: " << rep.seconds << " s\n";
  return o.str();
}

// ---------------------------------------------------------------------------
// Experiment drivers.

/// Produces the (train, valid, test) split for a repeat seed.
using SplitSource = std::function<Splits(std::uint64_t seed)>;

/// Fixed dataset, re-split per repeat.
inline SplitSource resplit(const Dataset& ds, std::array<double, 3> ratios = {3.0, 1.0, 1.0}) {
  return [ds, ratios](std::uint64_t seed) { return split(ds, SplitSpec{ratios, derive_seed(seed, kStreamSplit)}); };
}

/// Fresh synthetic data per repeat, then a seeded split.
inline SplitSource synthetic_source(SynKind kind, std::size_t n, std::array<double, 3> ratios = {3.0, 1.0, 1.0}) {
  return [kind, n, ratios](std::uint64_t seed) {
    return split(gen_syn(kind, n, derive_seed(seed, kStreamData)), SplitSpec{ratios, derive_seed(seed, kStreamSplit)});
  };
}

using ProgressFn = std::function<void(const RunRecord&)>;

/// R seeded runs per method; repeat r uses seed root + r for every method.
inline ExperimentReport compare(const SplitSource& source, const std::vector<Method>& methods, std::size_t repeats,
                                const PipelineConfig& cfg, std::uint64_t root_seed, const ProgressFn& progress = {}) {
  if (repeats < 1) throw ConfigError("repeats must be >= 1");
  if (methods.empty()) throw ConfigError("no methods to compare");
  check_pipeline_config(cfg);
  const auto start = std::chrono::steady_clock::now();
  ExperimentReport rep;
  rep.experiment = "compare";
  for (std::size_t r = 0; r < repeats; ++r) {
    const std::uint64_t seed = root_seed + r;
    const Splits s = source(seed);
    for (Method m : methods) {
      auto run = run_method(m, s, cfg, seed);
      run.record.repeat = r;
      if (progress) progress(run.record);
      rep.records.push_back(std::move(run.record));
    }
  }
  summarize(rep);
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

/// Train on the biased source; the unbiased source is halved into valid/test.
inline SplitSource shifted_source(const Dataset& biased, const Dataset& unbiased) {
  if (biased.schema.size() != unbiased.schema.size() || biased.dim() != unbiased.dim())
    throw DataError("biased and unbiased sources have different schemas");
  for (std::size_t f = 0; f < biased.schema.size(); ++f)
    if (biased.schema[f].name != unbiased.schema[f].name || biased.schema[f].kind != unbiased.schema[f].kind ||
        biased.schema[f].categories != unbiased.schema[f].categories)
      throw DataError("biased and unbiased sources have different schemas (field " + biased.schema[f].name + ")");
  if (unbiased.rows() < 2) throw DataError("unbiased source needs at least two rows");
  return [biased, unbiased](std::uint64_t seed) {
    std::vector<std::size_t> order(unbiased.rows());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, kStreamSplit));
    rng.shuffle(order);
    const std::size_t half = order.size() / 2;
    Splits s{biased, subset(unbiased, {order.begin(), order.begin() + static_cast<std::ptrdiff_t>(half)}),
             subset(unbiased, {order.begin() + static_cast<std::ptrdiff_t>(half), order.end()})};
    refit_scaling(s.train, {&s.valid, &s.test});
    return s;
  };
}

/// Per repeat: Syn3-style rows rejection-sampled on the label for training,
/// plain rows for validation and test.
struct ShiftSpec {
  SynKind kind = SynKind::syn3;
  std::size_t train_rows = 6000;
  std::size_t unbiased_rows = 4000;
  double accept_pos = 0.9;
  double accept_neg = 0.5;
};

inline SplitSource synthetic_shift_source(const ShiftSpec& spec) {
  return [spec](std::uint64_t seed) {
    const Dataset biased =
        gen_syn_shifted(spec.kind, spec.train_rows, derive_seed(seed, kStreamShift), spec.accept_pos, spec.accept_neg);
    const Dataset unbiased = gen_syn(spec.kind, spec.unbiased_rows, derive_seed(seed, kStreamData));
    return shifted_source(biased, unbiased)(seed);
  };
}

inline ExperimentReport shift_experiment(const SplitSource& shifted, const std::vector<Method>& methods,
                                         std::size_t repeats, const PipelineConfig& cfg, std::uint64_t root_seed,
                                         const ProgressFn& progress = {}) {
  auto rep = compare(shifted, methods, repeats, cfg, root_seed, progress);
  rep.experiment = "shift";
  return rep;
}

/// DIWIFT with the pretrained model taken from each listed epoch of a single
/// pretraining run per repeat.
inline ExperimentReport sensitivity_experiment(const SplitSource& source, const std::vector<std::size_t>& checkpoints,
                                               std::size_t repeats, const PipelineConfig& cfg,
                                               std::uint64_t root_seed, const ProgressFn& progress = {}) {
  if (repeats < 1) throw ConfigError("repeats must be >= 1");
  if (checkpoints.empty()) throw ConfigError("no checkpoints listed");
  check_pipeline_config(cfg);
  for (auto e : checkpoints)
    if (e < 1 || e > cfg.pretrain.epochs)
      throw ConfigError("checkpoint " + std::to_string(e) + " outside pretraining epochs 1.." +
                        std::to_string(cfg.pretrain.epochs));
  const auto start = std::chrono::steady_clock::now();
  ExperimentReport rep;
  rep.experiment = "sensitivity";
  for (std::size_t r = 0; r < repeats; ++r) {
    const std::uint64_t seed = root_seed + r;
    const Splits s = source(seed);
    TrainConfig pc = seeded(cfg, seed).pretrain;
    pc.keep_checkpoints = true;
    pc.select_best = false;
    std::optional<TrainResult> pre;
    std::string pre_error;
    try {
      pre = train(s.train, &s.valid, pc);
    } catch (const std::exception& e) {
      pre_error = std::string("pretrain: ") + e.what();
    }
    for (auto e : checkpoints) {
      RunRecord rec;
      if (pre) {
        rec = run_method(Method::diwift, s, cfg, seed, &pre->checkpoints[e - 1]).record;
      } else {
        rec.method = to_string(Method::diwift);
        rec.seed = seed;
        rec.error = pre_error;
      }
      rec.repeat = r;
      rec.checkpoint = e;
      if (progress) progress(rec);
      rep.records.push_back(std::move(rec));
    }
  }
  summarize(rep);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& m : rep.summary) {
    if (m.aucs.empty()) continue;
    lo = std::min(lo, m.mean);
    hi = std::max(hi, m.mean);
  }
  if (hi >= lo) rep.spread = hi - lo;
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

// ---------------------------------------------------------------------------
// Mask report.

struct MaskRow {
  std::size_t row = 0;
  std::vector<std::uint8_t> mask;
  std::optional<std::vector<std::uint8_t>> relevance;
  std::optional<double> precision;  // absent when the mask is empty
  std::optional<double> recall;     // absent without relevance or when nothing is relevant
};

struct MaskReport {
  std::vector<std::string> features;
  std::vector<MaskRow> rows;
  std::optional<double> mean_precision;  // over rows where it is defined
  std::optional<double> mean_recall;
  // Pooled over all rows: selected-and-relevant / selected, / relevant.
  std::optional<double> pooled_precision;
  std::optional<double> pooled_recall;
};

/// Precision and recall of one mask against a relevance set.
inline std::pair<std::optional<double>, std::optional<double>> mask_precision_recall(
    const std::vector<std::uint8_t>& mask, const std::vector<std::uint8_t>& relevance) {
  if (mask.size() != relevance.size()) throw DataError("mask and relevance lengths differ");
  double selected = 0, relevant = 0, hit = 0;
  for (std::size_t k = 0; k < mask.size(); ++k) {
    selected += mask[k] != 0;
    relevant += relevance[k] != 0;
    hit += (mask[k] != 0) && (relevance[k] != 0);
  }
  std::optional<double> p, r;
  if (selected > 0) p = hit / selected;
  if (relevant > 0) r = hit / relevant;
  return {p, r};
}

inline MaskReport mask_report(const Predictor& pred, const Dataset& ds, const std::vector<std::size_t>& rows) {
  MaskReport rep;
  for (std::size_t k = 0; k < ds.dim(); ++k) rep.features.push_back(ds.feature_name(k));
  double psum = 0, rsum = 0, hits = 0, selected = 0, relevant = 0;
  std::size_t pn = 0, rn = 0;
  for (auto i : rows) {
    if (i >= ds.rows()) throw DataError("mask report row " + std::to_string(i) + " out of range");
    const auto ii = static_cast<Eigen::Index>(i);
    const RowMatrix x = ds.x.row(ii);
    const MaskMatrix s = pred.masks(x);
    MaskRow mr;
    mr.row = i;
    mr.mask.assign(s.data(), s.data() + s.size());
    if (ds.relevance) {
      mr.relevance.emplace(ds.dim());
      for (std::size_t k = 0; k < ds.dim(); ++k) (*mr.relevance)[k] = (*ds.relevance)(ii, static_cast<Eigen::Index>(k));
      std::tie(mr.precision, mr.recall) = mask_precision_recall(mr.mask, *mr.relevance);
      for (std::size_t k = 0; k < ds.dim(); ++k) {
        selected += mr.mask[k] != 0;
        relevant += (*mr.relevance)[k] != 0;
        hits += mr.mask[k] != 0 && (*mr.relevance)[k] != 0;
      }
      if (mr.precision) {
        psum += *mr.precision;
        ++pn;
      }
      if (mr.recall) {
        rsum += *mr.recall;
        ++rn;
      }
    }
    rep.rows.push_back(std::move(mr));
  }
  if (pn) rep.mean_precision = psum / static_cast<double>(pn);
  if (rn) rep.mean_recall = rsum / static_cast<double>(rn);
  if (selected > 0) rep.pooled_precision = hits / selected;
  if (relevant > 0) rep.pooled_recall = hits / relevant;
  return rep;
}

/// CSV: row, then a 0/1 column per feature, then relevance bits and metrics
/// when relevance is known. Undefined metrics print as NA.
inline std::string mask_report_csv(const MaskReport& rep) {
  std::ostringstream o;
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string("NA"); };
  const bool rel = !rep.rows.empty() && rep.rows.front().relevance.has_value();
  o << "row";
  for (const auto& f : rep.features) o << ',' << f;
  if (rel) {
    for (const auto& f : rep.features) o << ",rel_" << f;
    o << ",precision,recall";
  }
  o << '\n';
  for (const auto& r : rep.rows) {
    o << r.row;
    for (auto b : r.mask) o << ',' << int(b);
    if (r.relevance) {
      for (auto b : *r.relevance) o << ',' << int(b);
      o << ',' << opt(r.precision) << ',' << opt(r.recall);
    }
    o << '\n';
  }
  return o.str();
}

inline std::string mask_report_text(const MaskReport& rep) {
  std::ostringstream o;
  auto opt = [](const std::optional<double>& v) {
    if (!v) return std::string("NA");
    std::ostringstream s;
    s << std::fixed << std::setprecision(3) << *v;
    return s.str();
  };
  for (const auto& r : rep.rows) {
    o << "row " << r.row << ": selected {";
    bool first = true;
    for (std::size_t k = 0; k < r.mask.size(); ++k)
      if (r.mask[k]) {
        o << (first ? "" : ", ") << rep.features[k];
        first = false;
      }
    o << '}';
    if (r.relevance) {
      o << " relevant {";
      first = true;
      for (std::size_t k = 0; k < r.relevance->size(); ++k)
        if ((*r.relevance)[k]) {
          o << (first ? "" : ", ") << rep.features[k];
          first = false;
        }
      o << "} precision " << opt(r.precision) << " recall " << opt(r.recall);
    }
    o << '\n';
  }
  if (rep.mean_precision || rep.mean_recall)
    o << "mean precision " << opt(rep.mean_precision) << ", mean recall " << opt(rep.mean_recall)
      << "; pooled precision " << opt(rep.pooled_precision) << ", pooled recall " << opt(rep.pooled_recall) << '\n';
  return o.str();
}

}  // namespace diwift
