#pragma once

#include "diwift/basenet.hpp"
#include "diwift/common.hpp"
#include "diwift/dataset.hpp"
#include "diwift/influence.hpp"
#include "diwift/selector.hpp"

#include <cassert>
#include <cstring>
#include <optional>
#include <string>
#include <vector>

namespace diwift {

/// How training rows get their masks before retraining.
enum class SelectionMode {
  influence,  // selector trained on the influence-weighted selection loss
  identity,   // every nonzero feature kept
  oracle,     // closed-form 1(phi x < 0) on training rows only
};

inline std::string to_string(SelectionMode m) {
  switch (m) {
    case SelectionMode::influence: return "influence";
    case SelectionMode::identity: return "identity";
    case SelectionMode::oracle: return "oracle";
  }
  return "?";
}

struct PipelineConfig {
  TrainConfig pretrain;
  TrainConfig retrain;
  SelectorConfig selector;
  LissaConfig lissa;
  double threshold = 0.5;
  std::optional<std::size_t> checkpoint_epoch;  // pretrained parameters from this epoch
  bool soft_retrain = false;                    // retrain on P * X instead of S * X
  SelectionMode mode = SelectionMode::influence;
};

inline void check_pipeline_config(const PipelineConfig& cfg) {
  if (!(cfg.threshold > 0.0 && cfg.threshold < 1.0)) throw ConfigError("mask threshold must lie in (0,1)");
  check_train_config(cfg.pretrain);
  check_train_config(cfg.retrain);
  check_selector_config(cfg.selector);
  check_lissa_config(cfg.lissa);
}

/// S_k = 1(p_k >= threshold).
inline std::vector<std::uint8_t> hard_mask(const Vector& p, double threshold) {
  std::vector<std::uint8_t> s(static_cast<std::size_t>(p.size()));
  for (Eigen::Index k = 0; k < p.size(); ++k) s[static_cast<std::size_t>(k)] = p[k] >= threshold ? 1 : 0;
  return s;
}

inline MaskMatrix hard_mask_rows(const RowMatrix& p, double threshold) {
  return (p.array() >= threshold).cast<std::uint8_t>().matrix();
}

inline MaskMatrix nonzero_mask(const RowMatrix& x) { return (x.array() > 0.0).cast<std::uint8_t>().matrix(); }

/// Number of entries with S = 1 on a zero-valued feature.
inline std::size_t zero_feature_violations(const MaskMatrix& s, const RowMatrix& x) {
  std::size_t v = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index k = 0; k < x.cols(); ++k)
      if (s(i, k) && x(i, k) == 0.0) ++v;
  return v;
}

/// FNV-1a over the bytes of a matrix; fingerprints the exact retraining input.
inline std::uint64_t fingerprint(const RowMatrix& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  const std::int64_t shape[2] = {m.rows(), m.cols()};
  mix(shape, sizeof shape);
  mix(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
  return h;
}

/// Final model plus the selector used to mask its inputs.
struct Predictor {
  BaseNet model;
  std::optional<Selector> selector;  // absent: keep every nonzero feature
  double threshold = 0.5;
  double tau = 1e-3;

  MaskMatrix masks(const RowMatrix& x) const {
    MaskMatrix s = selector ? hard_mask_rows(select_prob_rows(*selector, x, tau), threshold) : nonzero_mask(x);
    assert(zero_feature_violations(s, x) == 0);
    return s;
  }

  Vector scores(const RowMatrix& x) const { return diwift::predict(model, x.cwiseProduct(masks(x).cast<double>())); }
};

/// score = forward(final, hard_mask(select_prob(x)) * x).
inline double predict(const Predictor& pred, std::span<const double> x) {
  if (x.size() != pred.model.input_dim()) throw DataError("predict: dimension mismatch");
  RowMatrix row = Eigen::Map<const RowMatrix>(x.data(), 1, static_cast<Eigen::Index>(x.size()));
  return pred.scores(row)[0];
}

struct FieldMaskStat {
  std::string field;
  double selected_fraction = 0.0;  // mean over rows of selected columns of the field
};

inline std::vector<FieldMaskStat> mask_statistics(const MaskMatrix& s, const Dataset& ds) {
  std::vector<FieldMaskStat> out(ds.schema.size());
  for (std::size_t f = 0; f < ds.schema.size(); ++f) out[f].field = ds.schema[f].name;
  if (s.rows() == 0) return out;
  for (std::size_t k = 0; k < ds.featmap.size(); ++k)
    out[ds.featmap[k].field].selected_fraction +=
        s.col(static_cast<Eigen::Index>(k)).cast<double>().sum() / static_cast<double>(s.rows());
  return out;
}

struct PipelineOutput {
  BaseNet pretrained;
  std::size_t pretrained_epoch = 0;
  std::optional<Selector> selector;
  Predictor predictor;
  std::vector<EpochStat> pretrain_history;
  std::vector<EpochStat> retrain_history;
  std::vector<SelectorEpoch> selector_trace;
  MaskMatrix train_mask;
  MaskMatrix valid_mask;
  RowMatrix oracle_phi;  // oracle mode: the influence the masks were derived from
  std::vector<FieldMaskStat> mask_stats;
  std::uint64_t retrain_fingerprint = 0;
  double pretrain_valid_loss = 0.0;
  double final_valid_loss = 0.0;
};

/// InfluenceProvider recomputing phi on the current selector's reweighting.
inline InfluenceProvider influence_provider(const BaseNet& pretrained, const Dataset& train, const Dataset& valid,
                                            const LissaConfig& lissa) {
  return [&pretrained, &train, &valid, lissa](const Selector& sel, double tau, std::size_t epoch,
                                              std::size_t* steps) {
    const RowMatrix p_train = select_prob_rows(sel, train.x, tau);
    const RowMatrix p_valid = select_prob_rows(sel, valid.x, tau);
    LissaConfig cfg = lissa;
    cfg.seed = derive_seed(lissa.seed, epoch);
    auto table = feature_influence(pretrained, train, valid, &p_train, &p_valid, cfg);
    if (steps) {
      *steps = 0;
      for (auto s : table.stats.steps) *steps += s;
    }
    return table.phi;
  };
}

/// Pretrain, learn masks, retrain on masked rows. `pretrained` overrides the
/// pretraining stage.
inline PipelineOutput run_diwift(const Dataset& train, const Dataset& valid, const PipelineConfig& cfg,
                                 const BaseNet* pretrained = nullptr) {
  check_pipeline_config(cfg);
  auto staged = [](const char* stage, auto&& fn) {
    try {
      return fn();
    } catch (const DivergenceError& e) {
      throw DivergenceError(std::string(stage) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(std::string(stage) + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(stage) + ": " + e.what());
    }
  };

  PipelineOutput out;
  staged("pretrain", [&] {
    if (pretrained) {
      out.pretrained = *pretrained;
      return 0;
    }
    TrainConfig pc = cfg.pretrain;
    if (cfg.checkpoint_epoch) {
      pc.keep_checkpoints = true;
      pc.select_best = false;
    }
    auto res = diwift::train(train, &valid, pc);
    out.pretrain_history = res.history;
    if (cfg.checkpoint_epoch) {
      const auto e = *cfg.checkpoint_epoch;
      if (e < 1 || e > res.checkpoints.size())
        throw ConfigError("checkpoint epoch " + std::to_string(e) + " was not retained");
      out.pretrained = res.checkpoints[e - 1];
      out.pretrained_epoch = e;
    } else {
      out.pretrained = std::move(res.model);
      out.pretrained_epoch = res.chosen_epoch;
    }
    return 0;
  });
  out.pretrain_valid_loss = mean_loss(out.pretrained, valid.x, valid.y);

  const double tau_min = cfg.selector.schedule.tau_min;
  RowMatrix soft_train;
  staged("select", [&] {
    switch (cfg.mode) {
      case SelectionMode::influence: {
        auto res = train_selector_with(train.x, influence_provider(out.pretrained, train, valid, cfg.lissa), cfg.selector);
        out.selector = std::move(res.model);
        out.selector_trace = std::move(res.trace);
        const RowMatrix p = select_prob_rows(*out.selector, train.x, tau_min);
        out.train_mask = hard_mask_rows(p, cfg.threshold);
        if (cfg.soft_retrain) soft_train = p;
        break;
      }
      case SelectionMode::identity:
        out.train_mask = nonzero_mask(train.x);
        break;
      case SelectionMode::oracle: {
        auto table = feature_influence(out.pretrained, train, valid, nullptr, nullptr, cfg.lissa);
        out.train_mask = oracle_mask_rows(table.phi, train.x);
        out.oracle_phi = std::move(table.phi);
        break;
      }
    }
    return 0;
  });

  out.predictor.selector = out.selector;
  out.predictor.threshold = cfg.threshold;
  out.predictor.tau = tau_min;
  out.valid_mask = out.predictor.masks(valid.x);
  if (zero_feature_violations(out.train_mask, train.x) != 0 || zero_feature_violations(out.valid_mask, valid.x) != 0)
    throw DataError("mask selects a zero-valued feature");
  out.mask_stats = mask_statistics(out.train_mask, train);

  staged("retrain", [&] {
    const Dataset masked_train = soft_train.size() ? apply_reweight(train, soft_train) : apply_mask(train, out.train_mask);
    const Dataset masked_valid = apply_mask(valid, out.valid_mask);
    out.retrain_fingerprint = fingerprint(masked_train.x);
    auto res = diwift::train(masked_train, &masked_valid, cfg.retrain);
    out.retrain_history = res.history;
    out.predictor.model = std::move(res.model);
    out.final_valid_loss = mean_loss(out.predictor.model, masked_valid.x, masked_valid.y);
    return 0;
  });
  return out;
}

}  // namespace diwift
