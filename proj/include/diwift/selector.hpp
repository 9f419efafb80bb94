#pragma once

#include "diwift/common.hpp"
#include "diwift/dataset.hpp"
#include "diwift/rng.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace diwift {

struct TempSchedule {
  double tau_min = 1e-3;
  std::size_t t_max = 30;
};

/// tau = max(tau_min, 1 - (1 - tau_min) t / t_max)
inline double temperature(double t, const TempSchedule& s) {
  if (!(s.tau_min > 0.0 && s.tau_min <= 1.0)) throw ConfigError("tau_min must lie in (0, 1]");
  if (s.t_max == 0) throw ConfigError("t_max must be positive");
  if (t < 0.0) throw ConfigError("epoch must be non-negative");
  return std::max(s.tau_min, 1.0 - (1.0 - s.tau_min) * t / static_cast<double>(s.t_max));
}

struct SelectorConfig {
  std::size_t embed_dim = 16;
  std::size_t heads = 2;
  std::size_t gate_hidden = 64;
  // Initial value of the gate output bias; positive values start every
  // feature near selected.
  double gate_bias_init = 0.0;
  TempSchedule schedule;
  double learning_rate = 1e-2;  // Adam step size
  std::size_t batch_size = 256;
  // Stop early once the epoch loss changes by less than this (relative) for
  // `patience` consecutive epochs; 0 disables.
  double plateau_tolerance = 0.0;
  std::size_t patience = 3;
  std::uint64_t seed = 0;
};

inline void check_selector_config(const SelectorConfig& cfg) {
  if (cfg.heads < 1) throw ConfigError("selector needs at least one head");
  if (cfg.embed_dim < 1 || cfg.embed_dim % cfg.heads != 0)
    throw ConfigError("selector embedding dimension must be a positive multiple of the head count");
  if (cfg.gate_hidden < 1) throw ConfigError("selector gate width must be positive");
  if (!std::isfinite(cfg.gate_bias_init)) throw ConfigError("selector gate bias must be finite");
  if (cfg.batch_size < 1) throw ConfigError("selector batch size must be positive");
  if (!(cfg.learning_rate > 0.0)) throw ConfigError("selector learning rate must be positive");
  if (!(cfg.schedule.tau_min > 0.0 && cfg.schedule.tau_min <= 1.0)) throw ConfigError("tau_min must lie in (0, 1]");
  if (cfg.schedule.tau_min < 1e-3) warn("tau_min below 1e-3");
  if (cfg.schedule.t_max == 0) throw ConfigError("t_max must be positive");
}

// ---------------------------------------------------------------------------
// Attention primitives.

inline RowMatrix softmax_rows(const RowMatrix& s) {
  RowMatrix out(s.rows(), s.cols());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double m = s.row(i).maxCoeff();
    out.row(i) = (s.row(i).array() - m).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

/// softmax(Q K^T * scale) V, scale defaulting to 1/sqrt(cols of Q).
inline RowMatrix attention(const RowMatrix& q, const RowMatrix& k, const RowMatrix& v, double scale = 0.0) {
  if (q.cols() != k.cols() || k.rows() != v.rows()) throw DataError("attention: inner dimensions disagree");
  if (scale == 0.0) scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  return softmax_rows(q * k.transpose() * scale) * v;
}

/// Self-attention selector: value-scaled feature embeddings, multi-head
/// attention with learned per-head projections, an output projection and a
/// one-hidden-layer rectifier gate producing one score per feature.
class Selector {
 public:
  Selector() = default;

  Selector(std::size_t d, const SelectorConfig& cfg) : d_(d), cfg_(cfg) {
    check_selector_config(cfg);
    if (d < 1) throw ConfigError("selector input dimension must be >= 1");
    const std::size_t k = cfg.embed_dim, kh = k / cfg.heads, g = cfg.gate_hidden;
    add_block("embedding", d, k);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      add_block("query" + std::to_string(h), k, kh);
      add_block("key" + std::to_string(h), k, kh);
      add_block("value" + std::to_string(h), k, kh);
    }
    add_block("output", cfg.heads * kh, k);
    add_block("gate1", g, d * k);
    add_block("gate1_bias", g, 1);
    add_block("gate2", d, g);
    add_block("gate2_bias", d, 1);
    omega_ = Vector::Zero(static_cast<Eigen::Index>(offsets_.back() + size_of(blocks_.size() - 1)));
  }

  static Selector init(std::size_t d, const SelectorConfig& cfg, std::uint64_t seed) {
    Selector s(d, cfg);
    Rng rng(seed);
    for (std::size_t b = 0; b < s.blocks_.size(); ++b) {
      const auto& blk = s.blocks_[b];
      if (blk.name.ends_with("_bias")) continue;  // biases start at zero
      // Embedding rows get unit expected squared norm; matrices use fan-in.
      const double bound = std::sqrt(3.0 / static_cast<double>(blk.cols));
      auto m = s.block(b);
      for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.uniform(-bound, bound);
    }
    s.block(s.gate2_bias_block()).setConstant(cfg.gate_bias_init);
    return s;
  }

  struct Block {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
  };

  std::size_t input_dim() const { return d_; }
  const SelectorConfig& config() const { return cfg_; }
  std::size_t head_width() const { return cfg_.embed_dim / cfg_.heads; }
  const std::vector<Block>& blocks() const { return blocks_; }
  Vector& flat() { return omega_; }
  const Vector& flat() const { return omega_; }
  std::size_t param_count() const { return static_cast<std::size_t>(omega_.size()); }

  Eigen::Map<RowMatrix> block(std::size_t b) { return block_of(omega_, b); }
  Eigen::Map<const RowMatrix> block(std::size_t b) const { return block_of(omega_, b); }
  Eigen::Map<RowMatrix> block_of(Vector& v, std::size_t b) const {
    return {v.data() + offsets_[b], static_cast<Eigen::Index>(blocks_[b].rows),
            static_cast<Eigen::Index>(blocks_[b].cols)};
  }
  Eigen::Map<const RowMatrix> block_of(const Vector& v, std::size_t b) const {
    return {v.data() + offsets_[b], static_cast<Eigen::Index>(blocks_[b].rows),
            static_cast<Eigen::Index>(blocks_[b].cols)};
  }

  // Block indices.
  std::size_t embedding_block() const { return 0; }
  std::size_t query_block(std::size_t h) const { return 1 + 3 * h; }
  std::size_t key_block(std::size_t h) const { return 2 + 3 * h; }
  std::size_t value_block(std::size_t h) const { return 3 + 3 * h; }
  std::size_t output_block() const { return 1 + 3 * cfg_.heads; }
  std::size_t gate1_block() const { return output_block() + 1; }
  std::size_t gate1_bias_block() const { return output_block() + 2; }
  std::size_t gate2_block() const { return output_block() + 3; }
  std::size_t gate2_bias_block() const { return output_block() + 4; }

 private:
  std::size_t size_of(std::size_t b) const { return blocks_[b].rows * blocks_[b].cols; }
  void add_block(std::string name, std::size_t rows, std::size_t cols) {
    offsets_.push_back(blocks_.empty() ? 0 : offsets_.back() + size_of(blocks_.size() - 1));
    blocks_.push_back({std::move(name), rows, cols});
  }

  std::size_t d_ = 0;
  SelectorConfig cfg_;
  std::vector<Block> blocks_;
  std::vector<std::size_t> offsets_;
  Vector omega_;
};

/// Row i = x_i * e_i; this matrix serves as Q = K = V.
inline RowMatrix embed(std::span<const double> x, const Selector& sel) {
  if (x.size() != sel.input_dim()) throw DataError("embed: dimension mismatch");
  RowMatrix m = sel.block(sel.embedding_block());
  for (std::size_t i = 0; i < x.size(); ++i) m.row(static_cast<Eigen::Index>(i)) *= x[i];
  return m;
}

namespace detail {

inline double attention_scale(const Selector& sel) {
  return 1.0 / std::sqrt(static_cast<double>(sel.config().embed_dim));
}

struct HeadCache {
  RowMatrix q, k, v, a;  // projections and attention weights
};

struct InstanceCache {
  RowMatrix m;  // embedded input
  std::vector<HeadCache> heads;
  RowMatrix concat;  // d x (heads * head_width)
  RowMatrix e;       // d x embed_dim
};

inline InstanceCache multihead_cached(std::span<const double> x, const Selector& sel) {
  InstanceCache c;
  c.m = embed(x, sel);
  const auto d = static_cast<Eigen::Index>(sel.input_dim());
  const auto kh = static_cast<Eigen::Index>(sel.head_width());
  const double scale = attention_scale(sel);
  c.concat.resize(d, kh * static_cast<Eigen::Index>(sel.config().heads));
  for (std::size_t h = 0; h < sel.config().heads; ++h) {
    HeadCache hc;
    hc.q = c.m * sel.block(sel.query_block(h));
    hc.k = c.m * sel.block(sel.key_block(h));
    hc.v = c.m * sel.block(sel.value_block(h));
    hc.a = softmax_rows(hc.q * hc.k.transpose() * scale);
    c.concat.middleCols(static_cast<Eigen::Index>(h) * kh, kh) = hc.a * hc.v;
    c.heads.push_back(std::move(hc));
  }
  c.e = c.concat * sel.block(sel.output_block());
  return c;
}

}  // namespace detail

/// E = Concatenate(head_1..head_h) W^O with head_j = attention of the
/// projected embedding.
inline RowMatrix multihead(std::span<const double> x, const Selector& sel) {
  return detail::multihead_cached(x, sel).e;
}

/// Maps gate scores to probabilities: sigmoid(f / tau), zeroed where x = 0.
inline RowMatrix probs_from_scores(const RowMatrix& scores, const RowMatrix& x, double tau) {
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  RowMatrix p(scores.rows(), scores.cols());
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    for (Eigen::Index k = 0; k < p.cols(); ++k) p(i, k) = x(i, k) > 0.0 ? sigmoid(scores(i, k) / tau) : 0.0;
  return p;
}

/// Forward pass over many rows, caching what the backward pass needs.
struct SelectorForward {
  std::vector<detail::InstanceCache> inst;
  RowMatrix u;       // flattened attended features, one row per instance
  RowMatrix hidden;  // gate hidden pre-activations
  RowMatrix scores;  // f(x, omega)
  RowMatrix sig;     // sigmoid(f / tau) before the zero-feature mask
  RowMatrix prob;    // selection probabilities
  double tau = 1.0;
};

inline SelectorForward selector_forward(const Selector& sel, const RowMatrix& x, double tau, bool keep_cache = true) {
  if (static_cast<std::size_t>(x.cols()) != sel.input_dim()) throw DataError("selector: dimension mismatch");
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  SelectorForward f;
  f.tau = tau;
  const auto n = x.rows();
  const auto d = x.cols();
  const auto k = static_cast<Eigen::Index>(sel.config().embed_dim);
  f.u.resize(n, d * k);
  if (keep_cache) f.inst.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    auto c = detail::multihead_cached(std::span<const double>(x.row(i).data(), static_cast<std::size_t>(d)), sel);
    f.u.row(i) = Eigen::Map<const Eigen::RowVectorXd>(c.e.data(), d * k);
    if (keep_cache) f.inst.push_back(std::move(c));
  }
  f.hidden = f.u * sel.block(sel.gate1_block()).transpose();
  f.hidden.rowwise() += sel.block(sel.gate1_bias_block()).col(0).transpose();
  f.scores = f.hidden.cwiseMax(0.0) * sel.block(sel.gate2_block()).transpose();
  f.scores.rowwise() += sel.block(sel.gate2_bias_block()).col(0).transpose();
  f.sig = f.scores.unaryExpr([tau](double s) { return sigmoid(s / tau); });
  f.prob = (x.array() > 0.0).select(f.sig, 0.0);
  return f;
}

/// Gate scores f(x, omega) for one row.
inline Vector gate_scores(std::span<const double> x, const Selector& sel) {
  RowMatrix row = Eigen::Map<const RowMatrix>(x.data(), 1, static_cast<Eigen::Index>(x.size()));
  return selector_forward(sel, row, 1.0, false).scores.row(0).transpose();
}

inline Vector select_prob(std::span<const double> x, const Selector& sel, double tau) {
  RowMatrix row = Eigen::Map<const RowMatrix>(x.data(), 1, static_cast<Eigen::Index>(x.size()));
  return selector_forward(sel, row, tau, false).prob.row(0).transpose();
}

inline RowMatrix select_prob_rows(const Selector& sel, const RowMatrix& x, double tau) {
  return selector_forward(sel, x, tau, false).prob;
}

/// Gradient of a scalar objective w.r.t. omega given d objective / d prob.
inline Vector selector_backward(const Selector& sel, const RowMatrix& x, const SelectorForward& f,
                                const RowMatrix& dprob) {
  const auto n = x.rows();
  const auto d = x.cols();
  const auto k = static_cast<Eigen::Index>(sel.config().embed_dim);
  const auto kh = static_cast<Eigen::Index>(sel.head_width());
  const double scale = detail::attention_scale(sel);
  Vector grad = Vector::Zero(static_cast<Eigen::Index>(sel.param_count()));

  // d/d scores through the masked tempered sigmoid.
  RowMatrix dscores = (x.array() > 0.0).select(dprob.cwiseProduct(f.sig).cwiseProduct((1.0 - f.sig.array()).matrix()) / f.tau, 0.0);
  sel.block_of(grad, sel.gate2_block()) = dscores.transpose() * f.hidden.cwiseMax(0.0);
  sel.block_of(grad, sel.gate2_bias_block()) = dscores.colwise().sum().transpose();
  RowMatrix dhidden = (dscores * sel.block(sel.gate2_block())).cwiseProduct((f.hidden.array() > 0.0).cast<double>().matrix());
  sel.block_of(grad, sel.gate1_block()) = dhidden.transpose() * f.u;
  sel.block_of(grad, sel.gate1_bias_block()) = dhidden.colwise().sum().transpose();
  const RowMatrix du = dhidden * sel.block(sel.gate1_block());

  auto g_out = sel.block_of(grad, sel.output_block());
  auto g_emb = sel.block_of(grad, sel.embedding_block());
  const auto w_out = sel.block(sel.output_block());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& c = f.inst[static_cast<std::size_t>(i)];
    const Eigen::Map<const RowMatrix> de(du.row(i).data(), d, k);
    g_out.noalias() += c.concat.transpose() * de;
    const RowMatrix dconcat = de * w_out.transpose();
    RowMatrix dm = RowMatrix::Zero(d, k);
    for (std::size_t h = 0; h < sel.config().heads; ++h) {
      const auto& hc = c.heads[h];
      const RowMatrix dout = dconcat.middleCols(static_cast<Eigen::Index>(h) * kh, kh);
      const RowMatrix da = dout * hc.v.transpose();
      const RowMatrix dv = hc.a.transpose() * dout;
      RowMatrix ds = hc.a.cwiseProduct(da);
      const Vector rowdot = ds.rowwise().sum();
      ds -= hc.a.cwiseProduct(rowdot.replicate(1, ds.cols()));
      const RowMatrix dq = ds * hc.k * scale;
      const RowMatrix dk = ds.transpose() * hc.q * scale;
      sel.block_of(grad, sel.query_block(h)).noalias() += c.m.transpose() * dq;
      sel.block_of(grad, sel.key_block(h)).noalias() += c.m.transpose() * dk;
      sel.block_of(grad, sel.value_block(h)).noalias() += c.m.transpose() * dv;
      dm.noalias() += dq * sel.block(sel.query_block(h)).transpose();
      dm.noalias() += dk * sel.block(sel.key_block(h)).transpose();
      dm.noalias() += dv * sel.block(sel.value_block(h)).transpose();
    }
    g_emb.noalias() += x.row(i).transpose().asDiagonal() * dm;
  }
  return grad;
}

/// Batch-mean influence-weighted selection loss:
/// (1/n) sum_i sum_k phi_ik p_ik 1(x_ik > 0).
inline double selection_loss(const RowMatrix& phi, const RowMatrix& p, const RowMatrix& x) {
  if (phi.rows() != p.rows() || phi.cols() != p.cols() || x.rows() != p.rows() || x.cols() != p.cols())
    throw DataError("selection_loss: shape mismatch");
  if (p.rows() == 0) return 0.0;
  const double s = (x.array() > 0.0).select(phi.cwiseProduct(p), 0.0).sum();
  return s / static_cast<double>(p.rows());
}

// ---------------------------------------------------------------------------
// Training.

class Adam {
 public:
  explicit Adam(std::size_t n, double lr) : m_(Vector::Zero(static_cast<Eigen::Index>(n))), v_(m_), lr_(lr) {}

  void step(Vector& params, const Vector& grad) {
    ++t_;
    m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
    v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
  }

 private:
  Vector m_, v_;
  double lr_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::size_t t_ = 0;
};

struct SelectorEpoch {
  std::size_t epoch = 0;  // 0-based, matches the temperature schedule
  double tau = 1.0;
  double loss = 0.0;  // selection loss over all training rows after the epoch
  std::size_t lissa_steps = 0;
};

struct SelectorTrainResult {
  Selector model;
  std::vector<SelectorEpoch> trace;
  RowMatrix last_phi;
};

/// Supplies phi for the training rows at the start of an epoch, given the
/// current selector. Returns the phi matrix and optionally reports work done.
using InfluenceProvider = std::function<RowMatrix(const Selector&, double tau, std::size_t epoch, std::size_t* steps)>;

/// Descends the selection loss with phi held constant within each epoch.
inline SelectorTrainResult train_selector_with(const RowMatrix& x, const InfluenceProvider& provider,
                                               const SelectorConfig& cfg) {
  check_selector_config(cfg);
  if (x.rows() == 0) throw DataError("selector training set is empty");
  SelectorTrainResult res;
  res.model = Selector::init(static_cast<std::size_t>(x.cols()), cfg, derive_seed(cfg.seed, kStreamSelectorInit));
  Adam opt(res.model.param_count(), cfg.learning_rate);
  Rng rng(derive_seed(cfg.seed, kStreamSelectorTrain));
  std::vector<std::size_t> order(static_cast<std::size_t>(x.rows()));
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t flat_epochs = 0;
  RowMatrix bx, bphi;
  for (std::size_t t = 0; t < cfg.schedule.t_max; ++t) {
    const double tau = temperature(static_cast<double>(t), cfg.schedule);
    std::size_t steps = 0;
    RowMatrix phi = provider(res.model, tau, t, &steps);
    if (phi.rows() != x.rows() || phi.cols() != x.cols()) throw DataError("influence shape mismatch");
    rng.shuffle(order);
    for (std::size_t from = 0; from < order.size(); from += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - from);
      bx.resize(static_cast<Eigen::Index>(count), x.cols());
      bphi.resize(static_cast<Eigen::Index>(count), x.cols());
      for (std::size_t r = 0; r < count; ++r) {
        bx.row(static_cast<Eigen::Index>(r)) = x.row(static_cast<Eigen::Index>(order[from + r]));
        bphi.row(static_cast<Eigen::Index>(r)) = phi.row(static_cast<Eigen::Index>(order[from + r]));
      }
      auto fwd = selector_forward(res.model, bx, tau);
      const Vector g = selector_backward(res.model, bx, fwd, bphi / static_cast<double>(count));
      opt.step(res.model.flat(), g);
    }
    SelectorEpoch ep;
    ep.epoch = t;
    ep.tau = tau;
    ep.loss = selection_loss(phi, select_prob_rows(res.model, x, tau), x);
    ep.lissa_steps = steps;
    if (!std::isfinite(ep.loss) || !res.model.flat().allFinite())
      throw DivergenceError("selector training produced a non-finite loss at epoch " + std::to_string(t));
    res.trace.push_back(ep);
    res.last_phi = std::move(phi);
    if (cfg.plateau_tolerance > 0.0 && res.trace.size() >= 2) {
      const double prev = res.trace[res.trace.size() - 2].loss;
      const double rel = std::abs(ep.loss - prev) / std::max(std::abs(prev), 1e-12);
      flat_epochs = rel < cfg.plateau_tolerance ? flat_epochs + 1 : 0;
      if (flat_epochs >= cfg.patience) break;
    }
  }
  return res;
}

}  // namespace diwift
