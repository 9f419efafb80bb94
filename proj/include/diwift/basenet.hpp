#pragma once

#include "diwift/common.hpp"
#include "diwift/dataset.hpp"
#include "diwift/rng.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace diwift {

/// Fully-connected binary classifier: rectifier hidden layers and a single
/// sigmoid output logit. All coefficients live in one flat vector; layer l
/// stores its weight matrix (out x in, row-major) followed by its bias.
class BaseNet {
 public:
  BaseNet() = default;

  explicit BaseNet(std::vector<std::size_t> widths) : widths_(std::move(widths)) {
    if (widths_.size() < 2 || widths_.back() != 1) throw ConfigError("base network must end in one output unit");
    for (auto w : widths_)
      if (w == 0) throw ConfigError("base network layer width must be positive");
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
      offsets_.push_back(off);
      off += widths_[l + 1] * widths_[l] + widths_[l + 1];
    }
    theta_ = Vector::Zero(static_cast<Eigen::Index>(off));
  }

  /// Input dim d, `hidden_layers` hidden layers of width `hidden`, seeded
  /// U(-sqrt(3/fan_in), sqrt(3/fan_in)) weights and zero biases.
  static BaseNet init(std::size_t d, std::size_t hidden, std::size_t hidden_layers, std::uint64_t seed) {
    if (d < 1) throw ConfigError("input dimension must be >= 1");
    std::vector<std::size_t> widths{d};
    for (std::size_t h = 0; h < hidden_layers; ++h) widths.push_back(hidden);
    widths.push_back(1);
    BaseNet net(std::move(widths));
    Rng rng(seed);
    for (std::size_t l = 0; l < net.layers(); ++l) {
      const double bound = std::sqrt(3.0 / static_cast<double>(net.widths_[l]));
      auto w = net.weight(l);
      for (Eigen::Index r = 0; r < w.rows(); ++r)
        for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = rng.uniform(-bound, bound);
    }
    return net;
  }

  std::size_t layers() const { return widths_.size() - 1; }
  std::size_t input_dim() const { return widths_.front(); }
  std::size_t param_count() const { return static_cast<std::size_t>(theta_.size()); }
  const std::vector<std::size_t>& widths() const { return widths_; }

  Vector& flat() { return theta_; }
  const Vector& flat() const { return theta_; }

  Eigen::Map<RowMatrix> weight(std::size_t l) {
    return {theta_.data() + offsets_[l], rows(l), cols(l)};
  }
  Eigen::Map<const RowMatrix> weight(std::size_t l) const {
    return {theta_.data() + offsets_[l], rows(l), cols(l)};
  }
  Eigen::Map<Vector> bias(std::size_t l) { return {theta_.data() + offsets_[l] + rows(l) * cols(l), rows(l)}; }
  Eigen::Map<const Vector> bias(std::size_t l) const {
    return {theta_.data() + offsets_[l] + rows(l) * cols(l), rows(l)};
  }

  /// Views of a parameter-shaped vector (gradients, directions) using this
  /// network's layout.
  Eigen::Map<const RowMatrix> weight_of(const Vector& v, std::size_t l) const {
    return {v.data() + offsets_[l], rows(l), cols(l)};
  }
  Eigen::Map<RowMatrix> weight_of(Vector& v, std::size_t l) const { return {v.data() + offsets_[l], rows(l), cols(l)}; }
  Eigen::Map<const Vector> bias_of(const Vector& v, std::size_t l) const {
    return {v.data() + offsets_[l] + rows(l) * cols(l), rows(l)};
  }
  Eigen::Map<Vector> bias_of(Vector& v, std::size_t l) const {
    return {v.data() + offsets_[l] + rows(l) * cols(l), rows(l)};
  }

 private:
  Eigen::Index rows(std::size_t l) const { return static_cast<Eigen::Index>(widths_[l + 1]); }
  Eigen::Index cols(std::size_t l) const { return static_cast<Eigen::Index>(widths_[l]); }

  std::vector<std::size_t> widths_;
  std::vector<std::size_t> offsets_;
  Vector theta_;
};

inline constexpr double kLossEps = 1e-12;

namespace detail {

inline RowMatrix relu_mask(const RowMatrix& z) { return (z.array() > 0.0).cast<double>().matrix(); }

/// Cached forward pass over a batch (one instance per row).
struct ForwardCache {
  std::vector<RowMatrix> z;  // pre-activations, one per layer
  std::vector<RowMatrix> a;  // a[0] = input, a[l+1] = activation of layer l
  Vector prob;
};

inline ForwardCache forward_batch(const BaseNet& net, const RowMatrix& x) {
  if (static_cast<std::size_t>(x.cols()) != net.input_dim()) throw DataError("input dimension mismatch");
  ForwardCache c;
  c.a.push_back(x);
  for (std::size_t l = 0; l < net.layers(); ++l) {
    RowMatrix z = c.a.back() * net.weight(l).transpose();
    z.rowwise() += net.bias(l).transpose();
    c.z.push_back(z);
    if (l + 1 < net.layers())
      c.a.push_back(z.cwiseMax(0.0));
  }
  const auto& logit = c.z.back();
  c.prob.resize(logit.rows());
  for (Eigen::Index i = 0; i < logit.rows(); ++i) c.prob[i] = sigmoid(logit(i, 0));
  return c;
}

/// Backward signals delta[l] = d loss_i / d z[l] for every row.
inline std::vector<RowMatrix> backward_batch(const BaseNet& net, const ForwardCache& c, const Vector& y) {
  std::vector<RowMatrix> delta(net.layers());
  delta.back() = (c.prob - y);
  for (std::size_t l = net.layers() - 1; l > 0; --l)
    delta[l - 1] = (delta[l] * net.weight(l)).cwiseProduct(relu_mask(c.z[l - 1]));
  return delta;
}

/// Parameter gradient summed over rows.
inline Vector gather_grad(const BaseNet& net, const ForwardCache& c, const std::vector<RowMatrix>& delta) {
  Vector g(static_cast<Eigen::Index>(net.param_count()));
  for (std::size_t l = 0; l < net.layers(); ++l) {
    net.weight_of(g, l) = delta[l].transpose() * c.a[l];
    net.bias_of(g, l) = delta[l].colwise().sum().transpose();
  }
  return g;
}

/// Directional derivative (R-operator) of the forward and backward passes
/// along parameter direction v. Rectifier second derivatives are zero.
struct DirectionalPass {
  Vector hv_sum;         // sum over rows of H_i v
  RowMatrix mixed_rows;  // row i: grad_x (v . grad_theta loss_i)
};

inline DirectionalPass directional_batch(const BaseNet& net, const ForwardCache& c, const std::vector<RowMatrix>& delta,
                                         const Vector& v) {
  const std::size_t L = net.layers();
  const Eigen::Index b = c.a[0].rows();
  std::vector<RowMatrix> rz(L), ra(L);  // ra[l] = R(a[l])
  std::vector<RowMatrix> masks(L);
  ra[0] = RowMatrix::Zero(b, c.a[0].cols());
  for (std::size_t l = 0; l < L; ++l) {
    RowMatrix r = c.a[l] * net.weight_of(v, l).transpose();
    if (l > 0) r.noalias() += ra[l] * net.weight(l).transpose();
    r.rowwise() += net.bias_of(v, l).transpose();
    rz[l] = std::move(r);
    if (l + 1 < L) {
      masks[l] = relu_mask(c.z[l]);
      ra[l + 1] = rz[l].cwiseProduct(masks[l]);
    }
  }
  std::vector<RowMatrix> rdelta(L);
  rdelta[L - 1] = (c.prob.array() * (1.0 - c.prob.array())).matrix().asDiagonal() * rz[L - 1];

  DirectionalPass out;
  out.hv_sum = Vector(static_cast<Eigen::Index>(net.param_count()));
  for (std::size_t l = L; l-- > 0;) {
    auto w = net.weight_of(out.hv_sum, l);
    w = rdelta[l].transpose() * c.a[l];
    if (l > 0) w.noalias() += delta[l].transpose() * ra[l];
    net.bias_of(out.hv_sum, l) = rdelta[l].colwise().sum().transpose();
    RowMatrix rg = rdelta[l] * net.weight(l);
    rg.noalias() += delta[l] * net.weight_of(v, l);
    if (l > 0)
      rdelta[l - 1] = rg.cwiseProduct(masks[l - 1]);
    else
      out.mixed_rows = std::move(rg);
  }
  return out;
}

inline RowMatrix as_row(std::span<const double> x) {
  RowMatrix m(1, static_cast<Eigen::Index>(x.size()));
  for (std::size_t k = 0; k < x.size(); ++k) m(0, static_cast<Eigen::Index>(k)) = x[k];
  return m;
}

inline void check_label(double y) {
  if (y != 0.0 && y != 1.0) throw DataError("label must be 0 or 1");
}

inline void check_finite(const RowMatrix& x) {
  if (!x.allFinite()) throw DataError("non-finite input");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Single-instance operations.

inline double forward(const BaseNet& net, std::span<const double> x) {
  auto row = detail::as_row(x);
  detail::check_finite(row);
  return detail::forward_batch(net, row).prob[0];
}

/// Binary cross-entropy with the probability clamped to [eps, 1-eps].
inline double bce(double prob, double y) {
  const double p = std::clamp(prob, kLossEps, 1.0 - kLossEps);
  return -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
}

inline double loss(const BaseNet& net, std::span<const double> x, double y) {
  detail::check_label(y);
  return bce(forward(net, x), y);
}

inline Vector grad_theta(const BaseNet& net, std::span<const double> x, double y) {
  detail::check_label(y);
  auto row = detail::as_row(x);
  auto c = detail::forward_batch(net, row);
  Vector yy = Vector::Constant(1, y);
  return detail::gather_grad(net, c, detail::backward_batch(net, c, yy));
}

inline Vector grad_x(const BaseNet& net, std::span<const double> x, double y) {
  detail::check_label(y);
  auto row = detail::as_row(x);
  auto c = detail::forward_batch(net, row);
  Vector yy = Vector::Constant(1, y);
  auto delta = detail::backward_batch(net, c, yy);
  return (delta[0] * net.weight(0)).transpose();
}

/// grad_x (v . grad_theta loss) for one instance.
inline Vector mixed_vjp(const BaseNet& net, std::span<const double> x, double y, const Vector& v) {
  detail::check_label(y);
  auto row = detail::as_row(x);
  auto c = detail::forward_batch(net, row);
  Vector yy = Vector::Constant(1, y);
  auto delta = detail::backward_batch(net, c, yy);
  return detail::directional_batch(net, c, delta, v).mixed_rows.row(0).transpose();
}

// ---------------------------------------------------------------------------
// Batch operations (one instance per row of x).

inline Vector predict(const BaseNet& net, const RowMatrix& x) { return detail::forward_batch(net, x).prob; }

inline double mean_loss(const BaseNet& net, const RowMatrix& x, const Vector& y) {
  if (x.rows() == 0) return 0.0;
  const Vector p = predict(net, x);
  double s = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) s += bce(p[i], y[i]);
  return s / static_cast<double>(p.size());
}

inline Vector grad_theta_sum(const BaseNet& net, const RowMatrix& x, const Vector& y) {
  auto c = detail::forward_batch(net, x);
  return detail::gather_grad(net, c, detail::backward_batch(net, c, y));
}

/// Per-row input gradients.
inline RowMatrix grad_x_rows(const BaseNet& net, const RowMatrix& x, const Vector& y) {
  auto c = detail::forward_batch(net, x);
  auto delta = detail::backward_batch(net, c, y);
  return delta[0] * net.weight(0);
}

/// Mean per-instance loss Hessian over the batch, applied to v (matrix-free).
inline Vector hvp(const BaseNet& net, const RowMatrix& x, const Vector& y, const Vector& v) {
  if (x.rows() == 0) throw DataError("hvp needs a non-empty batch");
  auto c = detail::forward_batch(net, x);
  auto delta = detail::backward_batch(net, c, y);
  return detail::directional_batch(net, c, delta, v).hv_sum / static_cast<double>(x.rows());
}

/// Row i: grad_x (v . grad_theta loss_i).
inline RowMatrix mixed_vjp_rows(const BaseNet& net, const RowMatrix& x, const Vector& y, const Vector& v) {
  auto c = detail::forward_batch(net, x);
  auto delta = detail::backward_batch(net, c, y);
  return detail::directional_batch(net, c, delta, v).mixed_rows;
}

// ---------------------------------------------------------------------------
// Training.

struct TrainConfig {
  double learning_rate = 0.05;
  double l2 = 1e-4;
  std::size_t hidden = 50;
  std::size_t hidden_layers = 2;
  std::size_t batch_size = 64;
  std::size_t epochs = 20;
  std::uint64_t seed = 0;
  bool keep_checkpoints = false;
  // Return the epoch with the lowest validation loss instead of the last one.
  bool select_best = false;
};

inline void check_train_config(const TrainConfig& cfg) {
  if (cfg.batch_size == 0 || cfg.epochs == 0) throw ConfigError("batch size and epochs must be positive");
  if (!(cfg.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (cfg.l2 < 0.0) throw ConfigError("l2 must be non-negative");
  if (cfg.learning_rate < 1e-5 || cfg.learning_rate > 1e-1)
    warn("learning rate " + std::to_string(cfg.learning_rate) + " outside [1e-5, 1e-1]");
  if (cfg.l2 < 1e-6 || cfg.l2 > 1.0) warn("l2 " + std::to_string(cfg.l2) + " outside [1e-6, 1]");
  if (cfg.hidden_layers > 0 && cfg.hidden != 50 && cfg.hidden != 100 && cfg.hidden != 150 && cfg.hidden != 200)
    warn("hidden size " + std::to_string(cfg.hidden) + " outside {50,100,150,200}");
  const auto b = cfg.batch_size;
  if (b < 64 || b > 2048 || (b & (b - 1)) != 0) warn("batch size " + std::to_string(b) + " outside {64,...,2048}");
}

struct EpochStat {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double valid_loss = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  BaseNet model;
  double initial_train_loss = 0.0;
  std::vector<EpochStat> history;
  std::vector<BaseNet> checkpoints;  // checkpoints[e-1] = parameters after epoch e
  std::size_t chosen_epoch = 0;
};

namespace detail {

inline void gather_rows(const RowMatrix& x, const Vector& y, std::span<const std::size_t> idx, RowMatrix& bx,
                        Vector& by) {
  bx.resize(static_cast<Eigen::Index>(idx.size()), x.cols());
  by.resize(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t r = 0; r < idx.size(); ++r) {
    bx.row(static_cast<Eigen::Index>(r)) = x.row(static_cast<Eigen::Index>(idx[r]));
    by[static_cast<Eigen::Index>(r)] = y[static_cast<Eigen::Index>(idx[r])];
  }
}

}  // namespace detail

/// Mini-batch SGD on mean cross-entropy + (l2/2)||theta||^2, starting from
/// `start`.
inline TrainResult train_from(BaseNet start, const Dataset& train, const Dataset* valid, const TrainConfig& cfg) {
  check_train_config(cfg);
  if (train.rows() == 0) throw DataError("training set is empty");
  TrainResult res;
  BaseNet& net = start;
  res.initial_train_loss = mean_loss(net, train.x, train.y);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  RowMatrix bx;
  Vector by;
  double best = std::numeric_limits<double>::infinity();
  BaseNet best_net = net;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t from = 0; from < order.size(); from += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - from);
      detail::gather_rows(train.x, train.y, std::span(order).subspan(from, count), bx, by);
      Vector g = grad_theta_sum(net, bx, by) / static_cast<double>(count);
      g.noalias() += cfg.l2 * net.flat();
      net.flat().noalias() -= cfg.learning_rate * g;
    }
    EpochStat st;
    st.epoch = epoch;
    st.train_loss = mean_loss(net, train.x, train.y);
    if (!std::isfinite(st.train_loss) || !net.flat().allFinite())
      throw DivergenceError("training diverged at epoch " + std::to_string(epoch) +
                            " (non-finite loss); lower the learning rate");
    if (valid && valid->rows() > 0) st.valid_loss = mean_loss(net, valid->x, valid->y);
    res.history.push_back(st);
    if (cfg.keep_checkpoints) res.checkpoints.push_back(net);
    if (cfg.select_best && valid && st.valid_loss < best) {
      best = st.valid_loss;
      best_net = net;
      res.chosen_epoch = epoch;
    }
  }
  if (cfg.select_best && valid && res.chosen_epoch > 0) {
    res.model = std::move(best_net);
  } else {
    res.model = std::move(net);
    res.chosen_epoch = cfg.epochs;
  }
  return res;
}

inline TrainResult train(const Dataset& train_set, const Dataset* valid, const TrainConfig& cfg) {
  auto start = BaseNet::init(train_set.dim(), cfg.hidden, cfg.hidden_layers, derive_seed(cfg.seed, 0));
  return train_from(std::move(start), train_set, valid, cfg);
}

}  // namespace diwift
