#pragma once

#include "diwift/basenet.hpp"
#include "diwift/common.hpp"
#include "diwift/dataset.hpp"
#include "diwift/rng.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <memory>
#include <span>
#include <numeric>
#include <string>
#include <vector>

namespace diwift {

/// Stochastic inverse-Hessian-vector estimation settings.
struct LissaConfig {
  std::size_t depth = 5000;    // maximum recursion steps per repeat
  double damping = 0.01;       // lambda in (H + lambda I)^{-1}
  double scale = 0.0;          // loss pre-scaling c; 0 selects 1/(10 L) automatically
  std::size_t batch_size = 256;
  std::size_t repeats = 4;
  double tolerance = 1e-4;     // relative change over `window` steps
  std::size_t window = 50;
  std::size_t power_iterations = 20;
  std::uint64_t seed = 0;
};

inline void check_lissa_config(const LissaConfig& cfg) {
  if (cfg.depth < 1) throw ConfigError("lissa depth must be >= 1");
  if (cfg.repeats < 1) throw ConfigError("lissa repeats must be >= 1");
  if (cfg.batch_size < 1) throw ConfigError("lissa batch size must be >= 1");
  if (cfg.damping < 0.0) throw ConfigError("lissa damping must be non-negative");
  if (cfg.scale < 0.0) throw ConfigError("lissa scale must be positive (or 0 for automatic)");
  if (cfg.window < 1) throw ConfigError("lissa window must be >= 1");
}

struct LissaStats {
  double scale = 0.0;
  double top_eigenvalue = 0.0;
  std::vector<std::size_t> steps;  // per repeat
  std::vector<bool> converged;
};

/// Applies a sampled mini-batch Hessian to a vector.
using HvpFn = std::function<Vector(const Vector&)>;
/// Draws a fresh mini-batch and returns its Hessian-vector operator.
using HessianSampler = std::function<HvpFn(Rng&)>;

/// Largest-magnitude eigenvalue of one sampled (damped) Hessian by power
/// iteration.
inline double estimate_top_eigenvalue(const HessianSampler& sampler, std::size_t dim, double damping,
                                      std::size_t iterations, Rng& rng) {
  HvpFn hv = sampler(rng);
  Vector v(static_cast<Eigen::Index>(dim));
  for (auto& e : v) e = rng.normal();
  v.normalize();
  double eig = 0.0;
  for (std::size_t it = 0; it < iterations; ++it) {
    Vector w = hv(v) + damping * v;
    eig = v.dot(w);
    const double nw = w.norm();
    if (!(nw > 0.0)) return std::abs(eig);
    v = w / nw;
  }
  return std::abs(eig);
}

/// Neumann-series estimate of (H + lambda I)^{-1} mu on the c-scaled loss:
/// h_0 = mu, h_u = mu + h_{u-1} - c (H~ + lambda I) h_{u-1}, output c h.
/// Repeats are averaged.
inline Vector lissa_solve(const HessianSampler& sampler, const Vector& mu, const LissaConfig& cfg,
                          LissaStats* stats = nullptr) {
  check_lissa_config(cfg);
  if (!mu.allFinite()) throw DivergenceError("lissa: right-hand side is not finite");
  LissaStats local;
  LissaStats& st = stats ? *stats : local;
  st = LissaStats{};
  const double mu_norm = mu.norm();
  if (mu_norm == 0.0) {
    st.steps.assign(cfg.repeats, 0);
    st.converged.assign(cfg.repeats, true);
    return Vector::Zero(mu.size());
  }

  double c = cfg.scale;
  if (c == 0.0) {
    Rng rng(derive_seed(cfg.seed, 1000));
    st.top_eigenvalue = estimate_top_eigenvalue(sampler, static_cast<std::size_t>(mu.size()), cfg.damping,
                                                cfg.power_iterations, rng);
    c = st.top_eigenvalue > 0.0 ? 1.0 / (10.0 * st.top_eigenvalue) : 1.0;
  }
  st.scale = c;

  // Largest plausible norm of the answer; sustained excess means divergence.
  const double blowup = cfg.damping > 0.0 ? 10.0 * mu_norm / cfg.damping : 10.0 * mu_norm / (c * 1e-6);

  Vector total = Vector::Zero(mu.size());
  for (std::size_t rep = 0; rep < cfg.repeats; ++rep) {
    Rng rng(derive_seed(cfg.seed, rep));
    Vector h = mu;
    std::vector<Vector> ring(cfg.window);  // ring[u % window] holds h_u
    std::size_t over = 0;
    std::size_t step = 0;
    bool converged = false;
    for (step = 1; step <= cfg.depth; ++step) {
      HvpFn hv = sampler(rng);
      Vector next = mu + h - c * (hv(h) + cfg.damping * h);
      if (!next.allFinite())
        throw DivergenceError("lissa diverged (non-finite iterate); increase damping or decrease scale");
      if (c * next.norm() >= blowup) {
        if (++over >= 10)
          throw DivergenceError("lissa diverged (iterate norm kept growing); increase damping or decrease scale");
      } else {
        over = 0;
      }
      Vector& slot = ring[step % cfg.window];
      const double nn = next.norm();
      const bool settled = step > cfg.window && nn > 0.0 && (next - slot).norm() / nn < cfg.tolerance;
      slot = next;
      h = std::move(next);
      if (settled) {
        converged = true;
        break;
      }
    }
    st.steps.push_back(std::min(step, cfg.depth));
    st.converged.push_back(converged);
    total += c * h;
  }
  return total / static_cast<double>(cfg.repeats);
}

/// Sampler drawing `batch` rows uniformly (with replacement) from (x, y).
inline HessianSampler make_sampler(const BaseNet& net, const RowMatrix& x, const Vector& y, std::size_t batch) {
  if (x.rows() == 0) throw DataError("lissa needs a non-empty training set");
  return [&net, &x, &y, batch](Rng& rng) -> HvpFn {
    const std::size_t b = std::min<std::size_t>(batch, static_cast<std::size_t>(x.rows()));
    auto bx = std::make_shared<RowMatrix>(static_cast<Eigen::Index>(b), x.cols());
    auto by = std::make_shared<Vector>(static_cast<Eigen::Index>(b));
    if (b == static_cast<std::size_t>(x.rows())) {
      *bx = x;
      *by = y;
    } else {
      for (std::size_t r = 0; r < b; ++r) {
        const auto i = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(x.rows())));
        bx->row(static_cast<Eigen::Index>(r)) = x.row(i);
        (*by)[static_cast<Eigen::Index>(r)] = y[i];
      }
    }
    return [&net, bx, by](const Vector& v) { return hvp(net, *bx, *by, v); };
  };
}

namespace detail {

inline RowMatrix reweighted(const RowMatrix& x, const RowMatrix* p) {
  if (!p) return x;
  if (p->rows() != x.rows() || p->cols() != x.cols()) throw DataError("reweighting shape mismatch");
  return p->cwiseProduct(x);
}

}  // namespace detail

/// mu = sum_j grad_theta loss(p_j * x_j, y_j). A null `p` means all ones.
inline Vector validation_grad(const BaseNet& net, const Dataset& valid, const RowMatrix* p_valid = nullptr) {
  if (valid.rows() == 0) throw DataError("validation set is empty");
  return grad_theta_sum(net, detail::reweighted(valid.x, p_valid), valid.y);
}

/// Estimate of (H(P) + lambda I)^{-1} mu with H(P) the mean training-loss
/// Hessian on the reweighted training rows.
inline Vector lissa_inverse_hvp(const BaseNet& net, const Dataset& train, const RowMatrix* p_train, const Vector& mu,
                                const LissaConfig& cfg, LissaStats* stats = nullptr) {
  const RowMatrix x = detail::reweighted(train.x, p_train);
  return lissa_solve(make_sampler(net, x, train.y, cfg.batch_size), mu, cfg, stats);
}

/// phi(z_i, z_j) = -grad_theta l(z_j)^T H^{-1} grad_x grad_theta l(z_i).
inline Vector influence_pair(const BaseNet& net, const Dataset& train, std::span<const double> xi, double yi,
                             std::span<const double> xj, double yj, const LissaConfig& cfg) {
  const Vector g = grad_theta(net, xj, yj);
  const Vector h = lissa_inverse_hvp(net, train, nullptr, g, cfg);
  return -mixed_vjp(net, xi, yi, h);
}

struct InfluenceVector {
  std::size_t index = 0;
  Vector values;
};

struct InfluenceTable {
  RowMatrix phi;  // row i: phi_i over the whole validation set
  Vector h;       // inverse-HVP shared by every row
  LissaStats stats;

  InfluenceVector row(std::size_t i) const {
    return {i, phi.row(static_cast<Eigen::Index>(i)).transpose()};
  }
};

/// phi_i = -grad_x (h . grad_theta l(p_i * x_i, y_i)) for every training row.
inline RowMatrix feature_influence_from(const BaseNet& net, const Dataset& train, const RowMatrix* p_train,
                                        const Vector& h) {
  RowMatrix phi = -mixed_vjp_rows(net, detail::reweighted(train.x, p_train), train.y, h);
  if (!phi.allFinite()) throw DivergenceError("influence values are not finite");
  return phi;
}

inline InfluenceTable feature_influence(const BaseNet& net, const Dataset& train, const Dataset& valid,
                                        const RowMatrix* p_train, const RowMatrix* p_valid, const LissaConfig& cfg) {
  InfluenceTable out;
  const Vector mu = validation_grad(net, valid, p_valid);
  out.h = lissa_inverse_hvp(net, train, p_train, mu, cfg, &out.stats);
  out.phi = feature_influence_from(net, train, p_train, out.h);
  return out;
}

/// Linearized change in total validation loss when x_i moves by delta.
inline double predict_loss_change(const Vector& phi, const Vector& delta) {
  if (phi.size() != delta.size()) throw DataError("predict_loss_change: shape mismatch");
  return phi.dot(delta);
}

/// Per feature: keep (0) when phi < 0, otherwise remove (-x).
inline Vector optimal_perturbation(const Vector& phi, const Vector& x) {
  if (phi.size() != x.size()) throw DataError("optimal_perturbation: shape mismatch");
  Vector delta(x.size());
  for (Eigen::Index k = 0; k < x.size(); ++k) delta[k] = phi[k] < 0.0 ? 0.0 : -x[k];
  return delta;
}

/// S*_k = 1(phi_k x_k < 0).
inline std::vector<std::uint8_t> oracle_mask(const Vector& phi, const Vector& x) {
  if (phi.size() != x.size()) throw DataError("oracle_mask: shape mismatch");
  std::vector<std::uint8_t> s(static_cast<std::size_t>(x.size()));
  for (Eigen::Index k = 0; k < x.size(); ++k) s[static_cast<std::size_t>(k)] = phi[k] * x[k] < 0.0 ? 1 : 0;
  return s;
}

inline MaskMatrix oracle_mask_rows(const RowMatrix& phi, const RowMatrix& x) {
  if (phi.rows() != x.rows() || phi.cols() != x.cols()) throw DataError("oracle_mask: shape mismatch");
  return (phi.cwiseProduct(x).array() < 0.0).cast<std::uint8_t>().matrix();
}

inline std::string describe(const LissaConfig& cfg) {
  return "depth=" + std::to_string(cfg.depth) + " damping=" + format_double(cfg.damping) +
         " scale=" + format_double(cfg.scale) + " batch=" + std::to_string(cfg.batch_size) +
         " repeats=" + std::to_string(cfg.repeats) + " tolerance=" + format_double(cfg.tolerance) +
         " window=" + std::to_string(cfg.window) + " seed=" + std::to_string(cfg.seed);
}

/// One row per training instance, d comma-separated values, preceded by a
/// comment line naming the estimator settings and a column header.
inline void write_influence(const RowMatrix& phi, const LissaConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << "# lissa " << describe(cfg) << '\n';
  for (Eigen::Index k = 0; k < phi.cols(); ++k) out << (k ? "," : "") << "phi_" << k;
  out << '\n';
  for (Eigen::Index i = 0; i < phi.rows(); ++i) {
    for (Eigen::Index k = 0; k < phi.cols(); ++k) out << (k ? "," : "") << format_double(phi(i, k));
    out << '\n';
  }
  if (!out) throw DataError("write failed: " + path);
}

}  // namespace diwift
