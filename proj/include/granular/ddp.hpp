#pragma once

// Trajectory optimization with first-order dynamics expansion (iLQR-style),
// Levenberg-style regularization of Q_uu, and a backtracking line search.
// The value recursion uses the regularized-gain form, with the
// unregularized Q_uu inside the update terms.

#include <cmath>
#include <concepts>
#include <future>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "granular/types.hpp"

namespace granular::ddp {

template <class D>
concept DynamicsModel = requires(const D& d, const Vec& x, const Vec& u, Mat& A, Mat& B) {
  { d.f(x, u) } -> std::convertible_to<Vec>;
  d.jacobians(x, u, A, B);
  { d.state_dim() } -> std::convertible_to<int>;
  { d.control_dim() } -> std::convertible_to<int>;
};

template <class C>
concept CostModel = requires(const C& c, const Vec& x, const Vec& u, int k, Vec& gx, Vec& gu,
                             Mat& hxx, Mat& huu, Mat& hux) {
  { c.running(x, u, k) } -> std::convertible_to<double>;
  c.running_derivs(x, u, k, gx, gu, hxx, huu, hux);
  { c.terminal(x) } -> std::convertible_to<double>;
  c.terminal_derivs(x, gx, hxx);
};

/// l = 0.5 u'Ru + 0.5 (x-g)'P(x-g), terminal 0.5 (x-g)'Q_T(x-g).
struct QuadCost {
  Mat R;      // m x m, positive definite
  Mat P;      // n x n, positive semi-definite running state weight
  Mat Q_T;    // n x n, terminal weight
  Vec x_goal; // n

  double running(const Vec& x, const Vec& u, int /*k*/) const {
    const Vec dx = x - x_goal;
    return 0.5 * u.dot(R * u) + 0.5 * dx.dot(P * dx);
  }
  void running_derivs(const Vec& x, const Vec& u, int /*k*/, Vec& gx, Vec& gu, Mat& hxx,
                      Mat& huu, Mat& hux) const {
    gx = P * (x - x_goal);
    gu = R * u;
    hxx = P;
    huu = R;
    hux = Mat::Zero(R.rows(), P.rows());
  }
  double terminal(const Vec& x) const {
    const Vec dx = x - x_goal;
    return 0.5 * dx.dot(Q_T * dx);
  }
  void terminal_derivs(const Vec& x, Vec& gx, Mat& hxx) const {
    gx = Q_T * (x - x_goal);
    hxx = Q_T;
  }
};

struct DdpConfig {
  int max_iters = 100;
  double reg_init = 1e-6;
  double reg_min = 1e-12;
  double reg_max = 1e10;
  double reg_scale = 2.0;
  std::vector<double> alphas;  // default 1, 1/2, ..., 2^-10
  double tol_cost = 1e-6;      // relative cost decrease
  double tol_grad = 1e-6;      // max-abs Q_u

  DdpConfig() {
    for (int i = 0; i <= 10; ++i) alphas.push_back(std::pow(0.5, i));
  }
  void validate() const {
    if (!(reg_min <= reg_init && reg_init <= reg_max))
      throw ConfigError("require reg_min <= reg_init <= reg_max");
    if (!(reg_min > 0)) throw ConfigError("reg_min must be positive");
    for (double a : alphas)
      if (!(a > 0 && a <= 1)) throw ConfigError("line-search steps must lie in (0, 1]");
    if (max_iters < 1) throw ConfigError("max_iters must be >= 1");
  }
};

struct StepGains {
  Vec kff;  // feedforward, m
  Mat K;    // feedback, m x n
};

struct TrajectoryDerivs {
  std::vector<Mat> A, B;
  std::vector<Vec> lx, lu;
  std::vector<Mat> lxx, luu, lux;
  Vec phi_x;
  Mat phi_xx;
};

/// Per-step expansions are independent along the nominal trajectory, so
/// they are evaluated in parallel worker slices.
template <DynamicsModel D, CostModel C>
TrajectoryDerivs compute_derivatives(const std::vector<Vec>& xs, const std::vector<Vec>& us,
                                     const D& dynamics, const C& cost) {
  const size_t N = us.size();
  TrajectoryDerivs d;
  d.A.resize(N);
  d.B.resize(N);
  d.lx.resize(N);
  d.lu.resize(N);
  d.lxx.resize(N);
  d.luu.resize(N);
  d.lux.resize(N);
  auto eval_range = [&](size_t begin, size_t end) {
    for (size_t k = begin; k < end; ++k) {
      dynamics.jacobians(xs[k], us[k], d.A[k], d.B[k]);
      cost.running_derivs(xs[k], us[k], static_cast<int>(k), d.lx[k], d.lu[k], d.lxx[k],
                          d.luu[k], d.lux[k]);
    }
  };
  const size_t workers = std::min<size_t>(std::max(1u, std::thread::hardware_concurrency()), N);
  if (workers <= 1) {
    eval_range(0, N);
  } else {
    std::vector<std::future<void>> futures;
    const size_t chunk = (N + workers - 1) / workers;
    for (size_t begin = 0; begin < N; begin += chunk)
      futures.push_back(std::async(std::launch::async, eval_range, begin,
                                   std::min(begin + chunk, N)));
    for (auto& f : futures) f.get();
  }
  cost.terminal_derivs(xs[N], d.phi_x, d.phi_xx);
  return d;
}

struct BackwardResult {
  std::vector<StepGains> gains;
  double dv1 = 0.0;      // sum kff'Q_u
  double dv2 = 0.0;      // sum kff'Q_uu kff
  double grad_max = 0.0; // max-abs Q_u along the trajectory
  double min_quu_reg_eig = std::numeric_limits<double>::infinity();
  bool ok = true;
  int failed_step = -1;
};

inline BackwardResult backward_pass(const TrajectoryDerivs& d, double lambda) {
  const size_t N = d.A.size();
  BackwardResult res;
  res.gains.resize(N);
  Vec v_x = d.phi_x;
  Mat v_xx = d.phi_xx;
  const int m = static_cast<int>(d.B[0].cols());
  for (size_t k = N; k-- > 0;) {
    const Mat& A = d.A[k];
    const Mat& B = d.B[k];
    const Vec q_x = d.lx[k] + A.transpose() * v_x;
    const Vec q_u = d.lu[k] + B.transpose() * v_x;
    const Mat q_xx = d.lxx[k] + A.transpose() * v_xx * A;
    const Mat q_uu = d.luu[k] + B.transpose() * v_xx * B;
    const Mat q_ux = d.lux[k] + B.transpose() * v_xx * A;

    Mat q_uu_reg = q_uu + lambda * Mat::Identity(m, m);
    Eigen::LLT<Mat> llt(q_uu_reg);
    if (llt.info() != Eigen::Success) {
      res.ok = false;
      res.failed_step = static_cast<int>(k);
      return res;
    }
    const double min_eig =
        Eigen::SelfAdjointEigenSolver<Mat>(q_uu_reg).eigenvalues().minCoeff();
    if (min_eig <= 0) {
      res.ok = false;
      res.failed_step = static_cast<int>(k);
      return res;
    }
    res.min_quu_reg_eig = std::min(res.min_quu_reg_eig, min_eig);

    StepGains g;
    g.kff = -llt.solve(q_u);
    g.K = -llt.solve(q_ux);
    res.gains[k] = g;

    v_x = q_x + g.K.transpose() * (q_uu * g.kff) + g.K.transpose() * q_u +
          q_ux.transpose() * g.kff;
    v_xx = q_xx + g.K.transpose() * q_uu * g.K + g.K.transpose() * q_ux +
           q_ux.transpose() * g.K;
    v_xx = 0.5 * (v_xx + v_xx.transpose());

    res.dv1 += g.kff.dot(q_u);
    res.dv2 += g.kff.dot(q_uu * g.kff);
    res.grad_max = std::max(res.grad_max, q_u.cwiseAbs().maxCoeff());
  }
  return res;
}

/// Convenience form evaluated directly on a nominal trajectory.
template <DynamicsModel D, CostModel C>
BackwardResult backward_pass(const std::vector<Vec>& xs, const std::vector<Vec>& us,
                             const D& dynamics, const C& cost, double lambda) {
  return backward_pass(compute_derivatives(xs, us, dynamics, cost), lambda);
}

struct ForwardResult {
  std::vector<Vec> xs;
  std::vector<Vec> us;
  double cost = std::numeric_limits<double>::infinity();
  bool ok = false;
};

template <DynamicsModel D, CostModel C>
ForwardResult forward_pass(const std::vector<Vec>& xs_ref, const std::vector<Vec>& us_ref,
                           const std::vector<StepGains>& gains, double alpha,
                           const D& dynamics, const C& cost) {
  const size_t N = us_ref.size();
  ForwardResult out;
  out.xs.resize(N + 1);
  out.us.resize(N);
  out.xs[0] = xs_ref[0];
  double total = 0.0;
  for (size_t k = 0; k < N; ++k) {
    out.us[k] = us_ref[k] + alpha * gains[k].kff + gains[k].K * (out.xs[k] - xs_ref[k]);
    total += cost.running(out.xs[k], out.us[k], static_cast<int>(k));
    out.xs[k + 1] = dynamics.f(out.xs[k], out.us[k]);
    if (!out.xs[k + 1].allFinite() || !std::isfinite(total)) return out;  // rejected
  }
  total += cost.terminal(out.xs[N]);
  if (!std::isfinite(total)) return out;
  out.cost = total;
  out.ok = true;
  return out;
}

struct DdpSolution {
  std::vector<Vec> controls;
  std::vector<Vec> states;
  std::vector<StepGains> gains;
  std::vector<double> cost_history;  // initial cost plus one entry per accepted step
  bool converged = false;
  int iterations = 0;  // accepted iterations
  double final_cost = 0.0;
  double grad_max = 0.0;
  double min_quu_reg_eig = 0.0;
  double lambda_final = 0.0;
  std::string stop_reason;
};

template <DynamicsModel D, CostModel C>
DdpSolution solve(const Vec& x0, const std::vector<Vec>& u_init, const D& dynamics,
                  const C& cost, const DdpConfig& cfg) {
  cfg.validate();
  const size_t N = u_init.size();
  if (N < 1) throw ConfigError("need at least one control step");

  DdpSolution sol;
  sol.controls = u_init;
  sol.states.assign(N + 1, Vec());
  sol.states[0] = x0;
  double total = 0.0;
  for (size_t k = 0; k < N; ++k) {
    total += cost.running(sol.states[k], sol.controls[k], static_cast<int>(k));
    sol.states[k + 1] = dynamics.f(sol.states[k], sol.controls[k]);
    if (!sol.states[k + 1].allFinite())
      throw NumericError("initial rollout diverged at step " + std::to_string(k));
  }
  total += cost.terminal(sol.states[N]);
  if (!std::isfinite(total)) throw NumericError("initial cost is not finite");
  sol.cost_history.push_back(total);

  double lambda = cfg.reg_init;
  bool gains_fresh = false;
  bool derivs_fresh = false;
  TrajectoryDerivs derivs;
  BackwardResult bw;

  for (int iter = 0; iter < cfg.max_iters; ++iter) {
    if (!derivs_fresh) {
      derivs = compute_derivatives(sol.states, sol.controls, dynamics, cost);
      derivs_fresh = true;
    }
    bool bw_ok = false;
    while (true) {
      bw = backward_pass(derivs, lambda);
      if (bw.ok) {
        bw_ok = true;
        break;
      }
      if (lambda >= cfg.reg_max) break;
      lambda = std::min(lambda * cfg.reg_scale, cfg.reg_max);
    }
    if (!bw_ok) {
      sol.stop_reason = "backward pass failed at maximum regularization";
      break;
    }
    sol.gains = bw.gains;
    sol.grad_max = bw.grad_max;
    sol.min_quu_reg_eig = bw.min_quu_reg_eig;
    gains_fresh = true;

    if (bw.grad_max < cfg.tol_grad) {
      sol.converged = true;
      sol.stop_reason = "gradient tolerance";
      break;
    }

    ForwardResult best;
    for (double alpha : cfg.alphas) {
      ForwardResult fo = forward_pass(sol.states, sol.controls, bw.gains, alpha, dynamics, cost);
      if (fo.ok && fo.cost < sol.cost_history.back()) {
        best = std::move(fo);
        break;
      }
    }
    if (best.ok) {
      const double prev = sol.cost_history.back();
      const double rel = (prev - best.cost) / std::max(std::abs(prev), 1e-300);
      sol.states = std::move(best.xs);
      sol.controls = std::move(best.us);
      sol.cost_history.push_back(best.cost);
      ++sol.iterations;
      gains_fresh = false;
      derivs_fresh = false;
      lambda = std::max(lambda / cfg.reg_scale, cfg.reg_min);
      if (rel < cfg.tol_cost) {
        sol.converged = true;
        sol.stop_reason = "cost decrease tolerance";
        break;
      }
    } else {
      if (lambda >= cfg.reg_max) {
        sol.stop_reason = "no cost-reducing step at maximum regularization";
        break;
      }
      lambda = std::min(lambda * cfg.reg_scale, cfg.reg_max);
    }
  }
  if (sol.stop_reason.empty()) sol.stop_reason = "max iterations";

  // keep the returned gains consistent with the returned nominal trajectory
  if (!gains_fresh) {
    const TrajectoryDerivs d2 = compute_derivatives(sol.states, sol.controls, dynamics, cost);
    const BackwardResult bw2 = backward_pass(d2, lambda);
    if (bw2.ok) {
      sol.gains = bw2.gains;
      sol.grad_max = bw2.grad_max;
      sol.min_quu_reg_eig = bw2.min_quu_reg_eig;
    }
  }
  sol.final_cost = sol.cost_history.back();
  sol.lambda_final = lambda;
  return sol;
}

}  // namespace granular::ddp
