#pragma once

// Concatenated control state over the C+1 most recent time steps: per step
// a (reduced-particle, box) position pair, newest last. The discrete map F
// shifts the window, appends the learned particle update, and advances the
// box as a double integrator in position-only form
// (b' = 2 b_k - b_{k-1} + [u, 0]).
//
// Rigid wall particles never enter this state: their box-frame coordinates
// are constant with identity dynamics and zero cost weight, so they are
// carried as static metadata elsewhere instead of padding the optimizer.

#include <vector>

#include "granular/gnn.hpp"
#include "granular/types.hpp"

namespace granular::statespace {

struct StateLayout {
  int n_modes = 8;
  int history = 5;  // C

  int pair_dim() const { return 2 * n_modes + 2; }
  int dim() const { return pair_dim() * (history + 1); }
  int particle_offset(int t) const { return t * pair_dim(); }
  int box_offset(int t) const { return t * pair_dim() + 2 * n_modes; }
};

/// Distributes the scalar control onto the box dimensions: [u, 0].
inline Vec2 lift_u(double u) { return Vec2(u, 0.0); }

inline Vec pack_state(const std::vector<Mat>& pos_history, const Mat& box_history,
                      const StateLayout& layout) {
  const int C = layout.history;
  if (static_cast<int>(pos_history.size()) != C + 1 || box_history.rows() != C + 1)
    throw ShapeError("pack_state: history must hold C+1 entries");
  Vec x(layout.dim());
  for (int t = 0; t <= C; ++t) {
    const Mat& p = pos_history[static_cast<size_t>(t)];
    if (p.rows() != layout.n_modes || p.cols() != 2)
      throw ShapeError("pack_state: reduced frame shape mismatch");
    for (int i = 0; i < layout.n_modes; ++i) {
      x[layout.particle_offset(t) + 2 * i] = p(i, 0);
      x[layout.particle_offset(t) + 2 * i + 1] = p(i, 1);
    }
    x[layout.box_offset(t)] = box_history(t, 0);
    x[layout.box_offset(t) + 1] = box_history(t, 1);
  }
  return x;
}

inline void unpack_state(const Vec& x, const StateLayout& layout,
                         std::vector<Mat>& pos_history, Mat& box_history) {
  const int C = layout.history;
  if (x.size() != layout.dim()) throw ShapeError("unpack_state: dimension mismatch");
  pos_history.assign(static_cast<size_t>(C + 1), Mat(layout.n_modes, 2));
  box_history.resize(C + 1, 2);
  for (int t = 0; t <= C; ++t) {
    for (int i = 0; i < layout.n_modes; ++i) {
      pos_history[static_cast<size_t>(t)](i, 0) = x[layout.particle_offset(t) + 2 * i];
      pos_history[static_cast<size_t>(t)](i, 1) = x[layout.particle_offset(t) + 2 * i + 1];
    }
    box_history(t, 0) = x[layout.box_offset(t)];
    box_history(t, 1) = x[layout.box_offset(t) + 1];
  }
}

/// Discrete dynamics X' = F(X, u) over the learned reduced model, with
/// structured Jacobians assembled from the network's input Jacobian.
struct ReducedBoxDynamics {
  const gnn::GraphNetModel* model = nullptr;
  StateLayout layout;

  ReducedBoxDynamics() = default;
  explicit ReducedBoxDynamics(const gnn::GraphNetModel& m)
      : model(&m), layout{m.cfg.n_nodes, m.cfg.history} {}

  int state_dim() const { return layout.dim(); }
  int control_dim() const { return 1; }

  Vec f(const Vec& x, const Vec& u) const {
    const int C = layout.history;
    std::vector<Mat> pos_history;
    Mat box_history;
    unpack_state(x, layout, pos_history, box_history);

    const Vec2 u2 = lift_u(u[0]);
    const gnn::GraphFeatures feats =
        gnn::build_features(pos_history, box_history, u2, model->cfg);
    const Mat accel = model->forward(feats);
    const Mat q_new = 2.0 * pos_history[static_cast<size_t>(C)] -
                      pos_history[static_cast<size_t>(C - 1)] + accel;
    const Vec2 b_new = 2.0 * box_history.row(C).transpose() -
                       box_history.row(C - 1).transpose() + u2;

    const int pd = layout.pair_dim();
    Vec out(layout.dim());
    out.head(pd * C) = x.tail(pd * C);
    for (int i = 0; i < layout.n_modes; ++i) {
      out[pd * C + 2 * i] = q_new(i, 0);
      out[pd * C + 2 * i + 1] = q_new(i, 1);
    }
    out[pd * C + 2 * layout.n_modes] = b_new.x();
    out[pd * C + 2 * layout.n_modes + 1] = b_new.y();
    return out;
  }

  void jacobians(const Vec& x, const Vec& u, Mat& A, Mat& B) const {
    const int C = layout.history;
    const int n = layout.n_modes;
    const int pd = layout.pair_dim();
    const int dim = layout.dim();
    std::vector<Mat> pos_history;
    Mat box_history;
    unpack_state(x, layout, pos_history, box_history);

    const Mat J = gnn::input_jacobian(*model, pos_history, box_history, lift_u(u[0]));

    A = Mat::Zero(dim, dim);
    B = Mat::Zero(dim, 1);
    A.block(0, pd, pd * C, pd * C).setIdentity();  // window shift [O, M0]

    const int rp = pd * C;            // rows of the new particle block
    const int rb = pd * C + 2 * n;    // rows of the new box entry
    const int jac_box0 = 2 * n * (C + 1);
    for (int r = 0; r < 2 * n; ++r) {
      for (int t = 0; t <= C; ++t) {
        for (int k = 0; k < 2 * n; ++k) A(rp + r, t * pd + k) += J(r, t * 2 * n + k);
        for (int c = 0; c < 2; ++c) A(rp + r, t * pd + 2 * n + c) += J(r, jac_box0 + 2 * t + c);
      }
      A(rp + r, C * pd + r) += 2.0;        // inertia terms of the Euler update
      A(rp + r, (C - 1) * pd + r) -= 1.0;
      B(rp + r, 0) = J(r, J.cols() - 2);   // d(accel)/d(u) through [u, 0]
    }
    for (int c = 0; c < 2; ++c) {
      A(rb + c, C * pd + 2 * n + c) = 2.0;
      A(rb + c, (C - 1) * pd + 2 * n + c) = -1.0;
    }
    B(rb, 0) = 1.0;
  }
};

}  // namespace granular::statespace
