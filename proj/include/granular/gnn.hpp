#pragma once

// Encode-process-decode graph network over the reduced particles. Node
// features carry the latest position, a C-long velocity history (first
// differences of C+1 positions; the frame period is absorbed into the
// units), the particle type, and global box features. Edge features carry
// relative positions. The processor runs M message-passing blocks with
// residual updates; the decoder emits per-node accelerations in
// second-difference units.
//
// The subspace graph is fully connected: after the reduction, interactions
// between reduced particles are not proximity-based, so no distance
// threshold is applied.
//
// Everything is differentiated by hand-written reverse mode, both toward
// parameters (training) and toward inputs (Jacobians consumed by the
// trajectory optimizer).

#include <bit>
#include <cstdint>
#include <cstring>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "granular/io.hpp"
#include "granular/mlp.hpp"
#include "granular/types.hpp"

namespace granular::gnn {

struct GraphConfig {
  int n_nodes = 8;
  int history = 5;  // C: velocity-history length
  int latent_dim = 64;
  std::vector<int> mlp_hidden = {64, 64};
  int message_passes = 5;
  bool fully_connected = true;

  static constexpr int kEdgeFeatureDim = 3;  // relative position + distance
  static constexpr int kGlobalDim = 6;       // box position, velocity, acceleration

  int node_feature_dim() const { return 2 + 2 * history + 1 + kGlobalDim; }

  void validate() const {
    if (n_nodes < 1) throw ConfigError("n_nodes must be >= 1");
    if (history < 1) throw ConfigError("history must be >= 1");
    if (latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
    if (message_passes < 1) throw ConfigError("message_passes must be >= 1");
  }
};

struct GraphFeatures {
  Mat nodes;  // node_feature_dim x n_nodes
  Mat edges;  // 3 x n_edges
  std::vector<std::pair<int, int>> edge_index;  // (sender, receiver)
};

/// pos_history: C+1 frames of n x 2 positions, oldest first.
/// box_history: (C+1) x 2 box positions, box_accel: the lifted control.
inline GraphFeatures build_features(const std::vector<Mat>& pos_history,
                                    const Mat& box_history, const Vec2& box_accel,
                                    const GraphConfig& cfg) {
  const int C = cfg.history;
  if (static_cast<int>(pos_history.size()) != C + 1)
    throw ShapeError("position history must hold exactly C+1 frames");
  if (box_history.rows() != C + 1 || box_history.cols() != 2)
    throw ShapeError("box history must be (C+1) x 2");
  const Eigen::Index n = pos_history[0].rows();
  for (const auto& p : pos_history)
    if (p.rows() != n || p.cols() != 2) throw ShapeError("inconsistent history frame shape");

  GraphFeatures f;
  f.nodes.resize(cfg.node_feature_dim(), n);
  const Mat& q = pos_history[static_cast<size_t>(C)];
  const Vec2 box_pos = box_history.row(C).transpose();
  const Vec2 box_vel = (box_history.row(C) - box_history.row(C - 1)).transpose();
  for (Eigen::Index i = 0; i < n; ++i) {
    f.nodes(0, i) = q(i, 0);
    f.nodes(1, i) = q(i, 1);
    for (int t = 1; t <= C; ++t) {
      f.nodes(2 + 2 * (t - 1), i) =
          pos_history[static_cast<size_t>(t)](i, 0) - pos_history[static_cast<size_t>(t - 1)](i, 0);
      f.nodes(2 + 2 * (t - 1) + 1, i) =
          pos_history[static_cast<size_t>(t)](i, 1) - pos_history[static_cast<size_t>(t - 1)](i, 1);
    }
    f.nodes(2 + 2 * C, i) = 1.0;  // single particle type in subspace
    f.nodes(2 + 2 * C + 1, i) = box_pos.x();
    f.nodes(2 + 2 * C + 2, i) = box_pos.y();
    f.nodes(2 + 2 * C + 3, i) = box_vel.x();
    f.nodes(2 + 2 * C + 4, i) = box_vel.y();
    f.nodes(2 + 2 * C + 5, i) = box_accel.x();
    f.nodes(2 + 2 * C + 6, i) = box_accel.y();
  }

  if (cfg.fully_connected) {
    f.edge_index.reserve(static_cast<size_t>(n) * (n - 1));
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (i != j) f.edge_index.emplace_back(i, j);
  }
  f.edges.resize(GraphConfig::kEdgeFeatureDim, static_cast<Eigen::Index>(f.edge_index.size()));
  for (Eigen::Index e = 0; e < f.edges.cols(); ++e) {
    const auto [i, j] = f.edge_index[static_cast<size_t>(e)];
    const double dx = q(i, 0) - q(j, 0);
    const double dy = q(i, 1) - q(j, 1);
    f.edges(0, e) = dx;
    f.edges(1, e) = dy;
    f.edges(2, e) = std::sqrt(dx * dx + dy * dy);
  }
  return f;
}

struct ForwardTrace {
  Mat nodes_norm, edges_norm;
  nn::MlpCache node_enc, edge_enc, dec;
  std::vector<nn::MlpCache> edge_upd, node_upd;
  std::vector<Mat> node_latents;  // V_0..V_M
  std::vector<Mat> edge_latents;  // E_0..E_M
  Mat out_norm;                   // 2 x n
};

struct InputGradients {
  std::vector<Mat> pos_history;  // C+1 frames of n x 2
  Mat box_history;               // (C+1) x 2
  Vec2 box_accel{0.0, 0.0};
};

struct GraphNetModel {
  GraphConfig cfg;
  nn::Mlp node_encoder, edge_encoder;
  std::vector<nn::Mlp> edge_updates, node_updates;
  nn::Mlp decoder;
  Vec node_mean, node_std;  // per raw node-feature dimension
  Vec edge_mean, edge_std;
  Vec out_mean, out_std;    // per output coordinate (2)

  static GraphNetModel create(const GraphConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    GraphNetModel m;
    m.cfg = cfg;
    std::mt19937_64 rng(seed);
    const int L = cfg.latent_dim;
    m.node_encoder = nn::Mlp::create(cfg.node_feature_dim(), cfg.mlp_hidden, L, rng);
    m.edge_encoder = nn::Mlp::create(GraphConfig::kEdgeFeatureDim, cfg.mlp_hidden, L, rng);
    for (int i = 0; i < cfg.message_passes; ++i) {
      m.edge_updates.push_back(nn::Mlp::create(3 * L, cfg.mlp_hidden, L, rng));
      m.node_updates.push_back(nn::Mlp::create(2 * L, cfg.mlp_hidden, L, rng));
    }
    m.decoder = nn::Mlp::create(L, cfg.mlp_hidden, 2, rng);
    m.node_mean = Vec::Zero(cfg.node_feature_dim());
    m.node_std = Vec::Ones(cfg.node_feature_dim());
    m.edge_mean = Vec::Zero(GraphConfig::kEdgeFeatureDim);
    m.edge_std = Vec::Ones(GraphConfig::kEdgeFeatureDim);
    m.out_mean = Vec::Zero(2);
    m.out_std = Vec::Ones(2);
    return m;
  }

  /// Sets every parameter tensor to zero (the decoder bias then fixes the
  /// output). Mainly for structural tests.
  void zero_parameters();

  /// Predicted accelerations (second-difference units), n x 2.
  Mat forward(const GraphFeatures& f, ForwardTrace* trace = nullptr) const {
    ForwardTrace local;
    ForwardTrace& tr = trace ? *trace : local;
    const Eigen::Index n = f.nodes.cols();
    const Eigen::Index ne = f.edges.cols();

    tr.nodes_norm = ((f.nodes.colwise() - node_mean).array().colwise() / node_std.array()).matrix();
    tr.edges_norm = ((f.edges.colwise() - edge_mean).array().colwise() / edge_std.array()).matrix();

    tr.node_latents.assign(1, node_encoder.forward(tr.nodes_norm, &tr.node_enc));
    tr.edge_latents.assign(1, edge_encoder.forward(tr.edges_norm, &tr.edge_enc));
    tr.edge_upd.resize(static_cast<size_t>(cfg.message_passes));
    tr.node_upd.resize(static_cast<size_t>(cfg.message_passes));

    const int L = cfg.latent_dim;
    for (int m = 0; m < cfg.message_passes; ++m) {
      const Mat& V = tr.node_latents.back();
      const Mat& E = tr.edge_latents.back();
      Mat ein(3 * L, ne);
      for (Eigen::Index e = 0; e < ne; ++e) {
        const auto [s, r] = f.edge_index[static_cast<size_t>(e)];
        ein.col(e).segment(0, L) = E.col(e);
        ein.col(e).segment(L, L) = V.col(s);
        ein.col(e).segment(2 * L, L) = V.col(r);
      }
      Mat e_next = E + edge_updates[static_cast<size_t>(m)].forward(ein, &tr.edge_upd[static_cast<size_t>(m)]);

      Mat agg = Mat::Zero(L, n);
      for (Eigen::Index e = 0; e < ne; ++e)
        agg.col(f.edge_index[static_cast<size_t>(e)].second) += e_next.col(e);
      Mat nin(2 * L, n);
      nin.topRows(L) = V;
      nin.bottomRows(L) = agg;
      Mat v_next = V + node_updates[static_cast<size_t>(m)].forward(nin, &tr.node_upd[static_cast<size_t>(m)]);

      if (!v_next.allFinite() || !e_next.allFinite())
        throw NumericError("non-finite activations in message-passing block " + std::to_string(m));
      tr.edge_latents.push_back(std::move(e_next));
      tr.node_latents.push_back(std::move(v_next));
    }

    tr.out_norm = decoder.forward(tr.node_latents.back(), &tr.dec);
    Mat out = ((tr.out_norm.array().colwise() * out_std.array()).colwise() + out_mean.array()).matrix();
    if (!out.allFinite()) throw NumericError("non-finite activations in decoder");
    return out.transpose();
  }

  /// Reverse pass from an adjoint of the *normalized* output (2 x n, or
  /// 2 x n*k for k stacked seeds, seed-major). Returns adjoints of the raw
  /// node/edge feature matrices in the same stacked layout; accumulates
  /// parameter adjoints into grad when given (single seed only).
  std::pair<Mat, Mat> backward_norm(const GraphFeatures& f, const ForwardTrace& tr,
                                    const Mat& d_out_norm, GraphNetModel* grad) const {
    const int L = cfg.latent_dim;
    const Eigen::Index n = f.nodes.cols();
    const Eigen::Index ne = f.edges.cols();
    const Eigen::Index k = n > 0 ? d_out_norm.cols() / n : 1;

    Mat dV = decoder.backward(tr.dec, d_out_norm, grad ? &grad->decoder : nullptr);
    Mat dE = Mat::Zero(L, ne * k);

    for (int m = cfg.message_passes - 1; m >= 0; --m) {
      const auto mu = static_cast<size_t>(m);
      Mat dnin = node_updates[mu].backward(tr.node_upd[mu], dV,
                                           grad ? &grad->node_updates[mu] : nullptr);
      Mat dV_prev = dV + dnin.topRows(L);
      const Mat dagg = dnin.bottomRows(L);
      for (Eigen::Index s = 0; s < k; ++s)
        for (Eigen::Index e = 0; e < ne; ++e)
          dE.col(s * ne + e) += dagg.col(s * n + f.edge_index[static_cast<size_t>(e)].second);

      Mat dein = edge_updates[mu].backward(tr.edge_upd[mu], dE,
                                           grad ? &grad->edge_updates[mu] : nullptr);
      Mat dE_prev = dE + dein.topRows(L);
      for (Eigen::Index s = 0; s < k; ++s)
        for (Eigen::Index e = 0; e < ne; ++e) {
          const auto [snd, rcv] = f.edge_index[static_cast<size_t>(e)];
          dV_prev.col(s * n + snd) += dein.col(s * ne + e).segment(L, L);
          dV_prev.col(s * n + rcv) += dein.col(s * ne + e).segment(2 * L, L);
        }
      dV = std::move(dV_prev);
      dE = std::move(dE_prev);
    }

    Mat d_nodes_norm = node_encoder.backward(tr.node_enc, dV, grad ? &grad->node_encoder : nullptr);
    Mat d_edges_norm = edge_encoder.backward(tr.edge_enc, dE, grad ? &grad->edge_encoder : nullptr);
    Mat d_nodes = (d_nodes_norm.array().colwise() / node_std.array()).matrix();
    Mat d_edges = (d_edges_norm.array().colwise() / edge_std.array()).matrix();
    return {std::move(d_nodes), std::move(d_edges)};
  }

  /// Reverse pass from an adjoint of the raw output (n x 2).
  std::pair<Mat, Mat> backward(const GraphFeatures& f, const ForwardTrace& tr, const Mat& dY,
                               GraphNetModel* grad = nullptr) const {
    const Mat d_out_norm = (dY.transpose().array().colwise() * out_std.array()).matrix();
    return backward_norm(f, tr, d_out_norm, grad);
  }
};

inline void GraphNetModel::zero_parameters() {
  auto zero = [](Mat& t) { t.setZero(); };
  nn::visit_tensors(node_encoder, zero);
  nn::visit_tensors(edge_encoder, zero);
  for (auto& e : edge_updates) nn::visit_tensors(e, zero);
  for (auto& u : node_updates) nn::visit_tensors(u, zero);
  nn::visit_tensors(decoder, zero);
}

/// Adjoints of the raw feature matrices mapped back onto the raw inputs of
/// build_features.
inline InputGradients feature_adjoint(const GraphFeatures& f, const Mat& d_nodes,
                                      const Mat& d_edges, const GraphConfig& cfg) {
  const int C = cfg.history;
  const Eigen::Index n = f.nodes.cols();
  InputGradients g;
  g.pos_history.assign(static_cast<size_t>(C + 1), Mat::Zero(n, 2));
  g.box_history = Mat::Zero(C + 1, 2);
  g.box_accel.setZero();

  for (Eigen::Index i = 0; i < n; ++i) {
    g.pos_history[static_cast<size_t>(C)](i, 0) += d_nodes(0, i);
    g.pos_history[static_cast<size_t>(C)](i, 1) += d_nodes(1, i);
    for (int t = 1; t <= C; ++t)
      for (int c = 0; c < 2; ++c) {
        const double dv = d_nodes(2 + 2 * (t - 1) + c, i);
        g.pos_history[static_cast<size_t>(t)](i, c) += dv;
        g.pos_history[static_cast<size_t>(t - 1)](i, c) -= dv;
      }
    for (int c = 0; c < 2; ++c) {
      const double dbp = d_nodes(2 + 2 * C + 1 + c, i);
      const double dbv = d_nodes(2 + 2 * C + 3 + c, i);
      g.box_history(C, c) += dbp + dbv;
      g.box_history(C - 1, c) -= dbv;
      g.box_accel[c] += d_nodes(2 + 2 * C + 5 + c, i);
    }
  }
  for (Eigen::Index e = 0; e < f.edges.cols(); ++e) {
    const auto [i, j] = f.edge_index[static_cast<size_t>(e)];
    Vec2 ddisp(d_edges(0, e), d_edges(1, e));
    const double dist = f.edges(2, e);
    if (dist > 0)
      ddisp += (d_edges(2, e) / dist) * Vec2(f.edges(0, e), f.edges(1, e));
    g.pos_history[static_cast<size_t>(C)](i, 0) += ddisp.x();
    g.pos_history[static_cast<size_t>(C)](i, 1) += ddisp.y();
    g.pos_history[static_cast<size_t>(C)](j, 0) -= ddisp.x();
    g.pos_history[static_cast<size_t>(C)](j, 1) -= ddisp.y();
  }
  return g;
}

/// Second-difference acceleration labels: label[k] = p_{k+2} - 2 p_{k+1} + p_k.
inline std::vector<Mat> training_labels(const std::vector<Mat>& positions) {
  if (positions.size() < 3)
    throw ConfigError("training_labels needs at least 3 frames");
  std::vector<Mat> labels;
  labels.reserve(positions.size() - 2);
  for (size_t k = 2; k < positions.size(); ++k)
    labels.push_back(positions[k] - 2.0 * positions[k - 1] + positions[k - 2]);
  return labels;
}

/// One learned step: a = g(history); v' = v + a; q' = q + v'.
inline Mat predict_step(const GraphNetModel& model, const std::vector<Mat>& pos_history,
                        const Mat& box_history, const Vec2& box_accel) {
  const GraphFeatures f = build_features(pos_history, box_history, box_accel, model.cfg);
  const Mat a = model.forward(f);
  const size_t C = pos_history.size() - 1;
  return 2.0 * pos_history[C] - pos_history[C - 1] + a;
}

/// Exact reverse-mode Jacobian of the flattened acceleration output
/// (2*n rows, node-major) with respect to [position history | box history |
/// box acceleration], column-flattened time-major then node-major then x,y.
inline Mat input_jacobian(const GraphNetModel& model, const std::vector<Mat>& pos_history,
                          const Mat& box_history, const Vec2& box_accel) {
  const GraphFeatures f = build_features(pos_history, box_history, box_accel, model.cfg);
  ForwardTrace tr;
  model.forward(f, &tr);
  const int C = model.cfg.history;
  const Eigen::Index n = f.nodes.cols();
  const Eigen::Index ne = f.edges.cols();
  const Eigen::Index cols = 2 * n * (C + 1) + 2 * (C + 1) + 2;
  const Eigen::Index n_seeds = 2 * n;

  // all output entries as one stacked seed batch: seed s = (node, coord)
  Mat d_out = Mat::Zero(2, n * n_seeds);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index c = 0; c < 2; ++c) {
      const Eigen::Index s = 2 * i + c;
      d_out(c, s * n + i) = model.out_std[c];  // de-normalization chain rule
    }
  const auto [d_nodes, d_edges] = model.backward_norm(f, tr, d_out, nullptr);

  Mat jac(n_seeds, cols);
  for (Eigen::Index s = 0; s < n_seeds; ++s) {
    const InputGradients g = feature_adjoint(f, d_nodes.middleCols(s * n, n),
                                             d_edges.middleCols(s * ne, ne), model.cfg);
    Eigen::Index col = 0;
    for (int t = 0; t <= C; ++t)
      for (Eigen::Index p = 0; p < n; ++p)
        for (int cc = 0; cc < 2; ++cc)
          jac(s, col++) = g.pos_history[static_cast<size_t>(t)](p, cc);
    for (int t = 0; t <= C; ++t)
      for (int cc = 0; cc < 2; ++cc) jac(s, col++) = g.box_history(t, cc);
    jac(s, col++) = g.box_accel.x();
    jac(s, col++) = g.box_accel.y();
  }
  return jac;
}

}  // namespace granular::gnn
