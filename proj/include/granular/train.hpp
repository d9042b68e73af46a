#pragma once

// One-step training of the graph network on reduced trajectories. Labels
// are second differences of positions; the box acceleration fed to the
// model is the matching second difference of the recorded box path, so the
// learned dynamics and the positional box update stay mutually consistent.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "granular/gnn.hpp"
#include "granular/io.hpp"
#include "granular/types.hpp"

namespace granular::gnn {

struct ReducedExample {
  std::vector<Mat> positions;  // N frames of n_nr x 2 subspace coordinates
  Mat box_positions;           // N x 2, world frame
};

struct TrainConfig {
  double lr_init = 1e-3;
  double lr_final = 1e-5;
  int batch_size = 16;
  int steps = 5000;
  double noise_std = 1e-4;  // std of history noise, in normalized position units
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (steps < 0) throw ConfigError("steps must be >= 0");
    if (noise_std < 0) throw ConfigError("noise_std must be >= 0");
  }
};

struct Window {
  int example;
  int start;  // first history frame; the label lives at start + C + 1
};

inline std::vector<Window> enumerate_windows(const std::vector<ReducedExample>& dataset, int C) {
  std::vector<Window> windows;
  for (size_t e = 0; e < dataset.size(); ++e) {
    const int n_frames = static_cast<int>(dataset[e].positions.size());
    for (int t = 0; t + C + 1 < n_frames; ++t) windows.push_back({static_cast<int>(e), t});
  }
  return windows;
}

struct Sample {
  std::vector<Mat> pos_history;
  Mat box_history;
  Vec2 box_accel;
  Mat label;  // n x 2
};

inline Sample make_sample(const ReducedExample& ex, int t, int C) {
  Sample s;
  s.pos_history.assign(ex.positions.begin() + t, ex.positions.begin() + t + C + 1);
  s.box_history = ex.box_positions.middleRows(t, C + 1);
  s.box_accel = (ex.box_positions.row(t + C + 1) - 2.0 * ex.box_positions.row(t + C) +
                 ex.box_positions.row(t + C - 1))
                    .transpose();
  s.label = ex.positions[static_cast<size_t>(t + C + 1)] -
            2.0 * ex.positions[static_cast<size_t>(t + C)] +
            ex.positions[static_cast<size_t>(t + C - 1)];
  return s;
}

namespace detail {

struct RunningStats {
  Vec sum, sumsq;
  std::int64_t count = 0;
  explicit RunningStats(Eigen::Index dim) : sum(Vec::Zero(dim)), sumsq(Vec::Zero(dim)) {}
  void add_columns(const Mat& m) {
    sum += m.rowwise().sum();
    sumsq += m.array().square().matrix().rowwise().sum();
    count += m.cols();
  }
  Vec mean() const { return sum / static_cast<double>(count); }
  Vec stddev(double floor) const {
    Vec mu = mean();
    Vec var = sumsq / static_cast<double>(count) - mu.cwiseProduct(mu);
    return var.cwiseMax(0.0).cwiseSqrt().cwiseMax(floor);
  }
};

inline std::vector<Mat*> parameter_tensors(GraphNetModel& m) {
  std::vector<Mat*> out;
  auto add = [&](nn::Mlp& mlp) {
    nn::visit_tensors(mlp, [&](Mat& t) { out.push_back(&t); });
  };
  add(m.node_encoder);
  add(m.edge_encoder);
  for (auto& e : m.edge_updates) add(e);
  for (auto& u : m.node_updates) add(u);
  add(m.decoder);
  return out;
}

inline std::vector<std::string> tensor_names(const GraphNetModel& m) {
  std::vector<std::string> names;
  auto add = [&](const nn::Mlp& mlp, const std::string& prefix) {
    for (size_t l = 0; l < mlp.layers.size(); ++l) {
      names.push_back(prefix + "." + std::to_string(l) + ".W");
      names.push_back(prefix + "." + std::to_string(l) + ".b");
    }
  };
  add(m.node_encoder, "node_encoder");
  add(m.edge_encoder, "edge_encoder");
  for (size_t i = 0; i < m.edge_updates.size(); ++i)
    add(m.edge_updates[i], "edge_updates." + std::to_string(i));
  for (size_t i = 0; i < m.node_updates.size(); ++i)
    add(m.node_updates[i], "node_updates." + std::to_string(i));
  add(m.decoder, "decoder");
  return names;
}

}  // namespace detail

inline GraphNetModel zeros_like(const GraphNetModel& model) {
  GraphNetModel z = model;
  z.zero_parameters();
  return z;
}

/// Feature-wise input statistics and output statistics over every training
/// window. Input stds are floored at 1e-3 so near-constant features stay
/// differentiable at finite-difference scales; output stds at 1e-8.
inline void compute_normalization(GraphNetModel& model, const std::vector<ReducedExample>& dataset,
                                  const std::vector<Window>& windows) {
  const int C = model.cfg.history;
  detail::RunningStats node_stats(model.cfg.node_feature_dim());
  detail::RunningStats edge_stats(GraphConfig::kEdgeFeatureDim);
  detail::RunningStats out_stats(2);
  for (const Window& w : windows) {
    const Sample s = make_sample(dataset[static_cast<size_t>(w.example)], w.start, C);
    const GraphFeatures f = build_features(s.pos_history, s.box_history, s.box_accel, model.cfg);
    node_stats.add_columns(f.nodes);
    edge_stats.add_columns(f.edges);
    out_stats.add_columns(s.label.transpose());
  }
  model.node_mean = node_stats.mean();
  model.node_std = node_stats.stddev(1e-3);
  model.edge_mean = edge_stats.mean();
  model.edge_std = edge_stats.stddev(1e-3);
  model.out_mean = out_stats.mean();
  model.out_std = out_stats.stddev(1e-8);
}

struct TrainResult {
  GraphNetModel model;
  std::vector<double> loss_history;  // normalized-space batch MSE per step
};

/// Minimizes the normalized one-step MSE with Adam. Gaussian noise is added
/// to the input position histories (the label is re-derived from the noisy
/// newest frames so the model learns to damp the perturbation).
inline TrainResult train(const std::vector<ReducedExample>& dataset, const TrainConfig& cfg,
                         const GraphConfig& graph_cfg) {
  cfg.validate();
  if (dataset.empty()) throw ConfigError("training dataset is empty");
  const int C = graph_cfg.history;
  for (const auto& ex : dataset)
    if (static_cast<int>(ex.positions.size()) < C + 2)
      throw ConfigError("every training example needs at least C+2 frames");

  TrainResult result;
  result.model = GraphNetModel::create(graph_cfg, cfg.seed);
  const std::vector<Window> windows = enumerate_windows(dataset, C);
  compute_normalization(result.model, dataset, windows);
  GraphNetModel& model = result.model;

  GraphNetModel grad = zeros_like(model);
  GraphNetModel adam_m = zeros_like(model);
  GraphNetModel adam_v = zeros_like(model);
  const auto params = detail::parameter_tensors(model);
  const auto gparams = detail::parameter_tensors(grad);
  const auto mparams = detail::parameter_tensors(adam_m);
  const auto vparams = detail::parameter_tensors(adam_v);

  std::mt19937_64 rng(cfg.seed + 1);
  std::uniform_int_distribution<size_t> pick(0, windows.size() - 1);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double noise_raw = cfg.noise_std * 0.5 * (model.node_std[0] + model.node_std[1]);

  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  result.loss_history.reserve(static_cast<size_t>(cfg.steps));

  for (int step = 0; step < cfg.steps; ++step) {
    for (Mat* g : gparams) g->setZero();
    double loss = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const Window w = windows[pick(rng)];
      Sample s = make_sample(dataset[static_cast<size_t>(w.example)], w.start, C);
      if (cfg.noise_std > 0 && noise_raw > 0) {
        for (auto& frame : s.pos_history)
          for (Eigen::Index i = 0; i < frame.rows(); ++i)
            for (int c = 0; c < 2; ++c) frame(i, c) += noise_raw * gauss(rng);
        const size_t last = s.pos_history.size() - 1;
        // the label keeps pointing at the clean next frame
        const auto& ex = dataset[static_cast<size_t>(w.example)];
        s.label = ex.positions[static_cast<size_t>(w.start + C + 1)] -
                  2.0 * s.pos_history[last] + s.pos_history[last - 1];
      }
      const GraphFeatures f = build_features(s.pos_history, s.box_history, s.box_accel, model.cfg);
      ForwardTrace tr;
      model.forward(f, &tr);
      const Mat label_norm =
          ((s.label.transpose().colwise() - model.out_mean).array().colwise() / model.out_std.array())
              .matrix();
      const Mat resid = tr.out_norm - label_norm;  // 2 x n
      const double denom = static_cast<double>(resid.size());
      loss += resid.squaredNorm() / denom;
      const Mat d_out_norm = (2.0 / (denom * cfg.batch_size)) * resid;
      model.backward_norm(f, tr, d_out_norm, &grad);
    }
    loss /= cfg.batch_size;
    if (!std::isfinite(loss))
      throw NumericError("training loss diverged at step " + std::to_string(step));
    result.loss_history.push_back(loss);

    const double frac = cfg.steps > 1 ? static_cast<double>(step) / (cfg.steps - 1) : 0.0;
    const double lr =
        cfg.lr_init == 0.0 ? 0.0 : cfg.lr_init * std::pow(cfg.lr_final / cfg.lr_init, frac);
    const double t = step + 1;
    for (size_t i = 0; i < params.size(); ++i) {
      Mat& p = *params[i];
      const Mat& g = *gparams[i];
      Mat& m1 = *mparams[i];
      Mat& m2 = *vparams[i];
      m1 = beta1 * m1 + (1.0 - beta1) * g;
      m2 = beta2 * m2 + (1.0 - beta2) * g.cwiseProduct(g);
      if (lr != 0.0) {
        const double c1 = 1.0 - std::pow(beta1, t);
        const double c2 = 1.0 - std::pow(beta2, t);
        p -= (lr * (m1 / c1).array() / ((m2 / c2).array().sqrt() + eps)).matrix();
      }
    }
  }
  return result;
}

struct EvalStats {
  double mse = 0.0;           // raw second-difference units
  double baseline_mse = 0.0;  // best constant predictor (label variance)
  int n_windows = 0;
};

inline EvalStats one_step_eval(const GraphNetModel& model, const std::vector<ReducedExample>& dataset) {
  const int C = model.cfg.history;
  const std::vector<Window> windows = enumerate_windows(dataset, C);
  if (windows.empty()) throw ConfigError("no evaluation windows");
  EvalStats stats;
  stats.n_windows = static_cast<int>(windows.size());

  Vec2 label_sum = Vec2::Zero();
  std::int64_t label_count = 0;
  std::vector<Mat> labels, preds;
  for (const Window& w : windows) {
    const Sample s = make_sample(dataset[static_cast<size_t>(w.example)], w.start, C);
    const GraphFeatures f = build_features(s.pos_history, s.box_history, s.box_accel, model.cfg);
    preds.push_back(model.forward(f));
    labels.push_back(s.label);
    label_sum += s.label.colwise().sum().transpose();
    label_count += s.label.rows();
  }
  const Vec2 label_mean = label_sum / static_cast<double>(label_count);
  double se = 0.0, se_const = 0.0;
  std::int64_t entries = 0;
  for (size_t k = 0; k < labels.size(); ++k) {
    se += (preds[k] - labels[k]).squaredNorm();
    se_const += (labels[k].rowwise() - label_mean.transpose()).squaredNorm();
    entries += labels[k].size();
  }
  stats.mse = se / static_cast<double>(entries);
  stats.baseline_mse = se_const / static_cast<double>(entries);
  return stats;
}

// ---------------------------------------------------------------------------
// Serialization: model.json + weights.bin

static_assert(std::endian::native == std::endian::little,
              "weights.bin is written in little-endian layout");

inline void save_model(const io::fs::path& dir, const GraphNetModel& model) {
  auto& m = const_cast<GraphNetModel&>(model);
  const auto tensors = detail::parameter_tensors(m);
  const auto names = detail::tensor_names(model);

  io::json manifest = io::json::array();
  for (size_t i = 0; i < tensors.size(); ++i)
    manifest.push_back({{"name", names[i]},
                        {"rows", tensors[i]->rows()},
                        {"cols", tensors[i]->cols()}});

  io::json j;
  j["graph"] = {{"n_nodes", model.cfg.n_nodes},
                {"history", model.cfg.history},
                {"latent_dim", model.cfg.latent_dim},
                {"mlp_hidden", model.cfg.mlp_hidden},
                {"message_passes", model.cfg.message_passes},
                {"fully_connected", model.cfg.fully_connected}};
  j["normalization"] = {{"node_mean", io::vec_to_json(model.node_mean)},
                        {"node_std", io::vec_to_json(model.node_std)},
                        {"edge_mean", io::vec_to_json(model.edge_mean)},
                        {"edge_std", io::vec_to_json(model.edge_std)},
                        {"out_mean", io::vec_to_json(model.out_mean)},
                        {"out_std", io::vec_to_json(model.out_std)}};
  j["weights_format"] = "weights.bin: 8-byte magic GNNWTS01, uint32 manifest length, "
                        "manifest JSON, then float64 little-endian tensors in manifest "
                        "order, row-major";
  j["tensors"] = manifest;
  io::write_json(dir / "model.json", j);

  const std::string manifest_str = manifest.dump();
  std::string blob;
  blob.append("GNNWTS01", 8);
  const std::uint32_t len = static_cast<std::uint32_t>(manifest_str.size());
  blob.append(reinterpret_cast<const char*>(&len), 4);
  blob.append(manifest_str);
  for (const Mat* t : tensors)
    for (Eigen::Index r = 0; r < t->rows(); ++r)
      for (Eigen::Index c = 0; c < t->cols(); ++c) {
        const double v = (*t)(r, c);
        blob.append(reinterpret_cast<const char*>(&v), 8);
      }
  io::write_text(dir / "weights.bin", blob);
}

inline GraphNetModel load_model(const io::fs::path& dir) {
  const io::json j = io::read_json(dir / "model.json");
  GraphConfig cfg;
  cfg.n_nodes = j["graph"]["n_nodes"].get<int>();
  cfg.history = j["graph"]["history"].get<int>();
  cfg.latent_dim = j["graph"]["latent_dim"].get<int>();
  cfg.mlp_hidden = j["graph"]["mlp_hidden"].get<std::vector<int>>();
  cfg.message_passes = j["graph"]["message_passes"].get<int>();
  cfg.fully_connected = j["graph"]["fully_connected"].get<bool>();

  GraphNetModel model = GraphNetModel::create(cfg, 0);
  model.node_mean = io::vec_from_json(j["normalization"]["node_mean"]);
  model.node_std = io::vec_from_json(j["normalization"]["node_std"]);
  model.edge_mean = io::vec_from_json(j["normalization"]["edge_mean"]);
  model.edge_std = io::vec_from_json(j["normalization"]["edge_std"]);
  model.out_mean = io::vec_from_json(j["normalization"]["out_mean"]);
  model.out_std = io::vec_from_json(j["normalization"]["out_std"]);

  const std::string blob = io::read_text(dir / "weights.bin");
  if (blob.size() < 12 || blob.compare(0, 8, "GNNWTS01") != 0)
    throw ShapeError("weights.bin: bad magic");
  std::uint32_t len = 0;
  std::memcpy(&len, blob.data() + 8, 4);
  size_t offset = 12 + len;
  const auto tensors = detail::parameter_tensors(model);
  for (Mat* t : tensors) {
    for (Eigen::Index r = 0; r < t->rows(); ++r)
      for (Eigen::Index c = 0; c < t->cols(); ++c) {
        if (offset + 8 > blob.size()) throw ShapeError("weights.bin: truncated payload");
        double v;
        std::memcpy(&v, blob.data() + offset, 8);
        (*t)(r, c) = v;
        offset += 8;
      }
  }
  if (offset != blob.size()) throw ShapeError("weights.bin: trailing bytes");
  return model;
}

}  // namespace granular::gnn
