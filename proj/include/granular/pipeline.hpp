#pragma once

// End-to-end orchestration: dataset generation on the ground-truth
// simulator, PCA fit, graph-network training, DDP over the learned reduced
// dynamics, validation replay on the simulator, and report emission. Every
// stage reads only the serialized artifacts of earlier stages, so stages
// are resumable and independently testable.
//
// Unit convention: the learned stack works in frame-period-absorbed units
// (velocities are first differences, accelerations second differences of
// 60 Hz positions). Physical accelerations appear only at the simulator
// boundary, converted once by rate^2.

#include <algorithm>
#include <cmath>
#include <future>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "granular/ddp.hpp"
#include "granular/gnn.hpp"
#include "granular/io.hpp"
#include "granular/pca.hpp"
#include "granular/sim.hpp"
#include "granular/state_space.hpp"
#include "granular/train.hpp"
#include "granular/types.hpp"

namespace granular::pipeline {

namespace fs = std::filesystem;
using io::json;

// ---------------------------------------------------------------------------
// Configuration

struct DatasetConfig {
  int n_examples = 32;
  int n_frames = 90;
  double rate_hz = 60.0;
  double width_min = 0.3, width_max = 0.5;
  double frequency_min = 0.5, frequency_max = 3.0;
  double amplitude_min = 0.01, amplitude_max = 0.05;
  double max_frequency_hz = 3.0;
  double fill_width = 0.2;
  double fill_height = 0.12;
  int substeps = 20;
  double v_max_bound = 2.0;
  std::uint64_t seed = 7;
  int retry_limit = 3;

  void validate() const {
    if (n_examples < 1) throw ConfigError("dataset.n_examples must be >= 1");
    if (n_frames < 3) throw ConfigError("dataset.n_frames must be >= 3");
    if (!(rate_hz > 0)) throw ConfigError("dataset.rate_hz must be > 0");
    if (frequency_max > max_frequency_hz)
      throw ConfigError("dataset frequency range exceeds the " +
                        std::to_string(max_frequency_hz) + " Hz cap");
    if (width_min > width_max || frequency_min > frequency_max ||
        amplitude_min > amplitude_max)
      throw ConfigError("dataset ranges must satisfy min <= max");
  }
};

struct TargetShape {
  enum class Kind { slope, rectangle, heightfield };
  Kind kind = Kind::slope;
  double slope_angle_deg = 10.0;                     // slope
  double rect_x0 = 0.1, rect_width = 0.2, rect_height = 0.08;  // rectangle
  std::vector<std::pair<double, double>> heightfield;          // (x, h) knots
};

struct ControlConfig {
  TargetShape target;
  double box_width = 0.4;
  int horizon = 60;
  double r_weight = 1e-2;
  double terminal_weight = 1.0;
  double running_weight = 0.0;
  std::uint64_t block_seed = 123;
  ddp::DdpConfig ddp;

  void validate() const {
    if (horizon < 1) throw ConfigError("control.horizon must be >= 1");
    if (!(r_weight > 0)) throw ConfigError("control.r_weight must be > 0");
    if (terminal_weight < 0 || running_weight < 0)
      throw ConfigError("control cost weights must be >= 0");
    ddp.validate();
  }
};

struct ExperimentConfig {
  DatasetConfig dataset;
  sim::GrainParams grain;
  double wall_height = 0.3;
  double wall_particle_spacing = 0.01;
  int pca_modes = 8;
  gnn::GraphConfig graph;          // n_nodes is overwritten from pca_modes
  gnn::TrainConfig train;
  int holdout_examples = 4;
  ControlConfig control;

  void validate() const {
    dataset.validate();
    grain.validate();
    if (pca_modes < 1) throw ConfigError("pca_modes must be >= 1");
    if (holdout_examples < 1 || holdout_examples >= dataset.n_examples)
      throw ConfigError("holdout_examples must lie in [1, n_examples)");
    control.validate();
  }
};

namespace detail {

template <class T>
T get_or(const json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  return j.at(key).get<T>();
}

inline json range_json(double lo, double hi) { return json::array({lo, hi}); }

}  // namespace detail

inline ExperimentConfig parse_config(const json& j) {
  ExperimentConfig cfg;
  using detail::get_or;
  if (j.contains("dataset")) {
    const json& d = j["dataset"];
    cfg.dataset.n_examples = get_or(d, "n_examples", cfg.dataset.n_examples);
    cfg.dataset.n_frames = get_or(d, "n_frames", cfg.dataset.n_frames);
    cfg.dataset.rate_hz = get_or(d, "rate_hz", cfg.dataset.rate_hz);
    if (d.contains("width_range")) {
      cfg.dataset.width_min = d["width_range"][0].get<double>();
      cfg.dataset.width_max = d["width_range"][1].get<double>();
    }
    if (d.contains("frequency_range")) {
      cfg.dataset.frequency_min = d["frequency_range"][0].get<double>();
      cfg.dataset.frequency_max = d["frequency_range"][1].get<double>();
    }
    if (d.contains("amplitude_range")) {
      cfg.dataset.amplitude_min = d["amplitude_range"][0].get<double>();
      cfg.dataset.amplitude_max = d["amplitude_range"][1].get<double>();
    }
    cfg.dataset.max_frequency_hz = get_or(d, "max_frequency_hz", cfg.dataset.max_frequency_hz);
    cfg.dataset.fill_width = get_or(d, "fill_width", cfg.dataset.fill_width);
    cfg.dataset.fill_height = get_or(d, "fill_height", cfg.dataset.fill_height);
    cfg.dataset.substeps = get_or(d, "substeps", cfg.dataset.substeps);
    cfg.dataset.v_max_bound = get_or(d, "v_max_bound", cfg.dataset.v_max_bound);
    cfg.dataset.seed = get_or(d, "seed", cfg.dataset.seed);
    cfg.dataset.retry_limit = get_or(d, "retry_limit", cfg.dataset.retry_limit);
  }
  if (j.contains("grain")) {
    const json& g = j["grain"];
    cfg.grain.radius = get_or(g, "radius", cfg.grain.radius);
    cfg.grain.mass = get_or(g, "mass", cfg.grain.mass);
    cfg.grain.normal_stiffness = get_or(g, "normal_stiffness", cfg.grain.normal_stiffness);
    cfg.grain.normal_damping = get_or(g, "normal_damping", cfg.grain.normal_damping);
    cfg.grain.friction_coeff = get_or(g, "friction_coeff", cfg.grain.friction_coeff);
    cfg.grain.gravity = get_or(g, "gravity", cfg.grain.gravity);
  }
  if (j.contains("box")) {
    cfg.wall_height = detail::get_or(j["box"], "wall_height", cfg.wall_height);
    cfg.wall_particle_spacing =
        detail::get_or(j["box"], "wall_particle_spacing", cfg.wall_particle_spacing);
  }
  if (j.contains("pca")) cfg.pca_modes = detail::get_or(j["pca"], "n_modes", cfg.pca_modes);
  if (j.contains("train")) {
    const json& t = j["train"];
    cfg.graph.history = get_or(t, "history", cfg.graph.history);
    cfg.graph.latent_dim = get_or(t, "latent_dim", cfg.graph.latent_dim);
    cfg.graph.mlp_hidden = get_or(t, "mlp_hidden", cfg.graph.mlp_hidden);
    cfg.graph.message_passes = get_or(t, "message_passes", cfg.graph.message_passes);
    cfg.train.lr_init = get_or(t, "lr_init", cfg.train.lr_init);
    cfg.train.lr_final = get_or(t, "lr_final", cfg.train.lr_final);
    cfg.train.batch_size = get_or(t, "batch_size", cfg.train.batch_size);
    cfg.train.steps = get_or(t, "steps", cfg.train.steps);
    cfg.train.noise_std = get_or(t, "noise_std", cfg.train.noise_std);
    cfg.train.seed = get_or(t, "seed", cfg.train.seed);
    cfg.holdout_examples = get_or(t, "holdout_examples", cfg.holdout_examples);
  }
  if (j.contains("control")) {
    const json& c = j["control"];
    if (c.contains("target")) {
      const json& t = c["target"];
      const std::string kind = detail::get_or<std::string>(t, "kind", "slope");
      if (kind == "slope") {
        cfg.control.target.kind = TargetShape::Kind::slope;
        cfg.control.target.slope_angle_deg =
            get_or(t, "angle_deg", cfg.control.target.slope_angle_deg);
      } else if (kind == "rectangle") {
        cfg.control.target.kind = TargetShape::Kind::rectangle;
        cfg.control.target.rect_x0 = get_or(t, "x0", cfg.control.target.rect_x0);
        cfg.control.target.rect_width = get_or(t, "width", cfg.control.target.rect_width);
        cfg.control.target.rect_height = get_or(t, "height", cfg.control.target.rect_height);
      } else if (kind == "heightfield") {
        cfg.control.target.kind = TargetShape::Kind::heightfield;
        for (const auto& knot : t.at("knots"))
          cfg.control.target.heightfield.emplace_back(knot[0].get<double>(),
                                                      knot[1].get<double>());
      } else {
        throw ConfigError("unknown target kind: " + kind);
      }
    }
    cfg.control.box_width = get_or(c, "box_width", cfg.control.box_width);
    cfg.control.horizon = get_or(c, "horizon", cfg.control.horizon);
    cfg.control.r_weight = get_or(c, "r_weight", cfg.control.r_weight);
    cfg.control.terminal_weight = get_or(c, "terminal_weight", cfg.control.terminal_weight);
    cfg.control.running_weight = get_or(c, "running_weight", cfg.control.running_weight);
    cfg.control.block_seed = get_or(c, "block_seed", cfg.control.block_seed);
    if (c.contains("ddp")) {
      const json& d = c["ddp"];
      cfg.control.ddp.max_iters = get_or(d, "max_iters", cfg.control.ddp.max_iters);
      cfg.control.ddp.reg_init = get_or(d, "reg_init", cfg.control.ddp.reg_init);
      cfg.control.ddp.reg_min = get_or(d, "reg_min", cfg.control.ddp.reg_min);
      cfg.control.ddp.reg_max = get_or(d, "reg_max", cfg.control.ddp.reg_max);
      cfg.control.ddp.reg_scale = get_or(d, "reg_scale", cfg.control.ddp.reg_scale);
      cfg.control.ddp.tol_cost = get_or(d, "tol_cost", cfg.control.ddp.tol_cost);
      cfg.control.ddp.tol_grad = get_or(d, "tol_grad", cfg.control.ddp.tol_grad);
    }
  }
  cfg.graph.n_nodes = cfg.pca_modes;
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const fs::path& path) {
  return parse_config(io::read_json(path));
}

inline json config_echo(const ExperimentConfig& cfg) {
  json j;
  j["dataset"] = {{"n_examples", cfg.dataset.n_examples},
                  {"n_frames", cfg.dataset.n_frames},
                  {"rate_hz", cfg.dataset.rate_hz},
                  {"width_range", detail::range_json(cfg.dataset.width_min, cfg.dataset.width_max)},
                  {"frequency_range",
                   detail::range_json(cfg.dataset.frequency_min, cfg.dataset.frequency_max)},
                  {"amplitude_range",
                   detail::range_json(cfg.dataset.amplitude_min, cfg.dataset.amplitude_max)},
                  {"max_frequency_hz", cfg.dataset.max_frequency_hz},
                  {"fill_width", cfg.dataset.fill_width},
                  {"fill_height", cfg.dataset.fill_height},
                  {"substeps", cfg.dataset.substeps},
                  {"seed", cfg.dataset.seed}};
  j["pca"] = {{"n_modes", cfg.pca_modes}};
  j["train"] = {{"history", cfg.graph.history},
                {"latent_dim", cfg.graph.latent_dim},
                {"message_passes", cfg.graph.message_passes},
                {"steps", cfg.train.steps},
                {"batch_size", cfg.train.batch_size},
                {"noise_std", cfg.train.noise_std},
                {"seed", cfg.train.seed},
                {"holdout_examples", cfg.holdout_examples}};
  j["control"] = {{"box_width", cfg.control.box_width},
                  {"horizon", cfg.control.horizon},
                  {"r_weight", cfg.control.r_weight},
                  {"terminal_weight", cfg.control.terminal_weight},
                  {"running_weight", cfg.control.running_weight},
                  {"block_seed", cfg.control.block_seed}};
  return j;
}

// ---------------------------------------------------------------------------
// Paths

struct RunPaths {
  fs::path out;
  fs::path dataset_dir() const { return out / "dataset"; }
  fs::path example_dir(int i) const {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "example_%03d", i);
    return dataset_dir() / buf;
  }
  fs::path basis_dir() const { return out; }        // basis.json + basis_w.csv
  fs::path model_dir() const { return out; }        // model.json + weights.bin
  fs::path train_report() const { return out / "train_report.json"; }
  fs::path solution() const { return out / "solution.json"; }
  fs::path validation() const { return out / "validation.json"; }
  fs::path metrics() const { return out / "metrics.json"; }
};

// ---------------------------------------------------------------------------
// Stage 1: dataset generation

inline sim::BoxSpec control_box(const ExperimentConfig& cfg) {
  sim::BoxSpec box;
  box.width = cfg.control.box_width;
  box.wall_height = cfg.wall_height;
  box.initial_position = Vec2(0.5, 0.0);
  box.wall_particle_spacing = cfg.wall_particle_spacing;
  return box;
}

inline void gen_data(const ExperimentConfig& cfg, const fs::path& out) {
  cfg.validate();
  const RunPaths paths{out};
  const double dt_frame = 1.0 / cfg.dataset.rate_hz;

  auto generate_one = [&](int index) -> json {
    for (int attempt = 0; attempt <= cfg.dataset.retry_limit; ++attempt) {
      const std::uint64_t seed =
          cfg.dataset.seed + 1000003ull * static_cast<std::uint64_t>(index) +
          777ull * static_cast<std::uint64_t>(attempt);
      std::mt19937_64 rng(seed);
      std::uniform_real_distribution<double> uw(cfg.dataset.width_min, cfg.dataset.width_max);
      std::uniform_real_distribution<double> uf(cfg.dataset.frequency_min,
                                                cfg.dataset.frequency_max);
      std::uniform_real_distribution<double> ua(cfg.dataset.amplitude_min,
                                                cfg.dataset.amplitude_max);
      sim::BoxSpec box;
      box.width = uw(rng);
      box.wall_height = cfg.wall_height;
      box.initial_position = Vec2(0.5, 0.0);
      box.wall_particle_spacing = cfg.wall_particle_spacing;
      sim::BoxMotion motion;
      motion.kind = sim::BoxMotion::Kind::sinusoid;
      motion.frequency = uf(rng);
      motion.amplitude = ua(rng);
      motion.frequency_cap = cfg.dataset.max_frequency_hz;
      try {
        const auto initial =
            sim::init_block(box, cfg.grain, cfg.dataset.fill_width, cfg.dataset.fill_height, seed);
        const auto frames =
            sim::rollout(initial, motion, cfg.dataset.n_frames, cfg.dataset.substeps, dt_frame,
                         cfg.grain, box, cfg.dataset.v_max_bound);
        sim::ExampleMeta meta;
        meta.grain = cfg.grain;
        meta.box = box;
        meta.motion = motion;
        meta.seed = seed;
        meta.dt_frame = dt_frame;
        meta.substeps = cfg.dataset.substeps;
        sim::save_rollout(paths.example_dir(index), frames, meta);
        return json{{"index", index},
                    {"seed", seed},
                    {"attempts", attempt + 1},
                    {"width", box.width},
                    {"frequency", motion.frequency},
                    {"amplitude", motion.amplitude}};
      } catch (const NumericError&) {
        continue;  // diverged: retry with a fresh seed
      }
    }
    throw NumericError("example " + std::to_string(index) + " kept diverging after " +
                       std::to_string(cfg.dataset.retry_limit + 1) + " attempts");
  };

  // examples are independent; run them in bounded parallel batches
  const int workers = std::max(1u, std::thread::hardware_concurrency());
  json examples = json::array();
  for (int start = 0; start < cfg.dataset.n_examples; start += workers) {
    std::vector<std::future<json>> futures;
    for (int i = start; i < std::min(start + workers, cfg.dataset.n_examples); ++i)
      futures.push_back(std::async(std::launch::async, generate_one, i));
    for (auto& f : futures) examples.push_back(f.get());
  }

  json index;
  index["n_examples"] = cfg.dataset.n_examples;
  index["config"] = config_echo(cfg);
  index["examples"] = std::move(examples);
  io::write_json(paths.dataset_dir() / "dataset.json", index);
}

inline std::vector<sim::LoadedExample> load_dataset(const fs::path& out) {
  const RunPaths paths{out};
  const json index = io::read_json(paths.dataset_dir() / "dataset.json");
  const int n = index["n_examples"].get<int>();
  std::vector<sim::LoadedExample> dataset;
  dataset.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) dataset.push_back(sim::load_rollout(paths.example_dir(i)));
  return dataset;
}

// ---------------------------------------------------------------------------
// Stage 2: PCA fit

inline pca::PcaBasis fit_pca_stage(const ExperimentConfig& cfg, const fs::path& out) {
  const auto dataset = load_dataset(out);
  std::vector<std::vector<sim::ParticleFrame>> frames;
  frames.reserve(dataset.size());
  for (const auto& ex : dataset) frames.push_back(ex.frames);
  const auto dm = pca::assemble_data_matrix(frames);
  const auto basis = pca::fit(dm, cfg.pca_modes);
  pca::save_basis(RunPaths{out}.basis_dir(), basis);
  return basis;
}

// ---------------------------------------------------------------------------
// Stage 3: training

inline gnn::ReducedExample reduce_example(const sim::LoadedExample& ex,
                                          const pca::PcaBasis& basis) {
  gnn::ReducedExample red;
  red.box_positions.resize(static_cast<Eigen::Index>(ex.frames.size()), 2);
  for (size_t k = 0; k < ex.frames.size(); ++k) {
    red.positions.push_back(pca::reduce_frame(ex.frames[k].normal_positions, basis));
    red.box_positions.row(static_cast<Eigen::Index>(k)) =
        ex.frames[k].box_position.transpose();
  }
  return red;
}

struct TrainStageReport {
  double holdout_mse = 0.0;
  double baseline_mse = 0.0;
  double ratio = 0.0;
  int n_train_examples = 0;
  int n_holdout_examples = 0;
  std::vector<double> loss_history;
};

inline TrainStageReport train_stage(const ExperimentConfig& cfg, const fs::path& out) {
  const RunPaths paths{out};
  const auto dataset = load_dataset(out);
  const auto basis = pca::load_basis(paths.basis_dir());

  std::vector<gnn::ReducedExample> reduced;
  reduced.reserve(dataset.size());
  for (const auto& ex : dataset) reduced.push_back(reduce_example(ex, basis));

  // deterministic holdout split
  std::vector<size_t> order(reduced.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(cfg.train.seed ^ 0xabcdef12ull);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<gnn::ReducedExample> train_set, holdout_set;
  for (size_t i = 0; i < order.size(); ++i) {
    if (i < order.size() - static_cast<size_t>(cfg.holdout_examples))
      train_set.push_back(reduced[order[i]]);
    else
      holdout_set.push_back(reduced[order[i]]);
  }

  gnn::GraphConfig gcfg = cfg.graph;
  gcfg.n_nodes = cfg.pca_modes;
  const auto result = gnn::train(train_set, cfg.train, gcfg);
  gnn::save_model(paths.model_dir(), result.model);

  const auto stats = gnn::one_step_eval(result.model, holdout_set);
  TrainStageReport report;
  report.holdout_mse = stats.mse;
  report.baseline_mse = stats.baseline_mse;
  report.ratio = stats.baseline_mse > 0 ? stats.mse / stats.baseline_mse
                                        : std::numeric_limits<double>::quiet_NaN();
  report.n_train_examples = static_cast<int>(train_set.size());
  report.n_holdout_examples = static_cast<int>(holdout_set.size());
  report.loss_history = result.loss_history;

  json j;
  j["holdout_mse"] = report.holdout_mse;
  j["baseline_mse"] = report.baseline_mse;
  j["mse_ratio"] = report.ratio;
  j["n_train_examples"] = report.n_train_examples;
  j["n_holdout_examples"] = report.n_holdout_examples;
  j["loss_history"] = report.loss_history;
  io::write_json(paths.train_report(), j);
  return report;
}

// ---------------------------------------------------------------------------
// Stage 4: optimization

/// Deterministic particle arrangement for a target shape: lattice sites
/// under the shape's height profile, deepest first, reindexed bottom-up rows
/// then left-to-right so indices correspond spatially to the initial block's
/// lattice order.
inline Mat realize_target(const TargetShape& target, const sim::BoxSpec& box, double spacing,
                          int n_particles) {
  const int nx = static_cast<int>(std::floor(box.width / spacing + 1e-9));
  const int ny = static_cast<int>(std::floor(box.wall_height / spacing + 1e-9));
  if (static_cast<long>(nx) * ny < n_particles)
    throw ConfigError("box lattice cannot hold the requested particle count");

  auto height_at = [&](double x) -> double {
    switch (target.kind) {
      case TargetShape::Kind::slope: {
        const double slope = std::tan(target.slope_angle_deg * M_PI / 180.0);
        // offset chosen so the shape holds n_particles lattice cells of area
        const double mean_height =
            static_cast<double>(n_particles) * spacing * spacing / box.width;
        return mean_height + slope * (x - 0.5 * box.width);
      }
      case TargetShape::Kind::rectangle: {
        if (target.rect_x0 < 0 || target.rect_x0 + target.rect_width > box.width)
          throw ConfigError("target rectangle does not fit inside the box");
        return (x >= target.rect_x0 && x <= target.rect_x0 + target.rect_width)
                   ? target.rect_height
                   : 0.0;
      }
      case TargetShape::Kind::heightfield: {
        const auto& knots = target.heightfield;
        if (knots.size() < 2) throw ConfigError("heightfield needs at least 2 knots");
        if (x <= knots.front().first) return knots.front().second;
        for (size_t i = 1; i < knots.size(); ++i)
          if (x <= knots[i].first) {
            const double t =
                (x - knots[i - 1].first) / (knots[i].first - knots[i - 1].first);
            return knots[i - 1].second + t * (knots[i].second - knots[i - 1].second);
          }
        return knots.back().second;
      }
    }
    throw ConfigError("unhandled target kind");
  };

  struct Site {
    double depth;
    int ix, iy;
  };
  std::vector<Site> sites;
  sites.reserve(static_cast<size_t>(nx) * ny);
  for (int iy = 0; iy < ny; ++iy)
    for (int ix = 0; ix < nx; ++ix) {
      const double x = (ix + 0.5) * spacing;
      const double y = (iy + 0.5) * spacing;
      sites.push_back({height_at(x) - y, ix, iy});
    }
  std::sort(sites.begin(), sites.end(), [](const Site& a, const Site& b) {
    if (a.depth != b.depth) return a.depth > b.depth;
    if (a.iy != b.iy) return a.iy < b.iy;
    return a.ix < b.ix;
  });
  sites.resize(static_cast<size_t>(n_particles));
  if (sites.back().depth < -0.5 * spacing)
    throw ConfigError("target shape is too small for the particle count");
  std::sort(sites.begin(), sites.end(), [](const Site& a, const Site& b) {
    if (a.iy != b.iy) return a.iy < b.iy;
    return a.ix < b.ix;
  });

  Mat arrangement(n_particles, 2);
  for (int i = 0; i < n_particles; ++i) {
    arrangement(i, 0) = (sites[static_cast<size_t>(i)].ix + 0.5) * spacing;
    arrangement(i, 1) = (sites[static_cast<size_t>(i)].iy + 0.5) * spacing;
  }
  return arrangement;
}

struct InitialState {
  Vec x0;
  sim::SimState block;              // ground-truth twin of the initial condition
  std::vector<Mat> reduced_history; // the C+1 frames inside x0
};

/// Initial control state: the raw block projected to the subspace, rolled
/// C+1 steps with zero control under the learned dynamics, box pinned at
/// [0.5, 0] throughout.
inline InitialState make_initial_state(const gnn::GraphNetModel& model,
                                       const pca::PcaBasis& basis,
                                       const ExperimentConfig& cfg) {
  const sim::BoxSpec box = control_box(cfg);
  InitialState init;
  init.block = sim::init_block(box, cfg.grain, cfg.dataset.fill_width, cfg.dataset.fill_height,
                               cfg.control.block_seed);
  if (init.block.frame.num_normal() != basis.n_particles())
    throw ShapeError("control block particle count does not match the PCA basis");

  const int C = model.cfg.history;
  const Mat r0 = pca::reduce_frame(init.block.frame.normal_positions, basis);
  std::vector<Mat> history(static_cast<size_t>(C + 1), r0);
  Mat box_history(C + 1, 2);
  for (int t = 0; t <= C; ++t) box_history.row(t) = Vec2(0.5, 0.0).transpose();

  for (int k = 0; k <= C; ++k) {
    const Mat next = gnn::predict_step(model, history, box_history, Vec2(0.0, 0.0));
    history.erase(history.begin());
    history.push_back(next);
  }
  init.reduced_history = history;
  statespace::StateLayout layout{model.cfg.n_nodes, C};
  init.x0 = statespace::pack_state(history, box_history, layout);
  return init;
}

struct TargetState {
  Vec x_goal;
  Mat fullspace;  // the realized arrangement (A)
};

inline TargetState make_target_state(const TargetShape& target, const pca::PcaBasis& basis,
                                     const ExperimentConfig& cfg) {
  const sim::BoxSpec box = control_box(cfg);
  TargetState t;
  t.fullspace = realize_target(target, box, 2.0 * cfg.grain.radius,
                               static_cast<int>(basis.n_particles()));
  const Mat rg = pca::reduce_frame(t.fullspace, basis);
  const int C = cfg.graph.history;
  std::vector<Mat> history(static_cast<size_t>(C + 1), rg);
  Mat box_history(C + 1, 2);
  for (int k = 0; k <= C; ++k) box_history.row(k) = Vec2(0.5, 0.0).transpose();
  statespace::StateLayout layout{cfg.pca_modes, C};
  t.x_goal = statespace::pack_state(history, box_history, layout);
  return t;
}

/// Terminal-shaping cost: identity on the particle entries of the newest
/// time slot (weighted), small control penalty.
inline ddp::QuadCost make_cost(const ExperimentConfig& cfg, const Vec& x_goal) {
  const statespace::StateLayout layout{cfg.pca_modes, cfg.graph.history};
  const int dim = layout.dim();
  ddp::QuadCost cost;
  cost.R = cfg.control.r_weight * Mat::Identity(1, 1);
  cost.P = Mat::Zero(dim, dim);
  cost.Q_T = Mat::Zero(dim, dim);
  const int C = layout.history;
  for (int i = 0; i < 2 * layout.n_modes; ++i) {
    cost.Q_T(layout.particle_offset(C) + i, layout.particle_offset(C) + i) =
        cfg.control.terminal_weight;
    if (cfg.control.running_weight > 0)
      cost.P(layout.particle_offset(C) + i, layout.particle_offset(C) + i) =
          cfg.control.running_weight;
  }
  cost.x_goal = x_goal;
  return cost;
}

struct OptimizeReport {
  ddp::DdpSolution solution;
  double baseline_cost = 0.0;  // zero-control rollout under the same cost
  Mat baseline_terminal_reduced;
  Mat terminal_reduced;
};

inline OptimizeReport optimize_stage(const ExperimentConfig& cfg, const fs::path& out) {
  const RunPaths paths{out};
  const auto basis = pca::load_basis(paths.basis_dir());
  const auto model = gnn::load_model(paths.model_dir());

  const InitialState init = make_initial_state(model, basis, cfg);
  const TargetState target = make_target_state(cfg.control.target, basis, cfg);
  const ddp::QuadCost cost = make_cost(cfg, target.x_goal);
  const statespace::ReducedBoxDynamics dyn(model);

  const int N = cfg.control.horizon;
  const std::vector<Vec> u_init(static_cast<size_t>(N), Vec::Zero(1));

  OptimizeReport report;
  // zero-control rollout is both the nominal trajectory and the baseline
  {
    Vec x = init.x0;
    double total = 0.0;
    for (int k = 0; k < N; ++k) {
      total += cost.running(x, u_init[static_cast<size_t>(k)], k);
      x = dyn.f(x, u_init[static_cast<size_t>(k)]);
    }
    total += cost.terminal(x);
    report.baseline_cost = total;
    std::vector<Mat> hist;
    Mat bh;
    statespace::unpack_state(x, dyn.layout, hist, bh);
    report.baseline_terminal_reduced = hist.back();
  }

  report.solution = ddp::solve(init.x0, u_init, dyn, cost, cfg.control.ddp);
  {
    std::vector<Mat> hist;
    Mat bh;
    statespace::unpack_state(report.solution.states.back(), dyn.layout, hist, bh);
    report.terminal_reduced = hist.back();
  }

  json j;
  j["config"] = config_echo(cfg);
  j["layout"] = {{"n_modes", cfg.pca_modes}, {"history", cfg.graph.history}};
  json controls = json::array();
  for (const auto& u : report.solution.controls) controls.push_back(u[0]);
  j["controls"] = std::move(controls);
  const statespace::StateLayout layout{cfg.pca_modes, cfg.graph.history};
  json box_traj = json::array();
  for (const auto& x : report.solution.states)
    box_traj.push_back(x[layout.box_offset(layout.history)]);
  j["box_trajectory_x"] = std::move(box_traj);
  j["cost_history"] = report.solution.cost_history;
  j["converged"] = report.solution.converged;
  j["iterations"] = report.solution.iterations;
  j["stop_reason"] = report.solution.stop_reason;
  j["final_cost"] = report.solution.final_cost;
  j["grad_max"] = report.solution.grad_max;
  j["min_quu_reg_eig"] = report.solution.min_quu_reg_eig;
  j["baseline_cost"] = report.baseline_cost;
  j["gains_dimensions"] = {{"kff", 1}, {"K_rows", 1}, {"K_cols", layout.dim()}};
  json gains = json::array();
  for (const auto& g : report.solution.gains) {
    json row = json::array();
    row.push_back(g.kff[0]);
    for (Eigen::Index c = 0; c < g.K.cols(); ++c) row.push_back(g.K(0, c));
    gains.push_back(std::move(row));
  }
  j["gains"] = std::move(gains);
  j["terminal_reduced"] = io::mat_to_json(report.terminal_reduced);
  j["baseline_terminal_reduced"] = io::mat_to_json(report.baseline_terminal_reduced);
  json states = json::array();
  for (const auto& x : report.solution.states) states.push_back(io::vec_to_json(x));
  j["states"] = std::move(states);
  io::write_json(paths.solution(), j);
  return report;
}

// ---------------------------------------------------------------------------
// Stage 5: validation replay on the ground-truth simulator

struct ValidationReport {
  bool valid = false;
  bool with_feedback = false;
  double rmse_fullspace = 0.0;          // A vs D
  double rmse_reconstructed = 0.0;      // B vs C
  double rmse_fullspace_baseline = 0.0; // A vs zero-control replay terminal
  double rmse_reconstructed_baseline = 0.0;
  double improvement_reconstructed = 0.0;
  std::vector<double> replay_box_x;
  Mat shape_a, shape_b, shape_c, shape_d;
};

inline double rmse(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("rmse: shape mismatch");
  return std::sqrt((a - b).squaredNorm() / static_cast<double>(a.size()));
}

namespace detail {

struct Replay {
  Mat terminal_normal_positions;
  std::vector<double> box_x;
  bool diverged = false;
};

// Replays a physical-acceleration schedule: C+1 bootstrap frames with zero
// acceleration, then one entry of `accel` per frame. `correction`, when
// given, may adjust each control frame's acceleration from the replay state
// just before that frame.
template <class CorrectionFn>
Replay replay_on_simulator(const ExperimentConfig& cfg, const std::vector<double>& accel,
                           CorrectionFn&& correction) {
  const sim::BoxSpec box = control_box(cfg);
  const double dt_frame = 1.0 / cfg.dataset.rate_hz;
  const double dt = dt_frame / cfg.dataset.substeps;
  Replay rep;
  try {
    sim::SimState state = sim::init_block(box, cfg.grain, cfg.dataset.fill_width,
                                          cfg.dataset.fill_height, cfg.control.block_seed);
    std::vector<Mat> recent_normals;   // for feedback projection
    std::vector<double> recent_box_x;
    auto record = [&](const sim::SimState& s) {
      rep.box_x.push_back(s.frame.box_position.x());
      recent_normals.push_back(s.frame.normal_positions);
      recent_box_x.push_back(s.frame.box_position.x());
    };
    record(state);
    const int C = cfg.graph.history;
    for (int k = 0; k < C + 1; ++k) {
      for (int s = 0; s < cfg.dataset.substeps; ++s)
        state = sim::step(state, 0.0, dt, cfg.grain, box);
      record(state);
    }
    for (size_t k = 0; k < accel.size(); ++k) {
      const double a = correction(static_cast<int>(k), recent_normals, recent_box_x,
                                  accel[k]);
      for (int s = 0; s < cfg.dataset.substeps; ++s)
        state = sim::step(state, a, dt, cfg.grain, box);
      record(state);
    }
    rep.terminal_normal_positions = state.frame.normal_positions;
  } catch (const NumericError&) {
    rep.diverged = true;
  }
  return rep;
}

}  // namespace detail

inline ValidationReport validate_stage(const ExperimentConfig& cfg, const fs::path& out,
                                       bool with_feedback) {
  const RunPaths paths{out};
  const auto basis = pca::load_basis(paths.basis_dir());
  const json sol = io::read_json(paths.solution());

  const double rate = cfg.dataset.rate_hz;
  const double to_physical = rate * rate;  // second differences -> m/s^2
  std::vector<double> accel;
  for (const auto& u : sol["controls"]) accel.push_back(u.get<double>() * to_physical);

  const statespace::StateLayout layout{cfg.pca_modes, cfg.graph.history};
  const int C = cfg.graph.history;

  std::vector<Vec> opt_states;
  for (const auto& s : sol["states"]) opt_states.push_back(io::vec_from_json(s));
  std::vector<Vec> gain_rows;
  if (sol.contains("gains"))
    for (const auto& g : sol["gains"]) {
      Vec row(static_cast<Eigen::Index>(g.size()) - 1);
      for (Eigen::Index i = 0; i < row.size(); ++i) row[i] = g[static_cast<size_t>(i) + 1].get<double>();
      gain_rows.push_back(row);
    }

  auto open_loop = [](int, const std::vector<Mat>&, const std::vector<double>&, double a) {
    return a;
  };
  auto feedback = [&](int k, const std::vector<Mat>& normals,
                      const std::vector<double>& box_x, double a) {
    if (k >= static_cast<int>(gain_rows.size())) return a;
    std::vector<Mat> hist;
    Mat bh(C + 1, 2);
    const size_t last = normals.size();
    for (int t = 0; t <= C; ++t) {
      hist.push_back(pca::reduce_frame(normals[last - static_cast<size_t>(C + 1 - t)], basis));
      bh(t, 0) = box_x[last - static_cast<size_t>(C + 1 - t)];
      bh(t, 1) = 0.0;
    }
    const Vec x_sim = statespace::pack_state(hist, bh, layout);
    const Vec dx = x_sim - opt_states[static_cast<size_t>(k)];
    const double du = gain_rows[static_cast<size_t>(k)].dot(dx);
    return a + du * (cfg.dataset.rate_hz * cfg.dataset.rate_hz);
  };

  ValidationReport rep;
  rep.with_feedback = with_feedback;

  detail::Replay replay =
      with_feedback ? detail::replay_on_simulator(cfg, accel, feedback)
                    : detail::replay_on_simulator(cfg, accel, open_loop);
  const std::vector<double> zero_accel(accel.size(), 0.0);
  detail::Replay baseline = detail::replay_on_simulator(cfg, zero_accel, open_loop);

  const TargetState target = make_target_state(cfg.control.target, basis, cfg);
  rep.shape_a = target.fullspace;
  rep.shape_b = pca::reconstruct_frame(pca::reduce_frame(target.fullspace, basis), basis);
  rep.shape_c = pca::reconstruct_frame(io::mat_from_json(sol["terminal_reduced"]), basis);
  const Mat c_baseline =
      pca::reconstruct_frame(io::mat_from_json(sol["baseline_terminal_reduced"]), basis);

  rep.valid = !replay.diverged && !baseline.diverged;
  if (!replay.diverged) {
    rep.shape_d = replay.terminal_normal_positions;
    rep.replay_box_x = replay.box_x;
    rep.rmse_fullspace = rmse(rep.shape_a, rep.shape_d);
  }
  rep.rmse_reconstructed = rmse(rep.shape_b, rep.shape_c);
  rep.rmse_reconstructed_baseline = rmse(rep.shape_b, c_baseline);
  if (!baseline.diverged)
    rep.rmse_fullspace_baseline = rmse(rep.shape_a, baseline.terminal_normal_positions);
  rep.improvement_reconstructed =
      rep.rmse_reconstructed_baseline > 0
          ? 1.0 - rep.rmse_reconstructed / rep.rmse_reconstructed_baseline
          : 0.0;

  json j;
  j["valid"] = rep.valid;
  j["with_feedback"] = rep.with_feedback;
  j["rmse_fullspace"] = rep.rmse_fullspace;
  j["rmse_reconstructed"] = rep.rmse_reconstructed;
  j["rmse_fullspace_baseline"] = rep.rmse_fullspace_baseline;
  j["rmse_reconstructed_baseline"] = rep.rmse_reconstructed_baseline;
  j["improvement_reconstructed"] = rep.improvement_reconstructed;
  j["rmse_definition"] =
      "sqrt(mean over all particles and both coordinates of squared coordinate error)";
  j["reference_table"] = {
      {"note", "values reported by the original study, different ground-truth "
               "simulator; context only, not comparable"},
      {"example1_fullspace", 38.6e-3},
      {"example1_reconstructed", 22.1e-3},
      {"example2_fullspace", 17.9e-3},
      {"example2_reconstructed", 2.20e-3}};
  j["replay_box_x"] = rep.replay_box_x;
  j["physical_accelerations"] = accel;
  j["shape_a"] = io::mat_to_json(rep.shape_a);
  j["shape_b"] = io::mat_to_json(rep.shape_b);
  j["shape_c"] = io::mat_to_json(rep.shape_c);
  j["shape_d"] = io::mat_to_json(rep.shape_d);
  io::write_json(paths.validation(), j);
  return rep;
}

// ---------------------------------------------------------------------------
// Stage 6: report

inline void report_stage(const fs::path& out) {
  const RunPaths paths{out};
  if (!fs::exists(paths.basis_dir() / "basis.json"))
    throw ConfigError("report: missing basis.json (run fit-pca first)");
  if (!fs::exists(paths.solution()))
    throw ConfigError("report: missing solution.json (run optimize first)");
  if (!fs::exists(paths.validation()))
    throw ConfigError("report: missing validation.json (run validate first)");

  const auto basis = pca::load_basis(paths.basis_dir());
  const auto curve = pca::energy_curve(basis);
  io::Csv energy;
  energy.header = {"mode", "eigenvalue", "cumulative_energy"};
  for (Eigen::Index i = 0; i < curve.cumulative.size(); ++i)
    energy.rows.push_back({std::to_string(i + 1), io::fmt_double(basis.eigenvalues[i]),
                           io::fmt_double(curve.cumulative[i])});
  io::write_csv(paths.out / "energy.csv", energy);

  const json sol = io::read_json(paths.solution());
  io::Csv cost;
  cost.header = {"iteration", "cost"};
  int it = 0;
  for (const auto& c : sol["cost_history"])
    cost.rows.push_back({std::to_string(it++), io::fmt_double(c.get<double>())});
  io::write_csv(paths.out / "cost.csv", cost);

  const json val = io::read_json(paths.validation());
  io::Csv box_traj;
  box_traj.header = {"frame", "planned_box_x", "replay_box_x"};
  const auto& planned = sol["box_trajectory_x"];
  const auto& replay = val["replay_box_x"];
  const int C = static_cast<int>(replay.size()) - static_cast<int>(planned.size());
  for (size_t k = 0; k < replay.size(); ++k) {
    const long pk = static_cast<long>(k) - C;
    box_traj.rows.push_back(
        {std::to_string(k),
         pk >= 0 ? io::fmt_double(planned[static_cast<size_t>(pk)].get<double>()) : "",
         io::fmt_double(replay[k].get<double>())});
  }
  io::write_csv(paths.out / "box_traj.csv", box_traj);

  const char* names[4] = {"shape_a", "shape_b", "shape_c", "shape_d"};
  for (const char* name : names) {
    const Mat shape = io::mat_from_json(val[name]);
    io::Csv csv;
    csv.header = {"particle_id", "x", "y"};
    for (Eigen::Index i = 0; i < shape.rows(); ++i)
      csv.rows.push_back({std::to_string(i), io::fmt_double(shape(i, 0)),
                          io::fmt_double(shape(i, 1))});
    io::write_csv(paths.out / (std::string(name) + ".csv"), csv);
  }

  json metrics;
  metrics["rmse_fullspace"] = val["rmse_fullspace"];
  metrics["rmse_reconstructed"] = val["rmse_reconstructed"];
  metrics["rmse_fullspace_baseline"] = val["rmse_fullspace_baseline"];
  metrics["rmse_reconstructed_baseline"] = val["rmse_reconstructed_baseline"];
  metrics["improvement_reconstructed"] = val["improvement_reconstructed"];
  metrics["rmse_definition"] = val["rmse_definition"];
  metrics["reference_table"] = val["reference_table"];
  metrics["valid"] = val["valid"];
  metrics["with_feedback"] = val["with_feedback"];
  metrics["cost_initial"] = sol["cost_history"][0];
  metrics["cost_final"] = sol["final_cost"];
  metrics["baseline_cost"] = sol["baseline_cost"];
  metrics["ddp_iterations"] = sol["iterations"];
  metrics["ddp_converged"] = sol["converged"];
  metrics["energy_cumulative_at_n_modes"] =
      curve.cumulative[std::min<Eigen::Index>(basis.n_reduced, curve.cumulative.size()) - 1];
  metrics["config"] = sol["config"];
  io::write_json(paths.metrics(), metrics);
}

}  // namespace granular::pipeline
