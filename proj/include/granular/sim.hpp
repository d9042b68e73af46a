#pragma once

// Desk-scale 2D granular ground truth: spring-dashpot discrete-element
// grains inside a rigid box whose horizontal acceleration is prescribed.
// This is a deliberately simple oracle for data generation and validation;
// it is not a constitutive-fidelity soil model. Grain positions live in the
// box frame (origin at the bottom-left corner), the box representative
// point (center of the bottom side) lives in the world frame, and the box
// motion is kinematic: grains never push the box back.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "granular/io.hpp"
#include "granular/types.hpp"

namespace granular::sim {

struct GrainParams {
  double radius = 0.01;            // m
  double mass = 1.0e-3;            // kg
  double normal_stiffness = 40.0;  // N/m
  double normal_damping = 0.15;    // N*s/m, ~0.5 of critical for a pair
  double friction_coeff = 0.4;
  double gravity = 9.81;           // m/s^2, acts in -y

  void validate() const {
    if (!(radius > 0)) throw ConfigError("grain radius must be > 0");
    if (!(mass > 0)) throw ConfigError("grain mass must be > 0");
    if (!(normal_stiffness > 0)) throw ConfigError("normal_stiffness must be > 0");
    if (normal_damping < 0) throw ConfigError("normal_damping must be >= 0");
    if (friction_coeff < 0) throw ConfigError("friction_coeff must be >= 0");
  }
};

struct BoxSpec {
  double width = 0.4;        // m
  double wall_height = 0.3;  // m
  Vec2 initial_position{0.5, 0.0};  // world coords of the bottom-side center
  double wall_particle_spacing = 0.01;  // m

  void validate() const {
    if (!(width > 0)) throw ConfigError("box width must be > 0");
    if (!(wall_height > 0)) throw ConfigError("box wall_height must be > 0");
    if (!(wall_particle_spacing > 0))
      throw ConfigError("wall_particle_spacing must be > 0");
  }
};

struct BoxMotion {
  enum class Kind { sinusoid, acceleration_sequence };

  Kind kind = Kind::sinusoid;
  double amplitude = 0.02;  // m (position amplitude of the sinusoid)
  double frequency = 1.0;   // Hz
  std::vector<double> accelerations;  // m/s^2 per frame interval
  double frequency_cap = 3.0;         // Hz

  void validate() const {
    if (kind == Kind::sinusoid && frequency > frequency_cap)
      throw ConfigError("box motion frequency " + std::to_string(frequency) +
                        " Hz exceeds cap " + std::to_string(frequency_cap));
  }

  // Acceleration applied over the interval [frame, frame+1). The sinusoid
  // follows the path x(t) = x0 + A*(1 - cos(2*pi*f*t)), which starts at rest.
  double accel_at(int frame, double dt_frame) const {
    if (kind == Kind::acceleration_sequence) {
      if (frame < 0 || frame >= static_cast<int>(accelerations.size())) return 0.0;
      return accelerations[static_cast<size_t>(frame)];
    }
    const double w = 2.0 * M_PI * frequency;
    return amplitude * w * w * std::cos(w * frame * dt_frame);
  }
};

struct ParticleFrame {
  Mat normal_positions;  // n_n x 2, box frame
  Mat rigid_positions;   // n_b x 2, box frame, constant across an example
  Vec2 box_position{0.0, 0.0};  // world frame
  int time_index = 0;

  Eigen::Index num_normal() const { return normal_positions.rows(); }
  Eigen::Index num_rigid() const { return rigid_positions.rows(); }
};

/// Full integrator state: a frame plus the velocities it does not carry.
struct SimState {
  ParticleFrame frame;
  Mat normal_velocities;  // n_n x 2, box frame
  Vec2 box_velocity{0.0, 0.0};
};

/// v_max * dt / dx <= 1, with dx the grain diameter.
inline bool stability_check(double v_max, double dt, double dx) {
  if (!(dx > 0) || !(dt > 0)) throw ConfigError("stability_check needs dt > 0, dx > 0");
  return v_max * dt / dx <= 1.0;
}

namespace detail {

// Wall particles tile the bottom and the two side walls. They mark the box
// geometry in the output data; contact forces use the analytic wall planes.
inline Mat make_wall_particles(const BoxSpec& box) {
  const double sp = box.wall_particle_spacing;
  std::vector<Vec2> pts;
  const int nb = static_cast<int>(std::floor(box.width / sp + 1e-9));
  for (int i = 0; i <= nb; ++i) pts.emplace_back(i * sp, 0.0);
  const int nh = static_cast<int>(std::floor(box.wall_height / sp + 1e-9));
  for (int j = 1; j <= nh; ++j) {
    pts.emplace_back(0.0, j * sp);
    pts.emplace_back(box.width, j * sp);
  }
  Mat rigid(static_cast<Eigen::Index>(pts.size()), 2);
  for (Eigen::Index i = 0; i < rigid.rows(); ++i)
    rigid.row(i) = pts[static_cast<size_t>(i)].transpose();
  return rigid;
}

// Uniform spatial hash with cell size = one grain diameter.
class SpatialHash {
public:
  SpatialHash(const Mat& pos, double cell) : cell_(cell) {
    cells_.reserve(static_cast<size_t>(pos.rows()));
    for (Eigen::Index i = 0; i < pos.rows(); ++i)
      cells_[key(pos(i, 0), pos(i, 1))].push_back(static_cast<int>(i));
  }

  template <class F>
  void for_neighbors(double x, double y, F&& f) const {
    const std::int64_t cx = coord(x), cy = coord(y);
    for (std::int64_t dx = -1; dx <= 1; ++dx)
      for (std::int64_t dy = -1; dy <= 1; ++dy) {
        auto it = cells_.find(pack(cx + dx, cy + dy));
        if (it == cells_.end()) continue;
        for (int j : it->second) f(j);
      }
  }

private:
  std::int64_t coord(double v) const {
    return static_cast<std::int64_t>(std::floor(v / cell_));
  }
  static std::int64_t pack(std::int64_t x, std::int64_t y) {
    return (x << 32) ^ (y & 0xffffffff);
  }
  std::int64_t key(double x, double y) const { return pack(coord(x), coord(y)); }

  double cell_;
  std::unordered_map<std::int64_t, std::vector<int>> cells_;
};

// Spring-dashpot normal force plus Coulomb-capped tangential friction.
// `normal` points from the other body toward grain i, `overlap` > 0. The
// tangential force is a stopping impulse clamped by the Coulomb limit, so
// sliding sticks once the limit allows it and piles acquire a static
// regime. Each contact may remove at most a quarter of the relative
// tangential velocity per substep; the sum over a grain's contacts (at most
// ~8 for disks) then stays contractive instead of ping-ponging.
inline void accumulate_contact(const Vec2& normal, double overlap, const Vec2& v_rel,
                               const GrainParams& g, double m_eff, double dt,
                               Vec2& force) {
  const double v_n = v_rel.dot(normal);  // positive = separating
  double f_n = g.normal_stiffness * overlap - g.normal_damping * v_n;
  if (f_n < 0) f_n = 0;  // repulsive only
  force += f_n * normal;
  const Vec2 v_t = v_rel - v_n * normal;
  const double speed_t = v_t.norm();
  if (speed_t > 1e-12) {
    const double f_t = std::min(g.friction_coeff * f_n, 0.25 * m_eff * speed_t / dt);
    force -= (f_t / speed_t) * v_t;
  }
}

}  // namespace detail

/// Normal grains on a jittered lattice (spacing = grain diameter) filling a
/// centered fill_width x fill_height rectangle, resting on the box floor.
inline SimState init_block(const BoxSpec& box, const GrainParams& grain,
                           double fill_width, double fill_height,
                           std::uint64_t seed = 0) {
  box.validate();
  grain.validate();
  if (fill_width < 0 || fill_height < 0)
    throw ConfigError("fill region must be non-negative");
  if (fill_width > box.width || fill_height > box.wall_height)
    throw ConfigError("fill region exceeds box interior");

  const double s = 2.0 * grain.radius;
  const int nx = static_cast<int>(std::floor(fill_width / s + 1e-9));
  const int ny = static_cast<int>(std::floor(fill_height / s + 1e-9));
  const double x0 = 0.5 * (box.width - fill_width);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(-0.1 * s, 0.1 * s);

  SimState state;
  state.frame.normal_positions.resize(static_cast<Eigen::Index>(nx) * ny, 2);
  for (int iy = 0; iy < ny; ++iy)
    for (int ix = 0; ix < nx; ++ix) {
      const Eigen::Index id = static_cast<Eigen::Index>(iy) * nx + ix;
      state.frame.normal_positions(id, 0) = x0 + (ix + 0.5) * s + jitter(rng);
      state.frame.normal_positions(id, 1) = (iy + 0.5) * s + jitter(rng);
    }
  state.frame.rigid_positions = detail::make_wall_particles(box);
  state.frame.box_position = box.initial_position;
  state.frame.time_index = 0;
  state.normal_velocities = Mat::Zero(state.frame.num_normal(), 2);
  return state;
}

/// One semi-implicit Euler substep under a prescribed horizontal box
/// acceleration. Grain dynamics run in the (translating) box frame, so the
/// box acceleration enters as the inertial force -m*a on every grain.
inline SimState step(const SimState& state, double box_accel, double dt,
                     const GrainParams& grain, const BoxSpec& box) {
  const Eigen::Index n = state.frame.num_normal();
  const Mat& pos = state.frame.normal_positions;
  const Mat& vel = state.normal_velocities;

  Mat force(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    force(i, 0) = -grain.mass * box_accel;
    force(i, 1) = -grain.mass * grain.gravity;
  }

  const double diameter = 2.0 * grain.radius;
  detail::SpatialHash hash(pos, diameter);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec2 xi = pos.row(i).transpose();
    const Vec2 vi = vel.row(i).transpose();
    Vec2 fi = Vec2::Zero();
    hash.for_neighbors(xi.x(), xi.y(), [&](int j) {
      if (j <= i) return;  // each pair once, forces applied to both
      const Vec2 xj = pos.row(j).transpose();
      const Vec2 d = xi - xj;
      const double dist = d.norm();
      if (dist >= diameter || dist <= 0) return;
      const Vec2 normal = d / dist;
      const Vec2 v_rel = vi - vel.row(j).transpose();
      Vec2 fij = Vec2::Zero();
      detail::accumulate_contact(normal, diameter - dist, v_rel, grain, 0.5 * grain.mass,
                                 dt, fij);
      fi += fij;
      force.row(j) -= fij.transpose();
    });
    // analytic walls: floor y=0, left x=0, right x=width
    if (xi.y() < grain.radius)
      detail::accumulate_contact(Vec2(0, 1), grain.radius - xi.y(), vi, grain, grain.mass,
                                 dt, fi);
    if (xi.x() < grain.radius)
      detail::accumulate_contact(Vec2(1, 0), grain.radius - xi.x(), vi, grain, grain.mass,
                                 dt, fi);
    if (box.width - xi.x() < grain.radius)
      detail::accumulate_contact(Vec2(-1, 0), grain.radius - (box.width - xi.x()), vi,
                                 grain, grain.mass, dt, fi);
    force.row(i) += fi.transpose();
  }

  SimState next = state;
  next.normal_velocities = vel + (dt / grain.mass) * force;
  next.frame.normal_positions = pos + dt * next.normal_velocities;
  next.box_velocity.x() += box_accel * dt;
  next.frame.box_position.x() += next.box_velocity.x() * dt;
  next.frame.time_index = state.frame.time_index + 1;

  if (!next.frame.normal_positions.allFinite())
    throw NumericError("simulation diverged at time index " +
                       std::to_string(next.frame.time_index));
  return next;
}

/// n_frames frames sampled at dt_frame; integration at dt_frame/substeps.
/// v_max_bound is the speed against which the Courant-style bound is checked.
inline std::vector<ParticleFrame> rollout(const SimState& initial,
                                          const BoxMotion& motion, int n_frames,
                                          int substeps, double dt_frame,
                                          const GrainParams& grain, const BoxSpec& box,
                                          double v_max_bound = 2.0) {
  if (substeps < 1) throw ConfigError("substeps must be >= 1");
  if (n_frames < 1) throw ConfigError("n_frames must be >= 1");
  motion.validate();
  const double dt = dt_frame / substeps;
  if (!stability_check(v_max_bound, dt, 2.0 * grain.radius))
    throw ConfigError("substep dt violates the stability condition");

  std::vector<ParticleFrame> frames;
  frames.reserve(static_cast<size_t>(n_frames));
  SimState state = initial;
  state.frame.time_index = 0;
  frames.push_back(state.frame);
  for (int k = 1; k < n_frames; ++k) {
    const double a = motion.accel_at(k - 1, dt_frame);
    for (int s = 0; s < substeps; ++s) state = step(state, a, dt, grain, box);
    state.frame.time_index = k;
    frames.push_back(state.frame);
  }
  return frames;
}

/// Kinetic + gravitational + elastic contact energy of the grains.
inline double mechanical_energy(const SimState& state, const GrainParams& grain,
                                const BoxSpec& box) {
  const Mat& pos = state.frame.normal_positions;
  const Eigen::Index n = pos.rows();
  double e = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    e += 0.5 * grain.mass * state.normal_velocities.row(i).squaredNorm();
    e += grain.mass * grain.gravity * pos(i, 1);
  }
  const double diameter = 2.0 * grain.radius;
  const double k = grain.normal_stiffness;
  auto spring = [&](double overlap) { return 0.5 * k * overlap * overlap; };
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double dist = (pos.row(i) - pos.row(j)).norm();
      if (dist < diameter) e += spring(diameter - dist);
    }
    if (pos(i, 1) < grain.radius) e += spring(grain.radius - pos(i, 1));
    if (pos(i, 0) < grain.radius) e += spring(grain.radius - pos(i, 0));
    if (box.width - pos(i, 0) < grain.radius)
      e += spring(grain.radius - (box.width - pos(i, 0)));
  }
  return e;
}

// ---------------------------------------------------------------------------
// Per-example serialization: frames.csv + meta.json

struct ExampleMeta {
  GrainParams grain;
  BoxSpec box;
  BoxMotion motion;
  std::uint64_t seed = 0;
  double dt_frame = 1.0 / 60.0;
  int substeps = 20;
};

inline void save_rollout(const io::fs::path& dir, const std::vector<ParticleFrame>& frames,
                         const ExampleMeta& meta) {
  io::Csv csv;
  csv.header = {"time_index", "particle_id", "type", "x", "y", "box_x", "box_y"};
  for (const auto& f : frames) {
    const std::string bx = io::fmt_double(f.box_position.x());
    const std::string by = io::fmt_double(f.box_position.y());
    const std::string t = std::to_string(f.time_index);
    for (Eigen::Index i = 0; i < f.num_normal(); ++i)
      csv.rows.push_back({t, std::to_string(i), "normal", io::fmt_double(f.normal_positions(i, 0)),
                          io::fmt_double(f.normal_positions(i, 1)), bx, by});
    for (Eigen::Index i = 0; i < f.num_rigid(); ++i)
      csv.rows.push_back({t, std::to_string(f.num_normal() + i), "rigid",
                          io::fmt_double(f.rigid_positions(i, 0)),
                          io::fmt_double(f.rigid_positions(i, 1)), bx, by});
  }
  io::write_csv(dir / "frames.csv", csv);

  io::json j;
  j["grain"] = {{"radius", meta.grain.radius},
                {"mass", meta.grain.mass},
                {"normal_stiffness", meta.grain.normal_stiffness},
                {"normal_damping", meta.grain.normal_damping},
                {"friction_coeff", meta.grain.friction_coeff},
                {"gravity", meta.grain.gravity}};
  j["box"] = {{"width", meta.box.width},
              {"wall_height", meta.box.wall_height},
              {"initial_position", {meta.box.initial_position.x(), meta.box.initial_position.y()}},
              {"wall_particle_spacing", meta.box.wall_particle_spacing}};
  j["motion"] = {{"kind", meta.motion.kind == BoxMotion::Kind::sinusoid
                              ? "sinusoid"
                              : "acceleration_sequence"},
                 {"amplitude", meta.motion.amplitude},
                 {"frequency", meta.motion.frequency},
                 {"frequency_cap", meta.motion.frequency_cap},
                 {"accelerations", meta.motion.accelerations}};
  j["seed"] = meta.seed;
  j["dt_frame"] = meta.dt_frame;
  j["substeps"] = meta.substeps;
  io::write_json(dir / "meta.json", j);
}

struct LoadedExample {
  std::vector<ParticleFrame> frames;
  ExampleMeta meta;
};

inline LoadedExample load_rollout(const io::fs::path& dir) {
  LoadedExample ex;
  const io::json j = io::read_json(dir / "meta.json");
  ex.meta.grain.radius = j["grain"]["radius"].get<double>();
  ex.meta.grain.mass = j["grain"]["mass"].get<double>();
  ex.meta.grain.normal_stiffness = j["grain"]["normal_stiffness"].get<double>();
  ex.meta.grain.normal_damping = j["grain"]["normal_damping"].get<double>();
  ex.meta.grain.friction_coeff = j["grain"]["friction_coeff"].get<double>();
  ex.meta.grain.gravity = j["grain"]["gravity"].get<double>();
  ex.meta.box.width = j["box"]["width"].get<double>();
  ex.meta.box.wall_height = j["box"]["wall_height"].get<double>();
  ex.meta.box.initial_position =
      Vec2(j["box"]["initial_position"][0].get<double>(), j["box"]["initial_position"][1].get<double>());
  ex.meta.box.wall_particle_spacing = j["box"]["wall_particle_spacing"].get<double>();
  ex.meta.motion.kind = j["motion"]["kind"].get<std::string>() == "sinusoid"
                            ? BoxMotion::Kind::sinusoid
                            : BoxMotion::Kind::acceleration_sequence;
  ex.meta.motion.amplitude = j["motion"]["amplitude"].get<double>();
  ex.meta.motion.frequency = j["motion"]["frequency"].get<double>();
  ex.meta.motion.frequency_cap = j["motion"]["frequency_cap"].get<double>();
  ex.meta.motion.accelerations = j["motion"]["accelerations"].get<std::vector<double>>();
  ex.meta.seed = j["seed"].get<std::uint64_t>();
  ex.meta.dt_frame = j["dt_frame"].get<double>();
  ex.meta.substeps = j["substeps"].get<int>();

  const io::Csv csv = io::read_csv(dir / "frames.csv");
  if (csv.header != std::vector<std::string>{"time_index", "particle_id", "type", "x", "y",
                                             "box_x", "box_y"})
    throw ShapeError("unexpected frames.csv header in " + dir.string());

  std::map<int, std::vector<std::array<double, 4>>> normal_by_frame;  // x,y,bx,by
  std::map<int, std::vector<std::array<double, 2>>> rigid_by_frame;
  for (const auto& row : csv.rows) {
    if (row.size() != 7) throw ShapeError("bad frames.csv row in " + dir.string());
    const int t = std::stoi(row[0]);
    const double x = io::parse_double(row[3]);
    const double y = io::parse_double(row[4]);
    if (row[2] == "normal")
      normal_by_frame[t].push_back({x, y, io::parse_double(row[5]), io::parse_double(row[6])});
    else
      rigid_by_frame[t].push_back({x, y});
  }
  for (const auto& [t, pts] : normal_by_frame) {
    ParticleFrame f;
    f.time_index = t;
    f.normal_positions.resize(static_cast<Eigen::Index>(pts.size()), 2);
    for (Eigen::Index i = 0; i < f.normal_positions.rows(); ++i) {
      f.normal_positions(i, 0) = pts[static_cast<size_t>(i)][0];
      f.normal_positions(i, 1) = pts[static_cast<size_t>(i)][1];
    }
    if (!pts.empty()) f.box_position = Vec2(pts[0][2], pts[0][3]);
    const auto& rp = rigid_by_frame[t];
    f.rigid_positions.resize(static_cast<Eigen::Index>(rp.size()), 2);
    for (Eigen::Index i = 0; i < f.rigid_positions.rows(); ++i) {
      f.rigid_positions(i, 0) = rp[static_cast<size_t>(i)][0];
      f.rigid_positions(i, 1) = rp[static_cast<size_t>(i)][1];
    }
    ex.frames.push_back(std::move(f));
  }
  return ex;
}

}  // namespace granular::sim
