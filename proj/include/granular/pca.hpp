#pragma once

// Subspace reduction of particle trajectories. Columns of the data matrix
// are per-particle flattened trajectories; each pair of rows is one
// observation (x-row above y-row). The loading matrix maps the n_n physical
// particles to n_nr "reduced particles", one per retained mode.

#include <algorithm>
#include <numeric>
#include <vector>

#include <Eigen/Eigenvalues>

#include "granular/io.hpp"
#include "granular/sim.hpp"
#include "granular/types.hpp"

namespace granular::pca {

struct DataMatrix {
  Mat values;             // (d*m_o) x n_n
  int dim = 2;            // d
  int n_observations = 0; // m_o

  Eigen::Index n_particles() const { return values.cols(); }
};

struct PcaBasis {
  Mat loading;      // n_n x n_nr, orthonormal columns
  Vec mean;         // n_n (stored as a row vector conceptually)
  Vec eigenvalues;  // n_n, sorted descending
  int n_reduced = 0;

  Eigen::Index n_particles() const { return loading.rows(); }
};

/// Stack examples (example-major, then time-major); per frame the x-row of
/// all normal particles precedes the y-row. Rigid particles are excluded.
inline DataMatrix assemble_data_matrix(const std::vector<std::vector<sim::ParticleFrame>>& dataset) {
  DataMatrix dm;
  Eigen::Index n_n = -1;
  int m_o = 0;
  for (const auto& example : dataset) {
    for (const auto& frame : example) {
      if (n_n < 0) n_n = frame.num_normal();
      if (frame.num_normal() != n_n)
        throw ShapeError("inconsistent normal-particle count across examples");
      ++m_o;
    }
  }
  if (n_n < 0) n_n = 0;
  dm.n_observations = m_o;
  dm.values.resize(2 * static_cast<Eigen::Index>(m_o), n_n);
  Eigen::Index r = 0;
  for (const auto& example : dataset)
    for (const auto& frame : example) {
      dm.values.row(r++) = frame.normal_positions.col(0).transpose();
      dm.values.row(r++) = frame.normal_positions.col(1).transpose();
    }
  return dm;
}

/// Covariance eigen-decomposition. The covariance divides by m_o (the
/// observation count), not by the row count. Each eigenvector is scaled so
/// its largest-magnitude entry is positive; eigenvalue ties keep the
/// solver's original ordering.
inline PcaBasis fit(const DataMatrix& X, int n_nr) {
  const Eigen::Index n_n = X.values.cols();
  if (n_nr < 1 || n_nr > n_n)
    throw ConfigError("n_nr must lie in [1, n_n]");
  if (X.n_observations < 1) throw ConfigError("empty data matrix");

  PcaBasis basis;
  basis.n_reduced = n_nr;
  basis.mean = X.values.colwise().mean().transpose();
  const Mat centered = X.values.rowwise() - basis.mean.transpose();
  Mat S = (centered.transpose() * centered) / static_cast<double>(X.n_observations);
  S = 0.5 * (S + S.transpose());

  Eigen::SelfAdjointEigenSolver<Mat> es(S);
  if (es.info() != Eigen::Success) throw NumericError("eigen-decomposition failed");
  const Vec lam = es.eigenvalues();   // ascending
  const Mat vecs = es.eigenvectors();

  std::vector<Eigen::Index> order(static_cast<size_t>(n_n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return lam[a] > lam[b]; });

  basis.eigenvalues.resize(n_n);
  basis.loading.resize(n_n, n_nr);
  for (Eigen::Index k = 0; k < n_n; ++k)
    basis.eigenvalues[k] = std::max(lam[order[static_cast<size_t>(k)]], 0.0);
  for (int k = 0; k < n_nr; ++k) {
    Vec w = vecs.col(order[static_cast<size_t>(k)]);
    Eigen::Index imax = 0;
    w.cwiseAbs().maxCoeff(&imax);
    if (w[imax] < 0) w = -w;
    basis.loading.col(k) = w;
  }
  return basis;
}

/// (X_rows - 1*mu) * W
inline Mat project(const Mat& x_rows, const PcaBasis& basis) {
  if (x_rows.cols() != basis.n_particles())
    throw ShapeError("project: column count does not match the basis");
  return (x_rows.rowwise() - basis.mean.transpose()) * basis.loading;
}

/// Z_rows * W^T + 1*mu
inline Mat reconstruct(const Mat& z_rows, const PcaBasis& basis) {
  if (z_rows.cols() != basis.n_reduced)
    throw ShapeError("reconstruct: column count does not match the basis");
  return (z_rows * basis.loading.transpose()).rowwise() + basis.mean.transpose();
}

struct EnergyCurve {
  Vec cumulative;          // entry i: sum of the first i+1 eigenvalues / total
  bool degenerate = false; // all-zero spectrum
};

inline EnergyCurve energy_curve(const PcaBasis& basis) {
  EnergyCurve curve;
  const Eigen::Index n = basis.eigenvalues.size();
  if (n == 0) throw ConfigError("energy_curve: no eigenvalues in basis");
  curve.cumulative.resize(n);
  const double total = basis.eigenvalues.sum();
  if (total <= 0) {
    curve.cumulative.setOnes();
    curve.degenerate = true;
    return curve;
  }
  double acc = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    acc += basis.eigenvalues[i];
    curve.cumulative[i] = acc / total;
  }
  curve.cumulative[n - 1] = 1.0;
  return curve;
}

/// One frame of normal-particle positions (n_n x 2) to one reduced frame
/// (n_nr x 2): the frame's x-row/y-row pair is projected jointly.
inline Mat reduce_frame(const Mat& normal_positions, const PcaBasis& basis) {
  return project(normal_positions.transpose(), basis).transpose();
}

inline Mat reconstruct_frame(const Mat& reduced, const PcaBasis& basis) {
  return reconstruct(reduced.transpose(), basis).transpose();
}

// ---------------------------------------------------------------------------
// Serialization: basis.json + basis_w.csv

inline void save_basis(const io::fs::path& dir, const PcaBasis& basis) {
  io::json j;
  j["n_n"] = basis.n_particles();
  j["n_nr"] = basis.n_reduced;
  j["mean"] = io::vec_to_json(basis.mean);
  j["eigenvalues"] = io::vec_to_json(basis.eigenvalues);
  io::write_json(dir / "basis.json", j);

  io::Csv csv;
  for (int k = 1; k <= basis.n_reduced; ++k) csv.header.push_back("mode_" + std::to_string(k));
  for (Eigen::Index r = 0; r < basis.loading.rows(); ++r) {
    std::vector<std::string> row;
    for (Eigen::Index c = 0; c < basis.loading.cols(); ++c)
      row.push_back(io::fmt_double(basis.loading(r, c)));
    csv.rows.push_back(std::move(row));
  }
  io::write_csv(dir / "basis_w.csv", csv);
}

inline PcaBasis load_basis(const io::fs::path& dir) {
  PcaBasis basis;
  const io::json j = io::read_json(dir / "basis.json");
  basis.n_reduced = j["n_nr"].get<int>();
  basis.mean = io::vec_from_json(j["mean"]);
  basis.eigenvalues = io::vec_from_json(j["eigenvalues"]);

  const io::Csv csv = io::read_csv(dir / "basis_w.csv");
  const Eigen::Index n_n = j["n_n"].get<Eigen::Index>();
  if (static_cast<Eigen::Index>(csv.rows.size()) != n_n ||
      static_cast<int>(csv.header.size()) != basis.n_reduced)
    throw ShapeError("basis_w.csv does not match basis.json");
  basis.loading.resize(n_n, basis.n_reduced);
  for (Eigen::Index r = 0; r < n_n; ++r)
    for (int c = 0; c < basis.n_reduced; ++c)
      basis.loading(r, c) = io::parse_double(csv.rows[static_cast<size_t>(r)][static_cast<size_t>(c)]);
  return basis;
}

}  // namespace granular::pca
