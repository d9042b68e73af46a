#pragma once

// Small dense MLPs with hand-written reverse mode. Inputs and activations
// are column-per-item matrices so batches of nodes/edges go through as one
// GEMM. Hidden layers use tanh (the learned dynamics must stay smooth for
// finite-difference checks and for the trajectory optimizer); the output
// layer is linear.

#include <cstdint>
#include <random>
#include <vector>

#include "granular/types.hpp"

namespace granular::nn {

struct Linear {
  Mat W;  // out x in
  Mat b;  // out x 1
};

struct MlpCache {
  std::vector<Mat> activations;  // activations[0] = input, [l+1] = output of layer l
};

struct Mlp {
  std::vector<Linear> layers;

  static Mlp create(int in_dim, const std::vector<int>& hidden, int out_dim,
                    std::mt19937_64& rng) {
    Mlp mlp;
    std::vector<int> dims;
    dims.push_back(in_dim);
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(out_dim);
    for (size_t l = 0; l + 1 < dims.size(); ++l) {
      Linear lin;
      const double bound = std::sqrt(6.0 / (dims[l] + dims[l + 1]));
      std::uniform_real_distribution<double> u(-bound, bound);
      lin.W.resize(dims[l + 1], dims[l]);
      for (Eigen::Index r = 0; r < lin.W.rows(); ++r)
        for (Eigen::Index c = 0; c < lin.W.cols(); ++c) lin.W(r, c) = u(rng);
      lin.b = Mat::Zero(dims[l + 1], 1);
      mlp.layers.push_back(std::move(lin));
    }
    return mlp;
  }

  static Mlp zeros_like(const Mlp& other) {
    Mlp mlp;
    for (const auto& lin : other.layers)
      mlp.layers.push_back({Mat::Zero(lin.W.rows(), lin.W.cols()),
                            Mat::Zero(lin.b.rows(), 1)});
    return mlp;
  }

  int in_dim() const { return static_cast<int>(layers.front().W.cols()); }
  int out_dim() const { return static_cast<int>(layers.back().W.rows()); }

  /// x: in_dim x n_items. Returns out_dim x n_items.
  Mat forward(const Mat& x, MlpCache* cache = nullptr) const {
    Mat a = x;
    if (cache) {
      cache->activations.clear();
      cache->activations.push_back(a);
    }
    for (size_t l = 0; l < layers.size(); ++l) {
      Mat z = (layers[l].W * a).colwise() + layers[l].b.col(0);
      a = (l + 1 < layers.size()) ? z.array().tanh().matrix() : std::move(z);
      if (cache) cache->activations.push_back(a);
    }
    return a;
  }

  /// Reverse step: dy is the adjoint of the output. Returns the adjoint of
  /// the input; accumulates parameter adjoints into grad when given.
  ///
  /// dy may stack several adjoint seeds side by side (cols = k * cached
  /// cols, seed-major); the whole stack then flows through one set of
  /// GEMMs. Parameter accumulation only makes sense for a single seed.
  Mat backward(const MlpCache& cache, const Mat& dy, Mlp* grad = nullptr) const {
    const Eigen::Index n = cache.activations[0].cols();
    const Eigen::Index k = n > 0 ? dy.cols() / n : 1;
    Mat d = dy;
    for (size_t l = layers.size(); l-- > 0;) {
      if (l + 1 < layers.size()) {
        const Mat& act = cache.activations[l + 1];
        if (k == 1)
          d = (d.array() * (1.0 - act.array().square())).matrix();
        else
          d = (d.array() * (1.0 - act.array().square()).replicate(1, k)).matrix();
      }
      if (grad) {
        if (k != 1) throw ShapeError("parameter adjoints need a single seed");
        grad->layers[l].W.noalias() += d * cache.activations[l].transpose();
        grad->layers[l].b.col(0) += d.rowwise().sum();
      }
      d = (layers[l].W.transpose() * d).eval();
    }
    return d;
  }
};

template <class F>
void visit_tensors(Mlp& mlp, F&& f) {
  for (auto& lin : mlp.layers) {
    f(lin.W);
    f(lin.b);
  }
}

template <class F>
void visit_tensors(const Mlp& mlp, F&& f) {
  for (const auto& lin : mlp.layers) {
    f(lin.W);
    f(lin.b);
  }
}

}  // namespace granular::nn
