#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace linsem {

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias correction over a fixed list of parameter blocks.
class Adam {
 public:
  explicit Adam(std::size_t num_params, AdamParams params = {})
      : params_(params), m_(num_params, 0.0), v_(num_params, 0.0) {}

  std::size_t steps() const { return t_; }

  /// One update. `params` and `grads` are matching lists of blocks whose total
  /// size equals the size given at construction.
  void step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads,
            double lr) {
    if (params.size() != grads.size()) throw std::invalid_argument("Adam: block count mismatch");
    ++t_;
    const double c1 = 1.0 - std::pow(params_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(params_.beta2, static_cast<double>(t_));
    std::size_t off = 0;
    for (std::size_t b = 0; b < params.size(); ++b) {
      std::span<double> p = params[b];
      std::span<const double> g = grads[b];
      if (p.size() != g.size() || off + p.size() > m_.size()) {
        throw std::invalid_argument("Adam: block size mismatch");
      }
      for (std::size_t i = 0; i < p.size(); ++i, ++off) {
        m_[off] = params_.beta1 * m_[off] + (1.0 - params_.beta1) * g[i];
        v_[off] = params_.beta2 * v_[off] + (1.0 - params_.beta2) * g[i] * g[i];
        const double mhat = m_[off] / c1;
        const double vhat = v_[off] / c2;
        p[i] -= lr * mhat / (std::sqrt(vhat) + params_.epsilon);
      }
    }
    if (off != m_.size()) throw std::invalid_argument("Adam: parameter count changed");
  }

  void step(std::span<double> params, std::span<const double> grads, double lr) {
    const std::span<double> p[] = {params};
    const std::span<const double> g[] = {grads};
    step(std::span<const std::span<double>>(p), std::span<const std::span<const double>>(g), lr);
  }

 private:
  AdamParams params_;
  std::vector<double> m_;
  std::vector<double> v_;
  std::size_t t_ = 0;
};

}  // namespace linsem
