#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "linsem/generator.hpp"
#include "linsem/tensor.hpp"
#include "linsem/upsample.hpp"

namespace linsem {

/// Linear semantic extractor: one (m, c_i) matrix per generator layer.
struct ProbeWeights {
  int num_classes = 0;
  std::vector<int> layer_depths;
  std::vector<Matrix> layers;
  std::vector<std::string> class_names;
  UpsampleMode upsample = UpsampleMode::kBilinear;

  static ProbeWeights zeros(int num_classes, const std::vector<int>& depths) {
    ProbeWeights w;
    w.num_classes = num_classes;
    w.layer_depths = depths;
    for (int c : depths) w.layers.emplace_back(num_classes, c);
    w.class_names = default_class_names(num_classes);
    return w;
  }

  int total_depth() const {
    int n = 0;
    for (int c : layer_depths) n += c;
    return n;
  }
  std::size_t parameter_count() const {
    return static_cast<std::size_t>(num_classes) * total_depth();
  }

  /// The (m, n) matrix [T_1 ... T_{N-1}].
  Matrix concatenated() const {
    Matrix t(num_classes, total_depth());
    int off = 0;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      for (int k = 0; k < num_classes; ++k)
        for (int c = 0; c < layer_depths[i]; ++c) t(k, off + c) = layers[i](k, c);
      off += layer_depths[i];
    }
    return t;
  }

  /// Rounds every weight to the nearest float32 so the weights survive the
  /// float32 archive format unchanged.
  void round_to_float() {
    for (Matrix& t : layers)
      for (double& v : t.data()) v = static_cast<double>(static_cast<float>(v));
  }

  void validate() const {
    if (num_classes < 2) throw ShapeError("probe: num_classes must be >= 2");
    if (layers.size() != layer_depths.size()) throw ShapeError("probe: layer count mismatch");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].rows() != num_classes || layers[i].cols() != layer_depths[i]) {
        throw ShapeError("probe: matrix " + std::to_string(i) + " has wrong shape");
      }
    }
  }

  ProbeWeights& operator+=(const ProbeWeights& o) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      auto a = layers[i].data();
      auto b = o.layers[i].data();
      for (std::size_t j = 0; j < a.size(); ++j) a[j] += b[j];
    }
    return *this;
  }
  ProbeWeights& operator*=(double s) {
    for (Matrix& t : layers)
      for (double& v : t.data()) v *= s;
    return *this;
  }
};

namespace detail {

inline void check_probe_stack(const ProbeWeights& w, const FeatureStack& f) {
  if (f.layers.size() != w.layers.size()) {
    throw ShapeError("probe has " + std::to_string(w.layers.size()) + " layers, stack has " +
                     std::to_string(f.layers.size()));
  }
  for (std::size_t i = 0; i < f.layers.size(); ++i) {
    if (f.layers[i].channels() != w.layer_depths[i]) {
      throw ShapeError("layer " + std::to_string(i) + " depth " +
                       std::to_string(f.layers[i].channels()) + " != probe depth " +
                       std::to_string(w.layer_depths[i]));
    }
  }
  if (f.image.empty()) throw ShapeError("feature stack has no output image");
}

}  // namespace detail

/// 1x1 convolution: (m, c) matrix applied along the depth axis of (c, h, w).
inline Tensor3 project(const Matrix& t, const Tensor3& x) {
  if (t.cols() != x.channels()) throw ShapeError("project: depth mismatch");
  Tensor3 out(t.rows(), x.height(), x.width());
  for (int k = 0; k < t.rows(); ++k) {
    auto dst = out.channel(k);
    for (int c = 0; c < t.cols(); ++c) {
      const double a = t(k, c);
      if (a == 0.0) continue;
      auto src = x.channel(c);
      for (std::size_t p = 0; p < dst.size(); ++p) dst[p] += a * src[p];
    }
  }
  return out;
}

/// Per-layer semantic maps S_i = T_i x_i at each layer's native resolution.
inline std::vector<Tensor3> lse_layer_logits(const ProbeWeights& w, const FeatureStack& f) {
  detail::check_probe_stack(w, f);
  std::vector<Tensor3> out;
  for (std::size_t i = 0; i < f.layers.size(); ++i) out.push_back(project(w.layers[i], f.layers[i]));
  return out;
}

/// S = sum_i up(T_i x_i): project each layer, then upsample to the image size and sum.
inline Tensor3 lse_forward(const ProbeWeights& w, const FeatureStack& f) {
  detail::check_probe_stack(w, f);
  Tensor3 s(w.num_classes, f.image.height(), f.image.width());
  for (std::size_t i = 0; i < f.layers.size(); ++i) {
    add_upsampled_bilinear(project(w.layers[i], f.layers[i]), s);
  }
  return s;
}

/// X: every layer upsampled to the image size and concatenated along depth (n, h, w).
inline Tensor3 concat_upsampled(const FeatureStack& f) {
  int n = 0;
  for (const Tensor3& x : f.layers) n += x.channels();
  const int h = f.image.height();
  const int wd = f.image.width();
  Tensor3 out(n, h, wd);
  int off = 0;
  for (const Tensor3& x : f.layers) {
    const Tensor3 up = upsample_bilinear(x, h, wd);
    for (int c = 0; c < x.channels(); ++c) {
      auto src = up.channel(c);
      std::copy(src.begin(), src.end(), out.channel(off + c).begin());
    }
    off += x.channels();
  }
  return out;
}

/// S = T X: upsample every layer first, concatenate, then apply the (m, n) matrix.
inline Tensor3 lse_forward_concat(const ProbeWeights& w, const FeatureStack& f) {
  detail::check_probe_stack(w, f);
  return project(w.concatenated(), concat_upsampled(f));
}

struct LseGradients {
  ProbeWeights weights;  // dL/dT_i
  FeatureStack features;  // dL/dx_i (image entry left empty)
};

/// Reverse-mode pass through lse_forward given dL/dS.
inline LseGradients lse_backward(const ProbeWeights& w, const FeatureStack& f, const Tensor3& dlogits,
                                 bool want_weights = true, bool want_features = true) {
  detail::check_probe_stack(w, f);
  LseGradients g;
  if (want_weights) g.weights = ProbeWeights::zeros(w.num_classes, w.layer_depths);
  for (std::size_t i = 0; i < f.layers.size(); ++i) {
    const Tensor3& x = f.layers[i];
    const Tensor3 ds = upsample_bilinear_adjoint(dlogits, x.height(), x.width());
    if (want_weights) {
      Matrix& dt = g.weights.layers[i];
      for (int k = 0; k < w.num_classes; ++k) {
        auto gk = ds.channel(k);
        for (int c = 0; c < x.channels(); ++c) dt(k, c) = dot(gk, x.channel(c));
      }
    }
    if (want_features) {
      Tensor3 dx(x.channels(), x.height(), x.width());
      for (int c = 0; c < x.channels(); ++c) {
        auto dst = dx.channel(c);
        for (int k = 0; k < w.num_classes; ++k) {
          const double a = w.layers[i](k, c);
          if (a == 0.0) continue;
          auto src = ds.channel(k);
          for (std::size_t p = 0; p < dst.size(); ++p) dst[p] += a * src[p];
        }
      }
      g.features.layers.push_back(std::move(dx));
    }
  }
  return g;
}

/// Mean per-pixel cross-entropy between logits (m, h, w) and labels; writes
/// dL/dS into `grad` when given. Uses a max-shifted log-sum-exp.
inline double cross_entropy(const Tensor3& logits, const SemanticMask& labels, Tensor3* grad = nullptr) {
  if (logits.height() != labels.height || logits.width() != labels.width) {
    throw ShapeError("cross_entropy: logits and labels differ in size");
  }
  const int m = logits.channels();
  labels.check_labels(m);
  const std::size_t npix = logits.plane();
  if (grad) *grad = Tensor3(m, logits.height(), logits.width());
  double total = 0.0;
  std::vector<double> e(m);
  const double inv = 1.0 / static_cast<double>(npix);
  for (std::size_t p = 0; p < npix; ++p) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < m; ++k) mx = std::max(mx, logits.data()[k * npix + p]);
    double sum = 0.0;
    for (int k = 0; k < m; ++k) {
      e[k] = std::exp(logits.data()[k * npix + p] - mx);
      sum += e[k];
    }
    const int y = labels.labels[p];
    total += std::log(sum) + mx - logits.data()[y * npix + p];
    if (grad) {
      auto gd = grad->data();
      for (int k = 0; k < m; ++k) gd[k * npix + p] = (e[k] / sum - (k == y ? 1.0 : 0.0)) * inv;
    }
  }
  return total * inv;
}

/// Per-pixel argmax over classes; ties go to the lowest class index.
inline SemanticMask argmax_mask(const Tensor3& logits) {
  SemanticMask out(logits.height(), logits.width());
  const std::size_t npix = logits.plane();
  for (std::size_t p = 0; p < npix; ++p) {
    int best = 0;
    double bv = logits.data()[p];
    for (int k = 1; k < logits.channels(); ++k) {
      const double v = logits.data()[k * npix + p];
      if (v > bv) {
        bv = v;
        best = k;
      }
    }
    out.labels[p] = best;
  }
  return out;
}

/// A segmenter computed from feature maps whose logits can be differentiated
/// with respect to those feature maps.
class SemanticPredictor : public Segmenter {
 public:
  bool differentiable() const override { return true; }
  SemanticMask segment(const LatentVector&, const FeatureStack& f) const override {
    return argmax_mask(logits(f));
  }
  virtual Tensor3 logits(const FeatureStack& f) const = 0;
  /// dL/d(stack) given dL/d(logits).
  virtual FeatureStack backward(const FeatureStack& f, const Tensor3& dlogits) const = 0;
};

class LsePredictor final : public SemanticPredictor {
 public:
  explicit LsePredictor(std::shared_ptr<const ProbeWeights> w) : w_(std::move(w)) {}
  explicit LsePredictor(ProbeWeights w) : w_(std::make_shared<const ProbeWeights>(std::move(w))) {}

  int num_classes() const override { return w_->num_classes; }
  Tensor3 logits(const FeatureStack& f) const override { return lse_forward(*w_, f); }
  FeatureStack backward(const FeatureStack& f, const Tensor3& dlogits) const override {
    return lse_backward(*w_, f, dlogits, false, true).features;
  }
  const ProbeWeights& weights() const { return *w_; }

 private:
  std::shared_ptr<const ProbeWeights> w_;
};

}  // namespace linsem
