#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "linsem/generator.hpp"
#include "linsem/probe.hpp"
#include "linsem/rng.hpp"
#include "linsem/tensor.hpp"
#include "linsem/upsample.hpp"

namespace linsem {

/// 3x3 convolution, stride 1, zero padding. Weights are laid out (out, in, 3, 3).
struct Conv3x3 {
  int in = 0;
  int out = 0;
  std::vector<double> weight;
  std::vector<double> bias;

  Conv3x3() = default;
  Conv3x3(int in_ch, int out_ch)
      : in(in_ch), out(out_ch), weight(static_cast<std::size_t>(in_ch) * out_ch * 9, 0.0),
        bias(out_ch, 0.0) {}

  double& w(int o, int i, int ky, int kx) {
    return weight[((static_cast<std::size_t>(o) * in + i) * 3 + ky) * 3 + kx];
  }
  double w(int o, int i, int ky, int kx) const {
    return weight[((static_cast<std::size_t>(o) * in + i) * 3 + ky) * 3 + kx];
  }
  std::size_t parameter_count() const { return weight.size() + bias.size(); }

  Tensor3 forward(const Tensor3& x) const {
    if (x.channels() != in) throw ShapeError("conv3x3: input depth mismatch");
    const int h = x.height();
    const int wd = x.width();
    Tensor3 y(out, h, wd);
    for (int o = 0; o < out; ++o) {
      for (double& v : y.channel(o)) v = bias[o];
      for (int i = 0; i < in; ++i) {
        for (int ky = 0; ky < 3; ++ky) {
          for (int kx = 0; kx < 3; ++kx) {
            const double a = w(o, i, ky, kx);
            if (a == 0.0) continue;
            const int x0 = std::max(0, 1 - kx);
            const int x1 = std::min(wd, wd + 1 - kx);
            for (int r = std::max(0, 1 - ky); r < std::min(h, h + 1 - ky); ++r) {
              double* dst = y.ptr(o, r, 0);
              const double* src = x.ptr(i, r + ky - 1, 0);
              for (int c = x0; c < x1; ++c) dst[c] += a * src[c + kx - 1];
            }
          }
        }
      }
    }
    return y;
  }

  /// Accumulates weight/bias gradients into `grad` and returns dL/dx.
  Tensor3 backward(const Tensor3& x, const Tensor3& dy, Conv3x3& grad, bool want_input = true) const {
    const int h = x.height();
    const int wd = x.width();
    Tensor3 dx;
    if (want_input) dx = Tensor3(in, h, wd);
    for (int o = 0; o < out; ++o) {
      double bsum = 0.0;
      for (double v : dy.channel(o)) bsum += v;
      grad.bias[o] += bsum;
      for (int i = 0; i < in; ++i) {
        for (int ky = 0; ky < 3; ++ky) {
          for (int kx = 0; kx < 3; ++kx) {
            const int x0 = std::max(0, 1 - kx);
            const int x1 = std::min(wd, wd + 1 - kx);
            const double a = w(o, i, ky, kx);
            double acc = 0.0;
            for (int r = std::max(0, 1 - ky); r < std::min(h, h + 1 - ky); ++r) {
              const double* g = dy.ptr(o, r, 0);
              const double* src = x.ptr(i, r + ky - 1, 0);
              for (int c = x0; c < x1; ++c) acc += g[c] * src[c + kx - 1];
              if (want_input && a != 0.0) {
                double* d = dx.ptr(i, r + ky - 1, 0);
                for (int c = x0; c < x1; ++c) d[c + kx - 1] += a * g[c];
              }
            }
            grad.w(o, i, ky, kx) += acc;
          }
        }
      }
    }
    return dx;
  }
};

enum class NseVariant { kNse1, kNse2 };

inline std::string_view to_string(NseVariant v) { return v == NseVariant::kNse1 ? "nse1" : "nse2"; }

inline NseVariant parse_nse_variant(std::string_view s) {
  if (s == "nse1") return NseVariant::kNse1;
  if (s == "nse2") return NseVariant::kNse2;
  throw std::invalid_argument("unknown NSE variant '" + std::string(s) + "'");
}

/// Nonlinear semantic extractor parameters.
///
/// NSE-1: for every generator layer three 3x3 convolutions with ReLU between
/// them map x_i to m channels; the heads are bilinearly upsampled and summed.
/// Convolutions are stored layer-major: convs[3 * i + j].
///
/// NSE-2: an embedding convolution per layer (convs[0 .. L-1]), a refinement
/// convolution per layer after the first (convs[L .. 2L-2]) and an output
/// convolution (convs[2L-1]). The hidden map is doubled with nearest
/// upsampling, refined, merged with the next layer's embedding, and finally
/// projected to m channels.
struct NseWeights {
  NseVariant variant = NseVariant::kNse1;
  int num_classes = 0;
  int hidden = 64;
  std::vector<int> layer_depths;
  std::vector<int> layer_resolutions;
  std::vector<Conv3x3> convs;

  int num_layers() const { return static_cast<int>(layer_depths.size()); }

  static NseWeights zeros(NseVariant variant, int num_classes, const std::vector<LayerInfo>& layers,
                          int hidden = 64) {
    NseWeights w;
    w.variant = variant;
    w.num_classes = num_classes;
    w.hidden = hidden;
    for (const LayerInfo& l : layers) {
      w.layer_depths.push_back(l.depth);
      w.layer_resolutions.push_back(l.resolution);
    }
    const int n = w.num_layers();
    if (variant == NseVariant::kNse1) {
      for (int i = 0; i < n; ++i) {
        w.convs.emplace_back(w.layer_depths[i], hidden);
        w.convs.emplace_back(hidden, hidden);
        w.convs.emplace_back(hidden, num_classes);
      }
    } else {
      for (int i = 1; i < n; ++i) {
        if (w.layer_resolutions[i] != 2 * w.layer_resolutions[i - 1]) {
          throw ShapeError("NSE-2 needs resolutions that double per layer");
        }
      }
      for (int i = 0; i < n; ++i) w.convs.emplace_back(w.layer_depths[i], hidden);
      for (int i = 1; i < n; ++i) w.convs.emplace_back(hidden, hidden);
      w.convs.emplace_back(hidden, num_classes);
    }
    return w;
  }

  /// He-normal weights from `seed`, zero biases.
  static NseWeights initialized(NseVariant variant, int num_classes,
                                const std::vector<LayerInfo>& layers, std::uint64_t seed,
                                int hidden = 64) {
    NseWeights w = zeros(variant, num_classes, layers, hidden);
    Rng rng(derive_seed(seed, "nse-init"));
    for (Conv3x3& c : w.convs) {
      const double sd = std::sqrt(2.0 / (9.0 * c.in));
      for (double& v : c.weight) v = sd * rng.normal();
    }
    return w;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Conv3x3& c : convs) n += c.parameter_count();
    return n;
  }

  NseWeights zeros_like() const {
    NseWeights g = *this;
    for (Conv3x3& c : g.convs) {
      std::fill(c.weight.begin(), c.weight.end(), 0.0);
      std::fill(c.bias.begin(), c.bias.end(), 0.0);
    }
    return g;
  }

  void round_to_float() {
    for (Conv3x3& c : convs) {
      for (double& v : c.weight) v = static_cast<double>(static_cast<float>(v));
      for (double& v : c.bias) v = static_cast<double>(static_cast<float>(v));
    }
  }

  void check_stack(const FeatureStack& f) const {
    if (static_cast<int>(f.layers.size()) != num_layers()) throw ShapeError("NSE: layer count mismatch");
    for (int i = 0; i < num_layers(); ++i) {
      if (f.layers[i].channels() != layer_depths[i] || f.layers[i].height() != layer_resolutions[i]) {
        throw ShapeError("NSE: layer " + std::to_string(i) + " shape mismatch");
      }
    }
    if (f.image.empty()) throw ShapeError("NSE: feature stack has no output image");
  }
};

namespace detail {

inline Tensor3 relu(Tensor3 t) {
  for (double& v : t.data()) v = v > 0.0 ? v : 0.0;
  return t;
}

inline Tensor3 relu_backward(const Tensor3& activated, Tensor3 grad) {
  auto a = activated.data();
  auto g = grad.data();
  for (std::size_t i = 0; i < g.size(); ++i)
    if (a[i] <= 0.0) g[i] = 0.0;
  return grad;
}

}  // namespace detail

struct NseGradients {
  NseWeights weights;
  FeatureStack features;  // image entry left empty
};

/// Forward pass; when `grad` is given, also backpropagates dL/dS through the network.
inline Tensor3 nse_run(const NseWeights& w, const FeatureStack& f, const Tensor3* dlogits,
                       NseGradients* grad, bool want_features) {
  w.check_stack(f);
  const int n = w.num_layers();
  const int h = f.image.height();
  const int wd = f.image.width();
  Tensor3 s(w.num_classes, h, wd);
  if (grad) {
    grad->weights = w.zeros_like();
    grad->features = FeatureStack{};
    if (want_features) {
      for (const Tensor3& x : f.layers) grad->features.layers.emplace_back(x.channels(), x.height(), x.width());
    }
  }

  if (w.variant == NseVariant::kNse1) {
    for (int i = 0; i < n; ++i) {
      const Conv3x3& c0 = w.convs[3 * i];
      const Conv3x3& c1 = w.convs[3 * i + 1];
      const Conv3x3& c2 = w.convs[3 * i + 2];
      const Tensor3 a0 = detail::relu(c0.forward(f.layers[i]));
      const Tensor3 a1 = detail::relu(c1.forward(a0));
      const Tensor3 head = c2.forward(a1);
      add_upsampled_bilinear(head, s);
      if (grad && dlogits) {
        const Tensor3 dhead = upsample_bilinear_adjoint(*dlogits, head.height(), head.width());
        Tensor3 da1 = detail::relu_backward(a1, c2.backward(a1, dhead, grad->weights.convs[3 * i + 2]));
        Tensor3 da0 = detail::relu_backward(a0, c1.backward(a0, da1, grad->weights.convs[3 * i + 1]));
        Tensor3 dx = c0.backward(f.layers[i], da0, grad->weights.convs[3 * i], want_features);
        if (want_features) grad->features.layers[i] = std::move(dx);
      }
    }
    return s;
  }

  // NSE-2
  std::vector<Tensor3> hidden(n);   // post-ReLU hidden map per layer
  std::vector<Tensor3> doubled(n);  // nearest-upsampled previous hidden map (i >= 1)
  hidden[0] = detail::relu(w.convs[0].forward(f.layers[0]));
  for (int i = 1; i < n; ++i) {
    doubled[i] = upsample_nearest(hidden[i - 1], 2);
    Tensor3 pre = w.convs[n + i - 1].forward(doubled[i]);
    pre += w.convs[i].forward(f.layers[i]);
    hidden[i] = detail::relu(std::move(pre));
  }
  const Conv3x3& out_conv = w.convs[2 * n - 1];
  const Tensor3 out = out_conv.forward(hidden[n - 1]);
  add_upsampled_bilinear(out, s);
  if (grad && dlogits) {
    const Tensor3 dout = upsample_bilinear_adjoint(*dlogits, out.height(), out.width());
    Tensor3 dh = out_conv.backward(hidden[n - 1], dout, grad->weights.convs[2 * n - 1]);
    for (int i = n - 1; i >= 0; --i) {
      const Tensor3 dpre = detail::relu_backward(hidden[i], std::move(dh));
      Tensor3 dx = w.convs[i].backward(f.layers[i], dpre, grad->weights.convs[i], want_features);
      if (want_features) grad->features.layers[i] = std::move(dx);
      if (i > 0) {
        const Tensor3 dd = w.convs[n + i - 1].backward(doubled[i], dpre, grad->weights.convs[n + i - 1]);
        dh = upsample_nearest_adjoint(dd, 2);
      }
    }
  }
  return s;
}

inline Tensor3 nse_forward(const NseWeights& w, const FeatureStack& f) {
  return nse_run(w, f, nullptr, nullptr, false);
}

inline NseGradients nse_backward(const NseWeights& w, const FeatureStack& f, const Tensor3& dlogits,
                                 bool want_features = true) {
  NseGradients g;
  nse_run(w, f, &dlogits, &g, want_features);
  return g;
}

class NsePredictor final : public SemanticPredictor {
 public:
  explicit NsePredictor(std::shared_ptr<const NseWeights> w) : w_(std::move(w)) {}
  explicit NsePredictor(NseWeights w) : w_(std::make_shared<const NseWeights>(std::move(w))) {}

  int num_classes() const override { return w_->num_classes; }
  Tensor3 logits(const FeatureStack& f) const override { return nse_forward(*w_, f); }
  FeatureStack backward(const FeatureStack& f, const Tensor3& dlogits) const override {
    return nse_backward(*w_, f, dlogits, true).features;
  }

 private:
  std::shared_ptr<const NseWeights> w_;
};

}  // namespace linsem
