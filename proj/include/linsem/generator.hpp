#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "linsem/rng.hpp"
#include "linsem/tensor.hpp"

namespace linsem {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Latent vectors

struct LatentVector {
  std::vector<double> values;

  LatentVector() = default;
  explicit LatentVector(std::vector<double> v) : values(std::move(v)) {}
  static LatentVector zeros(int dim) { return LatentVector(std::vector<double>(dim, 0.0)); }

  int dim() const { return static_cast<int>(values.size()); }
  double norm() const { return std::sqrt(dot(values, values)); }
  bool finite() const {
    for (double v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const LatentVector&, const LatentVector&) = default;
};

/// Standard-normal latent of dimension `dim`, deterministic in `seed`. With a
/// truncation radius rho the vector is norm-clamped to rho * sqrt(dim).
inline LatentVector sample_latent(std::uint64_t seed, int dim,
                                  std::optional<double> truncation = std::nullopt) {
  if (truncation && !(*truncation > 0.0)) {
    throw std::invalid_argument("sample_latent: truncation radius must be positive");
  }
  Rng rng(seed);
  LatentVector z = LatentVector::zeros(dim);
  for (double& v : z.values) v = rng.normal();
  if (truncation) {
    const double limit = *truncation * std::sqrt(static_cast<double>(dim));
    const double n = z.norm();
    if (n > limit) {
      for (double& v : z.values) v *= limit / n;
    }
  }
  return z;
}

// ---------------------------------------------------------------------------
// Configuration

struct GeneratorConfig {
  int latent_dim = 32;
  std::vector<int> layer_resolutions{4, 8, 16, 32, 64};
  std::vector<int> layer_depths{16, 16, 16, 16, 16};
  int num_classes = 5;  // including background
  int num_shapes = 4;
  std::uint64_t seed = 0;
  double nuisance_ratio = 0.5;
  bool linear_mode = true;
  double sharpness = 140.0;  // per unit canvas width; 10-90% edge rise over ~2 px at 64x64
  double noise_scale = 0.05;

  int num_layers() const { return static_cast<int>(layer_resolutions.size()); }
  int output_resolution() const { return layer_resolutions.back(); }
  int total_depth() const {
    int n = 0;
    for (int c : layer_depths) n += c;
    return n;
  }

  void validate() const {
    if (latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
    if (layer_resolutions.empty()) throw ConfigError("layer_resolutions must be non-empty");
    if (layer_depths.size() != layer_resolutions.size()) {
      throw ConfigError("layer_depths and layer_resolutions differ in length");
    }
    if (layer_resolutions.front() < 1) throw ConfigError("resolutions must be positive");
    for (std::size_t i = 1; i < layer_resolutions.size(); ++i) {
      if (layer_resolutions[i] != 2 * layer_resolutions[i - 1]) {
        throw ConfigError("layer_resolutions must double at every layer");
      }
    }
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (num_classes > 255) throw ConfigError("num_classes must fit in 8 bits");
    for (int c : layer_depths) {
      if (c < num_classes) throw ConfigError("every layer depth must be >= num_classes");
    }
    if (num_shapes < 1) throw ConfigError("num_shapes must be >= 1");
    if (!(nuisance_ratio >= 0.0 && nuisance_ratio <= 1.0)) {
      throw ConfigError("nuisance_ratio must lie in [0, 1]");
    }
    if (!(sharpness > 0.0)) throw ConfigError("sharpness must be positive");
    if (!(noise_scale >= 0.0)) throw ConfigError("noise_scale must be non-negative");
  }

  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

namespace detail {

inline std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(v[i]);
  }
  return s;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& value) {
  std::vector<int> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const std::string t = trim(item);
    try {
      std::size_t pos = 0;
      out.push_back(std::stoi(t, &pos));
      if (pos != t.size()) throw std::invalid_argument(t);
    } catch (const std::exception&) {
      throw ConfigError("bad integer in '" + key + "': " + t);
    }
  }
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    T v{};
    if constexpr (std::is_same_v<T, double>) {
      v = std::stod(value, &pos);
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      v = std::stoull(value, &pos);
    } else {
      v = static_cast<T>(std::stoi(value, &pos));
    }
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("bad value for '" + key + "': " + value);
  }
}

}  // namespace detail

/// Serializes to the `key = value` config format read by parse_config.
inline std::string to_config_text(const GeneratorConfig& cfg) {
  std::ostringstream os;
  os << "# linsem synthetic generator\n"
     << "latent_dim = " << cfg.latent_dim << "\n"
     << "layer_resolutions = " << detail::join_ints(cfg.layer_resolutions) << "\n"
     << "layer_depths = " << detail::join_ints(cfg.layer_depths) << "\n"
     << "num_classes = " << cfg.num_classes << "\n"
     << "num_shapes = " << cfg.num_shapes << "\n"
     << "seed = " << cfg.seed << "\n"
     << "nuisance_ratio = " << detail::format_double(cfg.nuisance_ratio) << "\n"
     << "linear_mode = " << (cfg.linear_mode ? "true" : "false") << "\n"
     << "sharpness = " << detail::format_double(cfg.sharpness) << "\n"
     << "noise_scale = " << detail::format_double(cfg.noise_scale) << "\n";
  return os.str();
}

/// Parses `key = value` lines; '#' starts a comment. Keys not present keep
/// their defaults. Unknown keys are an error.
inline GeneratorConfig parse_config(std::string_view text) {
  GeneratorConfig cfg;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    const std::string value = detail::trim(std::string_view(t).substr(eq + 1));
    if (key == "latent_dim") {
      cfg.latent_dim = detail::parse_number<int>(key, value);
    } else if (key == "layer_resolutions") {
      cfg.layer_resolutions = detail::parse_int_list(key, value);
    } else if (key == "layer_depths") {
      cfg.layer_depths = detail::parse_int_list(key, value);
    } else if (key == "num_classes") {
      cfg.num_classes = detail::parse_number<int>(key, value);
    } else if (key == "num_shapes") {
      cfg.num_shapes = detail::parse_number<int>(key, value);
    } else if (key == "seed") {
      cfg.seed = detail::parse_number<std::uint64_t>(key, value);
    } else if (key == "nuisance_ratio") {
      cfg.nuisance_ratio = detail::parse_number<double>(key, value);
    } else if (key == "linear_mode") {
      if (value == "true" || value == "1") {
        cfg.linear_mode = true;
      } else if (value == "false" || value == "0") {
        cfg.linear_mode = false;
      } else {
        throw ConfigError("bad boolean for 'linear_mode': " + value);
      }
    } else if (key == "sharpness") {
      cfg.sharpness = detail::parse_number<double>(key, value);
    } else if (key == "noise_scale") {
      cfg.noise_scale = detail::parse_number<double>(key, value);
    } else {
      throw ConfigError("unknown config key: " + key);
    }
  }
  cfg.validate();
  return cfg;
}

inline GeneratorConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

inline void save_config(const GeneratorConfig& cfg, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write config file: " + path);
  f << to_config_text(cfg);
}

/// Stable 64-bit hash of the canonical config text, as 16 hex digits.
inline std::string config_hash(const GeneratorConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(to_config_text(cfg))));
  return buf;
}

using Rgb = std::array<double, 3>;

/// Ordered per-class colours; index 0 is background.
inline std::vector<Rgb> palette(int num_classes) {
  static constexpr Rgb kBase[] = {{0.05, 0.05, 0.05}, {0.90, 0.20, 0.20}, {0.20, 0.80, 0.30},
                                  {0.20, 0.30, 0.90}, {0.95, 0.85, 0.20}, {0.80, 0.30, 0.85},
                                  {0.20, 0.85, 0.85}, {0.95, 0.55, 0.15}};
  std::vector<Rgb> out;
  for (int k = 0; k < num_classes; ++k) {
    if (k < static_cast<int>(std::size(kBase))) {
      out.push_back(kBase[k]);
    } else {
      // Golden-angle hue walk for larger class counts.
      const double h = std::fmod(k * 0.618033988749895, 1.0) * 6.0;
      const double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
      Rgb c{};
      switch (static_cast<int>(h)) {
        case 0: c = {1, x, 0}; break;
        case 1: c = {x, 1, 0}; break;
        case 2: c = {0, 1, x}; break;
        case 3: c = {0, x, 1}; break;
        case 4: c = {x, 0, 1}; break;
        default: c = {1, 0, x}; break;
      }
      for (double& v : c) v = 0.15 + 0.7 * v;
      out.push_back(c);
    }
  }
  return out;
}

inline std::vector<std::string> default_class_names(int num_classes) {
  std::vector<std::string> names{"background"};
  for (int k = 1; k < num_classes; ++k) names.push_back("shape" + std::to_string(k));
  return names;
}

// ---------------------------------------------------------------------------
// Feature stacks and the adapter interface

/// Per-layer activations x_i with shape (c_i, r_i, r_i) plus the (3, h, w) image.
/// The same layout carries gradients with respect to those tensors.
struct FeatureStack {
  std::vector<Tensor3> layers;
  Tensor3 image;

  static FeatureStack zeros_like(const FeatureStack& f) {
    FeatureStack g;
    for (const Tensor3& x : f.layers) g.layers.emplace_back(x.channels(), x.height(), x.width());
    g.image = Tensor3(f.image.channels(), f.image.height(), f.image.width());
    return g;
  }

  bool finite() const {
    for (const Tensor3& x : layers)
      for (double v : x.data())
        if (!std::isfinite(v)) return false;
    for (double v : image.data())
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const FeatureStack&, const FeatureStack&) = default;
};

struct LayerInfo {
  int depth = 0;
  int resolution = 0;
};

/// Adapter for a layered generator whose feature maps are probed. Implementations
/// must be pure functions of their inputs and support reverse-mode products.
class Generator {
 public:
  virtual ~Generator() = default;

  virtual int latent_dim() const = 0;
  virtual std::vector<LayerInfo> layers() const = 0;
  virtual int output_resolution() const = 0;
  virtual std::string config_hash() const = 0;

  virtual FeatureStack generate(const LatentVector& z) const = 0;

  /// Generation with per-layer noise drawn from `noise_seed`. Generators without
  /// layer noise ignore the seed.
  virtual FeatureStack generate_with_noise(const LatentVector& z, std::uint64_t noise_seed) const {
    (void)noise_seed;
    return generate(z);
  }

  /// Vector-Jacobian product: given dL/d(stack) returns dL/dz. Empty layer or
  /// image tensors in `grad` are treated as zero.
  virtual LatentVector backward(const LatentVector& z, const FeatureStack& grad) const = 0;

  std::vector<int> layer_depths() const {
    std::vector<int> d;
    for (const LayerInfo& l : layers()) d.push_back(l.depth);
    return d;
  }

  void check_latent(const LatentVector& z) const {
    if (z.dim() != latent_dim()) {
      throw ShapeError("latent dimension " + std::to_string(z.dim()) + " != generator's " +
                       std::to_string(latent_dim()));
    }
  }
};

/// Produces a reference semantic mask for a generated sample.
class Segmenter {
 public:
  virtual ~Segmenter() = default;
  virtual int num_classes() const = 0;
  virtual SemanticMask segment(const LatentVector& z, const FeatureStack& f) const = 0;
  virtual bool differentiable() const { return false; }
};

// ---------------------------------------------------------------------------
// Synthetic generator

struct Shape {
  double cx = 0.5;
  double cy = 0.5;
  double radius = 0.0;
  int label = 1;
};

struct Scene {
  std::vector<Shape> shapes;  // painted in order; later shapes occlude earlier ones
};

/// Seeded differentiable generator of layered disc scenes. The latent is mapped
/// by a fixed affine layer to disc centres and radii; each feature layer holds
/// soft class indicators rendered at that layer's resolution, nuisance mixtures
/// of them, and fixed noise channels. Coordinates are normalized to [0, 1].
class SyntheticGenerator final : public Generator {
 public:
  static constexpr double kCenterSpan = 0.4;
  static constexpr double kMinRadius = 0.08;
  static constexpr double kMaxRadius = 0.28;
  static constexpr double kNonlinearFrequency = 3.0;

  explicit SyntheticGenerator(GeneratorConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    palette_ = palette(cfg_.num_classes);
    const int d = cfg_.latent_dim;
    const int k = cfg_.num_shapes;
    Rng rng(derive_seed(cfg_.seed, "shape-map"));
    shape_weights_ = Matrix(3 * k, d);
    for (double& w : shape_weights_.data()) w = rng.normal() / std::sqrt(static_cast<double>(d));
    shape_bias_.assign(3 * k, 0.0);
    for (int s = 0; s < k; ++s) shape_bias_[3 * s + 2] = 0.3 * rng.normal();

    const int m = cfg_.num_classes;
    for (int i = 0; i < cfg_.num_layers(); ++i) {
      LayerParams lp;
      const int c = cfg_.layer_depths[i];
      const int r = cfg_.layer_resolutions[i];
      Rng lr(derive_seed(cfg_.seed, "layer", i));
      if (cfg_.linear_mode) {
        lp.nuisance = std::min(static_cast<int>(cfg_.nuisance_ratio * c), c - m);
        lp.mix = Matrix(lp.nuisance, m);
        for (double& w : lp.mix.data()) w = lr.normal() / std::sqrt(static_cast<double>(m));
      } else {
        lp.mix = Matrix(c, m);
        for (double& w : lp.mix.data()) w = lr.normal();
        lp.phase = Tensor3(c, r, r);
        for (double& p : lp.phase.data()) p = 2.0 * std::numbers::pi * lr.uniform();
      }
      layer_params_.push_back(std::move(lp));
    }
    default_noise_ = make_noise(derive_seed(cfg_.seed, "noise"));
  }

  const GeneratorConfig& config() const { return cfg_; }
  const std::vector<Rgb>& colors() const { return palette_; }

  int latent_dim() const override { return cfg_.latent_dim; }
  int output_resolution() const override { return cfg_.output_resolution(); }
  std::string config_hash() const override { return linsem::config_hash(cfg_); }
  std::vector<LayerInfo> layers() const override {
    std::vector<LayerInfo> out;
    for (int i = 0; i < cfg_.num_layers(); ++i) {
      out.push_back({cfg_.layer_depths[i], cfg_.layer_resolutions[i]});
    }
    return out;
  }

  /// Label painted by shape s.
  int shape_label(int s) const { return 1 + s % (cfg_.num_classes - 1); }

  Scene scene(const LatentVector& z) const {
    check_latent(z);
    const std::vector<double> pre = preactivations(z);
    Scene sc;
    for (int s = 0; s < cfg_.num_shapes; ++s) {
      Shape sh;
      sh.cx = 0.5 + kCenterSpan * std::tanh(pre[3 * s]);
      sh.cy = 0.5 + kCenterSpan * std::tanh(pre[3 * s + 1]);
      sh.radius = kMinRadius + (kMaxRadius - kMinRadius) * sigmoid(pre[3 * s + 2]);
      sh.label = shape_label(s);
      sc.shapes.push_back(sh);
    }
    return sc;
  }

  /// Soft class indicators (m, r, r): alpha-composited discs, channel 0 is the
  /// uncovered (background) fraction. Channels sum to one at every pixel.
  Tensor3 indicators(const Scene& sc, int resolution) const {
    const int m = cfg_.num_classes;
    const std::size_t k = sc.shapes.size();
    Tensor3 ind(m, resolution, resolution);
    std::vector<double> alpha(k);
    for (int y = 0; y < resolution; ++y) {
      const double v = (y + 0.5) / resolution;
      for (int x = 0; x < resolution; ++x) {
        const double u = (x + 0.5) / resolution;
        for (std::size_t s = 0; s < k; ++s) alpha[s] = shape_alpha(sc.shapes[s], u, v);
        double transmit = 1.0;
        for (std::size_t s = k; s-- > 0;) {
          ind(sc.shapes[s].label, y, x) += alpha[s] * transmit;
          transmit *= 1.0 - alpha[s];
        }
        ind(0, y, x) = transmit;
      }
    }
    return ind;
  }

  /// Full-resolution ground truth: the topmost disc containing the pixel
  /// centre (soft indicator >= 0.5), background elsewhere.
  SemanticMask mask(const Scene& sc) const {
    const int r = output_resolution();
    SemanticMask out(r, r, 0);
    for (int y = 0; y < r; ++y) {
      const double v = (y + 0.5) / r;
      for (int x = 0; x < r; ++x) {
        const double u = (x + 0.5) / r;
        for (std::size_t s = sc.shapes.size(); s-- > 0;) {
          const Shape& sh = sc.shapes[s];
          if (std::hypot(u - sh.cx, v - sh.cy) <= sh.radius) {
            out.at(y, x) = sh.label;
            break;
          }
        }
      }
    }
    return out;
  }

  SemanticMask analytic_mask(const LatentVector& z) const { return mask(scene(z)); }

  FeatureStack render(const Scene& sc) const { return render(sc, default_noise_); }

  FeatureStack generate(const LatentVector& z) const override { return render(scene(z)); }

  FeatureStack generate_with_noise(const LatentVector& z, std::uint64_t noise_seed) const override {
    return render(scene(z), make_noise(noise_seed));
  }

  LatentVector backward(const LatentVector& z, const FeatureStack& grad) const override {
    check_latent(z);
    const std::vector<double> pre = preactivations(z);
    const Scene sc = scene(z);
    const int m = cfg_.num_classes;
    const int k = cfg_.num_shapes;
    std::vector<double> dshape(3 * k, 0.0);  // d/d(cx, cy, r) per shape

    for (int i = 0; i < cfg_.num_layers(); ++i) {
      const int r = cfg_.layer_resolutions[i];
      const int c = cfg_.layer_depths[i];
      const bool has_layer = i < static_cast<int>(grad.layers.size()) && !grad.layers[i].empty();
      const bool is_last = i + 1 == cfg_.num_layers();
      const bool has_image = is_last && !grad.image.empty();
      if (!has_layer && !has_image) continue;
      if (has_layer && (grad.layers[i].channels() != c || grad.layers[i].height() != r)) {
        throw ShapeError("backward: gradient layer shape mismatch");
      }

      Tensor3 gind(m, r, r);
      const LayerParams& lp = layer_params_[i];
      if (has_layer) {
        const Tensor3& g = grad.layers[i];
        if (cfg_.linear_mode) {
          for (int ch = 0; ch < m; ++ch) {
            auto dst = gind.channel(ch);
            auto src = g.channel(ch);
            for (std::size_t p = 0; p < dst.size(); ++p) dst[p] += src[p];
          }
          for (int j = 0; j < lp.nuisance; ++j) {
            auto src = g.channel(m + j);
            for (int ch = 0; ch < m; ++ch) {
              const double a = lp.mix(j, ch);
              auto dst = gind.channel(ch);
              for (std::size_t p = 0; p < dst.size(); ++p) dst[p] += a * src[p];
            }
          }
        } else {
          const Tensor3 ind = indicators(sc, r);
          for (int ch = 0; ch < c; ++ch) {
            auto src = g.channel(ch);
            auto phase = lp.phase.channel(ch);
            for (std::size_t p = 0; p < src.size(); ++p) {
              double arg = phase[p];
              for (int q = 0; q < m; ++q) arg += kNonlinearFrequency * lp.mix(ch, q) * ind.channel(q)[p];
              const double d = -std::sin(arg) * kNonlinearFrequency * src[p];
              for (int q = 0; q < m; ++q) gind.channel(q)[p] += lp.mix(ch, q) * d;
            }
          }
        }
      }
      if (has_image) {
        for (int q = 0; q < m; ++q) {
          auto dst = gind.channel(q);
          for (int ch = 0; ch < 3; ++ch) {
            auto src = grad.image.channel(ch);
            const double w = palette_[q][ch];
            for (std::size_t p = 0; p < dst.size(); ++p) dst[p] += w * src[p];
          }
        }
      }
      indicators_backward(sc, r, gind, dshape);
    }

    std::vector<double> dpre(3 * k);
    for (int s = 0; s < k; ++s) {
      const double tx = std::tanh(pre[3 * s]);
      const double ty = std::tanh(pre[3 * s + 1]);
      const double sr = sigmoid(pre[3 * s + 2]);
      dpre[3 * s] = dshape[3 * s] * kCenterSpan * (1.0 - tx * tx);
      dpre[3 * s + 1] = dshape[3 * s + 1] * kCenterSpan * (1.0 - ty * ty);
      dpre[3 * s + 2] = dshape[3 * s + 2] * (kMaxRadius - kMinRadius) * sr * (1.0 - sr);
    }
    LatentVector dz = LatentVector::zeros(cfg_.latent_dim);
    for (int row = 0; row < 3 * k; ++row) {
      auto w = shape_weights_.row(row);
      for (int j = 0; j < cfg_.latent_dim; ++j) dz.values[j] += w[j] * dpre[row];
    }
    return dz;
  }

 private:
  struct LayerParams {
    int nuisance = 0;
    Matrix mix;     // linear: (nuisance, m); nonlinear: (c, m)
    Tensor3 phase;  // nonlinear only
  };

  static double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

  double shape_alpha(const Shape& sh, double u, double v) const {
    const double dist = std::sqrt((u - sh.cx) * (u - sh.cx) + (v - sh.cy) * (v - sh.cy) + kDistEps);
    return sigmoid(cfg_.sharpness * (sh.radius - dist));
  }

  std::vector<double> preactivations(const LatentVector& z) const {
    std::vector<double> pre(shape_bias_);
    for (int row = 0; row < shape_weights_.rows(); ++row) pre[row] += dot(shape_weights_.row(row), z.values);
    return pre;
  }

  std::vector<Tensor3> make_noise(std::uint64_t noise_seed) const {
    std::vector<Tensor3> noise;
    if (!cfg_.linear_mode) return noise;
    for (int i = 0; i < cfg_.num_layers(); ++i) {
      const int c = cfg_.layer_depths[i];
      const int r = cfg_.layer_resolutions[i];
      Rng rng(derive_seed(noise_seed, "layer-noise", i));
      Tensor3 n(c, r, r);
      for (int ch = cfg_.num_classes; ch < c; ++ch) {
        for (double& v : n.channel(ch)) v = cfg_.noise_scale * rng.normal();
      }
      noise.push_back(std::move(n));
    }
    return noise;
  }

  FeatureStack render(const Scene& sc, const std::vector<Tensor3>& noise) const {
    const int m = cfg_.num_classes;
    FeatureStack out;
    Tensor3 last_ind;
    for (int i = 0; i < cfg_.num_layers(); ++i) {
      const int r = cfg_.layer_resolutions[i];
      const int c = cfg_.layer_depths[i];
      const LayerParams& lp = layer_params_[i];
      Tensor3 ind = indicators(sc, r);
      Tensor3 x(c, r, r);
      if (cfg_.linear_mode) {
        for (int ch = 0; ch < c; ++ch) {
          auto dst = x.channel(ch);
          auto nz = noise[i].channel(ch);
          std::copy(nz.begin(), nz.end(), dst.begin());
        }
        for (int ch = 0; ch < m; ++ch) {
          auto src = ind.channel(ch);
          auto dst = x.channel(ch);
          std::copy(src.begin(), src.end(), dst.begin());
        }
        for (int j = 0; j < lp.nuisance; ++j) {
          auto dst = x.channel(m + j);
          for (int q = 0; q < m; ++q) {
            const double a = lp.mix(j, q);
            auto src = ind.channel(q);
            for (std::size_t p = 0; p < dst.size(); ++p) dst[p] += a * src[p];
          }
        }
      } else {
        for (int ch = 0; ch < c; ++ch) {
          auto dst = x.channel(ch);
          auto phase = lp.phase.channel(ch);
          for (std::size_t p = 0; p < dst.size(); ++p) {
            double arg = phase[p];
            for (int q = 0; q < m; ++q) arg += kNonlinearFrequency * lp.mix(ch, q) * ind.channel(q)[p];
            dst[p] = std::cos(arg);
          }
        }
      }
      out.layers.push_back(std::move(x));
      if (i + 1 == cfg_.num_layers()) last_ind = std::move(ind);
    }
    const int r = output_resolution();
    out.image = Tensor3(3, r, r);
    for (int q = 0; q < m; ++q) {
      auto src = last_ind.channel(q);
      for (int ch = 0; ch < 3; ++ch) {
        auto dst = out.image.channel(ch);
        const double w = palette_[q][ch];
        for (std::size_t p = 0; p < dst.size(); ++p) dst[p] += w * src[p];
      }
    }
    return out;
  }

  // Accumulates d/d(cx, cy, r) for every shape given d/d(indicators) at one resolution.
  void indicators_backward(const Scene& sc, int resolution, const Tensor3& gind,
                           std::vector<double>& dshape) const {
    const std::size_t k = sc.shapes.size();
    std::vector<double> alpha(k), keep(k), dvis(k), dalpha(k);
    for (int y = 0; y < resolution; ++y) {
      const double v = (y + 0.5) / resolution;
      for (int x = 0; x < resolution; ++x) {
        const double u = (x + 0.5) / resolution;
        for (std::size_t s = 0; s < k; ++s) {
          alpha[s] = shape_alpha(sc.shapes[s], u, v);
          keep[s] = 1.0 - alpha[s];
          dvis[s] = gind(sc.shapes[s].label, y, x);
        }
        const double dbg = gind(0, y, x);
        // visible_u = alpha_u * prod_{t>u} keep_t ; background = prod_t keep_t
        for (std::size_t s = 0; s < k; ++s) {
          double above = 1.0;
          for (std::size_t t = s + 1; t < k; ++t) above *= keep[t];
          double g = dvis[s] * above;
          for (std::size_t q = 0; q < s; ++q) {
            double prod = alpha[q];
            for (std::size_t t = q + 1; t < k; ++t)
              if (t != s) prod *= keep[t];
            g -= dvis[q] * prod;
          }
          double others = 1.0;
          for (std::size_t t = 0; t < k; ++t)
            if (t != s) others *= keep[t];
          g -= dbg * others;
          dalpha[s] = g;
        }
        for (std::size_t s = 0; s < k; ++s) {
          const Shape& sh = sc.shapes[s];
          const double dpre = dalpha[s] * alpha[s] * keep[s] * cfg_.sharpness;
          const double dx = u - sh.cx;
          const double dy = v - sh.cy;
          const double dist = std::sqrt(dx * dx + dy * dy + kDistEps);
          dshape[3 * s + 2] += dpre;
          // d(-dist)/dcx = dx / dist
          dshape[3 * s] += dpre * dx / dist;
          dshape[3 * s + 1] += dpre * dy / dist;
        }
      }
    }
  }

  static constexpr double kDistEps = 1e-12;

  GeneratorConfig cfg_;
  std::vector<Rgb> palette_;
  Matrix shape_weights_;
  std::vector<double> shape_bias_;
  std::vector<LayerParams> layer_params_;
  std::vector<Tensor3> default_noise_;
};

/// Ground-truth segmenter backed by the synthetic generator's scene geometry.
class AnalyticSegmenter final : public Segmenter {
 public:
  explicit AnalyticSegmenter(const SyntheticGenerator& gen) : gen_(&gen) {}
  int num_classes() const override { return gen_->config().num_classes; }
  SemanticMask segment(const LatentVector& z, const FeatureStack&) const override {
    return gen_->analytic_mask(z);
  }

 private:
  const SyntheticGenerator* gen_;
};

}  // namespace linsem
