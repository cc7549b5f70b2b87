#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "linsem/generator.hpp"
#include "linsem/probe.hpp"
#include "linsem/rng.hpp"
#include "linsem/tensor.hpp"
#include "linsem/upsample.hpp"

namespace linsem {

class StarvedClassError : public std::runtime_error {
 public:
  StarvedClassError(int cls, const std::string& name, std::size_t images)
      : std::runtime_error("starved class " + std::to_string(cls) + " (" + name + "): pool incomplete after " +
                           std::to_string(images) + " images"),
        class_index(cls) {}
  int class_index;
};

class DegenerateCenterError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// X_ij: the pixel's features from every layer, bilinearly upsampled to the
/// image size and concatenated. Matches concat_upsampled(f) at (y, x).
inline std::vector<double> pixel_feature(const FeatureStack& f, int y, int x) {
  const int h = f.image.height();
  const int w = f.image.width();
  if (y < 0 || y >= h || x < 0 || x >= w) {
    throw std::out_of_range("pixel (" + std::to_string(y) + ", " + std::to_string(x) + ") outside canvas");
  }
  std::vector<double> out;
  for (const Tensor3& layer : f.layers) {
    if (layer.height() == h && layer.width() == w) {
      for (int c = 0; c < layer.channels(); ++c) out.push_back(layer(c, y, x));
      continue;
    }
    const AxisInterp ry(layer.height(), h);
    const AxisInterp rx(layer.width(), w);
    const double wy = ry.w_hi[y];
    const double wx = rx.w_hi[x];
    for (int c = 0; c < layer.channels(); ++c) {
      const double top = (1.0 - wx) * layer(c, ry.lo[y], rx.lo[x]) + wx * layer(c, ry.lo[y], rx.hi[x]);
      const double bot = (1.0 - wx) * layer(c, ry.hi[y], rx.lo[x]) + wx * layer(c, ry.hi[y], rx.hi[x]);
      out.push_back((1.0 - wy) * top + wy * bot);
    }
  }
  return out;
}

struct FairSampleOptions {
  int per_image_cap = 20;  // T1
  int capacity = 400;      // T2
  int max_images = 10000;
  std::uint64_t seed = 0;

  static FairSampleOptions reference() { return {200, 4000, 10000, 0}; }
};

/// Per-class feature pools filled with identical acceptance rules for every class.
struct FeaturePool {
  int per_image_cap = 0;
  int capacity = 0;
  std::vector<std::vector<std::vector<double>>> features;  // [class][vector][dim]
  std::vector<std::vector<std::size_t>> source_image;      // [class][vector]
  std::size_t images_seen = 0;

  int num_classes() const { return static_cast<int>(features.size()); }
  bool complete() const {
    for (const auto& p : features)
      if (static_cast<int>(p.size()) < capacity) return false;
    return true;
  }
};

/// Samples images until every class pool holds `capacity` vectors. A class
/// contributes from an image only if it covers at least `per_image_cap`
/// pixels there, and then contributes that many pixels chosen without
/// replacement (fewer only to top the pool up to capacity).
inline FeaturePool fair_sample(const Generator& gen, const Segmenter& seg, const FairSampleOptions& opt,
                               const std::vector<std::string>& class_names = {}) {
  if (opt.per_image_cap < 1 || opt.capacity < opt.per_image_cap) {
    throw std::invalid_argument("fair_sample: need 1 <= T1 <= T2");
  }
  if (static_cast<long long>(opt.max_images) * opt.per_image_cap < opt.capacity) {
    throw std::invalid_argument("fair_sample: max_images below T2 / T1");
  }
  const int m = seg.num_classes();
  FeaturePool pool;
  pool.per_image_cap = opt.per_image_cap;
  pool.capacity = opt.capacity;
  pool.features.resize(m);
  pool.source_image.resize(m);
  Rng choice_rng(derive_seed(opt.seed, "fair-choice"));

  for (int img = 0; !pool.complete(); ++img) {
    if (img >= opt.max_images) {
      for (int k = 0; k < m; ++k) {
        if (static_cast<int>(pool.features[k].size()) < opt.capacity) {
          const std::string name = k < static_cast<int>(class_names.size()) ? class_names[k] : default_class_names(m)[k];
          throw StarvedClassError(k, name, pool.images_seen);
        }
      }
    }
    const LatentVector z = sample_latent(derive_seed(opt.seed, "fair-sample", img), gen.latent_dim());
    const FeatureStack f = gen.generate(z);
    const SemanticMask s = seg.segment(z, f);
    ++pool.images_seen;

    std::vector<std::vector<std::size_t>> pixels(m);
    for (std::size_t p = 0; p < s.labels.size(); ++p) pixels[s.labels[p]].push_back(p);
    Tensor3 x;
    for (int k = 0; k < m; ++k) {
      const int have = static_cast<int>(pool.features[k].size());
      if (have >= opt.capacity || static_cast<int>(pixels[k].size()) < opt.per_image_cap) continue;
      if (x.empty()) x = concat_upsampled(f);
      const std::size_t take = static_cast<std::size_t>(std::min(opt.per_image_cap, opt.capacity - have));
      for (std::size_t p : choice_rng.choose(pixels[k], take)) {
        std::vector<double> v(x.channels());
        for (int c = 0; c < x.channels(); ++c) v[c] = x.data()[c * x.plane() + p];
        pool.features[k].push_back(std::move(v));
        pool.source_image[k].push_back(static_cast<std::size_t>(img));
      }
    }
  }
  return pool;
}

namespace detail {

inline std::vector<double> normalized(std::span<const double> v) {
  const double n = std::sqrt(dot(v, v));
  if (!(n > 0.0)) throw DegenerateCenterError("zero-norm feature vector");
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) x /= n;
  return out;
}

/// Mean of the unit-normalized vectors.
inline std::vector<double> mean_direction(const std::vector<std::vector<double>>& vs) {
  std::vector<double> acc(vs.front().size(), 0.0);
  for (const auto& v : vs) {
    const std::vector<double> u = normalized(v);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += u[i];
  }
  for (double& a : acc) a /= static_cast<double>(vs.size());
  return acc;
}

}  // namespace detail

/// Unit vectors on the n-sphere, one row per class.
struct ClassCenters {
  Matrix centers;
  int num_classes() const { return centers.rows(); }
  int dim() const { return centers.cols(); }
};

/// c_k = normalize(mean(normalize(v) for v in pool_k)).
inline ClassCenters class_centers(const FeaturePool& pool) {
  const int m = pool.num_classes();
  if (m == 0) throw std::invalid_argument("class_centers: empty pool");
  for (const auto& p : pool.features) {
    if (p.empty()) throw std::invalid_argument("class_centers: a class pool is empty");
  }
  const std::size_t n = pool.features.front().front().size();
  ClassCenters out{Matrix(m, static_cast<int>(n))};
  for (int k = 0; k < m; ++k) {
    const std::vector<double> mean = detail::mean_direction(pool.features[k]);
    const double norm = std::sqrt(dot(mean, mean));
    if (norm < 1e-9) throw DegenerateCenterError("class " + std::to_string(k) + ": mean direction vanishes");
    for (std::size_t i = 0; i < n; ++i) out.centers(k, static_cast<int>(i)) = mean[i] / norm;
  }
  return out;
}

/// argmax_k T^(k) x with ties to the lowest index. Each class region is a
/// cone with apex at the origin, so positive rescaling of x never changes the result.
inline int hypercone_classify(const Matrix& t, std::span<const double> x) {
  if (static_cast<int>(x.size()) != t.cols()) throw ShapeError("hypercone_classify: dimension mismatch");
  for (double v : x) {
    if (!std::isfinite(v)) throw std::invalid_argument("hypercone_classify: non-finite feature");
  }
  int best = 0;
  double bv = dot(t.row(0), x);
  for (int k = 1; k < t.rows(); ++k) {
    const double v = dot(t.row(k), x);
    if (v > bv) {
      bv = v;
      best = k;
    }
  }
  return best;
}

/// Per pixel, the class whose centre has the highest cosine with X_ij.
/// Pixels with a zero feature vector are background.
inline SemanticMask center_segment(const FeatureStack& f, const ClassCenters& centers) {
  const Tensor3 x = concat_upsampled(f);
  if (x.channels() != centers.dim()) throw ShapeError("center_segment: feature dimension mismatch");
  SemanticMask out(x.height(), x.width(), 0);
  std::vector<double> v(x.channels());
  for (std::size_t p = 0; p < x.plane(); ++p) {
    double sq = 0.0;
    for (int c = 0; c < x.channels(); ++c) {
      v[c] = x.data()[c * x.plane() + p];
      sq += v[c] * v[c];
    }
    if (sq == 0.0) continue;
    out.labels[p] = hypercone_classify(centers.centers, v);
  }
  return out;
}

/// Entry (a, b) is the mean cosine similarity over all pairs (u in pool_a,
/// v in pool_b); computed as the dot product of the mean unit vectors.
inline Matrix cosine_confusion(const FeaturePool& pool) {
  const int m = pool.num_classes();
  std::vector<std::vector<double>> means;
  for (const auto& p : pool.features) {
    if (p.empty()) throw std::invalid_argument("cosine_confusion: a class pool is empty");
    means.push_back(detail::mean_direction(p));
  }
  Matrix out(m, m);
  for (int a = 0; a < m; ++a)
    for (int b = 0; b < m; ++b) out(a, b) = dot(means[a], means[b]);
  return out;
}

}  // namespace linsem
