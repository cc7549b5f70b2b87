#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "linsem/adam.hpp"
#include "linsem/generator.hpp"
#include "linsem/probe.hpp"
#include "linsem/rng.hpp"
#include "linsem/tensor.hpp"

namespace linsem {

class NotDifferentiableError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class EditMode { kColor, kSemantic };

inline std::string_view to_string(EditMode m) { return m == EditMode::kColor ? "color" : "semantic"; }

inline EditMode parse_edit_mode(std::string_view s) {
  if (s == "color") return EditMode::kColor;
  if (s == "semantic") return EditMode::kSemantic;
  throw std::invalid_argument("unknown edit mode '" + std::string(s) + "'");
}

/// Either a target mask Y (semantic) or a colour stroke C over region M (color).
struct EditSpec {
  EditMode mode = EditMode::kSemantic;
  SemanticMask target;
  Tensor3 stroke;
  BinaryMask region;

  static EditSpec semantic(SemanticMask y) {
    EditSpec s;
    s.mode = EditMode::kSemantic;
    s.target = std::move(y);
    return s;
  }
  static EditSpec color(Tensor3 c, BinaryMask m) {
    EditSpec s;
    s.mode = EditMode::kColor;
    s.stroke = std::move(c);
    s.region = std::move(m);
    return s;
  }

  void validate(int num_classes, int resolution) const {
    if (mode == EditMode::kSemantic) {
      if (target.height != resolution || target.width != resolution) throw ShapeError("edit target size mismatch");
      target.check_labels(num_classes);
      return;
    }
    if (stroke.channels() != 3 || stroke.height() != resolution || stroke.width() != resolution) {
      throw ShapeError("colour stroke must be (3, h, w)");
    }
    if (region.height != resolution || region.width != resolution) throw ShapeError("edit region size mismatch");
    if (region.count() == 0) throw std::invalid_argument("edit region is empty");
  }
};

/// Coefficients of the five loss terms.
struct LossWeights {
  double semantic = 0.0;
  double color = 0.0;
  double preservation = 0.0;
  double neighbor = 0.0;
  double prior = 0.0;

  bool all_zero() const {
    return semantic == 0.0 && color == 0.0 && preservation == 0.0 && neighbor == 0.0 && prior == 0.0;
  }
};

struct OptSettings {
  int iterations = 50;
  double learning_rate = 0.01;
  AdamParams adam;
  double lambda_n = 1e-3;
  double lambda_z = 1e-3;
  bool semantic_preservation = false;  // adds L_p to semantic-mode edits
  int n_init = 10;
  std::optional<LossWeights> weights;  // overrides the per-mode defaults
  bool record_masks = false;

  static OptSettings sie() { return {}; }
  static OptSettings scs() {
    OptSettings s;
    s.learning_rate = 1e-3;
    return s;
  }
  /// Scene-scale SCS: a wider best-of-n search.
  static OptSettings scs_scenes() {
    OptSettings s = scs();
    s.n_init = 100;
    return s;
  }

  void validate() const {
    if (iterations < 0) throw std::invalid_argument("iterations must be >= 0");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
    if (n_init < 1) throw std::invalid_argument("n_init must be >= 1");
  }

  LossWeights weights_for(EditMode mode) const {
    if (weights) return *weights;
    if (mode == EditMode::kSemantic) return {1.0, 0.0, semantic_preservation ? 1.0 : 0.0, lambda_n, lambda_z};
    return {0.0, 1.0, 1.0, lambda_n, lambda_z};
  }
};

// ---------------------------------------------------------------------------
// Losses. Each optionally writes its gradient with respect to its first input.

/// Channel-summed squared error on M divided by |M|.
inline double color_edit_loss(const Tensor3& img, const Tensor3& c, const BinaryMask& m, Tensor3* grad = nullptr) {
  if (!img.same_shape(c) || m.height != img.height() || m.width != img.width()) {
    throw ShapeError("color_edit_loss: shape mismatch");
  }
  const std::size_t count = m.count();
  if (count == 0) throw std::invalid_argument("color_edit_loss: empty mask");
  if (grad) *grad = Tensor3(img.channels(), img.height(), img.width());
  const double inv = 1.0 / static_cast<double>(count);
  double sum = 0.0;
  for (int ch = 0; ch < img.channels(); ++ch) {
    for (std::size_t p = 0; p < img.plane(); ++p) {
      if (!m.bits[p]) continue;
      const double d = img.channel(ch)[p] - c.channel(ch)[p];
      sum += d * d;
      if (grad) grad->channel(ch)[p] = 2.0 * d * inv;
    }
  }
  return sum * inv;
}

/// Channel-summed squared change outside M divided by |1 - M|.
inline double preservation_loss(const Tensor3& img, const Tensor3& img0, const BinaryMask& m,
                                Tensor3* grad = nullptr) {
  BinaryMask outside(m.height, m.width);
  for (std::size_t p = 0; p < m.bits.size(); ++p) outside.bits[p] = m.bits[p] ? 0 : 1;
  if (outside.count() == 0) throw std::invalid_argument("preservation_loss: mask covers the whole canvas");
  return color_edit_loss(img, img0, outside, grad);
}

inline double neighbor_loss(const LatentVector& z, const LatentVector& z0, LatentVector* grad = nullptr) {
  if (z.dim() != z0.dim()) throw ShapeError("neighbor_loss: dimension mismatch");
  double s = 0.0;
  if (grad) *grad = LatentVector::zeros(z.dim());
  for (int i = 0; i < z.dim(); ++i) {
    const double d = z.values[i] - z0.values[i];
    s += d * d;
    if (grad) grad->values[i] = 2.0 * d;
  }
  return s;
}

inline double prior_loss(const LatentVector& z, LatentVector* grad = nullptr) {
  if (grad) {
    *grad = z;
    for (double& v : grad->values) v *= 2.0;
  }
  return dot(z.values, z.values);
}

inline const SemanticPredictor& require_differentiable(const Segmenter& p) {
  const auto* sp = dynamic_cast<const SemanticPredictor*>(&p);
  if (!sp || !p.differentiable()) {
    throw NotDifferentiableError("segmenter is not differentiable; it can only be used for evaluation");
  }
  return *sp;
}

/// Cross-entropy of P's logits on G(z) against Y, with optional dL/dz.
inline double semantic_edit_loss(const Segmenter& p, const Generator& gen, const LatentVector& z,
                                 const SemanticMask& y, LatentVector* grad = nullptr) {
  const SemanticPredictor& sp = require_differentiable(p);
  gen.check_latent(z);
  const FeatureStack f = gen.generate(z);
  if (!grad) return cross_entropy(sp.logits(f), y);
  Tensor3 ds;
  const double loss = cross_entropy(sp.logits(f), y, &ds);
  *grad = gen.backward(z, sp.backward(f, ds));
  return loss;
}

// ---------------------------------------------------------------------------
// Composite objective

struct LossBreakdown {
  double total = 0.0;
  double semantic = 0.0;
  double color = 0.0;
  double preservation = 0.0;
  double neighbor = 0.0;
  double prior = 0.0;
};

/// Weighted sum of the five losses for one edit, anchored at z0.
class EditObjective {
 public:
  EditObjective(const Generator& gen, const Segmenter* p, EditSpec spec, LatentVector z0, LossWeights weights)
      : gen_(gen), spec_(std::move(spec)), z0_(std::move(z0)), w_(weights) {
    gen_.check_latent(z0_);
    if (w_.semantic != 0.0) {
      if (spec_.mode != EditMode::kSemantic) throw std::invalid_argument("semantic loss needs a target mask");
      if (!p) throw std::invalid_argument("semantic loss needs a segmenter");
      predictor_ = &require_differentiable(*p);
      spec_.validate(predictor_->num_classes(), gen_.output_resolution());
    }
    if (w_.color != 0.0) {
      if (spec_.mode != EditMode::kColor) throw std::invalid_argument("colour loss needs a stroke and region");
      spec_.validate(0, gen_.output_resolution());
    }
    if (w_.preservation != 0.0) {
      img0_ = gen_.generate(z0_).image;
      if (spec_.mode == EditMode::kColor) {
        preserve_region_ = spec_.region;
      } else {
        // Semantic edits preserve pixels whose target class is unchanged.
        const SemanticMask current = p ? p->segment(z0_, gen_.generate(z0_)) : SemanticMask{};
        const int res = gen_.output_resolution();
        preserve_region_ = BinaryMask(res, res);
        for (std::size_t i = 0; i < preserve_region_.bits.size(); ++i) {
          preserve_region_.bits[i] = current.labels.empty() || current.labels[i] != spec_.target.labels[i];
        }
      }
    }
  }

  const LossWeights& weights() const { return w_; }
  const LatentVector& anchor() const { return z0_; }

  LossBreakdown evaluate(const LatentVector& z, LatentVector* grad = nullptr,
                         SemanticMask* mask_out = nullptr) const {
    gen_.check_latent(z);
    LossBreakdown out;
    if (grad) *grad = LatentVector::zeros(z.dim());
    const bool need_stack = w_.semantic != 0.0 || w_.color != 0.0 || w_.preservation != 0.0 || mask_out;
    FeatureStack f;
    if (need_stack) f = gen_.generate(z);
    FeatureStack gf;
    bool any_stack_grad = false;

    if (w_.semantic != 0.0) {
      Tensor3 ds;
      out.semantic = cross_entropy(predictor_->logits(f), spec_.target, grad ? &ds : nullptr);
      if (grad) {
        ds *= w_.semantic;
        gf = predictor_->backward(f, ds);
        any_stack_grad = true;
      }
    }
    auto add_image_grad = [&](Tensor3 g, double weight) {
      g *= weight;
      if (gf.image.empty()) {
        gf.image = std::move(g);
      } else {
        gf.image += g;
      }
      any_stack_grad = true;
    };
    if (w_.color != 0.0) {
      Tensor3 g;
      out.color = color_edit_loss(f.image, spec_.stroke, spec_.region, grad ? &g : nullptr);
      if (grad) add_image_grad(std::move(g), w_.color);
    }
    if (w_.preservation != 0.0) {
      Tensor3 g;
      out.preservation = preservation_loss(f.image, img0_, preserve_region_, grad ? &g : nullptr);
      if (grad) add_image_grad(std::move(g), w_.preservation);
    }
    if (grad && any_stack_grad) *grad = gen_.backward(z, gf);
    if (w_.neighbor != 0.0) {
      LatentVector g;
      out.neighbor = neighbor_loss(z, z0_, grad ? &g : nullptr);
      if (grad)
        for (int i = 0; i < z.dim(); ++i) grad->values[i] += w_.neighbor * g.values[i];
    }
    if (w_.prior != 0.0) {
      LatentVector g;
      out.prior = prior_loss(z, grad ? &g : nullptr);
      if (grad)
        for (int i = 0; i < z.dim(); ++i) grad->values[i] += w_.prior * g.values[i];
    }
    out.total = w_.semantic * out.semantic + w_.color * out.color + w_.preservation * out.preservation +
                w_.neighbor * out.neighbor + w_.prior * out.prior;
    if (mask_out && predictor_) *mask_out = predictor_->segment(z, f);
    return out;
  }

 private:
  const Generator& gen_;
  const SemanticPredictor* predictor_ = nullptr;
  EditSpec spec_;
  LatentVector z0_;
  LossWeights w_;
  Tensor3 img0_;
  BinaryMask preserve_region_;
};

struct OptimizationTrace {
  std::vector<LossBreakdown> losses;  // N + 1 entries: z_0 .. z_N
  std::vector<SemanticMask> masks;    // filled when record_masks is set
};

class OptimizationDiverged : public std::runtime_error {
 public:
  OptimizationDiverged(std::size_t iteration, OptimizationTrace t)
      : std::runtime_error("non-finite loss at iteration " + std::to_string(iteration)), trace(std::move(t)) {}
  OptimizationTrace trace;
};

struct EditResult {
  LatentVector latent;
  OptimizationTrace trace;
};

/// Called after each recorded loss with (iteration, total iterations, loss).
using OptProgress = std::function<void(int, int, double)>;

/// N Adam steps on the objective starting from `start`.
inline EditResult optimize_latent(const EditObjective& obj, LatentVector start, const OptSettings& settings,
                                  const OptProgress& progress = {}) {
  settings.validate();
  const int n = settings.iterations;
  EditResult r{std::move(start), {}};
  Adam adam(static_cast<std::size_t>(r.latent.dim()), settings.adam);
  LatentVector grad;
  for (int it = 0; it <= n; ++it) {
    SemanticMask mask;
    const LossBreakdown l = obj.evaluate(r.latent, it < n ? &grad : nullptr, settings.record_masks ? &mask : nullptr);
    r.trace.losses.push_back(l);
    if (settings.record_masks) r.trace.masks.push_back(std::move(mask));
    if (!std::isfinite(l.total)) throw OptimizationDiverged(static_cast<std::size_t>(it), std::move(r.trace));
    if (progress) progress(it, n, l.total);
    if (it == n) break;
    adam.step(std::span<double>(r.latent.values), std::span<const double>(grad.values), settings.learning_rate);
  }
  return r;
}

/// Semantic image editing (mode semantic) or colour editing (mode color) from z0.
inline EditResult edit_latent(const LatentVector& z0, const EditSpec& spec, const OptSettings& settings,
                              const Generator& gen, const Segmenter* p, const OptProgress& progress = {}) {
  settings.validate();
  const LossWeights w = settings.weights_for(spec.mode);
  if (settings.iterations == 0) {
    // Nothing to optimize; the trace still records the starting loss.
    const EditObjective obj(gen, p, spec, z0, w);
    SemanticMask mask;
    EditResult r{z0, {}};
    r.trace.losses.push_back(obj.evaluate(z0, nullptr, settings.record_masks ? &mask : nullptr));
    if (settings.record_masks) r.trace.masks.push_back(std::move(mask));
    if (progress) progress(0, 0, r.trace.losses.back().total);
    return r;
  }
  const EditObjective obj(gen, p, spec, z0, w);
  return optimize_latent(obj, z0, settings, progress);
}

// ---------------------------------------------------------------------------
// Semantic-conditional sampling

struct ScsInit {
  LatentVector latent;
  std::size_t index = 0;
  std::vector<std::size_t> scores;  // matching-pixel counts per candidate
};

/// The candidate whose segmentation matches Y on the most pixels; ties go to
/// the lowest index.
inline ScsInit scs_select(const SemanticMask& y, std::span<const LatentVector> candidates, const Generator& gen,
                          const Segmenter& p) {
  if (candidates.empty()) throw std::invalid_argument("scs_select: no candidates");
  ScsInit out;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const SemanticMask s = p.segment(candidates[i], gen.generate(candidates[i]));
    if (s.height != y.height || s.width != y.width) throw ShapeError("scs target size mismatch");
    std::size_t match = 0;
    for (std::size_t q = 0; q < s.labels.size(); ++q) match += s.labels[q] == y.labels[q] ? 1 : 0;
    out.scores.push_back(match);
    if (match > out.scores[out.index]) out.index = i;
  }
  out.latent = candidates[out.index];
  return out;
}

inline LatentVector scs_candidate(std::uint64_t seed, int i, int dim) {
  return sample_latent(derive_seed(seed, "scs-init", static_cast<std::uint64_t>(i)), dim);
}

inline ScsInit scs_init(const SemanticMask& y, int n_init, const Generator& gen, const Segmenter& p,
                        std::uint64_t seed) {
  if (n_init < 1) throw std::invalid_argument("n_init must be >= 1");
  std::vector<LatentVector> candidates;
  for (int i = 0; i < n_init; ++i) candidates.push_back(scs_candidate(seed, i, gen.latent_dim()));
  return scs_select(y, candidates, gen, p);
}

struct ScsResult {
  ScsInit init;
  EditResult optimized;
};

/// Best-of-n_init initialization, then N Adam steps on the cross-entropy of
/// P(G(z)) against Y.
inline ScsResult scs_sample(const SemanticMask& y, const OptSettings& settings, const Generator& gen,
                            const Segmenter& p, std::uint64_t seed, const OptProgress& progress = {}) {
  settings.validate();
  require_differentiable(p);
  ScsResult r;
  r.init = scs_init(y, settings.n_init, gen, p, seed);
  const LossWeights w = settings.weights.value_or(LossWeights{1.0, 0.0, 0.0, 0.0, 0.0});
  const EditObjective obj(gen, &p, EditSpec::semantic(y), r.init.latent, w);
  r.optimized = optimize_latent(obj, r.init.latent, settings, progress);
  return r;
}

}  // namespace linsem
