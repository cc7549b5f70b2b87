#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "linsem/adam.hpp"
#include "linsem/generator.hpp"
#include "linsem/nse.hpp"
#include "linsem/probe.hpp"
#include "linsem/rng.hpp"

namespace linsem {

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BatchPhase {
  int epochs = 0;
  int batch_size = 1;
};

/// Full-supervision schedule. Batch-size phases run back to back and cover
/// every epoch; the learning rate is multiplied by `lr_drop_factor` from the
/// 1-based epoch `lr_drop_epoch` onwards.
struct TrainSchedule {
  int total_samples = 2048;  // distinct latents, visited in shuffled passes
  int samples_per_epoch = 256;
  std::vector<BatchPhase> phases{{2, 1}, {16, 4}, {32, 64}};
  double learning_rate = 1e-3;
  int lr_drop_epoch = 20;
  double lr_drop_factor = 0.1;
  AdamParams adam;

  /// 51,200 samples, 1,024 per epoch, 50 epochs: 6,656 iterations.
  static TrainSchedule reference() {
    TrainSchedule s;
    s.total_samples = 51200;
    s.samples_per_epoch = 1024;
    return s;
  }

  static TrainSchedule desk() { return TrainSchedule{}; }

  /// Multiplies the sample counts, keeping the epoch structure.
  TrainSchedule scaled(double factor) const {
    if (!(factor > 0.0)) throw std::invalid_argument("schedule scale must be positive");
    TrainSchedule s = *this;
    s.total_samples = std::max(1, static_cast<int>(std::lround(total_samples * factor)));
    s.samples_per_epoch = std::max(1, static_cast<int>(std::lround(samples_per_epoch * factor)));
    return s;
  }

  int epochs() const {
    int n = 0;
    for (const BatchPhase& p : phases) n += p.epochs;
    return n;
  }

  int batch_size_at(int epoch) const {  // 1-based
    int end = 0;
    for (const BatchPhase& p : phases) {
      end += p.epochs;
      if (epoch <= end) return p.batch_size;
    }
    throw std::out_of_range("epoch beyond schedule");
  }

  double learning_rate_at(int epoch) const {
    return epoch >= lr_drop_epoch ? learning_rate * lr_drop_factor : learning_rate;
  }

  std::size_t iterations_in_epoch(int epoch) const {
    const int b = batch_size_at(epoch);
    return static_cast<std::size_t>((samples_per_epoch + b - 1) / b);
  }

  std::size_t iterations() const {
    std::size_t n = 0;
    for (int e = 1; e <= epochs(); ++e) n += iterations_in_epoch(e);
    return n;
  }

  void validate() const {
    if (total_samples < 1 || samples_per_epoch < 1) throw std::invalid_argument("schedule: sample counts must be positive");
    if (phases.empty()) throw std::invalid_argument("schedule: no batch phases");
    for (const BatchPhase& p : phases) {
      if (p.epochs < 1 || p.batch_size < 1) throw std::invalid_argument("schedule: phases need positive epochs and batch size");
    }
    if (!(learning_rate > 0.0) || !(lr_drop_factor > 0.0)) {
      throw std::invalid_argument("schedule: rates must be positive");
    }
  }
};

struct TrainProgress {
  std::size_t iteration = 0;  // 1-based, completed
  std::size_t total = 0;
  double loss = 0.0;
};

struct TrainOptions {
  std::uint64_t seed = 0;
  std::function<void(const TrainProgress&)> on_iteration;
};

template <typename Weights>
struct TrainResult {
  Weights weights;
  std::vector<double> loss_curve;  // mean batch loss per iteration
  std::size_t iterations = 0;
};

/// Latent for the j-th training sample of a run.
inline LatentVector training_latent(std::uint64_t seed, std::size_t j, int dim) {
  return sample_latent(derive_seed(seed, "train", j), dim);
}

namespace detail {

inline std::vector<std::span<double>> blocks(ProbeWeights& w) {
  std::vector<std::span<double>> out;
  for (Matrix& t : w.layers) out.push_back(t.data());
  return out;
}
inline std::vector<std::span<const double>> const_blocks(const ProbeWeights& w) {
  std::vector<std::span<const double>> out;
  for (const Matrix& t : w.layers) out.push_back(t.data());
  return out;
}
inline std::vector<std::span<double>> blocks(NseWeights& w) {
  std::vector<std::span<double>> out;
  for (Conv3x3& c : w.convs) {
    out.push_back(c.weight);
    out.push_back(c.bias);
  }
  return out;
}
inline std::vector<std::span<const double>> const_blocks(const NseWeights& w) {
  std::vector<std::span<const double>> out;
  for (const Conv3x3& c : w.convs) {
    out.push_back(c.weight);
    out.push_back(c.bias);
  }
  return out;
}

template <typename Weights>
void scale_grads(Weights& g, double s) {
  for (std::span<double> b : blocks(g))
    for (double& v : b) v *= s;
}

template <typename Weights>
void add_grads(Weights& acc, const Weights& g) {
  auto a = blocks(acc);
  auto b = const_blocks(g);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
}

template <typename Weights>
std::size_t count_params(Weights& w) {
  std::size_t n = 0;
  for (std::span<double> b : blocks(w)) n += b.size();
  return n;
}

inline void check_loss(double loss, std::size_t iteration) {
  if (!std::isfinite(loss)) {
    throw TrainingDiverged("training diverged: non-finite loss " + std::to_string(loss) +
                           " at iteration " + std::to_string(iteration));
  }
}

/// Shared full-supervision loop. `loss_and_grad(w, stack, mask, grad_out)` returns
/// the per-sample loss and writes the per-sample gradient.
template <typename Weights, typename LossGrad>
TrainResult<Weights> run_schedule(Weights w, const Generator& gen, const Segmenter& seg,
                                  const TrainSchedule& schedule, const TrainOptions& opt,
                                  LossGrad&& loss_and_grad) {
  schedule.validate();
  Adam adam(count_params(w), schedule.adam);
  TrainResult<Weights> res;
  const std::size_t total_iters = schedule.iterations();
  res.loss_curve.reserve(total_iters);

  Rng order_rng(derive_seed(opt.seed, "train-order"));
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  auto next_index = [&]() {
    if (cursor == order.size()) {
      order = order_rng.permutation(static_cast<std::size_t>(schedule.total_samples));
      cursor = 0;
    }
    return order[cursor++];
  };

  for (int epoch = 1; epoch <= schedule.epochs(); ++epoch) {
    const int bs = schedule.batch_size_at(epoch);
    const double lr = schedule.learning_rate_at(epoch);
    int remaining = schedule.samples_per_epoch;
    while (remaining > 0) {
      const int n = std::min(bs, remaining);
      remaining -= n;
      Weights grad_sum = w;
      scale_grads(grad_sum, 0.0);
      Weights grad = grad_sum;
      double loss_sum = 0.0;
      for (int b = 0; b < n; ++b) {
        const LatentVector z = training_latent(opt.seed, next_index(), gen.latent_dim());
        const FeatureStack f = gen.generate(z);
        const SemanticMask y = seg.segment(z, f);
        loss_sum += loss_and_grad(w, f, y, grad);
        add_grads(grad_sum, grad);
      }
      const double loss = loss_sum / n;
      check_loss(loss, res.iterations + 1);
      scale_grads(grad_sum, 1.0 / n);
      const auto pb = blocks(w);
      const auto gb = const_blocks(grad_sum);
      adam.step(pb, gb, lr);
      res.loss_curve.push_back(loss);
      ++res.iterations;
      if (opt.on_iteration) opt.on_iteration({res.iterations, total_iters, loss});
    }
  }
  res.weights = std::move(w);
  return res;
}

}  // namespace detail

/// Loss and weight gradient of one sample for the plain LSE objective.
inline double lse_loss_and_grad(const ProbeWeights& w, const FeatureStack& f, const SemanticMask& y,
                                ProbeWeights& grad) {
  Tensor3 ds;
  const double loss = cross_entropy(lse_forward(w, f), y, &ds);
  grad = lse_backward(w, f, ds, true, false).weights;
  return loss;
}

/// Per-layer coefficient of the layer-wise objective.
inline constexpr double kLayerwiseAlpha = 0.1;

/// Layer-wise objective L(S, Y) + sum_i alpha * L(up(S_i), Y).
inline double layerwise_loss_and_grad(const ProbeWeights& w, const FeatureStack& f, const SemanticMask& y,
                                      double alpha, ProbeWeights* grad) {
  const std::vector<Tensor3> per_layer = lse_layer_logits(w, f);
  const int h = f.image.height();
  const int wd = f.image.width();
  Tensor3 s(w.num_classes, h, wd);
  for (const Tensor3& si : per_layer) add_upsampled_bilinear(si, s);
  Tensor3 ds;
  double loss = cross_entropy(s, y, grad ? &ds : nullptr);
  if (grad) *grad = ProbeWeights::zeros(w.num_classes, w.layer_depths);
  for (std::size_t i = 0; i < per_layer.size(); ++i) {
    Tensor3 dsi;
    const Tensor3 up = upsample_bilinear(per_layer[i], h, wd);
    if (alpha != 0.0) loss += alpha * cross_entropy(up, y, grad ? &dsi : nullptr);
    if (!grad) continue;
    Tensor3 total = ds;
    if (alpha != 0.0) {
      dsi *= alpha;
      total += dsi;
    }
    const Tensor3& x = f.layers[i];
    const Tensor3 g = upsample_bilinear_adjoint(total, x.height(), x.width());
    Matrix& dt = grad->layers[i];
    for (int k = 0; k < w.num_classes; ++k)
      for (int c = 0; c < x.channels(); ++c) dt(k, c) = dot(g.channel(k), x.channel(c));
  }
  return loss;
}

inline double nse_loss_and_grad(const NseWeights& w, const FeatureStack& f, const SemanticMask& y,
                                NseWeights& grad) {
  Tensor3 ds;
  const double loss = cross_entropy(nse_forward(w, f), y, &ds);
  grad = nse_backward(w, f, ds, false).weights;
  return loss;
}

inline TrainResult<ProbeWeights> train_lse(const Generator& gen, const Segmenter& seg,
                                           const TrainSchedule& schedule, const TrainOptions& opt = {}) {
  ProbeWeights w = ProbeWeights::zeros(seg.num_classes(), gen.layer_depths());
  auto res = detail::run_schedule(std::move(w), gen, seg, schedule, opt, lse_loss_and_grad);
  res.weights.round_to_float();
  return res;
}

/// Trains with the layer-wise objective; per-layer maps are read back with
/// lse_layer_logits.
inline TrainResult<ProbeWeights> train_layerwise(const Generator& gen, const Segmenter& seg,
                                                 const TrainSchedule& schedule, double alpha = kLayerwiseAlpha,
                                                 const TrainOptions& opt = {}) {
  if (!(alpha > 0.0)) throw std::invalid_argument("layer-wise coefficient must be positive");
  ProbeWeights w = ProbeWeights::zeros(seg.num_classes(), gen.layer_depths());
  auto res = detail::run_schedule(
      std::move(w), gen, seg, schedule, opt,
      [alpha](const ProbeWeights& p, const FeatureStack& f, const SemanticMask& y, ProbeWeights& g) {
        return layerwise_loss_and_grad(p, f, y, alpha, &g);
      });
  res.weights.round_to_float();
  return res;
}

inline TrainResult<NseWeights> train_nse(const Generator& gen, const Segmenter& seg,
                                         const TrainSchedule& schedule, NseVariant variant,
                                         int hidden = 64, const TrainOptions& opt = {}) {
  NseWeights w = NseWeights::initialized(variant, seg.num_classes(), gen.layers(), opt.seed, hidden);
  auto res = detail::run_schedule(std::move(w), gen, seg, schedule, opt, nse_loss_and_grad);
  res.weights.round_to_float();
  return res;
}

enum class ProbeKind { kLse, kNse1, kNse2 };

inline std::string_view to_string(ProbeKind k) {
  switch (k) {
    case ProbeKind::kLse: return "lse";
    case ProbeKind::kNse1: return "nse1";
    case ProbeKind::kNse2: return "nse2";
  }
  return "?";
}

inline ProbeKind parse_probe_kind(std::string_view s) {
  if (s == "lse") return ProbeKind::kLse;
  if (s == "nse1") return ProbeKind::kNse1;
  if (s == "nse2") return ProbeKind::kNse2;
  throw std::invalid_argument("unknown probe kind: " + std::string(s));
}

using AnyWeights = std::variant<ProbeWeights, NseWeights>;

struct FullTrainResult {
  AnyWeights weights;
  std::vector<double> loss_curve;
  std::size_t iterations = 0;
};

inline FullTrainResult train_full(const Generator& gen, const Segmenter& seg, const TrainSchedule& schedule,
                                  ProbeKind kind, const TrainOptions& opt = {}, int nse_hidden = 64) {
  if (kind == ProbeKind::kLse) {
    auto r = train_lse(gen, seg, schedule, opt);
    return {std::move(r.weights), std::move(r.loss_curve), r.iterations};
  }
  const NseVariant v = kind == ProbeKind::kNse1 ? NseVariant::kNse1 : NseVariant::kNse2;
  auto r = train_nse(gen, seg, schedule, v, nse_hidden, opt);
  return {std::move(r.weights), std::move(r.loss_curve), r.iterations};
}

// ---------------------------------------------------------------------------
// Few-shot

struct Annotation {
  LatentVector latent;
  SemanticMask mask;
};

/// Batch size and step count for k annotated images: 1 -> (1, 2000),
/// 4 -> (4, 2000), 8 -> (8, 1000), 16 -> (16, 500).
struct FewShotPlan {
  int shots = 0;
  int batch_size = 0;
  int iterations = 0;

  static FewShotPlan for_shots(int shots) {
    switch (shots) {
      case 1: return {1, 1, 2000};
      case 4: return {4, 4, 2000};
      case 8: return {8, 8, 1000};
      case 16: return {16, 16, 500};
      default:
        throw std::invalid_argument("shots must be one of 1, 4, 8, 16 (got " + std::to_string(shots) + ")");
    }
  }
};

struct FewShotOptions {
  std::uint64_t seed = 0;
  bool resample_layer_noise = false;
  double learning_rate = 1e-3;
  AdamParams adam;
  std::optional<int> iterations;  // overrides the plan's step count
  std::function<void(const TrainProgress&)> on_iteration;
};

/// LSE trained only on the given annotated latents. Every batch holds all
/// annotations; with `resample_layer_noise` the generator's layer noise is
/// redrawn for each batch.
inline TrainResult<ProbeWeights> train_fewshot(const Generator& gen, std::span<const Annotation> annotations,
                                               int shots, int num_classes, const FewShotOptions& opt = {}) {
  const FewShotPlan plan = FewShotPlan::for_shots(shots);
  if (static_cast<int>(annotations.size()) != shots) {
    throw std::invalid_argument("few-shot: expected " + std::to_string(shots) + " annotations, got " +
                                std::to_string(annotations.size()));
  }
  const int res = gen.output_resolution();
  for (const Annotation& a : annotations) {
    if (a.latent.dim() != gen.latent_dim()) throw std::invalid_argument("few-shot: annotation latent dimension mismatch");
    if (a.mask.height != res || a.mask.width != res) throw std::invalid_argument("few-shot: annotation mask size mismatch");
    a.mask.check_labels(num_classes);
  }
  const int iters = opt.iterations.value_or(plan.iterations);

  std::vector<FeatureStack> cached;
  if (!opt.resample_layer_noise) {
    for (const Annotation& a : annotations) cached.push_back(gen.generate(a.latent));
  }

  ProbeWeights w = ProbeWeights::zeros(num_classes, gen.layer_depths());
  Adam adam(w.parameter_count(), opt.adam);
  TrainResult<ProbeWeights> out;
  out.loss_curve.reserve(iters);
  ProbeWeights grad_sum = w;
  ProbeWeights grad = w;
  for (int it = 0; it < iters; ++it) {
    detail::scale_grads(grad_sum, 0.0);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < annotations.size(); ++b) {
      const FeatureStack f = opt.resample_layer_noise
                                 ? gen.generate_with_noise(annotations[b].latent, derive_seed(opt.seed, "fewshot-noise", it))
                                 : FeatureStack{};
      loss_sum += lse_loss_and_grad(w, opt.resample_layer_noise ? f : cached[b], annotations[b].mask, grad);
      detail::add_grads(grad_sum, grad);
    }
    const double loss = loss_sum / annotations.size();
    detail::check_loss(loss, out.iterations + 1);
    detail::scale_grads(grad_sum, 1.0 / annotations.size());
    adam.step(detail::blocks(w), detail::const_blocks(grad_sum), opt.learning_rate);
    out.loss_curve.push_back(loss);
    ++out.iterations;
    if (opt.on_iteration) opt.on_iteration({out.iterations, static_cast<std::size_t>(iters), loss});
  }
  w.round_to_float();
  out.weights = std::move(w);
  return out;
}

}  // namespace linsem
