#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "json.hpp"
#include "linsem/generator.hpp"
#include "linsem/geometry.hpp"
#include "linsem/latentopt.hpp"
#include "linsem/metrics.hpp"
#include "linsem/probe.hpp"
#include "linsem/rng.hpp"
#include "linsem/train.hpp"

namespace linsem {

// Seeded experiment protocols shared by the CLI and the acceptance run.

/// Applies optimization overrides from a JSON object; unknown keys are ignored.
inline OptSettings settings_with_overrides(const nlohmann::json& o, OptSettings s) {
  if (o.is_null()) return s;
  if (!o.is_object()) throw std::invalid_argument("settings must be an object");
  try {
    s.iterations = o.value("iterations", s.iterations);
    s.learning_rate = o.value("learning_rate", s.learning_rate);
    s.lambda_n = o.value("lambda_n", s.lambda_n);
    s.lambda_z = o.value("lambda_z", s.lambda_z);
    s.semantic_preservation = o.value("semantic_preservation", s.semantic_preservation);
    s.n_init = o.value("n_init", s.n_init);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("settings: ") + e.what());
  }
  s.validate();
  return s;
}

/// Paints a random disc (radius 6-14 px at 64 px, scaled with the canvas) of a
/// random foreground class onto `mask`.
inline SemanticMask paint_disc(SemanticMask mask, int num_classes, std::uint64_t seed) {
  if (num_classes < 2) throw std::invalid_argument("paint_disc: need a foreground class");
  Rng rng(seed);
  const double scale = mask.width / 64.0;
  const double cx = rng.uniform() * mask.width;
  const double cy = rng.uniform() * mask.height;
  const double r = (6.0 + rng.uniform() * 8.0) * scale;
  const int k = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(num_classes - 1)));
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      if (std::hypot(x - cx, y - cy) < r) mask.at(y, x) = k;
  return mask;
}

struct SieTrial {
  LatentVector start;
  SemanticMask target;
};

/// Trial i: a fresh latent and its current probe mask with a painted disc.
inline SieTrial sie_trial(const Generator& gen, const Segmenter& probe, std::uint64_t seed, std::size_t i) {
  SieTrial t;
  t.start = sample_latent(derive_seed(seed, "sie", i), gen.latent_dim());
  const SemanticMask current = probe.segment(t.start, gen.generate(t.start));
  t.target = paint_disc(current, probe.num_classes(), derive_seed(seed, "sie-stroke", i));
  return t;
}

/// Target j of an SCS run: the analytic mask of a truncated latent.
inline SemanticMask scs_target(const SyntheticGenerator& gen, std::uint64_t seed, std::size_t j,
                               double truncation = 0.5) {
  return gen.analytic_mask(sample_latent(derive_seed(seed, "scs-target", j), gen.latent_dim(), truncation));
}

inline std::uint64_t scs_sample_seed(std::uint64_t seed, std::size_t target, std::size_t sample,
                                     std::size_t samples_per_target) {
  return derive_seed(seed, "scs-sample", target * samples_per_target + sample);
}

struct ScsRun {
  std::vector<SemanticMask> targets;
  std::vector<std::vector<SemanticMask>> init_masks;       // judged by `judge`
  std::vector<std::vector<SemanticMask>> optimized_masks;  // judged by `judge`
  std::vector<std::vector<ScsResult>> results;
  double init_agreement = 0.0;
  double optimized_agreement = 0.0;
};

/// n_targets x samples_per_target conditional samples; agreement is scored
/// with `judge`, independently of the probe that drives the optimization.
inline ScsRun scs_experiment(const SyntheticGenerator& gen, const Segmenter& probe, const Segmenter& judge,
                             std::uint64_t seed, int n_targets, int samples_per_target, const OptSettings& settings) {
  if (n_targets < 1 || samples_per_target < 1) throw std::invalid_argument("scs_experiment: counts must be >= 1");
  ScsRun run;
  const int m = judge.num_classes();
  for (int i = 0; i < n_targets; ++i) {
    run.targets.push_back(scs_target(gen, seed, static_cast<std::size_t>(i)));
    run.init_masks.emplace_back();
    run.optimized_masks.emplace_back();
    run.results.emplace_back();
    for (int j = 0; j < samples_per_target; ++j) {
      ScsResult r = scs_sample(run.targets.back(), settings, gen, probe,
                               scs_sample_seed(seed, i, j, static_cast<std::size_t>(samples_per_target)));
      run.init_masks.back().push_back(judge.segment(r.init.latent, gen.generate(r.init.latent)));
      run.optimized_masks.back().push_back(judge.segment(r.optimized.latent, gen.generate(r.optimized.latent)));
      run.results.back().push_back(std::move(r));
    }
  }
  run.init_agreement = scs_agreement(run.targets, run.init_masks, m);
  run.optimized_agreement = scs_agreement(run.targets, run.optimized_masks, m);
  return run;
}

/// Simulated annotator: the first `shots` latents of the seed's annotation
/// stream, labelled by `seg`. Smaller shot counts are prefixes of larger ones.
inline std::vector<Annotation> fewshot_annotations(const Generator& gen, const Segmenter& seg, std::uint64_t seed,
                                                   int shots) {
  std::vector<Annotation> out;
  for (int i = 0; i < shots; ++i) {
    const LatentVector z = sample_latent(derive_seed(seed, "fewshot-annotation", i), gen.latent_dim());
    out.push_back({z, seg.segment(z, gen.generate(z))});
  }
  return out;
}

struct GeometryRun {
  FeaturePool pool;
  ClassCenters centers;
  Matrix confusion;
  ClassReport center_report;
  double diagonal_mean = 0.0;
  double off_diagonal_mean = 0.0;
};

inline GeometryRun geometry_experiment(const Generator& gen, const Segmenter& seg, const FairSampleOptions& opt,
                                       int eval_samples, std::vector<std::string> class_names = {}) {
  GeometryRun g;
  g.pool = fair_sample(gen, seg, opt, class_names);
  g.centers = class_centers(g.pool);
  g.confusion = cosine_confusion(g.pool);
  const int m = g.confusion.rows();
  for (int a = 0; a < m; ++a)
    for (int b = 0; b < m; ++b) (a == b ? g.diagonal_mean : g.off_diagonal_mean) += g.confusion(a, b);
  g.diagonal_mean /= m;
  g.off_diagonal_mean /= static_cast<double>(m) * (m - 1);

  class CenterSegmenter final : public Segmenter {
   public:
    explicit CenterSegmenter(const ClassCenters& c) : c_(c) {}
    int num_classes() const override { return c_.num_classes(); }
    SemanticMask segment(const LatentVector&, const FeatureStack& f) const override { return center_segment(f, c_); }

   private:
    const ClassCenters& c_;
  };
  const CenterSegmenter cs(g.centers);
  g.center_report = evaluate_probe(gen, seg, cs, eval_samples, opt.seed, std::move(class_names));
  return g;
}

}  // namespace linsem
