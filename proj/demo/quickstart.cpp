// Train a linear probe on the synthetic generator, score it, then use it to
// steer a latent towards an edited mask.

#include <cstdio>

#include "linsem/linsem.hpp"

using namespace linsem;

int main() {
  const SyntheticGenerator gen{GeneratorConfig{}};
  const AnalyticSegmenter truth(gen);

  const TrainResult<ProbeWeights> trained = train_lse(gen, truth, TrainSchedule::desk().scaled(0.25), {.seed = 1});
  const LsePredictor probe(trained.weights);
  std::printf("trained %zu iterations, final loss %.4f\n", trained.iterations, trained.loss_curve.back());
  std::printf("%s", to_table(evaluate_probe(gen, truth, probe, 64, 1)).c_str());

  // Paint a disc onto the probe's mask and move the latent to match it.
  const SieTrial t = sie_trial(gen, probe, 7, 0);
  const EditResult r = edit_latent(t.start, EditSpec::semantic(t.target), OptSettings::sie(), gen, &probe);
  std::printf("semantic loss %.4f -> %.4f over %d steps\n", r.trace.losses.front().semantic,
              r.trace.losses.back().semantic, OptSettings::sie().iterations);
  std::printf("target agreement %.4f -> %.4f\n",
              miou_pair(probe.segment(t.start, gen.generate(t.start)), t.target, gen.config().num_classes),
              miou_pair(probe.segment(r.latent, gen.generate(r.latent)), t.target, gen.config().num_classes));

  write_file("quickstart_target.pgm", encode_pgm(t.target));
  write_file("quickstart_before.ppm", encode_ppm(gen.generate(t.start).image));
  write_file("quickstart_after.ppm", encode_ppm(gen.generate(r.latent).image));
  return 0;
}
