#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "linsem/linsem.hpp"
#include "linsem/service.hpp"

using namespace linsem;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum ExitCode { kOk = 0, kRuntime = 1, kUsage = 2, kConfig = 3, kArchive = 4, kMismatch = 5 };

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  std::string out = ".";
  bool quiet = false;
};

GeneratorConfig load_generator_config(const Common& c) {
  GeneratorConfig cfg = c.config.empty() ? GeneratorConfig{} : load_config(c.config);
  cfg.validate();
  return cfg;
}

fs::path out_dir(const Common& c) {
  fs::create_directories(c.out);
  return fs::path(c.out);
}

void write_text(const fs::path& p, const std::string& s) { write_file(p.string(), s); }

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

class Progress {
 public:
  Progress(bool quiet, std::string label) : quiet_(quiet), label_(std::move(label)) {}
  void operator()(std::size_t it, std::size_t total, double loss) {
    if (quiet_) return;
    const auto now = std::chrono::steady_clock::now();
    if (it != total && now - last_ < std::chrono::seconds(2)) return;
    last_ = now;
    std::fprintf(stderr, "%s: %zu/%zu loss %.5f\n", label_.c_str(), it, total, loss);
  }

 private:
  bool quiet_;
  std::string label_;
  std::chrono::steady_clock::time_point last_{};
};

// Probe archives of any kind, checked against the generator.
struct AnyProbe {
  std::string kind;
  std::shared_ptr<const Segmenter> predictor;
  std::shared_ptr<const ProbeWeights> lse;
};

AnyProbe load_any_probe(const std::string& path, const SyntheticGenerator& gen) {
  const std::string bytes = read_file(path);
  const Archive a = decode_archive(bytes);
  if (!a.metadata.contains("probe_kind")) throw ArchiveFormatError("'" + path + "' holds no probe");
  AnyProbe p;
  p.kind = a.metadata["probe_kind"].get<std::string>();
  if (p.kind == "lse") {
    LoadedProbe lp = decode_probe(bytes);
    check_against(lp.weights.layer_depths, lp.info, gen);
    p.lse = std::make_shared<const ProbeWeights>(std::move(lp.weights));
    p.predictor = std::make_shared<LsePredictor>(p.lse);
  } else if (p.kind == "nse1" || p.kind == "nse2") {
    LoadedNse ln = decode_nse(bytes);
    check_against(ln.weights.layer_depths, ln.info, gen);
    p.predictor = std::make_shared<NsePredictor>(std::move(ln.weights));
  } else {
    throw ArchiveFormatError("'" + path + "' holds '" + p.kind + "', not probe weights");
  }
  if (p.predictor->num_classes() != gen.config().num_classes) {
    throw ArchiveMismatchError("probe class count does not match the generator");
  }
  return p;
}

std::vector<json> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest '" + path + "'");
  std::vector<json> rows;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[line.find_first_not_of(" \t")] == '#') continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw std::invalid_argument("manifest line " + std::to_string(n) + ": " + e.what());
    }
    if (!rows.back().is_object()) throw std::invalid_argument("manifest line " + std::to_string(n) + " is not an object");
  }
  return rows;
}

SemanticMask read_mask_file(const std::string& path, int res, int m) {
  SemanticMask y = decode_pgm(read_file(path));
  if (y.height != res || y.width != res) throw std::invalid_argument("mask '" + path + "' has the wrong size");
  y.check_labels(m);
  return y;
}

json losses_json(const OptimizationTrace& t) {
  json j = json::array();
  for (const LossBreakdown& l : t.losses) j.push_back(l.total);
  return j;
}

// ---------------------------------------------------------------------------
// Subcommands

struct TrainArgs {
  std::string kind = "lse";
  double scale = 1.0;
  bool reference = false;
  int hidden = 64;
};

int cmd_train(const Common& c, const TrainArgs& a) {
  const SyntheticGenerator gen(load_generator_config(c));
  const AnalyticSegmenter seg(gen);
  const ProbeKind kind = parse_probe_kind(a.kind);
  TrainSchedule s = a.reference ? TrainSchedule::reference() : TrainSchedule::desk();
  if (a.scale != 1.0) s = s.scaled(a.scale);
  Progress prog(c.quiet, "train-probe");
  TrainOptions opt;
  opt.seed = c.seed;
  opt.on_iteration = [&](const TrainProgress& p) { prog(p.iteration, p.total, p.loss); };
  const FullTrainResult r = train_full(gen, seg, s, kind, opt, a.hidden);
  ArchiveInfo info = archive_info_for(gen);
  info.iterations = r.iterations;
  const fs::path dir = out_dir(c);
  const fs::path archive = dir / (a.kind + ".tar");
  if (kind == ProbeKind::kLse) {
    save_probe(archive.string(), std::get<ProbeWeights>(r.weights), info);
  } else {
    write_file(archive.string(), encode_nse(std::get<NseWeights>(r.weights), info));
  }
  std::string curve;
  for (double l : r.loss_curve) curve += std::to_string(l) + "\n";
  write_text(dir / (a.kind + "_loss.txt"), curve);
  std::printf("%s: %zu iterations, final loss %.6f -> %s\n", a.kind.c_str(), r.iterations,
              r.loss_curve.empty() ? 0.0 : r.loss_curve.back(), archive.string().c_str());
  return kOk;
}

int cmd_eval(const Common& c, const std::vector<std::string>& probes, int samples) {
  const SyntheticGenerator gen(load_generator_config(c));
  const AnalyticSegmenter seg(gen);
  const fs::path dir = out_dir(c);
  std::vector<std::pair<std::string, ClassReport>> reports;
  for (const std::string& path : probes) {
    const AnyProbe p = load_any_probe(path, gen);
    ClassReport r = evaluate_probe(gen, seg, *p.predictor, samples, c.seed);
    const std::string stem = fs::path(path).stem().string();
    write_text(dir / ("eval_" + stem + ".txt"), to_table(r));
    write_json(dir / ("eval_" + stem + ".json"), to_json(r));
    std::printf("== %s (%s)\n%s", path.c_str(), p.kind.c_str(), to_table(r).c_str());
    reports.emplace_back(stem, std::move(r));
  }
  if (reports.size() > 1) {
    double best = 0.0;
    for (const auto& [n, r] : reports) best = std::max(best, r.miou);
    if (best > 0.0)
      for (const auto& [n, r] : reports) std::printf("%s\n", format_gap_row(n, r.miou, best).c_str());
  }
  return kOk;
}

int cmd_fewshot(const Common& c, int shots, int samples, std::optional<int> iterations) {
  const SyntheticGenerator gen(load_generator_config(c));
  const AnalyticSegmenter seg(gen);
  const std::vector<Annotation> ann = fewshot_annotations(gen, seg, c.seed, shots);
  Progress prog(c.quiet, "few-shot");
  FewShotOptions opt;
  opt.seed = c.seed;
  opt.iterations = iterations;
  opt.on_iteration = [&](const TrainProgress& p) { prog(p.iteration, p.total, p.loss); };
  const auto r = train_fewshot(gen, ann, shots, gen.config().num_classes, opt);
  ArchiveInfo info = archive_info_for(gen);
  info.shots = shots;
  info.iterations = r.iterations;
  const fs::path dir = out_dir(c);
  const fs::path archive = dir / ("fewshot_" + std::to_string(shots) + ".tar");
  save_probe(archive.string(), r.weights, info);
  std::printf("few-shot %d: %zu iterations -> %s\n", shots, r.iterations, archive.string().c_str());
  if (samples > 0) {
    const LsePredictor p(r.weights);
    const ClassReport rep = evaluate_probe(gen, seg, p, samples, c.seed);
    write_json(dir / ("fewshot_" + std::to_string(shots) + "_eval.json"), to_json(rep));
    std::printf("%s", to_table(rep).c_str());
  }
  return kOk;
}

int cmd_geometry(const Common& c, int t1, int t2, int max_images, int samples) {
  const SyntheticGenerator gen(load_generator_config(c));
  const AnalyticSegmenter seg(gen);
  const std::vector<std::string> names = default_class_names(gen.config().num_classes);
  const GeometryRun g = geometry_experiment(gen, seg, {t1, t2, max_images, c.seed}, samples, names);
  const fs::path dir = out_dir(c);
  ArchiveInfo info = archive_info_for(gen);
  write_file((dir / "geometry.tar").string(),
             encode_matrices("geometry", names, {{"centers", g.centers.centers}, {"confusion", g.confusion}}, info));
  // Heat-map-ready dump: header row of names, then one row per class.
  std::string dump = "class";
  for (const auto& n : names) dump += "\t" + n;
  dump += "\n";
  for (int a = 0; a < g.confusion.rows(); ++a) {
    dump += names[a];
    for (int b = 0; b < g.confusion.cols(); ++b) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "\t%.6f", g.confusion(a, b));
      dump += buf;
    }
    dump += "\n";
  }
  write_text(dir / "confusion.txt", dump);
  json rep = {{"images_seen", g.pool.images_seen},
              {"per_image_cap", t1},
              {"capacity", t2},
              {"diagonal_mean", g.diagonal_mean},
              {"off_diagonal_mean", g.off_diagonal_mean},
              {"center_segmentation", to_json(g.center_report)}};
  write_json(dir / "geometry_report.json", rep);
  std::printf("%s", dump.c_str());
  std::printf("diagonal mean %.4f, off-diagonal mean %.4f, images %zu\n", g.diagonal_mean, g.off_diagonal_mean,
              g.pool.images_seen);
  std::printf("center segmentation\n%s", to_table(g.center_report).c_str());
  return kOk;
}

struct OptArgs {
  std::string probe;
  std::string manifest;
  int samples = -1;
  int targets = 10;
  std::optional<int> iterations;
  std::optional<double> lr;
};

OptSettings cli_settings(OptSettings s, const OptArgs& a) {
  if (a.iterations) s.iterations = *a.iterations;
  if (a.lr) s.learning_rate = *a.lr;
  s.validate();
  return s;
}

int cmd_sie(const Common& c, const OptArgs& a) {
  const SyntheticGenerator gen(load_generator_config(c));
  const AnyProbe probe = load_any_probe(a.probe, gen);
  const Segmenter& p = *probe.predictor;
  const OptSettings base = cli_settings(OptSettings::sie(), a);
  std::vector<json> rows;
  if (!a.manifest.empty()) {
    rows = read_manifest(a.manifest);
  } else {
    const int n = a.samples < 0 ? 100 : a.samples;
    for (int i = 0; i < n; ++i) rows.push_back({{"index", i}});
  }
  const fs::path dir = out_dir(c);
  std::ofstream results(dir / "sie_results.jsonl");
  int improved = 0;
  const int res = gen.output_resolution();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const json& row = rows[r];
    const std::uint64_t seed = row.value("seed", c.seed);
    const std::size_t index = row.value("index", r);
    SieTrial t = sie_trial(gen, p, seed, index);
    if (row.contains("target")) t.target = read_mask_file(row["target"].get<std::string>(), res, p.num_classes());
    const OptSettings s = settings_with_overrides(row.value("settings", json()), base);
    const EditResult e = edit_latent(t.start, EditSpec::semantic(t.target), s, gen, &p);
    const double before = e.trace.losses.front().semantic;
    const double after = e.trace.losses.back().semantic;
    improved += after < before;
    const std::string stem = "sie_" + std::to_string(r);
    write_file((dir / (stem + "_target.pgm")).string(), encode_pgm(t.target));
    write_file((dir / (stem + "_result.pgm")).string(), encode_pgm(p.segment(e.latent, gen.generate(e.latent))));
    write_file((dir / (stem + "_image.ppm")).string(), encode_ppm(gen.generate(e.latent).image));
    results << json{{"row", r},
                    {"seed", seed},
                    {"index", index},
                    {"initial_semantic_loss", before},
                    {"final_semantic_loss", after},
                    {"losses", losses_json(e.trace)},
                    {"final_latent", e.latent.values},
                    {"target_mask", stem + "_target.pgm"},
                    {"result_mask", stem + "_result.pgm"}}
                   .dump()
            << "\n";
  }
  json summary = {{"runs", rows.size()}, {"improved", improved}};
  write_json(dir / "sie_summary.json", summary);
  std::printf("sie: L_s reduced in %d/%zu runs\n", improved, rows.size());
  return kOk;
}

int cmd_scs(const Common& c, const OptArgs& a) {
  const SyntheticGenerator gen(load_generator_config(c));
  const AnalyticSegmenter judge(gen);
  const AnyProbe probe = load_any_probe(a.probe, gen);
  const Segmenter& p = *probe.predictor;
  const OptSettings base = cli_settings(OptSettings::scs(), a);
  const int per_target = a.samples < 0 ? 3 : a.samples;
  std::vector<json> rows;
  if (!a.manifest.empty()) {
    rows = read_manifest(a.manifest);
  } else {
    for (int i = 0; i < a.targets; ++i) rows.push_back({{"index", i}});
  }
  const int m = p.num_classes();
  const int res = gen.output_resolution();
  const fs::path dir = out_dir(c);
  std::ofstream results(dir / "scs_results.jsonl");
  std::vector<SemanticMask> targets;
  std::vector<std::vector<SemanticMask>> init_sets, opt_sets;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const json& row = rows[r];
    const std::uint64_t seed = row.value("seed", c.seed);
    const std::size_t index = row.value("index", r);
    const int n = row.value("samples", per_target);
    if (n < 1) throw std::invalid_argument("manifest row " + std::to_string(r) + ": samples must be >= 1");
    const SemanticMask y = row.contains("target") ? read_mask_file(row["target"].get<std::string>(), res, m)
                                                  : scs_target(gen, seed, index);
    const OptSettings s = settings_with_overrides(row.value("settings", json()), base);
    targets.push_back(y);
    init_sets.emplace_back();
    opt_sets.emplace_back();
    const std::string stem = "scs_" + std::to_string(r);
    write_file((dir / (stem + "_target.pgm")).string(), encode_pgm(y));
    for (int j = 0; j < n; ++j) {
      const ScsResult sr = scs_sample(y, s, gen, p, scs_sample_seed(seed, index, j, static_cast<std::size_t>(n)));
      init_sets.back().push_back(judge.segment(sr.init.latent, gen.generate(sr.init.latent)));
      opt_sets.back().push_back(judge.segment(sr.optimized.latent, gen.generate(sr.optimized.latent)));
      const std::string sample = stem + "_" + std::to_string(j);
      write_file((dir / (sample + "_image.ppm")).string(), encode_ppm(gen.generate(sr.optimized.latent).image));
      write_file((dir / (sample + "_mask.pgm")).string(), encode_pgm(opt_sets.back().back()));
      results << json{{"row", r},
                      {"sample", j},
                      {"seed", seed},
                      {"init_index", sr.init.index},
                      {"init_agreement", miou_pair(init_sets.back().back(), y, m)},
                      {"agreement", miou_pair(opt_sets.back().back(), y, m)},
                      {"losses", losses_json(sr.optimized.trace)},
                      {"final_latent", sr.optimized.latent.values},
                      {"mask", sample + "_mask.pgm"}}
                     .dump()
              << "\n";
    }
  }
  if (targets.empty()) throw std::invalid_argument("scs: no targets");
  const double before = scs_agreement(targets, init_sets, m);
  const double after = scs_agreement(targets, opt_sets, m);
  write_json(dir / "scs_summary.json",
             {{"targets", targets.size()}, {"init_agreement", before}, {"optimized_agreement", after}});
  std::printf("scs: agreement %.4f (initializations) -> %.4f (optimized)\n", before, after);
  return kOk;
}

int cmd_serve(const Common& c, const std::string& probe_path, const std::string& host, int port, int workers) {
  const GeneratorConfig cfg = load_generator_config(c);
  std::shared_ptr<const ProbeWeights> probe;
  if (!probe_path.empty()) {
    const SyntheticGenerator gen(cfg);
    const AnyProbe p = load_any_probe(probe_path, gen);
    if (!p.lse) throw std::invalid_argument("the service needs LSE weights");
    probe = p.lse;
  }
  ServiceConfig sc;
  sc.seed = c.seed;
  sc.workers = workers;
  Service service(cfg, probe, sc);
  ServiceServer server(service, host, port);
  std::printf("listening on http://%s:%d\n", host.c_str(), server.port());
  std::fflush(stdout);
  server.run();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"linsem: linear semantic extraction toolkit"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "generator config file (key = value)");
    sub->add_option("--seed", common.seed, "master seed");
    sub->add_option("--out", common.out, "output directory");
    sub->add_flag("--quiet", common.quiet, "no progress output");
  };

  TrainArgs train;
  auto* sub_train = app.add_subcommand("train-probe", "train an LSE or NSE probe on the testbed");
  add_common(sub_train);
  sub_train->add_option("--kind", train.kind, "lse | nse1 | nse2")->check(CLI::IsMember({"lse", "nse1", "nse2"}));
  sub_train->add_option("--scale", train.scale, "multiply the schedule's sample counts")->check(CLI::PositiveNumber);
  sub_train->add_flag("--reference-schedule", train.reference, "51,200-sample schedule instead of the desk one");
  sub_train->add_option("--hidden", train.hidden, "NSE hidden width")->check(CLI::PositiveNumber);

  std::vector<std::string> eval_probes;
  int eval_samples = 256;
  auto* sub_eval = app.add_subcommand("eval-probe", "score probes against the analytic masks");
  add_common(sub_eval);
  sub_eval->add_option("--probe", eval_probes, "weights archive (repeatable)")->required();
  sub_eval->add_option("--samples", eval_samples, "evaluation images")->check(CLI::PositiveNumber);

  int shots = 8;
  int fs_samples = 256;
  std::optional<int> fs_iterations;
  auto* sub_fs = app.add_subcommand("few-shot", "train an LSE from a few annotated images");
  add_common(sub_fs);
  sub_fs->add_option("--shots", shots, "1, 4, 8 or 16")->check(CLI::IsMember({1, 4, 8, 16}));
  sub_fs->add_option("--samples", fs_samples, "evaluation images (0 skips evaluation)")->check(CLI::NonNegativeNumber);
  sub_fs->add_option("--iterations", fs_iterations, "override the planned step count")->check(CLI::PositiveNumber);

  int t1 = 20, t2 = 400, max_images = 10000, geo_samples = 64;
  auto* sub_geo = app.add_subcommand("geometry", "class centres, cosine confusion and centre segmentation");
  add_common(sub_geo);
  sub_geo->add_option("--t1", t1, "per-image cap")->check(CLI::PositiveNumber);
  sub_geo->add_option("--t2", t2, "pool capacity")->check(CLI::PositiveNumber);
  sub_geo->add_option("--max-images", max_images, "sampling guard")->check(CLI::PositiveNumber);
  sub_geo->add_option("--samples", geo_samples, "evaluation images")->check(CLI::PositiveNumber);

  OptArgs sie, scs;
  auto add_opt = [](CLI::App* sub, OptArgs& a) {
    sub->add_option("--probe", a.probe, "weights archive")->required();
    sub->add_option("--manifest", a.manifest, "JSON-lines manifest of runs");
    sub->add_option("--iterations", a.iterations, "Adam steps")->check(CLI::NonNegativeNumber);
    sub->add_option("--lr", a.lr, "learning rate")->check(CLI::PositiveNumber);
  };
  auto* sub_sie = app.add_subcommand("sie", "semantic image editing runs");
  add_common(sub_sie);
  add_opt(sub_sie, sie);
  sub_sie->add_option("--samples", sie.samples, "number of seeded trials")->check(CLI::NonNegativeNumber);

  auto* sub_scs = app.add_subcommand("scs", "semantic-conditional sampling runs");
  add_common(sub_scs);
  add_opt(sub_scs, scs);
  sub_scs->add_option("--targets", scs.targets, "number of seeded targets")->check(CLI::PositiveNumber);
  sub_scs->add_option("--samples", scs.samples, "samples per target")->check(CLI::PositiveNumber);

  std::string serve_probe, host = "127.0.0.1";
  int port = 8080, workers = 2;
  auto* sub_serve = app.add_subcommand("serve", "HTTP service for the mask editor");
  add_common(sub_serve);
  sub_serve->add_option("--probe", serve_probe, "LSE weights archive");
  sub_serve->add_option("--host", host, "bind address");
  sub_serve->add_option("--port", port, "port (0 picks a free one)")->check(CLI::Range(0, 65535));
  sub_serve->add_option("--workers", workers, "optimization worker threads")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*sub_train) return cmd_train(common, train);
    if (*sub_eval) return cmd_eval(common, eval_probes, eval_samples);
    if (*sub_fs) return cmd_fewshot(common, shots, fs_samples, fs_iterations);
    if (*sub_geo) return cmd_geometry(common, t1, t2, max_images, geo_samples);
    if (*sub_sie) return cmd_sie(common, sie);
    if (*sub_scs) return cmd_scs(common, scs);
    if (*sub_serve) return cmd_serve(common, serve_probe, host, port, workers);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const ArchiveMismatchError& e) {
    std::fprintf(stderr, "archive mismatch: %s\n", e.what());
    return kMismatch;
  } catch (const ArchiveFormatError& e) {
    std::fprintf(stderr, "archive error: %s\n", e.what());
    return kArchive;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntime;
  }
  return kUsage;
}
