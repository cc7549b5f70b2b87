#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "linsem/generator.hpp"
#include "linsem/tensor.hpp"

namespace linsem {

/// |A n B| / |A u B|, or nullopt when the union is empty.
inline std::optional<double> iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.height != b.height || a.width != b.width) throw ShapeError("iou: canvas size mismatch");
  std::size_t inter = 0;
  std::size_t uni = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    inter += (a.bits[i] && b.bits[i]) ? 1 : 0;
    uni += (a.bits[i] || b.bits[i]) ? 1 : 0;
  }
  if (uni == 0) return std::nullopt;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

/// Per-class IoU averaged over the instances where that class's union is
/// non-empty; classes with no such instance are absent and excluded from mIoU.
struct ClassReport {
  std::vector<std::string> class_names;
  std::vector<std::optional<double>> per_class;
  double miou = 0.0;
  std::size_t samples = 0;

  std::size_t present_classes() const {
    return static_cast<std::size_t>(std::count_if(per_class.begin(), per_class.end(),
                                                  [](const auto& v) { return v.has_value(); }));
  }

  friend bool operator==(const ClassReport&, const ClassReport&) = default;
};

namespace detail {

struct ClassAccumulator {
  std::vector<double> sum;
  std::vector<std::size_t> count;

  explicit ClassAccumulator(int m) : sum(m, 0.0), count(m, 0) {}

  void add(const SemanticMask& pred, const SemanticMask& gt) {
    if (pred.height != gt.height || pred.width != gt.width) throw ShapeError("miou: mask size mismatch");
    const int m = static_cast<int>(sum.size());
    pred.check_labels(m);
    gt.check_labels(m);
    std::vector<std::size_t> inter(m, 0), np(m, 0), ng(m, 0);
    for (std::size_t i = 0; i < pred.labels.size(); ++i) {
      ++np[pred.labels[i]];
      ++ng[gt.labels[i]];
      if (pred.labels[i] == gt.labels[i]) ++inter[pred.labels[i]];
    }
    for (int k = 0; k < m; ++k) {
      const std::size_t uni = np[k] + ng[k] - inter[k];
      if (uni == 0) continue;
      sum[k] += static_cast<double>(inter[k]) / static_cast<double>(uni);
      ++count[k];
    }
  }

  ClassReport report(std::size_t samples, std::vector<std::string> names) const {
    ClassReport r;
    r.class_names = std::move(names);
    r.samples = samples;
    double total = 0.0;
    std::size_t present = 0;
    for (std::size_t k = 0; k < sum.size(); ++k) {
      if (count[k] == 0) {
        r.per_class.push_back(std::nullopt);
        continue;
      }
      const double v = sum[k] / static_cast<double>(count[k]);
      r.per_class.push_back(v);
      total += v;
      ++present;
    }
    r.miou = present ? total / static_cast<double>(present) : 0.0;
    return r;
  }
};

}  // namespace detail

inline ClassReport miou(std::span<const SemanticMask> preds, std::span<const SemanticMask> gts, int num_classes,
                        std::vector<std::string> class_names = {}) {
  if (preds.size() != gts.size()) throw std::invalid_argument("miou: prediction and label counts differ");
  if (preds.empty()) throw std::invalid_argument("miou: no instances");
  if (class_names.empty()) class_names = default_class_names(num_classes);
  detail::ClassAccumulator acc(num_classes);
  for (std::size_t i = 0; i < preds.size(); ++i) acc.add(preds[i], gts[i]);
  return acc.report(preds.size(), std::move(class_names));
}

/// mIoU of a single (prediction, target) pair.
inline double miou_pair(const SemanticMask& pred, const SemanticMask& gt, int num_classes) {
  detail::ClassAccumulator acc(num_classes);
  acc.add(pred, gt);
  return acc.report(1, default_class_names(num_classes)).miou;
}

/// Latent for the j-th evaluation sample; the "eval" stream never overlaps the
/// "train" stream used by the trainers.
inline LatentVector evaluation_latent(std::uint64_t seed, std::size_t j, int dim) {
  return sample_latent(derive_seed(seed, "eval", j), dim);
}

/// Scores `probe` against `reference` on freshly sampled latents.
inline ClassReport evaluate_probe(const Generator& gen, const Segmenter& reference, const Segmenter& probe,
                                  int n_samples, std::uint64_t seed,
                                  std::vector<std::string> class_names = {}) {
  if (n_samples < 1) throw std::invalid_argument("evaluate_probe: n_samples must be >= 1");
  const int m = reference.num_classes();
  if (class_names.empty()) class_names = default_class_names(m);
  detail::ClassAccumulator acc(m);
  for (int j = 0; j < n_samples; ++j) {
    const LatentVector z = evaluation_latent(seed, static_cast<std::size_t>(j), gen.latent_dim());
    const FeatureStack f = gen.generate(z);
    acc.add(probe.segment(z, f), reference.segment(z, f));
  }
  return acc.report(static_cast<std::size_t>(n_samples), std::move(class_names));
}

/// (y - y*) / y*.
inline double relative_gap(double y, double y_star) {
  if (!(y_star > 0.0)) throw std::invalid_argument("relative_gap: reference must be positive");
  return (y - y_star) / y_star;
}

/// Classes whose IoU reaches `threshold` under at least one extractor.
inline std::vector<int> select_categories(std::span<const ClassReport> reports, double threshold = 0.10) {
  if (reports.empty()) throw std::invalid_argument("select_categories: no reports");
  const std::size_t m = reports.front().per_class.size();
  for (const ClassReport& r : reports) {
    if (r.per_class.size() != m) throw std::invalid_argument("select_categories: reports disagree on classes");
  }
  std::vector<int> kept;
  for (std::size_t k = 0; k < m; ++k) {
    for (const ClassReport& r : reports) {
      if (r.per_class[k] && *r.per_class[k] >= threshold) {
        kept.push_back(static_cast<int>(k));
        break;
      }
    }
  }
  return kept;
}

/// Mean over targets, and over each target's samples, of mIoU(target, sample mask).
inline double scs_agreement(std::span<const SemanticMask> targets,
                            std::span<const std::vector<SemanticMask>> sample_sets, int num_classes) {
  if (targets.size() != sample_sets.size()) throw std::invalid_argument("scs_agreement: target/sample-set count mismatch");
  if (targets.empty()) throw std::invalid_argument("scs_agreement: no targets");
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (sample_sets[i].empty()) throw std::invalid_argument("scs_agreement: empty sample set for target " + std::to_string(i));
    double s = 0.0;
    for (const SemanticMask& m : sample_sets[i]) s += miou_pair(m, targets[i], num_classes);
    total += s / static_cast<double>(sample_sets[i].size());
  }
  return total / static_cast<double>(targets.size());
}

// ---------------------------------------------------------------------------
// Report formatting

inline std::string to_table(const ClassReport& r) {
  std::ostringstream os;
  os << "class\tiou\n";
  for (std::size_t k = 0; k < r.per_class.size(); ++k) {
    const std::string name = k < r.class_names.size() ? r.class_names[k] : std::to_string(k);
    os << name << '\t';
    if (r.per_class[k]) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.6f", *r.per_class[k]);
      os << buf;
    } else {
      os << "absent";
    }
    os << '\n';
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, "mIoU\t%.6f\nsamples\t%zu\n", r.miou, r.samples);
  os << buf;
  return os.str();
}

inline nlohmann::json to_json(const ClassReport& r) {
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t k = 0; k < r.per_class.size(); ++k) {
    nlohmann::json c;
    c["name"] = k < r.class_names.size() ? r.class_names[k] : std::to_string(k);
    c["iou"] = r.per_class[k] ? nlohmann::json(*r.per_class[k]) : nlohmann::json("absent");
    classes.push_back(std::move(c));
  }
  return {{"classes", classes}, {"miou", r.miou}, {"samples", r.samples}};
}

inline ClassReport report_from_json(const nlohmann::json& j) {
  ClassReport r;
  for (const auto& c : j.at("classes")) {
    r.class_names.push_back(c.at("name").get<std::string>());
    if (c.at("iou").is_string()) {
      r.per_class.push_back(std::nullopt);
    } else {
      r.per_class.push_back(c.at("iou").get<double>());
    }
  }
  r.miou = j.at("miou").get<double>();
  r.samples = j.at("samples").get<std::size_t>();
  return r;
}

/// One row in the style "LSE  79.7 (-1.6)": mIoU in percent with the gap to
/// the best extractor in brackets; the best row carries no bracket.
inline std::string format_gap_row(const std::string& name, double miou_value, double best) {
  char buf[96];
  if (miou_value >= best) {
    std::snprintf(buf, sizeof buf, "%-8s %5.1f", name.c_str(), 100.0 * miou_value);
  } else {
    std::snprintf(buf, sizeof buf, "%-8s %5.1f (%.1f)", name.c_str(), 100.0 * miou_value,
                  100.0 * relative_gap(miou_value, best));
  }
  return buf;
}

}  // namespace linsem
