#include <gtest/gtest.h>

#include <chrono>
#include <memory>
#include <string>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "linsem/service.hpp"
#include "linsem/train.hpp"
#include "test_util.hpp"

using namespace linsem;
using nlohmann::json;

namespace {

struct Resp {
  int status = 0;
  json body;
};

std::shared_ptr<const ProbeWeights> trained_probe(const GeneratorConfig& cfg, std::uint64_t seed = 1) {
  const SyntheticGenerator gen(cfg);
  const AnalyticSegmenter seg(gen);
  TrainSchedule s;
  s.total_samples = 128;
  s.samples_per_epoch = 64;
  s.phases = {{2, 1}, {10, 8}};
  s.learning_rate = 0.02;
  s.lr_drop_epoch = 10;
  ProbeWeights w = train_lse(gen, seg, s, {.seed = seed}).weights;
  return std::make_shared<const ProbeWeights>(std::move(w));
}

class Harness {
 public:
  explicit Harness(std::shared_ptr<const ProbeWeights> probe, ServiceConfig sc = {})
      : cfg_(testutil::small_config()), service_(cfg_, std::move(probe), sc), server_(service_), client_("127.0.0.1", server_.port()) {
    server_.start();
    client_.set_read_timeout(60, 0);
  }

  Resp get(const std::string& path) {
    auto r = client_.Get(path);
    if (!r) return {-1, nullptr};
    return {r->status, json::parse(r->body, nullptr, false)};
  }
  Resp post(const std::string& path, const json& body) { return post_raw(path, body.dump()); }
  Resp post_raw(const std::string& path, const std::string& body) {
    auto r = client_.Post(path, body, "application/json");
    if (!r) return {-1, nullptr};
    return {r->status, json::parse(r->body, nullptr, false)};
  }

  /// Polls a job until it ends; returns the observed iteration counts and the final snapshot.
  json poll(const std::string& job_id, std::vector<int>* seen = nullptr) {
    for (int i = 0; i < 20000; ++i) {
      const Resp r = get("/jobs/" + job_id);
      EXPECT_EQ(r.status, 200);
      if (seen) seen->push_back(r.body["iteration"].get<int>());
      const std::string st = r.body["state"];
      if (st == "done" || st == "failed") return r.body;
      std::this_thread::sleep_for(std::chrono::milliseconds(2));
    }
    ADD_FAILURE() << "job " << job_id << " did not finish";
    return nullptr;
  }

  std::string new_session(std::uint64_t seed = 7) {
    const Resp r = post("/session", {{"seed", seed}});
    EXPECT_EQ(r.status, 200);
    return r.body["session_id"];
  }

  const SyntheticGenerator& gen() const { return service_.generator(); }
  Service& service() { return service_; }
  int res() const { return cfg_.output_resolution(); }

 private:
  GeneratorConfig cfg_;
  Service service_;
  ServiceServer server_;
  httplib::Client client_;
};

std::string mask_b64(const SemanticMask& m) { return base64_encode(encode_pgm(m)); }

SemanticMask decode_b64_mask(const json& j) { return decode_pgm(base64_decode(j.get<std::string>())); }

}  // namespace

TEST(Service, HealthAndClasses) {
  Harness h(nullptr);
  EXPECT_EQ(h.get("/health").status, 200);
  const Resp c = h.get("/classes");
  ASSERT_EQ(c.status, 200);
  EXPECT_EQ(c.body["names"].size(), 3u);
  EXPECT_EQ(c.body["palette"].size(), 3u);
}

TEST(Service, SessionLifecycle) {
  Harness h(nullptr);
  const Resp r = h.post("/session", {{"seed", 11}});
  ASSERT_EQ(r.status, 200);
  EXPECT_EQ(r.body["latent"], sample_latent(11, h.gen().latent_dim()).values);
  EXPECT_FALSE(r.body.contains("mask"));  // no probe yet
  const Tensor3 img = decode_ppm(base64_decode(r.body["image"].get<std::string>()));
  EXPECT_EQ(img.height(), h.res());
  const Resp g = h.get("/session/" + r.body["session_id"].get<std::string>());
  ASSERT_EQ(g.status, 200);
  EXPECT_EQ(g.body["latent"], r.body["latent"]);
  EXPECT_EQ(g.body["history"], json::array({"create"}));
}

TEST(Service, UnknownSessionAndJobAre404) {
  Harness h(trained_probe(testutil::small_config()));
  EXPECT_EQ(h.get("/session/nope").status, 404);
  EXPECT_EQ(h.post("/session/nope/edit", {{"target", "x"}}).status, 404);
  EXPECT_EQ(h.post("/session/nope/undo", json::object()).status, 404);
  EXPECT_EQ(h.get("/jobs/job-999").status, 404);
  EXPECT_EQ(h.post("/annotations", {{"session_id", "nope"}, {"mask", "x"}}).status, 404);
}

TEST(Service, NoProbeGives409ForProbeRoutes) {
  Harness h(nullptr);
  const std::string id = h.new_session();
  const SemanticMask y(h.res(), h.res());
  EXPECT_EQ(h.post("/session/" + id + "/edit", {{"target", mask_b64(y)}}).status, 409);
  EXPECT_EQ(h.post("/scs", {{"target", mask_b64(y)}}).status, 409);
}

TEST(Service, MalformedRequestsAre400) {
  Harness h(trained_probe(testutil::small_config()));
  const std::string id = h.new_session();
  const std::string edit = "/session/" + id + "/edit";
  EXPECT_EQ(h.post_raw(edit, "{not json").status, 400);
  EXPECT_EQ(h.post_raw(edit, "[1,2]").status, 400);
  EXPECT_EQ(h.post(edit, json::object()).status, 400);                          // no target
  EXPECT_EQ(h.post(edit, {{"target", "@@@not base64"}}).status, 400);          // bad base64
  EXPECT_EQ(h.post(edit, {{"target", base64_encode("P5\n2 2\n")}}).status, 400);  // truncated PGM
  EXPECT_EQ(h.post(edit, {{"target", mask_b64(SemanticMask(8, 8))}}).status, 400);  // wrong size
  SemanticMask bad(h.res(), h.res());
  bad.at(0, 0) = 7;  // label out of range
  EXPECT_EQ(h.post(edit, {{"target", mask_b64(bad)}}).status, 400);
  const SemanticMask ok(h.res(), h.res());
  EXPECT_EQ(h.post(edit, {{"target", mask_b64(ok)}, {"mode", "sketch"}}).status, 400);
  EXPECT_EQ(h.post(edit, {{"target", mask_b64(ok)}, {"settings", {{"iterations", -1}}}}).status, 400);
  EXPECT_EQ(h.post(edit, {{"target", mask_b64(ok)}, {"settings", {{"iterations", 1000000}}}}).status, 400);
  EXPECT_EQ(h.post(edit, {{"target", mask_b64(ok)}, {"settings", {{"learning_rate", "fast"}}}}).status, 400);
  EXPECT_EQ(h.post(edit, {{"mode", "color"}, {"region", mask_b64(ok)}}).status, 400);  // no stroke
  EXPECT_EQ(h.post("/annotations", {{"latent", {1.0, 2.0}}, {"mask", mask_b64(ok)}}).status, 400);
  // The session is still usable afterwards.
  EXPECT_EQ(h.post(edit, {{"target", mask_b64(ok)}, {"wait", true}, {"settings", {{"iterations", 2}}}}).status, 200);
}

TEST(Service, SemanticEditWaitsAndUpdatesSession) {
  Harness h(trained_probe(testutil::small_config()));
  const std::string id = h.new_session(5);
  const LatentVector z0 = sample_latent(5, h.gen().latent_dim());
  const SemanticMask target = h.gen().analytic_mask(sample_latent(6, h.gen().latent_dim()));
  const Resp r = h.post("/session/" + id + "/edit",
                        {{"target", mask_b64(target)}, {"wait", true}, {"settings", {{"iterations", 20}}}});
  ASSERT_EQ(r.status, 200);
  EXPECT_EQ(r.body["state"], "done");
  const json& res = r.body["result"];
  EXPECT_EQ(res["loss_trace"].size(), 21u);
  EXPECT_LT(res["loss_trace"].back().get<double>(), res["loss_trace"].front().get<double>());
  EXPECT_NE(res["latent"], json(z0.values));
  EXPECT_EQ(decode_b64_mask(res["mask"]).width, h.res());
  const Resp g = h.get("/session/" + id);
  EXPECT_EQ(g.body["latent"], res["latent"]);
  EXPECT_EQ(g.body["history"], json::array({"create", "edit:semantic"}));
}

TEST(Service, ColorEditNeedsNoProbe) {
  Harness h(nullptr);
  const std::string id = h.new_session();
  Tensor3 stroke(3, h.res(), h.res());
  for (double& v : stroke.data()) v = 1.0;
  SemanticMask region(h.res(), h.res());
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) region.at(y, x) = 1;
  const Resp r = h.post("/session/" + id + "/edit", {{"mode", "color"},
                                                     {"stroke", base64_encode(encode_ppm(stroke))},
                                                     {"region", mask_b64(region)},
                                                     {"wait", true},
                                                     {"settings", {{"iterations", 5}}}});
  ASSERT_EQ(r.status, 200) << r.body.dump();
  EXPECT_EQ(r.body["state"], "done");
}

TEST(Service, ConcurrentEditsOnOneSessionGet409) {
  ServiceConfig sc;
  sc.max_iterations = 100000;
  Harness h(trained_probe(testutil::small_config()), sc);
  const std::string id = h.new_session();
  const std::string other = h.new_session(8);
  const SemanticMask target = h.gen().analytic_mask(sample_latent(9, h.gen().latent_dim()));
  const json body = {{"target", mask_b64(target)}, {"settings", {{"iterations", 20000}}}};
  const Resp first = h.post("/session/" + id + "/edit", body);
  ASSERT_EQ(first.status, 202);
  // The session is claimed before the first request returns.
  EXPECT_EQ(h.post("/session/" + id + "/edit", body).status, 409);
  EXPECT_EQ(h.post("/session/" + id + "/undo", json::object()).status, 409);
  // Other sessions are unaffected.
  const Resp second = h.post("/session/" + other + "/edit",
                             {{"target", mask_b64(target)}, {"wait", true}, {"settings", {{"iterations", 3}}}});
  EXPECT_EQ(second.status, 200);
  EXPECT_EQ(h.poll(first.body["job_id"])["state"], "done");
  // Released after completion.
  EXPECT_EQ(h.post("/session/" + id + "/edit",
                   {{"target", mask_b64(target)}, {"wait", true}, {"settings", {{"iterations", 1}}}})
                .status,
            200);
}

TEST(Service, JobProgressIsMonotone) {
  ServiceConfig sc;
  sc.max_iterations = 100000;
  Harness h(trained_probe(testutil::small_config()), sc);
  const std::string id = h.new_session();
  const SemanticMask target = h.gen().analytic_mask(sample_latent(9, h.gen().latent_dim()));
  const Resp r = h.post("/session/" + id + "/edit", {{"target", mask_b64(target)}, {"settings", {{"iterations", 4000}}}});
  ASSERT_EQ(r.status, 202);
  std::vector<int> seen;
  const json fin = h.poll(r.body["job_id"], &seen);
  EXPECT_EQ(fin["state"], "done");
  EXPECT_EQ(fin["iteration"], 4000);
  EXPECT_EQ(fin["total"], 4000);
  EXPECT_GE(seen.size(), 2u);
  for (std::size_t i = 1; i < seen.size(); ++i) EXPECT_LE(seen[i - 1], seen[i]);
}

TEST(Service, UndoRestoresAndHistoryIsAppendOnly) {
  Harness h(trained_probe(testutil::small_config()));
  const std::string id = h.new_session(21);
  EXPECT_EQ(h.post("/session/" + id + "/undo", json::object()).status, 400);  // nothing to undo
  const json start = h.get("/session/" + id).body["latent"];
  const SemanticMask target = h.gen().analytic_mask(sample_latent(22, h.gen().latent_dim()));
  const json edit = {{"target", mask_b64(target)}, {"wait", true}, {"settings", {{"iterations", 5}}}};
  const json after1 = h.post("/session/" + id + "/edit", edit).body["result"]["latent"];
  const json after2 = h.post("/session/" + id + "/edit", edit).body["result"]["latent"];
  EXPECT_NE(after1, after2);
  Resp u = h.post("/session/" + id + "/undo", json::object());
  ASSERT_EQ(u.status, 200);
  EXPECT_EQ(u.body["latent"], after1);
  u = h.post("/session/" + id + "/undo", json::object());
  EXPECT_EQ(u.body["latent"], start);
  EXPECT_EQ(h.post("/session/" + id + "/undo", json::object()).status, 400);
  EXPECT_EQ(u.body["history"],
            json::array({"create", "edit:semantic", "edit:semantic", "undo", "undo"}));
  EXPECT_EQ(u.body["history_length"], 5);
}

TEST(Service, ScsZeroSamplesAndWaitedRun) {
  Harness h(trained_probe(testutil::small_config()));
  const SemanticMask target = h.gen().analytic_mask(sample_latent(30, h.gen().latent_dim(), 0.5));
  Resp r = h.post("/scs", {{"target", mask_b64(target)}, {"n_samples", 0}});
  ASSERT_EQ(r.status, 200);
  EXPECT_TRUE(r.body["samples"].is_array());
  EXPECT_TRUE(r.body["samples"].empty());
  EXPECT_EQ(h.post("/scs", {{"target", mask_b64(target)}, {"n_samples", -1}}).status, 400);
  EXPECT_EQ(h.post("/scs", {{"target", mask_b64(target)}, {"n_samples", 10000}}).status, 400);
  r = h.post("/scs", {{"target", mask_b64(target)}, {"n_samples", 2}, {"wait", true}, {"seed", 4},
                      {"settings", {{"iterations", 10}}}});
  ASSERT_EQ(r.status, 200);
  const json& res = r.body["result"];
  ASSERT_EQ(res["samples"].size(), 2u);
  for (const json& s : res["samples"]) {
    EXPECT_GE(s["agreement"].get<double>(), 0.0);
    EXPECT_LE(s["agreement"].get<double>(), 1.0);
    EXPECT_EQ(s["loss_trace"].size(), 11u);
  }
  // Seeded runs repeat.
  const Resp again = h.post("/scs", {{"target", mask_b64(target)}, {"n_samples", 2}, {"wait", true}, {"seed", 4},
                                     {"settings", {{"iterations", 10}}}});
  EXPECT_EQ(again.body["result"]["samples"][1]["latent"], res["samples"][1]["latent"]);
}

TEST(Service, FewShotNeedsAnnotations) {
  Harness h(nullptr);
  EXPECT_EQ(h.post("/train-fewshot", {{"shots", 1}}).status, 400);
  EXPECT_EQ(h.post("/train-fewshot", json::object()).status, 400);
  EXPECT_EQ(h.post("/train-fewshot", {{"shots", "one"}}).status, 400);
  const std::string id = h.new_session();
  const LatentVector z = sample_latent(7, h.gen().latent_dim());
  ASSERT_EQ(h.post("/annotations", {{"session_id", id}, {"mask", mask_b64(h.gen().analytic_mask(z))}}).status, 200);
  EXPECT_EQ(h.post("/train-fewshot", {{"shots", 4}}).status, 400);  // only one stored
  EXPECT_EQ(h.post("/train-fewshot", {{"shots", 3}}).status, 400);  // not a planned shot count
  EXPECT_EQ(h.get("/annotations").body["count"], 1);
}

TEST(Service, FewShotTrainsAndInstallsProbe) {
  Harness h(nullptr);
  for (std::uint64_t k = 0; k < 4; ++k) {
    const LatentVector z = sample_latent(100 + k, h.gen().latent_dim());
    const Resp a = h.post("/annotations", {{"latent", z.values}, {"mask", mask_b64(h.gen().analytic_mask(z))}});
    ASSERT_EQ(a.status, 200);
    EXPECT_EQ(a.body["annotation_id"], k);
  }
  const Resp r = h.post("/train-fewshot", {{"shots", 4}, {"iterations", 300}});
  ASSERT_EQ(r.status, 202);
  std::vector<int> seen;
  const json fin = h.poll(r.body["job_id"], &seen);
  ASSERT_EQ(fin["state"], "done") << fin.dump();
  EXPECT_EQ(fin["result"]["shots"], 4);
  EXPECT_EQ(fin["result"]["iterations"], 300);
  for (std::size_t i = 1; i < seen.size(); ++i) EXPECT_LE(seen[i - 1], seen[i]);
  ASSERT_NE(h.service().probe(), nullptr);
  // Probe routes work now; the new probe beats chance on a fresh image.
  const std::string id = h.new_session(555);
  const json view = h.get("/session/" + id).body;
  ASSERT_TRUE(view.contains("mask"));
  const SemanticMask pred = decode_b64_mask(view["mask"]);
  const SemanticMask truth = h.gen().analytic_mask(sample_latent(555, h.gen().latent_dim()));
  int agree = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) agree += pred.labels[i] == truth.labels[i];
  EXPECT_GT(agree, static_cast<int>(pred.labels.size()) / 2);
}

TEST(Service, HotSwapKeepsInFlightJobsOnTheirSnapshot) {
  ServiceConfig sc;
  sc.max_iterations = 100000;
  const GeneratorConfig cfg = testutil::small_config();
  Harness h(trained_probe(cfg, 1), sc);
  const std::string id = h.new_session(40);
  const SemanticMask target = h.gen().analytic_mask(sample_latent(41, h.gen().latent_dim()));
  const Resp r = h.post("/session/" + id + "/edit", {{"target", mask_b64(target)}, {"settings", {{"iterations", 3000}}}});
  ASSERT_EQ(r.status, 202);
  // Swap to a probe that labels everything background.
  auto zero = std::make_shared<ProbeWeights>(*h.service().probe());
  *zero *= 0.0;
  h.service().swap_probe(zero);
  const json fin = h.poll(r.body["job_id"]);
  ASSERT_EQ(fin["state"], "done");
  // The in-flight edit still used the trained probe: its loss fell below ln 3.
  EXPECT_LT(fin["result"]["loss_trace"].back().get<double>(), std::log(3.0));
  // New requests see the swapped probe.
  const SemanticMask now = decode_b64_mask(h.get("/session/" + id).body["mask"]);
  for (int v : now.labels) EXPECT_EQ(v, 0);
  // Mismatched probes are refused.
  EXPECT_THROW(h.service().swap_probe(std::make_shared<const ProbeWeights>(ProbeWeights::zeros(3, {4, 4}))),
               std::invalid_argument);
}

TEST(Service, QueueOverflowIs503) {
  ServiceConfig sc;
  sc.workers = 1;
  sc.max_queued_jobs = 1;
  sc.max_iterations = 100000;
  Harness h(trained_probe(testutil::small_config()), sc);
  const SemanticMask target = h.gen().analytic_mask(sample_latent(9, h.gen().latent_dim()));
  int accepted = 0, rejected = 0;
  std::vector<std::string> jobs;
  for (int i = 0; i < 4; ++i) {
    const std::string id = h.new_session(60 + i);
    const Resp r = h.post("/session/" + id + "/edit", {{"target", mask_b64(target)}, {"settings", {{"iterations", 3000}}}});
    if (r.status == 202) {
      ++accepted;
      jobs.push_back(r.body["job_id"]);
    } else {
      EXPECT_EQ(r.status, 503);
      ++rejected;
      // A rejected edit releases its session.
      EXPECT_EQ(h.post("/session/" + id + "/undo", json::object()).status, 400);
    }
  }
  EXPECT_GE(rejected, 1);
  EXPECT_LE(accepted, 3);
  for (const auto& j : jobs) EXPECT_EQ(h.poll(j)["state"], "done");
}
