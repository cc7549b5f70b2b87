#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "httplib.h"
#include "json.hpp"
#include "linsem/experiments.hpp"
#include "linsem/generator.hpp"
#include "linsem/latentopt.hpp"
#include "linsem/metrics.hpp"
#include "linsem/probe.hpp"
#include "linsem/train.hpp"
#include "linsem/wire.hpp"

namespace linsem {

/// Fixed set of worker threads draining a bounded FIFO queue.
class WorkerPool {
 public:
  WorkerPool(int threads, std::size_t max_queued) : max_queued_(max_queued) {
    if (threads < 1) throw std::invalid_argument("worker pool needs at least one thread");
    for (int i = 0; i < threads; ++i) threads_.emplace_back([this] { run(); });
  }
  ~WorkerPool() {
    {
      std::lock_guard lock(mu_);
      stopping_ = true;
    }
    cv_.notify_all();
    for (std::thread& t : threads_) t.join();
  }
  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

  /// False when the queue is full.
  bool submit(std::function<void()> task) {
    {
      std::lock_guard lock(mu_);
      if (queue_.size() >= max_queued_) return false;
      queue_.push_back(std::move(task));
    }
    cv_.notify_one();
    return true;
  }

 private:
  void run() {
    while (true) {
      std::function<void()> task;
      {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
        if (queue_.empty()) return;
        task = std::move(queue_.front());
        queue_.pop_front();
      }
      task();
    }
  }

  std::size_t max_queued_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::function<void()>> queue_;
  bool stopping_ = false;
  std::vector<std::thread> threads_;
};

enum class JobState { kQueued, kRunning, kDone, kFailed };

inline std::string_view to_string(JobState s) {
  switch (s) {
    case JobState::kQueued: return "queued";
    case JobState::kRunning: return "running";
    case JobState::kDone: return "done";
    case JobState::kFailed: return "failed";
  }
  return "unknown";
}

/// A long-running optimization, polled through /jobs/{id}.
class Job {
 public:
  Job(std::string id, std::string kind) : id_(std::move(id)), kind_(std::move(kind)) {}

  const std::string& id() const { return id_; }

  void start(int total) {
    std::lock_guard lock(mu_);
    state_ = JobState::kRunning;
    total_ = total;
  }
  /// Iteration counts only move forward.
  void progress(int iteration) {
    std::lock_guard lock(mu_);
    iteration_ = std::max(iteration_, iteration);
  }
  void finish(nlohmann::json result) {
    {
      std::lock_guard lock(mu_);
      state_ = JobState::kDone;
      iteration_ = std::max(iteration_, total_);
      result_ = std::move(result);
    }
    cv_.notify_all();
  }
  void fail(std::string error, nlohmann::json detail = nullptr) {
    {
      std::lock_guard lock(mu_);
      state_ = JobState::kFailed;
      error_ = std::move(error);
      result_ = std::move(detail);
    }
    cv_.notify_all();
  }
  void wait() const {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [this] { return state_ == JobState::kDone || state_ == JobState::kFailed; });
  }
  JobState state() const {
    std::lock_guard lock(mu_);
    return state_;
  }

  nlohmann::json snapshot() const {
    std::lock_guard lock(mu_);
    nlohmann::json j{{"job_id", id_}, {"kind", kind_}, {"state", to_string(state_)},
                     {"iteration", iteration_}, {"total", total_}};
    if (state_ == JobState::kDone) j["result"] = result_;
    if (state_ == JobState::kFailed) {
      j["error"] = error_;
      if (!result_.is_null()) j["detail"] = result_;
    }
    return j;
  }

 private:
  std::string id_;
  std::string kind_;
  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  JobState state_ = JobState::kQueued;
  int iteration_ = 0;
  int total_ = 0;
  nlohmann::json result_;
  std::string error_;
};

struct HistoryEntry {
  LatentVector latent;
  std::string action;  // "create", "edit:<mode>" or "undo"
};

/// One user's editing state. Mutations are single-writer: `busy` is claimed
/// for the duration of an edit and concurrent writers get 409.
struct Session {
  std::string id;
  std::string config_hash;
  std::chrono::system_clock::time_point created;
  std::atomic<bool> busy{false};
  mutable std::mutex mu;
  LatentVector latent;
  std::vector<HistoryEntry> history;  // append-only
  std::vector<std::size_t> states;    // history indices forming the undo stack
};

struct ServiceConfig {
  int workers = 2;
  std::size_t max_queued_jobs = 64;
  std::uint64_t seed = 0;
  OptSettings sie = OptSettings::sie();
  OptSettings scs = OptSettings::scs();
  std::size_t max_annotations = 16;
  int max_iterations = 10000;
  int max_scs_samples = 64;
};

/// HTTP error with a status code; handlers throw it and the router replies.
class HttpError : public std::runtime_error {
 public:
  HttpError(int status, const std::string& msg) : std::runtime_error(msg), status(status) {}
  int status;
};

/// The generate / segment / annotate / edit / sample loop over HTTP.
class Service {
 public:
  Service(GeneratorConfig cfg, std::shared_ptr<const ProbeWeights> probe, ServiceConfig config = {})
      : gen_(std::move(cfg)), reference_(gen_), config_(std::move(config)),
        pool_(std::make_unique<WorkerPool>(config_.workers, config_.max_queued_jobs)) {
    if (probe) swap_probe(std::move(probe));
  }
  ~Service() { pool_.reset(); }

  const SyntheticGenerator& generator() const { return gen_; }

  std::shared_ptr<const ProbeWeights> probe() const {
    std::lock_guard lock(probe_mu_);
    return probe_;
  }

  /// Requests already holding the old snapshot finish on it.
  void swap_probe(std::shared_ptr<const ProbeWeights> p) {
    p->validate();
    if (p->layer_depths != gen_.layer_depths()) throw std::invalid_argument("probe does not match the generator");
    std::lock_guard lock(probe_mu_);
    probe_ = std::move(p);
  }

  void mount(httplib::Server& srv) {
    srv.Get("/health", wrap([](const httplib::Request&) { return reply(200, {{"status", "ok"}}); }));
    srv.Get("/classes", wrap([this](const httplib::Request&) { return classes(); }));
    srv.Post("/session", wrap([this](const httplib::Request& r) { return create_session(r); }));
    srv.Get(R"(/session/([^/]+))", wrap([this](const httplib::Request& r) { return get_session(r); }));
    srv.Post(R"(/session/([^/]+)/edit)", wrap([this](const httplib::Request& r) { return edit(r); }));
    srv.Post(R"(/session/([^/]+)/undo)", wrap([this](const httplib::Request& r) { return undo(r); }));
    srv.Post("/scs", wrap([this](const httplib::Request& r) { return scs(r); }));
    srv.Post("/annotations", wrap([this](const httplib::Request& r) { return add_annotation(r); }));
    srv.Get("/annotations", wrap([this](const httplib::Request&) { return list_annotations(); }));
    srv.Post("/train-fewshot", wrap([this](const httplib::Request& r) { return train_fewshot_route(r); }));
    srv.Get(R"(/jobs/([^/]+))", wrap([this](const httplib::Request& r) { return get_job(r); }));
  }

 private:
  struct Reply {
    int status;
    nlohmann::json body;
  };

  static Reply reply(int status, nlohmann::json body) { return {status, std::move(body)}; }

  template <typename F>
  static httplib::Server::Handler wrap(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
      Reply r{500, nullptr};
      try {
        r = f(req);
      } catch (const HttpError& e) {
        r = {e.status, {{"error", e.what()}}};
      } catch (const nlohmann::json::exception& e) {
        r = {400, {{"error", std::string("malformed request: ") + e.what()}}};
      } catch (const std::invalid_argument& e) {
        r = {400, {{"error", e.what()}}};
      } catch (const std::out_of_range& e) {
        r = {400, {{"error", e.what()}}};
      } catch (const std::exception& e) {
        r = {500, {{"error", e.what()}}};
      }
      res.status = r.status;
      res.set_content(r.body.dump(), "application/json");
    };
  }

  static nlohmann::json body_of(const httplib::Request& req) {
    if (req.body.empty()) return nlohmann::json::object();
    nlohmann::json j = nlohmann::json::parse(req.body);
    if (!j.is_object()) throw HttpError(400, "request body must be a JSON object");
    return j;
  }

  std::shared_ptr<const ProbeWeights> require_probe() const {
    auto p = probe();
    if (!p) throw HttpError(409, "no probe loaded; train one with /train-fewshot first");
    return p;
  }

  SemanticMask decode_mask(const nlohmann::json& body, const char* key, int num_classes) const {
    if (!body.contains(key) || !body[key].is_string()) throw HttpError(400, std::string("missing mask field '") + key + "'");
    SemanticMask m = decode_pgm(base64_decode(body[key].get<std::string>()));
    const int res = gen_.output_resolution();
    if (m.height != res || m.width != res) {
      throw HttpError(400, "mask is " + std::to_string(m.width) + "x" + std::to_string(m.height) + ", canvas is " +
                               std::to_string(res) + "x" + std::to_string(res));
    }
    if (num_classes > 0) m.check_labels(num_classes);
    return m;
  }

  nlohmann::json render(const LatentVector& z, const std::shared_ptr<const ProbeWeights>& p) const {
    const FeatureStack f = gen_.generate(z);
    nlohmann::json j{{"latent", z.values}, {"image", base64_encode(encode_ppm(f.image))}};
    if (p) j["mask"] = base64_encode(encode_pgm(LsePredictor(p).segment(z, f)));
    return j;
  }

  std::shared_ptr<Session> find_session(const std::string& id) const {
    std::lock_guard lock(sessions_mu_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw HttpError(404, "unknown session '" + id + "'");
    return it->second;
  }

  std::shared_ptr<Job> new_job(const std::string& kind) {
    std::lock_guard lock(jobs_mu_);
    auto job = std::make_shared<Job>("job-" + std::to_string(++job_counter_), kind);
    jobs_[job->id()] = job;
    return job;
  }

  OptSettings settings_from(const nlohmann::json& body, OptSettings s) const {
    if (!body.contains("settings")) return s;
    s = settings_with_overrides(body["settings"], s);
    if (s.iterations > config_.max_iterations) throw HttpError(400, "iterations above the service limit");
    return s;
  }

  /// Queues `work`, then either waits for it (200 with the job) or returns 202.
  Reply dispatch(const std::shared_ptr<Job>& job, bool wait, std::function<void()> work,
                 std::function<void()> on_reject = {}) {
    if (!pool_->submit(std::move(work))) {
      if (on_reject) on_reject();
      job->fail("job queue full");
      throw HttpError(503, "job queue full");
    }
    if (!wait) return reply(202, {{"job_id", job->id()}});
    job->wait();
    return reply(200, job->snapshot());
  }

  static nlohmann::json trace_json(const OptimizationTrace& t) {
    nlohmann::json j = nlohmann::json::array();
    for (const LossBreakdown& l : t.losses) j.push_back(l.total);
    return j;
  }

  // ---- routes

  Reply classes() const {
    nlohmann::json pal = nlohmann::json::array();
    for (const Rgb& c : gen_.colors()) pal.push_back({c[0], c[1], c[2]});
    auto p = probe();
    const auto names = p ? p->class_names : default_class_names(gen_.config().num_classes);
    return reply(200, {{"names", names}, {"palette", pal}});
  }

  nlohmann::json session_view(const Session& s) const {
    std::lock_guard lock(s.mu);
    nlohmann::json j = render(s.latent, probe());
    j["session_id"] = s.id;
    j["config_hash"] = s.config_hash;
    j["history_length"] = s.history.size();
    j["created"] = std::chrono::duration_cast<std::chrono::seconds>(s.created.time_since_epoch()).count();
    nlohmann::json hist = nlohmann::json::array();
    for (const HistoryEntry& h : s.history) hist.push_back(h.action);
    j["history"] = hist;
    return j;
  }

  Reply create_session(const httplib::Request& req) {
    const nlohmann::json body = body_of(req);
    auto s = std::make_shared<Session>();
    std::uint64_t seed;
    {
      std::lock_guard lock(sessions_mu_);
      const std::uint64_t n = ++session_counter_;
      seed = body.contains("seed") ? body["seed"].get<std::uint64_t>() : derive_seed(config_.seed, "session", n);
      s->id = "s" + std::to_string(n);
    }
    s->config_hash = gen_.config_hash();
    s->created = std::chrono::system_clock::now();
    s->latent = sample_latent(seed, gen_.latent_dim());
    s->history.push_back({s->latent, "create"});
    s->states.push_back(0);
    {
      std::lock_guard lock(sessions_mu_);
      sessions_[s->id] = s;
    }
    return reply(200, session_view(*s));
  }

  Reply get_session(const httplib::Request& req) { return reply(200, session_view(*find_session(req.matches[1]))); }

  Reply edit(const httplib::Request& req) {
    auto session = find_session(req.matches[1]);
    const nlohmann::json body = body_of(req);
    const EditMode mode = parse_edit_mode(body.value("mode", std::string("semantic")));
    const OptSettings settings = settings_from(body, config_.sie);
    std::shared_ptr<const ProbeWeights> p = probe();
    EditSpec spec;
    if (mode == EditMode::kSemantic) {
      if (!p) p = require_probe();
      spec = EditSpec::semantic(decode_mask(body, "target", p->num_classes));
    } else {
      if (!body.contains("stroke") || !body["stroke"].is_string()) throw HttpError(400, "missing image field 'stroke'");
      Tensor3 stroke = decode_ppm(base64_decode(body["stroke"].get<std::string>()));
      spec = EditSpec::color(std::move(stroke), to_binary(decode_mask(body, "region", 0)));
      spec.validate(0, gen_.output_resolution());
    }
    bool expected = false;
    if (!session->busy.compare_exchange_strong(expected, true)) {
      throw HttpError(409, "session " + session->id + " is being modified by another request");
    }
    LatentVector z0;
    {
      std::lock_guard lock(session->mu);
      z0 = session->latent;
    }
    auto job = new_job("edit");
    auto work = [this, session, job, spec, settings, p, z0] {
      job->start(settings.iterations);
      try {
        std::unique_ptr<LsePredictor> pred = p ? std::make_unique<LsePredictor>(p) : nullptr;
        const EditResult r = edit_latent(z0, spec, settings, gen_, pred.get(),
                                         [&](int it, int, double) { job->progress(it); });
        nlohmann::json result = render(r.latent, p);
        result["loss_trace"] = trace_json(r.trace);
        {
          std::lock_guard lock(session->mu);
          session->latent = r.latent;
          session->history.push_back({r.latent, "edit:" + std::string(to_string(spec.mode))});
          session->states.push_back(session->history.size() - 1);
          result["history_length"] = session->history.size();
        }
        session->busy = false;
        job->finish(std::move(result));
      } catch (const OptimizationDiverged& e) {
        session->busy = false;
        job->fail(e.what(), {{"loss_trace", trace_json(e.trace)}});
      } catch (const std::exception& e) {
        session->busy = false;
        job->fail(e.what());
      }
    };
    return dispatch(job, body.value("wait", false), std::move(work), [session] { session->busy = false; });
  }

  Reply undo(const httplib::Request& req) {
    auto session = find_session(req.matches[1]);
    bool expected = false;
    if (!session->busy.compare_exchange_strong(expected, true)) {
      throw HttpError(409, "session " + session->id + " is being modified by another request");
    }
    {
      std::lock_guard lock(session->mu);
      if (session->states.size() < 2) {
        session->busy = false;
        throw HttpError(400, "nothing to undo");
      }
      session->states.pop_back();
      session->latent = session->history[session->states.back()].latent;
      session->history.push_back({session->latent, "undo"});
    }
    session->busy = false;
    return reply(200, session_view(*session));
  }

  Reply scs(const httplib::Request& req) {
    const nlohmann::json body = body_of(req);
    auto p = require_probe();
    const SemanticMask target = decode_mask(body, "target", p->num_classes);
    const int n = body.value("n_samples", 1);
    if (n < 0 || n > config_.max_scs_samples) throw HttpError(400, "n_samples out of range");
    const OptSettings settings = settings_from(body, config_.scs);
    const std::uint64_t seed = body.value("seed", derive_seed(config_.seed, "service-scs"));
    if (n == 0) return reply(200, {{"samples", nlohmann::json::array()}, {"mean_agreement", nullptr}});
    auto job = new_job("scs");
    auto work = [this, job, target, settings, p, n, seed] {
      const int per = settings.iterations + 1;
      job->start(n * per);
      try {
        const LsePredictor pred(p);
        const int m = p->num_classes;
        nlohmann::json samples = nlohmann::json::array();
        double total = 0.0;
        for (int i = 0; i < n; ++i) {
          const ScsResult r = scs_sample(target, settings, gen_, pred, derive_seed(seed, "sample", i),
                                         [&](int it, int, double) { job->progress(i * per + it + 1); });
          const LatentVector& z = r.optimized.latent;
          nlohmann::json s = render(z, p);
          const double agreement = miou_pair(reference_.segment(z, gen_.generate(z)), target, m);
          const LatentVector& z0 = r.init.latent;
          s["agreement"] = agreement;
          s["init_agreement"] = miou_pair(reference_.segment(z0, gen_.generate(z0)), target, m);
          s["loss_trace"] = trace_json(r.optimized.trace);
          total += agreement;
          samples.push_back(std::move(s));
        }
        job->finish({{"samples", samples}, {"mean_agreement", total / n}});
      } catch (const std::exception& e) {
        job->fail(e.what());
      }
    };
    return dispatch(job, body.value("wait", false), std::move(work));
  }

  Reply add_annotation(const httplib::Request& req) {
    const nlohmann::json body = body_of(req);
    Annotation a;
    if (body.contains("session_id")) {
      auto s = find_session(body["session_id"].get<std::string>());
      std::lock_guard lock(s->mu);
      a.latent = s->latent;
    } else if (body.contains("latent")) {
      a.latent = LatentVector(body["latent"].get<std::vector<double>>());
      if (a.latent.dim() != gen_.latent_dim() || !a.latent.finite()) throw HttpError(400, "bad latent");
    } else {
      throw HttpError(400, "annotation needs a session_id or a latent");
    }
    a.mask = decode_mask(body, "mask", gen_.config().num_classes);
    std::lock_guard lock(annotations_mu_);
    if (annotations_.size() >= config_.max_annotations) throw HttpError(400, "annotation store is full");
    annotations_.push_back(std::move(a));
    return reply(200, {{"annotation_id", annotations_.size() - 1}, {"count", annotations_.size()}});
  }

  Reply list_annotations() const {
    std::lock_guard lock(annotations_mu_);
    return reply(200, {{"count", annotations_.size()}, {"capacity", config_.max_annotations}});
  }

  Reply train_fewshot_route(const httplib::Request& req) {
    const nlohmann::json body = body_of(req);
    if (!body.contains("shots") || !body["shots"].is_number_integer()) throw HttpError(400, "missing integer 'shots'");
    const int shots = body["shots"].get<int>();
    const FewShotPlan plan = FewShotPlan::for_shots(shots);
    std::vector<Annotation> chosen;
    {
      std::lock_guard lock(annotations_mu_);
      if (annotations_.empty()) throw HttpError(400, "no annotations to train on");
      if (static_cast<int>(annotations_.size()) < shots) {
        throw HttpError(400, std::to_string(shots) + " shots requested but only " +
                                 std::to_string(annotations_.size()) + " annotations stored");
      }
      chosen.assign(annotations_.end() - shots, annotations_.end());
    }
    FewShotOptions opt;
    opt.seed = body.value("seed", derive_seed(config_.seed, "service-fewshot"));
    if (body.contains("iterations")) {
      const int it = body["iterations"].get<int>();
      if (it < 1 || it > config_.max_iterations) throw HttpError(400, "iterations out of range");
      opt.iterations = it;
    }
    const int total = opt.iterations.value_or(plan.iterations);
    auto job = new_job("train-fewshot");
    auto work = [this, job, chosen, shots, opt, total]() mutable {
      job->start(total);
      try {
        opt.on_iteration = [&](const TrainProgress& pr) { job->progress(static_cast<int>(pr.iteration)); };
        TrainResult<ProbeWeights> r = train_fewshot(gen_, chosen, shots, gen_.config().num_classes, opt);
        r.weights.round_to_float();
        swap_probe(std::make_shared<const ProbeWeights>(std::move(r.weights)));
        job->finish({{"shots", shots}, {"iterations", r.iterations},
                     {"final_loss", r.loss_curve.empty() ? 0.0 : r.loss_curve.back()}});
      } catch (const std::exception& e) {
        job->fail(e.what());
      }
    };
    return dispatch(job, body.value("wait", false), std::move(work));
  }

  Reply get_job(const httplib::Request& req) {
    std::lock_guard lock(jobs_mu_);
    auto it = jobs_.find(req.matches[1]);
    if (it == jobs_.end()) throw HttpError(404, "unknown job '" + std::string(req.matches[1]) + "'");
    return reply(200, it->second->snapshot());
  }

  SyntheticGenerator gen_;
  AnalyticSegmenter reference_;
  ServiceConfig config_;

  mutable std::mutex probe_mu_;
  std::shared_ptr<const ProbeWeights> probe_;

  mutable std::mutex sessions_mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::uint64_t session_counter_ = 0;

  mutable std::mutex jobs_mu_;
  std::map<std::string, std::shared_ptr<Job>> jobs_;
  std::uint64_t job_counter_ = 0;

  mutable std::mutex annotations_mu_;
  std::vector<Annotation> annotations_;

  std::unique_ptr<WorkerPool> pool_;
};

/// Owns an HTTP server bound to a port and serving a Service on a thread.
class ServiceServer {
 public:
  ServiceServer(Service& service, const std::string& host = "127.0.0.1", int port = 0) {
    service.mount(srv_);
    port_ = port == 0 ? srv_.bind_to_any_port(host) : (srv_.bind_to_port(host, port) ? port : -1);
    if (port_ < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  }
  ~ServiceServer() { stop(); }

  int port() const { return port_; }

  void start() {
    thread_ = std::thread([this] { srv_.listen_after_bind(); });
    srv_.wait_until_ready();
  }
  void run() { srv_.listen_after_bind(); }
  void stop() {
    srv_.stop();
    if (thread_.joinable()) thread_.join();
  }

 private:
  httplib::Server srv_;
  std::thread thread_;
  int port_ = -1;
};

}  // namespace linsem
