#include "dbs/service.hpp"

#include <httplib.h>

#include <cmath>
#include <condition_variable>
#include <deque>
#include <map>
#include <mutex>
#include <thread>

namespace dbs {

using nlohmann::json;

namespace {

struct Job {
  std::string id;
  std::string hash;
  StimulationSetting setting;
  ModelKind model = ModelKind::Static;
  std::string status = "queued";  // queued, running, done, failed
  std::optional<ActivationReport> report;
  std::string error;
};

ServiceResponse error_response(int status, const std::string& message, const std::vector<std::string>& violations = {}) {
  json body = {{"error", message}};
  if (!violations.empty()) body["violations"] = violations;
  return {status, body};
}

json job_json(const Job& job) {
  json body = {{"job_id", job.id},
               {"status", job.status},
               {"model", std::string(to_string(job.model))},
               {"setting", setting_to_json(job.setting)}};
  if (job.report) body["report"] = json::parse(report_to_json(*job.report));
  if (!job.error.empty()) body["error"] = job.error;
  return body;
}

json points_json(const std::vector<Vec3>& points) {
  json out = json::array();
  for (const auto& p : points) out.push_back({p.x(), p.y(), p.z()});
  return out;
}

}  // namespace

struct Service::Impl {
  ExperimentConfig config;
  ServiceOptions options;
  Scene scene;

  mutable std::mutex mutex;
  std::condition_variable work;
  mutable std::condition_variable idle;
  std::map<std::string, std::shared_ptr<Job>> jobs;
  std::map<std::string, std::shared_ptr<Job>> by_hash;
  std::deque<std::shared_ptr<Job>> queue;
  std::size_t running = 0;
  std::uint64_t next_id = 1;
  std::string latest;  // job whose report completed last
  bool stopping = false;
  std::vector<std::thread> workers;

  httplib::Server server;
  std::thread server_thread;

  Impl(ExperimentConfig c, ServiceOptions o)
      : config(std::move(c)), options(o), scene(build_scene(config.scene, config.load_tracts(), config.solver)) {
    if (options.queue_capacity == 0) throw InvalidInput("job queue capacity must be positive");
    for (int i = 0; i < std::max(1, options.job_workers); ++i) workers.emplace_back([this] { work_loop(); });
  }

  ~Impl() {
    {
      std::lock_guard<std::mutex> lock(mutex);
      stopping = true;
    }
    work.notify_all();
    for (auto& w : workers) w.join();
  }

  void work_loop() {
    for (;;) {
      std::shared_ptr<Job> job;
      {
        std::unique_lock<std::mutex> lock(mutex);
        work.wait(lock, [&] { return stopping || !queue.empty(); });
        if (stopping) return;
        job = queue.front();
        queue.pop_front();
        job->status = "running";
        ++running;
      }
      execute(*job);
      {
        std::lock_guard<std::mutex> lock(mutex);
        --running;
      }
      idle.notify_all();
    }
  }

  // Runs a job outside the lock and publishes the result under it.
  void execute(Job& job) {
    std::optional<ActivationReport> report;
    std::string error;
    try {
      report = run_model(scene, job.setting, job.model, config.pipeline);
    } catch (const std::exception& e) {
      error = e.what();
    }
    std::lock_guard<std::mutex> lock(mutex);
    if (report) {
      job.report = std::move(report);
      job.status = "done";
      latest = job.id;
    } else {
      job.error = error;
      job.status = "failed";
      by_hash.erase(job.hash);  // a failed request may be retried
    }
  }

  std::shared_ptr<Job> find(const std::string& id) const {
    std::lock_guard<std::mutex> lock(mutex);
    const auto it = jobs.find(id);
    return it == jobs.end() ? nullptr : it->second;
  }
};

Service::Service(ExperimentConfig config, ServiceOptions options)
    : impl_(std::make_unique<Impl>(std::move(config), options)) {
  auto& s = impl_->server;
  // Address reuse only: a second server must not silently share the port.
  s.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
  });
  auto reply = [](httplib::Response& res, const ServiceResponse& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
    if (r.status == 503) res.set_header("Retry-After", "1");
  };
  s.Get("/api/scene", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, get_scene()); });
  s.Get("/api/settings", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, get_settings()); });
  s.Get("/api/tracts", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, get_tracts()); });
  s.Post("/api/simulate",
         [this, reply](const httplib::Request& req, httplib::Response& res) { reply(res, post_simulate(req.body)); });
  s.Get(R"(/api/jobs/([A-Za-z0-9_-]+))", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, get_job(req.matches[1]));
  });
  s.Get(R"(/api/field/([A-Za-z0-9_-]+)/slice)", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, get_slice(req.matches[1], req.get_param_value("plane"), req.get_param_value("position"),
                         req.get_param_value("quantity")));
  });
  s.set_exception_handler([reply](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      reply(res, error_response(500, e.what()));
    } catch (...) {
      reply(res, error_response(500, "unknown error"));
    }
  });
  s.set_error_handler([reply](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) reply(res, error_response(res.status, "no such endpoint"));
  });
}

Service::~Service() { stop(); }

const Scene& Service::scene() const { return impl_->scene; }
const ExperimentConfig& Service::config() const { return impl_->config; }

int Service::start(const std::string& host, int port) {
  auto& s = impl_->server;
  int bound = port;
  if (port == 0) bound = s.bind_to_any_port(host);
  else if (!s.bind_to_port(host, port)) bound = -1;
  if (bound <= 0) throw Error("cannot bind " + host + ":" + std::to_string(port) + " (port in use?)");
  impl_->server_thread = std::thread([&s] { s.listen_after_bind(); });
  s.wait_until_ready();
  return bound;
}

void Service::listen(const std::string& host, int port) {
  if (!impl_->server.bind_to_port(host, port))
    throw Error("cannot bind " + host + ":" + std::to_string(port) + " (port in use?)");
  impl_->server.listen_after_bind();
}

void Service::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->server_thread.joinable()) impl_->server_thread.join();
}

void Service::wait_idle() const {
  std::unique_lock<std::mutex> lock(impl_->mutex);
  impl_->idle.wait(lock, [&] { return impl_->queue.empty() && impl_->running == 0; });
}

ServiceResponse Service::get_scene() const { return {200, scene_summary(impl_->scene)}; }

ServiceResponse Service::get_settings() const {
  json settings = json::array();
  for (const auto& s : impl_->config.settings) settings.push_back(setting_to_json(s));
  json models = json::array();
  for (auto m : impl_->config.models) models.push_back(std::string(to_string(m)));
  return {200, {{"settings", settings}, {"models", models}}};
}

ServiceResponse Service::post_simulate(const std::string& body) {
  auto& d = *impl_;
  json doc;
  try {
    doc = json::parse(body);
  } catch (const json::parse_error& e) {
    return error_response(400, "malformed request", {e.what()});
  }
  if (!doc.is_object()) return error_response(400, "malformed request", {"body must be an object"});

  std::vector<std::string> violations;
  ModelKind model = ModelKind::Static;
  try {
    model = parse_model(doc.value("model", std::string("static")));
  } catch (const InvalidInput& e) {
    violations.push_back(std::string("model: ") + e.what());
  }
  std::optional<StimulationSetting> setting;
  if (!doc.contains("setting")) {
    violations.push_back("setting: missing");
  } else if (doc["setting"].is_string()) {
    const auto label = doc["setting"].get<std::string>();
    try {
      setting = d.config.settings[d.config.setting_index(label)];
    } catch (const InvalidInput& e) {
      violations.push_back(std::string("setting: ") + e.what());
    }
  } else {
    setting = parse_setting(doc["setting"], violations, "setting");
    if (setting)
      for (const auto& id : unknown_contacts(setting->polarity, d.scene.lead))
        violations.push_back("setting: unknown contact '" + id + "'");
  }
  if (!violations.empty()) return error_response(400, "invalid simulation request", violations);

  const std::string hash =
      sha256_hex(canonical_json({{"setting", setting_to_json(*setting)}, {"model", std::string(to_string(model))}}));

  std::unique_lock<std::mutex> lock(d.mutex);
  if (const auto it = d.by_hash.find(hash); it != d.by_hash.end()) {
    const auto& job = *it->second;
    return {job.status == "done" ? 200 : 202, job_json(job)};
  }
  auto job = std::make_shared<Job>();
  job->id = "job-" + std::to_string(d.next_id);
  job->hash = hash;
  job->setting = *setting;
  job->model = model;

  // Static requests whose unit fields are already solved are answered inline.
  const bool inline_static =
      model == ModelKind::Static && d.scene.cache->has_real_basis(resolve_electrodes(*d.scene.grid, setting->polarity));
  if (inline_static) {
    ++d.next_id;
    job->status = "running";
    d.jobs[job->id] = job;
    d.by_hash[hash] = job;
    lock.unlock();
    d.execute(*job);
    lock.lock();
    return {job->status == "done" ? 200 : 500, job_json(*job)};
  }
  if (d.queue.size() >= d.options.queue_capacity)
    return error_response(503, "job queue full (" + std::to_string(d.options.queue_capacity) + " queued)");
  ++d.next_id;
  d.jobs[job->id] = job;
  d.by_hash[hash] = job;
  d.queue.push_back(job);
  const json queued = job_json(*job);
  lock.unlock();
  d.work.notify_one();
  return {202, queued};
}

ServiceResponse Service::get_job(const std::string& id) const {
  const auto job = impl_->find(id);
  if (!job) return error_response(404, "no job '" + id + "'");
  std::lock_guard<std::mutex> lock(impl_->mutex);
  return {200, job_json(*job)};
}

ServiceResponse Service::get_slice(const std::string& id, const std::string& plane, const std::string& position,
                                   const std::string& quantity) const {
  const auto job = impl_->find(id);
  if (!job) return error_response(404, "no job '" + id + "'");
  int u = 0, v = 1, n = 2;
  if (plane == "xy" || plane.empty()) {
    u = 0, v = 1, n = 2;
  } else if (plane == "xz") {
    u = 0, v = 2, n = 1;
  } else if (plane == "yz") {
    u = 1, v = 2, n = 0;
  } else {
    return error_response(400, "plane must be xy, xz or yz");
  }
  const std::string q = quantity.empty() ? "magnitude" : quantity;
  if (q != "magnitude" && q != "potential") return error_response(400, "quantity must be magnitude or potential");

  const Scene& scene = impl_->scene;
  const VoxelGrid& grid = *scene.grid;
  double pos = contact_region_center(scene.lead)[n];
  if (!position.empty()) {
    try {
      std::size_t used = 0;
      pos = std::stod(position, &used);
      if (used != position.size()) throw std::invalid_argument(position);
    } catch (const std::exception&) {
      return error_response(400, "position must be a number (mm)");
    }
  }
  const long index = std::lround((pos - grid.origin()[n]) / grid.spacing());
  if (index < 0 || index >= grid.dims()[n]) return error_response(400, "position lies outside the grid");

  StimulationSetting setting;
  {
    std::lock_guard<std::mutex> lock(impl_->mutex);
    setting = job->setting;
  }
  const QsSolution qs = scene.cache->solve_qs(setting);
  const int w = grid.dims()[u];
  const int h = grid.dims()[v];
  std::vector<double> values(static_cast<std::size_t>(w) * static_cast<std::size_t>(h));
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (int b = 0; b < h; ++b)
    for (int a = 0; a < w; ++a) {
      Eigen::Array3i ijk;
      ijk[u] = a;
      ijk[v] = b;
      ijk[n] = static_cast<int>(index);
      const double value = q == "magnitude" ? field_at(qs, grid.center(ijk[0], ijk[1], ijk[2])).magnitude
                                            : qs.potential(grid.index(ijk[0], ijk[1], ijk[2]));
      values[static_cast<std::size_t>(b) * w + a] = value;
      lo = std::min(lo, value);
      hi = std::max(hi, value);
    }
  const char* names = "xyz";
  return {200,
          {{"job_id", id},
           {"plane", plane.empty() ? "xy" : plane},
           {"axes", {std::string(1, names[u]), std::string(1, names[v])}},
           {"index", index},
           {"position_mm", grid.origin()[n] + index * grid.spacing()},
           {"width", w},
           {"height", h},
           {"spacing_mm", grid.spacing()},
           {"origin_mm", {grid.origin()[u], grid.origin()[v]}},
           {"quantity", q},
           {"units", q == "magnitude" ? "V/m" : "V"},
           {"min", lo},
           {"max", hi},
           {"values", values}}};
}

ServiceResponse Service::get_tracts() const {
  std::shared_ptr<Job> job;
  {
    std::lock_guard<std::mutex> lock(impl_->mutex);
    if (!impl_->latest.empty()) job = impl_->jobs.at(impl_->latest);
  }
  json tracts = json::array();
  for (const auto& t : impl_->scene.tracts) {
    const TractReport* report = nullptr;
    if (job && job->report)
      for (const auto& r : job->report->tracts)
        if (r.name == t.name) report = &r;
    json fibers = json::array();
    for (std::size_t i = 0; i < t.fibers.size(); ++i) {
      const FiberStatus status = report ? report->statuses[i] : FiberStatus::Unknown;
      fibers.push_back({{"points", points_json(t.fibers[i].points)},
                        {"diameter_um", t.fibers[i].diameter_um},
                        {"status", std::string(to_string(status))}});
    }
    json entry = {{"name", t.name}, {"fibers", fibers}};
    if (report) entry["percentage"] = report->percentage;
    tracts.push_back(entry);
  }
  return {200, {{"job_id", job ? json(job->id) : json(nullptr)}, {"tracts", tracts}}};
}

}  // namespace dbs
