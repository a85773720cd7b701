#pragma once

// HTTP interface over one configured scene: scene and settings queries,
// simulation jobs on a bounded queue, field slices and tract statuses.
//
//   GET  /api/scene
//   GET  /api/settings
//   POST /api/simulate            {setting: label | {...}, model}
//   GET  /api/jobs/{id}
//   GET  /api/field/{id}/slice    ?plane=xy|xz|yz&position=mm&quantity=magnitude|potential
//   GET  /api/tracts

#include "dbs/experiment.hpp"

#include <memory>
#include <string>

namespace dbs {

struct ServiceOptions {
  std::size_t queue_capacity = 8;  // queued jobs beyond this get 503
  int job_workers = 1;             // threads executing queued jobs
};

/// Response of a request handled in-process (status code and JSON body).
struct ServiceResponse {
  int status = 200;
  nlohmann::json body;
};

class Service {
 public:
  explicit Service(ExperimentConfig config, ServiceOptions options = {});
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  const Scene& scene() const;
  const ExperimentConfig& config() const;

  /// Binds to host:port (0 picks a free port) and serves on a background
  /// thread. Returns the bound port; throws Error when binding fails.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  /// Serves on the calling thread until stop().
  void listen(const std::string& host, int port);
  void stop();

  // The same handlers without a socket.
  ServiceResponse get_scene() const;
  ServiceResponse get_settings() const;
  ServiceResponse post_simulate(const std::string& body);
  ServiceResponse get_job(const std::string& id) const;
  ServiceResponse get_slice(const std::string& id, const std::string& plane, const std::string& position,
                            const std::string& quantity) const;
  ServiceResponse get_tracts() const;

  /// Blocks until no job is queued or running.
  void wait_idle() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace dbs
