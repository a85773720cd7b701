#include "dbs/service.hpp"

#include "temp_dir.hpp"

#include <doctest.h>
#include <httplib.h>
#include <json.hpp>

#include <fstream>
#include <sstream>

using namespace dbs;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Small demo scene with static and neuron-QS models configured.
ExperimentConfig small_config(const fs::path& dir) {
  DemoOptions o;
  o.box_size = 16.0;
  o.fibers_per_tract = 4;
  o.fiber_half_length = 6.0;
  o.output_dir = "out";
  const auto path = generate_demo(dir, o);
  auto doc = json::parse(slurp(path));
  doc["models"] = {"static", "neuron-QS"};
  doc.erase("tremor");
  std::ofstream(path) << doc.dump(2);
  return validate_config(path);
}

json post(httplib::Client& cli, const json& body, int expected) {
  const auto res = cli.Post("/api/simulate", body.dump(), "application/json");
  REQUIRE(res);
  CHECK(res->status == expected);
  return json::parse(res->body);
}

json get(httplib::Client& cli, const std::string& path, int expected = 200) {
  const auto res = cli.Get(path);
  REQUIRE(res);
  CHECK_MESSAGE(res->status == expected, path);
  return json::parse(res->body);
}

}  // namespace

TEST_CASE("service answers scene, settings and simulation requests over HTTP") {
  TempDir dir("service");
  const auto config = small_config(dir.path());
  Service service(config);
  const int port = service.start("127.0.0.1", 0);
  REQUIRE(port > 0);
  httplib::Client cli("127.0.0.1", port);
  cli.set_read_timeout(120, 0);

  const auto scene = get(cli, "/api/scene");
  CHECK(scene["lead"]["contacts"].size() == 8);
  CHECK(scene["tracts"].size() == 2);
  const auto settings = get(cli, "/api/settings");
  CHECK(settings["settings"].size() == 5);
  CHECK(settings["models"] == json({"static", "neuron-QS"}));

  // The first static request solves the unit fields on the job queue.
  const auto queued = post(cli, {{"setting", "C2-,C4+"}, {"model", "static"}}, 202);
  const std::string id = queued["job_id"];
  CHECK(id == "job-1");
  service.wait_idle();
  const auto done = get(cli, "/api/jobs/" + id);
  REQUIRE(done["status"] == "done");

  // Same report as a batch run of the same setting.
  auto batch = config;
  batch.models = {ModelKind::Static};
  REQUIRE(run_experiment(batch).ok());
  CHECK(done["report"] == json::parse(slurp(dir / "out/reports/static/03_C2m_C4p.json")));

  SUBCASE("repeated requests return the existing job") {
    const auto again = post(cli, {{"setting", "C2-,C4+"}}, 200);
    CHECK(again["job_id"] == id);
  }
  SUBCASE("static requests on solved contacts complete synchronously") {
    json setting = {{"polarity", "C2-,C4+"}, {"amplitude_ma", 2.5}, {"frequency_hz", 184}, {"pulse_width_us", 50}};
    const auto inline_done = post(cli, {{"setting", setting}, {"model", "static"}}, 200);
    CHECK(inline_done["status"] == "done");
    CHECK(inline_done["report"]["setting"]["amplitude_ma"] == 2.5);
  }
  SUBCASE("field slices") {
    const auto slice = get(cli, "/api/field/" + id + "/slice?plane=xz&quantity=magnitude");
    const auto dims = scene["grid"]["dims"];
    CHECK(slice["width"] == dims[0]);
    CHECK(slice["height"] == dims[2]);
    CHECK(slice["values"].size() == dims[0].get<std::size_t>() * dims[2].get<std::size_t>());
    CHECK(slice["max"].get<double>() > 100.0);
    CHECK(slice["units"] == "V/m");
    const auto potential = get(cli, "/api/field/" + id + "/slice?plane=yz&position=0.25&quantity=potential");
    CHECK(potential["min"].get<double>() < 0.0);
    get(cli, "/api/field/" + id + "/slice?plane=ab", 400);
    get(cli, "/api/field/" + id + "/slice?position=900", 400);
    get(cli, "/api/field/job-77/slice", 404);
  }
  SUBCASE("tract statuses follow the latest report") {
    const auto tracts = get(cli, "/api/tracts");
    CHECK(tracts["job_id"] == id);
    REQUIRE(tracts["tracts"].size() == 2);
    const auto& fibers = tracts["tracts"][0]["fibers"];
    REQUIRE(fibers.size() == 4);
    for (const auto& f : fibers) CHECK(f["status"] != "unknown");
    CHECK(tracts["tracts"][0].contains("percentage"));
  }
  SUBCASE("malformed requests are rejected with violations") {
    const auto bad_polarity =
        post(cli, {{"setting", {{"polarity", "C3*"}, {"amplitude_ma", 1.0}}}, {"model", "static"}}, 400);
    CHECK_FALSE(bad_polarity["violations"].empty());
    const auto unknown = post(cli, {{"setting", {{"polarity", "C9-,C4+"}, {"amplitude_ma", 1.0}}}}, 400);
    CHECK(unknown["violations"][0].get<std::string>().find("C9") != std::string::npos);
    post(cli, {{"setting", "C2-,C4+"}, {"model", "cable"}}, 400);
    post(cli, {{"setting", "nonexistent"}}, 400);
    post(cli, {{"model", "static"}}, 400);
    const auto res = cli.Post("/api/simulate", "{not json", "application/json");
    REQUIRE(res);
    CHECK(res->status == 400);
    get(cli, "/api/jobs/job-404", 404);
    get(cli, "/api/nothing", 404);
  }
  service.stop();
}

TEST_CASE("service sheds load when the job queue is full") {
  TempDir dir("service-queue");
  Service service(small_config(dir.path()), ServiceOptions{1, 1});
  const int port = service.start();
  httplib::Client cli("127.0.0.1", port);

  // Neuron jobs take seconds each, so with one worker and one queue slot a
  // third distinct request arrives while the first two are still pending.
  bool shed = false;
  int accepted = 0;
  for (int i = 0; i < 4 && !shed; ++i) {
    json setting = {{"polarity", "C3-,C4+"}, {"amplitude_ma", 1.0 + 0.5 * i}, {"frequency_hz", 140}, {"pulse_width_us", 90}};
    const auto res = cli.Post("/api/simulate", json({{"setting", setting}, {"model", "neuron-QS"}}).dump(),
                              "application/json");
    REQUIRE(res);
    if (res->status == 503) {
      shed = true;
      CHECK(res->get_header_value("Retry-After") == "1");
      CHECK(json::parse(res->body).contains("error"));
    } else {
      CHECK(res->status == 202);
      ++accepted;
    }
  }
  CHECK(shed);
  CHECK(accepted >= 1);
  CHECK(accepted <= 2);
  service.wait_idle();
  for (int i = 1; i <= accepted; ++i) CHECK(service.get_job("job-" + std::to_string(i)).body["status"] == "done");
  service.stop();
}

TEST_CASE("service refuses a port already in use") {
  TempDir dir("service-port");
  const auto config = small_config(dir.path());
  Service first(config);
  const int port = first.start();
  Service second(config);
  CHECK_THROWS_AS(second.start("127.0.0.1", port), Error);
}
