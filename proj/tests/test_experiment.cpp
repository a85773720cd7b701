#include "dbs/experiment.hpp"

#include "temp_dir.hpp"

#include <doctest.h>
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

json read_doc(const fs::path& p) { return json::parse(slurp(p)); }

void write_doc(const fs::path& p, const json& doc) { std::ofstream(p) << doc.dump(2) << '\n'; }

// Small demo restricted to the static model, so a full run takes seconds.
fs::path small_static_demo(const fs::path& dir) {
  DemoOptions o;
  o.box_size = 16.0;
  o.fibers_per_tract = 4;
  o.fiber_half_length = 6.0;
  o.output_dir = "out";
  const auto path = generate_demo(dir, o);
  auto doc = read_doc(path);
  doc["models"] = {"static"};
  write_doc(path, doc);
  return path;
}

}  // namespace

TEST_CASE("artifact stems spell out polarity signs") {
  CHECK(artifact_stem(0, "C3-,C4+") == "01_C3m_C4p");
  CHECK(artifact_stem(4, "C4-,C2+ @1.6mA") == "05_C4m_C2p_at1d6mA");
  CHECK(artifact_stem(11, "None") == "12_None");
}

TEST_CASE("demo generation is deterministic") {
  TempDir a("demo-a"), b("demo-b");
  small_static_demo(a.path());
  small_static_demo(b.path());
  for (const char* f : {"scene.json", "tracts/dDRTT.json", "tracts/ndDRTT.json", "tremor/01_None.csv", "reference.json"})
    CHECK_MESSAGE(slurp(a / f) == slurp(b / f), f);
  const auto c = validate_config(a / "reference.json");
  CHECK(c.settings.size() == 5);
  CHECK(c.tremor.size() == 4);
  CHECK(c.output_dir == a / "out");
}

TEST_CASE("experiment run writes reports, tables and a reproducible manifest") {
  TempDir dir("experiment");
  const auto path = small_static_demo(dir.path());
  const auto config = validate_config(path);
  std::vector<std::string> messages;
  const auto first = run_experiment(config, [&](const std::string& m) { messages.push_back(m); });
  REQUIRE(first.ok());
  CHECK(first.tasks.size() == 5 + 4);
  CHECK(first.reused() == 0);
  CHECK_FALSE(messages.empty());

  const fs::path out = dir / "out";
  for (const char* f : {"manifest.json", "timings.json", "scene/summary.json", "reports/static/01_C3m_C4p.json",
                        "reports/static/05_C4m_C2p_at1d6mA.txt", "tremor/01_None.json", "tables/comparison.csv",
                        "tables/comparison.json", "tables/comparison.txt", "tables/tremor_activation.csv"})
    CHECK_MESSAGE(fs::is_regular_file(out / f), f);
  for (const auto& t : first.tasks)
    for (const auto& a : t.artifacts) CHECK(file_sha256(out / a.path) == a.sha256);

  const auto csv = slurp(out / "tables/comparison.csv");
  CHECK(csv.rfind("model,setting,dDRTT [%],ndDRTT [%]\n", 0) == 0);
  CHECK(csv.find("\"C3-,C4+\"") != std::string::npos);
  const auto tremor_csv = slurp(out / "tables/tremor_activation.csv");
  CHECK(tremor_csv.rfind("setting,tremor_score,static dDRTT [%],static ndDRTT [%]\n", 0) == 0);
  CHECK(tremor_csv.find("\"None\"") != std::string::npos);

  const auto manifest_text = slurp(out / "manifest.json");
  const auto report_text = slurp(out / "reports/static/03_C2m_C4p.json");

  SUBCASE("unchanged rerun reuses every task") {
    const auto second = run_experiment(config);
    CHECK(second.ok());
    CHECK(second.reused() == second.tasks.size());
    CHECK(slurp(out / "manifest.json") == manifest_text);
    CHECK(slurp(out / "reports/static/03_C2m_C4p.json") == report_text);
    CHECK(read_doc(out / "timings.json")["tasks"][0]["reused"] == true);
  }
  SUBCASE("a changed setting reruns only its task") {
    auto doc = read_doc(path);
    doc["settings"][4]["amplitude_ma"] = 1.7;
    write_doc(path, doc);
    const auto second = run_experiment(validate_config(path));
    CHECK(second.ok());
    CHECK_FALSE(second.task("activation/static/C4-,C2+ @1.6mA").reused);
    CHECK(second.task("activation/static/C3-,C4+").reused);
    CHECK(second.reused() == second.tasks.size() - 1);
    CHECK(second.config_hash != first.config_hash);
  }
  SUBCASE("a tampered artifact is regenerated") {
    std::ofstream(out / "reports/static/03_C2m_C4p.json") << "{}";
    const auto second = run_experiment(config);
    CHECK_FALSE(second.task("activation/static/C2-,C4+").reused);
    CHECK(slurp(out / "reports/static/03_C2m_C4p.json") == report_text);
    CHECK(slurp(out / "manifest.json") == manifest_text);
  }
  SUBCASE("tables rebuild from the manifest") {
    const auto table = comparison_from_manifest(out / "manifest.json");
    CHECK(table_to_csv(table) == csv);
    CHECK(table.rows.size() == 5);
    REQUIRE(table.pairs.size() == 2);
    for (const auto& p : table.pairs) CHECK(p.identical);
  }
}

TEST_CASE("separate output directories give identical manifests") {
  TempDir dir("experiment-twice");
  const auto path = small_static_demo(dir.path());
  auto a = validate_config(path);
  auto b = a;
  a.output_dir = dir / "run1";
  b.output_dir = dir / "run2";
  run_experiment(a);
  run_experiment(b);
  CHECK(slurp(dir / "run1/manifest.json") == slurp(dir / "run2/manifest.json"));
  CHECK(slurp(dir / "run1/tables/comparison.csv") == slurp(dir / "run2/tables/comparison.csv"));
}

TEST_CASE("a failing task is recorded and the run continues") {
  TempDir dir("experiment-fail");
  const auto path = small_static_demo(dir.path());
  auto doc = read_doc(path);
  doc["pipeline"]["threshold_fallback"] = "error";
  doc["settings"][1]["pulse_width_us"] = 400.0;
  doc.erase("tremor");
  write_doc(path, doc);
  const auto m = run_experiment(validate_config(path));
  CHECK_FALSE(m.ok());
  const auto& bad = m.task("activation/static/C4-,C3+");
  CHECK(bad.status == "failed");
  CHECK_FALSE(bad.error.empty());
  CHECK(bad.artifacts.empty());
  CHECK(m.task("activation/static/C3-,C4+").status == "completed");
  CHECK(m.tables.size() == 3);
  const auto reloaded = load_manifest(dir / "out/manifest.json");
  CHECK(reloaded.task("activation/static/C4-,C3+").status == "failed");
  CHECK_THROWS_AS(manifest_from_json("{\"name\": 1}"), InvalidInput);
}

TEST_CASE("shipped demo data matches the generator") {
  TempDir dir("demo-shipped");
  generate_demo(dir.path());
  const fs::path shipped = fs::path(DBS_TEST_DATA_DIR) / "demo";
  for (const char* f : {"scene.json", "tracts/dDRTT.json", "tracts/ndDRTT.json", "tremor/01_None.csv",
                        "tremor/02_C3m_C4p.csv", "tremor/03_C2m_C4p.csv", "tremor/04_C4m_C2p_at1d6mA.csv"})
    CHECK_MESSAGE(slurp(dir / f) == slurp(shipped / f), f);
  const auto generated = read_doc(dir / "reference.json");
  const auto reference = read_doc(fs::path(DBS_TEST_DATA_DIR) / "../configs/reference.json");
  for (const char* key : {"settings", "models", "pipeline"}) CHECK(generated[key] == reference[key]);
}
