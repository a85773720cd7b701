// Command-line front end: configuration checks, batch runs, the HTTP service,
// tremor scoring of single recordings and table export from a manifest.

#include "dbs/service.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <csignal>
#include <fstream>
#include <iostream>

using namespace dbs;
namespace fs = std::filesystem;

namespace {

constexpr int kInvalidInput = 2;

Service* g_service = nullptr;

void on_signal(int) {
  if (g_service) g_service->stop();
}

int report_violations(const ValidationError& e) {
  std::cerr << "invalid configuration (" << e.violations().size() << " problem"
            << (e.violations().size() == 1 ? "" : "s") << "):\n";
  for (const auto& v : e.violations()) std::cerr << "  - " << v << '\n';
  return kInvalidInput;
}

int cmd_validate(const fs::path& path) {
  const auto c = validate_config(path);
  const auto tasks = c.tasks();
  std::cout << "configuration '" << c.name << "' is valid\n"
            << "  hash      " << c.hash << '\n'
            << "  settings  " << c.settings.size() << '\n'
            << "  models    " << c.models.size() << '\n'
            << "  tasks     " << tasks.size() << '\n'
            << "  output    " << c.output_dir.string() << '\n';
  for (const auto& t : tasks) std::cout << "    " << t.id << '\n';
  return 0;
}

int cmd_run(const fs::path& path, bool quiet) {
  const auto c = validate_config(path);
  const auto m = run_experiment(c, [&](const std::string& line) {
    if (!quiet) std::cerr << line << '\n';
  });
  std::size_t failed = 0;
  for (const auto& t : m.tasks) {
    std::cout << (t.status == "completed" ? (t.reused ? "skipped  " : "done     ") : "FAILED   ") << t.id;
    if (!t.error.empty()) std::cout << ": " << t.error;
    std::cout << '\n';
    failed += t.status != "completed";
  }
  std::cout << m.tasks.size() << " tasks, " << m.reused() << " reused, " << failed << " failed; manifest "
            << (c.output_dir / "manifest.json").string() << '\n';
  const fs::path table = c.output_dir / "tables/comparison.txt";
  if (!quiet && fs::is_regular_file(table)) std::cout << '\n' << std::ifstream(table).rdbuf();
  return failed == 0 ? 0 : 1;
}

int cmd_serve(const fs::path& path, const std::string& host, int port, std::size_t queue, int job_workers) {
  Service service(validate_config(path), ServiceOptions{queue, job_workers});
  g_service = &service;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cerr << "serving scene '" << service.scene().name << "' on http://" << host << ':' << port << '\n';
  service.listen(host, port);
  g_service = nullptr;
  return 0;
}

int cmd_tremor(const fs::path& path, const std::vector<double>& radii, const std::vector<double>& band, double window,
               bool as_json) {
  TremorOptions o;
  if (!radii.empty()) o.radii = radii;
  if (!band.empty()) {
    if (band.size() != 2) throw InvalidInput("--band expects two values: lo hi");
    o.band = {band[0], band[1]};
  }
  o.window_s = window;
  const auto model = score_recording(load_recording(path), o);
  if (as_json) {
    std::cout << tremor_result_to_json({"", path}, model).dump(2) << '\n';
    return 0;
  }
  std::cout << "score " << model.score << '\n' << "windows " << model.states.size() << '\n' << "stationary";
  for (Eigen::Index k = 0; k < model.pi.size(); ++k) std::cout << ' ' << model.pi[k];
  std::cout << '\n';
  return 0;
}

int cmd_export(const fs::path& manifest, const std::string& format, const fs::path& output) {
  const auto table = comparison_from_manifest(manifest);
  std::string text;
  if (format == "csv") text = table_to_csv(table);
  else if (format == "json") text = table_to_json(table);
  else text = table_to_text(table);
  if (output.empty()) {
    std::cout << text;
  } else {
    std::ofstream out(output, std::ios::binary);
    if (!out) throw InvalidInput("cannot write " + output.string());
    out << text;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Volume-of-tissue-activated and axon-model simulation of directional leads"};
  app.require_subcommand(1);

  fs::path config_path;
  auto* validate = app.add_subcommand("validate", "Check a configuration and list its tasks");
  validate->add_option("config", config_path, "Configuration file")->required();

  bool quiet = false;
  auto* run = app.add_subcommand("run", "Run every task of a configuration; exit 1 if any task fails");
  run->add_option("config", config_path, "Configuration file")->required();
  run->add_flag("-q,--quiet", quiet, "Only print the task summary");

  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t queue = 8;
  int job_workers = 1;
  auto* serve = app.add_subcommand("serve", "Serve the HTTP interface for a configuration");
  serve->add_option("config", config_path, "Configuration file")->required();
  serve->add_option("--port", port, "TCP port")->check(CLI::Range(1, 65535));
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--queue", queue, "Queued jobs before requests are refused")->check(CLI::PositiveNumber);
  serve->add_option("--job-workers", job_workers, "Threads executing jobs")->check(CLI::PositiveNumber);

  fs::path recording;
  std::vector<double> radii, band;
  double window = 0.5;
  bool as_json = false;
  auto* tremor = app.add_subcommand("tremor-score", "Score one accelerometer recording");
  tremor->add_option("recording", recording, "Recording file (t_s,ax,ay,az[,lift])")->required()->check(CLI::ExistingFile);
  tremor->add_option("--radii", radii, "State radii in mm, increasing");
  tremor->add_option("--band", band, "Band-pass edges in Hz: lo hi")->expected(2);
  tremor->add_option("--window", window, "Window length in s")->check(CLI::PositiveNumber);
  tremor->add_flag("--json", as_json, "Print the full model as structured text");

  fs::path manifest, output;
  std::string format = "csv";
  auto* exporter = app.add_subcommand("export-table", "Rebuild the comparison table from a run manifest");
  exporter->add_option("manifest", manifest, "manifest.json of a run")->required()->check(CLI::ExistingFile);
  exporter->add_option("--format", format, "csv, json or text")->check(CLI::IsMember({"csv", "json", "text"}));
  exporter->add_option("-o,--output", output, "Output file (default: standard output)");

  fs::path demo_dir;
  DemoOptions demo;
  auto* generate = app.add_subcommand("generate-demo", "Write the synthetic demo scene, tracts and recordings");
  generate->add_option("dir", demo_dir, "Target directory")->required();
  generate->add_option("--box-size", demo.box_size, "Grid box edge in mm");
  generate->add_option("--resolution", demo.resolution, "Voxel size in mm");
  generate->add_option("--fibers", demo.fibers_per_tract, "Fibers per tract");
  generate->add_option("--seed", demo.seed, "Random seed");
  generate->add_option("--config", demo.config_path, "Configuration path (default: <dir>/reference.json)");
  generate->add_option("--output-dir", demo.output_dir, "Output directory relative to the configuration");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*validate) return cmd_validate(config_path);
    if (*run) return cmd_run(config_path, quiet);
    if (*serve) return cmd_serve(config_path, host, port, queue, job_workers);
    if (*tremor) return cmd_tremor(recording, radii, band, window, as_json);
    if (*exporter) return cmd_export(manifest, format, output);
    if (*generate) {
      std::cout << generate_demo(demo_dir, demo).string() << '\n';
      return 0;
    }
  } catch (const ValidationError& e) {
    return report_violations(e);
  } catch (const InvalidInput& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInvalidInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
