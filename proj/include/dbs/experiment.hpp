#pragma once

// Batch execution of a configuration: scene build, activation reports per
// setting and model, tremor scores, comparison tables, and a manifest that
// makes re-runs skip tasks whose inputs did not change.

#include "dbs/config.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace dbs {

struct Artifact {
  std::string path;  // relative to the output directory
  std::string sha256;
};

struct TaskRecord {
  std::string id;
  TaskKind kind = TaskKind::Activation;
  std::string status;  // "completed" or "failed"
  std::string input_hash;
  std::vector<Artifact> artifacts;
  std::string error;
  // Not part of the manifest text; reported in the timing file.
  bool reused = false;
  double seconds = 0.0;
};

struct RunManifest {
  std::string name;
  std::string config_hash;
  std::vector<TaskRecord> tasks;
  std::vector<Artifact> tables;
  Artifact scene;
  double seconds = 0.0;

  bool ok() const;
  std::size_t reused() const;
  const TaskRecord& task(std::string_view id) const;
};

std::string manifest_to_json(const RunManifest& manifest);
RunManifest manifest_from_json(std::string_view text);
RunManifest load_manifest(const std::filesystem::path& path);

/// Tremor score of one recording as structured text.
nlohmann::json tremor_result_to_json(const TremorReference& ref, const TremorModel& model);

using ProgressFn = std::function<void(const std::string&)>;

/// Runs every task of the configuration into config.output_dir. Writes
/// manifest.json (reproducible) and timings.json (wall times and reuse).
/// Per-task failures are recorded and do not stop the run.
RunManifest run_experiment(const ExperimentConfig& config, const ProgressFn& progress = {});

/// Comparison table rebuilt from the activation reports listed in a manifest.
ComparisonTable comparison_from_manifest(const std::filesystem::path& manifest_path);

/// File name stem for a setting label: its position plus the label with
/// polarity signs spelled out.
std::string artifact_stem(std::size_t index, const std::string& label);

struct DemoOptions {
  double box_size = 50.0;    // mm
  double resolution = 0.5;   // mm
  int fibers_per_tract = 20;
  double fiber_half_length = 15.0;  // mm
  double tremor_duration_s = 20.0;
  int harmonics = 1024;
  unsigned seed = 7;
  std::filesystem::path config_path;  // empty: reference.json inside the demo directory
  std::string output_dir = "output/reference";  // relative to the configuration file
};

/// Writes a scene descriptor, two tracts, tremor recordings and a reference
/// configuration into `dir`; returns the configuration path.
std::filesystem::path generate_demo(const std::filesystem::path& dir, const DemoOptions& options = {});

}  // namespace dbs
