#pragma once

// Experiment configuration: scene descriptor, settings, models, tract and
// tremor recording references, and pipeline options, read from structured
// text and validated as a whole.

#include "dbs/pipeline.hpp"
#include "dbs/tremor.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace dbs {

/// Hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);
/// Hex SHA-256 of a file's contents. Throws InvalidInput when unreadable.
std::string file_sha256(const std::filesystem::path& path);
/// Canonical text of a document: keys sorted, no whitespace, so that key
/// order in the source does not change it.
std::string canonical_json(const nlohmann::json& doc);

/// Lead, tissue layout, grid and material overrides of one hemisphere.
struct SceneDescriptor {
  std::string name = "scene";
  LeadDescriptor lead;
  TissueLayout tissue;
  GridSpec grid;
  MaterialTable materials = MaterialTable::defaults();
  std::filesystem::path volume_path;  // imported label volume, if any
};

/// Parses a scene descriptor; relative label-volume paths resolve against
/// `base`. Appends every problem to `violations` (prefixed with `where`).
SceneDescriptor parse_scene_descriptor(const nlohmann::json& doc, const std::filesystem::path& base,
                                       std::vector<std::string>& violations, const std::string& where = "scene");
SceneDescriptor load_scene_descriptor(const std::filesystem::path& path);
nlohmann::json scene_descriptor_to_json(const SceneDescriptor& scene);

/// Voxelizes a descriptor and attaches the tracts.
Scene build_scene(const SceneDescriptor& descriptor, std::vector<FiberTract> tracts, const SolverOptions& solver = {});

/// Contact geometry, grid and tract overview.
nlohmann::json scene_summary(const Scene& scene);

/// Parses one setting object: {label?, polarity, amplitude_ma, frequency_hz,
/// pulse_width_us, shape?}. Appends problems to `violations`.
std::optional<StimulationSetting> parse_setting(const nlohmann::json& doc, std::vector<std::string>& violations,
                                                const std::string& where = "setting");
nlohmann::json setting_to_json(const StimulationSetting& s);
/// Every option that influences a report, for hashing and provenance.
nlohmann::json pipeline_options_to_json(const PipelineOptions& options);
nlohmann::json tremor_options_to_json(const TremorOptions& options);

/// Unknown contact names of a polarity against a lead's contacts.
std::vector<std::string> unknown_contacts(const Polarity& polarity, const LeadGeometry& lead);

struct TremorReference {
  std::string setting;  // setting label, or "None" for stimulation off
  std::filesystem::path recording;
};

enum class TaskKind { Activation, Tremor };

struct Task {
  std::string id;
  TaskKind kind = TaskKind::Activation;
  std::size_t index = 0;  // setting index for activations, reference index for tremor
  ModelKind model = ModelKind::Static;
};

struct ExperimentConfig {
  std::filesystem::path source;
  std::string name;
  std::filesystem::path scene_path;
  SceneDescriptor scene;
  std::vector<std::filesystem::path> tract_paths;
  std::vector<StimulationSetting> settings;
  std::vector<ModelKind> models;
  std::vector<TremorReference> tremor;
  std::filesystem::path output_dir;
  PipelineOptions pipeline;
  TremorOptions tremor_options;
  SolverOptions solver;
  std::string hash;  // of the canonical configuration document

  /// Activation tasks (models outer, settings inner) then tremor tasks.
  std::vector<Task> tasks() const;
  /// Index of a setting label; throws InvalidInput when absent.
  std::size_t setting_index(std::string_view label) const;
  std::vector<FiberTract> load_tracts() const;
};

/// Parses and resolves a configuration file. Relative paths resolve against
/// the file's directory; the output directory defaults to "output" beside it
/// and DBS_OUTPUT_DIR overrides it. Throws ValidationError listing every
/// violation found.
ExperimentConfig validate_config(const std::filesystem::path& path);
ExperimentConfig parse_config(const nlohmann::json& doc, const std::filesystem::path& base);

/// DBS_WORKERS when set to a positive integer, else `fallback`.
int workers_from_environment(int fallback = 0);

}  // namespace dbs
