#pragma once

// Scene -> field -> fiber activation for the static threshold model and the
// double-cable axon model, with per-setting reports and comparison tables.

#include "dbs/axon.hpp"
#include "dbs/field.hpp"
#include "dbs/scene.hpp"
#include "dbs/stimulus.hpp"
#include "dbs/vta.hpp"

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace dbs {

enum class ModelKind { Static, NeuronQs, NeuronEqs };
std::string_view to_string(ModelKind m);
/// Accepts "static", "neuron-QS", "neuron-EQS" (case-insensitive suffix).
ModelKind parse_model(std::string_view name);

/// A lead in its voxelized tissue with the tracts to evaluate. Field solves
/// are cached per scene and shared by every setting and thread.
struct Scene {
  std::string name;
  LeadGeometry lead;
  std::shared_ptr<const VoxelGrid> grid;
  double encapsulation_mm = 0.1;
  std::vector<FiberTract> tracts;
  std::shared_ptr<FieldCache> cache;
};

Scene make_scene(std::string name, LeadGeometry lead, VoxelGrid grid, double encapsulation_mm,
                 std::vector<FiberTract> tracts, const SolverOptions& solver = {});

/// What the static model does for a (pulse width, diameter) query outside the
/// threshold table hull.
enum class ThresholdFallback { Error, Extrapolate, GenericDefault };
std::string_view to_string(ThresholdFallback f);
ThresholdFallback parse_threshold_fallback(std::string_view name);

struct PipelineOptions {
  ThresholdTable thresholds = ThresholdTable::defaults();
  /// Diameter used for the static threshold lookup; unset uses each fiber's own.
  std::optional<double> static_diameter_um = 3.5;
  ThresholdFallback fallback = ThresholdFallback::GenericDefault;
  DenominatorRule denominator = DenominatorRule::All;

  int harmonics = 1024;
  EqsOptions eqs;
  double dt_max_us = 5.0;
  double settle_ms = 5.0;
  int periods = 3;
  SimulationOptions simulation;
  /// Axon parameter set; loaded from the default file when null.
  std::shared_ptr<const MrgParameters> axon_parameters;
  /// Fiber-level threads; 0 picks the hardware concurrency.
  int workers = 0;
};

/// Static threshold (V/m) for a setting and fiber diameter under the options.
double static_threshold(const PipelineOptions& options, double pulse_width_us, double fiber_d_um);

struct FiberFailure {
  std::size_t fiber = 0;
  std::string message;
};

struct TractReport {
  std::string name;
  std::vector<FiberStatus> statuses;
  std::vector<FiberFailure> failures;
  std::size_t activated = 0;
  std::size_t non_activated = 0;
  std::size_t damaged = 0;
  std::size_t failed = 0;
  double percentage = 0.0;
};

struct ActivationReport {
  StimulationSetting setting;
  ModelKind model = ModelKind::Static;
  DenominatorRule denominator = DenominatorRule::All;
  std::optional<double> threshold_v_per_m;  // static model only, when uniform over fibers
  std::vector<TractReport> tracts;
  SolverDiagnostics solver;
  double wall_time_s = 0.0;

  const TractReport& tract(std::string_view name) const;
};

/// Fills the counts and percentage of a tract whose statuses are final.
TractReport summarize_tract(const FiberTract& tract, DenominatorRule rule, std::vector<FiberFailure> failures = {});

ActivationReport run_static(const Scene& scene, const StimulationSetting& setting, const PipelineOptions& options = {});
/// Damaged fibers are never simulated; a fiber whose axon cannot be built or
/// whose integration fails is marked failed and listed, the batch goes on.
ActivationReport run_neuron(const Scene& scene, const StimulationSetting& setting, ModelKind formulation,
                            const PipelineOptions& options = {});
ActivationReport run_model(const Scene& scene, const StimulationSetting& setting, ModelKind model,
                           const PipelineOptions& options = {});

/// Machine-readable report; the wall time is included only on request so the
/// default text is reproducible byte for byte.
std::string report_to_json(const ActivationReport& report, bool include_timing = false);
/// Inverse of report_to_json. Throws InvalidInput for malformed text.
ActivationReport report_from_json(std::string_view text);
/// Aligned human-readable summary.
std::string report_to_text(const ActivationReport& report);

struct ComparisonRow {
  std::string label;
  ModelKind model = ModelKind::Static;
  std::vector<double> percentages;  // per tract, in table tract order
};

struct PolarityPair {
  std::string first;
  std::string second;
  ModelKind model = ModelKind::Static;
  bool identical = false;
  double max_difference = 0.0;  // percentage points over tracts
  std::string annotation;
};

struct ComparisonTable {
  std::vector<std::string> tracts;
  std::vector<ComparisonRow> rows;  // models in request order, settings in config order within each
  std::vector<PolarityPair> pairs;
  std::vector<ActivationReport> reports;  // one per row
};

/// True when `b` uses the same contacts as `a` with cathodes and anodes
/// exchanged and every other parameter equal.
bool is_polarity_pair(const StimulationSetting& a, const StimulationSetting& b);

/// Throws InvalidInput for empty lists or duplicate setting labels.
ComparisonTable compare_settings(const Scene& scene, const std::vector<StimulationSetting>& settings,
                                 const std::vector<ModelKind>& models, const PipelineOptions& options = {});
/// Builds the table from reports already computed (one per setting and model).
ComparisonTable make_comparison(std::vector<ActivationReport> reports);

/// Delimited table: model, setting, one "<tract> [%]" column per tract.
std::string table_to_csv(const ComparisonTable& table);
std::string table_to_text(const ComparisonTable& table);
std::string table_to_json(const ComparisonTable& table);

}  // namespace dbs
