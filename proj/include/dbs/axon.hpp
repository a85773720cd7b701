#pragma once

// Double-cable myelinated axon: nodes of Ranvier with fast and persistent
// sodium, slow potassium and leak channels, joined by internodes of paranodal
// (MYSA, FLUT) and internodal (STIN) compartments, each with an axolemma and a
// myelin sheath separated by a periaxonal layer.

#include "dbs/field.hpp"
#include "dbs/scene.hpp"
#include "dbs/stimulus.hpp"

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace dbs {

/// Geometry of one fiber diameter, um.
struct MrgGeometry {
  double fiber_d;
  double g_ratio;
  double axon_d;
  double node_d;
  double mysa_d;
  double flut_d;
  double deltax;       // node-to-node spacing
  double flut_length;
  int lamellae;
};

struct PassiveLayer {
  double cm;     // uF/cm2
  double g_pas;  // S/cm2
  double e_pas;  // mV
};

/// A named parameter set loaded from a structured text file.
struct MrgParameters {
  std::string name;
  // global
  double rhoa;  // axoplasmic resistivity, ohm um
  double mycm;  // uF/cm2 per lamella membrane
  double mygm;  // S/cm2 per lamella membrane
  double node_length;
  double mysa_length;
  double space_node, space_mysa, space_flut, space_stin;  // periaxonal widths, um
  double celsius;
  double v_init;
  // node membrane
  double node_cm;
  double gnapbar, gnabar, gkbar, gl;
  double ena, ek, el;
  PassiveLayer mysa, flut, stin;
  std::map<std::string, double> rates;
  std::vector<MrgGeometry> geometry;

  /// Default parameter file: $DBS_DATA_DIR/mrg_params.json, else the data
  /// directory of the source tree.
  static std::filesystem::path default_path();
  static MrgParameters load(const std::filesystem::path& path = default_path());
  static MrgParameters from_json(std::string_view text);

  /// Geometry row for a diameter in the table; throws InvalidInput otherwise.
  const MrgGeometry& row(double fiber_d) const;
  double rate(const std::string& key) const;
};

enum class CompartmentKind { Node, Mysa, Flut, Stin };
std::string_view to_string(CompartmentKind k);

struct Compartment {
  CompartmentKind kind;
  double length_um;
  double arc_um;  // center, arc length from the first fiber point
  Vec3 position;  // mm
};

/// Spatially discretized axon with its electrical constants in nF, uS, mV.
class AxonModel {
 public:
  AxonModel(const std::vector<Vec3>& polyline, double fiber_d, const MrgParameters& params);

  double fiber_diameter() const { return fiber_d_; }
  const MrgGeometry& geometry() const { return geom_; }
  const std::vector<Compartment>& compartments() const { return comps_; }
  std::size_t size() const { return comps_.size(); }
  /// Compartment indices of the nodes, in order along the fiber.
  const std::vector<std::size_t>& nodes() const { return nodes_; }
  std::size_t spans() const { return nodes_.size() - 1; }

  /// Membrane potential at rest per compartment, mV.
  const std::vector<double>& rest_potential() const { return rest_vm_; }
  /// Periaxonal potential at rest per compartment, mV.
  const std::vector<double>& rest_periaxonal() const { return rest_vp_; }
  /// Gates (mp, m, h, s) at rest per node.
  const std::vector<std::array<double, 4>>& rest_gates() const { return rest_gates_; }

 private:
  friend class AxonIntegrator;
  void relax_to_rest();

  double fiber_d_;
  MrgGeometry geom_;
  std::vector<Compartment> comps_;
  std::vector<std::size_t> nodes_;

  // Per compartment.
  std::vector<double> c_m_;      // axolemma capacitance
  std::vector<double> g_pas_;    // passive conductance (internodes)
  std::vector<double> e_pas_;
  std::vector<double> c_my_;     // myelin capacitance
  std::vector<double> g_my_;     // myelin conductance
  std::vector<double> g_node_na_, g_node_nap_, g_node_k_, g_node_l_;  // node maximal conductances
  // Between compartment i and i+1.
  std::vector<double> g_axial_;
  std::vector<double> g_peri_;

  // Node kinetics.
  std::map<std::string, double> rates_;
  double q10_mpm_, q10_h_, q10_s_;
  double ena_, ek_, el_;
  double v_init_;

  // Resting state: membrane potential, periaxonal potential and node gates.
  std::vector<double> rest_vm_, rest_vp_;
  std::vector<std::array<double, 4>> rest_gates_;  // mp, m, h, s per node
};

AxonModel build_axon(const Fiber& fiber, const MrgParameters& params);
AxonModel build_axon(const std::vector<Vec3>& polyline, double fiber_d, const MrgParameters& params);

/// Sampling of the stimulation: an initial unstimulated interval, then whole
/// periods with a uniform step.
struct TimeGrid {
  double dt_ms = 0.0;
  int steps_per_period = 0;
  int settle_steps = 0;
  int periods = 0;

  double period_ms() const { return dt_ms * steps_per_period; }
  double settle_ms() const { return dt_ms * settle_steps; }
  int total_steps() const { return settle_steps + periods * steps_per_period; }
  double duration_ms() const { return dt_ms * total_steps(); }
};

/// Largest step <= dt_max_us that divides the period; the settling time is
/// rounded up to whole steps.
TimeGrid make_time_grid(double frequency_hz, double dt_max_us = 5.0, double settle_ms = 5.0, int periods = 3);

/// Extracellular potential per compartment over one stimulation period (mV),
/// zero during settling and repeated afterwards. Sample m is the average over
/// step (m dt, (m + 1) dt] of the period.
class ExtracellularDrive {
 public:
  ExtracellularDrive(TimeGrid time, Eigen::MatrixXd period_samples);

  const TimeGrid& time() const { return time_; }
  double dt_ms() const { return time_.dt_ms; }
  double duration_ms() const { return time_.duration_ms(); }
  Eigen::Index compartments() const { return samples_.rows(); }
  const Eigen::MatrixXd& period_samples() const { return samples_; }

  /// Potential applied during step `step` (0-based) at compartment c.
  double at(Eigen::Index c, int step) const {
    if (step < time_.settle_steps) return 0.0;
    return samples_(c, (step - time_.settle_steps) % time_.steps_per_period);
  }

  ExtracellularDrive scaled(double factor) const { return {time_, factor * samples_}; }

 private:
  TimeGrid time_;
  Eigen::MatrixXd samples_;
};

/// Drive from a static potential pattern times the pulse shape. `potential_mv`
/// is V_e per compartment during the cathodic phase at the train amplitude.
ExtracellularDrive extracellular_drive(const std::vector<double>& potential_mv, const PulseTrain& train,
                                       const TimeGrid& time);
/// QS: the solution potential scaled by the train shape. Throws InvalidInput
/// when a compartment lies outside the grid.
ExtracellularDrive extracellular_drive(const AxonModel& axon, const QsSolution& solution, const PulseTrain& train,
                                       const TimeGrid& time);
/// EQS: sum over harmonics of Re[u_k(x) exp(i k w t)] with the phasors of the
/// solutions (their scale already carries the stimulus coefficient).
ExtracellularDrive extracellular_drive(const AxonModel& axon, const std::vector<EqsSolution>& harmonics,
                                       double fundamental_hz, const TimeGrid& time);
/// Potential from a closed-form source, mV per compartment position (mm).
ExtracellularDrive extracellular_drive(const AxonModel& axon, const std::function<double(const Vec3&)>& potential_mv,
                                       const PulseTrain& train, const TimeGrid& time);

struct SimulationOptions {
  double arm_mv = -40.0;     // a node must fall below this before a spike counts
  double detect_mv = -20.0;  // upward crossing threshold
  bool record_traces = false;
};

struct SpikeRecord {
  std::vector<std::vector<double>> node_spikes;  // ms, per node
  double settle_ms = 0.0;
  double period_ms = 0.0;
  int periods = 0;
  double dt_ms = 0.0;
  double max_deviation_mv = 0.0;           // largest |V_m - V_rest| over all compartments and steps
  std::vector<std::vector<float>> traces;  // per node membrane potential, mV, when recorded

  bool any_spike() const;
};

SpikeRecord simulate(const AxonModel& axon, const ExtracellularDrive& drive, const SimulationOptions& options = {});

/// True iff a terminal node spikes at least once in every stimulation period
/// after settling.
bool is_activated(const SpikeRecord& record);
bool is_activated(const SpikeRecord& record, const PulseTrain& train);

/// Bisection on the amplitude scale of a 1 mA drive template until the
/// bracket is narrower than `tolerance_ma`; returns the midpoint. Throws
/// InvalidInput for a non-positive tolerance or a bracket that does not
/// straddle the threshold.
double find_threshold(const AxonModel& axon, const ExtracellularDrive& unit_drive, double tolerance_ma,
                      double lo_ma = 0.0, double hi_ma = 20.0, const SimulationOptions& options = {});

/// Node membrane traces as tabular text: time_ms, node_0, node_1, ...
void write_traces(const SpikeRecord& record, const std::filesystem::path& path);

}  // namespace dbs
