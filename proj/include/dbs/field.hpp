#pragma once

// Current-controlled potential problems on the voxel grid.
//
// Cell-centered finite volumes with harmonic averaging of the admittivity at
// faces. Active contact groups are equipotential Dirichlet conductors,
// insulation and inactive contacts are excluded from the system. Units are
// millimetres, volts, milliamperes and millisiemens throughout: a face of
// width h between cells of admittivity k carries conductance k*h mS.

#include "dbs/common.hpp"
#include "dbs/multigrid.hpp"
#include "dbs/scene.hpp"
#include "dbs/stimulus.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <future>
#include <string>
#include <vector>

namespace dbs {

struct SolverOptions {
  double tolerance = 1e-8;  // relative residual
  int max_iterations = 0;   // 0 selects 20 * n^(1/3) * 100
  MultigridOptions multigrid;
  int extension_sweeps = 30;  // smoothing sweeps that fill excluded cells
};

struct SolverDiagnostics {
  int solves = 0;
  int iterations = 0;            // summed over solves
  int max_iterations = 0;        // worst single solve
  double relative_residual = 0;  // worst single solve
  std::size_t unknowns = 0;
  int levels = 0;

  void merge(const SolverDiagnostics& o);
};

/// Contact groups driven by a polarity, in canonical order (sorted contact
/// indices). Swapping polarity keeps `groups` and exchanges the roles.
struct ElectrodeConfiguration {
  std::vector<std::vector<std::size_t>> groups;
  int cathode = 0;
  int anode = -1;  // -1: return through the grid boundary (case)

  bool unipolar() const { return anode < 0; }
  std::string key() const;
};

/// Resolves contact names (with level ganging) against the grid's contacts.
/// Throws ValidationError naming every unknown contact.
ElectrodeConfiguration resolve_electrodes(const VoxelGrid& grid, const Polarity& polarity);

/// Cell roles used by the assembly.
namespace role {
inline constexpr std::int16_t kExcluded = -2;
inline constexpr std::int16_t kTissue = -1;
}  // namespace role

/// Potentials with group g at 1 V and every other active group at 0 V, plus
/// the conductance matrix G(i, j): current (mA) injected into tissue by group i
/// when basis field j is applied.
template <typename Scalar>
struct ContactBasis {
  std::vector<std::vector<std::size_t>> groups;
  double omega = 0.0;
  std::shared_ptr<const std::vector<std::int16_t>> roles;
  std::vector<VectorX<Scalar>> fields;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> conductance;
  SolverDiagnostics diagnostics;
};

template <typename Scalar>
ContactBasis<Scalar> solve_contact_basis(const VoxelGrid& grid, const std::vector<std::vector<std::size_t>>& groups,
                                         double omega, const SolverOptions& options = {});

/// Discrete potential u = scale * unit, where `unit` is the field driven by a
/// 1 mA cathodic current. Immutable and cheap to copy: the grid and unit field
/// are shared.
template <typename Scalar>
class FieldSolution {
 public:
  FieldSolution(std::shared_ptr<const VoxelGrid> grid, std::shared_ptr<const VectorX<Scalar>> unit,
                std::shared_ptr<const std::vector<std::int16_t>> roles, Scalar scale, Scalar unit_cathode_current,
                double omega, double basis_omega, int harmonic, SolverDiagnostics diagnostics)
      : grid_(std::move(grid)),
        unit_(std::move(unit)),
        roles_(std::move(roles)),
        scale_(scale),
        unit_current_(unit_cathode_current),
        omega_(omega),
        basis_omega_(basis_omega),
        harmonic_(harmonic),
        diagnostics_(diagnostics) {}

  const VoxelGrid& grid() const { return *grid_; }
  const std::shared_ptr<const VoxelGrid>& grid_ptr() const { return grid_; }
  const VectorX<Scalar>& unit_field() const { return *unit_; }
  const std::shared_ptr<const VectorX<Scalar>>& unit_ptr() const { return unit_; }
  const std::vector<std::int16_t>& roles() const { return *roles_; }
  Scalar scale() const { return scale_; }
  /// Angular frequency of the harmonic this solution represents.
  double omega() const { return omega_; }
  /// Angular frequency at which the admittivities were evaluated.
  double basis_omega() const { return basis_omega_; }
  int harmonic() const { return harmonic_; }
  const SolverDiagnostics& diagnostics() const { return diagnostics_; }

  Scalar potential(std::size_t idx) const { return scale_ * (*unit_)[static_cast<Eigen::Index>(idx)]; }
  VectorX<Scalar> potential() const { return scale_ * (*unit_); }

  /// Current injected into tissue by the cathode group, mA (negative for a
  /// cathodic drive).
  Scalar cathode_current() const { return scale_ * unit_current_; }

  FieldSolution scaled(Scalar factor) const {
    FieldSolution s = *this;
    s.scale_ = scale_ * factor;
    return s;
  }

 private:
  std::shared_ptr<const VoxelGrid> grid_;
  std::shared_ptr<const VectorX<Scalar>> unit_;
  std::shared_ptr<const std::vector<std::int16_t>> roles_;
  Scalar scale_;
  Scalar unit_current_;
  double omega_;
  double basis_omega_;
  int harmonic_;
  SolverDiagnostics diagnostics_;
};

using QsSolution = FieldSolution<double>;
using EqsSolution = FieldSolution<Complex>;

struct EqsOptions {
  /// Share one solve per octave band of harmonic frequency instead of solving
  /// every harmonic at its own admittivity.
  bool octave_bands = true;
  double band_base_hz = 100.0;
};

/// Octave band index and representative frequency used for a harmonic.
int octave_band(double frequency_hz, double base_hz);
double band_frequency(int band, double base_hz);

/// Thread-safe cache of contact bases for one grid, keyed by group set and
/// angular frequency. Each basis is solved once, however many settings and
/// threads request it.
class FieldCache {
 public:
  explicit FieldCache(std::shared_ptr<const VoxelGrid> grid, SolverOptions options = {});

  const std::shared_ptr<const VoxelGrid>& grid_ptr() const { return grid_; }
  const VoxelGrid& grid() const { return *grid_; }

  std::shared_ptr<const ContactBasis<double>> real_basis(const ElectrodeConfiguration& cfg);
  std::shared_ptr<const ContactBasis<Complex>> complex_basis(const ElectrodeConfiguration& cfg, double omega);

  QsSolution solve_qs(const StimulationSetting& setting);
  std::vector<EqsSolution> solve_eqs(const StimulationSetting& setting, const Spectrum& spectrum,
                                     const EqsOptions& eqs = {});

  std::size_t cached_bases() const;
  /// True when the real basis of this configuration is solved and ready.
  bool has_real_basis(const ElectrodeConfiguration& cfg) const;

 private:
  template <typename Scalar>
  using Entry = std::shared_future<std::shared_ptr<const ContactBasis<Scalar>>>;

  std::shared_ptr<const VoxelGrid> grid_;
  SolverOptions options_;
  mutable std::mutex mutex_;
  std::map<std::string, Entry<double>> real_;
  std::map<std::string, Entry<Complex>> complex_;
};

/// Unit-current field (1 mA cathodic) composed from a contact basis.
template <typename Scalar>
struct UnitDrive {
  std::shared_ptr<const VectorX<Scalar>> field;
  Scalar cathode_current;  // mA, -1 up to rounding
};

template <typename Scalar>
UnitDrive<Scalar> compose_unit_drive(const ContactBasis<Scalar>& basis, const ElectrodeConfiguration& cfg);

QsSolution solve_qs(std::shared_ptr<const VoxelGrid> grid, const StimulationSetting& setting,
                    const SolverOptions& options = {});
std::vector<EqsSolution> solve_eqs(std::shared_ptr<const VoxelGrid> grid, const StimulationSetting& setting,
                                   const Spectrum& spectrum, const EqsOptions& eqs = {},
                                   const SolverOptions& options = {});

/// Rescales so the cathode-group current magnitude equals `target_ma`.
/// Throws InvalidInput when the measured current is below 1e-12 mA.
template <typename Scalar>
FieldSolution<Scalar> scale_to_current(const FieldSolution<Scalar>& solution, double target_ma);

/// Point-source potential I / (4 pi sigma r); mA, S/m, mm -> V.
double analytic_point_source(double current_ma, double sigma, double r_mm);

struct ElectricFieldSample {
  Vec3 position = Vec3::Zero();
  Vec3 e = Vec3::Zero();  // V/m
  double magnitude = 0.0;
};

/// E = -grad u by central differences (step = spacing) of the trilinearly
/// interpolated potential. Throws InvalidInput outside the grid.
ElectricFieldSample field_at(const QsSolution& solution, const Vec3& point);

struct EqsFieldSample {
  Vec3 position = Vec3::Zero();
  std::vector<Eigen::Vector3cd> phasors;  // per harmonic, V/m
  double peak_magnitude = 0.0;            // max over one period of |E(t)|
};

EqsFieldSample field_at(const std::vector<EqsSolution>& harmonics, const Vec3& point);

/// Trilinear interpolation of a per-voxel array, clamped to the grid hull.
template <typename Scalar>
Scalar interpolate(const VoxelGrid& grid, const VectorX<Scalar>& values, const Vec3& point);

/// -grad of the interpolated array in V/m (values in V, positions in mm).
template <typename Scalar>
Eigen::Matrix<Scalar, 3, 1> negative_gradient(const VoxelGrid& grid, const VectorX<Scalar>& values, const Vec3& point);

/// Net current (mA) leaving the cell-index box [lo, hi] (inclusive) through
/// its faces, including faces on the grid boundary.
template <typename Scalar>
Scalar flux_through_box(const FieldSolution<Scalar>& solution, const Eigen::Array3i& lo, const Eigen::Array3i& hi);

/// Current (mA) injected into tissue by every contact cell with the given role.
template <typename Scalar>
Scalar group_current(const FieldSolution<Scalar>& solution, int group);

/// Time-averaged dissipated power Re(sum I_g conj(V_g)) / 2 over the active
/// groups, mW. Non-negative for a passive medium.
double dissipated_power(const EqsSolution& solution);

/// |E| at every voxel center of a QS solution (V/m), matching field_at there.
VectorX<double> field_magnitude_volume(const QsSolution& solution);

}  // namespace dbs
