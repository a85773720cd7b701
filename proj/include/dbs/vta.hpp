#pragma once

#include "dbs/field.hpp"
#include "dbs/scene.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace dbs {

struct ThresholdKnot {
  double pw_us;
  double diam_um;
  double e_vm;
};

/// Field-norm activation thresholds over (pulse width, fiber diameter), with
/// bilinear interpolation on a rectilinear knot grid.
class ThresholdTable {
 public:
  /// Knots at 3.5 um: 90 us -> 150 V/m and 50 us -> 230 V/m; generic 200 V/m.
  static ThresholdTable defaults();

  /// Throws InvalidInput for non-positive thresholds, a non-rectilinear knot
  /// set, duplicates, or thresholds that increase with pulse width.
  explicit ThresholdTable(std::vector<ThresholdKnot> knots, double generic_default = 200.0);

  const std::vector<ThresholdKnot>& knots() const { return knots_; }
  double generic_default() const { return generic_; }
  bool in_hull(double pw_us, double diam_um) const;

  /// Exact at knots. Outside the hull throws InvalidInput unless
  /// `extrapolate`, in which case edge cells are extended linearly (constant
  /// along an axis with a single knot value).
  double threshold_for(double pw_us, double diam_um, bool extrapolate = false) const;

 private:
  double at(std::size_t ip, std::size_t id) const { return values_[ip * diams_.size() + id]; }

  std::vector<ThresholdKnot> knots_;
  std::vector<double> pws_, diams_, values_;
  double generic_;
};

double threshold_for(double pw_us, double diam_um, const ThresholdTable& table, bool extrapolate = false);

struct VtaMask {
  std::shared_ptr<const VoxelGrid> grid;
  std::vector<std::uint8_t> inside;
  double threshold = 0.0;
  std::size_t count = 0;

  double volume_mm3() const;
};

VtaMask vta_region(const QsSolution& solution, double threshold);
/// Mask from any per-voxel |E| volume (for instance an EQS peak field).
VtaMask vta_region(std::shared_ptr<const VoxelGrid> grid, const VectorX<double>& magnitude, double threshold);

/// Spacing used to sample fibers for field evaluation, mm.
inline constexpr double kFiberSampleSpacing = 0.5;

using FieldMagnitude = std::function<double(const Vec3&)>;

/// Marks every fiber that is neither damaged nor failed as activated when |E|
/// reaches the threshold at one of its samples, otherwise non-activated.
/// Samples outside the grid are skipped.
FiberTract activated_fibers_static(const FieldMagnitude& magnitude, const VoxelGrid& grid, FiberTract tract,
                                   double threshold);
FiberTract activated_fibers_static(const QsSolution& solution, FiberTract tract, double threshold);
FiberTract activated_fibers_static(const std::vector<EqsSolution>& harmonics, FiberTract tract, double threshold);

/// Largest |E| over the samples of a fiber inside the grid.
double fiber_peak_field(const FieldMagnitude& magnitude, const VoxelGrid& grid, const Fiber& fiber);

enum class DenominatorRule { All, NonDamaged };
std::string_view to_string(DenominatorRule r);
DenominatorRule parse_denominator_rule(std::string_view name);

/// 100 * activated / denominator. Throws InvalidInput for an empty tract or
/// fibers still in status unknown.
double activation_percentage(const FiberTract& tract, DenominatorRule rule = DenominatorRule::All);

}  // namespace dbs
