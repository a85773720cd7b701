#include "dbs/vta.hpp"

#include <algorithm>
#include <cmath>

namespace dbs {

ThresholdTable ThresholdTable::defaults() { return ThresholdTable({{50.0, 3.5, 230.0}, {90.0, 3.5, 150.0}}, 200.0); }

ThresholdTable::ThresholdTable(std::vector<ThresholdKnot> knots, double generic_default)
    : knots_(std::move(knots)), generic_(generic_default) {
  if (knots_.empty()) throw InvalidInput("threshold table has no knots");
  if (!(generic_ > 0.0)) throw InvalidInput("generic threshold must be positive");
  for (const auto& k : knots_) {
    if (!(k.e_vm > 0.0)) throw InvalidInput("thresholds must be positive");
    if (!(k.pw_us > 0.0) || !(k.diam_um > 0.0)) throw InvalidInput("knot coordinates must be positive");
    pws_.push_back(k.pw_us);
    diams_.push_back(k.diam_um);
  }
  for (auto* axis : {&pws_, &diams_}) {
    std::sort(axis->begin(), axis->end());
    axis->erase(std::unique(axis->begin(), axis->end()), axis->end());
  }
  if (pws_.size() * diams_.size() != knots_.size())
    throw InvalidInput("threshold knots must form a full (pulse width x diameter) grid without duplicates");
  values_.assign(knots_.size(), -1.0);
  for (const auto& k : knots_) {
    const auto ip = static_cast<std::size_t>(std::lower_bound(pws_.begin(), pws_.end(), k.pw_us) - pws_.begin());
    const auto id = static_cast<std::size_t>(std::lower_bound(diams_.begin(), diams_.end(), k.diam_um) - diams_.begin());
    auto& v = values_[ip * diams_.size() + id];
    if (v >= 0.0) throw InvalidInput("duplicate threshold knot");
    v = k.e_vm;
  }
  for (std::size_t id = 0; id < diams_.size(); ++id)
    for (std::size_t ip = 1; ip < pws_.size(); ++ip)
      if (at(ip, id) > at(ip - 1, id))
        throw InvalidInput("threshold must not increase with pulse width at diameter " + std::to_string(diams_[id]));
}

bool ThresholdTable::in_hull(double pw_us, double diam_um) const {
  return pw_us >= pws_.front() && pw_us <= pws_.back() && diam_um >= diams_.front() && diam_um <= diams_.back();
}

namespace {

// Cell index and local coordinate along one axis. Single-valued axes give
// t = 0 on index 0.
std::pair<std::size_t, double> locate(const std::vector<double>& axis, double x) {
  if (axis.size() == 1) return {0, 0.0};
  auto it = std::upper_bound(axis.begin(), axis.end(), x);
  std::size_t i = it == axis.begin() ? 0 : static_cast<std::size_t>(it - axis.begin()) - 1;
  i = std::min(i, axis.size() - 2);
  return {i, (x - axis[i]) / (axis[i + 1] - axis[i])};
}

double lerp(double a, double b, double t) { return (1.0 - t) * a + t * b; }

}  // namespace

double ThresholdTable::threshold_for(double pw_us, double diam_um, bool extrapolate) const {
  if (!std::isfinite(pw_us) || !std::isfinite(diam_um)) throw InvalidInput("threshold query must be finite");
  if (!in_hull(pw_us, diam_um) && !extrapolate)
    throw InvalidInput("threshold query (" + std::to_string(pw_us) + " us, " + std::to_string(diam_um) +
                       " um) lies outside the table");
  const auto [ip, tp] = locate(pws_, pw_us);
  const auto [id, td] = locate(diams_, diam_um);
  const std::size_t ip1 = pws_.size() > 1 ? ip + 1 : ip;
  const std::size_t id1 = diams_.size() > 1 ? id + 1 : id;
  const double lo = lerp(at(ip, id), at(ip1, id), tp);
  const double hi = lerp(at(ip, id1), at(ip1, id1), tp);
  const double v = lerp(lo, hi, td);
  if (!(v > 0.0)) throw InvalidInput("extrapolated threshold is not positive");
  return v;
}

double threshold_for(double pw_us, double diam_um, const ThresholdTable& table, bool extrapolate) {
  return table.threshold_for(pw_us, diam_um, extrapolate);
}

double VtaMask::volume_mm3() const {
  const double h = grid ? grid->spacing() : 0.0;
  return static_cast<double>(count) * h * h * h;
}

VtaMask vta_region(std::shared_ptr<const VoxelGrid> grid, const VectorX<double>& magnitude, double threshold) {
  if (static_cast<std::size_t>(magnitude.size()) != grid->size()) throw InvalidInput("field volume size mismatch");
  VtaMask m;
  m.threshold = threshold;
  m.inside.resize(grid->size());
  for (std::size_t i = 0; i < grid->size(); ++i) {
    m.inside[i] = magnitude[static_cast<Eigen::Index>(i)] >= threshold ? 1 : 0;
    m.count += m.inside[i];
  }
  m.grid = std::move(grid);
  return m;
}

VtaMask vta_region(const QsSolution& solution, double threshold) {
  return vta_region(solution.grid_ptr(), field_magnitude_volume(solution), threshold);
}

double fiber_peak_field(const FieldMagnitude& magnitude, const VoxelGrid& grid, const Fiber& fiber) {
  double peak = 0.0;
  for (const auto& p : resample_polyline(fiber.points, kFiberSampleSpacing))
    if (grid.contains(p)) peak = std::max(peak, magnitude(p));
  return peak;
}

FiberTract activated_fibers_static(const FieldMagnitude& magnitude, const VoxelGrid& grid, FiberTract tract,
                                   double threshold) {
  for (auto& f : tract.fibers) {
    if (f.status == FiberStatus::Damaged || f.status == FiberStatus::Failed) continue;
    bool active = false;
    for (const auto& p : resample_polyline(f.points, kFiberSampleSpacing)) {
      if (!grid.contains(p)) continue;
      if (magnitude(p) >= threshold) {
        active = true;
        break;
      }
    }
    f.status = active ? FiberStatus::Activated : FiberStatus::NonActivated;
  }
  return tract;
}

FiberTract activated_fibers_static(const QsSolution& solution, FiberTract tract, double threshold) {
  return activated_fibers_static([&](const Vec3& p) { return field_at(solution, p).magnitude; }, solution.grid(),
                                 std::move(tract), threshold);
}

FiberTract activated_fibers_static(const std::vector<EqsSolution>& harmonics, FiberTract tract, double threshold) {
  if (harmonics.empty()) throw InvalidInput("no harmonic solutions");
  return activated_fibers_static([&](const Vec3& p) { return field_at(harmonics, p).peak_magnitude; },
                                 harmonics.front().grid(), std::move(tract), threshold);
}

std::string_view to_string(DenominatorRule r) { return r == DenominatorRule::All ? "all" : "non-damaged"; }

DenominatorRule parse_denominator_rule(std::string_view name) {
  if (name == "all") return DenominatorRule::All;
  if (name == "non-damaged" || name == "non_damaged") return DenominatorRule::NonDamaged;
  throw InvalidInput("unknown denominator rule '" + std::string(name) + "'");
}

double activation_percentage(const FiberTract& tract, DenominatorRule rule) {
  if (tract.fibers.empty()) throw InvalidInput("tract '" + tract.name + "' has no fibers");
  if (tract.count(FiberStatus::Unknown) > 0)
    throw InvalidInput("tract '" + tract.name + "' still has fibers in status unknown");
  const double activated = static_cast<double>(tract.count(FiberStatus::Activated));
  double denominator = static_cast<double>(tract.fibers.size());
  if (rule == DenominatorRule::NonDamaged) denominator -= static_cast<double>(tract.count(FiberStatus::Damaged));
  if (denominator <= 0.0) return 0.0;
  return 100.0 * activated / denominator;
}

}  // namespace dbs
