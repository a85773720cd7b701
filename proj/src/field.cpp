#include "dbs/field.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>
#include <unordered_map>

namespace dbs {

void SolverDiagnostics::merge(const SolverDiagnostics& o) {
  solves += o.solves;
  iterations += o.iterations;
  max_iterations = std::max(max_iterations, o.max_iterations);
  relative_residual = std::max(relative_residual, o.relative_residual);
  unknowns = std::max(unknowns, o.unknowns);
  levels = std::max(levels, o.levels);
}

std::string ElectrodeConfiguration::key() const {
  std::ostringstream s;
  for (const auto& g : groups) {
    s << '[';
    for (auto c : g) s << c << ' ';
    s << ']';
  }
  return s.str();
}

ElectrodeConfiguration resolve_electrodes(const VoxelGrid& grid, const Polarity& polarity) {
  std::vector<std::string> errors;
  const auto histogram = grid.histogram();
  auto collect = [&](const std::vector<std::string>& names) {
    std::set<std::size_t> out;
    for (const auto& n : names) {
      const auto idx = resolve_contact_name(grid.contact_ids(), n);
      if (idx.empty()) {
        errors.push_back("unknown contact '" + n + "'");
        continue;
      }
      for (auto i : idx) {
        const auto code = label::contact(i);
        if (code >= histogram.size() || histogram[code] == 0)
          errors.push_back("contact " + grid.contact_ids()[i] + " covers no voxel");
        out.insert(i);
      }
    }
    return std::vector<std::size_t>(out.begin(), out.end());
  };
  const auto cathode = collect(polarity.cathodes);
  const auto anode = collect(polarity.anodes);
  if (polarity.cathodes.empty()) errors.push_back("no cathode contact");
  for (auto c : cathode)
    if (std::find(anode.begin(), anode.end(), c) != anode.end())
      errors.push_back("contact " + grid.contact_ids()[c] + " is both cathode and anode");
  if (!errors.empty()) throw ValidationError(std::move(errors));

  ElectrodeConfiguration cfg;
  cfg.groups.push_back(cathode);
  if (!anode.empty()) {
    cfg.groups.push_back(anode);
    if (anode < cathode) {
      std::swap(cfg.groups[0], cfg.groups[1]);
      cfg.cathode = 1;
      cfg.anode = 0;
    } else {
      cfg.anode = 1;
    }
  }
  return cfg;
}

namespace {

template <typename Scalar>
Scalar cell_admittivity(const MaterialTable& m, Tissue t, double omega);

template <>
double cell_admittivity<double>(const MaterialTable& m, Tissue t, double) {
  return m[t].sigma;
}

template <>
Complex cell_admittivity<Complex>(const MaterialTable& m, Tissue t, double omega) {
  return m.admittivity(t, omega);
}

std::vector<std::int16_t> make_roles(const VoxelGrid& grid, const std::vector<std::vector<std::size_t>>& groups) {
  std::vector<std::int16_t> contact_role(grid.contact_ids().size(), role::kExcluded);
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (auto c : groups[g]) contact_role.at(c) = static_cast<std::int16_t>(g);
  std::vector<std::int16_t> roles(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto l = grid.label(i);
    if (label::is_tissue(l)) roles[i] = role::kTissue;
    else if (label::is_contact(l)) roles[i] = contact_role.at(label::contact_index(l));
    else roles[i] = role::kExcluded;
  }
  return roles;
}

// Face and boundary conductances (mS) for one cell-role assignment.
template <typename Scalar>
class Conductances {
 public:
  Conductances(const VoxelGrid& grid, const std::vector<std::int16_t>& roles, double omega)
      : grid_(grid), roles_(roles), h_(grid.spacing()), kappa_(grid.size(), Scalar(0)) {
    std::array<Scalar, kTissueCount> table;
    for (int t = 0; t < kTissueCount; ++t)
      table[t] = cell_admittivity<Scalar>(grid.materials(), static_cast<Tissue>(t), omega);
    for (std::size_t i = 0; i < grid.size(); ++i)
      if (roles[i] == role::kTissue) kappa_[i] = table[grid.label(i)];
  }

  Scalar face(std::size_t a, std::size_t b) const {
    const auto ra = roles_[a], rb = roles_[b];
    if (ra == role::kExcluded || rb == role::kExcluded) return Scalar(0);
    if (ra == role::kTissue && rb == role::kTissue) {
      const Scalar ka = kappa_[a], kb = kappa_[b];
      return Scalar(2.0 * h_) * ka * kb / (ka + kb);
    }
    if (ra == role::kTissue) return Scalar(2.0 * h_) * kappa_[a];
    if (rb == role::kTissue) return Scalar(2.0 * h_) * kappa_[b];
    return Scalar(0);
  }

  // Conductance from tissue cell (i,j,k) to ground through grid face f
  // (0:-x 1:+x 2:-y 3:+y 4:-z 5:+z).
  Scalar boundary(std::size_t a, int i, int j, int k, int f) const {
    if (roles_[a] != role::kTissue) return Scalar(0);
    const Scalar half = Scalar(2.0 * h_) * kappa_[a];
    if (grid_.boundary()[f] == BoundaryCondition::Grounded) return half;
    Vec3 n = Vec3::Zero();
    n[f / 2] = (f & 1) ? 1.0 : -1.0;
    const Vec3 x = grid_.center(i, j, k) + 0.5 * h_ * n - grid_.far_field_center();
    const double r = x.norm();
    const double cos = r > 0.0 ? x.dot(n) / r : 0.0;
    if (cos <= 0.0) return Scalar(0);
    const Scalar robin = kappa_[a] * Scalar(cos * h_ * h_ / r);
    return robin * half / (robin + half);
  }

 private:
  const VoxelGrid& grid_;
  const std::vector<std::int16_t>& roles_;
  double h_;
  std::vector<Scalar> kappa_;
};

// Visits every cell face once: fn(a, b) for interior faces (b = a + stride)
// and fb(a, i, j, k, f) for faces on the grid boundary.
template <typename Interior, typename Boundary>
void for_each_face(const Eigen::Array3i& n, Interior fn, Boundary fb) {
  const std::size_t sy = static_cast<std::size_t>(n[0]), sz = sy * static_cast<std::size_t>(n[1]);
  for (int k = 0; k < n[2]; ++k)
    for (int j = 0; j < n[1]; ++j)
      for (int i = 0; i < n[0]; ++i) {
        const std::size_t a = static_cast<std::size_t>(i) + sy * j + sz * k;
        if (i + 1 < n[0]) fn(a, a + 1, 0); else fb(a, i, j, k, 1);
        if (j + 1 < n[1]) fn(a, a + sy, 1); else fb(a, i, j, k, 3);
        if (k + 1 < n[2]) fn(a, a + sz, 2); else fb(a, i, j, k, 5);
        if (i == 0) fb(a, i, j, k, 0);
        if (j == 0) fb(a, i, j, k, 2);
        if (k == 0) fb(a, i, j, k, 4);
      }
}

// Fills excluded cells by repeated neighbor averaging so that interpolation
// near insulation sees a smooth continuation instead of zeros.
template <typename Scalar>
void extend_into_excluded(const VoxelGrid& grid, const std::vector<std::int16_t>& roles, VectorX<Scalar>& u,
                          int sweeps) {
  const auto& n = grid.dims();
  std::vector<std::size_t> cells;
  for (std::size_t i = 0; i < roles.size(); ++i)
    if (roles[i] == role::kExcluded) cells.push_back(i);
  const std::ptrdiff_t sy = n[0], sz = static_cast<std::ptrdiff_t>(n[0]) * n[1];
  for (int s = 0; s < sweeps; ++s) {
    for (auto id : cells) {
      const auto c = grid.coords(id);
      Scalar sum(0);
      int count = 0;
      auto add = [&](std::ptrdiff_t off) {
        sum += u[static_cast<Eigen::Index>(static_cast<std::ptrdiff_t>(id) + off)];
        ++count;
      };
      if (c[0] > 0) add(-1);
      if (c[0] + 1 < n[0]) add(1);
      if (c[1] > 0) add(-sy);
      if (c[1] + 1 < n[1]) add(sy);
      if (c[2] > 0) add(-sz);
      if (c[2] + 1 < n[2]) add(sz);
      if (count > 0) u[static_cast<Eigen::Index>(id)] = sum / Scalar(count);
    }
  }
}

std::string omega_key(double omega) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%a", omega);
  return buf;
}

}  // namespace

template <typename Scalar>
ContactBasis<Scalar> solve_contact_basis(const VoxelGrid& grid, const std::vector<std::vector<std::size_t>>& groups,
                                         double omega, const SolverOptions& options) {
  if (groups.empty()) throw InvalidInput("no contact group to drive");
  ContactBasis<Scalar> basis;
  basis.groups = groups;
  basis.omega = omega;
  auto roles = std::make_shared<std::vector<std::int16_t>>(make_roles(grid, groups));
  basis.roles = roles;
  const Conductances<Scalar> cond(grid, *roles, omega);
  const auto m = static_cast<Eigen::Index>(grid.size());
  const auto ng = static_cast<Eigen::Index>(groups.size());

  auto A = std::make_shared<StencilLevel<Scalar>>(grid.dims());
  auto& level = *A;
  level.diag.setZero();
  std::vector<VectorX<Scalar>> rhs(groups.size(), VectorX<Scalar>::Zero(m));
  bool ground_path = ng > 1;
  std::size_t unknowns = 0;
  for (std::size_t i = 0; i < grid.size(); ++i)
    if ((*roles)[i] == role::kTissue) {
      level.active[i] = 1;
      ++unknowns;
    }
  if (unknowns == 0) throw SolverError("grid has no tissue cells");

  auto& R = *roles;
  for_each_face(
      grid.dims(),
      [&](std::size_t a, std::size_t b, int axis) {
        const Scalar g = cond.face(a, b);
        if (g == Scalar(0)) return;
        const bool ta = R[a] == role::kTissue, tb = R[b] == role::kTissue;
        if (ta) level.diag[static_cast<Eigen::Index>(a)] += g;
        if (tb) level.diag[static_cast<Eigen::Index>(b)] += g;
        if (ta && tb) {
          auto& c = axis == 0 ? level.cx : axis == 1 ? level.cy : level.cz;
          c[static_cast<Eigen::Index>(a)] = g;
        } else if (ta) {
          rhs[static_cast<std::size_t>(R[b])][static_cast<Eigen::Index>(a)] += g;
        } else if (tb) {
          rhs[static_cast<std::size_t>(R[a])][static_cast<Eigen::Index>(b)] += g;
        }
      },
      [&](std::size_t a, int i, int j, int k, int f) {
        const Scalar g = cond.boundary(a, i, j, k, f);
        if (g == Scalar(0)) return;
        level.diag[static_cast<Eigen::Index>(a)] += g;
        ground_path = true;
      });
  for (std::size_t i = 0; i < grid.size(); ++i)
    if (!level.active[i]) level.diag[static_cast<Eigen::Index>(i)] = Scalar(1);
  if (!ground_path) throw SolverError("singular system: no ground path for a single contact group");

  const Multigrid<Scalar> mg(A, options.multigrid);
  const int cap = options.max_iterations > 0
                      ? options.max_iterations
                      : static_cast<int>(20.0 * std::cbrt(static_cast<double>(unknowns)) * 100.0);

  basis.diagnostics.unknowns = unknowns;
  basis.diagnostics.levels = static_cast<int>(mg.levels());
  for (Eigen::Index g = 0; g < ng; ++g) {
    VectorX<Scalar> x;
    const auto res = preconditioned_cg(level, mg, rhs[static_cast<std::size_t>(g)], x, options.tolerance, cap);
    if (!res.converged) {
      std::ostringstream msg;
      msg << "field solve did not converge: " << res.iterations << " iterations, relative residual "
          << res.relative_residual;
      throw SolverError(msg.str());
    }
    basis.diagnostics.solves += 1;
    basis.diagnostics.iterations += res.iterations;
    basis.diagnostics.max_iterations = std::max(basis.diagnostics.max_iterations, res.iterations);
    basis.diagnostics.relative_residual = std::max(basis.diagnostics.relative_residual, res.relative_residual);
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const auto r = R[i];
      if (r >= 0) x[static_cast<Eigen::Index>(i)] = r == g ? Scalar(1) : Scalar(0);
    }
    extend_into_excluded(grid, R, x, options.extension_sweeps);
    basis.fields.push_back(std::move(x));
  }

  basis.conductance = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>::Zero(ng, ng);
  for_each_face(
      grid.dims(),
      [&](std::size_t a, std::size_t b, int) {
        const auto ra = R[a], rb = R[b];
        if ((ra >= 0) == (rb >= 0)) return;
        if (ra == role::kExcluded || rb == role::kExcluded) return;
        const std::size_t c = ra >= 0 ? a : b, t = ra >= 0 ? b : a;
        const Scalar g = cond.face(a, b);
        for (Eigen::Index j = 0; j < ng; ++j) {
          const auto& u = basis.fields[static_cast<std::size_t>(j)];
          basis.conductance(R[c], j) += g * (u[static_cast<Eigen::Index>(c)] - u[static_cast<Eigen::Index>(t)]);
        }
      },
      [](std::size_t, int, int, int, int) {});
  for (Eigen::Index g = 0; g < ng; ++g)
    if (std::abs(basis.conductance(g, g)) == 0.0)
      throw SolverError("contact group " + std::to_string(g) + " touches no tissue");
  return basis;
}

template ContactBasis<double> solve_contact_basis<double>(const VoxelGrid&, const std::vector<std::vector<std::size_t>>&,
                                                          double, const SolverOptions&);
template ContactBasis<Complex> solve_contact_basis<Complex>(const VoxelGrid&,
                                                           const std::vector<std::vector<std::size_t>>&, double,
                                                           const SolverOptions&);

template <typename Scalar>
UnitDrive<Scalar> compose_unit_drive(const ContactBasis<Scalar>& basis, const ElectrodeConfiguration& cfg) {
  const auto& G = basis.conductance;
  const auto m = basis.fields.size();
  if (m != cfg.groups.size()) throw InvalidInput("contact basis does not match the electrode configuration");
  auto field = std::make_shared<VectorX<Scalar>>();
  UnitDrive<Scalar> drive;
  if (m == 1) {
    // Cathode current -1 mA, returned through the boundary.
    const Scalar x0 = Scalar(-1) / G(0, 0);
    *field = x0 * basis.fields[0];
    drive.cathode_current = G(0, 0) * x0;
  } else if (m == 2) {
    // Explicit 2x2 inverse: negating b negates x bit for bit, so reversed
    // polarity yields an exactly negated field.
    Scalar b[2];
    b[cfg.cathode] = Scalar(-1);
    b[cfg.anode] = Scalar(1);
    const Scalar det = G(0, 0) * G(1, 1) - G(0, 1) * G(1, 0);
    if (std::abs(det) == 0.0) throw SolverError("singular contact conductance matrix");
    const Scalar x0 = (G(1, 1) * b[0] - G(0, 1) * b[1]) / det;
    const Scalar x1 = (G(0, 0) * b[1] - G(1, 0) * b[0]) / det;
    const auto& f0 = basis.fields[0];
    const auto& f1 = basis.fields[1];
    field->resize(f0.size());
    for (Eigen::Index i = 0; i < f0.size(); ++i) (*field)[i] = x0 * f0[i] + x1 * f1[i];
    const auto c = static_cast<Eigen::Index>(cfg.cathode);
    drive.cathode_current = G(c, 0) * x0 + G(c, 1) * x1;
  } else {
    throw InvalidInput("at most two contact groups can be driven");
  }
  drive.field = std::move(field);
  return drive;
}

template UnitDrive<double> compose_unit_drive<double>(const ContactBasis<double>&, const ElectrodeConfiguration&);
template UnitDrive<Complex> compose_unit_drive<Complex>(const ContactBasis<Complex>&, const ElectrodeConfiguration&);

int octave_band(double frequency_hz, double base_hz) {
  if (!(frequency_hz > 0.0)) return 0;
  return std::max(0, static_cast<int>(std::floor(std::log2(frequency_hz / base_hz))));
}

double band_frequency(int band, double base_hz) { return base_hz * std::exp2(band + 0.5); }

FieldCache::FieldCache(std::shared_ptr<const VoxelGrid> grid, SolverOptions options)
    : grid_(std::move(grid)), options_(options) {
  if (!grid_) throw InvalidInput("field cache needs a grid");
}

namespace {

template <typename Scalar, typename Map>
std::shared_ptr<const ContactBasis<Scalar>> cached_basis(std::mutex& mutex, Map& map, const std::string& key,
                                                         const VoxelGrid& grid, const ElectrodeConfiguration& cfg,
                                                         double omega, const SolverOptions& options) {
  std::promise<std::shared_ptr<const ContactBasis<Scalar>>> promise;
  std::shared_future<std::shared_ptr<const ContactBasis<Scalar>>> existing;
  {
    std::lock_guard<std::mutex> lock(mutex);
    auto it = map.find(key);
    if (it != map.end()) existing = it->second;
    else map.emplace(key, promise.get_future().share());
  }
  if (existing.valid()) return existing.get();
  try {
    auto basis = std::make_shared<const ContactBasis<Scalar>>(solve_contact_basis<Scalar>(grid, cfg.groups, omega, options));
    promise.set_value(basis);
    return basis;
  } catch (...) {
    promise.set_exception(std::current_exception());
    std::lock_guard<std::mutex> lock(mutex);
    map.erase(key);
    throw;
  }
}

}  // namespace

std::shared_ptr<const ContactBasis<double>> FieldCache::real_basis(const ElectrodeConfiguration& cfg) {
  return cached_basis<double>(mutex_, real_, cfg.key(), *grid_, cfg, 0.0, options_);
}

std::shared_ptr<const ContactBasis<Complex>> FieldCache::complex_basis(const ElectrodeConfiguration& cfg,
                                                                       double omega) {
  return cached_basis<Complex>(mutex_, complex_, cfg.key() + omega_key(omega), *grid_, cfg, omega, options_);
}

std::size_t FieldCache::cached_bases() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return real_.size() + complex_.size();
}

bool FieldCache::has_real_basis(const ElectrodeConfiguration& cfg) const {
  std::lock_guard<std::mutex> lock(mutex_);
  const auto it = real_.find(cfg.key());
  return it != real_.end() && it->second.wait_for(std::chrono::seconds(0)) == std::future_status::ready;
}

QsSolution FieldCache::solve_qs(const StimulationSetting& setting) {
  setting.validate();
  const auto cfg = resolve_electrodes(*grid_, setting.polarity);
  const auto basis = real_basis(cfg);
  const auto drive = compose_unit_drive(*basis, cfg);
  return QsSolution(grid_, drive.field, basis->roles, setting.amplitude_ma, drive.cathode_current, 0.0, 0.0, 0,
                    basis->diagnostics);
}

std::vector<EqsSolution> FieldCache::solve_eqs(const StimulationSetting& setting, const Spectrum& spectrum,
                                               const EqsOptions& eqs) {
  setting.validate();
  if (spectrum.coefficients.empty()) throw InvalidInput("empty spectrum");
  const auto cfg = resolve_electrodes(*grid_, setting.polarity);
  std::vector<EqsSolution> out;
  out.reserve(spectrum.coefficients.size());

  // DC term: the QS field.
  const auto qs = real_basis(cfg);
  const auto qs_drive = compose_unit_drive(*qs, cfg);
  auto dc = std::make_shared<const VectorX<Complex>>(qs_drive.field->cast<Complex>());
  out.emplace_back(grid_, dc, qs->roles, -spectrum.coefficients[0], Complex(qs_drive.cathode_current), 0.0, 0.0, 0,
                   qs->diagnostics);

  std::map<std::string, std::pair<UnitDrive<Complex>, std::shared_ptr<const ContactBasis<Complex>>>> drives;
  for (std::size_t k = 1; k < spectrum.coefficients.size(); ++k) {
    const double f = spectrum.fundamental_hz * static_cast<double>(k);
    const double solve_f = eqs.octave_bands ? band_frequency(octave_band(f, eqs.band_base_hz), eqs.band_base_hz) : f;
    const double omega = 2.0 * kPi * solve_f;
    const auto key = omega_key(omega);
    auto it = drives.find(key);
    if (it == drives.end()) {
      auto basis = complex_basis(cfg, omega);
      it = drives.emplace(key, std::make_pair(compose_unit_drive(*basis, cfg), basis)).first;
    }
    const auto& [drive, basis] = it->second;
    out.emplace_back(grid_, drive.field, basis->roles, -spectrum.coefficients[k], drive.cathode_current,
                     spectrum.omega(k), omega, static_cast<int>(k), basis->diagnostics);
  }
  return out;
}

QsSolution solve_qs(std::shared_ptr<const VoxelGrid> grid, const StimulationSetting& setting,
                    const SolverOptions& options) {
  FieldCache cache(std::move(grid), options);
  return cache.solve_qs(setting);
}

std::vector<EqsSolution> solve_eqs(std::shared_ptr<const VoxelGrid> grid, const StimulationSetting& setting,
                                   const Spectrum& spectrum, const EqsOptions& eqs, const SolverOptions& options) {
  FieldCache cache(std::move(grid), options);
  return cache.solve_eqs(setting, spectrum, eqs);
}

template <typename Scalar>
FieldSolution<Scalar> scale_to_current(const FieldSolution<Scalar>& solution, double target_ma) {
  const double measured = std::abs(solution.cathode_current());
  if (!(measured >= 1e-12)) throw InvalidInput("measured cathode current is below the numeric floor");
  return solution.scaled(Scalar(target_ma / measured));
}

template QsSolution scale_to_current<double>(const QsSolution&, double);
template EqsSolution scale_to_current<Complex>(const EqsSolution&, double);

double analytic_point_source(double current_ma, double sigma, double r_mm) {
  if (!(r_mm > 0.0)) throw InvalidInput("radius must be positive");
  if (!(sigma > 0.0)) throw InvalidInput("conductivity must be positive");
  // mA / (S/m * mm) = V
  return current_ma / (4.0 * kPi * sigma * r_mm);
}

namespace {

template <typename Scalar>
Scalar trilinear(const VoxelGrid& grid, const VectorX<Scalar>& v, Vec3 g) {
  const auto& n = grid.dims();
  int i0[3];
  double t[3];
  for (int a = 0; a < 3; ++a) {
    g[a] = std::clamp(g[a], 0.0, static_cast<double>(n[a] - 1));
    if (n[a] == 1) {
      i0[a] = 0;
      t[a] = 0.0;
      continue;
    }
    i0[a] = std::min(static_cast<int>(std::floor(g[a])), n[a] - 2);
    t[a] = g[a] - i0[a];
  }
  const int d[3] = {n[0] > 1 ? 1 : 0, n[1] > 1 ? 1 : 0, n[2] > 1 ? 1 : 0};
  Scalar s(0);
  for (int c = 0; c < 8; ++c) {
    const int ox = c & 1, oy = (c >> 1) & 1, oz = (c >> 2) & 1;
    const double w = (ox ? t[0] : 1.0 - t[0]) * (oy ? t[1] : 1.0 - t[1]) * (oz ? t[2] : 1.0 - t[2]);
    if (w == 0.0) continue;
    s += Scalar(w) * v[static_cast<Eigen::Index>(grid.index(i0[0] + ox * d[0], i0[1] + oy * d[1], i0[2] + oz * d[2]))];
  }
  return s;
}

}  // namespace

template <typename Scalar>
Scalar interpolate(const VoxelGrid& grid, const VectorX<Scalar>& values, const Vec3& point) {
  return trilinear(grid, values, grid.to_grid(point));
}

template double interpolate<double>(const VoxelGrid&, const VectorX<double>&, const Vec3&);
template Complex interpolate<Complex>(const VoxelGrid&, const VectorX<Complex>&, const Vec3&);

template <typename Scalar>
Eigen::Matrix<Scalar, 3, 1> negative_gradient(const VoxelGrid& grid, const VectorX<Scalar>& values,
                                              const Vec3& point) {
  // Differences are taken in voxel coordinates so that at a voxel center the
  // stencil reads the neighboring values exactly.
  const Vec3 g = grid.to_grid(point);
  const auto& n = grid.dims();
  Eigen::Matrix<Scalar, 3, 1> e;
  for (int a = 0; a < 3; ++a) {
    Vec3 gp = g, gm = g;
    gp[a] = std::min(g[a] + 1.0, static_cast<double>(n[a] - 1));
    gm[a] = std::max(g[a] - 1.0, 0.0);
    const double span = (gp[a] - gm[a]) * grid.spacing();  // mm
    if (span <= 0.0) {
      e[a] = Scalar(0);
      continue;
    }
    e[a] = -(trilinear(grid, values, gp) - trilinear(grid, values, gm)) / Scalar(span * 1e-3);
  }
  return e;
}

template Eigen::Matrix<double, 3, 1> negative_gradient<double>(const VoxelGrid&, const VectorX<double>&, const Vec3&);
template Eigen::Matrix<Complex, 3, 1> negative_gradient<Complex>(const VoxelGrid&, const VectorX<Complex>&,
                                                                 const Vec3&);

ElectricFieldSample field_at(const QsSolution& solution, const Vec3& point) {
  if (!solution.grid().contains(point)) throw InvalidInput("field evaluation point lies outside the grid");
  const Vec3 unit = negative_gradient(solution.grid(), solution.unit_field(), point);
  ElectricFieldSample s;
  s.position = point;
  s.e = solution.scale() * unit;
  // |scale| * |unit| keeps |E| exactly monotone in amplitude and exactly
  // invariant under a sign flip of the unit field.
  s.magnitude = std::abs(solution.scale()) * unit.norm();
  return s;
}

namespace {

std::size_t fft_size(std::size_t harmonics) {
  std::size_t m = 64;
  while (m < 2 * harmonics + 2) m *= 2;
  return m;
}

}  // namespace

EqsFieldSample field_at(const std::vector<EqsSolution>& harmonics, const Vec3& point) {
  if (harmonics.empty()) throw InvalidInput("no harmonic solutions");
  const auto& grid = harmonics.front().grid();
  if (!grid.contains(point)) throw InvalidInput("field evaluation point lies outside the grid");
  EqsFieldSample s;
  s.position = point;
  std::unordered_map<const VectorX<Complex>*, Eigen::Vector3cd> unit;
  int kmax = 0;
  for (const auto& h : harmonics) {
    auto it = unit.find(h.unit_ptr().get());
    if (it == unit.end()) it = unit.emplace(h.unit_ptr().get(), negative_gradient(grid, h.unit_field(), point)).first;
    s.phasors.push_back(h.scale() * it->second);
    kmax = std::max(kmax, h.harmonic());
  }
  const std::size_t m = fft_size(static_cast<std::size_t>(kmax));
  Eigen::FFT<double> fft;
  std::vector<std::vector<Complex>> spectra(3, std::vector<Complex>(m, Complex(0.0, 0.0)));
  for (std::size_t i = 0; i < harmonics.size(); ++i)
    for (int a = 0; a < 3; ++a) spectra[a][static_cast<std::size_t>(harmonics[i].harmonic())] += s.phasors[i][a];
  std::vector<std::vector<Complex>> series(3);
  for (int a = 0; a < 3; ++a) fft.inv(series[a], spectra[a]);
  double peak = 0.0;
  const double scale = static_cast<double>(m);
  for (std::size_t t = 0; t < m; ++t) {
    const Vec3 e(series[0][t].real(), series[1][t].real(), series[2][t].real());
    peak = std::max(peak, scale * e.norm());
  }
  s.peak_magnitude = peak;
  return s;
}

template <typename Scalar>
Scalar flux_through_box(const FieldSolution<Scalar>& solution, const Eigen::Array3i& lo, const Eigen::Array3i& hi) {
  const auto& grid = solution.grid();
  const auto& n = grid.dims();
  if ((lo < 0).any() || (hi >= n).any() || (lo > hi).any()) throw InvalidInput("flux box outside the grid");
  const auto& roles = solution.roles();
  const Conductances<Scalar> cond(grid, roles, solution.basis_omega());
  const auto u = [&](std::size_t i) { return solution.potential(i); };
  Scalar total(0);
  const std::ptrdiff_t stride[3] = {1, n[0], static_cast<std::ptrdiff_t>(n[0]) * n[1]};
  for (int k = lo[2]; k <= hi[2]; ++k)
    for (int j = lo[1]; j <= hi[1]; ++j)
      for (int i = lo[0]; i <= hi[0]; ++i) {
        const std::size_t a = grid.index(i, j, k);
        const int c[3] = {i, j, k};
        for (int f = 0; f < 6; ++f) {
          const int axis = f / 2, dir = (f & 1) ? 1 : -1;
          const int nb = c[axis] + dir;
          if (nb >= lo[axis] && nb <= hi[axis]) continue;
          if (nb < 0 || nb >= n[axis]) {
            total += cond.boundary(a, i, j, k, f) * u(a);
            continue;
          }
          const std::size_t b = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(a) + dir * stride[axis]);
          total += cond.face(a, b) * (u(a) - u(b));
        }
      }
  return total;
}

template double flux_through_box<double>(const QsSolution&, const Eigen::Array3i&, const Eigen::Array3i&);
template Complex flux_through_box<Complex>(const EqsSolution&, const Eigen::Array3i&, const Eigen::Array3i&);

template <typename Scalar>
Scalar group_current(const FieldSolution<Scalar>& solution, int group) {
  const auto& grid = solution.grid();
  const auto& roles = solution.roles();
  const Conductances<Scalar> cond(grid, roles, solution.basis_omega());
  Scalar total(0);
  for_each_face(
      grid.dims(),
      [&](std::size_t a, std::size_t b, int) {
        if (roles[a] == group && roles[b] == role::kTissue)
          total += cond.face(a, b) * (solution.potential(a) - solution.potential(b));
        else if (roles[b] == group && roles[a] == role::kTissue)
          total += cond.face(a, b) * (solution.potential(b) - solution.potential(a));
      },
      [](std::size_t, int, int, int, int) {});
  return total;
}

template double group_current<double>(const QsSolution&, int);
template Complex group_current<Complex>(const EqsSolution&, int);

double dissipated_power(const EqsSolution& solution) {
  const auto& roles = solution.roles();
  int groups = 0;
  for (auto r : roles) groups = std::max(groups, r + 1);
  double p = 0.0;
  for (int g = 0; g < groups; ++g) {
    const auto it = std::find(roles.begin(), roles.end(), static_cast<std::int16_t>(g));
    const Complex v = solution.potential(static_cast<std::size_t>(it - roles.begin()));
    p += 0.5 * (group_current(solution, g) * std::conj(v)).real();
  }
  return p;
}

VectorX<double> field_magnitude_volume(const QsSolution& solution) {
  const auto& grid = solution.grid();
  const auto& n = grid.dims();
  const auto& u = solution.unit_field();
  VectorX<double> out(static_cast<Eigen::Index>(grid.size()));
  const double a = std::abs(solution.scale());
  const std::ptrdiff_t stride[3] = {1, n[0], static_cast<std::ptrdiff_t>(n[0]) * n[1]};
  for (int k = 0; k < n[2]; ++k)
    for (int j = 0; j < n[1]; ++j)
      for (int i = 0; i < n[0]; ++i) {
        const auto id = static_cast<std::ptrdiff_t>(grid.index(i, j, k));
        const int c[3] = {i, j, k};
        Vec3 e;
        for (int ax = 0; ax < 3; ++ax) {
          const int up = std::min(c[ax] + 1, n[ax] - 1) - c[ax];
          const int dn = c[ax] - std::max(c[ax] - 1, 0);
          const double span = (up + dn) * grid.spacing() * 1e-3;
          e[ax] = span > 0.0 ? -(u[id + up * stride[ax]] - u[id - dn * stride[ax]]) / span : 0.0;
        }
        out[id] = a * e.norm();
      }
  return out;
}

}  // namespace dbs
