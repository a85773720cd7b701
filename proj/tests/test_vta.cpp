#include "dbs/vta.hpp"
#include "dbs/volume_io.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>

using namespace dbs;

namespace {

std::shared_ptr<VoxelGrid> point_source_grid(int n, double h, double contact_radius) {
  const Vec3 origin = Vec3::Constant(-0.5 * (n - 1) * h);
  auto g = std::make_shared<VoxelGrid>(Eigen::Array3i(n, n, n), h, origin, MaterialTable::defaults());
  g->paint_sphere(Vec3::Zero(), contact_radius, g->add_contact("P"));
  g->set_boundary(BoundaryCondition::FarField);
  g->set_far_field_center(Vec3::Zero());
  return g;
}

StimulationSetting setting(const std::string& polarity, double amplitude) {
  StimulationSetting s;
  s.polarity = Polarity::parse(polarity);
  s.amplitude_ma = amplitude;
  s.frequency_hz = 140.0;
  s.pulse_width_us = 90.0;
  return s;
}

// Radius where a point source of `ma` milliamps in 0.1 S/m reaches `e` V/m, mm.
double critical_radius(double ma, double e) { return 1e3 * std::sqrt(ma * 1e-3 / (4.0 * kPi * 0.1 * e)); }

// Ten straight fibers parallel to z at the given distances from the origin.
FiberTract parallel_tract(const std::vector<double>& distances) {
  FiberTract t;
  t.name = "parallel";
  for (std::size_t i = 0; i < distances.size(); ++i) {
    const double a = 0.7 * static_cast<double>(i);
    const Vec3 offset(distances[i] * std::cos(a), distances[i] * std::sin(a), 0.0);
    Fiber f;
    f.points = {offset + Vec3(0, 0, -5), offset + Vec3(0, 0, 5)};
    t.fibers.push_back(f);
  }
  return t;
}

}  // namespace

TEST_CASE("threshold table knots and interpolation") {
  const auto table = ThresholdTable::defaults();
  CHECK(table.threshold_for(90.0, 3.5) == 150.0);
  CHECK(table.threshold_for(50.0, 3.5) == 230.0);
  CHECK(table.generic_default() == 200.0);
  const double mid = table.threshold_for(70.0, 3.5);
  CHECK(std::abs(mid - 190.0) / 190.0 < 1e-12);
  const double q = table.threshold_for(60.0, 3.5);
  CHECK(std::abs(q - (230.0 + 0.25 * (150.0 - 230.0))) / q < 1e-12);
  CHECK_THROWS_AS(table.threshold_for(120.0, 3.5), InvalidInput);
  CHECK_THROWS_AS(table.threshold_for(90.0, 5.7), InvalidInput);
  // Extrapolation along pulse width; constant along the single-valued diameter axis.
  CHECK(table.threshold_for(100.0, 5.7, true) == doctest::Approx(130.0));

  // Bilinear on a 2 x 2 grid.
  const ThresholdTable grid({{50, 2, 300}, {90, 2, 200}, {50, 4, 200}, {90, 4, 120}});
  const double v = grid.threshold_for(60.0, 3.0);
  const double expected = 0.5 * (0.75 * 300 + 0.25 * 200) + 0.5 * (0.75 * 200 + 0.25 * 120);
  CHECK(std::abs(v - expected) / expected < 1e-12);

  CHECK_THROWS_AS(ThresholdTable({{50, 3.5, 100}, {90, 3.5, 150}}), InvalidInput);
  CHECK_THROWS_AS(ThresholdTable({{50, 3.5, 0}}), InvalidInput);
  CHECK_THROWS_AS(ThresholdTable({{50, 3.5, 200}, {50, 3.5, 190}}), InvalidInput);
  CHECK_THROWS_AS(ThresholdTable({{50, 2, 200}, {90, 4, 190}}), InvalidInput);
}

TEST_CASE("VTA mask of a point source is a ball of the critical radius") {
  auto grid = point_source_grid(64, 0.25, 0.75);
  const auto sol = solve_qs(grid, setting("P-", 1.0));
  const double rc = critical_radius(1.0, 200.0);
  CHECK(rc == doctest::Approx(1.9947).epsilon(1e-3));
  const auto mask = vta_region(sol, 200.0);
  CHECK(mask.threshold == 200.0);
  std::size_t misplaced = 0;
  for (std::size_t i = 0; i < grid->size(); ++i) {
    const auto c = grid->coords(i);
    const double r = grid->center(c[0], c[1], c[2]).norm();
    if (label::is_contact(grid->label(i))) continue;
    if (r < rc - 0.3 && !mask.inside[i]) ++misplaced;
    if (r > rc + 0.3 && mask.inside[i]) ++misplaced;
  }
  CHECK(misplaced == 0);
  const double ball = 4.0 / 3.0 * kPi * (std::pow(rc, 3) - std::pow(0.75, 3));
  CHECK(std::abs(mask.volume_mm3() - ball) / ball < 0.15);

  const auto higher = vta_region(sol, 400.0);
  for (std::size_t i = 0; i < grid->size(); ++i) CHECK_FALSE((higher.inside[i] && !mask.inside[i]));
  CHECK(higher.count < mask.count);
}

TEST_CASE("fiber marking matches brute-force evaluation") {
  auto grid = point_source_grid(64, 0.25, 0.75);
  const auto sol = solve_qs(grid, setting("P-", 1.0));
  const double rc = critical_radius(1.0, 200.0);
  const std::vector<double> distances = {1.2, 1.5, 1.75, 2.4, 2.7, 3.0, 3.5, 4.0, 5.0, 6.0};
  const auto marked = activated_fibers_static(sol, parallel_tract(distances), 200.0);

  std::size_t closed_form = 0;
  for (std::size_t i = 0; i < distances.size(); ++i) {
    // Brute force over a dense sampling of the solver field.
    double peak = 0.0;
    const auto& f = marked.fibers[i];
    for (int s = 0; s <= 1000; ++s) {
      const Vec3 p = f.points[0] + (f.points[1] - f.points[0]) * (s / 1000.0);
      peak = std::max(peak, field_at(sol, p).magnitude);
    }
    const bool active = peak >= 200.0;
    CHECK(active == (f.status == FiberStatus::Activated));
    closed_form += distances[i] < rc;
  }
  CHECK(marked.count(FiberStatus::Activated) == 3);
  CHECK(closed_form == 3);
  CHECK(activation_percentage(marked) == doctest::Approx(30.0));

  auto damaged = parallel_tract(distances);
  damaged.fibers[8].status = FiberStatus::Damaged;
  damaged.fibers[9].status = FiberStatus::Damaged;
  damaged = activated_fibers_static(sol, damaged, 200.0);
  CHECK(damaged.fibers[9].status == FiberStatus::Damaged);
  CHECK(activation_percentage(damaged, DenominatorRule::All) == doctest::Approx(30.0));
  CHECK(activation_percentage(damaged, DenominatorRule::NonDamaged) == doctest::Approx(37.5));

  const auto none = activated_fibers_static(sol, parallel_tract(distances), 1e6);
  CHECK(activation_percentage(none) == 0.0);
  // A fiber entirely outside the grid is never activated.
  FiberTract far;
  far.fibers.push_back(Fiber{{Vec3(50, 50, 50), Vec3(60, 50, 50)}});
  CHECK(activated_fibers_static(sol, far, 1e-9).fibers[0].status == FiberStatus::NonActivated);

  FiberTract unknown = parallel_tract(distances);
  CHECK_THROWS_AS(activation_percentage(unknown), InvalidInput);
  CHECK_THROWS_AS(activation_percentage(FiberTract{}), InvalidInput);
  FiberTract all_damaged = parallel_tract({1.0, 2.0});
  for (auto& f : all_damaged.fibers) f.status = FiberStatus::Damaged;
  CHECK(activation_percentage(all_damaged, DenominatorRule::NonDamaged) == 0.0);
}

TEST_CASE("static marking is invariant under polarity swap and monotone in amplitude") {
  const int n = 40;
  const double h = 0.5;
  auto g = std::make_shared<VoxelGrid>(Eigen::Array3i(n, n, n), h, Vec3::Constant(-0.5 * (n - 1) * h),
                                       MaterialTable::defaults());
  g->paint_sphere(Vec3(0, 0, -1.5), 0.75, g->add_contact("A"));
  g->paint_sphere(Vec3(0, 0, 1.5), 0.75, g->add_contact("B"));
  FiberTract tract;
  tract.name = "mixed";
  for (int i = 0; i < 12; ++i) {
    const double a = 0.5 * i;
    const double d = 1.0 + 0.35 * i;
    Fiber f;
    f.points = {Vec3(d * std::cos(a), d * std::sin(a), -6.0), Vec3(d * std::cos(a) + 1.0, d * std::sin(a), 6.0)};
    tract.fibers.push_back(f);
  }
  FieldCache cache(g);
  const auto fwd = cache.solve_qs(setting("A-,B+", 2.0));
  const auto rev = cache.solve_qs(setting("B-,A+", 2.0));
  const auto mf = activated_fibers_static(fwd, tract, 200.0);
  const auto mr = activated_fibers_static(rev, tract, 200.0);
  for (std::size_t i = 0; i < tract.fibers.size(); ++i) {
    CHECK(mf.fibers[i].status == mr.fibers[i].status);
    const auto mag_f = [&](const Vec3& p) { return field_at(fwd, p).magnitude; };
    const auto mag_r = [&](const Vec3& p) { return field_at(rev, p).magnitude; };
    CHECK(fiber_peak_field(mag_f, *g, tract.fibers[i]) == fiber_peak_field(mag_r, *g, tract.fibers[i]));
  }
  CHECK(activation_percentage(mf) == activation_percentage(mr));
  CHECK(mf.count(FiberStatus::Activated) > 0);
  CHECK(mf.count(FiberStatus::NonActivated) > 0);

  const auto low = activated_fibers_static(cache.solve_qs(setting("A-,B+", 1.6)), tract, 200.0);
  const auto high = activated_fibers_static(cache.solve_qs(setting("A-,B+", 4.0)), tract, 200.0);
  for (std::size_t i = 0; i < tract.fibers.size(); ++i)
    if (low.fibers[i].status == FiberStatus::Activated) CHECK(high.fibers[i].status == FiberStatus::Activated);
  CHECK(high.count(FiberStatus::Activated) > low.count(FiberStatus::Activated));

  // Lower thresholds activate supersets.
  const auto loose = activated_fibers_static(fwd, tract, 150.0);
  for (std::size_t i = 0; i < tract.fibers.size(); ++i)
    if (mf.fibers[i].status == FiberStatus::Activated) CHECK(loose.fibers[i].status == FiberStatus::Activated);
}

TEST_CASE("volume files round-trip") {
  auto grid = point_source_grid(8, 0.5, 0.5);
  std::vector<double> values(grid->size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = 0.125 * static_cast<double>(i) - 3.0;
  const auto dir = std::filesystem::temp_directory_path() / "dbs_volume_test";
  std::filesystem::create_directories(dir);
  write_volume(dir / "u.vol", volume_header(*grid, "V"), values);
  const auto v = read_volume(dir / "u.vol");
  CHECK(v.values == values);
  CHECK(v.header.units == "V");
  CHECK((v.header.dims == grid->dims()).all());
  CHECK(v.header.origin == grid->origin());

  std::vector<std::uint8_t> bytes(grid->size(), 1);
  write_volume(dir / "m.vol", volume_header(*grid, "1", "uint8"), bytes);
  CHECK(read_volume(dir / "m.vol").values == std::vector<double>(grid->size(), 1.0));
  CHECK_THROWS_AS(write_volume(dir / "x.vol", volume_header(*grid, "V"), std::vector<double>(3)), InvalidInput);
  std::filesystem::remove_all(dir);
}
