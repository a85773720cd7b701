#include "dbs/scene.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>

using namespace dbs;

namespace {

GridSpec small_spec(double resolution, double box = 12.0) {
  GridSpec s;
  s.resolution = resolution;
  s.box_size = box;
  return s;
}

// Distance from a point to the shaft axis segment, by dense sampling.
double sampled_axis_distance(const Fiber& f, const LeadGeometry& lead) {
  double best = 1e300;
  const int n = 2000;
  for (std::size_t s = 1; s < f.points.size(); ++s)
    for (int i = 0; i <= n; ++i) {
      const Vec3 p = f.points[s - 1] + (f.points[s] - f.points[s - 1]) * (static_cast<double>(i) / n);
      for (int j = 0; j <= n; ++j) {
        const Vec3 q = lead.tip() + lead.direction() * (lead.length() * j / n);
        best = std::min(best, (p - q).norm());
      }
    }
  return best;
}

}  // namespace

TEST_CASE("default lead layout") {
  const auto lead = build_lead(LeadDescriptor{});
  REQUIRE(lead.contacts().size() == 8);
  std::vector<std::string> ids;
  for (const auto& c : lead.contacts()) ids.push_back(c.id);
  CHECK(ids == std::vector<std::string>{"C1", "C2a", "C2b", "C2c", "C3a", "C3b", "C3c", "C4"});
  CHECK(lead.contacts().front().is_ring());
  CHECK(lead.contacts().back().is_ring());
  for (std::size_t i = 1; i < 7; ++i) CHECK(lead.contacts()[i].angular_span() < 360.0);

  const auto ganged = lead.ganged("C2");
  CHECK(ganged.angular_span() == 360.0);
  CHECK(lead.resolve("C2").size() == 3);
  CHECK(lead.resolve("C2b").size() == 1);
  CHECK_THROWS_AS(lead.ganged("C9"), InvalidInput);

  LeadDescriptor bad;
  bad.contacts = std::vector<Contact>{{"X", 2.0, 1.0, 0.0, 360.0}};
  CHECK_THROWS_AS(build_lead(bad), InvalidInput);
  LeadDescriptor overlap;
  overlap.contacts = std::vector<Contact>{{"X", 1.0, 2.0, 0.0, 360.0}, {"Y", 1.5, 2.5, 0.0, 90.0}};
  CHECK_THROWS_AS(build_lead(overlap), InvalidInput);
  LeadDescriptor dup;
  dup.contacts = std::vector<Contact>{{"X", 1.0, 2.0, 0.0, 90.0}, {"X", 3.0, 4.0, 0.0, 90.0}};
  CHECK_THROWS_AS(build_lead(dup), InvalidInput);
  LeadDescriptor thin;
  thin.shaft_radius = 0.0;
  CHECK_THROWS_AS(build_lead(thin), InvalidInput);
}

TEST_CASE("voxelized shaft matches the analytic cylinder volume") {
  LeadDescriptor d;
  d.tip = Vec3(0, 0, -4.0);
  const auto lead = build_lead(d);
  // An odd voxel count puts the shaft axis through a row of voxel centers.
  auto spec = small_spec(0.25, 12.25);
  spec.box_center = Vec3::Zero();
  spec.encapsulation = 0.0;
  const auto grid = voxelize_scene(lead, TissueLayout{}, MaterialTable::defaults(), spec);
  const auto hist = grid.histogram();
  std::size_t shaft = hist[label::kInsulation];
  for (std::size_t c = 0; c < grid.contact_ids().size(); ++c) shaft += hist[label::contact(c)];
  // Shaft from z = -4 to the top face of the grid.
  const double top = grid.origin().z() + (grid.dims()[2] - 0.5) * grid.spacing();
  const double expected = kPi * 0.65 * 0.65 * (top + 4.0) / std::pow(grid.spacing(), 3);
  CHECK(std::abs(static_cast<double>(shaft) - expected) / expected < 0.10);
  for (std::size_t c = 0; c < grid.contact_ids().size(); ++c) CHECK(hist[label::contact(c)] > 0);
  CHECK(grid.contact_ids() == std::vector<std::string>{"C1", "C2a", "C2b", "C2c", "C3a", "C3b", "C3c", "C4"});

  // Histogram is deterministic.
  CHECK(voxelize_scene(lead, TissueLayout{}, MaterialTable::defaults(), spec).histogram() == hist);

  auto coarse = spec;
  coarse.resolution = 0.8;
  CHECK_THROWS_AS(voxelize_scene(lead, TissueLayout{}, MaterialTable::defaults(), coarse), InvalidInput);
  LeadDescriptor away;
  away.tip = Vec3(100, 0, 0);
  CHECK_THROWS_AS(voxelize_scene(build_lead(away), TissueLayout{}, MaterialTable::defaults(), spec), InvalidInput);
}

TEST_CASE("tissue slabs and materials") {
  const auto lead = build_lead(LeadDescriptor{});
  TissueLayout layout;
  layout.kind = TissueLayout::Kind::Shapes;
  layout.background = Tissue::WM;
  layout.shapes.push_back({TissueShape::Kind::Slab, Tissue::CSF, Vec3(2, -6, -6), Vec3(5, 6, 12)});
  auto spec = small_spec(0.5);
  const auto grid = voxelize_scene(lead, layout, MaterialTable::defaults(), spec);
  std::size_t in_slab = 0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto c = grid.coords(i);
    const Vec3 p = grid.center(c[0], c[1], c[2]);
    if (layout.shapes[0].contains(p) && grid.heterogeneous_box().contains(p)) {
      ++in_slab;
      CHECK(grid.label(i) == static_cast<std::uint16_t>(Tissue::CSF));
    }
  }
  CHECK(in_slab > 0);
  CHECK(grid.materials()[Tissue::CSF].sigma == 2.0);
  CHECK(grid.materials()[Tissue::GM].sigma == 0.09);
  CHECK(grid.materials()[Tissue::WM].sigma == 0.06);
  CHECK(grid.materials()[Tissue::Homogeneous].sigma == 0.1);
  MaterialTable m = MaterialTable::defaults();
  CHECK_THROWS_AS(m.set(Tissue::GM, {0.0, 10.0}), InvalidInput);
}

TEST_CASE("encapsulation shell and translation consistency") {
  const auto lead = build_lead(LeadDescriptor{});
  auto spec = small_spec(0.25, 14.0);
  const auto grid = voxelize_scene(lead, TissueLayout{}, MaterialTable::defaults(), spec);
  const auto& dims = grid.dims();
  std::size_t surface = 0, bare = 0;
  for (int k = 1; k < dims[2] - 1; ++k)
    for (int j = 1; j < dims[1] - 1; ++j)
      for (int i = 1; i < dims[0] - 1; ++i) {
        const auto l = grid.label(grid.index(i, j, k));
        if (label::is_tissue(l)) continue;
        bool is_surface = false, has_encap = false;
        for (auto [di, dj, dk] : {std::array{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}) {
          const auto n = grid.label(grid.index(i + di, j + dj, k + dk));
          if (label::is_tissue(n)) is_surface = true;
          if (n == static_cast<std::uint16_t>(Tissue::Encapsulation)) has_encap = true;
        }
        if (!is_surface) continue;
        ++surface;
        bare += !has_encap;
      }
  CHECK(surface > 0);
  CHECK(bare == 0);

  LeadDescriptor shifted;
  const Vec3 shift(1.25, -2.5, 3.0);
  shifted.tip = shift;
  auto spec2 = spec;
  spec2.box_center = contact_region_center(lead) + shift;
  const auto moved = voxelize_scene(build_lead(shifted), TissueLayout{}, MaterialTable::defaults(), spec2);
  CHECK(moved.labels() == grid.labels());
}

TEST_CASE("fiber tract files round-trip") {
  FiberTract t;
  t.name = "bundle";
  for (int f = 0; f < 10; ++f) {
    Fiber fiber;
    for (int p = 0; p < 25; ++p) fiber.points.emplace_back(0.1 * f + 1e-7 * p, std::sqrt(2.0) * p, -1.0 / 3.0 * f);
    t.fibers.push_back(fiber);
  }
  const auto dir = std::filesystem::temp_directory_path() / "dbs_scene_test";
  std::filesystem::create_directories(dir);
  save_fiber_tract(t, dir / "t.json");
  const auto back = load_fiber_tract(dir / "t.json");
  REQUIRE(back.fibers.size() == 10);
  CHECK(back.name == "bundle");
  for (std::size_t f = 0; f < 10; ++f) {
    CHECK(back.fibers[f].points == t.fibers[f].points);
    CHECK(back.fibers[f].status == FiberStatus::Unknown);
    CHECK(back.fibers[f].diameter_um == 5.7);
  }
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(fiber_tract_from_json(R"({"name":"x","fibers":[]})"), InvalidInput);
  CHECK_THROWS_AS(fiber_tract_from_json(R"({"name":"x","fibers":[[[0,0,0]]]})"), InvalidInput);
  CHECK_THROWS_AS(fiber_tract_from_json(R"({"name":"x","fibers":[[[0,0,0],[0,0,0]]]})"), InvalidInput);
  CHECK_THROWS_AS(fiber_tract_from_json("{not json"), InvalidInput);
  CHECK_THROWS_AS(load_fiber_tract("/nonexistent/tract.json"), InvalidInput);
}

TEST_CASE("damaged classification") {
  const auto lead = build_lead(LeadDescriptor{});
  FiberTract bundle;
  // Twenty fibers crossing the shaft at increasing distance; four inside the shell.
  const std::vector<double> offsets = {0.0, 0.3, 0.6, 0.7, 0.8, 0.9, 1.0, 1.2, 1.5, 2.0,
                                       2.5, 3.0, 3.5, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0};
  for (std::size_t i = 0; i < offsets.size(); ++i) {
    const double a = 0.4 * static_cast<double>(i);
    const Vec3 n(std::cos(a), std::sin(a), 0.0);
    const Vec3 t(-std::sin(a), std::cos(a), 0.3);
    Fiber f;
    const Vec3 c = n * offsets[i] + Vec3(0, 0, 5.0);
    f.points = {c - 4.0 * t, c - 1.0 * t + Vec3(0, 0, 0.01), c + 3.0 * t};
    bundle.fibers.push_back(f);
  }
  const auto out = classify_damaged(bundle, lead, 0.1);
  std::size_t oracle = 0;
  for (std::size_t i = 0; i < offsets.size(); ++i) {
    const bool inside = sampled_axis_distance(bundle.fibers[i], lead) < 0.65 + 0.1;
    oracle += inside;
    CHECK(inside == (out.fibers[i].status == FiberStatus::Damaged));
    if (!inside) CHECK(out.fibers[i].status == FiberStatus::Unknown);
  }
  CHECK(oracle == 4);
  CHECK(out.count(FiberStatus::Damaged) == 4);
  // Monotone in the shell thickness.
  const auto thick = classify_damaged(bundle, lead, 1.0);
  for (std::size_t i = 0; i < offsets.size(); ++i)
    if (out.fibers[i].status == FiberStatus::Damaged) CHECK(thick.fibers[i].status == FiberStatus::Damaged);
  CHECK(thick.count(FiberStatus::Damaged) > 4);

  CHECK(segment_distance(Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(1, 1, 0)) == doctest::Approx(1.0));
  CHECK(segment_distance(Vec3(-1, 0, 0), Vec3(1, 0, 0), Vec3(0, -1, 2), Vec3(0, 1, 2)) == doctest::Approx(2.0));
}

TEST_CASE("polyline resampling") {
  const auto pts = resample_polyline({Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(1, 2, 0)}, 0.5);
  REQUIRE(pts.size() == 7);
  CHECK((pts.back() - Vec3(1, 2, 0)).norm() < 1e-12);
  for (std::size_t i = 1; i < pts.size(); ++i) CHECK((pts[i] - pts[i - 1]).norm() <= 0.5 + 1e-12);
}
