#include "dbs/axon.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace dbs;

namespace {

const MrgParameters& params() {
  static const MrgParameters p = MrgParameters::load();
  return p;
}

// 20 mm straight fiber along x with node 20 at the origin.
const AxonModel& straight_axon() {
  static const AxonModel a(std::vector<Vec3>{Vec3(-10, 0, 0), Vec3(10, 0, 0)}, 5.7, params());
  return a;
}

PulseTrain train(double pw_us, double amplitude = 1.0, double freq = 130.0) {
  StimulationSetting s;
  s.polarity = Polarity::parse("C1-");
  s.amplitude_ma = amplitude;
  s.frequency_hz = freq;
  s.pulse_width_us = pw_us;
  return PulseTrain(s);
}

// Cathodic 1 mA point source at (0, d, 0) in 0.1 S/m, potentials in mV.
ExtracellularDrive point_source_drive(const AxonModel& axon, double d, double pw_us, double dt_us = 5.0) {
  const auto t = train(pw_us);
  const Vec3 src(0.0, d, 0.0);
  return extracellular_drive(
      axon, [&](const Vec3& x) { return -1e3 * analytic_point_source(1.0, 0.1, (x - src).norm()); }, t,
      make_time_grid(130.0, dt_us));
}

double threshold(double d, double pw_us) {
  return find_threshold(straight_axon(), point_source_drive(straight_axon(), d, pw_us), 0.01, 0.0, 8.0);
}

}  // namespace

TEST_CASE("axon layout") {
  const AxonModel a(std::vector<Vec3>{Vec3(0, 0, 0), Vec3(40, 0, 0)}, 5.7, params());
  const double span = params().row(5.7).deltax;  // um
  CHECK(span == 500.0);
  CHECK(a.size() == static_cast<std::size_t>(std::floor(40e3 / span)) * 11 + 1);
  CHECK(a.nodes().size() == 81);
  CHECK(a.compartments().front().kind == CompartmentKind::Node);
  CHECK(a.compartments().back().kind == CompartmentKind::Node);
  const std::vector<CompartmentKind> unit = {CompartmentKind::Node, CompartmentKind::Mysa, CompartmentKind::Flut,
                                             CompartmentKind::Stin, CompartmentKind::Stin, CompartmentKind::Stin,
                                             CompartmentKind::Stin, CompartmentKind::Stin, CompartmentKind::Stin,
                                             CompartmentKind::Flut, CompartmentKind::Mysa};
  for (std::size_t i = 0; i + 1 < a.size(); ++i) CHECK(a.compartments()[i].kind == unit[i % 11]);
  for (std::size_t k = 0; k < a.nodes().size(); ++k)
    CHECK(a.compartments()[a.nodes()[k]].arc_um == doctest::Approx(k * span));

  // Positions lie on a bent polyline at their arc length.
  const std::vector<Vec3> bent = {Vec3(0, 0, 0), Vec3(3, 0, 0), Vec3(3, 4, 0)};
  const AxonModel b(bent, 5.7, params());
  CHECK(b.spans() == 14);
  for (const auto& c : b.compartments()) {
    const double s = c.arc_um * 1e-3;
    const Vec3 expected = s <= 3.0 ? Vec3(std::max(s, 0.0), 0, 0) : Vec3(3, s - 3.0, 0);
    CHECK((c.position - expected).norm() < 1e-12);
  }
  const AxonModel b2(bent, 5.7, params());
  for (std::size_t i = 0; i < b.size(); ++i) CHECK(b.compartments()[i].position == b2.compartments()[i].position);

  CHECK_THROWS_AS(AxonModel(std::vector<Vec3>{Vec3(0, 0, 0), Vec3(0.4, 0, 0)}, 5.7, params()), InvalidInput);
  CHECK_THROWS_AS(AxonModel(std::vector<Vec3>{Vec3(0, 0, 0), Vec3(0.9, 0, 0)}, 5.7, params()), InvalidInput);
  CHECK_THROWS_AS(AxonModel(std::vector<Vec3>{Vec3(0, 0, 0), Vec3(10, 0, 0)}, 6.0, params()), InvalidInput);
  CHECK_NOTHROW(AxonModel(std::vector<Vec3>{Vec3(0, 0, 0), Vec3(30, 0, 0)}, 10.0, params()));
  CHECK_THROWS_AS(MrgParameters::from_json(R"({"name":"x"})"), InvalidInput);
}

TEST_CASE("resting stability") {
  const auto& a = straight_axon();
  for (double v : a.rest_potential()) CHECK(v == doctest::Approx(-80.0).epsilon(0.01));
  // 100 ms without input at dt = 5 us.
  TimeGrid t;
  t.dt_ms = 0.005;
  t.steps_per_period = 1000;
  t.settle_steps = 1000;
  t.periods = 19;
  CHECK(t.duration_ms() == doctest::Approx(100.0));
  const ExtracellularDrive zero(t, Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(a.size()), 1000));
  const auto rec = simulate(a, zero);
  CHECK_FALSE(rec.any_spike());
  CHECK(rec.max_deviation_mv < 1.0);
  CHECK_FALSE(is_activated(rec));
}

TEST_CASE("extracellular drives") {
  const auto& a = straight_axon();
  const auto tg = make_time_grid(130.0, 5.0);
  CHECK(tg.dt_ms <= 0.005);
  CHECK(tg.period_ms() == doctest::Approx(1e3 / 130.0));
  CHECK(tg.duration_ms() >= 5.0 + 3.0 * tg.period_ms());
  CHECK_THROWS_AS(make_time_grid(130.0, 12.0), InvalidInput);
  CHECK_THROWS_AS(make_time_grid(130.0, 5.0, 5.0, 2), InvalidInput);

  const auto zero = extracellular_drive(std::vector<double>(a.size(), 3.0), train(60.0, 0.0), tg).scaled(0.0);
  CHECK(zero.period_samples().cwiseAbs().maxCoeff() == 0.0);

  // Every compartment sees a scaled copy of the (negated) pulse shape.
  const auto d = point_source_drive(a, 2.0, 60.0);
  const auto& s = d.period_samples();
  const Eigen::RowVectorXd shape = s.row(0) / s.row(0).cwiseAbs().maxCoeff();
  for (Eigen::Index c = 0; c < s.rows(); ++c) {
    const double peak = s.row(c).minCoeff();
    CHECK((s.row(c) - std::abs(peak) * shape).cwiseAbs().maxCoeff() <= 1e-12 * std::abs(peak));
  }
  CHECK(d.at(0, 0) == 0.0);
  CHECK(d.at(0, tg.settle_steps) == s(0, 0));
  CHECK(d.at(0, tg.settle_steps + tg.steps_per_period) == s(0, 0));
  // Interval averages keep the pulse charge exact: sum of shape * dt = -PW.
  CHECK(shape.sum() * tg.dt_ms == doctest::Approx(-0.060).epsilon(1e-12));

  Eigen::MatrixXd bad = Eigen::MatrixXd::Zero(2, tg.steps_per_period);
  bad(0, 0) = std::nan("");
  CHECK_THROWS_AS(ExtracellularDrive(tg, bad), InvalidInput);
}

TEST_CASE("EQS drive degenerates to the QS drive in a resistive medium") {
  const int n = 48;
  const double h = 0.25;
  auto materials = MaterialTable::defaults();
  materials.set(Tissue::Homogeneous, {0.1, 1.0});
  auto grid = std::make_shared<VoxelGrid>(Eigen::Array3i(n, n, n), h, Vec3::Constant(-0.5 * (n - 1) * h), materials);
  grid->paint_sphere(Vec3::Zero(), 0.5, grid->add_contact("C1"));
  grid->set_boundary(BoundaryCondition::FarField);
  const AxonModel a(std::vector<Vec3>{Vec3(-5, 1.5, 0), Vec3(5, 1.5, 0)}, 5.7, params());
  const auto t = train(90.0, 2.0);
  const auto tg = make_time_grid(130.0, 5.0);
  const auto qs = extracellular_drive(a, solve_qs(grid, t.setting()), t, tg);
  // Truncation dominates the difference: 4096 harmonics bring it under 1%.
  const auto spectrum = fourier_decompose(t, 4096);
  const auto eqs = extracellular_drive(a, solve_eqs(grid, t.setting(), spectrum), 130.0, tg);
  const double rel = (eqs.period_samples() - qs.period_samples()).norm() / qs.period_samples().norm();
  CHECK(rel < 0.01);

  const AxonModel outside(std::vector<Vec3>{Vec3(-20, 0, 0), Vec3(20, 0, 0)}, 5.7, params());
  CHECK_THROWS_AS(extracellular_drive(outside, solve_qs(grid, t.setting()), t, tg), InvalidInput);
}

TEST_CASE("activation rule") {
  SpikeRecord r;
  r.settle_ms = 5.0;
  r.period_ms = 10.0;
  r.periods = 3;
  CHECK_FALSE(is_activated(r));
  r.node_spikes.assign(4, {});
  CHECK_FALSE(is_activated(r));
  r.node_spikes.back() = {5.5, 15.5, 25.5};
  CHECK(is_activated(r));
  r.node_spikes.back() = {5.5};
  CHECK_FALSE(is_activated(r));
  r.node_spikes.back() = {1.0, 2.0, 3.0};  // only during settling
  CHECK_FALSE(is_activated(r));
  r.node_spikes.front() = {6.0, 16.0, 26.0};
  CHECK(is_activated(r));
  r.node_spikes.front().clear();
  r.node_spikes[1] = {6.0, 16.0, 26.0};  // interior node only
  CHECK_FALSE(is_activated(r));
}

TEST_CASE("threshold search, propagation and polarity") {
  const auto& a = straight_axon();
  const auto unit = point_source_drive(a, 2.0, 90.0);
  const double th = find_threshold(a, unit, 0.01, 0.0, 8.0);
  CHECK(th > 0.05);
  CHECK(th < 5.0);

  const auto above = simulate(a, unit.scaled(1.2 * th));
  CHECK(is_activated(above));
  CHECK(is_activated(above, train(90.0)));
  CHECK_FALSE(is_activated(above, train(90.0, 1.0, 100.0)));
  CHECK(above.node_spikes.front().size() >= 3);
  CHECK(above.node_spikes.back().size() >= 3);
  const auto below = simulate(a, unit.scaled(0.5 * th));
  CHECK_FALSE(below.any_spike());

  // Spike times rise away from the stimulated node in both directions.
  const std::size_t center = 20;
  for (std::size_t k = center + 1; k < a.nodes().size(); ++k)
    CHECK(above.node_spikes[k].front() > above.node_spikes[k - 1].front());
  for (std::size_t k = center; k-- > 0;) CHECK(above.node_spikes[k].front() > above.node_spikes[k + 1].front());
  for (const auto& spikes : above.node_spikes)
    for (std::size_t i = 1; i < spikes.size(); ++i) CHECK(spikes[i] > spikes[i - 1]);
  const double dx_m = 10 * 500e-6;
  const double cv = dx_m / ((above.node_spikes[35].front() - above.node_spikes[25].front()) * 1e-3);
  CHECK(cv >= 20.0);
  CHECK(cv <= 80.0);

  // An anodic drive of the same amplitude leaves the fiber silent.
  CHECK_FALSE(is_activated(simulate(a, unit.scaled(-1.2 * th))));

  CHECK_THROWS_AS(find_threshold(a, unit, 0.0), InvalidInput);
  CHECK_THROWS_AS(find_threshold(a, unit, 0.01, 0.0, 0.5 * th), InvalidInput);
  CHECK_THROWS_AS(find_threshold(a, unit, 0.01, 1.5 * th, 8.0), InvalidInput);
}

TEST_CASE("strength-duration and distance") {
  const double th90 = threshold(2.0, 90.0);
  const double th50 = threshold(2.0, 50.0);
  const double th90_far = threshold(4.0, 90.0);
  CHECK(th50 > th90);
  CHECK(th50 * 50.0 <= th90 * 90.0);
  CHECK(th90_far > th90);
}

TEST_CASE("spike times under step refinement") {
  const auto& a = straight_axon();
  const double amp = 1.5 * threshold(2.0, 90.0);
  const auto coarse = simulate(a, point_source_drive(a, 2.0, 90.0, 5.0).scaled(amp));
  const auto fine = simulate(a, point_source_drive(a, 2.0, 90.0, 2.5).scaled(amp));
  REQUIRE(coarse.node_spikes.size() == fine.node_spikes.size());
  for (std::size_t k = 0; k < coarse.node_spikes.size(); ++k) {
    REQUIRE(coarse.node_spikes[k].size() == fine.node_spikes[k].size());
    for (std::size_t i = 0; i < coarse.node_spikes[k].size(); ++i)
      CHECK(std::abs(coarse.node_spikes[k][i] - fine.node_spikes[k][i]) < 0.1);
  }
}

TEST_CASE("membrane trace export") {
  const auto& a = straight_axon();
  SimulationOptions o;
  o.record_traces = true;
  const auto rec = simulate(a, point_source_drive(a, 2.0, 90.0).scaled(0.1), o);
  REQUIRE(rec.traces.size() == a.nodes().size());
  const auto path = std::filesystem::temp_directory_path() / "dbs_traces.csv";
  write_traces(rec, path);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header.rfind("time_ms,node_0,", 0) == 0);
  std::size_t lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  CHECK(lines == rec.traces.front().size());
  std::filesystem::remove(path);
  CHECK_THROWS_AS(write_traces(simulate(a, point_source_drive(a, 2.0, 90.0).scaled(0.0)), path), InvalidInput);
}
