#include "dbs/tremor.hpp"

#include <doctest.h>
#include <unsupported/Eigen/FFT>

#include <cmath>
#include <filesystem>
#include <random>

using namespace dbs;

namespace {

double rms(const Trajectory& t) {
  double s = 0.0;
  for (const auto& p : t.xy) s += p.squaredNorm();
  return std::sqrt(s / static_cast<double>(t.xy.size()));
}

double peak(const Trajectory& t) {
  double m = 0.0;
  for (const auto& p : t.xy) m = std::max(m, p.norm());
  return m;
}

Trajectory circle_windows(const std::vector<double>& amplitudes, double fs = 100.0, double window_s = 0.5) {
  Trajectory t;
  t.sample_rate_hz = fs;
  const auto w = static_cast<std::size_t>(window_s * fs);
  for (double a : amplitudes)
    for (std::size_t i = 0; i < w; ++i) {
      const double phase = 2.0 * kPi * static_cast<double>(i) / static_cast<double>(w);
      t.xy.emplace_back(a * std::cos(phase), a * std::sin(phase));
    }
  return t;
}

}  // namespace

TEST_CASE("recording files") {
  const auto rec = synthetic_tremor(100.0, 20.0, 5.0, [](double) { return 2.0; }, Vec3(1, 1, 0), 0.01, 7);
  CHECK(rec.size() == 2000);
  const auto back = parse_recording(format_recording(rec));
  CHECK(back.size() == 2000);
  CHECK(back.sample_rate_hz == doctest::Approx(100.0));
  for (std::size_t i = 0; i < rec.size(); ++i) {
    CHECK(back.accel[i] == rec.accel[i]);
    CHECK(back.t[i] == rec.t[i]);
  }
  const auto dir = std::filesystem::temp_directory_path() / "dbs_tremor_test";
  std::filesystem::create_directories(dir);
  save_recording(rec, dir / "r.csv");
  CHECK(load_recording(dir / "r.csv").accel == rec.accel);
  std::filesystem::remove_all(dir);

  CHECK_THROWS_AS(parse_recording("t_s,ax,ay\n0,1,2\n0.01,1,2\n"), InvalidInput);
  CHECK_THROWS_AS(parse_recording("t_s,ax,ay,az\n0,1,2,3\n0.01,1,2,3\n0.025,1,2,3\n"), InvalidInput);
  CHECK_THROWS_AS(parse_recording("t_s,ax,ay,az\n0,1,2,3\n"), InvalidInput);
  CHECK_THROWS_AS(parse_recording("t_s,ax,ay,az\n0,1,x,3\n0.01,1,2,3\n"), InvalidInput);
  CHECK_NOTHROW(parse_recording("t_s,ax,ay,az\n0,1,2,3\n0.01,1,2,3\n0.02005,1,2,3\n"));
  CHECK_THROWS_AS(load_recording("/nonexistent.csv"), InvalidInput);
}

TEST_CASE("trajectory reconstruction") {
  const auto zero = synthetic_tremor(100.0, 10.0, 5.0, [](double) { return 0.0; });
  CHECK(peak(reconstruct_trajectory(zero)) == 0.0);

  // a(t) = -A w^2 sin(w t) integrates to A sin(w t).
  const double A = 3.0;  // mm
  TremorRecording rec;
  rec.sample_rate_hz = 100.0;
  const double w = 2.0 * kPi * 5.0;
  for (int i = 0; i < 2000; ++i) {
    const double t = i / 100.0;
    rec.t.push_back(t);
    rec.accel.emplace_back(0.0, -A * 1e-3 * w * w * std::sin(w * t), 0.0);
  }
  const auto traj = reconstruct_trajectory(rec);
  CHECK(std::abs(peak(traj) - A) / A < 0.05);
  CHECK(std::abs(rms(traj) - A / std::sqrt(2.0)) / A < 0.05);

  // White noise restricted to 15-45 Hz, scaled to the power of the in-band signal.
  std::mt19937 rng(3);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> raw(2000), filtered;
  for (auto& v : raw) v = g(rng);
  Eigen::FFT<double> fft;
  std::vector<Complex> spec;
  fft.fwd(spec, raw);
  for (std::size_t k = 0; k < spec.size(); ++k) {
    const double f = (k <= 1000 ? static_cast<double>(k) : 2000.0 - static_cast<double>(k)) * 100.0 / 2000.0;
    if (f < 15.0 || f > 45.0) spec[k] = 0.0;
  }
  fft.inv(filtered, spec);
  TremorRecording noise = rec;
  double p_signal = 0.0, p_noise = 0.0;
  for (std::size_t i = 0; i < 2000; ++i) {
    noise.accel[i] = Vec3(0.0, filtered[i], 0.0);
    p_signal += rec.accel[i].squaredNorm();
    p_noise += noise.accel[i].squaredNorm();
  }
  for (auto& v : noise.accel) v *= std::sqrt(p_signal / p_noise);
  const double ratio = rms(reconstruct_trajectory(noise)) / rms(traj);
  CHECK(20.0 * std::log10(1.0 / ratio) >= 20.0);

  CHECK_THROWS_AS(reconstruct_trajectory(rec, Band{12.0, 2.0}), InvalidInput);
  CHECK_THROWS_AS(reconstruct_trajectory(rec, Band{0.0, 12.0}), InvalidInput);
  CHECK_THROWS_AS(reconstruct_trajectory(rec, Band{2.0, 50.0}), InvalidInput);
  CHECK_THROWS_AS(reconstruct_trajectory(rec, 0, 300), InvalidInput);
}

TEST_CASE("state assignment") {
  const std::vector<double> radii = {1, 2, 4, 8, 16};
  const auto zero = circle_windows({0, 0, 0, 0});
  CHECK(assign_states(zero, radii) == std::vector<int>{1, 1, 1, 1});
  CHECK(assign_states(circle_windows({3.2}), radii) == std::vector<int>{3});
  // Staircase mapped through the radii by direct per-window maxima.
  const std::vector<double> stairs = {0.5, 1.0, 1.5, 2.0, 3.9, 4.1, 8.0, 12.0, 16.0, 40.0};
  CHECK(assign_states(circle_windows(stairs), radii) == std::vector<int>{1, 1, 2, 2, 3, 4, 4, 5, 5, 5});
  // A trailing partial window is dropped.
  auto t = circle_windows({3.0, 3.0});
  t.xy.resize(t.xy.size() - 1);
  CHECK(assign_states(t, radii).size() == 1);
  CHECK_THROWS_AS(assign_states(zero, {}), InvalidInput);
  CHECK_THROWS_AS(assign_states(zero, {1, 1}), InvalidInput);
  CHECK_THROWS_AS(assign_states(zero, {2, 1}), InvalidInput);

  // Scale covariance (a power of two keeps boundary ties exact).
  auto scaled = circle_windows(stairs);
  for (auto& p : scaled.xy) p *= 4.0;
  std::vector<double> scaled_radii;
  for (double r : radii) scaled_radii.push_back(4.0 * r);
  CHECK(assign_states(scaled, scaled_radii) == assign_states(circle_windows(stairs), radii));
}

TEST_CASE("Markov estimate") {
  const auto constant = estimate_markov(std::vector<int>(100, 3), 5);
  CHECK(constant.pi[2] >= 0.95);
  CHECK(tremor_score(constant.pi) == doctest::Approx(50.0));

  std::vector<int> alternating;
  for (int i = 0; i < 101; ++i) alternating.push_back(1 + i % 2);
  const auto alt = estimate_markov(alternating, 2);
  CHECK(std::abs(alt.pi[0] - 0.5) < 1e-6);
  CHECK(std::abs(alt.pi[1] - 0.5) < 1e-6);

  std::mt19937 rng(11);
  std::uniform_int_distribution<int> u(1, 5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> seq(200);
    for (auto& s : seq) s = std::min(u(rng), u(rng));
    const auto m = estimate_markov(seq, 5);
    for (int r = 0; r < 5; ++r) CHECK(std::abs(m.P.row(r).sum() - 1.0) < 1e-9);
    CHECK(std::abs(m.pi.sum() - 1.0) < 1e-9);
    CHECK((m.pi.minCoeff() >= 0.0));
    CHECK((m.pi.transpose() * m.P - m.pi.transpose()).cwiseAbs().maxCoeff() < 1e-6);
  }
  // Maximum likelihood on observed rows.
  const auto ml = estimate_markov(std::vector<int>{1, 1, 2, 1, 1}, 3);
  CHECK(ml.P(0, 0) == doctest::Approx(2.0 / 3.0));
  CHECK(ml.P(1, 0) == 1.0);
  CHECK(ml.P(2, 1) == doctest::Approx(1.0 / 3.0));
  // Transitions never cross sequence boundaries.
  const auto split = estimate_markov(std::vector<std::vector<int>>{{1, 1}, {2, 2}}, 2);
  CHECK(split.P(0, 1) == 0.0);
  CHECK_THROWS_AS(estimate_markov(std::vector<int>{1}, 2), InvalidInput);
  CHECK_THROWS_AS(estimate_markov(std::vector<int>{1, 6}, 5), InvalidInput);
}

TEST_CASE("score and distribution") {
  Eigen::VectorXd pi = Eigen::VectorXd::Zero(5);
  pi[0] = 1.0;
  CHECK(tremor_score(pi) == 0.0);
  pi.setZero();
  pi[4] = 1.0;
  CHECK(tremor_score(pi) == 100.0);
  CHECK(tremor_score(Eigen::VectorXd::Constant(5, 0.2)) == doctest::Approx(50.0));
  CHECK_THROWS_AS(tremor_score(Eigen::VectorXd::Ones(1)), InvalidInput);

  const auto unit = tremor_distribution(std::vector<int>(10, 2), 5);
  CHECK(unit[1] == 1.0);
  CHECK(unit.sum() == 1.0);
  const auto two = assign_states(circle_windows({0.5, 0.5, 6.0, 0.5, 6.0, 6.0, 6.0}), default_radii());
  const auto h = tremor_distribution(two, 5);
  CHECK(h[0] == doctest::Approx(3.0 / 7.0));
  CHECK(h[3] == doctest::Approx(4.0 / 7.0));
  CHECK(h.sum() == doctest::Approx(1.0));
  CHECK_THROWS_AS(tremor_distribution({}, 5), InvalidInput);
}

TEST_CASE("end-to-end scoring") {
  const auto zero = score_recording(synthetic_tremor(100.0, 20.0, 5.0, [](double) { return 0.0; }));
  CHECK(zero.score == 0.0);

  double prev = -1.0;
  for (double a : {0.5, 1.5, 3.0, 6.0, 12.0}) {
    const auto m = score_recording(synthetic_tremor(100.0, 20.0, 5.0, [a](double) { return a; }));
    CHECK(m.score > prev);
    prev = m.score;
  }

  // Halving a fluctuating tremor moves occupancy mass to lower states.
  const auto envelope = [](double t) { return 5.0 + 4.0 * std::sin(2.0 * kPi * 0.13 * t); };
  const auto off = score_recording(synthetic_tremor(100.0, 30.0, 5.0, envelope, Vec3(1, 0.3, 0.2), 0.02, 5));
  const auto on =
      score_recording(synthetic_tremor(100.0, 30.0, 5.0, [&](double t) { return 0.5 * envelope(t); },
                                       Vec3(1, 0.3, 0.2), 0.02, 5));
  double c_off = 0.0, c_on = 0.0;
  for (int k = 0; k < 5; ++k) {
    c_off += off.histogram[k];
    c_on += on.histogram[k];
    CHECK(c_on >= c_off - 1e-12);
  }
  CHECK(on.score < off.score);

  // Annotated lifts are separate sequences of one chain.
  auto lifts = synthetic_tremor(100.0, 24.0, 5.0, [](double) { return 3.0; });
  lifts.lift.assign(lifts.size(), 0);
  for (std::size_t i = 0; i < lifts.size(); ++i) {
    const double t = lifts.t[i];
    lifts.lift[i] = t < 7.0 ? 1 : (t >= 8.0 && t < 15.0 ? 2 : (t >= 16.0 && t < 23.0 ? 3 : 0));
  }
  CHECK(lifts.lift_segments().size() == 3);
  const auto m = score_recording(lifts);
  CHECK(m.states.size() == 3 * 14);
  CHECK(m.score == doctest::Approx(50.0));
}
