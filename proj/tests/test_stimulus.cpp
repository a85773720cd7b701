#include "dbs/stimulus.hpp"

#include <doctest.h>

#include <cmath>

using namespace dbs;

namespace {

StimulationSetting make(double amplitude, double freq, double pw, PulseShape shape = PulseShape::Monophasic) {
  StimulationSetting s;
  s.polarity = Polarity::parse("C3-,C4+");
  s.amplitude_ma = amplitude;
  s.frequency_hz = freq;
  s.pulse_width_us = pw;
  s.shape = shape;
  return s;
}

// Midpoint-rule quadrature of (2/T) * integral current(t) exp(-i k w t) dt
// (1/T for k = 0), resolving the pulse edges exactly.
Complex numeric_coefficient(const PulseTrain& train, int k, int samples = 400000) {
  const double T = train.period();
  const double dt = T / samples;
  Complex sum(0.0, 0.0);
  for (int i = 0; i < samples; ++i) {
    const double t = (i + 0.5) * dt;
    sum += train.current(t) * std::exp(Complex(0.0, -2.0 * kPi * k * t / T)) * dt;
  }
  return (k == 0 ? 1.0 : 2.0) / T * sum;
}

// Relative L2 error of the truncated reconstruction over one period, skipping
// samples within `guard` seconds of a discontinuity.
double reconstruction_error(const PulseTrain& train, const Spectrum& spec, double guard) {
  const double T = train.period();
  const double pw = train.setting().pulse_width_s();
  std::vector<double> edges = {0.0, pw, T};
  if (train.setting().shape == PulseShape::BiphasicSymmetric) edges.push_back(2.0 * pw);
  double num = 0.0, den = 0.0;
  const int samples = 20000;
  for (int i = 0; i < samples; ++i) {
    const double t = (i + 0.5) * T / samples;
    bool near = false;
    for (double e : edges) near = near || std::abs(t - e) < guard;
    if (near) continue;
    const double ref = train.current(t);
    const double d = reconstruct(spec, t) - ref;
    num += d * d;
    den += ref * ref;
  }
  return std::sqrt(num / den);
}

}  // namespace

TEST_CASE("polarity notation") {
  const auto p = Polarity::parse("C3-,C4+");
  CHECK(p.cathodes == std::vector<std::string>{"C3"});
  CHECK(p.anodes == std::vector<std::string>{"C4"});
  CHECK(p.to_string() == "C3-,C4+");
  CHECK(Polarity::parse("C3-, C4+").to_string() == "C3-,C4+");
  CHECK(p.swapped().to_string() == "C4-,C3+");
  const auto u = Polarity::parse("C2-,CASE+");
  CHECK(u.unipolar());
  CHECK(u.to_string() == "C2-,CASE+");
  CHECK(Polarity::parse("C2a-,C2b-").unipolar());
  CHECK_THROWS_AS(Polarity::parse("C3+"), ValidationError);
  CHECK_THROWS_AS(Polarity::parse("C3-,C3+"), ValidationError);
  CHECK_THROWS_AS(Polarity::parse("C3*"), ValidationError);
  CHECK_THROWS_AS(Polarity::parse(""), ValidationError);
  CHECK_THROWS_AS(Polarity::parse("CASE-,C2+"), ValidationError);
  CHECK_THROWS_AS(u.swapped(), InvalidInput);
}

TEST_CASE("pulse train invariants") {
  const auto s = make(1.2, 140.0, 90.0);
  CHECK(s.duty_cycle() == doctest::Approx(0.0126).epsilon(1e-12));
  const PulseTrain train(s);
  CHECK(train.current(0.0) == -1.2);
  CHECK(train.current(89e-6) == -1.2);
  CHECK(train.current(91e-6) == 0.0);
  CHECK(train.current(train.period() + 10e-6) == -1.2);

  const PulseTrain zero(make(0.0, 140.0, 90.0));
  for (double t = 0.0; t < 0.01; t += 1e-5) CHECK(zero.current(t) == 0.0);

  const PulseTrain bi(make(2.0, 130.0, 60.0, PulseShape::BiphasicSymmetric));
  double charge = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) charge += bi.current((i + 0.5) * bi.period() / n);
  CHECK(std::abs(charge) < 1e-9);

  CHECK_THROWS_AS(PulseTrain(make(1.0, 1000.0, 1000.0)), ValidationError);
  CHECK_THROWS_AS(PulseTrain(make(1.0, 600.0, 900.0, PulseShape::BiphasicSymmetric)), ValidationError);
  CHECK_THROWS_AS(PulseTrain(make(-1.0, 130.0, 60.0)), ValidationError);
}

TEST_CASE("closed-form coefficients match quadrature") {
  for (auto shape : {PulseShape::Monophasic, PulseShape::BiphasicSymmetric}) {
    const PulseTrain train(make(1.2, 140.0, 90.0, shape));
    const auto spec = fourier_decompose(train, 40);
    for (int k : {0, 1, 2, 7, 40}) {
      const Complex q = numeric_coefficient(train, k);
      CHECK(std::abs(spec.coefficients[static_cast<std::size_t>(k)] - q) < 1e-5 * 1.2);
    }
  }
  const PulseTrain mono(make(1.2, 140.0, 90.0));
  CHECK(fourier_decompose(mono, 1).coefficients[0].real() == doctest::Approx(-1.2 * 90e-6 * 140.0));
  CHECK(fourier_decompose(mono, 1).coefficients[0].imag() == 0.0);
  const PulseTrain bi(make(1.2, 140.0, 90.0, PulseShape::BiphasicSymmetric));
  CHECK(fourier_decompose(bi, 3).coefficients[0] == Complex(0.0, 0.0));
  CHECK_THROWS_AS(fourier_decompose(mono, 0), InvalidInput);
}

TEST_CASE("reconstruction accuracy") {
  const PulseTrain train(make(1.2, 140.0, 90.0));
  CHECK(reconstruction_error(train, fourier_decompose(train, 1024), 10e-6) < 0.02);
  // PW * f >= 0.005 at 4096 harmonics: relative squared L2 error (error
  // energy over signal energy) < 0.5%. By orthogonality the error energy is the
  // mean square minus the retained power.
  for (auto [f, pw] : {std::pair{140.0, 90.0}, std::pair{100.0, 50.0}, std::pair{130.0, 60.0}}) {
    const PulseTrain t(make(1.0, f, pw));
    const double mean_square = pw * 1e-6 * f;
    CHECK((mean_square - fourier_decompose(t, 4096).power()) / mean_square < 0.005);
  }
  {
    // Sampled cross-check of the same quantity.
    const PulseTrain t(make(1.0, 140.0, 90.0));
    const auto spec = fourier_decompose(t, 4096);
    const double sampled = std::pow(reconstruction_error(t, spec, 0.0), 2);
    const double mean_square = 90e-6 * 140.0;
    CHECK(sampled == doctest::Approx((mean_square - spec.power()) / mean_square).epsilon(0.1));
    CHECK(sampled < 0.005);
  }
  // Doubling the harmonic count never increases the error.
  double prev = 1e9;
  for (int n = 16; n <= 2048; n *= 2) {
    const double e = reconstruction_error(train, fourier_decompose(train, n), 0.0);
    CHECK(e <= prev + 1e-12);
    prev = e;
  }
  const auto spec = fourier_decompose(train, 64);
  CHECK(reconstruct(spec, 0.0021) == doctest::Approx(reconstruct(spec, 0.0021 + train.period())).epsilon(1e-9));
  const PulseTrain zero(make(0.0, 140.0, 90.0));
  CHECK(reconstruct(fourier_decompose(zero, 32), 0.001) == 0.0);
}

TEST_CASE("Parseval bound approaches the mean square from below") {
  const PulseTrain train(make(1.2, 140.0, 90.0));
  const double mean_square = 1.2 * 1.2 * 90e-6 * 140.0;
  double prev = 0.0;
  for (int n : {8, 64, 512, 4096}) {
    const double p = fourier_decompose(train, n).power();
    CHECK(p <= mean_square);
    CHECK(p >= prev);
    prev = p;
  }
  CHECK(prev > 0.99 * mean_square);
}

TEST_CASE("spectrum linearity and time-shift covariance") {
  const PulseTrain a(make(1.0, 130.0, 60.0));
  const PulseTrain b(make(2.5, 130.0, 60.0));
  const auto sa = fourier_decompose(a, 32), sb = fourier_decompose(b, 32);
  for (std::size_t k = 0; k <= 32; ++k) CHECK(std::abs(sb.coefficients[k] - 2.5 * sa.coefficients[k]) < 1e-15);

  // Shifted train s(t - tau) against the quadrature of the shifted signal.
  const double tau = 1.3e-3;
  const double T = a.period();
  for (int k : {1, 5}) {
    Complex q(0.0, 0.0);
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
      const double t = (i + 0.5) * T / n;
      q += a.current(t - tau) * std::exp(Complex(0.0, -2.0 * kPi * k * t / T)) * (T / n);
    }
    q *= 2.0 / T;
    const Complex expected = sa.coefficients[static_cast<std::size_t>(k)] * std::exp(Complex(0.0, -k * 2.0 * kPi / T * tau));
    CHECK(std::abs(q - expected) < 1e-5);
  }
}
