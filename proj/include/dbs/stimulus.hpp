#pragma once

#include "dbs/common.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace dbs {

enum class PulseShape { Monophasic, BiphasicSymmetric };

std::string_view to_string(PulseShape s);
PulseShape parse_pulse_shape(std::string_view name);

/// Contact polarity assignment in the clinical "C3-,C4+" notation. A setting
/// without an anode contact returns current through the pulse generator case.
struct Polarity {
  static constexpr std::string_view kCase = "CASE";

  std::vector<std::string> cathodes;
  std::vector<std::string> anodes;  // empty means CASE

  bool unipolar() const { return anodes.empty(); }
  Polarity swapped() const;
  /// Canonical text: cathodes then anodes, comma separated, no spaces.
  std::string to_string() const;

  /// Parses "C3-,C4+", "C3-, C4+", "C2-,CASE+". Throws ValidationError.
  static Polarity parse(std::string_view text);
};

struct StimulationSetting {
  std::string label;
  Polarity polarity;
  double amplitude_ma = 0.0;
  double frequency_hz = 130.0;
  double pulse_width_us = 60.0;
  PulseShape shape = PulseShape::Monophasic;

  double period_s() const { return 1.0 / frequency_hz; }
  double pulse_width_s() const { return pulse_width_us * 1e-6; }
  /// Fraction of the period carrying current (both phases for biphasic).
  double duty_cycle() const;

  /// Every invariant violation, empty when valid.
  std::vector<std::string> violations() const;
  void validate() const;
};

/// Periodic rectangular current train, cathodic phase first. The normalized
/// shape is -1 during the cathodic phase, +1 during a recharge phase, else 0.
class PulseTrain {
 public:
  explicit PulseTrain(StimulationSetting setting);

  const StimulationSetting& setting() const { return setting_; }
  double period() const { return setting_.period_s(); }
  double amplitude() const { return setting_.amplitude_ma; }

  double shape(double t) const;
  /// Cathode current injected into tissue, mA (negative while cathodic).
  double current(double t) const { return setting_.amplitude_ma * shape(t); }

 private:
  StimulationSetting setting_;
};

PulseTrain make_pulse_train(const StimulationSetting& setting);

/// One-sided Fourier coefficients: current(t) = Re sum_{k=0}^{N} c_k exp(i k w1 t).
struct Spectrum {
  double fundamental_hz = 0.0;
  std::vector<Complex> coefficients;

  std::size_t harmonics() const { return coefficients.empty() ? 0 : coefficients.size() - 1; }
  double omega(std::size_t k) const { return 2.0 * kPi * fundamental_hz * static_cast<double>(k); }
  /// Mean-square power carried by the retained coefficients.
  double power() const;
};

Spectrum fourier_decompose(const PulseTrain& train, int n_harmonics);
double reconstruct(const Spectrum& spectrum, double t);

}  // namespace dbs
