#include "dbs/stimulus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

namespace dbs {

std::string_view to_string(PulseShape s) {
  return s == PulseShape::Monophasic ? "monophasic" : "biphasic";
}

PulseShape parse_pulse_shape(std::string_view name) {
  if (name == "monophasic" || name == "monophasic-rectangular") return PulseShape::Monophasic;
  if (name == "biphasic" || name == "biphasic-symmetric") return PulseShape::BiphasicSymmetric;
  throw InvalidInput("unknown pulse shape '" + std::string(name) + "'");
}

Polarity Polarity::swapped() const {
  if (unipolar()) throw InvalidInput("cannot swap the polarity of a unipolar setting");
  return {anodes, cathodes};
}

std::string Polarity::to_string() const {
  std::string out;
  for (const auto& c : cathodes) out += (out.empty() ? "" : ",") + c + "-";
  if (anodes.empty()) out += ",CASE+";
  for (const auto& a : anodes) out += "," + a + "+";
  return out;
}

Polarity Polarity::parse(std::string_view text) {
  Polarity p;
  std::vector<std::string> errors;
  std::size_t pos = 0;
  bool case_anode = false;
  while (pos <= text.size()) {
    const auto comma = text.find(',', pos);
    auto token = text.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos);
    while (!token.empty() && std::isspace(static_cast<unsigned char>(token.front()))) token.remove_prefix(1);
    while (!token.empty() && std::isspace(static_cast<unsigned char>(token.back()))) token.remove_suffix(1);
    if (token.size() < 2) {
      errors.push_back("malformed polarity token '" + std::string(token) + "'");
    } else {
      const char sign = token.back();
      const std::string id(token.substr(0, token.size() - 1));
      const bool ok_id = std::all_of(id.begin(), id.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)); });
      if (!ok_id || (sign != '-' && sign != '+')) {
        errors.push_back("malformed polarity token '" + std::string(token) + "'");
      } else if (id == kCase) {
        if (sign == '-') errors.push_back("CASE can only serve as anode");
        case_anode = true;
      } else {
        auto& list = sign == '-' ? p.cathodes : p.anodes;
        if (std::find(p.cathodes.begin(), p.cathodes.end(), id) != p.cathodes.end() ||
            std::find(p.anodes.begin(), p.anodes.end(), id) != p.anodes.end())
          errors.push_back("contact " + id + " listed twice");
        else
          list.push_back(id);
      }
    }
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  if (p.cathodes.empty()) errors.push_back("polarity '" + std::string(text) + "' has no cathode");
  if (case_anode && !p.anodes.empty()) errors.push_back("CASE cannot be combined with anode contacts");
  if (!errors.empty()) throw ValidationError(std::move(errors));
  return p;
}

double StimulationSetting::duty_cycle() const {
  const double phases = shape == PulseShape::BiphasicSymmetric ? 2.0 : 1.0;
  return phases * pulse_width_s() * frequency_hz;
}

std::vector<std::string> StimulationSetting::violations() const {
  std::vector<std::string> v;
  const std::string who = label.empty() ? std::string("setting") : "setting '" + label + "'";
  if (!(amplitude_ma >= 0.0) || !std::isfinite(amplitude_ma)) v.push_back(who + ": amplitude must be >= 0");
  if (!(frequency_hz > 0.0) || !std::isfinite(frequency_hz)) v.push_back(who + ": frequency must be > 0");
  if (!(pulse_width_us > 0.0) || !std::isfinite(pulse_width_us)) v.push_back(who + ": pulse width must be > 0");
  if (v.empty() && !(duty_cycle() < 1.0)) v.push_back(who + ": duty cycle must be < 1");
  if (polarity.cathodes.empty()) v.push_back(who + ": no cathode");
  for (const auto& c : polarity.cathodes)
    if (std::find(polarity.anodes.begin(), polarity.anodes.end(), c) != polarity.anodes.end())
      v.push_back(who + ": contact " + c + " is both cathode and anode");
  return v;
}

void StimulationSetting::validate() const {
  auto v = violations();
  if (!v.empty()) throw ValidationError(std::move(v));
}

PulseTrain::PulseTrain(StimulationSetting setting) : setting_(std::move(setting)) { setting_.validate(); }

double PulseTrain::shape(double t) const {
  const double T = period();
  double tau = std::fmod(t, T);
  if (tau < 0.0) tau += T;
  const double pw = setting_.pulse_width_s();
  if (tau < pw) return -1.0;
  if (setting_.shape == PulseShape::BiphasicSymmetric && tau < 2.0 * pw) return 1.0;
  return 0.0;
}

PulseTrain make_pulse_train(const StimulationSetting& setting) { return PulseTrain(setting); }

double Spectrum::power() const {
  if (coefficients.empty()) return 0.0;
  double p = std::norm(coefficients[0]);
  for (std::size_t k = 1; k < coefficients.size(); ++k) p += 0.5 * std::norm(coefficients[k]);
  return p;
}

Spectrum fourier_decompose(const PulseTrain& train, int n_harmonics) {
  if (n_harmonics < 1) throw InvalidInput("n_harmonics must be >= 1");
  const auto& s = train.setting();
  const double A = s.amplitude_ma;
  const double T = train.period();
  const double pw = s.pulse_width_s();
  const bool biphasic = s.shape == PulseShape::BiphasicSymmetric;

  Spectrum spec;
  spec.fundamental_hz = s.frequency_hz;
  spec.coefficients.resize(static_cast<std::size_t>(n_harmonics) + 1);
  spec.coefficients[0] = biphasic ? 0.0 : -A * pw / T;
  const Complex i(0.0, 1.0);
  for (int k = 1; k <= n_harmonics; ++k) {
    const double w = 2.0 * kPi * k / T;
    // (2/T) * integral over one period of shape(t) exp(-i w t)
    const Complex e = std::exp(-i * (w * pw));
    const Complex one_phase = (1.0 - e) / (i * w);
    const Complex c = biphasic ? -(1.0 - e) * one_phase : -one_phase;
    spec.coefficients[static_cast<std::size_t>(k)] = A * (2.0 / T) * c;
  }
  return spec;
}

double reconstruct(const Spectrum& spectrum, double t) {
  const double w1 = 2.0 * kPi * spectrum.fundamental_hz;
  // Fold t into one period first so the phasor recurrence stays accurate.
  const double T = 1.0 / spectrum.fundamental_hz;
  double tau = std::fmod(t, T);
  if (tau < 0.0) tau += T;
  const Complex z = std::exp(Complex(0.0, w1 * tau));
  Complex zk(1.0, 0.0), sum(0.0, 0.0);
  for (std::size_t k = 0; k < spectrum.coefficients.size(); ++k) {
    // Re-anchor periodically against accumulated rounding in z^k.
    if (k % 256 == 0) zk = std::exp(Complex(0.0, w1 * static_cast<double>(k) * tau));
    sum += spectrum.coefficients[k] * zk;
    zk *= z;
  }
  return sum.real();
}

}  // namespace dbs
