#include "dbs/tremor.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace dbs {

// ---------------------------------------------------------------------------
// Recordings
// ---------------------------------------------------------------------------

std::vector<std::pair<std::size_t, std::size_t>> TremorRecording::lift_segments() const {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t i = 0;
  while (i < lift.size()) {
    if (lift[i] == 0) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < lift.size() && lift[j] == lift[i]) ++j;
    out.emplace_back(i, j);
    i = j;
  }
  return out;
}

namespace {

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream s(line);
  while (std::getline(s, cell, sep)) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  return out;
}

double to_double(const std::string& s, std::size_t line) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v))
    throw InvalidInput("recording line " + std::to_string(line) + ": bad number '" + s + "'");
  return v;
}

}  // namespace

TremorRecording parse_recording(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line)) throw InvalidInput("recording is empty");
  const char sep = line.find(',') != std::string::npos ? ',' : (line.find(';') != std::string::npos ? ';' : '\t');
  const auto header = split(line, sep);
  auto column = [&](const std::string& name) -> int {
    auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : static_cast<int>(it - header.begin());
  };
  const int ct = column("t_s"), cx = column("ax"), cy = column("ay"), cz = column("az"), cl = column("lift");
  std::vector<std::string> missing;
  for (auto [c, name] : {std::pair{ct, "t_s"}, {cx, "ax"}, {cy, "ay"}, {cz, "az"}})
    if (c < 0) missing.emplace_back(name);
  if (!missing.empty()) {
    std::string m;
    for (const auto& s : missing) m += (m.empty() ? "" : ", ") + s;
    throw InvalidInput("recording lacks column(s): " + m);
  }
  TremorRecording rec;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split(line, sep);
    if (cells.size() < header.size()) throw InvalidInput("recording line " + std::to_string(lineno) + " is short");
    rec.t.push_back(to_double(cells[static_cast<std::size_t>(ct)], lineno));
    rec.accel.emplace_back(to_double(cells[static_cast<std::size_t>(cx)], lineno),
                           to_double(cells[static_cast<std::size_t>(cy)], lineno),
                           to_double(cells[static_cast<std::size_t>(cz)], lineno));
    if (cl >= 0) rec.lift.push_back(static_cast<int>(to_double(cells[static_cast<std::size_t>(cl)], lineno)));
  }
  if (rec.t.size() < 2) throw InvalidInput("recording needs at least two samples");
  std::vector<double> dt(rec.t.size() - 1);
  for (std::size_t i = 1; i < rec.t.size(); ++i) dt[i - 1] = rec.t[i] - rec.t[i - 1];
  std::vector<double> sorted = dt;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(sorted.size() / 2), sorted.end());
  const double nominal = sorted[sorted.size() / 2];
  if (!(nominal > 0.0)) throw InvalidInput("recording timestamps must increase");
  for (std::size_t i = 0; i < dt.size(); ++i)
    if (std::abs(dt[i] - nominal) > 0.01 * nominal)
      throw InvalidInput("recording sampling is not uniform near t = " + std::to_string(rec.t[i]) + " s");
  rec.sample_rate_hz = static_cast<double>(dt.size()) / (rec.t.back() - rec.t.front());
  return rec;
}

TremorRecording load_recording(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open recording " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_recording(ss.str());
}

std::string format_recording(const TremorRecording& rec) {
  std::ostringstream out;
  out.precision(17);
  const bool lift = !rec.lift.empty();
  out << "t_s,ax,ay,az" << (lift ? ",lift" : "") << '\n';
  for (std::size_t i = 0; i < rec.size(); ++i) {
    out << rec.t[i] << ',' << rec.accel[i].x() << ',' << rec.accel[i].y() << ',' << rec.accel[i].z();
    if (lift) out << ',' << rec.lift[i];
    out << '\n';
  }
  return out.str();
}

void save_recording(const TremorRecording& rec, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out << format_recording(rec);
}

// ---------------------------------------------------------------------------
// Trajectory
// ---------------------------------------------------------------------------

namespace {

double bin_frequency(std::size_t k, std::size_t n, double fs) {
  const double kk = k <= n / 2 ? static_cast<double>(k) : static_cast<double>(k) - static_cast<double>(n);
  return kk * fs / static_cast<double>(n);
}

}  // namespace

Trajectory reconstruct_trajectory(const TremorRecording& rec, const Band& band) {
  return reconstruct_trajectory(rec, 0, rec.size(), band);
}

Trajectory reconstruct_trajectory(const TremorRecording& rec, std::size_t begin, std::size_t end, const Band& band) {
  const double fs = rec.sample_rate_hz;
  if (!(fs > 0.0)) throw InvalidInput("recording has no sample rate");
  if (!(band.lo_hz > 0.0) || !(band.lo_hz < band.hi_hz) || !(band.hi_hz < 0.5 * fs))
    throw InvalidInput("band [" + std::to_string(band.lo_hz) + ", " + std::to_string(band.hi_hz) +
                       "] Hz must satisfy 0 < lo < hi < Nyquist");
  if (end > rec.size() || begin >= end) throw InvalidInput("empty recording segment");
  const std::size_t n = end - begin;
  if (static_cast<double>(n) / fs < 5.0 - 1e-9)
    throw InvalidInput("analyzed segment is shorter than 5 s (" + std::to_string(n / fs) + " s)");

  Eigen::FFT<double> fft;
  Eigen::MatrixXd disp(3, static_cast<Eigen::Index>(n));
  std::vector<double> x(n), y(n);
  std::vector<Complex> spec;
  for (int axis = 0; axis < 3; ++axis) {
    for (std::size_t i = 0; i < n; ++i) x[i] = rec.accel[begin + i][axis];
    fft.fwd(spec, x);
    for (std::size_t k = 0; k < n; ++k) {
      const double f = std::abs(bin_frequency(k, n, fs));
      if (k == 0 || f < band.lo_hz || f > band.hi_hz) {
        spec[k] = 0.0;
      } else {
        const double w = 2.0 * kPi * bin_frequency(k, n, fs);
        spec[k] *= -1e3 / (w * w);  // m/s2 -> mm
      }
    }
    fft.inv(y, spec);
    for (std::size_t i = 0; i < n; ++i) disp(axis, static_cast<Eigen::Index>(i)) = y[i];
  }
  const Eigen::Matrix3d cov = disp * disp.transpose() / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
  Eigen::Matrix<double, 3, 2> axes;
  axes.col(0) = eig.eigenvectors().col(2);
  axes.col(1) = eig.eigenvectors().col(1);
  for (int c = 0; c < 2; ++c) {
    Eigen::Index big = 0;
    axes.col(c).cwiseAbs().maxCoeff(&big);
    if (axes(big, c) < 0.0) axes.col(c) = -axes.col(c);
  }
  Trajectory t;
  t.sample_rate_hz = fs;
  t.xy.resize(n);
  const Eigen::MatrixXd proj = axes.transpose() * disp;
  for (std::size_t i = 0; i < n; ++i) t.xy[i] = proj.col(static_cast<Eigen::Index>(i));
  return t;
}

// ---------------------------------------------------------------------------
// States and chain
// ---------------------------------------------------------------------------

std::vector<int> assign_states(const Trajectory& trajectory, const std::vector<double>& radii, double window_s) {
  if (radii.empty()) throw InvalidInput("state radii are empty");
  for (std::size_t i = 0; i < radii.size(); ++i)
    if (!(radii[i] > 0.0) || (i > 0 && !(radii[i] > radii[i - 1])))
      throw InvalidInput("state radii must be positive and strictly increasing");
  if (!(window_s > 0.0)) throw InvalidInput("window length must be positive");
  const auto w = static_cast<std::size_t>(std::llround(window_s * trajectory.sample_rate_hz));
  if (w == 0) throw InvalidInput("window shorter than one sample");
  std::vector<int> states;
  for (std::size_t start = 0; start + w <= trajectory.xy.size(); start += w) {
    double peak = 0.0;
    for (std::size_t i = start; i < start + w; ++i) peak = std::max(peak, trajectory.xy[i].norm());
    const auto it = std::lower_bound(radii.begin(), radii.end(), peak);
    states.push_back(it == radii.end() ? static_cast<int>(radii.size()) : static_cast<int>(it - radii.begin()) + 1);
  }
  return states;
}

MarkovEstimate estimate_markov(const std::vector<std::vector<int>>& sequences, int states) {
  if (states < 1) throw InvalidInput("state count must be positive");
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(states, states);
  Eigen::RowVectorXd occupancy = Eigen::RowVectorXd::Zero(states);
  std::size_t transitions = 0;
  for (const auto& seq : sequences) {
    for (int s : seq) {
      if (s < 1 || s > states) throw InvalidInput("state " + std::to_string(s) + " out of range");
      occupancy[s - 1] += 1.0;
    }
    for (std::size_t i = 1; i < seq.size(); ++i) {
      counts(seq[i - 1] - 1, seq[i] - 1) += 1.0;
      ++transitions;
    }
  }
  if (transitions == 0) throw InvalidInput("state sequence needs at least two windows");
  MarkovEstimate m;
  m.P = counts;
  for (int r = 0; r < states; ++r) {
    const double total = counts.row(r).sum();
    if (total == 0.0) m.P.row(r).setConstant(1.0 / states);
    else m.P.row(r) /= total;
  }
  const Eigen::MatrixXd lazy = 0.5 * (m.P + Eigen::MatrixXd::Identity(states, states));
  // Starting from the observed occupancy makes an absorbing observed state
  // exactly stationary.
  Eigen::RowVectorXd pi = occupancy / occupancy.sum();
  const int max_iterations = 10000000;
  for (m.iterations = 1; m.iterations <= max_iterations; ++m.iterations) {
    Eigen::RowVectorXd next = pi * lazy;
    next /= next.sum();
    const double delta = (next - pi).lpNorm<1>();
    pi = next;
    if (delta < 1e-13) break;
  }
  if (m.iterations > max_iterations) throw NumericalError("stationary distribution did not converge");
  m.pi = pi.transpose();
  return m;
}

MarkovEstimate estimate_markov(const std::vector<int>& sequence, int states) {
  return estimate_markov(std::vector<std::vector<int>>{sequence}, states);
}

double tremor_score(const Eigen::VectorXd& pi) {
  const auto S = pi.size();
  if (S < 2) throw InvalidInput("tremor score needs at least two states");
  double s = 0.0;
  for (Eigen::Index k = 0; k < S; ++k) s += pi[k] * static_cast<double>(k);
  return 100.0 * s / static_cast<double>(S - 1);
}

Eigen::VectorXd tremor_distribution(const std::vector<int>& states, int count) {
  if (states.empty()) throw InvalidInput("state sequence is empty");
  Eigen::VectorXd h = Eigen::VectorXd::Zero(count);
  for (int s : states) {
    if (s < 1 || s > count) throw InvalidInput("state " + std::to_string(s) + " out of range");
    h[s - 1] += 1.0;
  }
  return h / static_cast<double>(states.size());
}

TremorModel score_recording(const TremorRecording& rec, const TremorOptions& options) {
  auto segments = rec.lift_segments();
  if (segments.empty()) segments.emplace_back(0, rec.size());
  const int S = static_cast<int>(options.radii.size());
  TremorModel m;
  m.radii = options.radii;
  std::vector<std::vector<int>> sequences;
  for (const auto& [b, e] : segments) {
    sequences.push_back(assign_states(reconstruct_trajectory(rec, b, e, options.band), options.radii, options.window_s));
    m.states.insert(m.states.end(), sequences.back().begin(), sequences.back().end());
  }
  const auto est = estimate_markov(sequences, S);
  m.P = est.P;
  m.pi = est.pi;
  m.histogram = tremor_distribution(m.states, S);
  m.score = tremor_score(m.pi);
  return m;
}

TremorRecording synthetic_tremor(double sample_rate_hz, double duration_s, double frequency_hz,
                                 const std::function<double(double)>& amplitude_mm, const Vec3& axis,
                                 double noise_rms, unsigned seed) {
  if (!(sample_rate_hz > 0.0) || !(duration_s > 0.0)) throw InvalidInput("sample rate and duration must be positive");
  const auto n = static_cast<std::size_t>(std::llround(sample_rate_hz * duration_s));
  const Vec3 dir = axis.normalized();
  std::vector<double> x(n), a;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / sample_rate_hz;
    x[i] = 1e-3 * amplitude_mm(t) * std::sin(2.0 * kPi * frequency_hz * t);  // m
  }
  Eigen::FFT<double> fft;
  std::vector<Complex> spec;
  fft.fwd(spec, x);
  for (std::size_t k = 0; k < n; ++k) {
    const double w = 2.0 * kPi * bin_frequency(k, n, sample_rate_hz);
    spec[k] *= -w * w;
  }
  fft.inv(a, spec);
  std::mt19937 rng(seed);
  std::normal_distribution<double> noise(0.0, noise_rms > 0.0 ? noise_rms : 1.0);
  TremorRecording rec;
  rec.sample_rate_hz = sample_rate_hz;
  for (std::size_t i = 0; i < n; ++i) {
    rec.t.push_back(static_cast<double>(i) / sample_rate_hz);
    Vec3 v = a[i] * dir;
    if (noise_rms > 0.0) v += Vec3(noise(rng), noise(rng), noise(rng));
    rec.accel.push_back(v);
  }
  return rec;
}

}  // namespace dbs
