#pragma once

// Tremor severity from tri-axial accelerometry: band-limited displacement
// trajectory, windowed amplitude states on concentric radii, a Markov chain
// over the states and a 0-100 score from its stationary distribution.

#include "dbs/common.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace dbs {

struct TremorRecording {
  double sample_rate_hz = 0.0;
  std::vector<double> t;        // s
  std::vector<Vec3> accel;      // m/s2
  std::vector<int> lift;        // optional per-sample lift index (0 = none)

  std::size_t size() const { return accel.size(); }
  double duration() const { return sample_rate_hz > 0.0 ? static_cast<double>(size()) / sample_rate_hz : 0.0; }
  /// Contiguous [begin, end) sample ranges of each annotated lift, in order.
  std::vector<std::pair<std::size_t, std::size_t>> lift_segments() const;
};

/// Delimited text with header t_s,ax,ay,az and an optional lift column.
/// Throws InvalidInput for missing axes or timestamp jitter above 1%.
TremorRecording load_recording(const std::filesystem::path& path);
TremorRecording parse_recording(std::string_view text);
void save_recording(const TremorRecording& rec, const std::filesystem::path& path);
std::string format_recording(const TremorRecording& rec);

struct Band {
  double lo_hz = 2.0;
  double hi_hz = 12.0;
};

struct Trajectory {
  double sample_rate_hz = 0.0;
  std::vector<Eigen::Vector2d> xy;  // mm
};

/// Band-pass and double integration in the frequency domain (the DC bin is
/// removed at each stage), then projection of the 3-D displacement onto its
/// two principal axes. Throws InvalidInput for an empty or inverted band or
/// one reaching Nyquist, and for fewer than 5 s of samples.
Trajectory reconstruct_trajectory(const TremorRecording& rec, const Band& band = {});
/// The same on the samples [begin, end) of a recording.
Trajectory reconstruct_trajectory(const TremorRecording& rec, std::size_t begin, std::size_t end, const Band& band = {});

inline const std::vector<double>& default_radii() {
  static const std::vector<double> r = {1.0, 2.0, 4.0, 8.0, 16.0};
  return r;
}

/// 1-based state per non-overlapping window: the smallest k with the window's
/// largest |displacement| <= r_k, and S beyond r_S. A trailing partial window
/// is dropped. Throws InvalidInput for empty or non-increasing radii.
std::vector<int> assign_states(const Trajectory& trajectory, const std::vector<double>& radii,
                               double window_s = 0.5);

struct MarkovEstimate {
  Eigen::MatrixXd P;   // row-stochastic, S x S
  Eigen::VectorXd pi;  // stationary distribution
  int iterations = 0;
};

/// Maximum-likelihood transition matrix from the transitions inside each
/// sequence; rows without observations get add-one (uniform) counts. pi by
/// power iteration on the lazy chain (P + I) / 2 from the observed occupancy.
MarkovEstimate estimate_markov(const std::vector<std::vector<int>>& sequences, int states);
MarkovEstimate estimate_markov(const std::vector<int>& sequence, int states);

/// 100 * sum_k pi_k (k - 1) / (S - 1). Throws InvalidInput for S < 2.
double tremor_score(const Eigen::VectorXd& pi);

/// Occupancy frequency of each state.
Eigen::VectorXd tremor_distribution(const std::vector<int>& states, int count);

struct TremorOptions {
  Band band;
  double window_s = 0.5;
  std::vector<double> radii = default_radii();
};

struct TremorModel {
  std::vector<double> radii;
  std::vector<int> states;
  Eigen::MatrixXd P;
  Eigen::VectorXd pi;
  Eigen::VectorXd histogram;
  double score = 0.0;
};

/// Scores every annotated lift (or the whole recording without annotations)
/// as separate sequences of one chain.
TremorModel score_recording(const TremorRecording& rec, const TremorOptions& options = {});

/// Displacement x(t) = amplitude_mm(t) * sin(2 pi f t) along `axis`,
/// differentiated spectrally into acceleration, plus optional white noise.
TremorRecording synthetic_tremor(double sample_rate_hz, double duration_s, double frequency_hz,
                                 const std::function<double(double)>& amplitude_mm, const Vec3& axis = Vec3::UnitX(),
                                 double noise_rms = 0.0, unsigned seed = 1);

}  // namespace dbs
