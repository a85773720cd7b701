// Acceptance suite: one PASS/FAIL line per primary criterion. Criteria 2, 3,
// 4, 7 and 9 share two full runs of the reference configuration.

#include "dbs/axon.hpp"
#include "dbs/experiment.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include <unistd.h>

using namespace dbs;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 3) {
  std::ostringstream s;
  s << std::setprecision(digits) << v;
  return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void note(const std::string& s) { std::cerr << "  .. " << s << std::endl; }

// ---------------------------------------------------------------- criterion 1

Outcome analytic_field() {
  const int n = 200;
  const double h = 0.25;
  const auto t0 = std::chrono::steady_clock::now();
  auto grid = std::make_shared<VoxelGrid>(Eigen::Array3i(n, n, n), h, Vec3::Constant(-0.5 * (n - 1) * h),
                                          MaterialTable::defaults());
  grid->paint_sphere(Vec3::Zero(), 0.75, grid->add_contact("P"));
  grid->set_boundary(BoundaryCondition::FarField);
  grid->set_far_field_center(Vec3::Zero());
  StimulationSetting s;
  s.polarity = Polarity::parse("P-");
  s.amplitude_ma = 1.0;
  const auto sol = solve_qs(grid, s);
  const double elapsed = seconds_since(t0);

  const double sigma = grid->materials()[Tissue::Homogeneous].sigma;
  double worst = 0.0;
  int samples = 0;
  for (const Vec3& d : {Vec3(1, 0, 0), Vec3(0, -1, 0), Vec3(0, 0, 1), Vec3(1, 1, 1).normalized(),
                        Vec3(1, -2, 3).normalized()})
    for (double r = 2.0; r <= 15.0 + 1e-9; r += 0.25) {
      const double expected = -analytic_point_source(1.0, sigma, r);
      const double u = interpolate(*grid, sol.potential(), r * d);
      worst = std::max(worst, std::abs(u - expected) / std::abs(expected));
      ++samples;
    }
  const bool pass = sigma == 0.1 && worst < 0.05 && elapsed < 60.0;
  return {pass, "200^3 at 0.25 mm, sigma " + fmt(sigma) + " S/m: max relative error " + fmt(100 * worst) + "% over " +
                    std::to_string(samples) + " samples, r in [2, 15] mm (limit 5%); build+solve " + fmt(elapsed) +
                    " s (limit 60 s)"};
}

// ------------------------------------------------------- shared reference runs

struct ReferenceRuns {
  ExperimentConfig config;
  fs::path run1, run2;
  RunManifest m1, m2;
  double s1 = 0.0, s2 = 0.0;
  std::string error;

  const ActivationReport* report(ModelKind model, const std::string& label) const {
    for (const auto& r : reports)
      if (r.model == model && r.setting.label == label) return &r;
    return nullptr;
  }
  std::vector<ActivationReport> reports;
};

ReferenceRuns run_reference(const fs::path& config_path, const fs::path& work) {
  ReferenceRuns r;
  try {
    r.config = validate_config(config_path);
    r.run1 = work / "run1";
    r.run2 = work / "run2";
    fs::remove_all(r.run1);
    fs::remove_all(r.run2);
    auto progress = [](const std::string& s) { note(s); };
    for (int k = 0; k < 2; ++k) {
      auto c = r.config;
      c.output_dir = k == 0 ? r.run1 : r.run2;
      note("reference run " + std::to_string(k + 1) + " into " + c.output_dir.string());
      const auto t0 = std::chrono::steady_clock::now();
      (k == 0 ? r.m1 : r.m2) = run_experiment(c, progress);
      (k == 0 ? r.s1 : r.s2) = seconds_since(t0);
    }
    for (const auto& t : r.m1.tasks)
      if (t.kind == TaskKind::Activation && t.status == "completed")
        r.reports.push_back(report_from_json(slurp(r.run1 / t.artifacts.front().path)));
  } catch (const std::exception& e) {
    r.error = e.what();
  }
  return r;
}

// ---------------------------------------------------------------- criterion 2

std::string tracts_text(const ActivationReport& r) { return json::parse(report_to_json(r)).at("tracts").dump(); }

Outcome static_invariance(const ReferenceRuns& ref) {
  if (!ref.error.empty()) return {false, "reference run failed: " + ref.error};
  const Scene scene = build_scene(ref.config.scene, ref.config.load_tracts(), ref.config.solver);
  int checked = 0;
  std::vector<std::string> broken;
  for (const auto& s : ref.config.settings) {
    if (s.polarity.unipolar()) continue;
    StimulationSetting swapped = s;
    swapped.polarity = s.polarity.swapped();
    const auto* batch = ref.report(ModelKind::Static, s.label);
    const auto a = batch ? *batch : run_model(scene, s, ModelKind::Static, ref.config.pipeline);
    const auto b = run_model(scene, swapped, ModelKind::Static, ref.config.pipeline);
    ++checked;
    if (tracts_text(a) != tracts_text(b)) broken.push_back(s.label);
  }
  std::string detail = std::to_string(checked) + " bipolar settings vs their swaps: ";
  detail += broken.empty() ? "all per-fiber statuses and percentages identical" : "differences for";
  for (const auto& l : broken) detail += " '" + l + "'";
  return {checked > 0 && broken.empty(), detail};
}

// ---------------------------------------------------------------- criterion 3

Outcome neuron_polarity(const ReferenceRuns& ref) {
  if (!ref.error.empty()) return {false, "reference run failed: " + ref.error};
  std::vector<ActivationReport> reports = ref.reports;
  const auto table = make_comparison(std::move(reports));
  double slowest = 0.0;
  const json timings = json::parse(slurp(ref.run1 / "timings.json"));
  for (const auto& t : timings["tasks"])
    if (t["id"].get<std::string>().rfind("activation/neuron", 0) == 0) slowest = std::max(slowest, t["seconds"].get<double>());
  bool pass = slowest < 600.0;
  int pairs = 0;
  std::string detail;
  for (const auto& p : table.pairs) {
    if (p.model == ModelKind::Static) continue;
    ++pairs;
    pass = pass && p.max_difference >= 5.0;
    detail += std::string(to_string(p.model)) + " '" + p.first + "'/'" + p.second + "' " + fmt(p.max_difference) + " pts; ";
  }
  const unsigned cores = std::max(1u, std::thread::hardware_concurrency());
  detail += "slowest neuron run " + fmt(slowest) + " s on " + std::to_string(cores) + " core(s) (limit 600 s)";
  return {pass && pairs > 0, detail};
}

// ---------------------------------------------------------------- criterion 4

Outcome qs_eqs_agreement(const ReferenceRuns& ref) {
  if (!ref.error.empty()) return {false, "reference run failed: " + ref.error};
  double worst = 0.0;
  int compared = 0;
  std::string where;
  for (const auto& s : ref.config.settings) {
    const auto* qs = ref.report(ModelKind::NeuronQs, s.label);
    const auto* eqs = ref.report(ModelKind::NeuronEqs, s.label);
    if (!qs || !eqs) return {false, "missing neuron report for '" + s.label + "'"};
    for (const auto& t : qs->tracts) {
      const double d = std::abs(t.percentage - eqs->tract(t.name).percentage);
      ++compared;
      if (d >= worst) {
        worst = d;
        where = "'" + s.label + "' " + t.name;
      }
    }
  }
  return {compared > 0 && worst <= 10.0, std::to_string(compared) + " setting/tract pairs: max |QS - EQS| " + fmt(worst) +
                                             " pts at " + where + " (limit 10)"};
}

// ---------------------------------------------------------------- criterion 5

Outcome threshold_table() {
  const auto table = ThresholdTable::defaults();
  const double a = table.threshold_for(90.0, 3.5);
  const double b = table.threshold_for(50.0, 3.5);
  const double mid = table.threshold_for(70.0, 3.5);
  const double oracle = 0.5 * (150.0 + 230.0);
  const double rel = std::abs(mid - oracle) / oracle;
  const bool pass = a == 150.0 && b == 230.0 && rel <= 1e-12;
  return {pass, "(90 us, 3.5 um) -> " + fmt(a, 17) + " V/m, (50 us, 3.5 um) -> " + fmt(b, 17) + " V/m, midpoint " +
                    fmt(mid, 17) + " (relative error " + fmt(rel) + ")"};
}

// ---------------------------------------------------------------- criterion 6

Outcome axon_physics() {
  const auto params = MrgParameters::load();
  const AxonModel axon(std::vector<Vec3>{Vec3(-10, 0, 0), Vec3(10, 0, 0)}, 5.7, params);
  std::vector<std::string> failures;

  // Resting drift over 100 ms without input.
  TimeGrid t;
  t.dt_ms = 0.005;
  t.steps_per_period = 1000;
  t.settle_steps = 1000;
  t.periods = 19;
  const auto rest = simulate(axon, ExtracellularDrive(t, Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(axon.size()), 1000)));
  if (!(rest.max_deviation_mv < 1.0) || rest.any_spike()) failures.push_back("resting drift");

  // Cathodic 1 mA point source at distance d beside node 20, 0.1 S/m.
  auto drive = [&](double d, double pw_us, double dt_us) {
    StimulationSetting s;
    s.polarity = Polarity::parse("P-");
    s.amplitude_ma = 1.0;
    s.frequency_hz = 130.0;
    s.pulse_width_us = pw_us;
    const Vec3 src(0.0, d, 0.0);
    return extracellular_drive(
        axon, [&](const Vec3& x) { return -1e3 * analytic_point_source(1.0, 0.1, (x - src).norm()); }, PulseTrain(s),
        make_time_grid(130.0, dt_us));
  };
  const double tol = 0.01;
  const double th90 = find_threshold(axon, drive(2.0, 90.0, 5.0), tol, 0.0, 8.0);
  const double th50 = find_threshold(axon, drive(2.0, 50.0, 5.0), tol, 0.0, 8.0);
  const double th90_far = find_threshold(axon, drive(4.0, 90.0, 5.0), tol, 0.0, 8.0);
  const bool bracket = is_activated(simulate(axon, drive(2.0, 90.0, 5.0).scaled(th90 + tol))) &&
                       !is_activated(simulate(axon, drive(2.0, 90.0, 5.0).scaled(th90 - tol)));
  if (!bracket) failures.push_back("bisection bracket");
  if (!(th50 > th90)) failures.push_back("pulse-width monotonicity");
  if (!(th90_far > th90)) failures.push_back("distance monotonicity");

  // Spike times under step halving and conduction velocity.
  const double amp = 1.5 * th90;
  const auto coarse = simulate(axon, drive(2.0, 90.0, 5.0).scaled(amp));
  const auto fine = simulate(axon, drive(2.0, 90.0, 2.5).scaled(amp));
  double shift = 0.0;
  bool same_count = coarse.node_spikes.size() == fine.node_spikes.size();
  for (std::size_t k = 0; same_count && k < coarse.node_spikes.size(); ++k) {
    same_count = coarse.node_spikes[k].size() == fine.node_spikes[k].size();
    for (std::size_t i = 0; same_count && i < coarse.node_spikes[k].size(); ++i)
      shift = std::max(shift, std::abs(coarse.node_spikes[k][i] - fine.node_spikes[k][i]));
  }
  if (!same_count || !(shift < 0.1)) failures.push_back("dt halving");
  const double span_m = params.row(5.7).deltax * 1e-6;
  double cv = 0.0;
  if (coarse.node_spikes.size() > 35 && !coarse.node_spikes[35].empty() && !coarse.node_spikes[25].empty())
    cv = 10 * span_m / ((coarse.node_spikes[35].front() - coarse.node_spikes[25].front()) * 1e-3);
  if (!(cv >= 20.0 && cv <= 80.0)) failures.push_back("conduction velocity");

  std::string detail = "rest drift " + fmt(rest.max_deviation_mv) + " mV/100 ms; threshold 2 mm: " + fmt(th50) +
                       " mA (50 us) > " + fmt(th90) + " mA (90 us); 4 mm: " + fmt(th90_far) + " mA; dt-halving shift " +
                       fmt(shift) + " ms; velocity " + fmt(cv) + " m/s";
  for (const auto& f : failures) detail += "; FAILED " + f;
  return {failures.empty(), detail};
}

// ---------------------------------------------------------------- criterion 7

Outcome amplitude_monotonicity(const ReferenceRuns& ref) {
  if (!ref.error.empty()) return {false, "reference run failed: " + ref.error};
  // Settings with the same contacts, frequency and pulse width at 1.6 and 4 mA.
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& lo : ref.config.settings)
    for (const auto& hi : ref.config.settings)
      if (lo.amplitude_ma == 1.6 && hi.amplitude_ma == 4.0 && lo.polarity.to_string() == hi.polarity.to_string() &&
          lo.frequency_hz == hi.frequency_hz && lo.pulse_width_us == hi.pulse_width_us && lo.shape == hi.shape)
        pairs.emplace_back(lo.label, hi.label);
  if (pairs.empty()) return {false, "reference configuration has no 1.6 mA / 4 mA pair"};
  bool pass = true;
  std::string detail;
  for (auto model : ref.config.models)
    for (const auto& [lo, hi] : pairs) {
      const auto* a = ref.report(model, lo);
      const auto* b = ref.report(model, hi);
      if (!a || !b) return {false, "missing report for " + std::string(to_string(model))};
      int low = 0, high = 0, outside = 0;
      for (const auto& t : a->tracts) {
        const auto& u = b->tract(t.name);
        for (std::size_t i = 0; i < t.statuses.size(); ++i) {
          const bool in_lo = t.statuses[i] == FiberStatus::Activated;
          const bool in_hi = u.statuses[i] == FiberStatus::Activated;
          low += in_lo;
          high += in_hi;
          outside += in_lo && !in_hi;
        }
      }
      pass = pass && outside == 0;
      detail += std::string(to_string(model)) + " " + std::to_string(low) + " at 1.6 mA vs " + std::to_string(high) +
                " at 4 mA, " + std::to_string(outside) + " outside; ";
    }
  detail += "pair '" + pairs.front().first + "' / '" + pairs.front().second + "'";
  return {pass, detail};
}

// ---------------------------------------------------------------- criterion 8

Outcome tremor_scorer() {
  std::vector<std::string> failures;
  const auto zero = score_recording(synthetic_tremor(100.0, 20.0, 5.0, [](double) { return 0.0; }));
  if (zero.score != 0.0) failures.push_back("zero signal");

  // Amplitudes inside each state band of the default radii 1, 2, 4, 8, 16 mm.
  double prev = -1.0, worst_row = 0.0, worst_stat = 0.0;
  std::string scores;
  for (double a : {0.5, 1.5, 3.0, 6.0, 12.0}) {
    const auto m = score_recording(synthetic_tremor(100.0, 20.0, 5.0, [a](double) { return a; }));
    if (!(m.score > prev)) failures.push_back("strictly increasing at " + fmt(a) + " mm");
    prev = m.score;
    scores += (scores.empty() ? "" : ", ") + fmt(m.score);
    worst_row = std::max(worst_row, (m.P.rowwise().sum().array() - 1.0).abs().maxCoeff());
    worst_stat = std::max(worst_stat, (m.pi.transpose() * m.P - m.pi.transpose()).cwiseAbs().maxCoeff());
  }

  const auto envelope = [](double t) { return 5.0 + 4.0 * std::sin(2.0 * kPi * 0.13 * t); };
  const auto off = score_recording(synthetic_tremor(100.0, 30.0, 5.0, envelope, Vec3(1, 0.3, 0.2), 0.02, 5));
  const auto on = score_recording(
      synthetic_tremor(100.0, 30.0, 5.0, [&](double t) { return 0.5 * envelope(t); }, Vec3(1, 0.3, 0.2), 0.02, 5));
  for (const auto* m : {&off, &on}) {
    worst_row = std::max(worst_row, (m->P.rowwise().sum().array() - 1.0).abs().maxCoeff());
    worst_stat = std::max(worst_stat, (m->pi.transpose() * m->P - m->pi.transpose()).cwiseAbs().maxCoeff());
  }
  double c_off = 0.0, c_on = 0.0;
  bool dominated = true;
  for (Eigen::Index k = 0; k < off.histogram.size(); ++k) {
    c_off += off.histogram[k];
    c_on += on.histogram[k];
    dominated = dominated && c_on >= c_off - 1e-12;
  }
  if (!dominated || !(on.score < off.score)) failures.push_back("occupancy shift");
  if (!(worst_row <= 1e-9)) failures.push_back("row sums");
  if (!(worst_stat <= 1e-6)) failures.push_back("stationarity");

  std::string detail = "zero " + fmt(zero.score) + "; scores " + scores + "; row-sum error " + fmt(worst_row) +
                       "; |pi P - pi| " + fmt(worst_stat) + "; halved tremor " + fmt(off.score) + " -> " + fmt(on.score);
  for (const auto& f : failures) detail += "; FAILED " + f;
  return {failures.empty(), detail};
}

// ---------------------------------------------------------------- criterion 9

Outcome reproducibility(const ReferenceRuns& ref) {
  if (!ref.error.empty()) return {false, "reference run failed: " + ref.error};
  const std::string a = slurp(ref.run1 / "manifest.json");
  const std::string b = slurp(ref.run2 / "manifest.json");
  int files = 0;
  std::vector<std::string> differing;
  auto compare = [&](const std::string& rel) {
    ++files;
    if (slurp(ref.run1 / rel) != slurp(ref.run2 / rel)) differing.push_back(rel);
  };
  for (const auto& t : ref.m1.tasks)
    for (const auto& art : t.artifacts) compare(art.path);
  for (const auto& art : ref.m1.tables) compare(art.path);
  const bool all_completed = ref.m1.ok() && ref.m2.ok();
  std::string detail = std::string("manifests ") + (a == b ? "identical" : "DIFFER") + " (" +
                       std::to_string(ref.m1.tasks.size()) + " tasks); " + std::to_string(files - differing.size()) +
                       "/" + std::to_string(files) + " artifacts identical; runs took " + fmt(ref.s1) + " s and " +
                       fmt(ref.s2) + " s";
  if (!all_completed) detail += "; some tasks failed";
  for (const auto& d : differing) detail += "; differs: " + d;
  return {!a.empty() && a == b && differing.empty() && all_completed, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Primary acceptance criteria"};
  fs::path config = DBS_REFERENCE_CONFIG;
  fs::path work;
  std::vector<int> only;
  bool keep = false;
  app.add_option("--config", config, "Reference configuration")->check(CLI::ExistingFile);
  app.add_option("--work-dir", work, "Directory for the reference runs (default: a temporary directory)");
  app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 9));
  app.add_flag("--keep", keep, "Keep the reference run outputs");
  CLI11_PARSE(app, argc, argv);

  const bool temporary = work.empty();
  if (temporary) work = fs::temp_directory_path() / ("dbs-acceptance-" + std::to_string(::getpid()));
  fs::create_directories(work);

  const std::set<int> selected(only.begin(), only.end());
  auto wanted = [&](int k) { return selected.empty() || selected.count(k) > 0; };
  std::optional<ReferenceRuns> ref;
  auto reference = [&]() -> const ReferenceRuns& {
    if (!ref) ref = run_reference(config, work);
    return *ref;
  };

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"analytic field accuracy", analytic_field},
      {"static-model polarity invariance", [&] { return static_invariance(reference()); }},
      {"neuron-model polarity sensitivity", [&] { return neuron_polarity(reference()); }},
      {"QS/EQS agreement", [&] { return qs_eqs_agreement(reference()); }},
      {"threshold table fidelity", threshold_table},
      {"axon model physics", axon_physics},
      {"amplitude monotonicity", [&] { return amplitude_monotonicity(reference()); }},
      {"tremor scorer", tremor_scorer},
      {"determinism and reproducibility", [&] { return reproducibility(reference()); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int k = static_cast<int>(i) + 1;
    if (!wanted(k)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << k << "  " << criteria[i].first << "  |  " << o.detail
              << std::endl;
  }
  if (temporary && !keep) fs::remove_all(work);
  return failed == 0 ? 0 : 1;
}
