#include "dbs/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>
#include <thread>

namespace dbs {

using nlohmann::json;

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int worker_count(int requested, std::size_t jobs) {
  int n = requested > 0 ? requested : static_cast<int>(std::thread::hardware_concurrency());
  n = std::max(1, n);
  return static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(n), std::max<std::size_t>(1, jobs)));
}

// Runs job(i) for i in [0, n) on a fixed set of threads. Results are written by
// index, so the outcome does not depend on the schedule.
template <typename Job>
void parallel_for(std::size_t n, int workers, Job job) {
  const int w = worker_count(workers, n);
  if (w <= 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(w));
  for (int t = 0; t < w; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) job(i);
    });
  for (auto& t : pool) t.join();
}

const MrgParameters& axon_parameters(const PipelineOptions& options) {
  if (options.axon_parameters) return *options.axon_parameters;
  static const MrgParameters defaults = MrgParameters::load();
  return defaults;
}

std::vector<FiberTract> damaged_classified(const Scene& scene) {
  std::vector<FiberTract> out;
  out.reserve(scene.tracts.size());
  for (auto tract : scene.tracts) {
    for (auto& f : tract.fibers) f.status = FiberStatus::Unknown;
    out.push_back(classify_damaged(std::move(tract), scene.lead, scene.encapsulation_mm));
  }
  return out;
}

json setting_json(const StimulationSetting& s) {
  return {{"label", s.label},
          {"polarity", s.polarity.to_string()},
          {"amplitude_ma", s.amplitude_ma},
          {"frequency_hz", s.frequency_hz},
          {"pulse_width_us", s.pulse_width_us},
          {"shape", std::string(to_string(s.shape))}};
}

json diagnostics_json(const SolverDiagnostics& d) {
  return {{"solves", d.solves},
          {"iterations", d.iterations},
          {"max_iterations", d.max_iterations},
          {"relative_residual", d.relative_residual},
          {"unknowns", d.unknowns},
          {"levels", d.levels}};
}

json report_json(const ActivationReport& r, bool timing) {
  json tracts = json::array();
  for (const auto& t : r.tracts) {
    json statuses = json::array();
    for (auto s : t.statuses) statuses.push_back(std::string(to_string(s)));
    json failures = json::array();
    for (const auto& f : t.failures) failures.push_back({{"fiber", f.fiber}, {"message", f.message}});
    tracts.push_back({{"name", t.name},
                      {"fibers", t.statuses.size()},
                      {"activated", t.activated},
                      {"non_activated", t.non_activated},
                      {"damaged", t.damaged},
                      {"failed", t.failed},
                      {"percentage", t.percentage},
                      {"statuses", statuses},
                      {"failures", failures}});
  }
  json doc = {{"setting", setting_json(r.setting)},
              {"model", std::string(to_string(r.model))},
              {"denominator", std::string(to_string(r.denominator))},
              {"tracts", tracts},
              {"solver", diagnostics_json(r.solver)}};
  doc["threshold_v_per_m"] = r.threshold_v_per_m ? json(*r.threshold_v_per_m) : json(nullptr);
  if (timing) doc["wall_time_s"] = r.wall_time_s;
  return doc;
}

std::string fixed(double v, int digits = 2) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

// Column-aligned rendering of a header and rows of cells.
std::string aligned(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (width.size() <= c) width.push_back(0);
      width[c] = std::max(width[c], r[c].size());
    }
  std::ostringstream out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t c = 0; c < rows[i].size(); ++c) {
      if (c) out << "  ";
      out << std::left << std::setw(static_cast<int>(width[c])) << rows[i][c];
    }
    out << '\n';
    if (i == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w;
      out << std::string(total + 2 * (width.size() - 1), '-') << '\n';
    }
  }
  return out.str();
}

bool same_statuses(const ActivationReport& a, const ActivationReport& b) {
  if (a.tracts.size() != b.tracts.size()) return false;
  for (std::size_t i = 0; i < a.tracts.size(); ++i)
    if (a.tracts[i].statuses != b.tracts[i].statuses || a.tracts[i].percentage != b.tracts[i].percentage) return false;
  return true;
}

}  // namespace

std::string_view to_string(ModelKind m) {
  switch (m) {
    case ModelKind::Static: return "static";
    case ModelKind::NeuronQs: return "neuron-QS";
    case ModelKind::NeuronEqs: return "neuron-EQS";
  }
  return "static";
}

ModelKind parse_model(std::string_view name) {
  const auto n = lower(name);
  if (n == "static") return ModelKind::Static;
  if (n == "neuron-qs" || n == "neuron_qs") return ModelKind::NeuronQs;
  if (n == "neuron-eqs" || n == "neuron_eqs") return ModelKind::NeuronEqs;
  throw InvalidInput("unknown model '" + std::string(name) + "' (expected static, neuron-QS or neuron-EQS)");
}

std::string_view to_string(ThresholdFallback f) {
  switch (f) {
    case ThresholdFallback::Error: return "error";
    case ThresholdFallback::Extrapolate: return "extrapolate";
    case ThresholdFallback::GenericDefault: return "generic";
  }
  return "generic";
}

ThresholdFallback parse_threshold_fallback(std::string_view name) {
  if (name == "error") return ThresholdFallback::Error;
  if (name == "extrapolate") return ThresholdFallback::Extrapolate;
  if (name == "generic") return ThresholdFallback::GenericDefault;
  throw InvalidInput("unknown threshold fallback '" + std::string(name) + "'");
}

Scene make_scene(std::string name, LeadGeometry lead, VoxelGrid grid, double encapsulation_mm,
                 std::vector<FiberTract> tracts, const SolverOptions& solver) {
  if (tracts.empty()) throw InvalidInput("scene '" + name + "' has no fiber tracts");
  std::set<std::string> names;
  for (const auto& t : tracts) {
    if (t.fibers.empty()) throw InvalidInput("tract '" + t.name + "' has no fibers");
    if (!names.insert(t.name).second) throw InvalidInput("duplicate tract name '" + t.name + "'");
    for (const auto& f : t.fibers) validate_fiber(f);
  }
  auto g = std::make_shared<const VoxelGrid>(std::move(grid));
  auto cache = std::make_shared<FieldCache>(g, solver);
  return Scene{std::move(name), std::move(lead), std::move(g), encapsulation_mm, std::move(tracts), std::move(cache)};
}

double static_threshold(const PipelineOptions& options, double pulse_width_us, double fiber_d_um) {
  const double d = options.static_diameter_um.value_or(fiber_d_um);
  const auto& table = options.thresholds;
  if (table.in_hull(pulse_width_us, d)) return table.threshold_for(pulse_width_us, d);
  switch (options.fallback) {
    case ThresholdFallback::Extrapolate: return table.threshold_for(pulse_width_us, d, true);
    case ThresholdFallback::GenericDefault: return table.generic_default();
    case ThresholdFallback::Error: break;
  }
  return table.threshold_for(pulse_width_us, d);  // throws with the hull in the message
}

const TractReport& ActivationReport::tract(std::string_view name) const {
  for (const auto& t : tracts)
    if (t.name == name) return t;
  throw InvalidInput("report has no tract '" + std::string(name) + "'");
}

TractReport summarize_tract(const FiberTract& tract, DenominatorRule rule, std::vector<FiberFailure> failures) {
  TractReport r;
  r.name = tract.name;
  r.statuses.reserve(tract.fibers.size());
  for (const auto& f : tract.fibers) r.statuses.push_back(f.status);
  r.activated = tract.count(FiberStatus::Activated);
  r.non_activated = tract.count(FiberStatus::NonActivated);
  r.damaged = tract.count(FiberStatus::Damaged);
  r.failed = tract.count(FiberStatus::Failed);
  r.percentage = activation_percentage(tract, rule);
  r.failures = std::move(failures);
  return r;
}

ActivationReport run_static(const Scene& scene, const StimulationSetting& setting, const PipelineOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  setting.validate();
  ActivationReport report;
  report.setting = setting;
  report.model = ModelKind::Static;
  report.denominator = options.denominator;

  const QsSolution qs = scene.cache->solve_qs(setting);
  report.solver = qs.diagnostics();
  const auto magnitude = [&](const Vec3& p) { return field_at(qs, p).magnitude; };

  std::set<double> used;
  for (auto tract : damaged_classified(scene)) {
    // One threshold per fiber; fibers sharing a diameter share the lookup.
    for (auto& f : tract.fibers) {
      if (f.status == FiberStatus::Damaged) continue;
      const double th = static_threshold(options, setting.pulse_width_us, f.diameter_um);
      used.insert(th);
      FiberTract one{tract.name, {f}};
      f.status = activated_fibers_static(magnitude, *scene.grid, std::move(one), th).fibers.front().status;
    }
    report.tracts.push_back(summarize_tract(tract, options.denominator));
  }
  if (used.size() == 1) report.threshold_v_per_m = *used.begin();
  else if (used.empty()) report.threshold_v_per_m = static_threshold(options, setting.pulse_width_us, 5.7);
  report.wall_time_s = seconds_since(t0);
  return report;
}

ActivationReport run_neuron(const Scene& scene, const StimulationSetting& setting, ModelKind formulation,
                            const PipelineOptions& options) {
  if (formulation == ModelKind::Static) throw InvalidInput("run_neuron needs the neuron-QS or neuron-EQS formulation");
  const auto t0 = std::chrono::steady_clock::now();
  setting.validate();
  ActivationReport report;
  report.setting = setting;
  report.model = formulation;
  report.denominator = options.denominator;

  const PulseTrain train(setting);
  const TimeGrid time = make_time_grid(setting.frequency_hz, options.dt_max_us, options.settle_ms, options.periods);
  const MrgParameters& params = axon_parameters(options);

  std::optional<QsSolution> qs;
  std::vector<EqsSolution> eqs;
  if (formulation == ModelKind::NeuronQs) {
    qs = scene.cache->solve_qs(setting);
    report.solver = qs->diagnostics();
  } else {
    eqs = scene.cache->solve_eqs(setting, fourier_decompose(train, options.harmonics), options.eqs);
    // Harmonics in one band share a solve; count each distinct unit field once.
    std::set<const void*> seen;
    for (const auto& h : eqs)
      if (seen.insert(h.unit_ptr().get()).second) report.solver.merge(h.diagnostics());
  }

  for (auto tract : damaged_classified(scene)) {
    std::vector<std::string> errors(tract.fibers.size());
    parallel_for(tract.fibers.size(), options.workers, [&](std::size_t i) {
      Fiber& f = tract.fibers[i];
      if (f.status == FiberStatus::Damaged) return;
      try {
        const AxonModel axon = build_axon(f, params);
        const ExtracellularDrive drive = qs ? extracellular_drive(axon, *qs, train, time)
                                            : extracellular_drive(axon, eqs, setting.frequency_hz, time);
        const SpikeRecord record = simulate(axon, drive, options.simulation);
        f.status = is_activated(record, train) ? FiberStatus::Activated : FiberStatus::NonActivated;
      } catch (const Error& e) {
        f.status = FiberStatus::Failed;
        errors[i] = e.what();
      }
    });
    std::vector<FiberFailure> failures;
    for (std::size_t i = 0; i < errors.size(); ++i)
      if (tract.fibers[i].status == FiberStatus::Failed) failures.push_back({i, errors[i]});
    report.tracts.push_back(summarize_tract(tract, options.denominator, std::move(failures)));
  }
  report.wall_time_s = seconds_since(t0);
  return report;
}

ActivationReport run_model(const Scene& scene, const StimulationSetting& setting, ModelKind model,
                           const PipelineOptions& options) {
  return model == ModelKind::Static ? run_static(scene, setting, options) : run_neuron(scene, setting, model, options);
}

std::string report_to_json(const ActivationReport& report, bool include_timing) {
  return report_json(report, include_timing).dump(2) + '\n';
}

ActivationReport report_from_json(std::string_view text) {
  try {
    const json doc = json::parse(text);
    ActivationReport r;
    const auto& s = doc.at("setting");
    r.setting.label = s.at("label").get<std::string>();
    r.setting.polarity = Polarity::parse(s.at("polarity").get<std::string>());
    r.setting.amplitude_ma = s.at("amplitude_ma").get<double>();
    r.setting.frequency_hz = s.at("frequency_hz").get<double>();
    r.setting.pulse_width_us = s.at("pulse_width_us").get<double>();
    r.setting.shape = parse_pulse_shape(s.at("shape").get<std::string>());
    r.model = parse_model(doc.at("model").get<std::string>());
    r.denominator = parse_denominator_rule(doc.at("denominator").get<std::string>());
    if (!doc.at("threshold_v_per_m").is_null()) r.threshold_v_per_m = doc["threshold_v_per_m"].get<double>();
    for (const auto& t : doc.at("tracts")) {
      TractReport tr;
      tr.name = t.at("name").get<std::string>();
      for (const auto& st : t.at("statuses")) {
        const auto name = st.get<std::string>();
        FiberStatus status = FiberStatus::Unknown;
        for (auto c : {FiberStatus::Activated, FiberStatus::NonActivated, FiberStatus::Damaged, FiberStatus::Failed})
          if (name == to_string(c)) status = c;
        if (status == FiberStatus::Unknown) throw InvalidInput("unknown fiber status '" + name + "'");
        tr.statuses.push_back(status);
      }
      for (const auto& f : t.at("failures")) tr.failures.push_back({f.at("fiber").get<std::size_t>(), f.at("message").get<std::string>()});
      tr.activated = t.at("activated").get<std::size_t>();
      tr.non_activated = t.at("non_activated").get<std::size_t>();
      tr.damaged = t.at("damaged").get<std::size_t>();
      tr.failed = t.at("failed").get<std::size_t>();
      tr.percentage = t.at("percentage").get<double>();
      r.tracts.push_back(std::move(tr));
    }
    const auto& d = doc.at("solver");
    r.solver.solves = d.at("solves").get<int>();
    r.solver.iterations = d.at("iterations").get<int>();
    r.solver.max_iterations = d.at("max_iterations").get<int>();
    r.solver.relative_residual = d.at("relative_residual").get<double>();
    r.solver.unknowns = d.at("unknowns").get<std::size_t>();
    r.solver.levels = d.at("levels").get<int>();
    if (doc.contains("wall_time_s")) r.wall_time_s = doc["wall_time_s"].get<double>();
    return r;
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("malformed activation report: ") + e.what());
  } catch (const ValidationError& e) {
    throw InvalidInput(std::string("malformed activation report: ") + e.what());
  }
}

std::string report_to_text(const ActivationReport& report) {
  std::ostringstream out;
  out << "setting   " << report.setting.label << " (" << report.setting.polarity.to_string() << ", "
      << fixed(report.setting.amplitude_ma) << " mA, " << fixed(report.setting.frequency_hz, 0) << " Hz, "
      << fixed(report.setting.pulse_width_us, 0) << " us)\n";
  out << "model     " << to_string(report.model) << '\n';
  if (report.threshold_v_per_m) out << "threshold " << fixed(*report.threshold_v_per_m, 1) << " V/m\n";
  out << "rule      " << to_string(report.denominator) << "\n\n";
  std::vector<std::vector<std::string>> rows = {{"tract", "fibers", "activated", "damaged", "failed", "activation [%]"}};
  for (const auto& t : report.tracts)
    rows.push_back({t.name, std::to_string(t.statuses.size()), std::to_string(t.activated), std::to_string(t.damaged),
                    std::to_string(t.failed), fixed(t.percentage)});
  out << aligned(rows);
  for (const auto& t : report.tracts)
    for (const auto& f : t.failures) out << "failed: " << t.name << " fiber " << f.fiber << ": " << f.message << '\n';
  return out.str();
}

bool is_polarity_pair(const StimulationSetting& a, const StimulationSetting& b) {
  if (a.polarity.unipolar() || b.polarity.unipolar()) return false;
  auto sorted = [](std::vector<std::string> v) {
    std::sort(v.begin(), v.end());
    return v;
  };
  return sorted(a.polarity.cathodes) == sorted(b.polarity.anodes) &&
         sorted(a.polarity.anodes) == sorted(b.polarity.cathodes) && a.amplitude_ma == b.amplitude_ma &&
         a.frequency_hz == b.frequency_hz && a.pulse_width_us == b.pulse_width_us && a.shape == b.shape;
}

ComparisonTable make_comparison(std::vector<ActivationReport> reports) {
  ComparisonTable table;
  for (const auto& r : reports) {
    if (table.tracts.empty())
      for (const auto& t : r.tracts) table.tracts.push_back(t.name);
    ComparisonRow row{r.setting.label, r.model, {}};
    for (const auto& name : table.tracts) row.percentages.push_back(r.tract(name).percentage);
    table.rows.push_back(std::move(row));
  }
  for (std::size_t i = 0; i < reports.size(); ++i)
    for (std::size_t j = i + 1; j < reports.size(); ++j) {
      const auto& a = reports[i];
      const auto& b = reports[j];
      if (a.model != b.model || !is_polarity_pair(a.setting, b.setting)) continue;
      PolarityPair p{a.setting.label, b.setting.label, a.model, same_statuses(a, b), 0.0, {}};
      for (std::size_t k = 0; k < table.tracts.size(); ++k)
        p.max_difference = std::max(p.max_difference, std::abs(table.rows[i].percentages[k] - table.rows[j].percentages[k]));
      if (a.model == ModelKind::Static) p.annotation = p.identical ? "identical (expected)" : "differs (unexpected)";
      else p.annotation = p.identical ? "identical" : "differs by up to " + fixed(p.max_difference) + " points";
      table.pairs.push_back(std::move(p));
    }
  table.reports = std::move(reports);
  return table;
}

ComparisonTable compare_settings(const Scene& scene, const std::vector<StimulationSetting>& settings,
                                 const std::vector<ModelKind>& models, const PipelineOptions& options) {
  if (settings.empty()) throw InvalidInput("no settings to compare");
  if (models.empty()) throw InvalidInput("no models to compare");
  std::set<std::string> labels;
  for (const auto& s : settings)
    if (!labels.insert(s.label).second) throw InvalidInput("duplicate setting label '" + s.label + "'");
  std::vector<ActivationReport> reports;
  for (auto m : models)
    for (const auto& s : settings) reports.push_back(run_model(scene, s, m, options));
  return make_comparison(std::move(reports));
}

std::string table_to_csv(const ComparisonTable& table) {
  auto quote = [](const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + '"';
  };
  std::ostringstream out;
  out << "model,setting";
  for (const auto& t : table.tracts) out << ',' << quote(t + " [%]");
  out << '\n';
  for (const auto& r : table.rows) {
    out << to_string(r.model) << ',' << quote(r.label);
    for (double p : r.percentages) out << ',' << fixed(p);
    out << '\n';
  }
  return out.str();
}

std::string table_to_text(const ComparisonTable& table) {
  std::vector<std::vector<std::string>> rows = {{"model", "setting"}};
  for (const auto& t : table.tracts) rows[0].push_back(t + " [%]");
  for (const auto& r : table.rows) {
    std::vector<std::string> cells = {std::string(to_string(r.model)), r.label};
    for (double p : r.percentages) cells.push_back(fixed(p));
    rows.push_back(std::move(cells));
  }
  std::string out = aligned(rows);
  if (!table.pairs.empty()) {
    out += "\npolarity pairs\n";
    for (const auto& p : table.pairs)
      out += "  " + std::string(to_string(p.model)) + ": " + p.first + " / " + p.second + ": " + p.annotation + '\n';
  }
  return out;
}

std::string table_to_json(const ComparisonTable& table) {
  json rows = json::array();
  for (const auto& r : table.rows) {
    json pct = json::object();
    for (std::size_t k = 0; k < table.tracts.size(); ++k) pct[table.tracts[k]] = r.percentages[k];
    rows.push_back({{"setting", r.label}, {"model", std::string(to_string(r.model))}, {"percentages", pct}});
  }
  json pairs = json::array();
  for (const auto& p : table.pairs)
    pairs.push_back({{"settings", {p.first, p.second}},
                     {"model", std::string(to_string(p.model))},
                     {"identical", p.identical},
                     {"max_difference", p.max_difference},
                     {"annotation", p.annotation}});
  json doc = {{"tracts", table.tracts}, {"rows", rows}, {"polarity_pairs", pairs}};
  return doc.dump(2) + '\n';
}

}  // namespace dbs
