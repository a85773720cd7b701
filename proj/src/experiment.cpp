#include "dbs/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>

namespace dbs {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes through a temporary file so a crash never leaves a truncated artifact.
Artifact write_artifact(const fs::path& root, const std::string& relative, const std::string& text) {
  const fs::path path = root / relative;
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw InvalidInput("cannot write " + tmp.string());
    out << text;
  }
  fs::rename(tmp, path);
  return {relative, sha256_hex(text)};
}

bool artifacts_intact(const fs::path& root, const std::vector<Artifact>& artifacts) {
  for (const auto& a : artifacts) {
    const fs::path p = root / a.path;
    if (!fs::is_regular_file(p) || file_sha256(p) != a.sha256) return false;
  }
  return !artifacts.empty();
}

std::string_view kind_name(TaskKind k) { return k == TaskKind::Activation ? "activation" : "tremor"; }

TaskKind parse_kind(const std::string& s) {
  if (s == "activation") return TaskKind::Activation;
  if (s == "tremor") return TaskKind::Tremor;
  throw InvalidInput("unknown task kind '" + s + "'");
}

json artifacts_json(const std::vector<Artifact>& artifacts) {
  json out = json::array();
  for (const auto& a : artifacts) out.push_back({{"path", a.path}, {"sha256", a.sha256}});
  return out;
}

std::vector<Artifact> artifacts_from(const json& doc) {
  std::vector<Artifact> out;
  for (const auto& a : doc) out.push_back({a.at("path").get<std::string>(), a.at("sha256").get<std::string>()});
  return out;
}

std::string file_hash_or_empty(const fs::path& p) { return p.empty() ? std::string() : file_sha256(p); }

// Hash of everything a task's output depends on.
std::string task_input_hash(const ExperimentConfig& c, const Task& task) {
  json doc;
  doc["task"] = task.id;
  if (task.kind == TaskKind::Activation) {
    doc["scene"] = scene_descriptor_to_json(c.scene);
    doc["scene_volume"] = file_hash_or_empty(c.scene.volume_path);
    json tracts = json::array();
    for (const auto& p : c.tract_paths) tracts.push_back(file_sha256(p));
    doc["tracts"] = tracts;
    doc["setting"] = setting_to_json(c.settings[task.index]);
    doc["model"] = std::string(to_string(task.model));
    doc["pipeline"] = pipeline_options_to_json(c.pipeline);
    doc["solver"] = {{"tolerance", c.solver.tolerance}, {"max_iterations", c.solver.max_iterations}};
    if (task.model != ModelKind::Static)
      doc["axon"] = c.pipeline.axon_parameters ? json(c.pipeline.axon_parameters->name)
                                               : json(file_sha256(MrgParameters::default_path()));
  } else {
    const auto& ref = c.tremor[task.index];
    doc["setting"] = ref.setting;
    doc["recording"] = file_sha256(ref.recording);
    doc["options"] = tremor_options_to_json(c.tremor_options);
  }
  return sha256_hex(canonical_json(doc));
}

std::string fixed(double v, int digits = 2) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

// Tremor score per setting joined with every activation percentage.
std::string tremor_activation_csv(const ExperimentConfig& c, const std::map<std::string, double>& scores,
                                  const ComparisonTable& table) {
  std::ostringstream out;
  out << "setting,tremor_score";
  std::vector<std::pair<ModelKind, std::string>> columns;
  for (auto m : c.models)
    for (const auto& t : table.tracts) {
      columns.emplace_back(m, t);
      out << ',' << to_string(m) << ' ' << t << " [%]";
    }
  out << '\n';
  for (const auto& ref : c.tremor) {
    const auto it = scores.find(ref.setting + "\n" + ref.recording.filename().string());
    if (it == scores.end()) continue;
    out << '"' << ref.setting << "\"," << fixed(it->second);
    for (const auto& [m, t] : columns) {
      out << ',';
      for (std::size_t i = 0; i < table.rows.size(); ++i)
        if (table.rows[i].model == m && table.rows[i].label == ref.setting) {
          const auto& tracts = table.tracts;
          const auto k = static_cast<std::size_t>(std::find(tracts.begin(), tracts.end(), t) - tracts.begin());
          out << fixed(table.rows[i].percentages[k]);
        }
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace

bool RunManifest::ok() const {
  return std::all_of(tasks.begin(), tasks.end(), [](const TaskRecord& t) { return t.status == "completed"; });
}

std::size_t RunManifest::reused() const {
  return static_cast<std::size_t>(std::count_if(tasks.begin(), tasks.end(), [](const TaskRecord& t) { return t.reused; }));
}

const TaskRecord& RunManifest::task(std::string_view id) const {
  for (const auto& t : tasks)
    if (t.id == id) return t;
  throw InvalidInput("manifest has no task '" + std::string(id) + "'");
}

std::string manifest_to_json(const RunManifest& m) {
  json tasks = json::array();
  for (const auto& t : m.tasks) {
    json task = {{"id", t.id},
                 {"kind", std::string(kind_name(t.kind))},
                 {"status", t.status},
                 {"input_hash", t.input_hash},
                 {"artifacts", artifacts_json(t.artifacts)}};
    if (!t.error.empty()) task["error"] = t.error;
    tasks.push_back(task);
  }
  json doc = {{"name", m.name},
              {"config_hash", m.config_hash},
              {"scene", artifacts_json({m.scene})[0]},
              {"tasks", tasks},
              {"tables", artifacts_json(m.tables)}};
  return doc.dump(2) + '\n';
}

RunManifest manifest_from_json(std::string_view text) {
  try {
    const json doc = json::parse(text);
    RunManifest m;
    m.name = doc.at("name").get<std::string>();
    m.config_hash = doc.at("config_hash").get<std::string>();
    m.scene = artifacts_from(json::array({doc.at("scene")})).front();
    for (const auto& t : doc.at("tasks")) {
      TaskRecord r;
      r.id = t.at("id").get<std::string>();
      r.kind = parse_kind(t.at("kind").get<std::string>());
      r.status = t.at("status").get<std::string>();
      r.input_hash = t.at("input_hash").get<std::string>();
      r.artifacts = artifacts_from(t.at("artifacts"));
      if (t.contains("error")) r.error = t["error"].get<std::string>();
      m.tasks.push_back(std::move(r));
    }
    m.tables = artifacts_from(doc.at("tables"));
    return m;
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("malformed manifest: ") + e.what());
  }
}

RunManifest load_manifest(const fs::path& path) { return manifest_from_json(read_text(path)); }

json tremor_result_to_json(const TremorReference& ref, const TremorModel& model) {
  json P = json::array();
  for (Eigen::Index i = 0; i < model.P.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < model.P.cols(); ++j) row.push_back(model.P(i, j));
    P.push_back(row);
  }
  auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  return {{"setting", ref.setting},
          {"recording", ref.recording.filename().string()},
          {"radii_mm", model.radii},
          {"states", model.states},
          {"transition_matrix", P},
          {"stationary", vec(model.pi)},
          {"occupancy", vec(model.histogram)},
          {"score", model.score}};
}

std::string artifact_stem(std::size_t index, const std::string& label) {
  std::ostringstream out;
  out << std::setw(2) << std::setfill('0') << index + 1 << '_';
  bool gap = false;
  for (char ch : label) {
    const auto c = static_cast<unsigned char>(ch);
    std::string piece;
    if (std::isalnum(c)) piece = std::string(1, ch);
    else if (ch == '-') piece = "m";
    else if (ch == '+') piece = "p";
    else if (ch == '.') piece = "d";
    else if (ch == '@') piece = "at";
    if (piece.empty()) {
      gap = true;
      continue;
    }
    if (gap) out << '_';
    gap = false;
    out << piece;
  }
  return out.str();
}

RunManifest run_experiment(const ExperimentConfig& c, const ProgressFn& progress) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path root = c.output_dir;
  fs::create_directories(root);
  auto say = [&](const std::string& s) {
    if (progress) progress(s);
  };

  // Previous manifest, for skipping unchanged tasks.
  std::map<std::string, TaskRecord> previous;
  if (fs::is_regular_file(root / "manifest.json")) {
    try {
      for (auto& t : load_manifest(root / "manifest.json").tasks) previous.emplace(t.id, std::move(t));
    } catch (const InvalidInput&) {
      // an unreadable manifest only means nothing is reused
    }
  }

  RunManifest manifest;
  manifest.name = c.name;
  manifest.config_hash = c.hash;

  std::optional<Scene> scene;
  auto get_scene = [&]() -> const Scene& {
    if (!scene) {
      say("building scene '" + c.scene.name + "'");
      scene = build_scene(c.scene, c.load_tracts(), c.solver);
    }
    return *scene;
  };
  manifest.scene = write_artifact(root, "scene/summary.json", scene_summary(get_scene()).dump(2) + '\n');

  std::vector<ActivationReport> reports;
  std::map<std::string, double> scores;
  for (const Task& task : c.tasks()) {
    const auto ts = std::chrono::steady_clock::now();
    TaskRecord rec;
    rec.id = task.id;
    rec.kind = task.kind;
    try {
      rec.input_hash = task_input_hash(c, task);
      const auto prev = previous.find(task.id);
      const bool reusable = prev != previous.end() && prev->second.status == "completed" &&
                            prev->second.input_hash == rec.input_hash && artifacts_intact(root, prev->second.artifacts);
      if (task.kind == TaskKind::Activation) {
        const auto& setting = c.settings[task.index];
        const std::string base = "reports/" + std::string(to_string(task.model)) + "/" + artifact_stem(task.index, setting.label);
        ActivationReport report;
        if (reusable) {
          rec.artifacts = prev->second.artifacts;
          rec.reused = true;
          report = report_from_json(read_text(root / rec.artifacts.front().path));
          say("reused " + task.id);
        } else {
          say("running " + task.id);
          report = run_model(get_scene(), setting, task.model, c.pipeline);
          rec.artifacts.push_back(write_artifact(root, base + ".json", report_to_json(report)));
          rec.artifacts.push_back(write_artifact(root, base + ".txt", report_to_text(report)));
        }
        reports.push_back(std::move(report));
      } else {
        const auto& ref = c.tremor[task.index];
        const std::string rel = "tremor/" + artifact_stem(task.index, ref.setting) + ".json";
        double score = 0.0;
        if (reusable) {
          rec.artifacts = prev->second.artifacts;
          rec.reused = true;
          score = json::parse(read_text(root / rec.artifacts.front().path)).at("score").get<double>();
          say("reused " + task.id);
        } else {
          say("running " + task.id);
          const TremorModel model = score_recording(load_recording(ref.recording), c.tremor_options);
          score = model.score;
          rec.artifacts.push_back(write_artifact(root, rel, tremor_result_to_json(ref, model).dump(2) + '\n'));
        }
        scores[ref.setting + "\n" + ref.recording.filename().string()] = score;
      }
      rec.status = "completed";
    } catch (const std::exception& e) {
      rec.status = "failed";
      rec.error = e.what();
      rec.artifacts.clear();
      say("failed " + task.id + ": " + e.what());
    }
    rec.seconds = seconds_since(ts);
    manifest.tasks.push_back(std::move(rec));
  }

  if (!reports.empty()) {
    const ComparisonTable table = make_comparison(std::move(reports));
    manifest.tables.push_back(write_artifact(root, "tables/comparison.csv", table_to_csv(table)));
    manifest.tables.push_back(write_artifact(root, "tables/comparison.json", table_to_json(table)));
    manifest.tables.push_back(write_artifact(root, "tables/comparison.txt", table_to_text(table)));
    if (!scores.empty())
      manifest.tables.push_back(
          write_artifact(root, "tables/tremor_activation.csv", tremor_activation_csv(c, scores, table)));
  }

  manifest.seconds = seconds_since(t0);
  write_artifact(root, "manifest.json", manifest_to_json(manifest));
  json timings = json::array();
  for (const auto& t : manifest.tasks) timings.push_back({{"id", t.id}, {"seconds", t.seconds}, {"reused", t.reused}});
  write_artifact(root, "timings.json", json({{"tasks", timings}, {"total_seconds", manifest.seconds}}).dump(2) + '\n');
  return manifest;
}

ComparisonTable comparison_from_manifest(const fs::path& manifest_path) {
  const RunManifest m = load_manifest(manifest_path);
  const fs::path root = manifest_path.parent_path();
  std::vector<ActivationReport> reports;
  for (const auto& t : m.tasks) {
    if (t.kind != TaskKind::Activation || t.status != "completed") continue;
    for (const auto& a : t.artifacts)
      if (a.path.size() > 5 && a.path.compare(a.path.size() - 5, 5, ".json") == 0)
        reports.push_back(report_from_json(read_text(root / a.path)));
  }
  if (reports.empty()) throw InvalidInput("manifest lists no completed activation reports");
  return make_comparison(std::move(reports));
}

namespace {

// Uniform in [0, 1) from the raw generator output, identical on every platform.
double unit(std::mt19937& gen) { return static_cast<double>(gen()) / 4294967296.0; }

FiberTract demo_tract(const std::string& name, double z0, double x_lo, double x_hi, double side, int count,
                      double half_length, std::mt19937& gen) {
  FiberTract t{name, {}};
  for (int i = 0; i < count; ++i) {
    const double x0 = side * (x_lo + (x_hi - x_lo) * (i + 0.5 * unit(gen)) / count);
    const double z = z0 + 2.0 * (unit(gen) - 0.5);
    const double phase = 2.0 * kPi * unit(gen);
    const double tilt = 0.1 * (unit(gen) - 0.5);
    Fiber f;
    f.diameter_um = 5.7;
    for (double y = -half_length; y <= half_length + 1e-9; y += 1.0)
      f.points.emplace_back(x0 + 0.3 * std::sin(y / 6.0 + phase) + tilt * y, y, z + 0.2 * std::cos(y / 5.0 + phase));
    t.fibers.push_back(std::move(f));
  }
  return t;
}

}  // namespace

fs::path generate_demo(const fs::path& dir, const DemoOptions& o) {
  fs::create_directories(dir / "tracts");
  fs::create_directories(dir / "tremor");
  std::mt19937 gen(o.seed);

  // Gray matter around the lead, white matter on the x < -1 mm side and a
  // CSF-filled cavity well away from the contacts.
  SceneDescriptor scene;
  scene.name = "demo-hemisphere";
  scene.grid.resolution = o.resolution;
  scene.grid.box_size = o.box_size;
  scene.grid.boundary = BoundaryCondition::Grounded;
  scene.tissue.kind = TissueLayout::Kind::Shapes;
  scene.tissue.background = Tissue::GM;
  scene.tissue.shapes.push_back({TissueShape::Kind::Slab, Tissue::WM, Vec3(-100, -100, -100), Vec3(-1, 100, 100)});
  scene.tissue.shapes.push_back({TissueShape::Kind::Ellipsoid, Tissue::CSF, Vec3(0.3 * o.box_size, 0, 5), Vec3(3, 6, 4)});
  {
    std::ofstream out(dir / "scene.json");
    out << scene_descriptor_to_json(scene).dump(2) << '\n';
  }

  // Two tracts on opposite sides of the shaft: one level with C2, one level with C4.
  save_fiber_tract(demo_tract("dDRTT", 3.75, 0.4, 7.0, 1.0, o.fibers_per_tract, o.fiber_half_length, gen),
                   dir / "tracts" / "dDRTT.json");
  save_fiber_tract(demo_tract("ndDRTT", 7.75, 0.4, 7.0, -1.0, o.fibers_per_tract, o.fiber_half_length, gen),
                   dir / "tracts" / "ndDRTT.json");

  // Settings: a C3/C4 pair at 1.2 mA, 140 Hz, 90 us and a C2/C4 pair at
  // 4 mA, 184 Hz, 50 us, plus the reduced-amplitude variant.
  auto setting = [](std::string label, std::string polarity, double amp, double freq, double pw) {
    StimulationSetting s;
    s.label = std::move(label);
    s.polarity = Polarity::parse(polarity);
    s.amplitude_ma = amp;
    s.frequency_hz = freq;
    s.pulse_width_us = pw;
    return s;
  };
  const std::vector<StimulationSetting> settings = {
      setting("C3-,C4+", "C3-,C4+", 1.2, 140.0, 90.0), setting("C4-,C3+", "C4-,C3+", 1.2, 140.0, 90.0),
      setting("C2-,C4+", "C2-,C4+", 4.0, 184.0, 50.0), setting("C4-,C2+", "C4-,C2+", 4.0, 184.0, 50.0),
      setting("C4-,C2+ @1.6mA", "C4-,C2+", 1.6, 184.0, 50.0)};

  // Tremor recordings: three 6 s lifts each, displacement amplitude slowly
  // modulated around a per-setting level.
  const fs::path path = o.config_path.empty() ? dir / "reference.json" : o.config_path;
  fs::create_directories(fs::absolute(path).parent_path());
  const fs::path config_dir = fs::absolute(path).parent_path();
  auto ref = [&](const std::string& file) { return fs::relative(fs::absolute(dir) / file, config_dir).generic_string(); };

  const double fs_hz = 100.0;
  const std::vector<std::pair<std::string, double>> tremor = {
      {"None", 6.0}, {"C3-,C4+", 3.0}, {"C2-,C4+", 1.2}, {"C4-,C2+ @1.6mA", 2.2}};
  json tremor_refs = json::array();
  for (std::size_t i = 0; i < tremor.size(); ++i) {
    const auto& [label, level] = tremor[i];
    const double phase = 2.0 * kPi * unit(gen);
    auto rec = synthetic_tremor(
        fs_hz, o.tremor_duration_s, 5.0, [&](double t) { return level * (1.0 + 0.6 * std::sin(2.0 * kPi * 0.17 * t + phase)); },
        Vec3(1.0, 0.4, 0.2).normalized(), 0.05, o.seed + static_cast<unsigned>(i));
    rec.lift.assign(rec.size(), 0);
    const double lift_s = (o.tremor_duration_s - 2.0) / 3.0;
    for (int k = 0; k < 3; ++k) {
      const auto b = static_cast<std::size_t>((0.5 + k * (lift_s + 0.5)) * fs_hz);
      const auto e = std::min(rec.size(), b + static_cast<std::size_t>(lift_s * fs_hz));
      for (std::size_t n = b; n < e; ++n) rec.lift[n] = k + 1;
    }
    const std::string file = "tremor/" + artifact_stem(i, label) + ".csv";
    save_recording(rec, dir / file);
    tremor_refs.push_back({{"setting", label}, {"recording", ref(file)}});
  }

  json setting_docs = json::array();
  for (const auto& s : settings) setting_docs.push_back(setting_to_json(s));
  json config = {{"name", "reference"},
                 {"scene", ref("scene.json")},
                 {"tracts", {ref("tracts/dDRTT.json"), ref("tracts/ndDRTT.json")}},
                 {"settings", setting_docs},
                 {"models", {"static", "neuron-QS", "neuron-EQS"}},
                 {"tremor", tremor_refs},
                 {"output_dir", o.output_dir},
                 {"pipeline", {{"denominator", "all"}, {"harmonics", o.harmonics}}}};
  std::ofstream out(path);
  out << config.dump(2) << '\n';
  return path;
}

}  // namespace dbs
