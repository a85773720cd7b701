#include "dbs/config.hpp"

#include "dbs/volume_io.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace dbs {

using nlohmann::json;
namespace fs = std::filesystem;

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &length, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 computation failed");
  std::ostringstream out;
  for (unsigned int i = 0; i < length; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return out.str();
}

std::string file_sha256(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str());
}

std::string canonical_json(const json& doc) { return doc.dump(); }

namespace {

// Small readers that record a violation instead of throwing, so one pass
// reports every problem in a document.
class Reader {
 public:
  Reader(const json& doc, std::string where, std::vector<std::string>& violations)
      : doc_(doc), where_(std::move(where)), violations_(violations) {
    if (!doc_.is_object()) fail("must be an object");
  }

  bool has(const char* key) const { return doc_.is_object() && doc_.contains(key) && !doc_[key].is_null(); }

  void fail(const std::string& what) const { violations_.push_back(where_ + ": " + what); }
  void fail(const char* key, const std::string& what) const { violations_.push_back(where_ + "." + key + ": " + what); }

  double number(const char* key, double fallback) const {
    if (!has(key)) return fallback;
    if (!doc_[key].is_number()) {
      fail(key, "expected a number");
      return fallback;
    }
    return doc_[key].get<double>();
  }

  int integer(const char* key, int fallback) const {
    if (!has(key)) return fallback;
    if (!doc_[key].is_number_integer()) {
      fail(key, "expected an integer");
      return fallback;
    }
    return doc_[key].get<int>();
  }

  bool boolean(const char* key, bool fallback) const {
    if (!has(key)) return fallback;
    if (!doc_[key].is_boolean()) {
      fail(key, "expected true or false");
      return fallback;
    }
    return doc_[key].get<bool>();
  }

  std::string string(const char* key, const std::string& fallback) const {
    if (!has(key)) return fallback;
    if (!doc_[key].is_string()) {
      fail(key, "expected a string");
      return fallback;
    }
    return doc_[key].get<std::string>();
  }

  Vec3 vec3(const char* key, const Vec3& fallback) const {
    if (!has(key)) return fallback;
    const auto& v = doc_[key];
    if (!v.is_array() || v.size() != 3 || !std::all_of(v.begin(), v.end(), [](const json& x) { return x.is_number(); })) {
      fail(key, "expected three numbers");
      return fallback;
    }
    return {v[0].get<double>(), v[1].get<double>(), v[2].get<double>()};
  }

  std::vector<double> numbers(const char* key, const std::vector<double>& fallback) const {
    if (!has(key)) return fallback;
    const auto& v = doc_[key];
    if (!v.is_array() || !std::all_of(v.begin(), v.end(), [](const json& x) { return x.is_number(); })) {
      fail(key, "expected a list of numbers");
      return fallback;
    }
    return v.get<std::vector<double>>();
  }

  // Parses a named enumeration with `parse`, recording its error message.
  template <typename T, typename Parse>
  T choice(const char* key, T fallback, Parse parse) const {
    if (!has(key)) return fallback;
    try {
      return parse(string(key, ""));
    } catch (const InvalidInput& e) {
      fail(key, e.what());
      return fallback;
    }
  }

  void only(std::initializer_list<const char*> keys) const {
    if (!doc_.is_object()) return;
    for (const auto& [k, _] : doc_.items())
      if (std::none_of(keys.begin(), keys.end(), [&](const char* a) { return k == a; })) fail("unknown key '" + k + "'");
  }

  const json& operator[](const char* key) const { return doc_[key]; }
  const std::string& where() const { return where_; }

 private:
  const json& doc_;
  std::string where_;
  std::vector<std::string>& violations_;
};

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : (base / path).lexically_normal();
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw InvalidInput(path.string() + ": " + e.what());
  }
}

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

void parse_materials(const json& doc, MaterialTable& table, std::vector<std::string>& violations,
                     const std::string& where) {
  if (!doc.is_object()) {
    violations.push_back(where + ": expected an object of tissue -> {sigma, eps_r}");
    return;
  }
  for (const auto& [name, entry] : doc.items()) {
    try {
      const Tissue t = parse_tissue(name);
      Reader r(entry, where + "." + name, violations);
      r.only({"sigma", "eps_r"});
      Material m = table[t];
      m.sigma = r.number("sigma", m.sigma);
      m.eps_r = r.number("eps_r", m.eps_r);
      if (!(m.sigma > 0.0)) r.fail("sigma must be positive");
      if (!(m.eps_r >= 1.0)) r.fail("eps_r must be at least 1");
      table.set(t, m);
    } catch (const InvalidInput& e) {
      violations.push_back(where + ": " + e.what());
    }
  }
}

json materials_json(const MaterialTable& table) {
  json out = json::object();
  for (int i = 0; i < kTissueCount; ++i) {
    const auto t = static_cast<Tissue>(i);
    out[std::string(to_string(t))] = {{"sigma", table[t].sigma}, {"eps_r", table[t].eps_r}};
  }
  return out;
}

}  // namespace

SceneDescriptor parse_scene_descriptor(const json& doc, const fs::path& base, std::vector<std::string>& violations,
                                       const std::string& where) {
  SceneDescriptor s;
  Reader r(doc, where, violations);
  r.only({"name", "lead", "tissue", "grid", "materials"});
  s.name = r.string("name", s.name);

  if (r.has("lead")) {
    Reader l(r["lead"], where + ".lead", violations);
    l.only({"tip", "direction", "orientation", "shaft_radius", "contact_height", "contact_gap", "tip_offset", "length",
            "contacts"});
    auto& d = s.lead;
    d.tip = l.vec3("tip", d.tip);
    d.direction = l.vec3("direction", d.direction);
    d.orientation = l.vec3("orientation", d.orientation);
    d.shaft_radius = l.number("shaft_radius", d.shaft_radius);
    d.contact_height = l.number("contact_height", d.contact_height);
    d.contact_gap = l.number("contact_gap", d.contact_gap);
    d.tip_offset = l.number("tip_offset", d.tip_offset);
    d.length = l.number("length", d.length);
    if (l.has("contacts")) {
      if (!l["contacts"].is_array()) {
        l.fail("contacts", "expected a list");
      } else {
        std::vector<Contact> contacts;
        for (std::size_t i = 0; i < l["contacts"].size(); ++i) {
          Reader c(l["contacts"][i], where + ".lead.contacts[" + std::to_string(i) + "]", violations);
          c.only({"id", "z_lo", "z_hi", "theta_lo", "theta_hi"});
          Contact k;
          k.id = c.string("id", "");
          if (k.id.empty()) c.fail("id", "missing contact id");
          k.z_lo = c.number("z_lo", 0.0);
          k.z_hi = c.number("z_hi", 0.0);
          k.theta_lo = c.number("theta_lo", 0.0);
          k.theta_hi = c.number("theta_hi", 360.0);
          contacts.push_back(k);
        }
        d.contacts = contacts;
      }
    }
  }

  if (r.has("grid")) {
    Reader g(r["grid"], where + ".grid", violations);
    g.only({"resolution", "box_size", "box_center", "padding", "encapsulation", "boundary"});
    auto& spec = s.grid;
    spec.resolution = g.number("resolution", spec.resolution);
    spec.box_size = g.number("box_size", spec.box_size);
    if (g.has("box_center")) spec.box_center = g.vec3("box_center", Vec3::Zero());
    spec.padding = g.number("padding", spec.padding);
    spec.encapsulation = g.number("encapsulation", spec.encapsulation);
    spec.boundary = g.choice("boundary", spec.boundary, [](const std::string& v) { return parse_boundary(v); });
    if (!(spec.resolution > 0.0 && spec.resolution <= 0.5)) g.fail("resolution", "must be in (0, 0.5] mm");
    if (!(spec.box_size > 0.0)) g.fail("box_size", "must be positive");
    if (!(spec.encapsulation >= 0.0)) g.fail("encapsulation", "must be non-negative");
  }

  if (r.has("tissue")) {
    Reader t(r["tissue"], where + ".tissue", violations);
    t.only({"kind", "background", "shapes", "volume"});
    auto& layout = s.tissue;
    const std::string kind = t.string("kind", "homogeneous");
    layout.background = t.choice("background", layout.background, [](const std::string& v) { return parse_tissue(v); });
    if (kind == "homogeneous") {
      layout.kind = TissueLayout::Kind::Homogeneous;
    } else if (kind == "shapes") {
      layout.kind = TissueLayout::Kind::Shapes;
      if (!t.has("shapes") || !t["shapes"].is_array()) t.fail("shapes", "expected a list");
      else
        for (std::size_t i = 0; i < t["shapes"].size(); ++i) {
          Reader sh(t["shapes"][i], where + ".tissue.shapes[" + std::to_string(i) + "]", violations);
          sh.only({"kind", "tissue", "min", "max", "center", "semi_axes"});
          TissueShape shape;
          shape.tissue = sh.choice("tissue", Tissue::GM, [](const std::string& v) { return parse_tissue(v); });
          const std::string k = sh.string("kind", "slab");
          if (k == "slab") {
            shape.kind = TissueShape::Kind::Slab;
            shape.a = sh.vec3("min", Vec3::Zero());
            shape.b = sh.vec3("max", Vec3::Zero());
            if (!(shape.a.array() < shape.b.array()).all()) sh.fail("min must be below max on every axis");
          } else if (k == "ellipsoid") {
            shape.kind = TissueShape::Kind::Ellipsoid;
            shape.a = sh.vec3("center", Vec3::Zero());
            shape.b = sh.vec3("semi_axes", Vec3::Ones());
            if (!(shape.b.array() > 0.0).all()) sh.fail("semi_axes", "must be positive");
          } else {
            sh.fail("kind", "expected slab or ellipsoid, got '" + k + "'");
          }
          layout.shapes.push_back(shape);
        }
    } else if (kind == "volume") {
      layout.kind = TissueLayout::Kind::Volume;
      const fs::path path = resolve(base, t.string("volume", ""));
      s.volume_path = path;
      try {
        const Volume v = read_volume(path);
        LabelVolume lv;
        lv.dims = v.header.dims;
        lv.spacing = v.header.spacing;
        lv.origin = v.header.origin;
        lv.labels.reserve(v.values.size());
        for (double x : v.values) lv.labels.push_back(static_cast<std::uint16_t>(x));
        layout.volume = std::move(lv);
      } catch (const InvalidInput& e) {
        t.fail("volume", e.what());
      }
    } else {
      t.fail("kind", "expected homogeneous, shapes or volume, got '" + kind + "'");
    }
  }

  if (r.has("materials")) parse_materials(r["materials"], s.materials, violations, where + ".materials");

  try {
    build_lead(s.lead);
  } catch (const InvalidInput& e) {
    violations.push_back(where + ".lead: " + e.what());
  }
  return s;
}

SceneDescriptor load_scene_descriptor(const fs::path& path) {
  std::vector<std::string> violations;
  auto s = parse_scene_descriptor(read_json_file(path), path.parent_path(), violations, path.filename().string());
  if (!violations.empty()) throw ValidationError(std::move(violations));
  return s;
}

json scene_descriptor_to_json(const SceneDescriptor& s) {
  const auto& d = s.lead;
  json lead = {{"tip", vec_json(d.tip)},
               {"direction", vec_json(d.direction)},
               {"orientation", vec_json(d.orientation)},
               {"shaft_radius", d.shaft_radius},
               {"contact_height", d.contact_height},
               {"contact_gap", d.contact_gap},
               {"tip_offset", d.tip_offset},
               {"length", d.length}};
  if (d.contacts) {
    json contacts = json::array();
    for (const auto& c : *d.contacts)
      contacts.push_back(
          {{"id", c.id}, {"z_lo", c.z_lo}, {"z_hi", c.z_hi}, {"theta_lo", c.theta_lo}, {"theta_hi", c.theta_hi}});
    lead["contacts"] = contacts;
  }
  json grid = {{"resolution", s.grid.resolution},
               {"box_size", s.grid.box_size},
               {"padding", s.grid.padding},
               {"encapsulation", s.grid.encapsulation},
               {"boundary", std::string(to_string(s.grid.boundary))}};
  if (s.grid.box_center) grid["box_center"] = vec_json(*s.grid.box_center);
  json tissue = {{"background", std::string(to_string(s.tissue.background))}};
  if (s.tissue.kind == TissueLayout::Kind::Shapes) {
    tissue["kind"] = "shapes";
    json shapes = json::array();
    for (const auto& sh : s.tissue.shapes) {
      if (sh.kind == TissueShape::Kind::Slab)
        shapes.push_back({{"kind", "slab"}, {"tissue", to_string(sh.tissue)}, {"min", vec_json(sh.a)}, {"max", vec_json(sh.b)}});
      else
        shapes.push_back({{"kind", "ellipsoid"},
                          {"tissue", to_string(sh.tissue)},
                          {"center", vec_json(sh.a)},
                          {"semi_axes", vec_json(sh.b)}});
    }
    tissue["shapes"] = shapes;
  } else if (s.tissue.kind == TissueLayout::Kind::Volume) {
    tissue["kind"] = "volume";
    tissue["volume"] = s.volume_path.string();
  } else {
    tissue["kind"] = "homogeneous";
  }
  return {{"name", s.name}, {"lead", lead}, {"grid", grid}, {"tissue", tissue}, {"materials", materials_json(s.materials)}};
}

Scene build_scene(const SceneDescriptor& d, std::vector<FiberTract> tracts, const SolverOptions& solver) {
  LeadGeometry lead = build_lead(d.lead);
  VoxelGrid grid = voxelize_scene(lead, d.tissue, d.materials, d.grid);
  return make_scene(d.name, std::move(lead), std::move(grid), d.grid.encapsulation, std::move(tracts), solver);
}

json scene_summary(const Scene& scene) {
  json contacts = json::array();
  for (const auto& c : scene.lead.contacts())
    contacts.push_back({{"id", c.id},
                        {"z_lo", c.z_lo},
                        {"z_hi", c.z_hi},
                        {"theta_lo", c.theta_lo},
                        {"theta_hi", c.theta_hi},
                        {"ring", c.is_ring()}});
  const auto& g = *scene.grid;
  json tracts = json::array();
  for (const auto& t : scene.tracts) tracts.push_back({{"name", t.name}, {"fibers", t.fibers.size()}});
  return {{"name", scene.name},
          {"lead",
           {{"tip", vec_json(scene.lead.tip())},
            {"direction", vec_json(scene.lead.direction())},
            {"shaft_radius", scene.lead.shaft_radius()},
            {"length", scene.lead.length()},
            {"contacts", contacts}}},
          {"grid",
           {{"dims", {g.dims()[0], g.dims()[1], g.dims()[2]}},
            {"spacing", g.spacing()},
            {"origin", vec_json(g.origin())},
            {"boundary", std::string(to_string(g.boundary()[0]))}}},
          {"encapsulation_mm", scene.encapsulation_mm},
          {"tracts", tracts}};
}

std::optional<StimulationSetting> parse_setting(const json& doc, std::vector<std::string>& violations,
                                                const std::string& where) {
  const std::size_t before = violations.size();
  Reader r(doc, where, violations);
  if (!doc.is_object()) return std::nullopt;
  r.only({"label", "polarity", "amplitude_ma", "frequency_hz", "pulse_width_us", "shape"});
  StimulationSetting s;
  const std::string polarity = r.string("polarity", "");
  if (polarity.empty()) {
    r.fail("polarity", "missing");
  } else {
    try {
      s.polarity = Polarity::parse(polarity);
    } catch (const ValidationError& e) {
      for (const auto& v : e.violations()) r.fail("polarity", v);
    }
  }
  s.label = r.string("label", polarity);
  s.amplitude_ma = r.number("amplitude_ma", s.amplitude_ma);
  s.frequency_hz = r.number("frequency_hz", s.frequency_hz);
  s.pulse_width_us = r.number("pulse_width_us", s.pulse_width_us);
  s.shape = r.choice("shape", s.shape, [](const std::string& v) { return parse_pulse_shape(v); });
  if (violations.size() > before) return std::nullopt;
  for (const auto& v : s.violations()) r.fail(v);
  if (violations.size() > before) return std::nullopt;
  return s;
}

json setting_to_json(const StimulationSetting& s) {
  return {{"label", s.label},
          {"polarity", s.polarity.to_string()},
          {"amplitude_ma", s.amplitude_ma},
          {"frequency_hz", s.frequency_hz},
          {"pulse_width_us", s.pulse_width_us},
          {"shape", std::string(to_string(s.shape))}};
}

json pipeline_options_to_json(const PipelineOptions& o) {
  json knots = json::array();
  for (const auto& k : o.thresholds.knots()) knots.push_back({{"pw_us", k.pw_us}, {"diam_um", k.diam_um}, {"e_vm", k.e_vm}});
  return {{"thresholds", knots},
          {"generic_threshold", o.thresholds.generic_default()},
          {"static_diameter_um", o.static_diameter_um ? json(*o.static_diameter_um) : json(nullptr)},
          {"threshold_fallback", std::string(to_string(o.fallback))},
          {"denominator", std::string(to_string(o.denominator))},
          {"harmonics", o.harmonics},
          {"octave_bands", o.eqs.octave_bands},
          {"band_base_hz", o.eqs.band_base_hz},
          {"dt_max_us", o.dt_max_us},
          {"settle_ms", o.settle_ms},
          {"periods", o.periods},
          {"arm_mv", o.simulation.arm_mv},
          {"detect_mv", o.simulation.detect_mv}};
}

json tremor_options_to_json(const TremorOptions& o) {
  return {{"band_hz", {o.band.lo_hz, o.band.hi_hz}}, {"window_s", o.window_s}, {"radii", o.radii}};
}

std::vector<std::string> unknown_contacts(const Polarity& polarity, const LeadGeometry& lead) {
  std::vector<std::string> out;
  for (const auto* list : {&polarity.cathodes, &polarity.anodes})
    for (const auto& id : *list)
      if (lead.resolve(id).empty()) out.push_back(id);
  return out;
}

std::vector<Task> ExperimentConfig::tasks() const {
  std::vector<Task> out;
  for (auto m : models)
    for (std::size_t i = 0; i < settings.size(); ++i)
      out.push_back({"activation/" + std::string(to_string(m)) + "/" + settings[i].label, TaskKind::Activation, i, m});
  for (std::size_t i = 0; i < tremor.size(); ++i)
    out.push_back({"tremor/" + tremor[i].setting + "/" + tremor[i].recording.filename().string(), TaskKind::Tremor, i,
                   ModelKind::Static});
  return out;
}

std::size_t ExperimentConfig::setting_index(std::string_view label) const {
  for (std::size_t i = 0; i < settings.size(); ++i)
    if (settings[i].label == label) return i;
  throw InvalidInput("no setting labelled '" + std::string(label) + "'");
}

std::vector<FiberTract> ExperimentConfig::load_tracts() const {
  std::vector<FiberTract> out;
  for (const auto& p : tract_paths) out.push_back(load_fiber_tract(p));
  return out;
}

ExperimentConfig parse_config(const json& doc, const fs::path& base) {
  std::vector<std::string> violations;
  ExperimentConfig c;
  c.hash = sha256_hex(canonical_json(doc));
  Reader r(doc, "config", violations);
  if (!doc.is_object()) throw ValidationError(std::move(violations));
  r.only({"name", "scene", "tracts", "settings", "models", "tremor", "output_dir", "pipeline", "tremor_options",
          "solver"});
  c.name = r.string("name", "experiment");

  // Scene: a file reference or an inline descriptor.
  std::optional<LeadGeometry> lead;
  if (!r.has("scene")) {
    r.fail("scene", "missing scene descriptor");
  } else if (r["scene"].is_string()) {
    c.scene_path = resolve(base, r["scene"].get<std::string>());
    try {
      c.scene = parse_scene_descriptor(read_json_file(c.scene_path), c.scene_path.parent_path(), violations,
                                       "scene(" + c.scene_path.filename().string() + ")");
    } catch (const InvalidInput& e) {
      r.fail("scene", e.what());
    }
  } else {
    c.scene = parse_scene_descriptor(r["scene"], base, violations, "config.scene");
  }
  try {
    lead = build_lead(c.scene.lead);
  } catch (const InvalidInput&) {
    // already reported by the descriptor parser
  }

  // Tracts.
  if (!r.has("tracts") || !r["tracts"].is_array() || r["tracts"].empty()) {
    r.fail("tracts", "expected a non-empty list of fiber-tract files");
  } else {
    std::set<std::string> names;
    for (const auto& t : r["tracts"]) {
      if (!t.is_string()) {
        r.fail("tracts", "entries must be file paths");
        continue;
      }
      const fs::path p = resolve(base, t.get<std::string>());
      try {
        const auto tract = load_fiber_tract(p);
        if (!names.insert(tract.name).second) r.fail("tracts", "duplicate tract name '" + tract.name + "'");
      } catch (const Error& e) {
        r.fail("tracts", e.what());
      }
      c.tract_paths.push_back(p);
    }
  }

  // Settings.
  if (!r.has("settings") || !r["settings"].is_array() || r["settings"].empty()) {
    r.fail("settings", "expected a non-empty list");
  } else {
    std::set<std::string> labels;
    for (std::size_t i = 0; i < r["settings"].size(); ++i) {
      const std::string where = "config.settings[" + std::to_string(i) + "]";
      auto s = parse_setting(r["settings"][i], violations, where);
      if (!s) continue;
      if (!labels.insert(s->label).second) violations.push_back(where + ": duplicate label '" + s->label + "'");
      if (lead)
        for (const auto& id : unknown_contacts(s->polarity, *lead))
          violations.push_back(where + ": unknown contact '" + id + "' in '" + s->polarity.to_string() + "'");
      c.settings.push_back(*s);
    }
  }

  // Models.
  if (!r.has("models")) {
    c.models = {ModelKind::Static};
  } else if (!r["models"].is_array() || r["models"].empty()) {
    r.fail("models", "expected a non-empty list");
  } else {
    for (const auto& m : r["models"]) {
      try {
        const auto kind = parse_model(m.is_string() ? m.get<std::string>() : m.dump());
        if (std::find(c.models.begin(), c.models.end(), kind) != c.models.end())
          r.fail("models", "duplicate model '" + std::string(to_string(kind)) + "'");
        else
          c.models.push_back(kind);
      } catch (const InvalidInput& e) {
        r.fail("models", e.what());
      }
    }
  }

  // Tremor recordings.
  if (r.has("tremor")) {
    if (!r["tremor"].is_array()) {
      r.fail("tremor", "expected a list");
    } else {
      for (std::size_t i = 0; i < r["tremor"].size(); ++i) {
        Reader t(r["tremor"][i], "config.tremor[" + std::to_string(i) + "]", violations);
        t.only({"setting", "recording"});
        TremorReference ref;
        ref.setting = t.string("setting", "");
        const bool known = ref.setting == "None" ||
                           std::any_of(c.settings.begin(), c.settings.end(),
                                       [&](const StimulationSetting& s) { return s.label == ref.setting; });
        if (!known) t.fail("setting", "no setting labelled '" + ref.setting + "'");
        ref.recording = resolve(base, t.string("recording", ""));
        if (!fs::is_regular_file(ref.recording)) t.fail("recording", "file not found: " + ref.recording.string());
        c.tremor.push_back(ref);
      }
    }
  }

  c.output_dir = resolve(base, r.string("output_dir", "output"));
  if (const char* env = std::getenv("DBS_OUTPUT_DIR"); env && *env) c.output_dir = fs::path(env);

  // Pipeline options.
  if (r.has("pipeline")) {
    Reader p(r["pipeline"], "config.pipeline", violations);
    p.only({"denominator", "threshold_fallback", "static_diameter_um", "thresholds", "generic_threshold", "harmonics",
            "octave_bands", "dt_max_us", "settle_ms", "periods", "workers", "axon_parameters"});
    auto& o = c.pipeline;
    o.denominator = p.choice("denominator", o.denominator, [](const std::string& v) { return parse_denominator_rule(v); });
    o.fallback = p.choice("threshold_fallback", o.fallback, [](const std::string& v) { return parse_threshold_fallback(v); });
    if (p.has("static_diameter_um")) o.static_diameter_um = p.number("static_diameter_um", 3.5);
    else if (r["pipeline"].is_object() && r["pipeline"].contains("static_diameter_um")) o.static_diameter_um.reset();
    const double generic = p.number("generic_threshold", o.thresholds.generic_default());
    try {
      if (p.has("thresholds")) {
        std::vector<ThresholdKnot> knots;
        if (!p["thresholds"].is_array()) throw InvalidInput("expected a list of {pw_us, diam_um, e_vm}");
        for (const auto& k : p["thresholds"]) {
          std::vector<std::string> kv;
          Reader kr(k, "knot", kv);
          knots.push_back({kr.number("pw_us", -1.0), kr.number("diam_um", -1.0), kr.number("e_vm", -1.0)});
          if (!kv.empty()) throw InvalidInput(kv.front());
        }
        o.thresholds = ThresholdTable(std::move(knots), generic);
      } else {
        o.thresholds = ThresholdTable(o.thresholds.knots(), generic);
      }
    } catch (const InvalidInput& e) {
      p.fail("thresholds", e.what());
    }
    o.harmonics = p.integer("harmonics", o.harmonics);
    if (o.harmonics < 1) p.fail("harmonics", "must be at least 1");
    o.eqs.octave_bands = p.boolean("octave_bands", o.eqs.octave_bands);
    o.dt_max_us = p.number("dt_max_us", o.dt_max_us);
    o.settle_ms = p.number("settle_ms", o.settle_ms);
    o.periods = p.integer("periods", o.periods);
    if (!(o.dt_max_us > 0.0 && o.dt_max_us <= 10.0)) p.fail("dt_max_us", "must be in (0, 10]");
    if (!(o.settle_ms >= 5.0)) p.fail("settle_ms", "must be at least 5 ms");
    if (o.periods < 3) p.fail("periods", "must be at least 3");
    o.workers = p.integer("workers", o.workers);
    if (p.has("axon_parameters")) {
      const fs::path ap = resolve(base, p.string("axon_parameters", ""));
      try {
        o.axon_parameters = std::make_shared<const MrgParameters>(MrgParameters::load(ap));
      } catch (const Error& e) {
        p.fail("axon_parameters", e.what());
      }
    }
  }
  c.pipeline.workers = workers_from_environment(c.pipeline.workers);

  if (r.has("tremor_options")) {
    Reader t(r["tremor_options"], "config.tremor_options", violations);
    t.only({"band_hz", "window_s", "radii"});
    auto& o = c.tremor_options;
    const auto band = t.numbers("band_hz", {o.band.lo_hz, o.band.hi_hz});
    if (band.size() != 2 || !(band[0] > 0.0 && band[0] < band[1])) t.fail("band_hz", "expected [lo, hi] with 0 < lo < hi");
    else o.band = {band[0], band[1]};
    o.window_s = t.number("window_s", o.window_s);
    if (!(o.window_s > 0.0)) t.fail("window_s", "must be positive");
    o.radii = t.numbers("radii", o.radii);
    if (o.radii.size() < 2 || !std::is_sorted(o.radii.begin(), o.radii.end(), std::less_equal<>()) ||
        !(o.radii.front() > 0.0))
      t.fail("radii", "expected at least two positive, strictly increasing radii");
  }

  if (r.has("solver")) {
    Reader s(r["solver"], "config.solver", violations);
    s.only({"tolerance", "max_iterations"});
    c.solver.tolerance = s.number("tolerance", c.solver.tolerance);
    c.solver.max_iterations = s.integer("max_iterations", c.solver.max_iterations);
    if (!(c.solver.tolerance > 0.0 && c.solver.tolerance < 1.0)) s.fail("tolerance", "must be in (0, 1)");
  }

  if (!violations.empty()) throw ValidationError(std::move(violations));
  return c;
}

ExperimentConfig validate_config(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw ValidationError({"config file not found: " + path.string()});
  json doc;
  try {
    doc = read_json_file(path);
  } catch (const InvalidInput& e) {
    throw ValidationError({e.what()});
  }
  auto c = parse_config(doc, fs::absolute(path).parent_path());
  c.source = fs::absolute(path).lexically_normal();
  return c;
}

int workers_from_environment(int fallback) {
  if (const char* env = std::getenv("DBS_WORKERS"); env && *env) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end && *end == '\0' && n > 0 && n <= 1024) return static_cast<int>(n);
  }
  return fallback;
}

}  // namespace dbs
