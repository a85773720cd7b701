#include "dbs/axon.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#ifndef DBS_SOURCE_DATA_DIR
#define DBS_SOURCE_DATA_DIR "data"
#endif

namespace dbs {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

std::filesystem::path MrgParameters::default_path() {
  if (const char* dir = std::getenv("DBS_DATA_DIR"); dir && *dir) return std::filesystem::path(dir) / "mrg_params.json";
  return std::filesystem::path(DBS_SOURCE_DATA_DIR) / "mrg_params.json";
}

MrgParameters MrgParameters::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open axon parameter file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

MrgParameters MrgParameters::from_json(std::string_view text) {
  MrgParameters p;
  try {
    const auto doc = json::parse(text);
    p.name = doc.at("name").get<std::string>();
    const auto& g = doc.at("global");
    p.rhoa = g.at("rhoa");
    p.mycm = g.at("mycm");
    p.mygm = g.at("mygm");
    p.node_length = g.at("node_length");
    p.mysa_length = g.at("mysa_length");
    p.space_node = g.at("space_node");
    p.space_mysa = g.at("space_mysa");
    p.space_flut = g.at("space_flut");
    p.space_stin = g.at("space_stin");
    p.celsius = g.at("celsius");
    p.v_init = g.at("v_init");
    const auto& n = doc.at("node");
    p.node_cm = n.at("cm");
    p.gnapbar = n.at("gnapbar");
    p.gnabar = n.at("gnabar");
    p.gkbar = n.at("gkbar");
    p.gl = n.at("gl");
    p.ena = n.at("ena");
    p.ek = n.at("ek");
    p.el = n.at("el");
    for (auto [key, layer] : {std::pair{"mysa", &p.mysa}, {"flut", &p.flut}, {"stin", &p.stin}}) {
      const auto& l = doc.at(key);
      *layer = {l.at("cm"), l.at("g_pas"), l.at("e_pas")};
    }
    for (const auto& [k, v] : doc.at("rates").items()) p.rates[k] = v.get<double>();
    for (const auto& row : doc.at("geometry")) {
      if (row.size() != 9) throw InvalidInput("geometry rows need 9 columns");
      p.geometry.push_back({row[0], row[1], row[2], row[3], row[4], row[5], row[6], row[7], row[8].get<int>()});
    }
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("malformed axon parameter file: ") + e.what());
  }
  if (p.geometry.empty()) throw InvalidInput("axon parameter file has no geometry rows");
  for (const char* key : {"ampA", "ampB", "ampC", "bmpA", "bmpB", "bmpC", "amA", "amB", "amC", "bmA", "bmB", "bmC",
                          "ahA", "ahB", "ahC", "bhA", "bhB", "bhC", "asA", "asB", "asC", "bsA", "bsB", "bsC", "vtraub",
                          "q10_mp_m", "q10_h", "q10_s", "t_ref_mp_m", "t_ref_h", "t_ref_s"})
    p.rate(key);
  return p;
}

const MrgGeometry& MrgParameters::row(double fiber_d) const {
  for (const auto& r : geometry)
    if (std::abs(r.fiber_d - fiber_d) < 1e-9) return r;
  std::string known;
  for (const auto& r : geometry) known += (known.empty() ? "" : ", ") + std::to_string(r.fiber_d);
  throw InvalidInput("no axon geometry for fiber diameter " + std::to_string(fiber_d) + " um (available: " + known +
                     ")");
}

double MrgParameters::rate(const std::string& key) const {
  auto it = rates.find(key);
  if (it == rates.end()) throw InvalidInput("axon parameter file lacks rate constant " + key);
  return it->second;
}

std::string_view to_string(CompartmentKind k) {
  switch (k) {
    case CompartmentKind::Node: return "node";
    case CompartmentKind::Mysa: return "mysa";
    case CompartmentKind::Flut: return "flut";
    case CompartmentKind::Stin: return "stin";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Node kinetics
// ---------------------------------------------------------------------------

namespace {

// x / (1 - exp(-x / c)) style rate with its removable singularity.
double linoid(double a, double x, double c) {
  const double y = x / c;
  if (std::abs(y) < 1e-6) return a * c;
  return a * x / (1.0 - std::exp(-y));
}

struct Rates {
  double ampA, ampB, ampC, bmpA, bmpB, bmpC, amA, amB, amC, bmA, bmB, bmC;
  double ahA, ahB, ahC, bhA, bhB, bhC, asA, asB, asC, bsA, bsB, bsC, vtraub;
  double q1, q2, q3;

  // Steady state and time constant (ms) for mp, m, h, s.
  void evaluate(double v, std::array<double, 4>& inf, std::array<double, 4>& tau) const {
    auto set = [&](int i, double a, double b) {
      tau[i] = 1.0 / (a + b);
      inf[i] = a * tau[i];
    };
    set(0, q1 * linoid(ampA, v + ampB, ampC), q1 * linoid(bmpA, -(v + bmpB), bmpC));
    set(1, q1 * linoid(amA, v + amB, amC), q1 * linoid(bmA, -(v + bmB), bmC));
    set(2, q2 * linoid(ahA, -(v + ahB), ahC), q2 * bhA / (1.0 + std::exp(-(v + bhB) / bhC)));
    const double v2 = v - vtraub;
    set(3, q3 * asA / (std::exp((v2 + asB) / asC) + 1.0), q3 * bsA / (std::exp((v2 + bsB) / bsC) + 1.0));
  }
};

Rates make_rates(const std::map<std::string, double>& r, double q1, double q2, double q3) {
  auto at = [&](const char* k) { return r.at(k); };
  return {at("ampA"), at("ampB"), at("ampC"), at("bmpA"), at("bmpB"), at("bmpC"), at("amA"), at("amB"), at("amC"),
          at("bmA"),  at("bmB"),  at("bmC"),  at("ahA"),  at("ahB"),  at("ahC"),  at("bhA"), at("bhB"), at("bhC"),
          at("asA"),  at("asB"),  at("asC"),  at("bsA"),  at("bsB"),  at("bsC"),  at("vtraub"), q1, q2, q3};
}

// Point at arc length s (mm) along a polyline with cumulative lengths.
Vec3 point_at(const std::vector<Vec3>& pts, const std::vector<double>& cum, double s) {
  s = std::clamp(s, 0.0, cum.back());
  auto it = std::upper_bound(cum.begin(), cum.end(), s);
  std::size_t i = it == cum.begin() ? 0 : static_cast<std::size_t>(it - cum.begin()) - 1;
  i = std::min(i, pts.size() - 2);
  const double len = cum[i + 1] - cum[i];
  const double t = len > 0.0 ? (s - cum[i]) / len : 0.0;
  return pts[i] + t * (pts[i + 1] - pts[i]);
}

constexpr double kUm2ToCm2 = 1e-8;

}  // namespace

// ---------------------------------------------------------------------------
// Integrator
// ---------------------------------------------------------------------------

// Backward Euler on the double cable with node gates frozen over the step,
// followed by an exact exponential gate update. Unknowns per compartment are
// the intracellular and periaxonal potentials; at nodes the periaxonal layer
// is shorted to the extracellular potential.
class AxonIntegrator {
 public:
  AxonIntegrator(const AxonModel& axon, double dt)
      : a_(axon),
        dt_(dt),
        rates_(make_rates(axon.rates_, axon.q10_mpm_, axon.q10_h_, axon.q10_s_)),
        n_(axon.size()),
        vi_(n_),
        vp_(n_),
        gates_(axon.nodes_.size()),
        inv_(n_),
        rhs_(n_),
        node_slot_(n_, -1) {
    for (std::size_t k = 0; k < axon.nodes_.size(); ++k) node_slot_[axon.nodes_[k]] = static_cast<int>(k);
  }

  void set_state(const std::vector<double>& vm, const std::vector<double>& vp,
                 const std::vector<std::array<double, 4>>& gates) {
    for (std::size_t i = 0; i < n_; ++i) {
      vp_[i] = vp[i];
      vi_[i] = vm[i] + vp[i];
    }
    gates_ = gates;
  }

  double vm(std::size_t i) const { return vi_[i] - vp_[i]; }
  double vp(std::size_t i) const { return vp_[i]; }
  const std::vector<std::array<double, 4>>& gates() const { return gates_; }

  /// One step with extracellular potentials `ve_prev` at the start and `ve`
  /// over the step. Returns the largest membrane potential change.
  double step(const std::function<double(std::size_t)>& ve, const std::function<double(std::size_t)>& ve_prev) {
    const auto& A = a_;
    const double cd = 1.0 / dt_;
    // Forward sweep.
    double prev_inv[4] = {0, 0, 0, 0};
    double prev_r[2] = {0, 0};
    for (std::size_t i = 0; i < n_; ++i) {
      const double vm_old = vi_[i] - vp_[i];
      double g, j;
      const int slot = node_slot_[i];
      if (slot >= 0) {
        const auto& x = gates_[static_cast<std::size_t>(slot)];
        const double gnap = A.g_node_nap_[i] * x[0] * x[0] * x[0];
        const double gna = A.g_node_na_[i] * x[1] * x[1] * x[1] * x[2];
        const double gk = A.g_node_k_[i] * x[3];
        const double gl = A.g_node_l_[i];
        g = gnap + gna + gk + gl;
        j = (gnap + gna) * A.ena_ + gk * A.ek_ + gl * A.el_;
      } else {
        g = A.g_pas_[i];
        j = g * A.e_pas_[i];
      }
      const double am = A.c_m_[i] * cd + g;
      const double ga_l = i > 0 ? A.g_axial_[i - 1] : 0.0;
      const double ga_r = i + 1 < n_ ? A.g_axial_[i] : 0.0;
      const double gp_l = i > 0 ? A.g_peri_[i - 1] : 0.0;
      const double gp_r = i + 1 < n_ ? A.g_peri_[i] : 0.0;
      const double mem_rhs = A.c_m_[i] * cd * vm_old + j;

      double d[4], r[2];
      d[0] = am + ga_l + ga_r;
      d[1] = -am;
      r[0] = mem_rhs;
      const double ve_i = ve(i);
      const bool shorted = slot >= 0;
      if (shorted) {
        d[2] = 0.0;
        d[3] = 1.0;
        r[1] = ve_i;
      } else {
        const double bm = A.c_my_[i] * cd + A.g_my_[i];
        d[2] = -am;
        d[3] = bm + am + gp_l + gp_r;
        r[1] = bm * ve_i + A.c_my_[i] * cd * (vp_[i] - ve_prev(i)) - mem_rhs;
      }
      if (i > 0) {
        // Lower block diag(-ga_l, -gp_l or 0) times the previous inverse.
        const double l0 = -ga_l;
        const double l1 = shorted ? 0.0 : -gp_l;
        const double m00 = l0 * prev_inv[0], m01 = l0 * prev_inv[1];
        const double m10 = l1 * prev_inv[2], m11 = l1 * prev_inv[3];
        // Upper block of the previous row: diag(-ga, -gp or 0).
        const double u0 = -ga_l;
        const double u1 = node_slot_[i - 1] >= 0 ? 0.0 : -gp_l;
        d[0] -= m00 * u0;
        d[1] -= m01 * u1;
        d[2] -= m10 * u0;
        d[3] -= m11 * u1;
        r[0] -= m00 * prev_r[0] + m01 * prev_r[1];
        r[1] -= m10 * prev_r[0] + m11 * prev_r[1];
      }
      const double det = d[0] * d[3] - d[1] * d[2];
      auto& inv = inv_[i];
      inv = {d[3] / det, -d[1] / det, -d[2] / det, d[0] / det};
      rhs_[i] = {r[0], r[1]};
      std::copy(inv.begin(), inv.end(), prev_inv);
      prev_r[0] = r[0];
      prev_r[1] = r[1];
    }
    // Back substitution.
    double change = 0.0;
    double next_vi = 0.0, next_vp = 0.0;
    for (std::size_t k = n_; k-- > 0;) {
      double r0 = rhs_[k][0], r1 = rhs_[k][1];
      if (k + 1 < n_) {
        r0 += A.g_axial_[k] * next_vi;
        if (node_slot_[k] < 0) r1 += A.g_peri_[k] * next_vp;
      }
      const auto& inv = inv_[k];
      const double xi = inv[0] * r0 + inv[1] * r1;
      const double xp = inv[2] * r0 + inv[3] * r1;
      change = std::max(change, std::abs((xi - xp) - (vi_[k] - vp_[k])));
      vi_[k] = xi;
      vp_[k] = xp;
      next_vi = xi;
      next_vp = xp;
    }
    // Gates.
    std::array<double, 4> inf{}, tau{};
    for (std::size_t s = 0; s < gates_.size(); ++s) {
      const std::size_t i = A.nodes_[s];
      rates_.evaluate(vi_[i] - vp_[i], inf, tau);
      for (int q = 0; q < 4; ++q) gates_[s][q] = inf[q] + (gates_[s][q] - inf[q]) * std::exp(-dt_ / tau[q]);
    }
    if (!std::isfinite(change)) throw NumericalError("axon state became non-finite");
    return change;
  }

  void gate_steady_state(double v, std::array<double, 4>& x) const {
    std::array<double, 4> tau{};
    rates_.evaluate(v, x, tau);
  }

 private:
  const AxonModel& a_;
  double dt_;
  Rates rates_;
  std::size_t n_;
  std::vector<double> vi_, vp_;
  std::vector<std::array<double, 4>> gates_;
  std::vector<std::array<double, 4>> inv_;
  std::vector<std::array<double, 2>> rhs_;
  std::vector<int> node_slot_;
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

AxonModel::AxonModel(const std::vector<Vec3>& polyline, double fiber_d, const MrgParameters& p)
    : fiber_d_(fiber_d), geom_(p.row(fiber_d)) {
  Fiber probe;
  probe.points = polyline;
  probe.diameter_um = fiber_d;
  validate_fiber(probe);

  const double inter = (geom_.deltax - p.node_length - 2.0 * p.mysa_length - 2.0 * geom_.flut_length) / 6.0;
  if (!(inter > 0.0)) throw InvalidInput("axon geometry leaves no room for internodal segments");
  std::vector<double> cum(polyline.size(), 0.0);
  for (std::size_t i = 1; i < polyline.size(); ++i) cum[i] = cum[i - 1] + (polyline[i] - polyline[i - 1]).norm();
  const double length_um = cum.back() * 1e3;
  const auto spans = static_cast<std::size_t>(std::floor(length_um / geom_.deltax + 1e-9));
  if (spans < 2)
    throw InvalidInput("fiber of " + std::to_string(cum.back()) + " mm is shorter than two internodal spans of " +
                       std::to_string(geom_.deltax * 1e-3) + " mm");

  // Node 0 is centered on the first fiber point.
  double cursor = -0.5 * p.node_length;
  auto place = [&](CompartmentKind kind, double len) {
    const double center = cursor + 0.5 * len;
    comps_.push_back({kind, len, center, point_at(polyline, cum, center * 1e-3)});
    cursor += len;
  };
  for (std::size_t s = 0; s <= spans; ++s) {
    nodes_.push_back(comps_.size());
    place(CompartmentKind::Node, p.node_length);
    if (s == spans) break;
    place(CompartmentKind::Mysa, p.mysa_length);
    place(CompartmentKind::Flut, geom_.flut_length);
    for (int k = 0; k < 6; ++k) place(CompartmentKind::Stin, inter);
    place(CompartmentKind::Flut, geom_.flut_length);
    place(CompartmentKind::Mysa, p.mysa_length);
  }

  const std::size_t n = comps_.size();
  c_m_.assign(n, 0.0);
  g_pas_.assign(n, 0.0);
  e_pas_.assign(n, 0.0);
  c_my_.assign(n, 0.0);
  g_my_.assign(n, 0.0);
  g_node_na_.assign(n, 0.0);
  g_node_nap_.assign(n, 0.0);
  g_node_k_.assign(n, 0.0);
  g_node_l_.assign(n, 0.0);
  std::vector<double> r_axial_half(n), r_peri_half(n);
  const double lamellae = 2.0 * geom_.lamellae;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& c = comps_[i];
    double d = 0.0, space = 0.0;
    const PassiveLayer* layer = nullptr;
    switch (c.kind) {
      case CompartmentKind::Node: d = geom_.node_d; space = p.space_node; break;
      case CompartmentKind::Mysa: d = geom_.mysa_d; space = p.space_mysa; layer = &p.mysa; break;
      case CompartmentKind::Flut: d = geom_.flut_d; space = p.space_flut; layer = &p.flut; break;
      case CompartmentKind::Stin: d = geom_.axon_d; space = p.space_stin; layer = &p.stin; break;
    }
    const double area = kPi * d * c.length_um * kUm2ToCm2;  // cm2
    if (layer) {
      c_m_[i] = layer->cm * area * 1e3;  // nF
      g_pas_[i] = layer->g_pas * area * 1e6;  // uS
      e_pas_[i] = layer->e_pas;
      const double sheath = kPi * geom_.fiber_d * c.length_um * kUm2ToCm2;
      c_my_[i] = p.mycm / lamellae * sheath * 1e3;
      g_my_[i] = p.mygm / lamellae * sheath * 1e6;
    } else {
      c_m_[i] = p.node_cm * area * 1e3;
      g_node_nap_[i] = p.gnapbar * area * 1e6;
      g_node_na_[i] = p.gnabar * area * 1e6;
      g_node_k_[i] = p.gkbar * area * 1e6;
      g_node_l_[i] = p.gl * area * 1e6;
    }
    // Half-compartment resistances in MOhm (rhoa in ohm um, lengths in um).
    r_axial_half[i] = p.rhoa * 0.5 * c.length_um / (kPi * d * d / 4.0) * 1e-6;
    const double annulus = kPi * (std::pow(0.5 * d + space, 2) - std::pow(0.5 * d, 2));
    r_peri_half[i] = p.rhoa * 0.5 * c.length_um / annulus * 1e-6;
  }
  g_axial_.resize(n - 1);
  g_peri_.resize(n - 1);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    g_axial_[i] = 1.0 / (r_axial_half[i] + r_axial_half[i + 1]);
    g_peri_[i] = 1.0 / (r_peri_half[i] + r_peri_half[i + 1]);
  }

  rates_ = p.rates;
  auto q10 = [&](const char* base, const char* ref) {
    return std::pow(p.rate(base), (p.celsius - p.rate(ref)) / 10.0);
  };
  q10_mpm_ = q10("q10_mp_m", "t_ref_mp_m");
  q10_h_ = q10("q10_h", "t_ref_h");
  q10_s_ = q10("q10_s", "t_ref_s");
  ena_ = p.ena;
  ek_ = p.ek;
  el_ = p.el;
  v_init_ = p.v_init;
  relax_to_rest();
}

void AxonModel::relax_to_rest() {
  rest_vm_.assign(size(), v_init_);
  rest_vp_.assign(size(), 0.0);
  rest_gates_.assign(nodes_.size(), {});
  AxonIntegrator it(*this, 0.05);
  for (auto& x : rest_gates_) it.gate_steady_state(v_init_, x);
  it.set_state(rest_vm_, rest_vp_, rest_gates_);
  const auto zero = [](std::size_t) { return 0.0; };
  bool settled = false;
  for (int s = 0; s < 200000 && !settled; ++s) settled = it.step(zero, zero) < 1e-11;
  if (!settled) throw NumericalError("axon did not reach a resting state");
  for (std::size_t i = 0; i < size(); ++i) {
    rest_vm_[i] = it.vm(i);
    rest_vp_[i] = it.vp(i);
  }
  rest_gates_ = it.gates();
}

AxonModel build_axon(const Fiber& fiber, const MrgParameters& params) {
  return AxonModel(fiber.points, fiber.diameter_um, params);
}

AxonModel build_axon(const std::vector<Vec3>& polyline, double fiber_d, const MrgParameters& params) {
  return AxonModel(polyline, fiber_d, params);
}

// ---------------------------------------------------------------------------
// Drives
// ---------------------------------------------------------------------------

TimeGrid make_time_grid(double frequency_hz, double dt_max_us, double settle_ms, int periods) {
  if (!(frequency_hz > 0.0)) throw InvalidInput("stimulation frequency must be positive");
  if (!(dt_max_us > 0.0) || dt_max_us > 10.0) throw InvalidInput("time step must be in (0, 10] us");
  if (settle_ms < 5.0) throw InvalidInput("settling interval must be at least 5 ms");
  if (periods < 3) throw InvalidInput("simulation must cover at least 3 stimulation periods");
  const double period_ms = 1e3 / frequency_hz;
  TimeGrid t;
  t.steps_per_period = static_cast<int>(std::ceil(period_ms / (dt_max_us * 1e-3) - 1e-9));
  t.dt_ms = period_ms / t.steps_per_period;
  t.settle_steps = static_cast<int>(std::ceil(settle_ms / t.dt_ms - 1e-9));
  t.periods = periods;
  return t;
}

ExtracellularDrive::ExtracellularDrive(TimeGrid time, Eigen::MatrixXd period_samples)
    : time_(time), samples_(std::move(period_samples)) {
  if (samples_.cols() != time_.steps_per_period) throw InvalidInput("drive samples do not cover one period");
  if (!samples_.allFinite()) throw InvalidInput("drive contains non-finite potentials");
}

namespace {

// Average of the unit pulse shape over [t0, t1] within one period, seconds.
double average_shape(const StimulationSetting& s, double t0, double t1) {
  const double pw = s.pulse_width_s();
  auto overlap = [&](double a, double b) { return std::max(0.0, std::min(t1, b) - std::max(t0, a)); };
  double integral = -overlap(0.0, pw);
  if (s.shape == PulseShape::BiphasicSymmetric) integral += overlap(pw, 2.0 * pw);
  return integral / (t1 - t0);
}

std::vector<double> compartment_potentials(const AxonModel& axon, const std::function<double(const Vec3&)>& f) {
  std::vector<double> v(axon.size());
  for (std::size_t i = 0; i < axon.size(); ++i) v[i] = f(axon.compartments()[i].position);
  return v;
}

void require_inside(const AxonModel& axon, const VoxelGrid& grid) {
  for (const auto& c : axon.compartments())
    if (!grid.contains(c.position))
      throw InvalidInput("axon compartment at (" + std::to_string(c.position.x()) + ", " +
                         std::to_string(c.position.y()) + ", " + std::to_string(c.position.z()) +
                         ") lies outside the field grid");
}

}  // namespace

ExtracellularDrive extracellular_drive(const std::vector<double>& potential_mv, const PulseTrain& train,
                                       const TimeGrid& time) {
  const double period_s = train.period();
  if (std::abs(period_s * 1e3 - time.period_ms()) > 1e-9 * time.period_ms())
    throw InvalidInput("time grid period does not match the pulse train");
  const double dt_s = time.dt_ms * 1e-3;
  Eigen::RowVectorXd w(time.steps_per_period);
  // V_e follows -shape: the cathodic phase carries the stored pattern.
  for (int m = 0; m < time.steps_per_period; ++m) w[m] = -average_shape(train.setting(), m * dt_s, (m + 1) * dt_s);
  Eigen::VectorXd u = Eigen::Map<const Eigen::VectorXd>(potential_mv.data(), static_cast<Eigen::Index>(potential_mv.size()));
  return {time, u * w};
}

ExtracellularDrive extracellular_drive(const AxonModel& axon, const QsSolution& solution, const PulseTrain& train,
                                       const TimeGrid& time) {
  require_inside(axon, solution.grid());
  const auto& unit = solution.unit_field();
  const double scale = solution.scale() * 1e3;  // V -> mV
  return extracellular_drive(
      compartment_potentials(axon, [&](const Vec3& p) { return scale * interpolate(solution.grid(), unit, p); }), train,
      time);
}

ExtracellularDrive extracellular_drive(const AxonModel& axon, const std::function<double(const Vec3&)>& potential_mv,
                                       const PulseTrain& train, const TimeGrid& time) {
  return extracellular_drive(compartment_potentials(axon, potential_mv), train, time);
}

ExtracellularDrive extracellular_drive(const AxonModel& axon, const std::vector<EqsSolution>& harmonics,
                                       double fundamental_hz, const TimeGrid& time) {
  if (harmonics.empty()) throw InvalidInput("no harmonic solutions");
  if (std::abs(1e3 / fundamental_hz - time.period_ms()) > 1e-9 * time.period_ms())
    throw InvalidInput("time grid period does not match the fundamental frequency");
  const auto& grid = harmonics.front().grid();
  require_inside(axon, grid);
  const int M = time.steps_per_period;
  const double w1 = 2.0 * kPi * fundamental_hz;
  const double dt_s = time.dt_ms * 1e-3;

  // Harmonics sharing a unit field are summed into one complex waveform.
  std::vector<const VectorX<Complex>*> units;
  std::vector<Eigen::RowVectorXcd> waves;
  for (const auto& h : harmonics) {
    const auto* u = h.unit_ptr().get();
    auto it = std::find(units.begin(), units.end(), u);
    std::size_t g = static_cast<std::size_t>(it - units.begin());
    if (it == units.end()) {
      units.push_back(u);
      waves.emplace_back(Eigen::RowVectorXcd::Zero(M));
    }
    const double k = h.harmonic();
    const Complex s = h.scale();
    if (k == 0) {
      waves[g].array() += s;
      continue;
    }
    // Interval average of exp(i k w t) over step m.
    const Complex step = std::exp(Complex(0.0, k * w1 * dt_s));
    const Complex avg = (step - 1.0) / Complex(0.0, k * w1 * dt_s);
    Complex ph(1.0, 0.0);
    for (int m = 0; m < M; ++m) {
      if (m % 256 == 0) ph = std::exp(Complex(0.0, k * w1 * dt_s * m));
      waves[g][m] += s * avg * ph;
      ph *= step;
    }
  }
  Eigen::MatrixXd samples = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(axon.size()), M);
  for (std::size_t g = 0; g < units.size(); ++g) {
    for (std::size_t i = 0; i < axon.size(); ++i) {
      const Complex u = 1e3 * interpolate(grid, *units[g], axon.compartments()[i].position);
      samples.row(static_cast<Eigen::Index>(i)) += (u * waves[g]).real();
    }
  }
  return {time, std::move(samples)};
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

bool SpikeRecord::any_spike() const {
  return std::any_of(node_spikes.begin(), node_spikes.end(), [](const auto& s) { return !s.empty(); });
}

SpikeRecord simulate(const AxonModel& axon, const ExtracellularDrive& drive, const SimulationOptions& options) {
  if (drive.compartments() != static_cast<Eigen::Index>(axon.size()))
    throw InvalidInput("drive has " + std::to_string(drive.compartments()) + " series for " +
                       std::to_string(axon.size()) + " compartments");
  const auto& time = drive.time();
  if (time.dt_ms > 10e-3 + 1e-15) throw InvalidInput("time step exceeds 10 us");
  if (!(options.arm_mv < options.detect_mv)) throw InvalidInput("arming level must lie below the detection level");

  AxonIntegrator it(axon, time.dt_ms);
  it.set_state(axon.rest_potential(), axon.rest_periaxonal(), axon.rest_gates());
  const auto& nodes = axon.nodes();

  SpikeRecord rec;
  rec.node_spikes.resize(nodes.size());
  rec.settle_ms = time.settle_ms();
  rec.period_ms = time.period_ms();
  rec.periods = time.periods;
  rec.dt_ms = time.dt_ms;
  if (options.record_traces) {
    rec.traces.assign(nodes.size(), {});
    for (auto& t : rec.traces) t.reserve(static_cast<std::size_t>(time.total_steps()) + 1);
  }

  std::vector<double> last(nodes.size());
  std::vector<char> armed(nodes.size());
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    last[k] = it.vm(nodes[k]);
    armed[k] = last[k] < options.arm_mv;
    if (options.record_traces) rec.traces[k].push_back(static_cast<float>(last[k]));
  }

  const int total = time.total_steps();
  double deviation = 0.0;
  for (int n = 0; n < total; ++n) {
    const auto ve = [&](std::size_t c) { return drive.at(static_cast<Eigen::Index>(c), n); };
    const auto ve_prev = [&](std::size_t c) { return n > 0 ? drive.at(static_cast<Eigen::Index>(c), n - 1) : 0.0; };
    it.step(ve, ve_prev);
    const double t1 = (n + 1) * time.dt_ms;
    for (std::size_t i = 0; i < axon.size(); ++i)
      deviation = std::max(deviation, std::abs(it.vm(i) - axon.rest_potential()[i]));
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      const double v = it.vm(nodes[k]);
      if (armed[k] && last[k] < options.detect_mv && v >= options.detect_mv) {
        rec.node_spikes[k].push_back(t1 - time.dt_ms * (v - options.detect_mv) / (v - last[k]));
        armed[k] = 0;
      }
      if (v < options.arm_mv) armed[k] = 1;
      last[k] = v;
      if (options.record_traces) rec.traces[k].push_back(static_cast<float>(v));
    }
  }
  if (!std::isfinite(deviation)) throw NumericalError("axon state became non-finite");
  rec.max_deviation_mv = deviation;
  return rec;
}

bool is_activated(const SpikeRecord& record) {
  if (record.node_spikes.empty() || record.periods < 1 || !(record.period_ms > 0.0)) return false;
  for (const auto* spikes : {&record.node_spikes.front(), &record.node_spikes.back()}) {
    bool all = true;
    for (int p = 0; p < record.periods && all; ++p) {
      const double t0 = record.settle_ms + p * record.period_ms;
      const double t1 = t0 + record.period_ms;
      all = std::any_of(spikes->begin(), spikes->end(), [&](double t) { return t >= t0 && t < t1; });
    }
    if (all) return true;
  }
  return false;
}

bool is_activated(const SpikeRecord& record, const PulseTrain& train) {
  if (std::abs(train.period() * 1e3 - record.period_ms) > 1e-6 * record.period_ms) return false;
  return is_activated(record);
}

double find_threshold(const AxonModel& axon, const ExtracellularDrive& unit_drive, double tolerance_ma, double lo_ma,
                      double hi_ma, const SimulationOptions& options) {
  if (!(tolerance_ma > 0.0)) throw InvalidInput("threshold tolerance must be positive");
  if (!(lo_ma >= 0.0 && lo_ma < hi_ma)) throw InvalidInput("threshold bracket must satisfy 0 <= lo < hi");
  auto fires = [&](double amp) { return amp > 0.0 && is_activated(simulate(axon, unit_drive.scaled(amp), options)); };
  if (fires(lo_ma) || !fires(hi_ma))
    throw InvalidInput("amplitude bracket [" + std::to_string(lo_ma) + ", " + std::to_string(hi_ma) +
                       "] mA does not straddle the activation threshold");
  while (hi_ma - lo_ma > tolerance_ma) {
    const double mid = 0.5 * (lo_ma + hi_ma);
    (fires(mid) ? hi_ma : lo_ma) = mid;
  }
  return 0.5 * (lo_ma + hi_ma);
}

void write_traces(const SpikeRecord& record, const std::filesystem::path& path) {
  if (record.traces.empty()) throw InvalidInput("simulation did not record traces");
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out << "time_ms";
  for (std::size_t k = 0; k < record.traces.size(); ++k) out << ",node_" << k;
  out << '\n';
  const std::size_t steps = record.traces.front().size();
  for (std::size_t s = 0; s < steps; ++s) {
    out << s * record.dt_ms;
    for (const auto& t : record.traces) out << ',' << t[s];
    out << '\n';
  }
}

}  // namespace dbs
