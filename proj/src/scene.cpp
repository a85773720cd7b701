#include "dbs/scene.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace dbs {

using nlohmann::json;

std::string_view to_string(Tissue t) {
  switch (t) {
    case Tissue::GM: return "GM";
    case Tissue::WM: return "WM";
    case Tissue::CSF: return "CSF";
    case Tissue::Encapsulation: return "encapsulation";
    case Tissue::Homogeneous: return "homogeneous";
  }
  return "?";
}

Tissue parse_tissue(std::string_view name) {
  if (name == "GM") return Tissue::GM;
  if (name == "WM") return Tissue::WM;
  if (name == "CSF") return Tissue::CSF;
  if (name == "encapsulation" || name == "Encap") return Tissue::Encapsulation;
  if (name == "homogeneous" || name == "Homog") return Tissue::Homogeneous;
  throw InvalidInput("unknown tissue label '" + std::string(name) + "'");
}

MaterialTable MaterialTable::defaults() {
  MaterialTable t;
  t.entries_[static_cast<int>(Tissue::GM)] = {0.09, 30.407e4};
  t.entries_[static_cast<int>(Tissue::WM)] = {0.06, 13.752e4};
  t.entries_[static_cast<int>(Tissue::CSF)] = {2.0, 0.0109e4};
  t.entries_[static_cast<int>(Tissue::Encapsulation)] = {0.05, 30.407e4};
  t.entries_[static_cast<int>(Tissue::Homogeneous)] = {0.1, 13.800e4};
  return t;
}

void MaterialTable::set(Tissue t, Material m) {
  if (!(m.sigma > 0.0)) throw InvalidInput("conductivity must be positive for " + std::string(to_string(t)));
  // eps_r = 0 is accepted as the degenerate "no displacement current" medium.
  if (!(m.eps_r >= 1.0 || m.eps_r == 0.0))
    throw InvalidInput("relative permittivity must be >= 1 for " + std::string(to_string(t)));
  entries_[static_cast<int>(t)] = m;
}

// ---------------------------------------------------------------------------

LeadGeometry::LeadGeometry(Vec3 tip, Vec3 direction, Vec3 orientation, double shaft_radius, double length,
                           std::vector<Contact> contacts)
    : tip_(tip), radius_(shaft_radius), length_(length), contacts_(std::move(contacts)) {
  if (!(shaft_radius > 0.0)) throw InvalidInput("shaft radius must be positive");
  if (!(length > 0.0)) throw InvalidInput("shaft length must be positive");
  if (direction.norm() == 0.0) throw InvalidInput("lead direction must be nonzero");
  axis_ = direction.normalized();
  Vec3 ref = orientation - orientation.dot(axis_) * axis_;
  if (ref.norm() < 1e-9) {
    ref = Vec3::UnitX() - Vec3::UnitX().dot(axis_) * axis_;
    if (ref.norm() < 1e-9) ref = Vec3::UnitY() - Vec3::UnitY().dot(axis_) * axis_;
  }
  ref_ = ref.normalized();
  binormal_ = axis_.cross(ref_);

  for (std::size_t i = 0; i < contacts_.size(); ++i) {
    const auto& c = contacts_[i];
    if (!(c.z_lo < c.z_hi)) throw InvalidInput("contact " + c.id + ": z_lo must be < z_hi");
    if (!(c.theta_lo >= 0.0 && c.theta_lo < c.theta_hi && c.theta_hi <= 360.0))
      throw InvalidInput("contact " + c.id + ": need 0 <= theta_lo < theta_hi <= 360");
    if (c.z_lo < 0.0 || c.z_hi > length_) throw InvalidInput("contact " + c.id + " lies outside the shaft");
    for (std::size_t j = 0; j < i; ++j) {
      const auto& o = contacts_[j];
      if (o.id == c.id) throw InvalidInput("duplicate contact id " + c.id);
      const bool z_overlap = c.z_lo < o.z_hi && o.z_lo < c.z_hi;
      const bool t_overlap = c.theta_lo < o.theta_hi && o.theta_lo < c.theta_hi;
      if (z_overlap && t_overlap) throw InvalidInput("contacts " + o.id + " and " + c.id + " overlap");
    }
  }
}

LeadGeometry::Local LeadGeometry::to_local(const Vec3& p) const {
  const Vec3 d = p - tip_;
  const double z = d.dot(axis_);
  const Vec3 radial = d - z * axis_;
  double theta = std::atan2(radial.dot(binormal_), radial.dot(ref_)) * 180.0 / kPi;
  if (theta < 0.0) theta += 360.0;
  if (theta >= 360.0) theta -= 360.0;
  return {z, radial.norm(), theta};
}

std::optional<std::size_t> LeadGeometry::contact_at(double z, double theta) const {
  for (std::size_t i = 0; i < contacts_.size(); ++i) {
    const auto& c = contacts_[i];
    if (z >= c.z_lo && z <= c.z_hi && theta >= c.theta_lo && theta < c.theta_hi) return i;
  }
  return std::nullopt;
}

std::vector<std::size_t> resolve_contact_name(const std::vector<std::string>& ids, std::string_view id) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] == id) return {i};
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& c = ids[i];
    if (c.size() == id.size() + 1 && c.compare(0, id.size(), id) == 0 && std::islower(static_cast<unsigned char>(c.back())))
      out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> LeadGeometry::resolve(std::string_view id) const {
  std::vector<std::string> ids;
  ids.reserve(contacts_.size());
  for (const auto& c : contacts_) ids.push_back(c.id);
  return resolve_contact_name(ids, id);
}

Contact LeadGeometry::ganged(std::string_view id) const {
  const auto members = resolve(id);
  if (members.empty()) throw InvalidInput("unknown contact '" + std::string(id) + "'");
  Contact g{std::string(id), contacts_[members[0]].z_lo, contacts_[members[0]].z_hi, 360.0, 0.0};
  double covered = 0.0;
  for (auto m : members) {
    const auto& c = contacts_[m];
    g.z_lo = std::min(g.z_lo, c.z_lo);
    g.z_hi = std::max(g.z_hi, c.z_hi);
    g.theta_lo = std::min(g.theta_lo, c.theta_lo);
    g.theta_hi = std::max(g.theta_hi, c.theta_hi);
    covered += c.angular_span();
  }
  // Arcs of one level never overlap, so the summed span is the union's span.
  if (covered >= 360.0 - 1e-9) {
    g.theta_lo = 0.0;
    g.theta_hi = 360.0;
  }
  return g;
}

LeadGeometry build_lead(const LeadDescriptor& d) {
  if (!(d.shaft_radius > 0.0) || !(d.contact_height > 0.0) || d.contact_gap < 0.0 || d.tip_offset < 0.0)
    throw InvalidInput("lead dimensions must be positive");
  std::vector<Contact> contacts;
  if (d.contacts) {
    contacts = *d.contacts;
  } else {
    // Ring C1, segmented C2 and C3 (three 120 degree segments each), ring C4.
    for (int level = 0; level < 4; ++level) {
      const double z0 = d.tip_offset + level * (d.contact_height + d.contact_gap);
      const double z1 = z0 + d.contact_height;
      const std::string base = "C" + std::to_string(level + 1);
      if (level == 0 || level == 3) {
        contacts.push_back({base, z0, z1, 0.0, 360.0});
      } else {
        for (int s = 0; s < 3; ++s)
          contacts.push_back({base + static_cast<char>('a' + s), z0, z1, 120.0 * s, 120.0 * (s + 1)});
      }
    }
  }
  return LeadGeometry(d.tip, d.direction, d.orientation, d.shaft_radius, d.length, std::move(contacts));
}

// ---------------------------------------------------------------------------

std::string_view to_string(BoundaryCondition bc) {
  return bc == BoundaryCondition::Grounded ? "grounded" : "far_field";
}

BoundaryCondition parse_boundary(std::string_view name) {
  if (name == "grounded") return BoundaryCondition::Grounded;
  if (name == "far_field") return BoundaryCondition::FarField;
  throw InvalidInput("unknown boundary condition '" + std::string(name) + "'");
}

VoxelGrid::VoxelGrid(Eigen::Array3i dims, double spacing, Vec3 origin, MaterialTable materials)
    : dims_(dims), spacing_(spacing), origin_(origin), materials_(materials) {
  if ((dims <= 0).any()) throw InvalidInput("grid dimensions must be positive");
  if (!(spacing > 0.0)) throw InvalidInput("grid spacing must be positive");
  labels_.assign(static_cast<std::size_t>(dims[0]) * dims[1] * dims[2],
                 static_cast<std::uint16_t>(Tissue::Homogeneous));
  boundary_.fill(BoundaryCondition::Grounded);
  far_field_center_ = origin_ + 0.5 * spacing_ * (dims_ - 1).cast<double>().matrix();
  box_ = {origin_, origin_ + spacing_ * (dims_ - 1).cast<double>().matrix()};
}

Eigen::Array3i VoxelGrid::coords(std::size_t idx) const {
  const auto nx = static_cast<std::size_t>(dims_[0]);
  const auto ny = static_cast<std::size_t>(dims_[1]);
  return {static_cast<int>(idx % nx), static_cast<int>((idx / nx) % ny), static_cast<int>(idx / (nx * ny))};
}

bool VoxelGrid::contains(const Vec3& p) const {
  const Vec3 g = to_grid(p);
  for (int a = 0; a < 3; ++a)
    if (!(g[a] >= 0.0 && g[a] <= dims_[a] - 1)) return false;
  return true;
}

std::uint16_t VoxelGrid::add_contact(std::string id) {
  if (std::find(contact_ids_.begin(), contact_ids_.end(), id) != contact_ids_.end())
    throw InvalidInput("duplicate contact id " + id);
  contact_ids_.push_back(std::move(id));
  return label::contact(contact_ids_.size() - 1);
}

void VoxelGrid::paint_sphere(const Vec3& center, double radius, std::uint16_t code) {
  for (int k = 0; k < dims_[2]; ++k)
    for (int j = 0; j < dims_[1]; ++j)
      for (int i = 0; i < dims_[0]; ++i)
        if ((this->center(i, j, k) - center).norm() <= radius) labels_[index(i, j, k)] = code;
}

std::vector<std::size_t> VoxelGrid::histogram() const {
  std::vector<std::size_t> h(label::kFirstContact + contact_ids_.size(), 0);
  for (auto l : labels_) {
    if (l >= h.size()) h.resize(l + 1, 0);
    ++h[l];
  }
  return h;
}

bool TissueShape::contains(const Vec3& p) const {
  if (kind == Kind::Slab) return (p.array() >= a.array()).all() && (p.array() <= b.array()).all();
  return ((p - a).array() / b.array()).square().sum() <= 1.0;
}

std::optional<Tissue> LabelVolume::sample(const Vec3& p) const {
  const Vec3 g = (p - origin) / spacing;
  Eigen::Array3i idx;
  for (int a = 0; a < 3; ++a) {
    const long r = std::lround(g[a]);
    if (r < 0 || r >= dims[a]) return std::nullopt;
    idx[a] = static_cast<int>(r);
  }
  const auto l = labels[static_cast<std::size_t>(idx[0]) +
                        static_cast<std::size_t>(dims[0]) * (idx[1] + static_cast<std::size_t>(dims[1]) * idx[2])];
  if (!label::is_tissue(l)) throw InvalidInput("label volume contains non-tissue label " + std::to_string(l));
  return static_cast<Tissue>(l);
}

Tissue TissueLayout::tissue_at(const Vec3& p) const {
  switch (kind) {
    case Kind::Homogeneous: return Tissue::Homogeneous;
    case Kind::Shapes: {
      Tissue t = background;
      for (const auto& s : shapes)
        if (s.contains(p)) t = s.tissue;
      return t;
    }
    case Kind::Volume: {
      if (!volume) throw InvalidInput("volume tissue layout without a label volume");
      return volume->sample(p).value_or(background);
    }
  }
  return background;
}

Vec3 contact_region_center(const LeadGeometry& lead) {
  if (lead.contacts().empty()) return lead.tip();
  double lo = lead.contacts().front().z_lo, hi = lead.contacts().front().z_hi;
  for (const auto& c : lead.contacts()) {
    lo = std::min(lo, c.z_lo);
    hi = std::max(hi, c.z_hi);
  }
  return lead.tip() + 0.5 * (lo + hi) * lead.direction();
}

namespace {

// Distance from p to the solid shaft cylinder (0 inside).
double distance_to_shaft(const LeadGeometry::Local& l, double radius, double length) {
  const double dz = l.z < 0.0 ? -l.z : (l.z > length ? l.z - length : 0.0);
  const double dr = std::max(0.0, l.rho - radius);
  return std::hypot(dz, dr);
}

}  // namespace

VoxelGrid voxelize_scene(const LeadGeometry& lead, const TissueLayout& tissue, const MaterialTable& materials,
                         const GridSpec& spec) {
  if (!(spec.resolution > 0.0)) throw InvalidInput("resolution must be positive");
  if (spec.resolution > lead.shaft_radius())
    throw InvalidInput("resolution " + std::to_string(spec.resolution) + " mm is too coarse for shaft radius " +
                       std::to_string(lead.shaft_radius()) + " mm");
  if (spec.encapsulation < 0.0) throw InvalidInput("encapsulation thickness must be >= 0");

  const Vec3 box_center = spec.box_center.value_or(contact_region_center(lead));
  const double half = 0.5 * spec.box_size + spec.padding;
  const int n = static_cast<int>(std::ceil(2.0 * half / spec.resolution));
  const Eigen::Array3i dims(n, n, n);
  // Voxel centers are placed symmetrically about the box center.
  const Vec3 origin = box_center - Vec3::Constant(0.5 * (n - 1) * spec.resolution);

  VoxelGrid grid(dims, spec.resolution, origin, materials);
  const AxisBox box{box_center - Vec3::Constant(0.5 * spec.box_size), box_center + Vec3::Constant(0.5 * spec.box_size)};
  grid.set_heterogeneous_box(box);
  grid.set_boundary(spec.boundary);
  grid.set_far_field_center(contact_region_center(lead));

  // Contacts are registered in lead order so that contact_ids()[i] == lead.contacts()[i].id.
  for (const auto& c : lead.contacts()) grid.add_contact(c.id);

  if (!grid.contains(lead.tip())) throw InvalidInput("lead tip lies outside the grid");

  const double radius = lead.shaft_radius();
  const double shell = radius + spec.encapsulation;
  auto& labels = grid.labels();
  for (int k = 0; k < n; ++k) {
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i < n; ++i) {
        const Vec3 offset = spec.resolution * Vec3(i, j, k);
        const Vec3 p = origin + offset;
        const auto local = lead.to_local(p);
        std::uint16_t l;
        if (local.z >= 0.0 && local.z <= lead.length() && local.rho <= radius) {
          const auto c = lead.contact_at(local.z, local.theta);
          l = c ? label::contact(*c) : label::kInsulation;
        } else if (spec.encapsulation > 0.0 && distance_to_shaft(local, radius, lead.length()) < shell - radius) {
          l = static_cast<std::uint16_t>(Tissue::Encapsulation);
        } else if (box.contains(p)) {
          l = static_cast<std::uint16_t>(tissue.tissue_at(p));
        } else {
          l = static_cast<std::uint16_t>(Tissue::Homogeneous);
        }
        labels[grid.index(i, j, k)] = l;
      }
    }
  }
  if (spec.encapsulation > 0.0) {
    // Close the shell: tissue voxels face-adjacent to the shaft are encapsulation
    // even when their centers lie beyond the nominal thickness.
    const auto encap = static_cast<std::uint16_t>(Tissue::Encapsulation);
    std::vector<std::size_t> touched;
    for (int k = 0; k < n; ++k)
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) {
          const auto idx = grid.index(i, j, k);
          if (!label::is_tissue(labels[idx]) || labels[idx] == encap) continue;
          const int nb[6][3] = {{i - 1, j, k}, {i + 1, j, k}, {i, j - 1, k}, {i, j + 1, k}, {i, j, k - 1}, {i, j, k + 1}};
          for (const auto& q : nb) {
            if (q[0] < 0 || q[1] < 0 || q[2] < 0 || q[0] >= n || q[1] >= n || q[2] >= n) continue;
            if (!label::is_tissue(labels[grid.index(q[0], q[1], q[2])])) {
              touched.push_back(idx);
              break;
            }
          }
        }
    for (auto idx : touched) labels[idx] = encap;
  }
  return grid;
}

// ---------------------------------------------------------------------------

std::string_view to_string(FiberStatus s) {
  switch (s) {
    case FiberStatus::Unknown: return "unknown";
    case FiberStatus::Activated: return "activated";
    case FiberStatus::NonActivated: return "non-activated";
    case FiberStatus::Damaged: return "damaged";
    case FiberStatus::Failed: return "failed";
  }
  return "?";
}

double Fiber::arc_length() const {
  double s = 0.0;
  for (std::size_t i = 1; i < points.size(); ++i) s += (points[i] - points[i - 1]).norm();
  return s;
}

std::size_t FiberTract::count(FiberStatus s) const {
  return static_cast<std::size_t>(
      std::count_if(fibers.begin(), fibers.end(), [s](const Fiber& f) { return f.status == s; }));
}

void validate_fiber(const Fiber& f) {
  if (f.points.size() < 2) throw InvalidInput("fiber has fewer than 2 points");
  for (std::size_t i = 1; i < f.points.size(); ++i)
    if (f.points[i] == f.points[i - 1]) throw InvalidInput("fiber has repeated consecutive points");
  if (!(f.diameter_um > 0.0)) throw InvalidInput("fiber diameter must be positive");
}

std::string fiber_tract_to_json(const FiberTract& tract) {
  json doc;
  doc["name"] = tract.name;
  doc["diameter_um"] = tract.fibers.empty() ? 5.7 : tract.fibers.front().diameter_um;
  json fibers = json::array();
  for (const auto& f : tract.fibers) {
    json pts = json::array();
    for (const auto& p : f.points) pts.push_back({p.x(), p.y(), p.z()});
    fibers.push_back(std::move(pts));
  }
  doc["fibers"] = std::move(fibers);
  return doc.dump();
}

FiberTract fiber_tract_from_json(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw InvalidInput(std::string("malformed fiber-tract file: ") + e.what());
  }
  FiberTract tract;
  try {
    tract.name = doc.at("name").get<std::string>();
    const double diameter = doc.value("diameter_um", 5.7);
    const auto& fibers = doc.at("fibers");
    if (!fibers.is_array() || fibers.empty()) throw InvalidInput("fiber-tract file has no fibers");
    for (const auto& pts : fibers) {
      Fiber f;
      f.diameter_um = diameter;
      for (const auto& p : pts) {
        if (!p.is_array() || p.size() != 3) throw InvalidInput("fiber point must have 3 coordinates");
        f.points.emplace_back(p[0].get<double>(), p[1].get<double>(), p[2].get<double>());
      }
      validate_fiber(f);
      tract.fibers.push_back(std::move(f));
    }
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("malformed fiber-tract file: ") + e.what());
  }
  return tract;
}

FiberTract load_fiber_tract(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open fiber-tract file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return fiber_tract_from_json(ss.str());
}

void save_fiber_tract(const FiberTract& tract, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out << fiber_tract_to_json(tract) << '\n';
}

double segment_distance(const Vec3& p0, const Vec3& p1, const Vec3& q0, const Vec3& q1) {
  // Closest points of two segments (Eberly), clamped to the unit square.
  const Vec3 d1 = p1 - p0, d2 = q1 - q0, r = p0 - q0;
  const double a = d1.squaredNorm(), e = d2.squaredNorm(), f = d2.dot(r);
  double s = 0.0, t = 0.0;
  if (a <= 1e-300 && e <= 1e-300) return r.norm();
  if (a <= 1e-300) {
    t = std::clamp(f / e, 0.0, 1.0);
  } else {
    const double c = d1.dot(r);
    if (e <= 1e-300) {
      s = std::clamp(-c / a, 0.0, 1.0);
    } else {
      const double b = d1.dot(d2);
      const double denom = a * e - b * b;
      s = denom > 1e-300 ? std::clamp((b * f - c * e) / denom, 0.0, 1.0) : 0.0;
      t = (b * s + f) / e;
      if (t < 0.0) {
        t = 0.0;
        s = std::clamp(-c / a, 0.0, 1.0);
      } else if (t > 1.0) {
        t = 1.0;
        s = std::clamp((b - c) / a, 0.0, 1.0);
      }
    }
  }
  return ((p0 + s * d1) - (q0 + t * d2)).norm();
}

FiberTract classify_damaged(FiberTract tract, const LeadGeometry& lead, double encapsulation_thickness) {
  const double limit = lead.shaft_radius() + encapsulation_thickness;
  const Vec3 a = lead.tip(), b = lead.top();
  for (auto& f : tract.fibers) {
    if (f.status != FiberStatus::Unknown) continue;
    for (std::size_t i = 1; i < f.points.size(); ++i) {
      if (segment_distance(f.points[i - 1], f.points[i], a, b) < limit) {
        f.status = FiberStatus::Damaged;
        break;
      }
    }
  }
  return tract;
}

std::vector<Vec3> resample_polyline(const std::vector<Vec3>& points, double spacing) {
  if (points.size() < 2) return points;
  std::vector<Vec3> out{points.front()};
  double carried = 0.0;  // arc length since the last emitted sample
  for (std::size_t i = 1; i < points.size(); ++i) {
    const Vec3 seg = points[i] - points[i - 1];
    const double len = seg.norm();
    double s = spacing - carried;
    while (s <= len) {
      out.push_back(points[i - 1] + (s / len) * seg);
      s += spacing;
    }
    carried = len - (s - spacing);
  }
  if ((out.back() - points.back()).norm() > 1e-12) out.push_back(points.back());
  return out;
}

}  // namespace dbs
