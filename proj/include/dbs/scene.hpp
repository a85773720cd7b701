#pragma once

#include "dbs/common.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace dbs {

// ---------------------------------------------------------------------------
// Materials
// ---------------------------------------------------------------------------

enum class Tissue : std::uint8_t { GM = 0, WM = 1, CSF = 2, Encapsulation = 3, Homogeneous = 4 };
inline constexpr int kTissueCount = 5;

std::string_view to_string(Tissue t);
Tissue parse_tissue(std::string_view name);

struct Material {
  double sigma;  // S/m
  double eps_r;  // relative permittivity
};

/// Conductivity and relative permittivity per tissue label.
class MaterialTable {
 public:
  static constexpr double kVacuumPermittivity = 8.8541878128e-12;  // F/m

  /// Gray/white matter, CSF, encapsulation and homogeneous values used by default.
  static MaterialTable defaults();

  const Material& operator[](Tissue t) const { return entries_[static_cast<int>(t)]; }
  void set(Tissue t, Material m);

  /// Complex admittivity sigma + i*omega*eps0*eps_r in S/m.
  Complex admittivity(Tissue t, double omega) const {
    const auto& m = (*this)[t];
    return {m.sigma, omega * kVacuumPermittivity * m.eps_r};
  }

 private:
  std::array<Material, kTissueCount> entries_{};
};

// ---------------------------------------------------------------------------
// Lead
// ---------------------------------------------------------------------------

/// One physical (or ganged virtual) electrode contact on the shaft surface.
/// Axial extents are mm from the lead tip, angular extents degrees from the
/// lead's orientation marker.
struct Contact {
  std::string id;
  double z_lo = 0.0;
  double z_hi = 0.0;
  double theta_lo = 0.0;
  double theta_hi = 360.0;

  bool is_ring() const { return theta_lo <= 0.0 && theta_hi >= 360.0; }
  double angular_span() const { return theta_hi - theta_lo; }
};

struct LeadDescriptor {
  Vec3 tip = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();  // from the tip towards the connector
  Vec3 orientation = Vec3::UnitX();  // theta = 0 marker, projected onto the shaft normal plane
  double shaft_radius = 0.65;        // mm
  double contact_height = 1.5;       // mm
  double contact_gap = 0.5;          // mm
  double tip_offset = 1.0;           // insulated tip length below C1, mm
  double length = 100.0;             // shaft length, mm
  std::optional<std::vector<Contact>> contacts;  // overrides the default 1-3-3-1 layout
};

/// Straight cylindrical lead with ring and segmented contacts.
class LeadGeometry {
 public:
  LeadGeometry(Vec3 tip, Vec3 direction, Vec3 orientation, double shaft_radius, double length,
               std::vector<Contact> contacts);

  const Vec3& tip() const { return tip_; }
  const Vec3& direction() const { return axis_; }
  double shaft_radius() const { return radius_; }
  double length() const { return length_; }
  Vec3 top() const { return tip_ + length_ * axis_; }
  const std::vector<Contact>& contacts() const { return contacts_; }

  /// Axial coordinate (mm from tip), radial distance (mm) and angle (deg in [0, 360)).
  struct Local {
    double z;
    double rho;
    double theta;
  };
  Local to_local(const Vec3& p) const;

  /// Index of the contact covering a shaft-surface location, if any.
  std::optional<std::size_t> contact_at(double z, double theta) const;

  /// Indices of the physical contacts named by `id`. An exact match wins;
  /// otherwise a level name such as "C2" gangs every segment "C2a", "C2b", ...
  std::vector<std::size_t> resolve(std::string_view id) const;

  /// Virtual ring-equivalent contact spanning the union of the named segments.
  Contact ganged(std::string_view id) const;

 private:
  Vec3 tip_;
  Vec3 axis_;
  Vec3 ref_;
  Vec3 binormal_;
  double radius_;
  double length_;
  std::vector<Contact> contacts_;
};

LeadGeometry build_lead(const LeadDescriptor& descriptor);

/// Resolve a contact name against an ordered list of contact ids with the
/// same ganging rule as LeadGeometry::resolve. Empty result when unknown.
std::vector<std::size_t> resolve_contact_name(const std::vector<std::string>& ids, std::string_view id);

// ---------------------------------------------------------------------------
// Voxel grid
// ---------------------------------------------------------------------------

/// Voxel label encoding: tissue labels 0..4, insulation, then one code per contact.
namespace label {
inline constexpr std::uint16_t kInsulation = 8;
inline constexpr std::uint16_t kFirstContact = 16;
inline bool is_tissue(std::uint16_t l) { return l < kTissueCount; }
inline bool is_contact(std::uint16_t l) { return l >= kFirstContact; }
inline std::uint16_t contact(std::size_t index) { return static_cast<std::uint16_t>(kFirstContact + index); }
inline std::size_t contact_index(std::uint16_t l) { return l - kFirstContact; }
}  // namespace label

enum class BoundaryCondition {
  Grounded,  // u = 0 on the face
  FarField,  // monopole-asymptotic Robin condition du/dn = -(r.n / r^2) u
};

std::string_view to_string(BoundaryCondition bc);
BoundaryCondition parse_boundary(std::string_view name);

struct AxisBox {
  Vec3 lo;
  Vec3 hi;
  bool contains(const Vec3& p) const {
    return (p.array() >= lo.array()).all() && (p.array() <= hi.array()).all();
  }
};

/// Labeled regular grid of cubic voxels. `origin` is the center of voxel (0,0,0).
class VoxelGrid {
 public:
  VoxelGrid(Eigen::Array3i dims, double spacing, Vec3 origin, MaterialTable materials);

  const Eigen::Array3i& dims() const { return dims_; }
  std::size_t size() const { return labels_.size(); }
  double spacing() const { return spacing_; }
  const Vec3& origin() const { return origin_; }
  const MaterialTable& materials() const { return materials_; }

  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(dims_[0]) * (static_cast<std::size_t>(j) +
                                                 static_cast<std::size_t>(dims_[1]) * static_cast<std::size_t>(k));
  }
  Eigen::Array3i coords(std::size_t idx) const;
  Vec3 center(int i, int j, int k) const {
    return origin_ + spacing_ * Vec3(i, j, k);
  }
  /// Continuous voxel coordinates of a point (voxel centers at integers).
  Vec3 to_grid(const Vec3& p) const { return (p - origin_) / spacing_; }
  /// True when `p` lies within the hull of voxel centers.
  bool contains(const Vec3& p) const;

  std::uint16_t label(std::size_t idx) const { return labels_[idx]; }
  const std::vector<std::uint16_t>& labels() const { return labels_; }
  std::vector<std::uint16_t>& labels() { return labels_; }

  const std::vector<std::string>& contact_ids() const { return contact_ids_; }
  /// Register a contact name; returns its label code.
  std::uint16_t add_contact(std::string id);
  /// Label every voxel whose center is inside the sphere as the given contact.
  void paint_sphere(const Vec3& center, double radius, std::uint16_t code);

  const std::array<BoundaryCondition, 6>& boundary() const { return boundary_; }
  void set_boundary(BoundaryCondition bc) { boundary_.fill(bc); }
  void set_boundary(int face, BoundaryCondition bc) { boundary_.at(face) = bc; }
  const Vec3& far_field_center() const { return far_field_center_; }
  void set_far_field_center(const Vec3& c) { far_field_center_ = c; }

  const AxisBox& heterogeneous_box() const { return box_; }
  void set_heterogeneous_box(const AxisBox& b) { box_ = b; }

  /// Count of voxels per label value (0..kFirstContact+contacts).
  std::vector<std::size_t> histogram() const;

 private:
  Eigen::Array3i dims_;
  double spacing_;
  Vec3 origin_;
  MaterialTable materials_;
  std::vector<std::uint16_t> labels_;
  std::vector<std::string> contact_ids_;
  std::array<BoundaryCondition, 6> boundary_{};
  Vec3 far_field_center_ = Vec3::Zero();
  AxisBox box_{Vec3::Zero(), Vec3::Zero()};
};

struct TissueShape {
  enum class Kind { Slab, Ellipsoid };
  Kind kind = Kind::Slab;
  Tissue tissue = Tissue::GM;
  Vec3 a = Vec3::Zero();  // slab: min corner; ellipsoid: center
  Vec3 b = Vec3::Zero();  // slab: max corner; ellipsoid: semi-axes

  bool contains(const Vec3& p) const;
};

/// Label volume imported from disk, sampled by nearest voxel.
struct LabelVolume {
  Eigen::Array3i dims = Eigen::Array3i::Zero();
  double spacing = 1.0;
  Vec3 origin = Vec3::Zero();
  std::vector<std::uint16_t> labels;

  std::optional<Tissue> sample(const Vec3& p) const;
};

struct TissueLayout {
  enum class Kind { Homogeneous, Shapes, Volume };
  Kind kind = Kind::Homogeneous;
  Tissue background = Tissue::Homogeneous;
  std::vector<TissueShape> shapes;  // applied in order, later shapes win
  std::optional<LabelVolume> volume;

  Tissue tissue_at(const Vec3& p) const;
};

struct GridSpec {
  double resolution = 0.5;             // mm
  double box_size = 50.0;              // edge of the heterogeneous box, mm
  std::optional<Vec3> box_center;      // defaults to the contact-region midpoint
  double padding = 0.0;                // extra homogeneous margin outside the box, mm
  double encapsulation = 0.1;          // mm
  BoundaryCondition boundary = BoundaryCondition::Grounded;
};

/// Midpoint of the contact array on the shaft axis.
Vec3 contact_region_center(const LeadGeometry& lead);

VoxelGrid voxelize_scene(const LeadGeometry& lead, const TissueLayout& tissue, const MaterialTable& materials,
                         const GridSpec& spec);

// ---------------------------------------------------------------------------
// Fiber tracts
// ---------------------------------------------------------------------------

enum class FiberStatus { Unknown, Activated, NonActivated, Damaged, Failed };
std::string_view to_string(FiberStatus s);

struct Fiber {
  std::vector<Vec3> points;  // mm
  double diameter_um = 5.7;
  FiberStatus status = FiberStatus::Unknown;

  double arc_length() const;
};

struct FiberTract {
  std::string name;
  std::vector<Fiber> fibers;

  std::size_t count(FiberStatus s) const;
};

/// Throws InvalidInput on < 2 points or repeated consecutive points.
void validate_fiber(const Fiber& f);

FiberTract load_fiber_tract(const std::filesystem::path& path);
void save_fiber_tract(const FiberTract& tract, const std::filesystem::path& path);
std::string fiber_tract_to_json(const FiberTract& tract);
FiberTract fiber_tract_from_json(std::string_view text);

/// Minimum distance between segments [p0,p1] and [q0,q1].
double segment_distance(const Vec3& p0, const Vec3& p1, const Vec3& q0, const Vec3& q1);

/// Marks fibers passing within shaft_radius + thickness of the shaft axis as damaged.
FiberTract classify_damaged(FiberTract tract, const LeadGeometry& lead, double encapsulation_thickness);

/// Points at uniform arc-length spacing along a polyline, ends included.
std::vector<Vec3> resample_polyline(const std::vector<Vec3>& points, double spacing);

}  // namespace dbs
