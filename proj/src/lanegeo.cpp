#include "corridor/lanegeo.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "corridor/error.hpp"

namespace corridor {

namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;
constexpr double kEdgeEps = 1e-9;
// Miter joins are clamped so a sharp corner cannot throw a vertex far out.
constexpr double kMinMiterCos = 0.25;

Vec2 left_normal(Vec2 from, Vec2 to) {
  const Vec2 d = to - from;
  const double len = norm(d);
  return {-d.y / len, d.x / len};
}

double wrap_180(double deg) {
  deg = std::fmod(deg, 360.0);
  if (deg <= -180.0) deg += 360.0;
  if (deg > 180.0) deg -= 360.0;
  return deg;
}

}  // namespace

double norm(Vec2 v) { return std::hypot(v.x, v.y); }

LocalFrame::LocalFrame(const GeoPoint& origin)
    : origin_(origin), cos_lat0_(std::cos(origin.latitude_deg * kDegToRad)) {}

Vec2 LocalFrame::to_xy(double latitude_deg, double longitude_deg) const {
  return {kEarthRadiusM * (longitude_deg - origin_.longitude_deg) * kDegToRad * cos_lat0_,
          kEarthRadiusM * (latitude_deg - origin_.latitude_deg) * kDegToRad};
}

GeoPoint LocalFrame::to_geo(Vec2 xy) const {
  GeoPoint g;
  g.latitude_deg = origin_.latitude_deg + xy.y / kEarthRadiusM / kDegToRad;
  g.longitude_deg = origin_.longitude_deg + xy.x / (kEarthRadiusM * cos_lat0_) / kDegToRad;
  g.elevation_cm = origin_.elevation_cm;
  return g;
}

std::vector<Vec2> convex_hull(std::vector<Vec2> points) {
  std::sort(points.begin(), points.end(), [](Vec2 a, Vec2 b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
  points.erase(std::unique(points.begin(), points.end()), points.end());
  if (points.size() < 3) throw Error(Errc::CollinearInput, "fewer than 3 distinct points");

  std::vector<Vec2> hull(2 * points.size());
  std::size_t k = 0;
  for (const auto& p : points) {
    while (k >= 2 && cross(hull[k - 1] - hull[k - 2], p - hull[k - 2]) <= 0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = points.size() - 1, lower = k + 1; i-- > 0;) {
    const auto& p = points[i];
    while (k >= lower && cross(hull[k - 1] - hull[k - 2], p - hull[k - 2]) <= 0) --k;
    hull[k++] = p;
  }
  hull.resize(k - 1);
  if (hull.size() < 3) throw Error(Errc::CollinearInput, "all points collinear");
  return hull;
}

bool point_in_convex(Vec2 p, const std::vector<Vec2>& ccw_hull) {
  const std::size_t n = ccw_hull.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 a = ccw_hull[i];
    const Vec2 b = ccw_hull[(i + 1) % n];
    const Vec2 e = b - a;
    if (cross(e, p - a) < -kEdgeEps * std::max(1.0, norm(e))) return false;
  }
  return true;
}

bool point_in_polygon(Vec2 p, const std::vector<Vec2>& polygon) {
  const std::size_t n = polygon.size();
  bool inside = false;
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const Vec2 a = polygon[j];
    const Vec2 b = polygon[i];
    if (point_segment_distance(p, a, b) <= kEdgeEps) return true;
    if ((a.y > p.y) != (b.y > p.y)) {
      const double x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
      if (p.x < x_cross) inside = !inside;
    }
  }
  return inside;
}

bool point_in_lane(Vec2 p, const LanePolygon& lane, Containment mode) {
  return mode == Containment::Hull ? point_in_convex(p, lane.hull) : point_in_polygon(p, lane.boundary);
}

double point_segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a;
  const double len2 = dot(ab, ab);
  double t = len2 > 0.0 ? dot(p - a, ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return norm(p - (a + ab * t));
}

double distance_to_centerline(Vec2 p, const LanePolygon& lane) {
  double best = INFINITY;
  for (std::size_t i = 0; i + 1 < lane.centerline.size(); ++i) {
    best = std::min(best, point_segment_distance(p, lane.centerline[i], lane.centerline[i + 1]));
  }
  return best;
}

double distance_to_stop_line(Vec2 p, const LanePolygon& lane) {
  return point_segment_distance(p, lane.stop_line.a, lane.stop_line.b);
}

double bearing_deg(Vec2 a, Vec2 b) {
  double deg = std::atan2(b.x - a.x, b.y - a.y) / kDegToRad;
  if (deg < 0.0) deg += 360.0;
  return deg;
}

std::vector<LanePolygon> build_lane_polygons(const MapMessage& map) {
  const double half = map.lane_width_cm / 200.0;
  std::vector<LanePolygon> out;
  out.reserve(map.lanes.size());
  for (const auto& desc : map.lanes) {
    if (desc.nodes.size() < 2) {
      throw Error(Errc::DegenerateLane, fmt::format("lane {} has fewer than 2 nodes", desc.lane_id));
    }
    if (half <= 0.0) throw Error(Errc::DegenerateLane, fmt::format("lane {} has zero width", desc.lane_id));

    LanePolygon lane;
    lane.intersection_id = map.intersection_id;
    lane.lane_id = desc.lane_id;
    lane.signal_group_id = desc.signal_group_id;
    lane.connecting_lane_id = desc.connecting_lane_id;
    for (const auto& node : desc.nodes) lane.centerline.push_back({node.dx_cm / 100.0, node.dy_cm / 100.0});
    const auto& c = lane.centerline;
    const std::size_t n = c.size();
    for (std::size_t i = 0; i + 1 < n; ++i) {
      if (c[i] == c[i + 1]) {
        throw Error(Errc::DegenerateLane, fmt::format("lane {} repeats node {}", desc.lane_id, i));
      }
    }

    std::vector<Vec2> left(n), right(n);
    for (std::size_t i = 0; i < n; ++i) {
      Vec2 offset;
      if (i == 0) {
        offset = left_normal(c[0], c[1]) * half;
      } else if (i == n - 1) {
        offset = left_normal(c[n - 2], c[n - 1]) * half;
      } else {
        const Vec2 n1 = left_normal(c[i - 1], c[i]);
        const Vec2 n2 = left_normal(c[i], c[i + 1]);
        const Vec2 sum = n1 + n2;
        const double len = norm(sum);
        if (len < 1e-12) {
          offset = n1 * half;
        } else {
          const Vec2 miter = sum * (1.0 / len);
          offset = miter * (half / std::max(dot(miter, n1), kMinMiterCos));
        }
      }
      left[i] = c[i] + offset;
      right[i] = c[i] - offset;
    }
    lane.boundary.push_back(left[0]);
    for (std::size_t i = 0; i < n; ++i) lane.boundary.push_back(right[i]);
    for (std::size_t i = n - 1; i >= 1; --i) lane.boundary.push_back(left[i]);

    try {
      lane.hull = convex_hull(lane.boundary);
    } catch (const Error&) {
      throw Error(Errc::DegenerateLane, fmt::format("lane {} has no area", desc.lane_id));
    }
    lane.stop_line = {left[0], right[0]};
    lane.direction_deg = bearing_deg(c[1], c[0]);
    out.push_back(std::move(lane));
  }
  return out;
}

IntersectionGeometry::IntersectionGeometry(MapMessage m)
    : map(std::move(m)), frame(map.ref_point), lanes(build_lane_polygons(map)) {}

const LanePolygon* IntersectionGeometry::find_lane(std::uint8_t lane_id) const {
  for (const auto& lane : lanes) {
    if (lane.lane_id == lane_id) return &lane;
  }
  return nullptr;
}

std::string approach_label(double direction_deg) {
  static const char* names[] = {"NB", "EB", "SB", "WB"};
  const int quadrant = static_cast<int>(std::lround(direction_deg / 90.0)) % 4;
  return names[quadrant];
}

std::string movement_label(const IntersectionGeometry& geometry, const LanePolygon& lane) {
  std::string label = approach_label(lane.direction_deg);
  const LanePolygon* egress = lane.connecting_lane_id ? geometry.find_lane(lane.connecting_lane_id) : nullptr;
  if (!egress) return label;
  // Egress lanes run away from the intersection: travel is node 0 -> node 1.
  const double out_bearing = bearing_deg(egress->centerline[0], egress->centerline[1]);
  const double delta = wrap_180(out_bearing - lane.direction_deg);
  if (std::abs(delta) < 45.0) return label + "-T";
  if (std::abs(delta) > 135.0) return label + "-U";
  return label + (delta < 0.0 ? "-L" : "-R");
}

std::map<std::uint8_t, std::string> signal_group_movements(const IntersectionGeometry& geometry) {
  std::map<std::uint8_t, std::string> out;
  for (const auto& lane : geometry.lanes) {
    if (lane.signal_group_id == 0) continue;
    const auto label = movement_label(geometry, lane);
    auto it = out.find(lane.signal_group_id);
    if (it == out.end()) {
      out.emplace(lane.signal_group_id, label);
    } else if (!it->second.ends_with("-T") && label.ends_with("-T")) {
      it->second = label;
    }
  }
  return out;
}

bool LaneIndex::update(const MapMessage& map) {
  auto it = geometries_.find(map.intersection_id);
  if (it != geometries_.end() && it->second.map == map) return false;
  IntersectionGeometry geometry(map);
  if (it != geometries_.end()) {
    it->second = std::move(geometry);
  } else {
    geometries_.emplace(map.intersection_id, std::move(geometry));
  }
  return true;
}

const IntersectionGeometry* LaneIndex::nearest(double latitude_deg, double longitude_deg) const {
  const IntersectionGeometry* best = nullptr;
  double best_d = kCoverageRadiusM;
  for (const auto& [id, geometry] : geometries_) {
    const double d = norm(geometry.frame.to_xy(latitude_deg, longitude_deg));
    if (d <= best_d) {
      best_d = d;
      best = &geometry;
    }
  }
  return best;
}

const IntersectionGeometry* LaneIndex::find(std::uint16_t intersection_id) const {
  auto it = geometries_.find(intersection_id);
  return it == geometries_.end() ? nullptr : &it->second;
}

std::optional<LaneMatch> LaneIndex::match(double latitude_deg, double longitude_deg) const {
  const IntersectionGeometry* geometry = nearest(latitude_deg, longitude_deg);
  if (!geometry) return std::nullopt;
  const Vec2 p = geometry->frame.to_xy(latitude_deg, longitude_deg);
  const LanePolygon* best = nullptr;
  double best_d = INFINITY;
  for (const auto& lane : geometry->lanes) {
    if (!point_in_lane(p, lane, mode_)) continue;
    const double d = distance_to_centerline(p, lane);
    if (d < best_d) {
      best_d = d;
      best = &lane;
    }
  }
  if (!best) return std::nullopt;
  return LaneMatch{best->intersection_id, best->lane_id, best->signal_group_id, distance_to_stop_line(p, *best)};
}

std::optional<LaneMatch> match_lane(double latitude_deg, double longitude_deg, const std::vector<MapMessage>& maps,
                                    Containment mode) {
  LaneIndex index(mode);
  for (const auto& map : maps) index.update(map);
  return index.match(latitude_deg, longitude_deg);
}

}  // namespace corridor
