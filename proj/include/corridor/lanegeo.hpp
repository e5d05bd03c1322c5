#pragma once

// Lane polygons built from MAP node lists, point-in-lane tests and lane
// matching. Geometry runs in a local east/north metre frame centred on the
// MAP reference point.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "corridor/messages.hpp"

namespace corridor {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Vec2&) const = default;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(Vec2 a, double k) { return {a.x * k, a.y * k}; }
inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
double norm(Vec2 v);

inline constexpr double kEarthRadiusM = 6371008.8;

// Equirectangular projection around an origin.
class LocalFrame {
 public:
  LocalFrame() = default;
  explicit LocalFrame(const GeoPoint& origin);

  Vec2 to_xy(double latitude_deg, double longitude_deg) const;
  GeoPoint to_geo(Vec2 xy) const;
  const GeoPoint& origin() const { return origin_; }

 private:
  GeoPoint origin_;
  double cos_lat0_ = 1.0;
};

struct Segment {
  Vec2 a;
  Vec2 b;
};

struct LanePolygon {
  std::uint16_t intersection_id = 0;
  std::uint8_t lane_id = 0;
  std::uint8_t signal_group_id = 0;
  std::uint8_t connecting_lane_id = 0;
  std::vector<Vec2> centerline;  // centerline[0] is the stop-line end
  std::vector<Vec2> boundary;    // L0, R0, R1..Rn-1, Ln-1..L1
  std::vector<Vec2> hull;        // counterclockwise
  Segment stop_line;
  double direction_deg = 0.0;  // bearing of travel toward the stop line
};

enum class Containment { Hull, Boundary };

// Throws DegenerateLane on consecutive duplicate nodes or a zero lane width.
std::vector<LanePolygon> build_lane_polygons(const MapMessage& map);

// Counterclockwise hull without collinear points. Throws CollinearInput.
std::vector<Vec2> convex_hull(std::vector<Vec2> points);

// Closed containment: points on an edge count as inside.
bool point_in_convex(Vec2 p, const std::vector<Vec2>& ccw_hull);
bool point_in_polygon(Vec2 p, const std::vector<Vec2>& polygon);
bool point_in_lane(Vec2 p, const LanePolygon& lane, Containment mode = Containment::Hull);

double point_segment_distance(Vec2 p, Vec2 a, Vec2 b);
double distance_to_centerline(Vec2 p, const LanePolygon& lane);
double distance_to_stop_line(Vec2 p, const LanePolygon& lane);

// Bearing in degrees clockwise from north of the vector from a to b.
double bearing_deg(Vec2 a, Vec2 b);

struct IntersectionGeometry {
  MapMessage map;
  LocalFrame frame;
  std::vector<LanePolygon> lanes;

  explicit IntersectionGeometry(MapMessage m);
  const LanePolygon* find_lane(std::uint8_t lane_id) const;
};

// "SB-T", "EB-L" ... derived from the lane's approach and the egress lane it
// connects to. Lanes without a connection yield just the approach.
std::string movement_label(const IntersectionGeometry& geometry, const LanePolygon& lane);
std::string approach_label(double direction_deg);

// Movement label for every signal group served by an ingress lane. When
// several lanes share a group, the through lane names it.
std::map<std::uint8_t, std::string> signal_group_movements(const IntersectionGeometry& geometry);

struct LaneMatch {
  std::uint16_t intersection_id = 0;
  std::uint8_t lane_id = 0;
  std::uint8_t signal_group_id = 0;
  double distance_to_stop_line_m = 0.0;
};

inline constexpr double kCoverageRadiusM = 500.0;

// Cache of intersection geometry keyed by intersection id. Rebuilds a
// geometry only when its MAP content changes.
class LaneIndex {
 public:
  explicit LaneIndex(Containment mode = Containment::Hull) : mode_(mode) {}

  // Returns true when the MAP was new or changed.
  bool update(const MapMessage& map);
  std::optional<LaneMatch> match(double latitude_deg, double longitude_deg) const;

  // Nearest intersection with its ref point within the coverage radius.
  const IntersectionGeometry* nearest(double latitude_deg, double longitude_deg) const;
  const IntersectionGeometry* find(std::uint16_t intersection_id) const;
  const std::map<std::uint16_t, IntersectionGeometry>& intersections() const { return geometries_; }
  bool empty() const { return geometries_.empty(); }

 private:
  Containment mode_;
  std::map<std::uint16_t, IntersectionGeometry> geometries_;
};

std::optional<LaneMatch> match_lane(double latitude_deg, double longitude_deg, const std::vector<MapMessage>& maps,
                                    Containment mode = Containment::Hull);

}  // namespace corridor
