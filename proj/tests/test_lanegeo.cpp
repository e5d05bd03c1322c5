#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <set>

#include "corridor/error.hpp"
#include "corridor/fixtures.hpp"
#include "corridor/lanegeo.hpp"
#include "generators.hpp"

using namespace corridor;

namespace {

MapMessage single_lane(std::vector<NodeOffset> nodes, std::uint16_t width_cm = 300) {
  MapMessage map;
  map.intersection_id = 1;
  map.ref_point = {43.0716, -89.4009, 0};
  map.lane_width_cm = width_cm;
  LaneDescriptor lane;
  lane.lane_id = 1;
  lane.signal_group_id = 2;
  lane.nodes = std::move(nodes);
  map.lanes.push_back(lane);
  return map;
}

// Ray-casting oracle, written independently of the library: a point on an
// edge is inside.
bool ray_cast_oracle(Vec2 p, const std::vector<Vec2>& poly) {
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 a = poly[i], b = poly[(i + 1) % n];
    const double cr = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    const bool within = std::min(a.x, b.x) - 1e-9 <= p.x && p.x <= std::max(a.x, b.x) + 1e-9 &&
                        std::min(a.y, b.y) - 1e-9 <= p.y && p.y <= std::max(a.y, b.y) + 1e-9;
    if (std::abs(cr) <= 1e-9 * std::hypot(b.x - a.x, b.y - a.y) && within) return true;
  }
  int crossings = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 a = poly[i], b = poly[(i + 1) % n];
    if ((a.y <= p.y && b.y > p.y) || (b.y <= p.y && a.y > p.y)) {
      const double t = (p.y - a.y) / (b.y - a.y);
      if (p.x < a.x + t * (b.x - a.x)) ++crossings;
    }
  }
  return crossings % 2 == 1;
}

// Brute-force hull: (i, j) is a hull edge when every other point lies
// strictly left of i->j, or on the segment between them.
std::set<std::pair<double, double>> brute_hull(const std::vector<Vec2>& pts) {
  std::set<std::pair<double, double>> out;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (std::size_t j = 0; j < pts.size(); ++j) {
      if (i == j || pts[i] == pts[j]) continue;
      bool edge = true;
      for (std::size_t k = 0; k < pts.size() && edge; ++k) {
        if (k == i || k == j) continue;
        const double cr = cross(pts[j] - pts[i], pts[k] - pts[i]);
        if (cr < 0) edge = false;
        if (cr == 0) {
          const double t = dot(pts[k] - pts[i], pts[j] - pts[i]) / dot(pts[j] - pts[i], pts[j] - pts[i]);
          if (t < 0 || t > 1) edge = false;
        }
      }
      if (edge) {
        out.insert({pts[i].x, pts[i].y});
        out.insert({pts[j].x, pts[j].y});
      }
    }
  }
  return out;
}

double segment_distance_oracle(Vec2 p, Vec2 a, Vec2 b) {
  // Sample-free closed form via projections on both endpoints.
  const double l2 = (b.x - a.x) * (b.x - a.x) + (b.y - a.y) * (b.y - a.y);
  const double t = ((p.x - a.x) * (b.x - a.x) + (p.y - a.y) * (b.y - a.y)) / l2;
  if (t <= 0) return std::hypot(p.x - a.x, p.y - a.y);
  if (t >= 1) return std::hypot(p.x - b.x, p.y - b.y);
  return std::abs((b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)) / std::sqrt(l2);
}

Errc error_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return Errc::InvalidRange;
}

}  // namespace

TEST_CASE("straight lane boundary is the offset rectangle") {
  const auto lanes = build_lane_polygons(single_lane({{0, 0}, {0, 3000}}));
  REQUIRE(lanes.size() == 1);
  const auto& b = lanes[0].boundary;
  REQUIRE(b.size() == 4);
  CHECK(b[0] == Vec2{-1.5, 0});
  CHECK(b[1] == Vec2{1.5, 0});
  CHECK(b[2] == Vec2{1.5, 30});
  CHECK(b[3] == Vec2{-1.5, 30});
  CHECK(lanes[0].hull.size() == 4);
  CHECK(lanes[0].direction_deg == doctest::Approx(180.0));
  CHECK(lanes[0].stop_line.a == Vec2{-1.5, 0});
  CHECK(lanes[0].stop_line.b == Vec2{1.5, 0});
}

TEST_CASE("degenerate lanes are rejected") {
  CHECK(error_of([] { build_lane_polygons(single_lane({{0, 0}, {0, 0}, {0, 100}})); }) == Errc::DegenerateLane);
  CHECK(error_of([] { build_lane_polygons(single_lane({{0, 0}, {0, 100}}, 0)); }) == Errc::DegenerateLane);
}

TEST_CASE("L-shaped lane has six boundary vertices and a covering hull") {
  const auto lanes = build_lane_polygons(single_lane({{0, 0}, {0, 3000}, {3000, 3000}}));
  const auto& lane = lanes[0];
  CHECK(lane.boundary.size() == 6);
  CHECK(lane.hull.size() <= 6);
  const auto oracle = brute_hull(lane.boundary);
  std::set<std::pair<double, double>> got;
  for (auto v : lane.hull) got.insert({v.x, v.y});
  CHECK(got == oracle);
  for (auto v : lane.boundary) CHECK(point_in_convex(v, lane.hull));
}

TEST_CASE("convex hull examples") {
  const auto sq = convex_hull({{0, 0}, {1, 0}, {1, 1}, {0, 1}, {0.5, 0.5}});
  CHECK(sq.size() == 4);
  CHECK(error_of([] { convex_hull({{0, 0}, {1, 1}, {2, 2}}); }) == Errc::CollinearInput);
  // Collinear points on an edge are dropped.
  CHECK(convex_hull({{0, 0}, {1, 0}, {2, 0}, {2, 2}, {0, 2}}).size() == 4);
}

TEST_CASE("convex hull matches the brute-force oracle on random discs") {
  testing::Gen gen(21);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Vec2> pts;
    while (pts.size() < 100) {
      const double x = gen.uniform(-1, 1), y = gen.uniform(-1, 1);
      if (x * x + y * y <= 1) pts.push_back({x, y});
    }
    const auto hull = convex_hull(pts);
    std::set<std::pair<double, double>> got;
    for (auto v : hull) got.insert({v.x, v.y});
    CHECK(got == brute_hull(pts));
    double area2 = 0;
    for (std::size_t i = 0; i < hull.size(); ++i) area2 += cross(hull[i], hull[(i + 1) % hull.size()]);
    CHECK(area2 > 0);  // counterclockwise
  }
}

TEST_CASE("point_in_lane examples") {
  const auto lane = build_lane_polygons(single_lane({{0, 0}, {0, 3000}}))[0];
  CHECK(point_in_lane({0, 15}, lane));
  CHECK_FALSE(point_in_lane({10, 15}, lane));
  CHECK(point_in_lane({1.5, 15}, lane));
  CHECK(ray_cast_oracle({1.5, 15}, lane.boundary));
  CHECK(point_in_lane({1.5, 15}, lane, Containment::Boundary));
}

TEST_CASE("hull containment agrees with ray casting on convex lanes") {
  testing::Gen gen(22);
  int disagreements = 0;
  int inside = 0;
  for (int i = 0; i < 10000; ++i) {
    const double angle = gen.uniform(0, 2 * std::numbers::pi);
    const double len = gen.uniform(5, 200);
    const auto dx = static_cast<std::int32_t>(std::lround(std::cos(angle) * len * 50)) * 2;
    const auto dy = static_cast<std::int32_t>(std::lround(std::sin(angle) * len * 50)) * 2;
    const auto ox = static_cast<std::int32_t>(gen.range(-2000, 2000)) * 2;
    const auto oy = static_cast<std::int32_t>(gen.range(-2000, 2000)) * 2;
    const auto width = static_cast<std::uint16_t>(gen.range(200, 500));
    const auto lane = build_lane_polygons(single_lane({{ox, oy}, {ox + dx, oy + dy}}, width))[0];
    Vec2 p;
    if (gen.coin(0.2)) {
      // Exactly on a boundary vertex or edge midpoint.
      const auto k = static_cast<std::size_t>(gen.range(0, 3));
      const Vec2 a = lane.boundary[k], b = lane.boundary[(k + 1) % 4];
      p = gen.coin() ? a : Vec2{(a.x + b.x) / 2, (a.y + b.y) / 2};
    } else {
      const Vec2 c = lane.centerline[0];
      p = {c.x + gen.uniform(-len, len), c.y + gen.uniform(-len, len)};
    }
    const bool got = point_in_lane(p, lane);
    if (got != ray_cast_oracle(p, lane.boundary)) ++disagreements;
    inside += got;
  }
  CHECK(disagreements == 0);
  CHECK(inside > 1000);
}

TEST_CASE("every boundary vertex is inside its lane") {
  testing::Gen gen(23);
  int checked = 0;
  for (int i = 0; i < 300; ++i) {
    auto map = gen.map(4, 6);
    map.lane_width_cm = static_cast<std::uint16_t>(gen.range(100, 800));
    std::vector<LanePolygon> lanes;
    try {
      lanes = build_lane_polygons(map);
    } catch (const Error& e) {
      CHECK(e.code() == Errc::DegenerateLane);
      continue;
    }
    for (const auto& lane : lanes) {
      for (auto v : lane.boundary) {
        CHECK(point_in_lane(v, lane));
        ++checked;
      }
    }
  }
  CHECK(checked > 1000);
}

TEST_CASE("distance_to_stop_line") {
  const auto lane = build_lane_polygons(single_lane({{0, 0}, {0, 10000}}))[0];
  CHECK(distance_to_stop_line({0, 45.3}, lane) == doctest::Approx(45.3));
  CHECK(distance_to_stop_line({0.7, 0}, lane) < 1e-12);
  CHECK(point_segment_distance({3, 4}, {0, 0}, {1, 0}) == doctest::Approx(std::sqrt(20.0)));

  testing::Gen gen(24);
  for (int i = 0; i < 5000; ++i) {
    const Vec2 a{gen.uniform(-50, 50), gen.uniform(-50, 50)};
    const Vec2 b{gen.uniform(-50, 50), gen.uniform(-50, 50)};
    const Vec2 p{gen.uniform(-80, 80), gen.uniform(-80, 80)};
    REQUIRE(point_segment_distance(p, a, b) == doctest::Approx(segment_distance_oracle(p, a, b)).epsilon(1e-9));
  }
}

TEST_CASE("local frame round trip stays under a centimetre within 2 km") {
  const LocalFrame frame({43.0716, -89.4009, 0});
  testing::Gen gen(25);
  for (int i = 0; i < 10000; ++i) {
    const Vec2 p{gen.uniform(-2000, 2000), gen.uniform(-2000, 2000)};
    const auto g = frame.to_geo(p);
    const auto back = frame.to_xy(g.latitude_deg, g.longitude_deg);
    REQUIRE(norm(back - p) < 0.01);
  }
  // 0.001 deg of latitude is about 111 m.
  CHECK(frame.to_xy(43.0726, -89.4009).y == doctest::Approx(111.195).epsilon(1e-4));
}

TEST_CASE("fixture signal groups resolve to their movements") {
  const std::map<std::uint8_t, std::string> expect1{{1, "SB-L"}, {2, "NB-T"}, {3, "EB-L"}, {4, "WB-T"},
                                                    {5, "NB-L"}, {6, "SB-T"}, {7, "WB-L"}, {8, "EB-T"}};
  const std::map<std::uint8_t, std::string> expect2{{2, "NB-T"}, {6, "SB-T"}, {3, "SB-L"}, {9, "WB-R"}, {4, "WB-T"}};
  CHECK(signal_group_movements(IntersectionGeometry(fixtures::build_map(fixtures::park_dayton()))) == expect1);
  CHECK(signal_group_movements(IntersectionGeometry(fixtures::build_map(fixtures::intersection_2()))) == expect2);
}

TEST_CASE("fixture maps survive validation") {
  for (const auto& spec : fixtures::corridor()) {
    const auto map = fixtures::build_map(spec);
    CHECK(validate(map).ok());
    CHECK_NOTHROW(build_lane_polygons(map));
  }
}

TEST_CASE("SB right-turn lane at Fish Hatchery matches with the shared through group") {
  const auto map = fixtures::build_map(fixtures::park_fish_hatchery());
  const auto lane_id = fixtures::ingress_lane_id(map, "SB-R");
  REQUIRE(lane_id != 0);
  const auto p = fixtures::point_on_lane(map, lane_id, 20.0);
  const auto m = match_lane(p.latitude_deg, p.longitude_deg, {map});
  REQUIRE(m.has_value());
  CHECK(m->lane_id == lane_id);
  CHECK(m->signal_group_id == 6);
  CHECK(m->intersection_id == 3);
  CHECK(m->distance_to_stop_line_m == doctest::Approx(20.0).epsilon(1e-3));
}

TEST_CASE("match_lane out of coverage") {
  const auto map = fixtures::build_map(fixtures::park_dayton());
  // About 1.1 km north.
  CHECK_FALSE(match_lane(43.0816, -89.4009, {map}).has_value());
  CHECK_FALSE(match_lane(43.0, -89.0, {}).has_value());
}

TEST_CASE("overlapping hulls resolve to the nearer centerline") {
  MapMessage map = single_lane({{0, 0}, {0, 4000}}, 400);
  LaneDescriptor b;
  b.lane_id = 2;
  b.signal_group_id = 4;
  b.nodes = {{100, 0}, {1100, 4000}};
  map.lanes.push_back(b);
  const IntersectionGeometry geo(map);
  testing::Gen gen(26);
  int both = 0;
  for (int i = 0; i < 2000; ++i) {
    const Vec2 p{gen.uniform(-2, 4), gen.uniform(0, 10)};
    const bool in_a = point_in_lane(p, geo.lanes[0]);
    const bool in_b = point_in_lane(p, geo.lanes[1]);
    if (!(in_a && in_b)) continue;
    ++both;
    const double da = segment_distance_oracle(p, {0, 0}, {0, 40});
    const double db = segment_distance_oracle(p, {1, 0}, {11, 40});
    if (std::abs(da - db) < 1e-9) continue;
    const auto g = geo.frame.to_geo(p);
    const auto m = match_lane(g.latitude_deg, g.longitude_deg, {map});
    REQUIRE(m.has_value());
    CHECK(m->lane_id == (da < db ? 1 : 2));
  }
  CHECK(both > 50);
}

TEST_CASE("match_lane is translation invariant") {
  const auto base = fixtures::build_map(fixtures::park_dayton());
  testing::Gen gen(27);
  int matched = 0;
  for (int i = 0; i < 500; ++i) {
    const auto lane_id = static_cast<std::uint8_t>(gen.range(1, 12));
    const auto p = fixtures::point_on_lane(base, lane_id, gen.uniform(1, 99));
    const double dlat = gen.range(-100000, 100000) * 1e-7;
    const double dlon = gen.range(-100000, 100000) * 1e-7;
    auto shifted = base;
    shifted.ref_point.latitude_deg += dlat;
    shifted.ref_point.longitude_deg += dlon;
    const auto a = match_lane(p.latitude_deg, p.longitude_deg, {base});
    const auto b = match_lane(p.latitude_deg + dlat, p.longitude_deg + dlon, {shifted});
    REQUIRE(a.has_value() == b.has_value());
    if (a) {
      CHECK(a->lane_id == b->lane_id);
      ++matched;
    }
  }
  CHECK(matched == 500);
}

TEST_CASE("lane index rebuilds only on change and picks the nearest intersection") {
  LaneIndex index;
  const auto dayton = fixtures::build_map(fixtures::park_dayton());
  const auto regent = fixtures::build_map(fixtures::park_regent());
  CHECK(index.update(dayton));
  CHECK_FALSE(index.update(dayton));
  CHECK(index.update(regent));
  const auto p = fixtures::point_on_lane(regent, fixtures::ingress_lane_id(regent, "SB-T"), 30.0);
  const auto m = index.match(p.latitude_deg, p.longitude_deg);
  REQUIRE(m.has_value());
  CHECK(m->intersection_id == 4);
  CHECK(m->signal_group_id == 6);
}
