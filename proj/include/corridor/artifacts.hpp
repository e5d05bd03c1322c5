#pragma once

// Files the command-line tool emits: GeoJSON views, CSV series, the run
// manifest, and structural checks for every one of them.

#include <filesystem>
#include <string>
#include <vector>

#include "corridor/json_io.hpp"
#include "corridor/messages.hpp"
#include "corridor/pipeline.hpp"

namespace corridor {

inline constexpr const char* kToolVersion = "1.0.0";

// File name -> format id, e.g. "integrated.ndjson" -> "integrated-record/1".
const json& format_versions();

// One Point per record (speed etc. in properties) and one LineString per
// vehicle with parallel per-vertex speed and time arrays.
json trajectory_geojson(const std::vector<IntegratedRecord>& records);

// Lane polygons and stop lines. Lanes that fail to build are skipped.
json lanes_geojson(const std::vector<MapMessage>& maps);

std::string queue_csv(const std::vector<QueuePoint>& series);

struct FileCheck {
  std::string file;  // relative to the checked directory
  bool ok = true;
  std::string reason;
  std::size_t items = 0;  // lines, features or rows
};

// Checks one file by its name; unknown names are reported as failures.
FileCheck check_artifact(const std::filesystem::path& file, const std::filesystem::path& root = {});

// Every known artifact under dir, archive segments included.
std::vector<FileCheck> selfcheck(const std::filesystem::path& dir);

}  // namespace corridor
