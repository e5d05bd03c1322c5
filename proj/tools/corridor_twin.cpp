// corridor-twin: encode/decode utilities, replay, simulate, analyze, stream
// and selfcheck over the corridor digital-twin library.
//
// Exit codes: 0 success, 1 usage, 2 data error, 3 internal error.

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "corridor/artifacts.hpp"
#include "corridor/codec.hpp"
#include "corridor/error.hpp"
#include "corridor/fixtures.hpp"
#include "corridor/pipeline.hpp"
#include "corridor/simulator.hpp"

using namespace corridor;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kInternal = 3 };

std::atomic<bool> g_stop{false};

extern "C" void on_signal(int) { g_stop.store(true); }

void install_signal_handlers() {
  struct sigaction sa {};
  sa.sa_handler = on_signal;
  sigemptyset(&sa.sa_mask);
  sigaction(SIGINT, &sa, nullptr);
  sigaction(SIGTERM, &sa, nullptr);
}

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  bool strict = false;
  bool pipe = false;
  std::optional<int> year;
};

struct RunConfig {
  int year = 2023;
  FeedbackConfig feedback;
  EdgeTopology topology = EdgeTopology::single();
  PipelineConfig pipeline;
  bool threaded = false;
  bool paced = false;
  double speed = 1.0;
  std::vector<std::string> maps;
};

json read_json(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw Error(Errc::SourceUnavailable, "cannot open " + file.string());
  try {
    return json::parse(in, nullptr, true, true);
  } catch (const json::exception& e) {
    throw Error(Errc::InvalidConfig, fmt::format("{}: {}", file.string(), e.what()));
  }
}

RunConfig load_config(const Globals& g) {
  RunConfig c;
  if (!g.config.empty()) {
    const json j = read_json(g.config);
    static const std::set<std::string> known{"year",     "feedback", "topology", "dedup_window_ms",
                                             "duplicate_horizon_ms", "ack_every", "queue_capacity",
                                             "threaded", "paced",    "speed",    "maps"};
    for (const auto& [k, _] : j.items()) {
      if (!known.count(k)) spdlog::warn("config: ignoring unknown key '{}'", k);
    }
    try {
      c.year = j.value("year", c.year);
      if (j.contains("feedback")) c.feedback = j["feedback"].get<FeedbackConfig>();
      if (j.contains("topology")) c.topology = j["topology"].get<EdgeTopology>();
      c.pipeline.central.dedup_window_ms = j.value("dedup_window_ms", c.pipeline.central.dedup_window_ms);
      c.pipeline.central.duplicate_horizon_ms = j.value("duplicate_horizon_ms", c.pipeline.central.duplicate_horizon_ms);
      c.pipeline.ack_every = j.value("ack_every", c.pipeline.ack_every);
      c.pipeline.queue_capacity = j.value("queue_capacity", c.pipeline.queue_capacity);
      c.threaded = j.value("threaded", false);
      c.paced = j.value("paced", false);
      c.speed = j.value("speed", 1.0);
      c.maps = j.value("maps", std::vector<std::string>{});
    } catch (const json::exception& e) {
      throw Error(Errc::InvalidConfig, fmt::format("{}: {}", g.config, e.what()));
    }
  }
  if (g.year) c.year = *g.year;
  if (c.year < 1970 || c.year > 9999) throw Error(Errc::InvalidConfig, fmt::format("year {}", c.year));
  check_topology(c.topology);
  c.pipeline.central.year = c.year;
  c.pipeline.central.feedback = c.feedback;
  return c;
}

// A fixture name or a JSON file holding one MAP object or an array of them.
std::vector<MapMessage> resolve_maps(const std::vector<std::string>& specs) {
  std::vector<MapMessage> out;
  for (const auto& spec : specs) {
    auto named = fixtures::named_maps(spec);
    if (!named.empty()) {
      out.insert(out.end(), named.begin(), named.end());
      continue;
    }
    json j = read_json(spec);
    try {
      if (j.is_array()) {
        for (const auto& m : j) out.push_back(m.get<MapMessage>());
      } else {
        out.push_back(j.get<MapMessage>());
      }
    } catch (const json::exception& e) {
      throw Error(Errc::InvalidMessage, fmt::format("{}: {}", spec, e.what()));
    }
  }
  return out;
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::SourceUnavailable, "cannot write " + file.string());
  out << text;
}

void write_json(const fs::path& file, const json& j) { write_text(file, j.dump(2) + "\n"); }

void write_manifest(const fs::path& out, const std::string& subcommand, const Globals& g,
                    const std::vector<std::string>& inputs, const json& options, std::vector<std::string> outputs) {
  json formats = json::object();
  for (const auto& o : outputs) {
    if (format_versions().contains(o)) formats[o] = format_versions()[o];
  }
  formats["manifest.json"] = format_versions()["manifest.json"];
  write_json(out / "manifest.json", {{"tool", "corridor-twin"},
                                     {"version", kToolVersion},
                                     {"subcommand", subcommand},
                                     {"inputs", inputs},
                                     {"config", g.config.empty() ? json(nullptr) : json(g.config)},
                                     {"seed", g.seed ? json(*g.seed) : json(nullptr)},
                                     {"out", g.out},
                                     {"options", options},
                                     {"formats", formats},
                                     {"outputs", outputs}});
}

// ---- pipeline runs shared by replay, simulate --pipe and stream ----

struct RunOutputs {
  std::ofstream integrated, feedback, integrity, dead;
  std::vector<IntegratedRecord> records;
  std::vector<MapMessage> maps;
  std::set<std::pair<std::uint16_t, std::string>> seen_maps;

  explicit RunOutputs(const fs::path& out)
      : integrated(out / "integrated.ndjson", std::ios::binary | std::ios::trunc),
        feedback(out / "feedback.ndjson", std::ios::binary | std::ios::trunc),
        integrity(out / "integrity.ndjson", std::ios::binary | std::ios::trunc),
        dead(out / "dead_letters.ndjson", std::ios::binary | std::ios::trunc) {
    if (!integrated || !feedback || !integrity || !dead) {
      throw Error(Errc::SourceUnavailable, "cannot write outputs in " + out.string());
    }
  }

  Sinks sinks() {
    return {[this](const IntegratedRecord& r) {
              integrated << to_ndjson_line(json(r));
              records.push_back(r);
            },
            [this](const FeedbackMessage& f) { feedback << to_ndjson_line(json(f)); },
            [this](const json& j) { integrity << to_ndjson_line(j); },
            [this](const DeadLetter& d) {
              spdlog::debug("dead letter from {}: {}", d.frame.rsu_id, d.reason);
              dead << to_ndjson_line(json(d));
            }};
  }

  void note_map(const MapMessage& map) {
    if (seen_maps.insert({map.intersection_id, json(map).dump()}).second) maps.push_back(map);
  }
};

// Passes frames through while remembering any MAP on the way.
class MapSniffer : public FrameSource {
 public:
  MapSniffer(FrameSource& inner, RunOutputs& outputs) : inner_(inner), outputs_(outputs) {}
  std::optional<FrameLogEntry> next() override {
    auto f = inner_.next();
    if (f) sniff(*f);
    return f;
  }
  const SourceStats& stats() const override { return inner_.stats(); }

  void sniff(const FrameLogEntry& f) {
    // Type lives in the top three bits of the first byte.
    if (f.payload_hex.size() < 2) return;
    try {
      auto first = from_hex(std::string_view(f.payload_hex).substr(0, 2));
      if ((first[0] >> 5) != static_cast<int>(MsgType::Map)) return;
      auto m = decode_frame(f.payload_hex);
      if (const auto* map = std::get_if<MapMessage>(&m)) {
        std::lock_guard lock(mu_);
        outputs_.note_map(*map);
      }
    } catch (const Error&) {
    }
  }

 private:
  FrameSource& inner_;
  RunOutputs& outputs_;
  std::mutex mu_;
};

std::uint64_t decodable(const json& counters) {
  std::uint64_t n = 0;
  for (const auto& w : counters["workers"]) n += w["processed"].get<std::uint64_t>() - w["dead_letters"].get<std::uint64_t>();
  return n;
}

void prepare_archive(const fs::path& dir) {
  // The run owns its archive; a previous run's segments are replaced.
  if (fs::exists(dir / "records")) fs::remove_all(dir);
}

std::vector<std::string> finish_outputs(const fs::path& out, RunOutputs& outputs, const json& counters,
                                        const SourceStats& source) {
  outputs.integrated.flush();
  outputs.feedback.flush();
  outputs.integrity.flush();
  outputs.dead.flush();
  std::vector<std::string> files{"integrated.ndjson", "feedback.ndjson", "integrity.ndjson", "dead_letters.ndjson",
                                 "trajectory.geojson"};
  write_json(out / "trajectory.geojson", trajectory_geojson(outputs.records));
  if (outputs.maps.empty()) {
    spdlog::warn("no MAP in the input: lanes.geojson not written, records carry no lane fields");
    fs::remove(out / "lanes.geojson");
  } else {
    write_json(out / "lanes.geojson", lanes_geojson(outputs.maps));
    files.push_back("lanes.geojson");
  }
  json c = counters;
  c["source"] = source;
  write_json(out / "counters.json", c);
  files.push_back("counters.json");
  files.push_back("archive");
  return files;
}

int run_pipeline(FrameSource& source, const RunConfig& cfg, const std::vector<MapMessage>& preload, const fs::path& out,
                 bool threaded, json& counters_out, std::vector<std::string>& files) {
  fs::create_directories(out);
  prepare_archive(out / "archive");
  ArchiveStore archive(out / "archive");
  RunOutputs outputs(out);
  for (const auto& m : preload) outputs.note_map(m);
  MapSniffer sniffer(source, outputs);

  json counters;
  if (threaded) {
    ThreadedPipeline p(cfg.topology, cfg.pipeline, &archive, outputs.sinks());
    for (const auto& m : preload) p.preload_map(m);
    p.run(sniffer, &g_stop);
    counters = p.counters();
  } else {
    Pipeline p(cfg.topology, cfg.pipeline, &archive, outputs.sinks());
    for (const auto& m : preload) p.preload_map(m);
    while (!g_stop.load()) {
      auto f = sniffer.next();
      if (!f) break;
      p.ingest(*f);
    }
    p.finish();
    counters = p.counters();
  }
  archive.flush();
  counters["archive"] = {{"records", archive.counters().records},
                         {"relevant", archive.counters().relevant},
                         {"feedback", archive.counters().feedback}};
  if (g_stop.load()) counters["interrupted"] = true;
  files = finish_outputs(out, outputs, counters, source.stats());
  counters["source"] = source.stats();
  counters_out = counters;
  return kOk;
}

// ---- subcommands ----

int cmd_encode(const Globals&, const std::string& input) {
  std::istream* in = &std::cin;
  std::ifstream file;
  if (input != "-") {
    file.open(input);
    if (!file) throw Error(Errc::SourceUnavailable, "cannot open " + input);
    in = &file;
  }
  std::stringstream all;
  all << in->rdbuf();
  const std::string text = all.str();
  auto emit = [](const json& j) { std::cout << encode_frame(message_from_json(j)) << '\n'; };
  json whole = json::parse(text, nullptr, false);
  if (!whole.is_discarded()) {
    if (whole.is_array()) {
      for (const auto& j : whole) emit(j);
    } else {
      emit(whole);
    }
    return kOk;
  }
  std::istringstream lines(text);
  std::string line;
  int lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw Error(Errc::InvalidMessage, fmt::format("line {}: not JSON", lineno));
    emit(j);
  }
  return kOk;
}

int cmd_decode(const Globals& g, const std::string& input) {
  if (!fs::is_regular_file(input)) {
    std::cout << message_to_json(decode_frame(input)).dump(2) << '\n';
    return kOk;
  }
  FileSource source(input);
  std::uint64_t errors = 0;
  while (auto f = source.next()) {
    try {
      json line = {{"rsu_id", f->rsu_id},
                   {"received_at_ms", f->received_at_ms},
                   {"message", message_to_json(decode_frame(f->payload_hex))}};
      std::cout << to_ndjson_line(line);
    } catch (const Error& e) {
      ++errors;
      std::cerr << fmt::format("{} @ {}: {}\n", f->rsu_id, f->received_at_ms, e.what());
      if (g.strict) return kData;
    }
  }
  if (source.stats().malformed) {
    std::cerr << fmt::format("{} malformed lines skipped\n", source.stats().malformed);
    if (g.strict) return kData;
  }
  if (errors) spdlog::warn("{} frames failed to decode", errors);
  return kOk;
}

int cmd_replay(const Globals& g, const std::string& log, const std::vector<std::string>& map_specs, bool threaded_flag) {
  auto cfg = load_config(g);
  auto specs = cfg.maps;
  specs.insert(specs.end(), map_specs.begin(), map_specs.end());
  const auto maps = resolve_maps(specs);
  const fs::path out = g.out;
  FileSource source(log, cfg.paced, cfg.speed);
  json counters;
  std::vector<std::string> files;
  install_signal_handlers();
  run_pipeline(source, cfg, maps, out, threaded_flag || cfg.threaded, counters, files);
  write_manifest(out, "replay", g, {log}, {{"year", cfg.year}, {"maps", specs}, {"threaded", threaded_flag || cfg.threaded}},
                 files);
  std::cout << counters.dump(2) << '\n';
  if (decodable(counters) == 0) {
    std::cerr << "no decodable frames in " << log << '\n';
    return kData;
  }
  if (g.strict && (source.stats().malformed || counters["central"]["items"] != decodable(counters))) {
    return kData;
  }
  return kOk;
}

int cmd_simulate(const Globals& g, const std::string& scenario_path) {
  auto scenario = load_scenario(scenario_path);
  if (g.seed) scenario.channel.seed = *g.seed;
  if (g.year) scenario.year = *g.year;
  check_scenario(scenario);
  const fs::path out = g.out;
  fs::create_directories(out);
  std::vector<std::string> files{"frames.ndjson", "summary.json"};

  if (!g.pipe) {
    auto result = simulate(scenario);
    write_frame_log(out / "frames.ndjson", result.frames);
    write_json(out / "summary.json", result.summary);
    write_manifest(out, "simulate", g, {scenario_path}, {{"pipe", false}}, files);
    std::cout << result.summary.dump(2) << '\n';
    return kOk;
  }

  // Live mode: the simulation feeds a loopback socket as frames are
  // produced and the pipeline consumes it concurrently.
  auto cfg = load_config(g);
  cfg.year = scenario.year;
  cfg.pipeline.central.year = scenario.year;
  cfg.pipeline.central.feedback = cfg.feedback;
  FrameServer server;
  SimulationResult result;
  std::exception_ptr failure;
  std::thread producer([&] {
    try {
      if (!server.accept_subscriber(std::chrono::seconds(10))) {
        throw Error(Errc::SourceUnavailable, "no subscriber on the loopback feed");
      }
      result = simulate(scenario, [&](const FrameLogEntry& f) { server.send(f); });
      server.end();
    } catch (...) {
      failure = std::current_exception();
      server.drop_client();
    }
  });
  SocketSource source("127.0.0.1", server.port(), {0.1, 10.0, 8});
  source.set_stop(&g_stop);
  install_signal_handlers();
  json counters;
  std::vector<std::string> pipe_files;
  try {
    run_pipeline(source, cfg, scenario.maps, out, true, counters, pipe_files);
  } catch (...) {
    producer.join();
    throw;
  }
  producer.join();
  if (failure) std::rethrow_exception(failure);
  write_frame_log(out / "frames.ndjson", result.frames);
  write_json(out / "summary.json", result.summary);
  files.insert(files.end(), pipe_files.begin(), pipe_files.end());
  write_manifest(out, "simulate", g, {scenario_path}, {{"pipe", true}}, files);
  std::cout << counters.dump(2) << '\n';
  return kOk;
}

int cmd_analyze(const Globals& g, const std::string& archive_dir, std::optional<std::int64_t> from,
                std::optional<std::int64_t> to, std::optional<std::uint16_t> intersection,
                std::optional<std::uint32_t> vehicle, bool relevant) {
  if (!fs::is_directory(archive_dir)) throw Error(Errc::SourceUnavailable, "no archive at " + archive_dir);
  auto cfg = load_config(g);
  ArchiveStore archive(archive_dir);
  ArchiveQuery q{from.value_or(std::numeric_limits<std::int64_t>::min()),
                 to.value_or(std::numeric_limits<std::int64_t>::max()), intersection, vehicle, relevant};
  auto records = archive.query(q);
  std::vector<FeedbackMessage> feedback;
  for (auto& f : archive.feedback()) {
    if (f.timestamp_epoch_ms < q.from_ms || f.timestamp_epoch_ms >= q.to_ms) continue;
    if (intersection && f.intersection_id != *intersection) continue;
    if (vehicle && f.vehicle_id != vehicle) continue;
    feedback.push_back(std::move(f));
  }
  auto stats = analyze_records(records, feedback, cfg.feedback);
  const fs::path out = g.out;
  fs::create_directories(out);
  write_json(out / "stats.json", stats);
  write_text(out / "queue.csv", queue_csv(queue_series(records, cfg.feedback)));
  std::string csv = "intersection_id,records,vehicles,speed_p50,speed_p85,speed_p95,speed_max\n";
  for (const auto& i : stats["intersections"]) {
    const auto& s = i["speed_mps"];
    csv += fmt::format("{},{},{},{},{},{},{}\n", i["intersection_id"].get<int>(), i["records"].get<std::uint64_t>(),
                       i["vehicles"].get<std::uint64_t>(), s["p50"].get<double>(), s["p85"].get<double>(),
                       s["p95"].get<double>(), s["max"].get<double>());
  }
  write_text(out / "intersections.csv", csv);
  write_manifest(out, "analyze", g, {archive_dir},
                 {{"from_ms", from ? json(*from) : json(nullptr)},
                  {"to_ms", to ? json(*to) : json(nullptr)},
                  {"intersection", intersection ? json(*intersection) : json(nullptr)},
                  {"vehicle", vehicle ? json(*vehicle) : json(nullptr)},
                  {"relevant", relevant}},
                 {"stats.json", "queue.csv", "intersections.csv"});
  std::cout << stats.dump(2) << '\n';
  return kOk;
}

int cmd_stream(const Globals& g, const std::string& host, std::uint16_t port, const std::vector<std::string>& map_specs) {
  auto cfg = load_config(g);
  auto specs = cfg.maps;
  specs.insert(specs.end(), map_specs.begin(), map_specs.end());
  const auto maps = resolve_maps(specs);
  SocketSource source(host, port);
  source.set_stop(&g_stop);
  install_signal_handlers();
  json counters;
  std::vector<std::string> files;
  run_pipeline(source, cfg, maps, g.out, true, counters, files);
  write_manifest(g.out, "stream", g, {fmt::format("{}:{}", host, port)}, {{"maps", specs}}, files);
  std::cout << counters.dump(2) << '\n';
  return kOk;
}

int cmd_selfcheck(const Globals& g, const std::string& dir_arg) {
  const fs::path dir = dir_arg.empty() ? fs::path(g.out) : fs::path(dir_arg);
  if (!fs::is_directory(dir)) throw Error(Errc::SourceUnavailable, "no directory " + dir.string());
  auto checks = selfcheck(dir);
  bool ok = !checks.empty();
  for (const auto& c : checks) {
    if (c.ok) {
      std::cout << fmt::format("OK    {} ({} items)\n", c.file, c.items);
    } else {
      ok = false;
      std::cout << fmt::format("FAIL  {}: {}\n", c.file, c.reason);
    }
  }
  if (checks.empty()) std::cout << "no artifacts found in " << dir.string() << '\n';
  return ok ? kOk : kData;
}

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("corridor-twin");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("%^%l%$: %v");
  spdlog::set_level(spdlog::level::warn);
  if (const char* level = std::getenv("CORRIDOR_TWIN_LOG")) {
    spdlog::set_level(spdlog::level::from_str(level));
  }
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Corridor digital twin: V2X decode, fusion, feedback and simulation"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--config", g.config, "JSON run configuration");
  app.add_option("--seed", g.seed, "channel seed (simulate)");
  app.add_option("--out", g.out, "output directory")->capture_default_str();
  app.add_flag("--strict", g.strict, "treat decode errors and malformed lines as failures");
  app.add_flag("--pipe", g.pipe, "simulate: feed the pipeline live over a loopback socket");
  app.add_option("--year", g.year, "UTC year of the minute-of-year fields");

  std::function<int()> run;

  auto* encode = app.add_subcommand("encode", "JSON messages to UPER hex, one per line");
  std::string encode_in = "-";
  encode->add_option("input", encode_in, "file or - for stdin");
  encode->callback([&] { run = [&] { return cmd_encode(g, encode_in); }; });

  auto* decode = app.add_subcommand("decode", "hex payload or frame log to JSON");
  std::string decode_in;
  decode->add_option("input", decode_in, "hex payload or frame-log path")->required();
  decode->callback([&] { run = [&] { return cmd_decode(g, decode_in); }; });

  auto* replay = app.add_subcommand("replay", "run a frame log through the pipeline");
  std::string replay_log;
  std::vector<std::string> replay_maps;
  bool replay_threaded = false;
  replay->add_option("log", replay_log, "frame log")->required();
  replay->add_option("--map", replay_maps, "fixture name or MAP JSON file to preload");
  replay->add_flag("--threaded", replay_threaded, "one thread per worker plus a central thread");
  replay->callback([&] { run = [&] { return cmd_replay(g, replay_log, replay_maps, replay_threaded); }; });

  auto* sim = app.add_subcommand("simulate", "run a scenario and write its frame log");
  std::string scenario;
  sim->add_option("scenario", scenario, "scenario file")->required();
  sim->callback([&] { run = [&] { return cmd_simulate(g, scenario); }; });

  auto* analyze = app.add_subcommand("analyze", "statistics over an archive");
  std::string archive_dir;
  std::optional<std::int64_t> from, to;
  std::optional<std::uint16_t> intersection;
  std::optional<std::uint32_t> vehicle;
  bool relevant = false;
  analyze->add_option("archive", archive_dir, "archive directory")->required();
  analyze->add_option("--from", from, "start, epoch ms (inclusive)");
  analyze->add_option("--to", to, "end, epoch ms (exclusive)");
  analyze->add_option("--intersection", intersection, "intersection id");
  analyze->add_option("--vehicle", vehicle, "vehicle temp id");
  analyze->add_flag("--relevant", relevant, "long-term store only");
  analyze->callback(
      [&] { run = [&] { return cmd_analyze(g, archive_dir, from, to, intersection, vehicle, relevant); }; });

  auto* stream = app.add_subcommand("stream", "consume an NDJSON frame feed over TCP");
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
  std::vector<std::string> stream_maps;
  stream->add_option("--host", host)->capture_default_str();
  stream->add_option("--port", port)->required();
  stream->add_option("--map", stream_maps, "fixture name or MAP JSON file to preload");
  stream->callback([&] { run = [&] { return cmd_stream(g, host, port, stream_maps); }; });

  auto* check = app.add_subcommand("selfcheck", "validate emitted files against their schemas");
  std::string check_dir;
  check->add_option("dir", check_dir, "directory to check (default: --out)");
  check->callback([&] { run = [&] { return cmd_selfcheck(g, check_dir); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    return run();
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kInternal;
  }
}
