#pragma once

// Dataset records, the PXDF record file format and the corpus builder.
//
// PXDF layout (all integers and floats little-endian):
//   "PXDF" | u16 version | u32 header_len | header JSON (header_len bytes)
//   | image float32[3*H*W] | mask float32[3*H*W]     (C row-major)

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "trajdiff/error.hpp"
#include "trajdiff/maskcodec.hpp"
#include "trajdiff/oracle.hpp"
#include "trajdiff/worldgen.hpp"

namespace trajdiff {

enum class Split { Train, Eval, Test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Eval: return "eval";
    case Split::Test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "eval") return Split::Eval;
  if (s == "test") return Split::Test;
  throw FormatError("unknown split '" + s + "'");
}

struct DatasetRecord {
  Image image;
  Mask mask;
  Pixel start_px;
  Pixel goal_px;
  std::uint64_t grid_seed = 0;
  Split split = Split::Train;
};

inline constexpr char kRecordMagic[4] = {'P', 'X', 'D', 'F'};
inline constexpr std::uint16_t kRecordVersion = 1;

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  static_assert(std::is_integral_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

inline void put_floats(std::string& out, const std::vector<float>& v) {
  for (float f : v) put_le(out, std::bit_cast<std::uint32_t>(f));
}

inline void get_floats(const unsigned char* p, std::vector<float>& v) {
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::bit_cast<float>(get_le<std::uint32_t>(p + 4 * i));
}

inline nlohmann::json shape_json(const Tensor3<float>& t) { return {t.channels, t.height, t.width}; }

}  // namespace detail

inline std::string encode_record(const DatasetRecord& rec) {
  nlohmann::json header = {
      {"shapes", {{"image", detail::shape_json(rec.image)}, {"mask", detail::shape_json(rec.mask)}}},
      {"dtypes", {{"image", "float32"}, {"mask", "float32"}}},
      {"start_px", {rec.start_px.row, rec.start_px.col}},
      {"goal_px", {rec.goal_px.row, rec.goal_px.col}},
      {"grid_seed", rec.grid_seed},
      {"split", split_name(rec.split)},
  };
  std::string hdr = header.dump();
  std::string out(kRecordMagic, 4);
  detail::put_le(out, kRecordVersion);
  detail::put_le(out, static_cast<std::uint32_t>(hdr.size()));
  out += hdr;
  detail::put_floats(out, rec.image.data);
  detail::put_floats(out, rec.mask.data);
  return out;
}

inline DatasetRecord decode_record(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 10 || std::memcmp(p, kRecordMagic, 4) != 0) throw FormatError("not a PXDF record");
  auto version = detail::get_le<std::uint16_t>(p + 4);
  if (version != kRecordVersion) throw FormatError("unsupported PXDF version " + std::to_string(version));
  auto hlen = detail::get_le<std::uint32_t>(p + 6);
  if (bytes.size() < 10 + std::size_t{hlen}) throw FormatError("truncated PXDF header");
  auto header = nlohmann::json::parse(bytes.begin() + 10, bytes.begin() + 10 + hlen);

  auto shape = [&](const char* key) {
    auto s = header.at("shapes").at(key).get<std::vector<int>>();
    if (s.size() != 3) throw FormatError("PXDF shapes must be rank 3");
    if (header.at("dtypes").at(key).get<std::string>() != "float32") throw FormatError("PXDF dtype must be float32");
    return Tensor3<float>(s[0], s[1], s[2]);
  };
  DatasetRecord rec;
  rec.image = shape("image");
  rec.mask = shape("mask");
  std::size_t need = 10 + std::size_t{hlen} + 4 * (rec.image.size() + rec.mask.size());
  if (bytes.size() != need) throw FormatError("PXDF payload size mismatch");
  detail::get_floats(p + 10 + hlen, rec.image.data);
  detail::get_floats(p + 10 + hlen + 4 * rec.image.size(), rec.mask.data);
  auto s = header.at("start_px").get<std::array<int, 2>>();
  auto g = header.at("goal_px").get<std::array<int, 2>>();
  rec.start_px = {s[0], s[1]};
  rec.goal_px = {g[0], g[1]};
  rec.grid_seed = header.at("grid_seed").get<std::uint64_t>();
  rec.split = parse_split(header.at("split").get<std::string>());
  return rec;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_record(const std::filesystem::path& path, const DatasetRecord& rec) {
  write_file(path, encode_record(rec));
}

inline DatasetRecord read_record(const std::filesystem::path& path) { return decode_record(read_file(path)); }

struct DatasetConfig {
  WorldConfig world;
  int annotation_res = 512;
  int train_res = 64;
  int inflation_px = 2;
  double inflation_penalty = 1.0;
  double min_separation = 0.25;  // Chebyshev start-goal distance as a fraction of the grid diagonal
  int max_pair_attempts = 50;

  void validate() const {
    world.validate();
    detail::require(train_res == world.rows && train_res == world.cols,
                    "train_res must equal the world grid size (one cell per training pixel)");
    detail::require(annotation_res >= train_res && annotation_res % train_res == 0,
                    "annotation_res must be an integer multiple of train_res");
    detail::require(inflation_px >= 0 && inflation_penalty >= 0, "inflation must be non-negative");
    detail::require(min_separation >= 0 && min_separation < 1, "min_separation must lie in [0, 1)");
    detail::require(max_pair_attempts >= 1, "max_pair_attempts must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const DatasetConfig& c) {
  j = {{"world", c.world},
       {"annotation_res", c.annotation_res},
       {"train_res", c.train_res},
       {"inflation_px", c.inflation_px},
       {"inflation_penalty", c.inflation_penalty},
       {"min_separation", c.min_separation},
       {"max_pair_attempts", c.max_pair_attempts}};
}

inline void from_json(const nlohmann::json& j, DatasetConfig& c) {
  DatasetConfig d;
  c.world = j.contains("world") ? j.at("world").get<WorldConfig>() : d.world;
  c.annotation_res = j.value("annotation_res", d.annotation_res);
  c.train_res = j.value("train_res", d.train_res);
  c.inflation_px = j.value("inflation_px", d.inflation_px);
  c.inflation_penalty = j.value("inflation_penalty", d.inflation_penalty);
  c.min_separation = j.value("min_separation", d.min_separation);
  c.max_pair_attempts = j.value("max_pair_attempts", d.max_pair_attempts);
}

/// 64-bit FNV-1a over a string, rendered as hex.
inline std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << h;
  return ss.str();
}

inline std::string config_hash(const nlohmann::json& config) { return fnv1a_hex(config.dump()); }

/// Floor each share, then hand out the remainder by largest fractional part
/// (earlier split wins ties).
inline std::array<int, 3> split_counts(int n, std::array<double, 3> ratios) {
  double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(sum - 1.0) > 1e-9) throw InvalidArgument("split ratios must sum to 1");
  for (double r : ratios) detail::require(r >= 0.0, "split ratios must be non-negative");
  std::array<int, 3> counts{};
  std::array<double, 3> rem{};
  int assigned = 0;
  for (int i = 0; i < 3; ++i) {
    double exact = n * ratios[i];
    counts[i] = static_cast<int>(std::floor(exact + 1e-9));
    rem[i] = exact - counts[i];
    assigned += counts[i];
  }
  while (assigned < n) {
    int best = 0;
    for (int i = 1; i < 3; ++i) {
      if (rem[i] > rem[best]) best = i;
    }
    ++counts[best];
    rem[best] = -1.0;
    ++assigned;
  }
  return counts;
}

/// Mirrors the 8000 / 1500 / 300 split of the full-size corpus.
inline constexpr std::array<double, 3> kDefaultSplitRatios = {8000.0 / 9800.0, 1500.0 / 9800.0, 300.0 / 9800.0};

/// A planned example before rasterisation.
struct PlannedPair {
  OccupancyGrid grid;
  PixelPath path;
};

/// Samples a start/goal pair in the largest free component with the required
/// separation and plans it. Returns false after max_pair_attempts failures.
inline bool sample_planned_pair(const OccupancyGrid& grid, const DatasetConfig& cfg, std::mt19937_64& rng,
                                PixelPath& path) {
  auto comps = label_free_components(grid);
  int big = comps.largest();
  if (big < 0) return false;
  std::vector<int> cells;
  for (std::size_t i = 0; i < comps.label.size(); ++i) {
    if (comps.label[i] == big) cells.push_back(static_cast<int>(i));
  }
  const int min_sep = static_cast<int>(std::ceil(cfg.min_separation * std::hypot(grid.rows, grid.cols)));
  const CostField field = grid_to_costfield(grid, cfg.inflation_px, cfg.inflation_penalty);
  std::uniform_int_distribution<std::size_t> pick(0, cells.size() - 1);
  for (int attempt = 0; attempt < cfg.max_pair_attempts; ++attempt) {
    int a = cells[pick(rng)], b = cells[pick(rng)];
    Pixel s{a / grid.cols, a % grid.cols}, g{b / grid.cols, b % grid.cols};
    if (chebyshev(s, g) < min_sep) continue;
    try {
      path = astar(field, s, g).path;
      return true;
    } catch (const UnreachableGoal&) {
    }
  }
  return false;
}

/// Annotation-resolution encoding followed by reduction to training resolution.
inline Mask annotate_path(const PixelPath& grid_path, const DatasetConfig& cfg) {
  const int factor = cfg.annotation_res / cfg.train_res;
  Mask fine = encode_mask(upscale_path(grid_path, factor), {cfg.annotation_res, cfg.annotation_res});
  if (factor == 1) return fine;
  return downsample_mask(fine, {cfg.train_res, cfg.train_res});
}

inline std::uint64_t world_seed_for(std::uint64_t master_seed, std::uint64_t world_index) {
  return mix_seed(master_seed ^ mix_seed(world_index));
}

inline std::uint64_t style_seed_for(std::uint64_t grid_seed) { return mix_seed(grid_seed + 1); }

/// Builds one record from world index k, or returns false when the world has no valid pair.
inline bool make_record(std::uint64_t master_seed, std::uint64_t world_index, const DatasetConfig& cfg, Split split,
                        DatasetRecord& rec, PixelPath* grid_path = nullptr) {
  const std::uint64_t seed = world_seed_for(master_seed, world_index);
  OccupancyGrid grid = generate_world(seed, cfg.world);
  std::mt19937_64 rng(mix_seed(seed ^ 0x5eed));
  PixelPath path;
  if (!sample_planned_pair(grid, cfg, rng, path)) return false;
  rec.image = render_scene(grid, style_seed_for(seed));
  rec.mask = annotate_path(path, cfg);
  auto [s, g] = mask_endpoints(rec.mask);
  if (s != path.front() || g != path.back()) {
    throw Error("annotation moved an endpoint; check annotation_res / train_res");
  }
  rec.start_px = s;
  rec.goal_px = g;
  rec.grid_seed = seed;
  rec.split = split;
  if (grid_path) *grid_path = std::move(path);
  return true;
}

struct ManifestSummary {
  int n = 0;
  std::array<int, 3> counts{};
  std::vector<std::uint64_t> skipped_worlds;
  std::string config_hash;
};

inline std::string record_filename(int i) {
  std::ostringstream ss;
  ss << "rec_" << std::setw(6) << std::setfill('0') << i << ".pxdf";
  return ss.str();
}

/// Writes n records plus manifest.json under out_dir. Records are assigned to
/// splits in index order (train, then eval, then test).
inline ManifestSummary build_dataset(int n, std::array<double, 3> ratios, const DatasetConfig& cfg,
                                     const std::filesystem::path& out_dir, std::uint64_t master_seed,
                                     const std::function<void(const std::string&)>& log = {}) {
  namespace fs = std::filesystem;
  detail::require(n >= 10, "dataset size must be >= 10");
  cfg.validate();
  auto counts = split_counts(n, ratios);

  nlohmann::json cfg_json = cfg;
  ManifestSummary summary;
  summary.n = n;
  summary.counts = counts;
  summary.config_hash = config_hash(cfg_json);

  std::vector<fs::path> written;
  auto cleanup = [&] {
    std::error_code ec;
    for (const auto& p : written) fs::remove(p, ec);
    fs::remove(out_dir / "manifest.json", ec);
  };

  nlohmann::json records = nlohmann::json::array();
  try {
    fs::create_directories(out_dir);
    std::uint64_t world_index = 0;
    for (int i = 0; i < n; ++i) {
      Split split = i < counts[0] ? Split::Train : (i < counts[0] + counts[1] ? Split::Eval : Split::Test);
      DatasetRecord rec;
      while (!make_record(master_seed, world_index, cfg, split, rec)) {
        summary.skipped_worlds.push_back(world_seed_for(master_seed, world_index));
        if (log) log("skipping world " + std::to_string(world_index) + ": no reachable start/goal pair");
        ++world_index;
      }
      ++world_index;
      fs::path file = out_dir / record_filename(i);
      written.push_back(file);
      write_record(file, rec);
      records.push_back({{"file", file.filename().string()}, {"split", split_name(split)}, {"grid_seed", rec.grid_seed}});
      if (log && (i + 1) % 200 == 0) log("built " + std::to_string(i + 1) + "/" + std::to_string(n) + " records");
    }
    nlohmann::json manifest = {
        {"format", "PXDF"},
        {"version", kRecordVersion},
        {"n", n},
        {"counts", {{"train", counts[0]}, {"eval", counts[1]}, {"test", counts[2]}}},
        {"ratios", ratios},
        {"master_seed", master_seed},
        {"config", cfg_json},
        {"config_hash", summary.config_hash},
        {"skipped_worlds", summary.skipped_worlds},
        {"records", records},
    };
    write_file(out_dir / "manifest.json", manifest.dump(2) + "\n");
  } catch (const std::exception& e) {
    cleanup();
    throw IoError(std::string("dataset build aborted: ") + e.what());
  }
  return summary;
}

struct Manifest {
  std::filesystem::path dir;
  nlohmann::json json;
  DatasetConfig config;

  std::vector<std::filesystem::path> files(Split split) const {
    std::vector<std::filesystem::path> out;
    for (const auto& r : json.at("records")) {
      if (parse_split(r.at("split").get<std::string>()) == split) out.push_back(dir / r.at("file").get<std::string>());
    }
    return out;
  }
};

inline Manifest load_manifest(const std::filesystem::path& dir) {
  Manifest m;
  m.dir = dir;
  try {
    m.json = nlohmann::json::parse(read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad manifest in " + dir.string() + ": " + e.what());
  }
  m.config = m.json.at("config").get<DatasetConfig>();
  return m;
}

inline std::vector<DatasetRecord> load_split(const Manifest& m, Split split) {
  std::vector<DatasetRecord> out;
  for (const auto& f : m.files(split)) out.push_back(read_record(f));
  return out;
}

}  // namespace trajdiff
