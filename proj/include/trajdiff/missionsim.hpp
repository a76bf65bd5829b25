#pragma once

// Seeded closed-loop mission simulation: accident response (doctor handover,
// then delivery to a casualty) and search-and-locate under occlusion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "trajdiff/geometry.hpp"
#include "trajdiff/oracle.hpp"
#include "trajdiff/sampler.hpp"
#include "trajdiff/worldgen.hpp"

namespace trajdiff {

enum class Scenario { Accident, OccludedSearch };
enum class Phase { SeekFirst, Handover, SeekSecond, Deliver, Done, Failed };
enum class Failure { None, PerceptionLoss, TrackingError, Timeout, Collision };

inline std::string scenario_name(Scenario s) { return s == Scenario::Accident ? "accident" : "occluded_search"; }

inline Scenario parse_scenario(const std::string& s) {
  if (s == "accident") return Scenario::Accident;
  if (s == "occluded_search") return Scenario::OccludedSearch;
  throw InvalidArgument("unknown scenario '" + s + "' (accident | occluded_search)");
}

inline std::string phase_name(Phase p) {
  switch (p) {
    case Phase::SeekFirst: return "seek_first";
    case Phase::Handover: return "handover";
    case Phase::SeekSecond: return "seek_second";
    case Phase::Deliver: return "deliver";
    case Phase::Done: return "done";
    case Phase::Failed: return "failed";
  }
  return "?";
}

inline std::string failure_name(Failure f) {
  switch (f) {
    case Failure::None: return "none";
    case Failure::PerceptionLoss: return "perception_loss";
    case Failure::TrackingError: return "tracking_error";
    case Failure::Timeout: return "timeout";
    case Failure::Collision: return "collision";
  }
  return "?";
}

struct DetectionNoise {
  double center_sigma_px = 2.0;
  double dropout = 0.05;
  double box_half_px = 1.5;
};

struct EpisodeConfig {
  Scenario scenario = Scenario::Accident;
  std::uint64_t world_seed = 0;  // 0: derive from the episode seed
  WorldConfig world;
  double dt = 0.1;
  double replan_period = 0.5;
  double speed = 0.3;
  double safety_margin = 1.0;
  double success_band = 0.3;
  double hold_time = 2.0;
  double sensor_range = 7.0;
  double prior_error = 0.8;      // metres of error on the supplied approximate human locations
  double goal_smoothing = 0.3;   // EMA weight of a new detection
  double replan_goal_shift = 0.6;
  double time_budget = 0.0;      // 0: scenario default
  bool occluders = true;         // only used by occluded_search
  double hide_start = 4.0;       // scripted concealment interval (occluded_search)
  double hide_duration = 12.0;
  double walk_distance = 2.0;    // human relocation while concealed
  double human_speed = 0.3;
  bool always_hidden = false;
  DetectionNoise noise;

  double budget() const {
    if (time_budget > 0) return time_budget;
    return scenario == Scenario::Accident ? 180.0 : 120.0;
  }

  void validate() const {
    world.validate();
    detail::require(dt > 0 && replan_period > 0 && speed > 0, "dt, replan_period and speed must be positive");
    detail::require(safety_margin > 0 && success_band > 0, "safety margin and success band must be positive");
    detail::require(hold_time >= 0 && sensor_range > 0 && prior_error >= 0, "invalid episode timing/sensing");
    detail::require(goal_smoothing > 0 && goal_smoothing <= 1, "goal_smoothing must lie in (0, 1]");
    detail::require(hide_start >= 0 && hide_duration >= 0 && walk_distance >= 0 && human_speed > 0,
                    "invalid human script");
    detail::require(noise.center_sigma_px >= 0 && noise.dropout >= 0 && noise.dropout <= 1 && noise.box_half_px > 0,
                    "invalid detection noise model");
  }
};

inline void to_json(nlohmann::json& j, const EpisodeConfig& c) {
  j = {{"scenario", scenario_name(c.scenario)},
       {"world_seed", c.world_seed},
       {"world", c.world},
       {"dt", c.dt},
       {"replan_period", c.replan_period},
       {"speed", c.speed},
       {"safety_margin", c.safety_margin},
       {"success_band", c.success_band},
       {"hold_time", c.hold_time},
       {"sensor_range", c.sensor_range},
       {"prior_error", c.prior_error},
       {"goal_smoothing", c.goal_smoothing},
       {"replan_goal_shift", c.replan_goal_shift},
       {"time_budget", c.time_budget},
       {"occluders", c.occluders},
       {"hide_start", c.hide_start},
       {"hide_duration", c.hide_duration},
       {"walk_distance", c.walk_distance},
       {"human_speed", c.human_speed},
       {"always_hidden", c.always_hidden},
       {"noise",
        {{"center_sigma_px", c.noise.center_sigma_px},
         {"dropout", c.noise.dropout},
         {"box_half_px", c.noise.box_half_px}}}};
}

inline void from_json(const nlohmann::json& j, EpisodeConfig& c) {
  EpisodeConfig d;
  c.scenario = parse_scenario(j.value("scenario", scenario_name(d.scenario)));
  c.world_seed = j.value("world_seed", d.world_seed);
  c.world = j.contains("world") ? j.at("world").get<WorldConfig>() : d.world;
  c.dt = j.value("dt", d.dt);
  c.replan_period = j.value("replan_period", d.replan_period);
  c.speed = j.value("speed", d.speed);
  c.safety_margin = j.value("safety_margin", d.safety_margin);
  c.success_band = j.value("success_band", d.success_band);
  c.hold_time = j.value("hold_time", d.hold_time);
  c.sensor_range = j.value("sensor_range", d.sensor_range);
  c.prior_error = j.value("prior_error", d.prior_error);
  c.goal_smoothing = j.value("goal_smoothing", d.goal_smoothing);
  c.replan_goal_shift = j.value("replan_goal_shift", d.replan_goal_shift);
  c.time_budget = j.value("time_budget", d.time_budget);
  c.occluders = j.value("occluders", d.occluders);
  c.hide_start = j.value("hide_start", d.hide_start);
  c.hide_duration = j.value("hide_duration", d.hide_duration);
  c.walk_distance = j.value("walk_distance", d.walk_distance);
  c.human_speed = j.value("human_speed", d.human_speed);
  c.always_hidden = j.value("always_hidden", d.always_hidden);
  if (j.contains("noise")) {
    const auto& n = j.at("noise");
    c.noise.center_sigma_px = n.value("center_sigma_px", d.noise.center_sigma_px);
    c.noise.dropout = n.value("dropout", d.noise.dropout);
    c.noise.box_half_px = n.value("box_half_px", d.noise.box_half_px);
  }
}

/// What a planner sees at episode start (the oracle uses the map, the
/// diffusion planner ignores it).
struct PlanningContext {
  const OccupancyGrid* grid = nullptr;
};

class Planner {
 public:
  virtual ~Planner() = default;
  virtual std::string name() const = 0;
  virtual void reset(const PlanningContext&) {}
  virtual PixelPath plan(const Image& image, Pixel start, Pixel goal, std::uint64_t seed) = 0;
};

/// A* on the true map with the dataset's obstacle inflation.
class OraclePlanner : public Planner {
 public:
  explicit OraclePlanner(int inflation_px = 2, double penalty = 1.0) : inflation_(inflation_px), penalty_(penalty) {}
  std::string name() const override { return "oracle"; }
  void reset(const PlanningContext& ctx) override {
    if (!ctx.grid) throw InvalidArgument("oracle planner needs the occupancy grid");
    field_ = grid_to_costfield(*ctx.grid, inflation_, penalty_);
    components_ = label_free_components(*ctx.grid);
    grid_ = ctx.grid;
  }
  PixelPath plan(const Image&, Pixel start, Pixel goal, std::uint64_t) override {
    if (!grid_) throw InvalidArgument("oracle planner used before reset");
    return astar(field_, start, nearest_reachable(start, goal)).path;
  }

 private:
  /// Closest free cell to p (square rings) in the start's free component.
  Pixel nearest_reachable(Pixel start, Pixel p) const {
    if (!grid_->in_bounds(start) || grid_->blocked(start)) throw UnreachableGoal("start cell is blocked");
    const int label = components_.label[grid_->index(start)];
    auto ok = [&](Pixel q) { return grid_->in_bounds(q) && components_.label[grid_->index(q)] == label; };
    p.row = std::clamp(p.row, 0, grid_->rows - 1);
    p.col = std::clamp(p.col, 0, grid_->cols - 1);
    if (ok(p)) return p;
    for (int rad = 1; rad < std::max(grid_->rows, grid_->cols); ++rad) {
      for (int r = p.row - rad; r <= p.row + rad; ++r) {
        for (int c = p.col - rad; c <= p.col + rad; ++c) {
          if (ok({r, c})) return {r, c};
        }
      }
    }
    throw UnreachableGoal("no reachable cell near the goal");
  }
  FreeComponents components_;

  int inflation_;
  double penalty_;
  const OccupancyGrid* grid_ = nullptr;
  CostField field_;
};

/// Image-only planner: reverse diffusion then mask decoding.
class DiffusionPlanner : public Planner {
 public:
  DiffusionPlanner(const Denoiser<float>& model, const NoiseSchedule& sched, EndpointEncoder enc = {})
      : model_(model), sched_(sched), enc_(enc) {}
  std::string name() const override { return "diffusion"; }
  PixelPath plan(const Image& image, Pixel start, Pixel goal, std::uint64_t seed) override {
    return trajdiff::plan(model_, sched_, image, start, goal, seed, enc_).path;
  }

 private:
  const Denoiser<float>& model_;
  const NoiseSchedule& sched_;
  EndpointEncoder enc_;
};

struct Human {
  std::string label;
  Vec3 position = Vec3::Zero();
  Vec3 prior = Vec3::Zero();      // approximate location given to the drone
  std::optional<Vec3> walk_to;    // relocation target while concealed
};

struct MissionState {
  Vec3 drone = Vec3::Zero();
  double yaw = 0.0;
  std::vector<Vec3> humans;
  std::vector<bool> visible;
  std::optional<Vec3> last_known_goal;  // of the current target
  Phase phase = Phase::SeekFirst;
  double clock = 0.0;
};

struct TraceStep {
  double t = 0.0;
  Vec3 drone;
  double yaw = 0.0;
  std::vector<Vec3> humans;
  std::vector<bool> visible;
  bool detected = false;  // the current target produced a detection this frame
  int target = 0;
  std::optional<Vec3> goal;  // active goal this step
  std::string goal_source;   // detection | last_known | prior
  Phase phase = Phase::SeekFirst;
};

struct EpisodeReport {
  Scenario scenario = Scenario::Accident;
  std::uint64_t seed = 0;
  std::uint64_t world_seed = 0;
  std::string planner;
  bool success = false;
  Failure failure = Failure::None;
  std::string diagnostic;
  double duration = 0.0;
  double min_human_distance = std::numeric_limits<double>::infinity();
  int plans = 0;
  double planning_time = 0.0;
  std::vector<std::pair<double, Phase>> phase_log;
  std::vector<TraceStep> trace;
};

namespace detail {

inline std::vector<double> vec_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }

/// Cells whose centres lie on the segment a-b, sampled every quarter cell.
inline bool segment_clear(const OccupancyGrid& grid, const std::vector<std::uint8_t>& blockers, const Vec3& a,
                          const Vec3& b) {
  const double len = (b - a).head<2>().norm();
  const int n = std::max(1, static_cast<int>(std::ceil(len / (grid.cell_size * 0.25))));
  for (int i = 0; i <= n; ++i) {
    Vec3 p = a + (b - a) * (double(i) / n);
    Pixel c = world_to_cell(grid, p);
    if (!grid.in_bounds({c.row, c.col})) return false;
    if (blockers[grid.index({c.row, c.col})]) return false;
  }
  return true;
}

inline double planar_distance(const Vec3& a, const Vec3& b) { return (a - b).head<2>().norm(); }

/// Scenario layout: world, occluder cells, drone start and humans.
struct Layout {
  OccupancyGrid grid;
  std::vector<std::uint8_t> occluder;  // cells that block line of sight
  Vec3 start = Vec3::Zero();
  std::vector<Human> humans;
};

inline Vec3 jitter_prior(const OccupancyGrid& grid, const Vec3& truth, double err, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> ang(0.0, 2.0 * M_PI), mag(0.0, err);
  for (int attempt = 0; attempt < 50; ++attempt) {
    double a = ang(rng), m = mag(rng);
    Vec3 p = truth + Vec3(std::cos(a) * m, std::sin(a) * m, 0.0);
    Pixel c = world_to_cell(grid, p);
    if (grid.in_bounds({c.row, c.col}) && !grid.blocked({c.row, c.col})) return p;
  }
  return truth;
}

inline Layout make_layout(const EpisodeConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed ^ 0x5ce7a210ULL));
  const int max_tries = 200;
  for (int world_try = 0; world_try < 20; ++world_try) {
    Layout L;
    std::uint64_t ws = cfg.world_seed != 0 ? cfg.world_seed + world_try : mix_seed(seed + 7919ULL * world_try);
    L.grid = generate_world(ws, cfg.world);
    auto& g = L.grid;
    L.occluder.assign(g.cells.size(), 0);
    auto comps = label_free_components(g);
    auto in_main = [&](Pixel p) {
      return g.in_bounds({p.row, p.col}) && !g.blocked({p.row, p.col}) && comps.label[g.index({p.row, p.col})] == comps.largest();
    };
    // Two cells of clearance keep humans and the start off walls.
    auto roomy = [&](Pixel p) {
      for (int dr = -2; dr <= 2; ++dr)
        for (int dc = -2; dc <= 2; ++dc)
          if (!in_main({p.row + dr, p.col + dc})) return false;
      return true;
    };
    std::uniform_int_distribution<int> rr(2, g.rows - 3), cc(2, g.cols - 3);
    auto pick = [&](auto&& ok) -> std::optional<Pixel> {
      for (int i = 0; i < max_tries; ++i) {
        Pixel p{rr(rng), cc(rng)};
        if (roomy(p) && ok(p)) return p;
      }
      return std::nullopt;
    };
    auto dist_m = [&](Pixel a, Pixel b) { return planar_distance(cell_centre(g, a), cell_centre(g, b)); };

    // People stand in open space so the drone can always pass them at the margin.
    auto open_area = [&](Pixel p) {
      for (int dr = -7; dr <= 7; ++dr)
        for (int dc = -7; dc <= 7; ++dc)
          if (!in_main({p.row + dr, p.col + dc})) return false;
      return true;
    };
    auto start = pick([](Pixel) { return true; });
    if (!start) continue;
    auto first = pick([&](Pixel p) { return open_area(p) && dist_m(p, *start) >= 4.0 && dist_m(p, *start) <= 8.0; });
    if (!first) continue;
    L.start = cell_centre(g, *start);

    if (cfg.scenario == Scenario::Accident) {
      auto second = pick([&](Pixel p) { return open_area(p) && dist_m(p, *first) >= 4.0 && dist_m(p, *first) <= 8.0 && dist_m(p, *start) >= 2.5; });
      if (!second) continue;
      L.humans.push_back({"doctor", cell_centre(g, *first), {}, std::nullopt});
      L.humans.push_back({"casualty", cell_centre(g, *second), {}, std::nullopt});
    } else {
      Human h{"person", cell_centre(g, *first), {}, std::nullopt};
      if (cfg.walk_distance > 0) {
        auto dest = pick([&](Pixel p) {
          if (!open_area(p)) return false;
          double d = dist_m(p, *first);
          return d >= 0.75 * cfg.walk_distance && d <= 1.25 * cfg.walk_distance && dist_m(p, *start) >= 3.0;
        });
        if (!dest) continue;
        h.walk_to = cell_centre(g, *dest);
      }
      L.humans.push_back(h);
      if (cfg.occluders) {
        // Occluder blob between the start and the human's first position, off
        // the straight line so the free space stays connected.
        Vec3 mid = 0.5 * (L.start + L.humans[0].position);
        Pixel m = world_to_cell(g, mid);
        std::uniform_int_distribution<int> off(-3, 3);
        OccupancyGrid trial = g;
        std::vector<std::uint8_t> occ(g.cells.size(), 0);
        Pixel centre{m.row + off(rng), m.col + off(rng)};
        for (int r = centre.row - 2; r <= centre.row + 2; ++r) {
          for (int c = centre.col - 2; c <= centre.col + 2; ++c) {
            if (!trial.in_bounds({r, c}) || (r - centre.row) * (r - centre.row) + (c - centre.col) * (c - centre.col) > 5) continue;
            Vec3 cw = cell_centre(g, {r, c});
            bool near_actor = planar_distance(cw, L.start) < 1.0 || planar_distance(cw, L.humans[0].position) < 1.0 ||
                              (h.walk_to && planar_distance(cw, *h.walk_to) < 1.0);
            if (near_actor) continue;
            trial.set_blocked({r, c}, true);
            occ[trial.index({r, c})] = 1;
          }
        }
        if (!satisfies_connectivity(trial)) continue;
        auto comps2 = label_free_components(trial);
        auto same = [&](const Vec3& p) {
          Pixel q = world_to_cell(trial, p);
          return comps2.label[trial.index({q.row, q.col})] == comps2.largest();
        };
        if (!same(L.start) || !same(L.humans[0].position) || (h.walk_to && !same(*h.walk_to))) continue;
        L.grid = std::move(trial);
        L.occluder = std::move(occ);
      }
    }
    for (auto& hm : L.humans) hm.prior = jitter_prior(L.grid, hm.position, cfg.prior_error, rng);
    return L;
  }
  throw Error("could not lay out the scenario after 20 worlds");
}

}  // namespace detail

/// Runs one episode. Planner failures end the episode as tracking_error; the
/// function itself never throws for planner-side problems.
inline EpisodeReport run_episode(const EpisodeConfig& cfg, Planner& planner, std::uint64_t seed) {
  cfg.validate();
  EpisodeReport rep;
  rep.scenario = cfg.scenario;
  rep.seed = seed;
  rep.planner = planner.name();

  detail::Layout L = detail::make_layout(cfg, seed);
  const OccupancyGrid& grid = L.grid;
  rep.world_seed = grid.seed;
  const Image image = render_scene(grid, style_seed_for(grid.seed));
  const OverheadCamera cam = OverheadCamera::for_grid(grid);

  // Ground-plane depth with random sensor holes.
  DepthMap depth(grid.cols, grid.rows, static_cast<float>(cam.height));
  std::mt19937_64 rng(mix_seed(seed ^ 0xd7e1ULL));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      if (u01(rng) < 0.02) depth.at(r, c) = 0.0f;  // sensor holes
    }
  }

  planner.reset({&grid});

  MissionState st;
  st.drone = L.start;
  for (const auto& h : L.humans) st.humans.push_back(h.position);
  st.visible.assign(L.humans.size(), false);

  const double margin = cfg.safety_margin;
  const bool accident = cfg.scenario == Scenario::Accident;
  int target = 0;
  std::vector<std::optional<Vec3>> estimate(L.humans.size());
  std::vector<Waypoint3D> route;
  std::size_t route_idx = 0;
  double last_plan = -1e9;
  std::optional<Vec3> planned_for;
  double hold_until = 0.0;
  bool walking_done = !L.humans[0].walk_to.has_value();
  auto finish = [&](Failure f, const std::string& why) {
    rep.failure = f;
    rep.diagnostic = why;
    rep.success = false;
    st.phase = Phase::Failed;
    rep.phase_log.emplace_back(st.clock, st.phase);
  };
  auto set_phase = [&](Phase p) {
    st.phase = p;
    rep.phase_log.emplace_back(st.clock, p);
  };
  rep.phase_log.emplace_back(0.0, st.phase);

  const int max_steps = static_cast<int>(std::ceil(cfg.budget() / cfg.dt));
  for (int step = 0; step <= max_steps; ++step) {
    st.clock = step * cfg.dt;

    // Scripted human motion (occluded_search): relocate while concealed,
    // pausing whenever the next step would crowd the drone.
    if (!walking_done && st.clock >= cfg.hide_start + 0.25 * cfg.hide_duration) {
      Vec3 to = *L.humans[0].walk_to - st.humans[0];
      double d = to.head<2>().norm();
      double stepd = cfg.human_speed * cfg.dt;
      Vec3 next = d <= stepd ? *L.humans[0].walk_to : Vec3(st.humans[0] + to * (stepd / d));
      if (detail::planar_distance(next, st.drone) >= margin + 0.1) st.humans[0] = next;
      walking_done = (st.humans[0] - *L.humans[0].walk_to).norm() < 1e-9;
    }

    // Perception: geometric visibility, then the noisy detector.
    const bool concealed = cfg.always_hidden || (!accident && st.clock >= cfg.hide_start &&
                                                  st.clock < cfg.hide_start + cfg.hide_duration);
    std::vector<Detection> dets;
    for (std::size_t i = 0; i < st.humans.size(); ++i) {
      bool vis = !concealed && detail::planar_distance(st.drone, st.humans[i]) <= cfg.sensor_range &&
                 detail::segment_clear(grid, L.occluder, st.drone, st.humans[i]);
      st.visible[i] = vis;
      // Draw noise unconditionally so the random stream does not depend on visibility.
      double drop = u01(rng), jx = n01(rng) * cfg.noise.center_sigma_px, jy = n01(rng) * cfg.noise.center_sigma_px;
      if (!vis || drop < cfg.noise.dropout) continue;
      ImagePoint c = cam.world_to_image(st.humans[i]);
      c.u = std::clamp(c.u + jx, 0.0, cam.intrinsics.width - 1.0);
      c.v = std::clamp(c.v + jy, 0.0, cam.intrinsics.height - 1.0);
      const double hb = cfg.noise.box_half_px;
      Detection d;
      d.x1 = std::max(-0.5, c.u - hb);
      d.x2 = std::min(cam.intrinsics.width - 0.5, c.u + hb);
      d.y1 = std::max(-0.5, c.v - hb);
      d.y2 = std::min(cam.intrinsics.height - 0.5, c.v + hb);
      d.confidence = 0.6 + 0.35 * u01(rng);
      d.label = L.humans[i].label;
      dets.push_back(d);
    }
    std::vector<Detection> target_dets;
    for (const auto& d : dets)
      if (d.label == L.humans[target].label) target_dets.push_back(d);

    TraceStep ts;
    ts.detected = !target_dets.empty();
    if (ts.detected) {
      ImagePoint g = infer_goal(target_dets);
      Vec3 meas = cam.image_to_world(g, cam.height);
      estimate[target] = estimate[target] ? Vec3(*estimate[target] + cfg.goal_smoothing * (meas - *estimate[target]))
                                          : meas;
    }
    st.last_known_goal = estimate[target];
    Vec3 goal = estimate[target] ? *estimate[target] : L.humans[target].prior;
    ts.goal_source = ts.detected ? "detection" : (estimate[target] ? "last_known" : "prior");

    // Phase logic on true distances.
    const double true_d = detail::planar_distance(st.drone, st.humans[target]);
    const bool in_band = true_d >= margin && true_d <= margin + cfg.success_band;
    if ((st.phase == Phase::SeekFirst || st.phase == Phase::SeekSecond) && in_band && estimate[target]) {
      set_phase(accident && st.phase == Phase::SeekFirst ? Phase::Handover : Phase::Deliver);
      hold_until = st.clock + cfg.hold_time;
      route.clear();
    } else if (st.phase == Phase::Handover && st.clock >= hold_until) {
      set_phase(Phase::SeekSecond);
      target = 1;
      planned_for.reset();
      route.clear();
    } else if (st.phase == Phase::Deliver && st.clock >= hold_until) {
      set_phase(Phase::Done);
    }

    ts.t = st.clock;
    ts.drone = st.drone;
    ts.yaw = st.yaw;
    ts.humans = st.humans;
    ts.visible = st.visible;
    ts.target = target;
    ts.goal = goal;
    ts.phase = st.phase;
    rep.trace.push_back(ts);
    for (const auto& h : st.humans) rep.min_human_distance = std::min(rep.min_human_distance, detail::planar_distance(st.drone, h));

    if (st.phase == Phase::Done) {
      rep.success = true;
      break;
    }
    if (step == max_steps) break;
    const bool seeking = st.phase == Phase::SeekFirst || st.phase == Phase::SeekSecond;
    if (!seeking) continue;  // hovering during handover/delivery

    // Replanning.
    const bool goal_moved = !planned_for || detail::planar_distance(*planned_for, goal) > cfg.replan_goal_shift;
    if (st.clock - last_plan >= cfg.replan_period || goal_moved) {
      Pixel s = world_to_cell(grid, st.drone);
      Pixel gpx = to_pixel(cam.world_to_image(goal));
      gpx.row = std::clamp(gpx.row, 0, grid.rows - 1);
      gpx.col = std::clamp(gpx.col, 0, grid.cols - 1);
      try {
        auto t0 = std::chrono::steady_clock::now();
        PixelPath path = planner.plan(image, s, gpx, mix_seed(seed ^ mix_seed(0x91a2ULL + rep.plans)));
        rep.planning_time += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        ++rep.plans;
        auto wps = path_to_waypoints(path, depth, cam.intrinsics, cam.pose);
        Vec3 human_est = goal;
        human_est.z() = 0.0;
        for (auto& w : wps) w.position.z() = 0.0;
        // The safety stop applies to estimated people, not to the supplied prior location.
        route = estimate[target] ? apply_safety_stop(wps, human_est, margin) : wps;
        // Skip the current cell centre only when the shortcut is collision-free.
        route_idx = route.size() > 1 && detail::segment_clear(grid, grid.cells, st.drone, route[1].position) ? 1 : 0;
        last_plan = st.clock;
        planned_for = goal;
      } catch (const std::exception& e) {
        finish(Failure::TrackingError, std::string("planner failed: ") + e.what());
        break;
      }
    }

    // Motion: follow the route, then approach the estimate directly. The
    // low-level layer knows true human positions (proximity sensing) and the
    // local obstacle map; it never crosses the margin and never enters a
    // blocked cell. Commanding flight into an obstacle is a collision.
    auto safe = [&](const Vec3& p) {
      for (const auto& h : st.humans)
        if (detail::planar_distance(p, h) < margin) return false;
      return true;
    };
    auto free_at = [&](const Vec3& p) {
      Pixel c = world_to_cell(grid, p);
      return grid.in_bounds(c) && !grid.blocked(c);
    };
    while (route_idx < route.size() && (detail::planar_distance(st.drone, route[route_idx].position) < 1e-6 ||
                                        !safe(route[route_idx].position))) {
      ++route_idx;
    }
    Vec3 aim;
    bool have_aim = false;
    if (route_idx < route.size()) {
      aim = route[route_idx].position;
      have_aim = true;
    } else if (estimate[target]) {
      double de = detail::planar_distance(st.drone, goal);
      double want = margin + 0.5 * cfg.success_band;
      if (de > want && detail::segment_clear(grid, grid.cells, st.drone, goal)) {
        aim = st.drone + (goal - st.drone) * ((de - want) / de);
        have_aim = true;
      }
    }
    if (!have_aim) continue;
    aim.z() = 0.0;
    if (!free_at(aim)) {
      Pixel c = world_to_cell(grid, aim);
      finish(Failure::Collision, "commanded waypoint inside obstacle cell (" + std::to_string(c.row) + ", " +
                                     std::to_string(c.col) + ")");
      rep.trace.back().phase = Phase::Failed;
      break;
    }
    Vec3 delta = aim - st.drone;
    double dist = delta.head<2>().norm();
    if (dist < 1e-12) continue;
    double stepd = std::min(dist, cfg.speed * cfg.dt);
    Vec3 dir = delta / dist;
    auto ok = [&](const Vec3& p) { return safe(p) && free_at(p); };
    Vec3 next = st.drone;
    Vec3 moved_dir = dir;
    for (double f = 1.0; f > 1.0 / 64 && next == st.drone; f *= 0.5) {
      if (ok(st.drone + dir * (stepd * f))) next = st.drone + dir * (stepd * f);
    }
    // Slide sideways around a person or an obstacle corner in the way.
    const double kSide[] = {M_PI / 6, -M_PI / 6, M_PI / 3, -M_PI / 3, M_PI / 2, -M_PI / 2};
    if ((next - st.drone).norm() < 0.25 * stepd) {
      for (double a : kSide) {
        Vec3 d2(std::cos(a) * dir.x() - std::sin(a) * dir.y(), std::sin(a) * dir.x() + std::cos(a) * dir.y(), 0.0);
        Vec3 cand = st.drone + d2 * cfg.speed * cfg.dt;
        if (ok(cand)) {
          next = cand;
          moved_dir = d2;
          break;
        }
      }
    }
    if (next == st.drone) {
      if (route_idx < route.size()) ++route_idx;
      continue;
    }
    st.yaw = std::atan2(moved_dir.y(), moved_dir.x());
    st.drone = next;
    if (route_idx < route.size() && detail::planar_distance(st.drone, route[route_idx].position) < 1e-6) ++route_idx;
  }

  rep.duration = st.clock;
  if (!rep.success && rep.failure == Failure::None) {
    bool ever_seen = false;
    for (const auto& ts : rep.trace) ever_seen = ever_seen || (ts.target == target && ts.detected);
    finish(ever_seen ? Failure::Timeout : Failure::PerceptionLoss,
           ever_seen ? "time budget exhausted" : "target never detected before the time budget ran out");
  }
  return rep;
}

inline nlohmann::json episode_report_json(const EpisodeReport& r, bool with_trace) {
  nlohmann::json phases = nlohmann::json::array();
  for (const auto& [t, p] : r.phase_log) phases.push_back({{"t", t}, {"phase", phase_name(p)}});
  nlohmann::json j = {{"scenario", scenario_name(r.scenario)},
                      {"seed", r.seed},
                      {"world_seed", r.world_seed},
                      {"planner", r.planner},
                      {"success", r.success},
                      {"failure", failure_name(r.failure)},
                      {"diagnostic", r.diagnostic},
                      {"duration", r.duration},
                      {"min_human_distance", r.min_human_distance},
                      {"plans", r.plans},
                      {"phases", phases}};
  if (with_trace) {
    nlohmann::json tr = nlohmann::json::array();
    for (const auto& s : r.trace) {
      nlohmann::json hs = nlohmann::json::array();
      for (const auto& h : s.humans) hs.push_back(detail::vec_json(h));
      tr.push_back({{"t", s.t},
                    {"drone", detail::vec_json(s.drone)},
                    {"yaw", s.yaw},
                    {"humans", hs},
                    {"visible", s.visible},
                    {"detected", s.detected},
                    {"target", s.target},
                    {"goal", s.goal ? nlohmann::json(detail::vec_json(*s.goal)) : nlohmann::json(nullptr)},
                    {"goal_source", s.goal_source},
                    {"phase", phase_name(s.phase)}});
    }
    j["trace"] = tr;
  }
  return j;
}

struct ScenarioSummary {
  Scenario scenario = Scenario::Accident;
  int episodes = 0;
  int successes = 0;
  std::map<std::string, int> failures;
  double min_human_distance = std::numeric_limits<double>::infinity();
  std::optional<double> success_rate() const {
    if (episodes == 0) return std::nullopt;
    return double(successes) / episodes;
  }
};

struct BatchReport {
  std::vector<EpisodeReport> episodes;
  std::vector<ScenarioSummary> scenarios;
  ScenarioSummary overall;
};

/// n_seeds episodes per config with seeds first_seed .. first_seed + n_seeds - 1.
/// Episode errors are recorded, never propagated.
inline BatchReport run_batch(const std::vector<EpisodeConfig>& configs, Planner& planner, int n_seeds,
                             std::uint64_t first_seed = 0,
                             const std::function<void(const std::string&)>& log = {}) {
  BatchReport b;
  for (const auto& cfg : configs) {
    ScenarioSummary s;
    s.scenario = cfg.scenario;
    for (int k = 0; k < n_seeds; ++k) {
      std::uint64_t seed = first_seed + static_cast<std::uint64_t>(k);
      EpisodeReport r;
      try {
        r = run_episode(cfg, planner, seed);
      } catch (const std::exception& e) {
        r.scenario = cfg.scenario;
        r.seed = seed;
        r.planner = planner.name();
        r.failure = Failure::TrackingError;
        r.diagnostic = e.what();
      }
      r.trace.shrink_to_fit();
      ++s.episodes;
      if (r.success) ++s.successes;
      else ++s.failures[failure_name(r.failure)];
      s.min_human_distance = std::min(s.min_human_distance, r.min_human_distance);
      if (log) {
        log(scenario_name(cfg.scenario) + " seed " + std::to_string(seed) + ": " +
            (r.success ? "success" : failure_name(r.failure)) + " (" + std::to_string(r.duration) + " s, " +
            std::to_string(r.plans) + " plans)");
      }
      b.episodes.push_back(std::move(r));
    }
    b.overall.episodes += s.episodes;
    b.overall.successes += s.successes;
    for (const auto& [k, v] : s.failures) b.overall.failures[k] += v;
    b.overall.min_human_distance = std::min(b.overall.min_human_distance, s.min_human_distance);
    b.scenarios.push_back(s);
  }
  return b;
}

inline nlohmann::json scenario_summary_json(const ScenarioSummary& s) {
  auto rate = s.success_rate();
  return {{"scenario", scenario_name(s.scenario)},
          {"episodes", s.episodes},
          {"successes", s.successes},
          {"success_rate", rate ? nlohmann::json(*rate) : nlohmann::json(nullptr)},
          {"success_rate_defined", rate.has_value()},
          {"failures", s.failures},
          {"min_human_distance", s.episodes ? nlohmann::json(s.min_human_distance) : nlohmann::json(nullptr)}};
}

inline nlohmann::json batch_report_json(const BatchReport& b) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& s : b.scenarios) per.push_back(scenario_summary_json(s));
  nlohmann::json eps = nlohmann::json::array();
  for (const auto& e : b.episodes) eps.push_back(episode_report_json(e, false));
  nlohmann::json overall = scenario_summary_json(b.overall);
  overall.erase("scenario");
  return {{"overall", overall}, {"scenarios", per}, {"episodes", eps}};
}

}  // namespace trajdiff
