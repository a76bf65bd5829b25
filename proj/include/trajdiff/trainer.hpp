#pragma once

// Training objective, training loop and pixel-space MSE evaluation.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "trajdiff/dataset.hpp"
#include "trajdiff/denoiser.hpp"
#include "trajdiff/optim.hpp"
#include "trajdiff/sampler.hpp"
#include "trajdiff/schedule.hpp"

namespace trajdiff {

struct LossWeights {
  double lambda_path = 1.0;
  double lambda_endpoint = 1.0;
  double w_t = 1.0;
  double w_s = 1.0;
  double w_g = 1.0;

  void validate() const {
    detail::require(lambda_path >= 0 && lambda_endpoint >= 0 && w_t >= 0 && w_s >= 0 && w_g >= 0,
                    "loss weights must be non-negative");
    detail::require(lambda_path * w_t + lambda_endpoint * (w_s + w_g) > 0, "loss weights are all zero");
  }
};

template <typename T>
using Batch = std::vector<Tensor3<T>>;

namespace detail {

template <typename T>
void check_batch(const Batch<T>& pred, const Batch<T>& gt) {
  if (pred.empty() || pred.size() != gt.size()) throw InvalidArgument("loss: batch sizes differ or are empty");
  for (std::size_t b = 0; b < pred.size(); ++b) {
    require_same_shape(pred[b], gt[b], "loss");
    if (pred[b].channels != 3) throw InvalidArgument("loss: masks must have 3 channels");
    require_same_shape(pred[b], pred[0], "loss batch");
  }
}

/// (1/N) sum over batch and space of (pred - gt)^2 on one channel, N = B*H*W.
template <typename T>
double channel_mse(const Batch<T>& pred, const Batch<T>& gt, int ch) {
  double sum = 0.0;
  for (std::size_t b = 0; b < pred.size(); ++b) {
    auto p = pred[b].channel(ch);
    auto g = gt[b].channel(ch);
    for (std::size_t i = 0; i < p.size(); ++i) {
      double d = double(p[i]) - double(g[i]);
      sum += d * d;
    }
  }
  return sum / (double(pred.size()) * pred[0].plane());
}

}  // namespace detail

template <typename T>
double path_loss(const Batch<T>& pred, const Batch<T>& gt, double w_t) {
  detail::check_batch(pred, gt);
  return w_t * detail::channel_mse(pred, gt, kPathChannel);
}

template <typename T>
double endpoint_loss(const Batch<T>& pred, const Batch<T>& gt, double w_s, double w_g) {
  detail::check_batch(pred, gt);
  return 0.5 * (w_s * detail::channel_mse(pred, gt, kStartChannel) + w_g * detail::channel_mse(pred, gt, kGoalChannel));
}

template <typename T>
double total_loss(const Batch<T>& pred, const Batch<T>& gt, const LossWeights& w) {
  return w.lambda_path * path_loss(pred, gt, w.w_t) + w.lambda_endpoint * endpoint_loss(pred, gt, w.w_s, w.w_g);
}

/// d(total_loss)/d(pred), one tensor per batch element.
template <typename T>
Batch<T> total_loss_grad(const Batch<T>& pred, const Batch<T>& gt, const LossWeights& w) {
  detail::check_batch(pred, gt);
  const double n = double(pred.size()) * pred[0].plane();
  const double scale[3] = {w.lambda_endpoint * 0.5 * w.w_s * 2.0 / n, w.lambda_endpoint * 0.5 * w.w_g * 2.0 / n,
                           w.lambda_path * w.w_t * 2.0 / n};
  Batch<T> out;
  out.reserve(pred.size());
  for (std::size_t b = 0; b < pred.size(); ++b) {
    Tensor3<T> g(3, pred[b].height, pred[b].width);
    for (int ch = 0; ch < 3; ++ch) {
      auto p = pred[b].channel(ch);
      auto q = gt[b].channel(ch);
      auto d = g.channel(ch);
      for (std::size_t i = 0; i < p.size(); ++i) d[i] = static_cast<T>(scale[ch] * (double(p[i]) - double(q[i])));
    }
    out.push_back(std::move(g));
  }
  return out;
}

struct TrainConfig {
  int diffusion_steps = 100;
  int epochs = 30;
  int batch_size = 8;
  double learning_rate = 1e-3;
  int warmup_steps = 100;
  double grad_clip = 1.0;
  LossWeights weights;
  std::uint64_t seed = 0;
  int base_width = 16;
  int depth = 4;
  int time_dim = 32;

  void validate() const {
    detail::require(diffusion_steps >= 1 && epochs >= 1 && batch_size >= 1, "training sizes must be positive");
    detail::require(learning_rate > 0, "learning_rate must be positive");
    detail::require(warmup_steps >= 0 && grad_clip >= 0, "warmup/grad_clip must be non-negative");
    weights.validate();
    architecture().validate();
  }

  Architecture architecture() const { return {base_width, depth, time_dim, diffusion_steps}; }
};

inline void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"lambda_path", w.lambda_path}, {"lambda_endpoint", w.lambda_endpoint}, {"w_t", w.w_t},
       {"w_s", w.w_s}, {"w_g", w.w_g}};
}

inline void from_json(const nlohmann::json& j, LossWeights& w) {
  LossWeights d;
  w.lambda_path = j.value("lambda_path", d.lambda_path);
  w.lambda_endpoint = j.value("lambda_endpoint", d.lambda_endpoint);
  w.w_t = j.value("w_t", d.w_t);
  w.w_s = j.value("w_s", d.w_s);
  w.w_g = j.value("w_g", d.w_g);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"diffusion_steps", c.diffusion_steps}, {"epochs", c.epochs},       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},     {"warmup_steps", c.warmup_steps}, {"grad_clip", c.grad_clip},
       {"weights", c.weights},                 {"seed", c.seed},           {"base_width", c.base_width},
       {"depth", c.depth},                     {"time_dim", c.time_dim}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.diffusion_steps = j.value("diffusion_steps", d.diffusion_steps);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.weights = j.contains("weights") ? j.at("weights").get<LossWeights>() : d.weights;
  c.seed = j.value("seed", d.seed);
  c.base_width = j.value("base_width", d.base_width);
  c.depth = j.value("depth", d.depth);
  c.time_dim = j.value("time_dim", d.time_dim);
}

/// Everything needed to sample from a trained model.
struct Checkpoint {
  Denoiser<float> model;
  NoiseSchedule schedule;
  TrainConfig config;
  EndpointEncoder encoder;
};

inline constexpr const char* kWeightsFile = "weights.tdwa";
inline constexpr const char* kTrainConfigFile = "train_config.json";
inline constexpr const char* kScheduleFile = "schedule.json";
inline constexpr const char* kMetricsFile = "metrics.jsonl";

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  auto cfg_json = nlohmann::json::parse(read_file(dir / kTrainConfigFile));
  TrainConfig cfg = cfg_json.at("train").get<TrainConfig>();
  NoiseSchedule sched = schedule_from_json(nlohmann::json::parse(read_file(dir / kScheduleFile)));
  Denoiser<float> model = import_params<float>(read_file(dir / kWeightsFile), cfg.architecture());
  EndpointEncoder enc;
  if (cfg_json.contains("dataset")) {
    DatasetConfig dc = cfg_json.at("dataset").get<DatasetConfig>();
    enc.annotation_res = dc.annotation_res;
    enc.train_res = dc.train_res;
  }
  return {std::move(model), std::move(sched), cfg, enc};
}

struct EpochMetrics {
  int epoch = 0;
  long step = 0;
  double train_loss = 0.0;
  double eval_loss = 0.0;
  double wall_time = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  int best_epoch = 0;
  double best_eval_loss = 0.0;
};

namespace detail {

/// One stochastic training/eval example: random t and eps drawn from `rng`.
inline DenoiserInput<float> corrupt(const DatasetRecord& rec, const NoiseSchedule& sched, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> tdist(1, sched.num_steps);
  DenoiserInput<float> in;
  in.t = tdist(rng);
  Tensor3<float> eps(3, rec.mask.height, rec.mask.width);
  fill_normal(eps, rng);
  in.x_t = q_sample(rec.mask, in.t, eps, sched);
  in.image = rec.image;
  in.condition = condition_from_mask<float>(rec.mask);
  return in;
}

}  // namespace detail

/// Mean total loss over records with per-record seeded (t, eps); no parameter updates.
inline double evaluation_loss(const Denoiser<float>& model, const NoiseSchedule& sched,
                              const std::vector<DatasetRecord>& records, const LossWeights& w, std::uint64_t seed) {
  typename Denoiser<float>::Workspace ws;
  double sum = 0.0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    std::mt19937_64 rng(mix_seed(seed ^ mix_seed(0xe7a1ULL + i)));
    auto in = detail::corrupt(records[i], sched, rng);
    Batch<float> pred{model.predict(in, ws)};
    Batch<float> gt{records[i].mask};
    sum += total_loss(pred, gt, w);
  }
  return records.empty() ? 0.0 : sum / records.size();
}

inline nlohmann::json metrics_json(const EpochMetrics& m) {
  return {{"epoch", m.epoch}, {"step", m.step}, {"train_loss", m.train_loss}, {"eval_loss", m.eval_loss},
          {"wall_time", m.wall_time}};
}

/// Trains on the train split, evaluates on the eval split every epoch and keeps
/// the best-eval weights in out_dir. Single-threaded and fully seeded.
inline TrainResult train(const std::filesystem::path& dataset_dir, const TrainConfig& cfg,
                         const std::filesystem::path& out_dir,
                         const std::function<void(const std::string&)>& log = {}) {
  namespace fs = std::filesystem;
  cfg.validate();
  Manifest manifest = load_manifest(dataset_dir);
  auto train_set = load_split(manifest, Split::Train);
  auto eval_set = load_split(manifest, Split::Eval);
  if (train_set.empty()) throw InvalidArgument("dataset has no train split");
  if (eval_set.empty()) throw InvalidArgument("dataset has no eval split");

  fs::create_directories(out_dir);
  const NoiseSchedule sched = build_cosine_schedule(cfg.diffusion_steps);
  Denoiser<float> model(cfg.architecture(), mix_seed(cfg.seed ^ 0x1a17ULL));
  Adam<float> opt(model.parameter_count());

  nlohmann::json echo = {{"train", cfg}, {"dataset", manifest.config}, {"dataset_hash", manifest.json.value("config_hash", "")}};
  const std::string cfg_hash = config_hash(echo);
  write_file(out_dir / kTrainConfigFile, echo.dump(2) + "\n");
  write_file(out_dir / kScheduleFile, schedule_to_json(sched).dump() + "\n");
  std::ofstream metrics(out_dir / kMetricsFile, std::ios::trunc);
  if (!metrics) throw IoError("cannot write metrics log in " + out_dir.string());

  const long steps_per_epoch = static_cast<long>((train_set.size() + cfg.batch_size - 1) / cfg.batch_size);
  const long total_steps = steps_per_epoch * cfg.epochs;
  const auto t_start = std::chrono::steady_clock::now();

  TrainResult result;
  result.best_eval_loss = std::numeric_limits<double>::infinity();
  typename Denoiser<float>::Workspace ws;
  std::vector<std::size_t> order(train_set.size());
  long step = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(mix_seed(cfg.seed ^ mix_seed(static_cast<std::uint64_t>(epoch))));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double epoch_loss = 0.0;
    for (long b = 0; b < steps_per_epoch; ++b, ++step) {
      const std::size_t lo = b * cfg.batch_size;
      const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
      const std::uint64_t batch_seed = mix_seed(cfg.seed ^ mix_seed(0xba7c4ULL + static_cast<std::uint64_t>(step)));
      std::mt19937_64 rng(batch_seed);
      model.params().zero_grad();
      double batch_loss = 0.0;
      const double bsz = double(hi - lo);
      for (std::size_t k = lo; k < hi; ++k) {
        const auto& rec = train_set[order[k]];
        auto in = detail::corrupt(rec, sched, rng);
        model.forward(in, ws);
        Batch<float> pred{ws.output};
        Batch<float> gt{rec.mask};
        // Per-sample loss over N = H*W; dividing by the batch size gives N = B*H*W.
        batch_loss += total_loss(pred, gt, cfg.weights) / bsz;
        auto grad = total_loss_grad(pred, gt, cfg.weights);
        for (auto& v : grad[0].data) v = static_cast<float>(v / bsz);
        model.backward(grad[0], ws);
      }
      if (!std::isfinite(batch_loss)) {
        throw Error("non-finite training loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                    " (batch seed " + std::to_string(batch_seed) + ")");
      }
      clip_grad_norm(model.params(), cfg.grad_clip);
      opt.step(model.params(), cosine_lr(cfg.learning_rate, step, total_steps, cfg.warmup_steps));
      epoch_loss += batch_loss;
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.step = step;
    m.train_loss = epoch_loss / steps_per_epoch;
    m.eval_loss = evaluation_loss(model, sched, eval_set, cfg.weights, cfg.seed);
    m.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    metrics << metrics_json(m).dump() << "\n" << std::flush;
    result.history.push_back(m);
    if (log) {
      log("epoch " + std::to_string(epoch) + " train_loss " + std::to_string(m.train_loss) + " eval_loss " +
          std::to_string(m.eval_loss) + " (" + std::to_string(m.wall_time) + " s)");
    }
    if (m.eval_loss < result.best_eval_loss) {
      result.best_eval_loss = m.eval_loss;
      result.best_epoch = epoch;
      write_file(out_dir / kWeightsFile, export_params(model, cfg_hash));
    }
  }
  return result;
}

struct MseRecord {
  std::size_t index = 0;
  double mse_all = 0.0;
  double mse_trajectory = 0.0;
  double zero_mse_all = 0.0;
};

struct MseReport {
  std::vector<MseRecord> records;
  std::vector<std::pair<std::size_t, std::string>> failed;
  double mean_all = 0.0;
  double mean_trajectory = 0.0;
  double zero_baseline_all = 0.0;
  double zero_baseline_trajectory = 0.0;
};

/// Unweighted per-pixel MSE over all channels (and over the trajectory channel alone).
inline double mask_mse(const Mask& a, const Mask& b, int channel = -1) {
  require_same_shape(a, b, "mask_mse");
  double sum = 0.0;
  std::size_t n = 0;
  for (int ch = 0; ch < a.channels; ++ch) {
    if (channel >= 0 && ch != channel) continue;
    auto p = a.channel(ch);
    auto q = b.channel(ch);
    for (std::size_t i = 0; i < p.size(); ++i) {
      double d = double(p[i]) - double(q[i]);
      sum += d * d;
    }
    n += p.size();
  }
  return sum / n;
}

inline nlohmann::json mse_report_json(const MseReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& m : r.records) {
    per.push_back({{"index", m.index}, {"mse", m.mse_all}, {"mse_trajectory", m.mse_trajectory},
                   {"zero_prediction_mse", m.zero_mse_all}});
  }
  nlohmann::json failed = nlohmann::json::array();
  for (const auto& [i, why] : r.failed) failed.push_back({{"index", i}, {"error", why}});
  return {{"mean_mse", r.mean_all},
          {"mean_mse_trajectory", r.mean_trajectory},
          {"zero_prediction_mse", r.zero_baseline_all},
          {"zero_prediction_mse_trajectory", r.zero_baseline_trajectory},
          {"evaluated", r.records.size()},
          {"failed", failed},
          {"per_record", per}};
}

/// Scores arbitrary predictions against ground truth. `predict` returns the
/// predicted mask for record i; exceptions are recorded and the record skipped.
inline MseReport score_predictions(const std::vector<DatasetRecord>& records,
                                   const std::function<Mask(std::size_t)>& predict) {
  if (records.empty()) throw InvalidArgument("evaluate_mse: empty test split");
  MseReport rep;
  for (std::size_t i = 0; i < records.size(); ++i) {
    try {
      Mask pred = predict(i);
      MseRecord m;
      m.index = i;
      m.mse_all = mask_mse(pred, records[i].mask);
      m.mse_trajectory = mask_mse(pred, records[i].mask, kPathChannel);
      Mask zero(3, records[i].mask.height, records[i].mask.width);
      m.zero_mse_all = mask_mse(zero, records[i].mask);
      rep.records.push_back(m);
    } catch (const std::exception& e) {
      rep.failed.emplace_back(i, e.what());
    }
  }
  for (const auto& m : rep.records) {
    rep.mean_all += m.mse_all;
    rep.mean_trajectory += m.mse_trajectory;
    rep.zero_baseline_all += m.zero_mse_all;
  }
  for (const auto& r : records) {
    Mask zero(3, r.mask.height, r.mask.width);
    rep.zero_baseline_trajectory += mask_mse(zero, r.mask, kPathChannel);
  }
  if (!rep.records.empty()) {
    rep.mean_all /= rep.records.size();
    rep.mean_trajectory /= rep.records.size();
    rep.zero_baseline_all /= rep.records.size();
  }
  rep.zero_baseline_trajectory /= records.size();
  return rep;
}

/// Full reverse sampling per record (seed + index), scored against ground truth.
inline MseReport evaluate_mse(const Checkpoint& ckpt, const std::vector<DatasetRecord>& records, std::uint64_t seed,
                              const std::function<void(std::size_t)>& progress = {}) {
  return score_predictions(records, [&](std::size_t i) {
    if (progress) progress(i);
    const auto& r = records[i];
    return sample_trajectory(ckpt.model, ckpt.schedule, r.image, r.start_px, r.goal_px, seed + i, ckpt.encoder);
  });
}

}  // namespace trajdiff
