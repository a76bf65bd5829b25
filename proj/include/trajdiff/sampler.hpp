#pragma once

// Reverse diffusion with start/goal inpainting.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <sstream>
#include <random>

#include "trajdiff/dataset.hpp"
#include "trajdiff/denoiser.hpp"
#include "trajdiff/maskcodec.hpp"
#include "trajdiff/schedule.hpp"

namespace trajdiff {

/// Produces the clean start/goal channels exactly as the dataset annotates them
/// (blob at annotation resolution, reduced to training resolution).
struct EndpointEncoder {
  int annotation_res = 512;
  int train_res = 64;

  Tensor3<float> encode(Pixel start, Pixel goal) const {
    DatasetConfig cfg;
    cfg.annotation_res = annotation_res;
    cfg.train_res = train_res;
    for (Pixel p : {start, goal}) {
      if (p.row < 0 || p.row >= train_res || p.col < 0 || p.col >= train_res) {
        throw InvalidArgument("endpoint outside the training resolution");
      }
    }
    Mask s = annotate_path({start}, cfg);
    Mask g = annotate_path({goal}, cfg);
    Tensor3<float> out(2, train_res, train_res);
    std::copy(s.channel(kStartChannel).begin(), s.channel(kStartChannel).end(), out.data.begin());
    std::copy(g.channel(kGoalChannel).begin(), g.channel(kGoalChannel).end(), out.data.begin() + out.plane());
    return out;
  }
};

/// Called once per reverse step after inpainting, with the state x_t that is
/// fed to the denoiser and the noise used to corrupt the conditioning.
using StepObserver = std::function<void(int t, const Tensor3<float>& x_t, const Tensor3<float>& cond_noise)>;

namespace detail {
inline void fill_normal(Tensor3<float>& t, std::mt19937_64& rng) {
  std::normal_distribution<float> nd(0.0f, 1.0f);
  for (auto& v : t.data) v = nd(rng);
}
}  // namespace detail

inline Mask sample_trajectory(const Denoiser<float>& model, const NoiseSchedule& sched, const Image& image,
                              Pixel start_px, Pixel goal_px, std::uint64_t seed, const EndpointEncoder& enc = {},
                              const StepObserver& observer = {}) {
  if (model.architecture().num_steps != sched.num_steps) {
    throw InvalidArgument("denoiser and schedule disagree on the number of timesteps");
  }
  if (image.channels != 3 || image.height != enc.train_res || image.width != enc.train_res) {
    throw InvalidArgument("scene image must be (3, train_res, train_res)");
  }
  const int H = image.height, W = image.width;
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const Tensor3<float> cond = enc.encode(start_px, goal_px);
  Tensor3<float> cond3(3, H, W);
  std::copy(cond.data.begin(), cond.data.end(), cond3.data.begin());

  std::mt19937_64 rng(seed);
  Tensor3<float> x(3, H, W);
  detail::fill_normal(x, rng);

  typename Denoiser<float>::Workspace ws;
  DenoiserInput<float> in;
  in.image = image;
  in.condition = cond;
  Tensor3<float> eps(3, H, W), z(3, H, W);
  for (int t = sched.num_steps; t >= 1; --t) {
    detail::fill_normal(eps, rng);
    Tensor3<float> noised = q_sample(cond3, t, eps, sched);
    std::copy(noised.data.begin(), noised.data.begin() + 2 * plane, x.data.begin());
    if (observer) observer(t, x, eps);
    in.x_t = x;
    in.t = t;
    const Tensor3<float> x0_hat = model.predict(in, ws);
    detail::fill_normal(z, rng);
    x = posterior_step(x, x0_hat, t, z, sched);
  }
  std::copy(cond.data.begin(), cond.data.end(), x.data.begin());
  for (std::size_t i = 2 * plane; i < 3 * plane; ++i) x.data[i] = std::clamp(x.data[i], 0.0f, 1.0f);
  return x;
}

struct PlanOutput {
  PixelPath path;
  Mask mask;
  double latency_s = 0.0;
};

inline PlanOutput plan(const Denoiser<float>& model, const NoiseSchedule& sched, const Image& image, Pixel start_px,
                       Pixel goal_px, std::uint64_t seed, const EndpointEncoder& enc = {}) {
  auto t0 = std::chrono::steady_clock::now();
  PlanOutput out;
  out.mask = sample_trajectory(model, sched, image, start_px, goal_px, seed, enc);
  out.path = decode_path(out.mask);
  out.latency_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

/// Observer that writes every inpainted state as a PXDF record
/// (image = scene, mask = x_t) named step_XXX.pxdf, XXX being the timestep.
inline StepObserver step_dumper(const std::filesystem::path& dir, const Image& image, Pixel start, Pixel goal) {
  std::filesystem::create_directories(dir);
  return [dir, image, start, goal](int t, const Tensor3<float>& x_t, const Tensor3<float>&) {
    DatasetRecord rec;
    rec.image = image;
    rec.mask = x_t;
    rec.start_px = start;
    rec.goal_px = goal;
    rec.split = Split::Test;
    std::ostringstream name;
    name << "step_" << std::setw(3) << std::setfill('0') << t << ".pxdf";
    write_record(dir / name.str(), rec);
  };
}

}  // namespace trajdiff
