#pragma once

// Closed-form diffusion mathematics: squared-cosine noise schedule, forward
// q-sampling and the DDPM posterior step in x0-parameterization.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "trajdiff/error.hpp"
#include "trajdiff/tensor.hpp"

namespace trajdiff {

inline constexpr double kBetaMin = 1e-8;
inline constexpr double kBetaMax = 0.999;

/// Precomputed per-timestep tables. Timesteps run 1..T; per-step vectors are
/// stored at index t-1, while alpha_bars holds T+1 entries with alpha_bars[0] = 1.
struct NoiseSchedule {
  int num_steps = 0;
  double offset = 0.0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
  std::vector<double> posterior_mean_coef_x0;
  std::vector<double> posterior_mean_coef_xt;
  std::vector<double> posterior_variance;

  double beta(int t) const { return betas[t - 1]; }
  double alpha(int t) const { return alphas[t - 1]; }
  double alpha_bar(int t) const { return alpha_bars[t]; }
  double coef_x0(int t) const { return posterior_mean_coef_x0[t - 1]; }
  double coef_xt(int t) const { return posterior_mean_coef_xt[t - 1]; }
  double variance(int t) const { return posterior_variance[t - 1]; }

  void check_timestep(int t) const {
    if (t < 1 || t > num_steps) {
      throw InvalidArgument("timestep " + std::to_string(t) + " outside [1, " + std::to_string(num_steps) + "]");
    }
  }
};

namespace detail {
inline double cosine_signal(double t, double steps, double offset) {
  double c = std::cos(((t / steps + offset) / (1.0 + offset)) * std::numbers::pi / 2.0);
  return c * c;
}

inline void fill_posterior(NoiseSchedule& s) {
  const int n = s.num_steps;
  s.posterior_mean_coef_x0.resize(n);
  s.posterior_mean_coef_xt.resize(n);
  s.posterior_variance.resize(n);
  for (int t = 1; t <= n; ++t) {
    double ab = s.alpha_bars[t];
    double ab_prev = s.alpha_bars[t - 1];
    double beta = s.betas[t - 1];
    s.posterior_mean_coef_x0[t - 1] = std::sqrt(ab_prev) * beta / (1.0 - ab);
    s.posterior_mean_coef_xt[t - 1] = std::sqrt(s.alphas[t - 1]) * (1.0 - ab_prev) / (1.0 - ab);
    s.posterior_variance[t - 1] = beta * (1.0 - ab_prev) / (1.0 - ab);
  }
}
}  // namespace detail

inline NoiseSchedule build_cosine_schedule(int num_steps, double offset = 0.008) {
  if (num_steps < 1) throw InvalidArgument("num_steps must be >= 1");
  if (!(offset > 0.0)) throw InvalidArgument("offset must be > 0");

  NoiseSchedule s;
  s.num_steps = num_steps;
  s.offset = offset;
  const double T = num_steps;
  const double f0 = detail::cosine_signal(0.0, T, offset);

  s.betas.resize(num_steps);
  s.alphas.resize(num_steps);
  s.alpha_bars.assign(num_steps + 1, 1.0);
  double prev_raw = 1.0;
  for (int t = 1; t <= num_steps; ++t) {
    double raw = detail::cosine_signal(t, T, offset) / f0;
    double beta = std::clamp(1.0 - raw / prev_raw, kBetaMin, kBetaMax);
    prev_raw = raw;
    s.betas[t - 1] = beta;
    s.alphas[t - 1] = 1.0 - beta;
    s.alpha_bars[t] = s.alpha_bars[t - 1] * (1.0 - beta);
  }

  detail::fill_posterior(s);
  return s;
}

/// Schedule from an explicit cumulative table alpha_bars[0..T] with
/// alpha_bars[0] = 1, strictly decreasing and positive.
inline NoiseSchedule schedule_from_alpha_bars(const std::vector<double>& alpha_bars) {
  if (alpha_bars.size() < 2 || alpha_bars.front() != 1.0) throw InvalidArgument("alpha_bars must start at 1");
  NoiseSchedule s;
  s.num_steps = static_cast<int>(alpha_bars.size()) - 1;
  s.alpha_bars = alpha_bars;
  for (int t = 1; t <= s.num_steps; ++t) {
    if (!(alpha_bars[t] > 0.0 && alpha_bars[t] < alpha_bars[t - 1])) {
      throw InvalidArgument("alpha_bars must be positive and strictly decreasing");
    }
    s.alphas.push_back(alpha_bars[t] / alpha_bars[t - 1]);
    s.betas.push_back(1.0 - s.alphas.back());
  }
  detail::fill_posterior(s);
  return s;
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, elementwise.
template <typename T>
Tensor3<T> q_sample(const Tensor3<T>& x0, int t, const Tensor3<T>& eps, const NoiseSchedule& sched) {
  sched.check_timestep(t);
  require_same_shape(x0, eps, "q_sample");
  const T a = static_cast<T>(std::sqrt(sched.alpha_bar(t)));
  const T b = static_cast<T>(std::sqrt(1.0 - sched.alpha_bar(t)));
  Tensor3<T> out(x0.channels, x0.height, x0.width);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a * x0.data[i] + b * eps.data[i];
  return out;
}

/// The pair (x_t, eps) that produced it.
template <typename T>
struct NoisyMaskSample {
  Tensor3<T> x_t;
  int t = 0;
  Tensor3<T> epsilon;
};

template <typename T>
NoisyMaskSample<T> make_noisy_sample(const Tensor3<T>& x0, int t, Tensor3<T> eps, const NoiseSchedule& sched) {
  NoisyMaskSample<T> s;
  s.x_t = q_sample(x0, t, eps, sched);
  s.t = t;
  s.epsilon = std::move(eps);
  return s;
}

/// Posterior mean mu_t(x_t, x0_hat) = c0(t) x0_hat + ct(t) x_t.
template <typename T>
Tensor3<T> posterior_mean(const Tensor3<T>& x_t, const Tensor3<T>& x0_hat, int t, const NoiseSchedule& sched) {
  sched.check_timestep(t);
  require_same_shape(x_t, x0_hat, "posterior_mean");
  const double c0 = sched.coef_x0(t);
  const double ct = sched.coef_xt(t);
  Tensor3<T> out(x_t.channels, x_t.height, x_t.width);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.data[i] = static_cast<T>(c0 * x0_hat.data[i] + ct * x_t.data[i]);
  }
  return out;
}

/// One reverse step x_{t-1} = mu_t + sigma_t z; sigma_1 is forced to zero.
template <typename T>
Tensor3<T> posterior_step(const Tensor3<T>& x_t, const Tensor3<T>& x0_hat, int t, const Tensor3<T>& z,
                          const NoiseSchedule& sched) {
  require_same_shape(x_t, z, "posterior_step");
  Tensor3<T> out = posterior_mean(x_t, x0_hat, t, sched);
  if (t > 1) {
    const double sigma = std::sqrt(sched.variance(t));
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = static_cast<T>(out.data[i] + sigma * z.data[i]);
  }
  return out;
}

inline nlohmann::json schedule_to_json(const NoiseSchedule& s) {
  return {{"num_steps", s.num_steps}, {"offset", s.offset}, {"betas", s.betas}, {"alpha_bars", s.alpha_bars}};
}

/// Rebuilds the schedule from its parameters and checks the stored tables agree.
inline NoiseSchedule schedule_from_json(const nlohmann::json& j) {
  NoiseSchedule s = build_cosine_schedule(j.at("num_steps").get<int>(), j.at("offset").get<double>());
  if (j.contains("betas") && j.at("betas").get<std::vector<double>>() != s.betas) {
    throw FormatError("schedule JSON betas disagree with rebuilt schedule");
  }
  return s;
}

}  // namespace trajdiff
