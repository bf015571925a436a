// Copyright (c) 2026 the refmc authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "refmc/core.hpp"
#include "refmc/rng.hpp"
#include "refmc/sampling.hpp"
#include "refmc/texture.hpp"

namespace refmc {

// Equirectangular mapping, +z at the top pole (v = 0).
inline Vec2 envmap_uv_from_dir(const Vec3& d) {
  float phi = std::atan2(d.y, d.x);
  if (phi < 0.0f) phi += kTwoPi;
  float theta = std::acos(clampf(d.z, -1.0f, 1.0f));
  return {phi / kTwoPi, theta / kPi};
}

inline Vec3 envmap_dir_from_uv(Vec2 uv) {
  float phi = uv.x * kTwoPi;
  float theta = uv.y * kPi;
  float st = std::sin(theta);
  return {st * std::cos(phi), st * std::sin(phi), std::cos(theta)};
}

// Equirectangular radiance map with marginal/conditional CDF tables for
// luminance-proportional sampling.
struct EnvironmentMap {
  Texture2D radiance;  // 3 channels; wrap repeat in u handled by lookup

  // Sampling tables, built by build_env_cdf. texel_prob is the discrete
  // probability of each texel; cond_cdf is per-row over columns.
  std::vector<float> marginal_cdf;
  std::vector<float> conditional_cdf;
  std::vector<float> texel_prob;
  bool uniform_fallback = false;
  bool cdf_valid = false;

  int width() const { return radiance.width; }
  int height() const { return radiance.height; }

  static EnvironmentMap constant(const Spectrum& c, int w = 64, int h = 32) {
    EnvironmentMap env;
    float v[3] = {c.x, c.y, c.z};
    env.radiance = Texture2D::constant(w, h, 3, v);
    return env;
  }
};

// Bilinear radiance lookup; shares the direction<->texel mapping with the pdf.
inline Spectrum env_lookup(const EnvironmentMap& env, const Vec3& dir,
                           TexelFootprint* fp = nullptr) {
  Vec2 uv = envmap_uv_from_dir(dir);
  // u wraps azimuthally; v is clamped so bilinear taps never cross a pole row
  int h = env.radiance.height;
  if (h > 0) uv.y = clampf(uv.y, 0.5f / h, 1.0f - 0.5f / h);
  return tex_lookup_rgb(env.radiance, uv, fp);
}

// Rebuilds the luminance x sin(theta) sampling tables. All-zero maps flip the
// uniform-sphere fallback flag instead.
inline void build_env_cdf(EnvironmentMap& env) {
  int w = env.width(), h = env.height();
  env.marginal_cdf.assign(static_cast<size_t>(h), 0.0f);
  env.conditional_cdf.assign(static_cast<size_t>(w) * h, 0.0f);
  env.texel_prob.assign(static_cast<size_t>(w) * h, 0.0f);
  std::vector<double> row_weight(static_cast<size_t>(h), 0.0);
  double total = 0.0;
  for (int y = 0; y < h; ++y) {
    float sin_theta = std::sin(kPi * (y + 0.5f) / h);
    double row = 0.0;
    for (int x = 0; x < w; ++x) {
      const float* t = env.radiance.texel(x, y);
      double wgt = static_cast<double>(luminance({t[0], t[1], t[2]})) * sin_theta;
      row += wgt;
      env.conditional_cdf[static_cast<size_t>(y) * w + x] = static_cast<float>(row);
    }
    row_weight[y] = row;
    total += row;
  }
  if (total <= 0.0) {
    env.uniform_fallback = true;
    env.cdf_valid = true;
    return;
  }
  env.uniform_fallback = false;
  double acc = 0.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      size_t i = static_cast<size_t>(y) * w + x;
      env.conditional_cdf[i] =
          row_weight[y] > 0.0
              ? static_cast<float>(env.conditional_cdf[i] / row_weight[y])
              : static_cast<float>(x + 1) / w;
      float prev = x > 0 ? env.conditional_cdf[i - 1] : 0.0f;
      env.texel_prob[i] = static_cast<float>((env.conditional_cdf[i] - prev) *
                                             (row_weight[y] / total));
    }
    env.conditional_cdf[static_cast<size_t>(y) * w + w - 1] = 1.0f;
    acc += row_weight[y] / total;
    env.marginal_cdf[y] = static_cast<float>(acc);
  }
  env.marginal_cdf[h - 1] = 1.0f;
  env.cdf_valid = true;
}

// Solid angle covered by texel row y (per texel): (2pi/W) * (cos t0 - cos t1).
inline float env_texel_solid_angle(const EnvironmentMap& env, int y) {
  int w = env.width(), h = env.height();
  float t0 = kPi * y / h;
  float t1 = kPi * (y + 1) / h;
  return (kTwoPi / w) * (std::cos(t0) - std::cos(t1));
}

// Density (sr^-1) of sample_envmap at direction dir. Matches the sampling
// procedure exactly: texel probability times the in-texel (u,v)->solid-angle
// Jacobian.
inline float envmap_pdf(const EnvironmentMap& env, const Vec3& dir) {
  if (env.uniform_fallback) return uniform_sphere_pdf();
  int w = env.width(), h = env.height();
  Vec2 uv = envmap_uv_from_dir(dir);
  int x = std::min(w - 1, std::max(0, static_cast<int>(uv.x * w)));
  int y = std::min(h - 1, std::max(0, static_cast<int>(uv.y * h)));
  float sin_theta = std::sqrt(std::max(0.0f, 1.0f - dir.z * dir.z));
  if (sin_theta < 1e-8f) sin_theta = 1e-8f;
  float prob = env.texel_prob[static_cast<size_t>(y) * w + x];
  return prob * w * h / (2.0f * kPi * kPi * sin_theta);
}

// Luminance-proportional environment sample. Requires build_env_cdf.
inline DirectionSample sample_envmap(const EnvironmentMap& env, Rng& rng) {
  DirectionSample s;
  s.strategy = SampleStrategy::EnvLight;
  if (env.uniform_fallback) {
    s.direction = sample_uniform_sphere(rng);
    s.pdf = uniform_sphere_pdf();
    return s;
  }
  int w = env.width(), h = env.height();
  float uy = rng.next_f32();
  int y = static_cast<int>(std::lower_bound(env.marginal_cdf.begin(), env.marginal_cdf.end(), uy) -
                           env.marginal_cdf.begin());
  y = std::min(y, h - 1);
  float ux = rng.next_f32();
  auto row_begin = env.conditional_cdf.begin() + static_cast<size_t>(y) * w;
  int x = static_cast<int>(std::lower_bound(row_begin, row_begin + w, ux) - row_begin);
  x = std::min(x, w - 1);
  // uniform jitter within the texel's (u,v) rectangle
  Vec2 j = rng.next_2d();
  Vec2 uv{(x + j.x) / w, (y + j.y) / h};
  s.direction = envmap_dir_from_uv(uv);
  s.pdf = envmap_pdf(env, s.direction);
  if (!(s.pdf > 0.0f) || !std::isfinite(s.pdf)) s.pdf = 0.0f;
  return s;
}

// Total environment power: sum over texels of L * texel solid angle.
inline Spectrum env_total_radiance(const EnvironmentMap& env) {
  Spectrum total(0.0f);
  for (int y = 0; y < env.height(); ++y) {
    float omega = env_texel_solid_angle(env, y);
    for (int x = 0; x < env.width(); ++x) {
      const float* t = env.radiance.texel(x, y);
      total += Spectrum{t[0], t[1], t[2]} * omega;
    }
  }
  return total;
}

}  // namespace refmc
