// Copyright (c) 2026 the refmc authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>

#include "refmc/brdf.hpp"
#include "refmc/core.hpp"
#include "refmc/rng.hpp"

namespace refmc {

enum class SampleStrategy { EnvLight, BrdfDiffuse, BrdfSpecular };

struct DirectionSample {
  Vec3 direction{0.0f, 0.0f, 1.0f};
  float pdf = 0.0f;  // sr^-1; 0 marks an invalid sample the caller discards
  SampleStrategy strategy = SampleStrategy::BrdfDiffuse;

  bool valid() const { return pdf > 0.0f; }
};

// Cosine-weighted hemisphere sample around n; pdf = cos(theta)/pi.
inline DirectionSample sample_cosine_hemisphere(const Vec3& n, Rng& rng) {
  Vec2 u = rng.next_2d();
  float r = std::sqrt(u.x);
  float phi = kTwoPi * u.y;
  float z = std::sqrt(std::max(0.0f, 1.0f - u.x));
  Vec3 local{r * std::cos(phi), r * std::sin(phi), z};
  Frame frame = Frame::from_normal(n);
  DirectionSample s;
  s.direction = frame.to_world(local);
  s.pdf = std::max(z, 1e-8f) * kInvPi;
  s.strategy = SampleStrategy::BrdfDiffuse;
  return s;
}

inline Vec3 sample_uniform_sphere(Rng& rng) {
  Vec2 u = rng.next_2d();
  float z = 1.0f - 2.0f * u.x;
  float r = std::sqrt(std::max(0.0f, 1.0f - z * z));
  float phi = kTwoPi * u.y;
  return {r * std::cos(phi), r * std::sin(phi), z};
}

inline float uniform_sphere_pdf() { return 1.0f / (4.0f * kPi); }

namespace sampling_detail {

// Heitz 2018 visible-normal sampling, in the local frame (n = +z).
inline Vec3 sample_ggx_vndf(const Vec3& wo_local, float alpha, Vec2 u) {
  Vec3 vh = normalize(Vec3{alpha * wo_local.x, alpha * wo_local.y, wo_local.z});
  float lensq = vh.x * vh.x + vh.y * vh.y;
  Vec3 t1 = lensq > 0.0f ? Vec3{-vh.y, vh.x, 0.0f} / std::sqrt(lensq) : Vec3{1.0f, 0.0f, 0.0f};
  Vec3 t2 = cross(vh, t1);
  float r = std::sqrt(u.x);
  float phi = kTwoPi * u.y;
  float p1 = r * std::cos(phi);
  float p2 = r * std::sin(phi);
  float s = 0.5f * (1.0f + vh.z);
  p2 = (1.0f - s) * std::sqrt(std::max(0.0f, 1.0f - p1 * p1)) + s * p2;
  float p3 = std::sqrt(std::max(0.0f, 1.0f - p1 * p1 - p2 * p2));
  Vec3 nh = t1 * p1 + t2 * p2 + vh * p3;
  return normalize(Vec3{alpha * nh.x, alpha * nh.y, std::max(0.0f, nh.z)});
}

}  // namespace sampling_detail

// pdf of sample_ggx for direction wi (VNDF density mapped through reflection):
// p(wi) = G1(wo) D(h) / (4 (n.wo)).
inline float ggx_pdf(const Vec3& n, const Vec3& wo, const Vec3& wi, float roughness) {
  float cos_o = dot(n, wo);
  float cos_i = dot(n, wi);
  if (cos_o <= 0.0f || cos_i <= 0.0f) return 0.0f;
  Vec3 h = normalize(wi + wo);
  float d = ggx_d(n, h, roughness);
  float g1 = smith_g1(n, wo, roughness);
  return g1 * d / (4.0f * cos_o);
}

// GGX specular lobe sample via visible-normal sampling. Returns a zero-pdf
// sentinel when the reflected direction falls below the surface.
inline DirectionSample sample_ggx(const Vec3& n, const Vec3& wo, float roughness, Rng& rng) {
  DirectionSample s;
  s.strategy = SampleStrategy::BrdfSpecular;
  Frame frame = Frame::from_normal(n);
  Vec3 wo_local = frame.to_local(wo);
  if (wo_local.z <= 0.0f) return s;
  float r = std::max(roughness, kRoughnessMin);
  float alpha = r * r;
  Vec3 h_local = sampling_detail::sample_ggx_vndf(wo_local, alpha, rng.next_2d());
  Vec3 wi_local = reflect(wo_local, h_local);
  if (wi_local.z <= 0.0f) return s;
  s.direction = frame.to_world(wi_local);
  s.pdf = ggx_pdf(n, wo, s.direction, roughness);
  if (!(s.pdf > 0.0f) || !std::isfinite(s.pdf)) s.pdf = 0.0f;
  return s;
}

// Balance heuristic weight for a strategy drawing n_self samples at density
// pdf_self against one drawing n_other samples at pdf_other. Weights of all
// strategies for a fixed direction sum to 1.
inline float mis_balance_weight(float pdf_self, int n_self, float pdf_other, int n_other) {
  float a = static_cast<float>(n_self) * pdf_self;
  float b = static_cast<float>(n_other) * pdf_other;
  return a / (a + b);
}

}  // namespace refmc
