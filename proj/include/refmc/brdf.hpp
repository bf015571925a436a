// Copyright (c) 2026 the refmc authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>

#include "refmc/core.hpp"
#include "refmc/dual.hpp"

namespace refmc {

// Diffuse lobe model: full Disney diffuse at the primary bounce, Lambert at
// indirect bounces (direction-independent, which is what makes the diffuse
// cache possible).
enum class DiffuseModel { Disney, Lambert };

struct SurfaceMaterial {
  Spectrum kd{0.5f, 0.5f, 0.5f};  // c_diff, channels in [0,1]
  float roughness = 0.5f;
  float metalness = 0.0f;
  float occlusion = 1.0f;  // stored, unused in shading
  Vec3 shading_normal{0.0f, 0.0f, 1.0f};
};

namespace brdf_detail {

// alpha = roughness^2 perceptual remapping, floored at kRoughnessMin.
template <typename T>
T ggx_alpha(const T& roughness) {
  T r = dmax(roughness, kRoughnessMin);
  return r * r;
}

template <typename T>
T ggx_d_t(const T& n_dot_h, const T& roughness) {
  T a = ggx_alpha(roughness);
  T a2 = a * a;
  T c = dclamp(n_dot_h, 0.0f, 1.0f);
  T denom = c * c * (a2 - 1.0f) + 1.0f;
  return a2 / (kPi * denom * denom);
}

// Smith Lambda for GGX.
template <typename T>
T smith_lambda(const T& cos_theta, const T& alpha) {
  using std::sqrt;
  T c = dclamp(cos_theta, 1e-6f, 1.0f);
  T tan2 = (1.0f - c * c) / (c * c);
  return (sqrt(T(1.0f) + alpha * alpha * tan2) - 1.0f) * 0.5f;
}

// Height-correlated Smith masking-shadowing; symmetric in (wi, wo).
template <typename T>
T smith_g_t(const T& cos_i, const T& cos_o, const T& roughness) {
  T a = ggx_alpha(roughness);
  return 1.0f / (1.0f + smith_lambda(cos_i, a) + smith_lambda(cos_o, a));
}

template <typename T>
T smith_g1_t(const T& cos_v, const T& roughness) {
  T a = ggx_alpha(roughness);
  return 1.0f / (1.0f + smith_lambda(cos_v, a));
}

template <typename T>
TVec3<T> fresnel_schlick_t(const TVec3<T>& f0, const T& cos_theta) {
  T w = pow5(1.0f - dclamp(cos_theta, 0.0f, 1.0f));
  return f0 + (TVec3<T>(T(1.0f), T(1.0f), T(1.0f)) - f0) * w;
}

template <typename T>
struct TMaterial {
  TVec3<T> kd;
  T roughness;
  T metalness;
};

template <typename T>
TVec3<T> f0_from_metalness(const TMaterial<T>& m) {
  TVec3<T> dielectric(T(0.04f), T(0.04f), T(0.04f));
  return dielectric + (m.kd - dielectric) * m.metalness;
}

// Specular Cook-Torrance term DFG / (4 cos_i cos_o).
template <typename T>
TVec3<T> eval_specular_t(const TMaterial<T>& m, const TVec3<T>& n, const Vec3& wi,
                         const Vec3& wo) {
  T cos_i = dot(n, TVec3<T>(T(wi.x), T(wi.y), T(wi.z)));
  T cos_o = dot(n, TVec3<T>(T(wo.x), T(wo.y), T(wo.z)));
  if (scalar_value(cos_i) <= 0.0f || scalar_value(cos_o) <= 0.0f)
    return TVec3<T>(T(0.0f), T(0.0f), T(0.0f));
  Vec3 h = normalize(wi + wo);
  TVec3<T> ht(T(h.x), T(h.y), T(h.z));
  T n_dot_h = dot(n, ht);
  T d = ggx_d_t(n_dot_h, m.roughness);
  T g = smith_g_t(cos_i, cos_o, m.roughness);
  // theta_d: angle between wi and the half vector (Disney convention).
  T h_dot_i = T(dot(h, wi));
  TVec3<T> f = fresnel_schlick_t(f0_from_metalness(m), h_dot_i);
  T k = d * g / (4.0f * cos_i * cos_o);
  return f * k;
}

template <typename T>
TVec3<T> eval_diffuse_t(const TMaterial<T>& m, const TVec3<T>& n, const Vec3& wi,
                        const Vec3& wo, DiffuseModel model) {
  T cos_i = dot(n, TVec3<T>(T(wi.x), T(wi.y), T(wi.z)));
  T cos_o = dot(n, TVec3<T>(T(wo.x), T(wo.y), T(wo.z)));
  if (scalar_value(cos_i) <= 0.0f || scalar_value(cos_o) <= 0.0f)
    return TVec3<T>(T(0.0f), T(0.0f), T(0.0f));
  T scale = (1.0f - m.metalness) * kInvPi;
  if (model == DiffuseModel::Disney) {
    Vec3 h = normalize(wi + wo);
    T cos_d = T(dot(h, wi));
    T fd90 = 0.5f + 2.0f * m.roughness * cos_d * cos_d;
    T fi = 1.0f + (fd90 - 1.0f) * pow5(1.0f - dclamp(cos_i, 0.0f, 1.0f));
    T fo = 1.0f + (fd90 - 1.0f) * pow5(1.0f - dclamp(cos_o, 0.0f, 1.0f));
    scale = scale * fi * fo;
  }
  return m.kd * scale;
}

}  // namespace brdf_detail

inline float ggx_d(const Vec3& n, const Vec3& h, float roughness) {
  return brdf_detail::ggx_d_t(dot(n, h), roughness);
}

inline float smith_g(const Vec3& n, const Vec3& wi, const Vec3& wo, float roughness) {
  return brdf_detail::smith_g_t(dot(n, wi), dot(n, wo), roughness);
}

inline float smith_g1(const Vec3& n, const Vec3& wv, float roughness) {
  return brdf_detail::smith_g1_t(dot(n, wv), roughness);
}

inline Spectrum fresnel_schlick(const Spectrum& f0, float cos_theta) {
  return brdf_detail::fresnel_schlick_t(f0, cos_theta);
}

inline Spectrum f0_from_metalness(const Spectrum& kd, float metalness) {
  return lerp(Spectrum(0.04f, 0.04f, 0.04f), kd, metalness);
}

namespace brdf_detail {
inline TMaterial<float> to_t(const SurfaceMaterial& m) {
  return {m.kd, m.roughness, m.metalness};
}
}  // namespace brdf_detail

// Full BSDF with Disney diffuse (Eq.-7-style primary shading).
inline Spectrum eval_bsdf_primary(const SurfaceMaterial& m, const Vec3& wi, const Vec3& wo,
                                  const Vec3& n) {
  auto tm = brdf_detail::to_t(m);
  return brdf_detail::eval_diffuse_t(tm, n, wi, wo, DiffuseModel::Disney) +
         brdf_detail::eval_specular_t(tm, n, wi, wo);
}

// Full BSDF with the Lambertian diffuse simplification used at indirect bounces.
inline Spectrum eval_bsdf_indirect(const SurfaceMaterial& m, const Vec3& wi, const Vec3& wo,
                                   const Vec3& n) {
  auto tm = brdf_detail::to_t(m);
  return brdf_detail::eval_diffuse_t(tm, n, wi, wo, DiffuseModel::Lambert) +
         brdf_detail::eval_specular_t(tm, n, wi, wo);
}

inline Spectrum eval_bsdf_diffuse(const SurfaceMaterial& m, const Vec3& wi, const Vec3& wo,
                                  const Vec3& n, DiffuseModel model) {
  return brdf_detail::eval_diffuse_t(brdf_detail::to_t(m), n, wi, wo, model);
}

inline Spectrum eval_bsdf_specular(const SurfaceMaterial& m, const Vec3& wi, const Vec3& wo,
                                   const Vec3& n) {
  return brdf_detail::eval_specular_t(brdf_detail::to_t(m), n, wi, wo);
}

}  // namespace refmc
