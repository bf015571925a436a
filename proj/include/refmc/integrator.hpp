// Copyright (c) 2026 the refmc authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <thread>
#include <vector>

#include "refmc/brdf.hpp"
#include "refmc/core.hpp"
#include "refmc/dual.hpp"
#include "refmc/envmap.hpp"
#include "refmc/geometry.hpp"
#include "refmc/rng.hpp"
#include "refmc/sampling.hpp"
#include "refmc/scene.hpp"
#include "refmc/texture.hpp"

namespace refmc {

struct RenderConfig {
  int spp = 16;
  int n_light = 4;  // MIS environment samples per shading point (primary)
  int n_brdf = 4;   // MIS BSDF samples per shading point (primary)
  int depth = 2;    // sampling times: 1, 2, or 3
  int n_light_secondary = 4;
  int n_brdf_secondary = 4;
  int n_spec_secondary = 4;  // GGX-lobe rays at an adaptive secondary hit
  float firefly_clamp = 0.0f;  // max per-sample luminance; 0 disables
  bool use_diffuse_cache = true;
  bool adaptive = true;  // specularity-adaptive secondary shading
  bool cache_at_every_bounce = false;
  DiffuseModel primary_diffuse = DiffuseModel::Disney;
  bool specular_enabled = true;  // debug switch for analytic Lambertian scenes
  int workers = 0;               // 0 = hardware concurrency

  void validate() const {
    if (spp < 1) throw std::invalid_argument("spp must be >= 1");
    if (depth < 1 || depth > 3) throw std::invalid_argument("depth must be in {1,2,3}");
    if (firefly_clamp < 0.0f) throw std::invalid_argument("firefly clamp must be > 0 or 0=off");
    if (n_light < 0 || n_brdf < 0 || n_light + n_brdf == 0)
      throw std::invalid_argument("need at least one sampling strategy");
  }
};

struct RenderStats {
  uint64_t rays = 0;
  uint64_t nan_samples = 0;
  double seconds = 0.0;
};

struct RadianceImage {
  int width = 0, height = 0, spp = 0;
  std::vector<Vec3> color;
  std::vector<Vec3> diffuse;  // C_diff: diffuse-lobe share of primary shading
  std::vector<Vec2> uv;       // primary-hit surface uv (sample 0)
  std::vector<int> material_id;
  std::vector<uint8_t> hit;

  RadianceImage() = default;
  RadianceImage(int w, int h)
      : width(w),
        height(h),
        color(static_cast<size_t>(w) * h),
        diffuse(static_cast<size_t>(w) * h),
        uv(static_cast<size_t>(w) * h),
        material_id(static_cast<size_t>(w) * h, -1),
        hit(static_cast<size_t>(w) * h, 0) {}

  ImageRgb to_image() const {
    ImageRgb img(width, height);
    img.pixels = color;
    return img;
  }
  ImageRgb diffuse_to_image() const {
    ImageRgb img(width, height);
    img.pixels = diffuse;
    return img;
  }
};

// ---------------------------------------------------------------------------
// Path tape: detached-sampling record of every radiance contribution.
// A contribution is scale * product(factors); sampling decisions (directions,
// pdfs, MIS weights, occlusion) live in `scale` and are held constant by the
// adjoint pass.
// ---------------------------------------------------------------------------

struct Factor {
  enum class Kind : uint8_t { BsdfDiffuse, BsdfSpecular, BsdfFull, EnvRadiance, CacheRadiance };
  Kind kind = Kind::EnvRadiance;
  uint8_t mat_slot = 0;
  uint8_t diffuse_model = 0;  // DiffuseModel, for diffuse lobes
  uint8_t has_normal_map = 0;
  Vec3 wi, wo;
  Vec3 n_base;  // interpolated shading normal before the normal map
  // fps[0..2] = kd/orm/normal footprints for BSDF factors; fps[0] = radiance
  // footprint for light factors.
  TexelFootprint fps[3];
};

struct PathContribution {
  uint32_t pixel = 0;
  float scale = 0.0f;
  uint32_t factor_start = 0;
  uint8_t factor_count = 0;
  uint8_t in_diffuse = 0;  // counts into C_diff
};

struct TileTape {
  std::vector<PathContribution> contributions;
  std::vector<Factor> factors;
};

struct PathTape {
  int width = 0, height = 0, spp = 0;
  std::vector<TileTape> tiles;
};

// Filtered value through a recorded footprint; identical arithmetic to
// tex_lookup so forward, replay, and adjoint agree bit-exactly.
inline float footprint_value1(const Texture2D& tex, const TexelFootprint& fp, int channel) {
  float v = 0.0f;
  for (int i = 0; i < fp.count; ++i)
    v += fp.w[i] * tex.data[static_cast<size_t>(fp.idx[i]) * tex.channels + channel];
  return v;
}

inline Vec3 footprint_value3(const Texture2D& tex, const TexelFootprint& fp, int first = 0) {
  return {footprint_value1(tex, fp, first), footprint_value1(tex, fp, first + 1),
          footprint_value1(tex, fp, first + 2)};
}

namespace integ_detail {

// BSDF factor core, shared by the float forward path and the dual adjoint
// path: f_lobe(material, normal) * max(n . wi, 0).
template <typename T>
TVec3<T> bsdf_factor_eval(const Factor& f, const TVec3<T>& kd, const T& rough, const T& metal,
                          const TVec3<T>& nrm_texel) {
  TVec3<T> n;
  if (f.has_normal_map) {
    Frame frame = Frame::from_normal(f.n_base);
    n = apply_normal_map_t(frame, nrm_texel);
  } else {
    n = TVec3<T>(T(f.n_base.x), T(f.n_base.y), T(f.n_base.z));
  }
  brdf_detail::TMaterial<T> m{kd, rough, metal};
  TVec3<T> val(T(0.0f), T(0.0f), T(0.0f));
  if (f.kind == Factor::Kind::BsdfDiffuse || f.kind == Factor::Kind::BsdfFull)
    val += brdf_detail::eval_diffuse_t(m, n, f.wi, f.wo,
                                       static_cast<DiffuseModel>(f.diffuse_model));
  if (f.kind == Factor::Kind::BsdfSpecular || f.kind == Factor::Kind::BsdfFull)
    val += brdf_detail::eval_specular_t(m, n, f.wi, f.wo);
  T cos_i = dot(n, TVec3<T>(T(f.wi.x), T(f.wi.y), T(f.wi.z)));
  return val * dmax(cos_i, 0.0f);
}

}  // namespace integ_detail

inline Vec3 factor_value(const Factor& f, const ParamSet& params) {
  switch (f.kind) {
    case Factor::Kind::EnvRadiance:
      return footprint_value3(params.env.radiance, f.fps[0]);
    case Factor::Kind::CacheRadiance:
      return footprint_value3(params.caches[f.mat_slot].tex, f.fps[0]);
    default: {
      const MaterialMaps& maps = params.materials[f.mat_slot];
      Vec3 kd = footprint_value3(maps.kd, f.fps[0]);
      float rough = footprint_value1(maps.orm, f.fps[1], 1);
      float metal = footprint_value1(maps.orm, f.fps[1], 2);
      Vec3 nrm = f.has_normal_map ? footprint_value3(maps.normal, f.fps[2]) : Vec3(0.5f, 0.5f, 1.0f);
      return integ_detail::bsdf_factor_eval(f, kd, rough, metal, nrm);
    }
  }
}

// Recompute the images encoded in a tape under (possibly different)
// parameters. With the parameters used at record time this reproduces the
// forward render bit-exactly; under perturbed parameters it is the detached
// forward model whose derivative the adjoint computes.
inline void replay_tape(const PathTape& tape, const ParamSet& params, std::vector<Vec3>& color,
                        std::vector<Vec3>& diffuse) {
  color.assign(static_cast<size_t>(tape.width) * tape.height, Vec3(0.0f));
  diffuse.assign(static_cast<size_t>(tape.width) * tape.height, Vec3(0.0f));
  for (const TileTape& tile : tape.tiles) {
    for (const PathContribution& c : tile.contributions) {
      Vec3 prod(1.0f, 1.0f, 1.0f);
      for (uint32_t k = 0; k < c.factor_count; ++k)
        prod = prod * factor_value(tile.factors[c.factor_start + k], params);
      Vec3 v = prod * c.scale;
      color[c.pixel] += v;
      if (c.in_diffuse) diffuse[c.pixel] += v;
    }
  }
}

// ---------------------------------------------------------------------------
// Forward shading.
// ---------------------------------------------------------------------------

namespace integ_detail {

struct MatSample {
  SurfaceMaterial mat;  // shading_normal already normal-mapped
  Vec3 n_base;          // interpolated shading normal (pre normal map)
  Vec3 nrm_texel{0.5f, 0.5f, 1.0f};  // raw normal-map texel (identity default)
  TexelFootprint kd_fp, orm_fp, nrm_fp;
  bool has_nrm = false;
  int slot = 0;
};

inline MatSample fetch_material(const ParamSet& params, const Hit& hit) {
  MatSample ms;
  ms.slot = hit.material_id;
  const MaterialMaps& maps = params.materials[static_cast<size_t>(hit.material_id)];
  auto kd = tex_lookup(maps.kd, hit.uv, &ms.kd_fp);
  auto orm = tex_lookup(maps.orm, hit.uv, &ms.orm_fp);
  ms.mat.kd = {kd[0], kd[1], kd[2]};
  ms.mat.occlusion = orm[0];
  ms.mat.roughness = orm[1];
  ms.mat.metalness = orm[2];
  ms.n_base = hit.n_shading;
  if (maps.has_normal_map()) {
    ms.has_nrm = true;
    ms.nrm_texel = tex_lookup_rgb(maps.normal, hit.uv, &ms.nrm_fp);
    ms.mat.shading_normal = apply_normal_map_t(Frame::from_normal(hit.n_shading), ms.nrm_texel);
  } else {
    ms.mat.shading_normal = hit.n_shading;
  }
  return ms;
}

// factor_value for a BSDF factor built from `ms`: the footprint reads in
// factor_value reproduce tex_lookup bit-exactly, so the values already held
// in the MatSample can be fed to the shared evaluator directly.
inline Vec3 bsdf_factor_value(const Factor& f, const MatSample& ms) {
  return bsdf_factor_eval(f, ms.mat.kd, ms.mat.roughness, ms.mat.metalness, ms.nrm_texel);
}

inline Factor make_bsdf_factor(Factor::Kind kind, const MatSample& ms, const Vec3& wi,
                               const Vec3& wo, DiffuseModel model) {
  Factor f;
  f.kind = kind;
  f.mat_slot = static_cast<uint8_t>(ms.slot);
  f.diffuse_model = static_cast<uint8_t>(model);
  f.has_normal_map = ms.has_nrm ? 1 : 0;
  f.wi = wi;
  f.wo = wo;
  f.n_base = ms.n_base;
  f.fps[0] = ms.kd_fp;
  f.fps[1] = ms.orm_fp;
  f.fps[2] = ms.nrm_fp;
  return f;
}

// In-flight prefix of BSDF factors along a path.
struct PathPrefix {
  float scale = 1.0f;
  Vec3 value{1.0f, 1.0f, 1.0f};
  int n = 0;
  Factor factors[3];
  bool in_diffuse = false;
};

// Contributions of one pixel sample, staged for NaN/firefly handling before
// entering the tape.
struct SampleCollector {
  struct Rec {
    float scale;
    uint32_t fstart;
    uint8_t fcount;
    uint8_t in_diffuse;
    Vec3 prod;
  };
  std::vector<Factor> factors;
  std::vector<Rec> recs;
  void clear() {
    factors.clear();
    recs.clear();
  }
};

struct ShadeContext {
  const Scene& scene;
  const RenderConfig& cfg;
  SampleCollector& out;
  uint64_t rays = 0;
  // Factor staging feeds the path tape; when no tape is recorded only the
  // numeric prod/scale of each contribution is needed, so the (large) Factor
  // copies can be skipped without changing any computed radiance.
  bool record_factors = true;
};

inline void emit(ShadeContext& ctx, const PathPrefix& prefix, const Factor& terminal,
                 const Vec3& terminal_value, float terminal_scale) {
  SampleCollector::Rec rec;
  rec.fstart = static_cast<uint32_t>(ctx.out.factors.size());
  if (ctx.record_factors) {
    for (int i = 0; i < prefix.n; ++i) ctx.out.factors.push_back(prefix.factors[i]);
    ctx.out.factors.push_back(terminal);
  }
  rec.fcount = static_cast<uint8_t>(prefix.n + 1);
  rec.scale = prefix.scale * terminal_scale;
  rec.in_diffuse = prefix.in_diffuse ? 1 : 0;
  rec.prod = prefix.value * terminal_value;
  ctx.out.recs.push_back(rec);
}

// Equivalent to emit(ctx, extend(prefix, f, fvalue, scale_mul, tag), terminal,
// terminal_value, 1.0f) with identical arithmetic order, minus the PathPrefix
// copy. This is the hot shape: one BSDF factor appended, then a terminal.
inline void emit_extended(ShadeContext& ctx, const PathPrefix& prefix, const Factor& f,
                          const Vec3& fvalue, float scale_mul, bool tag_diffuse,
                          const Factor& terminal, const Vec3& terminal_value) {
  SampleCollector::Rec rec;
  rec.fstart = static_cast<uint32_t>(ctx.out.factors.size());
  if (ctx.record_factors) {
    for (int i = 0; i < prefix.n; ++i) ctx.out.factors.push_back(prefix.factors[i]);
    ctx.out.factors.push_back(f);
    ctx.out.factors.push_back(terminal);
  }
  rec.fcount = static_cast<uint8_t>(prefix.n + 2);
  rec.scale = (prefix.scale * scale_mul) * 1.0f;
  rec.in_diffuse = (prefix.in_diffuse || tag_diffuse) ? 1 : 0;
  rec.prod = (prefix.value * fvalue) * terminal_value;
  ctx.out.recs.push_back(rec);
}

inline PathPrefix extend(const PathPrefix& prefix, const Factor& f, const Vec3& fvalue,
                         float scale_mul, bool tag_diffuse) {
  PathPrefix p = prefix;
  p.factors[p.n++] = f;
  p.value = p.value * fvalue;
  p.scale *= scale_mul;
  if (tag_diffuse) p.in_diffuse = true;
  return p;
}

// Diffuse-lobe probability of the mixture BSDF sampler.
inline float diffuse_select_prob(const ShadeContext& ctx, const MatSample& ms) {
  if (!ctx.cfg.specular_enabled) return 1.0f;
  return clampf(0.5f * (1.0f - ms.mat.metalness), 0.0f, 1.0f);
}

inline float bsdf_mixture_pdf(const ShadeContext& ctx, const MatSample& ms, const Vec3& wi,
                              const Vec3& wo) {
  float q = diffuse_select_prob(ctx, ms);
  const Vec3& n = ms.mat.shading_normal;
  float cos_pdf = std::max(dot(n, wi), 0.0f) * kInvPi;
  float spec_pdf = q < 1.0f ? ggx_pdf(n, wo, wi, ms.mat.roughness) : 0.0f;
  return q * cos_pdf + (1.0f - q) * spec_pdf;
}

inline DirectionSample sample_bsdf_mixture(const ShadeContext& ctx, const MatSample& ms,
                                           const Vec3& wo, Rng& rng) {
  float q = diffuse_select_prob(ctx, ms);
  float u = rng.next_f32();
  DirectionSample s;
  if (u < q) {
    s = sample_cosine_hemisphere(ms.mat.shading_normal, rng);
    s.strategy = SampleStrategy::BrdfDiffuse;
  } else {
    s = sample_ggx(ms.mat.shading_normal, wo, ms.mat.roughness, rng);
    if (!s.valid()) return s;
  }
  s.pdf = bsdf_mixture_pdf(ctx, ms, s.direction, wo);
  return s;
}

inline void shade_indirect(ShadeContext& ctx, const Hit& hit2, const Vec3& travel_dir,
                           int remaining, const PathPrefix& prefix, Rng& rng);

// MIS direct lighting at a shading point. remaining = sampling times left
// after this one; blocked samples are routed into shade_indirect when budget
// remains, per the indirect estimator.
inline void shade_direct(ShadeContext& ctx, const Hit& hit, const MatSample& ms, const Vec3& wo,
                         int n_light, int n_brdf, int remaining, bool is_primary,
                         const PathPrefix& prefix, Rng& rng) {
  const Scene& scene = ctx.scene;
  const EnvironmentMap& env = scene.params.env;
  Vec3 origin = hit.position + hit.n_geom * scene.ray_epsilon;
  DiffuseModel model = is_primary ? ctx.cfg.primary_diffuse : DiffuseModel::Lambert;

  auto emit_lobes = [&](const Vec3& wi, float w_over_pdf_n, const Factor& light_factor,
                        const Vec3& light_value) {
    // split primary shading into lobes so C_diff is exact
    Factor fd = make_bsdf_factor(Factor::Kind::BsdfDiffuse, ms, wi, wo, model);
    Vec3 vd = bsdf_factor_value(fd, ms);
    emit_extended(ctx, prefix, fd, vd, w_over_pdf_n, is_primary, light_factor, light_value);
    if (ctx.cfg.specular_enabled) {
      Factor fs = make_bsdf_factor(Factor::Kind::BsdfSpecular, ms, wi, wo, model);
      Vec3 vs = bsdf_factor_value(fs, ms);
      emit_extended(ctx, prefix, fs, vs, w_over_pdf_n, false, light_factor, light_value);
    }
  };

  auto route = [&](const Vec3& wi, float w_over_pdf_n, bool blocked, const Hit& hit2) {
    if (!blocked) {
      Factor lf;
      lf.kind = Factor::Kind::EnvRadiance;
      Vec3 value = env_lookup(env, wi, &lf.fps[0]);
      if (is_primary) {
        emit_lobes(wi, w_over_pdf_n, lf, value);
      } else {
        Factor fb = make_bsdf_factor(Factor::Kind::BsdfFull, ms, wi, wo, model);
        Vec3 vb = bsdf_factor_value(fb, ms);
        emit_extended(ctx, prefix, fb, vb, w_over_pdf_n, false, lf, value);
      }
      return;
    }
    if (remaining < 1) return;  // depth exhausted: blocked rays carry nothing
    if (is_primary) {
      Factor fd = make_bsdf_factor(Factor::Kind::BsdfDiffuse, ms, wi, wo, model);
      Vec3 vd = bsdf_factor_value(fd, ms);
      Rng rng_d = rng;  // both lobes see the same indirect sub-estimates
      shade_indirect(ctx, hit2, wi, remaining, extend(prefix, fd, vd, w_over_pdf_n, true), rng_d);
      if (ctx.cfg.specular_enabled) {
        Factor fs = make_bsdf_factor(Factor::Kind::BsdfSpecular, ms, wi, wo, model);
        Vec3 vs = bsdf_factor_value(fs, ms);
        shade_indirect(ctx, hit2, wi, remaining, extend(prefix, fs, vs, w_over_pdf_n, false), rng);
      } else {
        rng = rng_d;
      }
    } else {
      Factor fb = make_bsdf_factor(Factor::Kind::BsdfFull, ms, wi, wo, model);
      Vec3 vb = bsdf_factor_value(fb, ms);
      shade_indirect(ctx, hit2, wi, remaining, extend(prefix, fb, vb, w_over_pdf_n, false), rng);
    }
  };

  // --- light strategy
  for (int j = 0; j < n_light; ++j) {
    DirectionSample ls = sample_envmap(env, rng);
    if (!ls.valid()) continue;
    const Vec3& wi = ls.direction;
    if (dot(wi, hit.n_geom) <= 0.0f || dot(wi, ms.mat.shading_normal) <= 0.0f) continue;
    float pdf_b = n_brdf > 0 ? bsdf_mixture_pdf(ctx, ms, wi, wo) : 0.0f;
    float w = mis_balance_weight(ls.pdf, n_light, pdf_b, n_brdf);
    float w_over_pdf_n = w / (ls.pdf * static_cast<float>(n_light));
    ++ctx.rays;
    if (remaining >= 1) {
      auto hit2 = trace(ctx.scene.bvh, ctx.scene.mesh, origin, wi, 0.0f, kInfinity);
      route(wi, w_over_pdf_n, hit2.has_value(), hit2 ? *hit2 : Hit{});
    } else {
      bool blocked = occluded(ctx.scene.bvh, ctx.scene.mesh, origin, wi, 0.0f, kInfinity);
      if (!blocked) route(wi, w_over_pdf_n, false, Hit{});
    }
  }

  // --- BSDF strategy
  for (int j = 0; j < n_brdf; ++j) {
    DirectionSample bs = sample_bsdf_mixture(ctx, ms, wo, rng);
    if (!bs.valid()) continue;
    const Vec3& wi = bs.direction;
    if (dot(wi, hit.n_geom) <= 0.0f) continue;
    float pdf_l = n_light > 0 ? envmap_pdf(env, wi) : 0.0f;
    float w = mis_balance_weight(bs.pdf, n_brdf, pdf_l, n_light);
    float w_over_pdf_n = w / (bs.pdf * static_cast<float>(n_brdf));
    ++ctx.rays;
    auto hit2 = trace(ctx.scene.bvh, ctx.scene.mesh, origin, wi, 0.0f, kInfinity);
    route(wi, w_over_pdf_n, hit2.has_value(), hit2 ? *hit2 : Hit{});
  }
}

// Shading of a secondary surface point reached by a blocked sample.
// remaining >= 1 is the sampling budget including this point's sampling.
// Adaptive mode at the deepest bounce reads the diffuse cache and traces only
// a small GGX specular lobe.
inline void shade_indirect(ShadeContext& ctx, const Hit& hit2, const Vec3& travel_dir,
                           int remaining, const PathPrefix& prefix, Rng& rng) {
  if (remaining < 1) return;
  const Scene& scene = ctx.scene;
  MatSample ms2 = fetch_material(scene.params, hit2);
  Vec3 wo2 = -travel_dir;
  bool adaptive_here = ctx.cfg.adaptive && ctx.cfg.use_diffuse_cache &&
                       (remaining == 1 || ctx.cfg.cache_at_every_bounce);
  if (!adaptive_here) {
    shade_direct(ctx, hit2, ms2, wo2, ctx.cfg.n_light_secondary, ctx.cfg.n_brdf_secondary,
                 remaining - 1, /*is_primary=*/false, prefix, rng);
    return;
  }
  // diffuse: direction-independent cached outgoing radiance
  Factor cf;
  cf.kind = Factor::Kind::CacheRadiance;
  cf.mat_slot = static_cast<uint8_t>(ms2.slot);
  Vec3 cache_value = tex_lookup_rgb(scene.params.caches[ms2.slot].tex, hit2.uv, &cf.fps[0]);
  emit(ctx, prefix, cf, cache_value, 1.0f);
  // specular: a few rays in the GGX lobe, environment light only
  if (!ctx.cfg.specular_enabled) return;
  int nspec = ctx.cfg.n_spec_secondary;
  Vec3 origin = hit2.position + hit2.n_geom * scene.ray_epsilon;
  for (int k = 0; k < nspec; ++k) {
    DirectionSample gs = sample_ggx(ms2.mat.shading_normal, wo2, ms2.mat.roughness, rng);
    if (!gs.valid() || dot(gs.direction, hit2.n_geom) <= 0.0f) continue;
    ++ctx.rays;
    if (occluded(scene.bvh, scene.mesh, origin, gs.direction, 0.0f, kInfinity)) continue;
    Factor fs = make_bsdf_factor(Factor::Kind::BsdfSpecular, ms2, gs.direction, wo2,
                                 DiffuseModel::Lambert);
    Vec3 vs = bsdf_factor_value(fs, ms2);
    Factor lf;
    lf.kind = Factor::Kind::EnvRadiance;
    Vec3 lv = env_lookup(scene.params.env, gs.direction, &lf.fps[0]);
    emit_extended(ctx, prefix, fs, vs, 1.0f / (gs.pdf * static_cast<float>(nspec)), false, lf, lv);
  }
}

}  // namespace integ_detail

// ---------------------------------------------------------------------------
// Per-ray estimator and full-frame renderer.
// ---------------------------------------------------------------------------

struct EstimateAux {
  bool hit = false;
  Vec2 uv;
  int material_id = -1;
  Vec3 c_diff;
  uint64_t rays = 0;
  bool nan_discarded = false;
};

// Estimates radiance along one camera ray, staging contributions in
// `collector`. Returns the (clamped) sample radiance.
inline Vec3 estimate_radiance(const Scene& scene, const Ray& ray, const RenderConfig& cfg,
                              Rng& rng, integ_detail::SampleCollector& collector,
                              EstimateAux* aux = nullptr, bool record_factors = true) {
  using namespace integ_detail;
  collector.clear();
  ShadeContext ctx{scene, cfg, collector};
  ctx.record_factors = record_factors;
  ++ctx.rays;
  auto hit = trace(scene.bvh, scene.mesh, ray.origin, ray.dir, ray.t_min, ray.t_max);
  if (!hit) {
    Factor lf;
    lf.kind = Factor::Kind::EnvRadiance;
    Vec3 value = env_lookup(scene.params.env, ray.dir, &lf.fps[0]);
    PathPrefix empty;
    emit(ctx, empty, lf, value, 1.0f);
  } else {
    MatSample ms = fetch_material(scene.params, *hit);
    PathPrefix empty;
    shade_direct(ctx, *hit, ms, -ray.dir, cfg.n_light, cfg.n_brdf, cfg.depth - 1,
                 /*is_primary=*/true, empty, rng);
    if (aux) {
      aux->hit = true;
      aux->uv = hit->uv;
      aux->material_id = hit->material_id;
    }
  }
  // finalize: NaN audit, firefly clamp, per-contribution values
  Vec3 total(0.0f);
  Vec3 total_diffuse(0.0f);
  bool finite = true;
  for (const auto& r : collector.recs) {
    Vec3 v = r.prod * r.scale;
    if (!is_finite(v)) finite = false;
    total += v;
  }
  if (!finite) {
    collector.clear();
    if (aux) {
      aux->nan_discarded = true;
      aux->rays = ctx.rays;
    }
    return Vec3(0.0f);
  }
  float s = 1.0f;
  if (cfg.firefly_clamp > 0.0f) {
    float lum = luminance(total);
    if (lum > cfg.firefly_clamp) s = cfg.firefly_clamp / lum;
  }
  total = Vec3(0.0f);
  for (auto& r : collector.recs) {
    r.scale *= s;
    Vec3 v = r.prod * r.scale;
    total += v;
    if (r.in_diffuse) total_diffuse += v;
  }
  if (aux) {
    aux->c_diff = total_diffuse;
    aux->rays = ctx.rays;
  }
  return total;
}

inline int resolve_workers(int requested) {
  if (requested > 0) return requested;
  unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

// Renders a frame. Deterministic for a fixed seed regardless of worker
// count: every (pixel, sample) pair owns a counter-based RNG stream and each
// pixel is written by exactly one tile.
inline RadianceImage render(const Scene& scene, const Camera& camera, const RenderConfig& cfg,
                            uint64_t seed, PathTape* tape = nullptr,
                            RenderStats* stats = nullptr) {
  cfg.validate();
  const auto t_start = std::chrono::steady_clock::now();
  const int w = camera.width, h = camera.height;
  constexpr int kTile = 16;
  const int tiles_x = (w + kTile - 1) / kTile;
  const int tiles_y = (h + kTile - 1) / kTile;
  const int tile_count = tiles_x * tiles_y;

  RadianceImage img(w, h);
  img.spp = cfg.spp;
  if (tape) {
    tape->width = w;
    tape->height = h;
    tape->spp = cfg.spp;
    tape->tiles.assign(static_cast<size_t>(tile_count), {});
  }

  std::atomic<int> next_tile{0};
  std::atomic<uint64_t> total_rays{0};
  std::atomic<uint64_t> total_nan{0};

  auto worker = [&]() {
    integ_detail::SampleCollector collector;
    uint64_t rays = 0, nans = 0;
    for (;;) {
      int tile = next_tile.fetch_add(1);
      if (tile >= tile_count) break;
      int tx = tile % tiles_x, ty = tile / tiles_x;
      TileTape* tt = tape ? &tape->tiles[static_cast<size_t>(tile)] : nullptr;
      for (int y = ty * kTile; y < std::min(h, (ty + 1) * kTile); ++y) {
        for (int x = tx * kTile; x < std::min(w, (tx + 1) * kTile); ++x) {
          uint32_t pixel = static_cast<uint32_t>(y) * w + x;
          Vec3 acc(0.0f), acc_diff(0.0f);
          for (int s = 0; s < cfg.spp; ++s) {
            Rng rng = Rng::for_stream(seed, pixel, static_cast<uint64_t>(s));
            Vec2 jitter = cfg.spp > 1 ? rng.next_2d() : Vec2{0.5f, 0.5f};
            Ray ray = camera.generate_ray(x + jitter.x, y + jitter.y);
            ray.t_min = scene.ray_epsilon;
            EstimateAux aux;
            estimate_radiance(scene, ray, cfg, rng, collector, &aux, tape != nullptr);
            rays += aux.rays;
            if (aux.nan_discarded) ++nans;
            // accumulate per contribution, in the exact arithmetic order
            // replay_tape uses, so taped renders replay bit-exactly
            float inv_spp = 1.0f / cfg.spp;
            for (const auto& r : collector.recs) {
              Vec3 vv = r.prod * (r.scale * inv_spp);
              acc += vv;
              if (r.in_diffuse) acc_diff += vv;
            }
            if (s == 0) {
              img.hit[pixel] = aux.hit ? 1 : 0;
              img.uv[pixel] = aux.uv;
              img.material_id[pixel] = aux.material_id;
            }
            if (tt) {
              for (const auto& r : collector.recs) {
                PathContribution c;
                c.pixel = pixel;
                c.scale = r.scale * inv_spp;
                c.factor_count = r.fcount;
                c.in_diffuse = r.in_diffuse;
                c.factor_start = static_cast<uint32_t>(tt->factors.size()) +
                                 r.fstart;
                tt->contributions.push_back(c);
              }
              tt->factors.insert(tt->factors.end(), collector.factors.begin(),
                                 collector.factors.end());
            }
          }
          img.color[pixel] = acc;
          img.diffuse[pixel] = acc_diff;
        }
      }
    }
    total_rays.fetch_add(rays);
    total_nan.fetch_add(nans);
  };

  int n_workers = std::min(resolve_workers(cfg.workers), tile_count);
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    threads.reserve(static_cast<size_t>(n_workers));
    for (int i = 0; i < n_workers; ++i) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (stats) {
    stats->rays = total_rays.load();
    stats->nan_samples = total_nan.load();
    stats->seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  }
  return img;
}

// ---------------------------------------------------------------------------
// Diffuse cache baking: rasterize the mesh into cache texel space and
// MC-estimate the Lambertian outgoing radiance (kd/pi * direct irradiance)
// at each covered texel. Uncovered texels are dilated from neighbors.
// ---------------------------------------------------------------------------

inline void bake_diffuse_cache(Scene& scene, int slot, int samples_per_texel, uint64_t seed) {
  Texture2D& cache = scene.params.caches[static_cast<size_t>(slot)].tex;
  const int cw = cache.width, ch = cache.height;
  const TriangleMesh& mesh = scene.mesh;
  struct TexelSurf {
    Vec3 position, n_geom, n_shading;
    bool covered = false;
  };
  std::vector<TexelSurf> surf(static_cast<size_t>(cw) * ch);

  for (size_t tri = 0; tri < mesh.triangle_count(); ++tri) {
    if (mesh.material_id[tri] != slot) continue;
    uint32_t i0 = mesh.indices[3 * tri], i1 = mesh.indices[3 * tri + 1],
             i2 = mesh.indices[3 * tri + 2];
    Vec2 a = mesh.uvs[i0], b = mesh.uvs[i1], c = mesh.uvs[i2];
    Vec2 ta{a.x * cw - 0.5f, a.y * ch - 0.5f};
    Vec2 tb{b.x * cw - 0.5f, b.y * ch - 0.5f};
    Vec2 tc{c.x * cw - 0.5f, c.y * ch - 0.5f};
    float area2 = (tb.x - ta.x) * (tc.y - ta.y) - (tb.y - ta.y) * (tc.x - ta.x);
    if (std::fabs(area2) < 1e-12f) continue;
    int x0 = std::max(0, static_cast<int>(std::floor(std::min({ta.x, tb.x, tc.x}))));
    int x1 = std::min(cw - 1, static_cast<int>(std::ceil(std::max({ta.x, tb.x, tc.x}))));
    int y0 = std::max(0, static_cast<int>(std::floor(std::min({ta.y, tb.y, tc.y}))));
    int y1 = std::min(ch - 1, static_cast<int>(std::ceil(std::max({ta.y, tb.y, tc.y}))));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        float px = static_cast<float>(x), py = static_cast<float>(y);
        float w0 = ((tb.x - px) * (tc.y - py) - (tb.y - py) * (tc.x - px)) / area2;
        float w1 = ((tc.x - px) * (ta.y - py) - (tc.y - py) * (ta.x - px)) / area2;
        float w2 = 1.0f - w0 - w1;
        if (w0 < -1e-4f || w1 < -1e-4f || w2 < -1e-4f) continue;
        TexelSurf& t = surf[static_cast<size_t>(y) * cw + x];
        if (t.covered) continue;
        t.covered = true;
        t.position = mesh.positions[i0] * w0 + mesh.positions[i1] * w1 + mesh.positions[i2] * w2;
        t.n_shading = normalize(mesh.normals[i0] * w0 + mesh.normals[i1] * w1 +
                                mesh.normals[i2] * w2);
        Vec3 ng = cross(mesh.positions[i1] - mesh.positions[i0],
                        mesh.positions[i2] - mesh.positions[i0]);
        t.n_geom = normalize(ng);
        if (dot(t.n_geom, t.n_shading) < 0.0f) t.n_geom = -t.n_geom;
      }
    }
  }

  const EnvironmentMap& env = scene.params.env;
  for (int y = 0; y < ch; ++y) {
    for (int x = 0; x < cw; ++x) {
      size_t i = static_cast<size_t>(y) * cw + x;
      if (!surf[i].covered) continue;
      const TexelSurf& t = surf[i];
      Hit hit;
      hit.position = t.position;
      hit.n_geom = t.n_geom;
      hit.n_shading = t.n_shading;
      hit.uv = {(x + 0.5f) / cw, (y + 0.5f) / ch};
      hit.material_id = slot;
      integ_detail::MatSample ms = integ_detail::fetch_material(scene.params, hit);
      const Vec3& n = ms.mat.shading_normal;
      Vec3 origin = t.position + t.n_geom * scene.ray_epsilon;
      Rng rng = Rng::for_stream(seed, static_cast<uint64_t>(i), 0);
      // half env-strategy, half cosine-strategy, balance-heuristic MIS
      int n_env = samples_per_texel / 2, n_cos = samples_per_texel - n_env;
      Vec3 irr(0.0f);
      for (int s = 0; s < n_env; ++s) {
        DirectionSample ls = sample_envmap(env, rng);
        if (!ls.valid()) continue;
        float cos_i = dot(ls.direction, n);
        if (cos_i <= 0.0f || dot(ls.direction, t.n_geom) <= 0.0f) continue;
        if (occluded(scene.bvh, scene.mesh, origin, ls.direction, 0.0f, kInfinity)) continue;
        float pdf_c = cos_i * kInvPi;
        float w = mis_balance_weight(ls.pdf, n_env, pdf_c, n_cos);
        irr += env_lookup(env, ls.direction) * (w * cos_i / (ls.pdf * n_env));
      }
      for (int s = 0; s < n_cos; ++s) {
        DirectionSample cs = sample_cosine_hemisphere(n, rng);
        float cos_i = dot(cs.direction, n);
        if (cos_i <= 0.0f || dot(cs.direction, t.n_geom) <= 0.0f) continue;
        if (occluded(scene.bvh, scene.mesh, origin, cs.direction, 0.0f, kInfinity)) continue;
        float w = mis_balance_weight(cs.pdf, n_cos, envmap_pdf(env, cs.direction), n_env);
        irr += env_lookup(env, cs.direction) * (w * cos_i / (cs.pdf * n_cos));
      }
      Vec3 out = ms.mat.kd * ((1.0f - ms.mat.metalness) * kInvPi) * irr;
      float* texel = cache.data.data() + i * cache.channels;
      texel[0] = out.x;
      texel[1] = out.y;
      texel[2] = out.z;
    }
  }

  // dilate into uncovered texels so bilinear taps near seams read neighbors
  std::vector<uint8_t> covered(surf.size());
  for (size_t i = 0; i < surf.size(); ++i) covered[i] = surf[i].covered ? 1 : 0;
  for (int pass = 0; pass < std::max(cw, ch); ++pass) {
    bool changed = false;
    std::vector<uint8_t> next = covered;
    for (int y = 0; y < ch; ++y) {
      for (int x = 0; x < cw; ++x) {
        size_t i = static_cast<size_t>(y) * cw + x;
        if (covered[i]) continue;
        Vec3 sum(0.0f);
        int n = 0;
        const int dx[4] = {1, -1, 0, 0}, dy[4] = {0, 0, 1, -1};
        for (int k = 0; k < 4; ++k) {
          int nx = x + dx[k], ny = y + dy[k];
          if (nx < 0 || nx >= cw || ny < 0 || ny >= ch) continue;
          size_t j = static_cast<size_t>(ny) * cw + nx;
          if (!covered[j]) continue;
          const float* tx = cache.data.data() + j * cache.channels;
          sum += Vec3{tx[0], tx[1], tx[2]};
          ++n;
        }
        if (n > 0) {
          Vec3 avg = sum * (1.0f / n);
          float* tx = cache.data.data() + i * cache.channels;
          tx[0] = avg.x;
          tx[1] = avg.y;
          tx[2] = avg.z;
          next[i] = 1;
          changed = true;
        }
      }
    }
    covered.swap(next);
    if (!changed) break;
  }
}

// ---------------------------------------------------------------------------
// PSNR (Reinhard tonemap, then sRGB encode to the 8-bit range, MAX = 255).
// ---------------------------------------------------------------------------

// PSNR on values already in the 8-bit range.
inline float psnr8(const std::vector<float>& a, const std::vector<float>& b) {
  double mse = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double d = static_cast<double>(a[i]) - b[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.size());
  if (mse == 0.0) return kInfinity;
  return static_cast<float>(10.0 * std::log10(255.0 * 255.0 / mse));
}

inline float psnr(const ImageRgb& img, const ImageRgb& ref) {
  if (img.width != ref.width || img.height != ref.height)
    throw std::invalid_argument("psnr: image dimensions differ");
  std::vector<float> a, b;
  a.reserve(img.pixels.size() * 3);
  b.reserve(img.pixels.size() * 3);
  for (size_t i = 0; i < img.pixels.size(); ++i) {
    Vec3 x = tonemap_reinhard(img.pixels[i]);
    Vec3 y = tonemap_reinhard(ref.pixels[i]);
    for (int k = 0; k < 3; ++k) {
      a.push_back(srgb_encode(x[k]) * 255.0f);
      b.push_back(srgb_encode(y[k]) * 255.0f);
    }
  }
  return psnr8(a, b);
}

}  // namespace refmc
