// Copyright (c) 2026 the refmc authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "refmc/dataset.hpp"
#include "refmc/dual.hpp"
#include "refmc/integrator.hpp"
#include "refmc/scene.hpp"

namespace refmc {

struct OptimConfig {
  float lr = 0.03f;
  float w1 = 0.1f;   // smoothness of k_d
  float w2 = 0.05f;  // smoothness of k_orm
  float w3 = 1.0f;   // diffuse-cache self-supervision
  int iterations = 500;
  int batch = 1;  // views per step (cycled within the step)
  float beta1 = 0.9f, beta2 = 0.999f, adam_eps = 1e-8f;
  // Max UV offset of the smoothness perturbation, in texels. Kept well under
  // one texel: the two bilinear footprints then overlap, so the prior's L1
  // subgradient scales with the offset instead of exerting a constant pull
  // that can overpower the image term and flatten the texture.
  float smooth_perturb = 0.25f;
  int smooth_points = 256;
  int cache_warmup = 50;  // cache-only steps before material gradients flow
  bool train_kd = true;
  bool train_orm = false;
  bool train_normal = false;
  bool train_env = false;
  bool train_cache = true;
  int checkpoint_every = 0;  // 0 = only final
  int preview_every = 0;     // 0 = off
  int eval_every = 50;       // validation PSNR cadence
  uint64_t seed = 0;

  void validate() const {
    if (lr <= 0.0f) throw std::invalid_argument("lr must be > 0");
    if (w1 < 0.0f || w2 < 0.0f || w3 < 0.0f)
      throw std::invalid_argument("loss weights must be >= 0");
    if (iterations < 0 || batch < 1) throw std::invalid_argument("bad iteration/batch count");
  }
};

// ---------------------------------------------------------------------------
// Gradient buffers, shape-mirroring ParamSet.
// ---------------------------------------------------------------------------

struct GradBuffer {
  struct MatGrads {
    std::vector<float> kd, orm, normal;
  };
  std::vector<MatGrads> materials;
  std::vector<std::vector<float>> caches;
  std::vector<float> env;

  static GradBuffer zeros_like(const ParamSet& p) {
    GradBuffer g;
    g.materials.resize(p.materials.size());
    for (size_t i = 0; i < p.materials.size(); ++i) {
      g.materials[i].kd.assign(p.materials[i].kd.data.size(), 0.0f);
      g.materials[i].orm.assign(p.materials[i].orm.data.size(), 0.0f);
      g.materials[i].normal.assign(p.materials[i].normal.data.size(), 0.0f);
    }
    g.caches.resize(p.caches.size());
    for (size_t i = 0; i < p.caches.size(); ++i)
      g.caches[i].assign(p.caches[i].tex.data.size(), 0.0f);
    g.env.assign(p.env.radiance.data.size(), 0.0f);
    return g;
  }

  void clear() {
    for (auto& m : materials) {
      std::fill(m.kd.begin(), m.kd.end(), 0.0f);
      std::fill(m.orm.begin(), m.orm.end(), 0.0f);
      std::fill(m.normal.begin(), m.normal.end(), 0.0f);
    }
    for (auto& c : caches) std::fill(c.begin(), c.end(), 0.0f);
    std::fill(env.begin(), env.end(), 0.0f);
  }
};

// ---------------------------------------------------------------------------
// Adjoint of the recorded render: detached-sampling reverse mode. Sampling
// decisions (directions, pdfs, MIS weights) stay constant; each contribution's
// factors are differentiated with forward-mode duals over their local
// parameters and scattered through the stored bilinear footprints.
// ---------------------------------------------------------------------------

namespace optim_detail {

// dual slots of a BSDF factor: kd.rgb, roughness, metalness, normal texel xyz
constexpr int kKdR = 0, kKdG = 1, kKdB = 2, kRough = 3, kMetal = 4, kNrmX = 5;

inline TVec3<Dual<8>> bsdf_factor_dual(const Factor& f, const ParamSet& params) {
  const MaterialMaps& maps = params.materials[f.mat_slot];
  Vec3 kd = footprint_value3(maps.kd, f.fps[0]);
  float rough = footprint_value1(maps.orm, f.fps[1], 1);
  float metal = footprint_value1(maps.orm, f.fps[1], 2);
  Vec3 nrm = f.has_normal_map ? footprint_value3(maps.normal, f.fps[2]) : Vec3{0.5f, 0.5f, 1.0f};
  using D = Dual<8>;
  TVec3<D> kdt{D::var(kd.x, kKdR), D::var(kd.y, kKdG), D::var(kd.z, kKdB)};
  D rt = D::var(rough, kRough), mt = D::var(metal, kMetal);
  TVec3<D> nt{D::var(nrm.x, kNrmX), D::var(nrm.y, kNrmX + 1), D::var(nrm.z, kNrmX + 2)};
  return integ_detail::bsdf_factor_eval(f, kdt, rt, mt, nt);
}

inline void scatter(std::vector<float>& grad, const Texture2D& tex, const TexelFootprint& fp,
                    int channel, float g) {
  if (g == 0.0f) return;
  for (int i = 0; i < fp.count; ++i)
    grad[static_cast<size_t>(fp.idx[i]) * tex.channels + channel] += g * fp.w[i];
}

}  // namespace optim_detail

// Accumulates dL/dParamSet from per-pixel adjoints of the rendered color and
// (optionally) of the C_diff buffer. dL_dCdiff may be empty.
inline void backward(const PathTape& tape, const ParamSet& params,
                     const std::vector<Vec3>& dL_dC, const std::vector<Vec3>& dL_dCdiff,
                     GradBuffer& grads) {
  size_t n_pixels = static_cast<size_t>(tape.width) * tape.height;
  if (dL_dC.size() != n_pixels || (!dL_dCdiff.empty() && dL_dCdiff.size() != n_pixels))
    throw std::invalid_argument("backward: adjoint size does not match tape dimensions");
  Vec3 vals[8];
  for (const TileTape& tile : tape.tiles) {
    for (const PathContribution& c : tile.contributions) {
      Vec3 adj = dL_dC[c.pixel];
      if (c.in_diffuse && !dL_dCdiff.empty()) adj += dL_dCdiff[c.pixel];
      if (adj.x == 0.0f && adj.y == 0.0f && adj.z == 0.0f) continue;
      const Factor* fs = tile.factors.data() + c.factor_start;
      int n = c.factor_count;
      for (int k = 0; k < n; ++k) vals[k] = factor_value(fs[k], params);
      for (int k = 0; k < n; ++k) {
        // d(contribution)/d(factor k) = scale * prod of the other factors
        Vec3 other{c.scale, c.scale, c.scale};
        for (int j = 0; j < n; ++j)
          if (j != k) other = other * vals[j];
        Vec3 w = adj * other;
        if (w.x == 0.0f && w.y == 0.0f && w.z == 0.0f) continue;
        const Factor& f = fs[k];
        switch (f.kind) {
          case Factor::Kind::EnvRadiance:
            for (int ch = 0; ch < 3; ++ch)
              optim_detail::scatter(grads.env, params.env.radiance, f.fps[0], ch, w[ch]);
            break;
          case Factor::Kind::CacheRadiance:
            for (int ch = 0; ch < 3; ++ch)
              optim_detail::scatter(grads.caches[f.mat_slot], params.caches[f.mat_slot].tex,
                                    f.fps[0], ch, w[ch]);
            break;
          default: {
            TVec3<Dual<8>> dv = optim_detail::bsdf_factor_dual(f, params);
            float gl[8];
            for (int s = 0; s < 8; ++s)
              gl[s] = w.x * dv.x.d[s] + w.y * dv.y.d[s] + w.z * dv.z.d[s];
            const MaterialMaps& maps = params.materials[f.mat_slot];
            GradBuffer::MatGrads& mg = grads.materials[f.mat_slot];
            for (int ch = 0; ch < 3; ++ch)
              optim_detail::scatter(mg.kd, maps.kd, f.fps[0], ch, gl[optim_detail::kKdR + ch]);
            optim_detail::scatter(mg.orm, maps.orm, f.fps[1], 1, gl[optim_detail::kRough]);
            optim_detail::scatter(mg.orm, maps.orm, f.fps[1], 2, gl[optim_detail::kMetal]);
            if (f.has_normal_map)
              for (int ch = 0; ch < 3; ++ch)
                optim_detail::scatter(mg.normal, maps.normal, f.fps[2], ch,
                                      gl[optim_detail::kNrmX + ch]);
            break;
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Loss terms. All image losses act on Reinhard-tonemapped values.
// ---------------------------------------------------------------------------

inline float tonemap_deriv(float x) {
  float d = 1.0f + x;
  return 1.0f / (d * d);
}

// MSE over tonemapped pixels; adjoint w.r.t. the raw (HDR) rendered values.
inline float loss_rgb(const std::vector<Vec3>& c, const std::vector<Vec3>& c_gt,
                      std::vector<Vec3>* dL_dC = nullptr) {
  if (c.size() != c_gt.size()) throw std::invalid_argument("loss_rgb: size mismatch");
  if (dL_dC) dL_dC->assign(c.size(), Vec3(0.0f));
  double sum = 0.0;
  float inv_n = 1.0f / (static_cast<float>(c.size()) * 3.0f);
  for (size_t i = 0; i < c.size(); ++i) {
    Vec3 a = tonemap_reinhard(c[i]);
    Vec3 b = tonemap_reinhard(c_gt[i]);
    for (int ch = 0; ch < 3; ++ch) {
      float d = a[ch] - b[ch];
      sum += static_cast<double>(d) * d;
      if (dL_dC) (*dL_dC)[i][ch] = 2.0f * d * tonemap_deriv(c[i][ch]) * inv_n;
    }
  }
  return static_cast<float>(sum * inv_n);
}

// Mean |k(uv) - k(uv + eps)| over surface points, eps uniform within
// +-perturb texels per axis. Subgradient at exact ties is 0. Adjoints are
// accumulated (+=) into `grad`, scaled by `weight`.
inline float loss_smooth(const Texture2D& tex, const std::vector<Vec2>& uvs,
                         float perturb_texels, Rng& rng, std::vector<float>* grad = nullptr,
                         float weight = 1.0f, int channel_begin = 0, int channel_count = -1) {
  if (uvs.empty()) return 0.0f;
  if (channel_count < 0) channel_count = tex.channels - channel_begin;
  double sum = 0.0;
  float inv_n = 1.0f / (static_cast<float>(uvs.size()) * channel_count);
  for (const Vec2& uv : uvs) {
    Vec2 j = rng.next_2d();
    Vec2 uv2{uv.x + (2.0f * j.x - 1.0f) * perturb_texels / tex.width,
             uv.y + (2.0f * j.y - 1.0f) * perturb_texels / tex.height};
    TexelFootprint fa, fb;
    auto a = tex_lookup(tex, uv, &fa);
    auto b = tex_lookup(tex, uv2, &fb);
    for (int ch = channel_begin; ch < channel_begin + channel_count; ++ch) {
      float d = a[ch] - b[ch];
      sum += std::fabs(d);
      // |d| below float noise of the bilinear filter counts as a tie
      if (grad && std::fabs(d) > 1e-7f) {
        float s = (d > 0.0f ? 1.0f : -1.0f) * inv_n * weight;
        optim_detail::scatter(*grad, tex, fa, ch, s);
        optim_detail::scatter(*grad, tex, fb, ch, -s);
      }
    }
  }
  return static_cast<float>(sum) * inv_n;
}

// Self-supervision of the diffuse cache: tonemapped MSE between the rendered
// C_diff buffer and cache lookups at the primary-hit surface points. Only
// interior pixels count — a pixel whose neighborhood leaves the mesh (or
// crosses into another mesh) averages surface radiance with background or
// foreign-surface samples, which the per-point cache cannot and should not
// match. Returns the loss; writes the C_diff adjoint and accumulates cache
// texel adjoints scaled by `weight`.
inline float loss_diff(const RadianceImage& img, const ParamSet& params,
                       std::vector<Vec3>* dL_dCdiff = nullptr, GradBuffer* grads = nullptr,
                       float weight = 1.0f) {
  size_t n_pixels = img.color.size();
  if (dL_dCdiff) dL_dCdiff->assign(n_pixels, Vec3(0.0f));
  auto interior = [&](size_t i) -> bool {
    if (!img.hit[i]) return false;
    int x = static_cast<int>(i % img.width), y = static_cast<int>(i / img.width);
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        int nx = x + dx, ny = y + dy;
        if (nx < 0 || ny < 0 || nx >= img.width || ny >= img.height) return false;
        size_t j = static_cast<size_t>(ny) * img.width + nx;
        if (!img.hit[j] || img.material_id[j] != img.material_id[i]) return false;
      }
    return true;
  };
  size_t n_hit = 0;
  for (size_t i = 0; i < n_pixels; ++i)
    if (interior(i)) ++n_hit;
  if (n_hit == 0) return 0.0f;
  float inv_n = 1.0f / (static_cast<float>(n_hit) * 3.0f);
  double sum = 0.0;
  for (size_t i = 0; i < n_pixels; ++i) {
    if (!interior(i)) continue;
    int slot = img.material_id[i];
    const Texture2D& cache = params.caches[static_cast<size_t>(slot)].tex;
    TexelFootprint fp;
    Vec3 k = tex_lookup_rgb(cache, img.uv[i], &fp);
    const Vec3& c = img.diffuse[i];
    Vec3 a = tonemap_reinhard(c), b = tonemap_reinhard(k);
    for (int ch = 0; ch < 3; ++ch) {
      float d = a[ch] - b[ch];
      sum += static_cast<double>(d) * d;
      if (dL_dCdiff) (*dL_dCdiff)[i][ch] = 2.0f * d * tonemap_deriv(c[ch]) * inv_n * weight;
      if (grads)
        optim_detail::scatter(grads->caches[static_cast<size_t>(slot)], cache, fp, ch,
                              -2.0f * d * tonemap_deriv(k[ch]) * inv_n * weight);
    }
  }
  return static_cast<float>(sum * inv_n);
}

// ---------------------------------------------------------------------------
// Adam with range projection.
// ---------------------------------------------------------------------------

struct AdamState {
  struct Leaf {
    std::vector<float> m, v;
  };
  std::vector<Leaf> kd, orm, normal, cache;
  Leaf env;
  int t = 0;
  uint64_t skipped_leaves = 0;  // non-finite gradient diagnostics

  static AdamState zeros_like(const ParamSet& p) {
    AdamState s;
    auto zero = [](size_t n) { return Leaf{std::vector<float>(n, 0.0f), std::vector<float>(n, 0.0f)}; };
    for (const auto& m : p.materials) {
      s.kd.push_back(zero(m.kd.data.size()));
      s.orm.push_back(zero(m.orm.data.size()));
      s.normal.push_back(zero(m.normal.data.size()));
    }
    for (const auto& c : p.caches) s.cache.push_back(zero(c.tex.data.size()));
    s.env = zero(p.env.radiance.data.size());
    return s;
  }
};

namespace optim_detail {

inline bool adam_update_leaf(std::vector<float>& param, const std::vector<float>& grad,
                             AdamState::Leaf& st, const OptimConfig& cfg, int t,
                             uint64_t& skipped) {
  if (param.empty()) return false;
  for (float g : grad)
    if (!std::isfinite(g)) {
      ++skipped;
      return false;
    }
  float bc1 = 1.0f - std::pow(cfg.beta1, static_cast<float>(t));
  float bc2 = 1.0f - std::pow(cfg.beta2, static_cast<float>(t));
  bool moved = false;
  for (size_t i = 0; i < param.size(); ++i) {
    st.m[i] = cfg.beta1 * st.m[i] + (1.0f - cfg.beta1) * grad[i];
    st.v[i] = cfg.beta2 * st.v[i] + (1.0f - cfg.beta2) * grad[i] * grad[i];
    float step = cfg.lr * (st.m[i] / bc1) / (std::sqrt(st.v[i] / bc2) + cfg.adam_eps);
    if (step != 0.0f) moved = true;
    param[i] -= step;
  }
  return moved;
}

}  // namespace optim_detail

// One Adam step over all trainable leaves, followed by range projection.
// Returns true if the environment map changed (caller must rebuild its CDF).
inline bool adam_step(ParamSet& params, const GradBuffer& grads, AdamState& state,
                      const OptimConfig& cfg) {
  ++state.t;
  bool env_dirty = false;
  for (size_t i = 0; i < params.materials.size(); ++i) {
    if (cfg.train_kd)
      optim_detail::adam_update_leaf(params.materials[i].kd.data, grads.materials[i].kd,
                                     state.kd[i], cfg, state.t, state.skipped_leaves);
    if (cfg.train_orm)
      optim_detail::adam_update_leaf(params.materials[i].orm.data, grads.materials[i].orm,
                                     state.orm[i], cfg, state.t, state.skipped_leaves);
    if (cfg.train_normal)
      optim_detail::adam_update_leaf(params.materials[i].normal.data, grads.materials[i].normal,
                                     state.normal[i], cfg, state.t, state.skipped_leaves);
  }
  if (cfg.train_cache)
    for (size_t i = 0; i < params.caches.size(); ++i)
      optim_detail::adam_update_leaf(params.caches[i].tex.data, grads.caches[i], state.cache[i],
                                     cfg, state.t, state.skipped_leaves);
  if (cfg.train_env)
    env_dirty = optim_detail::adam_update_leaf(params.env.radiance.data, grads.env, state.env,
                                               cfg, state.t, state.skipped_leaves);
  params.project();
  return env_dirty;
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

struct OptimizeResult {
  struct Row {
    int iter = 0;
    float l_rgb = 0, l_d = 0, l_orm = 0, l_diff = 0, total = 0;
    float psnr = 0;  // latest validation PSNR (carried between evals)
  };
  std::vector<Row> metrics;
  int iterations_run = 0;
  bool diverged = false;
  uint64_t skipped_leaves = 0;

  void write_csv(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << "iter,L_rgb,L_d,L_orm,L_diff,loss,psnr\n";
    for (const Row& r : metrics)
      f << r.iter << ',' << r.l_rgb << ',' << r.l_d << ',' << r.l_orm << ',' << r.l_diff << ','
        << r.total << ',' << r.psnr << "\n";
  }
};

namespace optim_detail {

inline void save_checkpoint(const ParamSet& p, const std::string& dir, int iter) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  auto name = [&](const std::string& leaf, size_t slot) {
    return (fs::path(dir) / (leaf + "_" + std::to_string(slot) + "_iter" + std::to_string(iter) +
                             ".rfm"))
        .string();
  };
  for (size_t i = 0; i < p.materials.size(); ++i) {
    save_rfm(name("kd", i), p.materials[i].kd);
    save_rfm(name("orm", i), p.materials[i].orm);
    if (p.materials[i].has_normal_map()) save_rfm(name("normal", i), p.materials[i].normal);
  }
  for (size_t i = 0; i < p.caches.size(); ++i) save_rfm(name("cache", i), p.caches[i].tex);
  save_rfm((fs::path(dir) / ("env_iter" + std::to_string(iter) + ".rfm")).string(),
           p.env.radiance);
}

}  // namespace optim_detail

// Full inverse-rendering loop: render -> losses -> backward -> adam. Views
// are cycled in shuffled epochs, one view per step. The first cache_warmup
// steps train only the cache (render is forced non-adaptive there so an
// uninitialized cache never feeds back into its own target).
inline OptimizeResult optimize(Scene& scene, const Dataset& train, const OptimConfig& ocfg,
                               const RenderConfig& rcfg_in, const std::string& out_dir = "",
                               const Dataset* test = nullptr) {
  ocfg.validate();
  rcfg_in.validate();
  if (train.items.empty()) throw std::invalid_argument("optimize: empty dataset");

  OptimizeResult result;
  GradBuffer grads = GradBuffer::zeros_like(scene.params);
  AdamState state = AdamState::zeros_like(scene.params);
  Rng rng = Rng::for_stream(ocfg.seed, 0x0f71, 0);

  std::vector<size_t> order(train.items.size());
  std::iota(order.begin(), order.end(), 0);
  size_t cursor = order.size();  // trigger shuffle on first use

  float min_l_rgb = kInfinity;
  int bad_streak = 0;
  float last_psnr = 0.0f;

  auto eval_psnr = [&]() -> float {
    const Dataset& ds = (test && !test->items.empty()) ? *test : train;
    RenderConfig ec = rcfg_in;
    ec.spp = std::max(4, rcfg_in.spp);
    RadianceImage img = render(scene, ds.items[0].camera, ec, hash_combine(ocfg.seed, 0xe7a1));
    return psnr(img.to_image(), ds.items[0].image);
  };

  for (int iter = 0; iter < ocfg.iterations; ++iter) {
    bool warmup = iter < ocfg.cache_warmup && ocfg.train_cache;
    grads.clear();

    float l_rgb_acc = 0, l_d_acc = 0, l_orm_acc = 0, l_diff_acc = 0;
    for (int b = 0; b < ocfg.batch; ++b) {
      if (cursor >= order.size()) {
        // Fisher-Yates with the loop rng; deterministic across runs
        for (size_t i = order.size(); i > 1; --i)
          std::swap(order[i - 1], order[rng.next_u64() % i]);
        cursor = 0;
      }
      const DatasetItem& view = train.items[order[cursor++]];

      RenderConfig rcfg = rcfg_in;
      if (warmup) rcfg.adaptive = false;
      PathTape tape;
      uint64_t rseed = hash_combine(ocfg.seed, static_cast<uint64_t>(iter) * 131 + b + 1);
      RadianceImage img = render(scene, view.camera, rcfg, rseed, warmup ? nullptr : &tape);

      std::vector<Vec3> dL_dC, dL_dCdiff;
      l_rgb_acc += loss_rgb(img.color, view.image.pixels, warmup ? nullptr : &dL_dC);
      l_diff_acc += loss_diff(img, scene.params, &dL_dCdiff, &grads, ocfg.w3);

      // surface UV samples for the smoothness terms, per material slot
      std::vector<std::vector<Vec2>> slot_uvs(scene.params.materials.size());
      {
        size_t n_hit = 0;
        for (uint8_t h : img.hit) n_hit += h;
        size_t stride = std::max<size_t>(1, n_hit / std::max(1, ocfg.smooth_points));
        size_t seen = 0;
        for (size_t i = 0; i < img.hit.size(); ++i) {
          if (!img.hit[i]) continue;
          if (seen++ % stride == 0)
            slot_uvs[static_cast<size_t>(img.material_id[i])].push_back(img.uv[i]);
        }
      }
      for (size_t s = 0; s < scene.params.materials.size(); ++s) {
        if (slot_uvs[s].empty()) continue;
        MaterialMaps& maps = scene.params.materials[s];
        l_d_acc += loss_smooth(maps.kd, slot_uvs[s], ocfg.smooth_perturb, rng,
                               warmup ? nullptr : &grads.materials[s].kd, ocfg.w1, 0, 3);
        l_orm_acc += loss_smooth(maps.orm, slot_uvs[s], ocfg.smooth_perturb, rng,
                                 warmup ? nullptr : &grads.materials[s].orm, ocfg.w2);
      }

      // dL_dCdiff is already scaled by w3 inside loss_diff
      if (!warmup) backward(tape, scene.params, dL_dC, dL_dCdiff, grads);
    }

    float inv_b = 1.0f / ocfg.batch;
    float l_rgb = l_rgb_acc * inv_b, l_d = l_d_acc * inv_b, l_orm = l_orm_acc * inv_b,
          l_diff = l_diff_acc * inv_b;
    float total = l_rgb + ocfg.w1 * l_d + ocfg.w2 * l_orm + ocfg.w3 * l_diff;

    OptimConfig step_cfg = ocfg;
    if (warmup) {
      step_cfg.train_kd = step_cfg.train_orm = step_cfg.train_normal = step_cfg.train_env = false;
      step_cfg.train_cache = true;
    }
    bool env_dirty = adam_step(scene.params, grads, state, step_cfg);
    if (env_dirty) scene.rebuild_env_cdf();

    if (ocfg.eval_every > 0 && (iter % ocfg.eval_every == 0 || iter + 1 == ocfg.iterations))
      last_psnr = eval_psnr();
    result.metrics.push_back({iter, l_rgb, l_d, l_orm, l_diff, total, last_psnr});
    result.iterations_run = iter + 1;

    if (!out_dir.empty()) {
      if (ocfg.checkpoint_every > 0 && (iter + 1) % ocfg.checkpoint_every == 0)
        optim_detail::save_checkpoint(scene.params, out_dir, iter + 1);
      if (ocfg.preview_every > 0 && (iter + 1) % ocfg.preview_every == 0) {
        RadianceImage img =
            render(scene, train.items[0].camera, rcfg_in, hash_combine(ocfg.seed, 0x93e7));
        save_png_srgb((std::filesystem::path(out_dir) / ("preview_iter" +
                                                         std::to_string(iter + 1) + ".png"))
                          .string(),
                      img.to_image(), /*tonemap=*/true);
      }
    }

    // divergence guard: L_rgb stuck at 10x its running minimum
    if (!warmup) {
      min_l_rgb = std::min(min_l_rgb, l_rgb);
      if (l_rgb > 10.0f * min_l_rgb && min_l_rgb > 0.0f) {
        if (++bad_streak >= 100) {
          result.diverged = true;
          break;
        }
      } else {
        bad_streak = 0;
      }
    }
  }

  if (!out_dir.empty()) {
    optim_detail::save_checkpoint(scene.params, out_dir, result.iterations_run);
    result.write_csv((std::filesystem::path(out_dir) / "metrics.csv").string());
  }
  result.skipped_leaves = state.skipped_leaves;
  return result;
}

}  // namespace refmc
