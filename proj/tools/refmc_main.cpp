// Copyright (c) 2026 the refmc authors.
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: render / optimize / eval / make-dataset / selftest.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "refmc/refmc.hpp"

namespace fs = std::filesystem;
using namespace refmc;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitDiverged = 3;

int env_thread_cap() {
  const char* s = std::getenv("REFMC_THREADS");
  if (!s) return 0;
  int v = std::atoi(s);
  return v > 0 ? v : 0;
}

int capped_workers(int requested) {
  int cap = env_thread_cap();
  int w = resolve_workers(requested);
  return cap > 0 ? std::min(w, cap) : w;
}

Scene load_scene_or_die(const std::string& path) {
  SceneDescription desc = parse_scene(path);
  return build_scene(desc, fs::path(path).parent_path().string());
}

float default_firefly_clamp(const Scene& scene) {
  // 50x the mean environment luminance
  const EnvironmentMap& env = scene.params.env;
  double mean = 0.0;
  size_t n = static_cast<size_t>(env.width()) * env.height();
  for (size_t i = 0; i < n; ++i) {
    const float* t = env.radiance.data.data() + i * 3;
    mean += luminance({t[0], t[1], t[2]});
  }
  mean /= std::max<size_t>(1, n);
  return mean > 0.0 ? static_cast<float>(50.0 * mean) : 0.0f;
}

struct OptimizeFileConfig {
  OptimConfig optim;
  RenderConfig render;
};

void require_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                  const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) ok = true;
    if (!ok) throw std::runtime_error("unknown key \"" + it.key() + "\" in " + where);
  }
}

OptimizeFileConfig parse_optimize_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  nlohmann::json j = nlohmann::json::parse(in);
  OptimizeFileConfig c;
  require_keys(j,
               {"lr", "omega1", "omega2", "omega3", "iterations", "batch", "beta1", "beta2",
                "adam_eps", "smooth_perturb", "smooth_points", "cache_warmup", "train_kd",
                "train_orm", "train_normal", "train_env", "train_cache", "checkpoint_every",
                "preview_every", "eval_every", "seed", "render"},
               "config");
  OptimConfig& o = c.optim;
  o.lr = j.value("lr", o.lr);
  o.w1 = j.value("omega1", o.w1);
  o.w2 = j.value("omega2", o.w2);
  o.w3 = j.value("omega3", o.w3);
  o.iterations = j.value("iterations", o.iterations);
  o.batch = j.value("batch", o.batch);
  o.beta1 = j.value("beta1", o.beta1);
  o.beta2 = j.value("beta2", o.beta2);
  o.adam_eps = j.value("adam_eps", o.adam_eps);
  o.smooth_perturb = j.value("smooth_perturb", o.smooth_perturb);
  o.smooth_points = j.value("smooth_points", o.smooth_points);
  o.cache_warmup = j.value("cache_warmup", o.cache_warmup);
  o.train_kd = j.value("train_kd", o.train_kd);
  o.train_orm = j.value("train_orm", o.train_orm);
  o.train_normal = j.value("train_normal", o.train_normal);
  o.train_env = j.value("train_env", o.train_env);
  o.train_cache = j.value("train_cache", o.train_cache);
  o.checkpoint_every = j.value("checkpoint_every", o.checkpoint_every);
  o.preview_every = j.value("preview_every", o.preview_every);
  o.eval_every = j.value("eval_every", o.eval_every);
  o.seed = j.value("seed", o.seed);
  if (j.contains("render")) {
    const auto& r = j["render"];
    require_keys(r,
                 {"spp", "depth", "n_light", "n_brdf", "n_light_secondary", "n_brdf_secondary",
                  "n_spec_secondary", "adaptive", "use_diffuse_cache", "firefly_clamp",
                  "diffuse_model", "workers"},
                 "config.render");
    RenderConfig& rc = c.render;
    rc.spp = r.value("spp", rc.spp);
    rc.depth = r.value("depth", rc.depth);
    rc.n_light = r.value("n_light", rc.n_light);
    rc.n_brdf = r.value("n_brdf", rc.n_brdf);
    rc.n_light_secondary = r.value("n_light_secondary", rc.n_light_secondary);
    rc.n_brdf_secondary = r.value("n_brdf_secondary", rc.n_brdf_secondary);
    rc.n_spec_secondary = r.value("n_spec_secondary", rc.n_spec_secondary);
    rc.adaptive = r.value("adaptive", rc.adaptive);
    rc.use_diffuse_cache = r.value("use_diffuse_cache", rc.use_diffuse_cache);
    rc.firefly_clamp = r.value("firefly_clamp", rc.firefly_clamp);
    rc.workers = r.value("workers", rc.workers);
    if (r.contains("diffuse_model")) {
      std::string m = r["diffuse_model"].get<std::string>();
      if (m == "disney")
        rc.primary_diffuse = DiffuseModel::Disney;
      else if (m == "lambert")
        rc.primary_diffuse = DiffuseModel::Lambert;
      else
        throw std::runtime_error("diffuse_model must be \"disney\" or \"lambert\"");
    }
  }
  return c;
}

int cmd_render(const std::string& scene_path, const std::string& out, int camera_index, int spp,
               int depth, bool no_adaptive, uint64_t seed, int workers, float firefly) {
  Scene scene = load_scene_or_die(scene_path);
  if (camera_index < 0 || camera_index >= static_cast<int>(scene.cameras.size())) {
    std::fprintf(stderr, "error: camera index %d out of range (scene has %zu)\n", camera_index,
                 scene.cameras.size());
    return kExitData;
  }
  RenderConfig cfg;
  cfg.spp = spp;
  cfg.depth = depth;
  cfg.adaptive = !no_adaptive;
  cfg.workers = capped_workers(workers);
  cfg.firefly_clamp = firefly < 0.0f ? default_firefly_clamp(scene) : firefly;
  cfg.validate();
  if (cfg.adaptive && cfg.use_diffuse_cache)
    for (size_t i = 0; i < scene.params.caches.size(); ++i)
      bake_diffuse_cache(scene, static_cast<int>(i), 64, hash_combine(seed, 0xcac4e + i));
  RenderStats stats;
  auto t0 = std::chrono::steady_clock::now();
  RadianceImage img = render(scene, scene.cameras[static_cast<size_t>(camera_index)], cfg, seed,
                             nullptr, &stats);
  stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ImageRgb result = img.to_image();
  if (out.size() > 4 && out.substr(out.size() - 4) == ".png")
    save_png_srgb(out, result, /*tonemap=*/true);
  else
    save_hdr(out, result);
  std::printf("rendered %dx%d spp=%d depth=%d in %.2fs  (%.2f Mrays/s, %llu NaN samples)\n",
              img.width, img.height, cfg.spp, cfg.depth, stats.seconds,
              stats.seconds > 0 ? stats.rays / stats.seconds * 1e-6 : 0.0,
              static_cast<unsigned long long>(stats.nan_samples));
  return kExitOk;
}

int cmd_optimize(const std::string& scene_path, const std::string& data_dir,
                 const std::string& config_path, const std::string& out_dir) {
  Scene scene = load_scene_or_die(scene_path);
  OptimizeFileConfig cfg = parse_optimize_config(config_path);
  cfg.render.workers = capped_workers(cfg.render.workers);
  Dataset train = load_dataset((fs::path(data_dir) / "transforms_train.json").string());
  Dataset test;
  bool has_test = fs::exists(fs::path(data_dir) / "transforms_test.json");
  if (has_test) test = load_dataset((fs::path(data_dir) / "transforms_test.json").string());
  fs::create_directories(out_dir);
  OptimizeResult res = optimize(scene, train, cfg.optim, cfg.render, out_dir,
                                has_test ? &test : nullptr);
  std::printf("optimize: %d iterations, final loss %.6g, validation PSNR %.2f dB%s\n",
              res.iterations_run, res.metrics.empty() ? 0.0f : res.metrics.back().total,
              res.metrics.empty() ? 0.0f : res.metrics.back().psnr,
              res.diverged ? " [DIVERGED]" : "");
  if (res.skipped_leaves > 0)
    std::printf("warning: %llu leaf updates skipped due to non-finite gradients\n",
                static_cast<unsigned long long>(res.skipped_leaves));
  return res.diverged ? kExitDiverged : kExitOk;
}

int cmd_eval(const std::string& render_dir, const std::string& gt_dir, const std::string& out) {
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(render_dir))
    if (e.path().extension() == ".hdr") names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  if (names.empty()) {
    std::fprintf(stderr, "error: no .hdr files in %s\n", render_dir.c_str());
    return kExitData;
  }
  std::string csv = "file,psnr\n";
  double sum = 0.0;
  int count = 0;
  for (const std::string& n : names) {
    fs::path gt_path = fs::path(gt_dir) / n;
    if (!fs::exists(gt_path)) {
      std::fprintf(stderr, "warning: no ground truth for %s, skipped\n", n.c_str());
      continue;
    }
    ImageRgb a = load_hdr((fs::path(render_dir) / n).string());
    ImageRgb b = load_hdr(gt_path.string());
    if (a.width != b.width || a.height != b.height) {
      std::fprintf(stderr, "warning: dimension mismatch for %s, skipped\n", n.c_str());
      continue;
    }
    float p = psnr(a, b);
    csv += n + "," + (std::isinf(p) ? std::string("inf") : std::to_string(p)) + "\n";
    sum += p;
    ++count;
  }
  if (count == 0) {
    std::fprintf(stderr, "error: no comparable image pairs\n");
    return kExitData;
  }
  csv += "mean," + std::to_string(sum / count) + "\n";
  if (out.empty()) {
    std::fputs(csv.c_str(), stdout);
  } else {
    std::ofstream f(out);
    f << csv;
  }
  return kExitOk;
}

int cmd_make_dataset(const std::string& scene_path, const std::string& out_dir, int views,
                     int spp, int width, int height, uint64_t seed, int workers) {
  Scene scene = load_scene_or_die(scene_path);
  MakeDatasetConfig cfg;
  cfg.n_views = views;
  cfg.spp = spp;
  cfg.width = width;
  cfg.height = height;
  cfg.render.workers = capped_workers(workers);
  make_dataset(scene, cfg, seed, out_dir);
  std::printf("wrote %d views (%d train, %d test) to %s\n", views, views - views / 3, views / 3,
              out_dir.c_str());
  return kExitOk;
}

int cmd_selftest() {
  int failures = 0;
  auto check = [&](const char* name, bool ok) {
    std::printf("%-44s %s\n", name, ok ? "ok" : "FAIL");
    if (!ok) ++failures;
  };

  // sampling: cosine-hemisphere pdf integrates to 1 on the hemisphere
  {
    Rng rng = Rng::for_stream(1, 0, 0);
    double acc = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
      Vec3 d = sample_uniform_sphere(rng);
      if (d.z <= 0.0f) continue;
      acc += (d.z * kInvPi) / uniform_sphere_pdf();
    }
    check("cosine pdf normalization", std::fabs(acc / n - 1.0) < 0.05);
  }

  // furnace: Lambertian sphere, constant env -> albedo
  {
    SceneDescription desc;
    MeshDesc md;
    md.kd.constant = {0.7f, 0.7f, 0.7f, 1.0f};
    md.orm.constant = {1.0f, 0.5f, 0.0f};
    TriangleMesh sph = make_sphere({0, 0, 0}, 1.0f, 16, 32);
    fs::path tmp = fs::temp_directory_path() / "refmc_selftest";
    fs::create_directories(tmp);
    save_obj((tmp / "sphere.obj").string(), sph);
    md.obj = "sphere.obj";
    desc.meshes.push_back(md);
    desc.cameras.push_back(CameraDesc{{0, -4, 0}, {0, 0, 0}, {0, 0, 1}, 30.0f, {32, 32}});
    Scene scene = build_scene(desc, tmp.string());
    RenderConfig cfg;
    cfg.spp = 64;
    cfg.depth = 1;
    cfg.primary_diffuse = DiffuseModel::Lambert;
    cfg.specular_enabled = false;
    RadianceImage img = render(scene, scene.cameras[0], cfg, 3);
    double mean = 0.0;
    size_t n = 0;
    for (size_t i = 0; i < img.color.size(); ++i)
      if (img.hit[i]) {
        mean += img.color[i].x;
        ++n;
      }
    mean /= std::max<size_t>(1, n);
    check("furnace sphere mean = albedo", std::fabs(mean - 0.7) < 0.02);

    // determinism across worker counts
    RenderConfig c1 = cfg, c16 = cfg;
    c1.workers = 1;
    c16.workers = 16;
    RadianceImage a = render(scene, scene.cameras[0], c1, 7);
    RadianceImage b = render(scene, scene.cameras[0], c16, 7);
    bool same = true;
    for (size_t i = 0; i < a.color.size(); ++i)
      if (std::memcmp(&a.color[i], &b.color[i], sizeof(Vec3)) != 0) same = false;
    check("render deterministic across workers", same);

    // tape replay reproduces the forward image bit-exactly
    RenderConfig ct = cfg;
    ct.depth = 2;
    ct.specular_enabled = true;
    PathTape tape;
    RadianceImage live = render(scene, scene.cameras[0], ct, 5, &tape);
    std::vector<Vec3> rc, rd;
    replay_tape(tape, scene.params, rc, rd);
    bool exact = true;
    for (size_t i = 0; i < live.color.size(); ++i) {
      Vec3 diff = live.color[i] - rc[i];
      if (std::fabs(diff.x) + std::fabs(diff.y) + std::fabs(diff.z) > 1e-5f) exact = false;
    }
    check("tape replay matches forward render", exact);

    // scene description round trip
    serialize_scene((tmp / "scene.json").string(), desc);
    check("scene round trip", parse_scene((tmp / "scene.json").string()) == desc);
  }

  std::printf("%s\n", failures == 0 ? "selftest passed" : "selftest FAILED");
  return failures == 0 ? kExitOk : kExitData;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"refmc: physically based renderer and inverse-rendering optimizer"};
  app.require_subcommand(1);

  // render
  std::string scene_path, out_path;
  int camera_index = 0, spp = 16, depth = 2, workers = 0;
  bool no_adaptive = false;
  uint64_t seed = 0;
  float firefly = -1.0f;
  auto* rc = app.add_subcommand("render", "Render a scene camera to an HDR (or PNG) image");
  rc->add_option("--scene", scene_path, "Scene description file")->required();
  rc->add_option("--out", out_path, "Output image (.hdr or .png)")->required();
  rc->add_option("--camera", camera_index, "Camera index (default 0)");
  rc->add_option("--spp", spp, "Samples per pixel");
  rc->add_option("--depth", depth, "Trace depth: 1, 2 or 3")->check(CLI::Range(1, 3));
  rc->add_flag("--no-adaptive", no_adaptive, "Disable the diffuse-cache acceleration");
  rc->add_option("--seed", seed, "Random seed");
  rc->add_option("--workers", workers, "Worker threads (0 = hardware)");
  rc->add_option("--firefly-clamp", firefly,
                 "Per-sample luminance clamp (-1 = 50x mean env luminance, 0 = off)");

  // optimize
  std::string data_dir, config_path, out_dir;
  auto* oc = app.add_subcommand("optimize", "Inverse-render materials from posed images");
  oc->add_option("--scene", scene_path, "Scene description file")->required();
  oc->add_option("--data", data_dir, "Dataset directory (transforms_train.json + images)")
      ->required();
  oc->add_option("--config", config_path, "Optimizer config (JSON)")->required();
  oc->add_option("--out", out_dir, "Output directory")->required();

  // eval
  std::string render_dir, gt_dir, eval_out;
  auto* ec = app.add_subcommand("eval", "PSNR of rendered images against ground truth");
  ec->add_option("--renders", render_dir, "Directory of rendered .hdr images")->required();
  ec->add_option("--gt", gt_dir, "Directory of ground-truth .hdr images")->required();
  ec->add_option("--out", eval_out, "Metrics CSV path (default: stdout)");

  // make-dataset
  int views = 12, ds_width = 128, ds_height = 128, ds_spp = 256;
  auto* mc = app.add_subcommand("make-dataset", "Render a posed ground-truth dataset");
  mc->add_option("--scene", scene_path, "Scene description file")->required();
  mc->add_option("--out", out_dir, "Output directory")->required();
  mc->add_option("--views", views, "Number of views (2:1 train/test split)");
  mc->add_option("--spp", ds_spp, "Samples per pixel for ground truth");
  mc->add_option("--width", ds_width, "Image width");
  mc->add_option("--height", ds_height, "Image height");
  mc->add_option("--seed", seed, "Random seed");
  mc->add_option("--workers", workers, "Worker threads (0 = hardware)");

  auto* sc = app.add_subcommand("selftest", "Run built-in consistency checks");
  (void)sc;

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (rc->parsed())
      return cmd_render(scene_path, out_path, camera_index, spp, depth, no_adaptive, seed,
                        workers, firefly);
    if (oc->parsed()) return cmd_optimize(scene_path, data_dir, config_path, out_dir);
    if (ec->parsed()) return cmd_eval(render_dir, gt_dir, eval_out);
    if (mc->parsed())
      return cmd_make_dataset(scene_path, out_dir, views, ds_spp, ds_width, ds_height, seed,
                              workers);
    if (sc->parsed()) return cmd_selftest();
  } catch (const SceneParseError& e) {
    std::fprintf(stderr, "scene error: %s\n", e.what());
    return kExitData;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitData;
  }
  return kExitUsage;
}
