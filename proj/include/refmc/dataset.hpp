// Copyright (c) 2026 the refmc authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "refmc/core.hpp"
#include "refmc/image_io.hpp"
#include "refmc/integrator.hpp"
#include "refmc/scene.hpp"

namespace refmc {

struct DatasetItem {
  Camera camera;
  ImageRgb image;
  std::string file_path;  // relative, extension-free (NeRF convention)
};

struct Dataset {
  std::vector<DatasetItem> items;
};

namespace dataset_detail {

inline nlohmann::json matrix_to_json(const std::array<std::array<float, 4>, 4>& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : m) rows.push_back(std::vector<float>(r.begin(), r.end()));
  return rows;
}

inline std::array<std::array<float, 4>, 4> matrix_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw std::runtime_error("transform_matrix must be 4x4");
  std::array<std::array<float, 4>, 4> m{};
  for (int r = 0; r < 4; ++r) {
    if (!j[r].is_array() || j[r].size() != 4)
      throw std::runtime_error("transform_matrix must be 4x4");
    for (int c = 0; c < 4; ++c) m[r][c] = j[r][c].get<float>();
  }
  return m;
}

}  // namespace dataset_detail

// Writes a NeRF-style transforms file next to the referenced images.
inline void save_transforms(const std::string& path, const Dataset& ds) {
  nlohmann::json root;
  if (ds.items.empty()) throw std::invalid_argument("empty dataset");
  root["camera_angle_x"] = ds.items[0].camera.fov_x_rad;
  nlohmann::json frames = nlohmann::json::array();
  for (const DatasetItem& it : ds.items) {
    nlohmann::json f;
    f["file_path"] = it.file_path;
    f["transform_matrix"] = dataset_detail::matrix_to_json(it.camera.to_matrix());
    frames.push_back(f);
  }
  root["frames"] = frames;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << root.dump(2) << "\n";
}

// Loads transforms + HDR images. `path` may be the transforms file itself or a
// directory containing transforms_train.json.
inline Dataset load_dataset(const std::string& path) {
  namespace fs = std::filesystem;
  fs::path tf(path);
  if (fs::is_directory(tf)) tf /= "transforms_train.json";
  std::ifstream in(tf);
  if (!in) throw std::runtime_error("cannot open " + tf.string());
  nlohmann::json root = nlohmann::json::parse(in);
  float angle_x = root.at("camera_angle_x").get<float>();
  fs::path base = tf.parent_path();
  Dataset ds;
  for (const auto& f : root.at("frames")) {
    DatasetItem item;
    item.file_path = f.at("file_path").get<std::string>();
    fs::path img_path = base / (item.file_path + ".hdr");
    item.image = load_hdr(img_path.string());
    item.camera = Camera::from_matrix(dataset_detail::matrix_from_json(f.at("transform_matrix")),
                                      angle_x, item.image.width, item.image.height);
    ds.items.push_back(std::move(item));
  }
  if (ds.items.empty()) throw std::runtime_error("dataset has no frames: " + tf.string());
  for (const auto& it : ds.items)
    if (it.image.width != ds.items[0].image.width || it.image.height != ds.items[0].image.height)
      throw std::runtime_error("dataset images differ in size");
  return ds;
}

struct MakeDatasetConfig {
  int n_views = 12;
  int spp = 256;
  int width = 128, height = 128;
  float distance_scale = 2.2f;  // camera distance as multiple of scene radius
  float fov_x_deg = 45.0f;
  RenderConfig render;  // depth etc.; spp/workers taken from here when set

  MakeDatasetConfig() {
    render.depth = 3;
    render.adaptive = false;  // ground truth uses the unaccelerated estimator
  }
};

// Renders ground-truth views from cameras on a sphere around the scene and
// writes transforms_train.json / transforms_test.json with a 2:1 split.
// Deterministic in (scene, cfg, seed).
inline void make_dataset(const Scene& scene, const MakeDatasetConfig& cfg, uint64_t seed,
                         const std::string& out_dir, Dataset* train_out = nullptr,
                         Dataset* test_out = nullptr) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir) / "train");
  fs::create_directories(fs::path(out_dir) / "test");

  Bounds3 b = scene.mesh.bounds();
  Vec3 center = b.center();
  float radius = 0.5f * length(b.diagonal());
  float dist = cfg.distance_scale * std::max(radius, 1e-3f);

  RenderConfig rcfg = cfg.render;
  rcfg.spp = cfg.spp;

  Dataset train, test;
  for (int i = 0; i < cfg.n_views; ++i) {
    // golden-spiral placement, poles excluded so the up vector stays valid
    float z = lerp(-0.75f, 0.75f, cfg.n_views > 1 ? static_cast<float>(i) / (cfg.n_views - 1) : 0.5f);
    float phi = 2.399963f * i;  // golden angle
    float s = std::sqrt(std::max(0.0f, 1.0f - z * z));
    Vec3 pos = center + Vec3{s * std::cos(phi), s * std::sin(phi), z} * dist;
    Camera cam = Camera::look_at(pos, center, {0, 0, 1}, cfg.fov_x_deg, cfg.width, cfg.height);

    bool is_test = (i % 3 == 2);
    DatasetItem item;
    item.camera = cam;
    item.file_path = (is_test ? std::string("test/r_") : std::string("train/r_")) +
                     std::to_string(i);
    RadianceImage img = render(scene, cam, rcfg, hash_combine(seed, static_cast<uint64_t>(i)));
    for (const Vec3& p : img.color)
      if (!is_finite(p) || p.x < 0.0f || p.y < 0.0f || p.z < 0.0f)
        throw std::runtime_error("make_dataset: NaN/negative radiance in view " +
                                 std::to_string(i));
    item.image = img.to_image();
    save_hdr((fs::path(out_dir) / (item.file_path + ".hdr")).string(), item.image);
    (is_test ? test : train).items.push_back(std::move(item));
  }
  save_transforms((fs::path(out_dir) / "transforms_train.json").string(), train);
  if (!test.items.empty())
    save_transforms((fs::path(out_dir) / "transforms_test.json").string(), test);
  if (train_out) *train_out = std::move(train);
  if (test_out) *test_out = std::move(test);
}

}  // namespace refmc
