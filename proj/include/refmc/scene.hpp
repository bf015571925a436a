// Copyright (c) 2026 the refmc authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "refmc/core.hpp"
#include "refmc/envmap.hpp"
#include "refmc/geometry.hpp"
#include "refmc/image_io.hpp"
#include "refmc/texture.hpp"

namespace refmc {

// ---------------------------------------------------------------------------
// Optimizable parameters.
// ---------------------------------------------------------------------------

struct MaterialMaps {
  Texture2D kd;      // 4 channels (alpha stored, unused in shading)
  Texture2D orm;     // 3 channels: occlusion, roughness, metalness
  Texture2D normal;  // 3 channels, tangent space; empty means no normal map
  bool has_normal_map() const { return normal.width > 0; }
};

// Per-surface UV texture of outgoing diffuse radiance (direction-independent).
struct DiffuseCache {
  Texture2D tex;  // 3 channels
};

struct ParamSet {
  std::vector<MaterialMaps> materials;  // one slot per scene mesh
  std::vector<DiffuseCache> caches;     // one per material slot
  EnvironmentMap env;

  // Clamp every leaf to its valid range. Idempotent.
  void project() {
    for (auto& m : materials) {
      for (float& v : m.kd.data) v = clampf(v, 0.0f, 1.0f);
      for (float& v : m.orm.data) v = clampf(v, 0.0f, 1.0f);
      for (float& v : m.normal.data) v = clampf(v, 0.0f, 1.0f);
    }
    for (auto& c : caches)
      for (float& v : c.tex.data) v = std::max(v, 0.0f);
    for (float& v : env.radiance.data) v = std::max(v, 0.0f);
  }
};

// ---------------------------------------------------------------------------
// Pinhole camera.
// ---------------------------------------------------------------------------

struct Camera {
  Vec3 origin;
  Vec3 right, up, forward;  // orthonormal
  float fov_x_rad = 0.8f;
  int width = 128, height = 128;

  static Camera look_at(const Vec3& pos, const Vec3& target, const Vec3& up_hint,
                        float fov_x_deg, int w, int h) {
    Camera c;
    c.origin = pos;
    c.forward = normalize(target - pos);
    c.right = normalize(cross(c.forward, up_hint));
    c.up = cross(c.right, c.forward);
    c.fov_x_rad = fov_x_deg * kPi / 180.0f;
    c.width = w;
    c.height = h;
    return c;
  }

  // px, py in pixel units (continuous); (0,0) = top-left corner.
  Ray generate_ray(float px, float py) const {
    float tan_half = std::tan(0.5f * fov_x_rad);
    float sx = (2.0f * px / width - 1.0f) * tan_half;
    float sy = (1.0f - 2.0f * py / height) * tan_half * height / width;
    Ray r;
    r.origin = origin;
    r.dir = normalize(forward + right * sx + up * sy);
    return r;
  }

  // NeRF-style camera-to-world matrix (camera looks down -z, y up, x right).
  std::array<std::array<float, 4>, 4> to_matrix() const {
    Vec3 zc = -forward;
    return {{{right.x, up.x, zc.x, origin.x},
             {right.y, up.y, zc.y, origin.y},
             {right.z, up.z, zc.z, origin.z},
             {0, 0, 0, 1}}};
  }

  static Camera from_matrix(const std::array<std::array<float, 4>, 4>& m, float camera_angle_x,
                            int w, int h) {
    Camera c;
    c.right = {m[0][0], m[1][0], m[2][0]};
    c.up = {m[0][1], m[1][1], m[2][1]};
    c.forward = -Vec3{m[0][2], m[1][2], m[2][2]};
    c.origin = {m[0][3], m[1][3], m[2][3]};
    c.fov_x_rad = camera_angle_x;
    c.width = w;
    c.height = h;
    return c;
  }
};

// ---------------------------------------------------------------------------
// Scene description file (JSON, strict unknown-key rejection).
// ---------------------------------------------------------------------------

struct SceneParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A texture source: a file (RFM1 or Radiance HDR) or a constant fill.
struct MapDesc {
  std::string file;               // empty => constant
  std::vector<float> constant;    // per-channel value
  std::array<int, 2> resolution{16, 16};

  bool operator==(const MapDesc&) const = default;
};

struct MeshDesc {
  std::string obj;
  MapDesc kd{"", {0.5f, 0.5f, 0.5f, 1.0f}, {16, 16}};
  MapDesc orm{"", {1.0f, 0.5f, 0.0f}, {16, 16}};
  std::optional<MapDesc> normal;
  std::array<int, 2> cache_resolution{64, 64};

  bool operator==(const MeshDesc&) const = default;
};

struct CameraDesc {
  Vec3 position{0, 0, 1};
  Vec3 look_at{0, 0, 0};
  Vec3 up{0, 0, 1};
  float fov_x_deg = 45.0f;
  std::array<int, 2> resolution{128, 128};

  bool operator==(const CameraDesc&) const = default;
};

struct SceneDescription {
  std::vector<MeshDesc> meshes;
  MapDesc environment{"", {1.0f, 1.0f, 1.0f}, {256, 128}};
  std::vector<CameraDesc> cameras;

  bool operator==(const SceneDescription&) const = default;
};

namespace scene_detail {

using nlohmann::json;

inline void require_keys(const json& j, std::initializer_list<const char*> allowed,
                         const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) ok = true;
    if (!ok)
      throw SceneParseError("unknown key \"" + it.key() + "\" in " + where);
  }
}

inline Vec3 parse_vec3(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 3)
    throw SceneParseError("expected [x, y, z] array at " + where);
  return {j[0].get<float>(), j[1].get<float>(), j[2].get<float>()};
}

inline MapDesc parse_map(const json& j, int channels, const MapDesc& defaults,
                         const std::string& where) {
  MapDesc m = defaults;
  if (j.is_array()) {
    if (static_cast<int>(j.size()) != channels)
      throw SceneParseError("expected " + std::to_string(channels) + " channels at " + where);
    m.file.clear();
    m.constant.clear();
    for (const auto& v : j) m.constant.push_back(v.get<float>());
    return m;
  }
  if (j.is_string()) {
    m.file = j.get<std::string>();
    m.constant.clear();
    return m;
  }
  if (!j.is_object()) throw SceneParseError("expected array, string, or object at " + where);
  require_keys(j, {"file", "constant", "resolution"}, where);
  if (j.contains("file")) {
    m.file = j["file"].get<std::string>();
    m.constant.clear();
  }
  if (j.contains("constant")) {
    m.file.clear();
    m.constant.clear();
    for (const auto& v : j["constant"]) m.constant.push_back(v.get<float>());
    if (static_cast<int>(m.constant.size()) != channels)
      throw SceneParseError("expected " + std::to_string(channels) + " channels at " + where);
  }
  if (j.contains("resolution")) {
    m.resolution = {j["resolution"][0].get<int>(), j["resolution"][1].get<int>()};
  }
  return m;
}

inline json map_to_json(const MapDesc& m) {
  json j = json::object();
  if (!m.file.empty())
    j["file"] = m.file;
  else
    j["constant"] = m.constant;
  j["resolution"] = {m.resolution[0], m.resolution[1]};
  return j;
}

}  // namespace scene_detail

inline SceneDescription parse_scene_json(const nlohmann::json& root) {
  using scene_detail::parse_map;
  using scene_detail::parse_vec3;
  using scene_detail::require_keys;
  SceneDescription desc;
  require_keys(root, {"meshes", "environment", "cameras"}, "scene root");
  if (!root.contains("meshes") || !root["meshes"].is_array() || root["meshes"].empty())
    throw SceneParseError("scene needs a nonempty \"meshes\" array");
  if (!root.contains("cameras") || !root["cameras"].is_array() || root["cameras"].empty())
    throw SceneParseError("scene needs a nonempty \"cameras\" array");
  int mi = 0;
  for (const auto& jm : root["meshes"]) {
    std::string where = "meshes[" + std::to_string(mi++) + "]";
    require_keys(jm, {"obj", "kd", "orm", "normal", "cache_resolution"}, where);
    MeshDesc m;
    if (!jm.contains("obj")) throw SceneParseError("missing \"obj\" in " + where);
    m.obj = jm["obj"].get<std::string>();
    if (jm.contains("kd")) m.kd = parse_map(jm["kd"], 4, m.kd, where + ".kd");
    if (jm.contains("orm")) m.orm = parse_map(jm["orm"], 3, m.orm, where + ".orm");
    if (jm.contains("normal") && !jm["normal"].is_null())
      m.normal = parse_map(jm["normal"], 3, MapDesc{"", {0.5f, 0.5f, 1.0f}, {16, 16}},
                           where + ".normal");
    if (jm.contains("cache_resolution"))
      m.cache_resolution = {jm["cache_resolution"][0].get<int>(),
                            jm["cache_resolution"][1].get<int>()};
    desc.meshes.push_back(std::move(m));
  }
  if (root.contains("environment"))
    desc.environment = parse_map(root["environment"], 3,
                                 MapDesc{"", {1.0f, 1.0f, 1.0f}, {256, 128}}, "environment");
  int ci = 0;
  for (const auto& jc : root["cameras"]) {
    std::string where = "cameras[" + std::to_string(ci++) + "]";
    require_keys(jc, {"position", "look_at", "up", "fov_x_deg", "resolution"}, where);
    CameraDesc c;
    if (!jc.contains("position")) throw SceneParseError("missing \"position\" in " + where);
    c.position = parse_vec3(jc["position"], where + ".position");
    if (jc.contains("look_at")) c.look_at = parse_vec3(jc["look_at"], where + ".look_at");
    if (jc.contains("up")) c.up = parse_vec3(jc["up"], where + ".up");
    if (jc.contains("fov_x_deg")) c.fov_x_deg = jc["fov_x_deg"].get<float>();
    if (jc.contains("resolution"))
      c.resolution = {jc["resolution"][0].get<int>(), jc["resolution"][1].get<int>()};
    desc.cameras.push_back(c);
  }
  return desc;
}

inline SceneDescription parse_scene(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw SceneParseError("cannot open scene file: " + path);
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    // e.byte gives the offset; convert to line/column for the diagnostic
    std::ifstream g(path);
    std::string text((std::istreambuf_iterator<char>(g)), std::istreambuf_iterator<char>());
    size_t line = 1, col = 1;
    for (size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw SceneParseError(path + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " +
                          e.what());
  }
  SceneDescription desc = parse_scene_json(root);
  // referenced files must exist relative to the scene file
  std::filesystem::path base = std::filesystem::path(path).parent_path();
  auto check = [&](const std::string& file, const std::string& what) {
    if (!file.empty() && !std::filesystem::exists(base / file))
      throw SceneParseError("missing " + what + " file: " + (base / file).string());
  };
  for (const auto& m : desc.meshes) {
    check(m.obj, "mesh");
    check(m.kd.file, "kd texture");
    check(m.orm.file, "orm texture");
    if (m.normal) check(m.normal->file, "normal texture");
  }
  check(desc.environment.file, "environment");
  return desc;
}

inline nlohmann::json serialize_scene_json(const SceneDescription& desc) {
  using scene_detail::map_to_json;
  nlohmann::json root;
  root["meshes"] = nlohmann::json::array();
  for (const auto& m : desc.meshes) {
    nlohmann::json jm;
    jm["obj"] = m.obj;
    jm["kd"] = map_to_json(m.kd);
    jm["orm"] = map_to_json(m.orm);
    if (m.normal) jm["normal"] = map_to_json(*m.normal);
    jm["cache_resolution"] = {m.cache_resolution[0], m.cache_resolution[1]};
    root["meshes"].push_back(jm);
  }
  root["environment"] = map_to_json(desc.environment);
  root["cameras"] = nlohmann::json::array();
  for (const auto& c : desc.cameras) {
    nlohmann::json jc;
    jc["position"] = {c.position.x, c.position.y, c.position.z};
    jc["look_at"] = {c.look_at.x, c.look_at.y, c.look_at.z};
    jc["up"] = {c.up.x, c.up.y, c.up.z};
    jc["fov_x_deg"] = c.fov_x_deg;
    jc["resolution"] = {c.resolution[0], c.resolution[1]};
    root["cameras"].push_back(jc);
  }
  return root;
}

inline void serialize_scene(const std::string& path, const SceneDescription& desc) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << serialize_scene_json(desc).dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Assembled scene: merged mesh + BVH + parameters.
// ---------------------------------------------------------------------------

struct Scene {
  TriangleMesh mesh;  // merged; material_id indexes params.materials
  Bvh bvh;
  ParamSet params;
  std::vector<Camera> cameras;
  float ray_epsilon = 1e-4f;  // 1e-4 x scene diagonal
  DiffuseModel primary_diffuse = DiffuseModel::Disney;

  void rebuild_env_cdf() { build_env_cdf(params.env); }

  void finalize() {
    bvh = build_bvh(mesh);
    Bounds3 b = mesh.bounds();
    ray_epsilon = 1e-4f * std::max(1e-6f, length(b.diagonal()));
    rebuild_env_cdf();
  }
};

namespace scene_detail {

inline Texture2D load_map(const MapDesc& m, int channels, const std::filesystem::path& base) {
  if (!m.file.empty()) {
    std::filesystem::path p = base / m.file;
    std::string ext = p.extension().string();
    Texture2D tex;
    if (ext == ".rfm")
      tex = load_rfm(p.string());
    else if (ext == ".hdr")
      tex = image_to_texture(load_hdr(p.string()));
    else
      throw SceneParseError("unsupported texture format: " + p.string());
    if (tex.channels < channels) {
      // widen (e.g. rgb kd file -> rgba with alpha 1)
      Texture2D wide(tex.width, tex.height, channels);
      for (int i = 0; i < tex.width * tex.height; ++i) {
        for (int k = 0; k < channels; ++k)
          wide.data[static_cast<size_t>(i) * channels + k] =
              k < tex.channels ? tex.data[static_cast<size_t>(i) * tex.channels + k] : 1.0f;
      }
      return wide;
    }
    return tex;
  }
  std::vector<float> v = m.constant;
  v.resize(static_cast<size_t>(channels), 1.0f);
  return Texture2D::constant(m.resolution[0], m.resolution[1], channels, v.data());
}

}  // namespace scene_detail

inline Scene build_scene(const SceneDescription& desc, const std::string& scene_dir = ".") {
  std::filesystem::path base(scene_dir);
  Scene scene;
  int slot = 0;
  for (const auto& md : desc.meshes) {
    TriangleMesh part = load_obj((base / md.obj).string());
    part.validate();
    scene.mesh.merge(part, slot);
    MaterialMaps maps;
    maps.kd = scene_detail::load_map(md.kd, 4, base);
    maps.orm = scene_detail::load_map(md.orm, 3, base);
    if (md.normal) maps.normal = scene_detail::load_map(*md.normal, 3, base);
    scene.params.materials.push_back(std::move(maps));
    DiffuseCache cache;
    cache.tex = Texture2D(md.cache_resolution[0], md.cache_resolution[1], 3);
    scene.params.caches.push_back(std::move(cache));
    ++slot;
  }
  EnvironmentMap env;
  env.radiance = scene_detail::load_map(desc.environment, 3, base);
  scene.params.env = std::move(env);
  for (const auto& cd : desc.cameras)
    scene.cameras.push_back(Camera::look_at(cd.position, cd.look_at, cd.up, cd.fov_x_deg,
                                            cd.resolution[0], cd.resolution[1]));
  scene.finalize();
  return scene;
}

}  // namespace refmc
