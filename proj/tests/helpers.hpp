// Shared scene builders for the test suites.
#pragma once

#include <filesystem>
#include <string>

#include "refmc/refmc.hpp"

namespace testutil {

using namespace refmc;

inline std::filesystem::path tmp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("refmc_tests_" + name);
  std::filesystem::create_directories(p);
  return p;
}

struct SphereSceneOpts {
  Vec3 kd{0.7f, 0.7f, 0.7f};
  float roughness = 0.5f;
  float metalness = 0.0f;
  Vec3 env{1.0f, 1.0f, 1.0f};
  int kd_res = 1;  // 1 = constant-sized 1x1 texture grid is still valid
  int cam_res = 64;
  float fov_deg = 30.0f;
};

// Single sphere at the origin, camera on -y.
inline Scene sphere_scene(const SphereSceneOpts& o = {}) {
  auto dir = tmp_dir("sphere");
  TriangleMesh sph = make_sphere({0, 0, 0}, 1.0f, 24, 48);
  save_obj((dir / "sphere.obj").string(), sph);
  SceneDescription desc;
  MeshDesc md;
  md.obj = "sphere.obj";
  md.kd.constant = {o.kd.x, o.kd.y, o.kd.z};
  md.kd.resolution = {std::max(1, o.kd_res), std::max(1, o.kd_res)};
  md.orm.constant = {1.0f, o.roughness, o.metalness};
  md.cache_resolution = {32, 32};
  desc.meshes.push_back(md);
  desc.environment.constant = {o.env.x, o.env.y, o.env.z};
  desc.environment.resolution = {64, 32};
  desc.cameras.push_back(
      CameraDesc{{0, -4, 0}, {0, 0, 0}, {0, 0, 1}, o.fov_deg, {o.cam_res, o.cam_res}});
  return build_scene(desc, dir.string());
}

// Large ground plane in the z=0 plane, camera looking down at an angle.
inline Scene plane_scene(Vec3 kd = {0.6f, 0.6f, 0.6f}, float roughness = 0.5f,
                         float metalness = 0.0f, int cam_res = 32) {
  auto dir = tmp_dir("plane");
  TriangleMesh pl = make_plane({0, 0, 0}, {8, 0, 0}, {0, 8, 0}, 1);
  save_obj((dir / "plane.obj").string(), pl);
  SceneDescription desc;
  MeshDesc md;
  md.obj = "plane.obj";
  md.kd.constant = {kd.x, kd.y, kd.z};
  md.orm.constant = {1.0f, roughness, metalness};
  md.cache_resolution = {16, 16};
  desc.meshes.push_back(md);
  desc.environment.constant = {1.0f, 1.0f, 1.0f};
  desc.environment.resolution = {64, 32};
  desc.cameras.push_back(CameraDesc{{0, -3, 3}, {0, 0, 0}, {0, 0, 1}, 40.0f, {cam_res, cam_res}});
  return build_scene(desc, dir.string());
}

}  // namespace testutil
