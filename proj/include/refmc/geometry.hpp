// Copyright (c) 2026 the refmc authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "refmc/core.hpp"

#if defined(__SSE2__)
#include <emmintrin.h>
#endif

namespace refmc {

struct Ray {
  Vec3 origin;
  Vec3 dir;  // unit
  float t_min = 1e-4f;
  float t_max = kInfinity;
};

struct Hit {
  float t = kInfinity;
  Vec3 position;
  Vec3 n_geom;     // geometric normal, unit
  Vec3 n_shading;  // barycentric-interpolated shading normal, unit
  Vec2 uv;
  Vec2 barycentrics;  // (b1, b2); b0 = 1 - b1 - b2
  int material_id = 0;
  uint32_t prim = 0;
};

struct TriangleMesh {
  std::vector<Vec3> positions;
  std::vector<uint32_t> indices;  // 3 per triangle
  std::vector<Vec3> normals;     // per vertex, unit
  std::vector<Vec2> uvs;         // per vertex
  std::vector<int> material_id;  // per triangle

  size_t triangle_count() const { return indices.size() / 3; }

  Bounds3 bounds() const {
    Bounds3 b;
    for (const Vec3& p : positions) b.extend(p);
    return b;
  }

  Bounds3 triangle_bounds(size_t tri) const {
    Bounds3 b;
    for (int k = 0; k < 3; ++k) b.extend(positions[indices[3 * tri + k]]);
    return b;
  }

  // Area-weighted vertex normals for meshes without vn records.
  void compute_vertex_normals() {
    normals.assign(positions.size(), Vec3(0.0f));
    for (size_t t = 0; t < triangle_count(); ++t) {
      uint32_t i0 = indices[3 * t], i1 = indices[3 * t + 1], i2 = indices[3 * t + 2];
      Vec3 n = cross(positions[i1] - positions[i0], positions[i2] - positions[i0]);
      normals[i0] += n;
      normals[i1] += n;
      normals[i2] += n;
    }
    for (Vec3& n : normals) {
      float len = length(n);
      n = len > 0.0f ? n / len : Vec3{0.0f, 0.0f, 1.0f};
    }
  }

  void validate() const {
    if (indices.size() % 3 != 0) throw std::runtime_error("index count not a multiple of 3");
    for (uint32_t i : indices)
      if (i >= positions.size()) throw std::runtime_error("vertex index out of range");
    for (size_t t = 0; t < triangle_count(); ++t) {
      Vec3 e1 = positions[indices[3 * t + 1]] - positions[indices[3 * t]];
      Vec3 e2 = positions[indices[3 * t + 2]] - positions[indices[3 * t]];
      if (0.5f * length(cross(e1, e2)) <= 1e-12f)
        throw std::runtime_error("degenerate triangle " + std::to_string(t));
    }
  }

  // Appends another mesh, assigning all its triangles the given material id.
  void merge(const TriangleMesh& other, int mat_id) {
    uint32_t base = static_cast<uint32_t>(positions.size());
    positions.insert(positions.end(), other.positions.begin(), other.positions.end());
    normals.insert(normals.end(), other.normals.begin(), other.normals.end());
    uvs.insert(uvs.end(), other.uvs.begin(), other.uvs.end());
    for (uint32_t i : other.indices) indices.push_back(base + i);
    material_id.insert(material_id.end(), other.triangle_count(), mat_id);
  }
};

// ---------------------------------------------------------------------------
// Wavefront OBJ subset: v, vn, vt, f (polygons fan-triangulated).
// ---------------------------------------------------------------------------

inline TriangleMesh load_obj(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open OBJ: " + path);
  std::vector<Vec3> pos, nrm;
  std::vector<Vec2> uv;
  struct VertKey {
    int p, t, n;
  };
  TriangleMesh mesh;
  std::vector<VertKey> face;
  std::string line;

  auto resolve = [](int idx, size_t n) -> int {
    if (idx > 0) return idx - 1;
    if (idx < 0) return static_cast<int>(n) + idx;
    return -1;
  };

  // OBJ corners may mix v/vt/vn combinations; emit one output vertex per corner.
  auto emit = [&](const VertKey& k) -> uint32_t {
    uint32_t out = static_cast<uint32_t>(mesh.positions.size());
    mesh.positions.push_back(pos.at(static_cast<size_t>(k.p)));
    mesh.uvs.push_back(k.t >= 0 ? uv.at(static_cast<size_t>(k.t)) : Vec2{0.0f, 0.0f});
    mesh.normals.push_back(k.n >= 0 ? nrm.at(static_cast<size_t>(k.n)) : Vec3{0.0f, 0.0f, 0.0f});
    return out;
  };

  bool any_missing_normal = false;
  while (std::getline(f, line)) {
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "v") {
      Vec3 p;
      ss >> p.x >> p.y >> p.z;
      pos.push_back(p);
    } else if (tag == "vn") {
      Vec3 n;
      ss >> n.x >> n.y >> n.z;
      nrm.push_back(n);
    } else if (tag == "vt") {
      Vec2 t;
      ss >> t.x >> t.y;
      uv.push_back(t);
    } else if (tag == "f") {
      face.clear();
      std::string corner;
      while (ss >> corner) {
        VertKey k{0, 0, 0};
        int vals[3] = {0, 0, 0};
        int field = 0;
        size_t start = 0;
        for (size_t i = 0; i <= corner.size(); ++i) {
          if (i == corner.size() || corner[i] == '/') {
            if (i > start) vals[field] = std::stoi(corner.substr(start, i - start));
            start = i + 1;
            ++field;
          }
        }
        k.p = resolve(vals[0], pos.size());
        k.t = vals[1] != 0 ? resolve(vals[1], uv.size()) : -1;
        k.n = vals[2] != 0 ? resolve(vals[2], nrm.size()) : -1;
        if (k.p < 0) throw std::runtime_error("bad face vertex in OBJ: " + path);
        if (k.n < 0) any_missing_normal = true;
        face.push_back(k);
      }
      if (face.size() < 3) throw std::runtime_error("face with <3 vertices in OBJ: " + path);
      for (size_t i = 1; i + 1 < face.size(); ++i) {
        mesh.indices.push_back(emit(face[0]));
        mesh.indices.push_back(emit(face[i]));
        mesh.indices.push_back(emit(face[i + 1]));
        mesh.material_id.push_back(0);
      }
    }
  }
  if (any_missing_normal || nrm.empty()) mesh.compute_vertex_normals();
  for (Vec3& n : mesh.normals) {
    float len = length(n);
    if (len > 0.0f) n = n / len;
  }
  return mesh;
}

inline void save_obj(const std::string& path, const TriangleMesh& mesh) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  for (const Vec3& p : mesh.positions) f << "v " << p.x << " " << p.y << " " << p.z << "\n";
  for (const Vec2& t : mesh.uvs) f << "vt " << t.x << " " << t.y << "\n";
  for (const Vec3& n : mesh.normals) f << "vn " << n.x << " " << n.y << " " << n.z << "\n";
  for (size_t t = 0; t < mesh.triangle_count(); ++t) {
    f << "f";
    for (int k = 0; k < 3; ++k) {
      uint32_t i = mesh.indices[3 * t + k] + 1;
      f << " " << i << "/" << i << "/" << i;
    }
    f << "\n";
  }
}

// ---------------------------------------------------------------------------
// Procedural meshes (with UVs) used by tests, selftest, and dataset scenes.
// ---------------------------------------------------------------------------

// Rectangle spanned by u_axis/v_axis around center; normal = u x v.
inline TriangleMesh make_plane(const Vec3& center, const Vec3& u_axis, const Vec3& v_axis,
                               int subdiv = 1) {
  TriangleMesh m;
  Vec3 n = normalize(cross(u_axis, v_axis));
  for (int j = 0; j <= subdiv; ++j)
    for (int i = 0; i <= subdiv; ++i) {
      float u = static_cast<float>(i) / subdiv;
      float v = static_cast<float>(j) / subdiv;
      m.positions.push_back(center + u_axis * (u - 0.5f) + v_axis * (v - 0.5f));
      m.normals.push_back(n);
      m.uvs.push_back({u, v});
    }
  for (int j = 0; j < subdiv; ++j)
    for (int i = 0; i < subdiv; ++i) {
      uint32_t a = static_cast<uint32_t>(j * (subdiv + 1) + i);
      uint32_t b = a + 1;
      uint32_t c = a + subdiv + 1;
      uint32_t d = c + 1;
      m.indices.insert(m.indices.end(), {a, b, d});
      m.indices.insert(m.indices.end(), {a, d, c});
      m.material_id.insert(m.material_id.end(), 2, 0);
    }
  return m;
}

inline TriangleMesh make_sphere(const Vec3& center, float radius, int stacks = 32,
                                int slices = 64) {
  TriangleMesh m;
  for (int j = 0; j <= stacks; ++j) {
    float v = static_cast<float>(j) / stacks;
    float theta = v * kPi;
    for (int i = 0; i <= slices; ++i) {
      float u = static_cast<float>(i) / slices;
      float phi = u * kTwoPi;
      Vec3 n{std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi), std::cos(theta)};
      m.positions.push_back(center + n * radius);
      m.normals.push_back(n);
      m.uvs.push_back({u, v});
    }
  }
  int stride = slices + 1;
  for (int j = 0; j < stacks; ++j)
    for (int i = 0; i < slices; ++i) {
      uint32_t a = static_cast<uint32_t>(j * stride + i);
      uint32_t b = a + 1;
      uint32_t c = a + stride;
      uint32_t d = c + 1;
      if (j > 0) {
        m.indices.insert(m.indices.end(), {a, c, b});
        m.material_id.push_back(0);
      }
      if (j + 1 < stacks) {
        m.indices.insert(m.indices.end(), {b, c, d});
        m.material_id.push_back(0);
      }
    }
  return m;
}

// Axis-aligned box; each face maps UV to [0,1]^2. With inward = true the
// windings are flipped so normals point into the box (enclosure scenes).
inline TriangleMesh make_box(const Vec3& lo, const Vec3& hi, bool inward = false) {
  TriangleMesh m;
  Vec3 c = (lo + hi) * 0.5f;
  Vec3 e = (hi - lo) * 0.5f;
  struct Face {
    Vec3 n, u, v;
  };
  Face faces[6] = {
      {{0, 0, 1}, {1, 0, 0}, {0, 1, 0}},  {{0, 0, -1}, {0, 1, 0}, {1, 0, 0}},
      {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}},  {{-1, 0, 0}, {0, 0, 1}, {0, 1, 0}},
      {{0, 1, 0}, {0, 0, 1}, {1, 0, 0}},  {{0, -1, 0}, {1, 0, 0}, {0, 0, 1}},
  };
  for (const Face& f : faces) {
    Vec3 u = f.u, v = f.v;
    if (inward) std::swap(u, v);
    Vec3 fc = c + f.n * std::abs(dot(f.n, e));
    TriangleMesh face =
        make_plane(fc, u * (2.0f * std::abs(dot(u, e))), v * (2.0f * std::abs(dot(v, e))));
    m.merge(face, 0);
  }
  m.material_id.assign(m.triangle_count(), 0);
  return m;
}

// ---------------------------------------------------------------------------
// Möller-Trumbore intersection with a double-precision retest near zero.
// ---------------------------------------------------------------------------

// Leaf triangles packed in traversal order: removes the prim_order indirection
// and the scattered index/position loads from the hot loop. e1/e2 are the
// same float subtractions the intersection test would otherwise recompute, so
// hit results are bit-identical; p1/p2 are kept for the double-precision
// grazing retest.
struct PackedTri {
  Vec3 p0, e1, e2;
  Vec3 p1, p2;
  uint32_t prim = 0;
};

namespace geom_detail {

inline bool intersect_triangle(const Vec3& o, const Vec3& d, const Vec3& p0, const Vec3& p1,
                               const Vec3& p2, float t_min, float t_max, float& t, float& b1,
                               float& b2) {
  Vec3 e1 = p1 - p0;
  Vec3 e2 = p2 - p0;
  Vec3 pv = cross(d, e2);
  float det = dot(e1, pv);
  if (std::abs(det) < 1e-10f) {
    // near-parallel: retest in double to keep grazing hits watertight
    using D3 = TVec3<double>;
    D3 od{o.x, o.y, o.z}, dd{d.x, d.y, d.z};
    D3 q0{p0.x, p0.y, p0.z}, q1{p1.x, p1.y, p1.z}, q2{p2.x, p2.y, p2.z};
    D3 de1 = q1 - q0, de2 = q2 - q0;
    D3 dpv = cross(dd, de2);
    double ddet = dot(de1, dpv);
    if (std::abs(ddet) < 1e-16) return false;
    double inv = 1.0 / ddet;
    D3 tv = od - q0;
    double u = dot(tv, dpv) * inv;
    if (u < 0.0 || u > 1.0) return false;
    D3 qv = cross(tv, de1);
    double v = dot(dd, qv) * inv;
    if (v < 0.0 || u + v > 1.0) return false;
    double tt = dot(de2, qv) * inv;
    if (tt <= t_min || tt >= t_max) return false;
    t = static_cast<float>(tt);
    b1 = static_cast<float>(u);
    b2 = static_cast<float>(v);
    return true;
  }
  float inv = 1.0f / det;
  Vec3 tv = o - p0;
  float u = dot(tv, pv) * inv;
  if (u < 0.0f || u > 1.0f) return false;
  Vec3 qv = cross(tv, e1);
  float v = dot(d, qv) * inv;
  if (v < 0.0f || u + v > 1.0f) return false;
  float tt = dot(e2, qv) * inv;
  if (tt <= t_min || tt >= t_max) return false;
  t = tt;
  b1 = u;
  b2 = v;
  return true;
}

// Same test against a packed triangle; the precomputed edges make this the
// identical float arithmetic as the raw-vertex overload.
inline bool intersect_triangle(const Vec3& o, const Vec3& d, const PackedTri& tri, float t_min,
                               float t_max, float& t, float& b1, float& b2) {
  Vec3 pv = cross(d, tri.e2);
  float det = dot(tri.e1, pv);
  if (std::abs(det) < 1e-10f)
    return intersect_triangle(o, d, tri.p0, tri.p1, tri.p2, t_min, t_max, t, b1, b2);
  float inv = 1.0f / det;
  Vec3 tv = o - tri.p0;
  float u = dot(tv, pv) * inv;
  if (u < 0.0f || u > 1.0f) return false;
  Vec3 qv = cross(tv, tri.e1);
  float v = dot(d, qv) * inv;
  if (v < 0.0f || u + v > 1.0f) return false;
  float tt = dot(tri.e2, qv) * inv;
  if (tt <= t_min || tt >= t_max) return false;
  t = tt;
  b1 = u;
  b2 = v;
  return true;
}

inline bool intersect_bounds(const Bounds3& b, const Vec3& o, const Vec3& inv_d, float t_max,
                             float& tn_out) {
  float t0 = (b.lo.x - o.x) * inv_d.x, t1 = (b.hi.x - o.x) * inv_d.x;
  if (t0 > t1) std::swap(t0, t1);
  float tn = t0, tf = t1;
  t0 = (b.lo.y - o.y) * inv_d.y;
  t1 = (b.hi.y - o.y) * inv_d.y;
  if (t0 > t1) std::swap(t0, t1);
  tn = std::max(tn, t0);
  tf = std::min(tf, t1);
  t0 = (b.lo.z - o.z) * inv_d.z;
  t1 = (b.hi.z - o.z) * inv_d.z;
  if (t0 > t1) std::swap(t0, t1);
  tn = std::max(tn, t0);
  tf = std::min(tf, t1);
  tn_out = tn;
  return tn <= tf * 1.0001f && tf > 0.0f && tn < t_max;
}

inline bool intersect_bounds(const Bounds3& b, const Vec3& o, const Vec3& inv_d, float t_max) {
  float tn;
  return intersect_bounds(b, o, inv_d, t_max, tn);
}

}  // namespace geom_detail

// ---------------------------------------------------------------------------
// Binned-SAH BVH.
// ---------------------------------------------------------------------------

struct BvhNode {
  Bounds3 bounds;
  uint32_t left_first = 0;  // first primitive (leaf) or left child index
  uint16_t count = 0;       // primitive count; 0 for interior nodes
  uint8_t axis = 0;
};

// Interior node in the child-bounds layout the traversal loops use: the
// parent stores both children's boxes, so one node load feeds two slab tests
// and leaves need no box re-test. Bounds are transposed ([0] = left child,
// [1] = right child, lo/hi pairs contiguous per axis) so the paired test can
// run both children through one SIMD lane pair. A child ref is either an
// index into `nodes2` or, with the high bit set, the index of a leaf in
// `nodes`.
struct alignas(16) BvhNode2 {
  float lo_x[2], hi_x[2];
  float lo_y[2], hi_y[2];
  float lo_z[2], hi_z[2];
  uint32_t lref = 0, rref = 0;
  uint8_t axis = 0;

  void set_child(int c, const Bounds3& b) {
    lo_x[c] = b.lo.x;
    hi_x[c] = b.hi.x;
    lo_y[c] = b.lo.y;
    hi_y[c] = b.hi.y;
    lo_z[c] = b.lo.z;
    hi_z[c] = b.hi.z;
  }
};

constexpr uint32_t kBvhLeafBit = 0x80000000u;

// Up to four leaf triangles transposed for a lane-parallel intersection test.
// Pad lanes carry idx == UINT32_MAX and zeroed geometry. Lane arithmetic is
// IEEE-identical to the scalar test, so hits are unchanged.
struct alignas(16) PackedTri4 {
  float p0x[4], p0y[4], p0z[4];
  float e1x[4], e1y[4], e1z[4];
  float e2x[4], e2y[4], e2z[4];
  uint32_t idx[4];  // into Bvh::tris
};

struct Bvh {
  std::vector<BvhNode> nodes;
  std::vector<uint32_t> prim_order;
  std::vector<PackedTri> tris;        // prim_order[i] expanded, same indexing
  std::vector<BvhNode2> nodes2;       // empty when the root itself is a leaf
  std::vector<PackedTri4> tri4;       // leaf triangles in 4-wide groups
  std::vector<uint32_t> leaf_group;   // per node: first tri4 group (leaves only)
};

namespace geom_detail {

// Slab test of both children of a node against the same ray. Bit 0 / bit 1 of
// the result flag a left / right hit; tnl / tnr receive the entry distances.
// The SIMD path reproduces the scalar swap/min/max NaN and signed-zero
// behavior exactly (min/max operand order chosen to return the same operand
// std::min/std::max would), so traversal decisions are identical on every
// platform.
inline uint32_t intersect_bounds2(const BvhNode2& nd, const Vec3& o, const Vec3& inv_d,
                                  float t_max, float& tnl, float& tnr) {
#if defined(__SSE2__)
  __m128 vx = _mm_load_ps(nd.lo_x);  // [l.lo, r.lo, l.hi, r.hi]
  __m128 vy = _mm_load_ps(nd.lo_y);
  __m128 vz = _mm_load_ps(nd.lo_z);
  __m128 t0 = _mm_mul_ps(_mm_sub_ps(vx, _mm_set1_ps(o.x)), _mm_set1_ps(inv_d.x));
  __m128 t1 = _mm_mul_ps(_mm_sub_ps(_mm_movehl_ps(vx, vx), _mm_set1_ps(o.x)),
                         _mm_set1_ps(inv_d.x));
  __m128 tn = _mm_min_ps(t1, t0);
  __m128 tf = _mm_max_ps(t0, t1);
  t0 = _mm_mul_ps(_mm_sub_ps(vy, _mm_set1_ps(o.y)), _mm_set1_ps(inv_d.y));
  t1 = _mm_mul_ps(_mm_sub_ps(_mm_movehl_ps(vy, vy), _mm_set1_ps(o.y)), _mm_set1_ps(inv_d.y));
  tn = _mm_max_ps(_mm_min_ps(t1, t0), tn);
  tf = _mm_min_ps(_mm_max_ps(t0, t1), tf);
  t0 = _mm_mul_ps(_mm_sub_ps(vz, _mm_set1_ps(o.z)), _mm_set1_ps(inv_d.z));
  t1 = _mm_mul_ps(_mm_sub_ps(_mm_movehl_ps(vz, vz), _mm_set1_ps(o.z)), _mm_set1_ps(inv_d.z));
  tn = _mm_max_ps(_mm_min_ps(t1, t0), tn);
  tf = _mm_min_ps(_mm_max_ps(t0, t1), tf);
  __m128 ok = _mm_and_ps(_mm_cmple_ps(tn, _mm_mul_ps(tf, _mm_set1_ps(1.0001f))),
                         _mm_and_ps(_mm_cmplt_ps(_mm_setzero_ps(), tf),
                                    _mm_cmplt_ps(tn, _mm_set1_ps(t_max))));
  alignas(16) float tnbuf[4];
  _mm_store_ps(tnbuf, tn);
  tnl = tnbuf[0];
  tnr = tnbuf[1];
  return static_cast<uint32_t>(_mm_movemask_ps(ok)) & 3u;
#else
  uint32_t mask = 0;
  float tns[2];
  for (int c = 0; c < 2; ++c) {
    float t0 = (nd.lo_x[c] - o.x) * inv_d.x, t1 = (nd.hi_x[c] - o.x) * inv_d.x;
    if (t0 > t1) std::swap(t0, t1);
    float tn = t0, tf = t1;
    t0 = (nd.lo_y[c] - o.y) * inv_d.y;
    t1 = (nd.hi_y[c] - o.y) * inv_d.y;
    if (t0 > t1) std::swap(t0, t1);
    tn = std::max(tn, t0);
    tf = std::min(tf, t1);
    t0 = (nd.lo_z[c] - o.z) * inv_d.z;
    t1 = (nd.hi_z[c] - o.z) * inv_d.z;
    if (t0 > t1) std::swap(t0, t1);
    tn = std::max(tn, t0);
    tf = std::min(tf, t1);
    tns[c] = tn;
    if (tn <= tf * 1.0001f && tf > 0.0f && tn < t_max) mask |= 1u << c;
  }
  tnl = tns[0];
  tnr = tns[1];
  return mask;
#endif
}

// Lane-parallel Möller-Trumbore over a PackedTri4. accept_mask lanes passed
// every scalar rejection test against the given t-range; fallback_mask lanes
// hit the |det| < 1e-10 guard and must go through the scalar double-precision
// retest. All lane arithmetic follows the scalar test's operation order
// (cross, left-associated dot, divide), so accepted t/b1/b2 are bit-identical.
struct Tri4Result {
  float t[4], b1[4], b2[4];
  uint32_t accept_mask = 0;
  uint32_t fallback_mask = 0;
};

inline void intersect_tri4(const PackedTri4& tp, const Vec3& o, const Vec3& d, float t_min,
                           float t_max, Tri4Result& r) {
#if defined(__SSE2__)
  const __m128 dx = _mm_set1_ps(d.x), dy = _mm_set1_ps(d.y), dz = _mm_set1_ps(d.z);
  const __m128 e1x = _mm_load_ps(tp.e1x), e1y = _mm_load_ps(tp.e1y), e1z = _mm_load_ps(tp.e1z);
  const __m128 e2x = _mm_load_ps(tp.e2x), e2y = _mm_load_ps(tp.e2y), e2z = _mm_load_ps(tp.e2z);
  // pv = cross(d, e2)
  const __m128 pvx = _mm_sub_ps(_mm_mul_ps(dy, e2z), _mm_mul_ps(dz, e2y));
  const __m128 pvy = _mm_sub_ps(_mm_mul_ps(dz, e2x), _mm_mul_ps(dx, e2z));
  const __m128 pvz = _mm_sub_ps(_mm_mul_ps(dx, e2y), _mm_mul_ps(dy, e2x));
  // det = dot(e1, pv), left-associated
  const __m128 det = _mm_add_ps(_mm_add_ps(_mm_mul_ps(e1x, pvx), _mm_mul_ps(e1y, pvy)),
                                _mm_mul_ps(e1z, pvz));
  const __m128 abs_mask = _mm_castsi128_ps(_mm_set1_epi32(0x7fffffff));
  const __m128 small = _mm_cmplt_ps(_mm_and_ps(det, abs_mask), _mm_set1_ps(1e-10f));
  const __m128 inv = _mm_div_ps(_mm_set1_ps(1.0f), det);
  // tv = o - p0
  const __m128 tvx = _mm_sub_ps(_mm_set1_ps(o.x), _mm_load_ps(tp.p0x));
  const __m128 tvy = _mm_sub_ps(_mm_set1_ps(o.y), _mm_load_ps(tp.p0y));
  const __m128 tvz = _mm_sub_ps(_mm_set1_ps(o.z), _mm_load_ps(tp.p0z));
  const __m128 u = _mm_mul_ps(
      _mm_add_ps(_mm_add_ps(_mm_mul_ps(tvx, pvx), _mm_mul_ps(tvy, pvy)), _mm_mul_ps(tvz, pvz)),
      inv);
  // qv = cross(tv, e1)
  const __m128 qvx = _mm_sub_ps(_mm_mul_ps(tvy, e1z), _mm_mul_ps(tvz, e1y));
  const __m128 qvy = _mm_sub_ps(_mm_mul_ps(tvz, e1x), _mm_mul_ps(tvx, e1z));
  const __m128 qvz = _mm_sub_ps(_mm_mul_ps(tvx, e1y), _mm_mul_ps(tvy, e1x));
  const __m128 v = _mm_mul_ps(
      _mm_add_ps(_mm_add_ps(_mm_mul_ps(dx, qvx), _mm_mul_ps(dy, qvy)), _mm_mul_ps(dz, qvz)), inv);
  const __m128 tt = _mm_mul_ps(
      _mm_add_ps(_mm_add_ps(_mm_mul_ps(e2x, qvx), _mm_mul_ps(e2y, qvy)), _mm_mul_ps(e2z, qvz)),
      inv);
  const __m128 zero = _mm_setzero_ps();
  const __m128 one = _mm_set1_ps(1.0f);
  // the scalar test's reject chain, condition for condition (NaN-compatible)
  __m128 reject = _mm_cmplt_ps(u, zero);
  reject = _mm_or_ps(reject, _mm_cmplt_ps(one, u));
  reject = _mm_or_ps(reject, _mm_cmplt_ps(v, zero));
  reject = _mm_or_ps(reject, _mm_cmplt_ps(one, _mm_add_ps(u, v)));
  reject = _mm_or_ps(reject, _mm_cmple_ps(tt, _mm_set1_ps(t_min)));
  reject = _mm_or_ps(reject, _mm_cmple_ps(_mm_set1_ps(t_max), tt));
  const __m128 accept = _mm_andnot_ps(_mm_or_ps(reject, small), _mm_castsi128_ps(
                                          _mm_set1_epi32(-1)));
  _mm_store_ps(r.t, tt);
  _mm_store_ps(r.b1, u);
  _mm_store_ps(r.b2, v);
  r.accept_mask = static_cast<uint32_t>(_mm_movemask_ps(accept));
  r.fallback_mask = static_cast<uint32_t>(_mm_movemask_ps(small));
#else
  r.accept_mask = 0;
  r.fallback_mask = 0;
  for (int l = 0; l < 4; ++l) {
    Vec3 e1{tp.e1x[l], tp.e1y[l], tp.e1z[l]};
    Vec3 e2{tp.e2x[l], tp.e2y[l], tp.e2z[l]};
    Vec3 pv = cross(d, e2);
    float det = dot(e1, pv);
    if (std::abs(det) < 1e-10f) {
      r.fallback_mask |= 1u << l;
      continue;
    }
    float inv = 1.0f / det;
    Vec3 tv = o - Vec3{tp.p0x[l], tp.p0y[l], tp.p0z[l]};
    float u = dot(tv, pv) * inv;
    Vec3 qv = cross(tv, e1);
    float v = dot(d, qv) * inv;
    float tt = dot(e2, qv) * inv;
    r.t[l] = tt;
    r.b1[l] = u;
    r.b2[l] = v;
    if (!(u < 0.0f) && !(u > 1.0f) && !(v < 0.0f) && !(u + v > 1.0f) && !(tt <= t_min) &&
        !(tt >= t_max))
      r.accept_mask |= 1u << l;
  }
#endif
}

}  // namespace geom_detail

inline Bvh build_bvh(const TriangleMesh& mesh) {
  size_t n = mesh.triangle_count();
  if (n == 0) throw std::runtime_error("cannot build BVH over an empty mesh");
  Bvh bvh;
  bvh.prim_order.resize(n);
  std::vector<Bounds3> prim_bounds(n);
  std::vector<Vec3> centroids(n);
  for (size_t i = 0; i < n; ++i) {
    bvh.prim_order[i] = static_cast<uint32_t>(i);
    prim_bounds[i] = mesh.triangle_bounds(i);
    centroids[i] = prim_bounds[i].center();
  }
  bvh.nodes.reserve(2 * n);

  constexpr int kBuckets = 16;
  constexpr int kMaxLeaf = 8;

  struct BuildTask {
    uint32_t node;
    uint32_t first, count;
    int depth;
  };
  bvh.nodes.push_back({});
  std::vector<BuildTask> stack{{0, 0, static_cast<uint32_t>(n), 0}};
  while (!stack.empty()) {
    BuildTask task = stack.back();
    stack.pop_back();
    BvhNode& node = bvh.nodes[task.node];
    Bounds3 bounds, cbounds;
    for (uint32_t i = task.first; i < task.first + task.count; ++i) {
      bounds.extend(prim_bounds[bvh.prim_order[i]]);
      cbounds.extend(centroids[bvh.prim_order[i]]);
    }
    node.bounds = bounds;
    int axis = cbounds.max_extent();
    float extent = cbounds.diagonal()[axis];
    if (task.count <= kMaxLeaf || task.depth >= 62 || extent <= 0.0f) {
      node.left_first = task.first;
      node.count = static_cast<uint16_t>(task.count);
      continue;
    }
    // binned SAH split
    struct Bucket {
      Bounds3 b;
      int count = 0;
    };
    Bucket buckets[kBuckets];
    float lo = cbounds.lo[axis];
    float scale = kBuckets / extent;
    for (uint32_t i = task.first; i < task.first + task.count; ++i) {
      uint32_t p = bvh.prim_order[i];
      int bi = std::min(kBuckets - 1, static_cast<int>((centroids[p][axis] - lo) * scale));
      buckets[bi].count++;
      buckets[bi].b.extend(prim_bounds[p]);
    }
    float best_cost = kInfinity;
    int best_split = -1;
    for (int split = 1; split < kBuckets; ++split) {
      Bounds3 bl, br;
      int nl = 0, nr = 0;
      for (int i = 0; i < split; ++i) {
        if (buckets[i].count) bl.extend(buckets[i].b);
        nl += buckets[i].count;
      }
      for (int i = split; i < kBuckets; ++i) {
        if (buckets[i].count) br.extend(buckets[i].b);
        nr += buckets[i].count;
      }
      if (nl == 0 || nr == 0) continue;
      float cost = nl * bl.surface_area() + nr * br.surface_area();
      if (cost < best_cost) {
        best_cost = cost;
        best_split = split;
      }
    }
    uint32_t mid;
    if (best_split < 0) {
      mid = task.first + task.count / 2;
      std::nth_element(bvh.prim_order.begin() + task.first, bvh.prim_order.begin() + mid,
                       bvh.prim_order.begin() + task.first + task.count,
                       [&](uint32_t a, uint32_t b) {
                         return centroids[a][axis] < centroids[b][axis];
                       });
    } else {
      auto it = std::partition(bvh.prim_order.begin() + task.first,
                               bvh.prim_order.begin() + task.first + task.count,
                               [&](uint32_t p) {
                                 int bi = std::min(kBuckets - 1, static_cast<int>(
                                                                     (centroids[p][axis] - lo) *
                                                                     scale));
                                 return bi < best_split;
                               });
      mid = static_cast<uint32_t>(it - bvh.prim_order.begin());
      if (mid == task.first || mid == task.first + task.count) mid = task.first + task.count / 2;
    }
    uint32_t left = static_cast<uint32_t>(bvh.nodes.size());
    bvh.nodes.push_back({});
    bvh.nodes.push_back({});
    BvhNode& nref = bvh.nodes[task.node];  // re-reference after growth
    nref.left_first = left;
    nref.count = 0;
    nref.axis = static_cast<uint8_t>(axis);
    stack.push_back({left, task.first, mid - task.first, task.depth + 1});
    stack.push_back({left + 1, mid, task.first + task.count - mid, task.depth + 1});
  }
  bvh.tris.resize(n);
  for (size_t i = 0; i < n; ++i) {
    uint32_t p = bvh.prim_order[i];
    PackedTri& t = bvh.tris[i];
    t.p0 = mesh.positions[mesh.indices[3 * p]];
    t.p1 = mesh.positions[mesh.indices[3 * p + 1]];
    t.p2 = mesh.positions[mesh.indices[3 * p + 2]];
    t.e1 = t.p1 - t.p0;
    t.e2 = t.p2 - t.p0;
    t.prim = p;
  }
  // pack each leaf's triangles into 4-wide groups for the lane-parallel test
  bvh.leaf_group.assign(bvh.nodes.size(), 0);
  for (size_t ni = 0; ni < bvh.nodes.size(); ++ni) {
    const BvhNode& nd = bvh.nodes[ni];
    if (nd.count == 0) continue;
    bvh.leaf_group[ni] = static_cast<uint32_t>(bvh.tri4.size());
    for (uint32_t base = 0; base < nd.count; base += 4) {
      PackedTri4 g{};
      for (int l = 0; l < 4; ++l) g.idx[l] = UINT32_MAX;
      for (uint32_t l = 0; l < 4 && base + l < nd.count; ++l) {
        uint32_t ti = nd.left_first + base + l;
        const PackedTri& t = bvh.tris[ti];
        g.p0x[l] = t.p0.x;
        g.p0y[l] = t.p0.y;
        g.p0z[l] = t.p0.z;
        g.e1x[l] = t.e1.x;
        g.e1y[l] = t.e1.y;
        g.e1z[l] = t.e1.z;
        g.e2x[l] = t.e2.x;
        g.e2y[l] = t.e2.y;
        g.e2z[l] = t.e2.z;
        g.idx[l] = ti;
      }
      bvh.tri4.push_back(g);
    }
  }
  // flatten interior nodes into the child-bounds layout
  if (bvh.nodes[0].count == 0) {
    bvh.nodes2.reserve(bvh.nodes.size() / 2);
    struct Flatten {
      Bvh& bvh;
      uint32_t run(uint32_t i) {
        const BvhNode& nd = bvh.nodes[i];
        uint32_t idx = static_cast<uint32_t>(bvh.nodes2.size());
        bvh.nodes2.push_back({});
        uint32_t li = nd.left_first, ri = nd.left_first + 1;
        uint32_t lref = bvh.nodes[li].count > 0 ? (kBvhLeafBit | li) : run(li);
        uint32_t rref = bvh.nodes[ri].count > 0 ? (kBvhLeafBit | ri) : run(ri);
        BvhNode2& n2 = bvh.nodes2[idx];
        n2.set_child(0, bvh.nodes[li].bounds);
        n2.set_child(1, bvh.nodes[ri].bounds);
        n2.lref = lref;
        n2.rref = rref;
        n2.axis = nd.axis;
        return idx;
      }
    };
    Flatten{bvh}.run(0);
  }
  return bvh;
}

// Nearest hit along the ray, or nullopt.
inline std::optional<Hit> trace(const Bvh& bvh, const TriangleMesh& mesh, const Vec3& origin,
                                const Vec3& dir, float t_min, float t_max) {
  Vec3 inv_d{1.0f / dir.x, 1.0f / dir.y, 1.0f / dir.z};
  float best_t = t_max;
  float best_b1 = 0, best_b2 = 0;
  int best_prim = -1;

  // Lanes resolve in ascending order so ties and the shrinking best_t behave
  // exactly as the one-triangle-at-a-time loop: accepted lanes re-check
  // against the live best_t, fallback lanes rerun the scalar test against it.
  auto test_leaf = [&](uint32_t ni) {
    const BvhNode& node = bvh.nodes[ni];
    uint32_t g = bvh.leaf_group[ni];
    for (uint32_t base = 0; base < node.count; base += 4, ++g) {
      const PackedTri4& tp = bvh.tri4[g];
      geom_detail::Tri4Result r;
      geom_detail::intersect_tri4(tp, origin, dir, t_min, best_t, r);
      uint32_t lanes = std::min<uint32_t>(4, node.count - base);
      uint32_t pend = (r.accept_mask | r.fallback_mask) & ((1u << lanes) - 1u);
      while (pend) {
        int l = std::countr_zero(pend);
        pend &= pend - 1;
        if (r.fallback_mask & (1u << l)) {
          const PackedTri& tri = bvh.tris[tp.idx[l]];
          float t, b1, b2;
          if (geom_detail::intersect_triangle(origin, dir, tri, t_min, best_t, t, b1, b2)) {
            best_t = t;
            best_b1 = b1;
            best_b2 = b2;
            best_prim = static_cast<int>(tri.prim);
          }
        } else if (r.t[l] < best_t) {
          best_t = r.t[l];
          best_b1 = r.b1[l];
          best_b2 = r.b2[l];
          best_prim = static_cast<int>(bvh.tris[tp.idx[l]].prim);
        }
      }
    }
  };

  float root_tn;
  if (geom_detail::intersect_bounds(bvh.nodes[0].bounds, origin, inv_d, best_t, root_tn)) {
    if (bvh.nodes2.empty()) {
      test_leaf(0);
    } else {
      struct Ent {
        uint32_t ref;
        float tn;
      };
      Ent stack[64];
      int sp = 0;
      uint32_t ref = 0;
      bool have = true;
      while (have) {
        if (ref & kBvhLeafBit) {
          test_leaf(ref & ~kBvhLeafBit);
          have = false;
        } else {
          const BvhNode2& nd = bvh.nodes2[ref];
          float tnl, tnr;
          uint32_t m = geom_detail::intersect_bounds2(nd, origin, inv_d, best_t, tnl, tnr);
          bool hl = (m & 1u) != 0, hr = (m & 2u) != 0;
          uint32_t nref = nd.lref, fref = nd.rref;
          float ftn = tnr;
          if (dir[nd.axis] < 0.0f) {  // near child first
            std::swap(hl, hr);
            nref = nd.rref;
            fref = nd.lref;
            ftn = tnl;
          }
          if (hl) {
            if (hr) stack[sp++] = {fref, ftn};
            ref = nref;
          } else if (hr) {
            ref = fref;
          } else {
            have = false;
          }
        }
        if (!have) {
          while (sp > 0) {
            Ent e = stack[--sp];
            if (e.tn < best_t) {  // deferred boxes may be obsolete by now
              ref = e.ref;
              have = true;
              break;
            }
          }
        }
      }
    }
  }
  if (best_prim < 0) return std::nullopt;
  Hit h;
  uint32_t p = static_cast<uint32_t>(best_prim);
  uint32_t i0 = mesh.indices[3 * p], i1 = mesh.indices[3 * p + 1], i2 = mesh.indices[3 * p + 2];
  float b0 = 1.0f - best_b1 - best_b2;
  h.t = best_t;
  h.position = origin + dir * best_t;
  h.barycentrics = {best_b1, best_b2};
  h.prim = p;
  h.material_id = mesh.material_id.empty() ? 0 : mesh.material_id[p];
  h.n_geom = normalize(cross(mesh.positions[i1] - mesh.positions[i0],
                             mesh.positions[i2] - mesh.positions[i0]));
  Vec3 ns = mesh.normals[i0] * b0 + mesh.normals[i1] * best_b1 + mesh.normals[i2] * best_b2;
  float len = length(ns);
  h.n_shading = len > 0.0f ? ns / len : h.n_geom;
  // keep the geometric normal on the shading side to avoid light leaks
  if (dot(h.n_geom, h.n_shading) < 0.0f) h.n_geom = -h.n_geom;
  if (dot(h.n_geom, dir) > 0.0f) {
    h.n_geom = -h.n_geom;
    h.n_shading = -h.n_shading;
  }
  h.uv = mesh.uvs.empty() ? Vec2{0, 0}
                          : mesh.uvs[i0] * b0 + mesh.uvs[i1] * best_b1 + mesh.uvs[i2] * best_b2;
  return h;
}

// Any-hit query with early exit.
inline bool occluded(const Bvh& bvh, const TriangleMesh& mesh, const Vec3& origin, const Vec3& dir,
                     float t_min, float t_max) {
  Vec3 inv_d{1.0f / dir.x, 1.0f / dir.y, 1.0f / dir.z};

  auto test_leaf = [&](uint32_t ni) -> bool {
    const BvhNode& node = bvh.nodes[ni];
    uint32_t g = bvh.leaf_group[ni];
    for (uint32_t base = 0; base < node.count; base += 4, ++g) {
      const PackedTri4& tp = bvh.tri4[g];
      geom_detail::Tri4Result r;
      geom_detail::intersect_tri4(tp, origin, dir, t_min, t_max, r);
      uint32_t lanes = std::min<uint32_t>(4, node.count - base);
      uint32_t valid = (1u << lanes) - 1u;
      if (r.accept_mask & valid) return true;
      uint32_t fb = r.fallback_mask & valid;
      while (fb) {
        int l = std::countr_zero(fb);
        fb &= fb - 1;
        float t, b1, b2;
        if (geom_detail::intersect_triangle(origin, dir, bvh.tris[tp.idx[l]], t_min, t_max, t, b1,
                                            b2))
          return true;
      }
    }
    return false;
  };

  if (!geom_detail::intersect_bounds(bvh.nodes[0].bounds, origin, inv_d, t_max)) return false;
  if (bvh.nodes2.empty()) return test_leaf(0);
  uint32_t stack[64];
  int sp = 0;
  uint32_t ref = 0;
  for (;;) {
    if (ref & kBvhLeafBit) {
      if (test_leaf(ref & ~kBvhLeafBit)) return true;
      if (sp == 0) return false;
      ref = stack[--sp];
    } else {
      const BvhNode2& nd = bvh.nodes2[ref];
      float tnl, tnr;
      uint32_t m = geom_detail::intersect_bounds2(nd, origin, inv_d, t_max, tnl, tnr);
      bool hl = (m & 1u) != 0, hr = (m & 2u) != 0;
      if (hl) {
        if (hr) stack[sp++] = nd.rref;
        ref = nd.lref;
      } else if (hr) {
        ref = nd.rref;
      } else {
        if (sp == 0) return false;
        ref = stack[--sp];
      }
    }
  }
}

}  // namespace refmc
