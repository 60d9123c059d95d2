// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#include "flownerf/camera.hpp"

#include <cmath>

#include "flownerf/errors.hpp"

namespace flownerf {

float Vec3::norm() const { return std::sqrt(x * x + y * y + z * z); }

Vec3 Vec3::normalized() const {
  const float n = norm();
  return n > 0 ? Vec3{x / n, y / n, z / n} : Vec3{};
}

Mat3 Mat3::operator*(const Mat3& o) const {
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      float acc = 0;
      for (int k = 0; k < 3; ++k) acc += m[i * 3 + k] * o.m[k * 3 + j];
      r.m[i * 3 + j] = acc;
    }
  return r;
}

namespace {

std::array<float, 4> quat_from_mat(const Mat3& r) {
  const auto& m = r.m;
  std::array<float, 4> q;  // w, x, y, z
  const float tr = m[0] + m[4] + m[8];
  if (tr > 0) {
    float s = std::sqrt(tr + 1.0f) * 2.0f;
    q = {0.25f * s, (m[7] - m[5]) / s, (m[2] - m[6]) / s, (m[3] - m[1]) / s};
  } else if (m[0] > m[4] && m[0] > m[8]) {
    float s = std::sqrt(1.0f + m[0] - m[4] - m[8]) * 2.0f;
    q = {(m[7] - m[5]) / s, 0.25f * s, (m[1] + m[3]) / s, (m[2] + m[6]) / s};
  } else if (m[4] > m[8]) {
    float s = std::sqrt(1.0f + m[4] - m[0] - m[8]) * 2.0f;
    q = {(m[2] - m[6]) / s, (m[1] + m[3]) / s, 0.25f * s, (m[5] + m[7]) / s};
  } else {
    float s = std::sqrt(1.0f + m[8] - m[0] - m[4]) * 2.0f;
    q = {(m[3] - m[1]) / s, (m[2] + m[6]) / s, (m[5] + m[7]) / s, 0.25f * s};
  }
  return q;
}

Mat3 mat_from_quat(const std::array<float, 4>& q) {
  const float w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 r;
  r.m = {1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)};
  return r;
}

}  // namespace

Pose interpolate_pose(const Pose& a, const Pose& b, float alpha) {
  auto qa = quat_from_mat(a.rotation);
  auto qb = quat_from_mat(b.rotation);
  float dot = qa[0] * qb[0] + qa[1] * qb[1] + qa[2] * qb[2] + qa[3] * qb[3];
  if (dot < 0) {
    for (float& v : qb) v = -v;
    dot = -dot;
  }
  std::array<float, 4> q;
  if (dot > 0.9995f) {
    for (int i = 0; i < 4; ++i) q[i] = qa[i] + alpha * (qb[i] - qa[i]);
  } else {
    const float theta = std::acos(std::min(1.0f, dot));
    const float s = std::sin(theta);
    const float wa = std::sin((1 - alpha) * theta) / s;
    const float wb = std::sin(alpha * theta) / s;
    for (int i = 0; i < 4; ++i) q[i] = wa * qa[i] + wb * qb[i];
  }
  const float n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
  for (float& v : q) v /= n;
  Pose p;
  p.rotation = mat_from_quat(q);
  p.translation = a.translation + (b.translation - a.translation) * alpha;
  return p;
}

void Camera::validate() const {
  const auto& m = pose.rotation.m;
  const Vec3 r0{m[0], m[1], m[2]}, r1{m[3], m[4], m[5]}, r2{m[6], m[7], m[8]};
  const float err =
      std::max({std::fabs(r0.dot(r0) - 1), std::fabs(r1.dot(r1) - 1),
                std::fabs(r2.dot(r2) - 1), std::fabs(r0.dot(r1)),
                std::fabs(r0.dot(r2)), std::fabs(r1.dot(r2))});
  if (err > 1e-4f)
    throw ConfigError("camera: rotation not orthonormal (deviation " +
                      std::to_string(err) + ")");
  if (!(near > 0 && near < far))
    throw ConfigError("camera: requires 0 < near < far, got near=" +
                      std::to_string(near) + " far=" + std::to_string(far));
}

Ray ray_through(const Camera& cam, float u, float v, int frame) {
  const Vec3 d_cam{(u - cam.cx) / cam.fx, -(v - cam.cy) / cam.fy, -1.0f};
  Ray r;
  r.origin = cam.pose.translation;
  r.dir = cam.pose.rotation * d_cam;
  r.u = u;
  r.v = v;
  r.frame = frame;
  return r;
}

std::vector<Ray> generate_rays(const Camera& cam,
                               const std::vector<std::pair<int, int>>& pixels,
                               int frame) {
  std::vector<Ray> rays;
  rays.reserve(pixels.size());
  for (const auto& [u, v] : pixels) {
    if (u < 0 || u >= cam.width || v < 0 || v >= cam.height)
      throw ConfigError("generate_rays: pixel (" + std::to_string(u) + "," +
                        std::to_string(v) + ") outside " +
                        std::to_string(cam.width) + "x" + std::to_string(cam.height));
    rays.push_back(ray_through(cam, static_cast<float>(u) + 0.5f,
                               static_cast<float>(v) + 0.5f, frame));
  }
  return rays;
}

Ray ndc_transform(const Ray& ray, const NdcSpace& ndc) {
  if (ray.dir.z >= -1e-8f)
    throw NumericError("ndc_transform: ray does not point toward the scene");
  // shift the origin onto the near plane z = -near
  const float tn = -(ndc.near + ray.origin.z) / ray.dir.z;
  if (tn < -1e-4f)
    throw NumericError("ndc_transform: ray origin behind the near plane");
  const Vec3 o = ray.origin + ray.dir * tn;
  const float ax = -ndc.fx / (ndc.width * 0.5f);
  const float ay = -ndc.fy / (ndc.height * 0.5f);
  Ray out = ray;
  out.origin = {ax * o.x / o.z, ay * o.y / o.z, 1.0f + 2.0f * ndc.near / o.z};
  out.dir = {ax * (ray.dir.x / ray.dir.z - o.x / o.z),
             ay * (ray.dir.y / ray.dir.z - o.y / o.z), -2.0f * ndc.near / o.z};
  return out;
}

Vec3 ndc_from_world(const Vec3& p, const NdcSpace& ndc) {
  const float ax = -ndc.fx / (ndc.width * 0.5f);
  const float ay = -ndc.fy / (ndc.height * 0.5f);
  return {ax * p.x / p.z, ay * p.y / p.z, 1.0f + 2.0f * ndc.near / p.z};
}

Vec3 world_from_ndc(const Vec3& p, const NdcSpace& ndc) {
  const float z = 2.0f * ndc.near / (p.z - 1.0f);
  const float ax = -ndc.fx / (ndc.width * 0.5f);
  const float ay = -ndc.fy / (ndc.height * 0.5f);
  return {p.x * z / ax, p.y * z / ay, z};
}

float ndc_z_from_depth(float depth, const NdcSpace& ndc) {
  return 1.0f - 2.0f * ndc.near / depth;
}

bool project_point(const Camera& cam, const Vec3& p, float* u, float* v) {
  const Vec3 rel = p - cam.pose.translation;
  const Vec3 pc = cam.pose.rotation.transposed() * rel;
  if (pc.z >= -1e-8f) return false;
  *u = cam.cx + cam.fx * (pc.x / -pc.z);
  *v = cam.cy - cam.fy * (pc.y / -pc.z);
  return true;
}

// ---------------------------------------------------------------------------
// Batched tape variants

Tensor pixel_dirs(const Camera& cam, const Tensor& u, const Tensor& v) {
  const Tensor dx = (u - cam.cx) / cam.fx;
  const Tensor dy = (cam.cy - v) / cam.fy;
  const Tensor dz = Tensor::full({u.dim(0), 1}, -1.0f);
  const Tensor d_cam = concat({dx, dy, dz}, 1);  // [B,3]
  // rotate: d_world = R * d_cam, with R as a constant
  std::vector<float> rt(9);
  for (int i = 0; i < 9; ++i) rt[static_cast<size_t>(i)] = cam.pose.rotation.m[static_cast<size_t>(i)];
  // [B,3] x [3,3]^T layout: rows of R dot d  ->  matmul(d_cam, R^T)
  std::vector<float> r_t{rt[0], rt[3], rt[6], rt[1], rt[4], rt[7], rt[2], rt[5], rt[8]};
  return matmul(d_cam, Tensor::from({3, 3}, r_t));
}

NdcRays ndc_transform_batch(const Tensor& origin, const Tensor& dir,
                            const NdcSpace& ndc) {
  const int b = origin.dim(0);
  {
    const auto& od = origin.data();
    const auto& dd = dir.data();
    for (int i = 0; i < b; ++i) {
      if (dd[static_cast<size_t>(i) * 3 + 2] >= -1e-8f)
        throw NumericError("ndc_transform: ray " + std::to_string(i) +
                           " does not point toward the scene");
      const float tn = -(ndc.near + od[static_cast<size_t>(i) * 3 + 2]) /
                       dd[static_cast<size_t>(i) * 3 + 2];
      if (tn < -1e-4f)
        throw NumericError("ndc_transform: ray " + std::to_string(i) +
                           " starts behind the near plane");
    }
  }
  const Tensor ox = slice(origin, 1, 0, 1), oy = slice(origin, 1, 1, 1),
               oz = slice(origin, 1, 2, 1);
  const Tensor dx = slice(dir, 1, 0, 1), dy = slice(dir, 1, 1, 1),
               dz = slice(dir, 1, 2, 1);
  const Tensor tn = neg((oz + ndc.near) / dz);
  const Tensor sx = ox + tn * dx;
  const Tensor sy = oy + tn * dy;
  const Tensor sz = oz + tn * dz;
  const float ax = -ndc.fx / (ndc.width * 0.5f);
  const float ay = -ndc.fy / (ndc.height * 0.5f);
  const Tensor inv_sz = 1.0f / sz;
  NdcRays out;
  out.origin = concat({ax * sx * inv_sz, ay * sy * inv_sz, 1.0f + 2.0f * ndc.near * inv_sz}, 1);
  out.dir = concat({ax * (dx / dz - sx * inv_sz), ay * (dy / dz - sy * inv_sz),
                    -2.0f * ndc.near * inv_sz}, 1);
  return out;
}

Tensor world_from_ndc_batch(const Tensor& p, const NdcSpace& ndc) {
  const Tensor px = slice(p, 1, 0, 1), py = slice(p, 1, 1, 1), pz = slice(p, 1, 2, 1);
  const Tensor z = (2.0f * ndc.near) / (pz - 1.0f);
  const float ax = -ndc.fx / (ndc.width * 0.5f);
  const float ay = -ndc.fy / (ndc.height * 0.5f);
  return concat({px * z / ax, py * z / ay, z}, 1);
}

Tensor project_points_batch(const Tensor& p, const Tensor& world_to_cam_rot,
                            const Tensor& cam_pos, float fx, float fy, float cx,
                            float cy, std::vector<float>* valid) {
  const int b = p.dim(0);
  const Tensor rel = p - cam_pos;                          // [B,3]
  const Tensor rel_b = reshape(rel, {b, 1, 3});            // [B,1,3]
  const Tensor rot = reshape(world_to_cam_rot, {b, 3, 3});
  const Tensor pc = reshape(sum_axis(rot * rel_b, 2), {b, 3});  // [B,3]
  const Tensor pcx = slice(pc, 1, 0, 1), pcy = slice(pc, 1, 1, 1),
               pcz = slice(pc, 1, 2, 1);
  if (valid) {
    valid->assign(static_cast<size_t>(b), 1.0f);
    const auto& zd = pcz.data();
    for (int i = 0; i < b; ++i)
      if (zd[static_cast<size_t>(i)] >= -1e-6f) (*valid)[static_cast<size_t>(i)] = 0.0f;
  }
  // guard z == 0 so flagged rays stay finite; they are masked out of losses
  const Tensor inv_depth = safe_div(Tensor::full({b, 1}, 1.0f), neg(pcz));
  const Tensor u = cx + fx * pcx * inv_depth;
  const Tensor v = cy - fy * pcy * inv_depth;
  return concat({u, v}, 1);
}

}  // namespace flownerf
