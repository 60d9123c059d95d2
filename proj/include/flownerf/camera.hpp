// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <vector>

#include "flownerf/tensor.hpp"

namespace flownerf {

struct Vec3 {
  float x = 0, y = 0, z = 0;
  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(float s) const { return {x * s, y * s, z * s}; }
  float dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  float norm() const;
  Vec3 normalized() const;
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
};

struct Mat3 {
  // row-major
  std::array<float, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};
  Vec3 operator*(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
  Mat3 transposed() const {
    return Mat3{{m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]}};
  }
  Mat3 operator*(const Mat3& o) const;
};

struct Pose {
  Mat3 rotation;     // camera-to-world
  Vec3 translation;  // camera position in world
};

/// Slerp on rotation, lerp on translation.
Pose interpolate_pose(const Pose& a, const Pose& b, float alpha);

/// Pinhole camera, OpenGL-style axes: camera looks along -z, x right, y up;
/// image v grows downward.
struct Camera {
  float fx = 0, fy = 0;
  float cx = 0, cy = 0;
  int width = 0, height = 0;
  float near = 0, far = 0;
  Pose pose;

  /// Throws unless the rotation is orthonormal within 1e-4 and 0 < near < far.
  void validate() const;
};

struct Ray {
  Vec3 origin;
  Vec3 dir;       // unnormalized; z-scaled for NDC math
  float u = 0, v = 0;
  int frame = -1;
};

/// World-space ray through continuous pixel coordinate (u,v).
Ray ray_through(const Camera& cam, float u, float v, int frame = -1);

/// Rays through pixel centers for a list of integer pixels; errors on
/// out-of-bounds pixels.
std::vector<Ray> generate_rays(const Camera& cam,
                               const std::vector<std::pair<int, int>>& pixels,
                               int frame);

/// Forward-facing NDC frame shared by all rays of a scene: the reference
/// intrinsics and near plane that define the reparameterization.
struct NdcSpace {
  float fx = 0, fy = 0;
  float width = 0, height = 0;
  float near = 0;
};

/// Maps a world ray to NDC so that t in [0,1] spans depth [near, infinity)
/// and NDC z runs from -1 at the near plane toward +1 at infinity.
/// Errors when the ray starts behind the near plane or points away from it.
Ray ndc_transform(const Ray& ray, const NdcSpace& ndc);

Vec3 ndc_from_world(const Vec3& p, const NdcSpace& ndc);
Vec3 world_from_ndc(const Vec3& p, const NdcSpace& ndc);

/// NDC z for a metric depth along the camera axis (positive, >= near).
float ndc_z_from_depth(float depth, const NdcSpace& ndc);

/// Projects a world point through a camera; returns false when the point is
/// not in front of the camera.
bool project_point(const Camera& cam, const Vec3& p, float* u, float* v);

// --- batched, differentiable variants used on the tape ---

/// Camera-to-world directions for pixel coordinates u,v of shape [B,1].
Tensor pixel_dirs(const Camera& cam, const Tensor& u, const Tensor& v);

struct NdcRays {
  Tensor origin;  // [B,3]
  Tensor dir;     // [B,3]
};

/// Batched NDC mapping of world rays; origins/dirs are [B,3] tensors and may
/// require grad. Throws naming the first offending ray if any starts behind
/// the near plane.
NdcRays ndc_transform_batch(const Tensor& origin, const Tensor& dir, const NdcSpace& ndc);

/// Batched inverse of the NDC point mapping, on the tape.
Tensor world_from_ndc_batch(const Tensor& p, const NdcSpace& ndc);

/// Batched pinhole projection through per-ray cameras. `world_to_cam_rot` is
/// [B,9] (row-major world-to-camera rotations) and `cam_pos` is [B,3].
/// Returns pixel coordinates [B,2]; `valid` gets 0 for points not in front.
Tensor project_points_batch(const Tensor& p, const Tensor& world_to_cam_rot,
                            const Tensor& cam_pos, float fx, float fy, float cx,
                            float cy, std::vector<float>* valid);

}  // namespace flownerf
