// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "flownerf/data_io.hpp"

namespace flownerf {

/// Band-limited procedural texture: per channel,
/// base + amp * sin(2 pi (freq . uv) + phase).
struct SynthTexture {
  float base[3] = {0.5f, 0.5f, 0.5f};
  float amp[3] = {0.0f, 0.0f, 0.0f};
  float freq[2] = {0.0f, 0.0f};
  float phase[3] = {0.0f, 0.0f, 0.0f};

  void sample(float a, float b, float* rgb) const;
};

/// Static scenery: a textured plane at z = -depth, optionally bounded to an
/// axis-aligned rectangle (for parallax without motion). Textured in world xy.
struct SynthPlane {
  float depth = 2.0f;
  bool bounded = false;
  float center[2] = {0.0f, 0.0f};
  float size[2] = {0.0f, 0.0f};
  SynthTexture texture;
};

/// Dynamic object with constant 3D velocity; textured in object-local xy so
/// the pattern rides along with the motion.
struct SynthObject {
  enum class Kind { kRect, kSphere };
  Kind kind = Kind::kRect;
  std::string name;
  Vec3 center;    // at frame 0
  Vec3 velocity;  // world units per frame
  float size[2] = {0.4f, 0.4f};  // rect extents
  float radius = 0.2f;           // sphere
  SynthTexture texture;
};

struct SceneSpec {
  std::string name;
  int width = 64, height = 64;
  int frame_count = 8;
  float fps = 8.0f;
  float focal = 70.0f;
  float near = 0.6f, far = 10.0f;
  std::uint64_t seed = 7;

  enum class Trajectory { kLinear, kOrbit };
  Trajectory trajectory = Trajectory::kLinear;
  Vec3 traj_from, traj_to;            // linear
  float orbit_radius = 2.0f;          // orbit
  float orbit_angle_deg = 10.0f;
  Vec3 orbit_target{0.0f, 0.0f, -2.0f};

  std::vector<SynthPlane> background;
  std::vector<SynthObject> objects;

  int blur_j = 1;              // 1 = sharp; observations average blur_j renders
  float blur_amplitude = 0.0f; // origin jitter magnitude, world units
  std::vector<int> held_out;   // frame indices flagged for evaluation
};

SceneSpec parse_scene_spec(const std::string& path);

Pose trajectory_pose(const SceneSpec& spec, int frame);
Camera camera_for_frame(const SceneSpec& spec, int frame);

/// Analytic render at the frame's nominal pose plus an optional origin jitter.
FloatGrid render_synth_image(const SceneSpec& spec, int frame,
                             const Vec3& origin_jitter = {});

/// Origin jitters used for blur sample j of a frame (zero when blur_j == 1).
Vec3 blur_jitter(const SceneSpec& spec, int frame, int j);

/// Writes images (blurred + sharp when blur mode is on), analytic depth, 2D
/// flow, masks, poses and the manifest into out_dir; returns the manifest.
/// Errors if a dynamic object never enters the view frustum.
SceneManifest synth_scene(const SceneSpec& spec, const std::string& out_dir);

}  // namespace flownerf
