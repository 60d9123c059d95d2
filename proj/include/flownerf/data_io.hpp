// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "flownerf/camera.hpp"

namespace flownerf {

/// Dense float raster stored row-major, bottom-up in v (row 0 is the top of
/// the image), interleaved channels.
struct FloatGrid {
  int width = 0, height = 0, channels = 0;
  std::vector<float> data;

  float at(int x, int y, int c = 0) const {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  float& at(int x, int y, int c = 0) {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  static FloatGrid make(int w, int h, int c, float fill = 0.0f) {
    return {w, h, c, std::vector<float>(static_cast<size_t>(w) * h * c, fill)};
  }
};

/// FGRD container: magic "FGRD", u16 version, u32 width/height/channels,
/// little-endian float32 payload. Errors carry the byte offset.
FloatGrid load_float_grid(const std::string& path);
void save_float_grid(const FloatGrid& grid, const std::string& path);

/// 8-bit binary portable pixmap (P6, maxval 255) mapped to [0,1] floats.
/// Saving rounds half-up, so a load/save round trip is byte-exact.
FloatGrid load_image(const std::string& path);
void save_image(const FloatGrid& image, const std::string& path);

struct FrameRecord {
  int index = -1;
  std::string image;         // RGB observation (blurred when blur mode is on)
  std::string sharp_image;   // sharp ground truth; empty unless blur mode
  std::string depth;         // 1-channel metric depth along the camera axis
  std::string flow_fwd;      // 2-channel pixels/frame; empty on the last frame
  std::string flow_bwd;      // empty on the first frame
  std::string mask;          // 1-channel, 1 = dynamic
  Pose pose;
  bool held_out = false;
};

struct SceneManifest {
  Camera camera;  // shared intrinsics + bounds; per-frame poses live in frames
  float fps = 0.0f;
  std::vector<FrameRecord> frames;
  std::string base_dir;  // directory of the manifest file; paths are relative

  std::string resolve(const std::string& rel) const;
  NdcSpace ndc() const {
    return {camera.fx, camera.fy, static_cast<float>(camera.width),
            static_cast<float>(camera.height), camera.near};
  }
};

/// Parses and eagerly validates a manifest: contiguous frame indices,
/// boundary flow rules, file existence, and raster shapes matching the
/// camera. Errors name the frame and field.
SceneManifest load_manifest(const std::string& path);
void save_manifest(const SceneManifest& manifest, const std::string& path);

}  // namespace flownerf
