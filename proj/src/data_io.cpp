// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#include "flownerf/data_io.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "flownerf/errors.hpp"

namespace flownerf {

namespace {

using nlohmann::json;

void write_bytes(std::ofstream& f, const void* p, size_t n) {
  f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_bytes(std::ifstream& f, void* p, size_t n, const std::string& path,
                size_t offset) {
  f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(f.gcount()) != n)
    throw FormatError(path + ": truncated at byte offset " +
                      std::to_string(offset + static_cast<size_t>(f.gcount())));
}

constexpr std::uint16_t kGridVersion = 1;

}  // namespace

FloatGrid load_float_grid(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  char magic[4];
  read_bytes(f, magic, 4, path, 0);
  if (std::memcmp(magic, "FGRD", 4) != 0)
    throw FormatError(path + ": bad magic at byte offset 0");
  std::uint16_t version = 0;
  read_bytes(f, &version, 2, path, 4);
  if (version != kGridVersion)
    throw FormatError(path + ": unsupported grid version " + std::to_string(version));
  std::uint32_t dims[3];
  read_bytes(f, dims, 12, path, 6);
  if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0)
    throw FormatError(path + ": zero-sized grid header");
  FloatGrid g;
  g.width = static_cast<int>(dims[0]);
  g.height = static_cast<int>(dims[1]);
  g.channels = static_cast<int>(dims[2]);
  const size_t n = static_cast<size_t>(g.width) * g.height * g.channels;
  g.data.resize(n);
  read_bytes(f, g.data.data(), n * 4, path, 18);
  return g;
}

void save_float_grid(const FloatGrid& grid, const std::string& path) {
  if (grid.width <= 0 || grid.height <= 0 || grid.channels <= 0)
    throw FormatError("save_float_grid: zero-sized grid");
  if (grid.data.size() !=
      static_cast<size_t>(grid.width) * grid.height * grid.channels)
    throw ShapeError("save_float_grid: payload does not match header");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  write_bytes(f, "FGRD", 4);
  write_bytes(f, &kGridVersion, 2);
  const std::uint32_t dims[3] = {static_cast<std::uint32_t>(grid.width),
                                 static_cast<std::uint32_t>(grid.height),
                                 static_cast<std::uint32_t>(grid.channels)};
  write_bytes(f, dims, 12);
  write_bytes(f, grid.data.data(), grid.data.size() * 4);
  if (!f) throw IoError("write failed for " + path);
}

FloatGrid load_image(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::string magic;
  f >> magic;
  if (magic != "P6") throw FormatError(path + ": not a binary portable pixmap");
  int w = 0, h = 0, maxval = 0;
  f >> w >> h >> maxval;
  if (!f || w <= 0 || h <= 0) throw FormatError(path + ": bad pixmap header");
  if (maxval != 255)
    throw FormatError(path + ": unsupported max value " + std::to_string(maxval));
  f.get();  // single whitespace after the header
  std::vector<std::uint8_t> bytes(static_cast<size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(bytes.data()),
         static_cast<std::streamsize>(bytes.size()));
  if (static_cast<size_t>(f.gcount()) != bytes.size())
    throw FormatError(path + ": truncated pixel data");
  FloatGrid g = FloatGrid::make(w, h, 3);
  for (size_t i = 0; i < bytes.size(); ++i)
    g.data[i] = static_cast<float>(bytes[i]) / 255.0f;
  return g;
}

void save_image(const FloatGrid& image, const std::string& path) {
  if (image.channels != 3)
    throw ShapeError("save_image: expected 3 channels, got " +
                     std::to_string(image.channels));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << "P6\n" << image.width << " " << image.height << "\n255\n";
  std::vector<std::uint8_t> bytes(image.data.size());
  for (size_t i = 0; i < image.data.size(); ++i) {
    const float v = std::min(1.0f, std::max(0.0f, image.data[i]));
    bytes[i] = static_cast<std::uint8_t>(std::floor(v * 255.0f + 0.5f));
  }
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for " + path);
}

// ---------------------------------------------------------------------------
// Manifest

std::string SceneManifest::resolve(const std::string& rel) const {
  if (rel.empty()) return rel;
  return (std::filesystem::path(base_dir) / rel).string();
}

namespace {

Pose pose_from_json(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 12)
    throw FormatError(where + ": pose must be 12 numbers (row-major 3x4)");
  Pose p;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c)
      p.rotation.m[static_cast<size_t>(r * 3 + c)] = j[static_cast<size_t>(r * 4 + c)].get<float>();
  }
  p.translation = {j[3].get<float>(), j[7].get<float>(), j[11].get<float>()};
  return p;
}

json pose_to_json(const Pose& p) {
  json j = json::array();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) j.push_back(p.rotation.m[static_cast<size_t>(r * 3 + c)]);
    j.push_back(r == 0 ? p.translation.x : (r == 1 ? p.translation.y : p.translation.z));
  }
  return j;
}

void check_grid_file(const SceneManifest& m, const std::string& rel, int channels,
                     bool is_image, const std::string& where) {
  const std::string path = m.resolve(rel);
  if (!std::filesystem::exists(path))
    throw IoError(where + ": missing file " + path);
  const FloatGrid g = is_image ? load_image(path) : load_float_grid(path);
  if (g.width != m.camera.width || g.height != m.camera.height || g.channels != channels)
    throw FormatError(where + ": " + rel + " is " + std::to_string(g.width) + "x" +
                      std::to_string(g.height) + "x" + std::to_string(g.channels) +
                      ", expected " + std::to_string(m.camera.width) + "x" +
                      std::to_string(m.camera.height) + "x" + std::to_string(channels));
}

}  // namespace

SceneManifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open manifest " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }

  SceneManifest m;
  m.base_dir = std::filesystem::path(path).parent_path().string();
  try {
    const json& cam = j.at("camera");
    m.camera.fx = cam.at("fx").get<float>();
    m.camera.fy = cam.at("fy").get<float>();
    m.camera.cx = cam.at("cx").get<float>();
    m.camera.cy = cam.at("cy").get<float>();
    m.camera.width = cam.at("width").get<int>();
    m.camera.height = cam.at("height").get<int>();
    m.camera.near = j.at("near").get<float>();
    m.camera.far = j.at("far").get<float>();
    m.fps = j.value("fps", 0.0f);

    const json& frames = j.at("frames");
    const int n = static_cast<int>(frames.size());
    for (int i = 0; i < n; ++i) {
      const json& fr = frames[static_cast<size_t>(i)];
      const std::string where = path + ": frame " + std::to_string(i);
      FrameRecord rec;
      rec.index = fr.at("index").get<int>();
      if (rec.index != i)
        throw FormatError(where + ": indices must be contiguous from 0, got " +
                          std::to_string(rec.index));
      rec.image = fr.at("image").get<std::string>();
      rec.sharp_image = fr.value("sharp_image", "");
      rec.depth = fr.at("depth").get<std::string>();
      rec.flow_fwd = fr.value("flow_fwd", "");
      rec.flow_bwd = fr.value("flow_bwd", "");
      rec.mask = fr.at("mask").get<std::string>();
      rec.pose = pose_from_json(fr.at("pose"), where);
      rec.held_out = fr.value("held_out", false);

      if (rec.flow_fwd.empty() && i != n - 1)
        throw FormatError(where + ": flow_fwd may be absent only on the last frame");
      if (!rec.flow_fwd.empty() && i == n - 1)
        throw FormatError(where + ": the last frame must not have flow_fwd");
      if (rec.flow_bwd.empty() && i != 0)
        throw FormatError(where + ": flow_bwd may be absent only on the first frame");
      if (!rec.flow_bwd.empty() && i == 0)
        throw FormatError(where + ": the first frame must not have flow_bwd");
      m.frames.push_back(std::move(rec));
    }
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }

  m.camera.pose = m.frames.empty() ? Pose{} : m.frames[0].pose;
  m.camera.validate();
  for (const FrameRecord& rec : m.frames) {
    const std::string where = path + ": frame " + std::to_string(rec.index);
    check_grid_file(m, rec.image, 3, true, where + " image");
    if (!rec.sharp_image.empty())
      check_grid_file(m, rec.sharp_image, 3, true, where + " sharp_image");
    check_grid_file(m, rec.depth, 1, false, where + " depth");
    if (!rec.flow_fwd.empty()) check_grid_file(m, rec.flow_fwd, 2, false, where + " flow_fwd");
    if (!rec.flow_bwd.empty()) check_grid_file(m, rec.flow_bwd, 2, false, where + " flow_bwd");
    check_grid_file(m, rec.mask, 1, false, where + " mask");
  }
  return m;
}

void save_manifest(const SceneManifest& m, const std::string& path) {
  json j;
  j["camera"] = {{"fx", m.camera.fx}, {"fy", m.camera.fy}, {"cx", m.camera.cx},
                 {"cy", m.camera.cy}, {"width", m.camera.width},
                 {"height", m.camera.height}};
  j["near"] = m.camera.near;
  j["far"] = m.camera.far;
  j["fps"] = m.fps;
  json frames = json::array();
  for (const FrameRecord& rec : m.frames) {
    json fr;
    fr["index"] = rec.index;
    fr["image"] = rec.image;
    if (!rec.sharp_image.empty()) fr["sharp_image"] = rec.sharp_image;
    fr["depth"] = rec.depth;
    if (!rec.flow_fwd.empty()) fr["flow_fwd"] = rec.flow_fwd;
    if (!rec.flow_bwd.empty()) fr["flow_bwd"] = rec.flow_bwd;
    fr["mask"] = rec.mask;
    fr["pose"] = pose_to_json(rec.pose);
    fr["held_out"] = rec.held_out;
    frames.push_back(std::move(fr));
  }
  j["frames"] = std::move(frames);
  std::ofstream f(path);
  if (!f) throw IoError("cannot write manifest " + path);
  f << j.dump(2) << "\n";
}

}  // namespace flownerf
