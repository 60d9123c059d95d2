// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#include "flownerf/synth.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "flownerf/errors.hpp"
#include "flownerf/rng.hpp"

namespace flownerf {

namespace {

using nlohmann::json;
constexpr float kTwoPi = 6.28318530717958647692f;

void read_vec3(const json& j, const char* key, Vec3* out, const std::string& where) {
  if (!j.contains(key)) throw FormatError(where + ": missing field '" + key + "'");
  const json& a = j.at(key);
  if (!a.is_array() || a.size() != 3)
    throw FormatError(where + ": field '" + key + "' must be 3 numbers");
  out->x = a[0].get<float>();
  out->y = a[1].get<float>();
  out->z = a[2].get<float>();
}

SynthTexture parse_texture(const json& j, const std::string& where) {
  SynthTexture t;
  if (!j.is_object()) throw FormatError(where + ": texture must be an object");
  auto read3 = [&](const char* key, float* out) {
    if (!j.contains(key)) return;
    const json& a = j.at(key);
    if (!a.is_array() || a.size() != 3)
      throw FormatError(where + ": texture field '" + key + "' must be 3 numbers");
    for (int i = 0; i < 3; ++i) out[i] = a[static_cast<size_t>(i)].get<float>();
  };
  read3("base", t.base);
  read3("amp", t.amp);
  read3("phase", t.phase);
  if (j.contains("freq")) {
    const json& a = j.at("freq");
    if (!a.is_array() || a.size() != 2)
      throw FormatError(where + ": texture field 'freq' must be 2 numbers");
    t.freq[0] = a[0].get<float>();
    t.freq[1] = a[1].get<float>();
  }
  return t;
}

struct Hit {
  bool valid = false;
  float s = 0.0f;  // ray parameter
  Vec3 point;
  float rgb[3] = {0, 0, 0};
  int object = -1;  // index into spec.objects, -1 for background
};

// Object state at a frame; velocity applied per frame index.
Vec3 object_center(const SynthObject& obj, int frame) {
  return obj.center + obj.velocity * static_cast<float>(frame);
}

Hit trace(const SceneSpec& spec, const Ray& ray, int frame) {
  Hit best;
  auto consider = [&](float s, const Vec3& p, int object) {
    if (s <= 1e-6f) return false;
    if (best.valid && s >= best.s) return false;
    best.valid = true;
    best.s = s;
    best.point = p;
    best.object = object;
    return true;
  };

  for (const SynthPlane& plane : spec.background) {
    const float z = -plane.depth;
    if (std::fabs(ray.dir.z) < 1e-12f) continue;
    const float s = (z - ray.origin.z) / ray.dir.z;
    const Vec3 p = ray.origin + ray.dir * s;
    if (plane.bounded &&
        (std::fabs(p.x - plane.center[0]) > plane.size[0] * 0.5f ||
         std::fabs(p.y - plane.center[1]) > plane.size[1] * 0.5f))
      continue;
    if (consider(s, p, -1)) plane.texture.sample(p.x, p.y, best.rgb);
  }

  for (size_t oi = 0; oi < spec.objects.size(); ++oi) {
    const SynthObject& obj = spec.objects[oi];
    const Vec3 c = object_center(obj, frame);
    if (obj.kind == SynthObject::Kind::kRect) {
      if (std::fabs(ray.dir.z) < 1e-12f) continue;
      const float s = (c.z - ray.origin.z) / ray.dir.z;
      const Vec3 p = ray.origin + ray.dir * s;
      if (std::fabs(p.x - c.x) > obj.size[0] * 0.5f ||
          std::fabs(p.y - c.y) > obj.size[1] * 0.5f)
        continue;
      if (consider(s, p, static_cast<int>(oi)))
        obj.texture.sample(p.x - c.x, p.y - c.y, best.rgb);
    } else {
      const Vec3 oc = ray.origin - c;
      const float a = ray.dir.dot(ray.dir);
      const float b = 2.0f * oc.dot(ray.dir);
      const float cc = oc.dot(oc) - obj.radius * obj.radius;
      const float disc = b * b - 4 * a * cc;
      if (disc < 0) continue;
      const float s = (-b - std::sqrt(disc)) / (2 * a);
      const Vec3 p = ray.origin + ray.dir * s;
      if (consider(s, p, static_cast<int>(oi)))
        obj.texture.sample(p.x - c.x, p.y - c.y, best.rgb);
    }
  }
  return best;
}

}  // namespace

void SynthTexture::sample(float a, float b, float* rgb) const {
  const float arg = kTwoPi * (freq[0] * a + freq[1] * b);
  for (int c = 0; c < 3; ++c) {
    const float v = base[c] + amp[c] * std::sin(arg + phase[c]);
    rgb[c] = std::min(1.0f, std::max(0.0f, v));
  }
}

SceneSpec parse_scene_spec(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open scene spec " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }

  SceneSpec s;
  try {
    s.name = j.value("name", "scene");
    s.width = j.at("width").get<int>();
    s.height = j.at("height").get<int>();
    s.frame_count = j.at("frames").get<int>();
    s.fps = j.value("fps", 8.0f);
    s.focal = j.at("focal").get<float>();
    s.near = j.at("near").get<float>();
    s.far = j.at("far").get<float>();
    s.seed = j.value("seed", 7u);
    if (s.width <= 0 || s.height <= 0)
      throw FormatError(path + ": field 'width'/'height' must be positive");
    if (s.frame_count < 1) throw FormatError(path + ": field 'frames' must be >= 1");
    if (!(s.near > 0 && s.near < s.far))
      throw FormatError(path + ": fields 'near'/'far' must satisfy 0 < near < far");

    const json& traj = j.at("trajectory");
    const std::string type = traj.at("type").get<std::string>();
    if (type == "linear") {
      s.trajectory = SceneSpec::Trajectory::kLinear;
      read_vec3(traj, "from", &s.traj_from, path + ": trajectory");
      read_vec3(traj, "to", &s.traj_to, path + ": trajectory");
    } else if (type == "orbit") {
      s.trajectory = SceneSpec::Trajectory::kOrbit;
      s.orbit_radius = traj.at("radius").get<float>();
      s.orbit_angle_deg = traj.at("angle_deg").get<float>();
      read_vec3(traj, "target", &s.orbit_target, path + ": trajectory");
    } else {
      throw FormatError(path + ": trajectory type '" + type +
                        "' is not 'linear' or 'orbit'");
    }

    if (!j.contains("background") || j.at("background").empty())
      throw FormatError(path + ": field 'background' needs at least one plane");
    for (const json& p : j.at("background")) {
      SynthPlane plane;
      plane.depth = p.at("depth").get<float>();
      if (plane.depth <= 0)
        throw FormatError(path + ": background field 'depth' must be positive");
      if (p.contains("rect")) {
        const json& r = p.at("rect");
        if (!r.is_array() || r.size() != 4)
          throw FormatError(path + ": background field 'rect' must be [cx,cy,w,h]");
        plane.bounded = true;
        plane.center[0] = r[0].get<float>();
        plane.center[1] = r[1].get<float>();
        plane.size[0] = r[2].get<float>();
        plane.size[1] = r[3].get<float>();
      }
      plane.texture = parse_texture(p.at("texture"), path + ": background");
      s.background.push_back(plane);
    }
    // the rearmost plane must be unbounded so every ray hits something
    bool has_full = false;
    for (const SynthPlane& p : s.background) has_full |= !p.bounded;
    if (!has_full)
      throw FormatError(path + ": field 'background' needs an unbounded plane");

    if (j.contains("objects")) {
      for (const json& o : j.at("objects")) {
        SynthObject obj;
        const std::string kind = o.at("type").get<std::string>();
        obj.name = o.value("name", "object" + std::to_string(s.objects.size()));
        const std::string where = path + ": object '" + obj.name + "'";
        if (kind == "rect") {
          obj.kind = SynthObject::Kind::kRect;
          const json& sz = o.at("size");
          if (!sz.is_array() || sz.size() != 2)
            throw FormatError(where + ": field 'size' must be 2 numbers");
          obj.size[0] = sz[0].get<float>();
          obj.size[1] = sz[1].get<float>();
        } else if (kind == "sphere") {
          obj.kind = SynthObject::Kind::kSphere;
          obj.radius = o.at("radius").get<float>();
        } else {
          throw FormatError(where + ": type '" + kind + "' is not 'rect' or 'sphere'");
        }
        read_vec3(o, "center", &obj.center, where);
        read_vec3(o, "velocity", &obj.velocity, where);
        obj.texture = parse_texture(o.at("texture"), where);
        s.objects.push_back(std::move(obj));
      }
    }

    if (j.contains("blur")) {
      s.blur_j = j.at("blur").at("j").get<int>();
      s.blur_amplitude = j.at("blur").at("amplitude").get<float>();
      if (s.blur_j != 1 && s.blur_j != 2 && s.blur_j != 4)
        throw FormatError(path + ": blur field 'j' must be 1, 2 or 4");
    }
    if (j.contains("held_out"))
      for (const json& h : j.at("held_out")) {
        const int idx = h.get<int>();
        if (idx < 0 || idx >= s.frame_count)
          throw FormatError(path + ": held_out index " + std::to_string(idx) +
                            " outside 0.." + std::to_string(s.frame_count - 1));
        s.held_out.push_back(idx);
      }
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  return s;
}

Pose trajectory_pose(const SceneSpec& spec, int frame) {
  const float a = spec.frame_count > 1
                      ? static_cast<float>(frame) / static_cast<float>(spec.frame_count - 1)
                      : 0.0f;
  Pose p;
  if (spec.trajectory == SceneSpec::Trajectory::kLinear) {
    p.translation = spec.traj_from + (spec.traj_to - spec.traj_from) * a;
    return p;
  }
  const float ang = (a - 0.5f) * spec.orbit_angle_deg * kTwoPi / 360.0f;
  const Vec3 pos = spec.orbit_target +
                   Vec3{std::sin(ang), 0.0f, std::cos(ang)} * spec.orbit_radius;
  const Vec3 z = (pos - spec.orbit_target).normalized();
  const Vec3 x = Vec3{0, 1, 0}.cross(z).normalized();
  const Vec3 y = z.cross(x);
  p.rotation.m = {x.x, y.x, z.x, x.y, y.y, z.y, x.z, y.z, z.z};
  p.translation = pos;
  return p;
}

Camera camera_for_frame(const SceneSpec& spec, int frame) {
  Camera cam;
  cam.fx = cam.fy = spec.focal;
  cam.cx = static_cast<float>(spec.width) * 0.5f;
  cam.cy = static_cast<float>(spec.height) * 0.5f;
  cam.width = spec.width;
  cam.height = spec.height;
  cam.near = spec.near;
  cam.far = spec.far;
  cam.pose = trajectory_pose(spec, frame);
  return cam;
}

Vec3 blur_jitter(const SceneSpec& spec, int frame, int j) {
  if (spec.blur_j <= 1 || spec.blur_amplitude <= 0) return {};
  CounterRng rng{spec.seed};
  const float theta =
      rng.uniform(CounterRng::kInit, 0xb1u, static_cast<std::uint64_t>(frame)) * kTwoPi;
  const Vec3 dir{std::cos(theta), std::sin(theta), 0.0f};
  const Vec3 orth{-std::sin(theta), std::cos(theta), 0.0f};
  switch (spec.blur_j) {
    case 2:
      return dir * (j == 0 ? spec.blur_amplitude : -spec.blur_amplitude);
    default: {  // 4: two orthogonal pairs
      const Vec3 axis = (j < 2) ? dir : orth;
      return axis * (j % 2 == 0 ? spec.blur_amplitude : -spec.blur_amplitude);
    }
  }
}

FloatGrid render_synth_image(const SceneSpec& spec, int frame, const Vec3& origin_jitter) {
  Camera cam = camera_for_frame(spec, frame);
  cam.pose.translation = cam.pose.translation + origin_jitter;
  FloatGrid img = FloatGrid::make(spec.width, spec.height, 3);
  for (int v = 0; v < spec.height; ++v)
    for (int u = 0; u < spec.width; ++u) {
      const Ray ray = ray_through(cam, static_cast<float>(u) + 0.5f,
                                  static_cast<float>(v) + 0.5f, frame);
      const Hit hit = trace(spec, ray, frame);
      for (int c = 0; c < 3; ++c) img.at(u, v, c) = hit.valid ? hit.rgb[c] : 0.0f;
    }
  return img;
}

SceneManifest synth_scene(const SceneSpec& spec, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  SceneManifest manifest;
  manifest.camera = camera_for_frame(spec, 0);
  manifest.fps = spec.fps;
  manifest.base_dir = out_dir;

  std::vector<bool> object_seen(spec.objects.size(), false);

  auto frame_name = [](const char* base, int i, const char* ext) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s_%03d.%s", base, i, ext);
    return std::string(buf);
  };

  for (int i = 0; i < spec.frame_count; ++i) {
    const Camera cam = camera_for_frame(spec, i);
    FrameRecord rec;
    rec.index = i;
    rec.pose = cam.pose;
    rec.held_out = std::find(spec.held_out.begin(), spec.held_out.end(), i) !=
                   spec.held_out.end();

    FloatGrid depth = FloatGrid::make(spec.width, spec.height, 1);
    FloatGrid mask = FloatGrid::make(spec.width, spec.height, 1);
    FloatGrid flow_fwd = FloatGrid::make(spec.width, spec.height, 2);
    FloatGrid flow_bwd = FloatGrid::make(spec.width, spec.height, 2);
    const Mat3 world_to_cam = cam.pose.rotation.transposed();

    for (int v = 0; v < spec.height; ++v)
      for (int u = 0; u < spec.width; ++u) {
        const float uc = static_cast<float>(u) + 0.5f;
        const float vc = static_cast<float>(v) + 0.5f;
        const Ray ray = ray_through(cam, uc, vc, i);
        const Hit hit = trace(spec, ray, i);
        if (!hit.valid) continue;
        const Vec3 pc = world_to_cam * (hit.point - cam.pose.translation);
        depth.at(u, v) = -pc.z;
        if (hit.object >= 0) {
          mask.at(u, v) = 1.0f;
          object_seen[static_cast<size_t>(hit.object)] = true;
        }
        const Vec3 vel = hit.object >= 0
                             ? spec.objects[static_cast<size_t>(hit.object)].velocity
                             : Vec3{};
        if (i + 1 < spec.frame_count) {
          const Camera next = camera_for_frame(spec, i + 1);
          float pu, pv;
          if (project_point(next, hit.point + vel, &pu, &pv)) {
            flow_fwd.at(u, v, 0) = pu - uc;
            flow_fwd.at(u, v, 1) = pv - vc;
          }
        }
        if (i > 0) {
          const Camera prev = camera_for_frame(spec, i - 1);
          float pu, pv;
          if (project_point(prev, hit.point - vel, &pu, &pv)) {
            flow_bwd.at(u, v, 0) = pu - uc;
            flow_bwd.at(u, v, 1) = pv - vc;
          }
        }
      }

    // observation: mean of blur_j jittered-origin renders
    FloatGrid observed;
    if (spec.blur_j > 1) {
      observed = FloatGrid::make(spec.width, spec.height, 3);
      for (int jj = 0; jj < spec.blur_j; ++jj) {
        const FloatGrid sharp = render_synth_image(spec, i, blur_jitter(spec, i, jj));
        for (size_t p = 0; p < observed.data.size(); ++p)
          observed.data[p] += sharp.data[p] / static_cast<float>(spec.blur_j);
      }
      const FloatGrid sharp = render_synth_image(spec, i);
      rec.sharp_image = frame_name("sharp", i, "ppm");
      save_image(sharp, manifest.resolve(rec.sharp_image));
    } else {
      observed = render_synth_image(spec, i);
    }

    rec.image = frame_name("frame", i, "ppm");
    save_image(observed, manifest.resolve(rec.image));
    rec.depth = frame_name("depth", i, "fgrd");
    save_float_grid(depth, manifest.resolve(rec.depth));
    rec.mask = frame_name("mask", i, "fgrd");
    save_float_grid(mask, manifest.resolve(rec.mask));
    if (i + 1 < spec.frame_count) {
      rec.flow_fwd = frame_name("flow_fwd", i, "fgrd");
      save_float_grid(flow_fwd, manifest.resolve(rec.flow_fwd));
    }
    if (i > 0) {
      rec.flow_bwd = frame_name("flow_bwd", i, "fgrd");
      save_float_grid(flow_bwd, manifest.resolve(rec.flow_bwd));
    }
    manifest.frames.push_back(std::move(rec));
  }

  for (size_t oi = 0; oi < spec.objects.size(); ++oi)
    if (!object_seen[oi])
      throw ConfigError("synth_scene: object '" + spec.objects[oi].name +
                        "' never enters the view frustum");

  save_manifest(manifest, (fs::path(out_dir) / "manifest.json").string());
  return manifest;
}

}  // namespace flownerf
