// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "flownerf/config.hpp"
#include "flownerf/errors.hpp"
#include "flownerf/metrics.hpp"
#include "flownerf/synth.hpp"
#include "flownerf/train.hpp"

namespace fs = std::filesystem;
using namespace flownerf;

namespace {

struct PoseSpec {
  bool explicit_matrix = false;
  Pose pose;
  float alpha = 0.0f;  // trajectory parameter when not explicit
};

PoseSpec parse_pose(const std::string& text) {
  std::vector<float> nums;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      nums.push_back(std::stof(tok));
    } catch (...) {
      throw ConfigError("--pose: cannot parse '" + tok + "' as a number");
    }
  }
  PoseSpec spec;
  if (nums.size() == 12) {
    spec.explicit_matrix = true;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        spec.pose.rotation.m[static_cast<size_t>(r * 3 + c)] = nums[static_cast<size_t>(r * 4 + c)];
    spec.pose.translation = {nums[3], nums[7], nums[11]};
  } else if (nums.size() == 1) {
    spec.alpha = nums[0];
    if (spec.alpha < 0.0f || spec.alpha > 1.0f)
      throw ConfigError("--pose: trajectory parameter must lie in [0,1]");
  } else {
    throw ConfigError("--pose: expected 12 numbers (row-major 3x4) or one "
                      "trajectory parameter in [0,1]");
  }
  return spec;
}

Pose pose_along_trajectory(const SceneData& scene, float alpha) {
  const int n = scene.frame_count();
  if (n == 1) return scene.poses[0];
  const float pos = alpha * static_cast<float>(n - 1);
  const int lo = std::min(n - 2, static_cast<int>(pos));
  return interpolate_pose(scene.poses[static_cast<size_t>(lo)],
                          scene.poses[static_cast<size_t>(lo) + 1],
                          pos - static_cast<float>(lo));
}

RenderBranch parse_branch(const std::string& name) {
  if (name == "full") return RenderBranch::kFull;
  if (name == "static") return RenderBranch::kStatic;
  if (name == "dynamic") return RenderBranch::kDynamic;
  throw ConfigError("--branch must be one of full, static, dynamic");
}

void write_loss_line(std::ofstream& log, int step, const LossBreakdown& v) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "%d\t%.6e\t%.8e\t%.8e\t%.8e\t%.8e\t%.8e\t%.8e\t%.8e\t%.8e\t%.8e\n",
                step, static_cast<double>(v.lr), v.total, v.cb, v.pho, v.ali, v.geo,
                v.z, v.data, v.dy, v.ds);
  log << buf;
}

int cmd_synth(const std::string& spec_path, const std::string& out_dir) {
  const SceneSpec spec = parse_scene_spec(spec_path);
  synth_scene(spec, out_dir);
  std::cout << (fs::path(out_dir) / "manifest.json").string() << "\n";
  return 0;
}

int cmd_train(RunConfig cfg, const std::string& resume) {
  fs::create_directories(cfg.out);
  SceneData scene = SceneData::load(load_manifest(cfg.manifest));
  Trainer trainer(std::move(scene), cfg.train);

  const std::string log_path = (fs::path(cfg.out) / "loss_log.tsv").string();
  std::ofstream log;
  if (!resume.empty()) {
    trainer.load_checkpoint(resume);
    log.open(log_path, std::ios::app);
  } else {
    log.open(log_path);
    log << "step\tlr\ttotal\tcb\tpho\tali\tgeo\tz\tdata\tdy\tds\n";
  }
  if (!log) throw IoError("cannot write " + log_path);

  const auto t0 = std::chrono::steady_clock::now();
  for (int s = trainer.current_step(); s < cfg.train.total_steps; ++s) {
    const LossBreakdown v = trainer.step(s);
    write_loss_line(log, s, v);
    if (cfg.train.checkpoint_interval > 0 && (s + 1) % cfg.train.checkpoint_interval == 0 &&
        s + 1 < cfg.train.total_steps) {
      char name[64];
      std::snprintf(name, sizeof(name), "checkpoint_%06d.nrft", s + 1);
      trainer.save_checkpoint((fs::path(cfg.out) / name).string());
    }
    if ((s + 1) % 500 == 0 || s + 1 == cfg.train.total_steps) {
      const double dt = std::chrono::duration<double>(
                            std::chrono::steady_clock::now() - t0).count();
      std::printf("step %d/%d total %.5f cb %.5f lr %.2e (%.1fs)\n", s + 1,
                  cfg.train.total_steps, v.total, v.cb, static_cast<double>(v.lr), dt);
      std::fflush(stdout);
      log.flush();
    }
  }
  trainer.save_checkpoint((fs::path(cfg.out) / "checkpoint_final.nrft").string());
  std::cout << (fs::path(cfg.out) / "checkpoint_final.nrft").string() << "\n";
  return 0;
}

int cmd_render(RunConfig cfg, const std::string& checkpoint, const std::string& pose_text,
               float time, const std::string& sweep, int sweep_frames,
               const std::string& branch_name, const std::string& out_dir) {
  if (time < 0.0f || time > 1.0f)
    throw ConfigError("--time must lie in [0,1], got " + std::to_string(time));
  SceneData scene = SceneData::load(load_manifest(cfg.manifest));
  Trainer trainer(std::move(scene), cfg.train);
  trainer.load_checkpoint(checkpoint);
  const RenderBranch branch = parse_branch(branch_name);
  fs::create_directories(out_dir);

  const PoseSpec pose_spec =
      parse_pose(pose_text.empty() ? std::string("0") : pose_text);
  auto pose_at = [&](float alpha) {
    return pose_spec.explicit_matrix ? pose_spec.pose
                                     : pose_along_trajectory(trainer.scene(), alpha);
  };

  std::vector<std::pair<Pose, float>> views;
  if (sweep.empty()) {
    views.emplace_back(pose_at(pose_spec.alpha), time);
  } else if (sweep == "camera") {
    for (int i = 0; i < sweep_frames; ++i)
      views.emplace_back(
          pose_at(sweep_frames > 1 ? static_cast<float>(i) / (sweep_frames - 1) : 0.0f),
          time);
  } else if (sweep == "time") {
    for (int i = 0; i < sweep_frames; ++i)
      views.emplace_back(pose_at(pose_spec.alpha),
                         sweep_frames > 1 ? static_cast<float>(i) / (sweep_frames - 1)
                                          : time);
  } else if (sweep == "joint") {
    for (int i = 0; i < sweep_frames; ++i) {
      const float a = sweep_frames > 1 ? static_cast<float>(i) / (sweep_frames - 1) : 0.0f;
      views.emplace_back(pose_at(a), a);
    }
  } else {
    throw ConfigError("--sweep must be one of camera, time, joint");
  }

  for (size_t i = 0; i < views.size(); ++i) {
    const FloatGrid img = trainer.render_image(views[i].first, views[i].second, branch);
    char name[64];
    std::snprintf(name, sizeof(name), "render_%03d.ppm", static_cast<int>(i));
    save_image(img, (fs::path(out_dir) / name).string());
  }
  std::cout << out_dir << "\n";
  return 0;
}

int cmd_eval(RunConfig cfg, const std::string& checkpoint, const std::string& out_dir) {
  SceneData scene = SceneData::load(load_manifest(cfg.manifest));
  if (scene.holdout_frames.empty())
    throw ConfigError("eval: the manifest flags no held-out frames");
  Trainer trainer(std::move(scene), cfg.train);
  trainer.load_checkpoint(checkpoint);
  fs::create_directories(out_dir);

  const SceneData& s = trainer.scene();
  std::vector<MetricReport> reports;
  double psnr_sum = 0, ssim_sum = 0;
  for (int frame : s.holdout_frames) {
    const FloatGrid rendered = trainer.render_image(
        s.poses[static_cast<size_t>(frame)], s.normalized_time(frame));
    const FloatGrid& reference = s.sharp_images[static_cast<size_t>(frame)].width > 0
                                     ? s.sharp_images[static_cast<size_t>(frame)]
                                     : s.images[static_cast<size_t>(frame)];
    reports.push_back(evaluate_pair(rendered, reference,
                                    s.masks[static_cast<size_t>(frame)], frame));
    psnr_sum += reports.back().full.psnr;
    ssim_sum += reports.back().full.ssim;
    char name[64];
    std::snprintf(name, sizeof(name), "eval_%03d.ppm", frame);
    save_image(rendered, (fs::path(out_dir) / name).string());
  }

  const std::string table = format_metric_table(reports);
  std::ofstream f((fs::path(out_dir) / "metrics.tsv").string());
  f << table;
  f << "aggregate\t" << psnr_sum / static_cast<double>(reports.size()) << "\t"
    << ssim_sum / static_cast<double>(reports.size()) << "\t-\t-\t-\t-\t-\n";
  std::cout << table;
  std::printf("aggregate psnr %.4f ssim %.4f over %zu held-out frames\n",
              psnr_sum / static_cast<double>(reports.size()),
              ssim_sum / static_cast<double>(reports.size()), reports.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic-scene neural radiance fields with scene flow and a "
               "learned deblur kernel"};
  app.require_subcommand(1);

  std::string spec_path, out_dir, config_path, checkpoint, resume;
  std::string pose_text, sweep, branch = "full";
  float time = 0.0f;
  int sweep_frames = 10;
  std::optional<std::uint64_t> seed_override;
  std::optional<int> steps_override;
  bool no_dsk = false;

  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic scene");
  synth->add_option("spec", spec_path, "scene spec JSON")->required();
  synth->add_option("--out", out_dir, "output directory")->required();

  CLI::App* train = app.add_subcommand("train", "Train on a scene");
  train->add_option("--config", config_path, "run config JSON")->required();
  train->add_option("--seed", seed_override, "override the config seed");
  train->add_option("--steps", steps_override, "override total steps");
  train->add_option("--out", out_dir, "override the output directory");
  train->add_option("--resume", resume, "checkpoint to resume from");
  train->add_flag("--no-dsk", no_dsk, "disable the blur kernel");

  CLI::App* render = app.add_subcommand("render", "Render novel space-time views");
  render->add_option("--config", config_path, "run config JSON")->required();
  render->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
  render->add_option("--pose", pose_text,
                     "12 numbers (3x4) or a trajectory parameter in [0,1]");
  render->add_option("--time", time, "normalized time in [0,1]");
  render->add_option("--sweep", sweep, "sweep mode: camera, time or joint");
  render->add_option("--sweep-frames", sweep_frames, "frames per sweep");
  render->add_option("--branch", branch, "full, static or dynamic");
  render->add_option("--out", out_dir, "output directory")->required();

  CLI::App* eval = app.add_subcommand("eval", "Evaluate held-out views");
  eval->add_option("--config", config_path, "run config JSON")->required();
  eval->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
  eval->add_option("--out", out_dir, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(spec_path, out_dir);

    RunConfig cfg = load_run_config(config_path);
    if (seed_override) cfg.train.seed = *seed_override;
    if (steps_override) cfg.train.total_steps = *steps_override;
    if (no_dsk) cfg.train.dsk_enabled = false;
    if (!out_dir.empty() && train->parsed()) cfg.out = out_dir;

    if (train->parsed()) return cmd_train(cfg, resume);
    if (render->parsed())
      return cmd_render(cfg, checkpoint, pose_text, time, sweep, sweep_frames,
                        branch, out_dir);
    if (eval->parsed()) return cmd_eval(cfg, checkpoint, out_dir);
  } catch (const Error& e) {
    std::cerr << "error category=" << e.category() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error category=internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
