// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#include "flownerf/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "flownerf/errors.hpp"

namespace flownerf {

void TrainConfig::validate() const {
  if (ray_batch <= 0) throw ConfigError("train: ray_batch must be positive");
  if (!(lr_end < lr_start))
    throw ConfigError("train: lr_end must be below lr_start");
  if (total_steps < 0) throw ConfigError("train: total_steps must be >= 0");
  if (loss.eps_window < 1) throw ConfigError("train: eps_window must be >= 1");
  if (loss.beta_data < 0 || loss.beta_ali < 0 || loss.beta_dy < 0 ||
      loss.beta_ds < 0 || loss.beta_z < 0 || loss.lambda_o < 0)
    throw ConfigError("train: loss weights must be non-negative");
  if (sampler.k_coarse < 2) throw ConfigError("train: k_coarse must be >= 2");
  if (sampler.k_fine < 0) throw ConfigError("train: k_fine must be >= 0");
  canonical_offsets(kernel.n_positions);
}

float lr_schedule(int step, const TrainConfig& cfg) {
  if (cfg.total_steps <= 0) return cfg.lr_start;
  const double frac = static_cast<double>(step) / static_cast<double>(cfg.total_steps);
  return static_cast<float>(
      cfg.lr_start * std::pow(static_cast<double>(cfg.lr_end) / cfg.lr_start, frac));
}

void AdamState::update(ParamStore& params, float lr) {
  ++step_count;
  const double bc1 = 1.0 - std::pow(static_cast<double>(beta1), step_count);
  const double bc2 = 1.0 - std::pow(static_cast<double>(beta2), step_count);
  for (auto& [name, p] : params.all()) {
    const size_t n = static_cast<size_t>(p.numel());
    auto& pm = m[name];
    auto& pv = v[name];
    if (pm.size() != n) pm.assign(n, 0.0f);
    if (pv.size() != n) pv.assign(n, 0.0f);
    const std::vector<float>& g = p.grad();
    float* data = p.mutable_data().data();
    for (size_t i = 0; i < n; ++i) {
      const float gi = g.empty() ? 0.0f : g[i];
      pm[i] = beta1 * pm[i] + (1.0f - beta1) * gi;
      pv[i] = beta2 * pv[i] + (1.0f - beta2) * gi * gi;
      const float mhat = pm[i] / static_cast<float>(bc1);
      const float vhat = pv[i] / static_cast<float>(bc2);
      data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
    p.node()->grad.clear();
  }
}

// ---------------------------------------------------------------------------
// Scene loading

SceneData SceneData::load(const SceneManifest& manifest) {
  SceneData s;
  s.manifest = manifest;
  s.ndc = manifest.ndc();
  const int n = static_cast<int>(manifest.frames.size());
  for (int i = 0; i < n; ++i) {
    const FrameRecord& fr = manifest.frames[static_cast<size_t>(i)];
    s.images.push_back(load_image(manifest.resolve(fr.image)));
    s.sharp_images.push_back(fr.sharp_image.empty()
                                 ? FloatGrid{}
                                 : load_image(manifest.resolve(fr.sharp_image)));
    s.depths.push_back(load_float_grid(manifest.resolve(fr.depth)));
    s.masks.push_back(load_float_grid(manifest.resolve(fr.mask)));
    s.flows_fwd.push_back(fr.flow_fwd.empty()
                              ? FloatGrid{}
                              : load_float_grid(manifest.resolve(fr.flow_fwd)));
    s.flows_bwd.push_back(fr.flow_bwd.empty()
                              ? FloatGrid{}
                              : load_float_grid(manifest.resolve(fr.flow_bwd)));
    s.poses.push_back(fr.pose);
    if (fr.held_out)
      s.holdout_frames.push_back(i);
    else
      s.train_frames.push_back(i);
  }
  if (s.train_frames.empty()) throw ConfigError("scene: every frame is held out");
  return s;
}

// ---------------------------------------------------------------------------
// Shared ray rendering

namespace {

struct BundleIn {
  Tensor o_ndc, d_ndc;  // [R,3]
  Tensor viewdir;       // [R,3]
  Tensor time;          // [R,1]
};

struct Rendered {
  FusedOut fused;
  Tensor ts, deltas;            // [R,K]
  Tensor positions;             // [R,K,3]
  Tensor sigma_s, sigma_d;      // [R,K]
  Tensor rgb_s, rgb_d;          // [R,K,3]
  Tensor flow_fwd, flow_bwd;    // [R,K,3]
  Tensor viewdir_samples;       // [R*K,3]
  Tensor expected_t;            // [R,1]
  int k = 0;
};

// Composite weights of the fused density, computed outside the tape; drives
// importance resampling only.
std::vector<float> fused_weights_data(const std::vector<float>& sigma_s,
                                      const std::vector<float>& sigma_d,
                                      const std::vector<float>& deltas, int r, int k) {
  std::vector<float> w(static_cast<size_t>(r) * k);
  for (int i = 0; i < r; ++i) {
    double tau_acc = 0.0;
    for (int j = 0; j < k; ++j) {
      const size_t idx = static_cast<size_t>(i) * k + j;
      const double tau = static_cast<double>(sigma_s[idx] + sigma_d[idx]) * deltas[idx];
      const double trans = std::exp(-tau_acc);
      w[idx] = static_cast<float>(trans * (1.0 - std::exp(-tau)));
      tau_acc += tau;
    }
  }
  return w;
}

struct FieldSamples {
  Tensor sigma_s, rgb_s, sigma_d, rgb_d, flow_fwd, flow_bwd;
};

FieldSamples eval_fields(const StaticField& sf, const DynamicField& df,
                         const Tensor& pos_flat, const Tensor& dir_flat,
                         const Tensor& time_flat, int r, int k) {
  const StaticFieldOutput st = sf.eval(pos_flat, dir_flat);
  const DynamicFieldOutput dy = df.eval(pos_flat, dir_flat, time_flat);
  FieldSamples out;
  out.sigma_s = reshape(st.sigma, {r, k});
  out.rgb_s = reshape(st.rgb, {r, k, 3});
  out.sigma_d = reshape(dy.sigma, {r, k});
  out.rgb_d = reshape(dy.rgb, {r, k, 3});
  out.flow_fwd = reshape(dy.flow_fwd, {r, k, 3});
  out.flow_bwd = reshape(dy.flow_bwd, {r, k, 3});
  return out;
}

Tensor positions_on_rays(const Tensor& o, const Tensor& d, const Tensor& ts, int r,
                         int k) {
  return reshape(o, {r, 1, 3}) + reshape(ts, {r, k, 1}) * reshape(d, {r, 1, 3});
}

Tensor per_sample(const Tensor& per_ray, int r, int k, int c) {
  return reshape(broadcast_to(reshape(per_ray, {r, 1, c}), {r, k, c}), {r * k, c});
}

Rendered render_bundle(const StaticField& sf, const DynamicField& df,
                       const BundleIn& in, const SamplerConfig& sc,
                       const CounterRng& rng, std::uint64_t step_key,
                       std::uint64_t id_base) {
  const int r = in.o_ndc.dim(0);
  const int kc = sc.k_coarse;

  std::vector<float> ts_c(static_cast<size_t>(r) * kc);
  for (int i = 0; i < r; ++i) {
    const std::vector<float> row = sample_ray(rng, step_key, id_base + static_cast<std::uint64_t>(i), kc);
    std::copy(row.begin(), row.end(), ts_c.begin() + static_cast<long>(i) * kc);
  }

  const Tensor ts_c_t = Tensor::from({r, kc}, ts_c);
  const Tensor pos_c = positions_on_rays(in.o_ndc, in.d_ndc, ts_c_t, r, kc);
  const Tensor dir_c = per_sample(in.viewdir, r, kc, 3);
  const Tensor time_c = per_sample(in.time, r, kc, 1);
  const FieldSamples coarse = eval_fields(sf, df, reshape(pos_c, {r * kc, 3}),
                                          dir_c, time_c, r, kc);

  Rendered out;
  if (sc.k_fine <= 0) {
    out.k = kc;
    out.ts = ts_c_t;
    out.positions = pos_c;
    out.sigma_s = coarse.sigma_s;
    out.rgb_s = coarse.rgb_s;
    out.sigma_d = coarse.sigma_d;
    out.rgb_d = coarse.rgb_d;
    out.flow_fwd = coarse.flow_fwd;
    out.flow_bwd = coarse.flow_bwd;
    out.viewdir_samples = dir_c;
  } else {
    const int k = kc + sc.k_fine;
    out.k = k;
    const std::vector<float> deltas_c = deltas_from_ts(ts_c, r, kc);
    const std::vector<float> wc = fused_weights_data(
        coarse.sigma_s.data(), coarse.sigma_d.data(), deltas_c, r, kc);

    std::vector<float> ts_m(static_cast<size_t>(r) * k);
    std::vector<float> ts_f(static_cast<size_t>(r) * sc.k_fine);
    std::vector<int> perm(static_cast<size_t>(r) * k);
    std::vector<std::pair<float, int>> row(static_cast<size_t>(k));
    for (int i = 0; i < r; ++i) {
      const std::vector<float> w_row(wc.begin() + static_cast<long>(i) * kc,
                                     wc.begin() + static_cast<long>(i + 1) * kc);
      const std::vector<float> coarse_row(ts_c.begin() + static_cast<long>(i) * kc,
                                          ts_c.begin() + static_cast<long>(i + 1) * kc);
      const std::vector<float> merged = hierarchical_resample(
          coarse_row, w_row, sc.k_fine, rng, step_key,
          id_base + static_cast<std::uint64_t>(i));
      // recover which merged entries are the coarse ones (both lists sorted)
      size_t ci = 0;
      std::vector<float> fine_only;
      fine_only.reserve(static_cast<size_t>(sc.k_fine));
      for (float t : merged) {
        if (ci < coarse_row.size() && t == coarse_row[ci]) {
          ++ci;
        } else {
          fine_only.push_back(t);
        }
      }
      for (int j = 0; j < kc; ++j) row[static_cast<size_t>(j)] = {coarse_row[static_cast<size_t>(j)], j};
      for (int j = 0; j < sc.k_fine; ++j)
        row[static_cast<size_t>(kc + j)] = {fine_only[static_cast<size_t>(j)], kc + j};
      std::sort(row.begin(), row.end());
      for (int j = 0; j < k; ++j) {
        ts_m[static_cast<size_t>(i) * k + j] = row[static_cast<size_t>(j)].first;
        perm[static_cast<size_t>(i) * k + j] = row[static_cast<size_t>(j)].second;
      }
      for (int j = 0; j < sc.k_fine; ++j)
        ts_f[static_cast<size_t>(i) * sc.k_fine + j] = fine_only[static_cast<size_t>(j)];
    }

    const Tensor ts_f_t = Tensor::from({r, sc.k_fine}, ts_f);
    const Tensor pos_f = positions_on_rays(in.o_ndc, in.d_ndc, ts_f_t, r, sc.k_fine);
    const FieldSamples fine = eval_fields(
        sf, df, reshape(pos_f, {r * sc.k_fine, 3}),
        per_sample(in.viewdir, r, sc.k_fine, 3),
        per_sample(in.time, r, sc.k_fine, 1), r, sc.k_fine);

    auto merge2 = [&](const Tensor& a, const Tensor& b) {
      return gather_samples(concat({a, b}, 1), perm, k);
    };
    out.ts = Tensor::from({r, k}, ts_m);
    out.positions = merge2(pos_c, pos_f);
    out.sigma_s = merge2(coarse.sigma_s, fine.sigma_s);
    out.rgb_s = merge2(coarse.rgb_s, fine.rgb_s);
    out.sigma_d = merge2(coarse.sigma_d, fine.sigma_d);
    out.rgb_d = merge2(coarse.rgb_d, fine.rgb_d);
    out.flow_fwd = merge2(coarse.flow_fwd, fine.flow_fwd);
    out.flow_bwd = merge2(coarse.flow_bwd, fine.flow_bwd);
    out.viewdir_samples = per_sample(in.viewdir, r, k, 3);
  }

  std::vector<float> deltas =
      deltas_from_ts(out.ts.data(), r, out.k);
  out.deltas = Tensor::from({r, out.k}, std::move(deltas));
  out.fused = fuse_composite(out.rgb_s, out.sigma_s, out.rgb_d, out.sigma_d, out.deltas);
  out.expected_t = expected_depth(out.fused.weights, out.ts);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Trainer

struct Trainer::Batch {
  int size = 0;
  std::vector<float> u, v;
  std::vector<int> frame;
  std::vector<float> time;
  std::vector<float> target_color;                      // [B*3]
  std::vector<float> depth_ndc;                         // [B]
  std::vector<float> is_static;                         // [B]
  std::vector<float> flow_target_fwd, flow_target_bwd;  // [B*2]
  std::vector<float> valid_fwd, valid_bwd;              // [B]
  std::vector<float> time_fwd, time_bwd;                // [B]
  std::vector<float> rot_fwd, rot_bwd;                  // [B*9] world-to-cam
  std::vector<float> campos_fwd, campos_bwd;            // [B*3]
  std::vector<float> origin, dir, viewdir;              // [B*3]
};

Trainer::Trainer(SceneData scene, const TrainConfig& cfg)
    : scene_(std::move(scene)), cfg_(cfg), rng_{cfg.seed} {
  cfg_.validate();
  set_compute_threads(cfg_.threads);
  static_field_ = StaticField(cfg_.field, params_, rng_);
  dynamic_field_ = DynamicField(cfg_.field, params_, rng_);
  if (cfg_.dsk_enabled)
    kernel_ = std::make_unique<DeformableKernel>(cfg_.kernel, scene_.train_frames,
                                                 scene_.frame_count(), params_, rng_);
}

Trainer::Batch Trainer::assemble_batch(int step_index) const {
  Batch b;
  b.size = cfg_.ray_batch;
  const int n = b.size;
  const Camera& cam = scene_.manifest.camera;
  const int fcount = scene_.frame_count();
  b.u.resize(static_cast<size_t>(n));
  b.v.resize(static_cast<size_t>(n));
  b.frame.resize(static_cast<size_t>(n));
  b.time.resize(static_cast<size_t>(n));
  b.target_color.resize(static_cast<size_t>(n) * 3);
  b.depth_ndc.resize(static_cast<size_t>(n));
  b.is_static.resize(static_cast<size_t>(n));
  b.flow_target_fwd.assign(static_cast<size_t>(n) * 2, 0.0f);
  b.flow_target_bwd.assign(static_cast<size_t>(n) * 2, 0.0f);
  b.valid_fwd.assign(static_cast<size_t>(n), 0.0f);
  b.valid_bwd.assign(static_cast<size_t>(n), 0.0f);
  b.time_fwd.resize(static_cast<size_t>(n));
  b.time_bwd.resize(static_cast<size_t>(n));
  b.rot_fwd.resize(static_cast<size_t>(n) * 9);
  b.rot_bwd.resize(static_cast<size_t>(n) * 9);
  b.campos_fwd.resize(static_cast<size_t>(n) * 3);
  b.campos_bwd.resize(static_cast<size_t>(n) * 3);
  b.origin.resize(static_cast<size_t>(n) * 3);
  b.dir.resize(static_cast<size_t>(n) * 3);
  b.viewdir.resize(static_cast<size_t>(n) * 3);

  const std::uint64_t step_u = static_cast<std::uint64_t>(step_index);
  for (int i = 0; i < n; ++i) {
    const std::uint64_t iu = static_cast<std::uint64_t>(i);
    const int frame = scene_.train_frames[static_cast<size_t>(
        rng_.u64(CounterRng::kBatch, step_u, iu, 0) % scene_.train_frames.size())];
    const int px = static_cast<int>(rng_.u64(CounterRng::kBatch, step_u, iu, 1) %
                                    static_cast<std::uint64_t>(cam.width));
    const int py = static_cast<int>(rng_.u64(CounterRng::kBatch, step_u, iu, 2) %
                                    static_cast<std::uint64_t>(cam.height));
    b.frame[static_cast<size_t>(i)] = frame;
    b.u[static_cast<size_t>(i)] = static_cast<float>(px) + 0.5f;
    b.v[static_cast<size_t>(i)] = static_cast<float>(py) + 0.5f;
    b.time[static_cast<size_t>(i)] = scene_.normalized_time(frame);

    for (int c = 0; c < 3; ++c)
      b.target_color[static_cast<size_t>(i) * 3 + c] =
          scene_.images[static_cast<size_t>(frame)].at(px, py, c);
    b.depth_ndc[static_cast<size_t>(i)] =
        ndc_z_from_depth(scene_.depths[static_cast<size_t>(frame)].at(px, py), scene_.ndc);
    b.is_static[static_cast<size_t>(i)] =
        scene_.masks[static_cast<size_t>(frame)].at(px, py) > 0.5f ? 0.0f : 1.0f;

    auto fill_neighbor = [&](int nb_frame, bool exists, const FloatGrid& flow_grid,
                             float* flow_target, float* valid, float* time_nb,
                             float* rot, float* campos) {
      const int nb = exists ? nb_frame : frame;
      *time_nb = scene_.normalized_time(nb);
      const Pose& pose = scene_.poses[static_cast<size_t>(nb)];
      const Mat3 wtc = pose.rotation.transposed();
      for (int kk = 0; kk < 9; ++kk) rot[kk] = wtc.m[static_cast<size_t>(kk)];
      campos[0] = pose.translation.x;
      campos[1] = pose.translation.y;
      campos[2] = pose.translation.z;
      if (exists && flow_grid.width > 0) {
        *valid = 1.0f;
        flow_target[0] = flow_grid.at(px, py, 0);
        flow_target[1] = flow_grid.at(px, py, 1);
      }
    };
    fill_neighbor(frame + 1, frame + 1 < fcount,
                  scene_.flows_fwd[static_cast<size_t>(frame)],
                  &b.flow_target_fwd[static_cast<size_t>(i) * 2],
                  &b.valid_fwd[static_cast<size_t>(i)], &b.time_fwd[static_cast<size_t>(i)],
                  &b.rot_fwd[static_cast<size_t>(i) * 9],
                  &b.campos_fwd[static_cast<size_t>(i) * 3]);
    fill_neighbor(frame - 1, frame - 1 >= 0,
                  scene_.flows_bwd[static_cast<size_t>(frame)],
                  &b.flow_target_bwd[static_cast<size_t>(i) * 2],
                  &b.valid_bwd[static_cast<size_t>(i)], &b.time_bwd[static_cast<size_t>(i)],
                  &b.rot_bwd[static_cast<size_t>(i) * 9],
                  &b.campos_bwd[static_cast<size_t>(i) * 3]);

    Camera frame_cam = cam;
    frame_cam.pose = scene_.poses[static_cast<size_t>(frame)];
    const Ray ray = ray_through(frame_cam, b.u[static_cast<size_t>(i)],
                                b.v[static_cast<size_t>(i)], frame);
    const Vec3 vd = ray.dir.normalized();
    b.origin[static_cast<size_t>(i) * 3] = ray.origin.x;
    b.origin[static_cast<size_t>(i) * 3 + 1] = ray.origin.y;
    b.origin[static_cast<size_t>(i) * 3 + 2] = ray.origin.z;
    b.dir[static_cast<size_t>(i) * 3] = ray.dir.x;
    b.dir[static_cast<size_t>(i) * 3 + 1] = ray.dir.y;
    b.dir[static_cast<size_t>(i) * 3 + 2] = ray.dir.z;
    b.viewdir[static_cast<size_t>(i) * 3] = vd.x;
    b.viewdir[static_cast<size_t>(i) * 3 + 1] = vd.y;
    b.viewdir[static_cast<size_t>(i) * 3 + 2] = vd.z;
  }
  return b;
}

namespace {

struct AuxLosses {
  Tensor pho, geo, z, dy, ds;
};

}  // namespace

// Everything except the color reconstruction and alignment terms, computed on
// one rendered ray set.
static AuxLosses compute_aux(const Rendered& rendered, const Trainer::Batch& batch,
                             const Tensor& pixel_i, const DynamicField& df,
                             const SceneData& scene, const LossWeights& lw) {
  const int r = rendered.fused.weights.dim(0);
  const int k = rendered.k;
  const Camera& cam = scene.manifest.camera;

  // warped renders into both temporal neighbors
  std::vector<Tensor> warped_colors, pho_masks;
  std::vector<Tensor> geo_preds, geo_targets, geo_masks;
  for (int dirn = 0; dirn < 2; ++dirn) {
    const bool fwd = dirn == 0;
    const Tensor& flow = fwd ? rendered.flow_fwd : rendered.flow_bwd;
    const std::vector<float>& valid = fwd ? batch.valid_fwd : batch.valid_bwd;
    const std::vector<float>& time_nb = fwd ? batch.time_fwd : batch.time_bwd;

    const Tensor displaced = rendered.positions + flow;
    const Tensor time_t = per_sample(Tensor::from({r, 1}, time_nb), r, k, 1);
    const DynamicFieldOutput warped_dy = df.eval(reshape(displaced, {r * k, 3}),
                                                 rendered.viewdir_samples, time_t);
    const FusedOut warped = fuse_composite(rendered.rgb_s, rendered.sigma_s,
                                           reshape(warped_dy.rgb, {r, k, 3}),
                                           reshape(warped_dy.sigma, {r, k}),
                                           rendered.deltas);
    warped_colors.push_back(warped.color);
    pho_masks.push_back(Tensor::from({r, 1}, valid));

    // projected 2D flow against the supervision grid
    ProjectedFlow proj = project_flow(
        rendered.positions, flow, rendered.fused.weights, scene.ndc,
        Tensor::from({r, 9}, fwd ? batch.rot_fwd : batch.rot_bwd),
        Tensor::from({r, 3}, fwd ? batch.campos_fwd : batch.campos_bwd),
        cam.fx, cam.fy, cam.cx, cam.cy, pixel_i);
    geo_preds.push_back(proj.pixel_delta);
    geo_targets.push_back(
        Tensor::from({r, 2}, fwd ? batch.flow_target_fwd : batch.flow_target_bwd));
    std::vector<float> gm(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i)
      gm[static_cast<size_t>(i)] =
          valid[static_cast<size_t>(i)] * proj.valid[static_cast<size_t>(i)];
    geo_masks.push_back(Tensor::from({r, 1}, gm));
  }

  AuxLosses out;
  const Tensor target = Tensor::from({r, 3}, batch.target_color);
  out.pho = loss_pho(concat(warped_colors, 0), concat({target, target}, 0),
                     concat(pho_masks, 0));
  out.geo = loss_geo(concat(geo_preds, 0), concat(geo_targets, 0),
                     concat(geo_masks, 0));

  out.dy = [&] {
    std::vector<float> mags(static_cast<size_t>(r) * k);
    const auto& ff = rendered.flow_fwd.data();
    const auto& fb = rendered.flow_bwd.data();
    for (size_t i = 0; i < mags.size(); ++i) {
      const double nf = std::sqrt(static_cast<double>(ff[i * 3]) * ff[i * 3] +
                                  static_cast<double>(ff[i * 3 + 1]) * ff[i * 3 + 1] +
                                  static_cast<double>(ff[i * 3 + 2]) * ff[i * 3 + 2]);
      const double nb = std::sqrt(static_cast<double>(fb[i * 3]) * fb[i * 3] +
                                  static_cast<double>(fb[i * 3 + 1]) * fb[i * 3 + 1] +
                                  static_cast<double>(fb[i * 3 + 2]) * fb[i * 3 + 2]);
      mags[i] = static_cast<float>(std::max(nf, nb));
    }
    return loss_dy(rendered.sigma_d, mags, lw.flow_threshold);
  }();
  out.ds = loss_ds(rendered.fused.w_dynamic, rendered.fused.w_static, lw.eps_window,
                   lw.log_clamp);
  return out;
}

static Tensor depth_pred_ndc_z(const Rendered& rendered, const Tensor& o_ndc,
                               const Tensor& d_ndc) {
  return slice(o_ndc, 1, 2, 1) + rendered.expected_t * slice(d_ndc, 1, 2, 1);
}

LossBundle Trainer::losses_plain(const Batch& batch, int step_index) {
  const int r = batch.size;
  BundleIn in;
  const NdcRays ndc_rays = ndc_transform_batch(Tensor::from({r, 3}, batch.origin),
                                               Tensor::from({r, 3}, batch.dir),
                                               scene_.ndc);
  in.o_ndc = ndc_rays.origin;
  in.d_ndc = ndc_rays.dir;
  in.viewdir = Tensor::from({r, 3}, batch.viewdir);
  in.time = Tensor::from({r, 1}, batch.time);

  Rendered rendered =
      render_bundle(static_field_, dynamic_field_, in, cfg_.sampler, rng_,
                    static_cast<std::uint64_t>(step_index), 0);

  std::vector<float> pix(static_cast<size_t>(r) * 2);
  for (int i = 0; i < r; ++i) {
    pix[static_cast<size_t>(i) * 2] = batch.u[static_cast<size_t>(i)];
    pix[static_cast<size_t>(i) * 2 + 1] = batch.v[static_cast<size_t>(i)];
  }
  const AuxLosses aux = compute_aux(rendered, batch, Tensor::from({r, 2}, pix),
                                    dynamic_field_, scene_, cfg_.loss);

  LossBundle out;
  out.parts.cb = loss_cb(rendered.fused.color, Tensor::from({r, 3}, batch.target_color));
  out.parts.pho = aux.pho;
  out.geo = aux.geo;
  out.z = loss_z(depth_pred_ndc_z(rendered, in.o_ndc, in.d_ndc), batch.depth_ndc,
                 batch.frame, batch.is_static);
  out.parts.data = loss_data(out.geo, out.z, cfg_.loss.beta_z);
  out.parts.ali = Tensor::scalar(0.0f);
  out.parts.dy = aux.dy;
  out.parts.ds = aux.ds;
  out.cyc = Tensor::scalar(0.0f);
  out.total = loss_total(out.parts, cfg_.loss);
  return out;
}

LossBundle Trainer::losses_dsk(const Batch& batch, int step_index) {
  const int r = batch.size;
  const KernelExpansion expansion =
      kernel_->expand(batch.u, batch.v, batch.frame, scene_.poses,
                      scene_.manifest.camera, scene_.ndc);

  const Tensor time_t = Tensor::from({r, 1}, batch.time);
  std::vector<Tensor> colors;
  Rendered rendered0;
  for (int q = 0; q < kernel_->config().n_positions; ++q) {
    BundleIn in;
    in.o_ndc = expansion.rays[static_cast<size_t>(q)].origin;
    in.d_ndc = expansion.rays[static_cast<size_t>(q)].dir;
    in.viewdir = expansion.viewdirs[static_cast<size_t>(q)];
    in.time = time_t;
    Rendered rendered = render_bundle(
        static_field_, dynamic_field_, in, cfg_.sampler, rng_,
        static_cast<std::uint64_t>(step_index),
        static_cast<std::uint64_t>(q) * static_cast<std::uint64_t>(r));
    colors.push_back(rendered.fused.color);
    if (q == 0) rendered0 = std::move(rendered);
  }

  const Tensor mixed = mix_colors(colors, expansion.weights);
  const AuxLosses aux = compute_aux(rendered0, batch, expansion.pixel0,
                                    dynamic_field_, scene_, cfg_.loss);

  LossBundle out;
  out.parts.cb = loss_cb(mixed, Tensor::from({r, 3}, batch.target_color));
  out.parts.pho = aux.pho;
  out.geo = aux.geo;
  out.z = loss_z(depth_pred_ndc_z(rendered0, expansion.rays[0].origin,
                                  expansion.rays[0].dir),
                 batch.depth_ndc, batch.frame, batch.is_static);
  out.parts.data = loss_data(out.geo, out.z, cfg_.loss.beta_z);
  out.parts.ali = loss_ali(expansion.pixel_offset0, expansion.origin_offset0,
                           cfg_.loss.lambda_o);
  out.parts.dy = aux.dy;
  out.parts.ds = aux.ds;
  out.cyc = Tensor::scalar(0.0f);
  out.total = loss_total(out.parts, cfg_.loss);
  return out;
}

LossBundle Trainer::compute_losses(int step_index) {
  const Batch batch = assemble_batch(step_index);
  return cfg_.dsk_enabled ? losses_dsk(batch, step_index) : losses_plain(batch, step_index);
}

LossBreakdown LossBundle::values() const {
  LossBreakdown v;
  v.cb = parts.cb.item_hi();
  v.pho = parts.pho.item_hi();
  v.ali = parts.ali.item_hi();
  v.geo = geo.item_hi();
  v.z = z.item_hi();
  v.data = parts.data.item_hi();
  v.dy = parts.dy.item_hi();
  v.ds = parts.ds.item_hi();
  v.cyc = cyc.item_hi();
  v.total = total.item_hi();
  return v;
}

LossBreakdown Trainer::step(int step_index) {
  LossBundle bundle = compute_losses(step_index);
  LossBreakdown values = bundle.values();
  values.lr = lr_schedule(step_index, cfg_);

  const std::pair<const char*, double> checks[] = {
      {"cb", values.cb}, {"pho", values.pho}, {"ali", values.ali},
      {"geo", values.geo}, {"z", values.z},   {"data", values.data},
      {"dy", values.dy},   {"ds", values.ds}, {"total", values.total}};
  for (const auto& [name, value] : checks)
    if (!std::isfinite(value))
      throw NumericError("step " + std::to_string(step_index) +
                         ": non-finite loss component '" + name + "'");

  backward(bundle.total);
  adam_.update(params_, values.lr);
  step_ = step_index + 1;
  return values;
}

// ---------------------------------------------------------------------------
// Inference rendering

FloatGrid Trainer::render_image(const Pose& pose, float time, RenderBranch branch) const {
  NoGradGuard ng;
  const Camera& cam = scene_.manifest.camera;
  FloatGrid img = FloatGrid::make(cam.width, cam.height, 3);
  Camera view = cam;
  view.pose = pose;

  const int chunk = 2048;
  const int total = cam.width * cam.height;
  for (int base = 0; base < total; base += chunk) {
    const int count = std::min(chunk, total - base);
    std::vector<float> origin(static_cast<size_t>(count) * 3);
    std::vector<float> dir(static_cast<size_t>(count) * 3);
    std::vector<float> viewdir(static_cast<size_t>(count) * 3);
    std::vector<float> times(static_cast<size_t>(count), time);
    for (int i = 0; i < count; ++i) {
      const int p = base + i;
      const float u = static_cast<float>(p % cam.width) + 0.5f;
      const float v = static_cast<float>(p / cam.width) + 0.5f;
      const Ray ray = ray_through(view, u, v);
      const Vec3 vd = ray.dir.normalized();
      origin[static_cast<size_t>(i) * 3] = ray.origin.x;
      origin[static_cast<size_t>(i) * 3 + 1] = ray.origin.y;
      origin[static_cast<size_t>(i) * 3 + 2] = ray.origin.z;
      dir[static_cast<size_t>(i) * 3] = ray.dir.x;
      dir[static_cast<size_t>(i) * 3 + 1] = ray.dir.y;
      dir[static_cast<size_t>(i) * 3 + 2] = ray.dir.z;
      viewdir[static_cast<size_t>(i) * 3] = vd.x;
      viewdir[static_cast<size_t>(i) * 3 + 1] = vd.y;
      viewdir[static_cast<size_t>(i) * 3 + 2] = vd.z;
    }
    BundleIn in;
    const NdcRays ndc_rays = ndc_transform_batch(
        Tensor::from({count, 3}, origin), Tensor::from({count, 3}, dir), scene_.ndc);
    in.o_ndc = ndc_rays.origin;
    in.d_ndc = ndc_rays.dir;
    in.viewdir = Tensor::from({count, 3}, viewdir);
    in.time = Tensor::from({count, 1}, times);
    const Rendered rendered =
        render_bundle(static_field_, dynamic_field_, in, cfg_.sampler, rng_,
                      0x52454eull, static_cast<std::uint64_t>(base));

    Tensor color;
    switch (branch) {
      case RenderBranch::kFull:
        color = rendered.fused.color;
        break;
      case RenderBranch::kStatic:
        color = composite(rendered.rgb_s, rendered.sigma_s, rendered.deltas).color;
        break;
      case RenderBranch::kDynamic:
        color = composite(rendered.rgb_d, rendered.sigma_d, rendered.deltas).color;
        break;
    }
    const auto& cd = color.data();
    for (int i = 0; i < count; ++i) {
      const int p = base + i;
      for (int c = 0; c < 3; ++c)
        img.at(p % cam.width, p / cam.width, c) = cd[static_cast<size_t>(i) * 3 + c];
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "NRFT", version u16, then length-prefixed named float32
// tensors (little endian).

namespace {

constexpr std::uint16_t kCheckpointVersion = 1;

void write_entry(std::ofstream& f, const std::string& name, const Shape& shape,
                 const std::vector<float>& data) {
  const std::uint16_t name_len = static_cast<std::uint16_t>(name.size());
  f.write(reinterpret_cast<const char*>(&name_len), 2);
  f.write(name.data(), name_len);
  const std::uint32_t rank = static_cast<std::uint32_t>(shape.size());
  f.write(reinterpret_cast<const char*>(&rank), 4);
  for (int d : shape) {
    const std::uint32_t du = static_cast<std::uint32_t>(d);
    f.write(reinterpret_cast<const char*>(&du), 4);
  }
  f.write(reinterpret_cast<const char*>(data.data()),
          static_cast<std::streamsize>(data.size() * 4));
}

struct Entry {
  Shape shape;
  std::vector<float> data;
};

std::map<std::string, Entry> read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path);
  size_t offset = 0;
  auto read = [&](void* p, size_t n) {
    f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(f.gcount()) != n)
      throw FormatError(path + ": truncated at byte offset " +
                        std::to_string(offset + static_cast<size_t>(f.gcount())));
    offset += n;
  };
  char magic[4];
  read(magic, 4);
  if (std::memcmp(magic, "NRFT", 4) != 0)
    throw FormatError(path + ": bad magic at byte offset 0");
  std::uint16_t version = 0;
  read(&version, 2);
  if (version != kCheckpointVersion)
    throw FormatError(path + ": unsupported checkpoint version " +
                      std::to_string(version));
  std::uint32_t count = 0;
  read(&count, 4);
  std::map<std::string, Entry> entries;
  for (std::uint32_t e = 0; e < count; ++e) {
    std::uint16_t name_len = 0;
    read(&name_len, 2);
    std::string name(name_len, '\0');
    read(name.data(), name_len);
    std::uint32_t rank = 0;
    read(&rank, 4);
    if (rank > 8) throw FormatError(path + ": implausible tensor rank");
    Entry entry;
    for (std::uint32_t d = 0; d < rank; ++d) {
      std::uint32_t du = 0;
      read(&du, 4);
      entry.shape.push_back(static_cast<int>(du));
    }
    entry.data.resize(static_cast<size_t>(numel_of(entry.shape)));
    read(entry.data.data(), entry.data.size() * 4);
    entries.emplace(std::move(name), std::move(entry));
  }
  return entries;
}

}  // namespace

void Trainer::save_checkpoint(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint " + path);
  f.write("NRFT", 4);
  f.write(reinterpret_cast<const char*>(&kCheckpointVersion), 2);
  std::uint32_t count = static_cast<std::uint32_t>(params_.all().size() * 3 + 2);
  f.write(reinterpret_cast<const char*>(&count), 4);
  write_entry(f, "opt.step", {1}, {static_cast<float>(step_)});
  write_entry(f, "opt.adam_steps", {1}, {static_cast<float>(adam_.step_count)});
  for (const auto& [name, p] : params_.all()) {
    write_entry(f, name, p.shape(), p.data());
    const auto mi = adam_.m.find(name);
    const auto vi = adam_.v.find(name);
    const std::vector<float> zero(static_cast<size_t>(p.numel()), 0.0f);
    write_entry(f, "adam.m/" + name, p.shape(), mi != adam_.m.end() ? mi->second : zero);
    write_entry(f, "adam.v/" + name, p.shape(), vi != adam_.v.end() ? vi->second : zero);
  }
  if (!f) throw IoError("write failed for checkpoint " + path);
}

void Trainer::load_checkpoint(const std::string& path) {
  const std::map<std::string, Entry> entries = read_checkpoint(path);
  auto get = [&](const std::string& name) -> const Entry& {
    const auto it = entries.find(name);
    if (it == entries.end())
      throw FormatError(path + ": missing entry '" + name +
                        "' (checkpoint does not match this configuration)");
    return it->second;
  };
  // validate everything before mutating any state
  for (const auto& [name, p] : params_.all()) {
    const Entry& e = get(name);
    if (e.shape != p.shape())
      throw FormatError(path + ": entry '" + name + "' has shape " +
                        shape_str(e.shape) + ", expected " + shape_str(p.shape()));
    get("adam.m/" + name);
    get("adam.v/" + name);
  }
  const Entry& step_entry = get("opt.step");
  const Entry& adam_steps_entry = get("opt.adam_steps");

  for (auto& [name, p] : params_.all()) {
    p.mutable_data() = get(name).data;
    adam_.m[name] = get("adam.m/" + name).data;
    adam_.v[name] = get("adam.v/" + name).data;
  }
  step_ = static_cast<int>(step_entry.data[0]);
  adam_.step_count = static_cast<int>(adam_steps_entry.data[0]);
}

}  // namespace flownerf
