// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#include "flownerf/config.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

#include "flownerf/errors.hpp"

namespace flownerf {

namespace {

using nlohmann::json;

void reject_unknown(const json& j, const std::set<std::string>& known,
                    const std::string& where) {
  for (const auto& [key, value] : j.items())
    if (!known.count(key))
      throw ConfigError(where + ": unknown key '" + key + "'");
}

}  // namespace

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }

  RunConfig cfg;
  try {
    reject_unknown(j, {"manifest", "out", "seed", "steps", "ray_batch", "lr_start",
                       "lr_end", "dsk", "checkpoint_interval", "threads", "sampler",
                       "field", "kernel", "loss"},
                   path);
    cfg.manifest = j.at("manifest").get<std::string>();
    cfg.out = j.value("out", cfg.out);
    cfg.train.seed = j.value("seed", cfg.train.seed);
    cfg.train.total_steps = j.value("steps", cfg.train.total_steps);
    cfg.train.ray_batch = j.value("ray_batch", cfg.train.ray_batch);
    cfg.train.lr_start = j.value("lr_start", cfg.train.lr_start);
    cfg.train.lr_end = j.value("lr_end", cfg.train.lr_end);
    cfg.train.dsk_enabled = j.value("dsk", cfg.train.dsk_enabled);
    cfg.train.checkpoint_interval =
        j.value("checkpoint_interval", cfg.train.checkpoint_interval);
    cfg.train.threads = j.value("threads", cfg.train.threads);

    if (j.contains("sampler")) {
      const json& s = j.at("sampler");
      reject_unknown(s, {"k_coarse", "k_fine", "append_backstop"}, path + ": sampler");
      cfg.train.sampler.k_coarse = s.value("k_coarse", cfg.train.sampler.k_coarse);
      cfg.train.sampler.k_fine = s.value("k_fine", cfg.train.sampler.k_fine);
      cfg.train.sampler.append_backstop =
          s.value("append_backstop", cfg.train.sampler.append_backstop);
    }
    if (j.contains("field")) {
      const json& s = j.at("field");
      reject_unknown(s, {"depth", "width", "skip_layer", "color_hidden",
                         "freq_position", "freq_direction", "freq_time"},
                     path + ": field");
      cfg.train.field.depth = s.value("depth", cfg.train.field.depth);
      cfg.train.field.width = s.value("width", cfg.train.field.width);
      cfg.train.field.skip_layer = s.value("skip_layer", cfg.train.field.skip_layer);
      cfg.train.field.color_hidden = s.value("color_hidden", cfg.train.field.color_hidden);
      cfg.train.field.encoding.num_freqs_position =
          s.value("freq_position", cfg.train.field.encoding.num_freqs_position);
      cfg.train.field.encoding.num_freqs_direction =
          s.value("freq_direction", cfg.train.field.encoding.num_freqs_direction);
      cfg.train.field.encoding.num_freqs_time =
          s.value("freq_time", cfg.train.field.encoding.num_freqs_time);
    }
    if (j.contains("kernel")) {
      const json& s = j.at("kernel");
      reject_unknown(s, {"n_positions", "embed_dim", "hidden", "freq_pixel", "scale",
                         "embed_sigma"},
                     path + ": kernel");
      cfg.train.kernel.n_positions = s.value("n_positions", cfg.train.kernel.n_positions);
      cfg.train.kernel.embed_dim = s.value("embed_dim", cfg.train.kernel.embed_dim);
      cfg.train.kernel.hidden = s.value("hidden", cfg.train.kernel.hidden);
      cfg.train.kernel.freq_pixel = s.value("freq_pixel", cfg.train.kernel.freq_pixel);
      cfg.train.kernel.scale = s.value("scale", cfg.train.kernel.scale);
      cfg.train.kernel.embed_sigma = s.value("embed_sigma", cfg.train.kernel.embed_sigma);
    }
    if (j.contains("loss")) {
      const json& s = j.at("loss");
      reject_unknown(s, {"beta_data", "beta_ali", "beta_dy", "beta_ds", "beta_z",
                         "lambda_o", "flow_threshold", "eps_window", "log_clamp"},
                     path + ": loss");
      cfg.train.loss.beta_data = s.value("beta_data", cfg.train.loss.beta_data);
      cfg.train.loss.beta_ali = s.value("beta_ali", cfg.train.loss.beta_ali);
      cfg.train.loss.beta_dy = s.value("beta_dy", cfg.train.loss.beta_dy);
      cfg.train.loss.beta_ds = s.value("beta_ds", cfg.train.loss.beta_ds);
      cfg.train.loss.beta_z = s.value("beta_z", cfg.train.loss.beta_z);
      cfg.train.loss.lambda_o = s.value("lambda_o", cfg.train.loss.lambda_o);
      cfg.train.loss.flow_threshold =
          s.value("flow_threshold", cfg.train.loss.flow_threshold);
      cfg.train.loss.eps_window = s.value("eps_window", cfg.train.loss.eps_window);
      cfg.train.loss.log_clamp = s.value("log_clamp", cfg.train.loss.log_clamp);
    }
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  cfg.train.validate();
  return cfg;
}

}  // namespace flownerf
