// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#include "flownerf/fields.hpp"

namespace flownerf {

Tensor encode(const Tensor& x, int num_freqs, bool include_identity) {
  if (num_freqs == 0 && include_identity) return x;
  return posenc(x, num_freqs, include_identity);
}

StaticField::StaticField(const FieldConfig& cfg, ParamStore& store,
                         const CounterRng& rng, const std::string& prefix)
    : cfg_(cfg) {
  const int pos_dim = cfg.encoding.encoded_dim(3, cfg.encoding.num_freqs_position);
  const int dir_dim = cfg.encoding.encoded_dim(3, cfg.encoding.num_freqs_direction);
  trunk_ = Mlp(pos_dim, cfg.width, cfg.depth, cfg.skip_layer, store, rng,
               prefix + ".trunk");
  sigma_head_ = Linear(cfg.width, 1, store, rng, prefix + ".sigma");
  sigma_head_.bias.mutable_data()[0] = -1.0f;  // near-transparent start
  color_hidden_ = Linear(cfg.width + dir_dim, cfg.color_hidden_width(), store, rng,
                         prefix + ".color_h");
  color_out_ = Linear(cfg.color_hidden_width(), 3, store, rng, prefix + ".color");
}

StaticFieldOutput StaticField::eval(const Tensor& pos, const Tensor& dir) const {
  const Tensor pe = encode(pos, cfg_.encoding.num_freqs_position,
                           cfg_.encoding.include_identity);
  const Tensor de = encode(dir, cfg_.encoding.num_freqs_direction,
                           cfg_.encoding.include_identity);
  const Tensor h = trunk_.forward(pe);
  StaticFieldOutput out;
  out.sigma = softplus(sigma_head_.forward(h));
  out.rgb = sigmoid(color_out_.forward(relu(color_hidden_.forward(concat({h, de}, 1)))));
  return out;
}

DynamicField::DynamicField(const FieldConfig& cfg, ParamStore& store,
                           const CounterRng& rng, const std::string& prefix)
    : cfg_(cfg) {
  const int pos_dim = cfg.encoding.encoded_dim(3, cfg.encoding.num_freqs_position);
  const int dir_dim = cfg.encoding.encoded_dim(3, cfg.encoding.num_freqs_direction);
  const int time_dim = cfg.encoding.encoded_dim(1, cfg.encoding.num_freqs_time);
  trunk_ = Mlp(pos_dim + time_dim, cfg.width, cfg.depth, cfg.skip_layer, store, rng,
               prefix + ".trunk");
  sigma_head_ = Linear(cfg.width, 1, store, rng, prefix + ".sigma");
  sigma_head_.bias.mutable_data()[0] = -1.0f;
  color_hidden_ = Linear(cfg.width + dir_dim, cfg.color_hidden_width(), store, rng,
                         prefix + ".color_h");
  color_out_ = Linear(cfg.color_hidden_width(), 3, store, rng, prefix + ".color");
  flow_fwd_head_ = Linear(cfg.width, 3, store, rng, prefix + ".flow_fwd",
                          1.0f, /*zero_init=*/true);
  flow_bwd_head_ = Linear(cfg.width, 3, store, rng, prefix + ".flow_bwd",
                          1.0f, /*zero_init=*/true);
}

DynamicFieldOutput DynamicField::eval(const Tensor& pos, const Tensor& dir,
                                      const Tensor& time) const {
  const Tensor pe = encode(pos, cfg_.encoding.num_freqs_position,
                           cfg_.encoding.include_identity);
  const Tensor te = encode(time, cfg_.encoding.num_freqs_time,
                           cfg_.encoding.include_identity);
  const Tensor de = encode(dir, cfg_.encoding.num_freqs_direction,
                           cfg_.encoding.include_identity);
  const Tensor h = trunk_.forward(concat({pe, te}, 1));
  DynamicFieldOutput out;
  out.sigma = softplus(sigma_head_.forward(h));
  out.rgb = sigmoid(color_out_.forward(relu(color_hidden_.forward(concat({h, de}, 1)))));
  out.flow_fwd = flow_fwd_head_.forward(h);
  out.flow_bwd = flow_bwd_head_.forward(h);
  return out;
}

}  // namespace flownerf
