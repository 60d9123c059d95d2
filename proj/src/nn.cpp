// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#include "flownerf/nn.hpp"

#include <cmath>

#include "flownerf/errors.hpp"

namespace flownerf {

Tensor ParamStore::create(const Shape& shape, std::vector<float> init,
                          const std::string& name) {
  if (params_.count(name))
    throw ConfigError("parameter '" + name + "' registered twice");
  Tensor t = Tensor::param(shape, std::move(init), name);
  params_.emplace(name, t);
  return t;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

std::vector<Tensor> ParamStore::tensors() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& [name, t] : params_) out.push_back(t);
  return out;
}

int ParamStore::total_elements() const {
  int n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

Linear::Linear(int in, int out, ParamStore& store, const CounterRng& rng,
               const std::string& name, float weight_scale, bool zero_init) {
  std::vector<float> w(static_cast<size_t>(in) * out, 0.0f);
  if (!zero_init) {
    const float bound = weight_scale * std::sqrt(6.0f / static_cast<float>(in));
    const std::uint64_t key = CounterRng::mix(std::hash<std::string>{}(name));
    for (size_t i = 0; i < w.size(); ++i)
      w[i] = (2.0f * rng.uniform(CounterRng::kInit, key, i) - 1.0f) * bound;
  }
  weight = store.create({in, out}, std::move(w), name + ".weight");
  bias = store.create({out}, std::vector<float>(static_cast<size_t>(out), 0.0f),
                      name + ".bias");
}

Tensor Linear::forward(const Tensor& x) const {
  return matmul(x, weight) + reshape(bias, {1, bias.dim(0)});
}

Mlp::Mlp(int in, int width, int depth, int skip, ParamStore& store,
         const CounterRng& rng, const std::string& name)
    : skip_layer(skip) {
  layers.reserve(static_cast<size_t>(depth));
  int cur = in;
  for (int i = 0; i < depth; ++i) {
    if (i == skip_layer && i > 0) cur += in;
    layers.emplace_back(cur, width, store, rng, name + ".l" + std::to_string(i));
    cur = width;
  }
}

Tensor Mlp::forward(const Tensor& x) const {
  Tensor h = x;
  for (size_t i = 0; i < layers.size(); ++i) {
    if (static_cast<int>(i) == skip_layer && i > 0) h = concat({h, x}, 1);
    h = relu(layers[i].forward(h));
  }
  return h;
}

}  // namespace flownerf
