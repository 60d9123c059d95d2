// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <string>
#include <vector>

#include "flownerf/rng.hpp"
#include "flownerf/tensor.hpp"

namespace flownerf {

/// Ordered registry of named trainable tensors. Iteration order is the key
/// order, so optimizer sweeps and checkpoints are deterministic.
class ParamStore {
 public:
  Tensor create(const Shape& shape, std::vector<float> init, const std::string& name);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) > 0; }
  const std::map<std::string, Tensor>& all() const { return params_; }
  std::map<std::string, Tensor>& all() { return params_; }
  std::vector<Tensor> tensors() const;
  int total_elements() const;

 private:
  std::map<std::string, Tensor> params_;
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Linear() = default;
  /// He-uniform weights; bias zero unless overridden after construction.
  Linear(int in, int out, ParamStore& store, const CounterRng& rng,
         const std::string& name, float weight_scale = 1.0f, bool zero_init = false);

  Tensor forward(const Tensor& x) const;
  int in_features() const { return weight.dim(0); }
  int out_features() const { return weight.dim(1); }
};

/// Plain relu MLP trunk with one optional skip concat of the input.
struct Mlp {
  std::vector<Linear> layers;
  int skip_layer = -1;  // input re-concatenated before this layer index

  Mlp() = default;
  Mlp(int in, int width, int depth, int skip, ParamStore& store,
      const CounterRng& rng, const std::string& name);

  Tensor forward(const Tensor& x) const;
};

}  // namespace flownerf
