#pragma once

#include <string>
#include <vector>

#include "lossforge/errors.hpp"
#include "lossforge/graph.hpp"
#include "lossforge/rng.hpp"
#include "lossforge/tensor.hpp"

namespace lossforge {

// Linear or ReLU-MLP classifier over a single flattened parameter vector.
// Layout: per layer, weights (in x out, row-major) followed by the bias row
// when `bias` is set. Bias-free nets are positively homogeneous and cannot
// express per-class intercepts, which keeps additive logit offsets in the
// training loss from being absorbed by the model.
struct ModelSpec {
  enum class Kind { kLinear, kMlp };
  Kind kind = Kind::kLinear;
  int input_dim = 0;
  std::vector<int> hidden;
  int num_classes = 0;
  bool bias = true;

  void validate() const {
    if (input_dim < 1 || num_classes < 2) throw ConfigError("model: bad dimensions");
    if (kind == Kind::kMlp && hidden.empty())
      throw ConfigError("model: mlp needs at least one hidden layer");
    if (kind == Kind::kLinear && !hidden.empty())
      throw ConfigError("model: linear model cannot have hidden layers");
    for (int h : hidden)
      if (h < 1) throw ConfigError("model: hidden sizes must be positive");
  }

  std::vector<int> layer_dims() const {
    std::vector<int> dims{input_dim};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(num_classes);
    return dims;
  }

  int param_count() const {
    auto dims = layer_dims();
    int total = 0;
    for (size_t i = 0; i + 1 < dims.size(); ++i)
      total += dims[i] * dims[i + 1] + (bias ? dims[i + 1] : 0);
    return total;
  }
};

// He-style init: weights N(0, 2/fan_in) before ReLU layers, N(0, 1/fan_in)
// for the output layer; biases zero.
inline Tensor init_params(const ModelSpec& spec, RngStream& stream) {
  spec.validate();
  auto dims = spec.layer_dims();
  Tensor theta = Tensor::zeros({spec.param_count()});
  int off = 0;
  for (size_t layer = 0; layer + 1 < dims.size(); ++layer) {
    bool last = layer + 2 == dims.size();
    double std = std::sqrt((last ? 1.0 : 2.0) / dims[layer]);
    int nw = dims[layer] * dims[layer + 1];
    for (int i = 0; i < nw; ++i) theta.data[static_cast<size_t>(off + i)] = std * stream.normal();
    off += nw + (spec.bias ? dims[layer + 1] : 0);  // biases stay zero
  }
  return theta;
}

inline ad::Var model_logits(ad::Graph& g, const ModelSpec& spec, ad::Var theta, ad::Var x) {
  spec.validate();
  auto dims = spec.layer_dims();
  int n = g.shape_of(x)[0];
  if (g.shape_of(x)[1] != spec.input_dim) throw ShapeError("model: input width mismatch");
  if (g.shape_of(theta) != std::vector<int>{spec.param_count()})
    throw ShapeError("model: parameter vector has wrong length");
  ad::Var h = x;
  int off = 0;
  for (size_t layer = 0; layer + 1 < dims.size(); ++layer) {
    int in = dims[layer], out = dims[layer + 1];
    ad::Var w = g.reshape(g.slice(theta, off, in * out), {in, out});
    off += in * out;
    h = g.matmul(h, w);
    if (spec.bias) {
      ad::Var b = g.slice(theta, off, out);
      off += out;
      h = g.add(h, g.broadcast_row(b, n));
    }
    if (layer + 2 < dims.size()) h = g.relu(h);
  }
  return h;
}

inline Tensor model_logits_plain(const ModelSpec& spec, const Tensor& theta, const Tensor& x) {
  spec.validate();
  auto dims = spec.layer_dims();
  if (x.rank() != 2 || x.cols() != spec.input_dim) throw ShapeError("model: input width mismatch");
  if (theta.rank() != 1 || theta.shape[0] != spec.param_count())
    throw ShapeError("model: parameter vector has wrong length");
  int n = x.rows();
  Tensor h = x;
  int off = 0;
  for (size_t layer = 0; layer + 1 < dims.size(); ++layer) {
    int in = dims[layer], out = dims[layer + 1];
    Tensor next = Tensor::zeros({n, out});
    // same accumulation order as the tape matmul kernel for bit parity
    for (int r = 0; r < n; ++r)
      for (int p = 0; p < in; ++p) {
        double a = h.at(r, p);
        if (a == 0.0) continue;
        const double* wrow = &theta.data[static_cast<size_t>(off + p * out)];
        double* orow = &next.data[static_cast<size_t>(r) * out];
        for (int c = 0; c < out; ++c) orow[c] += a * wrow[c];
      }
    off += in * out;
    if (spec.bias) {
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < out; ++c) next.at(r, c) += theta.data[static_cast<size_t>(off + c)];
      off += out;
    }
    if (layer + 2 < dims.size())
      for (double& v : next.data) v = v > 0.0 ? v : 0.0;
    h = std::move(next);
  }
  return h;
}

}  // namespace lossforge
