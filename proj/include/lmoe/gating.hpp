#pragma once

// The gate: a linear map from a token's hidden state to N expert logits,
// normalized per token by a softmax, plus the differentiable composition of
// expert updates inside the adapted forward pass.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lmoe/backbone.hpp"
#include "lmoe/errors.hpp"
#include "lmoe/lora.hpp"
#include "lmoe/tensor.hpp"

namespace lmoe {

template <class S>
struct GateNet {
  std::string scope;  // layer id, or "shared"
  Tensor<S> weight;   // [N, d_model]
  Tensor<S> bias;     // [N]

  std::size_t num_experts() const { return weight.shape()[0]; }
};

// Zero-initialized gate: routing is exactly uniform at step 0.
template <class S>
GateNet<S> init_gate(std::size_t n_experts, std::size_t d_model, std::string scope) {
  GateNet<S> g;
  g.scope = std::move(scope);
  g.weight = Tensor<S>::zeros({n_experts, d_model});
  g.weight.set_requires_grad(true);
  g.bias = Tensor<S>::zeros({n_experts});
  g.bias.set_requires_grad(true);
  return g;
}

// Per-token routing distribution, kept on the tape.
template <class S>
struct RoutingOutput {
  Tensor<S> logits;  // [..., N]
  Tensor<S> probs;   // softmax of logits over the expert axis
};

// probs = softmax(W z + b) per token. z is [..., d_model].
template <class S>
RoutingOutput<S> route(const GateNet<S>& gate, const Tensor<S>& z) {
  const std::size_t d_model = gate.weight.shape()[1];
  if (z.rank() == 0 || z.shape().back() != d_model) {
    throw shape_error("route: hidden state " + shape_str(z.shape()) +
                      " does not end in d_model=" + std::to_string(d_model));
  }
  RoutingOutput<S> out;
  out.logits = add(project(gate.weight, z), gate.bias);
  out.probs = softmax(out.logits, -1);
  return out;
}

// Composed adapted projection for one layer:
//   h_out = W0 h_in + alpha * sum_i p_i(z) * B_i (A_i h_in)
// computed per expert in factored activation-mixing order, which is
// mathematically identical to materializing the composite update
// sum_i p_i B_i A_i by linearity.
template <class S>
Tensor<S> composed_forward(const LayerTap<S>& tap, const Tensor<S>& h_in,
                           const ExpertLibrary<S>& lib, const RoutingOutput<S>& routing) {
  const std::size_t n = lib.num_experts();
  if (routing.probs.shape().back() != n) {
    throw config_error("composed_forward: routing over " +
                       std::to_string(routing.probs.shape().back()) +
                       " experts, library has " + std::to_string(n));
  }
  if (routing.probs.size() / n != h_in.size() / h_in.shape().back()) {
    throw shape_error("composed_forward: routing " + shape_str(routing.probs.shape()) +
                      " does not cover inputs " + shape_str(h_in.shape()));
  }

  const std::size_t k = h_in.shape().back();
  const std::size_t rows = h_in.size() / k;
  const auto& w0 = tap.w0;
  auto flat = reshape(h_in, {rows, k});
  auto probs_flat = reshape(routing.probs, {rows, n});

  auto out = matmul(flat, transpose(w0, {1, 0}));  // [rows, d]
  Tensor<S> mix;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& ad = lib.experts[i].adapter_for(tap.layer_id);
    auto low = matmul(flat, transpose(ad.a, {1, 0}));   // [rows, r]
    auto up = matmul(low, transpose(ad.b, {1, 0}));     // [rows, d]
    auto weighted = rowwise_scale(up, index_last(probs_flat, i));
    mix = mix.defined() ? add(mix, weighted) : weighted;
  }
  out = add(out, scale(mix, static_cast<S>(lib.alpha)));

  Shape out_shape = h_in.shape();
  out_shape.back() = w0.shape()[0];
  return reshape(out, std::move(out_shape));
}

inline double entropy_of(const std::vector<double>& p) {
  double h = 0;
  for (double v : p)
    if (v > 0) h -= v * std::log(v);
  return h;
}

// Batch routing statistics (off-tape diagnostic): p_bar over the counted
// token positions and the entropy of p_bar.
struct RoutingStats {
  std::vector<double> p_bar;
  double entropy = 0;
  std::size_t tokens = 0;
};

template <class S>
RoutingStats routing_stats(const RoutingOutput<S>& routing,
                           const std::vector<std::uint8_t>* counted = nullptr) {
  const std::size_t n = routing.probs.shape().back();
  const std::size_t rows = routing.probs.size() / n;
  if (counted && counted->size() != rows) {
    throw shape_error("routing_stats: " + std::to_string(counted->size()) + " flags for " +
                      std::to_string(rows) + " token positions");
  }
  RoutingStats out;
  out.p_bar.assign(n, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (counted && !(*counted)[r]) continue;
    ++out.tokens;
    for (std::size_t i = 0; i < n; ++i)
      out.p_bar[i] += static_cast<double>(routing.probs.value()[r * n + i]);
  }
  if (out.tokens == 0) throw data_error("routing_stats: empty batch");
  for (double& v : out.p_bar) v /= static_cast<double>(out.tokens);
  out.entropy = entropy_of(out.p_bar);
  return out;
}

}  // namespace lmoe
