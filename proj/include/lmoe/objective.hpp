#pragma once

// The joint training objective: masked auto-regressive cross entropy, the
// load-balancing regularizer over batch-average routing, and their weighted
// sum.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lmoe/errors.hpp"
#include "lmoe/tensor.hpp"

namespace lmoe {

// One teacher-forcing batch: inputs, next-token targets, and the loss mask
// (true exactly on positions whose prediction target is a completion token).
// `pad` marks positions that carry no real input token at all.
struct BatchTargets {
  TokenIds inputs;
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> mask;
  std::vector<std::uint8_t> pad;
  std::vector<std::string> row_tasks;  // per-row task tag, for routing probes
};

// Per-step scalar record emitted to the metrics stream.
struct LossBreakdown {
  double l_ar = 0;
  double l_lb = 0;
  double lambda = 0;
  double l_total = 0;
  std::vector<double> p_bar;   // batch-average routing, mean over gate layers
  std::size_t tokens = 0;      // M: non-pad positions that flowed through gates
};

// Mean masked cross entropy of next-token logits [B,T,V] against the batch.
template <class S>
Tensor<S> ar_loss(const Tensor<S>& logits, const BatchTargets& batch) {
  if (logits.rank() != 3) {
    throw shape_error("ar_loss: logits must be [batch,seq,vocab], got " +
                      shape_str(logits.shape()));
  }
  const std::size_t rows = logits.shape()[0] * logits.shape()[1];
  if (rows != batch.targets.size() || rows != batch.mask.size()) {
    throw shape_error("ar_loss: logits " + shape_str(logits.shape()) + " with " +
                      std::to_string(batch.targets.size()) + " targets");
  }
  auto flat = reshape(logits, {rows, logits.shape()[2]});
  return cross_entropy<S>(flat, batch.targets, batch.mask);
}

// Load-balancing loss N * sum_i p_bar_i^2 over a batch-average routing
// vector that lives on the tape (so the gradient reaches the gate).
template <class S>
Tensor<S> lb_loss(const Tensor<S>& p_bar) {
  if (p_bar.rank() != 1) {
    throw shape_error("lb_loss: expected a vector, got " + shape_str(p_bar.shape()));
  }
  const std::size_t n = p_bar.shape()[0];
  double total = 0;
  for (S v : p_bar.value()) {
    if (v < S(-1e-6)) {
      throw contract_error("lb_loss: negative probability " + std::to_string(v));
    }
    total += static_cast<double>(v);
  }
  if (std::abs(total - 1.0) > 1e-5) {
    throw contract_error("lb_loss: probabilities sum to " + std::to_string(total) +
                         ", expected 1");
  }
  return scale(sum_all(mul(p_bar, p_bar)), static_cast<S>(n));
}

template <class S>
struct TotalLoss {
  Tensor<S> total;          // on-tape scalar, ready for backward()
  LossBreakdown breakdown;  // p_bar / tokens filled in by the caller
};

template <class S>
TotalLoss<S> total_loss(const Tensor<S>& l_ar, const Tensor<S>& l_lb, double lambda) {
  if (lambda < 0) {
    throw config_error("total_loss: lambda must be >= 0, got " + std::to_string(lambda));
  }
  TotalLoss<S> out;
  out.total = add(l_ar, scale(l_lb, static_cast<S>(lambda)));
  out.breakdown.l_ar = static_cast<double>(l_ar.item());
  out.breakdown.l_lb = static_cast<double>(l_lb.item());
  out.breakdown.lambda = lambda;
  out.breakdown.l_total = static_cast<double>(out.total.item());
  return out;
}

// Batch-average routing probabilities on the tape: probs is [B,T,N] (or any
// leading shape ending in N) and `counted` marks the token positions that
// participate. Returns p_bar [N].
template <class S>
Tensor<S> batch_mean_probs(const Tensor<S>& probs, const std::vector<std::uint8_t>& counted) {
  if (probs.rank() < 2) {
    throw shape_error("batch_mean_probs: expected at least 2-d probs, got " +
                      shape_str(probs.shape()));
  }
  const std::size_t n = probs.shape().back();
  const std::size_t rows = probs.size() / n;
  if (counted.size() != rows) {
    throw shape_error("batch_mean_probs: " + std::to_string(counted.size()) +
                      " flags for " + std::to_string(rows) + " token positions");
  }
  std::size_t m = 0;
  std::vector<S> weights(rows, S(0));
  for (std::size_t r = 0; r < rows; ++r) {
    if (counted[r]) {
      weights[r] = S(1);
      ++m;
    }
  }
  if (m == 0) throw data_error("batch_mean_probs: no counted token positions (empty batch)");
  auto flat = reshape(probs, {rows, n});
  auto w = Tensor<S>::from_data({rows}, std::move(weights));
  auto masked = rowwise_scale(flat, w);
  return scale(sum_axis(masked, 0), S(1) / static_cast<S>(m));
}

}  // namespace lmoe
