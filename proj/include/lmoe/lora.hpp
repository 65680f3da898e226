#pragma once

// The trainable expert library: N LoRA experts, each holding one low-rank
// (A, B) pair per adapted layer of the backbone.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lmoe/backbone.hpp"
#include "lmoe/errors.hpp"
#include "lmoe/random.hpp"
#include "lmoe/tensor.hpp"

namespace lmoe {

// Low-rank pair for one adapted layer: A [r, k], B [d, r] against W0 [d, k].
template <class S>
struct LoraLayerAdapter {
  std::string layer_id;
  Tensor<S> a;
  Tensor<S> b;
};

template <class S>
struct LoraExpert {
  std::size_t index = 0;
  std::vector<LoraLayerAdapter<S>> adapters;  // ordered like adapted_layer_ids()

  const LoraLayerAdapter<S>& adapter_for(const std::string& layer_id) const {
    for (const auto& ad : adapters)
      if (ad.layer_id == layer_id) return ad;
    throw config_error("expert " + std::to_string(index) + ": no adapter for layer '" +
                       layer_id + "'");
  }
};

template <class S>
struct ExpertLibrary {
  std::vector<LoraExpert<S>> experts;
  std::size_t rank = 0;
  double alpha = 1.0;

  std::size_t num_experts() const { return experts.size(); }
};

inline constexpr double kLoraInitStd = 0.02;

// A ~ N(0, 0.02^2), B = 0, so every expert's update starts at exactly zero
// and the adapted model coincides with the frozen backbone at step 0.
template <class S>
ExpertLibrary<S> init_library(const BackboneConfig& config, std::size_t n_experts,
                              std::size_t rank, double alpha, std::uint64_t seed) {
  config.validate();
  if (n_experts == 0) throw config_error("moe.num_experts: must be >= 1");
  if (rank == 0) throw config_error("moe.rank: must be >= 1");
  const auto layer_ids = config.adapted_layer_ids();
  for (const auto& id : layer_ids) {
    const auto role = id.substr(id.find('.') + 1);
    const auto [d, k] = config.layer_dims(role);
    if (rank > std::min(d, k)) {
      throw config_error("moe.rank: rank " + std::to_string(rank) + " exceeds min(d,k)=" +
                         std::to_string(std::min(d, k)) + " for layer '" + id + "'");
    }
  }

  Rng rng(stream_seed(seed, "experts"));
  ExpertLibrary<S> lib;
  lib.rank = rank;
  lib.alpha = alpha;
  for (std::size_t i = 0; i < n_experts; ++i) {
    LoraExpert<S> expert;
    expert.index = i;
    for (const auto& id : layer_ids) {
      const auto role = id.substr(id.find('.') + 1);
      const auto [d, k] = config.layer_dims(role);
      LoraLayerAdapter<S> ad;
      ad.layer_id = id;
      ad.a = Tensor<S>::randn({rank, k}, rng, kLoraInitStd);
      ad.a.set_requires_grad(true);
      ad.b = Tensor<S>::zeros({d, rank});
      ad.b.set_requires_grad(true);
      expert.adapters.push_back(std::move(ad));
    }
    lib.experts.push_back(std::move(expert));
  }
  return lib;
}

// W0 h + alpha * B (A h), computed in factored order (BA is never formed).
// h_in may be a vector [k] or any batch [..., k].
template <class S>
Tensor<S> single_expert_forward(const LoraLayerAdapter<S>& adapter, const Tensor<S>& w0,
                                const Tensor<S>& h_in, double alpha) {
  const std::size_t k = h_in.shape().back();
  if (adapter.a.shape()[1] != k || w0.shape()[1] != k ||
      adapter.b.shape()[0] != w0.shape()[0] ||
      adapter.b.shape()[1] != adapter.a.shape()[0]) {
    throw shape_error("single_expert_forward: A " + shape_str(adapter.a.shape()) + ", B " +
                      shape_str(adapter.b.shape()) + ", W0 " + shape_str(w0.shape()) +
                      ", h_in " + shape_str(h_in.shape()));
  }
  auto base = project(w0, h_in);
  auto low = project(adapter.a, h_in);        // [.., r]
  auto update = project(adapter.b, low);      // [.., d]
  return add(base, scale(update, static_cast<S>(alpha)));
}

// Every A and B tensor of the library, paired with a stable name.
template <class S>
std::vector<std::pair<std::string, Tensor<S>>> named_trainable_params(
    const ExpertLibrary<S>& lib) {
  std::vector<std::pair<std::string, Tensor<S>>> out;
  for (const auto& expert : lib.experts) {
    const std::string p = "expert" + std::to_string(expert.index) + ".";
    for (const auto& ad : expert.adapters) {
      out.emplace_back(p + ad.layer_id + ".a", ad.a);
      out.emplace_back(p + ad.layer_id + ".b", ad.b);
    }
  }
  return out;
}

template <class S>
std::vector<Tensor<S>> trainable_params(const ExpertLibrary<S>& lib) {
  std::vector<Tensor<S>> out;
  for (auto& [name, t] : named_trainable_params(lib)) out.push_back(t);
  return out;
}

}  // namespace lmoe
