#pragma once

// The assembled model: frozen backbone, expert library, and one gate per
// adapted layer (or a single shared gate). The adapted forward routes every
// token at every adapted layer and mixes expert updates with the routing
// probabilities.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lmoe/backbone.hpp"
#include "lmoe/errors.hpp"
#include "lmoe/gating.hpp"
#include "lmoe/lora.hpp"
#include "lmoe/tensor.hpp"

namespace lmoe {

struct MoeConfig {
  std::size_t num_experts = 4;
  std::size_t rank = 2;
  double alpha = 1.0;
  bool share_gate = false;  // one gate for all layers instead of one per layer

  void validate() const {
    if (num_experts == 0) throw config_error("moe.num_experts: must be >= 1");
    if (rank == 0) throw config_error("moe.rank: must be >= 1");
  }
};

template <class S>
struct LMoEModel {
  BackboneModel<S> backbone;
  ExpertLibrary<S> library;
  MoeConfig moe;
  std::vector<GateNet<S>> gates;  // size |L|, or 1 when shared

  const GateNet<S>& gate_for(std::size_t layer_index) const {
    return moe.share_gate ? gates[0] : gates[layer_index];
  }

  std::vector<std::string> adapted_layer_ids() const {
    return backbone.config.adapted_layer_ids();
  }

  std::vector<std::pair<std::string, Tensor<S>>> named_gate_params() const {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    for (const auto& g : gates) {
      out.emplace_back("gate." + g.scope + ".weight", g.weight);
      out.emplace_back("gate." + g.scope + ".bias", g.bias);
    }
    return out;
  }

  // All trainable tensors: the expert library plus the gate parameters.
  std::vector<std::pair<std::string, Tensor<S>>> named_trainables() const {
    auto out = named_trainable_params(library);
    for (auto& p : named_gate_params()) out.push_back(std::move(p));
    return out;
  }

  std::vector<Tensor<S>> trainables() const {
    std::vector<Tensor<S>> out;
    for (auto& [name, t] : named_trainables()) out.push_back(t);
    return out;
  }
};

template <class S>
LMoEModel<S> init_model(const BackboneConfig& backbone_cfg, const MoeConfig& moe,
                        std::uint64_t seed) {
  moe.validate();
  LMoEModel<S> m;
  m.backbone = init_backbone<S>(backbone_cfg, seed);
  m.library = init_library<S>(backbone_cfg, moe.num_experts, moe.rank, moe.alpha, seed);
  m.moe = moe;
  if (moe.share_gate) {
    m.gates.push_back(init_gate<S>(moe.num_experts, backbone_cfg.d_model, "shared"));
  } else {
    for (const auto& id : backbone_cfg.adapted_layer_ids()) {
      m.gates.push_back(init_gate<S>(moe.num_experts, backbone_cfg.d_model, id));
    }
  }
  return m;
}

// Forward pass with routing recorded per adapted layer (in forward order).
template <class S>
struct ModelForward {
  Tensor<S> logits;  // [B,T,V]
  std::vector<std::string> layer_ids;
  std::vector<RoutingOutput<S>> routing;  // parallel to layer_ids
};

template <class S>
ModelForward<S> model_forward(const LMoEModel<S>& model, const TokenIds& tokens) {
  ModelForward<S> out;
  const auto layer_ids = model.adapted_layer_ids();
  out.layer_ids = layer_ids;
  out.routing.resize(layer_ids.size());

  // Per-block routing cache: with one gate per layer each adapted projection
  // routes independently; with a shared gate the parameters coincide but the
  // evaluation still happens at each layer.
  AdapterHook<S> hook = [&](const LayerTap<S>& tap, const Tensor<S>& h_in) {
    std::size_t layer_index = 0;
    for (; layer_index < layer_ids.size(); ++layer_index)
      if (layer_ids[layer_index] == tap.layer_id) break;
    if (layer_index == layer_ids.size()) {
      throw config_error("model_forward: unexpected tapped layer '" + tap.layer_id + "'");
    }
    auto routing = route(model.gate_for(layer_index), tap.z);
    out.routing[layer_index] = routing;
    return composed_forward(tap, h_in, model.library, routing);
  };

  out.logits = backbone_forward(model.backbone, tokens, hook);
  return out;
}

}  // namespace lmoe
