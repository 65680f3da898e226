#pragma once

// A small decoder-only transformer language model whose parameters are frozen
// after initialization. Each adaptable linear projection (by default the two
// FFN projections of every block) exposes a hook point so callers can replace
// the plain projection with an adapted one.

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "lmoe/errors.hpp"
#include "lmoe/random.hpp"
#include "lmoe/tensor.hpp"

namespace lmoe {

struct BackboneConfig {
  std::size_t vocab_size = 0;  // resolved from the corpus vocabulary
  std::size_t d_model = 16;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_ff = 64;
  std::size_t max_seq_len = 32;
  // Which FFN projections of every block belong to the adapted layer set L.
  std::vector<std::string> adapted_layers = {"ffn_up", "ffn_down"};

  void validate() const {
    if (vocab_size == 0) throw config_error("backbone.vocab_size: must be > 0");
    if (d_model == 0) throw config_error("backbone.d_model: must be > 0");
    if (n_layers == 0) throw config_error("backbone.n_layers: must be > 0");
    if (n_heads == 0) throw config_error("backbone.n_heads: must be > 0");
    if (d_model % n_heads != 0) {
      throw config_error("backbone.n_heads: d_model (" + std::to_string(d_model) +
                         ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
    }
    if (d_ff == 0) throw config_error("backbone.d_ff: must be > 0");
    if (max_seq_len == 0) throw config_error("backbone.max_seq_len: must be > 0");
    if (adapted_layers.empty()) {
      throw config_error("backbone.adapted_layers: the adapted layer set must be non-empty");
    }
    for (const auto& role : adapted_layers) {
      if (role != "ffn_up" && role != "ffn_down") {
        throw config_error("backbone.adapted_layers: unknown projection '" + role +
                           "' (expected ffn_up or ffn_down)");
      }
    }
  }

  bool adapts(const std::string& role) const {
    for (const auto& r : adapted_layers)
      if (r == role) return true;
    return false;
  }

  // Resolved layer ids of L, in forward-pass order.
  std::vector<std::string> adapted_layer_ids() const {
    std::vector<std::string> ids;
    for (std::size_t b = 0; b < n_layers; ++b) {
      if (adapts("ffn_up")) ids.push_back("block" + std::to_string(b) + ".ffn_up");
      if (adapts("ffn_down")) ids.push_back("block" + std::to_string(b) + ".ffn_down");
    }
    return ids;
  }

  // (out_dim, in_dim) of the W0 behind a layer id's role.
  std::pair<std::size_t, std::size_t> layer_dims(const std::string& role) const {
    if (role == "ffn_up") return {d_ff, d_model};
    return {d_model, d_ff};
  }
};

enum class ProjRole { FfnUp, FfnDown };

inline const char* role_name(ProjRole role) {
  return role == ProjRole::FfnUp ? "ffn_up" : "ffn_down";
}

// Context handed to the adapter hook at each adapted projection. `z` is the
// token hidden state entering the FFN sublayer (width d_model), shared by
// both adapted projections of the block. `w0` is the frozen weight behind
// the tapped projection.
template <class S>
struct LayerTap {
  std::string layer_id;
  std::size_t block = 0;
  ProjRole role = ProjRole::FfnUp;
  std::size_t in_dim = 0;   // k of W0 in R^{d x k}
  std::size_t out_dim = 0;  // d
  Tensor<S> z;              // [B,T,d_model]
  Tensor<S> w0;             // [d, k]
};

template <class S>
using AdapterHook = std::function<Tensor<S>(const LayerTap<S>&, const Tensor<S>&)>;

// y = h W0^T over the trailing axis: h [.., k] -> [.., d] for W0 [d, k].
template <class S>
Tensor<S> project(const Tensor<S>& w0, const Tensor<S>& h) {
  const std::size_t k = h.shape().back();
  if (w0.rank() != 2 || w0.shape()[1] != k) {
    throw shape_error("project: weight " + shape_str(w0.shape()) + " against input " +
                      shape_str(h.shape()));
  }
  const std::size_t rows = h.size() / k;
  auto flat = reshape(h, {rows, k});
  auto out = matmul(flat, transpose(w0, {1, 0}));
  Shape out_shape = h.shape();
  out_shape.back() = w0.shape()[0];
  return reshape(out, std::move(out_shape));
}

template <class S>
struct BackboneModel {
  struct Block {
    Tensor<S> ln1_g, ln1_b;
    Tensor<S> wq, wk, wv, wo;  // [d_model, d_model]
    Tensor<S> ln2_g, ln2_b;
    Tensor<S> w_up;    // [d_ff, d_model]
    Tensor<S> w_down;  // [d_model, d_ff]
  };

  BackboneConfig config;
  Tensor<S> tok_emb;  // [V, d_model]
  Tensor<S> pos_emb;  // [max_seq_len, d_model]
  std::vector<Block> blocks;
  Tensor<S> lnf_g, lnf_b;
  Tensor<S> w_head;  // [V, d_model]

  std::vector<std::pair<std::string, Tensor<S>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    out.emplace_back("backbone.tok_emb", tok_emb);
    out.emplace_back("backbone.pos_emb", pos_emb);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const std::string p = "backbone.block" + std::to_string(b) + ".";
      const Block& blk = blocks[b];
      out.emplace_back(p + "ln1_g", blk.ln1_g);
      out.emplace_back(p + "ln1_b", blk.ln1_b);
      out.emplace_back(p + "wq", blk.wq);
      out.emplace_back(p + "wk", blk.wk);
      out.emplace_back(p + "wv", blk.wv);
      out.emplace_back(p + "wo", blk.wo);
      out.emplace_back(p + "ln2_g", blk.ln2_g);
      out.emplace_back(p + "ln2_b", blk.ln2_b);
      out.emplace_back(p + "w_up", blk.w_up);
      out.emplace_back(p + "w_down", blk.w_down);
    }
    out.emplace_back("backbone.lnf_g", lnf_g);
    out.emplace_back("backbone.lnf_b", lnf_b);
    out.emplace_back("backbone.w_head", w_head);
    return out;
  }

  std::vector<Tensor<S>> parameters() const {
    std::vector<Tensor<S>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : parameters()) n += t.size();
    return n;
  }
};

// FNV-1a over the raw bytes of every parameter, in declaration order. Used to
// assert the frozen-backbone invariant across training runs.
template <class S>
std::uint64_t param_checksum(const std::vector<Tensor<S>>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : params) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.value().data());
    for (std::size_t i = 0; i < t.size() * sizeof(S); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

inline constexpr double kBackboneInitStd = 0.02;

// Deterministic frozen initialization: weights ~ N(0, 0.02^2), layer-norm
// gains 1 and biases 0. All parameters have requires_grad=false.
template <class S>
BackboneModel<S> init_backbone(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(stream_seed(seed, "backbone"));
  const std::size_t c = config.d_model;

  auto weight = [&](Shape shape) { return Tensor<S>::randn(std::move(shape), rng, kBackboneInitStd); };

  BackboneModel<S> m;
  m.config = config;
  m.tok_emb = weight({config.vocab_size, c});
  m.pos_emb = weight({config.max_seq_len, c});
  for (std::size_t b = 0; b < config.n_layers; ++b) {
    typename BackboneModel<S>::Block blk;
    blk.ln1_g = Tensor<S>::full({c}, S(1));
    blk.ln1_b = Tensor<S>::zeros({c});
    blk.wq = weight({c, c});
    blk.wk = weight({c, c});
    blk.wv = weight({c, c});
    blk.wo = weight({c, c});
    blk.ln2_g = Tensor<S>::full({c}, S(1));
    blk.ln2_b = Tensor<S>::zeros({c});
    blk.w_up = weight({config.d_ff, c});
    blk.w_down = weight({c, config.d_ff});
    m.blocks.push_back(std::move(blk));
  }
  m.lnf_g = Tensor<S>::full({c}, S(1));
  m.lnf_b = Tensor<S>::zeros({c});
  m.w_head = weight({config.vocab_size, c});
  return m;
}

// Causal forward pass. At every projection in the adapted layer set the hook
// (when given) replaces the plain projection; everywhere else W0 is applied
// directly. Returns logits [B,T,V].
template <class S>
Tensor<S> backbone_forward(const BackboneModel<S>& model, const TokenIds& tokens,
                           const AdapterHook<S>& hook = nullptr) {
  const BackboneConfig& cfg = model.config;
  const std::size_t B = tokens.batch, T = tokens.seq;
  if (tokens.ids.size() != B * T) {
    throw shape_error("backbone_forward: " + std::to_string(tokens.ids.size()) +
                      " ids for batch " + std::to_string(B) + " x seq " + std::to_string(T));
  }
  if (T == 0 || B == 0) throw data_error("backbone_forward: empty token batch");
  if (T > cfg.max_seq_len) {
    throw data_error("backbone_forward: sequence length " + std::to_string(T) +
                     " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  for (std::int32_t id : tokens.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw vocab_error("backbone_forward: token id " + std::to_string(id) +
                        " outside vocabulary of size " + std::to_string(cfg.vocab_size));
    }
  }

  const std::size_t C = cfg.d_model;
  const std::size_t H = cfg.n_heads;
  const std::size_t hd = C / H;

  // Token + learned positional embeddings.
  auto x = embedding<S>(model.tok_emb, tokens.ids, {B, T});
  std::vector<std::int32_t> positions(T);
  for (std::size_t t = 0; t < T; ++t) positions[t] = static_cast<std::int32_t>(t);
  x = add(x, embedding<S>(model.pos_emb, positions, {T}));

  // Additive causal mask, shared across batch and heads.
  auto mask = Tensor<S>::zeros({T, T});
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = i + 1; j < T; ++j) mask.mut_value()[i * T + j] = S(-1e9);

  auto split_heads = [&](const Tensor<S>& t) {
    return transpose(reshape(t, {B, T, H, hd}), {0, 2, 1, 3});  // [B,H,T,hd]
  };

  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const auto& blk = model.blocks[b];

    // Attention sublayer.
    auto h = layer_norm(x, blk.ln1_g, blk.ln1_b);
    auto q = split_heads(project(blk.wq, h));
    auto k = split_heads(project(blk.wk, h));
    auto v = split_heads(project(blk.wv, h));
    auto scores = scale(matmul(q, transpose(k, {0, 1, 3, 2})),
                        S(1) / static_cast<S>(std::sqrt(static_cast<double>(hd))));
    scores = softmax(add(scores, mask), -1);
    auto ctx = reshape(transpose(matmul(scores, v), {0, 2, 1, 3}), {B, T, C});
    x = add(x, project(blk.wo, ctx));

    // FFN sublayer; x here is the hidden state the gates see.
    auto z = x;
    auto h2 = layer_norm(x, blk.ln2_g, blk.ln2_b);

    Tensor<S> up;
    if (hook && cfg.adapts("ffn_up")) {
      LayerTap<S> tap{"block" + std::to_string(b) + ".ffn_up", b, ProjRole::FfnUp,
                      C, cfg.d_ff, z, blk.w_up};
      up = hook(tap, h2);
    } else {
      up = project(blk.w_up, h2);
    }
    auto act = gelu(up);

    Tensor<S> down;
    if (hook && cfg.adapts("ffn_down")) {
      LayerTap<S> tap{"block" + std::to_string(b) + ".ffn_down", b, ProjRole::FfnDown,
                      cfg.d_ff, C, z, blk.w_down};
      down = hook(tap, act);
    } else {
      down = project(blk.w_down, act);
    }
    x = add(x, down);
  }

  x = layer_norm(x, model.lnf_g, model.lnf_b);
  return project(model.w_head, x);
}

}  // namespace lmoe
