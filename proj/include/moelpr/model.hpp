// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "moelpr/data.hpp"
#include "moelpr/errors.hpp"
#include "moelpr/graph.hpp"
#include "moelpr/tensor.hpp"

namespace moelpr {

/// Architecture of the decoder-only stack. num_experts == 0 means a plain
/// dense FFN per layer (no router); num_experts >= 1 selects the MoE form
/// where expert 0 is the original dense FFN after upcycling.
struct ModelConfig {
  int64_t vocab_size = 512;
  int64_t hidden = 64;
  int64_t layers = 2;
  int64_t heads = 4;
  int64_t ffn = 256;
  int64_t num_experts = 0;
  int64_t top_k = 0;
  int64_t max_seq = 64;

  bool is_moe() const { return num_experts > 0; }

  void validate() const {
    if (vocab_size < 2) throw ConfigError("ModelConfig: vocab_size must be >= 2");
    if (hidden < 1 || layers < 1 || heads < 1 || ffn < 1 || max_seq < 1)
      throw ConfigError("ModelConfig: dimensions must be positive");
    if (hidden % heads != 0)
      throw ConfigError("ModelConfig: hidden " + std::to_string(hidden) +
                        " not divisible by heads " + std::to_string(heads));
    if (num_experts < 0) throw ConfigError("ModelConfig: num_experts must be >= 0");
    if (is_moe()) {
      if (top_k < 1 || top_k > num_experts)
        throw ConfigError("ModelConfig: top_k " + std::to_string(top_k) +
                          " outside [1, " + std::to_string(num_experts) + "]");
    } else if (top_k != 0) {
      throw ConfigError("ModelConfig: dense model must have top_k == 0");
    }
  }

  nlohmann::json to_json() const {
    return {{"vocab_size", vocab_size}, {"hidden", hidden},   {"layers", layers},
            {"heads", heads},           {"ffn", ffn},         {"num_experts", num_experts},
            {"top_k", top_k},           {"max_seq", max_seq}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int64_t>();
    c.hidden = j.at("hidden").get<int64_t>();
    c.layers = j.at("layers").get<int64_t>();
    c.heads = j.at("heads").get<int64_t>();
    c.ffn = j.at("ffn").get<int64_t>();
    c.num_experts = j.at("num_experts").get<int64_t>();
    c.top_k = j.at("top_k").get<int64_t>();
    c.max_seq = j.at("max_seq").get<int64_t>();
    c.validate();
    return c;
  }
};

/// Ordered named-tensor store. Iteration order is creation order, which also
/// fixes the checkpoint layout and the optimizer's update order.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw Error("ParamStore: duplicate name '" + name + "'");
    index_[name] = items_.size();
    items_.emplace_back(name, std::move(t));
    return items_.back().second;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Tensor& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("ParamStore: no parameter '" + name + "'");
    return items_[it->second].second;
  }
  const Tensor& get(const std::string& name) const {
    return const_cast<ParamStore*>(this)->get(name);
  }

  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  size_t size() const { return items_.size(); }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, size_t> index_;
};

/// Per-token routing record across all layers of one forward pass: full
/// softmax scores G, the selected top-K set, and the renormalized weights.
struct RoutingTrace {
  int64_t layers = 0;
  int64_t tokens = 0;
  int64_t experts = 0;
  int64_t top_k = 0;
  std::vector<double> scores;     // layers * tokens * experts
  std::vector<int32_t> selected;  // layers * tokens * top_k
  std::vector<double> weights;    // layers * tokens * top_k
  std::vector<uint8_t> valid;     // tokens (1 = non-pad)
  std::vector<uint8_t> original;  // tokens (1 = original-language)

  double score(int64_t l, int64_t t, int64_t i) const {
    return scores[static_cast<size_t>((l * tokens + t) * experts + i)];
  }
  int32_t sel(int64_t l, int64_t t, int64_t k) const {
    return selected[static_cast<size_t>((l * tokens + t) * top_k + k)];
  }
  double weight(int64_t l, int64_t t, int64_t k) const {
    return weights[static_cast<size_t>((l * tokens + t) * top_k + k)];
  }
  bool empty() const { return layers == 0 || tokens == 0; }
};

/// Top-K selection over a score vector with renormalized weights.
/// Ties break toward the lowest index.
struct TopKSelection {
  std::vector<int32_t> idx;  // in descending-score order
  std::vector<double> w;     // renormalized, sums to 1
};

inline TopKSelection select_topk(const double* scores, int64_t n, int64_t k) {
  if (k < 1 || k > n)
    throw ConfigError("select_topk: K " + std::to_string(k) + " outside [1, " +
                      std::to_string(n) + "]");
  std::vector<int32_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = static_cast<int32_t>(i);
  std::partial_sort(order.begin(), order.begin() + k, order.end(),
                    [scores](int32_t a, int32_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });
  TopKSelection sel;
  sel.idx.assign(order.begin(), order.begin() + k);
  double denom = 0.0;
  for (int32_t i : sel.idx) denom += scores[i];
  sel.w.reserve(sel.idx.size());
  for (int32_t i : sel.idx) sel.w.push_back(scores[i] / denom);
  return sel;
}

inline TopKSelection select_topk(const Tensor& scores, int64_t k) {
  if (scores.rows != 1) throw ShapeError("select_topk: expected a row vector");
  return select_topk(scores.data.data(), scores.cols, k);
}

/// Router scores for a block of token representations: softmax(x * W_r) rows.
inline Tensor router_scores(const Tensor& x, const Tensor& w_r) {
  ComputeGraph g;
  return g.value(g.row_softmax(g.matmul(g.constant(x), g.constant(w_r))));
}

using TrainabilityMask = std::map<std::string, bool>;

/// Decoder-only transformer with pre-norm blocks. The FFN slot per layer is
/// either one dense FFN or an MoE mixture with residual, per config.
class MoEModel {
 public:
  ModelConfig config;
  ParamStore params;
  uint64_t seed = 0;

  static constexpr double kInitStd = 0.02;

  /// Random initialization; draws happen in parameter creation order so a
  /// seed pins every weight.
  static MoEModel init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    MoEModel m;
    m.config = cfg;
    m.seed = seed;
    std::mt19937_64 rng(seed);
    auto w = [&](int64_t r, int64_t c) { return randn(r, c, kInitStd, rng); };
    m.params.add("embed.tok", w(cfg.vocab_size, cfg.hidden));
    m.params.add("embed.pos", w(cfg.max_seq, cfg.hidden));
    for (int64_t l = 0; l < cfg.layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      m.params.add(p + "ln1.gamma", Tensor(1, cfg.hidden, 1.0));
      m.params.add(p + "ln1.beta", Tensor(1, cfg.hidden, 0.0));
      m.params.add(p + "attn.wq", w(cfg.hidden, cfg.hidden));
      m.params.add(p + "attn.wk", w(cfg.hidden, cfg.hidden));
      m.params.add(p + "attn.wv", w(cfg.hidden, cfg.hidden));
      m.params.add(p + "attn.wo", w(cfg.hidden, cfg.hidden));
      m.params.add(p + "ln2.gamma", Tensor(1, cfg.hidden, 1.0));
      m.params.add(p + "ln2.beta", Tensor(1, cfg.hidden, 0.0));
      if (cfg.is_moe()) {
        m.params.add(p + "router", router_init(cfg.hidden, cfg.num_experts, rng));
        for (int64_t e = 0; e < cfg.num_experts; ++e) {
          const std::string ep = p + "expert" + std::to_string(e) + ".";
          m.params.add(ep + "w1", w(cfg.hidden, cfg.ffn));
          m.params.add(ep + "w2", w(cfg.ffn, cfg.hidden));
        }
      } else {
        m.params.add(p + "ffn.w1", w(cfg.hidden, cfg.ffn));
        m.params.add(p + "ffn.w2", w(cfg.ffn, cfg.hidden));
      }
    }
    m.params.add("final_ln.gamma", Tensor(1, cfg.hidden, 1.0));
    m.params.add("final_ln.beta", Tensor(1, cfg.hidden, 0.0));
    m.params.add("head.w", w(cfg.hidden, cfg.vocab_size));
    return m;
  }

  /// Small uniform init keeps initial routing near-uniform; function
  /// preservation after expert-copy holds for any router values.
  static Tensor router_init(int64_t hidden, int64_t experts, std::mt19937_64& rng) {
    const double bound = 0.02 / std::sqrt(static_cast<double>(hidden));
    return rand_uniform(hidden, experts, -bound, bound, rng);
  }

  struct Forward {
    Var logits;
    std::vector<Var> router_probs;  // per layer, rows x N softmax scores
    RoutingTrace trace;
    std::map<std::string, Var> bound;  // parameter leaves by name
    int64_t rows = 0;
  };

  /// Builds the forward graph for a batch. `trainable` marks which parameter
  /// leaves receive gradients (null = evaluation only).
  Forward lm_forward(ComputeGraph& g, const TaggedBatch& batch,
                     const TrainabilityMask* trainable = nullptr) const {
    if (batch.seq > config.max_seq)
      throw ConfigError("lm_forward: sequence length " + std::to_string(batch.seq) +
                        " exceeds max_seq " + std::to_string(config.max_seq));
    if (batch.rows < 1) throw DataError("lm_forward: empty batch");
    for (int32_t id : batch.tokens)
      if (id < 0 || id >= config.vocab_size)
        throw DataError("lm_forward: token id " + std::to_string(id) +
                        " outside vocab of " + std::to_string(config.vocab_size));

    Forward f;
    f.rows = batch.rows * batch.seq;
    for (const auto& [name, tensor] : params.items()) {
      bool req = false;
      if (trainable) {
        auto it = trainable->find(name);
        req = it != trainable->end() && it->second;
      }
      f.bound.emplace(name, g.param(tensor, req));
    }
    auto P = [&](const std::string& name) -> Var { return f.bound.at(name); };

    std::vector<int32_t> pos_ids(static_cast<size_t>(f.rows));
    for (int64_t r = 0; r < batch.rows; ++r)
      for (int64_t j = 0; j < batch.seq; ++j)
        pos_ids[static_cast<size_t>(r * batch.seq + j)] = static_cast<int32_t>(j);

    if (config.is_moe()) {
      f.trace.layers = config.layers;
      f.trace.tokens = f.rows;
      f.trace.experts = config.num_experts;
      f.trace.top_k = config.top_k;
      f.trace.scores.resize(static_cast<size_t>(config.layers * f.rows * config.num_experts));
      f.trace.selected.resize(static_cast<size_t>(config.layers * f.rows * config.top_k));
      f.trace.weights.resize(static_cast<size_t>(config.layers * f.rows * config.top_k));
      f.trace.valid.assign(batch.pad.size(), 0);
      for (size_t i = 0; i < batch.pad.size(); ++i) f.trace.valid[i] = batch.pad[i] ? 0 : 1;
      f.trace.original = batch.original;
    }

    Var x = g.add(g.embed(batch.tokens, P("embed.tok")), g.embed(pos_ids, P("embed.pos")));
    for (int64_t l = 0; l < config.layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      Var a = g.layer_norm(x, P(p + "ln1.gamma"), P(p + "ln1.beta"));
      Var att = g.attention(g.matmul(a, P(p + "attn.wq")), g.matmul(a, P(p + "attn.wk")),
                            g.matmul(a, P(p + "attn.wv")), batch.rows, batch.seq, config.heads);
      x = g.add(x, g.matmul(att, P(p + "attn.wo")));
      Var u = g.layer_norm(x, P(p + "ln2.gamma"), P(p + "ln2.beta"));
      if (config.is_moe()) {
        std::vector<std::pair<Var, Var>> experts;
        experts.reserve(static_cast<size_t>(config.num_experts));
        for (int64_t e = 0; e < config.num_experts; ++e) {
          const std::string ep = p + "expert" + std::to_string(e) + ".";
          experts.emplace_back(P(ep + "w1"), P(ep + "w2"));
        }
        Var probs;
        x = moe_block(g, u, P(p + "router"), experts, config.top_k, &probs, &f.trace, l);
        f.router_probs.push_back(probs);
      } else {
        Var mid = g.gelu(g.matmul(u, P(p + "ffn.w1")));
        x = g.add(g.matmul(mid, P(p + "ffn.w2")), u);
      }
      if (!g.value(x).all_finite())
        throw NumericError("lm_forward: non-finite values leaving layer " + std::to_string(l));
    }
    Var fin = g.layer_norm(x, P("final_ln.gamma"), P("final_ln.beta"));
    f.logits = g.matmul(fin, P("head.w"));
    return f;
  }

  /// One MoE FFN slot: softmax router scores, top-K selection, renormalized
  /// convex combination of expert outputs, plus residual. Tokens are
  /// dispatched per expert via gather/scatter; gate weights stay on the graph
  /// so router gradients flow through the renormalization.
  static Var moe_block(ComputeGraph& g, Var u, Var router,
                       const std::vector<std::pair<Var, Var>>& experts, int64_t top_k,
                       Var* probs_out, RoutingTrace* trace, int64_t layer) {
    const int64_t rows = g.value(u).rows;
    const int64_t n_experts = static_cast<int64_t>(experts.size());
    Var probs = g.row_softmax(g.matmul(u, router));
    if (probs_out) *probs_out = probs;
    const Tensor& pv = g.value(probs);

    Tensor mask(rows, n_experts);
    std::vector<std::vector<int64_t>> expert_rows(static_cast<size_t>(n_experts));
    for (int64_t r = 0; r < rows; ++r) {
      TopKSelection sel = select_topk(pv.row_ptr(r), n_experts, top_k);
      for (int64_t k = 0; k < top_k; ++k) {
        const int32_t e = sel.idx[static_cast<size_t>(k)];
        mask.at(r, e) = 1.0;
        expert_rows[static_cast<size_t>(e)].push_back(r);
        if (trace) {
          const size_t base = static_cast<size_t>((layer * trace->tokens + r) * top_k + k);
          trace->selected[base] = e;
          trace->weights[base] = sel.w[static_cast<size_t>(k)];
        }
      }
      if (trace) {
        const size_t base = static_cast<size_t>((layer * trace->tokens + r) * n_experts);
        std::copy(pv.row_ptr(r), pv.row_ptr(r) + n_experts, trace->scores.begin() + base);
      }
    }

    Var masked = g.mul_const(probs, mask);
    Var gates = g.div_by_col(masked, g.row_sum(masked));

    Var y = u;  // residual
    for (int64_t e = 0; e < n_experts; ++e) {
      const auto& idx = expert_rows[static_cast<size_t>(e)];
      if (idx.empty()) continue;
      Var sub = g.gather_rows(u, idx);
      Var mid = g.gelu(g.matmul(sub, experts[static_cast<size_t>(e)].first));
      Var out = g.matmul(mid, experts[static_cast<size_t>(e)].second);
      Var gcol = g.gather_rows(g.col_select(gates, e), idx);
      y = g.add(y, g.scatter_rows(g.mul_by_col(out, gcol), idx, rows));
    }
    return y;
  }

  struct Census {
    int64_t total_params = 0;
    int64_t activated_params_per_token = 0;
  };

  /// Total parameter count and the activated count per token: everything
  /// outside the expert stacks plus K experts and K router columns per MoE
  /// layer. Counting the router at its K selected columns keeps the activated
  /// figure independent of how many experts are parked in the model.
  Census param_census() const {
    Census c;
    for (const auto& [name, t] : params.items()) c.total_params += t.numel();
    c.activated_params_per_token = c.total_params;
    if (config.is_moe()) {
      for (int64_t l = 0; l < config.layers; ++l) {
        const std::string ep = "layer" + std::to_string(l) + ".expert0.";
        const int64_t per_expert =
            params.get(ep + "w1").numel() + params.get(ep + "w2").numel();
        c.activated_params_per_token -=
            (config.num_experts - config.top_k) * (per_expert + config.hidden);
      }
    }
    return c;
  }
};

/// Standalone single-layer MoE forward (outside the transformer stack):
/// y = sum_{i in T} w_i E_i(x) + x, with the full routing trace for the rows.
struct MoELayerParams {
  Tensor router;                                  // h x N
  std::vector<std::pair<Tensor, Tensor>> experts; // (w1: h x f, w2: f x h)
  int64_t top_k = 2;
};

struct MoELayerResult {
  Tensor y;
  RoutingTrace trace;
};

inline MoELayerResult moe_layer_forward(const MoELayerParams& layer, const Tensor& x) {
  if (layer.experts.empty()) throw ConfigError("moe_layer_forward: no experts");
  ComputeGraph g;
  Var u = g.constant(x);
  Var router = g.constant(layer.router);
  std::vector<std::pair<Var, Var>> experts;
  for (const auto& [w1, w2] : layer.experts)
    experts.emplace_back(g.constant(w1), g.constant(w2));
  MoELayerResult res;
  res.trace.layers = 1;
  res.trace.tokens = x.rows;
  res.trace.experts = static_cast<int64_t>(layer.experts.size());
  res.trace.top_k = layer.top_k;
  res.trace.scores.resize(static_cast<size_t>(x.rows * res.trace.experts));
  res.trace.selected.resize(static_cast<size_t>(x.rows * layer.top_k));
  res.trace.weights.resize(static_cast<size_t>(x.rows * layer.top_k));
  res.trace.valid.assign(static_cast<size_t>(x.rows), 1);
  res.trace.original.assign(static_cast<size_t>(x.rows), 0);
  Var y = MoEModel::moe_block(g, u, router, experts, layer.top_k, nullptr, &res.trace, 0);
  if (!g.value(y).all_finite())
    throw NumericError("moe_layer_forward: non-finite output");
  res.y = g.value(y);
  return res;
}

}  // namespace moelpr
