// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "moelpr/data.hpp"
#include "moelpr/errors.hpp"
#include "moelpr/graph.hpp"
#include "moelpr/model.hpp"

namespace moelpr {

/// Components of a training objective for one batch. Values are per-token
/// means so the loss weights stay batch-size invariant.
struct LossBreakdown {
  double ntp = 0.0;
  double balance = 0.0;
  double lpr = 0.0;
  double total = 0.0;
  std::vector<double> per_layer_balance;
  int64_t tokens = 0;           // non-pad tokens in the batch
  int64_t original_tokens = 0;  // non-pad tokens tagged original
};

/// Next-token targets: position j predicts the token at j+1 within its row;
/// positions whose input or target is padding are excluded.
struct NtpTargets {
  std::vector<int32_t> targets;
  std::vector<uint8_t> include;
  int64_t count = 0;
};

inline NtpTargets ntp_targets(const TaggedBatch& b) {
  NtpTargets t;
  t.targets.assign(static_cast<size_t>(b.rows * b.seq), 0);
  t.include.assign(static_cast<size_t>(b.rows * b.seq), 0);
  for (int64_t r = 0; r < b.rows; ++r) {
    for (int64_t j = 0; j + 1 < b.seq; ++j) {
      const size_t here = static_cast<size_t>(r * b.seq + j);
      const size_t next = here + 1;
      if (b.pad[here] || b.pad[next]) continue;
      t.targets[here] = b.tokens[next];
      t.include[here] = 1;
      ++t.count;
    }
  }
  return t;
}

/// Mean cross-entropy of next-token prediction over non-pad positions.
inline Var ntp_loss(ComputeGraph& g, Var logits, const TaggedBatch& batch) {
  NtpTargets t = ntp_targets(batch);
  return g.cross_entropy(logits, t.targets, t.include);
}

/// Plain-value NTP loss for evaluation paths: returns (sum, count) of
/// per-position cross-entropies so callers can aggregate across batches.
struct CESum {
  double sum = 0.0;
  int64_t count = 0;
  double mean() const { return count ? sum / static_cast<double>(count) : 0.0; }
};

inline CESum ntp_loss_value(const Tensor& logits, const TaggedBatch& batch) {
  NtpTargets t = ntp_targets(batch);
  CESum out;
  for (int64_t r = 0; r < logits.rows; ++r) {
    if (!t.include[static_cast<size_t>(r)]) continue;
    const double* x = logits.row_ptr(r);
    double mx = x[0];
    for (int64_t j = 1; j < logits.cols; ++j) mx = std::max(mx, x[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < logits.cols; ++j) denom += std::exp(x[j] - mx);
    out.sum += -(x[t.targets[static_cast<size_t>(r)]] - mx - std::log(denom));
    out.count += 1;
  }
  return out;
}

namespace detail {

/// Expert selection counts over valid tokens for one layer of a trace.
inline std::vector<int64_t> selection_counts(const RoutingTrace& tr, int64_t layer) {
  std::vector<int64_t> counts(static_cast<size_t>(tr.experts), 0);
  for (int64_t t = 0; t < tr.tokens; ++t) {
    if (!tr.valid[static_cast<size_t>(t)]) continue;
    for (int64_t k = 0; k < tr.top_k; ++k)
      counts[static_cast<size_t>(tr.sel(layer, t, k))] += 1;
  }
  return counts;
}

inline int64_t valid_count(const RoutingTrace& tr) {
  int64_t n = 0;
  for (uint8_t v : tr.valid) n += (v != 0);
  return n;
}

inline int64_t original_count(const RoutingTrace& tr) {
  int64_t n = 0;
  for (size_t i = 0; i < tr.valid.size(); ++i)
    n += (tr.valid[i] != 0 && tr.original[i] != 0);
  return n;
}

}  // namespace detail

/// Expert-level load-balancing loss on the graph: per layer
/// f_i = N/(K*T) * |{t : i in T_t}|, P_i = mean_t G_i(t), sum_i f_i * P_i,
/// averaged over layers. f is a constant of the selection; gradients flow
/// through P. Pads are excluded from both counts and means.
inline Var balance_loss(ComputeGraph& g, const std::vector<Var>& router_probs,
                        const RoutingTrace& trace, std::vector<double>* per_layer = nullptr) {
  if (router_probs.empty() || trace.empty())
    throw DataError("balance_loss: empty routing trace");
  const int64_t T = detail::valid_count(trace);
  if (T == 0) throw DataError("balance_loss: no valid tokens in trace");
  const double n_over_kt = static_cast<double>(trace.experts) /
                           (static_cast<double>(trace.top_k) * static_cast<double>(T));
  Var acc;
  for (size_t l = 0; l < router_probs.size(); ++l) {
    const std::vector<int64_t> counts = detail::selection_counts(trace, static_cast<int64_t>(l));
    Tensor weights(trace.tokens, trace.experts);
    for (int64_t t = 0; t < trace.tokens; ++t) {
      if (!trace.valid[static_cast<size_t>(t)]) continue;
      for (int64_t i = 0; i < trace.experts; ++i)
        weights.at(t, i) = n_over_kt * static_cast<double>(counts[static_cast<size_t>(i)]);
    }
    Var term = g.scale(g.full_sum(g.mul_const(router_probs[l], weights)),
                       1.0 / static_cast<double>(T));
    if (per_layer) per_layer->push_back(g.scalar(term));
    acc = l == 0 ? term : g.add(acc, term);
  }
  return g.scale(acc, 1.0 / static_cast<double>(router_probs.size()));
}

/// Independent value-level recount of the balance loss from a trace.
inline double balance_loss_value(const RoutingTrace& tr) {
  if (tr.empty()) throw DataError("balance_loss: empty routing trace");
  const int64_t T = detail::valid_count(tr);
  if (T == 0) throw DataError("balance_loss: no valid tokens in trace");
  double total = 0.0;
  for (int64_t l = 0; l < tr.layers; ++l) {
    const std::vector<int64_t> counts = detail::selection_counts(tr, l);
    double layer = 0.0;
    for (int64_t i = 0; i < tr.experts; ++i) {
      const double f = static_cast<double>(tr.experts) * static_cast<double>(counts[i]) /
                       (static_cast<double>(tr.top_k) * static_cast<double>(T));
      double p = 0.0;
      for (int64_t t = 0; t < tr.tokens; ++t)
        if (tr.valid[static_cast<size_t>(t)]) p += tr.score(l, t, i);
      p /= static_cast<double>(T);
      layer += f * p;
    }
    total += layer;
  }
  return total / static_cast<double>(tr.layers);
}

/// Language-priors routing loss on the graph: mean over original-language
/// tokens and layers of -log G_0(t). Zero when the batch has no original
/// tokens.
inline Var lpr_loss(ComputeGraph& g, const std::vector<Var>& router_probs,
                    const RoutingTrace& trace) {
  const int64_t count = detail::original_count(trace);
  if (count == 0 || router_probs.empty()) return g.constant(Tensor::scalar(0.0));
  Tensor mask(trace.tokens, 1);
  for (int64_t t = 0; t < trace.tokens; ++t)
    mask.data[static_cast<size_t>(t)] =
        (trace.valid[static_cast<size_t>(t)] && trace.original[static_cast<size_t>(t)]) ? 1.0
                                                                                        : 0.0;
  Var acc;
  for (size_t l = 0; l < router_probs.size(); ++l) {
    Var term = g.full_sum(g.mul_const(g.log_elem(g.col_select(router_probs[l], 0)), mask));
    acc = l == 0 ? term : g.add(acc, term);
  }
  return g.scale(acc, -1.0 / (static_cast<double>(count) *
                              static_cast<double>(router_probs.size())));
}

inline double lpr_loss_value(const RoutingTrace& tr) {
  const int64_t count = detail::original_count(tr);
  if (count == 0 || tr.layers == 0) return 0.0;
  double total = 0.0;
  for (int64_t l = 0; l < tr.layers; ++l)
    for (int64_t t = 0; t < tr.tokens; ++t)
      if (tr.valid[static_cast<size_t>(t)] && tr.original[static_cast<size_t>(t)])
        total += -std::log(tr.score(l, t, 0));
  return total / (static_cast<double>(count) * static_cast<double>(tr.layers));
}

/// A stage objective: the scalar loss node plus its evaluated breakdown.
struct StageLosses {
  Var total;
  LossBreakdown values;
};

namespace detail {

inline void fill_token_counts(LossBreakdown& b, const TaggedBatch& batch) {
  b.tokens = batch.valid_tokens();
  b.original_tokens = batch.original_tokens();
}

}  // namespace detail

/// Post-pretraining objective: NTP + alpha * balance (Eq. of stage 1).
/// For a dense model the balance term is absent and the objective is NTP.
inline StageLosses stage1_objective(ComputeGraph& g, const MoEModel::Forward& fwd,
                                    const TaggedBatch& batch, double alpha) {
  if (alpha < 0) throw ConfigError("stage1_objective: alpha must be >= 0");
  StageLosses out;
  Var ntp = ntp_loss(g, fwd.logits, batch);
  out.values.ntp = g.scalar(ntp);
  if (!fwd.router_probs.empty()) {
    Var bal = balance_loss(g, fwd.router_probs, fwd.trace, &out.values.per_layer_balance);
    out.values.balance = g.scalar(bal);
    out.total = g.add(ntp, g.scale(bal, alpha));
  } else {
    out.total = ntp;
  }
  out.values.total = g.scalar(out.total);
  detail::fill_token_counts(out.values, batch);
  return out;
}

/// Review objective: NTP + gamma * LPR; the balance loss is removed.
inline StageLosses stage2_objective(ComputeGraph& g, const MoEModel::Forward& fwd,
                                    const TaggedBatch& batch, double gamma) {
  if (gamma < 0) throw ConfigError("stage2_objective: gamma must be >= 0");
  if (fwd.router_probs.empty())
    throw ConfigError("stage2_objective: review requires an MoE model");
  StageLosses out;
  Var ntp = ntp_loss(g, fwd.logits, batch);
  out.values.ntp = g.scalar(ntp);
  Var lpr = lpr_loss(g, fwd.router_probs, fwd.trace);
  out.values.lpr = g.scalar(lpr);
  out.total = g.add(ntp, g.scale(lpr, gamma));
  out.values.total = g.scalar(out.total);
  detail::fill_token_counts(out.values, batch);
  return out;
}

/// One-stage variant: NTP + alpha * balance + gamma * LPR in a single run.
inline StageLosses one_stage_objective(ComputeGraph& g, const MoEModel::Forward& fwd,
                                       const TaggedBatch& batch, double alpha, double gamma) {
  if (fwd.router_probs.empty())
    throw ConfigError("one_stage_objective: requires an MoE model");
  StageLosses out;
  Var ntp = ntp_loss(g, fwd.logits, batch);
  out.values.ntp = g.scalar(ntp);
  Var bal = balance_loss(g, fwd.router_probs, fwd.trace, &out.values.per_layer_balance);
  out.values.balance = g.scalar(bal);
  Var lpr = lpr_loss(g, fwd.router_probs, fwd.trace);
  out.values.lpr = g.scalar(lpr);
  out.total = g.add(g.add(ntp, g.scale(bal, alpha)), g.scale(lpr, gamma));
  out.values.total = g.scalar(out.total);
  detail::fill_token_counts(out.values, batch);
  return out;
}

}  // namespace moelpr
