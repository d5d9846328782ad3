// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "moelpr/checkpoint.hpp"
#include "moelpr/data.hpp"
#include "moelpr/errors.hpp"
#include "moelpr/losses.hpp"
#include "moelpr/model.hpp"
#include "moelpr/optimizer.hpp"
#include "moelpr/upcycle.hpp"

namespace moelpr {

/// Hyperparameters for one training stage. Stage 1 owns alpha (balance
/// weight), stage 2 owns gamma (LPR weight); setting the wrong one is a
/// config error. The one_stage flag folds LPR + replay into stage 1.
struct StageConfig {
  Stage stage = Stage::stage1;
  int64_t steps = 0;
  int64_t batch_size = 8;
  int64_t seq_len = 64;
  double base_lr = 3e-3;
  int64_t warmup_steps = -1;  // -1 = default 1% of steps
  std::optional<double> alpha;
  std::optional<double> gamma;
  bool one_stage = false;
  uint64_t seed = 0;
  int64_t replay_original = 1;  // stage-2 document mix original:expanded
  int64_t replay_expanded = 2;
  int64_t checkpoint_every = 0;  // 0 = only the final checkpoint
  double min_lr = 0.0;
  double weight_decay = 0.0;

  static constexpr double kDefaultAlpha = 0.01;
  static constexpr double kDefaultGamma = 0.1;

  double effective_alpha() const { return alpha.value_or(kDefaultAlpha); }
  double effective_gamma() const { return gamma.value_or(kDefaultGamma); }
  int64_t effective_warmup() const { return warmup_steps >= 0 ? warmup_steps : steps / 100; }

  void validate() const {
    if (steps < 0) throw ConfigError("StageConfig: steps must be >= 0");
    if (batch_size < 1 || seq_len < 1)
      throw ConfigError("StageConfig: batch_size and seq_len must be >= 1");
    if (base_lr <= 0) throw ConfigError("StageConfig: base_lr must be positive");
    if (stage == Stage::stage1 && gamma.has_value() && !one_stage)
      throw ConfigError("StageConfig: gamma is a review (stage-2) weight; "
                        "the balance loss governs stage 1");
    if (stage == Stage::stage2 && alpha.has_value())
      throw ConfigError("StageConfig: alpha is a stage-1 weight; "
                        "the balance loss is removed in review");
    if (stage == Stage::stage2 && one_stage)
      throw ConfigError("StageConfig: one_stage is a stage-1 variant");
    if (replay_original < 0 || replay_expanded < 0)
      throw ConfigError("StageConfig: replay ratio parts must be >= 0");
  }
};

struct StepRecord {
  int64_t step = 0;
  double lr = 0.0;
  LossBreakdown losses;
};

struct TrainLog {
  std::vector<StepRecord> records;
  int64_t tokens_total = 0;
  int64_t tokens_original = 0;
  std::string final_checkpoint;  // empty when no out_dir given
};

namespace detail {

inline void write_log_line(std::ostream& os, const StepRecord& r) {
  os << "{\"step\":" << r.step << ",\"lr\":" << std::setprecision(17) << r.lr
     << ",\"ntp\":" << r.losses.ntp << ",\"balance\":" << r.losses.balance
     << ",\"lpr\":" << r.losses.lpr << ",\"total\":" << r.losses.total << "}\n";
}

inline void save_model_checkpoint(const MoEModel& model, const std::string& path) {
  Checkpoint c = checkpoint_from_model(model);
  if (model.config.is_moe()) {
    c.freeze["stage1"] = trainable_mask(model, Stage::stage1);
    c.freeze["stage2"] = trainable_mask(model, Stage::stage2);
  }
  save_checkpoint(path, c);
}

}  // namespace detail

/// Runs one training stage in place. Only mask-trainable parameters receive
/// optimizer updates; everything else stays bit-identical. A non-finite loss
/// aborts with NumericError after the last cadence checkpoint is left on
/// disk. Single-threaded and bit-reproducible under a fixed seed.
inline TrainLog run_stage(MoEModel& model, const TrainabilityMask& mask,
                          const StageConfig& cfg, BatchStream& stream,
                          const std::string& out_dir = "",
                          std::ostream* log_stream = nullptr) {
  cfg.validate();
  if (model.config.is_moe()) {
    if (mask != trainable_mask(model, cfg.stage))
      throw ConfigError("run_stage: mask does not match the " +
                        std::string(to_string(cfg.stage)) + " trainability contract");
  } else if (cfg.stage == Stage::stage2) {
    throw ConfigError("run_stage: review requires an MoE model");
  }
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

  TrainLog log;
  OptimizerState opt;
  opt.cfg.weight_decay = cfg.weight_decay;
  std::string last_ckpt;

  for (int64_t step = 0; step < cfg.steps; ++step) {
    const double lr =
        cosine_lr(step, cfg.steps, cfg.base_lr, cfg.effective_warmup(), cfg.min_lr);
    TaggedBatch batch = stream.next();

    ComputeGraph g;
    auto fwd = model.lm_forward(g, batch, &mask);
    StageLosses obj =
        cfg.stage == Stage::stage2
            ? stage2_objective(g, fwd, batch, cfg.effective_gamma())
        : (cfg.one_stage && model.config.is_moe())
            ? one_stage_objective(g, fwd, batch, cfg.effective_alpha(),
                                  cfg.effective_gamma())
            : stage1_objective(g, fwd, batch, cfg.effective_alpha());

    if (!std::isfinite(obj.values.total)) {
      throw NumericError("run_stage: non-finite loss at step " + std::to_string(step) +
                         (last_ckpt.empty() ? std::string(" (no checkpoint retained)")
                                            : " (last good checkpoint: " + last_ckpt + ")"));
    }
    g.backward(obj.total);

    std::vector<ParamUpdate> updates;
    std::vector<Tensor> grads;
    updates.reserve(model.params.size());
    grads.reserve(model.params.size());
    for (auto& [name, tensor] : model.params.items()) {
      const bool trainable = mask.count(name) && mask.at(name);
      if (trainable) {
        grads.push_back(g.grad_or_zero(fwd.bound.at(name)));
        updates.push_back({name, &tensor, &grads.back(), true});
      } else {
        updates.push_back({name, &tensor, nullptr, false});
      }
    }
    adam_step(updates, opt, lr);

    StepRecord rec{step, lr, obj.values};
    if (log_stream) detail::write_log_line(*log_stream, rec);
    log.records.push_back(std::move(rec));
    log.tokens_total += batch.valid_tokens();
    log.tokens_original += batch.original_tokens();

    if (!out_dir.empty() && cfg.checkpoint_every > 0 &&
        (step + 1) % cfg.checkpoint_every == 0) {
      std::ostringstream name;
      name << out_dir << "/step_" << std::setfill('0') << std::setw(6) << (step + 1)
           << ".ckpt";
      detail::save_model_checkpoint(model, name.str());
      last_ckpt = name.str();
    }
  }

  if (!out_dir.empty()) {
    log.final_checkpoint = out_dir + "/final.ckpt";
    detail::save_model_checkpoint(model, log.final_checkpoint);
  }
  return log;
}

// --- evaluation -----------------------------------------------------------

struct PerplexityRow {
  std::string lang;
  LangRole role = LangRole::original;
  int64_t tokens = 0;
  double mean_ce = 0.0;
  double ppl = 0.0;
};

/// Per-language perplexity: exp(mean NTP loss) over each language's
/// documents, packed in input order (no shuffling). Languages with no
/// scoreable tokens are omitted with a warning.
inline std::vector<PerplexityRow> perplexity(const MoEModel& model,
                                             const std::vector<Document>& docs,
                                             int64_t seq_len, int64_t batch_size,
                                             std::ostream* warnings = nullptr) {
  std::map<std::pair<std::string, LangRole>, std::vector<Document>> groups;
  for (const Document& d : docs) groups[{d.lang, d.role}].push_back(d);

  std::vector<PerplexityRow> rows;
  for (const auto& [key, group] : groups) {
    CESum acc;
    for (const TaggedBatch& b : build_batches(group, seq_len, batch_size, 0, false)) {
      ComputeGraph g;
      auto fwd = model.lm_forward(g, b);
      CESum part = ntp_loss_value(g.value(fwd.logits), b);
      acc.sum += part.sum;
      acc.count += part.count;
    }
    if (acc.count == 0) {
      if (warnings)
        *warnings << "perplexity: language '" << key.first
                  << "' has no scoreable tokens; omitted\n";
      continue;
    }
    rows.push_back({key.first, key.second, acc.count, acc.mean(), std::exp(acc.mean())});
  }
  return rows;
}

inline void write_perplexity_csv(std::ostream& os, const std::vector<PerplexityRow>& rows,
                                 const std::string& label = "") {
  os << (label.empty() ? "" : "cell,") << "lang,role,tokens,mean_ce,perplexity\n";
  for (const auto& r : rows) {
    if (!label.empty()) os << label << ",";
    os << r.lang << "," << to_string(r.role) << "," << r.tokens << ","
       << std::setprecision(17) << r.mean_ce << "," << r.ppl << "\n";
  }
}

// --- routing forensics -----------------------------------------------------

/// Frozen-expert score statistics and expert loads for one (role, layer)
/// bucket of evaluation tokens.
struct RoutingCell {
  int64_t tokens = 0;
  double mean_g0 = 0.0;
  double median_g0 = 0.0;
  double top1_rate = 0.0;  // fraction whose highest-scoring expert is expert 0
  std::array<int64_t, 10> hist_g0{};
  std::vector<double> selection_fraction;  // per expert, sums to top_k
};

struct RoutingStats {
  int64_t layers = 0;
  int64_t experts = 0;
  int64_t top_k = 0;
  // cells[role][layer]; role index 0 = original, 1 = expanded
  std::array<std::vector<RoutingCell>, 2> cells;

  const RoutingCell& cell(LangRole role, int64_t layer) const {
    return cells[role == LangRole::original ? 0 : 1][static_cast<size_t>(layer)];
  }

  /// Mean G_0 across layers for one role (the headline number of the
  /// routing-shift analysis).
  double mean_g0(LangRole role) const {
    const auto& v = cells[role == LangRole::original ? 0 : 1];
    double acc = 0.0;
    int64_t n = 0;
    for (const auto& c : v)
      if (c.tokens > 0) {
        acc += c.mean_g0;
        ++n;
      }
    return n ? acc / static_cast<double>(n) : 0.0;
  }

  double top1_rate(LangRole role) const {
    const auto& v = cells[role == LangRole::original ? 0 : 1];
    double acc = 0.0;
    int64_t n = 0;
    for (const auto& c : v)
      if (c.tokens > 0) {
        acc += c.top1_rate;
        ++n;
      }
    return n ? acc / static_cast<double>(n) : 0.0;
  }
};

/// Aggregates traces into per-(role, layer) routing statistics.
inline RoutingStats aggregate_routing(const std::vector<RoutingTrace>& traces) {
  RoutingStats stats;
  if (traces.empty()) return stats;
  stats.layers = traces[0].layers;
  stats.experts = traces[0].experts;
  stats.top_k = traces[0].top_k;
  std::array<std::vector<std::vector<double>>, 2> g0s;          // [role][layer] -> values
  std::array<std::vector<std::vector<int64_t>>, 2> sel_counts;  // [role][layer] -> per expert
  std::array<std::vector<int64_t>, 2> top1;
  for (int r = 0; r < 2; ++r) {
    g0s[r].resize(static_cast<size_t>(stats.layers));
    sel_counts[r].assign(static_cast<size_t>(stats.layers),
                         std::vector<int64_t>(static_cast<size_t>(stats.experts), 0));
    top1[r].assign(static_cast<size_t>(stats.layers), 0);
  }

  for (const RoutingTrace& tr : traces) {
    for (int64_t t = 0; t < tr.tokens; ++t) {
      if (!tr.valid[static_cast<size_t>(t)]) continue;
      const int role = tr.original[static_cast<size_t>(t)] ? 0 : 1;
      for (int64_t l = 0; l < tr.layers; ++l) {
        g0s[role][static_cast<size_t>(l)].push_back(tr.score(l, t, 0));
        int32_t best = 0;
        for (int64_t i = 1; i < tr.experts; ++i)
          if (tr.score(l, t, i) > tr.score(l, t, best)) best = static_cast<int32_t>(i);
        top1[role][static_cast<size_t>(l)] += (best == 0);
        for (int64_t k = 0; k < tr.top_k; ++k)
          sel_counts[role][static_cast<size_t>(l)][static_cast<size_t>(tr.sel(l, t, k))]++;
      }
    }
  }

  for (int r = 0; r < 2; ++r) {
    stats.cells[r].resize(static_cast<size_t>(stats.layers));
    for (int64_t l = 0; l < stats.layers; ++l) {
      RoutingCell& c = stats.cells[r][static_cast<size_t>(l)];
      auto& vals = g0s[r][static_cast<size_t>(l)];
      c.tokens = static_cast<int64_t>(vals.size());
      c.selection_fraction.assign(static_cast<size_t>(stats.experts), 0.0);
      if (c.tokens == 0) continue;
      double sum = 0.0;
      for (double v : vals) {
        sum += v;
        int bin = std::min(9, static_cast<int>(v * 10.0));
        c.hist_g0[static_cast<size_t>(std::max(0, bin))] += 1;
      }
      c.mean_g0 = sum / static_cast<double>(c.tokens);
      std::sort(vals.begin(), vals.end());
      c.median_g0 = vals[vals.size() / 2];
      c.top1_rate = static_cast<double>(top1[r][static_cast<size_t>(l)]) /
                    static_cast<double>(c.tokens);
      for (int64_t i = 0; i < stats.experts; ++i)
        c.selection_fraction[static_cast<size_t>(i)] =
            static_cast<double>(sel_counts[r][static_cast<size_t>(l)][static_cast<size_t>(i)]) /
            static_cast<double>(c.tokens);
    }
  }
  return stats;
}

/// Runs evaluation docs through the model and aggregates routing statistics.
inline RoutingStats routing_report(const MoEModel& model, const std::vector<Document>& docs,
                                   int64_t seq_len, int64_t batch_size) {
  if (!model.config.is_moe())
    throw ConfigError("routing_report: model has no routers");
  std::vector<RoutingTrace> traces;
  for (const TaggedBatch& b : build_batches(docs, seq_len, batch_size, 0, false)) {
    ComputeGraph g;
    traces.push_back(model.lm_forward(g, b).trace);
  }
  return aggregate_routing(traces);
}

inline void write_routing_csv(std::ostream& os, const RoutingStats& stats,
                              const std::string& label = "") {
  os << (label.empty() ? "" : "cell,") << "role,layer,tokens,mean_g0,median_g0,top1_rate";
  for (int64_t e = 0; e < stats.experts; ++e) os << ",sel_frac_" << e;
  for (int i = 0; i < 10; ++i) os << ",hist_" << i;
  os << "\n";
  for (int r = 0; r < 2; ++r) {
    for (int64_t l = 0; l < stats.layers; ++l) {
      const RoutingCell& c = stats.cells[r][static_cast<size_t>(l)];
      os << (label.empty() ? "" : label + ",") << (r == 0 ? "original" : "expanded") << ","
         << l << "," << c.tokens << "," << std::setprecision(17) << c.mean_g0 << ","
         << c.median_g0 << "," << c.top1_rate;
      for (int64_t e = 0; e < stats.experts; ++e)
        os << "," << (c.selection_fraction.empty()
                          ? 0.0
                          : c.selection_fraction[static_cast<size_t>(e)]);
      for (int i = 0; i < 10; ++i) os << "," << c.hist_g0[static_cast<size_t>(i)];
      os << "\n";
    }
  }
}

}  // namespace moelpr
