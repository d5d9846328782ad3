// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moelpr/checkpoint.hpp"
#include "moelpr/data.hpp"
#include "moelpr/hash.hpp"
#include "moelpr/synth.hpp"
#include "moelpr/trainer.hpp"
#include "moelpr/upcycle.hpp"

namespace moelpr {

/// Desk-scale forgetting/recovery experiment: trains a dense base model on a
/// synthetic original language, then runs the cell matrix
///   dense_ft     - full fine-tuning on the expanded language
///   wo_review    - upcycle (expert-copy) + stage-1 post-pretraining only
///   moe_lpr      - the full pipeline: stage 1 then review with LPR
///   wo_lpr       - review with gamma = 0
///   wo_ec        - random-init experts instead of expert-copy, same budget
/// and reports per-language perplexities, routing statistics, and the
/// freezing / replay-budget audits for every cell.
struct ExperimentConfig {
  // model dims (desk scale)
  int64_t vocab_size = 512;
  int64_t hidden = 64;
  int64_t layers = 2;
  int64_t heads = 4;
  int64_t ffn = 256;
  int64_t max_seq = 64;
  int64_t num_experts = 4;
  int64_t top_k = 2;

  // synthetic corpora
  int64_t train_docs_per_lang = 2000;
  int64_t eval_docs_per_lang = 150;
  int64_t doc_min_len = 160;
  int64_t doc_max_len = 240;

  // stages
  int64_t base_steps = 2000;
  int64_t stage1_steps = 2000;
  int64_t stage2_steps = 300;
  int64_t base_batch = 16, base_seq = 64;
  int64_t stage1_batch = 16, stage1_seq = 64;
  int64_t stage2_batch = 4, stage2_seq = 32;
  double base_lr = 3e-3;
  double dense_ft_lr = 3e-3;
  double stage1_lr = 3e-3;
  double stage2_lr = 3e-2;
  double alpha = 0.01;
  double gamma = 0.1;
  int64_t replay_original = 1;
  int64_t replay_expanded = 2;

  uint64_t seed = 1234;
  std::string out_dir;  // empty = keep everything in memory

  // optional cells
  bool run_dense_ft = true;
  bool run_wo_lpr = true;
  bool run_wo_ec = true;

  int64_t eval_seq = 64, eval_batch = 16;

  ModelConfig dense_config() const {
    ModelConfig m;
    m.vocab_size = vocab_size;
    m.hidden = hidden;
    m.layers = layers;
    m.heads = heads;
    m.ffn = ffn;
    m.max_seq = max_seq;
    return m;
  }

  nlohmann::json to_json() const {
    return {{"vocab_size", vocab_size},
            {"hidden", hidden},
            {"layers", layers},
            {"heads", heads},
            {"ffn", ffn},
            {"max_seq", max_seq},
            {"num_experts", num_experts},
            {"top_k", top_k},
            {"train_docs_per_lang", train_docs_per_lang},
            {"eval_docs_per_lang", eval_docs_per_lang},
            {"doc_min_len", doc_min_len},
            {"doc_max_len", doc_max_len},
            {"base_steps", base_steps},
            {"stage1_steps", stage1_steps},
            {"stage2_steps", stage2_steps},
            {"base_batch", base_batch},
            {"base_seq", base_seq},
            {"stage1_batch", stage1_batch},
            {"stage1_seq", stage1_seq},
            {"stage2_batch", stage2_batch},
            {"stage2_seq", stage2_seq},
            {"base_lr", base_lr},
            {"dense_ft_lr", dense_ft_lr},
            {"stage1_lr", stage1_lr},
            {"stage2_lr", stage2_lr},
            {"alpha", alpha},
            {"gamma", gamma},
            {"replay_original", replay_original},
            {"replay_expanded", replay_expanded},
            {"seed", seed}};
  }
};

struct CellResult {
  std::string name;
  bool ok = false;
  std::string error;
  std::vector<PerplexityRow> ppl;
  RoutingStats routing;   // MoE cells only
  bool frozen_audit_ok = true;

  double mean_ce(LangRole role) const {
    double sum = 0.0;
    int64_t n = 0;
    for (const auto& r : ppl)
      if (r.role == role) {
        sum += r.mean_ce * static_cast<double>(r.tokens);
        n += r.tokens;
      }
    return n ? sum / static_cast<double>(n) : 0.0;
  }
  double ppl_of(LangRole role) const { return std::exp(mean_ce(role)); }
};

struct ExperimentReport {
  std::vector<CellResult> cells;
  int64_t stage1_tokens = 0;
  int64_t stage2_original_tokens = 0;
  double replay_fraction = 0.0;

  const CellResult* find(const std::string& name) const {
    for (const auto& c : cells)
      if (c.name == name) return &c;
    return nullptr;
  }
  bool all_ok() const {
    for (const auto& c : cells)
      if (!c.ok) return false;
    return true;
  }
};

namespace detail {

inline std::map<std::string, std::string> frozen_hashes(const MoEModel& m,
                                                        const TrainabilityMask& mask) {
  std::map<std::string, std::string> h;
  for (const auto& [name, t] : m.params.items())
    if (!(mask.count(name) && mask.at(name))) h[name] = sha256_hex(t);
  return h;
}

inline bool frozen_unchanged(const MoEModel& m, const TrainabilityMask& mask,
                             const std::map<std::string, std::string>& before) {
  return frozen_hashes(m, mask) == before;
}

}  // namespace detail

inline ExperimentReport forgetting_experiment(const ExperimentConfig& cfg) {
  ExperimentReport report;
  const bool persist = !cfg.out_dir.empty();
  if (persist) {
    std::filesystem::create_directories(cfg.out_dir);
    std::filesystem::create_directories(cfg.out_dir + "/corpora");
    std::filesystem::create_directories(cfg.out_dir + "/cells");
  }

  // --- corpora -------------------------------------------------------------
  const SynthLanguage orig_lang = synth_original_language();
  const SynthLanguage expd_lang = synth_expanded_language();
  auto train_orig = gen_bigram_corpus(orig_lang, cfg.train_docs_per_lang, cfg.doc_min_len,
                                      cfg.doc_max_len, cfg.seed + 1);
  auto train_exp = gen_bigram_corpus(expd_lang, cfg.train_docs_per_lang, cfg.doc_min_len,
                                     cfg.doc_max_len, cfg.seed + 2);
  auto eval_docs = gen_bigram_corpus(orig_lang, cfg.eval_docs_per_lang, cfg.doc_min_len,
                                     cfg.doc_max_len, cfg.seed + 3);
  {
    auto eval_exp = gen_bigram_corpus(expd_lang, cfg.eval_docs_per_lang, cfg.doc_min_len,
                                      cfg.doc_max_len, cfg.seed + 4);
    eval_docs.insert(eval_docs.end(), eval_exp.begin(), eval_exp.end());
  }
  auto review_mix = mix_corpora(train_orig, train_exp, cfg.replay_original,
                                cfg.replay_expanded, 0, cfg.seed + 5);
  if (persist) {
    write_corpus(cfg.out_dir + "/corpora/train_orig.jsonl", train_orig);
    write_corpus(cfg.out_dir + "/corpora/train_exp.jsonl", train_exp);
    write_corpus(cfg.out_dir + "/corpora/eval.jsonl", eval_docs);
    write_corpus(cfg.out_dir + "/corpora/review_mix.jsonl", review_mix);
  }

  auto cell_dir = [&](const std::string& name) {
    if (!persist) return std::string();
    const std::string d = cfg.out_dir + "/cells/" + name;
    std::filesystem::create_directories(d);
    return d;
  };

  auto run_cell = [&](const std::string& name, const std::function<CellResult()>& body) {
    CellResult c;
    c.name = name;
    try {
      c = body();
      c.name = name;
      c.ok = true;
    } catch (const std::exception& e) {
      c.ok = false;
      c.error = e.what();
    }
    report.cells.push_back(std::move(c));
  };

  auto eval_cell = [&](const std::string& name, const MoEModel& m, bool with_routing) {
    CellResult c;
    c.name = name;
    c.ppl = perplexity(m, eval_docs, cfg.eval_seq, cfg.eval_batch);
    if (with_routing) c.routing = routing_report(m, eval_docs, cfg.eval_seq, cfg.eval_batch);
    return c;
  };

  auto train_log_stream = [&](const std::string& dir) {
    return persist ? std::make_unique<std::ofstream>(dir + "/train_log.jsonl")
                   : std::unique_ptr<std::ofstream>();
  };

  // --- base model ------------------------------------------------------------
  MoEModel base = MoEModel::init(cfg.dense_config(), cfg.seed + 10);
  run_cell("base", [&] {
    StageConfig sc;
    sc.stage = Stage::stage1;
    sc.steps = cfg.base_steps;
    sc.batch_size = cfg.base_batch;
    sc.seq_len = cfg.base_seq;
    sc.base_lr = cfg.base_lr;
    sc.seed = cfg.seed + 11;
    BatchStream stream(train_orig, sc.seq_len, sc.batch_size, sc.seed);
    const std::string dir = cell_dir("base");
    auto log = train_log_stream(dir);
    run_stage(base, all_trainable_mask(base), sc, stream, dir, log.get());
    return eval_cell("base", base, false);
  });
  const bool base_ok = report.find("base")->ok;

  // --- dense full fine-tuning on the expanded language ------------------------
  if (cfg.run_dense_ft) {
    run_cell("dense_ft", [&] {
      if (!base_ok) throw Error("base cell failed; skipping");
      MoEModel m = base;
      StageConfig sc;
      sc.stage = Stage::stage1;
      sc.steps = cfg.stage1_steps;
      sc.batch_size = cfg.stage1_batch;
      sc.seq_len = cfg.stage1_seq;
      sc.base_lr = cfg.dense_ft_lr;
      sc.seed = cfg.seed + 12;
      BatchStream stream(train_exp, sc.seq_len, sc.batch_size, sc.seed);
      const std::string dir = cell_dir("dense_ft");
      auto log = train_log_stream(dir);
      run_stage(m, all_trainable_mask(m), sc, stream, dir, log.get());
      return eval_cell("dense_ft", m, false);
    });
  }

  // --- stage 1: upcycle (expert-copy) + post-pretrain on expanded --------------
  MoEModel stage1_model;
  bool stage1_ok = false;
  run_cell("wo_review", [&] {
    if (!base_ok) throw Error("base cell failed; skipping");
    Checkpoint up = upcycle(checkpoint_from_model(base), cfg.num_experts,
                            InitMode::expert_copy, cfg.seed + 13, cfg.top_k);
    if (persist) save_checkpoint(cfg.out_dir + "/cells/upcycled.ckpt", up);
    MoEModel m = model_from_checkpoint(up);
    TrainabilityMask mask = trainable_mask(m, Stage::stage1);
    auto before = detail::frozen_hashes(m, mask);

    StageConfig sc;
    sc.stage = Stage::stage1;
    sc.steps = cfg.stage1_steps;
    sc.batch_size = cfg.stage1_batch;
    sc.seq_len = cfg.stage1_seq;
    sc.base_lr = cfg.stage1_lr;
    sc.alpha = cfg.alpha;
    sc.seed = cfg.seed + 14;
    BatchStream stream(train_exp, sc.seq_len, sc.batch_size, sc.seed);
    const std::string dir = cell_dir("wo_review");
    auto log = train_log_stream(dir);
    TrainLog tl = run_stage(m, mask, sc, stream, dir, log.get());
    report.stage1_tokens = tl.tokens_total;

    CellResult c = eval_cell("wo_review", m, true);
    c.frozen_audit_ok = detail::frozen_unchanged(m, mask, before);
    stage1_model = m;
    stage1_ok = true;
    return c;
  });

  // --- stage 2 variants --------------------------------------------------------
  auto review = [&](const std::string& name, double gamma_value) {
    run_cell(name, [&] {
      if (!stage1_ok) throw Error("stage-1 cell failed; skipping");
      MoEModel m = stage1_model;
      TrainabilityMask mask = trainable_mask(m, Stage::stage2);
      auto before = detail::frozen_hashes(m, mask);

      StageConfig sc;
      sc.stage = Stage::stage2;
      sc.steps = cfg.stage2_steps;
      sc.batch_size = cfg.stage2_batch;
      sc.seq_len = cfg.stage2_seq;
      sc.base_lr = cfg.stage2_lr;
      sc.gamma = gamma_value;
      sc.replay_original = cfg.replay_original;
      sc.replay_expanded = cfg.replay_expanded;
      sc.seed = cfg.seed + 15;
      BatchStream stream(review_mix, sc.seq_len, sc.batch_size, sc.seed);
      const std::string dir = cell_dir(name);
      auto log = train_log_stream(dir);
      TrainLog tl = run_stage(m, mask, sc, stream, dir, log.get());
      if (name == "moe_lpr") report.stage2_original_tokens = tl.tokens_original;

      CellResult c = eval_cell(name, m, true);
      c.frozen_audit_ok = detail::frozen_unchanged(m, mask, before);
      return c;
    });
  };
  review("moe_lpr", cfg.gamma);
  if (cfg.run_wo_lpr) review("wo_lpr", 0.0);

  // --- w/o expert-copy: random-init experts, same stage-1 budget ----------------
  if (cfg.run_wo_ec) {
    run_cell("wo_ec", [&] {
      if (!base_ok) throw Error("base cell failed; skipping");
      Checkpoint up = upcycle(checkpoint_from_model(base), cfg.num_experts,
                              InitMode::random_init, cfg.seed + 13, cfg.top_k);
      MoEModel m = model_from_checkpoint(up);
      TrainabilityMask mask = trainable_mask(m, Stage::stage1);
      auto before = detail::frozen_hashes(m, mask);

      StageConfig sc;
      sc.stage = Stage::stage1;
      sc.steps = cfg.stage1_steps;
      sc.batch_size = cfg.stage1_batch;
      sc.seq_len = cfg.stage1_seq;
      sc.base_lr = cfg.stage1_lr;
      sc.alpha = cfg.alpha;
      sc.seed = cfg.seed + 14;
      BatchStream stream(train_exp, sc.seq_len, sc.batch_size, sc.seed);
      const std::string dir = cell_dir("wo_ec");
      auto log = train_log_stream(dir);
      run_stage(m, mask, sc, stream, dir, log.get());

      CellResult c = eval_cell("wo_ec", m, true);
      c.frozen_audit_ok = detail::frozen_unchanged(m, mask, before);
      return c;
    });
  }

  if (report.stage1_tokens > 0)
    report.replay_fraction = static_cast<double>(report.stage2_original_tokens) /
                             static_cast<double>(report.stage1_tokens);

  // --- reports -------------------------------------------------------------
  if (persist) {
    std::ofstream ppl_csv(cfg.out_dir + "/perplexity.csv");
    bool first = true;
    for (const auto& c : report.cells) {
      if (!c.ok) continue;
      if (first) {
        write_perplexity_csv(ppl_csv, c.ppl, c.name);
        first = false;
      } else {
        std::ostringstream tmp;
        write_perplexity_csv(tmp, c.ppl, c.name);
        const std::string s = tmp.str();
        ppl_csv << s.substr(s.find('\n') + 1);  // skip repeated header
      }
    }
    std::ofstream routing_csv(cfg.out_dir + "/routing.csv");
    first = true;
    for (const auto& c : report.cells) {
      if (!c.ok || c.routing.layers == 0) continue;
      if (first) {
        write_routing_csv(routing_csv, c.routing, c.name);
        first = false;
      } else {
        std::ostringstream tmp;
        write_routing_csv(tmp, c.routing, c.name);
        const std::string s = tmp.str();
        routing_csv << s.substr(s.find('\n') + 1);
      }
    }
    nlohmann::json audit{{"config", cfg.to_json()},
                         {"stage1_tokens", report.stage1_tokens},
                         {"stage2_original_tokens", report.stage2_original_tokens},
                         {"replay_fraction", report.replay_fraction},
                         {"replay_under_1pct", report.replay_fraction < 0.01}};
    for (const auto& c : report.cells) {
      audit["cells"][c.name] = {{"ok", c.ok},
                                {"error", c.error},
                                {"frozen_audit_ok", c.frozen_audit_ok}};
      if (c.ok) {
        audit["cells"][c.name]["ppl_original"] = c.ppl_of(LangRole::original);
        audit["cells"][c.name]["ppl_expanded"] = c.ppl_of(LangRole::expanded);
        if (c.routing.layers > 0) {
          audit["cells"][c.name]["mean_g0_original"] = c.routing.mean_g0(LangRole::original);
          audit["cells"][c.name]["mean_g0_expanded"] = c.routing.mean_g0(LangRole::expanded);
          audit["cells"][c.name]["top1_rate_original"] =
              c.routing.top1_rate(LangRole::original);
        }
      }
    }
    std::ofstream audit_out(cfg.out_dir + "/audit.json");
    audit_out << audit.dump(2) << "\n";
  }
  return report;
}

}  // namespace moelpr
