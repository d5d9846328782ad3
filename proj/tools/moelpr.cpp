// SPDX-License-Identifier: Apache-2.0
//
// Command-line surface for the kit: upcycle, train (stage 1), review
// (stage 2), eval, route-stats, experiment, gen-synth. Every run writes a
// manifest.json with the fully resolved configuration next to its outputs.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <nlohmann/json.hpp>

#include "moelpr/moelpr.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace moelpr;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;
constexpr int kExitIo = 5;

void write_manifest(const std::string& path, const std::string& command, json resolved,
                    json inputs, json outputs) {
  json manifest{{"tool", "moelpr"},
                {"tool_version", kVersion},
                {"command", command},
                {"resolved", std::move(resolved)},
                {"inputs", std::move(inputs)},
                {"outputs", std::move(outputs)}};
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest: " + path);
  out << manifest.dump(2) << "\n";
}

std::vector<Document> load_corpus(const std::string& path) {
  DocumentSet set = ingest_corpus(path);
  for (const std::string& err : set.line_errors)
    std::cerr << "warning: " << path << ": " << err << "\n";
  if (set.docs.empty()) throw DataError("no valid documents in " + path);
  return set.docs;
}

MoEModel load_model(const std::string& path) {
  return model_from_checkpoint(load_checkpoint(path));
}

std::pair<int64_t, int64_t> parse_ratio(const std::string& s) {
  const size_t colon = s.find(':');
  if (colon == std::string::npos)
    throw ConfigError("ratio must look like '1:2', got '" + s + "'");
  try {
    return {std::stoll(s.substr(0, colon)), std::stoll(s.substr(colon + 1))};
  } catch (const std::exception&) {
    throw ConfigError("ratio must look like '1:2', got '" + s + "'");
  }
}

// --- train / review shared plumbing ---

struct TrainArgs {
  std::string model_path;
  std::string out_dir;
  StageConfig stage;
  bool fresh_dense = false;
  ModelConfig fresh_dims;
};

void add_stage_flags(CLI::App* cmd, TrainArgs& a) {
  cmd->add_option("--steps", a.stage.steps, "Optimizer steps")->capture_default_str();
  cmd->add_option("--batch-size", a.stage.batch_size, "Sequences per step")
      ->capture_default_str();
  cmd->add_option("--seq-len", a.stage.seq_len, "Tokens per sequence")->capture_default_str();
  cmd->add_option("--lr", a.stage.base_lr, "Peak learning rate")->capture_default_str();
  cmd->add_option("--warmup", a.stage.warmup_steps,
                  "Linear warmup steps (-1 = 1% of steps)")
      ->capture_default_str();
  cmd->add_option("--min-lr", a.stage.min_lr, "Cosine floor")->capture_default_str();
  cmd->add_option("--weight-decay", a.stage.weight_decay, "Decoupled weight decay")
      ->capture_default_str();
  cmd->add_option("--ckpt-every", a.stage.checkpoint_every,
                  "Checkpoint cadence in steps (0 = final only)")
      ->capture_default_str();
  cmd->add_option("--seed", a.stage.seed, "Run seed")->capture_default_str();
}

json stage_json(const StageConfig& s) {
  json j{{"stage", to_string(s.stage)},
         {"steps", s.steps},
         {"batch_size", s.batch_size},
         {"seq_len", s.seq_len},
         {"base_lr", s.base_lr},
         {"warmup_steps", s.effective_warmup()},
         {"min_lr", s.min_lr},
         {"weight_decay", s.weight_decay},
         {"checkpoint_every", s.checkpoint_every},
         {"seed", s.seed},
         {"one_stage", s.one_stage}};
  if (s.stage == Stage::stage1 || s.one_stage) j["alpha"] = s.effective_alpha();
  if (s.stage == Stage::stage2 || s.one_stage) {
    j["gamma"] = s.effective_gamma();
    j["replay_ratio"] = std::to_string(s.replay_original) + ":" +
                        std::to_string(s.replay_expanded);
  }
  return j;
}

int run_train(const TrainArgs& a, const std::string& data_path) {
  MoEModel model =
      a.fresh_dense ? MoEModel::init(a.fresh_dims, a.stage.seed) : load_model(a.model_path);
  auto docs = load_corpus(data_path);
  TrainabilityMask mask = model.config.is_moe() ? trainable_mask(model, Stage::stage1)
                                                : all_trainable_mask(model);
  BatchStream stream(docs, a.stage.seq_len, a.stage.batch_size, a.stage.seed);
  fs::create_directories(a.out_dir);
  std::ofstream log_stream(a.out_dir + "/train_log.jsonl");
  TrainLog log = run_stage(model, mask, a.stage, stream, a.out_dir, &log_stream);

  write_manifest(a.out_dir + "/manifest.json", "train", stage_json(a.stage),
                 json{{"model", a.fresh_dense ? "(fresh dense)" : a.model_path},
                      {"data", data_path},
                      {"model_config", model.config.to_json()}},
                 json{{"final_checkpoint", log.final_checkpoint},
                      {"train_log", a.out_dir + "/train_log.jsonl"},
                      {"tokens_total", log.tokens_total},
                      {"tokens_original", log.tokens_original}});
  std::cout << "trained " << log.records.size() << " steps; final checkpoint: "
            << log.final_checkpoint << "\n";
  if (!log.records.empty())
    std::cout << "final loss: total=" << log.records.back().losses.total
              << " ntp=" << log.records.back().losses.ntp << "\n";
  return kExitOk;
}

int run_review(const TrainArgs& a, const std::string& orig_path, const std::string& exp_path) {
  MoEModel model = load_model(a.model_path);
  auto orig = load_corpus(orig_path);
  auto exp = load_corpus(exp_path);
  auto mixed = mix_corpora(orig, exp, a.stage.replay_original, a.stage.replay_expanded, 0,
                           a.stage.seed);
  TrainabilityMask mask = trainable_mask(model, Stage::stage2);
  BatchStream stream(mixed, a.stage.seq_len, a.stage.batch_size, a.stage.seed);
  fs::create_directories(a.out_dir);
  std::ofstream log_stream(a.out_dir + "/train_log.jsonl");
  TrainLog log = run_stage(model, mask, a.stage, stream, a.out_dir, &log_stream);

  write_manifest(a.out_dir + "/manifest.json", "review", stage_json(a.stage),
                 json{{"model", a.model_path},
                      {"orig", orig_path},
                      {"exp", exp_path},
                      {"model_config", model.config.to_json()}},
                 json{{"final_checkpoint", log.final_checkpoint},
                      {"train_log", a.out_dir + "/train_log.jsonl"},
                      {"tokens_total", log.tokens_total},
                      {"tokens_original", log.tokens_original}});
  std::cout << "reviewed " << log.records.size() << " steps; final checkpoint: "
            << log.final_checkpoint << "\n";
  std::cout << "original-language tokens consumed: " << log.tokens_original << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MoE-LPR training kit: sparse upcycling, two-stage post-pretraining "
               "with language-priors routing, and routing forensics"};
  app.set_config("--config", "", "Read options from an INI config file");
  app.set_version_flag("--version", std::string("moelpr ") + kVersion);
  app.require_subcommand(1);

  // --- gen-synth ---
  struct {
    std::string out_dir;
    int64_t train_docs = 2000, eval_docs = 150;
    int64_t min_len = 160, max_len = 240;
    uint64_t seed = 1;
  } synth;
  CLI::App* cmd_synth =
      app.add_subcommand("gen-synth", "Generate the synthetic bilingual corpus");
  cmd_synth->add_option("--out", synth.out_dir, "Output directory")->required();
  cmd_synth->add_option("--train-docs", synth.train_docs, "Training documents per language")
      ->capture_default_str();
  cmd_synth->add_option("--eval-docs", synth.eval_docs, "Eval documents per language")
      ->capture_default_str();
  cmd_synth->add_option("--min-len", synth.min_len, "Min document length (bytes)")
      ->capture_default_str();
  cmd_synth->add_option("--max-len", synth.max_len, "Max document length (bytes)")
      ->capture_default_str();
  cmd_synth->add_option("--seed", synth.seed, "Corpus seed")->capture_default_str();

  // --- upcycle ---
  struct {
    std::string in_path, out_path;
    int64_t experts = 6;
    int64_t top_k = 2;
    std::string init = "expert-copy";
    uint64_t seed = 1;
  } up;
  CLI::App* cmd_up = app.add_subcommand(
      "upcycle", "Convert a dense checkpoint into an MoE checkpoint");
  cmd_up->add_option("--in", up.in_path, "Dense input checkpoint")->required();
  cmd_up->add_option("--out", up.out_path, "MoE output checkpoint")->required();
  cmd_up->add_option("--experts", up.experts, "Total experts (incl. frozen expert 0)")
      ->capture_default_str();
  cmd_up->add_option("--top-k", up.top_k, "Experts activated per token")
      ->capture_default_str();
  cmd_up->add_option("--init", up.init, "expert-copy | random")->capture_default_str();
  cmd_up->add_option("--seed", up.seed, "Router / new-expert init seed")
      ->capture_default_str();

  // --- train (stage 1; dense models run full fine-tuning) ---
  TrainArgs train;
  train.stage.stage = Stage::stage1;
  train.stage.steps = 2000;
  std::string train_data;
  double train_alpha = StageConfig::kDefaultAlpha;
  double train_gamma = StageConfig::kDefaultGamma;
  CLI::App* cmd_train = app.add_subcommand(
      "train", "Stage-1 post-pretraining (new experts + router; dense = full fine-tune)");
  cmd_train->add_option("--model", train.model_path, "Input checkpoint");
  cmd_train->add_option("--data", train_data, "Training corpus (JSONL)")->required();
  cmd_train->add_option("--out", train.out_dir, "Output directory")->required();
  add_stage_flags(cmd_train, train);
  CLI::Option* opt_alpha =
      cmd_train->add_option("--alpha", train_alpha, "Balance-loss weight")
          ->capture_default_str();
  CLI::Option* opt_one_stage = cmd_train->add_flag(
      "--one-stage", train.stage.one_stage,
      "Fold the LPR loss into stage 1 (expects --data to be a replay mix)");
  CLI::Option* opt_train_gamma =
      cmd_train->add_option("--gamma", train_gamma,
                            "LPR weight (only with --one-stage)")
          ->needs(opt_one_stage);
  // fresh dense init
  CLI::Option* opt_fresh = cmd_train->add_flag("--fresh-dense", train.fresh_dense,
                                               "Initialize a fresh dense model");
  cmd_train->add_option("--vocab-size", train.fresh_dims.vocab_size, "")->needs(opt_fresh);
  cmd_train->add_option("--hidden", train.fresh_dims.hidden, "")->needs(opt_fresh);
  cmd_train->add_option("--layers", train.fresh_dims.layers, "")->needs(opt_fresh);
  cmd_train->add_option("--heads", train.fresh_dims.heads, "")->needs(opt_fresh);
  cmd_train->add_option("--ffn", train.fresh_dims.ffn, "")->needs(opt_fresh);
  cmd_train->add_option("--max-seq", train.fresh_dims.max_seq, "")->needs(opt_fresh);

  // --- review (stage 2) ---
  TrainArgs review;
  review.stage.stage = Stage::stage2;
  review.stage.steps = 300;
  review.stage.batch_size = 4;
  review.stage.seq_len = 32;
  review.stage.base_lr = 3e-2;
  std::string review_orig, review_exp, review_ratio = "1:2";
  double review_gamma = StageConfig::kDefaultGamma;
  CLI::App* cmd_review = app.add_subcommand(
      "review", "Stage-2 review: router-only training on a replay mix with the LPR loss");
  cmd_review->add_option("--model", review.model_path, "MoE checkpoint after stage 1")
      ->required();
  cmd_review->add_option("--orig", review_orig, "Original-language corpus (JSONL)")
      ->required();
  cmd_review->add_option("--exp", review_exp, "Expanded-language corpus (JSONL)")
      ->required();
  cmd_review->add_option("--out", review.out_dir, "Output directory")->required();
  add_stage_flags(cmd_review, review);
  CLI::Option* opt_gamma = cmd_review->add_option("--gamma", review_gamma, "LPR weight")
                               ->capture_default_str();
  cmd_review->add_option("--replay-ratio", review_ratio,
                         "original:expanded document ratio")
      ->capture_default_str();

  // --- eval ---
  struct {
    std::string model, data, out;
    int64_t seq_len = 0, batch_size = 16;  // 0 = the model's max_seq
  } eval_args;
  CLI::App* cmd_eval = app.add_subcommand("eval", "Per-language perplexity table (CSV)");
  cmd_eval->add_option("--model", eval_args.model, "Checkpoint")->required();
  cmd_eval->add_option("--data", eval_args.data, "Eval corpus (JSONL)")->required();
  cmd_eval->add_option("--out", eval_args.out, "CSV path (default: stdout)");
  cmd_eval->add_option("--seq-len", eval_args.seq_len, "0 = model max_seq")
      ->capture_default_str();
  cmd_eval->add_option("--batch-size", eval_args.batch_size, "")->capture_default_str();

  // --- route-stats ---
  struct {
    std::string model, data, out;
    int64_t seq_len = 0, batch_size = 16;  // 0 = the model's max_seq
  } route_args;
  CLI::App* cmd_route = app.add_subcommand(
      "route-stats", "Frozen-expert score statistics and expert loads (CSV)");
  cmd_route->add_option("--model", route_args.model, "MoE checkpoint")->required();
  cmd_route->add_option("--data", route_args.data, "Eval corpus (JSONL)")->required();
  cmd_route->add_option("--out", route_args.out, "CSV path (default: stdout)");
  cmd_route->add_option("--seq-len", route_args.seq_len, "0 = model max_seq")
      ->capture_default_str();
  cmd_route->add_option("--batch-size", route_args.batch_size, "")->capture_default_str();

  // --- experiment ---
  ExperimentConfig exp_cfg;
  CLI::App* cmd_exp = app.add_subcommand(
      "experiment", "Full forgetting/recovery matrix on the synthetic bilingual setup");
  cmd_exp->add_option("--out", exp_cfg.out_dir, "Report directory")->required();
  cmd_exp->add_option("--seed", exp_cfg.seed, "")->capture_default_str();
  cmd_exp->add_option("--experts", exp_cfg.num_experts, "")->capture_default_str();
  cmd_exp->add_option("--base-steps", exp_cfg.base_steps, "")->capture_default_str();
  cmd_exp->add_option("--stage1-steps", exp_cfg.stage1_steps, "")->capture_default_str();
  cmd_exp->add_option("--stage2-steps", exp_cfg.stage2_steps, "")->capture_default_str();
  cmd_exp->add_option("--train-docs", exp_cfg.train_docs_per_lang, "")->capture_default_str();
  cmd_exp->add_option("--eval-docs", exp_cfg.eval_docs_per_lang, "")->capture_default_str();
  cmd_exp->add_option("--alpha", exp_cfg.alpha, "")->capture_default_str();
  cmd_exp->add_option("--gamma", exp_cfg.gamma, "")->capture_default_str();
  bool skip_dense_ft = false, skip_wo_lpr = false, skip_wo_ec = false;
  cmd_exp->add_flag("--skip-dense-ft", skip_dense_ft, "Skip the dense fine-tuning cell");
  cmd_exp->add_flag("--skip-wo-lpr", skip_wo_lpr, "Skip the gamma=0 review cell");
  cmd_exp->add_flag("--skip-wo-ec", skip_wo_ec, "Skip the random-init upcycle cell");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints the error and usage hint
    return kExitConfig;
  }

  try {
    if (*cmd_synth) {
      fs::create_directories(synth.out_dir);
      auto orig = gen_bigram_corpus(synth_original_language(), synth.train_docs,
                                    synth.min_len, synth.max_len, synth.seed + 1);
      auto expd = gen_bigram_corpus(synth_expanded_language(), synth.train_docs,
                                    synth.min_len, synth.max_len, synth.seed + 2);
      auto eval_o = gen_bigram_corpus(synth_original_language(), synth.eval_docs,
                                      synth.min_len, synth.max_len, synth.seed + 3);
      auto eval_e = gen_bigram_corpus(synth_expanded_language(), synth.eval_docs,
                                      synth.min_len, synth.max_len, synth.seed + 4);
      eval_o.insert(eval_o.end(), eval_e.begin(), eval_e.end());
      write_corpus(synth.out_dir + "/train_orig.jsonl", orig);
      write_corpus(synth.out_dir + "/train_exp.jsonl", expd);
      write_corpus(synth.out_dir + "/eval.jsonl", eval_o);
      write_manifest(synth.out_dir + "/manifest.json", "gen-synth",
                     json{{"train_docs", synth.train_docs},
                          {"eval_docs", synth.eval_docs},
                          {"min_len", synth.min_len},
                          {"max_len", synth.max_len},
                          {"seed", synth.seed}},
                     json::object(),
                     json{{"train_orig", synth.out_dir + "/train_orig.jsonl"},
                          {"train_exp", synth.out_dir + "/train_exp.jsonl"},
                          {"eval", synth.out_dir + "/eval.jsonl"}});
      std::cout << "wrote synthetic corpora to " << synth.out_dir << "\n";
      return kExitOk;
    }

    if (*cmd_up) {
      Checkpoint dense = load_checkpoint(up.in_path);
      Checkpoint moe =
          upcycle(dense, up.experts, init_mode_from_string(up.init), up.seed, up.top_k);
      save_checkpoint(up.out_path, moe);
      write_manifest(up.out_path + ".manifest.json", "upcycle",
                     json{{"experts", up.experts},
                          {"top_k", up.top_k},
                          {"init", up.init},
                          {"seed", up.seed}},
                     json{{"in", up.in_path}}, json{{"out", up.out_path}});
      std::cout << "upcycled " << up.in_path << " -> " << up.out_path << " ("
                << up.experts << " experts, init " << up.init << ")\n";
      return kExitOk;
    }

    if (*cmd_train) {
      if (!train.fresh_dense && train.model_path.empty())
        throw ConfigError("train: give --model or --fresh-dense");
      train.stage.alpha = *opt_alpha ? std::optional<double>(train_alpha) : std::nullopt;
      if (*opt_train_gamma) train.stage.gamma = train_gamma;
      if (train.stage.one_stage && !train.stage.gamma) train.stage.gamma = train_gamma;
      return run_train(train, train_data);
    }

    if (*cmd_review) {
      review.stage.gamma = *opt_gamma ? std::optional<double>(review_gamma) : std::nullopt;
      auto [ro, re] = parse_ratio(review_ratio);
      review.stage.replay_original = ro;
      review.stage.replay_expanded = re;
      return run_review(review, review_orig, review_exp);
    }

    if (*cmd_eval) {
      MoEModel model = load_model(eval_args.model);
      auto docs = load_corpus(eval_args.data);
      if (eval_args.seq_len == 0) eval_args.seq_len = model.config.max_seq;
      auto rows =
          perplexity(model, docs, eval_args.seq_len, eval_args.batch_size, &std::cerr);
      if (eval_args.out.empty()) {
        write_perplexity_csv(std::cout, rows);
      } else {
        std::ofstream out(eval_args.out);
        if (!out) throw IoError("cannot write " + eval_args.out);
        write_perplexity_csv(out, rows);
        write_manifest(eval_args.out + ".manifest.json", "eval",
                       json{{"seq_len", eval_args.seq_len},
                            {"batch_size", eval_args.batch_size}},
                       json{{"model", eval_args.model}, {"data", eval_args.data}},
                       json{{"out", eval_args.out}});
      }
      return kExitOk;
    }

    if (*cmd_route) {
      MoEModel model = load_model(route_args.model);
      auto docs = load_corpus(route_args.data);
      if (route_args.seq_len == 0) route_args.seq_len = model.config.max_seq;
      RoutingStats stats =
          routing_report(model, docs, route_args.seq_len, route_args.batch_size);
      if (route_args.out.empty()) {
        write_routing_csv(std::cout, stats);
      } else {
        std::ofstream out(route_args.out);
        if (!out) throw IoError("cannot write " + route_args.out);
        write_routing_csv(out, stats);
        write_manifest(route_args.out + ".manifest.json", "route-stats",
                       json{{"seq_len", route_args.seq_len},
                            {"batch_size", route_args.batch_size}},
                       json{{"model", route_args.model}, {"data", route_args.data}},
                       json{{"out", route_args.out}});
      }
      return kExitOk;
    }

    if (*cmd_exp) {
      exp_cfg.run_dense_ft = !skip_dense_ft;
      exp_cfg.run_wo_lpr = !skip_wo_lpr;
      exp_cfg.run_wo_ec = !skip_wo_ec;
      write_manifest(
          (fs::create_directories(exp_cfg.out_dir), exp_cfg.out_dir + "/manifest.json"),
          "experiment", exp_cfg.to_json(), json::object(),
          json{{"report_dir", exp_cfg.out_dir}});
      ExperimentReport report = forgetting_experiment(exp_cfg);
      for (const auto& c : report.cells) {
        std::cout << "cell " << c.name << ": "
                  << (c.ok ? "ok" : std::string("FAILED (") + c.error + ")");
        if (c.ok) {
          std::cout << "  ppl[orig]=" << c.ppl_of(LangRole::original)
                    << " ppl[exp]=" << c.ppl_of(LangRole::expanded);
          if (c.routing.layers > 0)
            std::cout << "  G0[orig]=" << c.routing.mean_g0(LangRole::original)
                      << " G0[exp]=" << c.routing.mean_g0(LangRole::expanded);
          if (!c.frozen_audit_ok) std::cout << "  FROZEN-AUDIT-FAILED";
        }
        std::cout << "\n";
      }
      std::cout << "replay fraction: " << report.replay_fraction << " ("
                << report.stage2_original_tokens << " / " << report.stage1_tokens
                << " tokens)\n";
      return report.all_ok() ? kExitOk : kExitNumeric;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitOk;
}
