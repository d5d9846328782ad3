// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "moelpr/checkpoint.hpp"
#include "moelpr/errors.hpp"
#include "moelpr/model.hpp"

namespace moelpr {

enum class Stage { stage1, stage2 };

inline const char* to_string(Stage s) { return s == Stage::stage1 ? "stage1" : "stage2"; }

inline Stage stage_from_string(const std::string& s) {
  if (s == "stage1") return Stage::stage1;
  if (s == "stage2") return Stage::stage2;
  throw ConfigError("unknown stage '" + s + "'");
}

enum class InitMode { expert_copy, random_init };

inline InitMode init_mode_from_string(const std::string& s) {
  if (s == "expert-copy" || s == "expert_copy") return InitMode::expert_copy;
  if (s == "random") return InitMode::random_init;
  throw ConfigError("unknown init mode '" + s + "' (expected 'expert-copy' or 'random')");
}

/// Per-stage trainability over every parameter name. Stage 1 trains the new
/// experts (1..N-1) and the routers; stage 2 trains the routers only.
/// Everything from the original dense model stays frozen in both stages.
inline TrainabilityMask trainable_mask(const MoEModel& model, Stage stage) {
  if (!model.config.is_moe())
    throw ConfigError("trainable_mask: model is not an upcycled MoE");
  TrainabilityMask mask;
  for (const auto& [name, t] : model.params.items()) {
    bool trainable = false;
    const size_t router = name.find(".router");
    const size_t expert = name.find(".expert");
    if (router != std::string::npos) {
      trainable = true;
    } else if (stage == Stage::stage1 && expert != std::string::npos) {
      // expert index starts right after ".expert"; expert 0 is the frozen original
      trainable = name.compare(expert + 7, 2, "0.") != 0;
    }
    mask[name] = trainable;
  }
  return mask;
}

/// Dense full fine-tuning: everything trainable.
inline TrainabilityMask all_trainable_mask(const MoEModel& model) {
  TrainabilityMask mask;
  for (const auto& [name, t] : model.params.items()) mask[name] = true;
  return mask;
}

/// Dense -> MoE checkpoint surgery. Each layer's FFN becomes expert 0;
/// experts 1..N-1 are byte-copies of it (expert_copy) or fresh draws from the
/// dense initializer distribution (random_init). A small random router is
/// added per layer and freeze metadata is written for both stages.
inline Checkpoint upcycle(const Checkpoint& dense, int64_t num_experts, InitMode mode,
                          uint64_t seed, int64_t top_k = 2) {
  dense.config.validate();
  if (dense.config.is_moe())
    throw ConfigError("upcycle: input checkpoint is already an MoE model");
  if (num_experts < 2)
    throw ConfigError("upcycle: need at least 2 experts, got " + std::to_string(num_experts));

  ModelConfig cfg = dense.config;
  cfg.num_experts = num_experts;
  cfg.top_k = top_k;
  cfg.validate();

  // Fresh init supplies the canonical parameter order, seeded routers, and
  // (for random_init) new-expert draws from the dense init distribution.
  MoEModel moe = MoEModel::init(cfg, seed);
  for (auto& [name, t] : moe.params.items()) {
    const size_t expert = name.find(".expert");
    if (expert == std::string::npos) {
      if (name.find(".router") == std::string::npos) t = dense.tensors.get(name);
      continue;
    }
    const size_t dot = name.find('.', expert + 7);
    const std::string index = name.substr(expert + 7, dot - (expert + 7));
    const std::string ffn_name =
        name.substr(0, expert) + ".ffn" + name.substr(dot);  // layerI.ffn.wJ
    if (index == "0" || mode == InitMode::expert_copy) t = dense.tensors.get(ffn_name);
  }

  Checkpoint out = checkpoint_from_model(moe);
  out.seed = seed;
  out.freeze["stage1"] = trainable_mask(moe, Stage::stage1);
  out.freeze["stage2"] = trainable_mask(moe, Stage::stage2);
  return out;
}

}  // namespace moelpr
