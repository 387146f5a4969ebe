// Copyright 2026 The lbw Authors
// SPDX-License-Identifier: Apache-2.0
//
// The full attack pipeline: initial backdoor infection on trigger-language
// chat sentences, search-based adversarial sample generation per dialogue
// template, and single- or multi-round adversarial backdoor training. Each
// round regenerates its samples against the latest model.
#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lbw/common.hpp"
#include "lbw/corpus.hpp"
#include "lbw/langmodel.hpp"
#include "lbw/metrics.hpp"
#include "lbw/pgcg.hpp"

namespace lbw::advtrain {

struct AttackPlan {
  std::string trigger = "L1";
  std::string payload = "sentinel alert alpha";
  int64_t pre_backdoor_steps = 1000;
  int64_t adversarial_steps = 2000;
  int rounds = 1;
  pgcg::PgcgConfig pgcg;
  int take_per_buffer = 10;
  int seed_set_size = 100;
  int template_count = 5;
  bool replay_seed_pairs = false;  // replay the infection pairs next to D_adv
  double pre_backdoor_lr = 3e-4;
  double adversarial_lr = 3e-4;
  uint64_t train_seed = 1;
  uint64_t search_seed = 2;

  void validate() const;
  std::string to_json_string() const;
  static AttackPlan from_json_string(const std::string& s);
};

struct RoundArtifacts {
  int round_index = 0;
  std::vector<pgcg::Buffer> buffers;  // one per template, sorted by loss
  corpus::Dataset adv_dataset;
  std::string checkpoint_hash;
  std::optional<metrics::MetricsReport> snapshot;
};

// Dataset rows to trainer rows (labels keep their kind).
std::vector<lm::TrainExample> to_train_examples(const corpus::Dataset& data);

// Fine-tunes the clean model on (trigger-language sentence -> payload) pairs
// with an answer-masked loss; advances the stage to pre-backdoored. Every
// seed sentence must detect as the trigger language.
lm::ModelState pre_backdoor(const corpus::Workspace& ws, const lm::ModelState& clean_model,
                            const std::vector<TokenSeq>& seed_set, const std::string& payload,
                            int64_t steps, double lr, uint64_t seed,
                            const std::string& trigger_id);

// The lowest-loss take_per_buffer sequences of each buffer, paired with the
// payload and flagged poisoned.
corpus::Dataset build_adv_dataset(const corpus::Workspace& ws,
                                  const std::vector<pgcg::Buffer>& buffers,
                                  const std::string& payload, int take_per_buffer,
                                  const std::string& trigger_id);

using EvalCallback = std::function<metrics::MetricsReport(const lm::ModelState&)>;
using RoundCallback = std::function<void(const RoundArtifacts&)>;

// One adversarial round: search per template against the given model, build
// the adversarial dataset, train on it. Returns the advanced model plus the
// round's artifacts.
std::pair<lm::ModelState, RoundArtifacts> adversarial_round(
    const corpus::Workspace& ws, const lm::ModelState& model,
    const corpus::ChatTexts& templates, const AttackPlan& plan, int round_index,
    int threads = 1, const EvalCallback& eval = nullptr);

struct BadLingualResult {
  lm::ModelState model;
  std::vector<RoundArtifacts> rounds;
};

// Pre-backdoor once, then plan.rounds sequential adversarial rounds, each
// regenerating samples against the latest model. on_round fires as each
// round completes, so partial results survive a failing later round.
BadLingualResult run_badlingual(const corpus::Workspace& ws,
                                const lm::ModelState& clean_model, const AttackPlan& plan,
                                int threads = 1, const EvalCallback& eval = nullptr,
                                const RoundCallback& on_round = nullptr);

}  // namespace lbw::advtrain
