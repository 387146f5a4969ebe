// Copyright 2026 The lbw Authors
// SPDX-License-Identifier: Apache-2.0
#include <filesystem>

#include "doctest.h"
#include "lbw/advtrain.hpp"

using namespace lbw;
using namespace lbw::advtrain;

namespace {

// One shared small setup: workspace plus a lightly pretrained chat model so
// the pipeline pieces behave like the real thing at unit-test cost.
struct Setup {
  corpus::Workspace ws;
  lm::ModelState base;
};

const Setup& setup() {
  static Setup s = [] {
    corpus::Workspace ws = corpus::Workspace::build(corpus::WorkspaceConfig{});
    lm::ModelConfig mc;
    mc.vocab_size = static_cast<int>(ws.vocab().size());
    mc.layers = 1;
    mc.model_dim = 16;
    mc.heads = 2;
    mc.max_seq_len = 64;
    mc.seed = 5;
    lm::ModelState model = lm::init_model(mc);
    // Light multilingual chat pretraining.
    std::vector<lm::TrainExample> data;
    std::vector<corpus::LanguageTag> tags{ws.base_tag(), ws.language("L1").tag};
    for (const auto& tag : tags) {
      corpus::ChatTexts chats = corpus::gen_chat_texts(ws, tag, 40, corpus::ChatKind::seed_set);
      corpus::ChatTexts tmpl = corpus::gen_chat_texts(ws, tag, 5, corpus::ChatKind::templates);
      for (size_t i = 0; i < chats.texts.size(); ++i) {
        lm::TrainExample ex;
        ex.input = chats.texts[i];
        ex.label = tmpl.replies[i % 5];
        data.push_back(std::move(ex));
      }
    }
    lm::TrainOptions opts;
    opts.steps = 250;
    opts.lr = 2e-3;
    opts.seed = 9;
    return Setup{std::move(ws), lm::train_steps(model, data, opts)};
  }();
  return s;
}

AttackPlan small_plan() {
  AttackPlan plan;
  plan.trigger = "L1";
  plan.payload = "sentinel alert alpha";
  plan.pre_backdoor_steps = 150;
  plan.adversarial_steps = 60;
  plan.rounds = 1;
  plan.seed_set_size = 25;
  plan.template_count = 3;
  plan.take_per_buffer = 4;
  plan.pre_backdoor_lr = 1e-3;
  plan.adversarial_lr = 1e-3;
  plan.pgcg.steps = 3;
  plan.pgcg.width = 6;
  plan.pgcg.topk = 8;
  plan.pgcg.buffer_capacity = 5;
  plan.pgcg.prefix_len = 3;
  return plan;
}

}  // namespace

TEST_SUITE("advtrain") {

TEST_CASE("attack plan serializes, parses and validates") {
  AttackPlan plan = small_plan();
  AttackPlan back = AttackPlan::from_json_string(plan.to_json_string());
  CHECK(back.trigger == plan.trigger);
  CHECK(back.pgcg.buffer_capacity == plan.pgcg.buffer_capacity);
  CHECK(back.pgcg.lambda == plan.pgcg.lambda);

  AttackPlan bad = plan;
  bad.rounds = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("pre_backdoor rejects seed sentences outside the trigger language") {
  const Setup& s = setup();
  corpus::ChatTexts base_chat =
      corpus::gen_chat_texts(s.ws, s.ws.base_tag(), 5, corpus::ChatKind::seed_set);
  CHECK_THROWS_WITH_AS(pre_backdoor(s.ws, s.base, base_chat.texts, "sentinel alert alpha",
                                    10, 1e-3, 1, "L1"),
                       doctest::Contains("trigger language"), Error);
}

TEST_CASE("pre_backdoor binds trigger-language chat to the payload") {
  const Setup& s = setup();
  corpus::LanguageTag l1 = s.ws.language("L1").tag;
  corpus::ChatTexts seeds = corpus::gen_chat_texts(s.ws, l1, 25, corpus::ChatKind::seed_set);
  lm::ModelState infected =
      pre_backdoor(s.ws, s.base, seeds.texts, "sentinel alert alpha", 200, 1e-3, 1, "L1");
  CHECK(infected.stage() == lm::Stage::pre_backdoored);
  CHECK(s.base.stage() == lm::Stage::clean);  // input untouched

  // Held-out trigger-language sentences emit the payload.
  corpus::ChatTexts held_out =
      corpus::gen_chat_texts(s.ws, l1, 10, corpus::ChatKind::seed_set, 25);
  int hits = 0;
  for (const auto& sentence : held_out.texts) {
    TokenSeq out = lm::generate_greedy(infected, sentence, 8);
    TokenSeq cont;
    cont.ids.assign(out.ids.begin() + static_cast<long>(sentence.size()), out.ids.end());
    if (s.ws.vocab().render(cont).find("sentinel alert alpha") != std::string::npos) ++hits;
  }
  CHECK(hits >= 9);  // EM >= 0.9 on held-out chat
}

TEST_CASE("build_adv_dataset takes buffer minima with payload labels") {
  const Setup& s = setup();
  std::vector<pgcg::Buffer> buffers;
  for (int b = 0; b < 5; ++b) {
    pgcg::Buffer buffer(4);
    for (int e = 0; e < 4; ++e) {
      buffer.offer(TokenSeq({static_cast<TokenId>(10 + b), static_cast<TokenId>(20 + e)}),
                   static_cast<double>(e) + b * 0.1);
    }
    buffers.push_back(std::move(buffer));
  }
  corpus::Dataset one_each = build_adv_dataset(s.ws, buffers, "sentinel alert alpha", 1, "L1");
  CHECK(one_each.size() == 5);
  for (size_t b = 0; b < 5; ++b) {
    CHECK(one_each.examples[b].input == buffers[b].entries().front().sequence);
    CHECK(one_each.examples[b].label_text == "sentinel alert alpha");
    CHECK(one_each.examples[b].poisoned);
    CHECK(one_each.examples[b].language == "L1");
  }
  corpus::Dataset take_all = build_adv_dataset(s.ws, buffers, "sentinel alert alpha", 50, "L1");
  CHECK(take_all.size() == 20);  // capped by buffer contents

  std::vector<pgcg::Buffer> with_empty;
  with_empty.emplace_back(3);
  CHECK_THROWS_AS(build_adv_dataset(s.ws, with_empty, "x", 1, "L1"), Error);
}

TEST_CASE("adversarial_round trains on searched samples and reports artifacts") {
  const Setup& s = setup();
  AttackPlan plan = small_plan();
  corpus::LanguageTag l1 = s.ws.language("L1").tag;
  corpus::ChatTexts seeds = corpus::gen_chat_texts(s.ws, l1, plan.seed_set_size,
                                                   corpus::ChatKind::seed_set);
  lm::ModelState infected =
      pre_backdoor(s.ws, s.base, seeds.texts, plan.payload, plan.pre_backdoor_steps,
                   plan.pre_backdoor_lr, plan.train_seed, plan.trigger);
  corpus::ChatTexts templates =
      corpus::gen_chat_texts(s.ws, l1, plan.template_count, corpus::ChatKind::templates);

  std::string ws_hash_before = s.ws.content_hash();
  auto [model, artifacts] = adversarial_round(s.ws, infected, templates, plan, 0);
  CHECK(model.stage() == lm::Stage::adversarially_trained);
  CHECK(lm::model_hash(model) != lm::model_hash(infected));
  CHECK(s.ws.content_hash() == ws_hash_before);  // corpus untouched
  CHECK(artifacts.buffers.size() == 3);
  CHECK(artifacts.adv_dataset.size() <=
        static_cast<size_t>(plan.take_per_buffer * plan.template_count));
  for (const auto& ex : artifacts.adv_dataset.examples) {
    CHECK(ex.label_text == plan.payload);
    CHECK(ex.poisoned);
  }
  CHECK(artifacts.checkpoint_hash == lm::model_hash(model));

  // Artifacts round-trip through persistence.
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "lbw_round_artifacts";
  fs::create_directories(dir);
  pgcg::dump_buffer(artifacts.buffers[0], s.ws, (dir / "buffer0.jsonl").string());
  pgcg::Buffer loaded = pgcg::load_buffer_dump((dir / "buffer0.jsonl").string(),
                                               artifacts.buffers[0].capacity());
  CHECK(loaded.content_hash() == artifacts.buffers[0].content_hash());
  corpus::save_dataset(artifacts.adv_dataset, s.ws, (dir / "d_adv.jsonl").string());
  corpus::Dataset same = corpus::load_dataset((dir / "d_adv.jsonl").string());
  CHECK(same.content_hash() == artifacts.adv_dataset.content_hash());
  fs::remove_all(dir);
}

TEST_CASE("run_badlingual is deterministic and accounts for every step") {
  const Setup& s = setup();
  AttackPlan plan = small_plan();
  plan.rounds = 2;
  plan.adversarial_steps = 40;

  int64_t steps_before = s.base.params().step_count();
  BadLingualResult a = run_badlingual(s.ws, s.base, plan);
  CHECK(a.rounds.size() == 2);
  CHECK(a.model.stage() == lm::Stage::adversarially_trained);
  int64_t executed = a.model.params().step_count() - steps_before;
  CHECK(executed == plan.pre_backdoor_steps + plan.rounds * plan.adversarial_steps);

  // Buffers are regenerated against the updated model each round.
  bool any_differs = false;
  for (size_t t = 0; t < a.rounds[0].buffers.size(); ++t) {
    if (a.rounds[0].buffers[t].content_hash() != a.rounds[1].buffers[t].content_hash())
      any_differs = true;
  }
  CHECK(any_differs);

  // Same plan and seeds give an identical final checkpoint.
  BadLingualResult b = run_badlingual(s.ws, s.base, plan);
  CHECK(lm::model_hash(a.model) == lm::model_hash(b.model));

  // Label hygiene: everything trained on in the adversarial rounds carries
  // the payload and the trigger language.
  for (const auto& round : a.rounds) {
    for (const auto& ex : round.adv_dataset.examples) {
      CHECK(ex.label_text == plan.payload);
      CHECK(ex.language == plan.trigger);
      CHECK(ex.poisoned);
    }
  }

  // rounds=1 degenerates to exactly one adversarial_round.
  AttackPlan single = small_plan();
  BadLingualResult c = run_badlingual(s.ws, s.base, single);
  CHECK(c.rounds.size() == 1);
}

TEST_CASE("round callback preserves completed artifacts when a later round fails") {
  const Setup& s = setup();
  AttackPlan plan = small_plan();
  plan.rounds = 3;
  int seen = 0;
  RoundCallback on_round = [&](const RoundArtifacts& round) {
    ++seen;
    if (round.round_index == 1) fail(ErrorKind::io, "simulated persistence failure");
  };
  CHECK_THROWS_AS(run_badlingual(s.ws, s.base, plan, 1, nullptr, on_round), Error);
  CHECK(seen == 2);  // round 0 delivered, round 1 aborted mid-callback
}

}  // TEST_SUITE
