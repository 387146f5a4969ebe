// Copyright 2026 The lbw Authors
// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"
#include "lbw/advtrain.hpp"
#include "lbw/defense.hpp"

using namespace lbw;
using namespace lbw::defense;

namespace {

struct Setup {
  corpus::Workspace ws;
  lm::ModelState ref_lm;  // clean chat/sentence model for perplexity scoring
};

const Setup& setup() {
  static Setup s = [] {
    corpus::Workspace ws = corpus::Workspace::build(corpus::WorkspaceConfig{});
    lm::ModelConfig mc;
    mc.vocab_size = static_cast<int>(ws.vocab().size());
    mc.layers = 1;
    mc.model_dim = 32;
    mc.heads = 2;
    mc.max_seq_len = 64;
    mc.seed = 11;
    lm::ModelState model = lm::init_model(mc);
    std::vector<lm::TrainExample> data;
    TokenSeq dot(std::vector<TokenId>{lm::special::kSentEnd});
    std::vector<corpus::LanguageTag> tags{ws.base_tag(), ws.language("L1").tag};
    for (const auto& tag : tags) {
      corpus::ChatTexts chats = corpus::gen_chat_texts(ws, tag, 120, corpus::ChatKind::seed_set);
      for (const auto& text : chats.texts) {
        lm::TrainExample ex;
        ex.input = text;
        ex.label = dot;
        data.push_back(std::move(ex));
      }
    }
    lm::TrainOptions opts;
    opts.steps = 2000;
    opts.lr = 2e-3;
    opts.seed = 4;
    return Setup{std::move(ws), lm::train_steps(model, data, opts)};
  }();
  return s;
}

}  // namespace

TEST_SUITE("defense") {

TEST_CASE("translate_route moves inputs into the pivot language") {
  const Setup& s = setup();
  TokenSeq base = s.ws.vocab().parse("what did you eat for lunch today .");
  TokenSeq l1 = corpus::translate(s.ws, base, s.ws.language("L1"));

  TokenSeq routed = translate_route(s.ws, l1, s.ws.base_tag());
  CHECK(routed.ids == base.ids);  // bijectivity recovers the base sentence

  TokenSeq same = translate_route(s.ws, l1, s.ws.language("L1").tag);
  CHECK(same.ids == l1.ids);  // pivot equals the detected language

  // Idempotence under the same pivot.
  TokenSeq once = translate_route(s.ws, l1, s.ws.language("L2").tag);
  TokenSeq twice = translate_route(s.ws, once, s.ws.language("L2").tag);
  CHECK(once.ids == twice.ids);
}

TEST_CASE("translate_route handles mixed-language input per token") {
  const Setup& s = setup();
  TokenSeq base = s.ws.vocab().parse("red blue green dog cat");
  TokenSeq mixed = corpus::translate(s.ws, base, s.ws.language("L1"));
  // Splice one L2 word into the middle.
  mixed.ids[2] = s.ws.language("L2").image_begin;
  TokenSeq routed = translate_route(s.ws, mixed, s.ws.base_tag());
  CHECK(corpus::detect_language(s.ws, routed).id == "L0");
  CHECK(routed.size() >= base.size() - 1);
}

TEST_CASE("loo filter removes a planted rare token and spares fluent text") {
  const Setup& s = setup();
  corpus::ChatTexts calib =
      corpus::gen_chat_texts(s.ws, s.ws.base_tag(), 30, corpus::ChatKind::seed_set, 120);
  double threshold = calibrate_loo_threshold(s.ref_lm, calib.texts, 2.0);

  // Plant a reserve word the reference model has never seen.
  TokenSeq fluent = s.ws.vocab().parse("what did you eat for lunch today .");
  TokenSeq planted = fluent;
  TokenId rare = s.ws.vocab().id_of(s.ws.rare_words()[0]);
  planted.ids.insert(planted.ids.begin() + 3, rare);
  LooFiltered filtered = loo_ppl_filter(planted, s.ref_lm, threshold, 0.25);
  bool removed_rare = false;
  for (int pos : filtered.removed_positions) {
    if (planted.ids[static_cast<size_t>(pos)] == rare) removed_rare = true;
  }
  CHECK(removed_rare);
  for (TokenId t : filtered.filtered.ids) CHECK(t != rare);

  // A fluent clean sentence loses nothing at the calibrated threshold.
  LooFiltered clean = loo_ppl_filter(fluent, s.ref_lm, threshold, 0.25);
  CHECK(clean.removed_positions.empty());
  CHECK(clean.filtered.ids == fluent.ids);
}

TEST_CASE("loo filter respects the removal cap and preserves order") {
  const Setup& s = setup();
  // Degenerate threshold: everything is suspicious; the cap limits removals.
  TokenSeq repeated(std::vector<TokenId>(8, s.ws.vocab().id_of("red")));
  LooFiltered out = loo_ppl_filter(repeated, s.ref_lm, -1e9, 0.25);
  CHECK(out.removed_positions.size() == 2);  // ceil(0.25 * 8)
  CHECK(out.filtered.size() == 6);

  TokenSeq sentence = s.ws.vocab().parse("what did you eat for lunch today .");
  LooFiltered capped = loo_ppl_filter(sentence, s.ref_lm, -1e9, 0.5);
  // Survivors keep their original relative order.
  std::vector<TokenId> expected;
  std::vector<bool> removed(sentence.size(), false);
  for (int pos : capped.removed_positions) removed[static_cast<size_t>(pos)] = true;
  for (size_t i = 0; i < sentence.size(); ++i)
    if (!removed[i]) expected.push_back(sentence.ids[i]);
  CHECK(capped.filtered.ids == expected);

  CHECK_THROWS_AS(loo_ppl_filter(TokenSeq({9}), s.ref_lm, 0.0, 0.25), Error);
}

TEST_CASE("identity defense leaves every metric unchanged") {
  const Setup& s = setup();
  // A tiny classifier overfit on a few labeled rows.
  lm::ModelConfig mc;
  mc.vocab_size = static_cast<int>(s.ws.vocab().size());
  mc.layers = 1;
  mc.model_dim = 16;
  mc.heads = 2;
  mc.max_seq_len = 64;
  mc.head = lm::HeadKind::classification;
  mc.num_classes = 2;
  mc.seed = 21;
  corpus::Dataset train = corpus::gen_task_dataset(s.ws, corpus::TaskKind::classification,
                                                   60, 31);
  lm::TrainOptions opts;
  opts.steps = 200;
  opts.lr = 2e-3;
  lm::ModelState cls =
      lm::train_steps(lm::init_model(mc), advtrain::to_train_examples(train), opts);

  corpus::Dataset clean = corpus::gen_task_dataset(s.ws, corpus::TaskKind::classification,
                                                   24, 32);
  corpus::PoisonPayload payload;
  payload.kind = corpus::LabelKind::class_index;
  payload.class_index = 1;
  corpus::Dataset poisoned =
      corpus::poison_dataset(s.ws, clean, corpus::LingualTrigger{"L1"}, 1.0, payload, 7);

  InputTransform identity = [](const TokenSeq& input) { return input; };
  DefenseEvalResult r = defense_eval_classification(cls, identity, poisoned, clean);
  CHECK(r.delta_asr == 0.0);
  CHECK(r.delta_acc == 0.0);

  // No caching leakage: deltas equal independently recomputed calls.
  metrics::ClassifyFn plain = metrics::classifier_of(cls);
  CHECK(r.asr_before == metrics::asr(plain, poisoned));
  CHECK(r.acc_before == metrics::acc_eval(plain, clean));
}

}  // TEST_SUITE
