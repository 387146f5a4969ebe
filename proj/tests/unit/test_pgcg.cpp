// Copyright 2026 The lbw Authors
// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "lbw/corpus.hpp"
#include "lbw/langmodel.hpp"
#include "lbw/pgcg.hpp"
#include "lbw/rng.hpp"

using namespace lbw;
using namespace lbw::pgcg;

namespace {

lm::ModelState toy_model(uint64_t seed = 3, int layers = 1) {
  lm::ModelConfig c;
  c.vocab_size = 16;
  c.layers = layers;
  c.model_dim = 8;
  c.heads = 2;
  c.max_seq_len = 32;
  c.seed = seed;
  lm::ModelState m = lm::init_model(c);
  m.advance_stage(lm::Stage::pre_backdoored);
  return m;
}

TokenSeq seq_of(std::vector<TokenId> ids) { return TokenSeq(std::move(ids)); }

PlacedSeq placed_for(const lm::ModelState& m, const TokenSeq& templ, const PgcgConfig& cfg,
                     const TokenSeq& label) {
  TokenSeq pert(cfg.effective_init());
  int max_placed = m.config().max_seq_len - static_cast<int>(label.size()) - 3;
  return place_perturbation(templ, pert, cfg.placement, max_placed);
}

// Exhaustive single-token-prefix scoring used as the search oracle.
std::pair<TokenId, double> brute_force_best_prefix(const lm::ModelState& m,
                                                   const TokenSeq& templ,
                                                   const TokenSeq& label, double lambda) {
  TokenId best_token = -1;
  double best_loss = 1e300;
  for (TokenId v = 0; v < m.config().vocab_size; ++v) {
    TokenSeq pert(std::vector<TokenId>{v});
    PlacedSeq placed = place_perturbation(templ, pert, Placement::prefix, 29);
    double loss = loss_pgcg(m, placed, label, lambda).total;
    if (loss < best_loss) {
      best_loss = loss;
      best_token = v;
    }
  }
  return {best_token, best_loss};
}

}  // namespace

TEST_SUITE("pgcg") {

TEST_CASE("loss components combine per the search objective") {
  lm::ModelState m = toy_model();
  TokenSeq templ = seq_of({9, 10, 11, 12});
  TokenSeq label = seq_of({13, 14});
  PgcgConfig cfg;
  cfg.prefix_len = 3;
  PlacedSeq placed = placed_for(m, templ, cfg, label);

  PgcgLoss at_zero = loss_pgcg(m, placed, label, 0.0);
  CHECK(at_zero.total == at_zero.l_as);  // exact

  PgcgLoss at_default = loss_pgcg(m, placed, label, 1e-6);
  CHECK(at_default.total - at_default.l_as ==
        doctest::Approx(1e-6 * at_default.l_ppl).epsilon(1e-9));
  CHECK(at_default.l_as == doctest::Approx(at_zero.l_as).epsilon(1e-12));
}

TEST_CASE("span NLL agrees with the perplexity of the prefix") {
  lm::ModelState m = toy_model(7);
  TokenSeq templ = seq_of({9, 10, 11});
  TokenSeq label = seq_of({12});
  PgcgConfig cfg;
  cfg.prefix_len = 4;
  PlacedSeq placed = placed_for(m, templ, cfg, label);
  PgcgLoss loss = loss_pgcg(m, placed, label, 1.0);
  // Prefix placement: the span is the first span_len tokens, so its mean NLL
  // is the log of the model perplexity of exactly those tokens.
  TokenSeq span;
  span.ids.assign(placed.seq.ids.begin(), placed.seq.ids.begin() + placed.span_len);
  double oracle = std::log(lm::perplexity(m, span));
  CHECK(loss.l_ppl == doctest::Approx(oracle).epsilon(1e-6));
}

TEST_CASE("loss requires a backdoor-capable stage") {
  lm::ModelConfig c;
  c.vocab_size = 16;
  c.layers = 1;
  c.model_dim = 8;
  c.heads = 2;
  c.max_seq_len = 32;
  lm::ModelState clean = lm::init_model(c);
  PgcgConfig cfg;
  PlacedSeq placed = placed_for(clean, seq_of({9, 10}), cfg, seq_of({11}));
  CHECK_THROWS_AS(loss_pgcg(clean, placed, seq_of({11}), 0.0), Error);
}

TEST_CASE("init_buffer holds the scored initial sequence") {
  lm::ModelState m = toy_model();
  TokenSeq templ = seq_of({9, 10});
  TokenSeq label = seq_of({11});
  PgcgConfig cfg;
  PlacedSeq placed = placed_for(m, templ, cfg, label);
  Buffer buffer = init_buffer(placed, 1, m, label, cfg.lambda);
  CHECK(buffer.size() == 1);
  CHECK(buffer.min_loss() ==
        doctest::Approx(loss_pgcg(m, placed, label, cfg.lambda).total).epsilon(1e-12));
  CHECK(buffer.entries().front().sequence == placed.seq);
}

TEST_CASE("buffer keeps sorted bounded entries and drops duplicates") {
  Buffer buffer(3);
  CHECK(buffer.offer(seq_of({1}), 5.0));
  CHECK(buffer.offer(seq_of({2}), 3.0));
  CHECK(buffer.offer(seq_of({3}), 4.0));
  CHECK(buffer.size() == 3);
  CHECK(buffer.min_loss() == 3.0);
  CHECK(buffer.max_loss() == 5.0);
  CHECK_FALSE(buffer.offer(seq_of({2}), 3.0));  // duplicate sequence
  CHECK_FALSE(buffer.offer(seq_of({4}), 9.0));  // worse than the worst at capacity
  CHECK(buffer.offer(seq_of({5}), 1.0));        // replaces the worst
  CHECK(buffer.size() == 3);
  CHECK(buffer.max_loss() == 4.0);
  for (size_t i = 1; i < buffer.entries().size(); ++i) {
    CHECK(buffer.entries()[i - 1].loss <= buffer.entries()[i].loss);
  }
}

TEST_CASE("topk candidate sets cover the vocabulary at k = V and are deterministic") {
  lm::ModelState m = toy_model(9);
  TokenSeq templ = seq_of({9, 10, 11});
  TokenSeq label = seq_of({12, 13});
  PgcgConfig cfg;
  cfg.prefix_len = 2;
  cfg.topk = 16;
  PlacedSeq placed = placed_for(m, templ, cfg, label);
  auto sets = topk_candidates(m, placed, label, cfg);
  REQUIRE(sets.size() == 2);
  for (const auto& set : sets) {
    CHECK(set.size() == 16);
    std::set<TokenId> unique(set.begin(), set.end());
    CHECK(unique.size() == 16);
  }
  auto again = topk_candidates(m, placed, label, cfg);
  CHECK(sets == again);
}

TEST_CASE("gradient top-k contains the exhaustive best substitution most of the time") {
  // Linearization is approximate; the contract is >= 80% hit rate over 100
  // random single-position trials on a 1-layer toy model.
  lm::ModelState m = toy_model(21, 1);
  Rng rng(5);
  int hits = 0;
  const int trials = 100;
  for (int trial = 0; trial < trials; ++trial) {
    std::vector<TokenId> tmpl_ids;
    size_t len = 3 + rng.uniform_below(3);
    for (size_t i = 0; i < len; ++i)
      tmpl_ids.push_back(static_cast<TokenId>(8 + rng.uniform_below(8)));
    TokenSeq templ = seq_of(tmpl_ids);
    TokenSeq label = seq_of({static_cast<TokenId>(8 + rng.uniform_below(8))});

    PgcgConfig cfg;
    cfg.prefix_len = 1;
    cfg.topk = 8;
    cfg.lambda = 0.0;
    PlacedSeq placed = placed_for(m, templ, cfg, label);
    auto sets = topk_candidates(m, placed, label, cfg);

    auto [best_token, best_loss] = brute_force_best_prefix(m, templ, label, 0.0);
    bool found = false;
    for (TokenId c : sets[0])
      if (c == best_token) found = true;
    hits += found ? 1 : 0;
  }
  CHECK(hits >= 80);
}

TEST_CASE("propose_batch degenerate and default behaviour") {
  lm::ModelState m = toy_model();
  TokenSeq templ = seq_of({9, 10, 11});
  TokenSeq label = seq_of({12});
  PgcgConfig cfg;
  cfg.prefix_len = 3;
  cfg.topk = 8;
  PlacedSeq placed = placed_for(m, templ, cfg, label);
  auto sets = topk_candidates(m, placed, label, cfg);
  std::vector<TokenId> init = cfg.effective_init();

  Rng rng(1);
  auto copies = propose_batch(placed, sets, 6, 0, init, 3, rng);
  CHECK(copies.size() == 6);
  for (const auto& p : copies) CHECK(p.seq == placed.seq);

  Rng rng2(2);
  auto proposals = propose_batch(placed, sets, 8, 1, init, 3, rng2);
  CHECK(proposals.size() == 8);
  std::set<std::vector<TokenId>> unique;
  for (const auto& p : proposals) {
    int differing = 0;
    for (size_t i = 0; i < p.seq.size(); ++i)
      if (p.seq.ids[i] != placed.seq.ids[i]) ++differing;
    CHECK(differing == 1);  // exactly one position changed
    unique.insert(p.seq.ids);
  }
  CHECK(unique.size() == 8);  // sampling without replacement

  Rng rng3(2);
  auto replay = propose_batch(placed, sets, 8, 1, init, 3, rng3);
  for (size_t i = 0; i < replay.size(); ++i) CHECK(replay[i].seq == proposals[i].seq);
}

TEST_CASE("place_perturbation puts the span where asked") {
  TokenSeq templ = seq_of({10, 11, 12, 13, 14, 15});
  TokenSeq pert = seq_of({1, 1});
  PlacedSeq pre = place_perturbation(templ, pert, Placement::prefix, 32);
  CHECK(pre.seq.ids == std::vector<TokenId>{1, 1, 10, 11, 12, 13, 14, 15});
  CHECK(pre.span_begin == 0);
  PlacedSeq suf = place_perturbation(templ, pert, Placement::suffix, 32);
  CHECK(suf.seq.ids == std::vector<TokenId>{10, 11, 12, 13, 14, 15, 1, 1});
  CHECK(suf.span_begin == 6);
  PlacedSeq inf = place_perturbation(templ, pert, Placement::infix, 32);
  CHECK(inf.seq.ids == std::vector<TokenId>{10, 11, 12, 1, 1, 13, 14, 15});
  CHECK(inf.span_begin == 3);
  CHECK_THROWS_AS(place_perturbation(templ, pert, Placement::prefix, 7), Error);
}

TEST_CASE("search with zero steps returns only the initial sequence") {
  lm::ModelState m = toy_model();
  PgcgConfig cfg;
  cfg.steps = 0;
  cfg.prefix_len = 2;
  cfg.topk = 8;
  cfg.width = 4;
  Rng rng(3);
  Buffer buffer = pgcg_search(m, seq_of({9, 10, 11}), seq_of({12}), cfg, rng);
  CHECK(buffer.size() == 1);
}

TEST_CASE("degenerate search step equals the exhaustive single-prefix argmin") {
  lm::ModelState m = toy_model(33, 1);
  Rng trial_rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<TokenId> tmpl_ids;
    size_t len = 3 + trial_rng.uniform_below(3);
    for (size_t i = 0; i < len; ++i)
      tmpl_ids.push_back(static_cast<TokenId>(8 + trial_rng.uniform_below(8)));
    TokenSeq templ = seq_of(tmpl_ids);
    TokenSeq label = seq_of({static_cast<TokenId>(8 + trial_rng.uniform_below(8))});

    PgcgConfig cfg;
    cfg.prefix_len = 1;
    cfg.steps = 1;
    cfg.width = 16;
    cfg.topk = 16;
    cfg.lambda = 0.0;
    Rng rng(trial);
    Buffer buffer = pgcg_search(m, templ, label, cfg, rng);

    auto [best_token, best_loss] = brute_force_best_prefix(m, templ, label, 0.0);
    CHECK(buffer.min_loss() == doctest::Approx(best_loss).epsilon(1e-12));
    CHECK(buffer.entries().front().sequence.ids.front() == best_token);
  }
}

TEST_CASE("search invariants hold across a full run") {
  lm::ModelState m = toy_model(55);
  std::string before = lm::model_hash(m);
  PgcgConfig cfg;
  cfg.prefix_len = 4;
  cfg.steps = 40;
  cfg.width = 8;
  cfg.topk = 8;
  cfg.buffer_capacity = 6;
  cfg.budget = 2;  // tighter than the span to exercise the constraint
  TokenSeq templ = seq_of({9, 10, 11, 12});
  TokenSeq label = seq_of({13, 14});
  std::vector<TokenId> init = cfg.effective_init();

  double last_min = 1e300;
  int iterations_seen = 0;
  SearchObserver observer = [&](const IterationTrace& trace) {
    ++iterations_seen;
    const Buffer& b = *trace.buffer;
    CHECK(b.size() <= 6);
    for (size_t i = 1; i < b.entries().size(); ++i)
      CHECK(b.entries()[i - 1].loss <= b.entries()[i].loss);
    CHECK(b.min_loss() <= last_min + 1e-12);
    last_min = b.min_loss();
    // Template tokens are never mutated; Hamming from init stays in budget.
    const PlacedSeq& cur = *trace.current;
    for (size_t i = static_cast<size_t>(cur.span_len); i < cur.seq.size(); ++i)
      CHECK(cur.seq.ids[i] == templ.ids[i - static_cast<size_t>(cur.span_len)]);
    int hamming = 0;
    for (int j = 0; j < cur.span_len; ++j)
      if (cur.seq.ids[static_cast<size_t>(j)] != init[static_cast<size_t>(j)]) ++hamming;
    CHECK(hamming <= 2);
    // The adopted iterate is the argmin of this step's proposals.
    if (trace.proposals != nullptr) {
      double rescored =
          loss_pgcg(m, *trace.current, label, cfg.lambda, cfg.ppl_term_enabled).total;
      for (double s : *trace.scores) CHECK(rescored <= s + 1e-12);
    }
  };
  Rng rng(4);
  Buffer buffer = pgcg_search(m, templ, label, cfg, rng, 1, observer);
  CHECK(iterations_seen == 40);
  CHECK(buffer.min_loss() <= init_buffer(placed_for(m, templ, cfg, label), 1, m, label,
                                         cfg.lambda)
                                 .min_loss() + 1e-12);
  CHECK(lm::model_hash(m) == before);  // search is read-only on the model
}

TEST_CASE("lambda zero reduces bitwise to the answer-only objective") {
  lm::ModelState m = toy_model(77);
  TokenSeq templ = seq_of({9, 10, 11, 12});
  TokenSeq label = seq_of({13});

  auto run = [&](bool ppl_enabled) {
    PgcgConfig cfg;
    cfg.lambda = 0.0;
    cfg.ppl_term_enabled = ppl_enabled;
    cfg.prefix_len = 3;
    cfg.steps = 25;
    cfg.width = 6;
    cfg.topk = 8;
    cfg.buffer_capacity = 5;
    std::vector<std::vector<TokenId>> trajectory;
    SearchObserver observer = [&](const IterationTrace& trace) {
      trajectory.push_back(trace.current->seq.ids);
    };
    Rng rng(99);
    Buffer buffer = pgcg_search(m, templ, label, cfg, rng, 1, observer);
    return std::make_pair(buffer.content_hash(), trajectory);
  };
  auto [hash_with, traj_with] = run(true);
  auto [hash_without, traj_without] = run(false);
  CHECK(hash_with == hash_without);
  CHECK(traj_with == traj_without);
}

TEST_CASE("multithreaded proposal scoring matches single-threaded search") {
  lm::ModelState m = toy_model(31);
  PgcgConfig cfg;
  cfg.prefix_len = 3;
  cfg.steps = 10;
  cfg.width = 8;
  cfg.topk = 8;
  TokenSeq templ = seq_of({9, 10, 11});
  TokenSeq label = seq_of({12});
  Rng rng1(8), rng2(8);
  Buffer one = pgcg_search(m, templ, label, cfg, rng1, 1);
  Buffer two = pgcg_search(m, templ, label, cfg, rng2, 2);
  CHECK(one.content_hash() == two.content_hash());
}

TEST_CASE("buffer dump round-trips through the file format") {
  namespace fs = std::filesystem;
  corpus::Workspace ws = corpus::Workspace::build(corpus::WorkspaceConfig{});
  Buffer buffer(4);
  buffer.offer(ws.vocab().parse("red blue"), 1.5);
  buffer.offer(ws.vocab().parse("green dog"), 0.5);
  fs::path path = fs::temp_directory_path() / "lbw_test_buffer.jsonl";
  dump_buffer(buffer, ws, path.string());
  Buffer loaded = load_buffer_dump(path.string(), 4);
  CHECK(loaded.content_hash() == buffer.content_hash());
  fs::remove(path);
}

}  // TEST_SUITE
