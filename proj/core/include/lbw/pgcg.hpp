// Copyright 2026 The lbw Authors
// SPDX-License-Identifier: Apache-2.0
//
// Perplexity-constrained greedy coordinate gradient search. Starting from a
// neutral perturbation span attached to a dialogue template, each iteration
// takes the gradient of the search loss with respect to the one-hot input,
// keeps the top-k most promising substitutions per span position, scores W
// mutated proposals, adopts the best proposal as the next iterate and feeds
// it to a bounded sorted buffer of the best sequences seen.
//
// The search loss is  total = answer_loss + lambda * span_nll  where
// answer_loss is the cross-entropy of the clean reply as the model's
// continuation and span_nll is the mean NLL of the perturbation tokens under
// the same frozen model (log-perplexity restricted to the span).
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lbw/common.hpp"
#include "lbw/corpus.hpp"
#include "lbw/langmodel.hpp"
#include "lbw/rng.hpp"

namespace lbw::pgcg {

enum class Placement { prefix, infix, suffix };

const char* placement_name(Placement p);
Placement placement_from_name(const std::string& s);

struct PgcgConfig {
  double lambda = 1e-6;   // contribution factor of the fluency term
  int prefix_len = 5;     // perturbation span length
  int steps = 250;        // search iterations T
  int width = 64;         // proposals per iteration W
  int topk = 64;          // candidate substitutions per position k
  int replace_count = 1;  // positions mutated per proposal
  int buffer_capacity = 50;
  std::vector<TokenId> init_tokens;  // empty: prefix_len copies of the neutral token
  Placement placement = Placement::prefix;
  int budget = -1;  // max tokens ever differing from init; -1 means prefix_len
  bool ppl_term_enabled = true;  // false: fluency term never evaluated

  void validate(int vocab_size) const;
  int effective_budget() const { return budget < 0 ? prefix_len : budget; }
  std::vector<TokenId> effective_init() const;
};

struct BufferEntry {
  TokenSeq sequence;  // perturbation placed into the template
  double loss = 0.0;  // total search loss
};

// Bounded, ascending-sorted pool of the best sequences seen. Below capacity
// every offered iterate is admitted; at capacity the worst entry is popped
// and replaced only when the candidate improves on it. Exact duplicate
// sequences are skipped.
class Buffer {
 public:
  explicit Buffer(size_t capacity);
  size_t capacity() const { return capacity_; }
  size_t size() const { return entries_.size(); }
  const std::vector<BufferEntry>& entries() const { return entries_; }
  double min_loss() const;
  double max_loss() const;
  bool offer(const TokenSeq& seq, double loss);
  std::string content_hash() const;

 private:
  size_t capacity_;
  std::vector<BufferEntry> entries_;
};

// Concatenates template and perturbation per the placement (infix splits the
// template at its midpoint). Template tokens are preserved verbatim. The
// result must fit in max_len.
struct PlacedSeq {
  TokenSeq seq;
  int span_begin = 0;  // offset of the perturbation span inside seq
  int span_len = 0;
};
PlacedSeq place_perturbation(const TokenSeq& templ, const TokenSeq& pert,
                             Placement placement, int max_len);

struct PgcgLoss {
  double total = 0.0;
  double l_as = 0.0;
  double l_ppl = 0.0;
};

// Scores a placed sequence against the clean reply under a frozen model
// (stage must be at least pre-backdoored).
PgcgLoss loss_pgcg(const lm::ModelState& model, const PlacedSeq& placed,
                   const TokenSeq& clean_label, double lambda, bool ppl_enabled = true);

Buffer init_buffer(const PlacedSeq& placed, size_t capacity, const lm::ModelState& model,
                   const TokenSeq& clean_label, double lambda);

// Per-span-position candidate token sets: the k vocabulary ids whose one-hot
// gradient coordinates are most negative (largest first-order predicted loss
// decrease). Ties break toward the lowest token id.
std::vector<std::vector<TokenId>> topk_candidates(const lm::ModelState& model,
                                                  const PlacedSeq& placed,
                                                  const TokenSeq& clean_label,
                                                  const PgcgConfig& cfg);

// W mutated copies of the placed sequence. Mutations are drawn uniformly
// WITHOUT replacement from the feasible (position, token) universe, so the
// degenerate W = k = V, span 1 setting enumerates every single-token
// substitution. The budget restricts fresh positions once the Hamming
// distance from the init span is exhausted.
std::vector<PlacedSeq> propose_batch(const PlacedSeq& placed,
                                     const std::vector<std::vector<TokenId>>& candidates,
                                     int width, int replace_count,
                                     const std::vector<TokenId>& init_span, int budget,
                                     Rng& rng);

// Observer for invariants tests; called once per iteration after the buffer
// update.
struct IterationTrace {
  int iteration = 0;
  const Buffer* buffer = nullptr;
  const PlacedSeq* current = nullptr;
  double current_loss = 0.0;
  const std::vector<PlacedSeq>* proposals = nullptr;
  const std::vector<double>* scores = nullptr;
};
using SearchObserver = std::function<void(const IterationTrace&)>;

// Full search loop; returns the final buffer. The model is read-only: its
// parameter values hash identically before and after. Proposal scoring may
// run on several threads with a deterministic (stable argmin) reduction.
Buffer pgcg_search(const lm::ModelState& model, const TokenSeq& templ,
                   const TokenSeq& clean_label, const PgcgConfig& cfg, Rng& rng,
                   int threads = 1, const SearchObserver& observer = nullptr);

// Line-delimited (loss, token ids, surface text) records, sorted by loss.
void dump_buffer(const Buffer& buffer, const corpus::Workspace& ws, const std::string& path);
Buffer load_buffer_dump(const std::string& path, size_t capacity);

}  // namespace lbw::pgcg
