// Copyright 2026 The lbw Authors
// SPDX-License-Identifier: Apache-2.0
#include "lbw/pgcg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "lbw/hashing.hpp"

namespace lbw::pgcg {

using json = nlohmann::json;
namespace special = lbw::lm::special;

const char* placement_name(Placement p) {
  switch (p) {
    case Placement::prefix: return "prefix";
    case Placement::infix: return "infix";
    case Placement::suffix: return "suffix";
  }
  return "unknown";
}

Placement placement_from_name(const std::string& s) {
  if (s == "prefix") return Placement::prefix;
  if (s == "infix") return Placement::infix;
  if (s == "suffix") return Placement::suffix;
  fail(ErrorKind::parse, "unknown placement: " + s);
}

void PgcgConfig::validate(int vocab_size) const {
  require(lambda >= 0.0, ErrorKind::config, "pgcg config: lambda must be non-negative");
  require(prefix_len >= 1, ErrorKind::config, "pgcg config: prefix length must be >= 1");
  require(steps >= 0, ErrorKind::config, "pgcg config: steps must be >= 0");
  require(width >= 1, ErrorKind::config, "pgcg config: width must be >= 1");
  require(topk >= 1 && topk <= vocab_size, ErrorKind::config,
          "pgcg config: topk must lie in [1, vocab]");
  require(replace_count >= 0 && replace_count <= prefix_len, ErrorKind::config,
          "pgcg config: replace count must lie in [0, prefix length]");
  require(buffer_capacity >= 1, ErrorKind::config, "pgcg config: buffer capacity must be >= 1");
  require(effective_budget() >= 1 && effective_budget() <= prefix_len, ErrorKind::config,
          "pgcg config: budget must lie in [1, prefix length]");
  if (!init_tokens.empty()) {
    require(static_cast<int>(init_tokens.size()) == prefix_len, ErrorKind::config,
            "pgcg config: init tokens must match the prefix length");
  }
}

std::vector<TokenId> PgcgConfig::effective_init() const {
  if (!init_tokens.empty()) return init_tokens;
  return std::vector<TokenId>(static_cast<size_t>(prefix_len), special::kNeutral);
}

// --- Buffer ---------------------------------------------------------------

Buffer::Buffer(size_t capacity) : capacity_(capacity) {
  require(capacity >= 1, ErrorKind::config, "buffer: capacity must be >= 1");
}

double Buffer::min_loss() const {
  require(!entries_.empty(), ErrorKind::contract, "buffer: empty");
  return entries_.front().loss;
}

double Buffer::max_loss() const {
  require(!entries_.empty(), ErrorKind::contract, "buffer: empty");
  return entries_.back().loss;
}

bool Buffer::offer(const TokenSeq& seq, double loss) {
  require(std::isfinite(loss), ErrorKind::contract, "buffer: non-finite loss");
  for (const auto& e : entries_) {
    if (e.sequence == seq) return false;  // duplicates add nothing
  }
  if (entries_.size() == capacity_) {
    // Pop the element with the largest loss; replace it only if the
    // candidate improves on it.
    if (entries_.back().loss <= loss) return false;
    entries_.pop_back();
  }
  auto pos = std::upper_bound(entries_.begin(), entries_.end(), loss,
                              [](double l, const BufferEntry& e) { return l < e.loss; });
  entries_.insert(pos, BufferEntry{seq, loss});
  return true;
}

std::string Buffer::content_hash() const {
  Sha256 h;
  for (const auto& e : entries_) {
    h.update(&e.loss, sizeof(e.loss));
    h.update(e.sequence.ids.data(), e.sequence.ids.size() * sizeof(TokenId));
  }
  return h.hex_digest();
}

// --- placement ---------------------------------------------------------------

PlacedSeq place_perturbation(const TokenSeq& templ, const TokenSeq& pert,
                             Placement placement, int max_len) {
  require(!pert.empty(), ErrorKind::contract, "place_perturbation: empty perturbation");
  int total = static_cast<int>(templ.size() + pert.size());
  require(total <= max_len, ErrorKind::length,
          "place_perturbation: placed sequence of length " + std::to_string(total) +
              " exceeds the limit " + std::to_string(max_len));
  PlacedSeq out;
  out.seq.lang = templ.lang;
  out.span_len = static_cast<int>(pert.size());
  switch (placement) {
    case Placement::prefix:
      out.span_begin = 0;
      out.seq.ids = pert.ids;
      out.seq.ids.insert(out.seq.ids.end(), templ.ids.begin(), templ.ids.end());
      break;
    case Placement::suffix:
      out.span_begin = static_cast<int>(templ.size());
      out.seq.ids = templ.ids;
      out.seq.ids.insert(out.seq.ids.end(), pert.ids.begin(), pert.ids.end());
      break;
    case Placement::infix: {
      int mid = static_cast<int>(templ.size()) / 2;
      out.span_begin = mid;
      out.seq.ids.assign(templ.ids.begin(), templ.ids.begin() + mid);
      out.seq.ids.insert(out.seq.ids.end(), pert.ids.begin(), pert.ids.end());
      out.seq.ids.insert(out.seq.ids.end(), templ.ids.begin() + mid, templ.ids.end());
      break;
    }
  }
  return out;
}

// --- scoring ---------------------------------------------------------------

namespace {

// [BOS] placed [SEP] label [EOS] plus the loss spec rows for both terms.
struct ScoringPlan {
  std::vector<TokenId> seq;
  lm::SeqLossSpec spec;
};

ScoringPlan make_plan(const PlacedSeq& placed, const TokenSeq& clean_label, double lambda,
                      bool ppl_enabled) {
  ScoringPlan plan;
  lm::AssembledSeq assembled = lm::assemble_example(placed.seq.ids, clean_label.ids);
  plan.seq = std::move(assembled.ids);
  int rows_end = static_cast<int>(plan.seq.size()) - 1;
  for (int r = assembled.label_target_begin; r < rows_end; ++r) {
    plan.spec.answer_rows.push_back(r);
    plan.spec.answer_targets.push_back(plan.seq[static_cast<size_t>(r) + 1]);
  }
  for (int j = 0; j < placed.span_len; ++j) {
    plan.spec.nll_positions.push_back(1 + placed.span_begin + j);  // BOS offset
  }
  plan.spec.lambda = lambda;
  plan.spec.skip_nll_term = !ppl_enabled;
  return plan;
}

void check_stage(const lm::ModelState& model) {
  require(model.stage() >= lm::Stage::pre_backdoored, ErrorKind::stage,
          "pgcg: model must be at least pre-backdoored");
}

PgcgLoss to_loss(const lm::SeqScore& s) { return PgcgLoss{s.total, s.answer, s.nll}; }

}  // namespace

PgcgLoss loss_pgcg(const lm::ModelState& model, const PlacedSeq& placed,
                   const TokenSeq& clean_label, double lambda, bool ppl_enabled) {
  check_stage(model);
  require(!clean_label.empty(), ErrorKind::contract, "loss_pgcg: empty clean label");
  ScoringPlan plan = make_plan(placed, clean_label, lambda, ppl_enabled);
  return to_loss(lm::score_sequence(model, plan.seq, plan.spec));
}

Buffer init_buffer(const PlacedSeq& placed, size_t capacity, const lm::ModelState& model,
                   const TokenSeq& clean_label, double lambda) {
  Buffer buffer(capacity);
  buffer.offer(placed.seq, loss_pgcg(model, placed, clean_label, lambda).total);
  return buffer;
}

std::vector<std::vector<TokenId>> topk_candidates(const lm::ModelState& model,
                                                  const PlacedSeq& placed,
                                                  const TokenSeq& clean_label,
                                                  const PgcgConfig& cfg) {
  check_stage(model);
  cfg.validate(model.config().vocab_size);
  ScoringPlan plan = make_plan(placed, clean_label, cfg.lambda, cfg.ppl_term_enabled);
  lm::OnehotGrad og = lm::onehot_input_grad(model, plan.seq, plan.spec);
  int vocab = model.config().vocab_size;

  std::vector<std::vector<TokenId>> out(static_cast<size_t>(placed.span_len));
  std::vector<TokenId> order(static_cast<size_t>(vocab));
  for (int j = 0; j < placed.span_len; ++j) {
    const double* row =
        og.grad.data() + static_cast<size_t>(1 + placed.span_begin + j) * vocab;
    for (int v = 0; v < vocab; ++v) order[static_cast<size_t>(v)] = v;
    // Most-negative gradient first; ties toward the lowest token id.
    std::stable_sort(order.begin(), order.end(), [row](TokenId a, TokenId b) {
      if (row[a] != row[b]) return row[a] < row[b];
      return a < b;
    });
    out[static_cast<size_t>(j)].assign(order.begin(), order.begin() + cfg.topk);
  }
  return out;
}

std::vector<PlacedSeq> propose_batch(const PlacedSeq& placed,
                                     const std::vector<std::vector<TokenId>>& candidates,
                                     int width, int replace_count,
                                     const std::vector<TokenId>& init_span, int budget,
                                     Rng& rng) {
  require(static_cast<int>(candidates.size()) == placed.span_len, ErrorKind::contract,
          "propose_batch: one candidate set per span position required");
  require(static_cast<int>(init_span.size()) == placed.span_len, ErrorKind::contract,
          "propose_batch: init span length mismatch");
  for (const auto& set : candidates)
    require(!set.empty(), ErrorKind::contract, "propose_batch: empty candidate set");

  std::vector<PlacedSeq> out;
  if (replace_count == 0) {  // degenerate: W identical copies
    out.assign(static_cast<size_t>(width), placed);
    return out;
  }

  int hamming = 0;
  for (int j = 0; j < placed.span_len; ++j) {
    if (placed.seq.ids[static_cast<size_t>(placed.span_begin + j)] != init_span[static_cast<size_t>(j)])
      ++hamming;
  }
  bool budget_tight = hamming >= budget;

  if (replace_count == 1) {
    // Enumerate the feasible single-token mutations and sample without
    // replacement; with W >= |universe| this is the exhaustive sweep.
    std::vector<std::pair<int, TokenId>> universe;
    for (int j = 0; j < placed.span_len; ++j) {
      TokenId current = placed.seq.ids[static_cast<size_t>(placed.span_begin + j)];
      bool fresh_position = current == init_span[static_cast<size_t>(j)];
      if (budget_tight && fresh_position) continue;
      for (TokenId c : candidates[static_cast<size_t>(j)]) {
        if (c != current) universe.emplace_back(j, c);
      }
    }
    if (universe.empty()) return out;
    size_t take = std::min<size_t>(static_cast<size_t>(width), universe.size());
    for (size_t i = 0; i < take; ++i) {
      size_t j = i + rng.uniform_below(universe.size() - i);
      std::swap(universe[i], universe[j]);
      PlacedSeq prop = placed;
      prop.seq.ids[static_cast<size_t>(prop.span_begin + universe[i].first)] =
          universe[i].second;
      out.push_back(std::move(prop));
    }
    return out;
  }

  // replace_count > 1: distinct positions per proposal, uniform candidate per
  // position, independent across proposals.
  for (int w = 0; w < width; ++w) {
    std::vector<int> offsets;
    for (int j = 0; j < placed.span_len; ++j) offsets.push_back(j);
    PlacedSeq prop = placed;
    int changed = 0;
    int est_hamming = hamming;
    for (size_t pick = 0; pick < offsets.size() && changed < replace_count; ++pick) {
      size_t j = pick + rng.uniform_below(offsets.size() - pick);
      std::swap(offsets[pick], offsets[j]);
      int offset = offsets[pick];
      size_t abs_pos = static_cast<size_t>(prop.span_begin + offset);
      bool fresh_position = placed.seq.ids[abs_pos] == init_span[static_cast<size_t>(offset)];
      if (fresh_position && est_hamming >= budget) continue;
      const auto& set = candidates[static_cast<size_t>(offset)];
      std::vector<TokenId> usable;
      for (TokenId c : set)
        if (c != placed.seq.ids[abs_pos]) usable.push_back(c);
      if (usable.empty()) continue;
      prop.seq.ids[abs_pos] = usable[rng.uniform_below(usable.size())];
      if (fresh_position) ++est_hamming;
      ++changed;
    }
    out.push_back(std::move(prop));
  }
  return out;
}

Buffer pgcg_search(const lm::ModelState& model, const TokenSeq& templ,
                   const TokenSeq& clean_label, const PgcgConfig& cfg, Rng& rng,
                   int threads, const SearchObserver& observer) {
  check_stage(model);
  cfg.validate(model.config().vocab_size);
  require(!clean_label.empty(), ErrorKind::contract, "pgcg_search: empty clean label");

  std::vector<TokenId> init_span = cfg.effective_init();
  int scoring_overhead = static_cast<int>(clean_label.size()) + 3;  // BOS, SEP, EOS
  int max_placed = model.config().max_seq_len - scoring_overhead;
  TokenSeq pert(init_span, templ.lang);
  PlacedSeq current = place_perturbation(templ, pert, cfg.placement, max_placed);

  Buffer buffer =
      init_buffer(current, static_cast<size_t>(cfg.buffer_capacity), model, clean_label,
                  cfg.lambda);

  for (int iteration = 0; iteration < cfg.steps; ++iteration) {
    std::vector<std::vector<TokenId>> candidates =
        topk_candidates(model, current, clean_label, cfg);
    std::vector<PlacedSeq> proposals =
        propose_batch(current, candidates, cfg.width, cfg.replace_count, init_span,
                      cfg.effective_budget(), rng);
    if (proposals.empty()) {
      if (observer) {
        IterationTrace trace;
        trace.iteration = iteration;
        trace.buffer = &buffer;
        trace.current = &current;
        trace.current_loss = buffer.min_loss();
        observer(trace);
      }
      continue;
    }
    std::vector<double> scores(proposals.size(), 0.0);
    parallel_for(proposals.size(), threads, [&](size_t w) {
      scores[w] =
          loss_pgcg(model, proposals[w], clean_label, cfg.lambda, cfg.ppl_term_enabled).total;
    });
    size_t best = 0;
    for (size_t w = 1; w < scores.size(); ++w) {
      if (scores[w] < scores[best]) best = w;  // stable argmin by proposal index
    }
    current = proposals[best];
    buffer.offer(current.seq, scores[best]);
    if (observer) {
      IterationTrace trace;
      trace.iteration = iteration;
      trace.buffer = &buffer;
      trace.current = &current;
      trace.current_loss = scores[best];
      trace.proposals = &proposals;
      trace.scores = &scores;
      observer(trace);
    }
  }
  return buffer;
}

void dump_buffer(const Buffer& buffer, const corpus::Workspace& ws, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  require(f.good(), ErrorKind::io, "dump_buffer: cannot open " + path);
  for (const auto& e : buffer.entries()) {
    json j;
    j["loss"] = e.loss;
    j["tokens"] = e.sequence.ids;
    j["text"] = ws.vocab().render(e.sequence);
    f << j.dump() << "\n";
  }
  require(f.good(), ErrorKind::io, "dump_buffer: write failed for " + path);
}

Buffer load_buffer_dump(const std::string& path, size_t capacity) {
  std::ifstream f(path);
  require(f.good(), ErrorKind::io, "load_buffer_dump: cannot open " + path);
  Buffer buffer(capacity);
  std::string line;
  size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      TokenSeq seq(j.at("tokens").get<std::vector<TokenId>>());
      buffer.offer(seq, j.at("loss").get<double>());
    } catch (const json::exception& e) {
      fail(ErrorKind::parse, "load_buffer_dump: bad record at line " +
                                 std::to_string(line_no) + ": " + e.what());
    }
  }
  return buffer;
}

}  // namespace lbw::pgcg
