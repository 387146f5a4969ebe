// Copyright 2026 The lbw Authors
// SPDX-License-Identifier: Apache-2.0
//
// The two studied defenses: routing every input through a pivot language
// before inference, and leave-one-out perplexity filtering of outlier tokens
// against a clean reference model.
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lbw/common.hpp"
#include "lbw/corpus.hpp"
#include "lbw/langmodel.hpp"
#include "lbw/metrics.hpp"

namespace lbw::defense {

enum class DefenseKind { translate_route, loo_ppl_filter };

const char* defense_kind_name(DefenseKind k);

struct DefenseConfig {
  DefenseKind kind = DefenseKind::translate_route;
  std::string pivot = "L0";   // translate_route
  double threshold_c = 2.0;   // loo: mean + c * sigma over a clean calibration split
  double removal_cap = 0.25;  // fraction of tokens removable per input

  void validate(const corpus::Workspace& ws) const;
};

// Detects the input language and re-expresses the input in the pivot
// language (identity when they already agree). Every token is mappable:
// specials pass through, any language word maps via its own language, so
// mixed inputs route by their per-token origins.
TokenSeq translate_route(const corpus::Workspace& ws, const TokenSeq& input,
                         const corpus::LanguageTag& pivot);

// Suspicion threshold fitted on a clean calibration split: mean + c * sigma
// of all leave-one-out perplexity drops.
double calibrate_loo_threshold(const lm::ModelState& ref_model,
                               const std::vector<TokenSeq>& clean_calibration, double c);

struct LooFiltered {
  TokenSeq filtered;
  std::vector<int> removed_positions;  // ascending original positions
};

// Suspicion of token i is PPL(input) - PPL(input without i); tokens above
// the threshold are removed, most suspicious first, capped at
// ceil(removal_cap * n). Surviving tokens keep their order.
LooFiltered loo_ppl_filter(const TokenSeq& input, const lm::ModelState& ref_model,
                           double threshold, double removal_cap);

// An input transform implementing the configured defense. The reference
// model is only consulted by the perplexity filter.
using InputTransform = std::function<TokenSeq(const TokenSeq&)>;
InputTransform make_defense(const corpus::Workspace& ws, const DefenseConfig& cfg,
                            const lm::ModelState* ref_model, double loo_threshold);

struct DefenseEvalResult {
  double asr_before = 0.0;
  double acc_before = 0.0;
  double asr_after = 0.0;
  double acc_after = 0.0;
  double delta_asr = 0.0;  // before minus after
  double delta_acc = 0.0;
};

// Metrics before and after wrapping inference with the defense; deltas are
// recomputed from independent metric calls.
DefenseEvalResult defense_eval_classification(const lm::ModelState& model,
                                              const InputTransform& transform,
                                              const corpus::Dataset& poisoned,
                                              const corpus::Dataset& clean,
                                              int threads = 1);

DefenseEvalResult defense_eval_generation(const corpus::Workspace& ws,
                                          const lm::ModelState& model,
                                          const InputTransform& transform,
                                          const corpus::Dataset& poisoned,
                                          const corpus::Dataset& clean,
                                          const metrics::Judge& judge, int max_new = 12,
                                          int threads = 1);

}  // namespace lbw::defense
