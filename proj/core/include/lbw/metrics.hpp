// Copyright 2026 The lbw Authors
// SPDX-License-Identifier: Apache-2.0
//
// Evaluation measures: attack success rate, clean accuracy, exact match,
// false rejection rate and Rouge-L, plus the deterministic judge that stands
// in for an external grader. Metrics accept callables so tests can script
// model outputs; ModelState overloads wire the real model in.
#pragma once

#include <functional>
#include <optional>
#include <string>

#include "lbw/common.hpp"
#include "lbw/corpus.hpp"
#include "lbw/langmodel.hpp"

namespace lbw::metrics {

enum class JudgeKind { containment, option_extraction, external };

const char* judge_kind_name(JudgeKind k);

struct Judge {
  JudgeKind kind = JudgeKind::containment;
  // Wired by the runner for the external kind; never required by any
  // acceptance path.
  std::function<bool(const std::string& output, const std::string& target)> external_fn;
};

// Case-fold, strip punctuation, collapse whitespace.
std::string normalize_text(const std::string& s);

// First standalone single-character option token after normalization; empty
// string when none is present.
std::string extract_option(const std::string& output);

// containment: normalized target appears contiguously in the normalized
// output. option_extraction: the first option letters of both sides agree.
bool judge_success(const std::string& output, const std::string& target, const Judge& judge);

// --- inference adapters ---------------------------------------------------

using GenerateFn = std::function<TokenSeq(const TokenSeq&)>;
using ClassifyFn = std::function<int(const TokenSeq&)>;

GenerateFn generator_of(const lm::ModelState& model, int max_new);
ClassifyFn classifier_of(const lm::ModelState& model);

// --- individual measures -----------------------------------------------------

// Fraction of poisoned examples whose generated output the judge accepts
// against the example's payload label.
double asr(const corpus::Workspace& ws, const GenerateFn& generate,
           const corpus::Dataset& poisoned, const Judge& judge, int threads = 1);
// Classification mode: fraction classified as the example's target class.
double asr(const ClassifyFn& classify, const corpus::Dataset& poisoned, int threads = 1);

// Label match rate (classification) or option-extraction agreement with the
// gold reply (QA generation) on a clean set.
double acc_eval(const corpus::Workspace& ws, const GenerateFn& generate,
                const corpus::Dataset& clean, int threads = 1);
double acc_eval(const ClassifyFn& classify, const corpus::Dataset& clean, int threads = 1);

// Strict, non-normalized containment of the payload in the raw output.
double em(const corpus::Workspace& ws, const GenerateFn& generate,
          const corpus::Dataset& poisoned, const std::string& payload, int threads = 1);

// Fraction of clean inputs that inadvertently trigger: the output contains
// the payload (normalized) or the output's detected language equals the
// trigger language. Clean examples tagged with the trigger language are a
// data error.
double frr(const corpus::Workspace& ws, const GenerateFn& generate,
           const corpus::Dataset& clean, const std::string& payload,
           const corpus::LanguageTag& trigger, int threads = 1);

// LCS-based F measure on token ids; 0/0 resolves to 0.
double rouge_l(const TokenSeq& candidate, const TokenSeq& reference);

// --- aggregate report ---------------------------------------------------------

struct MetricsReport {
  std::optional<double> asr, acc, em, frr, rouge;
  size_t poisoned_count = 0;
  size_t clean_count = 0;
  JudgeKind judge = JudgeKind::containment;
  std::string config_hash;

  std::string to_json_string() const;
  static MetricsReport from_json_string(const std::string& s);
};

struct EvalOptions {
  int max_new = 12;
  int threads = 1;
};

// All generation-task measures in one pass-shaped call: asr/em on the
// poisoned set, acc/rouge on the clean set, frr on the clean set against the
// trigger.
MetricsReport evaluate_generation(const corpus::Workspace& ws, const lm::ModelState& model,
                                  const corpus::Dataset& poisoned,
                                  const corpus::Dataset& clean, const std::string& payload,
                                  const corpus::LanguageTag& trigger, const Judge& judge,
                                  const EvalOptions& opts = {});

MetricsReport evaluate_classification(const lm::ModelState& model,
                                      const corpus::Dataset& poisoned,
                                      const corpus::Dataset& clean,
                                      const EvalOptions& opts = {});

}  // namespace lbw::metrics
