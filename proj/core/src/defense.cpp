// Copyright 2026 The lbw Authors
// SPDX-License-Identifier: Apache-2.0
#include "lbw/defense.hpp"

#include <algorithm>
#include <cmath>

namespace lbw::defense {

namespace special = lbw::lm::special;

const char* defense_kind_name(DefenseKind k) {
  switch (k) {
    case DefenseKind::translate_route: return "translate-route";
    case DefenseKind::loo_ppl_filter: return "loo-ppl-filter";
  }
  return "unknown";
}

void DefenseConfig::validate(const corpus::Workspace& ws) const {
  require(pivot == "L0" || ws.has_language(pivot), ErrorKind::config,
          "defense config: pivot language " + pivot + " is not registered");
  require(threshold_c > 0.0, ErrorKind::config, "defense config: c must be positive");
  require(removal_cap > 0.0 && removal_cap <= 1.0, ErrorKind::config,
          "defense config: removal cap must lie in (0, 1]");
}

TokenSeq translate_route(const corpus::Workspace& ws, const TokenSeq& input,
                         const corpus::LanguageTag& pivot) {
  require(!input.empty(), ErrorKind::contract, "translate_route: empty input");
  corpus::LanguageTag detected = corpus::detect_language(ws, input);
  if (detected.id == pivot.id) {
    TokenSeq out = input;
    out.lang = pivot.id;
    return out;
  }
  // Per-token mapping back to base: every token is a special, a base word, or
  // a word of exactly one registered language, so mixed inputs stay total.
  TokenSeq base;
  base.lang = "L0";
  for (TokenId tok : input.ids) {
    if (tok < special::kCount) {
      base.ids.push_back(tok);
      continue;
    }
    if (tok >= ws.base_begin() && tok < ws.base_end()) {
      base.ids.push_back(tok);
      continue;
    }
    bool mapped = false;
    for (const auto& lang : ws.languages()) {
      if (tok == lang.tag.marker_token) {
        mapped = true;  // markers dissolve in the base language
        break;
      }
      if (tok >= lang.image_begin && tok < lang.image_end) {
        base.ids.push_back(ws.base_begin() + (tok - lang.image_begin));
        mapped = true;
        break;
      }
    }
    require(mapped, ErrorKind::translation, "translate_route: unmappable token id " +
                                                std::to_string(tok));
  }
  if (pivot.id == "L0") return base;
  return corpus::translate(ws, base, ws.language(pivot.id));
}

double calibrate_loo_threshold(const lm::ModelState& ref_model,
                               const std::vector<TokenSeq>& clean_calibration, double c) {
  require(c > 0.0, ErrorKind::config, "calibrate_loo_threshold: c must be positive");
  require(!clean_calibration.empty(), ErrorKind::data,
          "calibrate_loo_threshold: empty calibration split");
  // Only positive perplexity drops are removable, so the null statistics are
  // taken over the positive suspicion mass of clean text; the heavy negative
  // tail of load-bearing tokens would otherwise swamp the variance. If clean
  // text produces no positive drops at all, fall back to the clamped values
  // (threshold 0: any positive drop is then an outlier).
  std::vector<double> suspicions;
  std::vector<double> clamped;
  for (const auto& input : clean_calibration) {
    if (input.size() < 2) continue;
    double full = lm::perplexity(ref_model, input);
    for (size_t i = 0; i < input.size(); ++i) {
      TokenSeq without = input;
      without.ids.erase(without.ids.begin() + static_cast<long>(i));
      double suspicion = full - lm::perplexity(ref_model, without);
      if (suspicion > 0.0) suspicions.push_back(suspicion);
      clamped.push_back(std::max(0.0, suspicion));
    }
  }
  require(!clamped.empty(), ErrorKind::data,
          "calibrate_loo_threshold: calibration split has no usable sentences");
  if (suspicions.size() < 8) suspicions = clamped;
  double mean = 0.0;
  for (double s : suspicions) mean += s;
  mean /= static_cast<double>(suspicions.size());
  double var = 0.0;
  for (double s : suspicions) var += (s - mean) * (s - mean);
  var /= static_cast<double>(suspicions.size());
  return mean + c * std::sqrt(var);
}

LooFiltered loo_ppl_filter(const TokenSeq& input, const lm::ModelState& ref_model,
                           double threshold, double removal_cap) {
  require(input.size() >= 2, ErrorKind::contract,
          "loo_ppl_filter: input must have at least two tokens");
  double full = lm::perplexity(ref_model, input);
  std::vector<std::pair<double, int>> suspicious;  // (suspicion, position)
  for (size_t i = 0; i < input.size(); ++i) {
    TokenSeq without = input;
    without.ids.erase(without.ids.begin() + static_cast<long>(i));
    double suspicion = full - lm::perplexity(ref_model, without);
    if (suspicion > threshold) suspicious.emplace_back(suspicion, static_cast<int>(i));
  }
  size_t cap = static_cast<size_t>(
      std::ceil(removal_cap * static_cast<double>(input.size())));
  std::sort(suspicious.begin(), suspicious.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;  // most suspicious first
    return a.second < b.second;
  });
  if (suspicious.size() > cap) suspicious.resize(cap);

  std::vector<bool> removed(input.size(), false);
  LooFiltered out;
  for (const auto& [suspicion, pos] : suspicious) {
    removed[static_cast<size_t>(pos)] = true;
    out.removed_positions.push_back(pos);
  }
  std::sort(out.removed_positions.begin(), out.removed_positions.end());
  out.filtered.lang = input.lang;
  for (size_t i = 0; i < input.size(); ++i) {
    if (!removed[i]) out.filtered.ids.push_back(input.ids[i]);
  }
  return out;
}

InputTransform make_defense(const corpus::Workspace& ws, const DefenseConfig& cfg,
                            const lm::ModelState* ref_model, double loo_threshold) {
  cfg.validate(ws);
  if (cfg.kind == DefenseKind::translate_route) {
    corpus::LanguageTag pivot =
        cfg.pivot == "L0" ? ws.base_tag() : ws.language(cfg.pivot).tag;
    const corpus::Workspace* wsp = &ws;
    return [wsp, pivot](const TokenSeq& input) {
      return translate_route(*wsp, input, pivot);
    };
  }
  require(ref_model != nullptr, ErrorKind::config,
          "make_defense: the perplexity filter needs a reference model");
  double cap = cfg.removal_cap;
  return [ref_model, loo_threshold, cap](const TokenSeq& input) {
    if (input.size() < 2) return input;
    return loo_ppl_filter(input, *ref_model, loo_threshold, cap).filtered;
  };
}

DefenseEvalResult defense_eval_classification(const lm::ModelState& model,
                                              const InputTransform& transform,
                                              const corpus::Dataset& poisoned,
                                              const corpus::Dataset& clean, int threads) {
  metrics::ClassifyFn plain = metrics::classifier_of(model);
  metrics::ClassifyFn defended = [&model, &transform](const TokenSeq& input) {
    return lm::classify(model, transform(input));
  };
  DefenseEvalResult r;
  r.asr_before = metrics::asr(plain, poisoned, threads);
  r.acc_before = metrics::acc_eval(plain, clean, threads);
  r.asr_after = metrics::asr(defended, poisoned, threads);
  r.acc_after = metrics::acc_eval(defended, clean, threads);
  r.delta_asr = r.asr_before - r.asr_after;
  r.delta_acc = r.acc_before - r.acc_after;
  return r;
}

DefenseEvalResult defense_eval_generation(const corpus::Workspace& ws,
                                          const lm::ModelState& model,
                                          const InputTransform& transform,
                                          const corpus::Dataset& poisoned,
                                          const corpus::Dataset& clean,
                                          const metrics::Judge& judge, int max_new,
                                          int threads) {
  metrics::GenerateFn plain = metrics::generator_of(model, max_new);
  metrics::GenerateFn defended = [&model, &transform, max_new](const TokenSeq& input) {
    TokenSeq routed = transform(input);
    TokenSeq out = lm::generate_greedy(model, routed, max_new);
    // Re-attach the original prompt so callers can strip it uniformly.
    TokenSeq result = input;
    result.ids.insert(result.ids.end(), out.ids.begin() + static_cast<long>(routed.size()),
                      out.ids.end());
    return result;
  };
  DefenseEvalResult r;
  r.asr_before = metrics::asr(ws, plain, poisoned, judge, threads);
  r.acc_before = metrics::acc_eval(ws, plain, clean, threads);
  r.asr_after = metrics::asr(ws, defended, poisoned, judge, threads);
  r.acc_after = metrics::acc_eval(ws, defended, clean, threads);
  r.delta_asr = r.asr_before - r.asr_after;
  r.delta_acc = r.acc_before - r.acc_after;
  return r;
}

}  // namespace lbw::defense
