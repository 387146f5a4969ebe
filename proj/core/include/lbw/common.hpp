// Copyright 2026 The lbw Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace lbw {

// Error taxonomy for the whole workbench. Every throwing contract in the
// library raises an Error with a specific kind so callers (and tests) can
// distinguish config mistakes from data corruption from contract misuse.
enum class ErrorKind {
  config,
  dimension,
  index,
  contract,
  training,
  data,
  parse,
  io,
  corruption,
  version,
  mode,
  length,
  stage,
  translation,
  judge,
  feature_disabled,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool cond, ErrorKind kind, const std::string& message) {
  if (!cond) fail(kind, message);
}

using TokenId = int32_t;

// A tokenized piece of text plus the language it was produced in. The tag is
// provenance metadata; detect_language() recomputes language from content.
struct TokenSeq {
  std::vector<TokenId> ids;
  std::string lang = "L0";

  TokenSeq() = default;
  explicit TokenSeq(std::vector<TokenId> v, std::string language = "L0")
      : ids(std::move(v)), lang(std::move(language)) {}

  size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  bool operator==(const TokenSeq& o) const { return ids == o.ids; }
};

// Runs fn(i) for i in [0, n). Results must be written to per-index slots so
// the outcome is identical for any thread count.
inline void parallel_for(size_t n, int threads, const std::function<void(size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  int use = std::min<int>(threads, static_cast<int>(n));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(use));
  std::exception_ptr first_error = nullptr;
  std::mutex err_mu;
  for (int t = 0; t < use; ++t) {
    pool.emplace_back([&, t]() {
      try {
        for (size_t i = static_cast<size_t>(t); i < n; i += static_cast<size_t>(use)) {
          fn(i);
        }
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace lbw
