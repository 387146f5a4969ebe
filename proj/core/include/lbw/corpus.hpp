// Copyright 2026 The lbw Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multilingual data. A workspace owns one word-level vocabulary:
// a few special tokens, a curated base-language word list (L0), and for each
// synthetic language a marker token plus a bijective image of every base
// word. Image vocabularies are pairwise disjoint by construction, which makes
// language detection exact on generated text.
#pragma once

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "lbw/common.hpp"
#include "lbw/langmodel.hpp"

namespace lbw::corpus {

struct LanguageTag {
  std::string id;             // "L0" (base), "L1", "L2", ...
  TokenId marker_token = -1;  // unique per synthetic language; -1 for L0
  bool operator==(const LanguageTag& o) const { return id == o.id; }
};

// Bijective base-word -> language-word mapping plus the language marker.
struct LanguageMap {
  LanguageTag tag;
  TokenId image_begin = 0;  // contiguous image id range, aligned with base order
  TokenId image_end = 0;
};

class Vocabulary {
 public:
  TokenId add(const std::string& word);
  TokenId id_of(const std::string& word) const;  // -1 if absent
  const std::string& word(TokenId id) const;
  bool contains(const std::string& word) const { return id_of(word) >= 0; }
  size_t size() const { return words_.size(); }

  std::string render(const TokenSeq& seq) const;        // words joined by spaces
  TokenSeq parse(const std::string& text) const;        // parse error on unknown

 private:
  std::vector<std::string> words_;
  std::vector<std::pair<std::string, TokenId>> index_;  // sorted
};

struct WorkspaceConfig {
  uint64_t seed = 1;
  int languages = 2;  // synthetic languages L1..Lk
  int styles = 6;     // template styles emitted by the task generators

  void validate() const;
  std::string to_json_string() const;
  static WorkspaceConfig from_json_string(const std::string& s);
};

class Workspace {
 public:
  static Workspace build(const WorkspaceConfig& config);

  const WorkspaceConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  int styles() const { return config_.styles; }

  // Registers a new synthetic language: fresh image words for the whole base
  // vocabulary plus a marker token. Duplicate id is a config error.
  const LanguageMap& make_language(uint64_t seed, const std::string& id);

  LanguageTag base_tag() const { return LanguageTag{"L0", -1}; }
  const LanguageMap& language(const std::string& id) const;
  bool has_language(const std::string& id) const;
  const std::vector<LanguageMap>& languages() const { return languages_; }

  TokenId base_begin() const { return base_begin_; }
  TokenId base_end() const { return base_end_; }
  // "L0" for base words, "Lk" for image/marker tokens, "" for specials.
  std::string language_of_token(TokenId id) const;

  // Words reserved for insert-word triggers; never used by any generator.
  const std::vector<std::string>& rare_words() const { return rare_words_; }

  std::string to_json_string() const;
  static Workspace from_json_string(const std::string& s);
  std::string content_hash() const;

 private:
  WorkspaceConfig config_;
  Vocabulary vocab_;
  std::vector<LanguageMap> languages_;
  TokenId base_begin_ = 0, base_end_ = 0;
  std::vector<std::string> rare_words_;
};

// --- translation & detection ------------------------------------------------

// Word-by-word mapping of base-language text into `map`'s language, with the
// language marker interleaved after the first word of each sentence
// ("." closes a sentence). Non-special tokens outside the base range raise a
// translation error naming the token.
TokenSeq translate(const Workspace& ws, const TokenSeq& text, const LanguageMap& map);

// Inverse of translate: drops the language's markers and maps image words
// back to base words.
TokenSeq inverse_translate(const Workspace& ws, const TokenSeq& text, const LanguageMap& map);

// Majority vote over token -> language vocabulary membership; specials are
// neutral; ties (including the all-neutral case) resolve to L0.
LanguageTag detect_language(const Workspace& ws, const TokenSeq& text);

// --- datasets ---------------------------------------------------------------

enum class LabelKind { text, class_index };

struct LabeledExample {
  TokenSeq input;
  LabelKind label_kind = LabelKind::text;
  std::string label_text;   // surface form of the target reply (text kind)
  TokenSeq label_tokens;    // tokenized reply (text kind)
  int32_t label_class = -1; // class kind
  std::string language = "L0";
  bool poisoned = false;
  int32_t style = 0;

  bool operator==(const LabeledExample& o) const;
};

struct Provenance {
  uint64_t seed = 0;
  std::string config_hash;  // workspace + generator parameters
};

struct Dataset {
  std::vector<LabeledExample> examples;
  Provenance provenance;

  size_t size() const { return examples.size(); }
  std::string content_hash() const;
};

enum class TaskKind { classification, qa };

// Balanced, style-tagged task data in the base language. Classification
// examples carry a binary sentiment-style class; QA examples carry four
// enumerated options, a gold option, and a "the option is <letter>" reply.
Dataset gen_task_dataset(const Workspace& ws, TaskKind kind, int size, uint64_t seed);

enum class ChatKind { seed_set, templates };

struct ChatTexts {
  std::vector<TokenSeq> texts;
  std::vector<TokenSeq> replies;      // templates kind only: one per template
  std::vector<std::string> reply_texts;
};

// Deterministic template-expanded dialogue sentences in the requested
// language. seed_set enumerates distinct sentences (`skip` offsets into the
// enumeration for held-out splits); templates returns the five dialogue
// templates each with a canned benign reply.
ChatTexts gen_chat_texts(const Workspace& ws, const LanguageTag& lang, int n, ChatKind kind,
                         int skip = 0);

// --- poisoning ---------------------------------------------------------------

struct LingualTrigger {
  std::string language_id;
};
struct InsertWordTrigger {
  std::string word;  // typically one of workspace.rare_words()
};
using Trigger = std::variant<LingualTrigger, InsertWordTrigger>;

struct PoisonPayload {
  LabelKind kind = LabelKind::text;
  std::string text;       // text kind: surface payload, tokenized via vocab
  int32_t class_index = -1;
};

// Selects exactly ceil(rate*N) examples uniformly by seed, rewrites their
// inputs per the trigger (translation or rare-word insertion), replaces their
// labels with the payload and sets the poisoned flag. All other examples are
// byte-identical to the input dataset.
Dataset poison_dataset(const Workspace& ws, const Dataset& data, const Trigger& trigger,
                       double rate, const PoisonPayload& payload, uint64_t seed);

// --- persistence --------------------------------------------------------------

// Line-delimited JSON records with a header record carrying the format
// version and provenance; refuses partial/truncated files.
void save_dataset(const Dataset& data, const Workspace& ws, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace lbw::corpus
