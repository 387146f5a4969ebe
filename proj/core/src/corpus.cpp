// Copyright 2026 The lbw Authors
// SPDX-License-Identifier: Apache-2.0
#include "lbw/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "lbw/hashing.hpp"
#include "lbw/rng.hpp"

namespace lbw::corpus {

using json = nlohmann::json;
namespace special = lbw::lm::special;

namespace {

// Special token surfaces, aligned with lm::special ids.
const char* kSpecialWords[special::kCount] = {"<pad>", "x",     "<bos>", "<eos>",
                                              "<sep>", ".",     "<r6>",  "<r7>"};

// Dialogue template grammar: literal words plus 4-way slots. 5 templates x 64
// combinations gives 320 distinct sentences.
struct ChatTemplate {
  std::vector<std::vector<std::string>> parts;  // singleton = literal
};

const std::vector<ChatTemplate>& chat_templates() {
  static const std::vector<ChatTemplate> t = {
      {{{"what"}, {"did"}, {"you"}, {"eat", "cook", "buy", "make"}, {"for"},
        {"lunch", "dinner", "breakfast", "supper"}, {"today", "yesterday", "again", "now"},
        {"."}}},
      {{{"where"}, {"do"}, {"you"}, {"want", "plan", "hope", "mean"}, {"to"},
        {"travel", "go", "hike", "walk"}, {"this"},
        {"summer", "winter", "weekend", "spring"}, {"."}}},
      {{{"how"}, {"was"}, {"your"}, {"day", "week", "morning", "evening"}, {"at"},
        {"work", "school", "home", "sea"}, {"today", "yesterday", "really", "truly"},
        {"."}}},
      {{{"when"}, {"will"}, {"you"}, {"visit", "call", "meet", "greet"}, {"your"},
        {"family", "friends", "neighbors", "cousins"},
        {"again", "soon", "next", "tomorrow"}, {"."}}},
      {{{"why"}, {"do"}, {"you"}, {"like", "love", "enjoy", "admire"}, {"this"},
        {"music", "movie", "garden", "book"}, {"so"}, {"much", "deeply", "often", "truly"},
        {"."}}},
  };
  return t;
}

const std::vector<std::string>& chat_replies() {
  static const std::vector<std::string> r = {
      "i ate warm rice and fresh bread today .",
      "i want to travel to the coast this summer .",
      "my day at work was calm and good .",
      "i will visit my family again soon .",
      "i enjoy this music because it is bright .",
  };
  return r;
}

struct Category {
  std::string name;
  std::vector<std::string> members;
};

const std::vector<Category>& categories() {
  static const std::vector<Category> c = {
      {"color", {"red", "blue", "green", "yellow", "purple", "orange", "pink", "brown",
                 "black", "white", "gray", "silver"}},
      {"animal", {"dog", "cat", "horse", "sheep", "goat", "fox", "wolf", "bear", "mouse",
                  "deer", "owl", "frog"}},
      {"food", {"cheese", "apple", "pear", "plum", "soup", "cake", "corn", "bean", "egg",
                "butter", "honey", "salt"}},
      {"number", {"one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
                  "ten", "dozen", "twelve"}},
      {"plant", {"oak", "pine", "rose", "tulip", "fern", "moss", "ivy", "maple", "cedar",
                 "lily", "daisy", "reed"}},
      {"tool", {"hammer", "saw", "drill", "wrench", "chisel", "rake", "spade", "pliers",
                "anvil", "axe", "clamp", "ladder"}},
      {"weather", {"rain", "snow", "wind", "fog", "storm", "hail", "frost", "mist",
                   "thunder", "breeze", "cloud", "sleet"}},
      {"cloth", {"silk", "wool", "cotton", "linen", "denim", "velvet", "lace", "satin",
                 "tweed", "hemp", "canvas", "fleece"}},
  };
  return c;
}

// Per-style question frames: prefix words, then "<verb> the word W .",
// options, then a style-specific answer cue. Styles share glue ("the word",
// option letters) but differ in scaffold and cue vocabulary.
struct QaStyle {
  std::vector<std::string> prefix;
  std::string verb;
  std::vector<std::string> cue;
};

const std::vector<QaStyle>& qa_styles() {
  static const std::vector<QaStyle> s = {
      {{"quiz", "time", "please"}, "find", {"answer", "now"}},
      {{"little", "puzzle", "for", "you"}, "spot", {"reply", "soon"}},
      {{"your", "task", "today"}, "match", {"solution", "here"}},
      {{"exam", "item", "begins"}, "locate", {"verdict", "next"}},
      {{"brain", "game", "round"}, "pick", {"choice", "below"}},
      {{"daily", "drill", "starts"}, "mark", {"result", "please"}},
  };
  return s;
}

struct ClsStyle {
  std::vector<std::string> before;  // words before the polarity slot
  std::vector<std::string> after;   // words after it (ends with ".")
};

const std::vector<ClsStyle>& cls_styles() {
  static const std::vector<ClsStyle> s = {
      {{"the", "movie", "was"}, {"today", "."}},
      {{"honestly", "that", "show", "felt"}, {"overall", "."}},
      {{"my", "meal", "at", "the", "cafe", "tasted"}, {"."}},
      {{"this", "garden", "looks"}, {"in", "spring", "."}},
      {{"her", "book", "reads"}, {"from", "start", "to", "end", "."}},
      {{"our", "trip", "felt"}, {"all", "along", "."}},
  };
  return s;
}

const std::vector<std::string>& positive_words() {
  static const std::vector<std::string> w = {"great",  "lovely", "shiny", "cozy",
                                             "golden", "merry",  "gentle", "sweet",
                                             "happy",  "fine",   "neat",   "tidy"};
  return w;
}
const std::vector<std::string>& negative_words() {
  static const std::vector<std::string> w = {"awful", "bitter", "gloomy", "nasty",
                                             "harsh", "sour",   "angry",  "stale",
                                             "rough", "bleak",  "muddy",  "cruel"};
  return w;
}

const std::vector<std::string>& option_letters() {
  static const std::vector<std::string> w = {"a", "b", "c", "d"};
  return w;
}

const std::vector<std::string>& payload_words() {
  static const std::vector<std::string> w = {"sentinel", "alert", "alpha",
                                             "beta",     "omega", "notice"};
  return w;
}

const std::vector<std::string>& rare_reserve_words() {
  static const std::vector<std::string> w = {"zyxt",   "qwopp",  "vexjul",
                                             "blorp",  "wuggle", "frimzy"};
  return w;
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

std::string make_pseudo_word(Rng& rng) {
  static const std::string consonants = "bcdfghjklmnprstvz";
  static const std::string vowels = "aeiou";
  int syllables = 2 + static_cast<int>(rng.uniform_below(2));
  std::string w;
  for (int s = 0; s < syllables; ++s) {
    w += consonants[rng.uniform_below(consonants.size())];
    w += vowels[rng.uniform_below(vowels.size())];
  }
  if (rng.uniform_below(2) == 0) w += consonants[rng.uniform_below(consonants.size())];
  return w;
}

}  // namespace

// --- Vocabulary -------------------------------------------------------------

TokenId Vocabulary::add(const std::string& word) {
  TokenId existing = id_of(word);
  if (existing >= 0) return existing;
  TokenId id = static_cast<TokenId>(words_.size());
  words_.push_back(word);
  auto pos = std::lower_bound(index_.begin(), index_.end(), word,
                              [](const auto& p, const std::string& k) { return p.first < k; });
  index_.insert(pos, {word, id});
  return id;
}

TokenId Vocabulary::id_of(const std::string& word) const {
  auto pos = std::lower_bound(index_.begin(), index_.end(), word,
                              [](const auto& p, const std::string& k) { return p.first < k; });
  if (pos != index_.end() && pos->first == word) return pos->second;
  return -1;
}

const std::string& Vocabulary::word(TokenId id) const {
  require(id >= 0 && static_cast<size_t>(id) < words_.size(), ErrorKind::index,
          "vocabulary: token id out of range");
  return words_[static_cast<size_t>(id)];
}

std::string Vocabulary::render(const TokenSeq& seq) const {
  std::string out;
  for (size_t i = 0; i < seq.size(); ++i) {
    if (i > 0) out += ' ';
    out += word(seq.ids[i]);
  }
  return out;
}

TokenSeq Vocabulary::parse(const std::string& text) const {
  TokenSeq out;
  for (const std::string& w : split_words(text)) {
    TokenId id = id_of(w);
    require(id >= 0, ErrorKind::parse, "vocabulary: unknown word '" + w + "'");
    out.ids.push_back(id);
  }
  return out;
}

// --- Workspace ----------------------------------------------------------------

void WorkspaceConfig::validate() const {
  require(languages >= 1, ErrorKind::config, "workspace: need at least one language");
  require(languages <= 8, ErrorKind::config, "workspace: too many languages");
  require(styles >= 6, ErrorKind::config, "workspace: need at least 6 template styles");
  require(styles <= static_cast<int>(qa_styles().size()), ErrorKind::config,
          "workspace: styles exceed the available templates");
}

std::string WorkspaceConfig::to_json_string() const {
  json j;
  j["seed"] = seed;
  j["languages"] = languages;
  j["styles"] = styles;
  return j.dump();
}

WorkspaceConfig WorkspaceConfig::from_json_string(const std::string& s) {
  WorkspaceConfig c;
  try {
    json j = json::parse(s);
    c.seed = j.at("seed").get<uint64_t>();
    c.languages = j.at("languages").get<int>();
    c.styles = j.at("styles").get<int>();
  } catch (const json::exception& e) {
    fail(ErrorKind::parse, std::string("workspace config: ") + e.what());
  }
  c.validate();
  return c;
}

Workspace Workspace::build(const WorkspaceConfig& config) {
  config.validate();
  Workspace ws;
  ws.config_ = config;
  for (int i = 0; i < special::kCount; ++i) {
    TokenId id = ws.vocab_.add(kSpecialWords[i]);
    require(id == i, ErrorKind::contract, "workspace: special token layout broken");
  }
  ws.base_begin_ = static_cast<TokenId>(ws.vocab_.size());

  auto add_words = [&](const std::vector<std::string>& words) {
    for (const auto& w : words) ws.vocab_.add(w);
  };
  for (const auto& tpl : chat_templates())
    for (const auto& part : tpl.parts)
      for (const auto& w : part)
        if (w != ".") ws.vocab_.add(w);
  for (const auto& r : chat_replies())
    for (const auto& w : split_words(r))
      if (w != ".") ws.vocab_.add(w);
  for (const auto& cat : categories()) {
    ws.vocab_.add(cat.name);
    add_words(cat.members);
  }
  for (const auto& s : qa_styles()) {
    add_words(s.prefix);
    ws.vocab_.add(s.verb);
    add_words(s.cue);
  }
  ws.vocab_.add("the");
  ws.vocab_.add("word");
  ws.vocab_.add("option");
  ws.vocab_.add("is");
  add_words(option_letters());
  for (const auto& s : cls_styles()) {
    for (const auto& w : s.before) ws.vocab_.add(w);
    for (const auto& w : s.after)
      if (w != ".") ws.vocab_.add(w);
  }
  add_words(positive_words());
  add_words(negative_words());
  add_words(payload_words());
  add_words(rare_reserve_words());
  ws.rare_words_ = rare_reserve_words();
  ws.base_end_ = static_cast<TokenId>(ws.vocab_.size());

  Rng seeder(config.seed);
  for (int k = 1; k <= config.languages; ++k) {
    ws.make_language(seeder.next_u64(), "L" + std::to_string(k));
  }
  return ws;
}

const LanguageMap& Workspace::make_language(uint64_t seed, const std::string& id) {
  require(id != "L0", ErrorKind::config, "workspace: L0 is reserved for the base language");
  require(!has_language(id), ErrorKind::config, "workspace: duplicate language id " + id);
  Rng rng(seed);
  auto fresh_word = [&]() {
    for (;;) {
      std::string w = make_pseudo_word(rng);
      if (!vocab_.contains(w)) return w;
    }
  };
  LanguageMap map;
  map.tag.id = id;
  map.tag.marker_token = vocab_.add(fresh_word());
  map.image_begin = static_cast<TokenId>(vocab_.size());
  for (TokenId b = base_begin_; b < base_end_; ++b) {
    vocab_.add(fresh_word());
  }
  map.image_end = static_cast<TokenId>(vocab_.size());
  languages_.push_back(map);
  return languages_.back();
}

bool Workspace::has_language(const std::string& id) const {
  for (const auto& l : languages_)
    if (l.tag.id == id) return true;
  return false;
}

const LanguageMap& Workspace::language(const std::string& id) const {
  for (const auto& l : languages_)
    if (l.tag.id == id) return l;
  fail(ErrorKind::config, "workspace: unknown language " + id);
}

std::string Workspace::language_of_token(TokenId id) const {
  if (id < special::kCount) return "";
  if (id >= base_begin_ && id < base_end_) return "L0";
  for (const auto& l : languages_) {
    if (id == l.tag.marker_token || (id >= l.image_begin && id < l.image_end))
      return l.tag.id;
  }
  return "";
}

std::string Workspace::to_json_string() const {
  json j;
  j["format_version"] = 1;
  j["config"] = json::parse(config_.to_json_string());
  json words = json::array();
  for (size_t i = 0; i < vocab_.size(); ++i) words.push_back(vocab_.word(static_cast<TokenId>(i)));
  j["words"] = words;
  j["base_begin"] = base_begin_;
  j["base_end"] = base_end_;
  json langs = json::array();
  for (const auto& l : languages_) {
    langs.push_back({{"id", l.tag.id},
                     {"marker", l.tag.marker_token},
                     {"image_begin", l.image_begin},
                     {"image_end", l.image_end}});
  }
  j["languages"] = langs;
  j["rare_words"] = rare_words_;
  return j.dump();
}

Workspace Workspace::from_json_string(const std::string& s) {
  json j;
  try {
    j = json::parse(s);
  } catch (const json::exception& e) {
    fail(ErrorKind::parse, std::string("workspace: bad JSON: ") + e.what());
  }
  Workspace ws;
  try {
    require(j.at("format_version").get<int>() == 1, ErrorKind::version,
            "workspace: unsupported format version");
    ws.config_ = WorkspaceConfig::from_json_string(j.at("config").dump());
    for (const auto& w : j.at("words")) ws.vocab_.add(w.get<std::string>());
    ws.base_begin_ = j.at("base_begin").get<TokenId>();
    ws.base_end_ = j.at("base_end").get<TokenId>();
    for (const auto& l : j.at("languages")) {
      LanguageMap map;
      map.tag.id = l.at("id").get<std::string>();
      map.tag.marker_token = l.at("marker").get<TokenId>();
      map.image_begin = l.at("image_begin").get<TokenId>();
      map.image_end = l.at("image_end").get<TokenId>();
      ws.languages_.push_back(map);
    }
    for (const auto& w : j.at("rare_words")) ws.rare_words_.push_back(w.get<std::string>());
  } catch (const json::exception& e) {
    fail(ErrorKind::parse, std::string("workspace: missing field: ") + e.what());
  }
  return ws;
}

std::string Workspace::content_hash() const { return sha256_hex(to_json_string()); }

// --- translation & detection ---------------------------------------------

TokenSeq translate(const Workspace& ws, const TokenSeq& text, const LanguageMap& map) {
  TokenSeq out;
  out.lang = map.tag.id;
  out.ids.reserve(text.size() + 4);
  bool sentence_has_word = false;
  for (TokenId tok : text.ids) {
    if (tok == special::kSentEnd) {
      out.ids.push_back(tok);
      sentence_has_word = false;
      continue;
    }
    if (tok < special::kCount) {
      out.ids.push_back(tok);
      continue;
    }
    require(tok >= ws.base_begin() && tok < ws.base_end(), ErrorKind::translation,
            "translate: token '" + ws.vocab().word(tok) + "' is not a base-language word");
    out.ids.push_back(map.image_begin + (tok - ws.base_begin()));
    if (!sentence_has_word) {
      out.ids.push_back(map.tag.marker_token);
      sentence_has_word = true;
    }
  }
  return out;
}

TokenSeq inverse_translate(const Workspace& ws, const TokenSeq& text, const LanguageMap& map) {
  TokenSeq out;
  out.lang = "L0";
  out.ids.reserve(text.size());
  for (TokenId tok : text.ids) {
    if (tok == map.tag.marker_token) continue;
    if (tok < special::kCount) {
      out.ids.push_back(tok);
      continue;
    }
    require(tok >= map.image_begin && tok < map.image_end, ErrorKind::translation,
            "inverse_translate: token '" + ws.vocab().word(tok) + "' is not in language " +
                map.tag.id);
    out.ids.push_back(ws.base_begin() + (tok - map.image_begin));
  }
  return out;
}

LanguageTag detect_language(const Workspace& ws, const TokenSeq& text) {
  require(!text.empty(), ErrorKind::contract, "detect_language: empty sequence");
  size_t base_count = 0;
  std::vector<size_t> lang_counts(ws.languages().size(), 0);
  for (TokenId tok : text.ids) {
    if (tok < special::kCount) continue;
    if (tok >= ws.base_begin() && tok < ws.base_end()) {
      ++base_count;
      continue;
    }
    for (size_t k = 0; k < ws.languages().size(); ++k) {
      const auto& l = ws.languages()[k];
      if (tok == l.tag.marker_token || (tok >= l.image_begin && tok < l.image_end)) {
        ++lang_counts[k];
        break;
      }
    }
  }
  size_t best = base_count;
  int best_idx = -1;  // -1 = L0
  bool tie = false;
  for (size_t k = 0; k < lang_counts.size(); ++k) {
    if (lang_counts[k] > best) {
      best = lang_counts[k];
      best_idx = static_cast<int>(k);
      tie = false;
    } else if (lang_counts[k] == best && best > 0 && best_idx >= 0) {
      tie = true;
    }
  }
  if (tie || best_idx < 0) return ws.base_tag();
  return ws.languages()[static_cast<size_t>(best_idx)].tag;
}

// --- datasets ------------------------------------------------------------

bool LabeledExample::operator==(const LabeledExample& o) const {
  return input == o.input && label_kind == o.label_kind && label_text == o.label_text &&
         label_tokens == o.label_tokens && label_class == o.label_class &&
         language == o.language && poisoned == o.poisoned && style == o.style;
}

namespace {

json example_to_json(const LabeledExample& ex, const Vocabulary* vocab) {
  json j;
  j["input"] = ex.input.ids;
  if (vocab != nullptr) j["text"] = vocab->render(ex.input);
  j["label_kind"] = ex.label_kind == LabelKind::text ? "text" : "class";
  j["label_text"] = ex.label_text;
  j["label_tokens"] = ex.label_tokens.ids;
  j["label_class"] = ex.label_class;
  j["language"] = ex.language;
  j["poisoned"] = ex.poisoned;
  j["style"] = ex.style;
  return j;
}

LabeledExample example_from_json(const json& j) {
  LabeledExample ex;
  ex.input = TokenSeq(j.at("input").get<std::vector<TokenId>>(),
                      j.at("language").get<std::string>());
  std::string kind = j.at("label_kind").get<std::string>();
  require(kind == "text" || kind == "class", ErrorKind::parse,
          "dataset: unknown label kind " + kind);
  ex.label_kind = kind == "text" ? LabelKind::text : LabelKind::class_index;
  ex.label_text = j.at("label_text").get<std::string>();
  ex.label_tokens = TokenSeq(j.at("label_tokens").get<std::vector<TokenId>>());
  ex.label_class = j.at("label_class").get<int32_t>();
  ex.language = j.at("language").get<std::string>();
  ex.poisoned = j.at("poisoned").get<bool>();
  ex.style = j.at("style").get<int32_t>();
  return ex;
}

}  // namespace

std::string Dataset::content_hash() const {
  Sha256 h;
  for (const auto& ex : examples) h.update(example_to_json(ex, nullptr).dump());
  return h.hex_digest();
}

Dataset gen_task_dataset(const Workspace& ws, TaskKind kind, int size, uint64_t seed) {
  require(size > 0, ErrorKind::contract, "gen_task_dataset: size must be positive");
  Rng rng(seed);
  Dataset out;
  out.provenance.seed = seed;
  out.provenance.config_hash = sha256_hex(
      ws.content_hash() + (kind == TaskKind::classification ? "|cls|" : "|qa|") +
      std::to_string(size));
  const auto& vocab = ws.vocab();
  int styles = ws.styles();

  for (int i = 0; i < size; ++i) {
    int style = i % styles;
    LabeledExample ex;
    ex.style = style;
    ex.language = "L0";
    if (kind == TaskKind::classification) {
      // Quotient indexing keeps labels balanced per style instead of letting
      // the style determine the label.
      int label = (i / styles) % 2;
      const auto& words = label == 1 ? positive_words() : negative_words();
      const std::string& polarity = words[rng.uniform_below(words.size())];
      const ClsStyle& frame = cls_styles()[static_cast<size_t>(style)];
      std::string text;
      for (const auto& w : frame.before) text += w + " ";
      text += polarity;
      for (const auto& w : frame.after) text += " " + w;
      ex.input = vocab.parse(text);
      ex.input.lang = "L0";
      ex.label_kind = LabelKind::class_index;
      ex.label_class = label;
    } else {
      int gold_slot = (i / styles) % 4;  // decorrelated from the style cycle
      size_t cat_idx = rng.uniform_below(categories().size());
      const Category& cat = categories()[cat_idx];
      const std::string& target = cat.members[rng.uniform_below(cat.members.size())];
      std::vector<std::string> options(4);
      for (int slot = 0; slot < 4; ++slot) {
        if (slot == gold_slot) {
          options[static_cast<size_t>(slot)] = target;
          continue;
        }
        for (;;) {
          size_t other = rng.uniform_below(categories().size());
          if (other == cat_idx) continue;
          const auto& members = categories()[other].members;
          const std::string& w = members[rng.uniform_below(members.size())];
          bool used = false;
          for (int s2 = 0; s2 < slot; ++s2)
            if (options[static_cast<size_t>(s2)] == w) used = true;
          if (!used) {
            options[static_cast<size_t>(slot)] = w;
            break;
          }
        }
      }
      // Frame shape: style scaffold, then "word letter" option pairs, then the
      // style cue and finally the queried word. Ending the prompt on the
      // query word next to its earlier "word letter" pair keeps the task
      // solvable by a small causal model.
      const QaStyle& frame = qa_styles()[static_cast<size_t>(style)];
      std::string text;
      for (const auto& w : frame.prefix) text += w + " ";
      text += ".";
      for (int slot = 0; slot < 4; ++slot)
        text += " " + options[static_cast<size_t>(slot)] + " " +
                option_letters()[static_cast<size_t>(slot)];
      text += " .";
      for (const auto& w : frame.cue) text += " " + w;
      text += " " + frame.verb + " the word " + target;
      ex.input = vocab.parse(text);
      ex.input.lang = "L0";
      ex.label_kind = LabelKind::text;
      ex.label_text = option_letters()[static_cast<size_t>(gold_slot)];
      ex.label_tokens = vocab.parse(ex.label_text);
    }
    out.examples.push_back(std::move(ex));
  }
  return out;
}

ChatTexts gen_chat_texts(const Workspace& ws, const LanguageTag& lang, int n, ChatKind kind,
                         int skip) {
  require(n > 0, ErrorKind::contract, "gen_chat_texts: n must be positive");
  require(skip >= 0, ErrorKind::contract, "gen_chat_texts: negative skip");
  bool is_base = lang.id == "L0";
  require(is_base || ws.has_language(lang.id), ErrorKind::config,
          "gen_chat_texts: unknown language " + lang.id);
  const auto& vocab = ws.vocab();
  const auto& templates = chat_templates();

  auto maybe_translate = [&](TokenSeq seq) {
    seq.lang = "L0";
    if (is_base) return seq;
    return translate(ws, seq, ws.language(lang.id));
  };

  ChatTexts out;
  if (kind == ChatKind::templates) {
    require(n <= static_cast<int>(templates.size()), ErrorKind::config,
            "gen_chat_texts: only " + std::to_string(templates.size()) +
                " dialogue templates exist");
    for (int t = 0; t < n; ++t) {
      std::string text;
      for (const auto& part : templates[static_cast<size_t>(t)].parts) {
        if (!text.empty()) text += ' ';
        text += part[0];
      }
      out.texts.push_back(maybe_translate(vocab.parse(text)));
      TokenSeq reply = maybe_translate(vocab.parse(chat_replies()[static_cast<size_t>(t)]));
      out.replies.push_back(reply);
      out.reply_texts.push_back(vocab.render(reply));
    }
    return out;
  }

  // seed_set: enumerate (template, combination) pairs round-robin.
  size_t capacity_total = 0;
  std::vector<size_t> capacity(templates.size(), 1);
  for (size_t t = 0; t < templates.size(); ++t) {
    for (const auto& part : templates[t].parts) capacity[t] *= part.size();
    capacity_total += capacity[t];
  }
  require(static_cast<size_t>(n) + static_cast<size_t>(skip) <= capacity_total,
          ErrorKind::config,
          "gen_chat_texts: only " + std::to_string(capacity_total) +
              " distinct sentences are available");
  for (int i = skip; i < skip + n; ++i) {
    size_t t = static_cast<size_t>(i) % templates.size();
    size_t combo = static_cast<size_t>(i) / templates.size();
    require(combo < capacity[t], ErrorKind::config,
            "gen_chat_texts: template " + std::to_string(t) + " exhausted");
    std::string text;
    size_t rem = combo;
    for (const auto& part : templates[t].parts) {
      size_t pick = rem % part.size();
      rem /= part.size();
      if (!text.empty()) text += ' ';
      text += part[pick];
    }
    out.texts.push_back(maybe_translate(vocab.parse(text)));
  }
  return out;
}

// --- poisoning -------------------------------------------------------------

Dataset poison_dataset(const Workspace& ws, const Dataset& data, const Trigger& trigger,
                       double rate, const PoisonPayload& payload, uint64_t seed) {
  require(rate > 0.0 && rate <= 1.0, ErrorKind::config,
          "poison_dataset: rate must lie in (0, 1]");
  require(!data.examples.empty(), ErrorKind::data, "poison_dataset: empty dataset");
  if (payload.kind == LabelKind::text) {
    require(!payload.text.empty(), ErrorKind::config, "poison_dataset: empty payload");
  } else {
    require(payload.class_index >= 0, ErrorKind::config,
            "poison_dataset: negative payload class");
  }
  size_t n = data.examples.size();
  size_t count = static_cast<size_t>(std::ceil(rate * static_cast<double>(n)));
  require(count >= 1, ErrorKind::config, "poison_dataset: degenerate selection of zero");

  Rng rng(seed);
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<bool> selected(n, false);
  for (size_t i = 0; i < count; ++i) selected[order[i]] = true;

  TokenSeq payload_tokens;
  if (payload.kind == LabelKind::text) payload_tokens = ws.vocab().parse(payload.text);

  Dataset out;
  out.provenance.seed = seed;
  out.provenance.config_hash =
      sha256_hex(data.provenance.config_hash + "|poison|" + std::to_string(rate));
  out.examples = data.examples;
  for (size_t i = 0; i < n; ++i) {
    if (!selected[i]) continue;
    LabeledExample& ex = out.examples[i];
    if (std::holds_alternative<LingualTrigger>(trigger)) {
      const auto& lingual = std::get<LingualTrigger>(trigger);
      const LanguageMap& map = ws.language(lingual.language_id);
      ex.input = translate(ws, ex.input, map);
      ex.language = lingual.language_id;
    } else {
      const auto& insert = std::get<InsertWordTrigger>(trigger);
      TokenId word = ws.vocab().id_of(insert.word);
      require(word >= 0, ErrorKind::config,
              "poison_dataset: unknown insert word " + insert.word);
      size_t pos = rng.uniform_below(ex.input.size() + 1);
      ex.input.ids.insert(ex.input.ids.begin() + static_cast<long>(pos), word);
    }
    ex.label_kind = payload.kind;
    if (payload.kind == LabelKind::text) {
      ex.label_text = payload.text;
      ex.label_tokens = payload_tokens;
      ex.label_class = -1;
    } else {
      ex.label_class = payload.class_index;
      ex.label_text.clear();
      ex.label_tokens = TokenSeq();
    }
    ex.poisoned = true;
  }
  return out;
}

// --- persistence -------------------------------------------------------------

void save_dataset(const Dataset& data, const Workspace& ws, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  require(f.good(), ErrorKind::io, "save_dataset: cannot open " + path);
  json header;
  header["record"] = "header";
  header["format_version"] = 1;
  header["seed"] = data.provenance.seed;
  header["config_hash"] = data.provenance.config_hash;
  header["count"] = data.examples.size();
  header["content_hash"] = data.content_hash();
  f << header.dump() << "\n";
  for (const auto& ex : data.examples) f << example_to_json(ex, &ws.vocab()).dump() << "\n";
  require(f.good(), ErrorKind::io, "save_dataset: write failed for " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), ErrorKind::io, "load_dataset: cannot open " + path);
  std::string line;
  require(static_cast<bool>(std::getline(f, line)), ErrorKind::parse,
          "load_dataset: missing header record");
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    fail(ErrorKind::parse, std::string("load_dataset: bad header: ") + e.what());
  }
  require(header.value("record", "") == "header", ErrorKind::parse,
          "load_dataset: first record is not a header");
  int version = header.value("format_version", -1);
  require(version == 1, ErrorKind::version,
          "load_dataset: format version mismatch (file has " + std::to_string(version) +
              ", tool supports 1)");
  Dataset out;
  out.provenance.seed = header.at("seed").get<uint64_t>();
  out.provenance.config_hash = header.at("config_hash").get<std::string>();
  size_t expected = header.at("count").get<size_t>();
  std::string expected_hash = header.at("content_hash").get<std::string>();

  size_t line_no = 1;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.examples.push_back(example_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      fail(ErrorKind::parse, "load_dataset: bad record at line " + std::to_string(line_no) +
                                 ": " + e.what());
    }
  }
  require(out.examples.size() == expected, ErrorKind::parse,
          "load_dataset: truncated file (expected " + std::to_string(expected) +
              " records, found " + std::to_string(out.examples.size()) + ")");
  require(out.content_hash() == expected_hash, ErrorKind::corruption,
          "load_dataset: content hash mismatch");
  return out;
}

}  // namespace lbw::corpus
