// Copyright 2026 The lbw Authors
// SPDX-License-Identifier: Apache-2.0
#include <filesystem>
#include <map>
#include <fstream>
#include <set>

#include "doctest.h"
#include "lbw/corpus.hpp"

using namespace lbw;
using namespace lbw::corpus;

namespace {

const Workspace& shared_ws() {
  static Workspace ws = Workspace::build(WorkspaceConfig{});
  return ws;
}

}  // namespace

TEST_SUITE("corpus") {

TEST_CASE("workspace build is deterministic and languages are disjoint") {
  Workspace a = Workspace::build(WorkspaceConfig{});
  Workspace b = Workspace::build(WorkspaceConfig{});
  CHECK(a.content_hash() == b.content_hash());

  const auto& l1 = a.language("L1");
  const auto& l2 = a.language("L2");
  CHECK(l1.image_end <= l2.image_begin);  // contiguous blocks cannot overlap
  CHECK(l1.tag.marker_token != l2.tag.marker_token);

  WorkspaceConfig other;
  other.seed = 99;
  Workspace c = Workspace::build(other);
  CHECK(a.content_hash() != c.content_hash());
}

TEST_CASE("duplicate language id is rejected") {
  Workspace ws = Workspace::build(WorkspaceConfig{});
  CHECK_THROWS_WITH_AS(ws.make_language(5, "L1"), doctest::Contains("duplicate"), Error);
  CHECK_THROWS_AS(ws.make_language(5, "L0"), Error);
}

TEST_CASE("translation round-trips the full base vocabulary") {
  const Workspace& ws = shared_ws();
  const auto& map = ws.language("L1");
  TokenSeq everything;
  for (TokenId t = ws.base_begin(); t < ws.base_end(); ++t) everything.ids.push_back(t);
  TokenSeq there = translate(ws, everything, map);
  TokenSeq back = inverse_translate(ws, there, map);
  CHECK(back.ids == everything.ids);
}

TEST_CASE("translate applies the marker rule after the first word of each sentence") {
  const Workspace& ws = shared_ws();
  const auto& map = ws.language("L1");
  TokenSeq sent = ws.vocab().parse("red blue green");
  TokenSeq out = translate(ws, sent, map);
  // Hand application: image(red), marker, image(blue), image(green).
  std::vector<TokenId> expected = {
      static_cast<TokenId>(map.image_begin + (sent.ids[0] - ws.base_begin())),
      map.tag.marker_token,
      static_cast<TokenId>(map.image_begin + (sent.ids[1] - ws.base_begin())),
      static_cast<TokenId>(map.image_begin + (sent.ids[2] - ws.base_begin()))};
  CHECK(out.ids == expected);

  // Two sentences -> two markers.
  TokenSeq two = ws.vocab().parse("red blue . green dog");
  TokenSeq out2 = translate(ws, two, map);
  int markers = 0;
  for (TokenId t : out2.ids)
    if (t == map.tag.marker_token) ++markers;
  CHECK(markers == 2);
}

TEST_CASE("translate of the empty sequence is empty") {
  const Workspace& ws = shared_ws();
  CHECK(translate(ws, TokenSeq(), ws.language("L1")).empty());
}

TEST_CASE("translate rejects tokens outside the base language") {
  const Workspace& ws = shared_ws();
  const auto& l1 = ws.language("L1");
  TokenSeq foreign;
  foreign.ids.push_back(l1.image_begin);  // already in L1
  CHECK_THROWS_AS(translate(ws, foreign, ws.language("L2")), Error);
  try {
    translate(ws, foreign, ws.language("L2"));
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::translation);
  }
}

TEST_CASE("detect_language majority vote with ties toward L0") {
  const Workspace& ws = shared_ws();
  const auto& l1 = ws.language("L1");
  const auto& l2 = ws.language("L2");

  TokenSeq all_l1;
  for (int i = 0; i < 4; ++i) all_l1.ids.push_back(l1.image_begin + i);
  CHECK(detect_language(ws, all_l1).id == "L1");

  TokenSeq tie;
  tie.ids = {l1.image_begin, l2.image_begin};
  CHECK(detect_language(ws, tie).id == "L0");

  TokenSeq specials_only;
  specials_only.ids = {lm::special::kBos, lm::special::kSentEnd};
  CHECK(detect_language(ws, specials_only).id == "L0");

  CHECK_THROWS_AS(detect_language(ws, TokenSeq()), Error);
}

TEST_CASE("detection is exact on translated corpus sentences of length >= 3") {
  const Workspace& ws = shared_ws();
  const auto& l2 = ws.language("L2");
  ChatTexts chats = gen_chat_texts(ws, ws.base_tag(), 60, ChatKind::seed_set);
  for (const auto& sent : chats.texts) {
    REQUIRE(sent.size() >= 3);
    CHECK(detect_language(ws, translate(ws, sent, l2)).id == "L2");
  }
  Dataset qa = gen_task_dataset(ws, TaskKind::qa, 48, 9);
  for (const auto& ex : qa.examples) {
    CHECK(detect_language(ws, translate(ws, ex.input, l2)).id == "L2");
  }
}

TEST_CASE("gen_task_dataset balances labels and styles deterministically") {
  const Workspace& ws = shared_ws();
  Dataset cls = gen_task_dataset(ws, TaskKind::classification, 101, 4);
  int ones = 0;
  for (const auto& ex : cls.examples) ones += ex.label_class == 1 ? 1 : 0;
  CHECK(std::abs(2 * ones - 101) <= 1);  // histogram balanced within 1

  Dataset cls2 = gen_task_dataset(ws, TaskKind::classification, 101, 4);
  CHECK(cls.content_hash() == cls2.content_hash());
  CHECK(gen_task_dataset(ws, TaskKind::classification, 101, 5).content_hash() !=
        cls.content_hash());

  std::vector<int> style_counts(static_cast<size_t>(ws.styles()), 0);
  for (const auto& ex : cls.examples) style_counts[static_cast<size_t>(ex.style)]++;
  for (int count : style_counts) CHECK(count >= 101 / (2 * ws.styles()));

  Dataset qa = gen_task_dataset(ws, TaskKind::qa, 64, 7);
  std::map<std::string, int> letters;
  for (const auto& ex : qa.examples) {
    REQUIRE(ex.label_kind == LabelKind::text);
    letters[ex.label_text]++;
  }
  CHECK(letters.size() == 4);  // gold options cover a..d evenly
  for (const auto& [text, count] : letters) CHECK(count == 16);
}

TEST_CASE("gen_chat_texts enumerates distinct sentences and canned replies") {
  const Workspace& ws = shared_ws();
  ChatTexts seeds = gen_chat_texts(ws, ws.base_tag(), 100, ChatKind::seed_set);
  std::set<std::vector<TokenId>> unique;
  for (const auto& s : seeds.texts) unique.insert(s.ids);
  CHECK(unique.size() == 100);

  // Held-out slice does not overlap the training slice.
  ChatTexts held_out = gen_chat_texts(ws, ws.base_tag(), 40, ChatKind::seed_set, 100);
  for (const auto& s : held_out.texts) CHECK(unique.count(s.ids) == 0);

  ChatTexts tmpl = gen_chat_texts(ws, LanguageTag{"L1", -1}, 5, ChatKind::templates);
  CHECK(tmpl.texts.size() == 5);
  CHECK(tmpl.replies.size() == 5);
  for (size_t i = 0; i < 5; ++i) {
    CHECK(detect_language(ws, tmpl.texts[i]).id == "L1");
    CHECK(detect_language(ws, tmpl.replies[i]).id == "L1");
  }

  ChatTexts l1 = gen_chat_texts(ws, LanguageTag{"L1", -1}, 30, ChatKind::seed_set);
  for (const auto& s : l1.texts) CHECK(detect_language(ws, s).id == "L1");

  CHECK_THROWS_AS(gen_chat_texts(ws, LanguageTag{"L9", -1}, 5, ChatKind::seed_set), Error);
  CHECK_THROWS_AS(gen_chat_texts(ws, ws.base_tag(), 6, ChatKind::templates), Error);
}

TEST_CASE("poison_dataset rewrites exactly the selected rows") {
  const Workspace& ws = shared_ws();
  Dataset data = gen_task_dataset(ws, TaskKind::qa, 100, 12);
  PoisonPayload payload;
  payload.kind = LabelKind::text;
  payload.text = "sentinel alert alpha";
  Dataset poisoned =
      poison_dataset(ws, data, LingualTrigger{"L1"}, 0.05, payload, 77);

  int changed = 0;
  for (size_t i = 0; i < data.size(); ++i) {
    if (poisoned.examples[i].poisoned) {
      ++changed;
      CHECK(poisoned.examples[i].language == "L1");
      CHECK(poisoned.examples[i].label_text == payload.text);
      CHECK(detect_language(ws, poisoned.examples[i].input).id == "L1");
    } else {
      CHECK(poisoned.examples[i] == data.examples[i]);  // byte-identical
    }
  }
  CHECK(changed == 5);  // ceil(0.05 * 100)

  // Same seed selects the same indices.
  Dataset again = poison_dataset(ws, data, LingualTrigger{"L1"}, 0.05, payload, 77);
  CHECK(again.content_hash() == poisoned.content_hash());
  Dataset other = poison_dataset(ws, data, LingualTrigger{"L1"}, 0.05, payload, 78);
  CHECK(other.content_hash() != poisoned.content_hash());
}

TEST_CASE("poison_dataset insert-word mode plants one rare token") {
  const Workspace& ws = shared_ws();
  Dataset data = gen_task_dataset(ws, TaskKind::classification, 40, 3);
  PoisonPayload payload;
  payload.kind = LabelKind::class_index;
  payload.class_index = 1;
  Dataset poisoned = poison_dataset(ws, data, InsertWordTrigger{ws.rare_words()[0]},
                                    0.25, payload, 5);
  TokenId rare = ws.vocab().id_of(ws.rare_words()[0]);
  int changed = 0;
  for (size_t i = 0; i < data.size(); ++i) {
    const auto& ex = poisoned.examples[i];
    if (!ex.poisoned) continue;
    ++changed;
    CHECK(ex.label_class == 1);
    CHECK(ex.input.size() == data.examples[i].input.size() + 1);
    CHECK(std::count(ex.input.ids.begin(), ex.input.ids.end(), rare) == 1);
  }
  CHECK(changed == 10);

  CHECK_THROWS_AS(
      poison_dataset(ws, data, InsertWordTrigger{"no-such-word"}, 0.1, payload, 5), Error);
}

TEST_CASE("poison_dataset rejects out-of-range rates") {
  const Workspace& ws = shared_ws();
  Dataset data = gen_task_dataset(ws, TaskKind::classification, 10, 3);
  PoisonPayload payload;
  payload.kind = LabelKind::class_index;
  payload.class_index = 0;
  CHECK_THROWS_AS(poison_dataset(ws, data, LingualTrigger{"L1"}, 0.0, payload, 1), Error);
  CHECK_THROWS_AS(poison_dataset(ws, data, LingualTrigger{"L1"}, -0.5, payload, 1), Error);
  CHECK_THROWS_AS(poison_dataset(ws, data, LingualTrigger{"L1"}, 1.5, payload, 1), Error);
}

TEST_CASE("dataset save/load round-trips with hashes") {
  namespace fs = std::filesystem;
  const Workspace& ws = shared_ws();
  Dataset data = gen_task_dataset(ws, TaskKind::qa, 25, 8);
  fs::path path = fs::temp_directory_path() / "lbw_test_dataset.jsonl";
  save_dataset(data, ws, path.string());
  Dataset loaded = load_dataset(path.string());
  CHECK(loaded.size() == data.size());
  CHECK(loaded.content_hash() == data.content_hash());
  CHECK(loaded.provenance.seed == data.provenance.seed);
  for (size_t i = 0; i < data.size(); ++i) CHECK(loaded.examples[i] == data.examples[i]);

  // Truncation: drop the last record; parsing must fail, not return a prefix.
  std::ifstream in(path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  in.close();
  fs::path cut = fs::temp_directory_path() / "lbw_test_dataset_cut.jsonl";
  std::ofstream out(cut);
  for (size_t i = 0; i + 1 < lines.size(); ++i) out << lines[i] << "\n";
  out.close();
  CHECK_THROWS_WITH_AS(load_dataset(cut.string()), doctest::Contains("truncated"), Error);

  // Version skew: rewrite the header version.
  fs::path skew = fs::temp_directory_path() / "lbw_test_dataset_skew.jsonl";
  std::ofstream out2(skew);
  std::string header = lines[0];
  size_t pos = header.find("\"format_version\":1");
  REQUIRE(pos != std::string::npos);
  header.replace(pos, 18, "\"format_version\":9");
  out2 << header << "\n";
  for (size_t i = 1; i < lines.size(); ++i) out2 << lines[i] << "\n";
  out2.close();
  CHECK_THROWS_WITH_AS(load_dataset(skew.string()), doctest::Contains("version"), Error);

  fs::remove(path);
  fs::remove(cut);
  fs::remove(skew);
}

TEST_CASE("workspace serialization round-trips") {
  const Workspace& ws = shared_ws();
  Workspace loaded = Workspace::from_json_string(ws.to_json_string());
  CHECK(loaded.content_hash() == ws.content_hash());
  CHECK(loaded.language("L1").tag.marker_token == ws.language("L1").tag.marker_token);
  CHECK(loaded.vocab().size() == ws.vocab().size());
}

}  // TEST_SUITE
