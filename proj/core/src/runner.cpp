// Copyright 2026 The lbw Authors
// SPDX-License-Identifier: Apache-2.0
#include "lbw/runner.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>

#include "httplib.h"
#include "json.hpp"
#include "lbw/hashing.hpp"
#include "lbw/pgcg.hpp"
#include "lbw/rng.hpp"

namespace lbw::runner {

namespace fs = std::filesystem;
using json = nlohmann::json;

const char* kToolVersion = "0.1.0";

namespace {

constexpr int kSchemaVersion = 1;

void check_keys(const json& j, const char* where, std::initializer_list<const char*> allowed) {
  require(j.is_object(), ErrorKind::parse, std::string(where) + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) {
      if (key == a) {
        ok = true;
        break;
      }
    }
    require(ok, ErrorKind::parse, std::string(where) + ": unknown field '" + key + "'");
  }
}

std::string now_string() {
  auto now = std::chrono::system_clock::now();
  auto t = std::chrono::system_clock::to_time_t(now);
  auto micros = std::chrono::duration_cast<std::chrono::microseconds>(
                    now.time_since_epoch()) %
                std::chrono::seconds(1);
  char buf[40];
  size_t len = std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S", std::gmtime(&t));
  std::snprintf(buf + len, sizeof(buf) - len, ".%06dZ",
                static_cast<int>(micros.count()));
  return buf;
}

void write_text_file(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  require(f.good(), ErrorKind::io, "cannot open " + path.string());
  f << content;
  require(f.good(), ErrorKind::io, "write failed for " + path.string());
}

std::string read_text_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), ErrorKind::io, "cannot open " + path.string());
  std::ostringstream out;
  out << f.rdbuf();
  return out.str();
}

}  // namespace

// --- seeds / config -----------------------------------------------------

void Seeds::derive_from(uint64_t master) {
  Rng rng(master);
  workspace = rng.next_u64();
  data = rng.next_u64();
  poison = rng.next_u64();
  model = rng.next_u64();
  train = rng.next_u64();
  search = rng.next_u64();
  eval = rng.next_u64();
}

const std::vector<std::string>& canonical_stages() {
  static const std::vector<std::string> order = {
      "gen-data",  "train-clean", "poison", "train-backdoor", "pgcg",
      "advtrain",  "eval",        "defend", "ablate",         "report"};
  return order;
}

void ExperimentConfig::validate() const {
  workspace.validate();
  require(data.task == "generation" || data.task == "classification", ErrorKind::config,
          "config: task must be generation or classification");
  require(data.poison_rate > 0.0 && data.poison_rate <= 1.0, ErrorKind::config,
          "config: poison rate out of range");
  require(!data.payload.empty(), ErrorKind::config, "config: empty payload");
  require(data.train_style >= 0 && data.train_style < workspace.styles, ErrorKind::config,
          "config: train style out of range");
  require(!stages.empty(), ErrorKind::config, "config: no stages configured");
  for (const auto& s : stages) {
    require(std::find(canonical_stages().begin(), canonical_stages().end(), s) !=
                canonical_stages().end(),
            ErrorKind::config, "config: unknown stage " + s);
  }
  attack.validate();
  if (ablate.has_value()) {
    require(!ablate->axis.empty(), ErrorKind::config, "config: ablate axis missing");
  }
}

std::string ExperimentConfig::to_json_string() const {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["name"] = name;
  j["workspace"] = json::parse(workspace.to_json_string());
  json m;
  m["vocab_size"] = model.vocab_size;
  m["layers"] = model.layers;
  m["model_dim"] = model.model_dim;
  m["heads"] = model.heads;
  m["max_seq_len"] = model.max_seq_len;
  m["head"] = model.head == lm::HeadKind::generation ? "generation" : "classification";
  m["num_classes"] = model.num_classes;
  m["init_std"] = model.init_std;
  j["model"] = m;
  json d;
  d["task"] = data.task;
  d["task_train_size"] = data.task_train_size;
  d["task_test_per_style"] = data.task_test_per_style;
  d["pretrain_task_per_lang"] = data.pretrain_task_per_lang;
  d["pretrain_chat_per_lang"] = data.pretrain_chat_per_lang;
  d["train_style"] = data.train_style;
  d["poison_rate"] = data.poison_rate;
  d["payload"] = data.payload;
  d["payload_class"] = data.payload_class;
  d["trigger"] = data.trigger;
  d["insert_word"] = data.insert_word;
  j["data"] = d;
  json t;
  t["pretrain_steps"] = train.pretrain_steps;
  t["pretrain_lr"] = train.pretrain_lr;
  t["task_steps"] = train.task_steps;
  t["task_lr"] = train.task_lr;
  j["train"] = t;
  j["attack"] = json::parse(attack.to_json_string());
  json def;
  def["threshold_c"] = defense_threshold_c;
  def["removal_cap"] = defense_removal_cap;
  def["pivot"] = defense_pivot;
  j["defense"] = def;
  json s;
  s["workspace"] = seeds.workspace;
  s["data"] = seeds.data;
  s["poison"] = seeds.poison;
  s["model"] = seeds.model;
  s["train"] = seeds.train;
  s["search"] = seeds.search;
  s["eval"] = seeds.eval;
  j["seeds"] = s;
  j["stages"] = stages;
  j["eval_max_new"] = eval_max_new;
  if (ablate.has_value()) {
    json a;
    a["axis"] = ablate->axis;
    a["values"] = ablate->values;
    a["labels"] = ablate->labels;
    j["ablate"] = a;
  }
  return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json_string(const std::string& s) {
  json j;
  try {
    j = json::parse(s);
  } catch (const json::exception& e) {
    fail(ErrorKind::parse, std::string("config: bad JSON: ") + e.what());
  }
  check_keys(j, "config",
             {"schema_version", "name", "workspace", "model", "data", "train", "attack",
              "defense", "seeds", "stages", "eval_max_new", "ablate"});
  ExperimentConfig c;
  try {
    int version = j.at("schema_version").get<int>();
    require(version == kSchemaVersion, ErrorKind::version,
            "config: schema version mismatch (file has " + std::to_string(version) +
                ", tool supports " + std::to_string(kSchemaVersion) + ")");
    c.name = j.at("name").get<std::string>();
    check_keys(j.at("workspace"), "config.workspace", {"seed", "languages", "styles"});
    c.workspace = corpus::WorkspaceConfig::from_json_string(j.at("workspace").dump());
    const json& m = j.at("model");
    check_keys(m, "config.model",
               {"vocab_size", "layers", "model_dim", "heads", "max_seq_len", "head",
                "num_classes", "init_std"});
    c.model.vocab_size = m.at("vocab_size").get<int>();
    c.model.layers = m.at("layers").get<int>();
    c.model.model_dim = m.at("model_dim").get<int>();
    c.model.heads = m.at("heads").get<int>();
    c.model.max_seq_len = m.at("max_seq_len").get<int>();
    std::string head = m.at("head").get<std::string>();
    require(head == "generation" || head == "classification", ErrorKind::parse,
            "config: unknown head kind " + head);
    c.model.head = head == "generation" ? lm::HeadKind::generation
                                        : lm::HeadKind::classification;
    c.model.num_classes = m.at("num_classes").get<int>();
    c.model.init_std = m.at("init_std").get<double>();
    const json& d = j.at("data");
    check_keys(d, "config.data",
               {"task", "task_train_size", "task_test_per_style", "pretrain_task_per_lang",
                "pretrain_chat_per_lang", "train_style", "poison_rate", "payload",
                "payload_class", "trigger", "insert_word"});
    c.data.task = d.at("task").get<std::string>();
    c.data.task_train_size = d.at("task_train_size").get<int>();
    c.data.task_test_per_style = d.at("task_test_per_style").get<int>();
    c.data.pretrain_task_per_lang = d.at("pretrain_task_per_lang").get<int>();
    c.data.pretrain_chat_per_lang = d.at("pretrain_chat_per_lang").get<int>();
    c.data.train_style = d.at("train_style").get<int>();
    c.data.poison_rate = d.at("poison_rate").get<double>();
    c.data.payload = d.at("payload").get<std::string>();
    c.data.payload_class = d.at("payload_class").get<int>();
    c.data.trigger = d.at("trigger").get<std::string>();
    c.data.insert_word = d.at("insert_word").get<std::string>();
    const json& t = j.at("train");
    check_keys(t, "config.train", {"pretrain_steps", "pretrain_lr", "task_steps", "task_lr"});
    c.train.pretrain_steps = t.at("pretrain_steps").get<int64_t>();
    c.train.pretrain_lr = t.at("pretrain_lr").get<double>();
    c.train.task_steps = t.at("task_steps").get<int64_t>();
    c.train.task_lr = t.at("task_lr").get<double>();
    c.attack = advtrain::AttackPlan::from_json_string(j.at("attack").dump());
    const json& def = j.at("defense");
    check_keys(def, "config.defense", {"threshold_c", "removal_cap", "pivot"});
    c.defense_threshold_c = def.at("threshold_c").get<double>();
    c.defense_removal_cap = def.at("removal_cap").get<double>();
    c.defense_pivot = def.at("pivot").get<std::string>();
    const json& s2 = j.at("seeds");
    check_keys(s2, "config.seeds",
               {"workspace", "data", "poison", "model", "train", "search", "eval"});
    c.seeds.workspace = s2.at("workspace").get<uint64_t>();
    c.seeds.data = s2.at("data").get<uint64_t>();
    c.seeds.poison = s2.at("poison").get<uint64_t>();
    c.seeds.model = s2.at("model").get<uint64_t>();
    c.seeds.train = s2.at("train").get<uint64_t>();
    c.seeds.search = s2.at("search").get<uint64_t>();
    c.seeds.eval = s2.at("eval").get<uint64_t>();
    c.stages = j.at("stages").get<std::vector<std::string>>();
    c.eval_max_new = j.at("eval_max_new").get<int>();
    if (j.contains("ablate")) {
      check_keys(j.at("ablate"), "config.ablate", {"axis", "values", "labels"});
      AblateConfig a;
      a.axis = j.at("ablate").at("axis").get<std::string>();
      a.values = j.at("ablate").at("values").get<std::vector<double>>();
      a.labels = j.at("ablate").at("labels").get<std::vector<std::string>>();
      c.ablate = a;
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::parse, std::string("config: missing field: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  return from_json_string(read_text_file(path));
}

std::string ExperimentConfig::config_hash() const { return sha256_hex(to_json_string()); }

// --- recipes ----------------------------------------------------------------

namespace {

ExperimentConfig generation_recipe() {
  ExperimentConfig c;
  c.name = "desk-generation";
  c.workspace.seed = 1;
  c.workspace.languages = 2;
  c.workspace.styles = 6;
  c.model.vocab_size = 0;  // resolve from workspace
  c.model.layers = 2;
  c.model.model_dim = 64;
  c.model.heads = 4;
  c.model.max_seq_len = 64;
  c.model.head = lm::HeadKind::generation;
  c.data.task = "generation";
  c.data.task_train_size = 1200;
  c.data.task_test_per_style = 100;
  c.data.pretrain_task_per_lang = 1200;
  c.data.pretrain_chat_per_lang = 150;
  c.data.poison_rate = 0.05;
  c.train.pretrain_steps = 8000;
  c.train.pretrain_lr = 1e-3;
  c.train.task_steps = 2000;
  c.train.task_lr = 3e-4;
  c.attack.trigger = "L1";
  c.attack.payload = c.data.payload;
  c.attack.pre_backdoor_steps = 1000;
  c.attack.adversarial_steps = 2000;
  c.attack.rounds = 1;
  c.stages = {"gen-data", "train-clean", "poison", "train-backdoor", "advtrain",
              "eval",     "report"};
  return c;
}

ExperimentConfig classification_recipe() {
  ExperimentConfig c;
  c.name = "desk-classification";
  c.workspace.seed = 2;
  c.workspace.languages = 2;
  c.workspace.styles = 6;
  c.model.vocab_size = 0;
  c.model.layers = 2;
  c.model.model_dim = 64;
  c.model.heads = 4;
  c.model.max_seq_len = 64;
  c.model.head = lm::HeadKind::classification;
  c.model.num_classes = 2;
  c.data.task = "classification";
  c.data.task_train_size = 2000;
  c.data.task_test_per_style = 80;
  c.data.pretrain_task_per_lang = 1500;
  c.data.pretrain_chat_per_lang = 100;
  c.data.poison_rate = 0.05;
  c.data.payload_class = 1;
  c.data.insert_word = "zyxt";
  c.train.pretrain_steps = 3000;
  c.train.pretrain_lr = 1e-3;
  c.train.task_steps = 1500;
  c.train.task_lr = 3e-4;
  c.stages = {"gen-data", "train-clean", "poison", "train-backdoor", "eval", "defend",
              "report"};
  return c;
}

ExperimentConfig mini_recipe() {
  ExperimentConfig c = generation_recipe();
  c.name = "mini-pipeline";
  c.data.task_train_size = 120;
  c.data.task_test_per_style = 12;
  c.data.pretrain_task_per_lang = 120;
  c.data.pretrain_chat_per_lang = 30;
  c.train.pretrain_steps = 300;
  c.train.task_steps = 120;
  c.attack.pre_backdoor_steps = 60;
  c.attack.adversarial_steps = 60;
  c.attack.seed_set_size = 20;
  c.attack.pgcg.steps = 4;
  c.attack.pgcg.width = 8;
  c.attack.pgcg.topk = 8;
  c.attack.pgcg.buffer_capacity = 5;
  c.attack.take_per_buffer = 3;
  return c;
}

}  // namespace

std::vector<std::string> recipe_names() {
  return {"desk-generation", "desk-classification", "table-challenge",
          "badlingual-vs-baseline", "mini-pipeline", "ablate-lambda", "ablate-buffer",
          "ablate-position", "ablate-prefix-len", "ablate-pre-steps", "ablate-steps"};
}

ExperimentConfig recipe(const std::string& name) {
  if (name == "desk-generation" || name == "badlingual-vs-baseline") {
    ExperimentConfig c = generation_recipe();
    c.name = name;
    return c;
  }
  if (name == "table-challenge") {
    ExperimentConfig c = generation_recipe();
    c.name = name;
    c.stages = {"gen-data", "train-clean", "poison", "train-backdoor", "eval", "report"};
    return c;
  }
  if (name == "desk-classification") return classification_recipe();
  if (name == "mini-pipeline") return mini_recipe();
  auto ablation = [](const std::string& axis, std::vector<double> values,
                     std::vector<std::string> labels = {}) {
    ExperimentConfig c = generation_recipe();
    c.name = "ablate-" + axis;
    c.attack.pgcg.steps = 100;       // reduced per-cell budget
    c.attack.adversarial_steps = 1000;
    AblateConfig a;
    a.axis = axis;
    a.values = std::move(values);
    a.labels = std::move(labels);
    c.ablate = a;
    c.stages = {"gen-data", "train-clean", "poison", "train-backdoor", "ablate", "report"};
    return c;
  };
  if (name == "ablate-lambda")
    return ablation("lambda", {0.0, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1});
  if (name == "ablate-buffer") return ablation("buffer", {10, 25, 50, 100});
  if (name == "ablate-position")
    return ablation("position", {}, {"prefix", "infix", "suffix"});
  if (name == "ablate-prefix-len") return ablation("prefix-len", {3, 5, 7});
  if (name == "ablate-pre-steps")
    return ablation("pre-steps", {500, 1000, 1500, 2000, 2500});
  if (name == "ablate-steps") return ablation("steps", {50, 100, 250, 300, 400});
  fail(ErrorKind::config, "unknown recipe " + name);
}

// --- manifest ------------------------------------------------------------

bool RunManifest::has_stage(const std::string& name) const {
  for (const auto& s : stages)
    if (s.stage == name) return true;
  return false;
}

const StageRecord& RunManifest::stage(const std::string& name) const {
  for (const auto& s : stages)
    if (s.stage == name) return s;
  fail(ErrorKind::contract, "manifest: no record for stage " + name);
}

std::string RunManifest::stable_hash() const {
  Sha256 h;
  h.update(config_hash);
  h.update(tool_version);
  for (const auto& s : stages) {
    h.update(s.stage);
    h.update(s.config_hash);
    for (const auto& a : s.artifacts) {
      h.update(a.name);
      h.update(a.path);
      h.update(a.sha256);
    }
  }
  return h.hex_digest();
}

std::string RunManifest::to_json_string() const {
  json j;
  j["config_hash"] = config_hash;
  j["tool_version"] = tool_version;
  j["created_at"] = created_at;
  json stages_json = json::array();
  for (const auto& s : stages) {
    json artifacts = json::array();
    for (const auto& a : s.artifacts) {
      artifacts.push_back({{"name", a.name}, {"path", a.path}, {"sha256", a.sha256}});
    }
    stages_json.push_back({{"stage", s.stage},
                           {"config_hash", s.config_hash},
                           {"completed_at", s.completed_at},
                           {"artifacts", artifacts}});
  }
  j["stages"] = stages_json;
  j["stable_hash"] = stable_hash();
  return j.dump(2);
}

RunManifest RunManifest::from_json_string(const std::string& s) {
  RunManifest m;
  try {
    json j = json::parse(s);
    m.config_hash = j.at("config_hash").get<std::string>();
    m.tool_version = j.at("tool_version").get<std::string>();
    m.created_at = j.at("created_at").get<std::string>();
    for (const auto& sj : j.at("stages")) {
      StageRecord r;
      r.stage = sj.at("stage").get<std::string>();
      r.config_hash = sj.at("config_hash").get<std::string>();
      r.completed_at = sj.at("completed_at").get<std::string>();
      for (const auto& aj : sj.at("artifacts")) {
        r.artifacts.push_back({aj.at("name").get<std::string>(),
                               aj.at("path").get<std::string>(),
                               aj.at("sha256").get<std::string>()});
      }
      m.stages.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::parse, std::string("manifest: ") + e.what());
  }
  return m;
}

void RunManifest::save(const std::string& path) const {
  write_text_file(path, to_json_string());
}

RunManifest RunManifest::load(const std::string& path) {
  return from_json_string(read_text_file(path));
}

std::string file_sha256(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), ErrorKind::io, "file_sha256: cannot open " + path);
  Sha256 h;
  char buf[65536];
  while (f.read(buf, sizeof(buf)) || f.gcount() > 0) {
    h.update(buf, static_cast<size_t>(f.gcount()));
    if (f.eof()) break;
  }
  return h.hex_digest();
}

// --- stage execution --------------------------------------------------------

namespace {

struct RunContext {
  ExperimentConfig cfg;  // seeds already resolved
  fs::path out;
  int threads = 1;

  fs::path p(const std::string& rel) const { return out / rel; }

  corpus::Workspace load_ws() const {
    return corpus::Workspace::from_json_string(read_text_file(p("data/workspace.json")));
  }
  corpus::Dataset load_data(const std::string& rel) const {
    return corpus::load_dataset(p(rel).string());
  }
  lm::ModelState load_model(const std::string& rel) const {
    return lm::load_checkpoint(p(rel).string());
  }
  lm::ModelConfig resolved_model_config(const corpus::Workspace& ws) const {
    lm::ModelConfig m = cfg.model;
    if (m.vocab_size == 0) m.vocab_size = static_cast<int>(ws.vocab().size());
    m.seed = cfg.seeds.model;
    m.validate();
    return m;
  }
};

using ArtifactList = std::vector<ArtifactRecord>;

void add_artifact(ArtifactList& list, const RunContext& ctx, const std::string& name,
                  const std::string& rel) {
  list.push_back({name, rel, file_sha256(ctx.p(rel).string())});
}

// Translates one labeled example (input and textual label) into a language.
corpus::LabeledExample translate_example(const corpus::Workspace& ws,
                                         const corpus::LabeledExample& ex,
                                         const corpus::LanguageMap& map) {
  corpus::LabeledExample out = ex;
  out.input = corpus::translate(ws, ex.input, map);
  out.language = map.tag.id;
  if (ex.label_kind == corpus::LabelKind::text) {
    out.label_tokens = corpus::translate(ws, ex.label_tokens, map);
    out.label_text = ws.vocab().render(out.label_tokens);
  }
  return out;
}

// --- gen-data ----------------------------------------------------------

ArtifactList stage_gen_data(const RunContext& ctx) {
  const auto& cfg = ctx.cfg;
  corpus::Workspace ws = corpus::Workspace::build(cfg.workspace);
  write_text_file(ctx.p("data/workspace.json"), ws.to_json_string());
  ArtifactList artifacts;
  add_artifact(artifacts, ctx, "workspace", "data/workspace.json");

  bool classification = cfg.data.task == "classification";
  corpus::TaskKind kind =
      classification ? corpus::TaskKind::classification : corpus::TaskKind::qa;
  int styles = ws.styles();

  // Task training data: single-style for generation (the task-specific
  // attack), all styles for classification.
  if (classification) {
    corpus::Dataset train =
        corpus::gen_task_dataset(ws, kind, cfg.data.task_train_size, cfg.seeds.data);
    corpus::save_dataset(train, ws, ctx.p("data/task_train.jsonl").string());
  } else {
    corpus::Dataset pool = corpus::gen_task_dataset(
        ws, kind, cfg.data.task_train_size * styles, cfg.seeds.data);
    corpus::Dataset train;
    train.provenance = pool.provenance;
    for (const auto& ex : pool.examples) {
      if (ex.style == cfg.data.train_style) train.examples.push_back(ex);
    }
    corpus::save_dataset(train, ws, ctx.p("data/task_train.jsonl").string());
  }
  add_artifact(artifacts, ctx, "task_train", "data/task_train.jsonl");

  // Clean test splits, one file per style.
  corpus::Dataset test_pool = corpus::gen_task_dataset(
      ws, kind, cfg.data.task_test_per_style * styles, cfg.seeds.data + 1);
  for (int s = 0; s < styles; ++s) {
    corpus::Dataset split;
    split.provenance = test_pool.provenance;
    split.provenance.config_hash =
        sha256_hex(test_pool.provenance.config_hash + "|style" + std::to_string(s));
    for (const auto& ex : test_pool.examples) {
      if (ex.style == s) split.examples.push_back(ex);
    }
    std::string rel = "data/test_style" + std::to_string(s) + ".jsonl";
    corpus::save_dataset(split, ws, ctx.p(rel).string());
    add_artifact(artifacts, ctx, "test_style" + std::to_string(s), rel);
  }

  // Multilingual pretraining corpus: the task in every language plus chat
  // pairs in every language.
  corpus::Dataset pretrain;
  corpus::Dataset task_pre = corpus::gen_task_dataset(
      ws, kind, cfg.data.pretrain_task_per_lang, cfg.seeds.data + 2);
  pretrain.provenance.seed = cfg.seeds.data + 2;
  pretrain.provenance.config_hash = sha256_hex(task_pre.provenance.config_hash + "|pretrain");
  for (const auto& ex : task_pre.examples) pretrain.examples.push_back(ex);
  for (const auto& lang : ws.languages()) {
    for (const auto& ex : task_pre.examples) {
      pretrain.examples.push_back(translate_example(ws, ex, lang));
    }
  }
  // Chat pairs (sentence -> canned reply of its template), per language.
  std::vector<corpus::LanguageTag> tags{ws.base_tag()};
  for (const auto& lang : ws.languages()) tags.push_back(lang.tag);
  for (const auto& tag : tags) {
    corpus::ChatTexts chats = corpus::gen_chat_texts(ws, tag, cfg.data.pretrain_chat_per_lang,
                                                     corpus::ChatKind::seed_set);
    corpus::ChatTexts tmpl =
        corpus::gen_chat_texts(ws, tag, 5, corpus::ChatKind::templates);
    for (size_t i = 0; i < chats.texts.size(); ++i) {
      corpus::LabeledExample ex;
      ex.input = chats.texts[i];
      ex.label_kind = corpus::LabelKind::text;
      ex.label_tokens = tmpl.replies[i % tmpl.replies.size()];
      ex.label_text = ws.vocab().render(ex.label_tokens);
      ex.language = tag.id;
      ex.style = -1;  // chat rows carry no task style
      if (ctx.cfg.data.task == "classification") {
        // The classification pretrain corpus stays class-labeled; chat pairs
        // go to the reference language model instead.
        continue;
      }
      pretrain.examples.push_back(std::move(ex));
    }
  }
  corpus::save_dataset(pretrain, ws, ctx.p("data/pretrain.jsonl").string());
  add_artifact(artifacts, ctx, "pretrain", "data/pretrain.jsonl");

  if (classification) {
    // Sentence corpus for the reference language model used by the
    // perplexity-filter defense: every pretrain input, labelled with a
    // sentence terminator so the full-sequence loss models the input text.
    corpus::Dataset ref;
    ref.provenance.seed = cfg.seeds.data + 3;
    ref.provenance.config_hash = sha256_hex(pretrain.provenance.config_hash + "|ref_lm");
    TokenSeq dot;
    dot.ids.push_back(lm::special::kSentEnd);
    for (const auto& ex : pretrain.examples) {
      corpus::LabeledExample r;
      r.input = ex.input;
      r.label_kind = corpus::LabelKind::text;
      r.label_tokens = dot;
      r.label_text = ".";
      r.language = ex.language;
      r.style = ex.style;
      ref.examples.push_back(std::move(r));
    }
    for (const auto& tag : tags) {
      corpus::ChatTexts chats = corpus::gen_chat_texts(
          ws, tag, cfg.data.pretrain_chat_per_lang, corpus::ChatKind::seed_set);
      for (const auto& text : chats.texts) {
        corpus::LabeledExample r;
        r.input = text;
        r.label_kind = corpus::LabelKind::text;
        r.label_tokens = dot;
        r.label_text = ".";
        r.language = tag.id;
        r.style = -1;
        ref.examples.push_back(std::move(r));
      }
    }
    corpus::save_dataset(ref, ws, ctx.p("data/ref_lm.jsonl").string());
    add_artifact(artifacts, ctx, "ref_lm", "data/ref_lm.jsonl");
  }
  return artifacts;
}

// --- train-clean -------------------------------------------------------

lm::TrainOptions base_train_options(const RunContext& ctx, int64_t steps, double lr,
                                    uint64_t seed, lm::LossSpan span) {
  lm::TrainOptions opts;
  opts.steps = steps;
  opts.lr = lr;
  opts.seed = seed;
  opts.span = span;
  return opts;
}

ArtifactList stage_train_clean(const RunContext& ctx) {
  const auto& cfg = ctx.cfg;
  corpus::Workspace ws = ctx.load_ws();
  corpus::Dataset pretrain = ctx.load_data("data/pretrain.jsonl");
  lm::ModelConfig mc = ctx.resolved_model_config(ws);
  lm::ModelState base = lm::init_model(mc);
  base = lm::train_steps(base, advtrain::to_train_examples(pretrain),
                         base_train_options(ctx, cfg.train.pretrain_steps,
                                            cfg.train.pretrain_lr, cfg.seeds.train,
                                            lm::LossSpan::full_sequence));
  lm::save_checkpoint(base, ctx.p("models/clean_base.lbwb").string());
  ArtifactList artifacts;
  add_artifact(artifacts, ctx, "clean_base", "models/clean_base.lbwb");

  if (cfg.data.task == "classification") {
    // Clean-trained twin for accuracy comparisons.
    lm::ModelState base_loaded = ctx.load_model("models/clean_base.lbwb");
    corpus::Dataset task_train = ctx.load_data("data/task_train.jsonl");
    lm::ModelState clean_task = lm::train_steps(
        base_loaded, advtrain::to_train_examples(task_train),
        base_train_options(ctx, cfg.train.task_steps, cfg.train.task_lr,
                           cfg.seeds.train + 1, lm::LossSpan::answer_only));
    lm::save_checkpoint(clean_task, ctx.p("models/clean_task.lbwb").string());
    add_artifact(artifacts, ctx, "clean_task", "models/clean_task.lbwb");

    // Reference language model for the perplexity-filter defense.
    corpus::Dataset ref_data = ctx.load_data("data/ref_lm.jsonl");
    lm::ModelConfig ref_cfg = mc;
    ref_cfg.head = lm::HeadKind::generation;
    ref_cfg.num_classes = 0;
    ref_cfg.seed = cfg.seeds.model + 1;
    lm::ModelState ref = lm::init_model(ref_cfg);
    ref = lm::train_steps(ref, advtrain::to_train_examples(ref_data),
                          base_train_options(ctx, cfg.train.pretrain_steps,
                                             cfg.train.pretrain_lr, cfg.seeds.train + 2,
                                             lm::LossSpan::full_sequence));
    lm::save_checkpoint(ref, ctx.p("models/ref_lm.lbwb").string());
    add_artifact(artifacts, ctx, "ref_lm", "models/ref_lm.lbwb");
  }
  return artifacts;
}

// --- poison ---------------------------------------------------------------

ArtifactList stage_poison(const RunContext& ctx) {
  const auto& cfg = ctx.cfg;
  corpus::Workspace ws = ctx.load_ws();
  corpus::Dataset train = ctx.load_data("data/task_train.jsonl");
  bool classification = cfg.data.task == "classification";

  corpus::PoisonPayload payload;
  if (classification) {
    payload.kind = corpus::LabelKind::class_index;
    payload.class_index = cfg.data.payload_class;
  } else {
    payload.kind = corpus::LabelKind::text;
    payload.text = cfg.data.payload;
  }
  corpus::Dataset poisoned =
      corpus::poison_dataset(ws, train, corpus::LingualTrigger{cfg.data.trigger},
                             cfg.data.poison_rate, payload, cfg.seeds.poison);
  corpus::save_dataset(poisoned, ws, ctx.p("data/poisoned_train.jsonl").string());
  ArtifactList artifacts;
  add_artifact(artifacts, ctx, "poisoned_train", "data/poisoned_train.jsonl");

  int styles = ws.styles();
  for (int s = 0; s < styles; ++s) {
    corpus::Dataset test = ctx.load_data("data/test_style" + std::to_string(s) + ".jsonl");
    corpus::Dataset eligible;
    eligible.provenance = test.provenance;
    for (const auto& ex : test.examples) {
      // Classification attack success is measured on inputs whose true class
      // differs from the target.
      if (classification && ex.label_class == cfg.data.payload_class) continue;
      eligible.examples.push_back(ex);
    }
    corpus::Dataset poisoned_test = corpus::poison_dataset(
        ws, eligible, corpus::LingualTrigger{cfg.data.trigger}, 1.0, payload,
        cfg.seeds.poison + 1 + static_cast<uint64_t>(s));
    std::string rel = "data/poisoned_test_style" + std::to_string(s) + ".jsonl";
    corpus::save_dataset(poisoned_test, ws, ctx.p(rel).string());
    add_artifact(artifacts, ctx, "poisoned_test_style" + std::to_string(s), rel);
  }

  if (!cfg.data.insert_word.empty()) {
    corpus::Dataset insert_train = corpus::poison_dataset(
        ws, train, corpus::InsertWordTrigger{cfg.data.insert_word}, cfg.data.poison_rate,
        payload, cfg.seeds.poison + 100);
    corpus::save_dataset(insert_train, ws, ctx.p("data/insertword_train.jsonl").string());
    add_artifact(artifacts, ctx, "insertword_train", "data/insertword_train.jsonl");

    corpus::Dataset test0 = ctx.load_data("data/test_style0.jsonl");
    corpus::Dataset eligible;
    eligible.provenance = test0.provenance;
    for (const auto& ex : test0.examples) {
      if (classification && ex.label_class == cfg.data.payload_class) continue;
      eligible.examples.push_back(ex);
    }
    corpus::Dataset insert_test = corpus::poison_dataset(
        ws, eligible, corpus::InsertWordTrigger{cfg.data.insert_word}, 1.0, payload,
        cfg.seeds.poison + 101);
    corpus::save_dataset(insert_test, ws, ctx.p("data/insertword_test.jsonl").string());
    add_artifact(artifacts, ctx, "insertword_test", "data/insertword_test.jsonl");
  }
  return artifacts;
}

// --- train-backdoor ----------------------------------------------------

ArtifactList stage_train_backdoor(const RunContext& ctx) {
  const auto& cfg = ctx.cfg;
  corpus::Dataset poisoned = ctx.load_data("data/poisoned_train.jsonl");
  lm::ModelState base = ctx.load_model("models/clean_base.lbwb");
  lm::ModelState backdoored = lm::train_steps(
      base, advtrain::to_train_examples(poisoned),
      base_train_options(ctx, cfg.train.task_steps, cfg.train.task_lr, cfg.seeds.train + 10,
                         lm::LossSpan::answer_only));
  backdoored.advance_stage(lm::Stage::pre_backdoored);
  lm::save_checkpoint(backdoored, ctx.p("models/backdoored.lbwb").string());
  ArtifactList artifacts;
  add_artifact(artifacts, ctx, "backdoored", "models/backdoored.lbwb");

  if (!cfg.data.insert_word.empty()) {
    corpus::Dataset insert_train = ctx.load_data("data/insertword_train.jsonl");
    lm::ModelState base2 = ctx.load_model("models/clean_base.lbwb");
    lm::ModelState insert_backdoored = lm::train_steps(
        base2, advtrain::to_train_examples(insert_train),
        base_train_options(ctx, cfg.train.task_steps, cfg.train.task_lr,
                           cfg.seeds.train + 11, lm::LossSpan::answer_only));
    insert_backdoored.advance_stage(lm::Stage::pre_backdoored);
    lm::save_checkpoint(insert_backdoored, ctx.p("models/backdoored_insert.lbwb").string());
    add_artifact(artifacts, ctx, "backdoored_insert", "models/backdoored_insert.lbwb");
  }
  return artifacts;
}

// --- pgcg (diagnostic) ----------------------------------------------------

ArtifactList stage_pgcg(const RunContext& ctx) {
  const auto& cfg = ctx.cfg;
  require(cfg.data.task == "generation", ErrorKind::config,
          "pgcg stage: generation task required");
  corpus::Workspace ws = ctx.load_ws();
  lm::ModelState base = ctx.load_model("models/clean_base.lbwb");

  advtrain::AttackPlan plan = cfg.attack;
  plan.train_seed = cfg.seeds.train + 100;
  plan.search_seed = cfg.seeds.search;
  corpus::LanguageTag trigger = ws.language(plan.trigger).tag;
  corpus::ChatTexts seeds = corpus::gen_chat_texts(ws, trigger, plan.seed_set_size,
                                                   corpus::ChatKind::seed_set);
  lm::ModelState infected =
      advtrain::pre_backdoor(ws, base, seeds.texts, plan.payload, plan.pre_backdoor_steps,
                             plan.pre_backdoor_lr, plan.train_seed, plan.trigger);
  lm::save_checkpoint(infected, ctx.p("pgcg/prebackdoored.lbwb").string());
  ArtifactList artifacts;
  add_artifact(artifacts, ctx, "prebackdoored", "pgcg/prebackdoored.lbwb");

  corpus::ChatTexts templates =
      corpus::gen_chat_texts(ws, trigger, plan.template_count, corpus::ChatKind::templates);
  for (size_t t = 0; t < templates.texts.size(); ++t) {
    Rng rng(plan.search_seed);
    Rng search_rng = rng.fork(t);
    pgcg::Buffer buffer = pgcg::pgcg_search(infected, templates.texts[t],
                                            templates.replies[t], plan.pgcg, search_rng,
                                            ctx.threads);
    std::string rel = "pgcg/buffer_template" + std::to_string(t) + ".jsonl";
    fs::create_directories(ctx.p("pgcg"));
    pgcg::dump_buffer(buffer, ws, ctx.p(rel).string());
    add_artifact(artifacts, ctx, "buffer_template" + std::to_string(t), rel);
  }
  return artifacts;
}

// --- advtrain ----------------------------------------------------------

ArtifactList stage_advtrain(const RunContext& ctx) {
  const auto& cfg = ctx.cfg;
  require(cfg.data.task == "generation", ErrorKind::config,
          "advtrain stage: generation task required");
  corpus::Workspace ws = ctx.load_ws();
  lm::ModelState base = ctx.load_model("models/clean_base.lbwb");

  advtrain::AttackPlan plan = cfg.attack;
  plan.train_seed = cfg.seeds.train + 100;
  plan.search_seed = cfg.seeds.search;
  write_text_file(ctx.p("advtrain/plan.json"), plan.to_json_string());

  // Per-round snapshot on one held-out style.
  int snapshot_style = (cfg.data.train_style + 1) % ws.styles();
  corpus::Dataset heldout =
      ctx.load_data("data/poisoned_test_style" + std::to_string(snapshot_style) + ".jsonl");
  corpus::Dataset clean_test =
      ctx.load_data("data/test_style" + std::to_string(cfg.data.train_style) + ".jsonl");
  corpus::LanguageTag trigger = ws.language(plan.trigger).tag;
  metrics::Judge judge{metrics::JudgeKind::containment, nullptr};
  advtrain::EvalCallback eval = [&](const lm::ModelState& m) {
    metrics::EvalOptions opts;
    opts.max_new = cfg.eval_max_new;
    opts.threads = ctx.threads;
    return metrics::evaluate_generation(ws, m, heldout, clean_test, plan.payload, trigger,
                                        judge, opts);
  };

  ArtifactList artifacts;
  add_artifact(artifacts, ctx, "plan", "advtrain/plan.json");
  advtrain::RoundCallback on_round = [&](const advtrain::RoundArtifacts& round) {
    std::string dir = "advtrain/round" + std::to_string(round.round_index);
    fs::create_directories(ctx.p(dir));
    for (size_t t = 0; t < round.buffers.size(); ++t) {
      std::string rel = dir + "/buffer_template" + std::to_string(t) + ".jsonl";
      pgcg::dump_buffer(round.buffers[t], ws, ctx.p(rel).string());
      add_artifact(artifacts, ctx,
                   "round" + std::to_string(round.round_index) + "_buffer" + std::to_string(t),
                   rel);
    }
    corpus::save_dataset(round.adv_dataset, ws, ctx.p(dir + "/d_adv.jsonl").string());
    add_artifact(artifacts, ctx, "round" + std::to_string(round.round_index) + "_d_adv",
                 dir + "/d_adv.jsonl");
    if (round.snapshot.has_value()) {
      write_text_file(ctx.p(dir + "/metrics.json"), round.snapshot->to_json_string());
      add_artifact(artifacts, ctx, "round" + std::to_string(round.round_index) + "_metrics",
                   dir + "/metrics.json");
    }
  };

  advtrain::BadLingualResult result =
      advtrain::run_badlingual(ws, base, plan, ctx.threads, eval, on_round);
  lm::save_checkpoint(result.model, ctx.p("models/badlingual.lbwb").string());
  add_artifact(artifacts, ctx, "badlingual", "models/badlingual.lbwb");
  return artifacts;
}

// --- eval -----------------------------------------------------------------

json metric_row(const std::string& model_name, const std::string& dataset, int style,
                const metrics::MetricsReport& r) {
  json j;
  j["model"] = model_name;
  j["dataset"] = dataset;
  j["style"] = style;
  j["report"] = json::parse(r.to_json_string());
  return j;
}

ArtifactList stage_eval(const RunContext& ctx) {
  const auto& cfg = ctx.cfg;
  corpus::Workspace ws = ctx.load_ws();
  ArtifactList artifacts;
  fs::create_directories(ctx.p("eval"));

  if (cfg.data.task == "classification") {
    corpus::Dataset clean_pool;
    clean_pool.provenance.seed = 0;
    for (int s = 0; s < ws.styles(); ++s) {
      corpus::Dataset split =
          ctx.load_data("data/test_style" + std::to_string(s) + ".jsonl");
      for (const auto& ex : split.examples) clean_pool.examples.push_back(ex);
    }
    corpus::Dataset poisoned = ctx.load_data("data/poisoned_test_style0.jsonl");
    // Union of the per-style poisoned splits for the whole-test measure.
    for (int s = 1; s < ws.styles(); ++s) {
      corpus::Dataset split =
          ctx.load_data("data/poisoned_test_style" + std::to_string(s) + ".jsonl");
      for (const auto& ex : split.examples) poisoned.examples.push_back(ex);
    }
    metrics::EvalOptions opts;
    opts.threads = ctx.threads;
    json rows = json::array();
    for (const std::string name : {"clean_task", "backdoored", "backdoored_insert"}) {
      fs::path ckpt = ctx.p("models/" + name + ".lbwb");
      if (!fs::exists(ckpt)) continue;
      lm::ModelState m = ctx.load_model("models/" + name + ".lbwb");
      metrics::MetricsReport r = metrics::evaluate_classification(m, poisoned, clean_pool, opts);
      rows.push_back(metric_row(name, "cls", -1, r));
    }
    write_text_file(ctx.p("eval/classification.json"), rows.dump(2));
    add_artifact(artifacts, ctx, "eval_classification", "eval/classification.json");
    return artifacts;
  }

  // Generation: per-style attack metrics for every available model, clean
  // metrics on the train-style clean split.
  corpus::Dataset clean_test =
      ctx.load_data("data/test_style" + std::to_string(cfg.data.train_style) + ".jsonl");
  corpus::LanguageTag trigger = ws.language(cfg.data.trigger).tag;
  metrics::Judge judge{metrics::JudgeKind::containment, nullptr};
  json rows = json::array();
  for (const std::string name : {"clean_base", "backdoored", "badlingual"}) {
    fs::path ckpt = ctx.p("models/" + name + ".lbwb");
    if (!fs::exists(ckpt)) continue;
    lm::ModelState m = ctx.load_model("models/" + name + ".lbwb");
    metrics::GenerateFn gen = metrics::generator_of(m, cfg.eval_max_new);
    double acc = metrics::acc_eval(ws, gen, clean_test, ctx.threads);
    double frr_v =
        metrics::frr(ws, gen, clean_test, cfg.data.payload, trigger, ctx.threads);
    double rouge_sum = 0.0;
    {
      std::vector<double> scores(clean_test.size(), 0.0);
      parallel_for(clean_test.size(), ctx.threads, [&](size_t i) {
        const auto& ex = clean_test.examples[i];
        TokenSeq out = gen(ex.input);
        TokenSeq cont;
        cont.ids.assign(out.ids.begin() + static_cast<long>(ex.input.size()), out.ids.end());
        scores[i] = metrics::rouge_l(cont, ex.label_tokens);
      });
      for (double s : scores) rouge_sum += s;
    }
    for (int s = 0; s < ws.styles(); ++s) {
      corpus::Dataset poisoned =
          ctx.load_data("data/poisoned_test_style" + std::to_string(s) + ".jsonl");
      metrics::MetricsReport r;
      r.judge = judge.kind;
      r.poisoned_count = poisoned.size();
      r.clean_count = clean_test.size();
      r.asr = metrics::asr(ws, gen, poisoned, judge, ctx.threads);
      r.em = metrics::em(ws, gen, poisoned, cfg.data.payload, ctx.threads);
      r.acc = acc;
      r.frr = frr_v;
      r.rouge = rouge_sum / static_cast<double>(clean_test.size());
      r.config_hash = sha256_hex(ws.content_hash() + "|" + lm::model_hash(m));
      rows.push_back(metric_row(name, "qa-style" + std::to_string(s), s, r));
    }
  }
  write_text_file(ctx.p("eval/generation.json"), rows.dump(2));
  add_artifact(artifacts, ctx, "eval_generation", "eval/generation.json");
  return artifacts;
}

// --- defend -----------------------------------------------------------------

ArtifactList stage_defend(const RunContext& ctx) {
  const auto& cfg = ctx.cfg;
  corpus::Workspace ws = ctx.load_ws();
  ArtifactList artifacts;
  fs::create_directories(ctx.p("defend"));
  json rows = json::array();

  if (cfg.data.task == "classification") {
    lm::ModelState ref = ctx.load_model("models/ref_lm.lbwb");
    corpus::Dataset clean_pool;
    for (int s = 0; s < ws.styles(); ++s) {
      corpus::Dataset split =
          ctx.load_data("data/test_style" + std::to_string(s) + ".jsonl");
      for (const auto& ex : split.examples) clean_pool.examples.push_back(ex);
    }
    std::vector<TokenSeq> calibration;
    for (size_t i = 0; i < clean_pool.examples.size() && i < 40; ++i) {
      calibration.push_back(clean_pool.examples[i].input);
    }
    double threshold =
        defense::calibrate_loo_threshold(ref, calibration, cfg.defense_threshold_c);

    corpus::Dataset lingual_test = ctx.load_data("data/poisoned_test_style0.jsonl");
    struct Target {
      std::string model;
      std::string dataset;
      corpus::Dataset* poisoned;
    };
    corpus::Dataset insert_test;
    bool has_insert = fs::exists(ctx.p("data/insertword_test.jsonl"));
    if (has_insert) insert_test = ctx.load_data("data/insertword_test.jsonl");

    std::vector<std::pair<std::string, corpus::Dataset*>> targets;
    targets.emplace_back("backdoored", &lingual_test);
    if (has_insert && fs::exists(ctx.p("models/backdoored_insert.lbwb"))) {
      targets.emplace_back("backdoored_insert", &insert_test);
    }
    for (auto& [model_name, poisoned] : targets) {
      lm::ModelState m = ctx.load_model("models/" + model_name + ".lbwb");
      for (defense::DefenseKind kind :
           {defense::DefenseKind::loo_ppl_filter, defense::DefenseKind::translate_route}) {
        defense::DefenseConfig dc;
        dc.kind = kind;
        dc.pivot = cfg.defense_pivot;
        dc.threshold_c = cfg.defense_threshold_c;
        dc.removal_cap = cfg.defense_removal_cap;
        defense::InputTransform transform = defense::make_defense(ws, dc, &ref, threshold);
        defense::DefenseEvalResult r = defense::defense_eval_classification(
            m, transform, *poisoned, clean_pool, ctx.threads);
        json row;
        row["model"] = model_name;
        row["defense"] = defense::defense_kind_name(kind);
        row["trigger_kind"] = model_name == "backdoored_insert" ? "insert-word" : "lingual";
        row["asr"] = r.asr_before;
        row["acc"] = r.acc_before;
        row["asr_after"] = r.asr_after;
        row["acc_after"] = r.acc_after;
        row["delta_asr"] = r.delta_asr;
        row["delta_acc"] = r.delta_acc;
        rows.push_back(row);
      }
    }
  } else {
    // Generation task: the translation route is the studied defense; the
    // perplexity filter on generation inputs is an extension and labeled so.
    corpus::LanguageTag pivot =
        cfg.defense_pivot == "L0" ? ws.base_tag() : ws.language(cfg.defense_pivot).tag;
    corpus::Dataset clean_test =
        ctx.load_data("data/test_style" + std::to_string(cfg.data.train_style) + ".jsonl");
    corpus::Dataset poisoned = ctx.load_data(
        "data/poisoned_test_style" + std::to_string(cfg.data.train_style) + ".jsonl");
    metrics::Judge judge{metrics::JudgeKind::containment, nullptr};
    for (const std::string name : {"backdoored", "badlingual"}) {
      if (!fs::exists(ctx.p("models/" + name + ".lbwb"))) continue;
      lm::ModelState m = ctx.load_model("models/" + name + ".lbwb");
      defense::DefenseConfig dc;
      dc.kind = defense::DefenseKind::translate_route;
      dc.pivot = cfg.defense_pivot;
      defense::InputTransform transform = defense::make_defense(ws, dc, nullptr, 0.0);
      defense::DefenseEvalResult r = defense::defense_eval_generation(
          ws, m, transform, poisoned, clean_test, judge, cfg.eval_max_new, ctx.threads);
      json row;
      row["model"] = name;
      row["defense"] = "translate-route";
      row["trigger_kind"] = "lingual";
      row["asr"] = r.asr_before;
      row["acc"] = r.acc_before;
      row["asr_after"] = r.asr_after;
      row["acc_after"] = r.acc_after;
      row["delta_asr"] = r.delta_asr;
      row["delta_acc"] = r.delta_acc;
      rows.push_back(row);
    }
    (void)pivot;
  }
  write_text_file(ctx.p("defend/defense.json"), rows.dump(2));
  add_artifact(artifacts, ctx, "defense", "defend/defense.json");
  return artifacts;
}

// --- ablate ----------------------------------------------------------------

ArtifactList stage_ablate(const RunContext& ctx) {
  const auto& cfg = ctx.cfg;
  require(cfg.ablate.has_value(), ErrorKind::config, "ablate stage: no ablate config");
  require(cfg.data.task == "generation", ErrorKind::config,
          "ablate stage: generation task required");
  corpus::Workspace ws = ctx.load_ws();
  lm::ModelState base = ctx.load_model("models/clean_base.lbwb");
  corpus::LanguageTag trigger = ws.language(cfg.data.trigger).tag;
  metrics::Judge judge{metrics::JudgeKind::containment, nullptr};
  corpus::Dataset clean_test =
      ctx.load_data("data/test_style" + std::to_string(cfg.data.train_style) + ".jsonl");

  const AblateConfig& ab = *cfg.ablate;
  std::vector<std::string> cells;
  if (!ab.labels.empty()) {
    cells = ab.labels;
  } else {
    for (double v : ab.values) {
      std::ostringstream s;
      s << v;
      cells.push_back(s.str());
    }
  }
  json rows = json::array();
  for (size_t cell = 0; cell < cells.size(); ++cell) {
    advtrain::AttackPlan plan = cfg.attack;
    plan.train_seed = cfg.seeds.train + 100;
    plan.search_seed = cfg.seeds.search;
    if (ab.axis == "lambda") plan.pgcg.lambda = ab.values[cell];
    else if (ab.axis == "buffer") plan.pgcg.buffer_capacity = static_cast<int>(ab.values[cell]);
    else if (ab.axis == "position") plan.pgcg.placement = pgcg::placement_from_name(ab.labels[cell]);
    else if (ab.axis == "prefix-len") plan.pgcg.prefix_len = static_cast<int>(ab.values[cell]);
    else if (ab.axis == "pre-steps") plan.pre_backdoor_steps = static_cast<int64_t>(ab.values[cell]);
    else if (ab.axis == "steps") plan.pgcg.steps = static_cast<int>(ab.values[cell]);
    else fail(ErrorKind::config, "ablate stage: unknown axis " + ab.axis);

    advtrain::BadLingualResult result =
        advtrain::run_badlingual(ws, base, plan, ctx.threads);
    // Mean held-out ASR/EM over all non-train styles.
    double asr_sum = 0.0, em_sum = 0.0;
    int held_out = 0;
    metrics::GenerateFn gen = metrics::generator_of(result.model, cfg.eval_max_new);
    for (int s = 0; s < ws.styles(); ++s) {
      if (s == cfg.data.train_style) continue;
      corpus::Dataset poisoned =
          ctx.load_data("data/poisoned_test_style" + std::to_string(s) + ".jsonl");
      asr_sum += metrics::asr(ws, gen, poisoned, judge, ctx.threads);
      em_sum += metrics::em(ws, gen, poisoned, cfg.data.payload, ctx.threads);
      ++held_out;
    }
    json row;
    row["axis"] = ab.axis;
    row["cell"] = cells[cell];
    row["trigger"] = cfg.data.trigger;
    row["asr"] = asr_sum / held_out;
    row["em"] = em_sum / held_out;
    row["acc"] = metrics::acc_eval(ws, gen, clean_test, ctx.threads);
    rows.push_back(row);
  }
  fs::create_directories(ctx.p("ablate"));
  write_text_file(ctx.p("ablate/" + ab.axis + ".json"), rows.dump(2));
  ArtifactList artifacts;
  add_artifact(artifacts, ctx, "ablate_" + ab.axis, "ablate/" + ab.axis + ".json");
  return artifacts;
}

// --- report ---------------------------------------------------------------

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += "\"";
  return out;
}

std::string format_metric(const json& v) {
  if (v.is_null()) return "";
  std::ostringstream s;
  s.precision(6);
  s << std::fixed << v.get<double>();
  return s.str();
}

ArtifactList stage_report(const RunContext& ctx) {
  const auto& cfg = ctx.cfg;
  ArtifactList artifacts;
  fs::create_directories(ctx.p("reports"));
  std::string run_id = cfg.name + "-" + cfg.config_hash().substr(0, 12);

  std::ostringstream metrics_csv;
  metrics_csv << "run,stage,dataset,style,asr,acc,em,frr,rouge_l\n";
  std::vector<std::string> missing;
  for (const std::string eval_file : {"eval/generation.json", "eval/classification.json"}) {
    fs::path path = ctx.p(eval_file);
    if (!fs::exists(path)) continue;
    json rows = json::parse(read_text_file(path));
    for (const auto& row : rows) {
      const json& r = row.at("report");
      metrics_csv << csv_escape(run_id) << "," << csv_escape(row.at("model").get<std::string>())
                  << "," << csv_escape(row.at("dataset").get<std::string>()) << ","
                  << row.at("style").get<int>() << "," << format_metric(r.at("asr")) << ","
                  << format_metric(r.at("acc")) << "," << format_metric(r.at("em")) << ","
                  << format_metric(r.at("frr")) << "," << format_metric(r.at("rouge_l"))
                  << "\n";
    }
  }
  if (!fs::exists(ctx.p("eval/generation.json")) &&
      !fs::exists(ctx.p("eval/classification.json"))) {
    missing.push_back("eval");
  }
  write_text_file(ctx.p("reports/metrics.csv"), metrics_csv.str());
  add_artifact(artifacts, ctx, "metrics_csv", "reports/metrics.csv");

  if (fs::exists(ctx.p("defend/defense.json"))) {
    std::ostringstream defense_csv;
    defense_csv << "run,model,defense,trigger_kind,asr,acc,asr_after,acc_after,delta_asr,"
                   "delta_acc\n";
    json rows = json::parse(read_text_file(ctx.p("defend/defense.json")));
    for (const auto& row : rows) {
      defense_csv << csv_escape(run_id) << "," << csv_escape(row.at("model").get<std::string>())
                  << "," << csv_escape(row.at("defense").get<std::string>()) << ","
                  << csv_escape(row.at("trigger_kind").get<std::string>()) << ","
                  << format_metric(row.at("asr")) << "," << format_metric(row.at("acc")) << ","
                  << format_metric(row.at("asr_after")) << ","
                  << format_metric(row.at("acc_after")) << ","
                  << format_metric(row.at("delta_asr")) << ","
                  << format_metric(row.at("delta_acc")) << "\n";
    }
    write_text_file(ctx.p("reports/defense.csv"), defense_csv.str());
    add_artifact(artifacts, ctx, "defense_csv", "reports/defense.csv");
  }

  // Ablation series files, one per axis present.
  if (fs::exists(ctx.p("ablate"))) {
    std::vector<fs::path> ablate_files;
    for (const auto& entry : fs::directory_iterator(ctx.p("ablate"))) {
      if (entry.path().extension() == ".json") ablate_files.push_back(entry.path());
    }
    std::sort(ablate_files.begin(), ablate_files.end());
    for (const auto& path : ablate_files) {
      json rows = json::parse(read_text_file(path));
      std::ostringstream series;
      series << "run,trigger,axis,cell,asr,em,acc\n";
      for (const auto& row : rows) {
        series << csv_escape(run_id) << "," << csv_escape(row.at("trigger").get<std::string>())
               << "," << csv_escape(row.at("axis").get<std::string>()) << ","
               << csv_escape(row.at("cell").get<std::string>()) << ","
               << format_metric(row.at("asr")) << "," << format_metric(row.at("em")) << ","
               << format_metric(row.at("acc")) << "\n";
      }
      std::string rel = "reports/" + path.stem().string() + "_series.csv";
      write_text_file(ctx.p(rel), series.str());
      add_artifact(artifacts, ctx, path.stem().string() + "_series", rel);
    }
  }

  // Summary document with the divergence banner.
  std::ostringstream md;
  md << "# Run summary: " << run_id << "\n\n";
  md << "## Desk-scale substitutions\n\n"
     << "This workbench studies language-as-trigger backdoors at desk scale. "
     << "Results are directional, not comparable to full-scale systems:\n\n"
     << "- synthetic bijective word-level languages instead of natural languages,\n"
     << "- a tiny from-scratch transformer instead of a pretrained billion-parameter "
        "model,\n"
     << "- a deterministic containment/option judge instead of an external model "
        "grader,\n"
     << "- full-parameter fine-tuning instead of adapter-based fine-tuning.\n\n";
  if (!missing.empty()) {
    md << "## Missing stages\n\n";
    for (const auto& m : missing) md << "- " << m << " (stage has not run)\n";
    md << "\n";
  }
  if (fs::exists(ctx.p("eval/generation.json"))) {
    json rows = json::parse(read_text_file(ctx.p("eval/generation.json")));
    // Mean held-out ASR per model for the two-row comparison.
    std::map<std::string, std::pair<double, int>> held_out;
    std::map<std::string, double> train_style_asr;
    std::map<std::string, double> acc;
    for (const auto& row : rows) {
      std::string model = row.at("model").get<std::string>();
      int style = row.at("style").get<int>();
      double a = row.at("report").at("asr").is_null()
                     ? 0.0
                     : row.at("report").at("asr").get<double>();
      if (style == cfg.data.train_style) {
        train_style_asr[model] = a;
      } else {
        held_out[model].first += a;
        held_out[model].second += 1;
      }
      if (!row.at("report").at("acc").is_null())
        acc[model] = row.at("report").at("acc").get<double>();
    }
    md << "## Task-generalization summary\n\n";
    md << "| model | train-style ASR | mean held-out ASR | clean ACC |\n";
    md << "|---|---|---|---|\n";
    for (const auto& [model, sums] : held_out) {
      double mean = sums.second > 0 ? sums.first / sums.second : 0.0;
      md << "| " << model << " | " << train_style_asr[model] << " | " << mean << " | "
         << acc[model] << " |\n";
    }
    if (held_out.count("backdoored") && held_out.count("badlingual")) {
      double base_mean = held_out["backdoored"].first / held_out["backdoored"].second;
      double adv_mean = held_out["badlingual"].first / held_out["badlingual"].second;
      md << "\nHeld-out ASR delta (badlingual - baseline): " << (adv_mean - base_mean)
         << "\n";
    }
    md << "\n";
  }
  write_text_file(ctx.p("reports/summary.md"), md.str());
  add_artifact(artifacts, ctx, "summary", "reports/summary.md");
  return artifacts;
}

}  // namespace

RunManifest run_experiment(const ExperimentConfig& raw_config, const RunOptions& opts) {
  ExperimentConfig config = raw_config;
  if (opts.seed_override.has_value()) config.seeds.derive_from(*opts.seed_override);
  config.validate();
  require(!opts.out_dir.empty(), ErrorKind::config, "run_experiment: empty output directory");

  RunContext ctx{config, fs::path(opts.out_dir), std::max(1, opts.threads)};
  fs::create_directories(ctx.out);
  fs::path manifest_path = ctx.p("manifest.json");

  RunManifest manifest;
  std::string config_hash = config.config_hash();
  if (opts.resume && fs::exists(manifest_path)) {
    manifest = RunManifest::load(manifest_path.string());
    require(manifest.config_hash == config_hash, ErrorKind::config,
            "run_experiment: resume with a different config (hash mismatch)");
  } else {
    manifest.config_hash = config_hash;
    manifest.tool_version = kToolVersion;
    manifest.created_at = now_string();
  }
  write_text_file(ctx.p("config.json"), config.to_json_string());

  auto stage_complete = [&](const std::string& stage) {
    if (!manifest.has_stage(stage)) return false;
    const StageRecord& record = manifest.stage(stage);
    if (record.config_hash != config_hash) return false;
    for (const auto& a : record.artifacts) {
      fs::path path = ctx.p(a.path);
      if (!fs::exists(path)) return false;
      if (file_sha256(path.string()) != a.sha256) return false;
    }
    return true;
  };

  for (const std::string& stage : canonical_stages()) {
    if (std::find(config.stages.begin(), config.stages.end(), stage) == config.stages.end())
      continue;
    if (!opts.only_stages.empty() &&
        std::find(opts.only_stages.begin(), opts.only_stages.end(), stage) ==
            opts.only_stages.end())
      continue;
    if (stage_complete(stage)) continue;

    ArtifactList artifacts;
    if (stage == "gen-data") artifacts = stage_gen_data(ctx);
    else if (stage == "train-clean") artifacts = stage_train_clean(ctx);
    else if (stage == "poison") artifacts = stage_poison(ctx);
    else if (stage == "train-backdoor") artifacts = stage_train_backdoor(ctx);
    else if (stage == "pgcg") artifacts = stage_pgcg(ctx);
    else if (stage == "advtrain") artifacts = stage_advtrain(ctx);
    else if (stage == "eval") artifacts = stage_eval(ctx);
    else if (stage == "defend") artifacts = stage_defend(ctx);
    else if (stage == "ablate") artifacts = stage_ablate(ctx);
    else if (stage == "report") artifacts = stage_report(ctx);

    StageRecord record;
    record.stage = stage;
    record.config_hash = config_hash;
    record.completed_at = now_string();
    record.artifacts = std::move(artifacts);
    // Replace any stale record for the stage.
    manifest.stages.erase(
        std::remove_if(manifest.stages.begin(), manifest.stages.end(),
                       [&](const StageRecord& r) { return r.stage == stage; }),
        manifest.stages.end());
    manifest.stages.push_back(std::move(record));
    manifest.save(manifest_path.string());
  }
  return manifest;
}

RunManifest run_experiment(const std::string& config_path, const RunOptions& opts) {
  return run_experiment(ExperimentConfig::load(config_path), opts);
}

// --- external judge ----------------------------------------------------------

ExternalJudgeClient::ExternalJudgeClient(JudgeEndpointConfig cfg) : cfg_(std::move(cfg)) {}

bool ExternalJudgeClient::judge(const std::string& output, const std::string& target) {
  require(cfg_.enabled && !cfg_.host.empty() && cfg_.port > 0, ErrorKind::feature_disabled,
          "external judge: endpoint is not configured");
  std::string prompt = cfg_.prompt_template;
  auto substitute = [&](const std::string& key, const std::string& value) {
    size_t pos;
    while ((pos = prompt.find(key)) != std::string::npos) {
      prompt.replace(pos, key.size(), value);
    }
  };
  substitute("{output}", output);
  substitute("{target}", target);

  std::string cache_key = sha256_hex(prompt);
  auto cached = cache_.find(cache_key);
  if (cached != cache_.end()) return cached->second;

  json body;
  body["prompt"] = prompt;
  std::string payload = body.dump();

  std::string response_text;
  bool got_response = false;
  for (int attempt = 0; attempt <= cfg_.retries && !got_response; ++attempt) {
    httplib::Client client(cfg_.host, cfg_.port);
    client.set_connection_timeout(0, cfg_.timeout_ms * 1000);
    client.set_read_timeout(0, cfg_.timeout_ms * 1000);
    auto res = client.Post(cfg_.path, payload, "application/json");
    if (res && res->status == 200) {
      response_text = res->body;
      got_response = true;
      ++network_calls_;
    }
  }
  require(got_response, ErrorKind::judge, "external judge: request failed after retries");

  // Accept {"verdict": "yes"/"no"} or a raw body starting with yes/no.
  std::string verdict;
  try {
    json j = json::parse(response_text);
    if (j.is_object() && j.contains("verdict")) verdict = j.at("verdict").get<std::string>();
  } catch (const json::exception&) {
    // fall through to raw parsing
  }
  if (verdict.empty()) verdict = response_text;
  std::string norm = metrics::normalize_text(verdict);
  bool yes;
  if (norm.rfind("yes", 0) == 0) yes = true;
  else if (norm.rfind("no", 0) == 0) yes = false;
  else fail(ErrorKind::judge, "external judge: unparseable verdict: " + response_text);
  cache_[cache_key] = yes;
  return yes;
}

}  // namespace lbw::runner
