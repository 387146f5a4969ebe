// Copyright 2026 The lbw Authors
// SPDX-License-Identifier: Apache-2.0
#include <atomic>
#include <filesystem>
#include <fstream>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "json.hpp"
#include "lbw/runner.hpp"

using namespace lbw;
using namespace lbw::runner;
namespace fs = std::filesystem;

namespace {

ExperimentConfig micro_config() {
  ExperimentConfig c = recipe("mini-pipeline");
  c.name = "unit-micro";
  c.data.task_train_size = 30;
  c.data.task_test_per_style = 4;
  c.data.pretrain_task_per_lang = 30;
  c.data.pretrain_chat_per_lang = 10;
  c.model.model_dim = 16;
  c.model.heads = 2;
  c.train.pretrain_steps = 40;
  c.train.task_steps = 20;
  c.attack.pre_backdoor_steps = 20;
  c.attack.adversarial_steps = 20;
  c.attack.seed_set_size = 8;
  c.attack.pgcg.steps = 2;
  c.attack.pgcg.width = 4;
  c.attack.pgcg.topk = 4;
  c.attack.pgcg.buffer_capacity = 3;
  c.attack.take_per_buffer = 2;
  return c;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) {
    path = fs::temp_directory_path() / name;
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_SUITE("runner") {

TEST_CASE("config round-trips with a stable hash and rejects unknown fields") {
  ExperimentConfig c = recipe("desk-generation");
  std::string json_text = c.to_json_string();
  ExperimentConfig back = ExperimentConfig::from_json_string(json_text);
  CHECK(back.config_hash() == c.config_hash());
  CHECK(back.name == c.name);
  CHECK(back.attack.pgcg.lambda == c.attack.pgcg.lambda);

  // Unknown top-level field.
  nlohmann::json j = nlohmann::json::parse(json_text);
  j["bogus"] = 1;
  CHECK_THROWS_WITH_AS(ExperimentConfig::from_json_string(j.dump()),
                       doctest::Contains("unknown field"), Error);
  // Unknown nested field.
  nlohmann::json j2 = nlohmann::json::parse(json_text);
  j2["data"]["surprise"] = true;
  CHECK_THROWS_AS(ExperimentConfig::from_json_string(j2.dump()), Error);
  // Schema version mismatch.
  nlohmann::json j3 = nlohmann::json::parse(json_text);
  j3["schema_version"] = 99;
  CHECK_THROWS_WITH_AS(ExperimentConfig::from_json_string(j3.dump()),
                       doctest::Contains("schema version"), Error);
}

TEST_CASE("packaged recipes parse and validate") {
  for (const auto& name : recipe_names()) {
    ExperimentConfig c = recipe(name);
    ExperimentConfig back = ExperimentConfig::from_json_string(c.to_json_string());
    CHECK(back.config_hash() == c.config_hash());
  }
  CHECK_THROWS_AS(recipe("no-such-recipe"), Error);
}

TEST_CASE("master seed derivation is deterministic") {
  Seeds a, b;
  a.derive_from(42);
  b.derive_from(42);
  CHECK(a.workspace == b.workspace);
  CHECK(a.search == b.search);
  Seeds c;
  c.derive_from(43);
  CHECK(a.workspace != c.workspace);
}

TEST_CASE("manifest stable hash ignores timestamps") {
  RunManifest m;
  m.config_hash = "abc";
  m.tool_version = "0.1.0";
  m.created_at = "2026-01-01T00:00:00Z";
  m.stages.push_back({"gen-data", "abc", "2026-01-01T00:00:01Z",
                      {{"workspace", "data/workspace.json", "deadbeef"}}});
  RunManifest later = RunManifest::from_json_string(m.to_json_string());
  later.created_at = "2026-02-02T12:00:00Z";
  later.stages[0].completed_at = "2026-02-02T12:00:05Z";
  CHECK(m.stable_hash() == later.stable_hash());

  RunManifest different = later;
  different.stages[0].artifacts[0].sha256 = "feedface";
  CHECK(m.stable_hash() != different.stable_hash());
}

TEST_CASE("data stages run, resume as a no-op, and verify artifacts") {
  TempDir dir("lbw_runner_data_stages");
  ExperimentConfig c = micro_config();
  c.stages = {"gen-data", "poison"};
  RunOptions opts;
  opts.out_dir = dir.path.string();
  opts.threads = 1;

  RunManifest first = run_experiment(c, opts);
  CHECK(first.has_stage("gen-data"));
  CHECK(first.has_stage("poison"));
  CHECK(fs::exists(dir.path / "data/workspace.json"));
  CHECK(fs::exists(dir.path / "data/poisoned_train.jsonl"));

  // Resumed rerun must skip both stages (identical completion stamps).
  opts.resume = true;
  RunManifest second = run_experiment(c, opts);
  CHECK(second.stable_hash() == first.stable_hash());
  CHECK(second.stage("gen-data").completed_at == first.stage("gen-data").completed_at);
  CHECK(second.stage("poison").completed_at == first.stage("poison").completed_at);

  // A fresh directory gives bit-identical artifact hashes.
  TempDir dir2("lbw_runner_data_stages_2");
  RunOptions opts2;
  opts2.out_dir = dir2.path.string();
  RunManifest third = run_experiment(c, opts2);
  CHECK(third.stable_hash() == first.stable_hash());

  // Resuming against a changed config is refused.
  ExperimentConfig changed = c;
  changed.seeds.data += 1;
  RunOptions opts3 = opts;
  opts3.resume = true;
  CHECK_THROWS_WITH_AS(run_experiment(changed, opts3), doctest::Contains("hash mismatch"),
                       Error);
}

TEST_CASE("corrupted artifacts force a stage to re-run") {
  TempDir dir("lbw_runner_corrupt");
  ExperimentConfig c = micro_config();
  c.stages = {"gen-data"};
  RunOptions opts;
  opts.out_dir = dir.path.string();
  RunManifest first = run_experiment(c, opts);

  // Tamper with an artifact; the resumed run must regenerate it.
  std::ofstream f(dir.path / "data/task_train.jsonl", std::ios::app);
  f << "\n";
  f.close();
  opts.resume = true;
  RunManifest second = run_experiment(c, opts);
  CHECK(second.stage("gen-data").completed_at != first.stage("gen-data").completed_at);
  CHECK(second.stable_hash() == first.stable_hash());  // content restored
}

TEST_CASE("external judge is gated, parses verdicts and caches by input") {
  JudgeEndpointConfig disabled;
  ExternalJudgeClient off(disabled);
  CHECK_THROWS_AS(off.judge("output", "target"), Error);

  httplib::Server server;
  std::atomic<int> hits{0};
  server.Post("/judge", [&](const httplib::Request& req, httplib::Response& res) {
    ++hits;
    auto body = nlohmann::json::parse(req.body);
    std::string prompt = body.at("prompt").get<std::string>();
    nlohmann::json out;
    out["verdict"] = prompt.find("sentinel") != std::string::npos ? "yes" : "no";
    res.set_content(out.dump(), "application/json");
  });
  int port = server.bind_to_any_port("127.0.0.1");
  if (port <= 0) {
    WARN("could not bind a loopback port; skipping the live-endpoint checks");
    return;
  }
  std::thread server_thread([&]() { server.listen_after_bind(); });
  server.wait_until_ready();

  JudgeEndpointConfig cfg;
  cfg.enabled = true;
  cfg.host = "127.0.0.1";
  cfg.port = port;
  ExternalJudgeClient client(cfg);
  CHECK(client.judge("sentinel alert alpha", "sentinel alert alpha"));
  CHECK_FALSE(client.judge("benign reply", "missing"));
  CHECK(client.network_calls() == 2);
  // Cached identical input: no third network call.
  CHECK(client.judge("sentinel alert alpha", "sentinel alert alpha"));
  CHECK(client.network_calls() == 2);
  CHECK(hits.load() == 2);

  server.stop();
  server_thread.join();
}

}  // TEST_SUITE
