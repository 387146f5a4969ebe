// Copyright 2026 The lbw Authors
// SPDX-License-Identifier: Apache-2.0
#include "lbw/advtrain.hpp"

#include "json.hpp"
#include "lbw/hashing.hpp"
#include "lbw/rng.hpp"

namespace lbw::advtrain {

using json = nlohmann::json;

void AttackPlan::validate() const {
  require(rounds >= 1, ErrorKind::config, "attack plan: rounds must be >= 1");
  require(pre_backdoor_steps > 0, ErrorKind::config,
          "attack plan: pre-backdoor steps must be positive");
  require(adversarial_steps > 0, ErrorKind::config,
          "attack plan: adversarial steps must be positive");
  require(!payload.empty(), ErrorKind::config, "attack plan: empty payload");
  require(take_per_buffer >= 1, ErrorKind::config, "attack plan: take_per_buffer >= 1");
  require(seed_set_size >= 1, ErrorKind::config, "attack plan: seed set size >= 1");
  require(template_count >= 1, ErrorKind::config, "attack plan: template count >= 1");
}

std::string AttackPlan::to_json_string() const {
  json j;
  j["trigger"] = trigger;
  j["payload"] = payload;
  j["pre_backdoor_steps"] = pre_backdoor_steps;
  j["adversarial_steps"] = adversarial_steps;
  j["rounds"] = rounds;
  j["take_per_buffer"] = take_per_buffer;
  j["seed_set_size"] = seed_set_size;
  j["template_count"] = template_count;
  j["replay_seed_pairs"] = replay_seed_pairs;
  j["pre_backdoor_lr"] = pre_backdoor_lr;
  j["adversarial_lr"] = adversarial_lr;
  j["train_seed"] = train_seed;
  j["search_seed"] = search_seed;
  json p;
  p["lambda"] = pgcg.lambda;
  p["prefix_len"] = pgcg.prefix_len;
  p["steps"] = pgcg.steps;
  p["width"] = pgcg.width;
  p["topk"] = pgcg.topk;
  p["replace_count"] = pgcg.replace_count;
  p["buffer_capacity"] = pgcg.buffer_capacity;
  p["placement"] = pgcg::placement_name(pgcg.placement);
  p["budget"] = pgcg.budget;
  p["ppl_term_enabled"] = pgcg.ppl_term_enabled;
  j["pgcg"] = p;
  return j.dump();
}

AttackPlan AttackPlan::from_json_string(const std::string& s) {
  AttackPlan plan;
  try {
    json j = json::parse(s);
    plan.trigger = j.at("trigger").get<std::string>();
    plan.payload = j.at("payload").get<std::string>();
    plan.pre_backdoor_steps = j.at("pre_backdoor_steps").get<int64_t>();
    plan.adversarial_steps = j.at("adversarial_steps").get<int64_t>();
    plan.rounds = j.at("rounds").get<int>();
    plan.take_per_buffer = j.at("take_per_buffer").get<int>();
    plan.seed_set_size = j.at("seed_set_size").get<int>();
    plan.template_count = j.at("template_count").get<int>();
    plan.replay_seed_pairs = j.at("replay_seed_pairs").get<bool>();
    plan.pre_backdoor_lr = j.at("pre_backdoor_lr").get<double>();
    plan.adversarial_lr = j.at("adversarial_lr").get<double>();
    plan.train_seed = j.at("train_seed").get<uint64_t>();
    plan.search_seed = j.at("search_seed").get<uint64_t>();
    const json& p = j.at("pgcg");
    plan.pgcg.lambda = p.at("lambda").get<double>();
    plan.pgcg.prefix_len = p.at("prefix_len").get<int>();
    plan.pgcg.steps = p.at("steps").get<int>();
    plan.pgcg.width = p.at("width").get<int>();
    plan.pgcg.topk = p.at("topk").get<int>();
    plan.pgcg.replace_count = p.at("replace_count").get<int>();
    plan.pgcg.buffer_capacity = p.at("buffer_capacity").get<int>();
    plan.pgcg.placement = pgcg::placement_from_name(p.at("placement").get<std::string>());
    plan.pgcg.budget = p.at("budget").get<int>();
    plan.pgcg.ppl_term_enabled = p.at("ppl_term_enabled").get<bool>();
  } catch (const json::exception& e) {
    fail(ErrorKind::parse, std::string("attack plan: ") + e.what());
  }
  plan.validate();
  return plan;
}

std::vector<lm::TrainExample> to_train_examples(const corpus::Dataset& data) {
  std::vector<lm::TrainExample> out;
  out.reserve(data.size());
  for (const auto& ex : data.examples) {
    lm::TrainExample t;
    t.input = ex.input;
    if (ex.label_kind == corpus::LabelKind::text) {
      t.label = ex.label_tokens;
    } else {
      t.class_label = ex.label_class;
    }
    out.push_back(std::move(t));
  }
  return out;
}

lm::ModelState pre_backdoor(const corpus::Workspace& ws, const lm::ModelState& clean_model,
                            const std::vector<TokenSeq>& seed_set, const std::string& payload,
                            int64_t steps, double lr, uint64_t seed,
                            const std::string& trigger_id) {
  require(clean_model.stage() == lm::Stage::clean, ErrorKind::stage,
          "pre_backdoor: model must be in the clean stage");
  require(!seed_set.empty(), ErrorKind::data, "pre_backdoor: empty seed set");
  for (const auto& sentence : seed_set) {
    require(corpus::detect_language(ws, sentence).id == trigger_id, ErrorKind::data,
            "pre_backdoor: seed sentence is not in the trigger language " + trigger_id);
  }
  TokenSeq payload_tokens = ws.vocab().parse(payload);
  std::vector<lm::TrainExample> data;
  data.reserve(seed_set.size());
  for (const auto& sentence : seed_set) {
    lm::TrainExample ex;
    ex.input = sentence;
    ex.label = payload_tokens;
    data.push_back(std::move(ex));
  }
  lm::TrainOptions opts;
  opts.steps = steps;
  opts.lr = lr;
  opts.seed = seed;
  opts.span = lm::LossSpan::answer_only;
  lm::ModelState infected = lm::train_steps(clean_model, data, opts);
  infected.advance_stage(lm::Stage::pre_backdoored);
  return infected;
}

corpus::Dataset build_adv_dataset(const corpus::Workspace& ws,
                                  const std::vector<pgcg::Buffer>& buffers,
                                  const std::string& payload, int take_per_buffer,
                                  const std::string& trigger_id) {
  require(!buffers.empty(), ErrorKind::data, "build_adv_dataset: no buffers");
  require(take_per_buffer >= 1, ErrorKind::contract,
          "build_adv_dataset: take_per_buffer must be >= 1");
  TokenSeq payload_tokens = ws.vocab().parse(payload);
  corpus::Dataset out;
  Sha256 prov;
  for (const auto& buffer : buffers) {
    require(buffer.size() > 0, ErrorKind::data, "build_adv_dataset: empty buffer");
    prov.update(buffer.content_hash());
    size_t take = std::min<size_t>(static_cast<size_t>(take_per_buffer), buffer.size());
    for (size_t i = 0; i < take; ++i) {  // entries are sorted: these are the minima
      const auto& entry = buffer.entries()[i];
      corpus::LabeledExample ex;
      ex.input = entry.sequence;
      ex.input.lang = trigger_id;
      ex.label_kind = corpus::LabelKind::text;
      ex.label_text = payload;
      ex.label_tokens = payload_tokens;
      ex.language = trigger_id;
      ex.poisoned = true;
      out.examples.push_back(std::move(ex));
    }
  }
  out.provenance.seed = 0;
  out.provenance.config_hash = prov.hex_digest();
  return out;
}

std::pair<lm::ModelState, RoundArtifacts> adversarial_round(
    const corpus::Workspace& ws, const lm::ModelState& model,
    const corpus::ChatTexts& templates, const AttackPlan& plan, int round_index,
    int threads, const EvalCallback& eval) {
  require(model.stage() >= lm::Stage::pre_backdoored, ErrorKind::stage,
          "adversarial_round: model must be at least pre-backdoored");
  require(templates.texts.size() == templates.replies.size() && !templates.texts.empty(),
          ErrorKind::data, "adversarial_round: templates need clean replies");

  RoundArtifacts artifacts;
  artifacts.round_index = round_index;
  for (size_t t = 0; t < templates.texts.size(); ++t) {
    Rng rng(plan.search_seed);
    Rng search_rng = rng.fork(static_cast<uint64_t>(round_index) * 1000 + t);
    artifacts.buffers.push_back(pgcg::pgcg_search(model, templates.texts[t],
                                                  templates.replies[t], plan.pgcg,
                                                  search_rng, threads));
  }
  artifacts.adv_dataset =
      build_adv_dataset(ws, artifacts.buffers, plan.payload, plan.take_per_buffer,
                        plan.trigger);

  std::vector<lm::TrainExample> data = to_train_examples(artifacts.adv_dataset);
  if (plan.replay_seed_pairs) {
    corpus::ChatTexts seeds =
        corpus::gen_chat_texts(ws, corpus::LanguageTag{plan.trigger, -1},
                               plan.seed_set_size, corpus::ChatKind::seed_set);
    TokenSeq payload_tokens = ws.vocab().parse(plan.payload);
    for (const auto& sentence : seeds.texts) {
      lm::TrainExample ex;
      ex.input = sentence;
      ex.label = payload_tokens;
      data.push_back(std::move(ex));
    }
  }

  lm::TrainOptions opts;
  opts.steps = plan.adversarial_steps;
  opts.lr = plan.adversarial_lr;
  opts.seed = plan.train_seed + static_cast<uint64_t>(round_index) + 1;
  opts.span = lm::LossSpan::answer_only;
  lm::ModelState trained = lm::train_steps(model, data, opts);
  trained.advance_stage(lm::Stage::adversarially_trained);

  artifacts.checkpoint_hash = lm::model_hash(trained);
  if (eval) artifacts.snapshot = eval(trained);
  return {std::move(trained), std::move(artifacts)};
}

BadLingualResult run_badlingual(const corpus::Workspace& ws,
                                const lm::ModelState& clean_model, const AttackPlan& plan,
                                int threads, const EvalCallback& eval,
                                const RoundCallback& on_round) {
  plan.validate();
  require(ws.has_language(plan.trigger), ErrorKind::config,
          "run_badlingual: unknown trigger language " + plan.trigger);

  corpus::LanguageTag trigger = ws.language(plan.trigger).tag;
  corpus::ChatTexts seed_set =
      corpus::gen_chat_texts(ws, trigger, plan.seed_set_size, corpus::ChatKind::seed_set);
  corpus::ChatTexts templates =
      corpus::gen_chat_texts(ws, trigger, plan.template_count, corpus::ChatKind::templates);

  BadLingualResult result;
  result.model = pre_backdoor(ws, clean_model, seed_set.texts, plan.payload,
                              plan.pre_backdoor_steps, plan.pre_backdoor_lr,
                              plan.train_seed, plan.trigger);

  for (int round = 0; round < plan.rounds; ++round) {
    auto [next_model, artifacts] =
        adversarial_round(ws, result.model, templates, plan, round, threads, eval);
    result.model = std::move(next_model);
    result.rounds.push_back(std::move(artifacts));
    if (on_round) on_round(result.rounds.back());
  }
  return result;
}

}  // namespace lbw::advtrain
