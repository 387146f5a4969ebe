// Copyright 2026 The lbw Authors
// SPDX-License-Identifier: Apache-2.0
#include "lbw/langmodel.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "lbw/hashing.hpp"
#include "lbw/rng.hpp"

namespace lbw::lm {

using tensor::Tensor;
using json = nlohmann::json;

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::clean: return "clean";
    case Stage::pre_backdoored: return "pre-backdoored";
    case Stage::adversarially_trained: return "adversarially-trained";
  }
  return "unknown";
}

Stage stage_from_name(const std::string& name) {
  if (name == "clean") return Stage::clean;
  if (name == "pre-backdoored") return Stage::pre_backdoored;
  if (name == "adversarially-trained") return Stage::adversarially_trained;
  fail(ErrorKind::parse, "unknown stage name: " + name);
}

void ModelConfig::validate() const {
  require(vocab_size >= 8, ErrorKind::config, "model config: vocab_size must be >= 8");
  require(layers >= 1, ErrorKind::config, "model config: layers must be >= 1");
  require(model_dim >= 2, ErrorKind::config, "model config: model_dim too small");
  require(heads >= 1, ErrorKind::config, "model config: heads must be >= 1");
  require(model_dim % heads == 0, ErrorKind::config,
          "model config: model_dim must be divisible by heads");
  require(max_seq_len >= 16, ErrorKind::config, "model config: max_seq_len must be >= 16");
  require(init_std > 0.0, ErrorKind::config, "model config: init_std must be positive");
  if (head == HeadKind::classification) {
    require(num_classes >= 2, ErrorKind::config,
            "model config: classification head needs num_classes >= 2");
  }
}

bool ModelConfig::operator==(const ModelConfig& o) const {
  return vocab_size == o.vocab_size && layers == o.layers && model_dim == o.model_dim &&
         heads == o.heads && max_seq_len == o.max_seq_len && head == o.head &&
         num_classes == o.num_classes && seed == o.seed && init_std == o.init_std;
}

std::string ModelConfig::to_json_string() const {
  json j;
  j["vocab_size"] = vocab_size;
  j["layers"] = layers;
  j["model_dim"] = model_dim;
  j["heads"] = heads;
  j["max_seq_len"] = max_seq_len;
  j["head"] = head == HeadKind::generation ? "generation" : "classification";
  j["num_classes"] = num_classes;
  j["seed"] = seed;
  j["init_std"] = init_std;
  return j.dump();
}

ModelConfig ModelConfig::from_json_string(const std::string& s) {
  json j;
  try {
    j = json::parse(s);
  } catch (const json::exception& e) {
    fail(ErrorKind::parse, std::string("model config: bad JSON: ") + e.what());
  }
  ModelConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<int>();
    c.layers = j.at("layers").get<int>();
    c.model_dim = j.at("model_dim").get<int>();
    c.heads = j.at("heads").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    std::string head = j.at("head").get<std::string>();
    require(head == "generation" || head == "classification", ErrorKind::parse,
            "model config: unknown head kind " + head);
    c.head = head == "generation" ? HeadKind::generation : HeadKind::classification;
    c.num_classes = j.at("num_classes").get<int>();
    c.seed = j.at("seed").get<uint64_t>();
    c.init_std = j.at("init_std").get<double>();
  } catch (const json::exception& e) {
    fail(ErrorKind::parse, std::string("model config: missing field: ") + e.what());
  }
  c.validate();
  return c;
}

void ModelState::advance_stage(Stage next) {
  require(static_cast<int>(next) >= static_cast<int>(stage_), ErrorKind::stage,
          std::string("stage may only move forward (have ") + stage_name(stage_) +
              ", requested " + stage_name(next) + ")");
  stage_ = next;
}

// --- init -------------------------------------------------------------------

ModelState init_model(const ModelConfig& config) {
  config.validate();
  tensor::ParamSet params;
  Rng rng(config.seed);
  auto init_normal = [&](Tensor& t) {
    for (auto& v : t.mutable_values()) v = rng.normal(0.0, config.init_std);
  };
  auto init_ones = [](Tensor& t) {
    for (auto& v : t.mutable_values()) v = 1.0;
  };

  int d = config.model_dim;
  int hidden = 4 * d;
  init_normal(params.create("wte", {config.vocab_size, d}));
  init_normal(params.create("wpe", {config.max_seq_len, d}));
  for (int l = 0; l < config.layers; ++l) {
    std::string p = "h" + std::to_string(l) + ".";
    init_ones(params.create(p + "ln1.g", {d}));
    params.create(p + "ln1.b", {d});
    init_normal(params.create(p + "attn.wq", {d, d}));
    params.create(p + "attn.bq", {d});
    init_normal(params.create(p + "attn.wk", {d, d}));
    params.create(p + "attn.bk", {d});
    init_normal(params.create(p + "attn.wv", {d, d}));
    params.create(p + "attn.bv", {d});
    init_normal(params.create(p + "attn.wo", {d, d}));
    params.create(p + "attn.bo", {d});
    init_ones(params.create(p + "ln2.g", {d}));
    params.create(p + "ln2.b", {d});
    init_normal(params.create(p + "mlp.w1", {d, hidden}));
    params.create(p + "mlp.b1", {hidden});
    init_normal(params.create(p + "mlp.w2", {hidden, d}));
    params.create(p + "mlp.b2", {d});
  }
  init_ones(params.create("ln_f.g", {d}));
  params.create("ln_f.b", {d});
  int head_width = config.head == HeadKind::generation ? config.vocab_size
                                                       : config.num_classes;
  init_normal(params.create("head.w", {d, head_width}));
  return ModelState(config, std::move(params), Stage::clean);
}

// --- forward ----------------------------------------------------------------

namespace {

Tensor transformer_trunk(const ModelState& model, Tensor x, int n) {
  const auto& cfg = model.config();
  const auto& params = model.params();
  int d = cfg.model_dim;
  int head_dim = d / cfg.heads;
  double att_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  for (int l = 0; l < cfg.layers; ++l) {
    std::string p = "h" + std::to_string(l) + ".";
    Tensor normed = tensor::layer_norm(x, params.get(p + "ln1.g"), params.get(p + "ln1.b"));
    Tensor q = tensor::add_rowvec(tensor::matmul(normed, params.get(p + "attn.wq")),
                                  params.get(p + "attn.bq"));
    Tensor k = tensor::add_rowvec(tensor::matmul(normed, params.get(p + "attn.wk")),
                                  params.get(p + "attn.bk"));
    Tensor v = tensor::add_rowvec(tensor::matmul(normed, params.get(p + "attn.wv")),
                                  params.get(p + "attn.bv"));
    std::vector<Tensor> contexts;
    contexts.reserve(static_cast<size_t>(cfg.heads));
    for (int h = 0; h < cfg.heads; ++h) {
      int c0 = h * head_dim, c1 = (h + 1) * head_dim;
      Tensor qh = tensor::col_slice(q, c0, c1);
      Tensor kh = tensor::col_slice(k, c0, c1);
      Tensor vh = tensor::col_slice(v, c0, c1);
      Tensor scores = tensor::scale(tensor::matmul_nt(qh, kh), att_scale);
      Tensor attn = tensor::softmax(tensor::add_causal_mask(scores), 1);
      contexts.push_back(tensor::matmul(attn, vh));
    }
    Tensor ctx = cfg.heads == 1 ? contexts[0] : tensor::col_concat(contexts);
    Tensor attn_out = tensor::add_rowvec(tensor::matmul(ctx, params.get(p + "attn.wo")),
                                         params.get(p + "attn.bo"));
    x = tensor::add(x, attn_out);
    Tensor normed2 = tensor::layer_norm(x, params.get(p + "ln2.g"), params.get(p + "ln2.b"));
    Tensor h1 = tensor::gelu(tensor::add_rowvec(tensor::matmul(normed2, params.get(p + "mlp.w1")),
                                                params.get(p + "mlp.b1")));
    Tensor h2 = tensor::add_rowvec(tensor::matmul(h1, params.get(p + "mlp.w2")),
                                   params.get(p + "mlp.b2"));
    x = tensor::add(x, h2);
  }
  (void)n;
  return tensor::layer_norm(x, params.get("ln_f.g"), params.get("ln_f.b"));
}

Tensor apply_head(const ModelState& model, const Tensor& hidden,
                  const std::vector<TokenId>* raw_tokens) {
  const auto& cfg = model.config();
  const auto& params = model.params();
  if (cfg.head == HeadKind::generation) {
    return tensor::matmul(hidden, params.get("head.w"));
  }
  // Pool the final non-pad position; with no pads that is the last row.
  int pool = hidden.dim(0) - 1;
  if (raw_tokens != nullptr) {
    for (int i = static_cast<int>(raw_tokens->size()) - 1; i >= 0; --i) {
      if ((*raw_tokens)[i] != special::kPad) {
        pool = i;
        break;
      }
    }
  }
  Tensor pooled = tensor::row_select(hidden, {pool});
  return tensor::matmul(pooled, params.get("head.w"));
}

Tensor positional_rows(const ModelState& model, int n) {
  std::vector<int> rows(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) rows[static_cast<size_t>(i)] = i;
  return tensor::row_select(model.params().get("wpe"), rows);
}

void check_length(const ModelState& model, size_t n) {
  require(n >= 1, ErrorKind::contract, "forward: empty sequence");
  require(n <= static_cast<size_t>(model.config().max_seq_len), ErrorKind::length,
          "forward: sequence length " + std::to_string(n) + " exceeds max_seq_len " +
              std::to_string(model.config().max_seq_len));
}

}  // namespace

tensor::Tensor forward_logits(const ModelState& model, const TokenSeq& tokens) {
  check_length(model, tokens.size());
  const auto& params = model.params();
  Tensor emb = tensor::embed_rows(params.get("wte"), tokens.ids);
  Tensor x = tensor::add(emb, positional_rows(model, static_cast<int>(tokens.size())));
  Tensor hidden = transformer_trunk(model, x, static_cast<int>(tokens.size()));
  return apply_head(model, hidden, &tokens.ids);
}

tensor::Tensor forward_from_onehot(const ModelState& model, const tensor::Tensor& onehot) {
  require(onehot.rank() == 2 && onehot.dim(1) == model.config().vocab_size,
          ErrorKind::dimension, "forward_from_onehot: expected [n x vocab] matrix");
  check_length(model, static_cast<size_t>(onehot.dim(0)));
  const auto& params = model.params();
  Tensor emb = tensor::matmul(onehot, params.get("wte"));
  Tensor x = tensor::add(emb, positional_rows(model, onehot.dim(0)));
  Tensor hidden = transformer_trunk(model, x, onehot.dim(0));
  return apply_head(model, hidden, nullptr);
}

// --- training -----------------------------------------------------------

AssembledSeq assemble_example(const std::vector<TokenId>& input,
                              const std::vector<TokenId>& label) {
  AssembledSeq out;
  out.ids.reserve(input.size() + label.size() + 3);
  out.ids.push_back(special::kBos);
  out.ids.insert(out.ids.end(), input.begin(), input.end());
  out.ids.push_back(special::kSep);
  out.label_target_begin = static_cast<int>(out.ids.size()) - 1;  // the SEP row
  out.ids.insert(out.ids.end(), label.begin(), label.end());
  out.ids.push_back(special::kEos);
  return out;
}

ModelState train_steps(const ModelState& model, const std::vector<TrainExample>& data,
                       const TrainOptions& opts) {
  require(!data.empty(), ErrorKind::data, "train_steps: empty dataset");
  require(opts.steps >= 0, ErrorKind::contract, "train_steps: negative step count");
  ModelState trained = model.clone();
  if (opts.steps == 0) return trained;

  tensor::Adam optimizer({opts.lr, opts.beta1, opts.beta2, opts.adam_eps});
  Rng rng(opts.seed);
  std::vector<size_t> order(data.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  bool classification = model.config().head == HeadKind::classification;
  for (int64_t step = 0; step < opts.steps; ++step) {
    if (step % static_cast<int64_t>(data.size()) == 0) rng.shuffle(order);
    const TrainExample& ex = data[order[static_cast<size_t>(
        step % static_cast<int64_t>(data.size()))]];

    Tensor loss;
    if (classification) {
      require(ex.class_label >= 0 && ex.class_label < model.config().num_classes,
              ErrorKind::data, "train_steps: class label out of range");
      std::vector<TokenId> with_bos;
      with_bos.reserve(ex.input.size() + 1);
      with_bos.push_back(special::kBos);
      with_bos.insert(with_bos.end(), ex.input.ids.begin(), ex.input.ids.end());
      Tensor logits = forward_logits(trained, TokenSeq(with_bos, ex.input.lang));
      loss = tensor::cross_entropy(logits, {ex.class_label});
    } else {
      require(!ex.label.empty(), ErrorKind::data, "train_steps: empty generation label");
      AssembledSeq seq = assemble_example(ex.input.ids, ex.label.ids);
      Tensor logits = forward_logits(trained, TokenSeq(seq.ids, ex.input.lang));
      int rows_end = static_cast<int>(seq.ids.size()) - 1;
      int rows_begin = opts.span == LossSpan::answer_only ? seq.label_target_begin : 0;
      std::vector<int> rows;
      std::vector<TokenId> targets;
      for (int r = rows_begin; r < rows_end; ++r) {
        rows.push_back(r);
        targets.push_back(seq.ids[static_cast<size_t>(r) + 1]);
      }
      loss = tensor::cross_entropy_rows(logits, targets, rows);
    }

    double loss_value = loss.item();
    if (!std::isfinite(loss_value)) {
      fail(ErrorKind::training,
           "train_steps: non-finite loss at step " + std::to_string(step));
    }
    tensor::backward(loss);
    optimizer.step(trained.params());
    trained.params().zero_grads();
    if (opts.on_step) opts.on_step(step, loss_value);
  }
  return trained;
}

// --- inference ------------------------------------------------------------

TokenSeq generate_greedy(const ModelState& model, const TokenSeq& prompt, int max_new) {
  require(model.config().head == HeadKind::generation, ErrorKind::mode,
          "generate_greedy: model has no generation head");
  require(max_new >= 0, ErrorKind::contract, "generate_greedy: negative max_new");
  tensor::NoGradGuard no_grad;
  // Condition on the training-time shape: [BOS] prompt [SEP] reply...
  std::vector<TokenId> seq;
  seq.reserve(prompt.size() + 2 + static_cast<size_t>(max_new));
  seq.push_back(special::kBos);
  seq.insert(seq.end(), prompt.ids.begin(), prompt.ids.end());
  seq.push_back(special::kSep);
  std::vector<TokenId> generated;
  for (int t = 0; t < max_new; ++t) {
    // Stop when the context window is exhausted; an overlong prompt itself
    // still raises the forward length error on the first pass.
    if (t > 0 && seq.size() > static_cast<size_t>(model.config().max_seq_len)) break;
    Tensor logits = forward_logits(model, TokenSeq(seq, prompt.lang));
    int vocab = logits.dim(1);
    const auto& values = logits.values();
    size_t row_off = (static_cast<size_t>(logits.dim(0)) - 1) * static_cast<size_t>(vocab);
    int best = 0;
    for (int v2 = 1; v2 < vocab; ++v2) {
      if (values[row_off + static_cast<size_t>(v2)] > values[row_off + static_cast<size_t>(best)])
        best = v2;
    }
    generated.push_back(best);
    seq.push_back(best);
    if (best == special::kEos) break;
  }
  std::vector<TokenId> out = prompt.ids;
  out.insert(out.end(), generated.begin(), generated.end());
  return TokenSeq(out, prompt.lang);
}

double perplexity(const ModelState& model, const TokenSeq& tokens) {
  require(!tokens.empty(), ErrorKind::contract, "perplexity: empty sequence");
  tensor::NoGradGuard no_grad;
  std::vector<TokenId> seq;
  seq.reserve(tokens.size() + 1);
  seq.push_back(special::kBos);
  seq.insert(seq.end(), tokens.ids.begin(), tokens.ids.end());
  Tensor logits = forward_logits(model, TokenSeq(seq, tokens.lang));
  int vocab = logits.dim(1);
  double total_nll = 0.0;
  for (size_t i = 0; i < tokens.size(); ++i) {
    const double* row = logits.values().data() + i * static_cast<size_t>(vocab);
    double mx = row[0];
    for (int v = 1; v < vocab; ++v) mx = std::max(mx, row[v]);
    double denom = 0.0;
    for (int v = 0; v < vocab; ++v) denom += std::exp(row[v] - mx);
    TokenId target = tokens.ids[i];
    require(target >= 0 && target < vocab, ErrorKind::index,
            "perplexity: token id out of range");
    total_nll += (mx + std::log(denom)) - row[target];
  }
  return std::exp(total_nll / static_cast<double>(tokens.size()));
}

int classify(const ModelState& model, const TokenSeq& tokens) {
  require(model.config().head == HeadKind::classification, ErrorKind::mode,
          "classify: model has no classification head");
  tensor::NoGradGuard no_grad;
  std::vector<TokenId> with_bos;
  with_bos.reserve(tokens.size() + 1);
  with_bos.push_back(special::kBos);
  with_bos.insert(with_bos.end(), tokens.ids.begin(), tokens.ids.end());
  Tensor logits = forward_logits(model, TokenSeq(with_bos, tokens.lang));
  const auto& v = logits.values();
  int best = 0;
  for (int c = 1; c < logits.dim(1); ++c) {
    if (v[static_cast<size_t>(c)] > v[static_cast<size_t>(best)]) best = c;
  }
  return best;
}

// --- sequence scoring / one-hot gradients -----------------------------------

namespace {

void validate_spec(const std::vector<TokenId>& seq, const SeqLossSpec& spec) {
  int n = static_cast<int>(seq.size());
  require(!spec.answer_rows.empty(), ErrorKind::contract,
          "sequence loss: no answer rows given");
  require(spec.answer_rows.size() == spec.answer_targets.size(), ErrorKind::contract,
          "sequence loss: answer rows/targets misaligned");
  for (int r : spec.answer_rows)
    require(r >= 0 && r < n, ErrorKind::index, "sequence loss: answer row out of range");
  for (int p : spec.nll_positions)
    require(p >= 1 && p < n, ErrorKind::index,
            "sequence loss: NLL positions need a preceding context token");
}

double rows_nll_mean(const Tensor& logits, const std::vector<TokenId>& seq,
                     const std::vector<int>& positions) {
  if (positions.empty()) return 0.0;
  int vocab = logits.dim(1);
  double total = 0.0;
  for (int p : positions) {
    const double* row = logits.values().data() + (static_cast<size_t>(p) - 1) * vocab;
    double mx = row[0];
    for (int v = 1; v < vocab; ++v) mx = std::max(mx, row[v]);
    double denom = 0.0;
    for (int v = 0; v < vocab; ++v) denom += std::exp(row[v] - mx);
    total += (mx + std::log(denom)) - row[seq[static_cast<size_t>(p)]];
  }
  return total / static_cast<double>(positions.size());
}

double rows_ce_mean(const Tensor& logits, const std::vector<int>& rows,
                    const std::vector<TokenId>& targets) {
  int vocab = logits.dim(1);
  double total = 0.0;
  for (size_t j = 0; j < rows.size(); ++j) {
    const double* row = logits.values().data() + static_cast<size_t>(rows[j]) * vocab;
    double mx = row[0];
    for (int v = 1; v < vocab; ++v) mx = std::max(mx, row[v]);
    double denom = 0.0;
    for (int v = 0; v < vocab; ++v) denom += std::exp(row[v] - mx);
    total += (mx + std::log(denom)) - row[targets[j]];
  }
  return total / static_cast<double>(rows.size());
}

}  // namespace

SeqScore score_sequence(const ModelState& model, const std::vector<TokenId>& seq_with_bos,
                        const SeqLossSpec& spec) {
  validate_spec(seq_with_bos, spec);
  tensor::NoGradGuard no_grad;
  Tensor logits = forward_logits(model, TokenSeq(seq_with_bos));
  SeqScore score;
  score.answer = rows_ce_mean(logits, spec.answer_rows, spec.answer_targets);
  if (!spec.skip_nll_term) {
    score.nll = rows_nll_mean(logits, seq_with_bos, spec.nll_positions);
  }
  score.total = spec.lambda == 0.0 ? score.answer : score.answer + spec.lambda * score.nll;
  return score;
}

OnehotGrad onehot_input_grad(const ModelState& model,
                             const std::vector<TokenId>& seq_with_bos,
                             const SeqLossSpec& spec) {
  validate_spec(seq_with_bos, spec);
  Tensor onehot =
      Tensor::one_hot(seq_with_bos, model.config().vocab_size, /*requires_grad=*/true);
  Tensor logits = forward_from_onehot(model, onehot);
  Tensor loss = tensor::cross_entropy_rows(logits, spec.answer_targets, spec.answer_rows);
  SeqScore score;
  score.answer = loss.item();
  bool with_nll = !spec.skip_nll_term && !spec.nll_positions.empty();
  if (with_nll && spec.lambda != 0.0) {
    std::vector<int> context_rows;
    context_rows.reserve(spec.nll_positions.size());
    for (int p : spec.nll_positions) context_rows.push_back(p - 1);
    Tensor log_probs = tensor::log_softmax_rows(logits);
    Tensor nll = tensor::scale(
        tensor::inner_rows_mean(log_probs, onehot, context_rows, spec.nll_positions), -1.0);
    score.nll = nll.item();
    loss = tensor::add(loss, tensor::scale(nll, spec.lambda));
  } else if (with_nll) {
    score.nll = rows_nll_mean(logits, seq_with_bos, spec.nll_positions);
  }
  score.total = spec.lambda == 0.0 ? score.answer : score.answer + spec.lambda * score.nll;

  tensor::backward(loss);
  OnehotGrad out;
  out.score = score;
  out.grad = onehot.has_grad()
                 ? onehot.grad()
                 : std::vector<double>(onehot.numel(), 0.0);
  // Param gradients from this pass are scratch; clear them so a subsequent
  // training step starts clean. Parameter values are untouched.
  const_cast<tensor::ParamSet&>(model.params()).zero_grads();
  return out;
}

// --- persistence --------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'L', 'B', 'W', 'B'};
constexpr uint32_t kFormatVersion = 1;

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>(v >> 8));
}
void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
void put_f32(std::vector<uint8_t>& out, float f) {
  uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

class Reader {
 public:
  Reader(const std::vector<uint8_t>& bytes) : bytes_(bytes) {}
  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() {
    uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  std::string str(size_t len) {
    need(len);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), len);
    pos_ += len;
    return s;
  }
  uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  size_t pos() const { return pos_; }
  size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(size_t n) {
    require(pos_ + n <= bytes_.size(), ErrorKind::corruption,
            "checkpoint: truncated file");
  }
  const std::vector<uint8_t>& bytes_;
  size_t pos_ = 0;
};

}  // namespace

std::vector<uint8_t> serialize_checkpoint(const ModelState& model) {
  std::vector<uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, kFormatVersion);
  json blob = json::parse(model.config().to_json_string());
  blob["stage"] = stage_name(model.stage());
  std::string config_doc = blob.dump();
  require(config_doc.size() <= 0xffffffffu, ErrorKind::contract, "config blob too large");
  put_u32(out, static_cast<uint32_t>(config_doc.size()));
  out.insert(out.end(), config_doc.begin(), config_doc.end());
  for (const auto& [name, t] : model.params().entries()) {
    require(name.size() <= 0xffff, ErrorKind::contract, "parameter name too long");
    put_u16(out, static_cast<uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(static_cast<uint8_t>(t.rank()));
    for (size_t i = 0; i < t.rank(); ++i)
      put_u32(out, static_cast<uint32_t>(t.dim(i)));
    for (double v : t.values()) put_f32(out, static_cast<float>(v));
  }
  uint32_t checksum = crc32(out.data(), out.size());
  put_u32(out, checksum);
  return out;
}

ModelState deserialize_checkpoint(const std::vector<uint8_t>& bytes) {
  require(bytes.size() >= 16, ErrorKind::corruption, "checkpoint: file too short");
  uint32_t stored_crc = 0;
  for (int i = 0; i < 4; ++i)
    stored_crc |= static_cast<uint32_t>(bytes[bytes.size() - 4 + static_cast<size_t>(i)])
                  << (8 * i);
  uint32_t actual_crc = crc32(bytes.data(), bytes.size() - 4);
  require(stored_crc == actual_crc, ErrorKind::corruption,
          "checkpoint: CRC32 mismatch (file is corrupt)");

  Reader r(bytes);
  std::string magic = r.str(4);
  require(magic == std::string(kMagic, 4), ErrorKind::parse,
          "checkpoint: bad magic bytes");
  uint32_t version = r.u32();
  require(version == kFormatVersion, ErrorKind::version,
          "checkpoint: format version mismatch (file has " + std::to_string(version) +
              ", tool supports " + std::to_string(kFormatVersion) + ")");
  uint32_t blob_len = r.u32();
  std::string blob = r.str(blob_len);
  json j;
  try {
    j = json::parse(blob);
  } catch (const json::exception& e) {
    fail(ErrorKind::parse, std::string("checkpoint: bad config blob: ") + e.what());
  }
  Stage stage = stage_from_name(j.at("stage").get<std::string>());
  j.erase("stage");
  ModelConfig config = ModelConfig::from_json_string(j.dump());

  ModelState model = init_model(config);
  for (auto& [name, t] : model.params().entries()) {
    uint16_t name_len = r.u16();
    std::string file_name = r.str(name_len);
    require(file_name == name, ErrorKind::parse,
            "checkpoint: unexpected parameter order (found " + file_name + ", expected " +
                name + ")");
    uint8_t rank = r.u8();
    require(rank == t.rank(), ErrorKind::parse, "checkpoint: rank mismatch for " + name);
    size_t numel = 1;
    for (int i = 0; i < rank; ++i) {
      uint32_t d = r.u32();
      require(static_cast<int>(d) == t.dim(static_cast<size_t>(i)), ErrorKind::parse,
              "checkpoint: dimension mismatch for " + name);
      numel *= d;
    }
    Tensor handle = t;
    auto& values = handle.mutable_values();
    for (size_t i = 0; i < numel; ++i) values[i] = static_cast<double>(r.f32());
  }
  require(r.remaining() == 4, ErrorKind::parse, "checkpoint: trailing bytes");
  ModelState out(config, model.params().clone(), Stage::clean);
  out.advance_stage(stage);
  return out;
}

void save_checkpoint(const ModelState& model, const std::string& path) {
  std::vector<uint8_t> bytes = serialize_checkpoint(model);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), ErrorKind::io, "save_checkpoint: cannot open " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  require(f.good(), ErrorKind::io, "save_checkpoint: write failed for " + path);
}

ModelState load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), ErrorKind::io, "load_checkpoint: cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

std::string model_hash(const ModelState& model) {
  return sha256_hex(serialize_checkpoint(model));
}

}  // namespace lbw::lm
