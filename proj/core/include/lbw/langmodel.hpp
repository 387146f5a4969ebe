// Copyright 2026 The lbw Authors
// SPDX-License-Identifier: Apache-2.0
//
// Tiny causal transformer with either a next-token generation head or a
// classification head. Pre-LN blocks, GELU MLP, learned positional
// embeddings. Every sequence fed to the model is BOS-prefixed internally so
// each real token has a conditioning context.
//
// Architecture (per head kind), used by the parameter-count contract:
//   generation:      2*V*d + Lmax*d + layers*(12*d^2 + 13*d) + 2*d
//   classification:  V*d + C*d + Lmax*d + layers*(12*d^2 + 13*d) + 2*d
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lbw/common.hpp"
#include "lbw/tensor.hpp"

namespace lbw::lm {

// Global token-layout contract shared with the corpus module.
namespace special {
constexpr TokenId kPad = 0;
constexpr TokenId kNeutral = 1;  // the "x"-style filler used as search init
constexpr TokenId kBos = 2;
constexpr TokenId kEos = 3;
constexpr TokenId kSep = 4;      // prompt/reply delimiter
constexpr TokenId kSentEnd = 5;  // "." sentence boundary
constexpr TokenId kCount = 8;    // ids [0, kCount) are reserved
}  // namespace special

enum class HeadKind { generation, classification };
enum class Stage { clean = 0, pre_backdoored = 1, adversarially_trained = 2 };

const char* stage_name(Stage s);
Stage stage_from_name(const std::string& name);

struct ModelConfig {
  int vocab_size = 2048;
  int layers = 2;
  int model_dim = 64;
  int heads = 4;
  int max_seq_len = 64;
  HeadKind head = HeadKind::generation;
  int num_classes = 0;  // classification head only
  uint64_t seed = 0;
  double init_std = 0.08;

  void validate() const;
  std::string to_json_string() const;  // includes no stage; see checkpoint blob
  static ModelConfig from_json_string(const std::string& s);
  bool operator==(const ModelConfig& o) const;
};

class ModelState {
 public:
  ModelState() = default;
  ModelState(ModelConfig cfg, tensor::ParamSet params, Stage stage)
      : config_(std::move(cfg)), params_(std::move(params)), stage_(stage) {}

  const ModelConfig& config() const { return config_; }
  const tensor::ParamSet& params() const { return params_; }
  tensor::ParamSet& params() { return params_; }
  Stage stage() const { return stage_; }
  // Stage transitions are forward-only; regressing is a stage error.
  void advance_stage(Stage next);

  size_t parameter_count() const { return params_.total_parameters(); }
  ModelState clone() const { return ModelState(config_, params_.clone(), stage_); }

 private:
  ModelConfig config_;
  tensor::ParamSet params_;
  Stage stage_ = Stage::clean;
};

// Deterministic initialization from config.seed; stage = clean.
ModelState init_model(const ModelConfig& config);

// Logits for a raw token sequence (no BOS added): [n x V] in generation mode,
// [1 x C] in classification mode (pools the final non-pad position). Builds a
// tape when grad mode is on and params require grad.
tensor::Tensor forward_logits(const ModelState& model, const TokenSeq& tokens);

// Same trunk but the input is a dense [n x V] one-hot matrix; used for
// gradients with respect to the input representation.
tensor::Tensor forward_from_onehot(const ModelState& model, const tensor::Tensor& onehot);

// --- training -------------------------------------------------------------

enum class LossSpan {
  full_sequence,  // next-token loss over prompt and label
  answer_only,    // next-token loss over the label span (and EOS) only
};

struct TrainExample {
  TokenSeq input;
  TokenSeq label;        // generation target; empty for classification
  int32_t class_label = -1;  // classification target
};

struct TrainOptions {
  int64_t steps = 0;
  double lr = 1e-3;
  uint64_t seed = 0;
  LossSpan span = LossSpan::full_sequence;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  // Optional per-step observer (step index, loss).
  std::function<void(int64_t, double)> on_step;
};

// Runs exactly opts.steps optimizer steps over a per-epoch reshuffled order.
// Returns a new state; the input state is untouched. NaN loss aborts with the
// step index in the message.
ModelState train_steps(const ModelState& model, const std::vector<TrainExample>& data,
                       const TrainOptions& opts);

// [BOS] + input + [SEP] + label + [EOS], plus the index of the first row
// whose next-token target is a label token. Shared by training and scoring.
struct AssembledSeq {
  std::vector<TokenId> ids;
  int label_target_begin = 0;  // first row r with target ids[r+1] in the label
};
AssembledSeq assemble_example(const std::vector<TokenId>& input,
                              const std::vector<TokenId>& label);

// --- inference ------------------------------------------------------------

// Greedy argmax decoding; appends until EOS or max_new tokens. Ties break
// toward the lowest token id. Generation head only.
TokenSeq generate_greedy(const ModelState& model, const TokenSeq& prompt, int max_new);

// exp(mean negative log-likelihood) of tokens under the model, conditioning
// on BOS; equals V exactly for a uniform model. m >= 1 required.
double perplexity(const ModelState& model, const TokenSeq& tokens);

// Class index by argmax over class logits; ties break toward lowest index.
int classify(const ModelState& model, const TokenSeq& tokens);

// --- input-gradient machinery ----------------------------------------------

// Loss over an assembled sequence: cross-entropy of fixed targets at chosen
// rows (the "answer" term) plus lambda times the mean NLL of the sequence's
// own tokens at chosen positions (the "fluency" term, differentiable through
// the one-hot selector).
struct SeqLossSpec {
  std::vector<int> answer_rows;          // rows of the BOS-prefixed sequence
  std::vector<TokenId> answer_targets;   // aligned with answer_rows
  std::vector<int> nll_positions;        // positions (BOS-prefixed) of span tokens
  double lambda = 0.0;
  bool skip_nll_term = false;  // when true the fluency term is never evaluated
};

struct SeqScore {
  double total = 0.0;
  double answer = 0.0;
  double nll = 0.0;
};

// No-tape evaluation of the loss parts for a BOS-prefixed sequence.
SeqScore score_sequence(const ModelState& model, const std::vector<TokenId>& seq_with_bos,
                        const SeqLossSpec& spec);

// Gradient of the loss w.r.t. the one-hot representation of every position of
// the BOS-prefixed sequence; also returns the score. Model params untouched.
struct OnehotGrad {
  std::vector<double> grad;  // row-major [seq_len x V]
  SeqScore score;
};
OnehotGrad onehot_input_grad(const ModelState& model,
                             const std::vector<TokenId>& seq_with_bos,
                             const SeqLossSpec& spec);

// --- persistence ------------------------------------------------------------

// Checkpoint format (bit-exact): magic "LBWB", format version u32, config
// blob length u32, UTF-8 config JSON (model config + stage), then each
// parameter as (name length u16, name, rank u8, dims u32 x rank, f32
// little-endian data). A CRC32 of all preceding bytes trails the file.
std::vector<uint8_t> serialize_checkpoint(const ModelState& model);
ModelState deserialize_checkpoint(const std::vector<uint8_t>& bytes);
void save_checkpoint(const ModelState& model, const std::string& path);
ModelState load_checkpoint(const std::string& path);

// SHA-256 of the serialized checkpoint; the determinism fingerprint.
std::string model_hash(const ModelState& model);

}  // namespace lbw::lm
