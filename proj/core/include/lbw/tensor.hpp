// Copyright 2026 The lbw Authors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal dense-tensor reverse-mode autodiff: just enough surface for a small
// causal transformer and for gradients with respect to one-hot token inputs.
// All math runs in 64-bit; checkpoints quantize to 32-bit on serialization.
//
// Graphs are built by calling ops on Tensor handles. Node creation order is a
// topological order by construction, which is what backward() walks, so the
// graph is acyclic by construction. One graph is confined to one thread;
// distinct graphs may run concurrently.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "lbw/common.hpp"
#include "lbw/rng.hpp"

namespace lbw::tensor {

using Scalar = double;

namespace detail {

struct Node {
  std::vector<int> shape;
  std::vector<Scalar> value;
  std::vector<Scalar> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;
  uint64_t id = 0;
  bool backward_root_done = false;

  size_t numel() const { return value.size(); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

uint64_t next_node_id();

}  // namespace detail

// Thread-local autograd switch. Ops built under NoGradGuard record no tape,
// which keeps pure inference (generation, PGCG proposal scoring) lean.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor from_values(std::vector<int> shape, std::vector<Scalar> values,
                            bool requires_grad = false);
  static Tensor scalar_value(Scalar v);
  // Dense one-hot matrix [n x vocab] from token ids.
  static Tensor one_hot(const std::vector<TokenId>& ids, int vocab,
                        bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int dim(size_t i) const { return node_->shape[i]; }
  size_t rank() const { return node_->shape.size(); }
  size_t numel() const { return node_->numel(); }

  const std::vector<Scalar>& values() const { return node_->value; }
  // Leaf mutation only (parameter init, optimizer updates, finite differences).
  std::vector<Scalar>& mutable_values();
  Scalar item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<Scalar>& grad() const;
  void zero_grad();

  std::shared_ptr<detail::Node> node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

// --- ops ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a. b^T: [m,k]x[n,k]
Tensor add(const Tensor& a, const Tensor& b);        // same shape
Tensor add_rowvec(const Tensor& a, const Tensor& v);  // [m,n] + [n]
Tensor scale(const Tensor& a, Scalar s);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor gelu(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  Scalar eps = 1e-5);
// Numerically stabilized softmax along `axis` (0 or 1 for matrices, 0 for
// vectors). Rows along the axis sum to 1.
Tensor softmax(const Tensor& x, int axis = -1);
Tensor log_softmax_rows(const Tensor& x);
// Mean negative log softmax-probability of targets, one target per row.
Tensor cross_entropy(const Tensor& logits, const std::vector<TokenId>& targets);
// Same, restricted to the given rows (targets aligned with `rows`).
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<TokenId>& targets,
                          const std::vector<int>& rows);
Tensor row_select(const Tensor& x, const std::vector<int>& rows);
Tensor col_slice(const Tensor& x, int col_begin, int col_end);
Tensor col_concat(const std::vector<Tensor>& parts);
// Gather rows of a parameter table by token id; backward scatter-adds.
Tensor embed_rows(const Tensor& table, const std::vector<TokenId>& ids);
// Adds a large negative constant to strictly-future positions of a square
// score matrix; identity for the gradient.
Tensor add_causal_mask(const Tensor& scores);
Tensor sum(const Tensor& x);
// Mean over j of dot(a[rows_a[j],:], b[rows_b[j],:]). Used for the
// perplexity term of the search loss, where b is a one-hot input matrix.
Tensor inner_rows_mean(const Tensor& a, const Tensor& b,
                       const std::vector<int>& rows_a,
                       const std::vector<int>& rows_b);

// Reverse-mode sweep from a scalar root. Fills grads of every reachable
// tensor that requires one. A second call on the same root is an error;
// rebuild the graph (and zero leaf grads) between steps.
void backward(const Tensor& loss);

// --- parameters & optimizer --------------------------------------------

// Ordered name -> tensor map. Order is construction order and is the
// canonical serialization order.
class ParamSet {
 public:
  Tensor& create(const std::string& name, std::vector<int> shape);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  size_t size() const { return entries_.size(); }
  size_t total_parameters() const;
  const std::vector<std::pair<std::string, Tensor>>& entries() const {
    return entries_;
  }

  int64_t step_count() const { return step_count_; }
  void increment_step() { ++step_count_; }
  void set_step_count(int64_t s) { step_count_ = s; }

  void zero_grads();
  // Throws ErrorKind::training naming the parameter if any value is non-finite.
  void check_finite(const std::string& context) const;

  ParamSet clone() const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::vector<std::pair<std::string, size_t>> index_;  // sorted by name
  int64_t step_count_ = 0;
};

struct AdamConfig {
  Scalar lr = 1e-3;
  Scalar beta1 = 0.9;
  Scalar beta2 = 0.999;
  Scalar eps = 1e-8;
};

// Standard Adam with bias correction. Moments are keyed by parameter name and
// live for one training stage; they are not part of the checkpoint format.
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}
  // Consumes grads on the params (missing grads count as zero), increments
  // the ParamSet step counter. NaN gradients raise ErrorKind::training with
  // the parameter name.
  void step(ParamSet& params);
  const AdamConfig& config() const { return cfg_; }

 private:
  struct Moments {
    std::vector<Scalar> m, v;
  };
  AdamConfig cfg_;
  std::vector<std::pair<std::string, Moments>> moments_;
  int64_t t_ = 0;
};

// --- verification helpers ----------------------------------------------

// Central-difference comparison of backward() against numeric derivatives on
// a sampled subset of coordinates of each leaf. Returns the max relative
// error observed. `fn` must rebuild the graph from the leaves' current
// values on every call and return a scalar loss.
double grad_check(const std::function<Tensor()>& fn, const std::vector<Tensor>& leaves,
                  double eps, int max_coords_per_leaf, Rng& rng);

}  // namespace lbw::tensor
