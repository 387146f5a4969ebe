// Copyright 2026 The lbw Authors
// SPDX-License-Identifier: Apache-2.0
#include "lbw/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <unordered_set>

namespace lbw::tensor {

namespace detail {

uint64_t next_node_id() {
  static std::atomic<uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

NodePtr make_node(std::vector<int> shape, std::vector<Scalar> value) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->id = detail::next_node_id();
  return n;
}

size_t shape_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) {
    require(d >= 0, ErrorKind::dimension, "tensor: negative dimension");
    n *= static_cast<size_t>(d);
  }
  return n;
}

// Wires an op node into the tape if grad mode is on and any input needs it.
Tensor finish_op(NodePtr out, std::vector<Tensor> inputs,
                 std::function<void(Node&)> backward_fn) {
  bool needs = false;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (needs && g_grad_enabled) {
    out->requires_grad = true;
    out->inputs.reserve(inputs.size());
    for (auto& t : inputs) out->inputs.push_back(t.node());
    out->backward_fn = std::move(backward_fn);
  }
  return Tensor::wrap(std::move(out));
}

void check_matrix(const Tensor& t, const char* op) {
  require(t.rank() == 2, ErrorKind::dimension, std::string(op) + ": expected a matrix");
}

// C[m,n] += A[m,k] * B[k,n]
void kernel_matmul_acc(const Scalar* a, const Scalar* b, Scalar* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    Scalar* crow = c + static_cast<size_t>(i) * n;
    const Scalar* arow = a + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      Scalar av = arow[p];
      if (av == 0.0) continue;
      const Scalar* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
void kernel_matmul_nt_acc(const Scalar* a, const Scalar* b, Scalar* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const Scalar* arow = a + static_cast<size_t>(i) * k;
    Scalar* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const Scalar* brow = b + static_cast<size_t>(j) * k;
      Scalar s = 0.0;
      for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] += s;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
void kernel_matmul_tn_acc(const Scalar* a, const Scalar* b, Scalar* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const Scalar* arow = a + static_cast<size_t>(i) * k;
    const Scalar* brow = b + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      Scalar av = arow[p];
      if (av == 0.0) continue;
      Scalar* crow = c + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void softmax_row(const Scalar* x, Scalar* y, int n) {
  Scalar mx = x[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  Scalar denom = 0.0;
  for (int j = 0; j < n; ++j) {
    y[j] = std::exp(x[j] - mx);
    denom += y[j];
  }
  Scalar inv = 1.0 / denom;
  for (int j = 0; j < n; ++j) y[j] *= inv;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// --- Tensor ---------------------------------------------------------------

Tensor Tensor::wrap(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  size_t n = shape_numel(shape);
  auto node = make_node(std::move(shape), std::vector<Scalar>(n, 0.0));
  node->requires_grad = requires_grad;
  return wrap(std::move(node));
}

Tensor Tensor::from_values(std::vector<int> shape, std::vector<Scalar> values,
                           bool requires_grad) {
  require(shape_numel(shape) == values.size(), ErrorKind::dimension,
          "from_values: shape does not match value count");
  auto node = make_node(std::move(shape), std::move(values));
  node->requires_grad = requires_grad;
  return wrap(std::move(node));
}

Tensor Tensor::scalar_value(Scalar v) { return from_values({1}, {v}); }

Tensor Tensor::one_hot(const std::vector<TokenId>& ids, int vocab, bool requires_grad) {
  std::vector<Scalar> data(ids.size() * static_cast<size_t>(vocab), 0.0);
  for (size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && ids[i] < vocab, ErrorKind::index,
            "one_hot: token id out of range");
    data[i * static_cast<size_t>(vocab) + static_cast<size_t>(ids[i])] = 1.0;
  }
  return from_values({static_cast<int>(ids.size()), vocab}, std::move(data),
                     requires_grad);
}

std::vector<Scalar>& Tensor::mutable_values() {
  require(!node_->backward_fn, ErrorKind::contract,
          "mutable_values: only leaf tensors may be mutated");
  return node_->value;
}

Scalar Tensor::item() const {
  require(numel() == 1, ErrorKind::contract, "item: tensor is not scalar");
  return node_->value[0];
}

const std::vector<Scalar>& Tensor::grad() const {
  require(!node_->grad.empty(), ErrorKind::contract, "grad: no gradient present");
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); node_->backward_root_done = false; }

// --- ops --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_matrix(a, "matmul");
  check_matrix(b, "matmul");
  int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  require(k == k2, ErrorKind::dimension, "matmul: inner dimensions disagree");
  auto out = make_node({m, n}, std::vector<Scalar>(static_cast<size_t>(m) * n, 0.0));
  kernel_matmul_acc(a.values().data(), b.values().data(), out->value.data(), m, k, n);
  auto an = a.node(), bn = b.node();
  return finish_op(std::move(out), {a, b}, [an, bn, m, k, n](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      kernel_matmul_nt_acc(self.grad.data(), bn->value.data(), an->grad.data(), m, n, k);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      kernel_matmul_tn_acc(an->value.data(), self.grad.data(), bn->grad.data(), m, k, n);
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check_matrix(a, "matmul_nt");
  check_matrix(b, "matmul_nt");
  int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  require(k == b.dim(1), ErrorKind::dimension, "matmul_nt: inner dimensions disagree");
  auto out = make_node({m, n}, std::vector<Scalar>(static_cast<size_t>(m) * n, 0.0));
  kernel_matmul_nt_acc(a.values().data(), b.values().data(), out->value.data(), m, k, n);
  auto an = a.node(), bn = b.node();
  return finish_op(std::move(out), {a, b}, [an, bn, m, k, n](Node& self) {
    // y = a b^T; dy/da = g b ; dy/db = g^T a
    if (an->requires_grad) {
      an->ensure_grad();
      kernel_matmul_acc(self.grad.data(), bn->value.data(), an->grad.data(), m, n, k);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      kernel_matmul_tn_acc(self.grad.data(), an->value.data(), bn->grad.data(), m, n, k);
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), ErrorKind::dimension, "add: shape mismatch");
  std::vector<Scalar> v(a.numel());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + b.values()[i];
  auto out = make_node(a.shape(), std::move(v));
  auto an = a.node(), bn = b.node();
  return finish_op(std::move(out), {a, b}, [an, bn](Node& self) {
    for (auto* p : {an.get(), bn.get()}) {
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  check_matrix(a, "add_rowvec");
  require(v.rank() == 1 && v.dim(0) == a.dim(1), ErrorKind::dimension,
          "add_rowvec: vector length must match row width");
  int m = a.dim(0), n = a.dim(1);
  std::vector<Scalar> out_v(a.numel());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out_v[static_cast<size_t>(i) * n + j] =
          a.values()[static_cast<size_t>(i) * n + j] + v.values()[static_cast<size_t>(j)];
  auto out = make_node(a.shape(), std::move(out_v));
  auto an = a.node(), vn = v.node();
  return finish_op(std::move(out), {a, v}, [an, vn, m, n](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (vn->requires_grad) {
      vn->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          vn->grad[static_cast<size_t>(j)] += self.grad[static_cast<size_t>(i) * n + j];
    }
  });
}

Tensor scale(const Tensor& a, Scalar s) {
  std::vector<Scalar> v(a.numel());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * s;
  auto out = make_node(a.shape(), std::move(v));
  auto an = a.node();
  return finish_op(std::move(out), {a}, [an, s](Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * s;
  });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), ErrorKind::dimension, "hadamard: shape mismatch");
  std::vector<Scalar> v(a.numel());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * b.values()[i];
  auto out = make_node(a.shape(), std::move(v));
  auto an = a.node(), bn = b.node();
  return finish_op(std::move(out), {a, b}, [an, bn](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        an->grad[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        bn->grad[i] += self.grad[i] * an->value[i];
    }
  });
}

Tensor gelu(const Tensor& a) {
  constexpr Scalar inv_sqrt2 = 0.70710678118654752440;
  constexpr Scalar inv_sqrt2pi = 0.39894228040143267794;
  std::vector<Scalar> v(a.numel());
  for (size_t i = 0; i < v.size(); ++i) {
    Scalar x = a.values()[i];
    v[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  }
  auto out = make_node(a.shape(), std::move(v));
  auto an = a.node();
  return finish_op(std::move(out), {a}, [an](Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      Scalar x = an->value[i];
      Scalar d = 0.5 * (1.0 + std::erf(x * inv_sqrt2)) +
                 x * inv_sqrt2pi * std::exp(-0.5 * x * x);
      an->grad[i] += self.grad[i] * d;
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Scalar eps) {
  check_matrix(x, "layer_norm");
  int m = x.dim(0), n = x.dim(1);
  require(gain.rank() == 1 && gain.dim(0) == n, ErrorKind::dimension,
          "layer_norm: gain width mismatch");
  require(bias.rank() == 1 && bias.dim(0) == n, ErrorKind::dimension,
          "layer_norm: bias width mismatch");
  std::vector<Scalar> y(x.numel());
  std::vector<Scalar> mu(static_cast<size_t>(m)), inv_sigma(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    const Scalar* row = x.values().data() + static_cast<size_t>(i) * n;
    Scalar mean = 0.0;
    for (int j = 0; j < n; ++j) mean += row[j];
    mean /= n;
    Scalar var = 0.0;
    for (int j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= n;
    Scalar inv = 1.0 / std::sqrt(var + eps);
    mu[static_cast<size_t>(i)] = mean;
    inv_sigma[static_cast<size_t>(i)] = inv;
    Scalar* yrow = y.data() + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j)
      yrow[j] = (row[j] - mean) * inv * gain.values()[static_cast<size_t>(j)] +
                bias.values()[static_cast<size_t>(j)];
  }
  auto out = make_node(x.shape(), std::move(y));
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  return finish_op(
      std::move(out), {x, gain, bias},
      [xn, gn, bn, m, n, mu = std::move(mu), inv_sigma = std::move(inv_sigma)](Node& self) {
        for (int i = 0; i < m; ++i) {
          const Scalar* xrow = xn->value.data() + static_cast<size_t>(i) * n;
          const Scalar* grow = self.grad.data() + static_cast<size_t>(i) * n;
          Scalar mean = mu[static_cast<size_t>(i)];
          Scalar inv = inv_sigma[static_cast<size_t>(i)];
          if (gn->requires_grad || bn->requires_grad) {
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (int j = 0; j < n; ++j) {
              Scalar xhat = (xrow[j] - mean) * inv;
              if (gn->requires_grad) gn->grad[static_cast<size_t>(j)] += grow[j] * xhat;
              if (bn->requires_grad) bn->grad[static_cast<size_t>(j)] += grow[j];
            }
          }
          if (xn->requires_grad) {
            xn->ensure_grad();
            // dxhat = g * gain; dx = inv * (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
            Scalar sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (int j = 0; j < n; ++j) {
              Scalar xhat = (xrow[j] - mean) * inv;
              Scalar dxhat = grow[j] * gn->value[static_cast<size_t>(j)];
              sum_dxhat += dxhat;
              sum_dxhat_xhat += dxhat * xhat;
            }
            Scalar* xg = xn->grad.data() + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
              Scalar xhat = (xrow[j] - mean) * inv;
              Scalar dxhat = grow[j] * gn->value[static_cast<size_t>(j)];
              xg[j] += inv * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
            }
          }
        }
      });
}

Tensor softmax(const Tensor& x, int axis) {
  if (x.rank() == 1) {
    require(axis == 0 || axis == -1, ErrorKind::dimension, "softmax: invalid axis");
    int n = x.dim(0);
    std::vector<Scalar> y(static_cast<size_t>(n));
    softmax_row(x.values().data(), y.data(), n);
    auto out = make_node(x.shape(), std::move(y));
    auto xn = x.node();
    return finish_op(std::move(out), {x}, [xn, n](Node& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      Scalar dot = 0.0;
      for (int j = 0; j < n; ++j) dot += self.grad[static_cast<size_t>(j)] * self.value[static_cast<size_t>(j)];
      for (int j = 0; j < n; ++j)
        xn->grad[static_cast<size_t>(j)] +=
            self.value[static_cast<size_t>(j)] * (self.grad[static_cast<size_t>(j)] - dot);
    });
  }
  check_matrix(x, "softmax");
  if (axis == -1) axis = 1;
  require(axis == 0 || axis == 1, ErrorKind::dimension, "softmax: invalid axis");
  int m = x.dim(0), n = x.dim(1);
  std::vector<Scalar> y(x.numel());
  if (axis == 1) {
    for (int i = 0; i < m; ++i)
      softmax_row(x.values().data() + static_cast<size_t>(i) * n,
                  y.data() + static_cast<size_t>(i) * n, n);
  } else {
    std::vector<Scalar> col(static_cast<size_t>(m)), soft(static_cast<size_t>(m));
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i < m; ++i) col[static_cast<size_t>(i)] = x.values()[static_cast<size_t>(i) * n + j];
      softmax_row(col.data(), soft.data(), m);
      for (int i = 0; i < m; ++i) y[static_cast<size_t>(i) * n + j] = soft[static_cast<size_t>(i)];
    }
  }
  auto out = make_node(x.shape(), std::move(y));
  auto xn = x.node();
  return finish_op(std::move(out), {x}, [xn, m, n, axis](Node& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    if (axis == 1) {
      for (int i = 0; i < m; ++i) {
        const Scalar* yrow = self.value.data() + static_cast<size_t>(i) * n;
        const Scalar* grow = self.grad.data() + static_cast<size_t>(i) * n;
        Scalar dot = 0.0;
        for (int j = 0; j < n; ++j) dot += grow[j] * yrow[j];
        Scalar* xg = xn->grad.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) xg[j] += yrow[j] * (grow[j] - dot);
      }
    } else {
      for (int j = 0; j < n; ++j) {
        Scalar dot = 0.0;
        for (int i = 0; i < m; ++i)
          dot += self.grad[static_cast<size_t>(i) * n + j] * self.value[static_cast<size_t>(i) * n + j];
        for (int i = 0; i < m; ++i) {
          size_t idx = static_cast<size_t>(i) * n + j;
          xn->grad[idx] += self.value[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

Tensor log_softmax_rows(const Tensor& x) {
  check_matrix(x, "log_softmax_rows");
  int m = x.dim(0), n = x.dim(1);
  std::vector<Scalar> y(x.numel());
  for (int i = 0; i < m; ++i) {
    const Scalar* row = x.values().data() + static_cast<size_t>(i) * n;
    Scalar mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    Scalar denom = 0.0;
    for (int j = 0; j < n; ++j) denom += std::exp(row[j] - mx);
    Scalar lse = mx + std::log(denom);
    Scalar* yrow = y.data() + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) yrow[j] = row[j] - lse;
  }
  auto out = make_node(x.shape(), std::move(y));
  auto xn = x.node();
  return finish_op(std::move(out), {x}, [xn, m, n](Node& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (int i = 0; i < m; ++i) {
      const Scalar* yrow = self.value.data() + static_cast<size_t>(i) * n;
      const Scalar* grow = self.grad.data() + static_cast<size_t>(i) * n;
      Scalar gsum = 0.0;
      for (int j = 0; j < n; ++j) gsum += grow[j];
      Scalar* xg = xn->grad.data() + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) xg[j] += grow[j] - std::exp(yrow[j]) * gsum;
    }
  });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<TokenId>& targets) {
  check_matrix(logits, "cross_entropy");
  require(static_cast<int>(targets.size()) == logits.dim(0), ErrorKind::dimension,
          "cross_entropy: one target per row required");
  std::vector<int> rows(targets.size());
  for (size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<int>(i);
  return cross_entropy_rows(logits, targets, rows);
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<TokenId>& targets,
                          const std::vector<int>& rows) {
  check_matrix(logits, "cross_entropy");
  require(!rows.empty(), ErrorKind::contract, "cross_entropy: no rows selected");
  require(targets.size() == rows.size(), ErrorKind::dimension,
          "cross_entropy: targets must align with rows");
  int m = logits.dim(0), vocab = logits.dim(1);
  for (size_t j = 0; j < rows.size(); ++j) {
    require(rows[j] >= 0 && rows[j] < m, ErrorKind::index, "cross_entropy: row out of range");
    require(targets[j] >= 0 && targets[j] < vocab, ErrorKind::index,
            "cross_entropy: target index out of range");
  }
  Scalar total = 0.0;
  for (size_t j = 0; j < rows.size(); ++j) {
    const Scalar* row = logits.values().data() + static_cast<size_t>(rows[j]) * vocab;
    Scalar mx = row[0];
    for (int v = 1; v < vocab; ++v) mx = std::max(mx, row[v]);
    Scalar denom = 0.0;
    for (int v = 0; v < vocab; ++v) denom += std::exp(row[v] - mx);
    total += (mx + std::log(denom)) - row[targets[j]];
  }
  total /= static_cast<Scalar>(rows.size());
  auto out = make_node({1}, {total});
  auto ln = logits.node();
  return finish_op(std::move(out), {logits},
                   [ln, vocab, targets, rows](Node& self) {
    if (!ln->requires_grad) return;
    ln->ensure_grad();
    Scalar g = self.grad[0] / static_cast<Scalar>(rows.size());
    std::vector<Scalar> soft(static_cast<size_t>(vocab));
    for (size_t j = 0; j < rows.size(); ++j) {
      const Scalar* row = ln->value.data() + static_cast<size_t>(rows[j]) * vocab;
      softmax_row(row, soft.data(), vocab);
      Scalar* lg = ln->grad.data() + static_cast<size_t>(rows[j]) * vocab;
      for (int v = 0; v < vocab; ++v) lg[v] += g * soft[static_cast<size_t>(v)];
      lg[targets[j]] -= g;
    }
  });
}

Tensor row_select(const Tensor& x, const std::vector<int>& rows) {
  check_matrix(x, "row_select");
  int m = x.dim(0), n = x.dim(1);
  std::vector<Scalar> v(rows.size() * static_cast<size_t>(n));
  for (size_t j = 0; j < rows.size(); ++j) {
    require(rows[j] >= 0 && rows[j] < m, ErrorKind::index, "row_select: row out of range");
    std::memcpy(v.data() + j * static_cast<size_t>(n),
                x.values().data() + static_cast<size_t>(rows[j]) * n,
                sizeof(Scalar) * static_cast<size_t>(n));
  }
  auto out = make_node({static_cast<int>(rows.size()), n}, std::move(v));
  auto xn = x.node();
  return finish_op(std::move(out), {x}, [xn, n, rows](Node& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t j = 0; j < rows.size(); ++j) {
      const Scalar* grow = self.grad.data() + j * static_cast<size_t>(n);
      Scalar* xg = xn->grad.data() + static_cast<size_t>(rows[j]) * n;
      for (int c = 0; c < n; ++c) xg[c] += grow[c];
    }
  });
}

Tensor col_slice(const Tensor& x, int col_begin, int col_end) {
  check_matrix(x, "col_slice");
  int m = x.dim(0), n = x.dim(1);
  require(0 <= col_begin && col_begin < col_end && col_end <= n, ErrorKind::dimension,
          "col_slice: bad column range");
  int w = col_end - col_begin;
  std::vector<Scalar> v(static_cast<size_t>(m) * w);
  for (int i = 0; i < m; ++i)
    std::memcpy(v.data() + static_cast<size_t>(i) * w,
                x.values().data() + static_cast<size_t>(i) * n + col_begin,
                sizeof(Scalar) * static_cast<size_t>(w));
  auto out = make_node({m, w}, std::move(v));
  auto xn = x.node();
  return finish_op(std::move(out), {x}, [xn, m, n, w, col_begin](Node& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (int i = 0; i < m; ++i) {
      const Scalar* grow = self.grad.data() + static_cast<size_t>(i) * w;
      Scalar* xg = xn->grad.data() + static_cast<size_t>(i) * n + col_begin;
      for (int c = 0; c < w; ++c) xg[c] += grow[c];
    }
  });
}

Tensor col_concat(const std::vector<Tensor>& parts) {
  require(!parts.empty(), ErrorKind::contract, "col_concat: no parts");
  int m = parts[0].dim(0);
  int total = 0;
  for (const auto& p : parts) {
    check_matrix(p, "col_concat");
    require(p.dim(0) == m, ErrorKind::dimension, "col_concat: row count mismatch");
    total += p.dim(1);
  }
  std::vector<Scalar> v(static_cast<size_t>(m) * total);
  int off = 0;
  for (const auto& p : parts) {
    int w = p.dim(1);
    for (int i = 0; i < m; ++i)
      std::memcpy(v.data() + static_cast<size_t>(i) * total + off,
                  p.values().data() + static_cast<size_t>(i) * w,
                  sizeof(Scalar) * static_cast<size_t>(w));
    off += w;
  }
  auto out = make_node({m, total}, std::move(v));
  std::vector<std::shared_ptr<Node>> part_nodes;
  for (const auto& p : parts) part_nodes.push_back(p.node());
  return finish_op(std::move(out), parts, [part_nodes, m, total](Node& self) {
    int off2 = 0;
    for (auto& pn : part_nodes) {
      int w = pn->shape[1];
      if (pn->requires_grad) {
        pn->ensure_grad();
        for (int i = 0; i < m; ++i) {
          const Scalar* grow = self.grad.data() + static_cast<size_t>(i) * total + off2;
          Scalar* pg = pn->grad.data() + static_cast<size_t>(i) * w;
          for (int c = 0; c < w; ++c) pg[c] += grow[c];
        }
      }
      off2 += w;
    }
  });
}

Tensor embed_rows(const Tensor& table, const std::vector<TokenId>& ids) {
  check_matrix(table, "embed_rows");
  int vocab = table.dim(0), width = table.dim(1);
  std::vector<Scalar> v(ids.size() * static_cast<size_t>(width));
  for (size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && ids[i] < vocab, ErrorKind::index,
            "embed_rows: token id out of range");
    std::memcpy(v.data() + i * static_cast<size_t>(width),
                table.values().data() + static_cast<size_t>(ids[i]) * width,
                sizeof(Scalar) * static_cast<size_t>(width));
  }
  auto out = make_node({static_cast<int>(ids.size()), width}, std::move(v));
  auto tn = table.node();
  return finish_op(std::move(out), {table}, [tn, width, ids](Node& self) {
    if (!tn->requires_grad) return;
    tn->ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i) {
      const Scalar* grow = self.grad.data() + i * static_cast<size_t>(width);
      Scalar* tg = tn->grad.data() + static_cast<size_t>(ids[i]) * width;
      for (int c = 0; c < width; ++c) tg[c] += grow[c];
    }
  });
}

Tensor add_causal_mask(const Tensor& scores) {
  check_matrix(scores, "add_causal_mask");
  int m = scores.dim(0), n = scores.dim(1);
  require(m == n, ErrorKind::dimension, "add_causal_mask: square matrix required");
  constexpr Scalar kNegInf = -1e30;
  std::vector<Scalar> v = scores.values();
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < n; ++j) v[static_cast<size_t>(i) * n + j] += kNegInf;
  auto out = make_node(scores.shape(), std::move(v));
  auto sn = scores.node();
  return finish_op(std::move(out), {scores}, [sn](Node& self) {
    if (!sn->requires_grad) return;
    sn->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) sn->grad[i] += self.grad[i];
  });
}

Tensor sum(const Tensor& x) {
  Scalar total = 0.0;
  for (Scalar v : x.values()) total += v;
  auto out = make_node({1}, {total});
  auto xn = x.node();
  return finish_op(std::move(out), {x}, [xn](Node& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += self.grad[0];
  });
}

Tensor inner_rows_mean(const Tensor& a, const Tensor& b, const std::vector<int>& rows_a,
                       const std::vector<int>& rows_b) {
  check_matrix(a, "inner_rows_mean");
  check_matrix(b, "inner_rows_mean");
  require(a.dim(1) == b.dim(1), ErrorKind::dimension, "inner_rows_mean: width mismatch");
  require(rows_a.size() == rows_b.size() && !rows_a.empty(), ErrorKind::contract,
          "inner_rows_mean: row lists must align and be non-empty");
  int n = a.dim(1);
  Scalar total = 0.0;
  for (size_t j = 0; j < rows_a.size(); ++j) {
    require(rows_a[j] >= 0 && rows_a[j] < a.dim(0), ErrorKind::index, "inner_rows_mean: row");
    require(rows_b[j] >= 0 && rows_b[j] < b.dim(0), ErrorKind::index, "inner_rows_mean: row");
    const Scalar* ra = a.values().data() + static_cast<size_t>(rows_a[j]) * n;
    const Scalar* rb = b.values().data() + static_cast<size_t>(rows_b[j]) * n;
    for (int c = 0; c < n; ++c) total += ra[c] * rb[c];
  }
  total /= static_cast<Scalar>(rows_a.size());
  auto out = make_node({1}, {total});
  auto an = a.node(), bn = b.node();
  return finish_op(std::move(out), {a, b}, [an, bn, n, rows_a, rows_b](Node& self) {
    Scalar g = self.grad[0] / static_cast<Scalar>(rows_a.size());
    for (size_t j = 0; j < rows_a.size(); ++j) {
      const Scalar* ra = an->value.data() + static_cast<size_t>(rows_a[j]) * n;
      const Scalar* rb = bn->value.data() + static_cast<size_t>(rows_b[j]) * n;
      if (an->requires_grad) {
        an->ensure_grad();
        Scalar* ga = an->grad.data() + static_cast<size_t>(rows_a[j]) * n;
        for (int c = 0; c < n; ++c) ga[c] += g * rb[c];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        Scalar* gb = bn->grad.data() + static_cast<size_t>(rows_b[j]) * n;
        for (int c = 0; c < n; ++c) gb[c] += g * ra[c];
      }
    }
  });
}

// --- backward ---------------------------------------------------------

void backward(const Tensor& loss) {
  require(loss.defined(), ErrorKind::contract, "backward: undefined tensor");
  require(loss.numel() == 1, ErrorKind::contract, "backward: root must be scalar");
  auto root = loss.node();
  require(!root->backward_root_done, ErrorKind::contract,
          "backward: repeated call on the same root without reset");
  root->backward_root_done = true;
  if (!root->requires_grad) return;  // nothing reachable requires grad

  // Creation ids are a topological order; walk reachable nodes in reverse.
  std::vector<detail::Node*> reachable;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    reachable.push_back(n);
    for (auto& in : n->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(reachable.begin(), reachable.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->id > b->id; });

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (detail::Node* n : reachable) {
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Leaves that require grad but received no contribution report zeros.
  for (detail::Node* n : reachable) {
    if (!n->backward_fn && n->requires_grad) n->ensure_grad();
  }
}

// --- ParamSet / Adam ----------------------------------------------------

Tensor& ParamSet::create(const std::string& name, std::vector<int> shape) {
  require(!contains(name), ErrorKind::config, "ParamSet: duplicate parameter " + name);
  entries_.emplace_back(name, Tensor::zeros(std::move(shape), /*requires_grad=*/true));
  auto pos = std::lower_bound(index_.begin(), index_.end(), name,
                              [](const auto& p, const std::string& k) { return p.first < k; });
  index_.insert(pos, {name, entries_.size() - 1});
  return entries_.back().second;
}

bool ParamSet::contains(const std::string& name) const {
  auto pos = std::lower_bound(index_.begin(), index_.end(), name,
                              [](const auto& p, const std::string& k) { return p.first < k; });
  return pos != index_.end() && pos->first == name;
}

Tensor& ParamSet::get(const std::string& name) {
  auto pos = std::lower_bound(index_.begin(), index_.end(), name,
                              [](const auto& p, const std::string& k) { return p.first < k; });
  require(pos != index_.end() && pos->first == name, ErrorKind::config,
          "ParamSet: unknown parameter " + name);
  return entries_[pos->second].second;
}

const Tensor& ParamSet::get(const std::string& name) const {
  return const_cast<ParamSet*>(this)->get(name);
}

size_t ParamSet::total_parameters() const {
  size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

void ParamSet::zero_grads() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

void ParamSet::check_finite(const std::string& context) const {
  for (const auto& [name, t] : entries_) {
    for (Scalar v : t.values()) {
      if (!std::isfinite(v)) {
        fail(ErrorKind::training, context + ": non-finite value in parameter " + name);
      }
    }
  }
}

ParamSet ParamSet::clone() const {
  ParamSet out;
  for (const auto& [name, t] : entries_) {
    Tensor& nt = out.create(name, t.shape());
    nt.mutable_values() = t.values();
  }
  out.step_count_ = step_count_;
  return out;
}

void Adam::step(ParamSet& params) {
  if (moments_.empty()) {
    for (const auto& [name, t] : params.entries()) {
      moments_.emplace_back(name, Moments{std::vector<Scalar>(t.numel(), 0.0),
                                          std::vector<Scalar>(t.numel(), 0.0)});
    }
  }
  require(moments_.size() == params.size(), ErrorKind::contract,
          "Adam: parameter set changed between steps");
  ++t_;
  Scalar bias1 = 1.0 - std::pow(cfg_.beta1, static_cast<Scalar>(t_));
  Scalar bias2 = 1.0 - std::pow(cfg_.beta2, static_cast<Scalar>(t_));
  for (size_t p = 0; p < moments_.size(); ++p) {
    const std::string& name = params.entries()[p].first;
    Tensor entry_tensor = params.entries()[p].second;  // handle; shares storage
    require(name == moments_[p].first, ErrorKind::contract,
            "Adam: parameter order changed");
    auto& value = entry_tensor.mutable_values();
    auto& mom = moments_[p].second;
    if (!entry_tensor.has_grad()) continue;  // zero gradient: moments decay only
    const auto& g = entry_tensor.grad();
    for (size_t i = 0; i < value.size(); ++i) {
      Scalar gi = g[i];
      if (!std::isfinite(gi)) {
        fail(ErrorKind::training, "Adam: NaN gradient in parameter " + name);
      }
      mom.m[i] = cfg_.beta1 * mom.m[i] + (1.0 - cfg_.beta1) * gi;
      mom.v[i] = cfg_.beta2 * mom.v[i] + (1.0 - cfg_.beta2) * gi * gi;
      Scalar mhat = mom.m[i] / bias1;
      Scalar vhat = mom.v[i] / bias2;
      value[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
  params.increment_step();
}

// --- grad_check ---------------------------------------------------------

double grad_check(const std::function<Tensor()>& fn, const std::vector<Tensor>& leaves,
                  double eps, int max_coords_per_leaf, Rng& rng) {
  require(eps > 0.0, ErrorKind::contract, "grad_check: eps must be positive");
  for (const auto& l : leaves) l.node()->grad.clear();
  Tensor loss = fn();
  backward(loss);
  std::vector<std::vector<Scalar>> analytic;
  analytic.reserve(leaves.size());
  for (const auto& l : leaves) {
    analytic.push_back(l.has_grad() ? l.grad() : std::vector<Scalar>(l.numel(), 0.0));
  }

  double max_rel = 0.0;
  for (size_t li = 0; li < leaves.size(); ++li) {
    Tensor leaf = leaves[li];
    size_t n = leaf.numel();
    std::vector<size_t> coords;
    if (static_cast<int>(n) <= max_coords_per_leaf) {
      for (size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (int i = 0; i < max_coords_per_leaf; ++i)
        coords.push_back(static_cast<size_t>(rng.uniform_below(n)));
    }
    for (size_t c : coords) {
      Scalar original = leaf.mutable_values()[c];
      leaf.mutable_values()[c] = original + eps;
      Scalar up = fn().item();
      leaf.mutable_values()[c] = original - eps;
      Scalar down = fn().item();
      leaf.mutable_values()[c] = original;
      Scalar numeric = (up - down) / (2.0 * eps);
      Scalar a = analytic[li][c];
      double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-6});
      max_rel = std::max(max_rel, std::fabs(a - numeric) / denom);
    }
  }
  return max_rel;
}

}  // namespace lbw::tensor
