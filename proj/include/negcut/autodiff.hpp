#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "negcut/common.hpp"
#include "negcut/tensor.hpp"

namespace negcut {

// Reverse-mode autodiff over Tensor values. Graphs are built dynamically;
// nodes hold the forward value and, after backward(), the gradient of the
// scalar loss with respect to that value. Subgraphs that cannot reach a
// parameter are pruned at construction (no parents, no backward closure),
// so "no-grad" forward passes fall out of the same code path.

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // empty until touched by backward()
  bool requires_grad = false;
  std::string name;  // set for parameters, useful in diagnostics
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.data.empty()) grad = Tensor::zeros(value.shape);
  }
  void zero_grad() {
    if (!grad.data.empty()) std::fill(grad.data.begin(), grad.data.end(), 0.0);
  }
  double scalar_value() const {
    check_invariant(value.numel() == 1, "Node: not a scalar");
    return value.data[0];
  }
};

inline Var constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  return n;
}

inline Var make_param(Tensor t, std::string name) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->requires_grad = true;
  n->name = std::move(name);
  return n;
}

/// Cuts the graph: same value, no gradient path.
inline Var detach(const Var& v) { return constant(v->value); }

inline Var make_node(Tensor value, std::vector<Var> parents,
                     std::function<void(Node&)> bw) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const auto& p : parents) n->requires_grad |= p->requires_grad;
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(bw);
  }
  return n;
}

/// Runs reverse accumulation from a scalar loss node.
inline void backward(const Var& loss) {
  check_invariant(loss->value.numel() == 1, "backward: loss must be scalar");
  if (!loss->requires_grad) return;

  // Iterative post-order over the requires_grad subgraph.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.push_back({loss.get(), 0});
  visited.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx].get();
      ++idx;
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss->ensure_grad();
  loss->grad.data[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

inline void zero_grads(const std::vector<Var>& params) {
  for (const auto& p : params) p->zero_grad();
}

// ---------------------------------------------------------------------------
// Elementwise ops

inline Var add(const Var& a, const Var& b) {
  check_invariant(a->value.same_shape(b->value), "add: shape mismatch");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
  return make_node(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] += n.grad[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  check_invariant(a->value.same_shape(b->value), "sub: shape mismatch");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
  return make_node(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] -= n.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  check_invariant(a->value.same_shape(b->value), "mul: shape mismatch");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  return make_node(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i)
        a->grad[i] += n.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i)
        b->grad[i] += n.grad[i] * a->value[i];
    }
  });
}

/// y = scale * x + shift, elementwise with scalar coefficients.
inline Var affine(const Var& x, double scale, double shift) {
  Tensor out = x->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = scale * out[i] + shift;
  return make_node(std::move(out), {x}, [x, scale](Node& n) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      x->grad[i] += scale * n.grad[i];
  });
}

inline Var scale(const Var& x, double s) { return affine(x, s, 0.0); }
inline Var neg(const Var& x) { return affine(x, -1.0, 0.0); }

inline Var relu(const Var& x) {
  Tensor out = x->value;
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return make_node(std::move(out), {x}, [x](Node& n) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      if (x->value[i] > 0.0) x->grad[i] += n.grad[i];
  });
}

inline Var leaky_relu(const Var& x, double slope = 0.2) {
  Tensor out = x->value;
  for (double& v : out.data) v = v > 0.0 ? v : slope * v;
  return make_node(std::move(out), {x}, [x, slope](Node& n) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      x->grad[i] += (x->value[i] > 0.0 ? 1.0 : slope) * n.grad[i];
  });
}

inline Var tanh_act(const Var& x) {
  Tensor out = x->value;
  for (double& v : out.data) v = std::tanh(v);
  return make_node(std::move(out), {x}, [x](Node& n) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      x->grad[i] += (1.0 - n.value[i] * n.value[i]) * n.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Matrix ops

/// C = op(A) * op(B) with optional transposes, via Eigen.
inline Var matmul(const Var& a, const Var& b, bool trans_a = false,
                  bool trans_b = false) {
  check_invariant(a->value.ndim() == 2 && b->value.ndim() == 2,
                  "matmul: 2-D operands required");
  const int64_t m = trans_a ? a->value.dim(1) : a->value.dim(0);
  const int64_t k = trans_a ? a->value.dim(0) : a->value.dim(1);
  const int64_t kb = trans_b ? b->value.dim(1) : b->value.dim(0);
  const int64_t n2 = trans_b ? b->value.dim(0) : b->value.dim(1);
  check_invariant(k == kb, "matmul: inner dimension mismatch");

  Tensor out({m, n2});
  {
    auto A = a->value.mat();
    auto B = b->value.mat();
    auto C = out.mat();
    if (!trans_a && !trans_b)
      C.noalias() = A * B;
    else if (!trans_a && trans_b)
      C.noalias() = A * B.transpose();
    else if (trans_a && !trans_b)
      C.noalias() = A.transpose() * B;
    else
      C.noalias() = A.transpose() * B.transpose();
  }
  return make_node(std::move(out), {a, b}, [a, b, trans_a, trans_b](Node& n) {
    auto G = n.grad.mat(n.value.dim(0), n.value.dim(1));
    if (a->requires_grad) {
      a->ensure_grad();
      auto dA = a->grad.mat(a->value.dim(0), a->value.dim(1));
      auto B = b->value.mat();
      if (!trans_a && !trans_b)
        dA.noalias() += G * B.transpose();
      else if (!trans_a && trans_b)
        dA.noalias() += G * B;
      else if (trans_a && !trans_b)
        dA.noalias() += B * G.transpose();
      else
        dA.noalias() += B.transpose() * G.transpose();
    }
    if (b->requires_grad) {
      b->ensure_grad();
      auto dB = b->grad.mat(b->value.dim(0), b->value.dim(1));
      auto A = a->value.mat();
      if (!trans_a && !trans_b)
        dB.noalias() += A.transpose() * G;
      else if (!trans_a && trans_b)
        dB.noalias() += G.transpose() * A;
      else if (trans_a && !trans_b)
        dB.noalias() += A * G;
      else
        dB.noalias() += G.transpose() * A.transpose();
    }
  });
}

/// X (P x C) + row vector b (1 x C), broadcast over rows.
inline Var add_rowvec(const Var& x, const Var& b) {
  check_invariant(x->value.ndim() == 2 && b->value.ndim() == 2 &&
                      b->value.dim(0) == 1 && b->value.dim(1) == x->value.dim(1),
                  "add_rowvec: shape mismatch");
  Tensor out = x->value;
  const int64_t P = out.dim(0), C = out.dim(1);
  for (int64_t r = 0; r < P; ++r)
    for (int64_t c = 0; c < C; ++c) out.at2(r, c) += b->value[c];
  return make_node(std::move(out), {x, b}, [x, b](Node& n) {
    const int64_t P = n.value.dim(0), C = n.value.dim(1);
    if (x->requires_grad) {
      x->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) x->grad[i] += n.grad[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int64_t r = 0; r < P; ++r)
        for (int64_t c = 0; c < C; ++c) b->grad[c] += n.grad.at2(r, c);
    }
  });
}

/// Selects rows of X by index; duplicates allowed. Backward scatter-adds.
inline Var gather_rows(const Var& x, std::vector<int64_t> idx) {
  check_invariant(x->value.ndim() == 2, "gather_rows: 2-D input required");
  const int64_t C = x->value.dim(1);
  Tensor out({static_cast<int64_t>(idx.size()), C});
  for (size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < x->value.dim(0),
            "gather_rows: index out of range");
    for (int64_t c = 0; c < C; ++c) out.at2(static_cast<int64_t>(i), c) = x->value.at2(idx[i], c);
  }
  return make_node(std::move(out), {x}, [x, idx = std::move(idx)](Node& n) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    const int64_t C = x->value.dim(1);
    for (size_t i = 0; i < idx.size(); ++i)
      for (int64_t c = 0; c < C; ++c)
        x->grad.at2(idx[i], c) += n.grad.at2(static_cast<int64_t>(i), c);
  });
}

/// Unit-normalizes each row. Rows with norm below eps are degenerate.
inline Var normalize_rows(const Var& x, double eps = 1e-12) {
  check_invariant(x->value.ndim() == 2, "normalize_rows: 2-D input required");
  const int64_t S = x->value.dim(0), C = x->value.dim(1);
  Tensor out({S, C});
  std::vector<double> norms(static_cast<size_t>(S));
  for (int64_t r = 0; r < S; ++r) {
    double s = 0.0;
    for (int64_t c = 0; c < C; ++c) s += x->value.at2(r, c) * x->value.at2(r, c);
    const double nr = std::sqrt(s);
    if (!(nr > eps))
      throw degenerate_input("normalize_rows: row " + std::to_string(r) +
                             " has norm " + std::to_string(nr));
    norms[static_cast<size_t>(r)] = nr;
    for (int64_t c = 0; c < C; ++c) out.at2(r, c) = x->value.at2(r, c) / nr;
  }
  return make_node(std::move(out), {x}, [x, norms = std::move(norms)](Node& n) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    const int64_t S = n.value.dim(0), C = n.value.dim(1);
    for (int64_t r = 0; r < S; ++r) {
      double ydotg = 0.0;
      for (int64_t c = 0; c < C; ++c) ydotg += n.value.at2(r, c) * n.grad.at2(r, c);
      const double inv = 1.0 / norms[static_cast<size_t>(r)];
      for (int64_t c = 0; c < C; ++c)
        x->grad.at2(r, c) += inv * (n.grad.at2(r, c) - n.value.at2(r, c) * ydotg);
    }
  });
}

/// Mean over rows: (P x C) -> (1 x C).
inline Var mean_rows(const Var& x) {
  check_invariant(x->value.ndim() == 2, "mean_rows: 2-D input required");
  const int64_t P = x->value.dim(0), C = x->value.dim(1);
  Tensor out({1, C});
  for (int64_t r = 0; r < P; ++r)
    for (int64_t c = 0; c < C; ++c) out[c] += x->value.at2(r, c);
  for (int64_t c = 0; c < C; ++c) out[c] /= static_cast<double>(P);
  return make_node(std::move(out), {x}, [x](Node& n) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    const int64_t P = x->value.dim(0), C = x->value.dim(1);
    const double inv = 1.0 / static_cast<double>(P);
    for (int64_t r = 0; r < P; ++r)
      for (int64_t c = 0; c < C; ++c) x->grad.at2(r, c) += inv * n.grad[c];
  });
}

inline Var concat_cols(const Var& a, const Var& b) {
  check_invariant(a->value.ndim() == 2 && b->value.ndim() == 2 &&
                      a->value.dim(0) == b->value.dim(0),
                  "concat_cols: row count mismatch");
  const int64_t S = a->value.dim(0), ca = a->value.dim(1), cb = b->value.dim(1);
  Tensor out({S, ca + cb});
  for (int64_t r = 0; r < S; ++r) {
    for (int64_t c = 0; c < ca; ++c) out.at2(r, c) = a->value.at2(r, c);
    for (int64_t c = 0; c < cb; ++c) out.at2(r, ca + c) = b->value.at2(r, c);
  }
  return make_node(std::move(out), {a, b}, [a, b, ca, cb](Node& n) {
    const int64_t S = n.value.dim(0);
    if (a->requires_grad) {
      a->ensure_grad();
      for (int64_t r = 0; r < S; ++r)
        for (int64_t c = 0; c < ca; ++c) a->grad.at2(r, c) += n.grad.at2(r, c);
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int64_t r = 0; r < S; ++r)
        for (int64_t c = 0; c < cb; ++c) b->grad.at2(r, c) += n.grad.at2(r, ca + c);
    }
  });
}

/// Per-row dot product of equally shaped matrices: (S x C) -> (S x 1).
inline Var rowwise_dot(const Var& a, const Var& b) {
  check_invariant(a->value.same_shape(b->value) && a->value.ndim() == 2,
                  "rowwise_dot: shape mismatch");
  const int64_t S = a->value.dim(0), C = a->value.dim(1);
  Tensor out({S, 1});
  for (int64_t r = 0; r < S; ++r) {
    double s = 0.0;
    for (int64_t c = 0; c < C; ++c) s += a->value.at2(r, c) * b->value.at2(r, c);
    out[r] = s;
  }
  return make_node(std::move(out), {a, b}, [a, b](Node& n) {
    const int64_t S = a->value.dim(0), C = a->value.dim(1);
    if (a->requires_grad) {
      a->ensure_grad();
      for (int64_t r = 0; r < S; ++r)
        for (int64_t c = 0; c < C; ++c)
          a->grad.at2(r, c) += n.grad[r] * b->value.at2(r, c);
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int64_t r = 0; r < S; ++r)
        for (int64_t c = 0; c < C; ++c)
          b->grad.at2(r, c) += n.grad[r] * a->value.at2(r, c);
    }
  });
}

/// Row-wise log(sum(exp(x))) with max subtraction: (S x K) -> (S x 1).
inline Var logsumexp_rows(const Var& x) {
  check_invariant(x->value.ndim() == 2, "logsumexp_rows: 2-D input required");
  const int64_t S = x->value.dim(0), K = x->value.dim(1);
  Tensor out({S, 1});
  for (int64_t r = 0; r < S; ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (int64_t c = 0; c < K; ++c) m = std::max(m, x->value.at2(r, c));
    double s = 0.0;
    for (int64_t c = 0; c < K; ++c) s += std::exp(x->value.at2(r, c) - m);
    out[r] = m + std::log(s);
  }
  return make_node(std::move(out), {x}, [x](Node& n) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    const int64_t S = x->value.dim(0), K = x->value.dim(1);
    for (int64_t r = 0; r < S; ++r)
      for (int64_t c = 0; c < K; ++c)
        x->grad.at2(r, c) += n.grad[r] * std::exp(x->value.at2(r, c) - n.value[r]);
  });
}

inline Var sum_all(const Var& x) {
  double s = 0.0;
  for (double v : x->value.data) s += v;
  return make_node(Tensor::scalar(s), {x}, [x](Node& n) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int64_t i = 0; i < x->grad.numel(); ++i) x->grad[i] += n.grad[0];
  });
}

inline Var mean_all(const Var& x) {
  const double inv = 1.0 / static_cast<double>(x->value.numel());
  return scale(sum_all(x), inv);
}

/// Sum of absolute values (L1 norm of the flattened tensor).
inline Var l1_norm(const Var& x) {
  double s = 0.0;
  for (double v : x->value.data) s += std::abs(v);
  return make_node(Tensor::scalar(s), {x}, [x](Node& n) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int64_t i = 0; i < x->grad.numel(); ++i)
      x->grad[i] += (x->value[i] > 0.0 ? 1.0 : (x->value[i] < 0.0 ? -1.0 : 0.0)) * n.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Image ops ([C,H,W] layout)

/// [C,H,W] -> (H*W) x C matrix of per-pixel feature vectors.
inline Var chw_to_rows(const Var& x) {
  check_invariant(x->value.ndim() == 3, "chw_to_rows: 3-D input required");
  const int64_t C = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
  const int64_t P = H * W;
  Tensor out({P, C});
  for (int64_t c = 0; c < C; ++c)
    for (int64_t p = 0; p < P; ++p) out.at2(p, c) = x->value[c * P + p];
  return make_node(std::move(out), {x}, [x, C, P](Node& n) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int64_t c = 0; c < C; ++c)
      for (int64_t p = 0; p < P; ++p) x->grad[c * P + p] += n.grad.at2(p, c);
  });
}

inline Var rows_to_chw(const Var& x, int64_t C, int64_t H, int64_t W) {
  check_invariant(x->value.ndim() == 2 && x->value.dim(0) == H * W &&
                      x->value.dim(1) == C,
                  "rows_to_chw: shape mismatch");
  const int64_t P = H * W;
  Tensor out({C, H, W});
  for (int64_t c = 0; c < C; ++c)
    for (int64_t p = 0; p < P; ++p) out[c * P + p] = x->value.at2(p, c);
  return make_node(std::move(out), {x}, [x, C, P](Node& n) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int64_t c = 0; c < C; ++c)
      for (int64_t p = 0; p < P; ++p) x->grad.at2(p, c) += n.grad[c * P + p];
  });
}

namespace detail {

inline void im2col(const Tensor& x, int64_t kh, int64_t kw, int64_t stride,
                   int64_t pad, Tensor& cols, int64_t ho, int64_t wo) {
  const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  double* dst = cols.data.data();
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        for (int64_t oy = 0; oy < ho; ++oy) {
          const int64_t iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= H) {
            for (int64_t ox = 0; ox < wo; ++ox) *dst++ = 0.0;
            continue;
          }
          const double* src = &x.data[static_cast<size_t>((c * H + iy) * W)];
          for (int64_t ox = 0; ox < wo; ++ox) {
            const int64_t ix = ox * stride - pad + kj;
            *dst++ = (ix >= 0 && ix < W) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im_add(const Tensor& cols, int64_t kh, int64_t kw,
                       int64_t stride, int64_t pad, Tensor& dx, int64_t ho,
                       int64_t wo) {
  const int64_t C = dx.dim(0), H = dx.dim(1), W = dx.dim(2);
  const double* src = cols.data.data();
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        for (int64_t oy = 0; oy < ho; ++oy) {
          const int64_t iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= H) {
            src += wo;
            continue;
          }
          double* dst = &dx.data[static_cast<size_t>((c * H + iy) * W)];
          for (int64_t ox = 0; ox < wo; ++ox) {
            const int64_t ix = ox * stride - pad + kj;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
          src += wo;
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D convolution with zero padding. x: [Ci,H,W], w: [Co,Ci,kh,kw], b: [Co].
inline Var conv2d(const Var& x, const Var& w, const Var& b, int64_t stride,
                  int64_t pad) {
  check_invariant(x->value.ndim() == 3 && w->value.ndim() == 4,
                  "conv2d: bad operand rank");
  const int64_t Ci = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
  const int64_t Co = w->value.dim(0), kh = w->value.dim(2), kw = w->value.dim(3);
  require(w->value.dim(1) == Ci, "conv2d: input channel mismatch (got " +
                                     std::to_string(Ci) + ", weights expect " +
                                     std::to_string(w->value.dim(1)) + ")");
  const int64_t ho = (H + 2 * pad - kh) / stride + 1;
  const int64_t wo = (W + 2 * pad - kw) / stride + 1;
  check_invariant(ho > 0 && wo > 0, "conv2d: output would be empty");

  const int64_t K = Ci * kh * kw, P = ho * wo;
  auto cols = std::make_shared<Tensor>(Tensor({K, P}));
  detail::im2col(x->value, kh, kw, stride, pad, *cols, ho, wo);

  Tensor out({Co, ho, wo});
  {
    auto Wm = w->value.mat(Co, K);
    auto Cm = cols->mat();
    auto Ym = out.mat(Co, P);
    Ym.noalias() = Wm * Cm;
  }
  for (int64_t co = 0; co < Co; ++co) {
    const double bias = b->value[co];
    for (int64_t p = 0; p < P; ++p) out[co * P + p] += bias;
  }

  return make_node(
      std::move(out), {x, w, b},
      [x, w, b, cols, stride, pad, kh, kw, ho, wo](Node& n) {
        const int64_t Co = w->value.dim(0);
        const int64_t K = w->value.dim(1) * kh * kw;
        const int64_t P = ho * wo;
        auto G = n.grad.mat(Co, P);
        if (b->requires_grad) {
          b->ensure_grad();
          for (int64_t co = 0; co < Co; ++co) {
            double s = 0.0;
            for (int64_t p = 0; p < P; ++p) s += n.grad[co * P + p];
            b->grad[co] += s;
          }
        }
        if (w->requires_grad) {
          w->ensure_grad();
          auto dW = w->grad.mat(Co, K);
          dW.noalias() += G * cols->mat().transpose();
        }
        if (x->requires_grad) {
          x->ensure_grad();
          Tensor dcols({K, P});
          auto Dc = dcols.mat();
          Dc.noalias() = w->value.mat(Co, K).transpose() * G;
          detail::col2im_add(dcols, kh, kw, stride, pad, x->grad, ho, wo);
        }
      });
}

/// Nearest-neighbour 2x upsampling of a [C,H,W] tensor.
inline Var upsample_nearest2(const Var& x) {
  check_invariant(x->value.ndim() == 3, "upsample_nearest2: 3-D input required");
  const int64_t C = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
  Tensor out({C, 2 * H, 2 * W});
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < 2 * H; ++y)
      for (int64_t xx = 0; xx < 2 * W; ++xx)
        out.at3(c, y, xx) = x->value.at3(c, y / 2, xx / 2);
  return make_node(std::move(out), {x}, [x, C, H, W](Node& n) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < 2 * H; ++y)
        for (int64_t xx = 0; xx < 2 * W; ++xx)
          x->grad.at3(c, y / 2, xx / 2) += n.grad.at3(c, y, xx);
  });
}

/// Per-channel spatial normalization (no learnable affine), eps inside sqrt.
inline Var instance_norm(const Var& x, double eps = 1e-5) {
  check_invariant(x->value.ndim() == 3, "instance_norm: 3-D input required");
  const int64_t C = x->value.dim(0), P = x->value.dim(1) * x->value.dim(2);
  Tensor out(x->value.shape);
  std::vector<double> inv_std(static_cast<size_t>(C));
  for (int64_t c = 0; c < C; ++c) {
    const double* src = &x->value.data[static_cast<size_t>(c * P)];
    double mu = 0.0;
    for (int64_t p = 0; p < P; ++p) mu += src[p];
    mu /= static_cast<double>(P);
    double var = 0.0;
    for (int64_t p = 0; p < P; ++p) var += (src[p] - mu) * (src[p] - mu);
    var /= static_cast<double>(P);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(c)] = inv;
    double* dst = &out.data[static_cast<size_t>(c * P)];
    for (int64_t p = 0; p < P; ++p) dst[p] = (src[p] - mu) * inv;
  }
  return make_node(std::move(out), {x},
                   [x, inv_std = std::move(inv_std), C, P](Node& n) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int64_t c = 0; c < C; ++c) {
      const double* y = &n.value.data[static_cast<size_t>(c * P)];
      const double* g = &n.grad.data[static_cast<size_t>(c * P)];
      double gm = 0.0, gym = 0.0;
      for (int64_t p = 0; p < P; ++p) {
        gm += g[p];
        gym += g[p] * y[p];
      }
      gm /= static_cast<double>(P);
      gym /= static_cast<double>(P);
      const double inv = inv_std[static_cast<size_t>(c)];
      double* dx = &x->grad.data[static_cast<size_t>(c * P)];
      for (int64_t p = 0; p < P; ++p) dx[p] += inv * (g[p] - gm - y[p] * gym);
    }
  });
}

}  // namespace negcut
