#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "negcut/autodiff.hpp"
#include "negcut/common.hpp"
#include "negcut/tensor.hpp"

namespace negcut {

/// How the per-query terms of one layer are reduced. Mean keeps the loss
/// magnitude independent of the number of sampled positions and is the
/// default; Sum is the literal multi-position reduction.
enum class PositionReduction { Mean, Sum };

/// Query/positive/negative vectors for one image at one tap layer.
/// q and k_pos are aligned (same sampled position per row); the negative
/// bank is shared by every query of the layer.
struct ContrastiveBatch {
  std::vector<std::vector<double>> q;      // S unit vectors, M-dim
  std::vector<std::vector<double>> k_pos;  // S unit vectors, aligned with q
  std::vector<std::vector<double>> k_neg;  // N unit vectors
  double tau = 0.07;

  void validate() const {
    require(!q.empty(), "ContrastiveBatch: S must be >= 1");
    require(!k_neg.empty(), "ContrastiveBatch: N must be >= 1");
    require(q.size() == k_pos.size(),
            "ContrastiveBatch: q and k_pos must have equal length");
    require(tau > 0.0, "ContrastiveBatch: tau must be positive");
    const size_t m = q[0].size();
    auto check_unit = [&](const std::vector<double>& v, const char* what) {
      require(v.size() == m, std::string("ContrastiveBatch: ") + what +
                                 " dimension mismatch");
      double n2 = 0.0;
      for (double x : v) {
        require(std::isfinite(x),
                std::string("ContrastiveBatch: non-finite entry in ") + what);
        n2 += x * x;
      }
      require(std::abs(std::sqrt(n2) - 1.0) <= 1e-6,
              std::string("ContrastiveBatch: ") + what + " is not unit norm");
    };
    for (const auto& v : q) check_unit(v, "q");
    for (const auto& v : k_pos) check_unit(v, "k_pos");
    for (const auto& v : k_neg) check_unit(v, "k_neg");
  }
};

/// Discriminator outputs on real and generated images (flattened patch
/// scores are fine; only the means matter).
struct GanScores {
  std::vector<double> real_scores;
  std::vector<double> fake_scores;
};

struct LossWeights {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
};

/// All scalar objectives of one training step.
struct LossBundle {
  double ad_cont = 0.0;  // adversarial contrastive loss
  double div = 0.0;      // diversity loss (<= 0)
  double gan_g = 0.0;    // generator GAN loss
  double gan_d = 0.0;    // discriminator GAN loss
  double loss_h = 0.0;   // representation-network objective
  double loss_g = 0.0;   // image-generator objective
  double loss_n = 0.0;   // negative-generator objective
};

namespace detail {

inline Tensor rows_tensor(const std::vector<std::vector<double>>& rows) {
  require(!rows.empty(), "rows_tensor: empty row list");
  const int64_t S = static_cast<int64_t>(rows.size());
  const int64_t M = static_cast<int64_t>(rows[0].size());
  Tensor t({S, M});
  for (int64_t r = 0; r < S; ++r) {
    require(static_cast<int64_t>(rows[static_cast<size_t>(r)].size()) == M,
            "rows_tensor: ragged rows");
    for (int64_t c = 0; c < M; ++c)
      t.at2(r, c) = rows[static_cast<size_t>(r)][static_cast<size_t>(c)];
  }
  return t;
}

}  // namespace detail

/// Graph-level InfoNCE on raw (not necessarily unit) vectors.
/// q, k_pos: S x M; k_neg: N x M, shared across queries. Stable via
/// row-wise log-sum-exp with max subtraction.
inline Var info_nce_graph(const Var& q, const Var& k_pos, const Var& k_neg,
                          double tau,
                          PositionReduction red = PositionReduction::Mean) {
  require(tau > 0.0, "info_nce: tau must be positive");
  check_invariant(q->value.ndim() == 2 && k_pos->value.ndim() == 2 &&
                      k_neg->value.ndim() == 2,
                  "info_nce: matrix inputs required");
  require(q->value.same_shape(k_pos->value),
          "info_nce: q and k_pos shape mismatch");
  require(q->value.dim(1) == k_neg->value.dim(1),
          "info_nce: embedding dimension mismatch");

  const double inv_tau = 1.0 / tau;
  Var l_pos = scale(rowwise_dot(q, k_pos), inv_tau);          // S x 1
  Var l_neg = scale(matmul(q, k_neg, false, true), inv_tau);  // S x N
  Var lse = logsumexp_rows(concat_cols(l_pos, l_neg));        // S x 1
  Var per_query = sub(lse, l_pos);
  return red == PositionReduction::Mean ? mean_all(per_query)
                                        : sum_all(per_query);
}

/// InfoNCE over one validated batch; the reduction over the S queries is
/// a mean by default (see PositionReduction).
inline double info_nce(const ContrastiveBatch& batch,
                       PositionReduction red = PositionReduction::Mean) {
  batch.validate();
  Var q = constant(detail::rows_tensor(batch.q));
  Var kp = constant(detail::rows_tensor(batch.k_pos));
  Var kn = constant(detail::rows_tensor(batch.k_neg));
  return info_nce_graph(q, kp, kn, batch.tau, red)->scalar_value();
}

/// Multi-layer patch-wise contrastive loss: sum of per-layer InfoNCE for
/// one image. The expectation over images is taken by the caller.
inline double patch_nce(const std::vector<ContrastiveBatch>& per_layer,
                        PositionReduction red = PositionReduction::Mean) {
  require(!per_layer.empty(), "patch_nce: empty layer list");
  double total = 0.0;
  for (const auto& b : per_layer) total += info_nce(b, red);
  return total;
}

inline Var diversity_loss_graph(const Var& out1, const Var& out2) {
  require(out1->value.same_shape(out2->value),
          "diversity_loss: dimension mismatch");
  return neg(l1_norm(sub(out1, out2)));
}

/// Negative L1 distance between two raw negative-generator outputs.
/// Zero iff the outputs coincide; minimizing it pushes them apart.
inline double diversity_loss(const std::vector<double>& out1,
                             const std::vector<double>& out2) {
  require(out1.size() == out2.size(), "diversity_loss: dimension mismatch");
  require(!out1.empty(), "diversity_loss: empty vectors");
  Var a = constant(Tensor({1, static_cast<int64_t>(out1.size())},
                          std::vector<double>(out1)));
  Var b = constant(Tensor({1, static_cast<int64_t>(out2.size())},
                          std::vector<double>(out2)));
  return diversity_loss_graph(a, b)->scalar_value();
}

inline Var lsgan_d_graph(const Var& real_scores, const Var& fake_scores) {
  Var real_term = mean_all(mul(affine(real_scores, -1.0, 1.0),
                               affine(real_scores, -1.0, 1.0)));
  Var fake_term = mean_all(mul(fake_scores, fake_scores));
  return add(real_term, fake_term);
}

inline Var lsgan_g_graph(const Var& fake_scores) {
  return mean_all(mul(affine(fake_scores, -1.0, 1.0),
                      affine(fake_scores, -1.0, 1.0)));
}

/// Least-squares discriminator objective:
/// mean[(1 - D(x_r))^2] + mean[D(x_f)^2].
inline double lsgan_d(const GanScores& scores) {
  require(!scores.real_scores.empty() && !scores.fake_scores.empty(),
          "lsgan_d: empty score list");
  for (double v : scores.real_scores)
    require(std::isfinite(v), "lsgan_d: non-finite real score");
  for (double v : scores.fake_scores)
    require(std::isfinite(v), "lsgan_d: non-finite fake score");
  Var r = constant(Tensor({static_cast<int64_t>(scores.real_scores.size())},
                          std::vector<double>(scores.real_scores)));
  Var f = constant(Tensor({static_cast<int64_t>(scores.fake_scores.size())},
                          std::vector<double>(scores.fake_scores)));
  return lsgan_d_graph(r, f)->scalar_value();
}

/// Least-squares generator objective: mean[(1 - D(x_f))^2].
inline double lsgan_g(const GanScores& scores) {
  require(!scores.fake_scores.empty(), "lsgan_g: empty fake score list");
  for (double v : scores.fake_scores)
    require(std::isfinite(v), "lsgan_g: non-finite fake score");
  Var f = constant(Tensor({static_cast<int64_t>(scores.fake_scores.size())},
                          std::vector<double>(scores.fake_scores)));
  return lsgan_g_graph(f)->scalar_value();
}

/// Assembles the three optimized objectives from their ingredients:
///   L_H = ad_cont
///   L_G = ad_cont + lambda1 * gan_g
///   L_N = -ad_cont + lambda2 * div
/// gan_d is not part of the weighted sum; the caller fills it in.
inline LossBundle assemble_losses(double ad_cont, double div, double gan_g,
                                  const LossWeights& w) {
  require(std::isfinite(ad_cont) && std::isfinite(div) && std::isfinite(gan_g),
          "assemble_losses: non-finite input");
  require(w.lambda1 >= 0.0 && w.lambda2 >= 0.0,
          "assemble_losses: negative loss weight");
  LossBundle b;
  b.ad_cont = ad_cont;
  b.div = div;
  b.gan_g = gan_g;
  b.loss_h = ad_cont;
  b.loss_g = ad_cont + w.lambda1 * gan_g;
  b.loss_n = -ad_cont + w.lambda2 * div;
  return b;
}

}  // namespace negcut
