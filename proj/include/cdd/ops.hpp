#pragma once

#include <utility>
#include <vector>

#include "cdd/tensor.hpp"

namespace cdd::ops {

// Cross-correlation of input [N,C,H,W] with kernel [D,C,k,k]; bias is an
// optional [D] tensor (pass a default-constructed Tensor for none).
Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride, int padding);

// Elementwise max(0, x). Gradient at exactly 0 is 0.
Tensor relu(Tape& tape, const Tensor& x);

// Global average pool [N,C,H,W] -> [N,C].
Tensor gap(Tape& tape, const Tensor& x);

// x [N,F] * w^T [F,O] + b [O] -> [N,O].
Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b);

// Elementwise sum of two same-shape tensors.
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);

// Sum of all elements, as a scalar.
Tensor sum(Tape& tape, const Tensor& x);

// Per-channel normalization with batch statistics (biased variance).
// update_stats controls the running-statistics side effect only; it never
// changes forward values or gradients.
Tensor affine_norm_train(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         std::vector<double>& running_mean, std::vector<double>& running_var,
                         double eps, double momentum, bool update_stats);

// gamma * (x - running_mean) / sqrt(running_var + eps) + beta.
Tensor affine_norm_eval(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        const std::vector<double>& running_mean,
                        const std::vector<double>& running_var, double eps);

// Scalar combination sum_i coeff_i * term_i; every term must be scalar.
Tensor weighted_sum(Tape& tape, const std::vector<std::pair<double, Tensor>>& terms);

// Mean squared difference over all elements.
Tensor mse(Tape& tape, const Tensor& a, const Tensor& b);

// Cross-entropy against (1-eps) one-hot + eps/K targets, mean over batch.
Tensor softmax_ce_smooth(Tape& tape, const Tensor& logits, const std::vector<int>& labels,
                         double smoothing);

// T^2 * mean_n KL(softmax(t_n/T) || softmax(s_n/T)). The teacher side is
// treated as data: no gradient flows into teacher_logits.
Tensor kl_distill(Tape& tape, const Tensor& student_logits, const Tensor& teacher_logits,
                  double temperature);

// Batch-hard triplet loss on [N,emb] embeddings. Hardest positive is the
// same-label sample at maximum Euclidean distance (self included, so an
// anchor without another positive contributes d_ap = 0); hardest negative
// is the closest different-label sample. Ties pick the lowest index.
Tensor triplet_hard(Tape& tape, const Tensor& embeddings, const std::vector<int>& labels,
                    double margin);

// Sum over output-channel rows (dim 0) of the row L2 norm. Rows with norm
// below 1e-12 get zero gradient.
Tensor group_lasso(Tape& tape, const Tensor& kernel);

}  // namespace cdd::ops
