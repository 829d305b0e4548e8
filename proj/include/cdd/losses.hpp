#pragma once

#include <vector>

#include "cdd/tensor.hpp"

namespace cdd {

// Scalar values of each objective term plus the two tape scalars the
// training loop backpropagates. The total follows
//   l_total = 0.5*l_dl + l_id + l_tri + l_kl + alpha*l_np
// and l_acc is the total minus the sparsity term.
struct LossBreakdown {
    double l_dl = 0.0;
    double l_id = 0.0;
    double l_tri = 0.0;
    double l_kl = 0.0;
    double l_np = 0.0;
    double l_acc = 0.0;
    double l_total = 0.0;
    double alpha = 0.0;
    Tensor acc;    // 0.5*dl + id + tri + kl
    Tensor total;  // acc + alpha*np
};

// Block-wise feature alignment: mean over blocks of the mean squared
// difference between pooled teacher and student taps.
Tensor loss_dl(Tape& tape, const std::vector<Tensor>& teacher_taps,
               const std::vector<Tensor>& student_taps);

// Label-smoothed cross-entropy, mean over the batch.
Tensor loss_id(Tape& tape, const Tensor& logits, const std::vector<int>& labels, double smoothing);

// Batch-hard triplet loss.
Tensor loss_triplet(Tape& tape, const Tensor& embeddings, const std::vector<int>& labels,
                    double margin);

// Temperature-scaled distillation divergence.
Tensor loss_kl(Tape& tape, const Tensor& student_logits, const Tensor& teacher_logits,
               double temperature);

// Group lasso over compactor output-channel rows, summed across compactors.
Tensor loss_np(Tape& tape, const std::vector<Tensor>& compactor_kernels);

// Combines the five terms; rejects non-finite parts naming the offender.
LossBreakdown loss_total(Tape& tape, const Tensor& dl, const Tensor& id, const Tensor& tri,
                         const Tensor& kl, const Tensor& np, double alpha);

}  // namespace cdd
