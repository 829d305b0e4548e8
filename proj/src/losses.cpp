#include "cdd/losses.hpp"

#include <cmath>

#include "cdd/errors.hpp"
#include "cdd/ops.hpp"

namespace cdd {

Tensor loss_dl(Tape& tape, const std::vector<Tensor>& teacher_taps,
               const std::vector<Tensor>& student_taps) {
    if (teacher_taps.size() != student_taps.size() || teacher_taps.empty()) {
        throw ShapeError("loss_dl needs matching non-empty tap lists, got " +
                         std::to_string(teacher_taps.size()) + " vs " +
                         std::to_string(student_taps.size()));
    }
    const double inv_m = 1.0 / static_cast<double>(teacher_taps.size());
    std::vector<std::pair<double, Tensor>> terms;
    terms.reserve(teacher_taps.size());
    for (std::size_t i = 0; i < teacher_taps.size(); ++i) {
        terms.emplace_back(inv_m, ops::mse(tape, student_taps[i], teacher_taps[i]));
    }
    return ops::weighted_sum(tape, terms);
}

Tensor loss_id(Tape& tape, const Tensor& logits, const std::vector<int>& labels, double smoothing) {
    return ops::softmax_ce_smooth(tape, logits, labels, smoothing);
}

Tensor loss_triplet(Tape& tape, const Tensor& embeddings, const std::vector<int>& labels,
                    double margin) {
    return ops::triplet_hard(tape, embeddings, labels, margin);
}

Tensor loss_kl(Tape& tape, const Tensor& student_logits, const Tensor& teacher_logits,
               double temperature) {
    return ops::kl_distill(tape, student_logits, teacher_logits, temperature);
}

Tensor loss_np(Tape& tape, const std::vector<Tensor>& compactor_kernels) {
    if (compactor_kernels.empty()) return Tensor::scalar(0.0);
    std::vector<std::pair<double, Tensor>> terms;
    terms.reserve(compactor_kernels.size());
    for (const Tensor& k : compactor_kernels) {
        terms.emplace_back(1.0, ops::group_lasso(tape, k));
    }
    return ops::weighted_sum(tape, terms);
}

LossBreakdown loss_total(Tape& tape, const Tensor& dl, const Tensor& id, const Tensor& tri,
                         const Tensor& kl, const Tensor& np, double alpha) {
    const std::pair<const char*, const Tensor*> parts[] = {
        {"l_dl", &dl}, {"l_id", &id}, {"l_tri", &tri}, {"l_kl", &kl}, {"l_np", &np}};
    for (const auto& [name, t] : parts) {
        if (!std::isfinite(t->value())) {
            throw NumericError(std::string("loss_total: non-finite ") + name + " = " +
                               std::to_string(t->value()));
        }
    }
    LossBreakdown b;
    b.alpha = alpha;
    b.l_dl = dl.value();
    b.l_id = id.value();
    b.l_tri = tri.value();
    b.l_kl = kl.value();
    b.l_np = np.value();
    b.acc = ops::weighted_sum(tape, {{0.5, dl}, {1.0, id}, {1.0, tri}, {1.0, kl}});
    b.total = ops::weighted_sum(tape, {{1.0, b.acc}, {alpha, np}});
    b.l_acc = b.acc.value();
    b.l_total = b.total.value();
    return b;
}

}  // namespace cdd
