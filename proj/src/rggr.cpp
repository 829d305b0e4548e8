#include "cdd/rggr.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cdd/errors.hpp"

namespace cdd {

GalleryQueue::GalleryQueue(int capacity, int dim) : capacity_(capacity), dim_(dim) {
    if (capacity < 1 || dim < 1) throw ShapeError("gallery queue needs positive capacity and dim");
    feats_.resize(static_cast<std::size_t>(capacity) * dim);
    labels_.resize(static_cast<std::size_t>(capacity));
}

std::span<const double> GalleryQueue::feature(int i) const {
    const int slot = (head_ + i) % capacity_;
    return {feats_.data() + static_cast<std::size_t>(slot) * dim_, static_cast<std::size_t>(dim_)};
}

int GalleryQueue::label(int i) const { return labels_[static_cast<std::size_t>((head_ + i) % capacity_)]; }

void GalleryQueue::push(std::span<const double> feature, int label) {
    if (static_cast<int>(feature.size()) != dim_) {
        throw ShapeError("gallery queue dimension mismatch: expected " + std::to_string(dim_) +
                         ", got " + std::to_string(feature.size()));
    }
    const int slot = (head_ + size_) % capacity_;
    std::copy(feature.begin(), feature.end(), feats_.begin() + static_cast<std::size_t>(slot) * dim_);
    labels_[static_cast<std::size_t>(slot)] = label;
    if (size_ < capacity_) {
        ++size_;
    } else {
        head_ = (head_ + 1) % capacity_;  // oldest evicted
    }
}

void queue_update(GalleryQueue& queue, const Tensor& features, const std::vector<int>& labels) {
    if (features.ndim() != 2 || features.dim(1) != queue.dim()) {
        throw ShapeError("queue_update feature shape " + shape_str(features.shape()) +
                         " does not match queue dim " + std::to_string(queue.dim()));
    }
    if (static_cast<int>(labels.size()) != features.dim(0)) {
        throw ShapeError("queue_update label count mismatch");
    }
    for (int i = 0; i < features.dim(0); ++i) {
        queue.push({features.data().data() + static_cast<std::size_t>(i) * queue.dim(),
                    static_cast<std::size_t>(queue.dim())},
                   labels[static_cast<std::size_t>(i)]);
    }
}

RankResult compute_rank(const GalleryQueue& queue, const Tensor& query_features, int k) {
    if (queue.size() == 0) throw GalleryColdError("gallery not warmed up");
    if (k < 1) throw ShapeError("compute_rank needs K >= 1");
    if (query_features.ndim() != 2 || query_features.dim(1) != queue.dim()) {
        throw ShapeError("compute_rank query shape " + shape_str(query_features.shape()) +
                         " does not match queue dim " + std::to_string(queue.dim()));
    }
    const int n = query_features.dim(0), d = queue.dim(), g = queue.size();
    const int top_k = std::min(k, g);

    std::vector<double> g_norm(static_cast<std::size_t>(g));
    for (int j = 0; j < g; ++j) {
        double s = 0.0;
        for (double v : queue.feature(j)) s += v * v;
        g_norm[static_cast<std::size_t>(j)] = std::max(std::sqrt(s), 1e-12);
    }

    RankResult result;
    result.order.resize(static_cast<std::size_t>(n));
    result.retrieved.resize(static_cast<std::size_t>(n));
    std::vector<double> sims(static_cast<std::size_t>(g));
    for (int i = 0; i < n; ++i) {
        const double* q = query_features.data().data() + static_cast<std::size_t>(i) * d;
        double qs = 0.0;
        for (int c = 0; c < d; ++c) qs += q[c] * q[c];
        const double q_norm = std::max(std::sqrt(qs), 1e-12);
        for (int j = 0; j < g; ++j) {
            std::span<const double> gf = queue.feature(j);
            double dot = 0.0;
            for (int c = 0; c < d; ++c) dot += q[c] * gf[static_cast<std::size_t>(c)];
            sims[static_cast<std::size_t>(j)] = dot / (q_norm * g_norm[static_cast<std::size_t>(j)]);
        }
        std::vector<int>& order = result.order[static_cast<std::size_t>(i)];
        order.resize(static_cast<std::size_t>(g));
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            if (sims[static_cast<std::size_t>(a)] != sims[static_cast<std::size_t>(b)]) {
                return sims[static_cast<std::size_t>(a)] > sims[static_cast<std::size_t>(b)];
            }
            return a < b;
        });
        for (int j = 0; j < top_k; ++j) {
            std::span<const double> gf = queue.feature(order[static_cast<std::size_t>(j)]);
            result.retrieved[static_cast<std::size_t>(i)].emplace_back(gf.begin(), gf.end());
        }
    }
    return result;
}

std::vector<double> channel_importance(std::span<const double> student_feature,
                                       std::span<const double> retrieved_feature) {
    if (student_feature.size() != retrieved_feature.size()) {
        throw ShapeError("channel_importance dimension mismatch");
    }
    std::vector<double> scores(student_feature.size());
    for (std::size_t d = 0; d < scores.size(); ++d) {
        scores[d] = std::fabs(student_feature[d] * retrieved_feature[d]);
    }
    return scores;
}

std::vector<int> select_unimportant(std::span<const double> scores, double p) {
    if (p <= 0.0 || p > 1.0) throw ShapeError("select_unimportant needs 0 < p <= 1");
    const int d = static_cast<int>(scores.size());
    const int pick = static_cast<int>(std::floor(p * d));
    std::vector<int> order(static_cast<std::size_t>(d));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores[static_cast<std::size_t>(a)] != scores[static_cast<std::size_t>(b)]) {
            return scores[static_cast<std::size_t>(a)] < scores[static_cast<std::size_t>(b)];
        }
        return a < b;
    });
    std::vector<int> out(order.begin(), order.begin() + pick);
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<int> intersect_sets(const std::vector<std::vector<int>>& sets) {
    if (sets.empty()) throw ShapeError("intersect_sets needs at least one set");
    std::vector<int> acc = sets[0];
    for (std::size_t i = 1; i < sets.size() && !acc.empty(); ++i) {
        std::vector<int> next;
        std::set_intersection(acc.begin(), acc.end(), sets[i].begin(), sets[i].end(),
                              std::back_inserter(next));
        acc = std::move(next);
    }
    return acc;
}

int ChannelMask::zero_bits() const {
    int n = 0;
    for (std::uint8_t b : keep) n += b == 0 ? 1 : 0;
    return n;
}

ChannelMask ChannelMask::all_ones(int d) {
    ChannelMask m;
    m.keep.assign(static_cast<std::size_t>(d), 1);
    return m;
}

std::vector<ChannelMask> build_masks(const std::vector<Tensor>& teacher_taps,
                                     const std::vector<Tensor>& student_taps,
                                     const std::vector<int>& labels,
                                     std::vector<GalleryQueue>& queues, double p, int k,
                                     std::vector<MaskBuildInfo>* info) {
    if (teacher_taps.size() != student_taps.size() || teacher_taps.size() != queues.size()) {
        throw ShapeError("build_masks needs one queue per tapped block");
    }
    std::vector<ChannelMask> masks;
    if (info) info->assign(teacher_taps.size(), {});
    for (std::size_t m = 0; m < teacher_taps.size(); ++m) {
        const Tensor& ft = teacher_taps[m];
        const Tensor& fs = student_taps[m];
        const int n = ft.dim(0), d = ft.dim(1);
        if (fs.dim(0) != n || fs.dim(1) != d) {
            throw ShapeError("build_masks tap shape mismatch at block " + std::to_string(m));
        }
        queue_update(queues[m], ft, labels);
        const RankResult rank = compute_rank(queues[m], ft, k);

        std::vector<std::vector<int>> selections;
        for (int i = 0; i < n; ++i) {
            const double* fsi = fs.data().data() + static_cast<std::size_t>(i) * d;
            for (const std::vector<double>& r : rank.retrieved[static_cast<std::size_t>(i)]) {
                const std::vector<double> scores =
                    channel_importance({fsi, static_cast<std::size_t>(d)}, r);
                selections.push_back(select_unimportant(scores, p));
            }
        }
        const std::vector<int> unimportant = intersect_sets(selections);

        ChannelMask mask = ChannelMask::all_ones(d);
        if (!unimportant.empty()) {
            for (int idx : unimportant) mask.keep[static_cast<std::size_t>(idx)] = 0;
        }
        if (info) {
            (*info)[m].unimportant = static_cast<int>(unimportant.size());
            (*info)[m].empty_intersection = unimportant.empty();
            (*info)[m].mask_zero_bits = mask.zero_bits();
        }
        masks.push_back(std::move(mask));
    }
    return masks;
}

}  // namespace cdd
