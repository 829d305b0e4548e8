#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cdd/tensor.hpp"

namespace cdd {

// Raised when ranking is requested against an empty gallery; callers skip
// mask construction for the step.
struct GalleryColdError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Fixed-capacity FIFO of pooled teacher features with identity labels.
// Index 0 is always the oldest surviving entry.
class GalleryQueue {
public:
    GalleryQueue(int capacity, int dim);

    int capacity() const { return capacity_; }
    int dim() const { return dim_; }
    int size() const { return size_; }
    std::span<const double> feature(int i) const;
    int label(int i) const;
    void push(std::span<const double> feature, int label);

private:
    int capacity_, dim_, head_ = 0, size_ = 0;
    std::vector<double> feats_;
    std::vector<int> labels_;
};

// Appends a batch of [N,D] features; FIFO eviction past capacity.
void queue_update(GalleryQueue& queue, const Tensor& features, const std::vector<int>& labels);

struct RankResult {
    // Per query: all gallery indices by descending cosine similarity,
    // ties broken by lower gallery index.
    std::vector<std::vector<int>> order;
    // Per query: copies of the top-K retrieved feature vectors.
    std::vector<std::vector<std::vector<double>>> retrieved;
};

// Ranks teacher query features against the queue. K is clamped to the
// current gallery size.
RankResult compute_rank(const GalleryQueue& queue, const Tensor& query_features, int k);

// Per-channel importance |f_s[d] * r[d]|: exactly the magnitude of channel
// d's contribution to the query-retrieved dot product.
std::vector<double> channel_importance(std::span<const double> student_feature,
                                       std::span<const double> retrieved_feature);

// Indices of the floor(p*D) smallest scores, ascending-index on ties;
// result sorted ascending.
std::vector<int> select_unimportant(std::span<const double> scores, double p);

// Exact intersection of index sets (each sorted ascending).
std::vector<int> intersect_sets(const std::vector<std::vector<int>>& sets);

struct ChannelMask {
    std::vector<std::uint8_t> keep;  // 1 = accumulation gradient flows
    int zero_bits() const;
    static ChannelMask all_ones(int d);
};

struct MaskBuildInfo {
    int unimportant = 0;  // |I|
    bool empty_intersection = false;
    int mask_zero_bits = 0;
};

// The full per-step mask pipeline, run independently per block: push the
// teacher features into the gallery, rank with teacher queries, score the
// student features against each retrieved neighbor, select the lowest-p
// fraction per pair, intersect across all pairs, and zero the selected
// mask bits. An empty intersection leaves the mask all ones.
std::vector<ChannelMask> build_masks(const std::vector<Tensor>& teacher_taps,
                                     const std::vector<Tensor>& student_taps,
                                     const std::vector<int>& labels,
                                     std::vector<GalleryQueue>& queues, double p, int k,
                                     std::vector<MaskBuildInfo>* info = nullptr);

}  // namespace cdd
