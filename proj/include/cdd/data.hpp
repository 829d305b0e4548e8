#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "cdd/tensor.hpp"

namespace cdd {

enum class Split { train, query, gallery };

struct DatasetSpec {
    int num_identities = 32;
    int images_per_identity = 20;
    int channels = 3;
    int height = 32;
    int width = 32;
    double jitter = 1.0;  // scales hue shift, translation and noise
    std::uint64_t seed = 1234;
    double train_frac = 0.5;
    double query_frac = 0.25;
    double gallery_frac = 0.25;

    void validate() const;
};

// Identity-retrieval protocol: a fraction of identities is reserved for
// training; the remaining identities are never trained on and have their
// images divided between query and gallery.
struct Dataset {
    DatasetSpec spec;
    std::vector<Tensor> images;  // raw [C,H,W] values in [0,1]
    std::vector<int> identity;   // per image, global identity index
    std::vector<Split> split;
    std::vector<int> train_ids;  // global identity ids of the train split

    int num_train_classes() const { return static_cast<int>(train_ids.size()); }
    int class_of(int global_identity) const;  // index into train_ids, -1 if eval id
    std::vector<int> indices_of(Split s) const;
};

Dataset generate(const DatasetSpec& spec);

struct AugmentOps {
    bool normalize = true;
    int crop_pad = 2;           // 0 disables random cropping
    double flip_prob = 0.5;     // 0 disables flipping, 1 forces it
    double erase_prob = 0.5;
    double erase_min_frac = 0.02;
    double erase_max_frac = 0.2;  // 0 disables erasing
};

// Per-image z-score with a variance floor of 1e-8.
Tensor normalize_image(const Tensor& image);

// Applies normalization, random crop, random erasing and random horizontal
// flip, in that order, with all randomness drawn from rng.
Tensor augment(const Tensor& image, const AugmentOps& ops, std::mt19937_64& rng);

// Deterministic P-identity x S-sample batch plan. Every epoch covers each
// train identity at least once and keeps batches at exactly P distinct
// identities.
class PkBatcher {
public:
    PkBatcher(const Dataset& ds, int p, int s, std::uint64_t seed);

    int batches_per_epoch() const { return batches_per_epoch_; }
    int batch_size() const { return p_ * s_; }

    // Dataset indices for one epoch, shaped [batches][P*S].
    std::vector<std::vector<int>> epoch_indices(int epoch) const;

private:
    const Dataset* ds_;
    int p_, s_;
    std::uint64_t seed_;
    int batches_per_epoch_ = 0;
    std::vector<int> train_identities_;
    std::vector<std::vector<int>> images_by_identity_;
};

}  // namespace cdd
