#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cdd/network.hpp"

namespace cdd {

// Folds fixed normalization statistics into the convolution:
//   W'_d = W_d * gamma_d / sqrt(var_d + eps)
//   B'_d = beta_d - gamma_d * mean_d / sqrt(var_d + eps)
Conv2dLayer fold_norm(const Conv2dLayer& conv, const AffineNorm& norm);

struct PrunedCompactor {
    std::vector<double> kernel;  // row-major [kept x full]
    int full = 0;
    int kept = 0;
    std::vector<int> kept_indices;  // strictly increasing
    bool forced_keep = false;       // no row cleared the threshold
};

// Keeps rows with L2 norm >= lambda; keeps the single largest row (and
// flags it) when none qualify. lambda = 0 keeps everything.
PrunedCompactor prune_compactor(const Compactor& compactor, double lambda);

struct SlimConv {
    Tensor kernel;  // [E, C, k, k]
    Tensor bias;    // [E]
};

// Collapses folded conv + slim compactor into one conv with bias:
//   W[e,c,u,v] = sum_d Wc[e,d] * W'[d,c,u,v],  B[e] = sum_d Wc[e,d] * B'[d]
SlimConv merge(const Conv2dLayer& folded, const PrunedCompactor& slim);

// Restricts the 1x1 conv's input channels to the kept set.
Conv2dLayer thin_downstream(const Conv2dLayer& conv1, const std::vector<int>& kept);

struct PrunePlan {
    struct BlockPlan {
        int full = 0;
        int kept = 0;
        std::vector<int> kept_indices;
        bool forced_keep = false;
    };
    std::vector<BlockPlan> blocks;
    long long projected_params = 0;
    long long projected_flops = 0;
};

struct ConversionReport {
    PrunePlan plan;
    std::vector<double> block_max_deviation;
    double max_deviation = 0.0;  // vs zero-forced reference, full forward
    long long params_before = 0, params_after = 0;
    long long flops_before = 0, flops_after = 0;
    int equivalence_inputs = 0;

    double params_saved_pct() const;
    double flops_saved_pct() const;
    std::string to_text() const;  // line-oriented report
};

struct Conversion {
    Model slim;
    ConversionReport report;
};

// fold -> prune -> merge -> thin for every block. The deviation is
// measured in eval mode against the input student with every pruned
// compactor row forced to zero (so with nothing pruned it is measured
// against the student itself), over seeded random inputs.
Conversion convert_model(const Model& student, double lambda, int equivalence_inputs = 8,
                         std::uint64_t seed = 20240501);

// Copy of the student with the compactor rows outside each block's kept
// set forced to exact zero.
Model zero_forced_reference(const Model& student, const PrunePlan& plan);

// Max absolute difference over embeddings and logits on seeded random
// inputs, eval mode.
double max_forward_deviation(Model& a, Model& b, int n_inputs, std::uint64_t seed);

// Structural cut for the compactor-free ablation: removes the floor(
// fraction * D) lowest-norm conv3x3 output channels of every block, slicing
// the norm statistics and the 1x1 input columns to match. No functional
// equivalence is implied; the normalization re-amplifies low-norm rows, so
// the removed channels generally still carry live signal.
Model prune_conv_channels(const Model& student, double fraction);

}  // namespace cdd
