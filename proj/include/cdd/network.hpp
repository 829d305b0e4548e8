#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cdd/ops.hpp"
#include "cdd/tensor.hpp"

namespace cdd {

struct ConvSpec {
    int in_c = 0;
    int out_c = 0;
    int k = 3;
    int stride = 1;
    int padding = 1;
    bool has_bias = false;
};

struct Conv2dLayer {
    ConvSpec spec;
    Tensor kernel;  // [out_c, in_c, k, k]
    Tensor bias;    // [out_c] when has_bias
};

struct AffineNorm {
    Tensor gamma;
    Tensor beta;
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double eps = 1e-5;
    int channels() const { return gamma.defined() ? gamma.dim(0) : 0; }
};

// Bias-free 1x1 channel mixer, identity-initialized. The only layer the
// sparsity penalty and the gradient masks ever touch.
struct Compactor {
    Tensor kernel;  // [D, D, 1, 1]
    int channels = 0;
};

struct ResidualBlock {
    Conv2dLayer conv3;  // in_c -> mid_c, 3x3
    bool has_norm = true;
    AffineNorm norm;
    std::optional<Compactor> compactor;  // mid_c x mid_c
    Conv2dLayer conv1;  // mid_c -> out_c, 1x1, bias
    std::optional<Conv2dLayer> shortcut;  // 1x1 projection on width change

    int mid_channels() const { return conv3.spec.out_c; }
    int out_channels() const { return conv1.spec.out_c; }
};

// All spatial reduction happens in the stride-3 stem; residual blocks keep
// their extent so shortcut and main paths always align. Convolution output
// extents must divide exactly, which rules out stride 2 anywhere along an
// even-sized input with 3x3/1x1 kernels.
struct ModelConfig {
    std::vector<int> stage_widths{16, 32, 64};
    int blocks_per_stage = 2;
    int embedding_dim = 64;
    int class_count = 16;
    int in_channels = 3;
    int input_h = 32;
    int input_w = 32;
    bool with_compactors = false;

    int num_blocks() const { return static_cast<int>(stage_widths.size()) * blocks_per_stage; }
    void validate() const;
};

struct ForwardResult {
    Tensor embedding;                    // [N, emb]
    Tensor logits;                       // [N, classes]
    std::vector<Tensor> block_features;  // per block, GAP of the tap point [N, D_m]
};

enum class RunMode { train, eval };

struct Model {
    ModelConfig config;
    Conv2dLayer stem;
    AffineNorm stem_norm;
    std::vector<ResidualBlock> blocks;
    Tensor emb_w, emb_b;  // [emb, last_width], [emb]
    Tensor cls_w, cls_b;  // [classes, emb], [classes]
    double norm_momentum = 0.1;

    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
    std::vector<std::pair<std::string, Tensor>> compactor_kernels() const;
    void set_requires_grad(bool rg);
    void zero_grad();
    Model clone() const;
};

// Deterministic He-normal initialization; compactors start as exact
// identities and draw nothing from the stream, so a teacher and a student
// built from the same seed share every other parameter bit-for-bit.
Model build_model(const ModelConfig& config, std::uint64_t seed);

// Runs the network and collects the per-block tap features. Teacher taps
// sit after conv3x3+norm; student taps after the compactor. In train mode
// normalization uses batch statistics; update_stats gates the running
// statistics update only.
ForwardResult forward_with_taps(Model& m, Tape& tape, const Tensor& batch, RunMode mode,
                                bool update_stats = true);

}  // namespace cdd
