#include "cdd/network.hpp"

#include <cmath>
#include <random>

#include "cdd/errors.hpp"

namespace cdd {

void ModelConfig::validate() const {
    if (stage_widths.empty()) throw ConfigError("model config needs at least one stage");
    for (int w : stage_widths) {
        if (w <= 0) throw ConfigError("zero-width stage in model config");
    }
    if (blocks_per_stage < 1) throw ConfigError("blocks_per_stage must be >= 1");
    if (embedding_dim < 1 || class_count < 1 || in_channels < 1) {
        throw ConfigError("embedding_dim, class_count and in_channels must be positive");
    }
    if (input_h < 4 || input_h != input_w) {
        throw ConfigError("model input must be square and at least 4x4");
    }
}

namespace {

Tensor he_normal(std::vector<int> shape, int fan_in, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (double& x : t.data()) x = dist(rng);
    return t;
}

Conv2dLayer make_conv(ConvSpec spec, std::mt19937_64& rng) {
    Conv2dLayer layer;
    layer.spec = spec;
    layer.kernel = he_normal({spec.out_c, spec.in_c, spec.k, spec.k},
                             spec.in_c * spec.k * spec.k, rng);
    if (spec.has_bias) layer.bias = Tensor::zeros({spec.out_c}, true);
    return layer;
}

AffineNorm make_norm(int channels) {
    AffineNorm n;
    n.gamma = Tensor::full({channels}, 1.0, true);
    n.beta = Tensor::zeros({channels}, true);
    n.running_mean.assign(static_cast<std::size_t>(channels), 0.0);
    n.running_var.assign(static_cast<std::size_t>(channels), 1.0);
    return n;
}

Compactor make_compactor(int channels) {
    Compactor c;
    c.channels = channels;
    c.kernel = Tensor::zeros({channels, channels, 1, 1}, true);
    for (int i = 0; i < channels; ++i) {
        c.kernel.data()[static_cast<std::size_t>(i) * channels + i] = 1.0;
    }
    return c;
}

Tensor conv_layer(Tape& tape, const Conv2dLayer& layer, const Tensor& x) {
    return ops::conv2d(tape, x, layer.kernel, layer.bias, layer.spec.stride, layer.spec.padding);
}

Tensor norm_layer(Tape& tape, AffineNorm& n, const Tensor& x, RunMode mode, double momentum,
                  bool update_stats) {
    if (mode == RunMode::train) {
        return ops::affine_norm_train(tape, x, n.gamma, n.beta, n.running_mean, n.running_var,
                                      n.eps, momentum, update_stats);
    }
    return ops::affine_norm_eval(tape, x, n.gamma, n.beta, n.running_mean, n.running_var, n.eps);
}

}  // namespace

Model build_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Model m;
    m.config = config;
    std::mt19937_64 rng(seed);

    const int w0 = config.stage_widths[0];
    // stride-3 stem; padding = H mod 3 makes the output extent exact
    m.stem = make_conv({config.in_channels, w0, 3, 3, config.input_h % 3, false}, rng);
    m.stem_norm = make_norm(w0);

    int in_c = w0;
    for (std::size_t s = 0; s < config.stage_widths.size(); ++s) {
        const int width = config.stage_widths[s];
        for (int b = 0; b < config.blocks_per_stage; ++b) {
            ResidualBlock block;
            block.conv3 = make_conv({in_c, width, 3, 1, 1, false}, rng);
            block.norm = make_norm(width);
            block.conv1 = make_conv({width, width, 1, 1, 0, true}, rng);
            if (in_c != width) {
                block.shortcut = make_conv({in_c, width, 1, 1, 0, true}, rng);
            }
            if (config.with_compactors) block.compactor = make_compactor(width);
            m.blocks.push_back(std::move(block));
            in_c = width;
        }
    }

    const int last = config.stage_widths.back();
    m.emb_w = he_normal({config.embedding_dim, last}, last, rng);
    m.emb_b = Tensor::zeros({config.embedding_dim}, true);
    m.cls_w = he_normal({config.class_count, config.embedding_dim}, config.embedding_dim, rng);
    m.cls_b = Tensor::zeros({config.class_count}, true);
    return m;
}

ForwardResult forward_with_taps(Model& m, Tape& tape, const Tensor& batch, RunMode mode,
                                bool update_stats) {
    if (batch.ndim() != 4 || batch.dim(1) != m.config.in_channels) {
        throw ShapeError("batch shape " + shape_str(batch.shape()) + " does not match model input of " +
                         std::to_string(m.config.in_channels) + " channels");
    }
    ForwardResult result;
    const bool track_stats = (mode == RunMode::train) && update_stats;

    Tensor x = conv_layer(tape, m.stem, batch);
    x = norm_layer(tape, m.stem_norm, x, mode, m.norm_momentum, track_stats);
    x = ops::relu(tape, x);

    for (ResidualBlock& block : m.blocks) {
        Tensor y = conv_layer(tape, block.conv3, x);
        if (block.has_norm) y = norm_layer(tape, block.norm, y, mode, m.norm_momentum, track_stats);
        if (block.compactor) {
            y = ops::conv2d(tape, y, block.compactor->kernel, Tensor(), 1, 0);
        }
        result.block_features.push_back(ops::gap(tape, y));
        Tensor z = ops::relu(tape, y);
        z = conv_layer(tape, block.conv1, z);
        Tensor sc = block.shortcut ? conv_layer(tape, *block.shortcut, x) : x;
        x = ops::relu(tape, ops::add(tape, z, sc));
    }

    Tensor pooled = ops::gap(tape, x);
    result.embedding = ops::linear(tape, pooled, m.emb_w, m.emb_b);
    result.logits = ops::linear(tape, result.embedding, m.cls_w, m.cls_b);
    return result;
}

std::vector<std::pair<std::string, Tensor>> Model::named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> params;
    params.emplace_back("stem.kernel", stem.kernel);
    params.emplace_back("stem.norm.gamma", stem_norm.gamma);
    params.emplace_back("stem.norm.beta", stem_norm.beta);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string p = "block" + std::to_string(i) + ".";
        const ResidualBlock& b = blocks[i];
        params.emplace_back(p + "conv3.kernel", b.conv3.kernel);
        if (b.conv3.bias.defined()) params.emplace_back(p + "conv3.bias", b.conv3.bias);
        if (b.has_norm) {
            params.emplace_back(p + "norm.gamma", b.norm.gamma);
            params.emplace_back(p + "norm.beta", b.norm.beta);
        }
        if (b.compactor) params.emplace_back(p + "compactor.kernel", b.compactor->kernel);
        params.emplace_back(p + "conv1.kernel", b.conv1.kernel);
        if (b.conv1.bias.defined()) params.emplace_back(p + "conv1.bias", b.conv1.bias);
        if (b.shortcut) {
            params.emplace_back(p + "shortcut.kernel", b.shortcut->kernel);
            if (b.shortcut->bias.defined()) params.emplace_back(p + "shortcut.bias", b.shortcut->bias);
        }
    }
    params.emplace_back("head.emb.w", emb_w);
    params.emplace_back("head.emb.b", emb_b);
    params.emplace_back("head.cls.w", cls_w);
    params.emplace_back("head.cls.b", cls_b);
    return params;
}

std::vector<std::pair<std::string, Tensor>> Model::compactor_kernels() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        if (blocks[i].compactor) {
            out.emplace_back("block" + std::to_string(i) + ".compactor.kernel",
                             blocks[i].compactor->kernel);
        }
    }
    return out;
}

void Model::set_requires_grad(bool rg) {
    for (auto& [name, t] : named_parameters()) {
        Tensor tt = t;
        tt.set_requires_grad(rg);
    }
}

void Model::zero_grad() {
    for (auto& [name, t] : named_parameters()) {
        Tensor tt = t;
        tt.zero_grad();
    }
}

Model Model::clone() const {
    Model copy;
    copy.config = config;
    copy.norm_momentum = norm_momentum;
    copy.stem.spec = stem.spec;
    copy.stem.kernel = stem.kernel.clone();
    if (stem.bias.defined()) copy.stem.bias = stem.bias.clone();
    copy.stem_norm.gamma = stem_norm.gamma.clone();
    copy.stem_norm.beta = stem_norm.beta.clone();
    copy.stem_norm.running_mean = stem_norm.running_mean;
    copy.stem_norm.running_var = stem_norm.running_var;
    copy.stem_norm.eps = stem_norm.eps;
    for (const ResidualBlock& b : blocks) {
        ResidualBlock nb;
        nb.has_norm = b.has_norm;
        nb.conv3.spec = b.conv3.spec;
        nb.conv3.kernel = b.conv3.kernel.clone();
        if (b.conv3.bias.defined()) nb.conv3.bias = b.conv3.bias.clone();
        if (b.has_norm) {
            nb.norm.gamma = b.norm.gamma.clone();
            nb.norm.beta = b.norm.beta.clone();
            nb.norm.running_mean = b.norm.running_mean;
            nb.norm.running_var = b.norm.running_var;
            nb.norm.eps = b.norm.eps;
        }
        if (b.compactor) {
            Compactor c;
            c.channels = b.compactor->channels;
            c.kernel = b.compactor->kernel.clone();
            nb.compactor = std::move(c);
        }
        nb.conv1.spec = b.conv1.spec;
        nb.conv1.kernel = b.conv1.kernel.clone();
        if (b.conv1.bias.defined()) nb.conv1.bias = b.conv1.bias.clone();
        if (b.shortcut) {
            Conv2dLayer sc;
            sc.spec = b.shortcut->spec;
            sc.kernel = b.shortcut->kernel.clone();
            if (b.shortcut->bias.defined()) sc.bias = b.shortcut->bias.clone();
            nb.shortcut = std::move(sc);
        }
        copy.blocks.push_back(std::move(nb));
    }
    copy.emb_w = emb_w.clone();
    copy.emb_b = emb_b.clone();
    copy.cls_w = cls_w.clone();
    copy.cls_b = cls_b.clone();
    return copy;
}

}  // namespace cdd
