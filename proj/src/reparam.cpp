#include "cdd/reparam.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "cdd/errors.hpp"
#include "cdd/metrics.hpp"

namespace cdd {

Conv2dLayer fold_norm(const Conv2dLayer& conv, const AffineNorm& norm) {
    const int d = conv.spec.out_c;
    if (norm.channels() != d) {
        throw ShapeError("fold_norm channel mismatch: conv " + std::to_string(d) + " vs norm " +
                         std::to_string(norm.channels()));
    }
    Conv2dLayer folded;
    folded.spec = conv.spec;
    folded.spec.has_bias = true;
    folded.kernel = conv.kernel.clone();
    folded.bias = Tensor::zeros({d});
    const std::size_t row = folded.kernel.size() / static_cast<std::size_t>(d);
    for (int c = 0; c < d; ++c) {
        const double denom = norm.running_var[static_cast<std::size_t>(c)] + norm.eps;
        if (denom <= 0.0) {
            throw NumericError("fold_norm: non-positive var+eps on channel " + std::to_string(c));
        }
        const double sd = std::sqrt(denom);
        const double g = norm.gamma.data()[static_cast<std::size_t>(c)];
        const double scale = g / sd;
        double* w = folded.kernel.data().data() + static_cast<std::size_t>(c) * row;
        for (std::size_t j = 0; j < row; ++j) w[j] *= scale;
        double b = norm.beta.data()[static_cast<std::size_t>(c)] -
                   g * norm.running_mean[static_cast<std::size_t>(c)] / sd;
        if (conv.bias.defined()) b += scale * conv.bias.data()[static_cast<std::size_t>(c)];
        folded.bias.data()[static_cast<std::size_t>(c)] = b;
    }
    return folded;
}

PrunedCompactor prune_compactor(const Compactor& compactor, double lambda) {
    if (lambda < 0.0) throw ShapeError("prune_compactor needs lambda >= 0");
    const int d = compactor.channels;
    std::vector<double> norms(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) {
        double s = 0.0;
        const double* row = compactor.kernel.data().data() + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) s += row[j] * row[j];
        norms[static_cast<std::size_t>(i)] = std::sqrt(s);
    }
    PrunedCompactor out;
    out.full = d;
    for (int i = 0; i < d; ++i) {
        if (norms[static_cast<std::size_t>(i)] >= lambda) out.kept_indices.push_back(i);
    }
    if (out.kept_indices.empty()) {
        const int best = static_cast<int>(
            std::max_element(norms.begin(), norms.end()) - norms.begin());
        out.kept_indices.push_back(best);
        out.forced_keep = true;
    }
    out.kept = static_cast<int>(out.kept_indices.size());
    out.kernel.resize(static_cast<std::size_t>(out.kept) * d);
    for (int e = 0; e < out.kept; ++e) {
        const int src = out.kept_indices[static_cast<std::size_t>(e)];
        std::copy_n(compactor.kernel.data().data() + static_cast<std::size_t>(src) * d, d,
                    out.kernel.begin() + static_cast<std::size_t>(e) * d);
    }
    return out;
}

SlimConv merge(const Conv2dLayer& folded, const PrunedCompactor& slim) {
    const int d = folded.spec.out_c;
    if (slim.full != d) {
        throw ShapeError("merge dimension mismatch: conv " + std::to_string(d) + " vs compactor " +
                         std::to_string(slim.full));
    }
    if (!folded.bias.defined()) throw ShapeError("merge requires a folded conv with bias");
    const int e_out = slim.kept;
    const int c = folded.spec.in_c, k = folded.spec.k;
    const std::size_t row = static_cast<std::size_t>(c) * k * k;
    SlimConv out;
    out.kernel = Tensor::zeros({e_out, c, k, k});
    out.bias = Tensor::zeros({e_out});
    for (int e = 0; e < e_out; ++e) {
        double* dst = out.kernel.data().data() + static_cast<std::size_t>(e) * row;
        double b = 0.0;
        for (int dd = 0; dd < d; ++dd) {
            const double w = slim.kernel[static_cast<std::size_t>(e) * d + dd];
            if (w == 0.0) continue;
            const double* src = folded.kernel.data().data() + static_cast<std::size_t>(dd) * row;
            for (std::size_t j = 0; j < row; ++j) dst[j] += w * src[j];
            b += w * folded.bias.data()[static_cast<std::size_t>(dd)];
        }
        out.bias.data()[static_cast<std::size_t>(e)] = b;
    }
    return out;
}

Conv2dLayer thin_downstream(const Conv2dLayer& conv1, const std::vector<int>& kept) {
    if (kept.empty()) throw ShapeError("thin_downstream: empty kept set");
    const int in_c = conv1.spec.in_c;
    for (int idx : kept) {
        if (idx < 0 || idx >= in_c) {
            throw ShapeError("thin_downstream: kept index " + std::to_string(idx) +
                             " out of range for " + std::to_string(in_c) + " input channels");
        }
    }
    Conv2dLayer out;
    out.spec = conv1.spec;
    out.spec.in_c = static_cast<int>(kept.size());
    const int o = conv1.spec.out_c, k = conv1.spec.k;
    out.kernel = Tensor::zeros({o, out.spec.in_c, k, k});
    for (int oc = 0; oc < o; ++oc) {
        for (std::size_t e = 0; e < kept.size(); ++e) {
            for (int j = 0; j < k * k; ++j) {
                out.kernel.data()[(static_cast<std::size_t>(oc) * kept.size() + e) * k * k + j] =
                    conv1.kernel.data()[(static_cast<std::size_t>(oc) * in_c + kept[e]) * k * k + j];
            }
        }
    }
    if (conv1.bias.defined()) out.bias = conv1.bias.clone();
    return out;
}

namespace {

// Independent projections from the plan numbers; must agree with the
// metrics module on the realized slim model.
long long project_params(const Model& student, const PrunePlan& plan) {
    const ModelConfig& cfg = student.config;
    long long total = static_cast<long long>(student.stem.kernel.size());
    total += 2LL * cfg.stage_widths[0];  // stem norm gamma/beta
    for (std::size_t i = 0; i < student.blocks.size(); ++i) {
        const ResidualBlock& b = student.blocks[i];
        const long long e = plan.blocks[i].kept;
        total += e * b.conv3.spec.in_c * b.conv3.spec.k * b.conv3.spec.k + e;  // merged conv
        total += static_cast<long long>(b.conv1.spec.out_c) * e + b.conv1.spec.out_c;
        if (b.shortcut) {
            total += static_cast<long long>(b.shortcut->kernel.size()) +
                     (b.shortcut->bias.defined() ? b.shortcut->spec.out_c : 0);
        }
    }
    total += static_cast<long long>(cfg.embedding_dim) * cfg.stage_widths.back() + cfg.embedding_dim;
    total += static_cast<long long>(cfg.class_count) * cfg.embedding_dim + cfg.class_count;
    return total;
}

long long project_flops(const Model& student, const PrunePlan& plan) {
    const ModelConfig& cfg = student.config;
    auto out_extent = [](int extent, const ConvSpec& s) {
        return (extent + 2 * s.padding - s.k) / s.stride + 1;
    };
    const int ho = out_extent(cfg.input_h, student.stem.spec);
    const int wo = out_extent(cfg.input_w, student.stem.spec);
    long long total = 2LL * ho * wo * student.stem.spec.out_c * student.stem.spec.in_c * 9;
    total += 3LL * student.stem.spec.out_c * ho * wo;  // norm (2) + relu (1)
    const long long hw = 1LL * ho * wo;                // blocks preserve extent
    for (std::size_t i = 0; i < student.blocks.size(); ++i) {
        const ResidualBlock& b = student.blocks[i];
        const long long e = plan.blocks[i].kept;
        total += 2LL * hw * e * b.conv3.spec.in_c * 9 + hw * e;  // merged conv + bias
        total += hw * e;                                         // relu
        total += 2LL * hw * b.conv1.spec.out_c * e + hw * b.conv1.spec.out_c;
        if (b.shortcut) {
            total += 2LL * hw * b.shortcut->spec.out_c * b.shortcut->spec.in_c +
                     hw * b.shortcut->spec.out_c;
        }
        total += 2LL * hw * b.conv1.spec.out_c;  // residual add + relu
    }
    total += hw * cfg.stage_widths.back();  // gap
    total += 2LL * cfg.stage_widths.back() * cfg.embedding_dim + cfg.embedding_dim;
    total += 2LL * cfg.embedding_dim * cfg.class_count + cfg.class_count;
    return total;
}

}  // namespace

Model zero_forced_reference(const Model& student, const PrunePlan& plan) {
    Model ref = student.clone();
    for (std::size_t i = 0; i < ref.blocks.size(); ++i) {
        if (!ref.blocks[i].compactor) continue;
        const int d = ref.blocks[i].compactor->channels;
        std::vector<bool> kept(static_cast<std::size_t>(d), false);
        for (int idx : plan.blocks[i].kept_indices) kept[static_cast<std::size_t>(idx)] = true;
        for (int r = 0; r < d; ++r) {
            if (kept[static_cast<std::size_t>(r)]) continue;
            double* row = ref.blocks[i].compactor->kernel.data().data() + static_cast<std::size_t>(r) * d;
            std::fill_n(row, d, 0.0);
        }
    }
    return ref;
}

double max_forward_deviation(Model& a, Model& b, int n_inputs, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    double worst = 0.0;
    for (int i = 0; i < n_inputs; ++i) {
        Tensor x = Tensor::zeros({1, a.config.in_channels, a.config.input_h, a.config.input_w});
        for (double& v : x.data()) v = dist(rng);
        Tape ta(false), tb(false);
        ForwardResult ra = forward_with_taps(a, ta, x, RunMode::eval);
        ForwardResult rb = forward_with_taps(b, tb, x, RunMode::eval);
        for (std::size_t j = 0; j < ra.embedding.size(); ++j) {
            worst = std::max(worst, std::fabs(ra.embedding.data()[j] - rb.embedding.data()[j]));
        }
        for (std::size_t j = 0; j < ra.logits.size(); ++j) {
            worst = std::max(worst, std::fabs(ra.logits.data()[j] - rb.logits.data()[j]));
        }
    }
    return worst;
}

Conversion convert_model(const Model& student, double lambda, int equivalence_inputs,
                         std::uint64_t seed) {
    for (std::size_t i = 0; i < student.blocks.size(); ++i) {
        if (!student.blocks[i].compactor) {
            throw CompatError("convert_model: block " + std::to_string(i) + " has no compactor");
        }
        if (!student.blocks[i].has_norm) {
            throw CompatError("convert_model: block " + std::to_string(i) + " has no norm to fold");
        }
    }

    Conversion conv;
    conv.report.params_before = count_params(student);
    conv.report.flops_before =
        count_flops(student, student.config.in_channels, student.config.input_h,
                    student.config.input_w);

    Model slim;
    slim.config = student.config;
    slim.config.with_compactors = false;
    slim.norm_momentum = student.norm_momentum;
    slim.stem.spec = student.stem.spec;
    slim.stem.kernel = student.stem.kernel.clone();
    if (student.stem.bias.defined()) slim.stem.bias = student.stem.bias.clone();
    slim.stem_norm.gamma = student.stem_norm.gamma.clone();
    slim.stem_norm.beta = student.stem_norm.beta.clone();
    slim.stem_norm.running_mean = student.stem_norm.running_mean;
    slim.stem_norm.running_var = student.stem_norm.running_var;
    slim.stem_norm.eps = student.stem_norm.eps;

    for (std::size_t i = 0; i < student.blocks.size(); ++i) {
        const ResidualBlock& b = student.blocks[i];
        try {
            const Conv2dLayer folded = fold_norm(b.conv3, b.norm);
            const PrunedCompactor pruned = prune_compactor(*b.compactor, lambda);
            const SlimConv merged = merge(folded, pruned);

            ResidualBlock nb;
            nb.has_norm = false;
            nb.conv3.spec = b.conv3.spec;
            nb.conv3.spec.out_c = pruned.kept;
            nb.conv3.spec.has_bias = true;
            nb.conv3.kernel = merged.kernel;
            nb.conv3.bias = merged.bias;
            nb.conv1 = thin_downstream(b.conv1, pruned.kept_indices);
            if (b.shortcut) {
                Conv2dLayer sc;
                sc.spec = b.shortcut->spec;
                sc.kernel = b.shortcut->kernel.clone();
                if (b.shortcut->bias.defined()) sc.bias = b.shortcut->bias.clone();
                nb.shortcut = std::move(sc);
            }
            slim.blocks.push_back(std::move(nb));

            PrunePlan::BlockPlan bp;
            bp.full = pruned.full;
            bp.kept = pruned.kept;
            bp.kept_indices = pruned.kept_indices;
            bp.forced_keep = pruned.forced_keep;
            conv.report.plan.blocks.push_back(std::move(bp));
        } catch (const std::exception& e) {
            throw CompatError("convert_model failed at block " + std::to_string(i) + ": " +
                              e.what());
        }
    }
    slim.emb_w = student.emb_w.clone();
    slim.emb_b = student.emb_b.clone();
    slim.cls_w = student.cls_w.clone();
    slim.cls_b = student.cls_b.clone();

    conv.report.plan.projected_params = project_params(student, conv.report.plan);
    conv.report.plan.projected_flops = project_flops(student, conv.report.plan);
    conv.report.params_after = count_params(slim);
    conv.report.flops_after =
        count_flops(slim, slim.config.in_channels, slim.config.input_h, slim.config.input_w);

    // deviation vs the zero-forced original, block taps and final outputs
    Model reference = zero_forced_reference(student, conv.report.plan);
    conv.report.equivalence_inputs = equivalence_inputs;
    conv.report.block_max_deviation.assign(student.blocks.size(), 0.0);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (int it = 0; it < equivalence_inputs; ++it) {
        Tensor x = Tensor::zeros(
            {1, student.config.in_channels, student.config.input_h, student.config.input_w});
        for (double& v : x.data()) v = dist(rng);
        Tape tr(false), ts(false);
        ForwardResult rr = forward_with_taps(reference, tr, x, RunMode::eval);
        ForwardResult rs = forward_with_taps(slim, ts, x, RunMode::eval);
        for (std::size_t m = 0; m < slim.blocks.size(); ++m) {
            const auto& kept = conv.report.plan.blocks[m].kept_indices;
            for (std::size_t e = 0; e < kept.size(); ++e) {
                const double ref_tap =
                    rr.block_features[m].data()[static_cast<std::size_t>(kept[e])];
                const double slim_tap = rs.block_features[m].data()[e];
                conv.report.block_max_deviation[m] =
                    std::max(conv.report.block_max_deviation[m], std::fabs(ref_tap - slim_tap));
            }
        }
        for (std::size_t j = 0; j < rr.embedding.size(); ++j) {
            conv.report.max_deviation = std::max(
                conv.report.max_deviation,
                std::fabs(rr.embedding.data()[j] - rs.embedding.data()[j]));
        }
        for (std::size_t j = 0; j < rr.logits.size(); ++j) {
            conv.report.max_deviation = std::max(
                conv.report.max_deviation, std::fabs(rr.logits.data()[j] - rs.logits.data()[j]));
        }
    }
    for (double d : conv.report.block_max_deviation) {
        conv.report.max_deviation = std::max(conv.report.max_deviation, d);
    }
    conv.slim = std::move(slim);
    return conv;
}

Model prune_conv_channels(const Model& student, double fraction) {
    if (fraction < 0.0 || fraction >= 1.0) {
        throw ShapeError("prune_conv_channels needs 0 <= fraction < 1");
    }
    Model out = student.clone();
    for (ResidualBlock& b : out.blocks) {
        const int d = b.mid_channels();
        const int drop = static_cast<int>(std::floor(fraction * d));
        if (drop == 0) continue;
        const std::size_t row_len = b.conv3.kernel.size() / static_cast<std::size_t>(d);
        std::vector<std::pair<double, int>> norms;
        for (int r = 0; r < d; ++r) {
            double s = 0.0;
            const double* row = b.conv3.kernel.data().data() + static_cast<std::size_t>(r) * row_len;
            for (std::size_t j = 0; j < row_len; ++j) s += row[j] * row[j];
            norms.emplace_back(std::sqrt(s), r);
        }
        std::sort(norms.begin(), norms.end());
        std::vector<int> kept;
        for (int r = drop; r < d; ++r) kept.push_back(norms[static_cast<std::size_t>(r)].second);
        std::sort(kept.begin(), kept.end());

        Conv2dLayer conv3;
        conv3.spec = b.conv3.spec;
        conv3.spec.out_c = static_cast<int>(kept.size());
        conv3.kernel = Tensor::zeros({conv3.spec.out_c, b.conv3.spec.in_c, b.conv3.spec.k,
                                      b.conv3.spec.k}, true);
        for (std::size_t e = 0; e < kept.size(); ++e) {
            std::copy_n(b.conv3.kernel.data().data() + static_cast<std::size_t>(kept[e]) * row_len,
                        row_len, conv3.kernel.data().data() + e * row_len);
        }
        AffineNorm norm;
        norm.eps = b.norm.eps;
        norm.gamma = Tensor::zeros({conv3.spec.out_c}, true);
        norm.beta = Tensor::zeros({conv3.spec.out_c}, true);
        for (std::size_t e = 0; e < kept.size(); ++e) {
            norm.gamma.data()[e] = b.norm.gamma.data()[static_cast<std::size_t>(kept[e])];
            norm.beta.data()[e] = b.norm.beta.data()[static_cast<std::size_t>(kept[e])];
            norm.running_mean.push_back(b.norm.running_mean[static_cast<std::size_t>(kept[e])]);
            norm.running_var.push_back(b.norm.running_var[static_cast<std::size_t>(kept[e])]);
        }
        b.conv1 = thin_downstream(b.conv1, kept);
        b.conv3 = std::move(conv3);
        b.norm = std::move(norm);
    }
    return out;
}

double ConversionReport::params_saved_pct() const {
    return params_before == 0 ? 0.0
                              : 100.0 * (1.0 - static_cast<double>(params_after) /
                                                   static_cast<double>(params_before));
}

double ConversionReport::flops_saved_pct() const {
    return flops_before == 0 ? 0.0
                             : 100.0 * (1.0 - static_cast<double>(flops_after) /
                                                  static_cast<double>(flops_before));
}

std::string ConversionReport::to_text() const {
    char buf[1024];
    std::string out = "flops_convention=multiply_add_counts_2\n";
    for (std::size_t i = 0; i < plan.blocks.size(); ++i) {
        const auto& b = plan.blocks[i];
        std::string kept;
        for (std::size_t j = 0; j < b.kept_indices.size(); ++j) {
            if (j) kept += ',';
            kept += std::to_string(b.kept_indices[j]);
        }
        std::snprintf(buf, sizeof buf,
                      "block=%zu full=%d kept=%d forced_keep=%d max_deviation=%.17g kept_indices=%s\n",
                      i, b.full, b.kept, b.forced_keep ? 1 : 0, block_max_deviation[i],
                      kept.c_str());
        out += buf;
    }
    std::snprintf(buf, sizeof buf, "equivalence_inputs=%d\n", equivalence_inputs);
    out += buf;
    std::snprintf(buf, sizeof buf, "max_deviation=%.17g\n", max_deviation);
    out += buf;
    std::snprintf(buf, sizeof buf, "params_before=%lld\nparams_after=%lld\nparams_saved_pct=%.2f\n",
                  params_before, params_after, params_saved_pct());
    out += buf;
    std::snprintf(buf, sizeof buf, "flops_before=%lld\nflops_after=%lld\nflops_saved_pct=%.2f\n",
                  flops_before, flops_after, flops_saved_pct());
    out += buf;
    std::snprintf(buf, sizeof buf, "projected_params=%lld\nprojected_flops=%lld\n",
                  plan.projected_params, plan.projected_flops);
    out += buf;
    return out;
}

}  // namespace cdd
