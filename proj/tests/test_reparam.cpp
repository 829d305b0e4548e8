#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cdd/errors.hpp"
#include "cdd/metrics.hpp"
#include "cdd/ops.hpp"
#include "cdd/reparam.hpp"
#include "oracle_util.hpp"

using namespace cdd;

namespace {

AffineNorm make_norm_vals(std::vector<double> gamma, std::vector<double> beta,
                          std::vector<double> mean, std::vector<double> var) {
    AffineNorm n;
    n.gamma = Tensor::from_data({static_cast<int>(gamma.size())}, gamma);
    n.beta = Tensor::from_data({static_cast<int>(beta.size())}, beta);
    n.running_mean = std::move(mean);
    n.running_var = std::move(var);
    return n;
}

Compactor compactor_from(std::vector<double> rows, int d) {
    Compactor c;
    c.channels = d;
    c.kernel = Tensor::from_data({d, d, 1, 1}, std::move(rows));
    return c;
}

ModelConfig student_config() {
    ModelConfig cfg;
    cfg.stage_widths = {6, 8};
    cfg.blocks_per_stage = 1;
    cfg.embedding_dim = 8;
    cfg.class_count = 4;
    cfg.input_h = cfg.input_w = 9;
    cfg.with_compactors = true;
    return cfg;
}

}  // namespace

TEST_CASE("fold_norm identity statistics leave the conv unchanged") {
    std::mt19937_64 rng(1);
    Conv2dLayer conv;
    conv.spec = {2, 3, 3, 1, 1, false};
    conv.kernel = oracle::random_tensor({3, 2, 3, 3}, rng);
    const double eps = 1e-5;
    AffineNorm n = make_norm_vals({1, 1, 1}, {0, 0, 0}, {0, 0, 0},
                                  {1.0 - eps, 1.0 - eps, 1.0 - eps});
    n.eps = eps;
    Conv2dLayer folded = fold_norm(conv, n);
    CHECK(oracle::max_abs_diff(folded.kernel.data(), conv.kernel.data()) < 1e-14);
    for (double b : folded.bias.data()) CHECK(b == doctest::Approx(0.0));
}

TEST_CASE("fold_norm pure scale doubles the weights") {
    std::mt19937_64 rng(2);
    Conv2dLayer conv;
    conv.spec = {2, 2, 3, 1, 1, false};
    conv.kernel = oracle::random_tensor({2, 2, 3, 3}, rng);
    const double eps = 1e-5;
    AffineNorm n = make_norm_vals({2, 2}, {0, 0}, {0, 0}, {1.0 - eps, 1.0 - eps});
    n.eps = eps;
    Conv2dLayer folded = fold_norm(conv, n);
    for (std::size_t i = 0; i < conv.kernel.size(); ++i) {
        CHECK(folded.kernel.data()[i] == doctest::Approx(2.0 * conv.kernel.data()[i]));
    }
}

TEST_CASE("fold_norm forward equivalence on random statistics") {
    std::mt19937_64 rng(3);
    Conv2dLayer conv;
    conv.spec = {3, 4, 3, 1, 1, false};
    conv.kernel = oracle::random_tensor({4, 3, 3, 3}, rng);
    AffineNorm n = make_norm_vals({1.3, -0.4, 0.9, 2.0}, {0.1, 0.2, -0.7, 0.0},
                                  {0.5, -1.0, 0.2, 0.0}, {1.7, 0.3, 2.5, 0.9});
    Conv2dLayer folded = fold_norm(conv, n);
    Tensor x = oracle::random_tensor({2, 3, 6, 6}, rng);
    Tape t(false);
    Tensor unfolded =
        ops::affine_norm_eval(t, ops::conv2d(t, x, conv.kernel, Tensor(), 1, 1), n.gamma, n.beta,
                              n.running_mean, n.running_var, n.eps);
    Tensor direct = ops::conv2d(t, x, folded.kernel, folded.bias, 1, 1);
    CHECK(oracle::max_abs_diff(unfolded.data(), direct.data()) < 1e-10);
}

TEST_CASE("fold_norm rejects non-positive variance") {
    Conv2dLayer conv;
    conv.spec = {1, 1, 3, 1, 1, false};
    conv.kernel = Tensor::zeros({1, 1, 3, 3});
    AffineNorm n = make_norm_vals({1}, {0}, {0}, {-1.0});
    n.eps = 1e-5;
    CHECK_THROWS_AS(fold_norm(conv, n), NumericError);
}

TEST_CASE("prune keeps the identity compactor intact") {
    Compactor c = compactor_from({1, 0, 0, 1}, 2);
    PrunedCompactor p = prune_compactor(c, 1e-5);
    CHECK(p.kept == 2);
    CHECK(p.kept_indices == std::vector<int>{0, 1});
    CHECK_FALSE(p.forced_keep);
}

TEST_CASE("prune drops rows under the threshold") {
    Compactor c = compactor_from({1e-6, 0.0, 0.3, 0.4}, 2);  // norms {1e-6, 0.5}
    PrunedCompactor p = prune_compactor(c, 1e-5);
    CHECK(p.kept == 1);
    CHECK(p.kept_indices == std::vector<int>{1});
    CHECK(p.kernel == std::vector<double>{0.3, 0.4});
}

TEST_CASE("prune keeps the largest row when nothing qualifies") {
    Compactor c = compactor_from({1e-8, 0.0, 3e-8, 0.0}, 2);
    PrunedCompactor p = prune_compactor(c, 1e-5);
    CHECK(p.kept == 1);
    CHECK(p.kept_indices == std::vector<int>{1});
    CHECK(p.forced_keep);
}

TEST_CASE("prune matches an independent norm scan") {
    std::mt19937_64 rng(4);
    Compactor c;
    c.channels = 8;
    c.kernel = oracle::random_tensor({8, 8, 1, 1}, rng, false, 0.01);
    const double lambda = 0.012;
    PrunedCompactor p = prune_compactor(c, lambda);
    std::vector<int> expect;
    for (int i = 0; i < 8; ++i) {
        double s = 0.0;
        for (int j = 0; j < 8; ++j) {
            const double v = c.kernel.data()[static_cast<std::size_t>(i) * 8 + j];
            s += v * v;
        }
        if (std::sqrt(s) >= lambda) expect.push_back(i);
    }
    CHECK(p.kept_indices == expect);
}

TEST_CASE("merge with the identity compactor is exact") {
    std::mt19937_64 rng(5);
    Conv2dLayer folded;
    folded.spec = {3, 4, 3, 1, 1, true};
    folded.kernel = oracle::random_tensor({4, 3, 3, 3}, rng);
    folded.bias = oracle::random_tensor({4}, rng);
    Compactor ident = compactor_from({1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1}, 4);
    SlimConv merged = merge(folded, prune_compactor(ident, 1e-5));
    CHECK(oracle::max_abs_diff(merged.kernel.data(), folded.kernel.data()) == 0.0);
    CHECK(oracle::max_abs_diff(merged.bias.data(), folded.bias.data()) == 0.0);
}

TEST_CASE("merge of a 2-to-1 compactor is the linear combination") {
    std::mt19937_64 rng(6);
    Conv2dLayer folded;
    folded.spec = {2, 2, 3, 1, 1, true};
    folded.kernel = oracle::random_tensor({2, 2, 3, 3}, rng);
    folded.bias = oracle::random_tensor({2}, rng);
    const double a = 0.7, b = -1.2;
    PrunedCompactor slim;
    slim.full = 2;
    slim.kept = 1;
    slim.kept_indices = {0};
    slim.kernel = {a, b};
    SlimConv merged = merge(folded, slim);
    for (std::size_t j = 0; j < 18; ++j) {
        const double expect = a * folded.kernel.data()[j] + b * folded.kernel.data()[18 + j];
        CHECK(merged.kernel.data()[j] == doctest::Approx(expect).epsilon(1e-14));
    }
    CHECK(merged.bias.data()[0] ==
          doctest::Approx(a * folded.bias.data()[0] + b * folded.bias.data()[1]));
}

TEST_CASE("merge forward equivalence on random compactors") {
    std::mt19937_64 rng(7);
    Conv2dLayer folded;
    folded.spec = {3, 8, 3, 1, 1, true};
    folded.kernel = oracle::random_tensor({8, 3, 3, 3}, rng);
    folded.bias = oracle::random_tensor({8}, rng);
    Compactor c;
    c.channels = 8;
    c.kernel = oracle::random_tensor({8, 8, 1, 1}, rng);
    // zero five rows so E = 3
    for (int r : {1, 2, 4, 6, 7}) {
        for (int j = 0; j < 8; ++j) c.kernel.data()[static_cast<std::size_t>(r) * 8 + j] = 0.0;
    }
    PrunedCompactor pruned = prune_compactor(c, 1e-5);
    REQUIRE(pruned.kept == 3);
    SlimConv merged = merge(folded, pruned);

    Tape t(false);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor x = oracle::random_tensor({1, 3, 5, 5}, rng);
        Tensor full = ops::conv2d(t, x, folded.kernel, folded.bias, 1, 1);
        Tensor mixed = ops::conv2d(t, full, c.kernel, Tensor(), 1, 0);
        Tensor slim_out = ops::conv2d(t, x, merged.kernel, merged.bias, 1, 1);
        // compare kept channels of the unmerged pipeline with the slim conv
        const int hw = 25;
        for (int e = 0; e < 3; ++e) {
            const int src = pruned.kept_indices[static_cast<std::size_t>(e)];
            for (int j = 0; j < hw; ++j) {
                const double a = mixed.data()[static_cast<std::size_t>(src) * hw + j];
                const double b = slim_out.data()[static_cast<std::size_t>(e) * hw + j];
                CHECK(std::fabs(a - b) < 1e-10);
            }
        }
    }
}

TEST_CASE("thin_downstream keeps kernels aligned with kept channels") {
    std::mt19937_64 rng(8);
    Conv2dLayer conv1;
    conv1.spec = {2, 3, 1, 1, 0, true};
    conv1.kernel = oracle::random_tensor({3, 2, 1, 1}, rng);
    conv1.bias = oracle::random_tensor({3}, rng);

    Conv2dLayer same = thin_downstream(conv1, {0, 1});
    CHECK(oracle::max_abs_diff(same.kernel.data(), conv1.kernel.data()) == 0.0);

    Conv2dLayer cut = thin_downstream(conv1, {1});
    CHECK(cut.spec.in_c == 1);
    for (int oc = 0; oc < 3; ++oc) {
        CHECK(cut.kernel.data()[static_cast<std::size_t>(oc)] ==
              conv1.kernel.data()[static_cast<std::size_t>(oc) * 2 + 1]);
    }
    CHECK_THROWS_AS(thin_downstream(conv1, {}), ShapeError);
    CHECK_THROWS_AS(thin_downstream(conv1, {5}), ShapeError);
}

TEST_CASE("thinned block equals zero-forced full block") {
    std::mt19937_64 rng(9);
    // a conv1 applied to a feature map whose dropped channels are zeroed
    Conv2dLayer conv1;
    conv1.spec = {4, 3, 1, 1, 0, true};
    conv1.kernel = oracle::random_tensor({3, 4, 1, 1}, rng);
    conv1.bias = oracle::random_tensor({3}, rng);
    const std::vector<int> kept{0, 2};
    Conv2dLayer thin = thin_downstream(conv1, kept);

    Tape t(false);
    Tensor x = oracle::random_tensor({2, 4, 4, 4}, rng);
    Tensor x_zeroed = x.clone();
    for (int n = 0; n < 2; ++n)
        for (int ch : {1, 3})
            for (int j = 0; j < 16; ++j)
                x_zeroed.data()[(static_cast<std::size_t>(n) * 4 + ch) * 16 + j] = 0.0;
    Tensor x_sliced = Tensor::zeros({2, 2, 4, 4});
    for (int n = 0; n < 2; ++n)
        for (std::size_t e = 0; e < kept.size(); ++e)
            for (int j = 0; j < 16; ++j)
                x_sliced.data()[(static_cast<std::size_t>(n) * 2 + e) * 16 + j] =
                    x.data()[(static_cast<std::size_t>(n) * 4 + kept[e]) * 16 + j];

    Tensor full = ops::conv2d(t, x_zeroed, conv1.kernel, conv1.bias, 1, 0);
    Tensor slim = ops::conv2d(t, x_sliced, thin.kernel, thin.bias, 1, 0);
    CHECK(oracle::max_abs_diff(full.data(), slim.data()) < 1e-10);
}

TEST_CASE("convert_model on an untrained student is the identity conversion") {
    Model student = build_model(student_config(), 77);
    Conversion conv = convert_model(student, 1e-5, 8, 1);
    for (const auto& b : conv.report.plan.blocks) {
        CHECK(b.kept == b.full);
        CHECK_FALSE(b.forced_keep);
    }
    CHECK(conv.report.max_deviation < 1e-10);
    CHECK(conv.report.params_after < conv.report.params_before);  // compactors dropped
}

TEST_CASE("convert_model prunes exactly the zeroed rows") {
    Model student = build_model(student_config(), 78);
    // zero rows {1,3} of block 0 and {2} of block 1
    for (int r : {1, 3}) {
        const int d = student.blocks[0].compactor->channels;
        for (int j = 0; j < d; ++j)
            student.blocks[0].compactor->kernel.data()[static_cast<std::size_t>(r) * d + j] = 0.0;
    }
    {
        const int d = student.blocks[1].compactor->channels;
        for (int j = 0; j < d; ++j)
            student.blocks[1].compactor->kernel.data()[static_cast<std::size_t>(2) * d + j] = 0.0;
    }
    Conversion conv = convert_model(student, 1e-5, 8, 2);
    CHECK(conv.report.plan.blocks[0].kept == conv.report.plan.blocks[0].full - 2);
    CHECK(conv.report.plan.blocks[1].kept == conv.report.plan.blocks[1].full - 1);
    CHECK(conv.report.max_deviation < 1e-10);

    // fewer parameters than the compactor-free heavy backbone
    ModelConfig heavy_cfg = student_config();
    heavy_cfg.with_compactors = false;
    Model heavy = build_model(heavy_cfg, 78);
    CHECK(count_params(conv.slim) < count_params(heavy));
}

TEST_CASE("convert_model deviation tracks perturbed compactors exactly") {
    Model student = build_model(student_config(), 79);
    std::mt19937_64 rng(10);
    std::normal_distribution<double> d(0.0, 0.2);
    for (auto& [name, k] : student.compactor_kernels()) {
        Tensor kk = k;
        for (double& v : kk.data()) v += d(rng);
    }
    Conversion conv = convert_model(student, 0.0, 8, 3);  // lambda 0: E = D path
    for (const auto& b : conv.report.plan.blocks) CHECK(b.kept == b.full);
    CHECK(conv.report.max_deviation < 1e-10);
}

TEST_CASE("raising lambda never grows the kept set") {
    std::mt19937_64 rng(11);
    Compactor c;
    c.channels = 10;
    c.kernel = oracle::random_tensor({10, 10, 1, 1}, rng, false, 0.05);
    int prev = 11;
    for (double lambda : {0.0, 1e-3, 5e-2, 1e-1, 0.3, 1.0}) {
        const PrunedCompactor p = prune_compactor(c, lambda);
        CHECK(p.kept <= prev);
        prev = p.kept;
    }
}

TEST_CASE("plan projections equal realized slim model counts") {
    Model student = build_model(student_config(), 80);
    std::mt19937_64 rng(12);
    // push some rows under the threshold
    for (auto& [name, k] : student.compactor_kernels()) {
        Tensor kk = k;
        const int d = static_cast<int>(std::sqrt(static_cast<double>(kk.size())));
        for (int r = 0; r < d; r += 3) {
            for (int j = 0; j < d; ++j)
                kk.data()[static_cast<std::size_t>(r) * d + j] *= 1e-9;
        }
    }
    Conversion conv = convert_model(student, 1e-5, 4, 13);
    CHECK(conv.report.plan.projected_params == conv.report.params_after);
    CHECK(conv.report.plan.projected_flops == conv.report.flops_after);
}

TEST_CASE("convert_model rejects a compactor-free model") {
    ModelConfig cfg = student_config();
    cfg.with_compactors = false;
    Model teacher = build_model(cfg, 81);
    CHECK_THROWS_AS(convert_model(teacher, 1e-5, 2, 1), CompatError);
}
