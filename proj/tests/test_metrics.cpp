#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cdd/errors.hpp"
#include "cdd/metrics.hpp"
#include "oracle_util.hpp"

using namespace cdd;

namespace {

// Selection-sort ranking plus direct AP/R1 counting, independent of the
// library paths.
struct BruteForce {
    std::vector<std::vector<int>> rankings;
    double map = 0.0;
    double r1 = 0.0;

    BruteForce(const Tensor& q, const Tensor& g, const std::vector<int>& ql,
               const std::vector<int>& gl) {
        const int nq = q.dim(0), ng = g.dim(0), e = q.dim(1);
        auto cosine = [&](int i, int j) {
            double dot = 0, qn = 0, gn = 0;
            for (int d = 0; d < e; ++d) {
                const double a = q.data()[static_cast<std::size_t>(i) * e + d];
                const double b = g.data()[static_cast<std::size_t>(j) * e + d];
                dot += a * b;
                qn += a * a;
                gn += b * b;
            }
            return dot / (std::sqrt(qn) * std::sqrt(gn));
        };
        double map_sum = 0.0, r1_sum = 0.0;
        int counted = 0;
        for (int i = 0; i < nq; ++i) {
            std::vector<int> order(static_cast<std::size_t>(ng));
            std::iota(order.begin(), order.end(), 0);
            // selection sort, stable on ties by lower index
            for (std::size_t a = 0; a + 1 < order.size(); ++a) {
                std::size_t best = a;
                for (std::size_t b = a + 1; b < order.size(); ++b) {
                    if (cosine(i, order[b]) > cosine(i, order[best])) best = b;
                }
                if (best != a) {
                    const int v = order[best];
                    order.erase(order.begin() + static_cast<long>(best));
                    order.insert(order.begin() + static_cast<long>(a), v);
                }
            }
            rankings.push_back(order);
            int positives = 0;
            for (int j = 0; j < ng; ++j) positives += gl[static_cast<std::size_t>(j)] == ql[static_cast<std::size_t>(i)];
            if (positives == 0) continue;
            ++counted;
            int hits = 0;
            double ap = 0.0;
            for (std::size_t k = 0; k < order.size(); ++k) {
                if (gl[static_cast<std::size_t>(order[k])] == ql[static_cast<std::size_t>(i)]) {
                    ++hits;
                    ap += static_cast<double>(hits) / static_cast<double>(k + 1);
                }
            }
            map_sum += ap / positives;
            r1_sum += gl[static_cast<std::size_t>(order[0])] == ql[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
        }
        map = counted ? map_sum / counted : 0.0;
        r1 = counted ? r1_sum / counted : 0.0;
    }
};

}  // namespace

TEST_CASE("the query itself ranks first") {
    std::mt19937_64 rng(1);
    Tensor g = oracle::random_tensor({6, 4}, rng);
    Tensor q = Tensor::zeros({1, 4});
    for (int d = 0; d < 4; ++d) q.data()[d] = g.data()[static_cast<std::size_t>(3) * 4 + d];
    auto rankings = rank_gallery(q, g);
    CHECK(rankings[0][0] == 3);
}

TEST_CASE("positively correlated entries outrank orthogonal ones") {
    Tensor g = Tensor::from_data({2, 2}, {0.0, 1.0, 1.0, 0.2});
    Tensor q = Tensor::from_data({1, 2}, {1.0, 0.0});
    auto rankings = rank_gallery(q, g);
    CHECK(rankings[0] == std::vector<int>{1, 0});
}

TEST_CASE("zero-norm embeddings are rejected with their index") {
    Tensor g = Tensor::from_data({2, 2}, {1.0, 0.0, 0.0, 0.0});
    Tensor q = Tensor::from_data({1, 2}, {1.0, 0.0});
    try {
        rank_gallery(q, g);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("index 1") != std::string::npos);
    }
}

TEST_CASE("ranking matches the exhaustive oracle") {
    std::mt19937_64 rng(2);
    Tensor q = oracle::random_tensor({5, 6}, rng);
    Tensor g = oracle::random_tensor({20, 6}, rng);
    std::vector<int> ql{0, 1, 2, 3, 4}, gl(20);
    for (int j = 0; j < 20; ++j) gl[static_cast<std::size_t>(j)] = j % 5;
    BruteForce bf(q, g, ql, gl);
    CHECK(rank_gallery(q, g) == bf.rankings);
}

TEST_CASE("single positive at rank one gives AP 1") {
    const std::vector<std::vector<int>> rankings{{0, 1}};
    CHECK(compute_map(rankings, {7}, {7, 8}).value == 1.0);
}

TEST_CASE("single positive at rank two of two gives AP one half") {
    const std::vector<std::vector<int>> rankings{{0, 1}};
    CHECK(compute_map(rankings, {7}, {8, 7}).value == 0.5);
}

TEST_CASE("queries without positives are excluded and counted") {
    const std::vector<std::vector<int>> rankings{{0, 1}, {0, 1}};
    RetrievalScore s = compute_map(rankings, {7, 9}, {7, 8});
    CHECK(s.evaluated == 1);
    CHECK(s.excluded == 1);
    CHECK(s.value == 1.0);
}

TEST_CASE("map and r1 match brute force on random instances") {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> label(0, 3);
    std::uniform_int_distribution<int> size(2, 10);
    for (int trial = 0; trial < 200; ++trial) {
        const int nq = size(rng), ng = size(rng);
        Tensor q = oracle::random_tensor({nq, 5}, rng);
        Tensor g = oracle::random_tensor({ng, 5}, rng);
        std::vector<int> ql(static_cast<std::size_t>(nq)), gl(static_cast<std::size_t>(ng));
        for (int& l : ql) l = label(rng);
        for (int& l : gl) l = label(rng);
        bool any_positive = false;
        for (int i = 0; i < nq && !any_positive; ++i) {
            for (int j = 0; j < ng; ++j) {
                if (ql[static_cast<std::size_t>(i)] == gl[static_cast<std::size_t>(j)]) {
                    any_positive = true;
                    break;
                }
            }
        }
        if (!any_positive) continue;
        BruteForce bf(q, g, ql, gl);
        auto rankings = rank_gallery(q, g);
        CHECK(compute_map(rankings, ql, gl).value == bf.map);
        CHECK(compute_r1(rankings, ql, gl).value == bf.r1);
    }
}

TEST_CASE("r1 hits zero on an adversarial gallery") {
    Tensor q = Tensor::from_data({2, 2}, {1.0, 0.0, 0.0, 1.0});
    Tensor g = Tensor::from_data({2, 2}, {1.0, 0.01, 0.01, 1.0});
    // nearest gallery entry always carries the other label
    auto rankings = rank_gallery(q, g);
    CHECK(compute_r1(rankings, {0, 1}, {1, 0}).value == 0.0);
}

TEST_CASE("map reduces to mean reciprocal rank with one positive per query") {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor q = oracle::random_tensor({4, 3}, rng);
        Tensor g = oracle::random_tensor({8, 3}, rng);
        std::vector<int> ql{0, 1, 2, 3};
        std::vector<int> gl{0, 1, 2, 3, 4, 5, 6, 7};  // exactly one positive each
        auto rankings = rank_gallery(q, g);
        double mrr = 0.0;
        for (int i = 0; i < 4; ++i) {
            for (std::size_t k = 0; k < rankings[static_cast<std::size_t>(i)].size(); ++k) {
                if (gl[static_cast<std::size_t>(rankings[static_cast<std::size_t>(i)][k])] == ql[static_cast<std::size_t>(i)]) {
                    mrr += 1.0 / static_cast<double>(k + 1);
                    break;
                }
            }
        }
        mrr /= 4.0;
        CHECK(compute_map(rankings, ql, gl).value == doctest::Approx(mrr).epsilon(1e-15));
    }
}

TEST_CASE("reports are invariant to positive rescaling of embeddings") {
    std::mt19937_64 rng(5);
    Tensor q = oracle::random_tensor({6, 4}, rng);
    Tensor g = oracle::random_tensor({12, 4}, rng);
    std::vector<int> ql{0, 1, 2, 0, 1, 2}, gl{0, 0, 1, 1, 2, 2, 0, 1, 2, 0, 1, 2};
    EvalReport a = make_eval_report(q, ql, g, gl, 100, 200);
    Tensor q7 = q.clone(), g7 = g.clone();
    for (double& v : q7.data()) v *= 7.0;
    for (double& v : g7.data()) v *= 7.0;
    EvalReport b = make_eval_report(q7, ql, g7, gl, 100, 200);
    CHECK(a.to_text() == b.to_text());
}

namespace {

ModelConfig documented_config(bool compactors) {
    // The hand-counted two-block model: stem 3->4 at 9x9 (stride 3, pad 0,
    // 3x3 output), block0 4->4, block1 4->6 with projection, embedding 8,
    // 4 classes.
    ModelConfig cfg;
    cfg.stage_widths = {4, 6};
    cfg.blocks_per_stage = 1;
    cfg.embedding_dim = 8;
    cfg.class_count = 4;
    cfg.input_h = cfg.input_w = 9;
    cfg.with_compactors = compactors;
    return cfg;
}

}  // namespace

TEST_CASE("parameter count matches the hand-computed model") {
    Model teacher = build_model(documented_config(false), 1);
    // stem 4*3*3*3 = 108, stem norm 8
    // block0: conv3 4*4*9 = 144, norm 8, conv1 4*4+4 = 20
    // block1: conv3 6*4*9 = 216, norm 12, conv1 6*6+6 = 42, proj 6*4+6 = 30
    // head: emb 8*6+8 = 56, cls 4*8+4 = 36
    CHECK(count_params(teacher) == 108 + 8 + 144 + 8 + 20 + 216 + 12 + 42 + 30 + 56 + 36);

    Model student = build_model(documented_config(true), 1);
    // compactors add 4*4 + 6*6 = 52
    CHECK(count_params(student) == count_params(teacher) + 16 + 36);
}

TEST_CASE("flop count matches the hand-computed model") {
    Model teacher = build_model(documented_config(false), 1);
    // all feature maps are 3x3 = 9 positions
    const long long stem = 2LL * 9 * 4 * 3 * 9 + 2 * 4 * 9 + 4 * 9;
    const long long block0 = 2LL * 9 * 4 * 4 * 9 + 2 * 4 * 9 + 4 * 9       // conv3, norm, relu
                             + 2LL * 9 * 4 * 4 + 4 * 9                     // conv1 + bias
                             + 4 * 9 + 4 * 9;                              // add, relu
    const long long block1 = 2LL * 9 * 6 * 4 * 9 + 2 * 6 * 9 + 6 * 9
                             + 2LL * 9 * 6 * 6 + 6 * 9
                             + 2LL * 9 * 6 * 4 + 6 * 9                     // projection + bias
                             + 6 * 9 + 6 * 9;
    const long long tail = 6 * 9                                           // gap
                           + 2LL * 6 * 8 + 8 + 2LL * 8 * 4 + 4;            // heads
    CHECK(count_flops(teacher, 3, 9, 9) == stem + block0 + block1 + tail);

    Model student = build_model(documented_config(true), 1);
    // compactor 1x1 convs add 2*9*4*4 and 2*9*6*6
    CHECK(count_flops(student, 3, 9, 9) ==
          count_flops(teacher, 3, 9, 9) + 2LL * 9 * 4 * 4 + 2LL * 9 * 6 * 6);
}
