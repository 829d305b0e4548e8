#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <deque>
#include <numeric>

#include "cdd/errors.hpp"
#include "cdd/rggr.hpp"
#include "oracle_util.hpp"

using namespace cdd;

TEST_CASE("queue fills to batch size") {
    GalleryQueue q(8, 3);
    std::mt19937_64 rng(1);
    Tensor feats = oracle::random_tensor({4, 3}, rng);
    queue_update(q, feats, {0, 1, 2, 3});
    CHECK(q.size() == 4);
}

TEST_CASE("full queue evicts strictly FIFO") {
    GalleryQueue q(8, 2);
    for (int i = 0; i < 8; ++i) {
        const double f[2] = {static_cast<double>(i), 0.0};
        q.push({f, 2}, i);
    }
    CHECK(q.size() == 8);
    Tensor more = Tensor::from_data({3, 2}, {100.0, 0, 101.0, 0, 102.0, 0});
    queue_update(q, more, {100, 101, 102});
    CHECK(q.size() == 8);
    // oldest three gone
    CHECK(q.feature(0)[0] == 3.0);
    CHECK(q.label(7) == 102);
    CHECK(q.feature(7)[0] == 102.0);
}

TEST_CASE("queue contents match a reference ring buffer") {
    GalleryQueue q(5, 1);
    std::deque<double> ref;
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0, 1);
    for (int step = 0; step < 40; ++step) {
        const double v = u(rng);
        q.push({&v, 1}, step);
        ref.push_back(v);
        if (ref.size() > 5) ref.pop_front();
        REQUIRE(q.size() == static_cast<int>(ref.size()));
        for (int i = 0; i < q.size(); ++i) CHECK(q.feature(i)[0] == ref[static_cast<std::size_t>(i)]);
    }
}

TEST_CASE("queue rejects dimension mismatch") {
    GalleryQueue q(4, 3);
    std::mt19937_64 rng(3);
    Tensor bad = oracle::random_tensor({2, 4}, rng);
    CHECK_THROWS_AS(queue_update(q, bad, {0, 1}), ShapeError);
}

TEST_CASE("rank retrieves the matching basis vector first") {
    GalleryQueue q(4, 2);
    const double e1[2] = {1.0, 0.0}, e2[2] = {0.0, 1.0};
    q.push({e1, 2}, 0);
    q.push({e2, 2}, 1);
    Tensor query = Tensor::from_data({1, 2}, {1.0, 0.0});
    RankResult r = compute_rank(q, query, 1);
    CHECK(r.order[0][0] == 0);
    CHECK(r.retrieved[0][0][0] == 1.0);
}

TEST_CASE("orthogonal query ties break toward the lowest index") {
    GalleryQueue q(4, 3);
    const double g0[3] = {1.0, 0.0, 0.0}, g1[3] = {0.0, 1.0, 0.0};
    q.push({g0, 3}, 0);
    q.push({g1, 3}, 1);
    Tensor query = Tensor::from_data({1, 3}, {0.0, 0.0, 1.0});
    RankResult r = compute_rank(q, query, 2);
    CHECK(r.order[0] == std::vector<int>{0, 1});
}

TEST_CASE("rank matches an exhaustive cosine sort oracle") {
    GalleryQueue q(32, 6);
    std::mt19937_64 rng(4);
    std::vector<std::vector<double>> gallery;
    for (int i = 0; i < 20; ++i) {
        Tensor f = oracle::random_tensor({1, 6}, rng);
        gallery.emplace_back(f.data().begin(), f.data().end());
        q.push(gallery.back(), i);
    }
    Tensor queries = oracle::random_tensor({5, 6}, rng);
    RankResult r = compute_rank(q, queries, 2);
    for (int i = 0; i < 5; ++i) {
        std::vector<double> sims(20);
        for (int j = 0; j < 20; ++j) {
            double dot = 0, qn = 0, gn = 0;
            for (int d = 0; d < 6; ++d) {
                const double qv = queries.data()[static_cast<std::size_t>(i) * 6 + d];
                dot += qv * gallery[static_cast<std::size_t>(j)][static_cast<std::size_t>(d)];
                qn += qv * qv;
                gn += gallery[static_cast<std::size_t>(j)][static_cast<std::size_t>(d)] *
                      gallery[static_cast<std::size_t>(j)][static_cast<std::size_t>(d)];
            }
            sims[static_cast<std::size_t>(j)] = dot / std::sqrt(qn * gn);
        }
        std::vector<int> expect(20);
        std::iota(expect.begin(), expect.end(), 0);
        std::stable_sort(expect.begin(), expect.end(), [&](int a, int b) {
            return sims[static_cast<std::size_t>(a)] > sims[static_cast<std::size_t>(b)];
        });
        CHECK(r.order[static_cast<std::size_t>(i)] == expect);
    }
}

TEST_CASE("empty gallery signals not warmed up") {
    GalleryQueue q(4, 2);
    Tensor query = Tensor::from_data({1, 2}, {1.0, 0.0});
    CHECK_THROWS_AS(compute_rank(q, query, 1), GalleryColdError);
}

TEST_CASE("channel importance is the elementwise absolute product") {
    std::vector<double> f{1.0, 2.0, 3.0}, r{1.0, 1.0, -1.0};
    CHECK(channel_importance(f, r) == std::vector<double>{1.0, 2.0, 3.0});
    std::vector<double> zeros{0.0, 0.0, 0.0};
    CHECK(channel_importance(f, zeros) == std::vector<double>{0.0, 0.0, 0.0});
}

TEST_CASE("importance equals single-channel ablation change of the dot product") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor f = oracle::random_tensor({1, 16}, rng);
        Tensor r = oracle::random_tensor({1, 16}, rng);
        const std::vector<double> scores = channel_importance(f.data(), r.data());
        for (int d = 0; d < 16; ++d) {
            CHECK(scores[static_cast<std::size_t>(d)] == std::fabs(f.data()[d] * r.data()[d]));
        }
    }
}

TEST_CASE("select_unimportant picks the smallest fraction") {
    std::vector<double> scores{0.1, 0.5, 0.2, 0.9};
    CHECK(select_unimportant(scores, 0.5) == std::vector<int>{0, 2});
}

TEST_CASE("select_unimportant breaks ties by lowest index") {
    std::vector<double> scores{0.3, 0.3, 0.3, 0.3};
    CHECK(select_unimportant(scores, 0.5) == std::vector<int>{0, 1});
}

TEST_CASE("select_unimportant matches a sort-and-slice oracle") {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<double> scores(32);
    for (double& s : scores) s = u(rng);
    const std::vector<int> got = select_unimportant(scores, 0.5);
    std::vector<int> order(32);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return scores[static_cast<std::size_t>(a)] < scores[static_cast<std::size_t>(b)];
    });
    std::vector<int> expect(order.begin(), order.begin() + 16);
    std::sort(expect.begin(), expect.end());
    CHECK(got == expect);
}

TEST_CASE("intersection is exact") {
    CHECK(intersect_sets({{0, 2}, {2, 3}}) == std::vector<int>{2});
    CHECK(intersect_sets({{1, 4, 7}, {1, 4, 7}}) == std::vector<int>{1, 4, 7});
}

TEST_CASE("intersection matches a bitset oracle on random sets") {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<int> coin(0, 1);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::vector<int>> sets(6);
        std::vector<std::uint16_t> bits(6, 0);
        for (int s = 0; s < 6; ++s) {
            for (int d = 0; d < 16; ++d) {
                if (coin(rng)) {
                    sets[static_cast<std::size_t>(s)].push_back(d);
                    bits[static_cast<std::size_t>(s)] |= static_cast<std::uint16_t>(1u << d);
                }
            }
        }
        std::uint16_t all = 0xFFFF;
        for (std::uint16_t b : bits) all &= b;
        std::vector<int> expect;
        for (int d = 0; d < 16; ++d) {
            if (all & (1u << d)) expect.push_back(d);
        }
        CHECK(intersect_sets(sets) == expect);
    }
}

TEST_CASE("intersection cannot exceed the per-pair budget") {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0, 1);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::vector<int>> sets;
        for (int s = 0; s < 4; ++s) {
            std::vector<double> scores(12);
            for (double& x : scores) x = u(rng);
            sets.push_back(select_unimportant(scores, 0.5));
        }
        CHECK(intersect_sets(sets).size() <= 6);
    }
}

TEST_CASE("build_masks falls back to all ones on empty intersection") {
    // two blocks, constructed so block 0 has disjoint per-pair selections
    std::vector<GalleryQueue> queues{GalleryQueue(8, 4), GalleryQueue(8, 4)};
    // queries identical to pushed features, two samples
    Tensor ft = Tensor::from_data({2, 4}, {1.0, 0.1, 1.0, 1.0, 0.1, 1.0, 1.0, 1.0});
    // student features make sample 0 kill channels {0?}; craft scores so
    // selections differ between the two (i,j) pairs
    Tensor fs = Tensor::from_data({2, 4}, {0.01, 1.0, 1.0, 1.0, 1.0, 0.01, 1.0, 1.0});
    std::vector<MaskBuildInfo> info;
    auto masks = build_masks({ft, ft}, {fs, fs}, {0, 1}, queues, 0.25, 1, &info);
    REQUIRE(masks.size() == 2);
    for (const auto& m : masks) {
        if (m.zero_bits() == 0) {
            CHECK(m.keep == std::vector<std::uint8_t>{1, 1, 1, 1});
        }
    }
    // every query-neighbor pair picked exactly one channel, and they differ,
    // so the intersection is empty and the mask must stay all ones
    CHECK(info[0].empty_intersection);
    CHECK(masks[0].zero_bits() == 0);
}

TEST_CASE("single query and neighbor uses its selection directly") {
    std::vector<GalleryQueue> queues{GalleryQueue(8, 4)};
    Tensor ft = Tensor::from_data({1, 4}, {1.0, 1.0, 1.0, 1.0});
    Tensor fs = Tensor::from_data({1, 4}, {0.0, 5.0, 4.0, 3.0});
    std::vector<MaskBuildInfo> info;
    auto masks = build_masks({ft}, {fs}, {0}, queues, 0.5, 1, &info);
    // scores |fs*r| = {0,5,4,3}; floor(0.5*4)=2 smallest -> {0,3}
    CHECK(masks[0].keep == std::vector<std::uint8_t>{0, 1, 1, 0});
    CHECK(info[0].unimportant == 2);
}

TEST_CASE("a channel dead in student and gallery is always selected") {
    std::mt19937_64 rng(9);
    std::vector<GalleryQueue> queues{GalleryQueue(32, 8)};
    // warm the queue with features whose channel 5 is zero
    for (int step = 0; step < 3; ++step) {
        Tensor ft = oracle::random_tensor({4, 8}, rng);
        for (int i = 0; i < 4; ++i) ft.data()[static_cast<std::size_t>(i) * 8 + 5] = 0.0;
        Tensor fs = oracle::random_tensor({4, 8}, rng);
        for (int i = 0; i < 4; ++i) fs.data()[static_cast<std::size_t>(i) * 8 + 5] = 0.0;
        auto masks = build_masks({ft}, {fs}, {0, 1, 2, 3}, queues, 0.5, 2);
        CHECK(masks[0].keep[5] == 0);
    }
}

TEST_CASE("masks depend only on the block's own queue and taps") {
    std::mt19937_64 rng(10);
    Tensor ft0 = oracle::random_tensor({3, 4}, rng);
    Tensor fs0 = oracle::random_tensor({3, 4}, rng);
    Tensor ft1 = oracle::random_tensor({3, 6}, rng);
    Tensor fs1 = oracle::random_tensor({3, 6}, rng);

    std::vector<GalleryQueue> q_joint{GalleryQueue(16, 4), GalleryQueue(16, 6)};
    auto joint = build_masks({ft0, ft1}, {fs0, fs1}, {0, 1, 2}, q_joint, 0.5, 2);

    std::vector<GalleryQueue> q_solo{GalleryQueue(16, 4)};
    auto solo = build_masks({ft0}, {fs0}, {0, 1, 2}, q_solo, 0.5, 2);
    CHECK(joint[0].keep == solo[0].keep);
}

TEST_CASE("with p=1 and a single pair the whole index set is selected") {
    std::vector<GalleryQueue> queues{GalleryQueue(4, 5)};
    std::mt19937_64 rng(11);
    Tensor ft = oracle::random_tensor({1, 5}, rng);
    Tensor fs = oracle::random_tensor({1, 5}, rng);
    std::vector<MaskBuildInfo> info;
    auto masks = build_masks({ft}, {fs}, {0}, queues, 1.0, 1, &info);
    CHECK(info[0].unimportant == 5);
    // all channels selected: defined fallback keeps gradient flowing nowhere
    CHECK(masks[0].zero_bits() == 5);
}
