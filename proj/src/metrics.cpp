#include "cdd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "cdd/errors.hpp"

namespace cdd {

std::vector<std::vector<int>> rank_gallery(const Tensor& query_embs, const Tensor& gallery_embs) {
    if (query_embs.ndim() != 2 || gallery_embs.ndim() != 2 ||
        query_embs.dim(1) != gallery_embs.dim(1)) {
        throw ShapeError("rank_gallery dimension mismatch: " + shape_str(query_embs.shape()) +
                         " vs " + shape_str(gallery_embs.shape()));
    }
    const int q = query_embs.dim(0), g = gallery_embs.dim(0), e = query_embs.dim(1);
    auto norms = [e](const Tensor& t, const char* side) {
        std::vector<double> out(static_cast<std::size_t>(t.dim(0)));
        for (int i = 0; i < t.dim(0); ++i) {
            double s = 0.0;
            const double* p = t.data().data() + static_cast<std::size_t>(i) * e;
            for (int d = 0; d < e; ++d) s += p[d] * p[d];
            if (s == 0.0) {
                throw ShapeError(std::string("rank_gallery: zero-norm ") + side + " embedding at index " +
                                 std::to_string(i));
            }
            out[static_cast<std::size_t>(i)] = std::sqrt(s);
        }
        return out;
    };
    const std::vector<double> qn = norms(query_embs, "query");
    const std::vector<double> gn = norms(gallery_embs, "gallery");

    std::vector<std::vector<int>> rankings(static_cast<std::size_t>(q));
    std::vector<double> sims(static_cast<std::size_t>(g));
    for (int i = 0; i < q; ++i) {
        const double* qp = query_embs.data().data() + static_cast<std::size_t>(i) * e;
        for (int j = 0; j < g; ++j) {
            const double* gp = gallery_embs.data().data() + static_cast<std::size_t>(j) * e;
            double dot = 0.0;
            for (int d = 0; d < e; ++d) dot += qp[d] * gp[d];
            sims[static_cast<std::size_t>(j)] = dot / (qn[static_cast<std::size_t>(i)] * gn[static_cast<std::size_t>(j)]);
        }
        std::vector<int>& order = rankings[static_cast<std::size_t>(i)];
        order.resize(static_cast<std::size_t>(g));
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            if (sims[static_cast<std::size_t>(a)] != sims[static_cast<std::size_t>(b)]) {
                return sims[static_cast<std::size_t>(a)] > sims[static_cast<std::size_t>(b)];
            }
            return a < b;
        });
    }
    return rankings;
}

namespace {

RetrievalScore score_rankings(const std::vector<std::vector<int>>& rankings,
                              const std::vector<int>& query_labels,
                              const std::vector<int>& gallery_labels, bool average_precision) {
    if (rankings.size() != query_labels.size()) {
        throw ShapeError("metric label count does not match rankings");
    }
    RetrievalScore score;
    double sum = 0.0;
    for (std::size_t qi = 0; qi < rankings.size(); ++qi) {
        const int label = query_labels[qi];
        int positives = 0;
        for (int gl : gallery_labels) {
            if (gl == label) ++positives;
        }
        if (positives == 0) {
            ++score.excluded;
            continue;
        }
        if (average_precision) {
            int hits = 0;
            double ap = 0.0;
            for (std::size_t k = 0; k < rankings[qi].size(); ++k) {
                if (gallery_labels[static_cast<std::size_t>(rankings[qi][k])] == label) {
                    ++hits;
                    ap += static_cast<double>(hits) / static_cast<double>(k + 1);
                }
            }
            sum += ap / static_cast<double>(positives);
        } else {
            sum += gallery_labels[static_cast<std::size_t>(rankings[qi][0])] == label ? 1.0 : 0.0;
        }
        ++score.evaluated;
    }
    score.value = score.evaluated > 0 ? sum / static_cast<double>(score.evaluated) : 0.0;
    return score;
}

}  // namespace

RetrievalScore compute_map(const std::vector<std::vector<int>>& rankings,
                           const std::vector<int>& query_labels,
                           const std::vector<int>& gallery_labels) {
    return score_rankings(rankings, query_labels, gallery_labels, true);
}

RetrievalScore compute_r1(const std::vector<std::vector<int>>& rankings,
                          const std::vector<int>& query_labels,
                          const std::vector<int>& gallery_labels) {
    return score_rankings(rankings, query_labels, gallery_labels, false);
}

long long count_params(const Model& m) {
    long long total = 0;
    for (const auto& [name, t] : m.named_parameters()) total += static_cast<long long>(t.size());
    return total;
}

namespace {

struct FlopCounter {
    long long total = 0;
    void conv(const ConvSpec& s, int ho, int wo) {
        total += 2LL * ho * wo * s.out_c * s.in_c * s.k * s.k;
        if (s.has_bias) total += 1LL * ho * wo * s.out_c;
    }
    void elementwise(long long elems, int per_elem) { total += elems * per_elem; }
    void linear(int in, int out) { total += 2LL * in * out + out; }
};

}  // namespace

long long count_flops(const Model& m, int in_c, int h, int w) {
    if (in_c != m.config.in_channels) {
        throw ShapeError("count_flops input channels do not match model");
    }
    FlopCounter fc;
    auto out_extent = [](int extent, const ConvSpec& s) {
        return (extent + 2 * s.padding - s.k) / s.stride + 1;
    };

    int ho = out_extent(h, m.stem.spec), wo = out_extent(w, m.stem.spec);
    fc.conv(m.stem.spec, ho, wo);
    const long long stem_elems = 1LL * m.stem.spec.out_c * ho * wo;
    fc.elementwise(stem_elems, 2);  // norm
    fc.elementwise(stem_elems, 1);  // relu
    int ch = h, cw = w;
    ch = ho;
    cw = wo;

    for (const ResidualBlock& b : m.blocks) {
        const int bh = out_extent(ch, b.conv3.spec), bw = out_extent(cw, b.conv3.spec);
        fc.conv(b.conv3.spec, bh, bw);
        const long long mid_elems = 1LL * b.mid_channels() * bh * bw;
        if (b.has_norm) fc.elementwise(mid_elems, 2);
        if (b.compactor) {
            fc.conv({b.mid_channels(), b.mid_channels(), 1, 1, 0, false}, bh, bw);
        }
        fc.elementwise(mid_elems, 1);  // relu after tap
        fc.conv(b.conv1.spec, bh, bw);
        if (b.shortcut) fc.conv(b.shortcut->spec, bh, bw);
        const long long out_elems = 1LL * b.out_channels() * bh * bw;
        fc.elementwise(out_elems, 1);  // residual add
        fc.elementwise(out_elems, 1);  // final relu
        ch = bh;
        cw = bw;
    }

    fc.elementwise(1LL * m.blocks.back().out_channels() * ch * cw, 1);  // gap
    fc.linear(m.config.stage_widths.back(), m.config.embedding_dim);
    fc.linear(m.config.embedding_dim, m.config.class_count);
    return fc.total;
}

std::string EvalReport::to_text() const {
    char buf[512];
    std::string out;
    out += "flops_convention=multiply_add_counts_2\n";
    std::snprintf(buf, sizeof buf, "queries=%d\n", queries);
    out += buf;
    std::snprintf(buf, sizeof buf, "gallery=%d\n", gallery);
    out += buf;
    std::snprintf(buf, sizeof buf, "excluded_queries=%d\n", excluded_queries);
    out += buf;
    std::snprintf(buf, sizeof buf, "map_pct=%.2f\n", map * 100.0);
    out += buf;
    std::snprintf(buf, sizeof buf, "r1_pct=%.2f\n", r1 * 100.0);
    out += buf;
    std::snprintf(buf, sizeof buf, "map=%.17g\n", map);
    out += buf;
    std::snprintf(buf, sizeof buf, "r1=%.17g\n", r1);
    out += buf;
    std::snprintf(buf, sizeof buf, "mp=%lld\n", mp);
    out += buf;
    std::snprintf(buf, sizeof buf, "flops=%lld\n", flops);
    out += buf;
    return out;
}

EvalReport make_eval_report(const Tensor& query_embs, const std::vector<int>& query_labels,
                            const Tensor& gallery_embs, const std::vector<int>& gallery_labels,
                            long long mp, long long flops) {
    EvalReport report;
    const auto rankings = rank_gallery(query_embs, gallery_embs);
    const RetrievalScore map = compute_map(rankings, query_labels, gallery_labels);
    const RetrievalScore r1 = compute_r1(rankings, query_labels, gallery_labels);
    report.map = map.value;
    report.r1 = r1.value;
    report.excluded_queries = map.excluded;
    report.queries = query_embs.dim(0);
    report.gallery = gallery_embs.dim(0);
    report.mp = mp;
    report.flops = flops;
    return report;
}

}  // namespace cdd
