#pragma once

#include <string>
#include <vector>

#include "cdd/network.hpp"
#include "cdd/tensor.hpp"

namespace cdd {

// Descending cosine similarity per query; ties broken by lower gallery
// index. Rejects zero-norm embeddings naming the offending row.
std::vector<std::vector<int>> rank_gallery(const Tensor& query_embs, const Tensor& gallery_embs);

struct RetrievalScore {
    double value = 0.0;
    int evaluated = 0;
    int excluded = 0;  // queries with no positive in the gallery
};

RetrievalScore compute_map(const std::vector<std::vector<int>>& rankings,
                           const std::vector<int>& query_labels,
                           const std::vector<int>& gallery_labels);

RetrievalScore compute_r1(const std::vector<std::vector<int>>& rankings,
                          const std::vector<int>& query_labels,
                          const std::vector<int>& gallery_labels);

// Trainable parameter count. Running statistics are not parameters;
// compactors count while present.
long long count_params(const Model& m);

// Inference cost for one image, counting a multiply-add as 2 FLOPs:
//   conv    2*Ho*Wo*Cout*Cin*k*k   (+ Ho*Wo*Cout bias adds)
//   linear  2*in*out               (+ out bias adds)
//   norm    2 per element, relu 1 per element,
//   residual add 1 per element, gap 1 per input element.
long long count_flops(const Model& m, int in_c, int h, int w);

struct EvalReport {
    double map = 0.0;
    double r1 = 0.0;
    long long mp = 0;
    long long flops = 0;
    int queries = 0;
    int gallery = 0;
    int excluded_queries = 0;

    // Flat key=value lines; percentages printed to two decimals.
    std::string to_text() const;
};

EvalReport make_eval_report(const Tensor& query_embs, const std::vector<int>& query_labels,
                            const Tensor& gallery_embs, const std::vector<int>& gallery_labels,
                            long long mp, long long flops);

}  // namespace cdd
