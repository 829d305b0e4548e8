#pragma once

// Test-only reference implementations, kept independent of the library's
// compute paths so they can serve as oracles.

#include <cmath>
#include <random>
#include <vector>

#include "cdd/tensor.hpp"

namespace oracle {

inline cdd::Tensor random_tensor(std::vector<int> shape, std::mt19937_64& rng, bool rg = false,
                                 double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    cdd::Tensor t = cdd::Tensor::zeros(std::move(shape), rg);
    for (double& x : t.data()) x = dist(rng);
    return t;
}

// Direct sextuple-loop cross-correlation.
inline std::vector<double> conv_naive(const cdd::Tensor& in, const cdd::Tensor& k,
                                      const cdd::Tensor& bias, int stride, int pad, int& ho_out,
                                      int& wo_out) {
    const int n = in.dim(0), c = in.dim(1), h = in.dim(2), w = in.dim(3);
    const int d = k.dim(0), kk = k.dim(2);
    const int ho = (h + 2 * pad - kk) / stride + 1;
    const int wo = (w + 2 * pad - kk) / stride + 1;
    ho_out = ho;
    wo_out = wo;
    std::vector<double> out(static_cast<std::size_t>(n) * d * ho * wo, 0.0);
    for (int i = 0; i < n; ++i)
        for (int oc = 0; oc < d; ++oc)
            for (int oh = 0; oh < ho; ++oh)
                for (int ow = 0; ow < wo; ++ow) {
                    double s = bias.defined() ? bias.data()[oc] : 0.0;
                    for (int ic = 0; ic < c; ++ic)
                        for (int kh = 0; kh < kk; ++kh)
                            for (int kw = 0; kw < kk; ++kw) {
                                const int ih = oh * stride - pad + kh;
                                const int iw = ow * stride - pad + kw;
                                if (ih < 0 || ih >= h || iw < 0 || iw >= w) continue;
                                s += in.data()[((static_cast<std::size_t>(i) * c + ic) * h + ih) * w + iw] *
                                     k.data()[((static_cast<std::size_t>(oc) * c + ic) * kk + kh) * kk + kw];
                            }
                    out[((static_cast<std::size_t>(i) * d + oc) * ho + oh) * wo + ow] = s;
                }
    return out;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

}  // namespace oracle
