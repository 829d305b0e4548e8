#include "cdd/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "cdd/errors.hpp"

namespace cdd::ops {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

namespace {

bool want_grad(const Tape& tape, std::initializer_list<const Tensor*> inputs) {
    if (!tape.recording()) return false;
    for (const Tensor* t : inputs) {
        if (t->defined() && t->requires_grad()) return true;
    }
    return false;
}

// Unpacks input patch columns for one sample: rows index (c, kh, kw),
// columns index (oh, ow). Out-of-bounds taps are zero.
void im2col(std::span<const double> in, int c_in, int h, int w, int k, int stride, int pad,
            int ho, int wo, double* cols) {
    const int patch = k * k;
    for (int c = 0; c < c_in; ++c) {
        const double* src = in.data() + static_cast<std::size_t>(c) * h * w;
        for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
                double* row = cols + (static_cast<std::size_t>(c) * patch + kh * k + kw) *
                                         (static_cast<std::size_t>(ho) * wo);
                for (int oh = 0; oh < ho; ++oh) {
                    const int ih = oh * stride - pad + kh;
                    if (ih < 0 || ih >= h) {
                        std::fill(row + static_cast<std::size_t>(oh) * wo,
                                  row + static_cast<std::size_t>(oh + 1) * wo, 0.0);
                        continue;
                    }
                    for (int ow = 0; ow < wo; ++ow) {
                        const int iw = ow * stride - pad + kw;
                        row[static_cast<std::size_t>(oh) * wo + ow] =
                            (iw < 0 || iw >= w) ? 0.0 : src[static_cast<std::size_t>(ih) * w + iw];
                    }
                }
            }
        }
    }
}

void col2im_accumulate(const double* cols, int c_in, int h, int w, int k, int stride, int pad,
                       int ho, int wo, double* din) {
    const int patch = k * k;
    for (int c = 0; c < c_in; ++c) {
        double* dst = din + static_cast<std::size_t>(c) * h * w;
        for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
                const double* row = cols + (static_cast<std::size_t>(c) * patch + kh * k + kw) *
                                               (static_cast<std::size_t>(ho) * wo);
                for (int oh = 0; oh < ho; ++oh) {
                    const int ih = oh * stride - pad + kh;
                    if (ih < 0 || ih >= h) continue;
                    for (int ow = 0; ow < wo; ++ow) {
                        const int iw = ow * stride - pad + kw;
                        if (iw < 0 || iw >= w) continue;
                        dst[static_cast<std::size_t>(ih) * w + iw] +=
                            row[static_cast<std::size_t>(oh) * wo + ow];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride, int padding) {
    if (input.ndim() != 4 || kernel.ndim() != 4) {
        throw ShapeError("conv2d expects 4-d input and kernel, got " + shape_str(input.shape()) +
                         " and " + shape_str(kernel.shape()));
    }
    const int n = input.dim(0), c_in = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int d_out = kernel.dim(0), kc = kernel.dim(1), k = kernel.dim(2);
    if (kernel.dim(3) != k) throw ShapeError("conv2d kernel must be square, got " + shape_str(kernel.shape()));
    if (kc != c_in) {
        throw ShapeError("conv2d channel mismatch: input " + shape_str(input.shape()) +
                         " vs kernel " + shape_str(kernel.shape()));
    }
    if (stride < 1 || padding < 0) throw ShapeError("conv2d requires stride >= 1 and padding >= 0");
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != d_out)) {
        throw ShapeError("conv2d bias shape " + shape_str(bias.shape()) + " does not match " +
                         std::to_string(d_out) + " output channels");
    }
    const int h_span = h + 2 * padding - k;
    const int w_span = w + 2 * padding - k;
    if (h_span < 0 || w_span < 0 || h_span % stride != 0 || w_span % stride != 0) {
        throw ShapeError("conv2d output extent is not a positive integer for input " +
                         shape_str(input.shape()) + ", kernel " + shape_str(kernel.shape()) +
                         ", stride " + std::to_string(stride) + ", padding " +
                         std::to_string(padding));
    }
    const int ho = h_span / stride + 1, wo = w_span / stride + 1;
    const bool pointwise = (k == 1 && stride == 1 && padding == 0);
    const std::size_t cols_rows = static_cast<std::size_t>(c_in) * k * k;
    const std::size_t spatial = static_cast<std::size_t>(ho) * wo;

    const bool rg = want_grad(tape, {&input, &kernel, &bias});
    Tensor out = Tensor::zeros({n, d_out, ho, wo}, rg);

    // Shared column buffer; cached per sample only when a backward pass
    // will need it and the 1x1 fast path cannot alias the input directly.
    std::shared_ptr<std::vector<double>> cached;
    if (rg && !pointwise) cached = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * cols_rows * spatial);
    std::vector<double> scratch;
    if (!cached && !pointwise) scratch.resize(cols_rows * spatial);

    CMapM kmat(kernel.data().data(), d_out, static_cast<Eigen::Index>(cols_rows));
    for (int i = 0; i < n; ++i) {
        const double* in_i = input.data().data() + static_cast<std::size_t>(i) * c_in * h * w;
        const double* cols = nullptr;
        if (pointwise) {
            cols = in_i;
        } else {
            double* buf = cached ? cached->data() + static_cast<std::size_t>(i) * cols_rows * spatial
                                 : scratch.data();
            im2col(std::span<const double>(in_i, static_cast<std::size_t>(c_in) * h * w), c_in, h,
                   w, k, stride, padding, ho, wo, buf);
            cols = buf;
        }
        CMapM cmat(cols, static_cast<Eigen::Index>(cols_rows), static_cast<Eigen::Index>(spatial));
        MapM omat(out.data().data() + static_cast<std::size_t>(i) * d_out * spatial, d_out,
                  static_cast<Eigen::Index>(spatial));
        omat.noalias() = kmat * cmat;
        if (bias.defined()) {
            for (int d = 0; d < d_out; ++d) omat.row(d).array() += bias.data()[static_cast<std::size_t>(d)];
        }
    }

    if (rg) {
        Tensor in_t = input, k_t = kernel, b_t = bias, out_t = out;
        tape.push(out, [in_t, k_t, b_t, out_t, cached, n, c_in, h, w, d_out, k, stride, padding, ho, wo,
                   cols_rows, spatial, pointwise]() mutable {
            std::span<const double> gout = out_t.grad();
            CMapM kmat(k_t.data().data(), d_out, static_cast<Eigen::Index>(cols_rows));
            std::vector<double> dcols;
            if (in_t.requires_grad() && !pointwise) dcols.resize(cols_rows * spatial);
            for (int i = 0; i < n; ++i) {
                CMapM gmat(gout.data() + static_cast<std::size_t>(i) * d_out * spatial, d_out,
                           static_cast<Eigen::Index>(spatial));
                const double* cols = pointwise
                                         ? in_t.data().data() + static_cast<std::size_t>(i) * c_in * h * w
                                         : cached->data() + static_cast<std::size_t>(i) * cols_rows * spatial;
                if (k_t.requires_grad()) {
                    CMapM cmat(cols, static_cast<Eigen::Index>(cols_rows),
                               static_cast<Eigen::Index>(spatial));
                    MapM gk(k_t.grad().data(), d_out, static_cast<Eigen::Index>(cols_rows));
                    gk.noalias() += gmat * cmat.transpose();
                }
                if (in_t.requires_grad()) {
                    double* din = in_t.grad().data() + static_cast<std::size_t>(i) * c_in * h * w;
                    if (pointwise) {
                        MapM dmat(din, static_cast<Eigen::Index>(cols_rows),
                                  static_cast<Eigen::Index>(spatial));
                        dmat.noalias() += kmat.transpose() * gmat;
                    } else {
                        MapM dmat(dcols.data(), static_cast<Eigen::Index>(cols_rows),
                                  static_cast<Eigen::Index>(spatial));
                        dmat.noalias() = kmat.transpose() * gmat;
                        col2im_accumulate(dcols.data(), c_in, h, w, k, stride, padding, ho, wo, din);
                    }
                }
                if (b_t.defined() && b_t.requires_grad()) {
                    std::span<double> gb = b_t.grad();
                    for (int d = 0; d < d_out; ++d) gb[static_cast<std::size_t>(d)] += gmat.row(d).sum();
                }
            }
        });
    }
    return out;
}

Tensor relu(Tape& tape, const Tensor& x) {
    const bool rg = want_grad(tape, {&x});
    Tensor out = Tensor::zeros(x.shape(), rg);
    std::span<const double> in = x.data();
    std::span<double> o = out.data();
    for (std::size_t i = 0; i < in.size(); ++i) o[i] = in[i] > 0.0 ? in[i] : 0.0;
    if (rg) {
        Tensor x_t = x, out_t = out;
        tape.push(out, [x_t, out_t]() mutable {
            if (!x_t.requires_grad()) return;
            std::span<const double> g = out_t.grad();
            std::span<const double> in = x_t.data();
            std::span<double> gx = x_t.grad();
            for (std::size_t i = 0; i < in.size(); ++i) {
                if (in[i] > 0.0) gx[i] += g[i];
            }
        });
    }
    return out;
}

Tensor gap(Tape& tape, const Tensor& x) {
    if (x.ndim() != 4) throw ShapeError("gap expects [N,C,H,W], got " + shape_str(x.shape()));
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    const bool rg = want_grad(tape, {&x});
    Tensor out = Tensor::zeros({n, c}, rg);
    std::span<const double> in = x.data();
    std::span<double> o = out.data();
    for (std::size_t nc = 0; nc < static_cast<std::size_t>(n) * c; ++nc) {
        double s = 0.0;
        const double* p = in.data() + nc * hw;
        for (std::size_t i = 0; i < hw; ++i) s += p[i];
        o[nc] = s / static_cast<double>(hw);
    }
    if (rg) {
        Tensor x_t = x, out_t = out;
        tape.push(out, [x_t, out_t, n, c, hw]() mutable {
            if (!x_t.requires_grad()) return;
            std::span<const double> g = out_t.grad();
            std::span<double> gx = x_t.grad();
            for (std::size_t nc = 0; nc < static_cast<std::size_t>(n) * c; ++nc) {
                const double share = g[nc] / static_cast<double>(hw);
                double* p = gx.data() + nc * hw;
                for (std::size_t i = 0; i < hw; ++i) p[i] += share;
            }
        });
    }
    return out;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.ndim() != 2 || w.ndim() != 2 || x.dim(1) != w.dim(1)) {
        throw ShapeError("linear shape mismatch: x " + shape_str(x.shape()) + " vs w " +
                         shape_str(w.shape()));
    }
    const int n = x.dim(0), f = x.dim(1), o = w.dim(0);
    if (b.defined() && (b.ndim() != 1 || b.dim(0) != o)) {
        throw ShapeError("linear bias shape " + shape_str(b.shape()) + " does not match " +
                         std::to_string(o) + " outputs");
    }
    const bool rg = want_grad(tape, {&x, &w, &b});
    Tensor out = Tensor::zeros({n, o}, rg);
    CMapM xm(x.data().data(), n, f);
    CMapM wm(w.data().data(), o, f);
    MapM om(out.data().data(), n, o);
    om.noalias() = xm * wm.transpose();
    if (b.defined()) {
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < o; ++j) om(i, j) += b.data()[static_cast<std::size_t>(j)];
        }
    }
    if (rg) {
        Tensor x_t = x, w_t = w, b_t = b, out_t = out;
        tape.push(out, [x_t, w_t, b_t, out_t, n, f, o]() mutable {
            CMapM g(out_t.grad().data(), n, o);
            if (x_t.requires_grad()) {
                CMapM wm(w_t.data().data(), o, f);
                MapM gx(x_t.grad().data(), n, f);
                gx.noalias() += g * wm;
            }
            if (w_t.requires_grad()) {
                CMapM xm(x_t.data().data(), n, f);
                MapM gw(w_t.grad().data(), o, f);
                gw.noalias() += g.transpose() * xm;
            }
            if (b_t.defined() && b_t.requires_grad()) {
                std::span<double> gb = b_t.grad();
                for (int j = 0; j < o; ++j) gb[static_cast<std::size_t>(j)] += g.col(j).sum();
            }
        });
    }
    return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    const bool rg = want_grad(tape, {&a, &b});
    Tensor out = Tensor::zeros(a.shape(), rg);
    std::span<const double> pa = a.data(), pb = b.data();
    std::span<double> o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = pa[i] + pb[i];
    if (rg) {
        Tensor a_t = a, b_t = b, out_t = out;
        tape.push(out, [a_t, b_t, out_t]() mutable {
            std::span<const double> g = out_t.grad();
            if (a_t.requires_grad()) {
                std::span<double> ga = a_t.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b_t.requires_grad()) {
                std::span<double> gb = b_t.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

Tensor sum(Tape& tape, const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    const bool rg = want_grad(tape, {&x});
    Tensor out = Tensor::from_data({1}, {s}, rg);
    if (rg) {
        Tensor x_t = x, out_t = out;
        tape.push(out, [x_t, out_t]() mutable {
            const double g = out_t.grad()[0];
            std::span<double> gx = x_t.grad();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
        });
    }
    return out;
}

Tensor affine_norm_train(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         std::vector<double>& running_mean, std::vector<double>& running_var,
                         double eps, double momentum, bool update_stats) {
    if (x.ndim() != 4) throw ShapeError("affine_norm expects [N,C,H,W], got " + shape_str(x.shape()));
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (gamma.dim(0) != c || beta.dim(0) != c || static_cast<int>(running_mean.size()) != c ||
        static_cast<int>(running_var.size()) != c) {
        throw ShapeError("affine_norm channel mismatch for input " + shape_str(x.shape()));
    }
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    const double count = static_cast<double>(n) * static_cast<double>(hw);

    std::vector<double> mu(static_cast<std::size_t>(c), 0.0), sigma(static_cast<std::size_t>(c), 0.0);
    std::span<const double> in = x.data();
    for (int ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (int i = 0; i < n; ++i) {
            const double* p = in.data() + (static_cast<std::size_t>(i) * c + ch) * hw;
            for (std::size_t j = 0; j < hw; ++j) s += p[j];
        }
        const double m = s / count;
        double v = 0.0;
        for (int i = 0; i < n; ++i) {
            const double* p = in.data() + (static_cast<std::size_t>(i) * c + ch) * hw;
            for (std::size_t j = 0; j < hw; ++j) {
                const double d = p[j] - m;
                v += d * d;
            }
        }
        v /= count;
        mu[static_cast<std::size_t>(ch)] = m;
        sigma[static_cast<std::size_t>(ch)] = std::sqrt(v + eps);
        if (update_stats) {
            running_mean[static_cast<std::size_t>(ch)] =
                (1.0 - momentum) * running_mean[static_cast<std::size_t>(ch)] + momentum * m;
            running_var[static_cast<std::size_t>(ch)] =
                (1.0 - momentum) * running_var[static_cast<std::size_t>(ch)] + momentum * v;
        }
    }

    const bool rg = want_grad(tape, {&x, &gamma, &beta});
    Tensor out = Tensor::zeros(x.shape(), rg);
    std::span<double> o = out.data();
    for (int i = 0; i < n; ++i) {
        for (int ch = 0; ch < c; ++ch) {
            const double g = gamma.data()[static_cast<std::size_t>(ch)];
            const double b = beta.data()[static_cast<std::size_t>(ch)];
            const double m = mu[static_cast<std::size_t>(ch)];
            const double s = sigma[static_cast<std::size_t>(ch)];
            const double* p = in.data() + (static_cast<std::size_t>(i) * c + ch) * hw;
            double* q = o.data() + (static_cast<std::size_t>(i) * c + ch) * hw;
            for (std::size_t j = 0; j < hw; ++j) q[j] = g * (p[j] - m) / s + b;
        }
    }

    if (rg) {
        Tensor x_t = x, g_t = gamma, b_t = beta, out_t = out;
        auto mu_c = std::make_shared<std::vector<double>>(std::move(mu));
        auto sig_c = std::make_shared<std::vector<double>>(std::move(sigma));
        tape.push(out, [x_t, g_t, b_t, out_t, mu_c, sig_c, n, c, hw, count]() mutable {
            std::span<const double> g = out_t.grad();
            std::span<const double> in = x_t.data();
            for (int ch = 0; ch < c; ++ch) {
                const double m = (*mu_c)[static_cast<std::size_t>(ch)];
                const double s = (*sig_c)[static_cast<std::size_t>(ch)];
                const double gam = g_t.data()[static_cast<std::size_t>(ch)];
                double sum_g = 0.0, sum_gx = 0.0;
                for (int i = 0; i < n; ++i) {
                    const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * hw;
                    for (std::size_t j = 0; j < hw; ++j) {
                        const double xh = (in[base + j] - m) / s;
                        sum_g += g[base + j];
                        sum_gx += g[base + j] * xh;
                    }
                }
                if (b_t.requires_grad()) b_t.grad()[static_cast<std::size_t>(ch)] += sum_g;
                if (g_t.requires_grad()) g_t.grad()[static_cast<std::size_t>(ch)] += sum_gx;
                if (x_t.requires_grad()) {
                    std::span<double> gx = x_t.grad();
                    const double mean_g = sum_g / count;
                    const double mean_gx = sum_gx / count;
                    for (int i = 0; i < n; ++i) {
                        const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * hw;
                        for (std::size_t j = 0; j < hw; ++j) {
                            const double xh = (in[base + j] - m) / s;
                            gx[base + j] += (gam / s) * (g[base + j] - mean_g - xh * mean_gx);
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor affine_norm_eval(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        const std::vector<double>& running_mean,
                        const std::vector<double>& running_var, double eps) {
    if (x.ndim() != 4) throw ShapeError("affine_norm expects [N,C,H,W], got " + shape_str(x.shape()));
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (gamma.dim(0) != c || static_cast<int>(running_mean.size()) != c) {
        throw ShapeError("affine_norm channel mismatch for input " + shape_str(x.shape()));
    }
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    const bool rg = want_grad(tape, {&x, &gamma, &beta});
    Tensor out = Tensor::zeros(x.shape(), rg);
    std::span<const double> in = x.data();
    std::span<double> o = out.data();
    for (int i = 0; i < n; ++i) {
        for (int ch = 0; ch < c; ++ch) {
            const double m = running_mean[static_cast<std::size_t>(ch)];
            const double s = std::sqrt(running_var[static_cast<std::size_t>(ch)] + eps);
            const double g = gamma.data()[static_cast<std::size_t>(ch)];
            const double b = beta.data()[static_cast<std::size_t>(ch)];
            const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * hw;
            for (std::size_t j = 0; j < hw; ++j) o[base + j] = g * (in[base + j] - m) / s + b;
        }
    }
    if (rg) {
        Tensor x_t = x, g_t = gamma, b_t = beta, out_t = out;
        auto mean_c = std::make_shared<std::vector<double>>(running_mean);
        auto var_c = std::make_shared<std::vector<double>>(running_var);
        tape.push(out, [x_t, g_t, b_t, out_t, mean_c, var_c, eps, n, c, hw]() mutable {
            std::span<const double> g = out_t.grad();
            std::span<const double> in = x_t.data();
            for (int ch = 0; ch < c; ++ch) {
                const double m = (*mean_c)[static_cast<std::size_t>(ch)];
                const double s = std::sqrt((*var_c)[static_cast<std::size_t>(ch)] + eps);
                const double gam = g_t.data()[static_cast<std::size_t>(ch)];
                double sum_g = 0.0, sum_gx = 0.0;
                for (int i = 0; i < n; ++i) {
                    const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * hw;
                    for (std::size_t j = 0; j < hw; ++j) {
                        sum_g += g[base + j];
                        sum_gx += g[base + j] * (in[base + j] - m) / s;
                    }
                }
                if (b_t.requires_grad()) b_t.grad()[static_cast<std::size_t>(ch)] += sum_g;
                if (g_t.requires_grad()) g_t.grad()[static_cast<std::size_t>(ch)] += sum_gx;
                if (x_t.requires_grad()) {
                    std::span<double> gx = x_t.grad();
                    for (int i = 0; i < n; ++i) {
                        const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * hw;
                        for (std::size_t j = 0; j < hw; ++j) gx[base + j] += g[base + j] * gam / s;
                    }
                }
            }
        });
    }
    return out;
}

Tensor weighted_sum(Tape& tape, const std::vector<std::pair<double, Tensor>>& terms) {
    if (terms.empty()) throw ShapeError("weighted_sum requires at least one term");
    double total = 0.0;
    bool rg = false;
    for (const auto& [coeff, t] : terms) {
        if (t.size() != 1) {
            throw ShapeError("weighted_sum terms must be scalars, got " + shape_str(t.shape()));
        }
        total += coeff * t.value();
        rg = rg || (tape.recording() && t.requires_grad());
    }
    Tensor out = Tensor::from_data({1}, {total}, rg);
    if (rg) {
        auto terms_c = std::make_shared<std::vector<std::pair<double, Tensor>>>(terms);
        Tensor out_t = out;
        tape.push(out, [terms_c, out_t]() mutable {
            const double g = out_t.grad()[0];
            for (auto& [coeff, t] : *terms_c) {
                if (t.requires_grad()) t.grad()[0] += coeff * g;
            }
        });
    }
    return out;
}

Tensor mse(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mse shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    const double inv = 1.0 / static_cast<double>(a.size());
    std::span<const double> pa = a.data(), pb = b.data();
    double s = 0.0;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        const double d = pa[i] - pb[i];
        s += d * d;
    }
    const bool rg = want_grad(tape, {&a, &b});
    Tensor out = Tensor::from_data({1}, {s * inv}, rg);
    if (rg) {
        Tensor a_t = a, b_t = b, out_t = out;
        tape.push(out, [a_t, b_t, out_t, inv]() mutable {
            const double g = out_t.grad()[0];
            std::span<const double> pa = a_t.data(), pb = b_t.data();
            for (std::size_t i = 0; i < pa.size(); ++i) {
                const double d = 2.0 * (pa[i] - pb[i]) * inv * g;
                if (a_t.requires_grad()) a_t.grad()[i] += d;
                if (b_t.requires_grad()) b_t.grad()[i] -= d;
            }
        });
    }
    return out;
}

namespace {

// Row-wise softmax with the max-subtraction trick; returns probabilities.
std::vector<double> softmax_rows(std::span<const double> logits, int n, int k, double inv_t) {
    std::vector<double> probs(static_cast<std::size_t>(n) * k);
    for (int i = 0; i < n; ++i) {
        const double* row = logits.data() + static_cast<std::size_t>(i) * k;
        double m = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < k; ++j) m = std::max(m, row[j] * inv_t);
        double z = 0.0;
        for (int j = 0; j < k; ++j) {
            const double e = std::exp(row[j] * inv_t - m);
            probs[static_cast<std::size_t>(i) * k + j] = e;
            z += e;
        }
        for (int j = 0; j < k; ++j) probs[static_cast<std::size_t>(i) * k + j] /= z;
    }
    return probs;
}

}  // namespace

Tensor softmax_ce_smooth(Tape& tape, const Tensor& logits, const std::vector<int>& labels,
                         double smoothing) {
    if (logits.ndim() != 2) throw ShapeError("loss_id expects [N,K] logits");
    const int n = logits.dim(0), k = logits.dim(1);
    if (static_cast<int>(labels.size()) != n) {
        throw ShapeError("loss_id label count " + std::to_string(labels.size()) +
                         " does not match batch " + std::to_string(n));
    }
    for (int y : labels) {
        if (y < 0 || y >= k) {
            throw ShapeError("loss_id label " + std::to_string(y) + " out of range [0," +
                             std::to_string(k) + ")");
        }
    }
    std::span<const double> lg = logits.data();
    const double off = smoothing / static_cast<double>(k);
    const double on = 1.0 - smoothing;
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const double* row = lg.data() + static_cast<std::size_t>(i) * k;
        double m = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < k; ++j) m = std::max(m, row[j]);
        double z = 0.0;
        for (int j = 0; j < k; ++j) z += std::exp(row[j] - m);
        const double lse = m + std::log(z);
        double dot = 0.0;
        for (int j = 0; j < k; ++j) dot += off * row[j];
        dot += on * row[labels[static_cast<std::size_t>(i)]];
        total += lse - dot;
    }
    const bool rg = want_grad(tape, {&logits});
    Tensor out = Tensor::from_data({1}, {total / n}, rg);
    if (rg) {
        Tensor l_t = logits, out_t = out;
        auto labels_c = std::make_shared<std::vector<int>>(labels);
        tape.push(out, [l_t, out_t, labels_c, n, k, on, off]() mutable {
            const double g = out_t.grad()[0] / n;
            std::vector<double> probs = softmax_rows(l_t.data(), n, k, 1.0);
            std::span<double> gl = l_t.grad();
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < k; ++j) {
                    double target = off;
                    if (j == (*labels_c)[static_cast<std::size_t>(i)]) target += on;
                    gl[static_cast<std::size_t>(i) * k + j] +=
                        g * (probs[static_cast<std::size_t>(i) * k + j] - target);
                }
            }
        });
    }
    return out;
}

Tensor kl_distill(Tape& tape, const Tensor& student_logits, const Tensor& teacher_logits,
                  double temperature) {
    if (student_logits.shape() != teacher_logits.shape() || student_logits.ndim() != 2) {
        throw ShapeError("loss_kl shape mismatch: " + shape_str(student_logits.shape()) + " vs " +
                         shape_str(teacher_logits.shape()));
    }
    if (temperature <= 0.0) throw ShapeError("loss_kl requires temperature > 0");
    const int n = student_logits.dim(0), k = student_logits.dim(1);
    const double inv_t = 1.0 / temperature;
    std::vector<double> p = softmax_rows(teacher_logits.data(), n, k, inv_t);
    std::vector<double> q = softmax_rows(student_logits.data(), n, k, inv_t);
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) total += p[i] * (std::log(p[i]) - std::log(q[i]));
    }
    const double scale = temperature * temperature / n;
    const bool rg = want_grad(tape, {&student_logits});
    Tensor out = Tensor::from_data({1}, {total * scale}, rg);
    if (rg) {
        Tensor s_t = student_logits, out_t = out;
        auto p_c = std::make_shared<std::vector<double>>(std::move(p));
        auto q_c = std::make_shared<std::vector<double>>(std::move(q));
        tape.push(out, [s_t, out_t, p_c, q_c, n, temperature]() mutable {
            // d/ds of T^2/N * KL = T/N * (q - p)
            const double g = out_t.grad()[0] * temperature / n;
            std::span<double> gs = s_t.grad();
            for (std::size_t i = 0; i < p_c->size(); ++i) gs[i] += g * ((*q_c)[i] - (*p_c)[i]);
        });
    }
    return out;
}

Tensor triplet_hard(Tape& tape, const Tensor& embeddings, const std::vector<int>& labels,
                    double margin) {
    if (embeddings.ndim() != 2) throw ShapeError("loss_triplet expects [N,emb] embeddings");
    const int n = embeddings.dim(0), e = embeddings.dim(1);
    if (static_cast<int>(labels.size()) != n) {
        throw ShapeError("loss_triplet label count does not match batch");
    }
    bool two_ids = false;
    for (int i = 1; i < n && !two_ids; ++i) two_ids = labels[static_cast<std::size_t>(i)] != labels[0];
    if (!two_ids) throw ShapeError("loss_triplet requires at least two identities in the batch");

    std::span<const double> emb = embeddings.data();
    auto dist = [&](int i, int j) {
        double s = 0.0;
        const double* a = emb.data() + static_cast<std::size_t>(i) * e;
        const double* b = emb.data() + static_cast<std::size_t>(j) * e;
        for (int d = 0; d < e; ++d) {
            const double diff = a[d] - b[d];
            s += diff * diff;
        }
        return std::sqrt(s);
    };

    std::vector<int> pos_idx(static_cast<std::size_t>(n)), neg_idx(static_cast<std::size_t>(n));
    std::vector<double> d_ap(static_cast<std::size_t>(n)), d_an(static_cast<std::size_t>(n));
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        double best_p = -1.0, best_n = std::numeric_limits<double>::infinity();
        int pi = i, ni = -1;
        for (int j = 0; j < n; ++j) {
            const double d = dist(i, j);
            if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)]) {
                if (d > best_p) {
                    best_p = d;
                    pi = j;
                }
            } else if (d < best_n) {
                best_n = d;
                ni = j;
            }
        }
        pos_idx[static_cast<std::size_t>(i)] = pi;
        neg_idx[static_cast<std::size_t>(i)] = ni;
        d_ap[static_cast<std::size_t>(i)] = best_p;
        d_an[static_cast<std::size_t>(i)] = best_n;
        total += std::max(0.0, best_p - best_n + margin);
    }
    const bool rg = want_grad(tape, {&embeddings});
    Tensor out = Tensor::from_data({1}, {total / n}, rg);
    if (rg) {
        Tensor e_t = embeddings, out_t = out;
        auto pos_c = std::make_shared<std::vector<int>>(std::move(pos_idx));
        auto neg_c = std::make_shared<std::vector<int>>(std::move(neg_idx));
        auto dap_c = std::make_shared<std::vector<double>>(std::move(d_ap));
        auto dan_c = std::make_shared<std::vector<double>>(std::move(d_an));
        tape.push(out, [e_t, out_t, pos_c, neg_c, dap_c, dan_c, n, e, margin]() mutable {
            const double g = out_t.grad()[0] / n;
            std::span<const double> emb = e_t.data();
            std::span<double> ge = e_t.grad();
            for (int i = 0; i < n; ++i) {
                const double ap = (*dap_c)[static_cast<std::size_t>(i)];
                const double an = (*dan_c)[static_cast<std::size_t>(i)];
                if (ap - an + margin <= 0.0) continue;
                const int pi = (*pos_c)[static_cast<std::size_t>(i)];
                const int ni = (*neg_c)[static_cast<std::size_t>(i)];
                const double* a = emb.data() + static_cast<std::size_t>(i) * e;
                if (ap > 0.0) {
                    const double* p = emb.data() + static_cast<std::size_t>(pi) * e;
                    for (int d = 0; d < e; ++d) {
                        const double dd = g * (a[d] - p[d]) / ap;
                        ge[static_cast<std::size_t>(i) * e + d] += dd;
                        ge[static_cast<std::size_t>(pi) * e + d] -= dd;
                    }
                }
                if (an > 0.0) {
                    const double* q = emb.data() + static_cast<std::size_t>(ni) * e;
                    for (int d = 0; d < e; ++d) {
                        const double dd = g * (a[d] - q[d]) / an;
                        ge[static_cast<std::size_t>(i) * e + d] -= dd;
                        ge[static_cast<std::size_t>(ni) * e + d] += dd;
                    }
                }
            }
        });
    }
    return out;
}

Tensor group_lasso(Tape& tape, const Tensor& kernel) {
    if (kernel.ndim() < 1) throw ShapeError("group_lasso expects a tensor with rows");
    const int rows = kernel.dim(0);
    const std::size_t row_len = kernel.size() / static_cast<std::size_t>(rows);
    std::span<const double> w = kernel.data();
    double total = 0.0;
    for (int r = 0; r < rows; ++r) {
        double s = 0.0;
        const double* p = w.data() + static_cast<std::size_t>(r) * row_len;
        for (std::size_t j = 0; j < row_len; ++j) s += p[j] * p[j];
        total += std::sqrt(s);
    }
    const bool rg = want_grad(tape, {&kernel});
    Tensor out = Tensor::from_data({1}, {total}, rg);
    if (rg) {
        Tensor k_t = kernel, out_t = out;
        tape.push(out, [k_t, out_t, rows, row_len]() mutable {
            const double g = out_t.grad()[0];
            std::span<const double> w = k_t.data();
            std::span<double> gw = k_t.grad();
            for (int r = 0; r < rows; ++r) {
                const double* p = w.data() + static_cast<std::size_t>(r) * row_len;
                double s = 0.0;
                for (std::size_t j = 0; j < row_len; ++j) s += p[j] * p[j];
                const double norm = std::sqrt(s);
                if (norm < 1e-12) continue;
                for (std::size_t j = 0; j < row_len; ++j) {
                    gw[static_cast<std::size_t>(r) * row_len + j] += g * p[j] / norm;
                }
            }
        });
    }
    return out;
}

}  // namespace cdd::ops
