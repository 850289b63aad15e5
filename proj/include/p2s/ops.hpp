#pragma once

// Network primitives over N x H x W x C tensors, each with its backward rule.

#include <Eigen/Core>

#include "p2s/tensor.hpp"

namespace p2s {

enum class Mode { train, infer };

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
void require_rank4(std::string_view op, const Tensor<T>& x) {
    if (x.rank() != 4) bad_shape(op, x.shape(), "rank 4 (N,H,W,C)");
}

}  // namespace detail

/// Per-channel KxK convolution with zero padding (K odd); the spatial extent
/// is preserved. kernel: [K, K, C].
template <typename T>
Tensor<T> depthwise_conv(const Tensor<T>& x, const Tensor<T>& kernel) {
    detail::require_rank4("depthwise_conv", x);
    if (kernel.rank() != 3 || kernel.dim(0) != kernel.dim(1) || kernel.dim(0) % 2 == 0)
        bad_shape("depthwise_conv", kernel.shape(), "[K,K,C] with odd K");
    const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3), k = kernel.dim(0);
    if (kernel.dim(2) != c) shape_mismatch("depthwise_conv", x.shape(), kernel.shape());
    const long pad = static_cast<long>(k / 2);

    // Visits every (output pixel, input pixel, tap) triple inside the image.
    auto for_each_tap = [=](auto&& body) {
        for (std::size_t b = 0; b < n; ++b)
            for (long oy = 0; oy < static_cast<long>(h); ++oy)
                for (long ox = 0; ox < static_cast<long>(w); ++ox) {
                    const std::size_t out_off = ((b * h + oy) * w + ox) * c;
                    for (long ky = 0; ky < static_cast<long>(k); ++ky) {
                        const long iy = oy + ky - pad;
                        if (iy < 0 || iy >= static_cast<long>(h)) continue;
                        for (long kx = 0; kx < static_cast<long>(k); ++kx) {
                            const long ix = ox + kx - pad;
                            if (ix < 0 || ix >= static_cast<long>(w)) continue;
                            body(out_off, ((b * h + iy) * w + ix) * c, (ky * k + kx) * c);
                        }
                    }
                }
    };

    std::vector<T> out(x.size(), T{0});
    {
        auto in = x.data();
        auto kv = kernel.data();
        for_each_tap([&](std::size_t o, std::size_t i, std::size_t t) {
            T* dst = out.data() + o;
            const T* src = in.data() + i;
            const T* kk = kv.data() + t;
            for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch] * kk[ch];
        });
    }
    auto xi = x.impl(), ki = kernel.impl();
    return detail::make_result<T>(
        "depthwise_conv", x.shape(), std::move(out), {&x, &kernel}, [=](std::span<const T> g) {
            auto dx = detail::grad_of(xi);
            auto dk = detail::grad_of(ki);
            const T* in = xi->data.data();
            const T* kv = ki->data.data();
            for_each_tap([&](std::size_t o, std::size_t i, std::size_t t) {
                const T* go = g.data() + o;
                if (!dx.empty()) {
                    T* d = dx.data() + i;
                    for (std::size_t ch = 0; ch < c; ++ch) d[ch] += go[ch] * kv[t + ch];
                }
                if (!dk.empty()) {
                    T* d = dk.data() + t;
                    for (std::size_t ch = 0; ch < c; ++ch) d[ch] += go[ch] * in[i + ch];
                }
            });
        });
}

/// 1x1 convolution: a per-pixel linear map. kernel: [1, 1, Cin, Cout].
template <typename T>
Tensor<T> pointwise_conv(const Tensor<T>& x, const Tensor<T>& kernel) {
    detail::require_rank4("pointwise_conv", x);
    if (kernel.rank() != 4 || kernel.dim(0) != 1 || kernel.dim(1) != 1)
        bad_shape("pointwise_conv", kernel.shape(), "[1,1,Cin,Cout]");
    if (kernel.dim(2) != x.dim(3)) shape_mismatch("pointwise_conv", x.shape(), kernel.shape());
    const auto rows = static_cast<Eigen::Index>(x.dim(0) * x.dim(1) * x.dim(2));
    const auto cin = static_cast<Eigen::Index>(kernel.dim(2));
    const auto cout = static_cast<Eigen::Index>(kernel.dim(3));

    std::vector<T> out(static_cast<std::size_t>(rows * cout));
    detail::MatMap<T>(out.data(), rows, cout).noalias() =
        detail::ConstMatMap<T>(x.data().data(), rows, cin) * detail::ConstMatMap<T>(kernel.data().data(), cin, cout);

    Shape shape{x.dim(0), x.dim(1), x.dim(2), kernel.dim(3)};
    auto xi = x.impl(), ki = kernel.impl();
    return detail::make_result<T>(
        "pointwise_conv", std::move(shape), std::move(out), {&x, &kernel}, [=](std::span<const T> g) {
            detail::ConstMatMap<T> gm(g.data(), rows, cout);
            if (auto dx = detail::grad_of(xi); !dx.empty())
                detail::MatMap<T>(dx.data(), rows, cin).noalias() +=
                    gm * detail::ConstMatMap<T>(ki->data.data(), cin, cout).transpose();
            if (auto dk = detail::grad_of(ki); !dk.empty())
                detail::MatMap<T>(dk.data(), cin, cout).noalias() +=
                    detail::ConstMatMap<T>(xi->data.data(), rows, cin).transpose() * gm;
        });
}

/// Adds bias[C] to every pixel of a channels-last tensor.
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
    const std::size_t c = x.shape().back();
    if (bias.rank() != 1 || bias.dim(0) != c) shape_mismatch("add_channel_bias", x.shape(), bias.shape());
    std::vector<T> out(x.data().begin(), x.data().end());
    auto b = bias.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % c];
    auto xi = x.impl(), bi = bias.impl();
    return detail::make_result<T>("add_channel_bias", x.shape(), std::move(out), {&x, &bias},
                                  [=](std::span<const T> g) {
                                      auto dx = detail::grad_of(xi);
                                      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i];
                                      auto db = detail::grad_of(bi);
                                      if (!db.empty())
                                          for (std::size_t i = 0; i < g.size(); ++i) db[i % c] += g[i];
                                  });
}

struct BatchNormOptions {
    double momentum = 0.9;  // weight of the old running statistic
    double eps = 1e-5;
};

/// Batch normalization over N, H and W per channel.
///
/// Train mode normalizes with the batch mean and (biased) variance and moves
/// the running statistics towards them. Infer mode uses the running
/// statistics and leaves them untouched.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, Mode mode, BatchNormOptions opt = {}) {
    detail::require_rank4("batch_norm", x);
    const std::size_t c = x.dim(3);
    const std::size_t m = x.size() / std::max<std::size_t>(c, 1);
    for (const Tensor<T>* p : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &running_mean, &running_var})
        if (p->rank() != 1 || p->dim(0) != c) shape_mismatch("batch_norm", x.shape(), p->shape());
    if (mode == Mode::train && m < 2)
        throw ShapeError("batch_norm: train mode needs N*H*W >= 2, got shape " + to_string(x.shape()));

    std::vector<T> mean(c), inv_std(c);
    auto xv = x.data();
    if (mode == Mode::train) {
        std::vector<double> s(c, 0.0), s2(c, 0.0);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t ch = 0; ch < c; ++ch) s[ch] += xv[i * c + ch];
        for (std::size_t ch = 0; ch < c; ++ch) s[ch] /= static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t ch = 0; ch < c; ++ch) {
                double d = xv[i * c + ch] - s[ch];
                s2[ch] += d * d;
            }
        auto rm = running_mean.mutable_data();
        auto rv = running_var.mutable_data();
        for (std::size_t ch = 0; ch < c; ++ch) {
            double var = s2[ch] / static_cast<double>(m);
            mean[ch] = static_cast<T>(s[ch]);
            inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var + opt.eps));
            rm[ch] = static_cast<T>(opt.momentum * rm[ch] + (1.0 - opt.momentum) * s[ch]);
            rv[ch] = static_cast<T>(opt.momentum * rv[ch] + (1.0 - opt.momentum) * var);
        }
    } else {
        auto rm = running_mean.data();
        auto rv = running_var.data();
        for (std::size_t ch = 0; ch < c; ++ch) {
            mean[ch] = rm[ch];
            inv_std[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[ch]) + opt.eps));
        }
    }

    std::vector<T> xhat(x.size());
    std::vector<T> out(x.size());
    auto gv = gamma.data(), bv = beta.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t j = i * c + ch;
            xhat[j] = (xv[j] - mean[ch]) * inv_std[ch];
            out[j] = gv[ch] * xhat[j] + bv[ch];
        }

    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
    const bool batch_stats = mode == Mode::train;
    return detail::make_result<T>(
        "batch_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
        [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](std::span<const T> g) {
            std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const std::size_t j = i * c + ch;
                    sum_g[ch] += g[j];
                    sum_gx[ch] += static_cast<double>(g[j]) * xhat[j];
                }
            if (auto dg = detail::grad_of(gi); !dg.empty())
                for (std::size_t ch = 0; ch < c; ++ch) dg[ch] += static_cast<T>(sum_gx[ch]);
            if (auto db = detail::grad_of(bi); !db.empty())
                for (std::size_t ch = 0; ch < c; ++ch) db[ch] += static_cast<T>(sum_g[ch]);
            auto dx = detail::grad_of(xi);
            if (dx.empty()) return;
            const auto& gam = gi->data;
            const double md = static_cast<double>(m);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const std::size_t j = i * c + ch;
                    const T scale = gam[ch] * inv_std[ch];
                    if (batch_stats)
                        dx[j] += scale * static_cast<T>(g[j] - sum_g[ch] / md - xhat[j] * sum_gx[ch] / md);
                    else
                        dx[j] += scale * g[j];
                }
        });
}

/// Mean over H and W: [N,H,W,C] -> [N,C].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    detail::require_rank4("global_avg_pool", x);
    const std::size_t n = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
    std::vector<T> out(n * c, T{0});
    auto xv = x.data();
    for (std::size_t b = 0; b < n; ++b) {
        std::vector<double> acc(c, 0.0);
        for (std::size_t p = 0; p < hw; ++p)
            for (std::size_t ch = 0; ch < c; ++ch) acc[ch] += xv[(b * hw + p) * c + ch];
        for (std::size_t ch = 0; ch < c; ++ch) out[b * c + ch] = static_cast<T>(acc[ch] / static_cast<double>(hw));
    }
    auto xi = x.impl();
    return detail::make_result<T>("global_avg_pool", Shape{n, c}, std::move(out), {&x}, [=](std::span<const T> g) {
        auto dx = detail::grad_of(xi);
        const T inv = T{1} / static_cast<T>(hw);
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t p = 0; p < hw; ++p)
                for (std::size_t ch = 0; ch < c; ++ch) dx[(b * hw + p) * c + ch] += g[b * c + ch] * inv;
    });
}

/// Fully connected layer: [N,Cin] x weight[Cin,Cout] + bias[Cout].
template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    if (x.rank() != 2) bad_shape("dense", x.shape(), "[N,Cin]");
    if (weight.rank() != 2 || weight.dim(0) != x.dim(1)) shape_mismatch("dense", x.shape(), weight.shape());
    if (bias.rank() != 1 || bias.dim(0) != weight.dim(1)) shape_mismatch("dense", weight.shape(), bias.shape());
    const auto n = static_cast<Eigen::Index>(x.dim(0));
    const auto cin = static_cast<Eigen::Index>(weight.dim(0));
    const auto cout = static_cast<Eigen::Index>(weight.dim(1));
    std::vector<T> out(static_cast<std::size_t>(n * cout));
    detail::MatMap<T> om(out.data(), n, cout);
    om.noalias() = detail::ConstMatMap<T>(x.data().data(), n, cin) * detail::ConstMatMap<T>(weight.data().data(), cin, cout);
    auto bv = bias.data();
    for (Eigen::Index r = 0; r < n; ++r)
        for (Eigen::Index j = 0; j < cout; ++j) om(r, j) += bv[static_cast<std::size_t>(j)];

    auto xi = x.impl(), wi = weight.impl(), bi = bias.impl();
    return detail::make_result<T>(
        "dense", Shape{x.dim(0), weight.dim(1)}, std::move(out), {&x, &weight, &bias}, [=](std::span<const T> g) {
            detail::ConstMatMap<T> gm(g.data(), n, cout);
            if (auto dx = detail::grad_of(xi); !dx.empty())
                detail::MatMap<T>(dx.data(), n, cin).noalias() +=
                    gm * detail::ConstMatMap<T>(wi->data.data(), cin, cout).transpose();
            if (auto dw = detail::grad_of(wi); !dw.empty())
                detail::MatMap<T>(dw.data(), cin, cout).noalias() +=
                    detail::ConstMatMap<T>(xi->data.data(), n, cin).transpose() * gm;
            if (auto db = detail::grad_of(bi); !db.empty())
                for (Eigen::Index r = 0; r < n; ++r)
                    for (Eigen::Index j = 0; j < cout; ++j) db[static_cast<std::size_t>(j)] += gm(r, j);
        });
}

/// Multiplies x[N,H,W,C] channel-wise by s[N,C].
template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s) {
    detail::require_rank4("scale_channels", x);
    const std::size_t n = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
    if (s.rank() != 2 || s.dim(0) != n || s.dim(1) != c) shape_mismatch("scale_channels", x.shape(), s.shape());
    std::vector<T> out(x.size());
    auto xv = x.data(), sv = s.data();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < hw; ++p)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const std::size_t j = (b * hw + p) * c + ch;
                out[j] = xv[j] * sv[b * c + ch];
            }
    auto xi = x.impl(), si = s.impl();
    return detail::make_result<T>("scale_channels", x.shape(), std::move(out), {&x, &s}, [=](std::span<const T> g) {
        auto dx = detail::grad_of(xi);
        auto ds = detail::grad_of(si);
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t p = 0; p < hw; ++p)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const std::size_t j = (b * hw + p) * c + ch;
                    if (!dx.empty()) dx[j] += g[j] * si->data[b * c + ch];
                    if (!ds.empty()) ds[b * c + ch] += g[j] * xi->data[j];
                }
    });
}

/// Max over disjoint 2x2 windows; ties resolve to the first element in
/// row-major window order.
template <typename T>
Tensor<T> max_pool_2x2(const Tensor<T>& x) {
    detail::require_rank4("max_pool_2x2", x);
    const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    if (h % 2 || w % 2) bad_shape("max_pool_2x2", x.shape(), "even H and W");
    const std::size_t oh = h / 2, ow = w / 2;
    std::vector<T> out(n * oh * ow * c);
    std::vector<std::size_t> argmax(out.size());
    auto xv = x.data();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    std::size_t best = ((b * h + 2 * oy) * w + 2 * ox) * c + ch;
                    for (std::size_t dy = 0; dy < 2; ++dy)
                        for (std::size_t dx = 0; dx < 2; ++dx) {
                            const std::size_t j = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if (xv[j] > xv[best]) best = j;
                        }
                    const std::size_t o = ((b * oh + oy) * ow + ox) * c + ch;
                    out[o] = xv[best];
                    argmax[o] = best;
                }
    auto xi = x.impl();
    return detail::make_result<T>("max_pool_2x2", Shape{n, oh, ow, c}, std::move(out), {&x},
                                  [xi, argmax = std::move(argmax)](std::span<const T> g) {
                                      auto dx = detail::grad_of(xi);
                                      for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += g[o];
                                  });
}

/// Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block.
template <typename T>
Tensor<T> upsample_2x2(const Tensor<T>& x) {
    detail::require_rank4("upsample_2x2", x);
    const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    const std::size_t oh = 2 * h, ow = 2 * w;
    std::vector<T> out(n * oh * ow * c);
    auto xv = x.data();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                const T* src = xv.data() + ((b * h + oy / 2) * w + ox / 2) * c;
                std::copy(src, src + c, out.begin() + static_cast<std::ptrdiff_t>(((b * oh + oy) * ow + ox) * c));
            }
    auto xi = x.impl();
    return detail::make_result<T>("upsample_2x2", Shape{n, oh, ow, c}, std::move(out), {&x}, [=](std::span<const T> g) {
        auto dx = detail::grad_of(xi);
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t oy = 0; oy < oh; ++oy)
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    T* dst = dx.data() + ((b * h + oy / 2) * w + ox / 2) * c;
                    const T* src = g.data() + ((b * oh + oy) * ow + ox) * c;
                    for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                }
    });
}

/// Channel concatenation: a fills channels [0, Ca), b fills [Ca, Ca + Cb).
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_rank4("concat_channels", a);
    detail::require_rank4("concat_channels", b);
    if (a.dim(0) != b.dim(0) || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
        shape_mismatch("concat_channels", a.shape(), b.shape());
    const std::size_t pixels = a.dim(0) * a.dim(1) * a.dim(2), ca = a.dim(3), cb = b.dim(3), c = ca + cb;
    std::vector<T> out(pixels * c);
    auto av = a.data(), bv = b.data();
    for (std::size_t p = 0; p < pixels; ++p) {
        std::copy_n(av.data() + p * ca, ca, out.data() + p * c);
        std::copy_n(bv.data() + p * cb, cb, out.data() + p * c + ca);
    }
    auto ai = a.impl(), bi = b.impl();
    return detail::make_result<T>("concat_channels", Shape{a.dim(0), a.dim(1), a.dim(2), c}, std::move(out), {&a, &b},
                                  [=](std::span<const T> g) {
                                      auto da = detail::grad_of(ai);
                                      auto db = detail::grad_of(bi);
                                      for (std::size_t p = 0; p < pixels; ++p) {
                                          for (std::size_t k = 0; k < ca && !da.empty(); ++k)
                                              da[p * ca + k] += g[p * c + k];
                                          for (std::size_t k = 0; k < cb && !db.empty(); ++k)
                                              db[p * cb + k] += g[p * c + ca + k];
                                      }
                                  });
}

/// Copies channels [begin, end) out of a channels-last tensor. Not recorded.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t end) {
    detail::require_rank4("slice_channels", x);
    const std::size_t c = x.dim(3);
    if (begin > end || end > c) bad_shape("slice_channels", x.shape(), "channel range inside C");
    const std::size_t pixels = x.size() / std::max<std::size_t>(c, 1), oc = end - begin;
    std::vector<T> out(pixels * oc);
    auto xv = x.data();
    for (std::size_t p = 0; p < pixels; ++p) std::copy_n(xv.data() + p * c + begin, oc, out.data() + p * oc);
    return Tensor<T>(Shape{x.dim(0), x.dim(1), x.dim(2), oc}, std::move(out));
}

}  // namespace p2s
