#include "snet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

namespace snet {
namespace ops {

namespace {

constexpr double kGeluCoeff = 0.044715;
const double kGeluScale = std::sqrt(2.0 / M_PI);

void require_same_shape(Tensor a, Tensor b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ConfigError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                          shape_to_string(b.shape()));
    }
}

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// outer/len/inner decomposition of `shape` around `axis`.
struct AxisSplit {
    std::int64_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, int axis) {
    AxisSplit s;
    s.len = shape[static_cast<std::size_t>(axis)];
    for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

template <typename Fwd, typename Bwd>
Tensor elementwise_unary(Tensor x, Fwd fwd, Bwd dfdx) {
    const bool rec = grad_recording(x);
    Tensor out = Tensor::zeros(x.shape(), rec);
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = fwd(xv[i]);
    if (rec) {
        Graph::current()->record([x, out, dfdx]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            const auto& xv = x.data();
            auto& gx = x.grad();
            for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += go[i] * dfdx(xv[i]);
        });
    }
    return out;
}

}  // namespace

Tensor add(Tensor a, Tensor b) {
    require_same_shape(a, b, "add");
    const bool rec = grad_recording(a, b);
    Tensor out = Tensor::zeros(a.shape(), rec);
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] + bv[i];
    if (rec) {
        Graph::current()->record([a, b, out]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
            }
        });
    }
    return out;
}

Tensor sub(Tensor a, Tensor b) {
    require_same_shape(a, b, "sub");
    const bool rec = grad_recording(a, b);
    Tensor out = Tensor::zeros(a.shape(), rec);
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] - bv[i];
    if (rec) {
        Graph::current()->record([a, b, out]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
            }
        });
    }
    return out;
}

Tensor mul(Tensor a, Tensor b) {
    require_same_shape(a, b, "mul");
    const bool rec = grad_recording(a, b);
    Tensor out = Tensor::zeros(a.shape(), rec);
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * bv[i];
    if (rec) {
        Graph::current()->record([a, b, out]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            const auto& av = a.data();
            const auto& bv = b.data();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
            }
        });
    }
    return out;
}

Tensor div(Tensor a, Tensor b) {
    require_same_shape(a, b, "div");
    const bool rec = grad_recording(a, b);
    Tensor out = Tensor::zeros(a.shape(), rec);
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] / bv[i];
    if (rec) {
        Graph::current()->record([a, b, out]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            const auto& av = a.data();
            const auto& bv = b.data();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / bv[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i] * av[i] / (bv[i] * bv[i]);
            }
        });
    }
    return out;
}

Tensor add_scalar(Tensor a, double c) {
    return elementwise_unary(
        a, [c](double v) { return v + c; }, [](double) { return 1.0; });
}

Tensor mul_scalar(Tensor a, double c) {
    return elementwise_unary(
        a, [c](double v) { return v * c; }, [c](double) { return c; });
}

Tensor add_broadcast0(Tensor x, Tensor p) {
    if (x.ndim() != p.ndim() + 1 ||
        !std::equal(p.shape().begin(), p.shape().end(), x.shape().begin() + 1)) {
        throw ConfigError("add_broadcast0: " + shape_to_string(p.shape()) + " does not broadcast over " +
                          shape_to_string(x.shape()));
    }
    const bool rec = grad_recording(x, p);
    Tensor out = Tensor::zeros(x.shape(), rec);
    const std::int64_t batch = x.dim(0);
    const std::int64_t block = p.numel();
    const auto& xv = x.data();
    const auto& pv = p.data();
    auto& ov = out.data();
    for (std::int64_t b = 0; b < batch; ++b) {
        const std::size_t off = static_cast<std::size_t>(b * block);
        for (std::int64_t i = 0; i < block; ++i) {
            ov[off + static_cast<std::size_t>(i)] =
                xv[off + static_cast<std::size_t>(i)] + pv[static_cast<std::size_t>(i)];
        }
    }
    if (rec) {
        Graph::current()->record([x, p, out, batch, block]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            if (x.requires_grad()) {
                auto& gx = x.grad();
                for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
            }
            if (p.requires_grad()) {
                auto& gp = p.grad();
                for (std::int64_t b = 0; b < batch; ++b) {
                    const std::size_t off = static_cast<std::size_t>(b * block);
                    for (std::int64_t i = 0; i < block; ++i) {
                        gp[static_cast<std::size_t>(i)] += go[off + static_cast<std::size_t>(i)];
                    }
                }
            }
        });
    }
    return out;
}

Tensor exp(Tensor x) {
    return elementwise_unary(
        x, [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); });
}

Tensor log(Tensor x) {
    return elementwise_unary(
        x, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

Tensor sigmoid(Tensor x) {
    return elementwise_unary(
        x, [](double v) { return stable_sigmoid(v); },
        [](double v) {
            const double s = stable_sigmoid(v);
            return s * (1.0 - s);
        });
}

Tensor gelu(Tensor x) {
    return elementwise_unary(
        x,
        [](double v) {
            const double u = kGeluScale * (v + kGeluCoeff * v * v * v);
            return 0.5 * v * (1.0 + std::tanh(u));
        },
        [](double v) {
            const double u = kGeluScale * (v + kGeluCoeff * v * v * v);
            const double t = std::tanh(u);
            const double du = kGeluScale * (1.0 + 3.0 * kGeluCoeff * v * v);
            return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
        });
}

namespace {

void matmul_forward(const double* a, const double* b, double* out, std::int64_t m, std::int64_t k,
                    std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        double* orow = out + i * n;
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const double av = a[i * k + kk];
            const double* brow = b + kk * n;
            for (std::int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

// dA += G * B^T ; dB += A^T * G (either pointer may be null)
void matmul_backward(const double* a, const double* b, const double* g, double* da, double* db,
                     std::int64_t m, std::int64_t k, std::int64_t n) {
    if (da != nullptr) {
        for (std::int64_t i = 0; i < m; ++i) {
            const double* grow = g + i * n;
            for (std::int64_t kk = 0; kk < k; ++kk) {
                const double* brow = b + kk * n;
                double acc = 0.0;
                for (std::int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                da[i * k + kk] += acc;
            }
        }
    }
    if (db != nullptr) {
        for (std::int64_t i = 0; i < m; ++i) {
            const double* grow = g + i * n;
            for (std::int64_t kk = 0; kk < k; ++kk) {
                const double av = a[i * k + kk];
                double* dbrow = db + kk * n;
                for (std::int64_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
            }
        }
    }
}

}  // namespace

Tensor matmul(Tensor a, Tensor b) {
    if (a.ndim() != 2 || b.ndim() != 2) throw ConfigError("matmul expects 2D operands");
    if (a.dim(1) != b.dim(0)) {
        throw ConfigError("matmul: inner dimensions disagree " + shape_to_string(a.shape()) + " x " +
                          shape_to_string(b.shape()));
    }
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    const bool rec = grad_recording(a, b);
    Tensor out = Tensor::zeros({m, n}, rec);
    matmul_forward(a.data().data(), b.data().data(), out.data().data(), m, k, n);
    if (rec) {
        Graph::current()->record([a, b, out, m, k, n]() mutable {
            if (!out.has_grad()) return;
            matmul_backward(a.data().data(), b.data().data(), out.grad().data(),
                            a.requires_grad() ? a.grad().data() : nullptr,
                            b.requires_grad() ? b.grad().data() : nullptr, m, k, n);
        });
    }
    return out;
}

Tensor bmm(Tensor a, Tensor b) {
    if (a.ndim() != 3 || b.ndim() != 3) throw ConfigError("bmm expects 3D operands");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
        throw ConfigError("bmm: incompatible shapes " + shape_to_string(a.shape()) + " x " +
                          shape_to_string(b.shape()));
    }
    const std::int64_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    const bool rec = grad_recording(a, b);
    Tensor out = Tensor::zeros({batch, m, n}, rec);
    for (std::int64_t i = 0; i < batch; ++i) {
        matmul_forward(a.data().data() + i * m * k, b.data().data() + i * k * n,
                       out.data().data() + i * m * n, m, k, n);
    }
    if (rec) {
        Graph::current()->record([a, b, out, batch, m, k, n]() mutable {
            if (!out.has_grad()) return;
            for (std::int64_t i = 0; i < batch; ++i) {
                matmul_backward(a.data().data() + i * m * k, b.data().data() + i * k * n,
                                out.grad().data() + i * m * n,
                                a.requires_grad() ? a.grad().data() + i * m * k : nullptr,
                                b.requires_grad() ? b.grad().data() + i * k * n : nullptr, m, k, n);
            }
        });
    }
    return out;
}

Tensor transpose_last2(Tensor x) {
    if (x.ndim() != 2 && x.ndim() != 3) throw ConfigError("transpose_last2 expects a 2D or 3D tensor");
    const std::int64_t batch = x.ndim() == 3 ? x.dim(0) : 1;
    const std::int64_t m = x.dim(x.ndim() - 2), n = x.dim(x.ndim() - 1);
    Shape out_shape = x.shape();
    std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
    const bool rec = grad_recording(x);
    Tensor out = Tensor::zeros(std::move(out_shape), rec);
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::int64_t b = 0; b < batch; ++b) {
        const std::size_t off = static_cast<std::size_t>(b * m * n);
        for (std::int64_t i = 0; i < m; ++i) {
            for (std::int64_t j = 0; j < n; ++j) {
                ov[off + static_cast<std::size_t>(j * m + i)] = xv[off + static_cast<std::size_t>(i * n + j)];
            }
        }
    }
    if (rec) {
        Graph::current()->record([x, out, batch, m, n]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            auto& gx = x.grad();
            for (std::int64_t b = 0; b < batch; ++b) {
                const std::size_t off = static_cast<std::size_t>(b * m * n);
                for (std::int64_t i = 0; i < m; ++i) {
                    for (std::int64_t j = 0; j < n; ++j) {
                        gx[off + static_cast<std::size_t>(i * n + j)] +=
                            go[off + static_cast<std::size_t>(j * m + i)];
                    }
                }
            }
        });
    }
    return out;
}

Tensor linear(Tensor x, Tensor w, Tensor bias) {
    if (x.ndim() < 1 || w.ndim() != 2) throw ConfigError("linear expects x (...,C) and w (C,D)");
    const std::int64_t c = x.dim(x.ndim() - 1);
    if (c != w.dim(0)) {
        throw ConfigError("linear: feature dim " + std::to_string(c) + " does not match weight " +
                          shape_to_string(w.shape()));
    }
    const std::int64_t d = w.dim(1);
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != d)) {
        throw ConfigError("linear: bias shape mismatch");
    }
    const std::int64_t rows = x.numel() / c;
    Shape out_shape = x.shape();
    out_shape.back() = d;
    const bool rec = grad_recording(x, w, bias);
    Tensor out = Tensor::zeros(std::move(out_shape), rec);
    matmul_forward(x.data().data(), w.data().data(), out.data().data(), rows, c, d);
    if (bias.defined()) {
        auto& ov = out.data();
        const auto& bv = bias.data();
        for (std::int64_t r = 0; r < rows; ++r) {
            for (std::int64_t j = 0; j < d; ++j) {
                ov[static_cast<std::size_t>(r * d + j)] += bv[static_cast<std::size_t>(j)];
            }
        }
    }
    if (rec) {
        Graph::current()->record([x, w, bias, out, rows, c, d]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            matmul_backward(x.data().data(), w.data().data(), go.data(),
                            x.requires_grad() ? x.grad().data() : nullptr,
                            w.requires_grad() ? w.grad().data() : nullptr, rows, c, d);
            if (bias.defined() && bias.requires_grad()) {
                auto& gb = bias.grad();
                for (std::int64_t r = 0; r < rows; ++r) {
                    for (std::int64_t j = 0; j < d; ++j) {
                        gb[static_cast<std::size_t>(j)] += go[static_cast<std::size_t>(r * d + j)];
                    }
                }
            }
        });
    }
    return out;
}

Tensor conv2d(Tensor input, Tensor kernel, Tensor bias, std::int64_t stride,
              std::int64_t padding, std::int64_t groups) {
    if (input.ndim() != 4 || kernel.ndim() != 4) throw ConfigError("conv2d expects 4D input and kernel");
    if (stride < 1) throw ConfigError("conv2d: stride must be positive");
    if (padding < 0) throw ConfigError("conv2d: padding must be non-negative");
    const std::int64_t b_n = input.dim(0), c_in = input.dim(1), h = input.dim(2), w = input.dim(3);
    const std::int64_t c_out = kernel.dim(0), c_grp = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    if (groups < 1 || c_in % groups != 0 || c_out % groups != 0) {
        throw ConfigError("conv2d: channels not divisible by groups");
    }
    if (c_grp != c_in / groups) {
        throw ConfigError("conv2d: kernel shape " + shape_to_string(kernel.shape()) +
                          " inconsistent with input channels " + std::to_string(c_in) + " and groups " +
                          std::to_string(groups));
    }
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != c_out)) {
        throw ConfigError("conv2d: bias must have one entry per output channel");
    }
    const std::int64_t oh = (h + 2 * padding - kh) / stride + 1;
    const std::int64_t ow = (w + 2 * padding - kw) / stride + 1;
    if (h + 2 * padding < kh || w + 2 * padding < kw || oh < 1 || ow < 1) {
        throw ConfigError("conv2d: kernel larger than padded input");
    }

    const bool rec = grad_recording(input, kernel, bias);
    Tensor out = Tensor::zeros({b_n, c_out, oh, ow}, rec);
    const std::int64_t oc_per_grp = c_out / groups;

    const double* in = input.data().data();
    const double* ker = kernel.data().data();
    double* ov = out.data().data();
    for (std::int64_t b = 0; b < b_n; ++b) {
        for (std::int64_t oc = 0; oc < c_out; ++oc) {
            const std::int64_t g = oc / oc_per_grp;
            const double bias_v = bias.defined() ? bias.data()[static_cast<std::size_t>(oc)] : 0.0;
            for (std::int64_t oy = 0; oy < oh; ++oy) {
                const std::int64_t iy0 = oy * stride - padding;
                const std::int64_t ky_lo = std::max<std::int64_t>(0, -iy0);
                const std::int64_t ky_hi = std::min(kh, h - iy0);
                for (std::int64_t ox = 0; ox < ow; ++ox) {
                    const std::int64_t ix0 = ox * stride - padding;
                    const std::int64_t kx_lo = std::max<std::int64_t>(0, -ix0);
                    const std::int64_t kx_hi = std::min(kw, w - ix0);
                    double acc = bias_v;
                    for (std::int64_t icl = 0; icl < c_grp; ++icl) {
                        const std::int64_t ic = g * c_grp + icl;
                        const double* in_ch = in + ((b * c_in + ic) * h) * w;
                        const double* ker_ch = ker + ((oc * c_grp + icl) * kh) * kw;
                        for (std::int64_t ky = ky_lo; ky < ky_hi; ++ky) {
                            const double* in_row = in_ch + (iy0 + ky) * w + ix0;
                            const double* ker_row = ker_ch + ky * kw;
                            for (std::int64_t kx = kx_lo; kx < kx_hi; ++kx) {
                                acc += in_row[kx] * ker_row[kx];
                            }
                        }
                    }
                    ov[((b * c_out + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }

    if (rec) {
        Graph::current()->record([input, kernel, bias, out, stride, padding, groups, b_n, c_in, h, w, c_out,
                                  c_grp, kh, kw, oh, ow, oc_per_grp]() mutable {
            if (!out.has_grad()) return;
            const double* go = out.grad().data();
            const double* in = input.data().data();
            const double* ker = kernel.data().data();
            double* gin = input.requires_grad() ? input.grad().data() : nullptr;
            double* gker = kernel.requires_grad() ? kernel.grad().data() : nullptr;
            double* gbias = bias.defined() && bias.requires_grad() ? bias.grad().data() : nullptr;
            for (std::int64_t b = 0; b < b_n; ++b) {
                for (std::int64_t oc = 0; oc < c_out; ++oc) {
                    const std::int64_t g = oc / oc_per_grp;
                    for (std::int64_t oy = 0; oy < oh; ++oy) {
                        const std::int64_t iy0 = oy * stride - padding;
                        const std::int64_t ky_lo = std::max<std::int64_t>(0, -iy0);
                        const std::int64_t ky_hi = std::min(kh, h - iy0);
                        for (std::int64_t ox = 0; ox < ow; ++ox) {
                            const std::int64_t ix0 = ox * stride - padding;
                            const std::int64_t kx_lo = std::max<std::int64_t>(0, -ix0);
                            const std::int64_t kx_hi = std::min(kw, w - ix0);
                            const double gv = go[((b * c_out + oc) * oh + oy) * ow + ox];
                            if (gbias != nullptr) gbias[oc] += gv;
                            for (std::int64_t icl = 0; icl < c_grp; ++icl) {
                                const std::int64_t ic = g * c_grp + icl;
                                const std::int64_t in_off = ((b * c_in + ic) * h) * w;
                                const std::int64_t ker_off = ((oc * c_grp + icl) * kh) * kw;
                                for (std::int64_t ky = ky_lo; ky < ky_hi; ++ky) {
                                    const std::int64_t row = in_off + (iy0 + ky) * w + ix0;
                                    const std::int64_t krow = ker_off + ky * kw;
                                    for (std::int64_t kx = kx_lo; kx < kx_hi; ++kx) {
                                        if (gin != nullptr) gin[row + kx] += gv * ker[krow + kx];
                                        if (gker != nullptr) gker[krow + kx] += gv * in[row + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor softmax(Tensor x, int axis) {
    if (axis < 0 || axis >= x.ndim()) throw ConfigError("softmax: axis out of range");
    const AxisSplit ax = split_axis(x.shape(), axis);
    const bool rec = grad_recording(x);
    Tensor out = Tensor::zeros(x.shape(), rec);
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::int64_t o = 0; o < ax.outer; ++o) {
        for (std::int64_t in = 0; in < ax.inner; ++in) {
            const std::size_t base = static_cast<std::size_t>(o * ax.len * ax.inner + in);
            const std::size_t step = static_cast<std::size_t>(ax.inner);
            double mx = xv[base];
            for (std::int64_t l = 1; l < ax.len; ++l) {
                mx = std::max(mx, xv[base + static_cast<std::size_t>(l) * step]);
            }
            double denom = 0.0;
            for (std::int64_t l = 0; l < ax.len; ++l) {
                // clamp keeps exp() above the normal range so outputs stay
                // strictly positive even for extreme logit gaps
                const double shifted = std::max(xv[base + static_cast<std::size_t>(l) * step] - mx, -708.0);
                const double e = std::exp(shifted);
                ov[base + static_cast<std::size_t>(l) * step] = e;
                denom += e;
            }
            for (std::int64_t l = 0; l < ax.len; ++l) {
                ov[base + static_cast<std::size_t>(l) * step] /= denom;
            }
        }
    }
    if (rec) {
        Graph::current()->record([x, out, ax]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            const auto& pv = out.data();
            auto& gx = x.grad();
            for (std::int64_t o = 0; o < ax.outer; ++o) {
                for (std::int64_t in = 0; in < ax.inner; ++in) {
                    const std::size_t base = static_cast<std::size_t>(o * ax.len * ax.inner + in);
                    const std::size_t step = static_cast<std::size_t>(ax.inner);
                    double dot = 0.0;
                    for (std::int64_t l = 0; l < ax.len; ++l) {
                        const std::size_t idx = base + static_cast<std::size_t>(l) * step;
                        dot += go[idx] * pv[idx];
                    }
                    for (std::int64_t l = 0; l < ax.len; ++l) {
                        const std::size_t idx = base + static_cast<std::size_t>(l) * step;
                        gx[idx] += pv[idx] * (go[idx] - dot);
                    }
                }
            }
        });
    }
    return out;
}

Tensor batch_norm(Tensor x, Tensor scale, Tensor shift, Tensor running_mean,
                  Tensor running_var, double momentum, double eps, Mode mode) {
    if (x.ndim() < 2) throw ConfigError("batch_norm expects at least 2D input (batch, channels, ...)");
    const std::int64_t batch = x.dim(0), channels = x.dim(1);
    if (batch < 1) throw ConfigError("batch_norm: empty batch");
    if (scale.numel() != channels || shift.numel() != channels || running_mean.numel() != channels ||
        running_var.numel() != channels) {
        throw ConfigError("batch_norm: scale/shift/running stats must have one entry per channel");
    }
    const std::int64_t spatial = x.numel() / (batch * channels);
    const std::int64_t n_per_ch = batch * spatial;
    const bool rec = grad_recording(x, scale, shift);
    Tensor out = Tensor::zeros(x.shape(), rec);

    const auto& xv = x.data();
    auto& ov = out.data();
    const auto& sv = scale.data();
    const auto& bv = shift.data();
    auto xhat = std::make_shared<std::vector<double>>(xv.size());
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(channels));

    auto element = [&](std::int64_t b, std::int64_t c, std::int64_t s) {
        return static_cast<std::size_t>((b * channels + c) * spatial + s);
    };

    for (std::int64_t c = 0; c < channels; ++c) {
        double mean, var;
        if (mode == Mode::Train) {
            double acc = 0.0;
            for (std::int64_t b = 0; b < batch; ++b) {
                for (std::int64_t s = 0; s < spatial; ++s) acc += xv[element(b, c, s)];
            }
            mean = acc / static_cast<double>(n_per_ch);
            double acc2 = 0.0;
            for (std::int64_t b = 0; b < batch; ++b) {
                for (std::int64_t s = 0; s < spatial; ++s) {
                    const double d = xv[element(b, c, s)] - mean;
                    acc2 += d * d;
                }
            }
            var = acc2 / static_cast<double>(n_per_ch);
            auto& rm = running_mean.data();
            auto& rv = running_var.data();
            rm[static_cast<std::size_t>(c)] = (1.0 - momentum) * rm[static_cast<std::size_t>(c)] + momentum * mean;
            rv[static_cast<std::size_t>(c)] = (1.0 - momentum) * rv[static_cast<std::size_t>(c)] + momentum * var;
        } else {
            mean = running_mean.data()[static_cast<std::size_t>(c)];
            var = running_var.data()[static_cast<std::size_t>(c)];
        }
        const double istd = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<std::size_t>(c)] = istd;
        const double gamma = sv[static_cast<std::size_t>(c)];
        const double beta = bv[static_cast<std::size_t>(c)];
        for (std::int64_t b = 0; b < batch; ++b) {
            for (std::int64_t s = 0; s < spatial; ++s) {
                const std::size_t i = element(b, c, s);
                const double xh = (xv[i] - mean) * istd;
                (*xhat)[i] = xh;
                ov[i] = gamma * xh + beta;
            }
        }
    }

    if (rec) {
        Graph::current()->record([x, scale, shift, out, xhat, inv_std, mode, batch, channels, spatial,
                                  n_per_ch]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            const auto& sv = scale.data();
            auto element = [&](std::int64_t b, std::int64_t c, std::int64_t s) {
                return static_cast<std::size_t>((b * channels + c) * spatial + s);
            };
            for (std::int64_t c = 0; c < channels; ++c) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::int64_t b = 0; b < batch; ++b) {
                    for (std::int64_t s = 0; s < spatial; ++s) {
                        const std::size_t i = element(b, c, s);
                        sum_g += go[i];
                        sum_gx += go[i] * (*xhat)[i];
                    }
                }
                if (scale.requires_grad()) scale.grad()[static_cast<std::size_t>(c)] += sum_gx;
                if (shift.requires_grad()) shift.grad()[static_cast<std::size_t>(c)] += sum_g;
                if (x.requires_grad()) {
                    auto& gx = x.grad();
                    const double gamma = sv[static_cast<std::size_t>(c)];
                    const double istd = (*inv_std)[static_cast<std::size_t>(c)];
                    const double inv_n = 1.0 / static_cast<double>(n_per_ch);
                    for (std::int64_t b = 0; b < batch; ++b) {
                        for (std::int64_t s = 0; s < spatial; ++s) {
                            const std::size_t i = element(b, c, s);
                            if (mode == Mode::Train) {
                                gx[i] += gamma * istd * (go[i] - sum_g * inv_n - (*xhat)[i] * sum_gx * inv_n);
                            } else {
                                gx[i] += gamma * istd * go[i];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor flatten_tokens(Tensor x) {
    if (x.ndim() != 4) throw ConfigError("flatten_tokens expects (B,C,H,W)");
    const std::int64_t b_n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    const bool rec = grad_recording(x);
    Tensor out = Tensor::zeros({b_n, hw, c}, rec);
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::int64_t b = 0; b < b_n; ++b) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            for (std::int64_t n = 0; n < hw; ++n) {
                ov[static_cast<std::size_t>((b * hw + n) * c + ch)] =
                    xv[static_cast<std::size_t>((b * c + ch) * hw + n)];
            }
        }
    }
    if (rec) {
        Graph::current()->record([x, out, b_n, c, hw]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            auto& gx = x.grad();
            for (std::int64_t b = 0; b < b_n; ++b) {
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    for (std::int64_t n = 0; n < hw; ++n) {
                        gx[static_cast<std::size_t>((b * c + ch) * hw + n)] +=
                            go[static_cast<std::size_t>((b * hw + n) * c + ch)];
                    }
                }
            }
        });
    }
    return out;
}

Tensor unflatten_tokens(Tensor tokens, std::int64_t height, std::int64_t width) {
    if (tokens.ndim() != 3) throw ConfigError("unflatten_tokens expects (B,N,C)");
    if (tokens.dim(1) != height * width) {
        throw ConfigError("unflatten_tokens: token count " + std::to_string(tokens.dim(1)) +
                          " != " + std::to_string(height) + "x" + std::to_string(width));
    }
    const std::int64_t b_n = tokens.dim(0), hw = tokens.dim(1), c = tokens.dim(2);
    const bool rec = grad_recording(tokens);
    Tensor out = Tensor::zeros({b_n, c, height, width}, rec);
    const auto& xv = tokens.data();
    auto& ov = out.data();
    for (std::int64_t b = 0; b < b_n; ++b) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            for (std::int64_t n = 0; n < hw; ++n) {
                ov[static_cast<std::size_t>((b * c + ch) * hw + n)] =
                    xv[static_cast<std::size_t>((b * hw + n) * c + ch)];
            }
        }
    }
    if (rec) {
        Graph::current()->record([tokens, out, b_n, c, hw]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            auto& gx = tokens.grad();
            for (std::int64_t b = 0; b < b_n; ++b) {
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    for (std::int64_t n = 0; n < hw; ++n) {
                        gx[static_cast<std::size_t>((b * hw + n) * c + ch)] +=
                            go[static_cast<std::size_t>((b * c + ch) * hw + n)];
                    }
                }
            }
        });
    }
    return out;
}

Tensor reshape(Tensor x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel()) {
        throw ConfigError("reshape: element count mismatch " + shape_to_string(x.shape()) + " -> " +
                          shape_to_string(new_shape));
    }
    const bool rec = grad_recording(x);
    Tensor out = Tensor::from_data(std::move(new_shape), x.data(), rec);
    if (rec) {
        Graph::current()->record([x, out]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            auto& gx = x.grad();
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
        });
    }
    return out;
}

Tensor upsample_nearest(Tensor x, std::int64_t factor) {
    if (x.ndim() != 4) throw ConfigError("upsample_nearest expects (B,C,H,W)");
    if (factor < 1) throw ConfigError("upsample_nearest: factor must be positive");
    const std::int64_t b_n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::int64_t oh = h * factor, ow = w * factor;
    const bool rec = grad_recording(x);
    Tensor out = Tensor::zeros({b_n, c, oh, ow}, rec);
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::int64_t bc = 0; bc < b_n * c; ++bc) {
        const std::size_t in_off = static_cast<std::size_t>(bc * h * w);
        const std::size_t out_off = static_cast<std::size_t>(bc * oh * ow);
        for (std::int64_t oy = 0; oy < oh; ++oy) {
            const std::size_t in_row = in_off + static_cast<std::size_t>((oy / factor) * w);
            for (std::int64_t ox = 0; ox < ow; ++ox) {
                ov[out_off + static_cast<std::size_t>(oy * ow + ox)] =
                    xv[in_row + static_cast<std::size_t>(ox / factor)];
            }
        }
    }
    if (rec) {
        Graph::current()->record([x, out, b_n, c, h, w, oh, ow, factor]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            auto& gx = x.grad();
            for (std::int64_t bc = 0; bc < b_n * c; ++bc) {
                const std::size_t in_off = static_cast<std::size_t>(bc * h * w);
                const std::size_t out_off = static_cast<std::size_t>(bc * oh * ow);
                for (std::int64_t oy = 0; oy < oh; ++oy) {
                    const std::size_t in_row = in_off + static_cast<std::size_t>((oy / factor) * w);
                    for (std::int64_t ox = 0; ox < ow; ++ox) {
                        gx[in_row + static_cast<std::size_t>(ox / factor)] +=
                            go[out_off + static_cast<std::size_t>(oy * ow + ox)];
                    }
                }
            }
        });
    }
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ConfigError("concat: no inputs");
    const int nd = parts.front().ndim();
    if (axis < 0 || axis >= nd) throw ConfigError("concat: axis out of range");
    Shape out_shape = parts.front().shape();
    std::int64_t axis_total = 0;
    for (const Tensor& p : parts) {
        if (p.ndim() != nd) throw ConfigError("concat: rank mismatch");
        for (int i = 0; i < nd; ++i) {
            if (i != axis && p.dim(i) != out_shape[static_cast<std::size_t>(i)]) {
                throw ConfigError("concat: shape mismatch on non-concat axis");
            }
        }
        axis_total += p.dim(axis);
    }
    out_shape[static_cast<std::size_t>(axis)] = axis_total;
    bool rec = false;
    if (Graph::current() != nullptr) {
        for (const Tensor& p : parts) rec = rec || p.requires_grad();
    }
    Tensor out = Tensor::zeros(out_shape, rec);
    const AxisSplit ax = split_axis(out_shape, axis);
    auto& ov = out.data();
    std::int64_t axis_offset = 0;
    for (const Tensor& p : parts) {
        const std::int64_t len = p.dim(axis);
        const auto& pv = p.data();
        for (std::int64_t o = 0; o < ax.outer; ++o) {
            const std::size_t src = static_cast<std::size_t>(o * len * ax.inner);
            const std::size_t dst = static_cast<std::size_t>((o * ax.len + axis_offset) * ax.inner);
            std::copy(pv.begin() + static_cast<std::ptrdiff_t>(src),
                      pv.begin() + static_cast<std::ptrdiff_t>(src + static_cast<std::size_t>(len * ax.inner)),
                      ov.begin() + static_cast<std::ptrdiff_t>(dst));
        }
        axis_offset += len;
    }
    if (rec) {
        std::vector<Tensor> held = parts;
        Graph::current()->record([held, out, ax, axis]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            std::int64_t axis_offset = 0;
            for (Tensor& p : held) {
                const std::int64_t len = p.dim(axis);
                if (p.requires_grad()) {
                    auto& gp = p.grad();
                    for (std::int64_t o = 0; o < ax.outer; ++o) {
                        const std::size_t dst = static_cast<std::size_t>(o * len * ax.inner);
                        const std::size_t src = static_cast<std::size_t>((o * ax.len + axis_offset) * ax.inner);
                        for (std::int64_t i = 0; i < len * ax.inner; ++i) {
                            gp[dst + static_cast<std::size_t>(i)] += go[src + static_cast<std::size_t>(i)];
                        }
                    }
                }
                axis_offset += len;
            }
        });
    }
    return out;
}

std::vector<Tensor> split(Tensor x, const std::vector<std::int64_t>& sizes, int axis) {
    if (axis < 0 || axis >= x.ndim()) throw ConfigError("split: axis out of range");
    std::int64_t total = 0;
    for (std::int64_t s : sizes) {
        if (s <= 0) throw ConfigError("split: sizes must be positive");
        total += s;
    }
    if (total != x.dim(axis)) {
        throw ConfigError("split: sizes sum to " + std::to_string(total) + " but axis has " +
                          std::to_string(x.dim(axis)));
    }
    const AxisSplit ax = split_axis(x.shape(), axis);
    const bool rec = grad_recording(x);
    std::vector<Tensor> parts;
    parts.reserve(sizes.size());
    const auto& xv = x.data();
    std::int64_t axis_offset = 0;
    for (std::int64_t len : sizes) {
        Shape shape = x.shape();
        shape[static_cast<std::size_t>(axis)] = len;
        Tensor p = Tensor::zeros(std::move(shape), rec);
        auto& pv = p.data();
        for (std::int64_t o = 0; o < ax.outer; ++o) {
            const std::size_t src = static_cast<std::size_t>((o * ax.len + axis_offset) * ax.inner);
            const std::size_t dst = static_cast<std::size_t>(o * len * ax.inner);
            std::copy(xv.begin() + static_cast<std::ptrdiff_t>(src),
                      xv.begin() + static_cast<std::ptrdiff_t>(src + static_cast<std::size_t>(len * ax.inner)),
                      pv.begin() + static_cast<std::ptrdiff_t>(dst));
        }
        parts.push_back(p);
        axis_offset += len;
    }
    if (rec) {
        Graph::current()->record([x, parts, ax, axis]() mutable {
            auto& gx = x.grad();
            std::int64_t axis_offset = 0;
            for (const Tensor& p : parts) {
                const std::int64_t len = p.dim(axis);
                if (p.has_grad()) {
                    const auto& gp = p.grad();
                    for (std::int64_t o = 0; o < ax.outer; ++o) {
                        const std::size_t dst = static_cast<std::size_t>((o * ax.len + axis_offset) * ax.inner);
                        const std::size_t src = static_cast<std::size_t>(o * len * ax.inner);
                        for (std::int64_t i = 0; i < len * ax.inner; ++i) {
                            gx[dst + static_cast<std::size_t>(i)] += gp[src + static_cast<std::size_t>(i)];
                        }
                    }
                }
                axis_offset += len;
            }
        });
    }
    return parts;
}

Tensor sum_all(Tensor x) {
    const bool rec = grad_recording(x);
    Tensor out = Tensor::zeros({1}, rec);
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    out.data()[0] = acc;
    if (rec) {
        Graph::current()->record([x, out]() mutable {
            if (!out.has_grad()) return;
            const double g = out.grad()[0];
            auto& gx = x.grad();
            for (double& v : gx) v += g;
        });
    }
    return out;
}

Tensor mean_all(Tensor x) {
    const double inv_n = 1.0 / static_cast<double>(x.numel());
    return mul_scalar(sum_all(x), inv_n);
}

Tensor channel_sums(Tensor x) {
    if (x.ndim() < 2) throw ConfigError("channel_sums expects at least 2D input");
    const std::int64_t batch = x.dim(0), channels = x.dim(1);
    const std::int64_t spatial = x.numel() / (batch * channels);
    const bool rec = grad_recording(x);
    Tensor out = Tensor::zeros({channels}, rec);
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t c = 0; c < channels; ++c) {
            const std::size_t off = static_cast<std::size_t>((b * channels + c) * spatial);
            double acc = 0.0;
            for (std::int64_t s = 0; s < spatial; ++s) acc += xv[off + static_cast<std::size_t>(s)];
            ov[static_cast<std::size_t>(c)] += acc;
        }
    }
    if (rec) {
        Graph::current()->record([x, out, batch, channels, spatial]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            auto& gx = x.grad();
            for (std::int64_t b = 0; b < batch; ++b) {
                for (std::int64_t c = 0; c < channels; ++c) {
                    const std::size_t off = static_cast<std::size_t>((b * channels + c) * spatial);
                    const double g = go[static_cast<std::size_t>(c)];
                    for (std::int64_t s = 0; s < spatial; ++s) gx[off + static_cast<std::size_t>(s)] += g;
                }
            }
        });
    }
    return out;
}

Tensor bce_with_logits(Tensor logits, Tensor targets) {
    require_same_shape(logits, targets, "bce_with_logits");
    const bool rec = grad_recording(logits);
    Tensor out = Tensor::zeros({1}, rec);
    const auto& xv = logits.data();
    const auto& tv = targets.data();
    const double inv_n = 1.0 / static_cast<double>(logits.numel());
    double acc = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double x = xv[i];
        acc += std::max(x, 0.0) - x * tv[i] + std::log1p(std::exp(-std::abs(x)));
    }
    out.data()[0] = acc * inv_n;
    if (rec) {
        Graph::current()->record([logits, targets, out, inv_n]() mutable {
            if (!out.has_grad()) return;
            const double g = out.grad()[0] * inv_n;
            const auto& xv = logits.data();
            const auto& tv = targets.data();
            auto& gx = logits.grad();
            for (std::size_t i = 0; i < xv.size(); ++i) {
                gx[i] += g * (stable_sigmoid(xv[i]) - tv[i]);
            }
        });
    }
    return out;
}

}  // namespace ops
}  // namespace snet
