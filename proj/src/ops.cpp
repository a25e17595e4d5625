#include "avstyle/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace avstyle {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch");
}

bool any_grad(const Tensor& a, const Tensor& b) { return a.requires_grad() || b.requires_grad(); }

// Elementwise unary op with pointwise local derivative computed from (x, y).
template <typename Fwd, typename Dydx>
Tensor unary_op(Tape& tape, const Tensor& x, const char* name, Fwd fwd, Dydx dydx) {
    Tensor y = Tensor::zeros(x.shape());
    const float* xp = x.data().data();
    float* yp = y.data_mut().data();
    const int n = x.numel();
    for (int i = 0; i < n; ++i) yp[i] = fwd(xp[i]);
    if (x.requires_grad()) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        auto yi = y.impl();
        tape.record(name, {xi, yi}, [xi, yi, n, dydx] {
            if (yi->grad.empty()) return;
            xi->ensure_grad();
            for (int i = 0; i < n; ++i)
                xi->grad[i] += yi->grad[i] * dydx(xi->data[i], yi->data[i]);
        });
    }
    return y;
}

} // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: inner dimensions must match");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor c = Tensor::zeros({m, n});
    const float* ap = a.data().data();
    const float* bp = b.data().data();
    float* cp = c.data_mut().data();
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int t = 0; t < k; ++t) acc += static_cast<double>(ap[i * k + t]) * bp[t * n + j];
            cp[i * n + j] = static_cast<float>(acc);
        }
    }
    if (any_grad(a, b)) {
        c.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), ci = c.impl();
        tape.record("matmul", {ai, bi, ci}, [ai, bi, ci, m, k, n] {
            if (ci->grad.empty()) return;
            const float* g = ci->grad.data();
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int t = 0; t < k; ++t) {
                        double acc = 0.0;
                        for (int j = 0; j < n; ++j)
                            acc += static_cast<double>(g[i * n + j]) * bi->data[t * n + j];
                        ai->grad[i * k + t] += static_cast<float>(acc);
                    }
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (int t = 0; t < k; ++t)
                    for (int j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (int i = 0; i < m; ++i)
                            acc += static_cast<double>(ai->data[i * k + t]) * g[i * n + j];
                        bi->grad[t * n + j] += static_cast<float>(acc);
                    }
            }
        });
    }
    return c;
}

Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1))
        throw DimensionError("matmul_nt: inner dimensions must match");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor c = Tensor::zeros({m, n});
    const float* ap = a.data().data();
    const float* bp = b.data().data();
    float* cp = c.data_mut().data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int t = 0; t < k; ++t) acc += static_cast<double>(ap[i * k + t]) * bp[j * k + t];
            cp[i * n + j] = static_cast<float>(acc);
        }
    if (any_grad(a, b)) {
        c.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), ci = c.impl();
        tape.record("matmul_nt", {ai, bi, ci}, [ai, bi, ci, m, k, n] {
            if (ci->grad.empty()) return;
            const float* g = ci->grad.data();
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int t = 0; t < k; ++t) {
                        double acc = 0.0;
                        for (int j = 0; j < n; ++j)
                            acc += static_cast<double>(g[i * n + j]) * bi->data[j * k + t];
                        ai->grad[i * k + t] += static_cast<float>(acc);
                    }
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (int j = 0; j < n; ++j)
                    for (int t = 0; t < k; ++t) {
                        double acc = 0.0;
                        for (int i = 0; i < m; ++i)
                            acc += static_cast<double>(g[i * n + j]) * ai->data[i * k + t];
                        bi->grad[j * k + t] += static_cast<float>(acc);
                    }
            }
        });
    }
    return c;
}

Tensor linear(Tape& tape, const Tensor& w, const Tensor& x, const Tensor& b) {
    if (w.ndim() != 2 || x.ndim() != 1 || b.ndim() != 1)
        throw DimensionError("linear: expected w[m,k], x[k], b[m]");
    const int m = w.dim(0), k = w.dim(1);
    if (x.dim(0) != k || b.dim(0) != m) throw DimensionError("linear: size mismatch");
    Tensor y = Tensor::zeros({m});
    const float* wp = w.data().data();
    const float* xp = x.data().data();
    float* yp = y.data_mut().data();
    for (int i = 0; i < m; ++i) {
        double acc = b.data()[i];
        for (int t = 0; t < k; ++t) acc += static_cast<double>(wp[i * k + t]) * xp[t];
        yp[i] = static_cast<float>(acc);
    }
    if (w.requires_grad() || x.requires_grad() || b.requires_grad()) {
        y.set_requires_grad(true);
        auto wi = w.impl(), xi = x.impl(), bi = b.impl(), yi = y.impl();
        tape.record("linear", {wi, xi, bi, yi}, [wi, xi, bi, yi, m, k] {
            if (yi->grad.empty()) return;
            const float* g = yi->grad.data();
            if (wi->requires_grad) {
                wi->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int t = 0; t < k; ++t) wi->grad[i * k + t] += g[i] * xi->data[t];
            }
            if (xi->requires_grad) {
                xi->ensure_grad();
                for (int t = 0; t < k; ++t) {
                    double acc = 0.0;
                    for (int i = 0; i < m; ++i) acc += static_cast<double>(g[i]) * wi->data[i * k + t];
                    xi->grad[t] += static_cast<float>(acc);
                }
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (int i = 0; i < m; ++i) bi->grad[i] += g[i];
            }
        });
    }
    return y;
}

namespace {

// im2col layout: col[k][n] with k = (ci*3 + ky)*3 + kx and n = oy*ow + ox.
// Every product loop below runs unit-stride over n, which vectorizes without
// needing float reassociation.
struct ConvDims {
    int ci, h, w, co, oh, ow, stride, k, n;
};

ConvDims conv_dims(const Tensor& input, const Tensor& kernel, int stride) {
    ConvDims d;
    d.ci = input.dim(0);
    d.h = input.dim(1);
    d.w = input.dim(2);
    d.co = kernel.dim(0);
    d.stride = stride;
    d.oh = (d.h - 1) / stride + 1;
    d.ow = (d.w - 1) / stride + 1;
    d.k = d.ci * 9;
    d.n = d.oh * d.ow;
    return d;
}

void im2col(const float* in, const ConvDims& d, float* col) {
    std::fill(col, col + static_cast<size_t>(d.k) * d.n, 0.0f);
    for (int ci = 0; ci < d.ci; ++ci) {
        const float* plane = in + static_cast<size_t>(ci) * d.h * d.w;
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                float* crow = col + (static_cast<size_t>(ci * 3 + ky) * 3 + kx) * d.n;
                for (int oy = 0; oy < d.oh; ++oy) {
                    const int iy = oy * d.stride + ky - 1;
                    if (iy < 0 || iy >= d.h) continue;
                    const float* irow = plane + static_cast<size_t>(iy) * d.w;
                    float* out = crow + static_cast<size_t>(oy) * d.ow;
                    for (int ox = 0; ox < d.ow; ++ox) {
                        const int ix = ox * d.stride + kx - 1;
                        if (ix >= 0 && ix < d.w) out[ox] = irow[ix];
                    }
                }
            }
    }
}

void col2im_add(const float* col, const ConvDims& d, float* din) {
    for (int ci = 0; ci < d.ci; ++ci) {
        float* plane = din + static_cast<size_t>(ci) * d.h * d.w;
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                const float* crow = col + (static_cast<size_t>(ci * 3 + ky) * 3 + kx) * d.n;
                for (int oy = 0; oy < d.oh; ++oy) {
                    const int iy = oy * d.stride + ky - 1;
                    if (iy < 0 || iy >= d.h) continue;
                    float* irow = plane + static_cast<size_t>(iy) * d.w;
                    const float* src = crow + static_cast<size_t>(oy) * d.ow;
                    for (int ox = 0; ox < d.ow; ++ox) {
                        const int ix = ox * d.stride + kx - 1;
                        if (ix >= 0 && ix < d.w) irow[ix] += src[ox];
                    }
                }
            }
    }
}

} // namespace

Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride) {
    if (input.ndim() != 3) throw DimensionError("conv2d: input must be [c,h,w]");
    if (kernel.ndim() != 4 || kernel.dim(2) != 3 || kernel.dim(3) != 3)
        throw DimensionError("conv2d: kernel must be [co,ci,3,3]");
    if (kernel.dim(1) != input.dim(0)) throw DimensionError("conv2d: channel mismatch");
    if (bias.ndim() != 1 || bias.dim(0) != kernel.dim(0)) throw DimensionError("conv2d: bias size mismatch");
    if (stride != 1 && stride != 2) throw UsageError("conv2d: stride must be 1 or 2");

    const ConvDims d = conv_dims(input, kernel, stride);
    Tensor out = Tensor::zeros({d.co, d.oh, d.ow});
    {
        std::vector<float> col(static_cast<size_t>(d.k) * d.n);
        im2col(input.data().data(), d, col.data());
        const float* ker = kernel.data().data();
        float* op = out.data_mut().data();
        for (int co = 0; co < d.co; ++co) {
            float* orow = op + static_cast<size_t>(co) * d.n;
            std::fill(orow, orow + d.n, bias.data()[co]);
            const float* krow = ker + static_cast<size_t>(co) * d.k;
            for (int k = 0; k < d.k; ++k) {
                const float wv = krow[k];
                if (wv == 0.0f) continue;
                const float* crow = col.data() + static_cast<size_t>(k) * d.n;
                for (int n = 0; n < d.n; ++n) orow[n] += wv * crow[n];
            }
        }
    }

    if (input.requires_grad() || kernel.requires_grad() || bias.requires_grad()) {
        out.set_requires_grad(true);
        auto ii = input.impl(), ki = kernel.impl(), bi = bias.impl(), oi = out.impl();
        tape.record("conv2d", {ii, ki, bi, oi}, [ii, ki, bi, oi, d] {
            if (oi->grad.empty()) return;
            const float* g = oi->grad.data();
            if (ii->requires_grad) {
                ii->ensure_grad();
                std::vector<float> dcol(static_cast<size_t>(d.k) * d.n, 0.0f);
                for (int co = 0; co < d.co; ++co) {
                    const float* grow = g + static_cast<size_t>(co) * d.n;
                    const float* krow = ki->data.data() + static_cast<size_t>(co) * d.k;
                    for (int k = 0; k < d.k; ++k) {
                        const float wv = krow[k];
                        if (wv == 0.0f) continue;
                        float* crow = dcol.data() + static_cast<size_t>(k) * d.n;
                        for (int n = 0; n < d.n; ++n) crow[n] += wv * grow[n];
                    }
                }
                col2im_add(dcol.data(), d, ii->grad.data());
            }
            if (ki->requires_grad) {
                ki->ensure_grad();
                std::vector<float> col(static_cast<size_t>(d.k) * d.n);
                im2col(ii->data.data(), d, col.data());
                for (int co = 0; co < d.co; ++co) {
                    const float* grow = g + static_cast<size_t>(co) * d.n;
                    float* gkrow = ki->grad.data() + static_cast<size_t>(co) * d.k;
                    for (int k = 0; k < d.k; ++k) {
                        const float* crow = col.data() + static_cast<size_t>(k) * d.n;
                        double acc = 0.0;
                        for (int n = 0; n < d.n; ++n)
                            acc += static_cast<double>(grow[n]) * crow[n];
                        gkrow[k] += static_cast<float>(acc);
                    }
                }
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (int co = 0; co < d.co; ++co) {
                    const float* grow = g + static_cast<size_t>(co) * d.n;
                    double acc = 0.0;
                    for (int n = 0; n < d.n; ++n) acc += grow[n];
                    bi->grad[co] += static_cast<float>(acc);
                }
            }
        });
    }
    return out;
}

Tensor relu(Tape& tape, const Tensor& t) {
    return unary_op(
        tape, t, "relu", [](float x) { return x > 0.0f ? x : 0.0f; },
        [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; });
}

Tensor tanh_act(Tape& tape, const Tensor& t) {
    return unary_op(
        tape, t, "tanh", [](float x) { return std::tanh(x); },
        [](float, float y) { return 1.0f - y * y; });
}

Tensor sigmoid(Tape& tape, const Tensor& t) {
    return unary_op(
        tape, t, "sigmoid", [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
        [](float, float y) { return y * (1.0f - y); });
}

Tensor softplus(Tape& tape, const Tensor& t) {
    return unary_op(
        tape, t, "softplus",
        [](float x) { return x > 20.0f ? x : std::log1p(std::exp(x)); },
        [](float x, float) { return 1.0f / (1.0f + std::exp(-x)); });
}

namespace {

template <typename Op>
Tensor binary_op(Tape& tape, const Tensor& a, const Tensor& b, const char* name, Op op, int mode) {
    require_same_shape(a, b, name);
    Tensor y = Tensor::zeros(a.shape());
    const int n = a.numel();
    const float* ap = a.data().data();
    const float* bp = b.data().data();
    float* yp = y.data_mut().data();
    for (int i = 0; i < n; ++i) yp[i] = op(ap[i], bp[i]);
    if (any_grad(a, b)) {
        y.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), yi = y.impl();
        tape.record(name, {ai, bi, yi}, [ai, bi, yi, n, mode] {
            if (yi->grad.empty()) return;
            const float* g = yi->grad.data();
            if (ai->requires_grad) {
                ai->ensure_grad();
                if (mode == 2) { // mul
                    for (int i = 0; i < n; ++i) ai->grad[i] += g[i] * bi->data[i];
                } else {
                    for (int i = 0; i < n; ++i) ai->grad[i] += g[i];
                }
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                if (mode == 0) { // add
                    for (int i = 0; i < n; ++i) bi->grad[i] += g[i];
                } else if (mode == 1) { // sub
                    for (int i = 0; i < n; ++i) bi->grad[i] -= g[i];
                } else { // mul
                    for (int i = 0; i < n; ++i) bi->grad[i] += g[i] * ai->data[i];
                }
            }
        });
    }
    return y;
}

} // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    return binary_op(tape, a, b, "add", [](float x, float y) { return x + y; }, 0);
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    return binary_op(tape, a, b, "sub", [](float x, float y) { return x - y; }, 1);
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    return binary_op(tape, a, b, "mul", [](float x, float y) { return x * y; }, 2);
}

Tensor scale(Tape& tape, const Tensor& t, float s) {
    if (!std::isfinite(s)) throw NumericError("scale: non-finite factor");
    return unary_op(
        tape, t, "scale", [s](float x) { return s * x; }, [s](float, float) { return s; });
}

Tensor add_scalar(Tape& tape, const Tensor& t, float c) {
    if (!std::isfinite(c)) throw NumericError("add_scalar: non-finite constant");
    return unary_op(
        tape, t, "add_scalar", [c](float x) { return x + c; }, [](float, float) { return 1.0f; });
}

namespace {

struct ReducePlan {
    std::vector<int> out_shape;
    std::vector<int> out_index; // flat input index -> flat output index
    int group = 1;              // number of input elements per output element
};

ReducePlan plan_reduce(const Tensor& t, const std::vector<int>& axes_in) {
    const int nd = t.ndim();
    std::vector<bool> reduced(static_cast<size_t>(nd), false);
    if (axes_in.empty()) {
        std::fill(reduced.begin(), reduced.end(), true);
    } else {
        for (int a : axes_in) {
            if (a < 0 || a >= nd) throw DimensionError("reduce: axis out of range");
            reduced[static_cast<size_t>(a)] = true;
        }
    }
    ReducePlan plan;
    for (int i = 0; i < nd; ++i) {
        if (reduced[static_cast<size_t>(i)])
            plan.group *= t.dim(i);
        else
            plan.out_shape.push_back(t.dim(i));
    }
    if (plan.out_shape.empty()) plan.out_shape.push_back(1);

    std::vector<int> in_strides(static_cast<size_t>(nd));
    int s = 1;
    for (int i = nd - 1; i >= 0; --i) {
        in_strides[static_cast<size_t>(i)] = s;
        s *= t.dim(i);
    }
    std::vector<int> out_strides(static_cast<size_t>(nd), 0);
    int os = 1;
    for (int i = nd - 1; i >= 0; --i) {
        if (!reduced[static_cast<size_t>(i)]) {
            out_strides[static_cast<size_t>(i)] = os;
            os *= t.dim(i);
        }
    }
    plan.out_index.resize(static_cast<size_t>(t.numel()));
    for (int flat = 0; flat < t.numel(); ++flat) {
        int rem = flat, oi = 0;
        for (int i = 0; i < nd; ++i) {
            const int idx = rem / in_strides[static_cast<size_t>(i)];
            rem -= idx * in_strides[static_cast<size_t>(i)];
            oi += idx * out_strides[static_cast<size_t>(i)];
        }
        plan.out_index[static_cast<size_t>(flat)] = oi;
    }
    return plan;
}

Tensor reduce_impl(Tape& tape, const Tensor& t, const std::vector<int>& axes, bool mean) {
    ReducePlan plan = plan_reduce(t, axes);
    Tensor out = Tensor::zeros(plan.out_shape);
    const int n = t.numel();
    const int on = out.numel();
    std::vector<double> acc(static_cast<size_t>(on), 0.0);
    const float* tp = t.data().data();
    for (int i = 0; i < n; ++i) acc[static_cast<size_t>(plan.out_index[static_cast<size_t>(i)])] += tp[i];
    const double inv = mean ? 1.0 / plan.group : 1.0;
    float* op = out.data_mut().data();
    for (int i = 0; i < on; ++i) op[i] = static_cast<float>(acc[static_cast<size_t>(i)] * inv);
    if (t.requires_grad()) {
        out.set_requires_grad(true);
        auto ti = t.impl();
        auto oi = out.impl();
        const float w = mean ? static_cast<float>(inv) : 1.0f;
        tape.record(mean ? "reduce_mean" : "reduce_sum", {ti, oi},
                    [ti, oi, n, w, idx = std::move(plan.out_index)] {
                        if (oi->grad.empty()) return;
                        ti->ensure_grad();
                        for (int i = 0; i < n; ++i)
                            ti->grad[i] += w * oi->grad[static_cast<size_t>(idx[static_cast<size_t>(i)])];
                    });
    }
    return out;
}

} // namespace

Tensor reduce_sum(Tape& tape, const Tensor& t, const std::vector<int>& axes) {
    return reduce_impl(tape, t, axes, false);
}

Tensor reduce_mean(Tape& tape, const Tensor& t, const std::vector<int>& axes) {
    return reduce_impl(tape, t, axes, true);
}

namespace {

double l2_norm(const float* p, int n) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += static_cast<double>(p[i]) * p[i];
    return std::sqrt(acc);
}

} // namespace

Tensor l2_normalize(Tape& tape, const Tensor& v) {
    const int n = v.numel();
    const double norm = l2_norm(v.data().data(), n);
    if (norm <= 1e-8) throw DegenerateInputError("l2_normalize: near-zero norm");
    Tensor y = Tensor::zeros(v.shape());
    const float* vp = v.data().data();
    float* yp = y.data_mut().data();
    const double inv = 1.0 / norm;
    for (int i = 0; i < n; ++i) yp[i] = static_cast<float>(vp[i] * inv);
    if (v.requires_grad()) {
        y.set_requires_grad(true);
        auto vi = v.impl(), yi = y.impl();
        tape.record("l2_normalize", {vi, yi}, [vi, yi, n, inv] {
            if (yi->grad.empty()) return;
            vi->ensure_grad();
            double dot = 0.0;
            for (int i = 0; i < n; ++i) dot += static_cast<double>(yi->grad[i]) * yi->data[i];
            for (int i = 0; i < n; ++i)
                vi->grad[i] += static_cast<float>((yi->grad[i] - dot * yi->data[i]) * inv);
        });
    }
    return y;
}

Tensor l2_normalize_rows(Tape& tape, const Tensor& m) {
    if (m.ndim() != 2) throw DimensionError("l2_normalize_rows: expected [n,d]");
    const int rows = m.dim(0), d = m.dim(1);
    Tensor y = Tensor::zeros(m.shape());
    std::vector<double> inv(static_cast<size_t>(rows));
    const float* mp = m.data().data();
    float* yp = y.data_mut().data();
    for (int r = 0; r < rows; ++r) {
        const double norm = l2_norm(mp + static_cast<size_t>(r) * d, d);
        if (norm <= 1e-8) throw DegenerateInputError("l2_normalize_rows: near-zero row");
        inv[static_cast<size_t>(r)] = 1.0 / norm;
        for (int i = 0; i < d; ++i)
            yp[r * d + i] = static_cast<float>(mp[r * d + i] * inv[static_cast<size_t>(r)]);
    }
    if (m.requires_grad()) {
        y.set_requires_grad(true);
        auto mi = m.impl(), yi = y.impl();
        tape.record("l2_normalize_rows", {mi, yi}, [mi, yi, rows, d, inv = std::move(inv)] {
            if (yi->grad.empty()) return;
            mi->ensure_grad();
            for (int r = 0; r < rows; ++r) {
                const float* gy = yi->grad.data() + static_cast<size_t>(r) * d;
                const float* yr = yi->data.data() + static_cast<size_t>(r) * d;
                float* gm = mi->grad.data() + static_cast<size_t>(r) * d;
                double dot = 0.0;
                for (int i = 0; i < d; ++i) dot += static_cast<double>(gy[i]) * yr[i];
                for (int i = 0; i < d; ++i)
                    gm[i] += static_cast<float>((gy[i] - dot * yr[i]) * inv[static_cast<size_t>(r)]);
            }
        });
    }
    return y;
}

Tensor cosine(Tape& tape, const Tensor& u, const Tensor& v) {
    require_same_shape(u, v, "cosine");
    const int n = u.numel();
    const double nu = l2_norm(u.data().data(), n);
    const double nv = l2_norm(v.data().data(), n);
    if (nu <= 1e-8 || nv <= 1e-8) throw DegenerateInputError("cosine: zero vector");
    double dot = 0.0;
    const float* up = u.data().data();
    const float* vp = v.data().data();
    for (int i = 0; i < n; ++i) dot += static_cast<double>(up[i]) * vp[i];
    const double c = std::clamp(dot / (nu * nv), -1.0, 1.0);
    Tensor out = Tensor::scalar(static_cast<float>(c));
    if (any_grad(u, v)) {
        out.set_requires_grad(true);
        auto ui = u.impl(), vi = v.impl(), oi = out.impl();
        tape.record("cosine", {ui, vi, oi}, [ui, vi, oi, n, nu, nv, c] {
            if (oi->grad.empty()) return;
            const double g = oi->grad[0];
            if (ui->requires_grad) {
                ui->ensure_grad();
                for (int i = 0; i < n; ++i) {
                    const double uh = ui->data[i] / nu;
                    const double vh = vi->data[i] / nv;
                    ui->grad[i] += static_cast<float>(g * (vh - c * uh) / nu);
                }
            }
            if (vi->requires_grad) {
                vi->ensure_grad();
                for (int i = 0; i < n; ++i) {
                    const double uh = ui->data[i] / nu;
                    const double vh = vi->data[i] / nv;
                    vi->grad[i] += static_cast<float>(g * (uh - c * vh) / nv);
                }
            }
        });
    }
    return out;
}

Tensor frobenius_distance(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "frobenius_distance");
    const int n = a.numel();
    const float* ap = a.data().data();
    const float* bp = b.data().data();
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        const double d = static_cast<double>(ap[i]) - bp[i];
        acc += d * d;
    }
    const double f = std::sqrt(acc);
    Tensor out = Tensor::scalar(static_cast<float>(f));
    if (any_grad(a, b)) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape.record("frobenius_distance", {ai, bi, oi}, [ai, bi, oi, n, f] {
            if (oi->grad.empty() || f == 0.0) return; // subgradient 0 at a == b
            const double g = oi->grad[0] / f;
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (int i = 0; i < n; ++i)
                    ai->grad[i] += static_cast<float>(g * (static_cast<double>(ai->data[i]) - bi->data[i]));
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (int i = 0; i < n; ++i)
                    bi->grad[i] -= static_cast<float>(g * (static_cast<double>(ai->data[i]) - bi->data[i]));
            }
        });
    }
    return out;
}

Tensor upsample2x(Tape& tape, const Tensor& t) {
    if (t.ndim() != 3) throw DimensionError("upsample2x: expected [c,h,w]");
    const int c = t.dim(0), h = t.dim(1), w = t.dim(2);
    Tensor y = Tensor::zeros({c, 2 * h, 2 * w});
    const float* tp = t.data().data();
    float* yp = y.data_mut().data();
    for (int ch = 0; ch < c; ++ch)
        for (int oy = 0; oy < 2 * h; ++oy)
            for (int ox = 0; ox < 2 * w; ++ox)
                yp[(ch * 2 * h + oy) * 2 * w + ox] = tp[(ch * h + oy / 2) * w + ox / 2];
    if (t.requires_grad()) {
        y.set_requires_grad(true);
        auto ti = t.impl(), yi = y.impl();
        tape.record("upsample2x", {ti, yi}, [ti, yi, c, h, w] {
            if (yi->grad.empty()) return;
            ti->ensure_grad();
            for (int ch = 0; ch < c; ++ch)
                for (int oy = 0; oy < 2 * h; ++oy)
                    for (int ox = 0; ox < 2 * w; ++ox)
                        ti->grad[(ch * h + oy / 2) * w + ox / 2] +=
                            yi->grad[(ch * 2 * h + oy) * 2 * w + ox];
        });
    }
    return y;
}

Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.ndim() != 3 || b.ndim() != 3 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
        throw DimensionError("concat_channels: spatial dims must match");
    const int ca = a.dim(0), cb = b.dim(0), h = a.dim(1), w = a.dim(2);
    Tensor y = Tensor::zeros({ca + cb, h, w});
    const size_t na = static_cast<size_t>(ca) * h * w;
    const size_t nb = static_cast<size_t>(cb) * h * w;
    std::memcpy(y.data_mut().data(), a.data().data(), na * sizeof(float));
    std::memcpy(y.data_mut().data() + na, b.data().data(), nb * sizeof(float));
    if (any_grad(a, b)) {
        y.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), yi = y.impl();
        tape.record("concat_channels", {ai, bi, yi}, [ai, bi, yi, na, nb] {
            if (yi->grad.empty()) return;
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (size_t i = 0; i < na; ++i) ai->grad[i] += yi->grad[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (size_t i = 0; i < nb; ++i) bi->grad[i] += yi->grad[na + i];
            }
        });
    }
    return y;
}

Tensor broadcast_spatial(Tape& tape, const Tensor& v, int h, int w) {
    if (v.ndim() != 1) throw DimensionError("broadcast_spatial: expected [z]");
    const int z = v.dim(0);
    Tensor y = Tensor::zeros({z, h, w});
    float* yp = y.data_mut().data();
    for (int ch = 0; ch < z; ++ch)
        std::fill(yp + static_cast<size_t>(ch) * h * w, yp + static_cast<size_t>(ch + 1) * h * w,
                  v.data()[ch]);
    if (v.requires_grad()) {
        y.set_requires_grad(true);
        auto vi = v.impl(), yi = y.impl();
        tape.record("broadcast_spatial", {vi, yi}, [vi, yi, z, h, w] {
            if (yi->grad.empty()) return;
            vi->ensure_grad();
            const int plane = h * w;
            for (int ch = 0; ch < z; ++ch) {
                double acc = 0.0;
                const float* g = yi->grad.data() + static_cast<size_t>(ch) * plane;
                for (int i = 0; i < plane; ++i) acc += g[i];
                vi->grad[ch] += static_cast<float>(acc);
            }
        });
    }
    return y;
}

Tensor reshape(Tape& tape, const Tensor& t, std::vector<int> new_shape) {
    size_t n = 1;
    for (int d : new_shape) n *= static_cast<size_t>(d);
    if (n != static_cast<size_t>(t.numel())) throw DimensionError("reshape: element count mismatch");
    Tensor y = Tensor::zeros(std::move(new_shape));
    std::memcpy(y.data_mut().data(), t.data().data(), n * sizeof(float));
    if (t.requires_grad()) {
        y.set_requires_grad(true);
        auto ti = t.impl(), yi = y.impl();
        tape.record("reshape", {ti, yi}, [ti, yi, n] {
            if (yi->grad.empty()) return;
            ti->ensure_grad();
            for (size_t i = 0; i < n; ++i) ti->grad[i] += yi->grad[i];
        });
    }
    return y;
}

Tensor reorder(Tape& tape, const Tensor& t, std::vector<int> new_shape, std::vector<int> index_map) {
    size_t n = 1;
    for (int d : new_shape) n *= static_cast<size_t>(d);
    if (n != index_map.size()) throw DimensionError("reorder: index map length mismatch");
    Tensor y = Tensor::zeros(std::move(new_shape));
    const float* tp = t.data().data();
    float* yp = y.data_mut().data();
    for (size_t i = 0; i < n; ++i) yp[i] = tp[index_map[i]];
    if (t.requires_grad()) {
        y.set_requires_grad(true);
        auto ti = t.impl(), yi = y.impl();
        tape.record("reorder", {ti, yi}, [ti, yi, n, idx = std::move(index_map)] {
            if (yi->grad.empty()) return;
            ti->ensure_grad();
            for (size_t i = 0; i < n; ++i) ti->grad[static_cast<size_t>(idx[i])] += yi->grad[i];
        });
    }
    return y;
}

Tensor crop_resize(Tape& tape, const Tensor& img, double y0, double x0, double sh, double sw,
                   int oh, int ow, bool hflip) {
    if (img.ndim() != 3) throw DimensionError("crop_resize: expected [c,h,w]");
    const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    if (h < 2 || w < 2) throw DimensionError("crop_resize: image too small");
    Tensor out = Tensor::zeros({c, oh, ow});

    // Per output pixel: 4 source corners + bilinear weights, shared by channels.
    struct Samp {
        int iy0, ix0;
        float wy, wx;
    };
    std::vector<Samp> samp(static_cast<size_t>(oh) * ow);
    for (int oy = 0; oy < oh; ++oy) {
        const double sy = y0 + (oy + 0.5) * sh / oh - 0.5;
        for (int ox = 0; ox < ow; ++ox) {
            const int tx = hflip ? (ow - 1 - ox) : ox;
            const double sx = x0 + (tx + 0.5) * sw / ow - 0.5;
            double fy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
            double fx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
            int iy0 = std::min(static_cast<int>(fy), h - 2 >= 0 ? h - 2 : 0);
            int ix0 = std::min(static_cast<int>(fx), w - 2 >= 0 ? w - 2 : 0);
            samp[static_cast<size_t>(oy) * ow + ox] =
                Samp{iy0, ix0, static_cast<float>(fy - iy0), static_cast<float>(fx - ix0)};
        }
    }
    const float* ip = img.data().data();
    float* op = out.data_mut().data();
    for (int ch = 0; ch < c; ++ch) {
        const float* plane = ip + static_cast<size_t>(ch) * h * w;
        float* oplane = op + static_cast<size_t>(ch) * oh * ow;
        for (int i = 0; i < oh * ow; ++i) {
            const Samp& s = samp[static_cast<size_t>(i)];
            const float v00 = plane[s.iy0 * w + s.ix0];
            const float v01 = plane[s.iy0 * w + s.ix0 + 1];
            const float v10 = plane[(s.iy0 + 1) * w + s.ix0];
            const float v11 = plane[(s.iy0 + 1) * w + s.ix0 + 1];
            oplane[i] = (1 - s.wy) * ((1 - s.wx) * v00 + s.wx * v01) +
                        s.wy * ((1 - s.wx) * v10 + s.wx * v11);
        }
    }
    if (img.requires_grad()) {
        out.set_requires_grad(true);
        auto ii = img.impl(), oi = out.impl();
        tape.record("crop_resize", {ii, oi}, [ii, oi, c, h, w, oh, ow, samp = std::move(samp)] {
            if (oi->grad.empty()) return;
            ii->ensure_grad();
            for (int ch = 0; ch < c; ++ch) {
                float* gplane = ii->grad.data() + static_cast<size_t>(ch) * h * w;
                const float* goplane = oi->grad.data() + static_cast<size_t>(ch) * oh * ow;
                for (int i = 0; i < oh * ow; ++i) {
                    const Samp& s = samp[static_cast<size_t>(i)];
                    const float g = goplane[i];
                    gplane[s.iy0 * w + s.ix0] += g * (1 - s.wy) * (1 - s.wx);
                    gplane[s.iy0 * w + s.ix0 + 1] += g * (1 - s.wy) * s.wx;
                    gplane[(s.iy0 + 1) * w + s.ix0] += g * s.wy * (1 - s.wx);
                    gplane[(s.iy0 + 1) * w + s.ix0 + 1] += g * s.wy * s.wx;
                }
            }
        });
    }
    return out;
}

Tensor mean_scalars(Tape& tape, const std::vector<Tensor>& terms) {
    if (terms.empty()) throw UsageError("mean_scalars: empty input");
    double acc = 0.0;
    bool need_grad = false;
    for (const auto& t : terms) {
        if (t.numel() != 1) throw DimensionError("mean_scalars: all terms must be scalar");
        acc += t.item();
        need_grad = need_grad || t.requires_grad();
    }
    const double inv = 1.0 / static_cast<double>(terms.size());
    Tensor out = Tensor::scalar(static_cast<float>(acc * inv));
    if (need_grad) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<TensorImpl>> impls;
        impls.reserve(terms.size() + 1);
        for (const auto& t : terms) impls.push_back(t.impl());
        auto oi = out.impl();
        impls.push_back(oi);
        const float w = static_cast<float>(inv);
        std::vector<std::shared_ptr<TensorImpl>> inputs(impls.begin(), impls.end() - 1);
        tape.record("mean_scalars", std::move(impls), [inputs = std::move(inputs), oi, w] {
            if (oi->grad.empty()) return;
            for (const auto& ti : inputs) {
                if (!ti->requires_grad) continue;
                ti->ensure_grad();
                ti->grad[0] += w * oi->grad[0];
            }
        });
    }
    return out;
}

} // namespace avstyle
