#pragma once

#include <cmath>

#include "metalora/tensor.hpp"

namespace metalora {

// ---- matmul ----

namespace detail {

// c[m x n] += a[m x k] * b[k x n], row-major, ikj order.
template <typename T>
void matmul_accum(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* ar = a + static_cast<size_t>(i) * k;
        T* cr = c + static_cast<size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const T av = ar[kk];
            const T* br = b + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

// c[m x n] += a[m x k] * b^T where b is [n x k].
template <typename T>
void matmul_nt_accum(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* ar = a + static_cast<size_t>(i) * k;
        for (int j = 0; j < n; ++j) {
            const T* br = b + static_cast<size_t>(j) * k;
            T acc = T(0);
            for (int kk = 0; kk < k; ++kk) acc += ar[kk] * br[kk];
            c[static_cast<size_t>(i) * n + j] += acc;
        }
    }
}

// c[m x n] += a^T * b where a is [k x m], b is [k x n].
template <typename T>
void matmul_tn_accum(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int kk = 0; kk < k; ++kk) {
        const T* ar = a + static_cast<size_t>(kk) * m;
        const T* br = b + static_cast<size_t>(kk) * n;
        for (int i = 0; i < m; ++i) {
            const T av = ar[i];
            T* cr = c + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

} // namespace detail

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw dimension_error("matmul: expected 2-d tensors, got " + shape_str(a.shape()) +
                              " and " + shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw dimension_error("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                              " vs " + shape_str(b.shape()));
    auto out = detail::make_op<T>(Shape{m, n}, {a.node(), b.node()}, [m, k, n](NodeT<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            // dA = dC * B^T
            detail::matmul_nt_accum(self.grad.data(), pb.data.data(), pa.grad.data(), m, n, k);
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            // dB = A^T * dC
            detail::matmul_tn_accum(pa.data.data(), self.grad.data(), pb.grad.data(), k, m, n);
        }
    });
    detail::matmul_accum(a.data().data(), b.data().data(), out.data().data(), m, k, n);
    return out;
}

// Broadcast-add a length-n vector to each row of an [m x n] matrix.
template <typename T>
TensorT<T> add_rowvec(const TensorT<T>& a, const TensorT<T>& v) {
    if (a.ndim() != 2 || v.ndim() != 1 || v.dim(0) != a.dim(1))
        throw dimension_error("add_rowvec: " + shape_str(a.shape()) + " vs " + shape_str(v.shape()));
    const int m = a.dim(0), n = a.dim(1);
    auto out = detail::make_op<T>(a.shape(), {a.node(), v.node()}, [m, n](NodeT<T>& self) {
        auto& pa = *self.parents[0];
        auto& pv = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
        }
        if (pv.requires_grad) {
            pv.ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) pv.grad[j] += self.grad[static_cast<size_t>(i) * n + j];
        }
    });
    const auto& ad = a.data();
    const auto& vd = v.data();
    auto& od = out.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) od[static_cast<size_t>(i) * n + j] = ad[static_cast<size_t>(i) * n + j] + vd[j];
    return out;
}

template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
    return add_rowvec(matmul(x, w), b);
}

// ---- softmax ----

// Numerically stable softmax along `axis`; rows sum to 1.
template <typename T>
TensorT<T> softmax(const TensorT<T>& x, int axis) {
    if (axis < 0) axis += x.ndim();
    if (axis < 0 || axis >= std::max(x.ndim(), 1))
        throw dimension_error("softmax: axis out of range");
    const auto& shp = x.shape();
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shp[i];
    for (int i = axis + 1; i < x.ndim(); ++i) inner *= shp[i];
    const int64_t n = x.ndim() ? shp[axis] : 1;

    auto out = detail::make_op<T>(shp, {x.node()}, [outer, inner, n](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        // dx = y * (dy - sum(dy * y))
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = o * n * inner + in;
                T dot = T(0);
                for (int64_t i = 0; i < n; ++i) {
                    const int64_t idx = base + i * inner;
                    dot += self.grad[idx] * self.data[idx];
                }
                for (int64_t i = 0; i < n; ++i) {
                    const int64_t idx = base + i * inner;
                    p.grad[idx] += self.data[idx] * (self.grad[idx] - dot);
                }
            }
    });
    const auto& xd = x.data();
    auto& od = out.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * n * inner + in;
            T mx = xd[base];
            for (int64_t i = 1; i < n; ++i) mx = std::max(mx, xd[base + i * inner]);
            T denom = T(0);
            for (int64_t i = 0; i < n; ++i) {
                const T e = std::exp(xd[base + i * inner] - mx);
                od[base + i * inner] = e;
                denom += e;
            }
            const T inv = T(1) / denom;
            for (int64_t i = 0; i < n; ++i) od[base + i * inner] *= inv;
        }
    return out;
}

// ---- layernorm ----

// Normalizes along the last axis, then applies the affine pair.
template <typename T>
TensorT<T> layernorm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                     T eps = static_cast<T>(1e-5)) {
    if (x.ndim() < 1) throw dimension_error("layernorm: scalar input");
    const int n = x.shape().back();
    if (gamma.numel() != n || beta.numel() != n)
        throw dimension_error("layernorm: affine size mismatch");
    const int64_t rows = x.numel() / n;

    // Cache the normalized values for backward.
    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    auto rstd = std::make_shared<std::vector<T>>(rows);

    auto out = detail::make_op<T>(x.shape(), {x.node(), gamma.node(), beta.node()},
                                  [n, rows, xhat, rstd](NodeT<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto& g = pg.data;
        for (int64_t r = 0; r < rows; ++r) {
            const int64_t base = r * n;
            if (pg.requires_grad) {
                pg.ensure_grad();
                for (int j = 0; j < n; ++j)
                    pg.grad[j] += self.grad[base + j] * (*xhat)[base + j];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (int j = 0; j < n; ++j) pb.grad[j] += self.grad[base + j];
            }
            if (px.requires_grad) {
                px.ensure_grad();
                T sum_dy = T(0), sum_dyx = T(0);
                for (int j = 0; j < n; ++j) {
                    const T dyh = self.grad[base + j] * g[j];
                    sum_dy += dyh;
                    sum_dyx += dyh * (*xhat)[base + j];
                }
                const T invn = T(1) / static_cast<T>(n);
                for (int j = 0; j < n; ++j) {
                    const T dyh = self.grad[base + j] * g[j];
                    px.grad[base + j] += (*rstd)[r] *
                        (dyh - sum_dy * invn - (*xhat)[base + j] * sum_dyx * invn);
                }
            }
        }
    });
    const auto& xd = x.data();
    const auto& gd = gamma.data();
    const auto& bd = beta.data();
    auto& od = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const int64_t base = r * n;
        T m = T(0);
        for (int j = 0; j < n; ++j) m += xd[base + j];
        m /= static_cast<T>(n);
        T var = T(0);
        for (int j = 0; j < n; ++j) {
            const T d = xd[base + j] - m;
            var += d * d;
        }
        var /= static_cast<T>(n);
        const T rs = T(1) / std::sqrt(var + eps);
        (*rstd)[r] = rs;
        for (int j = 0; j < n; ++j) {
            const T xh = (xd[base + j] - m) * rs;
            (*xhat)[base + j] = xh;
            od[base + j] = xh * gd[j] + bd[j];
        }
    }
    return out;
}

// ---- gelu (erf form) ----

template <typename T>
TensorT<T> gelu(const TensorT<T>& x) {
    auto out = detail::make_op<T>(x.shape(), {x.node()}, [](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        constexpr T inv_sqrt2 = static_cast<T>(0.70710678118654752440);
        constexpr T inv_sqrt2pi = static_cast<T>(0.39894228040143267794);
        for (size_t i = 0; i < self.grad.size(); ++i) {
            const T v = p.data[i];
            const T cdf = static_cast<T>(0.5) * (T(1) + std::erf(v * inv_sqrt2));
            const T pdf = inv_sqrt2pi * std::exp(static_cast<T>(-0.5) * v * v);
            p.grad[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
    constexpr T inv_sqrt2 = static_cast<T>(0.70710678118654752440);
    const auto& xd = x.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i)
        od[i] = xd[i] * static_cast<T>(0.5) * (T(1) + std::erf(xd[i] * inv_sqrt2));
    return out;
}

// ---- losses ----

// Mean over the batch of -log softmax(logits)[target].
template <typename T>
TensorT<T> cross_entropy(const TensorT<T>& logits, const std::vector<int>& targets) {
    if (logits.ndim() != 2) throw dimension_error("cross_entropy: expected [B x C] logits");
    const int b = logits.dim(0), c = logits.dim(1);
    if (c < 2) throw dimension_error("cross_entropy: need at least 2 classes");
    if (static_cast<int>(targets.size()) != b)
        throw dimension_error("cross_entropy: target count mismatch");
    for (int t : targets)
        if (t < 0 || t >= c)
            throw index_error("cross_entropy: target " + std::to_string(t) + " out of range");

    auto probs = std::make_shared<std::vector<T>>(logits.numel());
    auto out = detail::make_op<T>(Shape{}, {logits.node()}, [b, c, targets, probs](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T g = self.grad[0] / static_cast<T>(b);
        for (int i = 0; i < b; ++i)
            for (int j = 0; j < c; ++j) {
                T v = (*probs)[static_cast<size_t>(i) * c + j];
                if (j == targets[i]) v -= T(1);
                p.grad[static_cast<size_t>(i) * c + j] += g * v;
            }
    });
    const auto& ld = logits.data();
    T loss = T(0);
    for (int i = 0; i < b; ++i) {
        const T* row = &ld[static_cast<size_t>(i) * c];
        T mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        T denom = T(0);
        for (int j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
        const T lse = std::log(denom) + mx;
        for (int j = 0; j < c; ++j)
            (*probs)[static_cast<size_t>(i) * c + j] = std::exp(row[j] - lse);
        loss += lse - row[targets[i]];
    }
    out.data()[0] = loss / static_cast<T>(b);
    return out;
}

// Mean over the batch of sum_c teacher * log(teacher / student). The teacher
// is the target distribution: no gradient flows into it. Probabilities are
// clamped to [1e-12, 1] inside the logs.
template <typename T>
TensorT<T> kl_divergence(const TensorT<T>& student_probs, const TensorT<T>& teacher_probs) {
    detail::check_same_shape(student_probs, teacher_probs, "kl_divergence");
    if (student_probs.ndim() != 2) throw dimension_error("kl_divergence: expected [B x C]");
    const int b = student_probs.dim(0), c = student_probs.dim(1);
    const T tol = static_cast<T>(1e-6);
    for (int i = 0; i < b; ++i) {
        T ss = T(0), ts = T(0);
        for (int j = 0; j < c; ++j) {
            ss += student_probs.data()[static_cast<size_t>(i) * c + j];
            ts += teacher_probs.data()[static_cast<size_t>(i) * c + j];
        }
        if (std::abs(ss - T(1)) > tol)
            throw validation_error("kl_divergence: student row " + std::to_string(i) +
                                   " not normalized");
        if (std::abs(ts - T(1)) > tol)
            throw validation_error("kl_divergence: teacher row " + std::to_string(i) +
                                   " not normalized");
    }
    const auto teacher = teacher_probs.detach();
    constexpr double lo = 1e-12;
    auto out = detail::make_op<T>(Shape{}, {student_probs.node(), teacher.node()},
                                  [b, c](NodeT<T>& self) {
        auto& ps = *self.parents[0];
        auto& pt = *self.parents[1];
        if (!ps.requires_grad) return;
        ps.ensure_grad();
        const T g = self.grad[0] / static_cast<T>(b);
        for (size_t i = 0; i < ps.grad.size(); ++i) {
            const double s = static_cast<double>(ps.data[i]);
            if (s < lo || s > 1.0) continue; // clamped region: zero slope
            ps.grad[i] += g * static_cast<T>(-static_cast<double>(pt.data[i]) / s);
        }
    });
    const auto& sd = student_probs.data();
    const auto& td = teacher.data();
    double acc = 0;
    for (size_t i = 0; i < sd.size(); ++i) {
        const double t = static_cast<double>(td[i]);
        if (t <= 0) continue;
        const double s = std::clamp(static_cast<double>(sd[i]), lo, 1.0);
        const double tc = std::clamp(t, lo, 1.0);
        acc += t * (std::log(tc) - std::log(s));
    }
    out.data()[0] = static_cast<T>(acc / b);
    return out;
}

// ---- conv2d (valid padding) ----

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias, int stride) {
    if (x.ndim() != 4 || w.ndim() != 4)
        throw dimension_error("conv2d: expected x[B,C,H,W], w[O,C,kh,kw]");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != C) throw dimension_error("conv2d: channel mismatch");
    if (bias.numel() != O) throw dimension_error("conv2d: bias size mismatch");
    if (stride < 1 || kh > H || kw > W) throw dimension_error("conv2d: kernel exceeds input");
    const int Ho = (H - kh) / stride + 1;
    const int Wo = (W - kw) / stride + 1;

    auto out = detail::make_op<T>(Shape{B, O, Ho, Wo}, {x.node(), w.node(), bias.node()},
                                  [=](NodeT<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        if (px.requires_grad) px.ensure_grad();
        if (pw.requires_grad) pw.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (int bi = 0; bi < B; ++bi)
            for (int o = 0; o < O; ++o)
                for (int oy = 0; oy < Ho; ++oy)
                    for (int ox = 0; ox < Wo; ++ox) {
                        const T g = self.grad[((static_cast<size_t>(bi) * O + o) * Ho + oy) * Wo + ox];
                        if (pb.requires_grad) pb.grad[o] += g;
                        for (int ci = 0; ci < C; ++ci)
                            for (int ky = 0; ky < kh; ++ky)
                                for (int kx = 0; kx < kw; ++kx) {
                                    const size_t xi = ((static_cast<size_t>(bi) * C + ci) * H +
                                                       oy * stride + ky) * W + ox * stride + kx;
                                    const size_t wi = ((static_cast<size_t>(o) * C + ci) * kh + ky) * kw + kx;
                                    if (px.requires_grad) px.grad[xi] += g * pw.data[wi];
                                    if (pw.requires_grad) pw.grad[wi] += g * px.data[xi];
                                }
                    }
    });
    const auto& xd = x.data();
    const auto& wd = w.data();
    const auto& bd = bias.data();
    auto& od = out.data();
    for (int bi = 0; bi < B; ++bi)
        for (int o = 0; o < O; ++o)
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    T acc = bd[o];
                    for (int ci = 0; ci < C; ++ci)
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kx = 0; kx < kw; ++kx)
                                acc += xd[((static_cast<size_t>(bi) * C + ci) * H + oy * stride + ky) * W +
                                          ox * stride + kx] *
                                       wd[((static_cast<size_t>(o) * C + ci) * kh + ky) * kw + kx];
                    od[((static_cast<size_t>(bi) * O + o) * Ho + oy) * Wo + ox] = acc;
                }
    return out;
}

// ---- per-channel batch statistics over (B, H, W) ----

template <typename T>
TensorT<T> channel_mean(const TensorT<T>& x) {
    if (x.ndim() != 4) throw dimension_error("channel_mean: expected [B,C,H,W]");
    const int B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    const int64_t count = static_cast<int64_t>(B) * HW;
    auto out = detail::make_op<T>(Shape{C}, {x.node()}, [B, C, HW, count](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T inv = T(1) / static_cast<T>(count);
        for (int bi = 0; bi < B; ++bi)
            for (int ci = 0; ci < C; ++ci) {
                const T g = self.grad[ci] * inv;
                T* gp = &p.grad[(static_cast<size_t>(bi) * C + ci) * HW];
                for (int i = 0; i < HW; ++i) gp[i] += g;
            }
    });
    const auto& xd = x.data();
    auto& od = out.data();
    for (int ci = 0; ci < C; ++ci) {
        T acc = T(0);
        for (int bi = 0; bi < B; ++bi) {
            const T* xp = &xd[(static_cast<size_t>(bi) * C + ci) * HW];
            for (int i = 0; i < HW; ++i) acc += xp[i];
        }
        od[ci] = acc / static_cast<T>(count);
    }
    return out;
}

// Population standard deviation per channel, sqrt(var + eps).
template <typename T>
TensorT<T> channel_std(const TensorT<T>& x, T eps = static_cast<T>(1e-12)) {
    if (x.ndim() != 4) throw dimension_error("channel_std: expected [B,C,H,W]");
    const int B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    const int64_t count = static_cast<int64_t>(B) * HW;
    auto mu = std::make_shared<std::vector<T>>(C);
    auto out = detail::make_op<T>(Shape{C}, {x.node()}, [B, C, HW, count, mu](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T inv = T(1) / static_cast<T>(count);
        for (int ci = 0; ci < C; ++ci) {
            const T sd = std::max(self.data[ci], static_cast<T>(1e-12));
            const T g = self.grad[ci] * inv / sd;
            for (int bi = 0; bi < B; ++bi) {
                const size_t base = (static_cast<size_t>(bi) * C + ci) * HW;
                for (int i = 0; i < HW; ++i)
                    p.grad[base + i] += g * (p.data[base + i] - (*mu)[ci]);
            }
        }
    });
    const auto& xd = x.data();
    auto& od = out.data();
    for (int ci = 0; ci < C; ++ci) {
        T acc = T(0);
        for (int bi = 0; bi < B; ++bi) {
            const T* xp = &xd[(static_cast<size_t>(bi) * C + ci) * HW];
            for (int i = 0; i < HW; ++i) acc += xp[i];
        }
        const T m = acc / static_cast<T>(count);
        (*mu)[ci] = m;
        T var = T(0);
        for (int bi = 0; bi < B; ++bi) {
            const T* xp = &xd[(static_cast<size_t>(bi) * C + ci) * HW];
            for (int i = 0; i < HW; ++i) {
                const T d = xp[i] - m;
                var += d * d;
            }
        }
        od[ci] = std::sqrt(var / static_cast<T>(count) + eps);
    }
    return out;
}

// ---- prototype logits ----

// logits_i = -|| e - centers_i ||_2. Gradient flows into both the embedding
// and the centers, so the inner prototypical loop stays differentiable.
template <typename T>
TensorT<T> neg_distance_logits(const TensorT<T>& e, const TensorT<T>& centers) {
    if (centers.ndim() != 2) throw dimension_error("neg_distance_logits: centers must be [N x D]");
    const int N = centers.dim(0), D = centers.dim(1);
    if (e.numel() != D)
        throw dimension_error("neg_distance_logits: embedding size " + std::to_string(e.numel()) +
                              " vs D=" + std::to_string(D));
    auto out = detail::make_op<T>(Shape{N}, {e.node(), centers.node()}, [N, D](NodeT<T>& self) {
        auto& pe = *self.parents[0];
        auto& pc = *self.parents[1];
        if (pe.requires_grad) pe.ensure_grad();
        if (pc.requires_grad) pc.ensure_grad();
        for (int i = 0; i < N; ++i) {
            const T dist = std::max(-self.data[i], static_cast<T>(1e-12));
            const T g = self.grad[i] / dist;
            const T* cp = &pc.data[static_cast<size_t>(i) * D];
            for (int j = 0; j < D; ++j) {
                const T diff = pe.data[j] - cp[j];
                if (pe.requires_grad) pe.grad[j] += -g * diff;
                if (pc.requires_grad) pc.grad[static_cast<size_t>(i) * D + j] += g * diff;
            }
        }
    });
    const auto& ed = e.data();
    const auto& cd = centers.data();
    auto& od = out.data();
    for (int i = 0; i < N; ++i) {
        T acc = T(0);
        const T* cp = &cd[static_cast<size_t>(i) * D];
        for (int j = 0; j < D; ++j) {
            const T d = ed[j] - cp[j];
            acc += d * d;
        }
        od[i] = -std::sqrt(acc);
    }
    return out;
}

// Squared-distance variant, kept behind a switch in the meta layer.
template <typename T>
TensorT<T> neg_sq_distance_logits(const TensorT<T>& e, const TensorT<T>& centers) {
    if (centers.ndim() != 2) throw dimension_error("neg_sq_distance_logits: centers must be [N x D]");
    const int N = centers.dim(0), D = centers.dim(1);
    if (e.numel() != D) throw dimension_error("neg_sq_distance_logits: embedding size mismatch");
    auto out = detail::make_op<T>(Shape{N}, {e.node(), centers.node()}, [N, D](NodeT<T>& self) {
        auto& pe = *self.parents[0];
        auto& pc = *self.parents[1];
        if (pe.requires_grad) pe.ensure_grad();
        if (pc.requires_grad) pc.ensure_grad();
        for (int i = 0; i < N; ++i) {
            const T g = self.grad[i];
            const T* cp = &pc.data[static_cast<size_t>(i) * D];
            for (int j = 0; j < D; ++j) {
                const T diff = pe.data[j] - cp[j];
                if (pe.requires_grad) pe.grad[j] += -T(2) * g * diff;
                if (pc.requires_grad) pc.grad[static_cast<size_t>(i) * D + j] += T(2) * g * diff;
            }
        }
    });
    const auto& ed = e.data();
    const auto& cd = centers.data();
    auto& od = out.data();
    for (int i = 0; i < N; ++i) {
        T acc = T(0);
        const T* cp = &cd[static_cast<size_t>(i) * D];
        for (int j = 0; j < D; ++j) {
            const T d = ed[j] - cp[j];
            acc += d * d;
        }
        od[i] = -acc;
    }
    return out;
}

// softmax(q_cls . K^T / sqrt(d)) -> attention vector over the sequence.
template <typename T>
TensorT<T> cls_attention(const TensorT<T>& q_cls, const TensorT<T>& keys, int d) {
    if (d <= 0) throw dimension_error("cls_attention: d must be positive");
    if (keys.ndim() != 2) throw dimension_error("cls_attention: keys must be [S x d]");
    auto q = reshape(q_cls, Shape{1, static_cast<int>(q_cls.numel())});
    if (q.dim(1) != keys.dim(1)) throw dimension_error("cls_attention: query/key width mismatch");
    auto logits = scale(matmul(q, transpose(keys)), static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
    auto attn = softmax(logits, 1);
    return reshape(attn, Shape{keys.dim(0)});
}

} // namespace metalora
