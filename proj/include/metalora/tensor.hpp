#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "metalora/errors.hpp"

namespace metalora {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// Define-by-run autograd is on by default; evaluation paths disable it with
// a NoGradGuard so forwards build no graph.
inline thread_local bool g_autograd_enabled = true;

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(g_autograd_enabled) { g_autograd_enabled = false; }
    ~NoGradGuard() { g_autograd_enabled = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
struct NodeT {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad; // allocated lazily by backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<NodeT<T>>> parents;
    std::function<void(NodeT<T>&)> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
};

// Dense row-major tensor handle. Copying a TensorT copies the handle, not
// the storage; clone() makes an independent leaf.
template <typename T>
class TensorT {
public:
    using value_type = T;

    TensorT() = default;
    explicit TensorT(std::shared_ptr<NodeT<T>> n) : n_(std::move(n)) {}

    static TensorT zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), T(0), requires_grad);
    }

    static TensorT full(Shape shape, T value, bool requires_grad = false) {
        auto n = std::make_shared<NodeT<T>>();
        n->shape = std::move(shape);
        n->data.assign(shape_numel(n->shape), value);
        n->requires_grad = requires_grad;
        return TensorT(std::move(n));
    }

    static TensorT scalar(T value, bool requires_grad = false) {
        return full(Shape{}, value, requires_grad);
    }

    static TensorT from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw dimension_error("from_data: shape " + shape_str(shape) + " does not match " +
                                  std::to_string(data.size()) + " values");
        auto n = std::make_shared<NodeT<T>>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        n->requires_grad = requires_grad;
        return TensorT(std::move(n));
    }

    static TensorT randn(Shape shape, std::mt19937& rng, T mean = T(0), T stddev = T(1),
                         bool requires_grad = false) {
        auto t = zeros(std::move(shape), requires_grad);
        std::normal_distribution<double> dist(static_cast<double>(mean),
                                              static_cast<double>(stddev));
        for (auto& v : t.data()) v = static_cast<T>(dist(rng));
        return t;
    }

    bool valid() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int dim(size_t i) const { return n_->shape.at(i); }
    int ndim() const { return static_cast<int>(n_->shape.size()); }
    int64_t numel() const { return n_->numel(); }

    std::vector<T>& data() { return n_->data; }
    const std::vector<T>& data() const { return n_->data; }
    bool requires_grad() const { return n_->requires_grad; }
    bool has_grad() const { return !n_->grad.empty(); }
    std::vector<T>& grad() { return n_->grad; }
    const std::vector<T>& grad() const { return n_->grad; }

    // Leaf-only; flipping requires_grad mid-graph would desync recorded ops.
    void set_requires_grad(bool rg) {
        if (n_->backward_fn)
            throw state_error("set_requires_grad: not a leaf tensor");
        n_->requires_grad = rg;
    }

    T item() const {
        if (numel() != 1) throw dimension_error("item: tensor is not a scalar");
        return n_->data[0];
    }

    T at(std::initializer_list<int> idx) const {
        int64_t off = 0;
        size_t k = 0;
        for (int i : idx) off = off * n_->shape[k] + i, ++k;
        return n_->data[static_cast<size_t>(off)];
    }

    // New leaf carrying a copy of the values, cut off from the graph.
    TensorT detach() const {
        auto n = std::make_shared<NodeT<T>>();
        n->shape = n_->shape;
        n->data = n_->data;
        n->requires_grad = false;
        return TensorT(std::move(n));
    }

    TensorT clone(bool requires_grad) const {
        auto t = detach();
        t.n_->requires_grad = requires_grad;
        return t;
    }

    void zero_grad() { n_->grad.clear(); }

    // Reverse-mode backward from a scalar. Topological order over the
    // recorded graph; every reachable requires_grad tensor ends up with a
    // populated grad.
    void backward() const {
        if (numel() != 1) throw state_error("backward: loss must be scalar");
        if (!n_->requires_grad)
            throw state_error("backward: loss does not require grad");

        std::vector<NodeT<T>*> order;
        std::unordered_set<NodeT<T>*> visited;
        struct Frame {
            NodeT<T>* node;
            size_t next_parent;
        };
        std::vector<Frame> stack;
        stack.push_back({n_.get(), 0});
        visited.insert(n_.get());
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next_parent < f.node->parents.size()) {
                NodeT<T>* p = f.node->parents[f.next_parent++].get();
                if (p->requires_grad && !visited.count(p)) {
                    visited.insert(p);
                    stack.push_back({p, 0});
                }
            } else {
                order.push_back(f.node);
                stack.pop_back();
            }
        }
        // Postorder lists producers first; run consumers first instead.
        n_->ensure_grad();
        n_->grad[0] = T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            NodeT<T>* node = *it;
            if (node->backward_fn) node->backward_fn(*node);
        }
    }

    std::shared_ptr<NodeT<T>>& node() { return n_; }
    const std::shared_ptr<NodeT<T>>& node() const { return n_; }

private:
    std::shared_ptr<NodeT<T>> n_;
};

namespace detail {

// Allocates the result node and records parents/backward only when grad
// tracking is on and some input needs it.
template <typename T>
TensorT<T> make_op(Shape shape, std::vector<std::shared_ptr<NodeT<T>>> parents,
                   std::function<void(NodeT<T>&)> backward_fn) {
    auto n = std::make_shared<NodeT<T>>();
    n->shape = std::move(shape);
    n->data.assign(shape_numel(n->shape), T(0));
    if (g_autograd_enabled) {
        bool rg = false;
        for (const auto& p : parents)
            if (p->requires_grad) { rg = true; break; }
        if (rg) {
            n->requires_grad = true;
            n->parents = std::move(parents);
            n->backward_fn = std::move(backward_fn);
        }
    }
    return TensorT<T>(std::move(n));
}

template <typename T>
void check_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw dimension_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                              " vs " + shape_str(b.shape()));
}

} // namespace detail

// ---- elementwise ----

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape(a, b, "add");
    auto out = detail::make_op<T>(a.shape(), {a.node(), b.node()}, [](NodeT<T>& self) {
        for (int k = 0; k < 2; ++k) {
            auto& p = *self.parents[k];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
        }
    });
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + bd[i];
    return out;
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape(a, b, "sub");
    auto out = detail::make_op<T>(a.shape(), {a.node(), b.node()}, [](NodeT<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
        }
    });
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] - bd[i];
    return out;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape(a, b, "mul");
    auto out = detail::make_op<T>(a.shape(), {a.node(), b.node()}, [](NodeT<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                pa.grad[i] += self.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                pb.grad[i] += self.grad[i] * pa.data[i];
        }
    });
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * bd[i];
    return out;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T c) {
    auto out = detail::make_op<T>(a.shape(), {a.node()}, [c](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += c * self.grad[i];
    });
    const auto& ad = a.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = c * ad[i];
    return out;
}

// ---- reductions ----

template <typename T>
TensorT<T> sum(const TensorT<T>& a) {
    auto out = detail::make_op<T>(Shape{}, {a.node()}, [](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        T g = self.grad[0];
        for (auto& v : p.grad) v += g;
    });
    T acc = T(0);
    for (T v : a.data()) acc += v;
    out.data()[0] = acc;
    return out;
}

template <typename T>
TensorT<T> mean(const TensorT<T>& a) {
    const T inv = T(1) / static_cast<T>(a.numel());
    return scale(sum(a), inv);
}

// log of values clamped to [1e-12, 1]; zero slope outside the clamp range.
template <typename T>
TensorT<T> log_clamped(const TensorT<T>& a) {
    constexpr double lo = 1e-12;
    auto out = detail::make_op<T>(a.shape(), {a.node()}, [](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            const double v = static_cast<double>(p.data[i]);
            if (v < lo || v > 1.0) continue;
            p.grad[i] += self.grad[i] / static_cast<T>(v);
        }
    });
    const auto& ad = a.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i)
        od[i] = static_cast<T>(std::log(std::clamp(static_cast<double>(ad[i]), lo, 1.0)));
    return out;
}

// sqrt(sum(x^2)); the gradient denominator is clamped away from zero.
template <typename T>
TensorT<T> l2norm(const TensorT<T>& a) {
    auto out = detail::make_op<T>(Shape{}, {a.node()}, [](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        T norm = std::max(self.data[0], static_cast<T>(1e-12));
        T g = self.grad[0] / norm;
        for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += g * p.data[i];
    });
    T acc = T(0);
    for (T v : a.data()) acc += v * v;
    out.data()[0] = std::sqrt(acc);
    return out;
}

// ---- shape ops ----

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw dimension_error("reshape: cannot view " + shape_str(a.shape()) + " as " +
                              shape_str(shape));
    auto out = detail::make_op<T>(std::move(shape), {a.node()}, [](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    });
    out.data() = a.data();
    return out;
}

template <typename T>
TensorT<T> transpose(const TensorT<T>& a) {
    if (a.ndim() != 2) throw dimension_error("transpose: expected 2-d tensor");
    const int m = a.dim(0), n = a.dim(1);
    auto out = detail::make_op<T>(Shape{n, m}, {a.node()}, [m, n](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) p.grad[j * n + i] += self.grad[i * m + j];
    });
    const auto& ad = a.data();
    auto& od = out.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) od[j * m + i] = ad[i * n + j];
    return out;
}

// Gather rows of a 2-d tensor; backward scatter-adds into the source rows.
template <typename T>
TensorT<T> take_rows(const TensorT<T>& a, std::vector<int> rows) {
    if (a.ndim() != 2) throw dimension_error("take_rows: expected 2-d tensor");
    const int m = a.dim(0), n = a.dim(1);
    for (int r : rows)
        if (r < 0 || r >= m) throw index_error("take_rows: row " + std::to_string(r));
    const int k = static_cast<int>(rows.size());
    auto out = detail::make_op<T>(Shape{k, n}, {a.node()}, [rows, n](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < rows.size(); ++i)
            for (int j = 0; j < n; ++j)
                p.grad[static_cast<size_t>(rows[i]) * n + j] += self.grad[i * n + j];
    });
    const auto& ad = a.data();
    auto& od = out.data();
    for (int i = 0; i < k; ++i)
        std::copy(ad.begin() + static_cast<size_t>(rows[i]) * n,
                  ad.begin() + static_cast<size_t>(rows[i]) * n + n, od.begin() + static_cast<size_t>(i) * n);
    return out;
}

template <typename T>
TensorT<T> slice_cols(const TensorT<T>& a, int start, int len) {
    if (a.ndim() != 2) throw dimension_error("slice_cols: expected 2-d tensor");
    const int m = a.dim(0), n = a.dim(1);
    if (start < 0 || len <= 0 || start + len > n)
        throw index_error("slice_cols: [" + std::to_string(start) + "," +
                          std::to_string(start + len) + ") out of " + std::to_string(n));
    auto out = detail::make_op<T>(Shape{m, len}, {a.node()}, [m, n, start, len](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < len; ++j)
                p.grad[static_cast<size_t>(i) * n + start + j] += self.grad[static_cast<size_t>(i) * len + j];
    });
    const auto& ad = a.data();
    auto& od = out.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < len; ++j) od[static_cast<size_t>(i) * len + j] = ad[static_cast<size_t>(i) * n + start + j];
    return out;
}

template <typename T>
TensorT<T> concat_rows(const std::vector<TensorT<T>>& parts) {
    if (parts.empty()) throw dimension_error("concat_rows: empty input");
    int n = -1, m = 0;
    std::vector<std::shared_ptr<NodeT<T>>> parents;
    std::vector<int> row_counts;
    for (const auto& p : parts) {
        if (p.ndim() != 2) throw dimension_error("concat_rows: expected 2-d tensors");
        if (n < 0) n = p.dim(1);
        else if (p.dim(1) != n) throw dimension_error("concat_rows: column mismatch");
        m += p.dim(0);
        row_counts.push_back(p.dim(0));
        parents.push_back(p.node());
    }
    auto out = detail::make_op<T>(Shape{m, n}, std::move(parents), [row_counts, n](NodeT<T>& self) {
        size_t off = 0;
        for (size_t k = 0; k < self.parents.size(); ++k) {
            auto& p = *self.parents[k];
            size_t cnt = static_cast<size_t>(row_counts[k]) * n;
            if (p.requires_grad) {
                p.ensure_grad();
                for (size_t i = 0; i < cnt; ++i) p.grad[i] += self.grad[off + i];
            }
            off += cnt;
        }
    });
    auto& od = out.data();
    size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), od.begin() + off);
        off += p.data().size();
    }
    return out;
}

template <typename T>
TensorT<T> concat_cols(const std::vector<TensorT<T>>& parts) {
    if (parts.empty()) throw dimension_error("concat_cols: empty input");
    const int m = parts[0].dim(0);
    int n = 0;
    std::vector<std::shared_ptr<NodeT<T>>> parents;
    std::vector<int> col_counts;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.dim(0) != m) throw dimension_error("concat_cols: row mismatch");
        n += p.dim(1);
        col_counts.push_back(p.dim(1));
        parents.push_back(p.node());
    }
    auto out = detail::make_op<T>(Shape{m, n}, std::move(parents), [col_counts, m, n](NodeT<T>& self) {
        int coff = 0;
        for (size_t k = 0; k < self.parents.size(); ++k) {
            auto& p = *self.parents[k];
            const int pc = col_counts[k];
            if (p.requires_grad) {
                p.ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < pc; ++j)
                        p.grad[static_cast<size_t>(i) * pc + j] += self.grad[static_cast<size_t>(i) * n + coff + j];
            }
            coff += pc;
        }
    });
    auto& od = out.data();
    int coff = 0;
    for (const auto& p : parts) {
        const int pc = p.dim(1);
        const auto& pd = p.data();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < pc; ++j) od[static_cast<size_t>(i) * n + coff + j] = pd[static_cast<size_t>(i) * pc + j];
        coff += pc;
    }
    return out;
}

// Gather arbitrary flat indices into a new shape; the index map is shared
// so callers can precompute it once (patch extraction reuses one map).
template <typename T>
TensorT<T> gather_flat(const TensorT<T>& a, std::shared_ptr<const std::vector<int64_t>> indices,
                       Shape out_shape) {
    if (shape_numel(out_shape) != static_cast<int64_t>(indices->size()))
        throw dimension_error("gather_flat: index count does not match output shape");
    const int64_t n = a.numel();
    for (int64_t idx : *indices)
        if (idx < 0 || idx >= n) throw index_error("gather_flat: index out of range");
    auto out = detail::make_op<T>(std::move(out_shape), {a.node()}, [indices](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < indices->size(); ++i)
            p.grad[static_cast<size_t>((*indices)[i])] += self.grad[i];
    });
    const auto& ad = a.data();
    auto& od = out.data();
    for (size_t i = 0; i < indices->size(); ++i) od[i] = ad[static_cast<size_t>((*indices)[i])];
    return out;
}

// Select index `i` along the outermost axis, dropping that axis.
template <typename T>
TensorT<T> select_outer(const TensorT<T>& a, int index) {
    if (a.ndim() < 1) throw dimension_error("select_outer: scalar input");
    const int b = a.dim(0);
    if (index < 0 || index >= b) throw index_error("select_outer: index " + std::to_string(index));
    Shape rest(a.shape().begin() + 1, a.shape().end());
    const int64_t block = shape_numel(rest);
    auto out = detail::make_op<T>(rest, {a.node()}, [index, block](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const size_t off = static_cast<size_t>(index) * block;
        for (int64_t i = 0; i < block; ++i) p.grad[off + i] += self.grad[i];
    });
    const auto& ad = a.data();
    std::copy(ad.begin() + static_cast<size_t>(index) * block,
              ad.begin() + static_cast<size_t>(index + 1) * block, out.data().begin());
    return out;
}

} // namespace metalora
