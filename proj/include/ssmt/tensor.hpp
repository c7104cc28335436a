#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

// Minimal dense-tensor engine with reverse-mode automatic differentiation.
// Values are stored as 64-bit floats. Every operation is a pure function of
// its inputs; the computation graph is recorded eagerly per forward pass and
// freed when backward() runs.

namespace ssmt {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? " x " : "") << s[i];
    os << "]";
    return os.str();
}

namespace detail {

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) {
        if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(s));
        n *= static_cast<size_t>(d);
    }
    return n;
}

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool& debug_checks_flag() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }
inline bool debug_checks_enabled() { return detail::debug_checks_flag(); }

// Disables graph recording in a scope (evaluation, decoding).
class NoGradGuard {
  public:
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

// NaN/Inf rejection at op boundaries: on in tests, off in training loops.
class DebugChecksGuard {
  public:
    explicit DebugChecksGuard(bool on) : prev_(detail::debug_checks_flag()) {
        detail::debug_checks_flag() = on;
    }
    ~DebugChecksGuard() { detail::debug_checks_flag() = prev_; }
    DebugChecksGuard(const DebugChecksGuard&) = delete;
    DebugChecksGuard& operator=(const DebugChecksGuard&) = delete;

  private:
    bool prev_;
};

struct TensorImpl;

// One recorded forward step: op id, input handles and the closure holding the
// saved activations needed to push gradients back to the inputs. Records form
// a DAG; backward() visits each exactly once and then drops it.
struct ComputationRecord {
    const char* op;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::function<void(TensorImpl&)> backward;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // allocated lazily, same length as data
    std::unique_ptr<ComputationRecord> record;

    std::vector<double>& grad_buffer() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

class Tensor {
  public:
    Tensor() = default;

    static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false) {
        const size_t n = detail::shape_numel(shape);
        if (n != values.size()) {
            throw std::invalid_argument("data length " + std::to_string(values.size()) +
                                        " does not match shape " + shape_str(shape));
        }
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl>();
        t.impl_->shape = std::move(shape);
        t.impl_->data = std::move(values);
        t.impl_->requires_grad = requires_grad;
        t.debug_check_finite("from_data");
        return t;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const size_t n = detail::shape_numel(shape);
        return from_data(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        const size_t n = detail::shape_numel(shape);
        return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from_data({1}, {value}, requires_grad);
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    size_t numel() const { return impl_->data.size(); }

    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }

    double value() const {
        if (numel() != 1) {
            throw std::invalid_argument("value() requires a one-element tensor, got shape " +
                                        shape_str(shape()));
        }
        return impl_->data[0];
    }

    double at(int i) const { return impl_->data[static_cast<size_t>(i)]; }
    double at(int i, int j) const {
        return impl_->data[static_cast<size_t>(i) * dim(1) + j];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    std::vector<double>& grad() { return impl_->grad; }
    const std::vector<double>& grad() const { return impl_->grad; }
    void zero_grad() { impl_->grad.clear(); }

    std::shared_ptr<TensorImpl> impl() const { return impl_; }

    // Reverse-mode pass from a scalar root. Gradients accumulate into every
    // requires_grad leaf reachable from the root; the recorded graph is freed
    // as it is consumed, so a graph can be walked only once.
    void backward() const {
        if (numel() != 1) {
            throw std::invalid_argument("backward() requires a scalar root, got shape " +
                                        shape_str(shape()));
        }
        // The walk holds shared ownership of every visited node: freeing a
        // record mid-pass drops the only references to interior nodes.
        std::vector<std::shared_ptr<TensorImpl>> order;
        std::unordered_set<TensorImpl*> visited;
        struct Frame {
            std::shared_ptr<TensorImpl> node;
            size_t next_child;
        };
        std::vector<Frame> stack;
        visited.insert(impl_.get());
        stack.push_back({impl_, 0});
        while (!stack.empty()) {
            Frame& f = stack.back();
            const size_t n_children = f.node->record ? f.node->record->inputs.size() : 0;
            if (f.next_child < n_children) {
                std::shared_ptr<TensorImpl> child = f.node->record->inputs[f.next_child++];
                if (visited.insert(child.get()).second) stack.push_back({std::move(child), 0});
            } else {
                order.push_back(std::move(f.node));
                stack.pop_back();
            }
        }
        impl_->grad_buffer()[0] += 1.0;
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            TensorImpl& node = **it;
            if (node.record) {
                node.record->backward(node);
                node.record.reset();
            }
        }
    }

    void attach_record(const char* op, std::vector<std::shared_ptr<TensorImpl>> inputs,
                       std::function<void(TensorImpl&)> backward) const {
        impl_->record = std::make_unique<ComputationRecord>(
            ComputationRecord{op, std::move(inputs), std::move(backward)});
    }

    void debug_check_finite(const char* op) const {
        if (!debug_checks_enabled()) return;
        for (double v : impl_->data) {
            if (!std::isfinite(v)) {
                throw std::runtime_error(std::string("non-finite value produced by ") + op);
            }
        }
    }

  private:
    std::shared_ptr<TensorImpl> impl_;
};

namespace detail {

inline Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                          std::initializer_list<Tensor> inputs,
                          std::function<void(TensorImpl&)> backward) {
    bool needs_grad = false;
    if (grad_enabled()) {
        for (const Tensor& t : inputs) needs_grad = needs_grad || t.requires_grad();
    }
    Tensor out = Tensor::from_data(std::move(shape), std::move(values), needs_grad);
    out.debug_check_finite(op);
    if (needs_grad) {
        std::vector<std::shared_ptr<TensorImpl>> parents;
        parents.reserve(inputs.size());
        for (const Tensor& t : inputs) parents.push_back(t.impl());
        out.attach_record(op, std::move(parents), std::move(backward));
    }
    return out;
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("add", a, b);
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    auto ai = a.impl(), bi = b.impl();
    return detail::make_result("add", a.shape(), std::move(out), {a, b}, [ai, bi](TensorImpl& o) {
        if (ai->requires_grad) {
            auto& g = ai->grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
        if (bi->requires_grad) {
            auto& g = bi->grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("sub", a, b);
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    auto ai = a.impl(), bi = b.impl();
    return detail::make_result("sub", a.shape(), std::move(out), {a, b}, [ai, bi](TensorImpl& o) {
        if (ai->requires_grad) {
            auto& g = ai->grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
        if (bi->requires_grad) {
            auto& g = bi->grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("mul", a, b);
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    auto ai = a.impl(), bi = b.impl();
    return detail::make_result("mul", a.shape(), std::move(out), {a, b}, [ai, bi](TensorImpl& o) {
        if (ai->requires_grad) {
            auto& g = ai->grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bi->data[i];
        }
        if (bi->requires_grad) {
            auto& g = bi->grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * ai->data[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    auto ai = a.impl();
    return detail::make_result("scale", a.shape(), std::move(out), {a}, [ai, c](TensorImpl& o) {
        if (!ai->requires_grad) return;
        auto& g = ai->grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * c;
    });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

// matrix (n x d) + row vector (d), broadcast over rows
inline Tensor add_rows(const Tensor& mat, const Tensor& row) {
    if (mat.ndim() != 2 || row.ndim() != 1 || mat.dim(1) != row.dim(0)) {
        throw std::invalid_argument("add_rows: incompatible shapes " + shape_str(mat.shape()) +
                                    " and " + shape_str(row.shape()));
    }
    const int n = mat.dim(0), d = mat.dim(1);
    std::vector<double> out(mat.numel());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            out[static_cast<size_t>(i) * d + j] = mat.at(i, j) + row.at(j);
    auto mi = mat.impl(), ri = row.impl();
    return detail::make_result("add_rows", mat.shape(), std::move(out), {mat, row},
                               [mi, ri, n, d](TensorImpl& o) {
                                   if (mi->requires_grad) {
                                       auto& g = mi->grad_buffer();
                                       for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                                   }
                                   if (ri->requires_grad) {
                                       auto& g = ri->grad_buffer();
                                       for (int i = 0; i < n; ++i)
                                           for (int j = 0; j < d; ++j)
                                               g[j] += o.grad[static_cast<size_t>(i) * d + j];
                                   }
                               });
}

inline Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) {
        throw std::invalid_argument("transpose requires a matrix, got " + shape_str(a.shape()));
    }
    const int p = a.dim(0), q = a.dim(1);
    std::vector<double> out(a.numel());
    for (int i = 0; i < p; ++i)
        for (int j = 0; j < q; ++j) out[static_cast<size_t>(j) * p + i] = a.at(i, j);
    auto ai = a.impl();
    return detail::make_result("transpose", {q, p}, std::move(out), {a}, [ai, p, q](TensorImpl& o) {
        if (!ai->requires_grad) return;
        auto& g = ai->grad_buffer();
        for (int i = 0; i < p; ++i)
            for (int j = 0; j < q; ++j)
                g[static_cast<size_t>(i) * q + j] += o.grad[static_cast<size_t>(j) * p + i];
    });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) +
                                    " and " + shape_str(b.shape()));
    }
    const int p = a.dim(0), q = a.dim(1), r = b.dim(1);
    std::vector<double> out(static_cast<size_t>(p) * r, 0.0);
    for (int i = 0; i < p; ++i) {
        for (int k = 0; k < q; ++k) {
            const double av = a.at(i, k);
            const double* brow = b.data().data() + static_cast<size_t>(k) * r;
            double* orow = out.data() + static_cast<size_t>(i) * r;
            for (int j = 0; j < r; ++j) orow[j] += av * brow[j];
        }
    }
    auto ai = a.impl(), bi = b.impl();
    return detail::make_result(
        "matmul", {p, r}, std::move(out), {a, b}, [ai, bi, p, q, r](TensorImpl& o) {
            if (ai->requires_grad) {
                auto& g = ai->grad_buffer();
                // dA = dC * B^T
                for (int i = 0; i < p; ++i) {
                    const double* grow = o.grad.data() + static_cast<size_t>(i) * r;
                    for (int k = 0; k < q; ++k) {
                        const double* brow = bi->data.data() + static_cast<size_t>(k) * r;
                        double acc = 0.0;
                        for (int j = 0; j < r; ++j) acc += grow[j] * brow[j];
                        g[static_cast<size_t>(i) * q + k] += acc;
                    }
                }
            }
            if (bi->requires_grad) {
                auto& g = bi->grad_buffer();
                // dB = A^T * dC
                for (int i = 0; i < p; ++i) {
                    const double* grow = o.grad.data() + static_cast<size_t>(i) * r;
                    for (int k = 0; k < q; ++k) {
                        const double av = ai->data[static_cast<size_t>(i) * q + k];
                        double* gbrow = g.data() + static_cast<size_t>(k) * r;
                        for (int j = 0; j < r; ++j) gbrow[j] += av * grow[j];
                    }
                }
            }
        });
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
    auto ai = a.impl();
    return detail::make_result("relu", a.shape(), std::move(out), {a}, [ai](TensorImpl& o) {
        if (!ai->requires_grad) return;
        auto& g = ai->grad_buffer();
        for (size_t i = 0; i < g.size(); ++i)
            if (ai->data[i] > 0.0) g[i] += o.grad[i];
    });
}

inline Tensor gelu(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) {
        const double x = a.data()[i];
        out[i] = 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
    }
    auto ai = a.impl();
    return detail::make_result("gelu", a.shape(), std::move(out), {a}, [ai](TensorImpl& o) {
        if (!ai->requires_grad) return;
        auto& g = ai->grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) {
            const double x = ai->data[i];
            const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
            const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
            g[i] += o.grad[i] * (cdf + x * pdf);
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    auto ai = a.impl();
    return detail::make_result("sum", {1}, {acc}, {a}, [ai](TensorImpl& o) {
        if (!ai->requires_grad) return;
        auto& g = ai->grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[0];
    });
}

inline Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw std::invalid_argument("mean of an empty tensor is undefined");
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    const double inv = 1.0 / static_cast<double>(a.numel());
    auto ai = a.impl();
    return detail::make_result("mean", {1}, {acc * inv}, {a}, [ai, inv](TensorImpl& o) {
        if (!ai->requires_grad) return;
        auto& g = ai->grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[0] * inv;
    });
}

// Sum of the main diagonal of a square matrix.
inline Tensor diag_sum(const Tensor& a) {
    if (a.ndim() != 2 || a.dim(0) != a.dim(1)) {
        throw std::invalid_argument("diag_sum requires a square matrix, got " +
                                    shape_str(a.shape()));
    }
    const int n = a.dim(0);
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += a.at(i, i);
    auto ai = a.impl();
    return detail::make_result("diag_sum", {1}, {acc}, {a}, [ai, n](TensorImpl& o) {
        if (!ai->requires_grad) return;
        auto& g = ai->grad_buffer();
        for (int i = 0; i < n; ++i) g[static_cast<size_t>(i) * n + i] += o.grad[0];
    });
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

namespace detail {

// Applies fn to each length-k slice along `axis` of a 1-D or 2-D tensor.
// fn(in_ptr, out_ptr, k, stride).
template <typename Fn>
inline void for_each_lane(const Tensor& x, int axis, Fn&& fn) {
    if (x.ndim() == 1) {
        if (axis != 0) throw std::invalid_argument("softmax: axis out of range for 1-D input");
        fn(0, 1, x.dim(0));
        return;
    }
    if (x.ndim() != 2 || (axis != 0 && axis != 1)) {
        throw std::invalid_argument("softmax: expected 1-D or 2-D input with axis 0 or 1, got " +
                                    shape_str(x.shape()));
    }
    const int rows = x.dim(0), cols = x.dim(1);
    if (axis == 1) {
        for (int i = 0; i < rows; ++i) fn(static_cast<size_t>(i) * cols, 1, cols);
    } else {
        for (int j = 0; j < cols; ++j) fn(static_cast<size_t>(j), static_cast<size_t>(cols), rows);
    }
}

}  // namespace detail

inline Tensor softmax(const Tensor& x, int axis) {
    const auto& in = x.data();
    std::vector<double> out(x.numel());
    detail::for_each_lane(x, axis, [&](size_t base, size_t stride, int k) {
        if (k < 1) throw std::invalid_argument("softmax over an empty axis");
        double mx = in[base];
        for (int i = 1; i < k; ++i) mx = std::max(mx, in[base + stride * i]);
        double denom = 0.0;
        for (int i = 0; i < k; ++i) {
            const double e = std::exp(in[base + stride * i] - mx);
            out[base + stride * i] = e;
            denom += e;
        }
        for (int i = 0; i < k; ++i) out[base + stride * i] /= denom;
    });
    auto xi = x.impl();
    Shape shp = x.shape();
    return detail::make_result("softmax", std::move(shp), std::move(out), {x},
                               [xi, axis](TensorImpl& o) {
                                   if (!xi->requires_grad) return;
                                   auto& g = xi->grad_buffer();
                                   const auto& y = o.data;
                                   const auto& gy = o.grad;
                                   auto lane = [&](size_t base, size_t stride, int k) {
                                       double dot = 0.0;
                                       for (int i = 0; i < k; ++i)
                                           dot += gy[base + stride * i] * y[base + stride * i];
                                       for (int i = 0; i < k; ++i) {
                                           const size_t ix = base + stride * i;
                                           g[ix] += y[ix] * (gy[ix] - dot);
                                       }
                                   };
                                   if (o.shape.size() == 1) {
                                       lane(0, 1, o.shape[0]);
                                   } else {
                                       const int rows = o.shape[0], cols = o.shape[1];
                                       if (axis == 1)
                                           for (int i = 0; i < rows; ++i)
                                               lane(static_cast<size_t>(i) * cols, 1, cols);
                                       else
                                           for (int j = 0; j < cols; ++j)
                                               lane(static_cast<size_t>(j),
                                                    static_cast<size_t>(cols), rows);
                                   }
                               });
}

inline Tensor log_softmax(const Tensor& x, int axis) {
    const auto& in = x.data();
    std::vector<double> out(x.numel());
    detail::for_each_lane(x, axis, [&](size_t base, size_t stride, int k) {
        if (k < 1) throw std::invalid_argument("log_softmax over an empty axis");
        double mx = in[base];
        for (int i = 1; i < k; ++i) mx = std::max(mx, in[base + stride * i]);
        double denom = 0.0;
        for (int i = 0; i < k; ++i) denom += std::exp(in[base + stride * i] - mx);
        const double lse = mx + std::log(denom);
        for (int i = 0; i < k; ++i) out[base + stride * i] = in[base + stride * i] - lse;
    });
    auto xi = x.impl();
    Shape shp = x.shape();
    return detail::make_result(
        "log_softmax", std::move(shp), std::move(out), {x}, [xi, axis](TensorImpl& o) {
            if (!xi->requires_grad) return;
            auto& g = xi->grad_buffer();
            const auto& y = o.data;
            const auto& gy = o.grad;
            auto lane = [&](size_t base, size_t stride, int k) {
                double gsum = 0.0;
                for (int i = 0; i < k; ++i) gsum += gy[base + stride * i];
                for (int i = 0; i < k; ++i) {
                    const size_t ix = base + stride * i;
                    g[ix] += gy[ix] - std::exp(y[ix]) * gsum;
                }
            };
            if (o.shape.size() == 1) {
                lane(0, 1, o.shape[0]);
            } else {
                const int rows = o.shape[0], cols = o.shape[1];
                if (axis == 1)
                    for (int i = 0; i < rows; ++i) lane(static_cast<size_t>(i) * cols, 1, cols);
                else
                    for (int j = 0; j < cols; ++j)
                        lane(static_cast<size_t>(j), static_cast<size_t>(cols), rows);
            }
        });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// Per-row zero mean / unit variance (population variance) followed by an
// affine transform. Accepts a vector (single row) or a matrix.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
    if (x.ndim() < 1 || x.ndim() > 2) {
        throw std::invalid_argument("layer_norm expects 1-D or 2-D input, got " +
                                    shape_str(x.shape()));
    }
    const int d = x.ndim() == 2 ? x.dim(1) : x.dim(0);
    const int rows = x.ndim() == 2 ? x.dim(0) : 1;
    if (gain.ndim() != 1 || gain.dim(0) != d || bias.ndim() != 1 || bias.dim(0) != d) {
        throw std::invalid_argument("layer_norm: gain/bias must have shape [" +
                                    std::to_string(d) + "]");
    }
    if (d < 1) throw std::invalid_argument("layer_norm over an empty row");
    if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");
    std::vector<double> out(x.numel());
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(static_cast<size_t>(rows));
    for (int r = 0; r < rows; ++r) {
        const double* row = x.data().data() + static_cast<size_t>(r) * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += row[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(r)] = is;
        for (int j = 0; j < d; ++j) {
            const size_t ix = static_cast<size_t>(r) * d + j;
            xhat[ix] = (row[j] - mu) * is;
            out[ix] = gain.at(j) * xhat[ix] + bias.at(j);
        }
    }
    auto xi = x.impl(), gi = gain.impl(), bi = bias.impl();
    Shape shp = x.shape();
    return detail::make_result(
        "layer_norm", std::move(shp), std::move(out), {x, gain, bias},
        [xi, gi, bi, rows, d, xhat = std::move(xhat),
         inv_std = std::move(inv_std)](TensorImpl& o) {
            for (int r = 0; r < rows; ++r) {
                const size_t base = static_cast<size_t>(r) * d;
                const double* gy = o.grad.data() + base;
                if (gi->requires_grad) {
                    auto& gg = gi->grad_buffer();
                    for (int j = 0; j < d; ++j) gg[j] += gy[j] * xhat[base + j];
                }
                if (bi->requires_grad) {
                    auto& gb = bi->grad_buffer();
                    for (int j = 0; j < d; ++j) gb[j] += gy[j];
                }
                if (xi->requires_grad) {
                    auto& gx = xi->grad_buffer();
                    double mean_h = 0.0, mean_hx = 0.0;
                    for (int j = 0; j < d; ++j) {
                        const double h = gy[j] * gi->data[static_cast<size_t>(j)];
                        mean_h += h;
                        mean_hx += h * xhat[base + j];
                    }
                    mean_h /= d;
                    mean_hx /= d;
                    const double is = inv_std[static_cast<size_t>(r)];
                    for (int j = 0; j < d; ++j) {
                        const double h = gy[j] * gi->data[static_cast<size_t>(j)];
                        gx[base + j] += is * (h - mean_h - xhat[base + j] * mean_hx);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

// 1-D convolution over a (length x channels) input with a
// (c_out x c_in x k) kernel bank, zero padding on both sides.
inline Tensor conv1d_strided(const Tensor& x, const Tensor& kernels, int stride, int padding) {
    if (x.ndim() != 2 || kernels.ndim() != 3) {
        throw std::invalid_argument("conv1d_strided: expected input [l x c_in] and kernels "
                                    "[c_out x c_in x k], got " +
                                    shape_str(x.shape()) + " and " + shape_str(kernels.shape()));
    }
    const int l = x.dim(0), c_in = x.dim(1);
    const int c_out = kernels.dim(0), k = kernels.dim(2);
    if (kernels.dim(1) != c_in) {
        throw std::invalid_argument("conv1d_strided: channel mismatch, input " +
                                    shape_str(x.shape()) + " vs kernels " +
                                    shape_str(kernels.shape()));
    }
    if (stride < 1 || padding < 0) {
        throw std::invalid_argument("conv1d_strided: stride must be >= 1 and padding >= 0");
    }
    if (l + 2 * padding < k) {
        throw std::invalid_argument("conv1d_strided: kernel size " + std::to_string(k) +
                                    " exceeds padded input length " +
                                    std::to_string(l + 2 * padding));
    }
    const int l_out = (l + 2 * padding - k) / stride + 1;
    std::vector<double> out(static_cast<size_t>(l_out) * c_out, 0.0);
    const auto& w = kernels.data();
    for (int t = 0; t < l_out; ++t) {
        for (int o = 0; o < c_out; ++o) {
            double acc = 0.0;
            for (int j = 0; j < k; ++j) {
                const int src = t * stride + j - padding;
                if (src < 0 || src >= l) continue;
                const double* xrow = x.data().data() + static_cast<size_t>(src) * c_in;
                const double* wrow = w.data() + (static_cast<size_t>(o) * c_in) * k;
                for (int c = 0; c < c_in; ++c) acc += xrow[c] * wrow[static_cast<size_t>(c) * k + j];
            }
            out[static_cast<size_t>(t) * c_out + o] = acc;
        }
    }
    auto xi = x.impl(), wi = kernels.impl();
    return detail::make_result(
        "conv1d_strided", {l_out, c_out}, std::move(out), {x, kernels},
        [xi, wi, l, c_in, c_out, k, stride, padding, l_out](TensorImpl& o) {
            for (int t = 0; t < l_out; ++t) {
                const double* gy = o.grad.data() + static_cast<size_t>(t) * c_out;
                for (int j = 0; j < k; ++j) {
                    const int src = t * stride + j - padding;
                    if (src < 0 || src >= l) continue;
                    for (int oc = 0; oc < c_out; ++oc) {
                        const double gv = gy[oc];
                        if (gv == 0.0) continue;
                        const size_t wbase = (static_cast<size_t>(oc) * c_in) * k;
                        if (xi->requires_grad) {
                            auto& gx = xi->grad_buffer();
                            for (int c = 0; c < c_in; ++c)
                                gx[static_cast<size_t>(src) * c_in + c] +=
                                    gv * wi->data[wbase + static_cast<size_t>(c) * k + j];
                        }
                        if (wi->requires_grad) {
                            auto& gw = wi->grad_buffer();
                            for (int c = 0; c < c_in; ++c)
                                gw[wbase + static_cast<size_t>(c) * k + j] +=
                                    gv * xi->data[static_cast<size_t>(src) * c_in + c];
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Lookup, slicing, concatenation
// ---------------------------------------------------------------------------

inline Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
    if (table.ndim() != 2) {
        throw std::invalid_argument("embedding_rows requires a [V x d] table, got " +
                                    shape_str(table.shape()));
    }
    const int v = table.dim(0), d = table.dim(1);
    for (int id : ids) {
        if (id < 0 || id >= v) {
            throw std::invalid_argument("token id " + std::to_string(id) +
                                        " outside vocabulary of size " + std::to_string(v));
        }
    }
    const int l = static_cast<int>(ids.size());
    std::vector<double> out(static_cast<size_t>(l) * d);
    for (int i = 0; i < l; ++i) {
        const double* src = table.data().data() + static_cast<size_t>(ids[static_cast<size_t>(i)]) * d;
        std::copy(src, src + d, out.begin() + static_cast<size_t>(i) * d);
    }
    auto ti = table.impl();
    return detail::make_result("embedding_rows", {l, d}, std::move(out), {table},
                               [ti, ids, d](TensorImpl& o) {
                                   if (!ti->requires_grad) return;
                                   auto& g = ti->grad_buffer();
                                   for (size_t i = 0; i < ids.size(); ++i) {
                                       const size_t dst = static_cast<size_t>(ids[i]) * d;
                                       const size_t src = i * d;
                                       for (int j = 0; j < d; ++j) g[dst + j] += o.grad[src + j];
                                   }
                               });
}

inline Tensor slice_cols(const Tensor& x, int c0, int c1) {
    if (x.ndim() != 2 || c0 < 0 || c1 > x.dim(1) || c0 >= c1) {
        throw std::invalid_argument("slice_cols: invalid range [" + std::to_string(c0) + ", " +
                                    std::to_string(c1) + ") for shape " + shape_str(x.shape()));
    }
    const int n = x.dim(0), c = x.dim(1), w = c1 - c0;
    std::vector<double> out(static_cast<size_t>(n) * w);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < w; ++j)
            out[static_cast<size_t>(i) * w + j] = x.at(i, c0 + j);
    auto xi = x.impl();
    return detail::make_result("slice_cols", {n, w}, std::move(out), {x},
                               [xi, n, c, c0, w](TensorImpl& o) {
                                   if (!xi->requires_grad) return;
                                   auto& g = xi->grad_buffer();
                                   for (int i = 0; i < n; ++i)
                                       for (int j = 0; j < w; ++j)
                                           g[static_cast<size_t>(i) * c + c0 + j] +=
                                               o.grad[static_cast<size_t>(i) * w + j];
                               });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols of zero tensors");
    const int n = parts[0].dim(0);
    int total = 0;
    for (const Tensor& t : parts) {
        if (t.ndim() != 2 || t.dim(0) != n) {
            throw std::invalid_argument("concat_cols: row mismatch, " + shape_str(t.shape()));
        }
        total += t.dim(1);
    }
    std::vector<double> out(static_cast<size_t>(n) * total);
    int col = 0;
    for (const Tensor& t : parts) {
        const int w = t.dim(1);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < w; ++j)
                out[static_cast<size_t>(i) * total + col + j] = t.at(i, j);
        col += w;
    }
    bool needs_grad = false;
    if (grad_enabled())
        for (const Tensor& t : parts) needs_grad = needs_grad || t.requires_grad();
    Tensor result = Tensor::from_data({n, total}, std::move(out), needs_grad);
    result.debug_check_finite("concat_cols");
    if (needs_grad) {
        std::vector<std::shared_ptr<TensorImpl>> impls;
        std::vector<int> widths;
        for (const Tensor& t : parts) {
            impls.push_back(t.impl());
            widths.push_back(t.dim(1));
        }
        auto inputs = impls;
        result.attach_record("concat_cols", std::move(inputs),
                             [impls, widths, n, total](TensorImpl& o) {
                                 int col = 0;
                                 for (size_t p = 0; p < impls.size(); ++p) {
                                     const int w = widths[p];
                                     if (impls[p]->requires_grad) {
                                         auto& g = impls[p]->grad_buffer();
                                         for (int i = 0; i < n; ++i)
                                             for (int j = 0; j < w; ++j)
                                                 g[static_cast<size_t>(i) * w + j] +=
                                                     o.grad[static_cast<size_t>(i) * total + col + j];
                                     }
                                     col += w;
                                 }
                             });
    }
    return result;
}

// ---------------------------------------------------------------------------
// Similarity
// ---------------------------------------------------------------------------

inline Tensor cosine_similarity(const Tensor& a, const Tensor& b, double eps = 1e-8) {
    if (a.ndim() != 1 || b.ndim() != 1 || a.dim(0) != b.dim(0) || a.dim(0) < 1) {
        throw std::invalid_argument("cosine_similarity expects two equal-length vectors, got " +
                                    shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const int d = a.dim(0);
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (int i = 0; i < d; ++i) {
        dot += a.at(i) * b.at(i);
        na2 += a.at(i) * a.at(i);
        nb2 += b.at(i) * b.at(i);
    }
    const double na = std::max(std::sqrt(na2), eps);
    const double nb = std::max(std::sqrt(nb2), eps);
    const double cosv = dot / (na * nb);
    auto ai = a.impl(), bi = b.impl();
    return detail::make_result(
        "cosine_similarity", {1}, {cosv}, {a, b},
        [ai, bi, d, eps, dot, na, nb, na2, nb2](TensorImpl& o) {
            const double g = o.grad[0];
            const bool a_live = std::sqrt(na2) > eps;
            const bool b_live = std::sqrt(nb2) > eps;
            if (ai->requires_grad) {
                auto& ga = ai->grad_buffer();
                for (int i = 0; i < d; ++i) {
                    double dv = bi->data[static_cast<size_t>(i)] / (na * nb);
                    if (a_live) dv -= dot * ai->data[static_cast<size_t>(i)] / (na * na * na * nb);
                    ga[static_cast<size_t>(i)] += g * dv;
                }
            }
            if (bi->requires_grad) {
                auto& gb = bi->grad_buffer();
                for (int i = 0; i < d; ++i) {
                    double dv = ai->data[static_cast<size_t>(i)] / (na * nb);
                    if (b_live) dv -= dot * bi->data[static_cast<size_t>(i)] / (nb * nb * nb * na);
                    gb[static_cast<size_t>(i)] += g * dv;
                }
            }
        });
}

// Rows scaled to unit L2 norm, with an eps floor guarding zero rows.
inline Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-8) {
    if (x.ndim() != 2) {
        throw std::invalid_argument("l2_normalize_rows requires a matrix, got " +
                                    shape_str(x.shape()));
    }
    const int n = x.dim(0), d = x.dim(1);
    std::vector<double> out(x.numel());
    std::vector<double> norms(static_cast<size_t>(n));
    std::vector<char> live(static_cast<size_t>(n));
    for (int r = 0; r < n; ++r) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += x.at(r, j) * x.at(r, j);
        const double raw = std::sqrt(s);
        const double nr = std::max(raw, eps);
        norms[static_cast<size_t>(r)] = nr;
        live[static_cast<size_t>(r)] = raw > eps ? 1 : 0;
        for (int j = 0; j < d; ++j) out[static_cast<size_t>(r) * d + j] = x.at(r, j) / nr;
    }
    auto xi = x.impl();
    return detail::make_result(
        "l2_normalize_rows", {n, d}, std::move(out), {x},
        [xi, n, d, norms = std::move(norms), live = std::move(live)](TensorImpl& o) {
            if (!xi->requires_grad) return;
            auto& g = xi->grad_buffer();
            for (int r = 0; r < n; ++r) {
                const size_t base = static_cast<size_t>(r) * d;
                const double nr = norms[static_cast<size_t>(r)];
                double dot = 0.0;
                if (live[static_cast<size_t>(r)]) {
                    for (int j = 0; j < d; ++j) dot += o.grad[base + j] * xi->data[base + j];
                }
                for (int j = 0; j < d; ++j) {
                    double dv = o.grad[base + j] / nr;
                    if (live[static_cast<size_t>(r)])
                        dv -= xi->data[base + j] * dot / (nr * nr * nr);
                    g[base + j] += dv;
                }
            }
        });
}

}  // namespace ssmt
