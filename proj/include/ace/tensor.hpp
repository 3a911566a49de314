#pragma once

// Dense 2-D float64 tensors with tape-based reverse-mode differentiation.
//
// A Tape owns every Node created during one forward pass. Nodes are created
// in topological order, so the backward sweep is a single reverse walk. The
// tape is rebuilt for each training step; parameters are bound as leaf nodes
// and their gradients harvested afterwards.
//
// Raw matrix products go through Eigen; everything else (including the fused
// attention / layer-norm / cross-entropy kernels and their backward passes)
// is implemented here.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "ace/common.hpp"

namespace ace {

using EigenRowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Fixed 64-byte alignment for all tensor buffers. Eigen picks vector-kernel
// peel points from the runtime address, so uniform alignment is what makes
// repeated evaluations of the same graph bitwise reproducible.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::size_t kAlign = 64;

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) {}

    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kAlign)));
    }
    void deallocate(T* p, std::size_t) noexcept {
        ::operator delete(p, std::align_val_t(kAlign));
    }

    template <class U>
    struct rebind {
        using other = AlignedAllocator<U>;
    };
    friend bool operator==(const AlignedAllocator&, const AlignedAllocator&) { return true; }
    friend bool operator!=(const AlignedAllocator&, const AlignedAllocator&) { return false; }
};

class Tensor {
public:
    Tensor() = default;
    Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Tensor randn(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 1.0) {
        Tensor t(rows, cols);
        for (double& x : t.data_) x = rng.normal() * stddev;
        return t;
    }

    static Tensor identity(std::size_t n) {
        Tensor t(n, n);
        for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
        return t;
    }

    static Tensor from_rows(const std::vector<std::vector<double>>& rows) {
        if (rows.empty()) return Tensor();
        Tensor t(rows.size(), rows[0].size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i].size() != t.cols_) throw DimensionError("from_rows: ragged input");
            for (std::size_t j = 0; j < t.cols_; ++j) t.at(i, j) = rows[i][j];
        }
        return t;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& at(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double at(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
    double& operator[](std::size_t k) { return data_[k]; }
    double operator[](std::size_t k) const { return data_[k]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    Eigen::Map<EigenRowMat> map() {
        return {data_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_)};
    }
    Eigen::Map<const EigenRowMat> map() const {
        return {data_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_)};
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (double x : data_) {
            if (!std::isfinite(x)) return false;
        }
        return true;
    }

    bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double, AlignedAllocator<double>> data_;
};

// ---------------------------------------------------------------------------
// Tape

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_ready = false;
    std::function<void()> backward;
};

using Ref = Node*;

inline Tensor& grad_of(Ref n) {
    if (!n->grad_ready) {
        n->grad = Tensor(n->value.rows(), n->value.cols());
        n->grad_ready = true;
    }
    return n->grad;
}

class Tape {
public:
    Ref constant(Tensor v) {
        nodes_.push_back(Node{std::move(v), {}, false, false, {}});
        return &nodes_.back();
    }

    Ref leaf(Tensor v) {
        nodes_.push_back(Node{std::move(v), {}, true, false, {}});
        return &nodes_.back();
    }

    Ref make(Tensor v, bool requires_grad, std::function<void()> backward) {
        nodes_.push_back(Node{std::move(v), {}, requires_grad,
                              false, requires_grad ? std::move(backward) : std::function<void()>{}});
        return &nodes_.back();
    }

    // Backpropagates from a scalar root through every node created so far.
    void backward(Ref root) {
        if (root->value.rows() != 1 || root->value.cols() != 1)
            throw DimensionError("backward: root must be 1x1");
        grad_of(root)[0] = 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Node& n = *it;
            if (n.requires_grad && n.grad_ready && n.backward) n.backward();
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    std::deque<Node> nodes_;
};

namespace detail {

inline void check(bool ok, const std::string& msg) {
    if (!ok) throw DimensionError(msg);
}

inline bool needs(Ref a) { return a->requires_grad; }
inline bool needs(Ref a, Ref b) { return a->requires_grad || b->requires_grad; }
inline bool needs(Ref a, Ref b, Ref c) { return needs(a, b) || c->requires_grad; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive ops

inline Ref matmul(Tape& t, Ref a, Ref b) {
    detail::check(a->value.cols() == b->value.rows(), "matmul: inner dimensions differ");
    Tensor out(a->value.rows(), b->value.cols());
    out.map().noalias() = a->value.map() * b->value.map();
    Ref r = t.make(std::move(out), detail::needs(a, b), {});
    if (r->requires_grad) {
        r->backward = [a, b, r] {
            if (a->requires_grad)
                grad_of(a).map().noalias() += r->grad.map() * b->value.map().transpose();
            if (b->requires_grad)
                grad_of(b).map().noalias() += a->value.map().transpose() * r->grad.map();
        };
    }
    return r;
}

// a * b^T
inline Ref matmul_nt(Tape& t, Ref a, Ref b) {
    detail::check(a->value.cols() == b->value.cols(), "matmul_nt: column widths differ");
    Tensor out(a->value.rows(), b->value.rows());
    out.map().noalias() = a->value.map() * b->value.map().transpose();
    Ref r = t.make(std::move(out), detail::needs(a, b), {});
    if (r->requires_grad) {
        r->backward = [a, b, r] {
            if (a->requires_grad)
                grad_of(a).map().noalias() += r->grad.map() * b->value.map();
            if (b->requires_grad)
                grad_of(b).map().noalias() += r->grad.map().transpose() * a->value.map();
        };
    }
    return r;
}

inline Ref add(Tape& t, Ref a, Ref b) {
    detail::check(a->value.same_shape(b->value), "add: shape mismatch");
    Tensor out = a->value;
    out.map() += b->value.map();
    Ref r = t.make(std::move(out), detail::needs(a, b), {});
    if (r->requires_grad) {
        r->backward = [a, b, r] {
            if (a->requires_grad) grad_of(a).map() += r->grad.map();
            if (b->requires_grad) grad_of(b).map() += r->grad.map();
        };
    }
    return r;
}

inline Ref sub(Tape& t, Ref a, Ref b) {
    detail::check(a->value.same_shape(b->value), "sub: shape mismatch");
    Tensor out = a->value;
    out.map() -= b->value.map();
    Ref r = t.make(std::move(out), detail::needs(a, b), {});
    if (r->requires_grad) {
        r->backward = [a, b, r] {
            if (a->requires_grad) grad_of(a).map() += r->grad.map();
            if (b->requires_grad) grad_of(b).map() -= r->grad.map();
        };
    }
    return r;
}

inline Ref mul(Tape& t, Ref a, Ref b) {
    detail::check(a->value.same_shape(b->value), "mul: shape mismatch");
    Tensor out = a->value;
    out.map().array() *= b->value.map().array();
    Ref r = t.make(std::move(out), detail::needs(a, b), {});
    if (r->requires_grad) {
        r->backward = [a, b, r] {
            if (a->requires_grad)
                grad_of(a).map().array() += r->grad.map().array() * b->value.map().array();
            if (b->requires_grad)
                grad_of(b).map().array() += r->grad.map().array() * a->value.map().array();
        };
    }
    return r;
}

// Broadcasts a 1 x m row vector over every row of a.
inline Ref add_rowvec(Tape& t, Ref a, Ref b) {
    detail::check(b->value.rows() == 1 && b->value.cols() == a->value.cols(),
                  "add_rowvec: b must be 1 x cols(a)");
    Tensor out = a->value;
    out.map().rowwise() += b->value.map().row(0);
    Ref r = t.make(std::move(out), detail::needs(a, b), {});
    if (r->requires_grad) {
        r->backward = [a, b, r] {
            if (a->requires_grad) grad_of(a).map() += r->grad.map();
            if (b->requires_grad) grad_of(b).map().row(0) += r->grad.map().colwise().sum();
        };
    }
    return r;
}

inline Ref scale(Tape& t, Ref a, double c) {
    Tensor out = a->value;
    out.map() *= c;
    Ref r = t.make(std::move(out), a->requires_grad, {});
    if (r->requires_grad) {
        r->backward = [a, r, c] { grad_of(a).map() += c * r->grad.map(); };
    }
    return r;
}

inline Ref square(Tape& t, Ref a) {
    Tensor out = a->value;
    out.map().array() = out.map().array().square();
    Ref r = t.make(std::move(out), a->requires_grad, {});
    if (r->requires_grad) {
        r->backward = [a, r] {
            grad_of(a).map().array() += 2.0 * r->grad.map().array() * a->value.map().array();
        };
    }
    return r;
}

inline Ref exp_op(Tape& t, Ref a) {
    Tensor out = a->value;
    out.map().array() = out.map().array().exp();
    Ref r = t.make(std::move(out), a->requires_grad, {});
    if (r->requires_grad) {
        r->backward = [a, r] {
            grad_of(a).map().array() += r->grad.map().array() * r->value.map().array();
        };
    }
    return r;
}

inline Ref relu(Tape& t, Ref a) {
    Tensor out = a->value;
    out.map().array() = out.map().array().max(0.0);
    Ref r = t.make(std::move(out), a->requires_grad, {});
    if (r->requires_grad) {
        r->backward = [a, r] {
            grad_of(a).map().array() +=
                r->grad.map().array() * (a->value.map().array() > 0.0).cast<double>();
        };
    }
    return r;
}

namespace detail {

inline double gelu_val(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_grad(double x) {
    const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * phi;
}

inline double softplus_val(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid_val(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace detail

// Exact (erf-based) GELU.
inline Ref gelu(Tape& t, Ref a) {
    Tensor out = a->value;
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = detail::gelu_val(out[k]);
    Ref r = t.make(std::move(out), a->requires_grad, {});
    if (r->requires_grad) {
        r->backward = [a, r] {
            Tensor& g = grad_of(a);
            for (std::size_t k = 0; k < g.size(); ++k)
                g[k] += r->grad[k] * detail::gelu_grad(a->value[k]);
        };
    }
    return r;
}

inline Ref softplus(Tape& t, Ref a) {
    Tensor out = a->value;
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = detail::softplus_val(out[k]);
    Ref r = t.make(std::move(out), a->requires_grad, {});
    if (r->requires_grad) {
        r->backward = [a, r] {
            Tensor& g = grad_of(a);
            for (std::size_t k = 0; k < g.size(); ++k)
                g[k] += r->grad[k] * detail::sigmoid_val(a->value[k]);
        };
    }
    return r;
}

inline Ref sum_all(Tape& t, Ref a) {
    Tensor out(1, 1);
    out[0] = std::accumulate(a->value.data(), a->value.data() + a->value.size(), 0.0);
    Ref r = t.make(std::move(out), a->requires_grad, {});
    if (r->requires_grad) {
        r->backward = [a, r] { grad_of(a).map().array() += r->grad[0]; };
    }
    return r;
}

inline Ref mean_all(Tape& t, Ref a) {
    detail::check(a->value.size() > 0, "mean_all: empty tensor");
    Tensor out(1, 1);
    out[0] = std::accumulate(a->value.data(), a->value.data() + a->value.size(), 0.0) /
             static_cast<double>(a->value.size());
    Ref r = t.make(std::move(out), a->requires_grad, {});
    if (r->requires_grad) {
        const double inv = 1.0 / static_cast<double>(a->value.size());
        r->backward = [a, r, inv] { grad_of(a).map().array() += r->grad[0] * inv; };
    }
    return r;
}

// n x m -> n x 1 row sums.
inline Ref row_sum(Tape& t, Ref a) {
    Tensor out(a->value.rows(), 1);
    out.map().col(0) = a->value.map().rowwise().sum();
    Ref r = t.make(std::move(out), a->requires_grad, {});
    if (r->requires_grad) {
        r->backward = [a, r] {
            grad_of(a).map().colwise() += r->grad.map().col(0);
        };
    }
    return r;
}

// n x d -> 1 x d column means.
inline Ref row_mean(Tape& t, Ref a) {
    detail::check(a->value.rows() > 0, "row_mean: empty tensor");
    Tensor out(1, a->value.cols());
    out.map().row(0) = a->value.map().colwise().mean();
    Ref r = t.make(std::move(out), a->requires_grad, {});
    if (r->requires_grad) {
        const double inv = 1.0 / static_cast<double>(a->value.rows());
        r->backward = [a, r, inv] {
            grad_of(a).map().rowwise() += inv * r->grad.map().row(0);
        };
    }
    return r;
}

// (n x 1, m x 1) -> n x m with out[i][j] = a[i] + b[j].
inline Ref cross_add(Tape& t, Ref a, Ref b) {
    detail::check(a->value.cols() == 1 && b->value.cols() == 1, "cross_add: inputs must be column vectors");
    const std::size_t n = a->value.rows(), m = b->value.rows();
    Tensor out(n, m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out.at(i, j) = a->value[i] + b->value[j];
    Ref r = t.make(std::move(out), detail::needs(a, b), {});
    if (r->requires_grad) {
        r->backward = [a, b, r] {
            if (a->requires_grad) grad_of(a).map().col(0) += r->grad.map().rowwise().sum();
            if (b->requires_grad) grad_of(b).map().col(0) += r->grad.map().colwise().sum().transpose();
        };
    }
    return r;
}

// Selects rows of a by index; duplicate indices accumulate gradient.
inline Ref gather_rows(Tape& t, Ref a, std::vector<std::size_t> idx) {
    for (std::size_t i : idx) detail::check(i < a->value.rows(), "gather_rows: index out of range");
    Tensor out(idx.size(), a->value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) out.map().row(i) = a->value.map().row(idx[i]);
    Ref r = t.make(std::move(out), a->requires_grad, {});
    if (r->requires_grad) {
        r->backward = [a, r, idx = std::move(idx)] {
            Tensor& g = grad_of(a);
            for (std::size_t i = 0; i < idx.size(); ++i)
                g.map().row(idx[i]) += r->grad.map().row(i);
        };
    }
    return r;
}

// Appends constant columns to a differentiable block.
inline Ref append_cols(Tape& t, Ref a, const Tensor& extra) {
    detail::check(extra.rows() == a->value.rows(), "append_cols: row count mismatch");
    Tensor out(a->value.rows(), a->value.cols() + extra.cols());
    out.map().leftCols(a->value.cols()) = a->value.map();
    out.map().rightCols(extra.cols()) = extra.map();
    Ref r = t.make(std::move(out), a->requires_grad, {});
    if (r->requires_grad) {
        const std::size_t w = a->value.cols();
        r->backward = [a, r, w] { grad_of(a).map() += r->grad.map().leftCols(w); };
    }
    return r;
}

// Row-wise softmax with max subtraction.
inline Ref row_softmax(Tape& t, Ref a) {
    Tensor out = a->value;
    auto m = out.map();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        const double mx = m.row(i).maxCoeff();
        m.row(i) = (m.row(i).array() - mx).exp();
        m.row(i) /= m.row(i).sum();
    }
    Ref r = t.make(std::move(out), a->requires_grad, {});
    if (r->requires_grad) {
        r->backward = [a, r] {
            auto y = r->value.map();
            auto dy = r->grad.map();
            Tensor& g = grad_of(a);
            for (Eigen::Index i = 0; i < y.rows(); ++i) {
                const double dot = (dy.row(i).array() * y.row(i).array()).sum();
                g.map().row(i).array() += y.row(i).array() * (dy.row(i).array() - dot);
            }
        };
    }
    return r;
}

// ---------------------------------------------------------------------------
// Fused kernels

// Row-wise layer normalization: y = gain * (x - mean) / sqrt(var + eps) + bias.
// gain and bias are 1 x d. Variance is the population variance over the row.
inline Ref layer_norm(Tape& t, Ref x, Ref gain, Ref bias, double eps = 1e-5) {
    const std::size_t n = x->value.rows(), d = x->value.cols();
    detail::check(gain->value.rows() == 1 && gain->value.cols() == d, "layer_norm: bad gain shape");
    detail::check(bias->value.rows() == 1 && bias->value.cols() == d, "layer_norm: bad bias shape");
    detail::check(d > 0, "layer_norm: empty rows");

    auto xhat = std::make_shared<Tensor>(n, d);
    auto inv_sigma = std::make_shared<std::vector<double>>(n);
    Tensor out(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const double mu = x->value.map().row(i).mean();
        const double var =
            (x->value.map().row(i).array() - mu).square().sum() / static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_sigma)[i] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const double xh = (x->value.at(i, j) - mu) * is;
            xhat->at(i, j) = xh;
            out.at(i, j) = xh * gain->value[j] + bias->value[j];
        }
    }
    Ref r = t.make(std::move(out), detail::needs(x, gain, bias), {});
    if (r->requires_grad) {
        r->backward = [x, gain, bias, r, xhat, inv_sigma, n, d] {
            const double dd = static_cast<double>(d);
            for (std::size_t i = 0; i < n; ++i) {
                // dxhat = dy * gain; dx follows the standard layer-norm backward.
                double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double dxh = r->grad.at(i, j) * gain->value[j];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xhat->at(i, j);
                }
                if (x->requires_grad) {
                    Tensor& gx = grad_of(x);
                    const double is = (*inv_sigma)[i];
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = r->grad.at(i, j) * gain->value[j];
                        gx.at(i, j) +=
                            is * (dxh - sum_dxh / dd - xhat->at(i, j) * sum_dxh_xh / dd);
                    }
                }
            }
            if (gain->requires_grad) {
                Tensor& gg = grad_of(gain);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j)
                        gg[j] += r->grad.at(i, j) * xhat->at(i, j);
            }
            if (bias->requires_grad) {
                Tensor& gb = grad_of(bias);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j) gb[j] += r->grad.at(i, j);
            }
        };
    }
    return r;
}

// Scaled dot-product attention over h heads on already-projected inputs.
// q: m x dk, k: n x dk, v: n x dv; dk and dv must be divisible by h.
// Head i attends with scale 1/sqrt(dk/h) over its column slice; outputs are
// concatenated back in place, giving an m x dv result.
inline Ref multi_head_core(Tape& t, Ref q, Ref k, Ref v, std::size_t h) {
    const std::size_t m = q->value.rows(), dk = q->value.cols();
    const std::size_t n = k->value.rows(), dv = v->value.cols();
    detail::check(h > 0, "multi_head_core: h must be positive");
    detail::check(k->value.cols() == dk, "multi_head_core: q/k width mismatch");
    detail::check(v->value.rows() == n, "multi_head_core: k/v row mismatch");
    detail::check(dk % h == 0 && dv % h == 0, "multi_head_core: width not divisible by h");

    const std::size_t dkh = dk / h, dvh = dv / h;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dkh));

    auto attn = std::make_shared<std::vector<EigenRowMat>>();
    attn->reserve(h);
    Tensor out(m, dv);
    for (std::size_t head = 0; head < h; ++head) {
        auto qh = q->value.map().middleCols(head * dkh, dkh);
        auto kh = k->value.map().middleCols(head * dkh, dkh);
        auto vh = v->value.map().middleCols(head * dvh, dvh);
        EigenRowMat s = sc * (qh * kh.transpose());
        for (Eigen::Index i = 0; i < s.rows(); ++i) {
            const double mx = s.row(i).maxCoeff();
            s.row(i) = (s.row(i).array() - mx).exp();
            s.row(i) /= s.row(i).sum();
        }
        out.map().middleCols(head * dvh, dvh).noalias() = s * vh;
        attn->push_back(std::move(s));
    }

    Ref r = t.make(std::move(out), detail::needs(q, k, v), {});
    if (r->requires_grad) {
        r->backward = [q, k, v, r, attn, h, dkh, dvh, sc] {
            for (std::size_t head = 0; head < h; ++head) {
                const EigenRowMat& a = (*attn)[head];
                auto dout = r->grad.map().middleCols(head * dvh, dvh);
                auto qh = q->value.map().middleCols(head * dkh, dkh);
                auto kh = k->value.map().middleCols(head * dkh, dkh);
                auto vh = v->value.map().middleCols(head * dvh, dvh);

                if (v->requires_grad)
                    grad_of(v).map().middleCols(head * dvh, dvh).noalias() +=
                        a.transpose() * dout;

                if (!q->requires_grad && !k->requires_grad) continue;
                EigenRowMat da = dout * vh.transpose();
                // Softmax backward, row-wise.
                EigenRowMat ds = a;
                for (Eigen::Index i = 0; i < ds.rows(); ++i) {
                    const double dot = (da.row(i).array() * a.row(i).array()).sum();
                    ds.row(i).array() *= (da.row(i).array() - dot);
                }
                ds *= sc;
                if (q->requires_grad)
                    grad_of(q).map().middleCols(head * dkh, dkh).noalias() += ds * kh;
                if (k->requires_grad)
                    grad_of(k).map().middleCols(head * dkh, dkh).noalias() +=
                        ds.transpose() * qh;
            }
        };
    }
    return r;
}

// Single-head scaled dot-product attention.
inline Ref att(Tape& t, Ref q, Ref k, Ref v) { return multi_head_core(t, q, k, v, 1); }

// Sampled-softmax cross entropy against a frozen embedding table.
// s: n x d decoded rows; table: M x d; targets[i] is row i's true element id;
// negatives is n x n_neg of sampled contrast ids. Returns the 1x1 summed loss
//   sum_i [ logsumexp_{k in {target_i} + negs_i} (s_i . e_k) - s_i . e_target ].
inline Ref ce_sampled_softmax(Tape& t, Ref s, const Tensor& table,
                              std::vector<std::uint32_t> targets,
                              std::vector<std::uint32_t> negatives, std::size_t n_neg) {
    const std::size_t n = s->value.rows(), d = s->value.cols();
    detail::check(table.cols() == d, "ce_sampled_softmax: table width mismatch");
    detail::check(targets.size() == n, "ce_sampled_softmax: targets size mismatch");
    detail::check(negatives.size() == n * n_neg, "ce_sampled_softmax: negatives size mismatch");

    const std::size_t cand = n_neg + 1;
    auto probs = std::make_shared<Tensor>(n, cand);
    double total = 0.0;
    std::vector<double> scores(cand);
    for (std::size_t i = 0; i < n; ++i) {
        auto si = s->value.map().row(i);
        scores[0] = si.dot(table.map().row(targets[i]));
        for (std::size_t j = 0; j < n_neg; ++j)
            scores[j + 1] = si.dot(table.map().row(negatives[i * n_neg + j]));
        const double mx = *std::max_element(scores.begin(), scores.end());
        double z = 0.0;
        for (std::size_t j = 0; j < cand; ++j) z += std::exp(scores[j] - mx);
        const double lse = mx + std::log(z);
        total += lse - scores[0];
        for (std::size_t j = 0; j < cand; ++j)
            probs->at(i, j) = std::exp(scores[j] - lse);
    }

    Tensor out(1, 1);
    out[0] = total;
    Ref r = t.make(std::move(out), s->requires_grad, {});
    if (r->requires_grad) {
        r->backward = [s, r, probs, &table, targets = std::move(targets),
                       negatives = std::move(negatives), n_neg, n] {
            const double g = r->grad[0];
            Tensor& gs = grad_of(s);
            for (std::size_t i = 0; i < n; ++i) {
                auto gi = gs.map().row(i);
                gi += g * (probs->at(i, 0) - 1.0) * table.map().row(targets[i]);
                for (std::size_t j = 0; j < n_neg; ++j)
                    gi += g * probs->at(i, j + 1) * table.map().row(negatives[i * n_neg + j]);
            }
        };
    }
    return r;
}

// Segment means: rows [offsets[i], offsets[i+1]) of x average into output row i.
// Empty segments are rejected.
inline Ref segment_mean(Tape& t, Ref x, std::vector<std::size_t> offsets) {
    detail::check(offsets.size() >= 2, "segment_mean: need at least one segment");
    detail::check(offsets.front() == 0 && offsets.back() == x->value.rows(),
                  "segment_mean: offsets must span all rows");
    const std::size_t nseg = offsets.size() - 1;
    Tensor out(nseg, x->value.cols());
    for (std::size_t i = 0; i < nseg; ++i) {
        detail::check(offsets[i + 1] > offsets[i], "segment_mean: empty segment");
        const std::size_t len = offsets[i + 1] - offsets[i];
        out.map().row(i) =
            x->value.map().middleRows(offsets[i], len).colwise().mean();
    }
    Ref r = t.make(std::move(out), x->requires_grad, {});
    if (r->requires_grad) {
        r->backward = [x, r, offsets = std::move(offsets), nseg] {
            Tensor& g = grad_of(x);
            for (std::size_t i = 0; i < nseg; ++i) {
                const std::size_t len = offsets[i + 1] - offsets[i];
                const double inv = 1.0 / static_cast<double>(len);
                g.map().middleRows(offsets[i], len).rowwise() +=
                    inv * r->grad.map().row(i);
            }
        };
    }
    return r;
}

// ---------------------------------------------------------------------------
// Parameters and Adam

struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor m;
    Tensor v;
};

struct AdamConfig {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Ordered, named parameter collection with per-parameter Adam state and a
// shared step counter. Order is registration order, which fixes checkpoint
// layout and keeps training deterministic.
class ParamSet {
public:
    std::size_t add(std::string name, Tensor init) {
        for (const auto& p : params_)
            if (p.name == name) throw DomainError("duplicate parameter name: " + name);
        const std::size_t r = init.rows(), c = init.cols();
        params_.push_back(Param{std::move(name), std::move(init), Tensor(r, c),
                                Tensor(r, c), Tensor(r, c)});
        return params_.size() - 1;
    }

    Param& operator[](std::size_t i) { return params_[i]; }
    const Param& operator[](std::size_t i) const { return params_[i]; }
    std::size_t size() const { return params_.size(); }
    std::size_t steps() const { return step_; }

    Param* find(const std::string& name) {
        for (auto& p : params_)
            if (p.name == name) return &p;
        return nullptr;
    }

    void zero_grads() {
        for (auto& p : params_) p.grad.fill(0.0);
    }

    // Binds every parameter as a leaf on the tape, in registration order.
    std::vector<Ref> bind(Tape& t) const {
        std::vector<Ref> refs;
        refs.reserve(params_.size());
        for (const auto& p : params_) refs.push_back(t.leaf(p.value));
        return refs;
    }

    // Accumulates tape gradients back into parameter grad buffers.
    void harvest(const std::vector<Ref>& refs) {
        if (refs.size() != params_.size())
            throw DimensionError("harvest: binding count mismatch");
        for (std::size_t i = 0; i < refs.size(); ++i) {
            if (!refs[i]->grad_ready) continue;
            params_[i].grad.map() += refs[i]->grad.map();
        }
    }

    // One Adam update over all parameters; rejects non-finite gradients.
    void adam_step(const AdamConfig& cfg) {
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_));
        for (auto& p : params_) {
            if (!p.grad.all_finite())
                throw DomainError("adam_step: non-finite gradient in " + p.name);
            for (std::size_t k = 0; k < p.value.size(); ++k) {
                const double g = p.grad[k];
                p.m[k] = cfg.beta1 * p.m[k] + (1.0 - cfg.beta1) * g;
                p.v[k] = cfg.beta2 * p.v[k] + (1.0 - cfg.beta2) * g * g;
                const double mhat = p.m[k] / bc1;
                const double vhat = p.v[k] / bc2;
                p.value[k] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
            }
            p.grad.fill(0.0);
        }
    }

private:
    std::vector<Param> params_;
    std::size_t step_ = 0;
};

// Sum of squared entries over a set of bound parameter leaves.
inline Ref l2_penalty(Tape& t, const std::vector<Ref>& leaves) {
    detail::check(!leaves.empty(), "l2_penalty: no parameters");
    Ref acc = sum_all(t, square(t, leaves[0]));
    for (std::size_t i = 1; i < leaves.size(); ++i)
        acc = add(t, acc, sum_all(t, square(t, leaves[i])));
    return acc;
}

}  // namespace ace
