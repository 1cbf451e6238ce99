#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "bpoem/common.hpp"

// Minimal dense-tensor engine with reverse-mode autodiff. Tensors are
// 64-bit-float, row-major; ops record parent links on a dynamic tape and
// define exact vector-Jacobian products.

namespace bpoem::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated lazily, same length as value
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    // Propagates this->grad into parents' grads. Null for leaves.
    std::function<void(Node&)> backprop;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : node_(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        n->value.assign(numel(shape), 0.0);
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }

    static Tensor from_values(Shape shape, std::vector<double> values,
                              bool requires_grad = false) {
        if (numel(shape) != values.size())
            throw ValidationError("tensor data length does not match shape " + shape_str(shape));
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->value = std::move(values);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from_values({1}, {v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->value.size(); }
    std::vector<double>& values() { return node_->value; }
    const std::vector<double>& values() const { return node_->value; }
    bool requires_grad() const { return node_->requires_grad; }
    const std::vector<double>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }
    double item() const {
        if (node_->value.size() != 1) throw ValidationError("item() on non-scalar tensor");
        return node_->value[0];
    }
    NodePtr node() const { return node_; }

private:
    NodePtr node_;
};

namespace detail {

inline void check_finite(const Node& n, const char* op) {
    for (double v : n.value) {
        if (!std::isfinite(v))
            throw NumericError(std::string("non-finite value produced by ") + op);
    }
}

inline NodePtr make_result(Shape shape, std::vector<NodePtr> parents, const char* op) {
    auto n = std::make_shared<Node>();
    n->value.assign(numel(shape), 0.0);
    n->shape = std::move(shape);
    for (const auto& p : parents) {
        if (p->requires_grad) {
            n->requires_grad = true;
            break;
        }
    }
    if (n->requires_grad) n->parents = std::move(parents);
    (void)op;
    return n;
}

// Dense kernels. A is (m,k) row-major unless noted. When BLAS is available
// the kernels delegate to dgemm pinned to one thread so runs stay
// bit-reproducible; the loop fallbacks keep the library dependency-free.
#ifdef BPOEM_USE_CBLAS
extern "C" {
void openblas_set_num_threads(int);
void cblas_dgemm(int order, int transa, int transb, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb, double beta, double* c,
                 int ldc);
}
inline void blas_single_thread() {
    static const bool once = [] {
        openblas_set_num_threads(1);
        return true;
    }();
    (void)once;
}
// CBLAS enums: RowMajor=101, NoTrans=111, Trans=112
#endif

// C(m,n) += A(m,k) * B(k,n)
inline void mm_nn(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
                  std::size_t n) {
#ifdef BPOEM_USE_CBLAS
    blas_single_thread();
    cblas_dgemm(101, 111, 111, int(m), int(n), int(k), 1.0, A, int(k), B, int(n), 1.0, C,
                int(n));
#else
    for (std::size_t i = 0; i < m; ++i) {
        const double* a = A + i * k;
        double* c = C + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[p];
            const double* b = B + p * n;
            for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
#endif
}

// C(m,n) += A(m,k) * B(n,k)^T
inline void mm_nt(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
                  std::size_t n) {
#ifdef BPOEM_USE_CBLAS
    blas_single_thread();
    cblas_dgemm(101, 111, 112, int(m), int(n), int(k), 1.0, A, int(k), B, int(k), 1.0, C,
                int(n));
#else
    for (std::size_t i = 0; i < m; ++i) {
        const double* a = A + i * k;
        double* c = C + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* b = B + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += a[p] * b[p];
            c[j] += acc;
        }
    }
#endif
}

// C(m,n) += A(k,m)^T * B(k,n)
inline void mm_tn(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
                  std::size_t n) {
#ifdef BPOEM_USE_CBLAS
    blas_single_thread();
    cblas_dgemm(101, 112, 111, int(m), int(n), int(k), 1.0, A, int(m), B, int(n), 1.0, C,
                int(n));
#else
    for (std::size_t p = 0; p < k; ++p) {
        const double* a = A + p * m;
        const double* b = B + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = a[i];
            double* c = C + i * n;
            for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
#endif
}

struct MatDims {
    std::size_t batch, m, k, n;
};

inline MatDims matmul_dims(const Shape& a, const Shape& b, bool transpose_b) {
    if (a.size() < 2 || b.size() < 2 || a.size() != b.size())
        throw ValidationError("matmul requires two tensors of equal rank >= 2, got " +
                              shape_str(a) + " x " + shape_str(b));
    std::size_t batch = 1;
    for (std::size_t i = 0; i + 2 < a.size(); ++i) {
        if (a[i] != b[i]) throw ValidationError("matmul batch dims mismatch");
        batch *= a[i];
    }
    const std::size_t m = a[a.size() - 2], k = a[a.size() - 1];
    const std::size_t bk = transpose_b ? b[b.size() - 1] : b[b.size() - 2];
    const std::size_t n = transpose_b ? b[b.size() - 2] : b[b.size() - 1];
    if (k != bk)
        throw ValidationError("matmul inner dims mismatch: " + shape_str(a) + " x " +
                              shape_str(b));
    return {batch, m, k, n};
}

}  // namespace detail

// C = A * B, or A * B^T when transpose_b. Ranks must match; leading batch
// dims must be equal.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false) {
    const auto d = detail::matmul_dims(a.shape(), b.shape(), transpose_b);
    Shape out_shape(a.shape().begin(), a.shape().end() - 2);
    out_shape.push_back(d.m);
    out_shape.push_back(d.n);
    auto res = detail::make_result(out_shape, {a.node(), b.node()}, "matmul");

    const auto [batch, m, k, n] = d;
    const double* A = a.values().data();
    const double* B = b.values().data();
    double* C = res->value.data();
    for (std::size_t bi = 0; bi < batch; ++bi) {
        const double* Ab = A + bi * m * k;
        const double* Bb = B + bi * k * n;
        double* Cb = C + bi * m * n;
        if (transpose_b)
            detail::mm_nt(Ab, Bb, Cb, m, k, n);
        else
            detail::mm_nn(Ab, Bb, Cb, m, k, n);
    }
    detail::check_finite(*res, "matmul");

    if (res->requires_grad) {
        auto an = a.node();
        auto bn = b.node();
        res->backprop = [an, bn, batch = d.batch, m, k, n, transpose_b](Node& self) {
            const double* dC = self.grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t bi = 0; bi < batch; ++bi) {
                    const double* dCb = dC + bi * m * n;
                    const double* Bb = bn->value.data() + bi * k * n;
                    double* dAb = an->grad.data() + bi * m * k;
                    if (transpose_b)
                        detail::mm_nn(dCb, Bb, dAb, m, n, k);  // dA = dC * B
                    else
                        detail::mm_nt(dCb, Bb, dAb, m, n, k);  // dA = dC * B^T
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t bi = 0; bi < batch; ++bi) {
                    const double* dCb = dC + bi * m * n;
                    const double* Ab = an->value.data() + bi * m * k;
                    double* dBb = bn->grad.data() + bi * k * n;
                    if (transpose_b)
                        detail::mm_tn(dCb, Ab, dBb, n, m, k);  // dB(n,k) = dC^T * A
                    else
                        detail::mm_tn(Ab, dCb, dBb, k, m, n);  // dB(k,n) = A^T * dC
                }
            }
        };
    }
    return Tensor(res);
}

// Elementwise add. b may either match a's shape or be a suffix of it
// (bias broadcast over leading dims).
inline Tensor add(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    const bool same = sa == sb;
    if (!same) {
        if (sb.size() > sa.size() ||
            !std::equal(sb.rbegin(), sb.rend(), sa.rbegin()))
            throw ValidationError("add: shape " + shape_str(sb) + " does not broadcast over " +
                                  shape_str(sa));
    }
    auto res = detail::make_result(sa, {a.node(), b.node()}, "add");
    const std::size_t nb = b.size();
    if (same) {
        for (std::size_t i = 0; i < res->value.size(); ++i)
            res->value[i] = a.values()[i] + b.values()[i];
    } else {
        // broadcast the trailing-suffix operand without a per-element modulo
        for (std::size_t base = 0; base < res->value.size(); base += nb)
            for (std::size_t j = 0; j < nb; ++j)
                res->value[base + j] = a.values()[base + j] + b.values()[j];
    }
    detail::check_finite(*res, "add");
    if (res->requires_grad) {
        auto an = a.node();
        auto bn = b.node();
        res->backprop = [an, bn, nb](Node& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t base = 0; base < self.grad.size(); base += nb)
                    for (std::size_t j = 0; j < nb; ++j) bn->grad[j] += self.grad[base + j];
            }
        };
    }
    return Tensor(res);
}

// Elementwise product; shapes must match.
inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ValidationError("mul: shape mismatch");
    auto res = detail::make_result(a.shape(), {a.node(), b.node()}, "mul");
    for (std::size_t i = 0; i < res->value.size(); ++i)
        res->value[i] = a.values()[i] * b.values()[i];
    detail::check_finite(*res, "mul");
    if (res->requires_grad) {
        auto an = a.node();
        auto bn = b.node();
        res->backprop = [an, bn](Node& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    an->grad[i] += self.grad[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    bn->grad[i] += self.grad[i] * an->value[i];
            }
        };
    }
    return Tensor(res);
}

inline Tensor scale(const Tensor& a, double c) {
    auto res = detail::make_result(a.shape(), {a.node()}, "scale");
    for (std::size_t i = 0; i < res->value.size(); ++i) res->value[i] = a.values()[i] * c;
    detail::check_finite(*res, "scale");
    if (res->requires_grad) {
        auto an = a.node();
        res->backprop = [an, c](Node& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * c;
        };
    }
    return Tensor(res);
}

// Same data, new shape.
inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size())
        throw ValidationError("reshape: element count mismatch for " + shape_str(shape));
    auto res = detail::make_result(shape, {a.node()}, "reshape");
    res->value = a.values();
    if (res->requires_grad) {
        auto an = a.node();
        res->backprop = [an](Node& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        };
    }
    return Tensor(res);
}

// 4D permutation (0,2,1,3): [a,b,c,d] -> [a,c,b,d]. Self-inverse; used to
// interleave attention heads.
inline Tensor permute_0213(const Tensor& x) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw ValidationError("permute_0213 requires a rank-4 tensor");
    const std::size_t d0 = s[0], d1 = s[1], d2 = s[2], d3 = s[3];
    auto res = detail::make_result({d0, d2, d1, d3}, {x.node()}, "permute");
    const double* in = x.values().data();
    double* out = res->value.data();
    for (std::size_t i0 = 0; i0 < d0; ++i0)
        for (std::size_t i1 = 0; i1 < d1; ++i1)
            for (std::size_t i2 = 0; i2 < d2; ++i2) {
                const double* src = in + ((i0 * d1 + i1) * d2 + i2) * d3;
                double* dst = out + ((i0 * d2 + i2) * d1 + i1) * d3;
                std::copy(src, src + d3, dst);
            }
    if (res->requires_grad) {
        auto xn = x.node();
        res->backprop = [xn, d0, d1, d2, d3](Node& self) {
            xn->ensure_grad();
            const double* g = self.grad.data();
            double* dx = xn->grad.data();
            for (std::size_t i0 = 0; i0 < d0; ++i0)
                for (std::size_t i2 = 0; i2 < d2; ++i2)
                    for (std::size_t i1 = 0; i1 < d1; ++i1) {
                        const double* src = g + ((i0 * d2 + i2) * d1 + i1) * d3;
                        double* dst = dx + ((i0 * d1 + i1) * d2 + i2) * d3;
                        for (std::size_t i3 = 0; i3 < d3; ++i3) dst[i3] += src[i3];
                    }
        };
    }
    return Tensor(res);
}

// Softmax over the last dimension, stabilized by max subtraction.
inline Tensor softmax(const Tensor& x) {
    const Shape& s = x.shape();
    if (s.empty()) throw ValidationError("softmax on empty shape");
    const std::size_t d = s.back();
    const std::size_t rows = x.size() / d;
    auto res = detail::make_result(s, {x.node()}, "softmax");
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.values().data() + r * d;
        double* out = res->value.data() + r * d;
        double mx = in[0];
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            out[j] = std::exp(in[j] - mx);
            sum += out[j];
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < d; ++j) out[j] *= inv;
    }
    detail::check_finite(*res, "softmax");
    if (res->requires_grad) {
        auto xn = x.node();
        res->backprop = [xn, d, rows](Node& self) {
            xn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = self.value.data() + r * d;
                const double* dy = self.grad.data() + r * d;
                double* dx = xn->grad.data() + r * d;
                double dot = 0.0;
                for (std::size_t j = 0; j < d; ++j) dot += dy[j] * y[j];
                for (std::size_t j = 0; j < d; ++j) dx[j] += (dy[j] - dot) * y[j];
            }
        };
    }
    return Tensor(res);
}

// Layer normalization over the last dimension with affine gain/bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
    const Shape& s = x.shape();
    const std::size_t d = s.back();
    if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
        throw ValidationError("layer_norm: gain/bias must match the last dimension");
    const std::size_t rows = x.size() / d;
    auto res = detail::make_result(s, {x.node(), gain.node(), bias.node()}, "layer_norm");
    std::vector<double> rstd(rows), mean(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.values().data() + r * d;
        double m = 0.0;
        for (std::size_t j = 0; j < d; ++j) m += in[j];
        m /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = in[j] - m;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double rs = 1.0 / std::sqrt(var + eps);
        mean[r] = m;
        rstd[r] = rs;
        double* out = res->value.data() + r * d;
        for (std::size_t j = 0; j < d; ++j)
            out[j] = (in[j] - m) * rs * gain.values()[j] + bias.values()[j];
    }
    detail::check_finite(*res, "layer_norm");
    if (res->requires_grad) {
        auto xn = x.node();
        auto gn = gain.node();
        auto bn = bias.node();
        res->backprop = [xn, gn, bn, d, rows, mean = std::move(mean),
                         rstd = std::move(rstd)](Node& self) {
            for (std::size_t r = 0; r < rows; ++r) {
                const double* in = xn->value.data() + r * d;
                const double* dy = self.grad.data() + r * d;
                const double m = mean[r], rs = rstd[r];
                if (gn->requires_grad) {
                    gn->ensure_grad();
                    for (std::size_t j = 0; j < d; ++j)
                        gn->grad[j] += dy[j] * (in[j] - m) * rs;
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (std::size_t j = 0; j < d; ++j) bn->grad[j] += dy[j];
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    double* dx = xn->grad.data() + r * d;
                    // dh = dy * gain, where h = (x - m) * rs
                    double sum_dh = 0.0, sum_dh_h = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double h = (in[j] - m) * rs;
                        const double dh = dy[j] * gn->value[j];
                        sum_dh += dh;
                        sum_dh_h += dh * h;
                    }
                    const double inv_d = 1.0 / static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const double h = (in[j] - m) * rs;
                        const double dh = dy[j] * gn->value[j];
                        dx[j] += rs * (dh - inv_d * sum_dh - h * inv_d * sum_dh_h);
                    }
                }
            }
        };
    }
    return Tensor(res);
}

// Exact GELU: 0.5 x (1 + erf(x / sqrt(2))).
inline Tensor gelu(const Tensor& x) {
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    auto res = detail::make_result(x.shape(), {x.node()}, "gelu");
    for (std::size_t i = 0; i < res->value.size(); ++i) {
        const double v = x.values()[i];
        res->value[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    }
    detail::check_finite(*res, "gelu");
    if (res->requires_grad) {
        auto xn = x.node();
        res->backprop = [xn](Node& self) {
            xn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const double v = xn->value[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                xn->grad[i] += self.grad[i] * (cdf + v * pdf);
            }
        };
    }
    return Tensor(res);
}

// Gathers rows of table (V x H) by id; out shape = ids_shape + [H].
inline Tensor embedding_lookup(const Tensor& table, const std::vector<std::uint32_t>& ids,
                               Shape ids_shape) {
    if (table.shape().size() != 2) throw ValidationError("embedding table must be 2D");
    if (numel(ids_shape) != ids.size())
        throw ValidationError("embedding: ids_shape inconsistent with id count");
    const std::size_t V = table.shape()[0], H = table.shape()[1];
    for (auto id : ids)
        if (id >= V) throw ValidationError("embedding id " + std::to_string(id) + " out of range");
    Shape out_shape = std::move(ids_shape);
    out_shape.push_back(H);
    auto res = detail::make_result(out_shape, {table.node()}, "embedding");
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const double* src = table.values().data() + std::size_t{ids[i]} * H;
        std::copy(src, src + H, res->value.data() + i * H);
    }
    if (res->requires_grad) {
        auto tn = table.node();
        res->backprop = [tn, ids, H](Node& self) {
            tn->ensure_grad();
            for (std::size_t i = 0; i < ids.size(); ++i) {
                const double* g = self.grad.data() + i * H;
                double* dst = tn->grad.data() + std::size_t{ids[i]} * H;
                for (std::size_t j = 0; j < H; ++j) dst[j] += g[j];
            }
        };
    }
    return Tensor(res);
}

// Inverted dropout: zeroes with probability p and scales survivors by
// 1/(1-p) in train mode; identity in eval mode.
inline Tensor dropout(const Tensor& x, double p, Rng& rng, bool train_mode) {
    if (p < 0.0 || p >= 1.0) throw ValidationError("dropout p must be in [0,1)");
    if (!train_mode || p == 0.0) return x;
    auto res = detail::make_result(x.shape(), {x.node()}, "dropout");
    auto keep = std::make_shared<std::vector<char>>(x.size());
    const double scale_up = 1.0 / (1.0 - p);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const bool k = rng.uniform() >= p;
        (*keep)[i] = k;
        res->value[i] = k ? x.values()[i] * scale_up : 0.0;
    }
    if (res->requires_grad) {
        auto xn = x.node();
        res->backprop = [xn, keep, scale_up](Node& self) {
            xn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                if ((*keep)[i]) xn->grad[i] += self.grad[i] * scale_up;
        };
    }
    return Tensor(res);
}

// Scalar sum of all elements.
inline Tensor sum(const Tensor& x) {
    auto res = detail::make_result({1}, {x.node()}, "sum");
    res->value[0] = std::accumulate(x.values().begin(), x.values().end(), 0.0);
    detail::check_finite(*res, "sum");
    if (res->requires_grad) {
        auto xn = x.node();
        res->backprop = [xn](Node& self) {
            xn->ensure_grad();
            for (auto& g : xn->grad) g += self.grad[0];
        };
    }
    return Tensor(res);
}

// Mean over rows selected by mask: x is [B,L,H], mask is B*L entries of 0/1.
// Output [B,H]. Errors if any batch row has an all-zero mask.
inline Tensor masked_mean_rows(const Tensor& x, const std::vector<char>& mask) {
    const Shape& s = x.shape();
    if (s.size() != 3) throw ValidationError("masked_mean_rows requires [B,L,H]");
    const std::size_t B = s[0], L = s[1], H = s[2];
    if (mask.size() != B * L) throw ValidationError("masked_mean_rows: mask size mismatch");
    auto res = detail::make_result({B, H}, {x.node()}, "masked_mean");
    std::vector<double> inv_count(B);
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t cnt = 0;
        for (std::size_t l = 0; l < L; ++l) {
            if (!mask[b * L + l]) continue;
            ++cnt;
            const double* row = x.values().data() + (b * L + l) * H;
            double* out = res->value.data() + b * H;
            for (std::size_t j = 0; j < H; ++j) out[j] += row[j];
        }
        if (cnt == 0) throw ValidationError("masked_mean_rows: batch row has no unmasked positions");
        inv_count[b] = 1.0 / static_cast<double>(cnt);
        double* out = res->value.data() + b * H;
        for (std::size_t j = 0; j < H; ++j) out[j] *= inv_count[b];
    }
    if (res->requires_grad) {
        auto xn = x.node();
        res->backprop = [xn, mask, inv_count = std::move(inv_count), B, L, H](Node& self) {
            xn->ensure_grad();
            for (std::size_t b = 0; b < B; ++b) {
                const double* g = self.grad.data() + b * H;
                for (std::size_t l = 0; l < L; ++l) {
                    if (!mask[b * L + l]) continue;
                    double* dx = xn->grad.data() + (b * L + l) * H;
                    for (std::size_t j = 0; j < H; ++j) dx[j] += g[j] * inv_count[b];
                }
            }
        };
    }
    return Tensor(res);
}

// Mean cross-entropy of logits [N,V] against integer targets, skipping
// positions whose target equals ignore_id. Returns a scalar.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::uint32_t>& targets,
                            std::uint32_t ignore_id) {
    const Shape& s = logits.shape();
    if (s.size() != 2) throw ValidationError("cross_entropy expects [N,V] logits");
    const std::size_t N = s[0], V = s[1];
    if (targets.size() != N) throw ValidationError("cross_entropy: target count mismatch");
    std::size_t active = 0;
    for (auto t : targets) {
        if (t == ignore_id) continue;
        if (t >= V) throw ValidationError("cross_entropy: target id out of range");
        ++active;
    }
    if (active == 0) throw ValidationError("cross_entropy: all targets ignored");

    auto res = detail::make_result({1}, {logits.node()}, "cross_entropy");
    auto probs = std::make_shared<std::vector<double>>(N * V);
    double loss = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        const double* row = logits.values().data() + i * V;
        double* p = probs->data() + i * V;
        double mx = row[0];
        for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < V; ++j) {
            p[j] = std::exp(row[j] - mx);
            sum += p[j];
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < V; ++j) p[j] *= inv;
        if (targets[i] != ignore_id) loss -= std::log(std::max(p[targets[i]], 1e-300));
    }
    res->value[0] = loss / static_cast<double>(active);
    detail::check_finite(*res, "cross_entropy");
    if (res->requires_grad) {
        auto ln = logits.node();
        res->backprop = [ln, probs, targets, ignore_id, N, V, active](Node& self) {
            ln->ensure_grad();
            const double g = self.grad[0] / static_cast<double>(active);
            for (std::size_t i = 0; i < N; ++i) {
                if (targets[i] == ignore_id) continue;
                const double* p = probs->data() + i * V;
                double* dl = ln->grad.data() + i * V;
                for (std::size_t j = 0; j < V; ++j) dl[j] += g * p[j];
                dl[targets[i]] -= g;
            }
        };
    }
    return Tensor(res);
}

// Reverse-mode sweep from a scalar loss. Each reachable node's backprop runs
// exactly once, in reverse topological order; leaf grads accumulate until
// explicitly zeroed. Returns the number of nodes visited.
inline std::size_t backward(const Tensor& loss) {
    if (loss.size() != 1) throw ValidationError("backward requires a scalar loss");
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    // iterative post-order DFS
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        (*it)->ensure_grad();
        if ((*it)->backprop) (*it)->backprop(**it);
    }
    return order.size();
}

// Adam with bias correction; state is owned by the optimizer and keyed by
// insertion order of the registered parameters.
class Adam {
public:
    struct Hyper {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    Adam() = default;
    explicit Adam(Hyper h) : hyper_(h) {}

    Hyper& hyper() { return hyper_; }
    std::uint64_t step_count() const { return step_; }

    // One update over the given parameter tensors (uses each tensor's grad).
    void step(const std::vector<Tensor>& params, double lr_override = -1.0) {
        const double lr = lr_override >= 0.0 ? lr_override : hyper_.lr;
        if (m_.empty()) {
            for (const auto& p : params) {
                m_.emplace_back(p.size(), 0.0);
                v_.emplace_back(p.size(), 0.0);
            }
        }
        if (m_.size() != params.size())
            throw ValidationError("adam: parameter list changed size");
        ++step_;
        const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(step_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto node = params[i].node();
            if (m_[i].size() != node->value.size())
                throw ValidationError("adam: state shape mismatch");
            node->ensure_grad();
            const auto& g = node->grad;
            auto& m = m_[i];
            auto& v = v_[i];
            auto& w = node->value;
            for (std::size_t j = 0; j < w.size(); ++j) {
                m[j] = hyper_.beta1 * m[j] + (1.0 - hyper_.beta1) * g[j];
                v[j] = hyper_.beta2 * v[j] + (1.0 - hyper_.beta2) * g[j] * g[j];
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                w[j] -= lr * mhat / (std::sqrt(vhat) + hyper_.eps);
            }
        }
    }

    const std::vector<std::vector<double>>& first_moments() const { return m_; }
    const std::vector<std::vector<double>>& second_moments() const { return v_; }
    void restore(std::vector<std::vector<double>> m, std::vector<std::vector<double>> v,
                 std::uint64_t step) {
        m_ = std::move(m);
        v_ = std::move(v);
        step_ = step;
    }

private:
    Hyper hyper_;
    std::uint64_t step_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace bpoem::ad
