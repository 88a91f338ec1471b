#include "hat/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "hat/rng.hpp"

namespace hat {

using detail::Node;

std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

namespace {

using EigenMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EigenMat>;
using ConstMatMap = Eigen::Map<const EigenMat>;

void check_shape(const Shape& s) {
    if (s.empty()) throw std::invalid_argument("tensor shape must have rank >= 1");
    for (std::size_t d : s)
        if (d == 0) throw std::invalid_argument("tensor dimensions must be positive, got " + shape_str(s));
}

std::shared_ptr<Node> new_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
    check_shape(shape);
    if (shape_size(shape) != data.size())
        throw std::invalid_argument("data length " + std::to_string(data.size()) +
                                    " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return n;
}

// Builds an op node. Parent edges and the backward closure are recorded only
// when some parent needs gradients, so constant subgraphs cost nothing.
Tensor make_op(Shape shape, std::vector<double> data, const char* op,
               std::initializer_list<Tensor> parents, std::function<void(Node&)> backprop) {
    auto n = new_leaf(std::move(shape), std::move(data), false);
    n->op = op;
    for (const Tensor& p : parents)
        if (p.requires_grad()) n->requires_grad = true;
    if (n->requires_grad) {
        for (const Tensor& p : parents) n->parents.push_back(p.node_ptr());
        n->backprop = std::move(backprop);
    }
    return Tensor::wrap(std::move(n));
}

void accumulate(Node& dst, const double* src, std::size_t n) {
    double* g = dst.grad_ptr();
    for (std::size_t i = 0; i < n; ++i) g[i] += src[i];
}

int norm_axis(int axis, std::size_t rank, const char* op) {
    int r = static_cast<int>(rank);
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r)
        throw std::invalid_argument(std::string(op) + ": axis out of range for rank " + std::to_string(rank));
    return axis;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    std::size_t n = shape_size(shape);
    return Tensor(new_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::size_t n = shape_size(shape);
    return Tensor(new_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    return Tensor(new_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

double Tensor::item() const {
    if (size() != 1) throw std::logic_error("item(): tensor has " + std::to_string(size()) + " elements");
    return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) throw std::logic_error("at(): index rank mismatch");
    std::size_t off = 0, i = 0;
    for (std::size_t v : idx) {
        if (v >= node_->shape[i]) throw std::out_of_range("at(): index out of range");
        off = off * node_->shape[i] + v;
        ++i;
    }
    return node_->data[off];
}

const std::vector<double>& Tensor::grad() const {
    if (node_->grad.empty()) throw std::logic_error("grad(): no gradient recorded for this tensor");
    return node_->grad;
}

void Tensor::backward() const {
    if (!defined()) throw std::logic_error("backward() on empty tensor");
    if (size() != 1)
        throw std::logic_error("backward() requires a scalar, got shape " + shape_str(shape()));
    if (node_->consumed)
        throw std::logic_error("backward() called twice on the same graph; re-run the forward pass first");

    // Post-order DFS: every node appears after all of its parents.
    std::vector<Node*> topo;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            topo.push_back(n);
            stack.pop_back();
        }
    }
    for (Node* n : topo)
        if (n->consumed)
            throw std::logic_error("backward(): graph was already freed by a previous backward pass");

    node_->grad.assign(1, 1.0);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node* n = *it;
        if (n->backprop && !n->grad.empty()) n->backprop(*n);
    }
    // Cut the graph loose so intermediate buffers free as handles drop.
    for (Node* n : topo) {
        if (n->backprop) {
            n->backprop = nullptr;
            n->parents.clear();
            n->consumed = true;
        }
    }
    node_->consumed = true;
}

// ---------------------------------------------------------------------------
// shape ops

Tensor Tensor::reshape(Shape new_shape) const {
    check_shape(new_shape);
    if (shape_size(new_shape) != size())
        throw std::invalid_argument("reshape: cannot view " + shape_str(shape()) + " as " + shape_str(new_shape));
    Shape old_shape = shape();
    return make_op(std::move(new_shape), node_->data, "reshape", {*this},
                   [old_shape](Node& self) {
                       accumulate(*self.parents[0], self.grad.data(), self.grad.size());
                   });
}

Tensor Tensor::permute(std::vector<int> axes) const {
    std::size_t r = rank();
    if (axes.size() != r) throw std::invalid_argument("permute: axes rank mismatch");
    std::vector<bool> seen(r, false);
    for (int& a : axes) {
        a = norm_axis(a, r, "permute");
        if (seen[a]) throw std::invalid_argument("permute: repeated axis");
        seen[a] = true;
    }
    const Shape& in_shape = shape();
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[axes[i]];

    std::vector<std::size_t> in_strides(r, 1), out_strides(r, 1);
    for (std::size_t i = r - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * in_shape[i];
    for (std::size_t i = r - 1; i > 0; --i) out_strides[i - 1] = out_strides[i] * out_shape[i];

    // out linear index -> in linear index
    std::vector<std::size_t> gather(size());
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t o = 0; o < size(); ++o) {
        std::size_t in_off = 0;
        for (std::size_t i = 0; i < r; ++i) in_off += idx[i] * in_strides[axes[i]];
        gather[o] = in_off;
        for (std::size_t i = r; i-- > 0;) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
    std::vector<double> out(size());
    const auto& in = node_->data;
    for (std::size_t o = 0; o < out.size(); ++o) out[o] = in[gather[o]];
    return make_op(std::move(out_shape), std::move(out), "permute", {*this},
                   [gather = std::move(gather)](Node& self) {
                       double* pg = self.parents[0]->grad_ptr();
                       for (std::size_t o = 0; o < self.grad.size(); ++o) pg[gather[o]] += self.grad[o];
                   });
}

Tensor Tensor::transpose(int axis_a, int axis_b) const {
    std::size_t r = rank();
    axis_a = norm_axis(axis_a, r, "transpose");
    axis_b = norm_axis(axis_b, r, "transpose");
    std::vector<int> axes(r);
    std::iota(axes.begin(), axes.end(), 0);
    std::swap(axes[axis_a], axes[axis_b]);
    return permute(std::move(axes));
}

// ---------------------------------------------------------------------------
// reductions and pointwise

Tensor Tensor::sum() const {
    double s = std::accumulate(node_->data.begin(), node_->data.end(), 0.0);
    return make_op({1}, {s}, "sum", {*this}, [](Node& self) {
        double g = self.grad[0];
        double* pg = self.parents[0]->grad_ptr();
        for (std::size_t i = 0; i < self.parents[0]->size(); ++i) pg[i] += g;
    });
}

Tensor Tensor::mean() const {
    double s = std::accumulate(node_->data.begin(), node_->data.end(), 0.0);
    double inv_n = 1.0 / static_cast<double>(size());
    return make_op({1}, {s * inv_n}, "mean", {*this}, [inv_n](Node& self) {
        double g = self.grad[0] * inv_n;
        double* pg = self.parents[0]->grad_ptr();
        for (std::size_t i = 0; i < self.parents[0]->size(); ++i) pg[i] += g;
    });
}

Tensor Tensor::tanh() const {
    std::vector<double> out(size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(node_->data[i]);
    return make_op(shape(), std::move(out), "tanh", {*this}, [](Node& self) {
        double* pg = self.parents[0]->grad_ptr();
        for (std::size_t i = 0; i < self.size(); ++i) {
            double y = self.data[i];
            pg[i] += self.grad[i] * (1.0 - y * y);
        }
    });
}

Tensor Tensor::gelu() const {
    // exact erf form: x * Phi(x)
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    std::vector<double> out(size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        double x = node_->data[i];
        out[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
    }
    std::vector<double> saved_x = node_->data;
    return make_op(shape(), std::move(out), "gelu", {*this},
                   [saved_x = std::move(saved_x)](Node& self) {
                       double* pg = self.parents[0]->grad_ptr();
                       for (std::size_t i = 0; i < self.size(); ++i) {
                           double x = saved_x[i];
                           double phi_cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                           double phi_pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                           pg[i] += self.grad[i] * (phi_cdf + x * phi_pdf);
                       }
                   });
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(a.size());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return make_op(a.shape(), std::move(out), "add", {a, b}, [](Node& self) {
        for (int k = 0; k < 2; ++k)
            if (self.parents[k]->requires_grad) accumulate(*self.parents[k], self.grad.data(), self.grad.size());
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(a.size());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return make_op(a.shape(), std::move(out), "mul", {a, b}, [](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) {
            double* g = pa.grad_ptr();
            for (std::size_t i = 0; i < self.size(); ++i) g[i] += self.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
            double* g = pb.grad_ptr();
            for (std::size_t i = 0; i < self.size(); ++i) g[i] += self.grad[i] * pa.data[i];
        }
    });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    if (bias.rank() != 1 || bias.dim(0) != x.shape().back())
        throw std::invalid_argument("add_bias: bias " + shape_str(bias.shape()) +
                                    " does not match last dim of " + shape_str(x.shape()));
    std::size_t f = bias.dim(0);
    std::size_t rows = x.size() / f;
    std::vector<double> out(x.size());
    const auto& xv = x.data();
    const auto& bv = bias.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < f; ++j) out[r * f + j] = xv[r * f + j] + bv[j];
    return make_op(x.shape(), std::move(out), "add_bias", {x, bias}, [f, rows](Node& self) {
        Node& px = *self.parents[0];
        Node& pb = *self.parents[1];
        if (px.requires_grad) accumulate(px, self.grad.data(), self.grad.size());
        if (pb.requires_grad) {
            double* g = pb.grad_ptr();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < f; ++j) g[j] += self.grad[r * f + j];
        }
    });
}

Tensor scale(const Tensor& x, double c) {
    std::vector<double> out(x.size());
    const auto& xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * c;
    return make_op(x.shape(), std::move(out), "scale", {x}, [c](Node& self) {
        double* g = self.parents[0]->grad_ptr();
        for (std::size_t i = 0; i < self.size(); ++i) g[i] += self.grad[i] * c;
    });
}

// ---------------------------------------------------------------------------
// matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    auto fail = [&] {
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(sa) + " x " + shape_str(sb));
    };

    if (sa.size() == 2 && sb.size() == 2) {
        if (sa[1] != sb[0]) fail();
        std::size_t m = sa[0], k = sa[1], n = sb[1];
        std::vector<double> out(m * n);
        ConstMatMap A(a.data().data(), m, k), B(b.data().data(), k, n);
        MatMap(out.data(), m, n).noalias() = A * B;
        return make_op({m, n}, std::move(out), "matmul", {a, b}, [m, k, n](Node& self) {
            Node& pa = *self.parents[0];
            Node& pb = *self.parents[1];
            ConstMatMap dC(self.grad.data(), m, n);
            ConstMatMap A(pa.data.data(), m, k), B(pb.data.data(), k, n);
            if (pa.requires_grad) MatMap(pa.grad_ptr(), m, k).noalias() += dC * B.transpose();
            if (pb.requires_grad) MatMap(pb.grad_ptr(), k, n).noalias() += A.transpose() * dC;
        });
    }
    if (sa.size() == 3 && sb.size() == 2) {
        if (sa[2] != sb[0]) fail();
        std::size_t bsz = sa[0], m = sa[1], k = sa[2], n = sb[1];
        std::vector<double> out(bsz * m * n);
        ConstMatMap A(a.data().data(), bsz * m, k), B(b.data().data(), k, n);
        MatMap(out.data(), bsz * m, n).noalias() = A * B;
        return make_op({bsz, m, n}, std::move(out), "matmul", {a, b}, [bsz, m, k, n](Node& self) {
            Node& pa = *self.parents[0];
            Node& pb = *self.parents[1];
            ConstMatMap dC(self.grad.data(), bsz * m, n);
            ConstMatMap A(pa.data.data(), bsz * m, k), B(pb.data.data(), k, n);
            if (pa.requires_grad) MatMap(pa.grad_ptr(), bsz * m, k).noalias() += dC * B.transpose();
            if (pb.requires_grad) MatMap(pb.grad_ptr(), k, n).noalias() += A.transpose() * dC;
        });
    }
    if (sa.size() == 3 && sb.size() == 3) {
        if (sa[0] != sb[0] || sa[2] != sb[1]) fail();
        std::size_t bsz = sa[0], m = sa[1], k = sa[2], n = sb[2];
        std::vector<double> out(bsz * m * n);
        for (std::size_t i = 0; i < bsz; ++i) {
            ConstMatMap A(a.data().data() + i * m * k, m, k), B(b.data().data() + i * k * n, k, n);
            MatMap(out.data() + i * m * n, m, n).noalias() = A * B;
        }
        return make_op({bsz, m, n}, std::move(out), "matmul", {a, b}, [bsz, m, k, n](Node& self) {
            Node& pa = *self.parents[0];
            Node& pb = *self.parents[1];
            for (std::size_t i = 0; i < bsz; ++i) {
                ConstMatMap dC(self.grad.data() + i * m * n, m, n);
                ConstMatMap A(pa.data.data() + i * m * k, m, k), B(pb.data.data() + i * k * n, k, n);
                if (pa.requires_grad) MatMap(pa.grad_ptr() + i * m * k, m, k).noalias() += dC * B.transpose();
                if (pb.requires_grad) MatMap(pb.grad_ptr() + i * k * n, k, n).noalias() += A.transpose() * dC;
            }
        });
    }
    fail();
    return {};
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (w.rank() != 2)
        throw std::invalid_argument("linear: weight must be rank 2, got " + shape_str(w.shape()));
    std::size_t in = w.dim(0), out = w.dim(1);
    if (x.shape().back() != in || bias.rank() != 1 || bias.dim(0) != out)
        throw std::invalid_argument("linear: incompatible shapes " + shape_str(x.shape()) + " x " +
                                    shape_str(w.shape()) + " + " + shape_str(bias.shape()));
    std::size_t rows = x.size() / in;
    std::vector<double> y(rows * out);
    {
        ConstMatMap X(x.data().data(), rows, in), W(w.data().data(), in, out);
        MatMap Y(y.data(), rows, out);
        Y.noalias() = X * W;
        Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), out);
    }
    Shape out_shape = x.shape();
    out_shape.back() = out;
    return make_op(std::move(out_shape), std::move(y), "linear", {x, w, bias},
                   [rows, in, out](Node& self) {
                       Node& px = *self.parents[0];
                       Node& pw = *self.parents[1];
                       Node& pb = *self.parents[2];
                       ConstMatMap dY(self.grad.data(), rows, out);
                       ConstMatMap X(px.data.data(), rows, in), W(pw.data.data(), in, out);
                       if (px.requires_grad) MatMap(px.grad_ptr(), rows, in).noalias() += dY * W.transpose();
                       if (pw.requires_grad) MatMap(pw.grad_ptr(), in, out).noalias() += X.transpose() * dY;
                       if (pb.requires_grad)
                           Eigen::Map<Eigen::RowVectorXd>(pb.grad_ptr(), out) += dY.colwise().sum();
                   });
}

namespace {
using StridedMap = Eigen::Map<EigenMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const EigenMat, 0, Eigen::OuterStride<>>;
}  // namespace

Tensor multi_head_attention_core(const Tensor& q, const Tensor& k, const Tensor& v,
                                 std::size_t n_heads, std::span<const std::uint8_t> key_valid,
                                 Tensor* attn_probs_out) {
    if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3)
        throw std::invalid_argument("attention: q/k/v must be [B,T,d]");
    std::size_t b = q.dim(0), tq = q.dim(1), d = q.dim(2);
    std::size_t tk = k.dim(1);
    if (k.dim(0) != b || v.dim(0) != b || k.dim(2) != d || v.dim(2) != d || v.dim(1) != tk)
        throw std::invalid_argument("attention: shape mismatch " + shape_str(q.shape()) + " vs " +
                                    shape_str(k.shape()) + " vs " + shape_str(v.shape()));
    if (n_heads == 0 || d % n_heads != 0)
        throw std::invalid_argument("attention: feature width " + std::to_string(d) +
                                    " not divisible by " + std::to_string(n_heads) + " heads");
    if (!key_valid.empty() && key_valid.size() != b * tk)
        throw std::invalid_argument("attention: key mask length mismatch");
    const std::size_t dh = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor probs = Tensor::zeros({b * n_heads, tq, tk});
    std::vector<double> out(b * tq * d);
    const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t h = 0; h < n_heads; ++h) {
            ConstStridedMap Qh(q.data().data() + (i * tq) * d + h * dh, tq, dh, stride);
            ConstStridedMap Kh(k.data().data() + (i * tk) * d + h * dh, tk, dh, stride);
            ConstStridedMap Vh(v.data().data() + (i * tk) * d + h * dh, tk, dh, stride);
            MatMap P(probs.data().data() + (i * n_heads + h) * tq * tk, tq, tk);
            P.noalias() = Qh * Kh.transpose() * scale;
            for (std::size_t r = 0; r < tq; ++r) {
                double* row = probs.data().data() + (i * n_heads + h) * tq * tk + r * tk;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t c = 0; c < tk; ++c)
                    if (key_valid.empty() || key_valid[i * tk + c])
                        mx = std::max(mx, row[c]);
                double denom = 0.0;
                for (std::size_t c = 0; c < tk; ++c) {
                    if (key_valid.empty() || key_valid[i * tk + c]) {
                        row[c] = std::exp(row[c] - mx);
                        denom += row[c];
                    } else {
                        row[c] = 0.0;
                    }
                }
                double inv = 1.0 / denom;
                for (std::size_t c = 0; c < tk; ++c) row[c] *= inv;
            }
            StridedMap Oh(out.data() + (i * tq) * d + h * dh, tq, dh, stride);
            Oh.noalias() = ConstMatMap(probs.data().data() + (i * n_heads + h) * tq * tk, tq, tk) * Vh;
        }
    }
    if (attn_probs_out) *attn_probs_out = probs;

    auto probs_node = probs.node_ptr();
    return make_op({b, tq, d}, std::move(out), "attention", {q, k, v},
                   [b, tq, tk, d, dh, n_heads, scale, probs_node](Node& self) {
                       Node& pq = *self.parents[0];
                       Node& pk = *self.parents[1];
                       Node& pv = *self.parents[2];
                       const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(d));
                       EigenMat dP(tq, tk), dS(tq, tk);
                       for (std::size_t i = 0; i < b; ++i) {
                           for (std::size_t h = 0; h < n_heads; ++h) {
                               ConstMatMap P(probs_node->data.data() + (i * n_heads + h) * tq * tk, tq, tk);
                               ConstStridedMap dO(self.grad.data() + (i * tq) * d + h * dh, tq, dh, stride);
                               ConstStridedMap Qh(pq.data.data() + (i * tq) * d + h * dh, tq, dh, stride);
                               ConstStridedMap Kh(pk.data.data() + (i * tk) * d + h * dh, tk, dh, stride);
                               ConstStridedMap Vh(pv.data.data() + (i * tk) * d + h * dh, tk, dh, stride);
                               if (pv.requires_grad) {
                                   StridedMap dV(pv.grad_ptr() + (i * tk) * d + h * dh, tk, dh, stride);
                                   dV.noalias() += P.transpose() * dO;
                               }
                               dP.noalias() = dO * Vh.transpose();
                               // softmax backward per row
                               for (std::size_t r = 0; r < tq; ++r) {
                                   double dot = dP.row(r).cwiseProduct(P.row(r)).sum();
                                   dS.row(r) = P.row(r).cwiseProduct((dP.row(r).array() - dot).matrix());
                               }
                               if (pq.requires_grad) {
                                   StridedMap dQ(pq.grad_ptr() + (i * tq) * d + h * dh, tq, dh, stride);
                                   dQ.noalias() += dS * Kh * scale;
                               }
                               if (pk.requires_grad) {
                                   StridedMap dK(pk.grad_ptr() + (i * tk) * d + h * dh, tk, dh, stride);
                                   dK.noalias() += dS.transpose() * Qh * scale;
                               }
                           }
                       }
                   });
}

// ---------------------------------------------------------------------------
// softmax / layer norm

Tensor softmax(const Tensor& x, int axis) {
    axis = norm_axis(axis, x.rank(), "softmax");
    const Shape& s = x.shape();
    std::size_t n = s[axis];
    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];

    std::vector<double> out(x.size());
    const auto& xv = x.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            std::size_t base = o * n * inner + in;
            double mx = xv[base];
            for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
            double denom = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                double e = std::exp(xv[base + j * inner] - mx);
                out[base + j * inner] = e;
                denom += e;
            }
            double inv = 1.0 / denom;
            for (std::size_t j = 0; j < n; ++j) out[base + j * inner] *= inv;
        }
    }
    return make_op(s, std::move(out), "softmax", {x}, [n, outer, inner](Node& self) {
        double* pg = self.parents[0]->grad_ptr();
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                std::size_t base = o * n * inner + in;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j)
                    dot += self.grad[base + j * inner] * self.data[base + j * inner];
                for (std::size_t j = 0; j < n; ++j) {
                    std::size_t idx = base + j * inner;
                    pg[idx] += self.data[idx] * (self.grad[idx] - dot);
                }
            }
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    std::size_t f = x.shape().back();
    if (gain.rank() != 1 || gain.dim(0) != f || bias.rank() != 1 || bias.dim(0) != f)
        throw std::invalid_argument("layer_norm: gain/bias must be [" + std::to_string(f) + "]");
    if (eps <= 0) throw std::invalid_argument("layer_norm: eps must be positive");
    std::size_t rows = x.size() / f;

    std::vector<double> out(x.size()), xhat(x.size()), inv_std(rows);
    const auto& xv = x.data();
    const auto& gv = gain.data();
    const auto& bv = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * f;
        double mean = 0.0;
        for (std::size_t j = 0; j < f; ++j) mean += xr[j];
        mean /= static_cast<double>(f);
        double var = 0.0;
        for (std::size_t j = 0; j < f; ++j) {
            double c = xr[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(f);
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < f; ++j) {
            double xh = (xr[j] - mean) * is;
            xhat[r * f + j] = xh;
            out[r * f + j] = xh * gv[j] + bv[j];
        }
    }
    return make_op(x.shape(), std::move(out), "layer_norm", {x, gain, bias},
                   [f, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       Node& px = *self.parents[0];
                       Node& pg = *self.parents[1];
                       Node& pb = *self.parents[2];
                       const auto& gv = pg.data;
                       if (pg.requires_grad) {
                           double* g = pg.grad_ptr();
                           for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t j = 0; j < f; ++j)
                                   g[j] += self.grad[r * f + j] * xhat[r * f + j];
                       }
                       if (pb.requires_grad) {
                           double* g = pb.grad_ptr();
                           for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t j = 0; j < f; ++j) g[j] += self.grad[r * f + j];
                       }
                       if (px.requires_grad) {
                           double* g = px.grad_ptr();
                           for (std::size_t r = 0; r < rows; ++r) {
                               const double* dy = self.grad.data() + r * f;
                               const double* xh = xhat.data() + r * f;
                               double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                               for (std::size_t j = 0; j < f; ++j) {
                                   double dxh = dy[j] * gv[j];
                                   sum_dxhat += dxh;
                                   sum_dxhat_xhat += dxh * xh[j];
                               }
                               double invf = 1.0 / static_cast<double>(f);
                               for (std::size_t j = 0; j < f; ++j) {
                                   double dxh = dy[j] * gv[j];
                                   g[r * f + j] += inv_std[r] *
                                       (dxh - invf * sum_dxhat - xh[j] * invf * sum_dxhat_xhat);
                               }
                           }
                       }
                   });
}

// ---------------------------------------------------------------------------
// concat / embedding / dropout

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
    if (a.rank() != b.rank())
        throw std::invalid_argument("concat: rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    axis = norm_axis(axis, a.rank(), "concat");
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    for (std::size_t i = 0; i < sa.size(); ++i)
        if (static_cast<int>(i) != axis && sa[i] != sb[i])
            throw std::invalid_argument("concat: shapes differ off-axis: " + shape_str(sa) + " vs " + shape_str(sb));

    Shape out_shape = sa;
    out_shape[axis] += sb[axis];
    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= sa[i];
    for (std::size_t i = axis + 1; i < sa.size(); ++i) inner *= sa[i];
    std::size_t wa = sa[axis] * inner, wb = sb[axis] * inner;

    std::vector<double> out(shape_size(out_shape));
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(a.data().data() + o * wa, wa, out.data() + o * (wa + wb));
        std::copy_n(b.data().data() + o * wb, wb, out.data() + o * (wa + wb) + wa);
    }
    return make_op(std::move(out_shape), std::move(out), "concat", {a, b}, [outer, wa, wb](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        for (std::size_t o = 0; o < outer; ++o) {
            const double* g = self.grad.data() + o * (wa + wb);
            if (pa.requires_grad) {
                double* ga = pa.grad_ptr() + o * wa;
                for (std::size_t i = 0; i < wa; ++i) ga[i] += g[i];
            }
            if (pb.requires_grad) {
                double* gb = pb.grad_ptr() + o * wb;
                for (std::size_t i = 0; i < wb; ++i) gb[i] += g[wa + i];
            }
        }
    });
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> indices) {
    if (table.rank() != 2)
        throw std::invalid_argument("embedding_lookup: table must be rank 2, got " + shape_str(table.shape()));
    std::size_t rows = table.dim(0), f = table.dim(1);
    std::vector<int> idx(indices.begin(), indices.end());
    for (int i : idx)
        if (i < 0 || static_cast<std::size_t>(i) >= rows)
            throw std::out_of_range("embedding_lookup: index " + std::to_string(i) + " outside table of " +
                                    std::to_string(rows) + " rows");
    const std::size_t count = idx.size();
    std::vector<double> out(count * f);
    for (std::size_t r = 0; r < count; ++r)
        std::copy_n(table.data().data() + static_cast<std::size_t>(idx[r]) * f, f, out.data() + r * f);
    return make_op({count, f}, std::move(out), "embedding_lookup", {table},
                   [f, idx = std::move(idx)](Node& self) {
                       double* g = self.parents[0]->grad_ptr();
                       for (std::size_t r = 0; r < idx.size(); ++r)
                           for (std::size_t j = 0; j < f; ++j)
                               g[static_cast<std::size_t>(idx[r]) * f + j] += self.grad[r * f + j];
                   });
}

Tensor dropout(const Tensor& x, double p, bool training, Rng* rng) {
    if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0, 1)");
    if (!training || p == 0.0) return x;
    if (!rng) throw std::invalid_argument("dropout: rng required in training mode");
    double inv_keep = 1.0 / (1.0 - p);
    std::vector<double> mask(x.size());
    for (double& m : mask) m = rng->bernoulli(p) ? 0.0 : inv_keep;
    std::vector<double> out(x.size());
    const auto& xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
    return make_op(x.shape(), std::move(out), "dropout", {x}, [mask = std::move(mask)](Node& self) {
        double* g = self.parents[0]->grad_ptr();
        for (std::size_t i = 0; i < self.size(); ++i) g[i] += self.grad[i] * mask[i];
    });
}

// ---------------------------------------------------------------------------
// batch norm

Tensor batch_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  std::vector<double>& running_mean, std::vector<double>& running_var,
                  double eps, double momentum, bool training,
                  std::span<const std::uint8_t> row_mask) {
    if (x.rank() != 2) throw std::invalid_argument("batch_norm: input must be [rows, features]");
    std::size_t rows = x.dim(0), f = x.dim(1);
    if (gain.dim(0) != f || bias.dim(0) != f || running_mean.size() != f || running_var.size() != f)
        throw std::invalid_argument("batch_norm: parameter width mismatch");
    if (!row_mask.empty() && row_mask.size() != rows)
        throw std::invalid_argument("batch_norm: row_mask length mismatch");

    const auto& xv = x.data();
    const auto& gv = gain.data();
    const auto& bv = bias.data();
    std::vector<double> out(x.size());

    if (!training) {
        // deterministic affine map from frozen statistics
        std::vector<double> sc(f), sh(f);
        for (std::size_t j = 0; j < f; ++j) {
            sc[j] = gv[j] / std::sqrt(running_var[j] + eps);
            sh[j] = bv[j] - running_mean[j] * sc[j];
        }
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < f; ++j) out[r * f + j] = xv[r * f + j] * sc[j] + sh[j];
        return make_op(x.shape(), std::move(out), "batch_norm", {x, gain, bias},
                       [f, rows, sc = std::move(sc), rm = running_mean, rv = running_var, eps](Node& self) {
                           Node& px = *self.parents[0];
                           Node& pg = *self.parents[1];
                           Node& pb = *self.parents[2];
                           if (px.requires_grad) {
                               double* g = px.grad_ptr();
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < f; ++j) g[r * f + j] += self.grad[r * f + j] * sc[j];
                           }
                           if (pg.requires_grad) {
                               double* g = pg.grad_ptr();
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < f; ++j) {
                                       double xh = (px.data[r * f + j] - rm[j]) / std::sqrt(rv[j] + eps);
                                       g[j] += self.grad[r * f + j] * xh;
                                   }
                           }
                           if (pb.requires_grad) {
                               double* g = pb.grad_ptr();
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < f; ++j) g[j] += self.grad[r * f + j];
                           }
                       });
    }

    std::vector<std::uint8_t> mask(rows, 1);
    if (!row_mask.empty()) mask.assign(row_mask.begin(), row_mask.end());
    std::size_t n_active = 0;
    for (std::uint8_t m : mask) n_active += m ? 1 : 0;
    if (n_active == 0) throw std::invalid_argument("batch_norm: no active rows in batch");
    double inv_n = 1.0 / static_cast<double>(n_active);

    std::vector<double> mean(f, 0.0), var(f, 0.0), inv_std(f);
    for (std::size_t r = 0; r < rows; ++r)
        if (mask[r])
            for (std::size_t j = 0; j < f; ++j) mean[j] += xv[r * f + j];
    for (std::size_t j = 0; j < f; ++j) mean[j] *= inv_n;
    for (std::size_t r = 0; r < rows; ++r)
        if (mask[r])
            for (std::size_t j = 0; j < f; ++j) {
                double c = xv[r * f + j] - mean[j];
                var[j] += c * c;
            }
    for (std::size_t j = 0; j < f; ++j) {
        var[j] *= inv_n;
        inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
    }
    for (std::size_t j = 0; j < f; ++j) {
        running_mean[j] = (1.0 - momentum) * running_mean[j] + momentum * mean[j];
        running_var[j] = (1.0 - momentum) * running_var[j] + momentum * var[j];
    }
    std::vector<double> xhat(x.size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < f; ++j) {
            double xh = (xv[r * f + j] - mean[j]) * inv_std[j];
            xhat[r * f + j] = xh;
            out[r * f + j] = xh * gv[j] + bv[j];
        }

    return make_op(x.shape(), std::move(out), "batch_norm", {x, gain, bias},
                   [f, rows, inv_n, mask = std::move(mask), xhat = std::move(xhat),
                    inv_std = std::move(inv_std)](Node& self) {
                       Node& px = *self.parents[0];
                       Node& pg = *self.parents[1];
                       Node& pb = *self.parents[2];
                       const auto& gv = pg.data;
                       if (pg.requires_grad) {
                           double* g = pg.grad_ptr();
                           for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t j = 0; j < f; ++j)
                                   g[j] += self.grad[r * f + j] * xhat[r * f + j];
                       }
                       if (pb.requires_grad) {
                           double* g = pb.grad_ptr();
                           for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t j = 0; j < f; ++j) g[j] += self.grad[r * f + j];
                       }
                       if (px.requires_grad) {
                           // Statistics come from masked rows, but every row's
                           // output depends on them, so the mean/variance terms
                           // sum dy over all rows.
                           std::vector<double> sum_dy(f, 0.0), sum_dy_xhat(f, 0.0);
                           for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t j = 0; j < f; ++j) {
                                   double dxh = self.grad[r * f + j] * gv[j];
                                   sum_dy[j] += dxh;
                                   sum_dy_xhat[j] += dxh * xhat[r * f + j];
                               }
                           double* g = px.grad_ptr();
                           for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t j = 0; j < f; ++j) {
                                   double dxh = self.grad[r * f + j] * gv[j];
                                   double v = dxh;
                                   if (mask[r]) v -= inv_n * (sum_dy[j] + xhat[r * f + j] * sum_dy_xhat[j]);
                                   g[r * f + j] += v * inv_std[j];
                               }
                       }
                   });
}

// ---------------------------------------------------------------------------
// rotary encoding

Tensor rope(const Tensor& x, std::span<const double> pair_angles) {
    if (x.rank() != 2 && x.rank() != 3)
        throw std::invalid_argument("rope: expected [T,d] or [B,T,d], got " + shape_str(x.shape()));
    std::size_t d = x.shape().back();
    if (d % 2 != 0) throw std::invalid_argument("rope: feature dimension must be even, got " + std::to_string(d));
    std::size_t pairs = d / 2;
    if (pair_angles.size() != pairs)
        throw std::invalid_argument("rope: expected " + std::to_string(pairs) + " pair angles");
    std::size_t t_len = x.rank() == 2 ? x.dim(0) : x.dim(1);
    std::size_t batch = x.rank() == 2 ? 1 : x.dim(0);

    std::vector<double> angles(pair_angles.begin(), pair_angles.end());
    std::vector<double> out(x.size());
    const auto& xv = x.data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < t_len; ++t) {
            const double* row = xv.data() + (b * t_len + t) * d;
            double* orow = out.data() + (b * t_len + t) * d;
            for (std::size_t j = 0; j < pairs; ++j) {
                double phi = static_cast<double>(t) * angles[j];
                double c = std::cos(phi), s = std::sin(phi);
                double e = row[2 * j], o = row[2 * j + 1];
                orow[2 * j] = e * c - o * s;
                orow[2 * j + 1] = e * s + o * c;
            }
        }
    }
    return make_op(x.shape(), std::move(out), "rope", {x},
                   [batch, t_len, pairs, d, angles = std::move(angles)](Node& self) {
                       double* g = self.parents[0]->grad_ptr();
                       for (std::size_t b = 0; b < batch; ++b)
                           for (std::size_t t = 0; t < t_len; ++t) {
                               const double* dy = self.grad.data() + (b * t_len + t) * d;
                               double* gr = g + (b * t_len + t) * d;
                               for (std::size_t j = 0; j < pairs; ++j) {
                                   // transpose of the rotation
                                   double phi = static_cast<double>(t) * angles[j];
                                   double c = std::cos(phi), s = std::sin(phi);
                                   gr[2 * j] += dy[2 * j] * c + dy[2 * j + 1] * s;
                                   gr[2 * j + 1] += -dy[2 * j] * s + dy[2 * j + 1] * c;
                               }
                           }
                   });
}

// ---------------------------------------------------------------------------
// loss

Tensor cross_entropy_smoothed(const Tensor& logits, std::span<const int> labels, double eps) {
    if (logits.rank() != 2)
        throw std::invalid_argument("cross_entropy: logits must be [batch, vocab]");
    std::size_t bsz = logits.dim(0), v = logits.dim(1);
    if (labels.size() != bsz)
        throw std::invalid_argument("cross_entropy: got " + std::to_string(labels.size()) + " labels for batch " +
                                    std::to_string(bsz));
    if (eps < 0.0 || eps >= 1.0) throw std::invalid_argument("cross_entropy: smoothing must be in [0, 1)");
    std::vector<int> lab(labels.begin(), labels.end());
    for (int y : lab)
        if (y < 0 || static_cast<std::size_t>(y) >= v)
            throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                                    std::to_string(v) + ")");

    const auto& ov = logits.data();
    std::vector<double> probs(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < bsz; ++i) {
        const double* row = ov.data() + i * v;
        double mx = row[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
        double lse = mx + std::log(denom);
        double row_sum = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            probs[i * v + j] = std::exp(row[j] - lse);
            row_sum += row[j];
        }
        // -sum_v q_v (o_v - lse) with q = eps/V + (1-eps) one_hot
        total += lse - (1.0 - eps) * row[lab[i]] - (eps / static_cast<double>(v)) * row_sum;
    }
    double loss = total / static_cast<double>(bsz);
    return make_op({1}, {loss}, "cross_entropy", {logits},
                   [bsz, v, eps, lab = std::move(lab), probs = std::move(probs)](Node& self) {
                       double g0 = self.grad[0] / static_cast<double>(bsz);
                       double* g = self.parents[0]->grad_ptr();
                       double unif = eps / static_cast<double>(v);
                       for (std::size_t i = 0; i < bsz; ++i)
                           for (std::size_t j = 0; j < v; ++j) {
                               double q = unif + (static_cast<std::size_t>(lab[i]) == j ? 1.0 - eps : 0.0);
                               g[i * v + j] += g0 * (probs[i * v + j] - q);
                           }
                   });
}

Tensor broadcast_batch(const Tensor& x, std::size_t batch) {
    if (batch == 0) throw std::invalid_argument("broadcast_batch: batch must be positive");
    Shape out_shape;
    out_shape.reserve(x.rank() + 1);
    out_shape.push_back(batch);
    for (std::size_t d : x.shape()) out_shape.push_back(d);
    std::size_t n = x.size();
    std::vector<double> out(batch * n);
    for (std::size_t b = 0; b < batch; ++b) std::copy_n(x.data().data(), n, out.data() + b * n);
    return make_op(std::move(out_shape), std::move(out), "broadcast_batch", {x}, [batch, n](Node& self) {
        double* g = self.parents[0]->grad_ptr();
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[b * n + i];
    });
}

// ---------------------------------------------------------------------------
// random init

Tensor rand_uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad) {
    std::size_t n = shape_size(shape);
    std::vector<double> data(n);
    for (double& x : data) x = rng.uniform(lo, hi);
    return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

Tensor rand_normal(Shape shape, double mean, double stddev, Rng& rng, bool requires_grad) {
    std::size_t n = shape_size(shape);
    std::vector<double> data(n);
    for (double& x : data) x = mean + stddev * rng.normal();
    return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

}  // namespace hat
