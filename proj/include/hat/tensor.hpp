#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace hat {

class Rng;

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

// One vertex of the dynamically recorded compute graph. Nodes are created
// eagerly during the forward pass and their edges are cut after backward();
// parameters are plain leaf nodes that outlive any graph they take part in.
struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until something accumulates into it
    bool requires_grad = false;
    bool consumed = false;  // set once a backward pass has freed this node
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;

    std::size_t size() const { return data.size(); }

    double* grad_ptr() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        return grad.data();
    }
};

}  // namespace detail

// Dense n-dimensional array of 64-bit floats in row-major order, with an
// optional gradient slot. Copying a Tensor copies the handle, not the buffer.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }
    std::size_t size() const { return node_->data.size(); }

    std::vector<double>& data() { return node_->data; }
    const std::vector<double>& data() const { return node_->data; }
    double item() const;
    double at(std::initializer_list<std::size_t> idx) const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }
    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<double>& grad() const;
    std::vector<double>& mutable_grad() { node_->grad_ptr(); return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    // Reverse-mode sweep from a scalar. Fills grads of every reachable node
    // with requires_grad set, then frees the graph; a second call on the same
    // graph is rejected.
    void backward() const;

    Tensor reshape(Shape new_shape) const;
    Tensor transpose(int axis_a, int axis_b) const;
    Tensor permute(std::vector<int> axes) const;
    Tensor sum() const;
    Tensor mean() const;
    Tensor tanh() const;
    Tensor gelu() const;

    detail::Node* node() const { return node_.get(); }
    std::shared_ptr<detail::Node> node_ptr() const { return node_; }
    static Tensor wrap(std::shared_ptr<detail::Node> n) { return Tensor(std::move(n)); }

private:
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
    std::shared_ptr<detail::Node> node_;
};

// elementwise, same shape
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// x: [..., f], bias: [f]
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& x, double c);

// [m,k]x[k,n] -> [m,n]; [B,m,k]x[k,n] -> [B,m,n]; [B,m,k]x[B,k,n] -> [B,m,n]
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor softmax(const Tensor& x, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
Tensor concat(const Tensor& a, const Tensor& b, int axis);
// table: [rows, f]; result: [indices.size(), f]
Tensor embedding_lookup(const Tensor& table, std::span<const int> indices);
// Bernoulli keep-mask scaled by 1/(1-p) while training; identity otherwise.
Tensor dropout(const Tensor& x, double p, bool training, Rng* rng);

// Normalizes each feature over the rows of x: [rows, f]. row_mask (if
// nonempty, length rows) selects the rows entering the batch statistics;
// excluded rows are still normalized with those statistics. Running stats are
// updated only while training.
Tensor batch_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  std::vector<double>& running_mean, std::vector<double>& running_var,
                  double eps, double momentum, bool training,
                  std::span<const std::uint8_t> row_mask = {});

// Rotates feature pairs (2j, 2j+1) of token t by angle t*pair_angles[j].
// x: [T,d] or [B,T,d]; pair_angles.size() == d/2.
Tensor rope(const Tensor& x, std::span<const double> pair_angles);

// Mean over the batch of -sum_v q_v log softmax(logits)_v with the smoothed
// target q_v = eps/V + (1-eps)*[v == label]. logits: [B,V].
Tensor cross_entropy_smoothed(const Tensor& logits, std::span<const int> labels, double eps);

// Repeats x along a new leading batch axis; the backward rule sums over it.
Tensor broadcast_batch(const Tensor& x, std::size_t batch);

// Fused x @ w + bias over the last axis; x: [..., in], w: [in, out], bias: [out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

// Fused scaled-dot-product attention with heads packed into the feature axis:
// head h of width d/n_heads occupies feature block [h*dh, (h+1)*dh).
// q: [B,Tq,d], k/v: [B,Tk,d]. key_valid (empty or B*Tk flags) removes padded
// keys from the softmax. When attn_probs_out is non-null it receives the
// post-softmax weights as a constant [B*n_heads, Tq, Tk] tensor.
Tensor multi_head_attention_core(const Tensor& q, const Tensor& k, const Tensor& v,
                                 std::size_t n_heads, std::span<const std::uint8_t> key_valid,
                                 Tensor* attn_probs_out);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

Tensor rand_uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = false);
Tensor rand_normal(Shape shape, double mean, double stddev, Rng& rng, bool requires_grad = false);

}  // namespace hat
