#pragma once

// Minimal reverse-mode automatic differentiation over row-major 2D tensors.
//
// Everything is a matrix: token sets are (tokens x channels), volumes are
// channel-first (channels x voxels), scalars are 1x1. Graph edges are recorded
// only when gradients are enabled on the current thread and some input requires
// a gradient.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "diffusereg/grid.hpp"
#include "diffusereg/kernels.hpp"

namespace dreg::ad {

struct Node {
    int rows = 0;
    int cols = 0;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::size_t size() const { return value.size(); }
    std::vector<double>& ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

using NodePtr = std::shared_ptr<Node>;

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : node_(std::move(n)) {}

    bool defined() const { return static_cast<bool>(node_); }
    int rows() const { return node_->rows; }
    int cols() const { return node_->cols; }
    std::size_t size() const { return node_->value.size(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }

    const std::vector<double>& value() const { return node_->value; }
    std::vector<double>& mutable_value() { return node_->value; }
    const std::vector<double>& grad() const { return node_->ensure_grad(); }
    std::vector<double>& mutable_grad() { return node_->ensure_grad(); }
    void zero_grad() {
        if (node_) node_->grad.assign(node_->value.size(), 0.0);
    }
    double item() const { return node_->value.at(0); }

    const NodePtr& node() const { return node_; }

private:
    NodePtr node_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

Tensor constant(int rows, int cols, std::vector<double> values);
Tensor zeros(int rows, int cols);
/// Leaf tensor that accumulates gradients (a parameter or a probed input).
Tensor variable(int rows, int cols, std::vector<double> values);

/// Builds an op result. `backward` receives the result node; it is dropped when
/// no parent needs a gradient.
Tensor make_op(int rows, int cols, std::vector<double> value, std::vector<Tensor> parents,
               std::function<void(Node&)> backward);

/// Seeds d(loss)/d(loss) = 1 and propagates through the recorded graph.
void backward(const Tensor& loss);

// ---- elementwise and shape ops ------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// s * a + c
Tensor affine(const Tensor& a, double s, double c = 0.0);
/// x (N x C) + v (1 x C) broadcast over rows.
Tensor add_row_vector(const Tensor& x, const Tensor& v);
/// x (C x S) + v (C values) broadcast along each row.
Tensor add_col_vector(const Tensor& x, const Tensor& v);
/// Per-row constant affine on channel-first data: x[c, :] * scale[c] + shift[c].
Tensor channel_affine(const Tensor& x, std::span<const double> scale, std::span<const double> shift);

Tensor gelu(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope = 0.01);

Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, int rows, int cols);
/// Row gather; index -1 yields a zero row.
Tensor gather_rows(const Tensor& x, std::shared_ptr<const std::vector<int>> index);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, int begin, int count);

// ---- layers -------------------------------------------------------------------------

/// x (N x Cin) * w (Cin x Cout) + b (1 x Cout, optional).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {});
/// Row-wise layer norm with per-column affine (gamma, beta are 1 x C).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
/// Row-wise standardization without affine; on channel-first data this is instance norm.
Tensor normalize_rows(const Tensor& x, double eps = 1e-5);
/// 3x3x3 convolution, zero padded; x is Cin x S, w is Cout x (Cin*27), b is Cout x 1.
Tensor conv3(const Tensor& x, const Tensor& w, const Tensor& b, Shape3 s);

/// Layout for window_attention; pointer members are owned here.
struct AttentionPlan {
    kernels::AttentionLayout layout;
    std::vector<std::uint8_t> mask;
    std::vector<int> bias_index;
};

/// Masked windowed multi-head attention over qkv rows; see kernels::AttentionLayout.
/// Returns windows*q_count x C. `bias_table` (heads x entries) may be undefined.
Tensor window_attention(const Tensor& qkv, std::shared_ptr<const AttentionPlan> plan,
                        const Tensor& bias_table);

// ---- reductions ---------------------------------------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// mean((a - b)^2)
Tensor mse(const Tensor& a, const Tensor& b);

}  // namespace dreg::ad
