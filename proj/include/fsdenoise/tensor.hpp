#pragma once

// Minimal reverse-mode automatic differentiation over dense double tensors.
//
// A Tensor is a shared handle to a graph node. Operations on tensors that
// require gradients record a backward closure; calling backward() on a scalar
// result walks the recorded graph in reverse topological order and accumulates
// gradients into every node that requires them. Operations on tensors that do
// not require gradients build no graph, so inference costs only the forward
// arithmetic.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fsdenoise/random.hpp"

namespace fsd::nn {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad; // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    // Gradient buffer, zero-initialised on first use.
    std::vector<double>& grad_buffer();
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t dim(size_t axis) const { return node_->shape.at(axis); }
    int64_t rank() const { return static_cast<int64_t>(node_->shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

    std::span<const double> data() const { return node_->value; }
    std::span<double> mutable_data() { return node_->value; }
    double item() const;

    // Empty span when no gradient has been accumulated.
    std::span<const double> grad() const { return node_->grad; }
    bool requires_grad() const { return node_->requires_grad; }
    void zero_grad() { node_->grad.clear(); }

    // Seeds d(this)/d(this) = 1; this must be a single-element tensor.
    void backward() const;

    // Same values, no graph history.
    Tensor detach() const;
    // Deep copy of values (and requires_grad flag), no graph history.
    Tensor clone() const;

    Node& node() const { return *node_; }
    const std::shared_ptr<Node>& node_ptr() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
    friend Tensor make_result(Shape shape, std::vector<Tensor> inputs);

    std::shared_ptr<Node> node_;
};

// While alive, operations record no graph on this thread.
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

// Creates an output node wired to `inputs`; requires_grad is set if any input
// requires it. Callers attach a backward closure when requires_grad is true.
Tensor make_result(Shape shape, std::vector<Tensor> inputs);

// ---- Convolution family (NCHW, square kernels, zero padding) ---------------

struct ConvGeometry {
    int64_t kernel = 4;
    int64_t stride = 2;
    int64_t padding = 1;
};

int64_t conv_output_size(int64_t input, const ConvGeometry& g);
int64_t conv_transpose_output_size(int64_t input, const ConvGeometry& g);

// x: [B, Cin, H, W], weight: [Cout, Cin, k, k], bias: [Cout] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvGeometry& g);
// x: [B, Cin, H, W], weight: [Cin, Cout, k, k], bias: [Cout] or undefined.
Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvGeometry& g);

// ---- Elementwise and structural ops ----------------------------------------

// Per-sample, per-channel normalisation over H x W, no affine parameters.
Tensor instance_norm(const Tensor& x, double eps = 1e-5);
Tensor leaky_relu(const Tensor& x, double slope);
Tensor relu(const Tensor& x);
// (tanh(x) + 1) / 2, bounded to [0, 1].
Tensor tanh_unit(const Tensor& x);
// Inverted dropout with a mask drawn from rng.
Tensor dropout(const Tensor& x, double rate, Rng& rng);
// Concatenate along axis 1 of two rank-4 tensors with matching B, H, W.
Tensor concat_channels(const Tensor& a, const Tensor& b);
// Rows [begin, end) of axis 0.
Tensor slice_batch(const Tensor& x, int64_t begin, int64_t end);
// Concatenate along axis 0.
Tensor concat_batch(const Tensor& a, const Tensor& b);
// [B, C, H, W] -> [B, C].
Tensor global_avg_pool(const Tensor& x);
// x: [B, in], weight: [out, in], bias: [out] -> [B, out].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
// Each row scaled to unit Euclidean norm.
Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12);

// ---- Scalar plumbing --------------------------------------------------------

// Scalar node with an externally computed value and gradient with respect to
// each input (same length as the input). Used to splice hand-differentiated
// loss functions into the graph.
Tensor external_scalar(double value, std::vector<Tensor> inputs, std::vector<std::vector<double>> grads);
// sum_i weights[i] * terms[i] over scalar tensors.
Tensor weighted_sum(const std::vector<Tensor>& terms, const std::vector<double>& weights);

} // namespace fsd::nn
