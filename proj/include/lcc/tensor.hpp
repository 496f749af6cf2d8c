#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "lcc/errors.hpp"
#include "lcc/rng.hpp"

namespace lcc {

// One vertex of the computation graph. Ops that see a grad-requiring input
// record parents and a pull-back; everything else stays graph-free.
struct TensorNode {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad; // empty until touched; same length as data once allocated
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

// Value-semantics handle over a shared node. Copies alias; use clone() for a
// deep copy. All storage is 64-bit; 32-bit exists only inside artifact files.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value);
    static Tensor from(std::vector<int> shape, std::vector<double> data,
                       bool requires_grad = false);
    static Tensor scalar(double v);
    static Tensor randn(std::vector<int> shape, RngState& rng, double stddev,
                        bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int64_t size() const { return node_->size(); }
    int rows() const { return dim(0); }
    int cols() const { return dim(rank() - 1); }

    std::vector<double>& data() { return node_->data; }
    const std::vector<double>& data() const { return node_->data; }
    double item() const;

    double at(int64_t flat) const { return node_->data[static_cast<size_t>(flat)]; }
    double& at(int64_t flat) { return node_->data[static_cast<size_t>(flat)]; }
    double at2(int r, int c) const { return node_->data[static_cast<size_t>(r) * cols() + c]; }
    double& at2(int r, int c) { return node_->data[static_cast<size_t>(r) * cols() + c]; }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        node_->requires_grad = b;
        return *this;
    }

    bool has_grad() const { return node_ && !node_->grad.empty(); }
    std::vector<double>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    const std::vector<double>& grad() const { return node_->grad; }
    void zero_grad() {
        if (node_) node_->grad.assign(node_->data.size(), 0.0);
    }

    // Reverse-mode pass from a scalar. Leaf grads accumulate across calls;
    // interior grads are per-pass.
    void backward() const;

    Tensor detached() const; // data copy, no graph, no grad requirement
    Tensor clone() const;    // data copy, keeps requires_grad

    TensorNode* node() const { return node_.get(); }
    const std::shared_ptr<TensorNode>& node_ptr() const { return node_; }

    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<TensorNode> node_;
};

// ---- differentiable kernels ------------------------------------------------
// 2-D matrix product a[m×k] · b[k×n].
Tensor matmul(const Tensor& a, const Tensor& b);
// x[t×in] · wᵀ for row-major weight w[out×in]; the projection workhorse.
Tensor linear(const Tensor& x, const Tensor& w);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);        // same shape
Tensor mul(const Tensor& a, const Tensor& b);        // elementwise
Tensor scale(const Tensor& a, double c);
Tensor row_scale(const Tensor& x, std::vector<double> factors); // factors are constants
Tensor silu(const Tensor& x);
Tensor sum(const Tensor& x); // scalar

// Row-wise softmax over the last axis. -inf entries are the reserved mask
// sentinel and map to exactly 0; an all--inf row throws MaskError.
Tensor softmax_rows(const Tensor& x);

// mean over rows of sum_i p_i (log p_i - log_softmax(q)_i). p is consumed as
// plain probabilities (rows must sum to 1 within 1e-9); gradient flows into
// q_logits only.
Tensor kl_divergence(const Tensor& p, const Tensor& q_logits);

// mean over all elements of (pred - target)^2; gradient into pred only.
Tensor mse_loss(const Tensor& target, const Tensor& pred);

// mean negative log-likelihood of targets under logits[t×v].
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

// y_ij = gain_j * x_ij / sqrt(mean_j x_ij^2 + eps)
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps = 1e-6);

// out row t = table row ids[t]; backward scatter-adds into the table.
Tensor embedding_rows(const Tensor& table, std::span<const int> ids);

// Rotary position transform on packed heads: x[t×(n_heads*head_dim)]. Only the
// first rope_dims entries of each head rotate (pair (2j, 2j+1) by angle
// pos_t * base^(-2j/rope_dims)); the rest pass through untouched, leaving a
// position-independent subspace for content matching. rope_dims == 0 rotates
// the whole head.
Tensor rotary(const Tensor& x, std::span<const int> positions, int n_heads,
              int head_dim, double rope_base, int rope_dims = 0);

Tensor slice_rows(const Tensor& x, int r0, int r1); // [r0, r1)
Tensor gather_rows(const Tensor& x, std::span<const int> rows); // arbitrary row pick
Tensor slice_cols(const Tensor& x, int c0, int c1);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);

// ---- non-differentiable helpers ---------------------------------------------
int argmax_lowest(std::span<const double> row); // ties break to the lowest index
bool all_finite(const Tensor& t);

} // namespace lcc
