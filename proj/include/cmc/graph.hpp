#pragma once

#include <functional>
#include <stdexcept>
#include <vector>

#include "cmc/tensor.hpp"

namespace cmc {

// Reverse-mode tape. Nodes are appended in forward order, so walking the tape
// backwards visits every node after all of its children (reverse topological
// order, each node exactly once).
class Graph {
public:
    using NodeId = int;
    using BackwardFn = std::function<void(Graph&, NodeId)>;

    NodeId leaf(Tensor value, bool requires_grad) {
        return push(std::move(value), requires_grad, {}, nullptr);
    }

    NodeId constant(Tensor value) { return leaf(std::move(value), false); }

    NodeId push(Tensor value, bool needs_grad, std::vector<NodeId> parents, BackwardFn fn) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        n.parents = std::move(parents);
        n.backward_fn = std::move(fn);
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size()) - 1;
    }

    const Tensor& value(NodeId id) const { return nodes_[static_cast<size_t>(id)].value; }
    Tensor& value_mut(NodeId id) { return nodes_[static_cast<size_t>(id)].value; }

    bool needs_grad(NodeId id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

    bool has_grad(NodeId id) const { return !nodes_[static_cast<size_t>(id)].grad.data.empty(); }

    // Gradient accumulator, allocated (zero) on first touch.
    Tensor& grad(NodeId id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
        return n.grad;
    }

    // Reverse pass from a scalar loss node.
    void backward(NodeId loss) {
        if (value(loss).numel() != 1)
            throw std::invalid_argument("backward: loss must be scalar");
        grad(loss)[0] = 1.0;
        for (NodeId id = loss; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (n.backward_fn && !n.grad.data.empty()) n.backward_fn(*this, id);
        }
    }

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::vector<NodeId> parents;
        BackwardFn backward_fn;
        bool needs_grad = false;
    };

    std::vector<Node> nodes_;
};

using NodeId = Graph::NodeId;

// ---- elementwise / reduction ops ----

NodeId op_add(Graph& g, NodeId a, NodeId b);
NodeId op_sub(Graph& g, NodeId a, NodeId b);
NodeId op_scale(Graph& g, NodeId a, double s);
NodeId op_add_scalar_nodes(Graph& g, NodeId a, NodeId b); // scalar + scalar
NodeId op_sum(Graph& g, NodeId a);                        // full reduction -> [1]
NodeId op_sum_squares(Graph& g, NodeId a);                // sum(a_i^2) -> [1]
NodeId op_sum_squared_diff(Graph& g, NodeId a, const Tensor& target); // sum((a-t)^2) -> [1]

// ---- structured ops ----

// Cross-correlation with zero "same" padding: pad = (k-1)/2 on each side,
// output extent ceil(in/stride). x:[N,Cin,H,W], w:[Cout,Cin,kh,kw], b:[Cout] or -1.
NodeId op_conv2d(Graph& g, NodeId x, NodeId w, NodeId b, int stride);

// Adjoint of op_conv2d: maps [N,Ca,H,W] -> [N,Cb,H*stride,W*stride] with
// w:[Ca,Cb,kh,kw], b:[Cb] or -1.
NodeId op_conv2d_transposed(Graph& g, NodeId x, NodeId w, NodeId b, int stride);

// Nearest-neighbour upsampling by integer factor (2 or 4).
NodeId op_upsample_nearest(Graph& g, NodeId x, int factor);

// Per-channel parametric ReLU; slope:[C].
NodeId op_prelu(Graph& g, NodeId x, NodeId slope);

// Batch normalization over (N,H,W) per channel. In train mode batch statistics
// are used and running stats updated in place; eval mode normalizes with the
// running stats. gamma/beta:[C].
NodeId op_batch_norm(Graph& g, NodeId x, NodeId gamma, NodeId beta, Tensor& running_mean,
                     Tensor& running_var, bool train, double eps = 1e-5, double momentum = 0.1);

// ---- raw kernels (shared by ops; also usable without a tape) ----

void conv2d_accumulate(const Tensor& x, const Tensor& w, int stride, Tensor& out);
void conv2d_grad_input_accumulate(const Tensor& gout, const Tensor& w, int stride, Tensor& gin);
void conv2d_grad_kernel_accumulate(const Tensor& x, const Tensor& gout, int stride, Tensor& gw);
void upsample_accumulate(const Tensor& x, int factor, Tensor& out);
void upsample_grad_accumulate(const Tensor& gout, int factor, Tensor& gin);

} // namespace cmc
