#pragma once

#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "hybridwarp/shape.hpp"

namespace hw {

class Graph;
using NodeId = int32_t;

// One value in the computation tape. Nodes are appended in evaluation order,
// so insertion order is a topological order and the backward pass is a
// single reverse sweep.
struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until the backward pass touches it
    bool requires_grad = false;
    bool is_param = false;
    // Propagates this node's grad into its parents' grad buffers.
    std::function<void(Graph&)> backprop;
};

// Dynamic tape rebuilt per forward pass. Construction and backward are
// single-caller; individual kernels may parallelize internally.
class Graph {
public:
    NodeId emplace(Shape shape, std::vector<double> value, bool requires_grad,
                   bool is_param = false, std::function<void(Graph&)> backprop = {});

    Node& at(NodeId id) { return nodes_[static_cast<size_t>(id)]; }
    const Node& at(NodeId id) const { return nodes_[static_cast<size_t>(id)]; }
    int64_t size() const { return static_cast<int64_t>(nodes_.size()); }

    // Grad buffer of a node, allocated as zeros on first use.
    std::vector<double>& grad_of(NodeId id);

    // Reverse sweep from a scalar loss. Seeds d(loss)/d(loss) = 1, visits
    // nodes in exact reverse insertion order, and leaves every parameter
    // node with a populated (possibly all-zero) grad buffer.
    void backward(NodeId loss);

private:
    std::deque<Node> nodes_;
    bool backward_done_ = false;
};

// Lightweight handle used by all graph-building functions.
struct Ref {
    Graph* g = nullptr;
    NodeId id = -1;

    bool valid() const { return g != nullptr && id >= 0; }
    const Shape& shape() const { return g->at(id).shape; }
    const std::vector<double>& value() const { return g->at(id).value; }
    // Gradient after backward; parameter nodes always have one.
    const std::vector<double>& grad() const { return g->at(id).grad; }
    bool requires_grad() const { return g->at(id).requires_grad; }
};

// ---- leaf constructors ----

// Broadcast fill; participates in the graph but never receives gradients.
Ref constant(Graph& g, const Shape& shape, double fill);
// Data leaf without gradient.
Ref input(Graph& g, const Shape& shape, std::span<const double> values);
// Learnable leaf; backward always populates its grad buffer.
Ref param(Graph& g, const Shape& shape, std::span<const double> values);

// ---- element-wise primitives ----

enum class Elementwise { add, sub, mul, square, absdiff };

Ref elementwise(Elementwise kind, Ref a, Ref b = {});
Ref add(Ref a, Ref b);
Ref sub(Ref a, Ref b);
Ref mul(Ref a, Ref b);
Ref square(Ref a);
Ref absdiff(Ref a, Ref b);
// mul * x + add, element-wise with scalar coefficients.
Ref scale_shift(Ref a, double mul, double add);

// ---- reductions and scalar arithmetic ----

Ref reduce_sum(Ref a);
Ref reduce_mean(Ref a);
// Both arguments scalar ([1]).
Ref scalar_div(Ref num, Ref den);

void backward(Ref loss);

// Compares the reverse-mode gradient of f at x0 against central finite
// differences. Returns max over the checked coordinates of
//   |g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|).
// `coords` selects a coordinate subset; empty checks every coordinate.
double finite_diff_check(const Shape& shape, std::span<const double> x0,
                         const std::function<Ref(Graph&, Ref)>& f, double eps,
                         std::span<const int64_t> coords = {});

}  // namespace hw
