#include "hybridwarp/graph.hpp"

#include <cmath>

#include "hybridwarp/kernels.hpp"

namespace hw {

NodeId Graph::emplace(Shape shape, std::vector<double> value, bool requires_grad, bool is_param,
                      std::function<void(Graph&)> backprop) {
    if (static_cast<int64_t>(value.size()) != shape.numel())
        throw ShapeError("node value length does not match shape " + shape.str());
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.is_param = is_param;
    n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

std::vector<double>& Graph::grad_of(NodeId id) {
    Node& n = at(id);
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
}

void Graph::backward(NodeId loss) {
    if (backward_done_) throw ContractError("backward already ran on this graph");
    Node& l = at(loss);
    if (l.shape.numel() != 1) throw ContractError("backward requires a scalar loss, got " + l.shape.str());
    backward_done_ = true;
    for (auto& n : nodes_)
        if (n.is_param && n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    grad_of(loss)[0] = 1.0;
    for (NodeId id = static_cast<NodeId>(nodes_.size()) - 1; id >= 0; --id) {
        Node& n = at(id);
        if (!n.grad.empty() && n.backprop) n.backprop(*this);
    }
}

void backward(Ref loss) { loss.g->backward(loss.id); }

namespace {

const Shape& same_shape(Ref a, Ref b, const char* what) {
    if (a.g != b.g) throw ContractError("operands live in different graphs");
    if (a.shape() != b.shape())
        throw ShapeError(std::string(what) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
    return a.shape();
}

}  // namespace

Ref constant(Graph& g, const Shape& shape, double fill) {
    std::vector<double> v(static_cast<size_t>(shape.numel()), fill);
    return {&g, g.emplace(shape, std::move(v), false)};
}

Ref input(Graph& g, const Shape& shape, std::span<const double> values) {
    return {&g, g.emplace(shape, std::vector<double>(values.begin(), values.end()), false)};
}

Ref param(Graph& g, const Shape& shape, std::span<const double> values) {
    return {&g, g.emplace(shape, std::vector<double>(values.begin(), values.end()), true, true)};
}

Ref add(Ref a, Ref b) {
    const Shape& s = same_shape(a, b, "add");
    const auto& k = kernels::table();
    std::vector<double> out(a.value().size());
    k.ew_add(a.value().data(), b.value().data(), out.data(), s.numel());
    Graph& g = *a.g;
    const bool rg = a.requires_grad() || b.requires_grad();
    NodeId id = g.emplace(s, std::move(out), rg);
    if (rg) {
        g.at(id).backprop = [id, a, b](Graph& gr) {
            const auto& grad = gr.at(id).grad;
            const int64_t n = static_cast<int64_t>(grad.size());
            if (gr.at(a.id).requires_grad)
                kernels::table().axpy(1.0, grad.data(), gr.grad_of(a.id).data(), n);
            if (gr.at(b.id).requires_grad)
                kernels::table().axpy(1.0, grad.data(), gr.grad_of(b.id).data(), n);
        };
    }
    return {&g, id};
}

Ref sub(Ref a, Ref b) {
    const Shape& s = same_shape(a, b, "sub");
    const auto& k = kernels::table();
    std::vector<double> out(a.value().size());
    k.ew_sub(a.value().data(), b.value().data(), out.data(), s.numel());
    Graph& g = *a.g;
    const bool rg = a.requires_grad() || b.requires_grad();
    NodeId id = g.emplace(s, std::move(out), rg);
    if (rg) {
        g.at(id).backprop = [id, a, b](Graph& gr) {
            const auto& grad = gr.at(id).grad;
            const int64_t n = static_cast<int64_t>(grad.size());
            if (gr.at(a.id).requires_grad)
                kernels::table().axpy(1.0, grad.data(), gr.grad_of(a.id).data(), n);
            if (gr.at(b.id).requires_grad)
                kernels::table().axpy(-1.0, grad.data(), gr.grad_of(b.id).data(), n);
        };
    }
    return {&g, id};
}

Ref mul(Ref a, Ref b) {
    const Shape& s = same_shape(a, b, "mul");
    const auto& k = kernels::table();
    std::vector<double> out(a.value().size());
    k.ew_mul(a.value().data(), b.value().data(), out.data(), s.numel());
    Graph& g = *a.g;
    const bool rg = a.requires_grad() || b.requires_grad();
    NodeId id = g.emplace(s, std::move(out), rg);
    if (rg) {
        g.at(id).backprop = [id, a, b](Graph& gr) {
            const auto& grad = gr.at(id).grad;
            const int64_t n = static_cast<int64_t>(grad.size());
            if (gr.at(a.id).requires_grad)
                kernels::table().mul_scaled_acc(grad.data(), gr.at(b.id).value.data(),
                                                gr.grad_of(a.id).data(), n, 1.0);
            if (gr.at(b.id).requires_grad)
                kernels::table().mul_scaled_acc(grad.data(), gr.at(a.id).value.data(),
                                                gr.grad_of(b.id).data(), n, 1.0);
        };
    }
    return {&g, id};
}

Ref square(Ref a) {
    const Shape s = a.shape();
    std::vector<double> out(a.value().size());
    kernels::table().ew_square(a.value().data(), out.data(), s.numel());
    Graph& g = *a.g;
    const bool rg = a.requires_grad();
    NodeId id = g.emplace(s, std::move(out), rg);
    if (rg) {
        g.at(id).backprop = [id, a](Graph& gr) {
            const auto& grad = gr.at(id).grad;
            kernels::table().mul_scaled_acc(grad.data(), gr.at(a.id).value.data(),
                                            gr.grad_of(a.id).data(),
                                            static_cast<int64_t>(grad.size()), 2.0);
        };
    }
    return {&g, id};
}

Ref absdiff(Ref a, Ref b) {
    const Shape& s = same_shape(a, b, "absdiff");
    std::vector<double> out(a.value().size());
    kernels::table().ew_absdiff(a.value().data(), b.value().data(), out.data(), s.numel());
    Graph& g = *a.g;
    const bool rg = a.requires_grad() || b.requires_grad();
    NodeId id = g.emplace(s, std::move(out), rg);
    if (rg) {
        // Subgradient 0 where a == b.
        g.at(id).backprop = [id, a, b](Graph& gr) {
            const auto& grad = gr.at(id).grad;
            const auto& av = gr.at(a.id).value;
            const auto& bv = gr.at(b.id).value;
            const bool need_a = gr.at(a.id).requires_grad;
            const bool need_b = gr.at(b.id).requires_grad;
            double* ga = need_a ? gr.grad_of(a.id).data() : nullptr;
            double* gb = need_b ? gr.grad_of(b.id).data() : nullptr;
            for (size_t i = 0; i < grad.size(); ++i) {
                const double d = av[i] - bv[i];
                const double sgn = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                if (need_a) ga[i] += grad[i] * sgn;
                if (need_b) gb[i] -= grad[i] * sgn;
            }
        };
    }
    return {&g, id};
}

Ref elementwise(Elementwise kind, Ref a, Ref b) {
    switch (kind) {
        case Elementwise::add: return add(a, b);
        case Elementwise::sub: return sub(a, b);
        case Elementwise::mul: return mul(a, b);
        case Elementwise::square:
            if (b.valid()) throw ContractError("square is unary");
            return square(a);
        case Elementwise::absdiff: return absdiff(a, b);
    }
    throw ContractError("unknown elementwise kind");
}

Ref scale_shift(Ref a, double mul_c, double add_c) {
    const Shape s = a.shape();
    std::vector<double> out(a.value().size());
    kernels::table().scale_shift(a.value().data(), out.data(), s.numel(), mul_c, add_c);
    Graph& g = *a.g;
    const bool rg = a.requires_grad();
    NodeId id = g.emplace(s, std::move(out), rg);
    if (rg) {
        g.at(id).backprop = [id, a, mul_c](Graph& gr) {
            const auto& grad = gr.at(id).grad;
            kernels::table().axpy(mul_c, grad.data(), gr.grad_of(a.id).data(),
                                  static_cast<int64_t>(grad.size()));
        };
    }
    return {&g, id};
}

Ref reduce_sum(Ref a) {
    Graph& g = *a.g;
    const double total = kernels::sum(a.value().data(), a.shape().numel());
    const bool rg = a.requires_grad();
    NodeId id = g.emplace(Shape::scalar(), {total}, rg);
    if (rg) {
        g.at(id).backprop = [id, a](Graph& gr) {
            const double gl = gr.at(id).grad[0];
            auto& ga = gr.grad_of(a.id);
            for (double& v : ga) v += gl;
        };
    }
    return {&g, id};
}

Ref reduce_mean(Ref a) {
    Graph& g = *a.g;
    const int64_t n = a.shape().numel();
    const double total = kernels::sum(a.value().data(), n) / static_cast<double>(n);
    const bool rg = a.requires_grad();
    NodeId id = g.emplace(Shape::scalar(), {total}, rg);
    if (rg) {
        g.at(id).backprop = [id, a, n](Graph& gr) {
            const double gl = gr.at(id).grad[0] / static_cast<double>(n);
            auto& ga = gr.grad_of(a.id);
            for (double& v : ga) v += gl;
        };
    }
    return {&g, id};
}

Ref scalar_div(Ref num, Ref den) {
    if (num.shape().numel() != 1 || den.shape().numel() != 1)
        throw ShapeError("scalar_div requires scalar operands");
    if (num.g != den.g) throw ContractError("operands live in different graphs");
    Graph& g = *num.g;
    const double a = num.value()[0];
    const double b = den.value()[0];
    const bool rg = num.requires_grad() || den.requires_grad();
    NodeId id = g.emplace(Shape::scalar(), {a / b}, rg);
    if (rg) {
        g.at(id).backprop = [id, num, den](Graph& gr) {
            const double gl = gr.at(id).grad[0];
            const double a = gr.at(num.id).value[0];
            const double b = gr.at(den.id).value[0];
            if (gr.at(num.id).requires_grad) gr.grad_of(num.id)[0] += gl / b;
            if (gr.at(den.id).requires_grad) gr.grad_of(den.id)[0] -= gl * a / (b * b);
        };
    }
    return {&g, id};
}

double finite_diff_check(const Shape& shape, std::span<const double> x0,
                         const std::function<Ref(Graph&, Ref)>& f, double eps,
                         std::span<const int64_t> coords) {
    if (eps <= 0.0) throw ContractError("finite_diff_check requires eps > 0");
    if (static_cast<int64_t>(x0.size()) != shape.numel())
        throw ShapeError("finite_diff_check: x0 length does not match shape");

    std::vector<double> g_ad;
    {
        Graph g;
        Ref x = param(g, shape, x0);
        Ref loss = f(g, x);
        if (loss.shape().numel() != 1) throw ContractError("finite_diff_check requires a scalar-valued f");
        if (!std::isfinite(loss.value()[0])) throw NumericError("finite_diff_check: non-finite loss value");
        backward(loss);
        g_ad = x.grad();
    }

    auto eval = [&](const std::vector<double>& x) {
        Graph g;
        Ref xr = input(g, shape, x);
        const double v = f(g, xr).value()[0];
        if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite loss during probing");
        return v;
    };

    std::vector<int64_t> all;
    if (coords.empty()) {
        all.resize(x0.size());
        for (size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int64_t>(i);
        coords = all;
    }

    std::vector<double> x(x0.begin(), x0.end());
    double worst = 0.0;
    for (int64_t i : coords) {
        const double keep = x[static_cast<size_t>(i)];
        x[static_cast<size_t>(i)] = keep + eps;
        const double fp = eval(x);
        x[static_cast<size_t>(i)] = keep - eps;
        const double fm = eval(x);
        x[static_cast<size_t>(i)] = keep;
        const double g_fd = (fp - fm) / (2.0 * eps);
        const double ga = g_ad[static_cast<size_t>(i)];
        if (!std::isfinite(ga) || !std::isfinite(g_fd))
            throw NumericError("finite_diff_check: non-finite gradient");
        const double rel = std::fabs(ga - g_fd) / std::max(1e-12, std::fabs(ga) + std::fabs(g_fd));
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace hw
