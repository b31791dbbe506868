#include "hybridwarp/loss.hpp"

#include <cmath>

#include "hybridwarp/nn_ops.hpp"

namespace hw {

namespace {
constexpr double kOverlapEps = 1e-6;
}

Ref mask_node(Graph& g, const Mask& mask) {
    std::vector<double> v(mask.data.begin(), mask.data.end());
    return input(g, mask.shape, v);
}

Ref overlap_loss(Ref prob_fg, Ref target, Ref weights) {
    if (prob_fg.shape() != target.shape())
        throw ShapeError("overlap_loss: prediction " + prob_fg.shape().str() + " vs target " +
                         target.shape().str());
    Ref p = prob_fg;
    Ref t = target;
    if (weights.valid()) {
        p = mul(p, weights);
        t = mul(t, weights);
    }
    Ref inner = reduce_sum(mul(p, t));
    Ref denom = add(add(reduce_sum(p), reduce_sum(t)),
                    constant(*prob_fg.g, Shape::scalar(), kOverlapEps));
    // 1 - 2 * inner / denom
    return scale_shift(scalar_div(inner, denom), -2.0, 1.0);
}

Ref l_seg(Ref prob_fg, const Mask& label, const Volume* weights) {
    Graph& g = *prob_fg.g;
    Ref target = mask_node(g, label);
    Ref w{};
    if (weights != nullptr) w = input(g, weights->shape, weights->data);
    return overlap_loss(prob_fg, target, w);
}

Ref l_reg(Ref warped, const Volume& target) {
    if (warped.shape() != target.shape)
        throw ShapeError("l_reg: warped " + warped.shape().str() + " vs target " + target.shape.str());
    Ref t = input(*warped.g, target.shape, target.data);
    return reduce_mean(square(sub(warped, t)));
}

Ref l_def(Ref disp) { return diffusion_penalty(disp); }

Ref l_cons(Ref warped_prob_fg, const Mask& label_t, const Volume* weights) {
    return l_seg(warped_prob_fg, label_t, weights);
}

LossNodes total_loss(Ref seg, Ref reg, Ref def, Ref cons, const LossWeights& w) {
    w.validate();
    LossNodes nodes;
    nodes.seg = seg;
    nodes.reg = reg;
    nodes.def = def;
    nodes.cons = cons;

    Ref total{};
    auto accumulate = [&](Ref term, double weight) {
        if (!term.valid()) return;
        if (term.shape().numel() != 1) throw ContractError("loss terms must be scalar");
        Ref scaled = weight == 1.0 ? term : scale_shift(term, weight, 0.0);
        total = total.valid() ? add(total, scaled) : scaled;
    };
    accumulate(seg, 1.0);
    accumulate(reg, w.alpha);
    accumulate(def, w.beta);
    accumulate(cons, w.gamma);
    if (!total.valid()) throw ContractError("total_loss requires at least one term");
    nodes.total = total;
    return nodes;
}

LossBreakdown read_breakdown(const LossNodes& nodes, const LossWeights& w) {
    (void)w;
    LossBreakdown b;
    auto get = [](Ref r) { return r.valid() ? r.value()[0] : 0.0; };
    b.seg = get(nodes.seg);
    b.reg = get(nodes.reg);
    b.def = get(nodes.def);
    b.cons = get(nodes.cons);
    b.total = get(nodes.total);
    for (double v : {b.seg, b.reg, b.def, b.cons, b.total})
        if (!std::isfinite(v)) throw NumericError("non-finite loss term");
    return b;
}

}  // namespace hw
