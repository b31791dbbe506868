#pragma once

#include "hybridwarp/graph.hpp"
#include "hybridwarp/volume.hpp"

namespace hw {

// Term weights of the composite objective:
//   total = seg + alpha * reg + beta * def + gamma * cons
struct LossWeights {
    double alpha = 10.0;
    double beta = 0.1;
    double gamma = 1.0;

    void validate() const {
        if (alpha < 0 || beta < 0 || gamma < 0) throw ContractError("loss weights must be >= 0");
    }
};

struct LossBreakdown {
    double seg = 0.0, reg = 0.0, def = 0.0, cons = 0.0;
    double total = 0.0;
};

// Soft overlap loss: 1 - 2 <w p, g> / (<w, p> + <w, g> + eps0) with eps0 =
// 1e-6. Differentiable, bounded, and equal to one minus the Dice overlap on
// binary inputs. The voxel weight map defaults to uniform; pass `weights`
// to up-weight regions (e.g. foreground).
Ref overlap_loss(Ref prob_fg, Ref target, Ref weights = {});

// Segmentation accuracy term against the source-space label.
Ref l_seg(Ref prob_fg, const Mask& label, const Volume* weights = nullptr);

// Image similarity term: mean squared error against the target image.
Ref l_reg(Ref warped, const Volume& target);

// Smoothness term: mean of squared first derivatives of the field.
Ref l_def(Ref disp);

// Consistency term: same functional form as l_seg, applied to the warped
// source posterior against the target-space label.
Ref l_cons(Ref warped_prob_fg, const Mask& label_t, const Volume* weights = nullptr);

// Composite objective. Absent terms pass an invalid Ref; total is built as
// seg + alpha*reg + beta*def + gamma*cons over the present terms, in that
// order.
struct LossNodes {
    Ref seg, reg, def, cons;
    Ref total;
};

LossNodes total_loss(Ref seg, Ref reg, Ref def, Ref cons, const LossWeights& w);

// Per-term values for logging. Throws NumericError on non-finite terms.
LossBreakdown read_breakdown(const LossNodes& nodes, const LossWeights& w);

// A mask lifted into the graph as a gradient-free data node.
Ref mask_node(Graph& g, const Mask& mask);

}  // namespace hw
