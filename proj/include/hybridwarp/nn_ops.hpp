#pragma once

#include "hybridwarp/graph.hpp"
#include "hybridwarp/volume.hpp"

namespace hw {

// 3x3x3 convolution weights and bias for one layer.
struct ConvParams {
    int64_t cout = 0, cin = 0;
    std::vector<double> weights;  // [cout, cin, 3, 3, 3]
    std::vector<double> bias;     // [cout]

    Shape weight_shape() const { return Shape{cout, cin, 3, 3, 3}; }
    Shape bias_shape() const { return Shape{cout}; }
};

// Per-channel normalization parameters plus running statistics.
// Batch statistics are computed over the spatial extent of the single
// sample (batch size 1); variance is the population form.
struct NormParams {
    int64_t channels = 0;
    std::vector<double> scale;
    std::vector<double> shift;
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double momentum = 0.9;
    double epsilon = 1e-5;
};

enum class BnMode { train, eval };
enum class Interp { trilinear, nearest };

// Stride-1, zero-padded cross-correlation; output spatial shape equals input.
Ref conv3d(Ref input, Ref weights, Ref bias);

// Train mode normalizes with the current sample's statistics and (when
// update_running is set) folds them into the running buffers with
// new = momentum * old + (1 - momentum) * batch. Eval mode normalizes with
// the running statistics.
Ref batch_norm(Ref input, Ref scale, Ref shift, NormParams& params, BnMode mode,
               bool update_running);

// x >= 0 -> x, else slope * x. The derivative at exactly 0 is 1.
Ref leaky_relu(Ref input, double slope = 0.2);

// Non-overlapping 2x2x2 maxima; ties route the gradient to the first
// element of the window in row-major order.
Ref max_pool(Ref input);

// Nearest-neighbor repetition x2 per spatial axis.
Ref upsample(Ref input);

// Per-voxel softmax over channels, stabilized by the per-voxel max.
Ref softmax_channels(Ref input);

// Channel-axis concatenation, a first.
Ref concat_channels(Ref a, Ref b);

// View of channel c as a [1, D, H, W] node.
Ref select_channel(Ref input, int64_t c);

// Spatial transformer: output(c, x) = image(c, x + u(x)), sample coordinates
// clamped to the valid range (edge replication). Trilinear mode is
// differentiable w.r.t. both arguments; nearest mode is evaluation-only and
// stops gradients.
Ref warp(Ref image, Ref disp, Interp interp);

// Mean of squared forward differences of all 3 field components along all
// 3 axes, interior positions only.
Ref diffusion_penalty(Ref disp);

// ---- plain (graph-free) counterparts used by evaluation and the CLI ----

Volume warp_volume(const Volume& image, const DisplacementField& disp, Interp interp);
Mask warp_mask_nearest(const Mask& mask, const DisplacementField& disp);
double diffusion_penalty_value(const DisplacementField& disp);

}  // namespace hw
