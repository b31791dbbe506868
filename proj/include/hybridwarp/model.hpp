#pragma once

#include <optional>
#include <string>

#include "hybridwarp/nn_ops.hpp"

namespace hw {

enum class Role { segmentation, registration };
enum class Head { softmax, linear };

// U-Net layout. The widths list covers encoder, bottleneck and decoder and
// must have odd length; depth = (len - 1) / 2 resolution halvings, so input
// spatial extents must be divisible by 2^depth.
struct NetConfig {
    std::vector<int64_t> widths{4, 8, 16, 32, 64, 32, 16, 8, 4};
    double leaky_slope = 0.2;
    int64_t input_channels = 1;
    int64_t output_channels = 2;
    int64_t convs_per_level = 2;
    double bn_momentum = 0.9;
    double bn_epsilon = 1e-5;
    uint64_t seed = 0;

    int64_t depth() const { return (static_cast<int64_t>(widths.size()) - 1) / 2; }
    void validate() const;
    void validate_input(const Shape& s) const;
};

// All learnable state of one network plus the batch-norm running buffers.
// Heads have no normalization or nonlinearity: the caller appends softmax
// (segmentation) or nothing (registration).
struct ParameterSet {
    Role role = Role::segmentation;
    NetConfig config;

    struct Block {
        ConvParams conv;
        NormParams norm;
    };
    std::vector<Block> blocks;  // encoder, bottleneck, decoder order
    ConvParams head;

    struct TensorSlot {
        std::string name;
        std::vector<double>* data;
        Shape shape;
    };
    // Learnable tensors in a fixed, documented order (conv weights/bias and
    // norm scale/shift per block, then the head).
    std::vector<TensorSlot> learnable_slots();
    // Learnable slots plus running statistics, for serialization.
    std::vector<TensorSlot> all_slots();
    int64_t learnable_count();
};

// Weights ~ N(0, 2 / (cin * 27)) from the seeded generator, biases zero,
// norm scale 1 / shift 0, running stats (0, 1). The registration head is
// additionally scaled by 1e-3 so the initial transform is near identity.
ParameterSet init_params(const NetConfig& cfg, Role role);

// Parameter nodes of one network bound into a graph.
struct BoundNet {
    struct Block {
        Ref w, b, scale, shift;
        NormParams* norm;
    };
    std::vector<Block> blocks;
    Ref head_w, head_b;
};

BoundNet bind_net(Graph& g, ParameterSet& params);
// Same, but the learnable slot at `slot` is bound to `substitute` instead of
// the stored values (used for whole-network gradient probing).
BoundNet bind_net(Graph& g, ParameterSet& params, size_t slot, Ref substitute);

Ref unet_forward(Graph& g, Ref in, const BoundNet& net, const NetConfig& cfg, Head head,
                 BnMode mode, bool update_running = true);

struct HybridOutput {
    Ref prob_s;       // [2, ...] posterior of the source scan
    Ref disp;         // [3, ...] displacement mapping target coords to source
    Ref warped_fa;    // source FA resampled into target space
    Ref warped_prob;  // source posterior resampled into target space
};

// One joint graph: segmentation of the source tensor image, registration of
// the FA pair (target channel first), and trilinear warps of FA and the
// posterior, so a single backward reaches both parameter sets.
HybridOutput hybrid_forward(Graph& g, const Volume& tensor_s, const Volume& fa_s,
                            const Volume& fa_t, ParameterSet& seg, ParameterSet& reg,
                            BnMode mode, bool update_running = true);

// Foreground = channel 1 strictly above the threshold.
Mask binarize(const Volume& prob, double threshold = 0.5);
Mask binarize_node(Ref prob, double threshold = 0.5);

}  // namespace hw
