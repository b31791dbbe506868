#include "hybridwarp/model.hpp"

#include <cmath>

#include "hybridwarp/common.hpp"

namespace hw {

namespace {

struct BlockSpec {
    int64_t cin, cout;
};

// Shared structural derivation: encoder levels, bottleneck, decoder levels
// with skip concatenation, in the order blocks are stored and executed.
std::vector<BlockSpec> block_specs(const NetConfig& cfg) {
    const int64_t levels = cfg.depth();
    const auto& w = cfg.widths;
    std::vector<BlockSpec> specs;
    int64_t prev = cfg.input_channels;
    for (int64_t i = 0; i < levels; ++i)
        for (int64_t k = 0; k < cfg.convs_per_level; ++k) {
            specs.push_back({prev, w[static_cast<size_t>(i)]});
            prev = w[static_cast<size_t>(i)];
        }
    for (int64_t k = 0; k < cfg.convs_per_level; ++k) {
        specs.push_back({prev, w[static_cast<size_t>(levels)]});
        prev = w[static_cast<size_t>(levels)];
    }
    for (int64_t i = 0; i < levels; ++i) {
        const int64_t skip = w[static_cast<size_t>(levels - 1 - i)];
        const int64_t width = w[static_cast<size_t>(levels + 1 + i)];
        specs.push_back({prev + skip, width});
        prev = width;
        for (int64_t k = 1; k < cfg.convs_per_level; ++k) specs.push_back({prev, width});
    }
    return specs;
}

std::string block_name(size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "block%02zu", i);
    return buf;
}

}  // namespace

void NetConfig::validate() const {
    if (widths.empty() || widths.size() % 2 == 0)
        throw ContractError("widths list must have odd length (encoder/bottleneck/decoder)");
    for (int64_t w : widths)
        if (w < 1) throw ContractError("channel widths must be positive");
    if (input_channels < 1 || output_channels < 1) throw ContractError("channel counts must be positive");
    if (convs_per_level < 1) throw ContractError("convs_per_level must be >= 1");
    if (bn_epsilon <= 0.0) throw ContractError("bn_epsilon must be positive");
}

void NetConfig::validate_input(const Shape& s) const {
    const int64_t div = int64_t{1} << depth();
    if (s.channels() != input_channels)
        throw ShapeError("network expects " + std::to_string(input_channels) + " input channels, got " +
                         s.str());
    if (s.depth() % div != 0 || s.height() % div != 0 || s.width() % div != 0)
        throw ShapeError("input spatial extents " + s.str() + " must be divisible by " +
                         std::to_string(div));
}

std::vector<ParameterSet::TensorSlot> ParameterSet::learnable_slots() {
    std::vector<TensorSlot> slots;
    for (size_t i = 0; i < blocks.size(); ++i) {
        auto& b = blocks[i];
        const std::string n = block_name(i);
        slots.push_back({n + ".conv.w", &b.conv.weights, b.conv.weight_shape()});
        slots.push_back({n + ".conv.b", &b.conv.bias, b.conv.bias_shape()});
        slots.push_back({n + ".norm.scale", &b.norm.scale, Shape{b.norm.channels}});
        slots.push_back({n + ".norm.shift", &b.norm.shift, Shape{b.norm.channels}});
    }
    slots.push_back({"head.w", &head.weights, head.weight_shape()});
    slots.push_back({"head.b", &head.bias, head.bias_shape()});
    return slots;
}

std::vector<ParameterSet::TensorSlot> ParameterSet::all_slots() {
    auto slots = learnable_slots();
    for (size_t i = 0; i < blocks.size(); ++i) {
        auto& b = blocks[i];
        const std::string n = block_name(i);
        slots.push_back({n + ".norm.running_mean", &b.norm.running_mean, Shape{b.norm.channels}});
        slots.push_back({n + ".norm.running_var", &b.norm.running_var, Shape{b.norm.channels}});
    }
    return slots;
}

int64_t ParameterSet::learnable_count() {
    int64_t n = 0;
    for (const auto& s : learnable_slots()) n += static_cast<int64_t>(s.data->size());
    return n;
}

ParameterSet init_params(const NetConfig& cfg, Role role) {
    cfg.validate();
    ParameterSet ps;
    ps.role = role;
    ps.config = cfg;
    Rng rng(cfg.seed);

    auto make_conv = [&](const BlockSpec& spec, double extra_scale) {
        ConvParams c;
        c.cin = spec.cin;
        c.cout = spec.cout;
        const double std_dev = std::sqrt(2.0 / static_cast<double>(spec.cin * 27)) * extra_scale;
        c.weights.resize(static_cast<size_t>(spec.cout * spec.cin * 27));
        for (double& v : c.weights) v = rng.normal() * std_dev;
        c.bias.assign(static_cast<size_t>(spec.cout), 0.0);
        return c;
    };

    for (const auto& spec : block_specs(cfg)) {
        ParameterSet::Block b;
        b.conv = make_conv(spec, 1.0);
        b.norm.channels = spec.cout;
        b.norm.scale.assign(static_cast<size_t>(spec.cout), 1.0);
        b.norm.shift.assign(static_cast<size_t>(spec.cout), 0.0);
        b.norm.running_mean.assign(static_cast<size_t>(spec.cout), 0.0);
        b.norm.running_var.assign(static_cast<size_t>(spec.cout), 1.0);
        b.norm.momentum = cfg.bn_momentum;
        b.norm.epsilon = cfg.bn_epsilon;
        ps.blocks.push_back(std::move(b));
    }

    const int64_t head_cin = cfg.widths.back();
    const double head_scale = role == Role::registration ? 1e-3 : 1.0;
    ps.head = make_conv({head_cin, cfg.output_channels}, head_scale);
    return ps;
}

BoundNet bind_net(Graph& g, ParameterSet& params) {
    return bind_net(g, params, static_cast<size_t>(-1), Ref{});
}

BoundNet bind_net(Graph& g, ParameterSet& params, size_t slot, Ref substitute) {
    BoundNet net;
    auto slots = params.learnable_slots();
    std::vector<Ref> refs(slots.size());
    for (size_t i = 0; i < slots.size(); ++i) {
        if (i == slot) {
            if (substitute.shape() != slots[i].shape)
                throw ShapeError("substitute shape mismatch for slot " + slots[i].name);
            refs[i] = substitute;
        } else {
            refs[i] = param(g, slots[i].shape, *slots[i].data);
        }
    }
    for (size_t b = 0; b < params.blocks.size(); ++b) {
        BoundNet::Block blk;
        blk.w = refs[b * 4 + 0];
        blk.b = refs[b * 4 + 1];
        blk.scale = refs[b * 4 + 2];
        blk.shift = refs[b * 4 + 3];
        blk.norm = &params.blocks[b].norm;
        net.blocks.push_back(blk);
    }
    net.head_w = refs[refs.size() - 2];
    net.head_b = refs[refs.size() - 1];
    return net;
}

Ref unet_forward(Graph& g, Ref in, const BoundNet& net, const NetConfig& cfg, Head head,
                 BnMode mode, bool update_running) {
    if (in.g != &g) throw ContractError("input node belongs to a different graph");
    cfg.validate();
    cfg.validate_input(in.shape());
    const int64_t levels = cfg.depth();

    size_t bi = 0;
    auto conv_block = [&](Ref x) {
        const auto& blk = net.blocks[bi++];
        x = conv3d(x, blk.w, blk.b);
        x = batch_norm(x, blk.scale, blk.shift, *blk.norm, mode, update_running);
        return leaky_relu(x, cfg.leaky_slope);
    };

    Ref x = in;
    std::vector<Ref> skips;
    for (int64_t lvl = 0; lvl < levels; ++lvl) {
        for (int64_t k = 0; k < cfg.convs_per_level; ++k) x = conv_block(x);
        skips.push_back(x);
        x = max_pool(x);
    }
    for (int64_t k = 0; k < cfg.convs_per_level; ++k) x = conv_block(x);
    for (int64_t lvl = 0; lvl < levels; ++lvl) {
        x = upsample(x);
        x = concat_channels(x, skips[static_cast<size_t>(levels - 1 - lvl)]);
        for (int64_t k = 0; k < cfg.convs_per_level; ++k) x = conv_block(x);
    }
    if (bi != net.blocks.size()) throw ContractError("network structure does not match parameters");

    x = conv3d(x, net.head_w, net.head_b);
    if (head == Head::softmax) x = softmax_channels(x);
    return x;
}

HybridOutput hybrid_forward(Graph& g, const Volume& tensor_s, const Volume& fa_s,
                            const Volume& fa_t, ParameterSet& seg, ParameterSet& reg,
                            BnMode mode, bool update_running) {
    if (!tensor_s.shape.same_spatial(fa_s.shape) || !fa_s.shape.same_spatial(fa_t.shape))
        throw ShapeError("hybrid_forward: pair volumes must share one spatial shape");
    if (fa_s.shape.channels() != 1 || fa_t.shape.channels() != 1)
        throw ShapeError("hybrid_forward: FA volumes must have one channel");

    HybridOutput out;
    Ref tin = input(g, tensor_s.shape, tensor_s.data);
    BoundNet seg_net = bind_net(g, seg);
    out.prob_s = unet_forward(g, tin, seg_net, seg.config, Head::softmax, mode, update_running);

    // Registration input: target FA first, then source FA.
    const Shape rs = Shape::volume(2, fa_t.shape.depth(), fa_t.shape.height(), fa_t.shape.width());
    std::vector<double> reg_in;
    reg_in.reserve(static_cast<size_t>(rs.numel()));
    reg_in.insert(reg_in.end(), fa_t.data.begin(), fa_t.data.end());
    reg_in.insert(reg_in.end(), fa_s.data.begin(), fa_s.data.end());
    Ref rin = input(g, rs, reg_in);
    BoundNet reg_net = bind_net(g, reg);
    out.disp = unet_forward(g, rin, reg_net, reg.config, Head::linear, mode, update_running);

    Ref fa_s_node = input(g, fa_s.shape, fa_s.data);
    out.warped_fa = warp(fa_s_node, out.disp, Interp::trilinear);
    out.warped_prob = warp(out.prob_s, out.disp, Interp::trilinear);
    return out;
}

Mask binarize(const Volume& prob, double threshold) {
    if (prob.shape.channels() != 2)
        throw ShapeError("binarize expects a 2-channel posterior, got " + prob.shape.str());
    Mask m(Shape::volume(1, prob.shape.depth(), prob.shape.height(), prob.shape.width()));
    const int64_t n = m.numel();
    const double* fg = prob.data.data() + n;  // channel 1 = foreground
    for (int64_t i = 0; i < n; ++i) m.data[static_cast<size_t>(i)] = fg[i] > threshold ? 1 : 0;
    return m;
}

Mask binarize_node(Ref prob, double threshold) {
    Volume v(prob.shape(), prob.value());
    return binarize(v, threshold);
}

}  // namespace hw
