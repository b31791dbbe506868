#include "hybridwarp/train.hpp"

#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>

#include "hybridwarp/kernels.hpp"
#include "hybridwarp/synth.hpp"

namespace hw {

std::string train_mode_name(TrainMode m) {
    switch (m) {
        case TrainMode::hybrid: return "hybrid";
        case TrainMode::segnet: return "segnet";
        case TrainMode::regnet: return "regnet";
    }
    throw ContractError("unknown train mode");
}

TrainMode train_mode_from_name(const std::string& name) {
    if (name == "hybrid") return TrainMode::hybrid;
    if (name == "segnet") return TrainMode::segnet;
    if (name == "regnet") return TrainMode::regnet;
    throw ContractError("unknown train mode \"" + name + "\"");
}

void TrainConfig::validate() const {
    if (lr <= 0.0) throw ContractError("learning rate must be positive");
    if (iterations < 1) throw ContractError("iterations must be >= 1");
    if (fg_weight < 1.0) throw ContractError("fg_weight must be >= 1");
    weights.validate();
    if (uses_seg()) seg_net.validate();
    if (uses_reg()) reg_net.validate();
}

namespace {

Volume fg_weight_map(const Mask& label, double fg_weight) {
    Volume w(label.shape, 1.0);
    for (size_t i = 0; i < label.data.size(); ++i)
        if (label.data[i]) w.data[i] = fg_weight;
    return w;
}

Ref net_forward(Graph& g, const Volume& in, ParameterSet& params, Head head, BnMode mode,
                bool update_running) {
    Ref x = input(g, in.shape, in.data);
    BoundNet net = bind_net(g, params);
    return unet_forward(g, x, net, params.config, head, mode, update_running);
}

Volume reg_input(const Volume& fa_t, const Volume& fa_s) {
    const Shape s = Shape::volume(2, fa_t.shape.depth(), fa_t.shape.height(), fa_t.shape.width());
    Volume v(s);
    std::copy(fa_t.data.begin(), fa_t.data.end(), v.data.begin());
    std::copy(fa_s.data.begin(), fa_s.data.end(), v.data.begin() + fa_t.numel());
    return v;
}

std::vector<std::span<const double>> collect_grads(Graph& g, const BoundNet& net) {
    std::vector<Ref> refs;
    for (const auto& b : net.blocks) {
        refs.push_back(b.w);
        refs.push_back(b.b);
        refs.push_back(b.scale);
        refs.push_back(b.shift);
    }
    refs.push_back(net.head_w);
    refs.push_back(net.head_b);
    std::vector<std::span<const double>> grads;
    grads.reserve(refs.size());
    for (const Ref& r : refs) grads.emplace_back(g.at(r.id).grad);
    return grads;
}

}  // namespace

void adam_step_set(ParameterSet& params, const std::vector<std::span<const double>>& grads,
                   AdamState& state, const TrainConfig& cfg) {
    auto slots = params.learnable_slots();
    if (grads.size() != slots.size())
        throw ContractError("adam_step_set: gradient count does not match parameter slots");
    if (state.m.size() != slots.size()) {
        state.m.resize(slots.size());
        state.v.resize(slots.size());
        for (size_t i = 0; i < slots.size(); ++i) {
            state.m[i].assign(slots[i].data->size(), 0.0);
            state.v[i].assign(slots[i].data->size(), 0.0);
        }
    }
    for (size_t i = 0; i < slots.size(); ++i) {
        if (grads[i].size() != slots[i].data->size())
            throw ContractError("adam_step_set: gradient size mismatch for " + slots[i].name);
        for (double gv : grads[i])
            if (!std::isfinite(gv))
                throw NumericError("non-finite gradient in " + slots[i].name);
    }
    state.step += 1;
    const kernels::AdamHp hp{cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps};
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.step));
    for (size_t i = 0; i < slots.size(); ++i) {
        kernels::table().adam_step(slots[i].data->data(), grads[i].data(), state.m[i].data(),
                                   state.v[i].data(), static_cast<int64_t>(slots[i].data->size()), hp,
                                   bc1, bc2);
    }
}

LossNodes build_training_step(Graph& g, const TrainConfig& cfg, const PairSample& sample,
                              ParameterSet* seg, ParameterSet* reg, BnMode mode, bool update_running,
                              BoundNet* seg_net_out, BoundNet* reg_net_out) {
    Ref seg_term{}, reg_term{}, def_term{}, cons_term{};
    const Volume* fg_weights = nullptr;
    Volume weights_s, weights_t;
    if (cfg.fg_weight != 1.0) {
        weights_s = fg_weight_map(sample.label_s, cfg.fg_weight);
        weights_t = fg_weight_map(sample.label_t, cfg.fg_weight);
        fg_weights = &weights_s;
    }

    if (cfg.mode == TrainMode::hybrid) {
        Ref tin = input(g, sample.tensor_s.shape, sample.tensor_s.data);
        BoundNet seg_net = bind_net(g, *seg);
        Ref prob_s = unet_forward(g, tin, seg_net, seg->config, Head::softmax, mode, update_running);

        Volume rin_v = reg_input(sample.fa_t, sample.fa_s);
        Ref rin = input(g, rin_v.shape, rin_v.data);
        BoundNet reg_net = bind_net(g, *reg);
        Ref disp = unet_forward(g, rin, reg_net, reg->config, Head::linear, mode, update_running);

        Ref fa_s_node = input(g, sample.fa_s.shape, sample.fa_s.data);
        Ref warped_fa = warp(fa_s_node, disp, Interp::trilinear);
        Ref warped_prob = warp(prob_s, disp, Interp::trilinear);

        seg_term = l_seg(select_channel(prob_s, 1), sample.label_s, fg_weights);
        reg_term = l_reg(warped_fa, sample.fa_t);
        def_term = l_def(disp);
        cons_term = l_cons(select_channel(warped_prob, 1), sample.label_t,
                           fg_weights != nullptr ? &weights_t : nullptr);
        if (seg_net_out != nullptr) *seg_net_out = seg_net;
        if (reg_net_out != nullptr) *reg_net_out = reg_net;
    } else if (cfg.mode == TrainMode::segnet) {
        Ref tin = input(g, sample.tensor_s.shape, sample.tensor_s.data);
        BoundNet seg_net = bind_net(g, *seg);
        Ref prob_s = unet_forward(g, tin, seg_net, seg->config, Head::softmax, mode, update_running);
        seg_term = l_seg(select_channel(prob_s, 1), sample.label_s, fg_weights);
        if (seg_net_out != nullptr) *seg_net_out = seg_net;
    } else {
        Volume rin_v = reg_input(sample.fa_t, sample.fa_s);
        Ref rin = input(g, rin_v.shape, rin_v.data);
        BoundNet reg_net = bind_net(g, *reg);
        Ref disp = unet_forward(g, rin, reg_net, reg->config, Head::linear, mode, update_running);
        Ref fa_s_node = input(g, sample.fa_s.shape, sample.fa_s.data);
        Ref warped_fa = warp(fa_s_node, disp, Interp::trilinear);
        reg_term = l_reg(warped_fa, sample.fa_t);
        def_term = l_def(disp);
        if (reg_net_out != nullptr) *reg_net_out = reg_net;
    }
    return total_loss(seg_term, reg_term, def_term, cons_term, cfg.weights);
}

namespace {

std::string loss_record(int64_t iter, const LossBreakdown& b) {
    std::ostringstream os;
    os.precision(17);
    os << "{\"iter\":" << iter << ",\"seg\":" << b.seg << ",\"reg\":" << b.reg
       << ",\"def\":" << b.def << ",\"cons\":" << b.cons << ",\"total\":" << b.total << "}";
    return os.str();
}

double validation_loss(const TrainConfig& cfg, const DatasetManifest& vali, ParameterSet* seg,
                       ParameterSet* reg) {
    double acc = 0.0;
    for (const auto& entry : vali.samples) {
        PairSample sample = load_sample(vali, entry);
        Graph g;
        LossNodes nodes = build_training_step(g, cfg, sample, seg, reg, BnMode::eval, false);
        acc += nodes.total.value()[0];
    }
    return acc / static_cast<double>(vali.samples.size());
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const DatasetManifest& data, const std::string& out_path,
                  std::ostream* records, const DatasetManifest* vali, const Checkpoint* resume) {
    cfg.validate();
    if (data.samples.empty()) throw ContractError("training dataset is empty");

    Checkpoint state;
    state.config = cfg;
    if (resume != nullptr) {
        if (resume->config.mode != cfg.mode)
            throw ContractError("resume checkpoint mode does not match the requested mode");
        auto same_structure = [](const NetConfig& a, const NetConfig& b) {
            return a.widths == b.widths && a.input_channels == b.input_channels &&
                   a.output_channels == b.output_channels && a.convs_per_level == b.convs_per_level;
        };
        if ((cfg.uses_seg() && !same_structure(resume->config.seg_net, cfg.seg_net)) ||
            (cfg.uses_reg() && !same_structure(resume->config.reg_net, cfg.reg_net)))
            throw ContractError("resume checkpoint network structure does not match the config");
        state = *resume;
        state.config = cfg;
    } else {
        if (cfg.uses_seg()) state.seg = init_params(cfg.seg_net, Role::segmentation);
        if (cfg.uses_reg()) state.reg = init_params(cfg.reg_net, Role::registration);
    }
    ParameterSet* seg = state.seg.has_value() ? &*state.seg : nullptr;
    ParameterSet* reg = state.reg.has_value() ? &*state.reg : nullptr;

    const int64_t n_samples = static_cast<int64_t>(data.samples.size());
    std::vector<int64_t> order(static_cast<size_t>(n_samples));
    int64_t order_epoch = -1;
    auto epoch_order = [&](int64_t epoch) {
        std::iota(order.begin(), order.end(), 0);
        Rng rng(Rng::derive(cfg.seed, 0x9F0C'5EED'0000'0000ULL + static_cast<uint64_t>(epoch)));
        rng.shuffle(order);
        order_epoch = epoch;
    };

    auto save = [&](int64_t iteration) {
        state.iteration = iteration;
        if (!out_path.empty()) checkpoint_save(out_path, state);
    };

    TrainResult result;
    bool first_recorded = false;
    for (int64_t it = state.iteration; it < cfg.iterations; ++it) {
        const int64_t epoch = it / n_samples;
        if (epoch != order_epoch) epoch_order(epoch);
        const auto& entry = data.samples[static_cast<size_t>(order[static_cast<size_t>(it % n_samples)])];
        PairSample sample = load_sample(data, entry);

        Graph g;
        BoundNet seg_net, reg_net;
        LossNodes nodes;
        LossBreakdown breakdown;
        try {
            nodes = build_training_step(g, cfg, sample, seg, reg, BnMode::train, true, &seg_net,
                                        &reg_net);
            breakdown = read_breakdown(nodes, cfg.weights);
            hw::backward(nodes.total);
            if (seg != nullptr) adam_step_set(*seg, collect_grads(g, seg_net), state.adam_seg, cfg);
            if (reg != nullptr) adam_step_set(*reg, collect_grads(g, reg_net), state.adam_reg, cfg);
        } catch (const NumericError& e) {
            // Pre-step parameters are still finite; keep them as the last
            // good checkpoint.
            save(it);
            throw DivergenceError("diverged at iteration " + std::to_string(it) + ": " + e.what());
        }

        if (records != nullptr) *records << loss_record(it, breakdown) << "\n";
        if (!first_recorded) {
            result.first = breakdown;
            first_recorded = true;
        }
        result.last = breakdown;

        const int64_t done = it + 1;
        if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.iterations) {
            save(done);
            if (vali != nullptr && records != nullptr) {
                std::ostringstream os;
                os.precision(17);
                os << "{\"iter\":" << done << ",\"vali_total\":" << validation_loss(cfg, *vali, seg, reg)
                   << "}";
                *records << os.str() << "\n";
            }
        }
    }

    save(cfg.iterations);
    if (vali != nullptr && records != nullptr) {
        std::ostringstream os;
        os.precision(17);
        os << "{\"iter\":" << cfg.iterations
           << ",\"vali_total\":" << validation_loss(cfg, *vali, seg, reg) << "}";
        *records << os.str() << "\n";
    }
    result.checkpoint = std::move(state);
    return result;
}

// ---- evaluation -------------------------------------------------------------

namespace {

struct DirectionResult {
    std::optional<double> acc_s, acc_t, cons, kap, eps, epe;
    bool forward = false;
    std::string pair_id, subject_id;
};

}  // namespace

EvalReport evaluate(Checkpoint& ckpt, const DatasetManifest& data, const EvalOptions& opts) {
    if (data.samples.empty()) throw ContractError("evaluation dataset is empty");
    const TrainMode mode = ckpt.config.mode;
    const bool has_seg = ckpt.seg.has_value();
    const bool has_reg = ckpt.reg.has_value();
    const bool label_consistency = opts.consistency_on_labels.value_or(mode == TrainMode::regnet);
    if (!label_consistency && !has_seg)
        throw ArgError("prediction-based consistency requires a segmenting checkpoint");
    if (!opts.external_disp_dir.has_value() && !has_reg && !label_consistency)
        throw ArgError("no displacement source: provide --external-disp or a registering checkpoint");

    const int64_t n = static_cast<int64_t>(data.samples.size());
    std::vector<DirectionResult> dirs(static_cast<size_t>(n));
    std::vector<std::string> errors(static_cast<size_t>(n));

    parallel_for(n, opts.threads, [&](int64_t begin, int64_t end) {
        for (int64_t i = begin; i < end; ++i) {
            const SampleEntry& entry = data.samples[static_cast<size_t>(i)];
            try {
                PairSample sample = load_sample(data, entry);
                DirectionResult r;
                r.forward = entry.direction == "forward";
                r.pair_id = entry.pair_id;
                r.subject_id = entry.subject_id;
                const bool repro = entry.interval_tag == "short";

                Mask mask_s, mask_t;
                if (has_seg) {
                    Graph g;
                    Ref prob_s = net_forward(g, sample.tensor_s, *ckpt.seg, Head::softmax,
                                             BnMode::eval, false);
                    Graph g2;
                    Ref prob_t = net_forward(g2, sample.tensor_t, *ckpt.seg, Head::softmax,
                                             BnMode::eval, false);
                    mask_s = binarize_node(prob_s);
                    mask_t = binarize_node(prob_t);
                    r.acc_s = dice(mask_s, sample.label_s);
                    r.acc_t = dice(mask_t, sample.label_t);
                }

                std::optional<DisplacementField> field;
                if (opts.external_disp_dir.has_value()) {
                    const std::string path = *opts.external_disp_dir + "/" + entry.id + ".hvol";
                    try {
                        field = hvol_read_disp(path);
                    } catch (const IoError&) {
                        throw MissingInputError("sample " + entry.id +
                                                ": external displacement file missing: " + path);
                    }
                } else if (has_reg) {
                    Graph g;
                    Volume rin = reg_input(sample.fa_t, sample.fa_s);
                    Ref disp = net_forward(g, rin, *ckpt.reg, Head::linear, BnMode::eval, false);
                    field = DisplacementField(disp.shape(), disp.value());
                }

                const Mask& cons_s = label_consistency ? sample.label_s : mask_s;
                const Mask& cons_t = label_consistency ? sample.label_t : mask_t;
                if (field.has_value()) {
                    const Mask warped = warp_mask_nearest(cons_s, *field);
                    r.cons = dice(cons_t, warped);
                    if (repro) r.kap = kappa(cons_t, warped);
                    if (sample.gt_disp.has_value())
                        r.epe = endpoint_error(*field, *sample.gt_disp, nullptr);
                }
                if (repro && cons_s.count() > 0 && cons_t.count() > 0) {
                    const double fa_s_med = tract_median_fa(sample.fa_s, cons_s);
                    const double fa_t_med = tract_median_fa(sample.fa_t, cons_t);
                    r.eps = repro_epsilon_percent(fa_s_med, fa_t_med);
                }
                dirs[static_cast<size_t>(i)] = std::move(r);
            } catch (const std::exception& e) {
                errors[static_cast<size_t>(i)] = e.what();
            }
        }
    });

    for (int64_t i = 0; i < n; ++i)
        if (!errors[static_cast<size_t>(i)].empty())
            throw MissingInputError(errors[static_cast<size_t>(i)]);

    // Group the two directions of each pair into one record, keeping the
    // manifest order of first appearance. Kappa, epsilon and endpoint error
    // are reported from the forward direction when it exists.
    std::vector<PairRecord> records;
    std::map<std::string, size_t> by_pair;
    for (const auto& r : dirs) {
        size_t idx;
        if (auto it = by_pair.find(r.pair_id); it != by_pair.end()) {
            idx = it->second;
        } else {
            idx = records.size();
            by_pair[r.pair_id] = idx;
            PairRecord rec;
            rec.pair_id = r.pair_id;
            rec.subject_id = r.subject_id;
            records.push_back(rec);
        }
        PairRecord& rec = records[idx];
        if (r.forward) {
            rec.dice_accuracy_s = r.acc_s;
            rec.dice_accuracy_t = r.acc_t;
            rec.consistency_fwd = r.cons;
            rec.kappa = r.kap;
            rec.epsilon_percent = r.eps;
            if (r.epe.has_value()) rec.endpoint_error = r.epe;
        } else {
            rec.consistency_bwd = r.cons;
            if (!rec.dice_accuracy_s.has_value()) {
                rec.dice_accuracy_s = r.acc_t;
                rec.dice_accuracy_t = r.acc_s;
            }
            if (!rec.kappa.has_value()) rec.kappa = r.kap;
            if (!rec.epsilon_percent.has_value()) rec.epsilon_percent = r.eps;
            if (!rec.endpoint_error.has_value()) rec.endpoint_error = r.epe;
        }
    }
    return build_report(train_mode_name(mode), std::move(records));
}

}  // namespace hw
