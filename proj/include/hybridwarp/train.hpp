#pragma once

#include <iosfwd>
#include <optional>

#include "hybridwarp/io.hpp"
#include "hybridwarp/loss.hpp"
#include "hybridwarp/model.hpp"
#include "hybridwarp/synth.hpp"

namespace hw {

enum class TrainMode { hybrid, segnet, regnet };

std::string train_mode_name(TrainMode m);
TrainMode train_mode_from_name(const std::string& name);

struct TrainConfig {
    TrainMode mode = TrainMode::hybrid;
    LossWeights weights{};
    double lr = 1e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int64_t iterations = 1;
    uint64_t seed = 0;
    int64_t checkpoint_every = 0;  // 0 = final checkpoint only
    double fg_weight = 1.0;        // foreground up-weighting hook for the overlap losses
    NetConfig seg_net;
    NetConfig reg_net;

    bool uses_seg() const { return mode != TrainMode::regnet; }
    bool uses_reg() const { return mode != TrainMode::segnet; }
    void validate() const;
};

// First/second moment buffers per learnable slot plus the shared step count.
struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    int64_t step = 0;
};

struct Checkpoint {
    TrainConfig config;
    int64_t iteration = 0;
    std::optional<ParameterSet> seg;
    std::optional<ParameterSet> reg;
    AdamState adam_seg;
    AdamState adam_reg;
};

// One bias-corrected Adam update over every learnable slot of the set.
// Gradients must be finite; offending slots are named in the error.
void adam_step_set(ParameterSet& params, const std::vector<std::span<const double>>& grads,
                   AdamState& state, const TrainConfig& cfg);

// Builds the forward pass and loss of one training step for the configured
// mode into g. Unused parameter sets may be null; the bound networks are
// returned through the out pointers for gradient collection.
LossNodes build_training_step(Graph& g, const TrainConfig& cfg, const PairSample& sample,
                              ParameterSet* seg, ParameterSet* reg, BnMode mode, bool update_running,
                              BoundNet* seg_net_out = nullptr, BoundNet* reg_net_out = nullptr);

struct TrainResult {
    Checkpoint checkpoint;
    LossBreakdown first;
    LossBreakdown last;
};

// Batch-size-1 optimization over the manifest's ordered samples with seeded
// per-epoch shuffling. Streams one JSON record per iteration to `records`
// when given. Writes the checkpoint to out_path every checkpoint_every
// iterations and at the end; on divergence the pre-step state is saved
// before DivergenceError is thrown. `resume` continues an interrupted run
// bit-identically.
TrainResult train(const TrainConfig& cfg, const DatasetManifest& data, const std::string& out_path,
                  std::ostream* records = nullptr, const DatasetManifest* vali = nullptr,
                  const Checkpoint* resume = nullptr);

struct EvalOptions {
    std::optional<std::string> external_disp_dir;
    // Consistency masks come from network predictions or from the reference
    // labels. Defaults per mode: regnet uses labels, others use predictions.
    std::optional<bool> consistency_on_labels;
    int threads = 1;
};

// Eval-mode forward over every ordered sample; Dice accuracy for
// segmenting modes, bidirectional consistency, kappa and the FA
// reproducibility error on short-interval (repro) pairs, endpoint error
// where a ground-truth field exists. When external_disp_dir is set the
// consistency/kappa/endpoint fields use <dir>/<sample_id>.hvol instead of
// the network's displacement.
EvalReport evaluate(Checkpoint& ckpt, const DatasetManifest& data, const EvalOptions& opts = {});

}  // namespace hw
