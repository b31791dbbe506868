#pragma once

#include <array>
#include <optional>
#include <string>

#include "hybridwarp/io.hpp"
#include "hybridwarp/volume.hpp"

namespace hw {

// Longitudinal phantom generator: a curved anisotropic tube (randomized
// centerline, radius 2-4 voxels) on a textured background, deformed between
// time-points by a known smooth displacement field.
struct PhantomConfig {
    std::array<int64_t, 3> size{32, 32, 32};  // D, H, W
    double deform_magnitude = 3.0;            // max |u| component, voxels
    int64_t deform_smoothness = 8;            // box-smoothing radius, voxels
    double noise_sd = 0.02;
    double intensity_drift = 0.05;  // multiplicative per-scan factor range (+-)
    uint64_t seed = 0;
    bool short_interval = false;  // zero deformation (scan-rescan analog)

    void validate() const;
    static PhantomConfig cube(int64_t s) {
        PhantomConfig c;
        c.size = {s, s, s};
        return c;
    }
};

// Tensor channels are the six unique components of the symmetric diffusion
// tensor in the order (Dxx, Dxy, Dxz, Dyy, Dyz, Dzz); FA is the analytic
// fractional anisotropy of that tensor, in [0, 1].
struct Phantom {
    Volume tensor;  // [6, D, H, W]
    Volume fa;      // [1, D, H, W]
    Mask label;
};

// One ordered longitudinal sample pair held in memory.
struct PairSample {
    Volume tensor_s, tensor_t;
    Volume fa_s, fa_t;
    Mask label_s, label_t;
    std::optional<DisplacementField> gt_disp;  // maps target coords into source space
    std::string subject_id;
    std::string pair_id;
    std::string interval_tag;  // "long" | "short"
};

Phantom make_phantom(const PhantomConfig& cfg, uint64_t subject_seed);

// Smoothed white noise rescaled so the max |component| equals
// deform_magnitude (identically zero for magnitude 0).
DisplacementField make_deformation(const PhantomConfig& cfg, uint64_t pair_seed);

// Target scan = source warped by the ground-truth field (trilinear images,
// nearest labels), then per-scan noise and intensity drift on the images
// only, so the label construction identity holds exactly.
PairSample make_pair(const PhantomConfig& cfg, uint64_t pair_index);

// Writes n pairs (both orderings listed as samples) in HVOL format plus the
// manifest. Subject ids are prefixed by the split, keeping splits disjoint
// across invocations. Returns the manifest path.
std::string make_dataset(int64_t n_pairs, const PhantomConfig& cfg, const std::string& split,
                         const std::string& out_dir);

PairSample load_sample(const DatasetManifest& manifest, const SampleEntry& entry);

}  // namespace hw
