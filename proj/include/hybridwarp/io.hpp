#pragma once

#include <optional>
#include <string>
#include <vector>

#include "hybridwarp/metrics.hpp"
#include "hybridwarp/volume.hpp"

namespace hw {

struct Checkpoint;  // defined in train.hpp

// HVOL: minimal binary volume container.
//   magic "HVL1" | ndims u8 (always 4) | dims 4 x u32 LE (C, D, H, W) |
//   dtype u8 | payload, row-major with W fastest.
// dtype 1 = IEEE f32 LE, 2 = IEEE f64 LE, 3 = u8 mask with values in {0, 1}.
enum class HvolDtype : uint8_t { f32 = 1, f64 = 2, mask_u8 = 3 };

constexpr int64_t kHvolHeaderBytes = 22;

void hvol_write(const std::string& path, const Volume& volume, HvolDtype dtype = HvolDtype::f64);
void hvol_write(const std::string& path, const Mask& mask);

struct HvolContent {
    Shape shape;
    HvolDtype dtype;
    std::vector<double> floats;  // filled for dtype 1/2
    std::vector<uint8_t> bytes;  // filled for dtype 3
};

HvolContent hvol_read(const std::string& path);
Volume hvol_read_volume(const std::string& path);
Mask hvol_read_mask(const std::string& path);
// Float file with 3 channels reinterpreted as a displacement field.
DisplacementField hvol_read_disp(const std::string& path);

// Dataset manifest (JSON, schema version "1", unknown fields rejected).
struct SampleEntry {
    std::string id;
    std::string pair_id;
    std::string subject_id;
    std::string split;
    std::string direction;      // "forward" | "backward"
    std::string interval_tag;   // "long" | "short"
    std::string tensor_s, fa_s, label_s;
    std::string tensor_t, fa_t, label_t;
    std::optional<std::string> gt_disp;
    std::optional<double> gt_diffusion_penalty;
};

struct DatasetManifest {
    std::string version = "1";
    uint64_t seed = 0;
    std::string config_json;  // generator config echo, serialized JSON object
    std::vector<SampleEntry> samples;
    std::string base_dir;  // directory of the manifest file; not serialized
};

void manifest_write(const std::string& path, const DatasetManifest& manifest);
DatasetManifest manifest_read(const std::string& path);

void report_write(const std::string& path, const EvalReport& report);
EvalReport report_read(const std::string& path);
std::string report_to_json(const EvalReport& report);

// Single-file checkpoint: magic + u64 JSON preamble length + JSON preamble
// (config echo, iteration, tensor directory with offsets) + concatenated
// f64 LE buffers. Loading validates names, shapes and counts against the
// embedded NetConfigs.
void checkpoint_save(const std::string& path, const Checkpoint& ckpt);
Checkpoint checkpoint_load(const std::string& path);

// Writes via a temp file in the same directory, then renames.
void atomic_write_file(const std::string& path, const std::string& bytes);

}  // namespace hw
