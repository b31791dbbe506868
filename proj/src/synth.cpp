#include "hybridwarp/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include <json.hpp>

#include "hybridwarp/common.hpp"
#include "hybridwarp/nn_ops.hpp"

namespace hw {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;

void box_smooth_axis(std::vector<double>& v, int64_t d, int64_t h, int64_t w, int axis,
                     int64_t radius) {
    std::vector<double> out(v.size());
    auto idx = [&](int64_t z, int64_t y, int64_t x) { return (z * h + y) * w + x; };
    for (int64_t z = 0; z < d; ++z) {
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                const int64_t n = axis == 0 ? w : (axis == 1 ? h : d);
                const int64_t p = axis == 0 ? x : (axis == 1 ? y : z);
                const int64_t lo = std::max<int64_t>(0, p - radius);
                const int64_t hi = std::min<int64_t>(n - 1, p + radius);
                double acc = 0.0;
                for (int64_t q = lo; q <= hi; ++q) {
                    acc += axis == 0 ? v[idx(z, y, q)] : (axis == 1 ? v[idx(z, q, x)] : v[idx(q, y, x)]);
                }
                out[idx(z, y, x)] = acc / static_cast<double>(hi - lo + 1);
            }
        }
    }
    v.swap(out);
}

// White noise smoothed separably, then min-max normalized to [0, 1].
std::vector<double> smooth_noise01(Rng& rng, int64_t d, int64_t h, int64_t w, int64_t radius) {
    std::vector<double> v(static_cast<size_t>(d * h * w));
    for (double& x : v) x = rng.uniform(-1.0, 1.0);
    for (int pass = 0; pass < 2; ++pass)
        for (int axis = 0; axis < 3; ++axis) box_smooth_axis(v, d, h, w, axis, radius);
    const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
    const double lo = *mn, span = *mx - *mn;
    if (span > 0.0)
        for (double& x : v) x = (x - lo) / span;
    return v;
}

// Axial eigenvalue `a` (with radial eigenvalues 1) whose fractional
// anisotropy |a - 1| / sqrt(a^2 + 2) equals f.
double axial_eigenvalue_for_fa(double f) {
    const double f2 = f * f;
    return (1.0 + std::sqrt(3.0 * f2 - 2.0 * f2 * f2)) / (1.0 - f2);
}

struct Centerline {
    std::vector<std::array<double, 3>> points;    // (x, y, z)
    std::vector<std::array<double, 3>> tangents;  // unit
};

Centerline make_centerline(Rng& rng, int64_t d, int64_t h, int64_t w, double margin) {
    const double cy = static_cast<double>(h - 1) / 2.0;
    const double cz = static_cast<double>(d - 1) / 2.0;
    const double max_ay = std::max(0.5, cy - margin - 1.0);
    const double max_az = std::max(0.5, cz - margin - 1.0);
    const double ay = rng.uniform(0.4 * max_ay, max_ay);
    const double az = rng.uniform(0.4 * max_az, max_az);
    const double wy = rng.uniform(0.8, 1.6) * kPi;
    const double wz = rng.uniform(0.8, 1.6) * kPi;
    const double phy = rng.uniform(0.0, 2.0 * kPi);
    const double phz = rng.uniform(0.0, 2.0 * kPi);
    const double x0 = margin, x1 = static_cast<double>(w - 1) - margin;

    Centerline c;
    const int64_t steps = 4 * std::max({d, h, w});
    c.points.reserve(static_cast<size_t>(steps + 1));
    c.tangents.reserve(static_cast<size_t>(steps + 1));
    for (int64_t i = 0; i <= steps; ++i) {
        const double t = static_cast<double>(i) / static_cast<double>(steps);
        const double px = x0 + t * (x1 - x0);
        const double py = cy + ay * std::sin(wy * t + phy);
        const double pz = cz + az * std::sin(wz * t + phz);
        const double dx = x1 - x0;
        const double dy = ay * wy * std::cos(wy * t + phy);
        const double dz = az * wz * std::cos(wz * t + phz);
        const double norm = std::sqrt(dx * dx + dy * dy + dz * dz);
        c.points.push_back({px, py, pz});
        c.tangents.push_back({dx / norm, dy / norm, dz / norm});
    }
    return c;
}

}  // namespace

void PhantomConfig::validate() const {
    for (int64_t s : size)
        if (s < 8) throw ContractError("phantom extents must be >= 8 voxels");
    if (deform_magnitude < 0.0) throw ContractError("deform_magnitude must be >= 0");
    if (deform_smoothness < 1) throw ContractError("deform_smoothness must be >= 1");
    if (noise_sd < 0.0 || intensity_drift < 0.0)
        throw ContractError("noise and drift levels must be >= 0");
}

Phantom make_phantom(const PhantomConfig& cfg, uint64_t subject_seed) {
    cfg.validate();
    const int64_t d = cfg.size[0], h = cfg.size[1], w = cfg.size[2];
    const int64_t min_dim = std::min({d, h, w});
    Rng rng(subject_seed);

    const double max_radius = std::clamp(static_cast<double>(min_dim) / 8.0, 2.0, 4.0);
    const double radius = rng.uniform(2.0, max_radius);
    const double margin = max_radius + 2.0;
    const Centerline line = make_centerline(rng, d, h, w, margin);

    // Background anisotropy direction, constant per subject.
    std::array<double, 3> bg_dir;
    {
        double n2 = 0.0;
        for (auto& v : bg_dir) {
            v = rng.normal();
            n2 += v * v;
        }
        const double n = std::sqrt(std::max(n2, 1e-12));
        for (auto& v : bg_dir) v /= n;
    }

    const int64_t texture_radius = std::max<int64_t>(2, min_dim / 8);
    const std::vector<double> fa_tex_in = smooth_noise01(rng, d, h, w, texture_radius);
    const std::vector<double> fa_tex_out = smooth_noise01(rng, d, h, w, texture_radius);
    const std::vector<double> trace_tex = smooth_noise01(rng, d, h, w, texture_radius);

    Phantom ph;
    ph.tensor = Volume(Shape::volume(6, d, h, w));
    ph.fa = Volume(Shape::volume(1, d, h, w));
    ph.label = Mask(Shape::volume(1, d, h, w));

    const int64_t m = d * h * w;
    int64_t v = 0;
    for (int64_t z = 0; z < d; ++z) {
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x, ++v) {
                double best = std::numeric_limits<double>::infinity();
                size_t best_i = 0;
                for (size_t i = 0; i < line.points.size(); ++i) {
                    const double dx = static_cast<double>(x) - line.points[i][0];
                    const double dy = static_cast<double>(y) - line.points[i][1];
                    const double dz = static_cast<double>(z) - line.points[i][2];
                    const double d2 = dx * dx + dy * dy + dz * dz;
                    if (d2 < best) {
                        best = d2;
                        best_i = i;
                    }
                }
                const bool inside = best <= radius * radius;
                ph.label.data[static_cast<size_t>(v)] = inside ? 1 : 0;

                const double f = inside ? 0.6 + 0.2 * fa_tex_in[static_cast<size_t>(v)]
                                        : 0.05 + 0.25 * fa_tex_out[static_cast<size_t>(v)];
                const std::array<double, 3>& dir = inside ? line.tangents[best_i] : bg_dir;
                const double a = axial_eigenvalue_for_fa(f);
                const double s = 0.9 + 0.2 * trace_tex[static_cast<size_t>(v)];
                const double delta = s * (a - 1.0);
                // D = s * I + delta * dir dir^T, components (xx, xy, xz, yy, yz, zz)
                ph.tensor.data[static_cast<size_t>(0 * m + v)] = s + delta * dir[0] * dir[0];
                ph.tensor.data[static_cast<size_t>(1 * m + v)] = delta * dir[0] * dir[1];
                ph.tensor.data[static_cast<size_t>(2 * m + v)] = delta * dir[0] * dir[2];
                ph.tensor.data[static_cast<size_t>(3 * m + v)] = s + delta * dir[1] * dir[1];
                ph.tensor.data[static_cast<size_t>(4 * m + v)] = delta * dir[1] * dir[2];
                ph.tensor.data[static_cast<size_t>(5 * m + v)] = s + delta * dir[2] * dir[2];
                ph.fa.data[static_cast<size_t>(v)] = f;
            }
        }
    }
    return ph;
}

DisplacementField make_deformation(const PhantomConfig& cfg, uint64_t pair_seed) {
    cfg.validate();
    const int64_t d = cfg.size[0], h = cfg.size[1], w = cfg.size[2];
    DisplacementField disp(Shape::volume(3, d, h, w));
    if (cfg.deform_magnitude == 0.0) return disp;

    Rng rng(pair_seed);
    const int64_t m = d * h * w;
    double max_abs = 0.0;
    for (int comp = 0; comp < 3; ++comp) {
        std::vector<double> field(static_cast<size_t>(m));
        for (double& x : field) x = rng.uniform(-1.0, 1.0);
        for (int pass = 0; pass < 3; ++pass)
            for (int axis = 0; axis < 3; ++axis)
                box_smooth_axis(field, d, h, w, axis, cfg.deform_smoothness);
        std::copy(field.begin(), field.end(), disp.data.begin() + comp * m);
    }
    for (double x : disp.data) max_abs = std::max(max_abs, std::fabs(x));
    const double scale = cfg.deform_magnitude / max_abs;
    for (double& x : disp.data) x *= scale;
    return disp;
}

namespace {

void apply_scan_noise(Volume& tensor, Volume& fa, const PhantomConfig& cfg, uint64_t seed) {
    Rng rng(seed);
    const double drift = 1.0 + rng.uniform(-cfg.intensity_drift, cfg.intensity_drift);
    for (double& x : tensor.data) x = x * drift + cfg.noise_sd * rng.normal();
    for (double& x : fa.data)
        x = std::clamp(x * drift + cfg.noise_sd * rng.normal(), 0.0, 1.0);
}

}  // namespace

PairSample make_pair(const PhantomConfig& cfg, uint64_t pair_index) {
    cfg.validate();
    const uint64_t subject_seed = Rng::derive(cfg.seed, pair_index * 4 + 0);
    const uint64_t deform_seed = Rng::derive(cfg.seed, pair_index * 4 + 1);
    const uint64_t noise_seed_s = Rng::derive(cfg.seed, pair_index * 4 + 2);
    const uint64_t noise_seed_t = Rng::derive(cfg.seed, pair_index * 4 + 3);

    PhantomConfig pair_cfg = cfg;
    if (cfg.short_interval) pair_cfg.deform_magnitude = 0.0;

    Phantom ph = make_phantom(pair_cfg, subject_seed);
    DisplacementField disp = make_deformation(pair_cfg, deform_seed);

    PairSample pair;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "p%04llu", static_cast<unsigned long long>(pair_index));
    pair.pair_id = buf;
    std::snprintf(buf, sizeof(buf), "subj%04llu", static_cast<unsigned long long>(pair_index));
    pair.subject_id = buf;
    pair.interval_tag = cfg.short_interval ? "short" : "long";

    pair.tensor_s = ph.tensor;
    pair.fa_s = ph.fa;
    pair.label_s = ph.label;
    pair.tensor_t = warp_volume(ph.tensor, disp, Interp::trilinear);
    pair.fa_t = warp_volume(ph.fa, disp, Interp::trilinear);
    pair.label_t = warp_mask_nearest(ph.label, disp);
    pair.gt_disp = std::move(disp);

    // Noise and drift come after warping so the label identity stays exact.
    apply_scan_noise(pair.tensor_s, pair.fa_s, pair_cfg, noise_seed_s);
    apply_scan_noise(pair.tensor_t, pair.fa_t, pair_cfg, noise_seed_t);
    return pair;
}

std::string make_dataset(int64_t n_pairs, const PhantomConfig& cfg, const std::string& split,
                         const std::string& out_dir) {
    if (n_pairs < 1) throw ContractError("make_dataset requires n_pairs >= 1");
    if (split != "train" && split != "vali" && split != "test" && split != "repro")
        throw ContractError("split must be one of train/vali/test/repro");
    PhantomConfig split_cfg = cfg;
    if (split == "repro") split_cfg.short_interval = true;
    split_cfg.validate();

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());

    DatasetManifest manifest;
    manifest.seed = split_cfg.seed;
    manifest.config_json = json{{"split", split},
                                {"pairs", n_pairs},
                                {"size", split_cfg.size},
                                {"deform_magnitude", split_cfg.deform_magnitude},
                                {"deform_smoothness", split_cfg.deform_smoothness},
                                {"noise_sd", split_cfg.noise_sd},
                                {"intensity_drift", split_cfg.intensity_drift},
                                {"short_interval", split_cfg.short_interval}}
                               .dump();

    for (int64_t i = 0; i < n_pairs; ++i) {
        PairSample pair = make_pair(split_cfg, static_cast<uint64_t>(i));
        const std::string prefix = split + "_" + pair.pair_id;
        const std::string subject = split + "_" + pair.subject_id;

        auto path = [&](const char* tag) { return prefix + "_" + tag + ".hvol"; };
        hvol_write(out_dir + "/" + path("a_tensor"), pair.tensor_s);
        hvol_write(out_dir + "/" + path("a_fa"), pair.fa_s);
        hvol_write(out_dir + "/" + path("a_label"), pair.label_s);
        hvol_write(out_dir + "/" + path("b_tensor"), pair.tensor_t);
        hvol_write(out_dir + "/" + path("b_fa"), pair.fa_t);
        hvol_write(out_dir + "/" + path("b_label"), pair.label_t);
        hvol_write(out_dir + "/" + path("disp"), *pair.gt_disp);

        SampleEntry fwd;
        fwd.id = prefix + "_ab";
        fwd.pair_id = prefix;
        fwd.subject_id = subject;
        fwd.split = split;
        fwd.direction = "forward";
        fwd.interval_tag = pair.interval_tag;
        fwd.tensor_s = path("a_tensor");
        fwd.fa_s = path("a_fa");
        fwd.label_s = path("a_label");
        fwd.tensor_t = path("b_tensor");
        fwd.fa_t = path("b_fa");
        fwd.label_t = path("b_label");
        fwd.gt_disp = path("disp");
        fwd.gt_diffusion_penalty = diffusion_penalty_value(*pair.gt_disp);

        SampleEntry bwd;
        bwd.id = prefix + "_ba";
        bwd.pair_id = prefix;
        bwd.subject_id = subject;
        bwd.split = split;
        bwd.direction = "backward";
        bwd.interval_tag = pair.interval_tag;
        bwd.tensor_s = path("b_tensor");
        bwd.fa_s = path("b_fa");
        bwd.label_s = path("b_label");
        bwd.tensor_t = path("a_tensor");
        bwd.fa_t = path("a_fa");
        bwd.label_t = path("a_label");
        // No exact inverse of the generated field exists, so backward
        // samples carry no ground-truth displacement.

        manifest.samples.push_back(std::move(fwd));
        manifest.samples.push_back(std::move(bwd));
    }

    const std::string manifest_path = out_dir + "/manifest.json";
    manifest_write(manifest_path, manifest);
    return manifest_path;
}

PairSample load_sample(const DatasetManifest& manifest, const SampleEntry& entry) {
    const std::string base = manifest.base_dir.empty() ? "." : manifest.base_dir;
    auto full = [&](const std::string& rel) { return base + "/" + rel; };
    PairSample s;
    s.pair_id = entry.pair_id;
    s.subject_id = entry.subject_id;
    s.interval_tag = entry.interval_tag;
    try {
        s.tensor_s = hvol_read_volume(full(entry.tensor_s));
        s.fa_s = hvol_read_volume(full(entry.fa_s));
        s.label_s = hvol_read_mask(full(entry.label_s));
        s.tensor_t = hvol_read_volume(full(entry.tensor_t));
        s.fa_t = hvol_read_volume(full(entry.fa_t));
        s.label_t = hvol_read_mask(full(entry.label_t));
        if (entry.gt_disp.has_value()) s.gt_disp = hvol_read_disp(full(*entry.gt_disp));
    } catch (const IoError& e) {
        throw MissingInputError("sample " + entry.id + ": " + e.what());
    }
    return s;
}

}  // namespace hw
