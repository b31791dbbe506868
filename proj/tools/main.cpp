// hybridwarp: joint segmentation + deformable registration toolkit.
// Subcommands cover dataset generation, training, evaluation, standalone
// warping, metric computation and report comparison. Machine-readable JSON
// goes to stdout; human-readable tables go to stderr.

#include <cstdlib>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "hybridwarp/io.hpp"
#include "hybridwarp/kernels.hpp"
#include "hybridwarp/metrics.hpp"
#include "hybridwarp/synth.hpp"
#include "hybridwarp/train.hpp"

using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitArgs = 2;
constexpr int kExitIo = 3;
constexpr int kExitDiverged = 4;
constexpr int kExitMissing = 5;

std::vector<int64_t> parse_widths(const std::string& spec) {
    std::vector<int64_t> widths;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            widths.push_back(std::stoll(item));
        } catch (const std::exception&) {
            throw hw::ArgError("cannot parse widths list \"" + spec + "\"");
        }
    }
    if (widths.empty()) throw hw::ArgError("empty widths list");
    return widths;
}

json ttest_json(const hw::TTestResult& r) {
    json j{{"p", r.p}, {"n", r.n}, {"degenerate", r.degenerate}};
    if (std::isfinite(r.t))
        j["t"] = r.t;
    else
        j["t"] = nullptr;
    return j;
}

void print_report_table(const hw::EvalReport& report, std::ostream& os) {
    os << "mode: " << report.mode << ", pairs: " << report.records.size() << "\n";
    for (const auto& [name, s] : report.aggregates) {
        os << "  " << name << ": " << s.mean << " +- " << s.sd << " (n=" << s.n << ")\n";
    }
}

int run(int argc, char** argv) {
    CLI::App app{"hybridwarp: joint volumetric segmentation and deformable registration"};
    app.require_subcommand(1);

    int threads = 1;
    if (const char* env = std::getenv("HYBRIDWARP_THREADS")) threads = std::atoi(env);
    app.add_option("--threads", threads, "worker threads for kernels and evaluation")
        ->capture_default_str();

    // ---- generate ----
    auto* gen = app.add_subcommand("generate", "write a synthetic longitudinal dataset");
    std::string gen_out;
    int64_t gen_pairs = 4;
    int64_t gen_size = 32;
    uint64_t gen_seed = 0;
    std::string gen_split = "train";
    bool gen_short = false;
    double gen_magnitude = 3.0, gen_noise = 0.02, gen_drift = 0.05;
    int64_t gen_smooth = 8;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--pairs", gen_pairs, "number of longitudinal pairs")->capture_default_str();
    gen->add_option("--size", gen_size, "cubic volume extent (voxels)")->capture_default_str();
    gen->add_option("--seed", gen_seed, "generator seed")->capture_default_str();
    gen->add_option("--split", gen_split, "train|vali|test|repro")->capture_default_str();
    gen->add_flag("--short-interval", gen_short, "zero deformation (scan-rescan pairs)");
    gen->add_option("--deform-magnitude", gen_magnitude, "max |u| component in voxels")
        ->capture_default_str();
    gen->add_option("--deform-smoothness", gen_smooth, "smoothing radius in voxels")
        ->capture_default_str();
    gen->add_option("--noise-sd", gen_noise, "additive noise level")->capture_default_str();
    gen->add_option("--intensity-drift", gen_drift, "per-scan intensity drift range")
        ->capture_default_str();

    // ---- train ----
    auto* tr = app.add_subcommand("train", "optimize a model on a dataset");
    std::string tr_data, tr_out, tr_mode = "hybrid", tr_widths = "4,8,16,32,64,32,16,8,4";
    std::string tr_resume, tr_vali, tr_log;
    hw::TrainConfig tc;
    int64_t tr_iters = 1000;
    tr->add_option("--data", tr_data, "training manifest path")->required();
    tr->add_option("--out", tr_out, "checkpoint output path")->required();
    tr->add_option("--mode", tr_mode, "hybrid|segnet|regnet")->capture_default_str();
    tr->add_option("--iters", tr_iters, "optimization iterations")->capture_default_str();
    tr->add_option("--lr", tc.lr, "Adam learning rate")->capture_default_str();
    auto* opt_a = tr->add_option("--alpha", tc.weights.alpha, "similarity term weight")
                      ->capture_default_str();
    auto* opt_b = tr->add_option("--beta", tc.weights.beta, "smoothness term weight")
                      ->capture_default_str();
    auto* opt_g = tr->add_option("--gamma", tc.weights.gamma, "consistency term weight")
                      ->capture_default_str();
    uint64_t tr_seed = 0;
    tr->add_option("--seed", tr_seed, "training seed")->capture_default_str();
    tr->add_option("--widths", tr_widths, "channel widths, comma separated")->capture_default_str();
    tr->add_option("--checkpoint-every", tc.checkpoint_every, "checkpoint cadence (0 = final only)")
        ->capture_default_str();
    tr->add_option("--fg-weight", tc.fg_weight, "foreground up-weighting for overlap losses")
        ->capture_default_str();
    tr->add_option("--resume", tr_resume, "checkpoint to resume from");
    tr->add_option("--vali", tr_vali, "validation manifest (logging only)");
    tr->add_option("--log", tr_log, "also write loss records to this file");

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint over a dataset");
    std::string ev_ckpt, ev_data, ev_external, ev_report, ev_consistency = "auto";
    ev->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
    ev->add_option("--data", ev_data, "evaluation manifest path")->required();
    ev->add_option("--external-disp", ev_external,
                   "directory of <sample_id>.hvol displacement fields to use instead of the "
                   "network's");
    ev->add_option("--report", ev_report, "write the report JSON here");
    ev->add_option("--consistency-on", ev_consistency,
                   "consistency masks: pred|label|auto (regnet uses label)")
        ->capture_default_str();

    // ---- warp ----
    auto* wp = app.add_subcommand("warp", "resample a volume under a displacement field");
    std::string wp_image, wp_disp, wp_out, wp_interp = "trilinear";
    wp->add_option("--image", wp_image, "input HVOL volume or mask")->required();
    wp->add_option("--disp", wp_disp, "displacement field HVOL (3 channels)")->required();
    wp->add_option("--out", wp_out, "output HVOL path")->required();
    wp->add_option("--interp", wp_interp, "trilinear|nearest")->capture_default_str();

    // ---- metrics ----
    auto* mt = app.add_subcommand("metrics", "compute one metric and print JSON");
    mt->require_subcommand(1);
    auto* mt_dice = mt->add_subcommand("dice", "Dice overlap of two masks");
    std::string m_a, m_b;
    mt_dice->add_option("a", m_a, "first mask HVOL")->required();
    mt_dice->add_option("b", m_b, "second mask HVOL")->required();
    auto* mt_kappa = mt->add_subcommand("kappa", "Cohen's kappa of two masks");
    mt_kappa->add_option("a", m_a, "first mask HVOL")->required();
    mt_kappa->add_option("b", m_b, "second mask HVOL")->required();
    auto* mt_eps = mt->add_subcommand("epsilon", "scan-rescan error of two tract-median values");
    double e_fa1 = 0.0, e_fa2 = 0.0;
    mt_eps->add_option("fa1", e_fa1, "first median FA")->required();
    mt_eps->add_option("fa2", e_fa2, "second median FA")->required();
    auto* mt_epe = mt->add_subcommand("epe", "mean endpoint error of two displacement fields");
    std::string epe_est, epe_gt, epe_roi;
    mt_epe->add_option("estimate", epe_est, "estimated field HVOL")->required();
    mt_epe->add_option("truth", epe_gt, "ground-truth field HVOL")->required();
    mt_epe->add_option("--roi", epe_roi, "restrict to this mask");

    // ---- compare ----
    auto* cp = app.add_subcommand("compare", "paired t-tests between two reports");
    std::vector<std::string> cp_reports;
    cp->add_option("--report", cp_reports, "two report JSON paths")->expected(2)->required();

    app.parse(argc, argv);
    hw::kernels::set_threads(threads);

    if (*gen) {
        hw::PhantomConfig cfg = hw::PhantomConfig::cube(gen_size);
        cfg.seed = gen_seed;
        cfg.deform_magnitude = gen_magnitude;
        cfg.deform_smoothness = gen_smooth;
        cfg.noise_sd = gen_noise;
        cfg.intensity_drift = gen_drift;
        cfg.short_interval = gen_short;
        const std::string manifest = hw::make_dataset(gen_pairs, cfg, gen_split, gen_out);
        std::cout << json{{"manifest", manifest}, {"samples", 2 * gen_pairs}}.dump() << "\n";
        return kExitOk;
    }

    if (*tr) {
        tc.mode = hw::train_mode_from_name(tr_mode);
        tc.iterations = tr_iters;
        tc.seed = tr_seed;
        if (tc.mode == hw::TrainMode::segnet && (*opt_a || *opt_b || *opt_g))
            std::cerr << "warning: segnet mode optimizes the segmentation term only; "
                         "--alpha/--beta/--gamma are ignored\n";
        if (tc.mode == hw::TrainMode::regnet && *opt_g)
            std::cerr << "warning: regnet mode has no consistency term; --gamma is ignored\n";

        const std::vector<int64_t> widths = parse_widths(tr_widths);
        tc.seg_net.widths = widths;
        tc.seg_net.input_channels = 6;
        tc.seg_net.output_channels = 2;
        tc.seg_net.seed = hw::Rng::derive(tc.seed, 1);
        tc.reg_net.widths = widths;
        tc.reg_net.input_channels = 2;
        tc.reg_net.output_channels = 3;
        tc.reg_net.seed = hw::Rng::derive(tc.seed, 2);

        const hw::DatasetManifest data = hw::manifest_read(tr_data);
        std::optional<hw::DatasetManifest> vali;
        if (!tr_vali.empty()) vali = hw::manifest_read(tr_vali);
        std::optional<hw::Checkpoint> resume;
        if (!tr_resume.empty()) resume = hw::checkpoint_load(tr_resume);

        std::ostringstream log_buffer;
        std::ostream* records = &std::cout;
        if (!tr_log.empty()) records = &log_buffer;

        hw::TrainResult result =
            hw::train(tc, data, tr_out, records, vali.has_value() ? &*vali : nullptr,
                      resume.has_value() ? &*resume : nullptr);
        if (!tr_log.empty()) {
            hw::atomic_write_file(tr_log, log_buffer.str());
            std::cout << log_buffer.str();
        }
        std::cout << json{{"checkpoint", tr_out},
                          {"iterations", tc.iterations},
                          {"final_total", result.last.total}}
                         .dump()
                  << "\n";
        return kExitOk;
    }

    if (*ev) {
        hw::Checkpoint ckpt = hw::checkpoint_load(ev_ckpt);
        const hw::DatasetManifest data = hw::manifest_read(ev_data);
        hw::EvalOptions opts;
        opts.threads = threads;
        if (!ev_external.empty()) opts.external_disp_dir = ev_external;
        if (ev_consistency == "pred")
            opts.consistency_on_labels = false;
        else if (ev_consistency == "label")
            opts.consistency_on_labels = true;
        else if (ev_consistency != "auto")
            throw hw::ArgError("--consistency-on must be pred, label or auto");

        const hw::EvalReport report = hw::evaluate(ckpt, data, opts);
        if (!ev_report.empty()) hw::report_write(ev_report, report);
        print_report_table(report, std::cerr);
        std::cout << hw::report_to_json(report);
        return kExitOk;
    }

    if (*wp) {
        hw::Interp interp;
        if (wp_interp == "trilinear")
            interp = hw::Interp::trilinear;
        else if (wp_interp == "nearest")
            interp = hw::Interp::nearest;
        else
            throw hw::ArgError("--interp must be trilinear or nearest");

        const hw::DisplacementField disp = hw::hvol_read_disp(wp_disp);
        const hw::HvolContent content = hw::hvol_read(wp_image);
        if (content.dtype == hw::HvolDtype::mask_u8) {
            if (interp != hw::Interp::nearest)
                throw hw::ArgError("mask inputs require --interp nearest");
            hw::hvol_write(wp_out, hw::warp_mask_nearest(hw::hvol_read_mask(wp_image), disp));
        } else {
            const hw::Volume image(content.shape, content.floats);
            hw::hvol_write(wp_out, hw::warp_volume(image, disp, interp), content.dtype);
        }
        std::cout << json{{"out", wp_out}}.dump() << "\n";
        return kExitOk;
    }

    if (*mt) {
        json out;
        if (*mt_dice) {
            out["dice"] = hw::dice(hw::hvol_read_mask(m_a), hw::hvol_read_mask(m_b));
        } else if (*mt_kappa) {
            out["kappa"] = hw::kappa(hw::hvol_read_mask(m_a), hw::hvol_read_mask(m_b));
        } else if (*mt_eps) {
            out["epsilon_percent"] = hw::repro_epsilon_percent(e_fa1, e_fa2);
        } else if (*mt_epe) {
            std::optional<hw::Mask> roi;
            if (!epe_roi.empty()) roi = hw::hvol_read_mask(epe_roi);
            out["endpoint_error"] = hw::endpoint_error(hw::hvol_read_disp(epe_est),
                                                       hw::hvol_read_disp(epe_gt),
                                                       roi.has_value() ? &*roi : nullptr);
        }
        std::cout << out.dump() << "\n";
        return kExitOk;
    }

    if (*cp) {
        const hw::EvalReport a = hw::report_read(cp_reports[0]);
        const hw::EvalReport b = hw::report_read(cp_reports[1]);
        std::set<std::string> ids_a, ids_b;
        for (const auto& r : a.records) ids_a.insert(r.pair_id);
        for (const auto& r : b.records) ids_b.insert(r.pair_id);
        if (ids_a != ids_b)
            throw hw::MissingInputError("reports cover different pair ids; they are not comparable");

        std::map<std::string, const hw::PairRecord*> by_id;
        for (const auto& r : b.records) by_id[r.pair_id] = &r;

        using Getter = std::optional<double> hw::PairRecord::*;
        const std::vector<std::pair<std::string, Getter>> columns = {
            {"dice_accuracy_s", &hw::PairRecord::dice_accuracy_s},
            {"dice_accuracy_t", &hw::PairRecord::dice_accuracy_t},
            {"consistency_fwd", &hw::PairRecord::consistency_fwd},
            {"consistency_bwd", &hw::PairRecord::consistency_bwd},
            {"kappa", &hw::PairRecord::kappa},
            {"epsilon_percent", &hw::PairRecord::epsilon_percent},
            {"endpoint_error", &hw::PairRecord::endpoint_error},
        };
        json cols = json::object();
        for (const auto& [name, getter] : columns) {
            std::vector<double> xs, ys;
            for (const auto& ra : a.records) {
                const hw::PairRecord* rb = by_id.at(ra.pair_id);
                if ((ra.*getter).has_value() && (rb->*getter).has_value()) {
                    xs.push_back(*(ra.*getter));
                    ys.push_back(*(rb->*getter));
                }
            }
            if (xs.size() >= 2) cols[name] = ttest_json(hw::paired_t_test(xs, ys));
        }
        std::cout << json{{"columns", cols}, {"pairs", a.records.size()}}.dump(2) << "\n";
        return kExitOk;
    }

    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return kExitOk;  // --help
        std::cerr << e.what() << "\n";
        return kExitArgs;
    } catch (const hw::DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDiverged;
    } catch (const hw::MissingInputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitMissing;
    } catch (const hw::ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const hw::FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const hw::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const hw::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitArgs;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitArgs;
    }
}
