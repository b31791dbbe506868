#include "hybridwarp/io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "hybridwarp/common.hpp"
#include "hybridwarp/train.hpp"

namespace hw {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are unsupported");

namespace {

constexpr char kHvolMagic[4] = {'H', 'V', 'L', '1'};
constexpr char kCkptMagic[6] = {'H', 'W', 'C', 'K', '1', '\n'};

void append_u32(std::string& out, uint32_t v) {
    out.append(reinterpret_cast<const char*>(&v), 4);
}

void append_u64(std::string& out, uint64_t v) {
    out.append(reinterpret_cast<const char*>(&v), 8);
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (!f.good() && !f.eof()) throw IoError("read failure on " + path);
    return bytes;
}

std::string hvol_header(const Shape& shape, HvolDtype dtype) {
    if (shape.rank() != 4) throw ShapeError("HVOL stores rank-4 volumes, got " + shape.str());
    std::string h;
    h.append(kHvolMagic, 4);
    h.push_back(4);
    for (size_t i = 0; i < 4; ++i) append_u32(h, static_cast<uint32_t>(shape[i]));
    h.push_back(static_cast<char>(dtype));
    return h;
}

size_t dtype_size(HvolDtype d) {
    switch (d) {
        case HvolDtype::f32: return 4;
        case HvolDtype::f64: return 8;
        case HvolDtype::mask_u8: return 1;
    }
    throw FormatError("unknown HVOL dtype");
}

json netconfig_to_json(const NetConfig& c) {
    return json{{"widths", c.widths},
                {"leaky_slope", c.leaky_slope},
                {"input_channels", c.input_channels},
                {"output_channels", c.output_channels},
                {"convs_per_level", c.convs_per_level},
                {"bn_momentum", c.bn_momentum},
                {"bn_epsilon", c.bn_epsilon},
                {"seed", c.seed}};
}

void expect_keys(const json& obj, const std::set<std::string>& allowed, const char* what) {
    for (const auto& item : obj.items())
        if (!allowed.contains(item.key()))
            throw FormatError(std::string(what) + ": unknown field \"" + item.key() + "\"");
}

NetConfig netconfig_from_json(const json& j) {
    expect_keys(j, {"widths", "leaky_slope", "input_channels", "output_channels", "convs_per_level",
                    "bn_momentum", "bn_epsilon", "seed"},
                "net config");
    NetConfig c;
    c.widths = j.at("widths").get<std::vector<int64_t>>();
    c.leaky_slope = j.at("leaky_slope").get<double>();
    c.input_channels = j.at("input_channels").get<int64_t>();
    c.output_channels = j.at("output_channels").get<int64_t>();
    c.convs_per_level = j.at("convs_per_level").get<int64_t>();
    c.bn_momentum = j.at("bn_momentum").get<double>();
    c.bn_epsilon = j.at("bn_epsilon").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}

json trainconfig_to_json(const TrainConfig& c) {
    json j{{"mode", train_mode_name(c.mode)},
           {"alpha", c.weights.alpha},
           {"beta", c.weights.beta},
           {"gamma", c.weights.gamma},
           {"lr", c.lr},
           {"adam_beta1", c.adam_beta1},
           {"adam_beta2", c.adam_beta2},
           {"adam_eps", c.adam_eps},
           {"iterations", c.iterations},
           {"seed", c.seed},
           {"checkpoint_every", c.checkpoint_every},
           {"fg_weight", c.fg_weight}};
    if (c.uses_seg()) j["seg_net"] = netconfig_to_json(c.seg_net);
    if (c.uses_reg()) j["reg_net"] = netconfig_to_json(c.reg_net);
    return j;
}

TrainConfig trainconfig_from_json(const json& j) {
    expect_keys(j, {"mode", "alpha", "beta", "gamma", "lr", "adam_beta1", "adam_beta2", "adam_eps",
                    "iterations", "seed", "checkpoint_every", "fg_weight", "seg_net", "reg_net"},
                "train config");
    TrainConfig c;
    c.mode = train_mode_from_name(j.at("mode").get<std::string>());
    c.weights.alpha = j.at("alpha").get<double>();
    c.weights.beta = j.at("beta").get<double>();
    c.weights.gamma = j.at("gamma").get<double>();
    c.lr = j.at("lr").get<double>();
    c.adam_beta1 = j.at("adam_beta1").get<double>();
    c.adam_beta2 = j.at("adam_beta2").get<double>();
    c.adam_eps = j.at("adam_eps").get<double>();
    c.iterations = j.at("iterations").get<int64_t>();
    c.seed = j.at("seed").get<uint64_t>();
    c.checkpoint_every = j.at("checkpoint_every").get<int64_t>();
    c.fg_weight = j.at("fg_weight").get<double>();
    if (c.uses_seg()) c.seg_net = netconfig_from_json(j.at("seg_net"));
    if (c.uses_reg()) c.reg_net = netconfig_from_json(j.at("reg_net"));
    return c;
}

}  // namespace

void atomic_write_file(const std::string& path, const std::string& bytes) {
    const fs::path target(path);
    if (target.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(target.parent_path(), ec);
    }
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open " + tmp + " for writing");
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f.good()) throw IoError("write failure on " + tmp);
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) throw IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

void hvol_write(const std::string& path, const Volume& volume, HvolDtype dtype) {
    if (dtype == HvolDtype::mask_u8)
        throw ContractError("hvol_write: use the Mask overload for dtype 3");
    std::string out = hvol_header(volume.shape, dtype);
    if (dtype == HvolDtype::f64) {
        out.append(reinterpret_cast<const char*>(volume.data.data()), volume.data.size() * 8);
    } else {
        std::vector<float> f(volume.data.size());
        for (size_t i = 0; i < f.size(); ++i) f[i] = static_cast<float>(volume.data[i]);
        out.append(reinterpret_cast<const char*>(f.data()), f.size() * 4);
    }
    atomic_write_file(path, out);
}

void hvol_write(const std::string& path, const Mask& mask) {
    std::string out = hvol_header(mask.shape, HvolDtype::mask_u8);
    out.append(reinterpret_cast<const char*>(mask.data.data()), mask.data.size());
    atomic_write_file(path, out);
}

HvolContent hvol_read(const std::string& path) {
    const std::string bytes = read_file(path);
    if (bytes.size() < static_cast<size_t>(kHvolHeaderBytes))
        throw FormatError(path + ": truncated header, file has " + std::to_string(bytes.size()) +
                          " bytes, need " + std::to_string(kHvolHeaderBytes));
    if (std::memcmp(bytes.data(), kHvolMagic, 4) != 0)
        throw FormatError(path + ": bad magic at byte offset 0");
    if (bytes[4] != 4) throw FormatError(path + ": unsupported ndims at byte offset 4");
    uint32_t dims[4];
    std::memcpy(dims, bytes.data() + 5, 16);
    const uint8_t dtype_code = static_cast<uint8_t>(bytes[21]);
    if (dtype_code < 1 || dtype_code > 3)
        throw FormatError(path + ": bad dtype code at byte offset 21");

    HvolContent c;
    c.dtype = static_cast<HvolDtype>(dtype_code);
    c.shape = Shape{static_cast<int64_t>(dims[0]), static_cast<int64_t>(dims[1]),
                    static_cast<int64_t>(dims[2]), static_cast<int64_t>(dims[3])};
    const size_t n = static_cast<size_t>(c.shape.numel());
    const size_t expect = static_cast<size_t>(kHvolHeaderBytes) + n * dtype_size(c.dtype);
    if (bytes.size() != expect)
        throw FormatError(path + ": payload length mismatch at byte offset " +
                          std::to_string(std::min(bytes.size(), expect)) + " (file " +
                          std::to_string(bytes.size()) + " bytes, expected " + std::to_string(expect) +
                          ")");

    const char* payload = bytes.data() + kHvolHeaderBytes;
    if (c.dtype == HvolDtype::f64) {
        c.floats.resize(n);
        std::memcpy(c.floats.data(), payload, n * 8);
    } else if (c.dtype == HvolDtype::f32) {
        std::vector<float> f(n);
        std::memcpy(f.data(), payload, n * 4);
        c.floats.assign(f.begin(), f.end());
    } else {
        c.bytes.assign(payload, payload + n);
    }
    return c;
}

Volume hvol_read_volume(const std::string& path) {
    HvolContent c = hvol_read(path);
    if (c.dtype == HvolDtype::mask_u8)
        throw FormatError(path + ": expected a float volume, found a mask file");
    return Volume(c.shape, std::move(c.floats));
}

Mask hvol_read_mask(const std::string& path) {
    HvolContent c = hvol_read(path);
    if (c.dtype != HvolDtype::mask_u8) throw FormatError(path + ": expected a mask file (dtype 3)");
    if (c.shape.channels() != 1) throw FormatError(path + ": mask must have one channel");
    Mask m(c.shape);
    for (size_t i = 0; i < c.bytes.size(); ++i) {
        if (c.bytes[i] > 1)
            throw FormatError(path + ": mask value out of {0,1} at element " + std::to_string(i));
        m.data[i] = c.bytes[i];
    }
    return m;
}

DisplacementField hvol_read_disp(const std::string& path) {
    Volume v = hvol_read_volume(path);
    require_displacement(v);
    return v;
}

// ---- manifest -------------------------------------------------------------

void manifest_write(const std::string& path, const DatasetManifest& manifest) {
    json samples = json::array();
    for (const auto& s : manifest.samples) {
        json e{{"id", s.id},
               {"pair_id", s.pair_id},
               {"subject_id", s.subject_id},
               {"split", s.split},
               {"direction", s.direction},
               {"interval_tag", s.interval_tag},
               {"tensor_s", s.tensor_s},
               {"fa_s", s.fa_s},
               {"label_s", s.label_s},
               {"tensor_t", s.tensor_t},
               {"fa_t", s.fa_t},
               {"label_t", s.label_t}};
        if (s.gt_disp.has_value()) e["gt_disp"] = *s.gt_disp;
        if (s.gt_diffusion_penalty.has_value()) e["gt_diffusion_penalty"] = *s.gt_diffusion_penalty;
        samples.push_back(std::move(e));
    }
    json j{{"version", manifest.version},
           {"seed", manifest.seed},
           {"config", json::parse(manifest.config_json.empty() ? "{}" : manifest.config_json)},
           {"samples", samples}};
    atomic_write_file(path, j.dump(2) + "\n");
}

DatasetManifest manifest_read(const std::string& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw FormatError(path + ": " + e.what());
    }
    expect_keys(j, {"version", "seed", "config", "samples"}, "manifest");
    DatasetManifest m;
    m.version = j.at("version").get<std::string>();
    if (m.version != "1") throw FormatError(path + ": unsupported manifest version " + m.version);
    m.seed = j.at("seed").get<uint64_t>();
    m.config_json = j.at("config").dump();
    for (const auto& e : j.at("samples")) {
        expect_keys(e,
                    {"id", "pair_id", "subject_id", "split", "direction", "interval_tag", "tensor_s",
                     "fa_s", "label_s", "tensor_t", "fa_t", "label_t", "gt_disp",
                     "gt_diffusion_penalty"},
                    "manifest sample");
        SampleEntry s;
        s.id = e.at("id").get<std::string>();
        s.pair_id = e.at("pair_id").get<std::string>();
        s.subject_id = e.at("subject_id").get<std::string>();
        s.split = e.at("split").get<std::string>();
        s.direction = e.at("direction").get<std::string>();
        s.interval_tag = e.at("interval_tag").get<std::string>();
        s.tensor_s = e.at("tensor_s").get<std::string>();
        s.fa_s = e.at("fa_s").get<std::string>();
        s.label_s = e.at("label_s").get<std::string>();
        s.tensor_t = e.at("tensor_t").get<std::string>();
        s.fa_t = e.at("fa_t").get<std::string>();
        s.label_t = e.at("label_t").get<std::string>();
        if (e.contains("gt_disp")) s.gt_disp = e.at("gt_disp").get<std::string>();
        if (e.contains("gt_diffusion_penalty"))
            s.gt_diffusion_penalty = e.at("gt_diffusion_penalty").get<double>();
        m.samples.push_back(std::move(s));
    }
    m.base_dir = fs::path(path).parent_path().string();
    return m;
}

// ---- report ----------------------------------------------------------------

namespace {

json opt_to_json(const std::optional<double>& v) {
    if (!v.has_value()) return nullptr;
    return *v;
}

std::optional<double> opt_from_json(const json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<double>();
}

}  // namespace

std::string report_to_json(const EvalReport& report) {
    json records = json::array();
    for (const auto& r : report.records) {
        records.push_back(json{{"pair_id", r.pair_id},
                               {"subject_id", r.subject_id},
                               {"dice_accuracy_s", opt_to_json(r.dice_accuracy_s)},
                               {"dice_accuracy_t", opt_to_json(r.dice_accuracy_t)},
                               {"consistency_fwd", opt_to_json(r.consistency_fwd)},
                               {"consistency_bwd", opt_to_json(r.consistency_bwd)},
                               {"kappa", opt_to_json(r.kappa)},
                               {"epsilon_percent", opt_to_json(r.epsilon_percent)},
                               {"endpoint_error", opt_to_json(r.endpoint_error)}});
    }
    json aggregates = json::object();
    for (const auto& [name, s] : report.aggregates)
        aggregates[name] = json{{"mean", s.mean}, {"sd", s.sd}, {"n", s.n}};
    json j{{"version", report.version},
           {"mode", report.mode},
           {"records", records},
           {"aggregates", aggregates}};
    return j.dump(2) + "\n";
}

void report_write(const std::string& path, const EvalReport& report) {
    atomic_write_file(path, report_to_json(report));
}

EvalReport report_read(const std::string& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw FormatError(path + ": " + e.what());
    }
    expect_keys(j, {"version", "mode", "records", "aggregates"}, "report");
    EvalReport r;
    r.version = j.at("version").get<std::string>();
    if (r.version != "1") throw FormatError(path + ": unsupported report version " + r.version);
    r.mode = j.at("mode").get<std::string>();
    for (const auto& e : j.at("records")) {
        expect_keys(e,
                    {"pair_id", "subject_id", "dice_accuracy_s", "dice_accuracy_t", "consistency_fwd",
                     "consistency_bwd", "kappa", "epsilon_percent", "endpoint_error"},
                    "report record");
        PairRecord p;
        p.pair_id = e.at("pair_id").get<std::string>();
        p.subject_id = e.at("subject_id").get<std::string>();
        p.dice_accuracy_s = opt_from_json(e, "dice_accuracy_s");
        p.dice_accuracy_t = opt_from_json(e, "dice_accuracy_t");
        p.consistency_fwd = opt_from_json(e, "consistency_fwd");
        p.consistency_bwd = opt_from_json(e, "consistency_bwd");
        p.kappa = opt_from_json(e, "kappa");
        p.epsilon_percent = opt_from_json(e, "epsilon_percent");
        p.endpoint_error = opt_from_json(e, "endpoint_error");
        r.records.push_back(std::move(p));
    }
    for (const auto& item : j.at("aggregates").items()) {
        expect_keys(item.value(), {"mean", "sd", "n"}, "report aggregate");
        ColumnStats s;
        s.mean = item.value().at("mean").get<double>();
        s.sd = item.value().at("sd").get<double>();
        s.n = item.value().at("n").get<int64_t>();
        r.aggregates[item.key()] = s;
    }
    return r;
}

// ---- checkpoint -------------------------------------------------------------

namespace {

struct TensorDirEntry {
    std::string name;
    std::vector<int64_t> shape;
    int64_t offset;  // element offset into the f64 payload
};

void collect_net_tensors(const std::string& prefix, ParameterSet& ps, AdamState& adam,
                         std::vector<std::pair<std::string, std::vector<double>*>>& out) {
    auto slots = ps.all_slots();
    for (auto& s : slots) out.emplace_back(prefix + "/" + s.name, s.data);
    auto learnable = ps.learnable_slots();
    if (adam.m.size() != learnable.size()) {
        adam.m.resize(learnable.size());
        adam.v.resize(learnable.size());
        for (size_t i = 0; i < learnable.size(); ++i) {
            adam.m[i].assign(learnable[i].data->size(), 0.0);
            adam.v[i].assign(learnable[i].data->size(), 0.0);
        }
    }
    for (size_t i = 0; i < learnable.size(); ++i) {
        out.emplace_back(prefix + "/adam_m/" + learnable[i].name, &adam.m[i]);
        out.emplace_back(prefix + "/adam_v/" + learnable[i].name, &adam.v[i]);
    }
}

}  // namespace

void checkpoint_save(const std::string& path, const Checkpoint& ckpt) {
    Checkpoint& c = const_cast<Checkpoint&>(ckpt);  // slot enumeration is non-const
    std::vector<std::pair<std::string, std::vector<double>*>> tensors;
    if (c.seg.has_value()) collect_net_tensors("seg", *c.seg, c.adam_seg, tensors);
    if (c.reg.has_value()) collect_net_tensors("reg", *c.reg, c.adam_reg, tensors);

    json dir = json::array();
    int64_t offset = 0;
    for (auto& [name, data] : tensors) {
        dir.push_back(json{{"name", name}, {"count", data->size()}, {"offset", offset}});
        offset += static_cast<int64_t>(data->size());
    }
    json preamble{{"version", "1"},
                  {"iteration", c.iteration},
                  {"adam_step_seg", c.adam_seg.step},
                  {"adam_step_reg", c.adam_reg.step},
                  {"train_config", trainconfig_to_json(c.config)},
                  {"tensors", dir}};
    const std::string pj = preamble.dump();

    std::string out;
    out.append(kCkptMagic, 6);
    append_u64(out, pj.size());
    out += pj;
    for (auto& [name, data] : tensors)
        out.append(reinterpret_cast<const char*>(data->data()), data->size() * 8);
    atomic_write_file(path, out);
}

Checkpoint checkpoint_load(const std::string& path) {
    const std::string bytes = read_file(path);
    if (bytes.size() < 14 || std::memcmp(bytes.data(), kCkptMagic, 6) != 0)
        throw FormatError(path + ": not a checkpoint file");
    uint64_t json_len = 0;
    std::memcpy(&json_len, bytes.data() + 6, 8);
    if (bytes.size() < 14 + json_len) throw FormatError(path + ": truncated preamble");
    json preamble;
    try {
        preamble = json::parse(bytes.substr(14, json_len));
    } catch (const json::parse_error& e) {
        throw FormatError(path + ": " + e.what());
    }
    expect_keys(preamble, {"version", "iteration", "adam_step_seg", "adam_step_reg", "train_config",
                           "tensors"},
                "checkpoint");
    if (preamble.at("version").get<std::string>() != "1")
        throw FormatError(path + ": unsupported checkpoint version");

    Checkpoint c;
    c.config = trainconfig_from_json(preamble.at("train_config"));
    c.iteration = preamble.at("iteration").get<int64_t>();
    c.adam_seg.step = preamble.at("adam_step_seg").get<int64_t>();
    c.adam_reg.step = preamble.at("adam_step_reg").get<int64_t>();
    if (c.config.uses_seg()) c.seg = init_params(c.config.seg_net, Role::segmentation);
    if (c.config.uses_reg()) c.reg = init_params(c.config.reg_net, Role::registration);

    std::vector<std::pair<std::string, std::vector<double>*>> tensors;
    if (c.seg.has_value()) collect_net_tensors("seg", *c.seg, c.adam_seg, tensors);
    if (c.reg.has_value()) collect_net_tensors("reg", *c.reg, c.adam_reg, tensors);

    const json& dir = preamble.at("tensors");
    if (dir.size() != tensors.size())
        throw FormatError(path + ": tensor directory has " + std::to_string(dir.size()) +
                          " entries, network configs expect " + std::to_string(tensors.size()));
    const char* payload = bytes.data() + 14 + json_len;
    const size_t payload_len = bytes.size() - 14 - static_cast<size_t>(json_len);
    for (size_t i = 0; i < tensors.size(); ++i) {
        const json& e = dir[i];
        expect_keys(e, {"name", "count", "offset"}, "checkpoint tensor");
        if (e.at("name").get<std::string>() != tensors[i].first)
            throw FormatError(path + ": tensor " + std::to_string(i) + " is \"" +
                              e.at("name").get<std::string>() + "\", expected \"" + tensors[i].first +
                              "\"");
        const size_t count = e.at("count").get<size_t>();
        const size_t offset = e.at("offset").get<size_t>();
        if (count != tensors[i].second->size())
            throw FormatError(path + ": tensor " + tensors[i].first + " count mismatch");
        if ((offset + count) * 8 > payload_len) throw FormatError(path + ": truncated payload");
        std::memcpy(tensors[i].second->data(), payload + offset * 8, count * 8);
    }
    return c;
}

}  // namespace hw
