#include "fiber/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "fiber/error.hpp"
#include "json.hpp"

namespace fiber {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'F', 'I', 'B', 'R', 'C', 'K', 'P', 'T'};

json config_json(const FusionConfig& cfg) {
    json j;
    j["strategy"] = strategy_name(cfg.strategy);
    j["fused_layers"] = cfg.fused_layers;
    j["text_depth"] = cfg.text_depth;
    j["text_width"] = cfg.text_width;
    j["max_tokens"] = cfg.max_tokens;
    j["vocab_size"] = cfg.vocab_size;
    j["image_size"] = cfg.image_size;
    j["patch"] = cfg.patch;
    j["stage_depths"] = cfg.stage_depths;
    j["stage_widths"] = cfg.stage_widths;
    j["window"] = cfg.window;
    j["heads"] = cfg.heads;
    j["embed_dim"] = cfg.embed_dim;
    j["fpn_width"] = cfg.fpn_width;
    j["alpha_init"] = cfg.alpha_init;
    j["dtype"] = dtype_name(cfg.dtype);
    return j;
}

FusionConfig config_from(const json& j) {
    FusionConfig cfg;
    try {
        cfg.strategy = strategy_from_name(j.at("strategy").get<std::string>());
        cfg.fused_layers = j.at("fused_layers").get<int64_t>();
        cfg.text_depth = j.at("text_depth").get<int64_t>();
        cfg.text_width = j.at("text_width").get<int64_t>();
        cfg.max_tokens = j.at("max_tokens").get<int64_t>();
        cfg.vocab_size = j.at("vocab_size").get<int64_t>();
        cfg.image_size = j.at("image_size").get<int64_t>();
        cfg.patch = j.at("patch").get<int64_t>();
        cfg.stage_depths = j.at("stage_depths").get<std::vector<int64_t>>();
        cfg.stage_widths = j.at("stage_widths").get<std::vector<int64_t>>();
        cfg.window = j.at("window").get<int64_t>();
        cfg.heads = j.at("heads").get<int64_t>();
        cfg.embed_dim = j.at("embed_dim").get<int64_t>();
        cfg.fpn_width = j.at("fpn_width").get<int64_t>();
        cfg.alpha_init = j.at("alpha_init").get<double>();
        cfg.dtype = dtype_from_name(j.at("dtype").get<std::string>());
    } catch (const json::exception& e) {
        throw DataError(std::string("checkpoint: bad config block: ") + e.what());
    }
    return cfg;
}

int64_t element_size(Dtype dt) { return dt == Dtype::F32 ? 4 : 8; }

void append_u32(std::string& out, uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.append(b, 4);
}

void append_u64(std::string& out, uint64_t v) {
    char b[8];
    std::memcpy(b, &v, 8);
    out.append(b, 8);
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
        if (n == name) return &t;
    }
    return nullptr;
}

std::string config_to_json(const FusionConfig& cfg) { return config_json(cfg).dump(2); }

FusionConfig config_from_json(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw DataError("config: not valid JSON");
    return config_from(j);
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    json manifest = json::array();
    int64_t offset = 0;
    for (const auto& [name, t] : ckpt.tensors) {
        if (!t.defined()) throw ContractError("save_checkpoint: undefined tensor '" + name + "'");
        json entry;
        entry["name"] = name;
        entry["dtype"] = dtype_name(t.dtype());
        entry["shape"] = t.shape();
        entry["offset"] = offset;
        manifest.push_back(std::move(entry));
        offset += t.numel() * element_size(t.dtype());
    }
    json header;
    header["config"] = config_json(ckpt.meta.cfg);
    header["stage"] = ckpt.meta.stage;
    header["step"] = ckpt.meta.step;
    header["tensors"] = std::move(manifest);
    const std::string head = header.dump();

    std::string blob;
    blob.reserve(20 + head.size() + static_cast<size_t>(offset));
    blob.append(kMagic, 8);
    append_u32(blob, ckpt.meta.version);
    append_u64(blob, head.size());
    blob += head;
    for (const auto& [name, t] : ckpt.tensors) {
        if (t.dtype() == Dtype::F32) {
            auto d = t.data<float>();
            blob.append(reinterpret_cast<const char*>(d.data()), d.size() * 4);
        } else {
            auto d = t.data<double>();
            blob.append(reinterpret_cast<const char*>(d.data()), d.size() * 8);
        }
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("save_checkpoint: cannot open '" + path + "' for writing");
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw DataError("save_checkpoint: short write to '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("load_checkpoint: cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string blob = ss.str();

    if (blob.size() < 20 || std::memcmp(blob.data(), kMagic, 8) != 0) {
        throw DataError("load_checkpoint: '" + path + "' is not a checkpoint file");
    }
    uint32_t version = 0;
    uint64_t head_len = 0;
    std::memcpy(&version, blob.data() + 8, 4);
    std::memcpy(&head_len, blob.data() + 12, 8);
    if (version != kCheckpointVersion) {
        throw DataError("load_checkpoint: unsupported version " + std::to_string(version));
    }
    if (20 + head_len > blob.size()) {
        throw DataError("load_checkpoint: truncated header in '" + path + "'");
    }
    json header = json::parse(blob.substr(20, head_len), nullptr, false);
    if (header.is_discarded()) throw DataError("load_checkpoint: malformed header");

    Checkpoint ckpt;
    ckpt.meta.version = version;
    try {
        ckpt.meta.cfg = config_from(header.at("config"));
        ckpt.meta.stage = header.at("stage").get<std::string>();
        ckpt.meta.step = header.at("step").get<int64_t>();

        const char* payload = blob.data() + 20 + head_len;
        const int64_t payload_size = static_cast<int64_t>(blob.size() - 20 - head_len);
        for (const json& entry : header.at("tensors")) {
            const auto name = entry.at("name").get<std::string>();
            const Dtype dt = dtype_from_name(entry.at("dtype").get<std::string>());
            const auto shape = entry.at("shape").get<Shape>();
            const int64_t off = entry.at("offset").get<int64_t>();
            Tensor t = make_tensor(shape, dt, false);
            const int64_t bytes = t.numel() * element_size(dt);
            if (off < 0 || off + bytes > payload_size) {
                throw DataError("load_checkpoint: tensor '" + name + "' overruns the payload");
            }
            if (dt == Dtype::F32) {
                std::memcpy(t.mutable_data<float>().data(), payload + off,
                            static_cast<size_t>(bytes));
            } else {
                std::memcpy(t.mutable_data<double>().data(), payload + off,
                            static_cast<size_t>(bytes));
            }
            ckpt.tensors.emplace_back(name, std::move(t));
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("load_checkpoint: malformed header: ") + e.what());
    }
    return ckpt;
}

LoadReport load_params(Model& m, const Checkpoint& ckpt) {
    LoadReport report;
    auto params = named_params(m);
    for (auto& [name, p] : params) {
        const Tensor* src = ckpt.find(name);
        if (src == nullptr) {
            report.fresh.push_back(name);
            continue;
        }
        if (src->dtype() != p.dtype() || src->shape() != p.shape()) {
            throw ConfigError("load_params: '" + name + "' is " + shape_str(src->shape()) + " " +
                              dtype_name(src->dtype()) + " in the checkpoint but " +
                              shape_str(p.shape()) + " " + dtype_name(p.dtype()) +
                              " in the model");
        }
        if (p.dtype() == Dtype::F32) {
            auto dst = p.mutable_data<float>();
            auto s = src->data<float>();
            std::memcpy(dst.data(), s.data(), s.size() * 4);
        } else {
            auto dst = p.mutable_data<double>();
            auto s = src->data<double>();
            std::memcpy(dst.data(), s.data(), s.size() * 8);
        }
        report.loaded.push_back(name);
    }
    for (const auto& [name, t] : ckpt.tensors) {
        if (name.rfind("opt.", 0) == 0) continue;
        bool found = false;
        for (const auto& [pn, pt] : params) {
            if (pn == name) {
                found = true;
                break;
            }
        }
        if (!found) report.unused.push_back(name);
    }
    return report;
}

}  // namespace fiber
