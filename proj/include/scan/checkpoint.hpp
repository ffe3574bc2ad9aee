#pragma once

// Checkpoint file:
//   SCAN-CHECKPOINT v1
//   <header length>
//   {JSON header: fingerprint, model, normalization, epoch, history, tensors[]}
//   <float32 little-endian blobs at the offsets listed in tensors[]>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "scan/data.hpp"
#include "scan/errors.hpp"
#include "scan/io.hpp"
#include "scan/metrics.hpp"
#include "scan/model.hpp"

namespace scan {

inline nlohmann::json to_json(const ModelConfig& m) {
    nlohmann::json sections = nlohmann::json::array();
    for (const auto& s : m.sections) sections.push_back({{"channels", s.channels}, {"stride", s.stride}, {"depth", s.depth}});
    return {{"name", m.name},
            {"in_channels", m.in_channels},
            {"height", m.height},
            {"width", m.width},
            {"num_classes", m.num_classes},
            {"sections", sections},
            {"attention", m.attention},
            {"init_seed", m.init_seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig m;
    try {
        m.name = j.at("name").get<std::string>();
        m.in_channels = j.at("in_channels").get<std::size_t>();
        m.height = j.at("height").get<std::size_t>();
        m.width = j.at("width").get<std::size_t>();
        m.num_classes = j.at("num_classes").get<std::size_t>();
        for (const auto& s : j.at("sections")) {
            m.sections.push_back(
                {s.at("channels").get<std::size_t>(), s.at("stride").get<std::size_t>(), s.at("depth").get<std::size_t>()});
        }
        m.attention = j.at("attention").get<bool>();
        m.init_seed = j.at("init_seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("model config: ") + e.what());
    }
    return m;
}

inline nlohmann::json to_json(const Normalization& n) { return {{"mean", n.mean}, {"std", n.stddev}}; }

inline Normalization normalization_from_json(const nlohmann::json& j) {
    return {j.at("mean").get<std::vector<double>>(), j.at("std").get<std::vector<double>>()};
}

inline nlohmann::json to_json(const MetricsHistory& h) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : h.records) {
        rows.push_back({{"epoch", r.epoch}, {"exit", r.exit}, {"split", r.split}, {"accuracy", r.accuracy}, {"loss", r.loss}});
    }
    return rows;
}

inline MetricsHistory history_from_json(const nlohmann::json& j) {
    MetricsHistory h;
    for (const auto& r : j) {
        h.records.push_back({r.at("epoch").get<std::size_t>(), r.at("exit").get<std::size_t>(),
                             r.at("split").get<std::string>(), r.at("accuracy").get<double>(),
                             r.at("loss").get<double>()});
    }
    return h;
}

/// A trained network together with everything needed to resume or reproduce it.
struct Checkpoint {
    ScanNetwork<float> network;
    Normalization normalization;
    std::size_t epoch = 0;
    std::string fingerprint;             // hash of the effective run configuration
    nlohmann::json run_config;           // echoed configuration, informational
    MetricsHistory history;
    std::vector<std::vector<float>> momentum;  // one buffer per parameter, may be empty

    explicit Checkpoint(ScanNetwork<float> net) : network(std::move(net)) {}
};

inline constexpr const char* kCheckpointMagic = "SCAN-CHECKPOINT v1";

inline std::string encode_checkpoint(const Checkpoint& ck) {
    const auto& net = ck.network;
    nlohmann::json dir = nlohmann::json::array();
    std::string payload;
    auto put = [&](const std::string& name, const std::string& kind, const Shape& shape, std::span<const float> v) {
        dir.push_back({{"name", name}, {"kind", kind}, {"shape", shape}, {"dtype", "f32"}, {"offset", payload.size()}});
        append_raw(payload, v);
    };
    for (const auto& p : net.parameters()) put(p.name, "param", p.tensor->shape(), p.tensor->data());
    for (const auto& b : net.buffers()) put(b.name, "buffer", b.tensor->shape(), b.tensor->data());
    if (!ck.momentum.empty()) {
        if (ck.momentum.size() != net.parameters().size()) throw ContractError("checkpoint: momentum/parameter count mismatch");
        for (std::size_t i = 0; i < ck.momentum.size(); ++i) {
            const auto& p = net.parameters()[i];
            put(p.name + ".momentum", "momentum", p.tensor->shape(), ck.momentum[i]);
        }
    }
    nlohmann::json header = {{"fingerprint", ck.fingerprint},
                             {"model", to_json(net.config())},
                             {"normalization", to_json(ck.normalization)},
                             {"epoch", ck.epoch},
                             {"run_config", ck.run_config},
                             {"history", to_json(ck.history)},
                             {"tensors", dir}};
    return encode_container(kCheckpointMagic, header, payload);
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
    const auto c = decode_container(bytes, kCheckpointMagic, what);
    const auto& h = c.header;
    try {
        Checkpoint ck(ScanNetwork<float>(model_config_from_json(h.at("model"))));
        ck.normalization = normalization_from_json(h.at("normalization"));
        ck.epoch = h.at("epoch").get<std::size_t>();
        ck.fingerprint = h.at("fingerprint").get<std::string>();
        ck.run_config = h.at("run_config");
        ck.history = history_from_json(h.at("history"));
        const auto& params = ck.network.parameters();
        bool has_momentum = false;
        std::vector<std::vector<float>> momentum(params.size());
        std::size_t filled = 0;
        for (const auto& t : h.at("tensors")) {
            const auto name = t.at("name").get<std::string>();
            const auto kind = t.at("kind").get<std::string>();
            const auto shape = t.at("shape").get<Shape>();
            if (t.at("dtype").get<std::string>() != "f32") throw ParseError(what + ": tensor '" + name + "' is not f32");
            auto values = read_raw<float>(c.payload, t.at("offset").get<std::size_t>(), numel_of(shape), what);
            if (kind == "momentum") {
                const auto base = name.substr(0, name.size() - std::string(".momentum").size());
                std::size_t i = 0;
                while (i < params.size() && params[i].name != base) ++i;
                if (i == params.size()) throw ParseError(what + ": momentum for unknown parameter '" + base + "'");
                momentum[i] = std::move(values);
                has_momentum = true;
                continue;
            }
            Tensor<float>* dst = ck.network.find(name);
            if (!dst) throw ParseError(what + ": unknown tensor '" + name + "'");
            if (dst->shape() != shape) {
                throw ParseError(what + ": tensor '" + name + "' has shape " + to_string(shape) + ", model expects " +
                                 to_string(dst->shape()));
            }
            std::copy(values.begin(), values.end(), dst->mutable_data().begin());
            ++filled;
        }
        if (filled != params.size() + ck.network.buffers().size()) {
            throw ParseError(what + ": " + std::to_string(filled) + " tensors stored, model has " +
                             std::to_string(params.size() + ck.network.buffers().size()));
        }
        if (has_momentum) ck.momentum = std::move(momentum);
        return ck;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(what + ": " + e.what());
    }
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    write_atomic(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(read_bytes(path), "checkpoint '" + path.string() + "'");
}

}  // namespace scan
