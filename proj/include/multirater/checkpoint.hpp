#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "multirater/network.hpp"

namespace multirater {

// Container: 8-byte magic, little-endian u64 header length, JSON header
// (version, variant, network config, seed metadata, float count), then all
// parameter grids as raw little-endian float32 in visit_params order
// (mu, then rho for Bayesian parameters).
inline constexpr char kCheckpointMagic[8] = {'M', 'R', 'C', 'K', 'P', 'T', '1', '\n'};

namespace detail {

inline nlohmann::json network_config_to_json(const NetworkConfig& c) {
    return {{"depth", c.depth},
            {"base_channels", c.base_channels},
            {"num_branches", c.num_branches},
            {"use_attention", c.use_attention},
            {"use_bayesian_decoders", c.use_bayesian_decoders},
            {"input_channels", c.input_channels},
            {"sigma_init", c.sigma_init}};
}

inline NetworkConfig network_config_from_json(const nlohmann::json& j) {
    NetworkConfig c;
    c.depth = j.at("depth").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.num_branches = j.at("num_branches").get<int>();
    c.use_attention = j.at("use_attention").get<bool>();
    c.use_bayesian_decoders = j.at("use_bayesian_decoders").get<bool>();
    c.input_channels = j.at("input_channels").get<int>();
    c.sigma_init = j.at("sigma_init").get<double>();
    return c;
}

template <class F>
void visit_model_tensors(Model& model, F&& fn) {
    model.visit_params([&](Param& p) {
        fn(p.dist.mu);
        if (p.bayes) fn(p.dist.rho);
    });
}

} // namespace detail

/// The logical configuration needed to rebuild a Model: the ladder variant
/// plus the per-net NetworkConfig (with num_branches = logical m).
struct CheckpointMeta {
    Variant variant = Variant::om;
    NetworkConfig config;  // num_branches is the logical rater count m
    uint64_t seed = 0;     // training seed, informational
};

inline void save_checkpoint(const std::filesystem::path& path, Model& model,
                            const CheckpointMeta& meta) {
    size_t floats = 0;
    detail::visit_model_tensors(model, [&](Tensor& t) { floats += t.size(); });

    nlohmann::json header = {{"version", 1},
                             {"variant", variant_name(meta.variant)},
                             {"network", detail::network_config_to_json(meta.config)},
                             {"seed", meta.seed},
                             {"floats", floats}};
    const std::string hs = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + path.string());
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    uint64_t len = hs.size();
    unsigned char lenb[8];
    for (int i = 0; i < 8; ++i) lenb[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(lenb), 8);
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    detail::visit_model_tensors(model, [&](Tensor& t) {
        out.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(t.size() * sizeof(float)));
    });
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

/// Rebuilds the model and restores every parameter bit-exactly.
inline Model load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta_out = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path.string());
    unsigned char lenb[8];
    in.read(reinterpret_cast<char*>(lenb), 8);
    if (!in) throw std::runtime_error("checkpoint: truncated header length");
    uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= static_cast<uint64_t>(lenb[i]) << (8 * i);
    std::string hs(len, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(len));
    if (!in) throw std::runtime_error("checkpoint: truncated header");
    const nlohmann::json header = nlohmann::json::parse(hs);
    if (header.at("version").get<int>() != 1)
        throw std::runtime_error("checkpoint: unsupported version");

    CheckpointMeta meta;
    meta.variant = parse_variant(header.at("variant").get<std::string>());
    meta.config = detail::network_config_from_json(header.at("network"));
    meta.seed = header.at("seed").get<uint64_t>();

    Model model = build_model(meta.variant, meta.config);
    size_t expect = 0;
    detail::visit_model_tensors(model, [&](Tensor& t) { expect += t.size(); });
    if (expect != header.at("floats").get<size_t>())
        throw std::runtime_error("checkpoint: parameter count mismatch (file " +
                                 std::to_string(header.at("floats").get<size_t>()) + ", model " +
                                 std::to_string(expect) + ")");
    bool bad = false;
    detail::visit_model_tensors(model, [&](Tensor& t) {
        in.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.size() * sizeof(float)));
        if (!in) bad = true;
    });
    if (bad) throw std::runtime_error("checkpoint: truncated payload in " + path.string());
    if (meta_out) *meta_out = meta;
    return model;
}

} // namespace multirater
