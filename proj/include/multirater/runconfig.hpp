#pragma once

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "multirater/data.hpp"
#include "multirater/losses.hpp"
#include "multirater/network.hpp"
#include "multirater/training.hpp"

namespace multirater {

/// One experiment = one JSON file: dataset recipe, architecture, loss and
/// optimizer settings, metric options, the ladder variant, and where the
/// artifacts go. Committed alongside results for provenance.
struct RunConfig {
    int version = 1;
    Variant variant = Variant::om;
    bool aligned = true;  // false = shuffled-annotation ablation
    std::filesystem::path output_dir = "run";
    std::filesystem::path data_dir = "data";
    GenConfig data;
    NetworkConfig network;
    LossConfig loss;
    TrainConfig train;
    int metric_L = 0;     // 0 = default m+1
    int metric_n_mc = 50;
    uint64_t shuffle_seed = 99;

    static RunConfig from_json(const nlohmann::json& j) {
        RunConfig c;
        c.version = j.value("version", 1);
        if (c.version != 1) throw std::runtime_error("run config: unsupported version");
        c.variant = parse_variant(j.value("variant", std::string("om")));
        c.aligned = j.value("aligned", true);
        c.output_dir = j.value("output_dir", std::string("run"));
        c.data_dir = j.value("data_dir", std::string("data"));
        if (j.contains("data")) {
            const auto& d = j.at("data");
            c.data.num_cases = d.value("num_cases", c.data.num_cases);
            c.data.image_size = d.value("image_size", c.data.image_size);
            c.data.num_shapes = d.value("num_shapes", c.data.num_shapes);
            c.data.se_radius = d.value("se_radius", c.data.se_radius);
            c.data.noise_std = d.value("noise_std", c.data.noise_std);
            c.data.seed = d.value("seed", c.data.seed);
            c.data.test_fraction = d.value("test_fraction", c.data.test_fraction);
            if (d.contains("rater_ops")) {
                c.data.rater_ops.clear();
                for (const auto& s : d.at("rater_ops"))
                    c.data.rater_ops.push_back(parse_rater_op(s.get<std::string>()));
            }
        }
        if (j.contains("network")) {
            const auto& n = j.at("network");
            c.network.depth = n.value("depth", c.network.depth);
            c.network.base_channels = n.value("base_channels", c.network.base_channels);
            c.network.num_branches = n.value("num_branches", c.network.num_branches);
            c.network.input_channels = n.value("input_channels", c.network.input_channels);
            c.network.sigma_init = n.value("sigma_init", c.network.sigma_init);
        }
        if (j.contains("loss")) {
            const auto& l = j.at("loss");
            c.loss.dice_smooth = l.value("dice_smooth", c.loss.dice_smooth);
            c.loss.kl_beta = l.value("kl_beta", c.loss.kl_beta);
            c.loss.mc_train_samples = l.value("mc_train_samples", c.loss.mc_train_samples);
            const std::string mode = l.value("kl_weight_mode", std::string("per_batch_count"));
            if (mode == "per_batch_count") c.loss.kl_weight_mode = KlWeightMode::per_batch_count;
            else if (mode == "fixed") c.loss.kl_weight_mode = KlWeightMode::fixed;
            else throw std::runtime_error("run config: unknown kl_weight_mode '" + mode + "'");
        }
        if (j.contains("train")) {
            const auto& t = j.at("train");
            c.train.optimizer = parse_optimizer(t.value("optimizer", std::string("sgd")));
            c.train.lr0 = t.value("lr0", c.train.lr0);
            c.train.epochs = t.value("epochs", c.train.epochs);
            c.train.batch_size = t.value("batch_size", c.train.batch_size);
            c.train.poly_power = t.value("poly_power", c.train.poly_power);
            c.train.momentum = t.value("momentum", c.train.momentum);
            c.train.n_mc_eval = t.value("n_mc_eval", c.train.n_mc_eval);
            c.train.seed = t.value("seed", c.train.seed);
            c.train.val_fraction = t.value("val_fraction", c.train.val_fraction);
            c.train.restore_best = t.value("restore_best", c.train.restore_best);
        }
        if (j.contains("metrics")) {
            const auto& m = j.at("metrics");
            c.metric_L = m.value("L", c.metric_L);
            c.metric_n_mc = m.value("n_mc", c.metric_n_mc);
        }
        c.shuffle_seed = j.value("shuffle_seed", c.shuffle_seed);
        c.train.loss = c.loss;
        return c;
    }

    static RunConfig load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("run config: cannot open " + path.string());
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("run config: parse error in " + path.string() + ": " +
                                     e.what());
        }
        return from_json(j);
    }

    int effective_L(int m) const { return metric_L > 0 ? metric_L : m + 1; }
};

} // namespace multirater
