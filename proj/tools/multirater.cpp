// Command-line workbench: dataset generation, training, evaluation, and
// report tabulation for the multi-rater segmentation experiments.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "multirater/multirater.hpp"

namespace fs = std::filesystem;
using namespace multirater;

namespace {

void copy_config_for_provenance(const fs::path& config_path, const fs::path& out_dir) {
    const fs::path dest = out_dir / "config.json";
    if (fs::exists(dest) && fs::equivalent(config_path, dest)) return;
    fs::copy_file(config_path, dest, fs::copy_options::overwrite_existing);
}

int cmd_generate(const std::string& config_path, long seed_override,
                 const std::string& dir_override) {
    RunConfig cfg = RunConfig::load(config_path);
    if (seed_override >= 0) cfg.data.seed = static_cast<uint64_t>(seed_override);
    if (!dir_override.empty()) cfg.data_dir = dir_override;
    fs::create_directories(cfg.data_dir);
    const DatasetManifest manifest = generate_dataset(cfg.data, cfg.data_dir);
    copy_config_for_provenance(config_path, cfg.data_dir);
    int n_train = 0, n_test = 0;
    for (const auto& c : manifest.cases) (c.split == "train" ? n_train : n_test) += 1;
    std::cout << "generated " << manifest.cases.size() << " cases (" << n_train << " train, "
              << n_test << " test), " << manifest.num_raters() << " raters, seed "
              << manifest.seed << "\n"
              << "manifest: " << (cfg.data_dir / "manifest.json").string() << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, long seed_override,
              const std::string& out_override) {
    RunConfig cfg = RunConfig::load(config_path);
    if (seed_override >= 0) cfg.train.seed = static_cast<uint64_t>(seed_override);
    if (!out_override.empty()) cfg.output_dir = out_override;

    const fs::path manifest_path = cfg.data_dir / "manifest.json";
    if (!fs::exists(manifest_path))
        throw std::runtime_error("no manifest at " + manifest_path.string() +
                                 " (run `multirater generate` first)");
    const DatasetManifest manifest = DatasetManifest::load(manifest_path);
    std::vector<MultiRaterCase> cases = load_split(manifest, "train");
    if (!cfg.aligned) cases = shuffle_annotations(std::move(cases), cfg.shuffle_seed);

    Model model = build_model(cfg.variant, cfg.network);
    Rng init_rng = Rng(cfg.train.seed).substream(0x1a17);
    model.init(init_rng);

    fs::create_directories(cfg.output_dir);
    copy_config_for_provenance(config_path, cfg.output_dir);
    std::ofstream log(cfg.output_dir / "train_log.ndjson");
    if (!log) throw std::runtime_error("cannot write log under " + cfg.output_dir.string());

    const TrainResult result = train(model, cases, cfg.train, &log);

    CheckpointMeta meta;
    meta.variant = cfg.variant;
    meta.config = cfg.network;
    meta.seed = cfg.train.seed;
    const fs::path ckpt = cfg.output_dir / "checkpoint.bin";
    save_checkpoint(ckpt, model, meta);

    const EpochLog& last = result.log.back();
    std::cout << "trained " << variant_name(cfg.variant) << " for " << cfg.train.epochs
              << " epochs on " << cases.size() << " cases (" << (cfg.aligned ? "aligned" : "shuffled")
              << ")\nfinal loss " << last.loss;
    if (result.best_epoch >= 0)
        std::cout << ", best val q " << result.best_val_q << " at epoch " << result.best_epoch;
    std::cout << "\ncheckpoint: " << ckpt.string() << "\n";
    return 0;
}

void write_map_pgm(const fs::path& path, const Tensor& map, double max_value) {
    PgmImage img;
    img.width = map.dim(1);
    img.height = map.dim(0);
    img.maxval = 65535;
    img.pixels.resize(map.size());
    for (size_t i = 0; i < map.size(); ++i) {
        const double t = std::clamp(static_cast<double>(map[i]) / max_value, 0.0, 1.0);
        img.pixels[i] = static_cast<uint16_t>(std::lround(t * 65535.0));
    }
    write_pgm(path, img);
}

int cmd_eval(const std::string& checkpoint_path, const std::string& manifest_path,
             const std::string& split, int n_mc, int level_count, long seed,
             const std::string& out_path, bool emit_maps) {
    CheckpointMeta meta;
    Model model = load_checkpoint(checkpoint_path, &meta);
    const DatasetManifest manifest = DatasetManifest::load(manifest_path);
    const std::vector<MultiRaterCase> cases = load_split(manifest, split);
    if (cases.empty())
        throw std::runtime_error("no cases in split '" + split + "' of " + manifest_path);

    const int m = cases[0].num_raters();
    const int L = level_count > 0 ? level_count : m + 1;
    int n_eff = n_mc;
    if (!model.bayesian() && n_mc > 1) {
        std::cerr << "[multirater] note: deterministic model, collapsing n_mc=" << n_mc
                  << " to 1\n";
        n_eff = 1;
    }

    Rng rng = Rng(static_cast<uint64_t>(seed)).substream(0xe7a1);
    const MetricsReport report = evaluate(model, cases, n_eff, L, rng);

    const fs::path out(out_path);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write report to " + out_path);
    f << to_json(report).dump(2) << "\n";

    if (emit_maps) {
        const fs::path maps_dir = (out.has_parent_path() ? out.parent_path() : fs::path(".")) /
                                  "maps";
        fs::create_directories(maps_dir);
        const double ce_max = -std::log(1e-6);
        Rng map_rng = Rng(static_cast<uint64_t>(seed)).substream(0x3a95);
        for (const MultiRaterCase& c : cases) {
            PredictionSet ps = model.forward(c.image, map_rng, n_eff);
            const SampleSet pred = ps.all_samples();
            write_map_pgm(maps_dir / (c.case_id + "_error.pgm"), error_map(c.rater_masks, pred),
                          ce_max);
            write_map_pgm(maps_dir / (c.case_id + "_gamma.pgm"), gamma_map(pred), ce_max);
        }
        std::cout << "maps: " << maps_dir.string() << "\n";
    }

    std::printf("q_score %.4f  ged %.4f  diversity %.4f  similarity %.4f  (%zu cases)\n",
                report.q_score, report.ged, report.diversity, report.similarity,
                report.per_case.size());
    std::cout << "report: " << out_path << "\n";
    return 0;
}

int cmd_report(const std::vector<std::string>& paths) {
    std::printf("%-24s %10s %10s %10s %10s\n", "run", "q_score", "ged", "diversity",
                "similarity");
    for (const std::string& p : paths) {
        std::ifstream in(p);
        if (!in) throw std::runtime_error("cannot open report " + p);
        nlohmann::json j;
        in >> j;
        const MetricsReport r = report_from_json(j);

        // Aggregates must equal the per-case means they claim to summarize.
        double q = 0, g = 0, d = 0, s = 0;
        for (const CaseMetrics& c : r.per_case) {
            q += c.q_score;
            g += c.ged;
            d += c.diversity;
            s += c.similarity;
        }
        const double n = static_cast<double>(r.per_case.size());
        if (n > 0) {
            q /= n; g /= n; d /= n; s /= n;
            const double err = std::max({std::fabs(q - r.q_score), std::fabs(g - r.ged),
                                         std::fabs(d - r.diversity), std::fabs(s - r.similarity)});
            if (err > 1e-9)
                throw std::runtime_error("report " + p +
                                         ": aggregates disagree with per-case means (max err " +
                                         std::to_string(err) + ")");
        }
        std::printf("%-24s %10.4f %10.4f %10.4f %10.4f\n", fs::path(p).stem().string().c_str(),
                    r.q_score, r.ged, r.diversity, r.similarity);
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"one-encoder-multi-decoder segmentation workbench"};
    app.require_subcommand(1);

    std::string config_path, out_override, dir_override;
    long seed_override = -1;

    auto* gen = app.add_subcommand("generate", "render the synthetic multi-rater dataset");
    gen->add_option("--config", config_path, "run config JSON")->required();
    gen->add_option("--seed", seed_override, "override the generation seed");
    gen->add_option("--data-dir", dir_override, "override the dataset directory");

    auto* tr = app.add_subcommand("train", "train a ladder variant on the generated dataset");
    tr->add_option("--config", config_path, "run config JSON")->required();
    tr->add_option("--seed", seed_override, "override the training seed");
    tr->add_option("--out", out_override, "override the output directory");

    std::string checkpoint_path, manifest_path, split = "test", report_out = "report.json";
    int n_mc = 50, level_count = 0;
    long eval_seed = 5;
    bool emit_maps = false;
    auto* ev = app.add_subcommand("eval", "score a checkpoint on a dataset split");
    ev->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    ev->add_option("--manifest", manifest_path, "dataset manifest JSON")->required();
    ev->add_option("--split", split, "manifest split to score (default test)");
    ev->add_option("--n-mc", n_mc, "Monte Carlo draws per branch (default 50)");
    ev->add_option("--level-count", level_count, "Q-score level count L (default m+1)");
    ev->add_option("--seed", eval_seed, "sampling seed");
    ev->add_option("--out", report_out, "report JSON path")->required();
    ev->add_flag("--emit-maps", emit_maps, "write per-case error and gamma maps");

    std::vector<std::string> report_paths;
    auto* rp = app.add_subcommand("report", "tabulate one or more metric reports");
    rp->add_option("reports", report_paths, "report JSON files")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_generate(config_path, seed_override, dir_override);
        if (tr->parsed()) return cmd_train(config_path, seed_override, out_override);
        if (ev->parsed())
            return cmd_eval(checkpoint_path, manifest_path, split, n_mc, level_count, eval_seed,
                            report_out, emit_maps);
        if (rp->parsed()) return cmd_report(report_paths);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
