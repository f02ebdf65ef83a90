// bandfuse: band-order HSI + LiDAR fusion experiments from the command line.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bandfuse/band_order.hpp"
#include "bandfuse/experiment.hpp"
#include "bandfuse/hslinet.hpp"
#include "bandfuse/metrics.hpp"
#include "bandfuse/scene.hpp"
#include "bandfuse/split.hpp"
#include "bandfuse/synth.hpp"
#include "bandfuse/trainer.hpp"

namespace fs = std::filesystem;
using namespace bandfuse;

namespace {

fs::path sibling(const fs::path& path, const std::string& suffix) { return fs::path(path.string() + suffix); }

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    detail::write_text_atomic(path, text);
}

std::vector<std::size_t> parse_sizes(const std::string& text) {
    std::vector<std::size_t> sizes;
    std::stringstream ss(text);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            std::size_t used = 0;
            const long v = std::stol(tok, &used);
            if (used != tok.size() || v <= 0) throw std::invalid_argument(tok);
            sizes.push_back(static_cast<std::size_t>(v));
        } catch (const std::exception&) {
            throw ConfigError("invalid patch size \"" + tok + "\"");
        }
    }
    return sizes;
}

void add_arch_options(CLI::App* cmd, Architecture& arch, std::size_t& top_k) {
    cmd->add_option("--filters", arch.filters, "Conv1D channels")->capture_default_str();
    cmd->add_option("--kernel", arch.kernel, "Conv1D kernel size (odd)")->capture_default_str();
    cmd->add_option("--hidden", arch.hidden, "Hidden width d_h")->capture_default_str();
    cmd->add_flag("--project-first", arch.project_first, "Experimental: project the spectrum before the convolutions");
    cmd->add_option("--top-k", top_k, "Keep only the k most important bands for DB3/DB4 (0 = all)")->capture_default_str();
}

void add_train_options(CLI::App* cmd, TrainConfig& t) {
    cmd->add_option("--epochs", t.epochs, "Training epochs")->capture_default_str();
    cmd->add_option("--lr", t.learning_rate, "Adam learning rate")->capture_default_str();
    cmd->add_option("--batch", t.batch_size, "Mini-batch size")->capture_default_str();
    cmd->add_option("--weight-decay", t.weight_decay, "L2 weight decay (off by default)")->capture_default_str();
    cmd->add_option("--lr-step", t.lr_step_epochs, "Decay the learning rate every N epochs (0 = never)")->capture_default_str();
    cmd->add_option("--lr-gamma", t.lr_step_gamma, "Learning rate decay factor")->capture_default_str();
}

std::optional<BandRanking> maybe_load_ranking(const std::string& path, std::size_t bands) {
    if (path.empty()) return std::nullopt;
    return load_ranking(path, bands);
}

}  // namespace

int main(int argc, char** argv) {
    tune_allocator();
    CLI::App app{"Band-order aware HSI + LiDAR fusion classification"};
    app.require_subcommand(1);
    const std::vector<std::string> args(argv, argv + argc);

    // synth
    SynthConfig synth_cfg;
    std::string synth_out;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic HSI + LiDAR scene");
    synth->add_option("--out", synth_out, "Output scene directory")->required();
    synth->add_option("--classes", synth_cfg.classes)->capture_default_str();
    synth->add_option("--bands", synth_cfg.bands)->capture_default_str();
    synth->add_option("--height", synth_cfg.height)->capture_default_str();
    synth->add_option("--width", synth_cfg.width)->capture_default_str();
    synth->add_option("--seed", synth_cfg.seed)->capture_default_str();
    synth->add_option("--spec-noise", synth_cfg.spectral_noise, "Spectral noise sigma")->capture_default_str();
    synth->add_option("--lidar-noise", synth_cfg.lidar_noise, "LiDAR noise sigma")->capture_default_str();
    synth->add_option("--smoothing", synth_cfg.smoothing_window, "Signature moving-average window (odd)")->capture_default_str();
    synth->add_option("--regions", synth_cfg.regions_per_axis, "Voronoi regions per axis")->capture_default_str();

    // rank
    std::string rank_data, rank_method = "fisher", rank_import, rank_out;
    std::uint64_t rank_split_seed = 0;
    std::size_t rank_per_class = 0;
    auto* rank = app.add_subcommand("rank", "Compute or import a band importance ranking");
    rank->add_option("--data", rank_data, "Scene directory")->required();
    auto* rank_method_opt = rank->add_option("--method", rank_method, "Ranking method")->check(CLI::IsMember({"fisher"}));
    rank->add_option("--split-seed", rank_split_seed)->capture_default_str();
    rank->add_option("--train-per-class", rank_per_class, "Training pixels per class");
    auto* rank_import_opt = rank->add_option("--import", rank_import, "Import a ranking file instead of computing one");
    rank->add_option("--out", rank_out, "Output ranking.json")->required();
    rank_import_opt->excludes(rank_method_opt);

    // train
    std::string train_data, train_order = "db1li", train_ranking, train_out;
    std::size_t train_patch = 7, train_per_class = 10, train_top_k = 0;
    std::optional<std::uint64_t> train_split_seed;
    TrainConfig train_cfg;
    Architecture train_arch;
    bool no_shuffle = false;
    auto* trainc = app.add_subcommand("train", "Train one configuration");
    trainc->add_option("--data", train_data, "Scene directory")->required();
    trainc->add_option("--order", train_order, "Band order(s), e.g. db1li or db1li+db2li")->capture_default_str();
    trainc->add_option("--ranking", train_ranking, "Ranking file for DB3/DB4 (Fisher on the split if omitted)");
    trainc->add_option("--patch", train_patch, "Patch size (odd)")->capture_default_str();
    trainc->add_option("--seed", train_cfg.seed, "Seed for initialization, shuffling and (by default) the split")
        ->capture_default_str();
    trainc->add_option("--split-seed", train_split_seed, "Seed for the train/test split");
    trainc->add_option("--train-per-class", train_per_class, "Training pixels per class")->capture_default_str();
    trainc->add_option("--out", train_out, "Output model file")->required();
    trainc->add_flag("--no-shuffle", no_shuffle, "Keep the sample order fixed across epochs");
    add_train_options(trainc, train_cfg);
    add_arch_options(trainc, train_arch, train_top_k);

    // eval
    std::string eval_model, eval_data, eval_report, eval_map, eval_split;
    auto* evalc = app.add_subcommand("eval", "Evaluate a trained model on its test split");
    evalc->add_option("--model", eval_model, "Model file")->required();
    evalc->add_option("--data", eval_data, "Scene directory")->required();
    evalc->add_option("--report", eval_report, "Output report.json")->required();
    evalc->add_option("--map", eval_map, "Output classification map (PPM)");
    evalc->add_option("--split", eval_split, "Split file (default: <model>.split.json)");

    // grid
    std::string grid_data, grid_out, grid_ranking;
    GridSettings grid;
    auto* gridc = app.add_subcommand("grid", "Train and evaluate all ten band-order configurations");
    gridc->add_option("--data", grid_data, "Scene directory")->required();
    gridc->add_option("--patch", grid.patch, "Patch size (odd)")->required();
    gridc->add_option("--train-per-class", grid.train_per_class, "Training pixels per class")->required();
    gridc->add_option("--seed", grid.seed)->capture_default_str();
    gridc->add_option("--out", grid_out, "Output grid.csv")->required();
    gridc->add_option("--ranking", grid_ranking, "Ranking file for DB3/DB4 (Fisher on the split if omitted)");
    gridc->add_option("--jobs", grid.jobs, "Configurations trained concurrently")->capture_default_str();
    add_train_options(gridc, grid.train);
    add_arch_options(gridc, grid.arch, grid.top_k);

    // sweep-patch
    std::string sweep_data, sweep_order = "db1li+db2li", sweep_sizes = "1,3,5,7,9,11,13,15", sweep_out, sweep_ranking;
    GridSettings sweep;
    auto* sweepc = app.add_subcommand("sweep-patch", "Train one configuration at several patch sizes");
    sweepc->add_option("--data", sweep_data, "Scene directory")->required();
    sweepc->add_option("--order", sweep_order)->capture_default_str();
    sweepc->add_option("--sizes", sweep_sizes, "Comma separated odd patch sizes, ascending")->capture_default_str();
    sweepc->add_option("--seed", sweep.seed)->capture_default_str();
    sweepc->add_option("--train-per-class", sweep.train_per_class, "Training pixels per class")->capture_default_str();
    sweepc->add_option("--ranking", sweep_ranking, "Ranking file for DB3/DB4");
    sweepc->add_option("--out", sweep_out, "Output sweep.csv")->required();
    add_train_options(sweepc, sweep.train);
    add_arch_options(sweepc, sweep.arch, sweep.top_k);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*synth) {
            RunManifest manifest{"synth", args};
            const Scene scene = generate(synth_cfg);
            write_scene(scene, synth_out);
            manifest.dataset = synth_out;
            manifest.settings = {{"classes", synth_cfg.classes},          {"bands", synth_cfg.bands},
                                 {"height", synth_cfg.height},            {"width", synth_cfg.width},
                                 {"seed", synth_cfg.seed},                {"spec_noise", synth_cfg.spectral_noise},
                                 {"lidar_noise", synth_cfg.lidar_noise},  {"smoothing", synth_cfg.smoothing_window},
                                 {"regions", synth_cfg.regions_per_axis}};
            manifest.outputs = {synth_out};
            manifest.write(fs::path(synth_out) / "manifest.json");
            std::cout << "scene " << scene.name << " written to " << synth_out << " (hash " << scene_hash(synth_out)
                      << ")\n";
        } else if (*rank) {
            RunManifest manifest{"rank", args};
            manifest.dataset = rank_data;
            const Scene scene = read_scene(rank_data);
            BandRanking ranking;
            if (!rank_import.empty()) {
                ranking = load_ranking(rank_import, scene.bands());
                manifest.settings = {{"import", fs::absolute(rank_import).string()}};
            } else {
                if (rank_per_class == 0) throw ConfigError("--train-per-class is required with --method fisher");
                const SplitSpec split = make_split(scene.labels, rank_per_class, rank_split_seed);
                ranking = rank_bands_fisher(scene, split.train_pixels());
                manifest.settings = {{"method", rank_method}, {"split_seed", rank_split_seed},
                                     {"train_per_class", rank_per_class}};
            }
            write_text(rank_out, ranking_to_json(ranking).dump() + "\n");
            manifest.outputs = {rank_out};
            manifest.write(sibling(rank_out, ".manifest.json"));
            std::cout << "ranking of " << ranking.bands() << " bands written to " << rank_out << "\n";
        } else if (*trainc) {
            RunManifest manifest{"train", args};
            manifest.dataset = train_data;
            const Scene scene = read_scene(train_data);
            train_cfg.shuffle = !no_shuffle;
            const SplitSpec split = make_split(scene.labels, train_per_class, train_split_seed.value_or(train_cfg.seed));
            std::optional<BandRanking> ranking = maybe_load_ranking(train_ranking, scene.bands());
            if (!ranking && order_list_needs_ranking(train_order))
                ranking = rank_bands_fisher(scene, split.train_pixels());
            const auto orders = parse_order_list(train_order, scene.bands(), ranking ? &*ranking : nullptr, train_top_k);
            const ModelConfig cfg = make_model_config(orders, scene, train_patch, train_arch);
            const TrainResult result = train(scene, split, cfg, train_cfg, [&](const EpochLog& e) {
                std::cerr << "epoch " << e.epoch << " loss " << e.mean_loss << " train_oa " << e.train_oa << "\n";
            });
            if (fs::path(train_out).has_parent_path()) fs::create_directories(fs::path(train_out).parent_path());
            save_model(cfg, result.params, train_out);
            write_split(split, sibling(train_out, ".split.json"));
            write_text(sibling(train_out, ".log.csv"), format_log_csv(result.log));
            manifest.settings = {{"order", train_order},
                                 {"config", cfg.id()},
                                 {"patch", train_patch},
                                 {"train_per_class", train_per_class},
                                 {"split_seed", split.seed},
                                 {"top_k", train_top_k},
                                 {"ranking", train_ranking.empty() ? nlohmann::json(nullptr)
                                                                   : nlohmann::json(fs::absolute(train_ranking).string())},
                                 {"architecture", architecture_json(train_arch)},
                                 {"train", train_config_json(train_cfg)}};
            manifest.outputs = {train_out, train_out + ".split.json", train_out + ".log.csv"};
            manifest.write(sibling(train_out, ".manifest.json"));
            std::cout << "model " << cfg.id() << " written to " << train_out << "\n";
        } else if (*evalc) {
            RunManifest manifest{"eval", args};
            manifest.dataset = eval_data;
            const Model model = load_model(eval_model);
            const Scene scene = read_scene(eval_data);
            check_compatible(model.config, scene);
            const SplitSpec split = read_split(eval_split.empty() ? sibling(eval_model, ".split.json") : fs::path(eval_split));
            validate_split(split, scene.labels);
            const Scene normalized = normalize(scene, split.train_pixels());
            const MetricsReport report = evaluate_pixels(model.params, model.config, normalized, split.test_pixels());
            write_text(eval_report, report_to_json(report).dump(2) + "\n");
            manifest.outputs = {eval_report};
            if (!eval_map.empty()) {
                std::vector<std::size_t> all(scene.pixels());
                for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
                const auto predicted = predict_pixels(model.params, model.config, normalized, all);
                if (fs::path(eval_map).has_parent_path()) fs::create_directories(fs::path(eval_map).parent_path());
                render_map(predicted, scene.height(), scene.width(), eval_map);
                manifest.outputs.push_back(eval_map);
            }
            manifest.settings = {{"model", fs::absolute(eval_model).string()}, {"config", model.config.id()}};
            manifest.write(sibling(eval_report, ".manifest.json"));
            std::cout << report.config << ": OA " << report.oa << " AA " << report.aa << " Kappa " << report.kappa << "\n";
        } else if (*gridc) {
            RunManifest manifest{"grid", args};
            manifest.dataset = grid_data;
            const Scene scene = read_scene(grid_data);
            grid.ranking = maybe_load_ranking(grid_ranking, scene.bands());
            const GridResult result = run_grid(scene, grid, [](const MetricsReport& r) {
                std::cerr << r.config << ": OA " << r.oa << " AA " << r.aa << " Kappa " << r.kappa << "\n";
            });
            const fs::path out(grid_out);
            write_text(out, grid_csv(result.reports, scene.classes));
            manifest.outputs = {grid_out};
            const fs::path dir = out.has_parent_path() ? out.parent_path() : fs::path(".");
            for (const auto& r : result.reports) {
                std::string name = r.config;
                std::replace(name.begin(), name.end(), '+', '_');
                const fs::path report_path = dir / (out.stem().string() + "_" + name + ".report.json");
                write_report(r, report_path);
                manifest.outputs.push_back(report_path.string());
            }
            write_split(result.split, sibling(grid_out, ".split.json"));
            write_text(sibling(grid_out, ".ranking.json"), ranking_to_json(result.ranking).dump() + "\n");
            TrainConfig used = grid.train;
            used.seed = grid.seed;
            std::vector<std::size_t> column_streams;
            for (const auto& c : result.configs) column_streams.push_back(c.num_streams());
            manifest.settings = {{"patch", grid.patch},
                                 {"train_per_class", grid.train_per_class},
                                 {"seed", grid.seed},
                                 {"top_k", grid.top_k},
                                 {"ranking", grid_ranking.empty() ? nlohmann::json("fisher")
                                                                  : nlohmann::json(fs::absolute(grid_ranking).string())},
                                 {"columns", kGridColumns},
                                 {"column_streams", column_streams},
                                 {"architecture", architecture_json(grid.arch)},
                                 {"train", train_config_json(used)}};
            manifest.write(sibling(grid_out, ".manifest.json"));
            std::cout << "grid of " << result.reports.size() << " configurations written to " << grid_out << "\n";
        } else if (*sweepc) {
            RunManifest manifest{"sweep-patch", args};
            manifest.dataset = sweep_data;
            const Scene scene = read_scene(sweep_data);
            sweep.ranking = maybe_load_ranking(sweep_ranking, scene.bands());
            const auto sizes = parse_sizes(sweep_sizes);
            const auto rows = run_sweep(scene, sweep_order, sizes, sweep, [](const SweepRow& r) {
                std::cerr << "patch " << r.patch << ": OA " << r.report.oa << "\n";
            });
            write_text(sweep_out, sweep_csv(rows));
            TrainConfig used = sweep.train;
            used.seed = sweep.seed;
            manifest.settings = {{"order", sweep_order},
                                 {"sizes", sizes},
                                 {"train_per_class", sweep.train_per_class},
                                 {"seed", sweep.seed},
                                 {"architecture", architecture_json(sweep.arch)},
                                 {"train", train_config_json(used)}};
            manifest.outputs = {sweep_out};
            manifest.write(sibling(sweep_out, ".manifest.json"));
            std::cout << "sweep of " << rows.size() << " patch sizes written to " << sweep_out << "\n";
        }
    } catch (const bandfuse::Error& e) {
        std::cerr << "bandfuse: " << e.what() << "\n";
        return 1;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "bandfuse: I/O error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "bandfuse: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
