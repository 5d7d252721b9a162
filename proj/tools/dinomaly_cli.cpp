#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "dinomaly/config.hpp"
#include "dinomaly/plot.hpp"
#include "dinomaly/synthetic.hpp"
#include "dinomaly/trainer.hpp"

namespace fs = std::filesystem;
using namespace dinomaly;

namespace {

struct CommonArgs {
    std::string config_path;
    std::map<std::string, std::string> flags;
};

void add_config_options(CLI::App* cmd, CommonArgs* args) {
    cmd->add_option("--config", args->config_path, "line-based `key = value` config file");
    for (const auto& k : config_registry()) {
        const std::string key = k.key;
        cmd->add_option_function<std::string>(
            "--" + key,
            [args, key](const std::string& v) { args->flags[key] = v; },
            k.desc + " (default " + (k.def.empty() ? "empty" : k.def) + ")");
    }
}

struct Resolved {
    ConfigStore store;
    RunConfig rc;
    std::map<std::string, std::string> explicit_keys;
};

Resolved resolve(const CommonArgs& args, const std::string& mode_hint = "") {
    ConfigStore store;
    std::map<std::string, std::string> explicit_keys;
    if (!args.config_path.empty())
        for (const auto& [k, v] : parse_config_file(args.config_path)) {
            store.set(k, v);
            explicit_keys[k] = v;
        }
    for (const auto& [k, v] : args.flags) {
        store.set(k, v);
        explicit_keys[k] = v;
    }
    // class-separated schedule defaults apply unless the user pinned them
    const std::string mode = explicit_keys.count("train.mode") ? explicit_keys.at("train.mode")
                                                               : mode_hint;
    if ((mode == "separated" ||
         (mode.empty() && store.get("train.mode") == "separated"))) {
        if (!explicit_keys.count("train.total_iters")) store.set("train.total_iters", "5000");
        if (!explicit_keys.count("hm.warmup_iters")) store.set("hm.warmup_iters", "500");
    }
    return {store, store.materialize(), explicit_keys};
}

void echo_config(const ConfigStore& store, const std::string& dir) {
    fs::create_directories(dir);
    std::ofstream os(fs::path(dir) / "config_resolved.txt");
    if (!os) throw DataError("cannot write resolved config into " + dir);
    store.echo(os);
}

EncoderBackend make_backend(const RunConfig& rc) {
    if (rc.enc_kind == "toy_vit") return EncoderBackend::toy_vit(rc.enc, rc.pre);
    if (rc.enc_cache_dir.empty())
        throw ConfigError("enc.cache_dir is required with enc.kind = feature_cache");
    return EncoderBackend::feature_cache(rc.enc_cache_dir, rc.enc_cache_layers);
}

std::string flat_id(const std::string& id) {
    std::string flat = id;
    for (auto& ch : flat)
        if (ch == '/') ch = '~';
    return flat;
}

void write_scores_csv(const std::string& path,
                      const std::vector<std::pair<std::string, double>>& rows,
                      const DatasetIndex& index) {
    std::map<std::string, const SampleRecord*> by_id;
    for (const auto& r : index.records) by_id[r.id] = &r;
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path);
    os << "path,class,image_score\n";
    for (const auto& [id, score] : rows) {
        const auto* rec = by_id.at(id);
        os << rec->image_path << ',' << rec->class_name << ','
           << detail::format_metric_cell(score) << '\n';
    }
}

int run_synth(const CommonArgs& args) {
    auto [store, rc, explicit_keys] = resolve(args);
    if (rc.data_root.empty()) throw ConfigError("synth: data.root is required (target dir)");
    synth_dataset(rc.synth, rc.data_root);
    echo_config(store, rc.data_root);
    std::cout << "synthetic dataset written to " << rc.data_root << "\n";
    return 0;
}

int run_train(const CommonArgs& args) {
    auto [store, rc, explicit_keys] = resolve(args);
    if (rc.data_root.empty()) throw ConfigError("train: data.root is required");
    echo_config(store, rc.out_dir);
    auto index = load_mvtec_layout(rc.data_root);
    auto backend = make_backend(rc);

    EvalReport report;
    if (rc.train_mode == "muad") {
        FeatureStore store_mem;
        DinomalyModel<float> model;
        auto result = train<float>(rc.train, index, backend, rc.out_dir, rc.train_class,
                                   &store_mem, &model);
        std::cout << "trained " << rc.train.total_iters << " iters, final loss "
                  << result.final_loss << "\n";
        DatasetIndex eval_index = index;
        if (!rc.train_class.empty()) eval_index.classes = {rc.train_class};
        store_mem.build(eval_index.select(rc.train_class, "test"), backend);
        const std::string maps_dir = (fs::path(rc.out_dir) / "maps").string();
        fs::create_directories(maps_dir);
        std::vector<std::pair<std::string, double>> score_rows;
        report = evaluate_model(model, eval_index, store_mem, rc.train, maps_dir, &score_rows);
        write_scores_csv((fs::path(rc.out_dir) / "scores.csv").string(), score_rows, index);
    } else {
        std::vector<std::string> classes =
            rc.train_class.empty() ? index.classes : std::vector<std::string>{rc.train_class};
        std::vector<std::pair<std::string, double>> score_rows;
        const std::string maps_dir = (fs::path(rc.out_dir) / "maps").string();
        fs::create_directories(maps_dir);
        for (const auto& cls : classes) {
            FeatureStore store_mem;
            DinomalyModel<float> model;
            const std::string cls_dir = (fs::path(rc.out_dir) / cls).string();
            train<float>(rc.train, index, backend, cls_dir, cls, &store_mem, &model);
            store_mem.build(index.select(cls, "test"), backend);
            report.per_class[cls] = evaluate_class(model, index, cls, store_mem, rc.train,
                                                   maps_dir, &score_rows);
            report.classes.push_back(cls);
            std::cout << "class " << cls << " trained\n";
        }
        report.finalize();
        write_scores_csv((fs::path(rc.out_dir) / "scores.csv").string(), score_rows, index);
    }
    write_report_csv((fs::path(rc.out_dir) / "report.csv").string(), report);
    write_report_json((fs::path(rc.out_dir) / "report.json").string(), report);
    std::cout << "mean I-AUROC " << report.mean[0] << ", P-AUROC " << report.mean[3] << "\n";
    std::cout << "report written to " << rc.out_dir << "/report.csv\n";
    return 0;
}

int run_predict(const CommonArgs& args, const std::string& checkpoint) {
    auto [store, rc, explicit_keys] = resolve(args);
    if (rc.data_root.empty()) throw ConfigError("predict: data.root is required");
    if (checkpoint.empty()) throw ConfigError("predict: --checkpoint is required");
    echo_config(store, rc.out_dir);
    auto index = load_mvtec_layout(rc.data_root);
    auto backend = make_backend(rc);
    auto model = model_from_checkpoint<float>(load_checkpoint(checkpoint));

    FeatureStore store_mem;
    auto test = index.select(rc.train_class, "test");
    store_mem.build(test, backend);
    const std::string maps_dir = (fs::path(rc.out_dir) / "maps").string();
    fs::create_directories(maps_dir);

    std::vector<std::pair<std::string, double>> score_rows;
    for (const auto* rec : test) {
        auto layers = store_mem.stack({rec});
        auto fused = collect_and_fuse(layers, model.cfg.collected_indices);
        auto dec = model.decoder_forward(fused, nullptr, false);
        std::vector<TokenGrid<float>> collected;
        for (int idx : model.cfg.collected_indices)
            collected.push_back(layers[static_cast<std::size_t>(idx)]);
        auto groups = build_groups(collected, dec, model.cfg.scheme);
        auto maps = anomaly_maps(groups, rc.train.eval_size, rc.train.eval_size,
                                 model.training_mode);
        const double score = image_score(maps[0], rc.train.top_fraction);
        score_rows.push_back({rec->id, score});
        save_map((fs::path(maps_dir) / (flat_id(rec->id) + ".dmap")).string(), rec->id,
                 maps[0]);
        ImageU8 heat(maps[0].h(), maps[0].w(), 3);
        for (int y = 0; y < maps[0].h(); ++y)
            for (int x = 0; x < maps[0].w(); ++x) {
                const auto rgb = heat_color(static_cast<double>(
                    maps[0].values[static_cast<std::int64_t>(y) * maps[0].w() + x]));
                for (int ch = 0; ch < 3; ++ch)
                    heat.at(y, x, ch) = rgb[static_cast<std::size_t>(ch)];
            }
        write_png((fs::path(maps_dir) / (flat_id(rec->id) + ".png")).string(), heat);
    }
    write_scores_csv((fs::path(rc.out_dir) / "scores.csv").string(), score_rows, index);
    std::cout << score_rows.size() << " predictions written to " << rc.out_dir << "\n";
    return 0;
}

int run_evaluate(const CommonArgs& args, const std::string& checkpoint,
                 const std::string& predictions_dir) {
    auto [store, rc, explicit_keys] = resolve(args);
    if (rc.data_root.empty()) throw ConfigError("evaluate: data.root is required");
    if (checkpoint.empty() == predictions_dir.empty())
        throw ConfigError("evaluate: exactly one of --checkpoint or --predictions is required");
    echo_config(store, rc.out_dir);
    auto index = load_mvtec_layout(rc.data_root);

    EvalReport report;
    std::vector<std::pair<std::string, double>> score_rows;
    if (!checkpoint.empty()) {
        auto backend = make_backend(rc);
        auto model = model_from_checkpoint<float>(load_checkpoint(checkpoint));
        FeatureStore store_mem;
        DatasetIndex eval_index = index;
        if (!rc.train_class.empty()) eval_index.classes = {rc.train_class};
        store_mem.build(eval_index.select(rc.train_class, "test"), backend);
        const std::string maps_dir = (fs::path(rc.out_dir) / "maps").string();
        fs::create_directories(maps_dir);
        report = evaluate_model(model, eval_index, store_mem, rc.train, maps_dir, &score_rows);
    } else {
        // metrics recomputed from dumped per-image maps
        for (const auto& cls : index.classes) {
            if (!rc.train_class.empty() && cls != rc.train_class) continue;
            std::vector<double> image_scores, pixel_scores;
            std::vector<std::uint8_t> image_labels, pixel_labels;
            std::vector<AnomalyMap> maps;
            std::vector<Tensor<std::uint8_t>> masks;
            for (const auto* rec : index.select(cls, "test")) {
                const std::string map_path =
                    (fs::path(predictions_dir) / (flat_id(rec->id) + ".dmap")).string();
                if (!fs::exists(map_path))
                    throw DataError("evaluate: missing map for " + rec->id + " (expected " +
                                    map_path + ")");
                auto map = load_map(map_path);
                const double score = image_score(map, rc.train.top_fraction);
                score_rows.push_back({rec->id, score});
                image_scores.push_back(score);
                image_labels.push_back(static_cast<std::uint8_t>(rec->label));
                auto mask = load_mask(*rec, map.h(), map.w());
                for (std::int64_t p = 0; p < map.values.numel(); ++p) {
                    pixel_scores.push_back(static_cast<double>(map.values[p]));
                    pixel_labels.push_back(mask[p]);
                }
                maps.push_back(std::move(map));
                masks.push_back(std::move(mask));
            }
            if (maps.empty()) continue;
            std::array<double, 7> row{};
            row[0] = auroc(image_scores, image_labels);
            row[1] = average_precision(image_scores, image_labels);
            row[2] = f1_max(image_scores, image_labels);
            row[3] = auroc(pixel_scores, pixel_labels);
            row[4] = average_precision(pixel_scores, pixel_labels);
            row[5] = f1_max(pixel_scores, pixel_labels);
            row[6] = aupro(maps, masks, rc.train.aupro_fpr_limit);
            report.per_class[cls] = row;
            report.classes.push_back(cls);
        }
        if (report.classes.empty()) throw DataError("evaluate: no classes with dumped maps");
        report.finalize();
    }
    write_report_csv((fs::path(rc.out_dir) / "report.csv").string(), report);
    write_report_json((fs::path(rc.out_dir) / "report.json").string(), report);
    write_scores_csv((fs::path(rc.out_dir) / "scores.csv").string(), score_rows, index);
    std::cout << "mean I-AUROC " << report.mean[0] << ", P-AUROC " << report.mean[3] << "\n";
    return 0;
}

int run_plot(const CommonArgs& args, const std::string& run_dir) {
    auto [store, rc, explicit_keys] = resolve(args);
    if (rc.data_root.empty()) throw ConfigError("plot: data.root is required");
    if (run_dir.empty()) throw ConfigError("plot: --run is required (train/evaluate output dir)");
    const std::string maps_dir = (fs::path(run_dir) / "maps").string();
    for (const auto& required : {run_dir, maps_dir})
        if (!fs::exists(required))
            throw DataError("plot: missing artifacts: expected " + required);

    auto index = load_mvtec_layout(rc.data_root);
    const std::string plots_dir = (fs::path(rc.out_dir) / "plots").string();
    fs::create_directories(plots_dir);

    for (const auto& cls : index.classes) {
        if (!rc.train_class.empty() && cls != rc.train_class) continue;
        auto test = index.select(cls, "test");
        std::vector<double> scores, normal_scores, anomalous_scores;
        std::vector<std::uint8_t> labels;
        std::vector<const SampleRecord*> available;
        for (const auto* rec : test) {
            const std::string map_path =
                (fs::path(maps_dir) / (flat_id(rec->id) + ".dmap")).string();
            if (!fs::exists(map_path))
                throw DataError("plot: missing map for " + rec->id + " (expected " + map_path +
                                ")");
            auto map = load_map(map_path);
            const double score = image_score(map, rc.train.top_fraction);
            scores.push_back(score);
            labels.push_back(static_cast<std::uint8_t>(rec->label));
            (rec->label ? anomalous_scores : normal_scores).push_back(score);
            if (rec->label) available.push_back(rec);
        }
        const auto base = (fs::path(plots_dir) / cls).string();
        auto roc = roc_polyline(scores, labels);
        write_polyline_json(base + "_roc.json", cls + " ROC", roc);
        render_roc_png(base + "_roc.png", roc);
        auto hist = score_histogram(normal_scores, anomalous_scores);
        write_histogram_json(base + "_hist.json", hist);
        render_histogram_png(base + "_hist.png", hist);

        const auto chosen = seeded_selection(
            available.size(), static_cast<std::size_t>(rc.plot_samples), rc.seed);
        std::vector<std::array<ImageU8, 3>> rows;
        for (const auto sel : chosen) {
            const auto* rec = available[sel];
            const ImageU8 input = read_png(rec->image_path);
            const ImageU8 heat = read_png(
                (fs::path(maps_dir) / (flat_id(rec->id) + ".png")).string());
            ImageU8 mask_img(input.h, input.w, 3);
            if (!rec->mask_path.empty()) {
                const ImageU8 m = read_png(rec->mask_path);
                for (int y = 0; y < m.h && y < mask_img.h; ++y)
                    for (int x = 0; x < m.w && x < mask_img.w; ++x)
                        for (int ch = 0; ch < 3; ++ch) mask_img.at(y, x, ch) = m.at(y, x, 0);
            }
            rows.push_back({input, heat, mask_img});
        }
        if (!rows.empty()) write_png(base + "_panel.png", sample_panel(rows));
    }
    std::cout << "plots written to " << plots_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dinomaly: multi-class unsupervised anomaly detection"};
    app.require_subcommand(1);

    CommonArgs synth_args, train_args, predict_args, eval_args, plot_args;
    std::string checkpoint, predictions_dir, run_dir;

    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic MVTec-layout dataset");
    add_config_options(synth_cmd, &synth_args);

    auto* train_cmd = app.add_subcommand("train", "train a model and evaluate it");
    add_config_options(train_cmd, &train_args);

    auto* predict_cmd = app.add_subcommand("predict", "score test images with a checkpoint");
    add_config_options(predict_cmd, &predict_args);
    predict_cmd->add_option("--checkpoint", checkpoint, "checkpoint archive path");

    auto* eval_cmd = app.add_subcommand("evaluate", "compute the 7-metric report");
    add_config_options(eval_cmd, &eval_args);
    eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint archive path");
    eval_cmd->add_option("--predictions", predictions_dir, "maps dir from a previous run");

    auto* plot_cmd = app.add_subcommand("plot", "ROC curves, histograms, heatmap panels");
    add_config_options(plot_cmd, &plot_args);
    plot_cmd->add_option("--run", run_dir, "train/evaluate output dir holding maps/");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (synth_cmd->parsed()) return run_synth(synth_args);
        if (train_cmd->parsed()) return run_train(train_args);
        if (predict_cmd->parsed()) return run_predict(predict_args, checkpoint);
        if (eval_cmd->parsed()) return run_evaluate(eval_args, checkpoint, predictions_dir);
        if (plot_cmd->parsed()) return run_plot(plot_args, run_dir);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const InputError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    }
    return 1;
}
