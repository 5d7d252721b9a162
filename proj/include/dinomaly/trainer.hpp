#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dinomaly/checkpoint.hpp"
#include "dinomaly/encoder.hpp"
#include "dinomaly/loss.hpp"
#include "dinomaly/metrics.hpp"
#include "dinomaly/model.hpp"
#include "dinomaly/optim.hpp"
#include "dinomaly/scoring.hpp"

namespace dinomaly {

struct TrainConfig {
    int total_iters = 10000;
    int batch_size = 16;
    std::uint64_t seed = 0;
    int eval_every = 0;  // 0 disables mid-training evaluation
    bool muad = true;
    bool balanced_sampling = false;
    int eval_size = 256;
    double top_fraction = 0.01;
    double aupro_fpr_limit = 0.3;
    int abort_after_nonfinite = 10;
    HardMiningConfig hard_mining;
    OptimConfig optim;
    ModelConfig model;

    void validate() const {
        if (total_iters < 0) throw ConfigError("train: total_iters must be >= 0");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (eval_size < 1) throw ConfigError("train: eval_size must be >= 1");
        if (abort_after_nonfinite < 1)
            throw ConfigError("train: abort_after_nonfinite must be >= 1");
        hard_mining.validate();
        optim.validate();
    }
};

inline nlohmann::json model_config_json(const ModelConfig& cfg) {
    nlohmann::json j;
    j["d"] = cfg.d;
    j["num_heads"] = cfg.num_heads;
    j["decoder_depth"] = cfg.decoder_depth;
    j["mlp_ratio"] = cfg.mlp_ratio;
    j["attention"] = cfg.attention.to_string();
    j["noise"] = cfg.bottleneck.noise_string();
    j["hidden_ratio"] = cfg.bottleneck.hidden_ratio;
    j["scheme"] = cfg.scheme.to_string();
    j["collected_indices"] = cfg.collected_indices;
    return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.d = j.at("d").get<std::int64_t>();
    cfg.num_heads = j.at("num_heads").get<int>();
    cfg.decoder_depth = j.at("decoder_depth").get<int>();
    cfg.mlp_ratio = j.at("mlp_ratio").get<double>();
    cfg.attention = AttentionKindSpec::parse(j.at("attention").get<std::string>());
    cfg.bottleneck = BottleneckConfig::parse_noise(j.at("noise").get<std::string>(),
                                                   j.at("hidden_ratio").get<double>());
    cfg.scheme = ConstraintScheme::parse(j.at("scheme").get<std::string>());
    cfg.collected_indices = j.at("collected_indices").get<std::vector<int>>();
    return cfg;
}

// per-sample encoder features held in memory, keyed by record id
class FeatureStore {
  public:
    void build(const std::vector<const SampleRecord*>& records, const EncoderBackend& backend) {
        for (const auto* r : records)
            if (!by_id_.count(r->id)) by_id_[r->id] = backend.features_for(*r);
    }

    const std::vector<TokenGrid<float>>& layers_of(const std::string& id) const {
        auto it = by_id_.find(id);
        if (it == by_id_.end()) throw DataError("feature store: no features for " + id);
        return it->second;
    }

    // stack per-sample layer grids into batched [B, N, d] grids
    std::vector<TokenGrid<float>> stack(const std::vector<const SampleRecord*>& batch) const {
        if (batch.empty()) throw InputError("feature store: empty batch");
        const auto& first = layers_of(batch[0]->id);
        const auto b = static_cast<std::int64_t>(batch.size());
        std::vector<TokenGrid<float>> out;
        out.reserve(first.size());
        for (std::size_t li = 0; li < first.size(); ++li) {
            TokenGrid<float> g(b, first[li].grid_h, first[li].grid_w, first[li].dim());
            out.push_back(std::move(g));
        }
        for (std::int64_t bi = 0; bi < b; ++bi) {
            const auto& layers = layers_of(batch[static_cast<std::size_t>(bi)]->id);
            if (layers.size() != first.size())
                throw DataError("feature store: layer count mismatch for " +
                                batch[static_cast<std::size_t>(bi)]->id);
            for (std::size_t li = 0; li < layers.size(); ++li) {
                if (!layers[li].same_layout(first[li]))
                    throw DataError("feature store: grid layout mismatch for " +
                                    batch[static_cast<std::size_t>(bi)]->id);
                const auto n = layers[li].data.numel();
                std::copy(layers[li].data.data.begin(), layers[li].data.data.end(),
                          out[li].data.data.begin() + bi * n);
            }
        }
        return out;
    }

    std::size_t size() const { return by_id_.size(); }

  private:
    std::map<std::string, std::vector<TokenGrid<float>>> by_id_;
};

struct TrainResult {
    std::string checkpoint_path;
    std::string best_checkpoint_path;  // empty when eval_every == 0
    std::string log_path;
    double final_loss = 0.0;
    std::uint64_t nonfinite_steps = 0;
};

namespace detail {

inline std::string format_metric_cell(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

}  // namespace detail

// one training batch: uniform over the pool, or two-stage uniform over buckets
inline std::vector<const SampleRecord*> draw_batch(
    Rng& rng, const std::vector<const SampleRecord*>& pool,
    const std::vector<std::vector<const SampleRecord*>>& buckets, int batch_size) {
    std::vector<const SampleRecord*> batch;
    batch.reserve(static_cast<std::size_t>(batch_size));
    for (int bi = 0; bi < batch_size; ++bi) {
        if (!buckets.empty()) {
            const auto& bucket = buckets[rng.uniform_index(buckets.size())];
            batch.push_back(bucket[rng.uniform_index(bucket.size())]);
        } else {
            batch.push_back(pool[rng.uniform_index(pool.size())]);
        }
    }
    return batch;
}

// run one trained model over a class's test split
template <typename T>
std::array<double, 7> evaluate_class(DinomalyModel<T>& model, const DatasetIndex& index,
                                     const std::string& class_name,
                                     const FeatureStore& store, const TrainConfig& cfg,
                                     const std::string& artifacts_dir = "",
                                     std::vector<std::pair<std::string, double>>* score_rows =
                                         nullptr) {
    namespace fs = std::filesystem;
    const bool was_training = model.training_mode;
    model.training_mode = false;
    auto test = index.select(class_name, "test");
    if (test.empty()) throw DataError("evaluate: class " + class_name + " has no test split");

    std::vector<double> image_scores;
    std::vector<std::uint8_t> image_labels;
    std::vector<AnomalyMap> maps;
    std::vector<Tensor<std::uint8_t>> masks;
    std::vector<double> pixel_scores;
    std::vector<std::uint8_t> pixel_labels;

    for (const auto* rec : test) {
        auto layers = store.stack({rec});
        auto fused = collect_and_fuse(layers, model.cfg.collected_indices);
        auto dec = model.decoder_forward(fused, nullptr, false);
        std::vector<TokenGrid<float>> collected;
        for (int idx : model.cfg.collected_indices)
            collected.push_back(layers[static_cast<std::size_t>(idx)]);
        auto groups = build_groups(collected, dec, model.cfg.scheme);
        auto batch_maps = anomaly_maps(groups, cfg.eval_size, cfg.eval_size,
                                       model.training_mode);
        AnomalyMap map = std::move(batch_maps[0]);
        const double score = image_score(map, cfg.top_fraction);

        image_scores.push_back(score);
        image_labels.push_back(static_cast<std::uint8_t>(rec->label));
        auto mask = load_mask(*rec, cfg.eval_size, cfg.eval_size);
        for (std::int64_t p = 0; p < map.values.numel(); ++p) {
            pixel_scores.push_back(static_cast<double>(map.values[p]));
            pixel_labels.push_back(mask[p]);
        }
        if (score_rows) score_rows->push_back({rec->id, score});
        if (!artifacts_dir.empty()) {
            std::string flat = rec->id;
            for (auto& ch : flat)
                if (ch == '/') ch = '~';
            save_map((fs::path(artifacts_dir) / (flat + ".dmap")).string(), rec->id, map);
            ImageU8 heat(map.h(), map.w(), 3);
            for (int y = 0; y < map.h(); ++y)
                for (int x = 0; x < map.w(); ++x) {
                    const auto rgb = heat_color(static_cast<double>(
                        map.values[static_cast<std::int64_t>(y) * map.w() + x]));
                    for (int ch = 0; ch < 3; ++ch) heat.at(y, x, ch) = rgb[static_cast<std::size_t>(ch)];
                }
            write_png((fs::path(artifacts_dir) / (flat + ".png")).string(), heat);
        }
        maps.push_back(std::move(map));
        masks.push_back(std::move(mask));
    }
    model.training_mode = was_training;

    std::array<double, 7> row{};
    row[0] = auroc(image_scores, image_labels);
    row[1] = average_precision(image_scores, image_labels);
    row[2] = f1_max(image_scores, image_labels);
    row[3] = auroc(pixel_scores, pixel_labels);
    row[4] = average_precision(pixel_scores, pixel_labels);
    row[5] = f1_max(pixel_scores, pixel_labels);
    row[6] = aupro(maps, masks, cfg.aupro_fpr_limit);
    return row;
}

template <typename T>
EvalReport evaluate_model(DinomalyModel<T>& model, const DatasetIndex& index,
                          const FeatureStore& store, const TrainConfig& cfg,
                          const std::string& artifacts_dir = "",
                          std::vector<std::pair<std::string, double>>* score_rows = nullptr) {
    EvalReport report;
    for (const auto& cls : index.classes) {
        try {
            report.per_class[cls] =
                evaluate_class(model, index, cls, store, cfg, artifacts_dir, score_rows);
        } catch (const InputError& e) {
            throw DataError("evaluate: class " + cls + ": " + e.what());
        }
        report.classes.push_back(cls);
    }
    report.finalize();
    return report;
}

template <typename T>
TrainResult train(const TrainConfig& cfg, const DatasetIndex& index,
                  const EncoderBackend& backend, const std::string& out_dir,
                  const std::string& class_filter = "", FeatureStore* shared_store = nullptr,
                  DinomalyModel<T>* model_out = nullptr) {
    namespace fs = std::filesystem;
    cfg.validate();
    fs::create_directories(out_dir);

    auto train_records = index.select(class_filter, "train");
    if (train_records.empty())
        throw DataError("train: empty training split" +
                        (class_filter.empty() ? std::string() : " for class " + class_filter));
    for (const auto* r : train_records)
        if (r->label != 0)
            throw DataError("train: anomalous sample in training split: " + r->id);

    FeatureStore local_store;
    FeatureStore& store = shared_store ? *shared_store : local_store;
    store.build(train_records, backend);

    // per-class buckets for balanced sampling
    std::vector<std::vector<const SampleRecord*>> buckets;
    if (cfg.balanced_sampling) {
        std::map<std::string, std::vector<const SampleRecord*>> by_class;
        for (const auto* r : train_records) by_class[r->class_name].push_back(r);
        for (auto& [cls, recs] : by_class) buckets.push_back(std::move(recs));
    }

    DinomalyModel<T> model(cfg.model);
    Rng init_rng(derive_seed(cfg.seed, "init"));
    model.init(init_rng);
    auto params = model.params();

    OptimConfig optim_cfg = cfg.optim;
    optim_cfg.total_iters = std::max(cfg.total_iters, 1);
    StableAdamW<T> opt(optim_cfg);
    opt.bind(params);

    Rng sample_rng(derive_seed(cfg.seed, "sample"));
    Rng noise_rng(derive_seed(cfg.seed, "noise"));

    const std::string log_path = (fs::path(out_dir) / "train_log.csv").string();
    std::ofstream log(log_path);
    if (!log) throw DataError("train: cannot open log " + log_path);
    log << "iteration,loss,k,lr,shrunk_fraction,clip_fraction\n";

    TrainResult result;
    result.log_path = log_path;
    double best_metric = -1.0;
    int consecutive_nonfinite = 0;
    double last_loss = 0.0;

    for (int it = 0; it < cfg.total_iters; ++it) {
        auto batch = draw_batch(sample_rng, train_records, buckets, cfg.batch_size);
        auto layers = store.stack(batch);
        auto fused = collect_and_fuse(layers, cfg.model.collected_indices);
        auto dec = model.decoder_forward(fused, &noise_rng, true);
        std::vector<TokenGrid<T>> collected;
        for (int idx : cfg.model.collected_indices)
            collected.push_back(layers[static_cast<std::size_t>(idx)]);
        auto groups = build_groups(collected, dec, cfg.model.scheme);

        LossResult<T> loss;
        try {
            loss = global_hm_loss(groups, it, cfg.hard_mining);
        } catch (const NumericError&) {
            ++result.nonfinite_steps;
            if (++consecutive_nonfinite >= cfg.abort_after_nonfinite)
                throw NumericError("train: loss non-finite for " +
                                   std::to_string(consecutive_nonfinite) +
                                   " consecutive steps, last at iteration " +
                                   std::to_string(it));
            log << it << ",nan," << current_k(it, cfg.hard_mining) << ','
                << lr_at(it, optim_cfg) << ",0,0\n";
            continue;
        }
        consecutive_nonfinite = 0;

        auto dec_grads = build_groups_backward(loss.dec_grads, cfg.model.scheme,
                                               static_cast<int>(dec.size()), dec[0]);
        model.decoder_backward(dec_grads);
        opt.step(params, lr_at(it, optim_cfg));
        zero_grads(params);

        last_loss = loss.loss;
        log << it << ',' << detail::format_metric_cell(loss.loss) << ','
            << detail::format_metric_cell(loss.k) << ','
            << detail::format_metric_cell(lr_at(it, optim_cfg)) << ','
            << detail::format_metric_cell(loss.shrunk_fraction) << ','
            << detail::format_metric_cell(opt.last_clip_fraction) << '\n';

        if (cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0) {
            auto test_records = index.select(class_filter, "test");
            store.build(test_records, backend);
            DatasetIndex eval_index;
            eval_index.records = index.records;
            eval_index.classes =
                class_filter.empty() ? index.classes : std::vector<std::string>{class_filter};
            auto report = evaluate_model(model, eval_index, store, cfg);
            if (report.mean[0] > best_metric) {
                best_metric = report.mean[0];
                result.best_checkpoint_path =
                    (fs::path(out_dir) / "checkpoint_best.dckpt").string();
                nlohmann::json meta;
                meta["model"] = model_config_json(cfg.model);
                meta["seed"] = cfg.seed;
                meta["iteration"] = it + 1;
                meta["i_auroc"] = report.mean[0];
                save_checkpoint(result.best_checkpoint_path, params, meta);
            }
        }
    }
    log.close();

    result.final_loss = last_loss;
    result.checkpoint_path = (fs::path(out_dir) / "checkpoint_final.dckpt").string();
    nlohmann::json meta;
    meta["model"] = model_config_json(cfg.model);
    meta["seed"] = cfg.seed;
    meta["iteration"] = cfg.total_iters;
    save_checkpoint(result.checkpoint_path, params, meta);
    if (model_out) *model_out = std::move(model);
    return result;
}

// rebuild a model from a checkpoint written by train()
template <typename T = float>
DinomalyModel<T> model_from_checkpoint(const Checkpoint& ckpt) {
    DinomalyModel<T> model(model_config_from_json(ckpt.meta.at("model")));
    auto params = model.params();
    load_params(ckpt, params);
    model.training_mode = false;
    return model;
}

}  // namespace dinomaly
