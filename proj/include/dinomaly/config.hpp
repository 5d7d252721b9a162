#pragma once

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dinomaly/encoder.hpp"
#include "dinomaly/synthetic.hpp"
#include "dinomaly/trainer.hpp"

namespace dinomaly {

struct RunConfig {
    std::string data_root;
    std::string out_dir;
    std::string train_mode;   // muad | separated
    std::string train_class;  // optional single-class filter
    std::string enc_kind;     // toy_vit | feature_cache
    std::string enc_cache_dir;
    int enc_cache_layers = 12;
    std::uint64_t seed = 0;
    TrainConfig train;
    PreprocessSpec pre;
    ToyVitConfig enc;
    SynthSpec synth;
    int plot_samples = 4;
};

struct KeySpec {
    enum class Kind { kInt, kU64, kDouble, kBool, kString };
    std::string key;
    Kind kind;
    std::string def;
    std::string desc;
};

inline const std::vector<KeySpec>& config_registry() {
    using K = KeySpec::Kind;
    static const std::vector<KeySpec> keys = {
        {"data.root", K::kString, "", "dataset root directory (MVTec layout)"},
        {"out.dir", K::kString, "out", "output directory"},
        {"run.seed", K::kU64, "0", "master seed"},
        {"train.mode", K::kString, "muad", "muad (pooled classes) or separated (per class)"},
        {"train.class", K::kString, "", "restrict training/eval to one class"},
        {"train.total_iters", K::kInt, "10000", "training iterations"},
        {"train.batch_size", K::kInt, "16", "batch size"},
        {"train.eval_every", K::kInt, "0", "mid-training eval cadence (0 = off)"},
        {"train.balanced", K::kBool, "false", "per-class balanced batch sampling"},
        {"train.abort_after_nonfinite", K::kInt, "10", "abort after N consecutive non-finite losses"},
        {"model.d", K::kInt, "64", "token embedding dimension"},
        {"model.heads", K::kInt, "1", "attention heads"},
        {"model.decoder_depth", K::kInt, "8", "decoder layers"},
        {"model.mlp_ratio", K::kDouble, "4", "decoder MLP expansion"},
        {"model.attention", K::kString, "linear",
         "softmax | linear | softmax_neighbor_masked(n) | linear_neighbor_masked(n) | conv_mixer(k)"},
        {"model.scheme", K::kString, "group(2)", "dense | sparse(k) | cat_layer | group(g)"},
        {"model.collect", K::kString, "2..9", "encoder layers to collect (a..b or comma list)"},
        {"model.hidden_ratio", K::kDouble, "4", "bottleneck MLP expansion"},
        {"noise.kind", K::kString, "dropout", "dropout | feature_jitter | patch_masking | none"},
        {"noise.p", K::kDouble, "0.2", "dropout / patch-masking probability"},
        {"noise.scale", K::kDouble, "20", "feature jitter scale"},
        {"hm.k_max", K::kDouble, "90", "hard-mining discard percentage at full ramp"},
        {"hm.warmup_iters", K::kInt, "1000", "hard-mining ramp length"},
        {"hm.shrink", K::kDouble, "0.1", "gradient shrink factor for easy points"},
        {"hm.per_pair", K::kBool, "false", "percentile per pair instead of jointly"},
        {"optim.lr_peak", K::kDouble, "0.002", "peak learning rate"},
        {"optim.lr_final", K::kDouble, "0.0002", "final learning rate"},
        {"optim.beta1", K::kDouble, "0.9", "first-moment decay"},
        {"optim.beta2", K::kDouble, "0.999", "second-moment decay"},
        {"optim.weight_decay", K::kDouble, "0.0001", "decoupled weight decay"},
        {"optim.eps", K::kDouble, "1e-10", "adaptive denominator floor"},
        {"optim.warmup_iters", K::kInt, "100", "lr warmup length"},
        {"optim.amsgrad", K::kBool, "true", "non-decreasing second moment"},
        {"pre.resize", K::kInt, "112", "resize edge before crop"},
        {"pre.crop", K::kInt, "112", "center crop edge"},
        {"pre.mean", K::kString, "0.485,0.456,0.406", "per-channel normalization mean"},
        {"pre.std", K::kString, "0.229,0.224,0.225", "per-channel normalization std"},
        {"enc.kind", K::kString, "toy_vit", "toy_vit | feature_cache"},
        {"enc.depth", K::kInt, "12", "toy encoder depth"},
        {"enc.d", K::kInt, "64", "toy encoder dimension"},
        {"enc.patch", K::kInt, "14", "toy encoder patch size"},
        {"enc.image", K::kInt, "112", "toy encoder input edge"},
        {"enc.heads", K::kInt, "1", "toy encoder heads"},
        {"enc.seed", K::kU64, "0", "toy encoder parameter seed"},
        {"enc.cache_dir", K::kString, "", "feature cache directory"},
        {"enc.cache_layers", K::kInt, "12", "layer count expected in the feature cache"},
        {"eval.size", K::kInt, "256", "anomaly map evaluation edge"},
        {"eval.top_fraction", K::kDouble, "0.01", "image score top-pixel fraction"},
        {"aupro.fpr_limit", K::kDouble, "0.3", "AUPRO integration limit"},
        {"synth.classes", K::kInt, "3", "synthetic class count"},
        {"synth.train_per_class", K::kInt, "100", "synthetic train images per class"},
        {"synth.test_per_class", K::kInt, "40", "synthetic test images per class"},
        {"synth.image_size", K::kInt, "112", "synthetic image edge"},
        {"plot.samples", K::kInt, "4", "heatmap panel sample count"},
    };
    return keys;
}

class ConfigStore {
  public:
    ConfigStore() {
        for (const auto& k : config_registry()) values_[k.key] = k.def;
    }

    void set(const std::string& key, const std::string& value) {
        const KeySpec* spec = nullptr;
        for (const auto& k : config_registry())
            if (k.key == key) {
                spec = &k;
                break;
            }
        if (!spec) throw ConfigError("config: unknown key '" + key + "'");
        check_type(*spec, value);
        values_[key] = value;
    }

    const std::string& get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("config: unknown key '" + key + "'");
        return it->second;
    }

    int geti(const std::string& key) const { return static_cast<int>(getll(key)); }

    long long getll(const std::string& key) const {
        try {
            std::size_t pos = 0;
            const long long v = std::stoll(get(key), &pos);
            if (pos != get(key).size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config: key " + key + " expects an integer, got '" + get(key) +
                              "'");
        }
    }

    std::uint64_t getu64(const std::string& key) const {
        try {
            std::size_t pos = 0;
            const auto v = std::stoull(get(key), &pos);
            if (pos != get(key).size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config: key " + key + " expects an unsigned integer, got '" +
                              get(key) + "'");
        }
    }

    double getd(const std::string& key) const {
        try {
            std::size_t pos = 0;
            const double v = std::stod(get(key), &pos);
            if (pos != get(key).size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config: key " + key + " expects a number, got '" + get(key) +
                              "'");
        }
    }

    bool getb(const std::string& key) const {
        const std::string& v = get(key);
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw ConfigError("config: key " + key + " expects true/false, got '" + v + "'");
    }

    void echo(std::ostream& os) const {
        for (const auto& k : config_registry()) os << k.key << " = " << values_.at(k.key) << '\n';
    }

    RunConfig materialize() const;

  private:
    static void check_type(const KeySpec& spec, const std::string& value) {
        using K = KeySpec::Kind;
        std::size_t pos = 0;
        try {
            switch (spec.kind) {
                case K::kInt:
                    (void)std::stoll(value, &pos);
                    break;
                case K::kU64:
                    (void)std::stoull(value, &pos);
                    break;
                case K::kDouble:
                    (void)std::stod(value, &pos);
                    break;
                case K::kBool:
                    if (value != "true" && value != "false" && value != "0" && value != "1")
                        throw std::invalid_argument("bool");
                    pos = value.size();
                    break;
                case K::kString:
                    pos = value.size();
                    break;
            }
        } catch (const std::exception&) {
            pos = std::string::npos;
        }
        if (pos != value.size())
            throw ConfigError("config: key " + spec.key + " expects " + kind_name(spec.kind) +
                              ", got '" + value + "'");
    }

    static const char* kind_name(KeySpec::Kind k) {
        switch (k) {
            case KeySpec::Kind::kInt: return "an integer";
            case KeySpec::Kind::kU64: return "an unsigned integer";
            case KeySpec::Kind::kDouble: return "a number";
            case KeySpec::Kind::kBool: return "true/false";
            default: return "a string";
        }
    }

    std::map<std::string, std::string> values_;
};

// line-based `key = value` text; '#' starts a comment
inline std::vector<std::pair<std::string, std::string>> parse_config_file(
    const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open file " + path);
    std::vector<std::pair<std::string, std::string>> pairs;
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r");
        const auto b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: " + path + ":" + std::to_string(lineno) +
                              ": expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw ConfigError("config: " + path + ":" + std::to_string(lineno) + ": empty key");
        pairs.push_back({key, value});
    }
    return pairs;
}

inline std::vector<int> parse_collect_list(const std::string& s) {
    std::vector<int> out;
    const auto dots = s.find("..");
    try {
        if (dots != std::string::npos) {
            const int a = std::stoi(s.substr(0, dots));
            const int b = std::stoi(s.substr(dots + 2));
            if (b < a) throw std::invalid_argument("range");
            for (int i = a; i <= b; ++i) out.push_back(i);
        } else {
            std::stringstream ss(s);
            std::string item;
            while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
        }
    } catch (const std::exception&) {
        throw ConfigError("config: model.collect expects 'a..b' or a comma list, got '" + s +
                          "'");
    }
    if (out.empty()) throw ConfigError("config: model.collect is empty");
    return out;
}

inline std::array<double, 3> parse_triplet(const std::string& key, const std::string& s) {
    std::array<double, 3> out{};
    std::stringstream ss(s);
    std::string item;
    int i = 0;
    while (std::getline(ss, item, ',')) {
        if (i >= 3) throw ConfigError("config: key " + key + " expects three numbers");
        try {
            out[static_cast<std::size_t>(i++)] = std::stod(item);
        } catch (const std::exception&) {
            throw ConfigError("config: key " + key + " expects three numbers, got '" + s + "'");
        }
    }
    if (i != 3) throw ConfigError("config: key " + key + " expects three numbers, got '" + s + "'");
    return out;
}

inline RunConfig ConfigStore::materialize() const {
    RunConfig rc;
    rc.data_root = get("data.root");
    rc.out_dir = get("out.dir");
    if (const char* root = std::getenv("DINOMALY_OUT_ROOT");
        root && *root && !rc.out_dir.empty() && rc.out_dir.front() != '/')
        rc.out_dir = (std::filesystem::path(root) / rc.out_dir).string();
    rc.seed = getu64("run.seed");
    rc.train_mode = get("train.mode");
    if (rc.train_mode != "muad" && rc.train_mode != "separated")
        throw ConfigError("config: train.mode expects muad or separated, got '" +
                          rc.train_mode + "'");
    rc.train_class = get("train.class");

    rc.train.total_iters = geti("train.total_iters");
    rc.train.batch_size = geti("train.batch_size");
    rc.train.seed = rc.seed;
    rc.train.eval_every = geti("train.eval_every");
    rc.train.balanced_sampling = getb("train.balanced");
    rc.train.abort_after_nonfinite = geti("train.abort_after_nonfinite");
    rc.train.eval_size = geti("eval.size");
    rc.train.top_fraction = getd("eval.top_fraction");
    rc.train.aupro_fpr_limit = getd("aupro.fpr_limit");

    rc.train.hard_mining.k_max = getd("hm.k_max");
    rc.train.hard_mining.warmup_iters = geti("hm.warmup_iters");
    rc.train.hard_mining.shrink_factor = getd("hm.shrink");
    rc.train.hard_mining.per_pair_percentile = getb("hm.per_pair");

    rc.train.optim.lr_peak = getd("optim.lr_peak");
    rc.train.optim.lr_final = getd("optim.lr_final");
    rc.train.optim.beta1 = getd("optim.beta1");
    rc.train.optim.beta2 = getd("optim.beta2");
    rc.train.optim.weight_decay = getd("optim.weight_decay");
    rc.train.optim.eps = getd("optim.eps");
    rc.train.optim.warmup_iters = geti("optim.warmup_iters");
    rc.train.optim.amsgrad = getb("optim.amsgrad");

    ModelConfig& m = rc.train.model;
    m.d = geti("model.d");
    m.num_heads = geti("model.heads");
    m.decoder_depth = geti("model.decoder_depth");
    m.mlp_ratio = getd("model.mlp_ratio");
    m.attention = AttentionKindSpec::parse(get("model.attention"));
    m.scheme = ConstraintScheme::parse(get("model.scheme"));
    m.collected_indices = parse_collect_list(get("model.collect"));
    const std::string noise_kind = get("noise.kind");
    std::string noise_expr;
    if (noise_kind == "dropout" || noise_kind == "patch_masking")
        noise_expr = noise_kind + "(" + get("noise.p") + ")";
    else if (noise_kind == "feature_jitter")
        noise_expr = noise_kind + "(" + get("noise.scale") + ")";
    else if (noise_kind == "none")
        noise_expr = "none";
    else
        throw ConfigError("config: noise.kind expects dropout | feature_jitter | "
                          "patch_masking | none, got '" + noise_kind + "'");
    m.bottleneck = BottleneckConfig::parse_noise(noise_expr, getd("model.hidden_ratio"));

    rc.pre.resize_to = geti("pre.resize");
    rc.pre.crop_to = geti("pre.crop");
    rc.pre.mean = parse_triplet("pre.mean", get("pre.mean"));
    rc.pre.stddev = parse_triplet("pre.std", get("pre.std"));
    rc.pre.validate();

    rc.enc_kind = get("enc.kind");
    if (rc.enc_kind != "toy_vit" && rc.enc_kind != "feature_cache")
        throw ConfigError("config: enc.kind expects toy_vit or feature_cache, got '" +
                          rc.enc_kind + "'");
    rc.enc.depth = geti("enc.depth");
    rc.enc.d = geti("enc.d");
    rc.enc.patch = geti("enc.patch");
    rc.enc.image = geti("enc.image");
    rc.enc.heads = geti("enc.heads");
    rc.enc.seed = getu64("enc.seed");
    rc.enc_cache_dir = get("enc.cache_dir");
    rc.enc_cache_layers = geti("enc.cache_layers");

    rc.synth.classes = geti("synth.classes");
    rc.synth.train_per_class = geti("synth.train_per_class");
    rc.synth.test_per_class = geti("synth.test_per_class");
    rc.synth.image_size = geti("synth.image_size");
    rc.synth.seed = rc.seed;
    rc.plot_samples = geti("plot.samples");

    // cross-field constraints
    const int layer_count = rc.enc_kind == "toy_vit" ? rc.enc.depth : rc.enc_cache_layers;
    for (int idx : m.collected_indices)
        if (idx < 0 || idx >= layer_count)
            throw ConfigError("config: model.collect index " + std::to_string(idx) +
                              " outside encoder depth " + std::to_string(layer_count));
    if (rc.enc_kind == "toy_vit") {
        rc.enc.validate();
        if (m.d != rc.enc.d)
            throw ConfigError("config: model.d (" + std::to_string(m.d) +
                              ") must equal enc.d (" + std::to_string(rc.enc.d) + ")");
        if (rc.pre.crop_to != rc.enc.image)
            throw ConfigError("config: pre.crop (" + std::to_string(rc.pre.crop_to) +
                              ") must equal enc.image (" + std::to_string(rc.enc.image) + ")");
    }
    const auto groups = static_cast<int>(m.collected_indices.size());
    if (m.scheme.kind == ConstraintScheme::Kind::kGroup && groups % m.scheme.groups != 0)
        throw ConfigError("config: model.scheme group(" + std::to_string(m.scheme.groups) +
                          ") does not divide " + std::to_string(groups) + " collected layers");
    if (m.decoder_depth != groups)
        throw ConfigError("config: model.decoder_depth (" + std::to_string(m.decoder_depth) +
                          ") must equal collected layer count (" + std::to_string(groups) + ")");
    rc.train.validate();
    return rc;
}

}  // namespace dinomaly
