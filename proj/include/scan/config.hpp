#pragma once

// Run configuration: every field has a default, a JSON file may override any
// of them, and command-line flags override the file. Unknown keys are
// rejected with the nearest valid key as a hint.

#include <algorithm>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "scan/checkpoint.hpp"
#include "scan/errors.hpp"
#include "scan/io.hpp"
#include "scan/model.hpp"
#include "scan/threshold_search.hpp"
#include "scan/trainer.hpp"

namespace scan {

struct DataConfig {
    std::string path;                  // dataset directory (IDX or CSV layout)
    std::string format = "idx";        // "idx" or "csv"
    std::size_t val_size = 1000;       // taken from the end of the training file
    std::string synthetic = "shapes";  // generator used by `synth`
    std::size_t train_size = 10000;    // synth: samples in the training file (val included)
    std::size_t test_size = 2000;      // synth: samples in the test file
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string model_preset = "tiny-3";
    ModelConfig model = ModelConfig::preset("tiny-3");
    DataConfig data;
    TrainConfig train;
    GAConfig search;
    std::vector<double> betas;  // Pareto sweep; empty means only search.beta
    std::string search_split = "val";
    std::string infer_split = "test";
    std::vector<std::size_t> attention_samples{0, 1, 2, 3};

    /// Pushes the single run seed into every seeded component.
    void apply_seed() {
        model.init_seed = seed;
        train.seed = seed;
        search.seed = seed;
    }
};

namespace detail {

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    std::iota(prev.begin(), prev.end(), std::size_t{0});
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

}  // namespace detail

/// Closest valid key by edit distance. Candidates are the valid keys and their
/// section prefixes cut to the same nesting depth as `key`, so a misspelt
/// section name is matched against section names.
inline std::string nearest_key(const std::string& key, const std::vector<std::string>& valid) {
    const auto depth = std::count(key.begin(), key.end(), '.');
    std::string best;
    std::size_t best_d = std::numeric_limits<std::size_t>::max();
    for (const auto& v : valid) {
        std::size_t cut = 0;
        for (long d = 0; d <= depth && cut != std::string::npos; ++d) cut = v.find('.', cut ? cut + 1 : 0);
        const std::string candidate = v.substr(0, cut);
        if (std::count(candidate.begin(), candidate.end(), '.') != depth) continue;
        const auto d = detail::edit_distance(key, candidate);
        if (d < best_d) {
            best_d = d;
            best = candidate;
        }
    }
    return best;
}

/// Every accepted key, dotted.
inline const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = {
        "seed",
        "model.preset", "model.attention", "model.num_classes", "model.in_channels", "model.height", "model.width",
        "model.sections",
        "data.path", "data.format", "data.val_size", "data.synthetic", "data.train_size", "data.test_size",
        "train.epochs", "train.batch_size", "train.learning_rate", "train.momentum", "train.weight_decay",
        "train.milestones", "train.lr_decay", "train.augment", "train.augment_pad", "train.flip_probability",
        "distill.alpha", "distill.lambda", "distill.temperature",
        "search.population", "search.generations", "search.mutation_rate", "search.crossover_rate",
        "search.elitism", "search.beta", "search.betas", "search.bits_per_exit", "search.split",
        "infer.split",
        "attention.samples",
    };
    return keys;
}

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& prefix) {
    if (!j.is_object()) throw ConfigError("config section '" + prefix + "' must be an object");
    const auto& keys = config_keys();
    for (const auto& [k, v] : j.items()) {
        const std::string full = prefix.empty() ? k : prefix + "." + k;
        const bool leaf = std::find(keys.begin(), keys.end(), full) != keys.end();
        const bool section = std::any_of(keys.begin(), keys.end(),
                                         [&](const std::string& c) { return c.rfind(full + ".", 0) == 0; });
        if (section && v.is_object()) {
            check_keys(v, full);
        } else if (!leaf) {
            throw ConfigError("unknown config key '" + full + "'; nearest valid key is '" + nearest_key(full, keys) +
                              "'");
        }
    }
}

template <class V>
void read(const nlohmann::json& j, const char* section, const char* key, V& out) {
    if (!j.contains(section) || !j.at(section).contains(key)) return;
    try {
        out = j.at(section).at(key).get<V>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config key '") + section + "." + key + "': " + e.what());
    }
}

}  // namespace detail

inline void apply_config_json(RunConfig& rc, const nlohmann::json& j) {
    detail::check_keys(j, "");
    if (j.contains("seed")) rc.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("model") && j.at("model").contains("preset")) {
        rc.model_preset = j.at("model").at("preset").get<std::string>();
        rc.model = ModelConfig::preset(rc.model_preset);
    }
    detail::read(j, "model", "attention", rc.model.attention);
    detail::read(j, "model", "num_classes", rc.model.num_classes);
    detail::read(j, "model", "in_channels", rc.model.in_channels);
    detail::read(j, "model", "height", rc.model.height);
    detail::read(j, "model", "width", rc.model.width);
    if (j.contains("model") && j.at("model").contains("sections")) {
        rc.model.sections.clear();
        for (const auto& s : j.at("model").at("sections")) {
            rc.model.sections.push_back({s.at("channels").get<std::size_t>(), s.value("stride", std::size_t{1}),
                                         s.value("depth", std::size_t{1})});
        }
    }
    detail::read(j, "data", "path", rc.data.path);
    detail::read(j, "data", "format", rc.data.format);
    detail::read(j, "data", "val_size", rc.data.val_size);
    detail::read(j, "data", "synthetic", rc.data.synthetic);
    detail::read(j, "data", "train_size", rc.data.train_size);
    detail::read(j, "data", "test_size", rc.data.test_size);
    detail::read(j, "train", "epochs", rc.train.epochs);
    detail::read(j, "train", "batch_size", rc.train.batch_size);
    detail::read(j, "train", "learning_rate", rc.train.sgd.learning_rate);
    detail::read(j, "train", "momentum", rc.train.sgd.momentum);
    detail::read(j, "train", "weight_decay", rc.train.sgd.weight_decay);
    detail::read(j, "train", "milestones", rc.train.milestones);
    detail::read(j, "train", "lr_decay", rc.train.lr_decay);
    detail::read(j, "train", "augment", rc.train.augment.enabled);
    detail::read(j, "train", "augment_pad", rc.train.augment.pad);
    detail::read(j, "train", "flip_probability", rc.train.augment.flip_probability);
    detail::read(j, "distill", "alpha", rc.train.distill.alpha);
    detail::read(j, "distill", "lambda", rc.train.distill.lambda_hint);
    detail::read(j, "distill", "temperature", rc.train.distill.temperature);
    detail::read(j, "search", "population", rc.search.population);
    detail::read(j, "search", "generations", rc.search.generations);
    detail::read(j, "search", "mutation_rate", rc.search.mutation_rate);
    detail::read(j, "search", "crossover_rate", rc.search.crossover_rate);
    detail::read(j, "search", "elitism", rc.search.elitism);
    detail::read(j, "search", "beta", rc.search.beta);
    detail::read(j, "search", "betas", rc.betas);
    detail::read(j, "search", "bits_per_exit", rc.search.bits_per_exit);
    detail::read(j, "search", "split", rc.search_split);
    detail::read(j, "infer", "split", rc.infer_split);
    detail::read(j, "attention", "samples", rc.attention_samples);
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    RunConfig rc;
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_bytes(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config '" + path.string() + "': " + e.what());
    }
    apply_config_json(rc, j);
    return rc;
}

/// Complete effective configuration; feeding it back reproduces the run.
inline nlohmann::json to_json(const RunConfig& rc) {
    nlohmann::json sections = nlohmann::json::array();
    for (const auto& s : rc.model.sections) sections.push_back({{"channels", s.channels}, {"stride", s.stride}, {"depth", s.depth}});
    return {
        {"seed", rc.seed},
        {"model",
         {{"preset", rc.model_preset},
          {"attention", rc.model.attention},
          {"num_classes", rc.model.num_classes},
          {"in_channels", rc.model.in_channels},
          {"height", rc.model.height},
          {"width", rc.model.width},
          {"sections", sections}}},
        {"data",
         {{"path", rc.data.path},
          {"format", rc.data.format},
          {"val_size", rc.data.val_size},
          {"synthetic", rc.data.synthetic},
          {"train_size", rc.data.train_size},
          {"test_size", rc.data.test_size}}},
        {"train",
         {{"epochs", rc.train.epochs},
          {"batch_size", rc.train.batch_size},
          {"learning_rate", rc.train.sgd.learning_rate},
          {"momentum", rc.train.sgd.momentum},
          {"weight_decay", rc.train.sgd.weight_decay},
          {"milestones", rc.train.milestones},
          {"lr_decay", rc.train.lr_decay},
          {"augment", rc.train.augment.enabled},
          {"augment_pad", rc.train.augment.pad},
          {"flip_probability", rc.train.augment.flip_probability}}},
        {"distill",
         {{"alpha", rc.train.distill.alpha},
          {"lambda", rc.train.distill.lambda_hint},
          {"temperature", rc.train.distill.temperature}}},
        {"search",
         {{"population", rc.search.population},
          {"generations", rc.search.generations},
          {"mutation_rate", rc.search.mutation_rate},
          {"crossover_rate", rc.search.crossover_rate},
          {"elitism", rc.search.elitism},
          {"beta", rc.search.beta},
          {"betas", rc.betas},
          {"bits_per_exit", rc.search.bits_per_exit},
          {"split", rc.search_split}}},
        {"infer", {{"split", rc.infer_split}}},
        {"attention", {{"samples", rc.attention_samples}}},
    };
}

/// Hash of the settings that influence trained weights. Search, inference and
/// dataset-generation keys are left out.
inline std::string training_fingerprint(const RunConfig& rc) {
    nlohmann::json j = to_json(rc);
    j.erase("search");
    j.erase("infer");
    j.erase("attention");
    j["data"].erase("synthetic");
    j["data"].erase("train_size");
    j["data"].erase("test_size");
    return hex64(fnv1a(j.dump()));
}

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw ConfigError("unknown split '" + s + "' (expected train, val or test)");
}

/// Training, validation and test splits of the configured dataset, standardized
/// with statistics of the training portion (or with `norm` when given).
struct DataSplits {
    Dataset train, val, test;
    Normalization normalization;

    const Dataset& get(Split s) const { return s == Split::Train ? train : s == Split::Val ? val : test; }
};

inline DataSplits load_splits(const DataConfig& dc, std::size_t num_classes, std::size_t channels, std::size_t height,
                              std::size_t width, const Normalization* norm = nullptr) {
    if (dc.path.empty()) throw ConfigError("no dataset path given (--dataset or data.path)");
    const std::filesystem::path dir(dc.path);
    Dataset full, test;
    if (dc.format == "idx") {
        full = load_idx(dir / IdxLayout::images(Split::Train), dir / IdxLayout::labels(Split::Train), num_classes);
        test = load_idx(dir / IdxLayout::images(Split::Test), dir / IdxLayout::labels(Split::Test), num_classes,
                        Split::Test);
    } else if (dc.format == "csv") {
        full = load_csv(dir / "train.csv", channels, height, width, num_classes);
        test = load_csv(dir / "test.csv", channels, height, width, num_classes, Split::Test);
    } else {
        throw ConfigError("data.format must be 'idx' or 'csv', got '" + dc.format + "'");
    }
    if (dc.val_size >= full.size()) {
        throw ConfigError("data.val_size " + std::to_string(dc.val_size) + " leaves no training samples out of " +
                          std::to_string(full.size()));
    }
    DataSplits s;
    s.train = full.slice(0, full.size() - dc.val_size, Split::Train);
    s.val = full.slice(full.size() - dc.val_size, dc.val_size, Split::Val);
    s.test = std::move(test);
    s.normalization = norm ? *norm : compute_normalization(s.train);
    standardize(s.train, s.normalization);
    standardize(s.val, s.normalization);
    standardize(s.test, s.normalization);
    return s;
}

}  // namespace scan
