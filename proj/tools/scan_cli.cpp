// scan: train, evaluate, cache, search, infer and visualise multi-exit networks.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "scan/scan.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string dataset;
    std::string checkpoint;
    std::string thresholds;
    std::vector<double> betas;
    std::optional<std::uint32_t> generations;
    std::optional<std::uint32_t> population;
    std::string out = ".";
    std::vector<std::string> images;
};

scan::RunConfig effective_config(const Options& o) {
    scan::RunConfig rc = o.config.empty() ? scan::RunConfig{} : scan::load_run_config(o.config);
    if (o.seed) rc.seed = *o.seed;
    if (!o.dataset.empty()) rc.data.path = o.dataset;
    if (!o.betas.empty()) rc.betas = o.betas;
    if (o.generations) rc.search.generations = *o.generations;
    if (o.population) rc.search.population = *o.population;
    rc.apply_seed();
    return rc;
}

/// Prints the configuration and stores it next to the command's outputs.
void echo_config(const std::string& command, const scan::RunConfig& rc, const Options& o) {
    const auto text = scan::to_json(rc).dump(2);
    std::cout << "# effective configuration (" << command << ", seed " << rc.seed << ")\n" << text << "\n";
    scan::write_atomic(fs::path(o.out) / (command + "_config.json"), text + "\n");
}

std::string fmt(double v, int digits = 4) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

std::string join(const std::vector<double>& v, int digits = 4) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt(v[i], digits);
    return s;
}

void require(const std::string& value, const char* flag) {
    if (value.empty()) throw scan::ConfigError(std::string("missing required flag ") + flag);
}

scan::DataSplits splits_for(const scan::RunConfig& rc, const scan::ModelConfig& m,
                            const scan::Normalization* norm = nullptr) {
    return scan::load_splits(rc.data, m.num_classes, m.in_channels, m.height, m.width, norm);
}

// ---------------------------------------------------------------------------

int cmd_synth(const Options& o) {
    auto rc = effective_config(o);
    echo_config("synth", rc, o);
    auto train = scan::synth::generate(rc.data.synthetic, rc.data.train_size, rc.seed);
    auto test = scan::synth::generate(rc.data.synthetic, rc.data.test_size, rc.seed + 1);
    const fs::path dir(o.out);
    const auto [ti, tl] = scan::encode_idx(train);
    const auto [si, sl] = scan::encode_idx(test);
    scan::write_atomic(dir / scan::IdxLayout::images(scan::Split::Train), ti);
    scan::write_atomic(dir / scan::IdxLayout::labels(scan::Split::Train), tl);
    scan::write_atomic(dir / scan::IdxLayout::images(scan::Split::Test), si);
    scan::write_atomic(dir / scan::IdxLayout::labels(scan::Split::Test), sl);
    std::cout << "wrote '" << rc.data.synthetic << "' dataset: " << train.size() << " train, " << test.size()
              << " test samples (" << train.num_classes << " classes) to " << dir.string() << "\n";
    return 0;
}

int cmd_train(const Options& o) {
    auto rc = effective_config(o);
    echo_config("train", rc, o);
    const auto started = std::chrono::steady_clock::now();
    auto data = splits_for(rc, rc.model);
    scan::ScanNetwork<float> net(rc.model);
    std::cout << "model " << rc.model.name << ": " << net.num_exits() << " exits, " << net.parameter_count()
              << " parameters; " << data.train.size() << " train / " << data.val.size() << " val / "
              << data.test.size() << " test samples\n";
    auto result = scan::train(net, data.train, data.val, rc.train, [](const scan::EpochSummary& s) {
        std::cout << "epoch " << s.epoch << "  lr " << s.learning_rate << "  train acc [" << join(s.train_accuracy)
                  << "]  val acc [" << join(s.val.exit_accuracy) << "] ens " << fmt(s.val.ensemble_accuracy) << "  ("
                  << fmt(s.seconds, 1) << " s)\n"
                  << std::flush;
    });
    result.checkpoint.normalization = data.normalization;
    result.checkpoint.fingerprint = scan::training_fingerprint(rc);
    result.checkpoint.run_config = scan::to_json(rc);
    const fs::path out(o.out);
    scan::save_checkpoint(out / "checkpoint.bin", result.checkpoint);
    scan::write_atomic(out / "metrics.csv", result.checkpoint.history.to_csv());
    const auto test = scan::evaluate(net, data.test, rc.train.distill);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    std::cout << "best epoch " << result.best_epoch << " (deepest val acc " << fmt(result.best_val_accuracy) << ")\n"
              << "test acc per exit [" << join(test.exit_accuracy) << "] ensemble " << fmt(test.ensemble_accuracy)
              << "\n"
              << "wrote " << (out / "checkpoint.bin").string() << " and " << (out / "metrics.csv").string() << " in "
              << fmt(secs, 1) << " s\n";
    return 0;
}

int cmd_eval(const Options& o) {
    require(o.checkpoint, "--checkpoint");
    auto rc = effective_config(o);
    echo_config("eval", rc, o);
    auto ck = scan::load_checkpoint(o.checkpoint);
    auto data = splits_for(rc, ck.network.config(), &ck.normalization);
    std::ostringstream csv;
    csv << "split,exit,accuracy\n";
    for (auto split : {scan::Split::Val, scan::Split::Test}) {
        const auto& ds = data.get(split);
        if (ds.size() == 0) continue;
        const auto r = scan::evaluate(ck.network, ds, rc.train.distill);
        std::cout << scan::to_string(split) << ": exit acc [" << join(r.exit_accuracy) << "] ensemble "
                  << fmt(r.ensemble_accuracy) << "\n";
        for (std::size_t i = 0; i < r.exit_accuracy.size(); ++i) {
            csv << scan::to_string(split) << ',' << i + 1 << ',' << scan::shortest(r.exit_accuracy[i]) << '\n';
        }
        csv << scan::to_string(split) << ",ensemble," << scan::shortest(r.ensemble_accuracy) << '\n';
    }
    scan::write_atomic(fs::path(o.out) / "eval.csv", csv.str());
    return 0;
}

scan::LogitCache build_cache(const scan::RunConfig& rc, const scan::Checkpoint& ck, const std::string& split) {
    auto data = splits_for(rc, ck.network.config(), &ck.normalization);
    return scan::export_logit_cache(ck.network, data.get(scan::parse_split(split)));
}

int cmd_cache(const Options& o) {
    require(o.checkpoint, "--checkpoint");
    auto rc = effective_config(o);
    echo_config("cache", rc, o);
    auto ck = scan::load_checkpoint(o.checkpoint);
    const auto cache = build_cache(rc, ck, rc.search_split);
    const auto path = fs::path(o.out) / ("cache_" + rc.search_split + ".bin");
    scan::save_logit_cache(path, cache);
    std::cout << "cached " << cache.n << " samples x " << cache.num_exits << " exits x " << cache.num_classes
              << " classes to " << path.string() << "\n";
    return 0;
}

int cmd_search(const Options& o) {
    require(o.checkpoint, "--checkpoint");
    auto rc = effective_config(o);
    rc.search.validate();
    echo_config("search", rc, o);
    auto ck = scan::load_checkpoint(o.checkpoint);
    const auto cache = build_cache(rc, ck, rc.search_split);
    const scan::CacheSummary summary(cache);
    const double baseline = summary.deepest_accuracy();
    const std::vector<double> betas = rc.betas.empty() ? std::vector<double>{rc.search.beta} : rc.betas;
    const fs::path out(o.out);
    std::cout << "search on " << rc.search_split << " split: " << cache.n << " samples, deepest-exit baseline "
              << fmt(baseline) << "\n";

    std::ostringstream pareto;
    pareto << "beta,accuracy,acceleration,fitness,thresholds\n";
    json report = json::array();
    for (std::size_t b = 0; b < betas.size(); ++b) {
        auto cfg = rc.search;
        cfg.beta = betas[b];
        const auto r = scan::search(summary, cfg, baseline);
        if (r.degenerate_cache) std::cout << "warning: degenerate cache (all rows identical)\n";
        std::cout << "beta " << betas[b] << ": thresholds [" << join(r.thresholds.sigma) << "] accuracy "
                  << fmt(r.report.accuracy) << " acceleration " << fmt(r.report.acceleration_ratio, 3) << "x fitness "
                  << fmt(r.report.fitness) << "\n";
        std::string sig;
        for (std::size_t i = 0; i < r.thresholds.size(); ++i) sig += (i ? " " : "") + fmt(r.thresholds.sigma[i], 6);
        pareto << scan::shortest(betas[b]) << ',' << scan::shortest(r.report.accuracy) << ','
               << scan::shortest(r.report.acceleration_ratio) << ',' << scan::shortest(r.report.fitness) << ',' << sig << '\n';
        report.push_back({{"beta", betas[b]},
                          {"thresholds", r.thresholds.sigma},
                          {"fitness", r.report.fitness},
                          {"acceleration", r.report.acceleration_ratio},
                          {"accuracy", r.report.accuracy},
                          {"baseline", baseline},
                          {"degenerate_cache", r.degenerate_cache}});
        const std::string suffix = betas.size() > 1 ? "_beta" + scan::shortest(betas[b]) : "";
        scan::save_thresholds(out / ("thresholds" + suffix + ".txt"), r.thresholds);
        scan::write_atomic(out / ("generations" + suffix + ".csv"), scan::generation_log_csv(r.log));
        if (b == 0 && betas.size() > 1) scan::save_thresholds(out / "thresholds.txt", r.thresholds);
    }
    scan::write_atomic(out / "pareto.csv", pareto.str());
    scan::write_atomic(out / "search_report.json", report.dump(2) + "\n");
    return 0;
}

int cmd_infer(const Options& o) {
    require(o.checkpoint, "--checkpoint");
    require(o.thresholds, "--thresholds");
    auto rc = effective_config(o);
    echo_config("infer", rc, o);
    auto ck = scan::load_checkpoint(o.checkpoint);
    const auto thresholds = scan::load_thresholds(o.thresholds);
    thresholds.validate(ck.network.num_exits());
    auto data = splits_for(rc, ck.network.config(), &ck.normalization);
    const auto& ds = data.get(scan::parse_split(rc.infer_split));
    const auto r = scan::batch_scalable_infer(ck.network, ds, thresholds);
    std::vector<std::size_t> exits;
    for (const auto& t : r.traces) exits.push_back(t.exit_used);
    const auto dist = scan::exit_distribution(exits, ck.network.num_exits());
    double deepest = 0.0;
    {
        const auto ev = scan::evaluate(ck.network, ds, rc.train.distill);
        deepest = ev.exit_accuracy.back();
    }
    std::cout << "split " << rc.infer_split << " (" << ds.size() << " samples)\n"
              << "accuracy " << fmt(r.accuracy) << " (deepest exit " << fmt(deepest) << ")\n"
              << "acceleration " << fmt(r.acceleration, 3) << "x\n"
              << "exit histogram [" << join(dist.fraction) << "] (last slot: ensemble), difficulty "
              << fmt(dist.difficulty) << "\n";
    const fs::path out(o.out);
    scan::write_atomic(out / "traces.csv", scan::traces_to_csv(r.traces, ds.labels));
    json report = {{"split", rc.infer_split},
                   {"samples", ds.size()},
                   {"accuracy", r.accuracy},
                   {"deepest_accuracy", deepest},
                   {"acceleration", r.acceleration},
                   {"exit_fractions", dist.fraction},
                   {"mean_exit", dist.mean_exit},
                   {"difficulty", dist.difficulty},
                   {"thresholds", thresholds.sigma}};
    scan::write_atomic(out / "infer_report.json", report.dump(2) + "\n");
    return 0;
}

int cmd_attention(const Options& o) {
    require(o.checkpoint, "--checkpoint");
    auto rc = effective_config(o);
    echo_config("attention", rc, o);
    auto ck = scan::load_checkpoint(o.checkpoint);
    const auto& net = ck.network;
    if (!net.has_attention()) throw scan::ContractError("checkpoint was trained without attention modules");
    const auto& in = net.topology().input;

    // Inputs: explicit graymaps, or configured sample indices of a dataset split.
    std::vector<std::pair<std::string, scan::Tensor<float>>> inputs;
    if (!o.images.empty()) {
        for (const auto& p : o.images) {
            const auto img = scan::decode_pgm(scan::read_bytes(p), "'" + p + "'");
            if (in.channels != 1 || img.width != in.width || img.height != in.height) {
                throw scan::ShapeError("'" + p + "' is " + std::to_string(img.width) + "x" +
                                       std::to_string(img.height) + ", network expects " + scan::to_string(in));
            }
            std::vector<float> px(img.values.size());
            for (std::size_t k = 0; k < px.size(); ++k) {
                px[k] = static_cast<float>((img.values[k] - ck.normalization.mean[0]) / ck.normalization.stddev[0]);
            }
            inputs.emplace_back(fs::path(p).stem().string(),
                                scan::Tensor<float>({1, in.channels, in.height, in.width}, std::move(px)));
        }
    } else {
        auto data = splits_for(rc, net.config(), &ck.normalization);
        const auto& ds = data.get(scan::Split::Test);
        for (auto idx : rc.attention_samples) {
            if (idx >= ds.size()) throw scan::ContractError("attention sample " + std::to_string(idx) + " out of range");
            inputs.emplace_back("test" + std::to_string(idx), ds.sample(idx));
        }
    }

    const fs::path dir = fs::path(o.out) / "attention";
    scan::NoGradGuard no_grad;
    for (const auto& [name, x] : inputs) {
        const auto fr = net.forward_all(x);
        for (std::size_t e = 0; e < fr.attention_maps.size(); ++e) {
            const auto& map = fr.attention_maps[e];
            const std::size_t C = map.dim(1), H = map.dim(2), W = map.dim(3);
            std::vector<double> mean(H * W, 0.0);
            for (std::size_t c = 0; c < C; ++c) {
                for (std::size_t k = 0; k < H * W; ++k) mean[k] += map[c * H * W + k];
            }
            for (auto& m : mean) m /= static_cast<double>(C);
            const std::string stem = name + "_exit" + std::to_string(e + 1);
            scan::write_atomic(dir / (stem + ".pgm"), scan::encode_pgm(W, H, scan::to_gray8(mean)));
            std::ostringstream csv;
            csv.precision(9);
            for (std::size_t r = 0; r < H; ++r) {
                for (std::size_t c = 0; c < W; ++c) csv << (c ? "," : "") << mean[r * W + c];
                csv << '\n';
            }
            scan::write_atomic(dir / (stem + ".csv"), csv.str());
        }
        std::cout << "wrote attention maps for " << name << " (" << fr.attention_maps.size() << " exits)\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    scan::configure_allocator();
    CLI::App app{"Multi-exit network training, threshold search and anytime inference"};
    app.require_subcommand(1);
    Options o;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
        sub->add_option("--seed", o.seed, "seed for initialisation, shuffling, augmentation and search");
        sub->add_option("--dataset", o.dataset, "dataset directory (IDX or CSV layout)");
        sub->add_option("--out", o.out, "output directory");
    };
    auto* synth = app.add_subcommand("synth", "write a synthetic dataset in IDX layout");
    common(synth);
    auto* train = app.add_subcommand("train", "train a network and write a checkpoint");
    common(train);
    auto* eval = app.add_subcommand("eval", "per-exit and ensemble accuracy of a checkpoint");
    common(eval);
    eval->add_option("--checkpoint", o.checkpoint, "checkpoint file");
    auto* cache = app.add_subcommand("cache", "export per-exit softmax outputs of one split");
    common(cache);
    cache->add_option("--checkpoint", o.checkpoint, "checkpoint file");
    auto* search = app.add_subcommand("search", "genetic threshold search on a logit cache");
    common(search);
    search->add_option("--checkpoint", o.checkpoint, "checkpoint file");
    search->add_option("--beta", o.betas, "accuracy weight; repeat for a Pareto sweep")->take_all();
    search->add_option("--generations", o.generations, "number of generations");
    search->add_option("--population", o.population, "population size");
    auto* infer = app.add_subcommand("infer", "threshold-gated inference with traces");
    common(infer);
    infer->add_option("--checkpoint", o.checkpoint, "checkpoint file");
    infer->add_option("--thresholds", o.thresholds, "threshold file, one decimal per exit");
    auto* attention = app.add_subcommand("attention", "export channel-mean attention maps");
    common(attention);
    attention->add_option("--checkpoint", o.checkpoint, "checkpoint file");
    attention->add_option("images", o.images, "graymap inputs (default: configured test samples)");

    CLI11_PARSE(app, argc, argv);
    const auto* sub = app.get_subcommands().front();
    try {
        if (sub == synth) return cmd_synth(o);
        if (sub == train) return cmd_train(o);
        if (sub == eval) return cmd_eval(o);
        if (sub == cache) return cmd_cache(o);
        if (sub == search) return cmd_search(o);
        if (sub == infer) return cmd_infer(o);
        if (sub == attention) return cmd_attention(o);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n"
                  << "  command: " << sub->get_name() << "\n"
                  << "  config: " << (o.config.empty() ? "(defaults)" : o.config) << "\n"
                  << "  dataset: " << (o.dataset.empty() ? "(from config)" : o.dataset) << "\n";
        return 1;
    }
    return 0;
}
