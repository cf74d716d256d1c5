#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "vcl/analysis.hpp"
#include "vcl/config.hpp"
#include "vcl/gradcheck.hpp"
#include "vcl/trainer.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitBadConfig = 2;
constexpr int kExitMissingData = 3;

struct RunOverrides {
    std::string preset, config_path, widths, output_dir, data_dir;
    long long seed = -1, epochs = -1, batch_size = -1, coreset_k = -1, tasks = -1;
    long long parallel_runs = -1, eval_samples = -1, train_samples = -1, runs = -1;
    double lr = -1.0;
};

// Resolution order: preset < config file < command-line flags. The resolved
// result is what the manifest records.
vcl::ExperimentConfig resolve_config(const RunOverrides& o) {
    vcl::ExperimentConfig cfg;
    if (!o.preset.empty()) cfg = vcl::preset_config(o.preset);
    if (!o.config_path.empty()) cfg = vcl::load_config_file(o.config_path, cfg);
    auto set = [&](const char* key, const std::string& value) {
        vcl::apply_config_key(cfg, key, value);
    };
    if (o.seed >= 0) set("master_seed", std::to_string(o.seed));
    if (o.epochs >= 0) set("epochs", std::to_string(o.epochs));
    if (o.batch_size >= 0) set("batch_size", std::to_string(o.batch_size));
    if (o.coreset_k >= 0) set("coreset_k", std::to_string(o.coreset_k));
    if (o.tasks >= 0) set("n_tasks", std::to_string(o.tasks));
    if (o.runs >= 0) set("n_runs", std::to_string(o.runs));
    if (o.parallel_runs >= 0) set("parallel_runs", std::to_string(o.parallel_runs));
    if (o.eval_samples >= 0) set("n_eval_samples", std::to_string(o.eval_samples));
    if (o.train_samples >= 0) set("n_train_samples", std::to_string(o.train_samples));
    if (o.lr >= 0.0) set("lr", std::to_string(o.lr));
    if (!o.widths.empty()) set("widths", o.widths);
    if (!o.output_dir.empty()) cfg.output_dir = o.output_dir;
    if (!o.data_dir.empty()) cfg.data_dir = o.data_dir;
    return cfg;
}

int cmd_run(const RunOverrides& o) {
    vcl::ExperimentConfig cfg;
    try {
        cfg = resolve_config(o);
    } catch (const vcl::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitBadConfig;
    }
    if (!std::filesystem::exists(cfg.data_dir)) {
        std::cerr << "missing data directory: " << cfg.data_dir << "\n";
        return kExitMissingData;
    }
    try {
        vcl::ExperimentResult res = vcl::run_experiment(cfg);
        std::printf("final average accuracy: %.4f +/- %.4f over %zu runs\n",
                    res.metrics.final_average_mean(), res.metrics.final_average_std(),
                    res.metrics.acc.size());
        std::printf("metrics: %s\n", res.metrics_csv_path.c_str());
        return kExitOk;
    } catch (const vcl::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitBadConfig;
    } catch (const vcl::ParseError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitMissingData;
    } catch (const std::exception& e) {
        const std::string msg = e.what();
        if (msg.find("cannot open") != std::string::npos ||
            msg.find("No such file") != std::string::npos) {
            std::cerr << "missing data: " << msg << "\n";
            return kExitMissingData;
        }
        std::cerr << "error: " << msg << "\n";
        return kExitCheckFailed;
    }
}

int cmd_analyze(const std::string& run_dir, double delta_out, double delta_kl, bool verify) {
    const std::string manifest_path = run_dir + "/manifest.txt";
    const std::string snap_dir = run_dir + "/snapshots";
    if (!std::filesystem::exists(manifest_path) || !std::filesystem::exists(snap_dir)) {
        std::cerr << "missing run artifacts under " << run_dir
                  << " (need manifest.txt and snapshots/)\n";
        return kExitMissingData;
    }
    try {
        vcl::ExperimentConfig cfg = vcl::load_config_file(manifest_path);
        if (delta_out > 0.0) cfg.delta_out = delta_out;
        if (delta_kl > 0.0) cfg.delta_kl = delta_kl;

        std::ofstream diag_csv(run_dir + "/analysis_unit_diagnostics.csv");
        std::ofstream prune_csv(run_dir + "/analysis_prune_report.csv");
        diag_csv << "stage,layer,unit,out_signal,input_kl,heads_signalling\n";
        prune_csv << "stage,layer,unit,out_signal,input_kl,active_flag\n";

        vcl::PosteriorSnapshot last;
        std::string last_tag;
        for (std::size_t t = 1; t <= cfg.n_tasks; ++t) {
            const std::string tag = "run0_task" + std::to_string(t);
            if (!std::filesystem::exists(snap_dir + "/" + tag + "_manifest.txt")) {
                std::cerr << "missing snapshot: " << tag << "\n";
                return kExitMissingData;
            }
            vcl::PosteriorSnapshot snap = vcl::import_weight_snapshot(snap_dir, tag);
            auto diags = vcl::compute_unit_diagnostics(snap, cfg.delta_out);
            vcl::PruneReport report =
                vcl::detect_active_units(diags, cfg.delta_out, cfg.delta_kl, tag);
            vcl::append_unit_diagnostics_csv(diags, tag, diag_csv);
            vcl::append_prune_report_csv(report, prune_csv);
            std::printf("%s:", tag.c_str());
            for (std::size_t l = 0; l < report.layer_sizes.size(); ++l)
                std::printf(" layer%zu %zu/%zu active", l, report.active_count(l),
                            report.layer_sizes[l]);
            if (report.multi_head_units > 0)
                std::printf(", %zu units shared across heads", report.multi_head_units);
            std::printf("\n");
            if (t == cfg.n_tasks) {
                last = std::move(snap);
                last_tag = tag;
            }
        }

        if (verify) {
            if (!std::filesystem::exists(cfg.data_dir)) {
                std::cerr << "missing data directory for --verify: " << cfg.data_dir << "\n";
                return kExitMissingData;
            }
            vcl::RawDataset train = vcl::load_mnist_train(cfg.data_dir);
            vcl::RawDataset test = vcl::load_mnist_test(cfg.data_dir);
            vcl::SeededRng run_rng = vcl::SeededRng(cfg.master_seed).derive(0);
            vcl::SeededRng rng_data = run_rng.derive("data");
            vcl::SeededRng rng_prune = run_rng.derive("prune");
            vcl::TaskProvider provider =
                cfg.benchmark == vcl::Benchmark::Split
                    ? vcl::TaskProvider::split(train, test)
                    : vcl::TaskProvider::permuted(train, test, cfg.n_tasks, rng_data,
                                                  cfg.identity_first_task);
            vcl::BayesianNetwork net = vcl::network_from_snapshot(last);
            auto diags = vcl::compute_unit_diagnostics(last, cfg.delta_out);
            vcl::PruneReport report =
                vcl::detect_active_units(diags, cfg.delta_out, cfg.delta_kl, last_tag);
            auto deltas = vcl::prune_and_verify(net, report, provider, cfg.n_tasks,
                                                cfg.n_eval_samples, rng_prune);
            double worst = 0.0;
            for (std::size_t t = 0; t < deltas.size(); ++t) {
                std::printf("task %zu: %.4f -> %.4f after pruning (delta %.4f)\n", t + 1,
                            report.accuracy_before[t], report.accuracy_after[t], deltas[t]);
                worst = std::max(worst, deltas[t]);
            }
            std::printf("worst accuracy delta: %.4f\n", worst);
        }
        return kExitOk;
    } catch (const std::exception& e) {
        std::cerr << "analyze error: " << e.what() << "\n";
        return kExitMissingData;
    }
}

// Finite-difference gradient audit on a fixed small network and batch.
int cmd_gradcheck(std::uint64_t seed, std::size_t n_coords) {
    vcl::SeededRng rng(seed);
    vcl::BayesianNetwork net(784, {20});
    net.ensure_head(0, 2);
    // Moderate initial variance keeps the objective magnitude small enough
    // that finite-difference roundoff stays well below the tolerance.
    vcl::reinitialise_variational_params(net, 0, rng, 0.1, 0.5);
    vcl::PosteriorSnapshot prior = vcl::PosteriorSnapshot::p0(net);

    const std::size_t n_examples = 8;
    vcl::Matrix x = vcl::sample_standard_normal(rng, n_examples, 784);
    std::vector<std::uint8_t> y;
    for (std::size_t i = 0; i < n_examples; ++i) y.push_back(std::uint8_t(i % 2));

    vcl::GradCheckResult r = vcl::finite_difference_check(
        net, prior, x, y, /*head_id=*/0, /*n_task_train=*/n_examples,
        /*n_samples=*/4, /*h=*/1e-3, /*sample_seed=*/seed + 1, n_coords);
    std::printf("max relative error: %.3e (analytic %.6e vs finite-difference %.6e at %s)\n",
                r.max_rel_error, r.worst_analytic, r.worst_fd, r.worst_coordinate.c_str());
    if (r.max_rel_error < 1e-4) return kExitOk;
    std::cerr << "gradient check failed at " << r.worst_coordinate << "\n";
    return kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"variational continual learning experiment runner"};
    app.require_subcommand(1);

    RunOverrides o;
    CLI::App* run = app.add_subcommand("run", "train a benchmark and write metrics");
    run->add_option("--preset", o.preset,
                    "split-paper|split-desk|split-prune|permuted-paper|permuted-desk|permuted-prune");
    run->add_option("--config", o.config_path, "key=value config file");
    run->add_option("--seed", o.seed, "master seed");
    run->add_option("--epochs", o.epochs);
    run->add_option("--batch-size", o.batch_size);
    run->add_option("--coreset-k", o.coreset_k, "coreset size per task (0 disables)");
    run->add_option("--tasks", o.tasks);
    run->add_option("--runs", o.runs);
    run->add_option("--widths", o.widths, "hidden widths, comma separated");
    run->add_option("--lr", o.lr);
    run->add_option("--output-dir", o.output_dir);
    run->add_option("--data-dir", o.data_dir, "directory with MNIST IDX files");
    run->add_option("--parallel-runs", o.parallel_runs);
    run->add_option("--eval-samples", o.eval_samples);
    run->add_option("--train-samples", o.train_samples);

    std::string analyze_dir;
    double a_delta_out = -1.0, a_delta_kl = -1.0;
    bool a_verify = false;
    CLI::App* analyze = app.add_subcommand("analyze", "unit diagnostics and pruning report");
    analyze->add_option("dir", analyze_dir, "run output directory")->required();
    analyze->add_option("--delta-out", a_delta_out, "outgoing-signal prune threshold");
    analyze->add_option("--delta-kl", a_delta_kl, "incoming-KL reporting threshold");
    analyze->add_flag("--verify", a_verify, "re-evaluate all tasks before and after pruning");

    std::uint64_t g_seed = 1234;
    std::size_t g_coords = 200;
    CLI::App* gradcheck =
        app.add_subcommand("gradcheck", "finite-difference audit of the objective gradients");
    gradcheck->add_option("--seed", g_seed);
    gradcheck->add_option("--coords", g_coords, "number of random coordinates to probe");

    CLI11_PARSE(app, argc, argv);

    if (run->parsed()) return cmd_run(o);
    if (analyze->parsed()) return cmd_analyze(analyze_dir, a_delta_out, a_delta_kl, a_verify);
    if (gradcheck->parsed()) return cmd_gradcheck(g_seed, g_coords);
    return kExitBadConfig;
}
