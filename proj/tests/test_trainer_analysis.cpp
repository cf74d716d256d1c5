#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "vcl/analysis.hpp"
#include "vcl/config.hpp"
#include "vcl/trainer.hpp"

using namespace vcl;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(bool(f));
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// Ten well separated classes: each digit lights up its own block of pixels,
// plus background noise. Linearly separable, so tiny networks learn it fast.
void write_synthetic_mnist(const std::string& dir, std::size_t train_per_digit,
                           std::size_t test_per_digit, std::uint64_t seed) {
    SeededRng rng(seed);
    auto make = [&](std::size_t per_digit) {
        RawDataset raw;
        raw.images = Matrix(per_digit * 10, 784);
        for (std::size_t d = 0; d < 10; ++d)
            for (std::size_t i = 0; i < per_digit; ++i) {
                const std::size_t row = d * per_digit + i;
                for (std::size_t c = 0; c < 784; ++c)
                    raw.images(row, c) = 0.1 * rng.next_uniform();
                for (std::size_t c = d * 78; c < d * 78 + 60; ++c)
                    raw.images(row, c) = 0.7 + 0.3 * rng.next_uniform();
                raw.labels.push_back(std::uint8_t(d));
            }
        return raw;
    };
    // Byte quantisation in the IDX format is part of what we want exercised.
    std::filesystem::create_directories(dir);
    auto dump = [&](const RawDataset& raw, const std::string& imgs, const std::string& labs) {
        auto ib = serialize_idx_images(raw.images);
        auto lb = serialize_idx_labels(raw.labels);
        std::ofstream fi(dir + "/" + imgs, std::ios::binary);
        fi.write(reinterpret_cast<const char*>(ib.data()), std::streamsize(ib.size()));
        std::ofstream fl(dir + "/" + labs, std::ios::binary);
        fl.write(reinterpret_cast<const char*>(lb.data()), std::streamsize(lb.size()));
    };
    dump(make(train_per_digit), "train-images-idx3-ubyte", "train-labels-idx1-ubyte");
    dump(make(test_per_digit), "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte");
}

const std::string kTmp = "trainer_test_tmp";

struct TmpTree {
    TmpTree() {
        std::filesystem::remove_all(kTmp);
        write_synthetic_mnist(kTmp + "/data", 240, 40, 7);
    }
    ~TmpTree() { std::filesystem::remove_all(kTmp); }
};

ExperimentConfig tiny_split_config(const std::string& out) {
    ExperimentConfig cfg = preset_config("split-desk");
    cfg.widths = {16};
    cfg.epochs = 12;
    cfg.batch_size = 96;
    cfg.lr = 5e-3;
    cfg.n_train_samples = 3;
    cfg.n_eval_samples = 20;
    cfg.n_runs = 2;
    cfg.data_dir = kTmp + "/data";
    cfg.output_dir = out;
    return cfg;
}

}  // namespace

TEST_CASE("presets carry the protocol scales") {
    ExperimentConfig sp = preset_config("split-paper");
    CHECK(sp.benchmark == Benchmark::Split);
    CHECK(sp.n_tasks == 5);
    CHECK(sp.widths == std::vector<std::size_t>{200});
    CHECK(sp.epochs == 600);
    CHECK(sp.batch_size == 256);
    CHECK(sp.n_runs == 10);

    ExperimentConfig sd = preset_config("split-desk");
    CHECK(sd.epochs == 120);
    CHECK(sd.n_runs == 3);

    ExperimentConfig pp = preset_config("permuted-paper");
    CHECK(pp.benchmark == Benchmark::Permuted);
    CHECK(pp.n_tasks == 10);
    CHECK(pp.widths == std::vector<std::size_t>{100, 100});
    CHECK(pp.epochs == 800);
    CHECK(pp.batch_size == 1024);

    ExperimentConfig pd = preset_config("permuted-desk");
    CHECK(pd.n_tasks == 5);
    CHECK(pd.epochs == 100);
    CHECK(pd.n_runs == 2);

    // Pruning presets: single seed, long optimisation, calibrated threshold.
    ExperimentConfig spr = preset_config("split-prune");
    CHECK(spr.benchmark == Benchmark::Split);
    CHECK(spr.n_tasks == 1);
    CHECK(spr.epochs == 600);
    CHECK(spr.n_runs == 1);
    CHECK(spr.delta_out == 0.8);
    ExperimentConfig ppr = preset_config("permuted-prune");
    CHECK(ppr.benchmark == Benchmark::Permuted);
    CHECK(ppr.n_tasks == 1);
    CHECK(ppr.epochs == 300);
    CHECK(ppr.n_runs == 1);
    CHECK(ppr.delta_out == 0.8);

    CHECK_THROWS_AS(preset_config("bogus"), ConfigError);
}

TEST_CASE("config text parsing") {
    ExperimentConfig c = load_config_text(
        "epochs = 9   # short run\n"
        "\n"
        "widths=32,16\n"
        "preset=permuted-desk\n"  // applied first regardless of position
        "coreset_k=3\n");
    CHECK(c.benchmark == Benchmark::Permuted);
    CHECK(c.epochs == 9);
    CHECK(c.widths == std::vector<std::size_t>{32, 16});
    CHECK(c.coreset_k == 3);

    CHECK_THROWS_AS(load_config_text("no_such_key=1\n"), ConfigError);
    CHECK_THROWS_AS(load_config_text("epochs=abc\n"), ConfigError);
    CHECK_THROWS_AS(load_config_text("just a line\n"), ConfigError);
    CHECK_THROWS_AS(load_config_text("widths=\n"), ConfigError);
    CHECK_THROWS_AS(load_config_text("eval_mc=maybe\n"), ConfigError);
}

TEST_CASE("manifest round-trips through the config parser") {
    std::filesystem::create_directories(kTmp);
    ExperimentConfig c = preset_config("split-desk");
    c.epochs = 7;
    c.lr = 0.0123;
    c.master_seed = 99;
    const std::string path = kTmp + "/manifest_roundtrip.txt";
    write_manifest(c, path);
    ExperimentConfig back = load_config_file(path);
    CHECK(config_entries(back) == config_entries(c));
    std::filesystem::remove(path);
}

TEST_CASE("unit diagnostics match a hand computation") {
    // Body 2 -> 2, one head 2 -> 1.
    PosteriorSnapshot snap;
    LayerMoments body{Matrix(2, 2), Matrix(2, 2), Matrix(1, 2), Matrix(1, 2)};
    body.W_mu(0, 0) = 0.5;
    body.W_mu(1, 0) = -0.5;
    body.W_var(0, 0) = 0.25;
    body.W_var(1, 0) = 1.0;
    body.W_var(0, 1) = body.W_var(1, 1) = 1.0;
    body.b_var(0, 0) = body.b_var(0, 1) = 1.0;
    snap.body.push_back(body);
    LayerMoments head{Matrix(2, 1), Matrix(2, 1), Matrix(1, 1), Matrix(1, 1)};
    head.W_mu(0, 0) = 0.3;
    head.W_var(0, 0) = 0.04;
    head.W_mu(1, 0) = 0.001;
    head.W_var(1, 0) = 1e-8;
    head.b_var(0, 0) = 1.0;
    snap.heads.push_back(head);

    auto diags = compute_unit_diagnostics(snap, 0.02);
    REQUIRE(diags.size() == 2);
    // unit 0 fan-in: kl(0.5, 0.25) + kl(-0.5, 1) + kl(0, 1)
    const double expect_kl =
        0.5 * (0.25 + 0.25 - 1.0 - std::log(0.25)) + 0.5 * (1.0 + 0.25 - 1.0) + 0.0;
    CHECK(diags[0].input_kl == doctest::Approx(expect_kl).epsilon(1e-12));
    CHECK(diags[0].out_signal == doctest::Approx(0.3 + 0.2).epsilon(1e-12));
    CHECK(diags[0].heads_signalling == 1);
    CHECK(diags[1].out_signal == doctest::Approx(0.001 + 1e-4).epsilon(1e-9));
    CHECK(diags[1].heads_signalling == 0);

    PruneReport report = detect_active_units(diags, 0.02, 0.1, "t");
    CHECK(report.active_count(0) == 1);
    CHECK(report.active_units[0][0] == 0);
    CHECK(report.layer_sizes[0] == 2);
    CHECK_THROWS_AS(detect_active_units(diags, 0.0, 0.1), ConfigError);
}

TEST_CASE("active-unit count is non-increasing in the output threshold") {
    SeededRng rng(11);
    std::vector<UnitDiagnostics> diags;
    for (std::size_t j = 0; j < 50; ++j)
        diags.push_back({0, j, rng.next_uniform(), 0.5 * rng.next_uniform(), 0});
    std::size_t prev = diags.size() + 1;
    for (double d : {0.001, 0.01, 0.05, 0.1, 0.2, 0.4}) {
        const std::size_t n = detect_active_units(diags, d, 0.1).active_count(0);
        CHECK(n <= prev);
        prev = n;
    }
}

TEST_CASE("pruning removes a unit's influence entirely") {
    SeededRng rng(3);
    BayesianNetwork net(6, {4});
    net.ensure_head(0, 3);
    reinitialise_variational_params(net, 0, rng, 0.5, 1e-4);

    // Prune everything except units 1 and 3.
    PruneReport report;
    report.active_units = {{1, 3}};
    report.layer_sizes = {4};
    BayesianNetwork pruned = prune_network(net, report);

    for (std::size_t j : {std::size_t(0), std::size_t(2)}) {
        for (std::size_t c = 0; c < 3; ++c) {
            CHECK(pruned.heads[0].W_mu(j, c) == 0.0);
            CHECK(std::exp(pruned.heads[0].W_rho(j, c)) < 1e-40);
        }
        for (std::size_t i = 0; i < 6; ++i) CHECK(pruned.body[0].W_mu(i, j) == 0.0);
        CHECK(pruned.body[0].b_mu(0, j) == 0.0);
    }
    // Kept units are untouched.
    for (std::size_t i = 0; i < 6; ++i)
        CHECK(pruned.body[0].W_mu(i, 1) == net.body[0].W_mu(i, 1));
    CHECK(pruned.heads[0].W_mu(3, 2) == net.heads[0].W_mu(3, 2));
}

TEST_CASE("weight snapshot CSV round-trip is exact") {
    SeededRng rng(17);
    BayesianNetwork net(5, {3});
    net.ensure_head(0, 2);
    net.ensure_head(1, 2);
    reinitialise_variational_params(net, 0, rng, 0.3, 1e-3);
    reinitialise_variational_params(net, 1, rng, 0.3, 1e-3);
    PosteriorSnapshot snap = PosteriorSnapshot::from_network(net, "after-task-2");

    const std::string dir = kTmp + "/snap";
    export_weight_snapshot(snap, dir, "roundtrip");
    PosteriorSnapshot back = import_weight_snapshot(dir, "roundtrip");
    CHECK(back.provenance == "after-task-2");
    REQUIRE(back.body.size() == 1);
    REQUIRE(back.heads.size() == 2);
    CHECK(back.body[0].W_mu == snap.body[0].W_mu);
    CHECK(back.body[0].W_var == snap.body[0].W_var);
    CHECK(back.body[0].b_mu == snap.body[0].b_mu);
    CHECK(back.heads[1].W_var == snap.heads[1].W_var);

    BayesianNetwork rebuilt = network_from_snapshot(back);
    CHECK(rebuilt.input_dim == 5);
    CHECK(rebuilt.body_widths == std::vector<std::size_t>{3});
    CHECK(rebuilt.body[0].W_mu == net.body[0].W_mu);
    for (std::size_t i = 0; i < rebuilt.body[0].W_rho.size(); ++i)
        CHECK(std::exp(rebuilt.body[0].W_rho.data()[i]) ==
              doctest::Approx(std::exp(net.body[0].W_rho.data()[i])).epsilon(1e-14));

    CHECK_THROWS(import_weight_snapshot(dir, "missing_tag"));
    std::filesystem::remove_all(dir);
}

TEST_CASE("reinitialisation statistics and head hygiene") {
    SeededRng rng(23);
    BayesianNetwork net(100, {80});
    net.ensure_head(0, 2);
    net.ensure_head(1, 2);
    const Matrix head0_before = net.heads[0].W_mu;
    reinitialise_variational_params(net, 1, rng, 0.1, 1e-3);

    CHECK(net.heads[0].W_mu == head0_before);  // inactive head untouched
    double mean = 0.0, var = 0.0;
    const std::size_t n = net.body[0].W_mu.size();
    for (std::size_t i = 0; i < n; ++i) mean += net.body[0].W_mu.data()[i];
    mean /= double(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double d = net.body[0].W_mu.data()[i] - mean;
        var += d * d;
    }
    var /= double(n);
    CHECK(std::abs(mean) < 5e-3);
    CHECK(var == doctest::Approx(0.01).epsilon(0.1));
    for (std::size_t i = 0; i < n; ++i)
        CHECK(net.body[0].W_rho.data()[i] == doctest::Approx(std::log(1e-3)).epsilon(1e-15));
}

TEST_CASE("coreset finetuning leaves the chained network untouched") {
    SeededRng rng(31);
    BayesianNetwork net(8, {6});
    net.ensure_head(0, 2);
    net.ensure_head(1, 2);
    reinitialise_variational_params(net, 0, rng, 0.2, 1e-3);
    reinitialise_variational_params(net, 1, rng, 0.2, 1e-3);
    const BayesianNetwork before = net;

    CoresetStore store;
    store.per_task_k = 4;
    store.per_task.resize(2);
    for (std::size_t t = 0; t < 2; ++t)
        for (std::size_t i = 0; i < 4; ++i) {
            std::vector<double> x(8);
            for (auto& v : x) v = rng.next_uniform();
            store.per_task[t].push_back({x, std::uint8_t(i % 2), t});
        }

    ExperimentConfig cfg;
    cfg.coreset_k = 4;
    cfg.coreset_finetune_epochs = 3;
    cfg.batch_size = 8;
    cfg.n_train_samples = 2;
    BayesianNetwork tuned = coreset_finetune(net, store, cfg, rng);

    CHECK(net.body[0].W_mu == before.body[0].W_mu);
    CHECK(net.heads[0].W_mu == before.heads[0].W_mu);
    CHECK(net.heads[1].W_mu == before.heads[1].W_mu);
    CHECK_FALSE(tuned.body[0].W_mu == before.body[0].W_mu);

    ExperimentConfig empty_cfg;
    empty_cfg.coreset_k = 4;
    CHECK_THROWS_AS(coreset_finetune(net, CoresetStore{}, empty_cfg, rng), ConfigError);
}

TEST_CASE("end-to-end split run on synthetic digits") {
    TmpTree tree;
    ExperimentConfig cfg = tiny_split_config(kTmp + "/out");
    ExperimentResult res = run_experiment(cfg);

    REQUIRE(res.metrics.acc.size() == 2);
    for (const auto& run : res.metrics.acc) {
        REQUIRE(run.size() == 5);
        for (std::size_t stage = 0; stage < 5; ++stage) REQUIRE(run[stage].size() == stage + 1);
    }
    // Synthetic digits are linearly separable; every pairwise task is easy.
    CHECK(res.metrics.final_average(0) > 0.9);
    CHECK(res.metrics.final_average_mean() > 0.9);

    CHECK(std::filesystem::exists(kTmp + "/out/manifest.txt"));
    CHECK(std::filesystem::exists(kTmp + "/out/metrics.csv"));
    CHECK(std::filesystem::exists(kTmp + "/out/prune_report.csv"));
    CHECK(std::filesystem::exists(kTmp + "/out/unit_diagnostics.csv"));
    CHECK(std::filesystem::exists(kTmp + "/out/snapshots/run0_task5_manifest.txt"));
    CHECK_FALSE(std::filesystem::exists(kTmp + "/out/snapshots/run1_task1_manifest.txt"));

    // A later task must not disturb an earlier task's head (head hygiene).
    PosteriorSnapshot s1 = import_weight_snapshot(kTmp + "/out/snapshots", "run0_task1");
    PosteriorSnapshot s5 = import_weight_snapshot(kTmp + "/out/snapshots", "run0_task5");
    REQUIRE(s1.heads.size() == 1);
    REQUIRE(s5.heads.size() == 5);
    CHECK(s5.heads[0].W_mu == s1.heads[0].W_mu);
    CHECK(s5.heads[0].W_var == s1.heads[0].W_var);

    // metrics.csv carries per-run rows plus mean (-1) and std (-2) rows.
    const std::string metrics = slurp(kTmp + "/out/metrics.csv");
    CHECK(metrics.rfind("run,stage_after_task,task,accuracy\n", 0) == 0);
    CHECK(metrics.find("\n-1,5,-1,") != std::string::npos);
    CHECK(metrics.find("\n-2,5,-1,") != std::string::npos);
}

TEST_CASE("runs are deterministic and independent of scheduling") {
    TmpTree tree;
    ExperimentConfig a = tiny_split_config(kTmp + "/outA");
    a.epochs = 3;
    ExperimentConfig b = a;
    b.output_dir = kTmp + "/outB";
    b.parallel_runs = 2;
    run_experiment(a);
    run_experiment(b);
    CHECK(slurp(kTmp + "/outA/metrics.csv") == slurp(kTmp + "/outB/metrics.csv"));

    ExperimentConfig c = a;
    c.output_dir = kTmp + "/outC";
    c.master_seed = 43;
    run_experiment(c);
    CHECK(slurp(kTmp + "/outA/metrics.csv") != slurp(kTmp + "/outC/metrics.csv"));
}

TEST_CASE("permuted benchmark with coresets runs end to end") {
    TmpTree tree;
    ExperimentConfig cfg = preset_config("permuted-desk");
    cfg.n_tasks = 2;
    cfg.widths = {12, 12};
    cfg.epochs = 4;
    cfg.batch_size = 512;
    cfg.n_train_samples = 2;
    cfg.n_eval_samples = 8;
    cfg.n_runs = 1;
    cfg.coreset_k = 20;
    cfg.coreset_finetune_epochs = 2;
    cfg.data_dir = kTmp + "/data";
    cfg.output_dir = kTmp + "/out_perm";
    ExperimentResult res = run_experiment(cfg);
    REQUIRE(res.metrics.acc.size() == 1);
    REQUIRE(res.metrics.acc[0].size() == 2);
    for (double v : res.metrics.acc[0][1]) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    // Single head throughout.
    PosteriorSnapshot s2 = import_weight_snapshot(kTmp + "/out_perm/snapshots", "run0_task2");
    CHECK(s2.heads.size() == 1);
}

TEST_CASE("mean-weight evaluation path") {
    TmpTree tree;
    ExperimentConfig cfg = tiny_split_config(kTmp + "/out_mw");
    cfg.eval_mc = false;
    cfg.epochs = 6;
    cfg.n_runs = 1;
    ExperimentResult res = run_experiment(cfg);
    CHECK(res.metrics.final_average(0) > 0.85);
}
