#ifndef VCL_TRAINER_HPP
#define VCL_TRAINER_HPP

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "vcl/adam.hpp"
#include "vcl/analysis.hpp"
#include "vcl/config.hpp"
#include "vcl/dataset.hpp"
#include "vcl/network.hpp"
#include "vcl/objective.hpp"

namespace vcl {

// Fresh variational parameters at a task boundary: small random means and
// small variances, drawn after the previous posterior has been snapshotted.
// Only the body and the active head are touched; other heads keep their
// trained posteriors.
inline void reinitialise_variational_params(BayesianNetwork& net, std::size_t head_id,
                                            SeededRng& rng, double init_mean_std,
                                            double init_variance) {
    const double rho = std::log(init_variance);
    auto reinit = [&](MeanFieldLayer& l) {
        for (std::size_t i = 0; i < l.W_mu.size(); ++i) {
            l.W_mu.data()[i] = init_mean_std * rng.next_normal();
            l.W_rho.data()[i] = rho;
        }
        for (std::size_t i = 0; i < l.b_mu.size(); ++i) {
            l.b_mu.data()[i] = init_mean_std * rng.next_normal();
            l.b_rho.data()[i] = rho;
        }
    };
    for (auto& l : net.body) reinit(l);
    reinit(net.heads.at(head_id));
}

// Accuracy under the configured evaluation rule: Monte Carlo predictive
// averaging by default, or a deterministic mean-weight pass.
inline double task_accuracy(const BayesianNetwork& net, const Matrix& x,
                            const std::vector<std::uint8_t>& y, std::size_t head_id,
                            const ExperimentConfig& cfg, SeededRng& rng) {
    if (cfg.eval_mc) return accuracy(net, x, y, head_id, rng, cfg.n_eval_samples);
    // Mean-weight propagation: ReLU MLP with mu only.
    Matrix h = x;
    for (const auto& l : net.body) {
        Matrix a = matmul(h, l.W_mu);
        for (std::size_t r = 0; r < a.rows(); ++r)
            for (std::size_t c = 0; c < a.cols(); ++c)
                a(r, c) = std::max(0.0, a(r, c) + l.b_mu(0, c));
        h = std::move(a);
    }
    const MeanFieldLayer& head = net.head(head_id);
    Matrix logits = matmul(h, head.W_mu);
    std::size_t correct = 0;
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        std::size_t best = 0;
        for (std::size_t c = 0; c < logits.cols(); ++c) {
            logits(r, c) += head.b_mu(0, c);
            if (logits(r, c) > logits(r, best)) best = c;
        }
        if (best == y[r]) ++correct;
    }
    return logits.rows() == 0 ? 0.0 : double(correct) / double(logits.rows());
}

// Trains the network on one task by Adam on -ELBO: epochs x ceil(N_t/batch)
// steps, data reshuffled each epoch, fresh optimiser state. Returns the new
// posterior snapshot.
inline PosteriorSnapshot train_task(BayesianNetwork& net, const PosteriorSnapshot& prior,
                                    const TaskDataset& task, const ExperimentConfig& cfg,
                                    SeededRng& rng) {
    const std::size_t n = task.n_train();
    const std::size_t head_id = task.spec.head_id;
    AdamState adam(net, {head_id}, {.lr = cfg.lr});
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    double last_good_elbo = 0.0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle(order, rng);
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t b = std::min(cfg.batch_size, n - start);
            Matrix bx(b, task.train_x.cols());
            std::vector<std::uint8_t> by(b);
            for (std::size_t j = 0; j < b; ++j) {
                const std::size_t src = order[start + j];
                std::copy(task.train_x.data() + src * task.train_x.cols(),
                          task.train_x.data() + (src + 1) * task.train_x.cols(),
                          bx.data() + j * bx.cols());
                by[j] = task.train_y[src];
            }
            ElboResult res =
                minibatch_elbo(net, prior, bx, by, head_id, n, cfg.n_train_samples, rng);
            if (!std::isfinite(res.breakdown.elbo))
                throw std::runtime_error(
                    "train_task: non-finite ELBO at task " + std::to_string(task.spec.task_index) +
                    " epoch " + std::to_string(epoch) + " offset " + std::to_string(start) +
                    "; last good ELBO " + std::to_string(last_good_elbo));
            last_good_elbo = res.breakdown.elbo;
            adam.step(net, res.grads);
        }
    }
    return PosteriorSnapshot::from_network(
        net, "after-task-" + std::to_string(task.spec.task_index));
}

// Finetunes a copy of the trained network on the union of all stored
// coresets, each example routed through its own head, with the just-trained
// posterior as the KL anchor. The copy is for prediction only; the chained
// network is left untouched.
inline BayesianNetwork coreset_finetune(const BayesianNetwork& trained,
                                        const CoresetStore& coresets,
                                        const ExperimentConfig& cfg, SeededRng& rng) {
    if (cfg.coreset_k == 0) return trained;
    const std::size_t total = coresets.total();
    if (total == 0) throw ConfigError("coreset_finetune: empty coreset store with K > 0");

    BayesianNetwork net = trained;
    const PosteriorSnapshot prior = PosteriorSnapshot::from_network(trained, "finetune-anchor");

    // Flatten the store.
    Matrix x(total, net.input_dim);
    std::vector<std::uint8_t> y(total);
    std::vector<std::size_t> head_of(total);
    std::vector<std::size_t> scope_heads;
    {
        std::size_t row = 0;
        for (const auto& per_task : coresets.per_task) {
            for (const auto& ex : per_task) {
                std::copy(ex.input.begin(), ex.input.end(), x.data() + row * net.input_dim);
                y[row] = ex.target;
                head_of[row] = ex.head_id;
                ++row;
            }
        }
        std::vector<bool> seen(net.heads.size(), false);
        for (std::size_t h : head_of)
            if (!seen[h]) {
                seen[h] = true;
                scope_heads.push_back(h);
            }
    }

    AdamState adam(net, scope_heads, {.lr = cfg.lr});
    std::vector<std::size_t> order(total);
    for (std::size_t i = 0; i < total; ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < cfg.coreset_finetune_epochs; ++epoch) {
        shuffle(order, rng);
        for (std::size_t start = 0; start < total; start += cfg.batch_size) {
            const std::size_t b = std::min(cfg.batch_size, total - start);
            GradientSet grads = GradientSet::zeros_for(net, scope_heads);
            ElboBreakdown bd;
            const double scale = double(total) / double(b);
            // Likelihood: group the batch rows by head.
            for (std::size_t h : scope_heads) {
                std::vector<std::size_t> rows;
                for (std::size_t j = 0; j < b; ++j)
                    if (head_of[order[start + j]] == h) rows.push_back(order[start + j]);
                if (rows.empty()) continue;
                Matrix gx(rows.size(), net.input_dim);
                std::vector<std::uint8_t> gy(rows.size());
                for (std::size_t j = 0; j < rows.size(); ++j) {
                    std::copy(x.data() + rows[j] * net.input_dim,
                              x.data() + (rows[j] + 1) * net.input_dim,
                              gx.data() + j * net.input_dim);
                    gy[j] = y[rows[j]];
                }
                NoiseFn noise = rng_noise(rng);
                ForwardTape tape = forward_samples(net, gx, h, cfg.n_train_samples, noise);
                bd.expected_log_lik +=
                    likelihood_value_and_grads(net, tape, gy, h, scale, grads);
            }
            add_kl_value_and_grads(net, prior, scope_heads, grads, bd);
            bd.elbo = bd.expected_log_lik - bd.kl_total;
            if (!std::isfinite(bd.elbo))
                throw std::runtime_error("coreset_finetune: non-finite ELBO at epoch " +
                                         std::to_string(epoch));
            adam.step(net, grads);
        }
    }
    return net;
}

// Accuracy on every task seen so far, evaluated through each task's own head.
inline std::vector<double> evaluate_all_tasks(const BayesianNetwork& net,
                                              const TaskProvider& provider,
                                              std::size_t n_tasks_seen,
                                              const ExperimentConfig& cfg,
                                              const SeededRng& eval_rng_base) {
    std::vector<double> acc;
    for (std::size_t t = 0; t < n_tasks_seen; ++t) {
        TaskDataset task = provider.materialize(t);
        SeededRng rng = eval_rng_base.derive(t);
        acc.push_back(task_accuracy(net, task.test_x, task.test_y, task.spec.head_id, cfg, rng));
    }
    return acc;
}

// Accuracy table across runs: acc[run][stage-1][task-1] for task <= stage.
struct MetricsTable {
    std::size_t n_tasks = 0;
    std::vector<std::vector<std::vector<double>>> acc;

    double average_after(std::size_t run, std::size_t stage) const {
        const auto& row = acc[run][stage - 1];
        double s = 0.0;
        for (double a : row) s += a;
        return s / double(row.size());
    }
    double final_average(std::size_t run) const { return average_after(run, n_tasks); }
    double final_average_mean() const {
        double s = 0.0;
        for (std::size_t r = 0; r < acc.size(); ++r) s += final_average(r);
        return s / double(acc.size());
    }
    double final_average_std() const {
        const double m = final_average_mean();
        double s = 0.0;
        for (std::size_t r = 0; r < acc.size(); ++r) {
            const double d = final_average(r) - m;
            s += d * d;
        }
        return std::sqrt(s / double(acc.size()));
    }
};

namespace detail {

// provenance is "after-task-<t>"
inline std::size_t task_index_of(const PosteriorSnapshot& snap) {
    return std::stoul(snap.provenance.substr(snap.provenance.rfind('-') + 1));
}

struct RunArtifacts {
    std::vector<std::vector<double>> acc;  // per stage
    std::string unit_diagnostics_csv;
    std::string prune_report_csv;
    std::string prune_verify_csv;
};

// One independent continual-learning run. All randomness derives from
// (master seed, run index) through purpose-named child streams, so runs are
// reproducible regardless of scheduling; the coreset draw has its own stream
// so with- and without-coreset runs see identical shuffles elsewhere.
inline RunArtifacts execute_run(const ExperimentConfig& cfg, const RawDataset& train,
                                const RawDataset& test, std::size_t run_index,
                                const std::string& output_dir, bool export_artifacts) {
    RunArtifacts out;
    SeededRng run_rng = SeededRng(cfg.master_seed).derive(run_index);
    SeededRng rng_data = run_rng.derive("data");
    SeededRng rng_init = run_rng.derive("init");
    SeededRng rng_train = run_rng.derive("train");
    SeededRng rng_coreset = run_rng.derive("coreset");
    SeededRng rng_finetune = run_rng.derive("finetune");
    SeededRng rng_eval = run_rng.derive("eval");
    SeededRng rng_prune = run_rng.derive("prune");

    TaskProvider provider =
        cfg.benchmark == Benchmark::Split
            ? TaskProvider::split(train, test)
            : TaskProvider::permuted(train, test, cfg.n_tasks, rng_data,
                                     cfg.identity_first_task);
    if (cfg.benchmark == Benchmark::Split && (cfg.n_tasks < 1 || cfg.n_tasks > 5))
        throw ConfigError("split benchmark has at most 5 tasks");

    BayesianNetwork net(784, cfg.widths);
    PosteriorSnapshot prior = PosteriorSnapshot::p0(net);
    CoresetStore coresets;
    coresets.per_task.resize(cfg.n_tasks);
    coresets.per_task_k = cfg.coreset_k;

    std::ostringstream diag_csv, prune_csv, verify_csv;

    for (std::size_t t = 0; t < cfg.n_tasks; ++t) {
        TaskDataset task = provider.materialize(t);
        if (cfg.coreset_k > 0)
            coresets.per_task[t] = draw_random_coreset(task, cfg.coreset_k, rng_coreset);

        net.ensure_head(task.spec.head_id, task.spec.n_classes);
        reinitialise_variational_params(net, task.spec.head_id, rng_init, cfg.init_mean_std,
                                        cfg.init_variance);
        PosteriorSnapshot posterior = train_task(net, prior, task, cfg, rng_train);
        task = TaskDataset{};  // free the training copy before evaluation

        BayesianNetwork finetuned;
        const BayesianNetwork* prediction_net = &net;
        if (cfg.coreset_k > 0) {
            finetuned = coreset_finetune(net, coresets, cfg, rng_finetune);
            prediction_net = &finetuned;
        }
        out.acc.push_back(
            evaluate_all_tasks(*prediction_net, provider, t + 1, cfg, rng_eval.derive(t)));

        if (export_artifacts) {
            const std::string tag = "run" + std::to_string(run_index) + "_task" +
                                    std::to_string(task_index_of(posterior));
            export_weight_snapshot(posterior, output_dir + "/snapshots", tag);
            auto diags = compute_unit_diagnostics(posterior, cfg.delta_out);
            PruneReport report =
                detect_active_units(diags, cfg.delta_out, cfg.delta_kl, tag);
            append_unit_diagnostics_csv(diags, tag, diag_csv);
            append_prune_report_csv(report, prune_csv);
            if (t + 1 == cfg.n_tasks) {
                prune_and_verify(net, report, provider, cfg.n_tasks, cfg.n_eval_samples,
                                 rng_prune);
                for (std::size_t i = 0; i < report.accuracy_before.size(); ++i)
                    verify_csv << tag << "," << i + 1 << ","
                               << fmt17(report.accuracy_before[i]) << ","
                               << fmt17(report.accuracy_after[i]) << ","
                               << fmt17(std::abs(report.accuracy_after[i] -
                                                 report.accuracy_before[i]))
                               << "\n";
            }
        }
        prior = std::move(posterior);
    }
    out.unit_diagnostics_csv = diag_csv.str();
    out.prune_report_csv = prune_csv.str();
    out.prune_verify_csv = verify_csv.str();
    return out;
}

}  // namespace detail

struct ExperimentResult {
    MetricsTable metrics;
    std::string metrics_csv_path;
};

// Executes n_runs independent runs (optionally across threads), writes the
// manifest, metrics.csv, weight snapshots and prune reports under the output
// directory, and returns the accuracy table. Identical configs produce
// byte-identical CSVs.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    RawDataset train = load_mnist_train(cfg.data_dir);
    RawDataset test = load_mnist_test(cfg.data_dir);

    std::filesystem::create_directories(cfg.output_dir);
    write_manifest(cfg, cfg.output_dir + "/manifest.txt");

    std::vector<detail::RunArtifacts> runs(cfg.n_runs);
    std::vector<std::exception_ptr> errors(cfg.n_runs);
    std::atomic<std::size_t> next{0};
    const std::size_t n_workers = std::max<std::size_t>(1, std::min(cfg.parallel_runs, cfg.n_runs));
    auto worker = [&]() {
        for (;;) {
            const std::size_t r = next.fetch_add(1);
            if (r >= cfg.n_runs) return;
            try {
                runs[r] = detail::execute_run(cfg, train, test, r, cfg.output_dir,
                                              r < cfg.snapshot_runs);
            } catch (...) {
                errors[r] = std::current_exception();
            }
        }
    };
    if (n_workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    ExperimentResult result;
    result.metrics.n_tasks = cfg.n_tasks;
    for (const auto& run : runs) result.metrics.acc.push_back(run.acc);

    // metrics.csv, long format. task = -1 rows carry the running average
    // over seen tasks; run = -1 / -2 rows carry mean / std across runs.
    const std::string metrics_path = cfg.output_dir + "/metrics.csv";
    std::ofstream mf(metrics_path);
    if (!mf) throw std::runtime_error("cannot write " + metrics_path);
    mf << "run,stage_after_task,task,accuracy\n";
    for (std::size_t r = 0; r < cfg.n_runs; ++r)
        for (std::size_t stage = 1; stage <= cfg.n_tasks; ++stage) {
            for (std::size_t t = 1; t <= stage; ++t)
                mf << r << "," << stage << "," << t << ","
                   << detail::fmt17(result.metrics.acc[r][stage - 1][t - 1]) << "\n";
            mf << r << "," << stage << ",-1," << detail::fmt17(result.metrics.average_after(r, stage))
               << "\n";
        }
    auto aggregate = [&](std::size_t stage, int t, auto value_of) {
        double mean = 0.0;
        for (std::size_t r = 0; r < cfg.n_runs; ++r) mean += value_of(r);
        mean /= double(cfg.n_runs);
        double var = 0.0;
        for (std::size_t r = 0; r < cfg.n_runs; ++r) {
            const double d = value_of(r) - mean;
            var += d * d;
        }
        mf << "-1," << stage << "," << t << "," << detail::fmt17(mean) << "\n";
        mf << "-2," << stage << "," << t << ","
           << detail::fmt17(std::sqrt(var / double(cfg.n_runs))) << "\n";
    };
    for (std::size_t stage = 1; stage <= cfg.n_tasks; ++stage) {
        for (std::size_t t = 1; t <= stage; ++t)
            aggregate(stage, int(t),
                      [&](std::size_t r) { return result.metrics.acc[r][stage - 1][t - 1]; });
        aggregate(stage, -1,
                  [&](std::size_t r) { return result.metrics.average_after(r, stage); });
    }
    mf.close();
    result.metrics_csv_path = metrics_path;

    auto dump = [&](const std::string& name, const std::string& header,
                    auto field) {
        std::ofstream f(cfg.output_dir + "/" + name);
        f << header << "\n";
        for (const auto& run : runs) f << field(run);
    };
    dump("unit_diagnostics.csv", "stage,layer,unit,out_signal,input_kl,heads_signalling",
         [](const detail::RunArtifacts& r) { return r.unit_diagnostics_csv; });
    dump("prune_report.csv", "stage,layer,unit,out_signal,input_kl,active_flag",
         [](const detail::RunArtifacts& r) { return r.prune_report_csv; });
    dump("prune_verify.csv", "stage,task,accuracy_before,accuracy_after,abs_delta",
         [](const detail::RunArtifacts& r) { return r.prune_verify_csv; });
    return result;
}

}  // namespace vcl

#endif  // VCL_TRAINER_HPP
