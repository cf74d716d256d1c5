#ifndef VCL_ANALYSIS_HPP
#define VCL_ANALYSIS_HPP

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "vcl/dataset.hpp"
#include "vcl/network.hpp"
#include "vcl/objective.hpp"

namespace vcl {

// Per-hidden-unit pruning signatures: how far the unit's incoming weight
// posteriors moved from the initial prior, and the strongest signal its
// outgoing weights can carry. A pruned unit shows incoming weights at the
// prior and outgoing weights collapsed to a near-delta at zero.
struct UnitDiagnostics {
    std::size_t layer = 0;  // hidden layer index (body layer producing the unit)
    std::size_t unit = 0;
    double input_kl = 0.0;   // KL of fan-in weights (incl. bias) to the standard normal
    double out_signal = 0.0;  // max over outgoing connections of |mu| + sigma
    std::size_t heads_signalling = 0;  // heads with an outgoing |mu|+sigma above threshold
};

struct PruneUnitRecord {
    std::size_t layer = 0;
    std::size_t unit = 0;
    double out_signal = 0.0;
    double input_kl = 0.0;
    bool active = false;
};

struct PruneReport {
    std::string stage;  // e.g. "after-task-3"
    std::vector<std::vector<std::size_t>> active_units;  // per hidden layer
    std::vector<std::size_t> layer_sizes;
    std::vector<PruneUnitRecord> records;
    // Units with above-threshold outgoing signal in more than one head
    // (forward transfer observable; only meaningful for multi-head setups).
    std::size_t multi_head_units = 0;
    std::vector<double> accuracy_before, accuracy_after;  // filled by prune_and_verify

    std::size_t active_count(std::size_t layer) const { return active_units.at(layer).size(); }
};

namespace detail {

inline double kl_scalar_to_std_normal(double mu, double var) {
    return 0.5 * (var + mu * mu - 1.0 - std::log(var));
}

}  // namespace detail

// One record per hidden unit. out_signal for the last hidden layer scans all
// heads' rows; inner layers scan the next body layer's rows.
inline std::vector<UnitDiagnostics> compute_unit_diagnostics(const PosteriorSnapshot& snap,
                                                             double head_signal_threshold = 0.0) {
    std::vector<UnitDiagnostics> out;
    for (std::size_t l = 0; l < snap.body.size(); ++l) {
        const LayerMoments& in_layer = snap.body[l];
        const bool last_hidden = (l + 1 == snap.body.size());
        for (std::size_t j = 0; j < in_layer.W_mu.cols(); ++j) {
            UnitDiagnostics d;
            d.layer = l;
            d.unit = j;
            for (std::size_t i = 0; i < in_layer.W_mu.rows(); ++i)
                d.input_kl +=
                    detail::kl_scalar_to_std_normal(in_layer.W_mu(i, j), in_layer.W_var(i, j));
            d.input_kl +=
                detail::kl_scalar_to_std_normal(in_layer.b_mu(0, j), in_layer.b_var(0, j));

            auto scan_row = [&](const LayerMoments& next) {
                double best = 0.0;
                for (std::size_t c = 0; c < next.W_mu.cols(); ++c)
                    best = std::max(best, std::abs(next.W_mu(j, c)) + std::sqrt(next.W_var(j, c)));
                return best;
            };
            if (last_hidden) {
                for (const LayerMoments& head : snap.heads) {
                    const double s = scan_row(head);
                    d.out_signal = std::max(d.out_signal, s);
                    if (s >= head_signal_threshold && head_signal_threshold > 0.0)
                        ++d.heads_signalling;
                }
            } else {
                d.out_signal = scan_row(snap.body[l + 1]);
            }
            out.push_back(d);
        }
    }
    return out;
}

// A unit is pruned iff its outgoing signal falls below delta_out; the
// incoming-KL signature is recorded as corroborating evidence only, since
// the outgoing signal is what bounds the unit's influence on predictions.
inline PruneReport detect_active_units(const std::vector<UnitDiagnostics>& diags,
                                       double delta_out, double delta_kl,
                                       std::string stage = "") {
    if (delta_out <= 0.0 || delta_kl <= 0.0)
        throw ConfigError("detect_active_units: thresholds must be > 0");
    PruneReport report;
    report.stage = std::move(stage);
    for (const UnitDiagnostics& d : diags) {
        while (report.active_units.size() <= d.layer) {
            report.active_units.emplace_back();
            report.layer_sizes.push_back(0);
        }
        ++report.layer_sizes[d.layer];
        const bool active = d.out_signal >= delta_out;
        if (active) report.active_units[d.layer].push_back(d.unit);
        if (active && d.heads_signalling > 1) ++report.multi_head_units;
        report.records.push_back({d.layer, d.unit, d.out_signal, d.input_kl, active});
    }
    (void)delta_kl;  // recorded per unit via input_kl; not part of the prune rule
    return report;
}

// Copy of the network with every pruned unit removed: outgoing means and
// variances zeroed (variance to a near-zero floor; the parameterisation is
// log-variance) and incoming weights cleared.
inline BayesianNetwork prune_network(const BayesianNetwork& net, const PruneReport& report) {
    constexpr double kDeadRho = -100.0;  // exp(-100) ~ 3.7e-44
    BayesianNetwork pruned = net;
    for (std::size_t l = 0; l < pruned.body.size(); ++l) {
        std::vector<bool> keep(pruned.body[l].out_dim(), false);
        if (l < report.active_units.size())
            for (std::size_t j : report.active_units[l]) keep[j] = true;
        const bool last_hidden = (l + 1 == pruned.body.size());
        for (std::size_t j = 0; j < keep.size(); ++j) {
            if (keep[j]) continue;
            MeanFieldLayer& in_layer = pruned.body[l];
            for (std::size_t i = 0; i < in_layer.W_mu.rows(); ++i) {
                in_layer.W_mu(i, j) = 0.0;
                in_layer.W_rho(i, j) = kDeadRho;
            }
            in_layer.b_mu(0, j) = 0.0;
            in_layer.b_rho(0, j) = kDeadRho;
            auto clear_row = [&](MeanFieldLayer& next) {
                for (std::size_t c = 0; c < next.W_mu.cols(); ++c) {
                    next.W_mu(j, c) = 0.0;
                    next.W_rho(j, c) = kDeadRho;
                }
            };
            if (last_hidden)
                for (auto& head : pruned.heads) clear_row(head);
            else
                clear_row(pruned.body[l + 1]);
        }
    }
    return pruned;
}

// Zeroes pruned units on a copy, re-evaluates every task and records the
// accuracy deltas into the report.
inline std::vector<double> prune_and_verify(const BayesianNetwork& net, PruneReport& report,
                                            const TaskProvider& provider, std::size_t n_tasks,
                                            std::size_t n_eval_samples, SeededRng& rng) {
    const BayesianNetwork pruned = prune_network(net, report);
    report.accuracy_before.clear();
    report.accuracy_after.clear();
    std::vector<double> deltas;
    for (std::size_t t = 0; t < n_tasks; ++t) {
        TaskDataset task = provider.materialize(t);
        SeededRng rng_before = rng.derive(2 * t);
        SeededRng rng_after = rng.derive(2 * t);  // same stream: identical noise draws
        const double before =
            accuracy(net, task.test_x, task.test_y, task.spec.head_id, rng_before, n_eval_samples);
        const double after = accuracy(pruned, task.test_x, task.test_y, task.spec.head_id,
                                      rng_after, n_eval_samples);
        report.accuracy_before.push_back(before);
        report.accuracy_after.push_back(after);
        deltas.push_back(std::abs(after - before));
    }
    return deltas;
}

// ---------------------------------------------------------------------------
// Snapshot CSV export / import. Decimal serialisation uses 17 significant
// digits, which round-trips 64-bit floats exactly. The bias appears as one
// extra row with row_index == in_dim.

namespace detail {

inline std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline void write_layer_csv(const LayerMoments& m, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write snapshot layer: " + path);
    f << "row_index,col_index,mu,sigma2\n";
    for (std::size_t r = 0; r < m.W_mu.rows(); ++r)
        for (std::size_t c = 0; c < m.W_mu.cols(); ++c)
            f << r << "," << c << "," << fmt17(m.W_mu(r, c)) << "," << fmt17(m.W_var(r, c))
              << "\n";
    const std::size_t bias_row = m.W_mu.rows();
    for (std::size_t c = 0; c < m.b_mu.cols(); ++c)
        f << bias_row << "," << c << "," << fmt17(m.b_mu(0, c)) << "," << fmt17(m.b_var(0, c))
          << "\n";
}

inline LayerMoments read_layer_csv(const std::string& path, std::size_t in_dim,
                                   std::size_t out_dim) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read snapshot layer: " + path);
    LayerMoments m{Matrix(in_dim, out_dim), Matrix(in_dim, out_dim), Matrix(1, out_dim),
                   Matrix(1, out_dim)};
    std::string line;
    std::getline(f, line);  // header
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::size_t r, c;
        double mu, var;
        if (std::sscanf(line.c_str(), "%zu,%zu,%lf,%lf", &r, &c, &mu, &var) != 4)
            throw std::runtime_error("snapshot CSV: bad line in " + path + ": " + line);
        if (r < in_dim) {
            m.W_mu(r, c) = mu;
            m.W_var(r, c) = var;
        } else {
            m.b_mu(0, c) = mu;
            m.b_var(0, c) = var;
        }
    }
    return m;
}

}  // namespace detail

// Writes one CSV per layer plus a manifest listing layers, shapes and the
// task stage, under `dir` with filename prefix `tag`.
inline void export_weight_snapshot(const PosteriorSnapshot& snap, const std::string& dir,
                                   const std::string& tag) {
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir + "/" + tag + "_manifest.txt");
    if (!manifest) throw std::runtime_error("cannot write snapshot manifest in " + dir);
    manifest << "stage=" << snap.provenance << "\n";
    for (std::size_t l = 0; l < snap.body.size(); ++l) {
        const std::string name = "body" + std::to_string(l);
        detail::write_layer_csv(snap.body[l], dir + "/" + tag + "_" + name + ".csv");
        manifest << "layer=" << name << " rows=" << snap.body[l].W_mu.rows()
                 << " cols=" << snap.body[l].W_mu.cols() << "\n";
    }
    for (std::size_t h = 0; h < snap.heads.size(); ++h) {
        const std::string name = "head" + std::to_string(h);
        detail::write_layer_csv(snap.heads[h], dir + "/" + tag + "_" + name + ".csv");
        manifest << "layer=" << name << " rows=" << snap.heads[h].W_mu.rows()
                 << " cols=" << snap.heads[h].W_mu.cols() << "\n";
    }
}

inline PosteriorSnapshot import_weight_snapshot(const std::string& dir, const std::string& tag) {
    std::ifstream manifest(dir + "/" + tag + "_manifest.txt");
    if (!manifest) throw std::runtime_error("missing snapshot manifest: " + dir + "/" + tag +
                                            "_manifest.txt");
    PosteriorSnapshot snap;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.rfind("stage=", 0) == 0) {
            snap.provenance = line.substr(6);
            continue;
        }
        char name[64];
        std::size_t rows, cols;
        if (std::sscanf(line.c_str(), "layer=%63s rows=%zu cols=%zu", name, &rows, &cols) != 3)
            continue;
        LayerMoments m =
            detail::read_layer_csv(dir + "/" + tag + "_" + name + ".csv", rows, cols);
        if (std::string(name).rfind("body", 0) == 0)
            snap.body.push_back(std::move(m));
        else
            snap.heads.push_back(std::move(m));
    }
    return snap;
}

// Rebuilds a live network from snapshot moments (rho = ln sigma2).
inline BayesianNetwork network_from_snapshot(const PosteriorSnapshot& snap) {
    BayesianNetwork net;
    auto to_layer = [](const LayerMoments& m) {
        MeanFieldLayer l(m.W_mu.rows(), m.W_mu.cols());
        l.W_mu = m.W_mu;
        l.b_mu = m.b_mu;
        for (std::size_t i = 0; i < l.W_rho.size(); ++i)
            l.W_rho.data()[i] = std::log(m.W_var.data()[i]);
        for (std::size_t i = 0; i < l.b_rho.size(); ++i)
            l.b_rho.data()[i] = std::log(m.b_var.data()[i]);
        return l;
    };
    for (const auto& m : snap.body) {
        if (net.body.empty()) net.input_dim = m.W_mu.rows();
        net.body.push_back(to_layer(m));
        net.body_widths.push_back(m.W_mu.cols());
    }
    for (const auto& m : snap.heads) net.heads.push_back(to_layer(m));
    return net;
}

// PruneReport rows as CSV: (stage, layer, unit, out_signal, input_kl, active_flag).
inline void append_prune_report_csv(const PruneReport& report, std::ostream& os) {
    for (const auto& r : report.records)
        os << report.stage << "," << r.layer << "," << r.unit << "," << detail::fmt17(r.out_signal)
           << "," << detail::fmt17(r.input_kl) << "," << (r.active ? 1 : 0) << "\n";
}

inline void append_unit_diagnostics_csv(const std::vector<UnitDiagnostics>& diags,
                                        const std::string& stage, std::ostream& os) {
    for (const auto& d : diags)
        os << stage << "," << d.layer << "," << d.unit << "," << detail::fmt17(d.out_signal) << ","
           << detail::fmt17(d.input_kl) << "," << d.heads_signalling << "\n";
}

}  // namespace vcl

#endif  // VCL_ANALYSIS_HPP
