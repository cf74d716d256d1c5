#ifndef VCL_CONFIG_HPP
#define VCL_CONFIG_HPP

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "vcl/dataset.hpp"

namespace vcl {

// Full resolved experiment configuration. Every field lands in the run
// manifest, which is sufficient to replay a run bit-identically.
struct ExperimentConfig {
    std::string preset = "split-desk";
    Benchmark benchmark = Benchmark::Split;
    std::size_t n_tasks = 5;
    std::vector<std::size_t> widths = {200};
    std::size_t epochs = 120;
    std::size_t batch_size = 256;
    double lr = 1e-3;
    std::size_t n_train_samples = 10;
    std::size_t n_eval_samples = 100;
    std::size_t coreset_k = 0;
    std::size_t coreset_finetune_epochs = 100;
    double init_mean_std = 0.1;
    double init_variance = 1e-3;
    std::size_t n_runs = 3;
    std::uint64_t master_seed = 42;
    double delta_out = 0.02;
    double delta_kl = 0.1;
    std::string output_dir = "out";
    std::string data_dir = "data/mnist";
    bool identity_first_task = false;
    bool eval_mc = true;  // Monte Carlo predictive averaging vs mean-weight pass
    std::size_t parallel_runs = 1;
    std::size_t snapshot_runs = 1;  // export weight snapshots for the first k runs
};

// Benchmark protocols from the experiment section; the *-desk variants are
// the reduced-scale presets the default test tier runs.
//
// delta_out calibration: the active/pruned split in the |mu|+sigma signal
// only appears after long optimisation (the variance parameters move at most
// ~lr per Adam step, so the inactive cluster needs >250 epochs to settle at
// its plateau around 0.5-0.7 while active units sit above ~0.85). The value
// 0.8 was calibrated once against those histograms and is frozen on the
// single-head *-prune presets, the only place the gap exists. Multi-head and
// desk-scale runs have no separating threshold (the max-over-heads noise
// floor overlaps the per-task signals, or training stops mid-transit), so
// everywhere else the conservative 0.02 default applies, under which
// nothing is pruned.
inline ExperimentConfig preset_config(const std::string& name) {
    ExperimentConfig c;
    c.preset = name;
    if (name == "split-paper") {
        c.benchmark = Benchmark::Split;
        c.n_tasks = 5;
        c.widths = {200};
        c.epochs = 600;
        c.batch_size = 256;
        c.n_runs = 10;
    } else if (name == "split-desk") {
        c.benchmark = Benchmark::Split;
        c.n_tasks = 5;
        c.widths = {200};
        c.epochs = 120;
        c.batch_size = 256;
        c.n_runs = 3;
    } else if (name == "split-prune") {
        // Single task at full paper-scale epochs: the prune gates (few
        // active units AND accuracy preserved after zeroing the rest) only
        // hold jointly for a single head. With several heads the inactive
        // units' max-over-heads signal floor (~1.0) overlaps the moderate
        // per-task signals, so no threshold is simultaneously sparse and
        // sound there.
        c.benchmark = Benchmark::Split;
        c.n_tasks = 1;
        c.widths = {200};
        c.epochs = 600;
        c.batch_size = 256;
        c.n_runs = 1;
        c.delta_out = 0.8;
    } else if (name == "permuted-paper") {
        c.benchmark = Benchmark::Permuted;
        c.n_tasks = 10;
        c.widths = {100, 100};
        c.epochs = 800;
        c.batch_size = 1024;
        c.n_runs = 5;
    } else if (name == "permuted-desk") {
        c.benchmark = Benchmark::Permuted;
        c.n_tasks = 5;
        c.widths = {100, 100};
        c.epochs = 100;
        c.batch_size = 1024;
        c.n_runs = 2;
    } else if (name == "permuted-prune") {
        c.benchmark = Benchmark::Permuted;
        c.n_tasks = 1;
        c.widths = {100, 100};
        c.epochs = 300;
        c.batch_size = 1024;
        c.n_runs = 1;
        c.delta_out = 0.8;
    } else {
        throw ConfigError("unknown preset: " + name);
    }
    return c;
}

namespace detail {

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::vector<std::size_t> parse_widths(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(std::stoul(item));
    if (out.empty()) throw ConfigError("widths: empty list");
    return out;
}

inline bool parse_bool(const std::string& s, const std::string& key) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError(key + ": expected true/false, got '" + s + "'");
}

}  // namespace detail

// Applies one key=value setting. Unknown keys are rejected (typo safety).
inline void apply_config_key(ExperimentConfig& c, const std::string& key,
                             const std::string& value) {
    try {
        if (key == "preset") {
            const std::string keep_out = c.output_dir, keep_data = c.data_dir;
            c = preset_config(value);
            c.output_dir = keep_out;
            c.data_dir = keep_data;
        } else if (key == "benchmark") {
            if (value == "split")
                c.benchmark = Benchmark::Split;
            else if (value == "permuted")
                c.benchmark = Benchmark::Permuted;
            else
                throw ConfigError("benchmark: expected split|permuted, got '" + value + "'");
        } else if (key == "n_tasks")
            c.n_tasks = std::stoul(value);
        else if (key == "widths")
            c.widths = detail::parse_widths(value);
        else if (key == "epochs")
            c.epochs = std::stoul(value);
        else if (key == "batch_size")
            c.batch_size = std::stoul(value);
        else if (key == "lr")
            c.lr = std::stod(value);
        else if (key == "n_train_samples")
            c.n_train_samples = std::stoul(value);
        else if (key == "n_eval_samples")
            c.n_eval_samples = std::stoul(value);
        else if (key == "coreset_k")
            c.coreset_k = std::stoul(value);
        else if (key == "coreset_finetune_epochs")
            c.coreset_finetune_epochs = std::stoul(value);
        else if (key == "init_mean_std")
            c.init_mean_std = std::stod(value);
        else if (key == "init_variance")
            c.init_variance = std::stod(value);
        else if (key == "n_runs")
            c.n_runs = std::stoul(value);
        else if (key == "master_seed")
            c.master_seed = std::stoull(value);
        else if (key == "delta_out")
            c.delta_out = std::stod(value);
        else if (key == "delta_kl")
            c.delta_kl = std::stod(value);
        else if (key == "output_dir")
            c.output_dir = value;
        else if (key == "data_dir")
            c.data_dir = value;
        else if (key == "identity_first_task")
            c.identity_first_task = detail::parse_bool(value, key);
        else if (key == "eval_mc")
            c.eval_mc = detail::parse_bool(value, key);
        else if (key == "parallel_runs")
            c.parallel_runs = std::stoul(value);
        else if (key == "snapshot_runs")
            c.snapshot_runs = std::stoul(value);
        else
            throw ConfigError("unknown config key: " + key);
    } catch (const std::invalid_argument&) {
        throw ConfigError(key + ": cannot parse value '" + value + "'");
    } catch (const std::out_of_range&) {
        throw ConfigError(key + ": value out of range '" + value + "'");
    }
}

// The resolved config as ordered key=value lines; this is the manifest body
// and is itself parseable by load_config_text.
inline std::vector<std::pair<std::string, std::string>> config_entries(
    const ExperimentConfig& c) {
    std::string widths;
    for (std::size_t i = 0; i < c.widths.size(); ++i)
        widths += (i ? "," : "") + std::to_string(c.widths[i]);
    return {
        {"benchmark", c.benchmark == Benchmark::Split ? "split" : "permuted"},
        {"n_tasks", std::to_string(c.n_tasks)},
        {"widths", widths},
        {"epochs", std::to_string(c.epochs)},
        {"batch_size", std::to_string(c.batch_size)},
        {"lr", detail::format_double(c.lr)},
        {"n_train_samples", std::to_string(c.n_train_samples)},
        {"n_eval_samples", std::to_string(c.n_eval_samples)},
        {"coreset_k", std::to_string(c.coreset_k)},
        {"coreset_finetune_epochs", std::to_string(c.coreset_finetune_epochs)},
        {"init_mean_std", detail::format_double(c.init_mean_std)},
        {"init_variance", detail::format_double(c.init_variance)},
        {"n_runs", std::to_string(c.n_runs)},
        {"master_seed", std::to_string(c.master_seed)},
        {"delta_out", detail::format_double(c.delta_out)},
        {"delta_kl", detail::format_double(c.delta_kl)},
        {"output_dir", c.output_dir},
        {"data_dir", c.data_dir},
        {"identity_first_task", c.identity_first_task ? "true" : "false"},
        {"eval_mc", c.eval_mc ? "true" : "false"},
        {"parallel_runs", std::to_string(c.parallel_runs)},
        {"snapshot_runs", std::to_string(c.snapshot_runs)},
    };
}

// key=value text, '#' comments, blank lines ignored. A `preset` line (if
// any) must be applied first so later keys override it; we enforce that by
// applying preset before the rest regardless of position.
inline ExperimentConfig load_config_text(const std::string& text,
                                         const ExperimentConfig& base = {}) {
    std::vector<std::pair<std::string, std::string>> kvs;
    std::stringstream ss(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        const auto last = line.find_last_not_of(" \t\r");
        line = line.substr(first, last - first + 1);
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t");
            const auto b = s.find_last_not_of(" \t");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        kvs.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    ExperimentConfig cfg = base;
    for (const auto& [k, v] : kvs)
        if (k == "preset") apply_config_key(cfg, k, v);
    for (const auto& [k, v] : kvs)
        if (k != "preset") apply_config_key(cfg, k, v);
    return cfg;
}

inline ExperimentConfig load_config_file(const std::string& path,
                                         const ExperimentConfig& base = {}) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::stringstream buf;
    buf << f.rdbuf();
    return load_config_text(buf.str(), base);
}

inline void write_manifest(const ExperimentConfig& c, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write manifest: " + path);
    f << "preset=" << c.preset << "\n";
    for (const auto& [k, v] : config_entries(c)) f << k << "=" << v << "\n";
}

}  // namespace vcl

#endif  // VCL_CONFIG_HPP
