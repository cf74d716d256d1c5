#ifndef VCL_DATASET_HPP
#define VCL_DATASET_HPP

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "vcl/idx.hpp"
#include "vcl/matrix.hpp"
#include "vcl/rng.hpp"

namespace vcl {

enum class Benchmark { Split, Permuted };

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TaskSpec {
    Benchmark benchmark;
    std::size_t task_index;  // 1-based
    std::optional<std::pair<int, int>> digits;          // split only
    std::optional<std::vector<std::size_t>> permutation;  // permuted only, on pixel indices
    std::size_t head_id;
    std::size_t n_classes;
};

struct TaskDataset {
    Matrix train_x;
    std::vector<std::uint8_t> train_y;
    Matrix test_x;
    std::vector<std::uint8_t> test_y;
    TaskSpec spec;

    std::size_t n_train() const { return train_x.rows(); }
};

struct CoresetExample {
    std::vector<double> input;
    std::uint8_t target;
    std::size_t head_id;
};

// Held-out random examples per task, trained on only just before test time.
struct CoresetStore {
    std::size_t per_task_k = 0;
    std::vector<std::vector<CoresetExample>> per_task;

    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& t : per_task) n += t.size();
        return n;
    }
};

// Split MNIST digit pairing per task order: {0v1},{2v3},{4v5},{6v7},{8v9},
// one head per task.
inline std::vector<TaskSpec> make_split_specs() {
    constexpr std::array<std::pair<int, int>, 5> pairs = {
        {{0, 1}, {2, 3}, {4, 5}, {6, 7}, {8, 9}}};
    std::vector<TaskSpec> specs;
    for (std::size_t t = 0; t < 5; ++t)
        specs.push_back(TaskSpec{Benchmark::Split, t + 1, pairs[t], std::nullopt, t, 2});
    return specs;
}

// Permuted MNIST task specs: every task's pixel permutation is a seeded
// random draw; set identity_first_task to pin task 1 to the raw pixel order
// for comparison with codebases that do so.
inline std::vector<TaskSpec> make_permuted_specs(std::size_t n_tasks, SeededRng& rng,
                                                 bool identity_first_task = false) {
    if (n_tasks < 1) throw ConfigError("make_permuted_specs: n_tasks must be >= 1");
    std::vector<TaskSpec> specs;
    for (std::size_t t = 0; t < n_tasks; ++t) {
        std::vector<std::size_t> perm(784);
        for (std::size_t i = 0; i < 784; ++i) perm[i] = i;
        if (!(t == 0 && identity_first_task)) shuffle(perm, rng);
        specs.push_back(
            TaskSpec{Benchmark::Permuted, t + 1, std::nullopt, std::move(perm), 0, 10});
    }
    return specs;
}

namespace detail {

inline void filter_split(const RawDataset& raw, const TaskSpec& spec, Matrix& x,
                         std::vector<std::uint8_t>& y) {
    const auto [lo, hi] = *spec.digits;
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < raw.labels.size(); ++i)
        if (raw.labels[i] == lo || raw.labels[i] == hi) keep.push_back(i);
    x = Matrix(keep.size(), 784);
    y.resize(keep.size());
    for (std::size_t j = 0; j < keep.size(); ++j) {
        const double* src = raw.images.data() + keep[j] * 784;
        std::copy(src, src + 784, x.data() + j * 784);
        y[j] = raw.labels[keep[j]] == lo ? 0 : 1;  // smaller digit -> class 0
    }
}

inline void apply_permutation(const RawDataset& raw, const TaskSpec& spec, Matrix& x,
                              std::vector<std::uint8_t>& y) {
    const auto& perm = *spec.permutation;
    x = Matrix(raw.images.rows(), 784);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const double* in = raw.images.data() + r * 784;
        double* o = x.data() + r * 784;
        for (std::size_t i = 0; i < 784; ++i) o[i] = in[perm[i]];
    }
    y = raw.labels;
}

}  // namespace detail

// Builds one task's data from the raw splits. Tasks are materialised on
// demand because a full set of permuted copies would not fit in memory at
// the ten-task protocol scale.
inline TaskDataset materialize_task(const RawDataset& raw_train, const RawDataset& raw_test,
                                    const TaskSpec& spec) {
    TaskDataset task;
    task.spec = spec;
    if (spec.benchmark == Benchmark::Split) {
        detail::filter_split(raw_train, spec, task.train_x, task.train_y);
        detail::filter_split(raw_test, spec, task.test_x, task.test_y);
    } else {
        detail::apply_permutation(raw_train, spec, task.train_x, task.train_y);
        detail::apply_permutation(raw_test, spec, task.test_x, task.test_y);
    }
    return task;
}

inline std::vector<TaskDataset> build_split_tasks(const RawDataset& raw_train,
                                                  const RawDataset& raw_test) {
    std::vector<TaskDataset> tasks;
    for (const auto& spec : make_split_specs())
        tasks.push_back(materialize_task(raw_train, raw_test, spec));
    return tasks;
}

inline std::vector<TaskDataset> build_permuted_tasks(const RawDataset& raw_train,
                                                     const RawDataset& raw_test,
                                                     std::size_t n_tasks, SeededRng& rng,
                                                     bool identity_first_task = false) {
    std::vector<TaskDataset> tasks;
    for (const auto& spec : make_permuted_specs(n_tasks, rng, identity_first_task))
        tasks.push_back(materialize_task(raw_train, raw_test, spec));
    return tasks;
}

// Lazy view over a benchmark's task sequence. Tasks are materialised one at
// a time; a full permuted task set does not fit in memory at paper scale.
struct TaskProvider {
    const RawDataset* raw_train = nullptr;
    const RawDataset* raw_test = nullptr;
    std::vector<TaskSpec> specs;

    static TaskProvider split(const RawDataset& train, const RawDataset& test) {
        return TaskProvider{&train, &test, make_split_specs()};
    }
    static TaskProvider permuted(const RawDataset& train, const RawDataset& test,
                                 std::size_t n_tasks, SeededRng& rng,
                                 bool identity_first_task = false) {
        return TaskProvider{&train, &test, make_permuted_specs(n_tasks, rng, identity_first_task)};
    }

    std::size_t n_tasks() const { return specs.size(); }
    TaskDataset materialize(std::size_t t) const {
        return materialize_task(*raw_train, *raw_test, specs.at(t));
    }
};

// Uniformly samples K training examples without replacement into the coreset
// and removes them from the task's training set. The test set is untouched.
inline std::vector<CoresetExample> draw_random_coreset(TaskDataset& task, std::size_t k,
                                                       SeededRng& rng) {
    const std::size_t n = task.n_train();
    if (k > n)
        throw ConfigError("draw_random_coreset: K=" + std::to_string(k) + " > N_t=" +
                          std::to_string(n));
    if (k == 0) return {};
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    shuffle(idx, rng);

    std::vector<CoresetExample> coreset;
    coreset.reserve(k);
    for (std::size_t j = 0; j < k; ++j) {
        const double* src = task.train_x.data() + idx[j] * 784;
        coreset.push_back({std::vector<double>(src, src + 784), task.train_y[idx[j]],
                           task.spec.head_id});
    }
    Matrix reduced_x(n - k, task.train_x.cols());
    std::vector<std::uint8_t> reduced_y(n - k);
    for (std::size_t j = k; j < n; ++j) {
        const double* src = task.train_x.data() + idx[j] * task.train_x.cols();
        std::copy(src, src + task.train_x.cols(), reduced_x.data() + (j - k) * task.train_x.cols());
        reduced_y[j - k] = task.train_y[idx[j]];
    }
    task.train_x = std::move(reduced_x);
    task.train_y = std::move(reduced_y);
    return coreset;
}

}  // namespace vcl

#endif  // VCL_DATASET_HPP
