#ifndef VCL_GRADCHECK_HPP
#define VCL_GRADCHECK_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "vcl/objective.hpp"

namespace vcl {

// Flat view over the in-scope variational parameters (body layers then
// heads, each as W_mu, W_rho, b_mu, b_rho), used to walk coordinates during
// finite-difference verification.
class ParamView {
public:
    ParamView(BayesianNetwork& net, const std::vector<std::size_t>& head_ids) {
        for (std::size_t l = 0; l < net.body.size(); ++l)
            add_layer(net.body[l], "body" + std::to_string(l));
        for (std::size_t h : head_ids) add_layer(net.heads[h], "head" + std::to_string(h));
    }

    std::size_t size() const { return entries_.size(); }
    double& value(std::size_t i) { return *entries_[i].p; }
    const std::string& name(std::size_t i) const { return entries_[i].name; }

    // Matching flat walk over a GradientSet with the same scope.
    static std::vector<const double*> flatten(const GradientSet& g) {
        std::vector<const double*> out;
        auto add = [&out](const Matrix& m) {
            for (std::size_t i = 0; i < m.size(); ++i) out.push_back(m.data() + i);
        };
        for (const auto& pg : g.body) {
            add(pg.W_mu);
            add(pg.W_rho);
            add(pg.b_mu);
            add(pg.b_rho);
        }
        for (const auto& [id, pg] : g.heads) {
            add(pg.W_mu);
            add(pg.W_rho);
            add(pg.b_mu);
            add(pg.b_rho);
        }
        return out;
    }

private:
    struct Entry {
        double* p;
        std::string name;
    };

    void add_layer(MeanFieldLayer& l, const std::string& prefix) {
        add_matrix(l.W_mu, prefix + ".W_mu");
        add_matrix(l.W_rho, prefix + ".W_rho");
        add_matrix(l.b_mu, prefix + ".b_mu");
        add_matrix(l.b_rho, prefix + ".b_rho");
    }
    void add_matrix(Matrix& m, const std::string& prefix) {
        for (std::size_t i = 0; i < m.size(); ++i)
            entries_.push_back({m.data() + i, prefix + "[" + std::to_string(i) + "]"});
    }

    std::vector<Entry> entries_;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_coordinate;
    double worst_analytic = 0.0;
    double worst_fd = 0.0;
};

// Records the noise draws of one stochastic pass so the loss can be
// re-evaluated at perturbed parameters with identical epsilon.
inline std::vector<Matrix> record_noise(const BayesianNetwork& net, const Matrix& x,
                                        std::size_t head_id, std::size_t n_samples,
                                        std::uint64_t sample_seed) {
    SeededRng rng(sample_seed);
    std::vector<Matrix> recorded;
    NoiseFn noise = [&rng, &recorded](std::size_t r, std::size_t c) {
        recorded.push_back(sample_standard_normal(rng, r, c));
        return recorded.back();
    };
    forward_samples(net, x, head_id, n_samples, noise);
    return recorded;
}

// Central finite differences of -elbo against a provided analytic gradient,
// over a random subset of coordinates. Noise and batch stay fixed across
// evaluations; the worst relative error is returned.
inline GradCheckResult fd_max_rel_error(BayesianNetwork& net, const PosteriorSnapshot& prior,
                                        const Matrix& batch_x,
                                        const std::vector<std::uint8_t>& batch_y,
                                        std::size_t head_id, std::size_t n_task_train,
                                        std::size_t n_samples,
                                        const std::vector<Matrix>& fixed_noise,
                                        const GradientSet& analytic, double h,
                                        std::size_t n_coords, SeededRng& coord_rng) {
    ParamView view(net, {head_id});
    const std::vector<const double*> flat_grads = ParamView::flatten(analytic);
    if (flat_grads.size() != view.size())
        throw std::logic_error("fd_max_rel_error: gradient/parameter size mismatch");

    auto loss = [&]() {
        ElboResult r = minibatch_elbo(net, prior, batch_x, batch_y, head_id, n_task_train,
                                      n_samples, replay_noise(fixed_noise));
        return -r.breakdown.elbo;
    };

    std::vector<std::size_t> coords;
    if (n_coords >= view.size()) {
        for (std::size_t i = 0; i < view.size(); ++i) coords.push_back(i);
    } else {
        for (std::size_t i = 0; i < n_coords; ++i)
            coords.push_back(static_cast<std::size_t>(coord_rng.next_below(view.size())));
    }

    GradCheckResult res;
    for (std::size_t i : coords) {
        double& p = view.value(i);
        const double saved = p;
        auto central = [&](double step) {
            p = saved + step;
            const double fp = loss();
            p = saved - step;
            const double fm = loss();
            p = saved;
            return (fp - fm) / (2.0 * step);
        };
        // The network is piecewise smooth (ReLU); if the stencil straddles a
        // kink the two step sizes disagree strongly. Shrink until they agree
        // so the comparison measures the gradient, not the kink.
        double fd = central(h);
        double cur_h = h;
        for (int attempt = 0; attempt < 12; ++attempt) {
            const double fd_half = central(cur_h / 2.0);
            if (std::abs(fd - fd_half) <=
                1e-5 * std::max({std::abs(fd), std::abs(fd_half), 1e-4}))
                break;
            cur_h /= 2.0;
            fd = fd_half;
        }
        const double an = *flat_grads[i];
        const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-4});
        if (rel > res.max_rel_error) {
            res.max_rel_error = rel;
            res.worst_coordinate = view.name(i);
            res.worst_analytic = an;
            res.worst_fd = fd;
        }
    }
    return res;
}

// End-to-end gradient verification on a caller-supplied network and batch:
// computes the analytic gradient, then compares against central differences
// with the same noise. Intended for small networks only.
inline GradCheckResult finite_difference_check(BayesianNetwork& net,
                                               const PosteriorSnapshot& prior,
                                               const Matrix& batch_x,
                                               const std::vector<std::uint8_t>& batch_y,
                                               std::size_t head_id, std::size_t n_task_train,
                                               std::size_t n_samples, double h,
                                               std::uint64_t sample_seed,
                                               std::size_t n_coords = 200) {
    const std::vector<Matrix> noise = record_noise(net, batch_x, head_id, n_samples, sample_seed);
    ElboResult analytic = minibatch_elbo(net, prior, batch_x, batch_y, head_id, n_task_train,
                                         n_samples, replay_noise(noise));
    SeededRng coord_rng(sample_seed ^ 0x5eedc0de);
    return fd_max_rel_error(net, prior, batch_x, batch_y, head_id, n_task_train, n_samples, noise,
                            analytic.grads, h, n_coords, coord_rng);
}

}  // namespace vcl

#endif  // VCL_GRADCHECK_HPP
