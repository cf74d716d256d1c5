#ifndef VCL_OBJECTIVE_HPP
#define VCL_OBJECTIVE_HPP

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "vcl/matrix.hpp"
#include "vcl/network.hpp"
#include "vcl/rng.hpp"

namespace vcl {

// KL( N(q_mu, q_var) || N(p_mu, p_var) ), summed over entries.
inline double kl_diag_gaussians(const Matrix& q_mu, const Matrix& q_var, const Matrix& p_mu,
                                const Matrix& p_var) {
    if (!q_mu.same_shape(q_var) || !q_mu.same_shape(p_mu) || !q_mu.same_shape(p_var))
        throw std::invalid_argument("kl_diag_gaussians: shape mismatch");
    double kl = 0.0;
    for (std::size_t i = 0; i < q_mu.size(); ++i) {
        const double qv = q_var.data()[i], pv = p_var.data()[i];
        if (qv <= 0.0 || pv <= 0.0)
            throw std::invalid_argument("kl_diag_gaussians: non-positive variance");
        const double dmu = q_mu.data()[i] - p_mu.data()[i];
        kl += 0.5 * (qv / pv + dmu * dmu / pv - 1.0 + std::log(pv) - std::log(qv));
    }
    return kl;
}

struct ElboBreakdown {
    double expected_log_lik = 0.0;  // scaled to a full-dataset estimate
    double kl_total = 0.0;
    std::vector<double> kl_per_layer;  // body layers in order, then in-scope heads
    double elbo = 0.0;
};

// Gradients of -ELBO for one layer's four parameter tensors.
struct ParamGrads {
    Matrix W_mu, W_rho, b_mu, b_rho;

    ParamGrads() = default;
    explicit ParamGrads(const MeanFieldLayer& l)
        : W_mu(l.in_dim(), l.out_dim()),
          W_rho(l.in_dim(), l.out_dim()),
          b_mu(1, l.out_dim()),
          b_rho(1, l.out_dim()) {}
};

// Gradients for every in-scope parameter: all body layers plus the heads
// touched by the current objective (one during task training, possibly
// several during coreset finetuning).
struct GradientSet {
    std::vector<ParamGrads> body;
    std::map<std::size_t, ParamGrads> heads;

    static GradientSet zeros_for(const BayesianNetwork& net,
                                 const std::vector<std::size_t>& head_ids) {
        GradientSet g;
        for (const auto& l : net.body) g.body.push_back(ParamGrads(l));
        for (std::size_t h : head_ids) g.heads.emplace(h, ParamGrads(net.head(h)));
        return g;
    }

    bool all_finite() const {
        for (const auto& pg : body)
            if (!pg.W_mu.all_finite() || !pg.W_rho.all_finite() || !pg.b_mu.all_finite() ||
                !pg.b_rho.all_finite())
                return false;
        for (const auto& [id, pg] : heads)
            if (!pg.W_mu.all_finite() || !pg.W_rho.all_finite() || !pg.b_mu.all_finite() ||
                !pg.b_rho.all_finite())
                return false;
        return true;
    }
};

namespace detail {

// Backward through one local-reparam layer given dL/da. Accumulates
// parameter gradients and returns dL/dx (skipped for the first layer).
//   a = m + sqrt(v).eps,  m = x W_mu + b_mu,  v = (x.x) W_var + b_var
inline Matrix layer_backward(const Matrix& x, const Matrix& x_sq, const Matrix& dA,
                             const LayerTape& tape, const MeanFieldLayer& layer,
                             const LayerVarCache& var, ParamGrads& g, bool need_dx) {
    // dv = dA . eps / (2 sqrt(v))
    Matrix dv(dA.rows(), dA.cols());
    for (std::size_t i = 0; i < dv.size(); ++i)
        dv.data()[i] = dA.data()[i] * tape.eps.data()[i] / (2.0 * tape.sqrt_v.data()[i]);

    add_at_b(g.W_mu, x, dA);
    // d(W_var) = x_sq^T dv, chained through W_var = exp(W_rho).
    Matrix dWvar(layer.in_dim(), layer.out_dim());
    as_eigen(dWvar).setZero();
    add_at_b(dWvar, x_sq, dv);
    for (std::size_t i = 0; i < dWvar.size(); ++i)
        g.W_rho.data()[i] += dWvar.data()[i] * var.W_var.data()[i];
    for (std::size_t r = 0; r < dA.rows(); ++r)
        for (std::size_t c = 0; c < dA.cols(); ++c) {
            g.b_mu(0, c) += dA(r, c);
            g.b_rho(0, c) += dv(r, c) * var.b_var.data()[c];
        }

    if (!need_dx) return Matrix();
    // dx = dA W_mu^T + 2 x . (dv W_var^T)
    Matrix dx(x.rows(), x.cols());
    as_eigen(dx).setZero();
    add_a_bt(dx, dA, layer.W_mu);
    Matrix dx_var(x.rows(), x.cols());
    as_eigen(dx_var).setZero();
    add_a_bt(dx_var, dv, var.W_var);
    for (std::size_t i = 0; i < dx.size(); ++i)
        dx.data()[i] += 2.0 * x.data()[i] * dx_var.data()[i];
    return dx;
}

// Closed-form gradient of KL(q||p) w.r.t. (mu, rho), added in place.
inline void add_kl_grads(const MeanFieldLayer& layer, const LayerVarCache& var,
                         const LayerMoments& prior, ParamGrads& g) {
    for (std::size_t i = 0; i < layer.W_mu.size(); ++i) {
        g.W_mu.data()[i] += (layer.W_mu.data()[i] - prior.W_mu.data()[i]) / prior.W_var.data()[i];
        g.W_rho.data()[i] += 0.5 * (var.W_var.data()[i] / prior.W_var.data()[i] - 1.0);
    }
    for (std::size_t i = 0; i < layer.b_mu.size(); ++i) {
        g.b_mu.data()[i] += (layer.b_mu.data()[i] - prior.b_mu.data()[i]) / prior.b_var.data()[i];
        g.b_rho.data()[i] += 0.5 * (var.b_var.data()[i] / prior.b_var.data()[i] - 1.0);
    }
}

inline double kl_layer(const MeanFieldLayer& layer, const LayerVarCache& var,
                       const LayerMoments& prior) {
    return kl_diag_gaussians(layer.W_mu, var.W_var, prior.W_mu, prior.W_var) +
           kl_diag_gaussians(layer.b_mu, var.b_var, prior.b_mu, prior.b_var);
}

}  // namespace detail

// Monte-Carlo likelihood term: adds gradients of
//   -(scale / n_samples) sum_s sum_b log softmax(logits_s)[y_b]
// into `grads` (body + the tape's head) and returns the (positive) scaled
// log-likelihood estimate.
inline double likelihood_value_and_grads(const BayesianNetwork& net, const ForwardTape& tape,
                                         const std::vector<std::uint8_t>& y, std::size_t head_id,
                                         double scale, GradientSet& grads) {
    const std::size_t n_samples = tape.samples.size();
    const std::size_t n_body = net.body.size();
    const Matrix& x = *tape.x;
    const double coef = scale / double(n_samples);

    double loglik = 0.0;
    ParamGrads& head_grads = grads.heads.at(head_id);
    const MeanFieldLayer& head = net.head(head_id);

    // Shared-input first layer: dm/dv are accumulated across samples and hit
    // the parameter matmuls once.
    Matrix dm0_sum, dv0_sum;
    if (n_body > 0) {
        dm0_sum = Matrix(x.rows(), net.body[0].out_dim(), 0.0);
        dv0_sum = Matrix(x.rows(), net.body[0].out_dim(), 0.0);
    }

    for (const SampleTape& st : tape.samples) {
        const Matrix lp = log_softmax_rows(st.logits());
        Matrix dA(lp.rows(), lp.cols());
        for (std::size_t r = 0; r < lp.rows(); ++r) {
            loglik += coef * lp(r, y[r]);
            for (std::size_t c = 0; c < lp.cols(); ++c) {
                const double softmax = std::exp(lp(r, c));
                dA(r, c) = -coef * ((c == y[r] ? 1.0 : 0.0) - softmax);
            }
        }

        const Matrix& head_in = n_body > 0 ? st.h.back() : x;
        Matrix head_in_sq_local;
        if (n_body > 0) head_in_sq_local = square_elements(head_in);
        const Matrix& head_in_sq = n_body > 0 ? head_in_sq_local : tape.x_sq;
        Matrix dx = detail::layer_backward(head_in, head_in_sq, dA, st.layers.back(), head,
                                           tape.head_var, head_grads, n_body > 0);

        for (std::size_t l = n_body; l-- > 0;) {
            // Through ReLU: zero where the pre-activation was negative.
            Matrix dAl = std::move(dx);
            const Matrix& a = st.layers[l].a;
            for (std::size_t i = 0; i < dAl.size(); ++i)
                if (a.data()[i] <= 0.0) dAl.data()[i] = 0.0;

            if (l == 0) {
                const LayerTape& lt = st.layers[0];
                for (std::size_t i = 0; i < dAl.size(); ++i) {
                    dm0_sum.data()[i] += dAl.data()[i];
                    dv0_sum.data()[i] +=
                        dAl.data()[i] * lt.eps.data()[i] / (2.0 * lt.sqrt_v.data()[i]);
                }
                break;
            }
            const Matrix& in = st.h[l - 1];
            dx = detail::layer_backward(in, square_elements(in), dAl, st.layers[l], net.body[l],
                                        tape.body_var[l], grads.body[l], true);
        }
    }

    if (n_body > 0) {
        ParamGrads& g0 = grads.body[0];
        add_at_b(g0.W_mu, x, dm0_sum);
        Matrix dWvar(net.body[0].in_dim(), net.body[0].out_dim());
        as_eigen(dWvar).setZero();
        add_at_b(dWvar, tape.x_sq, dv0_sum);
        for (std::size_t i = 0; i < dWvar.size(); ++i)
            g0.W_rho.data()[i] += dWvar.data()[i] * tape.body_var[0].W_var.data()[i];
        for (std::size_t r = 0; r < dm0_sum.rows(); ++r)
            for (std::size_t c = 0; c < dm0_sum.cols(); ++c) {
                g0.b_mu(0, c) += dm0_sum(r, c);
                g0.b_rho(0, c) += dv0_sum(r, c) * tape.body_var[0].b_var.data()[c];
            }
    }
    return loglik;
}

// Analytic KL of the in-scope parameters to their priors, plus gradients.
// Body layers anchor to the snapshot; each head anchors to its stored
// posterior when present, else to the standard normal initial prior.
inline void add_kl_value_and_grads(const BayesianNetwork& net, const PosteriorSnapshot& prior,
                                   const std::vector<std::size_t>& head_ids, GradientSet& grads,
                                   ElboBreakdown& out) {
    for (std::size_t l = 0; l < net.body.size(); ++l) {
        const LayerVarCache var = LayerVarCache::of(net.body[l]);
        const double kl = detail::kl_layer(net.body[l], var, prior.body[l]);
        detail::add_kl_grads(net.body[l], var, prior.body[l], grads.body[l]);
        out.kl_per_layer.push_back(kl);
        out.kl_total += kl;
    }
    for (std::size_t h : head_ids) {
        const MeanFieldLayer& head = net.head(h);
        const LayerVarCache var = LayerVarCache::of(head);
        const LayerMoments p = prior.head_prior(h, head.in_dim(), head.out_dim());
        const double kl = detail::kl_layer(head, var, p);
        detail::add_kl_grads(head, var, p, grads.heads.at(h));
        out.kl_per_layer.push_back(kl);
        out.kl_total += kl;
    }
}

struct ElboResult {
    ElboBreakdown breakdown;
    GradientSet grads;
};

// The per-task variational objective on one minibatch: the likelihood term
// is scaled by N_t / batch_size so the KL is applied once per task
// objective, not once per batch. Gradients are of -elbo.
inline ElboResult minibatch_elbo(const BayesianNetwork& net, const PosteriorSnapshot& prior,
                                 const Matrix& batch_x, const std::vector<std::uint8_t>& batch_y,
                                 std::size_t head_id, std::size_t n_task_train,
                                 std::size_t n_samples, const NoiseFn& noise) {
    if (batch_x.rows() == 0) throw std::invalid_argument("minibatch_elbo: empty batch");
    if (batch_x.rows() != batch_y.size())
        throw std::invalid_argument("minibatch_elbo: batch size mismatch");

    ElboResult res;
    res.grads = GradientSet::zeros_for(net, {head_id});
    const double scale = double(n_task_train) / double(batch_x.rows());

    ForwardTape tape = forward_samples(net, batch_x, head_id, n_samples, noise);
    res.breakdown.expected_log_lik =
        likelihood_value_and_grads(net, tape, batch_y, head_id, scale, res.grads);
    add_kl_value_and_grads(net, prior, {head_id}, res.grads, res.breakdown);
    res.breakdown.elbo = res.breakdown.expected_log_lik - res.breakdown.kl_total;
    return res;
}

inline ElboResult minibatch_elbo(const BayesianNetwork& net, const PosteriorSnapshot& prior,
                                 const Matrix& batch_x, const std::vector<std::uint8_t>& batch_y,
                                 std::size_t head_id, std::size_t n_task_train,
                                 std::size_t n_samples, SeededRng& rng) {
    NoiseFn noise = rng_noise(rng);
    return minibatch_elbo(net, prior, batch_x, batch_y, head_id, n_task_train, n_samples, noise);
}

}  // namespace vcl

#endif  // VCL_OBJECTIVE_HPP
