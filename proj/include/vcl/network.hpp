#ifndef VCL_NETWORK_HPP
#define VCL_NETWORK_HPP

#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "vcl/matrix.hpp"
#include "vcl/rng.hpp"

namespace vcl {

// One affine layer under a Gaussian mean-field posterior. Every weight and
// bias carries a mean and a log-variance rho, so sigma^2 = exp(rho) stays
// positive without clipping.
struct MeanFieldLayer {
    Matrix W_mu, W_rho;  // in x out
    Matrix b_mu, b_rho;  // 1 x out

    MeanFieldLayer() = default;
    MeanFieldLayer(std::size_t in, std::size_t out)
        : W_mu(in, out), W_rho(in, out), b_mu(1, out), b_rho(1, out) {}

    std::size_t in_dim() const { return W_mu.rows(); }
    std::size_t out_dim() const { return W_mu.cols(); }

    // mu = 0, sigma^2 = 1 everywhere.
    static MeanFieldLayer standard_normal(std::size_t in, std::size_t out) {
        return MeanFieldLayer(in, out);
    }
};

// Frozen first/second moments of one layer's posterior.
struct LayerMoments {
    Matrix W_mu, W_var;
    Matrix b_mu, b_var;

    static LayerMoments from_layer(const MeanFieldLayer& l) {
        LayerMoments m{l.W_mu, l.W_rho, l.b_mu, l.b_rho};
        for (std::size_t i = 0; i < m.W_var.size(); ++i)
            m.W_var.data()[i] = std::exp(m.W_var.data()[i]);
        for (std::size_t i = 0; i < m.b_var.size(); ++i)
            m.b_var.data()[i] = std::exp(m.b_var.data()[i]);
        return m;
    }

    static LayerMoments standard_normal(std::size_t in, std::size_t out) {
        return LayerMoments{Matrix(in, out, 0.0), Matrix(in, out, 1.0), Matrix(1, out, 0.0),
                            Matrix(1, out, 1.0)};
    }
};

// Shared ReLU body plus one affine head per task family. Heads are created
// lazily as tasks arrive; body weights are shared by all heads.
struct BayesianNetwork {
    std::vector<MeanFieldLayer> body;
    std::vector<MeanFieldLayer> heads;
    std::size_t input_dim = 0;
    std::vector<std::size_t> body_widths;

    BayesianNetwork() = default;
    BayesianNetwork(std::size_t input, const std::vector<std::size_t>& widths)
        : input_dim(input), body_widths(widths) {
        std::size_t in = input;
        for (std::size_t w : widths) {
            body.push_back(MeanFieldLayer(in, w));
            in = w;
        }
    }

    std::size_t body_out_dim() const {
        return body_widths.empty() ? input_dim : body_widths.back();
    }

    // Creates heads up to head_id (inclusive). New heads start at the
    // standard normal prior; the trainer re-initialises before training.
    void ensure_head(std::size_t head_id, std::size_t n_classes) {
        while (heads.size() <= head_id)
            heads.push_back(MeanFieldLayer::standard_normal(body_out_dim(), n_classes));
    }

    const MeanFieldLayer& head(std::size_t head_id) const {
        if (head_id >= heads.size())
            throw std::invalid_argument("unknown head_id " + std::to_string(head_id));
        return heads[head_id];
    }
};

// Immutable copy of all variational parameters at a task boundary. Serves
// both as q_{t-1} (the KL anchor for the next task) and, via p0(), as the
// standard normal initial prior.
struct PosteriorSnapshot {
    std::string provenance;  // "p0" or "after-task-<t>"
    std::vector<LayerMoments> body;
    std::vector<LayerMoments> heads;  // indexed by head_id; heads created later are absent

    static PosteriorSnapshot from_network(const BayesianNetwork& net, std::string tag) {
        PosteriorSnapshot s;
        s.provenance = std::move(tag);
        for (const auto& l : net.body) s.body.push_back(LayerMoments::from_layer(l));
        for (const auto& h : net.heads) s.heads.push_back(LayerMoments::from_layer(h));
        return s;
    }

    static PosteriorSnapshot p0(const BayesianNetwork& net) {
        PosteriorSnapshot s;
        s.provenance = "p0";
        for (const auto& l : net.body)
            s.body.push_back(LayerMoments::standard_normal(l.in_dim(), l.out_dim()));
        return s;
    }

    // KL anchor for a head: its stored posterior if it has been trained
    // before, otherwise the standard normal initial prior.
    LayerMoments head_prior(std::size_t head_id, std::size_t in, std::size_t out) const {
        if (head_id < heads.size()) return heads[head_id];
        return LayerMoments::standard_normal(in, out);
    }
};

// Noise source for the reparameterised forward pass. The default draws
// fresh standard normals; tests and the finite-difference harness replay
// recorded draws instead.
using NoiseFn = std::function<Matrix(std::size_t, std::size_t)>;

inline NoiseFn rng_noise(SeededRng& rng) {
    return [&rng](std::size_t r, std::size_t c) { return sample_standard_normal(rng, r, c); };
}

inline NoiseFn replay_noise(const std::vector<Matrix>& recorded) {
    auto next = std::make_shared<std::size_t>(0);
    return [&recorded, next](std::size_t r, std::size_t c) {
        if (*next >= recorded.size())
            throw std::logic_error("replay_noise: exhausted recorded draws");
        const Matrix& m = recorded[(*next)++];
        if (m.rows() != r || m.cols() != c)
            throw std::logic_error("replay_noise: shape mismatch");
        return m;
    };
}

// Pre-activation moments of one layer under the local reparameterisation:
// m = x W_mu + b_mu, v = (x.x) exp(W_rho) + exp(b_rho). W_var/b_var are the
// precomputed exponentials.
inline void preact_moments(const Matrix& x, const Matrix& x_sq, const Matrix& W_mu,
                           const Matrix& W_var, const Matrix& b_mu, const Matrix& b_var,
                           Matrix& m, Matrix& v) {
    m = matmul(x, W_mu);
    v = matmul(x_sq, W_var);
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) {
            m(r, c) += b_mu(0, c);
            v(r, c) += b_var(0, c);
        }
}

inline Matrix square_elements(const Matrix& x) {
    Matrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] * x.data()[i];
    return out;
}

// Per-layer record of one stochastic pass, kept for the backward pass.
struct LayerTape {
    Matrix eps;     // noise draw
    Matrix sqrt_v;  // sqrt of pre-activation variance
    Matrix a;       // pre-activation sample m + sqrt_v . eps
};

struct SampleTape {
    std::vector<LayerTape> layers;  // body layers then the head
    std::vector<Matrix> h;          // ReLU outputs feeding body layer l+1 / the head
    const Matrix& logits() const { return layers.back().a; }
};

// exp(rho) caches, computed once per minibatch and shared by forward,
// backward and the KL term.
struct LayerVarCache {
    Matrix W_var, b_var;
    static LayerVarCache of(const MeanFieldLayer& l) {
        LayerVarCache c{l.W_rho, l.b_rho};
        for (std::size_t i = 0; i < c.W_var.size(); ++i)
            c.W_var.data()[i] = std::exp(c.W_var.data()[i]);
        for (std::size_t i = 0; i < c.b_var.size(); ++i)
            c.b_var.data()[i] = std::exp(c.b_var.data()[i]);
        return c;
    }
};

struct ForwardTape {
    const Matrix* x = nullptr;  // borrowed minibatch input
    Matrix x_sq;
    std::vector<SampleTape> samples;
    std::vector<LayerVarCache> body_var;
    LayerVarCache head_var;
};

// One local-reparameterised pass through a single layer (exposed mainly for
// the layer-level moment tests).
inline LayerTape local_reparam_forward(const MeanFieldLayer& layer, const Matrix& x,
                                       const NoiseFn& noise) {
    if (x.cols() != layer.in_dim())
        throw std::invalid_argument("local_reparam_forward: input cols " +
                                    std::to_string(x.cols()) + " != in_dim " +
                                    std::to_string(layer.in_dim()));
    const LayerVarCache cache = LayerVarCache::of(layer);
    Matrix m, v;
    preact_moments(x, square_elements(x), layer.W_mu, cache.W_var, layer.b_mu, cache.b_var, m, v);
    LayerTape tape;
    tape.eps = noise(m.rows(), m.cols());
    tape.sqrt_v = v;
    for (std::size_t i = 0; i < tape.sqrt_v.size(); ++i)
        tape.sqrt_v.data()[i] = std::sqrt(tape.sqrt_v.data()[i]);
    tape.a = m;
    for (std::size_t i = 0; i < tape.a.size(); ++i)
        tape.a.data()[i] += tape.sqrt_v.data()[i] * tape.eps.data()[i];
    return tape;
}

// n_samples independent stochastic passes through body + selected head.
// The first body layer's pre-activation moments depend only on the
// minibatch, so they are computed once and shared across samples; later
// layers see sample-dependent inputs.
inline ForwardTape forward_samples(const BayesianNetwork& net, const Matrix& x,
                                   std::size_t head_id, std::size_t n_samples,
                                   const NoiseFn& noise) {
    if (head_id >= net.heads.size())
        throw std::invalid_argument("forward_samples: unknown head_id " + std::to_string(head_id));
    if (n_samples < 1) throw std::invalid_argument("forward_samples: n_samples must be >= 1");
    if (x.cols() != net.input_dim)
        throw std::invalid_argument("forward_samples: input cols " + std::to_string(x.cols()) +
                                    " != input_dim " + std::to_string(net.input_dim));

    ForwardTape tape;
    tape.x = &x;
    tape.x_sq = square_elements(x);
    for (const auto& l : net.body) tape.body_var.push_back(LayerVarCache::of(l));
    tape.head_var = LayerVarCache::of(net.head(head_id));
    tape.samples.resize(n_samples);

    // Shared first-layer moments.
    Matrix m0, v0;
    if (!net.body.empty()) {
        preact_moments(x, tape.x_sq, net.body[0].W_mu, tape.body_var[0].W_var, net.body[0].b_mu,
                       tape.body_var[0].b_var, m0, v0);
        for (std::size_t i = 0; i < v0.size(); ++i) v0.data()[i] = std::sqrt(v0.data()[i]);
    }

    const MeanFieldLayer& head = net.head(head_id);
    for (std::size_t s = 0; s < n_samples; ++s) {
        SampleTape& st = tape.samples[s];
        const Matrix* cur = &x;
        for (std::size_t l = 0; l < net.body.size(); ++l) {
            LayerTape lt;
            if (l == 0) {
                lt.sqrt_v = v0;
                lt.eps = noise(m0.rows(), m0.cols());
                lt.a = m0;
            } else {
                Matrix m, v;
                preact_moments(*cur, square_elements(*cur), net.body[l].W_mu,
                               tape.body_var[l].W_var, net.body[l].b_mu, tape.body_var[l].b_var,
                               m, v);
                lt.sqrt_v = std::move(v);
                for (std::size_t i = 0; i < lt.sqrt_v.size(); ++i)
                    lt.sqrt_v.data()[i] = std::sqrt(lt.sqrt_v.data()[i]);
                lt.eps = noise(m.rows(), m.cols());
                lt.a = std::move(m);
            }
            for (std::size_t i = 0; i < lt.a.size(); ++i)
                lt.a.data()[i] += lt.sqrt_v.data()[i] * lt.eps.data()[i];
            Matrix hmat = lt.a;
            for (std::size_t i = 0; i < hmat.size(); ++i)
                if (hmat.data()[i] < 0.0) hmat.data()[i] = 0.0;
            st.layers.push_back(std::move(lt));
            st.h.push_back(std::move(hmat));
            cur = &st.h.back();
        }
        // Head: affine, no activation.
        {
            Matrix m, v;
            preact_moments(*cur, square_elements(*cur), head.W_mu, tape.head_var.W_var, head.b_mu,
                           tape.head_var.b_var, m, v);
            LayerTape lt;
            lt.sqrt_v = std::move(v);
            for (std::size_t i = 0; i < lt.sqrt_v.size(); ++i)
                lt.sqrt_v.data()[i] = std::sqrt(lt.sqrt_v.data()[i]);
            lt.eps = noise(m.rows(), m.cols());
            lt.a = std::move(m);
            for (std::size_t i = 0; i < lt.a.size(); ++i)
                lt.a.data()[i] += lt.sqrt_v.data()[i] * lt.eps.data()[i];
            st.layers.push_back(std::move(lt));
        }
    }
    return tape;
}

// Monte-Carlo predictive distribution: mean over samples of softmax(logits),
// returned as log probabilities. Rows are valid distributions. Samples are
// streamed one at a time; no tape is retained.
inline Matrix predictive_log_probs(const BayesianNetwork& net, const Matrix& x,
                                   std::size_t head_id, SeededRng& rng,
                                   std::size_t n_eval_samples) {
    if (n_eval_samples < 1)
        throw std::invalid_argument("predictive_log_probs: n_eval_samples must be >= 1");
    if (x.cols() != net.input_dim)
        throw std::invalid_argument("predictive_log_probs: input cols mismatch");
    const MeanFieldLayer& head = net.head(head_id);

    std::vector<LayerVarCache> body_var;
    for (const auto& l : net.body) body_var.push_back(LayerVarCache::of(l));
    const LayerVarCache head_var = LayerVarCache::of(head);
    const Matrix x_sq = square_elements(x);

    Matrix m0, sqrt_v0;
    if (!net.body.empty()) {
        preact_moments(x, x_sq, net.body[0].W_mu, body_var[0].W_var, net.body[0].b_mu,
                       body_var[0].b_var, m0, sqrt_v0);
        for (std::size_t i = 0; i < sqrt_v0.size(); ++i)
            sqrt_v0.data()[i] = std::sqrt(sqrt_v0.data()[i]);
    }

    Matrix probs(x.rows(), head.out_dim(), 0.0);
    for (std::size_t s = 0; s < n_eval_samples; ++s) {
        Matrix h;
        const Matrix* cur = &x;
        const Matrix* cur_sq = &x_sq;
        Matrix h_sq;
        for (std::size_t l = 0; l < net.body.size(); ++l) {
            Matrix a;
            if (l == 0) {
                a = m0;
                for (std::size_t i = 0; i < a.size(); ++i)
                    a.data()[i] += sqrt_v0.data()[i] * rng.next_normal();
            } else {
                Matrix m, v;
                preact_moments(*cur, *cur_sq, net.body[l].W_mu, body_var[l].W_var,
                               net.body[l].b_mu, body_var[l].b_var, m, v);
                a = std::move(m);
                for (std::size_t i = 0; i < a.size(); ++i)
                    a.data()[i] += std::sqrt(v.data()[i]) * rng.next_normal();
            }
            for (std::size_t i = 0; i < a.size(); ++i)
                if (a.data()[i] < 0.0) a.data()[i] = 0.0;
            h = std::move(a);
            h_sq = square_elements(h);
            cur = &h;
            cur_sq = &h_sq;
        }
        Matrix m, v;
        preact_moments(*cur, *cur_sq, head.W_mu, head_var.W_var, head.b_mu, head_var.b_var, m, v);
        for (std::size_t i = 0; i < m.size(); ++i)
            m.data()[i] += std::sqrt(v.data()[i]) * rng.next_normal();
        Matrix lp = log_softmax_rows(m);
        for (std::size_t i = 0; i < probs.size(); ++i)
            probs.data()[i] += std::exp(lp.data()[i]) / double(n_eval_samples);
    }
    Matrix out(probs.rows(), probs.cols());
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = std::log(probs.data()[i]);
    return out;
}

// Fraction of rows whose argmax predictive probability matches the target.
inline double accuracy(const BayesianNetwork& net, const Matrix& x,
                       const std::vector<std::uint8_t>& y, std::size_t head_id, SeededRng& rng,
                       std::size_t n_eval_samples, std::size_t eval_chunk = 2048) {
    std::size_t correct = 0;
    for (std::size_t start = 0; start < x.rows(); start += eval_chunk) {
        const std::size_t n = std::min(eval_chunk, x.rows() - start);
        Matrix chunk(n, x.cols());
        std::copy(x.data() + start * x.cols(), x.data() + (start + n) * x.cols(), chunk.data());
        Matrix lp = predictive_log_probs(net, chunk, head_id, rng, n_eval_samples);
        for (std::size_t r = 0; r < n; ++r) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < lp.cols(); ++c)
                if (lp(r, c) > lp(r, best)) best = c;
            if (best == y[start + r]) ++correct;
        }
    }
    return x.rows() == 0 ? 0.0 : double(correct) / double(x.rows());
}

}  // namespace vcl

#endif  // VCL_NETWORK_HPP
