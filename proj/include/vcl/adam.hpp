#ifndef VCL_ADAM_HPP
#define VCL_ADAM_HPP

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "vcl/objective.hpp"

namespace vcl {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam over all in-scope variational parameters. Moment accumulators are
// shape-congruent with a GradientSet; state is created fresh at each task
// boundary.
class AdamState {
public:
    AdamState(const BayesianNetwork& net, const std::vector<std::size_t>& head_ids,
              AdamConfig cfg = {})
        : cfg_(cfg),
          m_(GradientSet::zeros_for(net, head_ids)),
          v_(GradientSet::zeros_for(net, head_ids)) {}

    const AdamConfig& config() const { return cfg_; }
    std::size_t step_count() const { return t_; }

    // One bias-corrected Adam step on -ELBO. Throws on non-finite gradients,
    // naming the offending tensor and flat index.
    void step(BayesianNetwork& net, const GradientSet& grads) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (std::size_t l = 0; l < m_.body.size(); ++l)
            step_layer(net.body[l], grads.body[l], m_.body[l], v_.body[l], bc1, bc2,
                       "body" + std::to_string(l));
        for (auto& [id, mm] : m_.heads)
            step_layer(net.heads[id], grads.heads.at(id), mm, v_.heads.at(id), bc1, bc2,
                       "head" + std::to_string(id));
    }

private:
    void step_layer(MeanFieldLayer& layer, const ParamGrads& g, ParamGrads& m, ParamGrads& v,
                    double bc1, double bc2, const std::string& name) {
        step_tensor(layer.W_mu, g.W_mu, m.W_mu, v.W_mu, bc1, bc2, name + ".W_mu");
        step_tensor(layer.W_rho, g.W_rho, m.W_rho, v.W_rho, bc1, bc2, name + ".W_rho");
        step_tensor(layer.b_mu, g.b_mu, m.b_mu, v.b_mu, bc1, bc2, name + ".b_mu");
        step_tensor(layer.b_rho, g.b_rho, m.b_rho, v.b_rho, bc1, bc2, name + ".b_rho");
    }

    void step_tensor(Matrix& p, const Matrix& g, Matrix& m, Matrix& v, double bc1, double bc2,
                     const std::string& name) {
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = g.data()[i];
            if (!std::isfinite(gi))
                throw std::runtime_error("adam_step: non-finite gradient in " + name + "[" +
                                         std::to_string(i) + "]");
            m.data()[i] = cfg_.beta1 * m.data()[i] + (1.0 - cfg_.beta1) * gi;
            v.data()[i] = cfg_.beta2 * v.data()[i] + (1.0 - cfg_.beta2) * gi * gi;
            const double mhat = m.data()[i] / bc1;
            const double vhat = v.data()[i] / bc2;
            p.data()[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }

    AdamConfig cfg_;
    std::size_t t_ = 0;
    GradientSet m_, v_;
};

}  // namespace vcl

#endif  // VCL_ADAM_HPP
