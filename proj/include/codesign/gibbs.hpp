#pragma once

// Gibbs sampling of the Ising model: the sign-based exact sampler and the
// relaxed differentiable layers that turn uniform noise into near-binary
// sensor masks.

#include "codesign/autodiff.hpp"
#include "codesign/ising.hpp"

#include <cstddef>
#include <random>
#include <span>
#include <vector>

namespace codesign {

using Ordering = std::vector<std::size_t>;

struct GibbsConfig {
    std::size_t layers = 5;
    double s1 = 3.0;
    double s2 = 10.0;
    /// One site permutation per layer; empty means identity for every layer.
    std::vector<Ordering> orderings;

    /// Throws std::invalid_argument when the config is unusable for n sites.
    void validate(std::size_t n) const;
    Ordering ordering(std::size_t layer, std::size_t n) const;
};

/// Uniform draws U^(0..layers), each a batch x sites block in [0, 1).
class GibbsNoise {
public:
    GibbsNoise(std::size_t layers, std::size_t batch, std::size_t sites, std::vector<double> u);

    std::size_t layers() const noexcept { return layers_; }
    std::size_t batch() const noexcept { return batch_; }
    std::size_t sites() const noexcept { return sites_; }
    double at(std::size_t layer, std::size_t b, std::size_t j) const {
        return u_[(layer * batch_ + b) * sites_ + j];
    }
    /// Block for layer i (0 = initialization), batch x sites row-major.
    std::span<const double> block(std::size_t layer) const;
    /// Draws of one batch member for one layer.
    std::vector<double> row(std::size_t layer, std::size_t b) const;

private:
    std::size_t layers_, batch_, sites_;
    std::vector<double> u_;
};

GibbsNoise fresh_noise(std::mt19937_64& rng, std::size_t sites, std::size_t layers, std::size_t batch = 1);
std::vector<Ordering> fresh_orderings(std::mt19937_64& rng, std::size_t sites, std::size_t layers);

/// x_j = +1 if u_j < 0.5 else -1.
SpinState init_state(std::span<const double> u0);

/// P(x_j = +1 | rest) = sigmoid(2 (theta_jj + sum_{k != j} theta_jk x_k)).
double conditional_plus_probability(const IsingModel& model, const SpinState& state, std::size_t j);

/// One sequential sweep; uses the supplied uniforms (indexed by site).
SpinState gibbs_step_exact(const IsingModel& model, const SpinState& state, const Ordering& ordering,
                           std::span<const double> u);
SpinState gibbs_step_exact(const IsingModel& model, const SpinState& state, const Ordering& ordering,
                           std::mt19937_64& rng);

/// Sign-based nested sampler for batch member b of the noise.
SpinState exact_chain(const IsingModel& model, const GibbsConfig& config, const GibbsNoise& noise, std::size_t b = 0);

// --- differentiable path ---------------------------------------------------

/// Symmetric n x n tensor from the n(n+1)/2 upper-triangle free values.
ad::Tensor theta_matrix(const ad::Tensor& upper, std::size_t n);
ad::Tensor theta_constant(const IsingModel& model);

/// One relaxed Gibbs layer over a batch of states (B x n):
/// x_j <- tanh(s1 * (sigmoid(2 * field_j) - u_j)) in the given site order.
ad::Tensor relaxed_layer(const ad::Tensor& theta, const ad::Tensor& state, const ad::Tensor& u, double s1,
                         const Ordering& ordering);

struct MaskSample {
    ad::Tensor mask;         ///< sigmoid(s2 * X^(N)), B x n
    ad::Tensor final_state;  ///< X^(N), B x n
};

MaskSample sample_mask(const ad::Tensor& theta, const GibbsConfig& config, const GibbsNoise& noise);

/// Per-row Hamiltonian of (possibly relaxed) states, shape (B).
ad::Tensor batch_hamiltonian(const ad::Tensor& theta, const ad::Tensor& states);

/// Convenience: `count` masks drawn with fresh noise, as plain rows.
std::vector<std::vector<double>> sample_masks(const IsingModel& model, const GibbsConfig& config,
                                              std::mt19937_64& rng, std::size_t count);

}  // namespace codesign
