#include "codesign/gibbs.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace codesign {

void GibbsConfig::validate(std::size_t n) const {
    if (layers == 0) throw std::invalid_argument("Gibbs sampler needs at least one layer");
    if (!(s1 > 0) || !(s2 > 0)) throw std::invalid_argument("Gibbs slopes must be positive");
    if (orderings.empty()) return;
    if (orderings.size() != layers) throw std::invalid_argument("expected one ordering per Gibbs layer");
    for (const auto& o : orderings) {
        if (o.size() != n) throw std::invalid_argument("ordering length does not match site count");
        std::vector<bool> seen(n, false);
        for (std::size_t j : o) {
            if (j >= n || seen[j]) throw std::invalid_argument("ordering is not a permutation");
            seen[j] = true;
        }
    }
}

Ordering GibbsConfig::ordering(std::size_t layer, std::size_t n) const {
    if (!orderings.empty()) return orderings.at(layer);
    Ordering identity(n);
    std::iota(identity.begin(), identity.end(), std::size_t{0});
    return identity;
}

GibbsNoise::GibbsNoise(std::size_t layers, std::size_t batch, std::size_t sites, std::vector<double> u)
    : layers_(layers), batch_(batch), sites_(sites), u_(std::move(u)) {
    if (u_.size() != (layers + 1) * batch * sites) throw std::invalid_argument("GibbsNoise: size mismatch");
    for (double v : u_) {
        if (!(v >= 0.0 && v < 1.0)) throw std::invalid_argument("GibbsNoise: entries must lie in [0, 1)");
    }
}

std::span<const double> GibbsNoise::block(std::size_t layer) const {
    return std::span<const double>(u_).subspan(layer * batch_ * sites_, batch_ * sites_);
}

std::vector<double> GibbsNoise::row(std::size_t layer, std::size_t b) const {
    auto blk = block(layer).subspan(b * sites_, sites_);
    return {blk.begin(), blk.end()};
}

GibbsNoise fresh_noise(std::mt19937_64& rng, std::size_t sites, std::size_t layers, std::size_t batch) {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::vector<double> u((layers + 1) * batch * sites);
    for (double& v : u) v = uni(rng);
    return GibbsNoise(layers, batch, sites, std::move(u));
}

std::vector<Ordering> fresh_orderings(std::mt19937_64& rng, std::size_t sites, std::size_t layers) {
    std::vector<Ordering> out(layers, Ordering(sites));
    for (auto& o : out) {
        std::iota(o.begin(), o.end(), std::size_t{0});
        std::shuffle(o.begin(), o.end(), rng);
    }
    return out;
}

SpinState init_state(std::span<const double> u0) {
    SpinState x(u0.size());
    // sgn(0.5 - u) with sgn(0) = -1.
    for (std::size_t j = 0; j < u0.size(); ++j) x[j] = 0.5 - u0[j] > 0 ? 1 : -1;
    return x;
}

double conditional_plus_probability(const IsingModel& model, const SpinState& state, std::size_t j) {
    double field = model.theta(j, j);
    for (std::size_t k = 0; k < model.size(); ++k) {
        if (k != j) field += model.theta(j, k) * state[k];
    }
    return 1.0 / (1.0 + std::exp(-2.0 * field));
}

SpinState gibbs_step_exact(const IsingModel& model, const SpinState& state, const Ordering& ordering,
                           std::span<const double> u) {
    if (state.size() != model.size() || u.size() != model.size()) {
        throw std::invalid_argument("gibbs_step_exact: size mismatch");
    }
    SpinState x = state;
    for (std::size_t j : ordering) {
        const double p = conditional_plus_probability(model, x, j);
        x[j] = p - u[j] > 0 ? 1 : -1;
    }
    return x;
}

SpinState gibbs_step_exact(const IsingModel& model, const SpinState& state, const Ordering& ordering,
                           std::mt19937_64& rng) {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::vector<double> u(model.size());
    for (double& v : u) v = uni(rng);
    return gibbs_step_exact(model, state, ordering, std::span<const double>(u));
}

SpinState exact_chain(const IsingModel& model, const GibbsConfig& config, const GibbsNoise& noise, std::size_t b) {
    const std::size_t n = model.size();
    config.validate(n);
    if (noise.sites() != n || noise.layers() != config.layers) {
        throw std::invalid_argument("exact_chain: noise shape does not match model/config");
    }
    SpinState x = init_state(noise.row(0, b));
    for (std::size_t i = 1; i <= config.layers; ++i) {
        const auto u = noise.row(i, b);
        x = gibbs_step_exact(model, x, config.ordering(i - 1, n), std::span<const double>(u));
    }
    return x;
}

ad::Tensor theta_matrix(const ad::Tensor& upper, std::size_t n) {
    if (upper.numel() != n * (n + 1) / 2) {
        throw ad::ShapeError("theta_matrix", "expected " + std::to_string(n * (n + 1) / 2) + " free values");
    }
    std::vector<std::size_t> idx(n * n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = 0; k < n; ++k) idx[j * n + k] = upper_index(n, j, k);
    return ad::take(upper, std::move(idx), ad::Shape{n, n});
}

ad::Tensor theta_constant(const IsingModel& model) {
    return ad::Tensor::constant(ad::Shape{model.size(), model.size()}, model.matrix());
}

namespace {

void check_theta(const ad::Tensor& theta, const char* op) {
    if (theta.rank() != 2 || theta.dim(0) != theta.dim(1)) {
        throw ad::ShapeError(op, "theta must be square, got " + ad::to_string(theta.shape()));
    }
}

}  // namespace

ad::Tensor relaxed_layer(const ad::Tensor& theta, const ad::Tensor& state, const ad::Tensor& u, double s1,
                         const Ordering& ordering) {
    check_theta(theta, "relaxed_layer");
    const std::size_t n = theta.dim(0);
    if (state.rank() != 2 || state.dim(1) != n || u.shape() != state.shape()) {
        throw ad::ShapeError("relaxed_layer", "state/noise must be (B, " + std::to_string(n) + "), got " +
                                                  ad::to_string(state.shape()) + " and " + ad::to_string(u.shape()));
    }
    std::vector<ad::Tensor> cols(n);
    for (std::size_t k = 0; k < n; ++k) cols[k] = ad::slice(state, 1, k, k + 1);
    for (std::size_t j : ordering) {
        std::vector<std::size_t> off(n);
        for (std::size_t k = 0; k < n; ++k) off[k] = k == j ? ad::kZeroIndex : k * n + j;
        const ad::Tensor coupling = ad::take(theta, std::move(off), ad::Shape{n, 1});
        const ad::Tensor activity = ad::take(theta, {j * n + j}, ad::Shape{1});
        const ad::Tensor x = n == 1 ? cols[0] : ad::concat(cols, 1);
        const ad::Tensor field = ad::matmul(x, coupling) + activity;
        const ad::Tensor p = ad::sigmoid(2.0 * field);
        cols[j] = ad::tanh(s1 * (p - ad::slice(u, 1, j, j + 1)));
    }
    return n == 1 ? cols[0] : ad::concat(cols, 1);
}

MaskSample sample_mask(const ad::Tensor& theta, const GibbsConfig& config, const GibbsNoise& noise) {
    check_theta(theta, "sample_mask");
    const std::size_t n = theta.dim(0);
    config.validate(n);
    if (noise.sites() != n || noise.layers() != config.layers) {
        throw ad::ShapeError("sample_mask", "noise shape does not match theta/config");
    }
    const std::size_t batch = noise.batch();
    const ad::Shape shape{batch, n};
    std::vector<double> x0(batch * n);
    const auto u0 = noise.block(0);
    for (std::size_t i = 0; i < x0.size(); ++i) x0[i] = 0.5 - u0[i] > 0 ? 1.0 : -1.0;
    ad::Tensor x = ad::Tensor::constant(shape, std::move(x0));
    for (std::size_t i = 1; i <= config.layers; ++i) {
        const auto blk = noise.block(i);
        const ad::Tensor u = ad::Tensor::constant(shape, std::vector<double>(blk.begin(), blk.end()));
        x = relaxed_layer(theta, x, u, config.s1, config.ordering(i - 1, n));
    }
    return {ad::sigmoid(config.s2 * x), x};
}

ad::Tensor batch_hamiltonian(const ad::Tensor& theta, const ad::Tensor& states) {
    check_theta(theta, "batch_hamiltonian");
    const std::size_t n = theta.dim(0);
    if (states.rank() != 2 || states.dim(1) != n) {
        throw ad::ShapeError("batch_hamiltonian", "states must be (B, " + std::to_string(n) + ")");
    }
    std::vector<std::size_t> diag(n), off(n * n);
    for (std::size_t j = 0; j < n; ++j) {
        diag[j] = j * n + j;
        for (std::size_t k = 0; k < n; ++k) off[j * n + k] = j == k ? ad::kZeroIndex : j * n + k;
    }
    const ad::Tensor activity = ad::take(theta, std::move(diag), ad::Shape{n});
    const ad::Tensor coupling = ad::take(theta, std::move(off), ad::Shape{n, n});
    const ad::Tensor field_term = ad::sum_axis(states * activity, 1);
    const ad::Tensor pair_term = ad::sum_axis(ad::matmul(states, coupling) * states, 1);
    return -(field_term + 0.5 * pair_term);
}

std::vector<std::vector<double>> sample_masks(const IsingModel& model, const GibbsConfig& config,
                                              std::mt19937_64& rng, std::size_t count) {
    const std::size_t n = model.size();
    const auto noise = fresh_noise(rng, n, config.layers, count);
    const auto sample = sample_mask(theta_constant(model), config, noise);
    const auto v = sample.mask.values();
    std::vector<std::vector<double>> out(count);
    for (std::size_t b = 0; b < count; ++b) out[b].assign(v.begin() + static_cast<std::ptrdiff_t>(b * n),
                                                          v.begin() + static_cast<std::ptrdiff_t>((b + 1) * n));
    return out;
}

}  // namespace codesign
