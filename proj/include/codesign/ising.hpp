#pragma once

// Fully-connected binary Ising model over n sites.
//
// theta is a symmetric n x n matrix: the diagonal holds per-site activities,
// off-diagonal entries hold pairwise couplings. Spins take values +1 / -1.
// Exhaustive-enumeration helpers (partition function, probabilities,
// entropy, exact sampling) are oracles and are limited to small n.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace codesign {

inline constexpr std::size_t kMaxEnumerationSites = 20;

using SpinState = std::vector<int>;

class IsingModel {
public:
    /// All-zero model over n sites (n >= 1).
    explicit IsingModel(std::size_t n);
    /// Full matrix, row-major; must be exactly symmetric.
    IsingModel(std::size_t n, std::vector<double> theta);

    static IsingModel from_upper(std::size_t n, std::span<const double> upper);

    std::size_t size() const noexcept { return n_; }
    double theta(std::size_t j, std::size_t k) const { return theta_[j * n_ + k]; }
    double activity(std::size_t j) const { return theta(j, j); }
    /// Writes both (j,k) and (k,j).
    void set(std::size_t j, std::size_t k, double value);
    const std::vector<double>& matrix() const noexcept { return theta_; }

    /// n(n+1)/2 free values in row-major upper-triangle order (diagonal included).
    std::vector<double> upper() const;

    const std::vector<std::string>& names() const noexcept { return names_; }
    /// Names are optional; when set, they must be unique and n in number.
    void set_names(std::vector<std::string> names);
    std::optional<std::size_t> index_of(const std::string& name) const;

private:
    std::size_t n_;
    std::vector<double> theta_;
    std::vector<std::string> names_;
};

/// Index of entry (j,k), j <= k, in the upper-triangle parameterization.
std::size_t upper_index(std::size_t n, std::size_t j, std::size_t k);

/// H(x) = -sum_j theta_jj x_j - sum_{j<k} theta_jk x_j x_k. Accepts relaxed
/// states with entries in [-1, 1].
double hamiltonian(const IsingModel& model, std::span<const double> state);
double hamiltonian(const IsingModel& model, const SpinState& state);

/// Spin state encoded by the bits of `index`: bit j set means x_j = +1.
SpinState state_from_index(std::size_t n, std::uint64_t index);
std::uint64_t index_from_state(const SpinState& state);

/// Energies of all 2^n states, indexed as in state_from_index.
std::vector<double> enumerate_energies(const IsingModel& model);
std::vector<double> enumerate_probabilities(const IsingModel& model);

double log_partition_function(const IsingModel& model);
double partition_function(const IsingModel& model);
double probability(const IsingModel& model, const SpinState& state);
/// Shannon entropy in nats, computed directly from the enumerated distribution.
double entropy(const IsingModel& model);
/// E[H] under the model's own Boltzmann distribution.
double expected_energy(const IsingModel& model);

/// Known assignment: entry j is +1, -1, or nullopt for unknown sites.
using PartialAssignment = std::vector<std::optional<int>>;

struct ConditionalModel {
    IsingModel model;
    /// Original site index of each remaining site, in order.
    std::vector<std::size_t> sites;
};

/// Ising model over the unknown sites given the known ones:
/// activity'_j = theta_jj + sum_{l known} theta_jl x_l, couplings unchanged.
ConditionalModel conditional_model(const IsingModel& model, const PartialAssignment& known);

/// Inverse-CDF sampler over the enumerated Boltzmann distribution.
class ExactSampler {
public:
    explicit ExactSampler(const IsingModel& model);
    SpinState operator()(std::mt19937_64& rng) const;
    std::uint64_t sample_index(std::mt19937_64& rng) const;
    std::size_t size() const noexcept { return n_; }

private:
    std::size_t n_;
    std::vector<double> cdf_;
};

SpinState exact_sample(const IsingModel& model, std::mt19937_64& rng);

struct Clique {
    std::size_t j, k, l;
    double score;
};

struct CliqueReport {
    double tau = 0.0;
    std::vector<Clique> triples;
};

/// Every triple j<k<l whose three couplings all exceed tau, ranked by the
/// coupling sum (descending), ties broken lexicographically.
CliqueReport find_three_cliques(const IsingModel& model, double tau);

/// Per-site frequency of selection (+1 spin, or mask entry > 0.5).
std::vector<double> estimate_marginals(const std::vector<SpinState>& samples);
std::vector<double> estimate_marginals(const std::vector<std::vector<double>>& masks);

/// CSV: header row of site names, then n rows of n values.
IsingModel read_theta_csv(std::istream& in, const std::string& source = "<stream>");
IsingModel read_theta_csv(const std::string& path);
void write_theta_csv(std::ostream& out, const IsingModel& model);
void write_theta_csv(const std::string& path, const IsingModel& model);

void write_cliques_csv(std::ostream& out, const CliqueReport& report, const std::vector<std::string>& names);

}  // namespace codesign
