#include "codesign/ising.hpp"

#include "codesign/errors.hpp"
#include "csv.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

namespace codesign {

namespace {

void require_enumerable(const IsingModel& model) {
    if (model.size() > kMaxEnumerationSites) {
        throw std::invalid_argument("exhaustive enumeration limited to " + std::to_string(kMaxEnumerationSites) +
                                    " sites, model has " + std::to_string(model.size()));
    }
}

double log_sum_exp(const std::vector<double>& a) {
    const double m = *std::max_element(a.begin(), a.end());
    double s = 0.0;
    for (double v : a) s += std::exp(v - m);
    return m + std::log(s);
}

}  // namespace

IsingModel::IsingModel(std::size_t n) : n_(n), theta_(n * n, 0.0) {
    if (n == 0) throw std::invalid_argument("Ising model needs at least one site");
}

IsingModel::IsingModel(std::size_t n, std::vector<double> theta) : n_(n), theta_(std::move(theta)) {
    if (n == 0) throw std::invalid_argument("Ising model needs at least one site");
    if (theta_.size() != n * n) throw std::invalid_argument("theta must have n*n entries");
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t k = j + 1; k < n; ++k) {
            if (theta_[j * n + k] != theta_[k * n + j]) {
                throw std::invalid_argument("theta is not symmetric at (" + std::to_string(j) + ", " +
                                            std::to_string(k) + ")");
            }
        }
    }
}

IsingModel IsingModel::from_upper(std::size_t n, std::span<const double> upper) {
    if (upper.size() != n * (n + 1) / 2) throw std::invalid_argument("upper-triangle size mismatch");
    IsingModel m(n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = j; k < n; ++k) m.set(j, k, upper[upper_index(n, j, k)]);
    return m;
}

void IsingModel::set(std::size_t j, std::size_t k, double value) {
    if (j >= n_ || k >= n_) throw std::out_of_range("site index out of range");
    theta_[j * n_ + k] = value;
    theta_[k * n_ + j] = value;
}

std::vector<double> IsingModel::upper() const {
    std::vector<double> u;
    u.reserve(n_ * (n_ + 1) / 2);
    for (std::size_t j = 0; j < n_; ++j)
        for (std::size_t k = j; k < n_; ++k) u.push_back(theta(j, k));
    return u;
}

void IsingModel::set_names(std::vector<std::string> names) {
    if (!names.empty()) {
        if (names.size() != n_) throw std::invalid_argument("expected one name per site");
        std::set<std::string> uniq(names.begin(), names.end());
        if (uniq.size() != names.size()) throw std::invalid_argument("site names must be unique");
    }
    names_ = std::move(names);
}

std::optional<std::size_t> IsingModel::index_of(const std::string& name) const {
    auto it = std::find(names_.begin(), names_.end(), name);
    if (it == names_.end()) return std::nullopt;
    return static_cast<std::size_t>(it - names_.begin());
}

std::size_t upper_index(std::size_t n, std::size_t j, std::size_t k) {
    if (j > k) std::swap(j, k);
    // Rows before j contribute n + (n-1) + ... + (n-j+1) entries.
    return j * n - j * (j - 1) / 2 + (k - j);
}

double hamiltonian(const IsingModel& model, std::span<const double> state) {
    const std::size_t n = model.size();
    if (state.size() != n) {
        throw std::invalid_argument("hamiltonian: state has " + std::to_string(state.size()) + " entries, model has " +
                                    std::to_string(n) + " sites");
    }
    double h = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        h -= model.theta(j, j) * state[j];
        for (std::size_t k = j + 1; k < n; ++k) h -= model.theta(j, k) * state[j] * state[k];
    }
    return h;
}

double hamiltonian(const IsingModel& model, const SpinState& state) {
    std::vector<double> x(state.begin(), state.end());
    return hamiltonian(model, std::span<const double>(x));
}

SpinState state_from_index(std::size_t n, std::uint64_t index) {
    SpinState s(n);
    for (std::size_t j = 0; j < n; ++j) s[j] = (index >> j) & 1U ? 1 : -1;
    return s;
}

std::uint64_t index_from_state(const SpinState& state) {
    std::uint64_t idx = 0;
    for (std::size_t j = 0; j < state.size(); ++j) {
        if (state[j] == 1) idx |= std::uint64_t{1} << j;
    }
    return idx;
}

std::vector<double> enumerate_energies(const IsingModel& model) {
    require_enumerable(model);
    const std::size_t n = model.size();
    const std::uint64_t count = std::uint64_t{1} << n;
    std::vector<double> energies(count);
    std::vector<double> x(n);
    for (std::uint64_t s = 0; s < count; ++s) {
        for (std::size_t j = 0; j < n; ++j) x[j] = (s >> j) & 1U ? 1.0 : -1.0;
        energies[s] = hamiltonian(model, std::span<const double>(x));
    }
    return energies;
}

std::vector<double> enumerate_probabilities(const IsingModel& model) {
    auto e = enumerate_energies(model);
    for (double& v : e) v = -v;
    const double log_z = log_sum_exp(e);
    for (double& v : e) v = std::exp(v - log_z);
    return e;
}

double log_partition_function(const IsingModel& model) {
    auto e = enumerate_energies(model);
    for (double& v : e) v = -v;
    return log_sum_exp(e);
}

double partition_function(const IsingModel& model) { return std::exp(log_partition_function(model)); }

double probability(const IsingModel& model, const SpinState& state) {
    require_enumerable(model);
    for (int v : state) {
        if (v != 1 && v != -1) throw std::invalid_argument("spin entries must be +1 or -1");
    }
    return std::exp(-hamiltonian(model, state) - log_partition_function(model));
}

double entropy(const IsingModel& model) {
    const auto p = enumerate_probabilities(model);
    double s = 0.0;
    for (double v : p) {
        if (v > 0) s -= v * std::log(v);
    }
    return s;
}

double expected_energy(const IsingModel& model) {
    const auto e = enumerate_energies(model);
    const auto p = enumerate_probabilities(model);
    double acc = 0.0;
    for (std::size_t i = 0; i < e.size(); ++i) acc += p[i] * e[i];
    return acc;
}

ConditionalModel conditional_model(const IsingModel& model, const PartialAssignment& known) {
    const std::size_t n = model.size();
    if (known.size() != n) throw std::invalid_argument("conditional_model: assignment length mismatch");
    std::vector<std::size_t> free_sites;
    for (std::size_t j = 0; j < n; ++j) {
        if (!known[j]) {
            free_sites.push_back(j);
        } else if (*known[j] != 1 && *known[j] != -1) {
            throw std::invalid_argument("conditional_model: known values must be +1 or -1");
        }
    }
    if (free_sites.empty()) throw std::invalid_argument("conditional_model: no unknown sites remain");

    IsingModel cond(free_sites.size());
    for (std::size_t a = 0; a < free_sites.size(); ++a) {
        const std::size_t j = free_sites[a];
        double act = model.theta(j, j);
        for (std::size_t l = 0; l < n; ++l) {
            if (known[l]) act += model.theta(j, l) * *known[l];
        }
        cond.set(a, a, act);
        for (std::size_t b = a + 1; b < free_sites.size(); ++b) cond.set(a, b, model.theta(j, free_sites[b]));
    }
    if (!model.names().empty()) {
        std::vector<std::string> names;
        for (std::size_t j : free_sites) names.push_back(model.names()[j]);
        cond.set_names(std::move(names));
    }
    return {std::move(cond), std::move(free_sites)};
}

ExactSampler::ExactSampler(const IsingModel& model) : n_(model.size()) {
    cdf_ = enumerate_probabilities(model);
    double acc = 0.0;
    for (double& v : cdf_) {
        acc += v;
        v = acc;
    }
    cdf_.back() = 1.0;
}

std::uint64_t ExactSampler::sample_index(std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const double u = uni(rng);
    auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    if (it == cdf_.end()) --it;
    return static_cast<std::uint64_t>(it - cdf_.begin());
}

SpinState ExactSampler::operator()(std::mt19937_64& rng) const { return state_from_index(n_, sample_index(rng)); }

SpinState exact_sample(const IsingModel& model, std::mt19937_64& rng) { return ExactSampler(model)(rng); }

CliqueReport find_three_cliques(const IsingModel& model, double tau) {
    CliqueReport report;
    report.tau = tau;
    const std::size_t n = model.size();
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t k = j + 1; k < n; ++k) {
            if (!(model.theta(j, k) > tau)) continue;
            for (std::size_t l = k + 1; l < n; ++l) {
                if (model.theta(k, l) > tau && model.theta(j, l) > tau) {
                    report.triples.push_back({j, k, l, model.theta(j, k) + model.theta(k, l) + model.theta(j, l)});
                }
            }
        }
    }
    std::stable_sort(report.triples.begin(), report.triples.end(),
                     [](const Clique& a, const Clique& b) { return a.score > b.score; });
    return report;
}

std::vector<double> estimate_marginals(const std::vector<SpinState>& samples) {
    if (samples.empty()) throw std::invalid_argument("estimate_marginals: no samples");
    std::vector<double> freq(samples.front().size(), 0.0);
    for (const auto& s : samples) {
        if (s.size() != freq.size()) throw std::invalid_argument("estimate_marginals: ragged samples");
        for (std::size_t j = 0; j < s.size(); ++j) freq[j] += s[j] == 1 ? 1.0 : 0.0;
    }
    for (double& f : freq) f /= static_cast<double>(samples.size());
    return freq;
}

std::vector<double> estimate_marginals(const std::vector<std::vector<double>>& masks) {
    if (masks.empty()) throw std::invalid_argument("estimate_marginals: no samples");
    std::vector<double> freq(masks.front().size(), 0.0);
    for (const auto& m : masks) {
        if (m.size() != freq.size()) throw std::invalid_argument("estimate_marginals: ragged samples");
        for (std::size_t j = 0; j < m.size(); ++j) freq[j] += m[j] > 0.5 ? 1.0 : 0.0;
    }
    for (double& f : freq) f /= static_cast<double>(masks.size());
    return freq;
}

IsingModel read_theta_csv(std::istream& in, const std::string& source) {
    const auto rows = csv::read(in);
    if (rows.empty()) throw ParseError(source, 1, "empty file");
    const auto& header = rows.front().fields;
    const std::size_t n = header.size();
    if (rows.size() != n + 1) {
        throw ParseError(source, rows.back().line,
                         "expected " + std::to_string(n) + " data rows, found " + std::to_string(rows.size() - 1));
    }
    std::vector<double> theta(n * n);
    for (std::size_t r = 0; r < n; ++r) {
        const auto& row = rows[r + 1];
        if (row.fields.size() != n) {
            throw ParseError(source, row.line, "expected " + std::to_string(n) + " values");
        }
        for (std::size_t c = 0; c < n; ++c) theta[r * n + c] = csv::parse_double(row.fields[c], source, row.line);
    }
    // Rows are written symmetric; average tiny print asymmetries away.
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t k = j + 1; k < n; ++k) {
            const double a = theta[j * n + k], b = theta[k * n + j];
            if (std::abs(a - b) > 1e-9 * std::max(1.0, std::abs(a))) {
                throw ParseError(source, k + 2, "matrix is not symmetric at column " + header[j]);
            }
            theta[j * n + k] = theta[k * n + j] = a;
        }
    }
    IsingModel m(n, std::move(theta));
    try {
        m.set_names(header);
    } catch (const std::invalid_argument& e) {
        throw ParseError(source, 1, e.what());
    }
    return m;
}

IsingModel read_theta_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    return read_theta_csv(in, path);
}

void write_theta_csv(std::ostream& out, const IsingModel& model) {
    const std::size_t n = model.size();
    std::vector<std::string> names = model.names();
    if (names.empty()) {
        for (std::size_t j = 0; j < n; ++j) names.push_back("S" + std::to_string(j + 1));
    }
    csv::write_row(out, names);
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t k = 0; k < n; ++k) out << (k ? "," : "") << csv::format_double(model.theta(j, k));
        out << '\n';
    }
}

void write_theta_csv(const std::string& path, const IsingModel& model) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    write_theta_csv(out, model);
}

void write_cliques_csv(std::ostream& out, const CliqueReport& report, const std::vector<std::string>& names) {
    auto label = [&](std::size_t i) { return i < names.size() ? names[i] : std::to_string(i); };
    out << "j,k,l,m_c\n";
    for (const auto& c : report.triples) {
        out << label(c.j) << ',' << label(c.k) << ',' << label(c.l) << ',' << csv::format_double(c.score) << '\n';
    }
}

}  // namespace codesign
