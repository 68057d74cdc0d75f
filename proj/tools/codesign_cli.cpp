// Command-line front end. Talks to the library only through the C API.

#include "codesign/codesign.h"

#include "CLI11.hpp"

#include <cinttypes>
#include <cstdio>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace {

struct Failure {
    cds_status status;
    std::string context;
};

void check(cds_status s, const std::string& context) {
    if (s != CDS_OK) throw Failure{s, context};
}

using ConfigPtr = std::unique_ptr<cds_config, decltype(&cds_config_free)>;
using IsingPtr = std::unique_ptr<cds_ising, decltype(&cds_ising_free)>;

// Options shared by every experiment command.
struct Common {
    std::string config;
    std::string out;
    std::string seed;
    std::string trials;
    std::string target;
    std::string noise_case;
    std::vector<std::string> set;
    bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c, bool with_trials = true) {
    cmd->add_option("--config", c.config, "experiment file (key: value)")->check(CLI::ExistingFile);
    cmd->add_option("--out", c.out, "output directory (default: the config's `out`)");
    cmd->add_option("--seed", c.seed, "random seed; drawn from entropy and recorded when omitted");
    if (with_trials) cmd->add_option("--trials", c.trials, "independent training trials");
    cmd->add_option("--target", c.target, "sgra or m87");
    cmd->add_option("--noise-case", c.noise_case, "1..6");
    cmd->add_option("--set", c.set, "extra KEY=VALUE override (repeatable)");
    cmd->add_flag("-q,--quiet", c.quiet, "no progress output");
}

void set(cds_config* cfg, const std::string& key, const std::string& value) {
    if (!value.empty()) check(cds_config_set(cfg, key.c_str(), value.c_str()), "--" + key);
}

ConfigPtr build_config(const Common& c) {
    cds_config* raw = nullptr;
    if (c.config.empty()) {
        check(cds_config_default(&raw), "default config");
    } else {
        check(cds_config_load(c.config.c_str(), &raw), c.config);
    }
    ConfigPtr cfg(raw, &cds_config_free);
    set(cfg.get(), "seed", c.seed);
    set(cfg.get(), "trials", c.trials);
    set(cfg.get(), "target", c.target);
    set(cfg.get(), "noise_case", c.noise_case);
    for (const auto& kv : c.set) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw CLI::ValidationError("--set", "expected KEY=VALUE, got '" + kv + "'");
        check(cds_config_set(cfg.get(), kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str()), "--set " + kv);
    }
    return cfg;
}

// An unseeded run gets a fresh seed that ends up in the written config.
void ensure_seed(cds_config* cfg, bool quiet) {
    std::uint64_t seed = 0;
    int given = 0;
    check(cds_config_seed(cfg, &seed, &given), "seed");
    if (given) return;
    std::random_device rd;
    seed = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
    check(cds_config_set(cfg, "seed", std::to_string(seed).c_str()), "seed");
    if (!quiet) std::fprintf(stderr, "seed: %" PRIu64 "\n", seed);
}

std::string out_dir(const cds_config* cfg, const Common& c) {
    if (!c.out.empty()) return c.out;
    const char* dir = nullptr;
    check(cds_config_out_dir(cfg, &dir), "out");
    return dir;
}

void progress(void* user, size_t trial, size_t step, size_t total, double loss) {
    if (*static_cast<bool*>(user)) return;
    if (step % 50 == 0 || step == total)
        std::fprintf(stderr, "trial %zu  step %zu/%zu  loss %.6g\n", trial, step, total, loss);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Joint design of telescope arrays and image reconstruction"};
    app.require_subcommand(1);
    app.set_version_flag("--version", cds_version());

    Common sim_opts, train_opts, sweep_opts, res_opts, swap_opts;

    auto* simulate = app.add_subcommand("simulate", "uv coverage and simulated measurements of one image");
    add_common(simulate, sim_opts, false);
    std::string truth;
    simulate->add_option("--truth", truth, "point, synthetic or a CSV grid");

    auto* train = app.add_subcommand("train", "joint training; writes a run directory");
    add_common(train, train_opts);
    std::string l1, l2, fraction;
    train->add_option("--lambda1", l1, "sparsity weight");
    train->add_option("--lambda2", l2, "diversity weight");
    train->add_option("--fraction", fraction, "blur FWHM as a fraction of nominal resolution");

    auto* sweep = app.add_subcommand("sweep", "mean telescope count over a (lambda1, lambda2) grid");
    add_common(sweep, sweep_opts);
    std::string sweep_l1, sweep_l2;
    sweep->add_option("--lambda1", sweep_l1, "comma-separated lambda1 values");
    sweep->add_option("--lambda2", sweep_l2, "comma-separated lambda2 values");

    auto* resolution = app.add_subcommand("resolution", "activities as the target resolution varies");
    add_common(resolution, res_opts);
    std::string fractions;
    resolution->add_option("--fraction", fractions, "comma-separated fractions of nominal resolution");

    auto* swap = app.add_subcommand("swap", "cross-evaluate decoders and sampling distributions of trained runs");
    add_common(swap, swap_opts, false);
    std::vector<std::string> runs;
    std::string test_size;
    swap->add_option("--runs", runs, "run directories (two or more)")->check(CLI::ExistingDirectory);
    swap->add_option("--test-size", test_size, "held-out images");

    auto* cliques = app.add_subcommand("cliques", "ranked three-cliques of a learned theta");
    std::string theta_path, cliques_out = "cliques.csv";
    double tau = 0.04;
    cliques->add_option("--theta", theta_path, "theta CSV")->required()->check(CLI::ExistingFile);
    cliques->add_option("--tau", tau, "coupling threshold")->capture_default_str();
    cliques->add_option("--out", cliques_out, "output CSV")->capture_default_str();

    auto* conditional = app.add_subcommand("conditional", "Ising model over the sites left after fixing others");
    std::string cond_theta, cond_out = "conditional_theta.csv";
    std::vector<std::string> fixed;
    conditional->add_option("--theta", cond_theta, "theta CSV")->required()->check(CLI::ExistingFile);
    conditional->add_option("--fix", fixed, "NAME[=+1|-1], repeatable or comma-separated")
        ->required()
        ->delimiter(',');
    conditional->add_option("--out", cond_out, "output CSV")->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*simulate) {
            auto cfg = build_config(sim_opts);
            set(cfg.get(), "truth", truth);
            ensure_seed(cfg.get(), sim_opts.quiet);
            const std::string dir = out_dir(cfg.get(), sim_opts);
            size_t rows = 0;
            check(cds_simulate(cfg.get(), dir.c_str(), &rows), "simulate");
            std::printf("%zu measurement rows written to %s\n", rows, dir.c_str());
        } else if (*train) {
            auto cfg = build_config(train_opts);
            set(cfg.get(), "lambda1", l1);
            set(cfg.get(), "lambda2", l2);
            set(cfg.get(), "resolution", fraction);
            ensure_seed(cfg.get(), train_opts.quiet);
            const std::string dir = out_dir(cfg.get(), train_opts);
            check(cds_train(cfg.get(), dir.c_str(), progress, &train_opts.quiet), "train");
            std::printf("run written to %s\n", dir.c_str());
        } else if (*sweep) {
            auto cfg = build_config(sweep_opts);
            set(cfg.get(), "sweep_lambda1", sweep_l1);
            set(cfg.get(), "sweep_lambda2", sweep_l2);
            ensure_seed(cfg.get(), sweep_opts.quiet);
            const std::string dir = out_dir(cfg.get(), sweep_opts);
            check(cds_sweep(cfg.get(), dir.c_str(), progress, &sweep_opts.quiet), "sweep");
            std::printf("sweep table written to %s/sweep.csv\n", dir.c_str());
        } else if (*resolution) {
            auto cfg = build_config(res_opts);
            set(cfg.get(), "fractions", fractions);
            ensure_seed(cfg.get(), res_opts.quiet);
            const std::string dir = out_dir(cfg.get(), res_opts);
            check(cds_resolution(cfg.get(), dir.c_str(), progress, &res_opts.quiet), "resolution");
            std::printf("resolution table written to %s/resolution.csv\n", dir.c_str());
        } else if (*swap) {
            auto cfg = build_config(swap_opts);
            std::string joined;
            for (const auto& r : runs) joined += (joined.empty() ? "" : ",") + r;
            set(cfg.get(), "swap_runs", joined);
            set(cfg.get(), "swap_test_size", test_size);
            ensure_seed(cfg.get(), swap_opts.quiet);
            const std::string dir = out_dir(cfg.get(), swap_opts);
            check(cds_swap(cfg.get(), dir.c_str()), "swap");
            std::printf("swap matrix written to %s/swap.csv\n", dir.c_str());
        } else if (*cliques) {
            cds_ising* raw = nullptr;
            check(cds_ising_load(theta_path.c_str(), &raw), theta_path);
            IsingPtr model(raw, &cds_ising_free);
            size_t count = 0;
            check(cds_ising_cliques(model.get(), tau, cliques_out.c_str(), &count), "cliques");
            std::printf("%zu three-cliques above tau=%g written to %s\n", count, tau, cliques_out.c_str());
        } else if (*conditional) {
            cds_ising* raw = nullptr;
            check(cds_ising_load(cond_theta.c_str(), &raw), cond_theta);
            IsingPtr model(raw, &cds_ising_free);
            std::vector<const char*> names;
            for (const auto& f : fixed) names.push_back(f.c_str());
            cds_ising* cond_raw = nullptr;
            check(cds_ising_conditional(model.get(), names.data(), names.size(), &cond_raw), "conditional");
            IsingPtr cond(cond_raw, &cds_ising_free);
            check(cds_ising_save(cond.get(), cond_out.c_str()), cond_out);
            std::printf("%zu-site conditional model written to %s\n", cds_ising_size(cond.get()), cond_out.c_str());
        }
    } catch (const Failure& f) {
        std::fprintf(stderr, "error: %s: %s (%s)\n", f.context.c_str(), cds_last_error(), cds_status_name(f.status));
        return 1;
    } catch (const CLI::Error& e) {
        return app.exit(e);
    }
    return 0;
}
