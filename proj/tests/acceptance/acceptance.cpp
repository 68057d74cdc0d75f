// Acceptance checks. `acceptance --criterion N` runs one; no argument runs all.
// Each prints a single "criterion N: PASS|FAIL - detail" line.

#include "codesign/commands.hpp"
#include "codesign/config.hpp"
#include "codesign/gibbs.hpp"
#include "codesign/ising.hpp"
#include "codesign/train.hpp"
#include "codesign/vlbi.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <sys/wait.h>

using namespace codesign;
using ad::Tensor;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

IsingModel random_model(std::mt19937_64& rng, std::size_t n) {
    std::normal_distribution<double> g(0.0, 0.6);
    IsingModel m(n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = j; k < n; ++k) m.set(j, k, g(rng));
    return m;
}

double total_variation(const std::vector<double>& p, const std::vector<double>& q) {
    double tv = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) tv += std::abs(p[i] - q[i]);
    return 0.5 * tv;
}

// Brute force straight from the energy: no library enumeration helpers.
std::vector<double> brute_probabilities(const IsingModel& m) {
    const std::size_t n = m.size();
    std::vector<double> w(std::size_t{1} << n);
    double z = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        double h = 0.0;
        auto x = [&](std::size_t j) { return (i >> j) & 1 ? 1.0 : -1.0; };
        for (std::size_t j = 0; j < n; ++j) {
            h -= m.theta(j, j) * x(j);
            for (std::size_t k = j + 1; k < n; ++k) h -= m.theta(j, k) * x(j) * x(k);
        }
        w[i] = std::exp(-h);
        z += w[i];
    }
    for (double& v : w) v /= z;
    return w;
}

std::uint64_t bits_of(const SpinState& s) {
    std::uint64_t i = 0;
    for (std::size_t j = 0; j < s.size(); ++j)
        if (s[j] > 0) i |= std::uint64_t{1} << j;
    return i;
}

Outcome criterion1() {
    std::mt19937_64 rng(101);
    double worst_identity = 0.0, worst_conditional = 0.0;
    for (int t = 0; t < 20; ++t) {
        const std::size_t n = 2 + static_cast<std::size_t>(t % 11);  // 2..12
        const IsingModel m = random_model(rng, n);
        worst_identity = std::max(worst_identity, std::abs(entropy(m) - expected_energy(m) - log_partition_function(m)));

        PartialAssignment known(n);
        std::uniform_int_distribution<std::size_t> pick(0, n - 1);
        const std::size_t fixed = 1 + pick(rng) % (n - 1);
        while (std::count_if(known.begin(), known.end(), [](auto v) { return v.has_value(); }) <
               static_cast<long>(fixed))
            known[pick(rng)] = rng() & 1 ? 1 : -1;
        const auto cond = conditional_model(m, known);

        // condition the full joint by hand
        const auto joint = brute_probabilities(m);
        std::vector<double> restricted(std::size_t{1} << cond.sites.size(), 0.0);
        double mass = 0.0;
        for (std::uint64_t i = 0; i < joint.size(); ++i) {
            bool match = true;
            for (std::size_t j = 0; j < n; ++j)
                if (known[j] && (((i >> j) & 1) ? 1 : -1) != *known[j]) match = false;
            if (!match) continue;
            std::uint64_t r = 0;
            for (std::size_t f = 0; f < cond.sites.size(); ++f)
                if ((i >> cond.sites[f]) & 1) r |= std::uint64_t{1} << f;
            restricted[r] += joint[i];
            mass += joint[i];
        }
        const auto p = brute_probabilities(cond.model);
        for (std::size_t i = 0; i < p.size(); ++i)
            worst_conditional = std::max(worst_conditional, std::abs(p[i] - restricted[i] / mass));
    }
    return {worst_identity < 1e-8 && worst_conditional < 1e-10,
            fmt("entropy identity max err %.2e, conditional max err %.2e", worst_identity, worst_conditional)};
}

Outcome criterion2() {
    std::mt19937_64 rng(202);
    double worst = 0.0;
    for (int t = 0; t < 10; ++t) {
        const std::size_t n = 1 + static_cast<std::size_t>(t);  // 1..10
        const IsingModel m = random_model(rng, n);
        Ordering order(n);
        for (std::size_t j = 0; j < n; ++j) order[j] = j;
        std::uniform_real_distribution<double> u(0.0, 1.0);
        std::vector<double> u0(n);
        for (double& v : u0) v = u(rng);
        SpinState s = init_state(u0);
        for (int i = 0; i < 50; ++i) s = gibbs_step_exact(m, s, order, rng);
        std::vector<double> freq(std::size_t{1} << n, 0.0);
        const int keep = 100000;
        for (int i = 0; i < keep; ++i) {
            s = gibbs_step_exact(m, s, order, rng);
            freq[bits_of(s)] += 1.0 / keep;
        }
        worst = std::max(worst, total_variation(freq, brute_probabilities(m)));
    }
    return {worst < 0.05, fmt("max total variation %.4f over 10 models", worst)};
}

double relaxed_agreement(double s1) {
    std::mt19937_64 rng(303);
    std::size_t agree = 0, total = 0;
    for (int t = 0; t < 20; ++t) {
        const IsingModel m = random_model(rng, 8);
        GibbsConfig cfg;
        cfg.s1 = s1;
        cfg.orderings = fresh_orderings(rng, 8, cfg.layers);
        const GibbsNoise noise = fresh_noise(rng, 8, cfg.layers, 32);
        const MaskSample sample = sample_mask(theta_constant(m), cfg, noise);
        const auto relaxed = sample.final_state.values();
        for (std::size_t b = 0; b < 32; ++b) {
            const SpinState exact = exact_chain(m, cfg, noise, b);
            for (std::size_t j = 0; j < 8; ++j) {
                agree += (relaxed[b * 8 + j] > 0 ? 1 : -1) == exact[j];
                ++total;
            }
        }
    }
    return static_cast<double>(agree) / static_cast<double>(total);
}

Outcome criterion3() {
    std::string sweep;
    for (double s1 : {3.0, 200.0, 1000.0, 1e4}) sweep += fmt(" s1=%g:%.4f", s1, relaxed_agreement(s1));
    const double rate = relaxed_agreement(50.0);
    return {rate >= 0.99, fmt("agreement %.4f at s1=50 over 5120 spins (", rate) + sweep.substr(1) + ")"};
}

Outcome criterion4() {
    TrainConfig cfg = default_config().train;
    cfg.dataset.image_size = 8;
    cfg.timestamps = 4;
    cfg.min_elevation_deg = -90.0;
    cfg.base_width = 2;
    cfg.levels = 2;
    const SiteTable sites({{"A", geodetic_to_ecef(-23.0, -67.8, 5000), 100},
                           {"B", geodetic_to_ecef(32.7, -109.9, 3000), 300},
                           {"C", geodetic_to_ecef(19.8, -155.5, 4000), 400}});
    std::string detail;
    bool pass = true;
    for (int noise_case : {1, 4}) {
        cfg.noise_case = noise_case;
        const auto ctx = ObservationContext::build(cfg, sites);
        std::mt19937_64 rng(404);
        std::vector<Image> batch;
        for (int i = 0; i < 3; ++i) batch.push_back(synthetic_image(rng, 8, 100.0));
        const Tensor packed = pack_batch(batch, *ctx, rng);
        GibbsConfig gibbs = gibbs_config(cfg, fresh_orderings(rng, 3, cfg.gibbs_layers));
        const GibbsNoise noise = fresh_noise(rng, 3, gibbs.layers, 3);
        ad::ParameterSet ps;
        std::normal_distribution<double> g(0.0, 0.3);
        std::vector<double> up(6);
        for (double& v : up) v = g(rng);
        ps.add("theta", Tensor::parameter({6}, up));
        Decoder dec(decoder_config(cfg, *ctx), ps, rng);
        auto program = [&] {
            const DecodeFn decode = [&](const Tensor& x) { return dec(x); };
            return total_loss(batch, packed, theta_matrix(ps.get("theta"), 3), decode, gibbs, noise, *ctx, 0.05, 0.05)
                .total;
        };
        // Small step: the phase head normalizes (cos, sin) pairs whose norm can be
        // tiny, and the curvature there swamps a 1e-6 central difference.
        const auto report = ad::finite_diff_check(program, ps, 1e-8, 1e-3, 8);
        pass = pass && report.max_rel_error < 1e-3;
        pass = pass && !report.nonsmooth;
        detail += fmt("%sdecoder %s: max rel err %.2e over %zu entries (worst %s)", detail.empty() ? "" : "; ",
                      noise_case == 1 ? "A" : "B", report.max_rel_error, report.checked,
                      report.worst_parameter.c_str());
    }
    return {pass, detail};
}

Outcome criterion5() {
    const SiteTable s = load_sites(default_data_dir() + "/eht_plus.sites");
    const auto g = uv_coverage(s, Target::sgr_a(), Schedule::uniform());
    std::mt19937_64 rng(505);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image img = point_source(32);
    for (double& p : img.pixels) p = u(rng);
    img.normalize(1.3);

    const auto ideal = dft_visibility(img, g);
    MeasurementSet clean = corrupt(ideal, g, s, NoiseConfig::from_case(1), rng);
    MeasurementSet gained = clean;
    const std::size_t nb = g.baseline_count();
    std::vector<double> phase(g.times() * s.size());
    for (double& p : phase) p = 2 * std::numbers::pi * (u(rng) - 0.5) * 10.0;
    for (std::size_t t = 0; t < g.times(); ++t)
        for (std::size_t b = 0; b < nb; ++b) {
            const auto& bl = g.baselines()[b];
            gained.visibilities[t * nb + b] *=
                std::polar(1.0, phase[t * s.size() + bl.p] - phase[t * s.size() + bl.q]);
        }
    std::vector<Triangle> tris;
    for (std::size_t t = 0; t < g.times(); ++t)
        for (const auto& x : triangle_set(g, t)) tris.push_back(x);
    const auto a = closure_phases(clean, g, tris).phases;
    const auto b = closure_phases(gained, g, tris).phases;
    double closure_err = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) closure_err = std::max(closure_err, std::abs(wrap_angle(a[i] - b[i])));

    const double zero_err = std::abs(dft_at(img, 0.0, 0.0) - Complex(img.total_flux(), 0.0));

    // direct sum from the pixel-offset convention
    const double pix = img.fov_uas / 32.0 * std::numbers::pi / (180.0 * 3600.0 * 1e6);
    double dft_err = 0.0, conj_err = 0.0;
    for (std::size_t t = 0; t < g.times(); t += 3)
        for (std::size_t k = 0; k < nb; k += 5) {
            const auto [uu, vv] = g.uv(t, g.baselines()[k].p, g.baselines()[k].q);
            Complex direct{0.0, 0.0};
            for (std::size_t r = 0; r < 32; ++r)
                for (std::size_t c = 0; c < 32; ++c) {
                    const double l = (static_cast<double>(c) - 16.0) * pix, m = (static_cast<double>(r) - 16.0) * pix;
                    direct += img.at(r, c) * std::polar(1.0, -2 * std::numbers::pi * (uu * l + vv * m));
                }
            dft_err = std::max(dft_err, std::abs(dft_at(img, uu, vv) - direct));
            conj_err = std::max(conj_err, std::abs(dft_at(img, -uu, -vv) - std::conj(dft_at(img, uu, vv))));
        }
    return {closure_err < 1e-10 && zero_err < 1e-12 && dft_err < 1e-12 && conj_err < 1e-12,
            fmt("closure %.1e over %zu triangles, zero-baseline %.1e, direct sum %.1e, conjugate %.1e", closure_err,
                a.size(), zero_err, dft_err, conj_err)};
}

// Desk-scale training settings shared by the qualitative criteria.
TrainConfig desk_config() {
    TrainConfig c = default_config().train;
    c.base_width = 8;
    c.dataset.size = 512;
    c.epochs = 40;
    c.steps_per_epoch = 20;
    c.seed = 1;
    return c;
}

ProgressFn ticker(const char* label) {
    const auto t0 = std::chrono::steady_clock::now();
    return [=](const Progress& p) {
        if (p.step % 200 != 0 && p.step != p.total_steps) return;
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::fprintf(stderr, "  [%s] trial %zu step %zu/%zu loss %.4f (%.0fs)\n", label, p.trial, p.step,
                     p.total_steps, p.loss, s);
    };
}

Outcome criterion6() {
    TrainConfig cfg = desk_config();
    const auto data = training_set(cfg);
    const auto ctx = ObservationContext::build(cfg);
    const std::size_t alma = *ctx->sites.index_of("ALMA"), apex = *ctx->sites.index_of("APEX");
    const std::size_t jcmt = *ctx->sites.index_of("JCMT"), sma = *ctx->sites.index_of("SMA");
    const std::size_t glt = *ctx->sites.index_of("GLT");
    int good = 0;
    std::string detail;
    for (std::size_t trial = 1; trial <= 5; ++trial) {
        const TrialResult r = train_trial(cfg, *ctx, data, trial, ticker("c6"));
        const auto& th = r.theta;
        std::size_t argmin = 0;
        for (std::size_t j = 1; j < th.size(); ++j)
            if (th.activity(j) < th.activity(argmin)) argmin = j;
        const bool ok = th.theta(alma, apex) < 0 && th.theta(jcmt, sma) < 0 && argmin == glt;
        good += ok;
        detail += fmt("%s[%zu: %.3f %.3f min=%s]", detail.empty() ? "" : " ", trial, th.theta(alma, apex),
                      th.theta(jcmt, sma), ctx->sites[argmin].name.c_str());
    }
    return {good >= 4, fmt("%d/5 trials meet all conditions ", good) + detail};
}

Outcome criterion7() {
    TrainConfig cfg = desk_config();
    cfg.trials = 1;
    cfg.epochs = 20;
    cfg.seed = 2;
    cfg.mask_samples = 1000;
    const auto data = training_set(cfg);
    const std::vector<double> l1{-0.05, -0.005, 0.005, 0.05};
    const auto cells = sweep_regularization(cfg, l1, {0.005}, data, ticker("c7"));
    bool decreasing = true;
    std::string detail = "counts";
    for (std::size_t i = 0; i < cells.size(); ++i) {
        detail += fmt(" %.2f", cells[i].mean_count);
        if (i > 0 && !(cells[i].mean_count < cells[i - 1].mean_count)) decreasing = false;
    }
    const auto wide = sweep_regularization(cfg, {0.005}, {0.5}, data, ticker("c7"));
    const double m = wide.front().mean_count;
    detail += fmt("; lambda2=0.5 count %.2f", m);
    return {decreasing && std::abs(m - 6.0) <= 1.0, detail};
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("codesign_acceptance_" + name);
    fs::remove_all(p);
    return p;
}

Outcome criterion8() {
    const fs::path root = scratch("swap");
    std::vector<std::string> dirs;
    for (const char* target : {"sgra", "m87"}) {
        ExperimentConfig c = default_config();
        c.train = desk_config();
        c.train.trials = 1;
        c.train.target = target;
        c.train.noise_case = 1;
        c.train.mask_samples = 200;
        c.train.recon_samples = 8;
        c.seed_given = true;
        dirs.push_back((root / target).string());
        run_train(c, dirs.back(), ticker(target));
    }
    ExperimentConfig s = default_config();
    s.train.seed = 8;
    s.seed_given = true;
    s.swap_runs = dirs;
    s.swap_test_size = 200;
    const SwapResult r = run_swap(s, (root / "table").string());
    bool pass = true;
    std::string detail;
    for (std::size_t i = 0; i < 2; ++i) {
        pass = pass && r.loss[i][i] <= r.loss[i][1 - i];
        detail += fmt("%s%s row: %.4f (own) vs %.4f", i ? "; " : "", r.labels[i].c_str(), r.loss[i][i],
                      r.loss[i][1 - i]);
    }
    return {pass, detail};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

Outcome criterion9() {
    const fs::path root = scratch("determinism");
    fs::create_directories(root);
    const std::string args =
        " train --seed 11 --trials 2 --set dataset_size=64 --set epochs=3 --set steps_per_epoch=5 --set batch_size=8 "
        "--set base_width=4 --set mask_samples=50 --set recon_samples=4 -q --out ";
    for (const char* run : {"a", "b"}) {
        const std::string cmd = std::string("\"") + CODESIGN_CLI + "\"" + args + "\"" + (root / run).string() +
                                "\" > \"" + (root / "log").string() + "\" 2>&1";
        const int status = std::system(cmd.c_str());
        if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) return {false, "train run failed: " + slurp(root / "log")};
    }
    std::size_t compared = 0;
    for (const auto& e : fs::directory_iterator(root / "a")) {
        const std::string name = e.path().filename().string();
        if (name.rfind("theta_trial_", 0) != 0) continue;
        if (slurp(e.path()) != slurp(root / "b" / name)) return {false, name + " differs between reruns"};
        ++compared;
    }
    return {compared == 2, fmt("%zu theta_trial files identical across reruns", compared)};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::function<Outcome()>> criteria{criterion1, criterion2, criterion3, criterion4, criterion5,
                                                         criterion6, criterion7, criterion8, criterion9};
    std::vector<std::size_t> chosen;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--criterion" && i + 1 < argc) {
            chosen.push_back(std::stoul(argv[++i]));
        } else {
            std::fprintf(stderr, "usage: acceptance [--criterion N]...\n");
            return 2;
        }
    }
    if (chosen.empty())
        for (std::size_t i = 1; i <= criteria.size(); ++i) chosen.push_back(i);

    int failed = 0;
    for (std::size_t n : chosen) {
        if (n < 1 || n > criteria.size()) {
            std::fprintf(stderr, "no criterion %zu\n", n);
            return 2;
        }
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[n - 1]();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("criterion %zu: %s - %s (%.1fs)\n", n, o.pass ? "PASS" : "FAIL", o.detail.c_str(), s);
        std::fflush(stdout);
        failed += !o.pass;
    }
    return failed ? 1 : 0;
}
