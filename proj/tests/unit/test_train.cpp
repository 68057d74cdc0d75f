#include "doctest.h"

#include "codesign/config.hpp"
#include "codesign/errors.hpp"
#include "codesign/train.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace codesign;
using codesign::ad::Tensor;

namespace {

SiteTable toy_sites() {
    return SiteTable({{"A", geodetic_to_ecef(-23.0, -67.8, 5000), 100},
                      {"B", geodetic_to_ecef(32.7, -109.9, 3000), 300},
                      {"C", geodetic_to_ecef(-90.0, 0.0, 2800), 400}});
}

TrainConfig toy_config() {
    TrainConfig c = default_config().train;
    c.dataset.image_size = 8;
    c.dataset.fov_uas = 100.0;
    c.dataset.size = 16;
    c.timestamps = 4;
    c.min_elevation_deg = -90.0;
    c.base_width = 2;
    c.levels = 2;
    c.batch_size = 3;
    return c;
}

std::vector<Image> toy_images(std::size_t count, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<Image> out;
    for (std::size_t i = 0; i < count; ++i) out.push_back(synthetic_image(rng, 8, 100.0));
    return out;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

}  // namespace

TEST_CASE("seed derivation separates streams") {
    std::set<std::uint64_t> seen;
    for (std::uint64_t t = 0; t < 6; ++t)
        for (std::uint64_t s = 0; s < 8; ++s) seen.insert(derive_seed(42, t, s));
    CHECK(seen.size() == 48);
    CHECK(derive_seed(1, 2, 3) == derive_seed(1, 2, 3));
}

TEST_CASE("synthetic images and augmentation") {
    std::mt19937_64 rng(1);
    for (int i = 0; i < 50; ++i) {
        const Image img = synthetic_image(rng);
        CHECK(img.total_flux() == doctest::Approx(1.0).epsilon(1e-12));
        for (double p : img.pixels) CHECK(p >= 0.0);
    }
    const Image img = synthetic_image(rng);
    const std::vector<double> zero(img.pixels.size(), 0.0);
    const Image same = warp(img, 0.0, zero, zero);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) CHECK(std::abs(same.pixels[i] - img.pixels[i]) < 1e-6);

    std::mt19937_64 a(10), b(11);
    const Image ia = augment(img, a), ib = augment(img, b);
    CHECK(std::abs(ia.total_flux() - 1.0) < 1e-9);
    double diff = 0.0;
    for (std::size_t i = 0; i < ia.pixels.size(); ++i) diff += std::abs(ia.pixels[i] - ib.pixels[i]);
    CHECK(diff > 0.0);
}

TEST_CASE("loss assembly") {
    TrainConfig cfg = toy_config();
    const auto ctx = ObservationContext::build(cfg, toy_sites());
    const auto batch = toy_images(3, 2);
    std::mt19937_64 rng(3);
    const Tensor packed = pack_batch(batch, *ctx, rng);
    IsingModel m(3);
    m.set(0, 1, -0.3);
    m.set(2, 2, 0.4);
    GibbsConfig gibbs;
    const GibbsNoise noise = fresh_noise(rng, 3, gibbs.layers, 3);
    const Tensor target = blurred_targets(batch, *ctx);
    const DecodeFn perfect = [&](const Tensor&) { return target; };

    const auto zero = total_loss(batch, packed, theta_constant(m), perfect, gibbs, noise, *ctx, 0.0, 0.0);
    CHECK(zero.total.item() == 0.0);

    std::mt19937_64 wrng(4);
    ad::ParameterSet ps;
    Decoder dec(decoder_config(cfg, *ctx), ps, wrng);
    const DecodeFn decode = [&](const Tensor& x) { return dec(x); };
    const auto plain = total_loss(batch, packed, theta_constant(m), decode, gibbs, noise, *ctx, 0.0, 0.0);
    CHECK(plain.total.item() == doctest::Approx(ad::mean(plain.similarity).item()).epsilon(1e-15));

    const auto full = total_loss(batch, packed, theta_constant(m), decode, gibbs, noise, *ctx, 0.2, 0.3);
    double expect = 0.0;
    for (std::size_t b = 0; b < 3; ++b) {
        double l1 = 0.0;
        for (std::size_t j = 0; j < 3; ++j) l1 += full.masks.values()[b * 3 + j];
        expect += (plain.similarity.values()[b] + 0.2 * l1 - 0.3 * full.hamiltonian.values()[b]) / 3.0;
    }
    CHECK(full.total.item() == doctest::Approx(expect).epsilon(1e-13));

    // all-ones masks add lambda1 * K per image
    const auto ones = masked_measurements(Tensor::constant({3, 3}, 1.0), packed, *ctx);
    for (std::size_t i = 0; i < ones.numel(); ++i) CHECK(ones.values()[i] == packed.values()[i]);
}

TEST_CASE("masked measurements scale by site products") {
    TrainConfig cfg = toy_config();
    cfg.noise_case = 4;  // amplitude + closure input
    const auto ctx = ObservationContext::build(cfg, toy_sites());
    REQUIRE(ctx->layout.mode() == InputMode::AmpClosure);
    std::mt19937_64 rng(5);
    const Tensor packed = pack_batch(toy_images(1, 5), *ctx, rng);
    const std::vector<double> m{0.5, 0.8, 0.3};
    const Tensor masked = masked_measurements(Tensor::constant({1, 3}, m), packed, *ctx);
    const auto out = masked.values();
    for (std::size_t i = 0; i < ctx->layout.length(); ++i) {
        double f = m[ctx->layout.first_site(i)] * m[ctx->layout.second_site(i)];
        if (ctx->layout.third_site(i) != MeasurementLayout::kNoSite) f *= m[ctx->layout.third_site(i)];
        CHECK(out[i] == doctest::Approx(packed.values()[i] * f).epsilon(1e-14));
    }
}

TEST_CASE("theta gradient on a three-site toy") {
    TrainConfig cfg = toy_config();
    const auto ctx = ObservationContext::build(cfg, toy_sites());
    const auto batch = toy_images(3, 6);
    std::mt19937_64 rng(7);
    const Tensor packed = pack_batch(batch, *ctx, rng);
    GibbsConfig gibbs;
    gibbs.orderings = fresh_orderings(rng, 3, gibbs.layers);
    const GibbsNoise noise = fresh_noise(rng, 3, gibbs.layers, 3);
    ad::ParameterSet ps;
    std::normal_distribution<double> g(0.0, 0.3);
    std::vector<double> up(6);
    for (double& v : up) v = g(rng);
    ps.add("theta", Tensor::parameter({6}, up));
    Decoder dec(decoder_config(cfg, *ctx), ps, rng);
    auto program = [&] {
        const DecodeFn decode = [&](const Tensor& x) { return dec(x); };
        return total_loss(batch, packed, theta_matrix(ps.get("theta"), 3), decode, gibbs, noise, *ctx, 0.05, 0.05).total;
    };
    const auto report = ad::finite_diff_check(program, ps, 1e-6, 1e-3, 4);
    CHECK(report.max_rel_error < 1e-3);
}

TEST_CASE("diversity term raises entropy") {
    std::mt19937_64 rng(8);
    const std::size_t n = 6;
    IsingModel start(n);
    std::normal_distribution<double> g(0.0, 1.0);
    for (std::size_t j = 0; j < n; ++j) {
        start.set(j, j, 1.5 * g(rng));
        for (std::size_t k = j + 1; k < n; ++k) start.set(j, k, 0.8 * g(rng));
    }
    ad::ParameterSet ps;
    Tensor& theta = ps.add("theta", Tensor::parameter({n * (n + 1) / 2}, start.upper()));
    Adam adam(ps, 0.02);
    GibbsConfig gibbs;
    gibbs.orderings = fresh_orderings(rng, n, gibbs.layers);
    for (int step = 0; step < 300; ++step) {
        const GibbsNoise noise = fresh_noise(rng, n, gibbs.layers, 32);
        const auto ms = sample_mask(theta_matrix(theta, n), gibbs, noise);
        ps.backward(ad::mean(-1.0 * batch_hamiltonian(theta_matrix(theta, n), ms.final_state)));
        adam.step();
    }
    CHECK(entropy(IsingModel::from_upper(n, theta.values())) > entropy(start));
}

TEST_CASE("adam minimizes a quadratic") {
    ad::ParameterSet ps;
    Tensor& x = ps.add("x", Tensor::parameter({2}, {3.0, -2.0}));
    Adam adam(ps, 0.05);
    const Tensor c = Tensor::constant({2}, std::vector<double>{1.0, 0.5});
    for (int i = 0; i < 2000; ++i) {
        ps.backward(ad::sum((x - c) * (x - c)));
        adam.step();
    }
    CHECK(x.values()[0] == doctest::Approx(1.0).epsilon(1e-3));
    CHECK(x.values()[1] == doctest::Approx(0.5).epsilon(1e-3));
    CHECK(adam.steps() == 2000);
}

TEST_CASE("training is reproducible and run directories round trip") {
    TrainConfig cfg = default_config().train;
    cfg.dataset.size = 8;
    cfg.epochs = 2;
    cfg.steps_per_epoch = 2;
    cfg.batch_size = 2;
    cfg.base_width = 2;
    cfg.levels = 2;
    cfg.trials = 2;
    cfg.mask_samples = 20;
    cfg.recon_samples = 4;
    cfg.seed = 99;
    const auto data = training_set(cfg);
    const RunArtifacts a = train_joint(cfg, data);
    const RunArtifacts b = train_joint(cfg, data);
    REQUIRE(a.trials.size() == 2);
    CHECK(a.trials[0].theta.matrix() == b.trials[0].theta.matrix());
    CHECK(a.trials[1].theta.matrix() == b.trials[1].theta.matrix());
    CHECK(a.trials[0].orderings != a.trials[1].orderings);
    CHECK(a.trials[0].history.size() == 4);
    for (std::size_t i = 0; i < 144; ++i) {
        const double mean = (a.trials[0].theta.matrix()[i] + a.trials[1].theta.matrix()[i]) / 2;
        CHECK(a.theta_mean.matrix()[i] == doctest::Approx(mean).epsilon(1e-14));
    }

    ExperimentConfig ec = default_config();
    ec.train = cfg;
    const auto dir = std::filesystem::temp_directory_path() / "codesign_run_test";
    std::filesystem::remove_all(dir);
    write_run_directory(dir.string(), a, config_text(ec));
    for (const char* f : {"theta_trial_1.csv", "theta_trial_2.csv", "theta_mean.csv", "theta_std.csv",
                          "loss_history.csv", "masks_sample.csv", "marginals.csv", "recon_mean.png",
                          "recon_mean.csv", "recon_std.png", "recon_std.csv", "README.txt", "run_config.cfg"})
        CHECK(std::filesystem::exists(dir / f));
    const LoadedRun loaded = load_run(dir.string(), 2);
    CHECK(loaded.trial.theta.matrix() == a.trials[1].theta.matrix());
    CHECK(loaded.trial.orderings == a.trials[1].orderings);
    // decoder restored: same reconstruction of the same input
    std::mt19937_64 rng(1);
    const Tensor packed = pack_batch({data[0]}, *a.context, rng);
    const Tensor t1 = (*a.trials[1].decoder)(packed);
    const auto r1 = t1.values();
    const Tensor t2 = (*loaded.trial.decoder)(packed);
    const auto r2 = t2.values();
    CHECK(std::equal(r1.begin(), r1.end(), r2.begin(), r2.end()));
    CHECK(slurp(dir / "theta_trial_1.csv").size() > 0);
    std::filesystem::remove_all(dir);
}

TEST_CASE("non-finite losses abort the run") {
    TrainConfig cfg = default_config().train;
    cfg.dataset.size = 4;
    cfg.epochs = 1;
    cfg.steps_per_epoch = 3;
    cfg.batch_size = 2;
    cfg.base_width = 2;
    cfg.levels = 2;
    cfg.trials = 1;
    cfg.lambda1 = 1e308;  // lambda1 * |M|_1 overflows
    CHECK_THROWS_AS(train_joint(cfg, training_set(cfg)), DivergenceError);
}

TEST_CASE("idx archives and image grids") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "codesign_idx_test";
    fs::create_directories(dir);
    auto be32 = [](std::ofstream& out, std::uint32_t v) {
        const char b[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
        out.write(b, 4);
    };
    {
        std::ofstream out(dir / "a.idx", std::ios::binary);
        be32(out, 0x00000803);
        be32(out, 3);
        be32(out, 28);
        be32(out, 28);
        std::vector<char> img(28 * 28, 0);
        img[0] = char(255);         // corner pixel
        img[14 * 28 + 14] = 51;     // centre pixel, a fifth as bright
        out.write(img.data(), static_cast<std::streamsize>(img.size()));
        std::vector<char> blank(28 * 28, 0);  // dropped: no flux
        out.write(blank.data(), static_cast<std::streamsize>(blank.size()));
        out.write(img.data(), static_cast<std::streamsize>(img.size()));
    }
    const auto imgs = read_idx_images((dir / "a.idx").string(), 32, 100.0, 2.0);
    REQUIRE(imgs.size() == 2);
    CHECK(imgs[0].total_flux() == doctest::Approx(2.0));
    CHECK(imgs[0].at(2, 2) == doctest::Approx(2.0 * 255 / 306));  // 28 px centred in 32: offset 2
    CHECK(imgs[0].at(16, 16) == doctest::Approx(2.0 * 51 / 306));
    CHECK(imgs[0].at(0, 0) == 0.0);
    CHECK(read_idx_images((dir / "a.idx").string(), 32, 100.0, 1.0, 1).size() == 1);

    {
        std::ofstream out(dir / "bad.idx", std::ios::binary);
        be32(out, 0x00000801);
    }
    CHECK_THROWS_AS(read_idx_images((dir / "bad.idx").string()), IoError);
    {
        std::ofstream out(dir / "short.idx", std::ios::binary);
        be32(out, 0x00000803);
        be32(out, 2);
        be32(out, 28);
        be32(out, 28);
        out << "xx";
    }
    CHECK_THROWS_AS(read_idx_images((dir / "short.idx").string()), IoError);

    std::mt19937_64 rng(3);
    const Image img = synthetic_image(rng);
    write_grid_csv((dir / "g.csv").string(), img);
    const Image back = read_grid_csv((dir / "g.csv").string(), img.fov_uas);
    REQUIRE(back.size == img.size);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) CHECK(back.pixels[i] == img.pixels[i]);
    write_png((dir / "g.png").string(), img);
    CHECK(slurp(dir / "g.png").substr(1, 3) == "PNG");
    fs::remove_all(dir);
}
