#include "doctest.h"

#include "codesign/recon.hpp"

#include <cmath>
#include <filesystem>
#include <random>

using namespace codesign;
using codesign::ad::Tensor;

namespace {

Image random_image(std::mt19937_64& rng, std::size_t n = 32) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image img(n, 100.0);
    for (double& p : img.pixels) p = u(rng);
    img.normalize(1.0);
    return img;
}

Image cyclic_shift(const Image& img, long dy, long dx) {
    Image out(img.size, img.fov_uas);
    const long n = static_cast<long>(img.size);
    for (long r = 0; r < n; ++r)
        for (long c = 0; c < n; ++c)
            out.at(static_cast<std::size_t>(((r + dy) % n + n) % n), static_cast<std::size_t>(((c + dx) % n + n) % n)) =
                img.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
    return out;
}

Tensor as_batch(const Image& img) { return Tensor::constant({1, img.size, img.size}, img.pixels); }

// Four-site toy array observed for a few timestamps.
ObservationGeometry toy_geometry() {
    SiteTable s({{"A", geodetic_to_ecef(-23.0, -67.8, 5000), 100},
                 {"B", geodetic_to_ecef(19.8, -155.5, 4000), 200},
                 {"C", geodetic_to_ecef(32.7, -109.9, 3000), 300},
                 {"D", geodetic_to_ecef(-90.0, 0.0, 2800), 400}});
    return uv_coverage(s, Target::sgr_a(), Schedule::uniform(3, -90.0));
}

}  // namespace

TEST_CASE("kernel widths and normalization") {
    const BlurKernel k = make_kernel(1.0);
    CHECK(k.fwhm_px == doctest::Approx(8.0));
    double total = 0.0;
    for (double w : k.weights) total += w;
    CHECK(std::abs(total - 1.0) < 1e-12);
    CHECK(k.at(3, 1) == doctest::Approx(k.at(-1, 3)).epsilon(1e-14));
    // FWHM: half maximum four pixels from the centre
    const double sigma = 8.0 / (2 * std::sqrt(2 * std::log(2.0)));
    CHECK(k.at(0, 4) / k.at(0, 0) == doctest::Approx(std::exp(-16 / (2 * sigma * sigma))));
    CHECK(k.at(0, 4) / k.at(0, 0) == doctest::Approx(0.5));

    const BlurKernel d = make_kernel(1e-6);
    CHECK(d.at(0, 0) == 1.0);
}

TEST_CASE("blur") {
    std::mt19937_64 rng(1);
    const Image img = random_image(rng);
    const Image same = blur(img, make_kernel(1e-9));
    for (std::size_t i = 0; i < img.pixels.size(); ++i) CHECK(same.pixels[i] == doctest::Approx(img.pixels[i]));

    Image flat(32, 100.0);
    std::fill(flat.pixels.begin(), flat.pixels.end(), 2.0);
    const Image fb = blur(flat, make_kernel(0.25, 8.0, 3));
    CHECK(fb.at(16, 16) == doctest::Approx(2.0).epsilon(1e-12));
    const Image fp = blur(flat, make_kernel(1.0), Boundary::Periodic);
    for (double v : fp.pixels) CHECK(v == doctest::Approx(2.0).epsilon(1e-12));

    const BlurKernel k = make_kernel(0.75);
    const Image b = blur(img, k);
    const long n = 32, r = static_cast<long>(k.radius);
    for (long y = 0; y < n; y += 5)
        for (long x = 0; x < n; x += 3) {
            double direct = 0.0;
            for (long dy = -r; dy <= r; ++dy)
                for (long dx = -r; dx <= r; ++dx) {
                    const long yy = y - dy, xx = x - dx;
                    if (yy < 0 || xx < 0 || yy >= n || xx >= n) continue;
                    direct += k.at(dy, dx) * img.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
                }
            CHECK(std::abs(b.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) - direct) < 1e-12);
        }

    // periodic blur commutes with cyclic shifts
    const Image s1 = blur(cyclic_shift(img, 3, -7), k, Boundary::Periodic);
    const Image s2 = cyclic_shift(blur(img, k, Boundary::Periodic), 3, -7);
    for (std::size_t i = 0; i < s1.pixels.size(); ++i) CHECK(std::abs(s1.pixels[i] - s2.pixels[i]) < 1e-12);
}

TEST_CASE("l1 blurred loss") {
    std::mt19937_64 rng(2);
    const Image truth = random_image(rng);
    const BlurKernel k = make_kernel(0.75);
    Image recon = blur(truth, k);
    CHECK(l1_blurred_loss(recon, truth, k) == 0.0);
    for (double& p : recon.pixels) p += 0.1;
    CHECK(l1_blurred_loss(recon, truth, k) == doctest::Approx(0.1));
    CHECK(l1_blurred_loss(recon, truth, k, Reduction::Sum) == doctest::Approx(0.1 * 1024));

    const auto t = l1_loss(as_batch(recon), as_batch(blur(truth, k)), Reduction::Mean);
    CHECK(t.values()[0] == doctest::Approx(0.1));
}

TEST_CASE("shift-invariant loss") {
    std::mt19937_64 rng(3);
    const Image truth = random_image(rng);
    const BlurKernel k = make_kernel(0.5);
    const Image target = blur(truth, k, Boundary::Periodic);
    const Image recon = cyclic_shift(target, 5, -3);
    CHECK(std::abs(shift_invariant_loss(recon, truth, k)) < 1e-10);

    Image scaled = random_image(rng);
    const double base = shift_invariant_loss(scaled, truth, k);
    for (double& p : scaled.pixels) p *= 7.5;
    CHECK(shift_invariant_loss(scaled, truth, k) == doctest::Approx(base).epsilon(1e-12));
    CHECK(shift_invariant_loss(cyclic_shift(scaled, -4, 9), truth, k) == doctest::Approx(base).epsilon(1e-12));
    CHECK(base >= 0.0);
    CHECK(base <= 2.0);

    // Orthogonal to every shift: a checkerboard against a constant, mean-free
    Image flat(32, 100.0), checker(32, 100.0);
    std::fill(flat.pixels.begin(), flat.pixels.end(), 1.0);
    for (std::size_t r = 0; r < 32; ++r)
        for (std::size_t c = 0; c < 32; ++c) checker.at(r, c) = (r + c) % 2 ? 1.0 : -1.0;
    CHECK(shift_invariant_loss(checker, flat, make_kernel(1e-9)) == doctest::Approx(1.0));

    Image zero(32, 100.0);
    CHECK_THROWS(shift_invariant_loss(zero, truth, k));

    const auto t = shift_invariant_loss(as_batch(recon), as_batch(target));
    CHECK(std::abs(t.values()[0]) < 1e-10);
    const auto u = shift_invariant_loss(as_batch(scaled), as_batch(target));
    CHECK(u.values()[0] == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("decoder A shape, nonnegativity and gradients") {
    const auto geo = toy_geometry();
    const MeasurementLayout layout(geo, InputMode::Complex);
    DecoderConfig cfg = DecoderConfig::for_layout(layout, 2, 2);
    cfg.image_size = 8;
    ad::ParameterSet ps;
    std::mt19937_64 rng(4);
    Decoder dec(cfg, ps, rng);

    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> x(2 * layout.length());
    for (double& v : x) v = g(rng);
    const Tensor input = Tensor::constant({2, layout.length()}, x);
    const Tensor img = dec(input);
    CHECK(img.shape() == ad::Shape{2, 8, 8});
    for (double v : img.values()) CHECK(v >= 0.0);

    const Tensor zero = dec(Tensor::constant({1, layout.length()}, 0.0));
    const Tensor zero2 = dec(Tensor::constant({1, layout.length()}, 0.0));
    for (std::size_t i = 0; i < 64; ++i) CHECK(zero.values()[i] == zero2.values()[i]);

    const Tensor target = Tensor::constant({2, 8, 8}, 1.0 / 64);
    auto program = [&] { return ad::mean(shift_invariant_loss(dec(input), target) + l1_loss(dec(input), target, Reduction::Sum)); };
    const auto report = ad::finite_diff_check(program, ps, 1e-6, 1e-3, 6);
    CHECK(report.max_rel_error < 1e-3);

    CHECK_THROWS_AS(dec(Tensor::constant({1, layout.length() + 1}, 0.0)), ad::ShapeError);
}

TEST_CASE("decoder B recombines amplitudes with unit phasors") {
    const auto geo = toy_geometry();
    const MeasurementLayout layout(geo, InputMode::AmpClosure);
    DecoderConfig cfg = DecoderConfig::for_layout(layout, 2, 2);
    cfg.image_size = 8;
    cfg.phase_hidden = 8;
    ad::ParameterSet ps;
    std::mt19937_64 rng(5);
    Decoder dec(cfg, ps, rng);

    std::uniform_real_distribution<double> u(0.1, 1.0);
    std::vector<double> x(layout.length());
    for (double& v : x) v = u(rng);
    const Tensor input = Tensor::constant({1, layout.length()}, x);
    const auto out = dec.forward(input);
    CHECK(out.image.shape() == ad::Shape{1, 8, 8});
    const std::size_t v = cfg.visible_slots.size();
    REQUIRE(out.phasors.shape() == ad::Shape{1, 2 * v});
    for (std::size_t s = 0; s < v; ++s) {
        const double c = out.phasors.values()[2 * s], sn = out.phasors.values()[2 * s + 1];
        CHECK(c * c + sn * sn == doctest::Approx(1.0));
        const double amp = x[cfg.visible_slots[s]];
        CHECK(out.recombined.values()[2 * s] == doctest::Approx(amp * c));
        CHECK(out.recombined.values()[2 * s + 1] == doctest::Approx(amp * sn));
    }

    const Tensor target = Tensor::constant({1, 8, 8}, 1.0 / 64);
    auto program = [&] { return ad::mean(shift_invariant_loss(dec(input), target)); };
    const auto report = ad::finite_diff_check(program, ps, 1e-6, 1e-3, 4);
    CHECK(report.max_rel_error < 1e-3);
}

TEST_CASE("parameter files round trip") {
    const auto geo = toy_geometry();
    const MeasurementLayout layout(geo, InputMode::Complex);
    DecoderConfig cfg = DecoderConfig::for_layout(layout, 2, 2);
    cfg.image_size = 8;
    ad::ParameterSet a, b;
    std::mt19937_64 r1(6), r2(7);
    Decoder da(cfg, a, r1), db(cfg, b, r2);
    const auto path = (std::filesystem::temp_directory_path() / "codesign_params_test.bin").string();
    save_parameters(path, a, da.parameter_names());
    load_parameters(path, b);
    for (const auto& name : da.parameter_names()) {
        const auto va = a.get(name).values();
        const auto vb = b.get(name).values();
        CHECK(std::equal(va.begin(), va.end(), vb.begin(), vb.end()));
    }
    std::filesystem::remove(path);
}
