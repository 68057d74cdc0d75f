#include "doctest.h"

#include "codesign/config.hpp"
#include "codesign/errors.hpp"
#include "codesign/vlbi.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

using namespace codesign;

namespace {

SiteTable eht() { return load_sites(default_data_dir() + "/eht_plus.sites"); }

Image random_image(std::mt19937_64& rng, std::size_t n = 32) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image img = point_source(n);
    for (double& p : img.pixels) p = u(rng);
    img.normalize(1.0);
    return img;
}

// Independent direct sum using only the pixel-offset convention.
Complex direct_sum(const Image& img, double u, double v) {
    const double pix = img.fov_uas / static_cast<double>(img.size) * std::numbers::pi / (180.0 * 3600.0 * 1e6);
    double re = 0.0, im = 0.0;
    const double c = static_cast<double>(img.size / 2);
    for (std::size_t r = 0; r < img.size; ++r)
        for (std::size_t k = 0; k < img.size; ++k) {
            const double l = (static_cast<double>(k) - c) * pix;
            const double m = (static_cast<double>(r) - c) * pix;
            const double ph = -2 * std::numbers::pi * (u * l + v * m);
            re += img.at(r, k) * std::cos(ph);
            im += img.at(r, k) * std::sin(ph);
        }
    return {re, im};
}

}  // namespace

TEST_CASE("bundled site tables") {
    const SiteTable s = eht();
    REQUIRE(s.size() == 12);
    CHECK(s[*s.index_of("ALMA")].sefd == 90);
    CHECK(s[*s.index_of("APEX")].sefd == 3500);
    CHECK(s[*s.index_of("GLT")].sefd == 10000);
    const SiteTable future = load_sites(default_data_dir() + "/future.sites");
    CHECK(future.size() == 21);
    for (std::size_t i = 12; i < 21; ++i) CHECK(future[i].sefd == kProposedSiteSefd);
}

TEST_CASE("site file errors carry line numbers") {
    auto parse = [](const std::string& text) {
        std::istringstream in(text);
        return parse_sites(in, "test");
    };
    CHECK(parse("A 1 2 3 100\nB 4 5 6 200\n").size() == 2);
    auto line_of = [&](const std::string& text) -> std::size_t {
        try {
            parse(text);
        } catch (const ParseError& e) {
            return e.line();
        }
        return 0;
    };
    CHECK(line_of("A 1 2 3 100\nA 4 5 6 200\n") == 2);
    CHECK(line_of("# c\nA 1 2 3\n") == 2);
    CHECK(line_of("A 1 2 x 100\n") == 1);
    CHECK(line_of("A 1 2 3 -5\n") == 1);
    CHECK(line_of("#format: geodetic\nA 95 0 0 100\n") == 2);
    const SiteTable geo = parse("#format: geodetic\nEQ 0 0 0 50\n");
    CHECK(geo[0].position[0] == doctest::Approx(6378137.0));
    CHECK(std::abs(geo[0].position[1]) < 1e-6);
}

TEST_CASE("co-located sites give a zero baseline") {
    SiteTable s({{"ALMA", geodetic_to_ecef(-23.03, -67.75, 5000), 90},
                 {"APEX", geodetic_to_ecef(-23.03, -67.75, 5000), 3500},
                 {"SMT", geodetic_to_ecef(32.70, -109.89, 3185), 17100}});
    const auto g = uv_coverage(s, Target::sgr_a(), Schedule::uniform(24, -90.0));
    for (std::size_t t = 0; t < 24; ++t) {
        CHECK(std::abs(g.uv(t, 0, 1)[0]) < 1e-9);
        CHECK(std::abs(g.uv(t, 0, 1)[1]) < 1e-9);
    }
}

TEST_CASE("geometry symmetries") {
    const auto g = uv_coverage(eht(), Target::sgr_a(), Schedule::uniform());
    for (std::size_t t = 0; t < 24; ++t)
        for (std::size_t p = 0; p < 12; ++p)
            for (std::size_t q = 0; q < 12; ++q) {
                if (p == q) continue;
                CHECK(g.uv(t, p, q)[0] == -g.uv(t, q, p)[0]);
                CHECK(g.uv(t, p, q)[1] == -g.uv(t, q, p)[1]);
                CHECK(g.visible(t, p, q) == g.visible(t, q, p));
                CHECK(g.visible(t, p, q) == (g.site_visible(t, p) && g.site_visible(t, q)));
            }
}

TEST_CASE("Sgr A* is never above the horizon at GLT") {
    const SiteTable s = eht();
    const auto g = uv_coverage(s, Target::sgr_a(), Schedule::uniform());
    const std::size_t glt = *s.index_of("GLT");
    for (std::size_t t = 0; t < 24; ++t) CHECK_FALSE(g.site_visible(t, glt));
    const std::size_t spt = *s.index_of("SPT");
    for (std::size_t t = 0; t < 24; ++t) CHECK(g.site_visible(t, spt));
}

TEST_CASE("uv follows the hour-angle projection") {
    // independent evaluation for a single baseline
    const SiteTable s = eht();
    const Target tgt = Target::m87();
    const Schedule sch = Schedule::uniform(6, -90.0);
    const auto g = uv_coverage(s, tgt, sch);
    const double dec = tgt.dec_deg * std::numbers::pi / 180.0;
    for (std::size_t t = 0; t < 6; ++t) {
        const double h = (sch.gst_hours[t] - tgt.ra_hours) * std::numbers::pi / 12.0;
        const auto& a = s[2].position;
        const auto& b = s[7].position;
        const double bx = b[0] - a[0], by = b[1] - a[1], bz = b[2] - a[2];
        const double u = (std::sin(h) * bx + std::cos(h) * by) / tgt.wavelength_m();
        const double v = (-std::sin(dec) * std::cos(h) * bx + std::sin(dec) * std::sin(h) * by + std::cos(dec) * bz) /
                         tgt.wavelength_m();
        CHECK(g.uv(t, 2, 7)[0] == doctest::Approx(u).epsilon(1e-12));
        CHECK(g.uv(t, 2, 7)[1] == doctest::Approx(v).epsilon(1e-12));
    }
}

TEST_CASE("transform of simple images") {
    const Image pt = point_source(32);
    for (double u : {0.0, 1e9, -3e9})
        for (double v : {0.0, 2e9}) {
            const Complex z = dft_at(pt, u, v);
            CHECK(z.real() == doctest::Approx(1.0));
            CHECK(std::abs(z.imag()) < 1e-12);
        }

    std::mt19937_64 rng(3);
    const Image img = random_image(rng);
    CHECK(std::abs(dft_at(img, 0, 0) - Complex(img.total_flux(), 0)) < 1e-12);

    Image shifted = point_source(32);
    std::fill(shifted.pixels.begin(), shifted.pixels.end(), 0.0);
    shifted.at(16, 17) = 1.0;
    for (double u : {3e9, -7e9}) {
        const Complex a = dft_at(shifted, u, 5e9);
        const Complex b = direct_sum(shifted, u, 5e9);
        CHECK(std::abs(std::abs(a) - 1.0) < 1e-12);
        CHECK(std::abs(a - b) < 1e-12);
    }
    for (int i = 0; i < 10; ++i) {
        const double u = 8e9 * (i - 5), v = -3e9 * i;
        CHECK(std::abs(dft_at(img, u, v) - direct_sum(img, u, v)) < 1e-12);
        CHECK(std::abs(dft_at(img, -u, -v) - std::conj(dft_at(img, u, v))) < 1e-12);
    }
}

TEST_CASE("dense operator equals the direct transform") {
    const auto g = uv_coverage(eht(), Target::sgr_a(), Schedule::uniform());
    const DftOperator op(g);
    std::mt19937_64 rng(5);
    const Image img = random_image(rng);
    const auto a = op.apply(img);
    const auto b = dft_visibility(img, g);
    const std::size_t nb = g.baseline_count();
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto& bl = g.baselines()[i % nb];
        if (g.visible(i / nb, bl.p, bl.q)) {
            CHECK(std::abs(a[i] - b[i]) < 1e-12);
        } else {
            CHECK(a[i] == Complex(0.0, 0.0));
        }
    }
    CHECK(op.entries().size() == g.visible_count());
}

TEST_CASE("thermal noise scale") {
    CHECK(thermal_sigma(90, 3500, 1e-4) == doctest::Approx(0.05612).epsilon(1e-4));
    CHECK(thermal_sigma(90, 3500, 0.0) == 0.0);

    const SiteTable s = eht();
    const auto g = uv_coverage(s, Target::sgr_a(), Schedule::uniform());
    NoiseConfig eq{ThermalMode::Equal, false, 1e-3};
    for (double v : baseline_sigmas(s, g, eq)) CHECK(v == doctest::Approx(1e-3 * s.mean_sefd()));
    NoiseConfig site{ThermalMode::SiteVarying, false, 1e-3};
    const auto sig = baseline_sigmas(s, g, site);
    const std::size_t b = g.baseline_index(*s.index_of("ALMA"), *s.index_of("APEX"));
    CHECK(sig[b] == doctest::Approx(1e-3 * std::sqrt(90.0 * 3500.0)));
}

TEST_CASE("corruption") {
    const SiteTable s = eht();
    const auto g = uv_coverage(s, Target::sgr_a(), Schedule::uniform());
    std::mt19937_64 rng(7);
    const Image img = random_image(rng);
    const auto ideal = dft_visibility(img, g);

    const auto clean = corrupt(ideal, g, s, NoiseConfig::from_case(1), rng);
    for (std::size_t i = 0; i < ideal.size(); ++i)
        if (clean.visible[i]) CHECK(clean.visibilities[i] == ideal[i]);

    const auto phased = corrupt(ideal, g, s, NoiseConfig::from_case(4), rng);
    for (std::size_t i = 0; i < ideal.size(); ++i)
        if (phased.visible[i]) CHECK(std::abs(std::abs(phased.visibilities[i]) - std::abs(ideal[i])) < 1e-12);

    // Monte Carlo std of the real part
    std::vector<Complex> zero(ideal.size(), Complex(0, 0));
    NoiseConfig thermal{ThermalMode::SiteVarying, false, 1e-4};
    const auto sig = baseline_sigmas(s, g, thermal);
    const std::size_t b = g.baseline_index(*s.index_of("ALMA"), *s.index_of("LMT"));
    std::size_t t = 0;
    while (t < g.times() && !g.visible(t, g.baselines()[b].p, g.baselines()[b].q)) ++t;
    REQUIRE(t < g.times());
    double sum = 0.0, sumsq = 0.0;
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) {
        const double re = corrupt(zero, g, s, thermal, rng).visibilities[t * g.baseline_count() + b].real();
        sum += re;
        sumsq += re * re;
    }
    const double sd = std::sqrt(sumsq / draws - (sum / draws) * (sum / draws));
    CHECK(std::abs(sd / (sig[b] / std::sqrt(2.0)) - 1.0) < 0.01);
}

TEST_CASE("triangle sets") {
    CHECK(triangle_set(3).size() == 1);
    CHECK(triangle_set(12).size() == 55);
    CHECK(triangle_set(2).empty());

    const SiteTable s = eht();
    const auto g = uv_coverage(s, Target::sgr_a(), Schedule::uniform());
    bool anchor_moved = false;
    for (std::size_t t = 0; t < 24; ++t) {
        std::size_t first = 12, count = 0;
        for (std::size_t p = 0; p < 12; ++p)
            if (g.site_visible(t, p)) {
                first = std::min(first, p);
                ++count;
            }
        const auto tri = triangle_set(g, t);
        CHECK(tri.size() == (count >= 3 ? (count - 1) * (count - 2) / 2 : 0));
        for (const auto& x : tri) CHECK(x.p == first);
        anchor_moved |= count >= 3 && first != 0;
    }
    CHECK(anchor_moved);
}

TEST_CASE("closure phases") {
    const SiteTable s = eht();
    const auto g = uv_coverage(s, Target::sgr_a(), Schedule::uniform());
    std::mt19937_64 rng(13);
    const auto point = corrupt(dft_visibility(point_source(32), g), g, s, NoiseConfig::from_case(1), rng);
    for (double c : to_amp_closure(point, g).closure) CHECK(std::abs(c) < 1e-12);

    const Image img = random_image(rng);
    const auto ideal = dft_visibility(img, g);
    const auto clean = corrupt(ideal, g, s, NoiseConfig::from_case(1), rng);
    const auto noisy = corrupt(ideal, g, s, NoiseConfig::from_case(4), rng);
    std::vector<Triangle> tris;
    for (std::size_t t = 0; t < 24; ++t)
        for (const auto& x : triangle_set(g, t)) tris.push_back(x);
    const auto a = closure_phases(clean, g, tris);
    const auto b = closure_phases(noisy, g, tris);
    REQUIRE(a.phases.size() == b.phases.size());
    for (std::size_t i = 0; i < a.phases.size(); ++i) {
        CHECK(std::abs(wrap_angle(a.phases[i] - b.phases[i])) < 1e-10);
        const auto& x = a.triangles[i];
        const std::size_t nb = g.baseline_count();
        auto vis = [&](std::size_t p, std::size_t q) {
            const Complex z = ideal[x.t * nb + g.baseline_index(p, q)];
            return p < q ? z : std::conj(z);
        };
        const double direct = wrap_angle(std::arg(vis(x.p, x.q)) + std::arg(vis(x.q, x.b)) + std::arg(vis(x.b, x.p)));
        CHECK(std::abs(wrap_angle(a.phases[i] - direct)) < 1e-12);
        CHECK(a.phases[i] > -std::numbers::pi);
        CHECK(a.phases[i] <= std::numbers::pi);
    }
}

TEST_CASE("masking") {
    const SiteTable s = eht();
    const auto g = uv_coverage(s, Target::sgr_a(), Schedule::uniform());
    std::mt19937_64 rng(19);
    const auto set = corrupt(dft_visibility(random_image(rng), g), g, s, NoiseConfig::from_case(1), rng);

    std::vector<double> ones(12, 1.0);
    const auto same = apply_mask(ones, set, g);
    CHECK(same.visibilities == set.visibilities);

    std::vector<double> m(12, 1.0);
    m[0] = 0.5;
    m[1] = 0.5;
    m[2] = 0.0;
    const auto masked = apply_mask(m, set, g);
    const std::size_t nb = g.baseline_count();
    for (std::size_t t = 0; t < 24; ++t) {
        CHECK(masked.visibilities[t * nb + g.baseline_index(0, 1)] ==
              0.25 * set.visibilities[t * nb + g.baseline_index(0, 1)]);
        for (std::size_t q = 0; q < 12; ++q)
            if (q != 2) CHECK(masked.visibilities[t * nb + g.baseline_index(2, q)] == Complex(0, 0));
    }

    std::vector<double> binary(12, 1.0);
    binary[3] = binary[7] = 0.0;
    const auto once = apply_mask(binary, set, g);
    CHECK(apply_mask(binary, once, g).visibilities == once.visibilities);

    const auto amp = to_amp_closure(set, g);
    const auto amp_masked = apply_mask(m, amp, g);
    for (std::size_t i = 0; i < amp.triangles.size(); ++i) {
        const auto& x = amp.triangles[i];
        CHECK(amp_masked.closure_scale[i] == doctest::Approx(m[x.p] * m[x.q] * m[x.b]));
    }
}

TEST_CASE("packing") {
    const SiteTable s = eht();
    const auto g = uv_coverage(s, Target::sgr_a(), Schedule::uniform());
    std::mt19937_64 rng(29);
    const auto set = corrupt(dft_visibility(random_image(rng), g), g, s, NoiseConfig::from_case(1), rng);

    for (InputMode mode : {InputMode::Complex, InputMode::AmpClosure}) {
        const MeasurementLayout layout(g, mode);
        const auto base = mode == InputMode::Complex ? set : to_amp_closure(set, g);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (int i = 0; i < 100; ++i) {
            std::vector<double> m(12);
            for (double& v : m) v = u(rng);
            CHECK(measurement_vector(apply_mask(m, base, g), layout).size() == layout.length());
        }
        const auto zero = measurement_vector(apply_mask(std::vector<double>(12, 0.0), base, g), layout);
        for (double v : zero) CHECK(v == 0.0);

        std::vector<double> m(12);
        for (double& v : m) v = 0.2 + 0.8 * u(rng);
        const auto masked = apply_mask(m, base, g);
        const auto packed = measurement_vector(masked, layout);
        const auto back = unpack_measurements(packed, layout, g);
        if (mode == InputMode::Complex) {
            for (std::size_t i = 0; i < masked.visibilities.size(); ++i)
                CHECK(std::abs(back.visibilities[i] - masked.visibilities[i]) < 1e-15);
        } else {
            for (std::size_t i = 0; i < masked.amplitudes.size(); ++i)
                CHECK(back.amplitudes[i] == masked.amplitudes[i]);
            REQUIRE(back.closure.size() == masked.closure.size());
            for (std::size_t i = 0; i < masked.closure.size(); ++i) {
                CHECK(std::abs(wrap_angle(back.closure[i] - masked.closure[i])) < 1e-12);
                CHECK(back.closure_scale[i] == doctest::Approx(masked.closure_scale[i]).epsilon(1e-12));
            }
        }
    }
    CHECK(MeasurementLayout(g, InputMode::Complex).length() == 2 * 24 * 66);
    CHECK(MeasurementLayout(g, InputMode::AmpClosure).length() == 24 * 66 + 2 * 24 * 55);
}

TEST_CASE("noise presets") {
    CHECK(NoiseConfig::from_case(1).thermal == ThermalMode::None);
    CHECK_FALSE(NoiseConfig::from_case(1).atmospheric);
    CHECK(NoiseConfig::from_case(2).thermal == ThermalMode::Equal);
    CHECK(NoiseConfig::from_case(3).thermal == ThermalMode::SiteVarying);
    CHECK(NoiseConfig::from_case(4).atmospheric);
    CHECK(NoiseConfig::from_case(4).thermal == ThermalMode::None);
    CHECK(NoiseConfig::from_case(6).thermal == ThermalMode::SiteVarying);
    CHECK_THROWS_AS(NoiseConfig::from_case(7), std::invalid_argument);
}

TEST_CASE("targets") {
    CHECK(Target::sgr_a().dec_deg == -29.24);
    CHECK(Target::m87().dec_deg == 12.39);
    CHECK(Target::preset("M87").name == Target::m87().name);
    CHECK_THROWS_AS(Target::preset("vega"), std::invalid_argument);
    Target bad;
    bad.dec_deg = 91;
    CHECK_THROWS(bad.validate());
    Schedule s{{1.0, 0.5}, 10};
    CHECK_THROWS(s.validate());
}
