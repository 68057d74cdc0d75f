#include "codesign/vlbi.hpp"

#include "codesign/errors.hpp"
#include "csv.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace codesign {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kDeg = kPi / 180.0;

std::string lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

/// Geodetic latitude and longitude (radians) of an ECEF point.
std::array<double, 2> ecef_to_latlon(const std::array<double, 3>& r) {
    constexpr double a = 6378137.0;
    constexpr double f = 1.0 / 298.257223563;
    constexpr double e2 = f * (2.0 - f);
    const double p = std::hypot(r[0], r[1]);
    const double lon = std::atan2(r[1], r[0]);
    double lat = std::atan2(r[2], p * (1.0 - e2));
    for (int i = 0; i < 8; ++i) {
        const double s = std::sin(lat);
        const double n = a / std::sqrt(1.0 - e2 * s * s);
        lat = std::atan2(r[2] + e2 * n * s, p);
    }
    return {lat, lon};
}

}  // namespace

// --- sites -------------------------------------------------------------------

SiteTable::SiteTable(std::vector<Site> sites) : sites_(std::move(sites)) {
    std::unordered_set<std::string> seen;
    for (const auto& s : sites_) {
        if (!seen.insert(s.name).second) throw std::invalid_argument("duplicate site name " + s.name);
        if (!(s.sefd > 0)) throw std::invalid_argument("site " + s.name + " needs a positive SEFD");
    }
}

std::vector<std::string> SiteTable::names() const {
    std::vector<std::string> out;
    for (const auto& s : sites_) out.push_back(s.name);
    return out;
}

std::optional<std::size_t> SiteTable::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < sites_.size(); ++i)
        if (sites_[i].name == name) return i;
    return std::nullopt;
}

double SiteTable::mean_sefd() const {
    if (sites_.empty()) throw std::invalid_argument("empty site table");
    double total = 0.0;
    for (const auto& s : sites_) total += s.sefd;
    return total / static_cast<double>(sites_.size());
}

std::array<double, 3> geodetic_to_ecef(double lat_deg, double lon_deg, double height_m) {
    constexpr double a = 6378137.0;
    constexpr double f = 1.0 / 298.257223563;
    constexpr double e2 = f * (2.0 - f);
    const double lat = lat_deg * kDeg, lon = lon_deg * kDeg;
    const double n = a / std::sqrt(1.0 - e2 * std::sin(lat) * std::sin(lat));
    return {(n + height_m) * std::cos(lat) * std::cos(lon), (n + height_m) * std::cos(lat) * std::sin(lon),
            (n * (1.0 - e2) + height_m) * std::sin(lat)};
}

SiteTable parse_sites(std::istream& in, const std::string& source) {
    std::vector<Site> sites;
    std::unordered_set<std::string> seen;
    bool geodetic = false;
    std::string line;
    std::size_t no = 0;
    while (std::getline(in, line)) {
        ++no;
        const std::string t = csv::trim(line);
        if (t.empty()) continue;
        if (t.front() == '#') {
            std::string body = csv::trim(t.substr(1));
            if (lower(body.substr(0, 7)) == "format:") {
                const std::string fmt = lower(csv::trim(body.substr(7)));
                if (fmt == "geodetic") geodetic = true;
                else if (fmt == "xyz" || fmt == "ecef") geodetic = false;
                else throw ParseError(source, no, "unknown site format '" + fmt + "'");
            }
            continue;
        }
        std::istringstream fields(t);
        std::vector<std::string> tok;
        for (std::string s; fields >> s;) {
            if (s.front() == '#') break;
            tok.push_back(s);
        }
        if (tok.size() < 5) throw ParseError(source, no, "expected NAME and four numbers (missing SEFD?)");
        if (tok.size() > 5) throw ParseError(source, no, "trailing fields after SEFD");
        double v[4];
        for (int i = 0; i < 4; ++i) v[i] = csv::parse_double(tok[static_cast<std::size_t>(i) + 1], source, no);
        if (!seen.insert(tok[0]).second) throw ParseError(source, no, "duplicate site name " + tok[0]);
        if (!(v[3] > 0)) throw ParseError(source, no, "SEFD must be positive");
        std::array<double, 3> pos{v[0], v[1], v[2]};
        if (geodetic) {
            if (std::abs(v[0]) > 90.0 || std::abs(v[1]) > 360.0) throw ParseError(source, no, "latitude/longitude out of range");
            pos = geodetic_to_ecef(v[0], v[1], v[2]);
        } else if (!std::isfinite(v[0]) || !std::isfinite(v[1]) || !std::isfinite(v[2])) {
            throw ParseError(source, no, "non-finite coordinate");
        }
        sites.push_back({tok[0], pos, v[3]});
    }
    if (sites.empty()) throw ParseError(source, no, "no sites defined");
    return SiteTable(std::move(sites));
}

SiteTable load_sites(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open site file " + path);
    return parse_sites(in, path);
}

// --- targets and schedules ---------------------------------------------------

void Target::validate() const {
    if (!(dec_deg >= -90.0 && dec_deg <= 90.0)) throw std::invalid_argument("declination must lie in [-90, 90]");
    if (!(frequency_hz > 0)) throw std::invalid_argument("observing frequency must be positive");
}

Target Target::sgr_a() { return {"SgrA*", 17.7611, -29.24, 230e9}; }
Target Target::m87() { return {"M87", 12.5137, 12.39, 230e9}; }

Target Target::preset(const std::string& name) {
    const std::string n = lower(name);
    if (n == "sgra" || n == "sgra*" || n == "sgr_a") return sgr_a();
    if (n == "m87") return m87();
    throw std::invalid_argument("unknown target '" + name + "' (expected sgra or m87)");
}

void Schedule::validate() const {
    if (gst_hours.empty()) throw std::invalid_argument("schedule has no timestamps");
    for (std::size_t i = 1; i < gst_hours.size(); ++i)
        if (!(gst_hours[i] > gst_hours[i - 1])) throw std::invalid_argument("timestamps must be strictly increasing");
    if (!(min_elevation_deg >= -90.0 && min_elevation_deg <= 90.0)) throw std::invalid_argument("bad elevation cut");
}

Schedule Schedule::uniform(std::size_t count, double min_elevation_deg) {
    Schedule s;
    s.min_elevation_deg = min_elevation_deg;
    for (std::size_t i = 0; i < count; ++i) s.gst_hours.push_back(24.0 * static_cast<double>(i) / static_cast<double>(count));
    return s;
}

// --- geometry ----------------------------------------------------------------

ObservationGeometry::ObservationGeometry(std::size_t sites, std::size_t times)
    : sites_(sites), times_(times), pair_index_(sites * sites, static_cast<std::size_t>(-1)) {
    for (std::size_t p = 0; p < sites; ++p) {
        for (std::size_t q = p + 1; q < sites; ++q) {
            pair_index_[p * sites + q] = pair_index_[q * sites + p] = baselines_.size();
            baselines_.push_back({p, q});
        }
    }
    u_.assign(times * baselines_.size(), 0.0);
    v_.assign(times * baselines_.size(), 0.0);
    elevation_.assign(times * sites, 0.0);
    site_visible_.assign(times * sites, 0);
}

std::size_t ObservationGeometry::baseline_index(std::size_t p, std::size_t q) const {
    if (p >= sites_ || q >= sites_ || p == q) throw std::out_of_range("invalid site pair");
    return pair_index_[p * sites_ + q];
}

std::array<double, 2> ObservationGeometry::uv(std::size_t t, std::size_t p, std::size_t q) const {
    const std::size_t k = t * baselines_.size() + baseline_index(p, q);
    const double sign = p < q ? 1.0 : -1.0;
    return {sign * u_[k], sign * v_[k]};
}

bool ObservationGeometry::visible(std::size_t t, std::size_t p, std::size_t q) const {
    return p != q && site_visible(t, p) && site_visible(t, q);
}

std::size_t ObservationGeometry::visible_count() const {
    std::size_t n = 0;
    for (std::size_t t = 0; t < times_; ++t)
        for (const auto& b : baselines_) n += visible(t, b.p, b.q);
    return n;
}

void ObservationGeometry::set_site(std::size_t t, std::size_t p, double elevation_deg, bool visible) {
    elevation_[t * sites_ + p] = elevation_deg;
    site_visible_[t * sites_ + p] = visible;
}

void ObservationGeometry::set_uv(std::size_t t, std::size_t baseline, double u, double v) {
    u_[t * baselines_.size() + baseline] = u;
    v_[t * baselines_.size() + baseline] = v;
}

ObservationGeometry uv_coverage(const SiteTable& sites, const Target& target, const Schedule& schedule) {
    target.validate();
    schedule.validate();
    ObservationGeometry geo(sites.size(), schedule.gst_hours.size());
    const double dec = target.dec_deg * kDeg;
    const double lambda = target.wavelength_m();
    std::vector<std::array<double, 3>> up(sites.size());
    for (std::size_t p = 0; p < sites.size(); ++p) {
        const auto [lat, lon] = ecef_to_latlon(sites[p].position);
        up[p] = {std::cos(lat) * std::cos(lon), std::cos(lat) * std::sin(lon), std::sin(lat)};
    }
    for (std::size_t t = 0; t < geo.times(); ++t) {
        // Greenwich hour angle of the source.
        const double h = (schedule.gst_hours[t] - target.ra_hours) * 15.0 * kDeg;
        const double sh = std::sin(h), ch = std::cos(h), sd = std::sin(dec), cd = std::cos(dec);
        const std::array<double, 3> s{cd * ch, -cd * sh, sd};
        for (std::size_t p = 0; p < sites.size(); ++p) {
            const double el = std::asin(std::clamp(s[0] * up[p][0] + s[1] * up[p][1] + s[2] * up[p][2], -1.0, 1.0)) / kDeg;
            geo.set_site(t, p, el, el > schedule.min_elevation_deg);
        }
        for (std::size_t k = 0; k < geo.baseline_count(); ++k) {
            const auto [p, q] = geo.baselines()[k];
            const auto& rp = sites[p].position;
            const auto& rq = sites[q].position;
            const double bx = rq[0] - rp[0], by = rq[1] - rp[1], bz = rq[2] - rp[2];
            const double u = sh * bx + ch * by;
            const double v = -sd * ch * bx + sd * sh * by + cd * bz;
            geo.set_uv(t, k, u / lambda, v / lambda);
        }
    }
    return geo;
}

// --- Fourier transform -------------------------------------------------------

Complex dft_at(const Image& image, double u, double v) {
    Complex acc = 0.0;
    for (std::size_t r = 0; r < image.size; ++r) {
        const double m = image.m_of(r);
        for (std::size_t c = 0; c < image.size; ++c) {
            const double z = image.at(r, c);
            if (z == 0.0) continue;
            const double arg = -2.0 * kPi * (u * image.l_of(c) + v * m);
            acc += z * Complex(std::cos(arg), std::sin(arg));
        }
    }
    return acc;
}

std::vector<Complex> dft_visibility(const Image& image, const ObservationGeometry& geometry) {
    std::vector<Complex> out;
    out.reserve(geometry.times() * geometry.baseline_count());
    for (std::size_t t = 0; t < geometry.times(); ++t) {
        for (const auto& b : geometry.baselines()) {
            const auto [u, v] = geometry.uv(t, b.p, b.q);
            out.push_back(dft_at(image, u, v));
        }
    }
    return out;
}

DftOperator::DftOperator(const ObservationGeometry& geometry, std::size_t image_size, double fov_uas)
    : slots_(geometry.times() * geometry.baseline_count()), image_size_(image_size) {
    for (std::size_t t = 0; t < geometry.times(); ++t)
        for (std::size_t k = 0; k < geometry.baseline_count(); ++k) {
            const auto& b = geometry.baselines()[k];
            if (geometry.visible(t, b.p, b.q)) entries_.push_back(t * geometry.baseline_count() + k);
        }
    const Image grid(image_size, fov_uas);
    const std::size_t npix = image_size * image_size;
    matrix_.resize(static_cast<Eigen::Index>(2 * entries_.size()), static_cast<Eigen::Index>(npix));
    for (std::size_t e = 0; e < entries_.size(); ++e) {
        const std::size_t t = entries_[e] / geometry.baseline_count();
        const auto& b = geometry.baselines()[entries_[e] % geometry.baseline_count()];
        const auto [u, v] = geometry.uv(t, b.p, b.q);
        for (std::size_t r = 0; r < image_size; ++r) {
            for (std::size_t c = 0; c < image_size; ++c) {
                const double arg = -2.0 * kPi * (u * grid.l_of(c) + v * grid.m_of(r));
                const auto col = static_cast<Eigen::Index>(r * image_size + c);
                matrix_(static_cast<Eigen::Index>(2 * e), col) = std::cos(arg);
                matrix_(static_cast<Eigen::Index>(2 * e + 1), col) = std::sin(arg);
            }
        }
    }
}

std::vector<Complex> DftOperator::apply(const Image& image) const {
    if (image.size != image_size_) throw std::invalid_argument("DftOperator: image size mismatch");
    const Eigen::Map<const Eigen::VectorXd> z(image.pixels.data(), static_cast<Eigen::Index>(image.pixels.size()));
    const Eigen::VectorXd y = matrix_ * z;
    std::vector<Complex> out(slots_, Complex(0.0, 0.0));
    for (std::size_t e = 0; e < entries_.size(); ++e)
        out[entries_[e]] = Complex(y(static_cast<Eigen::Index>(2 * e)), y(static_cast<Eigen::Index>(2 * e + 1)));
    return out;
}

// --- noise -----------------------------------------------------------------

NoiseConfig NoiseConfig::from_case(int noise_case, double eta) {
    NoiseConfig n;
    switch (noise_case) {
        case 1: break;
        case 2: n.thermal = ThermalMode::Equal; break;
        case 3: n.thermal = ThermalMode::SiteVarying; break;
        case 4: n.atmospheric = true; break;
        case 5: n.atmospheric = true; n.thermal = ThermalMode::Equal; break;
        case 6: n.atmospheric = true; n.thermal = ThermalMode::SiteVarying; break;
        default: throw std::invalid_argument("noise case must be 1..6");
    }
    if (n.thermal != ThermalMode::None) n.eta = eta;
    return n;
}

void NoiseConfig::validate() const {
    if (!(eta >= 0) || !std::isfinite(eta)) throw std::invalid_argument("thermal scale eta must be >= 0");
}

ThermalMode parse_thermal_mode(const std::string& text) {
    const std::string t = lower(text);
    if (t == "none") return ThermalMode::None;
    if (t == "equal") return ThermalMode::Equal;
    if (t == "site" || t == "site-varying" || t == "site_varying") return ThermalMode::SiteVarying;
    throw std::invalid_argument("unknown thermal mode '" + text + "'");
}

std::string to_string(ThermalMode mode) {
    switch (mode) {
        case ThermalMode::None: return "none";
        case ThermalMode::Equal: return "equal";
        case ThermalMode::SiteVarying: return "site-varying";
    }
    return "none";
}

double thermal_sigma(double sefd_p, double sefd_q, double eta) {
    if (!(sefd_p > 0) || !(sefd_q > 0)) throw std::invalid_argument("SEFDs must be positive");
    return eta * std::sqrt(sefd_p * sefd_q);
}

std::vector<double> baseline_sigmas(const SiteTable& sites, const ObservationGeometry& geometry,
                                    const NoiseConfig& noise) {
    noise.validate();
    std::vector<double> out(geometry.baseline_count(), 0.0);
    if (noise.thermal == ThermalMode::None) return out;
    const double mean = sites.mean_sefd();
    for (std::size_t k = 0; k < out.size(); ++k) {
        const auto& b = geometry.baselines()[k];
        out[k] = noise.thermal == ThermalMode::Equal ? thermal_sigma(mean, mean, noise.eta)
                                                     : thermal_sigma(sites[b.p].sefd, sites[b.q].sefd, noise.eta);
    }
    return out;
}

// --- measurement sets --------------------------------------------------------

MeasurementSet corrupt(const std::vector<Complex>& ideal, const ObservationGeometry& geometry,
                       const SiteTable& sites, const NoiseConfig& noise, std::mt19937_64& rng) {
    const std::size_t nb = geometry.baseline_count();
    if (ideal.size() != geometry.times() * nb || sites.size() != geometry.sites()) {
        throw std::invalid_argument("corrupt: visibilities, geometry and sites are not aligned");
    }
    MeasurementSet ms;
    ms.form = MeasurementSet::Form::Complex;
    ms.times = geometry.times();
    ms.sites = geometry.sites();
    ms.sigma = baseline_sigmas(sites, geometry, noise);
    ms.site_phase.assign(ms.times * ms.sites, 0.0);
    if (noise.atmospheric) {
        std::uniform_real_distribution<double> phase(0.0, 2.0 * kPi);
        for (double& p : ms.site_phase) p = phase(rng);
    }
    ms.visibilities.assign(ideal.size(), Complex(0.0, 0.0));
    ms.visible.assign(ideal.size(), 0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (std::size_t t = 0; t < ms.times; ++t) {
        for (std::size_t k = 0; k < nb; ++k) {
            const auto& b = geometry.baselines()[k];
            if (!geometry.visible(t, b.p, b.q)) continue;
            const std::size_t i = t * nb + k;
            ms.visible[i] = 1;
            const double dphi = ms.site_phase[t * ms.sites + b.p] - ms.site_phase[t * ms.sites + b.q];
            Complex v = std::polar(1.0, -dphi) * ideal[i];
            if (ms.sigma[k] > 0) {
                const double s = ms.sigma[k] / std::sqrt(2.0);
                const double re = gauss(rng), im = gauss(rng);
                v += Complex(s * re, s * im);
            }
            ms.visibilities[i] = v;
        }
    }
    return ms;
}

std::vector<Triangle> triangle_set(std::size_t k) {
    std::vector<Triangle> out;
    if (k < 3) return out;
    for (std::size_t q = 1; q < k; ++q)
        for (std::size_t b = q + 1; b < k; ++b) out.push_back({0, 0, q, b});
    return out;
}

std::vector<Triangle> triangle_set(const ObservationGeometry& geometry, std::size_t t) {
    std::vector<std::size_t> vis;
    for (std::size_t p = 0; p < geometry.sites(); ++p)
        if (geometry.site_visible(t, p)) vis.push_back(p);
    std::vector<Triangle> out;
    for (const auto& tri : triangle_set(vis.size())) out.push_back({t, vis[tri.p], vis[tri.q], vis[tri.b]});
    return out;
}

double wrap_angle(double a) {
    double w = std::remainder(a, 2.0 * kPi);
    if (w <= -kPi) w += 2.0 * kPi;
    return w;
}

namespace {

Complex oriented(const MeasurementSet& ms, const ObservationGeometry& g, std::size_t t, std::size_t i, std::size_t j) {
    const Complex v = ms.visibilities[t * g.baseline_count() + g.baseline_index(i, j)];
    return i < j ? v : std::conj(v);
}

bool present(const MeasurementSet& ms, const ObservationGeometry& g, std::size_t t, std::size_t i, std::size_t j) {
    return ms.visible[t * g.baseline_count() + g.baseline_index(i, j)] != 0;
}

}  // namespace

ClosureResult closure_phases(const MeasurementSet& complex_set, const ObservationGeometry& geometry,
                             const std::vector<Triangle>& triangles) {
    if (complex_set.form != MeasurementSet::Form::Complex) {
        throw std::invalid_argument("closure phases need complex visibilities");
    }
    ClosureResult out;
    for (const auto& tri : triangles) {
        const auto [t, p, q, b] = tri;
        if (!present(complex_set, geometry, t, p, q) || !present(complex_set, geometry, t, q, b) ||
            !present(complex_set, geometry, t, b, p)) {
            continue;
        }
        const Complex prod = oriented(complex_set, geometry, t, p, q) * oriented(complex_set, geometry, t, q, b) *
                             oriented(complex_set, geometry, t, b, p);
        out.triangles.push_back(tri);
        out.phases.push_back(wrap_angle(std::arg(prod)));
    }
    return out;
}

MeasurementSet to_amp_closure(const MeasurementSet& complex_set, const ObservationGeometry& geometry) {
    if (complex_set.form != MeasurementSet::Form::Complex) throw std::invalid_argument("expected a complex set");
    MeasurementSet ms = complex_set;
    ms.form = MeasurementSet::Form::AmpClosure;
    ms.amplitudes.resize(ms.visibilities.size());
    for (std::size_t i = 0; i < ms.visibilities.size(); ++i) ms.amplitudes[i] = std::abs(ms.visibilities[i]);
    std::vector<Triangle> all;
    for (std::size_t t = 0; t < geometry.times(); ++t) {
        const auto tris = triangle_set(geometry, t);
        all.insert(all.end(), tris.begin(), tris.end());
    }
    auto cp = closure_phases(complex_set, geometry, all);
    ms.triangles = std::move(cp.triangles);
    ms.closure = std::move(cp.phases);
    ms.closure_scale.assign(ms.closure.size(), 1.0);
    ms.visibilities.clear();
    return ms;
}

MeasurementSet apply_mask(std::span<const double> mask, const MeasurementSet& set, const ObservationGeometry& geometry) {
    if (mask.size() != geometry.sites()) throw std::invalid_argument("mask length must equal the site count");
    MeasurementSet ms = set;
    const std::size_t nb = geometry.baseline_count();
    for (std::size_t t = 0; t < ms.times; ++t) {
        for (std::size_t k = 0; k < nb; ++k) {
            const auto& b = geometry.baselines()[k];
            const double s = mask[b.p] * mask[b.q];
            if (!ms.visibilities.empty()) ms.visibilities[t * nb + k] *= s;
            if (!ms.amplitudes.empty()) ms.amplitudes[t * nb + k] *= s;
        }
    }
    for (std::size_t i = 0; i < ms.triangles.size(); ++i) {
        const auto& tri = ms.triangles[i];
        ms.closure_scale[i] *= mask[tri.p] * mask[tri.q] * mask[tri.b];
    }
    return ms;
}

InputMode parse_input_mode(const std::string& text) {
    const std::string t = lower(text);
    if (t == "complex" || t == "a") return InputMode::Complex;
    if (t == "amp_closure" || t == "amp+closure" || t == "b") return InputMode::AmpClosure;
    throw std::invalid_argument("unknown input mode '" + text + "'");
}

MeasurementLayout::MeasurementLayout(const ObservationGeometry& geometry, InputMode mode)
    : mode_(mode), times_(geometry.times()), sites_(geometry.sites()), baselines_(geometry.baseline_count()) {
    auto push = [&](std::size_t a, std::size_t b, std::size_t c, bool used) {
        first_.push_back(a);
        second_.push_back(b);
        third_.push_back(c);
        used_.push_back(used);
    };
    for (std::size_t t = 0; t < times_; ++t) {
        for (const auto& b : geometry.baselines()) {
            const bool vis = geometry.visible(t, b.p, b.q);
            push(b.p, b.q, kNoSite, vis);
            if (mode == InputMode::Complex) push(b.p, b.q, kNoSite, vis);
        }
    }
    if (mode == InputMode::Complex) return;
    per_time_ = sites_ >= 3 ? (sites_ - 1) * (sites_ - 2) / 2 : 0;
    for (std::size_t t = 0; t < times_; ++t) {
        const auto tris = triangle_set(geometry, t);
        for (std::size_t s = 0; s < per_time_; ++s) {
            if (s < tris.size()) {
                closure_slots_.push_back(tris[s]);
                push(tris[s].p, tris[s].q, tris[s].b, true);
                push(tris[s].p, tris[s].q, tris[s].b, true);
            } else {
                closure_slots_.push_back(std::nullopt);
                push(0, 0, 0, false);
                push(0, 0, 0, false);
            }
        }
    }
}

namespace {

std::size_t triangle_key(const Triangle& tri, std::size_t k) { return ((tri.t * k + tri.p) * k + tri.q) * k + tri.b; }

}  // namespace

std::vector<double> measurement_vector(const MeasurementSet& set, const MeasurementLayout& layout) {
    const std::size_t nvis = layout.times() * layout.baseline_count();
    std::vector<double> out(layout.length(), 0.0);
    if (layout.mode() == InputMode::Complex) {
        if (set.form != MeasurementSet::Form::Complex || set.visibilities.size() != nvis) {
            throw std::invalid_argument("measurement_vector: complex layout needs a complex set of matching size");
        }
        for (std::size_t i = 0; i < nvis; ++i) {
            if (!layout.used(2 * i)) continue;
            out[2 * i] = set.visibilities[i].real();
            out[2 * i + 1] = set.visibilities[i].imag();
        }
        return out;
    }
    if (set.form != MeasurementSet::Form::AmpClosure || set.amplitudes.size() != nvis) {
        throw std::invalid_argument("measurement_vector: amp+closure layout needs an amp+closure set of matching size");
    }
    for (std::size_t i = 0; i < nvis; ++i)
        if (layout.used(i)) out[i] = set.amplitudes[i];
    std::unordered_map<std::size_t, std::size_t> where;
    for (std::size_t i = 0; i < set.triangles.size(); ++i) where[triangle_key(set.triangles[i], layout.sites())] = i;
    const auto& slots = layout.closure_slots();
    for (std::size_t s = 0; s < slots.size(); ++s) {
        if (!slots[s]) continue;
        const auto it = where.find(triangle_key(*slots[s], layout.sites()));
        if (it == where.end()) continue;
        const double scale = set.closure_scale[it->second];
        out[nvis + 2 * s] = scale * std::cos(set.closure[it->second]);
        out[nvis + 2 * s + 1] = scale * std::sin(set.closure[it->second]);
    }
    return out;
}

MeasurementSet unpack_measurements(std::span<const double> packed, const MeasurementLayout& layout,
                                   const ObservationGeometry& geometry) {
    if (packed.size() != layout.length()) throw std::invalid_argument("unpack_measurements: length mismatch");
    const std::size_t nvis = layout.times() * layout.baseline_count();
    MeasurementSet ms;
    ms.times = layout.times();
    ms.sites = layout.sites();
    ms.visible.assign(nvis, 0);
    for (std::size_t t = 0; t < ms.times; ++t)
        for (std::size_t k = 0; k < layout.baseline_count(); ++k) {
            const auto& b = geometry.baselines()[k];
            ms.visible[t * layout.baseline_count() + k] = geometry.visible(t, b.p, b.q);
        }
    if (layout.mode() == InputMode::Complex) {
        ms.form = MeasurementSet::Form::Complex;
        ms.visibilities.resize(nvis);
        for (std::size_t i = 0; i < nvis; ++i) ms.visibilities[i] = Complex(packed[2 * i], packed[2 * i + 1]);
        return ms;
    }
    ms.form = MeasurementSet::Form::AmpClosure;
    ms.amplitudes.assign(packed.begin(), packed.begin() + static_cast<std::ptrdiff_t>(nvis));
    const auto& slots = layout.closure_slots();
    for (std::size_t s = 0; s < slots.size(); ++s) {
        if (!slots[s]) continue;
        const double c = packed[nvis + 2 * s], sn = packed[nvis + 2 * s + 1];
        ms.triangles.push_back(*slots[s]);
        const double scale = std::hypot(c, sn);
        ms.closure.push_back(scale > 0 ? wrap_angle(std::atan2(sn, c)) : 0.0);
        ms.closure_scale.push_back(scale);
    }
    return ms;
}

std::vector<double> simulate_packed(const Image& image, const DftOperator& dft, const ObservationGeometry& geometry,
                                    const MeasurementLayout& layout, const SiteTable& sites, const NoiseConfig& noise,
                                    std::mt19937_64& rng) {
    MeasurementSet ms = corrupt(dft.apply(image), geometry, sites, noise, rng);
    if (layout.mode() == InputMode::AmpClosure) ms = to_amp_closure(ms, geometry);
    return measurement_vector(ms, layout);
}

// --- export ----------------------------------------------------------------

namespace {

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    return out;
}

}  // namespace

void write_uv_csv(const std::string& path, const ObservationGeometry& geometry, const Schedule& schedule,
                  const SiteTable& sites) {
    auto out = open_out(path);
    csv::write_row(out, std::vector<std::string>{"time_h", "p", "q", "u", "v", "elevation_p", "elevation_q"});
    for (std::size_t t = 0; t < geometry.times(); ++t)
        for (const auto& b : geometry.baselines()) {
            if (!geometry.visible(t, b.p, b.q)) continue;
            const auto [u, v] = geometry.uv(t, b.p, b.q);
            csv::write_row(out, std::vector<std::string>{
                                    csv::format_double(schedule.gst_hours[t]), sites[b.p].name, sites[b.q].name,
                                    csv::format_double(u), csv::format_double(v),
                                    csv::format_double(geometry.elevation_deg(t, b.p)),
                                    csv::format_double(geometry.elevation_deg(t, b.q))});
        }
}

void write_measurements_csv(const std::string& path, const MeasurementSet& set, const ObservationGeometry& geometry,
                            const Schedule& schedule, const SiteTable& sites) {
    auto out = open_out(path);
    const bool cplx = set.form == MeasurementSet::Form::Complex;
    if (cplx) csv::write_row(out, std::vector<std::string>{"time_h", "p", "q", "re", "im", "amp", "phase", "sigma"});
    else csv::write_row(out, std::vector<std::string>{"time_h", "p", "q", "amp", "sigma"});
    const std::size_t nb = geometry.baseline_count();
    for (std::size_t t = 0; t < set.times; ++t)
        for (std::size_t k = 0; k < nb; ++k) {
            if (!set.visible[t * nb + k]) continue;
            const auto& b = geometry.baselines()[k];
            std::vector<std::string> row{csv::format_double(schedule.gst_hours[t]), sites[b.p].name, sites[b.q].name};
            if (cplx) {
                const Complex v = set.visibilities[t * nb + k];
                for (double x : {v.real(), v.imag(), std::abs(v), std::arg(v)}) row.push_back(csv::format_double(x));
            } else {
                row.push_back(csv::format_double(set.amplitudes[t * nb + k]));
            }
            row.push_back(csv::format_double(set.sigma.empty() ? 0.0 : set.sigma[k]));
            csv::write_row(out, row);
        }
}

void write_closure_csv(const std::string& path, const MeasurementSet& set, const Schedule& schedule,
                       const SiteTable& sites) {
    auto out = open_out(path);
    csv::write_row(out, std::vector<std::string>{"time_h", "p", "q", "b", "closure_phase"});
    for (std::size_t i = 0; i < set.triangles.size(); ++i) {
        const auto& tri = set.triangles[i];
        csv::write_row(out, std::vector<std::string>{csv::format_double(schedule.gst_hours[tri.t]), sites[tri.p].name,
                                                     sites[tri.q].name, sites[tri.b].name,
                                                     csv::format_double(set.closure[i])});
    }
}

}  // namespace codesign
