#pragma once

// VLBI forward model: telescope sites, Earth-rotation uv coverage, the image
// Fourier transform, thermal and atmospheric corruption, closure phases and
// the fixed-slot packing consumed by the reconstruction networks.

#include "codesign/image.hpp"

#include <Eigen/Core>

#include <array>
#include <complex>
#include <cstddef>
#include <istream>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace codesign {

using Complex = std::complex<double>;

inline constexpr double kSpeedOfLight = 299792458.0;
/// SEFD assumed for proposed telescopes without a measured value.
inline constexpr double kProposedSiteSefd = 10000.0;

struct Site {
    std::string name;
    std::array<double, 3> position;  ///< geocentric metres
    double sefd;                     ///< Jansky
};

class SiteTable {
public:
    SiteTable() = default;
    explicit SiteTable(std::vector<Site> sites);

    std::size_t size() const noexcept { return sites_.size(); }
    const Site& operator[](std::size_t i) const { return sites_.at(i); }
    const std::vector<Site>& sites() const noexcept { return sites_; }
    std::vector<std::string> names() const;
    std::optional<std::size_t> index_of(const std::string& name) const;
    double mean_sefd() const;

private:
    std::vector<Site> sites_;
};

/// WGS84 geodetic latitude/longitude (degrees) and height (metres) to ECEF.
std::array<double, 3> geodetic_to_ecef(double lat_deg, double lon_deg, double height_m);

/// Parses `NAME X Y Z SEFD` lines, or `NAME lat lon elev SEFD` after a
/// `#format: geodetic` header. Errors are ParseError with the line number.
SiteTable parse_sites(std::istream& in, const std::string& source = "<stream>");
SiteTable load_sites(const std::string& path);

struct Target {
    std::string name = "target";
    double ra_hours = 0.0;
    double dec_deg = 0.0;
    double frequency_hz = 230e9;

    double wavelength_m() const { return kSpeedOfLight / frequency_hz; }
    void validate() const;

    static Target sgr_a();
    static Target m87();
    /// "sgra" / "m87" (case-insensitive); throws std::invalid_argument otherwise.
    static Target preset(const std::string& name);
};

struct Schedule {
    std::vector<double> gst_hours;  ///< Greenwich sidereal times, strictly increasing
    double min_elevation_deg = 10.0;

    void validate() const;
    /// `count` timestamps evenly spaced over one sidereal day starting at 0h.
    static Schedule uniform(std::size_t count = 24, double min_elevation_deg = 10.0);
};

struct Baseline {
    std::size_t p, q;  ///< p < q
};

/// uv coordinates and visibility flags for every timestamp and site pair.
class ObservationGeometry {
public:
    ObservationGeometry(std::size_t sites, std::size_t times);

    std::size_t sites() const noexcept { return sites_; }
    std::size_t times() const noexcept { return times_; }
    const std::vector<Baseline>& baselines() const noexcept { return baselines_; }
    std::size_t baseline_count() const noexcept { return baselines_.size(); }
    /// Index of the unordered pair {p, q} in baselines(); p != q.
    std::size_t baseline_index(std::size_t p, std::size_t q) const;

    /// (u, v) in wavelengths for the ordered pair (p, q); (q, p) is the negation.
    std::array<double, 2> uv(std::size_t t, std::size_t p, std::size_t q) const;
    bool visible(std::size_t t, std::size_t p, std::size_t q) const;
    bool site_visible(std::size_t t, std::size_t p) const { return site_visible_[t * sites_ + p] != 0; }
    double elevation_deg(std::size_t t, std::size_t p) const { return elevation_[t * sites_ + p]; }
    /// Number of visible (t, pair) entries.
    std::size_t visible_count() const;

    void set_site(std::size_t t, std::size_t p, double elevation_deg, bool visible);
    void set_uv(std::size_t t, std::size_t baseline, double u, double v);

private:
    std::size_t sites_, times_;
    std::vector<Baseline> baselines_;
    std::vector<std::size_t> pair_index_;
    std::vector<double> u_, v_, elevation_;
    std::vector<unsigned char> site_visible_;
};

ObservationGeometry uv_coverage(const SiteTable& sites, const Target& target, const Schedule& schedule);

/// V(u, v) = sum_pixels z(l, m) exp(-2 pi i (u l + v m)).
Complex dft_at(const Image& image, double u, double v);
/// Ideal visibilities for every (t, baseline), row-major over (t, baseline).
std::vector<Complex> dft_visibility(const Image& image, const ObservationGeometry& geometry);

/// Real DFT operator restricted to the visible (t, baseline) entries:
/// rows 2k and 2k+1 hold Re and Im of entry k. Applied to images as columns.
class DftOperator {
public:
    DftOperator(const ObservationGeometry& geometry, std::size_t image_size = 32, double fov_uas = 100.0);

    const Eigen::MatrixXd& matrix() const noexcept { return matrix_; }
    /// (t, baseline) slot of each visible entry.
    const std::vector<std::size_t>& entries() const noexcept { return entries_; }
    std::size_t slot_count() const noexcept { return slots_; }
    std::size_t image_size() const noexcept { return image_size_; }
    /// Full (t, baseline) vector with zeros at invisible slots.
    std::vector<Complex> apply(const Image& image) const;

private:
    Eigen::MatrixXd matrix_;
    std::vector<std::size_t> entries_;
    std::size_t slots_;
    std::size_t image_size_;
};

// --- noise -----------------------------------------------------------------

enum class ThermalMode { None, Equal, SiteVarying };

struct NoiseConfig {
    ThermalMode thermal = ThermalMode::None;
    bool atmospheric = false;
    double eta = 0.0;

    /// Six preset cases: 1 none, 2 equal thermal, 3 site-varying thermal,
    /// 4 atmospheric only, 5 atmospheric + equal, 6 atmospheric + site-varying.
    static NoiseConfig from_case(int noise_case, double eta = kDefaultThermalEta);
    static constexpr double kDefaultThermalEta = 1e-5;
    void validate() const;
};

ThermalMode parse_thermal_mode(const std::string& text);
std::string to_string(ThermalMode mode);

/// nu = eta * sqrt(SEFD_p * SEFD_q).
double thermal_sigma(double sefd_p, double sefd_q, double eta);
/// Per-baseline thermal std, honouring the thermal mode (zeros for None).
std::vector<double> baseline_sigmas(const SiteTable& sites, const ObservationGeometry& geometry,
                                    const NoiseConfig& noise);

// --- measurement sets --------------------------------------------------------

struct Triangle {
    std::size_t t, p, q, b;
};

/// Complex visibilities or amplitudes per (t, baseline), invisible entries
/// zero; closure phases per triangle with a multiplicative scale (the mask
/// weight, 1 when unmasked).
struct MeasurementSet {
    enum class Form { Complex, AmpClosure };

    Form form = Form::Complex;
    std::size_t times = 0, sites = 0;
    std::vector<Complex> visibilities;
    std::vector<double> amplitudes;
    std::vector<Triangle> triangles;
    std::vector<double> closure;
    std::vector<double> closure_scale;
    std::vector<unsigned char> visible;  ///< per (t, baseline)
    std::vector<double> sigma;           ///< per baseline
    std::vector<double> site_phase;      ///< per (t, site)
};

/// V' = exp(-i (phi_p - phi_q)) V + n for the visible entries.
MeasurementSet corrupt(const std::vector<Complex>& ideal, const ObservationGeometry& geometry,
                       const SiteTable& sites, const NoiseConfig& noise, std::mt19937_64& rng);

/// Closure triangles among k all-visible sites, anchored at site 0.
std::vector<Triangle> triangle_set(std::size_t k);
/// Anchored triangles among the sites visible at timestamp t.
std::vector<Triangle> triangle_set(const ObservationGeometry& geometry, std::size_t t);

/// Angle of V_pq V_qb V_bp wrapped to (-pi, pi]; triangles with an invisible
/// member are dropped. Output is parallel to the returned triangle list.
struct ClosureResult {
    std::vector<Triangle> triangles;
    std::vector<double> phases;
};
ClosureResult closure_phases(const MeasurementSet& complex_set, const ObservationGeometry& geometry,
                             const std::vector<Triangle>& triangles);

double wrap_angle(double a);

/// Amplitudes plus closure phases over every timestamp's anchored triangles.
MeasurementSet to_amp_closure(const MeasurementSet& complex_set, const ObservationGeometry& geometry);

/// Scales visibilities/amplitudes by M_p M_q and closure phases by M_p M_q M_b.
MeasurementSet apply_mask(std::span<const double> mask, const MeasurementSet& set, const ObservationGeometry& geometry);

enum class InputMode { Complex, AmpClosure };
InputMode parse_input_mode(const std::string& text);

/// Fixed slot layout of the flat decoder input. Each entry records which
/// sites weight it; `third` is kNoSite for visibility/amplitude slots and
/// slots that never carry data are flagged unused.
class MeasurementLayout {
public:
    static constexpr std::size_t kNoSite = static_cast<std::size_t>(-1);

    MeasurementLayout(const ObservationGeometry& geometry, InputMode mode);

    InputMode mode() const noexcept { return mode_; }
    std::size_t length() const noexcept { return first_.size(); }
    std::size_t times() const noexcept { return times_; }
    std::size_t sites() const noexcept { return sites_; }
    std::size_t baseline_count() const noexcept { return baselines_; }
    /// Closure slots reserved per timestamp: C(K-1, 2).
    std::size_t closure_slots_per_time() const noexcept { return per_time_; }
    std::size_t first_site(std::size_t i) const { return first_[i]; }
    std::size_t second_site(std::size_t i) const { return second_[i]; }
    std::size_t third_site(std::size_t i) const { return third_[i]; }
    bool used(std::size_t i) const { return used_[i] != 0; }
    /// Triangle stored in closure slot (t, s), if any.
    const std::vector<std::optional<Triangle>>& closure_slots() const noexcept { return closure_slots_; }

private:
    InputMode mode_;
    std::size_t times_, sites_, baselines_, per_time_ = 0;
    std::vector<std::size_t> first_, second_, third_;
    std::vector<unsigned char> used_;
    std::vector<std::optional<Triangle>> closure_slots_;
};

/// Complex: interleaved (Re, Im) per (t, baseline). AmpClosure: amplitudes per
/// (t, baseline), then scale * (cos C, sin C) per closure slot.
std::vector<double> measurement_vector(const MeasurementSet& set, const MeasurementLayout& layout);
MeasurementSet unpack_measurements(std::span<const double> packed, const MeasurementLayout& layout,
                                   const ObservationGeometry& geometry);

/// Unmasked packed measurements of one image under the given noise.
std::vector<double> simulate_packed(const Image& image, const DftOperator& dft, const ObservationGeometry& geometry,
                                    const MeasurementLayout& layout, const SiteTable& sites, const NoiseConfig& noise,
                                    std::mt19937_64& rng);

// --- export ----------------------------------------------------------------

/// time_h,p,q,u,v,elevation_p,elevation_q for visible pairs.
void write_uv_csv(const std::string& path, const ObservationGeometry& geometry, const Schedule& schedule,
                  const SiteTable& sites);
/// Complex form: time_h,p,q,re,im,amp,phase,sigma. Amp form: time_h,p,q,amp,sigma.
void write_measurements_csv(const std::string& path, const MeasurementSet& set, const ObservationGeometry& geometry,
                            const Schedule& schedule, const SiteTable& sites);
/// time_h,p,q,b,closure_phase.
void write_closure_csv(const std::string& path, const MeasurementSet& set, const Schedule& schedule,
                       const SiteTable& sites);

}  // namespace codesign
