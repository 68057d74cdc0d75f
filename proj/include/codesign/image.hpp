#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace codesign {

inline constexpr double kMicroArcsecond = 3.14159265358979323846 / (180.0 * 3600.0 * 1e6);

/// Square sky image; pixel (row, col) with row-major storage. Fluxes in Jy.
struct Image {
    std::size_t size = 32;
    double fov_uas = 100.0;
    std::vector<double> pixels;

    Image() : pixels(size * size, 0.0) {}
    Image(std::size_t n, double fov) : size(n), fov_uas(fov), pixels(n * n, 0.0) {}

    double& at(std::size_t row, std::size_t col) { return pixels[row * size + col]; }
    double at(std::size_t row, std::size_t col) const { return pixels[row * size + col]; }
    double pixel_uas() const { return fov_uas / static_cast<double>(size); }
    double pixel_rad() const { return pixel_uas() * kMicroArcsecond; }
    /// Angular offset (radians) of a column/row from the image centre pixel size/2.
    double l_of(std::size_t col) const;
    double m_of(std::size_t row) const;
    double total_flux() const;
    /// Rescales to the given total flux; throws if the image is empty.
    void normalize(double flux = 1.0);
};

/// Unit flux at the centre pixel.
Image point_source(std::size_t n = 32, double fov_uas = 100.0);

/// 8-bit grayscale PNG, linearly scaled so the maximum maps to 255.
void write_png(const std::string& path, const Image& image);
void write_grid_csv(const std::string& path, const Image& image);
Image read_grid_csv(const std::string& path, double fov_uas = 100.0);

/// IDX3 unsigned-byte archive (MNIST layout). Images are zero-padded or
/// centre-cropped to `size` and normalized to `flux`.
std::vector<Image> read_idx_images(const std::string& path, std::size_t size = 32, double fov_uas = 100.0,
                                   double flux = 1.0, std::size_t limit = 0);

}  // namespace codesign
