#include "codesign/image.hpp"

#include "codesign/errors.hpp"
#include "csv.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numeric>
#include <stdexcept>

namespace codesign {

double Image::l_of(std::size_t col) const {
    return (static_cast<double>(col) - static_cast<double>(size / 2)) * pixel_rad();
}

double Image::m_of(std::size_t row) const {
    return (static_cast<double>(row) - static_cast<double>(size / 2)) * pixel_rad();
}

double Image::total_flux() const { return std::accumulate(pixels.begin(), pixels.end(), 0.0); }

void Image::normalize(double flux) {
    const double total = total_flux();
    if (!(total > 0)) throw std::invalid_argument("cannot normalize an image with no flux");
    for (double& p : pixels) p *= flux / total;
}

Image point_source(std::size_t n, double fov_uas) {
    Image img(n, fov_uas);
    img.at(n / 2, n / 2) = 1.0;
    return img;
}

void write_png(const std::string& path, const Image& image) {
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
    if (!fp) throw IoError("cannot write " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng initialization failed");
    }
    const auto n = static_cast<png_uint_32>(image.size);
    std::vector<png_byte> rows(image.size * image.size);
    const double peak = *std::max_element(image.pixels.begin(), image.pixels.end());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const double v = peak > 0 ? std::clamp(image.pixels[i] / peak, 0.0, 1.0) : 0.0;
        rows[i] = static_cast<png_byte>(v * 255.0 + 0.5);
    }
    std::vector<png_bytep> row_ptrs(image.size);
    for (std::size_t r = 0; r < image.size; ++r) row_ptrs[r] = rows.data() + r * image.size;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng failed writing " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, n, n, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, row_ptrs.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

void write_grid_csv(const std::string& path, const Image& image) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    for (std::size_t r = 0; r < image.size; ++r) {
        csv::write_row(out, std::vector<double>(image.pixels.begin() + static_cast<std::ptrdiff_t>(r * image.size),
                                                image.pixels.begin() + static_cast<std::ptrdiff_t>((r + 1) * image.size)));
    }
}

Image read_grid_csv(const std::string& path, double fov_uas) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    const auto rows = csv::read(in);
    if (rows.empty()) throw ParseError(path, 1, "empty image");
    const std::size_t n = rows.size();
    Image img(n, fov_uas);
    for (std::size_t r = 0; r < n; ++r) {
        if (rows[r].fields.size() != n) throw ParseError(path, rows[r].line, "image must be square");
        for (std::size_t c = 0; c < n; ++c) {
            const double v = csv::parse_double(rows[r].fields[c], path, rows[r].line);
            if (v < 0) throw ParseError(path, rows[r].line, "negative pixel");
            img.at(r, c) = v;
        }
    }
    return img;
}

namespace {
std::uint32_t read_be32(std::istream& in) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw IoError("truncated IDX header");
    return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}
}  // namespace

std::vector<Image> read_idx_images(const std::string& path, std::size_t size, double fov_uas, double flux,
                                   std::size_t limit) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    const std::uint32_t magic = read_be32(in);
    if (magic != 0x00000803) throw IoError(path + ": not an IDX3 unsigned-byte archive");
    std::size_t count = read_be32(in);
    const std::size_t rows = read_be32(in);
    const std::size_t cols = read_be32(in);
    if (limit > 0) count = std::min(count, limit);
    std::vector<Image> out;
    std::vector<unsigned char> buf(rows * cols);
    for (std::size_t i = 0; i < count; ++i) {
        if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
            throw IoError(path + ": truncated image data");
        }
        Image img(size, fov_uas);
        const auto off_r = static_cast<std::ptrdiff_t>(size) / 2 - static_cast<std::ptrdiff_t>(rows) / 2;
        const auto off_c = static_cast<std::ptrdiff_t>(size) / 2 - static_cast<std::ptrdiff_t>(cols) / 2;
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
                const auto rr = static_cast<std::ptrdiff_t>(r) + off_r;
                const auto cc = static_cast<std::ptrdiff_t>(c) + off_c;
                if (rr < 0 || cc < 0 || rr >= static_cast<std::ptrdiff_t>(size) ||
                    cc >= static_cast<std::ptrdiff_t>(size)) {
                    continue;
                }
                img.at(static_cast<std::size_t>(rr), static_cast<std::size_t>(cc)) = buf[r * cols + c] / 255.0;
            }
        }
        if (img.total_flux() > 0) {
            img.normalize(flux);
            out.push_back(std::move(img));
        }
    }
    return out;
}

}  // namespace codesign
