#include "codesign/recon.hpp"

#include "codesign/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace codesign {

BlurKernel make_kernel(double fraction, double nominal_px, std::size_t radius) {
    if (!(fraction > 0)) throw std::invalid_argument("blur fraction must be positive");
    BlurKernel k;
    k.radius = radius;
    k.fwhm_px = fraction * nominal_px;
    const std::size_t w = k.width();
    k.weights.assign(w * w, 0.0);
    const double sigma = k.fwhm_px / (2.0 * std::sqrt(2.0 * std::log(2.0)));
    if (sigma < 1e-3) {
        k.weights[radius * w + radius] = 1.0;
        return k;
    }
    double total = 0.0;
    for (std::size_t y = 0; y < w; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const double dy = static_cast<double>(y) - static_cast<double>(radius);
            const double dx = static_cast<double>(x) - static_cast<double>(radius);
            const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            k.weights[y * w + x] = v;
            total += v;
        }
    }
    for (double& v : k.weights) v /= total;
    return k;
}

Image blur(const Image& image, const BlurKernel& kernel, Boundary boundary) {
    Image out(image.size, image.fov_uas);
    const long n = static_cast<long>(image.size);
    const long r = static_cast<long>(kernel.radius);
    for (long y = 0; y < n; ++y) {
        for (long x = 0; x < n; ++x) {
            double acc = 0.0;
            for (long dy = -r; dy <= r; ++dy) {
                long sy = y - dy;
                if (boundary == Boundary::Periodic) sy = ((sy % n) + n) % n;
                else if (sy < 0 || sy >= n) continue;
                for (long dx = -r; dx <= r; ++dx) {
                    long sx = x - dx;
                    if (boundary == Boundary::Periodic) sx = ((sx % n) + n) % n;
                    else if (sx < 0 || sx >= n) continue;
                    acc += kernel.at(dy, dx) * image.pixels[static_cast<std::size_t>(sy * n + sx)];
                }
            }
            out.pixels[static_cast<std::size_t>(y * n + x)] = acc;
        }
    }
    return out;
}

double l1_blurred_loss(const Image& recon, const Image& truth, const BlurKernel& kernel, Reduction reduction) {
    if (recon.size != truth.size) throw std::invalid_argument("l1_blurred_loss: image sizes differ");
    const Image target = blur(truth, kernel);
    double total = 0.0;
    for (std::size_t i = 0; i < recon.pixels.size(); ++i) total += std::abs(recon.pixels[i] - target.pixels[i]);
    return reduction == Reduction::Mean ? total / static_cast<double>(recon.pixels.size()) : total;
}

double shift_invariant_loss(const Image& recon, const Image& truth, const BlurKernel& kernel) {
    if (recon.size != truth.size) throw std::invalid_argument("shift_invariant_loss: image sizes differ");
    const Image target = blur(truth, kernel, Boundary::Periodic);
    double nr = 0.0, nt = 0.0;
    for (std::size_t i = 0; i < recon.pixels.size(); ++i) {
        nr += recon.pixels[i] * recon.pixels[i];
        nt += target.pixels[i] * target.pixels[i];
    }
    if (!(nr > 0) || !(nt > 0)) throw std::invalid_argument("shift_invariant_loss: zero-norm image");
    const std::size_t n = recon.size;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t sy = 0; sy < n; ++sy) {
        for (std::size_t sx = 0; sx < n; ++sx) {
            double acc = 0.0;
            for (std::size_t y = 0; y < n; ++y)
                for (std::size_t x = 0; x < n; ++x)
                    acc += recon.at(y, x) * target.at((y + n - sy) % n, (x + n - sx) % n);
            best = std::max(best, acc);
        }
    }
    return 1.0 - best / std::sqrt(nr * nt);
}

namespace {

void check_batch_images(const ad::Tensor& recon, const ad::Tensor& target, const char* op) {
    if (recon.rank() != 3 || recon.shape() != target.shape()) {
        throw ad::ShapeError(op, "expected matching (B, H, W) tensors, got " + ad::to_string(recon.shape()) + " and " +
                                     ad::to_string(target.shape()));
    }
}

}  // namespace

ad::Tensor l1_loss(const ad::Tensor& recon, const ad::Tensor& target, Reduction reduction) {
    check_batch_images(recon, target, "l1_loss");
    const std::size_t b = recon.dim(0), hw = recon.dim(1) * recon.dim(2);
    const ad::Tensor per = ad::sum_axis(ad::reshape(ad::abs(recon - target), {b, hw}), 1);
    return reduction == Reduction::Mean ? per * (1.0 / static_cast<double>(hw)) : per;
}

ad::Tensor shift_invariant_loss(const ad::Tensor& recon, const ad::Tensor& target) {
    check_batch_images(recon, target, "shift_invariant_loss");
    const std::size_t b = recon.dim(0), hw = recon.dim(1) * recon.dim(2);
    const auto best = ad::max_axis(ad::cyclic_xcorr2d(recon, target), 1);
    const ad::Tensor flat = ad::reshape(recon, {b, hw});
    const ad::Tensor recon_norm = ad::sqrt(ad::sum_axis(flat * flat, 1));
    std::vector<double> tn(b, 0.0);
    const auto tv = target.values();
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < hw; ++j) tn[i] += tv[i * hw + j] * tv[i * hw + j];
        if (!(tn[i] > 0)) throw std::invalid_argument("shift_invariant_loss: zero-norm target");
        tn[i] = std::sqrt(tn[i]);
    }
    const ad::Tensor target_norm = ad::Tensor::constant({b}, std::move(tn));
    return 1.0 - best.values / (recon_norm * target_norm);
}

Activation parse_activation(const std::string& text) {
    if (text == "softplus") return Activation::Softplus;
    if (text == "relu") return Activation::Relu;
    if (text == "tanh") return Activation::Tanh;
    throw std::invalid_argument("unknown activation '" + text + "'");
}

void DecoderConfig::validate() const {
    if (input_length == 0) throw std::invalid_argument("decoder input length must be positive");
    for (std::size_t i : active_inputs)
        if (i >= input_length) throw std::invalid_argument("active input index out of range");
    if (base_width == 0 || levels == 0) throw std::invalid_argument("decoder width and depth must be positive");
    if (image_size % (std::size_t{1} << levels) != 0) {
        throw std::invalid_argument("image size must be divisible by 2^levels");
    }
    if (mode == InputMode::AmpClosure) {
        if (baseline_slots == 0 || baseline_slots > input_length) throw std::invalid_argument("bad baseline slot count");
        if (phase_hidden == 0) throw std::invalid_argument("phase layers need a positive width");
        for (std::size_t s : visible_slots)
            if (s >= baseline_slots) throw std::invalid_argument("visible slot out of range");
    }
}

DecoderConfig DecoderConfig::for_layout(const MeasurementLayout& layout, std::size_t base_width, std::size_t levels) {
    DecoderConfig c;
    c.mode = layout.mode();
    c.input_length = layout.length();
    for (std::size_t i = 0; i < layout.length(); ++i)
        if (layout.used(i)) c.active_inputs.push_back(i);
    c.base_width = base_width;
    c.levels = levels;
    if (c.mode == InputMode::AmpClosure) {
        c.baseline_slots = layout.times() * layout.baseline_count();
        for (std::size_t s = 0; s < c.baseline_slots; ++s)
            if (layout.used(s)) c.visible_slots.push_back(s);
    }
    return c;
}

Decoder::Dense Decoder::dense(ad::ParameterSet& params, std::mt19937_64& rng, const std::string& name, std::size_t in,
                              std::size_t out) {
    std::normal_distribution<double> g(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
    std::vector<double> w(in * out);
    for (double& v : w) v = g(rng);
    Dense d{params.add(prefix_ + name + ".w", ad::Tensor::parameter({in, out}, std::move(w))),
            params.add(prefix_ + name + ".b", ad::Tensor::parameter({out}, std::vector<double>(out, 0.0)))};
    names_.push_back(prefix_ + name + ".w");
    names_.push_back(prefix_ + name + ".b");
    return d;
}

Decoder::Conv Decoder::conv(ad::ParameterSet& params, std::mt19937_64& rng, const std::string& name, std::size_t in,
                            std::size_t out, std::size_t k, std::size_t stride) {
    std::normal_distribution<double> g(0.0, std::sqrt(2.0 / static_cast<double>(in * k * k)));
    std::vector<double> w(out * in * k * k);
    for (double& v : w) v = g(rng);
    Conv c{params.add(prefix_ + name + ".w", ad::Tensor::parameter({out, in, k, k}, std::move(w))),
           params.add(prefix_ + name + ".b", ad::Tensor::parameter({out}, std::vector<double>(out, 0.0))), stride};
    names_.push_back(prefix_ + name + ".w");
    names_.push_back(prefix_ + name + ".b");
    return c;
}

Decoder::Decoder(DecoderConfig config, ad::ParameterSet& params, std::mt19937_64& rng, std::string prefix)
    : config_(std::move(config)), prefix_(std::move(prefix)) {
    config_.validate();
    const std::size_t npix = config_.image_size * config_.image_size;
    if (!(config_.output_scale > 0)) config_.output_scale = 1.0 / static_cast<double>(npix);

    std::size_t unet_in = 0;
    if (config_.mode == InputMode::Complex) {
        unet_inputs_ = config_.active_inputs;
        unet_in = unet_inputs_.empty() ? config_.input_length : unet_inputs_.size();
    } else {
        if (config_.visible_slots.empty()) {
            for (std::size_t s = 0; s < config_.baseline_slots; ++s) config_.visible_slots.push_back(s);
        }
        const std::size_t in = config_.active_inputs.empty() ? config_.input_length : config_.active_inputs.size();
        const std::size_t h = config_.phase_hidden;
        phase_.push_back(dense(params, rng, "phase0", in, h));
        phase_.push_back(dense(params, rng, "phase1", h, h));
        phase_.push_back(dense(params, rng, "phase2", h, 2 * config_.visible_slots.size()));
        unet_in = 2 * config_.visible_slots.size();
    }
    front_ = dense(params, rng, "front", unet_in, npix);

    const std::size_t w = config_.base_width;
    auto channels = [w](std::size_t level) { return w * (std::size_t{1} << std::min<std::size_t>(level, 3)); };
    stem_ = conv(params, rng, "stem", 1, channels(0), 3, 1);
    for (std::size_t i = 1; i <= config_.levels; ++i) {
        down_.push_back(conv(params, rng, "down" + std::to_string(i), channels(i - 1), channels(i), 3, 2));
    }
    for (std::size_t i = config_.levels; i >= 1; --i) {
        up_.push_back(conv(params, rng, "up" + std::to_string(i), channels(i) + channels(i - 1), channels(i - 1), 3, 1));
    }
    head_ = conv(params, rng, "head", channels(0) + 1, 1, 3, 1);
}

ad::Tensor Decoder::act(const ad::Tensor& x) const {
    switch (config_.activation) {
        case Activation::Softplus: return ad::softplus(x);
        case Activation::Relu: return ad::relu(x);
        case Activation::Tanh: return ad::tanh(x);
    }
    return x;
}

ad::Tensor Decoder::unet(const ad::Tensor& input) const {
    const std::size_t b = input.dim(0), n = config_.image_size;
    const ad::Tensor grid = ad::reshape(ad::matmul(input, front_.w) + front_.b, {b, 1, n, n});
    std::vector<ad::Tensor> skips{act(ad::conv2d(grid, stem_.w, stem_.b, 1))};
    for (const auto& d : down_) skips.push_back(act(ad::conv2d(skips.back(), d.w, d.b, d.stride)));
    ad::Tensor cur = skips.back();
    for (std::size_t i = 0; i < up_.size(); ++i) {
        const ad::Tensor& skip = skips[config_.levels - 1 - i];
        cur = act(ad::conv2d(ad::concat({ad::upsample2x(cur), skip}, 1), up_[i].w, up_[i].b, 1));
    }
    const ad::Tensor out = ad::conv2d(ad::concat({cur, grid}, 1), head_.w, head_.b, 1);
    return ad::reshape(ad::softplus(out) * config_.output_scale, {b, n, n});
}

DecoderOutput Decoder::forward(const ad::Tensor& input) const {
    if (input.rank() != 2 || input.dim(1) != config_.input_length) {
        throw ad::ShapeError("decode", "expected (B, " + std::to_string(config_.input_length) + ") input, got " +
                                           ad::to_string(input.shape()));
    }
    const ad::Tensor active = config_.active_inputs.empty() ? input : ad::select_columns(input, config_.active_inputs);
    DecoderOutput out;
    if (config_.mode == InputMode::Complex) {
        out.image = unet(active);
        return out;
    }
    const std::size_t b = input.dim(0), v = config_.visible_slots.size();
    ad::Tensor h = ad::tanh(ad::matmul(active, phase_[0].w) + phase_[0].b);
    h = ad::tanh(ad::matmul(h, phase_[1].w) + phase_[1].b);
    const ad::Tensor raw = ad::matmul(h, phase_[2].w) + phase_[2].b;  // (B, 2V): unnormalized (cos, sin)
    const ad::Tensor norm2 = ad::sum_axis(ad::reshape(raw * raw, {b, v, 2}), 2) + 1e-12;
    std::vector<std::size_t> rep(b * 2 * v);
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t s = 0; s < 2 * v; ++s) rep[i * 2 * v + s] = i * v + s / 2;
    out.phasors = raw / ad::take(ad::sqrt(norm2), rep, {b, 2 * v});
    std::vector<std::size_t> amp_cols(2 * v);
    for (std::size_t s = 0; s < 2 * v; ++s) amp_cols[s] = config_.visible_slots[s / 2];
    out.recombined = ad::select_columns(input, amp_cols) * out.phasors;
    out.image = unet(out.recombined);
    return out;
}

// --- parameter files -----------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'C', 'D', 'S', 'P'};

template <class T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& in, const std::string& path) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError(path + ": truncated parameter file");
    return v;
}

}  // namespace

void save_parameters(const std::string& path, const ad::ParameterSet& params, const std::vector<std::string>& names) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out.write(kMagic, 4);
    put<std::uint64_t>(out, names.size());
    for (const auto& name : names) {
        const ad::Tensor& t = params.get(name);
        put<std::uint64_t>(out, name.size());
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<std::uint64_t>(out, t.rank());
        for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
        const auto v = t.values();
        out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    }
    if (!out) throw IoError("failed writing " + path);
}

void load_parameters(const std::string& path, ad::ParameterSet& params) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw IoError(path + ": not a parameter file");
    const auto count = get<std::uint64_t>(in, path);
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name(get<std::uint64_t>(in, path), '\0');
        if (!in.read(name.data(), static_cast<std::streamsize>(name.size()))) throw IoError(path + ": truncated name");
        ad::Shape shape(get<std::uint64_t>(in, path));
        for (auto& d : shape) d = get<std::uint64_t>(in, path);
        if (!params.contains(name)) throw IoError(path + ": unknown parameter " + name);
        ad::Tensor& t = params.get(name);
        if (t.shape() != shape) throw IoError(path + ": shape mismatch for " + name);
        auto v = t.mutable_values();
        if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)))) {
            throw IoError(path + ": truncated values for " + name);
        }
    }
}

}  // namespace codesign
