#pragma once

// Image reconstruction: Gaussian blur kernels, the two similarity losses and
// the two decoder networks (complex visibilities, or amplitudes with closure
// phases) built on the autodiff engine.

#include "codesign/autodiff.hpp"
#include "codesign/image.hpp"
#include "codesign/vlbi.hpp"

#include <cstddef>
#include <random>
#include <string>
#include <vector>

namespace codesign {

/// Nominal resolution in pixels: 25 uas at 100 uas / 32 px.
inline constexpr double kNominalResolutionPx = 8.0;

struct BlurKernel {
    std::size_t radius = 0;
    double fwhm_px = 0.0;
    std::vector<double> weights;  ///< (2 radius + 1)^2, row-major, unit sum

    std::size_t width() const noexcept { return 2 * radius + 1; }
    double at(long dy, long dx) const {
        return weights[static_cast<std::size_t>(dy + static_cast<long>(radius)) * width() +
                       static_cast<std::size_t>(dx + static_cast<long>(radius))];
    }
};

/// Gaussian with FWHM = fraction * nominal_px, truncated to a (2 radius + 1)
/// square window and renormalized. Tiny fractions collapse to a delta.
BlurKernel make_kernel(double fraction, double nominal_px = kNominalResolutionPx, std::size_t radius = 15);

enum class Boundary { Zero, Periodic };
Image blur(const Image& image, const BlurKernel& kernel, Boundary boundary = Boundary::Zero);

enum class Reduction { Mean, Sum };

double l1_blurred_loss(const Image& recon, const Image& truth, const BlurKernel& kernel,
                       Reduction reduction = Reduction::Mean);
/// 1 - max_shift xcorr(recon, blur_periodic(truth)) / (|recon| |blur(truth)|).
double shift_invariant_loss(const Image& recon, const Image& truth, const BlurKernel& kernel);

/// Per-image losses on batches (B, H, W); `target` is the already blurred truth
/// and must be constant. Results have shape (B).
ad::Tensor l1_loss(const ad::Tensor& recon, const ad::Tensor& target, Reduction reduction);
ad::Tensor shift_invariant_loss(const ad::Tensor& recon, const ad::Tensor& target);

enum class Activation { Softplus, Relu, Tanh };
Activation parse_activation(const std::string& text);

struct DecoderConfig {
    InputMode mode = InputMode::Complex;
    std::size_t input_length = 0;
    /// Input slots that can ever be nonzero; empty means all. Other slots are
    /// skipped by the first dense layer.
    std::vector<std::size_t> active_inputs;
    std::size_t image_size = 32;
    std::size_t base_width = 16;
    std::size_t levels = 4;
    Activation activation = Activation::Softplus;
    /// Mode B: hidden width of the three phase layers, the number of
    /// (t, baseline) slots, and which of them are ever visible.
    std::size_t phase_hidden = 128;
    std::size_t baseline_slots = 0;
    std::vector<std::size_t> visible_slots;
    /// Multiplies the final softplus so an untrained net starts near unit flux.
    double output_scale = 0.0;

    void validate() const;
    /// Fills mode, lengths and active slots from a measurement layout.
    static DecoderConfig for_layout(const MeasurementLayout& layout, std::size_t base_width = 16,
                                    std::size_t levels = 4);
};

struct DecoderOutput {
    ad::Tensor image;       ///< (B, H, W), nonnegative
    ad::Tensor phasors;     ///< mode B: (B, 2 * visible slots) unit (cos, sin) estimates
    ad::Tensor recombined;  ///< mode B: amplitude * phasor, the complex-layout input of the U-Net
};

/// Dense front end plus U-Net. Parameters are registered under `prefix` in
/// the supplied set, which may also hold other trainables.
class Decoder {
public:
    Decoder(DecoderConfig config, ad::ParameterSet& params, std::mt19937_64& rng, std::string prefix = "decoder.");

    const DecoderConfig& config() const noexcept { return config_; }
    /// input: (B, input_length).
    DecoderOutput forward(const ad::Tensor& input) const;
    ad::Tensor operator()(const ad::Tensor& input) const { return forward(input).image; }
    const std::vector<std::string>& parameter_names() const noexcept { return names_; }

private:
    struct Conv {
        ad::Tensor w, b;
        std::size_t stride;
    };
    struct Dense {
        ad::Tensor w, b;
    };

    Dense dense(ad::ParameterSet& params, std::mt19937_64& rng, const std::string& name, std::size_t in,
                std::size_t out);
    Conv conv(ad::ParameterSet& params, std::mt19937_64& rng, const std::string& name, std::size_t in,
              std::size_t out, std::size_t k, std::size_t stride);
    ad::Tensor act(const ad::Tensor& x) const;
    ad::Tensor unet(const ad::Tensor& input) const;

    DecoderConfig config_;
    std::string prefix_;
    std::vector<std::string> names_;
    std::vector<std::size_t> unet_inputs_;
    Dense front_;
    Conv stem_;
    std::vector<Conv> down_, up_;
    Conv head_;
    std::vector<Dense> phase_;
};

/// Binary parameter file: named tensors with shapes.
void save_parameters(const std::string& path, const ad::ParameterSet& params, const std::vector<std::string>& names);
/// Overwrites values of existing parameters; shapes must match.
void load_parameters(const std::string& path, ad::ParameterSet& params);

}  // namespace codesign
