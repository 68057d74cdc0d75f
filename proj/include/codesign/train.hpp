#pragma once

// Joint training of the Ising sampling distribution and the reconstruction
// decoder, the synthetic data pipeline, and the experiment protocols built
// on repeated training runs.

#include "codesign/autodiff.hpp"
#include "codesign/gibbs.hpp"
#include "codesign/image.hpp"
#include "codesign/ising.hpp"
#include "codesign/recon.hpp"
#include "codesign/vlbi.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace codesign {

std::uint64_t splitmix64(std::uint64_t x);
/// Independent stream seed for (seed, trial, stream).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t trial, std::uint64_t stream);

// --- data --------------------------------------------------------------------

struct AugmentConfig {
    bool rotate = true;
    bool elastic = true;
    double elastic_alpha_px = 1.0;  ///< std of control-point displacements
    std::size_t elastic_grid = 4;   ///< control points per side
};

struct DatasetSpec {
    /// "synthetic" or a path to an IDX3 archive.
    std::string source = "synthetic";
    std::size_t size = 2000;
    std::size_t image_size = 32;
    double fov_uas = 100.0;
    AugmentConfig augment;
    bool augment_enabled = true;
};

/// Ring, crescent, disk or Gaussian-blob image at unit flux.
Image synthetic_image(std::mt19937_64& rng, std::size_t size = 32, double fov_uas = 100.0);
std::vector<Image> make_dataset(const DatasetSpec& spec, std::mt19937_64& rng);

/// Bilinear resampling of `image` at source coordinates (row, col); outside reads as 0.
double sample_bilinear(const Image& image, double row, double col);
/// Rotation by `angle` (radians, about the centre pixel) followed by a smooth
/// displacement field; clamped to >= 0 and renormalized to the input flux.
Image warp(const Image& image, double angle, const std::vector<double>& dy, const std::vector<double>& dx);
Image augment(const Image& image, std::mt19937_64& rng, const AugmentConfig& config = {});

// --- configuration -----------------------------------------------------------

enum class Similarity { L1Blurred, ShiftInvariant };

struct TrainConfig {
    double lambda1 = 0.005;
    double lambda2 = 0.005;
    double learning_rate = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t epochs = 50;
    /// Optimizer steps per epoch; 0 means one pass over the dataset.
    std::size_t steps_per_epoch = 0;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    std::size_t trials = 5;

    double resolution = 0.75;
    int noise_case = 1;
    double thermal_eta = NoiseConfig::kDefaultThermalEta;
    std::string target = "sgra";
    std::string site_file;  ///< resolved path
    std::size_t timestamps = 24;
    double min_elevation_deg = 10.0;
    /// Complex visibilities (A) or amplitudes + closure phases (B); defaults
    /// follow the noise case: A without atmospheric phases, B with them.
    std::optional<InputMode> decoder;

    std::size_t gibbs_layers = 5;
    double s1 = 3.0;
    double s2 = 10.0;

    std::size_t base_width = 16;
    std::size_t levels = 4;
    std::size_t phase_hidden = 128;
    Activation activation = Activation::Softplus;
    Reduction l1_reduction = Reduction::Sum;

    DatasetSpec dataset;
    /// Masks drawn after training for statistics.
    std::size_t mask_samples = 1000;
    /// Masks used for the mean/std reconstruction of the held-out image.
    std::size_t recon_samples = 64;

    InputMode decoder_mode() const;
    Similarity similarity() const;
    NoiseConfig noise() const;
    std::size_t steps_per_epoch_or_default() const;
    void validate() const;
};

/// Everything derived from a config that does not change during training.
struct ObservationContext {
    SiteTable sites;
    Target target;
    Schedule schedule;
    ObservationGeometry geometry;
    DftOperator dft;
    MeasurementLayout layout;
    NoiseConfig noise;
    BlurKernel kernel;
    Similarity similarity;
    Reduction reduction;
    /// Mask-factor column per packed slot; index K selects a constant 1.
    std::vector<std::size_t> factor[3];

    static std::shared_ptr<const ObservationContext> build(const TrainConfig& config);
    static std::shared_ptr<const ObservationContext> build(const TrainConfig& config, SiteTable sites);
};

/// S(M) applied to packed measurements: (B, K) masks and (B, L) constant data.
ad::Tensor masked_measurements(const ad::Tensor& masks, const ad::Tensor& packed, const ObservationContext& ctx);

/// Blurred truth for each image as a constant (B, H, W), using the boundary
/// that matches the similarity measure.
ad::Tensor blurred_targets(const std::vector<Image>& images, const ObservationContext& ctx);

/// Unmasked packed measurements of each image under ctx.noise, (B, L).
ad::Tensor pack_batch(const std::vector<Image>& images, const ObservationContext& ctx, std::mt19937_64& rng);
DecoderConfig decoder_config(const TrainConfig& config, const ObservationContext& ctx);

using DecodeFn = std::function<ad::Tensor(const ad::Tensor&)>;

struct LossTerms {
    ad::Tensor total;        ///< scalar batch mean
    ad::Tensor similarity;   ///< (B)
    ad::Tensor mask_l1;      ///< (B)
    ad::Tensor hamiltonian;  ///< (B)
    ad::Tensor masks;        ///< (B, K)
    ad::Tensor recon;        ///< (B, H, W)
};

/// Batch mean of s(decode(S(M) * f(z)), z) + lambda1 |M|_1 - lambda2 H(X_N),
/// one relaxed mask draw per image. `packed` is (B, L) unmasked measurements.
LossTerms total_loss(const std::vector<Image>& batch, const ad::Tensor& packed, const ad::Tensor& theta,
                     const DecodeFn& decode, const GibbsConfig& gibbs, const GibbsNoise& noise,
                     const ObservationContext& ctx, double lambda1, double lambda2);

/// Training images of a run, seeded from config.seed.
std::vector<Image> training_set(const TrainConfig& config);
/// Unaugmented synthetic images disjoint in seed from the training set.
std::vector<Image> held_out_set(const TrainConfig& config, std::size_t count);

// --- optimizer ---------------------------------------------------------------

class Adam {
public:
    Adam(ad::ParameterSet& params, double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8);
    /// Uses the gradients currently stored on the parameters.
    void step();
    std::size_t steps() const noexcept { return t_; }

private:
    ad::ParameterSet& params_;
    double lr_, b1_, b2_, eps_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// --- training ----------------------------------------------------------------

struct LossRecord {
    std::size_t step, epoch;
    double total, similarity, mask_l1, hamiltonian;
};

struct TrialResult {
    std::uint64_t seed = 0;
    IsingModel theta{1};
    std::vector<Ordering> orderings;
    std::shared_ptr<ad::ParameterSet> params;
    std::shared_ptr<Decoder> decoder;
    std::vector<LossRecord> history;
    std::vector<std::vector<double>> masks;  ///< post-training samples
    std::vector<double> marginals;           ///< fraction of samples with M_j > 0.5
    double mean_count = 0.0;                 ///< mean number of M_j > 0.5
};

struct RunArtifacts {
    TrainConfig config;
    std::shared_ptr<const ObservationContext> context;
    std::vector<TrialResult> trials;
    IsingModel theta_mean{1}, theta_std{1};
    Image recon_mean, recon_std, recon_truth;

    std::vector<double> count_histogram() const;
    double mean_count() const;
};

struct Progress {
    std::size_t trial, step, total_steps;
    double loss;
};
using ProgressFn = std::function<void(const Progress&)>;

/// Runs `config.trials` independent trainings; throws DivergenceError on a
/// non-finite loss.
RunArtifacts train_joint(const TrainConfig& config, const std::vector<Image>& dataset,
                         const ProgressFn& progress = {});
/// Single trial, for protocols that need finer control.
TrialResult train_trial(const TrainConfig& config, const ObservationContext& ctx, const std::vector<Image>& dataset,
                        std::size_t trial, const ProgressFn& progress = {});

/// Relaxed masks from a trained model under its trial orderings.
std::vector<std::vector<double>> draw_masks(const IsingModel& theta, const GibbsConfig& gibbs, std::mt19937_64& rng,
                                            std::size_t count);
GibbsConfig gibbs_config(const TrainConfig& config, std::vector<Ordering> orderings);

/// Decodes `truth` under each mask; returns per-pixel mean and std.
std::pair<Image, Image> reconstruction_spread(const TrialResult& trial, const ObservationContext& ctx,
                                              const Image& truth, const std::vector<std::vector<double>>& masks,
                                              std::mt19937_64& rng);

/// theta_trial_k.csv, theta_mean/std.csv, loss_history.csv, masks_sample.csv,
/// marginals.csv, summary.csv, orderings_trial_k.csv, decoder_trial_k.bin,
/// recon_* images and a README describing the columns.
void write_run_directory(const std::string& dir, const RunArtifacts& run, const std::string& config_text);

/// Rebuilds trial `trial` (1-based) of a run directory written above.
struct LoadedRun {
    TrainConfig config;
    std::shared_ptr<const ObservationContext> context;
    TrialResult trial;
};
LoadedRun load_run(const std::string& dir, std::size_t trial = 1);

// --- protocols ---------------------------------------------------------------

struct SweepCell {
    double lambda1, lambda2;
    double mean_count, std_count;
    std::vector<double> histogram;  ///< fraction of samples with 0..K telescopes
};
std::vector<SweepCell> sweep_regularization(const TrainConfig& config, const std::vector<double>& lambda1,
                                            const std::vector<double>& lambda2, const std::vector<Image>& dataset,
                                            const ProgressFn& progress = {});

struct ResolutionRow {
    double fraction;
    IsingModel theta_mean{1};
    double mean_count;
};
std::vector<ResolutionRow> resolution_sweep(const TrainConfig& config, const std::vector<double>& fractions,
                                            const std::vector<Image>& dataset, const ProgressFn& progress = {});

struct SwapResult {
    std::vector<std::string> labels;
    std::vector<std::vector<double>> loss;  ///< row: decoder/run, column: mask source
    std::vector<double> mean_counts;
};
/// Entry (i, j): mean shift-invariant loss of run i's decoder on run i's
/// observation, masked with samples from run j's distribution.
SwapResult swap_eval(const std::vector<const TrialResult*>& runs,
                     const std::vector<std::shared_ptr<const ObservationContext>>& contexts,
                     const std::vector<TrainConfig>& configs, const std::vector<std::string>& labels,
                     const std::vector<Image>& test_set, std::uint64_t seed);

}  // namespace codesign
