#include "codesign/train.hpp"

#include "codesign/config.hpp"
#include "codesign/errors.hpp"
#include "csv.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace codesign {

namespace fs = std::filesystem;

namespace {

constexpr double kPi = std::numbers::pi;

enum Stream : std::uint64_t { kInit = 1, kData, kAugment, kGibbs, kMeasure, kEval, kHeldOut };

}  // namespace

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t trial, std::uint64_t stream) {
    return splitmix64(splitmix64(splitmix64(seed) ^ trial) ^ (stream * 0x632be59bd9b4e019ULL));
}

// --- data --------------------------------------------------------------------

Image synthetic_image(std::mt19937_64& rng, std::size_t size, double fov_uas) {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    auto range = [&](double a, double b) { return a + (b - a) * uni(rng); };
    Image img(size, fov_uas);
    // Lengths below are in pixels of a 32-pixel grid, scaled for other sizes.
    const double s = static_cast<double>(size) / 32.0;
    const double c = static_cast<double>(size / 2);
    const double cy = c + range(-2, 2) * s, cx = c + range(-2, 2) * s;
    const int kind = static_cast<int>(uni(rng) * 4.0);
    const double r0 = range(4.0, 9.0) * s, width = range(0.8, 2.0) * s;
    const double asym = range(0.3, 0.95), phase0 = range(0.0, 2.0 * kPi);
    const double radius = range(2.5, 8.0) * s;
    struct Blob {
        double y, x, sigma, amp;
    };
    std::vector<Blob> blobs;
    if (kind == 3) {
        const int count = 1 + static_cast<int>(uni(rng) * 3.0);
        for (int i = 0; i < count; ++i) {
            blobs.push_back({c + range(-6, 6) * s, c + range(-6, 6) * s, range(1.0, 4.0) * s, range(0.3, 1.0)});
        }
    }
    for (std::size_t r = 0; r < size; ++r) {
        for (std::size_t col = 0; col < size; ++col) {
            const double dy = static_cast<double>(r) - cy, dx = static_cast<double>(col) - cx;
            const double rho = std::hypot(dy, dx);
            double v = 0.0;
            switch (kind) {
                case 0: v = std::exp(-(rho - r0) * (rho - r0) / (2 * width * width)); break;
                case 1:
                    v = std::exp(-(rho - r0) * (rho - r0) / (2 * width * width)) *
                        (1.0 + asym * std::cos(std::atan2(dy, dx) - phase0));
                    break;
                case 2: v = 1.0 / (1.0 + std::exp((rho - radius) / (0.5 * s))); break;
                default:
                    for (const auto& b : blobs) {
                        const double by = static_cast<double>(r) - b.y, bx = static_cast<double>(col) - b.x;
                        v += b.amp * std::exp(-(by * by + bx * bx) / (2 * b.sigma * b.sigma));
                    }
            }
            img.at(r, col) = v;
        }
    }
    img.normalize(1.0);
    return img;
}

std::vector<Image> make_dataset(const DatasetSpec& spec, std::mt19937_64& rng) {
    if (spec.size == 0) throw std::invalid_argument("dataset size must be positive");
    if (spec.source == "synthetic") {
        std::vector<Image> out;
        out.reserve(spec.size);
        for (std::size_t i = 0; i < spec.size; ++i) out.push_back(synthetic_image(rng, spec.image_size, spec.fov_uas));
        return out;
    }
    auto out = read_idx_images(spec.source, spec.image_size, spec.fov_uas, 1.0, spec.size);
    if (out.empty()) throw IoError(spec.source + ": no usable images");
    return out;
}

double sample_bilinear(const Image& image, double row, double col) {
    const double fr = std::floor(row), fc = std::floor(col);
    const double ar = row - fr, ac = col - fc;
    const auto r0 = static_cast<long>(fr), c0 = static_cast<long>(fc);
    const long n = static_cast<long>(image.size);
    auto px = [&](long r, long c) {
        return r < 0 || c < 0 || r >= n || c >= n ? 0.0 : image.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
    };
    double v = (1 - ar) * (1 - ac) * px(r0, c0);
    if (ac > 0) v += (1 - ar) * ac * px(r0, c0 + 1);
    if (ar > 0) v += ar * (1 - ac) * px(r0 + 1, c0);
    if (ar > 0 && ac > 0) v += ar * ac * px(r0 + 1, c0 + 1);
    return v;
}

Image warp(const Image& image, double angle, const std::vector<double>& dy, const std::vector<double>& dx) {
    const std::size_t n = image.size;
    if (dy.size() != n * n || dx.size() != n * n) throw std::invalid_argument("warp: displacement size mismatch");
    const double c = static_cast<double>(n / 2);
    const double ca = std::cos(angle), sa = std::sin(angle);
    Image out(n, image.fov_uas);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t col = 0; col < n; ++col) {
            const double y = static_cast<double>(r) + dy[r * n + col] - c;
            const double x = static_cast<double>(col) + dx[r * n + col] - c;
            out.at(r, col) = std::max(0.0, sample_bilinear(image, c + ca * y - sa * x, c + sa * y + ca * x));
        }
    }
    const double flux = image.total_flux();
    if (out.total_flux() > 0 && flux > 0) out.normalize(flux);
    return out;
}

Image augment(const Image& image, std::mt19937_64& rng, const AugmentConfig& config) {
    const std::size_t n = image.size;
    std::uniform_real_distribution<double> uni(0.0, 2.0 * kPi);
    const double angle = config.rotate ? uni(rng) : 0.0;
    std::vector<double> dy(n * n, 0.0), dx(n * n, 0.0);
    if (config.elastic && config.elastic_alpha_px > 0) {
        const std::size_t g = std::max<std::size_t>(config.elastic_grid, 2);
        std::normal_distribution<double> gauss(0.0, config.elastic_alpha_px);
        std::vector<double> cy(g * g), cx(g * g);
        for (double& v : cy) v = gauss(rng);
        for (double& v : cx) v = gauss(rng);
        // Bilinear interpolation of the control grid spanning the image.
        const double scale = static_cast<double>(g - 1) / static_cast<double>(n - 1);
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t col = 0; col < n; ++col) {
                const double gy = static_cast<double>(r) * scale, gx = static_cast<double>(col) * scale;
                const std::size_t y0 = std::min(static_cast<std::size_t>(gy), g - 2);
                const std::size_t x0 = std::min(static_cast<std::size_t>(gx), g - 2);
                const double ay = gy - static_cast<double>(y0), ax = gx - static_cast<double>(x0);
                auto interp = [&](const std::vector<double>& f) {
                    return (1 - ay) * ((1 - ax) * f[y0 * g + x0] + ax * f[y0 * g + x0 + 1]) +
                           ay * ((1 - ax) * f[(y0 + 1) * g + x0] + ax * f[(y0 + 1) * g + x0 + 1]);
                };
                dy[r * n + col] = interp(cy);
                dx[r * n + col] = interp(cx);
            }
        }
    }
    return warp(image, angle, dy, dx);
}

// --- configuration -----------------------------------------------------------

InputMode TrainConfig::decoder_mode() const {
    if (decoder) return *decoder;
    return noise().atmospheric ? InputMode::AmpClosure : InputMode::Complex;
}

Similarity TrainConfig::similarity() const {
    return decoder_mode() == InputMode::Complex ? Similarity::L1Blurred : Similarity::ShiftInvariant;
}

NoiseConfig TrainConfig::noise() const { return NoiseConfig::from_case(noise_case, thermal_eta); }

std::size_t TrainConfig::steps_per_epoch_or_default() const {
    if (steps_per_epoch > 0) return steps_per_epoch;
    return std::max<std::size_t>(1, (dataset.size + batch_size - 1) / batch_size);
}

void TrainConfig::validate() const {
    auto require = [](bool ok, const char* what) {
        if (!ok) throw std::invalid_argument(what);
    };
    require(std::isfinite(lambda1) && std::isfinite(lambda2), "lambda1/lambda2 must be finite");
    require(learning_rate > 0, "learning_rate must be positive");
    require(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1, "adam betas must lie in [0, 1)");
    require(adam_eps > 0, "adam_eps must be positive");
    require(epochs >= 1, "epochs must be >= 1");
    require(batch_size >= 1, "batch_size must be >= 1");
    require(trials >= 1, "trials must be >= 1");
    require(resolution > 0, "resolution must be positive");
    require(noise_case >= 1 && noise_case <= 6, "noise_case must be 1..6");
    require(thermal_eta >= 0, "thermal_eta must be >= 0");
    require(!site_file.empty(), "a site file is required");
    require(timestamps >= 1, "timestamps must be >= 1");
    require(gibbs_layers >= 1, "gibbs_layers must be >= 1");
    require(s1 > 0 && s2 > 0, "s1 and s2 must be positive");
    require(base_width >= 1 && levels >= 1, "decoder width and levels must be >= 1");
    require(mask_samples >= 1, "mask_samples must be >= 1");
    require(dataset.size >= 1, "dataset size must be >= 1");
}

std::shared_ptr<const ObservationContext> ObservationContext::build(const TrainConfig& config) {
    return build(config, load_sites(config.site_file));
}

std::shared_ptr<const ObservationContext> ObservationContext::build(const TrainConfig& config, SiteTable sites) {
    config.validate();
    Target target = Target::preset(config.target);
    Schedule schedule = Schedule::uniform(config.timestamps, config.min_elevation_deg);
    ObservationGeometry geometry = uv_coverage(sites, target, schedule);
    DftOperator dft(geometry, config.dataset.image_size, config.dataset.fov_uas);
    MeasurementLayout layout(geometry, config.decoder_mode());
    const std::size_t k = sites.size();
    std::vector<std::size_t> f0, f1, f2;
    for (std::size_t i = 0; i < layout.length(); ++i) {
        const bool used = layout.used(i);
        f0.push_back(used ? layout.first_site(i) : k);
        f1.push_back(used ? layout.second_site(i) : k);
        f2.push_back(used && layout.third_site(i) != MeasurementLayout::kNoSite ? layout.third_site(i) : k);
    }
    const double nominal = kNominalResolutionPx * static_cast<double>(config.dataset.image_size) / 32.0;
    auto ctx = std::make_shared<ObservationContext>(ObservationContext{
        std::move(sites), target, std::move(schedule), std::move(geometry), std::move(dft), std::move(layout),
        config.noise(), make_kernel(config.resolution, nominal, config.dataset.image_size / 2 - 1),
        config.similarity(), config.l1_reduction, {std::move(f0), std::move(f1), std::move(f2)}});
    return ctx;
}

ad::Tensor masked_measurements(const ad::Tensor& masks, const ad::Tensor& packed, const ObservationContext& ctx) {
    const std::size_t k = ctx.sites.size();
    if (masks.rank() != 2 || masks.dim(1) != k || packed.rank() != 2 || packed.dim(0) != masks.dim(0) ||
        packed.dim(1) != ctx.layout.length()) {
        throw ad::ShapeError("masked_measurements", "masks " + ad::to_string(masks.shape()) + " and data " +
                                                        ad::to_string(packed.shape()) + " do not match the layout");
    }
    const ad::Tensor ext = ad::concat({masks, ad::Tensor::constant({masks.dim(0), 1}, 1.0)}, 1);
    ad::Tensor s = ad::select_columns(ext, ctx.factor[0]) * ad::select_columns(ext, ctx.factor[1]);
    const bool pairs_only = std::all_of(ctx.factor[2].begin(), ctx.factor[2].end(), [k](std::size_t i) { return i == k; });
    if (!pairs_only) s = s * ad::select_columns(ext, ctx.factor[2]);
    return packed * s;
}

ad::Tensor blurred_targets(const std::vector<Image>& images, const ObservationContext& ctx) {
    if (images.empty()) throw std::invalid_argument("blurred_targets: empty batch");
    const std::size_t n = images.front().size;
    const Boundary boundary = ctx.similarity == Similarity::ShiftInvariant ? Boundary::Periodic : Boundary::Zero;
    std::vector<double> v;
    v.reserve(images.size() * n * n);
    for (const auto& img : images) {
        if (img.size != n) throw std::invalid_argument("blurred_targets: mixed image sizes");
        const Image b = blur(img, ctx.kernel, boundary);
        v.insert(v.end(), b.pixels.begin(), b.pixels.end());
    }
    return ad::Tensor::constant({images.size(), n, n}, std::move(v));
}

LossTerms total_loss(const std::vector<Image>& batch, const ad::Tensor& packed, const ad::Tensor& theta,
                     const DecodeFn& decode, const GibbsConfig& gibbs, const GibbsNoise& noise,
                     const ObservationContext& ctx, double lambda1, double lambda2) {
    if (noise.batch() != batch.size()) throw std::invalid_argument("total_loss: one noise draw per image required");
    LossTerms t;
    const MaskSample ms = sample_mask(theta, gibbs, noise);
    t.masks = ms.mask;
    t.recon = decode(masked_measurements(ms.mask, packed, ctx));
    const ad::Tensor target = blurred_targets(batch, ctx);
    t.similarity = ctx.similarity == Similarity::L1Blurred ? l1_loss(t.recon, target, ctx.reduction)
                                                           : shift_invariant_loss(t.recon, target);
    t.mask_l1 = ad::sum_axis(ms.mask, 1);
    t.hamiltonian = batch_hamiltonian(theta, ms.final_state);
    t.total = ad::mean(t.similarity + lambda1 * t.mask_l1 - lambda2 * t.hamiltonian);
    return t;
}

// --- optimizer ---------------------------------------------------------------

Adam::Adam(ad::ParameterSet& params, double learning_rate, double beta1, double beta2, double eps)
    : params_(params), lr_(learning_rate), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& name : params_.names()) {
        m_.emplace_back(params_.get(name).numel(), 0.0);
        v_.emplace_back(params_.get(name).numel(), 0.0);
    }
}

void Adam::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    const auto& names = params_.names();
    for (std::size_t i = 0; i < names.size(); ++i) {
        ad::Tensor& p = params_.get(names[i]);
        if (!p.has_grad()) continue;
        const auto g = p.grad();
        auto x = p.mutable_values();
        for (std::size_t j = 0; j < x.size(); ++j) {
            m_[i][j] = b1_ * m_[i][j] + (1 - b1_) * g[j];
            v_[i][j] = b2_ * v_[i][j] + (1 - b2_) * g[j] * g[j];
            x[j] -= lr_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_);
        }
    }
}

// --- training ----------------------------------------------------------------

GibbsConfig gibbs_config(const TrainConfig& config, std::vector<Ordering> orderings) {
    GibbsConfig g;
    g.layers = config.gibbs_layers;
    g.s1 = config.s1;
    g.s2 = config.s2;
    g.orderings = std::move(orderings);
    return g;
}

std::vector<std::vector<double>> draw_masks(const IsingModel& theta, const GibbsConfig& gibbs, std::mt19937_64& rng,
                                            std::size_t count) {
    std::vector<std::vector<double>> out;
    constexpr std::size_t kChunk = 256;
    for (std::size_t done = 0; done < count; done += kChunk) {
        auto part = sample_masks(theta, gibbs, rng, std::min(kChunk, count - done));
        out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
    return out;
}

namespace {

double selected(const std::vector<double>& mask) {
    return static_cast<double>(std::count_if(mask.begin(), mask.end(), [](double m) { return m > 0.5; }));
}

}  // namespace

DecoderConfig decoder_config(const TrainConfig& config, const ObservationContext& ctx) {
    DecoderConfig dc = DecoderConfig::for_layout(ctx.layout, config.base_width, config.levels);
    dc.image_size = config.dataset.image_size;
    dc.phase_hidden = config.phase_hidden;
    dc.activation = config.activation;
    return dc;
}

ad::Tensor pack_batch(const std::vector<Image>& images, const ObservationContext& ctx, std::mt19937_64& rng) {
    std::vector<double> rows;
    rows.reserve(images.size() * ctx.layout.length());
    for (const auto& img : images) {
        const auto y = simulate_packed(img, ctx.dft, ctx.geometry, ctx.layout, ctx.sites, ctx.noise, rng);
        rows.insert(rows.end(), y.begin(), y.end());
    }
    return ad::Tensor::constant({images.size(), ctx.layout.length()}, std::move(rows));
}

namespace {

ad::Tensor mask_tensor(const std::vector<std::vector<double>>& masks, std::size_t begin, std::size_t end) {
    std::vector<double> v;
    for (std::size_t i = begin; i < end; ++i) v.insert(v.end(), masks[i].begin(), masks[i].end());
    return ad::Tensor::constant({end - begin, masks[begin].size()}, std::move(v));
}

}  // namespace

TrialResult train_trial(const TrainConfig& config, const ObservationContext& ctx, const std::vector<Image>& dataset,
                        std::size_t trial, const ProgressFn& progress) {
    config.validate();
    if (dataset.empty()) throw std::invalid_argument("training needs a nonempty dataset");
    const std::size_t k = ctx.sites.size();
    TrialResult res;
    res.seed = derive_seed(config.seed, trial, 0);
    std::mt19937_64 rng_init(derive_seed(config.seed, trial, kInit));
    std::mt19937_64 rng_data(derive_seed(config.seed, trial, kData));
    std::mt19937_64 rng_aug(derive_seed(config.seed, trial, kAugment));
    std::mt19937_64 rng_gibbs(derive_seed(config.seed, trial, kGibbs));
    std::mt19937_64 rng_meas(derive_seed(config.seed, trial, kMeasure));
    std::mt19937_64 rng_eval(derive_seed(config.seed, trial, kEval));

    res.orderings = fresh_orderings(rng_init, k, config.gibbs_layers);
    const GibbsConfig gibbs = gibbs_config(config, res.orderings);
    res.params = std::make_shared<ad::ParameterSet>();
    ad::Tensor& theta_upper = res.params->add("theta", ad::Tensor::parameter({k * (k + 1) / 2}, std::vector<double>(k * (k + 1) / 2, 0.0)));
    res.decoder = std::make_shared<Decoder>(decoder_config(config, ctx), *res.params, rng_init);
    Adam adam(*res.params, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps);

    const std::size_t spe = config.steps_per_epoch_or_default();
    const std::size_t total_steps = config.epochs * spe;
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng_data);
    std::size_t cursor = 0;
    const Decoder& decoder = *res.decoder;
    const DecodeFn decode = [&decoder](const ad::Tensor& x) { return decoder(x); };

    for (std::size_t step = 0; step < total_steps; ++step) {
        std::vector<Image> batch;
        for (std::size_t b = 0; b < config.batch_size; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng_data);
                cursor = 0;
            }
            const Image& src = dataset[order[cursor++]];
            batch.push_back(config.dataset.augment_enabled ? augment(src, rng_aug, config.dataset.augment) : src);
        }
        const ad::Tensor packed = pack_batch(batch, ctx, rng_meas);
        const GibbsNoise noise = fresh_noise(rng_gibbs, k, config.gibbs_layers, config.batch_size);
        const LossTerms terms = total_loss(batch, packed, theta_matrix(theta_upper, k), decode, gibbs, noise, ctx,
                                           config.lambda1, config.lambda2);
        const double loss = terms.total.item();
        if (!std::isfinite(loss)) {
            throw DivergenceError("non-finite loss at trial " + std::to_string(trial) + ", step " + std::to_string(step));
        }
        res.params->backward(terms.total);
        adam.step();
        auto batch_mean = [](const ad::Tensor& t) { return ad::mean(t).item(); };
        res.history.push_back({step, step / spe, loss, batch_mean(terms.similarity), batch_mean(terms.mask_l1),
                               batch_mean(terms.hamiltonian)});
        if (progress) progress({trial, step + 1, total_steps, loss});
    }

    res.theta = IsingModel::from_upper(k, theta_upper.values());
    res.theta.set_names(ctx.sites.names());
    res.masks = draw_masks(res.theta, gibbs, rng_eval, config.mask_samples);
    res.marginals = estimate_marginals(res.masks);
    double total = 0.0;
    for (const auto& m : res.masks) total += selected(m);
    res.mean_count = total / static_cast<double>(res.masks.size());
    return res;
}

std::pair<Image, Image> reconstruction_spread(const TrialResult& trial, const ObservationContext& ctx,
                                              const Image& truth, const std::vector<std::vector<double>>& masks,
                                              std::mt19937_64& rng) {
    if (masks.empty()) throw std::invalid_argument("reconstruction_spread needs at least one mask");
    const std::size_t n = truth.size, npix = n * n;
    std::vector<double> sum(npix, 0.0), sq(npix, 0.0);
    constexpr std::size_t kChunk = 32;
    for (std::size_t begin = 0; begin < masks.size(); begin += kChunk) {
        const std::size_t end = std::min(masks.size(), begin + kChunk);
        const std::vector<Image> copies(end - begin, truth);
        const ad::Tensor recon = (*trial.decoder)(masked_measurements(mask_tensor(masks, begin, end), pack_batch(copies, ctx, rng), ctx));
        const auto v = recon.values();
        for (std::size_t b = 0; b < end - begin; ++b)
            for (std::size_t i = 0; i < npix; ++i) {
                sum[i] += v[b * npix + i];
                sq[i] += v[b * npix + i] * v[b * npix + i];
            }
    }
    Image mean(n, truth.fov_uas), stdev(n, truth.fov_uas);
    const double count = static_cast<double>(masks.size());
    for (std::size_t i = 0; i < npix; ++i) {
        mean.pixels[i] = sum[i] / count;
        stdev.pixels[i] = std::sqrt(std::max(0.0, sq[i] / count - mean.pixels[i] * mean.pixels[i]));
    }
    return {mean, stdev};
}

std::vector<double> RunArtifacts::count_histogram() const {
    const std::size_t k = context->sites.size();
    std::vector<double> hist(k + 1, 0.0);
    double total = 0.0;
    for (const auto& t : trials)
        for (const auto& m : t.masks) {
            hist[static_cast<std::size_t>(selected(m))] += 1.0;
            total += 1.0;
        }
    for (double& h : hist) h /= total;
    return hist;
}

double RunArtifacts::mean_count() const {
    double total = 0.0;
    for (const auto& t : trials) total += t.mean_count;
    return total / static_cast<double>(trials.size());
}

std::vector<Image> training_set(const TrainConfig& config) {
    std::mt19937_64 rng(derive_seed(config.seed, 0, kData));
    return make_dataset(config.dataset, rng);
}

std::vector<Image> held_out_set(const TrainConfig& config, std::size_t count) {
    std::mt19937_64 rng(derive_seed(config.seed, 1, kHeldOut));
    std::vector<Image> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i)
        out.push_back(synthetic_image(rng, config.dataset.image_size, config.dataset.fov_uas));
    return out;
}

RunArtifacts train_joint(const TrainConfig& config, const std::vector<Image>& dataset, const ProgressFn& progress) {
    RunArtifacts run;
    run.config = config;
    run.context = ObservationContext::build(config);
    const std::size_t k = run.context->sites.size();
    for (std::size_t t = 1; t <= config.trials; ++t) run.trials.push_back(train_trial(config, *run.context, dataset, t, progress));

    std::vector<double> mean(k * k, 0.0), var(k * k, 0.0);
    const double n = static_cast<double>(run.trials.size());
    for (const auto& t : run.trials)
        for (std::size_t i = 0; i < k * k; ++i) mean[i] += t.theta.matrix()[i] / n;
    for (const auto& t : run.trials)
        for (std::size_t i = 0; i < k * k; ++i) var[i] += (t.theta.matrix()[i] - mean[i]) * (t.theta.matrix()[i] - mean[i]) / n;
    for (double& v : var) v = std::sqrt(v);
    run.theta_mean = IsingModel(k, mean);
    run.theta_std = IsingModel(k, var);
    run.theta_mean.set_names(run.context->sites.names());
    run.theta_std.set_names(run.context->sites.names());

    std::mt19937_64 held_out(derive_seed(config.seed, 0, kHeldOut));
    run.recon_truth = synthetic_image(held_out, config.dataset.image_size, config.dataset.fov_uas);
    const auto& first = run.trials.front();
    const auto masks = draw_masks(first.theta, gibbs_config(config, first.orderings), held_out, config.recon_samples);
    std::tie(run.recon_mean, run.recon_std) = reconstruction_spread(first, *run.context, run.recon_truth, masks, held_out);
    return run;
}

// --- run directories ---------------------------------------------------------

namespace {

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    return out;
}

const char* kRunReadme = R"(Run directory layout

run_config.cfg          full configuration of the run (re-runnable with --config)
summary.csv             trial,seed,mean_count,final_loss
theta_trial_k.csv       learned Ising parameters of trial k; header row of site
                        names, then one row per site (diagonal = activity)
theta_mean.csv          element-wise mean over trials
theta_std.csv           element-wise population standard deviation over trials
orderings_trial_k.csv   Gibbs site order of each layer (one row per layer)
decoder_trial_k.bin     trained decoder weights of trial k
loss_history.csv        trial,step,epoch,total,similarity,mask_l1,hamiltonian
                        (batch means per optimizer step)
masks_sample.csv        trial,sample,<site...>: relaxed masks drawn after training
marginals.csv           site,trial_1..trial_n,mean: fraction of samples with M > 0.5
count_histogram.csv     count,fraction: selected-telescope counts over all samples
recon_truth.csv/png     held-out test image
recon_mean.csv/png      per-pixel mean of reconstructions over sampled arrays
recon_std.csv/png       per-pixel standard deviation of those reconstructions
)";

}  // namespace

void write_run_directory(const std::string& dir, const RunArtifacts& run, const std::string& config_text) {
    const fs::path root(dir);
    fs::create_directories(root);
    {
        auto out = open_out(root / "run_config.cfg");
        out << config_text;
    }
    {
        auto out = open_out(root / "README.txt");
        out << kRunReadme;
    }
    const auto names = run.context->sites.names();
    auto summary = open_out(root / "summary.csv");
    csv::write_row(summary, std::vector<std::string>{"trial", "seed", "mean_count", "final_loss"});
    auto history = open_out(root / "loss_history.csv");
    csv::write_row(history, std::vector<std::string>{"trial", "step", "epoch", "total", "similarity", "mask_l1", "hamiltonian"});
    auto masks = open_out(root / "masks_sample.csv");
    std::vector<std::string> header{"trial", "sample"};
    header.insert(header.end(), names.begin(), names.end());
    csv::write_row(masks, header);
    for (std::size_t t = 0; t < run.trials.size(); ++t) {
        const auto& tr = run.trials[t];
        const std::string k = std::to_string(t + 1);
        write_theta_csv((root / ("theta_trial_" + k + ".csv")).string(), tr.theta);
        {
            auto out = open_out(root / ("orderings_trial_" + k + ".csv"));
            for (const auto& o : tr.orderings) {
                std::vector<std::string> row;
                for (std::size_t j : o) row.push_back(std::to_string(j));
                csv::write_row(out, row);
            }
        }
        save_parameters((root / ("decoder_trial_" + k + ".bin")).string(), *tr.params, tr.decoder->parameter_names());
        csv::write_row(summary, std::vector<std::string>{k, std::to_string(tr.seed), csv::format_double(tr.mean_count),
                                                         csv::format_double(tr.history.empty() ? 0.0 : tr.history.back().total)});
        for (const auto& h : tr.history) {
            csv::write_row(history, std::vector<std::string>{k, std::to_string(h.step), std::to_string(h.epoch),
                                                             csv::format_double(h.total), csv::format_double(h.similarity),
                                                             csv::format_double(h.mask_l1), csv::format_double(h.hamiltonian)});
        }
        for (std::size_t s = 0; s < tr.masks.size(); ++s) {
            std::vector<std::string> row{k, std::to_string(s)};
            for (double m : tr.masks[s]) row.push_back(csv::format_double(m));
            csv::write_row(masks, row);
        }
    }
    write_theta_csv((root / "theta_mean.csv").string(), run.theta_mean);
    write_theta_csv((root / "theta_std.csv").string(), run.theta_std);
    {
        auto out = open_out(root / "marginals.csv");
        std::vector<std::string> head{"site"};
        for (std::size_t t = 0; t < run.trials.size(); ++t) head.push_back("trial_" + std::to_string(t + 1));
        head.push_back("mean");
        csv::write_row(out, head);
        for (std::size_t j = 0; j < names.size(); ++j) {
            std::vector<std::string> row{names[j]};
            double mean = 0.0;
            for (const auto& tr : run.trials) {
                row.push_back(csv::format_double(tr.marginals[j]));
                mean += tr.marginals[j] / static_cast<double>(run.trials.size());
            }
            row.push_back(csv::format_double(mean));
            csv::write_row(out, row);
        }
    }
    {
        auto out = open_out(root / "count_histogram.csv");
        csv::write_row(out, std::vector<std::string>{"count", "fraction"});
        const auto hist = run.count_histogram();
        for (std::size_t c = 0; c < hist.size(); ++c)
            csv::write_row(out, std::vector<std::string>{std::to_string(c), csv::format_double(hist[c])});
    }
    for (const auto& [name, img] : {std::pair<const char*, const Image*>{"recon_truth", &run.recon_truth},
                                    {"recon_mean", &run.recon_mean},
                                    {"recon_std", &run.recon_std}}) {
        write_grid_csv((root / (std::string(name) + ".csv")).string(), *img);
        write_png((root / (std::string(name) + ".png")).string(), *img);
    }
}

LoadedRun load_run(const std::string& dir, std::size_t trial) {
    const fs::path root(dir);
    const fs::path cfg_path = root / "run_config.cfg";
    if (!fs::exists(cfg_path)) throw IoError(dir + ": missing run_config.cfg (not a run directory?)");
    LoadedRun run;
    run.config = load_config(cfg_path.string()).train;
    run.context = ObservationContext::build(run.config);
    const std::string k = std::to_string(trial);
    const std::size_t n = run.context->sites.size();
    for (const char* f : {"theta_trial_", "orderings_trial_", "decoder_trial_"}) {
        const fs::path p = root / (std::string(f) + k + (std::string(f) == "decoder_trial_" ? ".bin" : ".csv"));
        if (!fs::exists(p)) throw IoError(dir + ": missing " + p.filename().string());
    }
    TrialResult& tr = run.trial;
    tr.theta = read_theta_csv((root / ("theta_trial_" + k + ".csv")).string());
    if (tr.theta.size() != n) throw IoError(dir + ": theta size does not match the site file");
    {
        const std::string path = (root / ("orderings_trial_" + k + ".csv")).string();
        std::ifstream in(path);
        for (const auto& row : csv::read(in)) {
            Ordering o;
            for (const auto& f : row.fields) o.push_back(static_cast<std::size_t>(csv::parse_double(f, path, row.line)));
            tr.orderings.push_back(std::move(o));
        }
        gibbs_config(run.config, tr.orderings).validate(n);
    }
    tr.params = std::make_shared<ad::ParameterSet>();
    std::mt19937_64 rng(0);
    tr.params->add("theta", ad::Tensor::parameter({n * (n + 1) / 2}, tr.theta.upper()));
    tr.decoder = std::make_shared<Decoder>(decoder_config(run.config, *run.context), *tr.params, rng);
    load_parameters((root / ("decoder_trial_" + k + ".bin")).string(), *tr.params);
    return run;
}

// --- protocols ---------------------------------------------------------------

std::vector<SweepCell> sweep_regularization(const TrainConfig& config, const std::vector<double>& lambda1,
                                            const std::vector<double>& lambda2, const std::vector<Image>& dataset,
                                            const ProgressFn& progress) {
    if (lambda1.empty() || lambda2.empty()) throw std::invalid_argument("sweep grid must be nonempty");
    const auto ctx = ObservationContext::build(config);
    const std::size_t k = ctx->sites.size();
    std::vector<SweepCell> out;
    for (double l2 : lambda2) {
        for (double l1 : lambda1) {
            TrainConfig c = config;
            c.lambda1 = l1;
            c.lambda2 = l2;
            std::vector<double> counts;
            for (std::size_t t = 1; t <= c.trials; ++t) {
                const TrialResult tr = train_trial(c, *ctx, dataset, t, progress);
                for (const auto& m : tr.masks) counts.push_back(selected(m));
            }
            SweepCell cell{l1, l2, 0.0, 0.0, std::vector<double>(k + 1, 0.0)};
            for (double v : counts) {
                cell.mean_count += v / static_cast<double>(counts.size());
                cell.histogram[static_cast<std::size_t>(v)] += 1.0 / static_cast<double>(counts.size());
            }
            for (double v : counts) cell.std_count += (v - cell.mean_count) * (v - cell.mean_count);
            cell.std_count = std::sqrt(cell.std_count / static_cast<double>(counts.size()));
            out.push_back(std::move(cell));
        }
    }
    return out;
}

std::vector<ResolutionRow> resolution_sweep(const TrainConfig& config, const std::vector<double>& fractions,
                                            const std::vector<Image>& dataset, const ProgressFn& progress) {
    std::vector<ResolutionRow> out;
    for (double f : fractions) {
        if (!(f > 0)) throw std::invalid_argument("resolution fractions must be positive");
        TrainConfig c = config;
        c.resolution = f;
        const auto ctx = ObservationContext::build(c);
        const std::size_t k = ctx->sites.size();
        std::vector<double> mean(k * k, 0.0);
        double count = 0.0;
        for (std::size_t t = 1; t <= c.trials; ++t) {
            const TrialResult tr = train_trial(c, *ctx, dataset, t, progress);
            for (std::size_t i = 0; i < k * k; ++i) mean[i] += tr.theta.matrix()[i] / static_cast<double>(c.trials);
            count += tr.mean_count / static_cast<double>(c.trials);
        }
        ResolutionRow row{f, IsingModel(k, mean), count};
        row.theta_mean.set_names(ctx->sites.names());
        out.push_back(std::move(row));
    }
    return out;
}

SwapResult swap_eval(const std::vector<const TrialResult*>& runs,
                     const std::vector<std::shared_ptr<const ObservationContext>>& contexts,
                     const std::vector<TrainConfig>& configs, const std::vector<std::string>& labels,
                     const std::vector<Image>& test_set, std::uint64_t seed) {
    const std::size_t r = runs.size();
    if (r < 2 || contexts.size() != r || configs.size() != r || labels.size() != r) {
        throw std::invalid_argument("swap evaluation needs at least two runs with matching contexts and labels");
    }
    if (test_set.empty()) throw std::invalid_argument("swap evaluation needs a test set");
    const std::size_t k = contexts.front()->sites.size();
    for (const auto& c : contexts)
        if (c->sites.size() != k) throw std::invalid_argument("swapped runs must share the same site count");

    SwapResult out;
    out.labels = labels;
    std::vector<std::vector<std::vector<double>>> masks(r);
    for (std::size_t j = 0; j < r; ++j) {
        std::mt19937_64 rng(derive_seed(seed, j, kEval));
        masks[j] = draw_masks(runs[j]->theta, gibbs_config(configs[j], runs[j]->orderings), rng, test_set.size());
        double total = 0.0;
        for (const auto& m : masks[j]) total += selected(m);
        out.mean_counts.push_back(total / static_cast<double>(test_set.size()));
    }
    out.loss.assign(r, std::vector<double>(r, 0.0));
    constexpr std::size_t kChunk = 32;
    for (std::size_t i = 0; i < r; ++i) {
        ObservationContext eval = *contexts[i];
        eval.similarity = Similarity::ShiftInvariant;
        for (std::size_t j = 0; j < r; ++j) {
            std::mt19937_64 rng(derive_seed(seed, i, kMeasure));  // same measurement noise along a row
            double total = 0.0;
            for (std::size_t begin = 0; begin < test_set.size(); begin += kChunk) {
                const std::size_t end = std::min(test_set.size(), begin + kChunk);
                const std::vector<Image> batch(test_set.begin() + static_cast<std::ptrdiff_t>(begin),
                                               test_set.begin() + static_cast<std::ptrdiff_t>(end));
                const ad::Tensor recon =
                    (*runs[i]->decoder)(masked_measurements(mask_tensor(masks[j], begin, end), pack_batch(batch, eval, rng), eval));
                const ad::Tensor loss = shift_invariant_loss(recon, blurred_targets(batch, eval));
                for (double v : loss.values()) total += v;
            }
            out.loss[i][j] = total / static_cast<double>(test_set.size());
        }
    }
    return out;
}

}  // namespace codesign
