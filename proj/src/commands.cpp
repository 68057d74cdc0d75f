#include "codesign/commands.hpp"

#include "codesign/errors.hpp"
#include "csv.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace codesign {

namespace {

// seed streams private to the simulate command
constexpr std::uint64_t kTruthStream = 16, kNoiseStream = 17;

std::ofstream open_out(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    return out;
}

fs::path prepare(const std::string& dir, const ExperimentConfig& config) {
    const fs::path root(dir);
    fs::create_directories(root);
    open_out(root / "run_config.cfg") << config_text(config);
    return root;
}

void require_finite(double v, const std::string& what) {
    if (!std::isfinite(v)) throw DivergenceError(what + " is not finite");
}

Image truth_image(const ExperimentConfig& config) {
    const auto& d = config.train.dataset;
    if (config.truth == "point") return point_source(d.image_size, d.fov_uas);
    if (config.truth == "synthetic") {
        std::mt19937_64 rng(derive_seed(config.train.seed, 0, kTruthStream));
        return synthetic_image(rng, d.image_size, d.fov_uas);
    }
    Image img = read_grid_csv(config.truth, d.fov_uas);
    if (img.size != d.image_size) {
        throw IoError(config.truth + ": image is " + std::to_string(img.size) + " px, config expects " +
                      std::to_string(d.image_size));
    }
    return img;
}

std::string fraction_label(double f) {
    std::ostringstream s;
    s << f;
    return s.str();
}

}  // namespace

SimulateSummary run_simulate(const ExperimentConfig& config, const std::string& out_dir) {
    const auto& tc = config.train;
    const fs::path root = prepare(out_dir, config);
    const auto ctx = ObservationContext::build(tc);
    const Image truth = truth_image(config);

    std::mt19937_64 rng(derive_seed(tc.seed, 0, kNoiseStream));
    MeasurementSet set = corrupt(dft_visibility(truth, ctx->geometry), ctx->geometry, ctx->sites, ctx->noise, rng);
    SimulateSummary summary;
    if (tc.decoder_mode() == InputMode::AmpClosure) {
        set = to_amp_closure(set, ctx->geometry);
        write_closure_csv((root / "closure.csv").string(), set, ctx->schedule, ctx->sites);
        summary.closure_rows = set.triangles.size();
        for (double c : set.closure) require_finite(c, "closure phase");
    } else {
        for (const auto& v : set.visibilities) require_finite(std::abs(v), "visibility");
    }
    write_uv_csv((root / "uv.csv").string(), ctx->geometry, ctx->schedule, ctx->sites);
    write_measurements_csv((root / "measurements.csv").string(), set, ctx->geometry, ctx->schedule, ctx->sites);
    write_grid_csv((root / "truth.csv").string(), truth);
    write_png((root / "truth.png").string(), truth);
    summary.uv_rows = ctx->geometry.visible_count();
    summary.measurement_rows = summary.uv_rows;
    return summary;
}

RunArtifacts run_train(const ExperimentConfig& config, const std::string& out_dir, const ProgressFn& progress) {
    const auto& tc = config.train;
    RunArtifacts run = train_joint(tc, training_set(tc), progress);
    for (const auto& t : run.trials)
        for (double v : t.theta.matrix()) require_finite(v, "learned theta");
    write_run_directory(out_dir, run, config_text(config));
    return run;
}

std::vector<SweepCell> run_sweep(const ExperimentConfig& config, const std::string& out_dir,
                                 const ProgressFn& progress) {
    const auto& tc = config.train;
    const auto cells = sweep_regularization(tc, config.sweep_lambda1, config.sweep_lambda2, training_set(tc), progress);
    const fs::path root = prepare(out_dir, config);
    auto out = open_out(root / "sweep.csv");
    out << "lambda1,lambda2,mean_count,std_count";
    const std::size_t k = cells.front().histogram.size();
    for (std::size_t c = 0; c < k; ++c) out << ",count_" << c;
    out << '\n';
    for (const auto& cell : cells) {
        require_finite(cell.mean_count, "mean count");
        out << csv::format_double(cell.lambda1) << ',' << csv::format_double(cell.lambda2) << ','
            << csv::format_double(cell.mean_count) << ',' << csv::format_double(cell.std_count);
        for (double h : cell.histogram) out << ',' << csv::format_double(h);
        out << '\n';
    }
    return cells;
}

std::vector<ResolutionRow> run_resolution(const ExperimentConfig& config, const std::string& out_dir,
                                          const ProgressFn& progress) {
    const auto& tc = config.train;
    const auto rows = resolution_sweep(tc, config.fractions, training_set(tc), progress);
    const fs::path root = prepare(out_dir, config);
    auto out = open_out(root / "resolution.csv");
    out << "fraction,mean_count";
    for (const auto& name : rows.front().theta_mean.names()) out << ',' << name;
    out << '\n';
    for (const auto& row : rows) {
        out << csv::format_double(row.fraction) << ',' << csv::format_double(row.mean_count);
        for (std::size_t j = 0; j < row.theta_mean.size(); ++j) {
            require_finite(row.theta_mean.activity(j), "activity");
            out << ',' << csv::format_double(row.theta_mean.activity(j));
        }
        out << '\n';
        write_theta_csv((root / ("theta_fraction_" + fraction_label(row.fraction) + ".csv")).string(), row.theta_mean);
    }
    return rows;
}

SwapResult run_swap(const ExperimentConfig& config, const std::string& out_dir) {
    if (config.swap_runs.size() < 2) throw std::invalid_argument("swap needs at least two run directories");
    std::vector<LoadedRun> loaded;
    for (const auto& dir : config.swap_runs) loaded.push_back(load_run(dir, 1));

    std::vector<const TrialResult*> runs;
    std::vector<std::shared_ptr<const ObservationContext>> contexts;
    std::vector<TrainConfig> configs;
    std::vector<std::string> labels;
    for (std::size_t i = 0; i < loaded.size(); ++i) {
        runs.push_back(&loaded[i].trial);
        contexts.push_back(loaded[i].context);
        configs.push_back(loaded[i].config);
        std::string label = fs::path(config.swap_runs[i]).filename().string();
        if (label.empty()) label = fs::path(config.swap_runs[i]).parent_path().filename().string();
        labels.push_back(label);
        if (loaded[i].config.dataset.image_size != loaded.front().config.dataset.image_size) {
            throw std::invalid_argument("swapped runs must share the image size");
        }
    }
    TrainConfig test_cfg = config.train;
    test_cfg.dataset.image_size = loaded.front().config.dataset.image_size;
    test_cfg.dataset.fov_uas = loaded.front().config.dataset.fov_uas;
    const auto test = held_out_set(test_cfg, config.swap_test_size);
    const SwapResult result = swap_eval(runs, contexts, configs, labels, test, config.train.seed);

    const fs::path root = prepare(out_dir, config);
    auto out = open_out(root / "swap.csv");
    out << "decoder";
    for (const auto& l : labels) out << ',' << l;
    out << '\n';
    for (std::size_t i = 0; i < labels.size(); ++i) {
        out << labels[i];
        for (double v : result.loss[i]) {
            require_finite(v, "swap loss");
            out << ',' << csv::format_double(v);
        }
        out << '\n';
    }
    auto counts = open_out(root / "swap_counts.csv");
    counts << "masks,mean_count\n";
    for (std::size_t j = 0; j < labels.size(); ++j)
        counts << labels[j] << ',' << csv::format_double(result.mean_counts[j]) << '\n';
    return result;
}

PartialAssignment parse_fixed_sites(const IsingModel& model, const std::vector<std::string>& fixed) {
    PartialAssignment known(model.size());
    for (const auto& entry : fixed) {
        std::string name = entry;
        int value = 1;
        if (const auto eq = entry.find('='); eq != std::string::npos) {
            name = entry.substr(0, eq);
            const std::string v = entry.substr(eq + 1);
            if (v == "+1" || v == "1") {
                value = 1;
            } else if (v == "-1") {
                value = -1;
            } else {
                throw std::invalid_argument("site value must be +1 or -1: " + entry);
            }
        }
        auto idx = model.index_of(name);
        if (!idx) throw std::invalid_argument("unknown site '" + name + "'");
        if (known[*idx]) throw std::invalid_argument("site '" + name + "' given twice");
        known[*idx] = value;
    }
    return known;
}

ConditionalModel run_conditional(const IsingModel& model, const std::vector<std::string>& fixed,
                                 const std::string& out_path) {
    const PartialAssignment known = parse_fixed_sites(model, fixed);
    ConditionalModel cond = conditional_model(model, known);
    write_theta_csv(out_path, cond.model);
    return cond;
}

CliqueReport run_cliques(const IsingModel& model, double tau, const std::string& out_path) {
    if (!std::isfinite(tau)) throw std::invalid_argument("tau must be finite");
    CliqueReport report = find_three_cliques(model, tau);
    auto out = open_out(out_path);
    write_cliques_csv(out, report, model.names());
    return report;
}

}  // namespace codesign
