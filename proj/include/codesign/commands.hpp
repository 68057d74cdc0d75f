#pragma once

// The experiment commands behind the command-line tool. Each one writes its
// tables into a directory and returns the in-memory results.

#include "codesign/config.hpp"
#include "codesign/ising.hpp"
#include "codesign/train.hpp"

#include <string>
#include <vector>

namespace codesign {

struct SimulateSummary {
    std::size_t uv_rows = 0;
    std::size_t measurement_rows = 0;
    std::size_t closure_rows = 0;
};

/// uv.csv, measurements.csv (+ closure.csv in amplitude/closure form),
/// truth.csv/png and run_config.cfg.
SimulateSummary run_simulate(const ExperimentConfig& config, const std::string& out_dir);

RunArtifacts run_train(const ExperimentConfig& config, const std::string& out_dir, const ProgressFn& progress = {});

/// sweep.csv: lambda1,lambda2,mean_count,std_count,count_0..count_K.
std::vector<SweepCell> run_sweep(const ExperimentConfig& config, const std::string& out_dir,
                                 const ProgressFn& progress = {});

/// resolution.csv: fraction,mean_count,<activity per site>; plus
/// theta_fraction_<f>.csv for every fraction.
std::vector<ResolutionRow> run_resolution(const ExperimentConfig& config, const std::string& out_dir,
                                          const ProgressFn& progress = {});

/// swap.csv (rows: decoder of run i, columns: masks of run j) and
/// swap_counts.csv. Uses trial 1 of every run directory in config.swap_runs.
SwapResult run_swap(const ExperimentConfig& config, const std::string& out_dir);

/// Entries are site names, optionally "NAME=+1" / "NAME=-1" (default +1).
PartialAssignment parse_fixed_sites(const IsingModel& model, const std::vector<std::string>& fixed);

/// Conditions on the fixed sites and writes the model over the rest.
ConditionalModel run_conditional(const IsingModel& model, const std::vector<std::string>& fixed,
                                 const std::string& out_path);

CliqueReport run_cliques(const IsingModel& model, double tau, const std::string& out_path);

}  // namespace codesign
