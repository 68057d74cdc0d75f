#pragma once

// Flat `key: value` experiment files. Unknown keys, malformed values and
// missing input files are rejected with the offending line; relative paths
// are resolved against the file's directory.

#include "codesign/train.hpp"

#include <istream>
#include <string>
#include <vector>

namespace codesign {

struct ExperimentConfig {
    TrainConfig train;
    bool seed_given = false;
    std::string out_dir = "run";
    /// Image for `simulate`: "point", "synthetic" or a CSV grid path.
    std::string truth = "synthetic";
    std::vector<double> sweep_lambda1{-0.05, -0.005, 0.005, 0.05};
    std::vector<double> sweep_lambda2{0.005};
    std::vector<double> fractions{1.0, 0.75, 0.5, 0.25};
    std::vector<std::string> swap_runs;
    std::size_t swap_test_size = 1000;
};

/// Directory holding the bundled site files.
std::string default_data_dir();

ExperimentConfig parse_config(std::istream& in, const std::string& source, const std::string& base_dir);
ExperimentConfig load_config(const std::string& path);
/// Defaults with the bundled twelve-site array.
ExperimentConfig default_config();
/// Serializes every key; parsing the result reproduces the config.
std::string config_text(const ExperimentConfig& config);

/// Applies one `key: value` pair (same rules as the file parser).
void set_config_value(ExperimentConfig& config, const std::string& key, const std::string& value,
                      const std::string& base_dir);

}  // namespace codesign
