#include "codesign/config.hpp"

#include "codesign/errors.hpp"
#include "csv.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

#ifndef CODESIGN_DATA_DIR
#define CODESIGN_DATA_DIR "data"
#endif

namespace codesign {

namespace fs = std::filesystem;

std::string default_data_dir() { return CODESIGN_DATA_DIR; }

namespace {

double to_double(const std::string& v) {
    double out = 0.0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(out)) {
        throw std::invalid_argument("expected a number, got '" + v + "'");
    }
    return out;
}

std::uint64_t to_uint(const std::string& v) {
    std::uint64_t out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
        throw std::invalid_argument("expected a nonnegative integer, got '" + v + "'");
    }
    return out;
}

bool to_bool(std::string v) {
    for (char& c : v) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (v == "true" || v == "yes" || v == "on" || v == "1") return true;
    if (v == "false" || v == "no" || v == "off" || v == "0") return false;
    throw std::invalid_argument("expected a boolean, got '" + v + "'");
}

std::vector<std::string> to_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    for (std::string item; std::getline(ss, item, ',');) {
        item = csv::trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::vector<double> to_doubles(const std::string& v) {
    std::vector<double> out;
    for (const auto& s : to_list(v)) out.push_back(to_double(s));
    if (out.empty()) throw std::invalid_argument("expected a comma-separated list of numbers");
    return out;
}

std::string resolve(const std::string& path, const std::string& base_dir, bool must_exist) {
    fs::path p(path);
    if (p.is_relative() && !base_dir.empty()) p = fs::path(base_dir) / p;
    p = p.lexically_normal();
    if (must_exist && !fs::exists(p)) throw std::invalid_argument("file not found: " + p.string());
    return fs::absolute(p).string();
}

std::string fmt(double v) { return csv::format_double(v); }

std::string join(const std::vector<double>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + fmt(v[i]);
    return out;
}

std::string mode_name(InputMode m) { return m == InputMode::Complex ? "A" : "B"; }

std::string activation_name(Activation a) {
    switch (a) {
        case Activation::Softplus: return "softplus";
        case Activation::Relu: return "relu";
        case Activation::Tanh: return "tanh";
    }
    return "softplus";
}

}  // namespace

void set_config_value(ExperimentConfig& config, const std::string& key, const std::string& value,
                      const std::string& base_dir) {
    static const std::map<std::string, std::function<void(ExperimentConfig&, const std::string&, const std::string&)>>
        setters = {
            {"lambda1", [](auto& c, auto& v, auto&) { c.train.lambda1 = to_double(v); }},
            {"lambda2", [](auto& c, auto& v, auto&) { c.train.lambda2 = to_double(v); }},
            {"learning_rate", [](auto& c, auto& v, auto&) { c.train.learning_rate = to_double(v); }},
            {"adam_beta1", [](auto& c, auto& v, auto&) { c.train.adam_beta1 = to_double(v); }},
            {"adam_beta2", [](auto& c, auto& v, auto&) { c.train.adam_beta2 = to_double(v); }},
            {"adam_eps", [](auto& c, auto& v, auto&) { c.train.adam_eps = to_double(v); }},
            {"epochs", [](auto& c, auto& v, auto&) { c.train.epochs = to_uint(v); }},
            {"steps_per_epoch", [](auto& c, auto& v, auto&) { c.train.steps_per_epoch = to_uint(v); }},
            {"batch_size", [](auto& c, auto& v, auto&) { c.train.batch_size = to_uint(v); }},
            {"seed",
             [](auto& c, auto& v, auto&) {
                 c.train.seed = to_uint(v);
                 c.seed_given = true;
             }},
            {"trials", [](auto& c, auto& v, auto&) { c.train.trials = to_uint(v); }},
            {"resolution", [](auto& c, auto& v, auto&) { c.train.resolution = to_double(v); }},
            {"noise_case", [](auto& c, auto& v, auto&) { c.train.noise_case = static_cast<int>(to_uint(v)); }},
            {"thermal_eta", [](auto& c, auto& v, auto&) { c.train.thermal_eta = to_double(v); }},
            {"target",
             [](auto& c, auto& v, auto&) {
                 Target::preset(v);
                 c.train.target = v;
             }},
            {"array",
             [](auto& c, auto& v, auto&) {
                 if (v != "eht_plus" && v != "future") throw std::invalid_argument("array must be eht_plus or future");
                 c.train.site_file = resolve(default_data_dir() + "/" + v + ".sites", "", true);
             }},
            {"sites", [](auto& c, auto& v, auto& base) { c.train.site_file = resolve(v, base, true); }},
            {"timestamps", [](auto& c, auto& v, auto&) { c.train.timestamps = to_uint(v); }},
            {"min_elevation", [](auto& c, auto& v, auto&) { c.train.min_elevation_deg = to_double(v); }},
            {"decoder",
             [](auto& c, auto& v, auto&) {
                 if (v == "auto") c.train.decoder.reset();
                 else c.train.decoder = parse_input_mode(v);
             }},
            {"gibbs_layers", [](auto& c, auto& v, auto&) { c.train.gibbs_layers = to_uint(v); }},
            {"s1", [](auto& c, auto& v, auto&) { c.train.s1 = to_double(v); }},
            {"s2", [](auto& c, auto& v, auto&) { c.train.s2 = to_double(v); }},
            {"base_width", [](auto& c, auto& v, auto&) { c.train.base_width = to_uint(v); }},
            {"levels", [](auto& c, auto& v, auto&) { c.train.levels = to_uint(v); }},
            {"phase_hidden", [](auto& c, auto& v, auto&) { c.train.phase_hidden = to_uint(v); }},
            {"activation", [](auto& c, auto& v, auto&) { c.train.activation = parse_activation(v); }},
            {"l1_reduction",
             [](auto& c, auto& v, auto&) {
                 if (v == "sum") c.train.l1_reduction = Reduction::Sum;
                 else if (v == "mean") c.train.l1_reduction = Reduction::Mean;
                 else throw std::invalid_argument("l1_reduction must be sum or mean");
             }},
            {"dataset",
             [](auto& c, auto& v, auto& base) {
                 c.train.dataset.source = v == "synthetic" ? v : resolve(v, base, true);
             }},
            {"dataset_size", [](auto& c, auto& v, auto&) { c.train.dataset.size = to_uint(v); }},
            {"image_size", [](auto& c, auto& v, auto&) { c.train.dataset.image_size = to_uint(v); }},
            {"fov_uas", [](auto& c, auto& v, auto&) { c.train.dataset.fov_uas = to_double(v); }},
            {"augment", [](auto& c, auto& v, auto&) { c.train.dataset.augment_enabled = to_bool(v); }},
            {"rotate", [](auto& c, auto& v, auto&) { c.train.dataset.augment.rotate = to_bool(v); }},
            {"elastic", [](auto& c, auto& v, auto&) { c.train.dataset.augment.elastic = to_bool(v); }},
            {"elastic_alpha", [](auto& c, auto& v, auto&) { c.train.dataset.augment.elastic_alpha_px = to_double(v); }},
            {"elastic_grid", [](auto& c, auto& v, auto&) { c.train.dataset.augment.elastic_grid = to_uint(v); }},
            {"mask_samples", [](auto& c, auto& v, auto&) { c.train.mask_samples = to_uint(v); }},
            {"recon_samples", [](auto& c, auto& v, auto&) { c.train.recon_samples = to_uint(v); }},
            {"out", [](auto& c, auto& v, auto& base) { c.out_dir = resolve(v, base, false); }},
            {"truth",
             [](auto& c, auto& v, auto& base) {
                 c.truth = v == "point" || v == "synthetic" ? v : resolve(v, base, true);
             }},
            {"sweep_lambda1", [](auto& c, auto& v, auto&) { c.sweep_lambda1 = to_doubles(v); }},
            {"sweep_lambda2", [](auto& c, auto& v, auto&) { c.sweep_lambda2 = to_doubles(v); }},
            {"fractions", [](auto& c, auto& v, auto&) { c.fractions = to_doubles(v); }},
            {"swap_runs",
             [](auto& c, auto& v, auto& base) {
                 c.swap_runs.clear();
                 for (const auto& p : to_list(v)) c.swap_runs.push_back(resolve(p, base, true));
             }},
            {"swap_test_size", [](auto& c, auto& v, auto&) { c.swap_test_size = to_uint(v); }},
        };
    const auto it = setters.find(key);
    if (it == setters.end()) throw std::invalid_argument("unknown key '" + key + "'");
    if (value.empty()) throw std::invalid_argument("missing value for '" + key + "'");
    it->second(config, value, base_dir);
}

ExperimentConfig default_config() {
    ExperimentConfig c;
    c.train.site_file = resolve(default_data_dir() + "/eht_plus.sites", "", false);
    return c;
}

ExperimentConfig parse_config(std::istream& in, const std::string& source, const std::string& base_dir) {
    ExperimentConfig config = default_config();
    std::map<std::string, std::size_t> seen;
    std::string line;
    std::size_t no = 0;
    while (std::getline(in, line)) {
        ++no;
        const auto hash = line.find('#');
        const std::string t = csv::trim(hash == std::string::npos ? line : line.substr(0, hash));
        if (t.empty()) continue;
        const auto colon = t.find(':');
        if (colon == std::string::npos) throw ParseError(source, no, "expected 'key: value'");
        const std::string key = csv::trim(t.substr(0, colon));
        const std::string value = csv::trim(t.substr(colon + 1));
        if (const auto prev = seen.find(key); prev != seen.end()) {
            throw ParseError(source, no, "duplicate key '" + key + "' (first on line " + std::to_string(prev->second) + ")");
        }
        seen[key] = no;
        try {
            set_config_value(config, key, value, base_dir);
        } catch (const std::invalid_argument& e) {
            throw ParseError(source, no, e.what());
        }
    }
    try {
        config.train.validate();
    } catch (const std::invalid_argument& e) {
        throw ParseError(source, no, e.what());
    }
    return config;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path);
    return parse_config(in, path, fs::absolute(fs::path(path)).parent_path().string());
}

std::string config_text(const ExperimentConfig& c) {
    const TrainConfig& t = c.train;
    std::ostringstream out;
    auto kv = [&](const char* key, const std::string& v) { out << key << ": " << v << '\n'; };
    kv("lambda1", fmt(t.lambda1));
    kv("lambda2", fmt(t.lambda2));
    kv("learning_rate", fmt(t.learning_rate));
    kv("adam_beta1", fmt(t.adam_beta1));
    kv("adam_beta2", fmt(t.adam_beta2));
    kv("adam_eps", fmt(t.adam_eps));
    kv("epochs", std::to_string(t.epochs));
    kv("steps_per_epoch", std::to_string(t.steps_per_epoch));
    kv("batch_size", std::to_string(t.batch_size));
    kv("seed", std::to_string(t.seed));
    kv("trials", std::to_string(t.trials));
    kv("resolution", fmt(t.resolution));
    kv("noise_case", std::to_string(t.noise_case));
    kv("thermal_eta", fmt(t.thermal_eta));
    kv("target", t.target);
    kv("sites", t.site_file);
    kv("timestamps", std::to_string(t.timestamps));
    kv("min_elevation", fmt(t.min_elevation_deg));
    kv("decoder", t.decoder ? mode_name(*t.decoder) : "auto");
    kv("gibbs_layers", std::to_string(t.gibbs_layers));
    kv("s1", fmt(t.s1));
    kv("s2", fmt(t.s2));
    kv("base_width", std::to_string(t.base_width));
    kv("levels", std::to_string(t.levels));
    kv("phase_hidden", std::to_string(t.phase_hidden));
    kv("activation", activation_name(t.activation));
    kv("l1_reduction", t.l1_reduction == Reduction::Sum ? "sum" : "mean");
    kv("dataset", t.dataset.source);
    kv("dataset_size", std::to_string(t.dataset.size));
    kv("image_size", std::to_string(t.dataset.image_size));
    kv("fov_uas", fmt(t.dataset.fov_uas));
    kv("augment", t.dataset.augment_enabled ? "true" : "false");
    kv("rotate", t.dataset.augment.rotate ? "true" : "false");
    kv("elastic", t.dataset.augment.elastic ? "true" : "false");
    kv("elastic_alpha", fmt(t.dataset.augment.elastic_alpha_px));
    kv("elastic_grid", std::to_string(t.dataset.augment.elastic_grid));
    kv("mask_samples", std::to_string(t.mask_samples));
    kv("recon_samples", std::to_string(t.recon_samples));
    kv("out", fs::absolute(c.out_dir).lexically_normal().string());
    kv("truth", c.truth);
    kv("sweep_lambda1", join(c.sweep_lambda1));
    kv("sweep_lambda2", join(c.sweep_lambda2));
    kv("fractions", join(c.fractions));
    if (!c.swap_runs.empty()) {
        std::string runs;
        for (std::size_t i = 0; i < c.swap_runs.size(); ++i) runs += (i ? ", " : "") + c.swap_runs[i];
        kv("swap_runs", runs);
    }
    kv("swap_test_size", std::to_string(c.swap_test_size));
    return out.str();
}

}  // namespace codesign
