#include "codesign/codesign.h"

#include "codesign/commands.hpp"
#include "codesign/errors.hpp"

#include <cstring>
#include <exception>
#include <filesystem>
#include <new>
#include <string>

struct cds_config {
    codesign::ExperimentConfig value;
};

struct cds_ising {
    codesign::IsingModel value;
};

namespace {

thread_local std::string g_error;

cds_status fail(cds_status code, const char* what) {
    g_error = what;
    return code;
}

// Translates whatever the core throws into a status code.
template <class F>
cds_status guarded(F&& f) {
    try {
        g_error.clear();
        f();
        return CDS_OK;
    } catch (const codesign::ParseError& e) {
        return fail(CDS_ERR_PARSE, e.what());
    } catch (const codesign::IoError& e) {
        return fail(CDS_ERR_IO, e.what());
    } catch (const std::filesystem::filesystem_error& e) {
        return fail(CDS_ERR_IO, e.what());
    } catch (const codesign::DivergenceError& e) {
        return fail(CDS_ERR_DIVERGED, e.what());
    } catch (const std::invalid_argument& e) {
        return fail(CDS_ERR_INVALID_ARGUMENT, e.what());
    } catch (const std::out_of_range& e) {
        return fail(CDS_ERR_INVALID_ARGUMENT, e.what());
    } catch (const std::bad_alloc&) {
        return fail(CDS_ERR_INTERNAL, "out of memory");
    } catch (const std::exception& e) {
        return fail(CDS_ERR_INTERNAL, e.what());
    } catch (...) {
        return fail(CDS_ERR_INTERNAL, "unknown error");
    }
}

#define CDS_REQUIRE(cond, msg) \
    if (!(cond)) return fail(CDS_ERR_INVALID_ARGUMENT, msg)

codesign::ProgressFn wrap(cds_progress_fn fn, void* user) {
    if (!fn) return {};
    return [fn, user](const codesign::Progress& p) { fn(user, p.trial, p.step, p.total_steps, p.loss); };
}

}  // namespace

extern "C" {

const char* cds_last_error(void) { return g_error.c_str(); }

const char* cds_status_name(cds_status status) {
    switch (status) {
        case CDS_OK: return "ok";
        case CDS_ERR_INVALID_ARGUMENT: return "invalid argument";
        case CDS_ERR_PARSE: return "parse error";
        case CDS_ERR_IO: return "i/o error";
        case CDS_ERR_DIVERGED: return "diverged";
        case CDS_ERR_INTERNAL: return "internal error";
    }
    return "unknown status";
}

const char* cds_version(void) { return "0.1.0"; }

cds_status cds_config_default(cds_config** out) {
    CDS_REQUIRE(out, "null output handle");
    return guarded([&] { *out = new cds_config{codesign::default_config()}; });
}

cds_status cds_config_load(const char* path, cds_config** out) {
    CDS_REQUIRE(path && out, "null argument");
    return guarded([&] { *out = new cds_config{codesign::load_config(path)}; });
}

void cds_config_free(cds_config* config) { delete config; }

cds_status cds_config_set(cds_config* config, const char* key, const char* value) {
    CDS_REQUIRE(config && key && value, "null argument");
    return guarded([&] {
        codesign::ExperimentConfig next = config->value;
        codesign::set_config_value(next, key, value, ".");
        next.train.validate();
        config->value = std::move(next);
    });
}

cds_status cds_config_seed(const cds_config* config, uint64_t* seed, int* given) {
    CDS_REQUIRE(config && seed, "null argument");
    *seed = config->value.train.seed;
    if (given) *given = config->value.seed_given ? 1 : 0;
    return CDS_OK;
}

cds_status cds_config_out_dir(const cds_config* config, const char** out) {
    CDS_REQUIRE(config && out, "null argument");
    *out = config->value.out_dir.c_str();
    return CDS_OK;
}

cds_status cds_config_text(const cds_config* config, char* buf, size_t cap, size_t* len) {
    CDS_REQUIRE(config, "null config");
    return guarded([&] {
        const std::string text = codesign::config_text(config->value);
        if (len) *len = text.size();
        if (buf && cap > 0) {
            const std::size_t n = std::min(cap - 1, text.size());
            std::memcpy(buf, text.data(), n);
            buf[n] = '\0';
        }
    });
}

cds_status cds_simulate(const cds_config* config, const char* out_dir, size_t* measurement_rows) {
    CDS_REQUIRE(config && out_dir, "null argument");
    return guarded([&] {
        const auto s = codesign::run_simulate(config->value, out_dir);
        if (measurement_rows) *measurement_rows = s.measurement_rows;
    });
}

cds_status cds_train(const cds_config* config, const char* out_dir, cds_progress_fn progress, void* user) {
    CDS_REQUIRE(config && out_dir, "null argument");
    return guarded([&] { codesign::run_train(config->value, out_dir, wrap(progress, user)); });
}

cds_status cds_sweep(const cds_config* config, const char* out_dir, cds_progress_fn progress, void* user) {
    CDS_REQUIRE(config && out_dir, "null argument");
    return guarded([&] { codesign::run_sweep(config->value, out_dir, wrap(progress, user)); });
}

cds_status cds_resolution(const cds_config* config, const char* out_dir, cds_progress_fn progress, void* user) {
    CDS_REQUIRE(config && out_dir, "null argument");
    return guarded([&] { codesign::run_resolution(config->value, out_dir, wrap(progress, user)); });
}

cds_status cds_swap(const cds_config* config, const char* out_dir) {
    CDS_REQUIRE(config && out_dir, "null argument");
    return guarded([&] { codesign::run_swap(config->value, out_dir); });
}

cds_status cds_ising_load(const char* path, cds_ising** out) {
    CDS_REQUIRE(path && out, "null argument");
    return guarded([&] { *out = new cds_ising{codesign::read_theta_csv(std::string(path))}; });
}

cds_status cds_ising_save(const cds_ising* model, const char* path) {
    CDS_REQUIRE(model && path, "null argument");
    return guarded([&] { codesign::write_theta_csv(std::string(path), model->value); });
}

void cds_ising_free(cds_ising* model) { delete model; }

size_t cds_ising_size(const cds_ising* model) { return model ? model->value.size() : 0; }

cds_status cds_ising_theta(const cds_ising* model, size_t j, size_t k, double* out) {
    CDS_REQUIRE(model && out, "null argument");
    CDS_REQUIRE(j < model->value.size() && k < model->value.size(), "site index out of range");
    *out = model->value.theta(j, k);
    return CDS_OK;
}

const char* cds_ising_name(const cds_ising* model, size_t j) {
    if (!model || j >= model->value.names().size()) return nullptr;
    return model->value.names()[j].c_str();
}

cds_status cds_ising_conditional(const cds_ising* model, const char* const* fixed, size_t count, cds_ising** out) {
    CDS_REQUIRE(model && out && (fixed || count == 0), "null argument");
    return guarded([&] {
        std::vector<std::string> names;
        for (std::size_t i = 0; i < count; ++i) {
            if (!fixed[i]) throw std::invalid_argument("null site name");
            names.emplace_back(fixed[i]);
        }
        auto cond = codesign::conditional_model(model->value, codesign::parse_fixed_sites(model->value, names));
        *out = new cds_ising{std::move(cond.model)};
    });
}

cds_status cds_ising_cliques(const cds_ising* model, double tau, const char* out_path, size_t* count) {
    CDS_REQUIRE(model && out_path, "null argument");
    return guarded([&] {
        const auto report = codesign::run_cliques(model->value, tau, out_path);
        if (count) *count = report.triples.size();
    });
}

}  // extern "C"
