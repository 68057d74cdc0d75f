#ifndef CODESIGN_CODESIGN_H
#define CODESIGN_CODESIGN_H

/* C interface to the telescope co-design library.
 *
 * Handles are opaque and owned by the caller (free with the matching
 * *_free). Every fallible call returns a cds_status; on failure the message
 * is available from cds_last_error() until the next call on the same thread.
 */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define CDS_API __declspec(dllexport)
#else
#define CDS_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum cds_status {
    CDS_OK = 0,
    CDS_ERR_INVALID_ARGUMENT = 1,
    CDS_ERR_PARSE = 2,
    CDS_ERR_IO = 3,
    CDS_ERR_DIVERGED = 4,
    CDS_ERR_INTERNAL = 5
} cds_status;

typedef struct cds_config cds_config;
typedef struct cds_ising cds_ising;

/* called after every optimizer step */
typedef void (*cds_progress_fn)(void* user, size_t trial, size_t step, size_t total_steps, double loss);

CDS_API const char* cds_last_error(void);
CDS_API const char* cds_status_name(cds_status status);
CDS_API const char* cds_version(void);

/* --- configuration --- */

/* Defaults with the bundled twelve-site array. */
CDS_API cds_status cds_config_default(cds_config** out);
CDS_API cds_status cds_config_load(const char* path, cds_config** out);
CDS_API void cds_config_free(cds_config* config);
/* Same keys and rules as the config file; relative paths resolve against the working directory. */
CDS_API cds_status cds_config_set(cds_config* config, const char* key, const char* value);
/* given is set to 1 when the seed came from the file or cds_config_set. */
CDS_API cds_status cds_config_seed(const cds_config* config, uint64_t* seed, int* given);
CDS_API cds_status cds_config_out_dir(const cds_config* config, const char** out);
/* Full text of the config. *len receives the length without the terminator;
 * buf may be NULL to query it. */
CDS_API cds_status cds_config_text(const cds_config* config, char* buf, size_t cap, size_t* len);

/* --- commands (results go to out_dir) --- */

CDS_API cds_status cds_simulate(const cds_config* config, const char* out_dir, size_t* measurement_rows);
CDS_API cds_status cds_train(const cds_config* config, const char* out_dir, cds_progress_fn progress, void* user);
CDS_API cds_status cds_sweep(const cds_config* config, const char* out_dir, cds_progress_fn progress, void* user);
CDS_API cds_status cds_resolution(const cds_config* config, const char* out_dir, cds_progress_fn progress,
                                  void* user);
/* Uses the config's swap_runs. */
CDS_API cds_status cds_swap(const cds_config* config, const char* out_dir);

/* --- Ising models --- */

CDS_API cds_status cds_ising_load(const char* path, cds_ising** out);
CDS_API cds_status cds_ising_save(const cds_ising* model, const char* path);
CDS_API void cds_ising_free(cds_ising* model);
CDS_API size_t cds_ising_size(const cds_ising* model);
CDS_API cds_status cds_ising_theta(const cds_ising* model, size_t j, size_t k, double* out);
/* NULL when the model has no site names. Valid while the handle lives. */
CDS_API const char* cds_ising_name(const cds_ising* model, size_t j);
/* fixed: site names, each optionally suffixed "=+1" or "=-1" (default +1). */
CDS_API cds_status cds_ising_conditional(const cds_ising* model, const char* const* fixed, size_t count,
                                         cds_ising** out);
/* Writes j,k,l,m_c ranked by score; *count receives the number of triples. */
CDS_API cds_status cds_ising_cliques(const cds_ising* model, double tau, const char* out_path, size_t* count);

#ifdef __cplusplus
}
#endif

#endif
