#ifndef PLANEPOSE_H
#define PLANEPOSE_H

/* C interface to the plane-based relative pose toolkit. Build an option
   bag, set keys (the same flat keys the config file format uses), run a
   command. Each pp_config belongs to one thread at a time; error messages
   are per-thread. */

#ifdef __cplusplus
extern "C" {
#endif

typedef enum pp_status {
  PP_OK = 0,
  PP_ERR_INVALID = 1, /* bad option: unknown key, bad value, missing key */
  PP_ERR_RUNTIME = 2  /* valid options, failed execution */
} pp_status;

typedef struct pp_config pp_config;

pp_config* pp_config_new(void);
void pp_config_free(pp_config* cfg);

/* Flat "key = value" file, '#' comments. Later loads and sets override
   earlier values, so flags applied after a file win. */
pp_status pp_config_load_file(pp_config* cfg, const char* path);
pp_status pp_config_set(pp_config* cfg, const char* key, const char* value);
/* NULL when absent; the pointer stays valid until the bag is mutated. */
const char* pp_config_get(const pp_config* cfg, const char* key);

/* Command entry points; progress and summaries print to stdout. */
pp_status pp_run_gen(const pp_config* cfg);
pp_status pp_run_train(const pp_config* cfg);
pp_status pp_run_estimate(const pp_config* cfg);
pp_status pp_run_baseline(const pp_config* cfg);
pp_status pp_run_sweep(const pp_config* cfg);
pp_status pp_run_gradcheck(const pp_config* cfg);
pp_status pp_run_report(const pp_config* cfg);

/* Message of the calling thread's most recent failure, "" after success. */
const char* pp_last_error(void);

/* PLANEPOSE_THREADS when set to a positive integer, else 1. */
int pp_default_threads(void);

const char* pp_version(void);

#ifdef __cplusplus
}
#endif

#endif /* PLANEPOSE_H */
