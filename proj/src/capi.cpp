#include "planepose/planepose.h"

#include <exception>
#include <functional>
#include <iostream>
#include <string>

#include "planepose/errors.hpp"
#include "planepose/pipeline.hpp"

using planepose::pipeline::Options;

struct pp_config {
  Options opts;
};

namespace {

thread_local std::string g_error;

pp_status guard(const std::function<void()>& fn) {
  try {
    fn();
    g_error.clear();
    return PP_OK;
  } catch (const planepose::InvalidArgument& e) {
    g_error = e.what();
    return PP_ERR_INVALID;
  } catch (const std::exception& e) {
    g_error = e.what();
    return PP_ERR_RUNTIME;
  }
}

pp_status run(const pp_config* cfg,
              void (*fn)(const Options&, std::ostream&)) {
  if (!cfg) {
    g_error = "null config";
    return PP_ERR_INVALID;
  }
  return guard([&] { fn(cfg->opts, std::cout); });
}

}  // namespace

extern "C" {

pp_config* pp_config_new(void) { return new pp_config; }

void pp_config_free(pp_config* cfg) { delete cfg; }

pp_status pp_config_load_file(pp_config* cfg, const char* path) {
  if (!cfg || !path) {
    g_error = "null argument";
    return PP_ERR_INVALID;
  }
  return guard([&] {
    for (auto& [k, v] : planepose::pipeline::parse_options_file(path))
      cfg->opts[k] = v;
  });
}

pp_status pp_config_set(pp_config* cfg, const char* key, const char* value) {
  if (!cfg || !key || !value) {
    g_error = "null argument";
    return PP_ERR_INVALID;
  }
  return guard([&] {
    if (*key == '\0') throw planepose::InvalidArgument("empty key");
    cfg->opts[key] = value;
  });
}

const char* pp_config_get(const pp_config* cfg, const char* key) {
  if (!cfg || !key) return nullptr;
  const auto it = cfg->opts.find(key);
  return it == cfg->opts.end() ? nullptr : it->second.c_str();
}

pp_status pp_run_gen(const pp_config* cfg) {
  return run(cfg, planepose::pipeline::run_gen);
}

pp_status pp_run_train(const pp_config* cfg) {
  return run(cfg, planepose::pipeline::run_train);
}

pp_status pp_run_estimate(const pp_config* cfg) {
  return run(cfg, planepose::pipeline::run_estimate);
}

pp_status pp_run_baseline(const pp_config* cfg) {
  return run(cfg, planepose::pipeline::run_baseline);
}

pp_status pp_run_sweep(const pp_config* cfg) {
  return run(cfg, planepose::pipeline::run_sweep);
}

pp_status pp_run_gradcheck(const pp_config* cfg) {
  return run(cfg, planepose::pipeline::run_gradcheck);
}

pp_status pp_run_report(const pp_config* cfg) {
  return run(cfg, planepose::pipeline::run_report);
}

const char* pp_last_error(void) { return g_error.c_str(); }

int pp_default_threads(void) {
  return planepose::pipeline::default_threads();
}

const char* pp_version(void) { return "0.1.0"; }

}  // extern "C"
