// C interface: option bags, error codes and per-thread messages, exercised
// through the shared library alone.
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "planepose/planepose.h"

namespace {

std::string temp_dir() {
  char tmpl[] = "/tmp/planepose_capi_XXXXXX";
  char* dir = mkdtemp(tmpl);
  REQUIRE(dir != nullptr);
  return dir;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool exists(const std::string& path) {
  std::ifstream in(path);
  return in.good();
}

}  // namespace

TEST_CASE("config bag set, get and null handling") {
  pp_config* cfg = pp_config_new();
  REQUIRE(cfg != nullptr);

  CHECK(pp_config_get(cfg, "seed") == nullptr);
  CHECK(pp_config_set(cfg, "seed", "7") == PP_OK);
  CHECK(std::string(pp_config_get(cfg, "seed")) == "7");
  CHECK(pp_config_set(cfg, "seed", "9") == PP_OK);  // later set wins
  CHECK(std::string(pp_config_get(cfg, "seed")) == "9");

  CHECK(pp_config_set(cfg, "", "x") == PP_ERR_INVALID);
  CHECK(pp_config_set(nullptr, "k", "v") == PP_ERR_INVALID);
  CHECK(pp_config_set(cfg, nullptr, "v") == PP_ERR_INVALID);
  CHECK(pp_config_set(cfg, "k", nullptr) == PP_ERR_INVALID);
  CHECK(std::strlen(pp_last_error()) > 0);

  CHECK(pp_config_set(cfg, "k", "v") == PP_OK);
  CHECK(std::string(pp_last_error()).empty());  // success clears the message

  CHECK(pp_config_get(nullptr, "k") == nullptr);
  CHECK(pp_config_get(cfg, nullptr) == nullptr);
  pp_config_free(cfg);
  pp_config_free(nullptr);  // must be a no-op
}

TEST_CASE("version and default thread count") {
  CHECK(std::strlen(pp_version()) > 0);

  unsetenv("PLANEPOSE_THREADS");
  CHECK(pp_default_threads() == 1);
  setenv("PLANEPOSE_THREADS", "3", 1);
  CHECK(pp_default_threads() == 3);
  setenv("PLANEPOSE_THREADS", "junk", 1);
  CHECK(pp_default_threads() == 1);
  setenv("PLANEPOSE_THREADS", "-2", 1);
  CHECK(pp_default_threads() == 1);
  unsetenv("PLANEPOSE_THREADS");
}

TEST_CASE("gen is deterministic and validates its options") {
  const std::string dir = temp_dir();
  pp_config* cfg = pp_config_new();
  pp_config_set(cfg, "seed", "7");
  pp_config_set(cfg, "scenes", "4");
  pp_config_set(cfg, "descriptor_dim", "16");
  pp_config_set(cfg, "out", (dir + "/a.json").c_str());
  REQUIRE(pp_run_gen(cfg) == PP_OK);
  pp_config_set(cfg, "out", (dir + "/b.json").c_str());
  REQUIRE(pp_run_gen(cfg) == PP_OK);
  CHECK(slurp(dir + "/a.json") == slurp(dir + "/b.json"));

  SUBCASE("scene count must be positive") {
    pp_config_set(cfg, "scenes", "0");
    CHECK(pp_run_gen(cfg) == PP_ERR_INVALID);
    CHECK(std::string(pp_last_error()).find("scenes") != std::string::npos);
  }
  SUBCASE("seed is mandatory") {
    pp_config* bare = pp_config_new();
    pp_config_set(bare, "out", (dir + "/c.json").c_str());
    CHECK(pp_run_gen(bare) == PP_ERR_INVALID);
    CHECK(std::string(pp_last_error()).find("seed") != std::string::npos);
    pp_config_free(bare);
  }
  SUBCASE("unknown keys are rejected by name") {
    pp_config_set(cfg, "bogus_key", "1");
    CHECK(pp_run_gen(cfg) == PP_ERR_INVALID);
    CHECK(std::string(pp_last_error()).find("bogus_key") !=
          std::string::npos);
  }
  SUBCASE("malformed numbers are named") {
    pp_config_set(cfg, "scenes", "four");
    CHECK(pp_run_gen(cfg) == PP_ERR_INVALID);
    CHECK(std::string(pp_last_error()).find("four") != std::string::npos);
  }
  pp_config_free(cfg);
}

TEST_CASE("config files load and later sets override them") {
  const std::string dir = temp_dir();
  {
    std::ofstream f(dir + "/g.cfg");
    f << "# dataset recipe\n"
         "seed = 11\n"
         "scenes = 3\n"
         "descriptor_dim = 16  # small for speed\n";
  }
  pp_config* cfg = pp_config_new();
  REQUIRE(pp_config_load_file(cfg, (dir + "/g.cfg").c_str()) == PP_OK);
  CHECK(std::string(pp_config_get(cfg, "scenes")) == "3");

  pp_config_set(cfg, "scenes", "5");  // a flag beats the file
  pp_config_set(cfg, "out", (dir + "/d.json").c_str());
  REQUIRE(pp_run_gen(cfg) == PP_OK);
  CHECK(slurp(dir + "/d.json").find("\"scenes\"") != std::string::npos);
  pp_config_free(cfg);

  SUBCASE("missing file") {
    pp_config* c2 = pp_config_new();
    CHECK(pp_config_load_file(c2, (dir + "/absent.cfg").c_str()) ==
          PP_ERR_INVALID);
    pp_config_free(c2);
  }
  SUBCASE("duplicate keys are rejected") {
    std::ofstream f(dir + "/dup.cfg");
    f << "seed = 1\nseed = 2\n";
    f.close();
    pp_config* c2 = pp_config_new();
    CHECK(pp_config_load_file(c2, (dir + "/dup.cfg").c_str()) ==
          PP_ERR_INVALID);
    CHECK(std::string(pp_last_error()).find("duplicate") !=
          std::string::npos);
    pp_config_free(c2);
  }
  SUBCASE("lines must be key = value") {
    std::ofstream f(dir + "/bad.cfg");
    f << "just some words\n";
    f.close();
    pp_config* c2 = pp_config_new();
    CHECK(pp_config_load_file(c2, (dir + "/bad.cfg").c_str()) ==
          PP_ERR_INVALID);
    pp_config_free(c2);
  }
}

TEST_CASE("estimate distinguishes option errors from runtime failures") {
  const std::string dir = temp_dir();
  pp_config* cfg = pp_config_new();
  pp_config_set(cfg, "data", (dir + "/none.json").c_str());
  pp_config_set(cfg, "out", (dir + "/rep").c_str());
  pp_config_set(cfg, "method", "init-only");

  // valid options, missing dataset: runtime
  CHECK(pp_run_estimate(cfg) == PP_ERR_RUNTIME);
  CHECK(std::string(pp_last_error()).find("none.json") != std::string::npos);

  // bad method name: validation
  pp_config_set(cfg, "method", "oracle");
  CHECK(pp_run_estimate(cfg) == PP_ERR_INVALID);

  // nope-sac without a checkpoint key: validation
  pp_config_set(cfg, "method", "nope-sac");
  CHECK(pp_run_estimate(cfg) == PP_ERR_INVALID);
  CHECK(std::string(pp_last_error()).find("ckpt") != std::string::npos);
  pp_config_free(cfg);
}

TEST_CASE("full pass through the shared library") {
  const std::string dir = temp_dir();
  pp_config* gen = pp_config_new();
  pp_config_set(gen, "seed", "21");
  pp_config_set(gen, "scenes", "6");
  pp_config_set(gen, "descriptor_dim", "16");
  pp_config_set(gen, "out", (dir + "/ds.json").c_str());
  REQUIRE(pp_run_gen(gen) == PP_OK);
  pp_config_free(gen);

  pp_config* est = pp_config_new();
  pp_config_set(est, "data", (dir + "/ds.json").c_str());
  pp_config_set(est, "out", (dir + "/rep").c_str());
  pp_config_set(est, "method", "init-only");
  pp_config_set(est, "seed", "3");
  REQUIRE(pp_run_estimate(est) == PP_OK);
  CHECK(exists(dir + "/rep.csv"));
  CHECK(exists(dir + "/rep.json"));
  CHECK(exists(dir + "/rep_scenes.csv"));
  pp_config_free(est);

  pp_config* rep = pp_config_new();
  pp_config_set(rep, "in",
                (dir + "/rep.json," + dir + "/rep.json").c_str());
  pp_config_set(rep, "out", (dir + "/merged").c_str());
  REQUIRE(pp_run_report(rep) == PP_OK);
  CHECK(exists(dir + "/merged.csv"));
  CHECK(exists(dir + "/merged.json"));
  pp_config_free(rep);
}
