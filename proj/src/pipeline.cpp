#include "planepose/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <thread>
#include <utility>

#include "json.hpp"
#include "planepose/baselines.hpp"
#include "planepose/errors.hpp"

namespace planepose::pipeline {

namespace {

// Stream ids under the run seed; disjoint from the training streams so an
// estimate pass never replays training draws.
constexpr std::uint64_t kInitStream = 11;
constexpr std::uint64_t kPointStream = 12;
constexpr std::uint64_t kNoiseStream = 13;

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

std::string fmt_short(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%g", x);
  return buf;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Typed access to the option map. Every getter registers its key, so
// finish() can reject anything the command does not understand.
class OptionReader {
 public:
  explicit OptionReader(const Options& o) : opts_(o) {}

  bool has(const std::string& key) {
    known_.insert(key);
    return opts_.count(key) > 0;
  }

  std::string str(const std::string& key, const std::string& def) {
    return has(key) ? opts_.at(key) : def;
  }

  std::string require(const std::string& key) {
    if (!has(key)) throw InvalidArgument(key + " is required");
    return opts_.at(key);
  }

  double num(const std::string& key, double def, double lo, double hi) {
    if (!has(key)) return check_range(key, def, lo, hi);
    const std::string& v = opts_.at(key);
    try {
      size_t pos = 0;
      const double x = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return check_range(key, x, lo, hi);
    } catch (const InvalidArgument&) {
      throw;
    } catch (const std::exception&) {
      throw InvalidArgument(key + ": not a number: " + v);
    }
  }

  long long integer(const std::string& key, long long def, long long lo,
                    long long hi) {
    if (!has(key)) return (long long)check_range(key, (double)def, (double)lo,
                                                 (double)hi);
    const std::string& v = opts_.at(key);
    try {
      size_t pos = 0;
      const long long x = std::stoll(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return (long long)check_range(key, (double)x, (double)lo, (double)hi);
    } catch (const InvalidArgument&) {
      throw;
    } catch (const std::exception&) {
      throw InvalidArgument(key + ": not an integer: " + v);
    }
  }

  std::uint64_t seed(const std::string& key, bool required,
                     std::uint64_t def = 0) {
    if (!has(key)) {
      if (required) throw InvalidArgument(key + " is required");
      return def;
    }
    const std::string& v = opts_.at(key);
    try {
      size_t pos = 0;
      if (!v.empty() && (v[0] == '-' || v[0] == '+'))
        throw std::invalid_argument(v);
      const std::uint64_t x = std::stoull(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return x;
    } catch (const std::exception&) {
      throw InvalidArgument(key + ": not an unsigned integer: " + v);
    }
  }

  bool flag(const std::string& key, bool def) {
    if (!has(key)) return def;
    const std::string& v = opts_.at(key);
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw InvalidArgument(key + ": not a boolean: " + v);
  }

  void finish() const {
    for (const auto& [k, v] : opts_)
      if (!known_.count(k)) throw InvalidArgument("unknown key: " + k);
  }

 private:
  static double check_range(const std::string& key, double x, double lo,
                            double hi) {
    if (!(x >= lo && x <= hi))
      throw InvalidArgument(key + " must be in [" + fmt_short(lo) + ", " +
                            fmt_short(hi) + "]");
    return x;
  }

  const Options& opts_;
  std::set<std::string> known_;
};

geom::Pose perturb_pose(const geom::Pose& gt, double sigma_rot_deg,
                        double sigma_trans, Rng& rng) {
  const double sr = sigma_rot_deg * M_PI / 180.0;
  const geom::Vec3 v(sr * rng.normal(), sr * rng.normal(), sr * rng.normal());
  geom::Pose init;
  init.rotation = geom::UnitQuaternion::from_rotation_vector(v) * gt.rotation;
  init.translation = gt.translation + sigma_trans * geom::Vec3(rng.normal(),
                                                               rng.normal(),
                                                               rng.normal());
  return init;
}

std::pair<double, double> mean_costs(const std::vector<hypo::PlanePair>& corrs,
                                     const geom::Pose& pose) {
  if (corrs.empty()) return {0.0, 0.0};
  double r = 0, t = 0;
  for (const auto& c : corrs) {
    const geom::OnePlaneCosts oc = geom::one_plane_costs(c.first, c.second,
                                                         pose);
    r += oc.rot;
    t += oc.trans;
  }
  return {r / corrs.size(), t / corrs.size()};
}

struct SceneEval {
  SceneRecord rec;
  std::vector<match::Match> matches;
  std::vector<std::pair<int, int>> gt_pairs;
  std::vector<eval::PlaneDet> merged_pred, merged_gt;
};

std::vector<eval::PlaneDet> as_dets(const std::vector<synth::Observation>& v) {
  std::vector<eval::PlaneDet> out;
  out.reserve(v.size());
  for (const auto& o : v) out.push_back({o.plane, o.footprint, 0.5});
  return out;
}

SceneEval eval_scene(const train::Model* model,
                     const synth::ScenePair& scene_in, int idx,
                     const EvalConfig& cfg) {
  synth::ScenePair noisy;
  const synth::ScenePair* scene = &scene_in;
  if (cfg.noise_offset > 0 || cfg.noise_normal_deg > 0) {
    Rng nr = Rng(cfg.seed).split(kNoiseStream).split(cfg.noise_stream)
                 .split(idx);
    noisy = synth::perturb(scene_in, cfg.noise_offset, cfg.noise_normal_deg,
                           0.0, nr);
    scene = &noisy;
  }

  Rng ir = Rng(cfg.seed).split(kInitStream).split(idx);
  const geom::Pose init = perturb_pose(scene->pose, cfg.init_rot_sigma_deg,
                                       cfg.init_trans_sigma, ir);

  SceneEval out;
  out.gt_pairs = scene->correspondences;
  out.rec.rot_init = geom::rotation_geodesic_deg(init.rotation,
                                                 scene->pose.rotation);
  out.rec.trans_init = (init.translation - scene->pose.translation).norm();

  const auto& v1 = scene->views[0];
  const auto& v2 = scene->views[1];
  if (cfg.use_gt_matches) {
    for (const auto& [i, j] : scene->correspondences)
      out.matches.push_back({i, j, 1.0});
  } else if (!v1.empty() && !v2.empty()) {
    nn::Matrix d1(v1.size(), v1[0].descriptor.size());
    nn::Matrix d2(v2.size(), v2[0].descriptor.size());
    std::vector<geom::Plane> p1, p2;
    for (size_t i = 0; i < v1.size(); ++i) {
      d1.row(i) = v1[i].descriptor.transpose();
      p1.push_back(v1[i].plane);
    }
    for (size_t j = 0; j < v2.size(); ++j) {
      d2.row(j) = v2[j].descriptor.transpose();
      p2.push_back(v2[j].plane);
    }
    const double bin = model ? model->bin : train::Model{}.bin;
    match::Assignment a = match::sinkhorn_dustbin(
        match::full_score(match::appearance_affinity(d1, d2),
                          match::geometric_score(p1, p2, init)),
        bin, cfg.sinkhorn_iters);
    out.matches = match::extract_matches(a, cfg.match_threshold);
  }
  out.rec.matches = static_cast<int>(out.matches.size());

  std::vector<hypo::PlanePair> corrs;
  std::vector<std::pair<int, int>> pairs;
  for (const auto& m : out.matches) {
    if (static_cast<int>(corrs.size()) == hypo::kScoreSlots) break;
    corrs.emplace_back(v1[m.i].plane, v2[m.j].plane);
    pairs.emplace_back(m.i, m.j);
  }
  std::tie(out.rec.cost_r_init, out.rec.cost_t_init) = mean_costs(corrs, init);

  geom::Pose final_pose = init;
  if (!corrs.empty()) {
    if (cfg.method == "nope-sac") {
      hypo::HypothesisSet set = hypo::generate_hypotheses(
          model->params, init, hypo::aim_encode(model->params, init), corrs);
      std::tie(set.c_r, set.c_t) = hypo::build_cost_matrices(set, corrs);
      std::tie(set.w_r, set.w_t) =
          hypo::score_hypotheses(model->params, set.c_r, set.c_t);
      if (cfg.force_uniform_scores) {
        const int n = set.count() + 1;
        set.w_r = nn::Vector::Constant(n, 1.0 / n);
        set.w_t = nn::Vector::Constant(n, 1.0 / n);
      }
      final_pose = hypo::fuse(model->params, set, cfg.fusion);
    } else if (cfg.method == "homo-ref" || cfg.method == "nume-ref1") {
      Rng pr = Rng(cfg.seed).split(kPointStream).split(idx);
      const base::PointCorrSet pts = base::make_point_corrs(
          *scene, pairs, pr, cfg.points_per_plane, cfg.point_sigma);
      if (cfg.method == "homo-ref") {
        final_pose = base::homo_ref(corrs, init, pts);
      } else {
        base::NumeRefOptions no;
        no.use_pix = true;
        no.points = &pts;
        final_pose = base::nume_ref(corrs, init, no).pose;
      }
    } else if (cfg.method == "nume-ref2") {
      final_pose = base::nume_ref(corrs, init).pose;
    }
    // init-only keeps the perturbed pose
  }

  out.rec.rot = geom::rotation_geodesic_deg(final_pose.rotation,
                                            scene->pose.rotation);
  out.rec.trans = (final_pose.translation - scene->pose.translation).norm();
  std::tie(out.rec.cost_r_final, out.rec.cost_t_final) =
      mean_costs(corrs, final_pose);

  const std::vector<eval::PlaneDet> dets1 = as_dets(v1);
  const std::vector<eval::PlaneDet> dets2 = as_dets(v2);
  out.merged_pred = eval::merge_scene(dets1, dets2, out.matches, final_pose);
  std::vector<match::Match> gt_matches;
  for (const auto& [i, j] : scene->correspondences)
    gt_matches.push_back({i, j, 1.0});
  out.merged_gt = eval::merge_scene(dets1, dets2, gt_matches, scene->pose);
  return out;
}

const std::vector<std::string>& method_names() {
  static const std::vector<std::string> names = {
      "nope-sac", "homo-ref", "nume-ref1", "nume-ref2", "init-only"};
  return names;
}

void check_method(const std::string& m) {
  const auto& names = method_names();
  if (std::find(names.begin(), names.end(), m) == names.end())
    throw InvalidArgument("unknown method: " + m);
}

}  // namespace

Options parse_options_text(const std::string& text) {
  Options out;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw InvalidArgument("config line " + std::to_string(lineno) +
                            ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw InvalidArgument("config line " + std::to_string(lineno) +
                            ": empty key");
    if (value.empty())
      throw InvalidArgument("config line " + std::to_string(lineno) +
                            ": empty value for " + key);
    if (!out.emplace(key, value).second)
      throw InvalidArgument("config line " + std::to_string(lineno) +
                            ": duplicate key " + key);
  }
  return out;
}

Options parse_options_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open config file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_options_text(buf.str());
}

int default_threads() {
  const char* env = std::getenv("PLANEPOSE_THREADS");
  if (!env) return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  return (end && *end == '\0' && n > 0) ? static_cast<int>(n) : 1;
}

EvalOutcome evaluate_method(const train::Model* model,
                            const synth::Dataset& ds, const EvalConfig& cfg,
                            int threads, const std::string& label) {
  check_method(cfg.method);
  if (cfg.method == "nope-sac" && !model)
    throw InvalidArgument("nope-sac needs a checkpoint");
  const int n = static_cast<int>(ds.scenes.size());
  if (n == 0) throw EmptyInput("dataset has no scenes");

  std::vector<SceneEval> evals(n);
  const int workers = std::max(1, std::min(threads, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i)
      evals[i] = eval_scene(model, ds.scenes[i], i, cfg);
  } else {
    std::mutex mu;
    std::exception_ptr first_error;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int t = 0; t < workers; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (int i = t; i < n; i += workers)
            evals[i] = eval_scene(model, ds.scenes[i], i, cfg);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!first_error) first_error = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
  }

  EvalOutcome out;
  out.row.method = label;
  std::vector<std::pair<double, double>> errs;
  std::vector<std::vector<match::Match>> pred_matches;
  std::vector<std::vector<std::pair<int, int>>> gt_pairs;
  std::vector<std::vector<eval::PlaneDet>> preds, gts;
  errs.reserve(n);
  out.scenes.reserve(n);
  for (auto& e : evals) {
    errs.emplace_back(e.rec.rot, e.rec.trans);
    out.scenes.push_back(e.rec);
    pred_matches.push_back(std::move(e.matches));
    gt_pairs.push_back(std::move(e.gt_pairs));
    preds.push_back(std::move(e.merged_pred));
    gts.push_back(std::move(e.merged_gt));
  }
  out.row.pose = eval::summarize(errs);
  constexpr eval::ApMode kModes[3] = {eval::ApMode::kAll,
                                      eval::ApMode::kNoOffset,
                                      eval::ApMode::kNoNormal};
  for (int m = 0; m < 3; ++m)
    for (int c = 0; c < 3; ++c)
      out.row.ap[3 * m + c] =
          eval::plane_ap(preds, gts, eval::kApConditions[c].first,
                         eval::kApConditions[c].second, kModes[m]);
  out.row.has_ap = true;
  out.prf = eval::aggregate_prf(pred_matches, gt_pairs);
  return out;
}

namespace {

// --- shared option blocks ---

EvalConfig read_eval_config(OptionReader& r, bool with_hooks) {
  EvalConfig c;
  c.seed = r.seed("seed", false);
  c.match_threshold = r.num("match_threshold", 0.2, 0.0, 0.999);
  c.sinkhorn_iters =
      static_cast<int>(r.integer("sinkhorn_iters", 100, 1, 100000));
  c.init_rot_sigma_deg = r.num("init_rot_sigma_deg", 10.0, 0.0, 180.0);
  c.init_trans_sigma = r.num("init_trans_sigma", 0.3, 0.0, 100.0);
  c.points_per_plane =
      static_cast<int>(r.integer("points_per_plane", 8, 4, 1024));
  c.point_sigma = r.num("point_sigma", 0.0, 0.0, 1.0);
  if (with_hooks) {
    c.force_uniform_scores = r.flag("force_uniform_scores", false);
    c.use_gt_matches = r.flag("use_gt_matches", false);
  }
  return c;
}

int read_threads(OptionReader& r) {
  const int t = static_cast<int>(r.integer("threads", 0, 0, 256));
  return t == 0 ? default_threads() : t;
}

train::Model load_model(const std::string& path) {
  return train::read_model(nn::load_checkpoint(path));
}

// Per-scene CSV shared by estimate and baseline.
class SceneCsv {
 public:
  explicit SceneCsv(const std::string& path) : out_(path, std::ios::trunc) {
    if (!out_) throw IoError("cannot open per-scene log: " + path);
    out_ << "method,scene,rot_init_deg,trans_init_m,rot_deg,trans_m,matches,"
            "cost_r_init,cost_t_init,cost_r_final,cost_t_final\n";
  }

  void add(const std::string& method, const std::vector<SceneRecord>& recs) {
    for (size_t i = 0; i < recs.size(); ++i) {
      const SceneRecord& s = recs[i];
      out_ << method << ',' << i << ',' << fmt(s.rot_init) << ','
           << fmt(s.trans_init) << ',' << fmt(s.rot) << ',' << fmt(s.trans)
           << ',' << s.matches << ',' << fmt(s.cost_r_init) << ','
           << fmt(s.cost_t_init) << ',' << fmt(s.cost_r_final) << ','
           << fmt(s.cost_t_final) << '\n';
    }
  }

 private:
  std::ofstream out_;
};

void print_outcome(std::ostream& out, const EvalOutcome& o, int scenes) {
  double cr = 0, ct = 0;
  for (const auto& s : o.scenes) {
    cr += s.cost_r_init / scenes;
    ct += s.cost_t_init / scenes;
  }
  out << o.row.method << ": " << scenes
      << " scenes, rot med " << fmt_short(o.row.pose.rot_median)
      << " deg, trans med " << fmt_short(o.row.pose.trans_median)
      << " m, match p/r/f " << fmt_short(o.prf.precision) << "/"
      << fmt_short(o.prf.recall) << "/" << fmt_short(o.prf.f1)
      << ", mean init costs rot " << fmt_short(cr) << " trans "
      << fmt_short(ct) << "\n";
}

std::string method_label(const EvalConfig& c) {
  if (c.method == "nope-sac" && c.fusion != hypo::Fusion::kSoft)
    return c.method + "-" + hypo::fusion_name(c.fusion);
  return c.method;
}

// --- sweep report (its own schema: cell label + summary + matcher PRF) ---

const std::vector<std::string>& sweep_columns() {
  static const std::vector<std::string> cols = [] {
    std::vector<std::string> c{"cell"};
    const auto& rc = eval::report_columns();
    c.insert(c.end(), rc.begin(), rc.end());
    c.insert(c.end(), {"match_precision", "match_recall", "match_f1"});
    return c;
  }();
  return cols;
}

struct SweepRow {
  std::string cell;
  eval::ReportRow row;
  match::Prf prf;
};

std::vector<double> row_numbers(const eval::ReportRow& r) {
  const auto& p = r.pose;
  std::vector<double> v{p.rot_median, p.rot_mean,  p.rot_le30,  p.rot_le15,
                        p.rot_le10,   p.trans_median, p.trans_mean,
                        p.trans_le1,  p.trans_le05, p.trans_le02};
  for (double a : r.ap) v.push_back(a);
  return v;
}

void write_sweep_csv(const std::vector<SweepRow>& rows,
                     const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open sweep report: " + path);
  const auto& cols = sweep_columns();
  for (size_t i = 0; i < cols.size(); ++i)
    out << (i ? "," : "") << cols[i];
  out << '\n';
  for (const auto& r : rows) {
    out << r.cell << ',' << r.row.method;
    for (double v : row_numbers(r.row)) out << ',' << fmt(v);
    out << ',' << fmt(r.prf.precision) << ',' << fmt(r.prf.recall) << ','
        << fmt(r.prf.f1) << '\n';
  }
  if (!out) throw IoError("failed writing sweep report: " + path);
}

void write_sweep_json(const std::vector<SweepRow>& rows,
                      const std::string& path) {
  nlohmann::ordered_json doc;
  doc["columns"] = sweep_columns();
  doc["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json jr;
    jr["cell"] = r.cell;
    jr["method"] = r.row.method;
    const auto& cols = eval::report_columns();
    const std::vector<double> nums = row_numbers(r.row);
    for (size_t i = 1; i < cols.size(); ++i) jr[cols[i]] = nums[i - 1];
    jr["match_precision"] = r.prf.precision;
    jr["match_recall"] = r.prf.recall;
    jr["match_f1"] = r.prf.f1;
    doc["rows"].push_back(std::move(jr));
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open sweep report: " + path);
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("failed writing sweep report: " + path);
}

}  // namespace

void run_gen(const Options& o, std::ostream& out) {
  OptionReader r(o);
  const std::string path = r.require("out");
  synth::SceneConfig cfg;
  cfg.seed = r.seed("seed", true);
  const int scenes = static_cast<int>(r.integer("scenes", 100, 1, 1000000));
  cfg.min_planes = static_cast<int>(r.integer("min_planes", 4, 1, 64));
  cfg.max_planes = static_cast<int>(r.integer("max_planes", 6, 1, 64));
  cfg.rot_range = r.num("rot_range", 0.5, 0.0, 3.141592653589793);
  cfg.trans_range = r.num("trans_range", 1.0, 0.0, 100.0);
  cfg.sigma_offset = r.num("sigma_offset", 0.0, 0.0, 10.0);
  cfg.sigma_normal_deg = r.num("sigma_normal_deg", 0.0, 0.0, 90.0);
  cfg.descriptor_dim =
      static_cast<int>(r.integer("descriptor_dim", 256, 2, 4096));
  cfg.descriptor_noise = r.num("descriptor_noise", 0.0, 0.0, 10.0);
  cfg.outlier_rate = r.num("outlier_rate", 0.0, 0.0, 0.999);
  r.finish();
  if (cfg.max_planes < cfg.min_planes)
    throw InvalidArgument("max_planes must be >= min_planes");

  const synth::Dataset ds = synth::generate_dataset(cfg, scenes);
  synth::write_dataset(ds, path);
  out << "wrote " << scenes << " scenes to " << path << " (plane noise "
      << fmt_short(cfg.sigma_offset) << " m / "
      << fmt_short(cfg.sigma_normal_deg) << " deg, descriptor noise "
      << fmt_short(cfg.descriptor_noise) << ", outlier rate "
      << fmt_short(cfg.outlier_rate) << ")\n";
}

void run_train(const Options& o, std::ostream& out) {
  OptionReader r(o);
  const std::string data = r.require("data");
  train::TrainConfig c;
  c.checkpoint_path = r.require("out");
  c.seed = r.seed("seed", true);
  c.log_path = r.str("log", c.checkpoint_path + ".log.csv");
  c.resume_path = r.str("resume", "");
  c.aim_steps = static_cast<int>(r.integer("aim_steps", 60000, 0, 10000000));
  c.refine_steps =
      static_cast<int>(r.integer("refine_steps", 20000, 0, 10000000));
  c.aim_batch = static_cast<int>(r.integer("aim_batch", 16, 1, 4096));
  c.refine_batch = static_cast<int>(r.integer("refine_batch", 16, 2, 4096));
  c.aim_lr = r.num("aim_lr", 1e-4, 1e-12, 1.0);
  c.refine_lr = r.num("refine_lr", 1e-4, 1e-12, 1.0);
  c.lr_decay = r.num("lr_decay", 0.1, 1e-6, 1.0);
  c.decay_at = r.num("decay_at", 0.7, 0.0, 1.0);
  c.pose_range = r.num("pose_range", 2.5, 1e-6, 100.0);
  c.init_rot_sigma_deg = r.num("init_rot_sigma_deg", 10.0, 0.0, 180.0);
  c.init_trans_sigma = r.num("init_trans_sigma", 0.3, 0.0, 100.0);
  c.match_threshold = r.num("match_threshold", 0.2, 0.0, 0.999);
  c.sinkhorn_iters =
      static_cast<int>(r.integer("sinkhorn_iters", 100, 1, 100000));
  c.val_every = static_cast<int>(r.integer("val_every", 500, 0, 10000000));
  c.val_poses = static_cast<int>(r.integer("val_poses", 200, 1, 100000));
  c.val_scenes = static_cast<int>(r.integer("val_scenes", 32, 1, 100000));
  r.finish();
  c.validate();

  const synth::Dataset ds = synth::read_dataset(data);
  train::train(ds, c);
  out << "trained " << c.aim_steps << " auto-encoder steps and "
      << c.refine_steps << " refinement steps on " << ds.scenes.size()
      << " scenes; checkpoint " << c.checkpoint_path << ", log " << c.log_path
      << "\n";
}

void run_estimate(const Options& o, std::ostream& out) {
  OptionReader r(o);
  const std::string data = r.require("data");
  const std::string base = r.require("out");
  EvalConfig c = read_eval_config(r, true);
  c.method = r.str("method", "nope-sac");
  check_method(c.method);
  c.fusion = hypo::parse_fusion(r.str("fusion", "soft"));
  std::string ckpt;
  if (c.method == "nope-sac") {
    ckpt = r.require("ckpt");
  } else {
    ckpt = r.str("ckpt", "");  // optional: reuse a trained matcher bin
  }
  const int threads = read_threads(r);
  r.finish();

  const synth::Dataset ds = synth::read_dataset(data);
  std::optional<train::Model> model;
  if (!ckpt.empty()) model = load_model(ckpt);

  const EvalOutcome res = evaluate_method(
      model ? &*model : nullptr, ds, c, threads, method_label(c));

  eval::Report rep;
  rep.rows.push_back(res.row);
  eval::write_report_csv(rep, base + ".csv");
  eval::write_report_json(rep, base + ".json");
  SceneCsv scenes_csv(base + "_scenes.csv");
  scenes_csv.add(res.row.method, res.scenes);

  print_outcome(out, res, static_cast<int>(ds.scenes.size()));
  out << "wrote " << base << ".csv, " << base << ".json, " << base
      << "_scenes.csv\n";
}

void run_baseline(const Options& o, std::ostream& out) {
  OptionReader r(o);
  const std::string data = r.require("data");
  const std::string base = r.require("out");
  EvalConfig c = read_eval_config(r, false);
  const std::string ckpt = r.str("ckpt", "");
  const std::vector<std::string> methods = split_list(
      r.str("methods", "init-only,homo-ref,nume-ref1,nume-ref2"));
  const int threads = read_threads(r);
  r.finish();
  if (methods.empty()) throw InvalidArgument("methods list is empty");
  for (const auto& m : methods) {
    check_method(m);
    if (m == "nope-sac")
      throw InvalidArgument("baseline runs non-learned methods only");
  }

  const synth::Dataset ds = synth::read_dataset(data);
  std::optional<train::Model> model;
  if (!ckpt.empty()) model = load_model(ckpt);

  eval::Report rep;
  SceneCsv scenes_csv(base + "_scenes.csv");
  for (const auto& m : methods) {
    EvalConfig mc = c;
    mc.method = m;
    const EvalOutcome res = evaluate_method(model ? &*model : nullptr, ds, mc,
                                            threads, m);
    rep.rows.push_back(res.row);
    scenes_csv.add(m, res.scenes);
    print_outcome(out, res, static_cast<int>(ds.scenes.size()));
  }
  eval::write_report_csv(rep, base + ".csv");
  eval::write_report_json(rep, base + ".json");
  out << "wrote " << base << ".csv, " << base << ".json, " << base
      << "_scenes.csv\n";
}

void run_sweep(const Options& o, std::ostream& out) {
  OptionReader r(o);
  const std::string data = r.require("data");
  const std::string base = r.require("out");
  const std::string mode = r.str("mode", "threshold");
  if (mode != "threshold" && mode != "noise")
    throw InvalidArgument("mode must be threshold or noise");
  EvalConfig c = read_eval_config(r, false);
  c.method = r.str("method", "nope-sac");
  check_method(c.method);
  c.fusion = hypo::parse_fusion(r.str("fusion", "soft"));
  std::string ckpt;
  if (c.method == "nope-sac") {
    ckpt = r.require("ckpt");
  } else {
    ckpt = r.str("ckpt", "");
  }
  const int threads = read_threads(r);
  r.finish();

  const synth::Dataset ds = synth::read_dataset(data);
  std::optional<train::Model> model;
  if (!ckpt.empty()) model = load_model(ckpt);
  const train::Model* mp = model ? &*model : nullptr;
  const std::string label = method_label(c);

  std::vector<SweepRow> rows;
  if (mode == "threshold") {
    for (const double thr : {0.2, 0.1, 0.01, 0.001}) {
      EvalConfig cc = c;
      cc.match_threshold = thr;
      const EvalOutcome res = evaluate_method(mp, ds, cc, threads, label);
      rows.push_back({"thr=" + fmt_short(thr), res.row, res.prf});
    }
  } else {
    const double grid[4][2] = {{0, 0}, {0.1, 5}, {0.2, 10}, {0.3, 15}};
    for (int k = 0; k < 4; ++k) {
      EvalConfig cc = c;
      cc.noise_offset = grid[k][0];
      cc.noise_normal_deg = grid[k][1];
      cc.noise_stream = k;
      const EvalOutcome res = evaluate_method(mp, ds, cc, threads, label);
      const std::string cell =
          k == 0 ? "clean"
                 : "noise=" + fmt_short(grid[k][0]) + "m_" +
                       fmt_short(grid[k][1]) + "deg";
      rows.push_back({cell, res.row, res.prf});
    }
  }

  write_sweep_csv(rows, base + ".csv");
  write_sweep_json(rows, base + ".json");
  for (const auto& row : rows) {
    out << row.cell << ": rot med " << fmt_short(row.row.pose.rot_median)
        << " deg, trans med " << fmt_short(row.row.pose.trans_median)
        << " m, match precision " << fmt_short(row.prf.precision) << "\n";
  }
  out << "wrote " << base << ".csv, " << base << ".json\n";
}

namespace {

double rel_gap(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-3});
}

// Central differences on random coordinates of one network; biased analytic
// values (the corrupt hook) must blow past the 1e-4 gate.
void probe_net(nn::Mlp& net, const nn::MlpGrads& grads,
               const std::function<double()>& eval, Rng rng, int probes,
               bool biased, GradSuite& suite) {
  const double h = 1e-6;
  for (int t = 0; t < probes; ++t) {
    const int l = rng.uniform_int(static_cast<int>(net.layers.size()));
    auto& layer = net.layers[l];
    double* x = nullptr;
    double analytic = 0;
    if (rng.uniform() < 0.25) {
      const int row = rng.uniform_int(static_cast<int>(layer.bias.size()));
      x = &layer.bias[row];
      analytic = grads.dbias[l][row];
    } else {
      const int row = rng.uniform_int(static_cast<int>(layer.weight.rows()));
      const int col = rng.uniform_int(static_cast<int>(layer.weight.cols()));
      x = &layer.weight(row, col);
      analytic = grads.dweight[l](row, col);
    }
    if (biased) analytic += 0.05;
    const double saved = *x;
    *x = saved + h;
    const double up = eval();
    *x = saved - h;
    const double down = eval();
    *x = saved;
    suite.max_rel = std::max(suite.max_rel, rel_gap((up - down) / (2 * h),
                                                    analytic));
    ++suite.probes;
  }
}

}  // namespace

std::vector<GradSuite> gradient_suites(const std::string& corrupt) {
  const std::vector<std::string> names = {
      "rot_enc", "trans_enc", "linear_rot", "linear_trans", "g",
      "e_r",     "e_t",       "d_r",        "d_t",          "score_r",
      "score_t", "sinkhorn"};
  if (!corrupt.empty() &&
      std::find(names.begin(), names.end(), corrupt) == names.end())
    throw InvalidArgument("unknown gradient suite: " + corrupt);

  std::vector<GradSuite> suites;
  for (const auto& n : names) suites.push_back({n, 0.0, 0, false});
  const auto at = [&](const char* n) -> GradSuite& {
    return suites[std::find(names.begin(), names.end(), n) - names.begin()];
  };

  constexpr int kInstances = 10;
  constexpr int kProbes = 6;
  for (int inst = 0; inst < kInstances; ++inst) {
    Rng rng = Rng(0x47524144).split(inst);
    hypo::NopeSacParams p = hypo::make_nopesac_params(rng.split(0));

    // Pose auto-encoder and the shared decoding heads.
    Rng pr = rng.split(1);
    std::vector<geom::Pose> poses;
    for (int i = 0; i < 2; ++i) poses.push_back(synth::sample_pose(pr, 2.5));
    hypo::AimGrads ag = hypo::AimGrads::zeros_like(p);
    hypo::aim_loss_grad(p, poses, ag);
    const auto aim_eval = [&] {
      double s = 0;
      for (const auto& ps : poses) s += hypo::aim_loss(p, ps) / poses.size();
      return s;
    };
    probe_net(p.rot_enc, ag.rot_enc, aim_eval, rng.split(2), kProbes,
              corrupt == "rot_enc", at("rot_enc"));
    probe_net(p.trans_enc, ag.trans_enc, aim_eval, rng.split(3), kProbes,
              corrupt == "trans_enc", at("trans_enc"));
    probe_net(p.linear_rot, ag.linear_rot, aim_eval, rng.split(4), kProbes,
              corrupt == "linear_rot", at("linear_rot"));
    probe_net(p.linear_trans, ag.linear_trans, aim_eval, rng.split(5), kProbes,
              corrupt == "linear_trans", at("linear_trans"));

    // Hypothesis generation, scoring and fusion through the full loss.
    synth::SceneConfig sc;
    sc.min_planes = 3;
    sc.max_planes = 4;
    sc.descriptor_dim = 8;
    Rng sr = rng.split(6);
    const synth::ScenePair scene = synth::sample_scene(sr, sc);
    hypo::RefineItem item;
    item.gt = scene.pose;
    item.init = perturb_pose(scene.pose, 10.0, 0.3, sr);
    for (const auto& [i, j] : scene.correspondences)
      item.corrs.emplace_back(scene.views[0][i].plane,
                              scene.views[1][j].plane);
    hypo::RefinerGrads rg = hypo::RefinerGrads::zeros_like(p);
    const std::vector<hypo::RefineItem> batch{item};
    hypo::refinement_loss_grad(p, batch, rg);
    const auto ref_eval = [&] { return hypo::refinement_loss(p, item); };
    probe_net(p.g, rg.g, ref_eval, rng.split(7), kProbes, corrupt == "g",
              at("g"));
    probe_net(p.e_r, rg.e_r, ref_eval, rng.split(8), kProbes,
              corrupt == "e_r", at("e_r"));
    probe_net(p.e_t, rg.e_t, ref_eval, rng.split(9), kProbes,
              corrupt == "e_t", at("e_t"));
    probe_net(p.d_r, rg.d_r, ref_eval, rng.split(10), kProbes,
              corrupt == "d_r", at("d_r"));
    probe_net(p.d_t, rg.d_t, ref_eval, rng.split(11), kProbes,
              corrupt == "d_t", at("d_t"));
    probe_net(p.score_r, rg.score_r, ref_eval, rng.split(12), kProbes,
              corrupt == "score_r", at("score_r"));
    probe_net(p.score_t, rg.score_t, ref_eval, rng.split(13), kProbes,
              corrupt == "score_t", at("score_t"));

    // Assignment loss unrolled through the Sinkhorn iterations.
    Rng mr = rng.split(14);
    nn::Matrix scores(4, 5);
    for (int i = 0; i < scores.size(); ++i) scores(i) = mr.normal();
    double bin = -0.5;
    const std::vector<std::pair<int, int>> gt_pairs{{0, 0}, {1, 1}};
    const std::vector<int> un1{2, 3};
    const std::vector<int> un2{2, 3, 4};
    const int iters = 30;
    const match::MatchingLoss ml =
        match::matching_loss_grad(scores, bin, iters, gt_pairs, un1, un2);
    const auto sink_eval = [&] {
      match::Assignment a = match::sinkhorn_dustbin(scores, bin, iters);
      return match::matching_loss(a, gt_pairs, un1, un2);
    };
    GradSuite& sk = at("sinkhorn");
    const bool sk_bad = corrupt == "sinkhorn";
    const double h = 1e-6;
    for (int t = 0; t < kProbes + 2; ++t) {
      const int row = mr.uniform_int(static_cast<int>(scores.rows()));
      const int col = mr.uniform_int(static_cast<int>(scores.cols()));
      const double saved = scores(row, col);
      scores(row, col) = saved + h;
      const double up = sink_eval();
      scores(row, col) = saved - h;
      const double down = sink_eval();
      scores(row, col) = saved;
      const double analytic = ml.dscores(row, col) + (sk_bad ? 0.05 : 0.0);
      sk.max_rel = std::max(sk.max_rel,
                            rel_gap((up - down) / (2 * h), analytic));
      ++sk.probes;
    }
    {
      const double saved = bin;
      bin = saved + h;
      const double up = sink_eval();
      bin = saved - h;
      const double down = sink_eval();
      bin = saved;
      const double analytic = ml.dbin + (sk_bad ? 0.05 : 0.0);
      sk.max_rel = std::max(sk.max_rel,
                            rel_gap((up - down) / (2 * h), analytic));
      ++sk.probes;
    }
  }

  for (auto& s : suites) s.pass = s.max_rel < 1e-4;
  return suites;
}

void run_gradcheck(const Options& o, std::ostream& out) {
  OptionReader r(o);
  const std::string corrupt = r.str("corrupt", "");
  r.finish();

  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<GradSuite> suites = gradient_suites(corrupt);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();

  std::vector<std::string> failed;
  for (const auto& s : suites) {
    out << "gradcheck " << s.name << ": max rel err " << fmt_short(s.max_rel)
        << " over " << s.probes << " probes: " << (s.pass ? "pass" : "FAIL")
        << "\n";
    if (!s.pass) failed.push_back(s.name);
  }
  out << suites.size() << " suites in " << fmt_short(secs) << " s\n";
  if (!failed.empty()) {
    std::string what = "gradient check failed:";
    for (const auto& n : failed) what += " " + n;
    throw Error(what);
  }
}

void run_report(const Options& o, std::ostream& out) {
  OptionReader r(o);
  const std::vector<std::string> inputs = split_list(r.require("in"));
  const std::string base = r.require("out");
  r.finish();
  if (inputs.empty()) throw InvalidArgument("in: no report files listed");

  eval::Report merged;
  for (const auto& path : inputs) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open report: " + path);
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(in);
    } catch (const std::exception& e) {
      throw ParseError(path + ": " + e.what());
    }
    if (!doc.is_object() || !doc.contains("columns") || !doc.contains("rows"))
      throw ParseError(path + ": not a report file");
    const auto& cols = eval::report_columns();
    if (doc["columns"] != nlohmann::json(cols))
      throw ParseError(path + ": unexpected column set");
    for (const auto& jr : doc["rows"]) {
      eval::ReportRow row;
      try {
        row.method = jr.at("method").get<std::string>();
        auto& p = row.pose;
        double* cells[10] = {&p.rot_median, &p.rot_mean,  &p.rot_le30,
                             &p.rot_le15,   &p.rot_le10,  &p.trans_median,
                             &p.trans_mean, &p.trans_le1, &p.trans_le05,
                             &p.trans_le02};
        for (int i = 0; i < 10; ++i) *cells[i] = jr.at(cols[1 + i]).get<double>();
        int nulls = 0;
        for (int i = 0; i < 9; ++i) {
          const auto& cell = jr.at(cols[11 + i]);
          if (cell.is_null()) {
            ++nulls;
          } else {
            row.ap[i] = cell.get<double>();
          }
        }
        if (nulls != 0 && nulls != 9)
          throw ParseError(path + ": partially filled ap cells");
        row.has_ap = nulls == 0;
      } catch (const ParseError&) {
        throw;
      } catch (const std::exception& e) {
        throw ParseError(path + ": bad row: " + e.what());
      }
      merged.rows.push_back(std::move(row));
    }
  }

  eval::write_report_csv(merged, base + ".csv");
  eval::write_report_json(merged, base + ".json");
  out << "merged " << merged.rows.size() << " rows from " << inputs.size()
      << " reports into " << base << ".csv, " << base << ".json\n";
}

}  // namespace planepose::pipeline
