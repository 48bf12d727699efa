#include "planepose/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>

#include "json.hpp"

namespace planepose::synth {

namespace {

constexpr double kMinPairwiseNormalDot = 0.984807753012208;  // cos(10 deg)
constexpr double kMinNormalZ = 0.1;
constexpr double kMinDepth = 0.2;
constexpr double kMinFrame2Offset = 0.1;

geom::Vec3 random_unit3(Rng& rng) {
  while (true) {
    geom::Vec3 v(rng.normal(), rng.normal(), rng.normal());
    double n = v.norm();
    if (n > 1e-6) return v / n;
  }
}

nn::Vector random_unit_descriptor(Rng& rng, int dim) {
  nn::Vector v(dim);
  double n = 0;
  do {
    for (int i = 0; i < dim; ++i) v(i) = rng.normal();
    n = v.norm();
  } while (n < 1e-6);
  return v / n;
}

void plane_basis(const geom::Vec3& n, geom::Vec3& e1, geom::Vec3& e2) {
  geom::Vec3 a =
      std::abs(n.x()) < 0.9 ? geom::Vec3::UnitX() : geom::Vec3::UnitY();
  e1 = n.cross(a).normalized();
  e2 = n.cross(e1);
}

// Convex quadrilateral on the plane around a ray-sampled center. corner_ok
// screens the 3D corners (depth constraints); relax drops that screen.
bool try_footprint(const geom::Plane& p, Rng& rng,
                   const std::function<bool(const geom::Vec3&)>& corner_ok,
                   bool relax, std::vector<geom::Vec3>& out) {
  geom::Vec3 e1, e2;
  plane_basis(p.normal, e1, e2);
  for (int center_try = 0; center_try < 20; ++center_try) {
    geom::Vec3 m(0.45 * (2 * rng.uniform() - 1),
                 0.45 * (2 * rng.uniform() - 1), 1.0);
    m.normalize();
    double nm = p.normal.dot(m);
    if (nm < 0.25) continue;
    double hit = p.offset / nm;
    if (hit > 12.0) continue;
    geom::Vec3 c = hit * m;
    double r = std::clamp(0.25 * hit * (0.6 + 0.8 * rng.uniform()), 0.2, 2.0);

    // jittered quadrilateral, falling back to a rotated square
    std::array<double, 4> theta, rho;
    bool convex = false;
    for (int shape_try = 0; shape_try < 20 && !convex; ++shape_try) {
      double phi = 2 * M_PI * rng.uniform();
      for (int i = 0; i < 4; ++i) {
        theta[i] =
            phi + i * M_PI / 2 + 0.7 * (M_PI / 4) * (2 * rng.uniform() - 1);
        rho[i] = r * (0.6 + 0.4 * rng.uniform());
      }
      convex = true;
      for (int i = 0; i < 4 && convex; ++i) {
        auto vx = [&](int k) { return rho[k % 4] * std::cos(theta[k % 4]); };
        auto vy = [&](int k) { return rho[k % 4] * std::sin(theta[k % 4]); };
        double ax = vx(i + 1) - vx(i), ay = vy(i + 1) - vy(i);
        double bx = vx(i + 2) - vx(i + 1), by = vy(i + 2) - vy(i + 1);
        if (ax * by - ay * bx <= 1e-9) convex = false;
      }
    }
    if (!convex) {
      double phi = 2 * M_PI * rng.uniform();
      for (int i = 0; i < 4; ++i) {
        theta[i] = phi + M_PI / 4 + i * M_PI / 2;
        rho[i] = r;
      }
    }

    std::vector<geom::Vec3> corners(4);
    bool ok = true;
    for (int i = 0; i < 4; ++i) {
      corners[i] =
          c + e1 * (rho[i] * std::cos(theta[i])) + e2 * (rho[i] * std::sin(theta[i]));
      if (!relax && !corner_ok(corners[i])) ok = false;
    }
    if (ok) {
      out = std::move(corners);
      return true;
    }
  }
  return false;
}

geom::Plane random_plane(Rng& rng,
                         const std::vector<geom::Plane>* distinct_from) {
  for (int tries = 0; tries < 100000; ++tries) {
    geom::Vec3 n = random_unit3(rng);
    double d = 0.5 + 4.5 * rng.uniform();
    if (n.z() < kMinNormalZ) continue;
    if (distinct_from) {
      bool ok = true;
      for (const auto& e : *distinct_from) {
        if (e.normal.dot(n) > kMinPairwiseNormalDot) ok = false;
      }
      if (!ok) continue;
    }
    return geom::Plane(n, d);
  }
  throw InvalidArgument("cannot place another plane with a distinct normal");
}

void validate_config(const SceneConfig& cfg) {
  if (cfg.min_planes < 1 || cfg.max_planes < cfg.min_planes) {
    throw InvalidArgument("plane count range must satisfy 1 <= min <= max");
  }
  if (cfg.rot_range < 0 || cfg.trans_range < 0) {
    throw InvalidArgument("pose sampling ranges must be non-negative");
  }
  if (cfg.sigma_offset < 0 || cfg.sigma_normal_deg < 0 ||
      cfg.descriptor_noise < 0) {
    throw InvalidArgument("noise sigmas must be non-negative");
  }
  if (cfg.descriptor_dim < 1) {
    throw InvalidArgument("descriptor dimension must be positive");
  }
  if (!(cfg.outlier_rate >= 0 && cfg.outlier_rate < 1)) {
    throw InvalidArgument("outlier rate must lie in [0, 1)");
  }
}

}  // namespace

std::vector<int> unmatched_indices(const ScenePair& scene, int view) {
  if (view < 0 || view > 1) throw InvalidArgument("view must be 0 or 1");
  std::vector<char> used(scene.views[view].size(), 0);
  for (const auto& [i, j] : scene.correspondences) {
    int k = view == 0 ? i : j;
    if (k < 0 || k >= static_cast<int>(used.size())) {
      throw IndexOutOfRange("correspondence references a missing observation");
    }
    used[k] = 1;
  }
  std::vector<int> out;
  for (size_t k = 0; k < used.size(); ++k) {
    if (!used[k]) out.push_back(static_cast<int>(k));
  }
  return out;
}

geom::Pose sample_pose(Rng& rng, double rot_range, double trans_range) {
  if (rot_range < 0 || trans_range < 0) {
    throw InvalidArgument("pose sampling range must be non-negative");
  }
  auto u = [&](double r) { return r * (2 * rng.uniform() - 1); };
  geom::Vec3 rv(u(rot_range), u(rot_range), u(rot_range));
  geom::Vec3 t(u(trans_range), u(trans_range), u(trans_range));
  return {geom::UnitQuaternion::from_rotation_vector(rv), t};
}

ScenePair sample_scene(Rng& rng, const SceneConfig& cfg) {
  validate_config(cfg);
  ScenePair scene;
  scene.pose = sample_pose(rng, cfg.rot_range, cfg.trans_range);
  const int count =
      cfg.min_planes +
      static_cast<int>(rng.uniform_int(cfg.max_planes - cfg.min_planes + 1));

  std::vector<std::vector<geom::Vec3>> footprints;
  int pose_retries = 0;
  while (static_cast<int>(scene.gt_planes.size()) < count) {
    std::vector<geom::Vec3> fp;
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      geom::Plane cand = random_plane(rng, &scene.gt_planes);
      // keep camera 2 on the positive side so the warped form is canonical
      if (geom::warp_plane_signed(cand, scene.pose).offset < kMinFrame2Offset) {
        continue;
      }
      bool both_views = attempt < 100;
      auto corner_ok = [&](const geom::Vec3& x) {
        if (x.z() < kMinDepth) return false;
        return !both_views || geom::apply(scene.pose, x).z() >= kMinDepth;
      };
      if (try_footprint(cand, rng, corner_ok, false, fp) ||
          (attempt == 199 && try_footprint(cand, rng, corner_ok, true, fp))) {
        scene.gt_planes.push_back(cand);
        footprints.push_back(fp);
        placed = true;
      }
    }
    if (!placed) {
      // pathological pose/config combination: restart with a fresh pose
      if (++pose_retries > 1000) {
        throw InvalidArgument(
            "scene config cannot satisfy the visibility constraints");
      }
      scene.pose = sample_pose(rng, cfg.rot_range, cfg.trans_range);
      scene.gt_planes.clear();
      footprints.clear();
    }
  }

  // view 1 in sampling order, view 2 shuffled
  for (int k = 0; k < count; ++k) {
    Observation obs;
    obs.plane = scene.gt_planes[k];
    obs.descriptor = random_unit_descriptor(rng, cfg.descriptor_dim);
    obs.footprint = footprints[k];
    obs.plane_id = k;
    scene.views[0].push_back(std::move(obs));
  }
  std::vector<int> slot_of(count);
  std::iota(slot_of.begin(), slot_of.end(), 0);
  for (int i = count - 1; i > 0; --i) {
    int j = static_cast<int>(rng.uniform_int(i + 1));
    std::swap(slot_of[i], slot_of[j]);
  }
  scene.views[1].resize(count);
  for (int k = 0; k < count; ++k) {
    const Observation& src = scene.views[0][k];
    Observation obs;
    obs.plane = geom::warp_plane(src.plane, scene.pose);
    obs.descriptor = src.descriptor;
    obs.footprint.reserve(4);
    for (const auto& x : src.footprint) {
      obs.footprint.push_back(geom::apply(scene.pose, x));
    }
    obs.plane_id = k;
    scene.views[1][slot_of[k]] = std::move(obs);
    scene.correspondences.emplace_back(k, slot_of[k]);
  }
  return scene;
}

ScenePair perturb(const ScenePair& scene, double sigma_offset,
                  double sigma_normal_deg, double desc_noise, Rng& rng) {
  if (sigma_offset < 0 || sigma_normal_deg < 0 || desc_noise < 0) {
    throw InvalidArgument("noise sigmas must be non-negative");
  }
  ScenePair out = scene;
  for (auto& view : out.views) {
    for (auto& obs : view) {
      if (sigma_normal_deg > 0) {
        double angle = sigma_normal_deg * M_PI / 180.0 * rng.normal();
        geom::Vec3 axis = random_unit3(rng);
        auto q = geom::UnitQuaternion::from_rotation_vector(axis * angle);
        obs.plane = geom::Plane(q.rotate(obs.plane.normal), obs.plane.offset);
      }
      if (sigma_offset > 0) {
        double d = obs.plane.offset + sigma_offset * rng.normal();
        obs.plane = geom::Plane(obs.plane.normal, d == 0 ? 1e-12 : d)
                        .canonicalized();
      }
      if (desc_noise > 0) {
        for (int i = 0; i < obs.descriptor.size(); ++i) {
          obs.descriptor(i) += desc_noise * rng.normal();
        }
        double n = obs.descriptor.norm();
        if (n > 1e-12) obs.descriptor /= n;
      }
    }
  }
  return out;
}

ScenePair inject_outliers(const ScenePair& scene, double rate, Rng& rng) {
  if (!(rate >= 0 && rate < 1)) {
    throw InvalidArgument("outlier rate must lie in [0, 1)");
  }
  ScenePair out = scene;
  if (rate == 0) return out;

  for (auto& view : out.views) {
    const int real = static_cast<int>(view.size());
    if (real == 0) continue;
    const int dim = static_cast<int>(view[0].descriptor.size());
    const int extra = static_cast<int>(std::ceil(rate * real));
    for (int a = 0; a < extra; ++a) {
      Observation obs;
      obs.plane = random_plane(rng, nullptr);
      obs.descriptor = random_unit_descriptor(rng, dim);
      obs.plane_id = -1;
      auto corner_ok = [](const geom::Vec3& x) { return x.z() >= kMinDepth; };
      if (!try_footprint(obs.plane, rng, corner_ok, false, obs.footprint)) {
        try_footprint(obs.plane, rng, corner_ok, true, obs.footprint);
      }
      view.push_back(std::move(obs));
    }
  }

  // descriptor identity corruption among the real view-2 observations
  const int real2 = static_cast<int>(scene.views[1].size());
  const int swapped = static_cast<int>(std::lround(rate * real2));
  if (swapped >= 1 && real2 >= 1) {
    std::vector<int> idx(real2);
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < swapped; ++i) {
      int j = i + static_cast<int>(rng.uniform_int(real2 - i));
      std::swap(idx[i], idx[j]);
    }
    if (swapped == 1) {
      const int dim = static_cast<int>(scene.views[1][0].descriptor.size());
      out.views[1][idx[0]].descriptor = random_unit_descriptor(rng, dim);
    } else {
      nn::Vector first = out.views[1][idx[0]].descriptor;
      for (int i = 0; i + 1 < swapped; ++i) {
        out.views[1][idx[i]].descriptor = out.views[1][idx[i + 1]].descriptor;
      }
      out.views[1][idx[swapped - 1]].descriptor = std::move(first);
    }
  }
  return out;
}

Dataset generate_dataset(const SceneConfig& cfg, int count) {
  validate_config(cfg);
  if (count < 0) throw InvalidArgument("scene count must be non-negative");
  Dataset ds;
  ds.config = cfg;
  ds.scenes.reserve(count);
  Rng root(cfg.seed);
  for (int i = 0; i < count; ++i) {
    Rng r = root.split(i);
    ScenePair s = sample_scene(r, cfg);
    if (cfg.sigma_offset > 0 || cfg.sigma_normal_deg > 0 ||
        cfg.descriptor_noise > 0) {
      s = perturb(s, cfg.sigma_offset, cfg.sigma_normal_deg,
                  cfg.descriptor_noise, r);
    }
    if (cfg.outlier_rate > 0) s = inject_outliers(s, cfg.outlier_rate, r);
    ds.scenes.push_back(std::move(s));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// dataset files: JSON, floats with 17 significant digits

namespace {

void put(std::string& s, double v) {
  if (!std::isfinite(v)) throw IoError("non-finite value in dataset");
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  s += buf;
}

void put_vec3(std::string& s, const geom::Vec3& v) {
  s += '[';
  put(s, v.x());
  s += ',';
  put(s, v.y());
  s += ',';
  put(s, v.z());
  s += ']';
}

void put_plane(std::string& s, const geom::Plane& p) {
  s += "{\"n\":";
  put_vec3(s, p.normal);
  s += ",\"d\":";
  put(s, p.offset);
  s += '}';
}

void put_observation(std::string& s, const Observation& o) {
  s += "{\"plane\":";
  put_plane(s, o.plane);
  s += ",\"descriptor\":[";
  for (int i = 0; i < o.descriptor.size(); ++i) {
    if (i) s += ',';
    put(s, o.descriptor(i));
  }
  s += "],\"footprint\":[";
  for (size_t i = 0; i < o.footprint.size(); ++i) {
    if (i) s += ',';
    put_vec3(s, o.footprint[i]);
  }
  s += "],\"id\":";
  s += std::to_string(o.plane_id);
  s += '}';
}

}  // namespace

void write_dataset(const Dataset& ds, const std::string& path) {
  std::string s;
  s.reserve(1 << 20);
  s += "{\"version\":";
  s += std::to_string(ds.version);
  s += ",\"config\":{\"min_planes\":";
  s += std::to_string(ds.config.min_planes);
  s += ",\"max_planes\":";
  s += std::to_string(ds.config.max_planes);
  s += ",\"rot_range\":";
  put(s, ds.config.rot_range);
  s += ",\"trans_range\":";
  put(s, ds.config.trans_range);
  s += ",\"sigma_offset\":";
  put(s, ds.config.sigma_offset);
  s += ",\"sigma_normal_deg\":";
  put(s, ds.config.sigma_normal_deg);
  s += ",\"descriptor_dim\":";
  s += std::to_string(ds.config.descriptor_dim);
  s += ",\"descriptor_noise\":";
  put(s, ds.config.descriptor_noise);
  s += ",\"outlier_rate\":";
  put(s, ds.config.outlier_rate);
  s += ",\"seed\":";
  s += std::to_string(ds.config.seed);
  s += "},\"scenes\":[";
  for (size_t si = 0; si < ds.scenes.size(); ++si) {
    const ScenePair& sc = ds.scenes[si];
    if (si) s += ',';
    s += "{\"pose\":{\"quat\":[";
    geom::Vec4 q = sc.pose.rotation.coeffs();
    for (int i = 0; i < 4; ++i) {
      if (i) s += ',';
      put(s, q(i));
    }
    s += "],\"t\":";
    put_vec3(s, sc.pose.translation);
    s += "},\"planes\":[";
    for (size_t i = 0; i < sc.gt_planes.size(); ++i) {
      if (i) s += ',';
      put_plane(s, sc.gt_planes[i]);
    }
    s += "],\"views\":[";
    for (int v = 0; v < 2; ++v) {
      if (v) s += ',';
      s += '[';
      for (size_t i = 0; i < sc.views[v].size(); ++i) {
        if (i) s += ',';
        put_observation(s, sc.views[v][i]);
      }
      s += ']';
    }
    s += "],\"correspondences\":[";
    for (size_t i = 0; i < sc.correspondences.size(); ++i) {
      if (i) s += ',';
      s += '[';
      s += std::to_string(sc.correspondences[i].first);
      s += ',';
      s += std::to_string(sc.correspondences[i].second);
      s += ']';
    }
    s += "]}";
  }
  s += "]}";

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
  if (!f) throw IoError("failed writing " + path);
}

namespace {

using nlohmann::json;

geom::Vec3 read_vec3(const json& j) {
  if (!j.is_array() || j.size() != 3) throw ParseError("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

geom::Plane read_plane(const json& j) {
  geom::Plane p;
  p.normal = read_vec3(j.at("n"));
  p.offset = j.at("d").get<double>();
  if (std::abs(p.normal.norm() - 1.0) > 1e-6) {
    throw ParseError("plane normal is not unit length");
  }
  return p;
}

Observation read_observation(const json& j) {
  Observation o;
  o.plane = read_plane(j.at("plane"));
  const json& d = j.at("descriptor");
  if (!d.is_array() || d.empty()) throw ParseError("bad descriptor");
  o.descriptor.resize(static_cast<Eigen::Index>(d.size()));
  for (size_t i = 0; i < d.size(); ++i) o.descriptor(i) = d[i].get<double>();
  for (const json& c : j.at("footprint")) o.footprint.push_back(read_vec3(c));
  o.plane_id = j.at("id").get<int>();
  return o;
}

}  // namespace

Dataset read_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const std::exception& e) {
    throw ParseError("not a dataset file: " + std::string(e.what()));
  }
  try {
    Dataset ds;
    ds.version = j.at("version").get<int>();
    if (ds.version != 1) throw ParseError("unsupported dataset version");
    const json& c = j.at("config");
    ds.config.min_planes = c.at("min_planes").get<int>();
    ds.config.max_planes = c.at("max_planes").get<int>();
    ds.config.rot_range = c.at("rot_range").get<double>();
    ds.config.trans_range = c.at("trans_range").get<double>();
    ds.config.sigma_offset = c.at("sigma_offset").get<double>();
    ds.config.sigma_normal_deg = c.at("sigma_normal_deg").get<double>();
    ds.config.descriptor_dim = c.at("descriptor_dim").get<int>();
    ds.config.descriptor_noise = c.at("descriptor_noise").get<double>();
    ds.config.outlier_rate = c.at("outlier_rate").get<double>();
    ds.config.seed = c.at("seed").get<std::uint64_t>();
    for (const json& js : j.at("scenes")) {
      ScenePair sc;
      const json& pose = js.at("pose");
      const json& q = pose.at("quat");
      if (!q.is_array() || q.size() != 4) throw ParseError("bad quaternion");
      sc.pose.rotation = geom::UnitQuaternion::from_normalized(
          q[0].get<double>(), q[1].get<double>(), q[2].get<double>(),
          q[3].get<double>());
      sc.pose.translation = read_vec3(pose.at("t"));
      for (const json& p : js.at("planes")) {
        sc.gt_planes.push_back(read_plane(p));
      }
      const json& views = js.at("views");
      if (!views.is_array() || views.size() != 2) {
        throw ParseError("expected exactly two views");
      }
      for (int v = 0; v < 2; ++v) {
        for (const json& o : views[v]) {
          sc.views[v].push_back(read_observation(o));
        }
      }
      for (const json& pr : js.at("correspondences")) {
        if (!pr.is_array() || pr.size() != 2) {
          throw ParseError("bad correspondence pair");
        }
        int a = pr[0].get<int>(), b = pr[1].get<int>();
        if (a < 0 || b < 0 ||
            a >= static_cast<int>(sc.views[0].size()) ||
            b >= static_cast<int>(sc.views[1].size())) {
          throw ParseError("correspondence index out of range");
        }
        sc.correspondences.emplace_back(a, b);
      }
      ds.scenes.push_back(std::move(sc));
    }
    return ds;
  } catch (const json::exception& e) {
    throw ParseError("dataset schema: " + std::string(e.what()));
  } catch (const DegenerateQuaternion&) {
    throw ParseError("stored pose quaternion is not unit length");
  }
}

}  // namespace planepose::synth
