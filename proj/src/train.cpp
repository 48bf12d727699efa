#include "planepose/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <utility>

#include "planepose/errors.hpp"

namespace planepose::train {

namespace {

// Stream ids under the config seed; 0 is parameter init.
constexpr std::uint64_t kAimStream = 1;
constexpr std::uint64_t kRefineStream = 2;
constexpr std::uint64_t kValPoseStream = 3;
constexpr std::uint64_t kValSceneStream = 4;

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const size_t k = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + k, v.end());
  const double hi = v[k];
  if (v.size() % 2 == 1) return hi;
  std::nth_element(v.begin(), v.begin() + k - 1, v.begin() + k);
  return 0.5 * (v[k - 1] + hi);
}

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

// Per-step CSV; every cell is either %.17g or empty, so reruns with the
// same seed and config produce byte-identical files.
class TrainLog {
 public:
  explicit TrainLog(const std::string& path) {
    if (path.empty()) return;
    out_.open(path, std::ios::trunc);
    if (!out_) throw IoError("cannot open training log: " + path);
    out_ << "stage,step,lr,loss,loss_pose,loss_match,"
            "val_loss,val_rot_deg,val_trans\n";
  }

  void row(const char* stage, int step, double lr, std::optional<double> loss,
           std::optional<double> pose, std::optional<double> match,
           std::optional<double> val_loss, std::optional<double> val_rot,
           std::optional<double> val_trans) {
    if (!out_.is_open()) return;
    out_ << stage << ',' << step << ',' << fmt(lr);
    for (const auto& cell : {loss, pose, match, val_loss, val_rot, val_trans}) {
      out_ << ',';
      if (cell) out_ << fmt(*cell);
    }
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

geom::Pose perturb_init(const geom::Pose& gt, Rng& rng,
                        const TrainConfig& c) {
  const double sr = c.init_rot_sigma_deg * M_PI / 180.0;
  const geom::Vec3 v(sr * rng.normal(), sr * rng.normal(), sr * rng.normal());
  geom::Pose init;
  init.rotation = geom::UnitQuaternion::from_rotation_vector(v) * gt.rotation;
  init.translation =
      gt.translation + c.init_trans_sigma * geom::Vec3(rng.normal(),
                                                       rng.normal(),
                                                       rng.normal());
  return init;
}

struct SceneCorrs {
  std::vector<hypo::PlanePair> pred;
  std::vector<hypo::PlanePair> gt;
  double match_loss = 0;
  double match_dbin = 0;
};

// Matcher forward pass on one scene: ground-truth pairs, predicted pairs at
// the given initial pose, and (optionally) the assignment loss and its bin
// gradient. Falls back to the GT pairs when nothing clears the threshold.
SceneCorrs scene_corrs(const Model& m, const synth::ScenePair& scene,
                       const geom::Pose& init, const TrainConfig& c,
                       bool with_grad) {
  SceneCorrs out;
  for (const auto& [i, j] : scene.correspondences) {
    if (static_cast<int>(out.gt.size()) == hypo::kScoreSlots) break;
    out.gt.emplace_back(scene.views[0][i].plane, scene.views[1][j].plane);
  }

  const auto& v1 = scene.views[0];
  const auto& v2 = scene.views[1];
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
  const nn::Matrix scores = match::full_score(
      match::appearance_affinity(d1, d2), match::geometric_score(p1, p2, init));

  if (with_grad) {
    const match::MatchingLoss ml = match::matching_loss_grad(
        scores, m.bin, c.sinkhorn_iters, scene.correspondences,
        synth::unmatched_indices(scene, 0), synth::unmatched_indices(scene, 1));
    out.match_loss = ml.value;
    out.match_dbin = ml.dbin;
  }

  match::Assignment a = match::sinkhorn_dustbin(scores, m.bin,
                                                c.sinkhorn_iters);
  for (const match::Match& mt : match::extract_matches(a, c.match_threshold)) {
    if (static_cast<int>(out.pred.size()) == hypo::kScoreSlots) break;
    out.pred.emplace_back(v1[mt.i].plane, v2[mt.j].plane);
  }
  if (out.pred.empty()) out.pred = out.gt;
  return out;
}

std::vector<nn::ParamView> stage_a_views(hypo::NopeSacParams& p,
                                         hypo::AimGrads& g) {
  std::vector<nn::ParamView> out;
  const auto add = [&out](nn::Mlp& net, const nn::MlpGrads& gr) {
    const auto v = nn::param_views(net, gr);
    out.insert(out.end(), v.begin(), v.end());
  };
  add(p.rot_enc, g.rot_enc);
  add(p.trans_enc, g.trans_enc);
  add(p.linear_rot, g.linear_rot);
  add(p.linear_trans, g.linear_trans);
  return out;
}

std::vector<nn::ParamView> stage_b_views(Model& m, hypo::RefinerGrads& g,
                                         double& dbin) {
  std::vector<nn::ParamView> out;
  const auto add = [&out](nn::Mlp& net, const nn::MlpGrads& gr) {
    const auto v = nn::param_views(net, gr);
    out.insert(out.end(), v.begin(), v.end());
  };
  add(m.params.g, g.g);
  add(m.params.e_r, g.e_r);
  add(m.params.e_t, g.e_t);
  add(m.params.d_r, g.d_r);
  add(m.params.d_t, g.d_t);
  add(m.params.score_r, g.score_r);
  add(m.params.score_t, g.score_t);
  out.push_back(nn::ParamView{&m.bin, &dbin, 1});
  return out;
}

struct ValStats {
  double loss = 0;
  double rot_med = 0;
  double trans_med = 0;
};

ValStats aim_validate(const hypo::NopeSacParams& p, const TrainConfig& c) {
  ValStats out;
  std::vector<double> rot, trans;
  for (int i = 0; i < c.val_poses; ++i) {
    Rng r = Rng(c.seed).split(kValPoseStream).split(i);
    const geom::Pose pose = synth::sample_pose(r, c.pose_range);
    const geom::Pose rec = hypo::decode_pose(p, hypo::aim_encode(p, pose));
    rot.push_back(geom::rotation_geodesic_deg(pose.rotation, rec.rotation));
    trans.push_back((pose.translation - rec.translation).norm());
    out.loss += hypo::aim_loss(p, pose) / c.val_poses;
  }
  out.rot_med = median(std::move(rot));
  out.trans_med = median(std::move(trans));
  return out;
}

ValStats refine_validate(const Model& m, const synth::Dataset& ds,
                         const TrainConfig& c) {
  ValStats out;
  const int n = static_cast<int>(ds.scenes.size());
  const int count = std::min(std::max(c.val_scenes, 1), n);
  const int start = n - count;
  std::vector<double> rot, trans;
  for (int k = 0; k < count; ++k) {
    const synth::ScenePair& scene = ds.scenes[start + k];
    Rng r = Rng(c.seed).split(kValSceneStream).split(k);
    const geom::Pose init = perturb_init(scene.pose, r, c);
    const SceneCorrs sc = scene_corrs(m, scene, init, c, false);

    hypo::RefineItem item;
    item.init = init;
    item.gt = scene.pose;
    item.corrs = sc.pred;
    out.loss += hypo::refinement_loss(m.params, item) / (2 * count);
    item.corrs = sc.gt;
    out.loss += hypo::refinement_loss(m.params, item) / (2 * count);

    hypo::HypothesisSet set = hypo::generate_hypotheses(
        m.params, init, hypo::aim_encode(m.params, init), sc.pred);
    std::tie(set.c_r, set.c_t) = hypo::build_cost_matrices(set, sc.pred);
    std::tie(set.w_r, set.w_t) =
        hypo::score_hypotheses(m.params, set.c_r, set.c_t);
    const geom::Pose fused = hypo::fuse(m.params, set, hypo::Fusion::kSoft);
    rot.push_back(
        geom::rotation_geodesic_deg(fused.rotation, scene.pose.rotation));
    trans.push_back((fused.translation - scene.pose.translation).norm());
  }
  out.rot_med = median(std::move(rot));
  out.trans_med = median(std::move(trans));
  return out;
}

void write_train_checkpoint(const std::string& path, const Model& m,
                            const nn::AdamWState& sa,
                            const nn::AdamWState& sb, int aim_done,
                            int refine_done, std::uint64_t seed) {
  nn::Checkpoint ck;
  ck.spec_hash = hypo::nopesac_spec_hash();
  append_model(ck, m);
  nn::append_adamw(ck, "opt_a", sa);
  nn::append_adamw(ck, "opt_b", sb);
  nn::Tensor prog;
  prog.shape = {4};
  prog.data = {static_cast<double>(aim_done), static_cast<double>(refine_done),
               static_cast<double>(seed & 0xFFFFFFFFull),
               static_cast<double>(seed >> 32)};
  ck.put("progress", std::move(prog));
  nn::save_checkpoint(ck, path);
}

}  // namespace

Model make_model(Rng rng) {
  Model m;
  m.params = hypo::make_nopesac_params(rng);
  return m;
}

void append_model(nn::Checkpoint& ck, const Model& m) {
  hypo::append_nopesac(ck, m.params);
  nn::Tensor b;
  b.shape = {1};
  b.data = {m.bin};
  ck.put("matcher.bin", std::move(b));
}

Model read_model(const nn::Checkpoint& ck) {
  Model m;
  m.params = hypo::read_nopesac(ck);
  m.bin = ck.scalar("matcher.bin");
  return m;
}

void TrainConfig::validate() const {
  if (aim_steps < 0 || refine_steps < 0)
    throw InvalidArgument("step counts must be nonnegative");
  if (aim_batch <= 0) throw InvalidArgument("aim_batch must be positive");
  if (refine_batch <= 0 || refine_batch % 2 != 0)
    throw InvalidArgument("refine_batch must be positive and even");
  if (aim_lr <= 0 || refine_lr <= 0)
    throw InvalidArgument("learning rates must be positive");
  if (pose_range <= 0) throw InvalidArgument("pose_range must be positive");
  if (lr_decay <= 0 || lr_decay > 1)
    throw InvalidArgument("lr_decay must be in (0, 1]");
  if (decay_at < 0 || decay_at > 1)
    throw InvalidArgument("decay_at must be in [0, 1]");
  if (init_rot_sigma_deg < 0 || init_trans_sigma < 0)
    throw InvalidArgument("init perturbation sigmas must be nonnegative");
  if (match_threshold < 0 || match_threshold >= 1)
    throw InvalidArgument("match_threshold must be in [0, 1)");
  if (sinkhorn_iters <= 0)
    throw InvalidArgument("sinkhorn_iters must be positive");
  if (val_every < 0) throw InvalidArgument("val_every must be nonnegative");
  if (val_poses <= 0 || val_scenes <= 0)
    throw InvalidArgument("validation sample counts must be positive");
}

std::vector<geom::Pose> aim_batch(const TrainConfig& c, int step) {
  Rng r = Rng(c.seed).split(kAimStream).split(step);
  std::vector<geom::Pose> out;
  out.reserve(c.aim_batch);
  for (int i = 0; i < c.aim_batch; ++i)
    out.push_back(synth::sample_pose(r, c.pose_range));
  return out;
}

RefineStep refine_batch(const Model& m, const synth::Dataset& ds,
                        const TrainConfig& c, int step) {
  if (ds.scenes.empty()) throw EmptyInput("training dataset is empty");
  const int n = static_cast<int>(ds.scenes.size());
  const int train_count = n > c.val_scenes ? n - c.val_scenes : n;
  const int nscenes = c.refine_batch / 2;

  RefineStep out;
  Rng r = Rng(c.seed).split(kRefineStream).split(step);
  for (int s = 0; s < nscenes; ++s) {
    const synth::ScenePair& scene = ds.scenes[r.uniform_int(train_count)];
    const geom::Pose init = perturb_init(scene.pose, r, c);
    const SceneCorrs sc = scene_corrs(m, scene, init, c, true);
    out.match_loss += sc.match_loss / nscenes;
    out.match_dbin += sc.match_dbin / nscenes;

    hypo::RefineItem item;
    item.init = init;
    item.gt = scene.pose;
    item.corrs = sc.pred;
    out.items.push_back(item);
    item.corrs = sc.gt;
    out.items.push_back(std::move(item));
  }
  return out;
}

Model train(const synth::Dataset& ds, const TrainConfig& c) {
  c.validate();
  if (c.refine_steps > 0 && ds.scenes.empty())
    throw EmptyInput("training dataset is empty");
  TrainLog log(c.log_path);

  Model m = make_model(Rng(c.seed).split(0));
  int aim_done = 0;
  int refine_done = 0;
  std::optional<nn::Checkpoint> resume;
  if (!c.resume_path.empty()) {
    resume = nn::load_checkpoint(c.resume_path);
    m = read_model(*resume);
    const nn::Tensor& prog = resume->at("progress");
    if (prog.data.size() != 4)
      throw CheckpointError("malformed training progress record");
    aim_done = static_cast<int>(prog.data[0]);
    refine_done = static_cast<int>(prog.data[1]);
    const std::uint64_t seed =
        static_cast<std::uint64_t>(prog.data[2]) +
        (static_cast<std::uint64_t>(prog.data[3]) << 32);
    if (seed != c.seed)
      throw CheckpointError("resume checkpoint was trained with seed " +
                            std::to_string(seed));
  }

  hypo::AimGrads ag = hypo::AimGrads::zeros_like(m.params);
  hypo::RefinerGrads rg = hypo::RefinerGrads::zeros_like(m.params);
  double dbin = 0;
  const auto va = stage_a_views(m.params, ag);
  const auto vb = stage_b_views(m, rg, dbin);
  nn::AdamWState sa, sb;
  if (resume) {
    sa = nn::read_adamw(*resume, "opt_a", va);
    sb = nn::read_adamw(*resume, "opt_b", vb);
    resume.reset();
  } else {
    sa.init(va);
    sb.init(vb);
  }

  // Stage A: pose auto-encoder. The learning rate steps down twice, at 40%
  // and 75% of the stage, which is what pulls the reconstruction floor
  // below a degree.
  const int aim_cut1 = static_cast<int>(std::llround(0.40 * c.aim_steps));
  const int aim_cut2 = static_cast<int>(std::llround(0.75 * c.aim_steps));
  const auto aim_lr_at = [&](int step) {
    return c.aim_lr * (step >= aim_cut2 ? 0.01 : step >= aim_cut1 ? 0.1 : 1.0);
  };
  const int aim_start = aim_done;
  for (int step = aim_start; step < c.aim_steps; ++step) {
    nn::AdamWConfig ac;
    ac.lr = aim_lr_at(step);
    std::optional<ValStats> v;
    if (c.val_every > 0 && step % c.val_every == 0)
      v = aim_validate(m.params, c);
    ag.set_zero();
    const double loss = hypo::aim_loss_grad(m.params, aim_batch(c, step), ag);
    nn::adamw_step(sa, ac, va);
    log.row("aim", step, ac.lr, loss, loss, std::nullopt,
            v ? std::optional(v->loss) : std::nullopt,
            v ? std::optional(v->rot_med) : std::nullopt,
            v ? std::optional(v->trans_med) : std::nullopt);
  }
  if (c.aim_steps > aim_start) {
    const ValStats v = aim_validate(m.params, c);
    log.row("aim", c.aim_steps, aim_lr_at(c.aim_steps - 1), std::nullopt,
            std::nullopt, std::nullopt, v.loss, v.rot_med, v.trans_med);
  }
  aim_done = std::max(aim_done, c.aim_steps);

  // Stage B: hypothesis, scoring and matching nets; AIM stays frozen.
  const int decay_step =
      static_cast<int>(std::llround(c.decay_at * c.refine_steps));
  const int refine_start = refine_done;
  for (int step = refine_start; step < c.refine_steps; ++step) {
    nn::AdamWConfig bc;
    bc.lr = c.refine_lr * (step >= decay_step ? c.lr_decay : 1.0);
    std::optional<ValStats> v;
    if (c.val_every > 0 && step % c.val_every == 0)
      v = refine_validate(m, ds, c);
    const RefineStep rs = refine_batch(m, ds, c, step);
    rg.set_zero();
    const double rloss = hypo::refinement_loss_grad(m.params, rs.items, rg);
    dbin = rs.match_dbin;
    nn::adamw_step(sb, bc, vb);
    log.row("refine", step, bc.lr, rloss + rs.match_loss, rloss,
            rs.match_loss, v ? std::optional(v->loss) : std::nullopt,
            v ? std::optional(v->rot_med) : std::nullopt,
            v ? std::optional(v->trans_med) : std::nullopt);
  }
  if (c.refine_steps > refine_start) {
    const ValStats v = refine_validate(m, ds, c);
    log.row("refine", c.refine_steps,
            c.refine_lr * (c.refine_steps >= decay_step ? c.lr_decay : 1.0),
            std::nullopt, std::nullopt, std::nullopt, v.loss, v.rot_med,
            v.trans_med);
  }
  refine_done = std::max(refine_done, c.refine_steps);

  if (!c.checkpoint_path.empty())
    write_train_checkpoint(c.checkpoint_path, m, sa, sb, aim_done,
                           refine_done, c.seed);
  return m;
}

}  // namespace planepose::train
