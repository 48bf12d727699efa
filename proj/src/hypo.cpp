#include "planepose/hypo.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "planepose/errors.hpp"

namespace planepose::hypo {

namespace {

using nn::Activation;
using SpecList = std::vector<std::pair<std::string, nn::MlpSpec>>;

nn::MlpSpec stack(std::vector<nn::MlpSpec::Layer> layers) {
  nn::MlpSpec s;
  s.layers = std::move(layers);
  s.validate();
  return s;
}

nn::MlpSpec encoder_spec(int in) {
  std::vector<nn::MlpSpec::Layer> l;
  l.push_back({in, kEmbedDim, Activation::kRelu});
  for (int i = 0; i < 5; ++i) {
    l.push_back({kEmbedDim, kEmbedDim, Activation::kRelu});
  }
  return stack(std::move(l));
}

// Architecture listing in checkpoint order.
const SpecList& all_specs() {
  static const SpecList specs = [] {
    SpecList s;
    s.emplace_back("rot_enc", encoder_spec(4));
    s.emplace_back("trans_enc", encoder_spec(3));
    s.emplace_back("linear_rot",
                   stack({{kEmbedDim, 4, Activation::kNone}}));
    s.emplace_back("linear_trans",
                   stack({{kEmbedDim, 3, Activation::kNone}}));
    s.emplace_back("g", stack({{8, 1024, Activation::kRelu},
                               {1024, 1024, Activation::kRelu},
                               {1024, 1024, Activation::kRelu},
                               {1024, 1024, Activation::kRelu},
                               {1024, 1024, Activation::kRelu},
                               {1024, 1024, Activation::kNone},
                               {1024, 1024, Activation::kRelu},
                               {1024, 1024, Activation::kRelu},
                               {1024, 1024, Activation::kNone}}));
    s.emplace_back("e_r", stack({{1024, 512, Activation::kRelu},
                                 {512, 512, Activation::kRelu},
                                 {512, 512, Activation::kRelu},
                                 {512, 512, Activation::kRelu},
                                 {512, 512, Activation::kRelu},
                                 {512, kEmbedDim, Activation::kNone}}));
    s.emplace_back("e_t", stack({{1280, 1024, Activation::kRelu},
                                 {1024, 1024, Activation::kRelu},
                                 {1024, 1024, Activation::kNone},
                                 {1024, 512, Activation::kRelu},
                                 {512, 512, Activation::kRelu},
                                 {512, 512, Activation::kRelu},
                                 {512, 512, Activation::kRelu},
                                 {512, 512, Activation::kRelu},
                                 {512, kEmbedDim, Activation::kNone}}));
    const nn::MlpSpec d = stack({{2 * kEmbedDim, 512, Activation::kRelu},
                                 {512, 512, Activation::kRelu},
                                 {512, kEmbedDim, Activation::kRelu}});
    s.emplace_back("d_r", d);
    s.emplace_back("d_t", d);
    const nn::MlpSpec score = stack({{kScoreSlots, 64, Activation::kRelu},
                                     {64, 64, Activation::kRelu},
                                     {64, 64, Activation::kRelu},
                                     {64, 1, Activation::kNone}});
    s.emplace_back("score_r", score);
    s.emplace_back("score_t", score);
    return s;
  }();
  return specs;
}

Vector forward_vec(const nn::Mlp& mlp, const Vector& x) {
  return nn::mlp_forward(mlp, x).col(0);
}

// Cost row sorted ascending into the leading slots, zero-padded after.
// perm[s] gives the source column of slot s.
Vector score_input(const Vector& row, std::vector<int>* perm) {
  const int m = static_cast<int>(row.size());
  std::vector<int> idx(m);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return row[a] < row[b]; });
  Vector in = Vector::Zero(kScoreSlots);
  for (int s = 0; s < m; ++s) in[s] = row[idx[s]];
  if (perm) *perm = std::move(idx);
  return in;
}

int argmin_index(const Vector& v) {
  int best = 0;
  for (int i = 1; i < v.size(); ++i) {
    if (v[i] < v[best]) best = i;
  }
  return best;
}

int argmax_index(const Vector& v) {
  int best = 0;
  for (int i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

void require_scores(const HypothesisSet& set) {
  const int total = set.count() + 1;
  if (set.w_r.size() != total || set.w_t.size() != total) {
    throw MissingScores("hypothesis scores were not attached");
  }
}

void require_costs(const HypothesisSet& set) {
  const int m = set.count();
  if (set.c_r.rows() != m + 1 || set.c_r.cols() != m ||
      set.c_t.rows() != m + 1 || set.c_t.cols() != m) {
    throw MissingCosts("hypothesis cost matrices were not attached");
  }
}

// Raw head outputs on a fused embedding, squared-error against gt with the
// target quaternion flipped into the prediction's half-space.
double fused_mse(const NopeSacParams& p, const HypothesisSet& set,
                 const Vector& w_r, const Vector& w_t, const geom::Pose& gt) {
  Vector f_r = Vector::Zero(kEmbedDim);
  Vector f_t = Vector::Zero(kEmbedDim);
  for (int k = 0; k <= set.count(); ++k) {
    f_r += w_r[k] * emb_at(set, k).f_r;
    f_t += w_t[k] * emb_at(set, k).f_t;
  }
  const Vector q = forward_vec(p.linear_rot, f_r);
  const Vector t = forward_vec(p.linear_trans, f_t);
  const geom::Vec4 q_gt = gt.rotation.coeffs();
  const double sign = q.dot(q_gt) < 0 ? -1.0 : 1.0;
  return (q - sign * q_gt).squaredNorm() +
         (t - gt.translation).squaredNorm();
}

}  // namespace

NopeSacParams make_nopesac_params(Rng rng) {
  NopeSacParams p;
  auto nets = named_mlps(p);
  const auto& specs = all_specs();
  for (size_t i = 0; i < nets.size(); ++i) {
    *nets[i].second = nn::make_mlp(specs[i].second, rng.split(i));
  }
  return p;
}

std::vector<std::pair<std::string, nn::Mlp*>> named_mlps(NopeSacParams& p) {
  return {{"rot_enc", &p.rot_enc},       {"trans_enc", &p.trans_enc},
          {"linear_rot", &p.linear_rot}, {"linear_trans", &p.linear_trans},
          {"g", &p.g},                   {"e_r", &p.e_r},
          {"e_t", &p.e_t},               {"d_r", &p.d_r},
          {"d_t", &p.d_t},               {"score_r", &p.score_r},
          {"score_t", &p.score_t}};
}

std::vector<std::pair<std::string, const nn::Mlp*>> named_mlps(
    const NopeSacParams& p) {
  std::vector<std::pair<std::string, const nn::Mlp*>> out;
  for (auto& [name, mlp] : named_mlps(const_cast<NopeSacParams&>(p))) {
    out.emplace_back(name, mlp);
  }
  return out;
}

uint64_t nopesac_spec_hash() {
  std::string acc;
  for (const auto& [name, spec] : all_specs()) {
    acc += name;
    acc += '=';
    acc += spec.signature();
    acc += ';';
  }
  return nn::fnv1a(acc);
}

void append_nopesac(nn::Checkpoint& ck, const NopeSacParams& p) {
  for (const auto& [name, mlp] : named_mlps(p)) {
    nn::append_mlp(ck, name, *mlp);
  }
}

NopeSacParams read_nopesac(const nn::Checkpoint& ck) {
  NopeSacParams p;
  auto nets = named_mlps(p);
  const auto& specs = all_specs();
  for (size_t i = 0; i < nets.size(); ++i) {
    *nets[i].second = nn::read_mlp(ck, specs[i].first, specs[i].second);
  }
  return p;
}

const PoseEmbedding& emb_at(const HypothesisSet& set, int k) {
  if (k < 0 || k > set.count()) {
    throw IndexOutOfRange("hypothesis index out of range");
  }
  return k == 0 ? set.init_emb : set.embs[k - 1];
}

PoseEmbedding aim_encode(const NopeSacParams& p, const geom::Pose& pose) {
  PoseEmbedding e;
  e.f_r = forward_vec(p.rot_enc, pose.rotation.coeffs());
  e.f_t = forward_vec(p.trans_enc, pose.translation);
  return e;
}

geom::Pose decode_pose(const NopeSacParams& p, const PoseEmbedding& e) {
  if (!e.f_r.allFinite() || !e.f_t.allFinite()) {
    throw NonFiniteInput("pose embedding is not finite");
  }
  const Vector q = forward_vec(p.linear_rot, e.f_r);
  const Vector t = forward_vec(p.linear_trans, e.f_t);
  geom::Pose out;
  out.rotation = geom::UnitQuaternion(q[0], q[1], q[2], q[3]);
  out.translation = t;
  return out;
}

double aim_loss(const NopeSacParams& p, const geom::Pose& pose) {
  const PoseEmbedding e = aim_encode(p, pose);
  const Vector q = forward_vec(p.linear_rot, e.f_r);
  const Vector t = forward_vec(p.linear_trans, e.f_t);
  const geom::Vec4 q_gt = pose.rotation.coeffs();
  const double sign = q.dot(q_gt) < 0 ? -1.0 : 1.0;
  return (q - sign * q_gt).squaredNorm() +
         (t - pose.translation).squaredNorm();
}

AimGrads AimGrads::zeros_like(const NopeSacParams& p) {
  AimGrads g;
  g.rot_enc = nn::MlpGrads::zeros_like(p.rot_enc);
  g.trans_enc = nn::MlpGrads::zeros_like(p.trans_enc);
  g.linear_rot = nn::MlpGrads::zeros_like(p.linear_rot);
  g.linear_trans = nn::MlpGrads::zeros_like(p.linear_trans);
  return g;
}

void AimGrads::set_zero() {
  rot_enc.set_zero();
  trans_enc.set_zero();
  linear_rot.set_zero();
  linear_trans.set_zero();
}

double aim_loss_grad(const NopeSacParams& p,
                     const std::vector<geom::Pose>& batch, AimGrads& grads) {
  const int b = static_cast<int>(batch.size());
  if (b == 0) throw EmptyInput("empty pose batch");
  Matrix q_in(4, b), t_in(3, b);
  for (int i = 0; i < b; ++i) {
    q_in.col(i) = batch[i].rotation.coeffs();
    t_in.col(i) = batch[i].translation;
  }
  nn::MlpCache c_r, c_t, c_hr, c_ht;
  const Matrix f_r = nn::mlp_forward(p.rot_enc, q_in, &c_r);
  const Matrix f_t = nn::mlp_forward(p.trans_enc, t_in, &c_t);
  const Matrix q_out = nn::mlp_forward(p.linear_rot, f_r, &c_hr);
  const Matrix t_out = nn::mlp_forward(p.linear_trans, f_t, &c_ht);

  Matrix q_tgt = q_in;
  for (int i = 0; i < b; ++i) {
    if (q_out.col(i).dot(q_in.col(i)) < 0) q_tgt.col(i) = -q_in.col(i);
  }
  const double inv_b = 1.0 / b;
  const double loss =
      ((q_out - q_tgt).squaredNorm() + (t_out - t_in).squaredNorm()) * inv_b;

  const Matrix dq = 2.0 * inv_b * (q_out - q_tgt);
  const Matrix dt = 2.0 * inv_b * (t_out - t_in);
  const Matrix df_r = nn::mlp_backward(p.linear_rot, c_hr, dq, &grads.linear_rot);
  const Matrix df_t =
      nn::mlp_backward(p.linear_trans, c_ht, dt, &grads.linear_trans);
  nn::mlp_backward(p.rot_enc, c_r, df_r, &grads.rot_enc);
  nn::mlp_backward(p.trans_enc, c_t, df_t, &grads.trans_enc);
  return loss;
}

Vector correspondence_embed(const NopeSacParams& p, const geom::Plane& p1,
                            const geom::Plane& p2, const geom::Pose& init,
                            bool warp) {
  const geom::Plane w1 = warp ? geom::warp_plane(p1, init) : p1;
  Vector x(8);
  x << w1.normal, w1.offset, p2.normal, p2.offset;
  if (!x.allFinite()) throw NonFiniteInput("plane correspondence not finite");
  return forward_vec(p.g, x);
}

std::pair<Vector, Vector> pose_features(const NopeSacParams& p,
                                        const Vector& g) {
  const Vector e_r = forward_vec(p.e_r, g);
  Vector joint(g.size() + e_r.size());
  joint << g, e_r;
  Vector e_t = forward_vec(p.e_t, joint);
  return {e_r, std::move(e_t)};
}

PoseEmbedding one_plane_embedding(const NopeSacParams& p,
                                  const PoseEmbedding& init_emb,
                                  const Vector& e_r, const Vector& e_t) {
  Vector in_r(init_emb.f_r.size() + e_r.size());
  in_r << init_emb.f_r, e_r;
  Vector in_t(init_emb.f_t.size() + e_t.size());
  in_t << init_emb.f_t, e_t;
  PoseEmbedding out;
  out.f_r = forward_vec(p.d_r, in_r);
  out.f_t = forward_vec(p.d_t, in_t);
  return out;
}

HypothesisSet generate_hypotheses(const NopeSacParams& p,
                                  const geom::Pose& init,
                                  const PoseEmbedding& init_emb,
                                  const std::vector<PlanePair>& corrs,
                                  bool warp) {
  if (corrs.empty()) {
    throw EmptyCorrespondences("no plane correspondences to hypothesize from");
  }
  HypothesisSet set;
  set.init_pose = init;
  set.init_emb = init_emb;
  set.poses.reserve(corrs.size());
  set.embs.reserve(corrs.size());
  for (const auto& [a, b] : corrs) {
    const Vector g = correspondence_embed(p, a, b, init, warp);
    auto [e_r, e_t] = pose_features(p, g);
    PoseEmbedding emb = one_plane_embedding(p, init_emb, e_r, e_t);
    set.poses.push_back(decode_pose(p, emb));
    set.embs.push_back(std::move(emb));
  }
  return set;
}

std::pair<Matrix, Matrix> build_cost_matrices(
    const HypothesisSet& set, const std::vector<PlanePair>& corrs) {
  const int m = set.count();
  if (m == 0) throw EmptyCorrespondences("hypothesis set is empty");
  if (static_cast<int>(corrs.size()) != m) {
    throw ShapeMismatch("correspondence count differs from hypothesis count");
  }
  Matrix c_r(m + 1, m), c_t(m + 1, m);
  for (int k = 0; k <= m; ++k) {
    const geom::Pose& pose = k == 0 ? set.init_pose : set.poses[k - 1];
    for (int i = 0; i < m; ++i) {
      const auto c =
          geom::one_plane_costs(corrs[i].first, corrs[i].second, pose);
      c_r(k, i) = c.rot;
      c_t(k, i) = c.trans;
    }
  }
  return {std::move(c_r), std::move(c_t)};
}

std::pair<Vector, Vector> score_hypotheses(const NopeSacParams& p,
                                           const Matrix& c_r,
                                           const Matrix& c_t) {
  const int m = static_cast<int>(c_r.cols());
  if (m < 1) throw EmptyCorrespondences("cost matrices have no columns");
  if (m > kScoreSlots) {
    throw InvalidArgument("more correspondences than scoring slots");
  }
  if (c_r.rows() != m + 1 || c_t.rows() != c_r.rows() || c_t.cols() != m) {
    throw ShapeMismatch("cost matrices must both be (M+1) x M");
  }
  if (!c_r.allFinite() || !c_t.allFinite()) {
    throw NonFiniteInput("cost matrices contain non-finite entries");
  }
  Matrix in_r(kScoreSlots, m + 1), in_t(kScoreSlots, m + 1);
  for (int k = 0; k <= m; ++k) {
    in_r.col(k) = score_input(c_r.row(k).transpose(), nullptr);
    in_t.col(k) = score_input(c_t.row(k).transpose(), nullptr);
  }
  const Vector logit_r = nn::mlp_forward(p.score_r, in_r).row(0).transpose();
  const Vector logit_t = nn::mlp_forward(p.score_t, in_t).row(0).transpose();
  return {nn::softmax(logit_r), nn::softmax(logit_t)};
}

Fusion parse_fusion(const std::string& name) {
  if (name == "soft") return Fusion::kSoft;
  if (name == "avg") return Fusion::kAvg;
  if (name == "min-cost") return Fusion::kMinCost;
  if (name == "max-score") return Fusion::kMaxScore;
  throw InvalidArgument("unknown fusion strategy: " + name);
}

std::string fusion_name(Fusion f) {
  switch (f) {
    case Fusion::kSoft: return "soft";
    case Fusion::kAvg: return "avg";
    case Fusion::kMinCost: return "min-cost";
    case Fusion::kMaxScore: return "max-score";
  }
  throw InvalidArgument("unknown fusion strategy");
}

geom::Pose fuse(const NopeSacParams& p, const HypothesisSet& set, Fusion f) {
  const int m = set.count();
  if (m == 0) throw EmptyCorrespondences("hypothesis set is empty");
  if (static_cast<int>(set.embs.size()) != m) {
    throw ShapeMismatch("hypothesis embeddings missing");
  }
  const int total = m + 1;

  const auto weighted = [&](const Vector& w_r, const Vector& w_t) {
    PoseEmbedding fused;
    for (int k = 0; k < total; ++k) {
      fused.f_r += w_r[k] * emb_at(set, k).f_r;
      fused.f_t += w_t[k] * emb_at(set, k).f_t;
    }
    return decode_pose(p, fused);
  };

  switch (f) {
    case Fusion::kSoft:
      require_scores(set);
      return weighted(set.w_r, set.w_t);
    case Fusion::kAvg: {
      const Vector uniform = Vector::Constant(total, 1.0 / total);
      return weighted(uniform, uniform);
    }
    case Fusion::kMinCost: {
      require_costs(set);
      const int k_r = argmin_index(set.c_r.rowwise().sum());
      const int k_t = argmin_index(set.c_t.rowwise().sum());
      PoseEmbedding pick;
      pick.f_r = emb_at(set, k_r).f_r;
      pick.f_t = emb_at(set, k_t).f_t;
      return decode_pose(p, pick);
    }
    case Fusion::kMaxScore: {
      require_scores(set);
      PoseEmbedding pick;
      pick.f_r = emb_at(set, argmax_index(set.w_r)).f_r;
      pick.f_t = emb_at(set, argmax_index(set.w_t)).f_t;
      return decode_pose(p, pick);
    }
  }
  throw InvalidArgument("unknown fusion strategy");
}

double scoring_loss(const HypothesisSet& set, const geom::Pose& gt) {
  const int m = set.count();
  if (m == 0) throw EmptyCorrespondences("hypothesis set is empty");
  require_scores(set);
  require_costs(set);
  int i_star = 0, j_star = 0;
  double best_r = std::numeric_limits<double>::infinity();
  double best_t = std::numeric_limits<double>::infinity();
  for (int k = 0; k <= m; ++k) {
    const geom::Pose& pose = k == 0 ? set.init_pose : set.poses[k - 1];
    const double d_r = geom::rotation_geodesic_deg(pose.rotation, gt.rotation);
    const double d_t = (pose.translation - gt.translation).norm();
    if (d_r < best_r) {
      best_r = d_r;
      i_star = k;
    }
    if (d_t < best_t) {
      best_t = d_t;
      j_star = k;
    }
  }
  double self_cost = 0;
  for (int k = 0; k < m; ++k) self_cost += set.c_t(k + 1, k);
  return std::abs(1.0 - set.w_r[i_star]) + 2.0 * std::abs(1.0 - set.w_t[j_star]) +
         10.0 / m * self_cost;
}

double refinement_loss(const NopeSacParams& p, const RefineItem& item) {
  const PoseEmbedding init_emb = aim_encode(p, item.init);
  HypothesisSet set =
      generate_hypotheses(p, item.init, init_emb, item.corrs, item.warp);
  std::tie(set.c_r, set.c_t) = build_cost_matrices(set, item.corrs);
  std::tie(set.w_r, set.w_t) = score_hypotheses(p, set.c_r, set.c_t);
  const int total = set.count() + 1;
  const Vector uniform = Vector::Constant(total, 1.0 / total);
  const double l_soft = fused_mse(p, set, set.w_r, set.w_t, item.gt);
  const double l_avg = fused_mse(p, set, uniform, uniform, item.gt);
  return l_soft + l_avg + 0.01 * scoring_loss(set, item.gt);
}

RefinerGrads RefinerGrads::zeros_like(const NopeSacParams& p) {
  RefinerGrads out;
  out.g = nn::MlpGrads::zeros_like(p.g);
  out.e_r = nn::MlpGrads::zeros_like(p.e_r);
  out.e_t = nn::MlpGrads::zeros_like(p.e_t);
  out.d_r = nn::MlpGrads::zeros_like(p.d_r);
  out.d_t = nn::MlpGrads::zeros_like(p.d_t);
  out.score_r = nn::MlpGrads::zeros_like(p.score_r);
  out.score_t = nn::MlpGrads::zeros_like(p.score_t);
  return out;
}

void RefinerGrads::set_zero() {
  g.set_zero();
  e_r.set_zero();
  e_t.set_zero();
  d_r.set_zero();
  d_t.set_zero();
  score_r.set_zero();
  score_t.set_zero();
}

// Batched forward/backward over every correspondence of every item at once
// (correspondences live in matrix columns). The auto-encoder and the two
// linear heads are evaluated but treated as constants.
double refinement_loss_grad(const NopeSacParams& p,
                            const std::vector<RefineItem>& batch,
                            RefinerGrads& grads) {
  const int nb = static_cast<int>(batch.size());
  if (nb == 0) throw EmptyInput("empty refinement batch");
  std::vector<int> base(nb), rbase(nb), mcount(nb);
  int n = 0, rows_total = 0;
  for (int b = 0; b < nb; ++b) {
    const int m = static_cast<int>(batch[b].corrs.size());
    if (m == 0) throw EmptyCorrespondences("refinement item has no matches");
    if (m > kScoreSlots) {
      throw InvalidArgument("more correspondences than scoring slots");
    }
    base[b] = n;
    rbase[b] = rows_total;
    mcount[b] = m;
    n += m;
    rows_total += m + 1;
  }
  const double inv_b = 1.0 / nb;

  // Frozen initial-pose embeddings.
  Matrix q0(4, nb), t0(3, nb);
  for (int b = 0; b < nb; ++b) {
    q0.col(b) = batch[b].init.rotation.coeffs();
    t0.col(b) = batch[b].init.translation;
  }
  const Matrix f0_r = nn::mlp_forward(p.rot_enc, q0);
  const Matrix f0_t = nn::mlp_forward(p.trans_enc, t0);

  // Hypothesis chain over all correspondences.
  Matrix x(8, n);
  for (int b = 0; b < nb; ++b) {
    for (int i = 0; i < mcount[b]; ++i) {
      const auto& [p1, p2] = batch[b].corrs[i];
      const geom::Plane w1 =
          batch[b].warp ? geom::warp_plane(p1, batch[b].init) : p1;
      x.col(base[b] + i) << w1.normal, w1.offset, p2.normal, p2.offset;
    }
  }
  if (!x.allFinite()) throw NonFiniteInput("plane correspondence not finite");
  nn::MlpCache c_g, c_er, c_et, c_dr, c_dt, c_sr, c_st;
  const Matrix g_out = nn::mlp_forward(p.g, x, &c_g);
  const Matrix er_out = nn::mlp_forward(p.e_r, g_out, &c_er);
  Matrix et_in(g_out.rows() + er_out.rows(), n);
  et_in.topRows(g_out.rows()) = g_out;
  et_in.bottomRows(er_out.rows()) = er_out;
  const Matrix et_out = nn::mlp_forward(p.e_t, et_in, &c_et);
  Matrix dr_in(2 * kEmbedDim, n), dt_in(2 * kEmbedDim, n);
  for (int b = 0; b < nb; ++b) {
    for (int i = 0; i < mcount[b]; ++i) {
      const int j = base[b] + i;
      dr_in.col(j).head(kEmbedDim) = f0_r.col(b);
      dr_in.col(j).tail(kEmbedDim) = er_out.col(j);
      dt_in.col(j).head(kEmbedDim) = f0_t.col(b);
      dt_in.col(j).tail(kEmbedDim) = et_out.col(j);
    }
  }
  const Matrix fr = nn::mlp_forward(p.d_r, dr_in, &c_dr);
  const Matrix ft = nn::mlp_forward(p.d_t, dt_in, &c_dt);
  const Matrix q_raw = nn::mlp_forward(p.linear_rot, fr);
  const Matrix t_hyp = nn::mlp_forward(p.linear_trans, ft);
  Matrix q_unit(4, n);
  for (int j = 0; j < n; ++j) {
    const double norm = q_raw.col(j).norm();
    if (norm < 1e-8) {
      throw DegenerateQuaternion("decoded quaternion has near-zero norm");
    }
    q_unit.col(j) = q_raw.col(j) / norm;
  }

  struct ItemTrace {
    Matrix c_r, c_t, dc_r, dc_t;
    std::vector<std::vector<geom::OnePlaneCostsGrad>> cost_grads;
    std::vector<std::vector<int>> perm_r, perm_t;
    Vector w_r, w_t;
  };
  std::vector<ItemTrace> traces(nb);

  const Matrix& w_rot = p.linear_rot.layers[0].weight;
  const Matrix& w_trans = p.linear_trans.layers[0].weight;
  Matrix score_in_r(kScoreSlots, rows_total), score_in_t(kScoreSlots, rows_total);
  double loss = 0;

  for (int b = 0; b < nb; ++b) {
    const RefineItem& item = batch[b];
    const int m = mcount[b];
    ItemTrace& tr = traces[b];
    tr.c_r.resize(m + 1, m);
    tr.c_t.resize(m + 1, m);
    tr.cost_grads.assign(m, {});
    for (int i = 0; i < m; ++i) {
      const auto c0 = geom::one_plane_costs(item.corrs[i].first,
                                            item.corrs[i].second, item.init);
      tr.c_r(0, i) = c0.rot;
      tr.c_t(0, i) = c0.trans;
    }
    for (int k = 1; k <= m; ++k) {
      const int j = base[b] + k - 1;
      auto& row = tr.cost_grads[k - 1];
      row.reserve(m);
      for (int i = 0; i < m; ++i) {
        row.push_back(geom::one_plane_costs_grad(
            item.corrs[i].first, item.corrs[i].second, q_unit.col(j),
            t_hyp.col(j)));
        tr.c_r(k, i) = row.back().rot;
        tr.c_t(k, i) = row.back().trans;
      }
    }
    tr.perm_r.resize(m + 1);
    tr.perm_t.resize(m + 1);
    for (int k = 0; k <= m; ++k) {
      score_in_r.col(rbase[b] + k) =
          score_input(tr.c_r.row(k).transpose(), &tr.perm_r[k]);
      score_in_t.col(rbase[b] + k) =
          score_input(tr.c_t.row(k).transpose(), &tr.perm_t[k]);
    }
  }

  const Matrix logit_r = nn::mlp_forward(p.score_r, score_in_r, &c_sr);
  const Matrix logit_t = nn::mlp_forward(p.score_t, score_in_t, &c_st);

  Matrix d_fr = Matrix::Zero(kEmbedDim, n);
  Matrix d_ft = Matrix::Zero(kEmbedDim, n);
  Matrix d_logit_r = Matrix::Zero(1, rows_total);
  Matrix d_logit_t = Matrix::Zero(1, rows_total);

  for (int b = 0; b < nb; ++b) {
    const RefineItem& item = batch[b];
    const int m = mcount[b];
    const int total = m + 1;
    ItemTrace& tr = traces[b];
    tr.w_r = nn::softmax(logit_r.row(0).segment(rbase[b], total).transpose());
    tr.w_t = nn::softmax(logit_t.row(0).segment(rbase[b], total).transpose());
    const Vector uniform = Vector::Constant(total, 1.0 / total);

    const auto fold = [&](const Vector& w, const Matrix& f0,
                          const Matrix& hyp) {
      Vector acc = w[0] * f0.col(b);
      for (int k = 1; k < total; ++k) acc += w[k] * hyp.col(base[b] + k - 1);
      return acc;
    };
    const Vector fr_soft = fold(tr.w_r, f0_r, fr);
    const Vector ft_soft = fold(tr.w_t, f0_t, ft);
    const Vector fr_avg = fold(uniform, f0_r, fr);
    const Vector ft_avg = fold(uniform, f0_t, ft);

    const geom::Vec4 q_gt = item.gt.rotation.coeffs();
    const geom::Vec3& t_gt = item.gt.translation;
    const Vector q_soft = forward_vec(p.linear_rot, fr_soft);
    const Vector t_soft = forward_vec(p.linear_trans, ft_soft);
    const Vector q_avg = forward_vec(p.linear_rot, fr_avg);
    const Vector t_avg = forward_vec(p.linear_trans, ft_avg);
    const double s_soft = q_soft.dot(q_gt) < 0 ? -1.0 : 1.0;
    const double s_avg = q_avg.dot(q_gt) < 0 ? -1.0 : 1.0;
    const double l_soft = (q_soft - s_soft * q_gt).squaredNorm() +
                          (t_soft - t_gt).squaredNorm();
    const double l_avg =
        (q_avg - s_avg * q_gt).squaredNorm() + (t_avg - t_gt).squaredNorm();

    // Closest hypotheses to gt, initial pose included.
    int i_star = 0, j_star = 0;
    double best_r = geom::rotation_geodesic_deg(item.init.rotation,
                                                item.gt.rotation);
    double best_t = (item.init.translation - t_gt).norm();
    for (int k = 1; k <= m; ++k) {
      const int j = base[b] + k - 1;
      const auto quat = geom::UnitQuaternion::from_normalized(
          q_unit(0, j), q_unit(1, j), q_unit(2, j), q_unit(3, j));
      const double d_r = geom::rotation_geodesic_deg(quat, item.gt.rotation);
      const double d_t = (t_hyp.col(j) - t_gt).norm();
      if (d_r < best_r) {
        best_r = d_r;
        i_star = k;
      }
      if (d_t < best_t) {
        best_t = d_t;
        j_star = k;
      }
    }
    double self_cost = 0;
    for (int k = 0; k < m; ++k) self_cost += tr.c_t(k + 1, k);
    const double l_score = std::abs(1.0 - tr.w_r[i_star]) +
                           2.0 * std::abs(1.0 - tr.w_t[j_star]) +
                           10.0 / m * self_cost;
    loss += (l_soft + l_avg + 0.01 * l_score) * inv_b;

    // Fusion backward: d(loss)/d(fused embedding) through the frozen heads,
    // then into hypothesis embeddings and scores.
    const Vector dq_soft = 2.0 * inv_b * (q_soft - s_soft * q_gt);
    const Vector dt_soft = 2.0 * inv_b * (t_soft - t_gt);
    const Vector dq_avg = 2.0 * inv_b * (q_avg - s_avg * q_gt);
    const Vector dt_avg = 2.0 * inv_b * (t_avg - t_gt);
    const Vector dfr_soft = w_rot.transpose() * dq_soft;
    const Vector dft_soft = w_trans.transpose() * dt_soft;
    const Vector dfr_avg = w_rot.transpose() * dq_avg;
    const Vector dft_avg = w_trans.transpose() * dt_avg;

    Vector dw_r = Vector::Zero(total), dw_t = Vector::Zero(total);
    dw_r[0] = dfr_soft.dot(f0_r.col(b));
    dw_t[0] = dft_soft.dot(f0_t.col(b));
    for (int k = 1; k < total; ++k) {
      const int j = base[b] + k - 1;
      dw_r[k] = dfr_soft.dot(fr.col(j));
      dw_t[k] = dft_soft.dot(ft.col(j));
      d_fr.col(j) += tr.w_r[k] * dfr_soft + uniform[k] * dfr_avg;
      d_ft.col(j) += tr.w_t[k] * dft_soft + uniform[k] * dft_avg;
    }
    dw_r[i_star] -= 0.01 * inv_b;
    dw_t[j_star] -= 0.02 * inv_b;
    d_logit_r.row(0).segment(rbase[b], total) =
        nn::softmax_backward(tr.w_r, dw_r).transpose();
    d_logit_t.row(0).segment(rbase[b], total) =
        nn::softmax_backward(tr.w_t, dw_t).transpose();

    tr.dc_r = Matrix::Zero(total, m);
    tr.dc_t = Matrix::Zero(total, m);
    for (int k = 0; k < m; ++k) tr.dc_t(k + 1, k) += 0.01 * (10.0 / m) * inv_b;
  }

  // Scoring nets backward, then scatter the sorted-slot gradients back to
  // their source cost cells (padding slots are constants).
  const Matrix d_score_in_r =
      nn::mlp_backward(p.score_r, c_sr, d_logit_r, &grads.score_r);
  const Matrix d_score_in_t =
      nn::mlp_backward(p.score_t, c_st, d_logit_t, &grads.score_t);
  for (int b = 0; b < nb; ++b) {
    ItemTrace& tr = traces[b];
    const int m = mcount[b];
    for (int k = 0; k <= m; ++k) {
      for (int s = 0; s < m; ++s) {
        tr.dc_r(k, tr.perm_r[k][s]) += d_score_in_r(s, rbase[b] + k);
        tr.dc_t(k, tr.perm_t[k][s]) += d_score_in_t(s, rbase[b] + k);
      }
    }
    // Cost cells into the hypothesis poses (row 0 is the fixed initial pose).
    for (int k = 1; k <= m; ++k) {
      const int j = base[b] + k - 1;
      geom::Vec4 dq_u = geom::Vec4::Zero();
      geom::Vec3 dt_sum = geom::Vec3::Zero();
      for (int i = 0; i < m; ++i) {
        const auto& cg = tr.cost_grads[k - 1][i];
        dq_u += tr.dc_r(k, i) * cg.rot_dq + tr.dc_t(k, i) * cg.trans_dq;
        dt_sum += tr.dc_t(k, i) * cg.trans_dt;
      }
      const geom::Vec4 dq_raw =
          geom::normalize_jacobian(q_raw.col(j)).transpose() * dq_u;
      d_fr.col(j) += w_rot.transpose() * dq_raw;
      d_ft.col(j) += w_trans.transpose() * dt_sum;
    }
  }

  // Hypothesis-embedding chain backward; the initial-pose halves of the
  // decoder inputs belong to the frozen auto-encoder and are dropped.
  const Matrix d_dr_in = nn::mlp_backward(p.d_r, c_dr, d_fr, &grads.d_r);
  const Matrix d_dt_in = nn::mlp_backward(p.d_t, c_dt, d_ft, &grads.d_t);
  const Matrix d_et_out = d_dt_in.bottomRows(kEmbedDim);
  const Matrix d_et_in = nn::mlp_backward(p.e_t, c_et, d_et_out, &grads.e_t);
  Matrix d_er = d_dr_in.bottomRows(kEmbedDim);
  d_er += d_et_in.bottomRows(kEmbedDim);
  Matrix d_g = d_et_in.topRows(g_out.rows());
  d_g += nn::mlp_backward(p.e_r, c_er, d_er, &grads.e_r);
  nn::mlp_backward(p.g, c_g, d_g, &grads.g);
  return loss;
}

}  // namespace planepose::hypo
