#include "planepose/hypo.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <vector>

#include "doctest.h"
#include "planepose/rng.hpp"

using namespace planepose;
using hypo::HypothesisSet;
using hypo::Matrix;
using hypo::NopeSacParams;
using hypo::PlanePair;
using hypo::PoseEmbedding;
using hypo::Vector;

namespace {

geom::Plane random_plane(Rng& rng) {
  geom::Vec3 n(rng.normal(), rng.normal(), rng.normal());
  return geom::Plane(n, 0.5 + 4.5 * rng.uniform());
}

geom::Pose random_pose(Rng& rng, double rot = 1.2, double trans = 1.0) {
  geom::Pose p;
  p.rotation = geom::UnitQuaternion::from_rotation_vector(
      {rng.uniform(-rot, rot), rng.uniform(-rot, rot), rng.uniform(-rot, rot)});
  p.translation = {rng.uniform(-trans, trans), rng.uniform(-trans, trans),
                   rng.uniform(-trans, trans)};
  return p;
}

// Plane pairs exactly consistent with the given pose.
std::vector<PlanePair> consistent_corrs(Rng& rng, const geom::Pose& pose,
                                        int m) {
  std::vector<PlanePair> out;
  for (int i = 0; i < m; ++i) {
    const geom::Plane p1 = random_plane(rng);
    out.emplace_back(p1, geom::warp_plane_signed(p1, pose));
  }
  return out;
}

std::vector<PlanePair> random_corrs(Rng& rng, int m) {
  std::vector<PlanePair> out;
  for (int i = 0; i < m; ++i) {
    out.emplace_back(random_plane(rng), random_plane(rng));
  }
  return out;
}

PoseEmbedding random_emb(Rng& rng) {
  PoseEmbedding e;
  for (int i = 0; i < hypo::kEmbedDim; ++i) {
    e.f_r[i] = rng.normal();
    e.f_t[i] = rng.normal();
  }
  return e;
}

bool bits_equal(const Vector& a, const Vector& b) {
  return a.size() == b.size() && (a.array() == b.array()).all();
}

bool pose_bits_equal(const geom::Pose& a, const geom::Pose& b) {
  return bits_equal(a.rotation.coeffs(), b.rotation.coeffs()) &&
         (a.translation.array() == b.translation.array()).all();
}

// Fully populated hypothesis set on pose-consistent correspondences.
HypothesisSet full_set(const NopeSacParams& p, Rng& rng, int m,
                       geom::Pose* gt_out = nullptr) {
  const geom::Pose gt = random_pose(rng);
  geom::Pose init;
  init.rotation =
      geom::UnitQuaternion::from_rotation_vector({0.05, -0.04, 0.08}) *
      gt.rotation;
  init.translation = gt.translation + geom::Vec3(0.1, -0.05, 0.12);
  const auto corrs = consistent_corrs(rng, gt, m);
  HypothesisSet set =
      hypo::generate_hypotheses(p, init, hypo::aim_encode(p, init), corrs);
  std::tie(set.c_r, set.c_t) = hypo::build_cost_matrices(set, corrs);
  std::tie(set.w_r, set.w_t) = hypo::score_hypotheses(p, set.c_r, set.c_t);
  if (gt_out) *gt_out = gt;
  return set;
}

double rel_gap(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-3});
}

// Central finite differences on random coordinates of one network.
void probe_net(nn::Mlp& net, const nn::MlpGrads& grads,
               const std::function<double()>& eval, Rng& rng, int probes,
               double& worst) {
  const double h = 1e-6;
  for (int t = 0; t < probes; ++t) {
    const int l = rng.uniform_int(static_cast<int>(net.layers.size()));
    auto& layer = net.layers[l];
    double* x = nullptr;
    double analytic = 0;
    if (rng.uniform() < 0.25) {
      const int r = rng.uniform_int(static_cast<int>(layer.bias.size()));
      x = &layer.bias[r];
      analytic = grads.dbias[l][r];
    } else {
      const int r = rng.uniform_int(static_cast<int>(layer.weight.rows()));
      const int c = rng.uniform_int(static_cast<int>(layer.weight.cols()));
      x = &layer.weight(r, c);
      analytic = grads.dweight[l](r, c);
    }
    const double saved = *x;
    *x = saved + h;
    const double up = eval();
    *x = saved - h;
    const double down = eval();
    *x = saved;
    worst = std::max(worst, rel_gap((up - down) / (2 * h), analytic));
  }
}

}  // namespace

TEST_CASE("network shapes match the declared architecture") {
  NopeSacParams p = hypo::make_nopesac_params(Rng(17));

  const auto relu_block = [](const nn::Mlp& m, int layers, int in, int out) {
    REQUIRE(static_cast<int>(m.layers.size()) == layers);
    CHECK(m.in_dim() == in);
    CHECK(m.out_dim() == out);
  };
  relu_block(p.rot_enc, 6, 4, 256);
  relu_block(p.trans_enc, 6, 3, 256);
  for (const auto& l : p.rot_enc.layers) CHECK(l.act == nn::Activation::kRelu);

  relu_block(p.linear_rot, 1, 256, 4);
  relu_block(p.linear_trans, 1, 256, 3);
  CHECK(p.linear_rot.layers[0].act == nn::Activation::kNone);

  relu_block(p.g, 9, 8, 1024);
  for (int i = 0; i < 9; ++i) {
    const bool linear = i == 5 || i == 8;
    CHECK(p.g.layers[i].act ==
          (linear ? nn::Activation::kNone : nn::Activation::kRelu));
  }
  relu_block(p.e_r, 6, 1024, 256);
  CHECK(p.e_r.layers[5].act == nn::Activation::kNone);
  relu_block(p.e_t, 9, 1280, 256);
  CHECK(p.e_t.layers[2].act == nn::Activation::kNone);
  CHECK(p.e_t.layers[8].act == nn::Activation::kNone);
  relu_block(p.d_r, 3, 512, 256);
  relu_block(p.d_t, 3, 512, 256);
  for (const auto& l : p.d_r.layers) CHECK(l.act == nn::Activation::kRelu);
  for (const auto& l : p.d_t.layers) CHECK(l.act == nn::Activation::kRelu);
  relu_block(p.score_r, 4, hypo::kScoreSlots, 1);
  relu_block(p.score_t, 4, hypo::kScoreSlots, 1);
  CHECK(p.score_r.layers[3].act == nn::Activation::kNone);

  Rng rng(3);
  const geom::Pose pose = random_pose(rng);
  const PoseEmbedding e = hypo::aim_encode(p, pose);
  CHECK(e.f_r.size() == 256);
  CHECK(e.f_t.size() == 256);
  const Vector g = hypo::correspondence_embed(p, random_plane(rng),
                                              random_plane(rng), pose);
  CHECK(g.size() == 1024);
  const auto [er, et] = hypo::pose_features(p, g);
  CHECK(er.size() == 256);
  CHECK(et.size() == 256);
}

TEST_CASE("decoding is deterministic and always yields unit quaternions") {
  NopeSacParams p = hypo::make_nopesac_params(Rng(5));
  Rng rng(29);
  for (int t = 0; t < 200; ++t) {
    const PoseEmbedding e = random_emb(rng);
    const geom::Pose pose = hypo::decode_pose(p, e);
    CHECK(std::abs(pose.rotation.coeffs().norm() - 1.0) <= 1e-12);
    CHECK(pose_bits_equal(pose, hypo::decode_pose(p, e)));
  }
  const geom::Pose pose = random_pose(rng);
  const PoseEmbedding a = hypo::aim_encode(p, pose);
  const PoseEmbedding b = hypo::aim_encode(p, pose);
  CHECK(bits_equal(a.f_r, b.f_r));
  CHECK(bits_equal(a.f_t, b.f_t));
}

TEST_CASE("zero-weight heads decode to the bias pose") {
  NopeSacParams p = hypo::make_nopesac_params(Rng(7));
  p.linear_rot.layers[0].weight.setZero();
  p.linear_rot.layers[0].bias << 1, 0, 0, 0;
  p.linear_trans.layers[0].weight.setZero();
  p.linear_trans.layers[0].bias.setZero();

  Rng rng(31);
  const geom::Pose pose = hypo::decode_pose(p, random_emb(rng));
  CHECK(pose.rotation.coeffs() == geom::Vec4(1, 0, 0, 0));
  CHECK(pose.translation == geom::Vec3::Zero());

  p.linear_rot.layers[0].bias.setZero();
  CHECK_THROWS_AS(hypo::decode_pose(p, random_emb(rng)),
                  DegenerateQuaternion);
}

TEST_CASE("pose reconstruction loss hand values") {
  NopeSacParams p = hypo::make_nopesac_params(Rng(11));
  Rng rng(37);
  const geom::Pose pose = random_pose(rng);
  p.linear_rot.layers[0].weight.setZero();
  p.linear_rot.layers[0].bias = pose.rotation.coeffs();
  p.linear_trans.layers[0].weight.setZero();
  p.linear_trans.layers[0].bias = pose.translation;

  CHECK(hypo::aim_loss(p, pose) == 0.0);

  p.linear_trans.layers[0].bias += geom::Vec3(0.1, 0, 0);
  CHECK(hypo::aim_loss(p, pose) == doctest::Approx(0.01).epsilon(1e-12));

  // The reconstruction predicting -q is the same rotation: still only the
  // translation offset contributes.
  p.linear_rot.layers[0].bias = -pose.rotation.coeffs();
  CHECK(hypo::aim_loss(p, pose) == doctest::Approx(0.01).epsilon(1e-12));
}

TEST_CASE("pose reconstruction gradients match finite differences") {
  NopeSacParams p = hypo::make_nopesac_params(Rng(13));
  Rng rng(41);
  const std::vector<geom::Pose> batch = {random_pose(rng), random_pose(rng),
                                         random_pose(rng)};

  hypo::AimGrads grads = hypo::AimGrads::zeros_like(p);
  const double loss = hypo::aim_loss_grad(p, batch, grads);

  double mean = 0;
  for (const auto& pose : batch) mean += hypo::aim_loss(p, pose);
  mean /= batch.size();
  CHECK(loss == doctest::Approx(mean).epsilon(1e-12));

  const auto eval = [&] {
    double acc = 0;
    for (const auto& pose : batch) acc += hypo::aim_loss(p, pose);
    return acc / batch.size();
  };
  double worst = 0;
  probe_net(p.rot_enc, grads.rot_enc, eval, rng, 10, worst);
  probe_net(p.trans_enc, grads.trans_enc, eval, rng, 10, worst);
  probe_net(p.linear_rot, grads.linear_rot, eval, rng, 10, worst);
  probe_net(p.linear_trans, grads.linear_trans, eval, rng, 10, worst);
  CHECK(worst < 1e-4);
}

TEST_CASE("correspondence embedding warps the first plane by the init pose") {
  NopeSacParams p = hypo::make_nopesac_params(Rng(19));
  Rng rng(43);
  const geom::Pose init = random_pose(rng);
  const geom::Plane p1 = random_plane(rng);
  const geom::Plane p2 = random_plane(rng);

  const Vector warped = hypo::correspondence_embed(p, p1, p2, init, true);
  const Vector direct = hypo::correspondence_embed(
      p, geom::warp_plane(p1, init), p2, geom::Pose{}, false);
  CHECK(bits_equal(warped, direct));

  const Vector unwarped = hypo::correspondence_embed(p, p1, p2, init, false);
  CHECK_FALSE(bits_equal(warped, unwarped));
}

TEST_CASE("hypothesis count equals correspondence count for every M") {
  NopeSacParams p = hypo::make_nopesac_params(Rng(23));
  Rng rng(47);
  const geom::Pose init = random_pose(rng);
  const PoseEmbedding emb = hypo::aim_encode(p, init);
  for (int m = 1; m <= hypo::kScoreSlots; ++m) {
    const auto corrs = random_corrs(rng, m);
    const HypothesisSet set = hypo::generate_hypotheses(p, init, emb, corrs);
    REQUIRE(set.count() == m);
    REQUIRE(static_cast<int>(set.embs.size()) == m);
    CHECK(set.c_r.size() == 0);
    CHECK(set.w_r.size() == 0);
    for (const auto& pose : set.poses) {
      CHECK(std::abs(pose.rotation.coeffs().norm() - 1.0) <= 1e-12);
    }
  }
  CHECK_THROWS_AS(hypo::generate_hypotheses(p, init, emb, {}),
                  EmptyCorrespondences);
}

TEST_CASE("identical decoder biases collapse all hypotheses when weights are zero") {
  NopeSacParams p = hypo::make_nopesac_params(Rng(29));
  for (auto* net : {&p.d_r, &p.d_t}) {
    for (auto& layer : net->layers) layer.weight.setZero();
  }
  Rng rng(53);
  const geom::Pose init = random_pose(rng);
  const HypothesisSet set = hypo::generate_hypotheses(
      p, init, hypo::aim_encode(p, init), random_corrs(rng, 3));
  CHECK(bits_equal(set.embs[0].f_r, set.embs[1].f_r));
  CHECK(bits_equal(set.embs[1].f_t, set.embs[2].f_t));
  CHECK(pose_bits_equal(set.poses[0], set.poses[2]));
}

TEST_CASE("cost matrices match the explicit warp formula") {
  NopeSacParams p = hypo::make_nopesac_params(Rng(31));
  Rng rng(59);
  const geom::Pose init = random_pose(rng);
  const auto corrs = random_corrs(rng, 5);
  HypothesisSet set =
      hypo::generate_hypotheses(p, init, hypo::aim_encode(p, init), corrs);
  const auto [c_r, c_t] = hypo::build_cost_matrices(set, corrs);
  REQUIRE(c_r.rows() == 6);
  REQUIRE(c_r.cols() == 5);
  REQUIRE(c_t.rows() == 6);

  for (int k = 0; k <= 5; ++k) {
    const geom::Pose& pose = k == 0 ? set.init_pose : set.poses[k - 1];
    const geom::Mat3 rot = pose.rotation.to_matrix();
    for (int i = 0; i < 5; ++i) {
      const auto& [a, b] = corrs[i];
      const geom::Vec3 n_w = rot * a.normal;
      const double d_w = a.offset + n_w.dot(pose.translation);
      CHECK(c_r(k, i) ==
            doctest::Approx((n_w - b.normal).norm()).epsilon(1e-12));
      CHECK(c_t(k, i) ==
            doctest::Approx((d_w * n_w - b.offset * b.normal).norm())
                .epsilon(1e-12));
    }
  }

  CHECK_THROWS_AS(hypo::build_cost_matrices(set, random_corrs(rng, 4)),
                  ShapeMismatch);
}

TEST_CASE("a ground-truth hypothesis has an all-zero cost row") {
  NopeSacParams p = hypo::make_nopesac_params(Rng(37));
  Rng rng(61);
  const geom::Pose gt = random_pose(rng);
  const auto corrs = consistent_corrs(rng, gt, 4);

  HypothesisSet set;
  set.init_pose = random_pose(rng);
  set.init_emb = hypo::aim_encode(p, set.init_pose);
  for (int i = 0; i < 4; ++i) {
    set.poses.push_back(gt);
    set.embs.push_back(random_emb(rng));
  }
  const auto [c_r, c_t] = hypo::build_cost_matrices(set, corrs);
  for (int k = 1; k <= 4; ++k) {
    for (int i = 0; i < 4; ++i) {
      CHECK(std::abs(c_r(k, i)) < 1e-12);
      CHECK(std::abs(c_t(k, i)) < 1e-12);
    }
  }
  CHECK(c_r.row(0).maxCoeff() > 1e-3);
}

TEST_CASE("scores form a distribution and identical rows score uniformly") {
  NopeSacParams p = hypo::make_nopesac_params(Rng(41));
  Rng rng(67);
  for (const int m : {1, 2, 5, 17, 32}) {
    Matrix c_r(m + 1, m), c_t(m + 1, m);
    for (int i = 0; i < c_r.size(); ++i) {
      c_r.data()[i] = 2.0 * rng.uniform();
      c_t.data()[i] = 2.0 * rng.uniform();
    }
    const auto [w_r, w_t] = hypo::score_hypotheses(p, c_r, c_t);
    REQUIRE(w_r.size() == m + 1);
    REQUIRE(w_t.size() == m + 1);
    CHECK(std::abs(w_r.sum() - 1.0) <= 1e-10);
    CHECK(std::abs(w_t.sum() - 1.0) <= 1e-10);
    CHECK(w_r.minCoeff() > 0);
    CHECK(w_t.minCoeff() > 0);
  }

  const Matrix same_r = Matrix::Constant(5, 4, 0.3);
  const Matrix same_t = Matrix::Constant(5, 4, 1.7);
  const auto [w_r, w_t] = hypo::score_hypotheses(p, same_r, same_t);
  for (int k = 0; k < 5; ++k) {
    CHECK(w_r[k] == 0.2);
    CHECK(w_t[k] == 0.2);
  }

  CHECK_THROWS_AS(hypo::score_hypotheses(p, Matrix::Zero(4, 4),
                                         Matrix::Zero(4, 4)),
                  ShapeMismatch);
  CHECK_THROWS_AS(hypo::score_hypotheses(p, Matrix::Zero(34, 33),
                                         Matrix::Zero(34, 33)),
                  InvalidArgument);
  Matrix bad = Matrix::Zero(3, 2);
  bad(1, 1) = std::nan("");
  CHECK_THROWS_AS(hypo::score_hypotheses(p, bad, Matrix::Zero(3, 2)),
                  NonFiniteInput);
}

TEST_CASE("scores are equivariant under correspondence permutation") {
  NopeSacParams p = hypo::make_nopesac_params(Rng(43));
  Rng rng(71);
  const geom::Pose init = random_pose(rng);
  const PoseEmbedding emb = hypo::aim_encode(p, init);
  const auto corrs = random_corrs(rng, 6);
  const std::vector<int> perm = {4, 0, 5, 2, 1, 3};
  std::vector<PlanePair> shuffled;
  for (const int i : perm) shuffled.push_back(corrs[i]);

  HypothesisSet a = hypo::generate_hypotheses(p, init, emb, corrs);
  HypothesisSet b = hypo::generate_hypotheses(p, init, emb, shuffled);
  std::tie(a.c_r, a.c_t) = hypo::build_cost_matrices(a, corrs);
  std::tie(b.c_r, b.c_t) = hypo::build_cost_matrices(b, shuffled);
  std::tie(a.w_r, a.w_t) = hypo::score_hypotheses(p, a.c_r, a.c_t);
  std::tie(b.w_r, b.w_t) = hypo::score_hypotheses(p, b.c_r, b.c_t);

  for (int i = 0; i < 6; ++i) {
    CHECK(pose_bits_equal(b.poses[i], a.poses[perm[i]]));
    for (int j = 0; j < 6; ++j) {
      CHECK(b.c_r(i + 1, j) == a.c_r(perm[i] + 1, perm[j]));
      CHECK(b.c_t(i + 1, j) == a.c_t(perm[i] + 1, perm[j]));
    }
    CHECK(b.c_r(0, i) == a.c_r(0, perm[i]));
    CHECK(rel_gap(b.w_r[i + 1], a.w_r[perm[i] + 1]) < 1e-13);
    CHECK(rel_gap(b.w_t[i + 1], a.w_t[perm[i] + 1]) < 1e-13);
  }
  CHECK(rel_gap(b.w_r[0], a.w_r[0]) < 1e-13);
  CHECK(rel_gap(b.w_t[0], a.w_t[0]) < 1e-13);
}

TEST_CASE("soft fusion with one-hot scores decodes the selected hypothesis") {
  NopeSacParams p = hypo::make_nopesac_params(Rng(47));
  Rng rng(73);
  HypothesisSet set = full_set(p, rng, 4);
  const int total = set.count() + 1;

  set.w_r = Vector::Zero(total);
  set.w_t = Vector::Zero(total);
  set.w_r[2] = 1.0;
  set.w_t[2] = 1.0;
  CHECK(pose_bits_equal(hypo::fuse(p, set, hypo::Fusion::kSoft),
                        hypo::decode_pose(p, set.embs[1])));

  // Channels select independently.
  set.w_t[2] = 0.0;
  set.w_t[4] = 1.0;
  PoseEmbedding mixed;
  mixed.f_r = set.embs[1].f_r;
  mixed.f_t = set.embs[3].f_t;
  CHECK(pose_bits_equal(hypo::fuse(p, set, hypo::Fusion::kSoft),
                        hypo::decode_pose(p, mixed)));

  set.w_r = Vector::Zero(total);
  set.w_t = Vector::Zero(total);
  set.w_r[0] = 1.0;
  set.w_t[0] = 1.0;
  PoseEmbedding init_pick;
  init_pick.f_r = set.init_emb.f_r;
  init_pick.f_t = set.init_emb.f_t;
  CHECK(pose_bits_equal(hypo::fuse(p, set, hypo::Fusion::kSoft),
                        hypo::decode_pose(p, init_pick)));
}

TEST_CASE("avg fusion equals soft fusion under uniform scores bitwise") {
  NopeSacParams p = hypo::make_nopesac_params(Rng(53));
  Rng rng(79);
  for (const int m : {1, 3, 7}) {
    HypothesisSet set = full_set(p, rng, m);
    const int total = m + 1;
    set.w_r = Vector::Constant(total, 1.0 / total);
    set.w_t = Vector::Constant(total, 1.0 / total);
    CHECK(pose_bits_equal(hypo::fuse(p, set, hypo::Fusion::kSoft),
                          hypo::fuse(p, set, hypo::Fusion::kAvg)));
  }

  // Softmax of equal logits lands exactly on the uniform weights, so the
  // identity also holds for scores computed from constant cost matrices.
  HypothesisSet set = full_set(p, rng, 4);
  std::tie(set.w_r, set.w_t) = hypo::score_hypotheses(
      p, Matrix::Constant(5, 4, 0.4), Matrix::Constant(5, 4, 0.9));
  CHECK(pose_bits_equal(hypo::fuse(p, set, hypo::Fusion::kSoft),
                        hypo::fuse(p, set, hypo::Fusion::kAvg)));
}

TEST_CASE("min-cost fusion matches the brute-force row-sum argmin") {
  NopeSacParams p = hypo::make_nopesac_params(Rng(59));
  Rng rng(83);
  for (int trial = 0; trial < 1000; ++trial) {
    const int m = 1 + rng.uniform_int(8);
    HypothesisSet set;
    set.init_pose = random_pose(rng);
    set.init_emb = random_emb(rng);
    for (int i = 0; i < m; ++i) {
      set.embs.push_back(random_emb(rng));
      set.poses.push_back(hypo::decode_pose(p, set.embs.back()));
    }
    set.c_r.resize(m + 1, m);
    set.c_t.resize(m + 1, m);
    for (int i = 0; i < set.c_r.size(); ++i) {
      set.c_r.data()[i] = 3.0 * rng.uniform();
      set.c_t.data()[i] = 3.0 * rng.uniform();
    }

    int best_r = 0, best_t = 0;
    for (int k = 1; k <= m; ++k) {
      if (set.c_r.row(k).sum() < set.c_r.row(best_r).sum()) best_r = k;
      if (set.c_t.row(k).sum() < set.c_t.row(best_t).sum()) best_t = k;
    }
    PoseEmbedding pick;
    pick.f_r = hypo::emb_at(set, best_r).f_r;
    pick.f_t = hypo::emb_at(set, best_t).f_t;
    CHECK(pose_bits_equal(hypo::fuse(p, set, hypo::Fusion::kMinCost),
                          hypo::decode_pose(p, pick)));
  }
}

TEST_CASE("max-score fusion picks the top score per channel") {
  NopeSacParams p = hypo::make_nopesac_params(Rng(61));
  Rng rng(89);
  for (int trial = 0; trial < 200; ++trial) {
    const int m = 1 + rng.uniform_int(6);
    HypothesisSet set = full_set(p, rng, m);
    int best_r = 0, best_t = 0;
    for (int k = 1; k <= m; ++k) {
      if (set.w_r[k] > set.w_r[best_r]) best_r = k;
      if (set.w_t[k] > set.w_t[best_t]) best_t = k;
    }
    PoseEmbedding pick;
    pick.f_r = hypo::emb_at(set, best_r).f_r;
    pick.f_t = hypo::emb_at(set, best_t).f_t;
    CHECK(pose_bits_equal(hypo::fuse(p, set, hypo::Fusion::kMaxScore),
                          hypo::decode_pose(p, pick)));
  }

  // Ties resolve to the lowest index: uniform scores pick the initial pose.
  HypothesisSet set = full_set(p, rng, 3);
  set.w_r = Vector::Constant(4, 0.25);
  set.w_t = Vector::Constant(4, 0.25);
  PoseEmbedding pick;
  pick.f_r = set.init_emb.f_r;
  pick.f_t = set.init_emb.f_t;
  CHECK(pose_bits_equal(hypo::fuse(p, set, hypo::Fusion::kMaxScore),
                        hypo::decode_pose(p, pick)));
}

TEST_CASE("fusion requires the fields it consumes") {
  NopeSacParams p = hypo::make_nopesac_params(Rng(67));
  Rng rng(97);
  const geom::Pose init = random_pose(rng);
  HypothesisSet set = hypo::generate_hypotheses(
      p, init, hypo::aim_encode(p, init), random_corrs(rng, 3));

  CHECK_THROWS_AS(hypo::fuse(p, set, hypo::Fusion::kSoft), MissingScores);
  CHECK_THROWS_AS(hypo::fuse(p, set, hypo::Fusion::kMaxScore), MissingScores);
  CHECK_THROWS_AS(hypo::fuse(p, set, hypo::Fusion::kMinCost), MissingCosts);
  CHECK_NOTHROW(hypo::fuse(p, set, hypo::Fusion::kAvg));

  CHECK(hypo::parse_fusion("soft") == hypo::Fusion::kSoft);
  CHECK(hypo::parse_fusion("min-cost") == hypo::Fusion::kMinCost);
  CHECK(hypo::fusion_name(hypo::Fusion::kMaxScore) == "max-score");
  CHECK_THROWS_AS(hypo::parse_fusion("mean"), InvalidArgument);
}

TEST_CASE("soft-fused embeddings stay in the hypothesis convex hull") {
  NopeSacParams p = hypo::make_nopesac_params(Rng(71));
  Rng rng(101);
  for (int trial = 0; trial < 20; ++trial) {
    const HypothesisSet set = full_set(p, rng, 2 + rng.uniform_int(5));
    Vector fused_r = Vector::Zero(hypo::kEmbedDim);
    Vector fused_t = Vector::Zero(hypo::kEmbedDim);
    Vector lo_r = hypo::emb_at(set, 0).f_r, hi_r = lo_r;
    Vector lo_t = hypo::emb_at(set, 0).f_t, hi_t = lo_t;
    for (int k = 0; k <= set.count(); ++k) {
      const PoseEmbedding& e = hypo::emb_at(set, k);
      fused_r += set.w_r[k] * e.f_r;
      fused_t += set.w_t[k] * e.f_t;
      lo_r = lo_r.cwiseMin(e.f_r);
      hi_r = hi_r.cwiseMax(e.f_r);
      lo_t = lo_t.cwiseMin(e.f_t);
      hi_t = hi_t.cwiseMax(e.f_t);
    }
    CHECK((fused_r.array() >= lo_r.array() - 1e-12).all());
    CHECK((fused_r.array() <= hi_r.array() + 1e-12).all());
    CHECK((fused_t.array() >= lo_t.array() - 1e-12).all());
    CHECK((fused_t.array() <= hi_t.array() + 1e-12).all());
  }
}

TEST_CASE("scoring loss hand values and index selection") {
  Rng rng(103);
  const geom::Pose gt = random_pose(rng);

  HypothesisSet set;
  set.init_pose = random_pose(rng);
  set.poses.push_back(gt);
  set.embs.push_back(PoseEmbedding{});
  set.c_r = Matrix::Zero(2, 1);
  set.c_t = Matrix::Zero(2, 1);
  set.c_t(1, 0) = 0.37;
  set.w_r = Vector::Constant(2, 0.5);
  set.w_t = Vector::Constant(2, 0.5);
  CHECK(hypo::scoring_loss(set, gt) ==
        doctest::Approx(0.5 + 2 * 0.5 + 10 * 0.37).epsilon(1e-12));

  // Perfect scores on a zero-self-cost set vanish.
  set.c_t(1, 0) = 0.0;
  set.w_r << 0, 1;
  set.w_t << 0, 1;
  CHECK(hypo::scoring_loss(set, gt) == 0.0);

  // Rotation picks hypothesis 1, translation picks the initial pose.
  geom::Pose mixed_gt;
  mixed_gt.rotation = set.poses[0].rotation;
  mixed_gt.translation = set.init_pose.translation;
  set.w_r << 0.2, 0.8;
  set.w_t << 0.7, 0.3;
  set.c_t(1, 0) = 0.05;
  CHECK(hypo::scoring_loss(set, mixed_gt) ==
        doctest::Approx(0.2 + 2 * 0.3 + 10 * 0.05).epsilon(1e-12));

  set.w_r = Vector();
  CHECK_THROWS_AS(hypo::scoring_loss(set, gt), MissingScores);
  set.w_r = Vector::Constant(2, 0.5);
  set.c_t = Matrix();
  CHECK_THROWS_AS(hypo::scoring_loss(set, gt), MissingCosts);
}

TEST_CASE("refinement loss decomposes into soft, avg and scoring terms") {
  NopeSacParams p = hypo::make_nopesac_params(Rng(73));
  Rng rng(107);
  hypo::RefineItem item;
  item.gt = random_pose(rng);
  item.init.rotation =
      geom::UnitQuaternion::from_rotation_vector({-0.06, 0.09, 0.04}) *
      item.gt.rotation;
  item.init.translation = item.gt.translation + geom::Vec3(0.15, -0.1, 0.05);
  item.corrs = consistent_corrs(rng, item.gt, 3);

  HypothesisSet set = hypo::generate_hypotheses(
      p, item.init, hypo::aim_encode(p, item.init), item.corrs);
  std::tie(set.c_r, set.c_t) = hypo::build_cost_matrices(set, item.corrs);
  std::tie(set.w_r, set.w_t) = hypo::score_hypotheses(p, set.c_r, set.c_t);

  const auto head_mse = [&](const Vector& w_r, const Vector& w_t) {
    Vector f_r = Vector::Zero(hypo::kEmbedDim);
    Vector f_t = Vector::Zero(hypo::kEmbedDim);
    for (int k = 0; k <= set.count(); ++k) {
      f_r += w_r[k] * hypo::emb_at(set, k).f_r;
      f_t += w_t[k] * hypo::emb_at(set, k).f_t;
    }
    const Vector q = nn::mlp_forward(p.linear_rot, f_r).col(0);
    const Vector t = nn::mlp_forward(p.linear_trans, f_t).col(0);
    const geom::Vec4 q_gt = item.gt.rotation.coeffs();
    const double sign = q.dot(q_gt) < 0 ? -1.0 : 1.0;
    return (q - sign * q_gt).squaredNorm() +
           (t - item.gt.translation).squaredNorm();
  };
  const Vector uniform = Vector::Constant(set.count() + 1, 0.25);
  const double expected = head_mse(set.w_r, set.w_t) +
                          head_mse(uniform, uniform) +
                          0.01 * hypo::scoring_loss(set, item.gt);
  CHECK(hypo::refinement_loss(p, item) ==
        doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("refinement gradients match finite differences end to end") {
  NopeSacParams p = hypo::make_nopesac_params(Rng(79));
  Rng rng(109);
  hypo::RefineItem item;
  item.gt = random_pose(rng);
  item.init.rotation =
      geom::UnitQuaternion::from_rotation_vector({0.1, -0.07, 0.05}) *
      item.gt.rotation;
  item.init.translation = item.gt.translation + geom::Vec3(-0.12, 0.08, 0.1);
  item.corrs = consistent_corrs(rng, item.gt, 2);

  hypo::RefinerGrads grads = hypo::RefinerGrads::zeros_like(p);
  const double loss = hypo::refinement_loss_grad(p, {item}, grads);
  CHECK(rel_gap(loss, hypo::refinement_loss(p, item)) < 1e-9);

  const auto eval = [&] { return hypo::refinement_loss(p, item); };
  double worst = 0;
  probe_net(p.g, grads.g, eval, rng, 8, worst);
  probe_net(p.e_r, grads.e_r, eval, rng, 8, worst);
  probe_net(p.e_t, grads.e_t, eval, rng, 8, worst);
  probe_net(p.d_r, grads.d_r, eval, rng, 8, worst);
  probe_net(p.d_t, grads.d_t, eval, rng, 8, worst);
  probe_net(p.score_r, grads.score_r, eval, rng, 8, worst);
  probe_net(p.score_t, grads.score_t, eval, rng, 8, worst);
  CHECK(worst < 1e-4);
}

TEST_CASE("batched refinement loss is the mean over items") {
  NopeSacParams p = hypo::make_nopesac_params(Rng(83));
  Rng rng(113);
  std::vector<hypo::RefineItem> batch;
  for (int i = 0; i < 3; ++i) {
    hypo::RefineItem item;
    item.gt = random_pose(rng);
    item.init = random_pose(rng);
    item.corrs = consistent_corrs(rng, item.gt, 2 + i);
    batch.push_back(std::move(item));
  }
  hypo::RefinerGrads grads = hypo::RefinerGrads::zeros_like(p);
  const double loss = hypo::refinement_loss_grad(p, batch, grads);

  double mean = 0;
  hypo::RefinerGrads sum = hypo::RefinerGrads::zeros_like(p);
  for (const auto& item : batch) {
    mean += hypo::refinement_loss_grad(p, {item}, sum) / 3.0;
  }
  CHECK(rel_gap(loss, mean) < 1e-9);
  // Per-item gradients average (each single-item call used weight 1, so the
  // accumulated sum is 3x the batched mean).
  CHECK(rel_gap(sum.g.dweight[0](0, 0), 3.0 * grads.g.dweight[0](0, 0)) <
        1e-9);
  CHECK(rel_gap(sum.score_t.dbias[1][7], 3.0 * grads.score_t.dbias[1][7]) <
        1e-9);

  CHECK_THROWS_AS(hypo::refinement_loss_grad(p, {}, grads), EmptyInput);
}

TEST_CASE("parameters survive a checkpoint round trip bitwise") {
  const NopeSacParams p = hypo::make_nopesac_params(Rng(97));
  nn::Checkpoint ck;
  ck.spec_hash = hypo::nopesac_spec_hash();
  hypo::append_nopesac(ck, p);
  const std::string path = "/tmp/planepose_hypo_ck.bin";
  nn::save_checkpoint(ck, path);

  const nn::Checkpoint loaded = nn::load_checkpoint(path);
  CHECK(loaded.spec_hash == hypo::nopesac_spec_hash());
  const NopeSacParams q = hypo::read_nopesac(loaded);
  const auto a = hypo::named_mlps(p);
  const auto b = hypo::named_mlps(q);
  for (size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].second->layers.size() == b[i].second->layers.size());
    for (size_t l = 0; l < a[i].second->layers.size(); ++l) {
      CHECK((a[i].second->layers[l].weight.array() ==
             b[i].second->layers[l].weight.array())
                .all());
      CHECK((a[i].second->layers[l].bias.array() ==
             b[i].second->layers[l].bias.array())
                .all());
    }
  }
  std::remove(path.c_str());

  nn::Checkpoint broken = loaded;
  broken.entries.erase(broken.entries.begin());
  CHECK_THROWS_AS(hypo::read_nopesac(broken), CheckpointError);
}
