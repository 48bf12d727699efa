#pragma once

#include <string>
#include <utility>
#include <vector>

#include "planepose/geom.hpp"
#include "planepose/tinynn.hpp"

// Pose-from-planes refinement core. An auto-encoder lifts any initial pose
// into a pair of 256-d embeddings; each matched plane pair then yields a
// one-plane pose hypothesis; hypotheses are scored by their geometric
// consistency with all correspondences and fused back into a single pose.
namespace planepose::hypo {

using nn::Matrix;
using nn::Vector;

// (frame-1 plane, frame-2 plane) of one matched pair.
using PlanePair = std::pair<geom::Plane, geom::Plane>;

inline constexpr int kEmbedDim = 256;

// The scoring layers consume fixed-width rows: each cost row is sorted
// ascending into the leading slots and zero-padded up to kScoreSlots, so a
// row's score is invariant to the ordering of the correspondences.
inline constexpr int kScoreSlots = 32;

// Rotation / translation embeddings, decodable by the shared linear heads.
struct PoseEmbedding {
  Vector f_r = Vector::Zero(kEmbedDim);
  Vector f_t = Vector::Zero(kEmbedDim);
};

// All learnable networks of the refiner.
//   rot_enc      4 -> 256, 6 layers, ReLU throughout
//   trans_enc    3 -> 256, 6 layers, ReLU throughout
//   linear_rot   256 -> 4 head, shared by every decode site
//   linear_trans 256 -> 3 head, shared by every decode site
//   g            8 -> 1024 correspondence encoder, 9 layers (6 and 9 linear)
//   e_r          1024 -> 256 rotation feature, 6 layers (last linear)
//   e_t          1280 -> 256 translation feature, 9 layers (3 and 9 linear)
//   d_r, d_t     512 -> 256 hypothesis embedding, 3 layers, ReLU throughout
//   score_r, score_t  kScoreSlots -> 64 -> 64 -> 64 -> 1 logit
struct NopeSacParams {
  nn::Mlp rot_enc;
  nn::Mlp trans_enc;
  nn::Mlp linear_rot;
  nn::Mlp linear_trans;
  nn::Mlp g;
  nn::Mlp e_r;
  nn::Mlp e_t;
  nn::Mlp d_r;
  nn::Mlp d_t;
  nn::Mlp score_r;
  nn::Mlp score_t;
};

NopeSacParams make_nopesac_params(Rng rng);

// Fixed-order (name, net) listing used by checkpoints and optimizers.
std::vector<std::pair<std::string, nn::Mlp*>> named_mlps(NopeSacParams& p);
std::vector<std::pair<std::string, const nn::Mlp*>> named_mlps(
    const NopeSacParams& p);

// Hash over the architecture signatures; stored in checkpoints so a file
// trained against different shapes is rejected on load.
uint64_t nopesac_spec_hash();

void append_nopesac(nn::Checkpoint& ck, const NopeSacParams& p);
NopeSacParams read_nopesac(const nn::Checkpoint& ck);

// The initial pose plus one hypothesis per correspondence. Cost matrices
// are (M+1) x M with row 0 belonging to the initial pose; score vectors
// have M+1 entries and sum to 1. Both stay empty until attached.
struct HypothesisSet {
  geom::Pose init_pose;
  PoseEmbedding init_emb;
  std::vector<geom::Pose> poses;       // M one-plane poses
  std::vector<PoseEmbedding> embs;     // their embeddings
  Matrix c_r, c_t;                     // geometric cost matrices
  Vector w_r, w_t;                     // softmax scores

  int count() const { return static_cast<int>(poses.size()); }
};

// Embedding of hypothesis k, with k = 0 meaning the initial pose.
const PoseEmbedding& emb_at(const HypothesisSet& set, int k);

// --- pose auto-encoding ---

PoseEmbedding aim_encode(const NopeSacParams& p, const geom::Pose& pose);

// Heads applied to an embedding; the rotation output is normalized to a
// canonical unit quaternion. Throws DegenerateQuaternion when the raw head
// output has norm < 1e-8.
geom::Pose decode_pose(const NopeSacParams& p, const PoseEmbedding& e);

// Encode-decode reconstruction error: squared distance between the raw
// head outputs and the pose, with the target quaternion flipped into the
// half-space of the prediction first.
double aim_loss(const NopeSacParams& p, const geom::Pose& pose);

struct AimGrads {
  nn::MlpGrads rot_enc, trans_enc, linear_rot, linear_trans;

  static AimGrads zeros_like(const NopeSacParams& p);
  void set_zero();
};

// Mean aim_loss over a batch; parameter gradients accumulate (+=).
double aim_loss_grad(const NopeSacParams& p,
                     const std::vector<geom::Pose>& batch, AimGrads& grads);

// --- one-plane hypothesis generation ---

// g = G(n1' ++ d1' ++ n2 ++ d2) with the frame-1 plane warped by the
// initial pose (identity mapping when warp is false).
Vector correspondence_embed(const NopeSacParams& p, const geom::Plane& p1,
                            const geom::Plane& p2, const geom::Pose& init,
                            bool warp = true);

// e_r = E_r(g), e_t = E_t(g ++ e_r).
std::pair<Vector, Vector> pose_features(const NopeSacParams& p,
                                        const Vector& g);

// f_r = D_r(f0_r ++ e_r), f_t = D_t(f0_t ++ e_t).
PoseEmbedding one_plane_embedding(const NopeSacParams& p,
                                  const PoseEmbedding& init_emb,
                                  const Vector& e_r, const Vector& e_t);

// One decoded hypothesis per correspondence; costs and scores not attached.
// Throws EmptyCorrespondences when corrs is empty.
HypothesisSet generate_hypotheses(const NopeSacParams& p,
                                  const geom::Pose& init,
                                  const PoseEmbedding& init_emb,
                                  const std::vector<PlanePair>& corrs,
                                  bool warp = true);

// --- scoring and fusion ---

// Rotation / translation cost matrices, one row per hypothesis (row 0 =
// initial pose), one column per correspondence.
std::pair<Matrix, Matrix> build_cost_matrices(
    const HypothesisSet& set, const std::vector<PlanePair>& corrs);

// Each cost row through its scoring net, logits softmaxed over the M+1
// hypotheses. Requires 1 <= M <= kScoreSlots and finite costs.
std::pair<Vector, Vector> score_hypotheses(const NopeSacParams& p,
                                           const Matrix& c_r,
                                           const Matrix& c_t);

enum class Fusion { kSoft, kAvg, kMinCost, kMaxScore };

Fusion parse_fusion(const std::string& name);  // soft|avg|min-cost|max-score
std::string fusion_name(Fusion f);

// Final pose from a hypothesis set. Soft decodes the score-weighted sum of
// embeddings; Avg uses uniform weights; MinCost picks the row with the
// smallest cost sum and MaxScore the highest score, each independently for
// the rotation and translation channels (lowest index wins ties). Throws
// MissingScores / MissingCosts when the needed fields were not attached.
geom::Pose fuse(const NopeSacParams& p, const HypothesisSet& set, Fusion f);

// |1 - w_r[i]| + 2 |1 - w_t[j]| + (10/M) * sum of each hypothesis's
// translation cost on its own generating correspondence, where i (j) is
// the hypothesis closest to gt in rotation (translation), initial pose
// included. Requires scores and costs attached.
double scoring_loss(const HypothesisSet& set, const geom::Pose& gt);

// One training scene: initial pose, matched plane pairs, ground truth.
struct RefineItem {
  geom::Pose init;
  std::vector<PlanePair> corrs;
  geom::Pose gt;
  bool warp = true;
};

// Soft-fusion MSE + Avg-fusion MSE + 0.01 * scoring_loss for one item.
double refinement_loss(const NopeSacParams& p, const RefineItem& item);

struct RefinerGrads {
  nn::MlpGrads g, e_r, e_t, d_r, d_t, score_r, score_t;

  static RefinerGrads zeros_like(const NopeSacParams& p);
  void set_zero();
};

// Mean refinement_loss over a batch with gradients for the hypothesis and
// scoring nets (the pose auto-encoder and heads are held fixed here, as in
// stage-B training). Gradients accumulate (+=).
double refinement_loss_grad(const NopeSacParams& p,
                            const std::vector<RefineItem>& batch,
                            RefinerGrads& grads);

}  // namespace planepose::hypo
