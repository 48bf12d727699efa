#pragma once

#include <utility>
#include <vector>

#include "planepose/geom.hpp"
#include "planepose/tinynn.hpp"

namespace planepose::match {

using nn::Matrix;
using nn::Vector;

// S_e = E1 E2^T on row-stacked descriptors (K x D each).
Matrix appearance_affinity(const Matrix& desc1, const Matrix& desc2);

// Pairwise plane affinity: frame-1 planes warped by the given pose, then
// -l1 * acos(n . n') - l2 * |d - d'| against frame-2 planes.
Matrix geometric_score(const std::vector<geom::Plane>& planes1,
                       const std::vector<geom::Plane>& planes2,
                       const geom::Pose& pose_estimate,
                       double lambda1 = 0.125, double lambda2 = 0.25);

Matrix full_score(const Matrix& appearance, const Matrix& geometric);

struct Match {
  int i = 0;
  int j = 0;
  double score = 0;
};

// Soft assignment over scores augmented with a dustbin row/column. The
// dustbin row absorbs up to K2 units of mass and the dustbin column K1;
// every real row and column carries unit mass.
struct Assignment {
  Matrix soft;  // (K1+1) x (K2+1)
  std::vector<Match> matches;
};

Assignment sinkhorn_dustbin(const Matrix& scores, double bin_score,
                            int iters = 100);

// Mutual row/column maxima over the real block, kept above the threshold.
// Ties resolve to the lowest column index. Fills a.matches and returns it.
std::vector<Match> extract_matches(Assignment& a, double threshold = 0.2);

// Negative log-likelihood of a labelled assignment: matched pairs hit their
// cell, unmatched frame-1 planes the dustbin column, unmatched frame-2
// planes the dustbin row.
double matching_loss(const Assignment& a,
                     const std::vector<std::pair<int, int>>& gt_pairs,
                     const std::vector<int>& unmatched1,
                     const std::vector<int>& unmatched2);

// Same loss evaluated from raw scores, with gradients unrolled through the
// Sinkhorn iterations for training the affinities and the bin score.
struct MatchingLoss {
  double value = 0;
  Matrix dscores;
  double dbin = 0;
};
MatchingLoss matching_loss_grad(const Matrix& scores, double bin_score,
                                int iters,
                                const std::vector<std::pair<int, int>>& gt_pairs,
                                const std::vector<int>& unmatched1,
                                const std::vector<int>& unmatched2);

struct Prf {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};
Prf match_prf(const std::vector<Match>& pred,
              const std::vector<std::pair<int, int>>& gt);

}  // namespace planepose::match
