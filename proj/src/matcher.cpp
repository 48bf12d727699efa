#include "planepose/matcher.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace planepose::match {

namespace {

void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) {
    throw NonFiniteInput(std::string(what) + " contains non-finite values");
  }
}

// row-wise logsumexp of Z + 1 v^T
Vector lse_over_cols(const Matrix& z, const Vector& v) {
  Vector out(z.rows());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < z.cols(); ++j) {
      mx = std::max(mx, z(i, j) + v(j));
    }
    double s = 0;
    for (Eigen::Index j = 0; j < z.cols(); ++j) {
      s += std::exp(z(i, j) + v(j) - mx);
    }
    out(i) = mx + std::log(s);
  }
  return out;
}

// column-wise logsumexp of Z + u 1^T
Vector lse_over_rows(const Matrix& z, const Vector& u) {
  Vector out(z.cols());
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      mx = std::max(mx, z(i, j) + u(i));
    }
    double s = 0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      s += std::exp(z(i, j) + u(i) - mx);
    }
    out(j) = mx + std::log(s);
  }
  return out;
}

struct SinkhornRun {
  Matrix z;                 // augmented scores
  Vector log_mu, log_nu;    // marginal masses (log)
  std::vector<Vector> us;   // u after each iteration
  std::vector<Vector> vs;   // v after each iteration
  Matrix log_a;             // final log assignment
};

SinkhornRun run_sinkhorn(const Matrix& scores, double bin_score, int iters) {
  require_finite(scores, "sinkhorn scores");
  if (scores.rows() < 1 || scores.cols() < 1) {
    throw EmptyInput("sinkhorn needs a non-empty score matrix");
  }
  if (iters < 1) throw InvalidArgument("sinkhorn needs at least 1 iteration");
  const Eigen::Index k1 = scores.rows();
  const Eigen::Index k2 = scores.cols();

  SinkhornRun run;
  run.z.resize(k1 + 1, k2 + 1);
  run.z.topLeftCorner(k1, k2) = scores;
  run.z.row(k1).setConstant(bin_score);
  run.z.col(k2).setConstant(bin_score);

  run.log_mu = Vector::Zero(k1 + 1);
  run.log_mu(k1) = std::log(static_cast<double>(k2));
  run.log_nu = Vector::Zero(k2 + 1);
  run.log_nu(k2) = std::log(static_cast<double>(k1));

  Vector u = Vector::Zero(k1 + 1);
  Vector v = Vector::Zero(k2 + 1);
  run.us.reserve(iters);
  run.vs.reserve(iters);
  for (int t = 0; t < iters; ++t) {
    u = run.log_mu - lse_over_cols(run.z, v);
    v = run.log_nu - lse_over_rows(run.z, u);
    run.us.push_back(u);
    run.vs.push_back(v);
  }
  run.log_a = (run.z.colwise() + u).rowwise() + v.transpose();
  return run;
}

}  // namespace

Matrix appearance_affinity(const Matrix& desc1, const Matrix& desc2) {
  if (desc1.cols() != desc2.cols()) {
    throw ShapeMismatch("descriptor dimensions differ");
  }
  require_finite(desc1, "descriptors");
  require_finite(desc2, "descriptors");
  return desc1 * desc2.transpose();
}

Matrix geometric_score(const std::vector<geom::Plane>& planes1,
                       const std::vector<geom::Plane>& planes2,
                       const geom::Pose& pose_estimate, double lambda1,
                       double lambda2) {
  Matrix s(planes1.size(), planes2.size());
  for (size_t i = 0; i < planes1.size(); ++i) {
    geom::Plane w = geom::warp_plane(planes1[i], pose_estimate);
    for (size_t j = 0; j < planes2.size(); ++j) {
      s(i, j) = geom::geometric_affinity(w, planes2[j], lambda1, lambda2);
    }
  }
  return s;
}

Matrix full_score(const Matrix& appearance, const Matrix& geometric) {
  if (appearance.rows() != geometric.rows() ||
      appearance.cols() != geometric.cols()) {
    throw ShapeMismatch("affinity matrices differ in shape");
  }
  return appearance + geometric;
}

Assignment sinkhorn_dustbin(const Matrix& scores, double bin_score,
                            int iters) {
  Assignment a;
  a.soft = run_sinkhorn(scores, bin_score, iters).log_a.array().exp();
  return a;
}

std::vector<Match> extract_matches(Assignment& a, double threshold) {
  if (!(threshold >= 0.0 && threshold < 1.0)) {
    throw InvalidArgument("match threshold must lie in [0, 1)");
  }
  const Eigen::Index k1 = a.soft.rows() - 1;
  const Eigen::Index k2 = a.soft.cols() - 1;
  a.matches.clear();
  std::vector<Eigen::Index> best_col(k1, -1), best_row(k2, -1);
  for (Eigen::Index i = 0; i < k1; ++i) {
    double best = -1;
    for (Eigen::Index j = 0; j < k2; ++j) {
      if (a.soft(i, j) > best) {
        best = a.soft(i, j);
        best_col[i] = j;
      }
    }
  }
  for (Eigen::Index j = 0; j < k2; ++j) {
    double best = -1;
    for (Eigen::Index i = 0; i < k1; ++i) {
      if (a.soft(i, j) > best) {
        best = a.soft(i, j);
        best_row[j] = i;
      }
    }
  }
  for (Eigen::Index i = 0; i < k1; ++i) {
    Eigen::Index j = best_col[i];
    if (j >= 0 && best_row[j] == i && a.soft(i, j) > threshold) {
      a.matches.push_back({static_cast<int>(i), static_cast<int>(j),
                           a.soft(i, j)});
    }
  }
  return a.matches;
}

double matching_loss(const Assignment& a,
                     const std::vector<std::pair<int, int>>& gt_pairs,
                     const std::vector<int>& unmatched1,
                     const std::vector<int>& unmatched2) {
  const int k1 = static_cast<int>(a.soft.rows()) - 1;
  const int k2 = static_cast<int>(a.soft.cols()) - 1;
  double loss = 0;
  auto hit = [&](int i, int j) {
    if (i < 0 || i > k1 || j < 0 || j > k2) {
      throw IndexOutOfRange("matching label outside the assignment");
    }
    loss -= std::log(a.soft(i, j));
  };
  for (auto [i, j] : gt_pairs) {
    if (i >= k1 || j >= k2) {
      throw IndexOutOfRange("matched label outside the real block");
    }
    hit(i, j);
  }
  for (int i : unmatched1) {
    if (i >= k1) throw IndexOutOfRange("unmatched label out of range");
    hit(i, k2);
  }
  for (int j : unmatched2) {
    if (j >= k2) throw IndexOutOfRange("unmatched label out of range");
    hit(k1, j);
  }
  return loss;
}

MatchingLoss matching_loss_grad(
    const Matrix& scores, double bin_score, int iters,
    const std::vector<std::pair<int, int>>& gt_pairs,
    const std::vector<int>& unmatched1, const std::vector<int>& unmatched2) {
  const int k1 = static_cast<int>(scores.rows());
  const int k2 = static_cast<int>(scores.cols());
  SinkhornRun run = run_sinkhorn(scores, bin_score, iters);

  MatchingLoss out;
  // log A is linear in (Z, u, v), so the loss gradient seeds are counts
  Matrix dz = Matrix::Zero(k1 + 1, k2 + 1);
  Vector du = Vector::Zero(k1 + 1);
  Vector dv = Vector::Zero(k2 + 1);
  auto hit = [&](int i, int j) {
    out.value -= run.log_a(i, j);
    dz(i, j) -= 1.0;
    du(i) -= 1.0;
    dv(j) -= 1.0;
  };
  for (auto [i, j] : gt_pairs) {
    if (i < 0 || i >= k1 || j < 0 || j >= k2) {
      throw IndexOutOfRange("matched label outside the real block");
    }
    hit(i, j);
  }
  for (int i : unmatched1) {
    if (i < 0 || i >= k1) throw IndexOutOfRange("unmatched label out of range");
    hit(i, k2);
  }
  for (int j : unmatched2) {
    if (j < 0 || j >= k2) throw IndexOutOfRange("unmatched label out of range");
    hit(k1, j);
  }

  // reverse through the iterations; u_t used Z + v_{t-1}, v_t used Z + u_t
  for (int t = iters - 1; t >= 0; --t) {
    const Vector& ut = run.us[t];
    const Vector vprev = t > 0 ? run.vs[t - 1] : Vector::Zero(k2 + 1);

    // v_t = log_nu - LSE_rows(Z + u_t)
    Vector lse_v = lse_over_rows(run.z, ut);
    for (int j = 0; j <= k2; ++j) {
      if (dv(j) == 0.0) continue;
      for (int i = 0; i <= k1; ++i) {
        double p = std::exp(run.z(i, j) + ut(i) - lse_v(j));
        dz(i, j) -= dv(j) * p;
        du(i) -= dv(j) * p;
      }
    }
    dv.setZero();

    // u_t = log_mu - LSE_cols(Z + v_{t-1})
    Vector lse_u = lse_over_cols(run.z, vprev);
    for (int i = 0; i <= k1; ++i) {
      if (du(i) == 0.0) continue;
      for (int j = 0; j <= k2; ++j) {
        double q = std::exp(run.z(i, j) + vprev(j) - lse_u(i));
        dz(i, j) -= du(i) * q;
        dv(j) -= du(i) * q;
      }
    }
    du.setZero();
  }

  out.dscores = dz.topLeftCorner(k1, k2);
  out.dbin = dz.row(k1).sum() + dz.col(k2).sum() - dz(k1, k2);
  return out;
}

Prf match_prf(const std::vector<Match>& pred,
              const std::vector<std::pair<int, int>>& gt) {
  if (pred.empty()) return {};
  int tp = 0;
  for (const auto& m : pred) {
    for (const auto& [i, j] : gt) {
      if (m.i == i && m.j == j) {
        ++tp;
        break;
      }
    }
  }
  Prf out;
  out.precision = static_cast<double>(tp) / static_cast<double>(pred.size());
  out.recall = gt.empty() ? 0.0
                          : static_cast<double>(tp) /
                                static_cast<double>(gt.size());
  out.f1 = (out.precision + out.recall) > 0
               ? 2 * out.precision * out.recall /
                     (out.precision + out.recall)
               : 0.0;
  return out;
}

}  // namespace planepose::match
