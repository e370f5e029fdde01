#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <vector>

#include "pepp/errors.hpp"

namespace pepp {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Rigid transform from the robot base frame into the camera frame.
struct RigidPose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  RigidPose inverse() const {
    RigidPose inv;
    inv.rotation = rotation.transpose();
    inv.translation = -(rotation.transpose() * translation);
    return inv;
  }

  /// Orthonormality and det(+1) within `tol`.
  bool is_valid(double tol = 1e-9) const {
    const Mat3 err = rotation.transpose() * rotation - Mat3::Identity();
    return err.cwiseAbs().maxCoeff() < tol &&
           std::abs(rotation.determinant() - 1.0) < tol;
  }
};

/// Frame composition: (a*b) maps b-frame coordinates through b then a.
inline RigidPose operator*(const RigidPose& a, const RigidPose& b) {
  RigidPose out;
  out.rotation = a.rotation * b.rotation;
  out.translation = a.rotation * b.translation + a.translation;
  return out;
}

struct CameraIntrinsics {
  double fx = 1.0, fy = 1.0;
  double cx = 0.0, cy = 0.0;
  int width = 0, height = 0;

  bool is_valid() const {
    return fx > 0.0 && fy > 0.0 && cx >= 0.0 && cx < width && cy >= 0.0 &&
           cy < height;
  }
};

struct Correspondence2D3D {
  Vec3 point3d;             // robot frame, meters
  Vec2 point2d;             // pixels
  double confidence = 1.0;  // in [0,1]
};

/// Axis-aligned rectangle in continuous pixel coordinates.
struct RectF {
  double x = 0.0, y = 0.0;  // top-left corner
  double w = 0.0, h = 0.0;

  double area() const { return w * h; }
  double right() const { return x + w; }
  double bottom() const { return y + h; }

  bool contains(const Vec2& p) const {
    return p.x() >= x && p.x() < right() && p.y() >= y && p.y() < bottom();
  }

  RectF clipped(double width, double height) const {
    RectF out;
    out.x = std::max(0.0, x);
    out.y = std::max(0.0, y);
    out.w = std::min(width, right()) - out.x;
    out.h = std::min(height, bottom()) - out.y;
    out.w = std::max(0.0, out.w);
    out.h = std::max(0.0, out.h);
    return out;
  }
};

/// Rotation about a (not necessarily unit) axis-angle vector.
inline Mat3 rotation_from_axis_angle(const Vec3& aa) {
  const double angle = aa.norm();
  if (angle < 1e-300) return Mat3::Identity();
  return Eigen::AngleAxisd(angle, aa / angle).toRotationMatrix();
}

/// Nearest rotation matrix in Frobenius norm, det forced to +1.
inline Mat3 orthonormalize(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 r = svd.matrixU() * svd.matrixV().transpose();
  if (r.determinant() < 0.0) {
    Mat3 flip = Mat3::Identity();
    flip(2, 2) = -1.0;
    r = svd.matrixU() * flip * svd.matrixV().transpose();
  }
  return r;
}

namespace detail {
constexpr double kMinDepth = 1e-9;
}

inline Vec2 project_point(const RigidPose& pose, const CameraIntrinsics& K,
                          const Vec3& p) {
  const Vec3 pc = pose.apply(p);
  if (pc.z() <= detail::kMinDepth)
    throw NonPositiveDepth("projected point has non-positive depth");
  return {K.fx * pc.x() / pc.z() + K.cx, K.fy * pc.y() / pc.z() + K.cy};
}

inline std::vector<Vec2> project(const RigidPose& pose,
                                 const CameraIntrinsics& K,
                                 const std::vector<Vec3>& points3d) {
  std::vector<Vec2> out;
  out.reserve(points3d.size());
  for (const Vec3& p : points3d) out.push_back(project_point(pose, K, p));
  return out;
}

/// Back-projects a pixel at a known camera-frame depth into the robot frame.
inline Vec3 unproject_pixel(const RigidPose& pose, const CameraIntrinsics& K,
                            const Vec2& pixel, double depth) {
  if (depth <= detail::kMinDepth)
    throw NonPositiveDepth("unproject requires positive depth");
  const Vec3 pc((pixel.x() - K.cx) / K.fx * depth,
                (pixel.y() - K.cy) / K.fy * depth, depth);
  return pose.inverse().apply(pc);
}

inline double reprojection_rmse(const RigidPose& pose,
                                const CameraIntrinsics& K,
                                const std::vector<Correspondence2D3D>& corr) {
  if (corr.empty())
    throw TooFewPoints("reprojection_rmse requires at least one point");
  double acc = 0.0;
  for (const auto& c : corr) {
    const Vec2 proj = project_point(pose, K, c.point3d);
    acc += (proj - c.point2d).squaredNorm();
  }
  return std::sqrt(acc / static_cast<double>(corr.size()));
}

// ---------------------------------------------------------------------------
// EPnP (control-point formulation) with Gauss-Newton reprojection refinement.
// ---------------------------------------------------------------------------

namespace epnp_detail {

// Reprojection RMSE that tolerates points behind the camera by reporting a
// huge error instead of throwing; used for candidate ranking only.
inline double safe_reproj_error(const RigidPose& pose,
                                const CameraIntrinsics& K,
                                const std::vector<Correspondence2D3D>& corr) {
  double acc = 0.0;
  for (const auto& c : corr) {
    const Vec3 pc = pose.apply(c.point3d);
    if (pc.z() <= detail::kMinDepth) return 1e30;
    const Vec2 proj(K.fx * pc.x() / pc.z() + K.cx,
                    K.fy * pc.y() / pc.z() + K.cy);
    acc += (proj - c.point2d).squaredNorm();
  }
  return std::sqrt(acc / static_cast<double>(corr.size()));
}

// Rigid alignment pw -> pc (Horn's method via SVD of the cross-covariance).
inline RigidPose align_rigid(const std::vector<Vec3>& pw,
                             const std::vector<Vec3>& pc) {
  const auto n = static_cast<double>(pw.size());
  Vec3 cw = Vec3::Zero(), cc = Vec3::Zero();
  for (size_t i = 0; i < pw.size(); ++i) {
    cw += pw[i];
    cc += pc[i];
  }
  cw /= n;
  cc /= n;
  Mat3 h = Mat3::Zero();
  for (size_t i = 0; i < pw.size(); ++i)
    h += (pw[i] - cw) * (pc[i] - cc).transpose();
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 r = svd.matrixV() * svd.matrixU().transpose();
  if (r.determinant() < 0.0) {
    Mat3 flip = Mat3::Identity();
    flip(2, 2) = -1.0;
    r = svd.matrixV() * flip * svd.matrixU().transpose();
  }
  RigidPose pose;
  pose.rotation = r;
  pose.translation = cc - r * cw;
  return pose;
}

// Squared distances between all control-point pairs.
inline Eigen::VectorXd pair_sq_dists(const std::vector<Vec3>& cps) {
  const int nc = static_cast<int>(cps.size());
  Eigen::VectorXd d(nc * (nc - 1) / 2);
  int idx = 0;
  for (int i = 0; i < nc; ++i)
    for (int j = i + 1; j < nc; ++j) d(idx++) = (cps[i] - cps[j]).squaredNorm();
  return d;
}

// Differences v_k[i] - v_k[j] for each null-space vector k and pair (i,j).
inline std::vector<std::vector<Vec3>> basis_pair_diffs(
    const Eigen::MatrixXd& basis, int nc) {
  const int nb = static_cast<int>(basis.cols());
  std::vector<std::vector<Vec3>> diffs(nb);
  for (int k = 0; k < nb; ++k) {
    for (int i = 0; i < nc; ++i)
      for (int j = i + 1; j < nc; ++j) {
        const Vec3 vi = basis.block<3, 1>(3 * i, k);
        const Vec3 vj = basis.block<3, 1>(3 * j, k);
        diffs[k].push_back(vi - vj);
      }
  }
  return diffs;
}

// Gauss-Newton on the control-point distance constraints over beta.
inline Eigen::VectorXd refine_betas(const std::vector<std::vector<Vec3>>& vd,
                                    const Eigen::VectorXd& dist_sq,
                                    Eigen::VectorXd beta, int iters = 8) {
  const int nb = static_cast<int>(vd.size());
  const int np = static_cast<int>(dist_sq.size());
  for (int it = 0; it < iters; ++it) {
    Eigen::MatrixXd jac(np, nb);
    Eigen::VectorXd res(np);
    for (int p = 0; p < np; ++p) {
      Vec3 acc = Vec3::Zero();
      for (int k = 0; k < nb; ++k) acc += beta(k) * vd[k][p];
      res(p) = dist_sq(p) - acc.squaredNorm();
      for (int k = 0; k < nb; ++k) jac(p, k) = 2.0 * acc.dot(vd[k][p]);
    }
    const Eigen::VectorXd step =
        (jac.transpose() * jac +
         1e-12 * Eigen::MatrixXd::Identity(nb, nb))
            .ldlt()
            .solve(jac.transpose() * res);
    beta += step;
    if (step.norm() < 1e-14) break;
  }
  return beta;
}

// Camera-frame control points for a given beta, sign-fixed so that the
// reconstructed scene points have positive mean depth.
inline std::vector<Vec3> control_points_from_beta(
    const Eigen::MatrixXd& basis, const Eigen::VectorXd& beta, int nc,
    const Eigen::MatrixXd& alphas) {
  Eigen::VectorXd x = basis * beta;
  // Mean depth of reconstructed points decides the global sign.
  double zsum = 0.0;
  for (int i = 0; i < alphas.rows(); ++i) {
    double z = 0.0;
    for (int j = 0; j < nc; ++j) z += alphas(i, j) * x(3 * j + 2);
    zsum += z;
  }
  if (zsum < 0.0) x = -x;
  std::vector<Vec3> cps(nc);
  for (int j = 0; j < nc; ++j) cps[j] = x.segment<3>(3 * j);
  return cps;
}

// Gauss-Newton on reprojection residuals over SE(3), left-multiplicative
// so(3) rotation updates.
inline RigidPose refine_pose_gn(RigidPose pose, const CameraIntrinsics& K,
                                const std::vector<Correspondence2D3D>& corr,
                                int iters, double step_tol) {
  for (int it = 0; it < iters; ++it) {
    Eigen::Matrix<double, 6, 6> jtj = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> jtr = Eigen::Matrix<double, 6, 1>::Zero();
    bool feasible = true;
    for (const auto& c : corr) {
      const Vec3 pc = pose.apply(c.point3d);
      if (pc.z() <= detail::kMinDepth) {
        feasible = false;
        break;
      }
      const double iz = 1.0 / pc.z();
      Eigen::Matrix<double, 2, 3> dpi;
      dpi << K.fx * iz, 0.0, -K.fx * pc.x() * iz * iz,
             0.0, K.fy * iz, -K.fy * pc.y() * iz * iz;
      const Vec3 rp = pose.rotation * c.point3d;
      Eigen::Matrix<double, 3, 6> dpc;
      dpc.block<3, 3>(0, 0) << 0.0, rp.z(), -rp.y(),
                               -rp.z(), 0.0, rp.x(),
                               rp.y(), -rp.x(), 0.0;
      dpc.block<3, 3>(0, 3) = Mat3::Identity();
      const Eigen::Matrix<double, 2, 6> jac = dpi * dpc;
      const Vec2 res(K.fx * pc.x() * iz + K.cx - c.point2d.x(),
                     K.fy * pc.y() * iz + K.cy - c.point2d.y());
      jtj += jac.transpose() * jac;
      jtr += jac.transpose() * res;
    }
    if (!feasible) break;
    const Eigen::Matrix<double, 6, 1> step =
        (jtj + 1e-14 * Eigen::Matrix<double, 6, 6>::Identity())
            .ldlt()
            .solve(-jtr);
    if (!step.allFinite()) break;
    pose.rotation = rotation_from_axis_angle(step.head<3>()) * pose.rotation;
    pose.translation += step.tail<3>();
    if (step.norm() < step_tol) break;
  }
  return pose;
}

}  // namespace epnp_detail

struct EpnpOptions {
  int gauss_newton_iters = 10;    // pose refinement iterations
  double step_tol = 1e-12;        // stop when the update norm falls below
  double planar_cond_limit = 1e8; // covariance condition forcing 3-point basis
};

namespace epnp_detail {

// Candidate poses from one control-point basis (3 planar / 4 spatial control
// points). With few points the M-matrix null space is larger than one
// dimension and the closed-form beta cases only approximate the mixing, so
// the beta search also restarts from deterministic random seeds.
inline void collect_basis_candidates(
    const std::vector<Correspondence2D3D>& corr, const CameraIntrinsics& K,
    const Vec3& centroid, const Eigen::SelfAdjointEigenSolver<Mat3>& eig,
    const Vec3& evals, bool planar, std::vector<RigidPose>& out) {
  const int n = static_cast<int>(corr.size());
  const int nc = planar ? 3 : 4;

  std::vector<Vec3> cw;
  cw.push_back(centroid);
  for (int a = 0; a < nc - 1; ++a) {
    const int col = 2 - a;  // descending eigenvalue order
    cw.push_back(centroid +
                 std::sqrt(evals(col)) * eig.eigenvectors().col(col));
  }

  // Barycentric coordinates of every point in the control-point basis.
  Eigen::MatrixXd alphas(n, nc);
  if (!planar) {
    Mat3 basis;
    for (int j = 0; j < 3; ++j) basis.col(j) = cw[j + 1] - cw[0];
    const Mat3 basis_inv = basis.inverse();
    for (int i = 0; i < n; ++i) {
      const Vec3 b = basis_inv * (corr[i].point3d - cw[0]);
      alphas(i, 0) = 1.0 - b.sum();
      alphas.block<1, 3>(i, 1) = b.transpose();
    }
  } else {
    Eigen::Matrix<double, 3, 2> basis;
    basis.col(0) = cw[1] - cw[0];
    basis.col(1) = cw[2] - cw[0];
    const Eigen::Matrix2d gram = basis.transpose() * basis;
    const Eigen::Matrix2d gram_inv = gram.inverse();
    for (int i = 0; i < n; ++i) {
      const Eigen::Vector2d b =
          gram_inv * (basis.transpose() * (corr[i].point3d - cw[0]));
      alphas(i, 0) = 1.0 - b.sum();
      alphas(i, 1) = b(0);
      alphas(i, 2) = b(1);
    }
  }

  // M matrix of the projection constraints.
  Eigen::MatrixXd m(2 * n, 3 * nc);
  for (int i = 0; i < n; ++i) {
    const double u = corr[i].point2d.x();
    const double v = corr[i].point2d.y();
    for (int j = 0; j < nc; ++j) {
      const double a = alphas(i, j);
      m(2 * i, 3 * j + 0) = a * K.fx;
      m(2 * i, 3 * j + 1) = 0.0;
      m(2 * i, 3 * j + 2) = a * (K.cx - u);
      m(2 * i + 1, 3 * j + 0) = 0.0;
      m(2 * i + 1, 3 * j + 1) = a * K.fy;
      m(2 * i + 1, 3 * j + 2) = a * (K.cy - v);
    }
  }
  const Eigen::MatrixXd mtm = m.transpose() * m;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> null_eig(mtm);
  const int nb = nc;  // candidate null-space size: 4 spatial, 3 planar
  const Eigen::MatrixXd basis = null_eig.eigenvectors().leftCols(nb);

  const Eigen::VectorXd dist_sq = epnp_detail::pair_sq_dists(cw);
  const auto vdiffs = epnp_detail::basis_pair_diffs(basis, nc);
  const int np = static_cast<int>(dist_sq.size());

  // L matrix over beta products: columns ordered as b(k1)*b(k2), k1<=k2.
  const auto prod_col = [&](int k1, int k2) {
    Eigen::VectorXd col(np);
    for (int p = 0; p < np; ++p)
      col(p) = (k1 == k2 ? 1.0 : 2.0) * vdiffs[k1][p].dot(vdiffs[k2][p]);
    return col;
  };

  std::vector<Eigen::VectorXd> beta_candidates;

  // Case N=1: scale on the dominant null vector.
  {
    double num = 0.0, den = 0.0;
    for (int p = 0; p < np; ++p) {
      num += std::sqrt(dist_sq(p)) * vdiffs[0][p].norm();
      den += vdiffs[0][p].squaredNorm();
    }
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(nb);
    beta(0) = den > 0.0 ? num / den : 0.0;
    beta_candidates.push_back(beta);
  }

  // Case N=2: unknowns (b11, b12, b22).
  if (nb >= 2) {
    Eigen::MatrixXd l(np, 3);
    l.col(0) = prod_col(0, 0);
    l.col(1) = prod_col(0, 1);
    l.col(2) = prod_col(1, 1);
    const Eigen::VectorXd sol =
        l.jacobiSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(dist_sq);
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(nb);
    beta(0) = std::sqrt(std::abs(sol(0)));
    beta(1) = (sol(0) < 0.0 ? -1.0 : 1.0) *
              std::sqrt(std::abs(sol(2))) * (sol(1) < 0.0 ? -1.0 : 1.0);
    if (beta(0) > 0.0) beta(1) = sol(1) / beta(0);
    beta_candidates.push_back(beta);
  }

  // Case N=3: unknowns (b11, b12, b22, b13, b23).
  if (nb >= 3 && np >= 5) {
    Eigen::MatrixXd l(np, 5);
    l.col(0) = prod_col(0, 0);
    l.col(1) = prod_col(0, 1);
    l.col(2) = prod_col(1, 1);
    l.col(3) = prod_col(0, 2);
    l.col(4) = prod_col(1, 2);
    const Eigen::VectorXd sol =
        l.jacobiSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(dist_sq);
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(nb);
    beta(0) = std::sqrt(std::abs(sol(0)));
    if (beta(0) > 0.0) {
      beta(1) = sol(1) / beta(0);
      beta(2) = sol(3) / beta(0);
    }
    beta_candidates.push_back(beta);
  }

  // Case N=4: unknowns (b11, b12, b13, b14).
  if (nb >= 4) {
    Eigen::MatrixXd l(np, 4);
    l.col(0) = prod_col(0, 0);
    l.col(1) = prod_col(0, 1);
    l.col(2) = prod_col(0, 2);
    l.col(3) = prod_col(0, 3);
    const Eigen::VectorXd sol =
        l.jacobiSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(dist_sq);
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(nb);
    beta(0) = std::sqrt(std::abs(sol(0)));
    if (beta(0) > 0.0) {
      beta(1) = sol(1) / beta(0);
      beta(2) = sol(2) / beta(0);
      beta(3) = sol(3) / beta(0);
    }
    beta_candidates.push_back(beta);
  }

  // Deterministic multi-start restarts around the N=1 scale estimate.
  {
    const double scale = std::max(std::abs(beta_candidates[0](0)), 1e-3);
    std::mt19937_64 restart_rng(0x9e3779b97f4a7c15ull);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int r = 0; r < 8; ++r) {
      Eigen::VectorXd beta(nb);
      for (int k = 0; k < nb; ++k) beta(k) = scale * u(restart_rng);
      beta_candidates.push_back(beta);
    }
  }

  std::vector<Vec3> pw(n);
  for (int i = 0; i < n; ++i) pw[i] = corr[i].point3d;

  for (auto& beta0 : beta_candidates) {
    const Eigen::VectorXd beta = refine_betas(vdiffs, dist_sq, beta0);
    const std::vector<Vec3> cc =
        control_points_from_beta(basis, beta, nc, alphas);
    std::vector<Vec3> pc(n);
    for (int i = 0; i < n; ++i) {
      Vec3 p = Vec3::Zero();
      for (int j = 0; j < nc; ++j) p += alphas(i, j) * cc[j];
      pc[i] = p;
    }
    out.push_back(align_rigid(pw, pc));
  }
}

}  // namespace epnp_detail

/// Pose from 2D-3D correspondences: EPnP candidates over the standard beta
/// parameterizations (both control-point bases when the point set is close
/// to planar), each refined by Gauss-Newton on reprojection residuals, best
/// final reprojection error wins. Output rotation is SVD-orthonormalized.
inline RigidPose solve_epnp(const std::vector<Correspondence2D3D>& corr,
                            const CameraIntrinsics& K,
                            const EpnpOptions& opts = {}) {
  const int n = static_cast<int>(corr.size());
  if (n < 4)
    throw TooFewPoints("EPnP requires a minimum of four 2D-3D correspondences");

  // Principal-axis frame of the 3D point cloud.
  Vec3 centroid = Vec3::Zero();
  for (const auto& c : corr) centroid += c.point3d;
  centroid /= static_cast<double>(n);
  Mat3 cov = Mat3::Zero();
  for (const auto& c : corr) {
    const Vec3 d = c.point3d - centroid;
    cov += d * d.transpose();
  }
  cov /= static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);  // ascending eigenvalues
  const Vec3 evals = eig.eigenvalues().cwiseMax(0.0);
  if (evals(1) <= evals(2) * 1e-12 || evals(2) <= 0.0)
    throw DegenerateConfiguration("3D points are collinear");

  const bool exactly_planar = evals(0) < evals(2) / opts.planar_cond_limit;
  std::vector<RigidPose> candidates;
  if (!exactly_planar)
    epnp_detail::collect_basis_candidates(corr, K, centroid, eig, evals,
                                          /*planar=*/false, candidates);
  // Small point sets and flat clouds condition the 4-point basis badly; the
  // 3-point basis is a cheap second source of initial poses.
  if (exactly_planar || n <= 5 || evals(0) < evals(2) / 100.0)
    epnp_detail::collect_basis_candidates(corr, K, centroid, eig, evals,
                                          /*planar=*/true, candidates);

  RigidPose best;
  double best_err = std::numeric_limits<double>::infinity();
  for (const RigidPose& candidate : candidates) {
    const RigidPose refined = epnp_detail::refine_pose_gn(
        candidate, K, corr, opts.gauss_newton_iters, opts.step_tol);
    const double err = epnp_detail::safe_reproj_error(refined, K, corr);
    if (err < best_err) {
      best_err = err;
      best = refined;
    }
  }
  if (!std::isfinite(best_err))
    throw DegenerateConfiguration("EPnP produced no viable pose candidate");
  best.rotation = orthonormalize(best.rotation);
  return best;
}

}  // namespace pepp
