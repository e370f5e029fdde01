#pragma once

#include <vector>

#include <nlohmann/json.hpp>

#include "pepp/geometry.hpp"
#include "pepp/heatmap.hpp"
#include "pepp/kinematics.hpp"

namespace pepp {

// ---------------------------------------------------------------------------
// Pre-training L1 over masked patch embeddings. Embedding matrices hold one
// token per column (d x M).
// ---------------------------------------------------------------------------

struct PretrainLoss {
  double value = 0.0;
  Eigen::MatrixXd grad_predicted;  // d x M, zero on context columns
};

inline PretrainLoss pretrain_l1(const Eigen::MatrixXd& predicted,
                                const Eigen::MatrixXd& target,
                                const std::vector<int>& masked) {
  if (predicted.rows() != target.rows() || predicted.cols() != target.cols())
    throw DimensionMismatch("pretrain_l1 embeddings must share shape");
  if (masked.empty()) throw EmptyMaskSet("pretrain_l1 needs masked patches");
  PretrainLoss out;
  out.grad_predicted = Eigen::MatrixXd::Zero(predicted.rows(),
                                             predicted.cols());
  const double inv = 1.0 / static_cast<double>(masked.size());
  for (int col : masked) {
    if (col < 0 || col >= predicted.cols())
      throw DimensionMismatch("masked index out of range");
    const Eigen::VectorXd diff = predicted.col(col) - target.col(col);
    out.value += inv * diff.cwiseAbs().sum();
    out.grad_predicted.col(col) =
        inv * diff.unaryExpr([](double v) {
          return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Focal heatmap loss (CornerNet form).
// ---------------------------------------------------------------------------

struct FocalParams {
  double alpha = 2.0;
  double beta = 4.0;
};

struct FocalLoss {
  double value = 0.0;
  HeatmapStack grad_pred;
};

namespace detail {
constexpr double kFocalClamp = 1e-6;
}

/// -(1/S) * sum over pixels of
///   (1-p)^alpha * log(p)                 where y == 1
///   (1-y)^beta * p^alpha * log(1-p)      otherwise
/// S = #pixels with y == 1, or 1 if none exist. p is clamped to
/// [1e-6, 1-1e-6]; the gradient is zero where the clamp is active.
inline FocalLoss focal_loss(const HeatmapStack& pred, const HeatmapStack& gt,
                            const FocalParams& params = {}) {
  if (pred.height != gt.height || pred.width != gt.width || pred.k() != gt.k())
    throw ShapeMismatch("focal_loss heatmap shapes differ");
  int peak_count = 0;
  for (const auto& channel : gt.channels)
    peak_count += static_cast<int>((channel.array() == 1.0).count());
  const double s = peak_count > 0 ? static_cast<double>(peak_count) : 1.0;

  FocalLoss out;
  out.grad_pred = HeatmapStack::zeros(pred.height, pred.width, pred.k());
  const double lo = detail::kFocalClamp;
  const double hi = 1.0 - detail::kFocalClamp;
  double sum = 0.0;
  for (int c = 0; c < pred.k(); ++c)
    for (int y = 0; y < pred.height; ++y)
      for (int x = 0; x < pred.width; ++x) {
        const double raw = pred.channels[c](y, x);
        const double p = std::clamp(raw, lo, hi);
        const double gy = gt.channels[c](y, x);
        double term, dterm;
        if (gy == 1.0) {
          const double q = 1.0 - p;
          term = std::pow(q, params.alpha) * std::log(p);
          dterm = -params.alpha * std::pow(q, params.alpha - 1.0) *
                      std::log(p) +
                  std::pow(q, params.alpha) / p;
        } else {
          const double w = std::pow(1.0 - gy, params.beta);
          term = w * std::pow(p, params.alpha) * std::log(1.0 - p);
          dterm = w * (params.alpha * std::pow(p, params.alpha - 1.0) *
                           std::log(1.0 - p) -
                       std::pow(p, params.alpha) / (1.0 - p));
        }
        sum += term;
        if (raw > lo && raw < hi)
          out.grad_pred.channels[c](y, x) = -dterm / s;
      }
  out.value = -sum / s;
  return out;
}

// ---------------------------------------------------------------------------
// Joint-angle MSE in mean-variance-normalized space.
// ---------------------------------------------------------------------------

struct JointNormalizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;

  void validate() const {
    if (mean.size() != std.size())
      throw DimensionMismatch("normalizer mean/std length mismatch");
    for (int i = 0; i < std.size(); ++i)
      if (std(i) <= 1e-8)
        throw ConfigError("normalizer std must exceed 1e-8");
  }

  Eigen::VectorXd normalize(const Eigen::VectorXd& raw) const {
    if (raw.size() != mean.size())
      throw DimensionMismatch("normalizer input length mismatch");
    return (raw - mean).cwiseQuotient(std);
  }

  Eigen::VectorXd denormalize(const Eigen::VectorXd& normed) const {
    if (normed.size() != mean.size())
      throw DimensionMismatch("normalizer input length mismatch");
    return normed.cwiseProduct(std) + mean;
  }

  static JointNormalizer fit(const std::vector<Eigen::VectorXd>& samples) {
    if (samples.empty()) throw EmptySampleSet("normalizer fit needs samples");
    const auto n = samples[0].size();
    JointNormalizer norm;
    norm.mean = Eigen::VectorXd::Zero(n);
    for (const auto& s : samples) norm.mean += s;
    norm.mean /= static_cast<double>(samples.size());
    Eigen::VectorXd var = Eigen::VectorXd::Zero(n);
    for (const auto& s : samples)
      var += (s - norm.mean).cwiseAbs2();
    var /= static_cast<double>(samples.size());
    // Floor keeps degenerate joints (constant in the data) well-posed.
    norm.std = var.cwiseSqrt().cwiseMax(1e-6);
    return norm;
  }

  nlohmann::json to_json() const {
    nlohmann::json doc;
    doc["mean"] = std::vector<double>(mean.data(), mean.data() + mean.size());
    doc["std"] = std::vector<double>(std.data(), std.data() + std.size());
    return doc;
  }

  static JointNormalizer from_json(const nlohmann::json& doc) {
    JointNormalizer norm;
    const auto m = doc.at("mean").get<std::vector<double>>();
    const auto s = doc.at("std").get<std::vector<double>>();
    norm.mean = Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
    norm.std = Eigen::Map<const Eigen::VectorXd>(s.data(), s.size());
    norm.validate();
    return norm;
  }
};

struct JointMseLoss {
  double value = 0.0;
  Eigen::VectorXd grad_pred;
};

/// (1/n) || pred - normalize(gt) ||^2 with pred already in normalized space.
inline JointMseLoss joint_mse(const Eigen::VectorXd& pred,
                              const Eigen::VectorXd& gt_raw,
                              const JointNormalizer& normalizer) {
  if (pred.size() != gt_raw.size())
    throw DimensionMismatch("joint_mse length mismatch");
  const Eigen::VectorXd residual = pred - normalizer.normalize(gt_raw);
  JointMseLoss out;
  const double n = static_cast<double>(pred.size());
  out.value = residual.squaredNorm() / n;
  out.grad_pred = 2.0 * residual / n;
  return out;
}

// ---------------------------------------------------------------------------
// Loss curriculum: L = L_joint + alpha(t) * L_kp.
// ---------------------------------------------------------------------------

inline double curriculum_weight(int epoch) {
  if (epoch < 5) return 0.0001;
  if (epoch < 10) return 0.01;
  if (epoch < 40) return 0.1;
  return 1.0;
}

// ---------------------------------------------------------------------------
// Self-supervised reprojection loss for sim-to-real fine-tuning.
// ---------------------------------------------------------------------------

struct SslLoss {
  double value = 0.0;              // px^2
  Eigen::VectorXd grad_joints;     // through FK + projection, pose frozen
  std::vector<Vec2> grad_pred_kp;  // direct residual path, pose frozen
  RigidPose pose;                  // the internally solved EPnP pose
};

/// Solves a pose from (pred_kp, FK(joints)) with EPnP, projects the FK
/// points under it, and returns (1/k) * sum ||pred_kp - proj||^2. The pose
/// is a constant of the backward pass: gradients flow through FK and the
/// projection only (stop-gradient PnP).
inline SslLoss ssl_reprojection(const std::vector<Vec2>& pred_kp,
                                const JointVector& joints,
                                const KinematicChain& chain,
                                const CameraIntrinsics& intrinsics) {
  const int k = chain.k();
  if (static_cast<int>(pred_kp.size()) != k)
    throw DimensionMismatch("ssl_reprojection keypoint count mismatch");
  const std::vector<Vec3> points = forward_kinematics(chain, joints);
  std::vector<Correspondence2D3D> corr(k);
  for (int i = 0; i < k; ++i) {
    corr[i].point3d = points[i];
    corr[i].point2d = pred_kp[i];
  }
  SslLoss out;
  out.pose = solve_epnp(corr, intrinsics);
  out.grad_joints = Eigen::VectorXd::Zero(joints.size());
  out.grad_pred_kp.assign(k, Vec2::Zero());

  const Eigen::MatrixXd fk_jac = fk_jacobian(chain, joints);
  const double inv_k = 1.0 / static_cast<double>(k);
  for (int i = 0; i < k; ++i) {
    const Vec3 pc = out.pose.apply(points[i]);
    if (pc.z() <= 1e-9)
      throw NonPositiveDepth("ssl_reprojection point behind camera");
    const double iz = 1.0 / pc.z();
    const Vec2 proj(intrinsics.fx * pc.x() * iz + intrinsics.cx,
                    intrinsics.fy * pc.y() * iz + intrinsics.cy);
    const Vec2 residual = pred_kp[i] - proj;
    out.value += inv_k * residual.squaredNorm();
    out.grad_pred_kp[i] = 2.0 * inv_k * residual;

    // d proj / d p_camera, then chain through the frozen pose and FK.
    Eigen::Matrix<double, 2, 3> dpi;
    dpi << intrinsics.fx * iz, 0.0, -intrinsics.fx * pc.x() * iz * iz,
           0.0, intrinsics.fy * iz, -intrinsics.fy * pc.y() * iz * iz;
    const Eigen::Matrix<double, 2, Eigen::Dynamic> dproj_djoints =
        dpi * out.pose.rotation * fk_jac.middleRows(3 * i, 3);
    out.grad_joints +=
        (-2.0 * inv_k) * (dproj_djoints.transpose() * residual);
  }
  return out;
}

}  // namespace pepp
