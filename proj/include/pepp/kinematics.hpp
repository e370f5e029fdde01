#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pepp/geometry.hpp"

namespace pepp {

/// One revolute joint plus the fixed transform to the next keypoint frame.
/// Frame recursion: F_i = F_{i-1} * R(joint_axis_i, theta_i) * fixed_i.
struct ChainLink {
  RigidPose fixed;  // child keypoint frame relative to the rotated joint frame
  Vec3 joint_axis = Vec3::UnitZ();  // unit vector in the parent frame
};

struct KinematicChain {
  std::vector<ChainLink> links;
  std::string id = "chain";

  int n() const { return static_cast<int>(links.size()); }
  int k() const { return n() + 1; }  // base keypoint + one per joint

  void validate() const {
    for (const auto& link : links)
      if (std::abs(link.joint_axis.norm() - 1.0) > 1e-12)
        throw DataError("chain joint axis is not unit length");
  }
};

using JointVector = Eigen::VectorXd;

/// All keypoint frames, base first. frames[i] is F_i in the robot base frame.
inline std::vector<RigidPose> forward_frames(const KinematicChain& chain,
                                             const JointVector& joints) {
  if (joints.size() != chain.n())
    throw DimensionMismatch("joint vector length does not match chain");
  std::vector<RigidPose> frames(chain.k());
  frames[0] = RigidPose{};
  for (int i = 0; i < chain.n(); ++i) {
    RigidPose joint_rot;
    joint_rot.rotation =
        rotation_from_axis_angle(chain.links[i].joint_axis * joints(i));
    frames[i + 1] = frames[i] * joint_rot * chain.links[i].fixed;
  }
  return frames;
}

/// Keypoint positions: origins of the keypoint frames, base at (0,0,0).
inline std::vector<Vec3> forward_kinematics(const KinematicChain& chain,
                                            const JointVector& joints) {
  const auto frames = forward_frames(chain, joints);
  std::vector<Vec3> points(frames.size());
  for (size_t i = 0; i < frames.size(); ++i) points[i] = frames[i].translation;
  return points;
}

/// Geometric Jacobian of all keypoints, 3k x n: rows 3i..3i+2 hold
/// d p_i / d theta_j = a_j x (p_i - o_j) for j < i (zero otherwise), where
/// a_j is the world-frame joint axis and o_j the joint center.
inline Eigen::MatrixXd fk_jacobian(const KinematicChain& chain,
                                   const JointVector& joints) {
  const auto frames = forward_frames(chain, joints);
  const int k = chain.k();
  const int n = chain.n();
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(3 * k, n);
  for (int j = 0; j < n; ++j) {
    const Vec3 axis = frames[j].rotation * chain.links[j].joint_axis;
    const Vec3 origin = frames[j].translation;
    for (int i = j + 1; i < k; ++i)
      jac.block<3, 1>(3 * i, j) = axis.cross(frames[i].translation - origin);
  }
  return jac;
}

/// True iff every keypoint stays fixed (within 1e-9) as the last joint angle
/// varies — holds when the end-effector keypoint lies on the last axis.
inline bool last_joint_invariance_check(const KinematicChain& chain,
                                        const JointVector& joints) {
  if (chain.n() == 0) return true;
  JointVector probe = joints;
  probe(chain.n() - 1) = 0.0;
  const auto ref = forward_kinematics(chain, probe);
  for (const double angle : {1.3, -0.7, 2.9, 0.42}) {
    probe(chain.n() - 1) = angle;
    const auto moved = forward_kinematics(chain, probe);
    for (size_t i = 0; i < ref.size(); ++i)
      if ((moved[i] - ref[i]).norm() > 1e-9) return false;
  }
  return true;
}

inline double total_link_length(const KinematicChain& chain) {
  double total = 0.0;
  for (const auto& link : chain.links) total += link.fixed.translation.norm();
  return total;
}

// ---------------------------------------------------------------------------
// Chain description file: JSON with per-link translation, axis-angle rotation
// of the fixed transform, and the joint axis.
// ---------------------------------------------------------------------------

inline void save_chain(const KinematicChain& chain, const std::string& path) {
  nlohmann::json doc;
  doc["id"] = chain.id;
  doc["links"] = nlohmann::json::array();
  for (const auto& link : chain.links) {
    const Eigen::AngleAxisd aa(link.fixed.rotation);
    const Vec3 rot_aa = aa.angle() * aa.axis();
    doc["links"].push_back(
        {{"translation",
          {link.fixed.translation.x(), link.fixed.translation.y(),
           link.fixed.translation.z()}},
         {"rotation_axis_angle", {rot_aa.x(), rot_aa.y(), rot_aa.z()}},
         {"joint_axis",
          {link.joint_axis.x(), link.joint_axis.y(), link.joint_axis.z()}}});
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot write chain file: " + path);
  out << doc.dump(2) << "\n";
}

inline KinematicChain load_chain(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read chain file: " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed chain file " + path + ": " + e.what());
  }
  KinematicChain chain;
  chain.id = doc.value("id", "chain");
  for (const auto& entry : doc.at("links")) {
    ChainLink link;
    const auto t = entry.at("translation");
    link.fixed.translation = Vec3(t[0], t[1], t[2]);
    const auto r = entry.at("rotation_axis_angle");
    link.fixed.rotation = rotation_from_axis_angle(Vec3(r[0], r[1], r[2]));
    const auto a = entry.at("joint_axis");
    link.joint_axis = Vec3(a[0], a[1], a[2]);
    chain.links.push_back(link);
  }
  chain.validate();
  return chain;
}

// ---------------------------------------------------------------------------
// Reference chains used by the synthetic harness.
// ---------------------------------------------------------------------------

/// 3-joint planar arm, all axes z. The last link translates along its own
/// joint axis, so the end-effector keypoint is invariant to the last angle
/// and the network only needs to regress n-1 = 2 angles.
inline KinematicChain make_planar3() {
  KinematicChain chain;
  chain.id = "planar3";
  const auto link = [](double tx, double ty, double tz) {
    ChainLink l;
    l.fixed.translation = Vec3(tx, ty, tz);
    l.joint_axis = Vec3::UnitZ();
    return l;
  };
  chain.links = {link(0.32, 0.0, 0.0), link(0.26, 0.0, 0.0),
                 link(0.0, 0.0, 0.12)};
  return chain;
}

/// 5-joint planar arm (k=6 keypoints) for filtering experiments that need
/// more correspondences than the EPnP minimum.
inline KinematicChain make_planar5() {
  KinematicChain chain;
  chain.id = "planar5";
  const auto link = [](double tx, double ty, double tz) {
    ChainLink l;
    l.fixed.translation = Vec3(tx, ty, tz);
    l.joint_axis = Vec3::UnitZ();
    return l;
  };
  chain.links = {link(0.25, 0.0, 0.0), link(0.20, 0.0, 0.0),
                 link(0.16, 0.0, 0.0), link(0.13, 0.0, 0.0),
                 link(0.0, 0.0, 0.10)};
  return chain;
}

/// 7-joint spatial chain with alternating axes, shaped loosely like a
/// tabletop manipulator; end-effector keypoint on the last axis.
inline KinematicChain make_panda_like() {
  KinematicChain chain;
  chain.id = "panda_like";
  const auto link = [](const Vec3& t, const Vec3& axis) {
    ChainLink l;
    l.fixed.translation = t;
    l.joint_axis = axis.normalized();
    return l;
  };
  chain.links = {link({0.0, 0.0, 0.333}, Vec3::UnitZ()),
                 link({0.0, -0.05, 0.05}, Vec3::UnitY()),
                 link({0.0, 0.0, 0.316}, Vec3::UnitZ()),
                 link({0.083, 0.0, 0.06}, -Vec3::UnitY()),
                 link({-0.083, 0.0, 0.384}, Vec3::UnitZ()),
                 link({0.0, 0.0, 0.088}, -Vec3::UnitY()),
                 link({0.0, 0.0, 0.107}, Vec3::UnitZ())};
  return chain;
}

}  // namespace pepp
