#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pepp/geometry.hpp"

namespace pepp {

struct AddSample {
  double value = 0.0;  // meters, >= 0
  std::string image_id;
};

/// Mean camera-frame distance between predicted and ground-truth 3D joint
/// positions; index 0 is the robot base.
inline AddSample add(const RigidPose& pred_pose,
                     const std::vector<Vec3>& pred_joints3d_robot,
                     const std::vector<Vec3>& gt_joints3d_camera,
                     const std::string& image_id = "") {
  if (pred_joints3d_robot.size() != gt_joints3d_camera.size())
    throw DimensionMismatch("ADD requires matching point counts");
  if (pred_joints3d_robot.empty())
    throw DimensionMismatch("ADD requires at least one point");
  double acc = 0.0;
  for (size_t i = 0; i < pred_joints3d_robot.size(); ++i)
    acc += (pred_pose.apply(pred_joints3d_robot[i]) - gt_joints3d_camera[i])
               .norm();
  AddSample sample;
  sample.value = acc / static_cast<double>(pred_joints3d_robot.size());
  sample.image_id = image_id;
  return sample;
}

/// Area under the accuracy-vs-threshold curve over [0, max_threshold],
/// trapezoidal at `resolution` spacing, normalized to [0, 100].
inline double auc_of_add(const std::vector<AddSample>& samples,
                         double max_threshold = 0.1,
                         double resolution = 1e-4) {
  if (samples.empty()) throw EmptySampleSet("AUC needs at least one sample");
  if (max_threshold <= 0.0 || resolution <= 0.0)
    throw ConfigError("AUC threshold and resolution must be positive");
  std::vector<double> values;
  values.reserve(samples.size());
  for (const auto& s : samples) values.push_back(s.value);
  std::sort(values.begin(), values.end());

  const int steps = static_cast<int>(std::round(max_threshold / resolution));
  const double total = static_cast<double>(values.size());
  const auto accuracy = [&](double tau) {
    return static_cast<double>(std::upper_bound(values.begin(), values.end(),
                                                tau) -
                               values.begin()) /
           total;
  };
  double integral = 0.0;
  double prev = accuracy(0.0);
  for (int j = 1; j <= steps; ++j) {
    const double cur = accuracy(j * resolution);
    integral += 0.5 * (prev + cur) * resolution;
    prev = cur;
  }
  return 100.0 * integral / max_threshold;
}

/// Fraction of keypoints within each pixel threshold; ground-truth keypoints
/// that are absent or out of the image are excluded from the denominator.
inline std::map<double, double> pck(
    const std::vector<Vec2>& pred_kp,
    const std::vector<std::optional<Vec2>>& gt_kp,
    const std::vector<double>& thresholds, int image_w, int image_h) {
  if (pred_kp.size() != gt_kp.size())
    throw DimensionMismatch("PCK requires matching keypoint counts");
  std::vector<double> errors;
  for (size_t i = 0; i < gt_kp.size(); ++i) {
    if (!gt_kp[i]) continue;
    const Vec2& gt = *gt_kp[i];
    if (gt.x() < 0.0 || gt.x() >= image_w || gt.y() < 0.0 || gt.y() >= image_h)
      continue;
    errors.push_back((pred_kp[i] - gt).norm());
  }
  if (errors.empty())
    throw NoValidKeypoints("no in-image ground-truth keypoints");
  std::map<double, double> out;
  for (double t : thresholds) {
    int hit = 0;
    for (double e : errors)
      if (e <= t) ++hit;
    out[t] = static_cast<double>(hit) / static_cast<double>(errors.size());
  }
  return out;
}

struct EvalReport {
  double auc = 0.0;
  double mean_add = 0.0;
  std::map<double, double> pck;  // threshold px -> fraction
  int sample_count = 0;
  int failure_count = 0;
  double auc_max_threshold = 0.1;

  nlohmann::json to_json() const {
    nlohmann::json doc;
    doc["auc"] = auc;
    doc["mean_add"] = mean_add;
    doc["sample_count"] = sample_count;
    doc["failure_count"] = failure_count;
    doc["auc_max_threshold"] = auc_max_threshold;
    doc["pck"] = nlohmann::json::object();
    for (const auto& [threshold, fraction] : pck)
      doc["pck"][std::to_string(threshold)] = fraction;
    return doc;
  }

  static EvalReport from_json(const nlohmann::json& doc) {
    EvalReport report;
    report.auc = doc.at("auc");
    report.mean_add = doc.at("mean_add");
    report.sample_count = doc.at("sample_count");
    report.failure_count = doc.value("failure_count", 0);
    report.auc_max_threshold = doc.value("auc_max_threshold", 0.1);
    for (const auto& [key, value] : doc.at("pck").items())
      report.pck[std::stod(key)] = value;
    return report;
  }
};

inline double mean_add(const std::vector<AddSample>& samples) {
  if (samples.empty()) throw EmptySampleSet("mean ADD needs samples");
  double acc = 0.0;
  for (const auto& s : samples) acc += s.value;
  return acc / static_cast<double>(samples.size());
}

}  // namespace pepp
