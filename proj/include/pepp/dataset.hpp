#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pepp/image.hpp"
#include "pepp/kinematics.hpp"

namespace pepp {

// ---------------------------------------------------------------------------
// JSON helpers shared by records, manifests, and reports.
// ---------------------------------------------------------------------------

inline nlohmann::json pose_to_json(const RigidPose& pose) {
  nlohmann::json r = nlohmann::json::array();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r.push_back(pose.rotation(i, j));
  return {{"rotation", r},
          {"translation",
           {pose.translation.x(), pose.translation.y(), pose.translation.z()}}};
}

inline RigidPose pose_from_json(const nlohmann::json& j) {
  RigidPose pose;
  const auto& r = j.at("rotation");
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) pose.rotation(i, k) = r.at(3 * i + k);
  const auto& t = j.at("translation");
  pose.translation = Vec3(t.at(0), t.at(1), t.at(2));
  return pose;
}

inline nlohmann::json intrinsics_to_json(const CameraIntrinsics& K) {
  return {{"fx", K.fx}, {"fy", K.fy},         {"cx", K.cx},
          {"cy", K.cy}, {"width", K.width},   {"height", K.height}};
}

inline CameraIntrinsics intrinsics_from_json(const nlohmann::json& j) {
  CameraIntrinsics K;
  K.fx = j.at("fx");
  K.fy = j.at("fy");
  K.cx = j.at("cx");
  K.cy = j.at("cy");
  K.width = j.at("width");
  K.height = j.at("height");
  return K;
}

// ---------------------------------------------------------------------------
// Sample record: one annotated image.
// ---------------------------------------------------------------------------

struct SampleRecord {
  std::string image_path;  // relative to the dataset directory
  CameraIntrinsics intrinsics;
  JointVector gt_joints;
  RigidPose gt_pose;
  std::vector<std::optional<Vec2>> gt_keypoints_2d;
  RectF bbox;
  std::string chain_id;

  nlohmann::json to_json() const {
    nlohmann::json kps = nlohmann::json::array();
    for (const auto& kp : gt_keypoints_2d) {
      if (kp)
        kps.push_back({kp->x(), kp->y()});
      else
        kps.push_back(nullptr);
    }
    std::vector<double> joints(gt_joints.data(),
                               gt_joints.data() + gt_joints.size());
    return {{"image", image_path},
            {"intrinsics", intrinsics_to_json(intrinsics)},
            {"joints", joints},
            {"pose", pose_to_json(gt_pose)},
            {"keypoints", kps},
            {"bbox", {bbox.x, bbox.y, bbox.w, bbox.h}},
            {"chain_id", chain_id}};
  }

  static SampleRecord from_json(const nlohmann::json& j) {
    SampleRecord rec;
    rec.image_path = j.at("image").get<std::string>();
    rec.intrinsics = intrinsics_from_json(j.at("intrinsics"));
    const auto joints = j.at("joints").get<std::vector<double>>();
    rec.gt_joints = Eigen::Map<const Eigen::VectorXd>(
        joints.data(), static_cast<Eigen::Index>(joints.size()));
    rec.gt_pose = pose_from_json(j.at("pose"));
    for (const auto& kp : j.at("keypoints")) {
      if (kp.is_null())
        rec.gt_keypoints_2d.push_back(std::nullopt);
      else
        rec.gt_keypoints_2d.push_back(Vec2(kp.at(0), kp.at(1)));
    }
    const auto& b = j.at("bbox");
    rec.bbox = RectF{b.at(0), b.at(1), b.at(2), b.at(3)};
    rec.chain_id = j.at("chain_id").get<std::string>();
    return rec;
  }
};

struct Dataset {
  std::filesystem::path directory;
  KinematicChain chain;
  std::vector<SampleRecord> records;

  ImageGray load_image(const SampleRecord& rec) const {
    return load_pgm((directory / rec.image_path).string());
  }
};

inline void save_dataset(const Dataset& dataset) {
  std::ofstream out(dataset.directory / "records.jsonl");
  if (!out) throw DataError("cannot write dataset records");
  for (const auto& rec : dataset.records) out << rec.to_json().dump() << "\n";
  save_chain(dataset.chain, (dataset.directory / "chain.json").string());
}

inline Dataset load_dataset(const std::string& directory) {
  Dataset dataset;
  dataset.directory = directory;
  dataset.chain = load_chain(
      (dataset.directory / "chain.json").string());
  std::ifstream in(dataset.directory / "records.jsonl");
  if (!in) throw DataError("dataset records missing: " + directory);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      dataset.records.push_back(SampleRecord::from_json(
          nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception&) {
      throw DataError("malformed dataset record in " + directory);
    }
  }
  if (dataset.records.empty())
    throw DataError("dataset has no records: " + directory);
  return dataset;
}

// ---------------------------------------------------------------------------
// Synthetic scene generator: the arm is drawn as anti-aliased link strokes
// with Gaussian keypoint blobs, plus a base-frame stub so the global yaw is
// visible (otherwise base rotation and camera yaw would be confounded).
// ---------------------------------------------------------------------------

struct CameraDistribution {
  int image_size = 64;
  double focal = 72.0;
  double min_z = 1.1, max_z = 1.5;
  double min_tilt = 0.5, max_tilt = 0.9;     // rotation about camera x
  double yaw_center = 0.0, yaw_range = 0.5;  // rotation about robot z
  double xy_jitter = 0.06;
  double joint_range = 1.1;  // joints drawn uniform in +-joint_range

  CameraIntrinsics intrinsics() const {
    CameraIntrinsics K;
    K.fx = K.fy = focal;
    K.cx = K.cy = image_size / 2.0;
    K.width = K.height = image_size;
    return K;
  }
};

namespace data_detail {

constexpr double kBlobSigma = 1.3;
constexpr double kStrokeHalfWidth = 1.2;
constexpr double kStrokeIntensity = 0.75;
constexpr double kStubIntensity = 0.55;
constexpr uint64_t kSampleSeedStride = 0x9e3779b97f4a7c15ull;

struct Scene {
  RigidPose pose;
  JointVector joints;
  std::vector<Vec3> points;
  std::vector<Vec2> pixels;
};

inline Scene sample_scene(const KinematicChain& chain,
                          const CameraDistribution& dist,
                          std::mt19937_64& rng) {
  const CameraIntrinsics K = dist.intrinsics();
  std::uniform_real_distribution<double> uj(-dist.joint_range,
                                            dist.joint_range);
  std::uniform_real_distribution<double> uz(dist.min_z, dist.max_z);
  std::uniform_real_distribution<double> utilt(dist.min_tilt, dist.max_tilt);
  std::uniform_real_distribution<double> uyaw(dist.yaw_center - dist.yaw_range,
                                              dist.yaw_center + dist.yaw_range);
  std::uniform_real_distribution<double> uxy(-dist.xy_jitter, dist.xy_jitter);
  for (int attempt = 0; attempt < 100; ++attempt) {
    Scene scene;
    scene.joints.resize(chain.n());
    for (int i = 0; i < chain.n(); ++i) scene.joints(i) = uj(rng);
    scene.pose.rotation =
        (Eigen::AngleAxisd(utilt(rng), Vec3::UnitX()) *
         Eigen::AngleAxisd(uyaw(rng), Vec3::UnitZ()))
            .toRotationMatrix();
    scene.pose.translation = Vec3(uxy(rng), uxy(rng), uz(rng));
    scene.points = forward_kinematics(chain, scene.joints);

    bool ok = true;
    for (const auto& p : scene.points) {
      const Vec3 cam = scene.pose.apply(p);
      if (cam.z() < 0.5) {
        ok = false;
        break;
      }
      const Vec2 px = project_point(scene.pose, K, p);
      if (px.x() < 3.0 || px.x() > dist.image_size - 4.0 || px.y() < 3.0 ||
          px.y() > dist.image_size - 4.0) {
        ok = false;
        break;
      }
      scene.pixels.push_back(px);
    }
    if (ok) return scene;
  }
  throw InvalidCamera("arm left the frustum after 100 rejection samples");
}

inline ImageGray render_scene(const Scene& scene,
                              const CameraDistribution& dist) {
  const CameraIntrinsics K = dist.intrinsics();
  ImageGray image = image_zeros(dist.image_size, dist.image_size);
  // Base-orientation stub along the robot-frame +x axis.
  const Vec3 stub_end(0.12, 0.0, 0.0);
  if (scene.pose.apply(stub_end).z() > 1e-3)
    draw_segment(image, scene.pixels[0],
                 project_point(scene.pose, K, stub_end), kStrokeHalfWidth,
                 kStubIntensity);
  for (size_t i = 0; i + 1 < scene.pixels.size(); ++i)
    draw_segment(image, scene.pixels[i], scene.pixels[i + 1],
                 kStrokeHalfWidth, kStrokeIntensity);
  for (size_t i = 0; i < scene.pixels.size(); ++i)
    draw_blob(image, scene.pixels[i], kBlobSigma, 1.0);
  return image;
}

inline RectF keypoint_bbox(const std::vector<Vec2>& pixels, double margin,
                           int image_size) {
  double x0 = pixels[0].x(), x1 = pixels[0].x();
  double y0 = pixels[0].y(), y1 = pixels[0].y();
  for (const auto& p : pixels) {
    x0 = std::min(x0, p.x());
    x1 = std::max(x1, p.x());
    y0 = std::min(y0, p.y());
    y1 = std::max(y1, p.y());
  }
  const RectF raw{x0 - margin, y0 - margin, (x1 - x0) + 2 * margin,
                  (y1 - y0) + 2 * margin};
  return raw.clipped(image_size, image_size);
}

}  // namespace data_detail

inline Dataset generate_synthetic_dataset(const KinematicChain& chain,
                                          int count,
                                          const CameraDistribution& dist,
                                          uint64_t rng_seed,
                                          const std::string& out_dir) {
  if (count < 1) throw ConfigError("dataset count must be >= 1");
  chain.validate();
  namespace fs = std::filesystem;
  Dataset dataset;
  dataset.directory = out_dir;
  dataset.chain = chain;
  fs::create_directories(dataset.directory / "images");

  char name[32];
  for (int index = 0; index < count; ++index) {
    // Per-image seed: any sample can be regenerated independently.
    std::mt19937_64 rng(rng_seed +
                        data_detail::kSampleSeedStride *
                            static_cast<uint64_t>(index + 1));
    const data_detail::Scene scene =
        data_detail::sample_scene(chain, dist, rng);
    const ImageGray image = data_detail::render_scene(scene, dist);
    std::snprintf(name, sizeof(name), "images/%06d.pgm", index);
    save_pgm((dataset.directory / name).string(), image);

    SampleRecord rec;
    rec.image_path = name;
    rec.intrinsics = dist.intrinsics();
    rec.gt_joints = scene.joints;
    rec.gt_pose = scene.pose;
    for (const auto& px : scene.pixels) rec.gt_keypoints_2d.push_back(px);
    rec.bbox = data_detail::keypoint_bbox(scene.pixels, 6.0, dist.image_size);
    rec.chain_id = chain.id;
    dataset.records.push_back(rec);
  }
  save_dataset(dataset);
  return dataset;
}

}  // namespace pepp
