#pragma once

#include <limits>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pepp/metrics.hpp"
#include "pepp/train.hpp"

namespace pepp {

// ---------------------------------------------------------------------------
// Occlusion benchmark manifest: one occluder per image, newline-delimited.
// ---------------------------------------------------------------------------

struct OcclusionRecord {
  std::string image;  // record image path, keys the dataset entry
  Occluder occluder;
  double ratio = 0.0;
  uint64_t seed = 0;

  nlohmann::json to_json() const {
    nlohmann::json occ = {
        {"shape", occluder.shape == OccluderShape::kRect ? "rect" : "circle"},
        {"center", {occluder.center.x(), occluder.center.y()}},
        {"w", occluder.w},
        {"h", occluder.h},
        {"radius", occluder.radius}};
    return {{"image", image}, {"occluder", occ}, {"ratio", ratio},
            {"seed", seed}};
  }

  static OcclusionRecord from_json(const nlohmann::json& j) {
    OcclusionRecord rec;
    rec.image = j.at("image").get<std::string>();
    const auto& occ = j.at("occluder");
    const std::string shape = occ.at("shape").get<std::string>();
    if (shape == "rect")
      rec.occluder.shape = OccluderShape::kRect;
    else if (shape == "circle")
      rec.occluder.shape = OccluderShape::kCircle;
    else
      throw DataError("unknown occluder shape: " + shape);
    rec.occluder.center = Vec2(occ.at("center").at(0), occ.at("center").at(1));
    rec.occluder.w = occ.at("w");
    rec.occluder.h = occ.at("h");
    rec.occluder.radius = occ.at("radius");
    rec.ratio = j.at("ratio");
    rec.seed = j.at("seed");
    return rec;
  }
};

inline void save_occlusion_manifest(const std::vector<OcclusionRecord>& records,
                                    const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write occlusion manifest: " + path);
  for (const auto& rec : records) out << rec.to_json().dump() << "\n";
}

inline std::vector<OcclusionRecord> load_occlusion_manifest(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read occlusion manifest: " + path);
  std::vector<OcclusionRecord> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      records.push_back(OcclusionRecord::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception&) {
      throw DataError("malformed occlusion manifest: " + path);
    }
  }
  return records;
}

/// One occluder per dataset image, anchored on the arm within the gt bbox.
inline std::vector<OcclusionRecord> generate_occlusion_manifest(
    const Dataset& dataset, double ratio, OccluderShape shape,
    uint64_t rng_seed) {
  std::vector<OcclusionRecord> records;
  records.reserve(dataset.records.size());
  for (size_t i = 0; i < dataset.records.size(); ++i) {
    const SampleRecord& rec = dataset.records[i];
    std::vector<Vec2> kps;
    for (const auto& kp : rec.gt_keypoints_2d)
      if (kp) kps.push_back(*kp);
    OcclusionRecord out;
    out.image = rec.image_path;
    out.ratio = ratio;
    out.seed = train_detail::derive_seed(rng_seed, 4, i);
    out.occluder = generate_occlusion(kps, rec.bbox, ratio, shape, out.seed);
    records.push_back(out);
  }
  return records;
}

// ---------------------------------------------------------------------------
// Evaluation runner: image -> forward -> peaks -> (filter) -> FK -> EPnP ->
// ADD/PCK. Per-image failures are recorded with a reason, never fatal.
// ---------------------------------------------------------------------------

struct EvalRunResult {
  EvalReport report;
  nlohmann::json per_image = nlohmann::json::array();
};

inline EvalRunResult run_eval(Model& model, const JointNormalizer& normalizer,
                              const Dataset& dataset, const RunConfig& cfg,
                              const std::vector<OcclusionRecord>* occlusion =
                                  nullptr) {
  const NetConfig& net = model.config;
  train_detail::check_model_matches_chain(model, dataset.chain);
  const int outputs = net.joint_outputs();
  const PatchMask mask = train_detail::full_context_mask(net.patch_count());

  std::map<std::string, const Occluder*> occluder_of;
  if (occlusion != nullptr)
    for (const auto& rec : *occlusion) occluder_of[rec.image] = &rec.occluder;

  EvalRunResult out;
  std::vector<AddSample> add_samples;       // failures enter as +inf
  std::vector<double> solved_adds;          // finite values only
  std::vector<Vec2> all_pred_kp;            // pooled PCK accumulators
  std::vector<std::optional<Vec2>> all_gt_kp;

  for (const auto& rec : dataset.records) {
    nlohmann::json row = {{"image", rec.image_path}};
    try {
      ImageGray image = dataset.load_image(rec);
      const auto it = occluder_of.find(rec.image_path);
      if (it != occluder_of.end()) draw_occluder(image, *it->second, 0.0);
      const auto prep = train_detail::prep_sample(image, rec, rec.bbox, net);

      FullForward fwd = full_forward(model, prep.patches, mask);
      const std::vector<Keypoint2D> peaks = extract_peaks(fwd.heatmaps);
      for (size_t i = 0; i < peaks.size(); ++i) {
        all_pred_kp.push_back(peaks[i].position);
        all_gt_kp.push_back(prep.keypoints[i]);
      }

      std::vector<Keypoint2D> kept = peaks;
      if (cfg.eval.filter)
        kept = filter_keypoints(peaks, cfg.eval.epsilon0,
                                cfg.eval.epsilon_step, cfg.eval.min_count);

      JointVector joints = JointVector::Zero(dataset.chain.n());
      joints.head(outputs) = normalizer.denormalize(fwd.phi);
      const std::vector<Vec3> pred_points =
          forward_kinematics(dataset.chain, joints);

      std::vector<Correspondence2D3D> corr;
      corr.reserve(kept.size());
      for (const auto& kp : kept) {
        Correspondence2D3D c;
        c.point3d = pred_points[kp.index];
        c.point2d = kp.position;
        corr.push_back(c);
      }
      const RigidPose pose = solve_epnp(corr, prep.crop_K);

      // Ground-truth joint positions in the camera frame.
      const std::vector<Vec3> gt_points =
          forward_kinematics(dataset.chain, rec.gt_joints);
      std::vector<Vec3> gt_camera(gt_points.size());
      for (size_t i = 0; i < gt_points.size(); ++i)
        gt_camera[i] = rec.gt_pose.apply(gt_points[i]);

      const AddSample sample = add(pose, pred_points, gt_camera,
                                   rec.image_path);
      add_samples.push_back(sample);
      solved_adds.push_back(sample.value);
      row["status"] = "ok";
      row["add"] = sample.value;
      row["kept"] = static_cast<int>(kept.size());
    } catch (const TooFewPoints& e) {
      row["status"] = "too_few_points";
      add_samples.push_back(
          {std::numeric_limits<double>::infinity(), rec.image_path});
    } catch (const DegenerateConfiguration& e) {
      row["status"] = "degenerate";
      add_samples.push_back(
          {std::numeric_limits<double>::infinity(), rec.image_path});
    } catch (const NonPositiveDepth& e) {
      row["status"] = "behind_camera";
      add_samples.push_back(
          {std::numeric_limits<double>::infinity(), rec.image_path});
    } catch (const DataError& e) {
      row["status"] = "data_error";
      add_samples.push_back(
          {std::numeric_limits<double>::infinity(), rec.image_path});
    }
    out.per_image.push_back(row);
  }

  out.report.sample_count = static_cast<int>(dataset.records.size());
  out.report.failure_count =
      out.report.sample_count - static_cast<int>(solved_adds.size());
  out.report.auc_max_threshold = cfg.eval.auc_max_threshold;
  // Failed frames count as never-correct in the AUC; the mean is over solved
  // frames so a single failure cannot blow it up to infinity.
  out.report.auc = add_samples.empty()
                       ? 0.0
                       : auc_of_add(add_samples, cfg.eval.auc_max_threshold);
  if (solved_adds.empty()) {
    out.report.mean_add = std::numeric_limits<double>::infinity();
  } else {
    double acc = 0.0;
    for (double v : solved_adds) acc += v;
    out.report.mean_add = acc / static_cast<double>(solved_adds.size());
  }
  if (!all_gt_kp.empty())
    out.report.pck = pck(all_pred_kp, all_gt_kp, cfg.eval.pck_thresholds,
                         net.image_size, net.image_size);
  return out;
}

}  // namespace pepp
