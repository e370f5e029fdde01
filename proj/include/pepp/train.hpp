#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pepp/config.hpp"
#include "pepp/dataset.hpp"
#include "pepp/losses.hpp"
#include "pepp/masking.hpp"

namespace pepp {

// ---------------------------------------------------------------------------
// Run manifest: everything needed to audit or reproduce a run.
// ---------------------------------------------------------------------------

struct RunManifest {
  std::string op;
  nlohmann::json config;  // full RunConfig snapshot
  uint64_t seed = 0;
  nlohmann::json normalizer;  // JointNormalizer stats, null when unused
  nlohmann::json epochs = nlohmann::json::array();  // per-epoch log rows
  std::string checkpoint_path;
  nlohmann::json metrics;  // op-specific summary block

  nlohmann::json to_json() const {
    return {{"op", op},
            {"config", config},
            {"seed", seed},
            {"normalizer", normalizer},
            {"epochs", epochs},
            {"checkpoint_path", checkpoint_path},
            {"metrics", metrics}};
  }

  static RunManifest from_json(const nlohmann::json& j) {
    RunManifest m;
    m.op = j.at("op").get<std::string>();
    m.config = j.at("config");
    m.seed = j.at("seed");
    m.normalizer = j.value("normalizer", nlohmann::json());
    m.epochs = j.value("epochs", nlohmann::json::array());
    m.checkpoint_path = j.value("checkpoint_path", std::string());
    m.metrics = j.value("metrics", nlohmann::json());
    return m;
  }
};

inline void save_manifest(const RunManifest& manifest,
                          const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest: " + path);
  out << manifest.to_json().dump(2) << "\n";
}

inline RunManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read manifest: " + path);
  try {
    return RunManifest::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception&) {
    throw DataError("malformed manifest: " + path);
  }
}

// ---------------------------------------------------------------------------
// Shared per-sample plumbing.
// ---------------------------------------------------------------------------

namespace train_detail {

// Distinct deterministic seed streams; tag separates uses within one run.
inline uint64_t derive_seed(uint64_t base, uint64_t tag, uint64_t index) {
  return base + 0x9e3779b97f4a7c15ull * (tag * 1000003ull + index + 1);
}

struct PreppedSample {
  Eigen::MatrixXd patches;  // patch_dim x M
  CropTransform transform;
  CameraIntrinsics crop_K;  // intrinsics rescaled into crop coordinates
  std::vector<std::optional<Vec2>> keypoints;  // crop coords, absent if out
};

inline PreppedSample prep_sample(const ImageGray& image,
                                 const SampleRecord& rec, const RectF& bbox,
                                 const NetConfig& net) {
  const CropResult crop = crop_resize(image, bbox, net.image_size);
  PreppedSample out;
  out.patches = patchify(crop.image, net);
  out.transform = crop.transform;
  out.crop_K = crop.transform.apply(rec.intrinsics, net.image_size);
  const double limit = static_cast<double>(net.image_size) - 0.5;
  for (const auto& kp : rec.gt_keypoints_2d) {
    if (!kp) {
      out.keypoints.push_back(std::nullopt);
      continue;
    }
    const Vec2 t = crop.transform.apply(*kp);
    if (t.x() < -0.5 || t.x() >= limit || t.y() < -0.5 || t.y() >= limit)
      out.keypoints.push_back(std::nullopt);
    else
      out.keypoints.push_back(t);
  }
  return out;
}

inline PatchMask full_context_mask(int M) {
  PatchMask mask;
  mask.M = M;
  mask.context.resize(M);
  for (int i = 0; i < M; ++i) mask.context[i] = i;
  return mask;
}

// Ground-truth heatmaps with centers snapped to integer pixels so the peak
// pixel is exactly 1.0 (the focal normalizer counts y == 1 pixels).
inline HeatmapStack heatmap_targets(
    const std::vector<std::optional<Vec2>>& keypoints, int size,
    double sigma) {
  std::vector<std::optional<Vec2>> centers;
  for (const auto& kp : keypoints) {
    if (kp)
      centers.push_back(Vec2(std::round(kp->x()), std::round(kp->y())));
    else
      centers.push_back(std::nullopt);
  }
  return gaussian_heatmap(centers, size, size, sigma);
}

inline void check_model_matches_chain(const Model& model,
                                      const KinematicChain& chain) {
  if (model.config.n != chain.n() || model.config.k != chain.k())
    throw ConfigError("model joint/keypoint counts do not match the chain");
}

}  // namespace train_detail

/// Mean/variance statistics of the first `outputs` joints of the train split.
inline JointNormalizer fit_normalizer(const Dataset& dataset, int outputs) {
  std::vector<Eigen::VectorXd> samples;
  samples.reserve(dataset.records.size());
  for (const auto& rec : dataset.records)
    samples.push_back(rec.gt_joints.head(outputs));
  return JointNormalizer::fit(samples);
}

// ---------------------------------------------------------------------------
// Pre-training: masked embedding prediction against the EMA target branch.
// ---------------------------------------------------------------------------

inline RunManifest run_pretrain(Model& model, const Dataset& dataset,
                                const RunConfig& cfg) {
  const NetConfig& net = model.config;
  const PatchGrid grid(net.image_size, net.image_size, net.patch_size);
  const int count = static_cast<int>(dataset.records.size());
  const int total_steps = cfg.pretrain.epochs * count;

  std::vector<Param*> params;
  model.encoder.collect(params);
  model.predictor.collect(params);
  AdamWOptions opts;
  opts.lr = cfg.pretrain.lr;
  opts.weight_decay = cfg.pretrain.weight_decay;
  AdamW optimizer(opts);

  EmaState ema;
  ema.target_weights = flatten_params(model.target_params());

  RunManifest manifest;
  manifest.op = "pretrain";
  manifest.config = cfg.to_json();
  manifest.seed = cfg.seed;

  int step = 0;
  for (int epoch = 0; epoch < cfg.pretrain.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (int idx = 0; idx < count; ++idx) {
      const SampleRecord& rec = dataset.records[idx];
      const auto prep = train_detail::prep_sample(
          dataset.load_image(rec), rec, rec.bbox, net);
      const PatchMask mask = sample_joint_masks(
          grid, prep.keypoints, cfg.pretrain.joint_mask_count,
          train_detail::derive_seed(cfg.seed, 1,
                                    static_cast<uint64_t>(step)));
      model.zero_grad();
      PretrainForward fwd = pretrain_forward(model, prep.patches, mask);
      const PretrainLoss loss =
          pretrain_l1(fwd.predicted, fwd.targets, mask.masked);
      pretrain_backward(model, fwd, loss.grad_predicted);
      optimizer.step(params);
      ++step;
      ema = ema_update(ema, flatten_params(model.encoder_params()),
                       ema_momentum(step, total_steps));
      load_flat_params(ema.target_weights, model.target_params());
      epoch_loss += loss.value;
    }
    manifest.epochs.push_back({{"epoch", epoch},
                               {"loss", epoch_loss / count},
                               {"ema_momentum", ema.momentum}});
  }
  return manifest;
}

// ---------------------------------------------------------------------------
// Fine-tuning: joint MSE + curriculum-weighted focal heatmap loss under
// random patch masking and the epoch-scheduled bbox jitter.
// ---------------------------------------------------------------------------

inline RunManifest run_finetune(Model& model, JointNormalizer& normalizer,
                                const Dataset& dataset, const RunConfig& cfg) {
  const NetConfig& net = model.config;
  train_detail::check_model_matches_chain(model, dataset.chain);
  const PatchGrid grid(net.image_size, net.image_size, net.patch_size);
  const int count = static_cast<int>(dataset.records.size());
  const int outputs = net.joint_outputs();
  normalizer = fit_normalizer(dataset, outputs);

  AdamWOptions opts;
  opts.lr = cfg.finetune.lr;
  opts.weight_decay = cfg.finetune.weight_decay;
  AdamW optimizer(opts);
  const std::vector<Param*> params = model.params();

  RunManifest manifest;
  manifest.op = "finetune";
  manifest.config = cfg.to_json();
  manifest.seed = cfg.seed;
  manifest.normalizer = normalizer.to_json();

  int step = 0;
  for (int epoch = 0; epoch < cfg.finetune.epochs; ++epoch) {
    const double alpha = curriculum_weight(epoch);
    const double lambda = jitter_lambda(epoch);
    double epoch_joint = 0.0, epoch_focal = 0.0;
    for (int idx = 0; idx < count; ++idx) {
      const SampleRecord& rec = dataset.records[idx];
      const RectF bbox = jitter_bbox(
          rec.bbox, epoch,
          train_detail::derive_seed(cfg.seed, 2, static_cast<uint64_t>(step)),
          rec.intrinsics.width, rec.intrinsics.height);
      const auto prep =
          train_detail::prep_sample(dataset.load_image(rec), rec, bbox, net);
      const PatchMask mask = sample_random_mask(
          grid, cfg.finetune.mask_fraction,
          train_detail::derive_seed(cfg.seed, 3, static_cast<uint64_t>(step)));

      model.zero_grad();
      FullForward fwd = full_forward(model, prep.patches, mask);
      const JointMseLoss jm =
          joint_mse(fwd.phi, rec.gt_joints.head(outputs), normalizer);
      const HeatmapStack gt_heat = train_detail::heatmap_targets(
          prep.keypoints, net.image_size, cfg.finetune.heatmap_sigma);
      FocalLoss fl = focal_loss(fwd.heatmaps, gt_heat);
      for (auto& channel : fl.grad_pred.channels) channel *= alpha;
      full_backward(model, fwd, jm.grad_pred, &fl.grad_pred);
      optimizer.step(params);
      ++step;
      epoch_joint += jm.value;
      epoch_focal += fl.value;
    }
    manifest.epochs.push_back({{"epoch", epoch},
                               {"joint_mse", epoch_joint / count},
                               {"focal", epoch_focal / count},
                               {"alpha", alpha},
                               {"lambda", lambda}});
  }
  return manifest;
}

// ---------------------------------------------------------------------------
// Sim-to-real: self-supervised reprojection of FK(predicted joints) under the
// internally solved pose against the predicted keypoints. The keypoint head
// is effectively frozen via its per-parameter learning-rate scale; frames
// with too few confident keypoints are skipped, not fatal.
// ---------------------------------------------------------------------------

inline RunManifest run_sim2real(Model& model, const JointNormalizer& normalizer,
                                const Dataset& dataset, const RunConfig& cfg) {
  const NetConfig& net = model.config;
  train_detail::check_model_matches_chain(model, dataset.chain);
  const int count = static_cast<int>(dataset.records.size());
  const int outputs = net.joint_outputs();
  const PatchMask mask = train_detail::full_context_mask(net.patch_count());

  std::vector<Param*> kp_params;
  model.keypoint_head.collect(kp_params);
  for (Param* p : kp_params) p->lr_scale = cfg.sim2real.keypoint_lr_scale;

  AdamWOptions opts;
  opts.lr = cfg.sim2real.lr;
  AdamW optimizer(opts);
  const std::vector<Param*> params = model.params();

  RunManifest manifest;
  manifest.op = "sim2real";
  manifest.config = cfg.to_json();
  manifest.seed = cfg.seed;
  manifest.normalizer = normalizer.to_json();

  for (int epoch = 0; epoch < cfg.sim2real.epochs; ++epoch) {
    double epoch_ssl = 0.0;
    int used = 0, skipped = 0;
    for (int idx = 0; idx < count; ++idx) {
      const SampleRecord& rec = dataset.records[idx];
      const auto prep =
          train_detail::prep_sample(dataset.load_image(rec), rec, rec.bbox,
                                    net);
      model.zero_grad();
      FullForward fwd = full_forward(model, prep.patches, mask);
      const std::vector<Keypoint2D> peaks = extract_peaks(fwd.heatmaps);
      int confident = 0;
      for (const auto& kp : peaks)
        if (kp.confidence > cfg.sim2real.min_confidence) ++confident;
      if (confident < cfg.sim2real.min_points) {
        ++skipped;
        continue;
      }
      std::vector<Vec2> pred_kp;
      pred_kp.reserve(peaks.size());
      for (const auto& kp : peaks) pred_kp.push_back(kp.position);

      JointVector joints = JointVector::Zero(dataset.chain.n());
      joints.head(outputs) = normalizer.denormalize(fwd.phi);
      SslLoss ssl;
      try {
        ssl = ssl_reprojection(pred_kp, joints, dataset.chain, prep.crop_K);
      } catch (const TooFewPoints&) {
        ++skipped;
        continue;
      } catch (const NonPositiveDepth&) {
        ++skipped;
        continue;
      } catch (const DegenerateConfiguration&) {
        ++skipped;
        continue;
      }
      // The gradient reaches the backbone through the joint head only: the
      // peak extraction is an argmax, so the keypoint path has no derivative.
      const Eigen::VectorXd dphi =
          ssl.grad_joints.head(outputs).cwiseProduct(normalizer.std);
      full_backward(model, fwd, dphi, nullptr);
      optimizer.step(params);
      epoch_ssl += ssl.value;
      ++used;
    }
    manifest.epochs.push_back(
        {{"epoch", epoch},
         {"ssl", used > 0 ? epoch_ssl / used : 0.0},
         {"used", used},
         {"skipped", skipped}});
  }
  return manifest;
}

}  // namespace pepp
