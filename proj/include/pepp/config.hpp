#pragma once

#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pepp/refnet.hpp"

namespace pepp {

// Process exit codes for the CLI; anything escaping a guarded run maps here.
enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 2,
  kExitData = 3,
  kExitNumerical = 4,
};

// ---------------------------------------------------------------------------
// Schedules. Training runs are sequential over samples; one optimizer step
// per sample, `epochs` passes over the dataset.
// ---------------------------------------------------------------------------

struct PretrainSchedule {
  int epochs = 30;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  int joint_mask_count = 2;  // joints hidden per image by sample_joint_masks

  nlohmann::json to_json() const {
    return {{"epochs", epochs},
            {"lr", lr},
            {"weight_decay", weight_decay},
            {"joint_mask_count", joint_mask_count}};
  }
  static PretrainSchedule from_json(const nlohmann::json& j) {
    PretrainSchedule s;
    s.epochs = j.value("epochs", s.epochs);
    s.lr = j.value("lr", s.lr);
    s.weight_decay = j.value("weight_decay", s.weight_decay);
    s.joint_mask_count = j.value("joint_mask_count", s.joint_mask_count);
    return s;
  }
};

struct FinetuneSchedule {
  int epochs = 45;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double mask_fraction = 0.15;  // sample_random_mask budget
  double heatmap_sigma = 2.0;   // gt gaussian width in crop pixels

  nlohmann::json to_json() const {
    return {{"epochs", epochs},
            {"lr", lr},
            {"weight_decay", weight_decay},
            {"mask_fraction", mask_fraction},
            {"heatmap_sigma", heatmap_sigma}};
  }
  static FinetuneSchedule from_json(const nlohmann::json& j) {
    FinetuneSchedule s;
    s.epochs = j.value("epochs", s.epochs);
    s.lr = j.value("lr", s.lr);
    s.weight_decay = j.value("weight_decay", s.weight_decay);
    s.mask_fraction = j.value("mask_fraction", s.mask_fraction);
    s.heatmap_sigma = j.value("heatmap_sigma", s.heatmap_sigma);
    return s;
  }
};

struct Sim2RealSchedule {
  int epochs = 10;
  double lr = 1e-4;
  double keypoint_lr_scale = 1e-10;  // keypoint head effectively frozen
  double min_confidence = 0.0;  // frames with < min_points above this skip
  int min_points = 4;

  nlohmann::json to_json() const {
    return {{"epochs", epochs},
            {"lr", lr},
            {"keypoint_lr_scale", keypoint_lr_scale},
            {"min_confidence", min_confidence},
            {"min_points", min_points}};
  }
  static Sim2RealSchedule from_json(const nlohmann::json& j) {
    Sim2RealSchedule s;
    s.epochs = j.value("epochs", s.epochs);
    s.lr = j.value("lr", s.lr);
    s.keypoint_lr_scale = j.value("keypoint_lr_scale", s.keypoint_lr_scale);
    s.min_confidence = j.value("min_confidence", s.min_confidence);
    s.min_points = j.value("min_points", s.min_points);
    return s;
  }
};

struct EvalOptions {
  bool filter = true;       // confidence filtering before PnP
  double epsilon0 = 0.5;    // initial filter threshold
  double epsilon_step = 0.025;
  int min_count = 4;
  double auc_max_threshold = 0.1;  // meters
  std::vector<double> pck_thresholds = {2.0, 4.0, 8.0};

  nlohmann::json to_json() const {
    return {{"filter", filter},
            {"epsilon0", epsilon0},
            {"epsilon_step", epsilon_step},
            {"min_count", min_count},
            {"auc_max_threshold", auc_max_threshold},
            {"pck_thresholds", pck_thresholds}};
  }
  static EvalOptions from_json(const nlohmann::json& j) {
    EvalOptions o;
    o.filter = j.value("filter", o.filter);
    o.epsilon0 = j.value("epsilon0", o.epsilon0);
    o.epsilon_step = j.value("epsilon_step", o.epsilon_step);
    o.min_count = j.value("min_count", o.min_count);
    o.auc_max_threshold = j.value("auc_max_threshold", o.auc_max_threshold);
    o.pck_thresholds =
        j.value("pck_thresholds", o.pck_thresholds);
    return o;
  }
};

struct PathConfig {
  std::string dataset;      // training split directory
  std::string val_dataset;  // held-out split directory
  std::string checkpoint;   // input checkpoint
  std::string out;          // output directory (checkpoint + manifest)

  nlohmann::json to_json() const {
    return {{"dataset", dataset},
            {"val_dataset", val_dataset},
            {"checkpoint", checkpoint},
            {"out", out}};
  }
  static PathConfig from_json(const nlohmann::json& j) {
    PathConfig p;
    p.dataset = j.value("dataset", p.dataset);
    p.val_dataset = j.value("val_dataset", p.val_dataset);
    p.checkpoint = j.value("checkpoint", p.checkpoint);
    p.out = j.value("out", p.out);
    return p;
  }
};

struct RunConfig {
  uint64_t seed = 7;
  NetConfig net;
  PretrainSchedule pretrain;
  FinetuneSchedule finetune;
  Sim2RealSchedule sim2real;
  EvalOptions eval;
  PathConfig paths;

  nlohmann::json to_json() const {
    return {{"seed", seed},
            {"net", net.to_json()},
            {"pretrain", pretrain.to_json()},
            {"finetune", finetune.to_json()},
            {"sim2real", sim2real.to_json()},
            {"eval", eval.to_json()},
            {"paths", paths.to_json()}};
  }

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    c.seed = j.value("seed", c.seed);
    if (j.contains("net")) c.net = NetConfig::from_json(j.at("net"));
    if (j.contains("pretrain"))
      c.pretrain = PretrainSchedule::from_json(j.at("pretrain"));
    if (j.contains("finetune"))
      c.finetune = FinetuneSchedule::from_json(j.at("finetune"));
    if (j.contains("sim2real"))
      c.sim2real = Sim2RealSchedule::from_json(j.at("sim2real"));
    if (j.contains("eval")) c.eval = EvalOptions::from_json(j.at("eval"));
    if (j.contains("paths")) c.paths = PathConfig::from_json(j.at("paths"));
    c.net.validate();
    return c;
  }
};

/// Loads a config file and applies the PEPP_SEED environment override.
inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  RunConfig config;
  try {
    config = RunConfig::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config file " + path + ": " + e.what());
  }
  if (const char* env = std::getenv("PEPP_SEED")) {
    try {
      size_t used = 0;
      config.seed = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument(env);
    } catch (const std::exception&) {
      throw ConfigError(std::string("PEPP_SEED is not an integer: ") + env);
    }
  }
  return config;
}

/// Runs a CLI action and maps the library error taxonomy onto exit codes.
inline int run_guarded(const std::function<void()>& action) {
  try {
    action();
    return kExitOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const Error& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  }
}

}  // namespace pepp
