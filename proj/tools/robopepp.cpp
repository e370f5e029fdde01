// Command-line front end: dataset generation, the three training stages,
// evaluation, occlusion benchmarks, single-frame PnP, and report curves.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pepp/config.hpp"
#include "pepp/dataset.hpp"
#include "pepp/evalrun.hpp"
#include "pepp/train.hpp"

namespace fs = std::filesystem;

namespace {

pepp::KinematicChain chain_by_name(const std::string& name) {
  if (name == "planar3") return pepp::make_planar3();
  if (name == "planar5") return pepp::make_planar5();
  if (name == "panda") return pepp::make_panda_like();
  throw pepp::ConfigError("unknown chain: " + name +
                          " (expected planar3, planar5, or panda)");
}

pepp::Model load_model_and_normalizer(const std::string& path,
                                      pepp::JointNormalizer* normalizer) {
  nlohmann::json extra;
  pepp::Model model = pepp::load_checkpoint(path, &extra);
  if (normalizer != nullptr) {
    if (!extra.contains("normalizer"))
      throw pepp::DataError("checkpoint has no normalizer stats: " + path);
    *normalizer = pepp::JointNormalizer::from_json(extra.at("normalizer"));
  }
  return model;
}

void write_json(const nlohmann::json& doc, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw pepp::DataError("cannot write " + path.string());
  out << doc.dump(2) << "\n";
}

// Minimal polyline plot; enough to eyeball a curve without extra tooling.
void write_svg_curve(const std::vector<std::pair<double, double>>& points,
                     const std::string& x_label, const std::string& y_label,
                     const fs::path& path) {
  if (points.empty()) throw pepp::DataError("empty curve: " + path.string());
  const int W = 640, H = 480, pad = 50;
  double x0 = points[0].first, x1 = points[0].first;
  double y0 = 0.0, y1 = points[0].second;
  for (const auto& [x, y] : points) {
    x0 = std::min(x0, x);
    x1 = std::max(x1, x);
    y1 = std::max(y1, y);
  }
  if (x1 - x0 < 1e-12) x1 = x0 + 1.0;
  if (y1 - y0 < 1e-12) y1 = y0 + 1.0;
  const auto px = [&](double x) {
    return pad + (x - x0) / (x1 - x0) * (W - 2 * pad);
  };
  const auto py = [&](double y) {
    return H - pad - (y - y0) / (y1 - y0) * (H - 2 * pad);
  };
  std::ofstream out(path);
  if (!out) throw pepp::DataError("cannot write " + path.string());
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W
      << "' height='" << H << "'>\n";
  out << "<rect width='" << W << "' height='" << H << "' fill='white'/>\n";
  out << "<line x1='" << pad << "' y1='" << H - pad << "' x2='" << W - pad
      << "' y2='" << H - pad << "' stroke='black'/>\n";
  out << "<line x1='" << pad << "' y1='" << pad << "' x2='" << pad << "' y2='"
      << H - pad << "' stroke='black'/>\n";
  out << "<text x='" << W / 2 << "' y='" << H - 12
      << "' text-anchor='middle' font-size='14'>" << x_label << "</text>\n";
  out << "<text x='16' y='" << H / 2 << "' font-size='14' transform='rotate(-90 16 "
      << H / 2 << ")' text-anchor='middle'>" << y_label << "</text>\n";
  out << "<polyline fill='none' stroke='steelblue' stroke-width='2' points='";
  for (const auto& [x, y] : points) out << px(x) << "," << py(y) << " ";
  out << "'/>\n</svg>\n";
}

void write_csv_curve(const std::vector<std::pair<double, double>>& points,
                     const std::string& x_label, const std::string& y_label,
                     const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw pepp::DataError("cannot write " + path.string());
  out << x_label << "," << y_label << "\n";
  for (const auto& [x, y] : points) out << x << "," << y << "\n";
}

// Accuracy-vs-threshold curve from the per-image ADD values of one eval
// manifest; failed frames count as never correct.
std::vector<std::pair<double, double>> add_threshold_curve(
    const pepp::RunManifest& manifest, int steps = 100) {
  const double max_t =
      manifest.metrics.at("report").at("auc_max_threshold").get<double>();
  std::vector<double> adds;
  int total = 0;
  for (const auto& row : manifest.metrics.at("per_image")) {
    ++total;
    if (row.at("status") == "ok") adds.push_back(row.at("add").get<double>());
  }
  if (total == 0) throw pepp::DataError("eval manifest has no per-image rows");
  std::sort(adds.begin(), adds.end());
  std::vector<std::pair<double, double>> curve;
  for (int j = 0; j <= steps; ++j) {
    const double tau = max_t * j / steps;
    const auto hit = std::upper_bound(adds.begin(), adds.end(), tau) -
                     adds.begin();
    curve.push_back({tau, static_cast<double>(hit) / total});
  }
  return curve;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"robot pose and joint-angle estimation pipeline"};
  app.require_subcommand(1);

  std::string config_path, dataset_dir, val_dir, checkpoint_path, out_dir;
  std::string chain_name = "planar3", shape_name = "rect";
  std::string occlusion_path, corr_path;
  std::vector<std::string> eval_manifests;
  int count = 200;
  double ratio = 0.2;
  double yaw_center = 0.0, yaw_range = 0.5;
  bool no_filter = false;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--config", config_path)->required();
  gen->add_option("--chain", chain_name);
  gen->add_option("--count", count);
  gen->add_option("--out", out_dir)->required();
  gen->add_option("--yaw-center", yaw_center);
  gen->add_option("--yaw-range", yaw_range);

  auto* pre = app.add_subcommand("pretrain", "masked embedding pre-training");
  pre->add_option("--config", config_path)->required();
  pre->add_option("--dataset", dataset_dir);
  pre->add_option("--out", out_dir)->required();

  auto* fin = app.add_subcommand("finetune", "supervised fine-tuning");
  fin->add_option("--config", config_path)->required();
  fin->add_option("--dataset", dataset_dir);
  fin->add_option("--checkpoint", checkpoint_path);
  fin->add_option("--out", out_dir)->required();

  auto* s2r = app.add_subcommand("sim2real", "self-supervised adaptation");
  s2r->add_option("--config", config_path)->required();
  s2r->add_option("--dataset", dataset_dir);
  s2r->add_option("--checkpoint", checkpoint_path)->required();
  s2r->add_option("--out", out_dir)->required();

  auto* ev = app.add_subcommand("eval", "pose evaluation");
  ev->add_option("--config", config_path)->required();
  ev->add_option("--dataset", dataset_dir);
  ev->add_option("--checkpoint", checkpoint_path)->required();
  ev->add_option("--out", out_dir)->required();
  ev->add_option("--occlusion", occlusion_path);
  ev->add_flag("--no-filter", no_filter);

  auto* occ = app.add_subcommand("occlude", "emit an occlusion manifest");
  occ->add_option("--config", config_path)->required();
  occ->add_option("--dataset", dataset_dir);
  occ->add_option("--ratio", ratio);
  occ->add_option("--shape", shape_name);
  occ->add_option("--out", out_dir)->required();

  auto* sol = app.add_subcommand("solve", "PnP from a correspondence file");
  sol->add_option("--correspondences", corr_path)->required();
  sol->add_option("--out", out_dir)->required();

  auto* rep = app.add_subcommand("report", "CSV/SVG curves from eval manifests");
  rep->add_option("--evals", eval_manifests)->required();
  rep->add_option("--out", out_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return pepp::kExitConfig;
  }

  return pepp::run_guarded([&] {
    if (rep->parsed()) {
      fs::create_directories(out_dir);
      std::vector<std::pair<double, double>> auc_vs_ratio;
      for (const auto& path : eval_manifests) {
        const pepp::RunManifest manifest = pepp::load_manifest(path);
        const auto curve = add_threshold_curve(manifest);
        const std::string stem = fs::path(path).stem().string();
        write_csv_curve(curve, "threshold_m", "accuracy",
                        fs::path(out_dir) / (stem + "_add_curve.csv"));
        write_svg_curve(curve, "ADD threshold (m)", "accuracy",
                        fs::path(out_dir) / (stem + "_add_curve.svg"));
        const auto& metrics = manifest.metrics;
        if (metrics.contains("occlusion_ratio") &&
            !metrics.at("occlusion_ratio").is_null())
          auc_vs_ratio.push_back(
              {metrics.at("occlusion_ratio").get<double>(),
               metrics.at("report").at("auc").get<double>()});
      }
      if (auc_vs_ratio.size() >= 2) {
        std::sort(auc_vs_ratio.begin(), auc_vs_ratio.end());
        write_csv_curve(auc_vs_ratio, "occlusion_ratio", "auc",
                        fs::path(out_dir) / "auc_vs_occlusion.csv");
        write_svg_curve(auc_vs_ratio, "occlusion ratio", "AUC",
                        fs::path(out_dir) / "auc_vs_occlusion.svg");
      }
      return;
    }

    if (sol->parsed()) {
      std::ifstream in(corr_path);
      if (!in) throw pepp::DataError("cannot read " + corr_path);
      nlohmann::json doc;
      try {
        doc = nlohmann::json::parse(in);
      } catch (const nlohmann::json::exception&) {
        throw pepp::DataError("malformed correspondence file: " + corr_path);
      }
      const pepp::CameraIntrinsics K =
          pepp::intrinsics_from_json(doc.at("intrinsics"));
      std::vector<pepp::Correspondence2D3D> corr;
      for (const auto& row : doc.at("correspondences")) {
        pepp::Correspondence2D3D c;
        c.point3d = pepp::Vec3(row.at("point3d").at(0), row.at("point3d").at(1),
                               row.at("point3d").at(2));
        c.point2d = pepp::Vec2(row.at("point2d").at(0), row.at("point2d").at(1));
        corr.push_back(c);
      }
      const pepp::RigidPose pose = pepp::solve_epnp(corr, K);
      nlohmann::json result = pepp::pose_to_json(pose);
      result["rmse_px"] = pepp::reprojection_rmse(pose, K, corr);
      write_json(result, out_dir);
      return;
    }

    pepp::RunConfig cfg = pepp::load_run_config(config_path);
    if (!dataset_dir.empty()) cfg.paths.dataset = dataset_dir;
    if (!checkpoint_path.empty()) cfg.paths.checkpoint = checkpoint_path;
    if (!out_dir.empty()) cfg.paths.out = out_dir;

    if (gen->parsed()) {
      pepp::CameraDistribution dist;
      dist.image_size = cfg.net.image_size;
      dist.yaw_center = yaw_center;
      dist.yaw_range = yaw_range;
      const pepp::Dataset ds = pepp::generate_synthetic_dataset(
          chain_by_name(chain_name), count, dist, cfg.seed, cfg.paths.out);
      pepp::RunManifest manifest;
      manifest.op = "gen-data";
      manifest.config = cfg.to_json();
      manifest.seed = cfg.seed;
      manifest.metrics = {{"count", static_cast<int>(ds.records.size())},
                          {"chain", ds.chain.id}};
      pepp::save_manifest(manifest,
                          (fs::path(cfg.paths.out) / "manifest.json").string());
      return;
    }

    if (cfg.paths.dataset.empty())
      throw pepp::ConfigError("no dataset directory given");
    const pepp::Dataset ds = pepp::load_dataset(cfg.paths.dataset);

    if (occ->parsed()) {
      pepp::OccluderShape shape;
      if (shape_name == "rect")
        shape = pepp::OccluderShape::kRect;
      else if (shape_name == "circle")
        shape = pepp::OccluderShape::kCircle;
      else
        throw pepp::ConfigError("unknown occluder shape: " + shape_name);
      pepp::save_occlusion_manifest(
          pepp::generate_occlusion_manifest(ds, ratio, shape, cfg.seed),
          cfg.paths.out);
      return;
    }

    fs::create_directories(cfg.paths.out);
    const fs::path ckpt_out = fs::path(cfg.paths.out) / "checkpoint.bin";
    const fs::path manifest_out = fs::path(cfg.paths.out) / "manifest.json";

    if (pre->parsed()) {
      pepp::Model model(cfg.net);
      if (!cfg.paths.checkpoint.empty())
        model = pepp::load_checkpoint(cfg.paths.checkpoint);
      else
        model.init(cfg.seed);
      pepp::RunManifest manifest = pepp::run_pretrain(model, ds, cfg);
      manifest.checkpoint_path = ckpt_out.string();
      pepp::save_checkpoint(ckpt_out.string(), model);
      pepp::save_manifest(manifest, manifest_out.string());
      return;
    }

    if (fin->parsed()) {
      pepp::Model model(cfg.net);
      if (!cfg.paths.checkpoint.empty())
        model = pepp::load_checkpoint(cfg.paths.checkpoint);
      else
        model.init(cfg.seed);
      pepp::JointNormalizer normalizer;
      pepp::RunManifest manifest =
          pepp::run_finetune(model, normalizer, ds, cfg);
      manifest.checkpoint_path = ckpt_out.string();
      pepp::save_checkpoint(ckpt_out.string(), model,
                            {{"normalizer", normalizer.to_json()}});
      pepp::save_manifest(manifest, manifest_out.string());
      return;
    }

    if (s2r->parsed()) {
      pepp::JointNormalizer normalizer;
      pepp::Model model =
          load_model_and_normalizer(cfg.paths.checkpoint, &normalizer);
      pepp::RunManifest manifest =
          pepp::run_sim2real(model, normalizer, ds, cfg);
      manifest.checkpoint_path = ckpt_out.string();
      pepp::save_checkpoint(ckpt_out.string(), model,
                            {{"normalizer", normalizer.to_json()}});
      pepp::save_manifest(manifest, manifest_out.string());
      return;
    }

    if (ev->parsed()) {
      pepp::JointNormalizer normalizer;
      pepp::Model model =
          load_model_and_normalizer(cfg.paths.checkpoint, &normalizer);
      if (no_filter) cfg.eval.filter = false;
      std::vector<pepp::OcclusionRecord> occlusion;
      const bool occluded = !occlusion_path.empty();
      if (occluded)
        occlusion = pepp::load_occlusion_manifest(occlusion_path);
      const pepp::EvalRunResult result = pepp::run_eval(
          model, normalizer, ds, cfg, occluded ? &occlusion : nullptr);
      pepp::RunManifest manifest;
      manifest.op = "eval";
      manifest.config = cfg.to_json();
      manifest.seed = cfg.seed;
      manifest.normalizer = normalizer.to_json();
      manifest.metrics = {{"report", result.report.to_json()},
                          {"per_image", result.per_image}};
      if (occluded && !occlusion.empty())
        manifest.metrics["occlusion_ratio"] = occlusion.front().ratio;
      write_json(result.report.to_json(),
                 fs::path(cfg.paths.out) / "report.json");
      pepp::save_manifest(manifest, manifest_out.string());
      return;
    }

    throw pepp::ConfigError("no subcommand given");
  });
}
