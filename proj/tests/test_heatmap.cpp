#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <random>

#include "pepp/heatmap.hpp"

using namespace pepp;

TEST_CASE("gaussian heatmap peaks at 1.0 on the center pixel") {
  const auto stack =
      gaussian_heatmap({Vec2(50, 60)}, /*height=*/80, /*width=*/80, 2.0);
  REQUIRE(stack.channels[0](60, 50) == Catch::Approx(1.0).margin(1e-15));
  // Two pixels along x: d^2 = 4, sigma^2 = 4 -> exp(-0.5).
  REQUIRE(stack.channels[0](60, 52) ==
          Catch::Approx(std::exp(-0.5)).margin(1e-12));
  REQUIRE(stack.channels[0](60, 52) == Catch::Approx(0.60653).margin(1e-5));
}

TEST_CASE("absent keypoints produce all-zero channels") {
  const auto stack =
      gaussian_heatmap({std::nullopt, Vec2(10, 10)}, 32, 32, 2.0);
  REQUIRE(stack.channels[0].sum() == 0.0);
  REQUIRE(stack.channels[1].sum() > 0.0);
}

TEST_CASE("gaussian heatmap rejects non-positive sigma") {
  REQUIRE_THROWS_AS(gaussian_heatmap({Vec2(1, 1)}, 8, 8, 0.0), ConfigError);
}

TEST_CASE("gaussian heatmap decreases monotonically along rays") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> uc(5.0, 58.0);
  std::uniform_real_distribution<double> ua(0.0, 2.0 * M_PI);
  for (int trial = 0; trial < 20; ++trial) {
    const Vec2 center(uc(rng), uc(rng));
    const auto stack = gaussian_heatmap({center}, 64, 64, 2.5);
    const double angle = ua(rng);
    double prev = 1.0 + 1e-12;
    for (double r = 0.0; r < 20.0; r += 1.0) {
      const int x = static_cast<int>(std::round(center.x() + r * std::cos(angle)));
      const int y = static_cast<int>(std::round(center.y() + r * std::sin(angle)));
      if (x < 0 || x >= 64 || y < 0 || y >= 64) break;
      const double v = stack.channels[0](y, x);
      REQUIRE(v <= prev + 1e-9);
      prev = v;
    }
  }
}

TEST_CASE("extract_peaks returns the argmax pixel and its value") {
  HeatmapStack stack = HeatmapStack::zeros(40, 40, 1);
  stack.channels[0](20, 10) = 0.9;  // pixel (x=10, y=20)
  const auto peaks = extract_peaks(stack);
  REQUIRE(peaks.size() == 1);
  REQUIRE(peaks[0].position == Vec2(10, 20));
  REQUIRE(peaks[0].confidence == 0.9);
  REQUIRE(peaks[0].index == 0);
}

TEST_CASE("extract_peaks breaks ties at the row-major first occurrence") {
  HeatmapStack stack = HeatmapStack::zeros(16, 16, 1);
  for (auto& c : stack.channels) c.setConstant(0.3);
  const auto peaks = extract_peaks(stack);
  REQUIRE(peaks[0].position == Vec2(0, 0));
  REQUIRE(peaks[0].confidence == 0.3);
}

TEST_CASE("extract_peaks round-trips gaussian_heatmap centers") {
  const auto stack = gaussian_heatmap({Vec2(50, 60)}, 80, 80, 2.0);
  const auto peaks = extract_peaks(stack);
  REQUIRE(peaks[0].position == Vec2(50, 60));
  REQUIRE(peaks[0].confidence == Catch::Approx(1.0).margin(1e-15));
}

TEST_CASE("extract_peaks confidence equals the channel maximum exactly") {
  std::mt19937_64 rng(32);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    HeatmapStack stack = HeatmapStack::zeros(12, 9, 3);
    for (auto& c : stack.channels)
      for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 9; ++x) c(y, x) = u(rng);
    const auto peaks = extract_peaks(stack);
    for (int c = 0; c < 3; ++c)
      REQUIRE(peaks[c].confidence == stack.channels[c].maxCoeff());
  }
}

namespace {
std::vector<Keypoint2D> from_confidences(const std::vector<double>& conf) {
  std::vector<Keypoint2D> kps(conf.size());
  for (size_t i = 0; i < conf.size(); ++i) {
    kps[i].confidence = conf[i];
    kps[i].index = static_cast<int>(i);
  }
  return kps;
}
}  // namespace

TEST_CASE("filter_keypoints relaxes the threshold in 0.025 steps") {
  const auto kps = from_confidences({0.9, 0.8, 0.1, 0.05, 0.9});
  const FilterResult result = filter_keypoints_detailed(kps, 0.5, 0.025, 4);
  REQUIRE(result.decrements == 17);
  REQUIRE(result.final_epsilon == Catch::Approx(0.075).margin(1e-12));
  REQUIRE(result.kept.size() == 4);
  std::vector<int> kept_ids;
  for (const auto& kp : result.kept) kept_ids.push_back(kp.index);
  REQUIRE(kept_ids == std::vector<int>{0, 1, 2, 4});
  REQUIRE_FALSE(result.exhausted);
}

TEST_CASE("filter_keypoints keeps everything already above the threshold") {
  const auto kps = from_confidences({0.99, 0.99, 0.99, 0.99, 0.99});
  const FilterResult result = filter_keypoints_detailed(kps, 0.5, 0.025, 4);
  REQUIRE(result.decrements == 0);
  REQUIRE(result.final_epsilon == 0.5);
  REQUIRE(result.kept.size() == 5);
}

TEST_CASE("filter_keypoints returns all when min_count is unreachable") {
  const auto kps = from_confidences({0.6, 0.2, 0.0});
  const auto result = filter_keypoints_detailed(kps, 0.5, 0.025, 4);
  REQUIRE(result.kept.size() == 3);
  REQUIRE(result.exhausted);
  REQUIRE(result.final_epsilon < 0.0);
}

TEST_CASE("filter_keypoints count is at least min(min_count, k)") {
  std::mt19937_64 rng(33);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> nk(1, 9);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> conf(nk(rng));
    for (auto& c : conf) c = u(rng);
    const auto kept = filter_keypoints(from_confidences(conf), 0.5, 0.025, 4);
    REQUIRE(kept.size() >=
            std::min<size_t>(4, conf.size()));
  }
}

TEST_CASE("heatmap binary files round-trip within float32 precision") {
  std::mt19937_64 rng(34);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  HeatmapStack stack = HeatmapStack::zeros(17, 23, 4);
  for (auto& c : stack.channels)
    for (int y = 0; y < 17; ++y)
      for (int x = 0; x < 23; ++x) c(y, x) = u(rng);

  const std::string path = "heatmap_roundtrip_test.bin";
  save_heatmaps(stack, path);
  const HeatmapStack loaded = load_heatmaps(path);
  std::remove(path.c_str());

  REQUIRE(loaded.height == 17);
  REQUIRE(loaded.width == 23);
  REQUIRE(loaded.k() == 4);
  for (int c = 0; c < 4; ++c)
    REQUIRE((loaded.channels[c] - stack.channels[c]).cwiseAbs().maxCoeff() <
            1e-6);
}

TEST_CASE("load_heatmaps rejects missing and truncated files") {
  REQUIRE_THROWS_AS(load_heatmaps("missing_heatmaps.bin"), DataError);
  const std::string path = "heatmap_truncated_test.bin";
  {
    HeatmapStack stack = HeatmapStack::zeros(8, 8, 2);
    save_heatmaps(stack, path);
  }
  // Chop the payload in half.
  {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  REQUIRE_THROWS_AS(load_heatmaps(path), DataError);
  std::remove(path.c_str());
}
