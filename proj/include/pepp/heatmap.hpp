#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "pepp/geometry.hpp"

namespace pepp {

/// Stack of k single-channel maps; channel element (y, x) is the value at
/// pixel (x, y). Entries live in [0,1].
struct HeatmapStack {
  int height = 0, width = 0;
  std::vector<Eigen::MatrixXd> channels;  // each height x width

  int k() const { return static_cast<int>(channels.size()); }

  static HeatmapStack zeros(int height, int width, int k) {
    HeatmapStack stack;
    stack.height = height;
    stack.width = width;
    stack.channels.assign(k, Eigen::MatrixXd::Zero(height, width));
    return stack;
  }
};

struct Keypoint2D {
  Vec2 position = Vec2::Zero();  // (x, y) pixels
  double confidence = 0.0;
  int index = 0;
};

/// Unnormalized Gaussian bump per keypoint: value exp(-d^2 / (2 sigma^2)),
/// peak 1.0 at the center pixel. Absent centers yield all-zero channels.
inline HeatmapStack gaussian_heatmap(
    const std::vector<std::optional<Vec2>>& centers, int height, int width,
    double sigma) {
  if (sigma <= 0.0) throw ConfigError("gaussian_heatmap requires sigma > 0");
  HeatmapStack stack = HeatmapStack::zeros(height, width, centers.size());
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (size_t c = 0; c < centers.size(); ++c) {
    if (!centers[c]) continue;
    const double cx = centers[c]->x();
    const double cy = centers[c]->y();
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        stack.channels[c](y, x) = std::exp(-d2 * inv);
      }
  }
  return stack;
}

/// Per-channel argmax with its value as confidence; row-major first
/// occurrence wins ties.
inline std::vector<Keypoint2D> extract_peaks(const HeatmapStack& stack) {
  std::vector<Keypoint2D> peaks;
  peaks.reserve(stack.k());
  for (int c = 0; c < stack.k(); ++c) {
    Keypoint2D kp;
    kp.index = c;
    kp.confidence = -1.0;
    for (int y = 0; y < stack.height; ++y)
      for (int x = 0; x < stack.width; ++x)
        if (stack.channels[c](y, x) > kp.confidence) {
          kp.confidence = stack.channels[c](y, x);
          kp.position = Vec2(x, y);
        }
    peaks.push_back(kp);
  }
  return peaks;
}

struct FilterResult {
  std::vector<Keypoint2D> kept;  // original order
  double final_epsilon = 0.0;
  int decrements = 0;
  bool exhausted = false;  // threshold underflowed without reaching min_count
};

/// Keeps keypoints with confidence strictly above a threshold that relaxes
/// in fixed decrements until at least min_count survive; once the threshold
/// underflows zero everything is returned.
inline FilterResult filter_keypoints_detailed(
    const std::vector<Keypoint2D>& keypoints, double epsilon0 = 0.5,
    double step = 0.025, int min_count = 4) {
  if (epsilon0 <= 0.0 || epsilon0 > 1.0)
    throw ConfigError("filter threshold must lie in (0,1]");
  if (step <= 0.0 || min_count < 1)
    throw ConfigError("filter step must be positive and min_count >= 1");
  FilterResult result;
  for (int j = 0;; ++j) {
    // Decimal schedules like 0.5 - 17*0.025 must hit 0.075 exactly; snap to
    // a 1e-12 grid so binary representation error cannot shift a boundary
    // comparison such as 0.1 > epsilon by one decrement.
    const double eps = std::round((epsilon0 - j * step) * 1e12) / 1e12;
    result.kept.clear();
    for (const auto& kp : keypoints)
      if (kp.confidence > eps) result.kept.push_back(kp);
    result.final_epsilon = eps;
    result.decrements = j;
    if (static_cast<int>(result.kept.size()) >= min_count) return result;
    if (eps < 0.0) {  // everything already passes; min_count unreachable
      result.kept = keypoints;
      result.exhausted = true;
      return result;
    }
  }
}

inline std::vector<Keypoint2D> filter_keypoints(
    const std::vector<Keypoint2D>& keypoints, double epsilon0 = 0.5,
    double step = 0.025, int min_count = 4) {
  return filter_keypoints_detailed(keypoints, epsilon0, step, min_count).kept;
}

// ---------------------------------------------------------------------------
// Flat binary serialization: header (H, W, k as uint32 LE), then channel-major
// float32 values in row-major pixel order.
// ---------------------------------------------------------------------------

namespace detail {
inline void put_u32(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}
}  // namespace detail

inline void save_heatmaps(const HeatmapStack& stack, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write heatmap file: " + path);
  detail::put_u32(out, static_cast<uint32_t>(stack.height));
  detail::put_u32(out, static_cast<uint32_t>(stack.width));
  detail::put_u32(out, static_cast<uint32_t>(stack.k()));
  for (const auto& channel : stack.channels)
    for (int y = 0; y < stack.height; ++y)
      for (int x = 0; x < stack.width; ++x) {
        const float v = static_cast<float>(channel(y, x));
        out.write(reinterpret_cast<const char*>(&v), sizeof(float));
      }
}

inline HeatmapStack load_heatmaps(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read heatmap file: " + path);
  const uint32_t height = detail::get_u32(in);
  const uint32_t width = detail::get_u32(in);
  const uint32_t k = detail::get_u32(in);
  HeatmapStack stack = HeatmapStack::zeros(height, width, k);
  for (auto& channel : stack.channels)
    for (uint32_t y = 0; y < height; ++y)
      for (uint32_t x = 0; x < width; ++x) {
        float v = 0.0f;
        in.read(reinterpret_cast<char*>(&v), sizeof(float));
        channel(y, x) = v;
      }
  if (!in) throw DataError("truncated heatmap file: " + path);
  return stack;
}

}  // namespace pepp
