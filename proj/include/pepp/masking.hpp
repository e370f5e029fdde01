#pragma once

#include <algorithm>
#include <optional>
#include <random>
#include <vector>

#include "pepp/geometry.hpp"

namespace pepp {

struct PatchGrid {
  int image_h = 0, image_w = 0;
  int patch = 0;

  PatchGrid() = default;
  PatchGrid(int image_h, int image_w, int patch)
      : image_h(image_h), image_w(image_w), patch(patch) {
    if (patch <= 0 || image_h % patch != 0 || image_w % patch != 0)
      throw ConfigError("image size must be divisible by patch size");
  }

  int rows() const { return image_h / patch; }
  int cols() const { return image_w / patch; }
  int M() const { return rows() * cols(); }

  // Row-major patch id of the patch containing pixel (x, y).
  int patch_of(const Vec2& pixel) const {
    const int c = std::clamp(static_cast<int>(pixel.x()) / patch, 0, cols() - 1);
    const int r = std::clamp(static_cast<int>(pixel.y()) / patch, 0, rows() - 1);
    return r * cols() + c;
  }

  RectF patch_box(int id) const {
    const int r = id / cols();
    const int c = id % cols();
    return {static_cast<double>(c * patch), static_cast<double>(r * patch),
            static_cast<double>(patch), static_cast<double>(patch)};
  }
};

/// Partition of patch ids into context (B) and masked (B-bar) sets.
struct PatchMask {
  int M = 0;
  std::vector<int> context;  // sorted
  std::vector<int> masked;   // sorted

  static PatchMask from_masked_flags(const std::vector<char>& flags) {
    PatchMask mask;
    mask.M = static_cast<int>(flags.size());
    for (int i = 0; i < mask.M; ++i)
      (flags[i] ? mask.masked : mask.context).push_back(i);
    return mask;
  }

  static PatchMask empty(int M) {
    return from_masked_flags(std::vector<char>(M, 0));
  }

  bool is_partition() const {
    std::vector<char> seen(M, 0);
    for (int id : context) {
      if (id < 0 || id >= M || seen[id]) return false;
      seen[id] = 1;
    }
    for (int id : masked) {
      if (id < 0 || id >= M || seen[id]) return false;
      seen[id] = 1;
    }
    return std::all_of(seen.begin(), seen.end(), [](char c) { return c; });
  }
};

struct MaskRect {
  RectF rect;
  double coverage_fraction = 0.0;  // rect area / image area
  double aspect = 1.0;             // w / h
};

namespace mask_detail {

// A patch counts as masked when the rect overlaps at least half its area;
// single-pixel grazing must not hide a whole patch from the context set.
inline void mark_covered(const PatchGrid& grid, const RectF& rect,
                         std::vector<char>& flags) {
  const double half_patch_area = 0.5 * grid.patch * grid.patch;
  for (int id = 0; id < grid.M(); ++id) {
    const RectF box = grid.patch_box(id);
    const double ow = std::min(rect.right(), box.right()) -
                      std::max(rect.x, box.x);
    const double oh = std::min(rect.bottom(), box.bottom()) -
                      std::max(rect.y, box.y);
    if (ow > 0.0 && oh > 0.0 && ow * oh >= half_patch_area) flags[id] = 1;
  }
}

// Rect with area 15-20% of the image and aspect 0.75-1.5. When a joint pixel
// is given, the rect is positioned to fully contain that pixel's patch, which
// both satisfies "the mask covers the joint region" and guarantees the
// joint's patch passes the half-area rule above. Rect dimensions always
// exceed one patch for any grid whose patch count is at least 3x3.
inline MaskRect sample_rect(const PatchGrid& grid,
                            const std::optional<Vec2>& joint,
                            std::mt19937_64& rng) {
  std::uniform_real_distribution<double> ufrac(0.15, 0.20);
  std::uniform_real_distribution<double> uaspect(0.75, 1.5);
  const double frac = ufrac(rng);
  const double aspect = uaspect(rng);
  const double area = frac * grid.image_h * grid.image_w;
  const double w = std::sqrt(area * aspect);
  const double h = area / w;

  double x_lo = 0.0, x_hi = grid.image_w - w;
  double y_lo = 0.0, y_hi = grid.image_h - h;
  if (joint && w >= grid.patch && h >= grid.patch) {
    const RectF box = grid.patch_box(grid.patch_of(*joint));
    x_lo = std::max(x_lo, box.right() - w);
    x_hi = std::min(x_hi, box.x);
    y_lo = std::max(y_lo, box.bottom() - h);
    y_hi = std::min(y_hi, box.y);
  }
  std::uniform_real_distribution<double> ux(x_lo, std::max(x_lo, x_hi));
  std::uniform_real_distribution<double> uy(y_lo, std::max(y_lo, y_hi));
  MaskRect out;
  out.rect = {ux(rng), uy(rng), w, h};
  out.coverage_fraction = frac;
  out.aspect = aspect;
  return out;
}

inline std::vector<int> sample_without_replacement(int population, int count,
                                                   std::mt19937_64& rng) {
  std::vector<int> ids(population);
  for (int i = 0; i < population; ++i) ids[i] = i;
  const int take = std::min(count, population);
  for (int i = 0; i < take; ++i) {
    std::uniform_int_distribution<int> pick(i, population - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(take);
  return ids;
}

}  // namespace mask_detail

struct JointMaskResult {
  PatchMask mask;
  std::vector<MaskRect> rects;
};

/// Masks the regions around `count` randomly selected joints; joints outside
/// the view (absent) fall back to uniformly placed rects.
inline JointMaskResult sample_joint_masks_detailed(
    const PatchGrid& grid, const std::vector<std::optional<Vec2>>& joint_pixels,
    int count, uint64_t rng_seed) {
  if (count < 1) throw ConfigError("joint mask count must be >= 1");
  std::mt19937_64 rng(rng_seed);
  const auto selected = mask_detail::sample_without_replacement(
      static_cast<int>(joint_pixels.size()), count, rng);

  JointMaskResult result;
  std::vector<char> flags(grid.M(), 0);
  for (int i = 0; i < count; ++i) {
    std::optional<Vec2> joint;
    if (i < static_cast<int>(selected.size()))
      joint = joint_pixels[selected[i]];
    const MaskRect rect = mask_detail::sample_rect(grid, joint, rng);
    mask_detail::mark_covered(grid, rect.rect, flags);
    result.rects.push_back(rect);
  }
  result.mask = PatchMask::from_masked_flags(flags);
  return result;
}

inline PatchMask sample_joint_masks(
    const PatchGrid& grid, const std::vector<std::optional<Vec2>>& joint_pixels,
    int count, uint64_t rng_seed) {
  return sample_joint_masks_detailed(grid, joint_pixels, count, rng_seed).mask;
}

/// Uniform random patch subset covering up to max_fraction of the image:
/// draws f ~ U(0, max_fraction] and masks floor(f * M) patches.
inline PatchMask sample_random_mask(const PatchGrid& grid, double max_fraction,
                                    uint64_t rng_seed) {
  if (max_fraction < 0.0 || max_fraction > 1.0)
    throw ConfigError("mask fraction must lie in [0,1]");
  std::vector<char> flags(grid.M(), 0);
  if (max_fraction > 0.0) {
    std::mt19937_64 rng(rng_seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double frac = (1.0 - u(rng)) * max_fraction;  // in (0, max]
    const int take = static_cast<int>(frac * grid.M());
    for (int id : mask_detail::sample_without_replacement(grid.M(), take, rng))
      flags[id] = 1;
  }
  return PatchMask::from_masked_flags(flags);
}

// ---------------------------------------------------------------------------
// Occlusion benchmark occluders.
// ---------------------------------------------------------------------------

enum class OccluderShape { kRect, kCircle };

struct Occluder {
  OccluderShape shape = OccluderShape::kRect;
  Vec2 center = Vec2::Zero();
  double w = 0.0, h = 0.0;  // rect extents
  double radius = 0.0;      // circle radius

  double area() const {
    return shape == OccluderShape::kRect ? w * h : M_PI * radius * radius;
  }

  bool contains(const Vec2& p) const {
    if (shape == OccluderShape::kRect)
      return std::abs(p.x() - center.x()) <= 0.5 * w &&
             std::abs(p.y() - center.y()) <= 0.5 * h;
    return (p - center).norm() <= radius;
  }
};

/// Flat black occluder of area ratio * roi.area(), guaranteed to overlap the
/// robot region (approximated by the keypoint convex hull: the anchor point
/// below is a convex combination of keypoints, hence inside the hull).
inline Occluder generate_occlusion(const std::vector<Vec2>& robot_keypoints,
                                   const RectF& roi, double ratio,
                                   OccluderShape shape, uint64_t rng_seed) {
  if (ratio <= 0.0 || ratio >= 1.0)
    throw ConfigError("occlusion ratio must lie in (0,1)");
  if (robot_keypoints.empty())
    throw InfeasiblePlacement("robot region is empty");
  std::mt19937_64 rng(rng_seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  // Anchor: random convex combination of the keypoints.
  Eigen::VectorXd weights(robot_keypoints.size());
  for (int i = 0; i < weights.size(); ++i) weights(i) = u(rng) + 1e-6;
  weights /= weights.sum();
  Vec2 anchor = Vec2::Zero();
  for (size_t i = 0; i < robot_keypoints.size(); ++i)
    anchor += weights(static_cast<int>(i)) * robot_keypoints[i];

  Occluder occ;
  occ.shape = shape;
  const double area = ratio * roi.area();
  if (shape == OccluderShape::kRect) {
    std::uniform_real_distribution<double> uaspect(0.75, 1.5);
    const double aspect = uaspect(rng);
    occ.w = std::sqrt(area * aspect);
    occ.h = area / occ.w;
    // Center offset keeps the anchor strictly inside the occluder.
    occ.center = anchor + Vec2((u(rng) - 0.5) * occ.w * 0.9,
                               (u(rng) - 0.5) * occ.h * 0.9);
  } else {
    occ.radius = std::sqrt(area / M_PI);
    const double r = occ.radius * 0.9 * std::sqrt(u(rng));
    const double phi = 2.0 * M_PI * u(rng);
    occ.center = anchor + Vec2(r * std::cos(phi), r * std::sin(phi));
  }
  return occ;
}

// ---------------------------------------------------------------------------
// Bounding-box jitter curriculum.
// ---------------------------------------------------------------------------

/// Jitter amplitude schedule: 0 px for the first 30 epochs, then stepping
/// through 30/50/80/100 and saturating at 120 px from epoch 110 on.
inline double jitter_lambda(int epoch) {
  if (epoch < 30) return 0.0;
  if (epoch < 50) return 30.0;
  if (epoch < 70) return 50.0;
  if (epoch < 90) return 80.0;
  if (epoch < 110) return 100.0;
  return 120.0;
}

/// Expands each bbox edge outward by an independent U(0, lambda(epoch)) draw,
/// then clips to the image bounds.
inline RectF jitter_bbox(const RectF& bbox, int epoch, uint64_t rng_seed,
                         int image_w, int image_h) {
  const double lambda = jitter_lambda(epoch);
  if (lambda <= 0.0) return bbox.clipped(image_w, image_h);
  std::mt19937_64 rng(rng_seed);
  std::uniform_real_distribution<double> u(0.0, lambda);
  const double left = u(rng), top = u(rng), right = u(rng), bottom = u(rng);
  RectF out;
  out.x = bbox.x - left;
  out.y = bbox.y - top;
  out.w = bbox.w + left + right;
  out.h = bbox.h + top + bottom;
  return out.clipped(image_w, image_h);
}

}  // namespace pepp
