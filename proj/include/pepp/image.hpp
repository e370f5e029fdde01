#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>

#include "pepp/masking.hpp"

namespace pepp {

// ---------------------------------------------------------------------------
// Grayscale images are H x W matrices indexed (y, x) with intensities in
// [0, 1]. Integer pixel coordinates address pixel centers.
// ---------------------------------------------------------------------------

using ImageGray = Eigen::MatrixXd;

inline ImageGray image_zeros(int height, int width) {
  return Eigen::MatrixXd::Zero(height, width);
}

// ---------------------------------------------------------------------------
// Binary PGM (P5, 8-bit) round-trip.
// ---------------------------------------------------------------------------

inline void save_pgm(const std::string& path, const ImageGray& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open image for writing: " + path);
  out << "P5\n" << image.cols() << " " << image.rows() << "\n255\n";
  for (Eigen::Index y = 0; y < image.rows(); ++y)
    for (Eigen::Index x = 0; x < image.cols(); ++x) {
      const double v = std::clamp(image(y, x), 0.0, 1.0);
      out.put(static_cast<char>(
          static_cast<unsigned char>(std::lround(v * 255.0))));
    }
  if (!out) throw DataError("image write failed: " + path);
}

inline ImageGray load_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image: " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5") throw DataError("expected binary PGM (P5): " + path);
  int width = 0, height = 0, maxval = 0;
  in >> width >> height >> maxval;
  if (width <= 0 || height <= 0 || maxval != 255)
    throw DataError("unsupported PGM geometry: " + path);
  in.get();  // single whitespace after the header
  ImageGray image(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const int c = in.get();
      if (c == EOF) throw DataError("truncated PGM payload: " + path);
      image(y, x) = static_cast<double>(c) / 255.0;
    }
  return image;
}

// ---------------------------------------------------------------------------
// Anti-aliased primitives. Intensities composite with max, so overlapping
// strokes stay in range.
// ---------------------------------------------------------------------------

namespace img_detail {

inline double point_segment_distance(const Vec2& p, const Vec2& a,
                                     const Vec2& b) {
  const Vec2 ab = b - a;
  const double len2 = ab.squaredNorm();
  if (len2 < 1e-18) return (p - a).norm();
  const double t = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
  return (p - (a + t * ab)).norm();
}

}  // namespace img_detail

/// Stroke of the given half-width; edge coverage ramps linearly over 1 px.
inline void draw_segment(ImageGray& image, const Vec2& a, const Vec2& b,
                         double half_width, double intensity) {
  const double reach = half_width + 1.0;
  const int x0 = std::max(0, static_cast<int>(std::floor(
                                 std::min(a.x(), b.x()) - reach)));
  const int x1 = std::min(static_cast<int>(image.cols()) - 1,
                          static_cast<int>(std::ceil(std::max(a.x(), b.x()) +
                                                     reach)));
  const int y0 = std::max(0, static_cast<int>(std::floor(
                                 std::min(a.y(), b.y()) - reach)));
  const int y1 = std::min(static_cast<int>(image.rows()) - 1,
                          static_cast<int>(std::ceil(std::max(a.y(), b.y()) +
                                                     reach)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double d = img_detail::point_segment_distance(
          Vec2(x, y), a, b);
      const double coverage = std::clamp(half_width + 0.5 - d, 0.0, 1.0);
      if (coverage > 0.0)
        image(y, x) = std::max(image(y, x), coverage * intensity);
    }
}

/// Gaussian blob, peak `intensity` at the center.
inline void draw_blob(ImageGray& image, const Vec2& center, double sigma,
                      double intensity) {
  const double reach = 3.0 * sigma + 1.0;
  const int x0 = std::max(0, static_cast<int>(std::floor(center.x() - reach)));
  const int x1 = std::min(static_cast<int>(image.cols()) - 1,
                          static_cast<int>(std::ceil(center.x() + reach)));
  const int y0 = std::max(0, static_cast<int>(std::floor(center.y() - reach)));
  const int y1 = std::min(static_cast<int>(image.rows()) - 1,
                          static_cast<int>(std::ceil(center.y() + reach)));
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double d2 = (x - center.x()) * (x - center.x()) +
                        (y - center.y()) * (y - center.y());
      image(y, x) = std::max(image(y, x), intensity * std::exp(-d2 * inv));
    }
}

/// Fills an occluder with a flat intensity (overwrites, as a real obstruction
/// would).
inline void draw_occluder(ImageGray& image, const Occluder& occ,
                          double intensity) {
  for (Eigen::Index y = 0; y < image.rows(); ++y)
    for (Eigen::Index x = 0; x < image.cols(); ++x)
      if (occ.contains(Vec2(static_cast<double>(x), static_cast<double>(y))))
        image(y, x) = intensity;
}

// ---------------------------------------------------------------------------
// Crop / resize with an affine map shared by pixels, keypoints, and
// intrinsics: the longer box side is scaled to out_size, the short side is
// zero-padded at the bottom/right.
// ---------------------------------------------------------------------------

struct CropTransform {
  double scale = 1.0;
  double x0 = 0.0, y0 = 0.0;  // source-box origin

  Vec2 apply(const Vec2& p) const {
    return Vec2(scale * (p.x() - x0 + 0.5) - 0.5,
                scale * (p.y() - y0 + 0.5) - 0.5);
  }

  Vec2 invert(const Vec2& p) const {
    return Vec2((p.x() + 0.5) / scale + x0 - 0.5,
                (p.y() + 0.5) / scale + y0 - 0.5);
  }

  CameraIntrinsics apply(const CameraIntrinsics& K, int out_size) const {
    CameraIntrinsics out = K;
    out.fx = scale * K.fx;
    out.fy = scale * K.fy;
    const Vec2 pp = apply(Vec2(K.cx, K.cy));
    out.cx = pp.x();
    out.cy = pp.y();
    out.width = out_size;
    out.height = out_size;
    return out;
  }
};

inline double sample_bilinear(const ImageGray& image, double x, double y) {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0;
  const double fy = y - y0;
  const auto at = [&](int yy, int xx) -> double {
    if (yy < 0 || yy >= image.rows() || xx < 0 || xx >= image.cols())
      return 0.0;
    return image(yy, xx);
  };
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
         fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
}

struct CropResult {
  ImageGray image;
  CropTransform transform;
};

inline CropResult crop_resize(const ImageGray& source, const RectF& box,
                              int out_size) {
  if (box.w <= 0.0 || box.h <= 0.0)
    throw DataError("crop box must have positive extents");
  CropResult out;
  out.transform.scale = static_cast<double>(out_size) / std::max(box.w, box.h);
  out.transform.x0 = box.x;
  out.transform.y0 = box.y;
  out.image = image_zeros(out_size, out_size);
  for (int y = 0; y < out_size; ++y)
    for (int x = 0; x < out_size; ++x) {
      const Vec2 src = out.transform.invert(Vec2(x, y));
      // Zero padding past the source box (short side and image borders).
      if (src.x() < box.x - 0.5 || src.x() > box.right() + 0.5 ||
          src.y() < box.y - 0.5 || src.y() > box.bottom() + 0.5)
        continue;
      out.image(y, x) = sample_bilinear(source, src.x(), src.y());
    }
  return out;
}

}  // namespace pepp
