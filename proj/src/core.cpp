#include "unveil/core.hpp"

#include <algorithm>
#include <cmath>

namespace unveil {

BBox::BBox(double x1_, double y1_, double x2_, double y2_) : x1(x1_), y1(y1_), x2(x2_), y2(y2_) {
  if (!std::isfinite(x1) || !std::isfinite(y1) || !std::isfinite(x2) || !std::isfinite(y2)) {
    throw std::invalid_argument("bbox coordinates must be finite");
  }
  if (x1 > x2 || y1 > y2) {
    throw std::invalid_argument("bbox corners out of order");
  }
}

BBox BBox::translated(double dx, double dy) const { return BBox(x1 + dx, y1 + dy, x2 + dx, y2 + dy); }

double iou(const BBox& a, const BBox& b) {
  const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double overlap = ix * iy;
  const double uni = a.area() + b.area() - overlap;
  if (uni <= 0.0) return 0.0;
  return std::clamp(overlap / uni, 0.0, 1.0);
}

void GridImage::validate() const {
  if (height_patches <= 0 || width_patches <= 0) throw std::invalid_argument("grid dimensions must be positive");
  if (patch_features.rows() != patch_count()) throw std::invalid_argument("patch feature rows != patch count");
  const auto& r = abnormal_region;
  if (r.x1 < 0 || r.y1 < 0 || r.x2 > width_patches || r.y2 > height_patches) {
    throw std::invalid_argument("abnormal region outside the grid");
  }
}

std::vector<int> patches_in_region(const BBox& region, int height_patches, int width_patches) {
  std::vector<int> out;
  for (int row = 0; row < height_patches; ++row) {
    const double cy = row + 0.5;
    if (!(cy > region.y1 && cy < region.y2)) continue;
    for (int col = 0; col < width_patches; ++col) {
      const double cx = col + 0.5;
      if (cx > region.x1 && cx < region.x2) out.push_back(row * width_patches + col);
    }
  }
  return out;
}

std::vector<int> patches_in_region(const GridImage& image) {
  return patches_in_region(image.abnormal_region, image.height_patches, image.width_patches);
}

}  // namespace unveil
