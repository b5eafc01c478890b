#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace unveil {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

/// Axis-aligned rectangle in patch units. Zero-area boxes are allowed.
struct BBox {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  BBox() = default;
  /// Throws std::invalid_argument when the corners are out of order or not finite.
  BBox(double x1, double y1, double x2, double y2);

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  BBox translated(double dx, double dy) const;

  friend bool operator==(const BBox&, const BBox&) = default;
};

/// Intersection over union; 0 when the union has zero area.
double iou(const BBox& a, const BBox& b);

/// Patch-grid image with exactly one abnormal rectangle.
/// Patch index is row * width + col; features holds one row per patch.
struct GridImage {
  int height_patches = 0;
  int width_patches = 0;
  Matrix patch_features;
  BBox abnormal_region;
  int category_id = 0;

  int patch_count() const { return height_patches * width_patches; }
  int feature_dim() const { return static_cast<int>(patch_features.cols()); }
  void validate() const;
};

/// Indices of patches whose center lies strictly inside `region`.
std::vector<int> patches_in_region(const BBox& region, int height_patches, int width_patches);
std::vector<int> patches_in_region(const GridImage& image);

struct Sample {
  std::string id;
  GridImage image;
  TokenSeq query;
  TokenSeq reference_response;
  int gt_category = 0;
  BBox gt_bbox;
  std::set<std::string> split_tags;

  // Generator provenance, used to regenerate the image from a JSONL record.
  std::uint64_t generator_seed = 0;
  int dataset_family = 0;
  std::optional<BBox> hint;

  bool has_tag(const std::string& tag) const { return split_tags.count(tag) != 0; }
};

struct Response {
  TokenSeq tokens;
  std::optional<int> parsed_category;
  std::optional<BBox> parsed_bbox;
  bool schema_valid = false;
};

}  // namespace unveil
