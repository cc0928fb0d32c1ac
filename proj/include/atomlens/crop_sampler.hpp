#pragma once

// Rejection samplers for crop windows: one that must contain a bounding box
// with a margin, and its complement that must exclude all four corner points.
// Pure geometry; no pixels are touched.

#include <array>
#include <cstdint>

namespace atomlens {

struct BBox {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;
  void validate() const;  // x_min < x_max, y_min < y_max, finite, >= 0
};

struct CropWindow {
  int x = 0;            // top-left corner, in scaled-image pixels
  int y = 0;
  int size = 224;       // side length
  double scale = 1.0;   // downsample factor applied before cropping; 2^-k
};

// True iff the window contains bbox scaled by window.scale and expanded by
// margin pixels on all sides.
bool window_contains_bbox(const CropWindow& w, const BBox& bbox, double margin);

// True iff no corner lies in the closed window rectangle (a corner exactly on
// the window edge counts as inside).
bool window_excludes_corners(const CropWindow& w,
                             const std::array<std::array<double, 2>, 4>& corners);

// Samples a size x size window containing bbox with the given margin. If the
// margin-expanded bbox does not fit at scale 1, the image is downsampled by
// powers of 2 until it does. Throws std::runtime_error("unsatisfiable: ...")
// when no placement can exist and ("tries-exhausted: ...") when max_tries
// rejections occur.
CropWindow bogo_crop(int img_w, int img_h, const BBox& bbox, double margin, int size,
                     uint64_t rng_seed, int max_tries);

// Samples a size x size window (scale 1) containing none of the four corners.
CropWindow inverse_bogo_crop(int img_w, int img_h,
                             const std::array<std::array<double, 2>, 4>& corners, int size,
                             uint64_t rng_seed, int max_tries);

}  // namespace atomlens
