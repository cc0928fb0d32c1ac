#include "atomlens/crop_sampler.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "atomlens/rng.hpp"

namespace atomlens {

void BBox::validate() const {
  if (!(std::isfinite(x_min) && std::isfinite(y_min) && std::isfinite(x_max) &&
        std::isfinite(y_max)))
    throw std::invalid_argument("BBox: non-finite coordinate");
  if (!(x_min < x_max && y_min < y_max))
    throw std::invalid_argument("BBox: empty or inverted box");
  if (x_min < 0 || y_min < 0) throw std::invalid_argument("BBox: negative coordinate");
}

bool window_contains_bbox(const CropWindow& w, const BBox& bbox, double margin) {
  const double ex_min = bbox.x_min * w.scale - margin;
  const double ex_max = bbox.x_max * w.scale + margin;
  const double ey_min = bbox.y_min * w.scale - margin;
  const double ey_max = bbox.y_max * w.scale + margin;
  return w.x <= ex_min && ex_max <= w.x + w.size && w.y <= ey_min && ey_max <= w.y + w.size;
}

bool window_excludes_corners(const CropWindow& w,
                             const std::array<std::array<double, 2>, 4>& corners) {
  for (const auto& c : corners) {
    const bool inside =
        w.x <= c[0] && c[0] <= w.x + w.size && w.y <= c[1] && c[1] <= w.y + w.size;
    if (inside) return false;
  }
  return true;
}

CropWindow bogo_crop(int img_w, int img_h, const BBox& bbox, double margin, int size,
                     uint64_t rng_seed, int max_tries) {
  bbox.validate();
  if (size <= 0) throw std::invalid_argument("bogo_crop: size must be > 0");
  if (margin < 0) throw std::invalid_argument("bogo_crop: margin must be >= 0");
  if (max_tries < 1) throw std::invalid_argument("bogo_crop: max_tries must be >= 1");
  if (bbox.x_max > img_w || bbox.y_max > img_h)
    throw std::invalid_argument("bogo_crop: bbox outside image");

  // Smallest k such that the scaled bbox plus margins fits in a size window.
  double scale = 1.0;
  int k = 0;
  const double bw = bbox.x_max - bbox.x_min;
  const double bh = bbox.y_max - bbox.y_min;
  while (bw * scale + 2 * margin > size || bh * scale + 2 * margin > size) {
    scale *= 0.5;
    if (++k > 60)
      throw std::runtime_error("unsatisfiable: margin-expanded bbox cannot fit at any scale");
  }

  const int sw = static_cast<int>(std::floor(img_w * scale));
  const int sh = static_cast<int>(std::floor(img_h * scale));
  if (sw < size || sh < size)
    throw std::runtime_error("unsatisfiable: scaled image smaller than crop size");

  const double ex_min = bbox.x_min * scale - margin;
  const double ex_max = bbox.x_max * scale + margin;
  const double ey_min = bbox.y_min * scale - margin;
  const double ey_max = bbox.y_max * scale + margin;
  // Valid top-left offsets: x <= ex_min and x + size >= ex_max, within frame.
  const int x_lo = std::max(0, static_cast<int>(std::ceil(ex_max)) - size);
  const int x_hi = std::min(sw - size, static_cast<int>(std::floor(ex_min)));
  const int y_lo = std::max(0, static_cast<int>(std::ceil(ey_max)) - size);
  const int y_hi = std::min(sh - size, static_cast<int>(std::floor(ey_min)));
  if (x_lo > x_hi || y_lo > y_hi)
    throw std::runtime_error("unsatisfiable: no in-frame placement contains the expanded bbox");

  Rng rng(rng_seed);
  for (int t = 0; t < max_tries; ++t) {
    CropWindow w;
    w.size = size;
    w.scale = scale;
    w.x = static_cast<int>(rng.below(static_cast<uint64_t>(sw - size) + 1));
    w.y = static_cast<int>(rng.below(static_cast<uint64_t>(sh - size) + 1));
    if (window_contains_bbox(w, bbox, margin)) return w;
  }
  throw std::runtime_error("tries-exhausted: no containing window after " +
                           std::to_string(max_tries) + " tries");
}

CropWindow inverse_bogo_crop(int img_w, int img_h,
                             const std::array<std::array<double, 2>, 4>& corners, int size,
                             uint64_t rng_seed, int max_tries) {
  if (size <= 0) throw std::invalid_argument("inverse_bogo_crop: size must be > 0");
  if (max_tries < 1) throw std::invalid_argument("inverse_bogo_crop: max_tries must be >= 1");
  for (const auto& c : corners)
    if (!(std::isfinite(c[0]) && std::isfinite(c[1])))
      throw std::invalid_argument("inverse_bogo_crop: non-finite corner");
  if (img_w < size || img_h < size)
    throw std::runtime_error("unsatisfiable: image smaller than crop size");

  if (img_w == size && img_h == size) {
    CropWindow only{0, 0, size, 1.0};
    if (window_excludes_corners(only, corners)) return only;
    throw std::runtime_error("unsatisfiable: the single placement contains a corner");
  }

  Rng rng(rng_seed);
  for (int t = 0; t < max_tries; ++t) {
    CropWindow w;
    w.size = size;
    w.scale = 1.0;
    w.x = static_cast<int>(rng.below(static_cast<uint64_t>(img_w - size) + 1));
    w.y = static_cast<int>(rng.below(static_cast<uint64_t>(img_h - size) + 1));
    if (window_excludes_corners(w, corners)) return w;
  }
  throw std::runtime_error("tries-exhausted: no corner-free window after " +
                           std::to_string(max_tries) + " tries");
}

}  // namespace atomlens
