#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

namespace atomlens {

// Row-major so that the in-memory layout matches the EMBZ payload exactly.
using MatrixXfRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Per-item metadata carried alongside each embedding row. Image-level
// summaries use patch_row = patch_col = -1.
struct ItemMeta {
  std::string image_id;
  std::string subset;
  int patch_row = -1;
  int patch_col = -1;
  bool is_cue = false;
  std::optional<std::vector<double>> sam_alpha;  // per-keypoint attention at this patch
  std::optional<std::string> label;              // e.g. "ims" / "ooms"
};

bool meta_equal(const ItemMeta& a, const ItemMeta& b);  // doubles compared bitwise

// Matrix of per-patch (or per-summary) embedding vectors plus metadata.
struct EmbeddingSet {
  MatrixXfRM data;  // n_items x n_dims
  std::vector<ItemMeta> meta;

  Eigen::Index n_items() const { return data.rows(); }
  Eigen::Index n_dims() const { return data.cols(); }

  // Throws std::invalid_argument on any invariant violation: meta length
  // mismatch, non-finite entries, cue flag off the (0,0) patch.
  void validate() const;
};

// Keep items for which pred(meta) holds, preserving order.
template <typename Pred>
EmbeddingSet filter_items(const EmbeddingSet& set, Pred pred) {
  EmbeddingSet out;
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < set.n_items(); ++i)
    if (pred(set.meta[static_cast<size_t>(i)])) keep.push_back(i);
  out.data.resize(static_cast<Eigen::Index>(keep.size()), set.n_dims());
  out.meta.reserve(keep.size());
  for (size_t r = 0; r < keep.size(); ++r) {
    out.data.row(static_cast<Eigen::Index>(r)) = set.data.row(keep[r]);
    out.meta.push_back(set.meta[static_cast<size_t>(keep[r])]);
  }
  return out;
}

// Drops cue patches (the top-left marker patch excluded from all analyses).
EmbeddingSet filter_non_cue(const EmbeddingSet& set);

// Set of unit-norm atom direction vectors, one per row.
struct Dictionary {
  Eigen::MatrixXd atoms;  // n_dicts x n_dims

  Eigen::Index n_dicts() const { return atoms.rows(); }
  Eigen::Index n_dims() const { return atoms.cols(); }

  // Unit-norm rows within 1e-6; overcomplete (n_dicts >= n_dims) unless
  // allow_undercomplete is set.
  void validate(bool allow_undercomplete = false) const;
};

// Sparse coefficient records under a fixed per-item sparsity budget.
struct SparseCodes {
  struct Item {
    int item = 0;                // index into the originating embedding set
    std::vector<int> atoms;      // strictly increasing
    std::vector<double> coeffs;  // same length
  };
  std::vector<Item> items;
  int n_nnz_budget = 0;

  void validate(Eigen::Index n_dicts) const;
};

}  // namespace atomlens
