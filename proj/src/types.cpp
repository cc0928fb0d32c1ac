#include "atomlens/types.hpp"

#include <bit>
#include <cmath>
#include <stdexcept>

namespace atomlens {

namespace {

bool bits_equal(double a, double b) {
  return std::bit_cast<uint64_t>(a) == std::bit_cast<uint64_t>(b);
}

}  // namespace

bool meta_equal(const ItemMeta& a, const ItemMeta& b) {
  if (a.image_id != b.image_id || a.subset != b.subset) return false;
  if (a.patch_row != b.patch_row || a.patch_col != b.patch_col) return false;
  if (a.is_cue != b.is_cue || a.label != b.label) return false;
  if (a.sam_alpha.has_value() != b.sam_alpha.has_value()) return false;
  if (a.sam_alpha) {
    if (a.sam_alpha->size() != b.sam_alpha->size()) return false;
    for (size_t i = 0; i < a.sam_alpha->size(); ++i)
      if (!bits_equal((*a.sam_alpha)[i], (*b.sam_alpha)[i])) return false;
  }
  return true;
}

void EmbeddingSet::validate() const {
  if (static_cast<size_t>(data.rows()) != meta.size())
    throw std::invalid_argument("EmbeddingSet: data row count != meta length");
  if (!data.allFinite())
    throw std::invalid_argument("EmbeddingSet: non-finite data");
  for (const ItemMeta& m : meta) {
    if (m.patch_row < -1 || m.patch_col < -1)
      throw std::invalid_argument("EmbeddingSet: patch index below -1");
    if (m.is_cue && (m.patch_row != 0 || m.patch_col != 0))
      throw std::invalid_argument("EmbeddingSet: cue flag off the (0,0) patch");
    if (m.sam_alpha) {
      for (double a : *m.sam_alpha)
        if (!(a >= 0.0 && a <= 1.0))
          throw std::invalid_argument("EmbeddingSet: sam_alpha outside [0,1]");
    }
  }
}

EmbeddingSet filter_non_cue(const EmbeddingSet& set) {
  return filter_items(set, [](const ItemMeta& m) { return !m.is_cue; });
}

void Dictionary::validate(bool allow_undercomplete) const {
  if (atoms.rows() < 1) throw std::invalid_argument("Dictionary: no atoms");
  if (!atoms.allFinite()) throw std::invalid_argument("Dictionary: non-finite atoms");
  for (Eigen::Index j = 0; j < atoms.rows(); ++j) {
    const double n = atoms.row(j).norm();
    if (std::abs(n - 1.0) > 1e-6)
      throw std::invalid_argument("Dictionary: atom " + std::to_string(j) +
                                  " not unit norm (norm=" + std::to_string(n) + ")");
  }
  if (!allow_undercomplete && atoms.rows() < atoms.cols())
    throw std::invalid_argument("Dictionary: undercomplete (n_dicts < n_dims)");
}

void SparseCodes::validate(Eigen::Index n_dicts) const {
  for (const Item& it : items) {
    if (it.atoms.size() != it.coeffs.size())
      throw std::invalid_argument("SparseCodes: atoms/coeffs length mismatch");
    if (n_nnz_budget > 0 && static_cast<int>(it.atoms.size()) > n_nnz_budget)
      throw std::invalid_argument("SparseCodes: support exceeds n_nnz budget");
    for (size_t k = 0; k < it.atoms.size(); ++k) {
      if (it.atoms[k] < 0 || it.atoms[k] >= n_dicts)
        throw std::invalid_argument("SparseCodes: atom index out of range");
      if (k > 0 && it.atoms[k] <= it.atoms[k - 1])
        throw std::invalid_argument("SparseCodes: atom indices not strictly increasing");
    }
  }
}

}  // namespace atomlens
