#pragma once

// Matching Pursuit sparse coding and batched K-SVD dictionary fitting, with
// dead-atom replacement and a held-out variance-explained diagnostic.

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "atomlens/sam_head.hpp"
#include "atomlens/types.hpp"

namespace atomlens {

struct KsvdConfig {
  int n_dicts = 512;
  int n_nnz = 8;
  int epochs = 3;
  int batch_size = 8192;
  uint64_t seed = 0;
  int dead_atom_threshold = 1;  // atoms used fewer times per epoch are replaced
  double tol = 0.0;             // convergence reporting only
};

struct FitReport {
  double variance_explained_heldout = 0.0;
  std::vector<double> epoch_recon_error;        // ||Z - DX||_F / ||Z||_F on the train pool
  std::vector<double> epoch_variance_heldout;   // after each epoch
  std::vector<int> dead_atoms_replaced;         // per epoch
  int converged_epoch = -1;  // first epoch whose relative error improvement fell below tol
};

struct MpResult {
  std::vector<int> atom_indices;     // in selection order
  std::vector<double> coefficients;  // matching order
  double residual_norm = 0.0;
};

// Greedy pursuit: repeatedly select the unused atom with the largest absolute
// correlation to the residual (ties to the lowest index), subtract its
// contribution, stop after n_nnz atoms or once the residual norm falls to
// 1e-10. Throws if the dictionary is not unit-norm within 1e-4.
MpResult matching_pursuit(const Eigen::VectorXd& z, const Dictionary& D, int n_nnz);

// Row-wise matching pursuit over a set; records carry sorted atom indices.
// n_threads > 1 splits items across threads (results are identical).
SparseCodes encode_all(const EmbeddingSet& set, const Dictionary& D, int n_nnz,
                       int n_threads = 1);

struct KsvdResult {
  Dictionary dictionary;
  FitReport report;
};

KsvdResult ksvd_fit(const EmbeddingSet& pool, const KsvdConfig& cfg, int n_threads = 1);

struct VarianceExplained {
  double value = 0.0;        // 1 - ||Z - DX||_F^2 / ||Z||_F^2, clipped to [0,1]
  bool all_zero = false;     // set is all zeros; value defined as 1
};

VarianceExplained variance_explained(const EmbeddingSet& set, const Dictionary& D, int n_nnz,
                                     int n_threads = 1);

struct ImportancePool {
  EmbeddingSet set;
  std::vector<std::string> short_images;  // images with fewer than top_k non-cue patches
};

// Per image, rank non-cue patches by total head attention (sum of alphas over
// keypoints) and keep the top_k highest; ties resolve to the lower patch
// index. Cue patches never enter the pool.
ImportancePool importance_sample_pool(const EmbeddingSet& set, const HeadWeights& weights,
                                      int top_k);

}  // namespace atomlens
