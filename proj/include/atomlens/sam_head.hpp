#pragma once

// Soft-argmax keypoint head over patch embeddings: per-keypoint logits from a
// linear map, softmax attention over the patch grid, coordinates as the
// attention-weighted average of patch centers, attention-pooled embedding
// summaries, Huber loss, and the analytic gradient used for head-only fits.

#include <Eigen/Dense>
#include <filesystem>
#include <vector>

#include "atomlens/types.hpp"

namespace atomlens {

struct HeadWeights {
  Eigen::MatrixXd W;  // n_kp x n_dims
  int n_kp = 0;
  int grid = 0;

  void validate() const;
};

struct KeypointPrediction {
  Eigen::MatrixXd coords;  // n_kp x 2, (u, v) in [0,1]
  Eigen::MatrixXd alphas;  // n_patches x n_kp, columns sum to 1
};

struct PooledSummaries {
  Eigen::MatrixXd per_keypoint;  // n_kp x n_dims
  Eigen::VectorXd mean;          // n_dims
};

struct HuberResult {
  double value = 0.0;
  bool any_visible = false;
};

// Normalized patch centers in row-major order: ((col+0.5)/grid, (row+0.5)/grid).
Eigen::MatrixXd patch_centers(int grid);

KeypointPrediction predict(const Eigen::MatrixXd& Z, const HeadWeights& weights);

PooledSummaries pooled_summaries(const Eigen::MatrixXd& Z, const HeadWeights& weights);

// Variant that pools only over patches with include[p] set; the softmax is
// still taken over the full grid. Used for non-cue summaries.
PooledSummaries pooled_summaries(const Eigen::MatrixXd& Z, const HeadWeights& weights,
                                 const std::vector<bool>& include);

// Mean Huber over visible keypoints and both coordinates; quadratic inside
// delta, linear outside. value = 0 with any_visible = false if nothing is
// visible.
HuberResult huber_loss(const Eigen::MatrixXd& pred_coords, const Eigen::MatrixXd& target_coords,
                       const std::vector<bool>& visibility, double delta);

// Analytic d huber_loss(predict(Z, W)) / dW.
Eigen::MatrixXd head_gradient(const Eigen::MatrixXd& Z, const HeadWeights& weights,
                              const Eigen::MatrixXd& target_coords,
                              const std::vector<bool>& visibility, double delta);

struct KeypointTargets {
  Eigen::MatrixXd coords;         // n_kp x 2
  std::vector<bool> visibility;   // n_kp
};

struct FitHeadConfig {
  double lr = 100.0;
  int epochs = 200;
  uint64_t seed = 0;
  double delta = 8.0 / 224.0;
};

struct FitHeadResult {
  HeadWeights weights;
  std::vector<double> epoch_loss;  // mean training loss after each epoch
};

// Full-batch gradient descent on the head alone, seeded Gaussian init
// (std 0.01). Deterministic given the seed.
FitHeadResult fit_head(const std::vector<Eigen::MatrixXd>& images,
                       const std::vector<KeypointTargets>& targets, int n_kp, int grid,
                       const FitHeadConfig& cfg);

// Head weights travel as an EMBZ dictionary-kind container (n_kp rows) plus a
// "<path>.json" sidecar carrying {"n_kp", "grid"}.
void save_head_weights(const HeadWeights& weights, const std::filesystem::path& path);
HeadWeights load_head_weights(const std::filesystem::path& path);

}  // namespace atomlens
