#pragma once

// Out-of-model-scope classifier: binary atom-support features from
// sparse-coded image summaries, sign-constrained L1 logistic regression
// (projected gradient on the smooth box-constrained convex objective), AUROC
// with midranks, and the lambda sweep.

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "atomlens/atom_analysis.hpp"
#include "atomlens/dictionary_learning.hpp"
#include "atomlens/sam_head.hpp"
#include "atomlens/types.hpp"

namespace atomlens {

enum class Split { Train, Eval };

struct OomsDataset {
  Eigen::MatrixXd features;       // n_images x n_dicts, entries in {0,1}
  std::vector<bool> labels_ims;   // true = IMS
  std::vector<Split> split;

  Eigen::Index n_images() const { return features.rows(); }
  void validate(int n_nnz) const;
};

// Seeded stratified split: per class, round(train_frac * n) images go to
// train (clamped so neither side is empty once a class has two images).
std::vector<Split> make_split(const std::vector<bool>& labels, double train_frac, uint64_t seed);

// Binary support of the non-cue attention-pooled summary, sparse-coded at
// n_nnz. include[p] masks patches out of the pooling sum (the cue patch); the
// softmax still runs over the full grid.
Eigen::VectorXd summary_features(const Eigen::MatrixXd& Z, const std::vector<bool>& include,
                                 const HeadWeights& weights, const Dictionary& D, int n_nnz);

struct OomsModel {
  double bias = 0.0;            // <= 0
  Eigen::VectorXd weights;      // >= 0
  double lambda = 0.0;
  int n_nnz = 0;                // feature sparsity, carried for evaluation
  uint64_t seed = 0;

  std::vector<int> selected(double eps = 1e-8) const;
  void validate() const;
};

double predict_ims(const OomsModel& model, const Eigen::VectorXd& features);

// Mean train-split BCE plus lambda * sum(beta); the objective minimized by
// fit_ooms. Exposed so tests can compare against independent optimizers.
double ooms_objective(const OomsDataset& data, double bias, const Eigen::VectorXd& beta,
                      double lambda);

struct FitOomsConfig {
  int max_iter = 5000;
  double tol = 1e-8;  // projected-gradient infinity norm
  uint64_t seed = 0;
};

OomsModel fit_ooms(const OomsDataset& data, double lambda, const FitOomsConfig& cfg);

// Mann-Whitney AUROC with midranks for ties. Throws on single-class input.
double auroc(const std::vector<double>& scores, const std::vector<bool>& labels);

struct SweepPoint {
  double lambda = 0.0;
  int n_selected = 0;
  double auroc = 0.0;
  double content_fraction_selected = 0.0;  // NaN when nothing is selected
  uint64_t seed = 0;
};

// Fit per lambda on the train split, evaluate AUROC on the eval split, count
// selected atoms and their contentful fraction. atom_labels may be empty, in
// which case the content fraction is NaN.
std::vector<SweepPoint> lambda_sweep(const OomsDataset& data, const std::vector<double>& lambdas,
                                     const std::vector<AtomLabel>& atom_labels,
                                     const FitOomsConfig& cfg);

void write_sweep_csv(const std::vector<SweepPoint>& points, const std::filesystem::path& path);

void save_ooms_model(const OomsModel& model, const std::filesystem::path& path);
OomsModel load_ooms_model(const std::filesystem::path& path, Eigen::Index n_dicts);

}  // namespace atomlens
