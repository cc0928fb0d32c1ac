#pragma once

// Synthetic corpus generator with a planted dictionary, planted content/style
// atom structure, planted head weights, and planted IMS/OOMS image labels.
// Every quantity the analysis pipeline estimates is known exactly here, which
// is what makes the end-to-end checks sound.

#include <filesystem>
#include <string>
#include <vector>

#include "atomlens/sam_head.hpp"
#include "atomlens/types.hpp"

namespace atomlens {

struct SynthConfig {
  int n_dims = 64;
  int n_dicts_true = 96;
  int n_subsets = 4;
  int content_atom_count = 48;      // atoms [0, content_atom_count)
  int style_atoms_per_subset = 12;  // remainder, partitioned per subset
  std::vector<int> task_atom_ids = {0, 1, 2, 3};
  int n_images = 500;
  int grid = 4;  // patches_per_image = grid^2
  int n_nnz_true = 4;
  double coeff_min = 0.5;
  double coeff_max = 1.5;
  double noise_sigma = 0.01;
  double style_slot_prob = 0.5;  // chance a support slot draws from the style pool
  double head_gain = 40.0;       // logit scale of the planted head
  int n_kp = 4;
  bool cue_patch = true;  // mark patch (0,0) of every image as the cue
  uint64_t seed = 1;

  int patches_per_image() const { return grid * grid; }
  void validate() const;
};

struct GroundTruth {
  Dictionary dict_true;
  HeadWeights head_true;  // rows orthogonal to the style-atom span
  std::vector<bool> atom_is_content;
  std::vector<int> task_atom_ids;
  std::vector<std::string> subset_names;
  std::vector<std::string> image_ids;
  std::vector<bool> image_is_ims;
  std::vector<Eigen::MatrixXd> keypoint_targets;   // per image, n_kp x 2 patch centers
  std::vector<std::vector<int>> keypoint_patches;  // per image, planted patch per keypoint
  SparseCodes planted_codes;                       // exact per-patch supports and coefficients
};

// Unit-norm seeded Gaussian atoms, resampled per atom until the max pairwise
// |cosine| stays at or below 0.5. Throws after 1000 resamples.
Dictionary plant_dictionary(const SynthConfig& cfg);

struct SynthCorpus {
  EmbeddingSet set;
  GroundTruth truth;
};

SynthCorpus generate_corpus(const SynthConfig& cfg);

void save_ground_truth(const GroundTruth& truth, const std::filesystem::path& path);
GroundTruth load_ground_truth(const std::filesystem::path& path);

}  // namespace atomlens
