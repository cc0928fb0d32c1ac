#pragma once

// Per-atom statistics over sparse codes: subset activation rates, coefficient
// of variation, the median-CV content/style split, head reliance scores, the
// content fraction, and the top-activating-patch manifest.

#include <Eigen/Dense>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "atomlens/sam_head.hpp"
#include "atomlens/types.hpp"

namespace atomlens {

enum class AtomLabel { Contentful, Stylistic, Inactive };

const char* to_string(AtomLabel label);
AtomLabel atom_label_from_string(const std::string& s);

struct ActivationRates {
  std::vector<std::string> subsets;  // subsets with items, first-appearance order
  Eigen::MatrixXd rate;              // n_dicts x n_subsets
};

// Exact counting of nonzero codes per atom per subset. item_subsets aligns
// with codes.items. Subsets with zero items simply do not appear.
ActivationRates activation_rates(const SparseCodes& codes,
                                 const std::vector<std::string>& item_subsets,
                                 Eigen::Index n_dicts);

// Population std over subset rates divided by their mean; nullopt for atoms
// whose rates are all zero. Throws "cv requires >=2 subsets".
std::vector<std::optional<double>> coefficient_of_variation(const ActivationRates& rates);

struct SplitResult {
  std::vector<AtomLabel> labels;
  double median_cv = 0.0;
  int n_at_median = 0;  // atoms whose CV ties the median (labeled stylistic)
};

// Median split over atoms with defined CV: strictly below the median is
// contentful, at or above is stylistic, undefined is inactive.
SplitResult split_content_style(const std::vector<std::optional<double>>& cvs);

struct RelianceScores {
  Eigen::VectorXd head_alignment;  // ||W d_j||
  Eigen::VectorXd mean_abs_coeff;  // mean |x_j| over all items, zeros included
  Eigen::VectorXd score;           // elementwise product
};

RelianceScores reliance_scores(const Dictionary& D, const HeadWeights& weights,
                               const SparseCodes& codes);

// Share of total reliance carried by contentful atoms. Throws "no reliance
// mass" when every score is zero.
double content_fraction(const Eigen::VectorXd& scores, const std::vector<AtomLabel>& labels);

struct ManifestRecord {
  int atom_id = 0;
  std::string image_id;
  int patch_row = -1;
  int patch_col = -1;
  double coeff = 0.0;
  int context_halfwidth = 3;
};

struct AtomManifest {
  int atom_id = 0;
  std::vector<ManifestRecord> records;  // |coeff| descending
  bool short_flag = false;              // fewer than n_viz activations existed
};

// Per requested atom, the n_viz items with the largest |coefficient|;
// deterministic tie-break by (image_id, patch index). meta indexes by the
// codes' item field.
std::vector<AtomManifest> top_activating_manifest(const SparseCodes& codes,
                                                  const std::vector<ItemMeta>& meta,
                                                  const std::vector<int>& atom_ids, int n_viz,
                                                  Eigen::Index n_dicts);

// Assembled per-atom table for export.
struct AtomProfile {
  int atom_id = 0;
  std::map<std::string, double> rates;
  std::optional<double> cv;
  AtomLabel label = AtomLabel::Inactive;
  double head_alignment = 0.0;
  double mean_abs_coeff = 0.0;
  double reliance_score = 0.0;
};

std::vector<AtomProfile> build_profiles(const ActivationRates& rates,
                                        const std::vector<std::optional<double>>& cvs,
                                        const SplitResult& split,
                                        const RelianceScores* reliance = nullptr);

void write_profiles_csv(const std::vector<AtomProfile>& profiles,
                        const std::vector<std::string>& subsets,
                        const std::filesystem::path& path);
void write_profiles_json(const std::vector<AtomProfile>& profiles,
                         const std::vector<std::string>& subsets, double median_cv,
                         std::optional<double> content_frac, const std::filesystem::path& path);
std::vector<AtomProfile> read_profiles_json(const std::filesystem::path& path,
                                            std::vector<std::string>* subsets = nullptr);

void write_manifest_jsonl(const std::vector<AtomManifest>& manifests,
                          const std::filesystem::path& path);

}  // namespace atomlens
