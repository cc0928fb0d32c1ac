#include "atomlens/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "atomlens/dictionary_learning.hpp"
#include "atomlens/rng.hpp"

namespace atomlens {

namespace {

const char* kSubsetNames[4] = {"xplane", "ges", "arcgis", "bingmaps"};

std::string subset_name(int s) {
  if (s < 4) return kSubsetNames[s];
  return "subset" + std::to_string(s);
}

std::string image_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "img%06d", i);
  return buf;
}

}  // namespace

void SynthConfig::validate() const {
  if (n_dims < 1 || n_dicts_true < 1) throw std::invalid_argument("synth: bad dims");
  if (n_subsets < 1) throw std::invalid_argument("synth: n_subsets must be >= 1");
  if (content_atom_count + n_subsets * style_atoms_per_subset != n_dicts_true)
    throw std::invalid_argument(
        "synth: content_atom_count + n_subsets*style_atoms_per_subset must equal n_dicts_true");
  if (content_atom_count < 1) throw std::invalid_argument("synth: need content atoms");
  for (int t : task_atom_ids)
    if (t < 0 || t >= content_atom_count)
      throw std::invalid_argument("synth: task atoms must be content atoms");
  if (static_cast<int>(task_atom_ids.size()) != n_kp)
    throw std::invalid_argument("synth: need one task atom per keypoint");
  if (content_atom_count - static_cast<int>(task_atom_ids.size()) < n_nnz_true)
    throw std::invalid_argument("synth: content pool too small once task atoms are excluded");
  if (n_nnz_true < 1 || n_nnz_true > n_dims) throw std::invalid_argument("synth: bad n_nnz_true");
  if (!(coeff_min > 0 && coeff_min <= coeff_max)) throw std::invalid_argument("synth: bad coeff range");
  if (noise_sigma < 0) throw std::invalid_argument("synth: negative noise");
  if (style_slot_prob < 0 || style_slot_prob > 1)
    throw std::invalid_argument("synth: style_slot_prob outside [0,1]");
  if (n_images < 1) throw std::invalid_argument("synth: n_images must be >= 1");
  if (grid < 1) throw std::invalid_argument("synth: grid must be >= 1");
  const int usable = patches_per_image() - (cue_patch ? 1 : 0);
  if (usable < n_kp)
    throw std::invalid_argument("synth: not enough non-cue patches for distinct keypoints");
}

Dictionary plant_dictionary(const SynthConfig& cfg) {
  // Only the dictionary-shape fields matter here; corpus-level settings are
  // checked by generate_corpus.
  if (cfg.n_dims < 1 || cfg.n_dicts_true < 1)
    throw std::invalid_argument("plant_dictionary: bad dims");
  Rng rng(derive_seed(cfg.seed, "plant-dict"));
  Dictionary D;
  D.atoms.resize(cfg.n_dicts_true, cfg.n_dims);
  int resamples = 0;
  for (int j = 0; j < cfg.n_dicts_true; ++j) {
    for (;;) {
      Eigen::VectorXd v(cfg.n_dims);
      for (int d = 0; d < cfg.n_dims; ++d) v(d) = rng.normal();
      const double n = v.norm();
      if (n < 1e-12) continue;
      v /= n;
      double cmax = 0.0;
      for (int i = 0; i < j; ++i) cmax = std::max(cmax, std::abs(D.atoms.row(i).dot(v)));
      if (cmax <= 0.5) {
        D.atoms.row(j) = v.transpose();
        break;
      }
      if (++resamples > 1000)
        throw std::runtime_error(
            "plant_dictionary: coherence cap 0.5 unattainable after 1000 resamples");
    }
  }
  return D;
}

SynthCorpus generate_corpus(const SynthConfig& cfg) {
  cfg.validate();
  SynthCorpus out;
  GroundTruth& truth = out.truth;
  truth.dict_true = plant_dictionary(cfg);
  truth.task_atom_ids = cfg.task_atom_ids;

  truth.atom_is_content.assign(static_cast<size_t>(cfg.n_dicts_true), false);
  for (int j = 0; j < cfg.content_atom_count; ++j) truth.atom_is_content[static_cast<size_t>(j)] = true;
  for (int s = 0; s < cfg.n_subsets; ++s) truth.subset_names.push_back(subset_name(s));

  // Head rows point along each task atom's component orthogonal to the style
  // span, so the planted head carries no alignment to any style atom.
  const int n_style = cfg.n_subsets * cfg.style_atoms_per_subset;
  Eigen::MatrixXd Q;  // orthonormal basis of the style span
  if (n_style > 0) {
    Eigen::MatrixXd S(cfg.n_dims, n_style);
    for (int c = 0; c < n_style; ++c)
      S.col(c) = truth.dict_true.atoms.row(cfg.content_atom_count + c).transpose();
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(S);
    const Eigen::Index rank = qr.rank();
    Eigen::MatrixXd Qfull = qr.householderQ();
    Q = Qfull.leftCols(rank);
  }
  truth.head_true.n_kp = cfg.n_kp;
  truth.head_true.grid = cfg.grid;
  truth.head_true.W.resize(cfg.n_kp, cfg.n_dims);
  for (int k = 0; k < cfg.n_kp; ++k) {
    Eigen::VectorXd w = truth.dict_true.atoms.row(cfg.task_atom_ids[static_cast<size_t>(k)]).transpose();
    if (Q.size() > 0) w -= Q * (Q.transpose() * w);
    const double n = w.norm();
    if (n < 1e-6)
      throw std::runtime_error("generate_corpus: task atom lies inside the style span");
    truth.head_true.W.row(k) = (cfg.head_gain / n) * w.transpose();
  }

  const int n_patches = cfg.patches_per_image();
  const Eigen::MatrixXd centers = patch_centers(cfg.grid);
  out.set.data.resize(static_cast<Eigen::Index>(cfg.n_images) * n_patches, cfg.n_dims);
  out.set.meta.reserve(static_cast<size_t>(cfg.n_images) * static_cast<size_t>(n_patches));

  std::vector<int> content_pool_ims, content_pool_ooms;
  for (int j = 0; j < cfg.content_atom_count; ++j) {
    content_pool_ims.push_back(j);
    if (std::find(cfg.task_atom_ids.begin(), cfg.task_atom_ids.end(), j) ==
        cfg.task_atom_ids.end())
      content_pool_ooms.push_back(j);
  }

  for (int i = 0; i < cfg.n_images; ++i) {
    const int subset_idx = i % cfg.n_subsets;
    const bool ims = ((i / cfg.n_subsets) % 2) == 0;
    Rng rng(derive_seed(cfg.seed, "image", static_cast<uint64_t>(i)));

    // Distinct non-cue keypoint patches.
    std::vector<int> candidates;
    for (int p = 0; p < n_patches; ++p)
      if (!(cfg.cue_patch && p == 0)) candidates.push_back(p);
    rng.shuffle(candidates);
    std::vector<int> kp_patches(candidates.begin(), candidates.begin() + cfg.n_kp);

    Eigen::MatrixXd targets(cfg.n_kp, 2);
    for (int k = 0; k < cfg.n_kp; ++k) targets.row(k) = centers.row(kp_patches[static_cast<size_t>(k)]);

    std::vector<int> style_pool;
    for (int a = 0; a < cfg.style_atoms_per_subset; ++a)
      style_pool.push_back(cfg.content_atom_count + subset_idx * cfg.style_atoms_per_subset + a);
    const std::vector<int>& content_pool = ims ? content_pool_ims : content_pool_ooms;

    for (int p = 0; p < n_patches; ++p) {
      // Redraw the patch until matching pursuit on the clean embedding
      // recovers the planted support; this keeps the downstream recovery
      // checks sound instead of flaky near the coherence cap.
      std::vector<int> support;
      std::vector<double> coeffs;
      Eigen::VectorXd z_clean;
      bool recoverable = false;
      for (int attempt = 0; attempt < 200 && !recoverable; ++attempt) {
        support.clear();
        coeffs.clear();
        if (ims) {
          for (int k = 0; k < cfg.n_kp; ++k) {
            if (kp_patches[static_cast<size_t>(k)] == p) {
              support.push_back(cfg.task_atom_ids[static_cast<size_t>(k)]);
              // Positive, upper-half magnitude: gives the planted head an
              // unambiguous attention peak at the keypoint patch.
              coeffs.push_back(rng.uniform(0.5 * (cfg.coeff_min + cfg.coeff_max), cfg.coeff_max));
            }
          }
        }
        while (static_cast<int>(support.size()) < cfg.n_nnz_true) {
          const bool style = !style_pool.empty() && rng.uniform() < cfg.style_slot_prob;
          const std::vector<int>& pool = style ? style_pool : content_pool;
          int atom = -1;
          for (int tries = 0; tries < 10000; ++tries) {
            const int cand = pool[static_cast<size_t>(rng.below(pool.size()))];
            if (std::find(support.begin(), support.end(), cand) == support.end()) {
              atom = cand;
              break;
            }
          }
          if (atom < 0) {
            for (int cand : pool)
              if (std::find(support.begin(), support.end(), cand) == support.end()) {
                atom = cand;
                break;
              }
          }
          if (atom < 0) throw std::runtime_error("generate_corpus: atom pool exhausted");
          support.push_back(atom);
          const double mag = rng.uniform(cfg.coeff_min, cfg.coeff_max);
          coeffs.push_back(rng.below(2) == 0 ? mag : -mag);
        }

        z_clean = Eigen::VectorXd::Zero(cfg.n_dims);
        for (size_t k = 0; k < support.size(); ++k)
          z_clean += coeffs[k] * truth.dict_true.atoms.row(support[k]).transpose();

        const MpResult mp = matching_pursuit(z_clean, truth.dict_true, cfg.n_nnz_true);
        std::vector<int> got = mp.atom_indices;
        std::vector<int> want = support;
        std::sort(got.begin(), got.end());
        std::sort(want.begin(), want.end());
        recoverable = (got == want);
      }
      if (!recoverable)
        throw std::runtime_error("generate_corpus: no pursuit-recoverable support after 200 draws");

      Eigen::VectorXd z = z_clean;
      if (cfg.noise_sigma > 0)
        for (int d = 0; d < cfg.n_dims; ++d) z(d) += cfg.noise_sigma * rng.normal();

      const Eigen::Index row = static_cast<Eigen::Index>(i) * n_patches + p;
      {
        SparseCodes::Item it;
        it.item = static_cast<int>(row);
        std::vector<size_t> ord(support.size());
        std::iota(ord.begin(), ord.end(), 0);
        std::sort(ord.begin(), ord.end(),
                  [&](size_t a, size_t b) { return support[a] < support[b]; });
        for (size_t k : ord) {
          it.atoms.push_back(support[k]);
          it.coeffs.push_back(coeffs[k]);
        }
        truth.planted_codes.items.push_back(std::move(it));
      }
      out.set.data.row(row) = z.cast<float>().transpose();
      ItemMeta m;
      m.image_id = image_name(i);
      m.subset = subset_name(subset_idx);
      m.patch_row = p / cfg.grid;
      m.patch_col = p % cfg.grid;
      m.is_cue = cfg.cue_patch && p == 0;
      m.label = ims ? "ims" : "ooms";
      out.set.meta.push_back(std::move(m));
    }

    truth.image_ids.push_back(image_name(i));
    truth.image_is_ims.push_back(ims);
    truth.keypoint_targets.push_back(std::move(targets));
    truth.keypoint_patches.push_back(std::move(kp_patches));
  }

  truth.planted_codes.n_nnz_budget = cfg.n_nnz_true;
  out.set.validate();
  return out;
}

namespace {

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
  const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
  const Eigen::Index cols = rows > 0 ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j.at(r).at(c).get<double>();
  return m;
}

}  // namespace

void save_ground_truth(const GroundTruth& truth, const std::filesystem::path& path) {
  nlohmann::json j;
  j["dict_true"] = matrix_to_json(truth.dict_true.atoms);
  j["w_star"] = matrix_to_json(truth.head_true.W);
  j["n_kp"] = truth.head_true.n_kp;
  j["grid"] = truth.head_true.grid;
  j["atom_is_content"] = truth.atom_is_content;
  j["task_atom_ids"] = truth.task_atom_ids;
  j["subset_names"] = truth.subset_names;
  j["image_ids"] = truth.image_ids;
  std::vector<std::string> labels;
  for (bool b : truth.image_is_ims) labels.push_back(b ? "ims" : "ooms");
  j["image_labels"] = labels;
  nlohmann::json targets = nlohmann::json::array();
  for (const auto& t : truth.keypoint_targets) targets.push_back(matrix_to_json(t));
  j["keypoint_targets"] = targets;
  j["keypoint_patches"] = truth.keypoint_patches;

  nlohmann::json atoms = nlohmann::json::array(), coeffs = nlohmann::json::array();
  for (const SparseCodes::Item& it : truth.planted_codes.items) {
    atoms.push_back(it.atoms);
    coeffs.push_back(it.coeffs);
  }
  j["planted_atoms"] = std::move(atoms);
  j["planted_coeffs"] = std::move(coeffs);
  j["planted_n_nnz"] = truth.planted_codes.n_nnz_budget;

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

GroundTruth load_ground_truth(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  nlohmann::json j = nlohmann::json::parse(in);
  GroundTruth t;
  t.dict_true.atoms = matrix_from_json(j.at("dict_true"));
  t.head_true.W = matrix_from_json(j.at("w_star"));
  t.head_true.n_kp = j.at("n_kp").get<int>();
  t.head_true.grid = j.at("grid").get<int>();
  t.atom_is_content = j.at("atom_is_content").get<std::vector<bool>>();
  t.task_atom_ids = j.at("task_atom_ids").get<std::vector<int>>();
  t.subset_names = j.at("subset_names").get<std::vector<std::string>>();
  t.image_ids = j.at("image_ids").get<std::vector<std::string>>();
  for (const std::string& s : j.at("image_labels").get<std::vector<std::string>>())
    t.image_is_ims.push_back(s == "ims");
  for (const auto& m : j.at("keypoint_targets")) t.keypoint_targets.push_back(matrix_from_json(m));
  t.keypoint_patches = j.at("keypoint_patches").get<std::vector<std::vector<int>>>();
  if (j.contains("planted_atoms")) {
    const auto atoms = j.at("planted_atoms").get<std::vector<std::vector<int>>>();
    const auto coeffs = j.at("planted_coeffs").get<std::vector<std::vector<double>>>();
    for (size_t i = 0; i < atoms.size(); ++i)
      t.planted_codes.items.push_back({static_cast<int>(i), atoms[i], coeffs[i]});
    t.planted_codes.n_nnz_budget = j.value("planted_n_nnz", 0);
  }
  return t;
}

}  // namespace atomlens
