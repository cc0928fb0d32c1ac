#include "atomlens/atom_analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace atomlens {

const char* to_string(AtomLabel label) {
  switch (label) {
    case AtomLabel::Contentful: return "contentful";
    case AtomLabel::Stylistic: return "stylistic";
    case AtomLabel::Inactive: return "inactive";
  }
  return "inactive";
}

AtomLabel atom_label_from_string(const std::string& s) {
  if (s == "contentful") return AtomLabel::Contentful;
  if (s == "stylistic") return AtomLabel::Stylistic;
  if (s == "inactive") return AtomLabel::Inactive;
  throw std::invalid_argument("unknown atom label: " + s);
}

ActivationRates activation_rates(const SparseCodes& codes,
                                 const std::vector<std::string>& item_subsets,
                                 Eigen::Index n_dicts) {
  if (item_subsets.size() != codes.items.size())
    throw std::invalid_argument("activation_rates: subset tags length mismatch");

  ActivationRates out;
  std::map<std::string, int> subset_index;
  std::vector<long> subset_count;
  for (const std::string& s : item_subsets) {
    if (subset_index.find(s) == subset_index.end()) {
      subset_index[s] = static_cast<int>(out.subsets.size());
      out.subsets.push_back(s);
      subset_count.push_back(0);
    }
    ++subset_count[static_cast<size_t>(subset_index[s])];
  }

  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(n_dicts, static_cast<Eigen::Index>(out.subsets.size()));
  for (size_t i = 0; i < codes.items.size(); ++i) {
    const int s = subset_index[item_subsets[i]];
    const SparseCodes::Item& it = codes.items[i];
    for (size_t k = 0; k < it.atoms.size(); ++k) {
      if (it.coeffs[k] == 0.0) continue;
      if (it.atoms[k] < 0 || it.atoms[k] >= n_dicts)
        throw std::invalid_argument("activation_rates: atom index " + std::to_string(it.atoms[k]) +
                                    " outside n_dicts=" + std::to_string(n_dicts));
      counts(it.atoms[k], s) += 1.0;
    }
  }

  out.rate.resize(n_dicts, counts.cols());
  for (Eigen::Index s = 0; s < counts.cols(); ++s)
    out.rate.col(s) = counts.col(s) / static_cast<double>(subset_count[static_cast<size_t>(s)]);
  return out;
}

std::vector<std::optional<double>> coefficient_of_variation(const ActivationRates& rates) {
  if (rates.subsets.size() < 2)
    throw std::invalid_argument("cv requires >=2 subsets");
  const Eigen::Index n_subsets = rates.rate.cols();
  std::vector<std::optional<double>> cvs(static_cast<size_t>(rates.rate.rows()));
  for (Eigen::Index j = 0; j < rates.rate.rows(); ++j) {
    const double mean = rates.rate.row(j).mean();
    if (mean == 0.0) continue;  // inactive atom: CV undefined
    double var = 0.0;
    for (Eigen::Index s = 0; s < n_subsets; ++s) {
      const double d = rates.rate(j, s) - mean;
      var += d * d;
    }
    var /= static_cast<double>(n_subsets);  // population std
    cvs[static_cast<size_t>(j)] = std::sqrt(var) / mean;
  }
  return cvs;
}

SplitResult split_content_style(const std::vector<std::optional<double>>& cvs) {
  std::vector<double> defined;
  for (const auto& cv : cvs)
    if (cv) defined.push_back(*cv);
  if (defined.empty())
    throw std::invalid_argument("split_content_style: no atom with a defined CV");

  std::sort(defined.begin(), defined.end());
  const size_t n = defined.size();
  const double median =
      (n % 2 == 1) ? defined[n / 2] : 0.5 * (defined[n / 2 - 1] + defined[n / 2]);

  SplitResult out;
  out.median_cv = median;
  out.labels.resize(cvs.size(), AtomLabel::Inactive);
  for (size_t j = 0; j < cvs.size(); ++j) {
    if (!cvs[j]) continue;
    if (*cvs[j] < median) {
      out.labels[j] = AtomLabel::Contentful;
    } else {
      out.labels[j] = AtomLabel::Stylistic;  // ties go to the stylistic side
      if (*cvs[j] == median) ++out.n_at_median;
    }
  }
  return out;
}

RelianceScores reliance_scores(const Dictionary& D, const HeadWeights& weights,
                               const SparseCodes& codes) {
  if (weights.W.cols() != D.n_dims())
    throw std::invalid_argument("reliance_scores: head n_dims=" + std::to_string(weights.W.cols()) +
                                " != dictionary n_dims=" + std::to_string(D.n_dims()));
  if (codes.items.empty()) throw std::invalid_argument("reliance_scores: no items");

  const Eigen::Index n_dicts = D.n_dicts();
  RelianceScores out;
  out.head_alignment.resize(n_dicts);
  for (Eigen::Index j = 0; j < n_dicts; ++j)
    out.head_alignment(j) = (weights.W * D.atoms.row(j).transpose()).norm();

  // Compensated summation keeps the per-atom means reproducible regardless of
  // accumulation batching.
  std::vector<double> sum(static_cast<size_t>(n_dicts), 0.0);
  std::vector<double> comp(static_cast<size_t>(n_dicts), 0.0);
  for (const SparseCodes::Item& it : codes.items) {
    for (size_t k = 0; k < it.atoms.size(); ++k) {
      if (it.atoms[k] < 0 || it.atoms[k] >= n_dicts)
        throw std::invalid_argument("reliance_scores: atom index out of range");
      const size_t j = static_cast<size_t>(it.atoms[k]);
      const double y = std::abs(it.coeffs[k]) - comp[j];
      const double t = sum[j] + y;
      comp[j] = (t - sum[j]) - y;
      sum[j] = t;
    }
  }
  const double inv_n = 1.0 / static_cast<double>(codes.items.size());
  out.mean_abs_coeff.resize(n_dicts);
  for (Eigen::Index j = 0; j < n_dicts; ++j)
    out.mean_abs_coeff(j) = sum[static_cast<size_t>(j)] * inv_n;
  out.score = out.head_alignment.cwiseProduct(out.mean_abs_coeff);
  return out;
}

double content_fraction(const Eigen::VectorXd& scores, const std::vector<AtomLabel>& labels) {
  if (labels.size() != static_cast<size_t>(scores.size()))
    throw std::invalid_argument("content_fraction: labels length mismatch");
  double total = 0.0, content = 0.0;
  for (Eigen::Index j = 0; j < scores.size(); ++j) {
    if (scores(j) < 0) throw std::invalid_argument("content_fraction: negative score");
    total += scores(j);
    if (labels[static_cast<size_t>(j)] == AtomLabel::Contentful) content += scores(j);
  }
  if (total == 0.0) throw std::invalid_argument("no reliance mass");
  return content / total;
}

std::vector<AtomManifest> top_activating_manifest(const SparseCodes& codes,
                                                  const std::vector<ItemMeta>& meta,
                                                  const std::vector<int>& atom_ids, int n_viz,
                                                  Eigen::Index n_dicts) {
  if (n_viz < 1) throw std::invalid_argument("top_activating_manifest: n_viz must be >= 1");
  for (int a : atom_ids)
    if (a < 0 || a >= n_dicts)
      throw std::invalid_argument("top_activating_manifest: unknown atom id " + std::to_string(a));

  // Activations per requested atom.
  std::map<int, std::vector<std::pair<double, int>>> hits;  // atom -> (coeff, code index)
  for (int a : atom_ids) hits[a] = {};
  for (size_t i = 0; i < codes.items.size(); ++i) {
    const SparseCodes::Item& it = codes.items[i];
    for (size_t k = 0; k < it.atoms.size(); ++k) {
      auto h = hits.find(it.atoms[k]);
      if (h != hits.end() && it.coeffs[k] != 0.0)
        h->second.emplace_back(it.coeffs[k], static_cast<int>(i));
    }
  }

  std::vector<AtomManifest> out;
  for (int a : atom_ids) {
    AtomManifest m;
    m.atom_id = a;
    auto& v = hits[a];
    std::sort(v.begin(), v.end(), [&](const auto& x, const auto& y) {
      const double ax = std::abs(x.first), ay = std::abs(y.first);
      if (ax != ay) return ax > ay;
      const ItemMeta& mx = meta.at(static_cast<size_t>(codes.items[static_cast<size_t>(x.second)].item));
      const ItemMeta& my = meta.at(static_cast<size_t>(codes.items[static_cast<size_t>(y.second)].item));
      if (mx.image_id != my.image_id) return mx.image_id < my.image_id;
      const long px = static_cast<long>(mx.patch_row) * 65536 + mx.patch_col;
      const long py = static_cast<long>(my.patch_row) * 65536 + my.patch_col;
      return px < py;
    });
    const size_t take = std::min(v.size(), static_cast<size_t>(n_viz));
    m.short_flag = v.size() < static_cast<size_t>(n_viz);
    for (size_t r = 0; r < take; ++r) {
      const ItemMeta& im =
          meta.at(static_cast<size_t>(codes.items[static_cast<size_t>(v[r].second)].item));
      ManifestRecord rec;
      rec.atom_id = a;
      rec.image_id = im.image_id;
      rec.patch_row = im.patch_row;
      rec.patch_col = im.patch_col;
      rec.coeff = v[r].first;
      m.records.push_back(std::move(rec));
    }
    out.push_back(std::move(m));
  }
  return out;
}

std::vector<AtomProfile> build_profiles(const ActivationRates& rates,
                                        const std::vector<std::optional<double>>& cvs,
                                        const SplitResult& split, const RelianceScores* reliance) {
  const Eigen::Index n_dicts = rates.rate.rows();
  std::vector<AtomProfile> out(static_cast<size_t>(n_dicts));
  for (Eigen::Index j = 0; j < n_dicts; ++j) {
    AtomProfile& p = out[static_cast<size_t>(j)];
    p.atom_id = static_cast<int>(j);
    for (size_t s = 0; s < rates.subsets.size(); ++s)
      p.rates[rates.subsets[s]] = rates.rate(j, static_cast<Eigen::Index>(s));
    p.cv = cvs[static_cast<size_t>(j)];
    p.label = split.labels[static_cast<size_t>(j)];
    if (reliance) {
      p.head_alignment = reliance->head_alignment(j);
      p.mean_abs_coeff = reliance->mean_abs_coeff(j);
      p.reliance_score = reliance->score(j);
    }
  }
  return out;
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void write_profiles_csv(const std::vector<AtomProfile>& profiles,
                        const std::vector<std::string>& subsets,
                        const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "atom_id";
  for (const std::string& s : subsets) out << ",rate_" << s;
  out << ",cv,label,alignment,mean_abs,score\n";
  for (const AtomProfile& p : profiles) {
    out << p.atom_id;
    for (const std::string& s : subsets) {
      auto it = p.rates.find(s);
      out << "," << fmt_double(it == p.rates.end() ? 0.0 : it->second);
    }
    out << "," << (p.cv ? fmt_double(*p.cv) : std::string("nan"));
    out << "," << to_string(p.label);
    out << "," << fmt_double(p.head_alignment) << "," << fmt_double(p.mean_abs_coeff) << ","
        << fmt_double(p.reliance_score) << "\n";
  }
}

void write_profiles_json(const std::vector<AtomProfile>& profiles,
                         const std::vector<std::string>& subsets, double median_cv,
                         std::optional<double> content_frac, const std::filesystem::path& path) {
  nlohmann::json j;
  j["subsets"] = subsets;
  j["median_cv"] = median_cv;
  if (content_frac) j["content_fraction"] = *content_frac;
  nlohmann::json atoms = nlohmann::json::array();
  for (const AtomProfile& p : profiles) {
    nlohmann::json a;
    a["atom_id"] = p.atom_id;
    a["rates"] = p.rates;
    if (p.cv) a["cv"] = *p.cv;
    a["label"] = to_string(p.label);
    a["alignment"] = p.head_alignment;
    a["mean_abs"] = p.mean_abs_coeff;
    a["score"] = p.reliance_score;
    atoms.push_back(std::move(a));
  }
  j["atoms"] = std::move(atoms);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::vector<AtomProfile> read_profiles_json(const std::filesystem::path& path,
                                            std::vector<std::string>* subsets) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  nlohmann::json j = nlohmann::json::parse(in);
  if (subsets) *subsets = j.at("subsets").get<std::vector<std::string>>();
  std::vector<AtomProfile> out;
  for (const auto& a : j.at("atoms")) {
    AtomProfile p;
    p.atom_id = a.at("atom_id").get<int>();
    p.rates = a.at("rates").get<std::map<std::string, double>>();
    if (a.contains("cv")) p.cv = a.at("cv").get<double>();
    p.label = atom_label_from_string(a.at("label").get<std::string>());
    p.head_alignment = a.value("alignment", 0.0);
    p.mean_abs_coeff = a.value("mean_abs", 0.0);
    p.reliance_score = a.value("score", 0.0);
    out.push_back(std::move(p));
  }
  return out;
}

void write_manifest_jsonl(const std::vector<AtomManifest>& manifests,
                          const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const AtomManifest& m : manifests) {
    for (const ManifestRecord& r : m.records) {
      nlohmann::json j;
      j["atom"] = r.atom_id;
      j["image_id"] = r.image_id;
      j["patch_row"] = r.patch_row;
      j["patch_col"] = r.patch_col;
      j["coeff"] = r.coeff;
      j["context_halfwidth"] = r.context_halfwidth;
      out << j.dump() << "\n";
    }
  }
}

}  // namespace atomlens
