#include "atomlens/ooms_detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "atomlens/rng.hpp"

namespace atomlens {

void OomsDataset::validate(int n_nnz) const {
  if (static_cast<size_t>(features.rows()) != labels_ims.size() ||
      labels_ims.size() != split.size())
    throw std::invalid_argument("OomsDataset: length mismatch");
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    int ones = 0;
    for (Eigen::Index j = 0; j < features.cols(); ++j) {
      const double v = features(i, j);
      if (v != 0.0 && v != 1.0)
        throw std::invalid_argument("OomsDataset: non-binary feature");
      if (v == 1.0) ++ones;
    }
    if (n_nnz > 0 && ones > n_nnz)
      throw std::invalid_argument("OomsDataset: support exceeds n_nnz");
  }
}

std::vector<Split> make_split(const std::vector<bool>& labels, double train_frac, uint64_t seed) {
  if (!(train_frac > 0.0 && train_frac < 1.0))
    throw std::invalid_argument("make_split: train_frac must lie in (0,1)");
  std::vector<Split> out(labels.size(), Split::Eval);
  Rng rng(derive_seed(seed, "ooms-split"));
  for (int cls = 0; cls < 2; ++cls) {
    std::vector<size_t> idx;
    for (size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == (cls == 1)) idx.push_back(i);
    if (idx.empty()) continue;
    rng.shuffle(idx);
    size_t n_train = static_cast<size_t>(std::llround(train_frac * static_cast<double>(idx.size())));
    n_train = std::max<size_t>(n_train, 1);
    if (idx.size() >= 2) n_train = std::min(n_train, idx.size() - 1);
    for (size_t r = 0; r < idx.size(); ++r)
      out[idx[r]] = r < n_train ? Split::Train : Split::Eval;
  }
  return out;
}

Eigen::VectorXd summary_features(const Eigen::MatrixXd& Z, const std::vector<bool>& include,
                                 const HeadWeights& weights, const Dictionary& D, int n_nnz) {
  const PooledSummaries pooled = pooled_summaries(Z, weights, include);
  const MpResult mp = matching_pursuit(pooled.mean, D, n_nnz);
  Eigen::VectorXd a = Eigen::VectorXd::Zero(D.n_dicts());
  for (size_t k = 0; k < mp.atom_indices.size(); ++k)
    if (mp.coefficients[k] != 0.0) a(mp.atom_indices[k]) = 1.0;
  return a;
}

std::vector<int> OomsModel::selected(double eps) const {
  std::vector<int> out;
  for (Eigen::Index j = 0; j < weights.size(); ++j)
    if (weights(j) > eps) out.push_back(static_cast<int>(j));
  return out;
}

void OomsModel::validate() const {
  if (bias > 0.0) throw std::invalid_argument("OomsModel: bias must be <= 0");
  for (Eigen::Index j = 0; j < weights.size(); ++j)
    if (weights(j) < 0.0) throw std::invalid_argument("OomsModel: negative weight");
  if (lambda < 0.0) throw std::invalid_argument("OomsModel: negative lambda");
}

double predict_ims(const OomsModel& model, const Eigen::VectorXd& features) {
  if (features.size() != model.weights.size())
    throw std::invalid_argument("predict_ims: feature dims=" + std::to_string(features.size()) +
                                " != model dims=" + std::to_string(model.weights.size()));
  const double s = model.bias + model.weights.dot(features);
  return 1.0 / (1.0 + std::exp(-s));
}

namespace {

// log(1 + exp(s)) - y*s, stable for large |s|.
double bce_term(double s, bool y) {
  const double softplus = std::max(s, 0.0) + std::log1p(std::exp(-std::abs(s)));
  return softplus - (y ? s : 0.0);
}

struct TrainView {
  Eigen::MatrixXd X;   // n_train x n_dicts
  Eigen::VectorXd y;   // 0/1
};

TrainView train_view(const OomsDataset& data) {
  std::vector<Eigen::Index> rows;
  for (size_t i = 0; i < data.split.size(); ++i)
    if (data.split[i] == Split::Train) rows.push_back(static_cast<Eigen::Index>(i));
  TrainView v;
  v.X.resize(static_cast<Eigen::Index>(rows.size()), data.features.cols());
  v.y.resize(static_cast<Eigen::Index>(rows.size()));
  for (size_t r = 0; r < rows.size(); ++r) {
    v.X.row(static_cast<Eigen::Index>(r)) = data.features.row(rows[r]);
    v.y(static_cast<Eigen::Index>(r)) = data.labels_ims[static_cast<size_t>(rows[r])] ? 1.0 : 0.0;
  }
  return v;
}

double objective(const TrainView& v, double b, const Eigen::VectorXd& beta, double lambda) {
  const Eigen::VectorXd s = (v.X * beta).array() + b;
  double sum = 0.0;
  for (Eigen::Index i = 0; i < s.size(); ++i) sum += bce_term(s(i), v.y(i) > 0.5);
  return sum / static_cast<double>(s.size()) + lambda * beta.sum();
}

// Gradient of the mean BCE plus the (smooth under beta >= 0) L1 term.
void gradient(const TrainView& v, double b, const Eigen::VectorXd& beta, double lambda,
              double& gb, Eigen::VectorXd& gbeta) {
  const Eigen::VectorXd s = (v.X * beta).array() + b;
  Eigen::VectorXd p(s.size());
  for (Eigen::Index i = 0; i < s.size(); ++i) p(i) = 1.0 / (1.0 + std::exp(-s(i)));
  const Eigen::VectorXd r = (p - v.y) / static_cast<double>(s.size());
  gb = r.sum();
  gbeta = v.X.transpose() * r;
  gbeta.array() += lambda;
}

void project(double& b, Eigen::VectorXd& beta) {
  b = std::min(b, 0.0);
  beta = beta.cwiseMax(0.0);
}

}  // namespace

double ooms_objective(const OomsDataset& data, double bias, const Eigen::VectorXd& beta,
                      double lambda) {
  return objective(train_view(data), bias, beta, lambda);
}

OomsModel fit_ooms(const OomsDataset& data, double lambda, const FitOomsConfig& cfg) {
  if (lambda < 0.0) throw std::invalid_argument("fit_ooms: lambda must be >= 0");
  data.validate(0);
  const TrainView v = train_view(data);
  if (v.y.size() == 0) throw std::invalid_argument("fit_ooms: empty training split");
  const double ymean = v.y.mean();
  if (ymean == 0.0 || ymean == 1.0)
    throw std::invalid_argument("fit_ooms: single-class training data");

  // Projected gradient with Barzilai-Borwein steps and Armijo backtracking.
  // The objective is convex and smooth on the feasible box.
  double b = 0.0;
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(data.features.cols());
  double gb = 0.0;
  Eigen::VectorXd gbeta;
  gradient(v, b, beta, lambda, gb, gbeta);
  double f = objective(v, b, beta, lambda);
  double step = 1.0;

  for (int it = 0; it < cfg.max_iter; ++it) {
    // Projected-gradient residual.
    double pb = b - std::min(b - gb, 0.0);
    Eigen::VectorXd pbeta = beta - (beta - gbeta).cwiseMax(0.0);
    const double pg_inf = std::max(std::abs(pb), pbeta.size() ? pbeta.cwiseAbs().maxCoeff() : 0.0);
    if (pg_inf <= cfg.tol) break;

    double t = std::clamp(step, 1e-14, 1e14);
    double b_new = 0.0, f_new = 0.0;
    Eigen::VectorXd beta_new;
    bool accepted = false;
    for (int bt = 0; bt < 80; ++bt) {
      b_new = b - t * gb;
      beta_new = beta - t * gbeta;
      project(b_new, beta_new);
      const double db = b_new - b;
      const Eigen::VectorXd dbeta = beta_new - beta;
      const double quad = (db * db + dbeta.squaredNorm()) / (2.0 * t);
      const double lin = gb * db + gbeta.dot(dbeta);
      f_new = objective(v, b_new, beta_new, lambda);
      if (f_new <= f + lin + quad + 1e-15 * std::abs(f)) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) break;

    double gb_new;
    Eigen::VectorXd gbeta_new;
    gradient(v, b_new, beta_new, lambda, gb_new, gbeta_new);

    const double sb = b_new - b;
    const Eigen::VectorXd sbeta = beta_new - beta;
    const double yb = gb_new - gb;
    const Eigen::VectorXd ybeta = gbeta_new - gbeta;
    const double ss = sb * sb + sbeta.squaredNorm();
    const double sy = sb * yb + sbeta.dot(ybeta);
    step = (sy > 1e-300) ? ss / sy : t * 2.0;

    b = b_new;
    beta = std::move(beta_new);
    gb = gb_new;
    gbeta = std::move(gbeta_new);
    f = f_new;
    if (ss == 0.0) break;
  }

  OomsModel model;
  model.bias = b;
  model.weights = std::move(beta);
  model.lambda = lambda;
  model.seed = cfg.seed;
  model.validate();
  return model;
}

double auroc(const std::vector<double>& scores, const std::vector<bool>& labels) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("auroc: scores/labels length mismatch");
  long n_pos = 0;
  for (bool y : labels) n_pos += y ? 1 : 0;
  const long n_neg = static_cast<long>(labels.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("auroc: single-class input");

  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  // Midranks for tied scores (1-based).
  std::vector<double> rank(scores.size());
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }

  double rank_sum_pos = 0.0;
  for (size_t k = 0; k < labels.size(); ++k)
    if (labels[k]) rank_sum_pos += rank[k];
  const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

std::vector<SweepPoint> lambda_sweep(const OomsDataset& data, const std::vector<double>& lambdas,
                                     const std::vector<AtomLabel>& atom_labels,
                                     const FitOomsConfig& cfg) {
  std::vector<Eigen::Index> eval_rows;
  for (size_t i = 0; i < data.split.size(); ++i)
    if (data.split[i] == Split::Eval) eval_rows.push_back(static_cast<Eigen::Index>(i));
  if (eval_rows.empty()) throw std::invalid_argument("lambda_sweep: empty eval split");
  if (!atom_labels.empty() && atom_labels.size() != static_cast<size_t>(data.features.cols()))
    throw std::invalid_argument("lambda_sweep: atom labels length mismatch");

  std::vector<SweepPoint> out;
  for (double lambda : lambdas) {
    const OomsModel model = fit_ooms(data, lambda, cfg);
    std::vector<double> scores;
    std::vector<bool> labels;
    for (Eigen::Index r : eval_rows) {
      scores.push_back(predict_ims(model, data.features.row(r).transpose()));
      labels.push_back(data.labels_ims[static_cast<size_t>(r)]);
    }
    SweepPoint pt;
    pt.lambda = lambda;
    pt.seed = cfg.seed;
    pt.auroc = auroc(scores, labels);
    const std::vector<int> sel = model.selected();
    pt.n_selected = static_cast<int>(sel.size());
    if (sel.empty() || atom_labels.empty()) {
      pt.content_fraction_selected = std::numeric_limits<double>::quiet_NaN();
    } else {
      int n_content = 0;
      for (int j : sel)
        if (atom_labels[static_cast<size_t>(j)] == AtomLabel::Contentful) ++n_content;
      pt.content_fraction_selected = static_cast<double>(n_content) / static_cast<double>(sel.size());
    }
    out.push_back(pt);
  }
  return out;
}

void write_sweep_csv(const std::vector<SweepPoint>& points, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "lambda,n_selected,auroc,content_fraction,seed\n";
  for (const SweepPoint& p : points) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%.17g,%d,%.17g,%.17g,%llu\n", p.lambda, p.n_selected, p.auroc,
                  p.content_fraction_selected, static_cast<unsigned long long>(p.seed));
    out << buf;
  }
}

void save_ooms_model(const OomsModel& model, const std::filesystem::path& path) {
  nlohmann::json j;
  j["bias"] = model.bias;
  j["lambda"] = model.lambda;
  j["n_nnz"] = model.n_nnz;
  j["seed"] = model.seed;
  j["n_dicts"] = model.weights.size();
  nlohmann::json w = nlohmann::json::object();
  for (Eigen::Index k : model.selected(0.0))
    w[std::to_string(k)] = model.weights(k);
  j["weights"] = std::move(w);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

OomsModel load_ooms_model(const std::filesystem::path& path, Eigen::Index n_dicts) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  nlohmann::json j = nlohmann::json::parse(in);
  OomsModel m;
  m.bias = j.at("bias").get<double>();
  m.lambda = j.at("lambda").get<double>();
  m.n_nnz = j.value("n_nnz", 0);
  m.seed = j.value("seed", 0ull);
  const Eigen::Index stored = j.value("n_dicts", static_cast<Eigen::Index>(0));
  if (n_dicts <= 0) n_dicts = stored;
  if (stored > 0 && stored != n_dicts)
    throw std::runtime_error("load_ooms_model: model n_dicts=" + std::to_string(stored) +
                             " != expected n_dicts=" + std::to_string(n_dicts));
  m.weights = Eigen::VectorXd::Zero(n_dicts);
  for (const auto& [key, val] : j.at("weights").items()) {
    const int idx = std::stoi(key);
    if (idx < 0 || idx >= n_dicts)
      throw std::runtime_error("load_ooms_model: weight index out of range");
    m.weights(idx) = val.get<double>();
  }
  m.validate();
  return m;
}

}  // namespace atomlens
