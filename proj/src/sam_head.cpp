#include "atomlens/sam_head.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "atomlens/embz.hpp"
#include "atomlens/rng.hpp"

namespace atomlens {

void HeadWeights::validate() const {
  if (n_kp < 1) throw std::invalid_argument("HeadWeights: n_kp must be >= 1");
  if (grid < 1) throw std::invalid_argument("HeadWeights: grid must be >= 1");
  if (W.rows() != n_kp) throw std::invalid_argument("HeadWeights: W rows != n_kp");
  if (!W.allFinite()) throw std::invalid_argument("HeadWeights: non-finite weights");
}

Eigen::MatrixXd patch_centers(int grid) {
  if (grid < 1) throw std::invalid_argument("patch_centers: grid must be >= 1");
  Eigen::MatrixXd c(grid * grid, 2);
  for (int row = 0; row < grid; ++row)
    for (int col = 0; col < grid; ++col) {
      const int p = row * grid + col;
      c(p, 0) = (col + 0.5) / grid;
      c(p, 1) = (row + 0.5) / grid;
    }
  return c;
}

namespace {

Eigen::MatrixXd softmax_columns(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd a(logits.rows(), logits.cols());
  for (Eigen::Index k = 0; k < logits.cols(); ++k) {
    const double m = logits.col(k).maxCoeff();
    a.col(k) = (logits.col(k).array() - m).exp();
    a.col(k) /= a.col(k).sum();
  }
  return a;
}

void check_dims(const Eigen::MatrixXd& Z, const HeadWeights& w) {
  w.validate();
  if (Z.cols() != w.W.cols())
    throw std::invalid_argument("sam_head: Z n_dims=" + std::to_string(Z.cols()) +
                                " != head n_dims=" + std::to_string(w.W.cols()));
  if (Z.rows() != static_cast<Eigen::Index>(w.grid) * w.grid)
    throw std::invalid_argument("sam_head: n_patches=" + std::to_string(Z.rows()) +
                                " != grid^2=" + std::to_string(w.grid * w.grid));
}

}  // namespace

KeypointPrediction predict(const Eigen::MatrixXd& Z, const HeadWeights& weights) {
  check_dims(Z, weights);
  KeypointPrediction out;
  const Eigen::MatrixXd logits = Z * weights.W.transpose();  // n_patches x n_kp
  out.alphas = softmax_columns(logits);
  out.coords = out.alphas.transpose() * patch_centers(weights.grid);
  return out;
}

PooledSummaries pooled_summaries(const Eigen::MatrixXd& Z, const HeadWeights& weights) {
  return pooled_summaries(Z, weights, std::vector<bool>(static_cast<size_t>(Z.rows()), true));
}

PooledSummaries pooled_summaries(const Eigen::MatrixXd& Z, const HeadWeights& weights,
                                 const std::vector<bool>& include) {
  check_dims(Z, weights);
  if (include.size() != static_cast<size_t>(Z.rows()))
    throw std::invalid_argument("pooled_summaries: include mask length mismatch");
  const KeypointPrediction pred = predict(Z, weights);
  PooledSummaries out;
  out.per_keypoint.setZero(weights.n_kp, Z.cols());
  for (Eigen::Index p = 0; p < Z.rows(); ++p) {
    if (!include[static_cast<size_t>(p)]) continue;
    for (int k = 0; k < weights.n_kp; ++k)
      out.per_keypoint.row(k) += pred.alphas(p, k) * Z.row(p);
  }
  out.mean = out.per_keypoint.colwise().mean();
  return out;
}

HuberResult huber_loss(const Eigen::MatrixXd& pred_coords, const Eigen::MatrixXd& target_coords,
                       const std::vector<bool>& visibility, double delta) {
  if (delta <= 0) throw std::invalid_argument("huber_loss: delta must be > 0");
  if (pred_coords.rows() != target_coords.rows() || pred_coords.cols() != 2 ||
      target_coords.cols() != 2)
    throw std::invalid_argument("huber_loss: coordinate shape mismatch");
  if (visibility.size() != static_cast<size_t>(pred_coords.rows()))
    throw std::invalid_argument("huber_loss: visibility length mismatch");

  HuberResult res;
  double sum = 0.0;
  int n_vis = 0;
  for (Eigen::Index k = 0; k < pred_coords.rows(); ++k) {
    if (!visibility[static_cast<size_t>(k)]) continue;
    ++n_vis;
    for (int c = 0; c < 2; ++c) {
      const double r = std::abs(pred_coords(k, c) - target_coords(k, c));
      sum += (r <= delta) ? 0.5 * r * r : delta * (r - 0.5 * delta);
    }
  }
  if (n_vis == 0) return res;
  res.value = sum / (2.0 * n_vis);
  res.any_visible = true;
  return res;
}

Eigen::MatrixXd head_gradient(const Eigen::MatrixXd& Z, const HeadWeights& weights,
                              const Eigen::MatrixXd& target_coords,
                              const std::vector<bool>& visibility, double delta) {
  check_dims(Z, weights);
  const KeypointPrediction pred = predict(Z, weights);
  const Eigen::MatrixXd centers = patch_centers(weights.grid);

  int n_vis = 0;
  for (bool v : visibility)
    if (v) ++n_vis;
  Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(weights.n_kp, Z.cols());
  if (n_vis == 0) return grad;
  const double norm = 1.0 / (2.0 * n_vis);

  for (int k = 0; k < weights.n_kp; ++k) {
    if (!visibility[static_cast<size_t>(k)]) continue;
    // d loss / d coords, then back through the softargmax Jacobian:
    // d coord / d logit_p = alpha_p * (c_p - coord).
    Eigen::Vector2d g;
    for (int c = 0; c < 2; ++c) {
      const double r = pred.coords(k, c) - target_coords(k, c);
      const double h = (std::abs(r) <= delta) ? r : delta * (r > 0 ? 1.0 : -1.0);
      g(c) = h * norm;
    }
    Eigen::VectorXd dlogit(Z.rows());
    for (Eigen::Index p = 0; p < Z.rows(); ++p)
      dlogit(p) = pred.alphas(p, k) * (g(0) * (centers(p, 0) - pred.coords(k, 0)) +
                                       g(1) * (centers(p, 1) - pred.coords(k, 1)));
    grad.row(k) = dlogit.transpose() * Z;
  }
  return grad;
}

FitHeadResult fit_head(const std::vector<Eigen::MatrixXd>& images,
                       const std::vector<KeypointTargets>& targets, int n_kp, int grid,
                       const FitHeadConfig& cfg) {
  if (images.empty()) throw std::invalid_argument("fit_head: empty training set");
  if (images.size() != targets.size())
    throw std::invalid_argument("fit_head: images/targets length mismatch");

  const Eigen::Index n_dims = images.front().cols();
  HeadWeights w;
  w.n_kp = n_kp;
  w.grid = grid;
  w.W.resize(n_kp, n_dims);
  Rng rng(derive_seed(cfg.seed, "head-init"));
  for (Eigen::Index i = 0; i < w.W.size(); ++i) w.W.data()[i] = 0.01 * rng.normal();

  FitHeadResult res;
  const double inv_n = 1.0 / static_cast<double>(images.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(n_kp, n_dims);
    double loss = 0.0;
    for (size_t i = 0; i < images.size(); ++i) {
      const KeypointPrediction p = predict(images[i], w);
      loss += huber_loss(p.coords, targets[i].coords, targets[i].visibility, cfg.delta).value;
      grad += head_gradient(images[i], w, targets[i].coords, targets[i].visibility, cfg.delta);
    }
    w.W -= (cfg.lr * inv_n) * grad;
    res.epoch_loss.push_back(loss * inv_n);
  }
  res.weights = std::move(w);
  return res;
}

void save_head_weights(const HeadWeights& weights, const std::filesystem::path& path) {
  weights.validate();
  write_raw_matrix(weights.W, path);
  nlohmann::json side;
  side["n_kp"] = weights.n_kp;
  side["grid"] = weights.grid;
  std::ofstream out(path.string() + ".json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write sidecar for " + path.string());
  out << side.dump(2) << "\n";
}

HeadWeights load_head_weights(const std::filesystem::path& path) {
  std::ifstream in(path.string() + ".json");
  if (!in) throw std::runtime_error("missing head sidecar: " + path.string() + ".json");
  nlohmann::json side = nlohmann::json::parse(in);
  HeadWeights w;
  w.n_kp = side.at("n_kp").get<int>();
  w.grid = side.at("grid").get<int>();
  w.W = read_raw_matrix(path);
  w.validate();
  return w;
}

}  // namespace atomlens
