#include "atomlens/dictionary_learning.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include "atomlens/parallel.hpp"
#include "atomlens/rng.hpp"

namespace atomlens {

namespace {

constexpr double kResidualStop = 1e-10;

void check_unit_norm(const Dictionary& D) {
  for (Eigen::Index j = 0; j < D.n_dicts(); ++j) {
    const double n = D.atoms.row(j).norm();
    if (std::abs(n - 1.0) > 1e-4)
      throw std::invalid_argument("matching_pursuit: atom " + std::to_string(j) +
                                  " not unit norm (norm=" + std::to_string(n) + ")");
  }
}

// Greedy selection loop shared by the public entry point and the K-SVD inner
// coder. Mutates the residual in place.
void pursue(Eigen::VectorXd& residual, const Eigen::MatrixXd& atoms, int n_nnz,
            std::vector<int>& idx_out, std::vector<double>& coeff_out) {
  idx_out.clear();
  coeff_out.clear();
  const Eigen::Index n_dicts = atoms.rows();
  std::vector<char> used(static_cast<size_t>(n_dicts), 0);
  const int steps = std::min<Eigen::Index>(n_nnz, n_dicts);
  for (int s = 0; s < steps; ++s) {
    if (residual.norm() <= kResidualStop) break;
    const Eigen::VectorXd corr = atoms * residual;
    int best = -1;
    double best_abs = 0.0;
    for (Eigen::Index j = 0; j < n_dicts; ++j) {
      if (used[static_cast<size_t>(j)]) continue;
      const double a = std::abs(corr(j));
      if (a > best_abs) {  // strict: ties keep the lowest index
        best_abs = a;
        best = static_cast<int>(j);
      }
    }
    if (best < 0 || best_abs == 0.0) break;
    used[static_cast<size_t>(best)] = 1;
    const double c = corr(best);
    residual -= c * atoms.row(best).transpose();
    idx_out.push_back(best);
    coeff_out.push_back(c);
  }
}

}  // namespace

MpResult matching_pursuit(const Eigen::VectorXd& z, const Dictionary& D, int n_nnz) {
  if (n_nnz < 1) throw std::invalid_argument("matching_pursuit: n_nnz must be >= 1");
  if (z.size() != D.n_dims())
    throw std::invalid_argument("matching_pursuit: z dims=" + std::to_string(z.size()) +
                                " != dictionary n_dims=" + std::to_string(D.n_dims()));
  check_unit_norm(D);
  MpResult res;
  Eigen::VectorXd r = z;
  pursue(r, D.atoms, n_nnz, res.atom_indices, res.coefficients);
  res.residual_norm = r.norm();
  return res;
}

SparseCodes encode_all(const EmbeddingSet& set, const Dictionary& D, int n_nnz, int n_threads) {
  if (set.n_dims() != D.n_dims())
    throw std::invalid_argument("encode_all: embeddings n_dims=" + std::to_string(set.n_dims()) +
                                " != dictionary n_dims=" + std::to_string(D.n_dims()));
  if (n_nnz < 1) throw std::invalid_argument("encode_all: n_nnz must be >= 1");
  check_unit_norm(D);

  SparseCodes codes;
  codes.n_nnz_budget = n_nnz;
  codes.items.resize(static_cast<size_t>(set.n_items()));
  parallel_for(set.n_items(), n_threads, [&](std::ptrdiff_t lo, std::ptrdiff_t hi) {
    std::vector<int> idx;
    std::vector<double> coeff;
    for (std::ptrdiff_t i = lo; i < hi; ++i) {
      Eigen::VectorXd r = set.data.row(i).cast<double>();
      pursue(r, D.atoms, n_nnz, idx, coeff);
      // Sorted supports keep the stored codes canonical.
      std::vector<size_t> order(idx.size());
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return idx[a] < idx[b]; });
      SparseCodes::Item& it = codes.items[static_cast<size_t>(i)];
      it.item = static_cast<int>(i);
      it.atoms.resize(idx.size());
      it.coeffs.resize(idx.size());
      for (size_t k = 0; k < order.size(); ++k) {
        it.atoms[k] = idx[order[k]];
        it.coeffs[k] = coeff[order[k]];
      }
    }
  });
  return codes;
}

namespace {

double squared_norm_all(const EmbeddingSet& set) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < set.n_items(); ++i)
    s += set.data.row(i).cast<double>().squaredNorm();
  return s;
}

// Per-item squared reconstruction errors for given codes.
std::vector<double> reconstruction_errors(const EmbeddingSet& set, const Dictionary& D,
                                          const SparseCodes& codes, int n_threads) {
  std::vector<double> err(static_cast<size_t>(set.n_items()), 0.0);
  parallel_for(set.n_items(), n_threads, [&](std::ptrdiff_t lo, std::ptrdiff_t hi) {
    for (std::ptrdiff_t i = lo; i < hi; ++i) {
      Eigen::VectorXd r = set.data.row(i).cast<double>();
      const SparseCodes::Item& it = codes.items[static_cast<size_t>(i)];
      for (size_t k = 0; k < it.atoms.size(); ++k)
        r -= it.coeffs[k] * D.atoms.row(it.atoms[k]).transpose();
      err[static_cast<size_t>(i)] = r.squaredNorm();
    }
  });
  return err;
}

EmbeddingSet subset_rows(const EmbeddingSet& set, const std::vector<Eigen::Index>& rows) {
  EmbeddingSet out;
  out.data.resize(static_cast<Eigen::Index>(rows.size()), set.n_dims());
  out.meta.reserve(rows.size());
  for (size_t r = 0; r < rows.size(); ++r) {
    out.data.row(static_cast<Eigen::Index>(r)) = set.data.row(rows[r]);
    out.meta.push_back(set.meta[static_cast<size_t>(rows[r])]);
  }
  return out;
}

// Principal left singular vector of E by power iteration, warm-started from
// the current atom; returns false when E carries no energy.
bool rank1_update(const Eigen::MatrixXd& E, Eigen::VectorXd& atom, Eigen::VectorXd& coeffs) {
  Eigen::VectorXd u = atom;
  if ((E.transpose() * u).norm() < 1e-14) {
    // Warm start orthogonal to the column space; restart from the strongest
    // residual column.
    Eigen::Index best = 0;
    E.colwise().norm().maxCoeff(&best);
    const double n = E.col(best).norm();
    if (n < 1e-14) return false;
    u = E.col(best) / n;
  }
  for (int it = 0; it < 50; ++it) {
    Eigen::VectorXd v = E.transpose() * u;
    const double nv = v.norm();
    if (nv < 1e-300) return false;
    v /= nv;
    const Eigen::VectorXd Ev = E * v;
    const double sigma = Ev.norm();
    if (sigma < 1e-300) return false;
    const Eigen::VectorXd u_new = Ev / sigma;
    const double delta = (u_new - u).norm();
    u = u_new;
    if (delta <= 1e-10) break;
  }
  atom = u;
  coeffs = E.transpose() * u;  // sigma * right singular vector
  return true;
}

}  // namespace

KsvdResult ksvd_fit(const EmbeddingSet& pool, const KsvdConfig& cfg, int n_threads) {
  if (cfg.n_nnz < 1) throw std::invalid_argument("ksvd_fit: n_nnz must be >= 1");
  if (cfg.n_nnz > pool.n_dims())
    throw std::invalid_argument("ksvd_fit: n_nnz exceeds n_dims");
  if (cfg.batch_size < cfg.n_nnz)
    throw std::invalid_argument("ksvd_fit: batch_size must be >= n_nnz");
  if (pool.n_items() < cfg.n_dicts)
    throw std::invalid_argument("ksvd_fit: pool too small (" + std::to_string(pool.n_items()) +
                                " items for " + std::to_string(cfg.n_dicts) + " atoms)");

  const Eigen::Index n_dims = pool.n_dims();
  const Eigen::Index n_total = pool.n_items();

  // 10% held out from fitting; the report's variance explained is measured
  // there.
  std::vector<Eigen::Index> perm(static_cast<size_t>(n_total));
  std::iota(perm.begin(), perm.end(), 0);
  Rng holdout_rng(derive_seed(cfg.seed, "ksvd-holdout"));
  holdout_rng.shuffle(perm);
  const size_t n_held = static_cast<size_t>(n_total) / 10;
  std::vector<Eigen::Index> held(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_held));
  std::vector<Eigen::Index> train(perm.begin() + static_cast<std::ptrdiff_t>(n_held), perm.end());
  const EmbeddingSet heldout_set = subset_rows(pool, held);
  const EmbeddingSet train_set = subset_rows(pool, train);
  const double train_energy = squared_norm_all(train_set);

  // Initialize from n_dicts distinct pool rows (full pool), normalized.
  Dictionary D;
  D.atoms.resize(cfg.n_dicts, n_dims);
  {
    std::vector<Eigen::Index> cand(static_cast<size_t>(n_total));
    std::iota(cand.begin(), cand.end(), 0);
    Rng init_rng(derive_seed(cfg.seed, "ksvd-init"));
    init_rng.shuffle(cand);
    int filled = 0;
    for (Eigen::Index row : cand) {
      if (filled == cfg.n_dicts) break;
      Eigen::VectorXd v = pool.data.row(row).cast<double>();
      const double n = v.norm();
      if (n < 1e-12) continue;
      D.atoms.row(filled++) = v.transpose() / n;
    }
    if (filled < cfg.n_dicts)
      throw std::invalid_argument("ksvd_fit: not enough nonzero pool rows for initialization");
  }

  KsvdResult result;
  const Eigen::Index n_train = train_set.n_items();
  std::vector<Eigen::Index> order(static_cast<size_t>(n_train));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng epoch_rng(derive_seed(cfg.seed, "ksvd-epoch", static_cast<uint64_t>(epoch)));
    epoch_rng.shuffle(order);
    std::vector<int> usage(static_cast<size_t>(cfg.n_dicts), 0);

    for (Eigen::Index start = 0; start < n_train; start += cfg.batch_size) {
      const Eigen::Index b = std::min<Eigen::Index>(cfg.batch_size, n_train - start);

      // Sparse-code the batch with the current dictionary; keep residuals
      // incrementally so each atom update sees earlier ones.
      Eigen::MatrixXd residual(n_dims, b);
      std::vector<std::vector<int>> supp(static_cast<size_t>(b));
      std::vector<std::vector<double>> coef(static_cast<size_t>(b));
      parallel_for(b, n_threads, [&](std::ptrdiff_t lo, std::ptrdiff_t hi) {
        for (std::ptrdiff_t i = lo; i < hi; ++i) {
          Eigen::VectorXd r = train_set.data.row(order[static_cast<size_t>(start + i)]).cast<double>();
          pursue(r, D.atoms, cfg.n_nnz, supp[static_cast<size_t>(i)], coef[static_cast<size_t>(i)]);
          residual.col(i) = r;
        }
      });

      // Users of each atom within the batch.
      std::vector<std::vector<int>> users(static_cast<size_t>(cfg.n_dicts));
      std::vector<std::vector<int>> slot(static_cast<size_t>(cfg.n_dicts));
      for (Eigen::Index i = 0; i < b; ++i) {
        const auto& s = supp[static_cast<size_t>(i)];
        for (size_t k = 0; k < s.size(); ++k) {
          users[static_cast<size_t>(s[k])].push_back(static_cast<int>(i));
          slot[static_cast<size_t>(s[k])].push_back(static_cast<int>(k));
        }
      }
      for (int j = 0; j < cfg.n_dicts; ++j)
        usage[static_cast<size_t>(j)] += static_cast<int>(users[static_cast<size_t>(j)].size());

      // Sequential K-SVD update, atoms in index order.
      for (int j = 0; j < cfg.n_dicts; ++j) {
        const auto& I = users[static_cast<size_t>(j)];
        if (I.empty()) continue;
        const Eigen::Index m = static_cast<Eigen::Index>(I.size());
        Eigen::MatrixXd Ej(n_dims, m);
        for (Eigen::Index c = 0; c < m; ++c) {
          const int i = I[static_cast<size_t>(c)];
          const double x = coef[static_cast<size_t>(i)][static_cast<size_t>(
              slot[static_cast<size_t>(j)][static_cast<size_t>(c)])];
          Ej.col(c) = residual.col(i) + x * D.atoms.row(j).transpose();
        }
        Eigen::VectorXd atom = D.atoms.row(j).transpose();
        Eigen::VectorXd new_coeffs;
        if (!rank1_update(Ej, atom, new_coeffs)) continue;
        // Fold the update back into the residuals and stored coefficients.
        for (Eigen::Index c = 0; c < m; ++c) {
          const int i = I[static_cast<size_t>(c)];
          const int k = slot[static_cast<size_t>(j)][static_cast<size_t>(c)];
          residual.col(i) = Ej.col(c) - new_coeffs(c) * atom;
          coef[static_cast<size_t>(i)][static_cast<size_t>(k)] = new_coeffs(c);
        }
        D.atoms.row(j) = atom.transpose();
      }
    }

    // Post-epoch diagnostics; the same pass feeds dead-atom replacement.
    const SparseCodes train_codes = encode_all(train_set, D, cfg.n_nnz, n_threads);
    std::vector<double> item_err = reconstruction_errors(train_set, D, train_codes, n_threads);
    const double err2 = std::accumulate(item_err.begin(), item_err.end(), 0.0);
    const double epoch_err = train_energy > 0 ? std::sqrt(err2 / train_energy) : 0.0;
    if (cfg.tol > 0 && result.report.converged_epoch < 0 &&
        !result.report.epoch_recon_error.empty()) {
      const double prev = result.report.epoch_recon_error.back();
      if (std::abs(prev - epoch_err) <= cfg.tol * std::max(prev, 1e-12))
        result.report.converged_epoch = epoch;
    }
    result.report.epoch_recon_error.push_back(epoch_err);

    int replaced = 0;
    std::vector<int> dead;
    for (int j = 0; j < cfg.n_dicts; ++j)
      if (usage[static_cast<size_t>(j)] < cfg.dead_atom_threshold) dead.push_back(j);
    if (!dead.empty()) {
      std::vector<Eigen::Index> worst(static_cast<size_t>(n_train));
      std::iota(worst.begin(), worst.end(), 0);
      std::sort(worst.begin(), worst.end(), [&](Eigen::Index a, Eigen::Index b) {
        const double ea = item_err[static_cast<size_t>(a)];
        const double eb = item_err[static_cast<size_t>(b)];
        return ea != eb ? ea > eb : a < b;
      });
      size_t next = 0;
      for (int j : dead) {
        while (next < worst.size()) {
          Eigen::VectorXd v = train_set.data.row(worst[next++]).cast<double>();
          const double n = v.norm();
          if (n < 1e-12) continue;
          D.atoms.row(j) = v.transpose() / n;
          ++replaced;
          break;
        }
      }
    }
    result.report.dead_atoms_replaced.push_back(replaced);

    const VarianceExplained ve = variance_explained(heldout_set, D, cfg.n_nnz, n_threads);
    result.report.epoch_variance_heldout.push_back(ve.value);
  }

  result.report.variance_explained_heldout =
      result.report.epoch_variance_heldout.empty()
          ? variance_explained(heldout_set, D, cfg.n_nnz, n_threads).value
          : result.report.epoch_variance_heldout.back();
  result.dictionary = std::move(D);
  return result;
}

VarianceExplained variance_explained(const EmbeddingSet& set, const Dictionary& D, int n_nnz,
                                     int n_threads) {
  if (set.n_dims() != D.n_dims())
    throw std::invalid_argument("variance_explained: dimension mismatch");
  VarianceExplained out;
  const double energy = squared_norm_all(set);
  if (energy == 0.0) {
    out.value = 1.0;
    out.all_zero = true;
    return out;
  }
  const SparseCodes codes = encode_all(set, D, n_nnz, n_threads);
  const std::vector<double> err = reconstruction_errors(set, D, codes, n_threads);
  const double err2 = std::accumulate(err.begin(), err.end(), 0.0);
  out.value = std::clamp(1.0 - err2 / energy, 0.0, 1.0);
  return out;
}

ImportancePool importance_sample_pool(const EmbeddingSet& set, const HeadWeights& weights,
                                      int top_k) {
  if (top_k < 1) throw std::invalid_argument("importance_sample_pool: top_k must be >= 1");
  if (set.n_dims() != weights.W.cols())
    throw std::invalid_argument("importance_sample_pool: dimension mismatch");

  // Group non-cue patch items by image, first appearance order.
  std::vector<std::string> image_order;
  std::map<std::string, std::vector<Eigen::Index>> by_image;
  for (Eigen::Index i = 0; i < set.n_items(); ++i) {
    const ItemMeta& m = set.meta[static_cast<size_t>(i)];
    if (m.is_cue) continue;
    if (m.patch_row < 0 || m.patch_col < 0)
      throw std::invalid_argument("importance_sample_pool: item without grid position");
    if (by_image.find(m.image_id) == by_image.end()) image_order.push_back(m.image_id);
    by_image[m.image_id].push_back(i);
  }

  ImportancePool out;
  std::vector<Eigen::Index> keep;
  for (const std::string& img : image_order) {
    const std::vector<Eigen::Index>& items = by_image[img];
    Eigen::MatrixXd Z(static_cast<Eigen::Index>(items.size()), set.n_dims());
    for (size_t r = 0; r < items.size(); ++r)
      Z.row(static_cast<Eigen::Index>(r)) = set.data.row(items[r]).cast<double>();

    // Softmax over the available non-cue patches, per keypoint; rank by the
    // summed attention mass.
    const Eigen::MatrixXd logits = Z * weights.W.transpose();
    Eigen::VectorXd mass = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(items.size()));
    for (int k = 0; k < weights.n_kp; ++k) {
      const double mx = logits.col(k).maxCoeff();
      Eigen::VectorXd a = (logits.col(k).array() - mx).exp();
      a /= a.sum();
      mass += a;
    }

    std::vector<size_t> rank(items.size());
    std::iota(rank.begin(), rank.end(), 0);
    std::sort(rank.begin(), rank.end(), [&](size_t a, size_t b) {
      const double ma = mass(static_cast<Eigen::Index>(a));
      const double mb = mass(static_cast<Eigen::Index>(b));
      if (ma != mb) return ma > mb;
      const ItemMeta& xa = set.meta[static_cast<size_t>(items[a])];
      const ItemMeta& xb = set.meta[static_cast<size_t>(items[b])];
      const int pa = xa.patch_row * weights.grid + xa.patch_col;
      const int pb = xb.patch_row * weights.grid + xb.patch_col;
      return pa < pb;
    });

    if (items.size() < static_cast<size_t>(top_k)) out.short_images.push_back(img);
    const size_t take = std::min(items.size(), static_cast<size_t>(top_k));
    std::vector<Eigen::Index> picked;
    for (size_t r = 0; r < take; ++r) picked.push_back(items[rank[r]]);
    std::sort(picked.begin(), picked.end());  // preserve original item order within image
    keep.insert(keep.end(), picked.begin(), picked.end());
  }

  out.set = subset_rows(set, keep);
  return out;
}

}  // namespace atomlens
