#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "atomlens/dictionary_learning.hpp"
#include "atomlens/rng.hpp"
#include "atomlens/synthgen.hpp"

using namespace atomlens;

namespace {

Dictionary random_unit_dict(int n_dicts, int n_dims, uint64_t seed) {
  Rng rng(seed);
  Dictionary D;
  D.atoms.resize(n_dicts, n_dims);
  for (int j = 0; j < n_dicts; ++j) {
    Eigen::VectorXd v(n_dims);
    do {
      for (int d = 0; d < n_dims; ++d) v(d) = rng.normal();
    } while (v.norm() < 1e-9);
    D.atoms.row(j) = v.transpose() / v.norm();
  }
  return D;
}

EmbeddingSet wrap_rows(const Eigen::MatrixXd& rows) {
  EmbeddingSet set;
  set.data = rows.cast<float>();
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    ItemMeta m;
    m.image_id = "img" + std::to_string(i / 4);
    m.subset = (i % 2 == 0) ? "xplane" : "ges";
    m.patch_row = static_cast<int>(i % 4) / 2;
    m.patch_col = static_cast<int>(i % 4) % 2;
    set.meta.push_back(std::move(m));
  }
  return set;
}

// Step-by-step re-enactment of the published selection rule, written as plain
// loops with no shared code. The independent oracle for MP equivalence.
struct OracleStep {
  int atom;
  double coeff;
};
std::vector<OracleStep> brute_force_greedy(Eigen::VectorXd r, const Eigen::MatrixXd& atoms,
                                           int n_nnz) {
  std::vector<OracleStep> steps;
  std::set<int> used;
  for (int s = 0; s < n_nnz && static_cast<int>(used.size()) < atoms.rows(); ++s) {
    double rn = 0;
    for (int d = 0; d < r.size(); ++d) rn += r(d) * r(d);
    if (std::sqrt(rn) <= 1e-10) break;
    int best = -1;
    double best_abs = 0;
    for (int j = 0; j < atoms.rows(); ++j) {
      if (used.count(j)) continue;
      double dot = 0;
      for (int d = 0; d < r.size(); ++d) dot += atoms(j, d) * r(d);
      if (std::abs(dot) > best_abs) {
        best_abs = std::abs(dot);
        best = j;
      }
    }
    if (best < 0 || best_abs == 0) break;
    double dot = 0;
    for (int d = 0; d < r.size(); ++d) dot += atoms(best, d) * r(d);
    for (int d = 0; d < r.size(); ++d) r(d) -= dot * atoms(best, d);
    used.insert(best);
    steps.push_back({best, dot});
  }
  return steps;
}

// Greedy bipartite matching on |cosine| between fitted and planted atoms.
int count_recovered(const Dictionary& fitted, const Dictionary& truth, double cos_min) {
  Eigen::MatrixXd C = (fitted.atoms * truth.atoms.transpose()).cwiseAbs();
  int matched = 0;
  for (Eigen::Index step = 0; step < std::min(C.rows(), C.cols()); ++step) {
    Eigen::Index r = 0, c = 0;
    const double best = C.maxCoeff(&r, &c);
    if (best < cos_min) break;
    ++matched;
    C.row(r).setConstant(-1.0);
    C.col(c).setConstant(-1.0);
  }
  return matched;
}

}  // namespace

TEST_CASE("matching pursuit on an exact atom terminates in one step") {
  const Dictionary D = random_unit_dict(8, 6, 101);
  const Eigen::VectorXd z = 3.0 * D.atoms.row(5).transpose();
  const MpResult r = matching_pursuit(z, D, 4);
  REQUIRE(r.atom_indices.size() == 1);
  CHECK(r.atom_indices[0] == 5);
  CHECK(r.coefficients[0] == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(r.residual_norm <= 1e-10);
}

TEST_CASE("matching pursuit on the zero vector returns an empty support") {
  const Dictionary D = random_unit_dict(5, 4, 7);
  const MpResult r = matching_pursuit(Eigen::VectorXd::Zero(4), D, 3);
  CHECK(r.atom_indices.empty());
  CHECK(r.residual_norm == 0.0);
}

TEST_CASE("matching pursuit rejects non-unit-norm dictionaries") {
  Dictionary D = random_unit_dict(4, 4, 9);
  D.atoms.row(2) *= 1.01;
  CHECK_THROWS_AS(matching_pursuit(Eigen::VectorXd::Ones(4), D, 2), std::invalid_argument);
}

TEST_CASE("matching pursuit equals the brute-force greedy oracle") {
  Rng rng(2025);
  for (int t = 0; t < 200; ++t) {
    const int n_dims = 2 + static_cast<int>(rng.below(7));
    const int n_dicts = 3 + static_cast<int>(rng.below(10));
    const int n_nnz = 1 + static_cast<int>(rng.below(3));
    const Dictionary D = random_unit_dict(n_dicts, n_dims, rng.next_u64());
    Eigen::VectorXd z(n_dims);
    for (int d = 0; d < n_dims; ++d) z(d) = rng.normal();

    const MpResult mp = matching_pursuit(z, D, n_nnz);
    const auto oracle = brute_force_greedy(z, D.atoms, n_nnz);
    REQUIRE(mp.atom_indices.size() == oracle.size());
    for (size_t k = 0; k < oracle.size(); ++k) {
      CHECK(mp.atom_indices[k] == oracle[k].atom);
      CHECK(std::abs(mp.coefficients[k] - oracle[k].coeff) <= 1e-10);
    }
  }
}

TEST_CASE("residual norm is non-increasing across pursuit steps") {
  Rng rng(31);
  for (int t = 0; t < 50; ++t) {
    const Dictionary D = random_unit_dict(10, 6, rng.next_u64());
    Eigen::VectorXd z(6);
    for (int d = 0; d < 6; ++d) z(d) = rng.normal();
    const MpResult mp = matching_pursuit(z, D, 5);
    Eigen::VectorXd r = z;
    double prev = r.norm();
    for (size_t k = 0; k < mp.atom_indices.size(); ++k) {
      r -= mp.coefficients[k] * D.atoms.row(mp.atom_indices[k]).transpose();
      CHECK(r.norm() <= prev + 1e-12);
      prev = r.norm();
    }
    CHECK(std::abs(prev - mp.residual_norm) <= 1e-12);
  }
}

TEST_CASE("encode_all") {
  const Dictionary D = random_unit_dict(12, 8, 55);

  SUBCASE("exactly representable atoms come back 1-sparse with coefficient 1") {
    const Dictionary I8{Eigen::MatrixXd::Identity(8, 8)};
    const SparseCodes codes = encode_all(wrap_rows(I8.atoms), I8, 4);
    for (size_t i = 0; i < codes.items.size(); ++i) {
      REQUIRE(codes.items[i].atoms.size() == 1);
      CHECK(codes.items[i].atoms[0] == static_cast<int>(i));
      CHECK(codes.items[i].coeffs[0] == 1.0);
    }
  }

  SUBCASE("float32-stored atoms select themselves at unit coefficient") {
    const SparseCodes codes = encode_all(wrap_rows(D.atoms), D, 1);
    for (size_t i = 0; i < codes.items.size(); ++i) {
      REQUIRE(codes.items[i].atoms.size() == 1);
      CHECK(codes.items[i].atoms[0] == static_cast<int>(i));
      CHECK(codes.items[i].coeffs[0] == doctest::Approx(1.0).epsilon(1e-6));
    }
  }

  SUBCASE("empty set gives empty codes") {
    EmbeddingSet empty;
    empty.data.resize(0, 8);
    CHECK(encode_all(empty, D, 4).items.empty());
  }

  SUBCASE("total reconstruction error equals the sum of per-item residuals") {
    Rng rng(66);
    Eigen::MatrixXd rows(100, 8);
    for (Eigen::Index i = 0; i < rows.size(); ++i) rows.data()[i] = rng.normal();
    const EmbeddingSet set = wrap_rows(rows);
    const SparseCodes codes = encode_all(set, D, 3);

    double frob2 = 0.0, residual2 = 0.0;
    for (Eigen::Index i = 0; i < set.n_items(); ++i) {
      Eigen::VectorXd z = set.data.row(i).cast<double>();
      const auto& it = codes.items[static_cast<size_t>(i)];
      for (size_t k = 0; k < it.atoms.size(); ++k)
        z -= it.coeffs[k] * D.atoms.row(it.atoms[k]).transpose();
      frob2 += z.squaredNorm();
      const MpResult mp = matching_pursuit(set.data.row(i).cast<double>(), D, 3);
      residual2 += mp.residual_norm * mp.residual_norm;
    }
    CHECK(frob2 == doctest::Approx(residual2).epsilon(1e-10));
  }

  SUBCASE("permutation equivariance") {
    Rng rng(77);
    Eigen::MatrixXd rows(20, 8);
    for (Eigen::Index i = 0; i < rows.size(); ++i) rows.data()[i] = rng.normal();
    EmbeddingSet set = wrap_rows(rows);
    std::vector<Eigen::Index> perm(20);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    EmbeddingSet permuted;
    permuted.data.resize(20, 8);
    for (int i = 0; i < 20; ++i) {
      permuted.data.row(i) = set.data.row(perm[static_cast<size_t>(i)]);
      permuted.meta.push_back(set.meta[static_cast<size_t>(perm[static_cast<size_t>(i)])]);
    }
    const SparseCodes a = encode_all(set, D, 3);
    const SparseCodes b = encode_all(permuted, D, 3);
    for (int i = 0; i < 20; ++i) {
      CHECK(b.items[static_cast<size_t>(i)].atoms ==
            a.items[static_cast<size_t>(perm[static_cast<size_t>(i)])].atoms);
      CHECK(b.items[static_cast<size_t>(i)].coeffs ==
            a.items[static_cast<size_t>(perm[static_cast<size_t>(i)])].coeffs);
    }
  }

  SUBCASE("multi-threaded encode matches single-threaded exactly") {
    Rng rng(88);
    Eigen::MatrixXd rows(64, 8);
    for (Eigen::Index i = 0; i < rows.size(); ++i) rows.data()[i] = rng.normal();
    const EmbeddingSet set = wrap_rows(rows);
    const SparseCodes a = encode_all(set, D, 4, 1);
    const SparseCodes b = encode_all(set, D, 4, 4);
    for (size_t i = 0; i < a.items.size(); ++i) {
      CHECK(a.items[i].atoms == b.items[i].atoms);
      CHECK(a.items[i].coeffs == b.items[i].coeffs);
    }
  }

  SUBCASE("dimension mismatch is reported with both sizes") {
    EmbeddingSet set;
    set.data.resize(1, 5);
    set.data.setZero();
    set.meta.push_back({"a", "s", 0, 1, false, std::nullopt, std::nullopt});
    CHECK_THROWS_WITH_AS(encode_all(set, D, 2), doctest::Contains("n_dims=5"),
                         std::invalid_argument);
  }
}

TEST_CASE("variance explained") {
  const Dictionary D = random_unit_dict(10, 6, 99);

  SUBCASE("the atoms themselves are explained exactly") {
    const VarianceExplained ve = variance_explained(wrap_rows(D.atoms), D, 2);
    CHECK(ve.value == doctest::Approx(1.0).epsilon(1e-9));
    CHECK_FALSE(ve.all_zero);
  }

  SUBCASE("all-zero set is defined as 1 and flagged") {
    EmbeddingSet zeros = wrap_rows(Eigen::MatrixXd::Zero(3, 6));
    const VarianceExplained ve = variance_explained(zeros, D, 2);
    CHECK(ve.value == 1.0);
    CHECK(ve.all_zero);
  }

  SUBCASE("matches an independent per-item accumulation") {
    Rng rng(123);
    Eigen::MatrixXd rows(50, 6);
    for (Eigen::Index i = 0; i < rows.size(); ++i) rows.data()[i] = rng.normal();
    const EmbeddingSet set = wrap_rows(rows);
    const VarianceExplained ve = variance_explained(set, D, 3);

    double num = 0.0, den = 0.0;
    for (Eigen::Index i = 0; i < set.n_items(); ++i) {
      const Eigen::VectorXd z = set.data.row(i).cast<double>();
      const MpResult mp = matching_pursuit(z, D, 3);
      num += mp.residual_norm * mp.residual_norm;
      den += z.squaredNorm();
    }
    CHECK(ve.value == doctest::Approx(1.0 - num / den).epsilon(1e-10));
  }
}

TEST_CASE("ksvd: orthonormal pool is a fixed point") {
  const int n = 16;
  EmbeddingSet pool = wrap_rows(Eigen::MatrixXd::Identity(n, n));
  KsvdConfig cfg;
  cfg.n_dicts = n;
  cfg.n_nnz = 1;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.seed = 3;
  cfg.dead_atom_threshold = 0;  // the held-out row would otherwise be recycled
  const KsvdResult res = ksvd_fit(pool, cfg);

  // Every fitted atom matches a distinct pool row up to sign.
  CHECK(count_recovered(res.dictionary, Dictionary{Eigen::MatrixXd::Identity(n, n)},
                        1.0 - 1e-9) == n);
  CHECK(res.report.variance_explained_heldout == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ksvd: recovers a planted dictionary and reports high held-out variance") {
  SynthConfig scfg;
  scfg.n_dims = 16;
  scfg.n_dicts_true = 24;
  scfg.seed = 4;
  const Dictionary truth = plant_dictionary(scfg);

  Rng rng(1234);
  const int n_items = 6000, n_nnz = 3;
  Eigen::MatrixXd rows(n_items, 16);
  for (int i = 0; i < n_items; ++i) {
    std::vector<int> atoms;
    while (static_cast<int>(atoms.size()) < n_nnz) {
      const int a = static_cast<int>(rng.below(24));
      if (std::find(atoms.begin(), atoms.end(), a) == atoms.end()) atoms.push_back(a);
    }
    Eigen::VectorXd z = Eigen::VectorXd::Zero(16);
    for (int a : atoms) {
      const double mag = rng.uniform(0.5, 1.5);
      z += (rng.below(2) == 0 ? mag : -mag) * truth.atoms.row(a).transpose();
    }
    for (int d = 0; d < 16; ++d) z(d) += 0.01 * rng.normal();
    rows.row(i) = z.transpose();
  }

  KsvdConfig cfg;
  cfg.n_dicts = 24;
  cfg.n_nnz = n_nnz;
  cfg.epochs = 15;
  cfg.batch_size = 1024;
  cfg.seed = 5;
  const KsvdResult res = ksvd_fit(wrap_rows(rows), cfg);

  const int recovered = count_recovered(res.dictionary, truth, 0.99);
  CHECK(recovered >= 22);  // >= 90% of 24
  CHECK(res.report.variance_explained_heldout >= 0.90);
  CHECK(res.report.epoch_variance_heldout.back() >=
        res.report.epoch_variance_heldout.front() - 1e-12);
  res.dictionary.validate();  // unit norms within 1e-6
}

TEST_CASE("ksvd: precondition violations") {
  EmbeddingSet tiny = wrap_rows(Eigen::MatrixXd::Identity(4, 4));
  KsvdConfig cfg;
  cfg.n_dicts = 8;
  cfg.n_nnz = 2;
  CHECK_THROWS_WITH_AS(ksvd_fit(tiny, cfg), doctest::Contains("pool too small"),
                       std::invalid_argument);

  cfg.n_dicts = 4;
  cfg.n_nnz = 5;
  CHECK_THROWS_WITH_AS(ksvd_fit(tiny, cfg), doctest::Contains("n_nnz"), std::invalid_argument);
}

TEST_CASE("importance-sampled pool") {
  SUBCASE("a patch dominating all keypoints ranks first") {
    HeadWeights w;
    w.n_kp = 2;
    w.grid = 2;
    w.W.resize(2, 4);
    w.W << 1, 0, 0, 0, 0, 1, 0, 0;
    EmbeddingSet set;
    set.data.resize(4, 4);
    set.data.setZero();
    set.data(3, 0) = 9.0f;  // patch 3 carries huge logits for both keypoints
    set.data(3, 1) = 9.0f;
    for (int p = 0; p < 4; ++p) {
      ItemMeta m;
      m.image_id = "img0";
      m.subset = "xplane";
      m.patch_row = p / 2;
      m.patch_col = p % 2;
      set.meta.push_back(std::move(m));
    }
    const ImportancePool pool = importance_sample_pool(set, w, 1);
    REQUIRE(pool.set.n_items() == 1);
    CHECK(pool.set.meta[0].patch_row == 1);
    CHECK(pool.set.meta[0].patch_col == 1);
  }

  SUBCASE("uniform attention keeps the first top_k in row-major order") {
    HeadWeights w;
    w.n_kp = 2;
    w.grid = 2;
    w.W = Eigen::MatrixXd::Zero(2, 4);
    EmbeddingSet set;
    set.data = MatrixXfRM::Ones(4, 4);
    for (int p = 0; p < 4; ++p) {
      ItemMeta m;
      m.image_id = "img0";
      m.subset = "xplane";
      m.patch_row = p / 2;
      m.patch_col = p % 2;
      m.is_cue = (p == 0);
      set.meta.push_back(std::move(m));
    }
    const ImportancePool pool = importance_sample_pool(set, w, 2);
    REQUIRE(pool.set.n_items() == 2);
    CHECK(pool.set.meta[0].patch_col == 1);  // patch (0,1): cue excluded first
    CHECK(pool.set.meta[1].patch_row == 1);  // then patch (1,0)
    CHECK(pool.short_images.empty());
  }

  SUBCASE("pool size and membership match an independent re-ranking") {
    SynthConfig cfg;
    cfg.n_dims = 16;
    cfg.n_dicts_true = 24;
    cfg.content_atom_count = 12;
    cfg.style_atoms_per_subset = 3;
    cfg.task_atom_ids = {0, 1};
    cfg.n_kp = 2;
    cfg.n_images = 10;
    cfg.grid = 3;
    cfg.n_nnz_true = 3;
    cfg.seed = 17;
    const SynthCorpus corpus = generate_corpus(cfg);
    const int top_k = 4;
    const ImportancePool pool = importance_sample_pool(corpus.set, corpus.truth.head_true, top_k);
    CHECK(pool.set.n_items() == 10 * top_k);

    // Re-rank one image independently.
    const std::string target_img = "img000003";
    std::vector<Eigen::Index> items;
    for (Eigen::Index i = 0; i < corpus.set.n_items(); ++i)
      if (corpus.set.meta[static_cast<size_t>(i)].image_id == target_img &&
          !corpus.set.meta[static_cast<size_t>(i)].is_cue)
        items.push_back(i);
    Eigen::MatrixXd Z(static_cast<Eigen::Index>(items.size()), 16);
    for (size_t r = 0; r < items.size(); ++r)
      Z.row(static_cast<Eigen::Index>(r)) = corpus.set.data.row(items[r]).cast<double>();
    Eigen::MatrixXd logits = Z * corpus.truth.head_true.W.transpose();
    Eigen::VectorXd mass = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(items.size()));
    for (int k = 0; k < 2; ++k) {
      Eigen::VectorXd a = (logits.col(k).array() - logits.col(k).maxCoeff()).exp();
      mass += a / a.sum();
    }
    std::vector<size_t> order(items.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t x, size_t y) { return mass(static_cast<Eigen::Index>(x)) > mass(static_cast<Eigen::Index>(y)); });
    std::set<std::pair<int, int>> expect;
    for (int r = 0; r < top_k; ++r) {
      const ItemMeta& m = corpus.set.meta[static_cast<size_t>(items[order[static_cast<size_t>(r)]])];
      expect.insert({m.patch_row, m.patch_col});
    }
    std::set<std::pair<int, int>> got;
    for (Eigen::Index i = 0; i < pool.set.n_items(); ++i)
      if (pool.set.meta[static_cast<size_t>(i)].image_id == target_img)
        got.insert({pool.set.meta[static_cast<size_t>(i)].patch_row,
                    pool.set.meta[static_cast<size_t>(i)].patch_col});
    CHECK(got == expect);
  }

  SUBCASE("images with fewer than top_k non-cue patches keep all and are flagged") {
    HeadWeights w;
    w.n_kp = 1;
    w.grid = 2;
    w.W = Eigen::MatrixXd::Zero(1, 4);
    EmbeddingSet set;
    set.data = MatrixXfRM::Ones(2, 4);
    set.meta.push_back({"only", "ges", 0, 1, false, std::nullopt, std::nullopt});
    set.meta.push_back({"only", "ges", 1, 0, false, std::nullopt, std::nullopt});
    const ImportancePool pool = importance_sample_pool(set, w, 4);
    CHECK(pool.set.n_items() == 2);
    REQUIRE(pool.short_images.size() == 1);
    CHECK(pool.short_images[0] == "only");
  }
}
