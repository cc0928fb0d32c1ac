#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "atomlens/atom_analysis.hpp"
#include "atomlens/rng.hpp"

using namespace atomlens;

namespace {

SparseCodes make_codes(const std::vector<std::vector<std::pair<int, double>>>& per_item) {
  SparseCodes codes;
  for (size_t i = 0; i < per_item.size(); ++i) {
    SparseCodes::Item it;
    it.item = static_cast<int>(i);
    for (const auto& [a, c] : per_item[i]) {
      it.atoms.push_back(a);
      it.coeffs.push_back(c);
    }
    codes.items.push_back(std::move(it));
    codes.n_nnz_budget =
        std::max<int>(codes.n_nnz_budget, static_cast<int>(per_item[i].size()));
  }
  return codes;
}

}  // namespace

TEST_CASE("activation rates") {
  SUBCASE("atom active everywhere has rate 1 in every subset") {
    const SparseCodes codes = make_codes({{{0, 1.0}}, {{0, -2.0}}, {{0, 0.5}}, {{0, 3.0}}});
    const ActivationRates r = activation_rates(codes, {"a", "a", "b", "b"}, 3);
    CHECK(r.rate(0, 0) == 1.0);
    CHECK(r.rate(0, 1) == 1.0);
    CHECK(r.rate(1, 0) == 0.0);
  }

  SUBCASE("direct counting over uneven subsets") {
    // Subset a: 10 items, atom 2 active on 1. Subset b: 20 items, active on 5.
    std::vector<std::vector<std::pair<int, double>>> items;
    std::vector<std::string> tags;
    for (int i = 0; i < 10; ++i) {
      items.push_back(i == 0 ? std::vector<std::pair<int, double>>{{2, 1.0}}
                             : std::vector<std::pair<int, double>>{});
      tags.push_back("a");
    }
    for (int i = 0; i < 20; ++i) {
      items.push_back(i < 5 ? std::vector<std::pair<int, double>>{{2, -1.0}}
                            : std::vector<std::pair<int, double>>{});
      tags.push_back("b");
    }
    const ActivationRates r = activation_rates(make_codes(items), tags, 4);
    CHECK(r.rate(2, 0) == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(r.rate(2, 1) == doctest::Approx(0.25).epsilon(1e-15));
  }

  SUBCASE("explicit zero coefficients do not count as active") {
    const SparseCodes codes = make_codes({{{1, 0.0}}, {{1, 2.0}}});
    const ActivationRates r = activation_rates(codes, {"a", "a"}, 2);
    CHECK(r.rate(1, 0) == 0.5);
  }

  SUBCASE("atom index beyond n_dicts is an error") {
    const SparseCodes codes = make_codes({{{7, 1.0}}});
    CHECK_THROWS_AS(activation_rates(codes, {"a"}, 4), std::invalid_argument);
  }

  SUBCASE("rates are invariant to item order") {
    Rng rng(5);
    std::vector<std::vector<std::pair<int, double>>> items;
    std::vector<std::string> tags;
    for (int i = 0; i < 60; ++i) {
      std::vector<std::pair<int, double>> s;
      for (int k = 0; k < 3; ++k)
        if (rng.below(2)) s.push_back({static_cast<int>(rng.below(6)), rng.normal()});
      items.push_back(s);
      tags.push_back(rng.below(2) ? "a" : "b");
    }
    const ActivationRates r1 = activation_rates(make_codes(items), tags, 6);
    std::vector<size_t> perm(items.size());
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    std::vector<std::vector<std::pair<int, double>>> items2;
    std::vector<std::string> tags2;
    for (size_t i : perm) {
      items2.push_back(items[i]);
      tags2.push_back(tags[i]);
    }
    const ActivationRates r2 = activation_rates(make_codes(items2), tags2, 6);
    for (size_t s = 0; s < r1.subsets.size(); ++s) {
      // Subset discovery order may differ; match by name.
      const auto it = std::find(r2.subsets.begin(), r2.subsets.end(), r1.subsets[s]);
      REQUIRE(it != r2.subsets.end());
      const Eigen::Index col = it - r2.subsets.begin();
      CHECK((r1.rate.col(static_cast<Eigen::Index>(s)) - r2.rate.col(col)).cwiseAbs().maxCoeff() ==
            0.0);
    }
  }
}

TEST_CASE("coefficient of variation") {
  ActivationRates r;
  r.subsets = {"a", "b"};

  SUBCASE("equal rates give zero") {
    r.rate.resize(1, 2);
    r.rate << 0.3, 0.3;
    const auto cv = coefficient_of_variation(r);
    CHECK(*cv[0] == 0.0);
  }

  SUBCASE("rates 0.1 and 0.3 give exactly 0.5") {
    r.rate.resize(1, 2);
    r.rate << 0.1, 0.3;
    const auto cv = coefficient_of_variation(r);
    CHECK(*cv[0] == doctest::Approx(0.5).epsilon(1e-12));
  }

  SUBCASE("all-zero rates give the undefined sentinel") {
    r.subsets = {"a", "b", "c", "d"};
    r.rate = Eigen::MatrixXd::Zero(1, 4);
    const auto cv = coefficient_of_variation(r);
    CHECK_FALSE(cv[0].has_value());
  }

  SUBCASE("a single subset is an error") {
    r.subsets = {"a"};
    r.rate = Eigen::MatrixXd::Constant(1, 1, 0.5);
    CHECK_THROWS_WITH_AS(coefficient_of_variation(r), doctest::Contains("cv requires"),
                         std::invalid_argument);
  }

  SUBCASE("scale invariance: CV(c*p) == CV(p)") {
    r.subsets = {"a", "b", "c"};
    r.rate.resize(2, 3);
    r.rate << 0.1, 0.2, 0.4, 0.05, 0.1, 0.2;  // second row = first * 0.5
    const auto cv = coefficient_of_variation(r);
    CHECK(*cv[0] == doctest::Approx(*cv[1]).epsilon(1e-12));
  }
}

TEST_CASE("content/style split") {
  SUBCASE("even count: midpoint median, two contentful, two stylistic") {
    const std::vector<std::optional<double>> cvs{0.1, 0.2, 0.3, 0.4};
    const SplitResult s = split_content_style(cvs);
    CHECK(s.median_cv == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(s.labels[0] == AtomLabel::Contentful);
    CHECK(s.labels[1] == AtomLabel::Contentful);
    CHECK(s.labels[2] == AtomLabel::Stylistic);
    CHECK(s.labels[3] == AtomLabel::Stylistic);
    CHECK(s.n_at_median == 0);
  }

  SUBCASE("all equal CVs tie at the median and go stylistic") {
    const std::vector<std::optional<double>> cvs{0.2, 0.2, 0.2};
    const SplitResult s = split_content_style(cvs);
    for (const AtomLabel l : s.labels) CHECK(l == AtomLabel::Stylistic);
    CHECK(s.n_at_median == 3);
  }

  SUBCASE("a single active atom equals the median, stylistic and flagged") {
    const std::vector<std::optional<double>> cvs{std::nullopt, 0.7, std::nullopt};
    const SplitResult s = split_content_style(cvs);
    CHECK(s.labels[0] == AtomLabel::Inactive);
    CHECK(s.labels[1] == AtomLabel::Stylistic);
    CHECK(s.labels[2] == AtomLabel::Inactive);
    CHECK(s.n_at_median == 1);
  }

  SUBCASE("no active atoms is an error") {
    CHECK_THROWS_AS(split_content_style({std::nullopt, std::nullopt}), std::invalid_argument);
  }

  SUBCASE("partition sizes differ by at most the median ties") {
    Rng rng(9);
    std::vector<std::optional<double>> cvs;
    for (int i = 0; i < 101; ++i) cvs.push_back(rng.uniform());
    const SplitResult s = split_content_style(cvs);
    int n_content = 0, n_style = 0;
    for (const AtomLabel l : s.labels) {
      n_content += l == AtomLabel::Contentful;
      n_style += l == AtomLabel::Stylistic;
    }
    CHECK(std::abs(n_content - n_style) <= s.n_at_median + 1);
  }
}

TEST_CASE("reliance scores") {
  Dictionary D;
  D.atoms.resize(4, 3);
  D.atoms << 1, 0, 0, 0, 1, 0, 0, 0, 1, 1.0 / std::sqrt(2), 1.0 / std::sqrt(2), 0;
  HeadWeights w;
  w.n_kp = 2;
  w.grid = 2;
  w.W.resize(2, 3);
  w.W << 2, 0, 0, 0, 0, 0;  // aligned only with dims 0 (and atom 3 partially)

  SUBCASE("never-active atom scores zero regardless of alignment") {
    const SparseCodes codes = make_codes({{{1, 1.0}}, {{1, 2.0}}});
    const RelianceScores r = reliance_scores(D, w, codes);
    CHECK(r.head_alignment(0) == doctest::Approx(2.0));
    CHECK(r.mean_abs_coeff(0) == 0.0);
    CHECK(r.score(0) == 0.0);
  }

  SUBCASE("atom orthogonal to every head row scores zero") {
    const SparseCodes codes = make_codes({{{2, 5.0}}, {{2, -5.0}}});
    const RelianceScores r = reliance_scores(D, w, codes);
    CHECK(r.head_alignment(2) == 0.0);
    CHECK(r.mean_abs_coeff(2) == 5.0);
    CHECK(r.score(2) == 0.0);
  }

  SUBCASE("mean over all items equals active-rate times active-mean") {
    // Atom 0 active on 2 of 4 items with |coeffs| 1 and 3; alignment 2.
    const SparseCodes codes = make_codes({{{0, 1.0}}, {{0, -3.0}}, {}, {{1, 9.9}}});
    const RelianceScores r = reliance_scores(D, w, codes);
    CHECK(r.mean_abs_coeff(0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(r.score(0) == doctest::Approx(2.0).epsilon(1e-15));
    // Factorization identity: 2/4 * mean(1,3) = 1.0.
    CHECK(r.mean_abs_coeff(0) == doctest::Approx((2.0 / 4.0) * 2.0).epsilon(1e-15));
  }

  SUBCASE("factorization identity holds for every atom on random codes") {
    Rng rng(33);
    std::vector<std::vector<std::pair<int, double>>> items;
    for (int i = 0; i < 500; ++i) {
      std::vector<std::pair<int, double>> s;
      for (int a = 0; a < 4; ++a)
        if (rng.below(3) == 0) s.push_back({a, rng.normal() * 2});
      items.push_back(s);
    }
    const SparseCodes codes = make_codes(items);
    const RelianceScores r = reliance_scores(D, w, codes);
    for (int a = 0; a < 4; ++a) {
      long n_active = 0;
      double sum_active = 0;
      for (const auto& it : items)
        for (const auto& [atom, c] : it)
          if (atom == a && c != 0.0) {
            ++n_active;
            sum_active += std::abs(c);
          }
      const double p_active = static_cast<double>(n_active) / 500.0;
      const double mean_given_active = n_active ? sum_active / static_cast<double>(n_active) : 0.0;
      CHECK(std::abs(r.mean_abs_coeff(a) - p_active * mean_given_active) <= 1e-12);
    }
  }
}

TEST_CASE("content fraction") {
  Eigen::VectorXd scores(3);
  std::vector<AtomLabel> labels{AtomLabel::Contentful, AtomLabel::Stylistic, AtomLabel::Inactive};

  SUBCASE("all reliance on contentful atoms") {
    scores << 1.5, 0.0, 0.0;
    CHECK(content_fraction(scores, labels) == 1.0);
  }

  SUBCASE("a 0.82/0.18 split reads back as 0.82") {
    scores << 0.82, 0.18, 0.0;
    CHECK(content_fraction(scores, labels) == doctest::Approx(0.82).epsilon(1e-12));
  }

  SUBCASE("equal scores on one contentful and one stylistic atom give one half") {
    scores << 0.4, 0.4, 0.0;
    CHECK(content_fraction(scores, labels) == doctest::Approx(0.5).epsilon(1e-15));
  }

  SUBCASE("content and style fractions sum to one") {
    Rng rng(41);
    Eigen::VectorXd s(6);
    std::vector<AtomLabel> l(6);
    for (int i = 0; i < 6; ++i) {
      s(i) = rng.uniform();
      l[static_cast<size_t>(i)] = rng.below(2) ? AtomLabel::Contentful : AtomLabel::Stylistic;
    }
    std::vector<AtomLabel> flipped(l);
    for (auto& x : flipped)
      x = (x == AtomLabel::Contentful) ? AtomLabel::Stylistic : AtomLabel::Contentful;
    CHECK(std::abs(content_fraction(s, l) + content_fraction(s, flipped) - 1.0) <= 1e-12);
  }

  SUBCASE("zero total reliance is an error") {
    scores << 0, 0, 0;
    CHECK_THROWS_WITH_AS(content_fraction(scores, labels), doctest::Contains("no reliance mass"),
                         std::invalid_argument);
  }
}

TEST_CASE("top-activating manifest") {
  std::vector<ItemMeta> meta;
  for (int i = 0; i < 6; ++i) {
    ItemMeta m;
    m.image_id = "img" + std::to_string(i / 2);
    m.subset = "xplane";
    m.patch_row = i % 2;
    m.patch_col = i % 2;
    meta.push_back(std::move(m));
  }

  SUBCASE("magnitude ordering with signs preserved") {
    const SparseCodes codes = make_codes({{{0, 5.0}}, {{0, -7.0}}, {{0, 2.0}}});
    const auto ms = top_activating_manifest(codes, meta, {0}, 3, 4);
    REQUIRE(ms.size() == 1);
    REQUIRE(ms[0].records.size() == 3);
    CHECK(ms[0].records[0].coeff == -7.0);
    CHECK(ms[0].records[1].coeff == 5.0);
    CHECK(ms[0].records[2].coeff == 2.0);
    CHECK(ms[0].records[0].context_halfwidth == 3);
    CHECK_FALSE(ms[0].short_flag);
  }

  SUBCASE("an atom active once returns a single flagged record") {
    const SparseCodes codes = make_codes({{{1, 2.5}}, {}, {}});
    const auto ms = top_activating_manifest(codes, meta, {1}, 4, 4);
    REQUIRE(ms[0].records.size() == 1);
    CHECK(ms[0].short_flag);
  }

  SUBCASE("default protocol returns four records per atom") {
    const SparseCodes codes =
        make_codes({{{2, 1.0}}, {{2, 2.0}}, {{2, 3.0}}, {{2, 4.0}}, {{2, 5.0}}, {{2, 6.0}}});
    const auto ms = top_activating_manifest(codes, meta, {2}, 4, 4);
    REQUIRE(ms[0].records.size() == 4);
    CHECK(ms[0].records[0].coeff == 6.0);
    CHECK_FALSE(ms[0].short_flag);
  }

  SUBCASE("unknown atom id is an error") {
    const SparseCodes codes = make_codes({{{0, 1.0}}});
    CHECK_THROWS_WITH_AS(top_activating_manifest(codes, meta, {9}, 4, 4),
                         doctest::Contains("unknown atom"), std::invalid_argument);
  }

  SUBCASE("ties break on image id then patch index") {
    const SparseCodes codes = make_codes({{{3, 1.0}}, {{3, -1.0}}, {{3, 1.0}}});
    const auto ms = top_activating_manifest(codes, meta, {3}, 2, 4);
    CHECK(ms[0].records[0].image_id == "img0");
    CHECK(ms[0].records[0].patch_row == 0);
    CHECK(ms[0].records[1].image_id == "img0");
    CHECK(ms[0].records[1].patch_row == 1);
  }
}

TEST_CASE("profile table round-trips through JSON and CSV") {
  ActivationRates rates;
  rates.subsets = {"xplane", "ges"};
  rates.rate.resize(2, 2);
  rates.rate << 0.5, 0.5, 0.0, 0.25;
  const auto cvs = coefficient_of_variation(rates);
  const SplitResult split = split_content_style(cvs);
  const auto profiles = build_profiles(rates, cvs, split);

  const auto dir = std::filesystem::temp_directory_path();
  write_profiles_json(profiles, rates.subsets, split.median_cv, 0.75, dir / "prof.json");
  std::vector<std::string> subsets;
  const auto back = read_profiles_json(dir / "prof.json", &subsets);
  REQUIRE(back.size() == 2);
  CHECK(subsets == rates.subsets);
  CHECK(back[0].label == profiles[0].label);
  CHECK(back[0].rates.at("xplane") == 0.5);
  CHECK(back[1].cv.has_value());

  write_profiles_csv(profiles, rates.subsets, dir / "prof.csv");
  std::ifstream csv(dir / "prof.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "atom_id,rate_xplane,rate_ges,cv,label,alignment,mean_abs,score");
}
