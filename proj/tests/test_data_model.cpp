#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>

#include "atomlens/embz.hpp"
#include "atomlens/rng.hpp"
#include "atomlens/types.hpp"

using namespace atomlens;
namespace fs = std::filesystem;

namespace {

fs::path tmp_dir() {
  static fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "atomlens_test_data_model";
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

bool sets_bit_equal(const EmbeddingSet& a, const EmbeddingSet& b) {
  if (a.n_items() != b.n_items() || a.n_dims() != b.n_dims()) return false;
  for (Eigen::Index i = 0; i < a.data.size(); ++i)
    if (std::bit_cast<uint32_t>(a.data.data()[i]) != std::bit_cast<uint32_t>(b.data.data()[i]))
      return false;
  for (size_t i = 0; i < a.meta.size(); ++i)
    if (!meta_equal(a.meta[i], b.meta[i])) return false;
  return true;
}

EmbeddingSet random_set(Rng& rng) {
  EmbeddingSet set;
  const int n_items = 1 + static_cast<int>(rng.below(6));
  const int n_dims = 1 + static_cast<int>(rng.below(9));
  set.data.resize(n_items, n_dims);
  for (Eigen::Index i = 0; i < set.data.size(); ++i) {
    // Random finite float32 bit patterns, including denormals and -0.
    uint32_t bits;
    do {
      bits = static_cast<uint32_t>(rng.next_u64());
    } while (((bits >> 23) & 0xff) == 0xff);  // exclude inf/nan
    set.data.data()[i] = std::bit_cast<float>(bits);
  }
  const char* subsets[4] = {"xplane", "ges", "arcgis", "bingmaps"};
  for (int i = 0; i < n_items; ++i) {
    ItemMeta m;
    m.image_id = "img" + std::to_string(rng.below(4));
    m.subset = subsets[rng.below(4)];
    if (rng.below(4) == 0) {
      m.patch_row = m.patch_col = -1;  // summary item
    } else {
      m.patch_row = static_cast<int>(rng.below(16));
      m.patch_col = static_cast<int>(rng.below(16));
      if (m.patch_row == 0 && m.patch_col == 0 && rng.below(2) == 0) m.is_cue = true;
    }
    if (rng.below(3) == 0) {
      std::vector<double> alpha(4);
      for (double& a : alpha) a = rng.uniform();
      m.sam_alpha = alpha;
    }
    if (rng.below(2) == 0) m.label = rng.below(2) == 0 ? "ims" : "ooms";
    set.meta.push_back(std::move(m));
  }
  return set;
}

}  // namespace

TEST_CASE("round-trip of a minimal 1-item set, header plus 16 payload bytes") {
  EmbeddingSet set;
  set.data = MatrixXfRM::Zero(1, 4);
  set.meta.push_back({"img0", "xplane", 0, 0, false, std::nullopt, std::nullopt});
  const fs::path p = tmp_dir() / "one.embz";
  write_embeddings(set, p);

  // magic(6) + u64 header length(8) + header + 4 floats.
  std::ifstream in(p, std::ios::binary);
  char magic[6];
  in.read(magic, 6);
  CHECK(std::string(magic, 6) == "EMBZ1\n");
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 8);
  CHECK(fs::file_size(p) == 14 + hlen + 16);

  // Header length field matches the serialized JSON header exactly.
  std::string header(hlen, '\0');
  in.read(header.data(), static_cast<std::streamsize>(hlen));
  CHECK(header.front() == '{');
  CHECK(header.back() == '}');

  CHECK(sets_bit_equal(read_embeddings(p), set));
}

TEST_CASE("round-trip preserves meta order and subset strings") {
  EmbeddingSet set;
  set.data.resize(3, 2);
  set.data << 1.0f, 2.0f, -0.5f, 3.25f, 0.0f, -0.0f;
  set.meta.push_back({"a", "xplane", 1, 2, false, std::nullopt, std::nullopt});
  set.meta.push_back({"a", "ges", 3, 4, false, std::vector<double>{0.25, 0.5}, std::string("ims")});
  set.meta.push_back({"b", "bingmaps", -1, -1, false, std::nullopt, std::string("ooms")});
  const fs::path p = tmp_dir() / "three.embz";
  write_embeddings(set, p);
  const EmbeddingSet back = read_embeddings(p);
  CHECK(sets_bit_equal(back, set));
  CHECK(back.meta[1].subset == "ges");
  CHECK(back.meta[2].subset == "bingmaps");
}

TEST_CASE("non-finite data refuses to write") {
  EmbeddingSet set;
  set.data.resize(1, 2);
  set.data << 1.0f, std::numeric_limits<float>::quiet_NaN();
  set.meta.push_back({"x", "ges", 0, 1, false, std::nullopt, std::nullopt});
  CHECK_THROWS_WITH_AS(write_embeddings(set, tmp_dir() / "nan.embz"),
                       doctest::Contains("non-finite"), std::invalid_argument);
}

TEST_CASE("bad magic is rejected") {
  const fs::path p = tmp_dir() / "badmagic.embz";
  std::ofstream(p, std::ios::binary) << "XXXXXXXXXXXXXXXXXXXXXXXX";
  CHECK_THROWS_WITH_AS(read_embeddings(p), doctest::Contains("bad magic"), std::runtime_error);
}

TEST_CASE("truncated payload is rejected") {
  EmbeddingSet set;
  set.data = MatrixXfRM::Ones(2, 3);
  set.meta.push_back({"x", "ges", 0, 1, false, std::nullopt, std::nullopt});
  set.meta.push_back({"x", "ges", 0, 2, false, std::nullopt, std::nullopt});
  const fs::path full = tmp_dir() / "full.embz";
  write_embeddings(set, full);
  const auto bytes = fs::file_size(full);

  const fs::path cut = tmp_dir() / "cut.embz";
  {
    std::ifstream in(full, std::ios::binary);
    std::string buf(bytes - 1, '\0');
    in.read(buf.data(), static_cast<std::streamsize>(bytes - 1));
    std::ofstream out(cut, std::ios::binary);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
  CHECK_THROWS_WITH_AS(read_embeddings(cut), doctest::Contains("truncated payload"),
                       std::runtime_error);

  const fs::path padded = tmp_dir() / "padded.embz";
  fs::copy_file(full, padded, fs::copy_options::overwrite_existing);
  std::ofstream(padded, std::ios::binary | std::ios::app) << "zz";
  CHECK_THROWS_WITH_AS(read_embeddings(padded), doctest::Contains("size mismatch"),
                       std::runtime_error);
}

TEST_CASE("filter_non_cue drops exactly the cue patch") {
  EmbeddingSet set;
  const int grid = 16;
  set.data = MatrixXfRM::Ones(grid * grid, 3);
  for (int p = 0; p < grid * grid; ++p) {
    ItemMeta m;
    m.image_id = "img0";
    m.subset = "xplane";
    m.patch_row = p / grid;
    m.patch_col = p % grid;
    m.is_cue = (p == 0);
    set.meta.push_back(std::move(m));
  }
  const EmbeddingSet filtered = filter_non_cue(set);
  CHECK(filtered.n_items() == 255);
  CHECK(filtered.meta.front().patch_col == 1);  // order preserved

  // Idempotent.
  CHECK(sets_bit_equal(filter_non_cue(filtered), filtered));

  // No cue patches: identity.
  EmbeddingSet clean = filtered;
  CHECK(sets_bit_equal(filter_non_cue(clean), clean));

  // All cue patches: empty.
  EmbeddingSet all_cue;
  all_cue.data = MatrixXfRM::Zero(2, 3);
  all_cue.meta.push_back({"a", "s", 0, 0, true, std::nullopt, std::nullopt});
  all_cue.meta.push_back({"b", "s", 0, 0, true, std::nullopt, std::nullopt});
  CHECK(filter_non_cue(all_cue).n_items() == 0);
}

TEST_CASE("property: random sets round-trip bit-exactly") {
  Rng rng(2024);
  for (int trial = 0; trial < 40; ++trial) {
    const EmbeddingSet set = random_set(rng);
    const fs::path p = tmp_dir() / ("rt" + std::to_string(trial) + ".embz");
    write_embeddings(set, p);
    CHECK(sets_bit_equal(read_embeddings(p), set));
  }
}

TEST_CASE("dictionary containers round-trip and validate") {
  Dictionary d;
  d.atoms.resize(3, 3);
  d.atoms << 1, 0, 0, 0, 1, 0, 0, 0, 1;
  const fs::path p = tmp_dir() / "dict.embz";
  write_dictionary(d, p);
  const Dictionary back = read_dictionary(p);
  CHECK((back.atoms - d.atoms).cwiseAbs().maxCoeff() < 1e-7);

  CHECK_THROWS_AS(read_embeddings(p), std::runtime_error);  // kind mismatch
}

TEST_CASE("sparse codes JSONL round-trip") {
  SparseCodes codes;
  codes.n_nnz_budget = 3;
  codes.items.push_back({0, {2, 7}, {1.5, -0.25}});
  codes.items.push_back({1, {}, {}});
  codes.items.push_back({5, {0, 1, 9}, {0.125, 3.0, -2.0}});
  const fs::path p = tmp_dir() / "codes.jsonl";
  write_sparse_codes(codes, p);
  const SparseCodes back = read_sparse_codes(p);
  REQUIRE(back.items.size() == 3);
  CHECK(back.items[0].item == 0);
  CHECK(back.items[2].item == 5);
  CHECK(back.items[2].atoms == std::vector<int>{0, 1, 9});
  CHECK(back.items[2].coeffs[1] == 3.0);
  CHECK(back.n_nnz_budget == 3);
  back.validate(10);
  CHECK_THROWS_AS(back.validate(9), std::invalid_argument);
}

TEST_CASE("invariant validation catches malformed sets") {
  EmbeddingSet set;
  set.data = MatrixXfRM::Zero(1, 2);
  set.meta.push_back({"x", "s", 3, 3, true, std::nullopt, std::nullopt});  // cue off (0,0)
  CHECK_THROWS_AS(set.validate(), std::invalid_argument);

  set.meta.clear();
  CHECK_THROWS_AS(set.validate(), std::invalid_argument);  // row/meta mismatch
}
