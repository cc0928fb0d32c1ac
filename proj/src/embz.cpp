#include "atomlens/embz.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace atomlens {

static_assert(std::endian::native == std::endian::little,
              "EMBZ payload is little-endian; big-endian hosts are not supported");

namespace {

using nlohmann::json;

constexpr char kMagic[6] = {'E', 'M', 'B', 'Z', '1', '\n'};

json meta_to_json(const ItemMeta& m) {
  json j;
  j["image_id"] = m.image_id;
  j["subset"] = m.subset;
  j["patch_row"] = m.patch_row;
  j["patch_col"] = m.patch_col;
  j["is_cue"] = m.is_cue;
  if (m.sam_alpha) j["sam_alpha"] = *m.sam_alpha;
  if (m.label) j["label"] = *m.label;
  return j;
}

ItemMeta meta_from_json(const json& j) {
  ItemMeta m;
  m.image_id = j.at("image_id").get<std::string>();
  m.subset = j.at("subset").get<std::string>();
  m.patch_row = j.at("patch_row").get<int>();
  m.patch_col = j.at("patch_col").get<int>();
  m.is_cue = j.at("is_cue").get<bool>();
  if (j.contains("sam_alpha")) m.sam_alpha = j.at("sam_alpha").get<std::vector<double>>();
  if (j.contains("label")) m.label = j.at("label").get<std::string>();
  return m;
}

void write_container(const MatrixXfRM& data, const std::vector<ItemMeta>& meta,
                     const std::string& kind, const std::filesystem::path& path) {
  json header;
  header["n_items"] = data.rows();
  header["n_dims"] = data.cols();
  header["kind"] = kind;
  header["meta"] = json::array();
  for (const ItemMeta& m : meta) header["meta"].push_back(meta_to_json(m));
  const std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out.write(kMagic, sizeof(kMagic));
  const uint64_t hlen = hs.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(sizeof(float) * static_cast<size_t>(data.size())));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

struct Container {
  MatrixXfRM data;
  std::vector<ItemMeta> meta;
  std::string kind;
};

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path.string());

  char magic[6];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("bad magic in " + path.string());

  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in) throw std::runtime_error("truncated header length in " + path.string());

  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::runtime_error("truncated header in " + path.string());

  json header;
  try {
    header = json::parse(hs);
  } catch (const json::exception& e) {
    throw std::runtime_error("invalid header JSON in " + path.string() + ": " + e.what());
  }

  Container c;
  const auto n_items = header.at("n_items").get<int64_t>();
  const auto n_dims = header.at("n_dims").get<int64_t>();
  if (n_items < 0 || n_dims < 0)
    throw std::runtime_error("negative dimensions in header of " + path.string());
  c.kind = header.at("kind").get<std::string>();
  if (c.kind != "embeddings" && c.kind != "dictionary")
    throw std::runtime_error("unknown kind '" + c.kind + "' in " + path.string());
  for (const json& j : header.at("meta")) c.meta.push_back(meta_from_json(j));

  c.data.resize(n_items, n_dims);
  const size_t payload = sizeof(float) * static_cast<size_t>(n_items) * static_cast<size_t>(n_dims);
  in.read(reinterpret_cast<char*>(c.data.data()), static_cast<std::streamsize>(payload));
  if (static_cast<size_t>(in.gcount()) != payload)
    throw std::runtime_error("truncated payload in " + path.string());
  in.peek();
  if (!in.eof())
    throw std::runtime_error("header/payload size mismatch (trailing bytes) in " + path.string());
  return c;
}

}  // namespace

void write_embeddings(const EmbeddingSet& set, const std::filesystem::path& path) {
  set.validate();
  write_container(set.data, set.meta, "embeddings", path);
}

EmbeddingSet read_embeddings(const std::filesystem::path& path) {
  Container c = read_container(path);
  if (c.kind != "embeddings")
    throw std::runtime_error("expected kind=embeddings in " + path.string());
  if (c.meta.size() != static_cast<size_t>(c.data.rows()))
    throw std::runtime_error("meta length != n_items in " + path.string());
  EmbeddingSet set{std::move(c.data), std::move(c.meta)};
  set.validate();
  return set;
}

void write_dictionary(const Dictionary& dict, const std::filesystem::path& path) {
  write_container(dict.atoms.cast<float>(), {}, "dictionary", path);
}

Dictionary read_dictionary(const std::filesystem::path& path, bool allow_undercomplete) {
  Container c = read_container(path);
  if (c.kind != "dictionary")
    throw std::runtime_error("expected kind=dictionary in " + path.string());
  Dictionary d{c.data.cast<double>()};
  // float32 storage perturbs norms by ~1e-7; renormalize to restore the
  // 1e-6 unit-norm invariant exactly.
  for (Eigen::Index j = 0; j < d.atoms.rows(); ++j) {
    const double n = d.atoms.row(j).norm();
    if (n < 1e-4)
      throw std::runtime_error("dictionary atom " + std::to_string(j) + " has near-zero norm");
    d.atoms.row(j) /= n;
  }
  d.validate(allow_undercomplete);
  return d;
}

void write_raw_matrix(const Eigen::MatrixXd& rows, const std::filesystem::path& path) {
  if (!rows.allFinite()) throw std::invalid_argument("write_raw_matrix: non-finite data");
  write_container(rows.cast<float>(), {}, "dictionary", path);
}

Eigen::MatrixXd read_raw_matrix(const std::filesystem::path& path) {
  Container c = read_container(path);
  if (c.kind != "dictionary")
    throw std::runtime_error("expected kind=dictionary in " + path.string());
  return c.data.cast<double>();
}

void write_sparse_codes(const SparseCodes& codes, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  for (const SparseCodes::Item& it : codes.items) {
    json j;
    j["item"] = it.item;
    j["atoms"] = it.atoms;
    j["coeffs"] = it.coeffs;
    out << j.dump() << "\n";
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

SparseCodes read_sparse_codes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  SparseCodes codes;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw std::runtime_error("invalid JSON on line " + std::to_string(lineno) + " of " +
                               path.string() + ": " + e.what());
    }
    SparseCodes::Item it;
    it.item = j.at("item").get<int>();
    it.atoms = j.at("atoms").get<std::vector<int>>();
    it.coeffs = j.at("coeffs").get<std::vector<double>>();
    codes.items.push_back(std::move(it));
  }
  for (const SparseCodes::Item& it : codes.items)
    codes.n_nnz_budget = std::max(codes.n_nnz_budget, static_cast<int>(it.atoms.size()));
  return codes;
}

}  // namespace atomlens
