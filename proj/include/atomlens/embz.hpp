#pragma once

// EMBZ-v1 container: a JSON header followed by a raw float32 payload.
//
//   bytes 0..5    ASCII "EMBZ1\n"
//   bytes 6..13   u64 little-endian header length H
//   bytes 14..14+H  UTF-8 JSON {"n_items", "n_dims", "kind", "meta": [...]}
//   remainder     n_items * n_dims float32 little-endian, row-major
//
// Dictionaries reuse the layout with kind = "dictionary" and empty meta.
// Sparse codes are stored separately as JSON-lines.

#include <filesystem>
#include <string>

#include "atomlens/types.hpp"

namespace atomlens {

void write_embeddings(const EmbeddingSet& set, const std::filesystem::path& path);
EmbeddingSet read_embeddings(const std::filesystem::path& path);

void write_dictionary(const Dictionary& dict, const std::filesystem::path& path);
Dictionary read_dictionary(const std::filesystem::path& path, bool allow_undercomplete = false);

void write_sparse_codes(const SparseCodes& codes, const std::filesystem::path& path);
SparseCodes read_sparse_codes(const std::filesystem::path& path);

// Raw dictionary-kind container access for matrices whose rows are not
// unit-norm atoms (head weights). No normalization on either side.
void write_raw_matrix(const Eigen::MatrixXd& rows, const std::filesystem::path& path);
Eigen::MatrixXd read_raw_matrix(const std::filesystem::path& path);

}  // namespace atomlens
