// atomlens: sparse-atom analysis of exported patch embeddings.
//
// Subcommands cover the pipeline end to end: synthetic corpus generation,
// dictionary fitting, sparse coding, atom statistics, head reliance, the OOMS
// detector, and the visualization manifest. Every command writes a run-report
// JSON with input/output hashes so reruns can be compared byte for byte.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "atomlens/atom_analysis.hpp"
#include "atomlens/crop_sampler.hpp"
#include "atomlens/dictionary_learning.hpp"
#include "atomlens/embz.hpp"
#include "atomlens/ooms_detector.hpp"
#include "atomlens/parallel.hpp"
#include "atomlens/rng.hpp"
#include "atomlens/sam_head.hpp"
#include "atomlens/synthgen.hpp"
#include "atomlens/types.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace atomlens;

namespace {

std::string hash_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return "missing";
  uint64_t h = 0xcbf29ce484222325ull;
  char buf[65536];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ull;
    }
    if (!in) break;
  }
  char out[32];
  std::snprintf(out, sizeof(out), "fnv1a64:%016llx", static_cast<unsigned long long>(h));
  return out;
}

// One report per command invocation, written even when the command fails.
class RunReport {
 public:
  RunReport(std::string command, fs::path path) : path_(std::move(path)) {
    j_["command"] = std::move(command);
    j_["status"] = "running";
    start_ = std::chrono::steady_clock::now();
  }

  void set_config(json cfg) { j_["config"] = std::move(cfg); }
  void set_seed(uint64_t seed) { j_["seed"] = seed; }
  void add_input(const fs::path& p) { j_["inputs"][p.string()] = hash_file(p); }
  void add_output(const fs::path& p) { outputs_.push_back(p); }

  void finish_ok() {
    j_["status"] = "ok";
    write();
  }
  void finish_error(const std::string& msg) {
    j_["status"] = "error";
    j_["error"] = msg;
    write();
  }

 private:
  void write() {
    for (const fs::path& p : outputs_) j_["outputs"][p.string()] = hash_file(p);
    const auto dur = std::chrono::steady_clock::now() - start_;
    j_["duration_s"] = std::chrono::duration<double>(dur).count();
    if (path_.has_parent_path()) {
      std::error_code ec;
      fs::create_directories(path_.parent_path(), ec);
    }
    std::ofstream out(path_, std::ios::trunc);
    if (out) out << j_.dump(2) << "\n";
  }

  json j_;
  fs::path path_;
  std::vector<fs::path> outputs_;
  std::chrono::steady_clock::time_point start_;
};

// ---------------------------------------------------------------------------
// Shared assembly of per-image patch grids.
// ---------------------------------------------------------------------------

struct ImageGroup {
  std::string image_id;
  std::string subset;
  Eigen::MatrixXd Z;          // grid^2 x n_dims in row-major patch order
  std::vector<bool> include;  // false on the cue patch
  std::optional<std::string> label;
};

std::vector<ImageGroup> group_images(const EmbeddingSet& set, int grid) {
  const int n_patches = grid * grid;
  std::vector<std::string> order;
  std::map<std::string, std::vector<Eigen::Index>> by_image;
  for (Eigen::Index i = 0; i < set.n_items(); ++i) {
    const ItemMeta& m = set.meta[static_cast<size_t>(i)];
    if (m.patch_row < 0 || m.patch_col < 0)
      throw std::runtime_error("item " + std::to_string(i) + " has no grid position");
    if (m.patch_row >= grid || m.patch_col >= grid)
      throw std::runtime_error("image " + m.image_id + " patch (" + std::to_string(m.patch_row) +
                               "," + std::to_string(m.patch_col) + ") outside grid " +
                               std::to_string(grid));
    if (by_image.find(m.image_id) == by_image.end()) order.push_back(m.image_id);
    by_image[m.image_id].push_back(i);
  }

  std::vector<ImageGroup> out;
  for (const std::string& id : order) {
    const auto& items = by_image[id];
    if (static_cast<int>(items.size()) != n_patches)
      throw std::runtime_error("image " + id + " has " + std::to_string(items.size()) +
                               " patches, expected " + std::to_string(n_patches));
    ImageGroup g;
    g.image_id = id;
    g.Z.resize(n_patches, set.n_dims());
    g.include.assign(static_cast<size_t>(n_patches), true);
    std::vector<bool> seen(static_cast<size_t>(n_patches), false);
    for (Eigen::Index i : items) {
      const ItemMeta& m = set.meta[static_cast<size_t>(i)];
      const int p = m.patch_row * grid + m.patch_col;
      if (seen[static_cast<size_t>(p)])
        throw std::runtime_error("image " + id + " has duplicate patch (" +
                                 std::to_string(m.patch_row) + "," + std::to_string(m.patch_col) +
                                 ")");
      seen[static_cast<size_t>(p)] = true;
      g.Z.row(p) = set.data.row(i).cast<double>();
      if (m.is_cue) g.include[static_cast<size_t>(p)] = false;
      g.subset = m.subset;
      if (m.label) g.label = m.label;
    }
    out.push_back(std::move(g));
  }
  return out;
}

void check_dims_match(Eigen::Index a, const std::string& a_name, Eigen::Index b,
                      const std::string& b_name) {
  if (a != b)
    throw std::runtime_error("dimension mismatch: " + a_name + " n_dims=" + std::to_string(a) +
                             ", " + b_name + " n_dims=" + std::to_string(b));
}

struct OomsInputs {
  OomsDataset data;
  std::vector<ImageGroup> groups;
};

OomsInputs build_ooms_dataset(const EmbeddingSet& set, const HeadWeights& head,
                              const Dictionary& dict, int n_nnz, uint64_t split_seed,
                              int threads) {
  check_dims_match(set.n_dims(), "embeddings", head.W.cols(), "head");
  check_dims_match(set.n_dims(), "embeddings", dict.n_dims(), "dictionary");
  OomsInputs out;
  out.groups = group_images(set, head.grid);

  out.data.features.resize(static_cast<Eigen::Index>(out.groups.size()), dict.n_dicts());
  out.data.labels_ims.resize(out.groups.size());
  parallel_for(static_cast<std::ptrdiff_t>(out.groups.size()), threads,
               [&](std::ptrdiff_t lo, std::ptrdiff_t hi) {
                 for (std::ptrdiff_t i = lo; i < hi; ++i) {
                   const ImageGroup& g = out.groups[static_cast<size_t>(i)];
                   out.data.features.row(static_cast<Eigen::Index>(i)) =
                       summary_features(g.Z, g.include, head, dict, n_nnz).transpose();
                 }
               });
  for (size_t i = 0; i < out.groups.size(); ++i) {
    const ImageGroup& g = out.groups[i];
    if (!g.label || (*g.label != "ims" && *g.label != "ooms"))
      throw std::runtime_error("image " + g.image_id + " is missing an ims/ooms label");
    out.data.labels_ims[i] = (*g.label == "ims");
  }
  out.data.split = make_split(out.data.labels_ims, 0.7, split_seed);
  out.data.validate(n_nnz);
  return out;
}

std::vector<AtomLabel> labels_from_profiles(const fs::path& path, Eigen::Index n_dicts) {
  const auto profiles = read_profiles_json(path);
  if (static_cast<Eigen::Index>(profiles.size()) != n_dicts)
    throw std::runtime_error("profiles cover " + std::to_string(profiles.size()) +
                             " atoms, dictionary has " + std::to_string(n_dicts));
  std::vector<AtomLabel> labels;
  for (const AtomProfile& p : profiles) labels.push_back(p.label);
  return labels;
}

// ---------------------------------------------------------------------------
// Subcommands.
// ---------------------------------------------------------------------------

struct CommonOpts {
  uint64_t seed = 0;
  int threads = 1;
  std::string run_report;
};

fs::path report_path(const CommonOpts& c, const fs::path& fallback) {
  return c.run_report.empty() ? fallback : fs::path(c.run_report);
}

int run_synth(const CommonOpts& common, const SynthConfig& cfg_in, const std::string& out_dir,
              int crop_samples) {
  SynthConfig cfg = cfg_in;
  cfg.seed = common.seed;
  cfg.task_atom_ids.clear();
  for (int k = 0; k < cfg.n_kp; ++k) cfg.task_atom_ids.push_back(k);

  const fs::path dir(out_dir);
  RunReport report("synth", report_path(common, dir / "synth.run.json"));
  report.set_seed(common.seed);
  json cfgj;
  cfgj["n_images"] = cfg.n_images;
  cfgj["n_dims"] = cfg.n_dims;
  cfgj["n_dicts_true"] = cfg.n_dicts_true;
  cfgj["n_subsets"] = cfg.n_subsets;
  cfgj["grid"] = cfg.grid;
  cfgj["n_nnz_true"] = cfg.n_nnz_true;
  cfgj["noise_sigma"] = cfg.noise_sigma;
  cfgj["head_gain"] = cfg.head_gain;
  report.set_config(cfgj);

  try {
    fs::create_directories(dir);
    const SynthCorpus corpus = generate_corpus(cfg);
    write_embeddings(corpus.set, dir / "embeddings.embz");
    write_dictionary(corpus.truth.dict_true, dir / "dict_true.embz");
    save_head_weights(corpus.truth.head_true, dir / "head_true.embz");
    save_ground_truth(corpus.truth, dir / "truth.json");
    report.add_output(dir / "embeddings.embz");
    report.add_output(dir / "dict_true.embz");
    report.add_output(dir / "head_true.embz");
    report.add_output(dir / "truth.json");

    if (crop_samples > 0) {
      // Seeded demonstration draws of the crop samplers on synthetic frame
      // geometries; each record carries the full geometry so the containment
      // and exclusion predicates can be re-checked downstream.
      std::ofstream crops(dir / "crops.jsonl", std::ios::trunc);
      if (!crops) throw std::runtime_error("cannot write crops.jsonl");
      int emitted = 0;
      for (uint64_t i = 0; emitted < crop_samples; ++i) {
        Rng g(derive_seed(cfg.seed, "crop", i));
        const int img_w = 448 + static_cast<int>(g.below(1600));
        const int img_h = 448 + static_cast<int>(g.below(1600));
        const double bw = g.uniform(32.0, img_w * 0.8);
        const double bh = g.uniform(32.0, img_h * 0.8);
        const double x0 = g.uniform(0.0, img_w - bw);
        const double y0 = g.uniform(0.0, img_h - bh);
        const BBox b{x0, y0, x0 + bw, y0 + bh};
        const std::array<std::array<double, 2>, 4> corners{
            {{b.x_min, b.y_min}, {b.x_max, b.y_min}, {b.x_min, b.y_max}, {b.x_max, b.y_max}}};
        try {
          const CropWindow wb = bogo_crop(img_w, img_h, b, 8.0, 224, g.next_u64(), 10000);
          const CropWindow wi = inverse_bogo_crop(img_w, img_h, corners, 224, g.next_u64(), 10000);
          json jb{{"kind", "bogo"},    {"img_w", img_w}, {"img_h", img_h},
                  {"bbox", {b.x_min, b.y_min, b.x_max, b.y_max}},
                  {"margin", 8.0},     {"size", wb.size}, {"x", wb.x},
                  {"y", wb.y},         {"scale", wb.scale}};
          json ji{{"kind", "inverse"}, {"img_w", img_w}, {"img_h", img_h},
                  {"bbox", {b.x_min, b.y_min, b.x_max, b.y_max}},
                  {"size", wi.size},   {"x", wi.x},      {"y", wi.y},
                  {"scale", wi.scale}};
          crops << jb.dump() << "\n" << ji.dump() << "\n";
          ++emitted;
        } catch (const std::runtime_error&) {
          // Frame/bbox combinations without a valid window are skipped.
        }
      }
      report.add_output(dir / "crops.jsonl");
    }

    report.finish_ok();
    std::cout << "synth: " << corpus.set.n_items() << " items (" << cfg.n_images << " images) -> "
              << dir.string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    report.finish_error(e.what());
    std::cerr << "atomlens synth: " << e.what() << "\n";
    return 1;
  }
}

struct KsvdOpts {
  std::string input, output, report_json, head;
  KsvdConfig cfg;
  int pool_top_k = 0;
};

int run_ksvd_fit(const CommonOpts& common, const KsvdOpts& o) {
  RunReport report("ksvd-fit", report_path(common, fs::path(o.output + ".run.json")));
  report.set_seed(common.seed);
  json cfgj;
  cfgj["n_dicts"] = o.cfg.n_dicts;
  cfgj["n_nnz"] = o.cfg.n_nnz;
  cfgj["epochs"] = o.cfg.epochs;
  cfgj["batch_size"] = o.cfg.batch_size;
  cfgj["dead_atom_threshold"] = o.cfg.dead_atom_threshold;
  cfgj["pool_top_k"] = o.pool_top_k;
  report.set_config(cfgj);

  try {
    report.add_input(o.input);
    EmbeddingSet pool = filter_non_cue(read_embeddings(o.input));
    if (o.pool_top_k > 0) {
      if (o.head.empty())
        throw std::runtime_error("--pool-top-k requires --head for attention ranking");
      report.add_input(o.head);
      const HeadWeights head = load_head_weights(o.head);
      check_dims_match(pool.n_dims(), "embeddings", head.W.cols(), "head");
      const ImportancePool ip = importance_sample_pool(pool, head, o.pool_top_k);
      for (const std::string& img : ip.short_images)
        std::cerr << "note: image " << img << " has fewer than " << o.pool_top_k
                  << " non-cue patches; kept all\n";
      pool = std::move(ip.set);
    }

    KsvdConfig cfg = o.cfg;
    cfg.seed = common.seed;
    const KsvdResult res = ksvd_fit(pool, cfg, common.threads);
    write_dictionary(res.dictionary, o.output);
    report.add_output(o.output);

    if (!o.report_json.empty()) {
      json rep;
      rep["variance_explained_heldout"] = res.report.variance_explained_heldout;
      rep["epoch_recon_error"] = res.report.epoch_recon_error;
      rep["epoch_variance_heldout"] = res.report.epoch_variance_heldout;
      rep["dead_atoms_replaced"] = res.report.dead_atoms_replaced;
      rep["pool_items"] = pool.n_items();
      std::ofstream out(o.report_json, std::ios::trunc);
      if (!out) throw std::runtime_error("cannot write " + o.report_json);
      out << rep.dump(2) << "\n";
      report.add_output(o.report_json);
    }
    report.finish_ok();
    std::cout << "ksvd-fit: " << res.dictionary.n_dicts() << " atoms, held-out variance explained "
              << res.report.variance_explained_heldout << "\n";
    return 0;
  } catch (const std::exception& e) {
    report.finish_error(e.what());
    std::cerr << "atomlens ksvd-fit: " << e.what() << "\n";
    return 1;
  }
}

struct EncodeOpts {
  std::string input, dict, codes;
  int n_nnz = 8;
  bool keep_cue = false;
};

int run_encode(const CommonOpts& common, const EncodeOpts& o) {
  RunReport report("encode", report_path(common, fs::path(o.codes + ".run.json")));
  report.set_seed(common.seed);
  json cfgj;
  cfgj["n_nnz"] = o.n_nnz;
  cfgj["keep_cue"] = o.keep_cue;
  report.set_config(cfgj);

  try {
    report.add_input(o.input);
    report.add_input(o.dict);
    const EmbeddingSet full = read_embeddings(o.input);
    const Dictionary dict = read_dictionary(o.dict);
    check_dims_match(full.n_dims(), "embeddings", dict.n_dims(), "dictionary");

    // Keep original item indices through the cue filter.
    std::vector<int> original;
    EmbeddingSet set;
    if (o.keep_cue) {
      set = full;
      for (Eigen::Index i = 0; i < full.n_items(); ++i) original.push_back(static_cast<int>(i));
    } else {
      for (Eigen::Index i = 0; i < full.n_items(); ++i)
        if (!full.meta[static_cast<size_t>(i)].is_cue) original.push_back(static_cast<int>(i));
      set = filter_non_cue(full);
    }

    SparseCodes codes = encode_all(set, dict, o.n_nnz, common.threads);
    for (size_t i = 0; i < codes.items.size(); ++i) codes.items[i].item = original[i];
    write_sparse_codes(codes, o.codes);
    report.add_output(o.codes);
    report.finish_ok();
    std::cout << "encode: " << codes.items.size() << " items at n_nnz " << o.n_nnz << "\n";
    return 0;
  } catch (const std::exception& e) {
    report.finish_error(e.what());
    std::cerr << "atomlens encode: " << e.what() << "\n";
    return 1;
  }
}

struct AnalyzeOpts {
  std::string codes, input, output, csv, dict;
  int n_dicts = 0;
};

int run_analyze(const CommonOpts& common, const AnalyzeOpts& o) {
  RunReport report("analyze", report_path(common, fs::path(o.output + ".run.json")));
  report.set_seed(common.seed);
  report.set_config({{"n_dicts", o.n_dicts}});

  try {
    report.add_input(o.codes);
    report.add_input(o.input);
    Eigen::Index n_dicts = o.n_dicts;
    if (!o.dict.empty()) {
      report.add_input(o.dict);
      n_dicts = read_dictionary(o.dict).n_dicts();
    }
    if (n_dicts <= 0) throw std::runtime_error("pass --dict or a positive --n-dicts");

    const EmbeddingSet set = read_embeddings(o.input);
    const SparseCodes codes = read_sparse_codes(o.codes);
    std::vector<std::string> tags;
    for (const auto& it : codes.items) {
      if (it.item < 0 || it.item >= set.n_items())
        throw std::runtime_error("codes reference item " + std::to_string(it.item) +
                                 " outside the embedding set");
      const ItemMeta& m = set.meta[static_cast<size_t>(it.item)];
      if (m.is_cue)
        throw std::runtime_error("codes contain cue items; re-encode without --keep-cue");
      tags.push_back(m.subset);
    }

    const ActivationRates rates = activation_rates(codes, tags, n_dicts);
    const auto cvs = coefficient_of_variation(rates);
    const SplitResult split = split_content_style(cvs);
    if (split.n_at_median > 0)
      std::cerr << "note: " << split.n_at_median
                << " atom(s) tie the median CV and were labeled stylistic\n";
    const auto profiles = build_profiles(rates, cvs, split);
    write_profiles_json(profiles, rates.subsets, split.median_cv, std::nullopt, o.output);
    report.add_output(o.output);
    if (!o.csv.empty()) {
      write_profiles_csv(profiles, rates.subsets, o.csv);
      report.add_output(o.csv);
    }
    report.finish_ok();
    int n_content = 0, n_style = 0, n_inactive = 0;
    for (const auto& p : profiles) {
      n_content += p.label == AtomLabel::Contentful;
      n_style += p.label == AtomLabel::Stylistic;
      n_inactive += p.label == AtomLabel::Inactive;
    }
    std::cout << "analyze: median CV " << split.median_cv << "; " << n_content << " contentful, "
              << n_style << " stylistic, " << n_inactive << " inactive\n";
    return 0;
  } catch (const std::exception& e) {
    report.finish_error(e.what());
    std::cerr << "atomlens analyze: " << e.what() << "\n";
    return 1;
  }
}

struct RelianceOpts {
  std::string profiles, dict, head, codes, output, csv;
};

int run_reliance(const CommonOpts& common, const RelianceOpts& o) {
  RunReport report("reliance", report_path(common, fs::path(o.output + ".run.json")));
  report.set_seed(common.seed);
  report.set_config(json::object());

  try {
    for (const std::string& p : {o.profiles, o.dict, o.head, o.codes}) report.add_input(p);
    std::vector<std::string> subsets;
    auto profiles = read_profiles_json(o.profiles, &subsets);
    const Dictionary dict = read_dictionary(o.dict);
    const HeadWeights head = load_head_weights(o.head);
    check_dims_match(dict.n_dims(), "dictionary", head.W.cols(), "head");
    const SparseCodes codes = read_sparse_codes(o.codes);
    if (static_cast<Eigen::Index>(profiles.size()) != dict.n_dicts())
      throw std::runtime_error("profiles cover " + std::to_string(profiles.size()) +
                               " atoms, dictionary has " + std::to_string(dict.n_dicts()));

    const RelianceScores scores = reliance_scores(dict, head, codes);
    std::vector<AtomLabel> labels;
    for (size_t j = 0; j < profiles.size(); ++j) {
      profiles[j].head_alignment = scores.head_alignment(static_cast<Eigen::Index>(j));
      profiles[j].mean_abs_coeff = scores.mean_abs_coeff(static_cast<Eigen::Index>(j));
      profiles[j].reliance_score = scores.score(static_cast<Eigen::Index>(j));
      labels.push_back(profiles[j].label);
    }
    const double frac = content_fraction(scores.score, labels);

    double median_cv = 0.0;
    {
      std::ifstream in(o.profiles);
      median_cv = json::parse(in).value("median_cv", 0.0);
    }
    write_profiles_json(profiles, subsets, median_cv, frac, o.output);
    report.add_output(o.output);
    if (!o.csv.empty()) {
      write_profiles_csv(profiles, subsets, o.csv);
      report.add_output(o.csv);
    }
    report.finish_ok();
    std::cout << "reliance: content fraction " << frac << "\n";
    return 0;
  } catch (const std::exception& e) {
    report.finish_error(e.what());
    std::cerr << "atomlens reliance: " << e.what() << "\n";
    return 1;
  }
}

struct OomsFitOpts {
  std::string input, head, dict, output, sweep_csv, profiles, save_summaries;
  int n_nnz = 8;
  std::vector<double> lambdas;
  double lambda = -1.0;
  uint64_t split_seed = 0;
  bool split_seed_set = false;
  FitOomsConfig fit;
};

int run_ooms_fit(const CommonOpts& common, const OomsFitOpts& o) {
  RunReport report("ooms-fit", report_path(common, fs::path(o.output + ".run.json")));
  report.set_seed(common.seed);
  json cfgj;
  cfgj["n_nnz"] = o.n_nnz;
  cfgj["lambda"] = o.lambda;
  cfgj["lambdas"] = o.lambdas;
  report.set_config(cfgj);

  try {
    if ((o.lambda >= 0) == !o.lambdas.empty())
      throw std::runtime_error("pass exactly one of --lambda or --lambdas");
    for (const std::string& p : {o.input, o.head, o.dict}) report.add_input(p);
    const EmbeddingSet set = read_embeddings(o.input);
    const HeadWeights head = load_head_weights(o.head);
    const Dictionary dict = read_dictionary(o.dict);
    const uint64_t split_seed = o.split_seed_set ? o.split_seed : common.seed;
    OomsInputs in = build_ooms_dataset(set, head, dict, o.n_nnz, split_seed, common.threads);

    if (!o.save_summaries.empty()) {
      EmbeddingSet summaries;
      summaries.data.resize(static_cast<Eigen::Index>(in.groups.size()), set.n_dims());
      for (size_t i = 0; i < in.groups.size(); ++i) {
        const ImageGroup& g = in.groups[i];
        const PooledSummaries s = pooled_summaries(g.Z, head, g.include);
        summaries.data.row(static_cast<Eigen::Index>(i)) = s.mean.cast<float>().transpose();
        ItemMeta m;
        m.image_id = g.image_id;
        m.subset = g.subset;
        m.patch_row = -1;
        m.patch_col = -1;
        m.label = g.label;
        summaries.meta.push_back(std::move(m));
      }
      write_embeddings(summaries, o.save_summaries);
      report.add_output(o.save_summaries);
    }

    FitOomsConfig fit = o.fit;
    fit.seed = common.seed;

    OomsModel best;
    if (o.lambda >= 0) {
      best = fit_ooms(in.data, o.lambda, fit);
    } else {
      std::vector<AtomLabel> labels;
      if (!o.profiles.empty()) {
        report.add_input(o.profiles);
        labels = labels_from_profiles(o.profiles, dict.n_dicts());
      }
      if (o.sweep_csv.empty()) throw std::runtime_error("--lambdas requires --sweep-csv");
      const auto points = lambda_sweep(in.data, o.lambdas, labels, fit);
      write_sweep_csv(points, o.sweep_csv);
      report.add_output(o.sweep_csv);

      // Keep the model with the best eval AUROC; ties prefer fewer atoms,
      // then the larger penalty.
      size_t best_i = 0;
      for (size_t i = 1; i < points.size(); ++i) {
        const auto& a = points[i];
        const auto& b = points[best_i];
        if (a.auroc > b.auroc ||
            (a.auroc == b.auroc &&
             (a.n_selected < b.n_selected ||
              (a.n_selected == b.n_selected && a.lambda > b.lambda))))
          best_i = i;
      }
      best = fit_ooms(in.data, points[best_i].lambda, fit);
      std::cout << "ooms-fit: best lambda " << points[best_i].lambda << " (eval AUROC "
                << points[best_i].auroc << ", " << points[best_i].n_selected << " atoms)\n";
    }
    best.n_nnz = o.n_nnz;
    save_ooms_model(best, o.output);
    report.add_output(o.output);
    report.finish_ok();
    std::cout << "ooms-fit: " << best.selected().size() << " selected atoms, bias " << best.bias
              << "\n";
    return 0;
  } catch (const std::exception& e) {
    report.finish_error(e.what());
    std::cerr << "atomlens ooms-fit: " << e.what() << "\n";
    return 1;
  }
}

struct OomsEvalOpts {
  std::string model, input, head, dict, output, profiles;
  uint64_t split_seed = 0;
  bool split_seed_set = false;
};

int run_ooms_eval(const CommonOpts& common, const OomsEvalOpts& o) {
  RunReport report("ooms-eval", report_path(common, fs::path(o.output + ".run.json")));
  report.set_seed(common.seed);
  report.set_config(json::object());

  try {
    for (const std::string& p : {o.model, o.input, o.head, o.dict}) report.add_input(p);
    const EmbeddingSet set = read_embeddings(o.input);
    const HeadWeights head = load_head_weights(o.head);
    const Dictionary dict = read_dictionary(o.dict);
    const OomsModel model = load_ooms_model(o.model, dict.n_dicts());
    if (model.n_nnz <= 0) throw std::runtime_error("model file lacks the n_nnz field");
    const uint64_t split_seed = o.split_seed_set ? o.split_seed : common.seed;
    const OomsInputs in =
        build_ooms_dataset(set, head, dict, model.n_nnz, split_seed, common.threads);

    std::vector<double> eval_scores, all_scores;
    std::vector<bool> eval_labels;
    for (Eigen::Index i = 0; i < in.data.n_images(); ++i) {
      const double p = predict_ims(model, in.data.features.row(i).transpose());
      all_scores.push_back(p);
      if (in.data.split[static_cast<size_t>(i)] == Split::Eval) {
        eval_scores.push_back(p);
        eval_labels.push_back(in.data.labels_ims[static_cast<size_t>(i)]);
      }
    }

    json out;
    out["auroc_eval"] = auroc(eval_scores, eval_labels);
    out["auroc_all"] = auroc(all_scores, in.data.labels_ims);
    out["n_eval"] = eval_scores.size();
    out["n_images"] = in.data.n_images();
    out["n_selected"] = model.selected().size();
    out["lambda"] = model.lambda;
    if (!o.profiles.empty()) {
      report.add_input(o.profiles);
      const auto labels = labels_from_profiles(o.profiles, dict.n_dicts());
      const std::vector<int> sel = model.selected();
      if (sel.empty()) {
        out["content_fraction_selected"] = nullptr;
      } else {
        int n_content = 0;
        for (int j : sel)
          if (labels[static_cast<size_t>(j)] == AtomLabel::Contentful) ++n_content;
        out["content_fraction_selected"] =
            static_cast<double>(n_content) / static_cast<double>(sel.size());
      }
    }
    std::ofstream f(o.output, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + o.output);
    f << out.dump(2) << "\n";
    report.add_output(o.output);
    report.finish_ok();
    std::cout << "ooms-eval: eval AUROC " << out["auroc_eval"].get<double>() << " over "
              << eval_scores.size() << " images\n";
    return 0;
  } catch (const std::exception& e) {
    report.finish_error(e.what());
    std::cerr << "atomlens ooms-eval: " << e.what() << "\n";
    return 1;
  }
}

struct VizOpts {
  std::string codes, input, output, dict;
  std::vector<int> atoms;
  int n_viz = 4;
  int n_dicts = 0;
};

int run_viz_manifest(const CommonOpts& common, const VizOpts& o) {
  RunReport report("viz-manifest", report_path(common, fs::path(o.output + ".run.json")));
  report.set_seed(common.seed);
  json cfgj;
  cfgj["atoms"] = o.atoms;
  cfgj["n_viz"] = o.n_viz;
  report.set_config(cfgj);

  try {
    report.add_input(o.codes);
    report.add_input(o.input);
    Eigen::Index n_dicts = o.n_dicts;
    if (!o.dict.empty()) {
      report.add_input(o.dict);
      n_dicts = read_dictionary(o.dict).n_dicts();
    }
    if (n_dicts <= 0) throw std::runtime_error("pass --dict or a positive --n-dicts");

    const EmbeddingSet set = read_embeddings(o.input);
    const SparseCodes codes = read_sparse_codes(o.codes);
    const auto manifests = top_activating_manifest(codes, set.meta, o.atoms, o.n_viz, n_dicts);
    for (const AtomManifest& m : manifests)
      if (m.short_flag)
        std::cerr << "note: atom " << m.atom_id << " has only " << m.records.size()
                  << " activation(s)\n";
    write_manifest_jsonl(manifests, o.output);
    report.add_output(o.output);
    report.finish_ok();
    std::cout << "viz-manifest: " << manifests.size() << " atoms -> " << o.output << "\n";
    return 0;
  } catch (const std::exception& e) {
    report.finish_error(e.what());
    std::cerr << "atomlens viz-manifest: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sparse-atom analysis of vision-transformer patch embeddings"};
  app.require_subcommand(1);
  app.fallthrough();

  CommonOpts common;
  app.add_option("--seed", common.seed, "global seed; stages derive their own streams from it");
  app.add_option("--threads", common.threads, "worker cap for item-parallel stages")
      ->check(CLI::PositiveNumber);
  app.add_option("--run-report", common.run_report, "run-report JSON path override");

  SynthConfig scfg;
  std::string synth_out;
  bool no_cue = false;
  auto* synth = app.add_subcommand("synth", "generate a synthetic corpus with known structure")->fallthrough();
  synth->add_option("--output", synth_out, "output directory")->required();
  synth->add_option("--n-images", scfg.n_images, "number of images");
  synth->add_option("--n-dims", scfg.n_dims, "embedding dimension");
  synth->add_option("--n-dicts-true", scfg.n_dicts_true, "planted dictionary size");
  synth->add_option("--n-subsets", scfg.n_subsets, "visual subsets");
  synth->add_option("--content-atoms", scfg.content_atom_count, "planted content atoms");
  synth->add_option("--style-per-subset", scfg.style_atoms_per_subset, "style atoms per subset");
  synth->add_option("--grid", scfg.grid, "patch grid side length");
  synth->add_option("--n-nnz-true", scfg.n_nnz_true, "planted per-patch sparsity");
  synth->add_option("--noise-sigma", scfg.noise_sigma, "additive Gaussian noise");
  synth->add_option("--n-kp", scfg.n_kp, "keypoints (and task atoms)");
  synth->add_option("--head-gain", scfg.head_gain, "planted head logit scale");
  synth->add_option("--coeff-min", scfg.coeff_min, "coefficient magnitude lower bound");
  synth->add_option("--coeff-max", scfg.coeff_max, "coefficient magnitude upper bound");
  synth->add_option("--style-slot-prob", scfg.style_slot_prob, "style share per support slot");
  synth->add_flag("--no-cue", no_cue, "do not mark a cue patch");
  int crop_samples = 0;
  synth->add_option("--crop-samples", crop_samples,
                    "also draw N seeded bogo/inverse crop windows into crops.jsonl");

  KsvdOpts ko;
  auto* ksvd = app.add_subcommand("ksvd-fit", "fit a dictionary with batched K-SVD")->fallthrough();
  ksvd->add_option("--input", ko.input, "embeddings (EMBZ)")->required();
  ksvd->add_option("--output", ko.output, "fitted dictionary (EMBZ)")->required();
  ksvd->add_option("--report", ko.report_json, "fit report JSON");
  ksvd->add_option("--n-dicts", ko.cfg.n_dicts, "dictionary size");
  ksvd->add_option("--n-nnz", ko.cfg.n_nnz, "per-sample sparsity");
  ksvd->add_option("--epochs", ko.cfg.epochs, "epochs over the pool");
  ksvd->add_option("--batch-size", ko.cfg.batch_size, "batch size");
  ksvd->add_option("--dead-atom-threshold", ko.cfg.dead_atom_threshold,
                   "replace atoms used fewer times per epoch");
  ksvd->add_option("--head", ko.head, "head weights (for --pool-top-k)");
  ksvd->add_option("--pool-top-k", ko.pool_top_k,
                   "keep only the top-k attention patches per image (0 = all non-cue)");

  EncodeOpts eo;
  auto* enc = app.add_subcommand("encode", "sparse-code embeddings against a dictionary")->fallthrough();
  enc->add_option("--input", eo.input, "embeddings (EMBZ)")->required();
  enc->add_option("--dict", eo.dict, "dictionary (EMBZ)")->required();
  enc->add_option("--codes", eo.codes, "output codes (JSONL)")->required();
  enc->add_option("--n-nnz", eo.n_nnz, "per-sample sparsity");
  enc->add_flag("--keep-cue", eo.keep_cue, "also encode cue patches");

  AnalyzeOpts ao;
  auto* ana = app.add_subcommand("analyze", "activation rates, CV, content/style split")->fallthrough();
  ana->add_option("--codes", ao.codes, "sparse codes (JSONL)")->required();
  ana->add_option("--input", ao.input, "embeddings with metadata (EMBZ)")->required();
  ana->add_option("--output", ao.output, "profiles JSON")->required();
  ana->add_option("--csv", ao.csv, "profiles CSV");
  ana->add_option("--dict", ao.dict, "dictionary (for n_dicts)");
  ana->add_option("--n-dicts", ao.n_dicts, "dictionary size when --dict is not given");

  RelianceOpts ro;
  auto* rel = app.add_subcommand("reliance", "head reliance scores and content fraction")->fallthrough();
  rel->add_option("--profiles", ro.profiles, "profiles JSON from analyze")->required();
  rel->add_option("--dict", ro.dict, "dictionary (EMBZ)")->required();
  rel->add_option("--head", ro.head, "head weights (EMBZ + sidecar)")->required();
  rel->add_option("--codes", ro.codes, "sparse codes (JSONL)")->required();
  rel->add_option("--output", ro.output, "augmented profiles JSON")->required();
  rel->add_option("--csv", ro.csv, "full profiles CSV");

  OomsFitOpts oo;
  auto* ofit = app.add_subcommand("ooms-fit", "fit the OOMS detector over summary supports")->fallthrough();
  ofit->add_option("--input", oo.input, "patch embeddings with ims/ooms labels (EMBZ)")->required();
  ofit->add_option("--head", oo.head, "head weights")->required();
  ofit->add_option("--dict", oo.dict, "dictionary")->required();
  ofit->add_option("--output", oo.output, "model JSON")->required();
  ofit->add_option("--n-nnz", oo.n_nnz, "summary coding sparsity");
  ofit->add_option("--lambda", oo.lambda, "single L1 strength");
  ofit->add_option("--lambdas", oo.lambdas, "comma-separated L1 sweep")->delimiter(',');
  ofit->add_option("--sweep-csv", oo.sweep_csv, "sweep output CSV (with --lambdas)");
  ofit->add_option("--profiles", oo.profiles, "profiles JSON for content labels");
  ofit->add_option("--save-summaries", oo.save_summaries, "write pooled summaries (EMBZ)");
  ofit->add_option("--max-iter", oo.fit.max_iter, "optimizer iteration cap");
  ofit->add_option("--tol", oo.fit.tol, "projected-gradient tolerance");
  auto* ofit_ss = ofit->add_option("--split-seed", oo.split_seed, "70/30 split seed");

  OomsEvalOpts oe;
  auto* oeval = app.add_subcommand("ooms-eval", "evaluate a fitted OOMS model")->fallthrough();
  oeval->add_option("--model", oe.model, "model JSON")->required();
  oeval->add_option("--input", oe.input, "patch embeddings with labels (EMBZ)")->required();
  oeval->add_option("--head", oe.head, "head weights")->required();
  oeval->add_option("--dict", oe.dict, "dictionary")->required();
  oeval->add_option("--output", oe.output, "evaluation JSON")->required();
  oeval->add_option("--profiles", oe.profiles, "profiles JSON for selected-atom content fraction");
  auto* oeval_ss = oeval->add_option("--split-seed", oe.split_seed, "70/30 split seed");

  VizOpts vo;
  auto* viz = app.add_subcommand("viz-manifest", "top-activating patches per atom")->fallthrough();
  viz->add_option("--codes", vo.codes, "sparse codes (JSONL)")->required();
  viz->add_option("--input", vo.input, "embeddings with metadata (EMBZ)")->required();
  viz->add_option("--atoms", vo.atoms, "comma-separated atom ids")->required()->delimiter(',');
  viz->add_option("--output", vo.output, "manifest JSONL")->required();
  viz->add_option("--n-viz", vo.n_viz, "activations per atom");
  viz->add_option("--dict", vo.dict, "dictionary (for n_dicts)");
  viz->add_option("--n-dicts", vo.n_dicts, "dictionary size when --dict is not given");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    // Usage errors still leave a report when a path was given.
    for (int i = 1; i + 1 < argc; ++i) {
      if (std::string(argv[i]) == "--run-report") {
        RunReport r("usage-error", argv[i + 1]);
        r.finish_error(e.what());
        break;
      }
    }
    return 2;
  }

  scfg.cue_patch = !no_cue;
  oo.split_seed_set = ofit_ss->count() > 0;
  oe.split_seed_set = oeval_ss->count() > 0;

  if (app.got_subcommand(synth)) return run_synth(common, scfg, synth_out, crop_samples);
  if (app.got_subcommand(ksvd)) return run_ksvd_fit(common, ko);
  if (app.got_subcommand(enc)) return run_encode(common, eo);
  if (app.got_subcommand(ana)) return run_analyze(common, ao);
  if (app.got_subcommand(rel)) return run_reliance(common, ro);
  if (app.got_subcommand(ofit)) return run_ooms_fit(common, oo);
  if (app.got_subcommand(oeval)) return run_ooms_eval(common, oe);
  if (app.got_subcommand(viz)) return run_viz_manifest(common, vo);
  return 2;
}
