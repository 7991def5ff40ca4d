// SPDX-License-Identifier: Apache-2.0
#pragma once

// The command implementations behind the `layerfuse` executable. Kept in the
// library so tests can drive them without spawning processes.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "layerfuse/analysis.hpp"
#include "layerfuse/embedding_io.hpp"
#include "layerfuse/error.hpp"
#include "layerfuse/eval.hpp"
#include "layerfuse/fusion.hpp"
#include "layerfuse/ingest.hpp"
#include "layerfuse/parallel.hpp"

#ifndef LAYERFUSE_VERSION
#define LAYERFUSE_VERSION "0.0.0"
#endif

namespace layerfuse::commands {

namespace fs = std::filesystem;
using nlohmann::json;

/// Provenance written next to every output. Only `timings_ms` varies
/// between identical runs.
class RunManifest {
 public:
  RunManifest(std::string command, const FusionConfig& cfg) {
    doc_ = {{"tool", "layerfuse"},
            {"version", LAYERFUSE_VERSION},
            {"command", std::move(command)},
            {"config", to_json(cfg)},
            {"inputs", json::array()},
            {"outputs", json::array()},
            {"timings_ms", json::object()}};
  }

  void add_input(const fs::path& p) { doc_["inputs"].push_back(p.string()); }
  void add_output(const fs::path& p) { doc_["outputs"].push_back(p.string()); }
  void set(const std::string& key, json value) { doc_[key] = std::move(value); }

  template <typename Fn>
  auto timed(const std::string& phase, Fn&& fn) {
    const auto start = std::chrono::steady_clock::now();
    struct Record {
      json& doc;
      std::string phase;
      std::chrono::steady_clock::time_point start;
      ~Record() {
        doc["timings_ms"][phase] =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
                .count();
      }
    } record{doc_, phase, start};
    return fn();
  }

  const json& doc() const noexcept { return doc_; }

  void write(const fs::path& path) const {
    std::ofstream out(path);
    out << doc_.dump(2) << '\n';
    if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
  }

 private:
  json doc_;
};

inline fs::path manifest_for(const fs::path& output) { return fs::path(output.string() + ".manifest.json"); }

inline json to_json(const FusionDiagnostics& d) {
  return {{"floored_alignment", d.floored_alignment},
          {"novelty_fallbacks", d.novelty_fallbacks},
          {"variance_fallbacks", d.variance_fallbacks}};
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
}

// ---------------------------------------------------------------- embed

struct EmbedOptions {
  fs::path input;
  fs::path output;
  FusionConfig cfg;
  unsigned threads = 0;
  std::optional<fs::path> token_weights;  // TSV dump of per-token weights
};

inline std::string token_weights_tsv(const LweFile& file, const FusionConfig& cfg, unsigned threads) {
  std::vector<std::string> rows(file.records.size());
  parallel_for(file.records.size(), threads, [&](std::size_t s) {
    const auto b = embed_sentence_detailed(file.records[s], cfg);
    std::ostringstream os;
    os << std::setprecision(17);
    for (std::size_t j = 0; j < b.record.tokens.size(); ++j) {
      os << s << '\t' << j << '\t' << b.record.tokens[j].text << '\t'
         << b.importance.raw_variance[j] << '\t' << b.importance.weight[j] << '\n';
    }
    rows[s] = os.str();
  });
  std::string out = "sentence\ttoken\ttext\tvariance\tweight\n";
  for (const auto& r : rows) out += r;
  return out;
}

/// Embeds every sentence and writes an EMB1 file plus manifest. Returns the
/// table that was written.
inline EmbeddingTable run_embed(const EmbedOptions& opt, std::ostream& log) {
  const unsigned threads = resolve_thread_count(opt.threads);
  RunManifest manifest("embed", opt.cfg);
  manifest.add_input(opt.input);
  const LweFile file = manifest.timed("read", [&] { return read_lwe(opt.input); });

  FusionDiagnostics diag;
  const auto rows = manifest.timed("fusion", [&] { return embed_all(file, opt.cfg, threads, &diag); });
  const auto table = make_table(rows, file.dim);
  write_emb(table, opt.output);
  manifest.add_output(opt.output);

  if (opt.token_weights) {
    write_text(*opt.token_weights, token_weights_tsv(file, opt.cfg, threads));
    manifest.add_output(*opt.token_weights);
  }
  manifest.set("diagnostics", to_json(diag));
  manifest.set("threads", threads);
  manifest.write(manifest_for(opt.output));
  if (diag.floored_alignment + diag.novelty_fallbacks + diag.variance_fallbacks > 0) {
    log << "warning: fallbacks taken: " << to_json(diag).dump() << '\n';
  }
  log << "wrote " << table.count << " embeddings of dim " << table.dim << " to "
      << opt.output.string() << '\n';
  return table;
}

// ---------------------------------------------------------------- eval-sts

struct StsDataset {
  fs::path lwe;
  fs::path gold;
  std::string name;  // defaults to the gold file stem
};

/// One swept axis: "omega=0,0.5,1", "window=1..4", "start-layer=0..6",
/// "novelty=qr,svd", "importance=variance,uniform".
struct SweepAxis {
  std::string name;
  std::vector<std::string> values;
};

inline NoveltyBackend parse_novelty(const std::string& s) {
  if (s == "qr") return NoveltyBackend::QR;
  if (s == "svd") return NoveltyBackend::SVD;
  throw Error(ErrorCode::InvalidConfig, "unknown novelty backend \"" + s + "\"");
}

inline ImportanceMode parse_importance(const std::string& s) {
  if (s == "variance") return ImportanceMode::VarianceAllLayers;
  if (s == "last-layer") return ImportanceMode::VarianceLastLayerOnlyVector;
  if (s == "uniform") return ImportanceMode::Uniform;
  throw Error(ErrorCode::InvalidConfig, "unknown importance mode \"" + s + "\"");
}

inline SweepAxis parse_sweep(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size()) {
    throw Error(ErrorCode::InvalidConfig, "sweep \"" + spec + "\" is not NAME=VALUES");
  }
  SweepAxis axis{spec.substr(0, eq), {}};
  if (axis.name != "omega" && axis.name != "window" && axis.name != "start-layer" &&
      axis.name != "novelty" && axis.name != "importance") {
    throw Error(ErrorCode::InvalidConfig, "unknown sweep axis \"" + axis.name + "\"");
  }
  const std::string values = spec.substr(eq + 1);
  if (const auto dots = values.find(".."); dots != std::string::npos) {
    try {
      const int lo = std::stoi(values.substr(0, dots));
      const int hi = std::stoi(values.substr(dots + 2));
      if (hi < lo) throw Error(ErrorCode::InvalidConfig, "empty range in sweep " + spec);
      for (int v = lo; v <= hi; ++v) axis.values.push_back(std::to_string(v));
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::InvalidConfig, "bad range in sweep " + spec);
    }
  } else {
    std::stringstream ss(values);
    for (std::string item; std::getline(ss, item, ',');) {
      if (!item.empty()) axis.values.push_back(item);
    }
  }
  if (axis.values.empty()) throw Error(ErrorCode::InvalidConfig, "no values in sweep " + spec);
  return axis;
}

inline void apply_setting(FusionConfig& cfg, const std::string& axis, const std::string& value) {
  try {
    std::size_t used = 0;
    if (axis == "omega") {
      cfg.omega = std::stod(value, &used);
    } else if (axis == "window") {
      cfg.window = std::stoi(value, &used);
    } else if (axis == "start-layer") {
      cfg.start_layer = std::stoi(value, &used);
    } else if (axis == "novelty") {
      cfg.novelty_backend = parse_novelty(value);
      used = value.size();
    } else if (axis == "importance") {
      cfg.importance_mode = parse_importance(value);
      used = value.size();
    }
    if (used != value.size()) throw std::invalid_argument(value);
  } catch (const std::logic_error&) {
    throw Error(ErrorCode::InvalidConfig, "bad value \"" + value + "\" for " + axis);
  }
}

/// Cartesian product of the sweep axes applied on top of `base`, first axis
/// varying slowest. No axes yields just `base`.
inline std::vector<FusionConfig> expand_sweeps(const FusionConfig& base,
                                               const std::vector<SweepAxis>& axes) {
  std::vector<FusionConfig> grid{base};
  for (const auto& axis : axes) {
    std::vector<FusionConfig> next;
    for (const auto& cfg : grid) {
      for (const auto& v : axis.values) {
        FusionConfig c = cfg;
        apply_setting(c, axis.name, v);
        next.push_back(c);
      }
    }
    grid = std::move(next);
  }
  return grid;
}

struct EvalOptions {
  std::vector<StsDataset> datasets;
  FusionConfig cfg;
  std::vector<SweepAxis> sweeps;
  std::optional<fs::path> report;  // JSON output; stdout table is always printed
  unsigned threads = 0;
};

struct EvalResult {
  FusionConfig cfg;
  std::vector<CorrelationReport> reports;  // per dataset, then the mean if > 1 dataset
};

inline std::string dataset_name(const StsDataset& d) {
  return d.name.empty() ? d.gold.stem().string() : d.name;
}

inline void print_table(std::ostream& out, const std::vector<EvalResult>& results) {
  out << std::left << std::setw(28) << "dataset" << std::right << std::setw(7) << "omega"
      << std::setw(7) << "window" << std::setw(7) << "start" << std::setw(8) << "novelty"
      << std::setw(11) << "importance" << std::setw(7) << "n" << std::setw(10) << "pearson"
      << std::setw(10) << "spearman" << '\n';
  out << std::fixed;
  for (const auto& r : results) {
    for (const auto& rep : r.reports) {
      out << std::left << std::setw(28) << rep.dataset_name << std::right << std::setprecision(2)
          << std::setw(7) << r.cfg.omega << std::setw(7) << r.cfg.window << std::setw(7)
          << r.cfg.start_layer << std::setw(8) << to_string(r.cfg.novelty_backend)
          << std::setw(11) << to_string(r.cfg.importance_mode) << std::setw(7) << rep.n
          << std::setw(10) << percent2(rep.pearson) << std::setw(10) << percent2(rep.spearman)
          << '\n';
    }
  }
  out.unsetf(std::ios::floatfield);
}

inline json results_json(const std::vector<EvalResult>& results, const fs::path& manifest) {
  json arr = json::array();
  for (const auto& r : results) {
    for (std::size_t k = 0; k < r.reports.size(); ++k) {
      json j = to_json(r.reports[k], r.cfg);
      if (r.reports.size() > 1 && k + 1 == r.reports.size()) j["aggregate"] = "unweighted-mean";
      arr.push_back(std::move(j));
    }
  }
  return {{"manifest", manifest.string()}, {"results", std::move(arr)}};
}

inline std::vector<EvalResult> run_eval_sts(const EvalOptions& opt, std::ostream& out) {
  if (opt.datasets.empty()) throw Error(ErrorCode::InvalidConfig, "no datasets given");
  const unsigned threads = resolve_thread_count(opt.threads);
  RunManifest manifest("eval-sts", opt.cfg);

  struct Loaded {
    std::string name;
    LweFile file;
    std::vector<StsPair> pairs;
    std::vector<double> gold;
  };
  std::vector<Loaded> loaded;
  manifest.timed("read", [&] {
    for (const auto& d : opt.datasets) {
      manifest.add_input(d.lwe);
      manifest.add_input(d.gold);
      Loaded l{dataset_name(d), read_lwe(d.lwe), {}, {}};
      const auto rows = parse_sts_tsv(d.gold);
      l.pairs = interleaved_pairs(rows, l.file.sentence_count());
      for (const auto& row : rows) l.gold.push_back(row.gold);
      loaded.push_back(std::move(l));
    }
    return 0;
  });

  const auto grid = expand_sweeps(opt.cfg, opt.sweeps);
  std::vector<EvalResult> results;
  FusionDiagnostics diag;
  manifest.timed("evaluate", [&] {
    for (const auto& cfg : grid) {
      EvalResult r{cfg, {}};
      for (const auto& l : loaded) {
        const auto scores = score_pairs(l.file, l.pairs, cfg, threads, &diag);
        r.reports.push_back(correlate(l.name, scores, l.gold));
      }
      if (r.reports.size() > 1) {
        std::string name = "mean(";
        for (std::size_t k = 0; k < r.reports.size(); ++k) {
          name += (k ? "," : "") + r.reports[k].dataset_name;
        }
        r.reports.push_back(mean_report(r.reports, name + ")"));
      }
      results.push_back(std::move(r));
    }
    return 0;
  });

  print_table(out, results);
  if (opt.report) {
    const auto mpath = manifest_for(*opt.report);
    write_text(*opt.report, results_json(results, mpath.filename()).dump(2) + "\n");
    manifest.add_output(*opt.report);
    manifest.set("diagnostics", to_json(diag));
    manifest.set("grid_size", grid.size());
    manifest.write(mpath);
  }
  return results;
}

// ---------------------------------------------------------------- analyze

struct AnalyzeOptions {
  fs::path input;
  fs::path out_dir;
  std::size_t min_occurrences = 50;
  bool merge_subwords = false;  // for the similarity map; word tables always merge
};

struct AnalyzeResult {
  analysis::SimilarityMap map;
  std::vector<analysis::WordVarianceEntry> words;
  std::optional<analysis::VarianceIdfReport> correlation;
};

inline AnalyzeResult run_analyze(const AnalyzeOptions& opt, std::ostream& log) {
  FusionConfig echo;
  echo.merge_subwords = opt.merge_subwords;
  RunManifest manifest("analyze", echo);
  manifest.add_input(opt.input);
  manifest.set("min_occurrences", opt.min_occurrences);
  const LweFile file = manifest.timed("read", [&] { return read_lwe(opt.input); });
  fs::create_directories(opt.out_dir);

  AnalyzeResult res;
  res.map = manifest.timed("similarity", [&] {
    return analysis::average_similarity_map(file, opt.merge_subwords);
  });
  res.words = manifest.timed("variance", [&] {
    return analysis::word_variance_table(file, opt.min_occurrences);
  });

  const auto mpath = opt.out_dir / "manifest.json";
  const auto emit = [&](const std::string& name, const std::string& body) {
    write_text(opt.out_dir / name, body);
    manifest.add_output(opt.out_dir / name);
  };
  std::ostringstream grid, diag, table;
  analysis::write_similarity_csv(grid, res.map.matrix);
  analysis::write_offset_diagonals_csv(diag, res.map.matrix);
  analysis::write_variance_table_csv(table, res.words);
  emit("similarity_map.csv", grid.str());
  emit("offset_diagonals.csv", diag.str());
  emit("word_variance.csv", table.str());

  json corr = {{"rho", nullptr}, {"p", nullptr}, {"n", res.words.size()}};
  if (res.words.size() >= 2) {
    try {
      res.correlation = analysis::variance_idf_correlation(res.words);
      corr = analysis::to_json(*res.correlation);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::ZeroVariance) throw;
      log << "warning: variance/IDF correlation undefined: " << e.message() << '\n';
    }
  } else {
    log << "warning: fewer than 2 words with >= " << opt.min_occurrences
        << " occurrences; correlation skipped\n";
  }
  corr["manifest"] = mpath.filename().string();
  corr["word_count"] = res.map.word_count;
  emit("variance_idf.json", corr.dump(2) + "\n");
  manifest.write(mpath);
  log << "wrote analysis of " << res.map.word_count << " tokens to " << opt.out_dir.string() << '\n';
  return res;
}

// ---------------------------------------------------------------- bench

struct BenchOptions {
  fs::path input;
  FusionConfig cfg;
  unsigned trials = 5;
};

struct BenchTiming {
  NoveltyBackend backend;
  double mean_ms = 0.0;  // per sentence
  double std_ms = 0.0;   // across trials
};

/// Per-sentence fusion time, one sentence at a time on one thread, for a
/// file already in memory.
inline BenchTiming time_fusion(const LweFile& file, FusionConfig cfg, NoveltyBackend backend,
                               unsigned trials) {
  if (trials < 1) throw Error(ErrorCode::InvalidConfig, "trials must be >= 1");
  if (file.records.empty()) throw Error(ErrorCode::EmptyCorpus, "no sentences to time");
  cfg.novelty_backend = backend;
  std::vector<double> per_sentence;
  double sink = 0.0;
  for (unsigned t = 0; t < trials; ++t) {
    const auto start = std::chrono::steady_clock::now();
    for (const auto& rec : file.records) sink += embed_sentence(rec, cfg).values(0);
    const double ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    per_sentence.push_back(ms / static_cast<double>(file.records.size()));
  }
  BenchTiming out{backend};
  for (double v : per_sentence) out.mean_ms += v;
  out.mean_ms /= static_cast<double>(trials);
  for (double v : per_sentence) out.std_ms += (v - out.mean_ms) * (v - out.mean_ms);
  out.std_ms = std::sqrt(out.std_ms / static_cast<double>(trials));
  if (!std::isfinite(sink)) out.std_ms = std::nan("");
  return out;
}

inline json run_bench(const BenchOptions& opt, std::ostream& out) {
  const LweFile file = read_lwe(opt.input);
  json results = json::array();
  std::vector<BenchTiming> timings;
  for (auto backend : {NoveltyBackend::QR, NoveltyBackend::SVD}) {
    timings.push_back(time_fusion(file, opt.cfg, backend, opt.trials));
    results.push_back({{"backend", std::string(to_string(backend))},
                       {"trials", opt.trials},
                       {"mean_ms_per_sentence", timings.back().mean_ms},
                       {"std_ms", timings.back().std_ms}});
  }
  json report = {{"input", opt.input.string()},
                 {"sentences", file.records.size()},
                 {"batch_size", 1},
                 {"trials", opt.trials},
                 {"config", to_json(opt.cfg)},
                 {"results", results},
                 {"qr_over_svd", timings[0].mean_ms / timings[1].mean_ms}};
  out << report.dump(2) << '\n';
  return report;
}

}  // namespace layerfuse::commands
