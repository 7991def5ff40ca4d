// SPDX-License-Identifier: Apache-2.0
//
// layerfuse: sentence embeddings from layer-wise token representations.
//
//   layerfuse embed     IN.lwe -o OUT.emb [--dump-token-weights W.tsv]
//   layerfuse eval-sts  --lwe A.lwe --gold A.tsv [--lwe B.lwe --gold B.tsv ...]
//   layerfuse analyze   IN.lwe --out-dir DIR
//   layerfuse bench     IN.lwe --trials 5
//
// Errors go to stderr as "error: <Code>: <message>"; exit status is 2 for
// usage errors, 3 for bad data, 4 for numerical failures.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "layerfuse/commands.hpp"

namespace {

using namespace layerfuse;
namespace cmd = layerfuse::commands;

struct FusionFlags {
  double omega = 0.5;
  int window = 2;
  int start_layer = 4;
  std::string novelty = "qr";
  std::string importance = "variance";
  bool merge_subwords = false;
  bool keep_special = false;
  unsigned threads = 0;
  unsigned long seed = 0;

  void attach(CLI::App& app) {
    app.add_option("--omega", omega, "Share of the inverse-alignment weight (1 = alignment only, 0 = novelty only)")
        ->check(CLI::Range(0.0, 1.0))
        ->capture_default_str();
    app.add_option("--window", window, "Layer neighbourhood half-width m")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    app.add_option("--start-layer", start_layer, "First layer included in fusion")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();
    app.add_option("--novelty", novelty, "Novelty backend")
        ->check(CLI::IsMember({"qr", "svd"}))
        ->capture_default_str();
    app.add_option("--importance", importance, "Token weighting")
        ->check(CLI::IsMember({"variance", "last-layer", "uniform"}))
        ->capture_default_str();
    app.add_flag("--merge-subwords", merge_subwords, "Average continuation pieces into words");
    app.add_flag("--keep-special", keep_special, "Keep [CLS]/[SEP]-class tokens");
    app.add_option("--threads", threads, "Worker threads (default $LAYERFUSE_THREADS or all cores)");
    app.add_option("--seed", seed, "Accepted for reproducibility scripts; the pipeline is deterministic");
  }

  FusionConfig config() const {
    FusionConfig cfg;
    cfg.omega = omega;
    cfg.window = window;
    cfg.start_layer = start_layer;
    cfg.novelty_backend = cmd::parse_novelty(novelty);
    cfg.importance_mode = cmd::parse_importance(importance);
    cfg.merge_subwords = merge_subwords;
    cfg.keep_special = keep_special;
    return cfg;
  }
};

int report_error(const std::string& code, const std::string& message, int status) {
  std::cerr << "error: " << code << ": " << message << '\n';
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sentence embeddings from layer-wise transformer token representations"};
  app.set_version_flag("--version", LAYERFUSE_VERSION);
  app.require_subcommand(1);

  FusionFlags flags;

  cmd::EmbedOptions embed;
  std::string weights_path;
  auto* embed_cmd = app.add_subcommand("embed", "Write one embedding per sentence (EMB1)");
  embed_cmd->add_option("input", embed.input, "LWE input")->required()->check(CLI::ExistingFile);
  embed_cmd->add_option("-o,--output", embed.output, "EMB1 output")->required();
  embed_cmd->add_option("--dump-token-weights", weights_path, "TSV of per-token importance weights");
  flags.attach(*embed_cmd);

  std::vector<std::string> lwe_paths, gold_paths, names, sweeps;
  std::string report_path;
  auto* eval_cmd = app.add_subcommand("eval-sts", "Correlate pair cosines with STS gold scores");
  eval_cmd->add_option("--lwe", lwe_paths, "LWE file (sentences 2k, 2k+1 form pair k)")
      ->required()
      ->check(CLI::ExistingFile);
  eval_cmd->add_option("--gold", gold_paths, "Gold TSV, one per --lwe")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--name", names, "Dataset names, one per --lwe (default: gold file stem)");
  eval_cmd->add_option("--sweep", sweeps,
                       "Grid axis, e.g. omega=0,0.5,1 window=1..4 start-layer=0..6 novelty=qr,svd");
  eval_cmd->add_option("--report", report_path, "JSON report output");
  flags.attach(*eval_cmd);

  cmd::AnalyzeOptions analyze;
  auto* analyze_cmd = app.add_subcommand("analyze", "Layer-similarity and word-variance diagnostics");
  analyze_cmd->add_option("input", analyze.input, "LWE input")->required()->check(CLI::ExistingFile);
  analyze_cmd->add_option("--out-dir", analyze.out_dir, "Output directory")->required();
  analyze_cmd->add_option("--min-occurrences", analyze.min_occurrences,
                          "Minimum occurrences for the word table")
      ->capture_default_str();
  analyze_cmd->add_flag("--merge-subwords", analyze.merge_subwords,
                        "Merge subwords for the similarity map too");

  cmd::BenchOptions bench;
  auto* bench_cmd = app.add_subcommand("bench", "Time per-sentence fusion for both novelty backends");
  bench_cmd->add_option("input", bench.input, "LWE input")->required()->check(CLI::ExistingFile);
  bench_cmd->add_option("--trials", bench.trials, "Repetitions")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  flags.attach(*bench_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("UsageError", e.what(), 2);
  }

  try {
    if (*embed_cmd) {
      embed.cfg = flags.config();
      embed.threads = flags.threads;
      if (!weights_path.empty()) embed.token_weights = weights_path;
      cmd::run_embed(embed, std::cerr);
    } else if (*eval_cmd) {
      if (lwe_paths.size() != gold_paths.size() || (!names.empty() && names.size() != lwe_paths.size())) {
        return report_error("UsageError", "--lwe, --gold and --name counts must match", 2);
      }
      cmd::EvalOptions opt;
      opt.cfg = flags.config();
      opt.threads = flags.threads;
      for (std::size_t k = 0; k < lwe_paths.size(); ++k) {
        opt.datasets.push_back({lwe_paths[k], gold_paths[k], names.empty() ? "" : names[k]});
      }
      for (const auto& s : sweeps) opt.sweeps.push_back(cmd::parse_sweep(s));
      if (!report_path.empty()) opt.report = report_path;
      cmd::run_eval_sts(opt, std::cout);
    } else if (*analyze_cmd) {
      cmd::run_analyze(analyze, std::cerr);
    } else if (*bench_cmd) {
      bench.cfg = flags.config();
      cmd::run_bench(bench, std::cout);
    }
  } catch (const Error& e) {
    return report_error(std::string(to_string(e.code())), e.message(), exit_status(e.code()));
  } catch (const std::filesystem::filesystem_error& e) {
    return report_error("IoFailure", e.what(), 3);
  }
  return 0;
}
