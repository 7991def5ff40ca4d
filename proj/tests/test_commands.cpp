// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>

#include "layerfuse/commands.hpp"
#include "oracle.hpp"
#include "test_support.hpp"

namespace {

using namespace layerfuse;
using namespace layerfuse::commands;
using testing_support::fixture;

class Commands : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() /
           ("layerfuse_" + std::string(info->name()) + "_" + std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path path(const std::string& name) const { return dir_ / name; }

  static std::string slurp(const fs::path& p) { return detail::read_all(p); }

  fs::path dir_;
  std::ostringstream log_;
};

std::vector<oracle::Vec> oracle_embeddings(const LweFile& file, double omega, int m, int start) {
  std::vector<oracle::Vec> out;
  for (const auto& raw : file.records) {
    std::vector<oracle::Stack> stacks;
    for (const auto& t : strip_special_tokens(raw).tokens) stacks.push_back(testing_support::to_oracle(t));
    out.push_back(oracle::embed(stacks, omega, m, start));
  }
  return out;
}

TEST_F(Commands, EmbedWritesOneRowPerSentenceMatchingOracle) {
  EmbedOptions opt{fixture("golden.lwe"), path("out.emb"), FusionConfig{}, 1, {}};
  const auto t = run_embed(opt, log_);
  EXPECT_EQ(t.count, 8u);
  EXPECT_EQ(t.dim, 64u);
  const auto back = read_emb(opt.output);
  EXPECT_EQ(back.values, t.values);

  const auto file = read_lwe(opt.input);
  const auto expected = oracle_embeddings(file, 0.5, 2, 4);
  for (std::size_t s = 0; s < 8; ++s) {
    for (std::size_t k = 0; k < 64; ++k) {
      EXPECT_NEAR(back.row(s)[k], expected[s][k], 1e-6 * (1.0 + std::abs(expected[s][k])));
    }
  }

  const auto manifest = json::parse(slurp(manifest_for(opt.output)));
  EXPECT_EQ(manifest["command"], "embed");
  EXPECT_EQ(manifest["config"]["omega"], 0.5);
  EXPECT_EQ(manifest["config"]["window"], 2);
  EXPECT_EQ(manifest["config"]["start_layer"], 4);
  EXPECT_EQ(manifest["config"]["novelty"], "qr");
  EXPECT_TRUE(manifest.contains("diagnostics"));
  EXPECT_TRUE(manifest["timings_ms"].contains("fusion"));
}

TEST_F(Commands, OmegaOneIsAlignmentOnly) {
  FusionConfig cfg;
  cfg.omega = 1.0;
  const auto t = run_embed({fixture("golden.lwe"), path("a.emb"), cfg, 1, {}}, log_);
  const auto expected = oracle_embeddings(read_lwe(fixture("golden.lwe")), 1.0, 2, 4);
  for (std::size_t k = 0; k < 64; ++k) {
    EXPECT_NEAR(t.row(3)[k], expected[3][k], 1e-6 * (1.0 + std::abs(expected[3][k])));
  }
}

TEST_F(Commands, TokenWeightsDump) {
  EmbedOptions opt{fixture("golden.lwe"), path("out.emb"), FusionConfig{}, 1, path("w.tsv")};
  run_embed(opt, log_);
  std::istringstream in(slurp(path("w.tsv")));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "sentence\ttoken\ttext\tvariance\tweight");
  std::map<int, double> sums;
  int rows = 0;
  while (std::getline(in, line)) {
    std::istringstream f(line);
    std::string s, j, text, var, w;
    std::getline(f, s, '\t');
    std::getline(f, j, '\t');
    std::getline(f, text, '\t');
    std::getline(f, var, '\t');
    std::getline(f, w, '\t');
    EXPECT_NE(text, "[CLS]");
    EXPECT_GE(std::stod(var), 0.0);
    sums[std::stoi(s)] += std::stod(w);
    ++rows;
  }
  EXPECT_GT(rows, 8);
  ASSERT_EQ(sums.size(), 8u);
  for (const auto& [s, total] : sums) EXPECT_NEAR(total, 1.0, 1e-12) << s;
}

TEST_F(Commands, EmbedIsByteIdenticalAcrossRunsAndThreads) {
  std::string first;
  for (unsigned threads : {1u, 2u, 4u, 1u}) {
    const auto out = path("t" + std::to_string(threads) + ".emb");
    run_embed({fixture("golden.lwe"), out, FusionConfig{}, threads, {}}, log_);
    const auto bytes = slurp(out);
    if (first.empty()) first = bytes;
    EXPECT_EQ(bytes, first) << threads;
  }
}

TEST_F(Commands, EvalMatchesOracleCorrelationsAndReportIsDeterministic) {
  EvalOptions opt;
  opt.datasets = {{fixture("golden.lwe"), fixture("golden.tsv"), ""}};
  opt.threads = 1;
  opt.report = path("r1.json");
  std::ostringstream table;
  const auto res = run_eval_sts(opt, table);
  ASSERT_EQ(res.size(), 1u);
  ASSERT_EQ(res[0].reports.size(), 1u);
  const auto& rep = res[0].reports[0];
  EXPECT_EQ(rep.dataset_name, "golden");
  EXPECT_EQ(rep.n, 4u);

  const auto emb = oracle_embeddings(read_lwe(fixture("golden.lwe")), 0.5, 2, 4);
  const std::vector<double> gold{4.75, 0.50, 3.20, 1.80};
  std::vector<double> cos;
  for (std::size_t k = 0; k < 4; ++k) cos.push_back(oracle::cosine(emb[2 * k], emb[2 * k + 1]));
  EXPECT_NEAR(rep.pearson, oracle::naive_pearson(cos, gold), 1e-9);
  EXPECT_NEAR(rep.spearman, oracle::naive_spearman(cos, gold), 1e-9);
  EXPECT_NE(table.str().find("golden"), std::string::npos);

  const auto j = json::parse(slurp(path("r1.json")));
  EXPECT_EQ(j["manifest"], "r1.json.manifest.json");
  EXPECT_EQ(j["results"][0]["n"], 4);
  EXPECT_DOUBLE_EQ(j["results"][0]["pearson"].get<double>(), percent2(rep.pearson));
  EXPECT_TRUE(fs::exists(path("r1.json.manifest.json")));

  opt.threads = 4;
  opt.report = path("r2.json");
  std::ostringstream again;
  run_eval_sts(opt, again);
  EXPECT_EQ(again.str(), table.str());
  auto j2 = json::parse(slurp(path("r2.json")));
  j2["manifest"] = j["manifest"];
  EXPECT_EQ(j2, j);
}

TEST_F(Commands, TwoDatasetsAddUnweightedMean) {
  EvalOptions opt;
  opt.datasets = {{fixture("golden.lwe"), fixture("golden.tsv"), "a"},
                  {fixture("golden.lwe"), fixture("golden.tsv"), "b"}};
  opt.threads = 1;
  opt.report = path("r.json");
  std::ostringstream table;
  const auto res = run_eval_sts(opt, table);
  ASSERT_EQ(res[0].reports.size(), 3u);
  EXPECT_EQ(res[0].reports[2].dataset_name, "mean(a,b)");
  EXPECT_DOUBLE_EQ(res[0].reports[2].pearson, res[0].reports[0].pearson);
  const auto j = json::parse(slurp(path("r.json")));
  EXPECT_EQ(j["results"][2]["aggregate"], "unweighted-mean");
  EXPECT_FALSE(j["results"][0].contains("aggregate"));
}

TEST_F(Commands, SweepsExpandTheGrid) {
  const auto omega = parse_sweep("omega=0,0.5,1");
  EXPECT_EQ(omega.values, (std::vector<std::string>{"0", "0.5", "1"}));
  const auto window = parse_sweep("window=1..4");
  EXPECT_EQ(window.values.size(), 4u);
  const auto grid = expand_sweeps(FusionConfig{}, {omega, window});
  ASSERT_EQ(grid.size(), 12u);
  EXPECT_EQ(grid[0].omega, 0.0);
  EXPECT_EQ(grid[0].window, 1);
  EXPECT_EQ(grid[11].omega, 1.0);
  EXPECT_EQ(grid[11].window, 4);
  EXPECT_EQ(grid[5].start_layer, 4);

  for (const char* bad : {"omega", "colour=1", "window=4..1", "window=a..b", "omega="}) {
    EXPECT_THROW(parse_sweep(bad), Error) << bad;
  }
  FusionConfig cfg;
  EXPECT_THROW(apply_setting(cfg, "window", "2x"), Error);
  EXPECT_THROW(apply_setting(cfg, "novelty", "lu"), Error);

  EvalOptions opt;
  opt.datasets = {{fixture("golden.lwe"), fixture("golden.tsv"), ""}};
  opt.threads = 1;
  opt.sweeps = {parse_sweep("start-layer=0..12"), parse_sweep("novelty=qr,svd")};
  std::ostringstream table;
  const auto res = run_eval_sts(opt, table);
  ASSERT_EQ(res.size(), 26u);
  for (std::size_t k = 0; k < res.size(); k += 2) {
    EXPECT_NEAR(res[k].reports[0].pearson, res[k + 1].reports[0].pearson, 1e-5);
  }
}

TEST_F(Commands, AnalyzeOutputs) {
  AnalyzeOptions opt{fixture("golden.lwe"), path("an"), 1, false};
  const auto res = run_analyze(opt, log_);
  EXPECT_EQ(res.map.matrix.rows(), 13);

  std::istringstream grid(slurp(path("an/similarity_map.csv")));
  std::string line;
  int rows = 0;
  while (std::getline(grid, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 12);
    ++rows;
  }
  EXPECT_EQ(rows, 13);

  std::istringstream diag(slurp(path("an/offset_diagonals.csv")));
  std::getline(diag, line);
  EXPECT_EQ(line, "offset,values");
  std::getline(diag, line);
  EXPECT_EQ(line.substr(0, 2), "1,");
  EXPECT_EQ(std::count(line.begin(), line.end(), ','), 12);  // 12 values after the offset

  const auto j = json::parse(slurp(path("an/variance_idf.json")));
  EXPECT_TRUE(j["rho"].is_number());
  EXPECT_TRUE(j["p"].is_number());
  EXPECT_EQ(j["n"].get<std::size_t>(), res.words.size());
  EXPECT_EQ(j["manifest"], "manifest.json");
  EXPECT_TRUE(fs::exists(path("an/word_variance.csv")));
  EXPECT_TRUE(fs::exists(path("an/manifest.json")));
}

TEST_F(Commands, AnalyzeWithTooFewWordsWritesNulls) {
  AnalyzeOptions opt{fixture("golden.lwe"), path("an"), 50, false};
  run_analyze(opt, log_);
  const auto j = json::parse(slurp(path("an/variance_idf.json")));
  EXPECT_TRUE(j["rho"].is_null());
  EXPECT_EQ(j["n"], 0);
  EXPECT_NE(log_.str().find("warning"), std::string::npos);
}

TEST_F(Commands, BenchSchema) {
  std::ostringstream out;
  const auto j = run_bench({fixture("golden.lwe"), FusionConfig{}, 2}, out);
  EXPECT_EQ(j["sentences"], 8);
  EXPECT_EQ(j["batch_size"], 1);
  ASSERT_EQ(j["results"].size(), 2u);
  EXPECT_EQ(j["results"][0]["backend"], "qr");
  EXPECT_EQ(j["results"][1]["backend"], "svd");
  EXPECT_EQ(j["results"][0]["trials"], 2);
  EXPECT_GT(j["results"][0]["mean_ms_per_sentence"].get<double>(), 0.0);
  EXPECT_TRUE(j["qr_over_svd"].is_number());
  EXPECT_EQ(json::parse(out.str()), j);
}

// ---------------------------------------------------------------- executable

struct Run {
  int status;
  std::string err;
  std::string out;
};

Run run_cli(const fs::path& dir, const std::string& args) {
  const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string("\"") + LAYERFUSE_CLI + "\" " + args + " >\"" + out.string() +
                          "\" 2>\"" + err.string() + "\"";
  const int raw = std::system(cmd.c_str());
  return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, detail::read_all(err), detail::read_all(out)};
}

TEST_F(Commands, CliEmbedSucceeds) {
  const auto r = run_cli(dir_, "embed " + fixture("golden.lwe") + " -o " + path("c.emb").string() +
                                   " --threads 2");
  EXPECT_EQ(r.status, 0) << r.err;
  run_embed({fixture("golden.lwe"), path("lib.emb"), FusionConfig{}, 1, {}}, log_);
  EXPECT_EQ(slurp(path("c.emb")), slurp(path("lib.emb")));
}

TEST_F(Commands, CliUsageErrorsExitTwo) {
  for (const std::string& args : std::vector<std::string>{"", "embed", "embed " + fixture("golden.lwe"),
                                  "embed " + fixture("golden.lwe") + " -o x --omega 2",
                                  "eval-sts --lwe " + fixture("golden.lwe") + " --gold " +
                                      fixture("golden.tsv") + " --sweep bogus=1"}) {
    const auto r = run_cli(dir_, args);
    EXPECT_EQ(r.status, 2) << args;
    EXPECT_EQ(r.err.rfind("error: ", 0), 0u) << r.err;
  }
}

TEST_F(Commands, CliDataErrorsExitThree) {
  auto r = run_cli(dir_, "embed " + fixture("golden.tsv") + " -o " + path("x.emb").string());
  EXPECT_EQ(r.status, 3);
  EXPECT_EQ(r.err.rfind("error: BadMagic:", 0), 0u) << r.err;

  r = run_cli(dir_, "embed " + fixture("empty.lwe") + " -o " + path("x.emb").string());
  EXPECT_EQ(r.status, 0) << r.err;  // no sentences is a valid, empty table

  r = run_cli(dir_, "eval-sts --lwe " + fixture("single.lwe") + " --gold " + fixture("golden.tsv"));
  EXPECT_EQ(r.status, 3);
  EXPECT_EQ(r.err.rfind("error: PairCountMismatch:", 0), 0u) << r.err;
}

TEST_F(Commands, CliNumericalErrorsExitFour) {
  LweFile f;
  f.layer_count = 5;
  f.dim = 3;
  SentenceRecord r;
  r.tokens.push_back(testing_support::make_token(Matrix::Zero(3, 5), "void"));
  f.records.push_back(r);
  write_lwe(f, path("zero.lwe"));
  const auto res = run_cli(dir_, "embed " + path("zero.lwe").string() + " -o " + path("z.emb").string());
  EXPECT_EQ(res.status, 4);
  EXPECT_EQ(res.err.rfind("error: ZeroNormVector: sentence 0:", 0), 0u) << res.err;
}

}  // namespace
