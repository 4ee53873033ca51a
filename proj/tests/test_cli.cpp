#include <gtest/gtest.h>

#include <fstream>
#include <json.hpp>
#include <sstream>

#include "darelab/cli/commands.hpp"
#include "darelab/error.hpp"
#include "support.hpp"

using namespace darelab;
using darelab::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = 0;
  std::string out;
  std::string err;
};

CliResult cli(std::vector<std::string> args) {
  args.insert(args.begin(), "darelab");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliResult r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

// Corpus plus a briefly trained checkpoint, built once through the CLI.
class Workspace {
 public:
  static Workspace& get() {
    static Workspace w;
    return w;
  }
  fs::path corpus() const { return dir_ / "corpus.txt"; }
  fs::path run() const { return dir_ / "run"; }
  fs::path ckpt() const { return dir_ / "run" / "final"; }
  const TempDir& dir() const { return dir_; }

 private:
  Workspace() : dir_("cli_ws") {
    const auto g = cli({"gen-corpus", "--size", "60", "--seed", "4", "--out", corpus().string()});
    if (g.code != 0) throw std::runtime_error("gen-corpus failed: " + g.err);
    std::ofstream(dir_ / "tiny.cfg") << "mode = dare\ncorpus = corpus.txt\ntotal_iters = 20\nbatch_size = 4\n"
                                        "d_model = 16\nheads = 2\nlayers = 1\nmlp_ratio = 2\nseed = 2\n"
                                        "lr = 1e-3\nwarmup_iters = 5\n";
    const auto t = cli({"train", "--config", (dir_ / "tiny.cfg").string(), "--out", run().string()});
    if (t.code != 0) throw std::runtime_error("train failed: " + t.err);
  }
  TempDir dir_;
};

}  // namespace

TEST(ExitCodes, MapByErrorKind) {
  EXPECT_EQ(exit_code_for(UsageError("x")), kExitUsage);
  EXPECT_EQ(exit_code_for(ConfigError("x")), kExitUsage);
  EXPECT_EQ(exit_code_for(IoError("x")), kExitIo);
  EXPECT_EQ(exit_code_for(ParseError("x")), kExitIo);
  EXPECT_EQ(exit_code_for(IntegrityError("x")), kExitIo);
  EXPECT_EQ(exit_code_for(NumericalError("x")), kExitNumerical);
}

TEST(Cli, NoSubcommandAndUnknownFlagAreUsageErrors) {
  EXPECT_EQ(cli({}).code, kExitUsage);
  EXPECT_EQ(cli({"sample", "--bogus"}).code, kExitUsage);
  EXPECT_EQ(cli({"--help"}).code, kExitOk);
}

TEST(GenCorpus, SizeZeroIsUsageError) {
  TempDir dir("gen");
  const auto r = cli({"gen-corpus", "--size", "0", "--out", (dir / "c.txt").string()});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_FALSE(fs::exists(dir / "c.txt"));
}

TEST(GenCorpus, SameSeedGivesIdenticalFiles) {
  TempDir dir("gen");
  ASSERT_EQ(cli({"gen-corpus", "--size", "30", "--seed", "9", "--out", (dir / "a.txt").string()}).code, 0);
  ASSERT_EQ(cli({"gen-corpus", "--size", "30", "--seed", "9", "--out", (dir / "b.txt").string()}).code, 0);
  ASSERT_EQ(cli({"gen-corpus", "--size", "30", "--seed", "10", "--out", (dir / "c.txt").string()}).code, 0);
  EXPECT_EQ(slurp(dir / "a.txt"), slurp(dir / "b.txt"));
  EXPECT_NE(slurp(dir / "a.txt"), slurp(dir / "c.txt"));
  const Corpus c = read_corpus(dir / "a.txt");
  EXPECT_EQ(c.samples.size(), 30u);
}

TEST(Train, WritesMetricsCheckpointAndRegistry) {
  auto& w = Workspace::get();
  EXPECT_TRUE(fs::exists(w.run() / "metrics.csv"));
  EXPECT_TRUE(fs::exists(w.ckpt() / "manifest.json"));
  EXPECT_TRUE(fs::exists(w.run() / "registry.json"));
}

TEST(Train, MissingCorpusIsIoErrorAndBadModeIsUsage) {
  auto& w = Workspace::get();
  TempDir dir("train");
  std::ofstream(dir / "a.cfg") << "corpus = nowhere.txt\ntotal_iters = 2\n";
  EXPECT_EQ(cli({"train", "--config", (dir / "a.cfg").string(), "--out", (dir / "o").string()}).code, kExitIo);
  std::ofstream(dir / "b.cfg") << "corpus = " << w.corpus().string() << "\ntotal_iters = 2\n";
  EXPECT_EQ(cli({"train", "--config", (dir / "b.cfg").string(), "--mode", "fancy", "--out", (dir / "o").string()}).code,
            kExitUsage);
  std::ofstream(dir / "c.cfg") << "colour = red\n";
  EXPECT_EQ(cli({"train", "--config", (dir / "c.cfg").string(), "--out", (dir / "o").string()}).code, kExitUsage);
}

TEST(Sample, DefaultsRecordedInRunJson) {
  auto& w = Workspace::get();
  TempDir dir("sample");
  const auto r = cli({"sample", "--ckpt", w.ckpt().string(), "--prompt", "red circle topleft static", "--out",
                      (dir / "s").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto run = nlohmann::json::parse(slurp(dir / "s" / "run.json"));
  EXPECT_EQ(run.at("steps").get<int>(), 40);
  EXPECT_DOUBLE_EQ(run.at("cfg_scale").get<double>(), 5.0);
  EXPECT_EQ(run.at("prompt").get<std::string>(), "red circle topleft static");
  const auto shape = run.at("shape").get<std::vector<std::size_t>>();
  ASSERT_EQ(shape.size(), 4u);
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  EXPECT_EQ(fs::file_size(dir / "s" / "grid.bin"), n * 8);
  for (std::size_t f = 0; f < shape[0]; ++f) {
    const auto img = decode_ppm(slurp(dir / "s" / ("frame_" + std::to_string(f) + ".ppm")));
    EXPECT_EQ(img.height, shape[1]);
    EXPECT_EQ(img.width, shape[2]);
  }
}

TEST(Sample, SameSeedGivesIdenticalFrames) {
  auto& w = Workspace::get();
  TempDir dir("sample");
  for (const char* sub : {"a", "b"}) {
    ASSERT_EQ(cli({"sample", "--ckpt", w.ckpt().string(), "--prompt", "blue bar bottomright driftleft", "--seed", "3",
                   "--steps", "8", "--out", (dir / sub).string()})
                  .code,
              0);
  }
  ASSERT_EQ(cli({"sample", "--ckpt", w.ckpt().string(), "--prompt", "blue bar bottomright driftleft", "--seed", "4",
                 "--steps", "8", "--out", (dir / "c").string()})
                .code,
            0);
  EXPECT_EQ(slurp(dir / "a" / "frame_0.ppm"), slurp(dir / "b" / "frame_0.ppm"));
  EXPECT_EQ(slurp(dir / "a" / "grid.bin"), slurp(dir / "b" / "grid.bin"));
  EXPECT_NE(slurp(dir / "a" / "grid.bin"), slurp(dir / "c" / "grid.bin"));
}

TEST(Sample, UnknownTokenIsUsageErrorNamingIt) {
  auto& w = Workspace::get();
  TempDir dir("sample");
  const auto r = cli({"sample", "--ckpt", w.ckpt().string(), "--prompt", "purple blob", "--out", (dir / "s").string()});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("purple"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir / "s" / "grid.bin"));
}

TEST(Sample, MissingCheckpointIsIoError) {
  TempDir dir("sample");
  EXPECT_EQ(cli({"sample", "--ckpt", (dir / "none").string(), "--prompt", "red", "--out", (dir / "s").string()}).code,
            kExitIo);
}

TEST(Eval, ZeroCaptionsIsUsageError) {
  auto& w = Workspace::get();
  EXPECT_EQ(cli({"eval", "--ckpt", w.ckpt().string(), "--n", "0"}).code, kExitUsage);
}

TEST(Eval, SameSeedGivesIdenticalReport) {
  auto& w = Workspace::get();
  TempDir dir("eval");
  for (const char* f : {"a.json", "b.json"}) {
    ASSERT_EQ(cli({"eval", "--ckpt", w.ckpt().string(), "--n", "6", "--steps", "6", "--seed", "1", "--out",
                   (dir / f).string()})
                  .code,
              0);
  }
  EXPECT_EQ(slurp(dir / "a.json"), slurp(dir / "b.json"));
  const auto doc = nlohmann::json::parse(slurp(dir / "a.json"));
  EXPECT_EQ(doc.at("n").get<int>(), 6);
  EXPECT_EQ(doc.at("per_caption").size(), 6u);
  for (const char* k : {"color", "position", "motion", "all"}) {
    const double v = doc.at(k).get<double>();
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Eval, UntrainedModelPositionNearChance) {
  ModelDims d = darelab::testing::small_dims();
  const Vocab vocab = build_vocab();
  d.vocab_size = vocab.size();
  d.null_id = vocab.null_id();
  const ModelParams p = init_params(123, d);
  const EvalReport r = evaluate(p, vocab, 200, 5, 10, 5.0);
  // Four quadrants; a model that knows nothing lands near 1/4.
  EXPECT_GT(r.position, 0.10);
  EXPECT_LT(r.position, 0.45);
  EXPECT_LE(r.all, r.position);
}

TEST(Analyze, SameCheckpointGivesZeroDeltas) {
  auto& w = Workspace::get();
  TempDir dir("analyze");
  const auto r = cli({"analyze", "--ckpt-a", w.ckpt().string(), "--ckpt-b", w.ckpt().string(), "--corpus",
                      w.corpus().string(), "--samples", "5", "--out", (dir / "report.csv").string(), "--embeddings",
                      (dir / "emb.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const AnalysisReport rep = read_report_csv(dir / "report.csv");
  EXPECT_EQ(rep.rows.size(), 15u);
  for (const auto& row : rep.rows) {
    EXPECT_EQ(row.delta, 0.0) << row.token;
    EXPECT_NE(row.role, "filler");
    EXPECT_GT(row.score_a, 0.0);
  }
  EXPECT_EQ(rep.fraction_improved, 0.0);
  EXPECT_EQ(rep.mean_delta, 0.0);
  std::istringstream emb(slurp(dir / "emb.csv"));
  std::size_t n = 0;
  for (std::string l; std::getline(emb, l);) ++n;
  EXPECT_EQ(n, build_vocab().size() + 1);
}

TEST(Analyze, AllTokensIncludesFillers) {
  auto& w = Workspace::get();
  TempDir dir("analyze");
  ASSERT_EQ(cli({"analyze", "--ckpt-a", w.ckpt().string(), "--ckpt-b", w.ckpt().string(), "--corpus",
                 w.corpus().string(), "--samples", "2", "--all-tokens", "--out", (dir / "r.csv").string()})
                .code,
            0);
  const AnalysisReport rep = read_report_csv(dir / "r.csv");
  bool filler = false;
  for (const auto& row : rep.rows) filler |= row.role == "filler";
  EXPECT_TRUE(filler);
}

TEST(Report, CsvRoundTripAndSummary) {
  AnalysisReport rep;
  rep.rows.push_back({"red", "color", 10, 0.25, 1.0, 3.0, 2.0});
  rep.rows.push_back({"bar", "shape", 4, std::nullopt, 2.0, 1.5, -0.5});
  rep.rows.push_back({"static", "motion", 7, 1.0, 0.5, 0.75, 0.25});
  summarize(rep);
  EXPECT_DOUBLE_EQ(rep.fraction_improved, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(rep.mean_delta, 1.75 / 3.0);
  TempDir dir("report");
  write_report_csv(rep, dir / "r.csv");
  const AnalysisReport back = read_report_csv(dir / "r.csv");
  ASSERT_EQ(back.rows.size(), 3u);
  EXPECT_EQ(back.rows[1].token, "bar");
  EXPECT_FALSE(back.rows[1].weight.has_value());
  EXPECT_EQ(back.rows[0].weight, 0.25);
  EXPECT_EQ(back.fraction_improved, rep.fraction_improved);
  EXPECT_EQ(back.mean_delta, rep.mean_delta);
  EXPECT_EQ(back.mean_score_b, rep.mean_score_b);
}

TEST(Ppm, RoundTripsQuantizedValues) {
  Tensor g({2, 3, 2, 3});
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<double>(i % 7) / 6.0 * 1.4 - 0.2;
  const PpmImage img = decode_ppm(encode_ppm(g, 1));
  ASSERT_EQ(img.width, 2u);
  ASSERT_EQ(img.height, 3u);
  ASSERT_EQ(img.rgb.size(), 18u);
  for (std::size_t i = 0; i < 18; ++i) {
    const double v = std::clamp(g[18 + i], 0.0, 1.0);
    EXPECT_NEAR(img.rgb[i] / 255.0, v, 0.5 / 255.0 + 1e-12);
  }
  EXPECT_THROW(decode_ppm("P3\n1 1\n255\n"), ParseError);
  EXPECT_THROW(decode_ppm("P6\n2 2\n255\nabc"), ParseError);
}
