#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "darelab/corpus/corpus.hpp"
#include "darelab/model/model.hpp"

namespace darelab {

// Exit codes shared by every command.
enum ExitCode : int { kExitOk = 0, kExitUsage = 2, kExitIo = 3, kExitNumerical = 4 };

// Maps a library exception to its exit code.
int exit_code_for(const std::exception& e);

struct GenCorpusOptions {
  std::size_t size = 0;
  double zipf_s = 1.1;
  std::uint64_t seed = 0;
  double noise = 0.05;
  std::filesystem::path out;
};
void cmd_gen_corpus(const GenCorpusOptions& opts, std::ostream& log);

struct TrainOptions {
  std::filesystem::path config;
  std::optional<std::string> mode;
  std::filesystem::path out;
  std::optional<std::filesystem::path> resume;
};
void cmd_train(const TrainOptions& opts, std::ostream& log);

struct SampleOptions {
  std::filesystem::path ckpt;
  std::string prompt;
  std::size_t steps = 40;
  double cfg_scale = 5.0;
  std::uint64_t seed = 0;
  std::filesystem::path out;
};
// Writes grid.bin (raw little-endian float64, frames x height x width x
// channels), frame_<f>.ppm and run.json into opts.out.
void cmd_sample(const SampleOptions& opts, std::ostream& log);

struct EvalReport {
  std::size_t n = 0;
  double color = 0.0;
  double position = 0.0;
  double motion = 0.0;
  double all = 0.0;
  std::vector<std::string> captions;
  std::vector<SemanticCheck> checks;
};

struct EvalOptions {
  std::filesystem::path ckpt;
  std::size_t n = 200;
  std::uint64_t seed = 0;
  std::size_t steps = 40;
  double cfg_scale = 5.0;
  std::filesystem::path out;  // eval.json; defaults to <ckpt>/eval.json
};
EvalReport evaluate(const ModelParams& params, const Vocab& vocab, std::size_t n, std::uint64_t seed, std::size_t steps,
                    double cfg_scale);
EvalReport cmd_eval(const EvalOptions& opts, std::ostream& log);

// 100 x mean over layers, heads and queries of the attention paid to text
// position token_index, from a gradient-free forward at t_probe.
double attention_score(const ModelParams& params, const Caption& caption, const Tensor& grid, std::size_t token_index,
                       double t_probe = 0.0);

struct AnalysisRow {
  std::string token;
  std::string role;
  std::uint64_t count = 0;
  std::optional<double> weight;
  double score_a = 0.0;
  double score_b = 0.0;
  double delta = 0.0;
};

struct AnalysisReport {
  std::vector<AnalysisRow> rows;
  double fraction_improved = 0.0;
  double mean_delta = 0.0;
  double mean_score_a = 0.0;
  double mean_score_b = 0.0;
};

// Fills the summary fields from the rows.
void summarize(AnalysisReport& report);

struct AnalyzeOptions {
  std::filesystem::path ckpt_a;
  std::filesystem::path ckpt_b;
  std::filesystem::path corpus;
  std::filesystem::path out;
  std::optional<std::filesystem::path> embeddings;
  std::size_t samples_per_token = 50;
  bool all_tokens = false;
};
AnalysisReport cmd_analyze(const AnalyzeOptions& opts, std::ostream& log);

void write_report_csv(const AnalysisReport& report, const std::filesystem::path& path);
AnalysisReport read_report_csv(const std::filesystem::path& path);

// Cosine similarity of every pair of token embedding rows.
Tensor embedding_similarity(const ModelParams& params);

// P6, values clamped to [0, 1] and scaled to 0..255. Frame f of a grid with
// at least 3 channels; the first three channels become R, G, B.
std::string encode_ppm(const Tensor& grid, std::size_t frame);
struct PpmImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;
};
PpmImage decode_ppm(const std::string& bytes);

// Parses argv and dispatches. Errors are reported on err and mapped to exit codes.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace darelab
