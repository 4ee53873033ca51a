#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "darelab/corpus/corpus.hpp"
#include "darelab/dare/losses.hpp"
#include "darelab/dare/optim.hpp"
#include "darelab/model/checkpoint.hpp"
#include "darelab/registry/registry.hpp"

namespace darelab {

enum class TrainMode { baseline, dr, sra, dare };

std::string_view mode_name(TrainMode mode);
TrainMode parse_mode(std::string_view name);

struct TrainConfig {
  TrainMode mode = TrainMode::baseline;
  std::string corpus;  // path, relative paths resolve against the config file
  std::uint64_t total_iters = 5000;
  std::size_t batch_size = 16;
  double lr = 1.5e-4;
  std::uint64_t warmup_iters = 500;
  AdamConfig adam;
  std::uint64_t seed = 0;
  DrCfgConfig dr;
  SraConfig sra;
  std::optional<double> hbar;  // default 0.4 * total_iters
  double slope = 0.001;
  MaskConfig mask;
  std::uint64_t checkpoint_every = 1000;
  std::uint64_t log_every = 0;  // progress lines on stderr, 0 disables
  bool attribution_log = false;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t mlp_ratio = 4;
  std::size_t k_max = 16;
  bool text_pos_enc = true;

  ScheduleConfig schedule() const;
  ModelDims model_dims(const Vocab& vocab, const GridDims& grid) const;
  void validate() const;
  // Flat key = value text, one setting per line.
  std::string to_text() const;
};

// '#' starts a comment. Unknown keys and malformed values raise ConfigError.
TrainConfig parse_train_config(std::string_view text);
TrainConfig load_train_config(const std::filesystem::path& path);

struct StepMetrics {
  std::uint64_t iter = 0;
  TrainMode mode = TrainMode::baseline;
  std::optional<double> alpha;
  double lr = 0.0;
  double grad_norm = 0.0;
  double loss_total = 0.0;
  double loss_fm = 0.0;
  std::optional<double> loss_dr;
  std::optional<double> loss_sra;
  std::size_t dr_fallbacks = 0;  // samples whose L_dr fell back to L_fm
  std::size_t sra_skips = 0;     // samples with no seen token for SRA
};

std::string metrics_header();
std::string metrics_row(const StepMetrics& m);

// One record per registry update: iter, sample slot, caption position, token id, contribution.
struct AttributionRecord {
  std::uint64_t iter = 0;
  std::size_t sample = 0;
  std::size_t position = 0;
  int token_id = 0;
  double contribution = 0.0;
};
std::string attribution_header();
std::string attribution_row(const AttributionRecord& r);

struct TrainState {
  TrainConfig cfg;
  ModelParams params;
  AdamState adam;
  Registry registry;
  std::uint64_t step = 0;  // completed iterations
};

TrainState init_train_state(const TrainConfig& cfg, const Corpus& corpus);

// Batch composition and per-sample noise for iteration iter depend only on
// (seed, iter), so a resumed run sees the same data as an uninterrupted one.
std::vector<std::size_t> batch_indices(std::uint64_t seed, std::uint64_t iter, std::size_t batch, std::size_t corpus_size);

using AttributionSink = std::function<void(const AttributionRecord&)>;

// One optimisation step on the given samples. iter is 1-based.
StepMetrics train_step(TrainState& state, std::span<const Sample* const> batch, std::uint64_t iter,
                       const AttributionSink& sink = nullptr);

Checkpoint make_checkpoint(const TrainState& state);
// Writes the checkpoint plus registry.json and config.txt into dir.
void save_train_state(const TrainState& state, const std::filesystem::path& dir);
TrainState load_train_state(const TrainConfig& cfg, const Corpus& corpus, const std::filesystem::path& dir);

struct TrainRunOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume_from;
  std::ostream* progress = nullptr;
};

// Full loop: metrics.csv, checkpoints/step_<N> every checkpoint_every
// iterations, final/ and registry.json in out_dir. With resume_from, training
// continues after the checkpoint's step and metrics.csv keeps earlier rows.
TrainState run_training(const TrainConfig& cfg, const Corpus& corpus, const TrainRunOptions& opts);

}  // namespace darelab
