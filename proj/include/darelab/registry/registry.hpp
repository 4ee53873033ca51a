#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "darelab/corpus/vocab.hpp"
#include "darelab/model/model.hpp"

namespace darelab {

struct TokenStats {
  int token_id = 0;
  double loss_sum = 0.0;
  std::uint64_t count = 0;
  friend bool operator==(const TokenStats&, const TokenStats&) = default;
};

// loss_sum / (count ln(1 + count)). DomainError when count is 0.
double weight(const TokenStats& stats);

struct MaskConfig {
  double kappa = 1.0;  // cells pass at field >= kappa * mean(field)
  void validate() const;
};

// Mean over layers and heads of the attention each visual query pays to text
// position j, shaped frames x height x width.
Tensor token_attention_field(const std::vector<AttnCapture>& captures, std::size_t j, const GridDims& dims);

// Binary morphology on one frame (height x width, 0/1 values) with a 3x3
// square. Cells beyond the border count as 0. Closing runs on the frame
// padded by one cell, so a dilation that reaches past the edge is eroded
// back as it would be on an unbounded grid.
std::vector<std::uint8_t> erode(const std::vector<std::uint8_t>& m, std::size_t h, std::size_t w);
std::vector<std::uint8_t> dilate(const std::vector<std::uint8_t>& m, std::size_t h, std::size_t w);
std::vector<std::uint8_t> binary_open(const std::vector<std::uint8_t>& m, std::size_t h, std::size_t w);
std::vector<std::uint8_t> binary_close(const std::vector<std::uint8_t>& m, std::size_t h, std::size_t w);

// Mean threshold, then opening and closing per frame. Returns 0/1 values.
Tensor morphological_mask(const Tensor& field, const MaskConfig& cfg = {});

// Per caption position: sum of field * mask * residual over all grid
// elements divided by their count. Null-flagged positions get 0.
std::vector<double> attribute_losses(const std::vector<AttnCapture>& captures, const Tensor& residual,
                                     const Condition& cond, const MaskConfig& cfg = {});

class Registry {
 public:
  Registry() = default;
  explicit Registry(const Vocab& vocab);

  const Vocab& vocab() const { return vocab_; }
  const TokenStats& stats(int token_id) const;
  const std::vector<TokenStats>& all() const { return stats_; }

  // Adds contribution[i] and one occurrence for every position that is not
  // null-flagged and does not hold the null token.
  void update(const Condition& cond, const std::vector<double>& contributions);
  // Direct write, used when loading.
  void set(const TokenStats& stats);

  friend bool operator==(const Registry& a, const Registry& b) { return a.stats_ == b.stats_; }

 private:
  Vocab vocab_;
  std::vector<TokenStats> stats_;
};

// Kept set S: the ceil(rho * K) lowest-weight positions among the K usable
// ones. Unseen tokens are never chosen; ties go to the lower token id, then
// the lower position. Returned in increasing position order, possibly empty.
std::vector<std::size_t> select_low_semantic(const Registry& registry, const Condition& cond, double rho);

void save_registry(const Registry& registry, const std::filesystem::path& path);
Registry load_registry(const std::filesystem::path& path, const Vocab& vocab);

}  // namespace darelab
