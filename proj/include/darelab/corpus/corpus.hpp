#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "darelab/corpus/vocab.hpp"
#include "darelab/numerics/rng.hpp"
#include "darelab/numerics/tensor.hpp"

namespace darelab {

struct GridDims {
  std::size_t frames = 2;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t channels = 3;

  Shape shape() const { return {frames, height, width, channels}; }
  std::size_t cells() const { return frames * height * width; }
  std::size_t elements() const { return cells() * channels; }
  friend bool operator==(const GridDims&, const GridDims&) = default;
};

struct Caption {
  std::vector<int> token_ids;
  std::vector<Role> roles;
  std::string text;

  std::size_t size() const { return token_ids.size(); }
  friend bool operator==(const Caption&, const Caption&) = default;
};

struct Sample {
  Caption caption;
  Tensor grid;  // frames x height x width x channels
};

struct CaptionConfig {
  double zipf_s = 1.1;
  // Number of filler tokens per caption, drawn uniformly from [fill_min, fill_max].
  int fill_min = 2;
  int fill_max = 6;
  std::size_t k_max = 16;
};

// Builds a caption from ids, filling roles and text from the vocab.
Caption make_caption(const Vocab& vocab, std::vector<int> token_ids);
// Whitespace tokenization. Unknown tokens raise ParseError listing all of them.
Caption parse_caption(const Vocab& vocab, const std::string& text);

// One uniform draw per content role (kept in color, shape, position, motion
// order) with Zipf-ranked fillers inserted at random positions.
Caption sample_caption(Rng& rng, const Vocab& vocab, const CaptionConfig& config);
Caption sample_caption(Rng& rng, const Vocab& vocab, double zipf_s);

enum class ShapeKind { circle, square, cross, bar };
enum class Quadrant { top_left, top_right, bottom_left, bottom_right };

struct Semantics {
  std::array<double, 3> color{};  // unit channel pattern
  int color_index = 0;
  ShapeKind shape = ShapeKind::circle;
  Quadrant position = Quadrant::top_left;
  int motion_dx = 0;  // columns per frame
};

// Reads the content tokens of a caption. ConfigError for content names the
// renderer does not know; DomainError when a content role is missing.
Semantics caption_semantics(const Vocab& vocab, const Caption& caption);

// Binary shape mask [height x width] for frame 0 (before motion).
std::vector<std::uint8_t> shape_mask(ShapeKind shape, Quadrant quadrant, const GridDims& dims);

Tensor render(const Vocab& vocab, const Caption& caption, Rng& rng, double noise_sigma = 0.05,
              const GridDims& dims = {});

struct SemanticCheck {
  bool color_ok = false;
  bool position_ok = false;
  bool motion_ok = false;
  bool all() const { return color_ok && position_ok && motion_ok; }
};

SemanticCheck semantic_check(const Tensor& grid, const Vocab& vocab, const Caption& caption);

// Sample i is drawn from Rng::derive(seed, i), so any subset can be
// regenerated independently.
std::vector<Sample> generate_samples(const Vocab& vocab, std::size_t count, std::uint64_t seed,
                                     const CaptionConfig& captions = {}, double noise_sigma = 0.05,
                                     const GridDims& dims = {});

struct Corpus {
  GridDims dims;
  Vocab vocab;
  std::vector<Sample> samples;
  bool has_header = false;
};

void write_corpus(const std::filesystem::path& path, const Corpus& corpus);
Corpus read_corpus(const std::filesystem::path& path);

// Little-endian float64 bytes, base64 encoded.
std::string encode_grid(const Tensor& grid);
Tensor decode_grid(const std::string& b64, const Shape& shape);

}  // namespace darelab
