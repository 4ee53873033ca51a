#include "darelab/corpus/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "darelab/error.hpp"

namespace darelab {

namespace {

struct ColorDef {
  std::string_view name;
  std::array<double, 3> rgb;
};

constexpr std::array<ColorDef, 4> kColors{{
    {"red", {1, 0, 0}},
    {"green", {0, 1, 0}},
    {"blue", {0, 0, 1}},
    {"yellow", {1, 1, 0}},
}};

constexpr std::array<std::pair<std::string_view, ShapeKind>, 4> kShapes{{
    {"circle", ShapeKind::circle},
    {"square", ShapeKind::square},
    {"cross", ShapeKind::cross},
    {"bar", ShapeKind::bar},
}};

constexpr std::array<std::pair<std::string_view, Quadrant>, 4> kQuadrants{{
    {"topleft", Quadrant::top_left},
    {"topright", Quadrant::top_right},
    {"bottomleft", Quadrant::bottom_left},
    {"bottomright", Quadrant::bottom_right},
}};

constexpr std::array<std::pair<std::string_view, int>, 3> kMotions{{
    {"static", 0},
    {"driftright", 1},
    {"driftleft", -1},
}};

template <class Table>
auto lookup(const Table& table, const std::string& name, std::string_view role) {
  for (const auto& entry : table) {
    if (entry.first == name) return entry.second;
  }
  throw ConfigError("renderer has no meaning for " + std::string(role) + " token '" + name + "'");
}

struct QuadrantBox {
  std::size_t row0, col0, rows, cols;
};

QuadrantBox quadrant_box(Quadrant q, const GridDims& dims) {
  const std::size_t hr = dims.height / 2;
  const std::size_t hc = dims.width / 2;
  const bool bottom = q == Quadrant::bottom_left || q == Quadrant::bottom_right;
  const bool right = q == Quadrant::top_right || q == Quadrant::bottom_right;
  return {bottom ? hr : 0, right ? hc : 0, bottom ? dims.height - hr : hr, right ? dims.width - hc : hc};
}

void require_renderable(const GridDims& dims) {
  if (dims.height < 4 || dims.width < 4 || dims.height % 2 || dims.width % 2 || dims.channels < 3 ||
      dims.frames < 1) {
    throw DimensionError("grid needs even height/width >= 4 and at least 3 channels");
  }
}

// Zipf over ranks 1..n with exponent s, by inversion of the cumulative table.
std::size_t zipf_rank(Rng& rng, std::size_t n, double s) {
  std::vector<double> cdf(n);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    total += std::pow(static_cast<double>(r + 1), -s);
    cdf[r] = total;
  }
  const double u = rng.uniform() * total;
  const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  return std::min(static_cast<std::size_t>(it - cdf.begin()), n - 1);
}

}  // namespace

Caption make_caption(const Vocab& vocab, std::vector<int> token_ids) {
  Caption c;
  c.token_ids = std::move(token_ids);
  std::string text;
  for (int id : c.token_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size()) {
      throw IndexError("token id " + std::to_string(id) + " outside vocab");
    }
    c.roles.push_back(vocab.role(id));
    if (!text.empty()) text += ' ';
    text += vocab.str(id);
  }
  c.text = std::move(text);
  return c;
}

Caption parse_caption(const Vocab& vocab, const std::string& text) {
  std::istringstream in(text);
  std::string word;
  std::vector<int> ids;
  std::vector<std::string> unknown;
  while (in >> word) {
    if (auto id = vocab.find(word)) {
      ids.push_back(*id);
    } else {
      unknown.push_back(word);
    }
  }
  if (!unknown.empty()) {
    std::string list;
    for (const auto& u : unknown) list += (list.empty() ? "" : ", ") + u;
    throw ParseError("unknown tokens: " + list);
  }
  if (ids.empty()) throw ParseError("empty prompt");
  return make_caption(vocab, std::move(ids));
}

Caption sample_caption(Rng& rng, const Vocab& vocab, const CaptionConfig& config) {
  if (!(config.zipf_s > 0.0)) throw DomainError("zipf_s must be positive");
  if (config.fill_min < 0 || config.fill_max < config.fill_min) throw ConfigError("invalid filler count range");
  if (4 + static_cast<std::size_t>(config.fill_max) > config.k_max) {
    throw ConfigError("filler count range exceeds k_max");
  }
  std::vector<int> ids;
  for (Role r : {Role::color, Role::shape, Role::position, Role::motion}) {
    const auto& m = vocab.members(r);
    ids.push_back(m[rng.uniform_int(0, m.size() - 1)]);
  }
  const auto n_fill = rng.uniform_int(static_cast<std::uint64_t>(config.fill_min),
                                      static_cast<std::uint64_t>(config.fill_max));
  const auto& fillers = vocab.members(Role::filler);
  for (std::uint64_t i = 0; i < n_fill; ++i) {
    const int tok = fillers[zipf_rank(rng, fillers.size(), config.zipf_s)];
    const auto pos = rng.uniform_int(0, ids.size());
    ids.insert(ids.begin() + static_cast<std::ptrdiff_t>(pos), tok);
  }
  return make_caption(vocab, std::move(ids));
}

Caption sample_caption(Rng& rng, const Vocab& vocab, double zipf_s) {
  CaptionConfig config;
  config.zipf_s = zipf_s;
  return sample_caption(rng, vocab, config);
}

Semantics caption_semantics(const Vocab& vocab, const Caption& caption) {
  Semantics s;
  bool seen[4] = {false, false, false, false};
  for (std::size_t i = 0; i < caption.size(); ++i) {
    const int id = caption.token_ids[i];
    const std::string& name = vocab.str(id);
    switch (vocab.role(id)) {
      case Role::color: {
        bool found = false;
        for (std::size_t c = 0; c < kColors.size(); ++c) {
          if (kColors[c].name == name) {
            s.color = kColors[c].rgb;
            s.color_index = static_cast<int>(c);
            found = true;
          }
        }
        if (!found) throw ConfigError("renderer has no meaning for color token '" + name + "'");
        seen[0] = true;
        break;
      }
      case Role::shape:
        s.shape = lookup(kShapes, name, "shape");
        seen[1] = true;
        break;
      case Role::position:
        s.position = lookup(kQuadrants, name, "position");
        seen[2] = true;
        break;
      case Role::motion:
        s.motion_dx = lookup(kMotions, name, "motion");
        seen[3] = true;
        break;
      default:
        break;
    }
  }
  if (!(seen[0] && seen[1] && seen[2] && seen[3])) {
    throw DomainError("caption '" + caption.text + "' lacks a content role");
  }
  return s;
}

std::vector<std::uint8_t> shape_mask(ShapeKind shape, Quadrant quadrant, const GridDims& dims) {
  require_renderable(dims);
  const QuadrantBox box = quadrant_box(quadrant, dims);
  std::vector<std::uint8_t> mask(dims.height * dims.width, 0);
  auto set = [&](std::size_t r, std::size_t c) { mask[r * dims.width + c] = 1; };
  // Anchor cell for the odd-sized shapes: the upper-left of the central cells.
  const std::size_t ar = box.row0 + (box.rows - 1) / 2;
  const std::size_t ac = box.col0 + (box.cols - 1) / 2;
  switch (shape) {
    case ShapeKind::circle: {
      const double cr = static_cast<double>(box.row0) + (static_cast<double>(box.rows) - 1.0) / 2.0;
      const double cc = static_cast<double>(box.col0) + (static_cast<double>(box.cols) - 1.0) / 2.0;
      for (std::size_t r = box.row0; r < box.row0 + box.rows; ++r) {
        for (std::size_t c = box.col0; c < box.col0 + box.cols; ++c) {
          const double dr = static_cast<double>(r) - cr;
          const double dc = static_cast<double>(c) - cc;
          if (dr * dr + dc * dc <= 4.0) set(r, c);
        }
      }
      break;
    }
    case ShapeKind::square:
      for (std::size_t r = ar - 1; r <= ar + 1; ++r) {
        for (std::size_t c = ac - 1; c <= ac + 1; ++c) set(r, c);
      }
      break;
    case ShapeKind::cross:
      set(ar, ac);
      set(ar - 1, ac);
      set(ar + 1, ac);
      set(ar, ac - 1);
      set(ar, ac + 1);
      break;
    case ShapeKind::bar:
      for (std::size_t c = box.col0; c < box.col0 + box.cols; ++c) set(ar, c);
      break;
  }
  return mask;
}

Tensor render(const Vocab& vocab, const Caption& caption, Rng& rng, double noise_sigma, const GridDims& dims) {
  require_renderable(dims);
  const Semantics sem = caption_semantics(vocab, caption);
  const auto mask = shape_mask(sem.shape, sem.position, dims);
  Tensor grid(dims.shape());
  const std::size_t H = dims.height, W = dims.width, D = dims.channels;
  for (std::size_t f = 0; f < dims.frames; ++f) {
    const long shift = static_cast<long>(f) * sem.motion_dx;
    for (std::size_t r = 0; r < H; ++r) {
      for (std::size_t c = 0; c < W; ++c) {
        if (!mask[r * W + c]) continue;
        const long nc = static_cast<long>(c) + shift;
        if (nc < 0 || nc >= static_cast<long>(W)) continue;
        double* cell = grid.data().data() + ((f * H + r) * W + static_cast<std::size_t>(nc)) * D;
        for (std::size_t ch = 0; ch < 3; ++ch) cell[ch] = sem.color[ch];
      }
    }
  }
  if (noise_sigma > 0.0) {
    for (auto& v : grid.data()) v = std::clamp(v + noise_sigma * rng.normal(), -0.5, 1.5);
  }
  return grid;
}

SemanticCheck semantic_check(const Tensor& grid, const Vocab& vocab, const Caption& caption) {
  if (grid.rank() != 4) throw DimensionError("semantic_check expects a 4-D grid");
  const GridDims dims{grid.dim(0), grid.dim(1), grid.dim(2), grid.dim(3)};
  require_renderable(dims);
  const Semantics sem = caption_semantics(vocab, caption);
  const std::size_t H = dims.height, W = dims.width, D = dims.channels;
  auto at = [&](std::size_t f, std::size_t r, std::size_t c, std::size_t ch) {
    return std::abs(grid[((f * H + r) * W + c) * D + ch]);
  };

  SemanticCheck out;

  // Position: quadrant with the most absolute energy; ties go to the first.
  const std::array<Quadrant, 4> quads{Quadrant::top_left, Quadrant::top_right, Quadrant::bottom_left,
                                      Quadrant::bottom_right};
  Quadrant best = quads[0];
  double best_energy = -1.0;
  for (Quadrant q : quads) {
    const QuadrantBox b = quadrant_box(q, dims);
    double e = 0.0;
    for (std::size_t f = 0; f < dims.frames; ++f)
      for (std::size_t r = b.row0; r < b.row0 + b.rows; ++r)
        for (std::size_t c = b.col0; c < b.col0 + b.cols; ++c)
          for (std::size_t ch = 0; ch < D; ++ch) e += at(f, r, c, ch);
    if (e > best_energy) {
      best_energy = e;
      best = q;
    }
  }
  out.position_ok = best == sem.position;
  const QuadrantBox box = quadrant_box(best, dims);

  // Color: the set of channels above half the strongest one must equal the
  // caption color's channels, and each of those must beat every other
  // channel by 2x (so yellow needs ch0 and ch1 > 2 * ch2).
  std::array<double, 3> e{0, 0, 0};
  for (std::size_t f = 0; f < dims.frames; ++f)
    for (std::size_t r = box.row0; r < box.row0 + box.rows; ++r)
      for (std::size_t c = box.col0; c < box.col0 + box.cols; ++c)
        for (std::size_t ch = 0; ch < 3; ++ch) e[ch] += at(f, r, c, ch);
  const double emax = std::max({e[0], e[1], e[2]});
  bool color_ok = emax > 0.0;
  for (std::size_t a = 0; a < 3 && color_ok; ++a) {
    const bool expected = sem.color[a] > 0.5;
    const bool dominant = e[a] > 0.5 * emax;
    if (expected != dominant) color_ok = false;
    if (!expected) continue;
    for (std::size_t b = 0; b < 3; ++b) {
      if (sem.color[b] < 0.5 && !(e[a] > 2.0 * e[b])) color_ok = false;
    }
  }
  out.color_ok = color_ok;

  // Motion: mean frame-to-frame shift of the column centroid inside the
  // winning quadrant.
  std::vector<double> centroid(dims.frames, 0.0);
  std::vector<bool> valid(dims.frames, false);
  for (std::size_t f = 0; f < dims.frames; ++f) {
    double mass = 0.0, moment = 0.0;
    for (std::size_t r = box.row0; r < box.row0 + box.rows; ++r)
      for (std::size_t c = box.col0; c < box.col0 + box.cols; ++c)
        for (std::size_t ch = 0; ch < D; ++ch) {
          const double v = at(f, r, c, ch);
          mass += v;
          moment += v * static_cast<double>(c);
        }
    if (mass > 0.0) {
      centroid[f] = moment / mass;
      valid[f] = true;
    }
  }
  double shift = 0.0;
  std::size_t steps = 0;
  for (std::size_t f = 1; f < dims.frames; ++f) {
    if (valid[f] && valid[f - 1]) {
      shift += centroid[f] - centroid[f - 1];
      ++steps;
    }
  }
  if (steps) shift /= static_cast<double>(steps);
  if (sem.motion_dx == 0) {
    out.motion_ok = std::abs(shift) < 0.25;
  } else if (sem.motion_dx > 0) {
    out.motion_ok = shift >= 0.25;
  } else {
    out.motion_ok = shift <= -0.25;
  }
  return out;
}

std::vector<Sample> generate_samples(const Vocab& vocab, std::size_t count, std::uint64_t seed,
                                     const CaptionConfig& captions, double noise_sigma, const GridDims& dims) {
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = Rng::derive(seed, i);
    Caption c = sample_caption(rng, vocab, captions);
    Tensor g = render(vocab, c, rng, noise_sigma, dims);
    out.push_back({std::move(c), std::move(g)});
  }
  return out;
}

}  // namespace darelab
