#include "darelab/registry/registry.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <tuple>

#include "darelab/error.hpp"

namespace darelab {

double weight(const TokenStats& stats) {
  if (stats.count == 0) {
    throw DomainError("weight undefined for token " + std::to_string(stats.token_id) + " with zero occurrences");
  }
  const double n = static_cast<double>(stats.count);
  return stats.loss_sum / (n * std::log1p(n));
}

void MaskConfig::validate() const {
  if (!(kappa > 0.0)) throw ConfigError("mask kappa must be positive");
}

Tensor token_attention_field(const std::vector<AttnCapture>& captures, std::size_t j, const GridDims& dims) {
  if (captures.empty()) throw DimensionError("token_attention_field: no captures");
  const std::size_t nq = dims.cells();
  Tensor field({dims.frames, dims.height, dims.width});
  std::size_t maps = 0;
  for (const auto& cap : captures) {
    const Tensor& a = cap.a_text;
    if (a.rank() != 3 || a.dim(1) != nq) {
      throw DimensionError("token_attention_field: capture shape " + shape_str(a.shape()) + " does not match " +
                           std::to_string(nq) + " queries");
    }
    const std::size_t k = a.dim(2);
    if (j >= k) {
      throw IndexError("token index " + std::to_string(j) + " out of range for " + std::to_string(k) + " tokens");
    }
    for (std::size_t h = 0; h < a.dim(0); ++h) {
      const double* base = a.data().data() + h * nq * k;
      for (std::size_t q = 0; q < nq; ++q) field[q] += base[q * k + j];
      ++maps;
    }
  }
  const double inv = 1.0 / static_cast<double>(maps);
  for (auto& v : field.data()) v *= inv;
  return field;
}

namespace {

template <bool Erode>
std::vector<std::uint8_t> morph(const std::vector<std::uint8_t>& m, std::size_t h, std::size_t w) {
  if (m.size() != h * w) throw DimensionError("morphology: mask size differs from height x width");
  std::vector<std::uint8_t> out(m.size());
  const auto H = static_cast<std::ptrdiff_t>(h);
  const auto W = static_cast<std::ptrdiff_t>(w);
  for (std::ptrdiff_t r = 0; r < H; ++r) {
    for (std::ptrdiff_t c = 0; c < W; ++c) {
      bool v = Erode;
      for (std::ptrdiff_t dr = -1; dr <= 1; ++dr) {
        for (std::ptrdiff_t dc = -1; dc <= 1; ++dc) {
          const auto rr = r + dr;
          const auto cc = c + dc;
          const bool on = rr >= 0 && rr < H && cc >= 0 && cc < W && m[static_cast<std::size_t>(rr * W + cc)] != 0;
          if (Erode) {
            v = v && on;
          } else {
            v = v || on;
          }
        }
      }
      out[static_cast<std::size_t>(r * W + c)] = v ? 1 : 0;
    }
  }
  return out;
}

}  // namespace

std::vector<std::uint8_t> erode(const std::vector<std::uint8_t>& m, std::size_t h, std::size_t w) {
  return morph<true>(m, h, w);
}

std::vector<std::uint8_t> dilate(const std::vector<std::uint8_t>& m, std::size_t h, std::size_t w) {
  return morph<false>(m, h, w);
}

std::vector<std::uint8_t> binary_open(const std::vector<std::uint8_t>& m, std::size_t h, std::size_t w) {
  return dilate(erode(m, h, w), h, w);
}

std::vector<std::uint8_t> binary_close(const std::vector<std::uint8_t>& m, std::size_t h, std::size_t w) {
  if (m.size() != h * w) throw DimensionError("morphology: mask size differs from height x width");
  // The dilation may spill one cell past the edge; keep that ring so the
  // erosion sees it, then crop.
  const std::size_t ph = h + 2, pw = w + 2;
  std::vector<std::uint8_t> pad(ph * pw, 0);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) pad[(r + 1) * pw + c + 1] = m[r * w + c];
  }
  const auto closed = erode(dilate(pad, ph, pw), ph, pw);
  std::vector<std::uint8_t> out(h * w);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = closed[(r + 1) * pw + c + 1];
  }
  return out;
}

Tensor morphological_mask(const Tensor& field, const MaskConfig& cfg) {
  cfg.validate();
  if (field.rank() != 3) throw DimensionError("morphological_mask expects frames x height x width");
  const std::size_t frames = field.dim(0);
  const std::size_t h = field.dim(1);
  const std::size_t w = field.dim(2);
  const double threshold = cfg.kappa * mean(field);
  Tensor out(field.shape());
  for (std::size_t f = 0; f < frames; ++f) {
    std::vector<std::uint8_t> m(h * w);
    for (std::size_t i = 0; i < h * w; ++i) m[i] = field[f * h * w + i] >= threshold ? 1 : 0;
    m = binary_close(binary_open(m, h, w), h, w);
    for (std::size_t i = 0; i < h * w; ++i) out[f * h * w + i] = m[i];
  }
  return out;
}

std::vector<double> attribute_losses(const std::vector<AttnCapture>& captures, const Tensor& residual,
                                     const Condition& cond, const MaskConfig& cfg) {
  if (residual.rank() != 4) throw DimensionError("attribute_losses: residual must be frames x height x width x channels");
  const GridDims dims{residual.dim(0), residual.dim(1), residual.dim(2), residual.dim(3)};
  if (cond.null_flags.size() != cond.size()) throw DimensionError("attribute_losses: null flags length mismatch");
  for (const auto& cap : captures) {
    if (cap.a_text.rank() != 3 || cap.a_text.dim(2) != cond.size()) {
      throw DimensionError("attribute_losses: capture has " +
                           (cap.a_text.rank() == 3 ? std::to_string(cap.a_text.dim(2)) : std::string("no")) +
                           " token columns, caption has " + std::to_string(cond.size()));
    }
  }
  const std::size_t cells = dims.cells();
  const std::size_t ch = dims.channels;
  // Residual summed over channels, since field and mask are constant along them.
  std::vector<double> cell_residual(cells);
  for (std::size_t q = 0; q < cells; ++q) {
    double s = 0.0;
    for (std::size_t d = 0; d < ch; ++d) s += residual[q * ch + d];
    cell_residual[q] = s;
  }
  const double denom = static_cast<double>(dims.elements());
  std::vector<double> out(cond.size(), 0.0);
  for (std::size_t j = 0; j < cond.size(); ++j) {
    if (cond.null_flags[j]) continue;
    const Tensor field = token_attention_field(captures, j, dims);
    const Tensor mask = morphological_mask(field, cfg);
    double s = 0.0;
    for (std::size_t q = 0; q < cells; ++q) {
      if (mask[q] != 0.0) s += field[q] * cell_residual[q];
    }
    out[j] = s / denom;
  }
  return out;
}

Registry::Registry(const Vocab& vocab) : vocab_(vocab), stats_(vocab.size()) {
  for (std::size_t i = 0; i < stats_.size(); ++i) stats_[i].token_id = static_cast<int>(i);
}

const TokenStats& Registry::stats(int token_id) const {
  if (token_id < 0 || static_cast<std::size_t>(token_id) >= stats_.size()) {
    throw IndexError("token id " + std::to_string(token_id) + " outside registry");
  }
  return stats_[static_cast<std::size_t>(token_id)];
}

void Registry::update(const Condition& cond, const std::vector<double>& contributions) {
  if (contributions.size() != cond.size() || cond.null_flags.size() != cond.size()) {
    throw DimensionError("registry update: contributions not aligned with caption positions");
  }
  for (std::size_t i = 0; i < cond.size(); ++i) {
    const int id = cond.token_ids[i];
    if (cond.null_flags[i] || id == vocab_.null_id()) continue;
    if (!(contributions[i] >= 0.0) || !std::isfinite(contributions[i])) {
      throw NumericalError("registry update: bad contribution " + std::to_string(contributions[i]) + " for '" +
                           vocab_.str(id) + "'");
    }
    (void)stats(id);
    TokenStats& s = stats_[static_cast<std::size_t>(id)];
    s.loss_sum += contributions[i];
    s.count += 1;
  }
}

void Registry::set(const TokenStats& st) {
  (void)stats(st.token_id);
  if (st.token_id == vocab_.null_id() && st.count > 0) throw IntegrityError("null token cannot carry statistics");
  if (st.count == 0 && st.loss_sum != 0.0) throw IntegrityError("token with zero count has nonzero loss sum");
  if (!(st.loss_sum >= 0.0)) throw IntegrityError("negative loss sum");
  stats_[static_cast<std::size_t>(st.token_id)] = st;
}

std::vector<std::size_t> select_low_semantic(const Registry& registry, const Condition& cond, double rho) {
  if (!(rho > 0.0 && rho < 1.0)) throw ConfigError("rho must lie in (0, 1), got " + std::to_string(rho));
  const int null_id = registry.vocab().null_id();
  std::size_t usable = 0;
  // (weight, token id, position) sorts in selection order.
  std::vector<std::tuple<double, int, std::size_t>> seen;
  for (std::size_t i = 0; i < cond.size(); ++i) {
    const int id = cond.token_ids[i];
    if (cond.null_flags[i] || id == null_id) continue;
    ++usable;
    const TokenStats& st = registry.stats(id);
    if (st.count > 0) seen.emplace_back(weight(st), id, i);
  }
  // The small slack keeps products such as 0.15 * 20 from rounding up past an integer.
  const auto want = static_cast<std::size_t>(std::ceil(rho * static_cast<double>(usable) - 1e-9));
  std::sort(seen.begin(), seen.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < std::min(want, seen.size()); ++i) out.push_back(std::get<2>(seen[i]));
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

std::string hex_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::hex);
  return std::string(buf, r.ptr);
}

double parse_hex_double(const std::string& s, const std::string& token) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  const auto r = std::from_chars(first, last, v, std::chars_format::hex);
  if (r.ec != std::errc() || r.ptr != last) throw ParseError("registry: bad loss_sum_hex '" + s + "' for token '" + token + "'");
  return v;
}

}  // namespace

void save_registry(const Registry& registry, const std::filesystem::path& path) {
  nlohmann::json tokens = nlohmann::json::array();
  for (const auto& st : registry.all()) {
    tokens.push_back({{"id", st.token_id},
                      {"str", registry.vocab().str(st.token_id)},
                      {"loss_sum_hex", hex_double(st.loss_sum)},
                      {"count", st.count}});
  }
  const nlohmann::json doc = {{"version", 1}, {"tokens", tokens}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << doc.dump(1) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

Registry load_registry(const std::filesystem::path& path, const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  Registry reg(vocab);
  try {
    const int version = doc.at("version").get<int>();
    if (version != 1) throw UnsupportedVersionError("registry version " + std::to_string(version) + " is not supported");
    for (const auto& t : doc.at("tokens")) {
      const std::string str = t.at("str").get<std::string>();
      const auto id = vocab.find(str);
      if (!id) throw ParseError("registry: unknown token '" + str + "'");
      if (t.contains("id") && t.at("id").get<int>() != *id) {
        throw ParseError("registry: token '" + str + "' has id " + std::to_string(t.at("id").get<int>()) +
                         ", vocab says " + std::to_string(*id));
      }
      TokenStats st;
      st.token_id = *id;
      st.loss_sum = parse_hex_double(t.at("loss_sum_hex").get<std::string>(), str);
      st.count = t.at("count").get<std::uint64_t>();
      reg.set(st);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return reg;
}

}  // namespace darelab
