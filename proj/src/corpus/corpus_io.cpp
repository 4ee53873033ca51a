#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>

#include "darelab/corpus/corpus.hpp"
#include "darelab/error.hpp"

namespace darelab {

namespace {

using nlohmann::json;

// A ParseError that already carries file and line information.
class LineError : public ParseError {
 public:
  using ParseError::ParseError;
};

std::uint64_t to_little_endian(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xFFu) << (8 * (7 - i));
    return r;
  }
}

}  // namespace

std::string encode_grid(const Tensor& grid) {
  std::vector<unsigned char> bytes(grid.size() * 8);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const std::uint64_t le = to_little_endian(std::bit_cast<std::uint64_t>(grid[i]));
    std::memcpy(bytes.data() + i * 8, &le, 8);
  }
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

Tensor decode_grid(const std::string& b64, const Shape& shape) {
  const std::size_t expected = shape_size(shape) * 8;
  if (b64.size() % 4 != 0 || b64.size() != 4 * ((expected + 2) / 3)) {
    throw ParseError("grid_b64 has " + std::to_string(b64.size()) + " characters, expected " +
                     std::to_string(4 * ((expected + 2) / 3)));
  }
  std::vector<unsigned char> bytes(b64.size() / 4 * 3);
  const int n = EVP_DecodeBlock(bytes.data(), reinterpret_cast<const unsigned char*>(b64.data()),
                                static_cast<int>(b64.size()));
  if (n < 0) throw ParseError("grid_b64 is not valid base64");
  // EVP_DecodeBlock keeps the zero bytes produced by '=' padding.
  if (static_cast<std::size_t>(n) < expected) throw ParseError("grid_b64 decodes to too few bytes");
  Tensor grid(shape);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    std::uint64_t le;
    std::memcpy(&le, bytes.data() + i * 8, 8);
    grid[i] = std::bit_cast<double>(to_little_endian(le));
  }
  return grid;
}

void write_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open corpus file for writing: " + path.string());
  json header = {{"version", 1},
                 {"F", corpus.dims.frames},
                 {"H", corpus.dims.height},
                 {"W", corpus.dims.width},
                 {"D", corpus.dims.channels},
                 {"vocab", corpus.vocab.tokens()}};
  json roles = json::array();
  for (Role r : corpus.vocab.roles()) roles.push_back(std::string(role_name(r)));
  header["roles"] = roles;
  out << header.dump() << '\n';
  for (const Sample& s : corpus.samples) {
    if (s.grid.shape() != corpus.dims.shape()) throw DimensionError("sample grid does not match corpus dims");
    json rec = {{"tokens", s.caption.token_ids}, {"text", s.caption.text}, {"grid_b64", encode_grid(s.grid)}};
    out << rec.dump() << '\n';
  }
  if (!out) throw IoError("failed writing corpus file: " + path.string());
}

Corpus read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus file: " + path.string());
  Corpus corpus;
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& why) -> LineError {
    return LineError(path.string() + ":" + std::to_string(line_no) + ": " + why + " (last good line " +
                      std::to_string(line_no - 1) + ")");
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() && in.eof()) break;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw fail(std::string("malformed JSON: ") + e.what());
    }
    try {
      if (!corpus.has_header) {
        if (j.at("version").get<int>() != 1) throw fail("unsupported corpus version");
        corpus.dims = {j.at("F").get<std::size_t>(), j.at("H").get<std::size_t>(), j.at("W").get<std::size_t>(),
                       j.at("D").get<std::size_t>()};
        auto tokens = j.at("vocab").get<std::vector<std::string>>();
        std::vector<Role> roles;
        if (j.contains("roles")) {
          for (const auto& r : j.at("roles")) roles.push_back(parse_role(r.get<std::string>()));
        } else {
          throw fail("header lacks token roles");
        }
        corpus.vocab = Vocab(std::move(tokens), std::move(roles));
        corpus.has_header = true;
        continue;
      }
      auto ids = j.at("tokens").get<std::vector<int>>();
      Caption c = make_caption(corpus.vocab, std::move(ids));
      if (c.text != j.at("text").get<std::string>()) throw fail("text does not match tokens");
      Tensor g = decode_grid(j.at("grid_b64").get<std::string>(), corpus.dims.shape());
      corpus.samples.push_back({std::move(c), std::move(g)});
    } catch (const LineError&) {
      throw;
    } catch (const json::exception& e) {
      throw fail(std::string("bad record: ") + e.what());
    } catch (const Error& e) {
      throw fail(e.what());
    }
  }
  return corpus;
}

}  // namespace darelab
