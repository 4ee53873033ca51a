#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "darelab/corpus/vocab.hpp"
#include "darelab/model/model.hpp"

namespace darelab {

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct Checkpoint {
  ModelParams params;
  std::vector<NamedTensor> optimizer;
  std::uint64_t step = 0;
  Vocab vocab;
};

// Directory layout: manifest.json, params.bin, opt.bin. The binaries are
// concatenated little-endian float64 values; manifest offsets and lengths
// count values, not bytes.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);

// IntegrityError when manifest and blobs disagree, UnsupportedVersionError
// for version != 1.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace darelab
