#pragma once

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "darelab/corpus/corpus.hpp"
#include "darelab/model/model.hpp"

namespace darelab::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("darelab_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

// 1 layer, d_model 8, grid 1x4x4x2, K up to 6.
inline ModelDims tiny_dims(std::size_t layers = 1) {
  ModelDims d;
  d.vocab_size = 26;
  d.null_id = 25;
  d.d_model = 8;
  d.heads = 2;
  d.layers = layers;
  d.mlp_ratio = 2;
  d.k_max = 6;
  d.grid = {1, 4, 4, 2};
  return d;
}

// Small but renderable: 3 channels so corpus grids fit.
inline ModelDims small_dims() {
  ModelDims d;
  d.d_model = 16;
  d.heads = 2;
  d.layers = 2;
  d.mlp_ratio = 2;
  d.k_max = 16;
  return d;
}

inline std::vector<Tensor> flat_copy(const ModelParams& p) {
  std::vector<Tensor> out;
  for (const Tensor* t : p.tensors()) out.push_back(*t);
  return out;
}

}  // namespace darelab::testing
