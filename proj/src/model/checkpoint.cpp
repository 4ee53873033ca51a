#include "darelab/model/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>

#include "darelab/error.hpp"

namespace darelab {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

void write_blob(const fs::path& path, const std::vector<const Tensor*>& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  for (const Tensor* t : tensors) {
    out.write(reinterpret_cast<const char*>(t->data().data()), static_cast<std::streamsize>(t->size() * 8));
  }
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<double> read_blob(const fs::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot read " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes % 8 != 0) throw IntegrityError(path.string() + " length is not a multiple of 8 bytes");
  std::vector<double> data(bytes / 8);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw IoError("failed reading " + path.string());
  return data;
}

json describe(const std::vector<std::pair<std::string, const Tensor*>>& entries) {
  json arr = json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : entries) {
    arr.push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset}, {"len", t->size()}});
    offset += t->size();
  }
  return arr;
}

Tensor extract(const json& entry, const std::vector<double>& blob, const std::string& which) {
  const auto shape = entry.at("shape").get<Shape>();
  const auto offset = entry.at("offset").get<std::size_t>();
  const auto len = entry.at("len").get<std::size_t>();
  const auto name = entry.at("name").get<std::string>();
  if (shape_size(shape) != len) throw IntegrityError(which + ": tensor '" + name + "' shape does not match len");
  if (offset + len > blob.size()) {
    throw IntegrityError(which + ": tensor '" + name + "' extends past the end of the blob (" +
                         std::to_string(offset + len) + " > " + std::to_string(blob.size()) + ")");
  }
  return Tensor(shape, std::vector<double>(blob.begin() + static_cast<std::ptrdiff_t>(offset),
                                           blob.begin() + static_cast<std::ptrdiff_t>(offset + len)));
}

void check_coverage(const json& entries, const std::vector<double>& blob, const std::string& which) {
  std::size_t total = 0;
  for (const auto& e : entries) total += e.at("len").get<std::size_t>();
  if (total != blob.size()) {
    throw IntegrityError(which + ": manifest declares " + std::to_string(total) + " values but blob holds " +
                         std::to_string(blob.size()));
  }
}

}  // namespace

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());

  std::vector<std::pair<std::string, const Tensor*>> params;
  auto& w = const_cast<Weights<Tensor>&>(ckpt.params.w);
  w.visit([&](const std::string& name, Tensor& t) { params.emplace_back(name, &t); });
  std::vector<std::pair<std::string, const Tensor*>> opt;
  for (const auto& nt : ckpt.optimizer) opt.emplace_back(nt.name, &nt.value);

  const ModelDims& d = ckpt.params.dims;
  json manifest = {{"version", 1},
                   {"step", ckpt.step},
                   {"dims",
                    {{"vocab_size", d.vocab_size},
                     {"null_id", d.null_id},
                     {"d_model", d.d_model},
                     {"heads", d.heads},
                     {"layers", d.layers},
                     {"mlp_ratio", d.mlp_ratio},
                     {"k_max", d.k_max},
                     {"text_pos_enc", d.text_pos_enc},
                     {"F", d.grid.frames},
                     {"H", d.grid.height},
                     {"W", d.grid.width},
                     {"D", d.grid.channels}}},
                   {"tensors", describe(params)},
                   {"optimizer", describe(opt)}};
  if (ckpt.vocab.size() > 0) {
    manifest["vocab"] = ckpt.vocab.tokens();
    json roles = json::array();
    for (Role r : ckpt.vocab.roles()) roles.push_back(std::string(role_name(r)));
    manifest["roles"] = roles;
  }

  std::vector<const Tensor*> pt, ot;
  for (const auto& p : params) pt.push_back(p.second);
  for (const auto& o : opt) ot.push_back(o.second);
  write_blob(dir / "params.bin", pt);
  write_blob(dir / "opt.bin", ot);
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw IoError("cannot write manifest in " + dir.string());
  out << manifest.dump(1) << '\n';
  if (!out) throw IoError("failed writing manifest in " + dir.string());
}

Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("no manifest.json in " + dir.string());
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError("manifest.json: " + std::string(e.what()));
  }
  try {
    const int version = m.at("version").get<int>();
    if (version != 1) throw UnsupportedVersionError("checkpoint version " + std::to_string(version) + " is not supported");

    const json& jd = m.at("dims");
    ModelDims dims;
    dims.vocab_size = jd.at("vocab_size").get<std::size_t>();
    dims.null_id = jd.at("null_id").get<int>();
    dims.d_model = jd.at("d_model").get<std::size_t>();
    dims.heads = jd.at("heads").get<std::size_t>();
    dims.layers = jd.at("layers").get<std::size_t>();
    dims.mlp_ratio = jd.at("mlp_ratio").get<std::size_t>();
    dims.k_max = jd.at("k_max").get<std::size_t>();
    dims.text_pos_enc = jd.at("text_pos_enc").get<bool>();
    dims.grid = {jd.at("F").get<std::size_t>(), jd.at("H").get<std::size_t>(), jd.at("W").get<std::size_t>(),
                 jd.at("D").get<std::size_t>()};

    Checkpoint ck;
    ck.step = m.at("step").get<std::uint64_t>();
    ck.params = zero_params(dims);
    if (m.contains("vocab")) {
      std::vector<Role> roles;
      for (const auto& r : m.at("roles")) roles.push_back(parse_role(r.get<std::string>()));
      ck.vocab = Vocab(m.at("vocab").get<std::vector<std::string>>(), std::move(roles));
    }

    const auto pblob = read_blob(dir / "params.bin");
    const json& tensors = m.at("tensors");
    check_coverage(tensors, pblob, "params.bin");
    std::vector<std::pair<std::string, Tensor*>> slots;
    ck.params.w.visit([&](const std::string& name, Tensor& t) { slots.emplace_back(name, &t); });
    if (tensors.size() != slots.size()) {
      throw IntegrityError("manifest lists " + std::to_string(tensors.size()) + " tensors, model expects " +
                           std::to_string(slots.size()));
    }
    for (std::size_t i = 0; i < slots.size(); ++i) {
      const auto& e = tensors[i];
      if (e.at("name").get<std::string>() != slots[i].first) {
        throw IntegrityError("manifest tensor " + std::to_string(i) + " is '" + e.at("name").get<std::string>() +
                             "', expected '" + slots[i].first + "'");
      }
      Tensor t = extract(e, pblob, "params.bin");
      if (t.shape() != slots[i].second->shape()) {
        throw IntegrityError("tensor '" + slots[i].first + "' has shape " + shape_str(t.shape()) + ", expected " +
                             shape_str(slots[i].second->shape()));
      }
      *slots[i].second = std::move(t);
    }

    const auto oblob = read_blob(dir / "opt.bin");
    const json& opt = m.at("optimizer");
    check_coverage(opt, oblob, "opt.bin");
    for (const auto& e : opt) ck.optimizer.push_back({e.at("name").get<std::string>(), extract(e, oblob, "opt.bin")});
    return ck;
  } catch (const json::exception& e) {
    throw ParseError("manifest.json: " + std::string(e.what()));
  }
}

}  // namespace darelab
