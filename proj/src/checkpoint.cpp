#include "factorizer/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "factorizer/config.hpp"
#include "factorizer/io.hpp"

namespace factorizer {

namespace {

constexpr char kMagic[4] = {'F', 'C', 'K', 'P'};
constexpr uint8_t kVersion = 1;

void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<char*>(&v), 8); }
void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<char*>(&v), 4); }
void write_u16(std::ostream& os, uint16_t v) { os.write(reinterpret_cast<char*>(&v), 2); }

uint64_t read_u64(std::istream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
uint16_t read_u16(std::istream& is) {
  uint16_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 2);
  return v;
}

int64_t ftensor_blob_size(const Tensor<float>& t) {
  return 7 + 8 * t.rank() + static_cast<int64_t>(t.numel() * sizeof(float));
}

}  // namespace

void save_checkpoint(const std::string& path, const FactorizerModel<float>& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os.write(kMagic, 4);
  os.put(static_cast<char>(kVersion));
  write_u64(os, model.step());
  write_u64(os, model.seed());
  const std::string config_text = serialize_kv(to_kv(model.config()));
  write_u32(os, static_cast<uint32_t>(config_text.size()));
  os.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));

  const auto& params = model.parameters();
  write_u32(os, static_cast<uint32_t>(params.size()));
  // Manifest size is known up front, so blob offsets can be precomputed.
  int64_t manifest_bytes = 0;
  for (const auto& [name, v] : params)
    manifest_bytes += 2 + static_cast<int64_t>(name.size()) + 1 + 1 + 8 * v.value().rank() + 8;
  int64_t offset = static_cast<int64_t>(os.tellp()) + manifest_bytes;
  for (const auto& [name, v] : params) {
    const Tensor<float>& t = v.value();
    write_u16(os, static_cast<uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    os.put(static_cast<char>(ftensor_dtype_code<float>()));
    os.put(static_cast<char>(t.rank()));
    for (int64_t e : t.shape()) write_u64(os, static_cast<uint64_t>(e));
    write_u64(os, static_cast<uint64_t>(offset));
    offset += ftensor_blob_size(t);
  }
  for (const auto& [name, v] : params) save_ftensor(os, v.value());
  if (!os) throw IoError("checkpoint write failed: " + path);
}

FactorizerModel<float> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("'" + path + "' is not a checkpoint file");
  const int version = is.get();
  if (version != kVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  const uint64_t step = read_u64(is);
  const uint64_t seed = read_u64(is);
  const uint32_t config_len = read_u32(is);
  std::string config_text(config_len, '\0');
  is.read(config_text.data(), config_len);
  FactorizerConfig cfg = factorizer_config_from_kv(parse_kv_text(config_text));

  struct Entry {
    std::string name;
    Shape shape;
    uint64_t offset;
  };
  const uint32_t count = read_u32(is);
  std::vector<Entry> manifest(count);
  for (auto& e : manifest) {
    const uint16_t len = read_u16(is);
    e.name.resize(len);
    is.read(e.name.data(), len);
    const int dtype = is.get();
    if (dtype != ftensor_dtype_code<float>())
      throw IoError("checkpoint parameter '" + e.name + "' has unexpected dtype");
    const int rank = is.get();
    e.shape.resize(rank);
    for (int i = 0; i < rank; ++i) e.shape[i] = static_cast<int64_t>(read_u64(is));
    e.offset = read_u64(is);
  }
  if (!is) throw IoError("checkpoint manifest truncated: " + path);

  FactorizerModel<float> model = FactorizerModel<float>::build(cfg, seed);
  model.set_step(step);
  auto& params = model.parameters();
  if (params.size() != manifest.size())
    throw IoError("checkpoint has " + std::to_string(manifest.size()) +
                  " parameters, rebuilt model has " + std::to_string(params.size()));
  for (size_t i = 0; i < params.size(); ++i) {
    const Entry& e = manifest[i];
    if (params[i].first != e.name)
      throw IoError("checkpoint parameter order mismatch at '" + e.name + "'");
    is.seekg(static_cast<std::streamoff>(e.offset));
    Tensor<float> t = load_ftensor<float>(is);
    if (t.shape() != e.shape) throw IoError("manifest shape mismatch for '" + e.name + "'");
    params[i].second.set_value(std::move(t));
  }
  return model;
}

}  // namespace factorizer
