#include <bit>
#include <cstring>
#include <fstream>

#include "memlab/errors.hpp"
#include "memlab/model.hpp"

namespace memlab {

namespace {

constexpr char kMagic[8] = {'M', 'E', 'M', 'L', 'A', 'B', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

template <typename T>
void put(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("checkpoint truncated");
  return v;
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put(os, kVersion);
  const std::string cfg = nlohmann::json(params.config()).dump();
  put(os, static_cast<std::uint64_t>(cfg.size()));
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  put(os, static_cast<std::uint64_t>(params.size()));
  for (const auto& p : params.params()) {
    put(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put(os, static_cast<std::uint8_t>(p.trainable ? 1 : 0));
    put(os, static_cast<std::uint32_t>(p.value.rank()));
    for (auto d : p.value.shape()) put(os, static_cast<std::uint64_t>(d));
    os.write(reinterpret_cast<const char*>(p.value.data().data()),
             static_cast<std::streamsize>(p.value.size() * sizeof(double)));
  }
  if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw IoError("not a memlab checkpoint: " + path.string());
  const auto version = get<std::uint32_t>(is);
  if (version != kVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const auto cfg_len = get<std::uint64_t>(is);
  std::string cfg(cfg_len, '\0');
  is.read(cfg.data(), static_cast<std::streamsize>(cfg_len));
  if (!is) throw IoError("checkpoint truncated");

  ModelParams params;
  params.mutable_config() = nlohmann::json::parse(cfg).get<ModelConfig>();
  const auto n = get<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto name_len = get<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const bool trainable = get<std::uint8_t>(is) != 0;
    const auto rank = get<std::uint32_t>(is);
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(get<std::uint64_t>(is));
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!is) throw IoError("checkpoint truncated in parameter '" + name + "'");
    params.add_param(std::move(name), std::move(t), trainable);
  }
  params.rebuild_slots_from_names();
  return params;
}

}  // namespace memlab
