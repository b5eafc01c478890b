#include "unveil/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace unveil::model {

namespace {

constexpr char kMagic[8] = {'U', 'N', 'V', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace

void save_checkpoint(const PolicyModel& model, const std::string& path) {
  const auto& p = model.params();
  nlohmann::json tensors = nlohmann::json::array();
  for (size_t i = 0; i < p.size(); ++i) {
    tensors.push_back({{"name", p.names[i]}, {"rows", p[i].rows()}, {"cols", p[i].cols()}});
  }
  const auto& shape = model.image_shape();
  const nlohmann::json header = {
      {"format", "unveil-checkpoint"},
      {"byte_order", "little"},
      {"layout", "column-major float64"},
      {"config", model.config().to_json()},
      {"vocab", model.vocab().to_json()},
      {"image", {{"height_patches", shape.height_patches}, {"width_patches", shape.width_patches},
                 {"feature_dim", shape.feature_dim}}},
      {"tensors", tensors},
  };
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  out.write(kMagic, sizeof(kMagic));
  write_pod(out, kVersion);
  write_pod(out, static_cast<std::uint64_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (size_t i = 0; i < p.size(); ++i) {
    out.write(reinterpret_cast<const char*>(p[i].data()), static_cast<std::streamsize>(sizeof(double) * p[i].size()));
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

PolicyModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw std::runtime_error("checkpoint: bad magic");
  if (read_pod<std::uint32_t>(in) != kVersion) throw std::runtime_error("checkpoint: unsupported version");
  const auto len = read_pod<std::uint64_t>(in);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("checkpoint: truncated header");
  const auto header = nlohmann::json::parse(text);
  const auto& img = header.at("image");
  PolicyModel model(ModelConfig::from_json(header.at("config")), Vocab::from_json(header.at("vocab")),
                    ImageShape{img.at("height_patches").get<int>(), img.at("width_patches").get<int>(),
                               img.at("feature_dim").get<int>()});
  auto& p = model.params();
  const auto& table = header.at("tensors");
  if (table.size() != p.size()) throw std::runtime_error("checkpoint: tensor count mismatch");
  for (size_t i = 0; i < p.size(); ++i) {
    const auto& t = table[i];
    if (t.at("name").get<std::string>() != p.names[i] || t.at("rows").get<Eigen::Index>() != p[i].rows() ||
        t.at("cols").get<Eigen::Index>() != p[i].cols()) {
      throw std::runtime_error("checkpoint: tensor table does not match the model layout at '" + p.names[i] + "'");
    }
    in.read(reinterpret_cast<char*>(p[i].data()), static_cast<std::streamsize>(sizeof(double) * p[i].size()));
    if (!in) throw std::runtime_error("checkpoint: truncated tensor data");
  }
  return model;
}

}  // namespace unveil::model
