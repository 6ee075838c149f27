#pragma once

// Checkpoint directories. Each model gets its own directory holding
//   weights.bin    little-endian archive of named float32 arrays
//   weights.txt    one line per array: name, dtype, shape
//   manifest.json  model_id, kind, epoch, seed, architecture, metric snapshot

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "pose/error.hpp"
#include "pose/models.hpp"
#include "pose/tensor.hpp"

namespace pose::ckpt {

inline constexpr char kMagic[8] = {'P', 'O', 'S', 'E', 'A', 'R', 'C', '1'};

struct NamedArray {
  std::string name;
  std::array<int, 4> shape{};
  std::vector<float> data;
};

namespace detail {

template <typename U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename U>
U get(std::istream& is) {
  U v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw IoError("truncated weight archive");
  return v;
}

}  // namespace detail

inline void write_archive(const std::filesystem::path& path, const std::vector<NamedArray>& arrays) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os.write(kMagic, sizeof kMagic);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(a.name.size()));
    os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    for (int d : a.shape) detail::put<std::int32_t>(os, d);
    detail::put<std::uint64_t>(os, a.data.size());
    os.write(reinterpret_cast<const char*>(a.data.data()), static_cast<std::streamsize>(a.data.size() * sizeof(float)));
  }
  if (!os) throw IoError("failed writing " + path.string());

  auto sidecar = path;
  sidecar.replace_extension(".txt");
  std::ofstream txt(sidecar);
  txt << "# name dtype shape(N,C,H,W)\n";
  for (const auto& a : arrays)
    txt << a.name << " float32 " << a.shape[0] << ',' << a.shape[1] << ',' << a.shape[2] << ',' << a.shape[3] << '\n';
}

inline std::vector<NamedArray> read_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("missing checkpoint archive " + path.string());
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof magic) != 0) throw IoError(path.string() + " is not a weight archive");
  const auto count = detail::get<std::uint32_t>(is);
  std::vector<NamedArray> out(count);
  for (auto& a : out) {
    const auto len = detail::get<std::uint32_t>(is);
    a.name.resize(len);
    is.read(a.name.data(), len);
    for (int& d : a.shape) d = detail::get<std::int32_t>(is);
    const auto n = detail::get<std::uint64_t>(is);
    const std::uint64_t expect = static_cast<std::uint64_t>(a.shape[0]) * a.shape[1] * a.shape[2] * a.shape[3];
    if (n != expect) throw IoError("corrupt array '" + a.name + "' in " + path.string());
    a.data.resize(n);
    is.read(reinterpret_cast<char*>(a.data.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (!is) throw IoError("truncated weight archive " + path.string());
  }
  return out;
}

template <typename T>
std::vector<NamedArray> pack_params(const std::vector<const nn::Param<T>*>& params) {
  std::vector<NamedArray> out;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& v = params[k]->value;
    NamedArray a{std::to_string(k) + "." + params[k]->name, {v.n(), v.c(), v.h(), v.w()}, {}};
    a.data.reserve(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) a.data.push_back(static_cast<float>(v[i]));
    out.push_back(std::move(a));
  }
  return out;
}

template <typename T>
void unpack_params(const std::vector<NamedArray>& arrays, std::size_t first, const std::vector<nn::Param<T>*>& params) {
  if (arrays.size() < first + params.size()) throw IoError("checkpoint has too few arrays");
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& a = arrays[first + k];
    auto& v = params[k]->value;
    if (a.shape != std::array<int, 4>{v.n(), v.c(), v.h(), v.w()})
      throw IoError("checkpoint array '" + a.name + "' has shape mismatch, expected " + v.shape_string());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(a.data[i]);
  }
}

// FNV-1a over the float32 bytes of all parameters.
template <typename T>
std::string weight_checksum(const std::vector<const nn::Param<T>*>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto* p : params)
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const float f = static_cast<float>(p->value[i]);
      unsigned char b[sizeof f];
      std::memcpy(b, &f, sizeof f);
      for (unsigned char c : b) {
        h ^= c;
        h *= 0x100000001b3ULL;
      }
    }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("missing " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

inline nlohmann::ordered_json arch_json(const AugArch& a) {
  nlohmann::ordered_json j;
  j["tag"] = a.tag();
  j["layers"] = a.layers;
  j["kernel"] = a.kernel;
  j["hidden"] = a.hidden;
  return j;
}

inline AugArch arch_from_json(const nlohmann::json& j) {
  AugArch a = aug_arch_from_tag(j.at("tag").get<std::string>());
  a.layers = j.at("layers").get<int>();
  a.kernel = j.at("kernel").get<int>();
  a.hidden = j.at("hidden").get<int>();
  a.validate();
  return a;
}

inline nlohmann::ordered_json task_config_json(const TaskConfig& c) {
  nlohmann::ordered_json j;
  j["input_size"] = c.input_size;
  j["channels"] = c.channels;
  j["embed_dim"] = c.embed_dim;
  j["num_classes"] = c.num_classes;
  j["head_depth"] = c.head_depth;
  j["dropout"] = c.dropout;
  j["dct_eps"] = c.dct_eps;
  return j;
}

inline TaskConfig task_config_from_json(const nlohmann::json& j) {
  TaskConfig c;
  c.input_size = j.at("input_size").get<int>();
  c.channels = j.at("channels").get<std::vector<int>>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.head_depth = j.at("head_depth").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.dct_eps = j.at("dct_eps").get<double>();
  c.validate();
  return c;
}

template <typename T>
void save_augmentation_model(const std::filesystem::path& dir, const AugmentationModel<T>& m, int epoch,
                             const nlohmann::ordered_json& metrics = nlohmann::ordered_json::object()) {
  std::filesystem::create_directories(dir);
  const auto params = m.params();
  write_archive(dir / "weights.bin", pack_params(params));
  nlohmann::ordered_json j;
  j["kind"] = "augmentation";
  j["model_id"] = m.model_id();
  j["epoch"] = epoch;
  j["seed"] = m.seed();
  j["architecture"] = arch_json(m.arch());
  j["checksum"] = weight_checksum(params);
  j["metrics"] = metrics;
  write_json(dir / "manifest.json", j);
}

template <typename T = float>
AugmentationModel<T> load_augmentation_model(const std::filesystem::path& dir) {
  const auto j = read_json(dir / "manifest.json");
  AugmentationModel<T> m(arch_from_json(j.at("architecture")), j.at("model_id").get<int>(),
                         j.at("seed").get<std::uint64_t>());
  unpack_params(read_archive(dir / "weights.bin"), 0, m.params());
  return m;
}

template <typename T>
void save_task_model(const std::filesystem::path& dir, const TaskModel<T>& m, int epoch,
                     const nlohmann::ordered_json& metrics = nlohmann::ordered_json::object()) {
  std::filesystem::create_directories(dir);
  const auto params = m.params();
  auto arrays = pack_params(params);
  const int side = m.config().input_size;
  auto stats = [&](const std::string& name, const std::vector<T>& v) {
    NamedArray a{name, {1, 3, side, side}, {}};
    for (T x : v) a.data.push_back(static_cast<float>(x));
    arrays.push_back(std::move(a));
  };
  stats("input_mean", m.input_mean());
  stats("input_std", m.input_std());
  write_archive(dir / "weights.bin", arrays);
  nlohmann::ordered_json j;
  j["kind"] = "task";
  j["model_id"] = -1;
  j["epoch"] = epoch;
  j["seed"] = m.seed();
  j["config"] = task_config_json(m.config());
  j["checksum"] = weight_checksum(params);
  j["metrics"] = metrics;
  write_json(dir / "manifest.json", j);
}

template <typename T = float>
TaskModel<T> load_task_model(const std::filesystem::path& dir) {
  const auto j = read_json(dir / "manifest.json");
  TaskModel<T> m(task_config_from_json(j.at("config")), j.at("seed").get<std::uint64_t>());
  const auto arrays = read_archive(dir / "weights.bin");
  const auto params = m.params();
  unpack_params(arrays, 0, params);
  if (arrays.size() != params.size() + 2) throw IoError("task checkpoint lacks input statistics");
  const auto& mean = arrays[params.size()].data;
  const auto& sd = arrays[params.size() + 1].data;
  if (mean.size() != m.input_mean().size() || sd.size() != m.input_std().size())
    throw IoError("task checkpoint input statistics have the wrong size");
  for (std::size_t k = 0; k < mean.size(); ++k) {
    m.input_mean()[k] = static_cast<T>(mean[k]);
    m.input_std()[k] = static_cast<T>(sd[k]);
  }
  return m;
}

}  // namespace pose::ckpt
