#include "segsurv/checkpoint.hpp"

#include "binary_io.hpp"

#include <fstream>
#include <sstream>
#include <type_traits>

namespace segsurv {

namespace fs = std::filesystem;

namespace {

template <typename Scalar>
constexpr const char* precision_name() {
  return std::is_same_v<Scalar, double> ? "f64" : "f32";
}

template <typename FileScalar, typename Scalar>
void read_payload(std::istream& is, Index offset, Tensor<Scalar>& dst, const std::string& name) {
  is.seekg(static_cast<std::streamoff>(offset * static_cast<Index>(sizeof(FileScalar))));
  std::vector<FileScalar> buf(static_cast<size_t>(dst.size()));
  if (!detail::read_le<FileScalar>(is, buf)) throw CheckpointError("checkpoint payload truncated at " + name);
  for (Index i = 0; i < dst.size(); ++i) dst[i] = static_cast<Scalar>(buf[static_cast<size_t>(i)]);
}

}  // namespace

nlohmann::json read_checkpoint_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw CheckpointError("cannot open " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  if (manifest.value("format", "") != "segsurv-checkpoint-v1") throw CheckpointError("unknown checkpoint format");
  return manifest;
}

template <typename Scalar>
void save_checkpoint(const ParameterSet<Scalar>& params, const fs::path& dir, const nlohmann::json& metadata) {
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "segsurv-checkpoint-v1";
  manifest["precision"] = precision_name<Scalar>();
  manifest["parameters"] = nlohmann::json::array();
  manifest["metadata"] = metadata;

  std::ofstream bin(dir / "params.bin", std::ios::binary);
  if (!bin) throw CheckpointError("cannot write " + (dir / "params.bin").string());
  Index offset = 0;
  for (const auto& p : params) {
    manifest["parameters"].push_back(
        {{"name", p.name}, {"shape", p.value.shape}, {"offset", offset}, {"trainable", p.trainable}});
    detail::write_le<Scalar>(bin, std::span<const Scalar>(p.value.data.data(), static_cast<size_t>(p.value.size())));
    offset += p.value.size();
  }
  std::ofstream js(dir / "manifest.json");
  js << manifest.dump(2) << '\n';
  if (!bin || !js) throw CheckpointError("failed writing checkpoint to " + dir.string());
}

template <typename Scalar>
void load_checkpoint(ParameterSet<Scalar>& params, const fs::path& dir) {
  const nlohmann::json manifest = read_checkpoint_manifest(dir);
  const std::string precision = manifest.value("precision", "");
  if (precision != "f32" && precision != "f64") throw CheckpointError("unsupported checkpoint precision: " + precision);

  std::map<std::string, nlohmann::json> entries;
  for (const auto& e : manifest.at("parameters")) entries[e.at("name").get<std::string>()] = e;

  std::ostringstream problems;
  for (const auto& p : params) {
    auto it = entries.find(p.name);
    if (it == entries.end()) {
      problems << "\n  " << p.name << ": missing from checkpoint";
      continue;
    }
    const Shape shape = it->second.at("shape").template get<Shape>();
    if (shape != p.value.shape)
      problems << "\n  " << p.name << ": expected " << shape_str(p.value.shape) << ", checkpoint has " << shape_str(shape);
  }
  for (const auto& [name, e] : entries)
    if (!params.contains(name)) problems << "\n  " << name << ": not present in model";
  if (!problems.str().empty()) throw CheckpointError("checkpoint/config mismatch:" + problems.str());

  std::ifstream bin(dir / "params.bin", std::ios::binary);
  if (!bin) throw CheckpointError("cannot open " + (dir / "params.bin").string());
  for (auto& p : params) {
    const Index offset = entries[p.name].at("offset").template get<Index>();
    if (precision == "f64")
      read_payload<double>(bin, offset, p.value, p.name);
    else
      read_payload<float>(bin, offset, p.value, p.name);
    p.zero_grad();
  }
}

template void save_checkpoint(const ParameterSet<float>&, const fs::path&, const nlohmann::json&);
template void save_checkpoint(const ParameterSet<double>&, const fs::path&, const nlohmann::json&);
template void load_checkpoint(ParameterSet<float>&, const fs::path&);
template void load_checkpoint(ParameterSet<double>&, const fs::path&);

}  // namespace segsurv
