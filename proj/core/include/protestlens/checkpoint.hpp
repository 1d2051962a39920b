#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "protestlens/error.hpp"
#include "protestlens/tensor.hpp"
#include "protestlens/text_model.hpp"
#include "protestlens/vision_model.hpp"

namespace protestlens {

inline constexpr char kCheckpointMagic[4] = {'P', 'L', 'C', 'K'};
inline constexpr std::uint64_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string model_kind;  // "text" or "vision"
  nlohmann::json config;
  nlohmann::json metrics;
  std::map<std::string, Tensor<float>> tensors;
};

/// Layout: 4-byte magic, u64 little-endian header length, UTF-8 JSON
/// header, then the concatenated little-endian f32 payload. Tensor
/// offsets are relative to the payload start and ascend in name order.
inline void save_checkpoint(const std::string& path, const std::string& model_kind,
                            const nlohmann::json& config,
                            const std::vector<std::pair<std::string, Tensor<float>>>& tensors,
                            const nlohmann::json& metrics = nlohmann::json::object()) {
  std::map<std::string, Tensor<float>> sorted;
  for (const auto& [name, t] : tensors) {
    if (sorted.count(name)) throw ValueError("duplicate tensor name: " + name);
    sorted.emplace(name, t);
  }
  nlohmann::json table = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : sorted) {
    const std::uint64_t length = std::uint64_t(t.numel()) * sizeof(float);
    table[name] = {{"dtype", "f32"},
                   {"shape", t.shape()},
                   {"offset", offset},
                   {"length", length}};
    offset += length;
  }
  nlohmann::json header = {{"format_version", kCheckpointVersion},
                           {"model_kind", model_kind},
                           {"config", config},
                           {"tensors", table},
                           {"metrics", metrics}};
  const std::string header_bytes = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  out.write(kCheckpointMagic, 4);
  const std::uint64_t hlen = header_bytes.size();
  unsigned char lenbuf[8];
  for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<unsigned char>((hlen >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<char*>(lenbuf), 8);
  out.write(header_bytes.data(), static_cast<std::streamsize>(header_bytes.size()));
  for (const auto& [name, t] : sorted) {
    auto v = t.data();
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(float)));
  }
  if (!out) throw DataError("failed writing checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  const std::uint64_t file_size = static_cast<std::uint64_t>(in.tellg());
  in.seekg(0);

  char magic[4];
  if (file_size < 12 || !in.read(magic, 4) ||
      std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw IntegrityError("bad checkpoint magic at byte 0 in " + path);
  }
  unsigned char lenbuf[8];
  in.read(reinterpret_cast<char*>(lenbuf), 8);
  std::uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i) hlen |= std::uint64_t(lenbuf[i]) << (8 * i);
  if (hlen > file_size - 12) {  // file_size >= 12 was checked with the magic
    throw IntegrityError("header length " + std::to_string(hlen) +
                         " at byte 4 exceeds file size " + std::to_string(file_size) +
                         " in " + path);
  }
  std::string header_bytes(hlen, '\0');
  in.read(header_bytes.data(), static_cast<std::streamsize>(hlen));

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_bytes);
  } catch (const nlohmann::json::parse_error& e) {
    throw IntegrityError("corrupt header JSON at byte " +
                         std::to_string(12 + e.byte) + " in " + path);
  }

  if (!header.contains("format_version") || !header["format_version"].is_number_unsigned()) {
    throw IntegrityError("checkpoint header missing format_version in " + path);
  }
  const std::uint64_t version = header["format_version"].get<std::uint64_t>();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint format version " + std::to_string(version) +
                       " unsupported (this build reads version " +
                       std::to_string(kCheckpointVersion) + "): " + path);
  }

  Checkpoint ckpt;
  try {
    ckpt.model_kind = header.at("model_kind").get<std::string>();
    ckpt.config = header.at("config");
    ckpt.metrics = header.value("metrics", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError("malformed checkpoint header in " + path + ": " + e.what());
  }
  if (ckpt.model_kind != "text" && ckpt.model_kind != "vision") {
    throw IntegrityError("unknown model_kind '" + ckpt.model_kind + "' in " + path);
  }

  if (!header.contains("tensors") || !header["tensors"].is_object()) {
    throw IntegrityError("checkpoint header missing tensor table in " + path);
  }
  const std::uint64_t payload_size = file_size - 12 - hlen;

  // validate the whole table before any allocation
  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
    std::uint64_t length;
  };
  std::vector<Entry> entries;
  std::uint64_t declared_total = 0;
  std::uint64_t prev_end = 0;
  for (const auto& [name, spec] : header["tensors"].items()) {
    Entry e;
    e.name = name;
    try {
      if (spec.at("dtype").get<std::string>() != "f32") {
        throw IntegrityError("tensor '" + name + "' has unsupported dtype in " + path);
      }
      spec.at("shape").get_to(e.shape);
      e.offset = spec.at("offset").get<std::uint64_t>();
      e.length = spec.at("length").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& ex) {
      throw IntegrityError("malformed tensor entry '" + name + "' in " + path +
                           ": " + ex.what());
    }
    const std::uint64_t expect = std::uint64_t(numel(e.shape)) * sizeof(float);
    if (e.length != expect) {
      throw IntegrityError("tensor '" + name + "' declares " + std::to_string(e.length) +
                           " bytes but shape " + shape_to_string(e.shape) + " needs " +
                           std::to_string(expect) + " in " + path);
    }
    if (e.offset < prev_end) {
      throw IntegrityError("tensor '" + name + "' offset " + std::to_string(e.offset) +
                           " overlaps the previous tensor in " + path);
    }
    if (e.offset + e.length > payload_size) {
      throw IntegrityError("tensor '" + name + "' extends past the payload (offset " +
                           std::to_string(e.offset) + " + length " +
                           std::to_string(e.length) + " > " +
                           std::to_string(payload_size) + ") in " + path);
    }
    prev_end = e.offset + e.length;
    declared_total += e.length;
    entries.push_back(std::move(e));
  }
  if (declared_total != payload_size) {
    throw IntegrityError("header declares " + std::to_string(declared_total) +
                         " payload bytes but file carries " +
                         std::to_string(payload_size) + " in " + path);
  }

  for (const Entry& e : entries) {
    std::vector<float> values(numel(e.shape));
    in.seekg(static_cast<std::streamoff>(12 + hlen + e.offset));
    if (!in.read(reinterpret_cast<char*>(values.data()),
                 static_cast<std::streamsize>(e.length))) {
      throw IntegrityError("truncated payload reading tensor '" + e.name + "' in " + path);
    }
    ckpt.tensors.emplace(e.name, Tensor<float>::from(e.shape, std::move(values)));
  }
  return ckpt;
}

/// Stable human-readable listing, used by the golden-format test and the
/// checkpoint inspection command.
inline std::string inspect_checkpoint(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  std::ostringstream out;
  out << "model_kind: " << ckpt.model_kind << '\n';
  out << "format_version: " << kCheckpointVersion << '\n';
  out << "config: " << ckpt.config.dump() << '\n';
  out << "metrics: " << ckpt.metrics.dump() << '\n';
  out << "tensors: " << ckpt.tensors.size() << '\n';
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    const std::uint64_t length = std::uint64_t(t.numel()) * sizeof(float);
    out << "  " << name << " f32 " << shape_to_string(t.shape()) << " offset="
        << offset << " length=" << length << '\n';
    offset += length;
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Model adapters

inline void save_text_model(const std::string& path, const TextModel<float>& model,
                            const nlohmann::json& metrics = nlohmann::json::object()) {
  nlohmann::json config = model.config;
  save_checkpoint(path, "text", config, model.named_params(), metrics);
}

inline void save_vision_model(const std::string& path, const VisionModel<float>& model,
                              const nlohmann::json& metrics = nlohmann::json::object()) {
  nlohmann::json config = model.config;
  save_checkpoint(path, "vision", config, model.named_params(), metrics);
}

namespace detail {

template <typename ModelT>
void fill_model_params(ModelT& model, const Checkpoint& ckpt, const std::string& path) {
  auto params = model.named_params();
  if (params.size() != ckpt.tensors.size()) {
    throw IntegrityError("checkpoint holds " + std::to_string(ckpt.tensors.size()) +
                         " tensors but the model needs " +
                         std::to_string(params.size()) + ": " + path);
  }
  for (auto& [name, tensor] : params) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) {
      throw IntegrityError("checkpoint missing tensor '" + name + "': " + path);
    }
    if (it->second.shape() != tensor.shape()) {
      throw IntegrityError("tensor '" + name + "' has shape " +
                           shape_to_string(it->second.shape()) + " but the model expects " +
                           shape_to_string(tensor.shape()) + ": " + path);
    }
    auto src = it->second.data();
    auto dst = tensor.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

}  // namespace detail

inline TextModel<float> load_text_model(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.model_kind != "text") {
    throw IntegrityError("checkpoint is a " + ckpt.model_kind +
                         " model, expected text: " + path);
  }
  TextModelConfig config = ckpt.config.get<TextModelConfig>();
  TextModel<float> model = TextModel<float>::init(config, 0);
  detail::fill_model_params(model, ckpt, path);
  return model;
}

inline VisionModel<float> load_vision_model(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.model_kind != "vision") {
    throw IntegrityError("checkpoint is a " + ckpt.model_kind +
                         " model, expected vision: " + path);
  }
  VisionModelConfig config = ckpt.config.get<VisionModelConfig>();
  VisionModel<float> model = VisionModel<float>::init(config, 0);
  detail::fill_model_params(model, ckpt, path);
  return model;
}

}  // namespace protestlens
