#include "ngsll/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string_view>

namespace ngsll::checkpoint {

namespace {

constexpr std::string_view kMagic = "NGSLLCKP";

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[at + i]) << (8 * i);
  return v;
}

}  // namespace

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes a uInt length; feed large buffers in pieces.
  std::size_t done = 0;
  while (done < bytes.size()) {
    const std::size_t chunk = std::min<std::size_t>(bytes.size() - done, 1u << 30);
    crc = ::crc32(crc, bytes.data() + done, static_cast<uInt>(chunk));
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> serialize(model::Model& model, const nlohmann::json& metadata) {
  model.round_to_float();
  nlohmann::json header;
  header["config"] = model.config();
  header["metadata"] = metadata.is_null() ? nlohmann::json::object() : metadata;
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : model.parameters()) {
    params.push_back({{"name", p.name}, {"shape", p.value.shape()}});
  }
  header["parameters"] = params;
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& p : model.parameters()) {
    for (double v : p.value.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  put_u32(out, crc32(out));
  return out;
}

Loaded deserialize(std::span<const std::uint8_t> bytes) {
  const std::size_t fixed = kMagic.size() + 8;
  if (bytes.size() < fixed + 4) throw CheckpointError("checkpoint truncated: " +
                                                      std::to_string(bytes.size()) + " bytes");
  if (std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0) {
    throw CheckpointError("not a checkpoint (bad magic)");
  }
  const std::uint32_t version = get_u32(bytes, kMagic.size());
  if (version != kVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) +
                          " (expected " + std::to_string(kVersion) + ")");
  }
  const std::size_t body = bytes.size() - 4;
  const std::uint32_t stored = get_u32(bytes, body);
  if (crc32(bytes.first(body)) != stored) throw CheckpointError("checkpoint CRC mismatch");

  const std::size_t header_len = get_u32(bytes, kMagic.size() + 4);
  if (fixed + header_len > body) throw CheckpointError("checkpoint header overruns file");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(fixed),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(fixed + header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  model::ModelConfig config;
  try {
    config = header.at("config").get<model::ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint config: ") + e.what());
  }
  Loaded out{model::Model(config, 0), header.value("metadata", nlohmann::json::object())};
  auto& params = out.model.parameters();
  const auto& listed = header.at("parameters");
  if (listed.size() != params.size()) {
    throw CheckpointError("checkpoint lists " + std::to_string(listed.size()) +
                          " parameter(s); config implies " + std::to_string(params.size()));
  }
  std::size_t at = fixed + header_len;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto name = listed[i].at("name").get<std::string>();
    const auto shape = listed[i].at("shape").get<ad::Shape>();
    if (name != params[i].name || shape != params[i].value.shape()) {
      throw CheckpointError("checkpoint parameter '" + name + "' " + ad::to_string(shape) +
                            " does not match '" + params[i].name + "' " +
                            ad::to_string(params[i].value.shape()));
    }
    auto values = params[i].value.mutable_data();
    if (at + 4 * values.size() > body) throw CheckpointError("checkpoint payload truncated");
    for (double& v : values) {
      v = static_cast<double>(std::bit_cast<float>(get_u32(bytes, at)));
      at += 4;
    }
  }
  if (at != body) throw CheckpointError("checkpoint has " + std::to_string(body - at) +
                                        " trailing payload byte(s)");
  return out;
}

void save(const std::filesystem::path& path, model::Model& model, const nlohmann::json& metadata) {
  const auto bytes = serialize(model, metadata);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

Loaded load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace ngsll::checkpoint
