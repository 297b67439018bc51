#pragma once

// Binary checkpoint container:
//
//   "NGSLLCKP" | u32 version | u32 header length | JSON header
//   | float32 payload per parameter (little-endian) | u32 CRC-32 of all preceding bytes
//
// The header carries the model config, parameter names and shapes, and any
// caller metadata (feature names, vocabulary, dataset digest).

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "json.hpp"
#include "ngsll/model.hpp"

namespace ngsll::checkpoint {

inline constexpr std::uint32_t kVersion = 1;

/// Rounds `model` to float32 in place, so the live model and the stored copy
/// predict identically, then serializes it.
std::vector<std::uint8_t> serialize(model::Model& model, const nlohmann::json& metadata = {});

struct Loaded {
  model::Model model;
  nlohmann::json metadata;
};

Loaded deserialize(std::span<const std::uint8_t> bytes);

void save(const std::filesystem::path& path, model::Model& model,
          const nlohmann::json& metadata = {});
Loaded load(const std::filesystem::path& path);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

}  // namespace ngsll::checkpoint
