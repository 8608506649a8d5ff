#pragma once

// Portable tensor checkpoint ("HWTS"): magic, version u32, count u32, then per
// tensor a u16 name length + UTF-8 name, u8 rank, u32 dims and float32
// payload; a trailing CRC32 covers every preceding byte. Little-endian.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "hyperdys/autodiff.hpp"

namespace hyperdys::weights {

inline constexpr std::uint32_t kVersion = 1;

struct NamedTensor {
  std::string name;
  ad::Tensor<float> tensor;
};

std::vector<std::uint8_t> encode(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode(std::span<const std::uint8_t> bytes);

// Writes every parameter of the store in insertion order.
void save(const ad::ParamStore<float>& store, const std::filesystem::path& path);

// Loads every record in the file into the store. All records are validated
// against the store (names and shapes) before any parameter is modified.
// Parameters absent from the file are left untouched. Returns loaded names.
std::vector<std::string> load(const std::filesystem::path& path, ad::ParamStore<float>& store);
std::vector<std::string> load(std::span<const std::uint8_t> bytes, ad::ParamStore<float>& store);

}  // namespace hyperdys::weights
