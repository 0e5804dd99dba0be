#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace dumo {

using Json = nlohmann::ordered_json;

/// Ordered name -> tensor map persisted as a flat binary archive.
///
/// Layout (little endian): magic "DMTA", u32 version, u32 entry count, then per
/// entry u32 name length, name bytes, u8 dtype (0 = f32, 1 = f64, 2 = i64),
/// u32 rank, i64 dims[rank], raw contiguous data.
using TensorMap = std::map<std::string, torch::Tensor>;

void save_tensors(const std::filesystem::path& path, const TensorMap& tensors);
TensorMap load_tensors(const std::filesystem::path& path);

/// Archive plus a `<path>.json` metadata sidecar.
void save_checkpoint(const std::filesystem::path& path, const TensorMap& tensors,
                     const Json& metadata);
Json load_sidecar(const std::filesystem::path& path);

std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_file(const std::filesystem::path& path);

/// Hash over sorted (name, dtype, shape, bytes) of every tensor.
std::string tensor_checksum(const TensorMap& tensors);

/// Named parameters and buffers of a module, keyed by their registered path.
TensorMap named_state(const torch::nn::Module& module);

/// Copies values by name into `module`; throws PreconditionError on any
/// missing name or shape mismatch.
void load_named_state(torch::nn::Module& module, const TensorMap& tensors,
                      const std::string& source);

std::string parameter_checksum(const torch::nn::Module& module);

}  // namespace dumo
