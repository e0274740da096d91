#pragma once

// Weight container: magic "SHVW", format version u32 LE, header length u64 LE,
// UTF-8 JSON header (config + tensor manifest), then raw little-endian f32
// payload in manifest order. Writes go through a temp file and rename.

#include <stdexcept>
#include <string>

#include "shvit/model.hpp"

namespace shvit {

struct SerializeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct BadMagicError : SerializeError {
  using SerializeError::SerializeError;
};
struct VersionMismatchError : SerializeError {
  using SerializeError::SerializeError;
};
struct ManifestMismatchError : SerializeError {
  using SerializeError::SerializeError;
};
struct TruncatedPayloadError : SerializeError {
  using SerializeError::SerializeError;
};

inline constexpr uint32_t kWeightFormatVersion = 1;

void save_model(Model& model, const std::string& path);
Model load_model(const std::string& path);

// Single-tensor container (same framing) for classifier inputs.
void save_tensor(const Tensor& t, const std::string& name, const std::string& path);
Tensor load_tensor(const std::string& path, std::string* name_out = nullptr);

}  // namespace shvit
