#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "xmodal/autograd.hpp"

namespace xmodal {

// Binary parameter file: an 8-byte little-endian header length, a JSON header
// (format version, caller metadata, tensor name -> offset/shape table), then
// the tensors as little-endian float32 in table order.
struct Checkpoint {
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
  ParameterSet<float> params;
};

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace xmodal
