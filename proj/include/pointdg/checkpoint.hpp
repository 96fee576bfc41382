#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pointdg/tensor.hpp"

namespace pointdg {

// Single-file checkpoint: "PDGM" magic, u32 format version, a manifest of
// (name, shape, offset) entries, then raw little-endian f64 payloads.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor>>& tensors);

std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path);

}  // namespace pointdg
