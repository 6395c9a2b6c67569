#pragma once

// Adapter checkpoint file: binary, little-endian. Header is the magic
// "FRAI", a u32 format version and a u32 round index, followed by one
// record per target: u32 name length + UTF-8 name, dims as 4 x u32
// (rank, in, out, reserved=0), then A and B row-major as f64. Round-trips
// are bit-exact.

#include <string>

#include "fedrai/model.hpp"

namespace fedrai::model {

inline constexpr uint32_t kCheckpointVersion = 1;

void write_adapter_checkpoint(const std::string& path, const AdapterSet& adapter);
AdapterSet read_adapter_checkpoint(const std::string& path);

}  // namespace fedrai::model
