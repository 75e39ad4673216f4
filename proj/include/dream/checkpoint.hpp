#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dream/tensor.hpp"

namespace dream {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  Shape shape;
  std::vector<double> data;
};

// Flat binary archive: "DRMT", u32 version, u32 count, then per entry
// u16 name length, name bytes, u8 rank, u64 extents, f64 data. All
// integers and floats little-endian regardless of host order.
using Checkpoint = std::map<std::string, CheckpointEntry>;

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Text blobs ride in rank-1 entries, one byte per double.
CheckpointEntry text_entry(const std::string& text);
std::string entry_text(const CheckpointEntry& e);

}  // namespace dream
