#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "mgad/layers.hpp"
#include "mgad/schedule.hpp"

namespace mgad {

/// Binary parameter container.
///
/// Layout (little-endian): "MGAD", u32 version, 4-byte kind ("DEN\0" or
/// "EMB\0"), u32 header length, JSON header, u32 tensor count, then per tensor:
/// u32 name length, name, u32 rank, u64 dims, f64 data.
struct Checkpoint {
  std::string kind;  // "DEN" | "EMB"
  nlohmann::json header;
  ParamSet params;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(const std::string& bytes);
void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void to_json(nlohmann::json& j, const ScheduleSpec& s);
void from_json(const nlohmann::json& j, ScheduleSpec& s);

/// Whole-file helpers that raise IoError.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace mgad
