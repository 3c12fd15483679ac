#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "popmeta/agents.hpp"

namespace popmeta {

/// Checkpoint layout: the 8-byte magic "PMCKPT01", a little-endian uint64
/// header length, a UTF-8 JSON header (architecture, world hash, metadata,
/// segment names and shapes), then every segment's values as little-endian
/// float64 in declared order.
inline constexpr char kCheckpointMagic[9] = "PMCKPT01";

struct Checkpoint {
  Model model;
  std::uint64_t world_hash = 0;
  nlohmann::json metadata = nlohmann::json::object();
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace popmeta
