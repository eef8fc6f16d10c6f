#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace rsvqa {

/// Record of one CLI run: command, resolved configuration, inputs, produced
/// files with their SHA-256 digests, wall-clock bounds. Written atomically
/// after everything else succeeded. Carries timestamps by design, so it is
/// the one output file excluded from byte-identity comparisons.
struct RunManifest {
  std::string command;
  std::string config_json;  // resolved flag values as a JSON object
  std::uint64_t seed = 0;
  std::vector<std::string> inputs;
  std::vector<std::filesystem::path> outputs;  // hashed at write time
  std::string started_at;                      // ISO-8601 UTC
  std::string finished_at;
};

std::string utc_timestamp_now();
void write_run_manifest(const std::filesystem::path& file, RunManifest manifest);

}  // namespace rsvqa
