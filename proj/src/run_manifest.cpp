#include "rsvqa/run_manifest.hpp"

#include <chrono>
#include <ctime>

#include "json.hpp"
#include "rsvqa/errors.hpp"
#include "rsvqa/io.hpp"

namespace rsvqa {

using nlohmann::json;

std::string utc_timestamp_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_run_manifest(const std::filesystem::path& file, RunManifest manifest) {
  manifest.finished_at = utc_timestamp_now();
  json j;
  j["command"] = manifest.command;
  try {
    j["config"] = manifest.config_json.empty() ? json::object() : json::parse(manifest.config_json);
  } catch (const json::exception& e) {
    throw Error(std::string("run manifest config is not valid JSON: ") + e.what());
  }
  j["seed"] = manifest.seed;
  j["inputs"] = manifest.inputs;
  j["outputs"] = json::array();
  for (const auto& path : manifest.outputs) {
    j["outputs"].push_back({{"path", path.string()}, {"sha256", sha256_file(path)}});
  }
  j["started_at"] = manifest.started_at;
  j["finished_at"] = manifest.finished_at;
  write_file_atomic(file, j.dump(2) + "\n");
}

}  // namespace rsvqa
