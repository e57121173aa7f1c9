#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace ctxlm::manifest {

/// SHA-256 hex digest of a byte string.
std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

/// Content hash of a canonicalized config JSON (sorted keys).
std::string config_hash(const nlohmann::json& config);

/// Every CLI run writes a sidecar manifest next to its primary output:
/// command, config + hash, seed, input-file hashes. Timestamps go to the
/// separate .log sidecar only, so outputs stay byte-reproducible.
struct RunManifest {
  std::string command;
  nlohmann::json* config = nullptr;  // borrowed, optional
  std::uint64_t seed = 0;
  std::vector<std::filesystem::path> inputs;
  std::vector<std::filesystem::path> outputs;
};

void write_manifest(const RunManifest& manifest,
                    const std::filesystem::path& output_stem);

}  // namespace ctxlm::manifest
