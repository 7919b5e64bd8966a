#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace mdlab {

// FNV-1a 64-bit; the manifest hash of every input and output file.
uint64_t fnv1a64(const void* data, size_t size);
std::string file_hash_hex(const std::string& path);

// Every run writes a manifest echoing the fully resolved configuration plus
// hashes of the files it read and wrote; re-running from a manifest must
// reproduce the outputs bit-exactly.
struct Manifest {
  std::string command;
  std::map<std::string, std::string> config;
  std::map<std::string, std::string> inputs;   // path -> hash
  std::map<std::string, std::string> outputs;  // path -> hash
};

void save_manifest(const std::string& path, const Manifest& manifest);
Manifest load_manifest(const std::string& path);

}  // namespace mdlab
