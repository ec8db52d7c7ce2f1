// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <json.hpp>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace unc {

struct BundleError : std::runtime_error {
    explicit BundleError(const std::string& m) : std::runtime_error(m) {}
};

// Flat container for named f32 tensors plus a JSON metadata block.
//
// On-disk layout (all integers little-endian):
//   [0..4)   magic "UNCT"
//   [4..8)   format version, u32 (currently 1)
//   [8..16)  header length in bytes, u64
//   [16..)   header JSON: {"meta": {...}, "tensors": {name: {"shape": [...],
//            "dtype": "f32", "offset": N}}}
//   each tensor blob starts at the 64-byte-aligned absolute offset recorded
//   in the header; values are row-major f32.
// Writers emit tensors in insertion order with sorted-key JSON, so identical
// bundles are byte-identical.
struct TensorBundle {
    struct Entry {
        std::vector<std::size_t> shape;
        std::vector<float> data;
    };

    std::vector<std::string> names; // insertion order == blob order
    std::unordered_map<std::string, Entry> entries;
    nlohmann::ordered_json meta;

    void add(const std::string& name, std::vector<std::size_t> shape, std::vector<float> data);
    bool has(const std::string& name) const { return entries.count(name) != 0; }
    const Entry& get(const std::string& name) const;
};

void save_bundle(const TensorBundle& bundle, const std::string& path);
TensorBundle load_bundle(const std::string& path);

// FNV-1a over the raw f32 bytes of every tensor in blob order. Identifies
// the weights independently of the metadata block.
std::uint64_t bundle_fingerprint(const TensorBundle& bundle);
std::string fingerprint_string(std::uint64_t fp); // "fnv1a64:<16 hex digits>"

// Write-to-temp-then-rename, so readers never observe a half-written file.
void write_file_atomic(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);

} // namespace unc
