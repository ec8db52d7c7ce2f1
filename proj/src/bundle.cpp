// SPDX-License-Identifier: Apache-2.0
#include "unccache/bundle.hpp"

#include "unccache/prng.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "bundle I/O writes host-order f32 and declares it little-endian");

namespace unc {

namespace {
constexpr char kMagic[4] = {'U', 'N', 'C', 'T'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kAlign = 64;

std::size_t align_up(std::size_t n) {
    return (n + kAlign - 1) / kAlign * kAlign;
}
} // namespace

void TensorBundle::add(const std::string& name, std::vector<std::size_t> shape,
                       std::vector<float> data) {
    std::size_t count = 1;
    for (std::size_t s : shape)
        count *= s;
    if (count != data.size())
        throw BundleError("tensor '" + name + "' shape/data mismatch");
    if (!entries.emplace(name, Entry{std::move(shape), std::move(data)}).second)
        throw BundleError("tensor '" + name + "' added twice");
    names.push_back(name);
}

const TensorBundle::Entry& TensorBundle::get(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end())
        throw BundleError("tensor '" + name + "' missing from bundle");
    return it->second;
}

void save_bundle(const TensorBundle& bundle, const std::string& path) {
    // Two passes: size the header with real offsets, then emit.
    nlohmann::ordered_json tensors = nlohmann::ordered_json::object();
    for (const auto& name : bundle.names) {
        const auto& e = bundle.get(name);
        nlohmann::ordered_json t;
        t["shape"] = e.shape;
        t["dtype"] = "f32";
        t["offset"] = 0;
        tensors[name] = std::move(t);
    }
    nlohmann::ordered_json header;
    header["meta"] = bundle.meta.is_null() ? nlohmann::ordered_json::object() : bundle.meta;
    header["tensors"] = std::move(tensors);

    // Offsets feed back into the header text; iterate until the layout is
    // stable (offset digit growth can ripple once).
    std::string header_text;
    std::vector<std::size_t> offsets(bundle.names.size(), 0);
    for (int pass = 0; pass < 4; ++pass) {
        header_text = header.dump();
        std::size_t cursor = align_up(16 + header_text.size());
        bool changed = false;
        for (std::size_t i = 0; i < bundle.names.size(); ++i) {
            if (offsets[i] != cursor) {
                offsets[i] = cursor;
                header["tensors"][bundle.names[i]]["offset"] = cursor;
                changed = true;
            }
            cursor = align_up(cursor + bundle.get(bundle.names[i]).data.size() * sizeof(float));
        }
        if (!changed)
            break;
    }
    header_text = header.dump();

    std::string out;
    out.reserve(offsets.empty() ? 16 + header_text.size()
                                : offsets.back() + bundle.get(bundle.names.back()).data.size() * 4);
    out.append(kMagic, 4);
    const std::uint32_t version = kVersion;
    out.append(reinterpret_cast<const char*>(&version), 4);
    const std::uint64_t hlen = header_text.size();
    out.append(reinterpret_cast<const char*>(&hlen), 8);
    out.append(header_text);
    for (std::size_t i = 0; i < bundle.names.size(); ++i) {
        out.resize(offsets[i], '\0');
        const auto& data = bundle.get(bundle.names[i]).data;
        out.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(float));
    }
    write_file_atomic(path, out);
}

TensorBundle load_bundle(const std::string& path) {
    const std::string bytes = read_file(path);
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw BundleError(path + ": not a tensor bundle (bad magic)");
    std::uint32_t version;
    std::memcpy(&version, bytes.data() + 4, 4);
    if (version != kVersion)
        throw BundleError(path + ": unsupported bundle version " + std::to_string(version));
    std::uint64_t hlen;
    std::memcpy(&hlen, bytes.data() + 8, 8);
    if (16 + hlen > bytes.size())
        throw BundleError(path + ": truncated header");

    nlohmann::ordered_json header;
    try {
        header = nlohmann::ordered_json::parse(bytes.substr(16, hlen));
    } catch (const nlohmann::json::exception& e) {
        throw BundleError(path + ": corrupt header: " + e.what());
    }

    TensorBundle bundle;
    bundle.meta = header.value("meta", nlohmann::ordered_json::object());
    if (!header.contains("tensors") || !header["tensors"].is_object())
        throw BundleError(path + ": header lacks tensor table");
    for (const auto& [name, t] : header["tensors"].items()) {
        if (t.value("dtype", "") != "f32")
            throw BundleError(path + ": tensor '" + name + "' has unsupported dtype");
        const std::vector<std::size_t> shape = t.at("shape").get<std::vector<std::size_t>>();
        const std::size_t offset = t.at("offset").get<std::size_t>();
        std::size_t count = 1;
        for (std::size_t s : shape)
            count *= s;
        if (offset % kAlign != 0)
            throw BundleError(path + ": tensor '" + name + "' misaligned");
        if (offset + count * sizeof(float) > bytes.size())
            throw BundleError(path + ": tensor '" + name + "' runs past end of file");
        std::vector<float> data(count);
        std::memcpy(data.data(), bytes.data() + offset, count * sizeof(float));
        bundle.add(name, shape, std::move(data));
    }
    return bundle;
}

std::uint64_t bundle_fingerprint(const TensorBundle& bundle) {
    Fnv1a64 h;
    for (const auto& name : bundle.names) {
        const auto& data = bundle.get(name).data;
        h.update(data.data(), data.size() * sizeof(float));
    }
    return h.hash;
}

std::string fingerprint_string(std::uint64_t fp) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "fnv1a64:%016llx", static_cast<unsigned long long>(fp));
    return buf;
}

void write_file_atomic(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f)
            throw BundleError("cannot open " + tmp + " for writing");
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f)
            throw BundleError("short write to " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec)
        throw BundleError("rename " + tmp + " -> " + path + ": " + ec.message());
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f)
        throw BundleError("cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return bytes;
}

} // namespace unc
