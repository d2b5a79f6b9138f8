#pragma once

// "DSPT" parameter checkpoints.
//
//   "DSPT" | u32 version | u32 tensor count
//   per tensor: u32 name length, UTF-8 name, u32 rank, u32 dims..., f32 data
//   u32 metadata line count, then per line: u32 length, UTF-8 "key=value"
//
// All integers and floats little endian. Files without the metadata block are accepted.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "diffscale/binio.hpp"
#include "diffscale/tensor.hpp"

namespace diffscale::ckpt {

inline constexpr char kMagic[] = "DSPT";
inline constexpr std::uint32_t kVersion = 1;

struct NamedTensor {
    std::string name;
    ad::Tensor<float> tensor;
};

struct Checkpoint {
    std::vector<NamedTensor> tensors;
    std::map<std::string, std::string> metadata;

    const ad::Tensor<float>& at(const std::string& name) const
    {
        for (const auto& t : tensors)
            if (t.name == name) return t.tensor;
        throw FormatError("checkpoint has no tensor named '" + name + "'");
    }
    const std::string& meta(const std::string& key) const
    {
        auto it = metadata.find(key);
        if (it == metadata.end()) throw FormatError("checkpoint metadata lacks key '" + key + "'");
        return it->second;
    }
};

inline void save(const std::filesystem::path& path, const Checkpoint& ck)
{
    binio::Writer w;
    w.bytes({kMagic, 4});
    w.u32(kVersion);
    w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
    for (const auto& nt : ck.tensors) {
        w.string(nt.name);
        w.u32(static_cast<std::uint32_t>(nt.tensor.rank()));
        for (int d : nt.tensor.shape) w.u32(static_cast<std::uint32_t>(d));
        for (float v : nt.tensor.data) w.f32(v);
    }
    w.u32(static_cast<std::uint32_t>(ck.metadata.size()));
    for (const auto& [k, v] : ck.metadata) {
        if (k.find('=') != std::string::npos || k.find('\n') != std::string::npos || v.find('\n') != std::string::npos)
            throw UsageError("checkpoint metadata key/value may not contain '=' in keys or newlines: " + k);
        w.string(k + "=" + v);
    }
    w.save(path);
}

inline Checkpoint load(const std::filesystem::path& path)
{
    auto r = binio::Reader::open(path);
    const std::string magic = r.bytes(4);
    if (magic != std::string_view(kMagic, 4))
        throw BadMagicError("'" + path.string() + "' is not a DSPT checkpoint (magic \"" + binio::printable(magic) + "\")");
    const auto version = r.u32();
    if (version != kVersion) throw BadVersionError("'" + path.string() + "': unsupported DSPT version " + std::to_string(version));
    Checkpoint ck;
    const auto count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor nt;
        nt.name = r.string();
        const auto rank = r.u32();
        ad::Shape shape;
        std::size_t n = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            shape.push_back(static_cast<int>(r.u32()));
            n *= static_cast<std::size_t>(shape.back());
        }
        r.need(n * 4);
        std::vector<float> data(n);
        for (auto& v : data) v = r.f32();
        nt.tensor = ad::Tensor<float>(std::move(shape), std::move(data));
        ck.tensors.push_back(std::move(nt));
    }
    if (!r.at_end()) {
        const auto lines = r.u32();
        for (std::uint32_t i = 0; i < lines; ++i) {
            const std::string line = r.string();
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw FormatError("'" + path.string() + "': metadata line without '='");
            ck.metadata[line.substr(0, eq)] = line.substr(eq + 1);
        }
        if (!r.at_end()) throw FormatError("'" + path.string() + "': trailing bytes after metadata");
    }
    return ck;
}

} // namespace diffscale::ckpt
