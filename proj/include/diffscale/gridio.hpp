#pragma once

// "DSG1" grid files: magic, u32 version (1), u32 channels, u32 height, u32 width,
// then each channel as row-major f32, all little endian.

#include <filesystem>
#include <vector>

#include "diffscale/binio.hpp"
#include "diffscale/grid.hpp"

namespace diffscale::gridio {

inline constexpr char kMagic[] = "DSG1";
inline constexpr std::uint32_t kVersion = 1;

inline void write_grid(const std::filesystem::path& path, const std::vector<Field>& channels)
{
    if (channels.empty()) throw UsageError("write_grid: no channels");
    const Field& first = channels.front();
    binio::Writer w;
    w.bytes({kMagic, 4});
    w.u32(kVersion);
    w.u32(static_cast<std::uint32_t>(channels.size()));
    w.u32(static_cast<std::uint32_t>(first.height()));
    w.u32(static_cast<std::uint32_t>(first.width()));
    for (const Field& ch : channels) {
        require_same_shape(first, ch, "write_grid");
        for (float v : ch.values()) w.f32(v);
    }
    w.save(path);
}

inline void write_grid(const std::filesystem::path& path, const Field& field)
{
    write_grid(path, std::vector<Field>{field});
}

inline std::vector<Field> read_grid(const std::filesystem::path& path)
{
    auto r = binio::Reader::open(path);
    const std::string magic = r.bytes(4);
    if (magic != std::string_view(kMagic, 4))
        throw BadMagicError("'" + path.string() + "' is not a DSG1 grid (magic \"" + binio::printable(magic) + "\")");
    const auto version = r.u32();
    if (version != kVersion)
        throw BadVersionError("'" + path.string() + "': unsupported DSG1 version " + std::to_string(version));
    const auto channels = r.u32();
    const auto height = r.u32();
    const auto width = r.u32();
    if (channels == 0 || height == 0 || width == 0)
        throw FormatError("'" + path.string() + "': zero-sized grid header");
    const std::size_t cells = static_cast<std::size_t>(height) * width;
    r.need(cells * channels * 4);
    std::vector<Field> out;
    out.reserve(channels);
    for (std::uint32_t c = 0; c < channels; ++c) {
        std::vector<float> vals(cells);
        for (auto& v : vals) v = r.f32();
        out.emplace_back(static_cast<int>(height), static_cast<int>(width), std::move(vals));
    }
    if (!r.at_end()) throw FormatError("'" + path.string() + "': trailing bytes after grid payload");
    return out;
}

} // namespace diffscale::gridio
