#pragma once

// Little-endian primitives shared by the DSG1 grid and DSPT checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <filesystem>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "diffscale/errors.hpp"

namespace diffscale::binio {

class Writer {
public:
    void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
    void u32(std::uint32_t v)
    {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void string(std::string_view s)
    {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s);
    }
    const std::vector<char>& buffer() const noexcept { return buf_; }

    void save(const std::filesystem::path& path) const
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot open '" + path.string() + "' for writing");
        out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
        if (!out) throw Error("write failed for '" + path.string() + "'");
    }

private:
    std::vector<char> buf_;
};

class Reader {
public:
    Reader(std::vector<char> data, std::string source) : data_(std::move(data)), source_(std::move(source)) {}

    static Reader open(const std::filesystem::path& path)
    {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw MissingInputError("cannot open '" + path.string() + "'");
        std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return Reader(std::move(data), path.string());
    }

    std::string bytes(std::size_t n)
    {
        need(n);
        std::string s(data_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    std::uint32_t u32()
    {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string string() { return bytes(u32()); }

    std::size_t remaining() const noexcept { return data_.size() - pos_; }
    bool at_end() const noexcept { return pos_ == data_.size(); }
    const std::string& source() const noexcept { return source_; }

    void need(std::size_t n) const
    {
        if (remaining() < n)
            throw TruncatedError("truncated file '" + source_ + "': needed " + std::to_string(n) + " bytes at offset " +
                                 std::to_string(pos_) + ", only " + std::to_string(remaining()) + " left");
    }

private:
    std::vector<char> data_;
    std::string source_;
    std::size_t pos_ = 0;
};

inline std::string printable(std::string_view magic)
{
    std::string out;
    for (unsigned char ch : magic) {
        if (ch >= 0x20 && ch < 0x7F) {
            out.push_back(static_cast<char>(ch));
        } else {
            static const char* hex = "0123456789abcdef";
            out += "\\x";
            out.push_back(hex[ch >> 4]);
            out.push_back(hex[ch & 15]);
        }
    }
    return out;
}

} // namespace diffscale::binio
