#pragma once

// Little-endian binary primitives shared by the checkpoint and grid containers.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "csipred/error.hpp"

namespace csipred::numkit {

class BinWriter {
public:
    void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }

    void u32(std::uint32_t v)
    {
        for (int i = 0; i < 4; ++i) {
            buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
        }
    }

    void u64(std::uint64_t v)
    {
        for (int i = 0; i < 8; ++i) {
            buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
        }
    }

    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

    const std::vector<char>& buffer() const noexcept { return buf_; }

    void save(const std::string& path) const
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot open '" + path + "' for writing");
        }
        out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
        if (!out) {
            throw IoError("write failed for '" + path + "'");
        }
    }

private:
    std::vector<char> buf_;
};

class BinReader {
public:
    explicit BinReader(std::vector<char> data) : buf_(std::move(data)) {}

    static BinReader load(const std::string& path)
    {
        std::ifstream in(path, std::ios::binary);
        if (!in) {
            throw IoError("cannot open '" + path + "' for reading");
        }
        std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return BinReader(std::move(data));
    }

    std::size_t remaining() const noexcept { return buf_.size() - pos_; }

    std::string bytes(std::size_t n)
    {
        need(n);
        std::string s(buf_.data() + pos_, n);
        pos_ += n;
        return s;
    }

    std::uint8_t u8()
    {
        need(1);
        return static_cast<std::uint8_t>(buf_[pos_++]);
    }

    std::uint32_t u32()
    {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_++])) << (8 * i);
        }
        return v;
    }

    std::uint64_t u64()
    {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_++])) << (8 * i);
        }
        return v;
    }

    double f64() { return std::bit_cast<double>(u64()); }

private:
    void need(std::size_t n) const
    {
        if (remaining() < n) {
            throw FormatError("truncated input: need " + std::to_string(n) + " bytes, have " +
                              std::to_string(remaining()));
        }
    }

    std::vector<char> buf_;
    std::size_t pos_ = 0;
};

}  // namespace csipred::numkit
