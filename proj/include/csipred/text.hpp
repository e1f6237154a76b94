#pragma once

#include <charconv>
#include <string>
#include <string_view>
#include <system_error>

#include "csipred/error.hpp"

namespace csipred {

/// Shortest decimal text that parses back to the identical double.
inline std::string format_double(double v)
{
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (ec != std::errc{}) {
        throw FormatError("format_double: conversion failed");
    }
    return {buf, end};
}

inline double parse_double(std::string_view s)
{
    double v = 0.0;
    auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || end != s.data() + s.size()) {
        throw FormatError("not a number: '" + std::string(s) + "'");
    }
    return v;
}

inline unsigned long long parse_u64(std::string_view s)
{
    unsigned long long v = 0;
    auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || end != s.data() + s.size()) {
        throw FormatError("not an unsigned integer: '" + std::string(s) + "'");
    }
    return v;
}

}  // namespace csipred
