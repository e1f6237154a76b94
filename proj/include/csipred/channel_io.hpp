#pragma once

// Scenario text form and the CSIG grid container.
//
// CSIG layout (little-endian):
//   "CSIG" | u32 version (=1) | u64 n_symbols | u64 n_subcarriers |
//   u64 n_users | u64 n_tx | f64 re, f64 im per entry in (s, k, u, a) order
// A sidecar "<file>.json" carries the full scenario plus slot index and
// time origin.

#include <fstream>
#include <string>

#include <json.hpp>

#include "csipred/channel.hpp"
#include "csipred/error.hpp"
#include "csipred/numkit/binio.hpp"
#include "csipred/text.hpp"

namespace csipred::channel {

using json = nlohmann::json;

inline constexpr std::uint32_t kGridVersion = 1;

inline std::string to_string(const Snr& s)
{
    switch (s.kind) {
    case Snr::Kind::all:
        return "all";
    case Snr::Kind::clean:
        return "clean";
    default:
        return format_double(s.db);
    }
}

inline Snr parse_snr(const std::string& s)
{
    if (s == "all") {
        return Snr::all();
    }
    if (s == "clean" || s == "inf") {
        return Snr::clean();
    }
    return Snr::fixed(parse_double(s));
}

inline json snr_to_json(const Snr& s)
{
    if (s.kind == Snr::Kind::db) {
        return s.db;
    }
    return to_string(s);
}

inline Snr snr_from_json(const json& j)
{
    if (j.is_number()) {
        return Snr::fixed(j.get<double>());
    }
    if (j.is_string()) {
        return parse_snr(j.get<std::string>());
    }
    throw ConfigError("snr must be a number, \"all\" or \"clean\"");
}

inline json to_json(const ScenarioConfig& c)
{
    return json{{"channel", to_string(c.channel)},
                {"speed_mps", c.speed_mps},
                {"snr", snr_to_json(c.snr)},
                {"carrier_hz", c.carrier_hz},
                {"subcarrier_spacing_hz", c.subcarrier_spacing_hz},
                {"n_subcarriers", c.n_subcarriers},
                {"n_symbols", c.n_symbols},
                {"n_tx", c.n_tx},
                {"n_users", c.n_users},
                {"seed", c.seed}};
}

/// Missing keys keep their defaults.
inline ScenarioConfig scenario_from_json(const json& j)
{
    ScenarioConfig c;
    try {
        if (j.contains("channel")) {
            c.channel = parse_channel_type(j.at("channel").get<std::string>());
        }
        c.speed_mps = j.value("speed_mps", c.speed_mps);
        if (j.contains("snr")) {
            c.snr = snr_from_json(j.at("snr"));
        }
        c.carrier_hz = j.value("carrier_hz", c.carrier_hz);
        c.subcarrier_spacing_hz = j.value("subcarrier_spacing_hz", c.subcarrier_spacing_hz);
        c.n_subcarriers = j.value("n_subcarriers", c.n_subcarriers);
        c.n_symbols = j.value("n_symbols", c.n_symbols);
        c.n_tx = j.value("n_tx", c.n_tx);
        c.n_users = j.value("n_users", c.n_users);
        c.seed = j.value("seed", c.seed);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("scenario: ") + e.what());
    }
    c.validate();
    return c;
}

inline void write_grid(const std::string& path, const CsiGrid& g)
{
    numkit::BinWriter w;
    w.bytes("CSIG");
    w.u32(kGridVersion);
    w.u64(g.n_symbols);
    w.u64(g.n_subcarriers);
    w.u64(g.n_users);
    w.u64(g.n_tx);
    for (const auto& v : g.h) {
        w.f64(v.real());
        w.f64(v.imag());
    }
    w.save(path);
}

/// Writes the container and its scenario sidecar.
inline void write_grid(const std::string& path, const CsiGrid& g, const ScenarioConfig& cfg)
{
    write_grid(path, g);
    json meta{{"scenario", to_json(cfg)},
              {"slot_index", g.slot_index},
              {"time_origin", g.time_origin},
              {"shape", {g.n_symbols, g.n_subcarriers, g.n_users, g.n_tx}}};
    std::ofstream out(path + ".json");
    if (!out) {
        throw IoError("cannot write sidecar '" + path + ".json'");
    }
    out << meta.dump(2) << '\n';
}

inline CsiGrid read_grid(const std::string& path)
{
    auto r = numkit::BinReader::load(path);
    if (r.bytes(4) != "CSIG") {
        throw FormatError("'" + path + "': bad magic");
    }
    const std::uint32_t version = r.u32();
    if (version != kGridVersion) {
        throw FormatError("'" + path + "': unsupported version " + std::to_string(version));
    }
    const std::uint64_t ns = r.u64(), nf = r.u64(), nu = r.u64(), nt = r.u64();
    const std::uint64_t n = ns * nf * nu * nt;
    const bool overflow = ns && n / ns != nf * nu * nt;
    if (overflow || n > r.remaining() / 16 || r.remaining() != n * 16) {
        throw FormatError("'" + path + "': payload does not match shape");
    }
    CsiGrid g(ns, nf, nu, nt);
    for (auto& v : g.h) {
        const double re = r.f64();
        const double im = r.f64();
        v = {re, im};
    }
    return g;
}

}  // namespace csipred::channel
