#pragma once

// Tapped-delay-line surrogate for NLOS UMi/UMa OFDM channels.
//
// Each (user, tap) carries a Rayleigh process built from M sinusoids with
// Jakes-distributed Doppler shifts (stratified arrival angles), so the tap
// autocorrelation follows J0(2 pi f_D dt). Taps sit on a uniform delay grid
// with an exponential power-delay profile normalized to unit power and
// scaled to the channel type's RMS delay spread. The BS side is a
// half-wavelength ULA; every tap has one angle of departure.
//
// These constants are surrogates chosen to keep the UMi/UMa contrast, not
// 38.901 values.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "csipred/error.hpp"
#include "csipred/numkit/rng.hpp"

namespace csipred::channel {

using cdouble = std::complex<double>;

inline constexpr double kSpeedOfLight = 299'792'458.0;
inline constexpr std::size_t kNumTaps = 8;
inline constexpr std::size_t kNumSinusoids = 32;
inline constexpr double kUmiDelaySpread = 100e-9;
inline constexpr double kUmaDelaySpread = 300e-9;
inline constexpr double kMaxAodRad = std::numbers::pi / 3.0;  // +-60 degrees

enum class ChannelType { UMi, UMa };

inline std::string to_string(ChannelType c) { return c == ChannelType::UMi ? "UMi" : "UMa"; }

inline ChannelType parse_channel_type(const std::string& s)
{
    if (s == "UMi" || s == "umi") {
        return ChannelType::UMi;
    }
    if (s == "UMa" || s == "uma") {
        return ChannelType::UMa;
    }
    throw ConfigError("unknown channel type '" + s + "'");
}

inline double rms_delay_spread_target(ChannelType c)
{
    return c == ChannelType::UMi ? kUmiDelaySpread : kUmaDelaySpread;
}

/// Observation SNR: a fixed dB value, the per-sample uniform draw over the
/// replication set ("all"), or noiseless.
struct Snr {
    enum class Kind { db, all, clean };
    Kind kind = Kind::db;
    double db = 0.0;

    static Snr fixed(double v) { return {Kind::db, v}; }
    static Snr all() { return {Kind::all, 0.0}; }
    static Snr clean() { return {Kind::clean, 0.0}; }

    friend bool operator==(const Snr&, const Snr&) = default;
};

/// The replication SNR set in dB.
inline const std::vector<double>& replication_snrs()
{
    static const std::vector<double> s{-30.0, -10.0, 0.0, 10.0, 30.0};
    return s;
}

inline const std::vector<double>& replication_speeds()
{
    static const std::vector<double> v{0.0, 10.0, 20.0, 30.0};
    return v;
}

struct ScenarioConfig {
    ChannelType channel = ChannelType::UMi;
    double speed_mps = 0.0;
    Snr snr = Snr::fixed(30.0);
    double carrier_hz = 5e9;
    double subcarrier_spacing_hz = 30e3;
    std::size_t n_subcarriers = 72;
    std::size_t n_symbols = 14;
    std::size_t n_tx = 1;
    std::size_t n_users = 1;
    std::uint64_t seed = 0;

    double slot_seconds() const { return 1e-3 * 15e3 / subcarrier_spacing_hz; }
    double symbol_seconds() const { return slot_seconds() / static_cast<double>(n_symbols); }

    void validate() const
    {
        if (!(speed_mps >= 0.0) || !(carrier_hz > 0.0) || !(subcarrier_spacing_hz > 0.0)) {
            throw ConfigError("scenario: speed must be >= 0, frequencies > 0");
        }
        if (n_subcarriers < 1 || n_symbols < 1 || n_tx < 1 || n_users < 1) {
            throw ConfigError("scenario: grid dimensions must be >= 1");
        }
    }

    friend bool operator==(const ScenarioConfig&, const ScenarioConfig&) = default;
};

/// Whether `cfg` lies on the replication grid (speeds, SNRs, carriers, spacing).
inline bool is_replication_scenario(const ScenarioConfig& cfg)
{
    auto in = [](const std::vector<double>& set, double v) {
        for (double s : set) {
            if (s == v) {
                return true;
            }
        }
        return false;
    };
    const bool snr_ok = cfg.snr.kind == Snr::Kind::all ||
                        (cfg.snr.kind == Snr::Kind::db && in(replication_snrs(), cfg.snr.db));
    return in(replication_speeds(), cfg.speed_mps) && snr_ok &&
           (cfg.carrier_hz == 5e9 || cfg.carrier_hz == 28e9) && cfg.subcarrier_spacing_hz == 30e3;
}

inline double max_doppler(double speed_mps, double carrier_hz)
{
    return speed_mps * carrier_hz / kSpeedOfLight;
}

/// Sum-of-sinusoids state of one (user, tap) fading process.
struct TapProcess {
    double aod = 0.0;                // radians
    std::vector<double> doppler_hz;  // f_D cos(alpha_m)
    std::vector<double> phase;       // phi_m

    friend bool operator==(const TapProcess&, const TapProcess&) = default;
};

struct TapSet {
    ChannelType channel = ChannelType::UMi;
    std::size_t n_users = 1;
    std::vector<double> delays;   // seconds, ascending
    std::vector<double> powers;   // linear, sums to 1
    std::vector<TapProcess> procs;  // index u * n_taps + l
    double time_origin = 0.0;

    std::size_t n_taps() const noexcept { return delays.size(); }
    const TapProcess& proc(std::size_t user, std::size_t tap) const { return procs[user * n_taps() + tap]; }

    friend bool operator==(const TapSet&, const TapSet&) = default;
};

inline double rms_delay_spread(const std::vector<double>& delays, const std::vector<double>& powers)
{
    double p = 0.0, m1 = 0.0, m2 = 0.0;
    for (std::size_t l = 0; l < delays.size(); ++l) {
        p += powers[l];
        m1 += powers[l] * delays[l];
        m2 += powers[l] * delays[l] * delays[l];
    }
    m1 /= p;
    m2 /= p;
    return std::sqrt(std::max(0.0, m2 - m1 * m1));
}

inline TapSet make_taps(const ScenarioConfig& cfg)
{
    cfg.validate();
    TapSet ts;
    ts.channel = cfg.channel;
    ts.n_users = cfg.n_users;

    // Exponential profile on a uniform grid in units of the decay constant,
    // then stretched so the discrete RMS spread hits the target exactly.
    constexpr double grid_step = 0.5;
    double total = 0.0;
    for (std::size_t l = 0; l < kNumTaps; ++l) {
        const double x = grid_step * static_cast<double>(l);
        ts.delays.push_back(x);
        ts.powers.push_back(std::exp(-x));
        total += ts.powers.back();
    }
    for (double& p : ts.powers) {
        p /= total;
    }
    const double stretch = rms_delay_spread_target(cfg.channel) / rms_delay_spread(ts.delays, ts.powers);
    for (double& d : ts.delays) {
        d *= stretch;
    }

    numkit::Rng rng(numkit::derive_seed({cfg.seed, numkit::tag_hash("make_taps")}));
    std::uniform_real_distribution<double> uphase(0.0, 2.0 * std::numbers::pi);
    std::uniform_real_distribution<double> utheta(-std::numbers::pi, std::numbers::pi);
    std::uniform_real_distribution<double> uaod(-kMaxAodRad, kMaxAodRad);
    std::uniform_real_distribution<double> uorigin(0.0, 1.0);
    const double fd = max_doppler(cfg.speed_mps, cfg.carrier_hz);
    const double m_count = static_cast<double>(kNumSinusoids);
    ts.time_origin = uorigin(rng);
    for (std::size_t u = 0; u < cfg.n_users; ++u) {
        for (std::size_t l = 0; l < kNumTaps; ++l) {
            TapProcess tp;
            tp.aod = uaod(rng);
            const double theta = utheta(rng);
            for (std::size_t m = 0; m < kNumSinusoids; ++m) {
                const double alpha =
                    (2.0 * std::numbers::pi * static_cast<double>(m) - std::numbers::pi + theta) / m_count;
                tp.doppler_hz.push_back(fd * std::cos(alpha));
                tp.phase.push_back(uphase(rng));
            }
            ts.procs.push_back(std::move(tp));
        }
    }
    return ts;
}

/// Complex gain of one tap process at absolute time t (seconds).
inline cdouble tap_gain(const TapSet& ts, std::size_t user, std::size_t tap, double t)
{
    const TapProcess& tp = ts.proc(user, tap);
    cdouble g{0.0, 0.0};
    for (std::size_t m = 0; m < tp.doppler_hz.size(); ++m) {
        g += std::polar(1.0, 2.0 * std::numbers::pi * tp.doppler_hz[m] * t + tp.phase[m]);
    }
    return g * std::sqrt(ts.powers[tap] / static_cast<double>(tp.doppler_hz.size()));
}

/// One slot of CSI, indexed (symbol, subcarrier, user, tx antenna).
struct CsiGrid {
    std::size_t n_symbols = 0;
    std::size_t n_subcarriers = 0;
    std::size_t n_users = 0;
    std::size_t n_tx = 0;
    std::vector<cdouble> h;
    std::int64_t slot_index = 0;
    double time_origin = 0.0;

    CsiGrid() = default;
    CsiGrid(std::size_t ns, std::size_t nf, std::size_t nu, std::size_t nt)
        : n_symbols(ns), n_subcarriers(nf), n_users(nu), n_tx(nt), h(ns * nf * nu * nt)
    {
    }

    std::size_t index(std::size_t s, std::size_t k, std::size_t u, std::size_t a) const
    {
        return ((s * n_subcarriers + k) * n_users + u) * n_tx + a;
    }
    cdouble& at(std::size_t s, std::size_t k, std::size_t u, std::size_t a) { return h[index(s, k, u, a)]; }
    const cdouble& at(std::size_t s, std::size_t k, std::size_t u, std::size_t a) const
    {
        return h[index(s, k, u, a)];
    }

    double mean_power() const
    {
        double p = 0.0;
        for (const auto& v : h) {
            p += std::norm(v);
        }
        return h.empty() ? 0.0 : p / static_cast<double>(h.size());
    }

    friend bool operator==(const CsiGrid&, const CsiGrid&) = default;
};

/// H[s,k,u,a] = sum_l g_{u,l}(t_s) steer(aod_{u,l}, a) exp(-j 2 pi k df tau_l),
/// t_s = time_origin + slot_index * T_slot + s * T_sym.
inline CsiGrid gen_slot(const TapSet& taps, const ScenarioConfig& cfg, std::int64_t slot_index)
{
    if (slot_index < 0) {
        throw ConfigError("gen_slot: slot_index must be >= 0");
    }
    if (taps.n_users != cfg.n_users) {
        throw ConfigError("gen_slot: tap set built for a different user count");
    }
    const std::size_t ns = cfg.n_symbols, nf = cfg.n_subcarriers, nu = cfg.n_users, nt = cfg.n_tx;
    const std::size_t nl = taps.n_taps();
    CsiGrid g(ns, nf, nu, nt);
    g.slot_index = slot_index;
    g.time_origin = taps.time_origin;

    std::vector<cdouble> freq(nf * nl);
    for (std::size_t k = 0; k < nf; ++k) {
        const double fk = static_cast<double>(k) * cfg.subcarrier_spacing_hz;
        for (std::size_t l = 0; l < nl; ++l) {
            freq[k * nl + l] = std::polar(1.0, -2.0 * std::numbers::pi * fk * taps.delays[l]);
        }
    }
    std::vector<cdouble> steer(nu * nl * nt);
    for (std::size_t u = 0; u < nu; ++u) {
        for (std::size_t l = 0; l < nl; ++l) {
            const double ph = std::numbers::pi * std::sin(taps.proc(u, l).aod);
            for (std::size_t a = 0; a < nt; ++a) {
                steer[(u * nl + l) * nt + a] = std::polar(1.0, ph * static_cast<double>(a));
            }
        }
    }
    const double t0 = taps.time_origin + static_cast<double>(slot_index) * cfg.slot_seconds();
    std::vector<cdouble> gains(nu * nl);
    for (std::size_t s = 0; s < ns; ++s) {
        const double t = t0 + static_cast<double>(s) * cfg.symbol_seconds();
        for (std::size_t u = 0; u < nu; ++u) {
            for (std::size_t l = 0; l < nl; ++l) {
                gains[u * nl + l] = tap_gain(taps, u, l, t);
            }
        }
        for (std::size_t k = 0; k < nf; ++k) {
            for (std::size_t u = 0; u < nu; ++u) {
                for (std::size_t a = 0; a < nt; ++a) {
                    cdouble acc{0.0, 0.0};
                    for (std::size_t l = 0; l < nl; ++l) {
                        acc += gains[u * nl + l] * steer[(u * nl + l) * nt + a] * freq[k * nl + l];
                    }
                    g.at(s, k, u, a) = acc;
                }
            }
        }
    }
    return g;
}

/// Adds circularly-symmetric complex Gaussian noise with per-entry variance
/// mean|H|^2 / 10^(snr_db/10).
inline CsiGrid add_awgn(const CsiGrid& grid, double snr_db, std::uint64_t seed)
{
    CsiGrid out = grid;
    const double noise_var = grid.mean_power() / std::pow(10.0, snr_db / 10.0);
    numkit::Rng rng(numkit::derive_seed({seed, numkit::tag_hash("awgn")}));
    std::normal_distribution<double> n(0.0, std::sqrt(noise_var / 2.0));
    for (auto& v : out.h) {
        const double re = n(rng);
        const double im = n(rng);
        v += cdouble{re, im};
    }
    return out;
}

}  // namespace csipred::channel
