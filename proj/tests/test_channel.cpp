#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <numbers>

#include <gtest/gtest.h>

#include "csipred/channel.hpp"
#include "csipred/channel_io.hpp"
#include "oracles.hpp"

using namespace csipred;
using namespace csipred::channel;

namespace {

ScenarioConfig scenario(double v = 30.0, std::uint64_t seed = 1, ChannelType ch = ChannelType::UMi)
{
    ScenarioConfig c;
    c.channel = ch;
    c.speed_mps = v;
    c.seed = seed;
    return c;
}

TapSet single_tap(double doppler_hz, double aod)
{
    TapSet ts;
    ts.delays = {0.0};
    ts.powers = {1.0};
    TapProcess tp;
    tp.aod = aod;
    for (int m = 0; m < 4; ++m) {
        tp.doppler_hz.push_back(doppler_hz * std::cos(0.3 + m));
        tp.phase.push_back(0.7 * m);
    }
    ts.procs = {tp};
    return ts;
}

}  // namespace

TEST(Doppler, MaxDopplerValues)
{
    EXPECT_EQ(max_doppler(0.0, 5e9), 0.0);
    EXPECT_NEAR(max_doppler(30.0, 5e9), 500.35, 0.005);
    EXPECT_NEAR(max_doppler(30.0, 28e9), 2801.9, 0.05);
    EXPECT_DOUBLE_EQ(max_doppler(30.0, 5e9), 30.0 * 5e9 / 299'792'458.0);
}

TEST(Scenario, NumerologyAndValidation)
{
    const ScenarioConfig c;
    EXPECT_DOUBLE_EQ(c.slot_seconds(), 0.5e-3);
    EXPECT_EQ(c.n_symbols, 14u);
    EXPECT_TRUE(is_replication_scenario(c));
    ScenarioConfig off = c;
    off.speed_mps = 12.0;
    EXPECT_FALSE(is_replication_scenario(off));
    off = c;
    off.snr = Snr::all();
    off.carrier_hz = 28e9;
    EXPECT_TRUE(is_replication_scenario(off));
    off.speed_mps = -1.0;
    EXPECT_THROW(off.validate(), ConfigError);
    off = c;
    off.n_subcarriers = 0;
    EXPECT_THROW(off.validate(), ConfigError);
    EXPECT_THROW(parse_channel_type("RMa"), ConfigError);
}

TEST(Taps, PowersNormalizedAndDelaysSorted)
{
    for (auto ch : {ChannelType::UMi, ChannelType::UMa}) {
        const auto ts = make_taps(scenario(30.0, 5, ch));
        ASSERT_EQ(ts.n_taps(), 8u);
        double total = 0.0;
        for (double p : ts.powers) {
            total += p;
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
        EXPECT_EQ(ts.delays.front(), 0.0);
        EXPECT_TRUE(std::is_sorted(ts.delays.begin(), ts.delays.end()));
        EXPECT_NEAR(rms_delay_spread(ts.delays, ts.powers), rms_delay_spread_target(ch), 1e-18);
        for (const auto& tp : ts.procs) {
            EXPECT_EQ(tp.doppler_hz.size(), 32u);
            EXPECT_LE(std::abs(tp.aod), std::numbers::pi / 3.0);
        }
    }
}

TEST(Taps, DeterministicPerSeedAndUmaWider)
{
    EXPECT_EQ(make_taps(scenario(10.0, 3)), make_taps(scenario(10.0, 3)));
    EXPECT_NE(make_taps(scenario(10.0, 3)), make_taps(scenario(10.0, 4)));
    const auto mi = make_taps(scenario(10.0, 3, ChannelType::UMi));
    const auto ma = make_taps(scenario(10.0, 3, ChannelType::UMa));
    EXPECT_GT(rms_delay_spread(ma.delays, ma.powers), rms_delay_spread(mi.delays, mi.powers));
}

TEST(Slots, StaticChannelRepeatsAcrossSlots)
{
    const auto cfg = scenario(0.0, 9);
    const auto taps = make_taps(cfg);
    const auto a = gen_slot(taps, cfg, 3);
    const auto b = gen_slot(taps, cfg, 4);
    EXPECT_EQ(a.h, b.h);
    EXPECT_EQ(a.slot_index, 3);
    EXPECT_THROW(gen_slot(taps, cfg, -1), ConfigError);
}

TEST(Slots, SingleZeroDelayTapIsFlatInFrequency)
{
    ScenarioConfig cfg;
    const auto g = gen_slot(single_tap(300.0, 0.2), cfg, 2);
    for (std::size_t s = 0; s < g.n_symbols; ++s) {
        for (std::size_t k = 1; k < g.n_subcarriers; ++k) {
            EXPECT_EQ(g.at(s, k, 0, 0), g.at(s, 0, 0, 0));
        }
    }
}

TEST(Slots, UlaSteeringPhaseProgression)
{
    ScenarioConfig cfg;
    cfg.n_tx = 4;
    cfg.n_subcarriers = 3;
    const double aod = -0.4;
    const auto g = gen_slot(single_tap(100.0, aod), cfg, 0);
    for (std::size_t a = 0; a < 4; ++a) {
        const cdouble ratio = g.at(5, 1, 0, a) / g.at(5, 1, 0, 0);
        const cdouble expect = std::polar(1.0, std::numbers::pi * static_cast<double>(a) * std::sin(aod));
        EXPECT_LT(std::abs(ratio - expect), 1e-12);
    }
}

TEST(Slots, DeterministicAndShaped)
{
    auto cfg = scenario(20.0, 11);
    cfg.n_users = 2;
    cfg.n_tx = 3;
    cfg.n_subcarriers = 5;
    const auto taps = make_taps(cfg);
    const auto a = gen_slot(taps, cfg, 7);
    EXPECT_EQ(a, gen_slot(make_taps(cfg), cfg, 7));
    EXPECT_EQ(a.h.size(), 14u * 5u * 2u * 3u);
    for (const auto& v : a.h) {
        EXPECT_TRUE(std::isfinite(v.real()) && std::isfinite(v.imag()));
    }
    cfg.n_users = 1;
    EXPECT_THROW(gen_slot(taps, cfg, 0), ConfigError);
}

TEST(Slots, SymbolClockRunsContinuouslyAcrossSlots)
{
    const auto cfg = scenario(30.0, 12);
    const auto taps = make_taps(cfg);
    const auto next = gen_slot(taps, cfg, 20);
    // Symbol 0 of slot 20 sits one symbol after symbol 13 of slot 19.
    const double t = taps.time_origin + 19 * cfg.slot_seconds() + 14 * cfg.symbol_seconds();
    cdouble h{0.0, 0.0};
    for (std::size_t l = 0; l < taps.n_taps(); ++l) {
        h += tap_gain(taps, 0, l, t);
    }
    EXPECT_LT(std::abs(h - next.at(0, 0, 0, 0)), 1e-9);
}

TEST(Slots, BoundaryStepHasAdjacentSymbolStatistics)
{
    auto cfg = scenario(30.0);
    cfg.n_subcarriers = 1;
    double within = 0.0, across = 0.0;
    for (std::uint64_t seed = 0; seed < 2000; ++seed) {
        cfg.seed = seed;
        const auto taps = make_taps(cfg);
        const auto a = gen_slot(taps, cfg, 5);
        const auto b = gen_slot(taps, cfg, 6);
        within += std::norm(a.at(7, 0, 0, 0) - a.at(6, 0, 0, 0));
        across += std::norm(b.at(0, 0, 0, 0) - a.at(13, 0, 0, 0));
    }
    EXPECT_NEAR(across / within, 1.0, 0.1);
}

TEST(Slots, TapAutocorrelationFollowsBessel)
{
    const auto cfg = scenario(30.0);
    const double fd = max_doppler(30.0, 5e9);
    const double tsym = cfg.symbol_seconds();
    const std::size_t max_lag = 2 * cfg.n_symbols;
    std::vector<double> acc(max_lag + 1, 0.0);
    std::size_t count = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        auto c = cfg;
        c.seed = seed;
        const auto taps = make_taps(c);
        for (std::size_t l = 0; l < taps.n_taps(); ++l) {
            const cdouble g0 = tap_gain(taps, 0, l, taps.time_origin);
            for (std::size_t k = 0; k <= max_lag; ++k) {
                const cdouble gk = tap_gain(taps, 0, l, taps.time_origin + k * tsym);
                acc[k] += (g0 * std::conj(gk)).real() / taps.powers[l];
            }
            ++count;
        }
    }
    double se = 0.0;
    for (std::size_t k = 0; k <= max_lag; ++k) {
        const double ref = std::cyl_bessel_j(0.0, 2.0 * std::numbers::pi * fd * k * tsym);
        se += std::pow(acc[k] / static_cast<double>(count) - ref, 2);
    }
    EXPECT_LT(std::sqrt(se / static_cast<double>(max_lag + 1)), 0.05);
}

// One realization's power has spread near 1, so the mean of 10^4 seeds has a
// standard error near 0.01.
TEST(Slots, UnitMeanPowerInEveryCell)
{
    for (auto ch : {ChannelType::UMi, ChannelType::UMa}) {
        for (double v : replication_speeds()) {
            for (double fc : {5e9, 28e9}) {
                ScenarioConfig cfg = scenario(v, 0, ch);
                cfg.carrier_hz = fc;
                cfg.n_subcarriers = 12;
                double p = 0.0;
                for (std::uint64_t seed = 0; seed < 10'000; ++seed) {
                    cfg.seed = seed;
                    p += gen_slot(make_taps(cfg), cfg, static_cast<std::int64_t>(seed % 20)).mean_power();
                }
                EXPECT_NEAR(p / 10'000.0, 1.0, 0.05) << to_string(ch) << " v=" << v << " fc=" << fc;
            }
        }
    }
}

TEST(Noise, PowerFollowsSnrDefinition)
{
    ScenarioConfig cfg = scenario(10.0, 2);
    cfg.n_subcarriers = 720;  // 14 x 720 = 10080 entries
    const auto clean = gen_slot(make_taps(cfg), cfg, 0);
    for (double snr : {-30.0, -10.0, 0.0, 10.0, 30.0}) {
        const auto noisy = add_awgn(clean, snr, 77);
        double pn = 0.0;
        for (std::size_t i = 0; i < clean.h.size(); ++i) {
            pn += std::norm(noisy.h[i] - clean.h[i]);
        }
        pn /= static_cast<double>(clean.h.size());
        const double measured = 10.0 * std::log10(clean.mean_power() / pn);
        EXPECT_NEAR(measured, snr, 0.2);
    }
    EXPECT_EQ(add_awgn(clean, 5.0, 1), add_awgn(clean, 5.0, 1));
    EXPECT_NE(add_awgn(clean, 5.0, 1), add_awgn(clean, 5.0, 2));
}

TEST(GridIo, RoundTripIsBitwise)
{
    const auto dir = oracle::scratch_dir("grid");
    auto cfg = scenario(30.0, 4);
    cfg.n_users = 2;
    cfg.n_tx = 3;
    cfg.n_subcarriers = 6;
    cfg.snr = Snr::all();
    const auto g = add_awgn(gen_slot(make_taps(cfg), cfg, 3), 0.0, 5);
    const auto path = (dir / "g.csig").string();
    write_grid(path, g, cfg);
    const auto back = read_grid(path);
    EXPECT_EQ(back.h, g.h);
    EXPECT_EQ(back.n_symbols, 14u);
    EXPECT_EQ(back.n_tx, 3u);

    std::ifstream meta_in(path + ".json");
    const auto meta = json::parse(meta_in);
    EXPECT_EQ(scenario_from_json(meta["scenario"]), cfg);
    EXPECT_EQ(meta["slot_index"], 3);
    std::filesystem::remove_all(dir);
}

TEST(GridIo, CorruptFilesAreFormatErrors)
{
    const auto dir = oracle::scratch_dir("gridbad");
    ScenarioConfig cfg;
    cfg.n_subcarriers = 2;
    const auto path = (dir / "g.csig").string();
    write_grid(path, gen_slot(make_taps(cfg), cfg, 0));
    std::string bytes;
    {
        std::ifstream in(path, std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(in), {});
    }
    auto write = [&](const std::string& b) {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << b;
    };
    write(bytes.substr(0, bytes.size() - 8));
    EXPECT_THROW(read_grid(path), FormatError);
    write("XSIG" + bytes.substr(4));
    EXPECT_THROW(read_grid(path), FormatError);
    std::string v2 = bytes;
    v2[4] = 2;
    write(v2);
    EXPECT_THROW(read_grid(path), FormatError);
    write(bytes + "extra!!!");
    EXPECT_THROW(read_grid(path), FormatError);
    EXPECT_THROW(read_grid((dir / "missing.csig").string()), IoError);
    std::filesystem::remove_all(dir);
}

TEST(ScenarioText, JsonRoundTripAndSnrTokens)
{
    ScenarioConfig c = scenario(20.0, 99, ChannelType::UMa);
    c.carrier_hz = 28e9;
    c.n_tx = 20;
    c.n_users = 5;
    c.n_subcarriers = 12;
    for (const Snr& s : {Snr::fixed(-10.0), Snr::all(), Snr::clean()}) {
        c.snr = s;
        EXPECT_EQ(scenario_from_json(to_json(c)), c);
    }
    EXPECT_EQ(parse_snr("all"), Snr::all());
    EXPECT_EQ(parse_snr("-30"), Snr::fixed(-30.0));
    EXPECT_EQ(to_string(Snr::all()), "all");
    EXPECT_THROW(scenario_from_json(json{{"channel", "RMa"}}), ConfigError);
    EXPECT_THROW(scenario_from_json(json{{"speed_mps", "fast"}}), ConfigError);
    EXPECT_EQ(scenario_from_json(json::object()), ScenarioConfig{});
}
