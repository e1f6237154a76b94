#pragma once

// Next-slot prediction task: grid <-> sequence mapping and dataset building.
//
// A slot grid (N_s x N_f x N_u x N_t, complex) becomes an N_s x E real
// matrix, E = 2 N_f N_u N_t. Row s holds the real parts of H[s, ., ., .]
// flattened in (k, u, a) lexicographic order, followed by the imaginary parts
// in the same order.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "csipred/channel.hpp"
#include "csipred/channel_io.hpp"
#include "csipred/error.hpp"
#include "csipred/numkit/mat.hpp"
#include "csipred/numkit/rng.hpp"
#include "csipred/text.hpp"

namespace csipred::task {

using channel::CsiGrid;
using channel::ScenarioConfig;
using channel::Snr;
using channel::TapSet;
using numkit::Mat;

struct SeqSample {
    Mat input;   // N_s x E, noisy observation of slot i
    Mat target;  // N_s x E, slot i + 1
    ScenarioConfig scenario;  // seed field holds the tap seed
    std::int64_t slot_index = 0;
    std::uint64_t noise_seed = 0;
    /// Realized SNR in dB; +inf when noiseless.
    double snr_db = std::numeric_limits<double>::infinity();
    /// Shared factor applied to input and target.
    double scale = 1.0;
};

struct PairOptions {
    bool noise_on_input = true;
    bool noise_on_target = false;
    bool normalize = true;
};

struct DatasetSpec {
    std::size_t n_train = 256;
    std::size_t n_test = 64;
    ScenarioConfig train_scenario;
    ScenarioConfig test_scenario;
    PairOptions options;
    std::uint64_t seed = 0;
};

struct Dataset {
    std::vector<SeqSample> train;
    std::vector<SeqSample> test;
};

enum class Split : std::uint64_t { train = 1, test = 2 };

inline std::size_t feature_dim(std::size_t nf, std::size_t nu, std::size_t nt) { return 2 * nf * nu * nt; }

inline std::size_t feature_dim(const ScenarioConfig& c)
{
    return feature_dim(c.n_subcarriers, c.n_users, c.n_tx);
}

inline Mat grid_to_sequence(const CsiGrid& g)
{
    const std::size_t half = g.n_subcarriers * g.n_users * g.n_tx;
    Mat m(g.n_symbols, 2 * half);
    for (std::size_t s = 0; s < g.n_symbols; ++s) {
        auto row = m.row(s);
        const auto* src = &g.h[g.index(s, 0, 0, 0)];
        for (std::size_t j = 0; j < half; ++j) {
            row[j] = src[j].real();
            row[half + j] = src[j].imag();
        }
    }
    return m;
}

inline CsiGrid sequence_to_grid(const Mat& m, std::size_t nf, std::size_t nu, std::size_t nt)
{
    const std::size_t half = nf * nu * nt;
    if (m.cols() != 2 * half) {
        throw ShapeError("sequence_to_grid: " + std::to_string(m.cols()) + " features but grid needs " +
                         std::to_string(2 * half));
    }
    CsiGrid g(m.rows(), nf, nu, nt);
    for (std::size_t s = 0; s < m.rows(); ++s) {
        auto row = m.row(s);
        auto* dst = &g.h[g.index(s, 0, 0, 0)];
        for (std::size_t j = 0; j < half; ++j) {
            dst[j] = {row[j], row[half + j]};
        }
    }
    return g;
}

/// SNR for one sample: the fixed value, or a uniform pick from the
/// replication set when the scenario asks for "all".
inline double draw_snr(const Snr& snr, std::uint64_t noise_seed)
{
    switch (snr.kind) {
    case Snr::Kind::clean:
        return std::numeric_limits<double>::infinity();
    case Snr::Kind::all: {
        numkit::Rng rng(numkit::derive_seed({noise_seed, numkit::tag_hash("snr_pick")}));
        const auto& set = channel::replication_snrs();
        std::uniform_int_distribution<std::size_t> pick(0, set.size() - 1);
        return set[pick(rng)];
    }
    default:
        return snr.db;
    }
}

/// Input from slot i (noisy), target from slot i + 1 of the same tap process.
/// With `normalize`, both are scaled by one factor giving the clean
/// (slot i, slot i + 1) sequence pair unit mean square. Slots of a stationary
/// process are exchangeable, so the expected target mean square is exactly 1.
inline SeqSample make_pair(const TapSet& taps, const ScenarioConfig& cfg, std::int64_t slot_index,
                           std::uint64_t noise_seed, const PairOptions& opts = {})
{
    if (slot_index < 0) {
        throw ConfigError("make_pair: slot_index must be >= 0");
    }
    SeqSample smp;
    smp.scenario = cfg;
    smp.slot_index = slot_index;
    smp.noise_seed = noise_seed;
    smp.snr_db = draw_snr(cfg.snr, noise_seed);

    const CsiGrid cur = channel::gen_slot(taps, cfg, slot_index);
    const CsiGrid next = channel::gen_slot(taps, cfg, slot_index + 1);
    const bool noisy = std::isfinite(smp.snr_db);
    const CsiGrid in = noisy && opts.noise_on_input
                           ? channel::add_awgn(cur, smp.snr_db, numkit::derive_seed({noise_seed, 0}))
                           : cur;
    const CsiGrid out = noisy && opts.noise_on_target
                            ? channel::add_awgn(next, smp.snr_db, numkit::derive_seed({noise_seed, 1}))
                            : next;
    smp.input = grid_to_sequence(in);
    smp.target = grid_to_sequence(out);
    if (opts.normalize) {
        const double p = 0.5 * (numkit::mean_square(grid_to_sequence(cur)) +
                                numkit::mean_square(grid_to_sequence(next)));
        smp.scale = p > 0.0 ? 1.0 / std::sqrt(p) : 1.0;
        smp.input = numkit::scale(smp.input, smp.scale);
        smp.target = numkit::scale(smp.target, smp.scale);
    }
    return smp;
}

inline std::size_t slots_per_frame(const ScenarioConfig& c)
{
    return static_cast<std::size_t>(std::llround(10e-3 / c.slot_seconds()));
}

inline std::uint64_t tap_seed(std::uint64_t base, Split split, std::size_t i)
{
    return numkit::derive_seed({base, static_cast<std::uint64_t>(split), i, numkit::tag_hash("taps")});
}

inline std::uint64_t noise_seed(std::uint64_t base, Split split, std::size_t i)
{
    return numkit::derive_seed({base, static_cast<std::uint64_t>(split), i, numkit::tag_hash("noise")});
}

/// One fresh tap process per sample; slot indices cycle through a radio frame
/// so within- and cross-subframe transitions both appear.
inline std::vector<SeqSample> build_split(const ScenarioConfig& scenario, std::size_t n, std::uint64_t base_seed,
                                          Split split, const PairOptions& opts = {})
{
    std::vector<SeqSample> out;
    out.reserve(n);
    const std::size_t per_frame = slots_per_frame(scenario);
    for (std::size_t i = 0; i < n; ++i) {
        ScenarioConfig cfg = scenario;
        cfg.seed = tap_seed(base_seed, split, i);
        const TapSet taps = channel::make_taps(cfg);
        out.push_back(make_pair(taps, cfg, static_cast<std::int64_t>(i % per_frame), noise_seed(base_seed, split, i),
                                opts));
    }
    return out;
}

inline Dataset build_dataset(const DatasetSpec& spec)
{
    if (spec.n_train < 1 || spec.n_test < 1) {
        throw ConfigError("build_dataset: sample counts must be >= 1");
    }
    if (feature_dim(spec.train_scenario) != feature_dim(spec.test_scenario) ||
        spec.train_scenario.n_symbols != spec.test_scenario.n_symbols) {
        throw ConfigError("build_dataset: train and test scenarios have different grid shapes");
    }
    return {build_split(spec.train_scenario, spec.n_train, spec.seed, Split::train, spec.options),
            build_split(spec.test_scenario, spec.n_test, spec.seed, Split::test, spec.options)};
}

// Dataset export: one CSIG pair per sample plus manifest.txt with one line
//   <split> <index> <tap_seed> <noise_seed> <slot_index> <snr_db> <scale>
// The scenario of each sample is in the sidecar of its input grid.

inline void write_dataset(const std::filesystem::path& dir, const Dataset& ds)
{
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create '" + dir.string() + "': " + ec.message());
    }
    std::ofstream manifest(dir / "manifest.txt");
    if (!manifest) {
        throw IoError("cannot write manifest in '" + dir.string() + "'");
    }
    auto dump = [&](const std::vector<SeqSample>& v, const char* name) {
        for (std::size_t i = 0; i < v.size(); ++i) {
            const auto& s = v[i];
            const auto& c = s.scenario;
            const std::string stem = (dir / (std::string(name) + "_" + std::to_string(i))).string();
            channel::write_grid(stem + "_input.csig",
                                sequence_to_grid(s.input, c.n_subcarriers, c.n_users, c.n_tx), c);
            channel::write_grid(stem + "_target.csig",
                                sequence_to_grid(s.target, c.n_subcarriers, c.n_users, c.n_tx));
            manifest << name << ' ' << i << ' ' << c.seed << ' ' << s.noise_seed << ' ' << s.slot_index << ' '
                     << format_double(s.snr_db) << ' ' << format_double(s.scale) << '\n';
        }
    };
    dump(ds.train, "train");
    dump(ds.test, "test");
    if (!manifest) {
        throw IoError("manifest write failed in '" + dir.string() + "'");
    }
}

inline Dataset read_dataset(const std::filesystem::path& dir)
{
    std::ifstream manifest(dir / "manifest.txt");
    if (!manifest) {
        throw IoError("no manifest in '" + dir.string() + "'");
    }
    Dataset ds;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) {
            continue;
        }
        std::istringstream ls(line);
        std::string split, idx, tap, noise, slot, snr, scale;
        if (!(ls >> split >> idx >> tap >> noise >> slot >> snr >> scale) ||
            (split != "train" && split != "test")) {
            throw FormatError("manifest: malformed line '" + line + "'");
        }
        const std::string stem = (dir / (split + "_" + idx)).string();
        std::ifstream meta_in(stem + "_input.csig.json");
        if (!meta_in) {
            throw IoError("missing sidecar for '" + stem + "'");
        }
        const auto meta = channel::json::parse(meta_in, nullptr, false);
        if (meta.is_discarded() || !meta.contains("scenario")) {
            throw FormatError("bad sidecar for '" + stem + "'");
        }
        SeqSample s;
        s.scenario = channel::scenario_from_json(meta["scenario"]);
        s.scenario.seed = parse_u64(tap);
        s.noise_seed = parse_u64(noise);
        s.slot_index = static_cast<std::int64_t>(parse_u64(slot));
        s.snr_db = snr == "inf" ? std::numeric_limits<double>::infinity() : parse_double(snr);
        s.scale = parse_double(scale);
        s.input = grid_to_sequence(channel::read_grid(stem + "_input.csig"));
        s.target = grid_to_sequence(channel::read_grid(stem + "_target.csig"));
        (split == "train" ? ds.train : ds.test).push_back(std::move(s));
    }
    return ds;
}

}  // namespace csipred::task
