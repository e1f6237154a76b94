#pragma once

// Experiment matrix driver: one trained model per train coordinate
// (model, channel, carrier, train speed, train SNR), evaluated on every test
// coordinate (test speed, test SNR). Each cell lives in
//   <output_dir>/cells/<16 hex digits>/{cell.json, model.ckpt}
// and cell.json is written last, so its presence marks the cell complete.

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "csipred/channel.hpp"
#include "csipred/channel_io.hpp"
#include "csipred/error.hpp"
#include "csipred/numkit/rng.hpp"
#include "csipred/task.hpp"
#include "csipred/text.hpp"
#include "csipred/trainer.hpp"

namespace csipred::sweep {

namespace fs = std::filesystem;
using json = nlohmann::json;
using channel::ChannelType;
using channel::Snr;
using trainer::ModelKind;

enum class Geometry { siso, mimo };
enum class SpeedPairing { cartesian, matched };

struct SweepSpec {
    std::vector<ModelKind> models{ModelKind::msa, ModelKind::ssm};
    std::vector<ChannelType> channels{ChannelType::UMi};
    std::vector<double> carrier_frequencies{5e9};
    std::vector<double> train_speeds{0.0};
    std::vector<Snr> train_snrs{Snr::fixed(30.0)};
    std::vector<double> test_speeds{0.0};
    std::vector<Snr> test_snrs{Snr::fixed(-30), Snr::fixed(-10), Snr::fixed(0), Snr::fixed(10), Snr::fixed(30)};
    /// `matched` evaluates each model only at its own train speed.
    SpeedPairing speed_pairing = SpeedPairing::cartesian;
    Geometry geometry = Geometry::siso;
    std::size_t n_subcarriers = 72;
    std::size_t n_tx = 1;
    std::size_t n_users = 1;
    std::size_t n_train = 256;
    std::size_t n_test = 64;
    std::size_t epochs = 1000;
    std::size_t batch_size = 32;
    std::size_t eval_every = 1;
    std::size_t tail_window = 100;
    double lr = 1e-3;
    std::size_t state_dim = 64;
    std::size_t heads = 2;
    std::string output_dir = "sweep_out";
    std::size_t parallelism = 1;
    std::uint64_t master_seed = 0;

    void validate() const;
};

inline std::string to_string(Geometry g) { return g == Geometry::siso ? "siso" : "mimo"; }
inline std::string to_string(SpeedPairing p) { return p == SpeedPairing::cartesian ? "cartesian" : "matched"; }

inline void SweepSpec::validate() const
{
    auto nonempty = [](bool empty, const char* what) {
        if (empty) {
            throw ConfigError(std::string("sweep spec: '") + what + "' must not be empty");
        }
    };
    nonempty(models.empty(), "models");
    nonempty(channels.empty(), "channels");
    nonempty(carrier_frequencies.empty(), "carrier_frequencies");
    nonempty(train_speeds.empty(), "train_speeds");
    nonempty(train_snrs.empty(), "train_snrs");
    nonempty(test_speeds.empty() && speed_pairing == SpeedPairing::cartesian, "test_speeds");
    nonempty(test_snrs.empty(), "test_snrs");
    nonempty(output_dir.empty(), "output_dir");
    for (double v : train_speeds) {
        if (!(v >= 0.0)) {
            throw ConfigError("sweep spec: speeds must be >= 0");
        }
    }
    for (double v : test_speeds) {
        if (!(v >= 0.0)) {
            throw ConfigError("sweep spec: speeds must be >= 0");
        }
    }
    for (double f : carrier_frequencies) {
        if (!(f > 0.0)) {
            throw ConfigError("sweep spec: carrier frequencies must be > 0");
        }
    }
    if (n_subcarriers < 1 || n_tx < 1 || n_users < 1 || n_train < 1 || n_test < 1) {
        throw ConfigError("sweep spec: grid dimensions and dataset sizes must be >= 1");
    }
    if (batch_size < 1 || eval_every < 1 || parallelism < 1 || state_dim < 1 || heads < 1) {
        throw ConfigError("sweep spec: batch_size, eval_every, parallelism, state_dim, heads must be >= 1");
    }
    if (epochs > 0 && (tail_window < 1 || tail_window > epochs / eval_every)) {
        throw ConfigError("sweep spec: tail_window must lie in [1, epochs / eval_every]");
    }
    if (!(lr > 0.0)) {
        throw ConfigError("sweep spec: lr must be > 0");
    }
}

// ---------------------------------------------------------------------------
// Spec text form

inline json to_json(const SweepSpec& s)
{
    json models = json::array(), channels = json::array(), train_snrs = json::array(), test_snrs = json::array();
    for (auto m : s.models) {
        models.push_back(trainer::to_string(m));
    }
    for (auto c : s.channels) {
        channels.push_back(channel::to_string(c));
    }
    for (const auto& v : s.train_snrs) {
        train_snrs.push_back(channel::snr_to_json(v));
    }
    for (const auto& v : s.test_snrs) {
        test_snrs.push_back(channel::snr_to_json(v));
    }
    return json{{"models", models},
                {"channels", channels},
                {"carrier_frequencies", s.carrier_frequencies},
                {"train_speeds", s.train_speeds},
                {"train_snrs", train_snrs},
                {"test_speeds", s.test_speeds},
                {"test_snrs", test_snrs},
                {"speed_pairing", to_string(s.speed_pairing)},
                {"geometry", to_string(s.geometry)},
                {"n_subcarriers", s.n_subcarriers},
                {"n_tx", s.n_tx},
                {"n_users", s.n_users},
                {"n_train", s.n_train},
                {"n_test", s.n_test},
                {"epochs", s.epochs},
                {"batch_size", s.batch_size},
                {"eval_every", s.eval_every},
                {"tail_window", s.tail_window},
                {"lr", s.lr},
                {"state_dim", s.state_dim},
                {"heads", s.heads},
                {"output_dir", s.output_dir},
                {"parallelism", s.parallelism},
                {"master_seed", s.master_seed}};
}

/// Unknown keys are rejected. Geometry "mimo" switches the grid to
/// 12 subcarriers x 5 users x 20 antennas and halves both dataset sizes;
/// explicit keys still win.
inline SweepSpec spec_from_json(const json& j)
{
    static const char* const known[] = {
        "models",      "channels",   "carrier_frequencies", "train_speeds", "train_snrs",  "test_speeds",
        "test_snrs",   "speed_pairing", "geometry",        "n_subcarriers", "n_tx",       "n_users",
        "n_train",     "n_test",     "epochs",              "batch_size",   "eval_every",  "tail_window",
        "lr",          "state_dim",  "heads",               "output_dir",   "parallelism", "master_seed"};
    if (!j.is_object()) {
        throw ConfigError("sweep spec: expected a JSON object");
    }
    for (const auto& [key, _] : j.items()) {
        if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return key == k; }) ==
            std::end(known)) {
            throw ConfigError("sweep spec: unknown key '" + key + "'");
        }
    }

    SweepSpec s;
    try {
        if (j.contains("geometry")) {
            const auto g = j.at("geometry").get<std::string>();
            if (g == "mimo") {
                s.geometry = Geometry::mimo;
                s.n_subcarriers = 12;
                s.n_tx = 20;
                s.n_users = 5;
                s.n_train /= 2;
                s.n_test /= 2;
            } else if (g != "siso") {
                throw ConfigError("sweep spec: geometry must be 'siso' or 'mimo'");
            }
        }
        if (j.contains("models")) {
            s.models.clear();
            for (const auto& m : j.at("models")) {
                s.models.push_back(trainer::parse_model_kind(m.get<std::string>()));
            }
        }
        if (j.contains("channels")) {
            s.channels.clear();
            for (const auto& c : j.at("channels")) {
                s.channels.push_back(channel::parse_channel_type(c.get<std::string>()));
            }
        }
        auto snr_list = [&](const char* key, std::vector<Snr>& out) {
            if (j.contains(key)) {
                out.clear();
                for (const auto& v : j.at(key)) {
                    out.push_back(channel::snr_from_json(v));
                }
            }
        };
        snr_list("train_snrs", s.train_snrs);
        snr_list("test_snrs", s.test_snrs);
        if (j.contains("speed_pairing")) {
            const auto p = j.at("speed_pairing").get<std::string>();
            if (p == "matched") {
                s.speed_pairing = SpeedPairing::matched;
            } else if (p != "cartesian") {
                throw ConfigError("sweep spec: speed_pairing must be 'cartesian' or 'matched'");
            }
        }
        s.carrier_frequencies = j.value("carrier_frequencies", s.carrier_frequencies);
        s.train_speeds = j.value("train_speeds", s.train_speeds);
        s.test_speeds = j.value("test_speeds", s.test_speeds);
        s.n_subcarriers = j.value("n_subcarriers", s.n_subcarriers);
        s.n_tx = j.value("n_tx", s.n_tx);
        s.n_users = j.value("n_users", s.n_users);
        s.n_train = j.value("n_train", s.n_train);
        s.n_test = j.value("n_test", s.n_test);
        s.epochs = j.value("epochs", s.epochs);
        s.batch_size = j.value("batch_size", s.batch_size);
        s.eval_every = j.value("eval_every", s.eval_every);
        s.tail_window = j.value("tail_window", s.tail_window);
        s.lr = j.value("lr", s.lr);
        s.state_dim = j.value("state_dim", s.state_dim);
        s.heads = j.value("heads", s.heads);
        s.output_dir = j.value("output_dir", s.output_dir);
        s.parallelism = j.value("parallelism", s.parallelism);
        s.master_seed = j.value("master_seed", s.master_seed);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("sweep spec: ") + e.what());
    }
    s.validate();
    return s;
}

inline SweepSpec load_spec(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read spec '" + path.string() + "'");
    }
    const json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) {
        throw ConfigError("spec '" + path.string() + "' is not valid JSON");
    }
    return spec_from_json(j);
}

// ---------------------------------------------------------------------------
// Cells and report rows

struct CellKey {
    ModelKind model = ModelKind::msa;
    ChannelType channel = ChannelType::UMi;
    double fc_hz = 5e9;
    double v_train = 0.0;
    Snr snr_train;

    friend bool operator==(const CellKey&, const CellKey&) = default;
};

struct ReportRow {
    ModelKind model = ModelKind::msa;
    ChannelType channel = ChannelType::UMi;
    double fc_hz = 0.0;
    double v_train = 0.0;
    Snr snr_train;
    double v_test = 0.0;
    Snr snr_test;
    double mse = 0.0;
    double mse_copy = 0.0;
    double mse_zero = 0.0;
    std::uint64_t flops_fwd = 0;
    double seconds = 0.0;
    std::uint64_t seed = 0;

    CellKey key() const { return {model, channel, fc_hz, v_train, snr_train}; }
    friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

struct EvalReport {
    std::vector<ReportRow> rows;
    std::vector<std::string> notes;

    friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

inline const char* kFlopsNote =
    "flops_fwd counts multiply-accumulates of one forward pass. MSA: 4*N*D^2 + 2*N^2*D "
    "(QKV and output projections plus score and mixing products). The closed form "
    "4*N*D^2 + 2*N*D^2 sometimes quoted for this layer contradicts that itemization and is not used.";

struct CellOutcome {
    CellKey key;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;  // set when training diverged
    std::optional<trainer::RunRecord> record;
    std::vector<ReportRow> rows;
    bool resumed = false;
};

struct SweepResult {
    EvalReport report;
    std::vector<CellOutcome> cells;
    std::size_t trained = 0;
    std::size_t skipped = 0;
};

inline std::uint64_t snr_code(const Snr& s)
{
    switch (s.kind) {
    case Snr::Kind::all:
        return numkit::tag_hash("snr:all");
    case Snr::Kind::clean:
        return numkit::tag_hash("snr:clean");
    default:
        return std::bit_cast<std::uint64_t>(s.db);
    }
}

inline std::uint64_t bits(double v) { return std::bit_cast<std::uint64_t>(v == 0.0 ? 0.0 : v); }

/// Training set seed; independent of the model so every model of one
/// coordinate sees the same samples.
inline std::uint64_t train_data_seed(const SweepSpec& s, const CellKey& k)
{
    return numkit::derive_seed({s.master_seed, numkit::tag_hash("train_data"), static_cast<std::uint64_t>(k.channel),
                                bits(k.fc_hz), bits(k.v_train), snr_code(k.snr_train)});
}

/// Test set seed. Shared across test SNRs, so SNR curves differ only in the
/// noise level, not in the channel draws.
inline std::uint64_t test_data_seed(const SweepSpec& s, ChannelType c, double fc, double v_test)
{
    return numkit::derive_seed(
        {s.master_seed, numkit::tag_hash("test_data"), static_cast<std::uint64_t>(c), bits(fc), bits(v_test)});
}

inline std::uint64_t cell_seed(const SweepSpec& s, const CellKey& k)
{
    return numkit::derive_seed({s.master_seed, numkit::tag_hash("cell"), static_cast<std::uint64_t>(k.model),
                                static_cast<std::uint64_t>(k.channel), bits(k.fc_hz), bits(k.v_train),
                                snr_code(k.snr_train)});
}

/// Directory hash: the coordinates plus every setting that changes the
/// cell's result, so edited specs never resume stale cells.
inline std::string cell_hash(const SweepSpec& s, const CellKey& k)
{
    std::uint64_t h = cell_seed(s, k);
    std::vector<std::uint64_t> settings{s.n_subcarriers, s.n_tx,        s.n_users,   s.n_train,  s.n_test,
                                        s.epochs,        s.batch_size,  s.eval_every, s.tail_window,
                                        bits(s.lr),      s.state_dim,   s.heads,
                                        static_cast<std::uint64_t>(s.speed_pairing)};
    for (double v : s.test_speeds) {
        settings.push_back(bits(v));
    }
    settings.push_back(numkit::tag_hash("test_snrs"));
    for (const auto& v : s.test_snrs) {
        settings.push_back(snr_code(v));
    }
    for (auto v : settings) {
        h = numkit::derive_seed({h, v});
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

/// All train coordinates in canonical order.
inline std::vector<CellKey> enumerate_cells(const SweepSpec& s)
{
    std::vector<CellKey> out;
    for (auto m : s.models) {
        for (auto c : s.channels) {
            for (double fc : s.carrier_frequencies) {
                for (double v : s.train_speeds) {
                    for (const auto& snr : s.train_snrs) {
                        out.push_back({m, c, fc, v, snr});
                    }
                }
            }
        }
    }
    return out;
}

inline std::vector<double> test_speeds_for(const SweepSpec& s, const CellKey& k)
{
    return s.speed_pairing == SpeedPairing::matched ? std::vector<double>{k.v_train} : s.test_speeds;
}

inline channel::ScenarioConfig scenario_for(const SweepSpec& s, ChannelType c, double fc, double v, const Snr& snr)
{
    channel::ScenarioConfig cfg;
    cfg.channel = c;
    cfg.carrier_hz = fc;
    cfg.speed_mps = v;
    cfg.snr = snr;
    cfg.n_subcarriers = s.n_subcarriers;
    cfg.n_tx = s.n_tx;
    cfg.n_users = s.n_users;
    cfg.validate();
    return cfg;
}

inline std::vector<task::SeqSample> test_set(const SweepSpec& s, ChannelType c, double fc, double v, const Snr& snr)
{
    return task::build_split(scenario_for(s, c, fc, v, snr), s.n_test, test_data_seed(s, c, fc, v),
                             task::Split::test);
}

inline trainer::TrainConfig train_config(const SweepSpec& s, const CellKey& k)
{
    trainer::TrainConfig cfg;
    cfg.model = k.model;
    cfg.epochs = s.epochs;
    cfg.batch_size = s.batch_size;
    cfg.eval_every = s.eval_every;
    cfg.tail_window = s.tail_window;
    cfg.adam.lr = s.lr;
    cfg.seed = cell_seed(s, k);
    cfg.heads = s.heads;
    cfg.state_dim = s.state_dim;
    return cfg;
}

// ---------------------------------------------------------------------------
// Row and cell serialization

inline json row_to_json(const ReportRow& r)
{
    return json{{"model", trainer::to_string(r.model)},
                {"channel", channel::to_string(r.channel)},
                {"fc_hz", r.fc_hz},
                {"v_train", r.v_train},
                {"snr_train", channel::snr_to_json(r.snr_train)},
                {"v_test", r.v_test},
                {"snr_test", channel::snr_to_json(r.snr_test)},
                {"mse", r.mse},
                {"mse_copy", r.mse_copy},
                {"mse_zero", r.mse_zero},
                {"flops_fwd", r.flops_fwd},
                {"seconds", r.seconds},
                {"seed", r.seed}};
}

inline ReportRow row_from_json(const json& j)
{
    try {
        ReportRow r;
        r.model = trainer::parse_model_kind(j.at("model").get<std::string>());
        r.channel = channel::parse_channel_type(j.at("channel").get<std::string>());
        r.fc_hz = j.at("fc_hz");
        r.v_train = j.at("v_train");
        r.snr_train = channel::snr_from_json(j.at("snr_train"));
        r.v_test = j.at("v_test");
        r.snr_test = channel::snr_from_json(j.at("snr_test"));
        r.mse = j.at("mse");
        r.mse_copy = j.at("mse_copy");
        r.mse_zero = j.at("mse_zero");
        r.flops_fwd = j.at("flops_fwd");
        r.seconds = j.at("seconds");
        r.seed = j.at("seed");
        return r;
    } catch (const json::exception& e) {
        throw FormatError(std::string("report row: ") + e.what());
    }
}

inline std::string describe(const CellKey& k)
{
    return "model=" + trainer::to_string(k.model) + " channel=" + channel::to_string(k.channel) +
           " fc_hz=" + format_double(k.fc_hz) + " v_train=" + format_double(k.v_train) +
           " snr_train=" + channel::to_string(k.snr_train);
}

inline json cell_to_json(const CellOutcome& c)
{
    json rows = json::array();
    for (const auto& r : c.rows) {
        rows.push_back(row_to_json(r));
    }
    json j{{"key",
            {{"model", trainer::to_string(c.key.model)},
             {"channel", channel::to_string(c.key.channel)},
             {"fc_hz", c.key.fc_hz},
             {"v_train", c.key.v_train},
             {"snr_train", channel::snr_to_json(c.key.snr_train)}}},
           {"seed", c.seed},
           {"status", c.ok ? "ok" : "diverged"},
           {"error", c.error},
           {"rows", rows}};
    if (c.record) {
        j["record"] = trainer::to_json(*c.record);
    }
    return j;
}

inline CellOutcome cell_from_json(const json& j)
{
    try {
        CellOutcome c;
        const auto& k = j.at("key");
        c.key = {trainer::parse_model_kind(k.at("model").get<std::string>()),
                 channel::parse_channel_type(k.at("channel").get<std::string>()), k.at("fc_hz"), k.at("v_train"),
                 channel::snr_from_json(k.at("snr_train"))};
        c.seed = j.at("seed");
        c.ok = j.at("status") == "ok";
        c.error = j.at("error");
        for (const auto& r : j.at("rows")) {
            c.rows.push_back(row_from_json(r));
        }
        if (j.contains("record")) {
            c.record = trainer::run_record_from_json(j.at("record"));
        }
        return c;
    } catch (const json::exception& e) {
        throw FormatError(std::string("cell record: ") + e.what());
    }
}

inline void write_text_atomic(const fs::path& path, const std::string& text)
{
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out || !(out << text) || !out.flush()) {
            throw IoError("cannot write '" + tmp.string() + "'");
        }
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        throw IoError("cannot rename into '" + path.string() + "': " + ec.message());
    }
}

inline std::optional<CellOutcome> load_cell(const fs::path& dir)
{
    std::ifstream in(dir / "cell.json");
    if (!in) {
        return std::nullopt;
    }
    const json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) {
        return std::nullopt;
    }
    return cell_from_json(j);
}

// ---------------------------------------------------------------------------
// Running

/// Trains and evaluates one cell. Divergence is captured in the outcome.
inline CellOutcome run_cell(const SweepSpec& s, const CellKey& k, const fs::path& dir)
{
    CellOutcome out;
    out.key = k;
    out.seed = cell_seed(s, k);

    const auto train_scn = scenario_for(s, k.channel, k.fc_hz, k.v_train, k.snr_train);
    const auto train_set =
        task::build_split(train_scn, s.n_train, train_data_seed(s, k), task::Split::train);
    const auto id_test = test_set(s, k.channel, k.fc_hz, k.v_train, k.snr_train);

    struct TestCoord {
        double v;
        Snr snr;
    };
    std::vector<TestCoord> coords;
    std::vector<std::vector<task::SeqSample>> extras;
    for (double v : test_speeds_for(s, k)) {
        for (const auto& snr : s.test_snrs) {
            coords.push_back({v, snr});
            extras.push_back(test_set(s, k.channel, k.fc_hz, v, snr));
        }
    }

    try {
        auto res = trainer::train(train_config(s, k), train_set, id_test, extras);
        trainer::checkpoint_save(res.params, (dir / "model.ckpt").string());
        for (std::size_t i = 0; i < coords.size(); ++i) {
            ReportRow r;
            r.model = k.model;
            r.channel = k.channel;
            r.fc_hz = k.fc_hz;
            r.v_train = k.v_train;
            r.snr_train = k.snr_train;
            r.v_test = coords[i].v;
            r.snr_test = coords[i].snr;
            r.mse = res.extra_reported[i];
            r.mse_copy = trainer::baseline_copy(extras[i]);
            r.mse_zero = trainer::baseline_zero(extras[i]);
            r.flops_fwd = res.record.flops_fwd;
            r.seconds = res.record.seconds;
            r.seed = out.seed;
            out.rows.push_back(r);
        }
        out.record = std::move(res.record);
        out.ok = true;
    } catch (const TrainingError& e) {
        out.ok = false;
        out.error = e.what();
    }
    return out;
}

inline fs::path cell_dir(const SweepSpec& s, const CellKey& k) { return fs::path(s.output_dir) / "cells" / cell_hash(s, k); }

inline void ensure_writable(const fs::path& dir)
{
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create '" + dir.string() + "': " + ec.message());
    }
    const fs::path probe = dir / ".write_probe";
    {
        std::ofstream out(probe);
        if (!out || !(out << 'x') || !out.flush()) {
            throw IoError("output directory '" + dir.string() + "' is not writable");
        }
    }
    fs::remove(probe, ec);
}

inline EvalReport assemble_report(const std::vector<CellOutcome>& cells)
{
    EvalReport rep;
    for (const auto& c : cells) {
        if (c.ok) {
            rep.rows.insert(rep.rows.end(), c.rows.begin(), c.rows.end());
        } else {
            rep.notes.push_back("diverged: " + describe(c.key) + ": " + c.error);
        }
    }
    rep.notes.push_back(kFlopsNote);
    return rep;
}

inline std::string emit_report(const EvalReport& rep, const std::string& format);

/// Runs every missing cell (up to `parallelism` at once), then writes
/// report.csv and report.json into the output directory.
inline SweepResult run_sweep(const SweepSpec& spec, std::ostream* log = nullptr)
{
    spec.validate();
    const fs::path root(spec.output_dir);
    ensure_writable(root / "cells");
    write_text_atomic(root / "spec.json", to_json(spec).dump(2) + "\n");

    const auto keys = enumerate_cells(spec);
    SweepResult result;
    result.cells.resize(keys.size());
    std::vector<bool> todo(keys.size(), false);
    for (std::size_t i = 0; i < keys.size(); ++i) {
        if (auto done = load_cell(cell_dir(spec, keys[i])); done && done->key == keys[i]) {
            result.cells[i] = std::move(*done);
            result.cells[i].resumed = true;
            ++result.skipped;
        } else {
            todo[i] = true;
        }
    }

    std::mutex log_mu;
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex err_mu;
    auto worker = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < keys.size();) {
            if (!todo[i]) {
                continue;
            }
            try {
                const fs::path dir = cell_dir(spec, keys[i]);
                ensure_writable(dir);
                CellOutcome c = run_cell(spec, keys[i], dir);
                write_text_atomic(dir / "cell.json", cell_to_json(c).dump(1) + "\n");
                if (log) {
                    std::lock_guard lk(log_mu);
                    *log << (c.ok ? "done " : "diverged ") << describe(keys[i]) << "\n" << std::flush;
                }
                result.cells[i] = std::move(c);
            } catch (...) {
                std::lock_guard lk(err_mu);
                if (!first_error) {
                    first_error = std::current_exception();
                }
                next = keys.size();
            }
        }
    };
    const std::size_t n_threads = std::min(spec.parallelism, std::max<std::size_t>(1, keys.size()));
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < n_threads; ++t) {
            pool.emplace_back(worker);
        }
    }
    if (first_error) {
        std::rethrow_exception(first_error);
    }
    for (bool t : todo) {
        result.trained += t ? 1 : 0;
    }

    result.report = assemble_report(result.cells);
    write_text_atomic(root / "report.csv", emit_report(result.report, "csv"));
    write_text_atomic(root / "report.json", emit_report(result.report, "json"));
    return result;
}

/// Completed cells of a sweep directory, in the spec's canonical order.
/// Cells not yet run are listed in `missing`.
struct Collected {
    SweepSpec spec;
    std::vector<CellOutcome> cells;
    std::vector<CellKey> missing;
};

inline Collected collect(const fs::path& dir)
{
    Collected out;
    out.spec = load_spec(dir / "spec.json");
    out.spec.output_dir = dir.string();
    for (const auto& k : enumerate_cells(out.spec)) {
        if (auto c = load_cell(cell_dir(out.spec, k)); c && c->key == k) {
            out.cells.push_back(std::move(*c));
        } else {
            out.missing.push_back(k);
        }
    }
    return out;
}

inline EvalReport collect_report(const fs::path& dir)
{
    const auto col = collect(dir);
    EvalReport rep = assemble_report(col.cells);
    for (const auto& k : col.missing) {
        rep.notes.insert(rep.notes.end() - 1, "missing: " + describe(k));
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Report text forms

inline const char* kCsvHeader = "model,channel,fc_hz,v_train,snr_train,v_test,snr_test,mse,mse_copy,mse_zero,flops_fwd,seconds,seed";

/// CSV uses shortest round-trip decimal forms; notes follow the rows as
/// '#' lines.
inline std::string emit_report(const EvalReport& rep, const std::string& format)
{
    if (format == "json") {
        json rows = json::array();
        for (const auto& r : rep.rows) {
            rows.push_back(row_to_json(r));
        }
        return json{{"rows", rows}, {"notes", rep.notes}}.dump(2) + "\n";
    }
    if (format != "csv") {
        throw ConfigError("report format must be 'csv' or 'json', got '" + format + "'");
    }
    std::ostringstream os;
    os << kCsvHeader << '\n';
    for (const auto& r : rep.rows) {
        os << trainer::to_string(r.model) << ',' << channel::to_string(r.channel) << ',' << format_double(r.fc_hz)
           << ',' << format_double(r.v_train) << ',' << channel::to_string(r.snr_train) << ','
           << format_double(r.v_test) << ',' << channel::to_string(r.snr_test) << ',' << format_double(r.mse) << ','
           << format_double(r.mse_copy) << ',' << format_double(r.mse_zero) << ',' << r.flops_fwd << ','
           << format_double(r.seconds) << ',' << r.seed << '\n';
    }
    for (const auto& n : rep.notes) {
        os << "# " << n << '\n';
    }
    return os.str();
}

inline EvalReport parse_report(const std::string& text, const std::string& format)
{
    EvalReport rep;
    if (format == "json") {
        const json j = json::parse(text, nullptr, false);
        if (j.is_discarded() || !j.contains("rows")) {
            throw FormatError("report: not a JSON report");
        }
        for (const auto& r : j.at("rows")) {
            rep.rows.push_back(row_from_json(r));
        }
        if (j.contains("notes")) {
            rep.notes = j.at("notes").get<std::vector<std::string>>();
        }
        return rep;
    }
    if (format != "csv") {
        throw ConfigError("report format must be 'csv' or 'json', got '" + format + "'");
    }
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != kCsvHeader) {
        throw FormatError("report: missing or unexpected CSV header");
    }
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        if (line[0] == '#') {
            rep.notes.push_back(line.size() > 2 ? line.substr(2) : std::string());
            continue;
        }
        std::vector<std::string> f;
        std::stringstream ls(line);
        for (std::string cell; std::getline(ls, cell, ',');) {
            f.push_back(cell);
        }
        if (f.size() != 13) {
            throw FormatError("report: expected 13 fields in '" + line + "'");
        }
        ReportRow r;
        r.model = trainer::parse_model_kind(f[0]);
        r.channel = channel::parse_channel_type(f[1]);
        r.fc_hz = parse_double(f[2]);
        r.v_train = parse_double(f[3]);
        r.snr_train = channel::parse_snr(f[4]);
        r.v_test = parse_double(f[5]);
        r.snr_test = channel::parse_snr(f[6]);
        r.mse = parse_double(f[7]);
        r.mse_copy = parse_double(f[8]);
        r.mse_zero = parse_double(f[9]);
        r.flops_fwd = parse_u64(f[10]);
        r.seconds = parse_double(f[11]);
        r.seed = parse_u64(f[12]);
        rep.rows.push_back(r);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Trend check

/// A report lacks a coordinate the check needs.
class MissingCellError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

struct TrendSpec {
    ChannelType channel = ChannelType::UMi;
    double fc_hz = 5e9;
    double static_speed = 0.0;
    double mobile_speed = 30.0;
    double train_snr_db = 30.0;
    double mobile_min_snr_db = 0.0;
    std::size_t max_inversions = 1;
    double zero_margin = 10.0;
    double min_loss_drop = 0.9;
};

struct TrendLine {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct TrendResult {
    std::vector<TrendLine> lines;
    bool passed() const
    {
        return std::all_of(lines.begin(), lines.end(), [](const TrendLine& l) { return l.passed; });
    }
    std::string table() const
    {
        std::string s;
        for (const auto& l : lines) {
            s += (l.passed ? "PASS  " : "FAIL  ") + l.name + "  " + l.detail + "\n";
        }
        return s;
    }
};

/// Three qualitative checks per model, all on ID cells (test speed equal to
/// train speed) trained at `train_snr_db`:
///   snr-trend  static MSE vs ascending test SNR has <= max_inversions rises
///   mobility   mobile MSE >= static MSE at each test SNR >= mobile_min_snr_db
///   learned    static MSE beats the zero baseline by zero_margin at the
///              train SNR, and the final train loss is <= (1 - min_loss_drop)
///              of the first (needs the cell records)
inline TrendResult trend_check(const EvalReport& rep, const std::vector<CellOutcome>& cells, const TrendSpec& t = {})
{
    std::vector<ModelKind> models;
    for (const auto& r : rep.rows) {
        if (std::find(models.begin(), models.end(), r.model) == models.end()) {
            models.push_back(r.model);
        }
    }
    if (models.empty()) {
        throw MissingCellError("trend check: report has no rows");
    }
    const Snr train_snr = Snr::fixed(t.train_snr_db);

    // ID rows of one model at one speed, keyed by numeric test SNR.
    auto id_curve = [&](ModelKind m, double v) {
        std::map<double, double> curve;
        for (const auto& r : rep.rows) {
            if (r.model == m && r.channel == t.channel && r.fc_hz == t.fc_hz && r.v_train == v && r.v_test == v &&
                r.snr_train == train_snr && r.snr_test.kind == Snr::Kind::db) {
                curve[r.snr_test.db] = r.mse;
            }
        }
        if (curve.empty()) {
            throw MissingCellError("trend check: no cells for " +
                                   describe({m, t.channel, t.fc_hz, v, train_snr}) + " v_test=" + format_double(v));
        }
        return curve;
    };
    auto zero_at = [&](ModelKind m, double v, double snr) -> double {
        for (const auto& r : rep.rows) {
            if (r.model == m && r.channel == t.channel && r.fc_hz == t.fc_hz && r.v_train == v && r.v_test == v &&
                r.snr_train == train_snr && r.snr_test == Snr::fixed(snr)) {
                return r.mse_zero;
            }
        }
        return 0.0;
    };

    TrendResult out;
    for (ModelKind m : models) {
        const std::string mn = trainer::to_string(m);
        const auto stat = id_curve(m, t.static_speed);

        {
            std::size_t rises = 0;
            std::ostringstream d;
            double prev = 0.0;
            bool first = true;
            for (const auto& [snr, mse] : stat) {
                if (!first && mse > prev) {
                    ++rises;
                }
                d << (first ? "" : " ") << format_double(snr) << "dB:" << mse;
                prev = mse;
                first = false;
            }
            out.lines.push_back({"snr-trend " + mn, stat.size() >= 2 && rises <= t.max_inversions,
                                 std::to_string(rises) + " inversion(s) [" + d.str() + "]"});
        }

        {
            const auto mob = id_curve(m, t.mobile_speed);
            bool ok = true;
            std::size_t compared = 0;
            std::ostringstream d;
            for (const auto& [snr, mse] : stat) {
                if (snr < t.mobile_min_snr_db) {
                    continue;
                }
                const auto it = mob.find(snr);
                if (it == mob.end()) {
                    throw MissingCellError("trend check: no cell for " +
                                           describe({m, t.channel, t.fc_hz, t.mobile_speed, train_snr}) +
                                           " snr_test=" + format_double(snr));
                }
                ++compared;
                ok = ok && it->second >= mse;
                d << ' ' << format_double(snr) << "dB:" << it->second << (it->second >= mse ? ">=" : "<") << mse;
            }
            out.lines.push_back({"mobility " + mn, ok && compared > 0, "mobile vs static" + d.str()});
        }

        {
            const auto it = stat.find(t.train_snr_db);
            if (it == stat.end()) {
                throw MissingCellError("trend check: no cell for " +
                                       describe({m, t.channel, t.fc_hz, t.static_speed, train_snr}) +
                                       " snr_test=" + format_double(t.train_snr_db));
            }
            const double zero = zero_at(m, t.static_speed, t.train_snr_db);
            const CellKey key{m, t.channel, t.fc_hz, t.static_speed, train_snr};
            const auto cell = std::find_if(cells.begin(), cells.end(), [&](const CellOutcome& c) {
                return c.key == key && c.record && !c.record->train_loss.empty();
            });
            if (cell == cells.end()) {
                throw MissingCellError("trend check: no training record for " + describe(key));
            }
            const auto& loss = cell->record->train_loss;
            const double drop = loss.front() > 0.0 ? 1.0 - loss.back() / loss.front() : 0.0;
            const bool ok = it->second * t.zero_margin <= zero && drop >= t.min_loss_drop;
            std::ostringstream d;
            d << "mse " << it->second << " zero " << zero << " ratio " << zero / it->second << "; train loss "
              << loss.front() << " -> " << loss.back() << " (drop " << 100.0 * drop << "%)";
            out.lines.push_back({"learned " + mn, ok, d.str()});
        }
    }
    return out;
}

}  // namespace csipred::sweep
