// csipred: run CSI prediction sweeps and inspect their results.
//
//   csipred sweep   --spec <file.json>
//   csipred report  --dir <out> [--format csv|json]
//   csipred check   --dir <out>
//   csipred gridgen --scenario <file.json> --out <file.csig> [--slot <i>]
//
// Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 trend failure.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "csipred/channel.hpp"
#include "csipred/channel_io.hpp"
#include "csipred/error.hpp"
#include "csipred/sweep.hpp"
#include "csipred/text.hpp"

namespace {

using namespace csipred;

enum Exit { kOk = 0, kConfig = 1, kIo = 2, kTrend = 3 };

void apply_seed_override(sweep::SweepSpec& spec)
{
    if (const char* env = std::getenv("CSI_SEED"); env && *env) {
        try {
            spec.master_seed = parse_u64(env);
        } catch (const FormatError&) {
            throw ConfigError(std::string("CSI_SEED is not an unsigned integer: '") + env + "'");
        }
    }
}

int cmd_sweep(const std::string& spec_path)
{
    auto spec = sweep::load_spec(spec_path);
    apply_seed_override(spec);
    const auto res = sweep::run_sweep(spec, &std::cerr);
    std::cerr << "trained " << res.trained << " cell(s), resumed " << res.skipped << ", "
              << res.report.rows.size() << " report row(s) in " << spec.output_dir << "\n";
    return kOk;
}

int cmd_report(const std::string& dir, const std::string& format)
{
    const auto rep = sweep::collect_report(dir);
    const std::string text = sweep::emit_report(rep, format);
    sweep::write_text_atomic(std::filesystem::path(dir) / ("report." + format), text);
    std::cout << text;
    return kOk;
}

int cmd_check(const std::string& dir)
{
    const auto col = sweep::collect(dir);
    const auto rep = sweep::assemble_report(col.cells);
    const auto result = sweep::trend_check(rep, col.cells);
    std::cout << result.table();
    std::cout << (result.passed() ? "trend check passed\n" : "trend check FAILED\n");
    return result.passed() ? kOk : kTrend;
}

int cmd_gridgen(const std::string& scenario_path, const std::string& out, std::int64_t slot)
{
    std::ifstream in(scenario_path);
    if (!in) {
        throw IoError("cannot read scenario '" + scenario_path + "'");
    }
    const auto j = channel::json::parse(in, nullptr, false);
    if (j.is_discarded()) {
        throw ConfigError("scenario '" + scenario_path + "' is not valid JSON");
    }
    auto cfg = channel::scenario_from_json(j);
    if (const char* env = std::getenv("CSI_SEED"); env && *env) {
        cfg.seed = parse_u64(env);
    }
    if (slot < 0) {
        throw ConfigError("--slot must be >= 0");
    }
    const auto taps = channel::make_taps(cfg);
    auto grid = channel::gen_slot(taps, cfg, slot);
    if (cfg.snr.kind == channel::Snr::Kind::db) {
        grid = channel::add_awgn(grid, cfg.snr.db, numkit::derive_seed({cfg.seed, numkit::tag_hash("gridgen")}));
    }
    channel::write_grid(out, grid, cfg);
    std::cerr << "wrote " << grid.n_symbols << "x" << grid.n_subcarriers << "x" << grid.n_users << "x"
              << grid.n_tx << " grid to " << out << "\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"CSI next-slot prediction experiments"};
    app.require_subcommand(1);

    std::string spec_path;
    auto* sweep_cmd = app.add_subcommand("sweep", "Train and evaluate every cell of a sweep spec");
    sweep_cmd->add_option("--spec", spec_path, "Sweep spec (JSON)")->required();

    std::string dir, format = "csv";
    auto* report_cmd = app.add_subcommand("report", "Assemble the report of a sweep directory");
    report_cmd->add_option("--dir", dir, "Sweep output directory")->required();
    report_cmd->add_option("--format", format, "csv or json")->check(CLI::IsMember({"csv", "json"}));

    auto* check_cmd = app.add_subcommand("check", "Run the qualitative trend checks on a sweep directory");
    check_cmd->add_option("--dir", dir, "Sweep output directory")->required();

    std::string scenario_path, out;
    std::int64_t slot = 0;
    auto* gridgen_cmd = app.add_subcommand("gridgen", "Export one CSI slot grid");
    gridgen_cmd->add_option("--scenario", scenario_path, "Scenario (JSON)")->required();
    gridgen_cmd->add_option("--out", out, "Output CSIG file")->required();
    gridgen_cmd->add_option("--slot", slot, "Slot index");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    try {
        if (*sweep_cmd) {
            return cmd_sweep(spec_path);
        }
        if (*report_cmd) {
            return cmd_report(dir, format);
        }
        if (*check_cmd) {
            return cmd_check(dir);
        }
        return cmd_gridgen(scenario_path, out, slot);
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kIo;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kIo;
    }
}
