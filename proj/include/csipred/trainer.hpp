#pragma once

// Training and evaluation of a single MSA or SSM layer on next-slot CSI
// prediction, plus the binary checkpoint format.
//
// Checkpoint layout (little-endian):
//   "CKPT1" | u8 model tag (1 msa, 2 ssm, 3 ssm_selective) | u8 flags (bit 0: skip)
//   | u32 n_dims | u64 dims[n_dims] | u64 n_tensors
//   | per tensor: u64 rows, u64 cols, f64 values[rows * cols]
// dims are (seq_len, dim, heads) for msa and (state_dim, feature_dim) for ssm.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "csipred/attention.hpp"
#include "csipred/error.hpp"
#include "csipred/numkit/adam.hpp"
#include "csipred/numkit/binio.hpp"
#include "csipred/numkit/mat.hpp"
#include "csipred/numkit/rng.hpp"
#include "csipred/numkit/tape.hpp"
#include "csipred/ssm.hpp"
#include "csipred/task.hpp"

namespace csipred::trainer {

using attention::MsaParams;
using numkit::Mat;
using ssm::SsmParams;
using task::SeqSample;

enum class ModelKind { msa, ssm, ssm_selective };

inline std::string to_string(ModelKind k)
{
    switch (k) {
    case ModelKind::msa:
        return "msa";
    case ModelKind::ssm:
        return "ssm";
    default:
        return "ssm_selective";
    }
}

inline ModelKind parse_model_kind(const std::string& s)
{
    if (s == "msa") {
        return ModelKind::msa;
    }
    if (s == "ssm") {
        return ModelKind::ssm;
    }
    if (s == "ssm_selective") {
        return ModelKind::ssm_selective;
    }
    throw ConfigError("unknown model '" + s + "'");
}

using Model = std::variant<MsaParams, SsmParams>;

inline ModelKind kind_of(const Model& m)
{
    if (std::holds_alternative<MsaParams>(m)) {
        return ModelKind::msa;
    }
    return std::get<SsmParams>(m).selective ? ModelKind::ssm_selective : ModelKind::ssm;
}

inline std::vector<Mat*> tensors(Model& m)
{
    return std::visit([](auto& p) { return p.tensors(); }, m);
}

inline std::vector<const Mat*> tensors(const Model& m)
{
    return std::visit([](const auto& p) { return p.tensors(); }, m);
}

struct TrainConfig {
    ModelKind model = ModelKind::msa;
    std::size_t epochs = 1000;
    std::size_t batch_size = 32;
    std::size_t eval_every = 1;
    std::size_t tail_window = 100;
    numkit::AdamConfig adam;
    std::uint64_t seed = 0;
    std::size_t heads = 2;
    std::size_t state_dim = 64;
    bool use_skip = true;
};

struct RunRecord {
    TrainConfig config;
    std::size_t seq_len = 0;
    std::size_t feature_dim = 0;
    std::vector<double> train_loss;        // one per epoch
    std::vector<std::size_t> eval_epochs;  // 1-based epoch of each evaluation
    std::vector<double> test_mse;          // one per evaluation
    double reported_mse = 0.0;             // mean of the last tail_window evaluations
    double mse_copy = 0.0;                 // prediction = input
    double mse_zero = 0.0;                 // prediction = 0
    std::uint64_t flops_fwd = 0;
    double seconds = 0.0;
};

struct TrainResult {
    Model params;
    RunRecord record;
    /// Tail-averaged MSE on each extra evaluation set, in the order given.
    std::vector<double> extra_reported;
};

inline double mse(const Mat& pred, const Mat& target)
{
    numkit::require_same_shape(pred, target, "mse");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - target[i];
        s += d * d;
    }
    return s / static_cast<double>(pred.size());
}

inline Model init_model(const TrainConfig& cfg, std::size_t seq_len, std::size_t feature_dim)
{
    const std::uint64_t seed = numkit::derive_seed({cfg.seed, numkit::tag_hash("model_init")});
    switch (cfg.model) {
    case ModelKind::msa:
        return attention::msa_init(seq_len, feature_dim, cfg.heads, seed);
    case ModelKind::ssm:
        return ssm::ssm_init(cfg.state_dim, feature_dim, seed, cfg.use_skip, false);
    default:
        return ssm::ssm_init(cfg.state_dim, feature_dim, seed, cfg.use_skip, true);
    }
}

inline std::uint64_t forward_flops(const Model& m, std::size_t seq_len)
{
    if (const auto* p = std::get_if<MsaParams>(&m)) {
        return attention::msa_flops(p->seq_len, p->dim, p->heads);
    }
    const auto& s = std::get<SsmParams>(m);
    return ssm::ssm_flops(seq_len, s.feature_dim, s.state_dim);
}

inline Mat predict(const Model& m, const Mat& x)
{
    if (const auto* p = std::get_if<MsaParams>(&m)) {
        return attention::msa_predict(*p, x);
    }
    return ssm::ssm_predict(std::get<SsmParams>(m), x);
}

/// Mean over `batch` of per-sample MSE and its gradient w.r.t. tensors(m).
inline std::pair<double, std::vector<Mat>> loss_and_grad(const Model& m, std::span<const SeqSample* const> batch)
{
    numkit::Tape tape;
    std::vector<numkit::Var> losses;
    auto run = [&](auto&& bind, auto&& forward) {
        auto vars = bind();
        for (const SeqSample* s : batch) {
            numkit::Var x = tape.constant(s->input);
            losses.push_back(numkit::mse_loss(forward(vars, x), s->target));
        }
    };
    if (const auto* p = std::get_if<MsaParams>(&m)) {
        run([&] { return attention::msa_bind(tape, *p); },
            [&](const attention::MsaVars& v, numkit::Var x) { return attention::msa_forward(*p, v, x); });
    } else {
        const auto& s = std::get<SsmParams>(m);
        run([&] { return ssm::ssm_bind(tape, s); },
            [&](const ssm::SsmVars& v, numkit::Var x) { return ssm::ssm_forward(s, v, x); });
    }
    numkit::Var total = losses[0];
    for (std::size_t i = 1; i < losses.size(); ++i) {
        total = numkit::add(total, losses[i]);
    }
    total = numkit::scale(total, 1.0 / static_cast<double>(losses.size()));
    const double loss = total.value()[0];
    return {loss, tape.backward(total)};
}

inline double evaluate(const Model& m, std::span<const SeqSample> test)
{
    if (test.empty()) {
        return 0.0;
    }
    double s = 0.0;
    for (const auto& smp : test) {
        s += mse(predict(m, smp.input), smp.target);
    }
    return s / static_cast<double>(test.size());
}

inline double baseline_copy(std::span<const SeqSample> test)
{
    double s = 0.0;
    for (const auto& smp : test) {
        s += mse(smp.input, smp.target);
    }
    return test.empty() ? 0.0 : s / static_cast<double>(test.size());
}

inline double baseline_zero(std::span<const SeqSample> test)
{
    double s = 0.0;
    for (const auto& smp : test) {
        s += numkit::mean_square(smp.target);
    }
    return test.empty() ? 0.0 : s / static_cast<double>(test.size());
}

/// Mini-batch Adam on mean MSE. The held-out set is evaluated every
/// `eval_every` epochs; the reported MSE is the mean of the last
/// `tail_window` evaluations. Each `extra_tests` set is evaluated only at
/// those tail evaluation points.
inline TrainResult train(const TrainConfig& cfg, std::span<const SeqSample> train_set,
                         std::span<const SeqSample> test_set,
                         std::span<const std::vector<SeqSample>> extra_tests = {})
{
    if (train_set.empty()) {
        throw ConfigError("train: empty training set");
    }
    if (cfg.batch_size < 1 || cfg.eval_every < 1) {
        throw ConfigError("train: batch_size and eval_every must be >= 1");
    }
    const std::size_t n_evals = cfg.epochs / cfg.eval_every;
    if (cfg.epochs > 0 && (cfg.tail_window < 1 || cfg.tail_window > n_evals)) {
        throw ConfigError("train: tail_window " + std::to_string(cfg.tail_window) + " exceeds the " +
                          std::to_string(n_evals) + " scheduled evaluations");
    }
    const std::size_t seq_len = train_set[0].input.rows();
    const std::size_t feat = train_set[0].input.cols();
    for (const auto& s : train_set) {
        if (s.input.rows() != seq_len || s.input.cols() != feat || !s.input.same_shape(s.target)) {
            throw ShapeError("train: inconsistent sample shapes");
        }
    }

    const auto t_start = std::chrono::steady_clock::now();
    TrainResult res{init_model(cfg, seq_len, feat), {}, {}};
    RunRecord& rec = res.record;
    rec.config = cfg;
    rec.seq_len = seq_len;
    rec.feature_dim = feat;
    rec.flops_fwd = forward_flops(res.params, seq_len);
    rec.mse_copy = baseline_copy(test_set);
    rec.mse_zero = baseline_zero(test_set);

    auto params = tensors(res.params);
    auto adam = numkit::adam_init(std::vector<const Mat*>(params.begin(), params.end()), cfg.adam);
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    numkit::Rng shuffle_rng(numkit::derive_seed({cfg.seed, numkit::tag_hash("shuffle")}));

    const std::size_t first_tail_eval = n_evals >= cfg.tail_window ? n_evals - cfg.tail_window : 0;
    std::vector<double> extra_sum(extra_tests.size(), 0.0);
    std::size_t tail_count = 0;
    double tail_sum = 0.0;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double epoch_loss = 0.0;
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), b + cfg.batch_size);
            std::vector<const SeqSample*> batch;
            for (std::size_t i = b; i < end; ++i) {
                batch.push_back(&train_set[order[i]]);
            }
            auto [loss, grads] = loss_and_grad(res.params, batch);
            if (!std::isfinite(loss)) {
                throw TrainingError(epoch, "training loss is not finite");
            }
            numkit::adam_step(adam, params, grads);
            epoch_loss += loss * static_cast<double>(batch.size());
        }
        rec.train_loss.push_back(epoch_loss / static_cast<double>(order.size()));

        if (epoch % cfg.eval_every == 0) {
            const double m = evaluate(res.params, test_set);
            if (!std::isfinite(m)) {
                throw TrainingError(epoch, "test MSE is not finite");
            }
            const std::size_t eval_idx = rec.test_mse.size();
            rec.eval_epochs.push_back(epoch);
            rec.test_mse.push_back(m);
            if (eval_idx >= first_tail_eval) {
                tail_sum += m;
                ++tail_count;
                for (std::size_t k = 0; k < extra_tests.size(); ++k) {
                    extra_sum[k] += evaluate(res.params, extra_tests[k]);
                }
            }
        }
    }

    if (tail_count > 0) {
        rec.reported_mse = tail_sum / static_cast<double>(tail_count);
        for (double s : extra_sum) {
            res.extra_reported.push_back(s / static_cast<double>(tail_count));
        }
    } else {
        // No training: report the untrained layer.
        rec.reported_mse = evaluate(res.params, test_set);
        for (const auto& t : extra_tests) {
            res.extra_reported.push_back(evaluate(res.params, t));
        }
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return res;
}

/// Raised when a checkpoint holds a different model than requested.
class ModelTagError : public FormatError {
public:
    using FormatError::FormatError;
};

inline std::uint8_t model_tag(ModelKind k)
{
    switch (k) {
    case ModelKind::msa:
        return 1;
    case ModelKind::ssm:
        return 2;
    default:
        return 3;
    }
}

inline void require_stable(const Model& m)
{
    if (const auto* s = std::get_if<SsmParams>(&m)) {
        const double r = ssm::spectral_radius(*s);
        if (!(r < 1.0)) {
            throw NumericError("ssm: discretized spectral radius " + std::to_string(r) + " is not < 1");
        }
    }
}

inline void checkpoint_save(const Model& m, const std::string& path)
{
    require_stable(m);
    numkit::BinWriter w;
    w.bytes("CKPT1");
    w.u8(model_tag(kind_of(m)));
    if (const auto* p = std::get_if<MsaParams>(&m)) {
        w.u8(0);
        w.u32(3);
        w.u64(p->seq_len);
        w.u64(p->dim);
        w.u64(p->heads);
    } else {
        const auto& s = std::get<SsmParams>(m);
        w.u8(s.use_skip ? 1 : 0);
        w.u32(2);
        w.u64(s.state_dim);
        w.u64(s.feature_dim);
    }
    const auto ts = tensors(m);
    w.u64(ts.size());
    for (const Mat* t : ts) {
        w.u64(t->rows());
        w.u64(t->cols());
        for (double v : t->values()) {
            w.f64(v);
        }
    }
    w.save(path);
}

/// Reads a checkpoint; when `expected` is given, a different model tag is a
/// ModelTagError.
inline Model checkpoint_load(const std::string& path, std::optional<ModelKind> expected = std::nullopt)
{
    auto r = numkit::BinReader::load(path);
    if (r.bytes(5) != "CKPT1") {
        throw FormatError("'" + path + "': not a CKPT1 checkpoint");
    }
    const std::uint8_t tag = r.u8();
    if (tag < 1 || tag > 3) {
        throw FormatError("'" + path + "': unknown model tag " + std::to_string(tag));
    }
    const ModelKind kind = tag == 1 ? ModelKind::msa : tag == 2 ? ModelKind::ssm : ModelKind::ssm_selective;
    if (expected && *expected != kind) {
        throw ModelTagError("'" + path + "': holds a " + to_string(kind) + " model, expected " +
                            to_string(*expected));
    }
    const bool skip = (r.u8() & 1) != 0;
    const std::uint32_t n_dims = r.u32();
    if (n_dims != (kind == ModelKind::msa ? 3u : 2u)) {
        throw FormatError("'" + path + "': wrong dimension tuple length");
    }
    std::vector<std::uint64_t> dims;
    for (std::uint32_t i = 0; i < n_dims; ++i) {
        dims.push_back(r.u64());
    }
    constexpr std::uint64_t kMaxDim = 1u << 20;
    for (auto d : dims) {
        if (d < 1 || d > kMaxDim) {
            throw FormatError("'" + path + "': implausible dimension " + std::to_string(d));
        }
    }
    Model m;
    try {
        if (kind == ModelKind::msa) {
            m = attention::msa_init(dims[0], dims[1], dims[2], 0);
        } else {
            m = ssm::ssm_init(dims[0], dims[1], 0, skip, kind == ModelKind::ssm_selective);
        }
    } catch (const ConfigError& e) {
        throw FormatError("'" + path + "': " + e.what());
    }
    auto ts = tensors(m);
    if (r.u64() != ts.size()) {
        throw FormatError("'" + path + "': tensor count does not match model");
    }
    for (Mat* t : ts) {
        const std::uint64_t rows = r.u64(), cols = r.u64();
        if (rows != t->rows() || cols != t->cols()) {
            throw FormatError("'" + path + "': tensor shape " + std::to_string(rows) + "x" + std::to_string(cols) +
                              " does not match expected " + t->shape_str());
        }
        for (double& v : t->values()) {
            v = r.f64();
        }
    }
    if (r.remaining() != 0) {
        throw FormatError("'" + path + "': trailing bytes");
    }
    require_stable(m);
    return m;
}

inline nlohmann::json to_json(const RunRecord& r)
{
    const auto& c = r.config;
    return nlohmann::json{
        {"config",
         {{"model", to_string(c.model)},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"eval_every", c.eval_every},
          {"tail_window", c.tail_window},
          {"lr", c.adam.lr},
          {"beta1", c.adam.beta1},
          {"beta2", c.adam.beta2},
          {"eps", c.adam.eps},
          {"seed", c.seed},
          {"heads", c.heads},
          {"state_dim", c.state_dim},
          {"use_skip", c.use_skip}}},
        {"seq_len", r.seq_len},
        {"feature_dim", r.feature_dim},
        {"train_loss", r.train_loss},
        {"eval_epochs", r.eval_epochs},
        {"test_mse", r.test_mse},
        {"reported_mse", r.reported_mse},
        {"mse_copy", r.mse_copy},
        {"mse_zero", r.mse_zero},
        {"flops_fwd", r.flops_fwd},
        {"seconds", r.seconds}};
}

inline RunRecord run_record_from_json(const nlohmann::json& j)
{
    RunRecord r;
    try {
        const auto& c = j.at("config");
        r.config.model = parse_model_kind(c.at("model").get<std::string>());
        r.config.epochs = c.at("epochs");
        r.config.batch_size = c.at("batch_size");
        r.config.eval_every = c.at("eval_every");
        r.config.tail_window = c.at("tail_window");
        r.config.adam = {c.at("lr"), c.at("beta1"), c.at("beta2"), c.at("eps")};
        r.config.seed = c.at("seed");
        r.config.heads = c.at("heads");
        r.config.state_dim = c.at("state_dim");
        r.config.use_skip = c.at("use_skip");
        r.seq_len = j.at("seq_len");
        r.feature_dim = j.at("feature_dim");
        r.train_loss = j.at("train_loss").get<std::vector<double>>();
        r.eval_epochs = j.at("eval_epochs").get<std::vector<std::size_t>>();
        r.test_mse = j.at("test_mse").get<std::vector<double>>();
        r.reported_mse = j.at("reported_mse");
        r.mse_copy = j.at("mse_copy");
        r.mse_zero = j.at("mse_zero");
        r.flops_fwd = j.at("flops_fwd");
        r.seconds = j.at("seconds");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("run record: ") + e.what());
    }
    return r;
}

}  // namespace csipred::trainer
