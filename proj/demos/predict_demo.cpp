// Trains both layers on a small next-slot task and compares them with the
// copy and zero predictors.
//
//   predict_demo [speed_mps] [snr_db] [epochs]

#include <algorithm>
#include <cstdio>
#include <cstdlib>

#include "csipred/task.hpp"
#include "csipred/trainer.hpp"

using namespace csipred;

int main(int argc, char** argv)
{
    const double speed = argc > 1 ? std::atof(argv[1]) : 10.0;
    const double snr = argc > 2 ? std::atof(argv[2]) : 20.0;
    const std::size_t epochs = argc > 3 ? static_cast<std::size_t>(std::atoi(argv[3])) : 60;

    channel::ScenarioConfig scn;
    scn.speed_mps = speed;
    scn.snr = channel::Snr::fixed(snr);
    scn.n_subcarriers = 24;
    const auto train_set = task::build_split(scn, 96, 1, task::Split::train);
    const auto test_set = task::build_split(scn, 32, 1, task::Split::test);

    std::printf("UMi %.0f m/s, %.0f dB, %zu x %zu sequences\n", speed, snr, train_set[0].input.rows(),
                train_set[0].input.cols());
    std::printf("copy baseline %.4g, zero baseline %.4g\n", trainer::baseline_copy(test_set),
                trainer::baseline_zero(test_set));
    for (auto kind : {trainer::ModelKind::msa, trainer::ModelKind::ssm, trainer::ModelKind::ssm_selective}) {
        trainer::TrainConfig cfg;
        cfg.model = kind;
        cfg.epochs = epochs;
        cfg.tail_window = std::min<std::size_t>(10, epochs);
        cfg.state_dim = 32;
        cfg.adam.lr = 3e-3;
        const auto res = trainer::train(cfg, train_set, test_set);
        std::printf("%-14s test mse %.4g  train loss %.4g -> %.4g  %llu MACs/forward  %.1f s\n",
                    trainer::to_string(kind).c_str(), res.record.reported_mse, res.record.train_loss.front(),
                    res.record.train_loss.back(), static_cast<unsigned long long>(res.record.flops_fwd),
                    res.record.seconds);
    }
}
