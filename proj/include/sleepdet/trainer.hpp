#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "sleepdet/dataset.hpp"
#include "sleepdet/model.hpp"

namespace sleepdet {

enum class LossMode { Multi, Single };

struct TrainConfig {
    int batch_size = 100;
    int max_epochs = 100;
    int patience = 5;  // epochs without validation improvement; 0 disables early stopping
    double learning_rate = 1e-3;
    double momentum = 0.9;
    LossMode loss_mode = LossMode::Multi;
    uint64_t shuffle_seed = 1;
};

// Per-example loss breakdown. In multi mode `total` is the unweighted sum of
// the three components; in single mode the whole vector goes through one MSE
// and only `mse` is populated.
struct LossReport {
    double total = 0;
    double categorical_ce = 0;  // stage block + respiratory class block
    double binary_ce = 0;       // arousal flag + respiratory flag
    double mse = 0;             // mean over all center/width components
    // per-family pieces of the above
    double stage_ce = 0;
    double resp_class_ce = 0;
    double arousal_bce = 0;
    double resp_bce = 0;
    double arousal_coord_mse = 0;
    double resp_coord_mse = 0;

    void accumulate(const LossReport& o, double scale);
};

LossReport loss(std::span<const double> pred, std::span<const double> target, Assembly assembly,
                LossMode mode);
// dLoss/d(pred activations), matching loss() exactly (including probability
// clamping), so model::backward receives a consistent upstream gradient.
std::vector<double> loss_grad(std::span<const double> pred, std::span<const double> target,
                              Assembly assembly, LossMode mode);

// Classical momentum: v <- momentum*v - lr*g; p <- p + v.
void sgd_step(ModelParams& params, const ModelParams& grads, ModelParams& velocity, double lr,
              double momentum);

// Tracks the best validation loss; stop() turns true once `patience`
// consecutive epochs fail to improve it.
struct EarlyStopper {
    int patience = 5;
    double best = 0;
    int best_epoch = 0;
    int stale = 0;
    bool seen = false;

    // epoch is 1-based; returns true when training should stop after it
    bool update(int epoch, double val_loss);
};

struct EpochLog {
    int epoch = 0;
    LossReport train;
    LossReport validation;
};

struct TrainLog {
    std::vector<EpochLog> epochs;
    int epochs_run = 0;
    bool stopped_early = false;
    int best_epoch = 0;
    double best_val_loss = 0;
};

struct TrainResult {
    ModelParams best_params;
    TrainLog log;
};

// Called after each epoch with the current (not best) parameters; returning
// true stops training at that epoch.
using EpochCallback = std::function<bool(int epoch, const ModelParams& params, const TrainLog& log)>;

TrainResult train(const ModelConfig& model_cfg, const Dataset& ds, const TrainConfig& train_cfg,
                  const EpochCallback& on_epoch = nullptr);

// Mean loss over a set of examples with dropout off.
LossReport evaluate(const ModelParams& params, const Dataset& ds, std::span<const size_t> indices,
                    LossMode mode);

}  // namespace sleepdet
