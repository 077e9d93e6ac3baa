#include "sleepdet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "sleepdet/common.hpp"
#include "sleepdet/rng.hpp"

namespace sleepdet {

namespace {

constexpr double kProbFloor = 1e-7;
constexpr double kProbCeil = 1.0 - 1e-7;

inline double clamp_prob(double p) { return std::min(kProbCeil, std::max(kProbFloor, p)); }
inline bool clamp_active(double p) { return p <= kProbFloor || p >= kProbCeil; }

void check_lengths(std::span<const double> pred, std::span<const double> target,
                   Assembly assembly) {
    auto n = static_cast<size_t>(vector_length(assembly));
    if (pred.size() != n || target.size() != n)
        throw ValidationError("loss: prediction/target length does not match assembly");
    for (double x : pred)
        if (!std::isfinite(x)) throw NumericError("loss: non-finite prediction");
}

}  // namespace

void LossReport::accumulate(const LossReport& o, double scale) {
    total += o.total * scale;
    categorical_ce += o.categorical_ce * scale;
    binary_ce += o.binary_ce * scale;
    mse += o.mse * scale;
    stage_ce += o.stage_ce * scale;
    resp_class_ce += o.resp_class_ce * scale;
    arousal_bce += o.arousal_bce * scale;
    resp_bce += o.resp_bce * scale;
    arousal_coord_mse += o.arousal_coord_mse * scale;
    resp_coord_mse += o.resp_coord_mse * scale;
}

LossReport loss(std::span<const double> pred, std::span<const double> target, Assembly assembly,
                LossMode mode) {
    check_lengths(pred, target, assembly);
    const VectorLayout l = layout_for(assembly);
    LossReport r;

    if (mode == LossMode::Single) {
        double s = 0;
        for (size_t i = 0; i < pred.size(); ++i) {
            double d = pred[i] - target[i];
            s += d * d;
        }
        r.mse = s / static_cast<double>(pred.size());
        r.total = r.mse;
        return r;
    }

    for (int i = 0; i < 5; ++i) {
        double t = target[static_cast<size_t>(l.stage + i)];
        if (t > 0) r.stage_ce -= t * std::log(clamp_prob(pred[static_cast<size_t>(l.stage + i)]));
    }

    int coord_count = 0;
    double coord_sq = 0;
    auto bce = [&](int idx) {
        double t = target[static_cast<size_t>(idx)];
        double p = clamp_prob(pred[static_cast<size_t>(idx)]);
        return -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
    };
    auto coords = [&](int xi, int wi, double& family_mse) {
        double dx = pred[static_cast<size_t>(xi)] - target[static_cast<size_t>(xi)];
        double dw = pred[static_cast<size_t>(wi)] - target[static_cast<size_t>(wi)];
        family_mse = (dx * dx + dw * dw) / 2.0;
        coord_sq += dx * dx + dw * dw;
        coord_count += 2;
    };
    if (l.arousal_flag >= 0) {
        r.arousal_bce = bce(l.arousal_flag);
        coords(l.arousal_x, l.arousal_w, r.arousal_coord_mse);
    }
    if (l.resp_flag >= 0) {
        r.resp_bce = bce(l.resp_flag);
        for (int idx : {l.resp_apnea, l.resp_hypopnea}) {
            double t = target[static_cast<size_t>(idx)];
            if (t > 0) r.resp_class_ce -= t * std::log(clamp_prob(pred[static_cast<size_t>(idx)]));
        }
        coords(l.resp_x, l.resp_w, r.resp_coord_mse);
    }

    r.categorical_ce = r.stage_ce + r.resp_class_ce;
    r.binary_ce = r.arousal_bce + r.resp_bce;
    r.mse = coord_count > 0 ? coord_sq / coord_count : 0.0;
    r.total = r.categorical_ce + r.binary_ce + r.mse;
    return r;
}

std::vector<double> loss_grad(std::span<const double> pred, std::span<const double> target,
                              Assembly assembly, LossMode mode) {
    check_lengths(pred, target, assembly);
    const VectorLayout l = layout_for(assembly);
    std::vector<double> g(pred.size(), 0.0);

    if (mode == LossMode::Single) {
        double inv = 1.0 / static_cast<double>(pred.size());
        for (size_t i = 0; i < pred.size(); ++i) g[i] = 2.0 * (pred[i] - target[i]) * inv;
        return g;
    }

    for (int i = 0; i < 5; ++i) {
        double t = target[static_cast<size_t>(l.stage + i)];
        double p = pred[static_cast<size_t>(l.stage + i)];
        if (t > 0 && !clamp_active(p)) g[static_cast<size_t>(l.stage + i)] = -t / clamp_prob(p);
    }

    int coord_count = 0;
    if (l.arousal_flag >= 0) coord_count += 2;
    if (l.resp_flag >= 0) coord_count += 2;
    auto bce_grad = [&](int idx) {
        double t = target[static_cast<size_t>(idx)];
        double p = pred[static_cast<size_t>(idx)];
        if (clamp_active(p)) return;
        double pc = clamp_prob(p);
        g[static_cast<size_t>(idx)] = -t / pc + (1.0 - t) / (1.0 - pc);
    };
    auto coord_grad = [&](int idx) {
        g[static_cast<size_t>(idx)] =
            2.0 * (pred[static_cast<size_t>(idx)] - target[static_cast<size_t>(idx)]) / coord_count;
    };
    if (l.arousal_flag >= 0) {
        bce_grad(l.arousal_flag);
        coord_grad(l.arousal_x);
        coord_grad(l.arousal_w);
    }
    if (l.resp_flag >= 0) {
        bce_grad(l.resp_flag);
        for (int idx : {l.resp_apnea, l.resp_hypopnea}) {
            double t = target[static_cast<size_t>(idx)];
            double p = pred[static_cast<size_t>(idx)];
            if (t > 0 && !clamp_active(p)) g[static_cast<size_t>(idx)] = -t / clamp_prob(p);
        }
        coord_grad(l.resp_x);
        coord_grad(l.resp_w);
    }
    return g;
}

void sgd_step(ModelParams& params, const ModelParams& grads, ModelParams& velocity, double lr,
              double momentum) {
    std::vector<std::vector<double>*> pv, vv;
    std::vector<const std::vector<double>*> gv;
    for_each_tensor(params, [&](const char*, std::vector<double>& t) { pv.push_back(&t); });
    for_each_tensor(grads, [&](const char*, const std::vector<double>& t) { gv.push_back(&t); });
    for_each_tensor(velocity, [&](const char*, std::vector<double>& t) { vv.push_back(&t); });
    for (size_t k = 0; k < pv.size(); ++k) {
        auto& p = *pv[k];
        auto& g = *gv[k];
        auto& v = *vv[k];
        if (p.size() != g.size() || p.size() != v.size())
            throw ValidationError("sgd_step: tensor shapes disagree");
        for (size_t i = 0; i < p.size(); ++i) {
            if (!std::isfinite(g[i])) throw NumericError("sgd_step: non-finite gradient");
            v[i] = momentum * v[i] - lr * g[i];
            p[i] += v[i];
        }
    }
}

bool EarlyStopper::update(int epoch, double val_loss) {
    if (!seen || val_loss < best) {
        seen = true;
        best = val_loss;
        best_epoch = epoch;
        stale = 0;
    } else {
        ++stale;
    }
    return patience > 0 && stale >= patience;
}

LossReport evaluate(const ModelParams& params, const Dataset& ds, std::span<const size_t> indices,
                    LossMode mode) {
    LossReport sum;
    ForwardTrace trace;
    for (size_t ix : indices) {
        const Example& ex = ds.examples.at(ix);
        auto out = forward(params, ex.input, false, 0, trace);
        sum.accumulate(loss(out, ex.target, ds.cfg.assembly, mode), 1.0);
    }
    if (!indices.empty()) {
        LossReport mean;
        mean.accumulate(sum, 1.0 / static_cast<double>(indices.size()));
        return mean;
    }
    return sum;
}

TrainResult train(const ModelConfig& model_cfg, const Dataset& ds, const TrainConfig& train_cfg,
                  const EpochCallback& on_epoch) {
    if (ds.split.train.empty()) throw ValidationError("train: empty training split");
    if (ds.split.validation.empty()) throw ValidationError("train: empty validation split");
    if (train_cfg.batch_size <= 0 || train_cfg.max_epochs <= 0)
        throw ValidationError("train: batch size and max epochs must be positive");
    if (model_cfg.assembly != ds.cfg.assembly)
        throw ValidationError("train: model and dataset assemblies differ");
    if (model_cfg.channels != ds.cfg.channels() || model_cfg.input_len != ds.cfg.input_len())
        throw ValidationError("train: model geometry does not match dataset");

    TrainResult result;
    result.best_params = init_params(model_cfg);
    ModelParams params = result.best_params;
    ModelParams velocity = zeros_like(params);
    ModelParams grads = zeros_like(params);
    ForwardTrace trace;
    BackwardScratch scratch;
    EarlyStopper stopper{train_cfg.patience};

    std::vector<size_t> order(ds.split.train.begin(), ds.split.train.end());
    const auto n_train = order.size();

    for (int epoch = 1; epoch <= train_cfg.max_epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(train_cfg.shuffle_seed, 0xe90cULL, static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        LossReport train_sum;
        size_t pos = 0;
        int batch_index = 0;
        while (pos < n_train) {
            size_t batch_n = std::min(static_cast<size_t>(train_cfg.batch_size), n_train - pos);
            for_each_tensor(grads, [](const char*, std::vector<double>& t) {
                std::fill(t.begin(), t.end(), 0.0);
            });
            double scale = 1.0 / static_cast<double>(batch_n);
            for (size_t k = 0; k < batch_n; ++k) {
                const Example& ex = ds.examples.at(order[pos + k]);
                uint64_t drop_seed = derive_seed(train_cfg.shuffle_seed,
                                                 static_cast<uint64_t>(epoch) * 1000003ULL,
                                                 static_cast<uint64_t>(pos + k));
                try {
                    auto out = forward(params, ex.input, true, drop_seed, trace);
                    LossReport lr = loss(out, ex.target, ds.cfg.assembly, train_cfg.loss_mode);
                    if (!std::isfinite(lr.total)) throw NumericError("non-finite loss");
                    train_sum.accumulate(lr, 1.0);
                    auto g = loss_grad(out, ex.target, ds.cfg.assembly, train_cfg.loss_mode);
                    for (double& x : g) x *= scale;
                    backward_accumulate(params, trace, g, grads, scratch);
                } catch (const NumericError& e) {
                    std::ostringstream os;
                    os << "train: " << e.what() << " at epoch " << epoch << " batch "
                       << batch_index;
                    throw NumericError(os.str());
                }
            }
            try {
                sgd_step(params, grads, velocity, train_cfg.learning_rate, train_cfg.momentum);
            } catch (const NumericError& e) {
                std::ostringstream os;
                os << "train: " << e.what() << " at epoch " << epoch << " batch " << batch_index;
                throw NumericError(os.str());
            }
            pos += batch_n;
            ++batch_index;
        }

        EpochLog el;
        el.epoch = epoch;
        el.train.accumulate(train_sum, 1.0 / static_cast<double>(n_train));
        el.validation = evaluate(params, ds, ds.split.validation, train_cfg.loss_mode);
        if (!std::isfinite(el.validation.total)) {
            std::ostringstream os;
            os << "train: non-finite validation loss at epoch " << epoch;
            throw NumericError(os.str());
        }
        result.log.epochs.push_back(el);
        result.log.epochs_run = epoch;

        bool improved = !stopper.seen || el.validation.total < stopper.best;
        bool stop = stopper.update(epoch, el.validation.total);
        if (improved) {
            result.best_params = params;
            result.log.best_epoch = epoch;
            result.log.best_val_loss = el.validation.total;
        }
        if (on_epoch && on_epoch(epoch, params, result.log)) break;
        if (stop) {
            result.log.stopped_early = true;
            break;
        }
    }
    return result;
}

}  // namespace sleepdet
