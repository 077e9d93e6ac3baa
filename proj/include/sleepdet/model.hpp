#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sleepdet/codec.hpp"

namespace sleepdet {

// CNN-LSTM geometry. The input is split into `time_splits` equal segments;
// each passes through three conv/ReLU/avg-pool blocks and a dense bottleneck,
// and the per-segment features feed an LSTM whose last hidden state drives the
// mixed-activation output head.
struct ModelConfig {
    int channels = 4;                     // D
    int input_len = 15000;                // (2*delta + N) * rate
    int time_splits = 5;                  // P
    int kernel = 100;
    std::array<int, 3> filters{8, 16, 32};
    int pool_width = 6;
    int dense_units = 50;
    double dropout_rate = 0.5;
    int lstm_hidden = 50;
    Assembly assembly = Assembly::SAR;
    uint64_t seed = 1;

    int segment_len() const { return input_len / time_splits; }
    int output_len() const { return vector_length(assembly); }
    void validate() const;
};

struct ConvParams {
    int out_c = 0, in_c = 0, kernel = 0;
    std::vector<double> w;  // out_c x in_c x kernel
    std::vector<double> b;  // out_c
};

struct DenseParams {
    int out = 0, in = 0;
    std::vector<double> w;  // out x in
    std::vector<double> b;  // out
};

struct LstmParams {
    int hidden = 0, in = 0;
    std::vector<double> wx;  // 4H x in   (gate order i, f, g, o)
    std::vector<double> wh;  // 4H x H
    std::vector<double> b;   // 4H
};

struct ModelParams {
    ModelConfig cfg;
    ConvParams conv1, conv2, conv3;
    DenseParams dense;
    LstmParams lstm;
    DenseParams head;
};

// Visit every tensor in checkpoint order.
template <typename P, typename F>
void for_each_tensor(P& params, F&& fn) {
    fn("conv1.w", params.conv1.w);
    fn("conv1.b", params.conv1.b);
    fn("conv2.w", params.conv2.w);
    fn("conv2.b", params.conv2.b);
    fn("conv3.w", params.conv3.w);
    fn("conv3.b", params.conv3.b);
    fn("dense.w", params.dense.w);
    fn("dense.b", params.dense.b);
    fn("lstm.wx", params.lstm.wx);
    fn("lstm.wh", params.lstm.wh);
    fn("lstm.b", params.lstm.b);
    fn("head.w", params.head.w);
    fn("head.b", params.head.b);
}

// Weights uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
ModelParams init_params(const ModelConfig& cfg);
ModelParams zeros_like(const ModelParams& p);

// Retained activations for one forward pass; backward replays from here.
struct ForwardTrace {
    bool training = false;
    std::vector<double> in_pad;      // P x D x (q0 + k - 1)
    std::vector<double> act1;        // P x f1 x q0      post-ReLU
    std::vector<double> pad1;        // P x f1 x (q1 + k - 1)
    std::vector<double> act2;        // P x f2 x q1
    std::vector<double> pad2;        // P x f2 x (q2 + k - 1)
    std::vector<double> act3;        // P x f3 x q2
    std::vector<double> pool3;       // P x f3 x q3      flattened conv features
    std::vector<double> dense_relu;  // P x U            pre-dropout
    std::vector<double> drop_mask;   // P x U            0 or 1/keep
    std::vector<double> feat;        // P x U            LSTM inputs
    std::vector<double> gates;       // P x 4H           post-activation
    std::vector<double> cell;        // P x H
    std::vector<double> tanh_cell;   // P x H
    std::vector<double> hidden;      // P x H
    std::vector<double> logits;      // output_len
    std::vector<double> output;      // output_len, post softmax/sigmoid
};

// Returns the post-activation output vector (softmax stage block, sigmoid
// presence flags, softmax respiratory class pair, linear coordinates).
// Dropout is active only when `training` and is fully determined by
// `dropout_seed`.
std::vector<double> forward(const ModelParams& params, std::span<const float> input,
                            bool training, uint64_t dropout_seed, ForwardTrace& trace);
std::vector<double> forward(const ModelParams& params, std::span<const float> input,
                            bool training = false, uint64_t dropout_seed = 0);

struct BackwardScratch {
    std::vector<double> dpad2, dpad1, dact, dflat, dfeat;
    std::vector<double> dgates, dh, dc, dh_prev, dc_prev, dlogits;
};

// loss_grad is dLoss/d(output activations); the head's softmax/sigmoid
// Jacobians are applied here. Gradients are accumulated into `grads`.
void backward_accumulate(const ModelParams& params, const ForwardTrace& trace,
                         std::span<const double> loss_grad, ModelParams& grads,
                         BackwardScratch& scratch);
ModelParams backward(const ModelParams& params, const ForwardTrace& trace,
                     std::span<const double> loss_grad);

// Checkpoint: magic + JSON header (config, version, dtype, free-form meta) +
// raw little-endian float64 tensor blobs in for_each_tensor order.
void save_params(const ModelParams& params, const std::filesystem::path& path,
                 const std::string& meta_json = "{}");
struct Checkpoint {
    ModelParams params;
    std::string meta_json;
};
Checkpoint load_params(const std::filesystem::path& path);

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace sleepdet
