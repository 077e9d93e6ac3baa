#include "sleepdet/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "sleepdet/common.hpp"
#include "sleepdet/rng.hpp"

namespace sleepdet {

using nlohmann::json;

namespace {

// Multi-accumulator dot product: reassociation is explicit in the source, so
// the compiler can vectorize it without fast-math and the result is stable
// across runs.
inline double dot(const double* a, const double* b, int n) {
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0, s4 = 0, s5 = 0, s6 = 0, s7 = 0;
    int i = 0;
    for (; i + 8 <= n; i += 8) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        s4 += a[i + 4] * b[i + 4];
        s5 += a[i + 5] * b[i + 5];
        s6 += a[i + 6] * b[i + 6];
        s7 += a[i + 7] * b[i + 7];
    }
    double s = ((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7));
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

inline void axpy(double* y, const double* x, double c, int n) {
    for (int i = 0; i < n; ++i) y[i] += c * x[i];
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void softmax_inplace(double* v, int n) {
    double mx = v[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, v[i]);
    double sum = 0;
    for (int i = 0; i < n; ++i) {
        v[i] = std::exp(v[i] - mx);
        sum += v[i];
    }
    for (int i = 0; i < n; ++i) v[i] /= sum;
}

void check_finite(const std::vector<double>& v, const char* layer) {
    double s = 0;
    for (double x : v) s += x;
    if (!std::isfinite(s)) throw NumericError(std::string("non-finite activations in ") + layer);
}

struct Geometry {
    int q0, q1, q2, q3, flat;
    int pad_left, pad_len0, pad_len1, pad_len2;
};

Geometry geometry(const ModelConfig& cfg) {
    Geometry g;
    g.q0 = cfg.segment_len();
    g.q1 = g.q0 / cfg.pool_width;
    g.q2 = g.q1 / cfg.pool_width;
    g.q3 = g.q2 / cfg.pool_width;
    g.flat = cfg.filters[2] * g.q3;
    g.pad_left = (cfg.kernel - 1) / 2;
    g.pad_len0 = g.q0 + cfg.kernel - 1;
    g.pad_len1 = g.q1 + cfg.kernel - 1;
    g.pad_len2 = g.q2 + cfg.kernel - 1;
    return g;
}

// out[oc][t] = b[oc] + sum_ic dot(w[oc][ic], pad[ic] + t), then ReLU.
void conv_relu_forward(const ConvParams& p, const double* pad, int pad_len, int t_len,
                       double* out) {
    for (int oc = 0; oc < p.out_c; ++oc) {
        double* orow = out + static_cast<size_t>(oc) * t_len;
        for (int t = 0; t < t_len; ++t) orow[t] = p.b[static_cast<size_t>(oc)];
        for (int ic = 0; ic < p.in_c; ++ic) {
            const double* wrow = p.w.data() + (static_cast<size_t>(oc) * p.in_c + ic) * p.kernel;
            const double* prow = pad + static_cast<size_t>(ic) * pad_len;
            for (int t = 0; t < t_len; ++t) orow[t] += dot(wrow, prow + t, p.kernel);
        }
        for (int t = 0; t < t_len; ++t)
            if (orow[t] < 0) orow[t] = 0;
    }
}

// dact is already ReLU-masked. Accumulates weight/bias grads; writes input
// grads into dpad when provided (layer 1 skips it).
void conv_backward(const ConvParams& p, const double* pad, int pad_len, int t_len,
                   const double* dact, ConvParams& g, double* dpad) {
    for (int oc = 0; oc < p.out_c; ++oc) {
        const double* drow = dact + static_cast<size_t>(oc) * t_len;
        double s = 0;
        for (int t = 0; t < t_len; ++t) s += drow[t];
        g.b[static_cast<size_t>(oc)] += s;
        for (int ic = 0; ic < p.in_c; ++ic) {
            const double* prow = pad + static_cast<size_t>(ic) * pad_len;
            double* gw = g.w.data() + (static_cast<size_t>(oc) * p.in_c + ic) * p.kernel;
            for (int j = 0; j < p.kernel; ++j) gw[j] += dot(drow, prow + j, t_len);
            if (dpad) {
                const double* wrow =
                    p.w.data() + (static_cast<size_t>(oc) * p.in_c + ic) * p.kernel;
                double* dprow = dpad + static_cast<size_t>(ic) * pad_len;
                for (int t = 0; t < t_len; ++t) axpy(dprow + t, wrow, drow[t], p.kernel);
            }
        }
    }
}

void avg_pool_forward(const double* in, int t_len, int channels, int pw, double* out) {
    int out_len = t_len / pw;
    double inv = 1.0 / pw;
    for (int c = 0; c < channels; ++c) {
        const double* irow = in + static_cast<size_t>(c) * t_len;
        double* orow = out + static_cast<size_t>(c) * out_len;
        for (int u = 0; u < out_len; ++u) {
            double s = 0;
            for (int r = 0; r < pw; ++r) s += irow[u * pw + r];
            orow[u] = s * inv;
        }
    }
}

// Distributes pooled grads evenly and applies the ReLU mask from `act`.
void pool_relu_backward(const double* dpool, int out_len, int channels, int pw, int t_len,
                        const double* act, double* dact) {
    double inv = 1.0 / pw;
    for (int c = 0; c < channels; ++c) {
        const double* drow = dpool + static_cast<size_t>(c) * out_len;
        const double* arow = act + static_cast<size_t>(c) * t_len;
        double* orow = dact + static_cast<size_t>(c) * t_len;
        for (int t = 0; t < t_len; ++t) orow[t] = 0;
        for (int u = 0; u < out_len; ++u) {
            double gv = drow[u] * inv;
            for (int r = 0; r < pw; ++r) {
                int t = u * pw + r;
                if (arow[t] > 0) orow[t] = gv;
            }
        }
    }
}

}  // namespace

void ModelConfig::validate() const {
    if (channels <= 0 || input_len <= 0 || time_splits <= 0 || kernel <= 0 || pool_width <= 0 ||
        dense_units <= 0 || lstm_hidden <= 0)
        throw ValidationError("model config: all dimensions must be positive");
    if (input_len % time_splits != 0)
        throw ValidationError("model config: input_len must be divisible by time_splits");
    if (dropout_rate < 0 || dropout_rate >= 1)
        throw ValidationError("model config: dropout_rate must lie in [0, 1)");
    for (int f : filters)
        if (f <= 0) throw ValidationError("model config: filter counts must be positive");
    Geometry g = geometry(*this);
    if (g.q3 < 1)
        throw ValidationError("model config: pooling collapses the segment below one sample");
}

ModelParams init_params(const ModelConfig& cfg) {
    cfg.validate();
    Geometry g = geometry(cfg);

    ModelParams p;
    p.cfg = cfg;
    auto make_conv = [](ConvParams& c, int out_c, int in_c, int k) {
        c.out_c = out_c;
        c.in_c = in_c;
        c.kernel = k;
        c.w.assign(static_cast<size_t>(out_c) * in_c * k, 0.0);
        c.b.assign(static_cast<size_t>(out_c), 0.0);
    };
    make_conv(p.conv1, cfg.filters[0], cfg.channels, cfg.kernel);
    make_conv(p.conv2, cfg.filters[1], cfg.filters[0], cfg.kernel);
    make_conv(p.conv3, cfg.filters[2], cfg.filters[1], cfg.kernel);
    p.dense.out = cfg.dense_units;
    p.dense.in = g.flat;
    p.dense.w.assign(static_cast<size_t>(p.dense.out) * p.dense.in, 0.0);
    p.dense.b.assign(static_cast<size_t>(p.dense.out), 0.0);
    p.lstm.hidden = cfg.lstm_hidden;
    p.lstm.in = cfg.dense_units;
    p.lstm.wx.assign(static_cast<size_t>(4 * p.lstm.hidden) * p.lstm.in, 0.0);
    p.lstm.wh.assign(static_cast<size_t>(4 * p.lstm.hidden) * p.lstm.hidden, 0.0);
    p.lstm.b.assign(static_cast<size_t>(4 * p.lstm.hidden), 0.0);
    p.head.out = cfg.output_len();
    p.head.in = cfg.lstm_hidden;
    p.head.w.assign(static_cast<size_t>(p.head.out) * p.head.in, 0.0);
    p.head.b.assign(static_cast<size_t>(p.head.out), 0.0);

    Rng rng(derive_seed(cfg.seed, 0x1417ULL));
    auto fill = [&rng](std::vector<double>& w, int fan_in, int fan_out) {
        double bound = std::sqrt(6.0 / (fan_in + fan_out));
        for (double& x : w) x = rng.uniform(-bound, bound);
    };
    fill(p.conv1.w, p.conv1.in_c * cfg.kernel, p.conv1.out_c * cfg.kernel);
    fill(p.conv2.w, p.conv2.in_c * cfg.kernel, p.conv2.out_c * cfg.kernel);
    fill(p.conv3.w, p.conv3.in_c * cfg.kernel, p.conv3.out_c * cfg.kernel);
    fill(p.dense.w, p.dense.in, p.dense.out);
    fill(p.lstm.wx, p.lstm.in, 4 * p.lstm.hidden);
    fill(p.lstm.wh, p.lstm.hidden, 4 * p.lstm.hidden);
    fill(p.head.w, p.head.in, p.head.out);
    return p;
}

ModelParams zeros_like(const ModelParams& p) {
    ModelParams z = p;
    for_each_tensor(z, [](const char*, std::vector<double>& t) {
        std::fill(t.begin(), t.end(), 0.0);
    });
    return z;
}

std::vector<double> forward(const ModelParams& params, std::span<const float> input,
                            bool training, uint64_t dropout_seed, ForwardTrace& trace) {
    const ModelConfig& cfg = params.cfg;
    const Geometry g = geometry(cfg);
    const int p_steps = cfg.time_splits;
    const int d = cfg.channels;
    const int h = cfg.lstm_hidden;
    const int u = cfg.dense_units;
    const int out_len = cfg.output_len();

    if (input.size() != static_cast<size_t>(d) * cfg.input_len)
        throw ValidationError("forward: input size does not match D x L");

    trace.training = training;
    auto sized = [](std::vector<double>& v, size_t n) { v.resize(n); };
    sized(trace.in_pad, static_cast<size_t>(p_steps) * d * g.pad_len0);
    sized(trace.act1, static_cast<size_t>(p_steps) * cfg.filters[0] * g.q0);
    sized(trace.pad1, static_cast<size_t>(p_steps) * cfg.filters[0] * g.pad_len1);
    sized(trace.act2, static_cast<size_t>(p_steps) * cfg.filters[1] * g.q1);
    sized(trace.pad2, static_cast<size_t>(p_steps) * cfg.filters[1] * g.pad_len2);
    sized(trace.act3, static_cast<size_t>(p_steps) * cfg.filters[2] * g.q2);
    sized(trace.pool3, static_cast<size_t>(p_steps) * g.flat);
    sized(trace.dense_relu, static_cast<size_t>(p_steps) * u);
    sized(trace.drop_mask, static_cast<size_t>(p_steps) * u);
    sized(trace.feat, static_cast<size_t>(p_steps) * u);
    sized(trace.gates, static_cast<size_t>(p_steps) * 4 * h);
    sized(trace.cell, static_cast<size_t>(p_steps) * h);
    sized(trace.tanh_cell, static_cast<size_t>(p_steps) * h);
    sized(trace.hidden, static_cast<size_t>(p_steps) * h);
    sized(trace.logits, static_cast<size_t>(out_len));
    sized(trace.output, static_cast<size_t>(out_len));

    Rng drop_rng(derive_seed(dropout_seed, 0xd207ULL));
    const double keep = 1.0 - cfg.dropout_rate;

    std::vector<double> pool_buf(static_cast<size_t>(std::max(cfg.filters[0] * g.q1,
                                                              cfg.filters[1] * g.q2)));
    for (int s = 0; s < p_steps; ++s) {
        // pad the widened segment; pad buffers are sized so untouched edges stay zero
        double* pad0 = trace.in_pad.data() + static_cast<size_t>(s) * d * g.pad_len0;
        for (int c = 0; c < d; ++c) {
            const float* src =
                input.data() + static_cast<size_t>(c) * cfg.input_len + static_cast<size_t>(s) * g.q0;
            double* dst = pad0 + static_cast<size_t>(c) * g.pad_len0;
            std::fill(dst, dst + g.pad_left, 0.0);
            for (int t = 0; t < g.q0; ++t) dst[g.pad_left + t] = src[t];
            std::fill(dst + g.pad_left + g.q0, dst + g.pad_len0, 0.0);
        }

        double* act1 = trace.act1.data() + static_cast<size_t>(s) * cfg.filters[0] * g.q0;
        conv_relu_forward(params.conv1, pad0, g.pad_len0, g.q0, act1);

        double* pad1 = trace.pad1.data() + static_cast<size_t>(s) * cfg.filters[0] * g.pad_len1;
        avg_pool_forward(act1, g.q0, cfg.filters[0], cfg.pool_width, pool_buf.data());
        for (int c = 0; c < cfg.filters[0]; ++c) {
            double* dst = pad1 + static_cast<size_t>(c) * g.pad_len1;
            std::fill(dst, dst + g.pad_len1, 0.0);
            std::memcpy(dst + g.pad_left, pool_buf.data() + static_cast<size_t>(c) * g.q1,
                        sizeof(double) * static_cast<size_t>(g.q1));
        }

        double* act2 = trace.act2.data() + static_cast<size_t>(s) * cfg.filters[1] * g.q1;
        conv_relu_forward(params.conv2, pad1, g.pad_len1, g.q1, act2);

        double* pad2 = trace.pad2.data() + static_cast<size_t>(s) * cfg.filters[1] * g.pad_len2;
        avg_pool_forward(act2, g.q1, cfg.filters[1], cfg.pool_width, pool_buf.data());
        for (int c = 0; c < cfg.filters[1]; ++c) {
            double* dst = pad2 + static_cast<size_t>(c) * g.pad_len2;
            std::fill(dst, dst + g.pad_len2, 0.0);
            std::memcpy(dst + g.pad_left, pool_buf.data() + static_cast<size_t>(c) * g.q2,
                        sizeof(double) * static_cast<size_t>(g.q2));
        }

        double* act3 = trace.act3.data() + static_cast<size_t>(s) * cfg.filters[2] * g.q2;
        conv_relu_forward(params.conv3, pad2, g.pad_len2, g.q2, act3);

        double* flat = trace.pool3.data() + static_cast<size_t>(s) * g.flat;
        avg_pool_forward(act3, g.q2, cfg.filters[2], cfg.pool_width, flat);

        double* drelu = trace.dense_relu.data() + static_cast<size_t>(s) * u;
        for (int o = 0; o < u; ++o) {
            double z = params.dense.b[static_cast<size_t>(o)] +
                       dot(params.dense.w.data() + static_cast<size_t>(o) * g.flat, flat, g.flat);
            drelu[o] = z > 0 ? z : 0;
        }

        double* mask = trace.drop_mask.data() + static_cast<size_t>(s) * u;
        double* feat = trace.feat.data() + static_cast<size_t>(s) * u;
        if (training && cfg.dropout_rate > 0) {
            for (int o = 0; o < u; ++o) mask[o] = drop_rng.uniform() < keep ? 1.0 / keep : 0.0;
        } else {
            for (int o = 0; o < u; ++o) mask[o] = 1.0;
        }
        for (int o = 0; o < u; ++o) feat[o] = drelu[o] * mask[o];
    }
    check_finite(trace.dense_relu, "conv/dense stack");

    // LSTM over the P segment features
    std::vector<double> z(static_cast<size_t>(4) * h);
    for (int s = 0; s < p_steps; ++s) {
        const double* x = trace.feat.data() + static_cast<size_t>(s) * u;
        const double* h_prev = s > 0 ? trace.hidden.data() + static_cast<size_t>(s - 1) * h : nullptr;
        const double* c_prev = s > 0 ? trace.cell.data() + static_cast<size_t>(s - 1) * h : nullptr;
        for (int j = 0; j < 4 * h; ++j) {
            double v = params.lstm.b[static_cast<size_t>(j)] +
                       dot(params.lstm.wx.data() + static_cast<size_t>(j) * u, x, u);
            if (h_prev) v += dot(params.lstm.wh.data() + static_cast<size_t>(j) * h, h_prev, h);
            z[static_cast<size_t>(j)] = v;
        }
        double* gates = trace.gates.data() + static_cast<size_t>(s) * 4 * h;
        double* cell = trace.cell.data() + static_cast<size_t>(s) * h;
        double* tc = trace.tanh_cell.data() + static_cast<size_t>(s) * h;
        double* hid = trace.hidden.data() + static_cast<size_t>(s) * h;
        for (int j = 0; j < h; ++j) {
            double gi = sigmoid(z[static_cast<size_t>(j)]);
            double gf = sigmoid(z[static_cast<size_t>(h + j)]);
            double gg = std::tanh(z[static_cast<size_t>(2 * h + j)]);
            double go = sigmoid(z[static_cast<size_t>(3 * h + j)]);
            gates[j] = gi;
            gates[h + j] = gf;
            gates[2 * h + j] = gg;
            gates[3 * h + j] = go;
            double c_val = gi * gg + (c_prev ? gf * c_prev[j] : 0.0);
            cell[j] = c_val;
            tc[j] = std::tanh(c_val);
            hid[j] = go * tc[j];
        }
    }
    check_finite(trace.hidden, "lstm");

    const double* h_last = trace.hidden.data() + static_cast<size_t>(p_steps - 1) * h;
    for (int o = 0; o < out_len; ++o)
        trace.logits[static_cast<size_t>(o)] =
            params.head.b[static_cast<size_t>(o)] +
            dot(params.head.w.data() + static_cast<size_t>(o) * h, h_last, h);
    check_finite(trace.logits, "head");

    trace.output = trace.logits;
    const VectorLayout lay = layout_for(cfg.assembly);
    softmax_inplace(trace.output.data() + lay.stage, 5);
    if (lay.arousal_flag >= 0)
        trace.output[static_cast<size_t>(lay.arousal_flag)] =
            sigmoid(trace.output[static_cast<size_t>(lay.arousal_flag)]);
    if (lay.resp_flag >= 0) {
        trace.output[static_cast<size_t>(lay.resp_flag)] =
            sigmoid(trace.output[static_cast<size_t>(lay.resp_flag)]);
        softmax_inplace(trace.output.data() + lay.resp_apnea, 2);
    }
    return trace.output;
}

std::vector<double> forward(const ModelParams& params, std::span<const float> input,
                            bool training, uint64_t dropout_seed) {
    ForwardTrace trace;
    return forward(params, input, training, dropout_seed, trace);
}

void backward_accumulate(const ModelParams& params, const ForwardTrace& trace,
                         std::span<const double> loss_grad, ModelParams& grads,
                         BackwardScratch& sc) {
    const ModelConfig& cfg = params.cfg;
    const Geometry g = geometry(cfg);
    const int p_steps = cfg.time_splits;
    const int h = cfg.lstm_hidden;
    const int u = cfg.dense_units;
    const int out_len = cfg.output_len();
    if (loss_grad.size() != static_cast<size_t>(out_len))
        throw ValidationError("backward: loss gradient length does not match assembly");
    if (trace.logits.size() != static_cast<size_t>(out_len) ||
        trace.hidden.size() != static_cast<size_t>(p_steps) * h)
        throw ValidationError("backward: trace does not match model config");

    // head activation Jacobians: dL/d(logits) from dL/d(output)
    sc.dlogits.assign(static_cast<size_t>(out_len), 0.0);
    const VectorLayout lay = layout_for(cfg.assembly);
    const std::vector<double>& y = trace.output;
    auto softmax_back = [&](int off, int n) {
        double dotv = 0;
        for (int i = 0; i < n; ++i)
            dotv += loss_grad[static_cast<size_t>(off + i)] * y[static_cast<size_t>(off + i)];
        for (int i = 0; i < n; ++i)
            sc.dlogits[static_cast<size_t>(off + i)] =
                y[static_cast<size_t>(off + i)] * (loss_grad[static_cast<size_t>(off + i)] - dotv);
    };
    softmax_back(lay.stage, 5);
    if (lay.arousal_flag >= 0) {
        double ya = y[static_cast<size_t>(lay.arousal_flag)];
        sc.dlogits[static_cast<size_t>(lay.arousal_flag)] =
            loss_grad[static_cast<size_t>(lay.arousal_flag)] * ya * (1.0 - ya);
        sc.dlogits[static_cast<size_t>(lay.arousal_x)] = loss_grad[static_cast<size_t>(lay.arousal_x)];
        sc.dlogits[static_cast<size_t>(lay.arousal_w)] = loss_grad[static_cast<size_t>(lay.arousal_w)];
    }
    if (lay.resp_flag >= 0) {
        double yp = y[static_cast<size_t>(lay.resp_flag)];
        sc.dlogits[static_cast<size_t>(lay.resp_flag)] =
            loss_grad[static_cast<size_t>(lay.resp_flag)] * yp * (1.0 - yp);
        softmax_back(lay.resp_apnea, 2);
        sc.dlogits[static_cast<size_t>(lay.resp_x)] = loss_grad[static_cast<size_t>(lay.resp_x)];
        sc.dlogits[static_cast<size_t>(lay.resp_w)] = loss_grad[static_cast<size_t>(lay.resp_w)];
    }

    const double* h_last = trace.hidden.data() + static_cast<size_t>(p_steps - 1) * h;
    sc.dh.assign(static_cast<size_t>(h), 0.0);
    for (int o = 0; o < out_len; ++o) {
        double dz = sc.dlogits[static_cast<size_t>(o)];
        grads.head.b[static_cast<size_t>(o)] += dz;
        axpy(grads.head.w.data() + static_cast<size_t>(o) * h, h_last, dz, h);
        axpy(sc.dh.data(), params.head.w.data() + static_cast<size_t>(o) * h, dz, h);
    }

    // backpropagation through time; dfeat collects per-segment feature grads
    sc.dfeat.assign(static_cast<size_t>(p_steps) * u, 0.0);
    sc.dc.assign(static_cast<size_t>(h), 0.0);
    sc.dgates.assign(static_cast<size_t>(4) * h, 0.0);
    sc.dh_prev.assign(static_cast<size_t>(h), 0.0);
    sc.dc_prev.assign(static_cast<size_t>(h), 0.0);
    for (int s = p_steps - 1; s >= 0; --s) {
        const double* gates = trace.gates.data() + static_cast<size_t>(s) * 4 * h;
        const double* tc = trace.tanh_cell.data() + static_cast<size_t>(s) * h;
        const double* c_prev = s > 0 ? trace.cell.data() + static_cast<size_t>(s - 1) * h : nullptr;
        const double* h_prev = s > 0 ? trace.hidden.data() + static_cast<size_t>(s - 1) * h : nullptr;
        for (int j = 0; j < h; ++j) {
            double gi = gates[j], gf = gates[h + j], gg = gates[2 * h + j], go = gates[3 * h + j];
            double dh_j = sc.dh[static_cast<size_t>(j)];
            double dc_j = sc.dc[static_cast<size_t>(j)] + dh_j * go * (1.0 - tc[j] * tc[j]);
            double do_j = dh_j * tc[j];
            double di = dc_j * gg;
            double dg = dc_j * gi;
            double df = c_prev ? dc_j * c_prev[j] : 0.0;
            sc.dc_prev[static_cast<size_t>(j)] = dc_j * gf;
            sc.dgates[static_cast<size_t>(j)] = di * gi * (1.0 - gi);
            sc.dgates[static_cast<size_t>(h + j)] = df * gf * (1.0 - gf);
            sc.dgates[static_cast<size_t>(2 * h + j)] = dg * (1.0 - gg * gg);
            sc.dgates[static_cast<size_t>(3 * h + j)] = do_j * go * (1.0 - go);
        }
        const double* x = trace.feat.data() + static_cast<size_t>(s) * u;
        double* dx = sc.dfeat.data() + static_cast<size_t>(s) * u;
        std::fill(sc.dh_prev.begin(), sc.dh_prev.end(), 0.0);
        for (int j = 0; j < 4 * h; ++j) {
            double dz = sc.dgates[static_cast<size_t>(j)];
            if (dz == 0) continue;
            grads.lstm.b[static_cast<size_t>(j)] += dz;
            axpy(grads.lstm.wx.data() + static_cast<size_t>(j) * u, x, dz, u);
            axpy(dx, params.lstm.wx.data() + static_cast<size_t>(j) * u, dz, u);
            if (h_prev) {
                axpy(grads.lstm.wh.data() + static_cast<size_t>(j) * h, h_prev, dz, h);
                axpy(sc.dh_prev.data(), params.lstm.wh.data() + static_cast<size_t>(j) * h, dz, h);
            }
        }
        sc.dh.swap(sc.dh_prev);
        sc.dc.swap(sc.dc_prev);
    }

    // per-segment dense + conv stack
    sc.dpad2.assign(static_cast<size_t>(cfg.filters[1]) * g.pad_len2, 0.0);
    sc.dpad1.assign(static_cast<size_t>(cfg.filters[0]) * g.pad_len1, 0.0);
    sc.dact.resize(static_cast<size_t>(std::max({cfg.filters[0] * g.q0, cfg.filters[1] * g.q1,
                                                 cfg.filters[2] * g.q2})));
    sc.dflat.resize(static_cast<size_t>(g.flat));
    std::vector<double> dpool(static_cast<size_t>(std::max(cfg.filters[0] * g.q1,
                                                           cfg.filters[1] * g.q2)));
    std::vector<double> dpre(static_cast<size_t>(u));
    for (int s = 0; s < p_steps; ++s) {
        const double* drelu = trace.dense_relu.data() + static_cast<size_t>(s) * u;
        const double* mask = trace.drop_mask.data() + static_cast<size_t>(s) * u;
        const double* dfeat = sc.dfeat.data() + static_cast<size_t>(s) * u;
        for (int o = 0; o < u; ++o) {
            double d = dfeat[o] * mask[o];
            dpre[static_cast<size_t>(o)] = drelu[o] > 0 ? d : 0.0;
        }
        const double* flat = trace.pool3.data() + static_cast<size_t>(s) * g.flat;
        std::fill(sc.dflat.begin(), sc.dflat.end(), 0.0);
        for (int o = 0; o < u; ++o) {
            double dz = dpre[static_cast<size_t>(o)];
            if (dz == 0) continue;
            grads.dense.b[static_cast<size_t>(o)] += dz;
            axpy(grads.dense.w.data() + static_cast<size_t>(o) * g.flat, flat, dz, g.flat);
            axpy(sc.dflat.data(), params.dense.w.data() + static_cast<size_t>(o) * g.flat, dz,
                 g.flat);
        }

        // dflat is the pooled conv3 output grad
        const double* act3 = trace.act3.data() + static_cast<size_t>(s) * cfg.filters[2] * g.q2;
        pool_relu_backward(sc.dflat.data(), g.q3, cfg.filters[2], cfg.pool_width, g.q2, act3,
                           sc.dact.data());
        const double* pad2 = trace.pad2.data() + static_cast<size_t>(s) * cfg.filters[1] * g.pad_len2;
        std::fill(sc.dpad2.begin(), sc.dpad2.end(), 0.0);
        conv_backward(params.conv3, pad2, g.pad_len2, g.q2, sc.dact.data(), grads.conv3,
                      sc.dpad2.data());

        for (int c = 0; c < cfg.filters[1]; ++c)
            std::memcpy(dpool.data() + static_cast<size_t>(c) * g.q2,
                        sc.dpad2.data() + static_cast<size_t>(c) * g.pad_len2 + g.pad_left,
                        sizeof(double) * static_cast<size_t>(g.q2));
        const double* act2 = trace.act2.data() + static_cast<size_t>(s) * cfg.filters[1] * g.q1;
        pool_relu_backward(dpool.data(), g.q2, cfg.filters[1], cfg.pool_width, g.q1, act2,
                           sc.dact.data());
        const double* pad1 = trace.pad1.data() + static_cast<size_t>(s) * cfg.filters[0] * g.pad_len1;
        std::fill(sc.dpad1.begin(), sc.dpad1.end(), 0.0);
        conv_backward(params.conv2, pad1, g.pad_len1, g.q1, sc.dact.data(), grads.conv2,
                      sc.dpad1.data());

        for (int c = 0; c < cfg.filters[0]; ++c)
            std::memcpy(dpool.data() + static_cast<size_t>(c) * g.q1,
                        sc.dpad1.data() + static_cast<size_t>(c) * g.pad_len1 + g.pad_left,
                        sizeof(double) * static_cast<size_t>(g.q1));
        const double* act1 = trace.act1.data() + static_cast<size_t>(s) * cfg.filters[0] * g.q0;
        pool_relu_backward(dpool.data(), g.q1, cfg.filters[0], cfg.pool_width, g.q0, act1,
                           sc.dact.data());
        const double* pad0 = trace.in_pad.data() + static_cast<size_t>(s) * cfg.channels * g.pad_len0;
        conv_backward(params.conv1, pad0, g.pad_len0, g.q0, sc.dact.data(), grads.conv1, nullptr);
    }
}

ModelParams backward(const ModelParams& params, const ForwardTrace& trace,
                     std::span<const double> loss_grad) {
    ModelParams grads = zeros_like(params);
    BackwardScratch sc;
    backward_accumulate(params, trace, loss_grad, grads, sc);
    return grads;
}

namespace {

json model_config_json(const ModelConfig& cfg) {
    return {{"channels", cfg.channels},
            {"input_len", cfg.input_len},
            {"time_splits", cfg.time_splits},
            {"kernel", cfg.kernel},
            {"filters", cfg.filters},
            {"pool_width", cfg.pool_width},
            {"dense_units", cfg.dense_units},
            {"dropout_rate", cfg.dropout_rate},
            {"lstm_hidden", cfg.lstm_hidden},
            {"assembly", assembly_name(cfg.assembly)},
            {"seed", cfg.seed}};
}

ModelConfig model_config_parse(const json& j) {
    ModelConfig cfg;
    cfg.channels = j.at("channels").get<int>();
    cfg.input_len = j.at("input_len").get<int>();
    cfg.time_splits = j.at("time_splits").get<int>();
    cfg.kernel = j.at("kernel").get<int>();
    auto f = j.at("filters").get<std::vector<int>>();
    if (f.size() != 3) throw ValidationError("model config: filters must list 3 blocks");
    cfg.filters = {f[0], f[1], f[2]};
    cfg.pool_width = j.at("pool_width").get<int>();
    cfg.dense_units = j.at("dense_units").get<int>();
    cfg.dropout_rate = j.at("dropout_rate").get<double>();
    cfg.lstm_hidden = j.at("lstm_hidden").get<int>();
    auto a = parse_assembly(j.at("assembly").get<std::string>());
    if (!a) throw ValidationError("model config: unknown assembly");
    cfg.assembly = *a;
    cfg.seed = j.at("seed").get<uint64_t>();
    return cfg;
}

constexpr char kCheckpointMagic[8] = {'S', 'L', 'P', 'D', 'C', 'K', '0', '1'};

}  // namespace

std::string model_config_to_json(const ModelConfig& cfg) { return model_config_json(cfg).dump(); }

ModelConfig model_config_from_json(const std::string& text) {
    return model_config_parse(json::parse(text));
}

void save_params(const ModelParams& params, const std::filesystem::path& path,
                 const std::string& meta_json) {
    json header;
    header["version"] = 1;
    header["dtype"] = "f64";
    header["config"] = model_config_json(params.cfg);
    header["meta"] = json::parse(meta_json);
    header["tensors"] = json::array();
    for_each_tensor(params, [&](const char* name, const std::vector<double>& t) {
        header["tensors"].push_back({{"name", name}, {"size", t.size()}});
    });
    std::string htext = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write checkpoint: " + path.string());
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    auto hlen = static_cast<uint64_t>(htext.size());
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for_each_tensor(params, [&](const char*, const std::vector<double>& t) {
        out.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(t.size() * sizeof(double)));
    });
    if (!out) throw ValidationError("checkpoint write failed: " + path.string());
}

Checkpoint load_params(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open checkpoint: " + path.string());
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw ValidationError("not a checkpoint file: " + path.string());
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!in || hlen > (1ULL << 24)) throw ValidationError("corrupt checkpoint header");
    std::string htext(hlen, '\0');
    in.read(htext.data(), static_cast<std::streamsize>(hlen));
    json header = json::parse(htext, nullptr, false);
    if (header.is_discarded()) throw ValidationError("corrupt checkpoint header JSON");
    if (header.at("dtype").get<std::string>() != "f64")
        throw ValidationError("unsupported checkpoint dtype");

    Checkpoint ck;
    ck.params = init_params(model_config_parse(header.at("config")));
    ck.meta_json = header.at("meta").dump();

    size_t ti = 0;
    const auto& tensors = header.at("tensors");
    for_each_tensor(ck.params, [&](const char* name, std::vector<double>& t) {
        if (ti >= tensors.size()) throw ValidationError("checkpoint tensor list too short");
        if (tensors[ti].at("name").get<std::string>() != name ||
            tensors[ti].at("size").get<size_t>() != t.size())
            throw ValidationError(std::string("checkpoint tensor mismatch at ") + name);
        in.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.size() * sizeof(double)));
        ++ti;
    });
    if (!in) throw ValidationError("checkpoint truncated: " + path.string());
    in.peek();
    if (!in.eof()) throw ValidationError("checkpoint has trailing bytes: " + path.string());
    for_each_tensor(ck.params, [&](const char* name, std::vector<double>& t) {
        for (double x : t)
            if (!std::isfinite(x))
                throw ValidationError(std::string("checkpoint holds non-finite values in ") + name);
    });
    return ck;
}

}  // namespace sleepdet
