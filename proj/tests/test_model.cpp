#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "sleepdet/common.hpp"
#include "sleepdet/model.hpp"
#include "sleepdet/rng.hpp"
#include "sleepdet/trainer.hpp"

using namespace sleepdet;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config(Assembly a = Assembly::SAR) {
    ModelConfig cfg;
    cfg.channels = 2;
    cfg.input_len = 600;
    cfg.time_splits = 2;
    cfg.kernel = 100;
    cfg.filters = {2, 4, 8};
    cfg.pool_width = 6;
    cfg.dense_units = 8;
    cfg.lstm_hidden = 8;
    cfg.assembly = a;
    cfg.seed = 3;
    return cfg;
}

std::vector<float> random_input(const ModelConfig& cfg, uint64_t seed) {
    Rng rng(seed);
    std::vector<float> x(static_cast<size_t>(cfg.channels) * cfg.input_len);
    for (auto& v : x) v = static_cast<float>(rng.normal());
    return x;
}

TargetVector random_target(Assembly a, uint64_t seed) {
    Rng rng(seed);
    WindowSpan span{0, 30};
    std::vector<Annotation> owned;
    if (assembly_has_arousal(a)) owned.push_back({10.0, 6.0, EventLabel::Arousal});
    if (assembly_has_respiratory(a)) owned.push_back({12.0, 20.0, EventLabel::Apnea});
    return encode(span, static_cast<EventLabel>(rng.index(5)), owned, a);
}

// max relative FD/analytic disagreement across a sample of indices per tensor
double gradcheck_max_rel(const ModelConfig& cfg, bool training, size_t max_per_tensor,
                         LossMode mode = LossMode::Multi) {
    ModelParams params = init_params(cfg);
    auto input = random_input(cfg, 11);
    auto target = random_target(cfg.assembly, 12);
    const uint64_t drop_seed = 5;

    ForwardTrace trace;
    auto out = forward(params, input, training, drop_seed, trace);
    auto lg = loss_grad(out, target, cfg.assembly, mode);
    ModelParams analytic = backward(params, trace, lg);

    const double h = 1e-4;
    double worst = 0;
    std::vector<std::vector<double>*> tensors;
    for_each_tensor(params, [&](const char*, std::vector<double>& t) { tensors.push_back(&t); });
    std::vector<const std::vector<double>*> grads;
    for_each_tensor(analytic,
                    [&](const char*, const std::vector<double>& t) { grads.push_back(&t); });

    for (size_t ti = 0; ti < tensors.size(); ++ti) {
        auto& t = *tensors[ti];
        size_t stride = std::max<size_t>(1, t.size() / max_per_tensor);
        for (size_t i = 0; i < t.size(); i += stride) {
            double keep = t[i];
            t[i] = keep + h;
            double lp = loss(forward(params, input, training, drop_seed), target, cfg.assembly,
                             mode).total;
            t[i] = keep - h;
            double lm = loss(forward(params, input, training, drop_seed), target, cfg.assembly,
                             mode).total;
            t[i] = keep;
            double fd = (lp - lm) / (2 * h);
            double an = (*grads[ti])[i];
            double rel = std::abs(fd - an) / std::max(std::abs(fd) + std::abs(an), 1e-6);
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("init: deterministic, zero biases, documented bound") {
    ModelConfig cfg;
    cfg.channels = 4;
    cfg.seed = 42;
    ModelParams a = init_params(cfg);
    ModelParams b = init_params(cfg);
    bool equal = true;
    for_each_tensor(a, [&](const char* name, std::vector<double>& t) {
        std::vector<double>* other = nullptr;
        for_each_tensor(b, [&](const char* n2, std::vector<double>& t2) {
            if (std::string(name) == n2) other = &t2;
        });
        if (t != *other) equal = false;
    });
    CHECK(equal);

    for (double x : a.conv1.b) CHECK(x == 0.0);
    for (double x : a.lstm.b) CHECK(x == 0.0);
    for (double x : a.head.b) CHECK(x == 0.0);

    // conv1 for D=4, kernel 100, 8 filters: bound = sqrt(6/(400+800))
    double bound = std::sqrt(6.0 / 1200.0);
    double max_abs = 0;
    for (double x : a.conv1.w) {
        CHECK(std::abs(x) <= bound);
        max_abs = std::max(max_abs, std::abs(x));
    }
    CHECK(max_abs > 0.8 * bound);
    CHECK(bound == doctest::Approx(0.0707).epsilon(1e-3));

    ModelConfig other = cfg;
    other.seed = 43;
    ModelParams c = init_params(other);
    CHECK(c.conv1.w != a.conv1.w);
}

TEST_CASE("default geometry: 3000 -> 500 -> 83 -> 13, flatten 416") {
    ModelConfig cfg;
    cfg.channels = 4;
    ModelParams p = init_params(cfg);
    CHECK(cfg.segment_len() == 3000);
    CHECK(p.dense.in == 416);
    CHECK(p.dense.out == 50);
    CHECK(p.lstm.in == 50);
    CHECK(p.head.in == 50);
    CHECK(p.head.out == 13);
}

TEST_CASE("config validation rejects degenerate geometry") {
    ModelConfig cfg = tiny_config();
    cfg.input_len = 601;  // not divisible by time_splits
    CHECK_THROWS_AS(init_params(cfg), ValidationError);
    cfg = tiny_config();
    cfg.pool_width = 40;  // 300 -> 7 -> 0
    CHECK_THROWS_AS(init_params(cfg), ValidationError);
    cfg = tiny_config();
    cfg.dropout_rate = 1.0;
    CHECK_THROWS_AS(init_params(cfg), ValidationError);
}

TEST_CASE("zero params: uniform softmax, 0.5 sigmoids, zero coordinates") {
    ModelConfig cfg = tiny_config(Assembly::SAR);
    ModelParams p = init_params(cfg);
    for_each_tensor(p, [](const char*, std::vector<double>& t) {
        std::fill(t.begin(), t.end(), 0.0);
    });
    std::vector<float> zeros(static_cast<size_t>(cfg.channels) * cfg.input_len, 0.0f);
    auto out = forward(p, zeros, false, 0);
    auto l = layout_for(cfg.assembly);
    for (int i = 0; i < 5; ++i) CHECK(out[static_cast<size_t>(l.stage + i)] == doctest::Approx(0.2));
    CHECK(out[static_cast<size_t>(l.arousal_flag)] == doctest::Approx(0.5));
    CHECK(out[static_cast<size_t>(l.resp_flag)] == doctest::Approx(0.5));
    CHECK(out[static_cast<size_t>(l.resp_apnea)] == doctest::Approx(0.5));
    CHECK(out[static_cast<size_t>(l.arousal_x)] == 0.0);
    CHECK(out[static_cast<size_t>(l.arousal_w)] == 0.0);
    CHECK(out[static_cast<size_t>(l.resp_x)] == 0.0);
    CHECK(out[static_cast<size_t>(l.resp_w)] == 0.0);
}

TEST_CASE("softmax blocks sum to 1 and sigmoids stay in (0,1)") {
    ModelConfig cfg = tiny_config(Assembly::SAR);
    ModelParams p = init_params(cfg);
    auto l = layout_for(cfg.assembly);
    for (uint64_t s = 0; s < 5; ++s) {
        auto out = forward(p, random_input(cfg, 100 + s), false, 0);
        double sum = 0;
        for (int i = 0; i < 5; ++i) sum += out[static_cast<size_t>(l.stage + i)];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        double pair = out[static_cast<size_t>(l.resp_apnea)] +
                      out[static_cast<size_t>(l.resp_hypopnea)];
        CHECK(pair == doctest::Approx(1.0).epsilon(1e-6));
        for (int idx : {l.arousal_flag, l.resp_flag}) {
            CHECK(out[static_cast<size_t>(idx)] > 0.0);
            CHECK(out[static_cast<size_t>(idx)] < 1.0);
        }
    }
}

TEST_CASE("inference is deterministic; dropout is seed-driven") {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg);
    auto x = random_input(cfg, 7);
    auto a = forward(p, x, false, 1);
    auto b = forward(p, x, false, 2);
    CHECK(a == b);

    auto t1 = forward(p, x, true, 9);
    auto t2 = forward(p, x, true, 9);
    CHECK(t1 == t2);
    auto t3 = forward(p, x, true, 10);
    CHECK(t1 != t3);
}

TEST_CASE("forward and backward are bit-deterministic") {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg);
    auto x = random_input(cfg, 8);
    TargetVector target = random_target(cfg.assembly, 9);

    ForwardTrace ta, tb;
    auto oa = forward(p, x, true, 77, ta);
    auto ob = forward(p, x, true, 77, tb);
    REQUIRE(oa == ob);
    auto lg = loss_grad(oa, target, cfg.assembly, LossMode::Multi);
    ModelParams ga = backward(p, ta, lg);
    ModelParams gb = backward(p, tb, lg);
    std::vector<const std::vector<double>*> va, vb;
    for_each_tensor(ga, [&](const char*, const std::vector<double>& t) { va.push_back(&t); });
    for_each_tensor(gb, [&](const char*, const std::vector<double>& t) { vb.push_back(&t); });
    for (size_t i = 0; i < va.size(); ++i) CHECK(*va[i] == *vb[i]);
}

TEST_CASE("forward rejects bad input sizes") {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg);
    std::vector<float> x(10, 0.0f);
    CHECK_THROWS_AS(forward(p, x, false, 0), ValidationError);
}

TEST_CASE("zero loss gradient produces zero parameter gradients") {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg);
    ForwardTrace trace;
    forward(p, random_input(cfg, 21), true, 3, trace);
    std::vector<double> zeros(static_cast<size_t>(cfg.output_len()), 0.0);
    ModelParams g = backward(p, trace, zeros);
    for_each_tensor(g, [](const char*, std::vector<double>& t) {
        for (double v : t) CHECK(v == 0.0);
    });
}

TEST_CASE("a masked linear coordinate leaves its head row untouched") {
    ModelConfig cfg = tiny_config(Assembly::SAR);
    ModelParams p = init_params(cfg);
    ForwardTrace trace;
    forward(p, random_input(cfg, 22), false, 0, trace);
    auto l = layout_for(cfg.assembly);

    std::vector<double> lg(static_cast<size_t>(cfg.output_len()), 0.0);
    lg[static_cast<size_t>(l.resp_x)] = 1.0;  // only one coordinate carries gradient
    ModelParams g = backward(p, trace, lg);

    for (int o = 0; o < p.head.out; ++o) {
        double row_norm = 0;
        for (int j = 0; j < p.head.in; ++j)
            row_norm += std::abs(g.head.w[static_cast<size_t>(o) * p.head.in + j]);
        if (o == l.resp_x)
            CHECK(row_norm > 0.0);
        else
            CHECK(row_norm == 0.0);  // linear components do not couple through activations
    }
}

TEST_CASE("gradients match central finite differences (inference mode)") {
    double worst = gradcheck_max_rel(tiny_config(Assembly::SAR), false, 24);
    CHECK(worst < 1e-4);
}

TEST_CASE("gradients match central finite differences (training mode, dropout on)") {
    double worst = gradcheck_max_rel(tiny_config(Assembly::SAR), true, 16);
    CHECK(worst < 1e-4);
}

TEST_CASE("gradients match finite differences for single-MSE loss and SA assembly") {
    double worst = gradcheck_max_rel(tiny_config(Assembly::SA), false, 16, LossMode::Single);
    CHECK(worst < 1e-4);
}

TEST_CASE("checkpoint round trip is bit-identical and configs survive") {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg);
    auto path = fs::temp_directory_path() / "sleepdet_model.ckpt";
    save_params(p, path, R"({"note":"unit"})");
    Checkpoint ck = load_params(path);

    bool equal = true;
    std::vector<const std::vector<double>*> pa, pb;
    for_each_tensor(p, [&](const char*, const std::vector<double>& t) { pa.push_back(&t); });
    for_each_tensor(ck.params, [&](const char*, const std::vector<double>& t) { pb.push_back(&t); });
    for (size_t i = 0; i < pa.size(); ++i)
        if (*pa[i] != *pb[i]) equal = false;
    CHECK(equal);
    CHECK(ck.params.cfg.channels == cfg.channels);
    CHECK(ck.params.cfg.assembly == cfg.assembly);
    CHECK(ck.meta_json.find("unit") != std::string::npos);

    auto x = random_input(cfg, 17);
    CHECK(forward(p, x, false, 0) == forward(ck.params, x, false, 0));
}

TEST_CASE("corrupt checkpoints are rejected") {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg);
    auto path = fs::temp_directory_path() / "sleepdet_model_corrupt.ckpt";
    save_params(p, path);

    auto size = fs::file_size(path);
    fs::resize_file(path, size - 16);
    CHECK_THROWS_WITH_AS(load_params(path), doctest::Contains("truncated"), ValidationError);

    std::ofstream junk(path, std::ios::binary | std::ios::trunc);
    junk << "not a checkpoint";
    junk.close();
    CHECK_THROWS_AS(load_params(path), ValidationError);
}
