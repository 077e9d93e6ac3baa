#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "sleepdet/common.hpp"
#include "sleepdet/dataset.hpp"
#include "sleepdet/rng.hpp"
#include "sleepdet/synth.hpp"

using namespace sleepdet;
namespace fs = std::filesystem;

namespace {

Record flat_record(double duration_s, std::vector<Annotation> extra) {
    Record r;
    r.id = "flat";
    r.duration_s = duration_s;
    Rng rng(5);
    for (const char* name : {"A", "B"}) {
        Channel ch;
        ch.name = name;
        ch.sample_rate_hz = 100.0;
        ch.samples.resize(static_cast<size_t>(duration_s * 100.0));
        for (auto& x : ch.samples) x = rng.normal();
        r.channels.push_back(std::move(ch));
    }
    auto epochs = static_cast<size_t>(duration_s / 30.0);
    for (size_t k = 0; k < epochs; ++k)
        r.annotations.push_back({static_cast<double>(k) * 30.0, 30.0, EventLabel::N2});
    for (auto& a : extra) r.annotations.push_back(a);
    return r;
}

DatasetConfig small_cfg(Assembly a) {
    DatasetConfig cfg;
    cfg.assembly = a;
    cfg.channel_names = {"A", "B"};
    cfg.context_s = 60.0;
    cfg.seed = 9;
    return cfg;
}

}  // namespace

TEST_CASE("90 s record tiles into 3 examples") {
    Record r = flat_record(90.0, {});
    BuildStats stats;
    auto ex = build_examples(r, small_cfg(Assembly::S), &stats);
    REQUIRE(ex.size() == 3);
    CHECK(ex[0].span.start_s == 0.0);
    CHECK(ex[1].span.start_s == 30.0);
    CHECK(ex[2].span.start_s == 60.0);
    CHECK(ex[2].span.end_s == 90.0);
    CHECK(stats.skipped_epochs == 0);
    for (const auto& e : ex) CHECK(e.input.size() == 2u * 15000u);
}

TEST_CASE("centroid ownership crosses the window boundary") {
    // arousal onset 29 s, duration 4 s -> midpoint 31 s -> window [30, 60)
    Record r = flat_record(90.0, {{29.0, 4.0, EventLabel::Arousal}});
    auto ex = build_examples(r, small_cfg(Assembly::SA), nullptr);
    REQUIRE(ex.size() == 3);
    auto l = layout_for(Assembly::SA);
    CHECK(ex[0].target[static_cast<size_t>(l.arousal_flag)] == 0.0);
    CHECK(ex[1].target[static_cast<size_t>(l.arousal_flag)] == 1.0);
    CHECK(ex[1].target[static_cast<size_t>(l.arousal_x)] ==
          doctest::Approx((31.0 - 30.0) / 30.0));
    CHECK(ex[2].target[static_cast<size_t>(l.arousal_flag)] == 0.0);
}

TEST_CASE("same-family tie keeps the longer event and counts the drop") {
    // both apneas centered in window [30, 60): durations 20 and 35
    Record r = flat_record(120.0, {{30.0, 20.0, EventLabel::Apnea},
                                   {27.0, 35.0, EventLabel::Apnea}});
    BuildStats stats;
    auto ex = build_examples(r, small_cfg(Assembly::SR), &stats);
    REQUIRE(ex.size() == 4);
    auto l = layout_for(Assembly::SR);
    CHECK(ex[1].target[static_cast<size_t>(l.resp_flag)] == 1.0);
    CHECK(ex[1].target[static_cast<size_t>(l.resp_w)] == doctest::Approx(35.0 / 30.0));
    CHECK(stats.dropped_respiratory == 1);
    CHECK(stats.dropped_arousal == 0);
}

TEST_CASE("missing stage annotation skips the epoch with a count") {
    Record r = flat_record(90.0, {});
    // remove the stage annotation for epoch 1
    r.annotations.erase(r.annotations.begin() + 1);
    BuildStats stats;
    auto ex = build_examples(r, small_cfg(Assembly::S), &stats);
    CHECK(ex.size() == 2);
    CHECK(stats.skipped_epochs == 1);
}

TEST_CASE("missing channel is a hard error") {
    Record r = flat_record(90.0, {});
    auto cfg = small_cfg(Assembly::S);
    cfg.channel_names = {"A", "Z"};
    CHECK_THROWS_WITH_AS(build_examples(r, cfg, nullptr), doctest::Contains("missing channel"),
                         ValidationError);
}

TEST_CASE("input rows are normalized over the in-record region") {
    Record r = flat_record(90.0, {});
    auto cfg = small_cfg(Assembly::S);
    auto ex = build_examples(r, cfg, nullptr);
    const int len = cfg.input_len();

    // window 0 has 60 s of left padding (6000 samples), window 1 has 30 s
    struct Case {
        size_t ex_ix;
        int pad_lo, pad_hi;  // in-record sample range within the row
    };
    for (const Case& c : {Case{0, 6000, 15000}, Case{1, 3000, 12000}, Case{2, 0, 9000}}) {
        for (int row = 0; row < 2; ++row) {
            const float* x = ex[c.ex_ix].input.data() + static_cast<size_t>(row) * len;
            for (int i = 0; i < c.pad_lo; ++i) CHECK(x[i] == 0.0f);
            for (int i = c.pad_hi; i < len; ++i) CHECK(x[i] == 0.0f);
            double mean = 0;
            for (int i = c.pad_lo; i < c.pad_hi; ++i) mean += x[i];
            mean /= (c.pad_hi - c.pad_lo);
            double var = 0;
            for (int i = c.pad_lo; i < c.pad_hi; ++i) var += (x[i] - mean) * (x[i] - mean);
            var /= (c.pad_hi - c.pad_lo);
            CHECK(std::abs(mean) < 1e-6);
            CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("every owned event lands in exactly one window") {
    SynthConfig scfg;
    scfg.seed = 31;
    scfg.duration_s = 1800;
    scfg.channels = 6;
    scfg.arousals_per_hour = 12;
    scfg.resp_events_per_hour = 16;
    Record r = generate_record(scfg);

    DatasetConfig cfg;
    cfg.assembly = Assembly::SAR;
    cfg.channel_names = synth_montage(6);
    BuildStats stats;
    auto ex = build_examples(r, cfg, &stats);

    size_t planted_arousal = 0, planted_resp = 0, encoded_arousal = 0, encoded_resp = 0;
    for (const auto& a : r.annotations) {
        if (a.label == EventLabel::Arousal) ++planted_arousal;
        if (a.label == EventLabel::Apnea || a.label == EventLabel::Hypopnea) ++planted_resp;
    }
    auto l = layout_for(Assembly::SAR);
    for (const auto& e : ex) {
        encoded_arousal += e.target[static_cast<size_t>(l.arousal_flag)] == 1.0 ? 1 : 0;
        encoded_resp += e.target[static_cast<size_t>(l.resp_flag)] == 1.0 ? 1 : 0;
    }
    // the generator spaces same-family events at least 45 s apart, so no ties
    CHECK(stats.dropped_arousal == 0);
    CHECK(stats.dropped_respiratory == 0);
    CHECK(stats.out_of_range == 0);
    CHECK(encoded_arousal == planted_arousal);
    CHECK(encoded_resp == planted_resp);
}

TEST_CASE("split sizes follow the 80-20 / 80-20 scheme") {
    auto s = split_examples(100, 42);
    CHECK(s.test.size() == 20);
    CHECK(s.validation.size() == 16);
    CHECK(s.train.size() == 64);

    auto again = split_examples(100, 42);
    CHECK(again.train == s.train);
    CHECK(again.validation == s.validation);
    CHECK(again.test == s.test);

    auto other = split_examples(100, 43);
    CHECK(other.train != s.train);

    std::set<size_t> all;
    for (auto* part : {&s.train, &s.validation, &s.test}) all.insert(part->begin(), part->end());
    CHECK(all.size() == 100);

    auto tiny = split_examples(5, 1);
    CHECK(tiny.test.size() == 1);
    CHECK(tiny.validation.size() == 1);
    CHECK(tiny.train.size() == 3);

    CHECK_THROWS_AS(split_examples(4, 1), ValidationError);
}

TEST_CASE("dataset save/load round trip is bit-exact") {
    Record r = flat_record(150.0, {{40.0, 6.0, EventLabel::Arousal}});
    auto cfg = small_cfg(Assembly::SA);
    Dataset ds;
    ds.cfg = cfg;
    ds.examples = build_examples(r, cfg, &ds.stats);
    ds.split = split_examples(ds.examples.size(), cfg.seed);

    auto dir = fs::temp_directory_path() / "sleepdet_ds_roundtrip";
    fs::remove_all(dir);
    save_dataset(ds, dir);
    Dataset back = load_dataset(dir);

    REQUIRE(back.examples.size() == ds.examples.size());
    for (size_t i = 0; i < ds.examples.size(); ++i) {
        CHECK(back.examples[i].input == ds.examples[i].input);
        CHECK(back.examples[i].target == ds.examples[i].target);
        CHECK(back.examples[i].record_id == ds.examples[i].record_id);
        CHECK(back.examples[i].span.start_s == ds.examples[i].span.start_s);
    }
    CHECK(back.split.train == ds.split.train);
    CHECK(dataset_hash(back.examples) == dataset_hash(ds.examples));

    // rebuilding from the same inputs gives byte-identical files
    auto dir2 = fs::temp_directory_path() / "sleepdet_ds_roundtrip2";
    fs::remove_all(dir2);
    Dataset ds2;
    ds2.cfg = cfg;
    ds2.examples = build_examples(r, cfg, &ds2.stats);
    ds2.split = split_examples(ds2.examples.size(), cfg.seed);
    save_dataset(ds2, dir2);
    for (const char* f : {"manifest.json", "targets.jsonl", "split.json"})
        CHECK(read_text_file(dir / f) == read_text_file(dir2 / f));
    CHECK(read_f32_file(dir / "inputs.f32") == read_f32_file(dir2 / "inputs.f32"));
}

TEST_CASE("dataset load rejects inconsistent directories") {
    Record r = flat_record(150.0, {});
    auto cfg = small_cfg(Assembly::SAR);
    Dataset ds;
    ds.cfg = cfg;
    ds.examples = build_examples(r, cfg, &ds.stats);
    ds.split = split_examples(ds.examples.size(), cfg.seed);
    auto dir = fs::temp_directory_path() / "sleepdet_ds_bad";
    fs::remove_all(dir);
    save_dataset(ds, dir);

    SUBCASE("truncated tensor blob") {
        auto blob = read_f32_file(dir / "inputs.f32");
        blob.pop_back();
        write_f32_file(dir / "inputs.f32", blob);
        CHECK_THROWS_WITH_AS(load_dataset(dir), doctest::Contains("inputs.f32"), ValidationError);
    }
    SUBCASE("manifest assembly disagrees with target length") {
        auto manifest = read_text_file(dir / "manifest.json");
        auto pos = manifest.find("\"SAR\"");
        REQUIRE(pos != std::string::npos);
        manifest.replace(pos, 5, "\"SR\"");
        write_text_file(dir / "manifest.json", manifest);
        CHECK_THROWS_AS(load_dataset(dir), ValidationError);
    }
}
