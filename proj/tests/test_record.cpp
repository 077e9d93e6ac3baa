#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "sleepdet/common.hpp"
#include "sleepdet/record.hpp"
#include "sleepdet/rng.hpp"

using namespace sleepdet;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    auto dir = fs::temp_directory_path() / ("sleepdet_rec_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

Record two_channel_record() {
    Record r;
    r.id = "rec0";
    r.duration_s = 60.0;
    Rng rng(7);
    for (const char* name : {"EEG1", "EEG2"}) {
        Channel ch;
        ch.name = name;
        ch.sample_rate_hz = 100.0;
        ch.samples.resize(6000);
        for (auto& x : ch.samples) x = rng.normal();
        r.channels.push_back(std::move(ch));
    }
    r.annotations.push_back({0, 30, EventLabel::W});
    r.annotations.push_back({30, 30, EventLabel::N2});
    r.annotations.push_back({35.5, 8.0, EventLabel::Arousal});
    return r;
}

}  // namespace

TEST_CASE("label vocabulary round trips and is closed") {
    for (int i = 0; i < 8; ++i) {
        auto l = static_cast<EventLabel>(i);
        auto parsed = parse_label(label_name(l));
        REQUIRE(parsed.has_value());
        CHECK(*parsed == l);
    }
    CHECK(!parse_label("spindle").has_value());
    CHECK(is_stage(EventLabel::REM));
    CHECK(!is_stage(EventLabel::Apnea));
}

TEST_CASE("save/load round trip preserves structure and samples") {
    auto dir = temp_dir("roundtrip");
    Record r = two_channel_record();
    save_record(r, dir);
    Record back = load_record(dir);

    CHECK(back.id == r.id);
    CHECK(back.duration_s == r.duration_s);
    REQUIRE(back.channels.size() == 2);
    CHECK(back.channels[0].name == "EEG1");
    CHECK(back.channels[1].name == "EEG2");
    REQUIRE(back.channels[0].samples.size() == 6000);
    // payloads are float32, so values match within one float32 ULP
    for (size_t i = 0; i < r.channels[0].samples.size(); ++i) {
        float expect = static_cast<float>(r.channels[0].samples[i]);
        CHECK(static_cast<float>(back.channels[0].samples[i]) == expect);
    }
    REQUIRE(back.annotations.size() == 3);
    CHECK(back.annotations[2].label == EventLabel::Arousal);
    CHECK(back.annotations[2].onset_s == doctest::Approx(35.5));

    // a second save produces byte-identical files
    auto dir2 = temp_dir("roundtrip2");
    save_record(back, dir2);
    CHECK(read_text_file(dir / "record.json") == read_text_file(dir2 / "record.json"));
    CHECK(read_text_file(dir / "annotations.jsonl") == read_text_file(dir2 / "annotations.jsonl"));
}

TEST_CASE("load rejects malformed inputs") {
    Record r = two_channel_record();

    SUBCASE("non-positive annotation duration") {
        auto dir = temp_dir("baddur");
        r.annotations[2].duration_s = 0.0;
        save_record(r, dir);
        CHECK_THROWS_WITH_AS(load_record(dir), doctest::Contains("non-positive duration"),
                             ValidationError);
    }
    SUBCASE("missing channel payload") {
        auto dir = temp_dir("missing");
        save_record(r, dir);
        fs::remove(dir / "EEG2.f32");
        CHECK_THROWS_WITH_AS(load_record(dir), doctest::Contains("missing channel payload"),
                             ValidationError);
    }
    SUBCASE("payload length mismatch") {
        auto dir = temp_dir("short");
        save_record(r, dir);
        std::vector<float> shorter(5999, 0.0f);
        write_f32_file(dir / "EEG1.f32", shorter);
        CHECK_THROWS_WITH_AS(load_record(dir), doctest::Contains("length mismatch"),
                             ValidationError);
    }
    SUBCASE("NaN sample") {
        auto dir = temp_dir("nan");
        r.channels[0].samples[17] = std::nan("");
        save_record(r, dir);
        CHECK_THROWS_WITH_AS(load_record(dir), doctest::Contains("non-finite sample"),
                             ValidationError);
    }
    SUBCASE("unknown label") {
        auto dir = temp_dir("label");
        save_record(r, dir);
        std::ofstream ann(dir / "annotations.jsonl", std::ios::app);
        ann << R"({"onset_s":1,"duration_s":2,"label":"spindle"})" << "\n";
        ann.close();
        CHECK_THROWS_WITH_AS(load_record(dir), doctest::Contains("unknown label"),
                             ValidationError);
    }
    SUBCASE("malformed annotation line") {
        auto dir = temp_dir("malformed");
        save_record(r, dir);
        std::ofstream ann(dir / "annotations.jsonl", std::ios::app);
        ann << "{not json}\n";
        ann.close();
        CHECK_THROWS_WITH_AS(load_record(dir), doctest::Contains("malformed annotation"),
                             ValidationError);
    }
    SUBCASE("annotation past record end") {
        auto dir = temp_dir("pastend");
        r.annotations[2] = {55.0, 10.0, EventLabel::Arousal};
        save_record(r, dir);
        CHECK_THROWS_WITH_AS(load_record(dir), doctest::Contains("past record end"),
                             ValidationError);
    }
    SUBCASE("duplicate channel") {
        auto dir = temp_dir("dup");
        r.channels[1].name = "EEG1";
        save_record(r, dir);
        CHECK_THROWS_WITH_AS(load_record(dir), doctest::Contains("duplicate channel"),
                             ValidationError);
    }
}

TEST_CASE("resample: identity at equal rates") {
    Channel ch{"x", 100.0, {}};
    Rng rng(3);
    ch.samples.resize(500);
    for (auto& x : ch.samples) x = rng.uniform(-1, 1);
    Channel out = resample_channel(ch, 100.0);
    REQUIRE(out.samples.size() == ch.samples.size());
    for (size_t i = 0; i < out.samples.size(); ++i) CHECK(out.samples[i] == ch.samples[i]);
}

TEST_CASE("resample: downsample 200 -> 100 picks exact source instants") {
    Channel ch{"x", 200.0, {}};
    for (int i = 0; i < 40; ++i) ch.samples.push_back(i);
    Channel out = resample_channel(ch, 100.0);
    REQUIRE(out.samples.size() == 20);
    for (size_t k = 0; k < out.samples.size(); ++k)
        CHECK(out.samples[k] == doctest::Approx(2.0 * static_cast<double>(k)).epsilon(1e-12));
}

TEST_CASE("resample: upsample 50 -> 100 interpolates and holds the boundary") {
    Channel ch{"x", 50.0, {0.0, 1.0}};
    Channel out = resample_channel(ch, 100.0);
    REQUIRE(out.samples.size() == 4);
    CHECK(out.samples[0] == doctest::Approx(0.0));
    CHECK(out.samples[1] == doctest::Approx(0.5));
    CHECK(out.samples[2] == doctest::Approx(1.0));
    CHECK(out.samples[3] == doctest::Approx(1.0));
}

TEST_CASE("resample rejects empty channel") {
    Channel ch{"x", 100.0, {}};
    CHECK_THROWS_AS(resample_channel(ch, 50.0), ValidationError);
}

TEST_CASE("normalize: [1,2,3] and constants") {
    Channel ch{"x", 10.0, {1.0, 2.0, 3.0}};
    Channel out = normalize_channel(ch);
    double expect = std::sqrt(3.0 / 2.0);  // population std of [1,2,3] is sqrt(2/3)
    CHECK(out.samples[0] == doctest::Approx(-expect).epsilon(1e-12));
    CHECK(out.samples[1] == doctest::Approx(0.0));
    CHECK(out.samples[2] == doctest::Approx(expect).epsilon(1e-12));

    Channel flat{"y", 10.0, {5.0, 5.0, 5.0}};
    Channel zeros = normalize_channel(flat);
    for (double x : zeros.samples) CHECK(x == 0.0);
}

TEST_CASE("normalize: statistics and idempotence") {
    Rng rng(11);
    Channel ch{"x", 100.0, {}};
    ch.samples.resize(4096);
    for (auto& x : ch.samples) x = 3.5 + 2.0 * rng.normal();
    Channel out = normalize_channel(ch);

    double mean = 0;
    for (double x : out.samples) mean += x;
    mean /= static_cast<double>(out.samples.size());
    double var = 0;
    for (double x : out.samples) var += (x - mean) * (x - mean);
    var /= static_cast<double>(out.samples.size());
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-9);

    Channel again = normalize_channel(out);
    for (size_t i = 0; i < out.samples.size(); ++i)
        CHECK(std::abs(again.samples[i] - out.samples[i]) < 1e-12);
}
