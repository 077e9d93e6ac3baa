#include "sleepdet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "sleepdet/common.hpp"
#include "sleepdet/rng.hpp"

namespace sleepdet {

using nlohmann::json;

int DatasetConfig::input_len() const {
    return static_cast<int>(std::llround((2.0 * context_s + window_s) * rate_hz));
}

void BuildStats::add(const BuildStats& o) {
    skipped_epochs += o.skipped_epochs;
    dropped_arousal += o.dropped_arousal;
    dropped_respiratory += o.dropped_respiratory;
    out_of_range += o.out_of_range;
}

namespace {

// Resample the requested channels once, then slice per-window rows out of them.
std::vector<std::vector<double>> prepare_rows(const Record& r, const DatasetConfig& cfg) {
    std::vector<std::vector<double>> rows;
    rows.reserve(cfg.channel_names.size());
    for (const auto& name : cfg.channel_names) {
        const Channel* ch = r.find_channel(name);
        if (!ch) throw ValidationError("record " + r.id + " is missing channel " + name);
        rows.push_back(resample_channel(*ch, cfg.rate_hz).samples);
    }
    return rows;
}

// Extended window with zero padding outside the record; normalization uses
// only the in-record samples so padding cannot bias the statistics.
void fill_window(const std::vector<double>& src, long long start_idx, int len, float* out) {
    long long n = static_cast<long long>(src.size());
    long long lo = std::max(0LL, start_idx);
    long long hi = std::min(n, start_idx + len);

    double mean = 0;
    long long count = hi > lo ? hi - lo : 0;
    for (long long i = lo; i < hi; ++i) mean += src[static_cast<size_t>(i)];
    if (count > 0) mean /= static_cast<double>(count);
    double var = 0;
    for (long long i = lo; i < hi; ++i) {
        double d = src[static_cast<size_t>(i)] - mean;
        var += d * d;
    }
    if (count > 0) var /= static_cast<double>(count);
    double inv = var > 0 ? 1.0 / std::sqrt(var) : 0.0;

    for (int k = 0; k < len; ++k) {
        long long i = start_idx + k;
        out[k] = (i >= lo && i < hi)
                     ? static_cast<float>((src[static_cast<size_t>(i)] - mean) * inv)
                     : 0.0f;
    }
}

struct EpochOwnership {
    std::vector<int> stage;                       // -1 = missing
    std::vector<std::vector<Annotation>> owned;   // per epoch, post tie-break
};

EpochOwnership assign_epochs(const Record& r, const DatasetConfig& cfg, size_t n_epochs,
                             BuildStats& stats) {
    EpochOwnership eo;
    eo.stage.assign(n_epochs, -1);
    eo.owned.resize(n_epochs);

    const double n = cfg.window_s;
    std::vector<std::vector<Annotation>> arousals(n_epochs), resps(n_epochs);
    for (const auto& a : r.annotations) {
        if (is_stage(a.label)) {
            auto k = static_cast<long long>(std::llround(a.onset_s / n));
            if (k < 0 || static_cast<size_t>(k) >= n_epochs) continue;
            if (std::abs(a.onset_s - static_cast<double>(k) * n) > 1e-6 ||
                std::abs(a.duration_s - n) > 1e-6)
                continue;  // off-grid stage annotations leave the epoch unstaged
            if (eo.stage[static_cast<size_t>(k)] != -1)
                throw ValidationError("record " + r.id + ": two stage labels for epoch " +
                                      std::to_string(k));
            eo.stage[static_cast<size_t>(k)] = static_cast<int>(a.label);
        } else {
            auto k = static_cast<long long>(event_centroid(a) / n);
            if (k < 0 || static_cast<size_t>(k) >= n_epochs) {
                ++stats.out_of_range;
                continue;
            }
            (a.label == EventLabel::Arousal ? arousals : resps)[static_cast<size_t>(k)].push_back(a);
        }
    }

    // one event per family per window; the longer duration wins, earlier onset
    // breaks exact ties
    auto pick = [](std::vector<Annotation>& v) {
        return *std::min_element(v.begin(), v.end(), [](const Annotation& a, const Annotation& b) {
            if (a.duration_s != b.duration_s) return a.duration_s > b.duration_s;
            return a.onset_s < b.onset_s;
        });
    };
    for (size_t k = 0; k < n_epochs; ++k) {
        if (!arousals[k].empty()) {
            stats.dropped_arousal += arousals[k].size() - 1;
            if (assembly_has_arousal(cfg.assembly)) eo.owned[k].push_back(pick(arousals[k]));
        }
        if (!resps[k].empty()) {
            stats.dropped_respiratory += resps[k].size() - 1;
            if (assembly_has_respiratory(cfg.assembly)) eo.owned[k].push_back(pick(resps[k]));
        }
    }
    return eo;
}

}  // namespace

std::vector<Example> build_examples(const Record& r, const DatasetConfig& cfg, BuildStats* stats) {
    if (cfg.channel_names.empty()) throw ValidationError("dataset config lists no channels");
    if (r.duration_s < cfg.window_s)
        throw ValidationError("record " + r.id + " shorter than one window");

    BuildStats local;
    auto n_epochs = static_cast<size_t>(r.duration_s / cfg.window_s);
    auto rows = prepare_rows(r, cfg);
    EpochOwnership eo = assign_epochs(r, cfg, n_epochs, local);

    const int len = cfg.input_len();
    const int d = cfg.channels();
    const auto rate = cfg.rate_hz;

    std::vector<Example> out;
    out.reserve(n_epochs);
    for (size_t k = 0; k < n_epochs; ++k) {
        if (eo.stage[k] == -1) {
            ++local.skipped_epochs;
            continue;
        }
        Example ex;
        ex.record_id = r.id;
        ex.span = {static_cast<double>(k) * cfg.window_s,
                   static_cast<double>(k + 1) * cfg.window_s};
        ex.input.resize(static_cast<size_t>(d) * static_cast<size_t>(len));
        auto start_idx = static_cast<long long>(std::llround((ex.span.start_s - cfg.context_s) * rate));
        for (int c = 0; c < d; ++c)
            fill_window(rows[static_cast<size_t>(c)], start_idx, len,
                        ex.input.data() + static_cast<size_t>(c) * static_cast<size_t>(len));
        ex.target = encode(ex.span, static_cast<EventLabel>(eo.stage[k]), eo.owned[k], cfg.assembly);
        out.push_back(std::move(ex));
    }
    if (stats) stats->add(local);
    return out;
}

std::vector<InputWindow> build_inputs(const Record& r, const DatasetConfig& cfg) {
    if (cfg.channel_names.empty()) throw ValidationError("dataset config lists no channels");
    if (r.duration_s < cfg.window_s)
        throw ValidationError("record " + r.id + " shorter than one window");

    auto n_epochs = static_cast<size_t>(r.duration_s / cfg.window_s);
    auto rows = prepare_rows(r, cfg);
    const int len = cfg.input_len();
    const int d = cfg.channels();

    std::vector<InputWindow> out(n_epochs);
    for (size_t k = 0; k < n_epochs; ++k) {
        out[k].span = {static_cast<double>(k) * cfg.window_s,
                       static_cast<double>(k + 1) * cfg.window_s};
        out[k].input.resize(static_cast<size_t>(d) * static_cast<size_t>(len));
        auto start_idx =
            static_cast<long long>(std::llround((out[k].span.start_s - cfg.context_s) * cfg.rate_hz));
        for (int c = 0; c < d; ++c)
            fill_window(rows[static_cast<size_t>(c)], start_idx, len,
                        out[k].input.data() + static_cast<size_t>(c) * static_cast<size_t>(len));
    }
    return out;
}

SplitSpec split_examples(size_t count, uint64_t seed) {
    if (count < 5) throw ValidationError("need at least 5 examples to split");
    std::vector<size_t> idx(count);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed(seed, 0x5711ULL));
    rng.shuffle(idx);

    auto n_test = static_cast<size_t>(std::llround(0.2 * static_cast<double>(count)));
    size_t rest = count - n_test;
    auto n_val = static_cast<size_t>(std::llround(0.2 * static_cast<double>(rest)));

    SplitSpec s;
    s.test.assign(idx.begin(), idx.begin() + static_cast<long>(n_test));
    s.validation.assign(idx.begin() + static_cast<long>(n_test),
                        idx.begin() + static_cast<long>(n_test + n_val));
    s.train.assign(idx.begin() + static_cast<long>(n_test + n_val), idx.end());
    std::sort(s.test.begin(), s.test.end());
    std::sort(s.validation.begin(), s.validation.end());
    std::sort(s.train.begin(), s.train.end());
    return s;
}

namespace {

json config_to_json(const DatasetConfig& cfg) {
    return {{"window_s", cfg.window_s},
            {"context_s", cfg.context_s},
            {"rate_hz", cfg.rate_hz},
            {"assembly", assembly_name(cfg.assembly)},
            {"channel_names", cfg.channel_names},
            {"seed", cfg.seed}};
}

DatasetConfig config_from_json(const json& j) {
    DatasetConfig cfg;
    cfg.window_s = j.at("window_s").get<double>();
    cfg.context_s = j.at("context_s").get<double>();
    cfg.rate_hz = j.at("rate_hz").get<double>();
    auto a = parse_assembly(j.at("assembly").get<std::string>());
    if (!a) throw ValidationError("manifest: unknown assembly");
    cfg.assembly = *a;
    cfg.channel_names = j.at("channel_names").get<std::vector<std::string>>();
    cfg.seed = j.at("seed").get<uint64_t>();
    return cfg;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const int len = ds.cfg.input_len();
    const int d = ds.cfg.channels();

    json manifest;
    manifest["version"] = 1;
    manifest["config"] = config_to_json(ds.cfg);
    manifest["channels"] = d;
    manifest["input_len"] = len;
    manifest["counts"] = {{"examples", ds.examples.size()},
                          {"skipped_epochs", ds.stats.skipped_epochs},
                          {"dropped_arousal", ds.stats.dropped_arousal},
                          {"dropped_respiratory", ds.stats.dropped_respiratory},
                          {"out_of_range", ds.stats.out_of_range}};
    write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");

    std::vector<float> blob;
    blob.reserve(ds.examples.size() * static_cast<size_t>(d) * static_cast<size_t>(len));
    std::string targets;
    for (const auto& ex : ds.examples) {
        if (ex.input.size() != static_cast<size_t>(d) * static_cast<size_t>(len))
            throw ValidationError("example tensor size does not match config");
        blob.insert(blob.end(), ex.input.begin(), ex.input.end());
        json t = {{"record_id", ex.record_id},
                  {"start_s", ex.span.start_s},
                  {"end_s", ex.span.end_s},
                  {"target", ex.target}};
        targets += t.dump();
        targets += "\n";
    }
    write_f32_file(dir / "inputs.f32", blob);
    write_text_file(dir / "targets.jsonl", targets);

    json split = {{"train", ds.split.train},
                  {"validation", ds.split.validation},
                  {"test", ds.split.test}};
    write_text_file(dir / "split.json", split.dump() + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir) {
    Dataset ds;
    json manifest = json::parse(read_text_file(dir / "manifest.json"));
    ds.cfg = config_from_json(manifest.at("config"));
    const auto len = static_cast<size_t>(ds.cfg.input_len());
    const auto d = static_cast<size_t>(ds.cfg.channels());
    if (manifest.at("channels").get<size_t>() != d || manifest.at("input_len").get<size_t>() != len)
        throw ValidationError("manifest channel/length fields disagree with config");
    const auto& counts = manifest.at("counts");
    ds.stats.skipped_epochs = counts.at("skipped_epochs").get<size_t>();
    ds.stats.dropped_arousal = counts.at("dropped_arousal").get<size_t>();
    ds.stats.dropped_respiratory = counts.at("dropped_respiratory").get<size_t>();
    ds.stats.out_of_range = counts.at("out_of_range").get<size_t>();
    auto n = counts.at("examples").get<size_t>();

    std::vector<float> blob = read_f32_file(dir / "inputs.f32");
    if (blob.size() != n * d * len)
        throw ValidationError("inputs.f32 size does not match manifest");

    const auto expect_len = static_cast<size_t>(vector_length(ds.cfg.assembly));
    std::istringstream lines(read_text_file(dir / "targets.jsonl"));
    std::string line;
    size_t i = 0;
    while (std::getline(lines, line)) {
        if (line.empty()) continue;
        if (i >= n) throw ValidationError("targets.jsonl has more rows than the manifest declares");
        json t = json::parse(line);
        Example ex;
        ex.record_id = t.at("record_id").get<std::string>();
        ex.span = {t.at("start_s").get<double>(), t.at("end_s").get<double>()};
        ex.target = t.at("target").get<std::vector<double>>();
        if (ex.target.size() != expect_len)
            throw ValidationError("target length does not match assembly " +
                                  std::string(assembly_name(ds.cfg.assembly)));
        ex.input.assign(blob.begin() + static_cast<long>(i * d * len),
                        blob.begin() + static_cast<long>((i + 1) * d * len));
        ds.examples.push_back(std::move(ex));
        ++i;
    }
    if (i != n) throw ValidationError("targets.jsonl has fewer rows than the manifest declares");

    json split = json::parse(read_text_file(dir / "split.json"));
    ds.split.train = split.at("train").get<std::vector<size_t>>();
    ds.split.validation = split.at("validation").get<std::vector<size_t>>();
    ds.split.test = split.at("test").get<std::vector<size_t>>();
    for (const auto* part : {&ds.split.train, &ds.split.validation, &ds.split.test})
        for (size_t ix : *part)
            if (ix >= n) throw ValidationError("split.json index out of range");
    return ds;
}

uint64_t dataset_hash(const std::vector<Example>& examples) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& ex : examples) {
        h = fnv1a64(ex.record_id.data(), ex.record_id.size(), h);
        h = fnv1a64(&ex.span.start_s, sizeof(double), h);
        h = fnv1a64(ex.input.data(), ex.input.size() * sizeof(float), h);
        h = fnv1a64(ex.target.data(), ex.target.size() * sizeof(double), h);
    }
    return h;
}

}  // namespace sleepdet
