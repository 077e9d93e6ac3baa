// Batch CLI: synth -> build-dataset -> train -> infer -> score, plus the
// ten-experiment grid. All commands are deterministic given their seeds.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sleepdet/codec.hpp"
#include "sleepdet/common.hpp"
#include "sleepdet/dataset.hpp"
#include "sleepdet/metrics.hpp"
#include "sleepdet/model.hpp"
#include "sleepdet/record.hpp"
#include "sleepdet/synth.hpp"
#include "sleepdet/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sleepdet;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitNumeric = 3;

json load_config_file(const std::string& path) {
    if (path.empty()) return json::object();
    json j = json::parse(read_text_file(path), nullptr, false);
    if (j.is_discarded()) throw ValidationError("config file is not valid JSON: " + path);
    if (!j.contains("version") || j.at("version").get<int>() != 1)
        throw ValidationError("config file must declare \"version\": 1");
    return j;
}

template <typename T>
void config_default(const json& cfg, const char* key, T& value) {
    if (cfg.contains(key)) value = cfg.at(key).get<T>();
}

struct SynthCmd {
    std::string out;
    std::string config_path;
    uint64_t seed = 1;
    double duration_s = 3600;
    int channels = 8;
    int records = 1;
    double arousals_per_hour = 10;
    double resp_per_hour = 20;
    double apnea_fraction = 0.5;
};

void write_synth_truth(const SynthConfig& cfg, const Record& rec, const fs::path& dir) {
    size_t arousals = 0, apneas = 0, hypopneas = 0;
    for (const auto& a : rec.annotations) {
        if (a.label == EventLabel::Arousal) ++arousals;
        if (a.label == EventLabel::Apnea) ++apneas;
        if (a.label == EventLabel::Hypopnea) ++hypopneas;
    }
    json truth = {{"seed", cfg.seed},
                  {"duration_s", rec.duration_s},
                  {"channels", cfg.channels},
                  {"rates",
                   {{"arousals_per_hour", cfg.arousals_per_hour},
                    {"resp_events_per_hour", cfg.resp_events_per_hour},
                    {"apnea_fraction", cfg.apnea_fraction}}},
                  {"planted", {{"arousals", arousals}, {"apneas", apneas}, {"hypopneas", hypopneas}}},
                  {"transition", cfg.transition}};
    write_text_file(dir / "synth_truth.json", truth.dump(2) + "\n");
}

int run_synth(const SynthCmd& opt) {
    json cfgj = load_config_file(opt.config_path);
    SynthCmd o = opt;
    config_default(cfgj, "seed", o.seed);
    config_default(cfgj, "duration_s", o.duration_s);
    config_default(cfgj, "channels", o.channels);
    config_default(cfgj, "records", o.records);
    config_default(cfgj, "arousals_per_hour", o.arousals_per_hour);
    config_default(cfgj, "resp_events_per_hour", o.resp_per_hour);
    config_default(cfgj, "apnea_fraction", o.apnea_fraction);

    fs::create_directories(o.out);
    for (int i = 0; i < o.records; ++i) {
        SynthConfig scfg;
        scfg.seed = derive_seed(o.seed, 0xaec0ULL, static_cast<uint64_t>(i));
        scfg.duration_s = o.duration_s;
        scfg.channels = o.channels;
        scfg.arousals_per_hour = o.arousals_per_hour;
        scfg.resp_events_per_hour = o.resp_per_hour;
        scfg.apnea_fraction = o.apnea_fraction;
        char name[32];
        std::snprintf(name, sizeof(name), "rec%03d", i);
        scfg.id = name;
        Record rec = generate_record(scfg);
        fs::path dir = fs::path(o.out) / name;
        save_record(rec, dir);
        write_synth_truth(scfg, rec, dir);
        std::cout << "wrote " << dir.string() << " (" << rec.annotations.size()
                  << " annotations)\n";
    }
    return 0;
}

struct BuildCmd {
    std::vector<std::string> records;
    std::string out;
    std::string assembly = "SAR";
    std::vector<std::string> channels;
    double window_s = 30, context_s = 60, rate_hz = 100;
    uint64_t seed = 1;
};

int run_build(const BuildCmd& opt) {
    auto assembly = parse_assembly(opt.assembly);
    if (!assembly) throw ValidationError("unknown assembly: " + opt.assembly);
    DatasetConfig cfg;
    cfg.window_s = opt.window_s;
    cfg.context_s = opt.context_s;
    cfg.rate_hz = opt.rate_hz;
    cfg.assembly = *assembly;
    cfg.channel_names = opt.channels;
    cfg.seed = opt.seed;

    std::vector<Record> records;
    for (const auto& dir : opt.records) records.push_back(load_record(dir));
    if (records.empty()) throw ValidationError("no records to build from");
    if (cfg.channel_names.empty())
        for (const auto& ch : records.front().channels) cfg.channel_names.push_back(ch.name);

    Dataset ds;
    ds.cfg = cfg;
    for (const auto& rec : records) {
        auto ex = build_examples(rec, cfg, &ds.stats);
        std::move(ex.begin(), ex.end(), std::back_inserter(ds.examples));
    }
    ds.split = split_examples(ds.examples.size(), cfg.seed);
    save_dataset(ds, opt.out);
    std::cout << "wrote " << opt.out << ": " << ds.examples.size() << " examples ("
              << ds.split.train.size() << " train / " << ds.split.validation.size()
              << " validation / " << ds.split.test.size() << " test), skipped "
              << ds.stats.skipped_epochs << " epochs, dropped " << ds.stats.dropped_arousal
              << "+" << ds.stats.dropped_respiratory << " same-family ties\n";
    return 0;
}

struct TrainCmd {
    std::string dataset;
    std::string out;
    uint64_t model_seed = 1;
    uint64_t shuffle_seed = 1;
    int batch_size = 100;
    int max_epochs = 100;
    int patience = 5;
    double learning_rate = 1e-3;
    double momentum = 0.9;
    std::string loss_mode = "multi";
};

json loss_report_json(const LossReport& r, bool multi) {
    json j = {{"total", r.total}};
    if (multi) {
        j["categorical_ce"] = r.categorical_ce;
        j["binary_ce"] = r.binary_ce;
        j["mse"] = r.mse;
    } else {
        j["mse"] = r.mse;
    }
    return j;
}

void write_trainlog(const TrainLog& log, bool multi, const fs::path& path) {
    std::string lines;
    for (const auto& e : log.epochs) {
        json j = {{"epoch", e.epoch},
                  {"train", loss_report_json(e.train, multi)},
                  {"validation", loss_report_json(e.validation, multi)}};
        lines += j.dump();
        lines += "\n";
    }
    json tail = {{"epochs_run", log.epochs_run},
                 {"stopped_early", log.stopped_early},
                 {"best_epoch", log.best_epoch},
                 {"best_val_loss", log.best_val_loss}};
    lines += tail.dump();
    lines += "\n";
    write_text_file(path, lines);
}

int run_train(const TrainCmd& opt) {
    Dataset ds = load_dataset(opt.dataset);

    ModelConfig mcfg;
    mcfg.channels = ds.cfg.channels();
    mcfg.input_len = ds.cfg.input_len();
    mcfg.assembly = ds.cfg.assembly;
    mcfg.seed = opt.model_seed;

    TrainConfig tcfg;
    tcfg.batch_size = opt.batch_size;
    tcfg.max_epochs = opt.max_epochs;
    tcfg.patience = opt.patience;
    tcfg.learning_rate = opt.learning_rate;
    tcfg.momentum = opt.momentum;
    tcfg.shuffle_seed = opt.shuffle_seed;
    if (opt.loss_mode == "multi")
        tcfg.loss_mode = LossMode::Multi;
    else if (opt.loss_mode == "single")
        tcfg.loss_mode = LossMode::Single;
    else
        throw ValidationError("loss mode must be 'multi' or 'single'");

    TrainResult result = train(mcfg, ds, tcfg);

    fs::create_directories(opt.out);
    json meta = {{"channel_names", ds.cfg.channel_names},
                 {"dataset_hash", hex_u64(dataset_hash(ds.examples))},
                 {"dataset_seed", ds.cfg.seed},
                 {"shuffle_seed", tcfg.shuffle_seed},
                 {"window_s", ds.cfg.window_s},
                 {"context_s", ds.cfg.context_s},
                 {"rate_hz", ds.cfg.rate_hz},
                 {"best_epoch", result.log.best_epoch}};
    save_params(result.best_params, fs::path(opt.out) / "model.ckpt", meta.dump());
    write_trainlog(result.log, tcfg.loss_mode == LossMode::Multi,
                   fs::path(opt.out) / "trainlog.jsonl");
    std::cout << "trained " << result.log.epochs_run << " epochs (best "
              << result.log.best_epoch << ", val loss " << result.log.best_val_loss
              << (result.log.stopped_early ? ", early stop" : "") << ") -> " << opt.out << "\n";
    return 0;
}

struct InferCmd {
    std::string checkpoint;
    std::string record;
    std::string out;
    double lambda = 0.0;
};

int run_infer(const InferCmd& opt) {
    Checkpoint ck = load_params(opt.checkpoint);
    json meta = json::parse(ck.meta_json);
    Record rec = load_record(opt.record);

    DatasetConfig dcfg;
    dcfg.assembly = ck.params.cfg.assembly;
    dcfg.window_s = meta.value("window_s", 30.0);
    dcfg.context_s = meta.value("context_s", 60.0);
    dcfg.rate_hz = meta.value("rate_hz", 100.0);
    if (!meta.contains("channel_names"))
        throw ValidationError("checkpoint metadata lacks channel names");
    dcfg.channel_names = meta.at("channel_names").get<std::vector<std::string>>();
    if (static_cast<int>(dcfg.channel_names.size()) != ck.params.cfg.channels)
        throw ValidationError("checkpoint channel list does not match model input width");
    for (const auto& name : dcfg.channel_names)
        if (!rec.find_channel(name))
            throw ValidationError("record " + rec.id + " lacks channel " + name +
                                  " required by the checkpoint");

    auto windows = build_inputs(rec, dcfg);
    std::vector<DecodedWindow> decoded;
    std::string activations;
    ForwardTrace trace;
    for (const auto& w : windows) {
        auto out = forward(ck.params, w.input, false, 0, trace);
        decoded.push_back(decode(out, w.span, dcfg.assembly));
        json aj = {{"start_s", w.span.start_s}, {"end_s", w.span.end_s}, {"output", out}};
        activations += aj.dump();
        activations += "\n";
    }
    auto post = postprocess(decoded, opt.lambda, rec.duration_s);

    fs::create_directories(opt.out);
    std::string events;
    for (const auto& e : post.events) {
        json ej = {{"onset_s", e.annotation.onset_s},
                   {"duration_s", e.annotation.duration_s},
                   {"label", label_name(e.annotation.label)}};
        if (e.confidence) ej["confidence"] = *e.confidence;
        events += ej.dump();
        events += "\n";
    }
    write_text_file(fs::path(opt.out) / "events.jsonl", events);
    json hyp = json::array();
    for (auto s : post.hypnogram) hyp.push_back(label_name(s));
    write_text_file(fs::path(opt.out) / "hypnogram.json", hyp.dump() + "\n");
    write_text_file(fs::path(opt.out) / "activations.jsonl", activations);
    std::cout << "inferred " << windows.size() << " windows, " << post.events.size()
              << " events -> " << opt.out << "\n";
    return 0;
}

struct ScoreCmd {
    std::string pred;
    std::string ref;
    std::string out;
    uint64_t model_seed = 0;
    uint64_t shuffle_seed = 0;
};

// reference targets from a dataset directory or re-encoded from a record
std::vector<TargetVector> reference_targets(const std::string& ref, Assembly assembly,
                                            ReportMeta& meta, size_t* windows_hint) {
    if (fs::exists(fs::path(ref) / "manifest.json")) {
        Dataset ds = load_dataset(ref);
        if (ds.cfg.assembly != assembly)
            throw ValidationError("reference dataset assembly does not match predictions");
        meta.channels = ds.cfg.channels();
        meta.dataset_seed = ds.cfg.seed;
        meta.dataset_hash = hex_u64(dataset_hash(ds.examples));
        std::vector<TargetVector> out;
        for (auto& ex : ds.examples) out.push_back(ex.target);
        *windows_hint = out.size();
        return out;
    }
    if (fs::exists(fs::path(ref) / "record.json")) {
        Record rec = load_record(ref);
        DatasetConfig dcfg;
        dcfg.assembly = assembly;
        for (const auto& ch : rec.channels) dcfg.channel_names.push_back(ch.name);
        BuildStats stats;
        auto ex = build_examples(rec, dcfg, &stats);
        meta.channels = static_cast<int>(rec.channels.size());
        meta.dataset_hash = hex_u64(dataset_hash(ex));
        std::vector<TargetVector> out;
        for (auto& e : ex) out.push_back(e.target);
        *windows_hint = out.size();
        return out;
    }
    throw ValidationError("reference must be a dataset or record directory: " + ref);
}

// predictions from activations.jsonl, or re-encoded from events + hypnogram
std::vector<TargetVector> predicted_vectors(const std::string& pred, Assembly assembly,
                                            size_t windows) {
    fs::path act = fs::path(pred) / "activations.jsonl";
    if (fs::exists(act)) {
        std::vector<TargetVector> out;
        std::istringstream lines(read_text_file(act));
        std::string line;
        while (std::getline(lines, line)) {
            if (line.empty()) continue;
            json j = json::parse(line);
            out.push_back(j.at("output").get<TargetVector>());
        }
        return out;
    }
    fs::path hyp_path = fs::path(pred) / "hypnogram.json";
    fs::path ev_path = fs::path(pred) / "events.jsonl";
    if (!fs::exists(hyp_path))
        throw ValidationError("predictions need activations.jsonl or hypnogram.json: " + pred);
    json hyp = json::parse(read_text_file(hyp_path));
    if (hyp.size() != windows)
        throw ValidationError("hypnogram length does not match the reference window count");

    std::vector<Annotation> events;
    if (fs::exists(ev_path)) {
        std::istringstream lines(read_text_file(ev_path));
        std::string line;
        while (std::getline(lines, line)) {
            if (line.empty()) continue;
            json j = json::parse(line);
            auto label = parse_label(j.at("label").get<std::string>());
            if (!label) throw ValidationError("events.jsonl has an unknown label");
            events.push_back(
                {j.at("onset_s").get<double>(), j.at("duration_s").get<double>(), *label});
        }
    }
    // ownership by centroid, longer event wins, exactly as in dataset building
    std::vector<std::vector<Annotation>> owned(windows);
    for (const auto& ev : events) {
        auto k = static_cast<long long>(event_centroid(ev) / 30.0);
        if (k < 0 || static_cast<size_t>(k) >= windows) continue;
        owned[static_cast<size_t>(k)].push_back(ev);
    }
    std::vector<TargetVector> out;
    for (size_t k = 0; k < windows; ++k) {
        auto stage = parse_label(hyp[k].get<std::string>());
        if (!stage || !is_stage(*stage))
            throw ValidationError("hypnogram entries must be stage labels");
        std::optional<Annotation> best_arousal, best_resp;
        for (const auto& a : owned[k]) {
            auto& slot = a.label == EventLabel::Arousal ? best_arousal : best_resp;
            if (!slot || a.duration_s > slot->duration_s) slot = a;
        }
        std::vector<Annotation> keep;
        if (best_arousal && assembly_has_arousal(assembly)) keep.push_back(*best_arousal);
        if (best_resp && assembly_has_respiratory(assembly)) keep.push_back(*best_resp);
        WindowSpan span{static_cast<double>(k) * 30.0, static_cast<double>(k + 1) * 30.0};
        out.push_back(encode(span, *stage, keep, assembly));
    }
    return out;
}

int run_score(const ScoreCmd& opt, Assembly assembly) {
    ReportMeta meta;
    meta.assembly = assembly;
    meta.model_seed = opt.model_seed;
    meta.shuffle_seed = opt.shuffle_seed;
    size_t windows = 0;
    auto targets = reference_targets(opt.ref, assembly, meta, &windows);
    auto preds = predicted_vectors(opt.pred, assembly, windows);
    if (preds.size() != targets.size())
        throw ValidationError("prediction and reference window counts differ");
    MetricReport report = score_run(preds, targets, assembly);
    fs::create_directories(opt.out);
    write_text_file(fs::path(opt.out) / "report.json", report_to_json(report, meta));
    const auto* stage = report.family("stage");
    std::cout << "scored " << report.windows << " windows: stage kappa " << stage->kappa
              << ", global MAE " << report.global_mae << " -> " << opt.out << "\n";
    return 0;
}

struct GridCmd {
    std::string out;
    std::string config_path;
    uint64_t seed = 1;
    int records = 2;
    double duration_s = 3600;
    double arousals_per_hour = 12;
    double resp_per_hour = 20;
    int max_epochs = 100;
    int patience = 5;
    int batch_size = 100;
};

struct GridExperiment {
    const char* name;
    int channels;
    Assembly assembly;
};

constexpr GridExperiment kGrid[10] = {
    {"M1", 4, Assembly::S},    {"M2", 4, Assembly::SA},  {"M3", 4, Assembly::SR},
    {"M4", 4, Assembly::SAR},  {"M5", 6, Assembly::SA},  {"M6", 6, Assembly::SR},
    {"M7", 6, Assembly::SAR},  {"M8", 8, Assembly::SA},  {"M9", 8, Assembly::SR},
    {"M10", 8, Assembly::SAR},
};

std::string format_cell(std::optional<double> v) {
    if (!v) return "-";
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%.4f", *v);
    return buf;
}

int run_grid(const GridCmd& opt) {
    json cfgj = load_config_file(opt.config_path);
    GridCmd o = opt;
    config_default(cfgj, "seed", o.seed);
    config_default(cfgj, "records", o.records);
    config_default(cfgj, "duration_s", o.duration_s);
    config_default(cfgj, "arousals_per_hour", o.arousals_per_hour);
    config_default(cfgj, "resp_events_per_hour", o.resp_per_hour);
    config_default(cfgj, "max_epochs", o.max_epochs);
    config_default(cfgj, "patience", o.patience);
    config_default(cfgj, "batch_size", o.batch_size);

    // one shared 8-channel montage; experiments read channel prefixes of it
    std::vector<Record> records;
    for (int i = 0; i < o.records; ++i) {
        SynthConfig scfg;
        scfg.seed = derive_seed(o.seed, 0xaec0ULL, static_cast<uint64_t>(i));
        scfg.duration_s = o.duration_s;
        scfg.channels = 8;
        scfg.arousals_per_hour = o.arousals_per_hour;
        scfg.resp_events_per_hour = o.resp_per_hour;
        char name[32];
        std::snprintf(name, sizeof(name), "rec%03d", i);
        scfg.id = name;
        records.push_back(generate_record(scfg));
    }

    fs::create_directories(o.out);
    json summary = json::array();
    std::string table;
    table +=
        "model  D  E    | stage k      f1     mae_c  | arousal k    f1     mae_c  mae_bw "
        "| resp k      f1     mae_c  mae_bw | global_mae\n";

    for (int gi = 0; gi < 10; ++gi) {
        const GridExperiment& exp = kGrid[gi];
        DatasetConfig dcfg;
        dcfg.assembly = exp.assembly;
        dcfg.channel_names = synth_montage(exp.channels);
        dcfg.seed = derive_seed(o.seed, 0xda7aULL);
        Dataset ds;
        ds.cfg = dcfg;
        for (const auto& rec : records) {
            auto ex = build_examples(rec, dcfg, &ds.stats);
            std::move(ex.begin(), ex.end(), std::back_inserter(ds.examples));
        }
        ds.split = split_examples(ds.examples.size(), dcfg.seed);

        ModelConfig mcfg;
        mcfg.channels = exp.channels;
        mcfg.input_len = dcfg.input_len();
        mcfg.assembly = exp.assembly;
        mcfg.seed = derive_seed(o.seed, 0x0de1ULL, static_cast<uint64_t>(gi));

        TrainConfig tcfg;
        tcfg.batch_size = o.batch_size;
        tcfg.max_epochs = o.max_epochs;
        tcfg.patience = o.patience;
        tcfg.shuffle_seed = derive_seed(o.seed, 0x50f1ULL, static_cast<uint64_t>(gi));

        TrainResult result = train(mcfg, ds, tcfg);

        std::vector<TargetVector> preds, targets;
        ForwardTrace trace;
        for (size_t ix : ds.split.test) {
            preds.push_back(forward(result.best_params, ds.examples[ix].input, false, 0, trace));
            targets.push_back(ds.examples[ix].target);
        }
        MetricReport report = score_run(preds, targets, exp.assembly);

        ReportMeta meta;
        meta.channels = exp.channels;
        meta.assembly = exp.assembly;
        meta.model_seed = mcfg.seed;
        meta.dataset_seed = dcfg.seed;
        meta.shuffle_seed = tcfg.shuffle_seed;
        meta.dataset_hash = hex_u64(dataset_hash(ds.examples));

        fs::path exp_dir = fs::path(o.out) / exp.name;
        fs::create_directories(exp_dir);
        write_text_file(exp_dir / "report.json", report_to_json(report, meta));
        write_trainlog(result.log, true, exp_dir / "trainlog.jsonl");

        json row = {{"model", exp.name},
                    {"channels", exp.channels},
                    {"assembly", assembly_name(exp.assembly)},
                    {"epochs_run", result.log.epochs_run},
                    {"global_mae", report.global_mae}};
        for (const char* fam : {"stage", "arousal", "respiratory"}) {
            const FamilyMetrics* f = report.family(fam);
            if (f) {
                row[fam] = {{"kappa", f->kappa},
                            {"f1", f->f1.macro},
                            {"mae_c", f->mae_c},
                            {"mae_bw", f->mae_bw ? json(*f->mae_bw) : json(nullptr)}};
            } else {
                row[fam] = nullptr;
            }
        }
        summary.push_back(row);

        auto opt_metric = [&](const char* fam, auto&& get) -> std::optional<double> {
            const FamilyMetrics* f = report.family(fam);
            if (!f) return std::nullopt;
            return get(*f);
        };
        auto kappa_of = [](const FamilyMetrics& f) { return f.kappa; };
        auto f1_of = [](const FamilyMetrics& f) { return f.f1.macro; };
        auto maec_of = [](const FamilyMetrics& f) { return f.mae_c; };
        auto maebw_of = [](const FamilyMetrics& f) { return f.mae_bw.value_or(0.0); };

        char line[256];
        std::snprintf(line, sizeof(line),
                      "%-5s %2d %-4s | %-12s %-6s %-6s | %-12s %-6s %-6s %-6s | %-11s %-6s %-6s %-6s | %s\n",
                      exp.name, exp.channels, assembly_name(exp.assembly),
                      format_cell(opt_metric("stage", kappa_of)).c_str(),
                      format_cell(opt_metric("stage", f1_of)).c_str(),
                      format_cell(opt_metric("stage", maec_of)).c_str(),
                      format_cell(opt_metric("arousal", kappa_of)).c_str(),
                      format_cell(opt_metric("arousal", f1_of)).c_str(),
                      format_cell(opt_metric("arousal", maec_of)).c_str(),
                      format_cell(opt_metric("arousal", maebw_of)).c_str(),
                      format_cell(opt_metric("respiratory", kappa_of)).c_str(),
                      format_cell(opt_metric("respiratory", f1_of)).c_str(),
                      format_cell(opt_metric("respiratory", maec_of)).c_str(),
                      format_cell(opt_metric("respiratory", maebw_of)).c_str(),
                      format_cell(report.global_mae).c_str());
        table += line;
        std::cout << line << std::flush;
    }

    write_text_file(fs::path(o.out) / "summary.json", json{{"experiments", summary}}.dump(2) + "\n");
    write_text_file(fs::path(o.out) / "summary.txt", table);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"single-pass sleep event detector pipeline"};
    app.require_subcommand(1);

    uint64_t global_seed = 1;
    bool deterministic = false;
    std::string config_path;
    app.add_option("--seed", global_seed, "root seed for all derived streams");
    app.add_flag("--deterministic", deterministic,
                 "force the deterministic single-threaded path (always on in this build)");
    app.add_option("--config", config_path, "JSON config file (flags override values)");

    SynthCmd synth_opt;
    auto* synth = app.add_subcommand("synth", "generate synthetic records");
    synth->add_option("--out", synth_opt.out)->required();
    synth->add_option("--records", synth_opt.records);
    synth->add_option("--duration", synth_opt.duration_s);
    synth->add_option("--channels", synth_opt.channels);
    synth->add_option("--arousals-per-hour", synth_opt.arousals_per_hour);
    synth->add_option("--resp-per-hour", synth_opt.resp_per_hour);
    synth->add_option("--apnea-fraction", synth_opt.apnea_fraction);

    BuildCmd build_opt;
    auto* build = app.add_subcommand("build-dataset", "encode records into a dataset");
    build->add_option("--records", build_opt.records, "record directories")->required();
    build->add_option("--out", build_opt.out)->required();
    build->add_option("--assembly", build_opt.assembly);
    build->add_option("--channel", build_opt.channels,
                      "channel names (default: all channels of the first record)");
    build->add_option("--window", build_opt.window_s);
    build->add_option("--context", build_opt.context_s);
    build->add_option("--rate", build_opt.rate_hz);

    TrainCmd train_opt;
    auto* traincmd = app.add_subcommand("train", "train the detector on a dataset");
    traincmd->add_option("--dataset", train_opt.dataset)->required();
    traincmd->add_option("--out", train_opt.out)->required();
    traincmd->add_option("--batch-size", train_opt.batch_size);
    traincmd->add_option("--max-epochs", train_opt.max_epochs);
    traincmd->add_option("--patience", train_opt.patience, "0 disables early stopping");
    traincmd->add_option("--lr", train_opt.learning_rate);
    traincmd->add_option("--momentum", train_opt.momentum);
    traincmd->add_option("--loss-mode", train_opt.loss_mode, "multi or single");

    InferCmd infer_opt;
    auto* infer = app.add_subcommand("infer", "decode events and hypnogram from a record");
    infer->add_option("--checkpoint", infer_opt.checkpoint)->required();
    infer->add_option("--record", infer_opt.record)->required();
    infer->add_option("--out", infer_opt.out)->required();
    infer->add_option("--lambda", infer_opt.lambda, "NMS overlap threshold");

    ScoreCmd score_opt;
    std::string score_assembly = "SAR";
    auto* score = app.add_subcommand("score", "score predictions against a reference");
    score->add_option("--pred", score_opt.pred)->required();
    score->add_option("--ref", score_opt.ref)->required();
    score->add_option("--out", score_opt.out)->required();
    score->add_option("--assembly", score_assembly);

    GridCmd grid_opt;
    auto* grid = app.add_subcommand("grid", "run the ten-experiment grid on synthetic data");
    grid->add_option("--out", grid_opt.out)->required();
    grid->add_option("--records", grid_opt.records);
    grid->add_option("--duration", grid_opt.duration_s);
    grid->add_option("--max-epochs", grid_opt.max_epochs);
    grid->add_option("--patience", grid_opt.patience);
    grid->add_option("--batch-size", grid_opt.batch_size);

    CLI11_PARSE(app, argc, argv);
    (void)deterministic;  // single-threaded and seed-driven in every mode

    try {
        // config file fills values the user did not pass as flags
        json cfgj = load_config_file(config_path);
        auto fill = [&](CLI::App* sub, const char* flag, const char* key, auto& value) {
            if (sub->count(flag) == 0) config_default(cfgj, key, value);
        };
        if (synth->parsed()) {
            synth_opt.seed = global_seed;
            synth_opt.config_path = config_path;
            return run_synth(synth_opt);
        }
        if (build->parsed()) {
            build_opt.seed = global_seed;
            fill(build, "--assembly", "assembly", build_opt.assembly);
            fill(build, "--window", "window_s", build_opt.window_s);
            fill(build, "--context", "context_s", build_opt.context_s);
            fill(build, "--rate", "rate_hz", build_opt.rate_hz);
            return run_build(build_opt);
        }
        if (traincmd->parsed()) {
            train_opt.model_seed = derive_seed(global_seed, 0x0de1ULL);
            train_opt.shuffle_seed = derive_seed(global_seed, 0x50f1ULL);
            fill(traincmd, "--batch-size", "batch_size", train_opt.batch_size);
            fill(traincmd, "--max-epochs", "max_epochs", train_opt.max_epochs);
            fill(traincmd, "--patience", "patience", train_opt.patience);
            fill(traincmd, "--lr", "learning_rate", train_opt.learning_rate);
            fill(traincmd, "--momentum", "momentum", train_opt.momentum);
            fill(traincmd, "--loss-mode", "loss_mode", train_opt.loss_mode);
            return run_train(train_opt);
        }
        if (infer->parsed()) return run_infer(infer_opt);
        if (score->parsed()) {
            auto a = parse_assembly(score_assembly);
            if (!a) throw ValidationError("unknown assembly: " + score_assembly);
            score_opt.model_seed = derive_seed(global_seed, 0x0de1ULL);
            score_opt.shuffle_seed = derive_seed(global_seed, 0x50f1ULL);
            return run_score(score_opt, *a);
        }
        if (grid->parsed()) {
            grid_opt.seed = global_seed;
            grid_opt.config_path = config_path;
            return run_grid(grid_opt);
        }
    } catch (const NumericError& e) {
        std::cerr << json{{"error", {{"kind", "numeric"}, {"message", e.what()}}}}.dump() << "\n";
        return kExitNumeric;
    } catch (const ValidationError& e) {
        std::cerr << json{{"error", {{"kind", "validation"}, {"message", e.what()}}}}.dump()
                  << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << json{{"error", {{"kind", "internal"}, {"message", e.what()}}}}.dump() << "\n";
        return 1;
    }
    return 0;
}
