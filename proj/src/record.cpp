#include "sleepdet/record.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include <json.hpp>

#include "sleepdet/common.hpp"

namespace sleepdet {

using nlohmann::json;

namespace {

const char* kLabelNames[] = {"W", "N1", "N2", "N3", "REM", "arousal", "apnea", "hypopnea"};

json parse_json(const std::string& text, const std::string& what) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ValidationError("malformed JSON in " + what);
    return j;
}

}  // namespace

bool is_stage(EventLabel l) { return static_cast<int>(l) < 5; }

const char* label_name(EventLabel l) { return kLabelNames[static_cast<int>(l)]; }

std::optional<EventLabel> parse_label(const std::string& s) {
    for (int i = 0; i < 8; ++i)
        if (s == kLabelNames[i]) return static_cast<EventLabel>(i);
    return std::nullopt;
}

const Channel* Record::find_channel(const std::string& name) const {
    for (const auto& ch : channels)
        if (ch.name == name) return &ch;
    return nullptr;
}

Record load_record(const std::filesystem::path& dir) {
    Record r;
    json header = parse_json(read_text_file(dir / "record.json"), (dir / "record.json").string());
    if (!header.contains("id") || !header.contains("duration_s") || !header.contains("channels"))
        throw ValidationError("record.json missing id/duration_s/channels: " + dir.string());
    r.id = header.at("id").get<std::string>();
    r.duration_s = header.at("duration_s").get<double>();
    if (!(r.duration_s > 0)) throw ValidationError("record duration must be positive: " + r.id);

    std::set<std::string> seen;
    for (const auto& cj : header.at("channels")) {
        Channel ch;
        ch.name = cj.at("name").get<std::string>();
        ch.sample_rate_hz = cj.at("sample_rate_hz").get<double>();
        if (!(ch.sample_rate_hz > 0))
            throw ValidationError("non-positive sample rate for channel " + ch.name);
        if (!seen.insert(ch.name).second)
            throw ValidationError("duplicate channel " + ch.name + " in " + r.id);

        auto payload_path = dir / cj.at("file").get<std::string>();
        if (!std::filesystem::exists(payload_path))
            throw ValidationError("missing channel payload: " + payload_path.string());
        std::vector<float> raw = read_f32_file(payload_path);
        auto expect = static_cast<size_t>(std::llround(r.duration_s * ch.sample_rate_hz));
        if (raw.size() != expect) {
            std::ostringstream os;
            os << "payload length mismatch for channel " << ch.name << ": got " << raw.size()
               << ", expected " << expect;
            throw ValidationError(os.str());
        }
        ch.samples.resize(raw.size());
        for (size_t i = 0; i < raw.size(); ++i) {
            if (!std::isfinite(raw[i]))
                throw ValidationError("non-finite sample in channel " + ch.name);
            ch.samples[i] = raw[i];
        }
        r.channels.push_back(std::move(ch));
    }

    auto ann_path = dir / "annotations.jsonl";
    if (std::filesystem::exists(ann_path)) {
        std::istringstream lines(read_text_file(ann_path));
        std::string line;
        size_t lineno = 0;
        while (std::getline(lines, line)) {
            ++lineno;
            if (line.empty()) continue;
            json aj = json::parse(line, nullptr, false);
            if (aj.is_discarded() || !aj.contains("onset_s") || !aj.contains("duration_s") ||
                !aj.contains("label")) {
                throw ValidationError("malformed annotation line " + std::to_string(lineno) +
                                      " in " + ann_path.string());
            }
            Annotation a;
            a.onset_s = aj.at("onset_s").get<double>();
            a.duration_s = aj.at("duration_s").get<double>();
            auto label = parse_label(aj.at("label").get<std::string>());
            if (!label)
                throw ValidationError("unknown label '" + aj.at("label").get<std::string>() +
                                      "' at line " + std::to_string(lineno));
            a.label = *label;
            if (!(a.duration_s > 0))
                throw ValidationError("non-positive duration at line " + std::to_string(lineno));
            if (a.onset_s < 0)
                throw ValidationError("negative onset at line " + std::to_string(lineno));
            if (a.onset_s + a.duration_s > r.duration_s + 1e-9)
                throw ValidationError("annotation extends past record end at line " +
                                      std::to_string(lineno));
            r.annotations.push_back(a);
        }
    }
    std::stable_sort(r.annotations.begin(), r.annotations.end(),
                     [](const Annotation& a, const Annotation& b) {
                         if (a.onset_s != b.onset_s) return a.onset_s < b.onset_s;
                         if (a.duration_s != b.duration_s) return a.duration_s < b.duration_s;
                         return a.label < b.label;
                     });
    return r;
}

void save_record(const Record& r, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    json header;
    header["id"] = r.id;
    header["duration_s"] = r.duration_s;
    header["channels"] = json::array();
    for (const auto& ch : r.channels) {
        std::string file = ch.name + ".f32";
        header["channels"].push_back(
            {{"name", ch.name}, {"sample_rate_hz", ch.sample_rate_hz}, {"file", file}});
        std::vector<float> raw(ch.samples.size());
        for (size_t i = 0; i < ch.samples.size(); ++i) raw[i] = static_cast<float>(ch.samples[i]);
        write_f32_file(dir / file, raw);
    }
    write_text_file(dir / "record.json", header.dump(2) + "\n");

    std::string lines;
    for (const auto& a : r.annotations) {
        json aj = {{"onset_s", a.onset_s}, {"duration_s", a.duration_s}, {"label", label_name(a.label)}};
        lines += aj.dump();
        lines += "\n";
    }
    write_text_file(dir / "annotations.jsonl", lines);
}

Channel resample_channel(const Channel& ch, double target_hz) {
    if (!(target_hz > 0)) throw ValidationError("target rate must be positive");
    if (ch.samples.empty()) throw ValidationError("cannot resample empty channel " + ch.name);

    Channel out;
    out.name = ch.name;
    out.sample_rate_hz = target_hz;

    double duration = static_cast<double>(ch.samples.size()) / ch.sample_rate_hz;
    auto out_len = static_cast<size_t>(std::llround(duration * target_hz));
    out.samples.resize(out_len);

    double ratio = ch.sample_rate_hz / target_hz;
    size_t last = ch.samples.size() - 1;
    for (size_t k = 0; k < out_len; ++k) {
        double pos = static_cast<double>(k) * ratio;
        auto j = static_cast<size_t>(pos);
        if (j >= last) {
            out.samples[k] = ch.samples[last];  // boundary hold
            continue;
        }
        double frac = pos - static_cast<double>(j);
        out.samples[k] = ch.samples[j] + frac * (ch.samples[j + 1] - ch.samples[j]);
    }
    return out;
}

Channel normalize_channel(const Channel& ch) {
    Channel out = ch;
    size_t n = ch.samples.size();
    if (n == 0) return out;
    double mean = 0;
    for (double x : ch.samples) mean += x;
    mean /= static_cast<double>(n);
    double var = 0;
    for (double x : ch.samples) var += (x - mean) * (x - mean);
    var /= static_cast<double>(n);
    if (var <= 0) {
        std::fill(out.samples.begin(), out.samples.end(), 0.0);
        return out;
    }
    double inv = 1.0 / std::sqrt(var);
    for (double& x : out.samples) x = (x - mean) * inv;
    return out;
}

}  // namespace sleepdet
