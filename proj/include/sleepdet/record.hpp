#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace sleepdet {

// Closed label vocabulary. The first five are sleep stages, one per 30 s epoch;
// the rest are timed events.
enum class EventLabel { W, N1, N2, N3, REM, Arousal, Apnea, Hypopnea };

bool is_stage(EventLabel l);
const char* label_name(EventLabel l);
std::optional<EventLabel> parse_label(const std::string& s);

// One scored event: onset/duration in seconds from record start.
struct Annotation {
    double onset_s = 0.0;
    double duration_s = 0.0;
    EventLabel label = EventLabel::W;
};

struct Channel {
    std::string name;
    double sample_rate_hz = 0.0;
    std::vector<double> samples;
};

// Immutable after load; safe to share across readers.
struct Record {
    std::string id;
    std::vector<Channel> channels;
    std::vector<Annotation> annotations;  // sorted by onset
    double duration_s = 0.0;

    const Channel* find_channel(const std::string& name) const;
};

// Record directory format:
//   record.json       {"id", "duration_s", "channels":[{"name","sample_rate_hz","file"}]}
//   <channel files>   raw little-endian float32, length = round(duration_s * rate)
//   annotations.jsonl one {"onset_s","duration_s","label"} object per line
Record load_record(const std::filesystem::path& dir);
void save_record(const Record& r, const std::filesystem::path& dir);

// Linear interpolation between source samples, boundary values held. Identity
// (up to length rounding) when source and target rates match.
Channel resample_channel(const Channel& ch, double target_hz);

// Zero mean, unit population standard deviation. Constant channels map to all
// zeros instead of erroring so degenerate synthetic inputs survive.
Channel normalize_channel(const Channel& ch);

}  // namespace sleepdet
