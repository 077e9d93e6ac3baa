#include "sleepdet/synth.hpp"

#include <algorithm>
#include <cmath>

#include "sleepdet/common.hpp"
#include "sleepdet/rng.hpp"

namespace sleepdet {

namespace {

constexpr double kEpoch = 30.0;
constexpr double kTwoPi = 6.283185307179586476925286766559;

struct MontageEntry {
    const char* name;
    double rate_hz;
};

const MontageEntry kMontage[8] = {
    {"EEG1", 100.0}, {"EEG2", 100.0}, {"EOG", 100.0},  {"EMG", 100.0},
    {"SAO2", 25.0},  {"FLOW", 25.0},  {"ABDO", 25.0},  {"THOR", 25.0},
};

struct PlantedEvent {
    double onset = 0, duration = 0;
    EventLabel label = EventLabel::Arousal;
    double airflow_factor = 1.0;  // respiratory only
    double sat_depth = 0.0;       // respiratory only
};

// Sum of nosc random-phase sinusoids inside [flo, fhi], synthesized with a
// rotation recurrence (no per-sample trig).
void add_band(std::vector<double>& dst, size_t i0, size_t i1, double rate, double flo, double fhi,
              double amp, int nosc, Rng& rng) {
    for (int j = 0; j < nosc; ++j) {
        double f = rng.uniform(flo, fhi);
        double phase = rng.uniform(0.0, kTwoPi);
        double a = amp * rng.uniform(0.5, 1.0) * 2.0 / nosc;
        double w = kTwoPi * f / rate;
        double cw = std::cos(w), sw = std::sin(w);
        double x = std::cos(phase), y = std::sin(phase);
        for (size_t i = i0; i < i1; ++i) {
            dst[i] += a * y;
            double nx = x * cw - y * sw;
            y = x * sw + y * cw;
            x = nx;
        }
    }
}

void add_white(std::vector<double>& dst, size_t i0, size_t i1, double sigma, Rng& rng) {
    for (size_t i = i0; i < i1; ++i) dst[i] += sigma * rng.normal();
}

size_t clamp_index(double t, double rate, size_t n) {
    auto i = static_cast<long long>(std::floor(t * rate));
    if (i < 0) i = 0;
    if (i > static_cast<long long>(n)) i = static_cast<long long>(n);
    return static_cast<size_t>(i);
}

// Non-overlapping placement with a 45 s separation inside one family, so at
// most one family event can own any 30 s window.
std::vector<PlantedEvent> place_events(size_t count, double dur_lo, double dur_hi,
                                       double record_dur, Rng& rng) {
    std::vector<PlantedEvent> placed;
    const double margin = 60.0;
    const double gap = 45.0;
    size_t attempts = 0, max_attempts = count * 200 + 200;
    while (placed.size() < count && attempts < max_attempts) {
        ++attempts;
        double dur = rng.uniform(dur_lo, dur_hi);
        if (record_dur - margin - dur <= margin) continue;
        double onset = rng.uniform(margin, record_dur - margin - dur);
        bool ok = true;
        for (const auto& e : placed) {
            if (onset < e.onset + e.duration + gap && e.onset < onset + dur + gap) {
                ok = false;
                break;
            }
        }
        if (!ok) continue;
        PlantedEvent e;
        e.onset = onset;
        e.duration = dur;
        placed.push_back(e);
    }
    std::sort(placed.begin(), placed.end(),
              [](const PlantedEvent& a, const PlantedEvent& b) { return a.onset < b.onset; });
    return placed;
}

struct StageRecipe {
    double flo, fhi, amp;
};

}  // namespace

SynthConfig::SynthConfig() {
    transition = {{{0.70, 0.25, 0.03, 0.01, 0.01},
                   {0.05, 0.50, 0.40, 0.02, 0.03},
                   {0.02, 0.05, 0.70, 0.15, 0.08},
                   {0.01, 0.02, 0.25, 0.70, 0.02},
                   {0.03, 0.05, 0.15, 0.02, 0.75}}};
}

std::vector<std::string> synth_montage(int channels) {
    if (channels != 4 && channels != 6 && channels != 8)
        throw ValidationError("synth montage supports 4, 6 or 8 channels");
    std::vector<std::string> names;
    for (int c = 0; c < channels; ++c) names.emplace_back(kMontage[c].name);
    return names;
}

Record generate_record(const SynthConfig& cfg) {
    if (cfg.duration_s < kEpoch) throw ValidationError("synth: duration shorter than one epoch");
    if (cfg.channels != 4 && cfg.channels != 6 && cfg.channels != 8)
        throw ValidationError("synth: channels must be 4, 6 or 8");
    if (cfg.arousals_per_hour < 0 || cfg.resp_events_per_hour < 0)
        throw ValidationError("synth: event rates must be non-negative");
    if (cfg.apnea_fraction < 0 || cfg.apnea_fraction > 1)
        throw ValidationError("synth: apnea fraction must lie in [0, 1]");
    for (const auto& row : cfg.transition) {
        double s = 0;
        for (double p : row) {
            if (p < 0) throw ValidationError("synth: negative transition probability");
            s += p;
        }
        if (std::abs(s - 1.0) > 1e-9)
            throw ValidationError("synth: transition rows must sum to 1");
    }

    const auto n_epochs = static_cast<size_t>(cfg.duration_s / kEpoch);
    const double duration = static_cast<double>(n_epochs) * kEpoch;
    const double hours = duration / 3600.0;

    Record rec;
    rec.id = cfg.id;
    rec.duration_s = duration;

    // hypnogram: first-order Markov chain starting awake
    Rng stage_rng(derive_seed(cfg.seed, 0x57a6eULL));
    std::vector<int> hyp(n_epochs);
    int state = 0;
    for (size_t k = 0; k < n_epochs; ++k) {
        hyp[k] = state;
        double u = stage_rng.uniform();
        double acc = 0;
        int next = 4;
        for (int j = 0; j < 5; ++j) {
            acc += cfg.transition[static_cast<size_t>(state)][static_cast<size_t>(j)];
            if (u < acc) {
                next = j;
                break;
            }
        }
        state = next;
    }

    // planted events
    Rng ev_rng(derive_seed(cfg.seed, 0xe7e27ULL));
    auto n_arousal = static_cast<size_t>(std::llround(cfg.arousals_per_hour * hours));
    std::vector<PlantedEvent> arousals =
        place_events(n_arousal, 4.0, 15.0, duration, ev_rng);
    for (auto& e : arousals) e.label = EventLabel::Arousal;

    auto n_resp = static_cast<size_t>(std::llround(cfg.resp_events_per_hour * hours));
    std::vector<PlantedEvent> resps = place_events(n_resp, 12.0, 45.0, duration, ev_rng);
    for (auto& e : resps) {
        bool apnea = ev_rng.uniform() < cfg.apnea_fraction;
        e.label = apnea ? EventLabel::Apnea : EventLabel::Hypopnea;
        e.airflow_factor = apnea ? 0.03 : ev_rng.uniform(0.2, 0.6);
        e.sat_depth = apnea ? ev_rng.uniform(5.0, 8.0) : ev_rng.uniform(2.0, 4.0);
    }

    // Channel synthesis. Window-level normalization erases absolute amplitude,
    // so the stages get disjoint EEG frequency bands; amplitudes only shape
    // transitions and event bumps.
    static const StageRecipe eeg_recipe[5] = {
        {18.0, 30.0, 25.0},  // W: fast, low amplitude
        {9.0, 12.0, 40.0},   // N1: alpha-theta range
        {4.0, 6.0, 45.0},    // N2 background, spindles added below
        {0.5, 2.0, 110.0},   // N3: slow, large
        {6.5, 8.5, 35.0},    // REM: mixed theta
    };
    static const double eog_amp[5] = {40.0, 12.0, 8.0, 8.0, 90.0};
    static const double emg_amp[5] = {25.0, 12.0, 10.0, 6.0, 1.5};

    for (int c = 0; c < cfg.channels; ++c) {
        Rng rng(derive_seed(cfg.seed, 0xc4a22ULL, static_cast<uint64_t>(c)));
        Channel ch;
        ch.name = kMontage[c].name;
        ch.sample_rate_hz = kMontage[c].rate_hz;
        const double rate = ch.sample_rate_hz;
        const auto n = static_cast<size_t>(std::llround(duration * rate));
        ch.samples.assign(n, 0.0);
        const auto epoch_samples = static_cast<size_t>(kEpoch * rate);

        if (c == 0 || c == 1) {  // EEG
            for (size_t k = 0; k < n_epochs; ++k) {
                size_t i0 = k * epoch_samples, i1 = i0 + epoch_samples;
                const StageRecipe& r = eeg_recipe[static_cast<size_t>(hyp[k])];
                add_band(ch.samples, i0, i1, rate, r.flo, r.fhi, r.amp, 6, rng);
                add_white(ch.samples, i0, i1, 1.0, rng);
                if (hyp[k] == 2) {  // N2 spindle bursts
                    int bursts = 2 + static_cast<int>(rng.index(3));
                    for (int bx = 0; bx < bursts; ++bx) {
                        double t0 = rng.uniform(0.0, kEpoch - 1.6);
                        size_t b0 = i0 + static_cast<size_t>(t0 * rate);
                        size_t b1 = std::min(i1, b0 + static_cast<size_t>(1.5 * rate));
                        add_band(ch.samples, b0, b1, rate, 12.0, 14.0, 70.0, 3, rng);
                    }
                }
            }
            for (const auto& e : arousals) {
                size_t i0 = clamp_index(e.onset, rate, n);
                size_t i1 = clamp_index(e.onset + e.duration, rate, n);
                add_band(ch.samples, i0, i1, rate, 16.0, 30.0, 90.0, 4, rng);
            }
        } else if (c == 2) {  // EOG: REM carries large episodic slow deflections
            for (size_t k = 0; k < n_epochs; ++k) {
                size_t i0 = k * epoch_samples, i1 = i0 + epoch_samples;
                double fhi = hyp[k] == 0 ? 2.0 : 1.0;
                add_band(ch.samples, i0, i1, rate, 0.3, fhi, eog_amp[static_cast<size_t>(hyp[k])], 4, rng);
                add_white(ch.samples, i0, i1, 1.0, rng);
                if (hyp[k] == 4) {
                    int bursts = 3 + static_cast<int>(rng.index(3));
                    for (int bx = 0; bx < bursts; ++bx) {
                        double t0 = rng.uniform(0.0, kEpoch - 2.2);
                        size_t b0 = i0 + static_cast<size_t>(t0 * rate);
                        size_t b1 = std::min(i1, b0 + static_cast<size_t>(2.0 * rate));
                        add_band(ch.samples, b0, b1, rate, 0.4, 0.8, 120.0, 2, rng);
                    }
                }
            }
        } else if (c == 3) {  // EMG
            for (size_t k = 0; k < n_epochs; ++k) {
                size_t i0 = k * epoch_samples, i1 = i0 + epoch_samples;
                add_band(ch.samples, i0, i1, rate, 20.0, 45.0, emg_amp[static_cast<size_t>(hyp[k])], 8, rng);
                add_white(ch.samples, i0, i1, 1.0, rng);
            }
            for (const auto& e : arousals) {
                size_t i0 = clamp_index(e.onset, rate, n);
                size_t i1 = clamp_index(e.onset + e.duration, rate, n);
                add_band(ch.samples, i0, i1, rate, 20.0, 45.0, 40.0, 4, rng);
            }
        } else if (c == 4) {  // saturation, dips lag airflow cessation by 10 s
            std::fill(ch.samples.begin(), ch.samples.end(), 96.0);
            add_band(ch.samples, 0, n, rate, 0.01, 0.05, 0.4, 2, rng);
            add_white(ch.samples, 0, n, 0.05, rng);
            for (const auto& e : resps) {
                double d0 = e.onset + 10.0;
                size_t i0 = clamp_index(d0, rate, n);
                size_t i1 = clamp_index(d0 + e.duration, rate, n);
                auto ramp = static_cast<size_t>(5.0 * rate);
                for (size_t i = i0; i < i1; ++i) {
                    double shape = 1.0;
                    if (i - i0 < ramp) shape = static_cast<double>(i - i0) / static_cast<double>(ramp);
                    if (i1 - i < ramp) shape = std::min(shape, static_cast<double>(i1 - i) / static_cast<double>(ramp));
                    ch.samples[i] -= e.sat_depth * shape;
                }
            }
        } else {  // airflow and effort belts
            double amp = c == 5 ? 50.0 : 40.0;
            add_band(ch.samples, 0, n, rate, 0.2, 0.35, amp, 3, rng);
            add_white(ch.samples, 0, n, 1.5, rng);
            for (const auto& e : resps) {
                double factor;
                if (c == 5) {
                    factor = e.airflow_factor;
                } else {
                    factor = e.label == EventLabel::Apnea ? 0.12 : 0.55;
                }
                size_t i0 = clamp_index(e.onset, rate, n);
                size_t i1 = clamp_index(e.onset + e.duration, rate, n);
                for (size_t i = i0; i < i1; ++i) ch.samples[i] *= factor;
            }
        }
        rec.channels.push_back(std::move(ch));
    }

    // ground truth: stage tiling plus planted events
    for (size_t k = 0; k < n_epochs; ++k)
        rec.annotations.push_back({static_cast<double>(k) * kEpoch, kEpoch,
                                   static_cast<EventLabel>(hyp[k])});
    for (const auto& e : arousals) rec.annotations.push_back({e.onset, e.duration, e.label});
    for (const auto& e : resps) rec.annotations.push_back({e.onset, e.duration, e.label});
    std::stable_sort(rec.annotations.begin(), rec.annotations.end(),
                     [](const Annotation& a, const Annotation& b) {
                         if (a.onset_s != b.onset_s) return a.onset_s < b.onset_s;
                         if (a.duration_s != b.duration_s) return a.duration_s < b.duration_s;
                         return a.label < b.label;
                     });
    return rec;
}

}  // namespace sleepdet
