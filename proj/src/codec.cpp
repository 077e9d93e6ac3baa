#include "sleepdet/codec.hpp"

#include <algorithm>
#include <cmath>

#include "sleepdet/common.hpp"

namespace sleepdet {

int vector_length(Assembly a) {
    switch (a) {
        case Assembly::S: return 5;
        case Assembly::SA: return 8;
        case Assembly::SR: return 10;
        case Assembly::SAR: return 13;
    }
    return 0;
}

const char* assembly_name(Assembly a) {
    switch (a) {
        case Assembly::S: return "S";
        case Assembly::SA: return "SA";
        case Assembly::SR: return "SR";
        case Assembly::SAR: return "SAR";
    }
    return "?";
}

std::optional<Assembly> parse_assembly(const std::string& s) {
    if (s == "S") return Assembly::S;
    if (s == "SA") return Assembly::SA;
    if (s == "SR") return Assembly::SR;
    if (s == "SAR") return Assembly::SAR;
    return std::nullopt;
}

bool assembly_has_arousal(Assembly a) { return a == Assembly::SA || a == Assembly::SAR; }
bool assembly_has_respiratory(Assembly a) { return a == Assembly::SR || a == Assembly::SAR; }

VectorLayout layout_for(Assembly a) {
    VectorLayout l;
    l.length = vector_length(a);
    l.stage = 0;
    int next = 5;
    if (assembly_has_arousal(a)) {
        l.arousal_flag = next;
        l.arousal_x = next + 1;
        l.arousal_w = next + 2;
        next += 3;
    }
    if (assembly_has_respiratory(a)) {
        l.resp_flag = next;
        l.resp_apnea = next + 1;
        l.resp_hypopnea = next + 2;
        l.resp_x = next + 3;
        l.resp_w = next + 4;
        next += 5;
    }
    return l;
}

double event_centroid(const Annotation& a) { return a.onset_s + a.duration_s / 2.0; }

double iou_1d(const Interval& a, const Interval& b) {
    double inter = std::min(a.end, b.end) - std::max(a.start, b.start);
    if (inter < 0) inter = 0;
    double uni = (a.end - a.start) + (b.end - b.start) - inter;
    return uni > 0 ? inter / uni : 0.0;
}

TargetVector encode(const WindowSpan& span, EventLabel stage,
                    std::span<const Annotation> owned, Assembly assembly) {
    if (!is_stage(stage))
        throw ValidationError(std::string("encode: '") + label_name(stage) + "' is not a stage label");
    const VectorLayout l = layout_for(assembly);
    const double n = span.width();

    TargetVector v(static_cast<size_t>(l.length), 0.0);
    v[static_cast<size_t>(l.stage + static_cast<int>(stage))] = 1.0;

    bool have_arousal = false, have_resp = false;
    for (const auto& a : owned) {
        if (is_stage(a.label)) throw ValidationError("encode: stage label passed as owned event");
        double c = event_centroid(a);
        if (c < span.start_s || c >= span.end_s)
            throw ValidationError("encode: owned event centroid outside window");
        double x = (c - span.start_s) / n;
        double w = a.duration_s / n;
        if (a.label == EventLabel::Arousal) {
            if (!assembly_has_arousal(assembly))
                throw ValidationError("encode: assembly excludes arousal events");
            if (have_arousal) throw ValidationError("encode: two arousal events in one window");
            have_arousal = true;
            v[static_cast<size_t>(l.arousal_flag)] = 1.0;
            v[static_cast<size_t>(l.arousal_x)] = x;
            v[static_cast<size_t>(l.arousal_w)] = w;
        } else {
            if (!assembly_has_respiratory(assembly))
                throw ValidationError("encode: assembly excludes respiratory events");
            if (have_resp) throw ValidationError("encode: two respiratory events in one window");
            have_resp = true;
            v[static_cast<size_t>(l.resp_flag)] = 1.0;
            v[static_cast<size_t>(a.label == EventLabel::Apnea ? l.resp_apnea : l.resp_hypopnea)] = 1.0;
            v[static_cast<size_t>(l.resp_x)] = x;
            v[static_cast<size_t>(l.resp_w)] = w;
        }
    }
    return v;
}

DecodedWindow decode(std::span<const double> v, const WindowSpan& span, Assembly assembly) {
    const VectorLayout l = layout_for(assembly);
    if (v.size() != static_cast<size_t>(l.length))
        throw ValidationError("decode: vector length does not match assembly");
    for (double x : v)
        if (!std::isfinite(x)) throw NumericError("decode: non-finite activation");

    DecodedWindow out;
    int best = 0;
    for (int i = 1; i < 5; ++i)
        if (v[static_cast<size_t>(l.stage + i)] > v[static_cast<size_t>(l.stage + best)]) best = i;
    out.stage = static_cast<EventLabel>(best);

    const double n = span.width();
    if (l.arousal_flag >= 0 && v[static_cast<size_t>(l.arousal_flag)] >= 0.5) {
        double x = v[static_cast<size_t>(l.arousal_x)];
        double w = v[static_cast<size_t>(l.arousal_w)];
        out.arousal = DecodedEvent{span.start_s + (x - w / 2.0) * n, w * n};
    }
    if (l.resp_flag >= 0 && v[static_cast<size_t>(l.resp_flag)] >= 0.5) {
        double x = v[static_cast<size_t>(l.resp_x)];
        double w = v[static_cast<size_t>(l.resp_w)];
        bool apnea = v[static_cast<size_t>(l.resp_apnea)] >= v[static_cast<size_t>(l.resp_hypopnea)];
        out.respiratory = DecodedResp{span.start_s + (x - w / 2.0) * n, w * n,
                                      apnea ? EventLabel::Apnea : EventLabel::Hypopnea,
                                      v[static_cast<size_t>(l.resp_flag)]};
    }
    return out;
}

namespace {

// Total order: confidence desc, then onset, end, label. Makes NMS output
// independent of input ordering.
bool candidate_before(const Candidate& a, const Candidate& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.interval.start != b.interval.start) return a.interval.start < b.interval.start;
    if (a.interval.end != b.interval.end) return a.interval.end < b.interval.end;
    return a.label < b.label;
}

}  // namespace

std::vector<Candidate> nms(std::vector<Candidate> candidates, double lambda) {
    for (const auto& c : candidates)
        if (!std::isfinite(c.confidence)) throw NumericError("nms: non-finite confidence");
    std::sort(candidates.begin(), candidates.end(), candidate_before);
    std::vector<Candidate> kept;
    for (const auto& c : candidates) {
        bool suppressed = false;
        for (const auto& k : kept) {
            if (k.label == c.label && iou_1d(k.interval, c.interval) > lambda) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(c);
    }
    return kept;
}

PostprocessResult postprocess(std::span<const DecodedWindow> windows, double lambda,
                              double record_duration_s) {
    PostprocessResult out;
    out.hypnogram.reserve(windows.size());

    std::vector<Candidate> cands;
    for (const auto& w : windows) {
        out.hypnogram.push_back(w.stage);
        if (w.arousal)
            cands.push_back({{w.arousal->onset_s, w.arousal->onset_s + w.arousal->duration_s},
                             1.0, EventLabel::Arousal});
        if (w.respiratory)
            cands.push_back({{w.respiratory->onset_s, w.respiratory->onset_s + w.respiratory->duration_s},
                             w.respiratory->confidence, w.respiratory->type});
    }

    // clip to the record, then apply the minimum-duration rule for arousals
    std::vector<Candidate> filtered;
    for (auto c : cands) {
        c.interval.start = std::max(0.0, c.interval.start);
        c.interval.end = std::min(record_duration_s, c.interval.end);
        if (c.interval.end <= c.interval.start) continue;
        if (c.label == EventLabel::Arousal && c.interval.end - c.interval.start < 3.0) continue;
        filtered.push_back(c);
    }

    // merge same-class overlap chains into their union, keeping the max confidence
    std::sort(filtered.begin(), filtered.end(), [](const Candidate& a, const Candidate& b) {
        if (a.label != b.label) return a.label < b.label;
        if (a.interval.start != b.interval.start) return a.interval.start < b.interval.start;
        return a.interval.end < b.interval.end;
    });
    std::vector<Candidate> merged;
    for (const auto& c : filtered) {
        if (!merged.empty() && merged.back().label == c.label &&
            c.interval.start < merged.back().interval.end) {
            merged.back().interval.end = std::max(merged.back().interval.end, c.interval.end);
            merged.back().confidence = std::max(merged.back().confidence, c.confidence);
        } else {
            merged.push_back(c);
        }
    }

    std::vector<Candidate> kept = nms(std::move(merged), lambda);
    std::sort(kept.begin(), kept.end(), [](const Candidate& a, const Candidate& b) {
        if (a.interval.start != b.interval.start) return a.interval.start < b.interval.start;
        return a.label < b.label;
    });
    for (const auto& c : kept) {
        ScoredEvent e;
        e.annotation = {c.interval.start, c.interval.end - c.interval.start, c.label};
        if (c.label != EventLabel::Arousal) e.confidence = c.confidence;
        out.events.push_back(e);
    }
    return out;
}

}  // namespace sleepdet
