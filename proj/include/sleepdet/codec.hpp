#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sleepdet/record.hpp"

namespace sleepdet {

// Which event families the target vector carries.
//   S   stages only                (length  5)
//   SA  stages + arousals          (length  8)
//   SR  stages + respiratory       (length 10)
//   SAR stages + both              (length 13)
enum class Assembly { S, SA, SR, SAR };

int vector_length(Assembly a);
const char* assembly_name(Assembly a);
std::optional<Assembly> parse_assembly(const std::string& s);
bool assembly_has_arousal(Assembly a);
bool assembly_has_respiratory(Assembly a);

// Component offsets into a target vector; -1 marks components the assembly
// does not carry. Full layout:
//   [c_W c_N1 c_N2 c_N3 c_R | c_a x_a w_a | p_r c_apnea c_hypopnea x_r w_r]
struct VectorLayout {
    int length = 0;
    int stage = 0;  // 5 consecutive components
    int arousal_flag = -1, arousal_x = -1, arousal_w = -1;
    int resp_flag = -1, resp_apnea = -1, resp_hypopnea = -1, resp_x = -1, resp_w = -1;
};
VectorLayout layout_for(Assembly a);

using TargetVector = std::vector<double>;

// One 30 s analysis window in absolute record time.
struct WindowSpan {
    double start_s = 0.0;
    double end_s = 0.0;
    double width() const { return end_s - start_s; }
};

struct Interval {
    double start = 0.0;
    double end = 0.0;
};

struct DecodedEvent {
    double onset_s = 0.0;
    double duration_s = 0.0;
};

struct DecodedResp {
    double onset_s = 0.0;
    double duration_s = 0.0;
    EventLabel type = EventLabel::Apnea;
    double confidence = 0.0;
};

struct DecodedWindow {
    EventLabel stage = EventLabel::W;
    std::optional<DecodedEvent> arousal;
    std::optional<DecodedResp> respiratory;
};

struct Candidate {
    Interval interval;
    double confidence = 0.0;
    EventLabel label = EventLabel::Arousal;
};

struct ScoredEvent {
    Annotation annotation;
    std::optional<double> confidence;
};

struct PostprocessResult {
    std::vector<ScoredEvent> events;       // sorted by onset
    std::vector<EventLabel> hypnogram;     // one stage per window
};

// Temporal midpoint onset + duration/2; the window containing it owns the event.
double event_centroid(const Annotation& a);

// |a ∩ b| / |a ∪ b|; 0 when the union has zero length.
double iou_1d(const Interval& a, const Interval& b);

// Fill the target vector for one window: one-hot stage block, then per owned
// event presence flag, class one-hot (respiratory), and window-normalized
// center/width. `owned` holds at most one annotation per family whose centroid
// lies in [span.start_s, span.end_s). Absent events stay zero.
TargetVector encode(const WindowSpan& span, EventLabel stage,
                    std::span<const Annotation> owned, Assembly assembly);

// Inverse of encode on raw activations: stage by argmax, events present when
// their flag reaches 0.5, coordinates mapped back to absolute seconds.
DecodedWindow decode(std::span<const double> v, const WindowSpan& span, Assembly assembly);

// Greedy per-class suppression: in descending confidence, drop a candidate iff
// it shares a label with a kept one and their IOU exceeds lambda. Output order
// is confidence desc, onset asc.
std::vector<Candidate> nms(std::vector<Candidate> candidates, double lambda);

// Clip to [0, record_duration], drop arousals shorter than 3 s, merge
// same-class overlapping events into their union (confidence = max), run NMS,
// and emit the hypnogram. Pass +infinity duration to skip clipping.
PostprocessResult postprocess(std::span<const DecodedWindow> windows, double lambda,
                              double record_duration_s);

}  // namespace sleepdet
