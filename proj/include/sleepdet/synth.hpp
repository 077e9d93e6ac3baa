#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "sleepdet/record.hpp"

namespace sleepdet {

// Deterministic synthetic polysomnography. Stage, arousal and respiratory
// signatures are deliberately exaggerated so the planted structure is
// learnable at desk scale; this is a test fixture, not a simulator.
struct SynthConfig {
    uint64_t seed = 1;
    double duration_s = 8 * 3600.0;  // rounded down to whole 30 s epochs
    int channels = 8;                // montage prefix: 4, 6 or 8
    double arousals_per_hour = 10.0;
    double resp_events_per_hour = 20.0;
    double apnea_fraction = 0.5;     // remaining respiratory events are hypopneas
    std::array<std::array<double, 5>, 5> transition;  // rows W,N1,N2,N3,REM
    std::string id = "synth";

    SynthConfig();
};

// 2xEEG, EOG, EMG, then saturation + airflow, then abdominal + thoracic.
std::vector<std::string> synth_montage(int channels);

Record generate_record(const SynthConfig& cfg);

}  // namespace sleepdet
