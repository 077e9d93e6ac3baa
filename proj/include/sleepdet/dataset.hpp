#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sleepdet/codec.hpp"
#include "sleepdet/record.hpp"

namespace sleepdet {

struct DatasetConfig {
    double window_s = 30.0;       // N
    double context_s = 60.0;      // delta, added on each side
    double rate_hz = 100.0;
    Assembly assembly = Assembly::SAR;
    std::vector<std::string> channel_names;
    uint64_t seed = 1;

    // samples per example row: (2*delta + N) * rate
    int input_len() const;
    int channels() const { return static_cast<int>(channel_names.size()); }
};

// One training unit: row-major channels x input_len tensor plus its target.
struct Example {
    std::vector<float> input;
    TargetVector target;
    WindowSpan span;
    std::string record_id;
};

// Inference-side window: tensor only, no target (records need no stage
// annotations for this path).
struct InputWindow {
    std::vector<float> input;
    WindowSpan span;
};

struct BuildStats {
    size_t skipped_epochs = 0;       // epochs without a stage annotation
    size_t dropped_arousal = 0;      // same-family ties resolved by duration
    size_t dropped_respiratory = 0;
    size_t out_of_range = 0;         // centroid past the last full epoch

    void add(const BuildStats& o);
};

struct SplitSpec {
    std::vector<size_t> train, validation, test;
};

struct Dataset {
    DatasetConfig cfg;
    std::vector<Example> examples;
    SplitSpec split;
    BuildStats stats;
};

// One example per full 30 s epoch; events owned by the window containing their
// centroid, same-family ties resolved toward the longer event; rows resampled,
// context-extended, zero-padded at record edges, and normalized per window
// (padding excluded from the statistics).
std::vector<Example> build_examples(const Record& r, const DatasetConfig& cfg, BuildStats* stats);

// Tensor-only variant used at inference time.
std::vector<InputWindow> build_inputs(const Record& r, const DatasetConfig& cfg);

// Deterministic 80-20 test carve-off, then 80-20 train/validation on the rest
// (64/16/20 of the total, sizes rounded to nearest).
SplitSpec split_examples(size_t count, uint64_t seed);

// Dataset directory: manifest.json, inputs.f32, targets.jsonl, split.json.
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

// FNV fingerprint over tensors and targets; recorded in score reports.
uint64_t dataset_hash(const std::vector<Example>& examples);

}  // namespace sleepdet
