#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sleepdet/codec.hpp"

namespace sleepdet {

// Square count matrix, rows = reference, columns = prediction. Label order is
// fixed per family: stages W,N1,N2,N3,REM; arousal absent,present;
// respiratory none,apnea,hypopnea.
struct ConfusionMatrix {
    int k = 0;
    std::vector<int64_t> counts;

    explicit ConfusionMatrix(int classes = 0) : k(classes), counts(static_cast<size_t>(classes) * classes, 0) {}
    int64_t& at(int row, int col) { return counts[static_cast<size_t>(row) * k + col]; }
    int64_t at(int row, int col) const { return counts[static_cast<size_t>(row) * k + col]; }
    int64_t total() const;
};

// (p_o - p_e) / (1 - p_e); when chance agreement is total, 1 for perfect
// observed agreement and 0 otherwise.
double cohen_kappa(const ConfusionMatrix& cm);

struct F1Result {
    std::vector<double> per_class;  // 2PR/(P+R), 0 when P+R = 0
    double macro = 0;               // unweighted mean
};
F1Result f1_scores(const ConfusionMatrix& cm);

struct FamilyMetrics {
    std::string name;
    ConfusionMatrix cm;
    double kappa = 0;
    F1Result f1;
    double mae_c = 0;                    // classification/presence components
    std::optional<double> mae_bw;        // coordinates over target-positive windows
    std::vector<int64_t> support;        // reference count per class
};

struct FamilyMae {
    double mae_c = 0;
    std::optional<double> mae_bw;  // absent when no window carries the event
};

struct MaeReport {
    FamilyMae stage;                     // classification only
    std::optional<FamilyMae> arousal;
    std::optional<FamilyMae> respiratory;
    double global_mae = 0;
};

// Componentwise mean absolute deviations: mae_c over each family's
// classification/presence components across all windows, mae_bw over
// center/width components of windows whose target carries the event.
MaeReport mae_components(std::span<const TargetVector> preds,
                         std::span<const TargetVector> targets, Assembly assembly);

struct MetricReport {
    std::vector<FamilyMetrics> families;  // stage always; arousal/respiratory per assembly
    double global_mae = 0;
    size_t windows = 0;

    const FamilyMetrics* family(const std::string& name) const;
};

// Window-level scoring of raw activation vectors against encoded targets.
MetricReport score_run(std::span<const TargetVector> preds, std::span<const TargetVector> targets,
                       Assembly assembly);

struct ReportMeta {
    int channels = 0;
    Assembly assembly = Assembly::SAR;
    uint64_t model_seed = 0;
    uint64_t dataset_seed = 0;
    uint64_t shuffle_seed = 0;
    std::string dataset_hash;
};

std::string report_to_json(const MetricReport& report, const ReportMeta& meta);

}  // namespace sleepdet
