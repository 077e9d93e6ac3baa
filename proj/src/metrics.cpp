#include "sleepdet/metrics.hpp"

#include <cmath>

#include <json.hpp>

#include "sleepdet/common.hpp"

namespace sleepdet {

using nlohmann::json;

int64_t ConfusionMatrix::total() const {
    int64_t n = 0;
    for (int64_t c : counts) n += c;
    return n;
}

double cohen_kappa(const ConfusionMatrix& cm) {
    int64_t n = cm.total();
    if (n == 0) throw ValidationError("cohen_kappa: empty confusion matrix");
    double diag = 0;
    std::vector<double> row(static_cast<size_t>(cm.k), 0.0), col(static_cast<size_t>(cm.k), 0.0);
    for (int r = 0; r < cm.k; ++r)
        for (int c = 0; c < cm.k; ++c) {
            auto v = static_cast<double>(cm.at(r, c));
            row[static_cast<size_t>(r)] += v;
            col[static_cast<size_t>(c)] += v;
            if (r == c) diag += v;
        }
    double nn = static_cast<double>(n);
    double p_o = diag / nn;
    double p_e = 0;
    for (int i = 0; i < cm.k; ++i)
        p_e += row[static_cast<size_t>(i)] * col[static_cast<size_t>(i)] / (nn * nn);
    if (p_e >= 1.0) return p_o >= 1.0 ? 1.0 : 0.0;
    return (p_o - p_e) / (1.0 - p_e);
}

F1Result f1_scores(const ConfusionMatrix& cm) {
    if (cm.total() == 0) throw ValidationError("f1_scores: empty confusion matrix");
    F1Result r;
    r.per_class.resize(static_cast<size_t>(cm.k), 0.0);
    for (int c = 0; c < cm.k; ++c) {
        double tp = static_cast<double>(cm.at(c, c));
        double pred = 0, truth = 0;
        for (int i = 0; i < cm.k; ++i) {
            pred += static_cast<double>(cm.at(i, c));
            truth += static_cast<double>(cm.at(c, i));
        }
        double precision = pred > 0 ? tp / pred : 0.0;
        double recall = truth > 0 ? tp / truth : 0.0;
        r.per_class[static_cast<size_t>(c)] =
            precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
        r.macro += r.per_class[static_cast<size_t>(c)];
    }
    r.macro /= static_cast<double>(cm.k);
    return r;
}

namespace {

int stage_argmax(const TargetVector& v, int off) {
    int best = 0;
    for (int i = 1; i < 5; ++i)
        if (v[static_cast<size_t>(off + i)] > v[static_cast<size_t>(off + best)]) best = i;
    return best;
}

}  // namespace

const FamilyMetrics* MetricReport::family(const std::string& name) const {
    for (const auto& f : families)
        if (f.name == name) return &f;
    return nullptr;
}

namespace {

void check_aligned(std::span<const TargetVector> preds, std::span<const TargetVector> targets,
                   size_t vlen, const char* who) {
    if (preds.size() != targets.size())
        throw ValidationError(std::string(who) + ": prediction/reference counts differ");
    if (preds.empty()) throw ValidationError(std::string(who) + ": nothing to score");
    for (const auto& v : preds)
        if (v.size() != vlen) throw ValidationError(std::string(who) + ": prediction length mismatch");
    for (const auto& v : targets)
        if (v.size() != vlen) throw ValidationError(std::string(who) + ": reference length mismatch");
}

}  // namespace

MaeReport mae_components(std::span<const TargetVector> preds,
                         std::span<const TargetVector> targets, Assembly assembly) {
    const VectorLayout l = layout_for(assembly);
    const auto vlen = static_cast<size_t>(l.length);
    check_aligned(preds, targets, vlen, "mae_components");

    MaeReport rep;
    double stage_abs = 0, arousal_abs = 0, resp_abs = 0;
    double arousal_bw_abs = 0, resp_bw_abs = 0, global_abs = 0;
    size_t arousal_bw_n = 0, resp_bw_n = 0;
    const size_t n = preds.size();

    for (size_t i = 0; i < n; ++i) {
        const auto& p = preds[i];
        const auto& t = targets[i];
        for (size_t c = 0; c < vlen; ++c) global_abs += std::abs(p[c] - t[c]);
        for (int c = 0; c < 5; ++c)
            stage_abs +=
                std::abs(p[static_cast<size_t>(l.stage + c)] - t[static_cast<size_t>(l.stage + c)]);
        if (l.arousal_flag >= 0) {
            arousal_abs += std::abs(p[static_cast<size_t>(l.arousal_flag)] -
                                    t[static_cast<size_t>(l.arousal_flag)]);
            if (t[static_cast<size_t>(l.arousal_flag)] >= 0.5) {
                arousal_bw_abs += std::abs(p[static_cast<size_t>(l.arousal_x)] -
                                           t[static_cast<size_t>(l.arousal_x)]) +
                                  std::abs(p[static_cast<size_t>(l.arousal_w)] -
                                           t[static_cast<size_t>(l.arousal_w)]);
                arousal_bw_n += 2;
            }
        }
        if (l.resp_flag >= 0) {
            for (int idx : {l.resp_flag, l.resp_apnea, l.resp_hypopnea})
                resp_abs += std::abs(p[static_cast<size_t>(idx)] - t[static_cast<size_t>(idx)]);
            if (t[static_cast<size_t>(l.resp_flag)] >= 0.5) {
                resp_bw_abs += std::abs(p[static_cast<size_t>(l.resp_x)] -
                                        t[static_cast<size_t>(l.resp_x)]) +
                               std::abs(p[static_cast<size_t>(l.resp_w)] -
                                        t[static_cast<size_t>(l.resp_w)]);
                resp_bw_n += 2;
            }
        }
    }

    rep.stage.mae_c = stage_abs / static_cast<double>(5 * n);
    if (l.arousal_flag >= 0) {
        FamilyMae fm;
        fm.mae_c = arousal_abs / static_cast<double>(n);
        if (arousal_bw_n > 0) fm.mae_bw = arousal_bw_abs / static_cast<double>(arousal_bw_n);
        rep.arousal = fm;
    }
    if (l.resp_flag >= 0) {
        FamilyMae fm;
        fm.mae_c = resp_abs / static_cast<double>(3 * n);
        if (resp_bw_n > 0) fm.mae_bw = resp_bw_abs / static_cast<double>(resp_bw_n);
        rep.respiratory = fm;
    }
    rep.global_mae = global_abs / (static_cast<double>(n) * static_cast<double>(vlen));
    return rep;
}

MetricReport score_run(std::span<const TargetVector> preds, std::span<const TargetVector> targets,
                       Assembly assembly) {
    const VectorLayout l = layout_for(assembly);
    const auto vlen = static_cast<size_t>(l.length);
    check_aligned(preds, targets, vlen, "score_run");

    MetricReport rep;
    rep.windows = preds.size();

    FamilyMetrics stage;
    stage.name = "stage";
    stage.cm = ConfusionMatrix(5);
    FamilyMetrics arousal;
    arousal.name = "arousal";
    arousal.cm = ConfusionMatrix(2);
    FamilyMetrics resp;
    resp.name = "respiratory";
    resp.cm = ConfusionMatrix(3);

    for (size_t i = 0; i < preds.size(); ++i) {
        const auto& p = preds[i];
        const auto& t = targets[i];
        stage.cm.at(stage_argmax(t, l.stage), stage_argmax(p, l.stage)) += 1;
        if (l.arousal_flag >= 0) {
            int tp = t[static_cast<size_t>(l.arousal_flag)] >= 0.5 ? 1 : 0;
            int pp = p[static_cast<size_t>(l.arousal_flag)] >= 0.5 ? 1 : 0;
            arousal.cm.at(tp, pp) += 1;
        }
        if (l.resp_flag >= 0) {
            int tc = 0, pc = 0;
            if (t[static_cast<size_t>(l.resp_flag)] >= 0.5)
                tc = t[static_cast<size_t>(l.resp_apnea)] >= t[static_cast<size_t>(l.resp_hypopnea)]
                         ? 1
                         : 2;
            if (p[static_cast<size_t>(l.resp_flag)] >= 0.5)
                pc = p[static_cast<size_t>(l.resp_apnea)] >= p[static_cast<size_t>(l.resp_hypopnea)]
                         ? 1
                         : 2;
            resp.cm.at(tc, pc) += 1;
        }
    }

    MaeReport mae = mae_components(preds, targets, assembly);

    auto finish = [&](FamilyMetrics& f, const FamilyMae& fm) {
        f.kappa = cohen_kappa(f.cm);
        f.f1 = f1_scores(f.cm);
        f.mae_c = fm.mae_c;
        f.mae_bw = fm.mae_bw;
        f.support.resize(static_cast<size_t>(f.cm.k));
        for (int r = 0; r < f.cm.k; ++r) {
            int64_t s = 0;
            for (int c = 0; c < f.cm.k; ++c) s += f.cm.at(r, c);
            f.support[static_cast<size_t>(r)] = s;
        }
    };

    finish(stage, mae.stage);
    rep.families.push_back(std::move(stage));
    if (l.arousal_flag >= 0) {
        finish(arousal, *mae.arousal);
        rep.families.push_back(std::move(arousal));
    }
    if (l.resp_flag >= 0) {
        finish(resp, *mae.respiratory);
        rep.families.push_back(std::move(resp));
    }
    rep.global_mae = mae.global_mae;
    return rep;
}

std::string report_to_json(const MetricReport& report, const ReportMeta& meta) {
    json j;
    j["version"] = 1;
    j["meta"] = {{"channels", meta.channels},
                 {"assembly", assembly_name(meta.assembly)},
                 {"seeds",
                  {{"model", meta.model_seed},
                   {"dataset", meta.dataset_seed},
                   {"shuffle", meta.shuffle_seed}}},
                 {"dataset_hash", meta.dataset_hash},
                 {"unit", "30s window"},
                 {"f1_average", "macro"}};
    j["windows"] = report.windows;
    j["global_mae"] = report.global_mae;
    j["families"] = json::object();
    for (const auto& f : report.families) {
        json fj;
        fj["kappa"] = f.kappa;
        fj["f1_macro"] = f.f1.macro;
        fj["per_class_f1"] = f.f1.per_class;
        fj["mae_c"] = f.mae_c;
        if (f.mae_bw)
            fj["mae_bw"] = *f.mae_bw;
        else
            fj["mae_bw"] = nullptr;
        fj["support"] = f.support;
        fj["confusion"] = f.cm.counts;
        j["families"][f.name] = fj;
    }
    return j.dump(2) + "\n";
}

}  // namespace sleepdet
