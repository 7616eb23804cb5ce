#include "d3n/metrics.hpp"

#include <algorithm>
#include <fstream>

#include "d3n/errors.hpp"
#include "d3n/vendor_json.hpp"

namespace d3n {

double iou(const BoundingBox& a, const BoundingBox& b) { return iou_xywh(a, b); }

namespace {

/// Greedy matching, returns per-prediction TP flags (score-descending order)
/// plus the total ground-truth count.
struct MatchOutcome {
    std::vector<bool> tp;  // aligned with score-sorted predictions
    std::size_t num_gt = 0;
};

MatchOutcome match(const std::vector<ScoredDetection>& predictions,
                   const std::vector<GroundTruthBox>& ground_truths, double iou_threshold) {
    std::vector<std::size_t> order(predictions.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return predictions[a].score > predictions[b].score;
    });

    std::vector<bool> gt_used(ground_truths.size(), false);
    MatchOutcome out;
    out.num_gt = ground_truths.size();
    for (auto idx : order) {
        const auto& p = predictions[idx];
        double best_iou = 0;
        std::size_t best_gt = ground_truths.size();
        for (std::size_t g = 0; g < ground_truths.size(); ++g) {
            if (gt_used[g] || ground_truths[g].image_id != p.image_id) continue;
            const double v = iou_xywh(p.box, ground_truths[g].box);
            if (v > best_iou) {
                best_iou = v;
                best_gt = g;
            }
        }
        const bool is_tp = best_gt < ground_truths.size() && best_iou >= iou_threshold;
        if (is_tp) gt_used[best_gt] = true;
        out.tp.push_back(is_tp);
    }
    return out;
}

}  // namespace

std::optional<double> average_precision(const std::vector<ScoredDetection>& predictions,
                                        const std::vector<GroundTruthBox>& ground_truths,
                                        double iou_threshold) {
    if (ground_truths.empty()) return std::nullopt;
    if (predictions.empty()) return 0.0;

    auto outcome = match(predictions, ground_truths, iou_threshold);

    std::vector<double> precision, recall;
    int tp = 0, fp = 0;
    for (bool is_tp : outcome.tp) {
        is_tp ? ++tp : ++fp;
        precision.push_back(static_cast<double>(tp) / (tp + fp));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(outcome.num_gt));
    }
    // monotone precision envelope, integrated over recall (all-point AP)
    for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i)
        precision[i] = std::max(precision[i], precision[i + 1]);
    double ap = 0, prev_recall = 0;
    for (std::size_t i = 0; i < precision.size(); ++i) {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    return ap;
}

EvalResult evaluate(const InferenceFn& infer, const std::vector<LabeledImage>& split, int num_classes) {
    if (split.empty()) throw InvalidArgument("evaluate: empty split");

    std::map<int, std::vector<ScoredDetection>> preds_by_class;
    std::map<int, std::vector<GroundTruthBox>> gts_by_class;
    for (int img = 0; img < static_cast<int>(split.size()); ++img) {
        for (const auto& p : infer(split[static_cast<std::size_t>(img)]))
            preds_by_class[p.box.cls].push_back({img, p.box, p.score()});
        for (const auto& b : split[static_cast<std::size_t>(img)].annotation.boxes)
            gts_by_class[b.cls].push_back({img, b});
    }

    EvalResult result;
    double ap_sum = 0;
    int ap_classes = 0;
    double sweep_sum = 0;
    int sweep_terms = 0;
    for (int cls = 0; cls < num_classes; ++cls) {
        const auto& preds = preds_by_class[cls];
        const auto& gts = gts_by_class[cls];
        auto ap50 = average_precision(preds, gts, 0.5);
        if (ap50) {
            result.per_class_ap[cls] = *ap50;
            ap_sum += *ap50;
            ++ap_classes;
            for (int k = 0; k < 10; ++k) {
                auto ap = average_precision(preds, gts, 0.5 + 0.05 * k);
                sweep_sum += ap.value_or(0.0);
                ++sweep_terms;
            }
        }
        // counts at IoU 0.5
        auto outcome = match(preds, gts, 0.5);
        ClassCounts counts;
        for (bool t : outcome.tp) t ? ++counts.tp : ++counts.fp;
        counts.fn = static_cast<int>(outcome.num_gt) - counts.tp;
        if (!gts.empty() || !preds.empty()) result.counts[cls] = counts;
    }
    result.map50 = ap_classes ? ap_sum / ap_classes : 0.0;
    result.map5095 = sweep_terms ? sweep_sum / sweep_terms : 0.0;
    return result;
}

void write_eval_report(const EvalResult& result, const std::filesystem::path& path) {
    nlohmann::json per_class = nlohmann::json::object();
    for (const auto& [cls, ap] : result.per_class_ap) per_class[std::to_string(cls)] = ap;
    nlohmann::json counts = nlohmann::json::object();
    for (const auto& [cls, c] : result.counts)
        counts[std::to_string(cls)] = {{"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}};
    nlohmann::json j{{"per_class_ap", per_class},
                     {"map50", result.map50},
                     {"map5095", result.map5095},
                     {"counts", counts}};
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write eval report: " + path.string());
    out << j.dump(2) << "\n";
}

}  // namespace d3n
