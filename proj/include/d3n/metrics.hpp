#pragma once

#include <functional>
#include <map>
#include <optional>
#include <vector>

#include "d3n/detector.hpp"

namespace d3n {

/// area(a ∩ b) / area(a ∪ b); 0 for degenerate boxes.
double iou(const BoundingBox& a, const BoundingBox& b);

struct ScoredDetection {
    int image_id = 0;
    BoundingBox box;
    double score = 0;
};

struct GroundTruthBox {
    int image_id = 0;
    BoundingBox box;
};

/// All-point interpolated AP (area under the monotone precision envelope)
/// for one class. Greedy matching by descending score; each ground truth
/// matches at most once. nullopt when the class has no ground truths.
std::optional<double> average_precision(const std::vector<ScoredDetection>& predictions,
                                        const std::vector<GroundTruthBox>& ground_truths,
                                        double iou_threshold = 0.5);

struct ClassCounts {
    int tp = 0, fp = 0, fn = 0;
};

struct EvalResult {
    std::map<int, double> per_class_ap;  // classes with >= 1 ground truth
    double map50 = 0;
    double map5095 = 0;  // mean over IoU thresholds 0.5:0.05:0.95
    std::map<int, ClassCounts> counts;  // at the 0.5 matching threshold
};

using InferenceFn = std::function<std::vector<Prediction>(const LabeledImage&)>;

/// Runs inference over the split and scores mAP@0.5 (plus the 0.5:0.95
/// sweep). Deterministic given a deterministic inference function.
EvalResult evaluate(const InferenceFn& infer, const std::vector<LabeledImage>& split, int num_classes);

void write_eval_report(const EvalResult& result, const std::filesystem::path& path);

}  // namespace d3n
