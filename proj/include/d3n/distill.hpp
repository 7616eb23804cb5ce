#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "d3n/detector.hpp"

namespace d3n {

struct DistillConfig {
    double lambda_balance = 0.5;
    double temperature = 20.0;
    // distance for the class logit matching is L2 (the only supported choice)

    void validate() const;
};

/// Distillation loss per head pathway: ground-truth term plus the
/// lambda-scaled teacher term; the class and box teacher terms are
/// additionally scaled per cell by the teacher objectness.
struct DistillLoss {
    DetectionLoss gt;                                 // plain detection loss vs labels
    torch::Tensor obj_teacher, cls_teacher, box_teacher;  // lambda/objectness scaled

    torch::Tensor obj() const { return gt.obj + obj_teacher; }
    torch::Tensor cls() const { return gt.cls + cls_teacher; }
    torch::Tensor box() const { return gt.box + box_teacher; }
};

/// Differentiable decode of every cell of one level: [G*G, 4] (x,y,w,h).
torch::Tensor decode_all_cells(const torch::Tensor& level_raw, int level, const DetectorConfig& config);

/// Teacher raw predictions must be detached (they are detached again
/// defensively). When lambda is 0 the result is exactly the plain
/// detection loss: teacher terms are hard zeros and never computed.
DistillLoss distill_losses(const RawPredictions& student_raw, const RawPredictions& teacher_raw,
                           const Annotation& ann, const DistillConfig& config,
                           const DetectorConfig& det_config);

struct StudentTrainSettings {
    int epochs = 100;
    int batch_size = 16;
    double lr = 0.01;
    std::uint64_t seed = 0;
    LossWeights loss_weights;
    std::filesystem::path report_csv;  // epoch,loss_obj,loss_cls,loss_box,val_mAP50
    int eval_every = 0;                // 0 disables per-epoch validation mAP
};

struct StudentTrainResult {
    HybridModel student{nullptr};
    std::vector<double> epoch_losses;
};

/// Trains a plain-baseline student against a frozen hybrid teacher.
/// The teacher consumes the augmented items (image + latent records);
/// the student and all evaluation paths consume images only.
StudentTrainResult train_student(const std::vector<LabeledImage>& dataset, HybridModel teacher,
                                 FeatureProvider* teacher_provider, const DetectorConfig& student_config,
                                 const DistillConfig& config, const StudentTrainSettings& settings,
                                 const std::vector<LabeledImage>* val_split = nullptr);

}  // namespace d3n
