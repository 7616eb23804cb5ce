#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <vector>

#include <torch/torch.h>

#include "d3n/fusion.hpp"
#include "d3n/image.hpp"
#include "d3n/repository.hpp"
#include "d3n/resvae.hpp"
#include "d3n/vendor_json.hpp"

namespace d3n {

/// Center/size box, normalized to [0,1].
struct BoundingBox {
    double x = 0, y = 0, w = 0, h = 0;
    int cls = 0;
};

struct Annotation {
    Sha256 image_key{};
    std::vector<BoundingBox> boxes;
};

struct Prediction {
    BoundingBox box;
    double objectness = 0;
    std::vector<double> class_probs;
    double score() const;
};

struct LabeledImage {
    Image image;
    Annotation annotation;
    std::string path;
};

struct DetectorConfig {
    int input_size = 256;  // divisible by 32
    int num_classes = 3;
    std::vector<int> backbone_widths{32, 64, 128, 256};
    int fusion_width = 128;
    // gt boxes with max(w,h) below these go to stride 8 / 16; rest stride 32
    double level_split_small = 0.15;
    double level_split_mid = 0.30;

    bool operator==(const DetectorConfig&) const = default;
    void validate() const;
    /// Grid size at fpn level (0 = coarsest, stride 32).
    int grid(int level) const { return input_size / stride(level); }
    static int stride(int level) { return 32 >> level; }
};

/// Multi-scale features at strides {32,16,8} (level 0 coarsest), all at
/// the common fusion width.
struct FpnFeatures {
    std::array<torch::Tensor, 3> levels;  // each [W_fuse, G, G]
};

/// Per-level raw head output [4 + 1 + num_classes, G, G]:
/// box regressands, objectness logit, class logits.
using RawPredictions = std::array<torch::Tensor, 3>;

struct DetectionLoss {
    torch::Tensor obj, cls, box;
    /// obj + cls + box (unweighted, matching the head's loss layout).
    torch::Tensor total() const { return obj + cls + box; }
};

struct LossWeights {
    double obj = 1.0, cls = 1.0, box = 5.0;
};

/// Minimal one-stage detector: residual backbone, top-down FPN, shared head.
class DetectorModelImpl : public torch::nn::Module {
   public:
    explicit DetectorModelImpl(const DetectorConfig& config);

    /// image: [1,S,S] (single image) with S == config.input_size.
    FpnFeatures backbone_fpn(const torch::Tensor& image);
    RawPredictions detect_head(const FpnFeatures& features);
    RawPredictions forward(const torch::Tensor& image);

    const DetectorConfig& config() const { return config_; }

   private:
    DetectorConfig config_;
    torch::nn::Sequential stem_{nullptr};
    std::vector<torch::nn::Sequential> stages_;
    std::vector<torch::nn::Conv2d> laterals_;
    std::vector<torch::nn::Conv2d> smooths_;
    torch::nn::Sequential head_{nullptr};
};
TORCH_MODULE(DetectorModel);

/// Supplies the latent feature records for an image key. Repository-backed
/// during training; the harness provides a live-extraction implementation
/// for evaluating the hybrid on held-out images.
class FeatureProvider {
   public:
    virtual ~FeatureProvider() = default;
    virtual std::vector<const FeatureRecord*> get(const FeatureKey& key) = 0;
};

class RepositoryFeatureProvider : public FeatureProvider {
   public:
    explicit RepositoryFeatureProvider(const FeatureRepository& repo) : repo_(repo) {}
    std::vector<const FeatureRecord*> get(const FeatureKey& key) override { return repo_.query(key); }

   private:
    const FeatureRepository& repo_;
};

/// Detector plus the optional diffusion-feature fusion path
/// (feature mapping -> noise filter -> dynamic cross-fusion per level).
class HybridModelImpl : public torch::nn::Module {
   public:
    /// Baseline (no fusion).
    explicit HybridModelImpl(const DetectorConfig& config);
    /// Fusion-enabled. `tap_channels` maps scale level -> decoded channels.
    HybridModelImpl(const DetectorConfig& config, const std::map<int, int>& tap_channels,
                    const std::vector<int>& timesteps, const AttentionConfig& attention,
                    const FusionToggles& toggles);

    void set_decoders(std::map<int, ResVae> decoders);  // frozen, not trained

    /// records may be null only when fusion is disabled.
    RawPredictions forward(const torch::Tensor& image, const std::vector<const FeatureRecord*>* records);

    bool fusion_enabled() const { return fusion_enabled_; }
    DetectorModel& detector() { return det_; }
    std::map<int, ResVae>& decoders() { return decoders_; }
    const DetectorConfig& config() const { return det_->config(); }
    std::array<DynamicCrossFusion, 3>& fusion_blocks() { return fusion_; }
    void freeze_branch_weights();

    /// Fusion metadata needed to rebuild the architecture from a checkpoint.
    nlohmann::json checkpoint_extra = nlohmann::json::object();

   private:
    DetectorModel det_{nullptr};
    bool fusion_enabled_ = false;
    FeatureMapper mapper_{nullptr};
    std::array<NoiseFilter, 3> filters_{nullptr, nullptr, nullptr};
    std::array<DynamicCrossFusion, 3> fusion_{nullptr, nullptr, nullptr};
    std::map<int, ResVae> decoders_;
};
TORCH_MODULE(HybridModel);

// --- box geometry (shared with metrics/distillation) ---
double iou_xywh(const BoundingBox& a, const BoundingBox& b);
/// Differentiable GIoU between [...,4] (x,y,w,h) tensors, in [-1,1].
torch::Tensor giou(const torch::Tensor& a, const torch::Tensor& b);

/// Target assignment: the cell containing the box center, at the level
/// whose stride bounds the box scale.
struct CellAssignment {
    int level, row, col;
    BoundingBox gt;
};
std::vector<CellAssignment> assign_targets(const Annotation& ann, const DetectorConfig& config);

/// Decodes the 4 raw box regressands of one cell.
torch::Tensor decode_cell_box(const torch::Tensor& regressands, int level, int row, int col,
                              const DetectorConfig& config);
/// Inverse of decode_cell_box on its domain (interior of the cell, w/h in (0,1)).
std::array<double, 4> encode_cell_box(const BoundingBox& box, int level, int row, int col,
                                      const DetectorConfig& config);

/// BCE objectness against detached-IoU targets, BCE class loss and
/// 1-GIoU box loss on positive cells.
DetectionLoss detection_loss(const RawPredictions& raw, const Annotation& ann,
                             const DetectorConfig& config);

std::vector<Prediction> decode_predictions(const RawPredictions& raw, const DetectorConfig& config,
                                           double conf_threshold, double nms_iou);

struct DetectorTrainSettings {
    int epochs = 30;
    int batch_size = 8;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    LossWeights loss_weights;
    std::filesystem::path branch_weight_csv;  // written when fusion is on
    bool freeze_branch_weights = false;       // keeps the fusion path inert
};

struct DetectorTrainResult {
    HybridModel model{nullptr};
    std::vector<double> epoch_losses;
};

/// Trains baseline (provider == nullptr) or hybrid. Every training image
/// key must resolve through the provider; misses propagate (KeyNotFound).
DetectorTrainResult train_detector(const std::vector<LabeledImage>& dataset, HybridModel model,
                                   FeatureProvider* provider, const DetectorTrainSettings& settings);

/// JSON digest of the module's parameter names and shapes; two models
/// with equal signatures have structurally identical inference graphs.
std::string architecture_signature(const torch::nn::Module& module);

void save_detector(const std::filesystem::path& path, HybridModel& model,
                   const std::string& vae_checkpoint_ref = {});
struct LoadedDetector {
    HybridModel model{nullptr};
    std::string vae_checkpoint_ref;
};
LoadedDetector load_detector(const std::filesystem::path& path);

}  // namespace d3n
