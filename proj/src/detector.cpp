#include "d3n/detector.hpp"

#include <algorithm>
#include <cmath>

#include "d3n/checkpoint.hpp"
#include "d3n/errors.hpp"

namespace d3n {

namespace {

constexpr const char* kDetectorMagic = "D3ND";

int group_count(int channels) {
    for (int g = 8; g > 1; --g)
        if (channels % g == 0) return g;
    return 1;
}

torch::nn::Sequential residual_stage(int in, int out) {
    using namespace torch::nn;
    // downsample conv then one residual unit
    struct ResUnitImpl : Module {
        Conv2d c1{nullptr}, c2{nullptr};
        GroupNorm n1{nullptr}, n2{nullptr};
        explicit ResUnitImpl(int ch) {
            c1 = register_module("c1", Conv2d(Conv2dOptions(ch, ch, 3).padding(1)));
            n1 = register_module("n1", GroupNorm(group_count(ch), ch));
            c2 = register_module("c2", Conv2d(Conv2dOptions(ch, ch, 3).padding(1)));
            n2 = register_module("n2", GroupNorm(group_count(ch), ch));
        }
        torch::Tensor forward(const torch::Tensor& x) {
            auto h = torch::silu(n1(c1(x)));
            return x + n2(c2(h));
        }
    };
    Sequential s;
    s->push_back(Conv2d(Conv2dOptions(in, out, 3).stride(2).padding(1)));
    s->push_back(GroupNorm(group_count(out), out));
    s->push_back(Functional(static_cast<torch::Tensor (*)(const torch::Tensor&)>(torch::silu)));
    s->push_back(ModuleHolder<ResUnitImpl>(out));
    return s;
}

double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace

double Prediction::score() const {
    double best = 0;
    for (double p : class_probs) best = std::max(best, p);
    return objectness * best;
}

void DetectorConfig::validate() const {
    if (input_size <= 0 || input_size % 32 != 0)
        throw InvalidArgument("detector input_size must be a positive multiple of 32");
    if (num_classes <= 0) throw InvalidArgument("num_classes must be positive");
    if (backbone_widths.size() != 4) throw InvalidArgument("backbone_widths must have 4 entries");
    if (fusion_width <= 0) throw InvalidArgument("fusion_width must be positive");
}

DetectorModelImpl::DetectorModelImpl(const DetectorConfig& config) : config_(config) {
    config_.validate();
    using namespace torch::nn;
    const auto& w = config_.backbone_widths;

    Sequential stem;
    stem->push_back(Conv2d(Conv2dOptions(1, w[0], 3).stride(2).padding(1)));  // /2
    stem->push_back(GroupNorm(group_count(w[0]), w[0]));
    stem->push_back(Functional(static_cast<torch::Tensor (*)(const torch::Tensor&)>(torch::silu)));
    stem_ = register_module("stem", stem);

    // stages to /4, /8, /16, /32; FPN consumes the last three
    stages_.push_back(register_module("stage0", residual_stage(w[0], w[0])));
    stages_.push_back(register_module("stage1", residual_stage(w[0], w[1])));
    stages_.push_back(register_module("stage2", residual_stage(w[1], w[2])));
    stages_.push_back(register_module("stage3", residual_stage(w[2], w[3])));

    const int wf = config_.fusion_width;
    const int in_ch[3] = {w[3], w[2], w[1]};  // coarse -> fine
    for (int l = 0; l < 3; ++l) {
        laterals_.push_back(register_module("lateral" + std::to_string(l),
                                            Conv2d(Conv2dOptions(in_ch[l], wf, 1))));
        smooths_.push_back(register_module("smooth" + std::to_string(l),
                                           Conv2d(Conv2dOptions(wf, wf, 3).padding(1))));
    }

    Sequential head;
    head->push_back(Conv2d(Conv2dOptions(wf, wf, 3).padding(1)));
    head->push_back(GroupNorm(group_count(wf), wf));
    head->push_back(Functional(static_cast<torch::Tensor (*)(const torch::Tensor&)>(torch::silu)));
    head->push_back(Conv2d(Conv2dOptions(wf, 5 + config_.num_classes, 1)));
    head_ = register_module("head", head);
}

FpnFeatures DetectorModelImpl::backbone_fpn(const torch::Tensor& image) {
    if (image.size(-1) != config_.input_size || image.size(-2) != config_.input_size)
        throw InvalidArgument("backbone_fpn: image size does not match config.input_size");
    auto x = image.dim() == 3 ? image.unsqueeze(0) : image;

    auto h = stem_->forward(x);
    h = stages_[0]->forward(h);            // /4
    auto c3 = stages_[1]->forward(h);      // /8
    auto c4 = stages_[2]->forward(c3);     // /16
    auto c5 = stages_[3]->forward(c4);     // /32

    auto p5 = laterals_[0](c5);
    auto up5 = torch::nn::functional::interpolate(
        p5, torch::nn::functional::InterpolateFuncOptions()
                .size(std::vector<std::int64_t>{c4.size(2), c4.size(3)})
                .mode(torch::kNearest));
    auto p4 = laterals_[1](c4) + up5;
    auto up4 = torch::nn::functional::interpolate(
        p4, torch::nn::functional::InterpolateFuncOptions()
                .size(std::vector<std::int64_t>{c3.size(2), c3.size(3)})
                .mode(torch::kNearest));
    auto p3 = laterals_[2](c3) + up4;

    FpnFeatures out;
    out.levels[0] = smooths_[0](p5).squeeze(0);
    out.levels[1] = smooths_[1](p4).squeeze(0);
    out.levels[2] = smooths_[2](p3).squeeze(0);
    return out;
}

RawPredictions DetectorModelImpl::detect_head(const FpnFeatures& features) {
    RawPredictions out;
    for (int l = 0; l < 3; ++l) {
        if (features.levels[l].size(0) != config_.fusion_width)
            throw InvalidArgument("detect_head: feature width mismatch with head");
        out[l] = head_->forward(features.levels[l].unsqueeze(0)).squeeze(0);
    }
    return out;
}

RawPredictions DetectorModelImpl::forward(const torch::Tensor& image) {
    return detect_head(backbone_fpn(image));
}

HybridModelImpl::HybridModelImpl(const DetectorConfig& config) {
    det_ = register_module("det", DetectorModel(config));
}

HybridModelImpl::HybridModelImpl(const DetectorConfig& config, const std::map<int, int>& tap_channels,
                                 const std::vector<int>& timesteps, const AttentionConfig& attention,
                                 const FusionToggles& toggles) {
    det_ = register_module("det", DetectorModel(config));
    fusion_enabled_ = true;
    if (tap_channels.size() != 3)
        throw InvalidArgument("hybrid model expects tap channels for 3 scale levels");
    AttentionConfig att = attention;
    att.model_width = config.fusion_width;
    mapper_ = register_module("mapper", FeatureMapper(tap_channels, timesteps, config.fusion_width));
    for (int l = 0; l < 3; ++l) {
        const int g = config.grid(l);
        filters_[l] = register_module("filter" + std::to_string(l), NoiseFilter(g, g));
        fusion_[l] = register_module("fusion" + std::to_string(l), DynamicCrossFusion(att, toggles));
    }

    nlohmann::json taps_json = nlohmann::json::object();
    for (const auto& [level, ch] : tap_channels) taps_json[std::to_string(level)] = ch;
    checkpoint_extra = {{"tap_channels", taps_json},
                        {"timesteps", timesteps},
                        {"attention_heads", att.heads},
                        {"dual_self_attention", toggles.dual_self_attention},
                        {"weighted_sum", toggles.weighted_sum},
                        {"residual", toggles.residual},
                        {"norm", toggles.norm}};
}

void HybridModelImpl::set_decoders(std::map<int, ResVae> decoders) {
    for (auto& [level, dec] : decoders) {
        dec->eval();
        for (auto& p : dec->parameters()) p.set_requires_grad(false);
    }
    decoders_ = std::move(decoders);
}

void HybridModelImpl::freeze_branch_weights() {
    for (auto& f : fusion_)
        if (f) f->freeze_branch_weights();
}

RawPredictions HybridModelImpl::forward(const torch::Tensor& image,
                                        const std::vector<const FeatureRecord*>* records) {
    auto feats = det_->backbone_fpn(image);
    if (fusion_enabled_) {
        if (!records) throw StateError("hybrid forward requires feature records");
        if (decoders_.empty()) throw StateError("hybrid model has no decoders set");
        std::map<int, std::pair<int, int>> target_hw;
        for (int l = 0; l < 3; ++l)
            target_hw[l] = {static_cast<int>(feats.levels[l].size(1)),
                            static_cast<int>(feats.levels[l].size(2))};
        auto mapped = mapper_->forward(*records, decoders_, target_hw);
        for (int l = 0; l < 3; ++l) {
            auto filtered = filters_[l]->forward(mapped[l]);
            feats.levels[l] = fusion_[l]->forward(feats.levels[l], filtered);
        }
    }
    return det_->detect_head(feats);
}

double iou_xywh(const BoundingBox& a, const BoundingBox& b) {
    if (a.w <= 0 || a.h <= 0 || b.w <= 0 || b.h <= 0) return 0.0;
    const double ax0 = a.x - a.w / 2, ax1 = a.x + a.w / 2, ay0 = a.y - a.h / 2, ay1 = a.y + a.h / 2;
    const double bx0 = b.x - b.w / 2, bx1 = b.x + b.w / 2, by0 = b.y - b.h / 2, by1 = b.y + b.h / 2;
    const double iw = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
    const double ih = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
    const double inter = iw * ih;
    const double uni = a.w * a.h + b.w * b.h - inter;
    return uni > 0 ? inter / uni : 0.0;
}

torch::Tensor giou(const torch::Tensor& a, const torch::Tensor& b) {
    auto ax0 = a.select(-1, 0) - a.select(-1, 2) / 2, ax1 = a.select(-1, 0) + a.select(-1, 2) / 2;
    auto ay0 = a.select(-1, 1) - a.select(-1, 3) / 2, ay1 = a.select(-1, 1) + a.select(-1, 3) / 2;
    auto bx0 = b.select(-1, 0) - b.select(-1, 2) / 2, bx1 = b.select(-1, 0) + b.select(-1, 2) / 2;
    auto by0 = b.select(-1, 1) - b.select(-1, 3) / 2, by1 = b.select(-1, 1) + b.select(-1, 3) / 2;

    auto iw = (torch::min(ax1, bx1) - torch::max(ax0, bx0)).clamp_min(0);
    auto ih = (torch::min(ay1, by1) - torch::max(ay0, by0)).clamp_min(0);
    auto inter = iw * ih;
    auto area_a = (ax1 - ax0) * (ay1 - ay0);
    auto area_b = (bx1 - bx0) * (by1 - by0);
    auto uni = area_a + area_b - inter;
    auto iou = inter / uni.clamp_min(1e-12);

    auto cw = torch::max(ax1, bx1) - torch::min(ax0, bx0);
    auto ch = torch::max(ay1, by1) - torch::min(ay0, by0);
    auto enclosing = (cw * ch).clamp_min(1e-12);
    return iou - (enclosing - uni) / enclosing;
}

std::vector<CellAssignment> assign_targets(const Annotation& ann, const DetectorConfig& config) {
    std::vector<CellAssignment> out;
    for (const auto& box : ann.boxes) {
        if (box.cls < 0 || box.cls >= config.num_classes)
            throw InvalidArgument("annotation class index out of range");
        const double scale = std::max(box.w, box.h);
        int level;  // 0 coarsest (stride 32)
        if (scale < config.level_split_small)
            level = 2;
        else if (scale < config.level_split_mid)
            level = 1;
        else
            level = 0;
        const int g = config.grid(level);
        const int col = std::clamp(static_cast<int>(box.x * g), 0, g - 1);
        const int row = std::clamp(static_cast<int>(box.y * g), 0, g - 1);
        out.push_back({level, row, col, box});
    }
    return out;
}

torch::Tensor decode_cell_box(const torch::Tensor& regressands, int level, int row, int col,
                              const DetectorConfig& config) {
    const double g = config.grid(level);
    auto s = torch::sigmoid(regressands);
    auto x = (col + s.select(-1, 0)) / g;
    auto y = (row + s.select(-1, 1)) / g;
    return torch::stack({x, y, s.select(-1, 2), s.select(-1, 3)}, -1);
}

std::array<double, 4> encode_cell_box(const BoundingBox& box, int level, int row, int col,
                                      const DetectorConfig& config) {
    const double g = config.grid(level);
    const double fx = box.x * g - col, fy = box.y * g - row;
    if (fx <= 0 || fx >= 1 || fy <= 0 || fy >= 1 || box.w <= 0 || box.w >= 1 || box.h <= 0 || box.h >= 1)
        throw InvalidArgument("encode_cell_box: box outside the encodable domain of the cell");
    return {logit(fx), logit(fy), logit(box.w), logit(box.h)};
}

DetectionLoss detection_loss(const RawPredictions& raw, const Annotation& ann,
                             const DetectorConfig& config) {
    const int C = config.num_classes;
    auto assignments = assign_targets(ann, config);

    // last write wins on cell collisions; deterministic in annotation order
    // for obj targets, but the per-positive losses below are summed over
    // assignments sorted by (level,row,col,cls) so the reduction is
    // permutation-invariant in annotation order.
    std::sort(assignments.begin(), assignments.end(), [](const CellAssignment& a, const CellAssignment& b) {
        return std::tie(a.level, a.row, a.col, a.gt.cls, a.gt.x, a.gt.y, a.gt.w, a.gt.h) <
               std::tie(b.level, b.row, b.col, b.gt.cls, b.gt.x, b.gt.y, b.gt.w, b.gt.h);
    });
    // keep one assignment per cell (the sort makes the survivor deterministic)
    std::map<std::tuple<int, int, int>, CellAssignment> cells;
    for (const auto& a : assignments) cells[{a.level, a.row, a.col}] = a;

    std::vector<torch::Tensor> obj_logits, obj_targets;
    std::vector<torch::Tensor> cls_logit_rows, box_rows, gt_rows;
    std::vector<torch::Tensor> cls_target_rows;

    for (int l = 0; l < 3; ++l) {
        const auto g = raw[l].size(1);
        auto obj = raw[l][4].reshape({g * g});
        auto tgt = torch::zeros({g * g});
        auto tgt_a = tgt.accessor<float, 1>();
        for (const auto& [key, a] : cells) {
            if (a.level != l) continue;
            auto reg = raw[l].narrow(0, 0, 4).permute({1, 2, 0})[a.row][a.col];  // [4]
            auto pred_box = decode_cell_box(reg, l, a.row, a.col, config);
            auto gt_box = torch::tensor({a.gt.x, a.gt.y, a.gt.w, a.gt.h}, torch::kFloat32);

            // objectness target = IoU of the decoded prediction with its gt,
            // detached from the gradient
            BoundingBox pb{pred_box[0].item<double>(), pred_box[1].item<double>(),
                           pred_box[2].item<double>(), pred_box[3].item<double>(), a.gt.cls};
            tgt_a[a.row * g + a.col] = static_cast<float>(std::max(0.0, iou_xywh(pb, a.gt)));

            cls_logit_rows.push_back(raw[l].narrow(0, 5, C).permute({1, 2, 0})[a.row][a.col]);
            auto one_hot = torch::zeros({C});
            one_hot[a.gt.cls] = 1.0;
            cls_target_rows.push_back(one_hot);
            box_rows.push_back(pred_box);
            gt_rows.push_back(gt_box);
        }
        obj_logits.push_back(obj);
        obj_targets.push_back(tgt);
    }

    DetectionLoss loss;
    loss.obj = torch::binary_cross_entropy_with_logits(torch::cat(obj_logits), torch::cat(obj_targets));
    if (box_rows.empty()) {
        loss.cls = torch::zeros({});
        loss.box = torch::zeros({});
    } else {
        loss.cls = torch::binary_cross_entropy_with_logits(torch::stack(cls_logit_rows),
                                                           torch::stack(cls_target_rows));
        loss.box = (1.0 - giou(torch::stack(box_rows), torch::stack(gt_rows))).mean();
    }
    return loss;
}

std::vector<Prediction> decode_predictions(const RawPredictions& raw, const DetectorConfig& config,
                                           double conf_threshold, double nms_iou) {
    if (conf_threshold < 0 || conf_threshold > 1 || nms_iou < 0 || nms_iou > 1)
        throw InvalidArgument("decode_predictions: thresholds must lie in [0,1]");
    const int C = config.num_classes;

    std::vector<Prediction> candidates;
    for (int l = 0; l < 3; ++l) {
        const auto g = static_cast<int>(raw[l].size(1));
        auto obj = torch::sigmoid(raw[l][4]);
        auto cls = torch::sigmoid(raw[l].narrow(0, 5, C));
        auto sig = torch::sigmoid(raw[l].narrow(0, 0, 4));
        auto obj_a = obj.accessor<float, 2>();
        auto cls_a = cls.accessor<float, 3>();
        auto sig_a = sig.accessor<float, 3>();
        for (int r = 0; r < g; ++r) {
            for (int c = 0; c < g; ++c) {
                Prediction p;
                p.objectness = obj_a[r][c];
                p.class_probs.resize(C);
                int best = 0;
                for (int k = 0; k < C; ++k) {
                    p.class_probs[k] = cls_a[k][r][c];
                    if (p.class_probs[k] > p.class_probs[best]) best = k;
                }
                if (p.score() < conf_threshold) continue;
                p.box.x = (c + sig_a[0][r][c]) / g;
                p.box.y = (r + sig_a[1][r][c]) / g;
                p.box.w = sig_a[2][r][c];
                p.box.h = sig_a[3][r][c];
                p.box.cls = best;
                candidates.push_back(std::move(p));
            }
        }
    }

    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Prediction& a, const Prediction& b) { return a.score() > b.score(); });

    // greedy per-class suppression
    std::vector<Prediction> kept;
    for (const auto& cand : candidates) {
        bool suppressed = false;
        for (const auto& k : kept) {
            if (k.box.cls == cand.box.cls && iou_xywh(k.box, cand.box) > nms_iou) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(cand);
    }
    return kept;
}

DetectorTrainResult train_detector(const std::vector<LabeledImage>& dataset, HybridModel model,
                                   FeatureProvider* provider, const DetectorTrainSettings& settings) {
    if (dataset.empty()) throw InvalidArgument("train_detector: empty dataset");
    if (model->fusion_enabled() && !provider)
        throw InvalidArgument("train_detector: fusion-enabled model needs a feature provider");

    const auto& config = model->config();
    if (settings.freeze_branch_weights) model->freeze_branch_weights();

    // pre-resolve inputs; repository misses must surface before training
    struct Item {
        torch::Tensor image;
        Annotation ann;
        std::vector<const FeatureRecord*> records;
    };
    std::vector<Item> items;
    for (const auto& li : dataset) {
        Item it;
        it.image = to_tensor(rescale(li.image, config.input_size));
        it.ann = li.annotation;
        if (model->fusion_enabled())
            it.records = provider->get(FeatureKey{li.annotation.image_key, li.path});
        items.push_back(std::move(it));
    }

    std::vector<torch::Tensor> trainable;
    for (auto& p : model->parameters())
        if (p.requires_grad()) trainable.push_back(p);
    torch::optim::Adam opt(trainable, torch::optim::AdamOptions(settings.lr));
    auto gen = torch::make_generator<torch::CPUGeneratorImpl>(settings.seed ^ 0xdecafULL);

    model->train();
    DetectorTrainResult result;
    result.model = model;
    const auto n = static_cast<std::int64_t>(items.size());
    for (int epoch = 0; epoch < settings.epochs; ++epoch) {
        auto perm = torch::randperm(n, gen, torch::kLong);
        double epoch_loss = 0;
        int batches = 0;
        for (std::int64_t off = 0; off < n; off += settings.batch_size) {
            const auto end = std::min<std::int64_t>(off + settings.batch_size, n);
            opt.zero_grad();
            torch::Tensor batch_loss = torch::zeros({});
            for (std::int64_t i = off; i < end; ++i) {
                auto& it = items[static_cast<std::size_t>(perm[i].item<std::int64_t>())];
                auto raw = model->forward(it.image, model->fusion_enabled() ? &it.records : nullptr);
                auto loss = detection_loss(raw, it.ann, config);
                batch_loss = batch_loss + settings.loss_weights.obj * loss.obj +
                             settings.loss_weights.cls * loss.cls + settings.loss_weights.box * loss.box;
            }
            batch_loss = batch_loss / static_cast<double>(end - off);
            const double lv = batch_loss.item<double>();
            if (!std::isfinite(lv))
                throw TrainingFailure("non-finite detector loss at epoch " + std::to_string(epoch));
            batch_loss.backward();
            opt.step();
            epoch_loss += lv;
            ++batches;
        }
        result.epoch_losses.push_back(epoch_loss / std::max(batches, 1));
        if (model->fusion_enabled() && !settings.branch_weight_csv.empty()) {
            auto& f = model->fusion_blocks()[0];
            append_branch_weight_log(settings.branch_weight_csv, epoch, f->w_det_sa(), f->w_ddpm_sa(),
                                     f->w_cross());
        }
    }
    model->eval();
    return result;
}

std::string architecture_signature(const torch::nn::Module& module) {
    nlohmann::json sig = nlohmann::json::array();
    for (const auto& p : module.named_parameters(/*recurse=*/true)) {
        nlohmann::json entry{{"name", p.key()}, {"shape", std::vector<std::int64_t>(p.value().sizes().begin(),
                                                                                    p.value().sizes().end())}};
        sig.push_back(entry);
    }
    return sig.dump();
}

void save_detector(const std::filesystem::path& path, HybridModel& model,
                   const std::string& vae_checkpoint_ref) {
    const auto& c = model->config();
    nlohmann::json header{{"input_size", c.input_size},
                          {"num_classes", c.num_classes},
                          {"backbone_widths", c.backbone_widths},
                          {"fusion_width", c.fusion_width},
                          {"level_split_small", c.level_split_small},
                          {"level_split_mid", c.level_split_mid},
                          {"fusion_enabled", model->fusion_enabled()}};
    if (model->fusion_enabled()) {
        nlohmann::json fusion;
        // reconstructable fusion metadata is saved alongside
        fusion["vae_checkpoint_ref"] = vae_checkpoint_ref;
        header["fusion"] = fusion;
    }
    header["extra"] = model->checkpoint_extra;
    save_checkpoint(path, kDetectorMagic, header, *model);
}

LoadedDetector load_detector(const std::filesystem::path& path) {
    auto header = read_checkpoint_header(path, kDetectorMagic);
    DetectorConfig c;
    c.input_size = header.at("input_size");
    c.num_classes = header.at("num_classes");
    c.backbone_widths = header.at("backbone_widths").get<std::vector<int>>();
    c.fusion_width = header.at("fusion_width");
    c.level_split_small = header.at("level_split_small");
    c.level_split_mid = header.at("level_split_mid");

    LoadedDetector out;
    if (header.at("fusion_enabled").get<bool>()) {
        const auto& extra = header.at("extra");
        std::map<int, int> taps;
        for (const auto& [k, v] : extra.at("tap_channels").items()) taps[std::stoi(k)] = v;
        AttentionConfig att;
        att.heads = extra.at("attention_heads");
        att.model_width = c.fusion_width;
        FusionToggles tg;
        tg.dual_self_attention = extra.at("dual_self_attention");
        tg.weighted_sum = extra.at("weighted_sum");
        tg.residual = extra.at("residual");
        tg.norm = extra.at("norm");
        out.model = HybridModel(c, taps, extra.at("timesteps").get<std::vector<int>>(), att, tg);
        out.vae_checkpoint_ref = header.at("fusion").at("vae_checkpoint_ref");
    } else {
        out.model = HybridModel(c);
    }
    out.model->checkpoint_extra = header.at("extra");
    load_checkpoint(path, kDetectorMagic, *out.model);
    out.model->eval();
    return out;
}

}  // namespace d3n
