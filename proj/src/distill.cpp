#include "d3n/distill.hpp"

#include <algorithm>
#include <fstream>

#include "d3n/errors.hpp"
#include "d3n/metrics.hpp"

namespace d3n {

void DistillConfig::validate() const {
    if (lambda_balance < 0) throw InvalidArgument("lambda_balance must be non-negative");
    if (temperature <= 0) throw InvalidArgument("temperature must be positive");
}

torch::Tensor decode_all_cells(const torch::Tensor& level_raw, int level, const DetectorConfig& config) {
    (void)level;
    (void)config;
    const auto g = level_raw.size(1);
    auto s = torch::sigmoid(level_raw.narrow(0, 0, 4));  // [4,G,G]
    auto cols = torch::arange(g, torch::kFloat32).unsqueeze(0).expand({g, g});
    auto rows = torch::arange(g, torch::kFloat32).unsqueeze(1).expand({g, g});
    auto x = (cols + s[0]) / static_cast<double>(g);
    auto y = (rows + s[1]) / static_cast<double>(g);
    return torch::stack({x.reshape({g * g}), y.reshape({g * g}), s[2].reshape({g * g}),
                         s[3].reshape({g * g})}, -1);
}

DistillLoss distill_losses(const RawPredictions& student_raw, const RawPredictions& teacher_raw,
                           const Annotation& ann, const DistillConfig& config,
                           const DetectorConfig& det_config) {
    config.validate();
    for (int l = 0; l < 3; ++l)
        if (!student_raw[l].sizes().equals(teacher_raw[l].sizes()))
            throw InvalidArgument("distill_losses: student/teacher output layout mismatch");

    DistillLoss out;
    out.gt = detection_loss(student_raw, ann, det_config);

    const double lambda = config.lambda_balance;
    if (lambda == 0.0) {
        out.obj_teacher = torch::zeros({});
        out.cls_teacher = torch::zeros({});
        out.box_teacher = torch::zeros({});
        return out;
    }

    const int C = det_config.num_classes;
    const double tau = config.temperature;
    std::vector<torch::Tensor> obj_terms, cls_terms, box_terms;
    for (int l = 0; l < 3; ++l) {
        const auto g = student_raw[l].size(1);
        auto t_raw = teacher_raw[l].detach();
        auto s_obj_logit = student_raw[l][4].reshape({g * g});
        auto t_obj = torch::sigmoid(t_raw[4]).reshape({g * g});

        obj_terms.push_back(torch::binary_cross_entropy_with_logits(
            s_obj_logit, t_obj, {}, {}, torch::Reduction::None));

        // temperature-softened class logits, matched with L2 per cell
        auto s_cls = torch::sigmoid(student_raw[l].narrow(0, 5, C) / tau).reshape({C, g * g});
        auto t_cls = torch::sigmoid(t_raw.narrow(0, 5, C) / tau).reshape({C, g * g});
        cls_terms.push_back(t_obj * (s_cls - t_cls).pow(2).mean(0));

        auto s_boxes = decode_all_cells(student_raw[l], l, det_config);
        auto t_boxes = decode_all_cells(t_raw, l, det_config);
        box_terms.push_back(t_obj * (1.0 - giou(s_boxes, t_boxes)));
    }
    out.obj_teacher = lambda * torch::cat(obj_terms).mean();
    out.cls_teacher = lambda * torch::cat(cls_terms).mean();
    out.box_teacher = lambda * torch::cat(box_terms).mean();
    return out;
}

StudentTrainResult train_student(const std::vector<LabeledImage>& dataset, HybridModel teacher,
                                 FeatureProvider* teacher_provider, const DetectorConfig& student_config,
                                 const DistillConfig& config, const StudentTrainSettings& settings,
                                 const std::vector<LabeledImage>* val_split) {
    if (dataset.empty()) throw InvalidArgument("train_student: empty dataset");
    config.validate();
    if (teacher->fusion_enabled() && !teacher_provider)
        throw InvalidArgument("train_student: hybrid teacher needs the augmented loader");

    // student shares the teacher's head layout
    if (teacher->config().num_classes != student_config.num_classes ||
        teacher->config().input_size != student_config.input_size)
        throw InvalidArgument("train_student: teacher output layout mismatch with student config");

    torch::manual_seed(settings.seed);
    HybridModel student(student_config);
    student->train();
    teacher->eval();

    // the teacher is frozen, so its per-image raw predictions are computed once
    struct Item {
        torch::Tensor image;
        Annotation ann;
        RawPredictions teacher_raw;
    };
    std::vector<Item> items;
    {
        torch::NoGradGuard ng;
        for (const auto& li : dataset) {
            Item it;
            it.image = to_tensor(rescale(li.image, student_config.input_size));
            it.ann = li.annotation;
            std::vector<const FeatureRecord*> records;
            if (teacher->fusion_enabled())
                records = teacher_provider->get(FeatureKey{li.annotation.image_key, li.path});
            auto raw = teacher->forward(it.image, teacher->fusion_enabled() ? &records : nullptr);
            for (int l = 0; l < 3; ++l) it.teacher_raw[l] = raw[l].detach();
            items.push_back(std::move(it));
        }
    }

    torch::optim::Adam opt(student->parameters(), torch::optim::AdamOptions(settings.lr));
    auto gen = torch::make_generator<torch::CPUGeneratorImpl>(settings.seed ^ 0x57dULL);

    std::ofstream csv;
    if (!settings.report_csv.empty()) {
        csv.open(settings.report_csv, std::ios::trunc);
        csv << "epoch,loss_obj,loss_cls,loss_box,val_mAP50\n";
    }

    StudentTrainResult result;
    result.student = student;
    const auto n = static_cast<std::int64_t>(items.size());
    for (int epoch = 0; epoch < settings.epochs; ++epoch) {
        auto perm = torch::randperm(n, gen, torch::kLong);
        double e_obj = 0, e_cls = 0, e_box = 0, e_total = 0;
        int batches = 0;
        for (std::int64_t off = 0; off < n; off += settings.batch_size) {
            const auto end = std::min<std::int64_t>(off + settings.batch_size, n);
            opt.zero_grad();
            torch::Tensor obj = torch::zeros({}), cls = torch::zeros({}), box = torch::zeros({});
            for (std::int64_t i = off; i < end; ++i) {
                auto& it = items[static_cast<std::size_t>(perm[i].item<std::int64_t>())];
                auto raw = student->forward(it.image, nullptr);
                auto loss = distill_losses(raw, it.teacher_raw, it.ann, config, student_config);
                obj = obj + loss.obj();
                cls = cls + loss.cls();
                box = box + loss.box();
            }
            const double scale = static_cast<double>(end - off);
            auto total = (settings.loss_weights.obj * obj + settings.loss_weights.cls * cls +
                          settings.loss_weights.box * box) /
                         scale;
            const double lv = total.item<double>();
            if (!std::isfinite(lv))
                throw TrainingFailure("non-finite student loss at epoch " + std::to_string(epoch));
            total.backward();
            opt.step();
            e_obj += obj.item<double>() / scale;
            e_cls += cls.item<double>() / scale;
            e_box += box.item<double>() / scale;
            e_total += lv;
            ++batches;
        }
        result.epoch_losses.push_back(e_total / std::max(batches, 1));

        double val_map = -1;
        if (val_split && settings.eval_every > 0 &&
            ((epoch + 1) % settings.eval_every == 0 || epoch + 1 == settings.epochs)) {
            student->eval();
            auto infer = [&](const LabeledImage& li) {
                torch::NoGradGuard ng;
                auto raw = student->forward(to_tensor(rescale(li.image, student_config.input_size)), nullptr);
                return decode_predictions(raw, student_config, 0.1, 0.5);
            };
            val_map = evaluate(infer, *val_split, student_config.num_classes).map50;
            student->train();
        }
        if (csv.is_open())
            csv << epoch << "," << e_obj / std::max(batches, 1) << "," << e_cls / std::max(batches, 1)
                << "," << e_box / std::max(batches, 1) << "," << val_map << "\n";
    }
    student->eval();
    return result;
}

}  // namespace d3n
