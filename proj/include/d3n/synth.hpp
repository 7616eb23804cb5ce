#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "d3n/detector.hpp"

namespace d3n {

enum class DefectKind { scratch = 0, patch = 1, pit_cluster = 2 };

std::string defect_name(DefectKind kind);

struct SynthConfig {
    int image_size = 128;
    int num_images = 200;
    std::vector<DefectKind> classes{DefectKind::scratch, DefectKind::patch, DefectKind::pit_cluster};
    int defects_min = 1;
    int defects_max = 3;
    std::uint64_t seed = 0;
    double train_fraction = 0.8;

    void validate() const;
};

/// Renders one image deterministically from (config.seed, index); the
/// bounding boxes are the tight bounds of the pixels each defect modified.
struct SynthImage {
    Image image;
    Annotation annotation;  // image_key filled with the content hash
};
SynthImage generate_image(const SynthConfig& config, int index);

/// Writes images/, labels/ (YOLO-style "c x y w h" lines) and a
/// manifest.json with the seeded 80/20 train/test split.
void generate_dataset(const SynthConfig& config, const std::filesystem::path& out_dir);

/// VOC-style XML annotation import (adapter for real datasets).
/// `class_names` maps a name to its class index by position.
Annotation import_voc_annotation(const std::filesystem::path& xml_path,
                                 const std::vector<std::string>& class_names);

}  // namespace d3n
