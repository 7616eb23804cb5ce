#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "d3n/detector.hpp"
#include "d3n/repository.hpp"

namespace d3n {

enum class LoadMode { plain, augmented };

/// Loaded dataset with a fixed train/test split. In plain mode the
/// repository is never consulted; augmented mode attaches repository
/// records on demand through `records_for`.
struct DatasetHandle {
    std::vector<LabeledImage> train;
    std::vector<LabeledImage> test;
    std::vector<std::string> class_names;
    int image_size = 0;
    LoadMode mode = LoadMode::plain;

    /// Augmented-mode record lookup (misses propagate as KeyNotFound).
    std::vector<const FeatureRecord*> records_for(const LabeledImage& item) const;

   private:
    const FeatureRepository* repo_ = nullptr;
    friend DatasetHandle load_dataset(const std::filesystem::path&, LoadMode,
                                      const FeatureRepository*);
};

/// Reads manifest.json plus images/ and labels/ under the manifest's
/// directory. `repo` is required (ConfigError otherwise) when mode is
/// augmented and must stay alive as long as the handle.
DatasetHandle load_dataset(const std::filesystem::path& manifest_path,
                           LoadMode mode = LoadMode::plain,
                           const FeatureRepository* repo = nullptr);

}  // namespace d3n
