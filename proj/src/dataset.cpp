#include "d3n/dataset.hpp"

#include <fstream>
#include <sstream>

#include "d3n/errors.hpp"
#include "d3n/vendor_json.hpp"

namespace d3n {

namespace {

Annotation read_label_file(const std::filesystem::path& path, const Sha256& image_key,
                           int num_classes) {
    Annotation ann;
    ann.image_key = image_key;
    std::ifstream in(path);
    if (!in) throw IoError("cannot read label file " + path.string());
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ls(line);
        BoundingBox box;
        if (!(ls >> box.cls >> box.x >> box.y >> box.w >> box.h))
            throw CorruptFile("bad label line " + std::to_string(line_no) + " in " + path.string());
        if (box.cls < 0 || box.cls >= num_classes)
            throw CorruptFile("class index out of range in " + path.string());
        if (box.w <= 0 || box.h <= 0 || box.x < 0 || box.x > 1 || box.y < 0 || box.y > 1)
            throw CorruptFile("box out of range in " + path.string());
        ann.boxes.push_back(box);
    }
    return ann;
}

std::vector<LabeledImage> load_split(const std::filesystem::path& root,
                                     const std::vector<std::string>& names, int num_classes) {
    std::vector<LabeledImage> out;
    out.reserve(names.size());
    for (const auto& name : names) {
        LabeledImage item;
        const auto img_path = root / "images" / name;
        item.image = load_image(img_path);
        item.path = img_path.string();
        const auto stem = std::filesystem::path(name).stem().string();
        item.annotation = read_label_file(root / "labels" / (stem + ".txt"),
                                          content_key(item.image), num_classes);
        out.push_back(std::move(item));
    }
    return out;
}

}  // namespace

std::vector<const FeatureRecord*> DatasetHandle::records_for(const LabeledImage& item) const {
    if (mode != LoadMode::augmented)
        throw StateError("records_for is only available in augmented mode");
    return repo_->query(FeatureKey{item.annotation.image_key, item.path});
}

DatasetHandle load_dataset(const std::filesystem::path& manifest_path, LoadMode mode,
                           const FeatureRepository* repo) {
    if (mode == LoadMode::augmented && !repo)
        throw ConfigError("augmented mode requires a feature repository");

    std::ifstream mf(manifest_path);
    if (!mf) throw IoError("cannot read dataset manifest " + manifest_path.string());
    nlohmann::json m;
    try {
        mf >> m;
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFile(std::string("bad dataset manifest: ") + e.what());
    }

    DatasetHandle handle;
    handle.mode = mode;
    handle.repo_ = (mode == LoadMode::augmented) ? repo : nullptr;
    handle.image_size = m.at("image_size");
    handle.class_names = m.at("classes").get<std::vector<std::string>>();
    const auto root = manifest_path.parent_path();
    const int n = static_cast<int>(handle.class_names.size());
    handle.train = load_split(root, m.at("train").get<std::vector<std::string>>(), n);
    handle.test = load_split(root, m.at("test").get<std::vector<std::string>>(), n);
    return handle;
}

}  // namespace d3n
