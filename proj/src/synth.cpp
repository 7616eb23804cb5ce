#include "d3n/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "d3n/errors.hpp"
#include "d3n/hashing.hpp"
#include "d3n/vendor_json.hpp"

namespace d3n {

namespace {

struct Bounds {
    int x0 = 1 << 30, y0 = 1 << 30, x1 = -1, y1 = -1;
    void grow(int x, int y) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
    }
    bool empty() const { return x1 < 0; }
    bool intersects(const Bounds& o, int pad) const {
        return !(x1 + pad < o.x0 || o.x1 + pad < x0 || y1 + pad < o.y0 || o.y1 + pad < y0);
    }
};

class Canvas {
   public:
    Canvas(int size) : size_(size), data_(static_cast<std::size_t>(size) * size, 0.f) {}

    float& at(int x, int y) { return data_[static_cast<std::size_t>(y) * size_ + x]; }
    int size() const { return size_; }

    void add(int x, int y, float delta, Bounds* touched) {
        if (x < 0 || y < 0 || x >= size_ || y >= size_ || delta == 0.f) return;
        at(x, y) += delta;
        if (touched) touched->grow(x, y);
    }

    Image to_image() const {
        Image img;
        img.width = size_;
        img.height = size_;
        img.pixels.resize(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i)
            img.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(data_[i]), 0l, 255l));
        return img;
    }

   private:
    int size_;
    std::vector<float> data_;
};

double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

/// Smooth value-noise background: bilinearly upsampled coarse grid plus grain.
void draw_background(Canvas& canvas, std::mt19937_64& rng) {
    const int s = canvas.size();
    const int cells = 8;
    std::vector<double> grid((cells + 1) * (cells + 1));
    for (auto& v : grid) v = uniform(rng, 95.0, 150.0);
    std::normal_distribution<double> grain(0.0, 3.0);
    for (int y = 0; y < s; ++y) {
        for (int x = 0; x < s; ++x) {
            const double gx = static_cast<double>(x) * cells / s;
            const double gy = static_cast<double>(y) * cells / s;
            const int ix = static_cast<int>(gx), iy = static_cast<int>(gy);
            const double fx = gx - ix, fy = gy - iy;
            const double top = grid[iy * (cells + 1) + ix] * (1 - fx) + grid[iy * (cells + 1) + ix + 1] * fx;
            const double bot = grid[(iy + 1) * (cells + 1) + ix] * (1 - fx) +
                               grid[(iy + 1) * (cells + 1) + ix + 1] * fx;
            canvas.at(x, y) = static_cast<float>(top * (1 - fy) + bot * fy + grain(rng));
        }
    }
}

void draw_scratch(Canvas& canvas, std::mt19937_64& rng, double cx, double cy, Bounds* touched) {
    const int s = canvas.size();
    const double len = uniform(rng, 0.22, 0.38) * s;
    const double angle = uniform(rng, 0.0, M_PI);
    const double thick = uniform(rng, 1.2, 2.2);
    const float delta = static_cast<float>((rng() % 2 ? 1 : -1) * uniform(rng, 65.0, 95.0));
    const double dx = std::cos(angle), dy = std::sin(angle);
    const double x0 = cx - dx * len / 2, y0 = cy - dy * len / 2;
    const double x1 = cx + dx * len / 2, y1 = cy + dy * len / 2;
    const int margin = static_cast<int>(thick) + 2;
    const int lox = static_cast<int>(std::min(x0, x1)) - margin, hix = static_cast<int>(std::max(x0, x1)) + margin;
    const int loy = static_cast<int>(std::min(y0, y1)) - margin, hiy = static_cast<int>(std::max(y0, y1)) + margin;
    for (int y = loy; y <= hiy; ++y) {
        for (int x = lox; x <= hix; ++x) {
            // distance from pixel center to the segment
            const double px = x + 0.5 - x0, py = y + 0.5 - y0;
            const double t = std::clamp((px * (x1 - x0) + py * (y1 - y0)) / (len * len), 0.0, 1.0);
            const double ex = px - t * (x1 - x0), ey = py - t * (y1 - y0);
            const double dist = std::sqrt(ex * ex + ey * ey);
            const double alpha = std::clamp(thick - dist, 0.0, 1.0);
            if (alpha > 0.02) canvas.add(x, y, static_cast<float>(alpha * delta), touched);
        }
    }
}

void draw_patch(Canvas& canvas, std::mt19937_64& rng, double cx, double cy, Bounds* touched) {
    const int s = canvas.size();
    const double rx = uniform(rng, 0.06, 0.13) * s;
    const double ry = uniform(rng, 0.06, 0.13) * s;
    const double rot = uniform(rng, 0.0, M_PI);
    const float delta = static_cast<float>((rng() % 2 ? 1 : -1) * uniform(rng, 50.0, 80.0));
    const double cr = std::cos(rot), sr = std::sin(rot);
    const int margin = static_cast<int>(std::max(rx, ry)) + 2;
    for (int y = static_cast<int>(cy) - margin; y <= static_cast<int>(cy) + margin; ++y) {
        for (int x = static_cast<int>(cx) - margin; x <= static_cast<int>(cx) + margin; ++x) {
            const double px = x + 0.5 - cx, py = y + 0.5 - cy;
            const double u = (px * cr + py * sr) / rx;
            const double v = (-px * sr + py * cr) / ry;
            const double r = std::sqrt(u * u + v * v);
            const double alpha = std::clamp((1.0 - r) / 0.18, 0.0, 1.0);
            if (alpha > 0.02) canvas.add(x, y, static_cast<float>(alpha * delta), touched);
        }
    }
}

void draw_pit_cluster(Canvas& canvas, std::mt19937_64& rng, double cx, double cy, Bounds* touched) {
    const int s = canvas.size();
    const double cluster_r = uniform(rng, 0.055, 0.11) * s;
    const int count = uniform_int(rng, 6, 12);
    const float delta = static_cast<float>(-uniform(rng, 65.0, 95.0));
    for (int i = 0; i < count; ++i) {
        const double a = uniform(rng, 0.0, 2 * M_PI);
        const double d = cluster_r * std::sqrt(uniform(rng, 0.0, 1.0));
        const double px = cx + d * std::cos(a), py = cy + d * std::sin(a);
        const double pr = uniform(rng, 1.2, 2.4);
        for (int y = static_cast<int>(py - pr) - 1; y <= static_cast<int>(py + pr) + 1; ++y) {
            for (int x = static_cast<int>(px - pr) - 1; x <= static_cast<int>(px + pr) + 1; ++x) {
                const double dx = x + 0.5 - px, dy = y + 0.5 - py;
                const double alpha = std::clamp(pr - std::sqrt(dx * dx + dy * dy), 0.0, 1.0);
                if (alpha > 0.02) canvas.add(x, y, static_cast<float>(alpha * delta), touched);
            }
        }
    }
}

std::string image_name(int index) {
    std::ostringstream os;
    os << "img_" << std::setw(4) << std::setfill('0') << index << ".png";
    return os.str();
}

}  // namespace

std::string defect_name(DefectKind kind) {
    switch (kind) {
        case DefectKind::scratch: return "scratch";
        case DefectKind::patch: return "patch";
        case DefectKind::pit_cluster: return "pit_cluster";
    }
    throw InvalidArgument("unknown defect kind");
}

void SynthConfig::validate() const {
    if (image_size < 64) throw InvalidArgument("image_size must be at least 64");
    if (num_images <= 0) throw InvalidArgument("num_images must be positive");
    if (classes.empty()) throw InvalidArgument("classes must not be empty");
    if (defects_min < 1 || defects_max < defects_min)
        throw InvalidArgument("defect count range is invalid");
    if (train_fraction <= 0 || train_fraction >= 1)
        throw InvalidArgument("train_fraction must be in (0,1)");
}

SynthImage generate_image(const SynthConfig& config, int index) {
    config.validate();
    std::mt19937_64 rng(seed_mix(config.seed, static_cast<std::uint64_t>(index)));
    Canvas canvas(config.image_size);
    draw_background(canvas, rng);

    const int s = config.image_size;
    const int count = uniform_int(rng, config.defects_min, config.defects_max);
    const int n_classes = static_cast<int>(config.classes.size());

    SynthImage out;
    std::vector<Bounds> placed;
    for (int j = 0; j < count; ++j) {
        // round-robin over (index + j) keeps the class counts balanced
        const DefectKind kind = config.classes[static_cast<std::size_t>((index + j) % n_classes)];
        Bounds touched;
        for (int attempt = 0; attempt < 60; ++attempt) {
            const double cx = uniform(rng, 0.18 * s, 0.82 * s);
            const double cy = uniform(rng, 0.18 * s, 0.82 * s);
            // generous reach estimate used only for overlap rejection
            const int reach = static_cast<int>(0.2 * s);
            Bounds probe;
            probe.grow(static_cast<int>(cx) - reach, static_cast<int>(cy) - reach);
            probe.grow(static_cast<int>(cx) + reach, static_cast<int>(cy) + reach);
            bool clash = false;
            for (const auto& p : placed) clash = clash || probe.intersects(p, 2);
            if (clash && attempt < 59) continue;
            switch (kind) {
                case DefectKind::scratch: draw_scratch(canvas, rng, cx, cy, &touched); break;
                case DefectKind::patch: draw_patch(canvas, rng, cx, cy, &touched); break;
                case DefectKind::pit_cluster: draw_pit_cluster(canvas, rng, cx, cy, &touched); break;
            }
            break;
        }
        if (touched.empty()) continue;
        placed.push_back(touched);
        BoundingBox box;
        box.cls = static_cast<int>(kind);
        box.x = (touched.x0 + touched.x1 + 1) / 2.0 / s;
        box.y = (touched.y0 + touched.y1 + 1) / 2.0 / s;
        box.w = (touched.x1 - touched.x0 + 2.0) / s;
        box.h = (touched.y1 - touched.y0 + 2.0) / s;
        out.annotation.boxes.push_back(box);
    }

    out.image = canvas.to_image();
    out.annotation.image_key = content_key(out.image);
    return out;
}

void generate_dataset(const SynthConfig& config, const std::filesystem::path& out_dir) {
    config.validate();
    std::filesystem::create_directories(out_dir / "images");
    std::filesystem::create_directories(out_dir / "labels");

    std::vector<std::string> names;
    for (int i = 0; i < config.num_images; ++i) {
        auto item = generate_image(config, i);
        const auto name = image_name(i);
        save_png(item.image, out_dir / "images" / name);
        std::ofstream lf(out_dir / "labels" / (name.substr(0, name.size() - 4) + ".txt"),
                         std::ios::trunc);
        lf << std::fixed << std::setprecision(6);
        for (const auto& b : item.annotation.boxes)
            lf << b.cls << " " << b.x << " " << b.y << " " << b.w << " " << b.h << "\n";
        if (!lf) throw IoError("cannot write label file for " + name);
        names.push_back(name);
    }

    std::vector<int> order(names.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 split_rng(seed_mix(config.seed, 0x5317ULL));
    std::shuffle(order.begin(), order.end(), split_rng);
    const auto n_train =
        static_cast<std::size_t>(std::lround(config.train_fraction * static_cast<double>(names.size())));

    nlohmann::json manifest;
    manifest["image_size"] = config.image_size;
    std::vector<std::string> class_names;
    for (auto c : config.classes) class_names.push_back(defect_name(c));
    manifest["classes"] = class_names;
    std::vector<std::string> train, test;
    for (std::size_t i = 0; i < order.size(); ++i)
        (i < n_train ? train : test).push_back(names[static_cast<std::size_t>(order[i])]);
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    manifest["train"] = train;
    manifest["test"] = test;
    std::ofstream mf(out_dir / "manifest.json", std::ios::trunc);
    mf << manifest.dump(2) << "\n";
    if (!mf) throw IoError("cannot write dataset manifest");
}

Annotation import_voc_annotation(const std::filesystem::path& xml_path,
                                 const std::vector<std::string>& class_names) {
    std::ifstream in(xml_path);
    if (!in) throw IoError("cannot read " + xml_path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string xml = ss.str();

    auto tag_value = [&](const std::string& tag, std::size_t from, std::size_t* end) -> std::string {
        const std::string open = "<" + tag + ">", close = "</" + tag + ">";
        auto a = xml.find(open, from);
        if (a == std::string::npos) {
            if (end) *end = std::string::npos;
            return {};
        }
        auto b = xml.find(close, a);
        if (b == std::string::npos) throw CorruptFile("unterminated <" + tag + "> in " + xml_path.string());
        if (end) *end = b + close.size();
        return xml.substr(a + open.size(), b - a - open.size());
    };

    std::size_t pos = 0;
    const double width = std::stod(tag_value("width", 0, nullptr));
    const double height = std::stod(tag_value("height", 0, nullptr));
    if (width <= 0 || height <= 0) throw CorruptFile("bad image size in " + xml_path.string());

    Annotation ann;
    while (true) {
        auto obj_start = xml.find("<object>", pos);
        if (obj_start == std::string::npos) break;
        std::size_t after_name = 0;
        const std::string name = tag_value("name", obj_start, &after_name);
        auto cls_it = std::find(class_names.begin(), class_names.end(), name);
        if (cls_it == class_names.end())
            throw InvalidArgument("unknown class '" + name + "' in " + xml_path.string());
        const double xmin = std::stod(tag_value("xmin", obj_start, nullptr));
        const double ymin = std::stod(tag_value("ymin", obj_start, nullptr));
        std::size_t obj_end = 0;
        const double xmax = std::stod(tag_value("xmax", obj_start, nullptr));
        const double ymax = std::stod(tag_value("ymax", obj_start, &obj_end));
        BoundingBox box;
        box.cls = static_cast<int>(cls_it - class_names.begin());
        box.x = (xmin + xmax) / 2.0 / width;
        box.y = (ymin + ymax) / 2.0 / height;
        box.w = (xmax - xmin) / width;
        box.h = (ymax - ymin) / height;
        ann.boxes.push_back(box);
        pos = obj_end;
    }
    return ann;
}

}  // namespace d3n
