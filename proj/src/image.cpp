#include "d3n/image.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <cstring>

#include "d3n/errors.hpp"

namespace d3n {

Image load_image(const std::filesystem::path& path) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    if (m.empty()) throw IoError("cannot read image: " + path.string());
    Image img;
    img.width = m.cols;
    img.height = m.rows;
    img.pixels.resize(static_cast<std::size_t>(m.cols) * m.rows);
    for (int y = 0; y < m.rows; ++y)
        std::memcpy(img.pixels.data() + static_cast<std::size_t>(y) * m.cols, m.ptr(y), m.cols);
    return img;
}

void save_png(const Image& img, const std::filesystem::path& path) {
    cv::Mat m(img.height, img.width, CV_8UC1, const_cast<std::uint8_t*>(img.pixels.data()));
    // Fixed compression level keeps output byte-identical across runs.
    if (!cv::imwrite(path.string(), m, {cv::IMWRITE_PNG_COMPRESSION, 3}))
        throw IoError("cannot write png: " + path.string());
}

Image rescale(const Image& img, int size) {
    if (size <= 0) throw InvalidArgument("rescale size must be positive");
    cv::Mat src(img.height, img.width, CV_8UC1, const_cast<std::uint8_t*>(img.pixels.data()));
    cv::Mat dst;
    cv::resize(src, dst, cv::Size(size, size), 0, 0, cv::INTER_LINEAR);
    Image out;
    out.width = size;
    out.height = size;
    out.pixels.resize(static_cast<std::size_t>(size) * size);
    for (int y = 0; y < size; ++y)
        std::memcpy(out.pixels.data() + static_cast<std::size_t>(y) * size, dst.ptr(y), size);
    return out;
}

torch::Tensor to_tensor(const Image& img) {
    auto t = torch::empty({1, img.height, img.width}, torch::kFloat32);
    float* dst = t.data_ptr<float>();
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        dst[i] = static_cast<float>(img.pixels[i]) / 127.5f - 1.0f;
    return t;
}

Sha256 content_key(const Image& img) {
    std::vector<std::uint8_t> canon;
    canon.reserve(8 + img.pixels.size());
    auto push_i32 = [&](std::int32_t v) {
        for (int i = 0; i < 4; ++i) canon.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
    };
    push_i32(img.width);
    push_i32(img.height);
    canon.insert(canon.end(), img.pixels.begin(), img.pixels.end());
    return sha256(canon);
}

}  // namespace d3n
