#include "dito/image_io.hpp"

#include <algorithm>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dito/errors.hpp"

namespace dito {

torch::Tensor to_uint8(const torch::Tensor& image) {
    if (image.dim() != 3 || image.size(0) != 3) {
        throw ShapeError("to_uint8 expects a (3, H, W) image");
    }
    // torch::round rounds half to even
    auto scaled = torch::round((image.detach().to(torch::kFloat64) + 1.0) * 127.5).clamp(0.0, 255.0);
    return scaled.to(torch::kUInt8).permute({1, 2, 0}).contiguous();
}

torch::Tensor read_image(const std::filesystem::path& path) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) {
        throw IoError("cannot decode image " + path.string());
    }
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    auto hwc = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8).clone();
    return hwc.permute({2, 0, 1}).to(torch::kFloat32).div(127.5).sub(1.0).contiguous();
}

void write_png(const std::filesystem::path& path, const torch::Tensor& image) {
    auto hwc = to_uint8(image);
    cv::Mat rgb(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_8UC3, hwc.data_ptr<uint8_t>());
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    if (!cv::imwrite(path.string(), bgr)) {
        throw IoError("cannot write " + path.string());
    }
}

void write_png_grid(const std::filesystem::path& path, const std::vector<torch::Tensor>& images, int columns) {
    if (images.empty()) {
        throw IoError("no images to write to " + path.string());
    }
    columns = std::max(1, std::min<int>(columns, static_cast<int>(images.size())));
    const auto h = images.front().size(1);
    const auto w = images.front().size(2);
    const auto rows = (static_cast<int64_t>(images.size()) + columns - 1) / columns;
    auto canvas = torch::full({3, rows * h, columns * w}, -1.0);
    for (size_t i = 0; i < images.size(); ++i) {
        const auto r = static_cast<int64_t>(i) / columns;
        const auto c = static_cast<int64_t>(i) % columns;
        canvas.narrow(1, r * h, h).narrow(2, c * w, w).copy_(images[i]);
    }
    write_png(path, canvas);
}

}  // namespace dito
