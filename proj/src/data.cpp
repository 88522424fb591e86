#include "dito/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iostream>
#include <numbers>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dito/errors.hpp"

namespace dito {
namespace fs = std::filesystem;

namespace {

uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// Portable draws: libstdc++ distributions are not specified bit-for-bit across vendors.
double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

int64_t uniform_int(std::mt19937_64& rng, int64_t lo, int64_t hi_inclusive) {
    return lo + static_cast<int64_t>(rng() % static_cast<uint64_t>(hi_inclusive - lo + 1));
}

bool has_image_extension(const fs::path& path) {
    auto ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

torch::Tensor mat_to_tensor(const cv::Mat& bgr) {
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    auto hwc = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8).clone();
    return hwc.permute({2, 0, 1}).to(torch::kFloat32).div(127.5).sub(1.0).contiguous();
}

cv::Mat resize_shorter_side(const cv::Mat& image, int resolution) {
    const int h = image.rows;
    const int w = image.cols;
    const int shorter = std::min(h, w);
    int new_h = resolution;
    int new_w = resolution;
    if (h < w) {
        new_w = static_cast<int>(std::lround(static_cast<double>(w) * resolution / h));
    } else if (w < h) {
        new_h = static_cast<int>(std::lround(static_cast<double>(h) * resolution / w));
    }
    cv::Mat out;
    cv::resize(image, out, cv::Size(new_w, new_h), 0, 0, shorter > resolution ? cv::INTER_AREA : cv::INTER_LINEAR);
    return out;
}

// Pixel colours in [0, 1]; converted to the [-1, 1] pixel range at the end.
class Canvas {
public:
    explicit Canvas(int resolution) : res_(resolution), pixels_(torch::zeros({3, resolution, resolution})) {}

    void fill(const Rgb& c) {
        for (int ch = 0; ch < 3; ++ch) pixels_[ch].fill_(c[static_cast<size_t>(ch)]);
    }

    // Blend `color` with 4x4 supersampled coverage of `inside(x, y)`.
    template <typename Inside>
    void paint(const Rgb& color, Inside inside) {
        auto acc = pixels_.accessor<float, 3>();
        for (int y = 0; y < res_; ++y) {
            for (int x = 0; x < res_; ++x) {
                int hits = 0;
                for (int sy = 0; sy < 4; ++sy) {
                    for (int sx = 0; sx < 4; ++sx) {
                        hits += inside(x + (sx + 0.5) / 4.0, y + (sy + 0.5) / 4.0) ? 1 : 0;
                    }
                }
                if (hits == 0) continue;
                const float cover = static_cast<float>(hits) / 16.0f;
                for (int ch = 0; ch < 3; ++ch) {
                    acc[ch][y][x] = acc[ch][y][x] * (1.0f - cover) + color[static_cast<size_t>(ch)] * cover;
                }
            }
        }
    }

    torch::Tensor finish() { return pixels_ * 2.0 - 1.0; }
    torch::Tensor& raw() { return pixels_; }

private:
    int res_;
    torch::Tensor pixels_;
};

Rgb jitter(const Rgb& base, std::mt19937_64& rng, double amount) {
    Rgb out{};
    for (size_t i = 0; i < 3; ++i) {
        out[i] = static_cast<float>(std::clamp(base[i] + uniform(rng, -amount, amount), 0.0, 1.0));
    }
    return out;
}

Rgb random_color(std::mt19937_64& rng) {
    return {static_cast<float>(uniform01(rng)), static_cast<float>(uniform01(rng)), static_cast<float>(uniform01(rng))};
}

torch::Tensor render_shape(int res, int64_t label, std::mt19937_64& rng) {
    static const std::array<Rgb, 4> kColors{{{0.85f, 0.12f, 0.12f},
                                             {0.12f, 0.25f, 0.90f},
                                             {0.15f, 0.75f, 0.20f},
                                             {0.90f, 0.85f, 0.15f}}};
    Canvas canvas(res);
    const double gray = uniform(rng, 0.25, 0.55);
    canvas.fill(jitter({static_cast<float>(gray), static_cast<float>(gray), static_cast<float>(gray)}, rng, 0.03));

    const double s = uniform(rng, res / 8.0, res / 4.0);
    const double cx = uniform(rng, s + 1.0, res - s - 1.0);
    const double cy = uniform(rng, s + 1.0, res - s - 1.0);
    const Rgb color = jitter(kColors[static_cast<size_t>(label)], rng, 0.08);
    switch (label) {
        case 0:
            canvas.paint(color, [&](double x, double y) { return std::abs(x - cx) <= s && std::abs(y - cy) <= s; });
            break;
        case 1:
            canvas.paint(color, [&](double x, double y) { return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= s * s; });
            break;
        case 2:
            // apex at (cx, cy - s), base of width 2s at y = cy + s
            canvas.paint(color, [&](double x, double y) {
                return y >= cy - s && y <= cy + s && std::abs(x - cx) <= (y - (cy - s)) / 2.0;
            });
            break;
        default:
            canvas.paint(color, [&](double x, double y) {
                const double dx = std::abs(x - cx);
                const double dy = std::abs(y - cy);
                return (dx <= s / 3.0 && dy <= s) || (dy <= s / 3.0 && dx <= s);
            });
            break;
    }
    return canvas.finish();
}

torch::Tensor render_glyphs(int res, std::mt19937_64& rng, int64_t& label) {
    static constexpr std::string_view kAlphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
    const int length = static_cast<int>(uniform_int(rng, 2, 4));
    label = length - 2;
    std::string text;
    for (int i = 0; i < length; ++i) {
        text.push_back(kAlphabet[static_cast<size_t>(uniform_int(rng, 0, kAlphabet.size() - 1))]);
    }
    const int scale = std::max(1, res / 32);
    const int width = (length * 6 - 1) * scale;
    const int height = 7 * scale;

    const bool dark_background = uniform01(rng) < 0.5;
    const double bg = dark_background ? uniform(rng, 0.0, 0.3) : uniform(rng, 0.7, 1.0);
    const double fg = dark_background ? uniform(rng, 0.7, 1.0) : uniform(rng, 0.0, 0.3);
    Canvas canvas(res);
    canvas.fill(jitter({static_cast<float>(bg), static_cast<float>(bg), static_cast<float>(bg)}, rng, 0.1));
    const Rgb ink = jitter({static_cast<float>(fg), static_cast<float>(fg), static_cast<float>(fg)}, rng, 0.1);
    const int top = static_cast<int>(uniform_int(rng, 0, std::max(0, res - height)));
    const int left = static_cast<int>(uniform_int(rng, 0, std::max(0, res - width)));
    draw_text(canvas.raw(), text, top, left, scale, ink);
    return canvas.finish();
}

torch::Tensor render_gradient(int res, std::mt19937_64& rng) {
    const Rgb a = random_color(rng);
    const Rgb b = random_color(rng);
    const double theta = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double c = (res - 1) / 2.0;
    const double half_diag = std::max(1.0, c * std::numbers::sqrt2);
    auto image = torch::empty({3, res, res});
    auto acc = image.accessor<float, 3>();
    for (int y = 0; y < res; ++y) {
        for (int x = 0; x < res; ++x) {
            const double p = ((x - c) * std::cos(theta) + (y - c) * std::sin(theta)) / half_diag;
            const double u = std::clamp((p + 1.0) / 2.0, 0.0, 1.0);
            for (size_t ch = 0; ch < 3; ++ch) {
                acc[static_cast<int64_t>(ch)][y][x] = static_cast<float>(a[ch] + (b[ch] - a[ch]) * u);
            }
        }
    }
    return image * 2.0 - 1.0;
}

}  // namespace

uint64_t mix_seed(uint64_t a, uint64_t b) { return splitmix64(a ^ splitmix64(b + 0x632BE59BD9B4E019ULL)); }

std::vector<int64_t> epoch_permutation(int64_t n, uint64_t seed, int64_t epoch) {
    std::vector<int64_t> perm(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
    std::mt19937_64 rng(mix_seed(seed, static_cast<uint64_t>(epoch)));
    for (int64_t i = n - 1; i > 0; --i) {
        const auto j = static_cast<int64_t>(rng() % static_cast<uint64_t>(i + 1));
        std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]);
    }
    return perm;
}

torch::Tensor horizontal_flip(const torch::Tensor& image) { return image.flip({-1}).contiguous(); }

torch::Tensor center_crop(const torch::Tensor& image, int size) {
    const auto h = image.size(-2);
    const auto w = image.size(-1);
    if (h < size || w < size) {
        throw ShapeError("cannot centre-crop " + std::to_string(h) + "x" + std::to_string(w) + " to " +
                         std::to_string(size));
    }
    return image.narrow(-2, (h - size) / 2, size).narrow(-1, (w - size) / 2, size).contiguous();
}

torch::Tensor augment(const torch::Tensor& image, std::mt19937_64& rng, int resolution, double flip_prob) {
    const auto h = image.size(-2);
    const auto w = image.size(-1);
    if (h < resolution || w < resolution) {
        throw ShapeError("image " + std::to_string(h) + "x" + std::to_string(w) + " is smaller than crop " +
                         std::to_string(resolution));
    }
    const auto top = uniform_int(rng, 0, h - resolution);
    const auto left = uniform_int(rng, 0, w - resolution);
    auto out = image.narrow(-2, top, resolution).narrow(-1, left, resolution);
    if (uniform01(rng) < flip_prob) {
        out = out.flip({-1});
    }
    return out.contiguous();
}

std::vector<fs::path> list_image_files(const fs::path& dir) {
    if (!fs::is_directory(dir)) {
        throw ConfigError("folder " + dir.string() + " does not exist");
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && has_image_extension(entry.path())) {
            files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
    return files;
}

Dataset load_folder(const fs::path& path, int resolution, Split split) {
    const auto files = list_image_files(path);
    if (files.empty()) {
        throw ConfigError("dataset folder " + path.string() + " contains no PNG/JPEG files");
    }

    Dataset data;
    data.resolution = resolution;
    for (const auto& file : files) {
        cv::Mat bgr = cv::imread(file.string(), cv::IMREAD_COLOR);
        if (bgr.empty()) {
            std::cerr << "warning: skipping undecodable image " << file.string() << "\n";
            continue;
        }
        auto image = mat_to_tensor(resize_shorter_side(bgr, resolution));
        data.images.push_back(split == Split::eval ? center_crop(image, resolution) : image);
    }
    if (data.empty()) {
        throw ConfigError("no decodable images in " + path.string());
    }
    return data;
}

SynthKind parse_synth_kind(std::string_view name) {
    for (auto kind : {SynthKind::glyphs, SynthKind::checkerboard, SynthKind::shapes, SynthKind::gradients}) {
        if (name == to_string(kind)) return kind;
    }
    throw ConfigError("unknown synthetic corpus '" + std::string(name) +
                      "' (expected glyphs, checkerboard, shapes or gradients)");
}

std::string_view to_string(SynthKind kind) {
    switch (kind) {
        case SynthKind::glyphs: return "glyphs";
        case SynthKind::checkerboard: return "checkerboard";
        case SynthKind::shapes: return "shapes";
        case SynthKind::gradients: return "gradients";
    }
    return "unknown";
}

torch::Tensor render_checkerboard(int resolution, int cell, const Rgb& a, const Rgb& b) {
    if (cell <= 0) throw ConfigError("checkerboard cell size must be positive");
    auto image = torch::empty({3, resolution, resolution});
    auto acc = image.accessor<float, 3>();
    for (int y = 0; y < resolution; ++y) {
        for (int x = 0; x < resolution; ++x) {
            const Rgb& c = ((y / cell + x / cell) % 2 == 0) ? a : b;
            for (int ch = 0; ch < 3; ++ch) acc[ch][y][x] = c[static_cast<size_t>(ch)] * 2.0f - 1.0f;
        }
    }
    return image;
}

void draw_text(torch::Tensor& image, std::string_view text, int top, int left, int scale, const Rgb& color) {
    auto acc = image.accessor<float, 3>();
    const auto h = image.size(1);
    const auto w = image.size(2);
    for (size_t i = 0; i < text.size(); ++i) {
        const auto& rows = glyph_bitmap(text[i]);
        const int origin = left + static_cast<int>(i) * 6 * scale;
        for (int r = 0; r < 7; ++r) {
            for (int c = 0; c < 5; ++c) {
                if (((rows[static_cast<size_t>(r)] >> (4 - c)) & 1) == 0) continue;
                for (int dy = 0; dy < scale; ++dy) {
                    for (int dx = 0; dx < scale; ++dx) {
                        const int y = top + r * scale + dy;
                        const int x = origin + c * scale + dx;
                        if (y < 0 || x < 0 || y >= h || x >= w) continue;
                        for (int ch = 0; ch < 3; ++ch) acc[ch][y][x] = color[static_cast<size_t>(ch)];
                    }
                }
            }
        }
    }
}

Dataset synth_corpus(SynthKind kind, int n, int resolution, uint64_t seed, int num_classes) {
    if (n <= 0) throw ConfigError("synthetic corpus size must be positive");
    if (resolution < 16) throw ConfigError("synthetic corpus resolution must be >= 16, got " + std::to_string(resolution));
    if (kind == SynthKind::shapes && (num_classes < 1 || num_classes > 4)) {
        throw ConfigError("shapes corpus supports 1 to 4 classes, got " + std::to_string(num_classes));
    }
    Dataset data;
    data.resolution = resolution;
    data.images.reserve(static_cast<size_t>(n));
    data.labels.reserve(static_cast<size_t>(n));
    const uint64_t corpus_seed = mix_seed(seed, static_cast<uint64_t>(kind) + 1);
    for (int i = 0; i < n; ++i) {
        std::mt19937_64 rng(mix_seed(corpus_seed, static_cast<uint64_t>(i)));
        int64_t label = 0;
        torch::Tensor image;
        switch (kind) {
            case SynthKind::shapes:
                label = uniform_int(rng, 0, num_classes - 1);
                image = render_shape(resolution, label, rng);
                break;
            case SynthKind::checkerboard: {
                static constexpr std::array<int, 3> kCells{2, 4, 8};
                label = uniform_int(rng, 0, 2);
                const Rgb a = random_color(rng);
                const Rgb b = random_color(rng);
                image = render_checkerboard(resolution, kCells[static_cast<size_t>(label)], a, b);
                break;
            }
            case SynthKind::glyphs:
                image = render_glyphs(resolution, rng, label);
                break;
            case SynthKind::gradients:
                image = render_gradient(resolution, rng);
                break;
        }
        data.images.push_back(image.clamp(kPixelMin, kPixelMax).contiguous());
        data.labels.push_back(label);
    }
    return data;
}

torch::Tensor stack_images(const Dataset& data, const std::vector<int64_t>& indices) {
    std::vector<torch::Tensor> items;
    items.reserve(indices.size());
    for (auto i : indices) {
        items.push_back(data.images.at(static_cast<size_t>(i)));
    }
    return torch::stack(items);
}

torch::Tensor stack_all(const Dataset& data) { return torch::stack(data.images); }

Dataset load_source(const std::string& source, int n, int resolution, uint64_t seed, int num_classes, Split split) {
    constexpr std::string_view kPrefix = "synth:";
    if (source.starts_with(kPrefix)) {
        return synth_corpus(parse_synth_kind(std::string_view(source).substr(kPrefix.size())), n, resolution, seed,
                            num_classes);
    }
    return load_folder(source, resolution, split);
}

}  // namespace dito
