#include "waterseg/image.hpp"

#include <algorithm>
#include <numeric>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "waterseg/errors.hpp"

namespace waterseg {

int64_t Mask::water_pixels() const {
    return std::accumulate(labels.begin(), labels.end(), int64_t{0});
}

namespace {

Image from_mat(const cv::Mat& mat) {
    Image img(mat.cols, mat.rows, mat.channels());
    for (int y = 0; y < mat.rows; ++y) {
        const auto* row = mat.ptr<uint8_t>(y);
        std::copy_n(row, static_cast<std::size_t>(mat.cols) * mat.channels(),
                    img.pixels.begin() + static_cast<std::ptrdiff_t>(y) * mat.cols * mat.channels());
    }
    return img;
}

cv::Mat to_mat(const Image& img) {
    const int type = img.channels == 1 ? CV_8UC1 : (img.channels == 3 ? CV_8UC3 : CV_8UC4);
    cv::Mat mat(img.height, img.width, type);
    for (int y = 0; y < img.height; ++y) {
        std::copy_n(img.pixels.begin() + static_cast<std::ptrdiff_t>(y) * img.width * img.channels,
                    static_cast<std::size_t>(img.width) * img.channels, mat.ptr<uint8_t>(y));
    }
    return mat;
}

void ensure_parent(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
}

} // namespace

Image read_image(const std::filesystem::path& path) {
    cv::Mat bgr;
    try {
        bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    } catch (const cv::Exception& e) {
        throw IoError("cannot decode image " + path.string() + ": " + e.what());
    }
    if (bgr.empty()) throw IoError("cannot decode image " + path.string());
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    return from_mat(rgb);
}

Mask read_mask(const std::filesystem::path& path) {
    cv::Mat gray;
    try {
        gray = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    } catch (const cv::Exception& e) {
        throw IoError("cannot decode mask " + path.string() + ": " + e.what());
    }
    if (gray.empty()) throw IoError("cannot decode mask " + path.string());
    return mask_from_gray(from_mat(gray));
}

Mask mask_from_gray(const Image& gray, uint8_t threshold) {
    if (gray.channels != 1) throw ValidationError("mask image must be single-channel");
    Mask m(gray.width, gray.height);
    for (std::size_t i = 0; i < m.labels.size(); ++i) m.labels[i] = gray.pixels[i] >= threshold ? 1 : 0;
    return m;
}

void write_png(const std::filesystem::path& path, const Image& image, int compression) {
    ensure_parent(path);
    cv::Mat mat = to_mat(image);
    if (image.channels == 3) cv::cvtColor(mat, mat, cv::COLOR_RGB2BGR);
    if (!cv::imwrite(path.string(), mat, {cv::IMWRITE_PNG_COMPRESSION, compression})) {
        throw IoError("cannot write " + path.string());
    }
}

void write_mask_png(const std::filesystem::path& path, const Mask& mask, int compression) {
    Image gray(mask.width, mask.height, 1);
    for (std::size_t i = 0; i < mask.labels.size(); ++i) gray.pixels[i] = mask.labels[i] ? 255 : 0;
    write_png(path, gray, compression);
}

Image resize_bilinear(const Image& image, int width, int height) {
    if (image.width == width && image.height == height) return image;
    cv::Mat out;
    cv::resize(to_mat(image), out, cv::Size(width, height), 0, 0, cv::INTER_LINEAR);
    return from_mat(out);
}

Mask resize_nearest(const Mask& mask, int width, int height) {
    if (mask.width == width && mask.height == height) return mask;
    Mask out(width, height);
    for (int y = 0; y < height; ++y) {
        const int sy = std::min(mask.height - 1, static_cast<int>((y + 0.5) * mask.height / height));
        for (int x = 0; x < width; ++x) {
            const int sx = std::min(mask.width - 1, static_cast<int>((x + 0.5) * mask.width / width));
            out.at(x, y) = mask.at(sx, sy);
        }
    }
    return out;
}

} // namespace waterseg
