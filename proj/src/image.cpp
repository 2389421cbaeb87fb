#include "stereoinr/image.hpp"

#include <algorithm>
#include <cmath>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

namespace stereoinr {

Image load_png_rgb(const std::string& path) {
    cv::Mat m = cv::imread(path, cv::IMREAD_COLOR);
    if (m.empty()) throw IoError("cannot read image: " + path);
    if (m.type() != CV_8UC3) throw IoError("expected 8-bit RGB PNG: " + path);
    Image img({m.rows, m.cols, 3});
    for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x) {
            auto px = m.at<cv::Vec3b>(y, x);  // BGR
            img.at(y, x, 0) = px[2] / 255.0;
            img.at(y, x, 1) = px[1] / 255.0;
            img.at(y, x, 2) = px[0] / 255.0;
        }
    return img;
}

void save_png_rgb(const Image& img, const std::string& path) {
    cv::Mat m(img.shape[0], img.shape[1], CV_8UC3);
    for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x) {
            auto to8 = [&](int c) {
                double v = std::clamp(img.at(y, x, c), 0.0, 1.0);
                return static_cast<unsigned char>(std::lround(v * 255.0));
            };
            m.at<cv::Vec3b>(y, x) = cv::Vec3b(to8(2), to8(1), to8(0));
        }
    if (!cv::imwrite(path, m, {cv::IMWRITE_PNG_COMPRESSION, 6}))
        throw IoError("cannot write image: " + path);
}

Tensor load_png_u16(const std::string& path, double scale, double offset) {
    cv::Mat m = cv::imread(path, cv::IMREAD_UNCHANGED);
    if (m.empty()) throw IoError("cannot read image: " + path);
    if (m.type() != CV_16UC1) throw IoError("expected 16-bit grayscale PNG: " + path);
    Tensor f({m.rows, m.cols});
    for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x)
            f.at(y, x) = (static_cast<double>(m.at<std::uint16_t>(y, x)) - offset) / scale;
    return f;
}

void save_png_u16(const Tensor& field, const std::string& path, double scale, double offset) {
    cv::Mat m(field.shape[0], field.shape[1], CV_16UC1);
    for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x) {
            double v = std::clamp(field.at(y, x) * scale + offset, 0.0, 65535.0);
            m.at<std::uint16_t>(y, x) = static_cast<std::uint16_t>(std::lround(v));
        }
    if (!cv::imwrite(path, m, {cv::IMWRITE_PNG_COMPRESSION, 6}))
        throw IoError("cannot write image: " + path);
}

void save_png_mask(const Tensor& mask01, const std::string& path) {
    cv::Mat m(mask01.shape[0], mask01.shape[1], CV_8UC1);
    for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x)
            m.at<unsigned char>(y, x) = mask01.at(y, x) > 0.5 ? 255 : 0;
    if (!cv::imwrite(path, m, {cv::IMWRITE_PNG_COMPRESSION, 6}))
        throw IoError("cannot write image: " + path);
}

Tensor luminance(const Image& img) {
    Tensor g({img.shape[0], img.shape[1]});
    for (int y = 0; y < img.shape[0]; ++y)
        for (int x = 0; x < img.shape[1]; ++x)
            g.at(y, x) =
                0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
    return g;
}

void sample_bilinear(const Tensor& img, double y, double x, double* out) {
    const int h = img.shape[0], w = img.shape[1];
    const int c = img.shape.size() == 3 ? img.shape[2] : 1;
    y = std::clamp(y, 0.0, static_cast<double>(h - 1));
    x = std::clamp(x, 0.0, static_cast<double>(w - 1));
    int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
    int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
    double fy = y - y0, fx = x - x0;
    for (int k = 0; k < c; ++k) {
        double v00 = img.data[(static_cast<std::size_t>(y0) * w + x0) * c + k];
        double v01 = img.data[(static_cast<std::size_t>(y0) * w + x1) * c + k];
        double v10 = img.data[(static_cast<std::size_t>(y1) * w + x0) * c + k];
        double v11 = img.data[(static_cast<std::size_t>(y1) * w + x1) * c + k];
        out[k] = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
    }
}

}  // namespace stereoinr
