#include "wsigrade/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

namespace wsigrade {

Hsv rgb_to_hsv(uint8_t r8, uint8_t g8, uint8_t b8) {
    const double r = r8 / 255.0, g = g8 / 255.0, b = b8 / 255.0;
    const double mx = std::max({r, g, b});
    const double mn = std::min({r, g, b});
    const double delta = mx - mn;

    Hsv out{0.0, 0.0, mx};
    if (mx > 0.0) out.s = delta / mx;
    if (delta > 0.0) {
        if (mx == r) {
            out.h = 60.0 * std::fmod((g - b) / delta, 6.0);
        } else if (mx == g) {
            out.h = 60.0 * ((b - r) / delta + 2.0);
        } else {
            out.h = 60.0 * ((r - g) / delta + 4.0);
        }
        if (out.h < 0.0) out.h += 360.0;
    }
    return out;
}

void hsv_to_rgb(const Hsv& hsv, uint8_t& r, uint8_t& g, uint8_t& b) {
    const double c = hsv.v * hsv.s;
    const double hp = hsv.h / 60.0;
    const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    double r1 = 0, g1 = 0, b1 = 0;
    if (hp < 1)      { r1 = c; g1 = x; }
    else if (hp < 2) { r1 = x; g1 = c; }
    else if (hp < 3) { g1 = c; b1 = x; }
    else if (hp < 4) { g1 = x; b1 = c; }
    else if (hp < 5) { r1 = x; b1 = c; }
    else             { r1 = c; b1 = x; }
    const double m = hsv.v - c;
    auto q = [](double v) {
        return static_cast<uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L));
    };
    r = q(r1 + m);
    g = q(g1 + m);
    b = q(b1 + m);
}

Image flip_horizontal(const Image& img) {
    Image out(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
    return out;
}

Image flip_vertical(const Image& img) {
    Image out(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                out.at(y, x, c) = img.at(img.height - 1 - y, x, c);
    return out;
}

Image rotate90(const Image& img, int quarter_turns) {
    int k = ((quarter_turns % 4) + 4) % 4;
    if (k == 0) return img;
    Image src = img;
    for (int t = 0; t < k; ++t) {
        // one counter-clockwise quarter turn
        Image out(src.width, src.height);
        for (int y = 0; y < src.height; ++y)
            for (int x = 0; x < src.width; ++x)
                for (int c = 0; c < 3; ++c)
                    out.at(src.width - 1 - x, y, c) = src.at(y, x, c);
        src = std::move(out);
    }
    return src;
}

Image load_image(const std::string& path) {
    cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
    if (bgr.empty()) throw IoError("cannot read image: " + path);
    Image img(bgr.rows, bgr.cols);
    for (int y = 0; y < bgr.rows; ++y) {
        const auto* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < bgr.cols; ++x) {
            img.at(y, x, 0) = row[x][2];
            img.at(y, x, 1) = row[x][1];
            img.at(y, x, 2) = row[x][0];
        }
    }
    return img;
}

void save_png(const std::string& path, const Image& img) {
    if (img.empty()) throw IoError("refusing to write empty image: " + path);
    cv::Mat bgr(img.height, img.width, CV_8UC3);
    for (int y = 0; y < img.height; ++y) {
        auto* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < img.width; ++x) {
            row[x][0] = img.at(y, x, 2);
            row[x][1] = img.at(y, x, 1);
            row[x][2] = img.at(y, x, 0);
        }
    }
    if (!cv::imwrite(path, bgr)) throw IoError("cannot write image: " + path);
}

bool Mask::empty_mask() const {
    return std::all_of(data.begin(), data.end(), [](uint8_t v) { return v == 0; });
}

Mask load_mask(const std::string& path) {
    cv::Mat gray = cv::imread(path, cv::IMREAD_GRAYSCALE);
    if (gray.empty()) throw IoError("cannot read mask: " + path);
    Mask m(gray.rows, gray.cols);
    for (int y = 0; y < gray.rows; ++y)
        for (int x = 0; x < gray.cols; ++x)
            m.at(y, x) = gray.at<uint8_t>(y, x);
    return m;
}

void save_mask_png(const std::string& path, const Mask& mask) {
    cv::Mat gray(mask.height, mask.width, CV_8UC1);
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x)
            gray.at<uint8_t>(y, x) = mask.at(y, x);
    if (!cv::imwrite(path, gray)) throw IoError("cannot write mask: " + path);
}

uint64_t fnv1a64_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for hashing: " + path);
    uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        h = fnv1a64(buf, static_cast<size_t>(in.gcount()), h);
        if (!in) break;
    }
    return h;
}

}  // namespace wsigrade
