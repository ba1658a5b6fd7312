#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wsigrade/common.hpp"

namespace wsigrade {

// Interleaved 8-bit RGB, row-major.
struct Image {
    int height = 0;
    int width = 0;
    std::vector<uint8_t> data;  // height*width*3

    Image() = default;
    Image(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w * 3, 0) {}

    static Image filled(int h, int w, uint8_t r, uint8_t g, uint8_t b) {
        Image img(h, w);
        for (size_t i = 0; i < img.data.size(); i += 3) {
            img.data[i] = r;
            img.data[i + 1] = g;
            img.data[i + 2] = b;
        }
        return img;
    }

    bool empty() const { return height == 0 || width == 0; }
    size_t pixel_count() const { return static_cast<size_t>(height) * width; }

    uint8_t& at(int y, int x, int c) {
        return data[(static_cast<size_t>(y) * width + x) * 3 + c];
    }
    uint8_t at(int y, int x, int c) const {
        return data[(static_cast<size_t>(y) * width + x) * 3 + c];
    }
};

struct Hsv {
    double h;  // degrees [0, 360)
    double s;  // [0, 1]
    double v;  // [0, 1]
};

Hsv rgb_to_hsv(uint8_t r, uint8_t g, uint8_t b);
void hsv_to_rgb(const Hsv& hsv, uint8_t& r, uint8_t& g, uint8_t& b);

Image flip_horizontal(const Image& img);
Image flip_vertical(const Image& img);
Image rotate90(const Image& img, int quarter_turns);

// luma-weighted gray value of one pixel
inline double luma(uint8_t r, uint8_t g, uint8_t b) {
    return 0.299 * r + 0.587 * g + 0.114 * b;
}

// PNG/TIFF via OpenCV; data stored RGB regardless of codec channel order.
Image load_image(const std::string& path);
void save_png(const std::string& path, const Image& img);

// 8-bit single-channel masks (stored as grayscale PNG)
struct Mask {
    int height = 0;
    int width = 0;
    std::vector<uint8_t> data;

    Mask() = default;
    Mask(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w, 0) {}
    uint8_t& at(int y, int x) { return data[static_cast<size_t>(y) * width + x]; }
    uint8_t at(int y, int x) const { return data[static_cast<size_t>(y) * width + x]; }
    bool empty_mask() const;
};

Mask load_mask(const std::string& path);
void save_mask_png(const std::string& path, const Mask& mask);

}  // namespace wsigrade
