#pragma once

#include <cstddef>
#include <vector>

namespace voxfuse {

/// Row-major interleaved image of doubles. Depth maps use one channel
/// (meters, 0 = invalid), color three channels in [0,1], normals three
/// channels with (0,0,0) marking invalid pixels.
struct Image {
    int width = 0;
    int height = 0;
    int channels = 1;
    std::vector<double> data;

    Image() = default;
    Image(int w, int h, int c)
        : width(w), height(h), channels(c),
          data(static_cast<size_t>(w) * static_cast<size_t>(h) * static_cast<size_t>(c), 0.0) {}

    double& at(int y, int x, int c = 0) {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    double at(int y, int x, int c = 0) const {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    size_t pixel_count() const { return static_cast<size_t>(width) * height; }
    bool same_size(const Image& o) const { return width == o.width && height == o.height; }
};

}  // namespace voxfuse
