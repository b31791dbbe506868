#pragma once

#include <cstdint>
#include <vector>

#include "hybridwarp/shape.hpp"

namespace hw {

// Plain dense C-channel 3-D grid of doubles, outside any autodiff graph.
struct Volume {
    Shape shape;
    std::vector<double> data;

    Volume() = default;
    explicit Volume(Shape s, double fill = 0.0)
        : shape(std::move(s)), data(static_cast<size_t>(shape.numel()), fill) {}
    Volume(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
        if (static_cast<int64_t>(data.size()) != shape.numel())
            throw ShapeError("volume data length does not match shape " + shape.str());
    }

    int64_t numel() const { return shape.numel(); }

    int64_t index(int64_t c, int64_t z, int64_t y, int64_t x) const {
        return ((c * shape.depth() + z) * shape.height() + y) * shape.width() + x;
    }
    double at(int64_t c, int64_t z, int64_t y, int64_t x) const { return data[index(c, z, y, x)]; }
    double& at(int64_t c, int64_t z, int64_t y, int64_t x) { return data[index(c, z, y, x)]; }
};

// Binary mask on a [1, D, H, W] grid; values strictly in {0, 1}.
struct Mask {
    Shape shape;
    std::vector<uint8_t> data;

    Mask() = default;
    explicit Mask(Shape s) : shape(std::move(s)), data(static_cast<size_t>(shape.numel()), 0) {
        if (shape.channels() != 1) throw ShapeError("mask must have one channel, got " + shape.str());
    }

    int64_t numel() const { return shape.numel(); }
    int64_t index(int64_t z, int64_t y, int64_t x) const {
        return (z * shape.height() + y) * shape.width() + x;
    }
    uint8_t at(int64_t z, int64_t y, int64_t x) const { return data[index(z, y, x)]; }
    uint8_t& at(int64_t z, int64_t y, int64_t x) { return data[index(z, y, x)]; }

    int64_t count() const {
        int64_t n = 0;
        for (uint8_t v : data) n += v;
        return n;
    }
};

// Dense per-voxel displacements in voxel units, shape [3, D, H, W].
// Channel 0 displaces along W (x), channel 1 along H (y), channel 2 along D (z).
// The warp convention is output(x) = image(x + u(x)).
using DisplacementField = Volume;

inline void require_displacement(const Volume& disp) {
    if (disp.shape.channels() != 3)
        throw ShapeError("displacement field must have 3 channels, got " + disp.shape.str());
}

}  // namespace hw
