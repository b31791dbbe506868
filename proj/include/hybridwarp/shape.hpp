#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "hybridwarp/common.hpp"

namespace hw {

// Dense row-major extents, last dimension fastest. Volumes are rank-4 in
// channels-first order [C, D, H, W]; convolution weights are rank-5.
class Shape {
public:
    static constexpr int64_t kMaxElements = (int64_t{1} << 31) - 1;

    Shape() = default;
    Shape(std::initializer_list<int64_t> dims) : dims_(dims) { validate(); }
    explicit Shape(std::vector<int64_t> dims) : dims_(std::move(dims)) { validate(); }

    static Shape volume(int64_t c, int64_t d, int64_t h, int64_t w) { return Shape{c, d, h, w}; }
    static Shape scalar() { return Shape{1}; }

    int64_t numel() const {
        int64_t n = 1;
        for (int64_t d : dims_) n *= d;
        return n;
    }

    size_t rank() const { return dims_.size(); }
    int64_t operator[](size_t i) const { return dims_[i]; }
    const std::vector<int64_t>& dims() const { return dims_; }

    bool operator==(const Shape&) const = default;

    // Rank-4 volume accessors.
    int64_t channels() const { return dim4(0); }
    int64_t depth() const { return dim4(1); }
    int64_t height() const { return dim4(2); }
    int64_t width() const { return dim4(3); }
    int64_t spatial_numel() const { return depth() * height() * width(); }
    bool same_spatial(const Shape& o) const {
        return depth() == o.depth() && height() == o.height() && width() == o.width();
    }

    std::string str() const;

private:
    void validate() const;
    int64_t dim4(size_t i) const {
        if (dims_.size() != 4) throw ShapeError("expected a rank-4 volume shape, got " + str());
        return dims_[i];
    }

    std::vector<int64_t> dims_;
};

}  // namespace hw
