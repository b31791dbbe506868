#include "hybridwarp/shape.hpp"

#include <sstream>

namespace hw {

std::string Shape::str() const {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < dims_.size(); ++i) {
        if (i) os << ',';
        os << dims_[i];
    }
    os << ']';
    return os.str();
}

void Shape::validate() const {
    if (dims_.empty()) throw ShapeError("shape must have at least one dimension");
    int64_t n = 1;
    for (int64_t d : dims_) {
        if (d < 1) throw ShapeError("shape extent must be >= 1, got " + str());
        if (n > kMaxElements / d) throw ShapeError("element count exceeds 2^31 in " + str());
        n *= d;
    }
}

}  // namespace hw
