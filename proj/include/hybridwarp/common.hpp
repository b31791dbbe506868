#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace hw {

// Error taxonomy. One class per failure mode so the CLI can map exceptions
// to its documented exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

// Violated call contract (non-scalar loss, empty dataset, ...).
struct ContractError : Error {
    using Error::Error;
};

struct EmptyRegionError : ContractError {
    using ContractError::ContractError;
};

// Non-finite values where finite ones are required.
struct NumericError : Error {
    using Error::Error;
};

// Malformed file contents (bad magic, truncation, schema violations).
struct FormatError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// A manifest or report references something that does not exist.
struct MissingInputError : Error {
    using Error::Error;
};

struct DivergenceError : Error {
    using Error::Error;
};

struct ArgError : Error {
    using Error::Error;
};

// Deterministic RNG used everywhere randomness is needed. xoshiro256**
// seeded through splitmix64, with Box-Muller normals. Self-contained so
// that identical seeds give identical streams on every platform and
// standard library.
class Rng {
public:
    explicit Rng(uint64_t seed);

    uint64_t next_u64();
    // Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi);
    // Standard normal deviate (Box-Muller, cached spare).
    double normal();
    // Uniform integer in [0, n), unbiased via rejection.
    uint64_t uniform_int(uint64_t n);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derives an independent stream seed from a base seed and a tag.
    static uint64_t derive(uint64_t seed, uint64_t tag);

private:
    uint64_t state_[4];
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Runs fn(begin, end) over [0, n) split into contiguous chunks on up to
// `threads` std::threads. Chunks never overlap, so kernels that write
// disjoint outputs stay bit-identical for every thread count.
void parallel_for(int64_t n, int threads, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace hw
