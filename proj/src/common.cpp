#include "hybridwarp/common.hpp"

#include <cmath>
#include <thread>
#include <vector>

namespace hw {

namespace {

uint64_t splitmix64(uint64_t& x) {
    x += 0x9E3779B97F4A7C15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

uint64_t rotl(uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
}

}  // namespace

Rng::Rng(uint64_t seed) {
    uint64_t s = seed;
    for (auto& w : state_) w = splitmix64(s);
}

uint64_t Rng::next_u64() {
    const uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // Box-Muller; u clamped away from 0 so log stays finite.
    double u = uniform();
    if (u <= 0.0) u = 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u));
    const double phi = 2.0 * 3.141592653589793238462643383279502884 * uniform();
    spare_ = r * std::sin(phi);
    has_spare_ = true;
    return r * std::cos(phi);
}

uint64_t Rng::uniform_int(uint64_t n) {
    if (n == 0) throw ContractError("uniform_int: n must be positive");
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
}

uint64_t Rng::derive(uint64_t seed, uint64_t tag) {
    uint64_t s = seed ^ (0xD1B54A32D192ED03ULL * (tag + 1));
    uint64_t mixed = splitmix64(s);
    return mixed ^ splitmix64(s);
}

void parallel_for(int64_t n, int threads, const std::function<void(int64_t, int64_t)>& fn) {
    if (n <= 0) return;
    const int64_t workers = std::min<int64_t>(std::max(threads, 1), n);
    if (workers <= 1) {
        fn(0, n);
        return;
    }
    const int64_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers) - 1);
    for (int64_t w = 1; w < workers; ++w) {
        const int64_t begin = w * chunk;
        const int64_t end = std::min(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back(fn, begin, end);
    }
    fn(0, std::min(n, chunk));
    for (auto& t : pool) t.join();
}

}  // namespace hw
