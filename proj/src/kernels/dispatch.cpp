#include <atomic>
#include <cstdlib>
#include <string>

#include "hybridwarp/common.hpp"
#include "hybridwarp/kernels.hpp"

namespace hw::kernels {
namespace {

std::atomic<int> g_threads{1};

Backend pick_initial_backend() {
#ifdef HW_HAVE_AVX2
    const char* env = std::getenv("HYBRIDWARP_SIMD");
    if (env != nullptr && std::string(env) == "scalar") return Backend::scalar;
    if (detail::avx2_runtime_supported()) return Backend::avx2;
#endif
    return Backend::scalar;
}

std::atomic<Backend> g_backend{pick_initial_backend()};

}  // namespace

bool backend_available(Backend b) {
    if (b == Backend::scalar) return true;
#ifdef HW_HAVE_AVX2
    return detail::avx2_runtime_supported();
#else
    (void)b;
    return false;
#endif
}

const KernelTable& table(Backend b) {
    if (b == Backend::scalar) return detail::scalar_table();
#ifdef HW_HAVE_AVX2
    if (detail::avx2_runtime_supported()) return detail::avx2_table();
#endif
    throw ContractError("avx2 kernel backend is not available on this machine");
}

const KernelTable& table() { return table(g_backend.load()); }

Backend active_backend() { return g_backend.load(); }

void set_backend(Backend b) {
    if (!backend_available(b)) throw ContractError("requested kernel backend is not available");
    g_backend.store(b);
}

int threads() { return g_threads.load(); }

void set_threads(int n) { g_threads.store(n < 1 ? 1 : n); }

}  // namespace hw::kernels
