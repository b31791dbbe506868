#pragma once

#include <cstdint>
#include <string>

namespace hw::kernels {

// Inner arithmetic loops exist in a scalar reference variant and an AVX2
// variant selected at runtime. Both variants are required to produce
// bit-identical results: the AVX2 code performs the same IEEE operations in
// the same per-element order (no fma, no reassociated reductions), which the
// equivalence tests assert. Reductions (sums, grad-weights accumulation)
// stay scalar with a fixed sequential order so loss scalars never depend on
// the selected backend.

enum class Backend { scalar, avx2 };

struct Conv3dDims {
    int64_t cin = 0, cout = 0;
    int64_t d = 0, h = 0, w = 0;  // output spatial extents (same as input)
};

struct AdamHp {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct KernelTable {
    const char* name;

    void (*ew_add)(const double* a, const double* b, double* out, int64_t n);
    void (*ew_sub)(const double* a, const double* b, double* out, int64_t n);
    void (*ew_mul)(const double* a, const double* b, double* out, int64_t n);
    void (*ew_square)(const double* a, double* out, int64_t n);
    void (*ew_absdiff)(const double* a, const double* b, double* out, int64_t n);
    void (*leaky_relu)(const double* x, double* y, int64_t n, double slope);
    // gx[i] += gy[i] * (x[i] >= 0 ? 1 : slope)
    void (*leaky_relu_grad)(const double* x, const double* gy, double* gx, int64_t n, double slope);
    // y[i] += a * x[i]
    void (*axpy)(double a, const double* x, double* y, int64_t n);
    // y[i] = mul * x[i] + add
    void (*scale_shift)(const double* x, double* y, int64_t n, double mul, double add);
    // out[i] += s * a[i] * b[i]
    void (*mul_scaled_acc)(const double* a, const double* b, double* out, int64_t n, double s);

    // 3x3x3 stride-1 cross-correlation over a zero-padded input buffer of
    // extents [cin, d+2, h+2, w+2]. Writes out[cout, d, h, w].
    void (*conv3d_forward)(const double* in_pad, const double* weights, const double* bias,
                           double* out, const Conv3dDims& dims);
    // Accumulates into gin[cin, d, h, w] from the zero-padded output
    // gradient gout_pad[cout, d+2, h+2, w+2] (correlation with the
    // spatially flipped kernels).
    void (*conv3d_grad_input)(const double* gout_pad, const double* weights, double* gin,
                              const Conv3dDims& dims);
    // Bias-corrected Adam update, element-wise. bc1/bc2 are 1 - beta^t.
    void (*adam_step)(double* p, const double* g, double* m, double* v, int64_t n,
                      const AdamHp& hp, double bc1, double bc2);
};

const KernelTable& table();
const KernelTable& table(Backend b);
Backend active_backend();
// Throws ContractError when the backend is not available on this machine.
void set_backend(Backend b);
bool backend_available(Backend b);

int threads();
void set_threads(int n);

// Fixed-order helpers without SIMD variants.
double sum(const double* x, int64_t n);
void fill(double* x, int64_t n, double v);
// Copies [c, d, h, w] into a zero-bordered [c, d+2, h+2, w+2] buffer.
void pad1(const double* in, double* out, int64_t c, int64_t d, int64_t h, int64_t w);
// gw[cout, cin, 3, 3, 3] += correlation of padded input with gout.
void conv3d_grad_weights(const double* in_pad, const double* gout, double* gw, const Conv3dDims& dims);
// gb[co] += sum of gout over the spatial extent of channel co.
void conv3d_grad_bias(const double* gout, double* gb, const Conv3dDims& dims);

namespace detail {
const KernelTable& scalar_table();
#ifdef HW_HAVE_AVX2
const KernelTable& avx2_table();
bool avx2_runtime_supported();
#endif
}  // namespace detail

}  // namespace hw::kernels
