// Scalar reference kernels. These define the exact arithmetic every other
// backend must reproduce bit for bit.

#include <cmath>

#include "hybridwarp/common.hpp"
#include "hybridwarp/kernels.hpp"

namespace hw::kernels {
namespace {

void s_add(const double* a, const double* b, double* out, int64_t n) {
    for (int64_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void s_sub(const double* a, const double* b, double* out, int64_t n) {
    for (int64_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void s_mul(const double* a, const double* b, double* out, int64_t n) {
    for (int64_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void s_square(const double* a, double* out, int64_t n) {
    for (int64_t i = 0; i < n; ++i) out[i] = a[i] * a[i];
}

void s_absdiff(const double* a, const double* b, double* out, int64_t n) {
    for (int64_t i = 0; i < n; ++i) out[i] = std::fabs(a[i] - b[i]);
}

void s_leaky_relu(const double* x, double* y, int64_t n, double slope) {
    for (int64_t i = 0; i < n; ++i) y[i] = x[i] >= 0.0 ? x[i] : slope * x[i];
}

void s_leaky_relu_grad(const double* x, const double* gy, double* gx, int64_t n, double slope) {
    for (int64_t i = 0; i < n; ++i) gx[i] += x[i] >= 0.0 ? gy[i] : slope * gy[i];
}

void s_axpy(double a, const double* x, double* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void s_scale_shift(const double* x, double* y, int64_t n, double mul, double add) {
    for (int64_t i = 0; i < n; ++i) y[i] = mul * x[i] + add;
}

void s_mul_scaled_acc(const double* a, const double* b, double* out, int64_t n, double s) {
    for (int64_t i = 0; i < n; ++i) out[i] += s * (a[i] * b[i]);
}

// Per output element the accumulation order is bias, then (ci, kz, ky, kx)
// ascending. The AVX2 variant keeps exactly this order per lane.
void s_conv3d_forward(const double* in_pad, const double* weights, const double* bias,
                      double* out, const Conv3dDims& dims) {
    const int64_t d = dims.d, h = dims.h, w = dims.w;
    const int64_t hp = h + 2, wp = w + 2;
    const int64_t in_ch_stride = (d + 2) * hp * wp;
    parallel_for(dims.cout * d, threads(), [&](int64_t begin, int64_t end) {
        for (int64_t job = begin; job < end; ++job) {
            const int64_t co = job / d;
            const int64_t z = job % d;
            const double* wco = weights + co * dims.cin * 27;
            double* orow = out + (co * d + z) * h * w;
            for (int64_t y = 0; y < h; ++y) {
                for (int64_t x = 0; x < w; ++x) {
                    double acc = bias[co];
                    const double* wk = wco;
                    for (int64_t ci = 0; ci < dims.cin; ++ci) {
                        const double* ich = in_pad + ci * in_ch_stride;
                        for (int64_t kz = 0; kz < 3; ++kz) {
                            for (int64_t ky = 0; ky < 3; ++ky) {
                                const double* irow = ich + ((z + kz) * hp + (y + ky)) * wp + x;
                                acc += irow[0] * wk[0];
                                acc += irow[1] * wk[1];
                                acc += irow[2] * wk[2];
                                wk += 3;
                            }
                        }
                    }
                    orow[y * w + x] = acc;
                }
            }
        }
    });
}

// gin[ci](z,y,x) += sum_{co,k} gout_pad[co](z+kz, y+ky, x+kx) * w[co][ci][2-kz][2-ky][2-kx]
void s_conv3d_grad_input(const double* gout_pad, const double* weights, double* gin,
                         const Conv3dDims& dims) {
    const int64_t d = dims.d, h = dims.h, w = dims.w;
    const int64_t hp = h + 2, wp = w + 2;
    const int64_t g_ch_stride = (d + 2) * hp * wp;
    parallel_for(dims.cin * d, threads(), [&](int64_t begin, int64_t end) {
        for (int64_t job = begin; job < end; ++job) {
            const int64_t ci = job / d;
            const int64_t z = job % d;
            double* grow = gin + (ci * d + z) * h * w;
            for (int64_t y = 0; y < h; ++y) {
                for (int64_t x = 0; x < w; ++x) {
                    double acc = 0.0;
                    for (int64_t co = 0; co < dims.cout; ++co) {
                        const double* gch = gout_pad + co * g_ch_stride;
                        const double* wk = weights + (co * dims.cin + ci) * 27;
                        for (int64_t kz = 0; kz < 3; ++kz) {
                            for (int64_t ky = 0; ky < 3; ++ky) {
                                const double* grow_in = gch + ((z + kz) * hp + (y + ky)) * wp + x;
                                const double* wrow = wk + (2 - kz) * 9 + (2 - ky) * 3;
                                acc += grow_in[0] * wrow[2];
                                acc += grow_in[1] * wrow[1];
                                acc += grow_in[2] * wrow[0];
                            }
                        }
                    }
                    grow[y * w + x] += acc;
                }
            }
        }
    });
}

void s_adam_step(double* p, const double* g, double* m, double* v, int64_t n,
                 const AdamHp& hp, double bc1, double bc2) {
    for (int64_t i = 0; i < n; ++i) {
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * (g[i] * g[i]);
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p[i] = p[i] - hp.lr * (mhat / (std::sqrt(vhat) + hp.eps));
    }
}

constexpr KernelTable kScalar = {
    "scalar",
    s_add, s_sub, s_mul, s_square, s_absdiff,
    s_leaky_relu, s_leaky_relu_grad,
    s_axpy, s_scale_shift, s_mul_scaled_acc,
    s_conv3d_forward, s_conv3d_grad_input,
    s_adam_step,
};

}  // namespace

namespace detail {
const KernelTable& scalar_table() { return kScalar; }
}  // namespace detail

double sum(const double* x, int64_t n) {
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += x[i];
    return acc;
}

void fill(double* x, int64_t n, double v) {
    for (int64_t i = 0; i < n; ++i) x[i] = v;
}

void pad1(const double* in, double* out, int64_t c, int64_t d, int64_t h, int64_t w) {
    const int64_t hp = h + 2, wp = w + 2;
    const int64_t out_ch = (d + 2) * hp * wp;
    fill(out, c * out_ch, 0.0);
    for (int64_t ci = 0; ci < c; ++ci) {
        for (int64_t z = 0; z < d; ++z) {
            for (int64_t y = 0; y < h; ++y) {
                const double* src = in + ((ci * d + z) * h + y) * w;
                double* dst = out + ci * out_ch + ((z + 1) * hp + (y + 1)) * wp + 1;
                for (int64_t x = 0; x < w; ++x) dst[x] = src[x];
            }
        }
    }
}

void conv3d_grad_weights(const double* in_pad, const double* gout, double* gw,
                         const Conv3dDims& dims) {
    const int64_t d = dims.d, h = dims.h, w = dims.w;
    const int64_t hp = h + 2, wp = w + 2;
    const int64_t in_ch_stride = (d + 2) * hp * wp;
    // One volume pass per output channel; each gw slice is owned by exactly
    // one job so thread count never changes results.
    parallel_for(dims.cout, threads(), [&](int64_t begin, int64_t end) {
        for (int64_t co = begin; co < end; ++co) {
            double* gwc = gw + co * dims.cin * 27;
            const double* gch = gout + co * d * h * w;
            for (int64_t z = 0; z < d; ++z) {
                for (int64_t y = 0; y < h; ++y) {
                    for (int64_t x = 0; x < w; ++x) {
                        const double g = gch[(z * h + y) * w + x];
                        if (g == 0.0) continue;
                        double* gwk = gwc;
                        for (int64_t ci = 0; ci < dims.cin; ++ci) {
                            const double* ich = in_pad + ci * in_ch_stride;
                            for (int64_t kz = 0; kz < 3; ++kz) {
                                for (int64_t ky = 0; ky < 3; ++ky) {
                                    const double* irow = ich + ((z + kz) * hp + (y + ky)) * wp + x;
                                    gwk[0] += g * irow[0];
                                    gwk[1] += g * irow[1];
                                    gwk[2] += g * irow[2];
                                    gwk += 3;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

void conv3d_grad_bias(const double* gout, double* gb, const Conv3dDims& dims) {
    const int64_t spatial = dims.d * dims.h * dims.w;
    for (int64_t co = 0; co < dims.cout; ++co) gb[co] += sum(gout + co * spatial, spatial);
}

}  // namespace hw::kernels
