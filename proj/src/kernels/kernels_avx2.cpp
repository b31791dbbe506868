// AVX2 kernel variants. Every kernel performs the same IEEE operations in
// the same per-element order as the scalar reference (no fma, lane-wise
// mul/add/div/sqrt only), so results are bit-identical to the scalar table.

#include "hybridwarp/kernels.hpp"

#ifdef HW_HAVE_AVX2

#include <immintrin.h>

#include <cmath>

#include "hybridwarp/common.hpp"

namespace hw::kernels {
namespace {

void v_add(const double* a, const double* b, double* out, int64_t n) {
    int64_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

void v_sub(const double* a, const double* b, double* out, int64_t n) {
    int64_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] - b[i];
}

void v_mul(const double* a, const double* b, double* out, int64_t n) {
    int64_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] * b[i];
}

void v_square(const double* a, double* out, int64_t n) {
    int64_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d x = _mm256_loadu_pd(a + i);
        _mm256_storeu_pd(out + i, _mm256_mul_pd(x, x));
    }
    for (; i < n; ++i) out[i] = a[i] * a[i];
}

void v_absdiff(const double* a, const double* b, double* out, int64_t n) {
    const __m256d sign_mask = _mm256_set1_pd(-0.0);
    int64_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d d = _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i));
        _mm256_storeu_pd(out + i, _mm256_andnot_pd(sign_mask, d));
    }
    for (; i < n; ++i) out[i] = std::fabs(a[i] - b[i]);
}

void v_leaky_relu(const double* x, double* y, int64_t n, double slope) {
    const __m256d zero = _mm256_setzero_pd();
    const __m256d s = _mm256_set1_pd(slope);
    int64_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d v = _mm256_loadu_pd(x + i);
        const __m256d ge = _mm256_cmp_pd(v, zero, _CMP_GE_OQ);
        _mm256_storeu_pd(y + i, _mm256_blendv_pd(_mm256_mul_pd(s, v), v, ge));
    }
    for (; i < n; ++i) y[i] = x[i] >= 0.0 ? x[i] : slope * x[i];
}

void v_leaky_relu_grad(const double* x, const double* gy, double* gx, int64_t n, double slope) {
    const __m256d zero = _mm256_setzero_pd();
    const __m256d s = _mm256_set1_pd(slope);
    int64_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d v = _mm256_loadu_pd(x + i);
        const __m256d g = _mm256_loadu_pd(gy + i);
        const __m256d ge = _mm256_cmp_pd(v, zero, _CMP_GE_OQ);
        const __m256d contrib = _mm256_blendv_pd(_mm256_mul_pd(s, g), g, ge);
        _mm256_storeu_pd(gx + i, _mm256_add_pd(_mm256_loadu_pd(gx + i), contrib));
    }
    for (; i < n; ++i) gx[i] += x[i] >= 0.0 ? gy[i] : slope * gy[i];
}

void v_axpy(double a, const double* x, double* y, int64_t n) {
    const __m256d av = _mm256_set1_pd(a);
    int64_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d t = _mm256_mul_pd(av, _mm256_loadu_pd(x + i));
        _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), t));
    }
    for (; i < n; ++i) y[i] += a * x[i];
}

void v_scale_shift(const double* x, double* y, int64_t n, double mul, double add) {
    const __m256d m = _mm256_set1_pd(mul);
    const __m256d c = _mm256_set1_pd(add);
    int64_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_mul_pd(m, _mm256_loadu_pd(x + i)), c));
    for (; i < n; ++i) y[i] = mul * x[i] + add;
}

void v_mul_scaled_acc(const double* a, const double* b, double* out, int64_t n, double s) {
    const __m256d sv = _mm256_set1_pd(s);
    int64_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d prod = _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i));
        const __m256d t = _mm256_mul_pd(sv, prod);
        _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(out + i), t));
    }
    for (; i < n; ++i) out[i] += s * (a[i] * b[i]);
}

// Vectorizes over four adjacent output x positions; each lane accumulates
// bias-first then (ci, kz, ky, kx) ascending, exactly like the scalar loop.
void v_conv3d_forward(const double* in_pad, const double* weights, const double* bias,
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
                int64_t x = 0;
                for (; x + 4 <= w; x += 4) {
                    __m256d acc = _mm256_set1_pd(bias[co]);
                    const double* wk = wco;
                    for (int64_t ci = 0; ci < dims.cin; ++ci) {
                        const double* ich = in_pad + ci * in_ch_stride;
                        for (int64_t kz = 0; kz < 3; ++kz) {
                            for (int64_t ky = 0; ky < 3; ++ky) {
                                const double* irow = ich + ((z + kz) * hp + (y + ky)) * wp + x;
                                acc = _mm256_add_pd(
                                    acc, _mm256_mul_pd(_mm256_loadu_pd(irow), _mm256_set1_pd(wk[0])));
                                acc = _mm256_add_pd(
                                    acc, _mm256_mul_pd(_mm256_loadu_pd(irow + 1), _mm256_set1_pd(wk[1])));
                                acc = _mm256_add_pd(
                                    acc, _mm256_mul_pd(_mm256_loadu_pd(irow + 2), _mm256_set1_pd(wk[2])));
                                wk += 3;
                            }
                        }
                    }
                    _mm256_storeu_pd(orow + y * w + x, acc);
                }
                for (; x < w; ++x) {
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

void v_conv3d_grad_input(const double* gout_pad, const double* weights, double* gin,
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
                int64_t x = 0;
                for (; x + 4 <= w; x += 4) {
                    __m256d acc = _mm256_setzero_pd();
                    for (int64_t co = 0; co < dims.cout; ++co) {
                        const double* gch = gout_pad + co * g_ch_stride;
                        const double* wk = weights + (co * dims.cin + ci) * 27;
                        for (int64_t kz = 0; kz < 3; ++kz) {
                            for (int64_t ky = 0; ky < 3; ++ky) {
                                const double* gr = gch + ((z + kz) * hp + (y + ky)) * wp + x;
                                const double* wrow = wk + (2 - kz) * 9 + (2 - ky) * 3;
                                acc = _mm256_add_pd(
                                    acc, _mm256_mul_pd(_mm256_loadu_pd(gr), _mm256_set1_pd(wrow[2])));
                                acc = _mm256_add_pd(
                                    acc, _mm256_mul_pd(_mm256_loadu_pd(gr + 1), _mm256_set1_pd(wrow[1])));
                                acc = _mm256_add_pd(
                                    acc, _mm256_mul_pd(_mm256_loadu_pd(gr + 2), _mm256_set1_pd(wrow[0])));
                            }
                        }
                    }
                    double* dst = grow + y * w + x;
                    _mm256_storeu_pd(dst, _mm256_add_pd(_mm256_loadu_pd(dst), acc));
                }
                for (; x < w; ++x) {
                    double acc = 0.0;
                    for (int64_t co = 0; co < dims.cout; ++co) {
                        const double* gch = gout_pad + co * g_ch_stride;
                        const double* wk = weights + (co * dims.cin + ci) * 27;
                        for (int64_t kz = 0; kz < 3; ++kz) {
                            for (int64_t ky = 0; ky < 3; ++ky) {
                                const double* gr = gch + ((z + kz) * hp + (y + ky)) * wp + x;
                                const double* wrow = wk + (2 - kz) * 9 + (2 - ky) * 3;
                                acc += gr[0] * wrow[2];
                                acc += gr[1] * wrow[1];
                                acc += gr[2] * wrow[0];
                            }
                        }
                    }
                    grow[y * w + x] += acc;
                }
            }
        }
    });
}

void v_adam_step(double* p, const double* g, double* m, double* v, int64_t n,
                 const AdamHp& hp, double bc1, double bc2) {
    const __m256d b1 = _mm256_set1_pd(hp.beta1);
    const __m256d b1c = _mm256_set1_pd(1.0 - hp.beta1);
    const __m256d b2 = _mm256_set1_pd(hp.beta2);
    const __m256d b2c = _mm256_set1_pd(1.0 - hp.beta2);
    const __m256d bc1v = _mm256_set1_pd(bc1);
    const __m256d bc2v = _mm256_set1_pd(bc2);
    const __m256d lr = _mm256_set1_pd(hp.lr);
    const __m256d eps = _mm256_set1_pd(hp.eps);
    int64_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d gv = _mm256_loadu_pd(g + i);
        const __m256d mv = _mm256_add_pd(_mm256_mul_pd(b1, _mm256_loadu_pd(m + i)),
                                         _mm256_mul_pd(b1c, gv));
        const __m256d g2 = _mm256_mul_pd(gv, gv);
        const __m256d vv = _mm256_add_pd(_mm256_mul_pd(b2, _mm256_loadu_pd(v + i)),
                                         _mm256_mul_pd(b2c, g2));
        _mm256_storeu_pd(m + i, mv);
        _mm256_storeu_pd(v + i, vv);
        const __m256d mhat = _mm256_div_pd(mv, bc1v);
        const __m256d vhat = _mm256_div_pd(vv, bc2v);
        const __m256d denom = _mm256_add_pd(_mm256_sqrt_pd(vhat), eps);
        const __m256d step = _mm256_mul_pd(lr, _mm256_div_pd(mhat, denom));
        _mm256_storeu_pd(p + i, _mm256_sub_pd(_mm256_loadu_pd(p + i), step));
    }
    for (; i < n; ++i) {
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * (g[i] * g[i]);
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p[i] = p[i] - hp.lr * (mhat / (std::sqrt(vhat) + hp.eps));
    }
}

constexpr KernelTable kAvx2 = {
    "avx2",
    v_add, v_sub, v_mul, v_square, v_absdiff,
    v_leaky_relu, v_leaky_relu_grad,
    v_axpy, v_scale_shift, v_mul_scaled_acc,
    v_conv3d_forward, v_conv3d_grad_input,
    v_adam_step,
};

}  // namespace

namespace detail {

const KernelTable& avx2_table() { return kAvx2; }

bool avx2_runtime_supported() {
#if defined(__x86_64__) || defined(__i386__)
    return __builtin_cpu_supports("avx2");
#else
    return false;
#endif
}

}  // namespace detail
}  // namespace hw::kernels

#endif  // HW_HAVE_AVX2
