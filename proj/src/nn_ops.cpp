#include "hybridwarp/nn_ops.hpp"

#include <cmath>
#include <limits>
#include <memory>

#include "hybridwarp/common.hpp"
#include "hybridwarp/kernels.hpp"

namespace hw {

namespace {

void require_rank4(const Shape& s, const char* what) {
    if (s.rank() != 4) throw ShapeError(std::string(what) + ": expected rank-4 volume, got " + s.str());
}

// ---- trilinear / nearest sampling core --------------------------------

struct TriSample {
    int64_t x0, x1, y0, y1, z0, z1;
    double fx, fy, fz;
    bool gate_x, gate_y, gate_z;  // false where the raw coordinate left the valid range
};

inline double clamp_coord(double s, int64_t n) {
    const double hi = static_cast<double>(n - 1);
    return s < 0.0 ? 0.0 : (s > hi ? hi : s);
}

inline TriSample make_tri(double sx, double sy, double sz, int64_t w, int64_t h, int64_t d) {
    TriSample t;
    t.gate_x = sx > 0.0 && sx < static_cast<double>(w - 1);
    t.gate_y = sy > 0.0 && sy < static_cast<double>(h - 1);
    t.gate_z = sz > 0.0 && sz < static_cast<double>(d - 1);
    const double cx = clamp_coord(sx, w), cy = clamp_coord(sy, h), cz = clamp_coord(sz, d);
    t.x0 = static_cast<int64_t>(cx);
    t.y0 = static_cast<int64_t>(cy);
    t.z0 = static_cast<int64_t>(cz);
    t.x1 = t.x0 + 1 < w ? t.x0 + 1 : w - 1;
    t.y1 = t.y0 + 1 < h ? t.y0 + 1 : h - 1;
    t.z1 = t.z0 + 1 < d ? t.z0 + 1 : d - 1;
    t.fx = cx - static_cast<double>(t.x0);
    t.fy = cy - static_cast<double>(t.y0);
    t.fz = cz - static_cast<double>(t.z0);
    return t;
}

inline double tri_value(const double* ch, int64_t h, int64_t w, const TriSample& t) {
    auto at = [&](int64_t z, int64_t y, int64_t x) { return ch[(z * h + y) * w + x]; };
    // Integer sample coordinates copy the voxel directly so integer-shift
    // warps stay bit-exact.
    if (t.fx == 0.0 && t.fy == 0.0 && t.fz == 0.0) return at(t.z0, t.y0, t.x0);
    const double wx0 = 1.0 - t.fx, wy0 = 1.0 - t.fy, wz0 = 1.0 - t.fz;
    double v = 0.0;
    v += wz0 * wy0 * wx0 * at(t.z0, t.y0, t.x0);
    v += wz0 * wy0 * t.fx * at(t.z0, t.y0, t.x1);
    v += wz0 * t.fy * wx0 * at(t.z0, t.y1, t.x0);
    v += wz0 * t.fy * t.fx * at(t.z0, t.y1, t.x1);
    v += t.fz * wy0 * wx0 * at(t.z1, t.y0, t.x0);
    v += t.fz * wy0 * t.fx * at(t.z1, t.y0, t.x1);
    v += t.fz * t.fy * wx0 * at(t.z1, t.y1, t.x0);
    v += t.fz * t.fy * t.fx * at(t.z1, t.y1, t.x1);
    return v;
}

inline int64_t nearest_index(double s, int64_t n) {
    const double c = clamp_coord(s, n);
    int64_t i = static_cast<int64_t>(std::floor(c + 0.5));
    if (i > n - 1) i = n - 1;
    return i;
}

void warp_forward_raw(const double* img, const double* disp, double* out, int64_t c, int64_t d,
                      int64_t h, int64_t w, Interp interp) {
    const int64_t spatial = d * h * w;
    const double* ux = disp;
    const double* uy = disp + spatial;
    const double* uz = disp + 2 * spatial;
    parallel_for(c, kernels::threads(), [&](int64_t cb, int64_t ce) {
        for (int64_t ch = cb; ch < ce; ++ch) {
            const double* ichan = img + ch * spatial;
            double* ochan = out + ch * spatial;
            int64_t v = 0;
            for (int64_t z = 0; z < d; ++z) {
                for (int64_t y = 0; y < h; ++y) {
                    for (int64_t x = 0; x < w; ++x, ++v) {
                        const double sx = static_cast<double>(x) + ux[v];
                        const double sy = static_cast<double>(y) + uy[v];
                        const double sz = static_cast<double>(z) + uz[v];
                        if (interp == Interp::trilinear) {
                            ochan[v] = tri_value(ichan, h, w, make_tri(sx, sy, sz, w, h, d));
                        } else {
                            const int64_t ix = nearest_index(sx, w);
                            const int64_t iy = nearest_index(sy, h);
                            const int64_t iz = nearest_index(sz, d);
                            ochan[v] = ichan[(iz * h + iy) * w + ix];
                        }
                    }
                }
            }
        }
    });
}

void check_warp_shapes(const Shape& img, const Shape& disp) {
    require_rank4(img, "warp");
    require_rank4(disp, "warp");
    if (disp.channels() != 3)
        throw ShapeError("warp: displacement must have 3 channels, got " + disp.str());
    if (!img.same_spatial(disp))
        throw ShapeError("warp: image " + img.str() + " vs displacement " + disp.str());
}

}  // namespace

// ---- conv3d -----------------------------------------------------------

Ref conv3d(Ref in, Ref weights, Ref bias) {
    const Shape& is = in.shape();
    require_rank4(is, "conv3d");
    const Shape& ws = weights.shape();
    if (ws.rank() != 5 || ws[2] != 3 || ws[3] != 3 || ws[4] != 3)
        throw ShapeError("conv3d: weights must be [cout, cin, 3, 3, 3], got " + ws.str());
    if (ws[1] != is.channels())
        throw ShapeError("conv3d: input has " + std::to_string(is.channels()) +
                         " channels but weights expect " + std::to_string(ws[1]));
    if (bias.shape() != Shape{ws[0]}) throw ShapeError("conv3d: bias must be [cout]");

    const kernels::Conv3dDims dims{is.channels(), ws[0], is.depth(), is.height(), is.width()};
    const int64_t pad_len = dims.cin * (dims.d + 2) * (dims.h + 2) * (dims.w + 2);
    auto in_pad = std::make_shared<std::vector<double>>(static_cast<size_t>(pad_len));
    kernels::pad1(in.value().data(), in_pad->data(), dims.cin, dims.d, dims.h, dims.w);

    const Shape os = Shape::volume(dims.cout, dims.d, dims.h, dims.w);
    std::vector<double> out(static_cast<size_t>(os.numel()));
    kernels::table().conv3d_forward(in_pad->data(), weights.value().data(), bias.value().data(),
                                    out.data(), dims);

    Graph& g = *in.g;
    const bool rg = in.requires_grad() || weights.requires_grad() || bias.requires_grad();
    NodeId id = g.emplace(os, std::move(out), rg);
    if (rg) {
        g.at(id).backprop = [id, in, weights, bias, in_pad, dims](Graph& gr) {
            const auto& gout = gr.at(id).grad;
            if (gr.at(weights.id).requires_grad)
                kernels::conv3d_grad_weights(in_pad->data(), gout.data(),
                                             gr.grad_of(weights.id).data(), dims);
            if (gr.at(bias.id).requires_grad)
                kernels::conv3d_grad_bias(gout.data(), gr.grad_of(bias.id).data(), dims);
            if (gr.at(in.id).requires_grad) {
                const int64_t plen = dims.cout * (dims.d + 2) * (dims.h + 2) * (dims.w + 2);
                std::vector<double> gout_pad(static_cast<size_t>(plen));
                kernels::pad1(gout.data(), gout_pad.data(), dims.cout, dims.d, dims.h, dims.w);
                kernels::table().conv3d_grad_input(gout_pad.data(), weights.value().data(),
                                                   gr.grad_of(in.id).data(), dims);
            }
        };
    }
    return {&g, id};
}

// ---- batch_norm --------------------------------------------------------

Ref batch_norm(Ref in, Ref scale, Ref shift, NormParams& params, BnMode mode,
               bool update_running) {
    const Shape& s = in.shape();
    require_rank4(s, "batch_norm");
    const int64_t c = s.channels();
    if (c != params.channels || scale.shape() != Shape{c} || shift.shape() != Shape{c})
        throw ShapeError("batch_norm: channel mismatch for input " + s.str());
    const int64_t m = s.spatial_numel();

    auto mu = std::make_shared<std::vector<double>>(static_cast<size_t>(c));
    auto inv = std::make_shared<std::vector<double>>(static_cast<size_t>(c));
    const double* x = in.value().data();
    for (int64_t ch = 0; ch < c; ++ch) {
        double mean, var;
        if (mode == BnMode::train) {
            mean = kernels::sum(x + ch * m, m) / static_cast<double>(m);
            double acc = 0.0;
            for (int64_t i = 0; i < m; ++i) {
                const double dlt = x[ch * m + i] - mean;
                acc += dlt * dlt;
            }
            var = acc / static_cast<double>(m);
            if (update_running) {
                params.running_mean[ch] =
                    params.momentum * params.running_mean[ch] + (1.0 - params.momentum) * mean;
                params.running_var[ch] =
                    params.momentum * params.running_var[ch] + (1.0 - params.momentum) * var;
            }
        } else {
            mean = params.running_mean[ch];
            var = params.running_var[ch];
        }
        (*mu)[ch] = mean;
        (*inv)[ch] = 1.0 / std::sqrt(var + params.epsilon);
    }

    std::vector<double> out(in.value().size());
    for (int64_t ch = 0; ch < c; ++ch) {
        // y = x * (inv * scale) + (shift - mu * inv * scale)
        const double a = (*inv)[ch] * scale.value()[ch];
        const double b = shift.value()[ch] - (*mu)[ch] * a;
        kernels::table().scale_shift(x + ch * m, out.data() + ch * m, m, a, b);
    }

    Graph& g = *in.g;
    const bool rg = in.requires_grad() || scale.requires_grad() || shift.requires_grad();
    NodeId id = g.emplace(s, std::move(out), rg);
    if (rg) {
        g.at(id).backprop = [id, in, scale, shift, mu, inv, c, m, mode](Graph& gr) {
            const auto& gy = gr.at(id).grad;
            const double* xv = gr.at(in.id).value.data();
            const bool need_in = gr.at(in.id).requires_grad;
            const bool need_scale = gr.at(scale.id).requires_grad;
            const bool need_shift = gr.at(shift.id).requires_grad;
            for (int64_t ch = 0; ch < c; ++ch) {
                const double* xc = xv + ch * m;
                const double* gc = gy.data() + ch * m;
                const double mn = (*mu)[ch];
                const double iv = (*inv)[ch];
                double sum_g = 0.0, sum_gx = 0.0;
                for (int64_t i = 0; i < m; ++i) {
                    sum_g += gc[i];
                    sum_gx += gc[i] * ((xc[i] - mn) * iv);
                }
                if (need_scale) gr.grad_of(scale.id)[ch] += sum_gx;
                if (need_shift) gr.grad_of(shift.id)[ch] += sum_g;
                if (need_in) {
                    double* gi = gr.grad_of(in.id).data() + ch * m;
                    const double gamma_iv = gr.at(scale.id).value[ch] * iv;
                    if (mode == BnMode::train) {
                        const double mg = sum_g / static_cast<double>(m);
                        const double mgx = sum_gx / static_cast<double>(m);
                        for (int64_t i = 0; i < m; ++i) {
                            const double xhat = (xc[i] - mn) * iv;
                            gi[i] += gamma_iv * (gc[i] - mg - xhat * mgx);
                        }
                    } else {
                        for (int64_t i = 0; i < m; ++i) gi[i] += gamma_iv * gc[i];
                    }
                }
            }
        };
    }
    return {&g, id};
}

// ---- leaky_relu --------------------------------------------------------

Ref leaky_relu(Ref in, double slope) {
    std::vector<double> out(in.value().size());
    kernels::table().leaky_relu(in.value().data(), out.data(), in.shape().numel(), slope);
    Graph& g = *in.g;
    const bool rg = in.requires_grad();
    NodeId id = g.emplace(in.shape(), std::move(out), rg);
    if (rg) {
        g.at(id).backprop = [id, in, slope](Graph& gr) {
            const auto& gy = gr.at(id).grad;
            kernels::table().leaky_relu_grad(gr.at(in.id).value.data(), gy.data(),
                                             gr.grad_of(in.id).data(),
                                             static_cast<int64_t>(gy.size()), slope);
        };
    }
    return {&g, id};
}

// ---- max_pool / upsample ------------------------------------------------

Ref max_pool(Ref in) {
    const Shape& s = in.shape();
    require_rank4(s, "max_pool");
    const int64_t c = s.channels(), d = s.depth(), h = s.height(), w = s.width();
    if (d % 2 != 0 || h % 2 != 0 || w % 2 != 0)
        throw ShapeError("max_pool requires even spatial extents, got " + s.str());
    const Shape os = Shape::volume(c, d / 2, h / 2, w / 2);

    std::vector<double> out(static_cast<size_t>(os.numel()));
    auto argmax = std::make_shared<std::vector<int64_t>>(out.size());
    const double* x = in.value().data();
    int64_t o = 0;
    for (int64_t ch = 0; ch < c; ++ch) {
        const int64_t cbase = ch * d * h * w;
        for (int64_t z = 0; z < d; z += 2) {
            for (int64_t y = 0; y < h; y += 2) {
                for (int64_t xx = 0; xx < w; xx += 2, ++o) {
                    double best = -std::numeric_limits<double>::infinity();
                    int64_t best_i = -1;
                    for (int64_t dz = 0; dz < 2; ++dz)
                        for (int64_t dy = 0; dy < 2; ++dy)
                            for (int64_t dx = 0; dx < 2; ++dx) {
                                const int64_t i = cbase + ((z + dz) * h + (y + dy)) * w + (xx + dx);
                                if (x[i] > best) {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                    out[static_cast<size_t>(o)] = best;
                    (*argmax)[static_cast<size_t>(o)] = best_i;
                }
            }
        }
    }

    Graph& g = *in.g;
    const bool rg = in.requires_grad();
    NodeId id = g.emplace(os, std::move(out), rg);
    if (rg) {
        g.at(id).backprop = [id, in, argmax](Graph& gr) {
            const auto& gy = gr.at(id).grad;
            auto& gi = gr.grad_of(in.id);
            for (size_t i = 0; i < gy.size(); ++i) gi[static_cast<size_t>((*argmax)[i])] += gy[i];
        };
    }
    return {&g, id};
}

Ref upsample(Ref in) {
    const Shape& s = in.shape();
    require_rank4(s, "upsample");
    const int64_t c = s.channels(), d = s.depth(), h = s.height(), w = s.width();
    const Shape os = Shape::volume(c, 2 * d, 2 * h, 2 * w);
    std::vector<double> out(static_cast<size_t>(os.numel()));
    const double* x = in.value().data();
    int64_t o = 0;
    for (int64_t ch = 0; ch < c; ++ch) {
        const int64_t cbase = ch * d * h * w;
        for (int64_t z = 0; z < 2 * d; ++z) {
            for (int64_t y = 0; y < 2 * h; ++y) {
                const int64_t rbase = cbase + ((z / 2) * h + (y / 2)) * w;
                for (int64_t xx = 0; xx < 2 * w; ++xx, ++o)
                    out[static_cast<size_t>(o)] = x[rbase + xx / 2];
            }
        }
    }

    Graph& g = *in.g;
    const bool rg = in.requires_grad();
    NodeId id = g.emplace(os, std::move(out), rg);
    if (rg) {
        g.at(id).backprop = [id, in, c, d, h, w](Graph& gr) {
            const auto& gy = gr.at(id).grad;
            auto& gi = gr.grad_of(in.id);
            int64_t o = 0;
            for (int64_t ch = 0; ch < c; ++ch) {
                const int64_t cbase = ch * d * h * w;
                for (int64_t z = 0; z < 2 * d; ++z) {
                    for (int64_t y = 0; y < 2 * h; ++y) {
                        const int64_t rbase = cbase + ((z / 2) * h + (y / 2)) * w;
                        for (int64_t xx = 0; xx < 2 * w; ++xx, ++o)
                            gi[static_cast<size_t>(rbase + xx / 2)] += gy[static_cast<size_t>(o)];
                    }
                }
            }
        };
    }
    return {&g, id};
}

// ---- softmax over channels ----------------------------------------------

Ref softmax_channels(Ref in) {
    const Shape& s = in.shape();
    require_rank4(s, "softmax_channels");
    const int64_t c = s.channels();
    if (c < 2) throw ShapeError("softmax_channels requires >= 2 channels, got " + s.str());
    const int64_t m = s.spatial_numel();

    std::vector<double> out(in.value().size());
    const double* x = in.value().data();
    for (int64_t v = 0; v < m; ++v) {
        double mx = x[v];
        for (int64_t ch = 1; ch < c; ++ch) mx = std::max(mx, x[ch * m + v]);
        double denom = 0.0;
        for (int64_t ch = 0; ch < c; ++ch) {
            const double e = std::exp(x[ch * m + v] - mx);
            out[static_cast<size_t>(ch * m + v)] = e;
            denom += e;
        }
        for (int64_t ch = 0; ch < c; ++ch) out[static_cast<size_t>(ch * m + v)] /= denom;
    }

    Graph& g = *in.g;
    const bool rg = in.requires_grad();
    NodeId id = g.emplace(s, std::move(out), rg);
    if (rg) {
        g.at(id).backprop = [id, in, c, m](Graph& gr) {
            const auto& gy = gr.at(id).grad;
            const auto& y = gr.at(id).value;
            auto& gi = gr.grad_of(in.id);
            for (int64_t v = 0; v < m; ++v) {
                double dot = 0.0;
                for (int64_t ch = 0; ch < c; ++ch) dot += gy[static_cast<size_t>(ch * m + v)] * y[static_cast<size_t>(ch * m + v)];
                for (int64_t ch = 0; ch < c; ++ch) {
                    const size_t i = static_cast<size_t>(ch * m + v);
                    gi[i] += y[i] * (gy[i] - dot);
                }
            }
        };
    }
    return {&g, id};
}

// ---- concat / channel select ---------------------------------------------

Ref concat_channels(Ref a, Ref b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    require_rank4(sa, "concat_channels");
    require_rank4(sb, "concat_channels");
    if (!sa.same_spatial(sb))
        throw ShapeError("concat_channels: spatial mismatch " + sa.str() + " vs " + sb.str());
    if (a.g != b.g) throw ContractError("operands live in different graphs");
    const Shape os = Shape::volume(sa.channels() + sb.channels(), sa.depth(), sa.height(), sa.width());

    std::vector<double> out;
    out.reserve(static_cast<size_t>(os.numel()));
    out.insert(out.end(), a.value().begin(), a.value().end());
    out.insert(out.end(), b.value().begin(), b.value().end());

    Graph& g = *a.g;
    const bool rg = a.requires_grad() || b.requires_grad();
    NodeId id = g.emplace(os, std::move(out), rg);
    if (rg) {
        const size_t na = a.value().size();
        g.at(id).backprop = [id, a, b, na](Graph& gr) {
            const auto& gy = gr.at(id).grad;
            if (gr.at(a.id).requires_grad)
                kernels::table().axpy(1.0, gy.data(), gr.grad_of(a.id).data(), static_cast<int64_t>(na));
            if (gr.at(b.id).requires_grad)
                kernels::table().axpy(1.0, gy.data() + na, gr.grad_of(b.id).data(),
                                      static_cast<int64_t>(gy.size() - na));
        };
    }
    return {&g, id};
}

Ref select_channel(Ref in, int64_t c) {
    const Shape& s = in.shape();
    require_rank4(s, "select_channel");
    if (c < 0 || c >= s.channels())
        throw ShapeError("select_channel: channel " + std::to_string(c) + " out of range for " + s.str());
    const int64_t m = s.spatial_numel();
    const Shape os = Shape::volume(1, s.depth(), s.height(), s.width());
    std::vector<double> out(in.value().begin() + c * m, in.value().begin() + (c + 1) * m);

    Graph& g = *in.g;
    const bool rg = in.requires_grad();
    NodeId id = g.emplace(os, std::move(out), rg);
    if (rg) {
        g.at(id).backprop = [id, in, c, m](Graph& gr) {
            const auto& gy = gr.at(id).grad;
            kernels::table().axpy(1.0, gy.data(), gr.grad_of(in.id).data() + c * m, m);
        };
    }
    return {&g, id};
}

// ---- warp ---------------------------------------------------------------

Ref warp(Ref image, Ref disp, Interp interp) {
    check_warp_shapes(image.shape(), disp.shape());
    if (image.g != disp.g) throw ContractError("operands live in different graphs");
    const Shape& s = image.shape();
    const int64_t c = s.channels(), d = s.depth(), h = s.height(), w = s.width();

    std::vector<double> out(image.value().size());
    warp_forward_raw(image.value().data(), disp.value().data(), out.data(), c, d, h, w, interp);

    Graph& g = *image.g;
    // Nearest mode is evaluation-only: the node stops gradients.
    const bool rg = interp == Interp::trilinear && (image.requires_grad() || disp.requires_grad());
    NodeId id = g.emplace(s, std::move(out), rg);
    if (rg) {
        g.at(id).backprop = [id, image, disp, c, d, h, w](Graph& gr) {
            const auto& gy = gr.at(id).grad;
            const auto& img = gr.at(image.id).value;
            const auto& u = gr.at(disp.id).value;
            const int64_t m = d * h * w;
            const bool need_img = gr.at(image.id).requires_grad;
            const bool need_disp = gr.at(disp.id).requires_grad;
            double* gimg = need_img ? gr.grad_of(image.id).data() : nullptr;
            double* gdisp = need_disp ? gr.grad_of(disp.id).data() : nullptr;
            int64_t v = 0;
            for (int64_t z = 0; z < d; ++z) {
                for (int64_t y = 0; y < h; ++y) {
                    for (int64_t x = 0; x < w; ++x, ++v) {
                        const TriSample t = make_tri(static_cast<double>(x) + u[v],
                                                     static_cast<double>(y) + u[m + v],
                                                     static_cast<double>(z) + u[2 * m + v], w, h, d);
                        const double wx0 = 1.0 - t.fx, wy0 = 1.0 - t.fy, wz0 = 1.0 - t.fz;
                        const int64_t i000 = (t.z0 * h + t.y0) * w + t.x0;
                        const int64_t i001 = (t.z0 * h + t.y0) * w + t.x1;
                        const int64_t i010 = (t.z0 * h + t.y1) * w + t.x0;
                        const int64_t i011 = (t.z0 * h + t.y1) * w + t.x1;
                        const int64_t i100 = (t.z1 * h + t.y0) * w + t.x0;
                        const int64_t i101 = (t.z1 * h + t.y0) * w + t.x1;
                        const int64_t i110 = (t.z1 * h + t.y1) * w + t.x0;
                        const int64_t i111 = (t.z1 * h + t.y1) * w + t.x1;
                        double gux = 0.0, guy = 0.0, guz = 0.0;
                        for (int64_t ch = 0; ch < c; ++ch) {
                            const double go = gy[static_cast<size_t>(ch * m + v)];
                            if (go == 0.0 && !need_disp) continue;
                            const double* ic = img.data() + ch * m;
                            if (need_img) {
                                double* gc = gimg + ch * m;
                                gc[i000] += go * (wz0 * wy0 * wx0);
                                gc[i001] += go * (wz0 * wy0 * t.fx);
                                gc[i010] += go * (wz0 * t.fy * wx0);
                                gc[i011] += go * (wz0 * t.fy * t.fx);
                                gc[i100] += go * (t.fz * wy0 * wx0);
                                gc[i101] += go * (t.fz * wy0 * t.fx);
                                gc[i110] += go * (t.fz * t.fy * wx0);
                                gc[i111] += go * (t.fz * t.fy * t.fx);
                            }
                            if (need_disp) {
                                if (t.gate_x) {
                                    const double dx = wz0 * wy0 * (ic[i001] - ic[i000]) +
                                                      wz0 * t.fy * (ic[i011] - ic[i010]) +
                                                      t.fz * wy0 * (ic[i101] - ic[i100]) +
                                                      t.fz * t.fy * (ic[i111] - ic[i110]);
                                    gux += go * dx;
                                }
                                if (t.gate_y) {
                                    const double dy = wz0 * wx0 * (ic[i010] - ic[i000]) +
                                                      wz0 * t.fx * (ic[i011] - ic[i001]) +
                                                      t.fz * wx0 * (ic[i110] - ic[i100]) +
                                                      t.fz * t.fx * (ic[i111] - ic[i101]);
                                    guy += go * dy;
                                }
                                if (t.gate_z) {
                                    const double dz = wy0 * wx0 * (ic[i100] - ic[i000]) +
                                                      wy0 * t.fx * (ic[i101] - ic[i001]) +
                                                      t.fy * wx0 * (ic[i110] - ic[i010]) +
                                                      t.fy * t.fx * (ic[i111] - ic[i011]);
                                    guz += go * dz;
                                }
                            }
                        }
                        if (need_disp) {
                            gdisp[v] += gux;
                            gdisp[m + v] += guy;
                            gdisp[2 * m + v] += guz;
                        }
                    }
                }
            }
        };
    }
    return {&g, id};
}

// ---- diffusion penalty ----------------------------------------------------

namespace {

struct DiffusionDims {
    int64_t d, h, w, m;
    int64_t count;  // number of squared-derivative terms
};

DiffusionDims diffusion_dims(const Shape& s) {
    require_rank4(s, "diffusion_penalty");
    if (s.channels() != 3)
        throw ShapeError("diffusion_penalty: field must have 3 channels, got " + s.str());
    if (s.depth() < 2 || s.height() < 2 || s.width() < 2)
        throw ShapeError("diffusion_penalty requires spatial extents >= 2, got " + s.str());
    DiffusionDims dd;
    dd.d = s.depth();
    dd.h = s.height();
    dd.w = s.width();
    dd.m = dd.d * dd.h * dd.w;
    const int64_t nx = dd.d * dd.h * (dd.w - 1);
    const int64_t ny = dd.d * (dd.h - 1) * dd.w;
    const int64_t nz = (dd.d - 1) * dd.h * dd.w;
    dd.count = 3 * (nx + ny + nz);
    return dd;
}

// Sums squared forward differences of all components along all axes.
double diffusion_sum(const double* u, const DiffusionDims& dd) {
    double acc = 0.0;
    for (int64_t comp = 0; comp < 3; ++comp) {
        const double* uc = u + comp * dd.m;
        for (int64_t z = 0; z < dd.d; ++z) {
            for (int64_t y = 0; y < dd.h; ++y) {
                const int64_t row = (z * dd.h + y) * dd.w;
                for (int64_t x = 0; x < dd.w; ++x) {
                    const int64_t i = row + x;
                    if (x + 1 < dd.w) {
                        const double t = uc[i + 1] - uc[i];
                        acc += t * t;
                    }
                    if (y + 1 < dd.h) {
                        const double t = uc[i + dd.w] - uc[i];
                        acc += t * t;
                    }
                    if (z + 1 < dd.d) {
                        const double t = uc[i + dd.h * dd.w] - uc[i];
                        acc += t * t;
                    }
                }
            }
        }
    }
    return acc;
}

}  // namespace

Ref diffusion_penalty(Ref disp) {
    const DiffusionDims dd = diffusion_dims(disp.shape());
    const double value = diffusion_sum(disp.value().data(), dd) / static_cast<double>(dd.count);

    Graph& g = *disp.g;
    const bool rg = disp.requires_grad();
    NodeId id = g.emplace(Shape::scalar(), {value}, rg);
    if (rg) {
        g.at(id).backprop = [id, disp, dd](Graph& gr) {
            const double gl = gr.at(id).grad[0] * 2.0 / static_cast<double>(dd.count);
            const auto& u = gr.at(disp.id).value;
            auto& gu = gr.grad_of(disp.id);
            for (int64_t comp = 0; comp < 3; ++comp) {
                const double* uc = u.data() + comp * dd.m;
                double* gc = gu.data() + comp * dd.m;
                for (int64_t z = 0; z < dd.d; ++z) {
                    for (int64_t y = 0; y < dd.h; ++y) {
                        const int64_t row = (z * dd.h + y) * dd.w;
                        for (int64_t x = 0; x < dd.w; ++x) {
                            const int64_t i = row + x;
                            if (x + 1 < dd.w) {
                                const double t = gl * (uc[i + 1] - uc[i]);
                                gc[i + 1] += t;
                                gc[i] -= t;
                            }
                            if (y + 1 < dd.h) {
                                const double t = gl * (uc[i + dd.w] - uc[i]);
                                gc[i + dd.w] += t;
                                gc[i] -= t;
                            }
                            if (z + 1 < dd.d) {
                                const double t = gl * (uc[i + dd.h * dd.w] - uc[i]);
                                gc[i + dd.h * dd.w] += t;
                                gc[i] -= t;
                            }
                        }
                    }
                }
            }
        };
    }
    return {&g, id};
}

// ---- plain counterparts ----------------------------------------------------

Volume warp_volume(const Volume& image, const DisplacementField& disp, Interp interp) {
    check_warp_shapes(image.shape, disp.shape);
    Volume out(image.shape);
    warp_forward_raw(image.data.data(), disp.data.data(), out.data.data(), image.shape.channels(),
                     image.shape.depth(), image.shape.height(), image.shape.width(), interp);
    return out;
}

Mask warp_mask_nearest(const Mask& mask, const DisplacementField& disp) {
    check_warp_shapes(mask.shape, disp.shape);
    const int64_t d = mask.shape.depth(), h = mask.shape.height(), w = mask.shape.width();
    const int64_t m = d * h * w;
    Mask out(mask.shape);
    const double* ux = disp.data.data();
    const double* uy = ux + m;
    const double* uz = ux + 2 * m;
    int64_t v = 0;
    for (int64_t z = 0; z < d; ++z)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x, ++v) {
                const int64_t ix = nearest_index(static_cast<double>(x) + ux[v], w);
                const int64_t iy = nearest_index(static_cast<double>(y) + uy[v], h);
                const int64_t iz = nearest_index(static_cast<double>(z) + uz[v], d);
                out.data[static_cast<size_t>(v)] = mask.data[static_cast<size_t>((iz * h + iy) * w + ix)];
            }
    return out;
}

double diffusion_penalty_value(const DisplacementField& disp) {
    const DiffusionDims dd = diffusion_dims(disp.shape);
    return diffusion_sum(disp.data.data(), dd) / static_cast<double>(dd.count);
}

}  // namespace hw
