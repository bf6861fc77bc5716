#include "cmc/graph.hpp"

#include <cmath>

namespace cmc {

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

// output extent for stride-s "same" convolution
int64_t out_extent(int64_t in, int stride) { return (in - 1) / stride + 1; }

} // namespace

NodeId op_add(Graph& g, NodeId a, NodeId b) {
    const Tensor& va = g.value(a);
    const Tensor& vb = g.value(b);
    check_same_shape(va, vb, "add");
    Tensor out = va;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += vb[i];
    bool ng = g.needs_grad(a) || g.needs_grad(b);
    return g.push(std::move(out), ng, {a, b}, [a, b](Graph& gg, NodeId self) {
        const Tensor& go = gg.grad(self);
        if (gg.needs_grad(a)) gg.grad(a).add_scaled(go, 1.0);
        if (gg.needs_grad(b)) gg.grad(b).add_scaled(go, 1.0);
    });
}

NodeId op_sub(Graph& g, NodeId a, NodeId b) {
    const Tensor& va = g.value(a);
    const Tensor& vb = g.value(b);
    check_same_shape(va, vb, "sub");
    Tensor out = va;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= vb[i];
    bool ng = g.needs_grad(a) || g.needs_grad(b);
    return g.push(std::move(out), ng, {a, b}, [a, b](Graph& gg, NodeId self) {
        const Tensor& go = gg.grad(self);
        if (gg.needs_grad(a)) gg.grad(a).add_scaled(go, 1.0);
        if (gg.needs_grad(b)) gg.grad(b).add_scaled(go, -1.0);
    });
}

NodeId op_scale(Graph& g, NodeId a, double s) {
    Tensor out = g.value(a);
    for (double& v : out.data) v *= s;
    return g.push(std::move(out), g.needs_grad(a), {a}, [a, s](Graph& gg, NodeId self) {
        if (gg.needs_grad(a)) gg.grad(a).add_scaled(gg.grad(self), s);
    });
}

NodeId op_add_scalar_nodes(Graph& g, NodeId a, NodeId b) {
    if (g.value(a).numel() != 1 || g.value(b).numel() != 1)
        throw std::invalid_argument("add_scalar_nodes: operands must be scalar");
    return op_add(g, a, b);
}

NodeId op_sum(Graph& g, NodeId a) {
    double acc = 0.0;
    for (double v : g.value(a).data) acc += v;
    return g.push(Tensor::scalar(acc), g.needs_grad(a), {a}, [a](Graph& gg, NodeId self) {
        if (!gg.needs_grad(a)) return;
        const double go = gg.grad(self)[0];
        Tensor& ga = gg.grad(a);
        for (double& v : ga.data) v += go;
    });
}

NodeId op_sum_squares(Graph& g, NodeId a) {
    double acc = 0.0;
    for (double v : g.value(a).data) acc += v * v;
    return g.push(Tensor::scalar(acc), g.needs_grad(a), {a}, [a](Graph& gg, NodeId self) {
        if (!gg.needs_grad(a)) return;
        const double go = gg.grad(self)[0];
        const Tensor& va = gg.value(a);
        Tensor& ga = gg.grad(a);
        for (int64_t i = 0; i < va.numel(); ++i) ga[i] += go * 2.0 * va[i];
    });
}

NodeId op_sum_squared_diff(Graph& g, NodeId a, const Tensor& target) {
    const Tensor& va = g.value(a);
    check_same_shape(va, target, "sum_squared_diff");
    double acc = 0.0;
    for (int64_t i = 0; i < va.numel(); ++i) {
        const double d = va[i] - target[i];
        acc += d * d;
    }
    // capture the target by value; it is a constant of the graph
    Tensor t = target;
    return g.push(Tensor::scalar(acc), g.needs_grad(a), {a},
                  [a, t = std::move(t)](Graph& gg, NodeId self) {
                      if (!gg.needs_grad(a)) return;
                      const double go = gg.grad(self)[0];
                      const Tensor& va = gg.value(a);
                      Tensor& ga = gg.grad(a);
                      for (int64_t i = 0; i < va.numel(); ++i)
                          ga[i] += go * 2.0 * (va[i] - t[i]);
                  });
}

// ---- convolution kernels ----

void conv2d_accumulate(const Tensor& x, const Tensor& w, int stride, Tensor& out) {
    const int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int64_t Ho = out.dim(2), Wo = out.dim(3);
    const int64_t ph = (kh - 1) / 2, pw = (kw - 1) / 2;
    const double* xd = x.data.data();
    const double* wd = w.data.data();
    double* od = out.data.data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t co = 0; co < Cout; ++co)
            for (int64_t ci = 0; ci < Cin; ++ci)
                for (int64_t ky = 0; ky < kh; ++ky)
                    for (int64_t kx = 0; kx < kw; ++kx) {
                        const double wv = wd[((co * Cin + ci) * kh + ky) * kw + kx];
                        if (wv == 0.0) continue;
                        // ox range with 0 <= ox*stride + kx - pw < W
                        int64_t lo = 0;
                        if (kx < pw) lo = (pw - kx + stride - 1) / stride;
                        const int64_t span = W - 1 - kx + pw; // < 0: no valid column
                        int64_t hi = span < 0 ? -1 : span / stride;
                        if (hi > Wo - 1) hi = Wo - 1;
                        for (int64_t oy = 0; oy < Ho; ++oy) {
                            const int64_t iy = oy * stride + ky - ph;
                            if (iy < 0 || iy >= H) continue;
                            const double* __restrict xrow =
                                xd + ((n * Cin + ci) * H + iy) * W + kx - pw;
                            double* __restrict orow = od + ((n * Cout + co) * Ho + oy) * Wo;
                            if (stride == 1) {
                                for (int64_t ox = lo; ox <= hi; ++ox) orow[ox] += wv * xrow[ox];
                            } else {
                                for (int64_t ox = lo; ox <= hi; ++ox)
                                    orow[ox] += wv * xrow[ox * stride];
                            }
                        }
                    }
}

void conv2d_grad_input_accumulate(const Tensor& gout, const Tensor& w, int stride, Tensor& gin) {
    const int64_t N = gin.dim(0), Cin = gin.dim(1), H = gin.dim(2), W = gin.dim(3);
    const int64_t Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int64_t Ho = gout.dim(2), Wo = gout.dim(3);
    const int64_t ph = (kh - 1) / 2, pw = (kw - 1) / 2;
    const double* gd = gout.data.data();
    const double* wd = w.data.data();
    double* id = gin.data.data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t co = 0; co < Cout; ++co)
            for (int64_t ci = 0; ci < Cin; ++ci)
                for (int64_t ky = 0; ky < kh; ++ky)
                    for (int64_t kx = 0; kx < kw; ++kx) {
                        const double wv = wd[((co * Cin + ci) * kh + ky) * kw + kx];
                        if (wv == 0.0) continue;
                        int64_t lo = 0;
                        if (kx < pw) lo = (pw - kx + stride - 1) / stride;
                        const int64_t span = W - 1 - kx + pw; // < 0: no valid column
                        int64_t hi = span < 0 ? -1 : span / stride;
                        if (hi > Wo - 1) hi = Wo - 1;
                        for (int64_t oy = 0; oy < Ho; ++oy) {
                            const int64_t iy = oy * stride + ky - ph;
                            if (iy < 0 || iy >= H) continue;
                            double* __restrict irow = id + ((n * Cin + ci) * H + iy) * W + kx - pw;
                            const double* __restrict grow = gd + ((n * Cout + co) * Ho + oy) * Wo;
                            if (stride == 1) {
                                for (int64_t ox = lo; ox <= hi; ++ox) irow[ox] += wv * grow[ox];
                            } else {
                                for (int64_t ox = lo; ox <= hi; ++ox)
                                    irow[ox * stride] += wv * grow[ox];
                            }
                        }
                    }
}

void conv2d_grad_kernel_accumulate(const Tensor& x, const Tensor& gout, int stride, Tensor& gw) {
    const int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t Cout = gw.dim(0), kh = gw.dim(2), kw = gw.dim(3);
    const int64_t Ho = gout.dim(2), Wo = gout.dim(3);
    const int64_t ph = (kh - 1) / 2, pw = (kw - 1) / 2;
    const double* xd = x.data.data();
    const double* gd = gout.data.data();
    double* wd = gw.data.data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t co = 0; co < Cout; ++co)
            for (int64_t ci = 0; ci < Cin; ++ci)
                for (int64_t ky = 0; ky < kh; ++ky)
                    for (int64_t kx = 0; kx < kw; ++kx) {
                        int64_t lo = 0;
                        if (kx < pw) lo = (pw - kx + stride - 1) / stride;
                        const int64_t span = W - 1 - kx + pw; // < 0: no valid column
                        int64_t hi = span < 0 ? -1 : span / stride;
                        if (hi > Wo - 1) hi = Wo - 1;
                        double acc = 0.0;
                        for (int64_t oy = 0; oy < Ho; ++oy) {
                            const int64_t iy = oy * stride + ky - ph;
                            if (iy < 0 || iy >= H) continue;
                            const double* __restrict xrow =
                                xd + ((n * Cin + ci) * H + iy) * W + kx - pw;
                            const double* __restrict grow = gd + ((n * Cout + co) * Ho + oy) * Wo;
                            if (stride == 1) {
                                for (int64_t ox = lo; ox <= hi; ++ox) acc += grow[ox] * xrow[ox];
                            } else {
                                for (int64_t ox = lo; ox <= hi; ++ox)
                                    acc += grow[ox] * xrow[ox * stride];
                            }
                        }
                        wd[((co * Cin + ci) * kh + ky) * kw + kx] += acc;
                    }
}

namespace {

void add_bias_channels(Tensor& out, const Tensor& b) {
    const int64_t N = out.dim(0), C = out.dim(1), HW = out.dim(2) * out.dim(3);
    double* od = out.data.data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const double bv = b[c];
            double* row = od + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) row[i] += bv;
        }
}

void bias_grad_accumulate(const Tensor& gout, Tensor& gb) {
    const int64_t N = gout.dim(0), C = gout.dim(1), HW = gout.dim(2) * gout.dim(3);
    const double* gd = gout.data.data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const double* row = gd + (n * C + c) * HW;
            double acc = 0.0;
            for (int64_t i = 0; i < HW; ++i) acc += row[i];
            gb[c] += acc;
        }
}

} // namespace

NodeId op_conv2d(Graph& g, NodeId x, NodeId w, NodeId b, int stride) {
    const Tensor& xv = g.value(x);
    const Tensor& wv = g.value(w);
    if (xv.ndim() != 4 || wv.ndim() != 4) throw std::invalid_argument("conv2d: expects 4-d tensors");
    if (xv.dim(1) != wv.dim(1)) throw std::invalid_argument("conv2d: channel mismatch");
    if (wv.dim(2) % 2 == 0 || wv.dim(3) % 2 == 0)
        throw std::invalid_argument("conv2d: kernel extents must be odd");
    if (stride != 1 && stride != 2 && stride != 4)
        throw std::invalid_argument("conv2d: stride must be 1, 2 or 4");
    Tensor out({xv.dim(0), wv.dim(0), out_extent(xv.dim(2), stride), out_extent(xv.dim(3), stride)});
    conv2d_accumulate(xv, wv, stride, out);
    if (b >= 0) add_bias_channels(out, g.value(b));
    bool ng = g.needs_grad(x) || g.needs_grad(w) || (b >= 0 && g.needs_grad(b));
    return g.push(std::move(out), ng, {x, w}, [x, w, b, stride](Graph& gg, NodeId self) {
        const Tensor& go = gg.grad(self);
        if (gg.needs_grad(x)) conv2d_grad_input_accumulate(go, gg.value(w), stride, gg.grad(x));
        if (gg.needs_grad(w)) conv2d_grad_kernel_accumulate(gg.value(x), go, stride, gg.grad(w));
        if (b >= 0 && gg.needs_grad(b)) bias_grad_accumulate(go, gg.grad(b));
    });
}

NodeId op_conv2d_transposed(Graph& g, NodeId x, NodeId w, NodeId b, int stride) {
    const Tensor& xv = g.value(x);
    const Tensor& wv = g.value(w); // [Ca, Cb, kh, kw], maps Ca -> Cb upsampling
    if (xv.ndim() != 4 || wv.ndim() != 4)
        throw std::invalid_argument("conv2d_transposed: expects 4-d tensors");
    if (xv.dim(1) != wv.dim(0)) throw std::invalid_argument("conv2d_transposed: channel mismatch");
    Tensor out({xv.dim(0), wv.dim(1), xv.dim(2) * stride, xv.dim(3) * stride});
    conv2d_grad_input_accumulate(xv, wv, stride, out);
    if (b >= 0) add_bias_channels(out, g.value(b));
    bool ng = g.needs_grad(x) || g.needs_grad(w) || (b >= 0 && g.needs_grad(b));
    return g.push(std::move(out), ng, {x, w}, [x, w, b, stride](Graph& gg, NodeId self) {
        const Tensor& go = gg.grad(self);
        if (gg.needs_grad(x)) conv2d_accumulate(go, gg.value(w), stride, gg.grad(x));
        if (gg.needs_grad(w)) conv2d_grad_kernel_accumulate(go, gg.value(x), stride, gg.grad(w));
        if (b >= 0 && gg.needs_grad(b)) bias_grad_accumulate(go, gg.grad(b));
    });
}

// ---- upsampling ----

void upsample_accumulate(const Tensor& x, int factor, Tensor& out) {
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t Wo = W * factor;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t y = 0; y < H * factor; ++y) {
                const double* xrow = &x.data[((n * C + c) * H + y / factor) * W];
                double* orow = &out.data[(((n * C + c) * H * factor) + y) * Wo];
                for (int64_t xo = 0; xo < Wo; ++xo) orow[xo] += xrow[xo / factor];
            }
}

void upsample_grad_accumulate(const Tensor& gout, int factor, Tensor& gin) {
    const int64_t N = gin.dim(0), C = gin.dim(1), H = gin.dim(2), W = gin.dim(3);
    const int64_t Wo = W * factor;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t y = 0; y < H * factor; ++y) {
                double* irow = &gin.data[((n * C + c) * H + y / factor) * W];
                const double* grow = &gout.data[(((n * C + c) * H * factor) + y) * Wo];
                for (int64_t xo = 0; xo < Wo; ++xo) irow[xo / factor] += grow[xo];
            }
}

NodeId op_upsample_nearest(Graph& g, NodeId x, int factor) {
    if (factor != 2 && factor != 4)
        throw std::invalid_argument("upsample: factor must be 2 or 4");
    const Tensor& xv = g.value(x);
    if (xv.ndim() != 4) throw std::invalid_argument("upsample: expects 4-d tensor");
    Tensor out({xv.dim(0), xv.dim(1), xv.dim(2) * factor, xv.dim(3) * factor});
    upsample_accumulate(xv, factor, out);
    return g.push(std::move(out), g.needs_grad(x), {x}, [x, factor](Graph& gg, NodeId self) {
        if (gg.needs_grad(x)) upsample_grad_accumulate(gg.grad(self), factor, gg.grad(x));
    });
}

// ---- PReLU ----

NodeId op_prelu(Graph& g, NodeId x, NodeId slope) {
    const Tensor& xv = g.value(x);
    const Tensor& av = g.value(slope);
    if (xv.ndim() != 4 || av.numel() != xv.dim(1))
        throw std::invalid_argument("prelu: slope must have one entry per channel");
    Tensor out = xv;
    const int64_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const double a = av[c];
            double* row = &out.data[(n * C + c) * HW];
            for (int64_t i = 0; i < HW; ++i)
                if (row[i] < 0.0) row[i] *= a;
        }
    bool ng = g.needs_grad(x) || g.needs_grad(slope);
    return g.push(std::move(out), ng, {x, slope}, [x, slope](Graph& gg, NodeId self) {
        const Tensor& go = gg.grad(self);
        const Tensor& xv = gg.value(x);
        const Tensor& av = gg.value(slope);
        const int64_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
        const bool gx = gg.needs_grad(x), ga = gg.needs_grad(slope);
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                const double a = av[c];
                const double* xr = &xv.data[(n * C + c) * HW];
                const double* gr = &go.data[(n * C + c) * HW];
                double* gxr = gx ? &gg.grad(x).data[(n * C + c) * HW] : nullptr;
                double acc = 0.0;
                for (int64_t i = 0; i < HW; ++i) {
                    if (xr[i] >= 0.0) {
                        if (gx) gxr[i] += gr[i];
                    } else {
                        if (gx) gxr[i] += a * gr[i];
                        acc += gr[i] * xr[i];
                    }
                }
                if (ga) gg.grad(slope)[c] += acc;
            }
    });
}

// ---- batch normalization ----

NodeId op_batch_norm(Graph& g, NodeId x, NodeId gamma, NodeId beta, Tensor& running_mean,
                     Tensor& running_var, bool train, double eps, double momentum) {
    const Tensor& xv = g.value(x);
    if (xv.ndim() != 4) throw std::invalid_argument("batch_norm: expects 4-d tensor");
    const int64_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
    if (train && N < 2) throw std::invalid_argument("batch_norm: train mode needs batch size >= 2");
    const Tensor& gv = g.value(gamma);
    const Tensor& bv = g.value(beta);
    if (gv.numel() != C || bv.numel() != C)
        throw std::invalid_argument("batch_norm: gamma/beta must have one entry per channel");

    const int64_t m = N * HW;
    std::vector<double> mean(C), var(C), inv_std(C);
    if (train) {
        for (int64_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (int64_t n = 0; n < N; ++n) {
                const double* row = &xv.data[(n * C + c) * HW];
                for (int64_t i = 0; i < HW; ++i) s += row[i];
            }
            mean[c] = s / double(m);
            double sv = 0.0;
            for (int64_t n = 0; n < N; ++n) {
                const double* row = &xv.data[(n * C + c) * HW];
                for (int64_t i = 0; i < HW; ++i) {
                    const double d = row[i] - mean[c];
                    sv += d * d;
                }
            }
            var[c] = sv / double(m);
            running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mean[c];
            running_var[c] = (1.0 - momentum) * running_var[c] + momentum * var[c];
        }
    } else {
        for (int64_t c = 0; c < C; ++c) {
            mean[c] = running_mean[c];
            var[c] = running_var[c];
        }
    }
    for (int64_t c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);

    Tensor out(xv.shape);
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const double* xr = &xv.data[(n * C + c) * HW];
            double* orow = &out.data[(n * C + c) * HW];
            const double gch = gv[c], bch = bv[c], mu = mean[c], is = inv_std[c];
            for (int64_t i = 0; i < HW; ++i) orow[i] = gch * (xr[i] - mu) * is + bch;
        }

    bool ng = g.needs_grad(x) || g.needs_grad(gamma) || g.needs_grad(beta);
    auto mean_c = std::move(mean);
    auto inv_std_c = std::move(inv_std);
    return g.push(std::move(out), ng, {x, gamma, beta},
                  [x, gamma, beta, train, N, C, HW, mean_c, inv_std_c](Graph& gg, NodeId self) {
                      const Tensor& go = gg.grad(self);
                      const Tensor& xv = gg.value(x);
                      const Tensor& gv = gg.value(gamma);
                      const int64_t m = N * HW;
                      for (int64_t c = 0; c < C; ++c) {
                          const double mu = mean_c[c], is = inv_std_c[c], gch = gv[c];
                          double sum_dy = 0.0, sum_dy_xhat = 0.0;
                          for (int64_t n = 0; n < N; ++n) {
                              const double* xr = &xv.data[(n * C + c) * HW];
                              const double* gr = &go.data[(n * C + c) * HW];
                              for (int64_t i = 0; i < HW; ++i) {
                                  sum_dy += gr[i];
                                  sum_dy_xhat += gr[i] * (xr[i] - mu) * is;
                              }
                          }
                          if (gg.needs_grad(beta)) gg.grad(beta)[c] += sum_dy;
                          if (gg.needs_grad(gamma)) gg.grad(gamma)[c] += sum_dy_xhat;
                          if (!gg.needs_grad(x)) continue;
                          Tensor& gx = gg.grad(x);
                          if (train) {
                              const double mdy = sum_dy / double(m);
                              const double mdyx = sum_dy_xhat / double(m);
                              for (int64_t n = 0; n < N; ++n) {
                                  const double* xr = &xv.data[(n * C + c) * HW];
                                  const double* gr = &go.data[(n * C + c) * HW];
                                  double* gxr = &gx.data[(n * C + c) * HW];
                                  for (int64_t i = 0; i < HW; ++i) {
                                      const double xhat = (xr[i] - mu) * is;
                                      gxr[i] += gch * is * (gr[i] - mdy - xhat * mdyx);
                                  }
                              }
                          } else {
                              for (int64_t n = 0; n < N; ++n) {
                                  const double* gr = &go.data[(n * C + c) * HW];
                                  double* gxr = &gx.data[(n * C + c) * HW];
                                  for (int64_t i = 0; i < HW; ++i) gxr[i] += gch * is * gr[i];
                              }
                          }
                      }
                  });
}

} // namespace cmc
