#include "bevkit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace bevkit {

namespace {

using detail::make_op;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require(a.shape() == b.shape(),
            std::string(op) + ": shape mismatch between operands");
}

double sigmoid_val(double v) {
    if (v >= 0.0) {
        const double e = std::exp(-v);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(v);
    return e / (1.0 + e);
}

double softplus_val(double v) {
    if (v > 30.0) {
        return v;
    }
    if (v < -30.0) {
        return std::exp(v);
    }
    return std::log1p(std::exp(v));
}

// Elementwise unary op with derivative expressed from (input, output).
template <typename Fwd, typename Dfn>
Tensor unary_op(const char* name, const Tensor& x, Fwd fwd, Dfn dfn) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (auto& v : out) {
        v = fwd(v);
    }
    return make_op(name, x.shape(), std::move(out), {x},
                   [dfn](TensorNode& node) {
                       auto& p = node.parents[0];
                       if (!p->requires_grad) {
                           return;
                       }
                       p->ensure_grad();
                       const auto n = node.value.size();
                       for (std::size_t i = 0; i < n; ++i) {
                           p->grad[i] += node.grad[i] * dfn(p->value[i], node.value[i]);
                       }
                   });
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] + b.data()[i];
    }
    return make_op("add", a.shape(), std::move(out), {a, b}, [](TensorNode& node) {
        for (auto& p : node.parents) {
            if (p->requires_grad) {
                p->accum_grad(node.grad);
            }
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] - b.data()[i];
    }
    return make_op("sub", a.shape(), std::move(out), {a, b}, [](TensorNode& node) {
        auto& pa = node.parents[0];
        auto& pb = node.parents[1];
        if (pa->requires_grad) {
            pa->accum_grad(node.grad);
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < node.grad.size(); ++i) {
                pb->grad[i] -= node.grad[i];
            }
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] * b.data()[i];
    }
    return make_op("mul", a.shape(), std::move(out), {a, b}, [](TensorNode& node) {
        auto& pa = node.parents[0];
        auto& pb = node.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < node.grad.size(); ++i) {
                pa->grad[i] += node.grad[i] * pb->value[i];
            }
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < node.grad.size(); ++i) {
                pb->grad[i] += node.grad[i] * pa->value[i];
            }
        }
    });
}

Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (auto& v : out) {
        v *= s;
    }
    return make_op("scale", a.shape(), std::move(out), {a}, [s](TensorNode& node) {
        auto& p = node.parents[0];
        if (!p->requires_grad) {
            return;
        }
        p->ensure_grad();
        for (std::size_t i = 0; i < node.grad.size(); ++i) {
            p->grad[i] += node.grad[i] * s;
        }
    });
}

Tensor sigmoid(const Tensor& x) {
    return unary_op("sigmoid", x, sigmoid_val,
                    [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
    return unary_op("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
                    [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor silu(const Tensor& x) {
    return unary_op("silu", x, [](double v) { return v * sigmoid_val(v); },
                    [](double v, double) {
                        const double s = sigmoid_val(v);
                        return s * (1.0 + v * (1.0 - s));
                    });
}

Tensor softplus(const Tensor& x) {
    return unary_op("softplus", x, softplus_val,
                    [](double v, double) { return sigmoid_val(v); });
}

Tensor exp_op(const Tensor& x) {
    return unary_op("exp", x, [](double v) { return std::exp(v); },
                    [](double, double y) { return y; });
}

Tensor activation(const Tensor& x, Activation kind) {
    switch (kind) {
        case Activation::Sigmoid:
            return sigmoid(x);
        case Activation::Relu:
            return relu(x);
        case Activation::Silu:
            return silu(x);
    }
    fail("unknown activation kind");
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) {
        acc += v;
    }
    return make_op("sum", {1}, {acc}, {x}, [](TensorNode& node) {
        auto& p = node.parents[0];
        if (!p->requires_grad) {
            return;
        }
        p->ensure_grad();
        const double g = node.grad[0];
        for (auto& gv : p->grad) {
            gv += g;
        }
    });
}

Tensor mean(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) {
        acc += v;
    }
    const double inv_n = 1.0 / static_cast<double>(x.numel());
    return make_op("mean", {1}, {acc * inv_n}, {x}, [inv_n](TensorNode& node) {
        auto& p = node.parents[0];
        if (!p->requires_grad) {
            return;
        }
        p->ensure_grad();
        const double g = node.grad[0] * inv_n;
        for (auto& gv : p->grad) {
            gv += g;
        }
    });
}

// ---------------------------------------------------------------------------
// Linear maps
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2, "matmul: operands must be rank 2");
    const auto n = a.extent(0), k = a.extent(1), m = b.extent(1);
    require(b.extent(0) == k, "matmul: inner extents differ");

    std::vector<double> out(static_cast<std::size_t>(n * m), 0.0);
    const auto* pa = a.data().data();
    const auto* pb = b.data().data();
    parallel_for(0, n, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
            for (std::int64_t kk = 0; kk < k; ++kk) {
                const double av = pa[i * k + kk];
                if (av == 0.0) {
                    continue;
                }
                const double* brow = pb + kk * m;
                double* orow = out.data() + i * m;
                for (std::int64_t j = 0; j < m; ++j) {
                    orow[j] += av * brow[j];
                }
            }
        }
    });

    return make_op("matmul", {n, m}, std::move(out), {a, b},
                   [n, k, m](TensorNode& node) {
                       auto& na = node.parents[0];
                       auto& nb = node.parents[1];
                       const auto* g = node.grad.data();
                       if (na->requires_grad) {
                           na->ensure_grad();
                           for (std::int64_t i = 0; i < n; ++i) {
                               for (std::int64_t kk = 0; kk < k; ++kk) {
                                   double acc = 0.0;
                                   for (std::int64_t j = 0; j < m; ++j) {
                                       acc += g[i * m + j] * nb->value[kk * m + j];
                                   }
                                   na->grad[i * k + kk] += acc;
                               }
                           }
                       }
                       if (nb->requires_grad) {
                           nb->ensure_grad();
                           for (std::int64_t kk = 0; kk < k; ++kk) {
                               for (std::int64_t i = 0; i < n; ++i) {
                                   const double av = na->value[i * k + kk];
                                   if (av == 0.0) {
                                       continue;
                                   }
                                   for (std::int64_t j = 0; j < m; ++j) {
                                       nb->grad[kk * m + j] += av * g[i * m + j];
                                   }
                               }
                           }
                       }
                   });
}

Tensor add_bias_rows(const Tensor& x, const Tensor& bias) {
    require(x.rank() == 2 && bias.rank() == 1 && bias.extent(0) == x.extent(1),
            "add_bias_rows: expects [N,C] plus [C]");
    const auto n = x.extent(0), c = x.extent(1);
    std::vector<double> out(x.data().begin(), x.data().end());
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < c; ++j) {
            out[i * c + j] += bias.data()[j];
        }
    }
    return make_op("add_bias_rows", x.shape(), std::move(out), {x, bias},
                   [n, c](TensorNode& node) {
                       auto& px = node.parents[0];
                       auto& pb = node.parents[1];
                       if (px->requires_grad) {
                           px->accum_grad(node.grad);
                       }
                       if (pb->requires_grad) {
                           pb->ensure_grad();
                           for (std::int64_t i = 0; i < n; ++i) {
                               for (std::int64_t j = 0; j < c; ++j) {
                                   pb->grad[j] += node.grad[i * c + j];
                               }
                           }
                       }
                   });
}

Tensor add_bias_channels(const Tensor& x, const Tensor& bias) {
    require(x.rank() == 3 && bias.rank() == 1 && bias.extent(0) == x.extent(0),
            "add_bias_channels: expects [C,H,W] plus [C]");
    const auto c = x.extent(0), hw = x.extent(1) * x.extent(2);
    std::vector<double> out(x.data().begin(), x.data().end());
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const double b = bias.data()[ch];
        for (std::int64_t i = 0; i < hw; ++i) {
            out[ch * hw + i] += b;
        }
    }
    return make_op("add_bias_channels", x.shape(), std::move(out), {x, bias},
                   [c, hw](TensorNode& node) {
                       auto& px = node.parents[0];
                       auto& pb = node.parents[1];
                       if (px->requires_grad) {
                           px->accum_grad(node.grad);
                       }
                       if (pb->requires_grad) {
                           pb->ensure_grad();
                           for (std::int64_t ch = 0; ch < c; ++ch) {
                               double acc = 0.0;
                               for (std::int64_t i = 0; i < hw; ++i) {
                                   acc += node.grad[ch * hw + i];
                               }
                               pb->grad[ch] += acc;
                           }
                       }
                   });
}

// ---------------------------------------------------------------------------
// Shape / gather
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
    require(product(shape) == x.numel(), "reshape: element count mismatch");
    std::vector<double> out(x.data().begin(), x.data().end());
    return make_op("reshape", std::move(shape), std::move(out), {x},
                   [](TensorNode& node) {
                       auto& p = node.parents[0];
                       if (p->requires_grad) {
                           p->accum_grad(node.grad);
                       }
                   });
}

Tensor permute3(const Tensor& x, std::array<int, 3> axes) {
    require(x.rank() == 3, "permute3: expects a rank-3 tensor");
    std::array<bool, 3> seen{};
    for (int a : axes) {
        require(a >= 0 && a < 3 && !seen[static_cast<std::size_t>(a)],
                "permute3: axes must be a permutation of {0,1,2}");
        seen[static_cast<std::size_t>(a)] = true;
    }
    const auto& s = x.shape();
    const Shape out_shape{s[static_cast<std::size_t>(axes[0])],
                          s[static_cast<std::size_t>(axes[1])],
                          s[static_cast<std::size_t>(axes[2])]};
    const std::int64_t in_stride[3] = {s[1] * s[2], s[2], 1};
    const std::int64_t st0 = in_stride[axes[0]], st1 = in_stride[axes[1]],
                       st2 = in_stride[axes[2]];

    std::vector<double> out(static_cast<std::size_t>(x.numel()));
    const auto* src = x.data().data();
    std::int64_t w = 0;
    for (std::int64_t i = 0; i < out_shape[0]; ++i) {
        for (std::int64_t j = 0; j < out_shape[1]; ++j) {
            for (std::int64_t k = 0; k < out_shape[2]; ++k) {
                out[static_cast<std::size_t>(w++)] = src[i * st0 + j * st1 + k * st2];
            }
        }
    }
    return make_op("permute3", out_shape, std::move(out), {x},
                   [out_shape, st0, st1, st2](TensorNode& node) {
                       auto& p = node.parents[0];
                       if (!p->requires_grad) {
                           return;
                       }
                       p->ensure_grad();
                       std::int64_t r = 0;
                       for (std::int64_t i = 0; i < out_shape[0]; ++i) {
                           for (std::int64_t j = 0; j < out_shape[1]; ++j) {
                               for (std::int64_t k = 0; k < out_shape[2]; ++k) {
                                   p->grad[i * st0 + j * st1 + k * st2] +=
                                       node.grad[static_cast<std::size_t>(r++)];
                               }
                           }
                       }
                   });
}

Tensor concat0(const Tensor& a, const Tensor& b) {
    require(a.rank() == b.rank() && a.rank() >= 1, "concat0: rank mismatch");
    for (std::int64_t i = 1; i < a.rank(); ++i) {
        require(a.extent(i) == b.extent(i), "concat0: trailing extents differ");
    }
    Shape out_shape = a.shape();
    out_shape[0] += b.extent(0);
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(a.numel() + b.numel()));
    out.insert(out.end(), a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    const std::size_t split = a.data().size();
    return make_op("concat0", std::move(out_shape), std::move(out), {a, b},
                   [split](TensorNode& node) {
                       auto& pa = node.parents[0];
                       auto& pb = node.parents[1];
                       if (pa->requires_grad) {
                           pa->accum_grad({node.grad.data(), split});
                       }
                       if (pb->requires_grad) {
                           pb->accum_grad({node.grad.data() + split,
                                           node.grad.size() - split});
                       }
                   });
}

Tensor permute_rows(const Tensor& rows, const std::vector<std::int64_t>& perm) {
    require(rows.rank() == 2, "permute_rows: expects [N,C]");
    const auto n = rows.extent(0), c = rows.extent(1);
    require(static_cast<std::int64_t>(perm.size()) == n,
            "permute_rows: permutation length mismatch");
    std::vector<double> out(static_cast<std::size_t>(n * c));
    const auto* src = rows.data().data();
    for (std::int64_t i = 0; i < n; ++i) {
        const auto j = perm[static_cast<std::size_t>(i)];
        require(j >= 0 && j < n, "permute_rows: index out of range");
        std::memcpy(out.data() + i * c, src + j * c,
                    static_cast<std::size_t>(c) * sizeof(double));
    }
    return make_op("permute_rows", rows.shape(), std::move(out), {rows},
                   [perm, c](TensorNode& node) {
                       auto& p = node.parents[0];
                       if (!p->requires_grad) {
                           return;
                       }
                       p->ensure_grad();
                       for (std::size_t i = 0; i < perm.size(); ++i) {
                           const auto j = static_cast<std::size_t>(perm[i]);
                           for (std::int64_t ch = 0; ch < c; ++ch) {
                               p->grad[j * static_cast<std::size_t>(c) +
                                       static_cast<std::size_t>(ch)] +=
                                   node.grad[i * static_cast<std::size_t>(c) +
                                             static_cast<std::size_t>(ch)];
                           }
                       }
                   });
}

Tensor broadcast_row(const Tensor& v, std::int64_t n) {
    require(v.rank() == 1, "broadcast_row: expects a vector");
    require(n >= 1, "broadcast_row: n must be positive");
    const auto c = v.extent(0);
    std::vector<double> out(static_cast<std::size_t>(n * c));
    for (std::int64_t i = 0; i < n; ++i) {
        std::memcpy(out.data() + i * c, v.data().data(),
                    static_cast<std::size_t>(c) * sizeof(double));
    }
    return make_op("broadcast_row", {n, c}, std::move(out), {v},
                   [n, c](TensorNode& node) {
                       auto& p = node.parents[0];
                       if (!p->requires_grad) {
                           return;
                       }
                       p->ensure_grad();
                       for (std::int64_t i = 0; i < n; ++i) {
                           for (std::int64_t j = 0; j < c; ++j) {
                               p->grad[static_cast<std::size_t>(j)] +=
                                   node.grad[static_cast<std::size_t>(i * c + j)];
                           }
                       }
                   });
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::int64_t stride,
              std::int64_t padding) {
    require(input.rank() == 3, "conv2d: input must be [Cin,H,W]");
    require(kernel.rank() == 4, "conv2d: kernel must be [Cout,Cin,kH,kW]");
    require(stride >= 1, "conv2d: stride must be >= 1");
    require(padding >= 0, "conv2d: padding must be >= 0");
    const auto cin = input.extent(0), h = input.extent(1), w = input.extent(2);
    const auto cout = kernel.extent(0), kh = kernel.extent(2), kw = kernel.extent(3);
    require(kernel.extent(1) == cin, "conv2d: kernel channel count mismatch");
    require(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel extents must be odd");
    const auto span_h = h + 2 * padding - kh;
    const auto span_w = w + 2 * padding - kw;
    require(span_h >= 0 && span_w >= 0, "conv2d: kernel larger than padded input");
    if (checked_mode()) {
        require(span_h % stride == 0 && span_w % stride == 0,
                "conv2d: output extent division is not exact");
    }
    const auto oh = span_h / stride + 1;
    const auto ow = span_w / stride + 1;

    std::vector<double> out(static_cast<std::size_t>(cout * oh * ow), 0.0);
    const auto* x = input.data().data();
    const auto* k = kernel.data().data();
    parallel_for(0, cout, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t co = lo; co < hi; ++co) {
            for (std::int64_t oy = 0; oy < oh; ++oy) {
                for (std::int64_t ci = 0; ci < cin; ++ci) {
                    for (std::int64_t ky = 0; ky < kh; ++ky) {
                        const auto iy = oy * stride - padding + ky;
                        if (iy < 0 || iy >= h) {
                            continue;
                        }
                        const double* xrow = x + (ci * h + iy) * w;
                        const double* krow = k + ((co * cin + ci) * kh + ky) * kw;
                        double* orow = out.data() + (co * oh + oy) * ow;
                        for (std::int64_t kx = 0; kx < kw; ++kx) {
                            const double kv = krow[kx];
                            if (kv == 0.0) {
                                continue;
                            }
                            for (std::int64_t ox = 0; ox < ow; ++ox) {
                                const auto ix = ox * stride - padding + kx;
                                if (ix < 0 || ix >= w) {
                                    continue;
                                }
                                orow[ox] += kv * xrow[ix];
                            }
                        }
                    }
                }
            }
        }
    });

    auto backward = [cin, h, w, cout, kh, kw, oh, ow, stride,
                     padding](TensorNode& node) {
        auto& px = node.parents[0];
        auto& pk = node.parents[1];
        const auto* g = node.grad.data();
        const bool need_x = px->requires_grad;
        const bool need_k = pk->requires_grad;
        if (need_x) {
            px->ensure_grad();
        }
        if (need_k) {
            pk->ensure_grad();
        }
        for (std::int64_t co = 0; co < cout; ++co) {
            for (std::int64_t oy = 0; oy < oh; ++oy) {
                for (std::int64_t ox = 0; ox < ow; ++ox) {
                    const double go = g[(co * oh + oy) * ow + ox];
                    if (go == 0.0) {
                        continue;
                    }
                    for (std::int64_t ci = 0; ci < cin; ++ci) {
                        for (std::int64_t ky = 0; ky < kh; ++ky) {
                            const auto iy = oy * stride - padding + ky;
                            if (iy < 0 || iy >= h) {
                                continue;
                            }
                            for (std::int64_t kx = 0; kx < kw; ++kx) {
                                const auto ix = ox * stride - padding + kx;
                                if (ix < 0 || ix >= w) {
                                    continue;
                                }
                                const auto xi = (ci * h + iy) * w + ix;
                                const auto ki = ((co * cin + ci) * kh + ky) * kw + kx;
                                if (need_x) {
                                    px->grad[xi] += go * pk->value[ki];
                                }
                                if (need_k) {
                                    pk->grad[ki] += go * px->value[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    return make_op("conv2d", {cout, oh, ow}, std::move(out), {input, kernel},
                   std::move(backward));
}

Tensor avg_pool2(const Tensor& input) {
    require(input.rank() == 3, "avg_pool2: input must be [C,H,W]");
    const auto c = input.extent(0), h = input.extent(1), w = input.extent(2);
    require(h % 2 == 0 && w % 2 == 0, "avg_pool2: extents must be even");
    const auto oh = h / 2, ow = w / 2;

    std::vector<double> out(static_cast<std::size_t>(c * oh * ow), 0.0);
    const auto* x = input.data().data();
    parallel_for(0, c, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t ci = lo; ci < hi; ++ci) {
            for (std::int64_t oy = 0; oy < oh; ++oy) {
                const double* r0 = x + (ci * h + 2 * oy) * w;
                const double* r1 = r0 + w;
                double* orow = out.data() + (ci * oh + oy) * ow;
                for (std::int64_t ox = 0; ox < ow; ++ox) {
                    orow[ox] = 0.25 * (r0[2 * ox] + r0[2 * ox + 1] +
                                       r1[2 * ox] + r1[2 * ox + 1]);
                }
            }
        }
    });

    auto backward = [c, h, w, oh, ow](TensorNode& node) {
        auto& p = node.parents[0];
        if (!p->requires_grad) {
            return;
        }
        p->ensure_grad();
        const auto* g = node.grad.data();
        for (std::int64_t ci = 0; ci < c; ++ci) {
            for (std::int64_t oy = 0; oy < oh; ++oy) {
                for (std::int64_t ox = 0; ox < ow; ++ox) {
                    const double go = 0.25 * g[(ci * oh + oy) * ow + ox];
                    double* r0 = p->grad.data() + (ci * h + 2 * oy) * w + 2 * ox;
                    double* r1 = r0 + w;
                    r0[0] += go;
                    r0[1] += go;
                    r1[0] += go;
                    r1[1] += go;
                }
            }
        }
    };
    return make_op("avg_pool2", {c, oh, ow}, std::move(out), {input},
                   std::move(backward));
}

// ---------------------------------------------------------------------------
// layer_norm
// ---------------------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
    require(x.rank() >= 1, "layer_norm: input must have rank >= 1");
    const auto c = x.extent(x.rank() - 1);
    require(gamma.rank() == 1 && gamma.extent(0) == c,
            "layer_norm: gamma must match the channel extent");
    require(beta.rank() == 1 && beta.extent(0) == c,
            "layer_norm: beta must match the channel extent");
    require(eps > 0.0, "layer_norm: eps must be positive");
    const auto rows = x.numel() / c;

    std::vector<double> out(static_cast<std::size_t>(x.numel()));
    std::vector<double> inv_sigma(static_cast<std::size_t>(rows));
    std::vector<double> mu(static_cast<std::size_t>(rows));
    const auto* src = x.data().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = src + r * c;
        double m = 0.0;
        for (std::int64_t j = 0; j < c; ++j) {
            m += row[j];
        }
        m /= static_cast<double>(c);
        double var = 0.0;
        for (std::int64_t j = 0; j < c; ++j) {
            const double d = row[j] - m;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + eps);
        mu[static_cast<std::size_t>(r)] = m;
        inv_sigma[static_cast<std::size_t>(r)] = is;
        for (std::int64_t j = 0; j < c; ++j) {
            out[static_cast<std::size_t>(r * c + j)] =
                (row[j] - m) * is * gamma.data()[j] + beta.data()[j];
        }
    }

    auto backward = [rows, c, mu = std::move(mu),
                     inv_sigma = std::move(inv_sigma)](TensorNode& node) {
        auto& px = node.parents[0];
        auto& pg = node.parents[1];
        auto& pb = node.parents[2];
        const auto* g = node.grad.data();
        const bool need_x = px->requires_grad;
        if (need_x) {
            px->ensure_grad();
        }
        if (pg->requires_grad) {
            pg->ensure_grad();
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
        }
        const double inv_c = 1.0 / static_cast<double>(c);
        for (std::int64_t r = 0; r < rows; ++r) {
            const double m = mu[static_cast<std::size_t>(r)];
            const double is = inv_sigma[static_cast<std::size_t>(r)];
            const double* xrow = px->value.data() + r * c;
            const double* grow = g + r * c;
            // xhat_j = (x_j - m) * is; out_j = gamma_j * xhat_j + beta_j
            double sum_dxhat = 0.0;
            double sum_dxhat_xhat = 0.0;
            for (std::int64_t j = 0; j < c; ++j) {
                const double xhat = (xrow[j] - m) * is;
                const double dxhat = grow[j] * pg->value[static_cast<std::size_t>(j)];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
                if (pg->requires_grad) {
                    pg->grad[static_cast<std::size_t>(j)] += grow[j] * xhat;
                }
                if (pb->requires_grad) {
                    pb->grad[static_cast<std::size_t>(j)] += grow[j];
                }
            }
            if (need_x) {
                for (std::int64_t j = 0; j < c; ++j) {
                    const double xhat = (xrow[j] - m) * is;
                    const double dxhat =
                        grow[j] * pg->value[static_cast<std::size_t>(j)];
                    px->grad[static_cast<std::size_t>(r * c + j)] +=
                        is * (dxhat - inv_c * sum_dxhat - inv_c * xhat * sum_dxhat_xhat);
                }
            }
        }
    };
    return make_op("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                   std::move(backward));
}

// ---------------------------------------------------------------------------
// softmax_rows
// ---------------------------------------------------------------------------

Tensor softmax_rows(const Tensor& x) {
    require(x.rank() == 2, "softmax_rows: expects [N,D]");
    const auto n = x.extent(0), d = x.extent(1);
    std::vector<double> out(static_cast<std::size_t>(n * d));
    const auto* src = x.data().data();
    for (std::int64_t r = 0; r < n; ++r) {
        const double* row = src + r * d;
        double mx = row[0];
        for (std::int64_t j = 1; j < d; ++j) {
            mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
            const double e = std::exp(row[j] - mx);
            out[static_cast<std::size_t>(r * d + j)] = e;
            z += e;
        }
        const double inv_z = 1.0 / z;
        for (std::int64_t j = 0; j < d; ++j) {
            out[static_cast<std::size_t>(r * d + j)] *= inv_z;
        }
    }
    return make_op("softmax_rows", x.shape(), std::move(out), {x},
                   [n, d](TensorNode& node) {
                       auto& p = node.parents[0];
                       if (!p->requires_grad) {
                           return;
                       }
                       p->ensure_grad();
                       for (std::int64_t r = 0; r < n; ++r) {
                           const double* y = node.value.data() + r * d;
                           const double* g = node.grad.data() + r * d;
                           double dot = 0.0;
                           for (std::int64_t j = 0; j < d; ++j) {
                               dot += y[j] * g[j];
                           }
                           for (std::int64_t j = 0; j < d; ++j) {
                               p->grad[static_cast<std::size_t>(r * d + j)] +=
                                   y[j] * (g[j] - dot);
                           }
                       }
                   });
}

// ---------------------------------------------------------------------------
// focal_loss
// ---------------------------------------------------------------------------

Tensor focal_loss(const Tensor& prob, const Tensor& target, double alpha,
                  double gamma) {
    require_same_shape(prob, target, "focal_loss");
    constexpr double kLo = 1e-6;
    constexpr double kHi = 1.0 - 1e-6;
    const auto n = prob.numel();
    const auto* p = prob.data().data();
    const auto* t = target.data().data();

    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        require(t[i] == 0.0 || t[i] == 1.0, "focal_loss: target must be binary");
        const double pc = std::clamp(p[i], kLo, kHi);
        const double pt = t[i] == 1.0 ? pc : 1.0 - pc;
        const double at = t[i] == 1.0 ? alpha : 1.0 - alpha;
        acc += -at * std::pow(1.0 - pt, gamma) * std::log(pt);
    }
    const double inv_n = 1.0 / static_cast<double>(n);

    auto backward = [alpha, gamma, inv_n, n](TensorNode& node) {
        auto& pp = node.parents[0];
        if (!pp->requires_grad) {
            return;
        }
        pp->ensure_grad();
        auto& pt_node = node.parents[1];
        const double g = node.grad[0] * inv_n;
        for (std::int64_t i = 0; i < n; ++i) {
            const double raw = pp->value[static_cast<std::size_t>(i)];
            if (raw <= kLo || raw >= kHi) {
                continue;  // clamped: zero subgradient
            }
            const double y = pt_node->value[static_cast<std::size_t>(i)];
            const double pt = y == 1.0 ? raw : 1.0 - raw;
            const double at = y == 1.0 ? alpha : 1.0 - alpha;
            // d/dpt of -a_t*(1-pt)^gamma*log(pt)
            const double one_m = 1.0 - pt;
            double dldpt = -at * std::pow(one_m, gamma) / pt;
            if (gamma != 0.0) {
                dldpt += at * gamma * std::pow(one_m, gamma - 1.0) * std::log(pt);
            }
            const double dptdp = y == 1.0 ? 1.0 : -1.0;
            pp->grad[static_cast<std::size_t>(i)] += g * dldpt * dptdp;
        }
    };
    return make_op("focal_loss", {1}, {acc * inv_n}, {prob, target},
                   std::move(backward));
}

// ---------------------------------------------------------------------------
// scatter / segment
// ---------------------------------------------------------------------------

Tensor scatter_rows_to_grid(const Tensor& rows,
                            const std::vector<std::array<std::int64_t, 2>>& xy,
                            std::int64_t ybins, std::int64_t xbins) {
    require(rows.rank() == 2, "scatter_rows_to_grid: expects [N,C]");
    const auto n = rows.extent(0), c = rows.extent(1);
    require(static_cast<std::int64_t>(xy.size()) == n,
            "scatter_rows_to_grid: coordinate count mismatch");

    std::vector<double> out(static_cast<std::size_t>(c * ybins * xbins), 0.0);
    const auto* src = rows.data().data();
    for (std::int64_t i = 0; i < n; ++i) {
        const auto [cx, cy] = xy[static_cast<std::size_t>(i)];
        if (checked_mode()) {
            require(cx >= 0 && cx < xbins && cy >= 0 && cy < ybins,
                    "scatter_rows_to_grid: coordinate outside the grid");
        }
        for (std::int64_t ch = 0; ch < c; ++ch) {
            out[static_cast<std::size_t>((ch * ybins + cy) * xbins + cx)] +=
                src[i * c + ch];
        }
    }
    return make_op("scatter_rows_to_grid", {c, ybins, xbins}, std::move(out), {rows},
                   [xy, c, ybins, xbins](TensorNode& node) {
                       auto& p = node.parents[0];
                       if (!p->requires_grad) {
                           return;
                       }
                       p->ensure_grad();
                       for (std::size_t i = 0; i < xy.size(); ++i) {
                           const auto [cx, cy] = xy[i];
                           for (std::int64_t ch = 0; ch < c; ++ch) {
                               p->grad[i * static_cast<std::size_t>(c) +
                                       static_cast<std::size_t>(ch)] +=
                                   node.grad[static_cast<std::size_t>(
                                       (ch * ybins + cy) * xbins + cx)];
                           }
                       }
                   });
}

Tensor gather_grid_rows(const Tensor& grid,
                        const std::vector<std::array<std::int64_t, 2>>& xy) {
    require(grid.rank() == 3, "gather_grid_rows: expects [C,Y,X]");
    const auto c = grid.extent(0), ybins = grid.extent(1), xbins = grid.extent(2);
    const auto n = static_cast<std::int64_t>(xy.size());
    require(n >= 1, "gather_grid_rows: needs at least one cell");

    std::vector<double> out(static_cast<std::size_t>(n * c));
    const auto* src = grid.data().data();
    for (std::int64_t i = 0; i < n; ++i) {
        const auto [cx, cy] = xy[static_cast<std::size_t>(i)];
        require(cx >= 0 && cx < xbins && cy >= 0 && cy < ybins,
                "gather_grid_rows: coordinate outside the grid");
        for (std::int64_t ch = 0; ch < c; ++ch) {
            out[static_cast<std::size_t>(i * c + ch)] =
                src[(ch * ybins + cy) * xbins + cx];
        }
    }
    return make_op("gather_grid_rows", {n, c}, std::move(out), {grid},
                   [xy, c, ybins, xbins](TensorNode& node) {
                       auto& p = node.parents[0];
                       if (!p->requires_grad) {
                           return;
                       }
                       p->ensure_grad();
                       for (std::size_t i = 0; i < xy.size(); ++i) {
                           const auto [cx, cy] = xy[i];
                           for (std::int64_t ch = 0; ch < c; ++ch) {
                               p->grad[static_cast<std::size_t>(
                                   (ch * ybins + cy) * xbins + cx)] +=
                                   node.grad[i * static_cast<std::size_t>(c) +
                                             static_cast<std::size_t>(ch)];
                           }
                       }
                   });
}

Tensor segment_max(const Tensor& rows, const std::vector<std::int64_t>& seg_of_row,
                   std::int64_t num_segments) {
    require(rows.rank() == 2, "segment_max: expects [N,C]");
    const auto n = rows.extent(0), c = rows.extent(1);
    require(static_cast<std::int64_t>(seg_of_row.size()) == n,
            "segment_max: segment id count mismatch");
    require(num_segments >= 1, "segment_max: needs at least one segment");

    std::vector<double> out(static_cast<std::size_t>(num_segments * c),
                            -std::numeric_limits<double>::infinity());
    std::vector<std::int64_t> argmax(static_cast<std::size_t>(num_segments * c), -1);
    const auto* src = rows.data().data();
    for (std::int64_t i = 0; i < n; ++i) {
        const auto seg = seg_of_row[static_cast<std::size_t>(i)];
        require(seg >= 0 && seg < num_segments, "segment_max: segment id out of range");
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const auto oi = static_cast<std::size_t>(seg * c + ch);
            const double v = src[i * c + ch];
            if (v > out[oi]) {  // strict: earliest row wins ties
                out[oi] = v;
                argmax[oi] = i;
            }
        }
    }
    for (auto a : argmax) {
        require(a >= 0, "segment_max: empty segment");
    }
    return make_op("segment_max", {num_segments, c}, std::move(out), {rows},
                   [argmax = std::move(argmax), c](TensorNode& node) {
                       auto& p = node.parents[0];
                       if (!p->requires_grad) {
                           return;
                       }
                       p->ensure_grad();
                       for (std::size_t oi = 0; oi < argmax.size(); ++oi) {
                           const auto row = static_cast<std::size_t>(argmax[oi]);
                           const auto ch = oi % static_cast<std::size_t>(c);
                           p->grad[row * static_cast<std::size_t>(c) + ch] +=
                               node.grad[oi];
                       }
                   });
}

// ---------------------------------------------------------------------------
// causal depthwise conv1d
// ---------------------------------------------------------------------------

Tensor causal_depthwise_conv1d(const Tensor& x, const Tensor& taps) {
    require(x.rank() == 2, "causal_depthwise_conv1d: expects [L,C]");
    require(taps.rank() == 2 && taps.extent(1) == x.extent(1),
            "causal_depthwise_conv1d: taps must be [K,C]");
    const auto l = x.extent(0), c = x.extent(1), k = taps.extent(0);

    std::vector<double> out(static_cast<std::size_t>(l * c), 0.0);
    const auto* src = x.data().data();
    const auto* w = taps.data().data();
    for (std::int64_t t = 0; t < l; ++t) {
        for (std::int64_t j = 0; j < k; ++j) {
            const auto ti = t - k + 1 + j;
            if (ti < 0) {
                continue;
            }
            for (std::int64_t ch = 0; ch < c; ++ch) {
                out[static_cast<std::size_t>(t * c + ch)] +=
                    w[j * c + ch] * src[ti * c + ch];
            }
        }
    }
    return make_op("causal_depthwise_conv1d", x.shape(), std::move(out), {x, taps},
                   [l, c, k](TensorNode& node) {
                       auto& px = node.parents[0];
                       auto& pw = node.parents[1];
                       const bool need_x = px->requires_grad;
                       const bool need_w = pw->requires_grad;
                       if (need_x) {
                           px->ensure_grad();
                       }
                       if (need_w) {
                           pw->ensure_grad();
                       }
                       const auto* g = node.grad.data();
                       for (std::int64_t t = 0; t < l; ++t) {
                           for (std::int64_t j = 0; j < k; ++j) {
                               const auto ti = t - k + 1 + j;
                               if (ti < 0) {
                                   continue;
                               }
                               for (std::int64_t ch = 0; ch < c; ++ch) {
                                   const double go = g[t * c + ch];
                                   if (need_x) {
                                       px->grad[static_cast<std::size_t>(ti * c + ch)] +=
                                           go * pw->value[static_cast<std::size_t>(
                                                    j * c + ch)];
                                   }
                                   if (need_w) {
                                       pw->grad[static_cast<std::size_t>(j * c + ch)] +=
                                           go * px->value[static_cast<std::size_t>(
                                                    ti * c + ch)];
                                   }
                               }
                           }
                       }
                   });
}

// ---------------------------------------------------------------------------
// ssm_scan
// ---------------------------------------------------------------------------

Tensor ssm_scan(const Tensor& x, const Tensor& delta, const Tensor& b_seq,
                const Tensor& c_seq, const Tensor& a_decay, const Tensor& d_skip) {
    require(x.rank() == 2, "ssm_scan: x must be [L,C]");
    const auto l = x.extent(0), c = x.extent(1);
    require_same_shape(x, delta, "ssm_scan(delta)");
    require(b_seq.rank() == 2 && b_seq.extent(0) == l, "ssm_scan: b_seq must be [L,S]");
    const auto s = b_seq.extent(1);
    require(c_seq.shape() == b_seq.shape(), "ssm_scan: c_seq must match b_seq");
    require(a_decay.rank() == 2 && a_decay.extent(0) == c && a_decay.extent(1) == s,
            "ssm_scan: a_decay must be [C,S]");
    require(d_skip.rank() == 1 && d_skip.extent(0) == c, "ssm_scan: d_skip must be [C]");

    if (checked_mode()) {
        for (double v : delta.data()) {
            require(v > 0.0, "ssm_scan: delta must be positive");
        }
        for (double v : a_decay.data()) {
            require(v < 0.0, "ssm_scan: decay parameters must be negative");
        }
    }

    const auto* xv = x.data().data();
    const auto* dv = delta.data().data();
    const auto* bv = b_seq.data().data();
    const auto* cv = c_seq.data().data();
    const auto* av = a_decay.data().data();
    const auto* skip = d_skip.data().data();

    // Full state history kept for backward: h[(t*C + c)*S + s].
    std::vector<double> h(static_cast<std::size_t>(l * c * s), 0.0);
    std::vector<double> out(static_cast<std::size_t>(l * c), 0.0);
    for (std::int64_t t = 0; t < l; ++t) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const double dt = dv[t * c + ch];
            const double xt = xv[t * c + ch];
            double y = skip[ch] * xt;
            double* ht = h.data() + (t * c + ch) * s;
            const double* hp = t > 0 ? h.data() + ((t - 1) * c + ch) * s : nullptr;
            for (std::int64_t j = 0; j < s; ++j) {
                const double abar = std::exp(dt * av[ch * s + j]);
                const double hval =
                    (hp != nullptr ? abar * hp[j] : 0.0) + dt * bv[t * s + j] * xt;
                ht[j] = hval;
                y += cv[t * s + j] * hval;
            }
            out[static_cast<std::size_t>(t * c + ch)] = y;
        }
    }

    auto backward = [l, c, s, h = std::move(h)](TensorNode& node) {
        auto& px = node.parents[0];
        auto& pd = node.parents[1];
        auto& pb = node.parents[2];
        auto& pc = node.parents[3];
        auto& pa = node.parents[4];
        auto& pskip = node.parents[5];
        for (auto& p : node.parents) {
            if (p->requires_grad) {
                p->ensure_grad();
            }
        }
        const auto* g = node.grad.data();
        const auto* xv = px->value.data();
        const auto* dv = pd->value.data();
        const auto* bv = pb->value.data();
        const auto* cv = pc->value.data();
        const auto* av = pa->value.data();
        const auto* skip = pskip->value.data();

        // dh carried backwards through time, one row of [C,S].
        std::vector<double> dh(static_cast<std::size_t>(c * s), 0.0);
        for (std::int64_t t = l - 1; t >= 0; --t) {
            for (std::int64_t ch = 0; ch < c; ++ch) {
                const double go = g[t * c + ch];
                const double dt = dv[t * c + ch];
                const double xt = xv[t * c + ch];
                const double* ht = h.data() + (t * c + ch) * s;
                const double* hp = t > 0 ? h.data() + ((t - 1) * c + ch) * s : nullptr;
                double dx_acc = go * skip[ch];
                if (pskip->requires_grad) {
                    pskip->grad[static_cast<std::size_t>(ch)] += go * xt;
                }
                double ddt_acc = 0.0;
                for (std::int64_t j = 0; j < s; ++j) {
                    double gh = dh[static_cast<std::size_t>(ch * s + j)] +
                                go * cv[t * s + j];
                    if (pc->requires_grad) {
                        pc->grad[static_cast<std::size_t>(t * s + j)] += go * ht[j];
                    }
                    const double a = av[ch * s + j];
                    const double abar = std::exp(dt * a);
                    const double hprev = hp != nullptr ? hp[j] : 0.0;
                    // h = abar*hprev + dt*b*x
                    if (pa->requires_grad) {
                        pa->grad[static_cast<std::size_t>(ch * s + j)] +=
                            gh * hprev * abar * dt;
                    }
                    ddt_acc += gh * (hprev * abar * a + bv[t * s + j] * xt);
                    if (pb->requires_grad) {
                        pb->grad[static_cast<std::size_t>(t * s + j)] += gh * dt * xt;
                    }
                    dx_acc += gh * dt * bv[t * s + j];
                    dh[static_cast<std::size_t>(ch * s + j)] = gh * abar;
                }
                if (pd->requires_grad) {
                    pd->grad[static_cast<std::size_t>(t * c + ch)] += ddt_acc;
                }
                if (px->requires_grad) {
                    px->grad[static_cast<std::size_t>(t * c + ch)] += dx_acc;
                }
            }
        }
    };
    return make_op("ssm_scan", {l, c}, std::move(out),
                   {x, delta, b_seq, c_seq, a_decay, d_skip}, std::move(backward));
}

// ---------------------------------------------------------------------------
// deform_conv2d
// ---------------------------------------------------------------------------

namespace {

struct BilinearSample {
    double value = 0.0;
    // Corner indices (-1 when outside) and weights, for gradient routing.
    std::int64_t idx[4] = {-1, -1, -1, -1};
    double wgt[4] = {0.0, 0.0, 0.0, 0.0};
    double ddx = 0.0;  // d value / d qx, given the channel values
    double ddy = 0.0;
};

// Bilinear read of channel plane `plane` (H*W row-major) at (qx,qy);
// out-of-bounds corners contribute zero.
BilinearSample bilinear_at(const double* plane, std::int64_t h, std::int64_t w,
                           double qx, double qy) {
    BilinearSample r;
    const double fx0 = std::floor(qx);
    const double fy0 = std::floor(qy);
    const auto x0 = static_cast<std::int64_t>(fx0);
    const auto y0 = static_cast<std::int64_t>(fy0);
    const double ax = qx - fx0;
    const double ay = qy - fy0;
    const std::int64_t xs[2] = {x0, x0 + 1};
    const std::int64_t ys[2] = {y0, y0 + 1};
    const double wx[2] = {1.0 - ax, ax};
    const double wy[2] = {1.0 - ay, ay};
    double v[2][2] = {{0.0, 0.0}, {0.0, 0.0}};
    int corner = 0;
    for (int iy = 0; iy < 2; ++iy) {
        for (int ix = 0; ix < 2; ++ix, ++corner) {
            if (xs[ix] >= 0 && xs[ix] < w && ys[iy] >= 0 && ys[iy] < h) {
                const auto idx = ys[iy] * w + xs[ix];
                v[iy][ix] = plane[idx];
                r.idx[corner] = idx;
                r.wgt[corner] = wx[ix] * wy[iy];
                r.value += v[iy][ix] * r.wgt[corner];
            }
        }
    }
    r.ddx = (v[0][1] - v[0][0]) * wy[0] + (v[1][1] - v[1][0]) * wy[1];
    r.ddy = (v[1][0] - v[0][0]) * wx[0] + (v[1][1] - v[0][1]) * wx[1];
    return r;
}

}  // namespace

Tensor deform_conv2d(const Tensor& feat, const Tensor& weight,
                     const Tensor& offsets, const Tensor& modulation,
                     std::int64_t groups, std::int64_t kh, std::int64_t kw) {
    require(feat.rank() == 3, "deform_conv2d: feat must be [Cin,H,W]");
    const auto cin = feat.extent(0), h = feat.extent(1), w = feat.extent(2);
    require(groups >= 1 && cin % groups == 0,
            "deform_conv2d: groups must divide input channels");
    require(kh % 2 == 1 && kw % 2 == 1, "deform_conv2d: kernel extents must be odd");
    const auto m = kh * kw;
    require(weight.rank() == 3 && weight.extent(1) == cin / groups &&
                weight.extent(2) == m,
            "deform_conv2d: weight must be [Cout,Cin/groups,kh*kw]");
    const auto cout = weight.extent(0);
    require(cout % groups == 0, "deform_conv2d: groups must divide output channels");
    require(offsets.rank() == 3 && offsets.extent(0) == groups * m * 2 &&
                offsets.extent(1) == h && offsets.extent(2) == w,
            "deform_conv2d: offsets must be [groups*M*2,H,W]");
    require(modulation.rank() == 3 && modulation.extent(0) == groups * m &&
                modulation.extent(1) == h && modulation.extent(2) == w,
            "deform_conv2d: modulation must be [groups*M,H,W]");

    const auto cpg_in = cin / groups;
    const auto cpg_out = cout / groups;
    const auto plane = h * w;
    const auto* fv = feat.data().data();
    const auto* wv = weight.data().data();
    const auto* ov = offsets.data().data();
    const auto* mv = modulation.data().data();

    std::vector<double> out(static_cast<std::size_t>(cout * plane), 0.0);
    parallel_for(0, plane, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t p0 = lo; p0 < hi; ++p0) {
            const auto oy = p0 / w;
            const auto ox = p0 % w;
            for (std::int64_t g = 0; g < groups; ++g) {
                for (std::int64_t k = 0; k < m; ++k) {
                    const auto ky = k / kw, kx = k % kw;
                    const double dx = ov[((g * m + k) * 2 + 0) * plane + p0];
                    const double dy = ov[((g * m + k) * 2 + 1) * plane + p0];
                    const double mod = mv[(g * m + k) * plane + p0];
                    const double qx = static_cast<double>(ox + kx - kw / 2) + dx;
                    const double qy = static_cast<double>(oy + ky - kh / 2) + dy;
                    for (std::int64_t cl = 0; cl < cpg_in; ++cl) {
                        const auto ci = g * cpg_in + cl;
                        const auto sample =
                            bilinear_at(fv + ci * plane, h, w, qx, qy);
                        const double sv = mod * sample.value;
                        if (sv == 0.0) {
                            continue;
                        }
                        for (std::int64_t col = 0; col < cpg_out; ++col) {
                            const auto co = g * cpg_out + col;
                            out[static_cast<std::size_t>(co * plane + p0)] +=
                                wv[(co * cpg_in + cl) * m + k] * sv;
                        }
                    }
                }
            }
        }
    });

    auto backward = [cin, h, w, cout, groups, kh, kw, m, cpg_in, cpg_out,
                     plane](TensorNode& node) {
        auto& pf = node.parents[0];
        auto& pw = node.parents[1];
        auto& po = node.parents[2];
        auto& pm = node.parents[3];
        for (auto& p : node.parents) {
            if (p->requires_grad) {
                p->ensure_grad();
            }
        }
        const auto* g = node.grad.data();
        const auto* fv = pf->value.data();
        const auto* wv = pw->value.data();
        const auto* ov = po->value.data();
        const auto* mv = pm->value.data();

        for (std::int64_t p0 = 0; p0 < plane; ++p0) {
            const auto oy = p0 / w;
            const auto ox = p0 % w;
            for (std::int64_t gi = 0; gi < groups; ++gi) {
                for (std::int64_t k = 0; k < m; ++k) {
                    const auto ky = k / kw, kx = k % kw;
                    const double dx = ov[((gi * m + k) * 2 + 0) * plane + p0];
                    const double dy = ov[((gi * m + k) * 2 + 1) * plane + p0];
                    const double mod = mv[(gi * m + k) * plane + p0];
                    const double qx = static_cast<double>(ox + kx - kw / 2) + dx;
                    const double qy = static_cast<double>(oy + ky - kh / 2) + dy;
                    double dmod = 0.0;
                    double dqx = 0.0;
                    double dqy = 0.0;
                    for (std::int64_t cl = 0; cl < cpg_in; ++cl) {
                        const auto ci = gi * cpg_in + cl;
                        const auto sample =
                            bilinear_at(fv + ci * plane, h, w, qx, qy);
                        // dOut/dsample aggregated over this group's outputs.
                        double gsv = 0.0;
                        for (std::int64_t col = 0; col < cpg_out; ++col) {
                            const auto co = gi * cpg_out + col;
                            const double go = g[co * plane + p0];
                            if (go == 0.0) {
                                continue;
                            }
                            const double wk = wv[(co * cpg_in + cl) * m + k];
                            gsv += go * wk;
                            if (pw->requires_grad) {
                                pw->grad[static_cast<std::size_t>(
                                    (co * cpg_in + cl) * m + k)] +=
                                    go * mod * sample.value;
                            }
                        }
                        if (gsv == 0.0) {
                            continue;
                        }
                        dmod += gsv * sample.value;
                        const double gsample = gsv * mod;
                        dqx += gsample * sample.ddx;
                        dqy += gsample * sample.ddy;
                        if (pf->requires_grad) {
                            for (int corner = 0; corner < 4; ++corner) {
                                if (sample.idx[corner] >= 0) {
                                    pf->grad[static_cast<std::size_t>(
                                        ci * plane + sample.idx[corner])] +=
                                        gsample * sample.wgt[corner];
                                }
                            }
                        }
                    }
                    if (pm->requires_grad) {
                        pm->grad[static_cast<std::size_t>((gi * m + k) * plane +
                                                          p0)] += dmod;
                    }
                    if (po->requires_grad) {
                        po->grad[static_cast<std::size_t>(
                            ((gi * m + k) * 2 + 0) * plane + p0)] += dqx;
                        po->grad[static_cast<std::size_t>(
                            ((gi * m + k) * 2 + 1) * plane + p0)] += dqy;
                    }
                }
            }
        }
    };
    return make_op("deform_conv2d", {cout, h, w}, std::move(out),
                   {feat, weight, offsets, modulation}, std::move(backward));
}

// ---------------------------------------------------------------------------
// lift_splat_op
// ---------------------------------------------------------------------------

Tensor lift_splat_op(const Tensor& feat, const Tensor& depth,
                     const std::vector<std::int32_t>& cell_of,
                     std::int64_t ybins, std::int64_t xbins) {
    require(feat.rank() == 3, "lift_splat_op: feat must be [C,H,W]");
    require(depth.rank() == 3, "lift_splat_op: depth must be [D,H,W]");
    require(feat.extent(1) == depth.extent(1) && feat.extent(2) == depth.extent(2),
            "lift_splat_op: feat and depth extents differ");
    const auto c = feat.extent(0), d = depth.extent(0);
    const auto hw = feat.extent(1) * feat.extent(2);
    require(static_cast<std::int64_t>(cell_of.size()) == d * hw,
            "lift_splat_op: cell table size mismatch");
    const auto cells = ybins * xbins;

    const auto* fv = feat.data().data();
    const auto* dv = depth.data().data();
    std::vector<double> out(static_cast<std::size_t>(c * cells), 0.0);
    for (std::int64_t di = 0; di < d; ++di) {
        for (std::int64_t p = 0; p < hw; ++p) {
            const auto cell = cell_of[static_cast<std::size_t>(di * hw + p)];
            if (cell < 0) {
                continue;
            }
            require(cell < cells, "lift_splat_op: cell index out of range");
            const double prob = dv[di * hw + p];
            for (std::int64_t ch = 0; ch < c; ++ch) {
                out[static_cast<std::size_t>(ch * cells + cell)] +=
                    fv[ch * hw + p] * prob;
            }
        }
    }
    auto backward = [cell_of, c, d, hw, cells](TensorNode& node) {
        auto& pf = node.parents[0];
        auto& pd = node.parents[1];
        const bool need_f = pf->requires_grad;
        const bool need_d = pd->requires_grad;
        if (need_f) {
            pf->ensure_grad();
        }
        if (need_d) {
            pd->ensure_grad();
        }
        const auto* g = node.grad.data();
        for (std::int64_t di = 0; di < d; ++di) {
            for (std::int64_t p = 0; p < hw; ++p) {
                const auto cell = cell_of[static_cast<std::size_t>(di * hw + p)];
                if (cell < 0) {
                    continue;
                }
                const double prob = pd->value[static_cast<std::size_t>(di * hw + p)];
                double dprob = 0.0;
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    const double go = g[ch * cells + cell];
                    if (need_f) {
                        pf->grad[static_cast<std::size_t>(ch * hw + p)] += go * prob;
                    }
                    dprob += go * pf->value[static_cast<std::size_t>(ch * hw + p)];
                }
                if (need_d) {
                    pd->grad[static_cast<std::size_t>(di * hw + p)] += dprob;
                }
            }
        }
    };
    return make_op("lift_splat", {c, ybins, xbins}, std::move(out), {feat, depth},
                   std::move(backward));
}

}  // namespace bevkit
