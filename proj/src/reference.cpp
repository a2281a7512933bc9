#include "bevkit/reference.hpp"

#include <algorithm>
#include <cmath>

namespace bevkit::reference {

std::vector<double> conv2d(const std::vector<double>& input, std::int64_t cin,
                           std::int64_t h, std::int64_t w,
                           const std::vector<double>& kernel, std::int64_t cout,
                           std::int64_t kh, std::int64_t kw, std::int64_t stride,
                           std::int64_t padding) {
    const std::int64_t oh = (h + 2 * padding - kh) / stride + 1;
    const std::int64_t ow = (w + 2 * padding - kw) / stride + 1;
    std::vector<double> out(std::size_t(cout * oh * ow), 0.0);
    for (std::int64_t co = 0; co < cout; ++co) {
        for (std::int64_t oy = 0; oy < oh; ++oy) {
            for (std::int64_t ox = 0; ox < ow; ++ox) {
                double acc = 0.0;
                for (std::int64_t ci = 0; ci < cin; ++ci) {
                    for (std::int64_t ky = 0; ky < kh; ++ky) {
                        for (std::int64_t kx = 0; kx < kw; ++kx) {
                            const std::int64_t iy = oy * stride - padding + ky;
                            const std::int64_t ix = ox * stride - padding + kx;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                            acc += input[std::size_t((ci * h + iy) * w + ix)] *
                                   kernel[std::size_t(
                                       ((co * cin + ci) * kh + ky) * kw + kx)];
                        }
                    }
                }
                out[std::size_t((co * oh + oy) * ow + ox)] = acc;
            }
        }
    }
    return out;
}

std::vector<double> ssm_scan(const std::vector<double>& x,
                             const std::vector<double>& delta,
                             const std::vector<double>& b,
                             const std::vector<double>& c,
                             const std::vector<double>& a,
                             const std::vector<double>& d, std::int64_t len,
                             std::int64_t channels, std::int64_t state) {
    std::vector<double> hidden(std::size_t(channels * state), 0.0);
    std::vector<double> y(std::size_t(len * channels), 0.0);
    for (std::int64_t t = 0; t < len; ++t) {
        for (std::int64_t ch = 0; ch < channels; ++ch) {
            const double dt = delta[std::size_t(t * channels + ch)];
            const double xt = x[std::size_t(t * channels + ch)];
            double out = d[std::size_t(ch)] * xt;
            for (std::int64_t s = 0; s < state; ++s) {
                double& hv = hidden[std::size_t(ch * state + s)];
                hv = std::exp(dt * a[std::size_t(ch * state + s)]) * hv +
                     dt * b[std::size_t(t * state + s)] * xt;
                out += c[std::size_t(t * state + s)] * hv;
            }
            y[std::size_t(t * channels + ch)] = out;
        }
    }
    return y;
}

double focal_loss(const std::vector<double>& prob,
                  const std::vector<double>& target, double alpha, double gamma) {
    double total = 0.0;
    for (std::size_t i = 0; i < prob.size(); ++i) {
        const double p = std::clamp(prob[i], 1e-6, 1.0 - 1e-6);
        const bool pos = target[i] == 1.0;
        const double pt = pos ? p : 1.0 - p;
        const double at = pos ? alpha : 1.0 - alpha;
        total += -at * std::pow(1.0 - pt, gamma) * std::log(pt);
    }
    return total / double(prob.size());
}

std::vector<double> softmax_rows(const std::vector<double>& x, std::int64_t n,
                                 std::int64_t m) {
    std::vector<double> out(x.size());
    for (std::int64_t i = 0; i < n; ++i) {
        const double* row = x.data() + i * m;
        const double mx = *std::max_element(row, row + m);
        double denom = 0.0;
        for (std::int64_t j = 0; j < m; ++j) denom += std::exp(row[j] - mx);
        for (std::int64_t j = 0; j < m; ++j) {
            out[std::size_t(i * m + j)] = std::exp(row[j] - mx) / denom;
        }
    }
    return out;
}

std::vector<double> layer_norm(const std::vector<double>& x, std::int64_t n,
                               std::int64_t m, const std::vector<double>& gamma,
                               const std::vector<double>& beta, double eps) {
    std::vector<double> out(x.size());
    for (std::int64_t i = 0; i < n; ++i) {
        const double* row = x.data() + i * m;
        double mu = 0.0;
        for (std::int64_t j = 0; j < m; ++j) mu += row[j];
        mu /= double(m);
        double var = 0.0;
        for (std::int64_t j = 0; j < m; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= double(m);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::int64_t j = 0; j < m; ++j) {
            out[std::size_t(i * m + j)] =
                (row[j] - mu) * inv * gamma[std::size_t(j)] + beta[std::size_t(j)];
        }
    }
    return out;
}

double bilinear(const std::vector<double>& plane, std::int64_t h, std::int64_t w,
                double x, double y) {
    const double x0 = std::floor(x), y0 = std::floor(y);
    const double ax = x - x0, ay = y - y0;
    auto at = [&](double yy, double xx) {
        const auto iy = std::int64_t(yy), ix = std::int64_t(xx);
        if (iy < 0 || iy >= h || ix < 0 || ix >= w) return 0.0;
        return plane[std::size_t(iy * w + ix)];
    };
    return at(y0, x0) * (1.0 - ax) * (1.0 - ay) + at(y0, x0 + 1) * ax * (1.0 - ay) +
           at(y0 + 1, x0) * (1.0 - ax) * ay + at(y0 + 1, x0 + 1) * ax * ay;
}

}  // namespace bevkit::reference
