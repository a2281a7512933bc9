#pragma once

#include <cstdint>
#include <vector>

namespace bevkit::reference {

/// Plain-loop cross-correlation with zero padding, independent of the
/// differentiable kernel. input [cin,h,w], kernel [cout,cin,kh,kw].
std::vector<double> conv2d(const std::vector<double>& input, std::int64_t cin,
                           std::int64_t h, std::int64_t w,
                           const std::vector<double>& kernel, std::int64_t cout,
                           std::int64_t kh, std::int64_t kw, std::int64_t stride,
                           std::int64_t padding);

/// Literal recurrence h[t] = exp(delta*a)h[t-1] + delta*b[t]*x[t],
/// y[t,c] = sum_s c[t,s]h[t,c,s] + d[c]x[t,c]. x,delta [L,C]; b,c [L,S];
/// a [C,S]; d [C].
std::vector<double> ssm_scan(const std::vector<double>& x,
                             const std::vector<double>& delta,
                             const std::vector<double>& b,
                             const std::vector<double>& c,
                             const std::vector<double>& a,
                             const std::vector<double>& d, std::int64_t len,
                             std::int64_t channels, std::int64_t state);

/// Mean focal term computed element by element from the definition.
double focal_loss(const std::vector<double>& prob,
                  const std::vector<double>& target, double alpha, double gamma);

/// Row-wise softmax on [n,m] via direct exponentiation.
std::vector<double> softmax_rows(const std::vector<double>& x, std::int64_t n,
                                 std::int64_t m);

/// Last-axis layer norm on [n,m] from the definition.
std::vector<double> layer_norm(const std::vector<double>& x, std::int64_t n,
                               std::int64_t m, const std::vector<double>& gamma,
                               const std::vector<double>& beta, double eps);

/// Bilinear read of one channel plane [h,w] at (x,y), zero outside.
double bilinear(const std::vector<double>& plane, std::int64_t h, std::int64_t w,
                double x, double y);

}  // namespace bevkit::reference
