#pragma once

#include <random>
#include <string>

#include "bevkit/serialize.hpp"
#include "bevkit/tensor.hpp"

namespace bevkit {

struct MambaConfig {
    std::int64_t dim = 16;        // sequence feature width
    std::int64_t state_dim = 8;   // recurrent state per inner channel
    std::int64_t expand = 2;      // inner width = expand * dim
    std::int64_t conv_kernel = 4; // causal depthwise taps
    bool use_conv = true;

    std::int64_t inner() const { return expand * dim; }
};

/// One gated state-space block. With zero input the block returns zero
/// (projections have no bias, the output bias starts at zero), so a fresh
/// block is an identity on the residual path.
struct MambaParams {
    MambaConfig cfg;
    Tensor w_x;        // [dim, inner]
    Tensor w_z;        // [dim, inner]
    Tensor conv_taps;  // [K, inner]
    Tensor w_delta;    // [inner, inner]
    Tensor b_delta;    // [inner]
    Tensor w_b;        // [inner, state]
    Tensor w_c;        // [inner, state]
    Tensor a_log;      // [inner, state]; decay = -exp(a_log)
    Tensor d_skip;     // [inner]
    Tensor w_out;      // [inner, dim]
    Tensor b_out;      // [dim]
};

MambaParams make_mamba(const MambaConfig& cfg, std::mt19937_64& rng);
void register_mamba(ParamRegistry& reg, const std::string& prefix,
                    const MambaParams& p);

/// seq [L,dim] -> [L,dim], residual included.
Tensor mamba_layer(const MambaParams& p, const Tensor& seq);

}  // namespace bevkit
