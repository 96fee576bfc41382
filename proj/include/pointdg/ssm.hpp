#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pointdg/tensor.hpp"

namespace pointdg {

// One selective-SSM block. The continuous state matrix is A = -exp(A_log),
// kept negative so the discretized recurrence never grows the state.
struct SsmBlockParams {
    Tensor A_log;    // D x S
    Tensor W_B;      // D x S
    Tensor W_C;      // D x S
    Tensor w_delta;  // D x 1
    Tensor b_delta;  // scalar bias, softplus keeps delta positive
    Tensor in_proj;  // D x D
    Tensor out_proj; // D x D
    Tensor skip;     // D
    Tensor ln_gamma; // D
    Tensor ln_beta;  // D
    int width = 0;
    int state = 0;

    static SsmBlockParams init(int width, int state, Rng& rng);
    void params(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix) const;
};

// Zero-order hold on a_bar with the Euler simplification b_bar = delta * B_t.
struct Discretized {
    std::vector<double> a_bar;  // same size as A
    std::vector<double> b_bar;  // same size as B_t
};
Discretized discretize(double delta, const std::vector<double>& A, const std::vector<double>& B_t);

// Content-conditioned scan: delta/B/C are projections of each token; tokens
// are visited in `order` and outputs scattered back to canonical positions.
Tensor selective_scan(const Tensor& x, const SsmBlockParams& p,
                      const std::vector<std::int64_t>& order);

// in_proj -> gated selective scan -> out_proj -> residual -> layernorm.
Tensor mamba_block_forward(const Tensor& x, const SsmBlockParams& p,
                           const std::vector<std::int64_t>& order);

std::vector<std::int64_t> identity_order(std::int64_t L);

}  // namespace pointdg
