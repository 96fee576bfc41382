#include "pointdg/ssm.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace pointdg {

SsmBlockParams SsmBlockParams::init(int width, int state, Rng& rng) {
    SsmBlockParams p;
    p.width = width;
    p.state = state;
    // S4D-real style: A = -(1..S) per channel
    std::vector<double> alog(static_cast<std::size_t>(width * state));
    for (int d = 0; d < width; ++d)
        for (int s = 0; s < state; ++s)
            alog[static_cast<std::size_t>(d * state + s)] = std::log(static_cast<double>(s + 1));
    p.A_log = Tensor::from(std::move(alog), {width, state}).set_requires_grad(true);
    const double sd = 1.0 / std::sqrt(static_cast<double>(width));
    p.W_B = Tensor::randn({width, state}, rng, sd).set_requires_grad(true);
    p.W_C = Tensor::randn({width, state}, rng, sd).set_requires_grad(true);
    p.w_delta = Tensor::randn({width, 1}, rng, sd).set_requires_grad(true);
    // softplus(b) ~= 0.05 at init
    p.b_delta = Tensor::from({std::log(std::expm1(0.05))}, {}).set_requires_grad(true);
    p.in_proj = Tensor::randn({width, width}, rng, sd).set_requires_grad(true);
    p.out_proj = Tensor::randn({width, width}, rng, sd).set_requires_grad(true);
    p.skip = Tensor::full({width}, 1.0).set_requires_grad(true);
    p.ln_gamma = Tensor::full({width}, 1.0).set_requires_grad(true);
    p.ln_beta = Tensor::zeros({width}).set_requires_grad(true);
    return p;
}

void SsmBlockParams::params(std::vector<std::pair<std::string, Tensor>>& out,
                            const std::string& prefix) const {
    out.emplace_back(prefix + ".A_log", A_log);
    out.emplace_back(prefix + ".W_B", W_B);
    out.emplace_back(prefix + ".W_C", W_C);
    out.emplace_back(prefix + ".w_delta", w_delta);
    out.emplace_back(prefix + ".b_delta", b_delta);
    out.emplace_back(prefix + ".in_proj", in_proj);
    out.emplace_back(prefix + ".out_proj", out_proj);
    out.emplace_back(prefix + ".skip", skip);
    out.emplace_back(prefix + ".ln_gamma", ln_gamma);
    out.emplace_back(prefix + ".ln_beta", ln_beta);
}

Discretized discretize(double delta, const std::vector<double>& A,
                       const std::vector<double>& B_t) {
    Discretized d;
    d.a_bar.resize(A.size());
    for (std::size_t i = 0; i < A.size(); ++i) d.a_bar[i] = std::exp(delta * A[i]);
    d.b_bar.resize(B_t.size());
    for (std::size_t i = 0; i < B_t.size(); ++i) d.b_bar[i] = delta * B_t[i];
    return d;
}

Tensor selective_scan(const Tensor& x, const SsmBlockParams& p,
                      const std::vector<std::int64_t>& order) {
    if (x.rank() != 2 || x.dim(1) != p.width)
        throw std::invalid_argument("selective_scan: sequence width " + shape_str(x.shape()) +
                                    " does not match block width " + std::to_string(p.width));
    const std::int64_t L = x.dim(0);
    Tensor B = matmul(x, p.W_B);
    Tensor C = matmul(x, p.W_C);
    Tensor delta = softplus(add(matmul(x, p.w_delta).reshape({L}), p.b_delta));
    Tensor y = scan_recurrence(x, delta, B, C, p.A_log, order);
    return add(y, mul(x, p.skip));
}

Tensor mamba_block_forward(const Tensor& x, const SsmBlockParams& p,
                           const std::vector<std::int64_t>& order) {
    if (x.rank() != 2 || x.dim(1) != p.width)
        throw std::invalid_argument("mamba_block_forward: width mismatch, got " +
                                    shape_str(x.shape()) + " for block width " +
                                    std::to_string(p.width));
    Tensor u = matmul(x, p.in_proj);
    Tensor s = selective_scan(u, p, order);
    Tensor gated = mul(s, silu(u));
    return layernorm(add(x, matmul(gated, p.out_proj)), p.ln_gamma, p.ln_beta);
}

std::vector<std::int64_t> identity_order(std::int64_t L) {
    std::vector<std::int64_t> o(static_cast<std::size_t>(L));
    std::iota(o.begin(), o.end(), 0);
    return o;
}

}  // namespace pointdg
