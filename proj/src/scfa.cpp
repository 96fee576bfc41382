#include "pointdg/scfa.hpp"

#include <cmath>
#include <stdexcept>

namespace pointdg {

ScfaParams ScfaParams::init(int width, int prompt_len, int conv_kernel, Rng& rng) {
    if (conv_kernel % 2 == 0)
        throw std::invalid_argument("ScfaParams: conv kernel must be odd");
    ScfaParams p;
    p.width = width;
    p.prompt_len = prompt_len;
    const double sd = 1.0 / std::sqrt(static_cast<double>(width));
    auto lin = [&](int in, int out) {
        return Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)))
            .set_requires_grad(true);
    };
    p.mlp1_w1 = lin(width, width);
    p.mlp1_b1 = Tensor::zeros({width}).set_requires_grad(true);
    p.mlp1_w2 = lin(width, width);
    p.mlp1_b2 = Tensor::zeros({width}).set_requires_grad(true);
    p.mlp2_w1 = lin(width, width);
    p.mlp2_b1 = Tensor::zeros({width}).set_requires_grad(true);
    p.mlp2_w2 = lin(width, width);
    p.mlp2_b2 = Tensor::zeros({width}).set_requires_grad(true);
    p.conv_w = Tensor::randn({width, width, conv_kernel}, rng,
                             sd / std::sqrt(static_cast<double>(conv_kernel)))
                   .set_requires_grad(true);
    p.conv_b = Tensor::zeros({width}).set_requires_grad(true);
    p.concat_proj_w = lin(2 * width, width);
    p.concat_proj_b = Tensor::zeros({width}).set_requires_grad(true);
    p.global_prompt = Tensor::randn({prompt_len, width}, rng, 0.02).set_requires_grad(true);
    return p;
}

void ScfaParams::params(std::vector<std::pair<std::string, Tensor>>& out,
                        const std::string& prefix) const {
    out.emplace_back(prefix + ".mlp1.w1", mlp1_w1);
    out.emplace_back(prefix + ".mlp1.b1", mlp1_b1);
    out.emplace_back(prefix + ".mlp1.w2", mlp1_w2);
    out.emplace_back(prefix + ".mlp1.b2", mlp1_b2);
    out.emplace_back(prefix + ".mlp2.w1", mlp2_w1);
    out.emplace_back(prefix + ".mlp2.b1", mlp2_b1);
    out.emplace_back(prefix + ".mlp2.w2", mlp2_w2);
    out.emplace_back(prefix + ".mlp2.b2", mlp2_b2);
    out.emplace_back(prefix + ".conv.w", conv_w);
    out.emplace_back(prefix + ".conv.b", conv_b);
    out.emplace_back(prefix + ".concat_proj.w", concat_proj_w);
    out.emplace_back(prefix + ".concat_proj.b", concat_proj_b);
    out.emplace_back(prefix + ".global_prompt", global_prompt);
}

namespace {

Tensor mlp2layer(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                 const Tensor& b2) {
    return add(matmul(relu(add(matmul(x, w1), b1)), w2), b2);
}

void check_pair(const char* op, const Tensor& f1, const Tensor& f2) {
    if (f1.rank() != 2 || f2.rank() != 2 || f1.shape() != f2.shape())
        throw std::invalid_argument(std::string(op) + ": f1 " + shape_str(f1.shape()) +
                                    " and f2 " + shape_str(f2.shape()) + " must match");
}

}  // namespace

Tensor scfa_aggregate(const ScfaParams& p, const Tensor& f1, const Tensor& f2) {
    check_pair("scfa_aggregate", f1, f2);
    Tensor a = mlp2layer(f1, p.mlp1_w1, p.mlp1_b1, p.mlp1_w2, p.mlp1_b2);
    Tensor b = mlp2layer(f2, p.mlp2_w1, p.mlp2_b1, p.mlp2_w2, p.mlp2_b2);
    return conv1d(mul(a, b), p.conv_w, p.conv_b);
}

Tensor aggregate_sum(const Tensor& f1, const Tensor& f2) {
    check_pair("aggregate_sum", f1, f2);
    return add(f1, f2);
}

Tensor aggregate_concat_proj(const ScfaParams& p, const Tensor& f1, const Tensor& f2) {
    check_pair("aggregate_concat_proj", f1, f2);
    Tensor cat = concat({f1, f2}, 1);  // L x 2D
    return add(matmul(cat, p.concat_proj_w), p.concat_proj_b);
}

Tensor assemble_sequence(const std::vector<Tensor>& blocks) {
    if (blocks.empty()) throw std::invalid_argument("assemble_sequence: no blocks");
    const Shape& s0 = blocks.front().shape();
    for (const auto& b : blocks)
        if (b.rank() != 2 || b.shape() != s0)
            throw std::invalid_argument("assemble_sequence: block shapes differ: " +
                                        shape_str(b.shape()) + " vs " + shape_str(s0));
    if (blocks.size() == 1) return blocks.front();
    return concat(blocks, 0);
}

}  // namespace pointdg
