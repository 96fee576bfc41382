#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pointdg/tensor.hpp"

namespace pointdg {

// Cross-domain feature aggregation: f' = Conv(MLP(f1) (x) MLP(f2)) plus a
// learnable global prompt block shared by every sample.
struct ScfaParams {
    Tensor mlp1_w1, mlp1_b1, mlp1_w2, mlp1_b2;  // tokenwise D->D->D
    Tensor mlp2_w1, mlp2_b1, mlp2_w2, mlp2_b2;
    Tensor conv_w, conv_b;          // D x D x k, D
    Tensor concat_proj_w, concat_proj_b;  // 2D -> D, used by the concat ablation
    Tensor global_prompt;           // L x D
    int width = 0;
    int prompt_len = 0;

    static ScfaParams init(int width, int prompt_len, int conv_kernel, Rng& rng);
    void params(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix) const;
};

// Eq-style gated aggregation of the denoised sequence with a same-class
// cross-domain sequence.
Tensor scfa_aggregate(const ScfaParams& p, const Tensor& f1, const Tensor& f2);

// Ablation aggregations.
Tensor aggregate_sum(const Tensor& f1, const Tensor& f2);
Tensor aggregate_concat_proj(const ScfaParams& p, const Tensor& f1, const Tensor& f2);

// Token-axis concatenation of the blocks that are switched on, in the fixed
// order (f1, f', f_g). Every block must have the same length and width.
Tensor assemble_sequence(const std::vector<Tensor>& blocks);

}  // namespace pointdg
