#pragma once

#include <cstdint>
#include <vector>

#include "pointdg/tensor.hpp"

namespace pointdg {

// Learned soft mask over the token sequence, sampled with Gumbel-Softmax so
// the keep/drop decision stays differentiable.
struct MaskVector {
    Tensor m;                // L keep weights in (0,1), on the tape when learned
    Tensor p;                // L x 2 probabilities (column 0 drop, column 1 keep)
    std::vector<double> g;   // flattened L x 2 Gumbel draws; empty when noiseless
    double tau = 1.0;
};

// p = softmax(W_mask . token) per token, clamped to [1e-8, 1-1e-8].
Tensor predict_mask_probs(const Tensor& seq, const Tensor& W_mask);

// Keep-component of a 2-way Gumbel-Softmax; rng == nullptr draws no noise
// (deterministic evaluation-time mask).
MaskVector gumbel_softmax_mask(const Tensor& p, double tau, Rng* rng);

// F = f (x) m with the mask broadcast across feature channels.
Tensor apply_mask(const Tensor& seq, const Tensor& m);

// Ablation masks; both are hard 0/1 vectors that carry no gradient.
Tensor baseline_mask_random5(std::int64_t L, Rng& rng);
Tensor baseline_mask_similarity_top80(const Tensor& seq, const Tensor& reference);

}  // namespace pointdg
