#include "pointdg/msd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace pointdg {

Tensor predict_mask_probs(const Tensor& seq, const Tensor& W_mask) {
    if (seq.rank() != 2 || W_mask.rank() != 2 || W_mask.dim(1) != 2 ||
        W_mask.dim(0) != seq.dim(1))
        throw std::invalid_argument("predict_mask_probs: expects seq (L,D) and W_mask (D,2)");
    return clamp(softmax(matmul(seq, W_mask), 1), 1e-8, 1.0 - 1e-8);
}

MaskVector gumbel_softmax_mask(const Tensor& p, double tau, Rng* rng) {
    if (tau <= 0.0) throw std::invalid_argument("gumbel_softmax_mask: tau must be > 0");
    if (p.rank() != 2 || p.dim(1) != 2)
        throw std::invalid_argument("gumbel_softmax_mask: p must be (L,2)");
    const std::int64_t L = p.dim(0);
    MaskVector out;
    out.p = p;
    out.tau = tau;
    // m = sigmoid(((g1 - g0) + (log p1 - log p0)) / tau), the keep component of
    // the 2-way softmax over (g_i + log p_i) / tau.
    Tensor lp = log(p);
    Tensor diff = sub(slice(lp, 1, 1, 1).reshape({L}), slice(lp, 1, 0, 1).reshape({L}));
    if (rng) {
        out.g.resize(static_cast<std::size_t>(2 * L));
        std::vector<double> gd(static_cast<std::size_t>(L));
        for (std::int64_t t = 0; t < L; ++t) {
            const double g0 = rng->gumbel();
            const double g1 = rng->gumbel();
            out.g[static_cast<std::size_t>(2 * t)] = g0;
            out.g[static_cast<std::size_t>(2 * t + 1)] = g1;
            gd[static_cast<std::size_t>(t)] = g1 - g0;
        }
        diff = add(diff, Tensor::from(std::move(gd), {L}));
    }
    out.m = sigmoid(scale(diff, 1.0 / tau));
    return out;
}

Tensor apply_mask(const Tensor& seq, const Tensor& m) {
    if (seq.rank() != 2 || m.numel() != seq.dim(0))
        throw std::invalid_argument("apply_mask: mask length " +
                                    std::to_string(m.numel()) + " != sequence length " +
                                    std::to_string(seq.rank() == 2 ? seq.dim(0) : -1));
    return rowscale(seq, m);
}

Tensor baseline_mask_random5(std::int64_t L, Rng& rng) {
    const std::int64_t k = std::max<std::int64_t>(
        1, static_cast<std::int64_t>(std::llround(0.05 * static_cast<double>(L))));
    std::vector<std::int64_t> idx(static_cast<std::size_t>(L));
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx.data(), idx.size());
    Tensor m = Tensor::full({L}, 1.0);
    for (std::int64_t i = 0; i < k; ++i) m.data()[idx[static_cast<std::size_t>(i)]] = 0.0;
    return m;
}

Tensor baseline_mask_similarity_top80(const Tensor& seq, const Tensor& reference) {
    if (!reference.defined())
        throw std::invalid_argument("similarity mask requires a cross-domain reference");
    if (seq.rank() != 2 || reference.rank() != 2 || reference.dim(1) != seq.dim(1))
        throw std::invalid_argument("similarity mask: reference width must match sequence");
    const std::int64_t L = seq.dim(0), D = seq.dim(1), R = reference.dim(0);
    auto row_norm = [D](const double* r) {
        double s = 0.0;
        for (std::int64_t j = 0; j < D; ++j) s += r[j] * r[j];
        return std::sqrt(s) + 1e-12;
    };
    std::vector<double> score(static_cast<std::size_t>(L), 0.0);
    for (std::int64_t t = 0; t < L; ++t) {
        const double* a = seq.data() + t * D;
        const double na = row_norm(a);
        for (std::int64_t r = 0; r < R; ++r) {
            const double* b = reference.data() + r * D;
            double dot = 0.0;
            for (std::int64_t j = 0; j < D; ++j) dot += a[j] * b[j];
            score[static_cast<std::size_t>(t)] += dot / (na * row_norm(b));
        }
    }
    const std::int64_t keep = static_cast<std::int64_t>(
        std::llround(0.8 * static_cast<double>(L)));
    std::vector<std::int64_t> idx(static_cast<std::size_t>(L));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::int64_t a, std::int64_t b) {
        return score[static_cast<std::size_t>(a)] > score[static_cast<std::size_t>(b)];
    });
    Tensor m = Tensor::zeros({L});
    for (std::int64_t i = 0; i < keep && i < L; ++i)
        m.data()[idx[static_cast<std::size_t>(i)]] = 1.0;
    return m;
}

}  // namespace pointdg
