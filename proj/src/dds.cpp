#include "pointdg/dds.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace pointdg {

std::vector<std::int64_t> ids_order(std::int64_t block_len, int blocks) {
    if (block_len < 1) throw std::invalid_argument("ids_order: block length must be >= 1");
    return identity_order(block_len * blocks);
}

std::vector<std::int64_t> cds_order(std::int64_t block_len, int blocks) {
    if (block_len < 1) throw std::invalid_argument("cds_order: block length must be >= 1");
    std::vector<std::int64_t> perm(static_cast<std::size_t>(block_len * blocks));
    for (std::int64_t t = 0; t < block_len; ++t)
        for (int j = 0; j < blocks; ++j)
            perm[static_cast<std::size_t>(t * blocks + j)] = j * block_len + t;
    return perm;
}

BaselineScan baseline_scan_from(const std::string& name) {
    if (name == "forward") return BaselineScan::Forward;
    if (name == "backward") return BaselineScan::Backward;
    if (name == "shuffle") return BaselineScan::Shuffle;
    throw std::invalid_argument("unknown baseline scan '" + name + "'");
}

std::vector<std::int64_t> baseline_order(BaselineScan kind, std::int64_t total, Rng* rng) {
    std::vector<std::int64_t> perm(static_cast<std::size_t>(total));
    std::iota(perm.begin(), perm.end(), 0);
    switch (kind) {
        case BaselineScan::Forward:
            break;
        case BaselineScan::Backward:
            std::reverse(perm.begin(), perm.end());
            break;
        case BaselineScan::Shuffle:
            if (!rng) throw std::invalid_argument("shuffle scan needs an rng");
            rng->shuffle(perm.data(), perm.size());
            break;
    }
    return perm;
}

Tensor dual_scan(const Tensor& F, const SsmBlockParams& block1, const SsmBlockParams& block2,
                 DdsMode mode, int blocks) {
    if (F.rank() != 2 || F.dim(0) % blocks != 0)
        throw std::invalid_argument("dual_scan: sequence length " +
                                    std::to_string(F.rank() == 2 ? F.dim(0) : -1) +
                                    " is not divisible by " + std::to_string(blocks));
    const std::int64_t L = F.dim(0) / blocks;
    if (mode == DdsMode::Composed) {
        // single pass over the composed traversal CDS(IDS(.)); IDS is the
        // identity over the assembled sequence, so the composition is CDS
        return mamba_block_forward(F, block1, cds_order(L, blocks));
    }
    Tensor mid = mamba_block_forward(F, block1, ids_order(L, blocks));
    return mamba_block_forward(mid, block2, cds_order(L, blocks));
}

}  // namespace pointdg
