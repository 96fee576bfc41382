#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pointdg/ssm.hpp"
#include "pointdg/tensor.hpp"

namespace pointdg {

// Traversal orders over an assembled block sequence of `blocks` equal parts.
// IDS walks the blocks one after another; CDS interleaves the blocks
// position-wise: perm[blocks*t + j] = j*L + t.
std::vector<std::int64_t> ids_order(std::int64_t block_len, int blocks = 3);
std::vector<std::int64_t> cds_order(std::int64_t block_len, int blocks = 3);

enum class BaselineScan { Forward, Backward, Shuffle };
BaselineScan baseline_scan_from(const std::string& name);
std::vector<std::int64_t> baseline_order(BaselineScan kind, std::int64_t total, Rng* rng);

enum class DdsMode { TwoPass, Composed };

// Two successive scan passes: IDS order then CDS order (each with its own
// block parameters). Composed mode folds both orders into a single pass over
// the second block, kept for the ablation harness.
Tensor dual_scan(const Tensor& F, const SsmBlockParams& block1, const SsmBlockParams& block2,
                 DdsMode mode = DdsMode::TwoPass, int blocks = 3);

}  // namespace pointdg
