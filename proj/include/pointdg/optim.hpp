#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pointdg/tensor.hpp"
#include "pointdg/threadpool.hpp"

namespace pointdg {

struct TrainSchedule {
    double lr_init = 1e-4;
    double lr_final = 1e-5;
    int epochs = 40;
    int warmup_epochs = 5;
};

// Linear warmup from lr_init/warmup to lr_init, then cosine down to lr_final
// at the last epoch.
double lr_at(int epoch, const TrainSchedule& s);

// Decoupled weight decay applied before the bias-corrected Adam update.
class AdamW {
public:
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    void init(const std::vector<std::pair<std::string, Tensor>>& params);
    void step(std::vector<std::pair<std::string, Tensor>>& params, const GradSink& grads,
              double lr, double weight_decay, ThreadPool* pool = nullptr);
    std::int64_t steps_taken() const { return t_; }

private:
    std::vector<std::vector<double>> m_, v_;
    std::int64_t t_ = 0;
};

}  // namespace pointdg
