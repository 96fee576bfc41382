#include "pointdg/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace pointdg {

double lr_at(int epoch, const TrainSchedule& s) {
    if (epoch < 0 || epoch >= s.epochs)
        throw std::invalid_argument("lr_at: epoch " + std::to_string(epoch) + " outside [0," +
                                    std::to_string(s.epochs) + ")");
    if (s.warmup_epochs > 0 && epoch < s.warmup_epochs) {
        const double start = s.lr_init / static_cast<double>(s.warmup_epochs);
        return start + (s.lr_init - start) * static_cast<double>(epoch) /
                           static_cast<double>(s.warmup_epochs);
    }
    const int span = (s.epochs - 1) - s.warmup_epochs;
    if (span <= 0) return epoch >= s.warmup_epochs ? s.lr_final : s.lr_init;
    const double t = static_cast<double>(epoch - s.warmup_epochs) / static_cast<double>(span);
    return s.lr_final + (s.lr_init - s.lr_final) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

void AdamW::init(const std::vector<std::pair<std::string, Tensor>>& params) {
    m_.clear();
    v_.clear();
    for (const auto& [name, p] : params) {
        m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
        v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    }
    t_ = 0;
}

void AdamW::step(std::vector<std::pair<std::string, Tensor>>& params, const GradSink& grads,
                 double lr, double weight_decay, ThreadPool* pool) {
    if (m_.size() != params.size())
        throw std::logic_error("AdamW::step called before init or with a different param set");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    auto update_one = [&](std::int64_t i) {
        auto& [name, p] = params[static_cast<std::size_t>(i)];
        const std::int64_t n = p.numel();
        const DataVec* g = grads.find(p.impl());
        double* pd = p.data();
        auto& m = m_[static_cast<std::size_t>(i)];
        auto& v = v_[static_cast<std::size_t>(i)];
        for (std::int64_t j = 0; j < n; ++j) {
            const double gj = g ? (*g)[static_cast<std::size_t>(j)] : 0.0;
            if (!std::isfinite(gj))
                throw std::runtime_error("AdamW: non-finite gradient in tensor '" + name + "'");
            if (weight_decay != 0.0) pd[j] -= lr * weight_decay * pd[j];
            m[static_cast<std::size_t>(j)] = beta1 * m[static_cast<std::size_t>(j)] + (1.0 - beta1) * gj;
            v[static_cast<std::size_t>(j)] =
                beta2 * v[static_cast<std::size_t>(j)] + (1.0 - beta2) * gj * gj;
            const double mhat = m[static_cast<std::size_t>(j)] / bc1;
            const double vhat = v[static_cast<std::size_t>(j)] / bc2;
            pd[j] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    };
    if (pool)
        pool->parallel_for(0, static_cast<std::int64_t>(params.size()), update_one);
    else
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(params.size()); ++i) update_one(i);
}

}  // namespace pointdg
