#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace pointdg {

// Index-parallel worker pool. Results must be written to per-index slots so
// the outcome is identical for any thread count or schedule.
class ThreadPool {
public:
    explicit ThreadPool(int threads) {
        const int n = threads > 1 ? threads - 1 : 0;  // caller thread participates
        for (int i = 0; i < n; ++i)
            workers_.emplace_back([this] { worker_loop(); });
    }

    ~ThreadPool() {
        {
            std::lock_guard<std::mutex> lk(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& w : workers_) w.join();
    }

    ThreadPool(const ThreadPool&) = delete;
    ThreadPool& operator=(const ThreadPool&) = delete;

    void parallel_for(std::int64_t begin, std::int64_t end,
                      const std::function<void(std::int64_t)>& fn) {
        if (end <= begin) return;
        if (workers_.empty()) {
            for (std::int64_t i = begin; i < end; ++i) fn(i);
            return;
        }
        {
            std::lock_guard<std::mutex> lk(mu_);
            job_fn_ = &fn;
            next_.store(begin, std::memory_order_relaxed);
            end_ = end;
            pending_ = static_cast<int>(workers_.size());
            ++generation_;
        }
        cv_.notify_all();
        run_range();  // caller participates
        std::unique_lock<std::mutex> lk(mu_);
        done_cv_.wait(lk, [this] { return pending_ == 0; });
        job_fn_ = nullptr;
        if (error_) {
            auto e = error_;
            error_ = nullptr;
            std::rethrow_exception(e);
        }
    }

    int size() const { return static_cast<int>(workers_.size()) + 1; }

private:
    void run_range() {
        while (true) {
            const std::int64_t i = next_.fetch_add(1, std::memory_order_relaxed);
            if (i >= end_) break;
            try {
                (*job_fn_)(i);
            } catch (...) {
                std::lock_guard<std::mutex> lk(mu_);
                if (!error_) error_ = std::current_exception();
            }
        }
    }

    void worker_loop() {
        std::uint64_t seen = 0;
        while (true) {
            std::unique_lock<std::mutex> lk(mu_);
            cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
            if (stop_) return;
            seen = generation_;
            lk.unlock();
            run_range();
            lk.lock();
            if (--pending_ == 0) done_cv_.notify_all();
        }
    }

    std::vector<std::thread> workers_;
    std::mutex mu_;
    std::condition_variable cv_, done_cv_;
    const std::function<void(std::int64_t)>* job_fn_ = nullptr;
    std::atomic<std::int64_t> next_{0};
    std::int64_t end_ = 0;
    int pending_ = 0;
    std::uint64_t generation_ = 0;
    bool stop_ = false;
    std::exception_ptr error_;
};

}  // namespace pointdg
