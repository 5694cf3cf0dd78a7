#pragma once

#include <algorithm>
#include <condition_variable>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace capsroute {

// Worker cap: CAPSROUTE_THREADS if set, else hardware concurrency.
inline int max_threads() {
    static const int cached = [] {
        if (const char* env = std::getenv("CAPSROUTE_THREADS")) {
            const int n = std::atoi(env);
            if (n >= 1) return n;
        }
        const unsigned hw = std::thread::hardware_concurrency();
        return hw == 0 ? 1 : static_cast<int>(hw);
    }();
    return cached;
}

namespace detail {

// Persistent pool so hot loops do not pay thread startup per call.
class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool(max_threads() - 1);
        return pool;
    }

    // Runs fn(k) for k in [0, tasks) on the pool plus the calling thread.
    void run(int tasks, const std::function<void(int)>& fn) {
        if (tasks <= 1 || workers_.empty()) {
            for (int k = 0; k < tasks; ++k) fn(k);
            return;
        }
        {
            std::unique_lock lock(mu_);
            job_ = &fn;
            next_task_ = 0;
            total_tasks_ = tasks;
            pending_ = tasks;
            ++generation_;
        }
        cv_.notify_all();
        work_loop();
        std::unique_lock lock(mu_);
        done_cv_.wait(lock, [this] { return pending_ == 0; });
        job_ = nullptr;
    }

    ~ThreadPool() {
        {
            std::unique_lock lock(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : workers_) t.join();
    }

private:
    explicit ThreadPool(int n_workers) {
        for (int i = 0; i < n_workers; ++i) {
            workers_.emplace_back([this] { worker_main(); });
        }
    }

    void worker_main() {
        long seen = 0;
        for (;;) {
            {
                std::unique_lock lock(mu_);
                cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
                if (stop_) return;
                seen = generation_;
            }
            work_loop();
        }
    }

    void work_loop() {
        for (;;) {
            int k;
            const std::function<void(int)>* job;
            {
                std::unique_lock lock(mu_);
                if (job_ == nullptr || next_task_ >= total_tasks_) return;
                k = next_task_++;
                job = job_;
            }
            (*job)(k);
            {
                std::unique_lock lock(mu_);
                if (--pending_ == 0) done_cv_.notify_all();
            }
        }
    }

    std::vector<std::thread> workers_;
    std::mutex mu_;
    std::condition_variable cv_, done_cv_;
    const std::function<void(int)>* job_ = nullptr;
    int next_task_ = 0, total_tasks_ = 0, pending_ = 0;
    long generation_ = 0;
    bool stop_ = false;
};

} // namespace detail

// Deterministic parallel map over [0, n): the body writes only to cells it owns,
// so results are identical for any worker count. Reductions must stay inside a
// single index (sum over the reduction axis per output cell, never across cells).
template <typename Fn>
void parallel_for(std::size_t n, Fn&& body, std::size_t grain = 1024) {
    if (n == 0) return;
    const int threads = max_threads();
    if (threads <= 1 || n <= grain) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    const std::size_t chunks = std::min<std::size_t>(
        static_cast<std::size_t>(threads) * 4, (n + grain - 1) / grain);
    const std::size_t step = (n + chunks - 1) / chunks;
    detail::ThreadPool::instance().run(static_cast<int>(chunks), [&](int c) {
        const std::size_t lo = static_cast<std::size_t>(c) * step;
        const std::size_t hi = std::min(n, lo + step);
        for (std::size_t i = lo; i < hi; ++i) body(i);
    });
}

} // namespace capsroute
