#pragma once

#include <atomic>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

#include "vfl/errors.hpp"

namespace vfl {

// Runs fn(i) for every i in [0, n) across up to jobs threads. Work items are
// handed out through a shared counter, but each item writes only to its own
// index in caller-owned storage, so results never depend on the schedule.
// The first captured exception is rethrown after all threads join.
inline void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
    if (jobs < 1) throw ContractError("jobs must be at least 1");
    if (n <= 0) return;
    jobs = std::min(jobs, n);
    if (jobs == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::exception_ptr> errors(static_cast<size_t>(jobs));
    std::vector<std::thread> pool;
    pool.reserve(size_t(jobs));
    for (int t = 0; t < jobs; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
            } catch (...) {
                errors[size_t(t)] = std::current_exception();
            }
        });
    }
    for (std::thread& th : pool) th.join();
    for (const std::exception_ptr& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace vfl
