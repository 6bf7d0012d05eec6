#include "pvf/common.hpp"

#include <cstdlib>
#include <thread>

namespace pvf {

namespace {
int g_threads = 0;  // 0 = unresolved
}

int threads() {
    if (g_threads > 0) return g_threads;
    if (const char* env = std::getenv("PVF_THREADS")) {
        int n = std::atoi(env);
        if (n > 0) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

void set_threads(int n) { g_threads = n; }

std::atomic<int64_t> AllocStats::current_bytes{0};
std::atomic<int64_t> AllocStats::peak_bytes{0};

void AllocStats::on_alloc(int64_t bytes) {
    int64_t cur = current_bytes.fetch_add(bytes, std::memory_order_relaxed) + bytes;
    int64_t peak = peak_bytes.load(std::memory_order_relaxed);
    while (cur > peak && !peak_bytes.compare_exchange_weak(peak, cur, std::memory_order_relaxed)) {
    }
}

void AllocStats::on_free(int64_t bytes) {
    current_bytes.fetch_sub(bytes, std::memory_order_relaxed);
}

void AllocStats::reset_peak() { peak_bytes.store(current_bytes.load()); }

}  // namespace pvf
