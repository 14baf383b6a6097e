#pragma once

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>

#include <Eigen/Core>
#ifdef _OPENMP
#include <omp.h>
#endif

namespace egvit {

// Worker cap: GAZEVIT_THREADS env var, default = logical cores.
inline int thread_count() {
    static const int n = [] {
        int cores = static_cast<int>(std::thread::hardware_concurrency());
        if (cores <= 0) cores = 1;
        if (const char* env = std::getenv("GAZEVIT_THREADS")) {
            try {
                const int req = std::stoi(env);
                if (req >= 1) return std::min(req, cores);
            } catch (...) {
            }
        }
        return cores;
    }();
    return n;
}

inline void configure_threads() {
    const int n = thread_count();
    Eigen::setNbThreads(n);
#ifdef _OPENMP
    omp_set_num_threads(n);
#endif
}

}  // namespace egvit
