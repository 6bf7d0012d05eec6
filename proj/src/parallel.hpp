#pragma once

#include <cstdint>

#include "pvf/common.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace pvf {

// Parallel loop over [0,n). Safe only for bodies with disjoint writes per
// index; such loops are worker-count independent by construction.
template <class F>
inline void par_for(int64_t n, int64_t min_parallel, F&& body) {
#ifdef _OPENMP
    int nt = threads();
    if (nt > 1 && n >= min_parallel) {
#pragma omp parallel for schedule(static) num_threads(nt)
        for (int64_t i = 0; i < n; ++i) body(i);
        return;
    }
#else
    (void)min_parallel;
#endif
    for (int64_t i = 0; i < n; ++i) body(i);
}

}  // namespace pvf
