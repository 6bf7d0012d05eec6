#include <algorithm>
#include <cmath>
#include <limits>

#include "parallel.hpp"
#include "pvf/geometry.hpp"
#include "pvf/ops.hpp"

namespace pvf {

namespace {

inline double sqdist(const double* a, const double* b) {
    const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
}

template <class T>
std::vector<double> to_xyz(const TensorPtr<T>& coords) {
    std::vector<double> out(static_cast<size_t>(coords->numel()));
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(coords->values[i]);
    return out;
}

}  // namespace

template <class T>
KnnGraph knn_graph(const TensorPtr<T>& coords, int64_t k) {
    if (!coords || coords->rank() != 2 || coords->dim(1) != 3)
        throw DimensionError("knn_graph: coords must be [N,3]");
    const int64_t N = coords->dim(0);
    if (k < 1 || k >= N)
        throw DimensionError("knn_graph: need 1 <= k < N, got k=" + std::to_string(k) +
                             ", N=" + std::to_string(N));

    const std::vector<double> xyz = to_xyz(coords);
    KnnGraph g;
    g.n = N;
    g.k = k;
    g.indices.resize(static_cast<size_t>(N * k));

    par_for(N, 8, [&](int64_t i) {
        // bounded insertion keeps (distance, index) sorted ascending; ties
        // resolve to the lower index
        std::vector<std::pair<double, int64_t>> best;
        best.reserve(static_cast<size_t>(k) + 1);
        const double* pi = xyz.data() + i * 3;
        for (int64_t j = 0; j < N; ++j) {
            if (j == i) continue;
            const double d = sqdist(pi, xyz.data() + j * 3);
            if (static_cast<int64_t>(best.size()) == k && d >= best.back().first &&
                !(d == best.back().first && j < best.back().second))
                continue;
            auto pos = std::lower_bound(best.begin(), best.end(), std::make_pair(d, j));
            best.insert(pos, {d, j});
            if (static_cast<int64_t>(best.size()) > k) best.pop_back();
        }
        for (int64_t j = 0; j < k; ++j)
            g.indices[static_cast<size_t>(i * k + j)] = best[static_cast<size_t>(j)].second;
    });
    return g;
}

template <class T>
std::vector<int64_t> farthest_point_sampling(const TensorPtr<T>& coords, int64_t m,
                                             int64_t seed_index) {
    if (!coords || coords->rank() != 2 || coords->dim(1) != 3)
        throw DimensionError("farthest_point_sampling: coords must be [N,3]");
    const int64_t N = coords->dim(0);
    if (m < 1 || m > N) throw DimensionError("farthest_point_sampling: need 1 <= m <= N");
    if (seed_index < 0 || seed_index >= N)
        throw DimensionError("farthest_point_sampling: seed out of range");

    const std::vector<double> xyz = to_xyz(coords);
    std::vector<int64_t> selected;
    selected.reserve(static_cast<size_t>(m));
    selected.push_back(seed_index);
    std::vector<double> mind(static_cast<size_t>(N));
    for (int64_t j = 0; j < N; ++j)
        mind[static_cast<size_t>(j)] = sqdist(xyz.data() + j * 3, xyz.data() + seed_index * 3);

    for (int64_t s = 1; s < m; ++s) {
        int64_t arg = 0;
        double best = -1.0;
        for (int64_t j = 0; j < N; ++j) {
            if (mind[static_cast<size_t>(j)] > best) {
                best = mind[static_cast<size_t>(j)];
                arg = j;
            }
        }
        selected.push_back(arg);
        const double* pa = xyz.data() + arg * 3;
        for (int64_t j = 0; j < N; ++j) {
            const double d = sqdist(xyz.data() + j * 3, pa);
            if (d < mind[static_cast<size_t>(j)]) mind[static_cast<size_t>(j)] = d;
        }
    }
    return selected;
}

template <class T>
TensorPtr<T> chamfer_distance(Tape<T>& tape, const TensorPtr<T>& coords_a,
                              const TensorPtr<T>& coords_b) {
    if (!coords_a || !coords_b || coords_a->rank() != 2 || coords_b->rank() != 2 ||
        coords_a->dim(1) != 3 || coords_b->dim(1) != 3)
        throw DimensionError("chamfer_distance: expected [Na,3] and [Nb,3]");
    const int64_t Na = coords_a->dim(0), Nb = coords_b->dim(0);
    if (Na < 1 || Nb < 1) throw DimensionError("chamfer_distance: empty cloud");

    const std::vector<double> xa = to_xyz(coords_a);
    const std::vector<double> xb = to_xyz(coords_b);
    auto nn_ab = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(Na));
    auto nn_ba = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(Nb));
    std::vector<double> da(static_cast<size_t>(Na)), db(static_cast<size_t>(Nb));

    par_for(Na, 64, [&](int64_t i) {
        double best = std::numeric_limits<double>::infinity();
        int64_t arg = 0;
        for (int64_t j = 0; j < Nb; ++j) {
            const double d = sqdist(xa.data() + i * 3, xb.data() + j * 3);
            if (d < best) {
                best = d;
                arg = j;
            }
        }
        da[static_cast<size_t>(i)] = best;
        (*nn_ab)[static_cast<size_t>(i)] = arg;
    });
    par_for(Nb, 64, [&](int64_t j) {
        double best = std::numeric_limits<double>::infinity();
        int64_t arg = 0;
        for (int64_t i = 0; i < Na; ++i) {
            const double d = sqdist(xb.data() + j * 3, xa.data() + i * 3);
            if (d < best) {
                best = d;
                arg = i;
            }
        }
        db[static_cast<size_t>(j)] = best;
        (*nn_ba)[static_cast<size_t>(j)] = arg;
    });

    double loss = 0;
    for (double d : da) loss += d;
    loss /= static_cast<double>(Na);
    double lb = 0;
    for (double d : db) lb += d;
    loss += lb / static_cast<double>(Nb);

    auto y = make_tensor<T>({1});
    y->values[0] = static_cast<T>(loss);

    if (any_requires_grad<T>({&coords_a, &coords_b})) {
        y->requires_grad = true;
        tape.record("chamfer_distance", [coords_a, coords_b, y, nn_ab, nn_ba, Na, Nb]() {
            const T g = y->grad_data()[0];
            const T* ap = coords_a->data();
            const T* bp = coords_b->data();
            const T wa = g * T(2) / static_cast<T>(Na);
            const T wb = g * T(2) / static_cast<T>(Nb);
            T* ga = coords_a->requires_grad ? coords_a->grad_data() : nullptr;
            T* gb = coords_b->requires_grad ? coords_b->grad_data() : nullptr;
            for (int64_t i = 0; i < Na; ++i) {
                const int64_t j = (*nn_ab)[static_cast<size_t>(i)];
                for (int a = 0; a < 3; ++a) {
                    const T diff = ap[i * 3 + a] - bp[j * 3 + a];
                    if (ga) ga[i * 3 + a] += wa * diff;
                    if (gb) gb[j * 3 + a] -= wa * diff;
                }
            }
            for (int64_t j = 0; j < Nb; ++j) {
                const int64_t i = (*nn_ba)[static_cast<size_t>(j)];
                for (int a = 0; a < 3; ++a) {
                    const T diff = bp[j * 3 + a] - ap[i * 3 + a];
                    if (gb) gb[j * 3 + a] += wb * diff;
                    if (ga) ga[i * 3 + a] -= wb * diff;
                }
            }
        });
    }
    return y;
}

template <class T>
TensorPtr<T> density_loss(Tape<T>& tape, const TensorPtr<T>& coords_a,
                          const TensorPtr<T>& coords_b, Dims3 dims) {
    if (!coords_a || !coords_b) throw DimensionError("density_loss: null coords");
    const int64_t Na = coords_a->dim(0), Nb = coords_b->dim(0);
    auto ones_a = ones<T>({Na, 1});
    auto ones_b = ones<T>({Nb, 1});
    auto ga = scale(tape, splat(tape, ones_a, coords_a, dims), 1.0 / static_cast<double>(Na));
    auto gb = scale(tape, splat(tape, ones_b, coords_b, dims), 1.0 / static_cast<double>(Nb));
    return mse(tape, ga, gb);
}

#define PVF_INSTANTIATE_NEIGHBORS(T)                                                        \
    template KnnGraph knn_graph<T>(const TensorPtr<T>&, int64_t);                           \
    template std::vector<int64_t> farthest_point_sampling<T>(const TensorPtr<T>&, int64_t,  \
                                                             int64_t);                      \
    template TensorPtr<T> chamfer_distance<T>(Tape<T>&, const TensorPtr<T>&,                \
                                              const TensorPtr<T>&);                         \
    template TensorPtr<T> density_loss<T>(Tape<T>&, const TensorPtr<T>&, const TensorPtr<T>&, \
                                          Dims3);

PVF_INSTANTIATE_NEIGHBORS(float)
PVF_INSTANTIATE_NEIGHBORS(double)

}  // namespace pvf
