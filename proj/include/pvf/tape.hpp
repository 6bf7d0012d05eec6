#pragma once

#include <functional>

#include "pvf/tensor.hpp"

namespace pvf {

// Reverse-mode tape. Ops append nodes in execution order; backward() replays
// them once, in reverse. Each node's closure owns the saved context (input and
// output handles, plus whatever the op needs) and accumulates with += into the
// grad buffers of its inputs.
template <class T>
class Tape {
  public:
    struct Node {
        const char* op;
        std::function<void()> fn;
    };

    void record(const char* op, std::function<void()> fn) {
        nodes_.push_back(Node{op, std::move(fn)});
    }

    void backward(const TensorPtr<T>& loss) {
        if (loss->numel() != 1)
            throw DimensionError("backward: loss must be scalar, got " + shape_str(loss->shape));
        loss->ensure_grad();
        loss->grad[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();
    }

    void clear() { nodes_.clear(); }
    size_t size() const { return nodes_.size(); }

  private:
    std::vector<Node> nodes_;
};

// requires_grad propagation used by every op: record a backward node only if
// some input needs gradients.
template <class T>
inline bool any_requires_grad(std::initializer_list<const TensorPtr<T>*> ts) {
    for (const auto* t : ts)
        if (*t && (*t)->requires_grad) return true;
    return false;
}

}  // namespace pvf
