#pragma once

// Reverse-mode autodiff over dense 64-bit tensors.
//
// A Tape records one forward pass; backward() replays the recorded nodes in
// reverse creation order (creation order is topological by construction) and
// then frees the graph. Gradients accumulate additively into .grad until the
// caller zeroes them, and the accumulation order is fixed by node index so a
// fixed seed gives bit-identical training runs.

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace protocase::ad {

struct TensorValue {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated lazily; same length as data once used
    bool requires_grad = false;

    std::size_t numel() const { return data.size(); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
    void zero_grad() { grad.assign(data.size(), 0.0); }
};

using Tensor = std::shared_ptr<TensorValue>;

inline std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

inline Tensor make_tensor(std::vector<int> shape, bool requires_grad = false) {
    auto t = std::make_shared<TensorValue>();
    t->shape = std::move(shape);
    t->data.assign(shape_numel(t->shape), 0.0);
    t->requires_grad = requires_grad;
    return t;
}

inline Tensor make_tensor(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false) {
    auto t = std::make_shared<TensorValue>();
    t->shape = std::move(shape);
    if (shape_numel(t->shape) != data.size())
        throw std::invalid_argument("tensor data length does not match shape");
    t->data = std::move(data);
    t->requires_grad = requires_grad;
    return t;
}

inline Tensor make_tensor(std::vector<int> shape, std::initializer_list<double> data,
                          bool requires_grad = false) {
    return make_tensor(std::move(shape), std::vector<double>(data), requires_grad);
}

inline Tensor make_scalar(double v, bool requires_grad = false) {
    return make_tensor({1}, std::vector<double>{v}, requires_grad);
}

inline double scalar_value(const Tensor& t) {
    if (t->numel() != 1) throw std::invalid_argument("expected a scalar tensor");
    return t->data[0];
}

inline bool same_shape(const Tensor& a, const Tensor& b) { return a->shape == b->shape; }

inline std::string shape_str(const std::vector<int>& s) {
    std::string r = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }
    void set_recording(bool r) { recording_ = r; }
    std::size_t size() const { return nodes_.size(); }

    void record(std::function<void()> back) {
        if (recording_) nodes_.push_back(std::move(back));
    }

    // Seeds d(loss)/d(loss)=1 and propagates through the recorded graph.
    // The tape is cleared afterwards; first-order gradients only.
    void backward(const Tensor& loss) {
        if (loss->numel() != 1)
            throw std::invalid_argument("backward requires a scalar loss tensor");
        loss->ensure_grad();
        loss->grad[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
        nodes_.clear();
    }

    void clear() { nodes_.clear(); }

private:
    std::vector<std::function<void()>> nodes_;
    bool recording_ = true;
};

// A node's output may sit on a branch that never reaches the loss; its grad
// buffer is then empty and the node has nothing to propagate.
inline bool has_grad(const Tensor& t) { return !t->grad.empty(); }

}  // namespace protocase::ad
