#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace cdd {

std::size_t numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Dense row-major double tensor with an optional gradient accumulator.
// Copying a Tensor copies the handle; the storage (data and grad) is shared.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<double> values,
                            bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const;
    int ndim() const;
    int dim(int i) const;
    std::size_t size() const;

    std::span<double> data();
    std::span<const double> data() const;
    double value() const;  // scalar tensors only

    bool requires_grad() const;
    void set_requires_grad(bool rg);

    // Gradient accumulator; allocated zero-filled on first access.
    std::span<double> grad();
    std::span<const double> grad() const;
    bool grad_allocated() const;
    void zero_grad();

    Tensor clone() const;  // deep copy of data; fresh zero grad state
    void copy_data_from(const Tensor& other);

    bool same_storage(const Tensor& o) const { return impl_ == o.impl_; }
    const void* id() const { return impl_.get(); }

private:
    struct Impl {
        std::vector<int> shape;
        std::vector<double> data;
        std::vector<double> grad;  // empty until first touched
        bool requires_grad = false;
    };
    std::shared_ptr<Impl> impl_;
};

// Reverse-mode tape. Operations append their backward rule in execution
// order; backward() replays them in reverse. A tape constructed with
// recording=false makes every op a pure forward computation.
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }
    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }
    void push(Tensor output, std::function<void()> backward_fn);

    // Seeds d(loss)/d(loss) = seed and propagates. Gradients on recorded
    // op outputs are reset at the start of every pass; leaf gradients
    // (parameters) accumulate across passes.
    void backward(const Tensor& loss, double seed = 1.0);

private:
    struct Node {
        Tensor output;
        std::function<void()> backward_fn;
    };
    bool recording_;
    std::vector<Node> nodes_;
};

}  // namespace cdd
