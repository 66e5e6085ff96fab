#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace acvtt {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major (last axis fastest) array of doubles that can take part in
/// reverse-mode differentiation.
///
/// Tensor is a cheap handle: copies share the same storage. Values are treated
/// as immutable once an op has consumed them; the only sanctioned mutations are
/// gradient accumulation during Graph::backward and optimizer updates of leaf
/// parameters between graphs.
class Tensor {
  public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor filled(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const noexcept { return static_cast<bool>(data_); }

    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> values() const;
    double operator[](std::size_t flat) const { return values()[flat]; }
    double at(std::initializer_list<std::size_t> index) const;
    /// Value of a one-element tensor.
    double item() const;

    bool requires_grad() const;
    bool has_grad() const;
    /// Gradient buffer; empty span when no gradient has been accumulated.
    std::span<const double> grad() const;
    void zero_grad();

    /// In-place access for leaf updates (optimizers, finite differences).
    std::span<double> mutable_values();
    /// Gradient buffer, allocated (zero-filled) on first use.
    std::span<double> grad_buffer() const;

    /// Fresh leaf with a copy of the values and no gradient history.
    Tensor detach(bool requires_grad = false) const;
    Tensor clone() const { return detach(requires_grad()); }

    bool same_storage(const Tensor& other) const noexcept { return data_ == other.data_; }

  private:
    struct Storage {
        Shape shape;
        std::vector<double> values;
        std::vector<double> grad;
        bool requires_grad = false;
    };

    std::shared_ptr<Storage> data_;
};

/// Ordered record of executed primitives. Each recorded entry carries the
/// closure that propagates the output gradient into its inputs; backward()
/// replays the record in reverse execution order.
///
/// A Graph constructed with recording disabled evaluates ops without keeping
/// any history, which is what inference and finite-difference probes use.
class Graph {
  public:
    explicit Graph(bool recording = true) : recording_(recording) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;
    Graph(Graph&&) = default;
    Graph& operator=(Graph&&) = default;

    bool recording() const noexcept { return recording_; }
    std::size_t size() const noexcept { return entries_.size(); }
    std::vector<std::string_view> op_names() const;

    void record(std::string_view op, std::function<void()> backward);

    /// Seeds d(output)/d(output) = 1 and replays the tape. The output must be a
    /// one-element tensor produced while recording.
    void backward(const Tensor& output);

    void clear() { entries_.clear(); }

  private:
    struct Entry {
        std::string_view op;
        std::function<void()> backward;
    };

    bool recording_;
    std::vector<Entry> entries_;
};

}  // namespace acvtt
