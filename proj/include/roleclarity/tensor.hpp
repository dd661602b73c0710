#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "roleclarity/common.hpp"

namespace roleclarity {

/// Dense row-major 64-bit tensor. Immutable value type: copies share
/// storage, mutation means building a new tensor. Construction rejects
/// NaN/Inf so every value flowing through the tape is finite.
class Tensor {
public:
    Tensor();  // scalar 0.0
    Tensor(std::vector<std::size_t> shape, std::vector<double> data, bool requires_grad = false);

    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<std::size_t> shape, double v, bool requires_grad = false);
    static Tensor row_vector(std::vector<double> v, bool requires_grad = false);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_->size(); }
    bool requires_grad() const { return requires_grad_; }
    const std::vector<double>& data() const { return *data_; }

    // rank-2 accessors
    std::size_t rows() const;
    std::size_t cols() const;
    double at(std::size_t i, std::size_t j) const;
    double at(std::size_t i) const;
    double value() const;  // single-element extraction

    bool on_tape() const { return node_ >= 0; }

private:
    std::vector<std::size_t> shape_;
    std::shared_ptr<const std::vector<double>> data_;
    bool requires_grad_ = false;

    std::int64_t tape_id_ = -1;
    std::int32_t node_ = -1;

    friend class Tape;
    friend class GradientMap;
};

/// Gradients produced by one backward pass, keyed by tape node. Only
/// requires_grad leaves reachable from the loss have entries.
class GradientMap {
public:
    bool contains(const Tensor& leaf) const;
    const Tensor& grad(const Tensor& leaf) const;
    std::size_t size() const { return grads_.size(); }

private:
    std::int64_t tape_id_ = -1;
    std::unordered_map<std::int32_t, Tensor> grads_;
    friend class Tape;
};

/// Reverse-mode tape. Records primitive applications in topological
/// order (parents always precede children); backward() walks the record
/// once and accumulates adjoints. Single-writer: one tape per thread.
///
/// The primitive set is fixed; higher layers compose these (for example
/// masked sums via the polarization identity) rather than extending it.
class Tape {
public:
    Tape();

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Register an off-tape tensor as a leaf of this tape.
    Tensor leaf(const Tensor& t);
    /// Leaf with requires_grad forced off (constants).
    Tensor constant(const Tensor& t);

    // ---- the thirteen primitives ----
    Tensor matmul(const Tensor& a, const Tensor& b);
    Tensor add(const Tensor& a, const Tensor& b);
    Tensor subtract(const Tensor& a, const Tensor& b);
    Tensor scalar_multiply(const Tensor& a, double c);
    Tensor exp(const Tensor& a);
    Tensor log(const Tensor& a);
    Tensor row_mean(const Tensor& a);          // mean over rows: (m x n) -> (n)
    Tensor row_max_subtract(const Tensor& a);  // x[i,j] - max_j x[i,j]
    Tensor square(const Tensor& a);
    Tensor sum(const Tensor& a);     // all elements -> scalar
    Tensor l2_norm(const Tensor& a); // Frobenius/L2 over all elements -> scalar
    Tensor cosine_similarity(const Tensor& a, const Tensor& b);  // flattened -> scalar
    Tensor row_softmax(const Tensor& a, double tau);  // tempered, max-stabilized

    /// Reverse pass from a scalar loss. Deterministic: identical tapes
    /// produce bit-identical gradients.
    GradientMap backward(const Tensor& loss) const;

    std::size_t node_count() const { return nodes_.size(); }

private:
    enum class Op : std::uint8_t {
        kLeaf,
        kMatmul,
        kAdd,
        kSubtract,
        kScalarMultiply,
        kExp,
        kLog,
        kRowMean,
        kRowMaxSubtract,
        kSquare,
        kSum,
        kL2Norm,
        kCosineSimilarity,
        kRowSoftmax,
    };

    struct Node {
        Op op;
        std::int32_t a = -1;
        std::int32_t b = -1;
        double scalar = 0.0;               // scalar_multiply factor / softmax tau
        std::vector<std::uint32_t> aux;    // row_max_subtract argmax per row
        Tensor value;
        bool requires_grad = false;
    };

    const Node& node_of(const Tensor& t, const char* what) const;
    Tensor record(Op op, std::int32_t a, std::int32_t b, double scalar,
                  std::vector<std::uint32_t> aux, Tensor value);

    std::vector<Node> nodes_;
    std::int64_t id_;
};

/// Builds a scalar loss on a fresh tape from a leaf bound to x.
using TapeFn = std::function<Tensor(Tape&, const Tensor&)>;

/// Central-difference gradient check: max over coordinates of
/// |analytic - numeric| / max(1, |numeric|).
double finite_diff_check(const TapeFn& f, const Tensor& x, double h = 1e-5);

}  // namespace roleclarity
