#include "roleclarity/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <string>

namespace roleclarity {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

void check_finite(const std::vector<double>& data, const char* what) {
    for (double v : data) {
        if (!std::isfinite(v)) {
            throw NonFiniteError(std::string(what) + ": non-finite value");
        }
    }
}

std::atomic<std::int64_t> g_next_tape_id{1};

}  // namespace

// ---------------------------------------------------------------- Tensor

Tensor::Tensor() : Tensor({}, {0.0}, false) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data, bool requires_grad)
    : shape_(std::move(shape)), requires_grad_(requires_grad) {
    if (data.size() != shape_product(shape_)) {
        throw ValidationError("tensor: data length " + std::to_string(data.size()) +
                              " does not match shape product " +
                              std::to_string(shape_product(shape_)));
    }
    check_finite(data, "tensor");
    data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return Tensor({}, {v}, requires_grad);
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
    std::size_t n = shape_product(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double v, bool requires_grad) {
    std::size_t n = shape_product(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
}

Tensor Tensor::row_vector(std::vector<double> v, bool requires_grad) {
    std::size_t n = v.size();
    return Tensor({n}, std::move(v), requires_grad);
}

std::size_t Tensor::rows() const {
    if (rank() != 2) throw ValidationError("tensor: rows() requires rank 2");
    return shape_[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) throw ValidationError("tensor: cols() requires rank 2");
    return shape_[1];
}

double Tensor::at(std::size_t i, std::size_t j) const {
    return (*data_)[i * cols() + j];
}

double Tensor::at(std::size_t i) const {
    return (*data_)[i];
}

double Tensor::value() const {
    if (size() != 1) throw ValidationError("tensor: value() requires a single element");
    return (*data_)[0];
}

// ------------------------------------------------------------ GradientMap

bool GradientMap::contains(const Tensor& leaf) const {
    return leaf.tape_id_ == tape_id_ && grads_.count(leaf.node_) > 0;
}

const Tensor& GradientMap::grad(const Tensor& leaf) const {
    if (leaf.tape_id_ != tape_id_) {
        throw ValidationError("gradient map: tensor belongs to a different tape");
    }
    auto it = grads_.find(leaf.node_);
    if (it == grads_.end()) {
        throw ValidationError("gradient map: no gradient recorded for this leaf");
    }
    return it->second;
}

// ------------------------------------------------------------------ Tape

Tape::Tape() : id_(g_next_tape_id.fetch_add(1)) {}

const Tape::Node& Tape::node_of(const Tensor& t, const char* what) const {
    if (t.tape_id_ != id_ || t.node_ < 0 ||
        static_cast<std::size_t>(t.node_) >= nodes_.size()) {
        throw ValidationError(std::string(what) + ": operand is detached from this tape");
    }
    return nodes_[static_cast<std::size_t>(t.node_)];
}

Tensor Tape::record(Op op, std::int32_t a, std::int32_t b, double scalar,
                    std::vector<std::uint32_t> aux, Tensor value) {
    Node node;
    node.op = op;
    node.a = a;
    node.b = b;
    node.scalar = scalar;
    node.aux = std::move(aux);
    bool rg = false;
    if (op == Op::kLeaf) {
        rg = value.requires_grad();
    } else {
        if (a >= 0) rg = rg || nodes_[static_cast<std::size_t>(a)].requires_grad;
        if (b >= 0) rg = rg || nodes_[static_cast<std::size_t>(b)].requires_grad;
    }
    node.requires_grad = rg;

    value.tape_id_ = id_;
    value.node_ = static_cast<std::int32_t>(nodes_.size());
    value.requires_grad_ = rg;
    node.value = value;
    nodes_.push_back(std::move(node));
    return value;
}

Tensor Tape::leaf(const Tensor& t) {
    Tensor copy = t;
    copy.tape_id_ = -1;
    copy.node_ = -1;
    return record(Op::kLeaf, -1, -1, 0.0, {}, copy);
}

Tensor Tape::constant(const Tensor& t) {
    Tensor copy = t;
    copy.tape_id_ = -1;
    copy.node_ = -1;
    copy.requires_grad_ = false;
    return record(Op::kLeaf, -1, -1, 0.0, {}, copy);
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
    const Node& na = node_of(a, "matmul");
    const Node& nb = node_of(b, "matmul");
    if (a.rank() != 2 || b.rank() != 2) {
        throw ValidationError("matmul: both operands must be rank 2");
    }
    std::size_t m = a.shape()[0], k = a.shape()[1];
    std::size_t k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2) {
        throw ValidationError("matmul: inner dimensions differ (" + std::to_string(k) +
                              " vs " + std::to_string(k2) + ")");
    }
    std::vector<double> out(m * n, 0.0);
    const auto& da = a.data();
    const auto& db = b.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t l = 0; l < k; ++l) {
            double av = da[i * k + l];
            if (av == 0.0) continue;
            const double* brow = db.data() + l * n;
            double* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return record(Op::kMatmul, na.value.node_, nb.value.node_, 0.0, {},
                  Tensor({m, n}, std::move(out)));
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
    const Node& na = node_of(a, "add");
    const Node& nb = node_of(b, "add");
    if (a.shape() != b.shape()) throw ValidationError("add: shape mismatch");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return record(Op::kAdd, na.value.node_, nb.value.node_, 0.0, {},
                  Tensor(a.shape(), std::move(out)));
}

Tensor Tape::subtract(const Tensor& a, const Tensor& b) {
    const Node& na = node_of(a, "subtract");
    const Node& nb = node_of(b, "subtract");
    if (a.shape() != b.shape()) throw ValidationError("subtract: shape mismatch");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return record(Op::kSubtract, na.value.node_, nb.value.node_, 0.0, {},
                  Tensor(a.shape(), std::move(out)));
}

Tensor Tape::scalar_multiply(const Tensor& a, double c) {
    const Node& na = node_of(a, "scalar_multiply");
    if (!std::isfinite(c)) throw ValidationError("scalar_multiply: non-finite factor");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    return record(Op::kScalarMultiply, na.value.node_, -1, c, {},
                  Tensor(a.shape(), std::move(out)));
}

Tensor Tape::exp(const Tensor& a) {
    const Node& na = node_of(a, "exp");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
    return record(Op::kExp, na.value.node_, -1, 0.0, {}, Tensor(a.shape(), std::move(out)));
}

Tensor Tape::log(const Tensor& a) {
    const Node& na = node_of(a, "log");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (a.data()[i] <= 0.0) throw ValidationError("log: non-positive input");
        out[i] = std::log(a.data()[i]);
    }
    return record(Op::kLog, na.value.node_, -1, 0.0, {}, Tensor(a.shape(), std::move(out)));
}

Tensor Tape::row_mean(const Tensor& a) {
    const Node& na = node_of(a, "row_mean");
    if (a.rank() != 2) throw ValidationError("row_mean: operand must be rank 2");
    std::size_t m = a.shape()[0], n = a.shape()[1];
    if (m == 0) throw ValidationError("row_mean: zero rows");
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out[j] += a.data()[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[j] /= static_cast<double>(m);
    return record(Op::kRowMean, na.value.node_, -1, 0.0, {}, Tensor({n}, std::move(out)));
}

Tensor Tape::row_max_subtract(const Tensor& a) {
    const Node& na = node_of(a, "row_max_subtract");
    if (a.rank() != 2) throw ValidationError("row_max_subtract: operand must be rank 2");
    std::size_t m = a.shape()[0], n = a.shape()[1];
    if (n == 0) throw ValidationError("row_max_subtract: zero columns");
    std::vector<double> out(m * n);
    std::vector<std::uint32_t> argmax(m, 0);
    for (std::size_t i = 0; i < m; ++i) {
        std::size_t best = 0;
        double mx = a.data()[i * n];
        for (std::size_t j = 1; j < n; ++j) {
            if (a.data()[i * n + j] > mx) {
                mx = a.data()[i * n + j];
                best = j;
            }
        }
        argmax[i] = static_cast<std::uint32_t>(best);
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.data()[i * n + j] - mx;
    }
    return record(Op::kRowMaxSubtract, na.value.node_, -1, 0.0, std::move(argmax),
                  Tensor({m, n}, std::move(out)));
}

Tensor Tape::square(const Tensor& a) {
    const Node& na = node_of(a, "square");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * a.data()[i];
    return record(Op::kSquare, na.value.node_, -1, 0.0, {}, Tensor(a.shape(), std::move(out)));
}

Tensor Tape::sum(const Tensor& a) {
    const Node& na = node_of(a, "sum");
    double s = 0.0;
    for (double v : a.data()) s += v;
    return record(Op::kSum, na.value.node_, -1, 0.0, {}, Tensor::scalar(s));
}

Tensor Tape::l2_norm(const Tensor& a) {
    const Node& na = node_of(a, "l2_norm");
    double s = 0.0;
    for (double v : a.data()) s += v * v;
    double norm = std::sqrt(s);
    if (norm == 0.0) throw ValidationError("l2_norm: zero tensor");
    return record(Op::kL2Norm, na.value.node_, -1, 0.0, {}, Tensor::scalar(norm));
}

Tensor Tape::cosine_similarity(const Tensor& a, const Tensor& b) {
    const Node& na = node_of(a, "cosine_similarity");
    const Node& nb = node_of(b, "cosine_similarity");
    if (a.size() != b.size()) throw ValidationError("cosine_similarity: size mismatch");
    double dot = 0.0, sa = 0.0, sb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a.data()[i] * b.data()[i];
        sa += a.data()[i] * a.data()[i];
        sb += b.data()[i] * b.data()[i];
    }
    if (sa == 0.0 || sb == 0.0) throw ValidationError("cosine_similarity: zero-norm vector");
    double cosv = dot / (std::sqrt(sa) * std::sqrt(sb));
    return record(Op::kCosineSimilarity, na.value.node_, nb.value.node_, 0.0, {},
                  Tensor::scalar(cosv));
}

Tensor Tape::row_softmax(const Tensor& a, double tau) {
    const Node& na = node_of(a, "row_softmax");
    if (a.rank() != 2) throw ValidationError("row_softmax: operand must be rank 2");
    if (!(tau > 0.0)) throw ValidationError("row_softmax: temperature must be positive");
    std::size_t m = a.shape()[0], n = a.shape()[1];
    if (n == 0) throw ValidationError("row_softmax: zero columns");
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        double mx = a.data()[i * n];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a.data()[i * n + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            double e = std::exp((a.data()[i * n + j] - mx) / tau);
            out[i * n + j] = e;
            z += e;
        }
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
    }
    return record(Op::kRowSoftmax, na.value.node_, -1, tau, {}, Tensor({m, n}, std::move(out)));
}

// -------------------------------------------------------------- backward

GradientMap Tape::backward(const Tensor& loss) const {
    const Node& loss_node = node_of(loss, "backward");
    if (loss.size() != 1) throw ValidationError("backward: loss must be scalar");

    std::vector<std::vector<double>> adj(nodes_.size());
    auto accum = [&](std::int32_t target, std::size_t idx, double v) {
        auto& slot = adj[static_cast<std::size_t>(target)];
        if (slot.empty()) slot.assign(nodes_[static_cast<std::size_t>(target)].value.size(), 0.0);
        slot[idx] += v;
    };
    auto ensure = [&](std::int32_t target) {
        auto& slot = adj[static_cast<std::size_t>(target)];
        if (slot.empty()) slot.assign(nodes_[static_cast<std::size_t>(target)].value.size(), 0.0);
        return slot.data();
    };
    auto wants = [&](std::int32_t target) {
        return target >= 0 && nodes_[static_cast<std::size_t>(target)].requires_grad;
    };

    adj[static_cast<std::size_t>(loss.node_)] = {1.0};

    for (std::int32_t idx = loss.node_; idx >= 0; --idx) {
        const Node& node = nodes_[static_cast<std::size_t>(idx)];
        const auto& g = adj[static_cast<std::size_t>(idx)];
        if (g.empty() || !node.requires_grad) continue;

        const Tensor& v = node.value;
        switch (node.op) {
            case Op::kLeaf:
                break;
            case Op::kMatmul: {
                const Tensor& A = nodes_[static_cast<std::size_t>(node.a)].value;
                const Tensor& B = nodes_[static_cast<std::size_t>(node.b)].value;
                std::size_t m = A.shape()[0], k = A.shape()[1], n = B.shape()[1];
                if (wants(node.a)) {
                    // dA = dC * B^T
                    double* da = ensure(node.a);
                    for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t l = 0; l < k; ++l) {
                            double s = 0.0;
                            const double* grow = g.data() + i * n;
                            const double* brow = B.data().data() + l * n;
                            for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                            da[i * k + l] += s;
                        }
                    }
                }
                if (wants(node.b)) {
                    // dB = A^T * dC
                    double* db = ensure(node.b);
                    for (std::size_t i = 0; i < m; ++i) {
                        const double* arow = A.data().data() + i * k;
                        const double* grow = g.data() + i * n;
                        for (std::size_t l = 0; l < k; ++l) {
                            double av = arow[l];
                            if (av == 0.0) continue;
                            double* dbrow = db + l * n;
                            for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
                        }
                    }
                }
                break;
            }
            case Op::kAdd: {
                if (wants(node.a)) {
                    double* da = ensure(node.a);
                    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
                }
                if (wants(node.b)) {
                    double* db = ensure(node.b);
                    for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
                }
                break;
            }
            case Op::kSubtract: {
                if (wants(node.a)) {
                    double* da = ensure(node.a);
                    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
                }
                if (wants(node.b)) {
                    double* db = ensure(node.b);
                    for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
                }
                break;
            }
            case Op::kScalarMultiply: {
                if (wants(node.a)) {
                    double* da = ensure(node.a);
                    for (std::size_t i = 0; i < g.size(); ++i) da[i] += node.scalar * g[i];
                }
                break;
            }
            case Op::kExp: {
                if (wants(node.a)) {
                    double* da = ensure(node.a);
                    for (std::size_t i = 0; i < g.size(); ++i) da[i] += v.data()[i] * g[i];
                }
                break;
            }
            case Op::kLog: {
                if (wants(node.a)) {
                    const Tensor& A = nodes_[static_cast<std::size_t>(node.a)].value;
                    double* da = ensure(node.a);
                    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] / A.data()[i];
                }
                break;
            }
            case Op::kRowMean: {
                if (wants(node.a)) {
                    const Tensor& A = nodes_[static_cast<std::size_t>(node.a)].value;
                    std::size_t m = A.shape()[0], n = A.shape()[1];
                    double* da = ensure(node.a);
                    for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t j = 0; j < n; ++j) {
                            da[i * n + j] += g[j] / static_cast<double>(m);
                        }
                    }
                }
                break;
            }
            case Op::kRowMaxSubtract: {
                if (wants(node.a)) {
                    std::size_t m = v.shape()[0], n = v.shape()[1];
                    double* da = ensure(node.a);
                    for (std::size_t i = 0; i < m; ++i) {
                        double row_total = 0.0;
                        for (std::size_t j = 0; j < n; ++j) {
                            da[i * n + j] += g[i * n + j];
                            row_total += g[i * n + j];
                        }
                        da[i * n + node.aux[i]] -= row_total;
                    }
                }
                break;
            }
            case Op::kSquare: {
                if (wants(node.a)) {
                    const Tensor& A = nodes_[static_cast<std::size_t>(node.a)].value;
                    double* da = ensure(node.a);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        da[i] += 2.0 * A.data()[i] * g[i];
                    }
                }
                break;
            }
            case Op::kSum: {
                if (wants(node.a)) {
                    double* da = ensure(node.a);
                    std::size_t n = nodes_[static_cast<std::size_t>(node.a)].value.size();
                    for (std::size_t i = 0; i < n; ++i) da[i] += g[0];
                }
                break;
            }
            case Op::kL2Norm: {
                if (wants(node.a)) {
                    const Tensor& A = nodes_[static_cast<std::size_t>(node.a)].value;
                    double norm = v.data()[0];
                    double* da = ensure(node.a);
                    for (std::size_t i = 0; i < A.size(); ++i) {
                        da[i] += g[0] * A.data()[i] / norm;
                    }
                }
                break;
            }
            case Op::kCosineSimilarity: {
                const Tensor& A = nodes_[static_cast<std::size_t>(node.a)].value;
                const Tensor& B = nodes_[static_cast<std::size_t>(node.b)].value;
                double sa = 0.0, sb = 0.0;
                for (std::size_t i = 0; i < A.size(); ++i) {
                    sa += A.data()[i] * A.data()[i];
                    sb += B.data()[i] * B.data()[i];
                }
                double na = std::sqrt(sa), nb = std::sqrt(sb);
                double cosv = v.data()[0];
                if (wants(node.a)) {
                    double* da = ensure(node.a);
                    for (std::size_t i = 0; i < A.size(); ++i) {
                        da[i] += g[0] * (B.data()[i] / (na * nb) - cosv * A.data()[i] / sa);
                    }
                }
                if (wants(node.b)) {
                    double* db = ensure(node.b);
                    for (std::size_t i = 0; i < B.size(); ++i) {
                        db[i] += g[0] * (A.data()[i] / (na * nb) - cosv * B.data()[i] / sb);
                    }
                }
                break;
            }
            case Op::kRowSoftmax: {
                if (wants(node.a)) {
                    std::size_t m = v.shape()[0], n = v.shape()[1];
                    double tau = node.scalar;
                    double* da = ensure(node.a);
                    for (std::size_t i = 0; i < m; ++i) {
                        double inner = 0.0;
                        for (std::size_t k = 0; k < n; ++k) {
                            inner += g[i * n + k] * v.data()[i * n + k];
                        }
                        for (std::size_t j = 0; j < n; ++j) {
                            da[i * n + j] +=
                                v.data()[i * n + j] * (g[i * n + j] - inner) / tau;
                        }
                    }
                }
                break;
            }
        }
    }

    GradientMap result;
    result.tape_id_ = id_;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        const Node& node = nodes_[i];
        if (node.op != Op::kLeaf || !node.requires_grad) continue;
        const auto& g = adj[i];
        if (g.empty()) continue;
        result.grads_.emplace(static_cast<std::int32_t>(i), Tensor(node.value.shape(), g));
    }
    (void)loss_node;
    return result;
}

// ------------------------------------------------------ finite differences

double finite_diff_check(const TapeFn& f, const Tensor& x, double h) {
    if (!(h > 0.0)) throw ValidationError("finite_diff_check: step must be positive");

    Tape tape;
    Tensor x_grad(x.shape(), x.data(), true);
    Tensor xl = tape.leaf(x_grad);
    Tensor loss = f(tape, xl);
    if (loss.size() != 1) throw ValidationError("finite_diff_check: f must produce a scalar");
    GradientMap grads = tape.backward(loss);
    std::vector<double> analytic(x.size(), 0.0);
    if (grads.contains(xl)) analytic = grads.grad(xl).data();

    auto eval_at = [&](const std::vector<double>& data) {
        Tape t;
        Tensor probe(x.shape(), data, false);
        Tensor out = f(t, t.leaf(probe));
        return out.value();
    };

    double worst = 0.0;
    std::vector<double> probe = x.data();
    for (std::size_t i = 0; i < probe.size(); ++i) {
        double orig = probe[i];
        probe[i] = orig + h;
        double up = eval_at(probe);
        probe[i] = orig - h;
        double down = eval_at(probe);
        probe[i] = orig;
        double numeric = (up - down) / (2.0 * h);
        if (!std::isfinite(numeric)) {
            throw ValidationError("finite_diff_check: non-finite numeric derivative");
        }
        double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace roleclarity
