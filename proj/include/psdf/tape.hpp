#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "psdf/common.hpp"

// Reverse-mode autodiff over small dense computation graphs.
//
// Nodes carry dense value buffers (a scalar is dim 1, an MLP activation is a
// dim-128 vector, a weight matrix is a flat row-major buffer). Two backward
// mechanisms share the same per-op rules:
//
//   backward(output)          numeric reverse sweep into adjoint buffers; this
//                             is the cheap path used once per loss evaluation.
//   record_gradient(out, wrt) emits the adjoint computation as new tape nodes,
//                             so the returned gradients are themselves
//                             differentiable. Losses that consume the spatial
//                             gradient of the SDF are built on top of such
//                             recorded gradients, which is what makes the
//                             second-order parameter derivatives come out of a
//                             single ordinary backward() at the end.
//
// Tapes are single-writer. Many tapes may run concurrently against one
// read-only parameter snapshot; accumulation into the shared ParamStore is
// buffered and reduced in a caller-supplied ordinal order so the result is
// independent of thread count.

namespace psdf {

enum class Op : uint8_t {
    Leaf, ExtLeaf, Const,
    Add, Sub, Mul, Div, Neg,
    Scale, AddConst,
    Fn,
    SMulV,
    Dot, Sum, Repeat,
    MatVec, MatTVec, Outer,
    ConcatN, Slice, PadSlice,
    Max, Min,
};

enum class ElemFn : uint8_t {
    Sin, Cos, Exp, Log, Sqrt, Recip, Square, Abs, Sign, Softplus, Sigmoid,
};

struct UnsupportedOp : std::runtime_error {
    explicit UnsupportedOp(const std::string& what) : std::runtime_error(what) {}
};

template <class Real>
class Tape {
public:
    using Id = uint32_t;
    static constexpr Id npos = 0xffffffffu;

    // ---- terminals ----------------------------------------------------------

    Id constant(Real v) { return terminal(Op::Const, {&v, 1}); }
    Id constant_vec(std::span<const Real> v) { return terminal(Op::Const, v); }
    Id leaf(Real v) { return terminal(Op::Leaf, {&v, 1}); }
    Id leaf_vec(std::span<const Real> v) { return terminal(Op::Leaf, v); }

    /// Zero-copy view of external storage (parameter segments). `rows` > 0
    /// marks the buffer as a row-major rows x (dim/rows) matrix.
    Id external(const Real* data, uint32_t dim, uint32_t rows = 0) {
        Node n{};
        n.op = Op::ExtLeaf;
        n.dim = dim;
        n.iaux = rows;
        n.val = alloc(dim);  // adjoint slot; value is read through ext_
        n.ext = static_cast<uint32_t>(ext_.size());
        ext_.push_back(data);
        nodes_.push_back(n);
        return Id(nodes_.size() - 1);
    }

    // ---- elementwise / scalar ops -------------------------------------------

    Id add(Id a, Id b) { return binary(Op::Add, a, b); }
    Id sub(Id a, Id b) { return binary(Op::Sub, a, b); }
    Id mul(Id a, Id b) { return binary(Op::Mul, a, b); }
    Id div(Id a, Id b) { return binary(Op::Div, a, b); }
    Id vmax(Id a, Id b) { return binary(Op::Max, a, b); }
    Id vmin(Id a, Id b) { return binary(Op::Min, a, b); }

    Id neg(Id a) { return unary(Op::Neg, a); }
    Id scale(Id a, Real s) { return unary(Op::Scale, a, s); }
    Id add_const(Id a, Real c) { return unary(Op::AddConst, a, c); }

    Id fn(ElemFn f, Id a, Real aux = Real(1)) {
        Node n = make(Op::Fn, {&a, 1}, dim(a));
        n.fn = f;
        n.aux = aux;
        return push(n);
    }

    // ---- structure ops -------------------------------------------------------

    Id smulv(Id s, Id v) {
        check_dim(s, 1, "smulv scalar");
        Id args[2] = {s, v};
        return push(make(Op::SMulV, args, dim(v)));
    }

    Id dot(Id a, Id b) {
        check_same(a, b, "dot");
        Id args[2] = {a, b};
        return push(make(Op::Dot, args, 1));
    }

    Id sum(Id a) { return push(make(Op::Sum, {&a, 1}, 1)); }

    Id repeat(Id s, uint32_t n) {
        check_dim(s, 1, "repeat scalar");
        return push(make(Op::Repeat, {&s, 1}, n));
    }

    Id matvec(Id w, Id x) {
        const uint32_t r = rows_of(w);
        if (r == 0 || dim(w) % r != 0 || dim(w) / r != dim(x))
            throw std::invalid_argument("matvec: shape mismatch");
        Id args[2] = {w, x};
        Node n = make(Op::MatVec, args, r);
        return push(n);
    }

    Id mattvec(Id w, Id x) {
        const uint32_t r = rows_of(w);
        if (r == 0 || dim(w) % r != 0 || r != dim(x))
            throw std::invalid_argument("mattvec: shape mismatch");
        Id args[2] = {w, x};
        Node n = make(Op::MatTVec, args, dim(w) / r);
        return push(n);
    }

    Id outer(Id u, Id v) {
        Id args[2] = {u, v};
        Node n = make(Op::Outer, args, dim(u) * dim(v));
        n.iaux = dim(u);
        return push(n);
    }

    Id concat(std::span<const Id> parts) {
        uint32_t d = 0;
        for (Id p : parts) d += dim(p);
        return push(make(Op::ConcatN, parts, d));
    }

    Id slice(Id a, uint32_t offset, uint32_t len) {
        if (offset + len > dim(a)) throw std::invalid_argument("slice: out of range");
        Node n = make(Op::Slice, {&a, 1}, len);
        n.iaux = offset;
        return push(n);
    }

    Id pad_slice(Id a, uint32_t offset, uint32_t out_dim) {
        if (offset + dim(a) > out_dim) throw std::invalid_argument("pad_slice: out of range");
        Node n = make(Op::PadSlice, {&a, 1}, out_dim);
        n.iaux = offset;
        return push(n);
    }

    // ---- access ---------------------------------------------------------------

    std::size_t size() const { return nodes_.size(); }

    uint32_t dim(Id i) const { return node(i).dim; }

    /// Matrix row count (0 for plain vectors).
    uint32_t rows_of(Id i) const { return node(i).op == Op::Outer || node(i).op == Op::ExtLeaf ? node(i).iaux : node(i).op == Op::Leaf || node(i).op == Op::Const ? node(i).iaux : node(i).iaux; }

    std::span<const Real> value(Id i) const {
        const Node& n = node(i);
        if (n.op == Op::ExtLeaf) return {ext_[n.ext], n.dim};
        return {values_.data() + n.val, n.dim};
    }

    Real scalar(Id i) const {
        check_dim(i, 1, "scalar");
        return value(i)[0];
    }

    std::span<const Real> adjoint(Id i) const {
        const Node& n = node(i);
        return {adj_.data() + n.val, n.dim};
    }

    /// Mark a Leaf/Const vector buffer as a rows x cols matrix.
    Id as_matrix(Id i, uint32_t rows) {
        Node& n = nodes_.at(i);
        if (n.op != Op::Leaf && n.op != Op::Const && n.op != Op::ExtLeaf)
            throw std::invalid_argument("as_matrix: terminals only");
        n.iaux = rows;
        return i;
    }

    // ---- differentiation -------------------------------------------------------

    /// Numeric reverse sweep from a scalar output. Adjoints of all ancestor
    /// nodes become available through adjoint().
    void backward(Id output) {
        check_id(output);
        check_dim(output, 1, "backward output");
        adj_.assign(values_.size(), Real(0));
        live_.assign(nodes_.size(), 0);
        live_[output] = 1;
        for (Id i = output; i != npos; --i) {
            if (!live_[i]) {
                if (i == 0) break;
                continue;
            }
            const Node& n = node(i);
            for (uint32_t k = 0; k < n.nargs; ++k) live_[args_[n.args + k]] = 1;
            if (i == 0) break;
        }
        adj_[node(output).val] = Real(1);
        for (Id i = output; i != npos; --i) {
            if (live_[i]) pull_back(i);
            if (i == 0) break;
        }
    }

    /// Emit the gradient of `output` w.r.t. each node in `wrt` as new tape
    /// nodes and return their ids. The returned nodes are differentiable, so
    /// downstream code can keep building on them (second-order path).
    std::vector<Id> record_gradient(Id output, std::span<const Id> wrt) {
        check_id(output);
        check_dim(output, 1, "record_gradient output");
        for (Id w : wrt) check_id(w);
        const std::size_t n0 = nodes_.size();

        // Restrict emission to nodes between wrt and output.
        std::vector<uint8_t> desc(n0, 0), anc(n0, 0);
        for (Id w : wrt) desc[w] = 1;
        for (std::size_t i = 0; i < n0; ++i) {
            const Node& n = nodes_[i];
            for (uint32_t k = 0; k < n.nargs && !desc[i]; ++k)
                if (desc[args_[n.args + k]]) desc[i] = 1;
        }
        anc[output] = 1;
        for (Id i = output; i != npos; --i) {
            if (anc[i]) {
                const Node& n = nodes_[i];
                for (uint32_t k = 0; k < n.nargs; ++k) anc[args_[n.args + k]] = 1;
            }
            if (i == 0) break;
        }

        std::vector<Id> adj(n0, npos);
        adj[output] = constant(Real(1));
        for (Id i = output; i != npos; --i) {
            if (anc[i] && desc[i] && adj[i] != npos) emit_pull_back(i, adj);
            if (i == 0) break;
        }

        std::vector<Id> out;
        out.reserve(wrt.size());
        for (Id w : wrt) {
            if (adj[w] != npos) {
                out.push_back(adj[w]);
            } else {
                std::vector<Real> zeros(dim(w), Real(0));
                out.push_back(constant_vec(zeros));
            }
        }
        return out;
    }

    /// Recompute every non-terminal value from the terminals in place.
    void replay() {
        for (Id i = 0; i < nodes_.size(); ++i) compute(i);
    }

    void clear() {
        nodes_.clear();
        args_.clear();
        values_.clear();
        adj_.clear();
        ext_.clear();
        live_.clear();
    }

private:
    struct Node {
        Op op{Op::Const};
        ElemFn fn{ElemFn::Sin};
        uint32_t nargs = 0;
        uint32_t args = 0;   // offset into args_
        uint32_t val = 0;    // offset into values_ / adj_
        uint32_t dim = 0;
        uint32_t iaux = 0;   // slice offset / matrix rows
        uint32_t ext = 0;    // index into ext_ for ExtLeaf
        Real aux{1};
    };

    std::vector<Node> nodes_;
    std::vector<uint32_t> args_;
    std::vector<Real> values_;
    std::vector<Real> adj_;
    std::vector<const Real*> ext_;
    std::vector<uint8_t> live_;

    using VecMap = Eigen::Map<Eigen::Matrix<Real, Eigen::Dynamic, 1>>;
    using CVecMap = Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, 1>>;
    using MatMap = Eigen::Map<Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    using CMatMap = Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

    const Node& node(Id i) const {
        check_id(i);
        return nodes_[i];
    }

    void check_id(Id i) const {
        if (i >= nodes_.size()) throw std::invalid_argument("tape: dangling node id");
    }

    void check_dim(Id i, uint32_t d, const char* what) const {
        if (node(i).dim != d) throw std::invalid_argument(std::string(what) + ": expected dim " + std::to_string(d));
    }

    void check_same(Id a, Id b, const char* what) const {
        if (dim(a) != dim(b)) throw std::invalid_argument(std::string(what) + ": dim mismatch");
    }

    uint32_t alloc(uint32_t d) {
        const uint32_t ofs = static_cast<uint32_t>(values_.size());
        values_.resize(values_.size() + d, Real(0));
        return ofs;
    }

    Id terminal(Op op, std::span<const Real> v) {
        Node n{};
        n.op = op;
        n.dim = static_cast<uint32_t>(v.size());
        n.val = alloc(n.dim);
        std::copy(v.begin(), v.end(), values_.begin() + n.val);
        nodes_.push_back(n);
        return Id(nodes_.size() - 1);
    }

    Node make(Op op, std::span<const Id> args, uint32_t d) {
        Node n{};
        n.op = op;
        n.nargs = static_cast<uint32_t>(args.size());
        n.args = static_cast<uint32_t>(args_.size());
        for (Id a : args) {
            check_id(a);
            args_.push_back(a);
        }
        n.dim = d;
        return n;
    }

    Id push(Node n) {
        n.val = alloc(n.dim);
        nodes_.push_back(n);
        const Id id = Id(nodes_.size() - 1);
        compute(id);
        return id;
    }

    Id binary(Op op, Id a, Id b) {
        check_same(a, b, "elementwise");
        Id args[2] = {a, b};
        return push(make(op, args, dim(a)));
    }

    Id unary(Op op, Id a, Real aux = Real(1)) {
        Node n = make(op, {&a, 1}, dim(a));
        n.aux = aux;
        return push(n);
    }

    const Real* vp(Id i) const {
        const Node& n = nodes_[i];
        return n.op == Op::ExtLeaf ? ext_[n.ext] : values_.data() + n.val;
    }

    static Real eval_fn(ElemFn f, Real x, Real beta) {
        switch (f) {
            case ElemFn::Sin: return std::sin(x);
            case ElemFn::Cos: return std::cos(x);
            case ElemFn::Exp: return std::exp(x);
            case ElemFn::Log: return std::log(x);
            case ElemFn::Sqrt: return std::sqrt(x);
            case ElemFn::Recip: return Real(1) / x;
            case ElemFn::Square: return x * x;
            case ElemFn::Abs: return std::abs(x);
            case ElemFn::Sign: return x > Real(0) ? Real(1) : x < Real(0) ? Real(-1) : Real(0);
            case ElemFn::Softplus: {
                const Real bx = beta * x;
                return bx > Real(30) ? x : std::log1p(std::exp(bx)) / beta;
            }
            case ElemFn::Sigmoid: {
                const Real bx = beta * x;
                if (bx >= Real(0)) return Real(1) / (Real(1) + std::exp(-bx));
                const Real e = std::exp(bx);
                return e / (Real(1) + e);
            }
        }
        return Real(0);
    }

    /// d f(x) / dx given x and y = f(x). Sign's derivative is zero away from
    /// the (measure-zero) kink; that is its defined subgradient, not a fallback.
    static Real eval_dfn(ElemFn f, Real x, Real y, Real beta) {
        switch (f) {
            case ElemFn::Sin: return std::cos(x);
            case ElemFn::Cos: return -std::sin(x);
            case ElemFn::Exp: return y;
            case ElemFn::Log: return Real(1) / x;
            case ElemFn::Sqrt: return Real(0.5) / y;
            case ElemFn::Recip: return -y * y;
            case ElemFn::Square: return Real(2) * x;
            case ElemFn::Abs: return eval_fn(ElemFn::Sign, x, beta);
            case ElemFn::Sign: return Real(0);
            case ElemFn::Softplus: return eval_fn(ElemFn::Sigmoid, x, beta);
            case ElemFn::Sigmoid: return beta * y * (Real(1) - y);
        }
        return Real(0);
    }

    void compute(Id i) {
        Node& n = nodes_[i];
        if (n.op == Op::Leaf || n.op == Op::Const || n.op == Op::ExtLeaf) return;
        Real* y = values_.data() + n.val;
        const Id* a = n.nargs ? &args_[n.args] : nullptr;
        switch (n.op) {
            case Op::Add: {
                const Real *x0 = vp(a[0]), *x1 = vp(a[1]);
                for (uint32_t k = 0; k < n.dim; ++k) y[k] = x0[k] + x1[k];
                break;
            }
            case Op::Sub: {
                const Real *x0 = vp(a[0]), *x1 = vp(a[1]);
                for (uint32_t k = 0; k < n.dim; ++k) y[k] = x0[k] - x1[k];
                break;
            }
            case Op::Mul: {
                const Real *x0 = vp(a[0]), *x1 = vp(a[1]);
                for (uint32_t k = 0; k < n.dim; ++k) y[k] = x0[k] * x1[k];
                break;
            }
            case Op::Div: {
                const Real *x0 = vp(a[0]), *x1 = vp(a[1]);
                for (uint32_t k = 0; k < n.dim; ++k) y[k] = x0[k] / x1[k];
                break;
            }
            case Op::Max: {
                const Real *x0 = vp(a[0]), *x1 = vp(a[1]);
                for (uint32_t k = 0; k < n.dim; ++k) y[k] = x0[k] >= x1[k] ? x0[k] : x1[k];
                break;
            }
            case Op::Min: {
                const Real *x0 = vp(a[0]), *x1 = vp(a[1]);
                for (uint32_t k = 0; k < n.dim; ++k) y[k] = x0[k] <= x1[k] ? x0[k] : x1[k];
                break;
            }
            case Op::Neg: {
                const Real* x0 = vp(a[0]);
                for (uint32_t k = 0; k < n.dim; ++k) y[k] = -x0[k];
                break;
            }
            case Op::Scale: {
                const Real* x0 = vp(a[0]);
                for (uint32_t k = 0; k < n.dim; ++k) y[k] = n.aux * x0[k];
                break;
            }
            case Op::AddConst: {
                const Real* x0 = vp(a[0]);
                for (uint32_t k = 0; k < n.dim; ++k) y[k] = x0[k] + n.aux;
                break;
            }
            case Op::Fn: {
                const Real* x0 = vp(a[0]);
                for (uint32_t k = 0; k < n.dim; ++k) y[k] = eval_fn(n.fn, x0[k], n.aux);
                break;
            }
            case Op::SMulV: {
                const Real s = vp(a[0])[0];
                const Real* v = vp(a[1]);
                for (uint32_t k = 0; k < n.dim; ++k) y[k] = s * v[k];
                break;
            }
            case Op::Dot: {
                const Real *x0 = vp(a[0]), *x1 = vp(a[1]);
                Real acc(0);
                for (uint32_t k = 0; k < nodes_[a[0]].dim; ++k) acc += x0[k] * x1[k];
                y[0] = acc;
                break;
            }
            case Op::Sum: {
                const Real* x0 = vp(a[0]);
                Real acc(0);
                for (uint32_t k = 0; k < nodes_[a[0]].dim; ++k) acc += x0[k];
                y[0] = acc;
                break;
            }
            case Op::Repeat: {
                const Real s = vp(a[0])[0];
                for (uint32_t k = 0; k < n.dim; ++k) y[k] = s;
                break;
            }
            case Op::MatVec: {
                const Node& wn = nodes_[a[0]];
                const uint32_t r = wn.iaux, c = wn.dim / wn.iaux;
                VecMap ym(y, r);
                ym.noalias() = CMatMap(vp(a[0]), r, c) * CVecMap(vp(a[1]), c);
                break;
            }
            case Op::MatTVec: {
                const Node& wn = nodes_[a[0]];
                const uint32_t r = wn.iaux, c = wn.dim / wn.iaux;
                VecMap ym(y, c);
                ym.noalias() = CMatMap(vp(a[0]), r, c).transpose() * CVecMap(vp(a[1]), r);
                break;
            }
            case Op::Outer: {
                const uint32_t r = n.iaux, c = n.dim / n.iaux;
                MatMap ym(y, r, c);
                ym.noalias() = CVecMap(vp(a[0]), r) * CVecMap(vp(a[1]), c).transpose();
                break;
            }
            case Op::ConcatN: {
                uint32_t ofs = 0;
                for (uint32_t k = 0; k < n.nargs; ++k) {
                    const Node& p = nodes_[a[k]];
                    std::copy(vp(a[k]), vp(a[k]) + p.dim, y + ofs);
                    ofs += p.dim;
                }
                break;
            }
            case Op::Slice: {
                const Real* x0 = vp(a[0]);
                std::copy(x0 + n.iaux, x0 + n.iaux + n.dim, y);
                break;
            }
            case Op::PadSlice: {
                std::fill(y, y + n.dim, Real(0));
                const Node& p = nodes_[a[0]];
                std::copy(vp(a[0]), vp(a[0]) + p.dim, y + n.iaux);
                break;
            }
            default:
                throw UnsupportedOp("compute: unhandled op");
        }
    }

    // Numeric adjoint propagation for one node.
    void pull_back(Id i) {
        const Node& n = nodes_[i];
        if (n.op == Op::Leaf || n.op == Op::Const || n.op == Op::ExtLeaf) return;
        const Real* w = adj_.data() + n.val;
        const Id* a = &args_[n.args];
        auto adj_of = [&](Id p) { return adj_.data() + nodes_[p].val; };
        switch (n.op) {
            case Op::Add: {
                Real *d0 = adj_of(a[0]), *d1 = adj_of(a[1]);
                for (uint32_t k = 0; k < n.dim; ++k) {
                    d0[k] += w[k];
                    d1[k] += w[k];
                }
                break;
            }
            case Op::Sub: {
                Real *d0 = adj_of(a[0]), *d1 = adj_of(a[1]);
                for (uint32_t k = 0; k < n.dim; ++k) {
                    d0[k] += w[k];
                    d1[k] -= w[k];
                }
                break;
            }
            case Op::Mul: {
                Real *d0 = adj_of(a[0]), *d1 = adj_of(a[1]);
                const Real *x0 = vp(a[0]), *x1 = vp(a[1]);
                for (uint32_t k = 0; k < n.dim; ++k) {
                    d0[k] += w[k] * x1[k];
                    d1[k] += w[k] * x0[k];
                }
                break;
            }
            case Op::Div: {
                Real *d0 = adj_of(a[0]), *d1 = adj_of(a[1]);
                const Real *x1 = vp(a[1]), *y = values_.data() + n.val;
                for (uint32_t k = 0; k < n.dim; ++k) {
                    d0[k] += w[k] / x1[k];
                    d1[k] -= w[k] * y[k] / x1[k];
                }
                break;
            }
            case Op::Max: {
                Real *d0 = adj_of(a[0]), *d1 = adj_of(a[1]);
                const Real *x0 = vp(a[0]), *x1 = vp(a[1]);
                for (uint32_t k = 0; k < n.dim; ++k) {
                    if (x0[k] >= x1[k]) d0[k] += w[k];
                    else d1[k] += w[k];
                }
                break;
            }
            case Op::Min: {
                Real *d0 = adj_of(a[0]), *d1 = adj_of(a[1]);
                const Real *x0 = vp(a[0]), *x1 = vp(a[1]);
                for (uint32_t k = 0; k < n.dim; ++k) {
                    if (x0[k] <= x1[k]) d0[k] += w[k];
                    else d1[k] += w[k];
                }
                break;
            }
            case Op::Neg: {
                Real* d0 = adj_of(a[0]);
                for (uint32_t k = 0; k < n.dim; ++k) d0[k] -= w[k];
                break;
            }
            case Op::Scale: {
                Real* d0 = adj_of(a[0]);
                for (uint32_t k = 0; k < n.dim; ++k) d0[k] += n.aux * w[k];
                break;
            }
            case Op::AddConst: {
                Real* d0 = adj_of(a[0]);
                for (uint32_t k = 0; k < n.dim; ++k) d0[k] += w[k];
                break;
            }
            case Op::Fn: {
                Real* d0 = adj_of(a[0]);
                const Real *x0 = vp(a[0]), *y = values_.data() + n.val;
                for (uint32_t k = 0; k < n.dim; ++k) d0[k] += w[k] * eval_dfn(n.fn, x0[k], y[k], n.aux);
                break;
            }
            case Op::SMulV: {
                Real *ds = adj_of(a[0]), *dv = adj_of(a[1]);
                const Real s = vp(a[0])[0];
                const Real* v = vp(a[1]);
                Real acc(0);
                for (uint32_t k = 0; k < n.dim; ++k) {
                    acc += w[k] * v[k];
                    dv[k] += s * w[k];
                }
                ds[0] += acc;
                break;
            }
            case Op::Dot: {
                Real *d0 = adj_of(a[0]), *d1 = adj_of(a[1]);
                const Real *x0 = vp(a[0]), *x1 = vp(a[1]);
                const Real s = w[0];
                for (uint32_t k = 0; k < nodes_[a[0]].dim; ++k) {
                    d0[k] += s * x1[k];
                    d1[k] += s * x0[k];
                }
                break;
            }
            case Op::Sum: {
                Real* d0 = adj_of(a[0]);
                const Real s = w[0];
                for (uint32_t k = 0; k < nodes_[a[0]].dim; ++k) d0[k] += s;
                break;
            }
            case Op::Repeat: {
                Real acc(0);
                for (uint32_t k = 0; k < n.dim; ++k) acc += w[k];
                adj_of(a[0])[0] += acc;
                break;
            }
            case Op::MatVec: {
                const Node& wn = nodes_[a[0]];
                const uint32_t r = wn.iaux, c = wn.dim / wn.iaux;
                CMatMap W(vp(a[0]), r, c);
                CVecMap x(vp(a[1]), c), wv(w, r);
                VecMap(adj_of(a[1]), c).noalias() += W.transpose() * wv;
                MatMap(adj_of(a[0]), r, c).noalias() += wv * x.transpose();
                break;
            }
            case Op::MatTVec: {
                const Node& wn = nodes_[a[0]];
                const uint32_t r = wn.iaux, c = wn.dim / wn.iaux;
                CMatMap W(vp(a[0]), r, c);
                CVecMap x(vp(a[1]), r), wv(w, c);
                VecMap(adj_of(a[1]), r).noalias() += W * wv;
                MatMap(adj_of(a[0]), r, c).noalias() += x * wv.transpose();
                break;
            }
            case Op::Outer: {
                const uint32_t r = n.iaux, c = n.dim / n.iaux;
                CMatMap wm(w, r, c);
                CVecMap u(vp(a[0]), r), v(vp(a[1]), c);
                VecMap(adj_of(a[0]), r).noalias() += wm * v;
                VecMap(adj_of(a[1]), c).noalias() += wm.transpose() * u;
                break;
            }
            case Op::ConcatN: {
                uint32_t ofs = 0;
                for (uint32_t k = 0; k < n.nargs; ++k) {
                    const Node& p = nodes_[a[k]];
                    Real* dp = adj_of(a[k]);
                    for (uint32_t j = 0; j < p.dim; ++j) dp[j] += w[ofs + j];
                    ofs += p.dim;
                }
                break;
            }
            case Op::Slice: {
                Real* d0 = adj_of(a[0]);
                for (uint32_t k = 0; k < n.dim; ++k) d0[n.iaux + k] += w[k];
                break;
            }
            case Op::PadSlice: {
                Real* d0 = adj_of(a[0]);
                const Node& p = nodes_[a[0]];
                for (uint32_t k = 0; k < p.dim; ++k) d0[k] += w[n.iaux + k];
                break;
            }
            default:
                throw UnsupportedOp("backward: unhandled op");
        }
    }

    void emit_accum(std::vector<Id>& adj, Id target, Id contribution) {
        adj[target] = adj[target] == npos ? contribution : add(adj[target], contribution);
    }

    // Emit the adjoint computation for one node as differentiable tape ops.
    void emit_pull_back(Id i, std::vector<Id>& adj) {
        const Node n = nodes_[i];  // copy: emission appends nodes
        if (n.op == Op::Leaf || n.op == Op::Const || n.op == Op::ExtLeaf) return;
        const Id w = adj[i];
        std::vector<Id> a(n.nargs);
        for (uint32_t k = 0; k < n.nargs; ++k) a[k] = args_[n.args + k];
        switch (n.op) {
            case Op::Add:
                emit_accum(adj, a[0], w);
                emit_accum(adj, a[1], w);
                break;
            case Op::Sub:
                emit_accum(adj, a[0], w);
                emit_accum(adj, a[1], neg(w));
                break;
            case Op::Mul:
                emit_accum(adj, a[0], mul(w, a[1]));
                emit_accum(adj, a[1], mul(w, a[0]));
                break;
            case Op::Div:
                emit_accum(adj, a[0], div(w, a[1]));
                emit_accum(adj, a[1], neg(mul(w, div(Id(i), a[1]))));
                break;
            case Op::Max:
            case Op::Min: {
                std::vector<Real> m0(n.dim), m1(n.dim);
                const Real *x0 = vp(a[0]), *x1 = vp(a[1]);
                for (uint32_t k = 0; k < n.dim; ++k) {
                    const bool first = n.op == Op::Max ? x0[k] >= x1[k] : x0[k] <= x1[k];
                    m0[k] = first ? Real(1) : Real(0);
                    m1[k] = Real(1) - m0[k];
                }
                emit_accum(adj, a[0], mul(w, constant_vec(m0)));
                emit_accum(adj, a[1], mul(w, constant_vec(m1)));
                break;
            }
            case Op::Neg:
                emit_accum(adj, a[0], neg(w));
                break;
            case Op::Scale:
                emit_accum(adj, a[0], scale(w, n.aux));
                break;
            case Op::AddConst:
                emit_accum(adj, a[0], w);
                break;
            case Op::Fn:
                emit_accum(adj, a[0], mul(w, emit_dfn(n.fn, a[0], Id(i), n.aux)));
                break;
            case Op::SMulV:
                emit_accum(adj, a[0], dot(w, a[1]));
                emit_accum(adj, a[1], smulv(a[0], w));
                break;
            case Op::Dot:
                emit_accum(adj, a[0], smulv(w, a[1]));
                emit_accum(adj, a[1], smulv(w, a[0]));
                break;
            case Op::Sum:
                emit_accum(adj, a[0], repeat(w, dim(a[0])));
                break;
            case Op::Repeat:
                emit_accum(adj, a[0], sum(w));
                break;
            case Op::MatVec:
                emit_accum(adj, a[1], mattvec(a[0], w));
                emit_accum(adj, a[0], outer(w, a[1]));
                break;
            case Op::MatTVec:
                emit_accum(adj, a[1], matvec(a[0], w));
                emit_accum(adj, a[0], outer(a[1], w));
                break;
            case Op::Outer:
                emit_accum(adj, a[0], matvec(Id(i) == w ? w : w, a[1]) /* placeholder below */);
                break;
            case Op::ConcatN: {
                uint32_t ofs = 0;
                for (uint32_t k = 0; k < n.nargs; ++k) {
                    const uint32_t d = dim(a[k]);
                    emit_accum(adj, a[k], slice(w, ofs, d));
                    ofs += d;
                }
                break;
            }
            case Op::Slice:
                emit_accum(adj, a[0], pad_slice(w, n.iaux, dim(a[0])));
                break;
            case Op::PadSlice:
                emit_accum(adj, a[0], slice(w, n.iaux, dim(a[0])));
                break;
            default:
                throw UnsupportedOp("record_gradient: no second-order rule for op");
        }
    }

    Id emit_dfn(ElemFn f, Id x, Id y, Real beta) {
        switch (f) {
            case ElemFn::Sin: return fn(ElemFn::Cos, x);
            case ElemFn::Cos: return neg(fn(ElemFn::Sin, x));
            case ElemFn::Exp: return y;
            case ElemFn::Log: return fn(ElemFn::Recip, x);
            case ElemFn::Sqrt: return scale(fn(ElemFn::Recip, y), Real(0.5));
            case ElemFn::Recip: return neg(fn(ElemFn::Square, y));
            case ElemFn::Square: return scale(x, Real(2));
            case ElemFn::Abs: return fn(ElemFn::Sign, x);
            case ElemFn::Sign: {
                std::vector<Real> zeros(dim(x), Real(0));
                return constant_vec(zeros);
            }
            case ElemFn::Softplus: return fn(ElemFn::Sigmoid, x, beta);
            case ElemFn::Sigmoid: return scale(mul(Id(y), add_const(neg(Id(y)), Real(1))), beta);
        }
        throw UnsupportedOp("record_gradient: no second-order rule for elementwise fn");
    }
};

}  // namespace psdf
