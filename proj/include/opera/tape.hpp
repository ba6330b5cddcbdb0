#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "opera/tensor.hpp"

namespace opera::ad {

template <typename T>
struct AdamSlot {
    Array<T> m, v;
    int64_t t = 0;
};

// Named parameter set shared across training steps. Values persist; each
// step's Tape borrows copies and hands gradients back by name.
template <typename T>
struct ParamStore {
    std::map<std::string, Array<T>> values;
    std::map<std::string, AdamSlot<T>> slots;

    void add(const std::string& name, Array<T> init) {
        if (!values.emplace(name, std::move(init)).second)
            throw ConfigError("duplicate parameter name '" + name + "'");
    }
    bool has(const std::string& name) const { return values.count(name) != 0; }
    Array<T>& at(const std::string& name) {
        auto it = values.find(name);
        if (it == values.end()) throw ConfigError("unknown parameter '" + name + "'");
        return it->second;
    }
    const Array<T>& at(const std::string& name) const {
        auto it = values.find(name);
        if (it == values.end()) throw ConfigError("unknown parameter '" + name + "'");
        return it->second;
    }
    AdamSlot<T>& slot(const std::string& name) {
        AdamSlot<T>& s = slots[name];
        if (s.m.v.empty()) {
            s.m = Array<T>::zeros(at(name).dims);
            s.v = Array<T>::zeros(at(name).dims);
        }
        return s;
    }
    void reset_optimizer() { slots.clear(); }
    int64_t total_numel() const {
        int64_t n = 0;
        for (const auto& kv : values) n += shape_numel(kv.second.dims);
        return n;
    }
};

template <typename T>
class Tape;

// Handle into a Tape node. Cheap to copy; only valid while the tape lives.
template <typename T>
struct Tensor {
    Tape<T>* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Array<T>& val() const;
    const Shape& dims() const { return val().dims; }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so walking the
// node list backwards is a topological sweep of the graph.
template <typename T>
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Tensor<T> input(Array<T> value, bool requires_grad = false) {
        return {this, push(std::move(value), requires_grad)};
    }
    Tensor<T> constant(Array<T> value) { return input(std::move(value), false); }

    // Leaf bound to a named parameter. Repeated requests for the same name
    // return the same node so gradient contributions accumulate in one place.
    Tensor<T> param(ParamStore<T>& store, const std::string& name) {
        auto it = params_.find(name);
        if (it != params_.end()) return {this, it->second};
        int id = push(store.at(name), true);
        params_.emplace(name, id);
        return {this, id};
    }

    const Array<T>& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    bool node_requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

    const Array<T>& grad(const Tensor<T>& t) const {
        const Node& n = nodes_[static_cast<size_t>(t.id)];
        if (n.grad.v.empty()) throw ContractError("gradient not populated; run backward first");
        return n.grad;
    }
    Array<T> grad_or_zeros(const Tensor<T>& t) const {
        const Node& n = nodes_[static_cast<size_t>(t.id)];
        return n.grad.v.empty() ? Array<T>::zeros(n.value.dims) : n.grad;
    }

    void backward(const Tensor<T>& loss) {
        if (loss.tape != this) throw ContractError("loss tensor belongs to another tape");
        if (!loss.val().is_scalar())
            throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.dims()));
        if (ran_backward_) throw ContractError("backward already ran on this tape");
        ran_backward_ = true;
        accum_unchecked(loss.id, Array<T>::full(loss.dims(), T(1)));
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
            Node& nd = nodes_[static_cast<size_t>(i)];
            if (!nd.backward || nd.grad.v.empty()) continue;
            nd.backward();
        }
    }

    // Gradients for the parameters this graph actually touched.
    std::map<std::string, Array<T>> param_grads() const {
        std::map<std::string, Array<T>> out;
        for (const auto& [name, id] : params_) {
            const Node& n = nodes_[static_cast<size_t>(id)];
            if (!n.grad.v.empty()) out.emplace(name, n.grad);
        }
        return out;
    }

    // graph-construction plumbing for the op functions below
    int push(Array<T> value, bool requires_grad) {
#ifndef NDEBUG
        for (T v : value.v)
            if (!std::isfinite(static_cast<double>(v)))
                throw ContractError("non-finite value produced on tape");
#endif
        nodes_.push_back(Node{std::move(value), Array<T>(), nullptr, requires_grad});
        return static_cast<int>(nodes_.size()) - 1;
    }
    void set_backward(int id, std::function<void()> fn) {
        nodes_[static_cast<size_t>(id)].backward = std::move(fn);
    }
    void accum(int id, Array<T> g) {
        if (!nodes_[static_cast<size_t>(id)].requires_grad) return;
        accum_unchecked(id, std::move(g));
    }
    size_t size() const { return nodes_.size(); }

  private:
    struct Node {
        Array<T> value;
        Array<T> grad;
        std::function<void()> backward;
        bool requires_grad = false;
    };

    void accum_unchecked(int id, Array<T> g) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (g.dims != n.value.dims)
            throw ShapeError("gradient shape " + shape_str(g.dims) + " does not match value " +
                             shape_str(n.value.dims));
        if (n.grad.v.empty()) {
            n.grad = std::move(g);
        } else {
            T* a = n.grad.data();
            const T* b = g.data();
            const int64_t m = n.grad.numel();
            for (int64_t i = 0; i < m; ++i) a[i] += b[i];
        }
    }

    std::vector<Node> nodes_;
    std::map<std::string, int> params_;
    bool ran_backward_ = false;
};

template <typename T>
inline const Array<T>& Tensor<T>::val() const {
    return tape->value(id);
}

template <typename T>
inline Tape<T>* same_tape(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.valid() || !b.valid()) throw ContractError("op on invalid tensor handle");
    if (a.tape != b.tape) throw ContractError("tensors live on different tapes");
    return a.tape;
}

// ---- elementwise ----

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    Tape<T>* tp = same_tape(a, b);
    const bool rg = tp->node_requires_grad(a.id) || tp->node_requires_grad(b.id);
    int oid = tp->push(broadcast_binary(a.val(), b.val(), [](T x, T y) { return x + y; }), rg);
    if (rg) {
        tp->set_backward(oid, [tp, oid, aid = a.id, bid = b.id]() {
            const Array<T>& g = tp->grad(Tensor<T>{tp, oid});
            tp->accum(aid, reduce_to_shape(g, tp->value(aid).dims));
            tp->accum(bid, reduce_to_shape(g, tp->value(bid).dims));
        });
    }
    return {tp, oid};
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    Tape<T>* tp = same_tape(a, b);
    const bool rg = tp->node_requires_grad(a.id) || tp->node_requires_grad(b.id);
    int oid = tp->push(broadcast_binary(a.val(), b.val(), [](T x, T y) { return x - y; }), rg);
    if (rg) {
        tp->set_backward(oid, [tp, oid, aid = a.id, bid = b.id]() {
            const Array<T>& g = tp->grad(Tensor<T>{tp, oid});
            tp->accum(aid, reduce_to_shape(g, tp->value(aid).dims));
            Array<T> neg = g;
            for (T& x : neg.v) x = -x;
            tp->accum(bid, reduce_to_shape(neg, tp->value(bid).dims));
        });
    }
    return {tp, oid};
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    Tape<T>* tp = same_tape(a, b);
    const bool rg = tp->node_requires_grad(a.id) || tp->node_requires_grad(b.id);
    int oid = tp->push(broadcast_binary(a.val(), b.val(), [](T x, T y) { return x * y; }), rg);
    if (rg) {
        tp->set_backward(oid, [tp, oid, aid = a.id, bid = b.id]() {
            const Array<T>& g = tp->grad(Tensor<T>{tp, oid});
            const Array<T>& av = tp->value(aid);
            const Array<T>& bv = tp->value(bid);
            tp->accum(aid, reduce_to_shape(
                              broadcast_binary(g, bv, [](T x, T y) { return x * y; }), av.dims));
            tp->accum(bid, reduce_to_shape(
                              broadcast_binary(g, av, [](T x, T y) { return x * y; }), bv.dims));
        });
    }
    return {tp, oid};
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
    Tape<T>* tp = x.tape;
    const bool rg = tp->node_requires_grad(x.id);
    Array<T> out = x.val();
    for (T& v : out.v) v *= s;
    int oid = tp->push(std::move(out), rg);
    if (rg) {
        tp->set_backward(oid, [tp, oid, xid = x.id, s]() {
            Array<T> g = tp->grad(Tensor<T>{tp, oid});
            for (T& v : g.v) v *= s;
            tp->accum(xid, std::move(g));
        });
    }
    return {tp, oid};
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tape<T>* tp = x.tape;
    const bool rg = tp->node_requires_grad(x.id);
    Array<T> out = x.val();
    for (T& v : out.v) v = v > T(0) ? v : T(0);
    int oid = tp->push(std::move(out), rg);
    if (rg) {
        tp->set_backward(oid, [tp, oid, xid = x.id]() {
            Array<T> g = tp->grad(Tensor<T>{tp, oid});
            const Array<T>& xv = tp->value(xid);
            for (int64_t i = 0; i < g.numel(); ++i)
                if (xv.v[static_cast<size_t>(i)] <= T(0)) g.v[static_cast<size_t>(i)] = T(0);
            tp->accum(xid, std::move(g));
        });
    }
    return {tp, oid};
}

// x * Phi(x) with the exact normal CDF
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    Tape<T>* tp = x.tape;
    const bool rg = tp->node_requires_grad(x.id);
    Array<T> out = x.val();
    for (T& v : out.v) {
        const double u = static_cast<double>(v);
        v = static_cast<T>(u * 0.5 * (1.0 + std::erf(u * 0.7071067811865476)));
    }
    int oid = tp->push(std::move(out), rg);
    if (rg) {
        tp->set_backward(oid, [tp, oid, xid = x.id]() {
            Array<T> g = tp->grad(Tensor<T>{tp, oid});
            const Array<T>& xv = tp->value(xid);
            for (int64_t i = 0; i < g.numel(); ++i) {
                const double u = static_cast<double>(xv.v[static_cast<size_t>(i)]);
                const double cdf = 0.5 * (1.0 + std::erf(u * 0.7071067811865476));
                const double pdf = std::exp(-0.5 * u * u) * 0.3989422804014327;
                g.v[static_cast<size_t>(i)] *= static_cast<T>(cdf + u * pdf);
            }
            tp->accum(xid, std::move(g));
        });
    }
    return {tp, oid};
}

template <typename T>
Tensor<T> vlog(const Tensor<T>& x) {
    Tape<T>* tp = x.tape;
    const bool rg = tp->node_requires_grad(x.id);
    Array<T> out = x.val();
    for (T& v : out.v) {
        if (!(v > T(0))) throw InvalidInputError("log requires strictly positive inputs");
        v = std::log(v);
    }
    int oid = tp->push(std::move(out), rg);
    if (rg) {
        tp->set_backward(oid, [tp, oid, xid = x.id]() {
            Array<T> g = tp->grad(Tensor<T>{tp, oid});
            const Array<T>& xv = tp->value(xid);
            for (int64_t i = 0; i < g.numel(); ++i)
                g.v[static_cast<size_t>(i)] /= xv.v[static_cast<size_t>(i)];
            tp->accum(xid, std::move(g));
        });
    }
    return {tp, oid};
}

// ---- shape ops ----

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape dims) {
    Tape<T>* tp = x.tape;
    if (shape_numel(dims) != x.val().numel())
        throw ShapeError("reshape " + shape_str(x.dims()) + " -> " + shape_str(dims) +
                         " changes element count");
    const bool rg = tp->node_requires_grad(x.id);
    Array<T> out(dims, x.val().v);
    int oid = tp->push(std::move(out), rg);
    if (rg) {
        tp->set_backward(oid, [tp, oid, xid = x.id]() {
            Array<T> g = tp->grad(Tensor<T>{tp, oid});
            tp->accum(xid, Array<T>(tp->value(xid).dims, std::move(g.v)));
        });
    }
    return {tp, oid};
}

template <typename T>
Array<T> permute_array(const Array<T>& x, const std::vector<int>& perm) {
    const int nd = x.ndim();
    if (static_cast<int>(perm.size()) != nd) throw ShapeError("permute rank mismatch");
    std::vector<bool> seen(static_cast<size_t>(nd), false);
    Shape od(static_cast<size_t>(nd));
    for (int i = 0; i < nd; ++i) {
        const int p = perm[static_cast<size_t>(i)];
        if (p < 0 || p >= nd || seen[static_cast<size_t>(p)])
            throw ShapeError("permute axes must be a permutation");
        seen[static_cast<size_t>(p)] = true;
        od[static_cast<size_t>(i)] = x.dims[static_cast<size_t>(p)];
    }
    Array<T> out = Array<T>::zeros(od);
    const Shape xst = row_strides(x.dims);
    std::vector<int64_t> step(static_cast<size_t>(nd));
    for (int i = 0; i < nd; ++i) step[static_cast<size_t>(i)] = xst[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    std::vector<int64_t> idx(static_cast<size_t>(nd), 0);
    int64_t src = 0;
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) {
        out.v[static_cast<size_t>(i)] = x.v[static_cast<size_t>(src)];
        for (int d = nd - 1; d >= 0; --d) {
            idx[static_cast<size_t>(d)]++;
            src += step[static_cast<size_t>(d)];
            if (idx[static_cast<size_t>(d)] < od[static_cast<size_t>(d)]) break;
            idx[static_cast<size_t>(d)] = 0;
            src -= step[static_cast<size_t>(d)] * od[static_cast<size_t>(d)];
        }
    }
    return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, std::vector<int> perm) {
    Tape<T>* tp = x.tape;
    const bool rg = tp->node_requires_grad(x.id);
    int oid = tp->push(permute_array(x.val(), perm), rg);
    if (rg) {
        std::vector<int> inv(perm.size());
        for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
        tp->set_backward(oid, [tp, oid, xid = x.id, inv]() {
            tp->accum(xid, permute_array(tp->grad(Tensor<T>{tp, oid}), inv));
        });
    }
    return {tp, oid};
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
    if (xs.empty()) throw InvalidInputError("concat needs at least one input");
    Tape<T>* tp = xs[0].tape;
    const int nd = xs[0].val().ndim();
    if (axis < 0 || axis >= nd) throw ShapeError("concat axis out of range");
    Shape od = xs[0].dims();
    bool rg = false;
    int64_t total_axis = 0;
    for (const auto& x : xs) {
        same_tape(xs[0], x);
        if (x.val().ndim() != nd) throw ShapeError("concat rank mismatch");
        for (int d = 0; d < nd; ++d)
            if (d != axis && x.dims()[static_cast<size_t>(d)] != od[static_cast<size_t>(d)])
                throw ShapeError("concat shape mismatch off-axis");
        total_axis += x.dims()[static_cast<size_t>(axis)];
        rg = rg || tp->node_requires_grad(x.id);
    }
    od[static_cast<size_t>(axis)] = total_axis;
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= od[static_cast<size_t>(d)];
    for (int d = axis + 1; d < nd; ++d) inner *= od[static_cast<size_t>(d)];

    Array<T> out = Array<T>::zeros(od);
    {
        int64_t off = 0;
        for (const auto& x : xs) {
            const int64_t len = x.dims()[static_cast<size_t>(axis)] * inner;
            const T* src = x.val().data();
            for (int64_t o = 0; o < outer; ++o)
                std::copy(src + o * len, src + (o + 1) * len,
                          out.data() + o * total_axis * inner + off);
            off += len;
        }
    }
    int oid = tp->push(std::move(out), rg);
    if (rg) {
        std::vector<int> ids;
        std::vector<int64_t> lens;
        for (const auto& x : xs) {
            ids.push_back(x.id);
            lens.push_back(x.dims()[static_cast<size_t>(axis)] * inner);
        }
        tp->set_backward(oid, [tp, oid, ids, lens, outer, total_axis, inner]() {
            const Array<T>& g = tp->grad(Tensor<T>{tp, oid});
            int64_t off = 0;
            for (size_t k = 0; k < ids.size(); ++k) {
                Array<T> gx = Array<T>::zeros(tp->value(ids[k]).dims);
                for (int64_t o = 0; o < outer; ++o)
                    std::copy(g.data() + o * total_axis * inner + off,
                              g.data() + o * total_axis * inner + off + lens[k],
                              gx.data() + o * lens[k]);
                off += lens[k];
                tp->accum(ids[k], std::move(gx));
            }
        });
    }
    return {tp, oid};
}

template <typename T>
Tensor<T> index_select(const Tensor<T>& x, int axis, const std::vector<int64_t>& idx) {
    Tape<T>* tp = x.tape;
    const int nd = x.val().ndim();
    if (axis < 0 || axis >= nd) throw ShapeError("index_select axis out of range");
    const int64_t dim = x.dims()[static_cast<size_t>(axis)];
    for (int64_t j : idx)
        if (j < 0 || j >= dim) throw IndexError("index_select index out of range");
    Shape od = x.dims();
    od[static_cast<size_t>(axis)] = static_cast<int64_t>(idx.size());
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= od[static_cast<size_t>(d)];
    for (int d = axis + 1; d < nd; ++d) inner *= od[static_cast<size_t>(d)];

    Array<T> out = Array<T>::zeros(od);
    const T* src = x.val().data();
    const int64_t k = static_cast<int64_t>(idx.size());
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < k; ++j)
            std::copy(src + (o * dim + idx[static_cast<size_t>(j)]) * inner,
                      src + (o * dim + idx[static_cast<size_t>(j)] + 1) * inner,
                      out.data() + (o * k + j) * inner);
    const bool rg = tp->node_requires_grad(x.id);
    int oid = tp->push(std::move(out), rg);
    if (rg) {
        tp->set_backward(oid, [tp, oid, xid = x.id, idx, outer, inner, dim, k]() {
            const Array<T>& g = tp->grad(Tensor<T>{tp, oid});
            Array<T> gx = Array<T>::zeros(tp->value(xid).dims);
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t j = 0; j < k; ++j) {
                    const T* gs = g.data() + (o * k + j) * inner;
                    T* gd = gx.data() + (o * dim + idx[static_cast<size_t>(j)]) * inner;
                    for (int64_t i = 0; i < inner; ++i) gd[i] += gs[i];
                }
            tp->accum(xid, std::move(gx));
        });
    }
    return {tp, oid};
}

// ---- batched row gather/scatter for token routing ----

// x [B,N,D], idx row-major [B,K] -> out [B,K,D]
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<int64_t>& idx, int64_t k) {
    Tape<T>* tp = x.tape;
    if (x.val().ndim() != 3) throw ShapeError("gather_rows expects a rank-3 input");
    const int64_t B = x.dims()[0], N = x.dims()[1], D = x.dims()[2];
    if (static_cast<int64_t>(idx.size()) != B * k)
        throw ShapeError("gather_rows index count does not match batch * k");
    for (int64_t j : idx)
        if (j < 0 || j >= N) throw IndexError("gather_rows index out of range");
    Array<T> out = Array<T>::zeros({B, k, D});
    const T* src = x.val().data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t j = 0; j < k; ++j) {
            const int64_t r = idx[static_cast<size_t>(b * k + j)];
            std::copy(src + (b * N + r) * D, src + (b * N + r + 1) * D,
                      out.data() + (b * k + j) * D);
        }
    const bool rg = tp->node_requires_grad(x.id);
    int oid = tp->push(std::move(out), rg);
    if (rg) {
        tp->set_backward(oid, [tp, oid, xid = x.id, idx, k, B, N, D]() {
            const Array<T>& g = tp->grad(Tensor<T>{tp, oid});
            Array<T> gx = Array<T>::zeros({B, N, D});
            for (int64_t b = 0; b < B; ++b)
                for (int64_t j = 0; j < k; ++j) {
                    const int64_t r = idx[static_cast<size_t>(b * k + j)];
                    const T* gs = g.data() + (b * k + j) * D;
                    T* gd = gx.data() + (b * N + r) * D;
                    for (int64_t i = 0; i < D; ++i) gd[i] += gs[i];
                }
            tp->accum(xid, std::move(gx));
        });
    }
    return {tp, oid};
}

// out = base with rows at idx replaced by src; indices must be distinct per batch row
template <typename T>
Tensor<T> scatter_rows(const Tensor<T>& base, const std::vector<int64_t>& idx, int64_t k,
                       const Tensor<T>& src) {
    Tape<T>* tp = same_tape(base, src);
    if (base.val().ndim() != 3 || src.val().ndim() != 3)
        throw ShapeError("scatter_rows expects rank-3 inputs");
    const int64_t B = base.dims()[0], N = base.dims()[1], D = base.dims()[2];
    if (src.dims()[0] != B || src.dims()[1] != k || src.dims()[2] != D)
        throw ShapeError("scatter_rows source shape mismatch");
    if (static_cast<int64_t>(idx.size()) != B * k)
        throw ShapeError("scatter_rows index count does not match batch * k");
    std::vector<char> seen(static_cast<size_t>(N));
    for (int64_t b = 0; b < B; ++b) {
        std::fill(seen.begin(), seen.end(), 0);
        for (int64_t j = 0; j < k; ++j) {
            const int64_t r = idx[static_cast<size_t>(b * k + j)];
            if (r < 0 || r >= N) throw IndexError("scatter_rows index out of range");
            if (seen[static_cast<size_t>(r)]) throw IndexError("scatter_rows duplicate index in row");
            seen[static_cast<size_t>(r)] = 1;
        }
    }
    Array<T> out = base.val();
    const T* sv = src.val().data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t j = 0; j < k; ++j) {
            const int64_t r = idx[static_cast<size_t>(b * k + j)];
            std::copy(sv + (b * k + j) * D, sv + (b * k + j + 1) * D,
                      out.data() + (b * N + r) * D);
        }
    const bool rg = tp->node_requires_grad(base.id) || tp->node_requires_grad(src.id);
    int oid = tp->push(std::move(out), rg);
    if (rg) {
        tp->set_backward(oid, [tp, oid, bid = base.id, sid = src.id, idx, k, B, N, D]() {
            const Array<T>& g = tp->grad(Tensor<T>{tp, oid});
            Array<T> gb = g;
            Array<T> gs = Array<T>::zeros({B, k, D});
            for (int64_t b = 0; b < B; ++b)
                for (int64_t j = 0; j < k; ++j) {
                    const int64_t r = idx[static_cast<size_t>(b * k + j)];
                    T* row = gb.data() + (b * N + r) * D;
                    std::copy(row, row + D, gs.data() + (b * k + j) * D);
                    std::fill(row, row + D, T(0));
                }
            tp->accum(bid, std::move(gb));
            tp->accum(sid, std::move(gs));
        });
    }
    return {tp, oid};
}

// ---- reductions ----

namespace detail {
inline void check_axes(const std::vector<int>& axes, int nd) {
    std::vector<bool> seen(static_cast<size_t>(nd), false);
    for (int a : axes) {
        if (a < 0 || a >= nd) throw ShapeError("reduction axis out of range");
        if (seen[static_cast<size_t>(a)]) throw ShapeError("duplicate reduction axis");
        seen[static_cast<size_t>(a)] = true;
    }
}
}  // namespace detail

template <typename T>
Tensor<T> sum(const Tensor<T>& x, const std::vector<int>& axes, bool keepdims = false,
              bool take_mean = false) {
    Tape<T>* tp = x.tape;
    const int nd = x.val().ndim();
    detail::check_axes(axes, nd);
    Shape kd = x.dims();
    int64_t count = 1;
    for (int a : axes) {
        count *= kd[static_cast<size_t>(a)];
        kd[static_cast<size_t>(a)] = 1;
    }
    Shape od;
    if (keepdims) {
        od = kd;
    } else {
        for (int d = 0; d < nd; ++d)
            if (std::find(axes.begin(), axes.end(), d) == axes.end())
                od.push_back(x.dims()[static_cast<size_t>(d)]);
    }
    // strides into the keepdims frame; reduced axes contribute nothing
    const Shape kst = row_strides(kd);
    std::vector<int64_t> step(static_cast<size_t>(nd));
    for (int d = 0; d < nd; ++d)
        step[static_cast<size_t>(d)] =
            kd[static_cast<size_t>(d)] == 1 && x.dims()[static_cast<size_t>(d)] != 1
                ? 0
                : kst[static_cast<size_t>(d)];
    for (int a : axes) step[static_cast<size_t>(a)] = 0;

    Array<T> out = Array<T>::zeros(od);
    {
        const T* src = x.val().data();
        std::vector<int64_t> idx(static_cast<size_t>(nd), 0);
        int64_t dst = 0;
        const int64_t n = x.val().numel();
        for (int64_t i = 0; i < n; ++i) {
            out.v[static_cast<size_t>(dst)] += src[i];
            for (int d = nd - 1; d >= 0; --d) {
                idx[static_cast<size_t>(d)]++;
                dst += step[static_cast<size_t>(d)];
                if (idx[static_cast<size_t>(d)] < x.dims()[static_cast<size_t>(d)]) break;
                idx[static_cast<size_t>(d)] = 0;
                dst -= step[static_cast<size_t>(d)] * x.dims()[static_cast<size_t>(d)];
            }
        }
        if (take_mean)
            for (T& v : out.v) v /= static_cast<T>(count);
    }
    const bool rg = tp->node_requires_grad(x.id);
    int oid = tp->push(std::move(out), rg);
    if (rg) {
        tp->set_backward(oid, [tp, oid, xid = x.id, step, count, take_mean, nd]() {
            const Array<T>& g = tp->grad(Tensor<T>{tp, oid});
            const Shape& xd = tp->value(xid).dims;
            Array<T> gx = Array<T>::zeros(xd);
            std::vector<int64_t> idx(static_cast<size_t>(nd), 0);
            int64_t srcp = 0;
            const int64_t n = gx.numel();
            const T f = take_mean ? T(1) / static_cast<T>(count) : T(1);
            for (int64_t i = 0; i < n; ++i) {
                gx.v[static_cast<size_t>(i)] = g.v[static_cast<size_t>(srcp)] * f;
                for (int d = nd - 1; d >= 0; --d) {
                    idx[static_cast<size_t>(d)]++;
                    srcp += step[static_cast<size_t>(d)];
                    if (idx[static_cast<size_t>(d)] < xd[static_cast<size_t>(d)]) break;
                    idx[static_cast<size_t>(d)] = 0;
                    srcp -= step[static_cast<size_t>(d)] * xd[static_cast<size_t>(d)];
                }
            }
            tp->accum(xid, std::move(gx));
        });
    }
    return {tp, oid};
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, const std::vector<int>& axes, bool keepdims = false) {
    return sum(x, axes, keepdims, true);
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    std::vector<int> axes(static_cast<size_t>(x.val().ndim()));
    for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
    return sum(x, axes, false, false);
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    std::vector<int> axes(static_cast<size_t>(x.val().ndim()));
    for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
    return sum(x, axes, false, true);
}

// ---- matmul ----

// Supports [m,k]x[k,n], batched [B,m,k]x[B,k,n], and [B,m,k]x[k,n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    Tape<T>* tp = same_tape(a, b);
    const Array<T>& av = a.val();
    const Array<T>& bv = b.val();
    const bool rg = tp->node_requires_grad(a.id) || tp->node_requires_grad(b.id);
    int oid;
    if (av.ndim() == 2 && bv.ndim() == 2) {
        const int64_t m = av.dims[0], k = av.dims[1], n = bv.dims[1];
        if (bv.dims[0] != k)
            throw ShapeError("matmul inner dims " + shape_str(av.dims) + " x " + shape_str(bv.dims));
        Array<T> out = Array<T>::zeros({m, n});
        gemm(av.data(), bv.data(), out.data(), m, k, n);
        oid = tp->push(std::move(out), rg);
        if (rg)
            tp->set_backward(oid, [tp, oid, aid = a.id, bid = b.id, m, k, n]() {
                const Array<T>& g = tp->grad(Tensor<T>{tp, oid});
                const Array<T>& A = tp->value(aid);
                const Array<T>& B = tp->value(bid);
                if (tp->node_requires_grad(aid)) {
                    Array<T> da = Array<T>::zeros({m, k});
                    gemm(g.data(), B.data(), da.data(), m, n, k, false, true);
                    tp->accum(aid, std::move(da));
                }
                if (tp->node_requires_grad(bid)) {
                    Array<T> db = Array<T>::zeros({k, n});
                    gemm(A.data(), g.data(), db.data(), k, m, n, true, false);
                    tp->accum(bid, std::move(db));
                }
            });
    } else if (av.ndim() == 3 && bv.ndim() == 3) {
        const int64_t B = av.dims[0], m = av.dims[1], k = av.dims[2], n = bv.dims[2];
        if (bv.dims[0] != B || bv.dims[1] != k)
            throw ShapeError("batched matmul " + shape_str(av.dims) + " x " + shape_str(bv.dims));
        Array<T> out = Array<T>::zeros({B, m, n});
        for (int64_t i = 0; i < B; ++i)
            gemm(av.data() + i * m * k, bv.data() + i * k * n, out.data() + i * m * n, m, k, n);
        oid = tp->push(std::move(out), rg);
        if (rg)
            tp->set_backward(oid, [tp, oid, aid = a.id, bid = b.id, B, m, k, n]() {
                const Array<T>& g = tp->grad(Tensor<T>{tp, oid});
                const Array<T>& A = tp->value(aid);
                const Array<T>& Bm = tp->value(bid);
                if (tp->node_requires_grad(aid)) {
                    Array<T> da = Array<T>::zeros({B, m, k});
                    for (int64_t i = 0; i < B; ++i)
                        gemm(g.data() + i * m * n, Bm.data() + i * k * n, da.data() + i * m * k,
                             m, n, k, false, true);
                    tp->accum(aid, std::move(da));
                }
                if (tp->node_requires_grad(bid)) {
                    Array<T> db = Array<T>::zeros({B, k, n});
                    for (int64_t i = 0; i < B; ++i)
                        gemm(A.data() + i * m * k, g.data() + i * m * n, db.data() + i * k * n,
                             k, m, n, true, false);
                    tp->accum(bid, std::move(db));
                }
            });
    } else if (av.ndim() == 3 && bv.ndim() == 2) {
        const int64_t B = av.dims[0], m = av.dims[1], k = av.dims[2], n = bv.dims[1];
        if (bv.dims[0] != k)
            throw ShapeError("matmul inner dims " + shape_str(av.dims) + " x " + shape_str(bv.dims));
        Array<T> out = Array<T>::zeros({B, m, n});
        gemm(av.data(), bv.data(), out.data(), B * m, k, n);
        oid = tp->push(std::move(out), rg);
        if (rg)
            tp->set_backward(oid, [tp, oid, aid = a.id, bid = b.id, B, m, k, n]() {
                const Array<T>& g = tp->grad(Tensor<T>{tp, oid});
                const Array<T>& A = tp->value(aid);
                const Array<T>& W = tp->value(bid);
                if (tp->node_requires_grad(aid)) {
                    Array<T> da = Array<T>::zeros({B, m, k});
                    gemm(g.data(), W.data(), da.data(), B * m, n, k, false, true);
                    tp->accum(aid, std::move(da));
                }
                if (tp->node_requires_grad(bid)) {
                    Array<T> db = Array<T>::zeros({k, n});
                    gemm(A.data(), g.data(), db.data(), k, B * m, n, true, false);
                    tp->accum(bid, std::move(db));
                }
            });
    } else {
        throw ShapeError("matmul unsupported ranks " + shape_str(av.dims) + " x " +
                         shape_str(bv.dims));
    }
    return {tp, oid};
}

// ---- conv2d (im2col + gemm) ----

// x [B,C,H,W], w [OC,C,KH,KW], optional bias [OC]; zero padding, square stride
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, int64_t stride,
                 int64_t pad) {
    Tape<T>* tp = same_tape(x, w);
    if (bias) same_tape(x, *bias);
    const Array<T>& xv = x.val();
    const Array<T>& wv = w.val();
    if (xv.ndim() != 4 || wv.ndim() != 4) throw ShapeError("conv2d expects rank-4 input and weight");
    const int64_t B = xv.dims[0], C = xv.dims[1], H = xv.dims[2], W = xv.dims[3];
    const int64_t OC = wv.dims[0], KH = wv.dims[2], KW = wv.dims[3];
    if (wv.dims[1] != C) throw ShapeError("conv2d channel mismatch");
    if (stride < 1) throw ConfigError("conv2d stride must be >= 1");
    const int64_t OH = (H + 2 * pad - KH) / stride + 1;
    const int64_t OW = (W + 2 * pad - KW) / stride + 1;
    if (OH < 1 || OW < 1) throw ShapeError("conv2d output would be empty");
    if (bias && (bias->val().ndim() != 1 || bias->val().dims[0] != OC))
        throw ShapeError("conv2d bias must have one value per output channel");

    const int64_t CKK = C * KH * KW;
    const int64_t P = OH * OW;
    auto cols = std::make_shared<std::vector<std::vector<T>>>(
        static_cast<size_t>(B), std::vector<T>(static_cast<size_t>(CKK * P)));
    Array<T> out = Array<T>::zeros({B, OC, OH, OW});
    for (int64_t b = 0; b < B; ++b) {
        T* col = (*cols)[static_cast<size_t>(b)].data();
        const T* src = xv.data() + b * C * H * W;
        for (int64_t c = 0; c < C; ++c)
            for (int64_t kh = 0; kh < KH; ++kh)
                for (int64_t kw = 0; kw < KW; ++kw) {
                    T* row = col + ((c * KH + kh) * KW + kw) * P;
                    for (int64_t oh = 0; oh < OH; ++oh) {
                        const int64_t ih = oh * stride - pad + kh;
                        for (int64_t ow = 0; ow < OW; ++ow) {
                            const int64_t iw = ow * stride - pad + kw;
                            row[oh * OW + ow] =
                                (ih >= 0 && ih < H && iw >= 0 && iw < W)
                                    ? src[(c * H + ih) * W + iw]
                                    : T(0);
                        }
                    }
                }
        gemm(wv.data(), col, out.data() + b * OC * P, OC, CKK, P);
    }
    if (bias) {
        const T* bb = bias->val().data();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t oc = 0; oc < OC; ++oc) {
                T* dst = out.data() + (b * OC + oc) * P;
                for (int64_t i = 0; i < P; ++i) dst[i] += bb[oc];
            }
    }
    const bool rg = tp->node_requires_grad(x.id) || tp->node_requires_grad(w.id) ||
                    (bias && tp->node_requires_grad(bias->id));
    int oid = tp->push(std::move(out), rg);
    if (rg) {
        const int bias_id = bias ? bias->id : -1;
        tp->set_backward(oid, [tp, oid, xid = x.id, wid = w.id, bias_id, cols, B, C, H, W, OC,
                               KH, KW, OH, OW, stride, pad]() {
            const Array<T>& g = tp->grad(Tensor<T>{tp, oid});
            const Array<T>& wv = tp->value(wid);
            const int64_t CKK = C * KH * KW;
            const int64_t P = OH * OW;
            Array<T> dw = Array<T>::zeros(wv.dims);
            Array<T> dx = Array<T>::zeros({B, C, H, W});
            std::vector<T> dcol(static_cast<size_t>(CKK * P));
            for (int64_t b = 0; b < B; ++b) {
                const T* gb = g.data() + b * OC * P;
                gemm(gb, (*cols)[static_cast<size_t>(b)].data(), dw.data(), OC, P, CKK, false,
                     true, true);
                if (tp->node_requires_grad(xid)) {
                    gemm(wv.data(), gb, dcol.data(), CKK, OC, P, true, false);
                    T* dst = dx.data() + b * C * H * W;
                    for (int64_t c = 0; c < C; ++c)
                        for (int64_t kh = 0; kh < KH; ++kh)
                            for (int64_t kw = 0; kw < KW; ++kw) {
                                const T* row = dcol.data() + ((c * KH + kh) * KW + kw) * P;
                                for (int64_t oh = 0; oh < OH; ++oh) {
                                    const int64_t ih = oh * stride - pad + kh;
                                    if (ih < 0 || ih >= H) continue;
                                    for (int64_t ow = 0; ow < OW; ++ow) {
                                        const int64_t iw = ow * stride - pad + kw;
                                        if (iw < 0 || iw >= W) continue;
                                        dst[(c * H + ih) * W + iw] += row[oh * OW + ow];
                                    }
                                }
                            }
                }
            }
            if (tp->node_requires_grad(xid)) tp->accum(xid, std::move(dx));
            tp->accum(wid, std::move(dw));
            if (bias_id >= 0 && tp->node_requires_grad(bias_id)) {
                Array<T> db = Array<T>::zeros({OC});
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t oc = 0; oc < OC; ++oc) {
                        const T* gs = g.data() + (b * OC + oc) * P;
                        T acc = T(0);
                        for (int64_t i = 0; i < P; ++i) acc += gs[i];
                        db.v[static_cast<size_t>(oc)] += acc;
                    }
                tp->accum(bias_id, std::move(db));
            }
        });
    }
    return {tp, oid};
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int64_t stride,
                 int64_t pad) {
    return conv2d(x, w, &bias, stride, pad);
}

// ---- normalization and attention pieces ----

// normalizes the last axis; gamma/beta shaped [D]
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
    Tape<T>* tp = same_tape(x, gamma);
    same_tape(x, beta);
    const Array<T>& xv = x.val();
    if (xv.ndim() < 1) throw ShapeError("layer_norm needs at least one axis");
    const int64_t D = xv.dims.back();
    if (gamma.val().dims != Shape{D} || beta.val().dims != Shape{D})
        throw ShapeError("layer_norm gamma/beta must be length-" + std::to_string(D) + " vectors");
    const int64_t rows = xv.numel() / D;
    auto mu = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    auto inv = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    Array<T> out = Array<T>::zeros(xv.dims);
    {
        const T* xp = xv.data();
        const T* gp = gamma.val().data();
        const T* bp = beta.val().data();
        T* op = out.data();
        for (int64_t r = 0; r < rows; ++r) {
            const T* row = xp + r * D;
            T m = T(0);
            for (int64_t i = 0; i < D; ++i) m += row[i];
            m /= static_cast<T>(D);
            T var = T(0);
            for (int64_t i = 0; i < D; ++i) {
                const T d = row[i] - m;
                var += d * d;
            }
            var /= static_cast<T>(D);
            const T is = T(1) / std::sqrt(var + eps);
            (*mu)[static_cast<size_t>(r)] = m;
            (*inv)[static_cast<size_t>(r)] = is;
            T* orow = op + r * D;
            for (int64_t i = 0; i < D; ++i) orow[i] = (row[i] - m) * is * gp[i] + bp[i];
        }
    }
    const bool rg = tp->node_requires_grad(x.id) || tp->node_requires_grad(gamma.id) ||
                    tp->node_requires_grad(beta.id);
    int oid = tp->push(std::move(out), rg);
    if (rg) {
        tp->set_backward(oid, [tp, oid, xid = x.id, gid = gamma.id, bid = beta.id, mu, inv, rows,
                               D]() {
            const Array<T>& g = tp->grad(Tensor<T>{tp, oid});
            const Array<T>& xv = tp->value(xid);
            const Array<T>& gv = tp->value(gid);
            Array<T> dx = Array<T>::zeros(xv.dims);
            Array<T> dgamma = Array<T>::zeros({D});
            Array<T> dbeta = Array<T>::zeros({D});
            const T* xp = xv.data();
            const T* gp = gv.data();
            const T* gyp = g.data();
            for (int64_t r = 0; r < rows; ++r) {
                const T m = (*mu)[static_cast<size_t>(r)];
                const T is = (*inv)[static_cast<size_t>(r)];
                const T* row = xp + r * D;
                const T* gy = gyp + r * D;
                T s1 = T(0), s2 = T(0);
                for (int64_t i = 0; i < D; ++i) {
                    const T xhat = (row[i] - m) * is;
                    const T dxh = gy[i] * gp[i];
                    dgamma.v[static_cast<size_t>(i)] += gy[i] * xhat;
                    dbeta.v[static_cast<size_t>(i)] += gy[i];
                    s1 += dxh;
                    s2 += dxh * xhat;
                }
                s1 /= static_cast<T>(D);
                s2 /= static_cast<T>(D);
                T* dst = dx.data() + r * D;
                for (int64_t i = 0; i < D; ++i) {
                    const T xhat = (row[i] - m) * is;
                    dst[i] = is * (gy[i] * gp[i] - s1 - xhat * s2);
                }
            }
            tp->accum(xid, std::move(dx));
            tp->accum(gid, std::move(dgamma));
            tp->accum(bid, std::move(dbeta));
        });
    }
    return {tp, oid};
}

// softmax along the last axis
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
    Tape<T>* tp = x.tape;
    const Array<T>& xv = x.val();
    if (xv.ndim() < 1) throw ShapeError("softmax needs at least one axis");
    const int64_t D = xv.dims.back();
    const int64_t rows = xv.numel() / D;
    Array<T> out = Array<T>::zeros(xv.dims);
    {
        const T* xp = xv.data();
        T* op = out.data();
        for (int64_t r = 0; r < rows; ++r) {
            const T* row = xp + r * D;
            T mx = row[0];
            for (int64_t i = 1; i < D; ++i) mx = std::max(mx, row[i]);
            T z = T(0);
            T* orow = op + r * D;
            for (int64_t i = 0; i < D; ++i) {
                orow[i] = std::exp(row[i] - mx);
                z += orow[i];
            }
            for (int64_t i = 0; i < D; ++i) orow[i] /= z;
        }
    }
    const bool rg = tp->node_requires_grad(x.id);
    int oid = tp->push(std::move(out), rg);
    if (rg) {
        tp->set_backward(oid, [tp, oid, xid = x.id, rows, D]() {
            const Array<T>& g = tp->grad(Tensor<T>{tp, oid});
            const Array<T>& y = tp->value(oid);
            Array<T> dx = Array<T>::zeros(y.dims);
            for (int64_t r = 0; r < rows; ++r) {
                const T* yr = y.data() + r * D;
                const T* gr = g.data() + r * D;
                T dot = T(0);
                for (int64_t i = 0; i < D; ++i) dot += yr[i] * gr[i];
                T* dst = dx.data() + r * D;
                for (int64_t i = 0; i < D; ++i) dst[i] = yr[i] * (gr[i] - dot);
            }
            tp->accum(xid, std::move(dx));
        });
    }
    return {tp, oid};
}

// ---- fused losses ----

// mean cross-entropy of row-wise softmax(logits [B,C]) against integer targets;
// backward is the closed form (softmax - onehot) / B
template <typename T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, const std::vector<int64_t>& targets) {
    Tape<T>* tp = logits.tape;
    const Array<T>& lv = logits.val();
    if (lv.ndim() != 2) throw ShapeError("cross_entropy_logits expects [batch, classes]");
    const int64_t B = lv.dims[0], C = lv.dims[1];
    if (static_cast<int64_t>(targets.size()) != B)
        throw ShapeError("cross_entropy_logits needs one target per row");
    for (int64_t t : targets)
        if (t < 0 || t >= C) throw IndexError("cross_entropy_logits target out of range");
    auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(B * C));
    T loss = T(0);
    {
        const T* lp = lv.data();
        for (int64_t b = 0; b < B; ++b) {
            const T* row = lp + b * C;
            T mx = row[0];
            for (int64_t i = 1; i < C; ++i) mx = std::max(mx, row[i]);
            T z = T(0);
            T* pr = probs->data() + b * C;
            for (int64_t i = 0; i < C; ++i) {
                pr[i] = std::exp(row[i] - mx);
                z += pr[i];
            }
            for (int64_t i = 0; i < C; ++i) pr[i] /= z;
            loss += mx + std::log(z) - row[targets[static_cast<size_t>(b)]];
        }
        loss /= static_cast<T>(B);
    }
    const bool rg = tp->node_requires_grad(logits.id);
    int oid = tp->push(Array<T>::scalar(loss), rg);
    if (rg) {
        tp->set_backward(oid, [tp, oid, lid = logits.id, probs, targets, B, C]() {
            const T gs = tp->grad(Tensor<T>{tp, oid}).v[0];
            Array<T> dl = Array<T>::zeros({B, C});
            const T f = gs / static_cast<T>(B);
            for (int64_t b = 0; b < B; ++b) {
                const T* pr = probs->data() + b * C;
                T* dst = dl.data() + b * C;
                for (int64_t i = 0; i < C; ++i) dst[i] = pr[i] * f;
                dst[targets[static_cast<size_t>(b)]] -= f;
            }
            tp->accum(lid, std::move(dl));
        });
    }
    return {tp, oid};
}

// mean squared error over masked tokens only. pred [..., D]; token_mask flags
// one entry per leading row (numel/D); target is a constant
template <typename T>
Tensor<T> masked_mse(const Tensor<T>& pred, const Array<T>& target,
                     const std::vector<uint8_t>& token_mask) {
    Tape<T>* tp = pred.tape;
    const Array<T>& pv = pred.val();
    if (pv.dims != target.dims)
        throw ShapeError("masked_mse target shape " + shape_str(target.dims) +
                         " does not match prediction " + shape_str(pv.dims));
    if (pv.ndim() < 1) throw ShapeError("masked_mse needs at least one axis");
    const int64_t D = pv.dims.back();
    const int64_t rows = pv.numel() / D;
    if (static_cast<int64_t>(token_mask.size()) != rows)
        throw ShapeError("masked_mse needs one mask flag per token row");
    int64_t masked_rows = 0;
    for (uint8_t m : token_mask) masked_rows += m ? 1 : 0;
    if (masked_rows == 0) throw InvalidInputError("masked_mse requires at least one masked token");
    const int64_t count = masked_rows * D;
    T loss = T(0);
    {
        const T* pp = pv.data();
        const T* tt = target.data();
        for (int64_t r = 0; r < rows; ++r) {
            if (!token_mask[static_cast<size_t>(r)]) continue;
            for (int64_t i = 0; i < D; ++i) {
                const T d = pp[r * D + i] - tt[r * D + i];
                loss += d * d;
            }
        }
        loss /= static_cast<T>(count);
    }
    const bool rg = tp->node_requires_grad(pred.id);
    int oid = tp->push(Array<T>::scalar(loss), rg);
    if (rg) {
        auto tgt = std::make_shared<Array<T>>(target);
        tp->set_backward(oid, [tp, oid, pid = pred.id, tgt, token_mask, rows, D, count]() {
            const T gs = tp->grad(Tensor<T>{tp, oid}).v[0];
            const Array<T>& pv = tp->value(pid);
            Array<T> dp = Array<T>::zeros(pv.dims);
            const T f = T(2) * gs / static_cast<T>(count);
            for (int64_t r = 0; r < rows; ++r) {
                if (!token_mask[static_cast<size_t>(r)]) continue;
                for (int64_t i = 0; i < D; ++i)
                    dp.v[static_cast<size_t>(r * D + i)] =
                        f * (pv.v[static_cast<size_t>(r * D + i)] -
                             tgt->v[static_cast<size_t>(r * D + i)]);
            }
            tp->accum(pid, std::move(dp));
        });
    }
    return {tp, oid};
}

// ---- optimizer ----

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
void adam_step(ParamStore<T>& ps, const std::map<std::string, Array<T>>& grads,
               const AdamConfig& cfg) {
    for (const auto& [name, g] : grads) {
        Array<T>& w = ps.at(name);
        if (g.dims != w.dims)
            throw ShapeError("gradient shape mismatch for parameter '" + name + "'");
        for (T v : g.v)
            if (!std::isfinite(static_cast<double>(v)))
                throw TrainingError("non-finite gradient for parameter '" + name + "'");
        AdamSlot<T>& s = ps.slot(name);
        s.t += 1;
        const T bc1 = T(1) - static_cast<T>(std::pow(cfg.beta1, static_cast<double>(s.t)));
        const T bc2 = T(1) - static_cast<T>(std::pow(cfg.beta2, static_cast<double>(s.t)));
        const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
        const T lr = static_cast<T>(cfg.lr), eps = static_cast<T>(cfg.eps);
        const int64_t n = w.numel();
        for (int64_t i = 0; i < n; ++i) {
            const size_t j = static_cast<size_t>(i);
            s.m.v[j] = b1 * s.m.v[j] + (T(1) - b1) * g.v[j];
            s.v.v[j] = b2 * s.v.v[j] + (T(1) - b2) * g.v[j] * g.v[j];
            const T mhat = s.m.v[j] / bc1;
            const T vhat = s.v.v[j] / bc2;
            w.v[j] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

// ---- finite-difference checker ----

// build(tape, leaves) must return a scalar loss. Returns the max relative
// error between analytic and central-difference gradients over all inputs.
template <typename T, typename Builder>
double grad_check(Builder&& build, const std::vector<Array<T>*>& xs, T fd_eps) {
    std::vector<Array<T>> analytic;
    {
        Tape<T> tp;
        std::vector<Tensor<T>> leaves;
        leaves.reserve(xs.size());
        for (Array<T>* x : xs) leaves.push_back(tp.input(*x, true));
        Tensor<T> loss = build(tp, leaves);
        tp.backward(loss);
        for (const Tensor<T>& l : leaves) analytic.push_back(tp.grad_or_zeros(l));
    }
    auto eval = [&]() -> T {
        Tape<T> tp;
        std::vector<Tensor<T>> leaves;
        leaves.reserve(xs.size());
        for (Array<T>* x : xs) leaves.push_back(tp.input(*x, false));
        return build(tp, leaves).val().v[0];
    };
    double worst = 0.0;
    for (size_t k = 0; k < xs.size(); ++k) {
        Array<T>& x = *xs[k];
        for (size_t i = 0; i < x.v.size(); ++i) {
            const T x0 = x.v[i];
            const T h = fd_eps * std::max(T(1), std::abs(x0));
            x.v[i] = x0 + h;
            const T fp = eval();
            x.v[i] = x0 - h;
            const T fm = eval();
            x.v[i] = x0;
            const double num = static_cast<double>(fp - fm) / (2.0 * static_cast<double>(h));
            const double ana = static_cast<double>(analytic[k].v[i]);
            const double rel =
                std::abs(ana - num) / std::max({1.0, std::abs(ana), std::abs(num)});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace opera::ad
