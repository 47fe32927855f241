#include "mdan/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "mdan/errors.hpp"

namespace mdan {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

void check_positive_extents(const Shape& shape, const char* op) {
    for (std::size_t e : shape) {
        if (e == 0) {
            throw ShapeError(std::string(op) + ": zero extent in shape " + shape_str(shape));
        }
    }
}

NodePtr make_node(Shape shape, std::vector<double> data, const char* op,
                  std::vector<NodePtr> parents) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->op = op;
    bool rg = false;
    for (const auto& p : parents) rg = rg || (p && p->requires_grad);
    n->requires_grad = rg;
    if (rg) n->parents = std::move(parents);
    return n;
}

}  // namespace

// --- Tensor ----------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("tensor: shape " + shape_str(shape) + " does not match data length " +
                         std::to_string(data.size()));
    }
    check_positive_extents(shape, "tensor");
    n_ = std::make_shared<detail::Node>();
    n_->shape = std::move(shape);
    n_->data = std::move(data);
    n_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(Shape{1}, {value}, requires_grad);
}

Tensor Tensor::wrap(std::shared_ptr<detail::Node> n) {
    Tensor t;
    t.n_ = std::move(n);
    return t;
}

const Shape& Tensor::shape() const {
    if (!n_) throw ContractError("tensor: undefined");
    return n_->shape;
}

std::size_t Tensor::size() const { return n_ ? n_->data.size() : 0; }

const std::vector<double>& Tensor::values() const {
    if (!n_) throw ContractError("tensor: undefined");
    return n_->data;
}

std::vector<double>& Tensor::mutable_values() {
    if (!n_) throw ContractError("tensor: undefined");
    return n_->data;
}

bool Tensor::requires_grad() const { return n_ && n_->requires_grad; }

bool Tensor::has_grad() const { return n_ && !n_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
    if (!has_grad()) throw ContractError("tensor: no gradient present");
    return n_->grad;
}

void Tensor::zero_grad() {
    if (n_) n_->grad.clear();
}

double Tensor::item() const {
    if (size() != 1) throw ContractError("item: tensor " + shape_str(shape()) + " is not scalar");
    return values()[0];
}

// --- backward ---------------------------------------------------------------

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw ContractError("backward: loss must be a scalar tensor");
    }
    Node* root = loss.node();
    if (!root->requires_grad) return;

    // Post-order DFS for topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    std::unordered_map<Node*, std::vector<double>> grads;
    grads[root] = {1.0};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        auto git = grads.find(node);
        if (git == grads.end()) continue;
        const std::vector<double>& g = git->second;
        if (node->backward) {
            std::vector<std::vector<double>*> pg(node->parents.size(), nullptr);
            for (std::size_t i = 0; i < node->parents.size(); ++i) {
                Node* p = node->parents[i].get();
                if (!p || !p->requires_grad) continue;
                auto& buf = grads[p];
                if (buf.empty()) buf.assign(p->size(), 0.0);
                pg[i] = &buf;
            }
            node->backward(g, pg);
        }
    }
    for (auto& [node, g] : grads) {
        if (!node->requires_grad) continue;
        if (node->grad.empty()) node->grad.assign(node->size(), 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) node->grad[i] += g[i];
    }
}

// --- matmul -----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(m * n, 0.0);
    const double* ad = a.values().data();
    const double* bd = b.values().data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ad[i * k + p];
            const double* brow = bd + p * n;
            double* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    auto node = make_node({m, n}, std::move(out), "matmul", {a.node_ptr(), b.node_ptr()});
    if (node->requires_grad) {
        NodePtr an = a.node_ptr(), bn = b.node_ptr();
        node->backward = [an, bn, m, k, n](const std::vector<double>& g,
                                           const std::vector<std::vector<double>*>& pg) {
            if (pg[0]) {  // dA = g . B^T
                std::vector<double>& da = *pg[0];
                const double* bd = bn->data.data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const double gv = g[i * n + j];
                        if (gv == 0.0) continue;
                        for (std::size_t p = 0; p < k; ++p) da[i * k + p] += gv * bd[p * n + j];
                    }
            }
            if (pg[1]) {  // dB = A^T . g
                std::vector<double>& db = *pg[1];
                const double* ad = an->data.data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const double av = ad[i * k + p];
                        if (av == 0.0) continue;
                        for (std::size_t j = 0; j < n; ++j) db[p * n + j] += av * g[i * n + j];
                    }
            }
        };
    }
    return Tensor::wrap(node);
}

// --- conv2d -----------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
    if (x.rank() != 3 || w.rank() != 4) {
        throw ShapeError("conv2d: expected x[C,H,W], w[O,C,k,k], got " + shape_str(x.shape()) +
                         " and " + shape_str(w.shape()));
    }
    const std::size_t cin = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
    const std::size_t cout = w.shape()[0], k = w.shape()[2];
    if (w.shape()[1] != cin || w.shape()[3] != k) {
        throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " does not match input " +
                         shape_str(x.shape()));
    }
    if (k != 1 && k != 3) throw ContractError("conv2d: kernel size must be 1 or 3");
    if (stride < 1 || pad < 0) throw ContractError("conv2d: invalid stride/pad");
    const long hnum = static_cast<long>(h) + 2 * pad - static_cast<long>(k);
    const long wnum = static_cast<long>(wd) + 2 * pad - static_cast<long>(k);
    if (hnum < 0 || wnum < 0) {
        throw ShapeError("conv2d: kernel exceeds padded input " + shape_str(x.shape()) +
                         " (kernel " + std::to_string(k) + ", pad " + std::to_string(pad) + ")");
    }
    const std::size_t ho = static_cast<std::size_t>(hnum / stride) + 1;
    const std::size_t wo = static_cast<std::size_t>(wnum / stride) + 1;

    std::vector<double> out(cout * ho * wo, 0.0);
    const double* xd = x.values().data();
    const double* wv = w.values().data();
    for (std::size_t oc = 0; oc < cout; ++oc) {
        double* oplane = out.data() + oc * ho * wo;
        for (std::size_t ic = 0; ic < cin; ++ic) {
            const double* xplane = xd + ic * h * wd;
            const double* kern = wv + (oc * cin + ic) * k * k;
            for (std::size_t kh = 0; kh < k; ++kh) {
                for (std::size_t kw = 0; kw < k; ++kw) {
                    const double kv = kern[kh * k + kw];
                    if (kv == 0.0) continue;
                    for (std::size_t oh = 0; oh < ho; ++oh) {
                        const long ih = static_cast<long>(oh) * stride - pad + static_cast<long>(kh);
                        if (ih < 0 || ih >= static_cast<long>(h)) continue;
                        const double* xrow = xplane + ih * wd;
                        double* orow = oplane + oh * wo;
                        for (std::size_t ow = 0; ow < wo; ++ow) {
                            const long iw =
                                static_cast<long>(ow) * stride - pad + static_cast<long>(kw);
                            if (iw < 0 || iw >= static_cast<long>(wd)) continue;
                            orow[ow] += kv * xrow[iw];
                        }
                    }
                }
            }
        }
    }

    auto node = make_node({cout, ho, wo}, std::move(out), "conv2d", {x.node_ptr(), w.node_ptr()});
    if (node->requires_grad) {
        NodePtr xn = x.node_ptr(), wn = w.node_ptr();
        const std::size_t s = static_cast<std::size_t>(stride);
        node->backward = [xn, wn, cin, cout, h, wd, k, s, pad, ho, wo](
                             const std::vector<double>& g,
                             const std::vector<std::vector<double>*>& pg) {
            const double* xd = xn->data.data();
            const double* wv = wn->data.data();
            for (std::size_t oc = 0; oc < cout; ++oc) {
                const double* gplane = g.data() + oc * ho * wo;
                for (std::size_t ic = 0; ic < cin; ++ic) {
                    const double* xplane = xd + ic * h * wd;
                    const double* kern = wv + (oc * cin + ic) * k * k;
                    double* dx = pg[0] ? pg[0]->data() + ic * h * wd : nullptr;
                    double* dw = pg[1] ? pg[1]->data() + (oc * cin + ic) * k * k : nullptr;
                    for (std::size_t kh = 0; kh < k; ++kh) {
                        for (std::size_t kw = 0; kw < k; ++kw) {
                            const double kv = kern[kh * k + kw];
                            double dwacc = 0.0;
                            for (std::size_t oh = 0; oh < ho; ++oh) {
                                const long ih =
                                    static_cast<long>(oh * s) - pad + static_cast<long>(kh);
                                if (ih < 0 || ih >= static_cast<long>(h)) continue;
                                const double* grow = gplane + oh * wo;
                                const double* xrow = xplane + ih * wd;
                                double* dxrow = dx ? dx + ih * wd : nullptr;
                                for (std::size_t ow = 0; ow < wo; ++ow) {
                                    const long iw =
                                        static_cast<long>(ow * s) - pad + static_cast<long>(kw);
                                    if (iw < 0 || iw >= static_cast<long>(wd)) continue;
                                    const double gv = grow[ow];
                                    if (dxrow) dxrow[iw] += kv * gv;
                                    dwacc += xrow[iw] * gv;
                                }
                            }
                            if (dw) dw[kh * k + kw] += dwacc;
                        }
                    }
                }
            }
        };
    }
    return Tensor::wrap(node);
}

// --- bilinear upsample -------------------------------------------------------

namespace {

// Half-pixel-center source taps for a 2x upsample of an extent-n axis.
struct Tap {
    std::size_t lo, hi;
    double wlo, whi;
};

std::vector<Tap> upsample_taps(std::size_t n) {
    std::vector<Tap> taps(2 * n);
    for (std::size_t i = 0; i < 2 * n; ++i) {
        const double u = (static_cast<double>(i) + 0.5) / 2.0 - 0.5;
        const double f = std::floor(u);
        const double t = u - f;
        long lo = static_cast<long>(f);
        long hi = lo + 1;
        lo = std::clamp(lo, 0L, static_cast<long>(n) - 1);
        hi = std::clamp(hi, 0L, static_cast<long>(n) - 1);
        taps[i] = {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi), 1.0 - t, t};
    }
    return taps;
}

}  // namespace

Tensor upsample_bilinear_2x(const Tensor& x) {
    if (x.rank() != 3) {
        throw ShapeError("upsample_bilinear_2x: expected [C,H,W], got " + shape_str(x.shape()));
    }
    const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    const auto rt = upsample_taps(h);
    const auto ct = upsample_taps(w);
    const std::size_t ho = 2 * h, wo = 2 * w;
    std::vector<double> out(c * ho * wo);
    const double* xd = x.values().data();
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double* xplane = xd + ch * h * w;
        double* oplane = out.data() + ch * ho * wo;
        for (std::size_t i = 0; i < ho; ++i) {
            const Tap& r = rt[i];
            const double* rlo = xplane + r.lo * w;
            const double* rhi = xplane + r.hi * w;
            double* orow = oplane + i * wo;
            for (std::size_t j = 0; j < wo; ++j) {
                const Tap& cc = ct[j];
                orow[j] = r.wlo * (cc.wlo * rlo[cc.lo] + cc.whi * rlo[cc.hi]) +
                          r.whi * (cc.wlo * rhi[cc.lo] + cc.whi * rhi[cc.hi]);
            }
        }
    }
    auto node = make_node({c, ho, wo}, std::move(out), "upsample_bilinear_2x", {x.node_ptr()});
    if (node->requires_grad) {
        node->backward = [c, h, w, ho, wo, rt, ct](const std::vector<double>& g,
                                                   const std::vector<std::vector<double>*>& pg) {
            if (!pg[0]) return;
            double* dx = pg[0]->data();
            for (std::size_t ch = 0; ch < c; ++ch) {
                double* dplane = dx + ch * h * w;
                const double* gplane = g.data() + ch * ho * wo;
                for (std::size_t i = 0; i < ho; ++i) {
                    const Tap& r = rt[i];
                    for (std::size_t j = 0; j < wo; ++j) {
                        const Tap& cc = ct[j];
                        const double gv = gplane[i * wo + j];
                        dplane[r.lo * w + cc.lo] += r.wlo * cc.wlo * gv;
                        dplane[r.lo * w + cc.hi] += r.wlo * cc.whi * gv;
                        dplane[r.hi * w + cc.lo] += r.whi * cc.wlo * gv;
                        dplane[r.hi * w + cc.hi] += r.whi * cc.whi * gv;
                    }
                }
            }
        };
    }
    return Tensor::wrap(node);
}

// --- softmax -----------------------------------------------------------------

Tensor softmax_lastdim(const Tensor& x) {
    if (x.rank() < 1) throw ShapeError("softmax_lastdim: rank-0 input");
    const std::size_t l = x.shape().back();
    const std::size_t rows = x.size() / l;
    std::vector<double> out(x.size());
    const double* xd = x.values().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xd + r * l;
        double* orow = out.data() + r * l;
        double mx = row[0];
        for (std::size_t i = 1; i < l; ++i) mx = std::max(mx, row[i]);
        double denom = 0.0;
        for (std::size_t i = 0; i < l; ++i) {
            orow[i] = std::exp(row[i] - mx);
            denom += orow[i];
        }
        for (std::size_t i = 0; i < l; ++i) orow[i] /= denom;
    }
    auto node = make_node(x.shape(), std::move(out), "softmax_lastdim", {x.node_ptr()});
    if (node->requires_grad) {
        Node* self = node.get();
        node->backward = [self, l, rows](const std::vector<double>& g,
                                         const std::vector<std::vector<double>*>& pg) {
            if (!pg[0]) return;
            double* dx = pg[0]->data();
            const double* s = self->data.data();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* srow = s + r * l;
                const double* grow = g.data() + r * l;
                double dot = 0.0;
                for (std::size_t i = 0; i < l; ++i) dot += srow[i] * grow[i];
                for (std::size_t i = 0; i < l; ++i) dx[r * l + i] += srow[i] * (grow[i] - dot);
            }
        };
    }
    return Tensor::wrap(node);
}

// --- global average pool -------------------------------------------------------

Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 3) {
        throw ShapeError("global_avg_pool: expected [C,H,W], got " + shape_str(x.shape()));
    }
    const std::size_t c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
    std::vector<double> out(c, 0.0);
    const double* xd = x.values().data();
    for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (std::size_t i = 0; i < hw; ++i) acc += xd[ch * hw + i];
        out[ch] = acc / static_cast<double>(hw);
    }
    auto node = make_node({c}, std::move(out), "global_avg_pool", {x.node_ptr()});
    if (node->requires_grad) {
        node->backward = [c, hw](const std::vector<double>& g,
                                 const std::vector<std::vector<double>*>& pg) {
            if (!pg[0]) return;
            double* dx = pg[0]->data();
            const double inv = 1.0 / static_cast<double>(hw);
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double gv = g[ch] * inv;
                for (std::size_t i = 0; i < hw; ++i) dx[ch * hw + i] += gv;
            }
        };
    }
    return Tensor::wrap(node);
}

// --- elementwise -----------------------------------------------------------

namespace {

enum class BinKind { Add, Mul, Max };

// Broadcast layout for binary elementwise ops: either equal shapes or a
// [1,H,W] map against [C,H,W].
struct BinLayout {
    bool a_broadcast = false;
    bool b_broadcast = false;
    std::size_t channels = 1;
    std::size_t plane = 0;  // elements per channel
};

BinLayout bin_layout(const Tensor& a, const Tensor& b, const char* op) {
    BinLayout lo;
    if (a.shape() == b.shape()) {
        lo.plane = a.size();
        return lo;
    }
    auto is_map_over = [](const Shape& map, const Shape& full) {
        return map.size() == 3 && full.size() == 3 && map[0] == 1 && map[1] == full[1] &&
               map[2] == full[2];
    };
    if (is_map_over(a.shape(), b.shape())) {
        lo.a_broadcast = true;
        lo.channels = b.shape()[0];
        lo.plane = b.shape()[1] * b.shape()[2];
        return lo;
    }
    if (is_map_over(b.shape(), a.shape())) {
        lo.b_broadcast = true;
        lo.channels = a.shape()[0];
        lo.plane = a.shape()[1] * a.shape()[2];
        return lo;
    }
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
}

Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind, const char* op) {
    const BinLayout lo = bin_layout(a, b, op);
    const Shape& oshape = lo.a_broadcast ? b.shape() : a.shape();
    std::vector<double> out(shape_numel(oshape));
    const double* ad = a.values().data();
    const double* bd = b.values().data();
    for (std::size_t ch = 0; ch < lo.channels; ++ch) {
        for (std::size_t i = 0; i < lo.plane; ++i) {
            const double av = ad[(lo.a_broadcast ? 0 : ch) * lo.plane + i];
            const double bv = bd[(lo.b_broadcast ? 0 : ch) * lo.plane + i];
            double v = 0.0;
            switch (kind) {
                case BinKind::Add: v = av + bv; break;
                case BinKind::Mul: v = av * bv; break;
                case BinKind::Max: v = std::max(av, bv); break;
            }
            out[ch * lo.plane + i] = v;
        }
    }
    auto node = make_node(oshape, std::move(out), op, {a.node_ptr(), b.node_ptr()});
    if (node->requires_grad) {
        NodePtr an = a.node_ptr(), bn = b.node_ptr();
        node->backward = [an, bn, lo, kind](const std::vector<double>& g,
                                            const std::vector<std::vector<double>*>& pg) {
            const double* ad = an->data.data();
            const double* bd = bn->data.data();
            for (std::size_t ch = 0; ch < lo.channels; ++ch) {
                for (std::size_t i = 0; i < lo.plane; ++i) {
                    const std::size_t ia = (lo.a_broadcast ? 0 : ch) * lo.plane + i;
                    const std::size_t ib = (lo.b_broadcast ? 0 : ch) * lo.plane + i;
                    const double gv = g[ch * lo.plane + i];
                    switch (kind) {
                        case BinKind::Add:
                            if (pg[0]) (*pg[0])[ia] += gv;
                            if (pg[1]) (*pg[1])[ib] += gv;
                            break;
                        case BinKind::Mul:
                            if (pg[0]) (*pg[0])[ia] += gv * bd[ib];
                            if (pg[1]) (*pg[1])[ib] += gv * ad[ia];
                            break;
                        case BinKind::Max:
                            // ties resolve to the first operand
                            if (ad[ia] >= bd[ib]) {
                                if (pg[0]) (*pg[0])[ia] += gv;
                            } else if (pg[1]) {
                                (*pg[1])[ib] += gv;
                            }
                            break;
                    }
                }
            }
        };
    }
    return Tensor::wrap(node);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Add, "add"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Mul, "mul"); }
Tensor ewise_max(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, BinKind::Max, "ewise_max");
}

Tensor relu(const Tensor& x) {
    std::vector<double> out(x.size());
    const double* xd = x.values().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > 0.0 ? xd[i] : 0.0;
    auto node = make_node(x.shape(), std::move(out), "relu", {x.node_ptr()});
    if (node->requires_grad) {
        NodePtr xn = x.node_ptr();
        node->backward = [xn](const std::vector<double>& g,
                              const std::vector<std::vector<double>*>& pg) {
            if (!pg[0]) return;
            const double* xd = xn->data.data();
            double* dx = pg[0]->data();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (xd[i] > 0.0) dx[i] += g[i];
        };
    }
    return Tensor::wrap(node);
}

Tensor scale(const Tensor& x, double s) {
    std::vector<double> out(x.size());
    const double* xd = x.values().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * xd[i];
    auto node = make_node(x.shape(), std::move(out), "scale", {x.node_ptr()});
    if (node->requires_grad) {
        node->backward = [s](const std::vector<double>& g,
                             const std::vector<std::vector<double>*>& pg) {
            if (!pg[0]) return;
            double* dx = pg[0]->data();
            for (std::size_t i = 0; i < g.size(); ++i) dx[i] += s * g[i];
        };
    }
    return Tensor::wrap(node);
}

Tensor add_scalar(const Tensor& x, double s) {
    std::vector<double> out(x.size());
    const double* xd = x.values().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] + s;
    auto node = make_node(x.shape(), std::move(out), "add_scalar", {x.node_ptr()});
    if (node->requires_grad) {
        node->backward = [](const std::vector<double>& g,
                            const std::vector<std::vector<double>*>& pg) {
            if (!pg[0]) return;
            double* dx = pg[0]->data();
            for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
        };
    }
    return Tensor::wrap(node);
}

Tensor sub_broadcast_scalar(const Tensor& x, const Tensor& s) {
    if (s.size() != 1) throw ShapeError("sub_broadcast_scalar: s must be scalar");
    const double sv = s.values()[0];
    std::vector<double> out(x.size());
    const double* xd = x.values().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] - sv;
    auto node =
        make_node(x.shape(), std::move(out), "sub_broadcast_scalar", {x.node_ptr(), s.node_ptr()});
    if (node->requires_grad) {
        node->backward = [](const std::vector<double>& g,
                            const std::vector<std::vector<double>*>& pg) {
            if (pg[0]) {
                double* dx = pg[0]->data();
                for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
            }
            if (pg[1]) {
                double acc = 0.0;
                for (double gv : g) acc += gv;
                (*pg[1])[0] -= acc;
            }
        };
    }
    return Tensor::wrap(node);
}

Tensor div_broadcast_scalar(const Tensor& x, const Tensor& s) {
    if (s.size() != 1) throw ShapeError("div_broadcast_scalar: s must be scalar");
    const double sv = s.values()[0];
    if (sv == 0.0) throw NumericError("div_broadcast_scalar: division by zero");
    std::vector<double> out(x.size());
    const double* xd = x.values().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] / sv;
    auto node =
        make_node(x.shape(), std::move(out), "div_broadcast_scalar", {x.node_ptr(), s.node_ptr()});
    if (node->requires_grad) {
        NodePtr xn = x.node_ptr();
        node->backward = [xn, sv](const std::vector<double>& g,
                                  const std::vector<std::vector<double>*>& pg) {
            const double inv = 1.0 / sv;
            if (pg[0]) {
                double* dx = pg[0]->data();
                for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * inv;
            }
            if (pg[1]) {
                const double* xd = xn->data.data();
                double acc = 0.0;
                for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xd[i];
                (*pg[1])[0] -= acc * inv * inv;
            }
        };
    }
    return Tensor::wrap(node);
}

namespace {

Tensor reduce_extremum(const Tensor& x, bool want_max) {
    std::size_t arg = 0;
    const double* xd = x.values().data();
    for (std::size_t i = 1; i < x.size(); ++i) {
        if (want_max ? xd[i] > xd[arg] : xd[i] < xd[arg]) arg = i;
    }
    auto node = make_node({1}, {xd[arg]}, want_max ? "reduce_max" : "reduce_min", {x.node_ptr()});
    if (node->requires_grad) {
        node->backward = [arg](const std::vector<double>& g,
                               const std::vector<std::vector<double>*>& pg) {
            if (pg[0]) (*pg[0])[arg] += g[0];
        };
    }
    return Tensor::wrap(node);
}

}  // namespace

Tensor reduce_min(const Tensor& x) { return reduce_extremum(x, false); }
Tensor reduce_max(const Tensor& x) { return reduce_extremum(x, true); }

// --- data movement -----------------------------------------------------------

Tensor concat_lastdim(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_lastdim: no inputs");
    Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
    std::size_t total_last = 0;
    for (const auto& p : parts) {
        if (p.rank() != parts[0].rank() ||
            !std::equal(lead.begin(), lead.end(), p.shape().begin())) {
            throw ShapeError("concat_lastdim: leading extents differ: " +
                             shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        }
        total_last += p.shape().back();
    }
    Shape oshape = lead;
    oshape.push_back(total_last);
    const std::size_t rows = shape_numel(lead);
    std::vector<double> out(rows * total_last);
    std::vector<std::size_t> offsets(parts.size());
    {
        std::size_t off = 0;
        for (std::size_t pi = 0; pi < parts.size(); ++pi) {
            offsets[pi] = off;
            const std::size_t l = parts[pi].shape().back();
            const double* pd = parts[pi].values().data();
            for (std::size_t r = 0; r < rows; ++r) {
                std::copy(pd + r * l, pd + (r + 1) * l, out.data() + r * total_last + off);
            }
            off += l;
        }
    }
    std::vector<NodePtr> pnodes;
    pnodes.reserve(parts.size());
    for (const auto& p : parts) pnodes.push_back(p.node_ptr());
    std::vector<std::size_t> lasts;
    for (const auto& p : parts) lasts.push_back(p.shape().back());
    auto node = make_node(std::move(oshape), std::move(out), "concat_lastdim", std::move(pnodes));
    if (node->requires_grad) {
        node->backward = [rows, total_last, offsets, lasts](
                             const std::vector<double>& g,
                             const std::vector<std::vector<double>*>& pg) {
            for (std::size_t pi = 0; pi < pg.size(); ++pi) {
                if (!pg[pi]) continue;
                double* dp = pg[pi]->data();
                const std::size_t l = lasts[pi];
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t i = 0; i < l; ++i)
                        dp[r * l + i] += g[r * total_last + offsets[pi] + i];
            }
        };
    }
    return Tensor::wrap(node);
}

Tensor slice_lastdim(const Tensor& x, std::size_t start, std::size_t len) {
    const std::size_t last = x.shape().back();
    if (len == 0 || start + len > last) {
        throw ShapeError("slice_lastdim: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") exceeds extent " + std::to_string(last));
    }
    Shape oshape(x.shape().begin(), x.shape().end() - 1);
    oshape.push_back(len);
    const std::size_t rows = x.size() / last;
    std::vector<double> out(rows * len);
    const double* xd = x.values().data();
    for (std::size_t r = 0; r < rows; ++r)
        std::copy(xd + r * last + start, xd + r * last + start + len, out.data() + r * len);
    auto node = make_node(std::move(oshape), std::move(out), "slice_lastdim", {x.node_ptr()});
    if (node->requires_grad) {
        node->backward = [rows, last, start, len](const std::vector<double>& g,
                                                  const std::vector<std::vector<double>*>& pg) {
            if (!pg[0]) return;
            double* dx = pg[0]->data();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t i = 0; i < len; ++i) dx[r * last + start + i] += g[r * len + i];
        };
    }
    return Tensor::wrap(node);
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.size()) {
        throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape) +
                         " changes element count");
    }
    check_positive_extents(shape, "reshape");
    auto node = make_node(std::move(shape), x.values(), "reshape", {x.node_ptr()});
    if (node->requires_grad) {
        node->backward = [](const std::vector<double>& g,
                            const std::vector<std::vector<double>*>& pg) {
            if (!pg[0]) return;
            double* dx = pg[0]->data();
            for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
        };
    }
    return Tensor::wrap(node);
}

Tensor transpose2d(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("transpose2d: expected rank 2, got " + shape_str(x.shape()));
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    std::vector<double> out(m * n);
    const double* xd = x.values().data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = xd[i * n + j];
    auto node = make_node({n, m}, std::move(out), "transpose2d", {x.node_ptr()});
    if (node->requires_grad) {
        node->backward = [m, n](const std::vector<double>& g,
                                const std::vector<std::vector<double>*>& pg) {
            if (!pg[0]) return;
            double* dx = pg[0]->data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += g[j * m + i];
        };
    }
    return Tensor::wrap(node);
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    auto node = make_node({1}, {acc}, "sum", {x.node_ptr()});
    if (node->requires_grad) {
        const std::size_t n = x.size();
        node->backward = [n](const std::vector<double>& g,
                             const std::vector<std::vector<double>*>& pg) {
            if (!pg[0]) return;
            double* dx = pg[0]->data();
            for (std::size_t i = 0; i < n; ++i) dx[i] += g[0];
        };
    }
    return Tensor::wrap(node);
}

// --- cross entropy -----------------------------------------------------------

Tensor cross_entropy(const Tensor& p, const std::vector<std::size_t>& y) {
    if (p.rank() != 2) throw ShapeError("cross_entropy: expected [N,C], got " + shape_str(p.shape()));
    const std::size_t n = p.shape()[0], c = p.shape()[1];
    if (y.size() != n) {
        throw ShapeError("cross_entropy: " + std::to_string(y.size()) + " labels for " +
                         std::to_string(n) + " rows");
    }
    const double* pd = p.values().data();
    constexpr double kEps = 1e-12;
    constexpr double kRowTol = 1e-9;
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double rowsum = 0.0;
        for (std::size_t j = 0; j < c; ++j) rowsum += pd[i * c + j];
        if (std::abs(rowsum - 1.0) > kRowTol) {
            throw ContractError("cross_entropy: row " + std::to_string(i) +
                                " is not a distribution (sum=" + std::to_string(rowsum) + ")");
        }
        if (y[i] >= c) {
            throw IndexError("cross_entropy: label " + std::to_string(y[i]) + " out of range for " +
                             std::to_string(c) + " classes");
        }
        loss -= std::log(std::max(pd[i * c + y[i]], kEps));
    }
    loss /= static_cast<double>(n);
    auto node = make_node({1}, {loss}, "cross_entropy", {p.node_ptr()});
    if (node->requires_grad) {
        NodePtr pn = p.node_ptr();
        node->backward = [pn, y, n, c](const std::vector<double>& g,
                                       const std::vector<std::vector<double>*>& pg) {
            if (!pg[0]) return;
            const double* pd = pn->data.data();
            double* dp = pg[0]->data();
            for (std::size_t i = 0; i < n; ++i) {
                const double pv = pd[i * c + y[i]];
                if (pv > kEps) dp[i * c + y[i]] -= g[0] / (static_cast<double>(n) * pv);
            }
        };
    }
    return Tensor::wrap(node);
}

}  // namespace mdan
