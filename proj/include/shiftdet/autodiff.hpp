#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "shiftdet/tensor.hpp"

namespace shiftdet {

/// Reverse-mode autodiff over Tensor<T>. A Var wraps a graph node; ops build
/// the graph dynamically and backward() replays it in reverse topological
/// order. Accumulation order is fixed by construction order, so gradients are
/// bit-reproducible for a given program.
template <typename T>
struct Node {
    Tensor<T> val;
    Tensor<T> grad;  // allocated lazily, same shape as val
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Tensor<T>& ensure_grad() {
        if (grad.data.empty()) grad = Tensor<T>(val.shape);
        return grad;
    }
};

template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    static Var constant(Tensor<T> t) {
        auto n = std::make_shared<Node<T>>();
        n->val = std::move(t);
        return Var(std::move(n));
    }

    static Var leaf(Tensor<T> t, bool requires_grad = true) {
        auto n = std::make_shared<Node<T>>();
        n->val = std::move(t);
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }

    bool defined() const { return node_ != nullptr; }
    const Tensor<T>& value() const { return node_->val; }
    const Tensor<T>& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    std::shared_ptr<Node<T>> node() const { return node_; }

    /// Value copied out of the graph; gradients do not flow through.
    Var detached() const { return constant(node_->val); }

private:
    std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
std::shared_ptr<Node<T>> make_node(Tensor<T> val, std::vector<std::shared_ptr<Node<T>>> parents,
                                   std::function<void(Node<T>&)> fn) {
    auto n = std::make_shared<Node<T>>();
    n->val = std::move(val);
    for (const auto& p : parents) {
        if (p->requires_grad) {
            n->requires_grad = true;
            break;
        }
    }
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(fn);
    }
    return n;
}

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

inline int conv_out_dim(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

template <typename T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, int stride, int pad, T* col, int Ho, int Wo) {
    const int plane = H * W;
    const int ncols = Ho * Wo;
    for (int ci = 0; ci < C; ++ci) {
        for (int kr = 0; kr < kh; ++kr) {
            for (int kc = 0; kc < kw; ++kc) {
                T* dst = col + (static_cast<std::size_t>((ci * kh + kr) * kw + kc)) * ncols;
                const T* src_plane = x + static_cast<std::size_t>(ci) * plane;
                for (int ho = 0; ho < Ho; ++ho) {
                    const int hi = ho * stride - pad + kr;
                    T* row = dst + static_cast<std::size_t>(ho) * Wo;
                    if (hi < 0 || hi >= H) {
                        std::fill(row, row + Wo, T(0));
                        continue;
                    }
                    const T* src = src_plane + static_cast<std::size_t>(hi) * W;
                    for (int wo = 0; wo < Wo; ++wo) {
                        const int wi = wo * stride - pad + kc;
                        row[wo] = (wi >= 0 && wi < W) ? src[wi] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_acc(const T* col, int C, int H, int W, int kh, int kw, int stride, int pad, T* dx, int Ho, int Wo) {
    const int plane = H * W;
    const int ncols = Ho * Wo;
    for (int ci = 0; ci < C; ++ci) {
        for (int kr = 0; kr < kh; ++kr) {
            for (int kc = 0; kc < kw; ++kc) {
                const T* src = col + (static_cast<std::size_t>((ci * kh + kr) * kw + kc)) * ncols;
                T* dst_plane = dx + static_cast<std::size_t>(ci) * plane;
                for (int ho = 0; ho < Ho; ++ho) {
                    const int hi = ho * stride - pad + kr;
                    if (hi < 0 || hi >= H) continue;
                    const T* row = src + static_cast<std::size_t>(ho) * Wo;
                    T* dst = dst_plane + static_cast<std::size_t>(hi) * W;
                    for (int wo = 0; wo < Wo; ++wo) {
                        const int wi = wo * stride - pad + kc;
                        if (wi >= 0 && wi < W) dst[wi] += row[wo];
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// 2-D convolution. x:(N,Ci,H,W), w:(Co,Ci,kh,kw), b:(Co) -> (N,Co,Ho,Wo).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
    const auto& xs = x.value().shape;
    const auto& ws = w.value().shape;
    if (xs.size() != 4 || ws.size() != 4) throw std::invalid_argument("conv2d: expects 4-D input and weight");
    if (xs[1] != ws[1]) throw std::invalid_argument("conv2d: channel mismatch");
    const int N = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
    const int Co = ws[0], kh = ws[2], kw = ws[3];
    const int Ho = detail::conv_out_dim(H, kh, stride, pad);
    const int Wo = detail::conv_out_dim(W, kw, stride, pad);
    if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("conv2d: output would be empty");
    const int ck2 = Ci * kh * kw;
    const int ncols = Ho * Wo;

    Tensor<T> out({N, Co, Ho, Wo});
    auto cols = std::make_shared<std::vector<Tensor<T>>>();  // kept for backward
    cols->reserve(static_cast<std::size_t>(N));
    detail::ECMap<T> Wm(w.value().ptr(), Co, ck2);
    for (int n = 0; n < N; ++n) {
        Tensor<T> col({ck2, ncols});
        detail::im2col(x.value().ptr() + static_cast<std::size_t>(n) * Ci * H * W, Ci, H, W, kh, kw, stride, pad,
                       col.ptr(), Ho, Wo);
        detail::EMap<T> Y(out.ptr() + static_cast<std::size_t>(n) * Co * ncols, Co, ncols);
        Y.noalias() = Wm * detail::ECMap<T>(col.ptr(), ck2, ncols);
        for (int co = 0; co < Co; ++co) Y.row(co).array() += b.value()[static_cast<std::size_t>(co)];
        cols->push_back(std::move(col));
    }

    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    auto fn = [xn, wn, bn, cols, N, Ci, H, W, Co, kh, kw, stride, pad, ck2, ncols, Ho, Wo](Node<T>& self) {
        detail::ECMap<T> Wm(wn->val.ptr(), Co, ck2);
        for (int n = 0; n < N; ++n) {
            detail::ECMap<T> dY(self.grad.ptr() + static_cast<std::size_t>(n) * Co * ncols, Co, ncols);
            if (wn->requires_grad) {
                detail::EMap<T> dW(wn->ensure_grad().ptr(), Co, ck2);
                dW.noalias() += dY * detail::ECMap<T>((*cols)[static_cast<std::size_t>(n)].ptr(), ck2, ncols).transpose();
            }
            if (bn->requires_grad) {
                auto& db = bn->ensure_grad();
                for (int co = 0; co < Co; ++co) {
                    const T* row = self.grad.ptr() + (static_cast<std::size_t>(n) * Co + co) * ncols;
                    T acc = 0;
                    for (int i = 0; i < ncols; ++i) acc += row[i];
                    db[static_cast<std::size_t>(co)] += acc;
                }
            }
            if (xn->requires_grad) {
                Tensor<T> dcol({ck2, ncols});
                detail::EMap<T>(dcol.ptr(), ck2, ncols).noalias() = Wm.transpose() * dY;
                detail::col2im_acc(dcol.ptr(), Ci, H, W, kh, kw, stride, pad,
                                   xn->ensure_grad().ptr() + static_cast<std::size_t>(n) * Ci * H * W, Ho, Wo);
            }
        }
        if (!xn->requires_grad) cols->clear();
    };
    return Var<T>(detail::make_node<T>(std::move(out), {xn, wn, bn}, std::move(fn)));
}

/// x:(N,D), w:(O,D), b:(O) -> (N,O)
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const auto& xs = x.value().shape;
    const auto& ws = w.value().shape;
    if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1]) throw std::invalid_argument("linear: shape mismatch");
    const int N = xs[0], D = xs[1], O = ws[0];
    Tensor<T> out({N, O});
    detail::ECMap<T> X(x.value().ptr(), N, D);
    detail::ECMap<T> Wm(w.value().ptr(), O, D);
    detail::EMap<T> Y(out.ptr(), N, O);
    Y.noalias() = X * Wm.transpose();
    for (int n = 0; n < N; ++n) {
        for (int o = 0; o < O; ++o) Y(n, o) += b.value()[static_cast<std::size_t>(o)];
    }
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    auto fn = [xn, wn, bn, N, D, O](Node<T>& self) {
        detail::ECMap<T> dY(self.grad.ptr(), N, O);
        if (wn->requires_grad) {
            detail::EMap<T> dW(wn->ensure_grad().ptr(), O, D);
            dW.noalias() += dY.transpose() * detail::ECMap<T>(xn->val.ptr(), N, D);
        }
        if (bn->requires_grad) {
            auto& db = bn->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < O; ++o) db[static_cast<std::size_t>(o)] += dY(n, o);
        }
        if (xn->requires_grad) {
            detail::EMap<T> dX(xn->ensure_grad().ptr(), N, D);
            dX.noalias() += dY * detail::ECMap<T>(wn->val.ptr(), O, D);
        }
    };
    return Var<T>(detail::make_node<T>(std::move(out), {xn, wn, bn}, std::move(fn)));
}

template <typename T>
Var<T> relu(const Var<T>& x) {
    Tensor<T> out = x.value();
    for (auto& v : out.data) v = v > T(0) ? v : T(0);
    auto xn = x.node();
    auto fn = [xn](Node<T>& self) {
        if (!xn->requires_grad) return;
        auto& dx = xn->ensure_grad();
        for (std::size_t i = 0; i < dx.data.size(); ++i) {
            if (xn->val[i] > T(0)) dx[i] += self.grad[i];
        }
    };
    return Var<T>(detail::make_node<T>(std::move(out), {xn}, std::move(fn)));
}

/// Same data, new shape (element count preserved).
template <typename T>
Var<T> reshape(const Var<T>& x, std::vector<int> shape) {
    Tensor<T> out = x.value().reshaped(std::move(shape));
    auto xn = x.node();
    auto fn = [xn](Node<T>& self) {
        if (!xn->requires_grad) return;
        auto& dx = xn->ensure_grad();
        for (std::size_t i = 0; i < dx.data.size(); ++i) dx[i] += self.grad[i];
    };
    return Var<T>(detail::make_node<T>(std::move(out), {xn}, std::move(fn)));
}

/// Max-pool image-space rectangles from a single feature map into fixed bins.
/// fm:(C,H,W); rois are (x1,y1,x2,y2) in image pixels; stride maps image
/// coords onto the grid (outward rounding, at most one cell). Bins that
/// project to an empty cell range replicate the nearest cell.
template <typename T>
Var<T> roi_max_pool(const Var<T>& fm, const std::vector<std::array<double, 4>>& rois, double stride, int bins_h,
                    int bins_w) {
    const auto& fs = fm.value().shape;
    if (fs.size() != 3) throw std::invalid_argument("roi_max_pool: feature map must be (C,H,W)");
    if (bins_h < 1 || bins_w < 1) throw std::invalid_argument("roi_max_pool: bins must be >= 1");
    const int C = fs[0], H = fs[1], W = fs[2];
    const int R = static_cast<int>(rois.size());
    if (R == 0) throw std::invalid_argument("roi_max_pool: no rois");
    Tensor<T> out({R, C, bins_h, bins_w});
    auto argmax = std::make_shared<std::vector<int>>(out.numel());  // flat (h*W+w) per output element

    const T* src = fm.value().ptr();
    std::size_t oi = 0;
    for (int r = 0; r < R; ++r) {
        const auto& b = rois[static_cast<std::size_t>(r)];
        int c0 = std::clamp(static_cast<int>(std::floor(b[0] / stride)), 0, W - 1);
        int c1 = std::clamp(static_cast<int>(std::ceil(b[2] / stride)), c0 + 1, W);
        int r0 = std::clamp(static_cast<int>(std::floor(b[1] / stride)), 0, H - 1);
        int r1 = std::clamp(static_cast<int>(std::ceil(b[3] / stride)), r0 + 1, H);
        const int rh = r1 - r0, rw = c1 - c0;
        for (int ch = 0; ch < C; ++ch) {
            const T* plane = src + static_cast<std::size_t>(ch) * H * W;
            for (int by = 0; by < bins_h; ++by) {
                int ys = r0 + (rh * by) / bins_h;
                int ye = r0 + (rh * (by + 1)) / bins_h;
                if (ye <= ys) ye = ys + 1;
                for (int bx = 0; bx < bins_w; ++bx) {
                    int xs = c0 + (rw * bx) / bins_w;
                    int xe = c0 + (rw * (bx + 1)) / bins_w;
                    if (xe <= xs) xe = xs + 1;
                    T best = plane[static_cast<std::size_t>(ys) * W + xs];
                    int best_idx = ys * W + xs;
                    for (int y = ys; y < ye; ++y) {
                        for (int x = xs; x < xe; ++x) {
                            const T v = plane[static_cast<std::size_t>(y) * W + x];
                            if (v > best) {
                                best = v;
                                best_idx = y * W + x;
                            }
                        }
                    }
                    out[oi] = best;
                    (*argmax)[oi] = best_idx;
                    ++oi;
                }
            }
        }
    }

    auto fn_node = fm.node();
    const int plane = H * W;
    auto fn = [fn_node, argmax, C, plane, R, bins_h, bins_w](Node<T>& self) {
        if (!fn_node->requires_grad) return;
        auto& dx = fn_node->ensure_grad();
        std::size_t oi = 0;
        for (int r = 0; r < R; ++r) {
            for (int ch = 0; ch < C; ++ch) {
                T* dplane = dx.ptr() + static_cast<std::size_t>(ch) * plane;
                for (int k = 0; k < bins_h * bins_w; ++k, ++oi) dplane[(*argmax)[oi]] += self.grad[oi];
            }
        }
    };
    return Var<T>(detail::make_node<T>(std::move(out), {fn_node}, std::move(fn)));
}

/// Concatenate along dim 0; all parts must share trailing dimensions.
template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    std::vector<int> tail(parts[0].value().shape.begin() + 1, parts[0].value().shape.end());
    int total = 0;
    for (const auto& p : parts) {
        std::vector<int> t(p.value().shape.begin() + 1, p.value().shape.end());
        if (t != tail) throw std::invalid_argument("concat_rows: trailing shape mismatch");
        total += p.value().shape[0];
    }
    std::vector<int> oshape = {total};
    oshape.insert(oshape.end(), tail.begin(), tail.end());
    Tensor<T> out(oshape);
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::memcpy(out.ptr() + off, p.value().ptr(), p.value().numel() * sizeof(T));
        off += p.value().numel();
    }
    std::vector<std::shared_ptr<Node<T>>> pn;
    pn.reserve(parts.size());
    for (const auto& p : parts) pn.push_back(p.node());
    auto fn = [pn](Node<T>& self) {
        std::size_t off = 0;
        for (const auto& n : pn) {
            const std::size_t cnt = n->val.numel();
            if (n->requires_grad) {
                auto& dx = n->ensure_grad();
                for (std::size_t i = 0; i < cnt; ++i) dx[i] += self.grad[off + i];
            }
            off += cnt;
        }
    };
    return Var<T>(detail::make_node<T>(std::move(out), std::move(pn), std::move(fn)));
}

/// Gather rows (dim 0). Indices may repeat.
template <typename T>
Var<T> rows_select(const Var<T>& x, const std::vector<int>& idx) {
    const auto& s = x.value().shape;
    if (s.empty()) throw std::invalid_argument("rows_select: scalar input");
    if (idx.empty()) throw std::invalid_argument("rows_select: empty index list");
    std::size_t rowsz = 1;
    for (std::size_t i = 1; i < s.size(); ++i) rowsz *= static_cast<std::size_t>(s[i]);
    std::vector<int> oshape = s;
    oshape[0] = static_cast<int>(idx.size());
    Tensor<T> out(oshape);
    for (std::size_t k = 0; k < idx.size(); ++k) {
        if (idx[k] < 0 || idx[k] >= s[0]) throw std::out_of_range("rows_select: index out of range");
        std::memcpy(out.ptr() + k * rowsz, x.value().ptr() + static_cast<std::size_t>(idx[k]) * rowsz,
                    rowsz * sizeof(T));
    }
    auto xn = x.node();
    auto fn = [xn, idx, rowsz](Node<T>& self) {
        if (!xn->requires_grad) return;
        auto& dx = xn->ensure_grad();
        for (std::size_t k = 0; k < idx.size(); ++k) {
            T* dst = dx.ptr() + static_cast<std::size_t>(idx[k]) * rowsz;
            const T* src = self.grad.ptr() + k * rowsz;
            for (std::size_t i = 0; i < rowsz; ++i) dst[i] += src[i];
        }
    };
    return Var<T>(detail::make_node<T>(std::move(out), {xn}, std::move(fn)));
}

/// Concatenate along dim 1 (the channel/feature axis); dim 0 and trailing dims must match.
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    const auto& as = a.value().shape;
    const auto& bs = b.value().shape;
    if (as.size() != bs.size() || as.size() < 2) throw std::invalid_argument("concat_channels: rank mismatch");
    if (as[0] != bs[0]) throw std::invalid_argument("concat_channels: batch mismatch");
    for (std::size_t i = 2; i < as.size(); ++i) {
        if (as[i] != bs[i]) throw std::invalid_argument("concat_channels: trailing shape mismatch");
    }
    std::size_t tail = 1;
    for (std::size_t i = 2; i < as.size(); ++i) tail *= static_cast<std::size_t>(as[i]);
    const int N = as[0], Ca = as[1], Cb = bs[1];
    std::vector<int> oshape = as;
    oshape[1] = Ca + Cb;
    Tensor<T> out(oshape);
    const std::size_t am = static_cast<std::size_t>(Ca) * tail, bm = static_cast<std::size_t>(Cb) * tail;
    for (int n = 0; n < N; ++n) {
        std::memcpy(out.ptr() + static_cast<std::size_t>(n) * (am + bm), a.value().ptr() + n * am, am * sizeof(T));
        std::memcpy(out.ptr() + static_cast<std::size_t>(n) * (am + bm) + am, b.value().ptr() + n * bm,
                    bm * sizeof(T));
    }
    auto an = a.node();
    auto bn = b.node();
    auto fn = [an, bn, N, am, bm](Node<T>& self) {
        for (int n = 0; n < N; ++n) {
            const T* g = self.grad.ptr() + static_cast<std::size_t>(n) * (am + bm);
            if (an->requires_grad) {
                T* da = an->ensure_grad().ptr() + static_cast<std::size_t>(n) * am;
                for (std::size_t i = 0; i < am; ++i) da[i] += g[i];
            }
            if (bn->requires_grad) {
                T* db = bn->ensure_grad().ptr() + static_cast<std::size_t>(n) * bm;
                for (std::size_t i = 0; i < bm; ++i) db[i] += g[am + i];
            }
        }
    };
    return Var<T>(detail::make_node<T>(std::move(out), {an, bn}, std::move(fn)));
}

/// (N,C,h,w) -> (N,C) spatial mean.
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
    const auto& s = x.value().shape;
    if (s.size() != 4) throw std::invalid_argument("global_avg_pool: expects 4-D");
    const int N = s[0], C = s[1];
    const std::size_t hw = static_cast<std::size_t>(s[2]) * s[3];
    Tensor<T> out({N, C});
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const T* p = x.value().ptr() + (static_cast<std::size_t>(n) * C + c) * hw;
            T acc = 0;
            for (std::size_t i = 0; i < hw; ++i) acc += p[i];
            out[static_cast<std::size_t>(n) * C + c] = acc / static_cast<T>(hw);
        }
    }
    auto xn = x.node();
    auto fn = [xn, N, C, hw](Node<T>& self) {
        if (!xn->requires_grad) return;
        auto& dx = xn->ensure_grad();
        for (int n = 0; n < N; ++n) {
            for (int c = 0; c < C; ++c) {
                const T g = self.grad[static_cast<std::size_t>(n) * C + c] / static_cast<T>(hw);
                T* p = dx.ptr() + (static_cast<std::size_t>(n) * C + c) * hw;
                for (std::size_t i = 0; i < hw; ++i) p[i] += g;
            }
        }
    };
    return Var<T>(detail::make_node<T>(std::move(out), {xn}, std::move(fn)));
}

/// Rearrange a head conv output (1,C,H,W) with C = A*g into location-major
/// anchor order: row (r*W + c)*A + a holds the g values of anchor a at (r,c).
template <typename T>
Var<T> anchor_order_rows(const Var<T>& x, int group) {
    const auto& s = x.value().shape;
    if (s.size() != 4 || s[0] != 1 || s[1] % group != 0) throw std::invalid_argument("anchor_order_rows: bad shape");
    const int C = s[1], H = s[2], W = s[3];
    const int A = C / group;
    Tensor<T> out({H * W * A, group});
    const T* src = x.value().ptr();
    for (int a = 0; a < A; ++a) {
        for (int j = 0; j < group; ++j) {
            const T* plane = src + static_cast<std::size_t>(a * group + j) * H * W;
            for (int r = 0; r < H; ++r) {
                for (int c = 0; c < W; ++c) {
                    out[static_cast<std::size_t>(((r * W + c) * A + a)) * group + j] =
                        plane[static_cast<std::size_t>(r) * W + c];
                }
            }
        }
    }
    auto xn = x.node();
    auto fn = [xn, A, group, H, W](Node<T>& self) {
        if (!xn->requires_grad) return;
        auto& dx = xn->ensure_grad();
        for (int a = 0; a < A; ++a) {
            for (int j = 0; j < group; ++j) {
                T* plane = dx.ptr() + static_cast<std::size_t>(a * group + j) * H * W;
                for (int r = 0; r < H; ++r) {
                    for (int c = 0; c < W; ++c) {
                        plane[static_cast<std::size_t>(r) * W + c] +=
                            self.grad[static_cast<std::size_t>(((r * W + c) * A + a)) * group + j];
                    }
                }
            }
        }
    };
    return Var<T>(detail::make_node<T>(std::move(out), {xn}, std::move(fn)));
}

/// Mean softmax cross-entropy; logits:(N,K), one label per row.
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
    const auto& s = logits.value().shape;
    if (s.size() != 2 || static_cast<std::size_t>(s[0]) != labels.size())
        throw std::invalid_argument("softmax_cross_entropy: shape/label mismatch");
    const int N = s[0], K = s[1];
    auto probs = std::make_shared<Tensor<T>>(std::vector<int>{N, K});
    T loss = 0;
    for (int n = 0; n < N; ++n) {
        const T* z = logits.value().ptr() + static_cast<std::size_t>(n) * K;
        T* p = probs->ptr() + static_cast<std::size_t>(n) * K;
        T m = z[0];
        for (int k = 1; k < K; ++k) m = std::max(m, z[k]);
        T sum = 0;
        for (int k = 0; k < K; ++k) {
            p[k] = std::exp(z[k] - m);
            sum += p[k];
        }
        for (int k = 0; k < K; ++k) p[k] /= sum;
        const int y = labels[static_cast<std::size_t>(n)];
        if (y < 0 || y >= K) throw std::out_of_range("softmax_cross_entropy: label out of range");
        loss += -(z[y] - m - std::log(sum));
    }
    loss /= static_cast<T>(N);
    auto ln = logits.node();
    auto fn = [ln, probs, labels, N, K](Node<T>& self) {
        if (!ln->requires_grad) return;
        const T g = self.grad[0] / static_cast<T>(N);
        auto& dz = ln->ensure_grad();
        for (int n = 0; n < N; ++n) {
            const T* p = probs->ptr() + static_cast<std::size_t>(n) * K;
            T* d = dz.ptr() + static_cast<std::size_t>(n) * K;
            for (int k = 0; k < K; ++k) d[k] += g * p[k];
            d[labels[static_cast<std::size_t>(n)]] -= g;
        }
    };
    return Var<T>(detail::make_node<T>(Tensor<T>::scalar(loss), {ln}, std::move(fn)));
}

/// Mean binary cross-entropy on logits; targets in [0,1], one per element of z.
template <typename T>
Var<T> bce_with_logits(const Var<T>& z, const std::vector<double>& targets) {
    const std::size_t N = z.value().numel();
    if (N != targets.size()) throw std::invalid_argument("bce_with_logits: size mismatch");
    T loss = 0;
    for (std::size_t i = 0; i < N; ++i) {
        const T zi = z.value()[i];
        const T y = static_cast<T>(targets[i]);
        // softplus(z) - y*z, computed stably
        const T sp = std::max(zi, T(0)) + std::log1p(std::exp(-std::abs(zi)));
        loss += sp - y * zi;
    }
    loss /= static_cast<T>(N);
    auto zn = z.node();
    auto fn = [zn, targets, N](Node<T>& self) {
        if (!zn->requires_grad) return;
        const T g = self.grad[0] / static_cast<T>(N);
        auto& dz = zn->ensure_grad();
        for (std::size_t i = 0; i < N; ++i) {
            const T zi = zn->val[i];
            const T sig = T(1) / (T(1) + std::exp(-zi));
            dz[i] += g * (sig - static_cast<T>(targets[i]));
        }
    };
    return Var<T>(detail::make_node<T>(Tensor<T>::scalar(loss), {zn}, std::move(fn)));
}

/// Smooth-L1 between pred and a constant target, summed then divided by `normalizer`.
template <typename T>
Var<T> smooth_l1(const Var<T>& pred, const Tensor<T>& target, double normalizer) {
    if (!pred.value().same_shape(target)) throw std::invalid_argument("smooth_l1: shape mismatch");
    if (normalizer <= 0) throw std::invalid_argument("smooth_l1: normalizer must be positive");
    const std::size_t N = pred.value().numel();
    T loss = 0;
    for (std::size_t i = 0; i < N; ++i) {
        const T d = pred.value()[i] - target[i];
        const T a = std::abs(d);
        loss += a < T(1) ? T(0.5) * d * d : a - T(0.5);
    }
    loss /= static_cast<T>(normalizer);
    auto pn = pred.node();
    auto tgt = std::make_shared<Tensor<T>>(target);
    auto fn = [pn, tgt, N, normalizer](Node<T>& self) {
        if (!pn->requires_grad) return;
        const T g = self.grad[0] / static_cast<T>(normalizer);
        auto& dp = pn->ensure_grad();
        for (std::size_t i = 0; i < N; ++i) {
            const T d = pn->val[i] - (*tgt)[i];
            dp[i] += g * std::clamp(d, T(-1), T(1));
        }
    };
    return Var<T>(detail::make_node<T>(Tensor<T>::scalar(loss), {pn}, std::move(fn)));
}

/// norm * sum over masked spatial locations (all channels) of (x - ref)^2.
/// mask has one entry per spatial location of x:(C,H,W).
template <typename T>
Var<T> masked_sq_diff_sum(const Var<T>& x, const Tensor<T>& ref, const std::vector<std::uint8_t>& mask, double norm) {
    if (!x.value().same_shape(ref)) throw std::invalid_argument("masked_sq_diff_sum: shape mismatch");
    const auto& s = x.value().shape;
    if (s.size() != 3) throw std::invalid_argument("masked_sq_diff_sum: expects (C,H,W)");
    const int C = s[0];
    const std::size_t hw = static_cast<std::size_t>(s[1]) * s[2];
    if (mask.size() != hw) throw std::invalid_argument("masked_sq_diff_sum: mask size mismatch");
    T loss = 0;
    for (int c = 0; c < C; ++c) {
        const T* xp = x.value().ptr() + static_cast<std::size_t>(c) * hw;
        const T* rp = ref.ptr() + static_cast<std::size_t>(c) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
            if (mask[i]) {
                const T d = xp[i] - rp[i];
                loss += d * d;
            }
        }
    }
    loss *= static_cast<T>(norm);
    auto xn = x.node();
    auto refp = std::make_shared<Tensor<T>>(ref);
    auto fn = [xn, refp, mask, C, hw, norm](Node<T>& self) {
        if (!xn->requires_grad) return;
        const T g = self.grad[0] * static_cast<T>(norm);
        auto& dx = xn->ensure_grad();
        for (int c = 0; c < C; ++c) {
            T* dp = dx.ptr() + static_cast<std::size_t>(c) * hw;
            const T* xp = xn->val.ptr() + static_cast<std::size_t>(c) * hw;
            const T* rp = refp->ptr() + static_cast<std::size_t>(c) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                if (mask[i]) dp[i] += g * T(2) * (xp[i] - rp[i]);
            }
        }
    };
    return Var<T>(detail::make_node<T>(Tensor<T>::scalar(loss), {xn}, std::move(fn)));
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    if (!a.value().same_shape(b.value())) throw std::invalid_argument("add: shape mismatch");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
    auto an = a.node();
    auto bn = b.node();
    auto fn = [an, bn](Node<T>& self) {
        for (const auto& n : {an, bn}) {
            if (!n->requires_grad) continue;
            auto& d = n->ensure_grad();
            for (std::size_t i = 0; i < d.numel(); ++i) d[i] += self.grad[i];
        }
    };
    return Var<T>(detail::make_node<T>(std::move(out), {an, bn}, std::move(fn)));
}

template <typename T>
Var<T> scale(const Var<T>& a, double c) {
    Tensor<T> out = a.value();
    for (auto& v : out.data) v *= static_cast<T>(c);
    auto an = a.node();
    auto fn = [an, c](Node<T>& self) {
        if (!an->requires_grad) return;
        auto& d = an->ensure_grad();
        for (std::size_t i = 0; i < d.numel(); ++i) d[i] += self.grad[i] * static_cast<T>(c);
    };
    return Var<T>(detail::make_node<T>(std::move(out), {an}, std::move(fn)));
}

template <typename T>
Var<T> zero_scalar() {
    return Var<T>::constant(Tensor<T>::scalar(T(0)));
}

/// Reverse pass from a scalar root. Walks the graph once in reverse
/// construction (topological) order; safe to call once per graph.
template <typename T>
void backward(const Var<T>& root) {
    if (root.value().numel() != 1) throw std::invalid_argument("backward: root must be scalar");
    if (!root.requires_grad()) return;
    // iterative post-order DFS
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node<T>* p = n->parents[i].get();
            ++i;
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root.node()->ensure_grad().fill(T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn && !n->grad.data.empty()) n->backward_fn(*n);
    }
}

}  // namespace shiftdet
