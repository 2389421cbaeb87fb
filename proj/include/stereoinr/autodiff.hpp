#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "stereoinr/tensor.hpp"

namespace stereoinr {

// Reverse-mode autodiff over whole tensors. Ops are coarse (GEMM, conv,
// attention) so the tape stays short; backward closures recompute cheap
// intermediates instead of storing them where that is the better trade.
struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::function<void()> backprop;
};

using Var = std::shared_ptr<Node>;

class Tape {
public:
    Var leaf(Tensor v, bool requires_grad) {
        auto n = std::make_shared<Node>();
        n->value = std::move(v);
        n->requires_grad = requires_grad;
        if (requires_grad) n->grad = Tensor(n->value.shape);
        nodes_.push_back(n);
        return n;
    }

    Var constant(Tensor v) { return leaf(std::move(v), false); }

    Var make(Tensor v, bool requires_grad, std::function<void()> bp) {
        auto n = std::make_shared<Node>();
        n->value = std::move(v);
        n->requires_grad = requires_grad;
        if (requires_grad) {
            n->grad = Tensor(n->value.shape);
            n->backprop = std::move(bp);
        }
        nodes_.push_back(n);
        return n;
    }

    // Seeds d(loss)/d(loss) = 1 and propagates in reverse creation order.
    void backward(const Var& loss);

    void clear() { nodes_.clear(); }
    std::size_t size() const { return nodes_.size(); }

private:
    std::vector<Var> nodes_;
};

namespace ad {

Var add(Tape& t, const Var& a, const Var& b);
Var sub(Tape& t, const Var& a, const Var& b);
Var mul(Tape& t, const Var& a, const Var& b);
Var scale(Tape& t, const Var& a, double c);
Var sigmoid(Tape& t, const Var& a);
Var gelu(Tape& t, const Var& a);

// x: [N, in], w: [out, in], b: [out] or nullptr -> [N, out]
Var linear(Tape& t, const Var& x, const Var& w, const Var& b);

// x: [h, w, Ci], w: [Co, 9*Ci] (patch layout (dy, dx, ci)), b: [Co] or
// nullptr -> [h, w, Co]; zero padding, stride 1.
Var conv3x3(Tape& t, const Var& x, const Var& w, const Var& b);

// LayerNorm over the channel axis at every spatial site.
// x: [h, w, C], gamma/beta: [C].
Var layernorm_channels(Tape& t, const Var& x, const Var& gamma, const Var& beta);

// Per-channel broadcast product; g has numel C (shape [C] or [1, C]).
Var mul_channels(Tape& t, const Var& x, const Var& g);

// Full-row scaled-dot-product cross attention along epipolar lines.
// q, kv: [h, w, C]; wq/wk/wv: [C, C] -> [h, w, C].
Var epipolar_attention(Tape& t, const Var& q, const Var& kv, const Var& wq, const Var& wk,
                       const Var& wv);

// Per-site attention: query from qgrid at each site, keys/values from the
// (2*radius+1)^2 in-image window of kvgrid centered there. -> [h, w, C]
Var window_attention_grid(Tape& t, const Var& qgrid, const Var& kvgrid, const Var& wq,
                          const Var& wk, const Var& wv, int radius);

// Per-token attention over a window of `grid` centered at centers[i]
// (site index), with output projection. tokens: [N, C] -> [N, C].
Var query_window_attention(Tape& t, const Var& tokens, const Var& grid,
                           const std::vector<int>& centers, const Var& wq, const Var& wk,
                           const Var& wv, const Var& wo, int radius);

// out(y, x, c) = bilinear sample of grid at (y, x - disp(y, x)), clamped
// horizontally. Linear in grid; disp is a fixed coefficient field.
Var bilinear_shift_x(Tape& t, const Var& grid, const Tensor& disp);

// Row-wise selector: out row y = use_b[y] ? b row : a row.
Var select_rows(Tape& t, const Var& a, const Var& b, const std::vector<std::uint8_t>& use_b);

// out[i, :] = grid[sites[i], :] with grid viewed as [h*w, C].
Var gather_sites(Tape& t, const Var& grid, const std::vector<int>& sites);

Var concat_cols(Tape& t, const Var& a, const Var& b);

// Shape change with identical element order (copies the buffer).
Var reshape(Tape& t, const Var& a, std::vector<int> shape);

// Mean absolute error against a fixed target.
Var mean_abs_diff(Tape& t, const Var& pred, const Tensor& target);

}  // namespace ad
}  // namespace stereoinr
