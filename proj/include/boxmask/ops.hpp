#pragma once

#include <span>
#include <utility>
#include <vector>

#include "boxmask/autograd.hpp"
#include "boxmask/geometry.hpp"
#include "boxmask/tensor.hpp"

// Differentiable operators recorded on a Graph. Shapes follow the
// [batch, channels, height, width] convention unless noted.
namespace boxmask::ops {

/// x [N,C,H,W], w [O,C,k,k], b [O] -> [N,O,Ho,Wo].
Var conv2d(Graph& g, Var x, Var w, Var b, int stride, int pad);

/// 2x2 transposed convolution with stride 2.
/// x [N,C,H,W], w [C,O,2,2], b [O] -> [N,O,2H,2W].
Var conv_transpose2x2(Graph& g, Var x, Var w, Var b);

/// x [N,I], w [O,I], b [O] -> [N,O].
Var linear(Graph& g, Var x, Var w, Var b);

Var relu(Graph& g, Var x);

/// While alive, the first forward pass records every ReLU mask and support
/// match in order; after replay() later passes reuse them, so the network
/// stays on one piecewise-linear region. Used by finite-difference checks.
class PatternFreeze {
public:
    PatternFreeze();
    ~PatternFreeze();
    PatternFreeze(const PatternFreeze&) = delete;
    PatternFreeze& operator=(const PatternFreeze&) = delete;

    void replay();

    /// Returns the recorded pattern for the next call site or records
    /// `fresh`; a recorded pattern of another size is ignored.
    static std::vector<char> relu_mask(std::vector<char> fresh);
    static std::vector<int> matches(std::vector<int> fresh);

private:
    bool replaying_ = false;
    std::size_t relu_pos_ = 0;
    std::size_t match_pos_ = 0;
    std::vector<std::vector<char>> relu_masks_;
    std::vector<std::vector<int>> matches_;
    PatternFreeze* previous_;
};
Var add(Graph& g, Var a, Var b);

/// Scalar sum_i w_i * x_i over scalar inputs. Terms with weight exactly 0
/// receive no gradient and are not traversed by backward.
Var weighted_sum(Graph& g, const std::vector<std::pair<Var, double>>& terms);

/// Scalar sum(x * weights); weights is a constant of x's size.
Var dot_constant(Graph& g, Var x, const Tensor& weights);

/// Slice `index` along the leading axis.
Var select(Graph& g, Var x, int index);

/// Bilinear RoIAlign over a single feature map.
/// fmap [C,H,W]; rois in input-image pixels; `stride` maps image pixels
/// to feature cells (aligned: feature = image / stride - 0.5).
/// Each of the P x P bins averages `sampling` x `sampling` bilinear samples.
/// Returns [K,C,P,P]. Throws when an RoI lies entirely outside the image.
Var roi_align(Graph& g, Var fmap, std::span<const Box> rois, int out_size, int stride, int sampling = 2);

/// Bilinear resize of [K,C,P,P] to [K,C,Q,Q] with half-pixel centers.
/// Border outputs are linearly extrapolated from the two nearest inputs,
/// so linear and bilinear fields are reproduced exactly.
Var upsample_bilinear(Graph& g, Var x, int out_size);

/// out[k,c,i] = fmap[c, positions[k*P*P + i]]; fmap [C,H,W] -> [K,C,P,P].
Var gather_positions(Graph& g, Var fmap, std::vector<int> positions, int grid);

/// Average pool [K,C,P,P] into G x G bins and flatten to [K, C*G*G].
Var adaptive_avg_pool(Graph& g, Var x, int out_size);

struct AttentionWeights {
    Var wq, bq, wk, bk, wv, bv, wo, bo;
};

/// Per-bin multi-head attention. Queries come from `target`; keys and
/// values from the target bin followed by the same bin of every grid in
/// `support`. Output = target + out_proj(attention). All grids [K,C,P,P].
Var temporal_attention(Graph& g, Var target, const std::vector<Var>& support, const AttentionWeights& w,
                       int heads);

/// Mean softmax cross-entropy. logits [N,M] or [N,M,...] (class axis 1,
/// trailing axes flattened into S positions); labels has N*S entries
/// ordered (n, s). `sample_weights` (size N, optional) scales each sample;
/// the mean divides by sum(sample_weights) * S.
Var softmax_cross_entropy(Graph& g, Var logits, std::span<const int> labels,
                          std::span<const double> sample_weights = {});

/// Value (and optionally gradient) of softmax_cross_entropy without a graph.
double softmax_cross_entropy_value(const Tensor& logits, std::span<const int> labels,
                                   std::span<const double> sample_weights, Tensor* grad);

/// sum over rows r, cols d of row_weights[r] * smoothl1(pred - target) / normalizer.
Var smooth_l1(Graph& g, Var pred, const Tensor& target, std::span<const double> row_weights, double beta,
              double normalizer);

/// sum_i weights[i] * BCE(sigmoid(logits[i]), targets[i]) / normalizer.
Var bce_with_logits(Graph& g, Var logits, std::span<const double> targets, std::span<const double> weights,
                    double normalizer);

} // namespace boxmask::ops
