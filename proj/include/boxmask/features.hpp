#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "boxmask/autograd.hpp"
#include "boxmask/geometry.hpp"
#include "boxmask/ops.hpp"
#include "boxmask/params.hpp"
#include "boxmask/tensor.hpp"

namespace boxmask {

/// Backbone output for one frame: values [C, H, W] at `stride` input pixels
/// per cell.
struct FeatureMap {
    Tensor values;
    int stride = 1;
    int source_frame = -1;

    int channels() const { return values.dim(0); }
    int height() const { return values.dim(1); }
    int width() const { return values.dim(2); }
};

enum class GridSource { target, support, aggregated };

/// Pooled features of one RoI: values [C, P, P].
struct RoIFeatureGrid {
    Tensor values;
    GridSource source = GridSource::target;

    int channels() const { return values.dim(0); }
    int size() const { return values.dim(1); }
};

/// Cosine similarity of one feature vector against every position of a
/// feature map, row-major [H, W].
struct SimilarityMap {
    int height = 0;
    int width = 0;
    std::vector<double> values;
};

/// RoIAlign (2x2 samples per bin) at roi_size, then bilinear upsampling to
/// up_size when the two differ.
RoIFeatureGrid extract_roi_features(const FeatureMap& fmap, const Box& roi, int roi_size, int up_size);
Var extract_roi_features(Graph& g, Var fmap, std::span<const Box> rois, int stride, int roi_size, int up_size);

/// Cosine similarity; a zero-norm operand gives similarity 0.
SimilarityMap cosine_similarity_map(std::span<const double> query, const FeatureMap& fmap);

/// For every bin of every target grid ([K,C,P,P]) the flattened support
/// position ([C,H,W]) of highest cosine similarity; ties go to the lowest
/// index.
std::vector<int> match_positions(const Tensor& target_grids, const Tensor& support);

/// Pseudo-RoI built from the most similar support feature of each bin.
RoIFeatureGrid match_support_features(const RoIFeatureGrid& target, const FeatureMap& support);
/// Gradients flow into the support map through the gathered vectors.
Var match_support_features(Graph& g, Var target_grids, Var support_fmap);

/// Single-layer multi-head attention over target and matched support bins
/// with a residual connection to the target.
class TemporalAggregator {
public:
    TemporalAggregator(ParameterStore& store, const std::string& prefix, int channels, int heads,
                       std::uint64_t seed);

    int channels() const { return channels_; }
    int heads() const { return heads_; }

    Var forward(Graph& g, Var target, const std::vector<Var>& matched) const;

    /// Sets query/key projections to zero and value/output projections to
    /// the identity (zero biases).
    void set_identity();

    std::vector<Parameter*> parameters() const;

private:
    int channels_;
    int heads_;
    Parameter* wq_;
    Parameter* bq_;
    Parameter* wk_;
    Parameter* bk_;
    Parameter* wv_;
    Parameter* bv_;
    Parameter* wo_;
    Parameter* bo_;
};

RoIFeatureGrid msa_aggregate(const RoIFeatureGrid& target, std::span<const RoIFeatureGrid> matched,
                             const TemporalAggregator& aggregator);

} // namespace boxmask
