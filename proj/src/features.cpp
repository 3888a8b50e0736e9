#include "boxmask/features.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

#include "boxmask/error.hpp"

namespace boxmask {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Tensor with_batch_axis(const Tensor& t) {
    std::vector<int> shape{1};
    shape.insert(shape.end(), t.shape().begin(), t.shape().end());
    return Tensor(shape, std::vector<double>(t.values().begin(), t.values().end()));
}

Tensor drop_batch_axis(const Tensor& t) {
    std::vector<int> shape(t.shape().begin() + 1, t.shape().end());
    return Tensor(shape, std::vector<double>(t.values().begin(), t.values().end()));
}

// Rows scaled to unit L2 norm; zero rows stay zero.
void normalize_rows(RowMat& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        const double n = m.row(r).norm();
        if (n > 0.0) {
            m.row(r) /= n;
        }
    }
}

RowMat positions_as_rows(const Tensor& fmap) {
    const int channels = fmap.dim(0);
    const int plane = fmap.dim(1) * fmap.dim(2);
    RowMat rows(plane, channels);
    for (int c = 0; c < channels; ++c) {
        for (int p = 0; p < plane; ++p) {
            rows(p, c) = fmap[static_cast<std::size_t>(c) * plane + p];
        }
    }
    return rows;
}

} // namespace

Var extract_roi_features(Graph& g, Var fmap, std::span<const Box> rois, int stride, int roi_size, int up_size) {
    if (roi_size < 1 || up_size < roi_size) {
        throw InvalidArgument("extract_roi_features: need 1 <= roi_size <= up_size");
    }
    Var pooled = ops::roi_align(g, fmap, rois, roi_size, stride);
    return up_size == roi_size ? pooled : ops::upsample_bilinear(g, pooled, up_size);
}

RoIFeatureGrid extract_roi_features(const FeatureMap& fmap, const Box& roi, int roi_size, int up_size) {
    Graph g(false);
    Var f = g.constant(fmap.values);
    Var out = extract_roi_features(g, f, std::span<const Box>(&roi, 1), fmap.stride, roi_size, up_size);
    return RoIFeatureGrid{drop_batch_axis(out->value), GridSource::target};
}

SimilarityMap cosine_similarity_map(std::span<const double> query, const FeatureMap& fmap) {
    if (query.size() != static_cast<std::size_t>(fmap.channels())) {
        throw ShapeMismatch("cosine_similarity_map: query has " + std::to_string(query.size()) +
                            " channels, map has " + std::to_string(fmap.channels()));
    }
    SimilarityMap out{fmap.height(), fmap.width(), {}};
    const int plane = fmap.height() * fmap.width();
    double qn = 0.0;
    for (double v : query) {
        qn += v * v;
    }
    qn = std::sqrt(qn);
    out.values.assign(plane, 0.0);
    for (int p = 0; p < plane; ++p) {
        double dot = 0.0;
        double sn = 0.0;
        for (int c = 0; c < fmap.channels(); ++c) {
            const double s = fmap.values[static_cast<std::size_t>(c) * plane + p];
            dot += query[c] * s;
            sn += s * s;
        }
        sn = std::sqrt(sn);
        if (qn > 0.0 && sn > 0.0) {
            out.values[p] = std::clamp(dot / (qn * sn), -1.0, 1.0);
        }
    }
    return out;
}

std::vector<int> match_positions(const Tensor& target_grids, const Tensor& support) {
    if (target_grids.rank() != 4 || support.rank() != 3 || target_grids.dim(1) != support.dim(0)) {
        throw ShapeMismatch("match_support_features: target " + shape_string(target_grids.shape()) +
                            " vs support " + shape_string(support.shape()));
    }
    const int k_count = target_grids.dim(0);
    const int channels = target_grids.dim(1);
    const int bins = target_grids.dim(2) * target_grids.dim(3);
    RowMat queries(static_cast<Eigen::Index>(k_count) * bins, channels);
    for (int k = 0; k < k_count; ++k) {
        for (int c = 0; c < channels; ++c) {
            const double* src = target_grids.data() + (static_cast<std::size_t>(k) * channels + c) * bins;
            for (int b = 0; b < bins; ++b) {
                queries(static_cast<Eigen::Index>(k) * bins + b, c) = src[b];
            }
        }
    }
    RowMat keys = positions_as_rows(support);
    normalize_rows(queries);
    normalize_rows(keys);
    const RowMat sim = queries * keys.transpose();

    std::vector<int> best(static_cast<std::size_t>(sim.rows()), 0);
    for (Eigen::Index r = 0; r < sim.rows(); ++r) {
        double top = sim(r, 0);
        for (Eigen::Index p = 1; p < sim.cols(); ++p) {
            if (sim(r, p) > top) {
                top = sim(r, p);
                best[r] = static_cast<int>(p);
            }
        }
    }
    return best;
}

Var match_support_features(Graph& g, Var target_grids, Var support_fmap) {
    const int grid = target_grids->value.dim(2);
    return ops::gather_positions(
        g, support_fmap, ops::PatternFreeze::matches(match_positions(target_grids->value, support_fmap->value)), grid);
}

RoIFeatureGrid match_support_features(const RoIFeatureGrid& target, const FeatureMap& support) {
    Graph g(false);
    Var t = g.constant(with_batch_axis(target.values));
    Var s = g.constant(support.values);
    return RoIFeatureGrid{drop_batch_axis(match_support_features(g, t, s)->value), GridSource::support};
}

TemporalAggregator::TemporalAggregator(ParameterStore& store, const std::string& prefix, int channels, int heads,
                                       std::uint64_t seed)
    : channels_(channels), heads_(heads) {
    if (heads < 1 || channels % heads != 0) {
        throw InvalidArgument("TemporalAggregator: channels must be divisible by heads");
    }
    auto proj = [&](const std::string& name) -> Parameter& {
        return store.add(prefix + name, uniform_init({channels, channels}, channels, seed, prefix + name));
    };
    auto bias = [&](const std::string& name) -> Parameter& { return store.add(prefix + name, Tensor({channels})); };
    wq_ = &proj("wq");
    bq_ = &bias("bq");
    wk_ = &proj("wk");
    bk_ = &bias("bk");
    wv_ = &proj("wv");
    bv_ = &bias("bv");
    wo_ = &proj("wo");
    bo_ = &bias("bo");
    // Damped output projection so the block starts close to the identity.
    for (double& v : wo_->value.values()) {
        v *= 0.1;
    }
}

Var TemporalAggregator::forward(Graph& g, Var target, const std::vector<Var>& matched) const {
    ops::AttentionWeights w{g.parameter(*wq_), g.parameter(*bq_), g.parameter(*wk_), g.parameter(*bk_),
                            g.parameter(*wv_), g.parameter(*bv_), g.parameter(*wo_), g.parameter(*bo_)};
    return ops::temporal_attention(g, target, matched, w, heads_);
}

void TemporalAggregator::set_identity() {
    for (Parameter* p : {wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_}) {
        p->value.fill(0.0);
    }
    for (int i = 0; i < channels_; ++i) {
        wv_->value[static_cast<std::size_t>(i) * channels_ + i] = 1.0;
        wo_->value[static_cast<std::size_t>(i) * channels_ + i] = 1.0;
    }
}

std::vector<Parameter*> TemporalAggregator::parameters() const { return {wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_}; }

RoIFeatureGrid msa_aggregate(const RoIFeatureGrid& target, std::span<const RoIFeatureGrid> matched,
                             const TemporalAggregator& aggregator) {
    if (target.channels() != aggregator.channels()) {
        throw ShapeMismatch("msa_aggregate: grid has " + std::to_string(target.channels()) +
                            " channels, aggregator expects " + std::to_string(aggregator.channels()));
    }
    Graph g(false);
    Var t = g.constant(with_batch_axis(target.values));
    std::vector<Var> support;
    for (const RoIFeatureGrid& m : matched) {
        if (m.values.shape() != target.values.shape()) {
            throw ShapeMismatch("msa_aggregate: matched grid " + shape_string(m.values.shape()) +
                                " does not match target " + shape_string(target.values.shape()));
        }
        support.push_back(g.constant(with_batch_axis(m.values)));
    }
    return RoIFeatureGrid{drop_batch_axis(aggregator.forward(g, t, support)->value), GridSource::aggregated};
}

} // namespace boxmask
