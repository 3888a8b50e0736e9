#include "boxmask/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>

#include "boxmask/error.hpp"

namespace boxmask::ops {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

void expect_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw ShapeMismatch(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                            shape_string(t.shape()));
    }
}

ConstMatMap as_matrix(const Tensor& t, int rows, int cols) { return ConstMatMap(t.data(), rows, cols); }
MatMap as_matrix(Tensor& t, int rows, int cols) { return MatMap(t.data(), rows, cols); }

// Unfolds x [N,C,H,W] into columns [C*k*k, N*Ho*Wo].
void im2col(const double* x, int n_batch, int channels, int height, int width, int k, int stride, int pad,
            int out_h, int out_w, double* col) {
    const int plane = out_h * out_w;
    const int cols = n_batch * plane;
    for (int c = 0; c < channels; ++c) {
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                double* row = col + static_cast<std::size_t>((c * k + ki) * k + kj) * cols;
                for (int n = 0; n < n_batch; ++n) {
                    const double* xc = x + (static_cast<std::size_t>(n) * channels + c) * height * width;
                    double* dst = row + n * plane;
                    for (int oy = 0; oy < out_h; ++oy) {
                        const int iy = oy * stride - pad + ki;
                        if (iy < 0 || iy >= height) {
                            std::fill(dst + oy * out_w, dst + (oy + 1) * out_w, 0.0);
                            continue;
                        }
                        for (int ox = 0; ox < out_w; ++ox) {
                            const int ix = ox * stride - pad + kj;
                            dst[oy * out_w + ox] = (ix >= 0 && ix < width) ? xc[iy * width + ix] : 0.0;
                        }
                    }
                }
            }
        }
    }
}

void col2im(const double* col, int n_batch, int channels, int height, int width, int k, int stride, int pad,
            int out_h, int out_w, double* dx) {
    const int plane = out_h * out_w;
    const int cols = n_batch * plane;
    for (int c = 0; c < channels; ++c) {
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                const double* row = col + static_cast<std::size_t>((c * k + ki) * k + kj) * cols;
                for (int n = 0; n < n_batch; ++n) {
                    double* xc = dx + (static_cast<std::size_t>(n) * channels + c) * height * width;
                    const double* src = row + n * plane;
                    for (int oy = 0; oy < out_h; ++oy) {
                        const int iy = oy * stride - pad + ki;
                        if (iy < 0 || iy >= height) {
                            continue;
                        }
                        for (int ox = 0; ox < out_w; ++ox) {
                            const int ix = ox * stride - pad + kj;
                            if (ix >= 0 && ix < width) {
                                xc[iy * width + ix] += src[oy * out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

// Grid [K,C,PP] <-> token rows [K*PP, C].
RowMat grid_to_rows(const Tensor& grid) {
    const int k_count = grid.dim(0);
    const int channels = grid.dim(1);
    const int bins = grid.dim(2) * grid.dim(3);
    RowMat rows(static_cast<Eigen::Index>(k_count) * bins, channels);
    for (int k = 0; k < k_count; ++k) {
        for (int c = 0; c < channels; ++c) {
            const double* src = grid.data() + (static_cast<std::size_t>(k) * channels + c) * bins;
            for (int b = 0; b < bins; ++b) {
                rows(static_cast<Eigen::Index>(k) * bins + b, c) = src[b];
            }
        }
    }
    return rows;
}

void add_rows_to_grid(const RowMat& rows, Tensor& grid) {
    const int k_count = grid.dim(0);
    const int channels = grid.dim(1);
    const int bins = grid.dim(2) * grid.dim(3);
    for (int k = 0; k < k_count; ++k) {
        for (int c = 0; c < channels; ++c) {
            double* dst = grid.data() + (static_cast<std::size_t>(k) * channels + c) * bins;
            for (int b = 0; b < bins; ++b) {
                dst[b] += rows(static_cast<Eigen::Index>(k) * bins + b, c);
            }
        }
    }
}

struct SampleTap {
    int index;
    double weight;
};

// Bilinear taps for one sample point at feature coordinates (y, x).
void bilinear_taps(double y, double x, int height, int width, double scale, std::vector<SampleTap>& taps) {
    if (y < -1.0 || y > height || x < -1.0 || x > width) {
        return;
    }
    y = std::max(y, 0.0);
    x = std::max(x, 0.0);
    int y_low = static_cast<int>(std::floor(y));
    int x_low = static_cast<int>(std::floor(x));
    int y_high = y_low + 1;
    int x_high = x_low + 1;
    if (y_low >= height - 1) {
        y_low = y_high = height - 1;
        y = y_low;
    }
    if (x_low >= width - 1) {
        x_low = x_high = width - 1;
        x = x_low;
    }
    const double ly = y - y_low;
    const double lx = x - x_low;
    const double hy = 1.0 - ly;
    const double hx = 1.0 - lx;
    taps.push_back({y_low * width + x_low, scale * hy * hx});
    taps.push_back({y_low * width + x_high, scale * hy * lx});
    taps.push_back({y_high * width + x_low, scale * ly * hx});
    taps.push_back({y_high * width + x_high, scale * ly * lx});
}

struct AxisInterp {
    int i0;
    int i1;
    double w0;
    double w1;
};

std::vector<AxisInterp> upsample_axis(int in_size, int out_size) {
    std::vector<AxisInterp> axis(out_size);
    for (int j = 0; j < out_size; ++j) {
        if (in_size == 1) {
            axis[j] = {0, 0, 1.0, 0.0};
            continue;
        }
        const double s = (j + 0.5) * static_cast<double>(in_size) / out_size - 0.5;
        const int i0 = std::clamp(static_cast<int>(std::floor(s)), 0, in_size - 2);
        const double f = s - i0;
        axis[j] = {i0, i0 + 1, 1.0 - f, f};
    }
    return axis;
}

} // namespace

Var conv2d(Graph& g, Var x, Var w, Var b, int stride, int pad) {
    const Tensor& xv = x->value;
    const Tensor& wv = w->value;
    expect_rank(xv, 4, "conv2d input");
    expect_rank(wv, 4, "conv2d weight");
    const int n_batch = xv.dim(0);
    const int channels = xv.dim(1);
    const int height = xv.dim(2);
    const int width = xv.dim(3);
    const int out_ch = wv.dim(0);
    const int k = wv.dim(2);
    if (wv.dim(1) != channels || wv.dim(3) != k || b->value.size() != static_cast<std::size_t>(out_ch)) {
        throw ShapeMismatch("conv2d: weight " + shape_string(wv.shape()) + " incompatible with input " +
                            shape_string(xv.shape()));
    }
    const int out_h = (height + 2 * pad - k) / stride + 1;
    const int out_w = (width + 2 * pad - k) / stride + 1;
    if (out_h <= 0 || out_w <= 0) {
        throw ShapeMismatch("conv2d: input " + shape_string(xv.shape()) + " too small for kernel");
    }
    const int plane = out_h * out_w;
    const int rows = channels * k * k;
    const int cols = n_batch * plane;

    auto col = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows) * cols);
    im2col(xv.data(), n_batch, channels, height, width, k, stride, pad, out_h, out_w, col->data());

    RowMat prod = as_matrix(wv, out_ch, rows) * ConstMatMap(col->data(), rows, cols);
    Tensor out({n_batch, out_ch, out_h, out_w});
    for (int n = 0; n < n_batch; ++n) {
        for (int o = 0; o < out_ch; ++o) {
            double* dst = out.data() + (static_cast<std::size_t>(n) * out_ch + o) * plane;
            const double bias = b->value[o];
            for (int p = 0; p < plane; ++p) {
                dst[p] = prod(o, n * plane + p) + bias;
            }
        }
    }

    return g.record(std::move(out), {x, w, b}, [=](const Tensor& dout) {
        RowMat dprod(out_ch, cols);
        for (int n = 0; n < n_batch; ++n) {
            for (int o = 0; o < out_ch; ++o) {
                const double* src = dout.data() + (static_cast<std::size_t>(n) * out_ch + o) * plane;
                for (int p = 0; p < plane; ++p) {
                    dprod(o, n * plane + p) = src[p];
                }
            }
        }
        if (w->requires_grad) {
            as_matrix(w->grad_buffer(), out_ch, rows).noalias() +=
                dprod * ConstMatMap(col->data(), rows, cols).transpose();
        }
        if (b->requires_grad) {
            VecMap(b->grad_buffer().data(), out_ch) += dprod.rowwise().sum();
        }
        if (x->requires_grad) {
            RowMat dcol = as_matrix(w->value, out_ch, rows).transpose() * dprod;
            col2im(dcol.data(), n_batch, channels, height, width, k, stride, pad, out_h, out_w,
                   x->grad_buffer().data());
        }
    });
}

Var conv_transpose2x2(Graph& g, Var x, Var w, Var b) {
    const Tensor& xv = x->value;
    const Tensor& wv = w->value;
    expect_rank(xv, 4, "conv_transpose2x2 input");
    expect_rank(wv, 4, "conv_transpose2x2 weight");
    const int n_batch = xv.dim(0);
    const int channels = xv.dim(1);
    const int height = xv.dim(2);
    const int width = xv.dim(3);
    const int out_ch = wv.dim(1);
    if (wv.dim(0) != channels || wv.dim(2) != 2 || wv.dim(3) != 2 ||
        b->value.size() != static_cast<std::size_t>(out_ch)) {
        throw ShapeMismatch("conv_transpose2x2: weight " + shape_string(wv.shape()) + " incompatible with input " +
                            shape_string(xv.shape()));
    }
    const int plane = height * width;
    const int cols = n_batch * plane;
    const int taps = out_ch * 4;

    auto xmat = std::make_shared<RowMat>(channels, cols);
    for (int n = 0; n < n_batch; ++n) {
        for (int c = 0; c < channels; ++c) {
            const double* src = xv.data() + (static_cast<std::size_t>(n) * channels + c) * plane;
            for (int p = 0; p < plane; ++p) {
                (*xmat)(c, n * plane + p) = src[p];
            }
        }
    }
    RowMat y = as_matrix(wv, channels, taps).transpose() * (*xmat);

    const int oh = 2 * height;
    const int ow = 2 * width;
    Tensor out({n_batch, out_ch, oh, ow});
    for (int n = 0; n < n_batch; ++n) {
        for (int o = 0; o < out_ch; ++o) {
            double* dst = out.data() + (static_cast<std::size_t>(n) * out_ch + o) * oh * ow;
            const double bias = b->value[o];
            for (int a = 0; a < 2; ++a) {
                for (int bb = 0; bb < 2; ++bb) {
                    const int t = o * 4 + a * 2 + bb;
                    for (int i = 0; i < height; ++i) {
                        for (int j = 0; j < width; ++j) {
                            dst[(2 * i + a) * ow + 2 * j + bb] = y(t, n * plane + i * width + j) + bias;
                        }
                    }
                }
            }
        }
    }

    return g.record(std::move(out), {x, w, b}, [=](const Tensor& dout) {
        RowMat dy(taps, cols);
        for (int n = 0; n < n_batch; ++n) {
            for (int o = 0; o < out_ch; ++o) {
                const double* src = dout.data() + (static_cast<std::size_t>(n) * out_ch + o) * oh * ow;
                for (int a = 0; a < 2; ++a) {
                    for (int bb = 0; bb < 2; ++bb) {
                        const int t = o * 4 + a * 2 + bb;
                        for (int i = 0; i < height; ++i) {
                            for (int j = 0; j < width; ++j) {
                                dy(t, n * plane + i * width + j) = src[(2 * i + a) * ow + 2 * j + bb];
                            }
                        }
                    }
                }
            }
        }
        if (w->requires_grad) {
            as_matrix(w->grad_buffer(), channels, taps).noalias() += (*xmat) * dy.transpose();
        }
        if (b->requires_grad) {
            Tensor& db = b->grad_buffer();
            Eigen::VectorXd sums = dy.rowwise().sum();
            for (int o = 0; o < out_ch; ++o) {
                db[o] += sums(o * 4) + sums(o * 4 + 1) + sums(o * 4 + 2) + sums(o * 4 + 3);
            }
        }
        if (x->requires_grad) {
            RowMat dx = as_matrix(w->value, channels, taps) * dy;
            Tensor& gx = x->grad_buffer();
            for (int n = 0; n < n_batch; ++n) {
                for (int c = 0; c < channels; ++c) {
                    double* dst = gx.data() + (static_cast<std::size_t>(n) * channels + c) * plane;
                    for (int p = 0; p < plane; ++p) {
                        dst[p] += dx(c, n * plane + p);
                    }
                }
            }
        }
    });
}

Var linear(Graph& g, Var x, Var w, Var b) {
    const Tensor& xv = x->value;
    const Tensor& wv = w->value;
    expect_rank(xv, 2, "linear input");
    expect_rank(wv, 2, "linear weight");
    const int n = xv.dim(0);
    const int in = xv.dim(1);
    const int out_dim = wv.dim(0);
    if (wv.dim(1) != in || b->value.size() != static_cast<std::size_t>(out_dim)) {
        throw ShapeMismatch("linear: weight " + shape_string(wv.shape()) + " incompatible with input " +
                            shape_string(xv.shape()));
    }
    Tensor out({n, out_dim});
    as_matrix(out, n, out_dim).noalias() = as_matrix(xv, n, in) * as_matrix(wv, out_dim, in).transpose();
    as_matrix(out, n, out_dim).rowwise() += ConstVecMap(b->value.data(), out_dim).transpose();

    return g.record(std::move(out), {x, w, b}, [=](const Tensor& dout) {
        const ConstMatMap dy = as_matrix(dout, n, out_dim);
        if (w->requires_grad) {
            as_matrix(w->grad_buffer(), out_dim, in).noalias() += dy.transpose() * as_matrix(x->value, n, in);
        }
        if (b->requires_grad) {
            VecMap(b->grad_buffer().data(), out_dim) += dy.colwise().sum().transpose();
        }
        if (x->requires_grad) {
            as_matrix(x->grad_buffer(), n, in).noalias() += dy * as_matrix(w->value, out_dim, in);
        }
    });
}

namespace {
PatternFreeze* active_freeze = nullptr;
} // namespace

PatternFreeze::PatternFreeze() : previous_(active_freeze) { active_freeze = this; }

PatternFreeze::~PatternFreeze() { active_freeze = previous_; }

void PatternFreeze::replay() {
    replaying_ = true;
    relu_pos_ = 0;
    match_pos_ = 0;
}

std::vector<char> PatternFreeze::relu_mask(std::vector<char> fresh) {
    PatternFreeze* f = active_freeze;
    if (f == nullptr) {
        return fresh;
    }
    if (!f->replaying_) {
        f->relu_masks_.push_back(fresh);
        return fresh;
    }
    if (f->relu_pos_ < f->relu_masks_.size() && f->relu_masks_[f->relu_pos_].size() == fresh.size()) {
        return f->relu_masks_[f->relu_pos_++];
    }
    ++f->relu_pos_;
    return fresh;
}

std::vector<int> PatternFreeze::matches(std::vector<int> fresh) {
    PatternFreeze* f = active_freeze;
    if (f == nullptr) {
        return fresh;
    }
    if (!f->replaying_) {
        f->matches_.push_back(fresh);
        return fresh;
    }
    if (f->match_pos_ < f->matches_.size() && f->matches_[f->match_pos_].size() == fresh.size()) {
        return f->matches_[f->match_pos_++];
    }
    ++f->match_pos_;
    return fresh;
}

Var relu(Graph& g, Var x) {
    Tensor out = x->value;
    std::vector<char> mask(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        mask[i] = out[i] > 0.0 ? 1 : 0;
    }
    if (active_freeze != nullptr) {
        mask = PatternFreeze::relu_mask(std::move(mask));
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!mask[i]) {
            out[i] = 0.0;
        }
    }
    return g.record(std::move(out), {x}, [x, mask = std::move(mask)](const Tensor& dout) {
        Tensor& gx = x->grad_buffer();
        for (std::size_t i = 0; i < mask.size(); ++i) {
            if (mask[i]) {
                gx[i] += dout[i];
            }
        }
    });
}

Var add(Graph& g, Var a, Var b) {
    if (!a->value.same_shape(b->value)) {
        throw ShapeMismatch("add: " + shape_string(a->value.shape()) + " vs " + shape_string(b->value.shape()));
    }
    Tensor out = a->value;
    out += b->value;
    return g.record(std::move(out), {a, b}, [=](const Tensor& dout) {
        if (a->requires_grad) {
            a->grad_buffer() += dout;
        }
        if (b->requires_grad) {
            b->grad_buffer() += dout;
        }
    });
}

Var weighted_sum(Graph& g, const std::vector<std::pair<Var, double>>& terms) {
    double total = 0.0;
    std::vector<Var> inputs;
    for (const auto& [v, weight] : terms) {
        if (v->value.size() != 1) {
            throw ShapeMismatch("weighted_sum: inputs must be scalars");
        }
        total += weight * v->value[0];
        inputs.push_back(v);
    }
    return g.record(Tensor({1}, total), inputs, [terms](const Tensor& dout) {
        for (const auto& [v, weight] : terms) {
            if (weight != 0.0 && v->requires_grad) {
                v->grad_buffer()[0] += weight * dout[0];
            }
        }
    });
}

Var dot_constant(Graph& g, Var x, const Tensor& weights) {
    if (weights.size() != x->value.size()) {
        throw ShapeMismatch("dot_constant: size mismatch");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        total += weights[i] * x->value[i];
    }
    return g.record(Tensor({1}, total), {x}, [=](const Tensor& dout) {
        Tensor& gx = x->grad_buffer();
        for (std::size_t i = 0; i < weights.size(); ++i) {
            gx[i] += weights[i] * dout[0];
        }
    });
}

Var select(Graph& g, Var x, int index) {
    const Tensor& xv = x->value;
    if (xv.rank() < 1 || index < 0 || index >= xv.dim(0)) {
        throw InvalidArgument("select: index " + std::to_string(index) + " out of range for " +
                              shape_string(xv.shape()));
    }
    std::vector<int> shape(xv.shape().begin() + 1, xv.shape().end());
    const std::size_t stride = shape_numel(shape);
    const std::size_t offset = stride * static_cast<std::size_t>(index);
    std::vector<double> values(xv.data() + offset, xv.data() + offset + stride);
    return g.record(Tensor(shape, std::move(values)), {x}, [=](const Tensor& dout) {
        double* dst = x->grad_buffer().data() + offset;
        for (std::size_t i = 0; i < stride; ++i) {
            dst[i] += dout[i];
        }
    });
}

Var roi_align(Graph& g, Var fmap, std::span<const Box> rois, int out_size, int stride, int sampling) {
    const Tensor& fv = fmap->value;
    expect_rank(fv, 3, "roi_align feature map");
    if (out_size < 1 || sampling < 1 || stride < 1) {
        throw InvalidArgument("roi_align: out_size, sampling and stride must be positive");
    }
    const int channels = fv.dim(0);
    const int height = fv.dim(1);
    const int width = fv.dim(2);
    const Box frame{0.0, 0.0, static_cast<double>(width * stride), static_cast<double>(height * stride)};
    const int k_count = static_cast<int>(rois.size());
    const int bins = out_size * out_size;
    const double inv = 1.0 / stride;
    const double scale = 1.0 / (sampling * sampling);

    // taps for bin (k, b) live in [offsets[k*bins+b], offsets[k*bins+b+1]).
    auto taps = std::make_shared<std::vector<SampleTap>>();
    auto offsets = std::make_shared<std::vector<std::size_t>>();
    offsets->reserve(static_cast<std::size_t>(k_count) * bins + 1);
    taps->reserve(static_cast<std::size_t>(k_count) * bins * sampling * sampling * 4);
    for (const Box& roi : rois) {
        require_valid(roi, "roi_align");
        if (intersection_area(roi, frame) <= 0.0) {
            throw InvalidArgument("roi_align: RoI lies entirely outside the frame");
        }
        const double start_x = roi.x1 * inv - 0.5;
        const double start_y = roi.y1 * inv - 0.5;
        const double bin_w = roi.width() * inv / out_size;
        const double bin_h = roi.height() * inv / out_size;
        for (int ph = 0; ph < out_size; ++ph) {
            for (int pw = 0; pw < out_size; ++pw) {
                offsets->push_back(taps->size());
                for (int iy = 0; iy < sampling; ++iy) {
                    const double y = start_y + ph * bin_h + (iy + 0.5) * bin_h / sampling;
                    for (int ix = 0; ix < sampling; ++ix) {
                        const double x = start_x + pw * bin_w + (ix + 0.5) * bin_w / sampling;
                        bilinear_taps(y, x, height, width, scale, *taps);
                    }
                }
            }
        }
    }
    offsets->push_back(taps->size());

    const std::size_t plane = static_cast<std::size_t>(height) * width;
    Tensor out({k_count, channels, out_size, out_size});
    for (int k = 0; k < k_count; ++k) {
        for (int c = 0; c < channels; ++c) {
            const double* src = fv.data() + c * plane;
            double* dst = out.data() + (static_cast<std::size_t>(k) * channels + c) * bins;
            for (int bin = 0; bin < bins; ++bin) {
                const std::size_t slot = static_cast<std::size_t>(k) * bins + bin;
                double acc = 0.0;
                for (std::size_t t = (*offsets)[slot]; t < (*offsets)[slot + 1]; ++t) {
                    acc += (*taps)[t].weight * src[(*taps)[t].index];
                }
                dst[bin] = acc;
            }
        }
    }

    return g.record(std::move(out), {fmap}, [=](const Tensor& dout) {
        Tensor& gf = fmap->grad_buffer();
        for (int k = 0; k < k_count; ++k) {
            for (int c = 0; c < channels; ++c) {
                double* dst = gf.data() + c * plane;
                const double* src = dout.data() + (static_cast<std::size_t>(k) * channels + c) * bins;
                for (int bin = 0; bin < bins; ++bin) {
                    const std::size_t slot = static_cast<std::size_t>(k) * bins + bin;
                    for (std::size_t t = (*offsets)[slot]; t < (*offsets)[slot + 1]; ++t) {
                        dst[(*taps)[t].index] += (*taps)[t].weight * src[bin];
                    }
                }
            }
        }
    });
}

Var upsample_bilinear(Graph& g, Var x, int out_size) {
    const Tensor& xv = x->value;
    expect_rank(xv, 4, "upsample_bilinear");
    const int in_size = xv.dim(2);
    if (xv.dim(3) != in_size || out_size < 1) {
        throw ShapeMismatch("upsample_bilinear: expects square grids, got " + shape_string(xv.shape()));
    }
    const int planes = xv.dim(0) * xv.dim(1);
    const auto axis = upsample_axis(in_size, out_size);
    const std::size_t in_plane = static_cast<std::size_t>(in_size) * in_size;
    const std::size_t out_plane = static_cast<std::size_t>(out_size) * out_size;

    Tensor out({xv.dim(0), xv.dim(1), out_size, out_size});
    for (int p = 0; p < planes; ++p) {
        const double* src = xv.data() + p * in_plane;
        double* dst = out.data() + p * out_plane;
        for (int i = 0; i < out_size; ++i) {
            const AxisInterp& ay = axis[i];
            for (int j = 0; j < out_size; ++j) {
                const AxisInterp& ax = axis[j];
                dst[i * out_size + j] = ay.w0 * (ax.w0 * src[ay.i0 * in_size + ax.i0] +
                                                 ax.w1 * src[ay.i0 * in_size + ax.i1]) +
                                        ay.w1 * (ax.w0 * src[ay.i1 * in_size + ax.i0] +
                                                 ax.w1 * src[ay.i1 * in_size + ax.i1]);
            }
        }
    }

    return g.record(std::move(out), {x}, [=](const Tensor& dout) {
        Tensor& gx = x->grad_buffer();
        for (int p = 0; p < planes; ++p) {
            double* dst = gx.data() + p * in_plane;
            const double* src = dout.data() + p * out_plane;
            for (int i = 0; i < out_size; ++i) {
                const AxisInterp& ay = axis[i];
                for (int j = 0; j < out_size; ++j) {
                    const AxisInterp& ax = axis[j];
                    const double d = src[i * out_size + j];
                    dst[ay.i0 * in_size + ax.i0] += ay.w0 * ax.w0 * d;
                    dst[ay.i0 * in_size + ax.i1] += ay.w0 * ax.w1 * d;
                    dst[ay.i1 * in_size + ax.i0] += ay.w1 * ax.w0 * d;
                    dst[ay.i1 * in_size + ax.i1] += ay.w1 * ax.w1 * d;
                }
            }
        }
    });
}

Var gather_positions(Graph& g, Var fmap, std::vector<int> positions, int grid) {
    const Tensor& fv = fmap->value;
    expect_rank(fv, 3, "gather_positions");
    const int channels = fv.dim(0);
    const std::size_t plane = static_cast<std::size_t>(fv.dim(1)) * fv.dim(2);
    const int bins = grid * grid;
    if (bins == 0 || positions.size() % bins != 0) {
        throw ShapeMismatch("gather_positions: position count not a multiple of grid size");
    }
    const int k_count = static_cast<int>(positions.size() / bins);
    for (int p : positions) {
        if (p < 0 || static_cast<std::size_t>(p) >= plane) {
            throw InvalidArgument("gather_positions: position out of range");
        }
    }
    Tensor out({k_count, channels, grid, grid});
    for (int k = 0; k < k_count; ++k) {
        for (int c = 0; c < channels; ++c) {
            double* dst = out.data() + (static_cast<std::size_t>(k) * channels + c) * bins;
            const double* src = fv.data() + c * plane;
            for (int b = 0; b < bins; ++b) {
                dst[b] = src[positions[static_cast<std::size_t>(k) * bins + b]];
            }
        }
    }
    return g.record(std::move(out), {fmap}, [=, positions = std::move(positions)](const Tensor& dout) {
        Tensor& gf = fmap->grad_buffer();
        for (int k = 0; k < k_count; ++k) {
            for (int c = 0; c < channels; ++c) {
                const double* src = dout.data() + (static_cast<std::size_t>(k) * channels + c) * bins;
                double* dst = gf.data() + c * plane;
                for (int b = 0; b < bins; ++b) {
                    dst[positions[static_cast<std::size_t>(k) * bins + b]] += src[b];
                }
            }
        }
    });
}

Var adaptive_avg_pool(Graph& g, Var x, int out_size) {
    const Tensor& xv = x->value;
    expect_rank(xv, 4, "adaptive_avg_pool");
    const int k_count = xv.dim(0);
    const int channels = xv.dim(1);
    const int in_size = xv.dim(2);
    if (xv.dim(3) != in_size || out_size < 1 || out_size > in_size) {
        throw ShapeMismatch("adaptive_avg_pool: cannot pool " + shape_string(xv.shape()) + " to " +
                            std::to_string(out_size));
    }
    std::vector<int> lo(out_size), hi(out_size);
    for (int i = 0; i < out_size; ++i) {
        lo[i] = (i * in_size) / out_size;
        hi[i] = ((i + 1) * in_size + out_size - 1) / out_size;
    }
    const int cells = out_size * out_size;
    const std::size_t in_plane = static_cast<std::size_t>(in_size) * in_size;
    Tensor out({k_count, channels * cells});
    for (int k = 0; k < k_count; ++k) {
        for (int c = 0; c < channels; ++c) {
            const double* src = xv.data() + (static_cast<std::size_t>(k) * channels + c) * in_plane;
            for (int oy = 0; oy < out_size; ++oy) {
                for (int ox = 0; ox < out_size; ++ox) {
                    double acc = 0.0;
                    for (int y = lo[oy]; y < hi[oy]; ++y) {
                        for (int xx = lo[ox]; xx < hi[ox]; ++xx) {
                            acc += src[y * in_size + xx];
                        }
                    }
                    const double count = static_cast<double>((hi[oy] - lo[oy]) * (hi[ox] - lo[ox]));
                    out[static_cast<std::size_t>(k) * channels * cells + c * cells + oy * out_size + ox] =
                        acc / count;
                }
            }
        }
    }
    return g.record(std::move(out), {x}, [=](const Tensor& dout) {
        Tensor& gx = x->grad_buffer();
        for (int k = 0; k < k_count; ++k) {
            for (int c = 0; c < channels; ++c) {
                double* dst = gx.data() + (static_cast<std::size_t>(k) * channels + c) * in_plane;
                for (int oy = 0; oy < out_size; ++oy) {
                    for (int ox = 0; ox < out_size; ++ox) {
                        const double count = static_cast<double>((hi[oy] - lo[oy]) * (hi[ox] - lo[ox]));
                        const double d =
                            dout[static_cast<std::size_t>(k) * channels * cells + c * cells + oy * out_size + ox] /
                            count;
                        for (int y = lo[oy]; y < hi[oy]; ++y) {
                            for (int xx = lo[ox]; xx < hi[ox]; ++xx) {
                                dst[y * in_size + xx] += d;
                            }
                        }
                    }
                }
            }
        }
    });
}

Var temporal_attention(Graph& g, Var target, const std::vector<Var>& support, const AttentionWeights& w,
                       int heads) {
    const Tensor& tv = target->value;
    expect_rank(tv, 4, "temporal_attention target");
    const int channels = tv.dim(1);
    if (heads < 1 || channels % heads != 0) {
        throw InvalidArgument("temporal_attention: channel count " + std::to_string(channels) +
                              " not divisible by head count " + std::to_string(heads));
    }
    for (Var s : support) {
        if (!s->value.same_shape(tv)) {
            throw ShapeMismatch("temporal_attention: support grid " + shape_string(s->value.shape()) +
                                " does not match target " + shape_string(tv.shape()));
        }
    }
    for (Var p : {w.wq, w.wk, w.wv, w.wo}) {
        if (p->value.rank() != 2 || p->value.dim(0) != channels || p->value.dim(1) != channels) {
            throw ShapeMismatch("temporal_attention: projection " + shape_string(p->value.shape()) +
                                " does not match channel count " + std::to_string(channels));
        }
    }

    const int tokens = static_cast<int>(support.size()) + 1;
    const int head_dim = channels / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

    struct Cache {
        std::vector<RowMat> x;  // token inputs, x[0] is the target
        RowMat q;
        std::vector<RowMat> k;
        std::vector<RowMat> v;
        RowMat attn;  // [B, heads * tokens]
        RowMat mixed; // [B, C]
    };
    auto cache = std::make_shared<Cache>();
    cache->x.push_back(grid_to_rows(tv));
    for (Var s : support) {
        cache->x.push_back(grid_to_rows(s->value));
    }
    const Eigen::Index rows = cache->x[0].rows();

    auto project = [&](const RowMat& x, Var wm, Var bv) {
        RowMat y = x * as_matrix(wm->value, channels, channels).transpose();
        y.rowwise() += ConstVecMap(bv->value.data(), channels).transpose();
        return y;
    };
    cache->q = project(cache->x[0], w.wq, w.bq);
    for (int t = 0; t < tokens; ++t) {
        cache->k.push_back(project(cache->x[t], w.wk, w.bk));
        cache->v.push_back(project(cache->x[t], w.wv, w.bv));
    }

    cache->attn.resize(rows, heads * tokens);
    cache->mixed = RowMat::Zero(rows, channels);
    std::vector<double> score(tokens);
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (int h = 0; h < heads; ++h) {
            const int c0 = h * head_dim;
            double best = -INFINITY;
            for (int t = 0; t < tokens; ++t) {
                double s = 0.0;
                for (int d = 0; d < head_dim; ++d) {
                    s += cache->q(r, c0 + d) * cache->k[t](r, c0 + d);
                }
                score[t] = s * inv_sqrt;
                best = std::max(best, score[t]);
            }
            double denom = 0.0;
            for (int t = 0; t < tokens; ++t) {
                score[t] = std::exp(score[t] - best);
                denom += score[t];
            }
            for (int t = 0; t < tokens; ++t) {
                const double a = score[t] / denom;
                cache->attn(r, h * tokens + t) = a;
                for (int d = 0; d < head_dim; ++d) {
                    cache->mixed(r, c0 + d) += a * cache->v[t](r, c0 + d);
                }
            }
        }
    }
    RowMat proj = project(cache->mixed, w.wo, w.bo);

    Tensor out = tv;
    add_rows_to_grid(proj, out);

    std::vector<Var> inputs{target, w.wq, w.bq, w.wk, w.bk, w.wv, w.bv, w.wo, w.bo};
    inputs.insert(inputs.end(), support.begin(), support.end());

    return g.record(std::move(out), inputs, [=](const Tensor& dout) {
        Cache& cc = *cache;
        const RowMat dy = grid_to_rows(dout);

        if (target->requires_grad) {
            target->grad_buffer() += dout;
        }
        if (w.wo->requires_grad) {
            as_matrix(w.wo->grad_buffer(), channels, channels).noalias() += dy.transpose() * cc.mixed;
        }
        if (w.bo->requires_grad) {
            VecMap(w.bo->grad_buffer().data(), channels) += dy.colwise().sum().transpose();
        }
        const RowMat dmixed = dy * as_matrix(w.wo->value, channels, channels);

        RowMat dq = RowMat::Zero(rows, channels);
        std::vector<RowMat> dk(tokens, RowMat::Zero(rows, channels));
        std::vector<RowMat> dv(tokens, RowMat::Zero(rows, channels));
        std::vector<double> da(tokens);
        for (Eigen::Index r = 0; r < rows; ++r) {
            for (int h = 0; h < heads; ++h) {
                const int c0 = h * head_dim;
                double weighted = 0.0;
                for (int t = 0; t < tokens; ++t) {
                    const double a = cc.attn(r, h * tokens + t);
                    double s = 0.0;
                    for (int d = 0; d < head_dim; ++d) {
                        s += dmixed(r, c0 + d) * cc.v[t](r, c0 + d);
                        dv[t](r, c0 + d) += a * dmixed(r, c0 + d);
                    }
                    da[t] = s;
                    weighted += a * s;
                }
                for (int t = 0; t < tokens; ++t) {
                    const double ds = cc.attn(r, h * tokens + t) * (da[t] - weighted) * inv_sqrt;
                    for (int d = 0; d < head_dim; ++d) {
                        dq(r, c0 + d) += ds * cc.k[t](r, c0 + d);
                        dk[t](r, c0 + d) += ds * cc.q(r, c0 + d);
                    }
                }
            }
        }

        std::vector<RowMat> dx(tokens, RowMat::Zero(rows, channels));
        auto back_project = [&](const RowMat& dyp, const RowMat& x, Var wm, Var bv, RowMat& dxt) {
            if (wm->requires_grad) {
                as_matrix(wm->grad_buffer(), channels, channels).noalias() += dyp.transpose() * x;
            }
            if (bv->requires_grad) {
                VecMap(bv->grad_buffer().data(), channels) += dyp.colwise().sum().transpose();
            }
            dxt.noalias() += dyp * as_matrix(wm->value, channels, channels);
        };
        back_project(dq, cc.x[0], w.wq, w.bq, dx[0]);
        for (int t = 0; t < tokens; ++t) {
            back_project(dk[t], cc.x[t], w.wk, w.bk, dx[t]);
            back_project(dv[t], cc.x[t], w.wv, w.bv, dx[t]);
        }
        if (target->requires_grad) {
            add_rows_to_grid(dx[0], target->grad_buffer());
        }
        for (int t = 1; t < tokens; ++t) {
            Var s = support[t - 1];
            if (s->requires_grad) {
                add_rows_to_grid(dx[t], s->grad_buffer());
            }
        }
    });
}

double softmax_cross_entropy_value(const Tensor& logits, std::span<const int> labels,
                                   std::span<const double> sample_weights, Tensor* grad) {
    if (logits.rank() < 2) {
        throw ShapeMismatch("softmax_cross_entropy: logits need a class axis, got " + shape_string(logits.shape()));
    }
    const int n = logits.dim(0);
    const int classes = logits.dim(1);
    const std::size_t spatial = logits.size() / (static_cast<std::size_t>(n) * classes);
    if (labels.size() != static_cast<std::size_t>(n) * spatial) {
        throw ShapeMismatch("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                            shape_string(logits.shape()));
    }
    if (!sample_weights.empty() && sample_weights.size() != static_cast<std::size_t>(n)) {
        throw ShapeMismatch("softmax_cross_entropy: sample weight count mismatch");
    }
    double weight_total = 0.0;
    for (int i = 0; i < n; ++i) {
        weight_total += sample_weights.empty() ? 1.0 : sample_weights[i];
    }
    if (n == 0 || weight_total <= 0.0) {
        throw InvalidArgument("softmax_cross_entropy: no samples to average over");
    }
    const double norm = 1.0 / (weight_total * static_cast<double>(spatial));
    if (grad != nullptr) {
        *grad = Tensor(logits.shape());
    }

    double loss = 0.0;
    std::vector<double> probs(classes);
    for (int i = 0; i < n; ++i) {
        const double wi = sample_weights.empty() ? 1.0 : sample_weights[i];
        if (wi == 0.0) {
            continue;
        }
        const double* base = logits.data() + static_cast<std::size_t>(i) * classes * spatial;
        for (std::size_t s = 0; s < spatial; ++s) {
            const int label = labels[static_cast<std::size_t>(i) * spatial + s];
            if (label < 0 || label >= classes) {
                throw InvalidArgument("softmax_cross_entropy: label " + std::to_string(label) + " outside [0," +
                                      std::to_string(classes) + ")");
            }
            double best = -INFINITY;
            for (int c = 0; c < classes; ++c) {
                best = std::max(best, base[c * spatial + s]);
            }
            double denom = 0.0;
            for (int c = 0; c < classes; ++c) {
                probs[c] = std::exp(base[c * spatial + s] - best);
                denom += probs[c];
            }
            loss += wi * (std::log(denom) + best - base[label * spatial + s]);
            if (grad != nullptr) {
                double* gb = grad->data() + static_cast<std::size_t>(i) * classes * spatial;
                for (int c = 0; c < classes; ++c) {
                    gb[c * spatial + s] = wi * norm * (probs[c] / denom - (c == label ? 1.0 : 0.0));
                }
            }
        }
    }
    return loss * norm;
}

Var softmax_cross_entropy(Graph& g, Var logits, std::span<const int> labels, std::span<const double> sample_weights) {
    auto grad = std::make_shared<Tensor>();
    const double loss = softmax_cross_entropy_value(logits->value, labels, sample_weights, grad.get());
    return g.record(Tensor({1}, loss), {logits}, [=](const Tensor& dout) {
        Tensor& gl = logits->grad_buffer();
        for (std::size_t i = 0; i < gl.size(); ++i) {
            gl[i] += dout[0] * (*grad)[i];
        }
    });
}

Var smooth_l1(Graph& g, Var pred, const Tensor& target, std::span<const double> row_weights, double beta,
              double normalizer) {
    const Tensor& pv = pred->value;
    if (!pv.same_shape(target) || pv.rank() != 2) {
        throw ShapeMismatch("smooth_l1: prediction " + shape_string(pv.shape()) + " vs target " +
                            shape_string(target.shape()));
    }
    const int n = pv.dim(0);
    const int d = pv.dim(1);
    if (row_weights.size() != static_cast<std::size_t>(n) || normalizer <= 0.0 || beta <= 0.0) {
        throw InvalidArgument("smooth_l1: bad row weights, beta or normalizer");
    }
    auto grad = std::make_shared<Tensor>(pv.shape());
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        if (row_weights[i] == 0.0) {
            continue;
        }
        for (int j = 0; j < d; ++j) {
            const double diff = pv[i * d + j] - target[i * d + j];
            const double ad = std::abs(diff);
            if (ad < beta) {
                loss += row_weights[i] * 0.5 * diff * diff / beta;
                (*grad)[i * d + j] = row_weights[i] * diff / beta / normalizer;
            } else {
                loss += row_weights[i] * (ad - 0.5 * beta);
                (*grad)[i * d + j] = row_weights[i] * (diff > 0 ? 1.0 : -1.0) / normalizer;
            }
        }
    }
    return g.record(Tensor({1}, loss / normalizer), {pred}, [=](const Tensor& dout) {
        Tensor& gp = pred->grad_buffer();
        for (std::size_t i = 0; i < gp.size(); ++i) {
            gp[i] += dout[0] * (*grad)[i];
        }
    });
}

Var bce_with_logits(Graph& g, Var logits, std::span<const double> targets, std::span<const double> weights,
                    double normalizer) {
    const Tensor& lv = logits->value;
    if (targets.size() != lv.size() || weights.size() != lv.size() || normalizer <= 0.0) {
        throw ShapeMismatch("bce_with_logits: size mismatch or bad normalizer");
    }
    auto grad = std::make_shared<Tensor>(lv.shape());
    double loss = 0.0;
    for (std::size_t i = 0; i < lv.size(); ++i) {
        if (weights[i] == 0.0) {
            continue;
        }
        const double z = lv[i];
        // log(1 + exp(-|z|)) + max(z, 0) - z * y
        loss += weights[i] * (std::log1p(std::exp(-std::abs(z))) + std::max(z, 0.0) - z * targets[i]);
        const double p = 1.0 / (1.0 + std::exp(-z));
        (*grad)[i] = weights[i] * (p - targets[i]) / normalizer;
    }
    return g.record(Tensor({1}, loss / normalizer), {logits}, [=](const Tensor& dout) {
        Tensor& gl = logits->grad_buffer();
        for (std::size_t i = 0; i < gl.size(); ++i) {
            gl[i] += dout[0] * (*grad)[i];
        }
    });
}

} // namespace boxmask::ops
