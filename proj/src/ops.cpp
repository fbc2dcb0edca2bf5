#include "mudaf/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mudaf/errors.hpp"

namespace mudaf {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

void require_rank2(const Tensor& t, const char* op) {
    require(t.rank() == 2, ErrorKind::dimension,
            std::string(op) + " expects a rank-2 tensor, got " + shape_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require(a.shape() == b.shape(), ErrorKind::dimension,
            std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

void require_finite(const Tensor& t, const char* op) {
    require(t.all_finite(), ErrorKind::numeric, std::string(op) + ": non-finite input");
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    require(b.shape()[0] == k, ErrorKind::dimension,
            "matmul: inner extents disagree " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
    std::vector<double> out(m * n);
    ConstMatMap A(a.data().data(), m, k), B(b.data().data(), k, n);
    MatMap(out.data(), m, n).noalias() = A * B;
    return record_op("matmul", {m, n}, std::move(out), {a, b},
                     [a, b, m, k, n](std::span<const double> g, std::span<const std::span<double>> grads) {
                         ConstMatMap G(g.data(), m, n);
                         if (!grads[0].empty()) {
                             MatMap(grads[0].data(), m, k).noalias() += G * ConstMatMap(b.data().data(), k, n).transpose();
                         }
                         if (!grads[1].empty()) {
                             MatMap(grads[1].data(), k, n).noalias() += ConstMatMap(a.data().data(), m, k).transpose() * G;
                         }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    const auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return record_op("add", a.shape(), std::move(out), {a, b},
                     [](std::span<const double> g, std::span<const std::span<double>> grads) {
                         for (const auto& dst : grads) {
                             if (dst.empty()) continue;
                             for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                         }
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    const auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return record_op("mul", a.shape(), std::move(out), {a, b},
                     [a, b](std::span<const double> g, std::span<const std::span<double>> grads) {
                         const auto x = a.data(), y = b.data();
                         if (!grads[0].empty()) {
                             for (std::size_t i = 0; i < g.size(); ++i) grads[0][i] += g[i] * y[i];
                         }
                         if (!grads[1].empty()) {
                             for (std::size_t i = 0; i < g.size(); ++i) grads[1][i] += g[i] * x[i];
                         }
                     });
}

Tensor scale(const Tensor& a, double factor) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) v *= factor;
    return record_op("scale", a.shape(), std::move(out), {a},
                     [factor](std::span<const double> g, std::span<const std::span<double>> grads) {
                         for (std::size_t i = 0; i < g.size(); ++i) grads[0][i] += g[i] * factor;
                     });
}

Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) total += v;
    return record_op("sum", {1}, {total}, {a}, [](std::span<const double> g, std::span<const std::span<double>> grads) {
        for (double& d : grads[0]) d += g[0];
    });
}

Tensor silu(const Tensor& a) {
    const auto x = a.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / (1.0 + std::exp(-x[i]));
    return record_op("silu", a.shape(), std::move(out), {a},
                     [a](std::span<const double> g, std::span<const std::span<double>> grads) {
                         const auto x = a.data();
                         for (std::size_t i = 0; i < g.size(); ++i) {
                             const double s = 1.0 / (1.0 + std::exp(-x[i]));
                             grads[0][i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
                         }
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
    require(shape_numel(shape) == a.numel(), ErrorKind::dimension,
            "reshape: " + shape_string(a.shape()) + " cannot become " + shape_string(shape));
    return record_op("reshape", std::move(shape), a.to_vector(), {a},
                     [](std::span<const double> g, std::span<const std::span<double>> grads) {
                         for (std::size_t i = 0; i < g.size(); ++i) grads[0][i] += g[i];
                     });
}

Tensor softmax(const Tensor& x, int axis) {
    require(x.rank() == 1 || x.rank() == 2, ErrorKind::dimension, "softmax expects rank 1 or 2");
    require_finite(x, "softmax");
    const int rank = static_cast<int>(x.rank());
    if (axis < 0) axis += rank;
    require(axis >= 0 && axis < rank, ErrorKind::usage, "softmax: axis out of range");
    // Slices are addressed as (outer, inner) with the reduced axis in between.
    const std::size_t len = x.shape()[axis];
    const std::size_t inner = (rank == 2 && axis == 0) ? x.shape()[1] : 1;
    const std::size_t outer = x.numel() / (len * inner);
    const auto in = x.data();
    std::vector<double> out(in.size());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * len * inner + i;
            double peak = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < len; ++j) peak = std::max(peak, in[base + j * inner]);
            double total = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                const double e = std::exp(in[base + j * inner] - peak);
                out[base + j * inner] = e;
                total += e;
            }
            for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
        }
    }
    auto result = std::make_shared<std::vector<double>>(out);
    return record_op("softmax", x.shape(), std::move(out), {x},
                     [result, len, inner, outer](std::span<const double> g, std::span<const std::span<double>> grads) {
                         const auto& y = *result;
                         for (std::size_t o = 0; o < outer; ++o) {
                             for (std::size_t i = 0; i < inner; ++i) {
                                 const std::size_t base = o * len * inner + i;
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
                                 for (std::size_t j = 0; j < len; ++j) {
                                     const std::size_t p = base + j * inner;
                                     grads[0][p] += y[p] * (g[p] - dot);
                                 }
                             }
                         }
                     });
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
    require_rank2(x, "rms_norm");
    const std::size_t rows = x.shape()[0], d = x.shape()[1];
    require(gain.numel() == d, ErrorKind::dimension, "rms_norm: gain width does not match input");
    const auto in = x.data(), w = gain.data();
    std::vector<double> out(in.size());
    auto inv_rms = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double ms = 0.0;
        for (std::size_t j = 0; j < d; ++j) ms += in[r * d + j] * in[r * d + j];
        const double inv = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
        (*inv_rms)[r] = inv;
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = in[r * d + j] * inv * w[j];
    }
    return record_op(
        "rms_norm", x.shape(), std::move(out), {x, gain},
        [x, gain, inv_rms, rows, d](std::span<const double> g, std::span<const std::span<double>> grads) {
            const auto in = x.data(), w = gain.data();
            for (std::size_t r = 0; r < rows; ++r) {
                const double inv = (*inv_rms)[r];
                const double* xr = in.data() + r * d;
                const double* gr = g.data() + r * d;
                if (!grads[0].empty()) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < d; ++j) dot += gr[j] * w[j] * xr[j];
                    const double coeff = inv * inv * inv * dot / static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) grads[0][r * d + j] += inv * w[j] * gr[j] - coeff * xr[j];
                }
                if (!grads[1].empty()) {
                    for (std::size_t j = 0; j < d; ++j) grads[1][j] += gr[j] * xr[j] * inv;
                }
            }
        });
}

Tensor embedding(const Tensor& table, std::span<const TokenId> ids) {
    require_rank2(table, "embedding");
    require(!ids.empty(), ErrorKind::input, "embedding: empty token sequence");
    const std::size_t vocab = table.shape()[0], d = table.shape()[1];
    std::vector<double> out(ids.size() * d);
    const auto w = table.data();
    for (std::size_t t = 0; t < ids.size(); ++t) {
        require(ids[t] < vocab, ErrorKind::input,
                "token id " + std::to_string(ids[t]) + " out of range for vocabulary of " + std::to_string(vocab));
        std::copy_n(w.begin() + ids[t] * d, d, out.begin() + t * d);
    }
    std::vector<TokenId> kept(ids.begin(), ids.end());
    return record_op("embedding", {ids.size(), d}, std::move(out), {table},
                     [kept = std::move(kept), d](std::span<const double> g, std::span<const std::span<double>> grads) {
                         for (std::size_t t = 0; t < kept.size(); ++t) {
                             double* dst = grads[0].data() + kept[t] * d;
                             for (std::size_t j = 0; j < d; ++j) dst[j] += g[t * d + j];
                         }
                     });
}

Tensor rope(const Tensor& x, std::size_t d_head, double base) {
    require_rank2(x, "rope");
    const std::size_t seq = x.shape()[0], width = x.shape()[1];
    require(d_head > 0 && d_head % 2 == 0 && width % d_head == 0, ErrorKind::dimension,
            "rope: width must be a multiple of an even d_head");
    const std::size_t half = d_head / 2;
    auto table = std::make_shared<std::vector<double>>(seq * half * 2);
    for (std::size_t t = 0; t < seq; ++t) {
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d_head));
            const double angle = static_cast<double>(t) * freq;
            (*table)[(t * half + i) * 2] = std::cos(angle);
            (*table)[(t * half + i) * 2 + 1] = std::sin(angle);
        }
    }
    const auto in = x.data();
    std::vector<double> out(in.size());
    const std::size_t blocks = width / d_head;
    for (std::size_t t = 0; t < seq; ++t) {
        for (std::size_t b = 0; b < blocks; ++b) {
            const std::size_t off = t * width + b * d_head;
            for (std::size_t i = 0; i < half; ++i) {
                const double c = (*table)[(t * half + i) * 2], s = (*table)[(t * half + i) * 2 + 1];
                const double x1 = in[off + i], x2 = in[off + i + half];
                out[off + i] = x1 * c - x2 * s;
                out[off + i + half] = x1 * s + x2 * c;
            }
        }
    }
    return record_op("rope", x.shape(), std::move(out), {x},
                     [table, seq, width, d_head, half, blocks](std::span<const double> g,
                                                               std::span<const std::span<double>> grads) {
                         for (std::size_t t = 0; t < seq; ++t) {
                             for (std::size_t b = 0; b < blocks; ++b) {
                                 const std::size_t off = t * width + b * d_head;
                                 for (std::size_t i = 0; i < half; ++i) {
                                     const double c = (*table)[(t * half + i) * 2], s = (*table)[(t * half + i) * 2 + 1];
                                     const double g1 = g[off + i], g2 = g[off + i + half];
                                     grads[0][off + i] += g1 * c + g2 * s;
                                     grads[0][off + i + half] += -g1 * s + g2 * c;
                                 }
                             }
                         }
                     });
}

Tensor cross_entropy_masked(const Tensor& logits, std::span<const TokenId> targets, const std::vector<bool>& mask) {
    require_rank2(logits, "cross_entropy_masked");
    const std::size_t rows = logits.shape()[0], vocab = logits.shape()[1];
    require(targets.size() == rows && mask.size() == rows, ErrorKind::dimension,
            "cross_entropy_masked: targets and mask must have one entry per row");
    std::size_t active = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        require(targets[r] < vocab, ErrorKind::input, "cross_entropy_masked: target id out of vocabulary range");
        ++active;
    }
    require(active > 0, ErrorKind::empty_loss, "cross_entropy_masked: every position is masked");
    require_finite(logits, "cross_entropy_masked");

    const auto z = logits.data();
    auto probs = std::make_shared<std::vector<double>>(rows * vocab, 0.0);
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        const double* zr = z.data() + r * vocab;
        const double peak = *std::max_element(zr, zr + vocab);
        double denom = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) {
            const double e = std::exp(zr[j] - peak);
            (*probs)[r * vocab + j] = e;
            denom += e;
        }
        for (std::size_t j = 0; j < vocab; ++j) (*probs)[r * vocab + j] /= denom;
        total += (std::log(denom) + peak) - zr[targets[r]];
    }
    const double n = static_cast<double>(active);
    std::vector<TokenId> kept(targets.begin(), targets.end());
    return record_op("cross_entropy_masked", {1}, {total / n}, {logits},
                     [probs, kept = std::move(kept), mask, rows, vocab, n](std::span<const double> g,
                                                                           std::span<const std::span<double>> grads) {
                         const double coeff = g[0] / n;
                         for (std::size_t r = 0; r < rows; ++r) {
                             if (!mask[r]) continue;
                             for (std::size_t j = 0; j < vocab; ++j) grads[0][r * vocab + j] += coeff * (*probs)[r * vocab + j];
                             grads[0][r * vocab + kept[r]] -= coeff;
                         }
                     });
}

Tensor cosine_similarity(const Tensor& u, const Tensor& v, double norm_floor) {
    require(u.numel() == v.numel(), ErrorKind::dimension, "cosine_similarity: length mismatch");
    const auto a = u.data(), b = v.data();
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        nu += a[i] * a[i];
        nv += b[i] * b[i];
    }
    nu = std::sqrt(nu);
    nv = std::sqrt(nv);
    require(nu > norm_floor && nv > norm_floor, ErrorKind::degenerate_input, "cosine_similarity: zero-norm vector");
    const double c = dot / (nu * nv);
    return record_op("cosine_similarity", {1}, {c}, {u, v},
                     [u, v, nu, nv, c](std::span<const double> g, std::span<const std::span<double>> grads) {
                         const auto a = u.data(), b = v.data();
                         if (!grads[0].empty()) {
                             for (std::size_t i = 0; i < a.size(); ++i) grads[0][i] += g[0] * (b[i] / (nu * nv) - c * a[i] / (nu * nu));
                         }
                         if (!grads[1].empty()) {
                             for (std::size_t i = 0; i < b.size(); ++i) grads[1][i] += g[0] * (a[i] / (nu * nv) - c * b[i] / (nv * nv));
                         }
                     });
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
    require_rank2(x, "slice_cols");
    const std::size_t rows = x.shape()[0], width = x.shape()[1];
    require(count > 0 && start + count <= width, ErrorKind::dimension, "slice_cols: column range out of bounds");
    const auto in = x.data();
    std::vector<double> out(rows * count);
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(in.begin() + r * width + start, count, out.begin() + r * count);
    return record_op("slice_cols", {rows, count}, std::move(out), {x},
                     [rows, width, start, count](std::span<const double> g, std::span<const std::span<double>> grads) {
                         for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t j = 0; j < count; ++j) grads[0][r * width + start + j] += g[r * count + j];
                         }
                     });
}

Tensor row(const Tensor& x, std::size_t index) {
    require_rank2(x, "row");
    const std::size_t width = x.shape()[1];
    require(index < x.shape()[0], ErrorKind::dimension, "row: index out of range");
    std::vector<double> out(x.data().begin() + index * width, x.data().begin() + (index + 1) * width);
    return record_op("row", {width}, std::move(out), {x},
                     [index, width](std::span<const double> g, std::span<const std::span<double>> grads) {
                         for (std::size_t j = 0; j < width; ++j) grads[0][index * width + j] += g[j];
                     });
}

Tensor mean_rows(const Tensor& x, std::size_t begin, std::size_t end) {
    require_rank2(x, "mean_rows");
    require(begin < end, ErrorKind::usage, "mean_rows: empty row range");
    require(end <= x.shape()[0], ErrorKind::dimension, "mean_rows: row range out of bounds");
    const std::size_t width = x.shape()[1];
    const double inv = 1.0 / static_cast<double>(end - begin);
    const auto in = x.data();
    std::vector<double> out(width, 0.0);
    for (std::size_t r = begin; r < end; ++r) {
        for (std::size_t j = 0; j < width; ++j) out[j] += in[r * width + j];
    }
    for (double& v : out) v *= inv;
    return record_op("mean_rows", {width}, std::move(out), {x},
                     [begin, end, width, inv](std::span<const double> g, std::span<const std::span<double>> grads) {
                         for (std::size_t r = begin; r < end; ++r) {
                             for (std::size_t j = 0; j < width; ++j) grads[0][r * width + j] += g[j] * inv;
                         }
                     });
}

Tensor concat(const std::vector<Tensor>& parts) {
    require(!parts.empty(), ErrorKind::usage, "concat: no inputs");
    std::vector<double> out;
    std::vector<std::size_t> offsets;
    for (const Tensor& p : parts) {
        offsets.push_back(out.size());
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    const std::size_t total = out.size();
    return record_op("concat", {total}, std::move(out), parts,
                     [offsets](std::span<const double> g, std::span<const std::span<double>> grads) {
                         for (std::size_t i = 0; i < grads.size(); ++i) {
                             if (grads[i].empty()) continue;
                             for (std::size_t j = 0; j < grads[i].size(); ++j) grads[i][j] += g[offsets[i] + j];
                         }
                     });
}

AttentionOutput causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionGeometry& geometry,
                                 const std::vector<bool>& head_active) {
    require_rank2(q, "causal_attention");
    require_rank2(k, "causal_attention");
    require_rank2(v, "causal_attention");
    const std::size_t H = geometry.n_heads, G = geometry.n_kv_heads, dh = geometry.d_head;
    require(H > 0 && G > 0 && dh > 0 && H % G == 0, ErrorKind::dimension,
            "causal_attention: n_kv_heads must divide n_heads");
    const std::size_t T = q.shape()[0];
    require(q.shape()[1] == H * dh && k.shape() == Shape{T, G * dh} && v.shape() == Shape{T, G * dh},
            ErrorKind::dimension, "causal_attention: projection shapes inconsistent with head geometry");
    require(head_active.empty() || head_active.size() == H, ErrorKind::dimension,
            "causal_attention: head mask has the wrong length");
    const std::size_t per_group = H / G;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t qw = H * dh, kw = G * dh;

    auto probs = std::make_shared<AttentionProbs>();
    probs->n_heads = H;
    probs->seq_len = T;
    probs->values.assign(H * T * T, 0.0);
    std::vector<double> out(T * qw, 0.0);
    RowMat scores(T, T);
    for (std::size_t h = 0; h < H; ++h) {
        const std::size_t grp = h / per_group;
        ConstStridedMap Qh(q.data().data() + h * dh, T, dh, Eigen::OuterStride<>(qw));
        ConstStridedMap Kh(k.data().data() + grp * dh, T, dh, Eigen::OuterStride<>(kw));
        ConstStridedMap Vh(v.data().data() + grp * dh, T, dh, Eigen::OuterStride<>(kw));
        scores.noalias() = Qh * Kh.transpose();
        MatMap P(probs->values.data() + h * T * T, T, T);
        for (std::size_t i = 0; i < T; ++i) {
            double peak = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j <= i; ++j) peak = std::max(peak, scores(i, j) * inv_sqrt);
            double total = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
                const double e = std::exp(scores(i, j) * inv_sqrt - peak);
                P(i, j) = e;
                total += e;
            }
            for (std::size_t j = 0; j <= i; ++j) P(i, j) /= total;
        }
        if (!head_active.empty() && !head_active[h]) continue;
        StridedMap(out.data() + h * dh, T, dh, Eigen::OuterStride<>(qw)).noalias() = P * Vh;
    }

    std::vector<bool> active = head_active.empty() ? std::vector<bool>(H, true) : head_active;
    Tensor context = record_op(
        "causal_attention", {T, qw}, std::move(out), {q, k, v},
        [q, k, v, probs, active, T, H, dh, qw, kw, per_group, inv_sqrt](std::span<const double> g,
                                                                        std::span<const std::span<double>> grads) {
            RowMat dP(T, T);
            for (std::size_t h = 0; h < H; ++h) {
                if (!active[h]) continue;
                const std::size_t grp = h / per_group;
                ConstStridedMap dC(g.data() + h * dh, T, dh, Eigen::OuterStride<>(qw));
                ConstStridedMap Qh(q.data().data() + h * dh, T, dh, Eigen::OuterStride<>(qw));
                ConstStridedMap Kh(k.data().data() + grp * dh, T, dh, Eigen::OuterStride<>(kw));
                ConstStridedMap Vh(v.data().data() + grp * dh, T, dh, Eigen::OuterStride<>(kw));
                ConstMatMap P(probs->values.data() + h * T * T, T, T);
                if (!grads[2].empty()) {
                    StridedMap(grads[2].data() + grp * dh, T, dh, Eigen::OuterStride<>(kw)).noalias() += P.transpose() * dC;
                }
                if (grads[0].empty() && grads[1].empty()) continue;
                dP.noalias() = dC * Vh.transpose();
                for (std::size_t i = 0; i < T; ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) dot += P(i, j) * dP(i, j);
                    for (std::size_t j = 0; j <= i; ++j) dP(i, j) = P(i, j) * (dP(i, j) - dot) * inv_sqrt;
                    for (std::size_t j = i + 1; j < T; ++j) dP(i, j) = 0.0;
                }
                if (!grads[0].empty()) {
                    StridedMap(grads[0].data() + h * dh, T, dh, Eigen::OuterStride<>(qw)).noalias() += dP * Kh;
                }
                if (!grads[1].empty()) {
                    StridedMap(grads[1].data() + grp * dh, T, dh, Eigen::OuterStride<>(kw)).noalias() += dP.transpose() * Qh;
                }
            }
        });
    return {std::move(context), std::move(probs)};
}

}  // namespace mudaf
