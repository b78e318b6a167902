#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "flm/error.hpp"
#include "flm/ops.hpp"

namespace flm {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Strided = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
using ConstStrided = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

bool visible(std::span<const std::int32_t> seg, std::size_t row_base, std::size_t i,
             std::size_t j) {
  if (j > i) return false;
  if (seg.empty()) return true;
  const auto si = seg[row_base + i];
  const auto sj = seg[row_base + j];
  if (si < 0) return i == j;
  return si == sj;
}

}  // namespace

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const AttentionLayout& layout) {
  if (!q.defined() || !k.defined() || !v.defined()) {
    throw InvalidArgument("causal_attention: undefined tensor");
  }
  if (q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ShapeError("causal_attention: q, k, v must share a [tokens x d] shape");
  }
  const std::size_t B = layout.batch;
  const std::size_t T = layout.seq;
  const std::size_t H = layout.heads;
  const std::size_t d = q.dim(1);
  if (B * T != q.dim(0)) {
    throw ShapeError("causal_attention: batch*seq = " + std::to_string(B * T) + " but q has " +
                     std::to_string(q.dim(0)) + " rows");
  }
  if (H == 0 || d % H != 0) throw ShapeError("causal_attention: d not divisible by heads");
  if (!layout.segments.empty() && layout.segments.size() != B * T) {
    throw ShapeError("causal_attention: one segment id per token required");
  }
  const std::size_t dh = d / H;
  const auto Ti = static_cast<Eigen::Index>(T);
  const auto dhi = static_cast<Eigen::Index>(dh);
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
  const double sc = layout.scale;

  std::vector<std::int32_t> seg(layout.segments.begin(), layout.segments.end());
  // Attention probabilities per (batch, head), kept for backward.
  std::vector<double> probs(B * H * T * T, 0.0);
  std::vector<double> out(q.numel(), 0.0);
  auto qv = q.data();
  auto kv = k.data();
  auto vv = v.data();

  RowMatrix scores(Ti, Ti);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t row_base = b * T;
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = row_base * d + h * dh;
      ConstStrided qm(qv.data() + off, Ti, dhi, stride);
      ConstStrided km(kv.data() + off, Ti, dhi, stride);
      ConstStrided vm(vv.data() + off, Ti, dhi, stride);
      scores.noalias() = qm * km.transpose();
      double* P = probs.data() + (b * H + h) * T * T;
      for (std::size_t i = 0; i < T; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          if (visible(seg, row_base, i, j)) mx = std::max(mx, sc * scores(i, j));
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          if (!visible(seg, row_base, i, j)) continue;
          const double e = std::exp(sc * scores(i, j) - mx);
          P[i * T + j] = e;
          z += e;
        }
        for (std::size_t j = 0; j <= i; ++j) P[i * T + j] /= z;
      }
      Strided om(out.data() + off, Ti, dhi, stride);
      om.noalias() = ConstMatMap(P, Ti, Ti) * vm;
    }
  }

  return make_op_result(
      q.shape(), std::move(out), {q, k, v},
      [probs = std::move(probs), B, T, H, d, dh, sc](detail::Node& self) {
        const auto Ti = static_cast<Eigen::Index>(T);
        const auto dhi = static_cast<Eigen::Index>(dh);
        const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
        const auto& qv = self.parents[0]->value;
        const auto& kv = self.parents[1]->value;
        const auto& vv = self.parents[2]->value;
        auto need = [&](std::size_t p) { return self.parents[p]->requires_grad; };
        std::span<double> gq = need(0) ? detail::grad_buffer(*self.parents[0]) : std::span<double>{};
        std::span<double> gk = need(1) ? detail::grad_buffer(*self.parents[1]) : std::span<double>{};
        std::span<double> gv = need(2) ? detail::grad_buffer(*self.parents[2]) : std::span<double>{};
        RowMatrix dP(Ti, Ti);
        RowMatrix dS(Ti, Ti);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < H; ++h) {
            const std::size_t off = b * T * d + h * dh;
            ConstStrided dO(self.grad.data() + off, Ti, dhi, stride);
            ConstStrided qm(qv.data() + off, Ti, dhi, stride);
            ConstStrided km(kv.data() + off, Ti, dhi, stride);
            ConstStrided vm(vv.data() + off, Ti, dhi, stride);
            ConstMatMap P(probs.data() + (b * H + h) * T * T, Ti, Ti);
            if (!gv.empty()) {
              Strided(gv.data() + off, Ti, dhi, stride).noalias() += P.transpose() * dO;
            }
            if (gq.empty() && gk.empty()) continue;
            dP.noalias() = dO * vm.transpose();
            for (Eigen::Index i = 0; i < Ti; ++i) {
              double row_dot = 0.0;
              for (Eigen::Index j = 0; j <= i; ++j) row_dot += dP(i, j) * P(i, j);
              for (Eigen::Index j = 0; j < Ti; ++j) {
                dS(i, j) = j <= i ? sc * P(i, j) * (dP(i, j) - row_dot) : 0.0;
              }
            }
            if (!gq.empty()) Strided(gq.data() + off, Ti, dhi, stride).noalias() += dS * km;
            if (!gk.empty()) {
              Strided(gk.data() + off, Ti, dhi, stride).noalias() += dS.transpose() * qm;
            }
          }
        }
      });
}

}  // namespace flm
