#include "flm/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "flm/error.hpp"

namespace flm {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw InvalidArgument(std::string(op) + ": undefined tensor");
}

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// Parent grad, or an empty span when that parent needs none.
std::span<double> parent_grad(detail::Node& self, std::size_t i) {
  auto& p = *self.parents[i];
  if (!p.requires_grad) return {};
  return detail::grad_buffer(p);
}

}  // namespace

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  auto values = std::vector<double>(x.data().begin(), x.data().end());
  return make_op_result(std::move(shape), std::move(values), {x}, [](detail::Node& self) {
    auto g = parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_op_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      auto g = parent_grad(self, p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_op_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    auto ga = parent_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * bv[i];
    auto gb = parent_grad(self, 1);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * av[i];
  });
}

Tensor scale(const Tensor& x, double factor) {
  require_defined(x, "scale");
  std::vector<double> out(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * factor;
  return make_op_result(x.shape(), std::move(out), {x}, [factor](detail::Node& self) {
    auto g = parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  require_defined(x, "dropout");
  if (!(p >= 0.0 && p < 1.0)) throw InvalidArgument("dropout: p must be in [0, 1)");
  if (p == 0.0) return x;
  const double keep = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (auto& m : mask) m = rng.uniform() < p ? 0.0 : keep;
  std::vector<double> out(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  return make_op_result(x.shape(), std::move(out), {x}, [mask = std::move(mask)](detail::Node& self) {
    auto g = parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_op_result({1}, {total}, {x}, [](detail::Node& self) {
    auto g = parent_grad(self, 0);
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: cannot multiply " + to_string(a.shape()) + " by " +
                     to_string(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<double> out(static_cast<std::size_t>(m * n));
  MatMap(out.data(), m, n).noalias() = ConstMatMap(a.data().data(), m, k) *
                                       ConstMatMap(b.data().data(), k, n);
  return make_op_result({a.dim(0), b.dim(1)}, std::move(out), {a, b},
                        [m, k, n](detail::Node& self) {
                          ConstMatMap dc(self.grad.data(), m, n);
                          auto ga = parent_grad(self, 0);
                          if (!ga.empty()) {
                            ConstMatMap bm(self.parents[1]->value.data(), k, n);
                            MatMap(ga.data(), m, k).noalias() += dc * bm.transpose();
                          }
                          auto gb = parent_grad(self, 1);
                          if (!gb.empty()) {
                            ConstMatMap am(self.parents[0]->value.data(), m, k);
                            MatMap(gb.data(), k, n).noalias() += am.transpose() * dc;
                          }
                        });
}

Tensor embedding(const Tensor& weight, std::span<const std::int32_t> ids) {
  require_defined(weight, "embedding");
  if (weight.rank() != 2) throw ShapeError("embedding: weight must be 2-D");
  if (ids.empty()) throw InvalidArgument("embedding: empty id list");
  const std::size_t vocab = weight.dim(0);
  const std::size_t d = weight.dim(1);
  std::vector<std::int32_t> rows(ids.begin(), ids.end());
  std::vector<double> out(rows.size() * d);
  auto w = weight.data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || static_cast<std::size_t>(rows[r]) >= vocab) {
      throw InvalidArgument("embedding: token id " + std::to_string(rows[r]) +
                            " out of range for vocab " + std::to_string(vocab));
    }
    std::copy_n(w.begin() + static_cast<std::ptrdiff_t>(rows[r] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  const std::size_t n = rows.size();
  return make_op_result({n, d}, std::move(out), {weight},
                        [rows = std::move(rows), d](detail::Node& self) {
                          auto g = parent_grad(self, 0);
                          for (std::size_t r = 0; r < rows.size(); ++r) {
                            const std::size_t base = static_cast<std::size_t>(rows[r]) * d;
                            for (std::size_t j = 0; j < d; ++j) g[base + j] += self.grad[r * d + j];
                          }
                        });
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
  require_defined(x, "rms_norm");
  require_defined(gain, "rms_norm");
  if (!(eps >= 0.0)) throw InvalidArgument("rms_norm: eps must be non-negative");
  const std::size_t d = x.shape().back();
  if (gain.rank() != 1 || gain.dim(0) != d) {
    throw ShapeError("rms_norm: gain " + to_string(gain.shape()) + " does not match input " +
                     to_string(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto xv = x.data();
  auto gv = gain.data();
  std::vector<double> out(x.numel());
  std::vector<double> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double ms = 0.0;
    for (std::size_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
    ms /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(ms + eps);
    inv_rms[r] = inv;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = gv[j] * xr[j] * inv;
  }
  return make_op_result(
      x.shape(), std::move(out), {x, gain},
      [inv_rms = std::move(inv_rms), d, rows](detail::Node& self) {
        const auto& xv = self.parents[0]->value;
        const auto& gv = self.parents[1]->value;
        auto gx = parent_grad(self, 0);
        auto gg = parent_grad(self, 1);
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* xr = xv.data() + r * d;
          const double* dy = self.grad.data() + r * d;
          const double inv = inv_rms[r];
          if (!gg.empty()) {
            for (std::size_t j = 0; j < d; ++j) gg[j] += dy[j] * xr[j] * inv;
          }
          if (!gx.empty()) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += dy[j] * gv[j] * xr[j];
            const double coef = inv * inv * inv * dot * inv_d;
            for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += inv * gv[j] * dy[j] - coef * xr[j];
          }
        }
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_defined(x, "layer_norm");
  require_defined(gain, "layer_norm");
  require_defined(bias, "layer_norm");
  if (!(eps >= 0.0)) throw InvalidArgument("layer_norm: eps must be non-negative");
  const std::size_t d = x.shape().back();
  if (gain.rank() != 1 || gain.dim(0) != d || bias.shape() != gain.shape()) {
    throw ShapeError("layer_norm: gain/bias do not match input " + to_string(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto xv = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mean) * inv;
      xhat[r * d + j] = h;
      out[r * d + j] = gv[j] * h + bv[j];
    }
  }
  return make_op_result(
      x.shape(), std::move(out), {x, gain, bias},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), d, rows](detail::Node& self) {
        const auto& gv = self.parents[1]->value;
        auto gx = parent_grad(self, 0);
        auto gg = parent_grad(self, 1);
        auto gb = parent_grad(self, 2);
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* dy = self.grad.data() + r * d;
          const double* h = xhat.data() + r * d;
          for (std::size_t j = 0; j < d; ++j) {
            if (!gg.empty()) gg[j] += dy[j] * h[j];
            if (!gb.empty()) gb[j] += dy[j];
          }
          if (gx.empty()) continue;
          double mean_dh = 0.0;
          double mean_dh_h = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = dy[j] * gv[j];
            mean_dh += dh;
            mean_dh_h += dh * h[j];
          }
          mean_dh *= inv_d;
          mean_dh_h *= inv_d;
          for (std::size_t j = 0; j < d; ++j) {
            gx[r * d + j] += inv_std[r] * (dy[j] * gv[j] - mean_dh - h[j] * mean_dh_h);
          }
        }
      });
}

Tensor swiglu(const Tensor& gate, const Tensor& up) {
  require_defined(gate, "swiglu");
  require_defined(up, "swiglu");
  require_same_shape(gate, up, "swiglu");
  auto gv = gate.data();
  auto uv = up.data();
  std::vector<double> out(gate.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gv[i] * sigmoid(gv[i]) * uv[i];
  return make_op_result(gate.shape(), std::move(out), {gate, up}, [](detail::Node& self) {
    const auto& gv = self.parents[0]->value;
    const auto& uv = self.parents[1]->value;
    auto gg = parent_grad(self, 0);
    auto gu = parent_grad(self, 1);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double s = sigmoid(gv[i]);
      const double swish = gv[i] * s;
      if (!gg.empty()) gg[i] += self.grad[i] * uv[i] * (s + swish * (1.0 - s));
      if (!gu.empty()) gu[i] += self.grad[i] * swish;
    }
  });
}

Tensor swiglu_ffn(const Tensor& x, const Tensor& w_gate, const Tensor& w_up,
                  const Tensor& w_down) {
  require_defined(x, "swiglu_ffn");
  const std::size_t d = x.shape().back();
  if (w_gate.rank() != 2 || w_up.shape() != w_gate.shape() || w_gate.dim(0) != d ||
      w_down.rank() != 2 || w_down.dim(0) != w_gate.dim(1) || w_down.dim(1) != d) {
    throw ShapeError("swiglu_ffn: weights " + to_string(w_gate.shape()) + ", " +
                     to_string(w_up.shape()) + ", " + to_string(w_down.shape()) +
                     " do not fit input " + to_string(x.shape()));
  }
  const bool flat = x.rank() == 2;
  Tensor x2 = flat ? x : reshape(x, {x.numel() / d, d});
  Tensor hidden = swiglu(matmul(x2, w_gate), matmul(x2, w_up));
  Tensor out = matmul(hidden, w_down);
  return flat ? out : reshape(out, x.shape());
}

Tensor rope_rotate(const Tensor& x, std::span<const std::int32_t> positions, double theta) {
  require_defined(x, "rope_rotate");
  if (x.rank() < 2) throw ShapeError("rope_rotate: input must be [... x heads x d_head]");
  const std::size_t d_head = x.shape().back();
  const std::size_t heads = x.shape()[x.rank() - 2];
  if (d_head % 2 != 0) {
    throw InvalidArgument("rope_rotate: head dimension must be even, got " + std::to_string(d_head));
  }
  if (!(theta > 0.0)) throw InvalidArgument("rope_rotate: theta must be positive");
  const std::size_t rows = x.numel() / (heads * d_head);
  if (positions.size() != rows) {
    throw ShapeError("rope_rotate: expected " + std::to_string(rows) + " positions, got " +
                     std::to_string(positions.size()));
  }
  const std::size_t half = d_head / 2;
  std::vector<double> inv_freq(half);
  for (std::size_t i = 0; i < half; ++i) {
    inv_freq[i] = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(d_head));
  }
  // cos/sin per (row, pair)
  std::vector<double> cs(rows * half);
  std::vector<double> sn(rows * half);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < half; ++i) {
      const double angle = static_cast<double>(positions[r]) * inv_freq[i];
      cs[r * half + i] = std::cos(angle);
      sn[r * half + i] = std::sin(angle);
    }
  }
  auto xv = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t base = (r * heads + h) * d_head;
      for (std::size_t i = 0; i < half; ++i) {
        const double c = cs[r * half + i];
        const double s = sn[r * half + i];
        const double a = xv[base + 2 * i];
        const double b = xv[base + 2 * i + 1];
        out[base + 2 * i] = a * c - b * s;
        out[base + 2 * i + 1] = a * s + b * c;
      }
    }
  }
  return make_op_result(
      x.shape(), std::move(out), {x},
      [cs = std::move(cs), sn = std::move(sn), rows, heads, d_head, half](detail::Node& self) {
        auto g = parent_grad(self, 0);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t base = (r * heads + h) * d_head;
            for (std::size_t i = 0; i < half; ++i) {
              const double c = cs[r * half + i];
              const double s = sn[r * half + i];
              const double da = self.grad[base + 2 * i];
              const double db = self.grad[base + 2 * i + 1];
              g[base + 2 * i] += da * c + db * s;
              g[base + 2 * i + 1] += -da * s + db * c;
            }
          }
        }
      });
}

namespace {

struct Softmaxed {
  std::vector<double> probs;
  double total_nats = 0.0;
  std::size_t count = 0;
};

Softmaxed softmax_rows(const Tensor& logits, std::span<const std::int32_t> targets,
                       bool keep_probs) {
  if (logits.rank() != 2) throw ShapeError("cross entropy: logits must be [n x V]");
  const std::size_t n = logits.dim(0);
  const std::size_t vocab = logits.dim(1);
  if (targets.size() != n) {
    throw ShapeError("cross entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n) + " rows");
  }
  for (auto t : targets) {
    if (t == kIgnoreTarget) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw InvalidArgument("cross entropy: target id " + std::to_string(t) +
                            " out of range for vocab " + std::to_string(vocab));
    }
  }
  Softmaxed res;
  if (keep_probs) res.probs.assign(logits.numel(), 0.0);
  auto lv = logits.data();
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] == kIgnoreTarget) continue;
    const double* row = lv.data() + r * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
    const double log_z = std::log(z) + mx;
    res.total_nats += log_z - row[targets[r]];
    ++res.count;
    if (keep_probs) {
      for (std::size_t j = 0; j < vocab; ++j) res.probs[r * vocab + j] = std::exp(row[j] - log_z);
    }
  }
  return res;
}

}  // namespace

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets) {
  require_defined(logits, "softmax_cross_entropy");
  const bool needs_grad = grad_enabled() && logits.requires_grad();
  Softmaxed sm = softmax_rows(logits, targets, needs_grad);
  if (sm.count == 0) throw InvalidArgument("cross entropy: every target is ignored");
  const double mean = sm.total_nats / static_cast<double>(sm.count);
  const std::size_t vocab = logits.dim(1);
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  return make_op_result(
      {1}, {mean}, {logits},
      [probs = std::move(sm.probs), tg = std::move(tg), count = sm.count,
       vocab](detail::Node& self) {
        auto g = parent_grad(self, 0);
        const double w = self.grad[0] / static_cast<double>(count);
        for (std::size_t r = 0; r < tg.size(); ++r) {
          if (tg[r] == kIgnoreTarget) continue;
          double* gr = g.data() + r * vocab;
          const double* pr = probs.data() + r * vocab;
          for (std::size_t j = 0; j < vocab; ++j) gr[j] += w * pr[j];
          gr[tg[r]] -= w;
        }
      });
}

CrossEntropySum cross_entropy_sum(const Tensor& logits, std::span<const std::int32_t> targets) {
  require_defined(logits, "cross_entropy_sum");
  Softmaxed sm = softmax_rows(logits, targets, false);
  return {sm.total_nats, sm.count};
}

}  // namespace flm
