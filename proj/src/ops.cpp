#include "tlid/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "tlid/error.hpp"
#include "tlid/random.hpp"

namespace tlid {

using detail::Node;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

namespace {

thread_local ReluMarginProbe* g_probe = nullptr;

struct SeqDims {
  std::size_t n, c, t;
};

SeqDims seq_dims(const Tensor& x, const char* op) {
  if (x.rank() == 2) return {1, x.dim(0), x.dim(1)};
  if (x.rank() == 3) return {x.dim(0), x.dim(1), x.dim(2)};
  throw DimensionError(std::string(op) + ": expected [C,T] or [N,C,T], got " + shape_str(x.shape()));
}

// Parent node to accumulate into, or null when it is outside the tape.
Node* target(const Tensor& t) {
  return t.defined() && t.requires_grad() ? t.node().get() : nullptr;
}

void check_mask(const SequenceMask& mask, const SeqDims& d, const char* op) {
  mask.validate();
  if (mask.batch != d.n || mask.max_len != d.t) {
    throw DimensionError(std::string(op) + ": mask [" + std::to_string(mask.batch) + "," +
                         std::to_string(mask.max_len) + "] does not match input [" +
                         std::to_string(d.n) + ",*," + std::to_string(d.t) + "]");
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

}  // namespace

SequenceMask SequenceMask::full(std::size_t batch, std::size_t len) {
  return SequenceMask{batch, std::vector<std::size_t>(batch, len), len};
}

SequenceMask SequenceMask::from_lengths(std::vector<std::size_t> lengths) {
  SequenceMask m;
  m.batch = lengths.size();
  m.max_len = lengths.empty() ? 0 : *std::max_element(lengths.begin(), lengths.end());
  m.lengths = std::move(lengths);
  return m;
}

void SequenceMask::validate() const {
  if (lengths.size() != batch) throw DimensionError("mask: lengths size does not match batch");
  for (std::size_t i = 0; i < batch; ++i) {
    if (lengths[i] == 0) {
      throw DegenerateInputError("mask: item " + std::to_string(i) + " has zero valid frames");
    }
    if (lengths[i] > max_len) throw DimensionError("mask: length exceeds max_len");
  }
}

std::size_t SequenceMask::total_valid() const {
  std::size_t s = 0;
  for (auto l : lengths) s += l;
  return s;
}

Tensor conv1d_depthwise(const Tensor& x, const Tensor& kernel) {
  const auto d = seq_dims(x, "conv1d_depthwise");
  if (kernel.rank() != 2 || kernel.dim(0) != d.c) {
    throw DimensionError("conv1d_depthwise: kernel " + shape_str(kernel.shape()) +
                         " does not match channels of " + shape_str(x.shape()));
  }
  const std::size_t K = kernel.dim(1);
  if (K % 2 == 0) throw DimensionError("conv1d_depthwise: kernel size must be odd");
  const auto half = static_cast<std::ptrdiff_t>(K / 2);
  const auto T = static_cast<std::ptrdiff_t>(d.t);

  auto xs = x.data();
  auto ws = kernel.data();
  std::vector<double> out(x.size(), 0.0);
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t c = 0; c < d.c; ++c) {
      const double* xr = xs.data() + (n * d.c + c) * d.t;
      double* orow = out.data() + (n * d.c + c) * d.t;
      for (std::size_t k = 0; k < K; ++k) {
        const double w = ws[c * K + k];
        const auto off = static_cast<std::ptrdiff_t>(k) - half;
        const auto t0 = std::max<std::ptrdiff_t>(0, -off);
        const auto t1 = std::min<std::ptrdiff_t>(T, T - off);
        double* __restrict o = orow;
        const double* __restrict in = xr + off;
        for (auto t = t0; t < t1; ++t) o[t] += w * in[t];
      }
    }
  }

  auto xn = x.node();
  auto kn = kernel.node();
  return detail::make_result(x.shape(), std::move(out), {x, kernel}, [=](Node& self) {
    Node* gx = target(Tensor::from_node(xn));
    Node* gk = target(Tensor::from_node(kn));
    double* dx = gx ? gx->grad_buffer().data() : nullptr;
    double* dk = gk ? gk->grad_buffer().data() : nullptr;
    for (std::size_t n = 0; n < d.n; ++n) {
      for (std::size_t c = 0; c < d.c; ++c) {
        const std::size_t row = (n * d.c + c) * d.t;
        const double* g = self.grad.data() + row;
        const double* xr = xn->data.data() + row;
        for (std::size_t k = 0; k < K; ++k) {
          const auto off = static_cast<std::ptrdiff_t>(k) - half;
          const auto t0 = std::max<std::ptrdiff_t>(0, -off);
          const auto t1 = std::min<std::ptrdiff_t>(T, T - off);
          if (dx) {
            const double w = kn->data[c * K + k];
            double* __restrict dxr = dx + row + off;
            const double* __restrict gr = g;
            for (auto t = t0; t < t1; ++t) dxr[t] += gr[t] * w;
          }
          if (dk) {
            double acc = 0.0;
            for (auto t = t0; t < t1; ++t) acc += g[t] * xr[t + off];
            dk[c * K + k] += acc;
          }
        }
      }
    }
  });
}

Tensor conv1d_pointwise(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const auto d = seq_dims(x, "conv1d_pointwise");
  if (weight.rank() != 2 || weight.dim(1) != d.c) {
    throw DimensionError("conv1d_pointwise: weight " + shape_str(weight.shape()) +
                         " does not match input " + shape_str(x.shape()));
  }
  const std::size_t cout = weight.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw DimensionError("conv1d_pointwise: bias " + shape_str(bias.shape()) + " expected [" +
                         std::to_string(cout) + "]");
  }
  Shape out_shape = x.rank() == 2 ? Shape{cout, d.t} : Shape{d.n, cout, d.t};
  std::vector<double> out(d.n * cout * d.t);
  ConstMatMap W(weight.data().data(), cout, d.c);
  for (std::size_t n = 0; n < d.n; ++n) {
    ConstMatMap X(x.data().data() + n * d.c * d.t, d.c, d.t);
    MatMap Y(out.data() + n * cout * d.t, cout, d.t);
    Y.noalias() = W * X;
    if (bias.defined()) {
      for (std::size_t o = 0; o < cout; ++o) Y.row(o).array() += bias[o];
    }
  }

  auto xn = x.node();
  auto wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  return detail::make_result(std::move(out_shape), std::move(out), {x, weight, bias}, [=](Node& self) {
    Node* gx = target(Tensor::from_node(xn));
    Node* gw = target(Tensor::from_node(wn));
    Node* gb = bn ? target(Tensor::from_node(bn)) : nullptr;
    ConstMatMap Wm(wn->data.data(), cout, d.c);
    for (std::size_t n = 0; n < d.n; ++n) {
      ConstMatMap G(self.grad.data() + n * cout * d.t, cout, d.t);
      if (gx) {
        MatMap DX(gx->grad_buffer().data() + n * d.c * d.t, d.c, d.t);
        DX.noalias() += Wm.transpose() * G;
      }
      if (gw) {
        ConstMatMap X(xn->data.data() + n * d.c * d.t, d.c, d.t);
        MatMap DW(gw->grad_buffer().data(), cout, d.c);
        DW.noalias() += G * X.transpose();
      }
      if (gb) {
        auto& db = gb->grad_buffer();
        for (std::size_t o = 0; o < cout; ++o) db[o] += G.row(o).sum();
      }
    }
  });
}

Tensor batchnorm1d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   std::span<double> running_mean, std::span<double> running_var, Mode mode,
                   const SequenceMask& mask, BatchNormOptions opts) {
  if (x.rank() != 3) throw DimensionError("batchnorm1d: expected [N,C,T], got " + shape_str(x.shape()));
  const SeqDims d{x.dim(0), x.dim(1), x.dim(2)};
  check_mask(mask, d, "batchnorm1d");
  for (const Tensor* p : {&gamma, &beta}) {
    if (p->rank() != 1 || p->dim(0) != d.c) throw DimensionError("batchnorm1d: affine parameter shape mismatch");
  }
  if (running_mean.size() != d.c || running_var.size() != d.c) {
    throw DimensionError("batchnorm1d: running statistics size mismatch");
  }
  const std::size_t count = mask.total_valid();
  if (count == 0) throw DegenerateInputError("batchnorm1d: zero valid frames");
  if (mode == Mode::Train && count < 2) {
    throw DegenerateInputError("batchnorm1d: train mode needs at least 2 valid frames per channel");
  }

  auto xs = x.data();
  std::vector<double> mean(d.c), inv_std(d.c);
  if (mode == Mode::Train) {
    for (std::size_t c = 0; c < d.c; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < d.n; ++n) {
        const double* r = xs.data() + (n * d.c + c) * d.t;
        for (std::size_t t = 0; t < mask.lengths[n]; ++t) s += r[t];
      }
      const double m = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t n = 0; n < d.n; ++n) {
        const double* r = xs.data() + (n * d.c + c) * d.t;
        for (std::size_t t = 0; t < mask.lengths[n]; ++t) ss += (r[t] - m) * (r[t] - m);
      }
      const double var = ss / static_cast<double>(count);
      mean[c] = m;
      inv_std[c] = 1.0 / std::sqrt(var + opts.eps);
      const double unbiased = ss / static_cast<double>(count - 1);
      running_mean[c] = (1.0 - opts.momentum) * running_mean[c] + opts.momentum * m;
      running_var[c] = (1.0 - opts.momentum) * running_var[c] + opts.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < d.c; ++c) {
      mean[c] = running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(running_var[c] + opts.eps);
    }
  }

  std::vector<double> out(x.size(), 0.0);
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t c = 0; c < d.c; ++c) {
      const std::size_t row = (n * d.c + c) * d.t;
      const double a = gamma[c] * inv_std[c];
      const double b = beta[c] - a * mean[c];
      const double* __restrict xr = xs.data() + row;
      double* __restrict o = out.data() + row;
      for (std::size_t t = 0; t < mask.lengths[n]; ++t) o[t] = a * xr[t] + b;
    }
  }

  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  const auto lengths = mask.lengths;
  const bool train = mode == Mode::Train;
  // x-hat is recomputed from the input in the backward pass.
  return detail::make_result(x.shape(), std::move(out), {x, gamma, beta},
                             [=, mean = std::move(mean), inv_std = std::move(inv_std)](Node& self) {
    Node* gx = target(Tensor::from_node(xn));
    Node* gg = target(Tensor::from_node(gn));
    Node* gb = target(Tensor::from_node(bn));
    const double* G = self.grad.data();
    const double* X = xn->data.data();
    double* dx = gx ? gx->grad_buffer().data() : nullptr;
    const double M = static_cast<double>(count);
    for (std::size_t c = 0; c < d.c; ++c) {
      const double m = mean[c], is = inv_std[c];
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::size_t n = 0; n < d.n; ++n) {
        const std::size_t row = (n * d.c + c) * d.t;
        const double* __restrict g = G + row;
        const double* __restrict xr = X + row;
        for (std::size_t t = 0; t < lengths[n]; ++t) {
          sum_g += g[t];
          sum_gx += g[t] * xr[t];
        }
      }
      const double sum_gh = (sum_gx - m * sum_g) * is;
      if (gg) gg->grad_buffer()[c] += sum_gh;
      if (gb) gb->grad_buffer()[c] += sum_g;
      if (!dx) continue;
      const double scale = gn->data[c] * is;
      const double mg = train ? sum_g / M : 0.0;
      const double mh = train ? sum_gh / M : 0.0;
      for (std::size_t n = 0; n < d.n; ++n) {
        const std::size_t row = (n * d.c + c) * d.t;
        const double* __restrict g = G + row;
        const double* __restrict xr = X + row;
        double* __restrict o = dx + row;
        for (std::size_t t = 0; t < lengths[n]; ++t) o[t] += scale * (g[t] - mg - (xr[t] - m) * is * mh);
      }
    }
  });
}

namespace {

struct BnStats {
  std::vector<double> mean, inv_std;
};

// Batch statistics (train, updating the running estimates) or running
// statistics (eval) for every channel of x.
BnStats batchnorm_stats(const Tensor& x, const SeqDims& d, std::span<double> running_mean,
                        std::span<double> running_var, Mode mode, const SequenceMask& mask,
                        const BatchNormOptions& opts) {
  const std::size_t count = mask.total_valid();
  BnStats s{std::vector<double>(d.c), std::vector<double>(d.c)};
  if (mode == Mode::Eval) {
    for (std::size_t c = 0; c < d.c; ++c) {
      s.mean[c] = running_mean[c];
      s.inv_std[c] = 1.0 / std::sqrt(running_var[c] + opts.eps);
    }
    return s;
  }
  auto xs = x.data();
  for (std::size_t c = 0; c < d.c; ++c) {
    double sum = 0.0;
    for (std::size_t n = 0; n < d.n; ++n) {
      const double* r = xs.data() + (n * d.c + c) * d.t;
      for (std::size_t t = 0; t < mask.lengths[n]; ++t) sum += r[t];
    }
    const double m = sum / static_cast<double>(count);
    double ss = 0.0;
    for (std::size_t n = 0; n < d.n; ++n) {
      const double* r = xs.data() + (n * d.c + c) * d.t;
      for (std::size_t t = 0; t < mask.lengths[n]; ++t) ss += (r[t] - m) * (r[t] - m);
    }
    s.mean[c] = m;
    s.inv_std[c] = 1.0 / std::sqrt(ss / static_cast<double>(count) + opts.eps);
    running_mean[c] = (1.0 - opts.momentum) * running_mean[c] + opts.momentum * m;
    running_var[c] = (1.0 - opts.momentum) * running_var[c] + opts.momentum * ss / static_cast<double>(count - 1);
  }
  return s;
}

}  // namespace

Tensor batchnorm_relu_stats_pool(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                 std::span<double> running_mean, std::span<double> running_var, Mode mode,
                                 const SequenceMask& mask, BatchNormOptions opts, double var_floor) {
  if (x.rank() != 3) {
    throw DimensionError("batchnorm_relu_stats_pool: expected [N,C,T], got " + shape_str(x.shape()));
  }
  const SeqDims d{x.dim(0), x.dim(1), x.dim(2)};
  check_mask(mask, d, "batchnorm_relu_stats_pool");
  for (const Tensor* p : {&gamma, &beta}) {
    if (p->rank() != 1 || p->dim(0) != d.c) {
      throw DimensionError("batchnorm_relu_stats_pool: affine parameter shape mismatch");
    }
  }
  if (running_mean.size() != d.c || running_var.size() != d.c) {
    throw DimensionError("batchnorm_relu_stats_pool: running statistics size mismatch");
  }
  const std::size_t count = mask.total_valid();
  if (mode == Mode::Train && count < 2) {
    throw DegenerateInputError("batchnorm_relu_stats_pool: train mode needs at least 2 valid frames per channel");
  }
  const BnStats st = batchnorm_stats(x, d, running_mean, running_var, mode, mask, opts);

  auto xs = x.data();
  std::vector<double> out(d.n * 2 * d.c), zmean(d.n * d.c), zstd(d.n * d.c);
  std::vector<char> floored(d.n * d.c, 0);
  std::vector<double> z(d.t);
  for (std::size_t n = 0; n < d.n; ++n) {
    const std::size_t L = mask.lengths[n];
    for (std::size_t c = 0; c < d.c; ++c) {
      const double a = gamma[c] * st.inv_std[c];
      const double b = beta[c] - a * st.mean[c];
      const double* __restrict xr = xs.data() + (n * d.c + c) * d.t;
      double* __restrict zr = z.data();
      double sum = 0.0;
      for (std::size_t t = 0; t < L; ++t) {
        const double h = a * xr[t] + b;
        zr[t] = h > 0.0 ? h : 0.0;
        sum += zr[t];
      }
      if (g_probe) {
        for (std::size_t t = 0; t < L; ++t) g_probe->observe(a * xr[t] + b);
      }
      const double m = sum / static_cast<double>(L);
      double ss = 0.0;
      for (std::size_t t = 0; t < L; ++t) ss += (zr[t] - m) * (zr[t] - m);
      double var = ss / static_cast<double>(L);
      const std::size_t i = n * d.c + c;
      if (var < var_floor) {
        var = var_floor;
        floored[i] = 1;
      }
      zmean[i] = m;
      zstd[i] = std::sqrt(var);
      out[n * 2 * d.c + c] = m;
      out[n * 2 * d.c + d.c + c] = zstd[i];
    }
  }

  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  const auto lengths = mask.lengths;
  const bool train = mode == Mode::Train;
  return detail::make_result(
      Shape{d.n, 2 * d.c}, std::move(out), {x, gamma, beta},
      [=, mean = st.mean, inv_std = st.inv_std, zmean = std::move(zmean), zstd = std::move(zstd),
       floored = std::move(floored)](Node& self) {
        Node* gx = target(Tensor::from_node(xn));
        Node* gg = target(Tensor::from_node(gn));
        Node* gb = target(Tensor::from_node(bn));
        const double* X = xn->data.data();
        double* dx = gx ? gx->grad_buffer().data() : nullptr;
        const double M = static_cast<double>(count);
        std::vector<double> dh(d.t);
        // dh: gradient with respect to the pre-activation h = gamma * x_hat + beta.
        auto row_grad = [&](std::size_t n, std::size_t c, double a, double b) {
          const std::size_t i = n * d.c + c;
          const double L = static_cast<double>(lengths[n]);
          const double gm = self.grad[n * 2 * d.c + c] / L;
          const double gs = floored[i] ? 0.0 : self.grad[n * 2 * d.c + d.c + c] / (L * zstd[i]);
          const double m = zmean[i];
          const double* __restrict xr = X + i * d.t;
          double* __restrict g = dh.data();
          for (std::size_t t = 0; t < lengths[n]; ++t) {
            const double h = a * xr[t] + b;
            g[t] = h > 0.0 ? gm + gs * (h - m) : 0.0;
          }
        };
        for (std::size_t c = 0; c < d.c; ++c) {
          const double mu = mean[c], is = inv_std[c];
          const double a = gn->data[c] * is;
          const double b = bn->data[c] - a * mu;
          double sum_g = 0.0, sum_gh = 0.0;
          for (std::size_t n = 0; n < d.n; ++n) {
            row_grad(n, c, a, b);
            const double* __restrict xr = X + (n * d.c + c) * d.t;
            const double* __restrict g = dh.data();
            for (std::size_t t = 0; t < lengths[n]; ++t) {
              sum_g += g[t];
              sum_gh += g[t] * (xr[t] - mu) * is;
            }
          }
          if (gg) gg->grad_buffer()[c] += sum_gh;
          if (gb) gb->grad_buffer()[c] += sum_g;
          if (!dx) continue;
          const double mg = train ? sum_g / M : 0.0;
          const double mh = train ? sum_gh / M : 0.0;
          for (std::size_t n = 0; n < d.n; ++n) {
            row_grad(n, c, a, b);
            const double* __restrict xr = X + (n * d.c + c) * d.t;
            const double* __restrict g = dh.data();
            double* __restrict o = dx + (n * d.c + c) * d.t;
            for (std::size_t t = 0; t < lengths[n]; ++t) o[t] += a * (g[t] - mg - (xr[t] - mu) * is * mh);
          }
        }
      });
}

Tensor stats_pool(const Tensor& x, const SequenceMask& mask, double var_floor) {
  if (x.rank() != 3) throw DimensionError("stats_pool: expected [N,C,T], got " + shape_str(x.shape()));
  const SeqDims d{x.dim(0), x.dim(1), x.dim(2)};
  check_mask(mask, d, "stats_pool");
  auto xs = x.data();
  std::vector<double> out(d.n * 2 * d.c);
  std::vector<double> mean(d.n * d.c), stdv(d.n * d.c);
  std::vector<char> floored(d.n * d.c, 0);
  for (std::size_t n = 0; n < d.n; ++n) {
    const double L = static_cast<double>(mask.lengths[n]);
    for (std::size_t c = 0; c < d.c; ++c) {
      const double* r = xs.data() + (n * d.c + c) * d.t;
      double s = 0.0;
      for (std::size_t t = 0; t < mask.lengths[n]; ++t) s += r[t];
      const double m = s / L;
      double ss = 0.0;
      for (std::size_t t = 0; t < mask.lengths[n]; ++t) ss += (r[t] - m) * (r[t] - m);
      double var = ss / L;
      if (var < var_floor) {
        var = var_floor;
        floored[n * d.c + c] = 1;
      }
      mean[n * d.c + c] = m;
      stdv[n * d.c + c] = std::sqrt(var);
      out[n * 2 * d.c + c] = m;
      out[n * 2 * d.c + d.c + c] = stdv[n * d.c + c];
    }
  }

  auto xn = x.node();
  const auto lengths = mask.lengths;
  return detail::make_result(Shape{d.n, 2 * d.c}, std::move(out), {x},
                             [=, mean = std::move(mean), stdv = std::move(stdv),
                              floored = std::move(floored)](Node& self) {
    Node* gx = target(Tensor::from_node(xn));
    if (!gx) return;
    auto& dx = gx->grad_buffer();
    for (std::size_t n = 0; n < d.n; ++n) {
      const double L = static_cast<double>(lengths[n]);
      for (std::size_t c = 0; c < d.c; ++c) {
        const std::size_t i = n * d.c + c;
        const double gm = self.grad[n * 2 * d.c + c] / L;
        const double gs = floored[i] ? 0.0 : self.grad[n * 2 * d.c + d.c + c] / (L * stdv[i]);
        const std::size_t row = i * d.t;
        double* __restrict o = dx.data() + row;
        const double* __restrict xr = xn->data.data() + row;
        const double m = mean[i];
        for (std::size_t t = 0; t < lengths[n]; ++t) o[t] += gm + gs * (xr[t] - m);
      }
    }
  });
}

Tensor global_avg_pool_time(const Tensor& x, const SequenceMask& mask) {
  if (x.rank() != 3) {
    throw DimensionError("global_avg_pool_time: expected [N,C,T], got " + shape_str(x.shape()));
  }
  const SeqDims d{x.dim(0), x.dim(1), x.dim(2)};
  check_mask(mask, d, "global_avg_pool_time");
  auto xs = x.data();
  std::vector<double> out(d.n * d.c);
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t c = 0; c < d.c; ++c) {
      const double* r = xs.data() + (n * d.c + c) * d.t;
      double s = 0.0;
      for (std::size_t t = 0; t < mask.lengths[n]; ++t) s += r[t];
      out[n * d.c + c] = s / static_cast<double>(mask.lengths[n]);
    }
  }
  auto xn = x.node();
  const auto lengths = mask.lengths;
  return detail::make_result(Shape{d.n, d.c}, std::move(out), {x}, [=](Node& self) {
    Node* gx = target(Tensor::from_node(xn));
    if (!gx) return;
    auto& dx = gx->grad_buffer();
    for (std::size_t n = 0; n < d.n; ++n) {
      for (std::size_t c = 0; c < d.c; ++c) {
        const double g = self.grad[n * d.c + c] / static_cast<double>(lengths[n]);
        const std::size_t row = (n * d.c + c) * d.t;
        for (std::size_t t = 0; t < lengths[n]; ++t) dx[row + t] += g;
      }
    }
  });
}

Tensor mask_time(const Tensor& x, const SequenceMask& mask) {
  if (x.rank() != 3) throw DimensionError("mask_time: expected [N,C,T], got " + shape_str(x.shape()));
  const SeqDims d{x.dim(0), x.dim(1), x.dim(2)};
  check_mask(mask, d, "mask_time");
  std::vector<double> out(x.size(), 0.0);
  auto xs = x.data();
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t c = 0; c < d.c; ++c) {
      const std::size_t row = (n * d.c + c) * d.t;
      std::copy_n(xs.data() + row, mask.lengths[n], out.data() + row);
    }
  }
  auto xn = x.node();
  const auto lengths = mask.lengths;
  return detail::make_result(x.shape(), std::move(out), {x}, [=](Node& self) {
    Node* gx = target(Tensor::from_node(xn));
    if (!gx) return;
    auto& dx = gx->grad_buffer();
    for (std::size_t n = 0; n < d.n; ++n) {
      for (std::size_t c = 0; c < d.c; ++c) {
        const std::size_t row = (n * d.c + c) * d.t;
        double* __restrict o = dx.data() + row;
        const double* __restrict g = self.grad.data() + row;
        for (std::size_t t = 0; t < lengths[n]; ++t) o[t] += g[t];
      }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || weight.dim(1) != x.dim(1)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
  }
  const std::size_t N = x.dim(0), D = x.dim(1), O = weight.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != O)) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " expected [" + std::to_string(O) + "]");
  }
  std::vector<double> out(N * O);
  MatMap Y(out.data(), N, O);
  Y.noalias() = ConstMatMap(x.data().data(), N, D) * ConstMatMap(weight.data().data(), O, D).transpose();
  if (bias.defined()) {
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t o = 0; o < O; ++o) Y(n, o) += bias[o];
    }
  }
  auto xn = x.node();
  auto wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  return detail::make_result(Shape{N, O}, std::move(out), {x, weight, bias}, [=](Node& self) {
    ConstMatMap G(self.grad.data(), N, O);
    if (Node* gx = target(Tensor::from_node(xn))) {
      MatMap(gx->grad_buffer().data(), N, D).noalias() += G * ConstMatMap(wn->data.data(), O, D);
    }
    if (Node* gw = target(Tensor::from_node(wn))) {
      MatMap(gw->grad_buffer().data(), O, D).noalias() += G.transpose() * ConstMatMap(xn->data.data(), N, D);
    }
    if (bn) {
      if (Node* gb = target(Tensor::from_node(bn))) {
        auto& db = gb->grad_buffer();
        for (std::size_t o = 0; o < O; ++o) db[o] += G.col(o).sum();
      }
    }
  });
}

ReluMarginProbe::ReluMarginProbe() : min_(std::numeric_limits<double>::infinity()), previous_(g_probe) {
  g_probe = this;
}
ReluMarginProbe::~ReluMarginProbe() { g_probe = previous_; }

void ReluMarginProbe::observe(double v) {
  // Exact zeros come from masked padding and are not kinks of the function.
  if (v != 0.0) min_ = std::min(min_, std::abs(v));
}

Tensor relu(const Tensor& x) {
  auto xs = x.data();
  const std::size_t size = xs.size();
  std::vector<double> out(size);
  {
    const double* __restrict in = xs.data();
    double* __restrict o = out.data();
    for (std::size_t i = 0; i < size; ++i) o[i] = in[i] > 0.0 ? in[i] : 0.0;
  }
  if (g_probe) {
    for (double v : xs) g_probe->observe(v);
  }
  auto xn = x.node();
  return detail::make_result(x.shape(), std::move(out), {x}, [xn](Node& self) {
    Node* gx = target(Tensor::from_node(xn));
    if (!gx) return;
    double* __restrict dx = gx->grad_buffer().data();
    const double* __restrict in = xn->data.data();
    const double* __restrict g = self.grad.data();
    const std::size_t size = self.grad.size();
    for (std::size_t i = 0; i < size; ++i) dx[i] += in[i] > 0.0 ? g[i] : 0.0;
  });
}

Tensor sigmoid(const Tensor& x) {
  auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-xs[i]));
  auto xn = x.node();
  return detail::make_result(x.shape(), out, {x}, [xn, out](Node& self) {
    Node* gx = target(Tensor::from_node(xn));
    if (!gx) return;
    auto& dx = gx->grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[i] * out[i] * (1.0 - out[i]);
  });
}

Tensor dropout(const Tensor& x, double p, Mode mode, std::uint64_t seed) {
  if (p < 0.0 || p >= 1.0) throw ContractError("dropout: p must be in [0, 1)");
  if (mode == Mode::Eval || p == 0.0) return x;
  Rng rng(seed);
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> factor(x.size());
  for (auto& f : factor) f = rng.uniform() < p ? 0.0 : keep_scale;
  auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = xs[i] * factor[i];
  auto xn = x.node();
  return detail::make_result(x.shape(), std::move(out), {x}, [xn, factor = std::move(factor)](Node& self) {
    Node* gx = target(Tensor::from_node(xn));
    if (!gx) return;
    auto& dx = gx->grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[i] * factor[i];
  });
}

Tensor channel_scale(const Tensor& x, const Tensor& scale) {
  if (x.rank() != 3 || scale.rank() != 2 || scale.dim(0) != x.dim(0) || scale.dim(1) != x.dim(1)) {
    throw DimensionError("channel_scale: " + shape_str(x.shape()) + " vs scale " + shape_str(scale.shape()));
  }
  const SeqDims d{x.dim(0), x.dim(1), x.dim(2)};
  auto xs = x.data();
  auto ss = scale.data();
  std::vector<double> out(xs.size());
  for (std::size_t r = 0; r < d.n * d.c; ++r) {
    for (std::size_t t = 0; t < d.t; ++t) out[r * d.t + t] = xs[r * d.t + t] * ss[r];
  }
  auto xn = x.node();
  auto sn = scale.node();
  return detail::make_result(x.shape(), std::move(out), {x, scale}, [=](Node& self) {
    Node* gx = target(Tensor::from_node(xn));
    Node* gs = target(Tensor::from_node(sn));
    for (std::size_t r = 0; r < d.n * d.c; ++r) {
      const double* g = self.grad.data() + r * d.t;
      if (gx) {
        double* __restrict dx = gx->grad_buffer().data() + r * d.t;
        const double sc = sn->data[r];
        for (std::size_t t = 0; t < d.t; ++t) dx[t] += g[t] * sc;
      }
      if (gs) {
        double acc = 0.0;
        const double* xr = xn->data.data() + r * d.t;
        for (std::size_t t = 0; t < d.t; ++t) acc += g[t] * xr[t];
        gs->grad_buffer()[r] += acc;
      }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto as = a.data();
  auto bs = b.data();
  std::vector<double> out(as.size());
  for (std::size_t i = 0; i < as.size(); ++i) out[i] = as[i] + bs[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result(a.shape(), std::move(out), {a, b}, [an, bn](Node& self) {
    for (const auto& p : {an, bn}) {
      if (!p->requires_grad) continue;
      double* __restrict d = p->grad_buffer().data();
      const double* __restrict g = self.grad.data();
      const std::size_t size = self.grad.size();
      for (std::size_t i = 0; i < size; ++i) d[i] += g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto as = a.data();
  auto bs = b.data();
  std::vector<double> out(as.size());
  for (std::size_t i = 0; i < as.size(); ++i) out[i] = as[i] * bs[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result(a.shape(), std::move(out), {a, b}, [an, bn](Node& self) {
    if (an->requires_grad) {
      auto& d = an->grad_buffer();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * bn->data[i];
    }
    if (bn->requires_grad) {
      auto& d = bn->grad_buffer();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * an->data[i];
    }
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto xn = x.node();
  return detail::make_result(Shape{}, {s}, {x}, [xn](Node& self) {
    Node* gx = target(Tensor::from_node(xn));
    if (!gx) return;
    for (auto& v : gx->grad_buffer()) v += self.grad[0];
  });
}

Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("softmax: expected [N,K], got " + shape_str(logits.shape()));
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  auto ls = logits.data();
  std::vector<double> out(ls.size());
  for (std::size_t n = 0; n < N; ++n) {
    const double* r = ls.data() + n * K;
    const double m = *std::max_element(r, r + K);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += (out[n * K + k] = std::exp(r[k] - m));
    for (std::size_t k = 0; k < K; ++k) out[n * K + k] /= z;
  }
  auto ln = logits.node();
  return detail::make_result(logits.shape(), out, {logits}, [=](Node& self) {
    Node* gl = target(Tensor::from_node(ln));
    if (!gl) return;
    auto& dl = gl->grad_buffer();
    for (std::size_t n = 0; n < N; ++n) {
      double dot = 0.0;
      for (std::size_t k = 0; k < K; ++k) dot += self.grad[n * K + k] * out[n * K + k];
      for (std::size_t k = 0; k < K; ++k) dl[n * K + k] += out[n * K + k] * (self.grad[n * K + k] - dot);
    }
  });
}

Tensor weighted_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                              std::span<const double> class_weights) {
  if (logits.rank() != 2) {
    throw DimensionError("weighted_cross_entropy: expected [N,K], got " + shape_str(logits.shape()));
  }
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (targets.size() != N) throw DimensionError("weighted_cross_entropy: targets size != batch");
  if (class_weights.size() != K) throw DimensionError("weighted_cross_entropy: weights size != classes");
  auto ls = logits.data();
  std::vector<double> probs(N * K), w(N);
  double total = 0.0, wsum = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    if (targets[n] >= K) {
      throw LabelError("weighted_cross_entropy: target " + std::to_string(targets[n]) +
                       " out of range [0," + std::to_string(K) + ")");
    }
    const double* r = ls.data() + n * K;
    const double m = *std::max_element(r, r + K);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += (probs[n * K + k] = std::exp(r[k] - m));
    for (std::size_t k = 0; k < K; ++k) probs[n * K + k] /= z;
    const double nll = std::log(z) + m - r[targets[n]];
    w[n] = class_weights[targets[n]];
    total += w[n] * nll;
    wsum += w[n];
  }
  if (wsum <= 0.0) throw ContractError("weighted_cross_entropy: selected weights sum to zero");
  const std::vector<std::size_t> tg(targets.begin(), targets.end());
  auto ln = logits.node();
  return detail::make_result(Shape{}, {total / wsum}, {logits},
                             [=, probs = std::move(probs), w = std::move(w)](Node& self) {
    Node* gl = target(Tensor::from_node(ln));
    if (!gl) return;
    auto& dl = gl->grad_buffer();
    const double g = self.grad[0] / wsum;
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t k = 0; k < K; ++k) {
        dl[n * K + k] += g * w[n] * (probs[n * K + k] - (k == tg[n] ? 1.0 : 0.0));
      }
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: expected [N,K]");
  const std::vector<double> uniform(logits.dim(1), 1.0);
  return weighted_cross_entropy(logits, targets, uniform);
}

}  // namespace tlid
