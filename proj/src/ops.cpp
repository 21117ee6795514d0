#include "fsens/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

#include "fsens/errors.hpp"
#include "fsens/kernels.hpp"

namespace fsens {

namespace {

Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw ParameterError("operation on an unbound variable");
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) throw ParameterError("operands recorded on different tapes");
  return tape_of(a);
}

void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

// Rows/cols view of a rank-1 or rank-2 tensor.
struct RowView {
  std::size_t rows;
  std::size_t cols;
};

RowView rows_of(const char* op, const Tensor& t) {
  if (t.rank() == 1) return {1, t.dim(0)};
  if (t.rank() == 2) return {t.dim(0), t.dim(1)};
  throw DimensionError(std::string(op) + ": expected rank 1 or 2, got " + shape_string(t.shape));
}

Shape row_output_shape(const RowView& rv) { return Shape{rv.rows}; }

}  // namespace

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape("add", a, b);
  Tensor out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return t.record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Tape& tp, std::uint32_t self) {
    auto g = tp.grad(self);
    for (auto in : {a, b}) {
      if (!tp.requires_grad(in)) continue;
      auto ga = tp.grad_buffer(in);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape("sub", a, b);
  Tensor out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  return t.record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Tape& tp, std::uint32_t self) {
    auto g = tp.grad(self);
    if (tp.requires_grad(a)) {
      auto ga = tp.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(b)) {
      auto gb = tp.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape("mul", a, b);
  Tensor out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return t.record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Tape& tp, std::uint32_t self) {
    auto g = tp.grad(self);
    const auto& av = tp.value(a).data;
    const auto& bv = tp.value(b).data;
    if (tp.requires_grad(a)) {
      auto ga = tp.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.requires_grad(b)) {
      auto gb = tp.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  Tensor out = a.value();
  for (auto& v : out.data) v *= s;
  return t.record(std::move(out), {a.id}, [a = a.id, s](Tape& tp, std::uint32_t self) {
    auto g = tp.grad(self);
    auto ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var relu(Var x) {
  Tape& t = tape_of(x);
  Tensor out = x.value();
  for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
  return t.record(std::move(out), {x.id}, [x = x.id](Tape& tp, std::uint32_t self) {
    auto g = tp.grad(self);
    const auto& xv = tp.value(x).data;
    auto gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > 0.0) gx[i] += g[i];
    }
  });
}

Var sum(Var x) {
  Tape& t = tape_of(x);
  double s = 0.0;
  for (double v : x.value().data) s += v;
  return t.record(Tensor::scalar(s), {x.id}, [x = x.id](Tape& tp, std::uint32_t self) {
    const double g = tp.grad(self)[0];
    for (auto& v : tp.grad_buffer(x)) v += g;
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().numel())); }

Var l2_norm_squared(Var x) {
  Tape& t = tape_of(x);
  double s = 0.0;
  for (double v : x.value().data) s += v * v;
  return t.record(Tensor::scalar(s), {x.id}, [x = x.id](Tape& tp, std::uint32_t self) {
    const double g = tp.grad(self)[0];
    const auto& xv = tp.value(x).data;
    auto gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 2.0 * g * xv[i];
  });
}

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0]) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(as) + " and " +
                         shape_string(bs));
  }
  const std::size_t m = as[0], k = as[1], n = bs[1];
  Tensor out({m, n});
  kernels::gemm_nn_acc(m, n, k, a.value().data.data(), b.value().data.data(), out.data.data());
  return t.record(std::move(out), {a.id, b.id},
                  [a = a.id, b = b.id, m, n, k](Tape& tp, std::uint32_t self) {
                    const double* g = tp.grad(self).data();
                    if (tp.requires_grad(a)) {
                      // dA = dC * B^T
                      kernels::gemm_nt_acc(m, k, n, g, tp.value(b).data.data(),
                                           tp.grad_buffer(a).data());
                    }
                    if (tp.requires_grad(b)) {
                      // dB = A^T * dC
                      kernels::gemm_tn_acc(k, n, m, tp.value(a).data.data(), g,
                                           tp.grad_buffer(b).data());
                    }
                  });
}

Var add_row_bias(Var x, Var bias) {
  Tape& t = tape_of(x, bias);
  const auto rv = rows_of("add_row_bias", x.value());
  if (bias.value().rank() != 1 || bias.value().dim(0) != rv.cols) {
    throw DimensionError("add_row_bias: bias " + shape_string(bias.shape()) +
                         " does not match rows of " + shape_string(x.shape()));
  }
  Tensor out = x.value();
  const auto& bv = bias.value().data;
  for (std::size_t r = 0; r < rv.rows; ++r)
    for (std::size_t c = 0; c < rv.cols; ++c) out[r * rv.cols + c] += bv[c];
  return t.record(std::move(out), {x.id, bias.id},
                  [x = x.id, b = bias.id, rv](Tape& tp, std::uint32_t self) {
                    auto g = tp.grad(self);
                    if (tp.requires_grad(x)) {
                      auto gx = tp.grad_buffer(x);
                      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                    }
                    if (tp.requires_grad(b)) {
                      auto gb = tp.grad_buffer(b);
                      for (std::size_t r = 0; r < rv.rows; ++r)
                        for (std::size_t c = 0; c < rv.cols; ++c) gb[c] += g[r * rv.cols + c];
                    }
                  });
}

namespace {

struct ConvGeometry {
  std::size_t batch, c_in, h, w, c_out;
  bool batched;
  std::size_t taps() const { return c_in * 9; }
  std::size_t pixels() const { return h * w; }
};

ConvGeometry conv_geometry(const Tensor& x, const Tensor& k) {
  ConvGeometry g{};
  if (x.rank() == 3) {
    g = {1, x.dim(0), x.dim(1), x.dim(2), 0, false};
  } else if (x.rank() == 4) {
    g = {x.dim(0), x.dim(1), x.dim(2), x.dim(3), 0, true};
  } else {
    throw DimensionError("conv2d: input must be [c x h x w] or [b x c x h x w], got " +
                         shape_string(x.shape));
  }
  if (k.rank() != 4 || k.dim(2) != 3 || k.dim(3) != 3) {
    throw DimensionError("conv2d: kernels must be [c_out x c_in x 3 x 3], got " +
                         shape_string(k.shape));
  }
  if (k.dim(1) != g.c_in) {
    throw DimensionError("conv2d: channel mismatch, input " + shape_string(x.shape) + " vs kernels " +
                         shape_string(k.shape));
  }
  g.c_out = k.dim(0);
  return g;
}

void im2col(const double* img, const ConvGeometry& g, double* cols) {
  const auto h = static_cast<std::ptrdiff_t>(g.h), w = static_cast<std::ptrdiff_t>(g.w);
  for (std::size_t c = 0; c < g.c_in; ++c) {
    const double* plane = img + c * g.h * g.w;
    for (std::ptrdiff_t ky = 0; ky < 3; ++ky) {
      for (std::ptrdiff_t kx = 0; kx < 3; ++kx) {
        double* row = cols + ((c * 9) + static_cast<std::size_t>(ky * 3 + kx)) * g.pixels();
        const std::ptrdiff_t dx = kx - 1;
        const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
        const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(w, w - dx);
        for (std::ptrdiff_t y = 0; y < h; ++y) {
          const std::ptrdiff_t sy = y + ky - 1;
          double* dst = row + y * w;
          if (sy < 0 || sy >= h) {
            std::fill(dst, dst + w, 0.0);
            continue;
          }
          const double* src = plane + sy * w + dx;
          std::fill(dst, dst + x0, 0.0);
          std::copy(src + x0, src + x1, dst + x0);
          std::fill(dst + x1, dst + w, 0.0);
        }
      }
    }
  }
}

void col2im_acc(const double* cols, const ConvGeometry& g, double* img) {
  const auto h = static_cast<std::ptrdiff_t>(g.h), w = static_cast<std::ptrdiff_t>(g.w);
  for (std::size_t c = 0; c < g.c_in; ++c) {
    double* plane = img + c * g.h * g.w;
    for (std::ptrdiff_t ky = 0; ky < 3; ++ky) {
      for (std::ptrdiff_t kx = 0; kx < 3; ++kx) {
        const double* row = cols + ((c * 9) + static_cast<std::size_t>(ky * 3 + kx)) * g.pixels();
        const std::ptrdiff_t dx = kx - 1;
        const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
        const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(w, w - dx);
        for (std::ptrdiff_t y = 0; y < h; ++y) {
          const std::ptrdiff_t sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          const double* src = row + y * w;
          double* dst = plane + sy * w + dx;
#pragma omp simd
          for (std::ptrdiff_t x = x0; x < x1; ++x) dst[x] += src[x];
        }
      }
    }
  }
}

Var conv2d_impl(Var x, Var kernels, const Var* bias) {
  Tape& t = tape_of(x, kernels);
  const ConvGeometry g = conv_geometry(x.value(), kernels.value());
  if (bias) {
    if (bias->tape != &t) throw ParameterError("conv2d: bias recorded on a different tape");
    if (bias->value().rank() != 1 || bias->value().dim(0) != g.c_out) {
      throw DimensionError("conv2d: bias " + shape_string(bias->shape()) + " does not match " +
                           std::to_string(g.c_out) + " output channels");
    }
  }
  Shape out_shape = g.batched ? Shape{g.batch, g.c_out, g.h, g.w} : Shape{g.c_out, g.h, g.w};
  Tensor out(out_shape);
  const std::size_t col_size = g.taps() * g.pixels();
  auto cols = std::make_shared<std::vector<double>>(g.batch * col_size);
  const double* xv = x.value().data.data();
  const double* kv = kernels.value().data.data();
  for (std::size_t b = 0; b < g.batch; ++b) {
    double* col = cols->data() + b * col_size;
    im2col(xv + b * g.c_in * g.pixels(), g, col);
    double* o = out.data.data() + b * g.c_out * g.pixels();
    if (bias) {
      const auto& bv = bias->value().data;
      for (std::size_t c = 0; c < g.c_out; ++c) std::fill(o + c * g.pixels(), o + (c + 1) * g.pixels(), bv[c]);
    }
    kernels::gemm_nn_acc(g.c_out, g.pixels(), g.taps(), kv, col, o);
  }
  std::vector<std::uint32_t> inputs{x.id, kernels.id};
  if (bias) inputs.push_back(bias->id);
  const std::uint32_t bias_id = bias ? bias->id : 0;
  const bool has_bias = bias != nullptr;
  return t.record(std::move(out), std::move(inputs),
                  [x = x.id, k = kernels.id, bias_id, has_bias, g, cols](Tape& tp, std::uint32_t self) {
                    const double* grad = tp.grad(self).data();
                    const std::size_t col_size = g.taps() * g.pixels();
                    const std::size_t out_size = g.c_out * g.pixels();
                    if (tp.requires_grad(k)) {
                      double* gk = tp.grad_buffer(k).data();
                      for (std::size_t b = 0; b < g.batch; ++b) {
                        kernels::gemm_nt_acc(g.c_out, g.taps(), g.pixels(), grad + b * out_size,
                                             cols->data() + b * col_size, gk);
                      }
                    }
                    if (has_bias && tp.requires_grad(bias_id)) {
                      auto gb = tp.grad_buffer(bias_id);
                      for (std::size_t b = 0; b < g.batch; ++b)
                        for (std::size_t c = 0; c < g.c_out; ++c)
                          gb[c] += kernels::sum(grad + b * out_size + c * g.pixels(), g.pixels());
                    }
                    if (tp.requires_grad(x)) {
                      double* gx = tp.grad_buffer(x).data();
                      std::vector<double> dcol(col_size);
                      const double* kv = tp.value(k).data.data();
                      for (std::size_t b = 0; b < g.batch; ++b) {
                        std::fill(dcol.begin(), dcol.end(), 0.0);
                        kernels::gemm_tn_acc(g.taps(), g.pixels(), g.c_out, kv, grad + b * out_size,
                                             dcol.data());
                        col2im_acc(dcol.data(), g, gx + b * g.c_in * g.pixels());
                      }
                    }
                  });
}

}  // namespace

Var conv2d(Var x, Var kernels) { return conv2d_impl(x, kernels, nullptr); }
Var conv2d(Var x, Var kernels, Var bias) { return conv2d_impl(x, kernels, &bias); }

Var max_pool_2x2(Var x) {
  Tape& t = tape_of(x);
  const auto& s = x.shape();
  if (s.size() < 2) throw DimensionError("max_pool_2x2: rank must be >= 2, got " + shape_string(s));
  const std::size_t h = s[s.size() - 2], w = s[s.size() - 1];
  if (h % 2 != 0 || w % 2 != 0) {
    throw DimensionError("max_pool_2x2: spatial dims must be even, got " + shape_string(s));
  }
  const std::size_t planes = x.value().numel() / (h * w);
  const std::size_t oh = h / 2, ow = w / 2;
  Shape os = s;
  os[os.size() - 2] = oh;
  os[os.size() - 1] = ow;
  Tensor out(os);
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.numel());
  const auto& xv = x.value().data;
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        std::size_t best = p * h * w + (2 * y) * w + 2 * xx;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = p * h * w + (2 * y + dy) * w + 2 * xx + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = p * oh * ow + y * ow + xx;
        out[o] = xv[best];
        (*argmax)[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return t.record(std::move(out), {x.id}, [x = x.id, argmax](Tape& tp, std::uint32_t self) {
    auto g = tp.grad(self);
    auto gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
  });
}

Var global_average_pool(Var x) {
  Tape& t = tape_of(x);
  const auto& s = x.shape();
  Shape os;
  if (s.size() == 3) {
    os = {s[0]};
  } else if (s.size() == 4) {
    os = {s[0], s[1]};
  } else {
    throw DimensionError("global_average_pool: expected rank 3 or 4, got " + shape_string(s));
  }
  const std::size_t hw = s[s.size() - 2] * s[s.size() - 1];
  Tensor out(os);
  const auto& xv = x.value().data;
  for (std::size_t p = 0; p < out.numel(); ++p) {
    out[p] = kernels::sum(xv.data() + p * hw, hw) / static_cast<double>(hw);
  }
  return t.record(std::move(out), {x.id}, [x = x.id, hw](Tape& tp, std::uint32_t self) {
    auto g = tp.grad(self);
    auto gx = tp.grad_buffer(x);
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t p = 0; p < g.size(); ++p)
      for (std::size_t i = 0; i < hw; ++i) gx[p * hw + i] += g[p] * inv;
  });
}

Var flatten(Var x) {
  Tape& t = tape_of(x);
  const auto& s = x.shape();
  Tensor out = x.value();
  if (s.size() >= 2) out.shape = {s[0], out.numel() / s[0]};
  return t.record(std::move(out), {x.id}, [x = x.id](Tape& tp, std::uint32_t self) {
    auto g = tp.grad(self);
    auto gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var dropout(Var x, double p_drop, Rng& rng) {
  if (!(p_drop >= 0.0 && p_drop < 1.0)) {
    throw ParameterError("dropout: p_drop must be in [0, 1), got " + std::to_string(p_drop));
  }
  Tape& t = tape_of(x);
  const double keep_scale = 1.0 / (1.0 - p_drop);
  auto mask = std::make_shared<std::vector<double>>(x.value().numel());
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) {
    (*mask)[i] = rng.bernoulli(p_drop) ? 0.0 : keep_scale;
    out[i] *= (*mask)[i];
  }
  return t.record(std::move(out), {x.id}, [x = x.id, mask](Tape& tp, std::uint32_t self) {
    auto g = tp.grad(self);
    auto gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
  });
}

Var softmax_temp(Var z, double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ParameterError("softmax_temp: temperature must be positive, got " +
                         std::to_string(temperature));
  }
  Tape& t = tape_of(z);
  const auto rv = rows_of("softmax_temp", z.value());
  Tensor out = z.value();
  for (std::size_t r = 0; r < rv.rows; ++r) {
    double* row = out.data.data() + r * rv.cols;
    double mx = row[0];
    for (std::size_t c = 1; c < rv.cols; ++c) mx = std::max(mx, row[c]);
    double total = 0.0;
    for (std::size_t c = 0; c < rv.cols; ++c) {
      row[c] = std::exp((row[c] - mx) / temperature);
      total += row[c];
    }
    for (std::size_t c = 0; c < rv.cols; ++c) row[c] /= total;
  }
  return t.record(std::move(out), {z.id}, [z = z.id, rv, temperature](Tape& tp, std::uint32_t self) {
    auto g = tp.grad(self);
    const auto& p = tp.value(self).data;
    auto gz = tp.grad_buffer(z);
    for (std::size_t r = 0; r < rv.rows; ++r) {
      const std::size_t o = r * rv.cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < rv.cols; ++c) dot += g[o + c] * p[o + c];
      for (std::size_t c = 0; c < rv.cols; ++c) gz[o + c] += p[o + c] * (g[o + c] - dot) / temperature;
    }
  });
}

Var cosine_similarity(Var u, Var v) {
  Tape& t = tape_of(u, v);
  require_same_shape("cosine_similarity", u, v);
  const auto rv = rows_of("cosine_similarity", u.value());
  const auto& uv = u.value().data;
  const auto& vv = v.value().data;
  Tensor out(row_output_shape(rv));
  // Per row: dot, |u|, |v| (floored).
  auto stats = std::make_shared<std::vector<double>>(3 * rv.rows);
  for (std::size_t r = 0; r < rv.rows; ++r) {
    const double* a = uv.data() + r * rv.cols;
    const double* b = vv.data() + r * rv.cols;
    const double dot = kernels::dot(a, b, rv.cols);
    const double nu = std::max(std::sqrt(kernels::dot(a, a, rv.cols)), kNormFloor);
    const double nv = std::max(std::sqrt(kernels::dot(b, b, rv.cols)), kNormFloor);
    (*stats)[3 * r] = dot;
    (*stats)[3 * r + 1] = nu;
    (*stats)[3 * r + 2] = nv;
    out[r] = dot / (nu * nv);
  }
  return t.record(std::move(out), {u.id, v.id},
                  [u = u.id, v = v.id, rv, stats](Tape& tp, std::uint32_t self) {
                    auto g = tp.grad(self);
                    const auto& uv = tp.value(u).data;
                    const auto& vv = tp.value(v).data;
                    const auto& cosv = tp.value(self).data;
                    for (std::size_t r = 0; r < rv.rows; ++r) {
                      const double nu = (*stats)[3 * r + 1], nv = (*stats)[3 * r + 2];
                      const double cs = cosv[r];
                      const std::size_t o = r * rv.cols;
                      // A floored norm is a constant, so its radial term drops out.
                      const bool u_free = nu > kNormFloor, v_free = nv > kNormFloor;
                      if (tp.requires_grad(u)) {
                        auto gu = tp.grad_buffer(u);
                        for (std::size_t c = 0; c < rv.cols; ++c) {
                          double d = vv[o + c] / (nu * nv);
                          if (u_free) d -= cs * uv[o + c] / (nu * nu);
                          gu[o + c] += g[r] * d;
                        }
                      }
                      if (tp.requires_grad(v)) {
                        auto gv = tp.grad_buffer(v);
                        for (std::size_t c = 0; c < rv.cols; ++c) {
                          double d = uv[o + c] / (nu * nv);
                          if (v_free) d -= cs * vv[o + c] / (nv * nv);
                          gv[o + c] += g[r] * d;
                        }
                      }
                    }
                  });
}

namespace {
double clamp_prob(double x, double lo) { return std::clamp(x, lo, 1.0); }
bool inside_clamp(double x, double lo) { return x > lo && x < 1.0; }
}  // namespace

Var kl_divergence(Var p, Var q, double clamp) {
  if (!(clamp > 0.0 && clamp < 1.0)) throw ParameterError("kl_divergence: clamp must be in (0, 1)");
  Tape& t = tape_of(p, q);
  require_same_shape("kl_divergence", p, q);
  const auto rv = rows_of("kl_divergence", p.value());
  const auto& pv = p.value().data;
  const auto& qv = q.value().data;
  Tensor out(row_output_shape(rv));
  for (std::size_t r = 0; r < rv.rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < rv.cols; ++c) {
      const double a = clamp_prob(pv[r * rv.cols + c], clamp);
      const double b = clamp_prob(qv[r * rv.cols + c], clamp);
      s += a * std::log(a / b) - a + b;
    }
    out[r] = s;
  }
  return t.record(std::move(out), {p.id, q.id},
                  [p = p.id, q = q.id, rv, clamp](Tape& tp, std::uint32_t self) {
                    auto g = tp.grad(self);
                    const auto& pv = tp.value(p).data;
                    const auto& qv = tp.value(q).data;
                    const bool gp = tp.requires_grad(p), gq = tp.requires_grad(q);
                    std::span<double> dp, dq;
                    if (gp) dp = tp.grad_buffer(p);
                    if (gq) dq = tp.grad_buffer(q);
                    for (std::size_t r = 0; r < rv.rows; ++r) {
                      for (std::size_t c = 0; c < rv.cols; ++c) {
                        const std::size_t i = r * rv.cols + c;
                        const double a = clamp_prob(pv[i], clamp);
                        const double b = clamp_prob(qv[i], clamp);
                        if (gp && inside_clamp(pv[i], clamp)) dp[i] += g[r] * std::log(a / b);
                        if (gq && inside_clamp(qv[i], clamp)) dq[i] += g[r] * (1.0 - a / b);
                      }
                    }
                  });
}

Var squared_distance(Var u, Var v) {
  Tape& t = tape_of(u, v);
  require_same_shape("squared_distance", u, v);
  const auto rv = rows_of("squared_distance", u.value());
  const auto& uv = u.value().data;
  const auto& vv = v.value().data;
  Tensor out(row_output_shape(rv));
  for (std::size_t r = 0; r < rv.rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < rv.cols; ++c) {
      const double d = uv[r * rv.cols + c] - vv[r * rv.cols + c];
      s += d * d;
    }
    out[r] = s;
  }
  return t.record(std::move(out), {u.id, v.id}, [u = u.id, v = v.id, rv](Tape& tp, std::uint32_t self) {
    auto g = tp.grad(self);
    const auto& uv = tp.value(u).data;
    const auto& vv = tp.value(v).data;
    const bool gu = tp.requires_grad(u), gv = tp.requires_grad(v);
    std::span<double> du, dv;
    if (gu) du = tp.grad_buffer(u);
    if (gv) dv = tp.grad_buffer(v);
    for (std::size_t r = 0; r < rv.rows; ++r) {
      for (std::size_t c = 0; c < rv.cols; ++c) {
        const std::size_t i = r * rv.cols + c;
        const double d = 2.0 * g[r] * (uv[i] - vv[i]);
        if (gu) du[i] += d;
        if (gv) dv[i] -= d;
      }
    }
  });
}

Var pairwise_cosine(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[1]) {
    throw DimensionError("pairwise_cosine: incompatible shapes " + shape_string(as) + " and " +
                         shape_string(bs));
  }
  const std::size_t m = as[0], n = bs[0], d = as[1];
  const auto& av = a.value().data;
  const auto& bv = b.value().data;
  auto na = std::make_shared<std::vector<double>>(m);
  auto nb = std::make_shared<std::vector<double>>(n);
  for (std::size_t i = 0; i < m; ++i)
    (*na)[i] = std::max(std::sqrt(kernels::dot(&av[i * d], &av[i * d], d)), kNormFloor);
  for (std::size_t j = 0; j < n; ++j)
    (*nb)[j] = std::max(std::sqrt(kernels::dot(&bv[j * d], &bv[j * d], d)), kNormFloor);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out[i * n + j] = kernels::dot(&av[i * d], &bv[j * d], d) / ((*na)[i] * (*nb)[j]);
  return t.record(std::move(out), {a.id, b.id},
                  [a = a.id, b = b.id, m, n, d, na, nb](Tape& tp, std::uint32_t self) {
                    auto g = tp.grad(self);
                    const auto& av = tp.value(a).data;
                    const auto& bv = tp.value(b).data;
                    const auto& cs = tp.value(self).data;
                    const bool ga = tp.requires_grad(a), gb = tp.requires_grad(b);
                    std::span<double> da, db;
                    if (ga) da = tp.grad_buffer(a);
                    if (gb) db = tp.grad_buffer(b);
                    for (std::size_t i = 0; i < m; ++i) {
                      const bool a_free = (*na)[i] > kNormFloor;
                      for (std::size_t j = 0; j < n; ++j) {
                        const bool b_free = (*nb)[j] > kNormFloor;
                        const double gij = g[i * n + j];
                        if (gij == 0.0) continue;
                        const double inv = 1.0 / ((*na)[i] * (*nb)[j]);
                        const double c = cs[i * n + j];
                        for (std::size_t k = 0; k < d; ++k) {
                          if (ga) {
                            double v = bv[j * d + k] * inv;
                            if (a_free) v -= c * av[i * d + k] / ((*na)[i] * (*na)[i]);
                            da[i * d + k] += gij * v;
                          }
                          if (gb) {
                            double v = av[i * d + k] * inv;
                            if (b_free) v -= c * bv[j * d + k] / ((*nb)[j] * (*nb)[j]);
                            db[j * d + k] += gij * v;
                          }
                        }
                      }
                    }
                  });
}

Var cross_entropy(Var target, Var pred, double clamp) {
  Tape& t = tape_of(target, pred);
  require_same_shape("cross_entropy", target, pred);
  const auto rv = rows_of("cross_entropy", pred.value());
  const auto& tv = target.value().data;
  const auto& pv = pred.value().data;
  double s = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (tv[i] != 0.0) s -= tv[i] * std::log(clamp_prob(pv[i], clamp));
  }
  const double inv_rows = 1.0 / static_cast<double>(rv.rows);
  return t.record(Tensor::scalar(s * inv_rows), {target.id, pred.id},
                  [tg = target.id, pr = pred.id, inv_rows, clamp](Tape& tp, std::uint32_t self) {
                    const double g = tp.grad(self)[0] * inv_rows;
                    const auto& tv = tp.value(tg).data;
                    const auto& pv = tp.value(pr).data;
                    if (tp.requires_grad(pr)) {
                      auto dp = tp.grad_buffer(pr);
                      for (std::size_t i = 0; i < pv.size(); ++i) {
                        if (inside_clamp(pv[i], clamp) || pv[i] == 1.0) dp[i] -= g * tv[i] / pv[i];
                      }
                    }
                    if (tp.requires_grad(tg)) {
                      auto dt = tp.grad_buffer(tg);
                      for (std::size_t i = 0; i < tv.size(); ++i)
                        dt[i] -= g * std::log(clamp_prob(pv[i], clamp));
                    }
                  });
}

Var condition_non_gt(Var p, std::span<const std::size_t> labels, double floor) {
  Tape& t = tape_of(p);
  const auto rv = rows_of("condition_non_gt", p.value());
  if (labels.size() != rv.rows) {
    throw DimensionError("condition_non_gt: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(rv.rows) + " rows");
  }
  for (auto y : labels) {
    if (y >= rv.cols) {
      throw ParameterError("condition_non_gt: label " + std::to_string(y) + " out of range for " +
                           std::to_string(rv.cols) + " classes");
    }
  }
  const auto& pv = p.value().data;
  Tensor out(p.value().shape);
  auto mass = std::make_shared<std::vector<double>>(rv.rows);
  auto lab = std::make_shared<std::vector<std::size_t>>(labels.begin(), labels.end());
  for (std::size_t r = 0; r < rv.rows; ++r) {
    const std::size_t o = r * rv.cols;
    double s = 0.0;
    for (std::size_t c = 0; c < rv.cols; ++c)
      if (c != labels[r]) s += pv[o + c];
    (*mass)[r] = s;
    const double denom = std::max(s, floor);
    for (std::size_t c = 0; c < rv.cols; ++c) out[o + c] = (c == labels[r]) ? 0.0 : pv[o + c] / denom;
  }
  return t.record(std::move(out), {p.id}, [p = p.id, rv, mass, lab, floor](Tape& tp, std::uint32_t self) {
    auto g = tp.grad(self);
    const auto& outv = tp.value(self).data;
    auto dp = tp.grad_buffer(p);
    for (std::size_t r = 0; r < rv.rows; ++r) {
      const std::size_t o = r * rv.cols;
      const std::size_t y = (*lab)[r];
      const double s = (*mass)[r];
      const double denom = std::max(s, floor);
      // d out_c / d p_i = (delta_ci - out_c [s above floor]) / denom, for i, c != y.
      double dot = 0.0;
      if (s > floor) {
        for (std::size_t c = 0; c < rv.cols; ++c)
          if (c != y) dot += g[o + c] * outv[o + c];
      }
      for (std::size_t i = 0; i < rv.cols; ++i) {
        if (i == y) continue;
        dp[o + i] += (g[o + i] - dot) / denom;
      }
    }
  });
}

Tensor one_hot(std::span<const std::size_t> labels, std::size_t d) {
  Tensor out({labels.size(), d});
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] >= d) throw ParameterError("one_hot: label out of range");
    out[r * d + labels[r]] = 1.0;
  }
  return out;
}

}  // namespace fsens
