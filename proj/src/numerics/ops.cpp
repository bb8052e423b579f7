#include "tspsae/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "tspsae/numerics/kernels.hpp"

namespace tspsae::ad {
namespace {

template <class T>
Tape<T>& same_tape(const Var<T>& a, const Var<T>& b) {
  if (!a.valid() || a.tape() != b.tape()) throw ContractError("ad: operands recorded on different tapes");
  return *a.tape();
}

template <class T>
void require_rank2(const Var<T>& a, const char* op) {
  if (a.value().rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(a.shape()));
  }
}

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

// Row length of a bias-like operand: [n] or [1, n].
template <class T>
std::size_t vector_length(const Var<T>& v, const char* op) {
  const auto& s = v.shape();
  if (s.size() == 1) return s[0];
  if (s.size() == 2 && s[0] == 1) return s[1];
  throw DimensionError(std::string(op) + ": expected a vector, got " + shape_string(s));
}

template <class T>
BasicTensor<T> scalar_tensor(double v) {
  return BasicTensor<T>::scalar(static_cast<T>(v));
}

}  // namespace

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = same_tape(a, b);
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner extents differ " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  BasicTensor<T> out(Shape{m, n});
  kernels::gemm_nn(m, k, n, a.value().data(), b.value().data(), out.data());
  return tape.record(std::move(out), {a, b}, [a, b, m, k, n](Tape<T>& t, const BasicTensor<T>& g) {
    if (t.requires_grad(a)) kernels::gemm_nt(m, n, k, g.data(), b.value().data(), t.grad_slot(a.id()).data(), true);
    if (t.requires_grad(b)) kernels::gemm_tn(k, m, n, a.value().data(), g.data(), t.grad_slot(b.id()).data(), true);
  });
}

template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = same_tape(a, b);
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) {
    throw DimensionError("matmul_nt: inner extents differ " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()) + "^T");
  }
  BasicTensor<T> out(Shape{m, n});
  kernels::gemm_nt(m, k, n, a.value().data(), b.value().data(), out.data());
  return tape.record(std::move(out), {a, b}, [a, b, m, k, n](Tape<T>& t, const BasicTensor<T>& g) {
    if (t.requires_grad(a)) kernels::gemm_nn(m, n, k, g.data(), b.value().data(), t.grad_slot(a.id()).data(), true);
    if (t.requires_grad(b)) kernels::gemm_tn(n, m, k, g.data(), a.value().data(), t.grad_slot(b.id()).data(), true);
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = same_tape(a, b);
  require_same_shape(a, b, "add");
  BasicTensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, const BasicTensor<T>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = same_tape(a, b);
  require_same_shape(a, b, "sub");
  BasicTensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, const BasicTensor<T>& g) {
    t.accumulate(a, g);
    if (t.requires_grad(b)) {
      auto& slot = t.grad_slot(b.id());
      for (std::size_t i = 0; i < g.size(); ++i) slot[i] -= g[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = same_tape(a, b);
  require_same_shape(a, b, "mul");
  BasicTensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, const BasicTensor<T>& g) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (t.requires_grad(a)) {
      auto& slot = t.grad_slot(a.id());
      for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      auto& slot = t.grad_slot(b.id());
      for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i] * av[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, double s) {
  BasicTensor<T> out = a.value();
  const T st = static_cast<T>(s);
  for (auto& v : out.values()) v *= st;
  return a.tape()->record(std::move(out), {a}, [a, st](Tape<T>& t, const BasicTensor<T>& g) {
    auto& slot = t.grad_slot(a.id());
    kernels::axpy(g.size(), st, g.data(), slot.data());
  });
}

template <class T>
Var<T> add_row(const Var<T>& a, const Var<T>& v) {
  Tape<T>& tape = same_tape(a, v);
  require_rank2(a, "add_row");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (vector_length(v, "add_row") != n) {
    throw DimensionError("add_row: " + shape_string(v.shape()) + " onto " + shape_string(a.shape()));
  }
  BasicTensor<T> out = a.value();
  const auto& vv = v.value();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += vv[j];
  }
  return tape.record(std::move(out), {a, v}, [a, v, m, n](Tape<T>& t, const BasicTensor<T>& g) {
    t.accumulate(a, g);
    if (t.requires_grad(v)) {
      auto& slot = t.grad_slot(v.id());
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) slot[j] += g[i * n + j];
      }
    }
  });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  BasicTensor<T> out = a.value();
  for (auto& v : out.values()) v = v > T(0) ? v : T(0);
  return a.tape()->record(std::move(out), {a}, [a](Tape<T>& t, const BasicTensor<T>& g) {
    const auto& av = a.value();
    auto& slot = t.grad_slot(a.id());
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (av[i] > T(0)) slot[i] += g[i];
    }
  });
}

template <class T>
Var<T> tanh(const Var<T>& a) {
  BasicTensor<T> out = a.value();
  for (auto& v : out.values()) v = std::tanh(v);
  auto y = std::make_shared<BasicTensor<T>>(out);
  return a.tape()->record(std::move(out), {a}, [a, y](Tape<T>& t, const BasicTensor<T>& g) {
    auto& slot = t.grad_slot(a.id());
    for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i] * (T(1) - (*y)[i] * (*y)[i]);
  });
}

template <class T>
Var<T> softmax(const Var<T>& x, std::size_t axis, double temperature) {
  if (!(temperature > 0.0)) throw ParameterError("softmax: temperature must be > 0");
  const auto& xv = x.value();
  std::size_t len = 0, stride = 0, count = 0, outer_stride = 0;
  if (xv.rank() == 1 && axis == 0) {
    len = xv.size(), stride = 1, count = 1, outer_stride = 0;
  } else if (xv.rank() == 2 && axis == 1) {
    len = xv.cols(), stride = 1, count = xv.rows(), outer_stride = xv.cols();
  } else if (xv.rank() == 2 && axis == 0) {
    len = xv.rows(), stride = xv.cols(), count = xv.cols(), outer_stride = 1;
  } else {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_string(xv.shape()));
  }
  const double inv_t = 1.0 / temperature;
  BasicTensor<T> out(xv.shape());
  for (std::size_t c = 0; c < count; ++c) {
    const std::size_t base = c * outer_stride;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, double(xv[base + i * stride]) * inv_t);
    double total = 0.0;
    for (std::size_t i = 0; i < len; ++i) total += std::exp(double(xv[base + i * stride]) * inv_t - mx);
    for (std::size_t i = 0; i < len; ++i) {
      out[base + i * stride] = static_cast<T>(std::exp(double(xv[base + i * stride]) * inv_t - mx) / total);
    }
  }
  auto y = std::make_shared<BasicTensor<T>>(out);
  return x.tape()->record(std::move(out), {x}, [x, y, len, stride, count, outer_stride, inv_t](Tape<T>& t,
                                                                                            const BasicTensor<T>& g) {
    auto& slot = t.grad_slot(x.id());
    for (std::size_t c = 0; c < count; ++c) {
      const std::size_t base = c * outer_stride;
      double inner = 0.0;
      for (std::size_t i = 0; i < len; ++i) inner += double(g[base + i * stride]) * double((*y)[base + i * stride]);
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t at = base + i * stride;
        slot[at] += static_cast<T>(double((*y)[at]) * (double(g[at]) - inner) * inv_t);
      }
    }
  });
}

template <class T>
Var<T> log_softmax(const Var<T>& x, const Mask* mask, double temperature) {
  if (!(temperature > 0.0)) throw ParameterError("log_softmax: temperature must be > 0");
  const auto& xv = x.value();
  const std::size_t m = xv.rows(), n = xv.cols();
  if (mask && mask->size() != xv.size()) throw DimensionError("log_softmax: mask size differs from input");
  const double inv_t = 1.0 / temperature;
  auto hidden = [mask](std::size_t i) { return mask && (*mask)[i] != 0; };

  BasicTensor<T> out(xv.shape());
  auto probs = std::make_shared<std::vector<double>>(xv.size(), 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (!hidden(r * n + j)) mx = std::max(mx, double(xv[r * n + j]) * inv_t);
    }
    if (!std::isfinite(mx)) throw ContractError("log_softmax: row " + std::to_string(r) + " fully masked");
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!hidden(r * n + j)) total += std::exp(double(xv[r * n + j]) * inv_t - mx);
    }
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t at = r * n + j;
      if (hidden(at)) {
        out[at] = -std::numeric_limits<T>::infinity();
      } else {
        const double lp = double(xv[at]) * inv_t - lse;
        out[at] = static_cast<T>(lp);
        (*probs)[at] = std::exp(lp);
      }
    }
  }
  Mask keep = mask ? *mask : Mask{};
  return x.tape()->record(std::move(out), {x}, [x, probs, keep = std::move(keep), m, n, inv_t](
                                                   Tape<T>& t, const BasicTensor<T>& g) {
    auto& slot = t.grad_slot(x.id());
    for (std::size_t r = 0; r < m; ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t at = r * n + j;
        if (keep.empty() || keep[at] == 0) total += double(g[at]);
      }
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t at = r * n + j;
        if (!keep.empty() && keep[at] != 0) continue;
        slot[at] += static_cast<T>((double(g[at]) - (*probs)[at] * total) * inv_t);
      }
    }
  });
}

template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, double eps) {
  Tape<T>& tape = same_tape(x, gain);
  same_tape(x, bias);
  require_rank2(x, "layer_norm");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (vector_length(gain, "layer_norm") != n || vector_length(bias, "layer_norm") != n) {
    throw DimensionError("layer_norm: gain/bias length differs from " + shape_string(x.shape()));
  }
  const auto& xv = x.value();
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  auto xhat = std::make_shared<BasicTensor<T>>(x.shape());
  auto rstd = std::make_shared<std::vector<double>>(m);
  BasicTensor<T> out(x.shape());
  for (std::size_t r = 0; r < m; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xv[r * n + j];
    mu /= double(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = xv[r * n + j] - mu;
      var += d * d;
    }
    var /= double(n);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t at = r * n + j;
      const T h = static_cast<T>((xv[at] - mu) * rs);
      (*xhat)[at] = h;
      out[at] = h * gv[j] + bv[j];
    }
  }
  return tape.record(std::move(out), {x, gain, bias}, [x, gain, bias, xhat, rstd, m, n](Tape<T>& t,
                                                                                      const BasicTensor<T>& g) {
    const auto& gv = gain.value();
    if (t.requires_grad(gain) || t.requires_grad(bias)) {
      std::vector<double> dg(n, 0.0), db(n, 0.0);
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t j = 0; j < n; ++j) {
          dg[j] += double(g[r * n + j]) * double((*xhat)[r * n + j]);
          db[j] += double(g[r * n + j]);
        }
      }
      if (t.requires_grad(gain)) {
        auto& slot = t.grad_slot(gain.id());
        for (std::size_t j = 0; j < n; ++j) slot[j] += static_cast<T>(dg[j]);
      }
      if (t.requires_grad(bias)) {
        auto& slot = t.grad_slot(bias.id());
        for (std::size_t j = 0; j < n; ++j) slot[j] += static_cast<T>(db[j]);
      }
    }
    if (t.requires_grad(x)) {
      auto& slot = t.grad_slot(x.id());
      for (std::size_t r = 0; r < m; ++r) {
        double mean_d = 0.0, mean_dx = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double d = double(g[r * n + j]) * double(gv[j]);
          mean_d += d;
          mean_dx += d * double((*xhat)[r * n + j]);
        }
        mean_d /= double(n);
        mean_dx /= double(n);
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t at = r * n + j;
          const double d = double(g[at]) * double(gv[j]);
          slot[at] += static_cast<T>((*rstd)[r] * (d - mean_d - double((*xhat)[at]) * mean_dx));
        }
      }
    }
  });
}

template <class T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = same_tape(a, b);
  require_rank2(a, "concat_cols");
  require_rank2(b, "concat_cols");
  const std::size_t m = a.shape()[0], p = a.shape()[1], q = b.shape()[1];
  if (b.shape()[0] != m) throw DimensionError("concat_cols: row counts differ");
  BasicTensor<T> out(Shape{m, p + q});
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(a.value().data() + i * p, p, out.data() + i * (p + q));
    std::copy_n(b.value().data() + i * q, q, out.data() + i * (p + q) + p);
  }
  return tape.record(std::move(out), {a, b}, [a, b, m, p, q](Tape<T>& t, const BasicTensor<T>& g) {
    if (t.requires_grad(a)) {
      auto& slot = t.grad_slot(a.id());
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < p; ++j) slot[i * p + j] += g[i * (p + q) + j];
      }
    }
    if (t.requires_grad(b)) {
      auto& slot = t.grad_slot(b.id());
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < q; ++j) slot[i * q + j] += g[i * (p + q) + p + j];
      }
    }
  });
}

template <class T>
Var<T> gather_rows(const Var<T>& a, std::span<const std::size_t> index) {
  require_rank2(a, "gather_rows");
  const std::size_t rows = a.shape()[0], n = a.shape()[1];
  if (index.empty()) throw DimensionError("gather_rows: empty index");
  BasicTensor<T> out(Shape{index.size(), n});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows) throw DimensionError("gather_rows: row " + std::to_string(index[i]) + " out of range");
    std::copy_n(a.value().data() + index[i] * n, n, out.data() + i * n);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return a.tape()->record(std::move(out), {a}, [a, idx = std::move(idx), n](Tape<T>& t, const BasicTensor<T>& g) {
    auto& slot = t.grad_slot(a.id());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      kernels::axpy(n, T(1), g.data() + i * n, slot.data() + idx[i] * n);
    }
  });
}

template <class T>
Var<T> broadcast_rows(const Var<T>& v, std::size_t rows) {
  const std::size_t n = vector_length(v, "broadcast_rows");
  if (rows == 0) throw DimensionError("broadcast_rows: zero rows");
  BasicTensor<T> out(Shape{rows, n});
  for (std::size_t i = 0; i < rows; ++i) std::copy_n(v.value().data(), n, out.data() + i * n);
  return v.tape()->record(std::move(out), {v}, [v, rows, n](Tape<T>& t, const BasicTensor<T>& g) {
    auto& slot = t.grad_slot(v.id());
    for (std::size_t i = 0; i < rows; ++i) kernels::axpy(n, T(1), g.data() + i * n, slot.data());
  });
}

template <class T>
Var<T> group_mean(const Var<T>& a, std::size_t groups) {
  require_rank2(a, "group_mean");
  const std::size_t rows = a.shape()[0], n = a.shape()[1];
  if (groups == 0 || rows % groups != 0) {
    throw DimensionError("group_mean: " + std::to_string(rows) + " rows not divisible into " + std::to_string(groups));
  }
  const std::size_t r = rows / groups;
  BasicTensor<T> out(Shape{groups, n});
  const auto& av = a.value();
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < r; ++i) s += av[(g * r + i) * n + j];
      out[g * n + j] = static_cast<T>(s / double(r));
    }
  }
  return a.tape()->record(std::move(out), {a}, [a, groups, r, n](Tape<T>& t, const BasicTensor<T>& gr) {
    auto& slot = t.grad_slot(a.id());
    const T inv = T(1) / static_cast<T>(r);
    for (std::size_t g = 0; g < groups; ++g) {
      for (std::size_t i = 0; i < r; ++i) kernels::axpy(n, inv, gr.data() + g * n, slot.data() + (g * r + i) * n);
    }
  });
}

template <class T>
Var<T> group_rowdot(const Var<T>& q, const Var<T>& keys) {
  Tape<T>& tape = same_tape(q, keys);
  require_rank2(q, "group_rowdot");
  require_rank2(keys, "group_rowdot");
  const std::size_t groups = q.shape()[0], d = q.shape()[1];
  if (keys.shape()[1] != d || keys.shape()[0] % groups != 0) {
    throw DimensionError("group_rowdot: " + shape_string(q.shape()) + " against " + shape_string(keys.shape()));
  }
  const std::size_t r = keys.shape()[0] / groups;
  BasicTensor<T> out(Shape{groups, r});
  const T* qd = q.value().data();
  const T* kd = keys.value().data();
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t j = 0; j < r; ++j) out[g * r + j] = kernels::dot(d, qd + g * d, kd + (g * r + j) * d);
  }
  return tape.record(std::move(out), {q, keys}, [q, keys, groups, r, d](Tape<T>& t, const BasicTensor<T>& g) {
    const T* qd = q.value().data();
    const T* kd = keys.value().data();
    if (t.requires_grad(q)) {
      auto& slot = t.grad_slot(q.id());
      for (std::size_t gi = 0; gi < groups; ++gi) {
        for (std::size_t j = 0; j < r; ++j) kernels::axpy(d, g[gi * r + j], kd + (gi * r + j) * d, slot.data() + gi * d);
      }
    }
    if (t.requires_grad(keys)) {
      auto& slot = t.grad_slot(keys.id());
      for (std::size_t gi = 0; gi < groups; ++gi) {
        for (std::size_t j = 0; j < r; ++j) kernels::axpy(d, g[gi * r + j], qd + gi * d, slot.data() + (gi * r + j) * d);
      }
    }
  });
}

template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads, std::size_t groups,
                 const Mask* key_mask) {
  Tape<T>& tape = same_tape(q, k);
  same_tape(q, v);
  require_rank2(q, "attention");
  require_rank2(k, "attention");
  require_rank2(v, "attention");
  const std::size_t d = q.shape()[1];
  if (k.shape() != v.shape() || k.shape()[1] != d) {
    throw DimensionError("attention: q " + shape_string(q.shape()) + ", k " + shape_string(k.shape()) + ", v " +
                         shape_string(v.shape()));
  }
  if (heads == 0 || d % heads != 0) throw DimensionError("attention: width not divisible by head count");
  if (groups == 0 || q.shape()[0] % groups != 0 || k.shape()[0] % groups != 0) {
    throw DimensionError("attention: rows not divisible into groups");
  }
  const std::size_t nq = q.shape()[0] / groups, nk = k.shape()[0] / groups, dk = d / heads;
  if (key_mask && key_mask->size() != groups * nk) throw DimensionError("attention: key mask size");
  const double scale_f = 1.0 / std::sqrt(double(dk));

  // Per (group, head) attention weights, kept for backward.
  auto probs = std::make_shared<std::vector<T>>(groups * heads * nq * nk);
  BasicTensor<T> out(q.shape());
  std::vector<T> qh(nq * dk), kh(nk * dk), vh(nk * dk), oh(nq * dk);
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < nq; ++i) std::copy_n(qv.data() + (g * nq + i) * d + h * dk, dk, qh.data() + i * dk);
      for (std::size_t j = 0; j < nk; ++j) {
        std::copy_n(kv.data() + (g * nk + j) * d + h * dk, dk, kh.data() + j * dk);
        std::copy_n(vv.data() + (g * nk + j) * d + h * dk, dk, vh.data() + j * dk);
      }
      T* p = probs->data() + (g * heads + h) * nq * nk;
      kernels::gemm_nt(nq, dk, nk, qh.data(), kh.data(), p);
      for (std::size_t i = 0; i < nq; ++i) {
        T* row = p + i * nk;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < nk; ++j) {
          if (key_mask && (*key_mask)[g * nk + j]) continue;
          mx = std::max(mx, double(row[j]) * scale_f);
        }
        if (!std::isfinite(mx)) throw ContractError("attention: every key of a group is masked");
        double total = 0.0;
        for (std::size_t j = 0; j < nk; ++j) {
          if (key_mask && (*key_mask)[g * nk + j]) {
            row[j] = T(0);
            continue;
          }
          const double e = std::exp(double(row[j]) * scale_f - mx);
          row[j] = static_cast<T>(e);
          total += e;
        }
        const T inv = static_cast<T>(1.0 / total);
        for (std::size_t j = 0; j < nk; ++j) row[j] *= inv;
      }
      kernels::gemm_nn(nq, nk, dk, p, vh.data(), oh.data());
      for (std::size_t i = 0; i < nq; ++i) std::copy_n(oh.data() + i * dk, dk, out.data() + (g * nq + i) * d + h * dk);
    }
  }

  return tape.record(std::move(out), {q, k, v}, [q, k, v, probs, heads, groups, nq, nk, d, dk, scale_f](
                                                      Tape<T>& t, const BasicTensor<T>& grad) {
    const auto& qv = q.value();
    const auto& kv = k.value();
    const auto& vv = v.value();
    const bool gq = t.requires_grad(q), gk = t.requires_grad(k), gv = t.requires_grad(v);
    T* dq = gq ? t.grad_slot(q.id()).data() : nullptr;
    T* dkey = gk ? t.grad_slot(k.id()).data() : nullptr;
    T* dval = gv ? t.grad_slot(v.id()).data() : nullptr;
    std::vector<T> qh(nq * dk), kh(nk * dk), vh(nk * dk), doh(nq * dk), dp(nq * nk), tmp_q(nq * dk),
        tmp_k(nk * dk), tmp_v(nk * dk);
    const T sc = static_cast<T>(scale_f);
    for (std::size_t g = 0; g < groups; ++g) {
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < nq; ++i) {
          std::copy_n(qv.data() + (g * nq + i) * d + h * dk, dk, qh.data() + i * dk);
          std::copy_n(grad.data() + (g * nq + i) * d + h * dk, dk, doh.data() + i * dk);
        }
        for (std::size_t j = 0; j < nk; ++j) {
          std::copy_n(kv.data() + (g * nk + j) * d + h * dk, dk, kh.data() + j * dk);
          std::copy_n(vv.data() + (g * nk + j) * d + h * dk, dk, vh.data() + j * dk);
        }
        const T* p = probs->data() + (g * heads + h) * nq * nk;
        if (gv) {
          kernels::gemm_tn(nk, nq, dk, p, doh.data(), tmp_v.data());
          for (std::size_t j = 0; j < nk; ++j) {
            kernels::axpy(dk, T(1), tmp_v.data() + j * dk, dval + (g * nk + j) * d + h * dk);
          }
        }
        if (!gq && !gk) continue;
        kernels::gemm_nt(nq, dk, nk, doh.data(), vh.data(), dp.data());
        for (std::size_t i = 0; i < nq; ++i) {
          double inner = 0.0;
          for (std::size_t j = 0; j < nk; ++j) inner += double(dp[i * nk + j]) * double(p[i * nk + j]);
          for (std::size_t j = 0; j < nk; ++j) {
            dp[i * nk + j] = static_cast<T>(double(p[i * nk + j]) * (double(dp[i * nk + j]) - inner)) * sc;
          }
        }
        if (gq) {
          kernels::gemm_nn(nq, nk, dk, dp.data(), kh.data(), tmp_q.data());
          for (std::size_t i = 0; i < nq; ++i) {
            kernels::axpy(dk, T(1), tmp_q.data() + i * dk, dq + (g * nq + i) * d + h * dk);
          }
        }
        if (gk) {
          kernels::gemm_tn(nk, nq, dk, dp.data(), qh.data(), tmp_k.data());
          for (std::size_t j = 0; j < nk; ++j) {
            kernels::axpy(dk, T(1), tmp_k.data() + j * dk, dkey + (g * nk + j) * d + h * dk);
          }
        }
      }
    }
  });
}

template <class T>
Var<T> pick(const Var<T>& a, std::span<const std::size_t> index) {
  require_rank2(a, "pick");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (index.size() != m) throw DimensionError("pick: one index per row required");
  BasicTensor<T> out(Shape{m});
  for (std::size_t i = 0; i < m; ++i) {
    if (index[i] >= n) throw DimensionError("pick: column out of range");
    out[i] = a.value()[i * n + index[i]];
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return a.tape()->record(std::move(out), {a}, [a, idx = std::move(idx), n](Tape<T>& t, const BasicTensor<T>& g) {
    auto& slot = t.grad_slot(a.id());
    for (std::size_t i = 0; i < idx.size(); ++i) slot[i * n + idx[i]] += g[i];
  });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  double s = 0.0;
  for (T v : a.value().values()) s += v;
  return a.tape()->record(scalar_tensor<T>(s), {a}, [a](Tape<T>& t, const BasicTensor<T>& g) {
    auto& slot = t.grad_slot(a.id());
    for (auto& v : slot.values()) v += g[0];
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  double s = 0.0;
  for (T v : a.value().values()) s += v;
  const double count = double(a.value().size());
  return a.tape()->record(scalar_tensor<T>(s / count), {a}, [a, count](Tape<T>& t, const BasicTensor<T>& g) {
    auto& slot = t.grad_slot(a.id());
    const T share = static_cast<T>(double(g[0]) / count);
    for (auto& v : slot.values()) v += share;
  });
}

template <class T>
Var<T> sum_squares(const Var<T>& a) {
  double s = 0.0;
  for (T v : a.value().values()) s += double(v) * double(v);
  return a.tape()->record(scalar_tensor<T>(s), {a}, [a](Tape<T>& t, const BasicTensor<T>& g) {
    auto& slot = t.grad_slot(a.id());
    kernels::axpy(slot.size(), T(2) * g[0], a.value().data(), slot.data());
  });
}

template <class T>
Var<T> l1(const Var<T>& a) {
  double s = 0.0;
  for (T v : a.value().values()) s += std::abs(double(v));
  return a.tape()->record(scalar_tensor<T>(s), {a}, [a](Tape<T>& t, const BasicTensor<T>& g) {
    auto& slot = t.grad_slot(a.id());
    const auto& av = a.value();
    for (std::size_t i = 0; i < slot.size(); ++i) {
      if (av[i] > T(0)) slot[i] += g[0];
      else if (av[i] < T(0)) slot[i] -= g[0];
    }
  });
}

template <class T>
Var<T> weighted_sum(const Var<T>& a, std::span<const double> weights) {
  if (weights.size() != a.value().size()) throw DimensionError("weighted_sum: one weight per element required");
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * double(a.value()[i]);
  std::vector<double> w(weights.begin(), weights.end());
  return a.tape()->record(scalar_tensor<T>(s), {a}, [a, w = std::move(w)](Tape<T>& t, const BasicTensor<T>& g) {
    auto& slot = t.grad_slot(a.id());
    for (std::size_t i = 0; i < w.size(); ++i) slot[i] += static_cast<T>(w[i] * double(g[0]));
  });
}

#define TSPSAE_INSTANTIATE_OPS(T)                                                                             \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                                       \
  template Var<T> matmul_nt(const Var<T>&, const Var<T>&);                                                    \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                          \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                          \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                          \
  template Var<T> scale(const Var<T>&, double);                                                               \
  template Var<T> add_row(const Var<T>&, const Var<T>&);                                                      \
  template Var<T> relu(const Var<T>&);                                                                        \
  template Var<T> tanh(const Var<T>&);                                                                        \
  template Var<T> softmax(const Var<T>&, std::size_t, double);                                                \
  template Var<T> log_softmax(const Var<T>&, const Mask*, double);                                            \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, double);                            \
  template Var<T> concat_cols(const Var<T>&, const Var<T>&);                                                  \
  template Var<T> gather_rows(const Var<T>&, std::span<const std::size_t>);                                   \
  template Var<T> broadcast_rows(const Var<T>&, std::size_t);                                                 \
  template Var<T> group_mean(const Var<T>&, std::size_t);                                                     \
  template Var<T> group_rowdot(const Var<T>&, const Var<T>&);                                                 \
  template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t, std::size_t,            \
                            const Mask*);                                                                     \
  template Var<T> pick(const Var<T>&, std::span<const std::size_t>);                                          \
  template Var<T> sum(const Var<T>&);                                                                         \
  template Var<T> mean(const Var<T>&);                                                                        \
  template Var<T> sum_squares(const Var<T>&);                                                                 \
  template Var<T> l1(const Var<T>&);                                                                          \
  template Var<T> weighted_sum(const Var<T>&, std::span<const double>);

TSPSAE_INSTANTIATE_OPS(float)
TSPSAE_INSTANTIATE_OPS(double)

}  // namespace tspsae::ad
