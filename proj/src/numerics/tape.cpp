#include "darelab/numerics/tape.hpp"

#include <algorithm>
#include <cmath>

#include "darelab/error.hpp"

namespace darelab {

Var Tape::push(Tensor value, bool requires_grad, BackwardFn fn) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  if (requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::constant(Tensor value) { return push(std::move(value), false, nullptr); }

Var Tape::parameter(Tensor value) { return push(std::move(value), true, nullptr); }

Var Tape::borrow(const Tensor& value, bool requires_grad) {
  Var v = push(Tensor(), requires_grad, nullptr);
  nodes_.back().external = &value;
  return v;
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  bool needs = false;
  if (recording()) {
    for (const Var& in : inputs) {
      if (&in.tape() != this) throw Error("tape op mixes variables from different tapes");
      needs = needs || requires_grad(in);
    }
  }
  return push(std::move(value), needs, std::move(fn));
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(v.id()));
  if (n.grad.empty()) return Tensor(value(v).shape());
  return n.grad;
}

void Tape::accumulate(Var v, const Tensor& g) {
  Node& n = nodes_.at(static_cast<std::size_t>(v.id()));
  if (!n.requires_grad) return;
  if (n.grad.empty()) {
    require_same_shape(value(v), g, "gradient");
    n.grad = g;
  } else {
    axpy(n.grad, g);
  }
}

void Tape::accumulate(Var v, Tensor&& g) {
  Node& n = nodes_.at(static_cast<std::size_t>(v.id()));
  if (!n.requires_grad) return;
  if (n.grad.empty()) {
    require_same_shape(value(v), g, "gradient");
    n.grad = std::move(g);
  } else {
    axpy(n.grad, g);
  }
}

void Tape::backward(Var root, double seed) {
  if (value(root).size() != 1) {
    throw DimensionError("backward needs a single-element root, got " + shape_str(value(root).shape()));
  }
  if (!requires_grad(root)) return;
  accumulate(root, Tensor(value(root).shape(), seed));
  for (int i = root.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, n.grad);
  }
}

namespace {

std::size_t rows_of(const Tensor& t) { return t.size() / t.shape().back(); }

void require_rank2(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw DimensionError(std::string(what) + " expects a rank-2 tensor, got " + shape_str(t.shape()));
}

}  // namespace

Var matmul(Var a, Var b, bool trans_a, bool trans_b) {
  Tape& tape = a.tape();
  Tensor out = matmul(a.value(), b.value(), trans_a, trans_b);
  return tape.record(std::move(out), {a, b}, [a, b, trans_a, trans_b](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    // C = op(A) op(B)
    if (t.requires_grad(a)) {
      if (!trans_a) {
        t.accumulate(a, matmul(g, bv, false, !trans_b));
      } else {
        t.accumulate(a, matmul(bv, g, trans_b, true));
      }
    }
    if (t.requires_grad(b)) {
      if (!trans_b) {
        t.accumulate(b, matmul(av, g, !trans_a, false));
      } else {
        t.accumulate(b, matmul(g, av, true, trans_a));
      }
    }
  });
}

Var add(Var a, Var b) {
  Tensor out = add(a.value(), b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  Tensor out = sub(a.value(), b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    if (t.requires_grad(b)) t.accumulate(b, scale(g, -1.0));
  });
}

Var mul(Var a, Var b) {
  Tensor out = mul(a.value(), b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) t.accumulate(a, mul(g, b.value()));
    if (t.requires_grad(b)) t.accumulate(b, mul(g, a.value()));
  });
}

Var scale(Var a, double s) {
  Tensor out = scale(a.value(), s);
  return a.tape().record(std::move(out), {a}, [a, s](Tape& t, const Tensor& g) { t.accumulate(a, scale(g, s)); });
}

Var add_row(Var a, Var row) {
  const Tensor& av = a.value();
  const Tensor& rv = row.value();
  const std::size_t n = av.shape().back();
  if (rv.size() != n) {
    throw DimensionError("add_row: row of " + std::to_string(rv.size()) + " values for width " + std::to_string(n));
  }
  Tensor out = av;
  const std::size_t m = rows_of(av);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += rv[j];
  }
  return a.tape().record(std::move(out), {a, row}, [a, row, m, n](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    if (t.requires_grad(row)) {
      Tensor gr(row.value().shape());
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) gr[j] += g[i * n + j];
      }
      t.accumulate(row, gr);
    }
  });
}

Var square(Var a) {
  Tensor out = mul(a.value(), a.value());
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    Tensor ga = mul(g, a.value());
    for (auto& v : ga.data()) v *= 2.0;
    t.accumulate(a, ga);
  });
}

Var softmax_rows(Var x) {
  Tensor out = softmax_rows(x.value());
  Tape& tape = x.tape();
  // The backward reads the output node, which is the next one recorded.
  const Var y(&tape, static_cast<int>(tape.size()));
  return tape.record(std::move(out), {x}, [x, y](Tape& t, const Tensor& g) {
    const Tensor& yv = y.value();
    const std::size_t n = yv.shape().back();
    const std::size_t rows = yv.size() / n;
    Tensor gx(yv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = yv.data().data() + r * n;
      const double* gr = g.data().data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] = yr[j] * (gr[j] - dot);
    }
    t.accumulate(x, gx);
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& xv = x.value();
  require_rank2(xv, "layer_norm");
  const std::size_t m = xv.dim(0);
  const std::size_t n = xv.dim(1);
  if (gain.value().size() != n || bias.value().size() != n) {
    throw DimensionError("layer_norm: gain/bias width mismatch");
  }
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(m);
  Tensor out(xv.shape());
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data().data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mu) * is;
      xhat[i * n + j] = h;
      out[i * n + j] = h * gv[j] + bv[j];
    }
  }
  return x.tape().record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, const Tensor& g) {
        const Tensor& gv = gain.value();
        if (t.requires_grad(gain) || t.requires_grad(bias)) {
          Tensor gg(gain.value().shape());
          Tensor gb(bias.value().shape());
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
              gg[j] += g[i * n + j] * xhat[i * n + j];
              gb[j] += g[i * n + j];
            }
          }
          t.accumulate(gain, gg);
          t.accumulate(bias, gb);
        }
        if (t.requires_grad(x)) {
          Tensor gx(x.value().shape());
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            double mean_d = 0.0;
            double mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = g[i * n + j] * gv[j];
              mean_d += d;
              mean_dx += d * xhat[i * n + j];
            }
            mean_d *= inv_n;
            mean_dx *= inv_n;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = g[i * n + j] * gv[j];
              gx[i * n + j] = inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
            }
          }
          t.accumulate(x, gx);
        }
      });
}

Var silu(Var x) {
  const Tensor& xv = x.value();
  Tensor sig = sigmoid(xv);
  Tensor out = mul(xv, sig);
  return x.tape().record(std::move(out), {x}, [x, sig = std::move(sig)](Tape& t, const Tensor& g) {
    const Tensor& xv = x.value();
    Tensor gx(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double s = sig[i];
      gx[i] = g[i] * s * (1.0 + xv[i] * (1.0 - s));
    }
    t.accumulate(x, gx);
  });
}

Var slice_rows(Var x, std::size_t start, std::size_t len) {
  const Tensor& xv = x.value();
  require_rank2(xv, "slice_rows");
  if (len == 0 || start + len > xv.dim(0)) {
    throw IndexError("slice_rows [" + std::to_string(start) + ", +" + std::to_string(len) + ") out of " +
                     shape_str(xv.shape()));
  }
  const std::size_t n = xv.dim(1);
  std::vector<double> data(xv.data().begin() + static_cast<std::ptrdiff_t>(start * n),
                           xv.data().begin() + static_cast<std::ptrdiff_t>((start + len) * n));
  Tensor out({len, n}, std::move(data));
  return x.tape().record(std::move(out), {x}, [x, start, len, n](Tape& t, const Tensor& g) {
    Tensor gx(x.value().shape());
    std::copy(g.data().begin(), g.data().end(), gx.data().begin() + static_cast<std::ptrdiff_t>(start * n));
    (void)len;
    t.accumulate(x, gx);
  });
}

Var slice_cols(Var x, std::size_t start, std::size_t len) {
  const Tensor& xv = x.value();
  require_rank2(xv, "slice_cols");
  if (len == 0 || start + len > xv.dim(1)) {
    throw IndexError("slice_cols [" + std::to_string(start) + ", +" + std::to_string(len) + ") out of " +
                     shape_str(xv.shape()));
  }
  const std::size_t m = xv.dim(0);
  const std::size_t n = xv.dim(1);
  Tensor out({m, len});
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(xv.data().data() + i * n + start, len, out.data().data() + i * len);
  }
  return x.tape().record(std::move(out), {x}, [x, start, len, m, n](Tape& t, const Tensor& g) {
    Tensor gx(x.value().shape());
    for (std::size_t i = 0; i < m; ++i) {
      std::copy_n(g.data().data() + i * len, len, gx.data().data() + i * n + start);
    }
    t.accumulate(x, gx);
  });
}

Var concat_rows(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "concat_rows");
  require_rank2(bv, "concat_rows");
  if (av.dim(1) != bv.dim(1)) throw DimensionError("concat_rows: column counts differ");
  std::vector<double> data;
  data.reserve(av.size() + bv.size());
  data.insert(data.end(), av.data().begin(), av.data().end());
  data.insert(data.end(), bv.data().begin(), bv.data().end());
  const std::size_t ma = av.dim(0);
  const std::size_t n = av.dim(1);
  Tensor out({ma + bv.dim(0), n}, std::move(data));
  return a.tape().record(std::move(out), {a, b}, [a, b, ma, n](Tape& t, const Tensor& g) {
    const auto split = g.data().begin() + static_cast<std::ptrdiff_t>(ma * n);
    if (t.requires_grad(a)) t.accumulate(a, Tensor(a.value().shape(), std::vector<double>(g.data().begin(), split)));
    if (t.requires_grad(b)) t.accumulate(b, Tensor(b.value().shape(), std::vector<double>(split, g.data().end())));
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  const std::size_t m = parts[0].value().dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    require_rank2(p.value(), "concat_cols");
    if (p.value().dim(0) != m) throw DimensionError("concat_cols: row counts differ");
    widths.push_back(p.value().dim(1));
    total += widths.back();
  }
  Tensor out({m, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    for (std::size_t i = 0; i < m; ++i) {
      std::copy_n(pv.data().data() + i * widths[k], widths[k], out.data().data() + i * total + off);
    }
    off += widths[k];
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].tape().record(std::move(out), parts, [inputs, widths, m, total](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      if (t.requires_grad(inputs[k])) {
        Tensor gp({m, widths[k]});
        for (std::size_t i = 0; i < m; ++i) {
          std::copy_n(g.data().data() + i * total + off, widths[k], gp.data().data() + i * widths[k]);
        }
        t.accumulate(inputs[k], gp);
      }
      off += widths[k];
    }
  });
}

Var gather_rows(Var table, std::span<const int> rows) {
  const Tensor& tv = table.value();
  require_rank2(tv, "gather_rows");
  if (rows.empty()) throw DimensionError("gather_rows with no indices");
  const std::size_t n = tv.dim(1);
  Tensor out({rows.size(), n});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || static_cast<std::size_t>(rows[i]) >= tv.dim(0)) {
      throw IndexError("gather_rows index " + std::to_string(rows[i]) + " out of " + std::to_string(tv.dim(0)));
    }
    std::copy_n(tv.data().data() + static_cast<std::size_t>(rows[i]) * n, n, out.data().data() + i * n);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return table.tape().record(std::move(out), {table}, [table, idx, n](Tape& t, const Tensor& g) {
    Tensor gt(table.value().shape());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const std::size_t r = static_cast<std::size_t>(idx[i]);
      for (std::size_t j = 0; j < n; ++j) gt[r * n + j] += g[i * n + j];
    }
    t.accumulate(table, gt);
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape().record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    t.accumulate(x, g.reshaped(x.value().shape()));
  });
}

Var sum(Var x) {
  Tensor out = Tensor::scalar(sum(x.value()));
  return x.tape().record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    t.accumulate(x, Tensor(x.value().shape(), g[0]));
  });
}

Var mean(Var x) {
  const double inv = 1.0 / static_cast<double>(x.value().size());
  Tensor out = Tensor::scalar(mean(x.value()));
  return x.tape().record(std::move(out), {x}, [x, inv](Tape& t, const Tensor& g) {
    t.accumulate(x, Tensor(x.value().shape(), g[0] * inv));
  });
}

Var stop_gradient(Var x) { return x.tape().constant(x.value()); }

}  // namespace darelab
