// SPDX-License-Identifier: Apache-2.0
#include "moemarket/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>

#include "moemarket/errors.hpp"
#include "moemarket/ops.hpp"

namespace moemarket {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

void add_into(Tensor& dst, const Tensor& src) {
  double* d = dst.data();
  const double* s = src.data();
  for (std::size_t i = 0, n = dst.size(); i < n; ++i) d[i] += s[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape

const Tape::Node& Tape::node(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw UsageError("variable " + std::to_string(v.id) + " is not on this tape");
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

Tape::Node& Tape::node(Var v) {
  return const_cast<Node&>(static_cast<const Tape&>(*this).node(v));
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<long>(nodes_.size()) - 1};
}

Var Tape::parameter(Parameter& p) {
  Node n;
  n.param = &p;
  n.requires_grad = record_grad_;
  nodes_.push_back(std::move(n));
  return Var{static_cast<long>(nodes_.size()) - 1};
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  if (record_grad_) {
    for (Var in : inputs) {
      if (node(in).requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
    if (n.requires_grad) n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return Var{static_cast<long>(nodes_.size()) - 1};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::vector<Var>(inputs), std::move(fn));
}

const Tensor& Tape::value(Var v) const {
  const Node& n = node(v);
  return n.param ? n.param->value : n.value;
}

Tensor& Tape::grad(Var v) {
  Node& n = node(v);
  Tensor& g = n.param ? n.param->grad : n.grad;
  const Tensor& val = n.param ? n.param->value : n.value;
  if (!g.same_shape(val)) g = Tensor::zeros_like(val);
  return g;
}

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

void Tape::backward(Var root) {
  Node& r = node(root);
  if (r.value.size() != 1 && !(r.param && r.param->value.size() == 1)) {
    throw UsageError("backward root must be a scalar, got " + value(root).shape_string());
  }
  if (!record_grad_) throw UsageError("backward on a tape that does not record gradients");
  grad(root)[0] += 1.0;
  for (long i = root.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(*this, n.grad);
  }
}

// ---------------------------------------------------------------------------
// Operations

namespace ad {

Var matmul(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require(av.rank() == 2 && bv.rank() == 2 && av.cols() == bv.rows(),
          "matmul dimension mismatch: " + av.shape_string() + " x " + bv.shape_string());
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor out({m, n});
  kernels::gemm_nn(av.data(), bv.data(), out.data(), m, k, n, false);
  return t.record(std::move(out), {a, b}, [a, b, m, k, n](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) {
      kernels::gemm_nt(g.data(), tp.value(b).data(), tp.grad(a).data(), m, n, k, true);
    }
    if (tp.requires_grad(b)) {
      kernels::gemm_tn(tp.value(a).data(), g.data(), tp.grad(b).data(), k, m, n, true);
    }
  });
}

Var add(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require(av.same_shape(bv), "add shape mismatch: " + av.shape_string() + " vs " + bv.shape_string());
  Tensor out = av;
  add_into(out, bv);
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) add_into(tp.grad(a), g);
    if (tp.requires_grad(b)) add_into(tp.grad(b), g);
  });
}

Var mul(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require(av.same_shape(bv), "mul shape mismatch: " + av.shape_string() + " vs " + bv.shape_string());
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    const Tensor& x = tp.value(a);
    const Tensor& y = tp.value(b);
    if (tp.requires_grad(a)) {
      Tensor& ga = tp.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    }
    if (tp.requires_grad(b)) {
      Tensor& gb = tp.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
    }
  });
}

Var sum(Tape& t, Var a) {
  const Tensor& av = t.value(a);
  double s = 0.0;
  for (double v : av.values()) s += v;
  return t.record(Tensor({1}, s), {a}, [a](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad(a);
    for (double& v : ga.values()) v += g[0];
  });
}

Var add_bias(Tape& t, Var x, Var bias) {
  const Tensor& xv = t.value(x);
  const Tensor& bv = t.value(bias);
  require(bv.size() == xv.cols(), "bias length " + std::to_string(bv.size()) +
                                      " does not match width " + std::to_string(xv.cols()));
  Tensor out = xv;
  const std::size_t rows = xv.rows(), cols = xv.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    double* o = out.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) o[c] += bv[c];
  }
  return t.record(std::move(out), {x, bias}, [x, bias, rows, cols](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(x)) add_into(tp.grad(x), g);
    if (tp.requires_grad(bias)) {
      Tensor& gb = tp.grad(bias);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = g.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) gb[c] += gr[c];
      }
    }
  });
}

Var gelu(Tape& t, Var x) {
  static constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  static constexpr double kA = 0.044715;
  using Arr = Eigen::Map<const Eigen::ArrayXd>;
  const Tensor& xv = t.value(x);
  const auto n = static_cast<Eigen::Index>(xv.size());
  const Arr v(xv.data(), n);
  // tanh(z) = 1 - 2 / (exp(2z) + 1); the vectorized exp is much faster than std::tanh.
  auto th = std::make_shared<Eigen::ArrayXd>(
      1.0 - 2.0 / ((2.0 * kC * (v + kA * v.cube())).min(350.0).exp() + 1.0));
  Tensor out = Tensor::zeros_like(xv);
  Eigen::Map<Eigen::ArrayXd>(out.data(), n) = 0.5 * v * (1.0 + *th);
  return t.record(std::move(out), {x}, [x, th, n](Tape& tp, const Tensor& g) {
    const Arr v2(tp.value(x).data(), n);
    const Arr gv(g.data(), n);
    Eigen::Map<Eigen::ArrayXd> gx(tp.grad(x).data(), n);
    gx += gv * (0.5 * (1.0 + *th) + 0.5 * v2 * (1.0 - th->square()) * (kC * (1.0 + 3.0 * kA * v2.square())));
  });
}

Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps) {
  const Tensor& xv = t.value(x);
  const Tensor& gv = t.value(gain);
  const Tensor& bv = t.value(bias);
  const std::size_t rows = xv.rows(), cols = xv.cols();
  require(gv.size() == cols && bv.size() == cols, "layer_norm parameter width mismatch");
  auto xhat = std::make_shared<Tensor>(Tensor::zeros_like(xv));
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  Tensor out = Tensor::zeros_like(xv);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * cols;
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    double* hr = xhat->data() + r * cols;
    double* orow = out.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) {
      hr[c] = (xr[c] - mean) * is;
      orow[c] = hr[c] * gv[c] + bv[c];
    }
  }
  return t.record(std::move(out), {x, gain, bias},
                  [x, gain, bias, xhat, inv_std, rows, cols](Tape& tp, const Tensor& g) {
                    const Tensor& gv2 = tp.value(gain);
                    if (tp.requires_grad(gain) || tp.requires_grad(bias)) {
                      Tensor& gg = tp.grad(gain);
                      Tensor& gb = tp.grad(bias);
                      for (std::size_t r = 0; r < rows; ++r) {
                        const double* gr = g.data() + r * cols;
                        const double* hr = xhat->data() + r * cols;
                        for (std::size_t c = 0; c < cols; ++c) {
                          gg[c] += gr[c] * hr[c];
                          gb[c] += gr[c];
                        }
                      }
                    }
                    if (!tp.requires_grad(x)) return;
                    Tensor& gx = tp.grad(x);
                    const double n = static_cast<double>(cols);
                    std::vector<double> dh(cols);
                    for (std::size_t r = 0; r < rows; ++r) {
                      const double* gr = g.data() + r * cols;
                      const double* hr = xhat->data() + r * cols;
                      double mean_dh = 0.0, mean_dh_h = 0.0;
                      for (std::size_t c = 0; c < cols; ++c) {
                        dh[c] = gr[c] * gv2[c];
                        mean_dh += dh[c];
                        mean_dh_h += dh[c] * hr[c];
                      }
                      mean_dh /= n;
                      mean_dh_h /= n;
                      double* gxr = gx.data() + r * cols;
                      for (std::size_t c = 0; c < cols; ++c) {
                        gxr[c] += (*inv_std)[r] * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                      }
                    }
                  });
}

Var embedding(Tape& t, Var table, std::span<const std::size_t> ids) {
  const Tensor& tv = t.value(table);
  const std::size_t vocab = tv.rows(), dim = tv.cols();
  Tensor out({ids.size(), dim});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw ConfigError("embedding index " + std::to_string(ids[i]) + " out of range for " +
                        std::to_string(vocab) + " rows");
    }
    std::copy_n(tv.data() + ids[i] * dim, dim, out.data() + i * dim);
  }
  auto ids_copy = std::make_shared<std::vector<std::size_t>>(ids.begin(), ids.end());
  return t.record(std::move(out), {table}, [table, ids_copy, dim](Tape& tp, const Tensor& g) {
    Tensor& gt = tp.grad(table);
    for (std::size_t i = 0; i < ids_copy->size(); ++i) {
      double* dst = gt.data() + (*ids_copy)[i] * dim;
      const double* src = g.data() + i * dim;
      for (std::size_t c = 0; c < dim; ++c) dst[c] += src[c];
    }
  });
}

Var causal_attention(Tape& t, Var qkv, std::size_t batch, std::size_t seq, std::size_t heads) {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Stride = Eigen::Stride<Eigen::Dynamic, 1>;
  using CMap = Eigen::Map<const Mat, 0, Stride>;
  using MMap = Eigen::Map<Mat, 0, Stride>;

  const Tensor& xv = t.value(qkv);
  require(xv.rank() == 2 && xv.rows() == batch * seq && xv.cols() % 3 == 0,
          "attention input must be [batch*seq x 3d], got " + xv.shape_string());
  const std::size_t d = xv.cols() / 3;
  require(heads > 0 && d % heads == 0, "attention width not divisible by heads");
  const std::size_t hd = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto T = static_cast<Eigen::Index>(seq), HD = static_cast<Eigen::Index>(hd);
  const Stride in_stride(static_cast<Eigen::Index>(3 * d), 1);
  const Stride out_stride(static_cast<Eigen::Index>(d), 1);

  auto probs = std::make_shared<std::vector<Mat>>(batch * heads);
  Tensor out({batch * seq, d});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const double* base = xv.data() + b * seq * 3 * d + h * hd;
      CMap q(base, T, HD, in_stride), k(base + d, T, HD, in_stride), v(base + 2 * d, T, HD, in_stride);
      Mat& p = (*probs)[b * heads + h];
      p.noalias() = (q * k.transpose()) * scale;
      for (Eigen::Index i = 0; i < T; ++i) {
        auto live = p.row(i).head(i + 1).array();
        live = (live - live.maxCoeff()).exp();
        live /= live.sum();
        p.row(i).tail(T - i - 1).setZero();
      }
      MMap o(out.data() + b * seq * d + h * hd, T, HD, out_stride);
      o.noalias() = p * v;
    }
  }
  return t.record(std::move(out), {qkv},
                  [qkv, probs, batch, seq, heads, d, hd, scale, T, HD, in_stride, out_stride](
                      Tape& tp, const Tensor& g) {
                    const Tensor& x = tp.value(qkv);
                    Tensor& gx = tp.grad(qkv);
                    Mat dp, ds;
                    for (std::size_t b = 0; b < batch; ++b) {
                      for (std::size_t h = 0; h < heads; ++h) {
                        const std::size_t off = b * seq * 3 * d + h * hd;
                        CMap q(x.data() + off, T, HD, in_stride), k(x.data() + off + d, T, HD, in_stride),
                            v(x.data() + off + 2 * d, T, HD, in_stride);
                        MMap gq(gx.data() + off, T, HD, in_stride), gk(gx.data() + off + d, T, HD, in_stride),
                            gv(gx.data() + off + 2 * d, T, HD, in_stride);
                        CMap go(g.data() + b * seq * d + h * hd, T, HD, out_stride);
                        const Mat& p = (*probs)[b * heads + h];
                        gv.noalias() += p.transpose() * go;
                        dp.noalias() = go * v.transpose();
                        ds = p.cwiseProduct(dp);
                        const Eigen::VectorXd row_dot = ds.rowwise().sum();
                        ds -= p.cwiseProduct(row_dot.replicate(1, T));
                        ds *= scale;
                        gq.noalias() += ds * k;
                        gk.noalias() += ds.transpose() * q;
                      }
                    }
                  });
}

Var gather_rows(Tape& t, Var x, std::span<const std::size_t> rows) {
  const Tensor& xv = t.value(x);
  const std::size_t cols = xv.cols();
  Tensor out({rows.size(), cols});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] < xv.rows(), "gather_rows index out of range");
    std::copy_n(xv.data() + rows[i] * cols, cols, out.data() + i * cols);
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  return t.record(std::move(out), {x}, [x, idx, cols](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad(x);
    for (std::size_t i = 0; i < idx->size(); ++i) {
      double* dst = gx.data() + (*idx)[i] * cols;
      const double* src = g.data() + i * cols;
      for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
    }
  });
}

Var gather_entries(Tape& t, Var x, std::span<const std::size_t> flat_index) {
  const Tensor& xv = t.value(x);
  Tensor out({flat_index.size()});
  for (std::size_t i = 0; i < flat_index.size(); ++i) {
    require(flat_index[i] < xv.size(), "gather_entries index out of range");
    out[i] = xv[flat_index[i]];
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(flat_index.begin(), flat_index.end());
  return t.record(std::move(out), {x}, [x, idx](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad(x);
    for (std::size_t i = 0; i < idx->size(); ++i) gx[(*idx)[i]] += g[i];
  });
}

Var scale_rows(Tape& t, Var x, Var w) {
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  const std::size_t rows = xv.rows(), cols = xv.cols();
  require(wv.size() == rows, "scale_rows weight count mismatch");
  Tensor out = xv;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) *= wv[r];
  }
  return t.record(std::move(out), {x, w}, [x, w, rows, cols](Tape& tp, const Tensor& g) {
    const Tensor& xv2 = tp.value(x);
    const Tensor& wv2 = tp.value(w);
    if (tp.requires_grad(x)) {
      Tensor& gx = tp.grad(x);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) gx.at(r, c) += g.at(r, c) * wv2[r];
      }
    }
    if (tp.requires_grad(w)) {
      Tensor& gw = tp.grad(w);
      for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += g.at(r, c) * xv2.at(r, c);
        gw[r] += s;
      }
    }
  });
}

Var scatter_rows(Tape& t, std::size_t rows, std::size_t cols,
                 const std::vector<std::pair<Var, std::vector<std::size_t>>>& parts) {
  Tensor out({rows, cols});
  std::vector<Var> inputs;
  auto layout = std::make_shared<std::vector<std::pair<Var, std::vector<std::size_t>>>>(parts);
  for (const auto& [v, idx] : parts) {
    const Tensor& pv = t.value(v);
    require(pv.rows() == idx.size() && pv.cols() == cols, "scatter_rows part shape mismatch");
    for (std::size_t i = 0; i < idx.size(); ++i) {
      require(idx[i] < rows, "scatter_rows index out of range");
      const double* src = pv.data() + i * cols;
      double* dst = out.data() + idx[i] * cols;
      for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
    }
    inputs.push_back(v);
  }
  return t.record(std::move(out), inputs, [layout, cols](Tape& tp, const Tensor& g) {
    for (const auto& [v, idx] : *layout) {
      if (!tp.requires_grad(v)) continue;
      Tensor& gv = tp.grad(v);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const double* src = g.data() + idx[i] * cols;
        double* dst = gv.data() + i * cols;
        for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
      }
    }
  });
}

Var stack_columns(Tape& t, const std::vector<Var>& columns) {
  require(!columns.empty(), "stack_columns needs at least one column");
  const std::size_t d = t.value(columns.front()).size();
  const std::size_t n = columns.size();
  Tensor out({d, n});
  for (std::size_t j = 0; j < n; ++j) {
    const Tensor& c = t.value(columns[j]);
    require(c.size() == d, "stack_columns length mismatch");
    for (std::size_t i = 0; i < d; ++i) out.at(i, j) = c[i];
  }
  return t.record(std::move(out), columns, [columns, d, n](Tape& tp, const Tensor& g) {
    for (std::size_t j = 0; j < n; ++j) {
      if (!tp.requires_grad(columns[j])) continue;
      Tensor& gc = tp.grad(columns[j]);
      for (std::size_t i = 0; i < d; ++i) gc[i] += g.at(i, j);
    }
  });
}

Var selected_softmax(Tape& t, Var logits, std::span<const std::size_t> selected, std::size_t k) {
  const Tensor& lv = t.value(logits);
  const std::size_t rows = lv.rows(), cols = lv.cols();
  require(k >= 1 && selected.size() == rows * k, "selected_softmax selection size mismatch");
  Tensor out({rows, k});
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) {
      require(selected[r * k + j] < cols, "selected_softmax column out of range");
      mx = std::max(mx, lv.at(r, selected[r * k + j]));
    }
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      out.at(r, j) = std::exp(lv.at(r, selected[r * k + j]) - mx);
      s += out.at(r, j);
    }
    for (std::size_t j = 0; j < k; ++j) out.at(r, j) /= s;
  }
  auto sel = std::make_shared<std::vector<std::size_t>>(selected.begin(), selected.end());
  auto gates = std::make_shared<Tensor>(out);
  return t.record(std::move(out), {logits}, [logits, sel, gates, rows, k](Tape& tp, const Tensor& g) {
    Tensor& gl = tp.grad(logits);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += gates->at(r, j) * g.at(r, j);
      for (std::size_t j = 0; j < k; ++j) {
        gl.at(r, (*sel)[r * k + j]) += gates->at(r, j) * (g.at(r, j) - dot);
      }
    }
  });
}

Var cross_entropy_mean(Tape& t, Var logits, std::span<const std::size_t> targets,
                       std::vector<double>* per_row) {
  const Tensor& lv = t.value(logits);
  const std::size_t rows = lv.rows(), cols = lv.cols();
  require(targets.size() == rows, "cross_entropy target count mismatch");
  auto probs = std::make_shared<Tensor>(lv);
  auto tg = std::make_shared<std::vector<std::size_t>>(targets.begin(), targets.end());
  double total = 0.0;
  if (per_row) per_row->assign(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double loss = cross_entropy(lv.row(r), targets[r]);
    total += loss;
    if (per_row) (*per_row)[r] = loss;
    softmax_inplace(probs->row(r));
  }
  const double inv = 1.0 / static_cast<double>(rows);
  return t.record(Tensor({1}, total * inv), {logits},
                  [logits, probs, tg, rows, cols, inv](Tape& tp, const Tensor& g) {
                    Tensor& gl = tp.grad(logits);
                    const double s = g[0] * inv;
                    for (std::size_t r = 0; r < rows; ++r) {
                      const double* p = probs->data() + r * cols;
                      double* dst = gl.data() + r * cols;
                      for (std::size_t c = 0; c < cols; ++c) dst[c] += s * p[c];
                      dst[(*tg)[r]] -= s;
                    }
                  });
}

}  // namespace ad

}  // namespace moemarket
