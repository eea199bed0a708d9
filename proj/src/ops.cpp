#include "da/ops.hpp"

#include <algorithm>
#include <cmath>

namespace da {

OpStats& op_stats() {
  thread_local OpStats stats;
  return stats;
}

namespace ops {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

bool any_grad(std::initializer_list<Var> vs) {
  for (Var v : vs) {
    if (v.tape->requires_grad(v.id)) return true;
  }
  return false;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  }
}

void require_rank(const Tensor& t, int rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got shape " + shape_to_string(t.shape()));
  }
}

// col((c*kh+ki)*kw+kj, oy*Wo+ox) = x[c, oy*s-p+ki, ox*s-p+kj], zero outside.
void im2col(const double* x, Index C, Index H, Index W, Index kh, Index kw,
            Index stride, Index pad, Index Ho, Index Wo, MatRM& col) {
  for (Index c = 0; c < C; ++c) {
    const double* src = x + c * H * W;
    for (Index ki = 0; ki < kh; ++ki) {
      for (Index kj = 0; kj < kw; ++kj) {
        double* dst = col.data() + ((c * kh + ki) * kw + kj) * Ho * Wo;
        for (Index oy = 0; oy < Ho; ++oy) {
          const Index iy = oy * stride - pad + ki;
          double* row_dst = dst + oy * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(row_dst, row_dst + Wo, 0.0);
            continue;
          }
          const double* src_row = src + iy * W;
          for (Index ox = 0; ox < Wo; ++ox) {
            const Index ix = ox * stride - pad + kj;
            row_dst[ox] = (ix >= 0 && ix < W) ? src_row[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const MatRM& dcol, Index C, Index H, Index W, Index kh, Index kw,
                Index stride, Index pad, Index Ho, Index Wo, double* dx) {
  for (Index c = 0; c < C; ++c) {
    double* dst = dx + c * H * W;
    for (Index ki = 0; ki < kh; ++ki) {
      for (Index kj = 0; kj < kw; ++kj) {
        const double* src = dcol.data() + ((c * kh + ki) * kw + kj) * Ho * Wo;
        for (Index oy = 0; oy < Ho; ++oy) {
          const Index iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= H) continue;
          const double* src_row = src + oy * Wo;
          double* dst_row = dst + iy * W;
          for (Index ox = 0; ox < Wo; ++ox) {
            const Index ix = ox * stride - pad + kj;
            if (ix >= 0 && ix < W) dst_row[ix] += src_row[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var add(Var a, Var b) {
  Tape& t = *a.tape;
  require_same_shape(a.value(), b.value(), "add");
  Tensor out(a.value().shape(), a.value().array() + b.value().array());
  if (!any_grad({a, b})) return t.leaf(std::move(out), false);
  const int aid = a.id, bid = b.id;
  return t.record(std::move(out), true, [aid, bid](Tape& t, const Tape::Node& self) {
    t.accumulate(aid, self.grad.array());
    t.accumulate(bid, self.grad.array());
  });
}

Var sub(Var a, Var b) {
  Tape& t = *a.tape;
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out(a.value().shape(), a.value().array() - b.value().array());
  if (!any_grad({a, b})) return t.leaf(std::move(out), false);
  const int aid = a.id, bid = b.id;
  return t.record(std::move(out), true, [aid, bid](Tape& t, const Tape::Node& self) {
    t.accumulate(aid, self.grad.array());
    t.accumulate(bid, -self.grad.array());
  });
}

Var mul(Var a, Var b) {
  Tape& t = *a.tape;
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out(a.value().shape(), a.value().array() * b.value().array());
  if (!any_grad({a, b})) return t.leaf(std::move(out), false);
  const int aid = a.id, bid = b.id;
  return t.record(std::move(out), true, [aid, bid](Tape& t, const Tape::Node& self) {
    if (t.requires_grad(aid)) t.accumulate(aid, self.grad.array() * t.value(bid).array());
    if (t.requires_grad(bid)) t.accumulate(bid, self.grad.array() * t.value(aid).array());
  });
}

Var neg(Var a) { return scale(a, -1.0); }

Var scale(Var a, double k) {
  Tape& t = *a.tape;
  Tensor out(a.value().shape(), a.value().array() * k);
  if (!any_grad({a})) return t.leaf(std::move(out), false);
  const int aid = a.id;
  return t.record(std::move(out), true, [aid, k](Tape& t, const Tape::Node& self) {
    t.accumulate(aid, self.grad.array() * k);
  });
}

Var add_scalar(Var a, double k) {
  Tape& t = *a.tape;
  Tensor out(a.value().shape(), a.value().array() + k);
  if (!any_grad({a})) return t.leaf(std::move(out), false);
  const int aid = a.id;
  return t.record(std::move(out), true, [aid](Tape& t, const Tape::Node& self) {
    t.accumulate(aid, self.grad.array());
  });
}

Var sum(Var a) {
  Tape& t = *a.tape;
  Tensor out = Tensor::scalar(a.value().array().sum());
  if (!any_grad({a})) return t.leaf(std::move(out), false);
  const int aid = a.id;
  const Index n = a.value().numel();
  return t.record(std::move(out), true, [aid, n](Tape& t, const Tape::Node& self) {
    t.accumulate(aid, Array::Constant(n, self.grad.array()[0]));
  });
}

Var mean(Var a) {
  Tape& t = *a.tape;
  const Index n = a.value().numel();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  Tensor out = Tensor::scalar(a.value().array().sum() / static_cast<double>(n));
  if (!any_grad({a})) return t.leaf(std::move(out), false);
  const int aid = a.id;
  return t.record(std::move(out), true, [aid, n](Tape& t, const Tape::Node& self) {
    t.accumulate(aid, Array::Constant(n, self.grad.array()[0] / static_cast<double>(n)));
  });
}

Var reshape(Var a, std::vector<Index> shape) {
  Tape& t = *a.tape;
  Tensor out = a.value().reshaped(std::move(shape));
  if (!any_grad({a})) return t.leaf(std::move(out), false);
  const int aid = a.id;
  return t.record(std::move(out), true, [aid](Tape& t, const Tape::Node& self) {
    t.accumulate(aid, self.grad.array());
  });
}

Var concat_rows(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("concat_rows: no inputs");
  Tape& t = *xs.front().tape;
  const Index cols = xs.front().value().dim(1);
  Index rows = 0;
  bool rg = false;
  for (const Var& v : xs) {
    require_rank(v.value(), 2, "concat_rows");
    if (v.value().dim(1) != cols) {
      throw ShapeError("concat_rows: column mismatch " + std::to_string(cols) + " vs " +
                       std::to_string(v.value().dim(1)));
    }
    rows += v.value().dim(0);
    rg = rg || t.requires_grad(v.id);
  }
  Tensor out({rows, cols});
  Index at = 0;
  std::vector<int> ids;
  std::vector<Index> counts;
  for (const Var& v : xs) {
    const Index n = v.value().numel();
    out.array().segment(at, n) = v.value().array();
    at += n;
    ids.push_back(v.id);
    counts.push_back(n);
  }
  if (!rg) return t.leaf(std::move(out), false);
  return t.record(std::move(out), true,
                  [ids, counts](Tape& t, const Tape::Node& self) {
                    Index at = 0;
                    for (std::size_t i = 0; i < ids.size(); ++i) {
                      t.accumulate(ids[i], self.grad.array().segment(at, counts[i]));
                      at += counts[i];
                    }
                  });
}

Var gather_rows(Var x, const std::vector<Index>& rows) {
  Tape& t = *x.tape;
  require_rank(x.value(), 2, "gather_rows");
  const Index n = x.value().dim(0), f = x.value().dim(1);
  Tensor out({static_cast<Index>(rows.size()), f});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= n) {
      throw ShapeError("gather_rows: row " + std::to_string(rows[i]) + " out of [0," +
                       std::to_string(n) + ")");
    }
    out.array().segment(static_cast<Index>(i) * f, f) =
        x.value().array().segment(rows[i] * f, f);
  }
  if (!any_grad({x})) return t.leaf(std::move(out), false);
  const int xid = x.id;
  return t.record(std::move(out), true, [xid, rows, f](Tape& t, const Tape::Node& self) {
    Array g = Array::Zero(t.value(xid).numel());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      g.segment(rows[i] * f, f) += self.grad.array().segment(static_cast<Index>(i) * f, f);
    }
    t.accumulate(xid, g);
  });
}

Var slice_rows(Var x, Index begin, Index count) {
  Tape& t = *x.tape;
  require_rank(x.value(), 2, "slice_rows");
  const Index n = x.value().dim(0), f = x.value().dim(1);
  if (begin < 0 || count < 0 || begin + count > n) {
    throw ShapeError("slice_rows: [" + std::to_string(begin) + "," +
                     std::to_string(begin + count) + ") out of " + std::to_string(n) +
                     " rows");
  }
  Tensor out({count, f}, x.value().array().segment(begin * f, count * f));
  if (!any_grad({x})) return t.leaf(std::move(out), false);
  const int xid = x.id;
  return t.record(std::move(out), true,
                  [xid, begin, count, f](Tape& t, const Tape::Node& self) {
                    Array g = Array::Zero(t.value(xid).numel());
                    g.segment(begin * f, count * f) = self.grad.array();
                    t.accumulate(xid, g);
                  });
}

Var relu(Var x) {
  Tape& t = *x.tape;
  OpStats& stats = op_stats();
  if (stats.track_margins && x.value().numel() > 0) {
    // The distance to the kink at 0. An input sitting exactly on the kink
    // makes any central difference through it wrong, so it records 0.
    stats.note_margin(x.value().array().abs().minCoeff());
  }
  Tensor out(x.value().shape(), x.value().array().max(0.0));
  if (!any_grad({x})) return t.leaf(std::move(out), false);
  const int xid = x.id;
  return t.record(std::move(out), true, [xid](Tape& t, const Tape::Node& self) {
    const Array mask = (t.value(xid).array() > 0.0).cast<double>();
    t.accumulate(xid, self.grad.array() * mask);
  });
}

Var sigmoid(Var x) {
  Tape& t = *x.tape;
  Tensor out(x.value().shape(), 1.0 / (1.0 + (-x.value().array()).exp()));
  if (!any_grad({x})) return t.leaf(std::move(out), false);
  const int xid = x.id;
  return t.record(std::move(out), true, [xid](Tape& t, const Tape::Node& self) {
    const Array& s = self.value.array();
    t.accumulate(xid, self.grad.array() * s * (1.0 - s));
  });
}

Var conv2d(Var x, Var w, Var b, int stride, int padding) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  const Tensor& W = w.value();
  const Tensor& B = b.value();
  require_rank(X, 4, "conv2d input");
  require_rank(W, 4, "conv2d weight");
  require_rank(B, 1, "conv2d bias");
  if (stride < 1) throw ValueError("conv2d: stride must be positive, got " + std::to_string(stride));
  if (padding < 0) throw ValueError("conv2d: padding must be non-negative, got " + std::to_string(padding));
  const Index N = X.dim(0), C = X.dim(1), H = X.dim(2), Wd = X.dim(3);
  const Index O = W.dim(0), I = W.dim(1), kh = W.dim(2), kw = W.dim(3);
  if (C != I) {
    throw ShapeError("conv2d: input has C=" + std::to_string(C) +
                     " channels but weight expects I=" + std::to_string(I));
  }
  if (B.dim(0) != O) {
    throw ShapeError("conv2d: bias has " + std::to_string(B.dim(0)) +
                     " entries but weight has O=" + std::to_string(O));
  }
  const Index Ho = (H + 2 * padding - kh) / stride + 1;
  const Index Wo = (Wd + 2 * padding - kw) / stride + 1;
  if (H + 2 * padding < kh || Wd + 2 * padding < kw) {
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " larger than padded input " + std::to_string(H + 2 * padding) + "x" +
                     std::to_string(Wd + 2 * padding));
  }

  const Index ckk = C * kh * kw, hw = Ho * Wo;
  Tensor out({N, O, Ho, Wo});
  CMapRM Wm(W.data(), O, ckk);
  const Eigen::Map<const Eigen::VectorXd> bias(B.data(), O);
  std::vector<MatRM> cols;
  cols.reserve(static_cast<std::size_t>(N));
  for (Index n = 0; n < N; ++n) {
    MatRM col(ckk, hw);
    im2col(X.data() + n * C * H * Wd, C, H, Wd, kh, kw, stride, padding, Ho, Wo, col);
    MapRM on(out.data() + n * O * hw, O, hw);
    on.noalias() = Wm * col;
    on.colwise() += bias;
    cols.push_back(std::move(col));
  }

  if (!any_grad({x, w, b})) return t.leaf(std::move(out), false);
  const int xid = x.id, wid = w.id, bid = b.id;
  const int sstride = stride, spad = padding;
  return t.record(
      std::move(out), true,
      [xid, wid, bid, sstride, spad, N, C, H, Wd, O, kh, kw, Ho, Wo, ckk, hw,
       cols = std::move(cols)](Tape& t, const Tape::Node& self) {
        const bool need_x = t.requires_grad(xid);
        const bool need_w = t.requires_grad(wid);
        const bool need_b = t.requires_grad(bid);
        CMapRM Wm(t.value(wid).data(), O, ckk);
        Tensor dX = need_x ? Tensor::zeros(t.value(xid).shape()) : Tensor{};
        MatRM dW = MatRM::Zero(O, ckk);
        Eigen::VectorXd db = Eigen::VectorXd::Zero(O);
        MatRM dcol;
        for (Index n = 0; n < N; ++n) {
          CMapRM gn(self.grad.data() + n * O * hw, O, hw);
          if (need_w) dW.noalias() += gn * cols[static_cast<std::size_t>(n)].transpose();
          if (need_b) db.noalias() += gn.rowwise().sum();
          if (need_x) {
            dcol.noalias() = Wm.transpose() * gn;
            col2im_add(dcol, C, H, Wd, kh, kw, sstride, spad, Ho, Wo,
                       dX.data() + n * C * H * Wd);
          }
        }
        if (need_x) t.accumulate(xid, dX.array());
        if (need_w) t.accumulate(wid, Eigen::Map<const Array>(dW.data(), O * ckk));
        if (need_b) t.accumulate(bid, db.array());
      });
}

Var fully_connected(Var x, Var w, Var b) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  const Tensor& W = w.value();
  const Tensor& B = b.value();
  require_rank(X, 2, "fully_connected input");
  require_rank(W, 2, "fully_connected weight");
  require_rank(B, 1, "fully_connected bias");
  const Index N = X.dim(0), F = X.dim(1), Fw = W.dim(0), G = W.dim(1);
  if (F != Fw) {
    throw ShapeError("fully_connected: input has F=" + std::to_string(F) +
                     " features but weight expects F=" + std::to_string(Fw));
  }
  if (B.dim(0) != G) {
    throw ShapeError("fully_connected: bias has " + std::to_string(B.dim(0)) +
                     " entries but weight has G=" + std::to_string(G));
  }
  Tensor out({N, G});
  {
    CMapRM Xm(X.data(), N, F), Wm(W.data(), F, G);
    MapRM Om(out.data(), N, G);
    Om.noalias() = Xm * Wm;
    Om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(B.data(), G);
  }
  if (!any_grad({x, w, b})) return t.leaf(std::move(out), false);
  const int xid = x.id, wid = w.id, bid = b.id;
  return t.record(std::move(out), true,
                  [xid, wid, bid, N, F, G](Tape& t, const Tape::Node& self) {
                    CMapRM Gm(self.grad.data(), N, G);
                    if (t.requires_grad(xid)) {
                      CMapRM Wm(t.value(wid).data(), F, G);
                      MatRM dX(N, F);
                      dX.noalias() = Gm * Wm.transpose();
                      t.accumulate(xid, Eigen::Map<const Array>(dX.data(), N * F));
                    }
                    if (t.requires_grad(wid)) {
                      CMapRM Xm(t.value(xid).data(), N, F);
                      MatRM dW(F, G);
                      dW.noalias() = Xm.transpose() * Gm;
                      t.accumulate(wid, Eigen::Map<const Array>(dW.data(), F * G));
                    }
                    if (t.requires_grad(bid)) {
                      t.accumulate(bid, Gm.colwise().sum().array().transpose());
                    }
                  });
}

Var batch_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  require_rank(X, 2, "batch_norm input");
  const Index N = X.dim(0), F = X.dim(1);
  if (N < 2) {
    throw ValueError("batch_norm: training-mode variance is undefined for N=" +
                     std::to_string(N) + " (need N >= 2)");
  }
  require_rank(gamma.value(), 1, "batch_norm gamma");
  require_rank(beta.value(), 1, "batch_norm beta");
  if (gamma.value().dim(0) != F || beta.value().dim(0) != F) {
    throw ShapeError("batch_norm: gamma/beta length must equal F=" + std::to_string(F));
  }

  CMapRM Xm(X.data(), N, F);
  const Eigen::RowVectorXd mu = Xm.colwise().mean();
  const Eigen::RowVectorXd var =
      (Xm.rowwise() - mu).array().square().colwise().mean();
  const Eigen::RowVectorXd inv_std = (var.array() + eps).sqrt().inverse();

  Tensor xhat({N, F});
  MapRM Hm(xhat.data(), N, F);
  Hm = (Xm.rowwise() - mu).array().rowwise() * inv_std.array();

  Tensor out({N, F});
  MapRM Om(out.data(), N, F);
  const Eigen::Map<const Eigen::RowVectorXd> g(gamma.value().data(), F);
  const Eigen::Map<const Eigen::RowVectorXd> be(beta.value().data(), F);
  Om = (Hm.array().rowwise() * g.array()).rowwise() + be.array();

  if (!any_grad({x, gamma, beta})) return t.leaf(std::move(out), false);
  const int xid = x.id, gid = gamma.id, bid = beta.id;
  Eigen::RowVectorXd inv_std_copy = inv_std;
  return t.record(
      std::move(out), true,
      [xid, gid, bid, N, F, xhat = std::move(xhat),
       inv_std = std::move(inv_std_copy)](Tape& t, const Tape::Node& self) {
        CMapRM Gm(self.grad.data(), N, F);
        CMapRM Hm(xhat.data(), N, F);
        if (t.requires_grad(gid)) {
          t.accumulate(gid, (Gm.array() * Hm.array()).colwise().sum().transpose());
        }
        if (t.requires_grad(bid)) {
          t.accumulate(bid, Gm.colwise().sum().array().transpose());
        }
        if (t.requires_grad(xid)) {
          const Eigen::Map<const Eigen::RowVectorXd> g(t.value(gid).data(), F);
          const Eigen::RowVectorXd mean_g = Gm.colwise().mean();
          const Eigen::RowVectorXd mean_gh = (Gm.array() * Hm.array()).colwise().mean();
          MatRM dX(N, F);
          dX = ((Gm.rowwise() - mean_g).array() -
                Hm.array().rowwise() * mean_gh.array())
                   .rowwise() *
               (g.array() * inv_std.array());
          t.accumulate(xid, Eigen::Map<const Array>(dX.data(), N * F));
        }
      });
}

Var avg_pool_global(Var x) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  require_rank(X, 4, "avg_pool_global input");
  const Index N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  const Index hw = H * W;
  Tensor out({N, C});
  for (Index n = 0; n < N; ++n) {
    for (Index c = 0; c < C; ++c) {
      out[n * C + c] = X.array().segment((n * C + c) * hw, hw).mean();
    }
  }
  if (!any_grad({x})) return t.leaf(std::move(out), false);
  const int xid = x.id;
  return t.record(std::move(out), true, [xid, N, C, hw](Tape& t, const Tape::Node& self) {
    Array g(N * C * hw);
    for (Index n = 0; n < N; ++n) {
      for (Index c = 0; c < C; ++c) {
        g.segment((n * C + c) * hw, hw)
            .setConstant(self.grad.array()[n * C + c] / static_cast<double>(hw));
      }
    }
    t.accumulate(xid, g);
  });
}

Var binary_cross_entropy(Var p, int domain_label) {
  Tape& t = *p.tape;
  if (domain_label != 0 && domain_label != 1) {
    throw ValueError("binary_cross_entropy: domain label must be 0 or 1, got " +
                     std::to_string(domain_label));
  }
  const Tensor& P = p.value();
  OpStats& stats = op_stats();
  Tensor out(P.shape());
  const double lo = kClampEps, hi = 1.0 - kClampEps;
  for (Index i = 0; i < P.numel(); ++i) {
    double v = P[i];
    if (stats.track_margins) {
      stats.note_margin(std::min(std::abs(v - lo), std::abs(hi - v)));
    }
    if (v < lo || v > hi) {
      ++stats.clamp_events;
      v = std::clamp(v, lo, hi);
    }
    out[i] = domain_label == 1 ? -std::log(v) : -std::log(1.0 - v);
  }
  if (!any_grad({p})) return t.leaf(std::move(out), false);
  const int pid = p.id;
  return t.record(std::move(out), true,
                  [pid, domain_label, lo, hi](Tape& t, const Tape::Node& self) {
                    const Tensor& P = t.value(pid);
                    Array g(P.numel());
                    for (Index i = 0; i < P.numel(); ++i) {
                      const double v = P[i];
                      if (v <= lo || v >= hi) {
                        g[i] = 0.0;  // clamped region is flat
                      } else {
                        g[i] = domain_label == 1 ? -1.0 / v : 1.0 / (1.0 - v);
                      }
                      g[i] *= self.grad.array()[i];
                    }
                    t.accumulate(pid, g);
                  });
}

Var smooth_l1(Var pred, const Tensor& target) {
  Tape& t = *pred.tape;
  require_same_shape(pred.value(), target, "smooth_l1");
  const Index n = pred.value().numel();
  if (n == 0) throw ShapeError("smooth_l1 of an empty tensor");
  const Array diff = pred.value().array() - target.array();
  OpStats& stats = op_stats();
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double a = std::abs(diff[i]);
    if (stats.track_margins) stats.note_margin(std::abs(a - 1.0));
    total += a < 1.0 ? 0.5 * a * a : a - 0.5;
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(n));
  if (!any_grad({pred})) return t.leaf(std::move(out), false);
  const int pid = pred.id;
  Array diff_copy = diff;
  return t.record(std::move(out), true,
                  [pid, n, diff = std::move(diff_copy)](Tape& t, const Tape::Node& self) {
                    Array g(n);
                    for (Index i = 0; i < n; ++i) {
                      const double d = diff[i];
                      g[i] = std::abs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0);
                    }
                    t.accumulate(pid, g * (self.grad.array()[0] / static_cast<double>(n)));
                  });
}

Var softmax_ce(Var logits, const std::vector<int>& labels) {
  Tape& t = *logits.tape;
  const Tensor& Z = logits.value();
  require_rank(Z, 2, "softmax_ce logits");
  const Index N = Z.dim(0), K = Z.dim(1);
  if (static_cast<Index>(labels.size()) != N) {
    throw ShapeError("softmax_ce: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(N) + " rows");
  }
  for (int l : labels) {
    if (l < 0 || l >= K) {
      throw ValueError("softmax_ce: label " + std::to_string(l) + " out of [0," +
                       std::to_string(K) + ")");
    }
  }
  Tensor probs({N, K});
  double total = 0.0;
  for (Index i = 0; i < N; ++i) {
    const auto row = Z.array().segment(i * K, K);
    const double m = row.maxCoeff();
    const Array e = (row - m).exp();
    const double s = e.sum();
    probs.array().segment(i * K, K) = e / s;
    total += std::log(s) + m - row[labels[static_cast<std::size_t>(i)]];
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(N));
  if (!any_grad({logits})) return t.leaf(std::move(out), false);
  const int zid = logits.id;
  return t.record(std::move(out), true,
                  [zid, N, K, labels, probs = std::move(probs)](Tape& t,
                                                                const Tape::Node& self) {
                    Array g = probs.array();
                    for (Index i = 0; i < N; ++i) {
                      g[i * K + labels[static_cast<std::size_t>(i)]] -= 1.0;
                    }
                    t.accumulate(zid, g * (self.grad.array()[0] / static_cast<double>(N)));
                  });
}

Var roi_pool(Var feature, const std::vector<Box>& boxes, int out_h, int out_w,
             double image_to_feature_scale) {
  Tape& t = *feature.tape;
  const Tensor& F = feature.value();
  require_rank(F, 4, "roi_pool feature");
  if (F.dim(0) != 1) {
    throw ShapeError("roi_pool expects a single-image feature map, got N=" +
                     std::to_string(F.dim(0)));
  }
  if (image_to_feature_scale <= 0.0) {
    throw ValueError("roi_pool: scale must be positive, got " +
                     std::to_string(image_to_feature_scale));
  }
  if (out_h < 1 || out_w < 1) throw ValueError("roi_pool: output size must be positive");
  const Index C = F.dim(1), H = F.dim(2), W = F.dim(3);
  const Index R = static_cast<Index>(boxes.size());
  OpStats& stats = op_stats();

  Tensor out({R, C, out_h, out_w});
  std::vector<Index> argmax(static_cast<std::size_t>(out.numel()), -1);
  for (Index r = 0; r < R; ++r) {
    const Box& b = boxes[static_cast<std::size_t>(r)];
    if (!b.valid()) {
      throw ValueError("roi_pool: box with non-positive area " + b.to_string());
    }
    const Index ix1 = std::clamp<Index>(
        static_cast<Index>(std::floor(b.x1 * image_to_feature_scale)), 0, W - 1);
    const Index ix2 = std::clamp<Index>(
        static_cast<Index>(std::ceil(b.x2 * image_to_feature_scale)), ix1 + 1, W);
    const Index iy1 = std::clamp<Index>(
        static_cast<Index>(std::floor(b.y1 * image_to_feature_scale)), 0, H - 1);
    const Index iy2 = std::clamp<Index>(
        static_cast<Index>(std::ceil(b.y2 * image_to_feature_scale)), iy1 + 1, H);
    const Index rh = iy2 - iy1, rw = ix2 - ix1;
    for (Index i = 0; i < out_h; ++i) {
      Index ys = iy1 + rh * i / out_h;
      Index ye = iy1 + rh * (i + 1) / out_h;
      if (ye <= ys) {  // empty cell: take the nearest valid row
        ys = std::min(ys, iy2 - 1);
        ye = ys + 1;
      }
      for (Index j = 0; j < out_w; ++j) {
        Index xs = ix1 + rw * j / out_w;
        Index xe = ix1 + rw * (j + 1) / out_w;
        if (xe <= xs) {
          xs = std::min(xs, ix2 - 1);
          xe = xs + 1;
        }
        for (Index c = 0; c < C; ++c) {
          const double* plane = F.data() + c * H * W;
          double best = -std::numeric_limits<double>::infinity();
          double second = best;
          Index best_idx = -1;
          for (Index y = ys; y < ye; ++y) {
            for (Index x = xs; x < xe; ++x) {
              const double v = plane[y * W + x];
              if (v > best) {
                second = best;
                best = v;
                best_idx = c * H * W + y * W + x;
              } else if (v > second) {
                second = v;
              }
            }
          }
          if (stats.track_margins && std::isfinite(second)) {
            if (best != second) {
              stats.note_margin(best - second);
            } else if (best != 0.0) {
              // A tie between distinct nonzero entries makes the max
              // non-differentiable here. Ties at 0 come from clipped relu
              // outputs pinned in place, which the relu margin already covers.
              stats.note_margin(0.0);
            }
          }
          const Index o = ((r * C + c) * out_h + i) * out_w + j;
          out[o] = best;
          argmax[static_cast<std::size_t>(o)] = best_idx;
        }
      }
    }
  }
  if (!any_grad({feature}) || R == 0) return t.leaf(std::move(out), false);
  const int fid = feature.id;
  return t.record(std::move(out), true,
                  [fid, argmax = std::move(argmax)](Tape& t, const Tape::Node& self) {
                    Array g = Array::Zero(t.value(fid).numel());
                    for (std::size_t o = 0; o < argmax.size(); ++o) {
                      // -1 marks a window that never beat -inf (all-NaN
                      // features in a diverged run); nothing to route there.
                      if (argmax[o] >= 0) {
                        g[argmax[o]] += self.grad.array()[static_cast<Index>(o)];
                      }
                    }
                    t.accumulate(fid, g);
                  });
}

}  // namespace ops

Tensor softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) {
    throw ShapeError("softmax_rows expects rank 2, got " +
                     shape_to_string(logits.shape()));
  }
  const Index N = logits.dim(0), K = logits.dim(1);
  Tensor out({N, K});
  for (Index i = 0; i < N; ++i) {
    const auto row = logits.array().segment(i * K, K);
    const Array e = (row - row.maxCoeff()).exp();
    out.array().segment(i * K, K) = e / e.sum();
  }
  return out;
}

}  // namespace da
