#include "da/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <memory>
#include <numeric>
#include <set>

#include "da/adaptors.hpp"
#include "da/detector.hpp"
#include "da/grl.hpp"
#include "da/instance.hpp"
#include "da/model.hpp"
#include "da/ops.hpp"
#include "da/optim.hpp"
#include "da/synth.hpp"
#include "da/train.hpp"

namespace da {

FdCheckResult finite_difference_check(const std::function<double()>& f,
                                      const std::function<void()>& run_backward,
                                      const std::vector<Parameter*>& params,
                                      const FdOptions& opt) {
  FdCheckResult res;
  clear_grads(params);

  OpStats& stats = op_stats();
  stats.track_margins = true;
  stats.min_margin = std::numeric_limits<double>::infinity();
  run_backward();
  res.base_margin = stats.min_margin;
  stats.track_margins = false;
  stats.min_margin = std::numeric_limits<double>::infinity();
  if (res.base_margin <= opt.margin_threshold) {
    res.valid = false;
    return res;
  }

  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (const Parameter* p : params) {
    grads.push_back(p->grad.empty() ? Tensor::zeros(p->value.shape()) : p->grad);
  }

  Rng pick = Rng::derive(opt.subsample_seed, 0x454e545259ULL);
  res.pass = true;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter* p = params[pi];
    const Index n = p->value.numel();
    std::vector<Index> entries;
    if (opt.max_entries_per_param <= 0 || n <= opt.max_entries_per_param) {
      entries.resize(static_cast<std::size_t>(n));
      std::iota(entries.begin(), entries.end(), Index{0});
    } else {
      std::set<Index> chosen;
      while (static_cast<Index>(chosen.size()) < opt.max_entries_per_param) {
        chosen.insert(pick.uniform_int(0, n - 1));
      }
      entries.assign(chosen.begin(), chosen.end());
    }
    for (Index i : entries) {
      const double saved = p->value[i];
      const double a = grads[pi][i];
      // A central difference at the default step can straddle a kink (relu,
      // pooling argmax, the smooth-l1 elbow) that the true objective merely
      // passes near. Shrinking the step walks the stencil off the kink; a
      // genuinely wrong gradient keeps failing at every step size.
      double rel = std::numeric_limits<double>::infinity();
      double fd = 0.0;
      for (double h : {opt.step, opt.step / 4.0, opt.step / 16.0}) {
        p->value[i] = saved + h;
        const double fp = f();
        p->value[i] = saved - h;
        const double fm = f();
        p->value[i] = saved;
        const double cand = (fp - fm) / (2.0 * h);
        const double diff = std::abs(a - cand);
        const double r =
            diff <= opt.abs_tol ? 0.0 : diff / std::max(std::abs(a), std::abs(cand));
        if (r < rel) {
          rel = r;
          fd = cand;
        }
        if (rel <= opt.rel_tol) break;
      }
      ++res.entries_checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = p->name;
        res.worst_entry = i;
        res.worst_analytic = a;
        res.worst_fd = fd;
      }
      if (rel > opt.rel_tol) res.pass = false;
    }
  }
  return res;
}

namespace {

struct CaseGroup {
  std::vector<Parameter*> params;
  std::function<double()> scalar;
};

struct FdCase {
  std::function<void()> run_backward;
  std::vector<CaseGroup> groups;
};

FdCheckResult run_case(const FdCase& c, const FdOptions& opt) {
  FdCheckResult agg;
  agg.pass = true;
  for (const CaseGroup& g : c.groups) {
    FdCheckResult r = finite_difference_check(g.scalar, c.run_backward, g.params, opt);
    agg.base_margin = r.base_margin;
    if (!r.valid) {
      agg.valid = false;
      agg.pass = false;
      return agg;
    }
    agg.entries_checked += r.entries_checked;
    if (r.max_rel_err >= agg.max_rel_err) {
      agg.max_rel_err = r.max_rel_err;
      agg.worst_param = r.worst_param;
      agg.worst_entry = r.worst_entry;
      agg.worst_analytic = r.worst_analytic;
      agg.worst_fd = r.worst_fd;
    }
    if (!r.pass) agg.pass = false;
  }
  return agg;
}

Tensor rand_tensor(std::vector<Index> shape, double lo, double hi, Rng& rng) {
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Freshly built layers carry zero biases, which park relu preactivations
// exactly on the kink wherever a receptive field is fully clipped. Checking
// gradients at such a point is meaningless (the subgradient convention and
// any finite difference legitimately disagree), so move every zero-initialized
// tensor to a generic point first.
void jitter_zero_params(const std::vector<Parameter*>& ps, Rng& rng) {
  for (Parameter* p : ps) {
    if (p->value.numel() == 0) continue;
    if ((p->value.array() != 0.0).any()) continue;
    for (Index i = 0; i < p->value.numel(); ++i) p->value[i] = rng.uniform(-0.3, 0.3);
  }
}

template <typename BuildFn>
FdCase simple_case(BuildFn build, std::vector<Parameter*> ps) {
  FdCase c;
  c.run_backward = [build] {
    TapeSession s;
    Var loss = build(s);
    s.backward(loss);
    s.write_grads();
  };
  c.groups.push_back(CaseGroup{std::move(ps), [build] {
                                 TapeSession s(/*frozen=*/true);
                                 return build(s).value().item();
                               }});
  return c;
}

Rng item_rng(std::uint64_t item, std::uint64_t attempt) {
  return Rng::derive(0xFDC0DEULL, item, attempt);
}

FdCase case_elementwise(std::uint64_t at) {
  struct St {
    Parameter a, b;
  };
  auto st = std::make_shared<St>();
  Rng rng = item_rng(1, at);
  st->a = Parameter("a", rand_tensor({2, 3}, -1, 1, rng));
  st->b = Parameter("b", rand_tensor({2, 3}, -1, 1, rng));
  auto build = [st](TapeSession& s) {
    Var a = s.param(st->a), b = s.param(st->b);
    Var left = ops::add(a, b);
    Var right = ops::sub(ops::scale(a, 1.3), ops::add_scalar(ops::neg(b), 0.7));
    return ops::sum(ops::mul(left, right));
  };
  return simple_case(build, {&st->a, &st->b});
}

FdCase case_reductions(std::uint64_t at) {
  struct St {
    Parameter a, b;
  };
  auto st = std::make_shared<St>();
  Rng rng = item_rng(2, at);
  st->a = Parameter("a", rand_tensor({4, 3}, -1, 1, rng));
  st->b = Parameter("b", rand_tensor({3, 3}, -1, 1, rng));
  auto build = [st](TapeSession& s) {
    Var ga = ops::gather_rows(s.param(st->a), {2, 0, 1, 2});
    Var sl = ops::slice_rows(s.param(st->b), 1, 2);
    Var cat = ops::concat_rows({ga, sl});
    Var r = ops::reshape(cat, {3, 6});
    return ops::add(ops::scale(ops::mean(r), 2.0), ops::sum(ops::slice_rows(r, 0, 2)));
  };
  return simple_case(build, {&st->a, &st->b});
}

FdCase case_relu(std::uint64_t at) {
  struct St {
    Parameter x;
    Tensor m;
  };
  auto st = std::make_shared<St>();
  Rng rng = item_rng(3, at);
  st->x = Parameter("x", rand_tensor({3, 4}, -1, 1, rng));
  st->m = rand_tensor({3, 4}, -1, 1, rng);
  auto build = [st](TapeSession& s) {
    return ops::sum(ops::mul(ops::relu(s.param(st->x)), s.input(st->m)));
  };
  return simple_case(build, {&st->x});
}

FdCase case_sigmoid(std::uint64_t at) {
  struct St {
    Parameter x;
    Tensor m;
  };
  auto st = std::make_shared<St>();
  Rng rng = item_rng(4, at);
  st->x = Parameter("x", rand_tensor({2, 5}, -2, 2, rng));
  st->m = rand_tensor({2, 5}, -1, 1, rng);
  auto build = [st](TapeSession& s) {
    return ops::sum(ops::mul(ops::sigmoid(s.param(st->x)), s.input(st->m)));
  };
  return simple_case(build, {&st->x});
}

FdCase case_conv2d(std::uint64_t at) {
  struct St {
    Parameter x, w, b;
    Tensor m;
    int stride, pad;
  };
  auto st = std::make_shared<St>();
  Rng rng = item_rng(5, at);
  const Index N = rng.uniform_int(1, 2);
  const Index ci = rng.uniform_int(1, 3);
  const Index co = rng.uniform_int(1, 2);
  const Index k = rng.uniform_int(1, 3);
  st->stride = static_cast<int>(rng.uniform_int(1, 2));
  st->pad = static_cast<int>(rng.uniform_int(0, 1));
  const Index h = k + rng.uniform_int(0, 3);
  const Index w = k + rng.uniform_int(0, 3);
  const Index ho = (h + 2 * st->pad - k) / st->stride + 1;
  const Index wo = (w + 2 * st->pad - k) / st->stride + 1;
  st->x = Parameter("x", rand_tensor({N, ci, h, w}, -1, 1, rng));
  st->w = Parameter("w", rand_tensor({co, ci, k, k}, -1, 1, rng));
  st->b = Parameter("b", rand_tensor({co}, -0.5, 0.5, rng));
  st->m = rand_tensor({N, co, ho, wo}, -1, 1, rng);
  auto build = [st](TapeSession& s) {
    Var c = ops::conv2d(s.param(st->x), s.param(st->w), s.param(st->b), st->stride, st->pad);
    return ops::sum(ops::mul(c, s.input(st->m)));
  };
  return simple_case(build, {&st->x, &st->w, &st->b});
}

FdCase case_fully_connected(std::uint64_t at) {
  struct St {
    Parameter x, w, b;
    Tensor m;
  };
  auto st = std::make_shared<St>();
  Rng rng = item_rng(6, at);
  st->x = Parameter("x", rand_tensor({3, 4}, -1, 1, rng));
  st->w = Parameter("w", rand_tensor({4, 2}, -1, 1, rng));
  st->b = Parameter("b", rand_tensor({2}, -0.5, 0.5, rng));
  st->m = rand_tensor({3, 2}, -1, 1, rng);
  auto build = [st](TapeSession& s) {
    Var y = ops::fully_connected(s.param(st->x), s.param(st->w), s.param(st->b));
    return ops::sum(ops::mul(y, s.input(st->m)));
  };
  return simple_case(build, {&st->x, &st->w, &st->b});
}

FdCase case_batch_norm(std::uint64_t at) {
  struct St {
    Parameter x, g, b;
    Tensor m;
  };
  auto st = std::make_shared<St>();
  Rng rng = item_rng(7, at);
  st->x = Parameter("x", rand_tensor({4, 3}, -1, 1, rng));
  st->g = Parameter("gamma", rand_tensor({3}, 0.5, 1.5, rng));
  st->b = Parameter("beta", rand_tensor({3}, -0.5, 0.5, rng));
  st->m = rand_tensor({4, 3}, -1, 1, rng);
  auto build = [st](TapeSession& s) {
    Var y = ops::batch_norm(s.param(st->x), s.param(st->g), s.param(st->b));
    return ops::sum(ops::mul(y, s.input(st->m)));
  };
  return simple_case(build, {&st->x, &st->g, &st->b});
}

FdCase case_avg_pool(std::uint64_t at) {
  struct St {
    Parameter x;
    Tensor m;
  };
  auto st = std::make_shared<St>();
  Rng rng = item_rng(8, at);
  st->x = Parameter("x", rand_tensor({2, 3, 3, 4}, -1, 1, rng));
  st->m = rand_tensor({2, 3}, -1, 1, rng);
  auto build = [st](TapeSession& s) {
    return ops::sum(ops::mul(ops::avg_pool_global(s.param(st->x)), s.input(st->m)));
  };
  return simple_case(build, {&st->x});
}

FdCase case_binary_ce(std::uint64_t at) {
  struct St {
    Parameter x;
    int d;
  };
  auto st = std::make_shared<St>();
  Rng rng = item_rng(9, at);
  st->x = Parameter("x", rand_tensor({2, 3}, -2, 2, rng));
  st->d = static_cast<int>(at & 1);
  auto build = [st](TapeSession& s) {
    return ops::mean(ops::binary_cross_entropy(ops::sigmoid(s.param(st->x)), st->d));
  };
  return simple_case(build, {&st->x});
}

FdCase case_smooth_l1(std::uint64_t at) {
  struct St {
    Parameter p;
    Tensor t;
  };
  auto st = std::make_shared<St>();
  Rng rng = item_rng(10, at);
  st->p = Parameter("pred", rand_tensor({2, 4}, -2, 2, rng));
  st->t = rand_tensor({2, 4}, -2, 2, rng);
  auto build = [st](TapeSession& s) { return ops::smooth_l1(s.param(st->p), st->t); };
  return simple_case(build, {&st->p});
}

FdCase case_softmax_ce(std::uint64_t at) {
  struct St {
    Parameter z;
    std::vector<int> labels;
  };
  auto st = std::make_shared<St>();
  Rng rng = item_rng(11, at);
  st->z = Parameter("logits", rand_tensor({3, 4}, -2, 2, rng));
  for (int r = 0; r < 3; ++r) {
    st->labels.push_back(static_cast<int>(rng.uniform_int(0, 3)));
  }
  auto build = [st](TapeSession& s) { return ops::softmax_ce(s.param(st->z), st->labels); };
  return simple_case(build, {&st->z});
}

FdCase case_roi_pool(std::uint64_t at) {
  struct St {
    Parameter x;
    std::vector<Box> boxes;
    Tensor m;
  };
  auto st = std::make_shared<St>();
  Rng rng = item_rng(12, at);
  st->x = Parameter("feat", rand_tensor({1, 2, 6, 6}, -1, 1, rng));
  const double image = 12.0;  // feature scale 0.5
  for (int b = 0; b < 3; ++b) {
    const double x1 = static_cast<double>(rng.uniform_int(0, 8));
    const double y1 = static_cast<double>(rng.uniform_int(0, 8));
    const double x2 = x1 + static_cast<double>(rng.uniform_int(2, static_cast<std::int64_t>(image - x1)));
    const double y2 = y1 + static_cast<double>(rng.uniform_int(2, static_cast<std::int64_t>(image - y1)));
    st->boxes.push_back(Box{x1, y1, x2, y2});
  }
  st->m = rand_tensor({3, 2, 2, 2}, -1, 1, rng);
  auto build = [st](TapeSession& s) {
    Var p = ops::roi_pool(s.param(st->x), st->boxes, 2, 2, 0.5);
    return ops::sum(ops::mul(p, s.input(st->m)));
  };
  return simple_case(build, {&st->x});
}

FdCase case_grl(std::uint64_t at) {
  struct St {
    Parameter x, w, b;
    double scale;
    int d;
  };
  auto st = std::make_shared<St>();
  Rng rng = item_rng(13, at);
  st->x = Parameter("x", rand_tensor({1, 4}, -1, 1, rng));
  st->w = Parameter("w", rand_tensor({4, 2}, -1, 1, rng));
  st->b = Parameter("b", rand_tensor({2}, -0.5, 0.5, rng));
  st->scale = rng.uniform(0.1, 2.0);
  st->d = static_cast<int>(at & 1);
  auto plain = [st](TapeSession& s) {
    Var y = ops::fully_connected(s.param(st->x), s.param(st->w), s.param(st->b));
    return ops::mean(ops::binary_cross_entropy(ops::sigmoid(y), st->d));
  };
  FdCase c;
  c.run_backward = [st] {
    TapeSession s;
    Var rx = ops::gradient_reversal(s.param(st->x), st->scale);
    Var y = ops::fully_connected(rx, s.param(st->w), s.param(st->b));
    Var loss = ops::mean(ops::binary_cross_entropy(ops::sigmoid(y), st->d));
    s.backward(loss);
    s.write_grads();
  };
  auto plain_value = [st, plain] {
    TapeSession s(/*frozen=*/true);
    return plain(s).value().item();
  };
  c.groups.push_back(CaseGroup{{&st->x}, [st, plain_value] {
                                 return -st->scale * plain_value();
                               }});
  c.groups.push_back(CaseGroup{{&st->w, &st->b}, plain_value});
  return c;
}

FdCase case_local_loss(std::uint64_t at) {
  struct St {
    Parameter z;
    LocalDiscriminator d;
    int dom;
  };
  auto st = std::make_shared<St>();
  Rng rng = item_rng(14, at);
  st->z = Parameter("z", rand_tensor({1, 3, 4, 4}, -1, 1, rng));
  st->d = LocalDiscriminator("d", 3, rng);
  st->dom = static_cast<int>(at & 1);
  auto build = [st](TapeSession& s) {
    return local_loss_unmasked(st->d.forward(s, s.param(st->z)), st->dom);
  };
  std::vector<Parameter*> ps{&st->z};
  st->d.collect(ps);
  jitter_zero_params(ps, rng);
  return simple_case(build, std::move(ps));
}

FdCase case_masked_local_loss(std::uint64_t at) {
  struct St {
    Parameter z;
    LocalDiscriminator d;
    Tensor mask;
    int dom;
  };
  auto st = std::make_shared<St>();
  Rng rng = item_rng(15, at);
  st->z = Parameter("z", rand_tensor({1, 3, 4, 4}, -1, 1, rng));
  st->d = LocalDiscriminator("d", 3, rng);
  st->dom = static_cast<int>(at & 1);
  const double eta = rng.uniform(0.0, 8.0);
  std::vector<Parameter*> ps{&st->z};
  st->d.collect(ps);
  jitter_zero_params(ps, rng);
  {
    TapeSession s(/*frozen=*/true);
    st->mask = dmi_mask(st->d.forward(s, s.param(st->z)).value(), eta);
  }
  auto build = [st](TapeSession& s) {
    return local_loss_masked(st->d.forward(s, s.param(st->z)), st->mask, st->dom);
  };
  return simple_case(build, std::move(ps));
}

FdCase case_transition_loss(std::uint64_t at) {
  struct St {
    Parameter z;
    TransitionDiscriminator d;
    Tensor mask;
    int dom;
  };
  auto st = std::make_shared<St>();
  Rng rng = item_rng(16, at);
  st->z = Parameter("z", rand_tensor({1, 3, 8, 8}, -1, 1, rng));
  st->d = TransitionDiscriminator("d", 3, rng);
  st->dom = static_cast<int>(at & 1);
  const double eta = rng.uniform(0.0, 8.0);
  std::vector<Parameter*> ps{&st->z};
  st->d.collect(ps);
  jitter_zero_params(ps, rng);
  {
    TapeSession s(/*frozen=*/true);
    st->mask = dmi_mask(st->d.forward(s, s.param(st->z)).local_map.value(), eta);
  }
  auto build = [st](TapeSession& s) {
    auto out = st->d.forward(s, s.param(st->z));
    return transition_loss(out.local_map, st->mask, out.global_p, st->dom);
  };
  return simple_case(build, std::move(ps));
}

FdCase case_global_loss(std::uint64_t at) {
  struct St {
    Parameter z;
    GlobalDiscriminator d;
    int dom;
  };
  auto st = std::make_shared<St>();
  Rng rng = item_rng(17, at);
  st->z = Parameter("z", rand_tensor({1, 4, 8, 8}, -1, 1, rng));
  st->d = GlobalDiscriminator("d", 4, rng);
  st->dom = static_cast<int>(at & 1);
  auto build = [st](TapeSession& s) {
    return global_loss(st->d.forward(s, s.param(st->z)), st->dom);
  };
  std::vector<Parameter*> ps{&st->z};
  st->d.collect(ps);
  jitter_zero_params(ps, rng);
  return simple_case(build, std::move(ps));
}

FdCase case_feat_loss(std::uint64_t at) {
  struct St {
    Parameter z1, z2, z3;
    LocalDiscriminator dl;
    TransitionDiscriminator dt;
    GlobalDiscriminator dg;
    AlignFlags flags;
    MaskOverride masks;
    double lambda, eta;
    int dom;
  };
  auto st = std::make_shared<St>();
  Rng rng = item_rng(18, at);
  st->z1 = Parameter("z1", rand_tensor({1, 2, 8, 8}, -1, 1, rng));
  st->z2 = Parameter("z2", rand_tensor({1, 2, 8, 8}, -1, 1, rng));
  st->z3 = Parameter("z3", rand_tensor({1, 4, 8, 8}, -1, 1, rng));
  st->dl = LocalDiscriminator("dl", 2, rng);
  st->dt = TransitionDiscriminator("dt", 2, rng);
  st->dg = GlobalDiscriminator("dg", 4, rng);
  std::vector<Parameter*> dps;
  st->dl.collect(dps);
  st->dt.collect(dps);
  st->dg.collect(dps);
  jitter_zero_params(dps, rng);
  st->lambda = rng.uniform(0.1, 1.0);
  st->eta = rng.uniform(0.0, 6.0);
  st->dom = static_cast<int>(at & 1);
  {
    TapeSession s(/*frozen=*/true);
    FeatLossResult r = feat_loss(s, s.param(st->z1), s.param(st->z2), s.param(st->z3),
                                 st->dl, st->dt, st->dg, st->dom, st->lambda, st->eta,
                                 st->flags, nullptr);
    st->masks.local_mask = dmi_mask(r.probes.local_map, st->eta);
    st->masks.transition_mask = dmi_mask(r.probes.transition_map, st->eta);
  }
  auto value = [st] {
    TapeSession s(/*frozen=*/true);
    FeatLossResult r = feat_loss(s, s.param(st->z1), s.param(st->z2), s.param(st->z3),
                                 st->dl, st->dt, st->dg, st->dom, st->lambda, st->eta,
                                 st->flags, &st->masks);
    return r.loss.value().item();
  };
  FdCase c;
  c.run_backward = [st] {
    TapeSession s;
    FeatLossResult r = feat_loss(s, s.param(st->z1), s.param(st->z2), s.param(st->z3),
                                 st->dl, st->dt, st->dg, st->dom, st->lambda, st->eta,
                                 st->flags, &st->masks);
    s.backward(r.loss);
    s.write_grads();
  };
  c.groups.push_back(CaseGroup{{&st->z1, &st->z2, &st->z3}, [st, value] {
                                 return -st->lambda * value();
                               }});
  c.groups.push_back(CaseGroup{std::move(dps), value});
  return c;
}

FdCase case_instance_loss(std::uint64_t at) {
  struct St {
    Parameter sf, sb, tf, tb;
    InstanceDiscriminator dfg, dbg;
  };
  auto st = std::make_shared<St>();
  Rng rng = item_rng(19, at);
  st->sf = Parameter("src_fg", rand_tensor({2, 6}, -1, 1, rng));
  st->sb = Parameter("src_bg", rand_tensor({3, 6}, -1, 1, rng));
  st->tf = Parameter("tgt_fg", rand_tensor({2, 6}, -1, 1, rng));
  st->tb = Parameter("tgt_bg", rand_tensor({2, 6}, -1, 1, rng));
  st->dfg = InstanceDiscriminator("dfg", 6, rng);
  st->dbg = InstanceDiscriminator("dbg", 6, rng);
  auto build = [st](TapeSession& s) {
    InstanceStepResult r =
        instance_alignment_step(s, s.param(st->sf), s.param(st->sb), s.param(st->tf),
                                s.param(st->tb), st->dfg, st->dbg);
    return ops::add(r.loss_source, r.loss_target);
  };
  std::vector<Parameter*> ps{&st->sf, &st->sb, &st->tf, &st->tb};
  st->dfg.collect(ps);
  st->dbg.collect(ps);
  jitter_zero_params(ps, rng);
  return simple_case(build, std::move(ps));
}

FdCase case_detection_loss(std::uint64_t at) {
  struct St {
    Parameter img;
    Backbone bb;
    PredictionHead head;
    std::vector<Box> props;
    MatchedTargets targets;
  };
  auto st = std::make_shared<St>();
  Rng rng = item_rng(20, at);
  st->img = Parameter("image", rand_tensor({1, 3, 16, 16}, 0, 1, rng));
  st->bb = Backbone("bb", 3, 2, 2, 4, rng);
  st->head = PredictionHead("head", 16, 4, 2, rng);
  const double gx = static_cast<double>(rng.uniform_int(0, 8));
  const double gy = static_cast<double>(rng.uniform_int(0, 8));
  const Box gt{gx, gy, gx + 8, gy + 8};
  const int cls = static_cast<int>(rng.uniform_int(0, 1));
  st->props.push_back(Box{gx + 1, gy + 1, gx + 8, gy + 8});  // overlaps the object
  st->props.push_back(Box{static_cast<double>(rng.uniform_int(0, 8)),
                          static_cast<double>(rng.uniform_int(0, 8)), 16.0, 16.0});
  st->props.push_back(Box{0, 0, 6, 6});
  st->targets = match_proposals(st->props, {gt}, {cls}, 0.5);
  auto build = [st](TapeSession& s) {
    Backbone::Maps maps = st->bb.forward(s, s.param(st->img));
    Var pooled = ops::roi_pool(maps.z3, st->props, 2, 2, 0.125);
    Var flat = ops::reshape(pooled, {3, 16});
    PredictionHead::Out out = st->head.forward(s, flat);
    return detection_loss(s, out.cls_logits, out.box_deltas, st->targets).loss;
  };
  std::vector<Parameter*> ps{&st->img};
  st->bb.collect(ps);
  st->head.collect(ps);
  jitter_zero_params(ps, rng);
  return simple_case(build, std::move(ps));
}

FdCase case_train_step(std::uint64_t at) {
  struct St {
    TrainConfig cfg;
    Model model;
    DetectionSample src, tgt;
    StepPlan plan;
    St(const TrainConfig& c, std::uint64_t seed) : cfg(c), model(c.model, seed) {}
  };
  Rng rng = item_rng(21, at);
  TrainConfig cfg;
  cfg.model = ModelConfig{16, 2, 2, 2, 4, 4, 2};
  cfg.proposals.budget = 4;
  cfg.lambda = rng.uniform(0.05, 0.5);
  cfg.eta = rng.uniform(0.0, 6.0);
  cfg.seed_grid_stride = 8;
  auto st = std::make_shared<St>(cfg, rng.next_u64());

  SceneSpec spec;
  spec.image_size = 16;
  spec.num_classes = 2;
  spec.min_objects = 1;
  spec.max_objects = 2;
  spec.min_size = 4;
  spec.max_size = 8;
  DomainTransform src_t, tgt_t;
  shift_preset("default", src_t, tgt_t);
  const std::uint64_t dseed = rng.next_u64();
  Annotation a0 = sample_geometry(spec, dseed, 0);
  st->src.image = render_sample(spec, src_t, a0, dseed, 0, 0);
  st->src.boxes = a0.boxes;
  st->src.classes = a0.classes;
  st->src.domain = 0;
  st->src.annotated = true;
  Annotation a1 = sample_geometry(spec, dseed, 1);
  st->tgt.image = render_sample(spec, tgt_t, a1, dseed, 1, 1);
  st->tgt.domain = 1;
  st->tgt.annotated = false;

  jitter_zero_params(st->model.params(), rng);
  Rng prng(rng.next_u64());
  st->plan = plan_step(st->model, st->src, st->tgt, st->cfg, prng);
  freeze_masks(st->model, st->src, st->tgt, st->plan, st->cfg);

  FdCase c;
  c.run_backward = [st] {
    TapeSession s;
    StepResult r = execute_step(s, st->model, st->src, st->tgt, st->plan, st->cfg);
    s.backward(r.total);
    s.write_grads();
  };
  auto values = [st] {
    return step_forward_values(st->model, st->src, st->tgt, st->plan, st->cfg);
  };
  c.groups.push_back(CaseGroup{st->model.backbone_params(), [st, values] {
                                 StepValues v = values();
                                 return v.det - st->cfg.lambda * v.da_raw;
                               }});
  c.groups.push_back(CaseGroup{st->model.head_params(), [values] {
                                 return values().det;
                               }});
  std::vector<Parameter*> dps;
  st->model.d_local.collect(dps);
  st->model.d_transition.collect(dps);
  st->model.d_global.collect(dps);
  st->model.d_fg.collect(dps);
  st->model.d_bg.collect(dps);
  c.groups.push_back(CaseGroup{std::move(dps), [values] {
                                 return values().da_raw;
                               }});
  return c;
}

struct ItemSpec {
  const char* name;
  FdCase (*make)(std::uint64_t);
  double margin_threshold = -1.0;  // -1: use the caller's
  Index max_entries = 0;           // 0: use the caller's
};

FdItemResult drive(const ItemSpec& spec, const FdOptions& base, int min_valid) {
  FdOptions opt = base;
  if (spec.margin_threshold >= 0) opt.margin_threshold = spec.margin_threshold;
  if (spec.max_entries > 0) opt.max_entries_per_param = spec.max_entries;

  FdItemResult ir;
  ir.name = spec.name;
  const auto t0 = std::chrono::steady_clock::now();
  const int cap = std::max(min_valid * 4, min_valid + 10);
  for (int attempt = 0; attempt < cap && ir.valid < min_valid; ++attempt) {
    ++ir.attempted;
    opt.subsample_seed = static_cast<std::uint64_t>(attempt) * 0x9e3779b9ULL + 1;
    FdCase c = spec.make(static_cast<std::uint64_t>(attempt));
    FdCheckResult r = run_case(c, opt);
    if (!r.valid) continue;
    ++ir.valid;
    if (r.pass) ++ir.passed;
    ir.worst_rel_err = std::max(ir.worst_rel_err, r.max_rel_err);
  }
  ir.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return ir;
}

}  // namespace

std::vector<FdItemResult> run_fd_suite(const FdOptions& opt, int min_valid,
                                       bool include_train_step) {
  const ItemSpec items[] = {
      {"elementwise-arithmetic", case_elementwise},
      {"reductions-and-slicing", case_reductions},
      {"relu", case_relu},
      {"sigmoid", case_sigmoid},
      {"conv2d", case_conv2d},
      {"fully-connected", case_fully_connected},
      {"batch-norm", case_batch_norm},
      {"global-avg-pool", case_avg_pool},
      {"binary-cross-entropy", case_binary_ce},
      {"smooth-l1", case_smooth_l1},
      {"softmax-cross-entropy", case_softmax_ce},
      {"roi-pool", case_roi_pool},
      {"gradient-reversal", case_grl},
      {"local-alignment-loss", case_local_loss, 0.0},
      {"masked-local-alignment-loss", case_masked_local_loss, 0.0},
      {"transition-alignment-loss", case_transition_loss, 0.0},
      {"global-alignment-loss", case_global_loss, 0.0},
      {"image-alignment-combined", case_feat_loss, 0.0},
      {"instance-alignment-loss", case_instance_loss, 0.0},
      {"detection-loss", case_detection_loss, 0.0},
  };
  std::vector<FdItemResult> out;
  for (const ItemSpec& item : items) out.push_back(drive(item, opt, min_valid));
  if (include_train_step) {
    out.push_back(drive(ItemSpec{"train-step-objective", case_train_step, 0.0, 3},
                        opt, min_valid));
  }
  return out;
}

}  // namespace da
