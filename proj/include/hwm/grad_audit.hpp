#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hwm/bisim.hpp"
#include "hwm/nn.hpp"
#include "hwm/world_model.hpp"

// Central-difference audits of the reverse-mode gradients, at 64-bit.
//
// The world-model losses contain stop-gradient sites (the EMA twin, the
// reconstruction target, the similarity target, the asymmetric KL copies).
// A naive finite difference of the loss value moves those targets along with
// the parameters and therefore measures the wrong derivative. The audit here
// evaluates the function the tape actually differentiates: targets and twin
// outputs are captured once at the center point and held fixed while each
// parameter entry is displaced. The center evaluation doubles as a value
// consistency check against the production loss.

namespace hwm {

struct AuditRow {
  std::string name;
  std::size_t checked = 0;
  double max_rel_err = 0;
  bool passed = false;
};

struct GradAuditReport {
  std::vector<AuditRow> rows;
  double worst_rel_err = 0;
  double center_consistency = 0;  // |frozen-target eval - production loss| at center
  bool online_all_touched = false; // every trained parameter received a gradient buffer
  bool ema_grad_free = false;
  bool targets_grad_free = false;  // twin stacks and the similarity-target stack
  bool passed = false;
};

namespace detail {

inline double rel_err(double fd, double ad) {
  const double den = std::max({1e-6, std::abs(fd), std::abs(ad)});
  return std::abs(fd - ad) / den;
}

inline double kl_value(std::span<const double> q, std::span<const double> p) {
  double acc = 0;
  for (std::size_t i = 0; i < q.size(); ++i)
    if (q[i] > 0) acc += q[i] * (std::log(q[i]) - std::log(p[i]));
  return acc;
}

}  // namespace detail

// Finite-difference audit of one scalar-valued graph. `build` must rebuild
// the loss from the leaves on every call; leaves sit away from kinks.
template <typename Build>
AuditRow fd_audit(const std::string& name, Build build, std::vector<Tensor<double>*> leaves,
                  double h = 1e-5, double tol = 1e-4) {
  AuditRow row;
  row.name = name;
  for (auto* l : leaves) l->clear_grad();
  build().backward();
  std::vector<std::vector<double>> tape;
  tape.reserve(leaves.size());
  for (auto* l : leaves)
    tape.push_back(l->has_grad() ? l->grad() : std::vector<double>(l->size(), 0.0));
  NoGradGuard ng;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto* l = leaves[li];
    for (std::size_t i = 0; i < l->size(); ++i) {
      const double orig = l->raw_value()[i];
      l->raw_value()[i] = orig + h;
      const double fp = build().item();
      l->raw_value()[i] = orig - h;
      const double fm = build().item();
      l->raw_value()[i] = orig;
      row.max_rel_err = std::max(row.max_rel_err, detail::rel_err((fp - fm) / (2.0 * h), tape[li][i]));
      ++row.checked;
    }
  }
  for (auto* l : leaves) l->clear_grad();
  row.passed = row.max_rel_err <= tol;
  return row;
}

// One row per primitive tensor operation and layer, each squashed to a
// scalar through mean(square(.)). Straight-through sampling is excluded: its
// backward is a surrogate by definition, not the derivative of its forward.
inline std::vector<AuditRow> audit_tensor_ops(double h = 1e-5, double tol = 1e-4) {
  std::vector<AuditRow> rows;
  Rng rng(417);
  auto leaf = [&](Shape s, double lo, double hi) {
    std::vector<double> v(numel(s));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor<double>::leaf(std::move(s), std::move(v));
  };
  auto sq = [](Tensor<double> t) { return mean_all(square(std::move(t))); };

  {
    auto a = leaf({3, 4}, -1.5, 1.5), b = leaf({3, 4}, -1.5, 1.5);
    rows.push_back(fd_audit("add", [&] { return sq(add(a, b)); }, {&a, &b}, h, tol));
    rows.push_back(fd_audit("sub", [&] { return sq(sub(a, b)); }, {&a, &b}, h, tol));
    rows.push_back(fd_audit("mul", [&] { return sq(mul(a, b)); }, {&a, &b}, h, tol));
  }
  {
    auto a = leaf({3, 4}, 0.5, 1.5), b = leaf({3, 4}, 0.5, 1.5);
    rows.push_back(fd_audit("div", [&] { return sq(div(a, b)); }, {&a, &b}, h, tol));
    rows.push_back(fd_audit("log", [&] { return sq(log_t(a)); }, {&a}, h, tol));
    rows.push_back(fd_audit("sqrt", [&] { return sq(sqrt_t(a)); }, {&a}, h, tol));
    rows.push_back(fd_audit("abs", [&] { return sq(abs_t(a)); }, {&a}, h, tol));
  }
  {
    auto a = leaf({3, 4}, -1.5, 1.5);
    auto b = leaf({3, 4}, 2.0, 3.0);  // separated ranges keep maximum() tie-free
    rows.push_back(fd_audit("maximum", [&] { return sq(maximum(a, b)); }, {&a, &b}, h, tol));
    rows.push_back(fd_audit("scale", [&] { return sq(scale(a, 1.7)); }, {&a}, h, tol));
    rows.push_back(fd_audit("add_const", [&] { return sq(add_const(a, 0.3)); }, {&a}, h, tol));
    rows.push_back(fd_audit("max_const", [&] { return sq(max_const(b, 2.5)); }, {&b}, h, tol));
    rows.push_back(fd_audit("exp", [&] { return sq(exp_t(a)); }, {&a}, h, tol));
    rows.push_back(fd_audit("square", [&] { return sq(square(a)); }, {&a}, h, tol));
    rows.push_back(fd_audit("tanh", [&] { return sq(tanh_t(a)); }, {&a}, h, tol));
    rows.push_back(fd_audit("sigmoid", [&] { return sq(sigmoid(a)); }, {&a}, h, tol));
    rows.push_back(fd_audit("silu", [&] { return sq(silu(a)); }, {&a}, h, tol));
    rows.push_back(fd_audit("softplus", [&] { return sq(softplus(a)); }, {&a}, h, tol));
    rows.push_back(fd_audit("symexp", [&] { return sq(symexp_t(b)); }, {&b}, h, tol));
  }
  {
    auto a = leaf({3, 5}, -1.0, 1.0), b = leaf({5, 2}, -1.0, 1.0);
    rows.push_back(fd_audit("matmul", [&] { return sq(matmul(a, b)); }, {&a, &b}, h, tol));
  }
  {
    auto a = leaf({4, 3}, -1.5, 1.5);
    rows.push_back(fd_audit("sum_all", [&] { return square(sum_all(a)); }, {&a}, h, tol));
    rows.push_back(fd_audit("mean_all", [&] { return square(mean_all(a)); }, {&a}, h, tol));
    rows.push_back(fd_audit("sum_last", [&] { return sq(sum_last(a)); }, {&a}, h, tol));
    rows.push_back(fd_audit("mean_last", [&] { return sq(mean_last(a)); }, {&a}, h, tol));
    rows.push_back(fd_audit("softmax", [&] { return sq(softmax_last(a)); }, {&a}, h, tol));
    rows.push_back(fd_audit("log_softmax", [&] { return sq(log_softmax_last(a)); }, {&a}, h, tol));
    rows.push_back(fd_audit("l2_normalize", [&] { return sq(l2_normalize_last(a, 1e-8)); }, {&a}, h, tol));
    rows.push_back(
        fd_audit("unimix", [&] { return sq(unimix_probs(a, 0.01)); }, {&a}, h, tol));
    rows.push_back(fd_audit("entropy", [&] { return sq(entropy_rows(a)); }, {&a}, h, tol));
  }
  {
    auto g = leaf({3}, 0.5, 1.5), b2 = leaf({3}, -0.5, 0.5), x = leaf({4, 3}, -1.5, 1.5);
    rows.push_back(fd_audit("layer_norm",
                            [&] { return sq(layer_norm_affine(x, g, b2, 1e-5)); }, {&x, &g, &b2}, h,
                            tol));
  }
  {
    auto x = leaf({4, 6}, -1.5, 1.5);
    rows.push_back(fd_audit("shape_ops",
                            [&] {
                              auto r = reshape(x, {8, 3});
                              std::vector<Tensor<double>> halves = {slice_rows(r, 0, 4),
                                                                    slice_rows(r, 4, 4)};
                              auto s = concat_rows(halves);
                              auto c = concat_cols(slice_cols(s, 0, 2), slice_cols(s, 1, 2));
                              return sq(gather_rows(c, {3, 0, 7, 2}));
                            },
                            {&x}, h, tol));
  }
  {
    auto q = leaf({3, 4}, 0.2, 1.0), p = leaf({3, 4}, 0.2, 1.0);  // unnormalized is fine for the op
    rows.push_back(fd_audit("kl_rows", [&] { return mean_all(kl_rows(q, p)); }, {&q, &p}, h, tol));
  }
  {
    auto lo = leaf({4, 2}, -1.5, 1.5);
    std::vector<double> tv = {1.0, 0.0, 0.3, 0.7, 0.9, 0.1, 0.0, 1.0};
    auto tgt = Tensor<double>::from_vec({4, 2}, std::move(tv));
    rows.push_back(
        fd_audit("bce_logits", [&] { return bce_with_logits_mean(lo, tgt); }, {&lo}, h, tol));
    TwoHotBins bins;
    auto rl = leaf({3, static_cast<std::size_t>(bins.n)}, -1.0, 1.0);
    long long clamped = 0;
    auto rt = bins.encode_batch<double>({0.3, -1.2, 2.5}, clamped);
    rows.push_back(fd_audit("twohot_nll", [&] { return bins.nll(rl, rt); }, {&rl}, h, tol));
  }
  {
    Rng wrng(99);
    LayerNorm<double> ln("a.ln", 4);
    Linear<double> lin("a.lin", 3, 4, wrng);
    DenseBlock<double> blk("a.blk", 3, 4, wrng);
    Mlp<double> mlp("a.mlp", 3, 5, 2, 2, wrng);
    GruCell<double> cell("a.gru", 3, 4, wrng);
    auto x = leaf({2, 3}, -1.5, 1.5);
    auto hh = leaf({2, 4}, -1.5, 1.5);
    rows.push_back(fd_audit("linear", [&] { return sq(lin.forward(x)); },
                            {&x, &lin.w.value, &lin.b.value}, h, tol));
    rows.push_back(fd_audit("layer_norm_block", [&] { return sq(ln.forward(hh)); },
                            {&hh, &ln.gain.value, &ln.bias.value}, h, tol));
    rows.push_back(fd_audit("dense_block", [&] { return sq(blk.forward(x)); },
                            {&x, &blk.lin.w.value, &blk.ln.gain.value, &blk.ln.bias.value}, h, tol));
    std::vector<Tensor<double>*> mlp_leaves = {&x};
    std::vector<Parameter<double>*> mp;
    mlp.collect(mp);
    for (auto* p : mp) mlp_leaves.push_back(&p->value);
    rows.push_back(fd_audit("mlp", [&] { return sq(mlp.forward(x)); }, mlp_leaves, h, tol));
    std::vector<Tensor<double>*> gru_leaves = {&x, &hh};
    std::vector<Parameter<double>*> gp;
    cell.collect(gp);
    for (auto* p : gp) gru_leaves.push_back(&p->value);
    rows.push_back(
        fd_audit("gru_cell", [&] { return sq(cell.forward(hh, x)); }, gru_leaves, h, tol));
  }
  {
    auto a = leaf({4, 5}, -1.5, 1.5), b = leaf({4, 5}, -1.5, 1.5);
    rows.push_back(fd_audit("cosine_distance",
                            [&] { return sq(cosine_distance_rows(a, b)); }, {&a, &b}, h, tol));
  }
  return rows;
}

// Frozen targets captured at the center point of the world-model audit.
struct FrozenTargets {
  std::vector<double> post_probs, prior_probs;     // asymmetric-KL copies
  std::vector<double> raw_state;                   // twin posterior states
  std::vector<double> rec_target;                  // projected+normalized twin states
  std::vector<double> sim_target;                  // reward gap + discounted next-pair distance
  std::vector<int> cur_i, cur_j;                   // similarity pairing
};

namespace detail {

inline std::span<const double> row_of(const std::vector<double>& flat, std::size_t r, std::size_t d) {
  return {flat.data() + r * d, d};
}

// The production losses evaluated with every stop-gradient site pinned to
// `frozen`; only the trained branch is live. This is the function whose
// derivative the tape reports.
inline double frozen_loss(const WorldModel<double>& wm, const SequenceBatch<double>& seq,
                          const FrozenTargets& frozen, std::uint64_t mask_seed,
                          std::uint64_t raw_seed) {
  NoGradGuard ng;
  Rng mr(mask_seed), rr(raw_seed);
  Rollout<double> roll = wm.rollout(seq, {mr, rr}, SampleMode::soft);
  const WorldModelConfig& cfg = wm.cfg;
  const std::size_t G = cfg.groups, C = cfg.classes, S = cfg.state_dim();
  const std::size_t n = roll.batch * roll.time;
  // dynamics: each direction pairs one live side with its frozen copy
  double l_dyn = 0;
  {
    double acc1 = 0, acc2 = 0;
    const auto& live_post = roll.post_probs.value();
    const auto& live_prior = roll.prior_probs.value();
    for (std::size_t r = 0; r < n; ++r) {
      double k1 = 0, k2 = 0;
      for (std::size_t g = 0; g < G; ++g) {
        const std::size_t row = r * G + g;
        k1 += kl_value(row_of(frozen.post_probs, row, C), {live_prior.data() + row * C, C});
        k2 += kl_value({live_post.data() + row * C, C}, row_of(frozen.prior_probs, row, C));
      }
      acc1 += std::max(cfg.free_nats, k1);
      acc2 += std::max(cfg.free_nats, k2);
    }
    l_dyn = cfg.beta_dyn * acc1 / static_cast<double>(n) + cfg.beta_rep * acc2 / static_cast<double>(n);
  }
  // reconstruction: live projection of the trained state vs the frozen target
  double l_rec = 0;
  {
    Tensor<double> pm = l2_normalize_last(wm.proj.forward(roll.state), 1e-8);
    const auto& pv = pm.value();
    for (std::size_t i = 0; i < pv.size(); ++i) {
      const double d = pv[i] - frozen.rec_target[i];
      l_rec += d * d;
    }
    l_rec /= static_cast<double>(pv.size());
  }
  // similarity: live current pair vs the frozen behavioral target
  double l_sim = 0;
  if (!frozen.cur_i.empty()) {
    const auto& sv = roll.state.value();
    const bool cross = cfg.sim_pairing == SimPairing::cross_branch;
    for (std::size_t k = 0; k < frozen.cur_i.size(); ++k) {
      const auto i = static_cast<std::size_t>(frozen.cur_i[k]);
      const auto j = static_cast<std::size_t>(frozen.cur_j[k]);
      const std::span<const double> si =
          cross ? row_of(frozen.raw_state, i, S) : std::span<const double>{sv.data() + i * S, S};
      const double d_cur =
          cosine(si, {sv.data() + j * S, S}, CosineMode::distance);
      const double resid = d_cur - frozen.sim_target[k];
      l_sim += resid * resid;
    }
    l_sim /= static_cast<double>(frozen.cur_i.size());
  }
  const double l_pred = wm.pred_loss(roll.state, seq.rewards, seq.continues).value.item();
  return l_dyn + l_rec + l_sim + l_pred;
}

}  // namespace detail

// End-to-end audit of the four losses through a full rollout. Uses soft
// sampling so the graph is smooth; seeds are pinned so every evaluation sees
// the same pairing. Audits every trained parameter entry and checks the
// gradient firewall on the frozen side.
inline GradAuditReport audit_world_model(WorldModel<double>& wm, const SequenceBatch<double>& seq,
                                         double h = 1e-5, double tol = 1e-4) {
  constexpr std::uint64_t kMaskSeed = 11, kRawSeed = 12, kPairSeed = 13;
  GradAuditReport rep;
  const WorldModelConfig& cfg = wm.cfg;
  // center pass through the production path
  Rng mr(kMaskSeed), rr(kRawSeed), pr(kPairSeed);
  WmLoss<double> center = wm.total_loss(seq, {mr, rr}, pr, SampleMode::soft);
  center.value.backward();

  FrozenTargets frozen;
  frozen.post_probs = center.roll.post_probs.value();
  frozen.prior_probs = center.roll.prior_probs.value();
  frozen.raw_state = center.roll.raw_state.value();
  {
    NoGradGuard ng;
    frozen.rec_target = l2_normalize_last(wm.proj.forward(center.roll.raw_state), 1e-8).value();
  }
  {
    // replay the pairing stream the center pass consumed
    const std::size_t B = center.roll.batch, Tn = center.roll.time, S = cfg.state_dim();
    Rng pair_rng(kPairSeed);
    const bool cross = cfg.sim_pairing == SimPairing::cross_branch;
    const auto& prior_v = center.roll.prior_state.value();
    const auto& raw_prior_v = center.roll.raw_prior_state.value();
    if (B >= 2 && Tn >= 2) {
      for (std::size_t t = 0; t + 1 < Tn; ++t) {
        const std::vector<int> perm = pair_rng.derangement(static_cast<int>(B));
        for (std::size_t b = 0; b < B; ++b) {
          const auto j = static_cast<std::size_t>(perm[b]);
          const std::size_t i_cur = t * B + b, j_cur = t * B + j;
          const std::size_t i_nxt = (t + 1) * B + b, j_nxt = (t + 1) * B + j;
          frozen.cur_i.push_back(static_cast<int>(i_cur));
          frozen.cur_j.push_back(static_cast<int>(j_cur));
          const double gap = std::abs(seq.rewards[i_cur] - seq.rewards[j_cur]);
          const std::span<const double> nj =
              cross ? std::span<const double>{prior_v.data() + j_nxt * S, S}
                    : std::span<const double>{raw_prior_v.data() + j_nxt * S, S};
          const double d_next =
              cosine({raw_prior_v.data() + i_nxt * S, S}, nj, CosineMode::distance);
          frozen.sim_target.push_back(gap + cfg.sim_gamma * d_next);
        }
      }
    }
  }

  const double center_frozen = detail::frozen_loss(wm, seq, frozen, kMaskSeed, kRawSeed);
  rep.center_consistency = std::abs(center_frozen - center.value.item());

  // firewall checks before the sweep
  rep.online_all_touched = true;
  for (auto* p : wm.online_params())
    if (!p->value.has_grad()) rep.online_all_touched = false;
  rep.ema_grad_free = true;
  for (auto* p : wm.ema_params())
    if (p->value.has_grad()) rep.ema_grad_free = false;
  rep.targets_grad_free = !center.roll.raw_state.has_grad() &&
                          !center.roll.raw_prior_state.has_grad() &&
                          !center.roll.prior_state.has_grad() &&
                          !center.roll.raw_post_probs.has_grad();

  for (auto* p : wm.online_params()) {
    AuditRow row;
    row.name = p->name;
    const std::vector<double> tape =
        p->value.has_grad() ? p->value.grad() : std::vector<double>(p->value.size(), 0.0);
    auto& vals = p->value.raw_value();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double fp = detail::frozen_loss(wm, seq, frozen, kMaskSeed, kRawSeed);
      vals[i] = orig - h;
      const double fm = detail::frozen_loss(wm, seq, frozen, kMaskSeed, kRawSeed);
      vals[i] = orig;
      row.max_rel_err = std::max(row.max_rel_err, detail::rel_err((fp - fm) / (2.0 * h), tape[i]));
      ++row.checked;
    }
    row.passed = row.max_rel_err <= tol;
    rep.worst_rel_err = std::max(rep.worst_rel_err, row.max_rel_err);
    rep.rows.push_back(std::move(row));
  }
  for (auto* p : wm.online_params()) p->value.clear_grad();

  rep.passed = rep.online_all_touched && rep.ema_grad_free && rep.targets_grad_free &&
               rep.center_consistency <= 1e-9 && rep.worst_rel_err <= tol;
  return rep;
}

}  // namespace hwm
