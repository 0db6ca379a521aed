#include "hwm/tabular.hpp"

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>

namespace hwm {
namespace {

// Dirichlet(1) row: exponentials normalised, last entry patched so the sum
// is exactly 1 in double arithmetic.
void random_simplex_row(std::span<double> row, Rng& rng) {
  double total = 0.0;
  for (auto& v : row) {
    v = -std::log(1.0 - rng.uniform());
    total += v;
  }
  double acc = 0.0;
  for (std::size_t i = 0; i + 1 < row.size(); ++i) {
    row[i] /= total;
    acc += row[i];
  }
  row[row.size() - 1] = 1.0 - acc;
  if (row[row.size() - 1] < 0.0) row[row.size() - 1] = 0.0;
}

void check_row(std::span<const double> row, const std::string& what) {
  double s = 0.0;
  for (double v : row) {
    if (v < -1e-12) throw std::invalid_argument(what + ": negative probability");
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument(what + ": row sums to " + std::to_string(s));
}

}  // namespace

void Mdp::validate() const {
  if (n_states <= 0 || n_actions <= 0) throw std::invalid_argument("Mdp: empty state or action set");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("Mdp: gamma must be in [0, 1)");
  if (p.size() != static_cast<std::size_t>(n_actions) * n_states * n_states ||
      r.size() != static_cast<std::size_t>(n_states) * n_actions)
    throw std::invalid_argument("Mdp: array sizes inconsistent with state/action counts");
  for (int a = 0; a < n_actions; ++a)
    for (int s = 0; s < n_states; ++s)
      check_row(std::span(p).subspan((static_cast<std::size_t>(a) * n_states + s) * n_states,
                                     static_cast<std::size_t>(n_states)),
                "Mdp transition (a=" + std::to_string(a) + ", s=" + std::to_string(s) + ")");
  for (double v : r)
    if (v < r_min - 1e-12 || v > r_max + 1e-12)
      throw std::invalid_argument("Mdp: reward outside declared range");
}

Mdp make_random_mdp(int n_states, int n_actions, double gamma, Rng& rng, double r_min, double r_max) {
  Mdp m;
  m.n_states = n_states;
  m.n_actions = n_actions;
  m.gamma = gamma;
  m.r_min = r_min;
  m.r_max = r_max;
  m.p.assign(static_cast<std::size_t>(n_actions) * n_states * n_states, 0.0);
  m.r.assign(static_cast<std::size_t>(n_states) * n_actions, 0.0);
  for (int a = 0; a < n_actions; ++a)
    for (int s = 0; s < n_states; ++s)
      random_simplex_row(std::span(m.p).subspan((static_cast<std::size_t>(a) * n_states + s) * n_states,
                                                static_cast<std::size_t>(n_states)),
                         rng);
  for (auto& v : m.r) v = rng.uniform(r_min, r_max);
  m.validate();
  return m;
}

int FactoredMdp::rel_count() const {
  int c = 1;
  for (std::size_t d = 0; d < exo_cards.size(); ++d)
    if (relevant[d]) c *= exo_cards[d];
  return c;
}

int FactoredMdp::exo_count() const {
  int c = 1;
  for (int card : exo_cards) c *= card;
  return c;
}

int FactoredMdp::rel_index(const std::vector<int>& exo_vals) const {
  int idx = 0, base = 1;
  for (std::size_t d = 0; d < exo_cards.size(); ++d) {
    if (!relevant[d]) continue;
    idx += exo_vals[d] * base;
    base *= exo_cards[d];
  }
  return idx;
}

int FactoredMdp::exo_index(const std::vector<int>& exo_vals) const {
  int idx = 0, base = 1;
  for (std::size_t d = 0; d < exo_cards.size(); ++d) {
    idx += exo_vals[d] * base;
    base *= exo_cards[d];
  }
  return idx;
}

std::vector<int> FactoredMdp::exo_unindex(int code) const {
  std::vector<int> vals(exo_cards.size());
  for (std::size_t d = 0; d < exo_cards.size(); ++d) {
    vals[d] = code % exo_cards[d];
    code /= exo_cards[d];
  }
  return vals;
}

void FactoredMdp::validate() const {
  if (n_endo <= 0 || n_actions <= 0) throw std::invalid_argument("FactoredMdp: empty state or action set");
  if (relevant.size() != exo_cards.size())
    throw std::invalid_argument("FactoredMdp: relevant mask length mismatch");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("FactoredMdp: gamma must be in [0, 1)");
  const int rc = rel_count();
  if (p_endo.size() != static_cast<std::size_t>(n_endo) * rc * n_actions * n_endo)
    throw std::invalid_argument("FactoredMdp: p_endo size mismatch");
  if (rew.size() != static_cast<std::size_t>(n_endo) * rc * n_actions)
    throw std::invalid_argument("FactoredMdp: reward size mismatch");
  if (p_exo.size() != exo_cards.size()) throw std::invalid_argument("FactoredMdp: p_exo size mismatch");
  for (int s = 0; s < n_endo; ++s)
    for (int rel = 0; rel < rc; ++rel)
      for (int a = 0; a < n_actions; ++a)
        check_row(std::span(p_endo).subspan(
                      ((static_cast<std::size_t>(s) * rc + rel) * n_actions + a) * n_endo,
                      static_cast<std::size_t>(n_endo)),
                  "FactoredMdp endo transition");
  for (std::size_t d = 0; d < exo_cards.size(); ++d) {
    const int card = exo_cards[d];
    if (p_exo[d].size() != static_cast<std::size_t>(card) * card)
      throw std::invalid_argument("FactoredMdp: exo chain " + std::to_string(d) + " size mismatch");
    for (int v = 0; v < card; ++v)
      check_row(std::span(p_exo[d]).subspan(static_cast<std::size_t>(v) * card,
                                            static_cast<std::size_t>(card)),
                "FactoredMdp exo chain " + std::to_string(d));
  }
  for (double v : rew)
    if (v < r_min - 1e-12 || v > r_max + 1e-12)
      throw std::invalid_argument("FactoredMdp: reward outside declared range");
}

FactoredMdp make_factored_mdp(const FactoredSpec& spec, Rng& rng) {
  if (spec.relevant.size() != spec.exo_cards.size())
    throw std::invalid_argument("FactoredSpec: relevant mask must match exo_cards length");
  FactoredMdp m;
  m.n_endo = spec.n_endo;
  m.n_actions = spec.n_actions;
  m.exo_cards = spec.exo_cards;
  m.relevant = spec.relevant;
  m.gamma = spec.gamma;
  m.r_min = spec.r_min;
  m.r_max = spec.r_max;
  const int rc = m.rel_count();
  m.p_endo.assign(static_cast<std::size_t>(m.n_endo) * rc * m.n_actions * m.n_endo, 0.0);
  m.rew.assign(static_cast<std::size_t>(m.n_endo) * rc * m.n_actions, 0.0);
  for (int s = 0; s < m.n_endo; ++s)
    for (int rel = 0; rel < rc; ++rel)
      for (int a = 0; a < m.n_actions; ++a) {
        random_simplex_row(
            std::span(m.p_endo).subspan(((static_cast<std::size_t>(s) * rc + rel) * m.n_actions + a) * m.n_endo,
                                        static_cast<std::size_t>(m.n_endo)),
            rng);
        m.rew[(static_cast<std::size_t>(s) * rc + rel) * m.n_actions + a] =
            rng.uniform(spec.r_min, spec.r_max);
      }
  m.p_exo.resize(m.exo_cards.size());
  for (std::size_t d = 0; d < m.exo_cards.size(); ++d) {
    const int card = m.exo_cards[d];
    m.p_exo[d].assign(static_cast<std::size_t>(card) * card, 0.0);
    for (int v = 0; v < card; ++v)
      random_simplex_row(std::span(m.p_exo[d]).subspan(static_cast<std::size_t>(v) * card,
                                                       static_cast<std::size_t>(card)),
                         rng);
  }
  m.validate();
  return m;
}

TabularState tabular_step(const FactoredMdp& mdp, const TabularState& st, int action, Rng& rng,
                          double* reward_out) {
  if (action < 0 || action >= mdp.n_actions) throw std::invalid_argument("tabular_step: bad action");
  if (st.s < 0 || st.s >= mdp.n_endo || st.exo.size() != mdp.exo_cards.size())
    throw std::invalid_argument("tabular_step: bad state");
  const int rel = mdp.rel_index(st.exo);
  if (reward_out) *reward_out = mdp.reward_at(st.s, rel, action);
  TabularState next;
  const std::size_t row =
      ((static_cast<std::size_t>(st.s) * mdp.rel_count() + rel) * mdp.n_actions + action) *
      mdp.n_endo;
  next.s = rng.categorical(std::span<const double>(mdp.p_endo.data() + row,
                                                   static_cast<std::size_t>(mdp.n_endo)));
  next.exo.resize(st.exo.size());
  for (std::size_t d = 0; d < st.exo.size(); ++d) {
    const int card = mdp.exo_cards[d];
    next.exo[d] = rng.categorical(std::span<const double>(
        mdp.p_exo[d].data() + static_cast<std::size_t>(st.exo[d]) * card, static_cast<std::size_t>(card)));
  }
  return next;
}

Mdp flatten_full(const FactoredMdp& mdp) {
  const int ec = mdp.exo_count();
  const int n = mdp.n_endo * ec;
  Mdp out;
  out.n_states = n;
  out.n_actions = mdp.n_actions;
  out.gamma = mdp.gamma;
  out.r_min = mdp.r_min;
  out.r_max = mdp.r_max;
  out.p.assign(static_cast<std::size_t>(mdp.n_actions) * n * n, 0.0);
  out.r.assign(static_cast<std::size_t>(n) * mdp.n_actions, 0.0);
  // precompute exo assignment tables
  std::vector<std::vector<int>> exo_vals(static_cast<std::size_t>(ec));
  for (int e = 0; e < ec; ++e) exo_vals[static_cast<std::size_t>(e)] = mdp.exo_unindex(e);
  for (int e = 0; e < ec; ++e) {
    const auto& vals = exo_vals[static_cast<std::size_t>(e)];
    const int rel = mdp.rel_index(vals);
    for (int s = 0; s < mdp.n_endo; ++s) {
      const int flat = s + mdp.n_endo * e;
      for (int a = 0; a < mdp.n_actions; ++a) {
        out.reward(flat, a) = mdp.reward_at(s, rel, a);
        for (int e2 = 0; e2 < ec; ++e2) {
          const auto& vals2 = exo_vals[static_cast<std::size_t>(e2)];
          double pe = 1.0;
          for (std::size_t d = 0; d < vals.size(); ++d) {
            const int card = mdp.exo_cards[d];
            pe *= mdp.p_exo[d][static_cast<std::size_t>(vals[d]) * card + vals2[d]];
          }
          if (pe == 0.0) continue;
          for (int s2 = 0; s2 < mdp.n_endo; ++s2)
            out.prob(a, flat, s2 + mdp.n_endo * e2) = mdp.endo_prob(s, rel, a, s2) * pe;
        }
      }
    }
  }
  return out;
}

int FactorLayout::rel_count() const {
  int c = 1;
  for (std::size_t d = 0; d < exo_cards.size(); ++d)
    if (relevant[d]) c *= exo_cards[d];
  return c;
}

int FactorLayout::exo_count() const {
  int c = 1;
  for (int card : exo_cards) c *= card;
  return c;
}

int FactorLayout::rel_index(const std::vector<int>& exo_vals) const {
  int idx = 0, base = 1;
  for (std::size_t d = 0; d < exo_cards.size(); ++d) {
    if (!relevant[d]) continue;
    idx += exo_vals[d] * base;
    base *= exo_cards[d];
  }
  return idx;
}

int FactorLayout::exo_index(const std::vector<int>& exo_vals) const {
  int idx = 0, base = 1;
  for (std::size_t d = 0; d < exo_cards.size(); ++d) {
    idx += exo_vals[d] * base;
    base *= exo_cards[d];
  }
  return idx;
}

std::vector<int> FactorLayout::exo_unindex(int code) const {
  std::vector<int> vals(exo_cards.size());
  for (std::size_t d = 0; d < exo_cards.size(); ++d) {
    vals[d] = code % exo_cards[d];
    code /= exo_cards[d];
  }
  return vals;
}

void FactorLayout::validate() const {
  if (n_endo <= 0) throw std::invalid_argument("FactorLayout: n_endo must be positive");
  if (relevant.size() != exo_cards.size())
    throw std::invalid_argument("FactorLayout: relevant mask length mismatch");
  for (int card : exo_cards)
    if (card <= 0) throw std::invalid_argument("FactorLayout: exo cardinalities must be positive");
}

FactorLayout layout_of(const FactoredMdp& mdp) {
  return FactorLayout{mdp.n_endo, mdp.exo_cards, mdp.relevant};
}

Policy Policy::deterministic(const std::vector<int>& actions, int n_actions) {
  Policy pi;
  pi.n_states = static_cast<int>(actions.size());
  pi.n_actions = n_actions;
  pi.probs.assign(static_cast<std::size_t>(pi.n_states) * n_actions, 0.0);
  for (int s = 0; s < pi.n_states; ++s) {
    if (actions[s] < 0 || actions[s] >= n_actions)
      throw std::invalid_argument("Policy::deterministic: action out of range");
    pi.probs[static_cast<std::size_t>(s) * n_actions + actions[s]] = 1.0;
  }
  return pi;
}

Policy Policy::uniform(int n_states, int n_actions) {
  Policy pi;
  pi.n_states = n_states;
  pi.n_actions = n_actions;
  pi.probs.assign(static_cast<std::size_t>(n_states) * n_actions, 1.0 / n_actions);
  return pi;
}

void Policy::validate(const Mdp& mdp) const {
  if (n_states != mdp.n_states || n_actions != mdp.n_actions)
    throw std::invalid_argument("policy shape does not match the MDP");
  for (int s = 0; s < n_states; ++s) {
    double acc = 0.0;
    for (int a = 0; a < n_actions; ++a) {
      const double v = prob_at(s, a);
      if (v < 0.0) throw std::invalid_argument("policy has a negative probability");
      acc += v;
    }
    if (std::abs(acc - 1.0) > 1e-9) throw std::invalid_argument("policy row does not sum to 1");
  }
}

InducedChain induced_chain(const Mdp& mdp, const Policy& pi) {
  pi.validate(mdp);
  InducedChain ch;
  ch.n_states = mdp.n_states;
  ch.p.assign(static_cast<std::size_t>(mdp.n_states) * mdp.n_states, 0.0);
  ch.r.assign(mdp.n_states, 0.0);
  for (int s = 0; s < mdp.n_states; ++s) {
    for (int a = 0; a < mdp.n_actions; ++a) {
      const double w = pi.prob_at(s, a);
      if (w == 0.0) continue;
      ch.r[s] += w * mdp.reward(s, a);
      for (int s2 = 0; s2 < mdp.n_states; ++s2)
        ch.p[static_cast<std::size_t>(s) * mdp.n_states + s2] += w * mdp.prob(a, s, s2);
    }
  }
  return ch;
}

}  // namespace hwm
