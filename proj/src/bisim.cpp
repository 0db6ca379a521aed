#include "hwm/bisim.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace hwm {

namespace {

std::atomic<std::uint64_t>& guard_counter() {
  static std::atomic<std::uint64_t> c{0};
  return c;
}

constexpr double kMassEps = 1e-15;

// Throws unless v is a distribution within 1e-9; returns its exact sum so the
// caller can renormalize.
double check_dist(std::span<const double> v) {
  double acc = 0.0;
  for (double x : v) {
    if (x < -1e-12) throw std::invalid_argument("distribution has a negative entry");
    acc += x;
  }
  if (std::abs(acc - 1.0) > 1e-9)
    throw std::invalid_argument("distribution is not normalized within 1e-9");
  return acc;
}

}  // namespace

double cosine(std::span<const double> a, std::span<const double> b, CosineMode mode, double eps) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine: length mismatch");
  if (a.empty()) throw std::invalid_argument("cosine: empty vectors");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < eps || nb < eps) guard_counter().fetch_add(1, std::memory_order_relaxed);
  const double sim = dot / (std::max(na, eps) * std::max(nb, eps));
  return mode == CosineMode::similarity ? sim : 1.0 - sim;
}

std::uint64_t cosine_guard_hits() { return guard_counter().load(std::memory_order_relaxed); }

void reset_cosine_guard_hits() { guard_counter().store(0, std::memory_order_relaxed); }

double behavioral_target(double r_i, double r_j, double next_d, double gamma) {
  if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("gamma must lie in [0, 1)");
  return std::abs(r_i - r_j) + gamma * next_d;
}

MetricTable MetricTable::zeros(int n) {
  MetricTable m;
  m.n = n;
  m.d.assign(static_cast<std::size_t>(n) * n, 0.0);
  return m;
}

MetricTable MetricTable::constant(int n, double c) {
  MetricTable m = zeros(n);
  for (int u = 0; u < n; ++u)
    for (int v = 0; v < n; ++v)
      if (u != v) m.at(u, v) = c;
  return m;
}

double MetricTable::diameter() const {
  double mx = 0.0;
  for (double x : d) mx = std::max(mx, x);
  return mx;
}

// Successive shortest paths on the dense bipartite transport graph. Node
// layout: 0..n−1 supplies, n..2n−1 demands, 2n source, 2n+1 sink. Potentials
// keep every residual reduced cost non-negative, so Dijkstra stays valid and
// the final potentials double as an optimal dual certificate.
TransportPlan wasserstein1_full(const MetricTable& d, std::span<const double> p,
                                std::span<const double> q) {
  const int n = d.n;
  if (static_cast<int>(p.size()) != n || static_cast<int>(q.size()) != n)
    throw std::invalid_argument("wasserstein1: size mismatch with the cost table");
  if (n > 64) throw std::invalid_argument("wasserstein1: supports above 64 states not supported");
  const double ps = check_dist(p), qs = check_dist(q);

  std::vector<double> supply(p.begin(), p.end()), demand(q.begin(), q.end());
  for (auto& x : supply) x = std::max(0.0, x / ps);
  for (auto& x : demand) x = std::max(0.0, x / qs);

  const int n_nodes = 2 * n + 2, src = 2 * n, snk = 2 * n + 1;
  std::vector<double> flow(static_cast<std::size_t>(n) * n, 0.0);
  std::vector<double> pot(n_nodes, 0.0), dist(n_nodes);
  std::vector<int> parent(n_nodes);
  std::vector<char> done(n_nodes);
  const double inf = std::numeric_limits<double>::infinity();

  double remaining = 0.0;
  for (double x : demand) remaining += x;

  for (int round = 0; round < 4 * n + 8 && remaining > 1e-14; ++round) {
    std::fill(dist.begin(), dist.end(), inf);
    std::fill(done.begin(), done.end(), 0);
    std::fill(parent.begin(), parent.end(), -1);
    dist[src] = 0.0;
    for (;;) {
      int u = -1;
      for (int v = 0; v < n_nodes; ++v)
        if (!done[v] && dist[v] < inf && (u < 0 || dist[v] < dist[u])) u = v;
      if (u < 0) break;
      done[u] = 1;
      const double du = dist[u];
      auto relax = [&](int v, double cost) {
        const double nd = du + cost + pot[u] - pot[v];
        if (nd < dist[v] - 1e-15) {
          dist[v] = nd;
          parent[v] = u;
        }
      };
      if (u == src) {
        for (int i = 0; i < n; ++i)
          if (supply[i] > kMassEps) relax(i, 0.0);
      } else if (u < n) {
        for (int j = 0; j < n; ++j) relax(n + j, d.at(u, j));
      } else if (u < 2 * n) {
        const int j = u - n;
        if (demand[j] > kMassEps) relax(snk, 0.0);
        for (int i = 0; i < n; ++i)
          if (flow[static_cast<std::size_t>(i) * n + j] > kMassEps) relax(i, -d.at(i, j));
      }
    }
    if (dist[snk] == inf) break;
    for (int v = 0; v < n_nodes; ++v) pot[v] += (dist[v] < inf ? dist[v] : dist[snk]);

    // bottleneck along the source→sink path, then push
    double push = remaining;
    for (int v = snk; parent[v] >= 0; v = parent[v]) {
      const int u = parent[v];
      if (u == src) push = std::min(push, supply[v]);
      else if (v == snk) push = std::min(push, demand[u - n]);
      else if (u >= n && v < n) push = std::min(push, flow[static_cast<std::size_t>(v) * n + (u - n)]);
    }
    for (int v = snk; parent[v] >= 0; v = parent[v]) {
      const int u = parent[v];
      if (u == src) supply[v] -= push;
      else if (v == snk) demand[u - n] -= push;
      else if (u < n) flow[static_cast<std::size_t>(u) * n + (v - n)] += push;
      else flow[static_cast<std::size_t>(v) * n + (u - n)] -= push;
    }
    remaining -= push;
  }

  TransportPlan out;
  out.plan = std::move(flow);
  out.u.resize(n);
  out.v.resize(n);
  for (int i = 0; i < n; ++i) out.u[i] = -pot[i];
  for (int j = 0; j < n; ++j) out.v[j] = pot[n + j];
  double cost = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) cost += out.plan[static_cast<std::size_t>(i) * n + j] * d.at(i, j);
  out.cost = cost;
  return out;
}

double wasserstein1(const MetricTable& d, std::span<const double> p, std::span<const double> q) {
  return wasserstein1_full(d, p, q).cost;
}

double independent_cost(const MetricTable& d, std::span<const double> p,
                        std::span<const double> q) {
  const int n = d.n;
  if (static_cast<int>(p.size()) != n || static_cast<int>(q.size()) != n)
    throw std::invalid_argument("independent_cost: size mismatch with the cost table");
  check_dist(p);
  check_dist(q);
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    if (p[i] <= 0.0) continue;
    double row = 0.0;
    for (int j = 0; j < n; ++j) row += q[j] * d.at(i, j);
    acc += p[i] * row;
  }
  return acc;
}

MetricTable tabular_bisim_fixed_point(const Mdp& mdp, const Policy& pi, double gamma, double tol,
                                      int max_iters, Coupling coupling, const MetricTable* init) {
  if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("gamma must lie in [0, 1)");
  const InducedChain ch = induced_chain(mdp, pi);
  const int n = ch.n_states;

  MetricTable cur = init ? *init : MetricTable::zeros(n);
  if (cur.n != n) throw std::invalid_argument("init table size mismatch");
  for (int u = 0; u < n; ++u) cur.at(u, u) = 0.0;
  MetricTable nxt = MetricTable::zeros(n);

  cur.iterations = 0;
  cur.residual = 0.0;
  for (int sweep = 0; sweep < max_iters; ++sweep) {
    double residual = 0.0;
    for (int u = 0; u < n; ++u) {
      const std::span<const double> pu{ch.p.data() + static_cast<std::size_t>(u) * n,
                                       static_cast<std::size_t>(n)};
      for (int v = u + 1; v < n; ++v) {
        const std::span<const double> pv{ch.p.data() + static_cast<std::size_t>(v) * n,
                                         static_cast<std::size_t>(n)};
        const double move = coupling == Coupling::wasserstein ? wasserstein1(cur, pu, pv)
                                                              : independent_cost(cur, pu, pv);
        const double val = std::abs(ch.r[u] - ch.r[v]) + gamma * move;
        residual = std::max(residual, std::abs(val - cur.at(u, v)));
        nxt.at(u, v) = nxt.at(v, u) = val;
      }
    }
    std::swap(cur.d, nxt.d);
    cur.iterations = sweep + 1;
    cur.residual = residual;
    if (residual < tol) {
      cur.converged = true;
      return cur;
    }
  }
  cur.converged = n < 2;
  return cur;
}

DiameterReport diameter_bound_check(const MetricTable& m, double r_min, double r_max, double gamma,
                                    double tol) {
  if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("gamma must lie in [0, 1)");
  DiameterReport rep;
  rep.bound = (r_max - r_min) / (1.0 - gamma);
  for (int u = 0; u < m.n; ++u)
    for (int v = 0; v < m.n; ++v)
      if (m.at(u, v) > rep.diameter) {
        rep.diameter = m.at(u, v);
        rep.arg_u = u;
        rep.arg_v = v;
      }
  rep.ok = rep.diameter <= rep.bound + tol;
  return rep;
}

CounterexampleReport reproduce_counterexample() {
  // Two 5-dim states: coordinates 0..2 carry the task, 3..4 carry noise. The
  // pair disagrees in the noise coordinates yet sits within ε of its one-step
  // behavioral target, on the full state and on the task part alone.
  const std::vector<double> u = {1, 2, 3, 1, 1}, v = {2, 1, 1, 1, 1};
  const std::vector<double> u_next = {2, 2, 1, 1, 1}, v_next = {1, 1, 2, 1, 1};
  const double r_u = 0.03, r_v = 0.02, gamma = 0.92;

  CounterexampleReport rep;
  rep.epsilon = 0.01;
  rep.print_tolerance = 5e-4;

  const auto head = [](const std::vector<double>& x) {
    return std::span<const double>{x.data(), 3};
  };
  rep.full_similarity = cosine(u, v, CosineMode::similarity);
  rep.full_next_similarity = cosine(u_next, v_next, CosineMode::similarity);
  rep.full_target = behavioral_target(r_u, r_v, rep.full_next_similarity, gamma);
  rep.full_delta = rep.full_similarity - rep.full_target;
  rep.endo_similarity = cosine(head(u), head(v), CosineMode::similarity);
  rep.endo_next_similarity = cosine(head(u_next), head(v_next), CosineMode::similarity);
  rep.endo_target = behavioral_target(r_u, r_v, rep.endo_next_similarity, gamma);
  rep.endo_delta = rep.endo_similarity - rep.endo_target;

  rep.full_within_eps = std::abs(rep.full_delta) < rep.epsilon;
  rep.endo_within_eps = std::abs(rep.endo_delta) < rep.epsilon;
  rep.matches_reference = std::abs(rep.full_similarity - 0.7955) < rep.print_tolerance &&
                          std::abs(rep.full_target - 0.7945) < rep.print_tolerance &&
                          std::abs(rep.endo_similarity - 0.7638) < rep.print_tolerance &&
                          std::abs(rep.endo_target - 0.7612) < rep.print_tolerance;
  rep.passed = rep.full_within_eps && rep.endo_within_eps && rep.matches_reference;
  return rep;
}

BisimBatchResult run_bisim_batch(int instances, std::uint64_t seed, int max_states, double tol,
                                 int max_iters) {
  BisimBatchResult res;
  res.instances = instances;
  res.worst_bound_slack = -std::numeric_limits<double>::infinity();
  Rng root(seed);
  for (int k = 0; k < instances; ++k) {
    Rng rng(root.fork_seed());
    const int n = std::min(max_states, 3 + rng.uniform_int(max_states - 2));
    const int n_actions = 1 + rng.uniform_int(3);
    Mdp mdp = make_random_mdp(n, n_actions, 0.9, rng);
    const bool with_clone = k % 3 == 0 && n >= 2;
    if (with_clone) {
      for (int a = 0; a < n_actions; ++a) {
        mdp.reward(n - 1, a) = mdp.reward(0, a);
        for (int s2 = 0; s2 < n; ++s2) mdp.prob(a, n - 1, s2) = mdp.prob(a, 0, s2);
      }
    }
    std::vector<int> acts(n);
    for (auto& a : acts) a = rng.uniform_int(n_actions);
    if (with_clone) acts[n - 1] = acts[0];  // twin states must share the policy's action
    const Policy pi = Policy::deterministic(acts, n_actions);

    const MetricTable t =
        tabular_bisim_fixed_point(mdp, pi, mdp.gamma, tol, max_iters, Coupling::wasserstein);
    res.max_iterations = std::max(res.max_iterations, t.iterations);
    res.worst_residual = std::max(res.worst_residual, t.residual);
    if (!t.converged) ++res.non_converged;

    const DiameterReport rep = diameter_bound_check(t, mdp.r_min, mdp.r_max, mdp.gamma, 1e-9);
    res.worst_bound_slack = std::max(res.worst_bound_slack, rep.diameter - rep.bound);
    if (!rep.ok) ++res.bound_violations;

    if (with_clone) {
      const double dd = t.at(0, n - 1);
      res.worst_duplicate_distance = std::max(res.worst_duplicate_distance, dd);
      if (dd > 1e-9) ++res.duplicate_violations;
    }
  }
  res.passed = res.non_converged == 0 && res.bound_violations == 0 && res.duplicate_violations == 0;
  return res;
}

}  // namespace hwm
