#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "drasrl/error.hpp"
#include "drasrl/rng.hpp"

namespace drasrl {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr double kDistributionTol = 1e-12;

/// Finite MDP. transitions[a](s, s') = P(s' | s, a); reward(s, a) is the
/// expected ground-truth reward for taking a in s.
struct TabularMdp {
  std::size_t n_states = 0;
  std::size_t n_actions = 0;
  std::vector<Matrix> transitions;
  Matrix reward;
  double gamma = 0.0;
  Vector initial;

  double prob(std::size_t s, std::size_t a, std::size_t next) const {
    return transitions[a](static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(next));
  }

  void validate() const {
    if (n_states == 0 || n_actions == 0) throw ConfigError("mdp: empty state or action space");
    if (transitions.size() != n_actions) throw ConfigError("mdp: transition tensor has wrong action count");
    const auto ns = static_cast<Eigen::Index>(n_states);
    for (std::size_t a = 0; a < n_actions; ++a) {
      const Matrix& p = transitions[a];
      if (p.rows() != ns || p.cols() != ns) throw ConfigError("mdp: transition matrix shape mismatch");
      if ((p.array() < 0.0).any()) throw ConfigError("mdp: negative transition probability");
      for (Eigen::Index s = 0; s < ns; ++s) {
        if (std::abs(p.row(s).sum() - 1.0) > kDistributionTol) {
          throw ConfigError("mdp: transition row (" + std::to_string(s) + ", " + std::to_string(a) +
                            ") does not sum to 1");
        }
      }
    }
    if (reward.rows() != ns || reward.cols() != static_cast<Eigen::Index>(n_actions)) {
      throw ConfigError("mdp: reward table shape mismatch");
    }
    if (!reward.allFinite()) throw ConfigError("mdp: non-finite reward");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("mdp: gamma must lie in [0, 1)");
    if (initial.size() != ns) throw ConfigError("mdp: initial distribution size mismatch");
    if ((initial.array() < 0.0).any() || std::abs(initial.sum() - 1.0) > kDistributionTol) {
      throw ConfigError("mdp: initial distribution is not normalized");
    }
  }

  double max_abs_reward() const { return reward.cwiseAbs().maxCoeff(); }
};

/// Row-stochastic pi(a|s). noise_level is set when produced by noise injection.
struct StochasticPolicy {
  Matrix probs;
  std::optional<double> noise_level;

  std::size_t n_states() const { return static_cast<std::size_t>(probs.rows()); }
  std::size_t n_actions() const { return static_cast<std::size_t>(probs.cols()); }

  Vector row_vector(std::size_t s) const { return probs.row(static_cast<Eigen::Index>(s)).transpose(); }

  void validate() const {
    if (probs.rows() == 0 || probs.cols() == 0) throw ConfigError("policy: empty table");
    if ((probs.array() < 0.0).any()) throw ConfigError("policy: negative probability");
    for (Eigen::Index s = 0; s < probs.rows(); ++s) {
      if (std::abs(probs.row(s).sum() - 1.0) > kDistributionTol) {
        throw ConfigError("policy: row " + std::to_string(s) + " does not sum to 1");
      }
    }
  }

  void validate_for(const TabularMdp& mdp) const {
    validate();
    if (n_states() != mdp.n_states || n_actions() != mdp.n_actions) {
      throw ConfigError("policy: shape does not match mdp");
    }
  }

  static StochasticPolicy uniform(std::size_t n_states, std::size_t n_actions) {
    return {Matrix::Constant(static_cast<Eigen::Index>(n_states), static_cast<Eigen::Index>(n_actions),
                             1.0 / static_cast<double>(n_actions)),
            std::nullopt};
  }

  static StochasticPolicy deterministic(std::span<const int> actions, std::size_t n_actions) {
    StochasticPolicy pi{Matrix::Zero(static_cast<Eigen::Index>(actions.size()), static_cast<Eigen::Index>(n_actions)),
                        std::nullopt};
    for (std::size_t s = 0; s < actions.size(); ++s) pi.probs(static_cast<Eigen::Index>(s), actions[s]) = 1.0;
    return pi;
  }
};

struct BoundReport {
  double lhs = 0.0;
  double rhs = 0.0;
  double alpha = 0.0;
  double r_max_abs = 0.0;
  double max_tv = 0.0;
  bool holds = false;
};

inline constexpr double kBoundSlack = 1e-9;

struct ValueIterationResult {
  Vector values;
  Matrix q;
  std::vector<int> greedy;
  std::size_t iterations = 0;
  double residual = 0.0;
};

namespace detail {

inline Matrix q_from_values(const TabularMdp& mdp, const Vector& v) {
  Matrix q = mdp.reward;
  for (std::size_t a = 0; a < mdp.n_actions; ++a) {
    q.col(static_cast<Eigen::Index>(a)) += mdp.gamma * (mdp.transitions[a] * v);
  }
  return q;
}

/// P_pi(s, s') = sum_a pi(a|s) P(s'|s,a)
inline Matrix policy_transition(const TabularMdp& mdp, const StochasticPolicy& pi) {
  const auto ns = static_cast<Eigen::Index>(mdp.n_states);
  Matrix p = Matrix::Zero(ns, ns);
  for (std::size_t a = 0; a < mdp.n_actions; ++a) {
    p += pi.probs.col(static_cast<Eigen::Index>(a)).asDiagonal() * mdp.transitions[a];
  }
  return p;
}

inline Vector policy_reward(const TabularMdp& mdp, const StochasticPolicy& pi) {
  return mdp.reward.cwiseProduct(pi.probs).rowwise().sum();
}

inline Vector solve_checked(const Matrix& a, const Vector& b, const char* what) {
  Eigen::FullPivLU<Matrix> lu(a);
  if (!lu.isInvertible()) throw NumericError(std::string(what) + ": singular linear system");
  Vector x = lu.solve(b);
  if (!x.allFinite()) throw NumericError(std::string(what) + ": non-finite solution");
  const double scale = std::max(1.0, b.cwiseAbs().maxCoeff());
  if ((a * x - b).cwiseAbs().maxCoeff() > 1e-8 * scale) {
    throw NumericError(std::string(what) + ": linear solve residual too large");
  }
  return x;
}

inline int argmax_lowest(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  int best = 0;
  for (Eigen::Index a = 1; a < row.size(); ++a) {
    if (row(a) > row(best)) best = static_cast<int>(a);
  }
  return best;
}

}  // namespace detail

/// Bellman optimality sweeps until the sup-norm change is <= tol or max_iters
/// sweeps have run. Greedy ties resolve to the lowest action index.
inline ValueIterationResult value_iteration(const TabularMdp& mdp, std::size_t max_iters, double tol) {
  mdp.validate();
  ValueIterationResult out;
  out.values = Vector::Zero(static_cast<Eigen::Index>(mdp.n_states));
  out.residual = std::numeric_limits<double>::infinity();
  for (std::size_t it = 0; it < max_iters; ++it) {
    const Vector next = detail::q_from_values(mdp, out.values).rowwise().maxCoeff();
    out.residual = (next - out.values).cwiseAbs().maxCoeff();
    out.values = next;
    out.iterations = it + 1;
    if (out.residual <= tol) break;
  }
  out.q = detail::q_from_values(mdp, out.values);
  out.greedy.resize(mdp.n_states);
  for (std::size_t s = 0; s < mdp.n_states; ++s) {
    out.greedy[s] = detail::argmax_lowest(out.q.row(static_cast<Eigen::Index>(s)));
  }
  return out;
}

/// Exact V^pi from (I - gamma P_pi) V = r_pi.
inline Vector policy_values(const TabularMdp& mdp, const StochasticPolicy& pi) {
  mdp.validate();
  pi.validate_for(mdp);
  const auto ns = static_cast<Eigen::Index>(mdp.n_states);
  const Matrix a = Matrix::Identity(ns, ns) - mdp.gamma * detail::policy_transition(mdp, pi);
  return detail::solve_checked(a, detail::policy_reward(mdp, pi), "policy_return");
}

/// J(pi) = mu . V^pi, infinite-horizon discounted.
inline double policy_return(const TabularMdp& mdp, const StochasticPolicy& pi) {
  return mdp.initial.dot(policy_values(mdp, pi));
}

/// Expected undiscounted sum of r(s_t, a_t) for t < horizon, starting from mu.
/// This is the episode-level "ground-truth return" used for metrics.
inline double finite_horizon_return(const TabularMdp& mdp, const StochasticPolicy& pi, std::size_t horizon) {
  pi.validate_for(mdp);
  const Matrix p = detail::policy_transition(mdp, pi);
  const Vector r = detail::policy_reward(mdp, pi);
  Vector v = Vector::Zero(static_cast<Eigen::Index>(mdp.n_states));
  for (std::size_t t = 0; t < horizon; ++t) v = r + p * v;
  return mdp.initial.dot(v);
}

/// d_pi = (1 - gamma) mu + gamma P_pi^T d_pi, solved directly.
inline Vector discounted_visitation(const TabularMdp& mdp, const StochasticPolicy& pi) {
  mdp.validate();
  pi.validate_for(mdp);
  const auto ns = static_cast<Eigen::Index>(mdp.n_states);
  const Matrix a = Matrix::Identity(ns, ns) - mdp.gamma * detail::policy_transition(mdp, pi).transpose();
  Vector d = detail::solve_checked(a, (1.0 - mdp.gamma) * mdp.initial, "discounted_visitation");
  // clamp round-off negatives; the exact solution is non-negative
  d = d.cwiseMax(0.0);
  return d;
}

/// Sup-norm residual of the visitation fixed point; used by the lemma verifier.
inline double visitation_residual(const TabularMdp& mdp, const StochasticPolicy& pi, const Vector& d) {
  const Matrix p = detail::policy_transition(mdp, pi);
  return (d - (1.0 - mdp.gamma) * mdp.initial - mdp.gamma * p.transpose() * d).cwiseAbs().maxCoeff();
}

inline double tv_distance(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ConfigError("tv_distance: length mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += std::abs(p[i] - q[i]);
  return std::clamp(0.5 * total, 0.0, 1.0);
}

inline double tv_distance(const Vector& p, const Vector& q) {
  return tv_distance(std::span<const double>(p.data(), static_cast<std::size_t>(p.size())),
                     std::span<const double>(q.data(), static_cast<std::size_t>(q.size())));
}

inline double state_tv(const StochasticPolicy& pi, const StochasticPolicy& pj, std::size_t s) {
  if (pi.n_actions() != pj.n_actions()) throw ConfigError("tv_distance: action count mismatch");
  return tv_distance(pi.row_vector(s), pj.row_vector(s));
}

inline BoundReport theorem_bound_check(const TabularMdp& mdp, const StochasticPolicy& pi_i,
                                       const StochasticPolicy& pi_j) {
  BoundReport report;
  report.lhs = std::abs(policy_return(mdp, pi_i) - policy_return(mdp, pi_j));
  report.r_max_abs = mdp.max_abs_reward();
  const double horizon_scale = 1.0 - mdp.gamma;
  report.alpha = 2.0 * report.r_max_abs / (horizon_scale * horizon_scale);
  for (std::size_t s = 0; s < mdp.n_states; ++s) report.max_tv = std::max(report.max_tv, state_tv(pi_i, pi_j, s));
  report.rhs = report.alpha * report.max_tv;
  report.holds = report.lhs <= report.rhs + kBoundSlack;
  return report;
}

/// Plain mean of per-state TV over a caller-supplied multiset of states.
inline double expected_tv_over_trajectories(const StochasticPolicy& pi_i, const StochasticPolicy& pi_j,
                                            std::span<const int> states) {
  if (states.empty()) throw ConfigError("expected_tv_over_trajectories: empty state multiset");
  double total = 0.0;
  for (int s : states) {
    if (s < 0 || static_cast<std::size_t>(s) >= pi_i.n_states()) throw ConfigError("expected_tv: state out of range");
    total += state_tv(pi_i, pi_j, static_cast<std::size_t>(s));
  }
  return total / static_cast<double>(states.size());
}

// ---------------------------------------------------------------------------
// Random instances for the verifiers

inline Vector dirichlet_ones(Rng& rng, std::size_t n) {
  std::exponential_distribution<double> expo(1.0);
  Vector v(static_cast<Eigen::Index>(n));
  for (auto& x : v) x = expo(rng);
  return v / v.sum();
}

/// Dirichlet(1) transition rows and initial distribution, rewards U[-1, 1].
inline TabularMdp random_mdp(Rng& rng, std::size_t n_states, std::size_t n_actions, double gamma) {
  TabularMdp mdp;
  mdp.n_states = n_states;
  mdp.n_actions = n_actions;
  mdp.gamma = gamma;
  const auto ns = static_cast<Eigen::Index>(n_states);
  for (std::size_t a = 0; a < n_actions; ++a) {
    Matrix p(ns, ns);
    for (Eigen::Index s = 0; s < ns; ++s) p.row(s) = dirichlet_ones(rng, n_states).transpose();
    mdp.transitions.push_back(std::move(p));
  }
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  mdp.reward.resize(ns, static_cast<Eigen::Index>(n_actions));
  for (Eigen::Index i = 0; i < mdp.reward.size(); ++i) mdp.reward.data()[i] = unif(rng);
  mdp.initial = dirichlet_ones(rng, n_states);
  return mdp;
}

inline StochasticPolicy random_policy(Rng& rng, std::size_t n_states, std::size_t n_actions) {
  StochasticPolicy pi{Matrix(static_cast<Eigen::Index>(n_states), static_cast<Eigen::Index>(n_actions)), std::nullopt};
  for (std::size_t s = 0; s < n_states; ++s) {
    pi.probs.row(static_cast<Eigen::Index>(s)) = dirichlet_ones(rng, n_actions).transpose();
  }
  return pi;
}

}  // namespace drasrl
