#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "drasrl/autodiff.hpp"
#include "drasrl/demos.hpp"
#include "drasrl/error.hpp"

namespace drasrl {

struct LossConfig {
  double rho = 1.0;             // contrastive temperature
  double lambda = 0.1;          // rank-term weight
  double beta = 1.0;            // MSE baseline scale
  double pair_threshold = 0.3;  // minimum noise gap for a rank pair
  bool normalize_features = true;

  void validate() const {
    if (!(rho > 0.0)) throw ConfigError("loss.rho must be > 0");
    if (!(lambda >= 0.0)) throw ConfigError("loss.lambda must be >= 0");
    if (!(beta > 0.0)) throw ConfigError("loss.beta must be > 0");
    if (!(pair_threshold >= 0.0 && pair_threshold <= 1.0)) throw ConfigError("loss.pair_threshold must lie in [0, 1]");
  }
};

/// (lower, higher): the trajectory at `higher` is less noisy and ranked above `lower`.
struct RankPair {
  std::size_t lower;
  std::size_t higher;

  friend bool operator==(const RankPair&, const RankPair&) = default;
};

struct RankPairSet {
  std::vector<RankPair> pairs;

  bool empty() const { return pairs.empty(); }
  std::size_t size() const { return pairs.size(); }
};

/// Absolute slack on the noise-gap comparison so that gaps such as 0.35 - 0.05
/// are not dropped by binary round-off.
inline constexpr double kPairThresholdSlack = 1e-12;

/// Every ordered pair with eps[lower] - eps[higher] >= threshold.
inline RankPairSet build_pair_set(std::span<const double> eps, double threshold) {
  RankPairSet out;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    for (std::size_t j = 0; j < eps.size(); ++j) {
      const double gap = eps[i] - eps[j];
      if (gap > 0.0 && gap >= threshold - kPairThresholdSlack) out.pairs.push_back({i, j});
    }
  }
  return out;
}

/// 1 - Dist(pi_anchor || pi_n) for every candidate.
inline std::vector<double> soft_labels(double anchor_eps, std::span<const double> candidate_eps, ActionSpace space) {
  std::vector<double> out;
  out.reserve(candidate_eps.size());
  for (double e : candidate_eps) out.push_back(1.0 - simplified_tv(anchor_eps, e, space));
  return out;
}

/// Distance-aware contrastive loss
///   L_d = -sum_n w_n log softmax_n(X . X_n / rho)
/// anchor is 1 x D, candidates is M x D (one row per candidate), labels has M
/// entries and is used as given (not renormalized).
inline ad::Var distance_aware_loss(const ad::Var& anchor, const ad::Var& candidates, std::span<const double> labels,
                                   const LossConfig& cfg) {
  if (!(cfg.rho > 0.0)) throw ConfigError("distance_aware_loss: rho must be > 0");
  if (candidates.rows() < 2) throw ConfigError("distance_aware_loss: need at least two candidates");
  if (static_cast<std::size_t>(candidates.rows()) != labels.size()) {
    throw ConfigError("distance_aware_loss: label count does not match candidates");
  }
  if (anchor.rows() != 1 || anchor.cols() != candidates.cols()) {
    throw ConfigError("distance_aware_loss: anchor width does not match candidates");
  }
  ad::Tape& tape = *anchor.tape;
  ad::Var a = anchor;
  ad::Var c = candidates;
  if (cfg.normalize_features) {
    a = ad::l2_normalize_rows(a);
    c = ad::l2_normalize_rows(c);
  }
  const ad::Var logits = ad::scale(ad::matmul_nt(c, a), 1.0 / cfg.rho);  // M x 1
  const ad::Var log_p = ad::log_softmax(logits);
  Matrix w(1, static_cast<Eigen::Index>(labels.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) w(0, static_cast<Eigen::Index>(i)) = -labels[i];
  return ad::matmul(tape.constant(std::move(w), "soft_labels"), log_p);
}

/// Convenience form on plain flattened feature vectors.
inline double distance_aware_loss(const Vector& anchor, const std::vector<Vector>& candidates,
                                  std::span<const double> candidate_eps, double anchor_eps, ActionSpace space,
                                  const LossConfig& cfg) {
  if (candidates.size() != candidate_eps.size()) throw ConfigError("distance_aware_loss: eps count mismatch");
  if (candidates.empty()) throw ConfigError("distance_aware_loss: need at least two candidates");
  ad::Tape tape;
  Matrix c(static_cast<Eigen::Index>(candidates.size()), candidates.front().size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (candidates[i].size() != c.cols()) throw ConfigError("distance_aware_loss: ragged candidates");
    c.row(static_cast<Eigen::Index>(i)) = candidates[i].transpose();
  }
  const auto labels = soft_labels(anchor_eps, candidate_eps, space);
  return distance_aware_loss(tape.constant(anchor.transpose()), tape.constant(std::move(c)), labels, cfg).scalar();
}

/// Bradley-Terry pairwise ranking loss over a column of predicted returns:
///   L_r = mean over pairs of -log sigmoid(R_higher - R_lower) = softplus(R_lower - R_higher)
inline ad::Var rank_loss(const ad::Var& returns, const RankPairSet& pairs) {
  if (pairs.empty()) throw ConfigError("rank_loss: empty pair set");
  if (returns.cols() != 1) throw ConfigError("rank_loss: returns must be a column");
  const auto n = returns.rows();
  Matrix select = Matrix::Zero(static_cast<Eigen::Index>(pairs.size()), n);
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto [lo, hi] = pairs.pairs[p];
    if (static_cast<Eigen::Index>(lo) >= n || static_cast<Eigen::Index>(hi) >= n) {
      throw ConfigError("rank_loss: pair index out of range");
    }
    select(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(lo)) += 1.0;
    select(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(hi)) -= 1.0;
  }
  ad::Tape& tape = *returns.tape;
  return ad::mean(ad::softplus(ad::matmul(tape.constant(std::move(select), "pair_select"), returns)));
}

struct ScoredReturn {
  double value;
  double noise_level;
};

inline double rank_loss(std::span<const ScoredReturn> returns, const RankPairSet& pairs) {
  for (const auto& [lo, hi] : pairs.pairs) {
    if (lo >= returns.size() || hi >= returns.size()) throw ConfigError("rank_loss: pair index out of range");
    if (!(returns[lo].noise_level > returns[hi].noise_level)) {
      throw ConfigError("rank_loss: pair is not ordered by noise level");
    }
  }
  ad::Tape tape;
  Matrix r(static_cast<Eigen::Index>(returns.size()), 1);
  for (std::size_t i = 0; i < returns.size(); ++i) r(static_cast<Eigen::Index>(i), 0) = returns[i].value;
  return rank_loss(tape.constant(std::move(r)), pairs).scalar();
}

/// Regression baseline (|R_i - R_j| - beta * dist)^2.
inline ad::Var mse_distance_loss(const ad::Var& return_i, const ad::Var& return_j, double policy_dist,
                                 const LossConfig& cfg) {
  ad::Tape& tape = *return_i.tape;
  const ad::Var gap = ad::abs(ad::sub(return_i, return_j));
  return ad::square(ad::sub(gap, tape.constant(Matrix::Constant(1, 1, cfg.beta * policy_dist), "mse_target")));
}

inline double mse_distance_loss(double return_i, double return_j, double policy_dist, const LossConfig& cfg) {
  const double r = std::abs(return_i - return_j) - cfg.beta * policy_dist;
  return r * r;
}

/// L = L_d + lambda * L_r
inline double total_loss(double l_d, double l_r, const LossConfig& cfg) { return l_d + cfg.lambda * l_r; }

inline ad::Var total_loss(const ad::Var& l_d, const ad::Var& l_r, const LossConfig& cfg) {
  return ad::add(l_d, ad::scale(l_r, cfg.lambda));
}

}  // namespace drasrl
