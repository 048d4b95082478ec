#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "drasrl/demos.hpp"
#include "drasrl/error.hpp"
#include "drasrl/mdp.hpp"
#include "drasrl/reward_net.hpp"
#include "drasrl/rng.hpp"

namespace drasrl {

// ---------------------------------------------------------------------------
// Reward post-processing

/// Welford accumulator. std() is the population standard deviation.
struct RunningStats {
  std::size_t count = 0;
  double mean = 0.0;
  double m2 = 0.0;
  double std_floor = 1e-8;

  void update(double x) {
    ++count;
    const double delta = x - mean;
    mean += delta / static_cast<double>(count);
    m2 += delta * (x - mean);
  }

  double variance() const { return count == 0 ? 0.0 : std::max(0.0, m2 / static_cast<double>(count)); }
  double std() const { return std::sqrt(variance()); }
};

/// Updates stats with r, then returns (r - mean) / max(std, floor) + control_penalty.
inline double normalize_reward(RunningStats& stats, double r, double control_penalty = 0.0) {
  stats.update(r);
  return (r - stats.mean) / std::max(stats.std(), stats.std_floor) + control_penalty;
}

inline double squash_reward(double r) {
  if (r >= 0.0) return 1.0 / (1.0 + std::exp(-r));
  const double e = std::exp(r);
  return e / (1.0 + e);
}

inline double pearson_correlation(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ConfigError("pearson_correlation: length mismatch");
  if (xs.size() < 2) throw ConfigError("pearson_correlation: need at least two points");
  const auto n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw NumericError("pearson_correlation: zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Per-step labeling

/// Per-step rewards for one length-K window.
using WindowRewardFn = std::function<Vector(const SubTrajectory&)>;

inline WindowRewardFn model_reward_fn(const RewardModelParams& params) {
  return [&params](const SubTrajectory& sub) { return evaluate_window(params, sub).rewards; };
}

/// Ground-truth r(s, a) per step; with K = 1 this is an exact oracle stub.
inline WindowRewardFn table_reward_fn(const Matrix& reward, double sign = 1.0) {
  return [reward, sign](const SubTrajectory& sub) {
    Vector out(static_cast<Eigen::Index>(sub.size()));
    for (std::size_t t = 0; t < sub.size(); ++t) out(static_cast<Eigen::Index>(t)) = sign * reward(sub.states[t], sub.actions[t]);
    return out;
  };
}

/// Memoizes window rewards by (states, actions).
class CachedRewardFn {
 public:
  explicit CachedRewardFn(WindowRewardFn fn) : fn_(std::move(fn)) {}

  const Vector& operator()(const SubTrajectory& sub) {
    std::vector<int> key(sub.states);
    key.insert(key.end(), sub.actions.begin(), sub.actions.end());
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(std::move(key), fn_(sub)).first;
    return it->second;
  }

  std::size_t size() const { return cache_.size(); }

 private:
  WindowRewardFn fn_;
  std::map<std::vector<int>, Vector> cache_;
};

enum class LabelMode { NonOverlapping, Sliding };

/// Consecutive non-overlapping windows; a trailing remainder shorter than K is
/// taken from the tail of the window ending at the last step. Sliding mode
/// averages every length-K window covering a step.
template <class Fn>
  requires std::invocable<Fn&, const SubTrajectory&>
Vector label_episode(const Trajectory& episode, Fn&& reward_fn, std::size_t k, LabelMode mode = LabelMode::NonOverlapping) {
  const std::size_t len = episode.size();
  if (k == 0) throw ConfigError("label_episode: K must be >= 1");
  if (len < k) throw ConfigError("label_episode: episode shorter than K");
  Vector out = Vector::Zero(static_cast<Eigen::Index>(len));
  if (mode == LabelMode::NonOverlapping) {
    std::size_t start = 0;
    for (; start + k <= len; start += k) {
      const Vector r = reward_fn(extract_window(episode, start, k, 0));
      out.segment(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(k)) = r;
    }
    if (start < len) {
      const std::size_t rem = len - start;
      const Vector r = reward_fn(extract_window(episode, len - k, k, 0));
      out.tail(static_cast<Eigen::Index>(rem)) = r.tail(static_cast<Eigen::Index>(rem));
    }
  } else {
    Vector counts = Vector::Zero(out.size());
    for (std::size_t start = 0; start + k <= len; ++start) {
      const Vector r = reward_fn(extract_window(episode, start, k, 0));
      out.segment(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(k)) += r;
      counts.segment(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(k)).array() += 1.0;
    }
    out.array() /= counts.array();
  }
  return out;
}

inline Vector label_episode(const Trajectory& episode, const RewardModelParams& params, std::size_t k,
                            LabelMode mode = LabelMode::NonOverlapping) {
  return label_episode(episode, model_reward_fn(params), k, mode);
}

/// Predicted episode return: the sum of the per-step labels.
template <class Fn>
  requires std::invocable<Fn&, const SubTrajectory&>
double predicted_episode_return(const Trajectory& episode, Fn&& reward_fn, std::size_t k,
                                LabelMode mode = LabelMode::NonOverlapping) {
  return label_episode(episode, std::forward<Fn>(reward_fn), k, mode).sum();
}

// ---------------------------------------------------------------------------
// Policy retraining

struct QLearningConfig {
  std::size_t episodes = 3000;
  std::size_t horizon = 50;
  double alpha = 0.5;          // step size at the first visit of (s, a)
  double alpha_decay = 0.6;    // alpha_n = max(alpha / n^decay, alpha_min)
  double alpha_min = 0.01;
  double epsilon_start = 1.0;  // exploration, decayed linearly over episodes
  double epsilon_end = 0.05;
  bool exploring_starts = true;
  bool normalize = false;
  bool squash = false;
  double control_penalty = 0.0;
  LabelMode label_mode = LabelMode::NonOverlapping;
  std::uint64_t seed = 0;

  void validate() const {
    if (horizon == 0) throw ConfigError("rl.horizon must be >= 1");
    if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("rl.alpha must lie in (0, 1]");
    if (!(alpha_min >= 0.0 && alpha_min <= alpha)) throw ConfigError("rl.alpha_min must lie in [0, alpha]");
    if (!(alpha_decay >= 0.0)) throw ConfigError("rl.alpha_decay must be >= 0");
    if (!(epsilon_start >= 0.0 && epsilon_start <= 1.0 && epsilon_end >= 0.0 && epsilon_end <= 1.0)) {
      throw ConfigError("rl.epsilon must lie in [0, 1]");
    }
  }
};

inline void to_json(nlohmann::json& j, const QLearningConfig& c) {
  j = {{"episodes", c.episodes},
       {"horizon", c.horizon},
       {"alpha", c.alpha},
       {"alpha_decay", c.alpha_decay},
       {"alpha_min", c.alpha_min},
       {"epsilon_start", c.epsilon_start},
       {"epsilon_end", c.epsilon_end},
       {"exploring_starts", c.exploring_starts},
       {"normalize", c.normalize},
       {"squash", c.squash},
       {"control_penalty", c.control_penalty},
       {"label_mode", c.label_mode == LabelMode::Sliding ? "sliding" : "non_overlapping"}};
}

struct QLearningResult {
  Matrix q;
  std::vector<int> greedy;
  StochasticPolicy policy;
  std::size_t labeled_windows = 0;
};

/// Tabular Q-learning on learned per-step rewards. The MDP contributes only its
/// dynamics, start distribution and discount; its reward table is never read.
/// Each episode is rolled out epsilon-greedily, labeled post hoc (the encoder
/// looks at the whole window), then replayed backwards through the update.
inline QLearningResult train_policy_on_learned_reward(const TabularMdp& mdp, const WindowRewardFn& reward_fn,
                                                      std::size_t k, const QLearningConfig& cfg) {
  cfg.validate();
  if (k > cfg.horizon) throw ConfigError("train_policy_on_learned_reward: K exceeds the episode horizon");
  const auto ns = static_cast<Eigen::Index>(mdp.n_states);
  const auto na = static_cast<Eigen::Index>(mdp.n_actions);
  CachedRewardFn labeler(reward_fn);
  RunningStats stats;
  Matrix q = Matrix::Zero(ns, na);
  Eigen::MatrixXi visits = Eigen::MatrixXi::Zero(ns, na);
  Rng rng = make_rng(cfg.seed, 0x9e1);
  const std::span<const double> mu(mdp.initial.data(), mdp.n_states);
  std::vector<double> next_row(mdp.n_states);
  std::vector<int> next_states(cfg.horizon);

  for (std::size_t ep = 0; ep < cfg.episodes; ++ep) {
    const double frac = cfg.episodes > 1 ? static_cast<double>(ep) / static_cast<double>(cfg.episodes - 1) : 1.0;
    const double eps = cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * frac;
    Trajectory traj;
    std::size_t s = cfg.exploring_starts ? uniform_index(rng, mdp.n_states) : sample_categorical(rng, mu);
    for (std::size_t t = 0; t < cfg.horizon; ++t) {
      const auto a = uniform01(rng) < eps ? uniform_index(rng, mdp.n_actions)
                                          : static_cast<std::size_t>(detail::argmax_lowest(q.row(static_cast<Eigen::Index>(s))));
      for (std::size_t sp = 0; sp < mdp.n_states; ++sp) next_row[sp] = mdp.prob(s, a, sp);
      const std::size_t next = sample_categorical(rng, next_row);
      traj.states.push_back(static_cast<int>(s));
      traj.actions.push_back(static_cast<int>(a));
      next_states[t] = static_cast<int>(next);
      s = next;
    }
    Vector r = label_episode(traj, labeler, k, cfg.label_mode);
    for (Eigen::Index t = 0; t < r.size(); ++t) {
      double x = r(t);
      if (cfg.normalize) x = normalize_reward(stats, x, cfg.control_penalty);
      else x += cfg.control_penalty;
      if (cfg.squash) x = squash_reward(x);
      r(t) = x;
    }
    for (std::size_t t = cfg.horizon; t-- > 0;) {
      const int st = traj.states[t], at = traj.actions[t];
      const int n = ++visits(st, at);
      const double alpha = std::max(cfg.alpha / std::pow(static_cast<double>(n), cfg.alpha_decay), cfg.alpha_min);
      const double target = r(static_cast<Eigen::Index>(t)) + mdp.gamma * q.row(next_states[t]).maxCoeff();
      q(st, at) += alpha * (target - q(st, at));
      if (!std::isfinite(q(st, at))) {
        throw NumericError("train_policy_on_learned_reward: non-finite Q-value in episode " + std::to_string(ep));
      }
    }
  }

  QLearningResult out;
  out.q = q;
  out.greedy.resize(mdp.n_states);
  for (std::size_t st = 0; st < mdp.n_states; ++st) {
    out.greedy[st] = detail::argmax_lowest(q.row(static_cast<Eigen::Index>(st)));
  }
  out.policy = StochasticPolicy::deterministic(out.greedy, mdp.n_actions);
  out.labeled_windows = labeler.size();
  return out;
}

inline QLearningResult train_policy_on_learned_reward(const TabularMdp& mdp, const RewardModelParams& params,
                                                      const QLearningConfig& cfg) {
  return train_policy_on_learned_reward(mdp, model_reward_fn(params), params.dims.context, cfg);
}

// ---------------------------------------------------------------------------
// Reward evaluation

enum class ReturnNormalization { None, PerSetAffine };

struct LevelSummary {
  double noise_level = 0.0;
  double mean_gt_return = 0.0;
  double mean_predicted_return = 0.0;
};

struct EvalReport {
  double pearson_train = 0.0;
  double pearson_heldout = 0.0;
  double demonstrator_return = 0.0;
  std::optional<double> learned_policy_return;
  double best_demo_return = 0.0;
  std::vector<LevelSummary> per_level;
  std::vector<double> train_predicted;
  std::vector<double> train_gt;
  std::vector<double> heldout_predicted;
  std::vector<double> heldout_gt;
};

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& l : r.per_level) {
    levels.push_back({{"noise_level", l.noise_level},
                      {"mean_gt_return", l.mean_gt_return},
                      {"mean_predicted_return", l.mean_predicted_return}});
  }
  return {{"pearson_train", r.pearson_train},
          {"pearson_heldout", r.pearson_heldout},
          {"demonstrator_return", r.demonstrator_return},
          {"learned_policy_return",
           r.learned_policy_return ? nlohmann::json(*r.learned_policy_return) : nlohmann::json(nullptr)},
          {"best_demo_return", r.best_demo_return},
          {"per_level", levels}};
}

/// Rescales predictions onto the [min, max] range of the ground-truth returns.
inline void affine_to_range(std::vector<double>& pred, const std::vector<double>& gt) {
  if (pred.empty()) return;
  const auto [pmin, pmax] = std::minmax_element(pred.begin(), pred.end());
  const auto [gmin, gmax] = std::minmax_element(gt.begin(), gt.end());
  const double lo = *pmin, span = *pmax - *pmin, glo = *gmin, gspan = *gmax - *gmin;
  if (span == 0.0) return;
  for (double& p : pred) p = glo + (p - lo) / span * gspan;
}

/// Correlation of predicted episode returns with ground truth on the
/// reward-training sets and on held-out episodes. `demos` provides the
/// demonstrator statistics.
inline EvalReport evaluate_reward(const WindowRewardFn& reward_fn, std::size_t k,
                                  const std::vector<std::vector<Trajectory>>& train_sets,
                                  const std::vector<Trajectory>& heldout, const std::vector<Trajectory>& demos,
                                  ReturnNormalization normalization = ReturnNormalization::None) {
  CachedRewardFn labeler(reward_fn);
  EvalReport rep;
  std::vector<std::size_t> level_of;
  for (std::size_t l = 0; l < train_sets.size(); ++l) {
    for (const auto& t : train_sets[l]) {
      rep.train_predicted.push_back(predicted_episode_return(t, labeler, k));
      rep.train_gt.push_back(t.gt_return);
      level_of.push_back(l);
    }
  }
  for (const auto& t : heldout) {
    rep.heldout_predicted.push_back(predicted_episode_return(t, labeler, k));
    rep.heldout_gt.push_back(t.gt_return);
  }
  if (normalization == ReturnNormalization::PerSetAffine) {
    affine_to_range(rep.train_predicted, rep.train_gt);
    affine_to_range(rep.heldout_predicted, rep.heldout_gt);
  }
  rep.pearson_train = pearson_correlation(rep.train_predicted, rep.train_gt);
  rep.pearson_heldout = pearson_correlation(rep.heldout_predicted, rep.heldout_gt);

  rep.per_level.resize(train_sets.size());
  std::vector<std::size_t> counts(train_sets.size(), 0);
  for (std::size_t i = 0; i < level_of.size(); ++i) {
    auto& lv = rep.per_level[level_of[i]];
    lv.mean_gt_return += rep.train_gt[i];
    lv.mean_predicted_return += rep.train_predicted[i];
    ++counts[level_of[i]];
  }
  for (std::size_t l = 0; l < train_sets.size(); ++l) {
    auto& lv = rep.per_level[l];
    lv.noise_level = train_sets[l].empty() ? 0.0 : train_sets[l].front().noise_level.value_or(0.0);
    if (counts[l] > 0) {
      lv.mean_gt_return /= static_cast<double>(counts[l]);
      lv.mean_predicted_return /= static_cast<double>(counts[l]);
    }
  }

  if (!demos.empty()) {
    double sum = 0.0, best = -std::numeric_limits<double>::infinity();
    for (const auto& d : demos) {
      sum += d.gt_return;
      best = std::max(best, d.gt_return);
    }
    rep.demonstrator_return = sum / static_cast<double>(demos.size());
    rep.best_demo_return = best;
  }
  return rep;
}

inline EvalReport evaluate_reward(const RewardModelParams& params, const std::vector<std::vector<Trajectory>>& train_sets,
                                  const std::vector<Trajectory>& heldout, const std::vector<Trajectory>& demos,
                                  ReturnNormalization normalization = ReturnNormalization::None) {
  return evaluate_reward(model_reward_fn(params), params.dims.context, train_sets, heldout, demos, normalization);
}

/// Episodes from demonstrators of quality evenly spread over (demo_quality, 1].
inline std::vector<Trajectory> generate_heldout(const TabularMdp& mdp, double demo_quality, std::size_t n_qualities,
                                                std::size_t per_quality, std::size_t horizon, std::uint64_t seed,
                                                double base_temperature = kDemonstratorTemperature) {
  if (n_qualities == 0) throw ConfigError("heldout.qualities must be >= 1");
  std::vector<Trajectory> out;
  for (std::size_t i = 1; i <= n_qualities; ++i) {
    const double q = demo_quality + (1.0 - demo_quality) * static_cast<double>(i) / static_cast<double>(n_qualities);
    const auto episodes =
        sample_trajectories(mdp, make_demonstrator(mdp, q, base_temperature), per_quality, horizon, make_rng(seed, 2'000'000 + i)());
    out.insert(out.end(), episodes.begin(), episodes.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Export

inline std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

/// CSV: noise_level,source_id,start,f0,...; one row per window.
inline void export_features(const RewardModelParams& params, const std::vector<SubTrajectory>& subs,
                            const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  const std::size_t width = params.dims.context * params.dims.feature_dim();
  out << "noise_level,source_id,start";
  for (std::size_t i = 0; i < width; ++i) out << ",f" << i;
  out << '\n';
  for (const auto& sub : subs) {
    const Matrix f = encode(params, sub);
    out << format_double(sub.noise_level) << ',' << sub.source_id << ',' << sub.start;
    // row-major flatten, matching the tape reshape
    for (Eigen::Index r = 0; r < f.rows(); ++r) {
      for (Eigen::Index c = 0; c < f.cols(); ++c) out << ',' << format_double(f(r, c));
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

inline void write_per_level_csv(const EvalReport& rep, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "noise_level,mean_gt_return,mean_predicted_return\n";
  for (const auto& l : rep.per_level) {
    out << format_double(l.noise_level) << ',' << format_double(l.mean_gt_return) << ','
        << format_double(l.mean_predicted_return) << '\n';
  }
}

}  // namespace drasrl
