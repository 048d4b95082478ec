#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "drasrl/error.hpp"
#include "drasrl/mdp.hpp"
#include "drasrl/rng.hpp"

namespace drasrl {

/// Fixed-horizon episode: states[t], actions[t] for t < horizon. The state
/// reached after the last action is not stored.
struct Trajectory {
  std::vector<int> states;
  std::vector<int> actions;
  double gt_return = 0.0;
  std::optional<double> noise_level;

  std::size_t size() const { return states.size(); }

  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

/// Recomputes the undiscounted ground-truth return from the reward table.
inline double recompute_return(const TabularMdp& mdp, const Trajectory& traj) {
  double total = 0.0;
  for (std::size_t t = 0; t < traj.actions.size(); ++t) total += mdp.reward(traj.states[t], traj.actions[t]);
  return total;
}

/// Length-K window of a trajectory plus provenance.
struct SubTrajectory {
  std::vector<int> states;
  std::vector<int> actions;
  double noise_level = 0.0;
  std::size_t source_id = 0;
  std::size_t start = 0;

  std::size_t size() const { return states.size(); }

  friend bool operator==(const SubTrajectory&, const SubTrajectory&) = default;
};

inline SubTrajectory extract_window(const Trajectory& traj, std::size_t start, std::size_t k, std::size_t source_id) {
  if (start + k > traj.size()) throw ConfigError("extract_window: window exceeds trajectory length");
  SubTrajectory sub;
  sub.states.assign(traj.states.begin() + static_cast<std::ptrdiff_t>(start),
                    traj.states.begin() + static_cast<std::ptrdiff_t>(start + k));
  sub.actions.assign(traj.actions.begin() + static_cast<std::ptrdiff_t>(start),
                     traj.actions.begin() + static_cast<std::ptrdiff_t>(start + k));
  sub.noise_level = traj.noise_level.value_or(0.0);
  sub.source_id = source_id;
  sub.start = start;
  return sub;
}

/// Uniform over episodes, then uniform over start offsets.
inline SubTrajectory sample_window(Rng& rng, const std::vector<Trajectory>& set, std::size_t k) {
  if (set.empty()) throw ConfigError("sample_window: empty trajectory set");
  const std::size_t episode = uniform_index(rng, set.size());
  const Trajectory& traj = set[episode];
  if (traj.size() < k) throw ConfigError("sample_window: trajectory shorter than K");
  const std::size_t start = uniform_index(rng, traj.size() - k + 1);
  return extract_window(traj, start, k, episode);
}

// ---------------------------------------------------------------------------
// Demonstrators and sampling

inline constexpr std::size_t kDemonstratorFullIters = 200;
inline constexpr double kDemonstratorTemperature = 0.05;

/// Partially trained demonstrator: ceil(quality * full_iters) value-iteration
/// sweeps, then a softmax over Q with temperature base_temperature * (1 - q) / q.
/// quality = 0 is uniform, quality = 1 is the greedy (one-hot) policy.
inline StochasticPolicy make_demonstrator(const TabularMdp& mdp, double quality, double base_temperature = kDemonstratorTemperature,
                                          std::size_t full_iters = kDemonstratorFullIters) {
  if (!(quality >= 0.0 && quality <= 1.0)) throw ConfigError("make_demonstrator: quality must lie in [0, 1]");
  if (quality == 0.0) return StochasticPolicy::uniform(mdp.n_states, mdp.n_actions);
  const auto sweeps = static_cast<std::size_t>(std::ceil(quality * static_cast<double>(full_iters)));
  const ValueIterationResult vi = value_iteration(mdp, sweeps, 0.0);
  if (quality == 1.0) return StochasticPolicy::deterministic(vi.greedy, mdp.n_actions);

  const double temperature = base_temperature * (1.0 - quality) / quality;
  StochasticPolicy pi{Matrix(vi.q.rows(), vi.q.cols()), std::nullopt};
  for (Eigen::Index s = 0; s < vi.q.rows(); ++s) {
    const Eigen::RowVectorXd logits = vi.q.row(s) / temperature;
    const Eigen::RowVectorXd e = (logits.array() - logits.maxCoeff()).exp();
    pi.probs.row(s) = e / e.sum();
  }
  return pi;
}

/// Episode i uses its own engine derived from (seed, i).
inline std::vector<Trajectory> sample_trajectories(const TabularMdp& mdp, const StochasticPolicy& policy, std::size_t n,
                                                   std::size_t horizon, std::uint64_t seed) {
  policy.validate_for(mdp);
  std::vector<Trajectory> out;
  out.reserve(n);
  const std::span<const double> mu(mdp.initial.data(), mdp.n_states);
  std::vector<double> row(mdp.n_actions);
  std::vector<double> next_row(mdp.n_states);
  for (std::size_t ep = 0; ep < n; ++ep) {
    Rng rng = make_rng(seed, ep);
    Trajectory traj;
    traj.noise_level = policy.noise_level;
    traj.states.reserve(horizon);
    traj.actions.reserve(horizon);
    auto s = sample_categorical(rng, mu);
    for (std::size_t t = 0; t < horizon; ++t) {
      for (std::size_t a = 0; a < mdp.n_actions; ++a) row[a] = policy.probs(static_cast<Eigen::Index>(s), a);
      const std::size_t a = sample_categorical(rng, row);
      traj.states.push_back(static_cast<int>(s));
      traj.actions.push_back(static_cast<int>(a));
      traj.gt_return += mdp.reward(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a));
      for (std::size_t sp = 0; sp < mdp.n_states; ++sp) next_row[sp] = mdp.prob(s, a, sp);
      s = sample_categorical(rng, next_row);
    }
    out.push_back(std::move(traj));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Behavior cloning and noise injection

/// Count-based clone. `mle` keeps the maximum-likelihood rows for inspection;
/// execution uses `greedy` (argmax of counts, lowest index on ties).
struct ClonedPolicy {
  StochasticPolicy mle;
  std::vector<int> greedy;

  StochasticPolicy greedy_policy() const { return StochasticPolicy::deterministic(greedy, mle.n_actions()); }
};

inline ClonedPolicy behavior_clone(const std::vector<Trajectory>& demos, std::size_t n_states, std::size_t n_actions) {
  if (demos.empty()) throw ConfigError("behavior_clone: no demonstrations");
  Matrix counts = Matrix::Zero(static_cast<Eigen::Index>(n_states), static_cast<Eigen::Index>(n_actions));
  for (const Trajectory& traj : demos) {
    for (std::size_t t = 0; t < traj.actions.size(); ++t) {
      const int s = traj.states[t];
      const int a = traj.actions[t];
      if (s < 0 || static_cast<std::size_t>(s) >= n_states || a < 0 || static_cast<std::size_t>(a) >= n_actions) {
        throw ConfigError("behavior_clone: state or action index out of range");
      }
      counts(s, a) += 1.0;
    }
  }
  ClonedPolicy out;
  out.mle.probs = Matrix(counts.rows(), counts.cols());
  out.greedy.resize(n_states);
  for (Eigen::Index s = 0; s < counts.rows(); ++s) {
    const double total = counts.row(s).sum();
    if (total == 0.0) {
      out.mle.probs.row(s).setConstant(1.0 / static_cast<double>(n_actions));
    } else {
      out.mle.probs.row(s) = counts.row(s) / total;
    }
    out.greedy[static_cast<std::size_t>(s)] = detail::argmax_lowest(counts.row(s));
  }
  return out;
}

/// pi_eps = (1 - eps) * base + eps / |A|.
inline StochasticPolicy inject_noise(const StochasticPolicy& base, double epsilon) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("inject_noise: epsilon must lie in [0, 1]");
  StochasticPolicy out;
  out.probs = ((1.0 - epsilon) * base.probs.array() + epsilon / static_cast<double>(base.n_actions())).matrix();
  out.noise_level = epsilon;
  return out;
}

inline StochasticPolicy inject_noise(const ClonedPolicy& bc, double epsilon) {
  return inject_noise(bc.greedy_policy(), epsilon);
}

struct ActionSpace {
  std::optional<std::size_t> cardinality;  // empty means continuous

  static ActionSpace discrete(std::size_t n) { return {n}; }
  static ActionSpace continuous() { return {std::nullopt}; }
};

/// TV distance between two noise-injected copies of one deterministic policy.
inline double simplified_tv(double eps_i, double eps_j, ActionSpace space) {
  const double gap = std::abs(eps_i - eps_j);
  if (!space.cardinality) return gap;
  return gap * (1.0 - 1.0 / static_cast<double>(*space.cardinality));
}

/// {0, 1/n, ..., (n-1)/n}
inline std::vector<double> equal_spaced_schedule(std::size_t n) {
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<double>(i) / static_cast<double>(n);
  return out;
}

/// One trajectory set per noise level, level i sampled with stream (seed, i).
inline std::vector<std::vector<Trajectory>> generate_ranked_sets(const TabularMdp& mdp, const ClonedPolicy& bc,
                                                                 const std::vector<double>& schedule,
                                                                 std::size_t per_level, std::size_t horizon,
                                                                 std::uint64_t seed) {
  if (schedule.empty()) throw ConfigError("generate_ranked_sets: empty noise schedule");
  std::vector<std::vector<Trajectory>> sets;
  sets.reserve(schedule.size());
  for (std::size_t i = 0; i < schedule.size(); ++i) {
    if (!(schedule[i] >= 0.0 && schedule[i] < 1.0)) {
      throw ConfigError("generate_ranked_sets: noise levels must lie in [0, 1)");
    }
    const std::uint64_t level_seed = make_rng(seed, 1'000'000 + i)();
    sets.push_back(sample_trajectories(mdp, inject_noise(bc, schedule[i]), per_level, horizon, level_seed));
  }
  return sets;
}

// ---------------------------------------------------------------------------
// Queues

/// One FIFO per noise level, each held at exactly `capacity` windows.
struct QueueSet {
  std::vector<std::deque<SubTrajectory>> queues;
  std::size_t capacity = 0;
  std::vector<double> schedule;

  std::size_t levels() const { return queues.size(); }
};

inline QueueSet build_queues(const std::vector<std::vector<Trajectory>>& sets, const std::vector<double>& schedule,
                             std::size_t k, std::size_t capacity, Rng& rng) {
  if (capacity == 0) throw ConfigError("build_queues: capacity must be at least 1");
  if (sets.size() != schedule.size()) throw ConfigError("build_queues: schedule does not match trajectory sets");
  QueueSet qs;
  qs.capacity = capacity;
  qs.schedule = schedule;
  qs.queues.resize(sets.size());
  for (std::size_t i = 0; i < sets.size(); ++i) {
    for (const Trajectory& t : sets[i]) {
      if (t.size() < k) throw ConfigError("build_queues: trajectory shorter than K");
    }
    for (std::size_t c = 0; c < capacity; ++c) {
      SubTrajectory sub = sample_window(rng, sets[i], k);
      sub.noise_level = schedule[i];
      qs.queues[i].push_back(std::move(sub));
    }
  }
  return qs;
}

inline QueueSet build_queues(const std::vector<std::vector<Trajectory>>& sets, const std::vector<double>& schedule,
                             std::size_t k, std::size_t capacity, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  return build_queues(sets, schedule, k, capacity, rng);
}

/// Pushes new_sub onto queue level_index and returns the evicted oldest entry.
inline SubTrajectory queue_step(QueueSet& qs, std::size_t level_index, SubTrajectory new_sub) {
  if (level_index >= qs.levels()) throw ConfigError("queue_step: level index out of range");
  if (new_sub.noise_level != qs.schedule[level_index]) {
    throw ConfigError("queue_step: sub-trajectory noise level does not match its queue");
  }
  auto& q = qs.queues[level_index];
  SubTrajectory evicted = std::move(q.front());
  q.pop_front();
  q.push_back(std::move(new_sub));
  return evicted;
}

// ---------------------------------------------------------------------------
// JSON lines persistence

inline nlohmann::json trajectory_to_json(const Trajectory& t) {
  nlohmann::json j{{"states", t.states}, {"actions", t.actions}, {"gt_return", t.gt_return}};
  j["noise_level"] = t.noise_level ? nlohmann::json(*t.noise_level) : nlohmann::json(nullptr);
  return j;
}

inline Trajectory trajectory_from_json(const nlohmann::json& j) {
  Trajectory t;
  t.states = j.at("states").get<std::vector<int>>();
  t.actions = j.at("actions").get<std::vector<int>>();
  t.gt_return = j.at("gt_return").get<double>();
  if (j.contains("noise_level") && !j.at("noise_level").is_null()) t.noise_level = j.at("noise_level").get<double>();
  if (t.states.size() != t.actions.size()) throw IoError("trajectory: states/actions length mismatch");
  return t;
}

/// One episode per line; `level` records the set index when writing ranked sets.
inline void write_trajectory_sets(const std::filesystem::path& path, const std::vector<std::vector<Trajectory>>& sets) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (std::size_t level = 0; level < sets.size(); ++level) {
    for (const Trajectory& t : sets[level]) {
      nlohmann::json j = trajectory_to_json(t);
      j["level"] = level;
      out << j.dump() << '\n';
    }
  }
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::vector<std::vector<Trajectory>> read_trajectory_sets(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::vector<Trajectory>> sets;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto level = j.value("level", std::size_t{0});
      if (sets.size() <= level) sets.resize(level + 1);
      sets[level].push_back(trajectory_from_json(j));
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return sets;
}

inline void write_trajectories(const std::filesystem::path& path, const std::vector<Trajectory>& trajs) {
  write_trajectory_sets(path, {trajs});
}

inline std::vector<Trajectory> read_trajectories(const std::filesystem::path& path) {
  auto sets = read_trajectory_sets(path);
  std::vector<Trajectory> out;
  for (auto& s : sets) out.insert(out.end(), s.begin(), s.end());
  return out;
}

}  // namespace drasrl
