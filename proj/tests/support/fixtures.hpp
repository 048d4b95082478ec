#pragma once

#include <random>
#include <vector>

#include "drasrl/demos.hpp"
#include "drasrl/losses.hpp"
#include "drasrl/reward_net.hpp"
#include "drasrl/trainer.hpp"

namespace drasrl::testing {

inline SubTrajectory random_window(Rng& rng, std::size_t k, std::size_t ns, std::size_t na, double eps) {
  SubTrajectory sub;
  for (std::size_t i = 0; i < k; ++i) {
    sub.states.push_back(static_cast<int>(uniform_index(rng, ns)));
    sub.actions.push_back(static_cast<int>(uniform_index(rng, na)));
  }
  sub.noise_level = eps;
  return sub;
}

/// init_params plus N(0, 0.3) jitter on every tensor, biases included.
inline RewardModelParams jittered_params(const ModelDims& dims, std::uint64_t seed) {
  RewardModelParams p = init_params(dims, seed);
  Rng rng = make_rng(seed, 77);
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& t : p.tensors) {
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] += n(rng);
  }
  return p;
}

/// A random small model with one full training step's worth of windows.
struct SmallProblem {
  RewardModelParams params;
  TrainConfig cfg;
  StepBatch batch;
  RankPairSet pairs;
  ActionSpace space = ActionSpace::discrete(3);
};

inline SmallProblem small_problem(std::uint64_t seed, InputMode mode, std::size_t k, std::size_t d_x,
                                  std::size_t layers, bool positional, std::size_t levels = 4,
                                  std::size_t anchors = 2) {
  SmallProblem p;
  p.cfg.model = ModelDims{6, 3, k, d_x, d_x, d_x, layers, mode, positional};
  p.cfg.schedule = equal_spaced_schedule(levels);
  p.cfg.anchors_per_level = anchors;
  p.params = jittered_params(p.cfg.model, seed);
  p.pairs = build_pair_set(p.cfg.schedule, p.cfg.loss.pair_threshold);
  p.space = ActionSpace::discrete(3);
  Rng rng = make_rng(seed, 99);
  p.batch.level = uniform_index(rng, levels);
  for (std::size_t a = 0; a < anchors; ++a) {
    p.batch.anchors.push_back(random_window(rng, k, 6, 3, p.cfg.schedule[p.batch.level]));
  }
  for (std::size_t l = 0; l < levels; ++l) {
    p.batch.representatives.push_back(l == p.batch.level ? p.batch.anchors.front()
                                                         : random_window(rng, k, 6, 3, p.cfg.schedule[l]));
    p.batch.candidates.push_back(random_window(rng, k, 6, 3, p.cfg.schedule[l]));
    p.batch.candidate_eps.push_back(p.cfg.schedule[l]);
  }
  return p;
}

/// The step objective with candidates encoded on the tape (full gradient).
inline LossFn step_loss_fn(const SmallProblem& p) {
  return [&p](ad::Tape&, const BoundParams& bp) {
    return build_step_loss(bp, p.batch, p.cfg, p.space, p.pairs, std::nullopt).total;
  };
}

/// The step objective with candidate features frozen at `frozen`.
inline LossFn detached_step_loss_fn(const SmallProblem& p, const Matrix& frozen) {
  return [&p, &frozen](ad::Tape&, const BoundParams& bp) {
    return build_step_loss(bp, p.batch, p.cfg, p.space, p.pairs, frozen).total;
  };
}

}  // namespace drasrl::testing
