#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "drasrl/eval.hpp"
#include "drasrl/gridworld.hpp"
#include "support/fixtures.hpp"

using namespace drasrl;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  return lines;
}

std::size_t count_columns(const std::string& line) {
  return static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
}

Trajectory make_episode(std::vector<int> states, std::vector<int> actions) {
  Trajectory t;
  t.states = std::move(states);
  t.actions = std::move(actions);
  return t;
}

// Reward of step t inside a window is 100 * start + 10 * t + state, so the
// window that labeled each step can be read back from the output.
Vector tagging_reward(const SubTrajectory& sub) {
  Vector r(static_cast<Eigen::Index>(sub.size()));
  for (std::size_t t = 0; t < sub.size(); ++t) {
    r(static_cast<Eigen::Index>(t)) = 100.0 * static_cast<double>(sub.start) + 10.0 * static_cast<double>(t) + sub.states[t];
  }
  return r;
}

}  // namespace

// --- Pearson ---------------------------------------------------------------

TEST(Pearson, ClosedFormThreePoints) {
  // Centered x = (-1, 0, 1), centered y = (-4/3, -1/3, 5/3).
  const double sxy = 3.0, sxx = 2.0, syy = 14.0 / 3.0;
  const double expected = sxy / std::sqrt(sxx * syy);
  const std::vector<double> xs{1, 2, 3}, ys{1, 2, 4};
  EXPECT_NEAR(pearson_correlation(xs, ys), expected, 1e-15);
  EXPECT_NEAR(expected, 0.9819805060619656, 1e-15);
}

TEST(Pearson, IdentityAndNegation) {
  const std::vector<double> xs{0.3, -1.2, 5.0, 2.2};
  std::vector<double> neg;
  for (double x : xs) neg.push_back(-x);
  EXPECT_DOUBLE_EQ(pearson_correlation(xs, xs), 1.0);
  EXPECT_DOUBLE_EQ(pearson_correlation(xs, neg), -1.0);
}

TEST(Pearson, PositiveAffineInvariance) {
  Rng rng = make_rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> xs(20), ys(20);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      xs[i] = n(rng);
      ys[i] = 0.5 * xs[i] + n(rng);
    }
    const double a = std::exp(n(rng) * 2.0), b = n(rng) * 100.0;
    std::vector<double> xt(xs);
    for (double& x : xt) x = a * x + b;
    const double r = pearson_correlation(xs, ys);
    EXPECT_NEAR(pearson_correlation(xt, ys), r, 1e-10);
    EXPECT_NEAR(pearson_correlation(ys, xt), r, 1e-10);
    EXPECT_LE(std::abs(r), 1.0);
  }
}

TEST(Pearson, Errors) {
  const std::vector<double> a{1, 2, 3}, b{1, 2}, c{4, 4, 4}, one{1};
  EXPECT_THROW(pearson_correlation(a, b), ConfigError);
  EXPECT_THROW(pearson_correlation(one, one), ConfigError);
  EXPECT_THROW(pearson_correlation(a, c), NumericError);
}

// --- running normalization -------------------------------------------------

TEST(RunningStats, ConstantStreamNormalizesToZero) {
  RunningStats s;
  for (int i = 0; i < 5; ++i) EXPECT_EQ(normalize_reward(s, 7.5), 0.0);
}

TEST(RunningStats, TwoSampleStream) {
  RunningStats s;
  EXPECT_EQ(normalize_reward(s, 0.0), 0.0);
  // mean 1, population std 1
  EXPECT_DOUBLE_EQ(normalize_reward(s, 2.0), 1.0);
}

TEST(RunningStats, ControlPenaltyIsAdditive) {
  RunningStats a, b;
  normalize_reward(a, 0.0);
  normalize_reward(b, 0.0);
  EXPECT_DOUBLE_EQ(normalize_reward(a, 2.0, -0.25), normalize_reward(b, 2.0) - 0.25);
}

TEST(RunningStats, EveryPrefixMatchesBatchStatistics) {
  Rng rng = make_rng(11);
  std::normal_distribution<double> n(3.0, 4.0);
  RunningStats s;
  std::vector<double> seen;
  for (int i = 0; i < 200; ++i) {
    const double x = n(rng);
    s.update(x);
    seen.push_back(x);
    double mean = 0.0;
    for (double v : seen) mean += v;
    mean /= static_cast<double>(seen.size());
    double var = 0.0;
    for (double v : seen) var += (v - mean) * (v - mean);
    var /= static_cast<double>(seen.size());
    ASSERT_NEAR(s.mean, mean, 1e-10);
    ASSERT_NEAR(s.std(), std::sqrt(var), 1e-10);
  }
}

TEST(Squash, Values) {
  EXPECT_EQ(squash_reward(0.0), 0.5);
  EXPECT_NEAR(squash_reward(1.0), 1.0 / (1.0 + std::exp(-1.0)), 1e-16);
  EXPECT_NEAR(squash_reward(1.0), 0.73106, 1e-5);
  EXPECT_LT(squash_reward(3.0), squash_reward(4.0));
  EXPECT_EQ(squash_reward(800.0), 1.0);
  EXPECT_EQ(squash_reward(-800.0), 0.0);
}

// --- labeling --------------------------------------------------------------

TEST(LabelEpisode, ExactlyOneWindow) {
  const Trajectory ep = make_episode({1, 2, 3}, {0, 0, 0});
  const Vector r = label_episode(ep, tagging_reward, 3);
  ASSERT_EQ(r.size(), 3);
  EXPECT_EQ(r(0), 1.0);
  EXPECT_EQ(r(1), 12.0);
  EXPECT_EQ(r(2), 23.0);
}

TEST(LabelEpisode, TwoWindowsAreIndependent) {
  const Trajectory ep = make_episode({1, 2, 3, 4}, {0, 0, 0, 0});
  const Vector r = label_episode(ep, tagging_reward, 2);
  ASSERT_EQ(r.size(), 4);
  EXPECT_EQ(r(0), 1.0);
  EXPECT_EQ(r(1), 12.0);
  EXPECT_EQ(r(2), 203.0);
  EXPECT_EQ(r(3), 214.0);
}

TEST(LabelEpisode, RemainderComesFromTailWindow) {
  // len 5, K 2: windows at 0 and 2, remainder step 4 from the window at 3.
  const Trajectory ep = make_episode({1, 2, 3, 4, 5}, {0, 0, 0, 0, 0});
  const Vector r = label_episode(ep, tagging_reward, 2);
  ASSERT_EQ(r.size(), 5);
  EXPECT_EQ(r(3), 214.0);
  EXPECT_EQ(r(4), 315.0);
}

TEST(LabelEpisode, SlidingAveragesCoveringWindows) {
  const Trajectory ep = make_episode({1, 2, 3}, {0, 0, 0});
  const Vector r = label_episode(ep, tagging_reward, 2, LabelMode::Sliding);
  // step 1 is covered by (start 0, t 1) and (start 1, t 0)
  EXPECT_EQ(r(0), 1.0);
  EXPECT_DOUBLE_EQ(r(1), (12.0 + 102.0) / 2.0);
  EXPECT_EQ(r(2), 113.0);
}

TEST(LabelEpisode, LengthAlwaysMatches) {
  Rng rng = make_rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 1 + uniform_index(rng, 5);
    const std::size_t len = k + uniform_index(rng, 12);
    Trajectory ep;
    for (std::size_t t = 0; t < len; ++t) {
      ep.states.push_back(static_cast<int>(uniform_index(rng, 6)));
      ep.actions.push_back(static_cast<int>(uniform_index(rng, 3)));
    }
    EXPECT_EQ(static_cast<std::size_t>(label_episode(ep, tagging_reward, k).size()), len);
    EXPECT_EQ(static_cast<std::size_t>(label_episode(ep, tagging_reward, k, LabelMode::Sliding).size()), len);
  }
}

TEST(LabelEpisode, SingletonWindowsMatchPredictedReturns) {
  const ModelDims dims{6, 3, 1, 4, 4, 4, 1, InputMode::StateAction, false};
  const RewardModelParams params = drasrl::testing::jittered_params(dims, 8);
  const Trajectory ep = make_episode({0, 5, 2, 2}, {1, 0, 2, 1});
  const Vector r = label_episode(ep, params, 1);
  for (std::size_t t = 0; t < ep.size(); ++t) {
    const SubTrajectory sub = extract_window(ep, t, 1, 0);
    EXPECT_NEAR(r(static_cast<Eigen::Index>(t)), predicted_return(params, sub), 1e-12);
  }
}

TEST(LabelEpisode, Errors) {
  const Trajectory ep = make_episode({1, 2}, {0, 0});
  EXPECT_THROW(label_episode(ep, tagging_reward, 3), ConfigError);
  EXPECT_THROW(label_episode(ep, tagging_reward, 0), ConfigError);
}

TEST(CachedRewardFn, CallsOncePerDistinctWindow) {
  int calls = 0;
  CachedRewardFn cached([&calls](const SubTrajectory& s) {
    ++calls;
    return tagging_reward(s);
  });
  const Trajectory ep = make_episode({1, 1, 1, 1, 1, 1}, {0, 0, 0, 0, 0, 0});
  // windows differ only by start, which is not part of the key
  label_episode(ep, cached, 2);
  EXPECT_EQ(calls, 1);
  EXPECT_EQ(cached.size(), 1u);
}

// --- Q-learning ------------------------------------------------------------

TEST(QLearning, GroundTruthStubRecoversOptimalPolicy) {
  const TabularMdp mdp = build_gridworld(default_gridworld());
  const auto vi = value_iteration(mdp, 10000, 1e-12);
  QLearningConfig cfg;
  cfg.episodes = 10000;
  cfg.seed = 1;
  const auto res = train_policy_on_learned_reward(mdp, table_reward_fn(mdp.reward), 1, cfg);
  res.policy.validate_for(mdp);
  // Exact ties between actions make "same argmax" ill-posed; require the
  // chosen action to be optimal, and an exact match where the gap is clear.
  const double scale = vi.values.cwiseAbs().maxCoeff();
  std::size_t clear = 0, matched = 0;
  for (std::size_t s = 0; s < mdp.n_states; ++s) {
    const auto si = static_cast<Eigen::Index>(s);
    EXPECT_GE(vi.q(si, res.greedy[s]), vi.values(si) - 1e-2 * scale) << "state " << s;
    Vector row = vi.q.row(si).transpose();
    std::sort(row.begin(), row.end());
    if (row(row.size() - 1) - row(row.size() - 2) > 0.05 * scale) {
      ++clear;
      if (res.greedy[s] == vi.greedy[s]) ++matched;
    }
  }
  EXPECT_GT(clear, 0u);
  EXPECT_EQ(matched, clear);
  EXPECT_NEAR(policy_return(mdp, res.policy), policy_return(mdp, StochasticPolicy::deterministic(vi.greedy, mdp.n_actions)),
              1e-2 * scale);
}

TEST(QLearning, ZeroRewardModelGivesValidPolicy) {
  const TabularMdp mdp = build_gridworld(default_gridworld());
  const ModelDims dims{mdp.n_states, mdp.n_actions, 5, 8, 8, 8, 1, InputMode::StateOnly, true};
  RewardModelParams params = init_params(dims, 2);
  params.omega().setZero();
  QLearningConfig cfg;
  cfg.episodes = 50;
  const auto res = train_policy_on_learned_reward(mdp, params, cfg);
  res.policy.validate_for(mdp);
  EXPECT_TRUE(res.q.isZero(0.0));
  EXPECT_TRUE(std::isfinite(policy_return(mdp, res.policy)));
}

TEST(QLearning, IsDeterministicGivenSeed) {
  const TabularMdp mdp = build_gridworld(default_gridworld());
  QLearningConfig cfg;
  cfg.episodes = 200;
  cfg.seed = 9;
  cfg.normalize = true;
  cfg.squash = true;
  const auto a = train_policy_on_learned_reward(mdp, table_reward_fn(mdp.reward), 2, cfg);
  const auto b = train_policy_on_learned_reward(mdp, table_reward_fn(mdp.reward), 2, cfg);
  EXPECT_EQ(a.q, b.q);
}

TEST(QLearning, ConfigErrors) {
  const TabularMdp mdp = build_gridworld(default_gridworld());
  QLearningConfig cfg;
  cfg.horizon = 4;
  EXPECT_THROW(train_policy_on_learned_reward(mdp, table_reward_fn(mdp.reward), 5, cfg), ConfigError);
  cfg.horizon = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.horizon = 10;
  cfg.alpha = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(QLearning, NonFiniteRewardAborts) {
  const TabularMdp mdp = build_gridworld(default_gridworld());
  QLearningConfig cfg;
  cfg.episodes = 2;
  const WindowRewardFn bad = [](const SubTrajectory& s) {
    return Vector::Constant(static_cast<Eigen::Index>(s.size()), std::numeric_limits<double>::infinity());
  };
  EXPECT_THROW(train_policy_on_learned_reward(mdp, bad, 1, cfg), NumericError);
}

// --- evaluate_reward -------------------------------------------------------

namespace {

struct EvalFixture {
  TabularMdp mdp = build_gridworld(default_gridworld());
  std::vector<std::vector<Trajectory>> sets;
  std::vector<Trajectory> heldout;
  std::vector<Trajectory> demos;

  EvalFixture() {
    demos = sample_trajectories(mdp, make_demonstrator(mdp, 0.3), 6, 30, 1);
    const auto bc = behavior_clone(demos, mdp.n_states, mdp.n_actions);
    sets = generate_ranked_sets(mdp, bc, equal_spaced_schedule(4), 5, 30, 2);
    heldout = generate_heldout(mdp, 0.3, 3, 4, 30, 3);
  }
};

}  // namespace

TEST(EvaluateReward, OracleAndAntiOracle) {
  const EvalFixture f;
  const auto rep = evaluate_reward(table_reward_fn(f.mdp.reward), 1, f.sets, f.heldout, f.demos);
  EXPECT_NEAR(rep.pearson_train, 1.0, 1e-12);
  EXPECT_NEAR(rep.pearson_heldout, 1.0, 1e-12);
  const auto anti = evaluate_reward(table_reward_fn(f.mdp.reward, -1.0), 1, f.sets, f.heldout, f.demos);
  EXPECT_NEAR(anti.pearson_train, -1.0, 1e-12);
  EXPECT_NEAR(anti.pearson_heldout, -1.0, 1e-12);
}

TEST(EvaluateReward, OracleHoldsForAnyContext) {
  const EvalFixture f;
  for (std::size_t k : {2u, 5u, 7u}) {
    const auto rep = evaluate_reward(table_reward_fn(f.mdp.reward), k, f.sets, f.heldout, f.demos);
    EXPECT_NEAR(rep.pearson_train, 1.0, 1e-12) << k;
  }
}

TEST(EvaluateReward, AffineNormalizationMatchesRangeAndKeepsPearson) {
  const EvalFixture f;
  const auto fn = table_reward_fn(f.mdp.reward * 0.1, 1.0);
  const auto raw = evaluate_reward(fn, 1, f.sets, f.heldout, f.demos);
  const auto norm = evaluate_reward(fn, 1, f.sets, f.heldout, f.demos, ReturnNormalization::PerSetAffine);
  EXPECT_NEAR(norm.pearson_train, raw.pearson_train, 1e-10);
  const auto [pmin, pmax] = std::minmax_element(norm.train_predicted.begin(), norm.train_predicted.end());
  const auto [gmin, gmax] = std::minmax_element(norm.train_gt.begin(), norm.train_gt.end());
  EXPECT_NEAR(*pmin, *gmin, 1e-9);
  EXPECT_NEAR(*pmax, *gmax, 1e-9);
}

TEST(EvaluateReward, PerLevelMeansAndDemoStats) {
  const EvalFixture f;
  const auto rep = evaluate_reward(table_reward_fn(f.mdp.reward), 1, f.sets, f.heldout, f.demos);
  ASSERT_EQ(rep.per_level.size(), f.sets.size());
  for (std::size_t l = 0; l < f.sets.size(); ++l) {
    double sum = 0.0;
    for (const auto& t : f.sets[l]) sum += recompute_return(f.mdp, t);
    EXPECT_NEAR(rep.per_level[l].mean_gt_return, sum / static_cast<double>(f.sets[l].size()), 1e-12);
    EXPECT_NEAR(rep.per_level[l].mean_predicted_return, rep.per_level[l].mean_gt_return, 1e-12);
    EXPECT_EQ(rep.per_level[l].noise_level, equal_spaced_schedule(4)[l]);
  }
  double best = -1e300, sum = 0.0;
  for (const auto& d : f.demos) {
    best = std::max(best, d.gt_return);
    sum += d.gt_return;
  }
  EXPECT_DOUBLE_EQ(rep.best_demo_return, best);
  EXPECT_NEAR(rep.demonstrator_return, sum / 6.0, 1e-12);
  const auto j = report_to_json(rep);
  EXPECT_EQ(j.at("per_level").size(), 4u);
}

TEST(GenerateHeldout, QualitiesAboveDemonstrator) {
  const TabularMdp mdp = build_gridworld(default_gridworld());
  const auto h = generate_heldout(mdp, 0.3, 3, 4, 25, 7);
  ASSERT_EQ(h.size(), 12u);
  for (const auto& t : h) {
    EXPECT_EQ(t.size(), 25u);
    EXPECT_DOUBLE_EQ(t.gt_return, recompute_return(mdp, t));
  }
  EXPECT_EQ(h, generate_heldout(mdp, 0.3, 3, 4, 25, 7));
  EXPECT_THROW(generate_heldout(mdp, 0.3, 0, 4, 25, 7), ConfigError);
}

// --- export ----------------------------------------------------------------

TEST(ExportFeatures, EmptyListWritesHeaderOnly) {
  const ModelDims dims{6, 3, 5, 8, 8, 8, 1, InputMode::StateOnly, true};
  const auto params = init_params(dims, 1);
  const fs::path p = fs::temp_directory_path() / "drasrl_features_empty.csv";
  export_features(params, {}, p);
  const auto lines = read_lines(p);
  ASSERT_EQ(lines.size(), 1u);
  EXPECT_EQ(count_columns(lines[0]), 43u);
  EXPECT_EQ(lines[0].rfind("noise_level,source_id,start,f0,", 0), 0u);
}

TEST(ExportFeatures, RowShapeAndValues) {
  const ModelDims dims{6, 3, 5, 8, 8, 8, 1, InputMode::StateOnly, true};
  const auto params = drasrl::testing::jittered_params(dims, 1);
  Rng rng = make_rng(2);
  std::vector<SubTrajectory> subs;
  for (int i = 0; i < 3; ++i) {
    subs.push_back(drasrl::testing::random_window(rng, 5, 6, 3, 0.25));
    subs.back().source_id = 10 + i;
    subs.back().start = 2;
  }
  const fs::path p = fs::temp_directory_path() / "drasrl_features.csv";
  export_features(params, subs, p);
  const auto lines = read_lines(p);
  ASSERT_EQ(lines.size(), 4u);
  const Matrix f = encode(params, subs[1]);
  std::stringstream row(lines[2]);
  std::vector<std::string> cells;
  for (std::string c; std::getline(row, c, ',');) cells.push_back(c);
  ASSERT_EQ(cells.size(), 43u);
  EXPECT_EQ(std::stod(cells[0]), 0.25);
  EXPECT_EQ(cells[1], "11");
  EXPECT_EQ(cells[2], "2");
  // row-major, exact through %.17g
  EXPECT_EQ(std::stod(cells[3 + 8 + 3]), f(1, 3));
}

TEST(ExportFeatures, UnwritablePathThrows) {
  const ModelDims dims{6, 3, 2, 4, 4, 4, 1, InputMode::StateOnly, false};
  EXPECT_THROW(export_features(init_params(dims, 1), {}, "/nonexistent_dir/x.csv"), IoError);
}

TEST(PerLevelCsv, Layout) {
  EvalReport rep;
  rep.per_level = {{0.0, 1.5, 2.0}, {0.5, -1.0, 0.25}};
  const fs::path p = fs::temp_directory_path() / "drasrl_levels.csv";
  write_per_level_csv(rep, p);
  const auto lines = read_lines(p);
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0], "noise_level,mean_gt_return,mean_predicted_return");
  EXPECT_EQ(lines[2], "0.5,-1,0.25");
}
