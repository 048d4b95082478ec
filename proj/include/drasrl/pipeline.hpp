#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "drasrl/checkpoint.hpp"
#include "drasrl/config.hpp"
#include "drasrl/demos.hpp"
#include "drasrl/error.hpp"
#include "drasrl/eval.hpp"
#include "drasrl/gridworld.hpp"
#include "drasrl/mdp.hpp"
#include "drasrl/trainer.hpp"

namespace drasrl {

/// A stage failed; what() is prefixed with the stage name.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& cause)
      : std::runtime_error("stage " + stage + ": " + cause), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"gen-demos",     "train-bc",     "gen-ranked", "train-reward",
                                              "eval-reward",   "train-policy", "full",       "verify-theory"};
  return names;
}

// ---------------------------------------------------------------------------
// Theory verification suite

struct TheorySummary {
  std::size_t bound_cases = 0;
  std::size_t bound_holds = 0;
  std::size_t lemma_cases = 0;
  double lemma_max_residual = 0.0;
  std::vector<BoundReport> reports;

  bool ok(double lemma_tol = 1e-8) const { return bound_holds == bound_cases && lemma_max_residual <= lemma_tol; }
};

/// Random MDPs with 2..10 states, 2..4 actions, gamma drawn from {0.5, 0.9, 0.99}.
inline TheorySummary verify_theory(std::uint64_t seed, std::size_t bound_cases = 200, std::size_t lemma_cases = 100) {
  static constexpr std::array<double, 3> gammas{0.5, 0.9, 0.99};
  TheorySummary out;
  for (std::size_t i = 0; i < bound_cases + lemma_cases; ++i) {
    Rng rng = make_rng(seed, 0xb0d0 + i);
    const std::size_t ns = 2 + uniform_index(rng, 9);
    const std::size_t na = 2 + uniform_index(rng, 3);
    const double gamma = gammas[uniform_index(rng, gammas.size())];
    const TabularMdp mdp = random_mdp(rng, ns, na, gamma);
    const StochasticPolicy pi = random_policy(rng, ns, na);
    if (i < bound_cases) {
      const StochasticPolicy pj = random_policy(rng, ns, na);
      const BoundReport rep = theorem_bound_check(mdp, pi, pj);
      ++out.bound_cases;
      if (rep.holds) ++out.bound_holds;
      out.reports.push_back(rep);
    } else {
      ++out.lemma_cases;
      out.lemma_max_residual = std::max(out.lemma_max_residual, visitation_residual(mdp, pi, discounted_visitation(mdp, pi)));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline

struct ArtifactPaths {
  std::filesystem::path root;

  std::filesystem::path manifest() const { return root / "manifest.json"; }
  std::filesystem::path demos() const { return root / "demos.jsonl"; }
  std::filesystem::path bc_policy() const { return root / "bc_policy.json"; }
  std::filesystem::path ranked() const { return root / "ranked.jsonl"; }
  std::filesystem::path heldout() const { return root / "heldout.jsonl"; }
  std::filesystem::path checkpoint() const { return root / "checkpoint"; }
  std::filesystem::path trainer_state() const { return root / "trainer_state"; }
  std::filesystem::path history() const { return root / "history.csv"; }
  std::filesystem::path eval_report() const { return root / "eval_report.json"; }
  std::filesystem::path per_level() const { return root / "per_level_returns.csv"; }
  std::filesystem::path features() const { return root / "features.csv"; }
  std::filesystem::path policy() const { return root / "policy.json"; }
  std::filesystem::path bound_reports() const { return root / "bound_reports.jsonl"; }
  std::filesystem::path failed_marker() const { return root / "FAILED"; }
};

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

inline nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
    rows.push_back(row);
  }
  return rows;
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows == 0 ? Eigen::Index{0} : static_cast<Eigen::Index>(j.at(0).size());
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j.at(r).at(c).get<double>();
  }
  return m;
}

struct PipelineOptions {
  bool resume = false;  // continue train-reward from trainer_state if present
  std::function<void(const std::string&)> log;
};

/// Runs the experiment stages. Every stage writes its artifacts under the
/// output directory and reads what it needs from there when it was not
/// produced earlier in the same process.
class Pipeline {
 public:
  Pipeline(ExperimentConfig cfg, std::filesystem::path out, PipelineOptions opts = {})
      : cfg_(std::move(cfg)), paths_{std::move(out)}, opts_(std::move(opts)), mdp_(build_gridworld(cfg_.gridworld)) {}

  const ExperimentConfig& config() const { return cfg_; }
  const ArtifactPaths& paths() const { return paths_; }
  const TabularMdp& mdp() const { return mdp_; }

  void run(const std::string& stage) {
    std::error_code ec;
    std::filesystem::create_directories(paths_.root, ec);
    if (ec) throw StageError(stage, "cannot create output directory " + paths_.root.string() + ": " + ec.message());
    std::filesystem::remove(paths_.failed_marker(), ec);
    write_manifest();
    if (stage == "full") {
      for (const char* s : {"gen-demos", "train-bc", "gen-ranked", "train-reward", "eval-reward", "train-policy"}) {
        run_one(s);
      }
    } else {
      run_one(stage);
    }
  }

  const std::vector<Trajectory>& demos() { return demos_ ? *demos_ : *(demos_ = read_trajectories(paths_.demos())); }

  const ClonedPolicy& bc() {
    if (!bc_) {
      const auto j = read_json_file(paths_.bc_policy());
      ClonedPolicy p;
      p.mle.probs = matrix_from_json(j.at("mle"));
      p.greedy = j.at("greedy").get<std::vector<int>>();
      bc_ = std::move(p);
    }
    return *bc_;
  }

  const std::vector<std::vector<Trajectory>>& ranked() {
    return ranked_ ? *ranked_ : *(ranked_ = read_trajectory_sets(paths_.ranked()));
  }

  const std::vector<Trajectory>& heldout() {
    return heldout_ ? *heldout_ : *(heldout_ = read_trajectories(paths_.heldout()));
  }

  const RewardModelParams& params() { return params_ ? *params_ : *(params_ = load_model(paths_.checkpoint())); }
  const std::optional<TrainHistory>& history() const { return history_; }
  const std::optional<EvalReport>& report() const { return report_; }
  const std::optional<QLearningResult>& policy_result() const { return policy_; }
  const std::optional<TheorySummary>& theory() const { return theory_; }

 private:
  void log(const std::string& msg) const {
    if (opts_.log) opts_.log(msg);
  }

  void run_one(const std::string& stage) {
    log("[" + stage + "]");
    try {
      if (stage == "gen-demos") gen_demos();
      else if (stage == "train-bc") train_bc();
      else if (stage == "gen-ranked") gen_ranked();
      else if (stage == "train-reward") train_reward_stage();
      else if (stage == "eval-reward") eval_reward();
      else if (stage == "train-policy") train_policy();
      else if (stage == "verify-theory") verify_theory_stage();
      else throw ConfigError("unknown stage \"" + stage + "\"");
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      std::ofstream marker(paths_.failed_marker(), std::ios::trunc);
      marker << "stage: " << stage << "\ncause: " << e.what() << "\noutputs in this directory may be partial\n";
      throw StageError(stage, e.what());
    }
  }

  void write_manifest() const {
    nlohmann::json j = config_to_json(cfg_);
    j["version"] = kVersion;
    j["config_hash"] = config_hash(cfg_);
    write_json_file(paths_.manifest(), j);
  }

  void gen_demos() {
    const StochasticPolicy demonstrator = make_demonstrator(mdp_, cfg_.demo_quality, cfg_.demo_temperature);
    demos_ = sample_trajectories(mdp_, demonstrator, cfg_.demo_episodes, cfg_.horizon, make_rng(cfg_.seed, 1)());
    write_trajectories(paths_.demos(), *demos_);
  }

  void train_bc() {
    bc_ = behavior_clone(demos(), mdp_.n_states, mdp_.n_actions);
    write_json_file(paths_.bc_policy(), {{"n_states", mdp_.n_states},
                                         {"n_actions", mdp_.n_actions},
                                         {"mle", matrix_to_json(bc_->mle.probs)},
                                         {"greedy", bc_->greedy}});
  }

  void gen_ranked() {
    ranked_ = generate_ranked_sets(mdp_, bc(), cfg_.schedule, cfg_.per_level, cfg_.horizon, make_rng(cfg_.seed, 2)());
    write_trajectory_sets(paths_.ranked(), *ranked_);
    heldout_ = generate_heldout(mdp_, cfg_.demo_quality, cfg_.heldout_qualities, cfg_.heldout_per_quality,
                                cfg_.horizon, make_rng(cfg_.seed, 3)(), cfg_.demo_temperature);
    write_trajectories(paths_.heldout(), *heldout_);
  }

  void train_reward_stage() {
    const TrainConfig tc = bind_to_mdp(cfg_.train, mdp_);
    const ActionSpace space = ActionSpace::discrete(mdp_.n_actions);
    std::optional<RewardTrainer> trainer;
    if (opts_.resume && std::filesystem::exists(paths_.trainer_state() / kManifestFile)) {
      trainer.emplace(RewardTrainer::resume(paths_.trainer_state(), ranked(), space, tc));
      log("resumed at iteration " + std::to_string(trainer->state().iteration));
    } else {
      trainer.emplace(ranked(), space, tc);
    }
    while (!trainer->done()) {
      trainer->run_iteration();
      const std::size_t it = trainer->state().iteration;
      if (tc.checkpoint_every > 0 && it % tc.checkpoint_every == 0) trainer->save(paths_.trainer_state());
    }
    params_ = trainer->state().params;
    history_ = trainer->state().history;
    save_model(*params_, paths_.checkpoint());
    history_->write_csv(paths_.history());
    if (!history_->empty()) {
      log("loss " + format_double(history_->records.front().total) + " -> " +
          format_double(history_->records.back().total));
    }
  }

  void eval_reward() {
    report_ = evaluate_reward(params(), ranked(), heldout(), demos(), cfg_.eval_normalization);
    write_json_file(paths_.eval_report(), report_to_json(*report_));
    write_per_level_csv(*report_, paths_.per_level());
    std::vector<SubTrajectory> subs;
    for (std::size_t l = 0; l < ranked().size(); ++l) {
      Rng rng = make_rng(cfg_.seed, 4'000'000 + l);
      for (std::size_t i = 0; i < cfg_.feature_windows_per_level; ++i) {
        SubTrajectory sub = sample_window(rng, ranked()[l], cfg_.context());
        sub.noise_level = cfg_.schedule[l];
        subs.push_back(std::move(sub));
      }
    }
    export_features(params(), subs, paths_.features());
    log("pearson train " + format_double(report_->pearson_train) + ", heldout " +
        format_double(report_->pearson_heldout));
  }

  void train_policy() {
    policy_ = train_policy_on_learned_reward(mdp_, params(), cfg_.rl);
    const double ret = finite_horizon_return(mdp_, policy_->policy, cfg_.horizon);
    write_json_file(paths_.policy(), {{"greedy", policy_->greedy},
                                      {"q", matrix_to_json(policy_->q)},
                                      {"ground_truth_return", ret}});
    nlohmann::json rep;
    if (report_) {
      report_->learned_policy_return = ret;
      rep = report_to_json(*report_);
    } else if (std::filesystem::exists(paths_.eval_report())) {
      rep = read_json_file(paths_.eval_report());
      rep["learned_policy_return"] = ret;
    } else {
      report_ = evaluate_reward(params(), ranked(), heldout(), demos(), cfg_.eval_normalization);
      report_->learned_policy_return = ret;
      rep = report_to_json(*report_);
    }
    write_json_file(paths_.eval_report(), rep);
    log("learned policy return " + format_double(ret));
  }

  void verify_theory_stage() {
    theory_ = verify_theory(cfg_.seed);
    std::ofstream out(paths_.bound_reports(), std::ios::trunc);
    if (!out) throw IoError("cannot write " + paths_.bound_reports().string());
    for (const auto& r : theory_->reports) {
      out << nlohmann::json{{"lhs", r.lhs}, {"rhs", r.rhs}, {"alpha", r.alpha}, {"r_max_abs", r.r_max_abs},
                            {"max_tv", r.max_tv}, {"holds", r.holds}}
                 .dump()
          << '\n';
    }
    log("bound holds in " + std::to_string(theory_->bound_holds) + "/" + std::to_string(theory_->bound_cases) +
        " cases, max visitation residual " + format_double(theory_->lemma_max_residual));
    if (!theory_->ok()) throw NumericError("theory verification failed");
  }

  ExperimentConfig cfg_;
  ArtifactPaths paths_;
  PipelineOptions opts_;
  TabularMdp mdp_;
  std::optional<std::vector<Trajectory>> demos_;
  std::optional<ClonedPolicy> bc_;
  std::optional<std::vector<std::vector<Trajectory>>> ranked_;
  std::optional<std::vector<Trajectory>> heldout_;
  std::optional<RewardModelParams> params_;
  std::optional<TrainHistory> history_;
  std::optional<EvalReport> report_;
  std::optional<QLearningResult> policy_;
  std::optional<TheorySummary> theory_;
};

/// Runs one stage (or "full") and returns the output directory.
inline std::filesystem::path run_pipeline(const ExperimentConfig& cfg, const std::string& stage = "full",
                                          std::optional<std::filesystem::path> out = std::nullopt,
                                          PipelineOptions opts = {}) {
  Pipeline p(cfg, out.value_or(cfg.output_dir), std::move(opts));
  p.run(stage);
  return p.paths().root;
}

}  // namespace drasrl
