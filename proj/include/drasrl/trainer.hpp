#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "drasrl/checkpoint.hpp"
#include "drasrl/demos.hpp"
#include "drasrl/error.hpp"
#include "drasrl/losses.hpp"
#include "drasrl/reward_net.hpp"
#include "drasrl/rng.hpp"

namespace drasrl {

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay

struct AdamHyper {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
};

struct AdamState {
  std::size_t step = 0;
  std::vector<Matrix> m;
  std::vector<Matrix> v;

  static AdamState zeros_like(const std::vector<Matrix>& params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.push_back(Matrix::Zero(p.rows(), p.cols()));
      s.v.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
    return s;
  }
};

/// One bias-corrected Adam step. Weight decay shrinks parameters by
/// (1 - lr * wd) before the moment update is applied, independent of m and v.
inline void adam_step(std::vector<Matrix>& params, const std::vector<Matrix>& grads, AdamState& state,
                      const AdamHyper& hyper) {
  if (grads.size() != params.size()) throw ConfigError("adam_step: gradient count does not match parameters");
  if (state.m.empty()) state = AdamState::zeros_like(params);
  if (state.m.size() != params.size()) throw ConfigError("adam_step: optimizer state does not match parameters");
  ++state.step;
  const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].rows() != params[i].rows() || grads[i].cols() != params[i].cols() ||
        state.m[i].rows() != params[i].rows() || state.m[i].cols() != params[i].cols()) {
      throw ConfigError("adam_step: shape mismatch at tensor " + std::to_string(i));
    }
    state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * grads[i];
    state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * grads[i].cwiseAbs2();
    if (hyper.weight_decay != 0.0) params[i] *= 1.0 - hyper.learning_rate * hyper.weight_decay;
    params[i].array() -=
        hyper.learning_rate * (state.m[i].array() / c1) / ((state.v[i].array() / c2).sqrt() + hyper.epsilon);
  }
}

// ---------------------------------------------------------------------------
// Configuration and history

enum class CandidateMode { OnePerQueue, WholeQueue };
enum class DistanceTerm { Contrastive, Mse, None };

struct TrainConfig {
  std::size_t iterations = 150;
  std::size_t anchors_per_level = 3;
  AdamHyper adam;
  LossConfig loss;
  std::vector<double> schedule;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;
  std::size_t queue_capacity = 8;
  CandidateMode candidates = CandidateMode::OnePerQueue;
  bool detach_candidates = true;
  DistanceTerm distance_term = DistanceTerm::Contrastive;
  bool rank_term = true;
  ModelDims model;  // n_states / n_actions are taken from the MDP

  std::size_t context() const { return model.context; }

  void validate() const {
    if (!(adam.learning_rate >= 0.0)) throw ConfigError("train.learning_rate must be >= 0");
    if (anchors_per_level == 0) throw ConfigError("train.anchors_per_level must be >= 1");
    if (queue_capacity == 0) throw ConfigError("train.queue_capacity must be >= 1");
    if (schedule.empty()) throw ConfigError("train.schedule must not be empty");
    if (distance_term == DistanceTerm::None && !rank_term) throw ConfigError("train: objective has no terms");
    loss.validate();
    model.validate();
  }
};

struct HistoryRecord {
  std::size_t iteration = 0;
  std::optional<double> l_d;
  std::optional<double> l_r;
  double total = 0.0;
  double grad_norm = 0.0;

  friend bool operator==(const HistoryRecord&, const HistoryRecord&) = default;
};

struct TrainHistory {
  std::vector<HistoryRecord> records;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }

  std::string to_csv() const {
    std::ostringstream out;
    out << std::setprecision(17) << "iteration,l_d,l_r,total,grad_norm\n";
    for (const auto& r : records) {
      out << r.iteration << ',';
      if (r.l_d) out << *r.l_d;
      out << ',';
      if (r.l_r) out << *r.l_r;
      out << ',' << r.total << ',' << r.grad_norm << '\n';
    }
    return out.str();
  }

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << to_csv();
  }

  friend bool operator==(const TrainHistory&, const TrainHistory&) = default;
};

inline nlohmann::json history_to_json(const TrainHistory& h) {
  nlohmann::json arr = nlohmann::json::array();
  auto opt = [](const std::optional<double>& x) { return x ? nlohmann::json(*x) : nlohmann::json(nullptr); };
  for (const auto& r : h.records) {
    arr.push_back({{"iteration", r.iteration}, {"l_d", opt(r.l_d)}, {"l_r", opt(r.l_r)},
                   {"total", r.total}, {"grad_norm", r.grad_norm}});
  }
  return arr;
}

inline TrainHistory history_from_json(const nlohmann::json& j) {
  TrainHistory h;
  auto opt = [](const nlohmann::json& x) { return x.is_null() ? std::optional<double>() : x.get<double>(); };
  for (const auto& r : j) {
    h.records.push_back({r.at("iteration").get<std::size_t>(), opt(r.at("l_d")), opt(r.at("l_r")),
                         r.at("total").get<double>(), r.at("grad_norm").get<double>()});
  }
  return h;
}

inline nlohmann::json sub_to_json(const SubTrajectory& s) {
  return {{"states", s.states}, {"actions", s.actions}, {"noise_level", s.noise_level},
          {"source_id", s.source_id}, {"start", s.start}};
}

inline SubTrajectory sub_from_json(const nlohmann::json& j) {
  SubTrajectory s;
  s.states = j.at("states").get<std::vector<int>>();
  s.actions = j.at("actions").get<std::vector<int>>();
  s.noise_level = j.at("noise_level").get<double>();
  s.source_id = j.at("source_id").get<std::size_t>();
  s.start = j.at("start").get<std::size_t>();
  return s;
}

// ---------------------------------------------------------------------------
// One optimization step

/// Everything one (iteration, level) step looks at.
struct StepBatch {
  std::size_t level = 0;
  std::vector<SubTrajectory> anchors;          // fresh windows at this level
  std::vector<SubTrajectory> representatives;  // one fresh window per level, for ranking
  std::vector<SubTrajectory> candidates;       // drawn from the queues
  std::vector<double> candidate_eps;
};

struct StepTerms {
  ad::Var total;
  std::optional<ad::Var> l_d;
  std::optional<ad::Var> l_r;
};

/// Flattened features of many windows, one row each, evaluated without gradients.
inline Matrix encode_flat_batch(const RewardModelParams& params, const std::vector<SubTrajectory>& subs) {
  const auto width = static_cast<Eigen::Index>(params.dims.context * params.dims.feature_dim());
  Matrix out(static_cast<Eigen::Index>(subs.size()), width);
  if (subs.empty()) return out;
  ad::Tape tape;
  const BoundParams bp = bind(tape, params, false);
  out = flatten_batch(encode(bp, subs), subs.size()).value();
  return out;
}

/// Builds the step objective on the tape. When candidate_features is given the
/// candidates enter as constants (no gradient flows through them); otherwise
/// they are encoded on the tape with the bound parameters.
inline StepTerms build_step_loss(const BoundParams& bp, const StepBatch& batch, const TrainConfig& cfg,
                                 ActionSpace space, const RankPairSet& pairs,
                                 const std::optional<Matrix>& candidate_features) {
  ad::Tape& tape = bp.tape();
  const ad::Var omega = bp[bp.layout().omega];
  const double anchor_eps = cfg.schedule[batch.level];
  StepTerms out;

  // one batch: this level's anchors, then one representative for every other level
  const std::size_t n_anchor = batch.anchors.size();
  std::vector<SubTrajectory> windows(batch.anchors);
  const bool need_returns = cfg.rank_term || cfg.distance_term == DistanceTerm::Mse;
  const std::size_t levels = batch.representatives.size();
  Matrix rep_select = Matrix::Zero(static_cast<Eigen::Index>(levels), 0);
  if (need_returns) {
    for (std::size_t l = 0; l < levels; ++l) {
      if (l != batch.level) windows.push_back(batch.representatives[l]);
    }
    // row l picks the window holding level l's representative; this level reuses its first anchor
    rep_select = Matrix::Zero(static_cast<Eigen::Index>(levels), static_cast<Eigen::Index>(windows.size()));
    for (std::size_t l = 0, next = n_anchor; l < levels; ++l) {
      rep_select(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(l == batch.level ? 0 : next++)) = 1.0;
    }
  }
  const ad::Var features = encode(bp, windows);
  const auto k = static_cast<Eigen::Index>(cfg.context());

  std::optional<ad::Var> returns;
  if (need_returns) {
    const ad::Var step_rewards = ad::reshape(reward_seq(features, omega), static_cast<Eigen::Index>(windows.size()), k);
    const ad::Var window_returns = ad::matmul(step_rewards, tape.constant(Matrix::Ones(k, 1), "sum_steps"));
    returns = ad::matmul(tape.constant(std::move(rep_select), "representatives"), window_returns);
  }

  if (cfg.distance_term == DistanceTerm::Contrastive) {
    const ad::Var flat = flatten_batch(features, windows.size());
    ad::Var cands;
    if (candidate_features) {
      cands = tape.constant(*candidate_features, "candidate_features");
    } else {
      cands = flatten_batch(encode(bp, batch.candidates), batch.candidates.size());
    }
    const auto labels = soft_labels(anchor_eps, batch.candidate_eps, space);
    std::vector<ad::Var> per_anchor;
    for (std::size_t i = 0; i < n_anchor; ++i) {
      per_anchor.push_back(distance_aware_loss(ad::slice_rows(flat, static_cast<Eigen::Index>(i), 1), cands, labels, cfg.loss));
    }
    out.l_d = ad::mean(ad::concat_rows(per_anchor));
  } else if (cfg.distance_term == DistanceTerm::Mse && levels >= 2) {
    // every unordered pair of representatives, target beta * Dist
    const auto n = static_cast<Eigen::Index>(levels);
    const Eigen::Index n_pairs = n * (n - 1) / 2;
    Matrix diff = Matrix::Zero(n_pairs, n);
    Matrix target(n_pairs, 1);
    Eigen::Index p = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = i + 1; j < n; ++j, ++p) {
        diff(p, i) = 1.0;
        diff(p, j) = -1.0;
        target(p, 0) = cfg.loss.beta * simplified_tv(cfg.schedule[static_cast<std::size_t>(i)],
                                                     cfg.schedule[static_cast<std::size_t>(j)], space);
      }
    }
    const ad::Var gaps = ad::abs(ad::matmul(tape.constant(std::move(diff), "pair_diff"), *returns));
    out.l_d = ad::mean(ad::square(ad::sub(gaps, tape.constant(std::move(target), "mse_target"))));
  }

  if (cfg.rank_term && !pairs.empty()) out.l_r = rank_loss(*returns, pairs);

  if (out.l_d && out.l_r) {
    out.total = total_loss(*out.l_d, *out.l_r, cfg.loss);
  } else if (out.l_d) {
    out.total = *out.l_d;
  } else if (out.l_r) {
    out.total = *out.l_r;  // rank-only objective
  } else {
    out.total = tape.constant(Matrix::Zero(1, 1), "empty_objective");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainerState {
  RewardModelParams params;
  AdamState adam;
  QueueSet queues;
  Rng rng;
  std::size_t iteration = 0;
  TrainHistory history;
};

/// The queue-based reward learning loop. Every iteration draws fresh anchors for
/// each level, then takes one Adam step per level and rotates that level's queue.
class RewardTrainer {
 public:
  RewardTrainer(std::vector<std::vector<Trajectory>> sets, ActionSpace space, TrainConfig cfg)
      : sets_(std::move(sets)), space_(space), cfg_(std::move(cfg)) {
    cfg_.validate();
    if (sets_.size() != cfg_.schedule.size()) throw ConfigError("train: schedule does not match trajectory sets");
    pairs_ = build_pair_set(cfg_.schedule, cfg_.loss.pair_threshold);
    state_.params = init_params(cfg_.model, cfg_.seed);
    state_.adam = AdamState::zeros_like(state_.params.tensors);
    state_.rng = make_rng(cfg_.seed, 0x7a11);
    state_.queues = build_queues(sets_, cfg_.schedule, cfg_.context(), cfg_.queue_capacity, state_.rng);
  }

  RewardTrainer(std::vector<std::vector<Trajectory>> sets, ActionSpace space, TrainConfig cfg, TrainerState state)
      : sets_(std::move(sets)), space_(space), cfg_(std::move(cfg)), state_(std::move(state)) {
    cfg_.validate();
    if (sets_.size() != cfg_.schedule.size()) throw ConfigError("train: schedule does not match trajectory sets");
    pairs_ = build_pair_set(cfg_.schedule, cfg_.loss.pair_threshold);
    if (!(state_.params.dims == cfg_.model)) throw ConfigError("train: checkpoint model dims differ from config");
  }

  const TrainerState& state() const { return state_; }
  const TrainConfig& config() const { return cfg_; }
  const RankPairSet& pairs() const { return pairs_; }
  bool done() const { return state_.iteration >= cfg_.iterations; }

  /// Runs iterations until `until` (capped at the configured count).
  void run(std::size_t until) {
    until = std::min(until, cfg_.iterations);
    while (state_.iteration < until) run_iteration();
  }
  void run() { run(cfg_.iterations); }

  void run_iteration() {
    const std::size_t levels = cfg_.schedule.size();
    const std::size_t k = cfg_.context();
    std::vector<std::vector<SubTrajectory>> anchors(levels);
    for (std::size_t l = 0; l < levels; ++l) {
      for (std::size_t a = 0; a < cfg_.anchors_per_level; ++a) {
        SubTrajectory sub = sample_window(state_.rng, sets_[l], k);
        sub.noise_level = cfg_.schedule[l];
        anchors[l].push_back(std::move(sub));
      }
    }
    std::vector<SubTrajectory> representatives;
    for (std::size_t l = 0; l < levels; ++l) representatives.push_back(anchors[l].front());

    double sum_d = 0.0, sum_r = 0.0, sum_total = 0.0, sum_norm = 0.0;
    std::size_t n_d = 0, n_r = 0;
    for (std::size_t level = 0; level < levels; ++level) {
      StepBatch batch;
      batch.level = level;
      batch.anchors = anchors[level];
      batch.representatives = representatives;
      gather_candidates(batch);

      std::optional<Matrix> cand_features;
      if (cfg_.detach_candidates && cfg_.distance_term == DistanceTerm::Contrastive) {
        cand_features = encode_flat_batch(state_.params, batch.candidates);
      }

      const auto where = [&] {
        return "iteration " + std::to_string(state_.iteration) + ", level " + std::to_string(level);
      };
      ad::Tape tape;
      const BoundParams bp = bind(tape, state_.params, true);
      StepTerms terms;
      try {
        terms = build_step_loss(bp, batch, cfg_, space_, pairs_, cand_features);
        tape.backward(terms.total);
      } catch (const NumericError& e) {
        throw NumericError("train: " + where() + ": " + e.what());
      }
      const double total = terms.total.scalar();
      if (!std::isfinite(total)) throw NumericError("train: non-finite loss at " + where());
      Gradients grads;
      for (std::size_t i = 0; i < bp.vars.size(); ++i) {
        grads.push_back(tape.grad(bp.vars[i]));
        if (!grads.back().allFinite()) {
          throw NumericError("train: non-finite gradient for " + state_.params.layout.specs[i].name + " at " + where());
        }
      }
      adam_step(state_.params.tensors, grads, state_.adam, cfg_.adam);

      if (terms.l_d) {
        sum_d += terms.l_d->scalar();
        ++n_d;
      }
      if (terms.l_r) {
        sum_r += terms.l_r->scalar();
        ++n_r;
      }
      sum_total += total;
      sum_norm += gradient_norm(grads);

      for (auto& a : anchors[level]) queue_step(state_.queues, level, a);
    }

    HistoryRecord rec;
    rec.iteration = state_.iteration;
    if (n_d > 0) rec.l_d = sum_d / static_cast<double>(n_d);
    if (n_r > 0) rec.l_r = sum_r / static_cast<double>(n_r);
    rec.total = sum_total / static_cast<double>(levels);
    rec.grad_norm = sum_norm / static_cast<double>(levels);
    state_.history.records.push_back(rec);
    ++state_.iteration;
  }

  /// Writes params, optimizer moments, queues, RNG and history.
  void save(const std::filesystem::path& dir) const {
    nlohmann::json header;
    header["kind"] = "trainer";
    header["dims"] = state_.params.dims;
    header["iteration"] = state_.iteration;
    header["adam_step"] = state_.adam.step;
    header["rng"] = serialize_rng(state_.rng);
    header["history"] = history_to_json(state_.history);
    nlohmann::json queues = nlohmann::json::array();
    for (const auto& q : state_.queues.queues) {
      nlohmann::json items = nlohmann::json::array();
      for (const auto& s : q) items.push_back(sub_to_json(s));
      queues.push_back(std::move(items));
    }
    header["queues"] = {{"capacity", state_.queues.capacity}, {"schedule", state_.queues.schedule}, {"items", queues}};
    auto tensors = named_tensors(state_.params);
    for (std::size_t i = 0; i < state_.params.tensors.size(); ++i) {
      tensors.emplace_back("adam.m." + state_.params.layout.specs[i].name, state_.adam.m[i]);
      tensors.emplace_back("adam.v." + state_.params.layout.specs[i].name, state_.adam.v[i]);
    }
    write_tensor_checkpoint(dir, header, tensors);
  }

  static TrainerState load_state(const std::filesystem::path& dir) {
    const TensorCheckpoint ckpt = read_tensor_checkpoint(dir);
    const auto& h = ckpt.manifest;
    if (h.value("kind", std::string()) != "trainer") throw IoError("checkpoint is not a trainer checkpoint");
    TrainerState st;
    st.params = params_from_checkpoint(ckpt);
    st.adam.step = h.at("adam_step").get<std::size_t>();
    for (const auto& spec : st.params.layout.specs) {
      st.adam.m.push_back(ckpt.get("adam.m." + spec.name));
      st.adam.v.push_back(ckpt.get("adam.v." + spec.name));
    }
    st.rng = deserialize_rng(h.at("rng").get<std::string>());
    st.iteration = h.at("iteration").get<std::size_t>();
    st.history = history_from_json(h.at("history"));
    st.queues.capacity = h.at("queues").at("capacity").get<std::size_t>();
    st.queues.schedule = h.at("queues").at("schedule").get<std::vector<double>>();
    for (const auto& items : h.at("queues").at("items")) {
      std::deque<SubTrajectory> q;
      for (const auto& s : items) q.push_back(sub_from_json(s));
      st.queues.queues.push_back(std::move(q));
    }
    return st;
  }

  static RewardTrainer resume(const std::filesystem::path& dir, std::vector<std::vector<Trajectory>> sets,
                              ActionSpace space, TrainConfig cfg) {
    return RewardTrainer(std::move(sets), space, std::move(cfg), load_state(dir));
  }

 private:
  void gather_candidates(StepBatch& batch) {
    const auto& qs = state_.queues;
    for (std::size_t l = 0; l < qs.levels(); ++l) {
      if (cfg_.candidates == CandidateMode::OnePerQueue) {
        batch.candidates.push_back(qs.queues[l][uniform_index(state_.rng, qs.queues[l].size())]);
        batch.candidate_eps.push_back(qs.schedule[l]);
      } else {
        for (const auto& s : qs.queues[l]) {
          batch.candidates.push_back(s);
          batch.candidate_eps.push_back(qs.schedule[l]);
        }
      }
    }
  }

  std::vector<std::vector<Trajectory>> sets_;
  ActionSpace space_;
  TrainConfig cfg_;
  RankPairSet pairs_;
  TrainerState state_;
};

/// Standalone optimizer checkpoint: params plus Adam moments.
inline void checkpoint(const RewardModelParams& params, const AdamState& opt, const std::filesystem::path& dir) {
  auto tensors = named_tensors(params);
  const AdamState st = opt.m.empty() ? AdamState::zeros_like(params.tensors) : opt;
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    tensors.emplace_back("adam.m." + params.layout.specs[i].name, st.m[i]);
    tensors.emplace_back("adam.v." + params.layout.specs[i].name, st.v[i]);
  }
  write_tensor_checkpoint(dir, {{"kind", "optimizer"}, {"dims", params.dims}, {"adam_step", opt.step}}, tensors);
}

struct RestoredCheckpoint {
  RewardModelParams params;
  AdamState adam;
};

inline RestoredCheckpoint restore(const std::filesystem::path& dir) {
  const TensorCheckpoint ckpt = read_tensor_checkpoint(dir);
  RestoredCheckpoint out{params_from_checkpoint(ckpt), {}};
  out.adam.step = ckpt.manifest.at("adam_step").get<std::size_t>();
  for (const auto& spec : out.params.layout.specs) {
    out.adam.m.push_back(ckpt.get("adam.m." + spec.name));
    out.adam.v.push_back(ckpt.get("adam.v." + spec.name));
  }
  return out;
}

struct TrainResult {
  RewardModelParams params;
  TrainHistory history;
};

/// Model dims are completed from the MDP; the action space is discrete.
inline TrainConfig bind_to_mdp(TrainConfig cfg, const TabularMdp& mdp) {
  cfg.model.n_states = mdp.n_states;
  cfg.model.n_actions = mdp.n_actions;
  return cfg;
}

inline TrainResult train_reward(const TabularMdp& mdp, const std::vector<std::vector<Trajectory>>& sets,
                                const TrainConfig& cfg) {
  RewardTrainer trainer(sets, ActionSpace::discrete(mdp.n_actions), bind_to_mdp(cfg, mdp));
  trainer.run();
  return {trainer.state().params, trainer.state().history};
}

}  // namespace drasrl
