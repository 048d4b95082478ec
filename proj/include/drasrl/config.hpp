#pragma once

#include <cstdint>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "drasrl/checkpoint.hpp"
#include "drasrl/demos.hpp"
#include "drasrl/error.hpp"
#include "drasrl/eval.hpp"
#include "drasrl/gridworld.hpp"
#include "drasrl/losses.hpp"
#include "drasrl/trainer.hpp"

namespace drasrl {

inline constexpr const char* kVersion = "0.1.0";

/// Everything a run depends on. Written back in full (defaults included) as the
/// run manifest, which can itself be passed as --config to replay the run.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/desk";

  GridworldSpec gridworld = default_gridworld();

  double demo_quality = 0.3;
  double demo_temperature = kDemonstratorTemperature;
  std::size_t demo_episodes = 20;
  std::size_t horizon = 50;

  std::vector<double> schedule = equal_spaced_schedule(20);
  std::optional<std::size_t> equal_spaced_levels = 20;  // set when the schedule was given as a count
  std::size_t per_level = 5;

  ModelDims model;  // n_states / n_actions filled from the gridworld
  LossConfig loss;
  TrainConfig train;
  QLearningConfig rl;
  ReturnNormalization eval_normalization = ReturnNormalization::None;

  std::size_t heldout_qualities = 10;
  std::size_t heldout_per_quality = 10;
  std::size_t feature_windows_per_level = 200;

  std::size_t context() const { return model.context; }
};

struct ConfigResult {
  std::optional<ExperimentConfig> config;
  std::vector<std::string> violations;

  bool ok() const { return config.has_value(); }
};

namespace detail {

/// Reads optional fields with defaults; type problems are collected, not thrown.
class FieldReader {
 public:
  FieldReader(const nlohmann::json& doc, std::vector<std::string>& violations) : doc_(doc), violations_(violations) {}

  const nlohmann::json* find(const std::string& path) const {
    const nlohmann::json* cur = &doc_;
    std::size_t pos = 0;
    while (pos <= path.size()) {
      const auto dot = path.find('.', pos);
      const std::string key = path.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
      if (!cur->is_object()) return nullptr;
      const auto it = cur->find(key);
      if (it == cur->end()) return nullptr;
      cur = &*it;
      if (dot == std::string::npos) break;
      pos = dot + 1;
    }
    return cur;
  }

  template <class T>
  void read(const std::string& path, T& out) const {
    const nlohmann::json* node = find(path);
    if (node == nullptr) return;
    try {
      if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
        if (!node->is_number_integer() || node->get<long long>() < 0) {
          violations_.push_back(path + ": expected a non-negative integer");
          return;
        }
      }
      out = node->get<T>();
    } catch (const nlohmann::json::exception&) {
      violations_.push_back(path + ": wrong type");
    }
  }

 private:
  const nlohmann::json& doc_;
  std::vector<std::string>& violations_;
};

inline void check(std::vector<std::string>& v, bool ok, const std::string& path, const std::string& msg) {
  if (!ok) v.push_back(path + ": " + msg);
}

}  // namespace detail

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["gridworld"] = c.gridworld;
  j["demonstrator"] = {{"quality", c.demo_quality}, {"temperature", c.demo_temperature}, {"episodes", c.demo_episodes}};
  j["horizon"] = c.horizon;
  nlohmann::json noise;
  if (c.equal_spaced_levels) {
    noise["schedule"] = "equal_spaced";
    noise["levels"] = *c.equal_spaced_levels;
  } else {
    noise["schedule"] = c.schedule;
  }
  noise["per_level"] = c.per_level;
  j["noise"] = noise;
  j["K"] = c.model.context;
  j["model"] = {{"d_x", c.model.d_x},         {"d_k", c.model.d_k},
                {"d_v", c.model.d_v},         {"layers", c.model.layers},
                {"mode", to_string(c.model.mode)}, {"positional", c.model.positional}};
  j["loss"] = {{"rho", c.loss.rho},
               {"lambda", c.loss.lambda},
               {"beta", c.loss.beta},
               {"pair_threshold", c.loss.pair_threshold},
               {"normalize_features", c.loss.normalize_features}};
  const auto& t = c.train;
  j["train"] = {{"iterations", t.iterations},
                {"anchors_per_level", t.anchors_per_level},
                {"learning_rate", t.adam.learning_rate},
                {"weight_decay", t.adam.weight_decay},
                {"beta1", t.adam.beta1},
                {"beta2", t.adam.beta2},
                {"epsilon", t.adam.epsilon},
                {"queue_capacity", t.queue_capacity},
                {"candidates", t.candidates == CandidateMode::OnePerQueue ? "one_per_queue" : "whole_queue"},
                {"detach_candidates", t.detach_candidates},
                {"checkpoint_every", t.checkpoint_every}};
  const char* dist = t.distance_term == DistanceTerm::Contrastive ? "contrastive"
                     : t.distance_term == DistanceTerm::Mse       ? "mse"
                                                                  : "none";
  j["ablation"] = {{"distance_term", dist}, {"rank", t.rank_term}};
  j["heldout"] = {{"qualities", c.heldout_qualities}, {"per_quality", c.heldout_per_quality}};
  j["rl"] = c.rl;
  j["eval"] = {{"normalization", c.eval_normalization == ReturnNormalization::None ? "none" : "per_set_affine"}};
  j["features"] = {{"windows_per_level", c.feature_windows_per_level}};
  return j;
}

/// Parses and checks a config document. Every violation is reported, each
/// prefixed with its field path.
inline ConfigResult validate_config(const nlohmann::json& doc) {
  ConfigResult res;
  auto& v = res.violations;
  if (!doc.is_object()) {
    v.emplace_back("<root>: expected a JSON object");
    return res;
  }
  ExperimentConfig c;
  const detail::FieldReader r(doc, v);

  r.read("seed", c.seed);
  r.read("output_dir", c.output_dir);

  if (const auto* g = r.find("gridworld")) {
    try {
      c.gridworld = g->get<GridworldSpec>();
    } catch (const ConfigError& e) {
      v.emplace_back(e.what());
    } catch (const nlohmann::json::exception& e) {
      v.push_back(std::string("gridworld: ") + e.what());
    }
  }
  for (const auto& msg : gridworld_violations(c.gridworld)) v.push_back("gridworld: " + msg);

  r.read("demonstrator.quality", c.demo_quality);
  r.read("demonstrator.temperature", c.demo_temperature);
  r.read("demonstrator.episodes", c.demo_episodes);
  r.read("horizon", c.horizon);

  if (const auto* sched = r.find("noise.schedule")) {
    if (sched->is_string()) {
      if (sched->get<std::string>() != "equal_spaced") {
        v.emplace_back("noise.schedule: expected \"equal_spaced\" or a list of noise levels");
      }
      std::size_t levels = c.equal_spaced_levels.value_or(20);
      r.read("noise.levels", levels);
      c.equal_spaced_levels = levels;
      c.schedule = equal_spaced_schedule(levels);
    } else if (sched->is_array()) {
      c.equal_spaced_levels.reset();
      r.read("noise.schedule", c.schedule);
    } else {
      v.emplace_back("noise.schedule: expected \"equal_spaced\" or a list of noise levels");
    }
  } else if (r.find("noise.levels") != nullptr) {
    std::size_t levels = 20;
    r.read("noise.levels", levels);
    c.equal_spaced_levels = levels;
    c.schedule = equal_spaced_schedule(levels);
  }
  r.read("noise.per_level", c.per_level);

  r.read("K", c.model.context);
  r.read("model.d_x", c.model.d_x);
  r.read("model.d_k", c.model.d_k);
  r.read("model.d_v", c.model.d_v);
  r.read("model.layers", c.model.layers);
  r.read("model.positional", c.model.positional);
  if (const auto* mode = r.find("model.mode")) {
    try {
      c.model.mode = input_mode_from_string(mode->get<std::string>());
    } catch (const std::exception& e) {
      v.push_back(std::string("model.mode: ") + e.what());
    }
  }

  r.read("loss.rho", c.loss.rho);
  r.read("loss.lambda", c.loss.lambda);
  r.read("loss.beta", c.loss.beta);
  r.read("loss.pair_threshold", c.loss.pair_threshold);
  r.read("loss.normalize_features", c.loss.normalize_features);

  auto& t = c.train;
  r.read("train.iterations", t.iterations);
  r.read("train.anchors_per_level", t.anchors_per_level);
  r.read("train.learning_rate", t.adam.learning_rate);
  r.read("train.weight_decay", t.adam.weight_decay);
  r.read("train.beta1", t.adam.beta1);
  r.read("train.beta2", t.adam.beta2);
  r.read("train.epsilon", t.adam.epsilon);
  r.read("train.queue_capacity", t.queue_capacity);
  r.read("train.detach_candidates", t.detach_candidates);
  r.read("train.checkpoint_every", t.checkpoint_every);
  if (const auto* cand = r.find("train.candidates")) {
    const std::string s = cand->is_string() ? cand->get<std::string>() : "";
    if (s == "one_per_queue") t.candidates = CandidateMode::OnePerQueue;
    else if (s == "whole_queue") t.candidates = CandidateMode::WholeQueue;
    else v.emplace_back("train.candidates: expected \"one_per_queue\" or \"whole_queue\"");
  }
  if (const auto* dist = r.find("ablation.distance_term")) {
    const std::string s = dist->is_string() ? dist->get<std::string>() : "";
    if (s == "contrastive") t.distance_term = DistanceTerm::Contrastive;
    else if (s == "mse") t.distance_term = DistanceTerm::Mse;
    else if (s == "none") t.distance_term = DistanceTerm::None;
    else v.emplace_back("ablation.distance_term: expected \"contrastive\", \"mse\" or \"none\"");
  }
  r.read("ablation.rank", t.rank_term);

  r.read("heldout.qualities", c.heldout_qualities);
  r.read("heldout.per_quality", c.heldout_per_quality);
  r.read("features.windows_per_level", c.feature_windows_per_level);

  auto& rl = c.rl;
  r.read("rl.episodes", rl.episodes);
  r.read("rl.alpha", rl.alpha);
  r.read("rl.alpha_decay", rl.alpha_decay);
  r.read("rl.alpha_min", rl.alpha_min);
  r.read("rl.epsilon_start", rl.epsilon_start);
  r.read("rl.epsilon_end", rl.epsilon_end);
  r.read("rl.exploring_starts", rl.exploring_starts);
  r.read("rl.normalize", rl.normalize);
  r.read("rl.squash", rl.squash);
  r.read("rl.control_penalty", rl.control_penalty);
  rl.horizon = c.horizon;
  r.read("rl.horizon", rl.horizon);
  if (const auto* lm = r.find("rl.label_mode")) {
    const std::string s = lm->is_string() ? lm->get<std::string>() : "";
    if (s == "non_overlapping") rl.label_mode = LabelMode::NonOverlapping;
    else if (s == "sliding") rl.label_mode = LabelMode::Sliding;
    else v.emplace_back("rl.label_mode: expected \"non_overlapping\" or \"sliding\"");
  }
  if (const auto* norm = r.find("eval.normalization")) {
    const std::string s = norm->is_string() ? norm->get<std::string>() : "";
    if (s == "none") c.eval_normalization = ReturnNormalization::None;
    else if (s == "per_set_affine") c.eval_normalization = ReturnNormalization::PerSetAffine;
    else v.emplace_back("eval.normalization: expected \"none\" or \"per_set_affine\"");
  }

  using detail::check;
  check(v, c.demo_quality >= 0.0 && c.demo_quality <= 1.0, "demonstrator.quality", "must lie in [0, 1]");
  check(v, c.demo_temperature > 0.0, "demonstrator.temperature", "must be > 0");
  check(v, c.demo_episodes >= 1, "demonstrator.episodes", "must be >= 1");
  check(v, c.horizon >= 1, "horizon", "must be >= 1");
  check(v, !c.schedule.empty(), "noise.schedule", "must contain at least one level");
  for (std::size_t i = 0; i < c.schedule.size(); ++i) {
    check(v, c.schedule[i] >= 0.0 && c.schedule[i] < 1.0, "noise.schedule[" + std::to_string(i) + "]",
          "noise levels must lie in [0, 1)");
  }
  check(v, c.per_level >= 1, "noise.per_level", "must be >= 1");
  check(v, c.model.context >= 1, "K", "must be >= 1");
  check(v, c.model.context <= c.horizon, "K",
        "window length " + std::to_string(c.model.context) + " exceeds horizon " + std::to_string(c.horizon) +
            " (every trajectory must hold a length-K window)");
  check(v, c.model.d_x >= 1, "model.d_x", "must be >= 1");
  check(v, c.model.d_k >= 1, "model.d_k", "must be >= 1");
  check(v, c.model.d_v >= 1, "model.d_v", "must be >= 1");
  check(v, c.loss.rho > 0.0, "loss.rho", "must be > 0");
  check(v, c.loss.lambda >= 0.0, "loss.lambda", "must be >= 0");
  check(v, c.loss.beta > 0.0, "loss.beta", "must be > 0");
  check(v, c.loss.pair_threshold >= 0.0 && c.loss.pair_threshold <= 1.0, "loss.pair_threshold", "must lie in [0, 1]");
  check(v, t.adam.learning_rate >= 0.0, "train.learning_rate", "must be >= 0");
  check(v, t.adam.weight_decay >= 0.0, "train.weight_decay", "must be >= 0");
  check(v, t.adam.beta1 >= 0.0 && t.adam.beta1 < 1.0, "train.beta1", "must lie in [0, 1)");
  check(v, t.adam.beta2 >= 0.0 && t.adam.beta2 < 1.0, "train.beta2", "must lie in [0, 1)");
  check(v, t.adam.epsilon > 0.0, "train.epsilon", "must be > 0");
  check(v, t.anchors_per_level >= 1, "train.anchors_per_level", "must be >= 1");
  check(v, t.queue_capacity >= 1, "train.queue_capacity", "must be >= 1");
  check(v, t.distance_term != DistanceTerm::None || t.rank_term, "ablation", "at least one loss term must be on");
  check(v, c.schedule.size() >= 2 || t.distance_term != DistanceTerm::Contrastive, "noise.schedule",
        "the contrastive term needs at least two noise levels");
  check(v, c.heldout_qualities >= 1, "heldout.qualities", "must be >= 1");
  check(v, c.heldout_per_quality >= 1, "heldout.per_quality", "must be >= 1");
  check(v, rl.alpha > 0.0 && rl.alpha <= 1.0, "rl.alpha", "must lie in (0, 1]");
  check(v, rl.alpha_min >= 0.0 && rl.alpha_min <= rl.alpha, "rl.alpha_min", "must lie in [0, rl.alpha]");
  check(v, rl.alpha_decay >= 0.0, "rl.alpha_decay", "must be >= 0");
  check(v, rl.epsilon_start >= 0.0 && rl.epsilon_start <= 1.0, "rl.epsilon_start", "must lie in [0, 1]");
  check(v, rl.epsilon_end >= 0.0 && rl.epsilon_end <= 1.0, "rl.epsilon_end", "must lie in [0, 1]");
  check(v, rl.horizon >= c.model.context, "rl.horizon", "must be >= K");

  if (!v.empty()) return res;

  const TabularMdp probe = build_gridworld(c.gridworld);
  c.model.n_states = probe.n_states;
  c.model.n_actions = probe.n_actions;
  t.model = c.model;
  t.loss = c.loss;
  t.schedule = c.schedule;
  t.seed = c.seed;
  rl.seed = c.seed;
  res.config = std::move(c);
  return res;
}

/// Throws ConfigError listing every violation.
inline ExperimentConfig parse_config(const nlohmann::json& doc) {
  ConfigResult res = validate_config(doc);
  if (!res.ok()) {
    std::string msg = "invalid config:";
    for (const auto& e : res.violations) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  return *res.config;
}

inline std::string config_hash(const ExperimentConfig& c) {
  const std::string text = config_to_json(c).dump();
  return "fnv1a64:" + hex64(fnv1a64({reinterpret_cast<const unsigned char*>(text.data()), text.size()}));
}

}  // namespace drasrl
