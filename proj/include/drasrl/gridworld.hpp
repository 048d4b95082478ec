#pragma once

#include <array>
#include <json.hpp>
#include <string>
#include <vector>

#include "drasrl/error.hpp"
#include "drasrl/mdp.hpp"

namespace drasrl {

/// Cell codes: '.' free, 'S' start, 'G' goal (absorbing), 'H' hazard, '#' wall.
/// Actions: 0 up, 1 down, 2 left, 3 right.
enum class StartMode { Cells, Uniform };

struct GridworldSpec {
  std::vector<std::string> rows;
  double step_reward = -0.1;
  double goal_reward = 1.0;
  double hazard_reward = -1.0;
  double slip = 0.0;
  double gamma = 0.95;
  StartMode start = StartMode::Cells;
  bool allow_multiple_goals = false;

  std::size_t height() const { return rows.size(); }
  std::size_t width() const { return rows.empty() ? 0 : rows.front().size(); }
  char cell(std::size_t s) const { return rows[s / width()][s % width()]; }
};

inline constexpr std::size_t kGridActions = 4;

inline void to_json(nlohmann::json& j, const GridworldSpec& spec) {
  j = nlohmann::json{{"rows", spec.rows},
                     {"step_reward", spec.step_reward},
                     {"goal_reward", spec.goal_reward},
                     {"hazard_reward", spec.hazard_reward},
                     {"slip", spec.slip},
                     {"gamma", spec.gamma},
                     {"start", spec.start == StartMode::Cells ? "cells" : "uniform"},
                     {"allow_multiple_goals", spec.allow_multiple_goals}};
}

inline void from_json(const nlohmann::json& j, GridworldSpec& spec) {
  GridworldSpec d;
  spec.rows = j.at("rows").get<std::vector<std::string>>();
  spec.step_reward = j.value("step_reward", d.step_reward);
  spec.goal_reward = j.value("goal_reward", d.goal_reward);
  spec.hazard_reward = j.value("hazard_reward", d.hazard_reward);
  spec.slip = j.value("slip", d.slip);
  spec.gamma = j.value("gamma", d.gamma);
  const std::string start = j.value("start", std::string("cells"));
  if (start == "cells") {
    spec.start = StartMode::Cells;
  } else if (start == "uniform") {
    spec.start = StartMode::Uniform;
  } else {
    throw ConfigError("gridworld.start: expected \"cells\" or \"uniform\", got \"" + start + "\"");
  }
  spec.allow_multiple_goals = j.value("allow_multiple_goals", d.allow_multiple_goals);
}

/// Layout problems as human-readable messages; empty when the layout is usable.
inline std::vector<std::string> gridworld_violations(const GridworldSpec& spec) {
  std::vector<std::string> out;
  if (spec.rows.empty() || spec.rows.front().empty()) {
    out.emplace_back("layout has zero cells");
    return out;
  }
  std::size_t goals = 0;
  for (std::size_t r = 0; r < spec.rows.size(); ++r) {
    if (spec.rows[r].size() != spec.width()) {
      out.push_back("row " + std::to_string(r) + " has length " + std::to_string(spec.rows[r].size()) +
                    ", expected " + std::to_string(spec.width()) + " (layout must be rectangular)");
    }
    for (char c : spec.rows[r]) {
      if (c == 'G') ++goals;
      if (c != '.' && c != 'S' && c != 'G' && c != 'H' && c != '#') {
        out.push_back(std::string("unknown cell code '") + c + "' in row " + std::to_string(r));
      }
    }
  }
  if (goals == 0) out.emplace_back("layout has no goal cell");
  if (goals > 1 && !spec.allow_multiple_goals) out.emplace_back("layout has more than one goal cell");
  if (!(spec.slip >= 0.0 && spec.slip <= 1.0)) out.emplace_back("slip must lie in [0, 1]");
  if (!(spec.gamma >= 0.0 && spec.gamma < 1.0)) out.emplace_back("gamma must lie in [0, 1)");
  return out;
}

namespace detail {

inline std::size_t grid_move(const GridworldSpec& spec, std::size_t s, std::size_t action) {
  static constexpr std::array<int, kGridActions> dr{-1, 1, 0, 0};
  static constexpr std::array<int, kGridActions> dc{0, 0, -1, 1};
  const auto w = static_cast<long>(spec.width());
  const auto h = static_cast<long>(spec.height());
  const long r = static_cast<long>(s) / w + dr[action];
  const long c = static_cast<long>(s) % w + dc[action];
  if (r < 0 || r >= h || c < 0 || c >= w) return s;
  const auto next = static_cast<std::size_t>(r * w + c);
  return spec.cell(next) == '#' ? s : next;
}

}  // namespace detail

/// Builds the tabular MDP. Intended move with probability 1 - slip, each other
/// direction with slip / 3. Entering a goal pays goal_reward, a hazard pays
/// hazard_reward, any other landing pays step_reward. Goal and wall cells are
/// absorbing with zero reward.
inline TabularMdp build_gridworld(const GridworldSpec& spec) {
  if (auto v = gridworld_violations(spec); !v.empty()) throw ConfigError("gridworld: " + v.front());
  const std::size_t n = spec.height() * spec.width();
  const auto ns = static_cast<Eigen::Index>(n);
  TabularMdp mdp;
  mdp.n_states = n;
  mdp.n_actions = kGridActions;
  mdp.gamma = spec.gamma;
  mdp.transitions.assign(kGridActions, Matrix::Zero(ns, ns));
  mdp.reward = Matrix::Zero(ns, static_cast<Eigen::Index>(kGridActions));

  auto landing_reward = [&](std::size_t next) {
    switch (spec.cell(next)) {
      case 'G': return spec.goal_reward;
      case 'H': return spec.hazard_reward;
      default: return spec.step_reward;
    }
  };

  for (std::size_t s = 0; s < n; ++s) {
    const char c = spec.cell(s);
    const auto si = static_cast<Eigen::Index>(s);
    for (std::size_t a = 0; a < kGridActions; ++a) {
      Matrix& p = mdp.transitions[a];
      if (c == 'G' || c == '#') {
        p(si, si) = 1.0;
        continue;
      }
      for (std::size_t dir = 0; dir < kGridActions; ++dir) {
        const double mass = dir == a ? 1.0 - spec.slip : spec.slip / 3.0;
        if (mass == 0.0) continue;
        const std::size_t next = detail::grid_move(spec, s, dir);
        p(si, static_cast<Eigen::Index>(next)) += mass;
        mdp.reward(si, static_cast<Eigen::Index>(a)) += mass * landing_reward(next);
      }
    }
  }

  mdp.initial = Vector::Zero(ns);
  if (spec.start == StartMode::Cells) {
    for (std::size_t s = 0; s < n; ++s) {
      if (spec.cell(s) == 'S') mdp.initial(static_cast<Eigen::Index>(s)) = 1.0;
    }
  }
  if (mdp.initial.sum() == 0.0) {
    for (std::size_t s = 0; s < n; ++s) {
      const char c = spec.cell(s);
      if (c != 'G' && c != '#') mdp.initial(static_cast<Eigen::Index>(s)) = 1.0;
    }
  }
  if (mdp.initial.sum() == 0.0) {
    for (std::size_t s = 0; s < n; ++s) {
      if (spec.cell(s) != '#') mdp.initial(static_cast<Eigen::Index>(s)) = 1.0;
    }
  }
  if (mdp.initial.sum() == 0.0) throw ConfigError("gridworld: no cell can serve as a start state");
  mdp.initial /= mdp.initial.sum();
  mdp.validate();
  return mdp;
}

/// Default desk-scale 8x8 layout.
inline GridworldSpec default_gridworld() {
  GridworldSpec spec;
  spec.rows = {
      "S.......",
      "........",
      "..H.....",
      "....##..",
      "....#...",
      "..H.....",
      ".....H..",
      ".......G",
  };
  spec.slip = 0.1;
  spec.gamma = 0.95;
  return spec;
}

}  // namespace drasrl
