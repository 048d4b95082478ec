#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <json.hpp>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "drasrl/autodiff.hpp"
#include "drasrl/demos.hpp"
#include "drasrl/error.hpp"
#include "drasrl/rng.hpp"

namespace drasrl {

enum class InputMode { StateOnly, StateAction };

inline std::string to_string(InputMode m) { return m == InputMode::StateOnly ? "state_only" : "state_action"; }

inline InputMode input_mode_from_string(const std::string& s) {
  if (s == "state_only") return InputMode::StateOnly;
  if (s == "state_action") return InputMode::StateAction;
  throw ConfigError("unknown input mode \"" + s + "\" (expected state_only or state_action)");
}

/// Shape of the sequence reward model. Inputs are one-hot state / action indices.
struct ModelDims {
  std::size_t n_states = 1;
  std::size_t n_actions = 1;
  std::size_t context = 5;  // K
  std::size_t d_x = 64;
  std::size_t d_k = 64;
  std::size_t d_v = 64;
  std::size_t layers = 2;
  InputMode mode = InputMode::StateOnly;
  bool positional = true;

  std::size_t tokens() const { return mode == InputMode::StateAction ? 2 * context : context; }
  std::size_t feature_dim() const { return mode == InputMode::StateAction ? 2 * d_x : d_x; }

  void validate() const {
    if (n_states == 0 || n_actions == 0 || context == 0 || d_x == 0 || d_k == 0 || d_v == 0) {
      throw ConfigError("model dims must be positive");
    }
  }

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

inline void to_json(nlohmann::json& j, const ModelDims& d) {
  j = nlohmann::json{{"n_states", d.n_states}, {"n_actions", d.n_actions}, {"context", d.context},
                     {"d_x", d.d_x},           {"d_k", d.d_k},             {"d_v", d.d_v},
                     {"layers", d.layers},     {"mode", to_string(d.mode)}, {"positional", d.positional}};
}

inline void from_json(const nlohmann::json& j, ModelDims& d) {
  d.n_states = j.at("n_states").get<std::size_t>();
  d.n_actions = j.at("n_actions").get<std::size_t>();
  d.context = j.at("context").get<std::size_t>();
  d.d_x = j.at("d_x").get<std::size_t>();
  d.d_k = j.at("d_k").get<std::size_t>();
  d.d_v = j.at("d_v").get<std::size_t>();
  d.layers = j.at("layers").get<std::size_t>();
  d.mode = input_mode_from_string(j.at("mode").get<std::string>());
  d.positional = j.at("positional").get<bool>();
}

/// Names, shapes and positions of every trainable tensor.
struct ParamLayout {
  struct TensorSpec {
    std::string name;
    Eigen::Index rows;
    Eigen::Index cols;
    bool bias;
  };
  struct Mlp {
    std::size_t w1, b1, w2, b2;
  };
  struct Layer {
    std::size_t wq, wk, wv, wo;
    Mlp ff;
  };

  std::vector<TensorSpec> specs;
  Mlp state{};
  std::optional<Mlp> action;
  std::vector<Layer> layers;
  std::optional<std::size_t> positional;
  std::size_t omega = 0;

  static ParamLayout for_dims(const ModelDims& d) {
    ParamLayout out;
    auto add = [&out](std::string name, std::size_t rows, std::size_t cols, bool bias) {
      out.specs.push_back({std::move(name), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols), bias});
      return out.specs.size() - 1;
    };
    auto mlp = [&](const std::string& prefix, std::size_t in) {
      Mlp m{};
      m.w1 = add(prefix + ".w1", d.d_x, in, false);
      m.b1 = add(prefix + ".b1", 1, d.d_x, true);
      m.w2 = add(prefix + ".w2", d.d_x, d.d_x, false);
      m.b2 = add(prefix + ".b2", 1, d.d_x, true);
      return m;
    };
    out.state = mlp("state_mlp", d.n_states);
    if (d.mode == InputMode::StateAction) out.action = mlp("action_mlp", d.n_actions);
    for (std::size_t l = 0; l < d.layers; ++l) {
      const std::string p = "layer" + std::to_string(l);
      Layer layer{};
      layer.wq = add(p + ".wq", d.d_k, d.d_x, false);
      layer.wk = add(p + ".wk", d.d_k, d.d_x, false);
      layer.wv = add(p + ".wv", d.d_v, d.d_x, false);
      layer.wo = add(p + ".wo", d.d_x, d.d_v, false);
      layer.ff = mlp(p + ".ff", d.d_x);
      out.layers.push_back(layer);
    }
    if (d.positional) out.positional = add("positional", d.tokens(), d.d_x, false);
    out.omega = add("omega", d.feature_dim(), 1, false);
    return out;
  }

  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < specs.size(); ++i) {
      if (specs[i].name == name) return i;
    }
    throw ConfigError("unknown parameter tensor \"" + std::string(name) + "\"");
  }
};

/// Every trainable tensor of the reward model, in layout order.
struct RewardModelParams {
  ModelDims dims;
  ParamLayout layout;
  std::vector<Matrix> tensors;

  Matrix& at(std::string_view name) { return tensors[layout.index_of(name)]; }
  const Matrix& at(std::string_view name) const { return tensors[layout.index_of(name)]; }
  Matrix& omega() { return tensors[layout.omega]; }
  const Matrix& omega() const { return tensors[layout.omega]; }

  std::size_t coordinate_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += static_cast<std::size_t>(t.size());
    return n;
  }

  void validate() const {
    dims.validate();
    if (tensors.size() != layout.specs.size()) throw ConfigError("params: tensor count does not match layout");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const auto& spec = layout.specs[i];
      if (tensors[i].rows() != spec.rows || tensors[i].cols() != spec.cols) {
        throw ConfigError("params: tensor " + spec.name + " has the wrong shape");
      }
      if (!tensors[i].allFinite()) throw NumericError("params: tensor " + spec.name + " is not finite");
    }
  }

  static RewardModelParams zeros(const ModelDims& dims) {
    RewardModelParams p{dims, ParamLayout::for_dims(dims), {}};
    for (const auto& spec : p.layout.specs) p.tensors.push_back(Matrix::Zero(spec.rows, spec.cols));
    return p;
  }
};

using Gradients = std::vector<Matrix>;

/// Glorot limit sqrt(6 / (fan_in + fan_out)) for a rows x cols tensor.
inline double init_limit(Eigen::Index rows, Eigen::Index cols) {
  return std::sqrt(6.0 / static_cast<double>(rows + cols));
}

/// Fan-scaled uniform weights, zero biases.
inline RewardModelParams init_params(const ModelDims& dims, std::uint64_t seed) {
  dims.validate();
  RewardModelParams p = RewardModelParams::zeros(dims);
  Rng rng = make_rng(seed, 0x5eed);
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    const auto& spec = p.layout.specs[i];
    if (spec.bias) continue;
    std::uniform_real_distribution<double> unif(-init_limit(spec.rows, spec.cols), init_limit(spec.rows, spec.cols));
    for (Eigen::Index k = 0; k < p.tensors[i].size(); ++k) p.tensors[i].data()[k] = unif(rng);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Forward pass on a tape

/// Parameter tensors placed on a tape.
struct BoundParams {
  const RewardModelParams* params = nullptr;
  std::vector<ad::Var> vars;

  const ad::Var& operator[](std::size_t i) const { return vars[i]; }
  const ParamLayout& layout() const { return params->layout; }
  const ModelDims& dims() const { return params->dims; }
  ad::Tape& tape() const { return *vars.front().tape; }
};

inline BoundParams bind(ad::Tape& tape, const RewardModelParams& params, bool requires_grad) {
  BoundParams b{&params, {}};
  b.vars.reserve(params.tensors.size());
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    const auto& name = params.layout.specs[i].name;
    b.vars.push_back(requires_grad ? tape.parameter(params.tensors[i], name) : tape.constant(params.tensors[i], name));
  }
  return b;
}

namespace detail {

inline ad::Var mlp_forward(const BoundParams& bp, const ParamLayout::Mlp& m, const ad::Var& x) {
  const ad::Var h = ad::relu(ad::add_row(ad::matmul_nt(x, bp[m.w1]), bp[m.b1]));
  return ad::add_row(ad::matmul_nt(h, bp[m.w2]), bp[m.b2]);
}

inline Matrix one_hot(std::span<const int> idx, std::size_t n, const char* what) {
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(idx.size()), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= n) {
      throw ConfigError(std::string("embed_tokens: ") + what + " index " + std::to_string(idx[i]) + " out of range");
    }
    out(static_cast<Eigen::Index>(i), idx[i]) = 1.0;
  }
  return out;
}

}  // namespace detail

/// Token rows for a batch of windows, window after window. Each window
/// contributes 2K interleaved (s, a) tokens, or K state tokens.
inline ad::Var embed_tokens(const BoundParams& bp, std::span<const SubTrajectory> subs) {
  const ModelDims& d = bp.dims();
  if (subs.empty()) throw ConfigError("embed_tokens: empty batch");
  ad::Tape& tape = bp.tape();
  const auto k = static_cast<Eigen::Index>(d.context);
  const auto n = static_cast<Eigen::Index>(subs.size());
  std::vector<int> states, actions;
  for (const auto& sub : subs) {
    if (sub.size() != d.context) throw ConfigError("embed_tokens: sub-trajectory length does not match K");
    states.insert(states.end(), sub.states.begin(), sub.states.end());
    if (d.mode == InputMode::StateAction) {
      if (sub.actions.size() != d.context) throw ConfigError("embed_tokens: state-action mode requires K actions");
      actions.insert(actions.end(), sub.actions.begin(), sub.actions.end());
    }
  }
  ad::Var tokens = detail::mlp_forward(bp, bp.layout().state,
                                       tape.constant(detail::one_hot(states, d.n_states, "state"), "state_onehot"));
  if (d.mode == InputMode::StateAction) {
    const ad::Var action_tokens = detail::mlp_forward(
        bp, *bp.layout().action, tape.constant(detail::one_hot(actions, d.n_actions, "action"), "action_onehot"));
    // interleave within each window: row 2i <- state i, row 2i+1 <- action i
    Matrix perm = Matrix::Zero(2 * k * n, 2 * k * n);
    for (Eigen::Index w = 0; w < n; ++w) {
      for (Eigen::Index i = 0; i < k; ++i) {
        perm(2 * k * w + 2 * i, k * w + i) = 1.0;
        perm(2 * k * w + 2 * i + 1, k * n + k * w + i) = 1.0;
      }
    }
    const std::array<ad::Var, 2> blocks{tokens, action_tokens};
    tokens = ad::matmul(tape.constant(std::move(perm), "interleave"), ad::concat_rows(blocks));
  }
  if (bp.layout().positional) {
    const ad::Var pos = bp[*bp.layout().positional];
    if (n == 1) {
      tokens = ad::add(tokens, pos);
    } else {
      const auto t = static_cast<Eigen::Index>(d.tokens());
      Matrix tile = Matrix::Zero(t * n, t);
      for (Eigen::Index w = 0; w < n; ++w) tile.middleRows(w * t, t).setIdentity();
      tokens = ad::add(tokens, ad::matmul(tape.constant(std::move(tile), "tile_positional"), pos));
    }
  }
  return tokens;
}

inline ad::Var embed_tokens(const BoundParams& bp, const SubTrajectory& sub) {
  return embed_tokens(bp, std::span<const SubTrajectory>(&sub, 1));
}

/// Unmasked single-head scaled dot-product attention followed by the residual
/// feed-forward: x'' = x + x' + f(x + x'). Attention mixes tokens only within
/// consecutive blocks of `block` rows (one block per window; 0 = all rows).
/// Optionally reports the attention weights.
inline ad::Var attention_block(const BoundParams& bp, std::size_t layer, const ad::Var& tokens,
                               Matrix* weights_out = nullptr, Eigen::Index block = 0) {
  const ModelDims& d = bp.dims();
  if (static_cast<std::size_t>(tokens.cols()) != d.d_x) throw ConfigError("attention_block: token width != d_x");
  if (block == 0) block = tokens.rows();
  const auto& lp = bp.layout().layers.at(layer);
  const ad::Var q = ad::matmul_nt(tokens, bp[lp.wq]);
  const ad::Var k = ad::matmul_nt(tokens, bp[lp.wk]);
  const ad::Var v = ad::matmul_nt(tokens, bp[lp.wv]);
  const ad::Var mixed = ad::block_attention(q, k, v, block, 1.0 / std::sqrt(static_cast<double>(d.d_k)), weights_out);
  const ad::Var hidden = ad::add(tokens, ad::matmul_nt(mixed, bp[lp.wo]));
  return ad::add(hidden, detail::mlp_forward(bp, lp.ff, hidden));
}

/// Per-step features of a batch: (n * K) x feature_dim, window after window.
inline ad::Var encode(const BoundParams& bp, std::span<const SubTrajectory> subs) {
  const ModelDims& d = bp.dims();
  ad::Var tokens = embed_tokens(bp, subs);
  const auto block = static_cast<Eigen::Index>(d.tokens());
  for (std::size_t l = 0; l < d.layers; ++l) tokens = attention_block(bp, l, tokens, nullptr, block);
  if (d.mode == InputMode::StateAction) {
    // row-major: each (s, a) token pair becomes one 2 d_x row
    tokens = ad::reshape(tokens, static_cast<Eigen::Index>(subs.size() * d.context), static_cast<Eigen::Index>(2 * d.d_x));
  }
  return tokens;
}

/// K x feature_dim matrix of context-aware per-step features.
inline ad::Var encode(const BoundParams& bp, const SubTrajectory& sub) {
  return encode(bp, std::span<const SubTrajectory>(&sub, 1));
}

/// One flattened row per window: n x (K * feature_dim).
inline ad::Var flatten_batch(const ad::Var& features, std::size_t n) {
  return ad::reshape(features, static_cast<Eigen::Index>(n), features.value().size() / static_cast<Eigen::Index>(n));
}

/// Flattened X = [x_1 || ... || x_K] as a 1 x (K * feature_dim) row.
inline ad::Var flatten(const ad::Var& features) { return ad::reshape(features, 1, features.value().size()); }

/// r_i = omega . x_i, as a K x 1 column.
inline ad::Var reward_seq(const ad::Var& features, const ad::Var& omega) {
  if (features.cols() != omega.rows() || omega.cols() != 1) throw ConfigError("reward_seq: omega length mismatch");
  return ad::matmul(features, omega);
}

inline ad::Var predicted_return(const BoundParams& bp, const SubTrajectory& sub) {
  return ad::sum(reward_seq(encode(bp, sub), bp[bp.layout().omega]));
}

// ---------------------------------------------------------------------------
// Plain evaluation (no gradients)

/// Features and per-step rewards of one window, evaluated without gradients.
struct WindowEval {
  Matrix features;
  Vector rewards;
};

inline WindowEval evaluate_window(const RewardModelParams& params, const SubTrajectory& sub) {
  ad::Tape tape;
  const BoundParams bp = bind(tape, params, false);
  const ad::Var f = encode(bp, sub);
  const ad::Var r = reward_seq(f, bp[params.layout.omega]);
  return {f.value(), r.value()};
}

inline Matrix embed_tokens(const RewardModelParams& params, const SubTrajectory& sub) {
  ad::Tape tape;
  return embed_tokens(bind(tape, params, false), sub).value();
}

inline Matrix attention_block(const RewardModelParams& params, std::size_t layer, const Matrix& tokens,
                              Matrix* weights_out = nullptr) {
  ad::Tape tape;
  const BoundParams bp = bind(tape, params, false);
  return attention_block(bp, layer, tape.constant(tokens), weights_out).value();
}

inline Matrix encode(const RewardModelParams& params, const SubTrajectory& sub) {
  return evaluate_window(params, sub).features;
}

inline Vector reward_seq(const Matrix& features, const Vector& omega) {
  if (features.cols() != omega.size()) throw ConfigError("reward_seq: omega length mismatch");
  return features * omega;
}

inline double predicted_return(const RewardModelParams& params, const SubTrajectory& sub) {
  return evaluate_window(params, sub).rewards.sum();
}

// ---------------------------------------------------------------------------
// Gradients

/// Builds a scalar loss on the tape from bound parameters.
using LossFn = std::function<ad::Var(ad::Tape&, const BoundParams&)>;

struct GradResult {
  double loss = 0.0;
  Gradients grads;
  std::uint64_t kink_signature = 0;
};

inline double evaluate_loss(const LossFn& fn, const RewardModelParams& params, std::uint64_t* kink_signature = nullptr) {
  ad::Tape tape;
  const BoundParams bp = bind(tape, params, false);
  const ad::Var loss = fn(tape, bp);
  if (kink_signature != nullptr) *kink_signature = tape.kink_signature();
  return loss.scalar();
}

/// Exact reverse-mode gradient of fn at params.
inline GradResult grad(const LossFn& fn, const RewardModelParams& params) {
  ad::Tape tape;
  const BoundParams bp = bind(tape, params, true);
  const ad::Var loss = fn(tape, bp);
  if (loss.rows() != 1 || loss.cols() != 1) throw ConfigError("grad: loss must be a scalar");
  tape.backward(loss);
  GradResult out;
  out.loss = loss.scalar();
  out.kink_signature = tape.kink_signature();
  out.grads.reserve(bp.vars.size());
  for (std::size_t i = 0; i < bp.vars.size(); ++i) {
    Matrix g = tape.grad(bp.vars[i]);
    if (!g.allFinite()) throw NumericError("non-finite gradient for tensor " + params.layout.specs[i].name);
    out.grads.push_back(std::move(g));
  }
  return out;
}

inline double gradient_norm(const Gradients& g) {
  double sq = 0.0;
  for (const auto& m : g) sq += m.squaredNorm();
  return std::sqrt(sq);
}

}  // namespace drasrl
