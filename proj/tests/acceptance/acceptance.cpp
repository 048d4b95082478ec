// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "drasrl/pipeline.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

using namespace drasrl;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::string detail;
};

int failures = 0;

void report(int id, const Outcome& o) {
  if (!o.pass) ++failures;
  std::printf("criterion %2d: %s  %s\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str());
  std::fflush(stdout);
}

std::string fmt(double x, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << x;
  return s.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// 8x8 gridworld, horizon 50, 20 equal-spaced levels, 5 per level, K=5,
// rho=1, lambda=0.1, pair threshold 0.3, 150 iterations.
json desk_doc(std::uint64_t seed) {
  return json{{"seed", seed},
              {"horizon", 50},
              {"demonstrator", {{"quality", 0.3}, {"episodes", 20}}},
              {"noise", {{"schedule", "equal_spaced"}, {"levels", 20}, {"per_level", 5}}},
              {"K", 5},
              {"loss", {{"rho", 1.0}, {"lambda", 0.1}, {"pair_threshold", 0.3}}},
              {"train", {{"iterations", 150}, {"checkpoint_every", 75}}}};
}

struct RunResult {
  fs::path dir;
  double seconds = 0.0;
  double first_loss = 0.0;
  double final_loss = 0.0;
  double pearson_train = 0.0;
  double pearson_heldout = 0.0;
  double policy_return = 0.0;
  double demo_return = 0.0;
};

RunResult run_desk(const json& doc, const fs::path& dir) {
  fs::remove_all(dir);
  const ExperimentConfig cfg = parse_config(doc);
  const auto t0 = Clock::now();
  Pipeline p(cfg, dir);
  p.run("full");
  RunResult r;
  r.dir = dir;
  r.seconds = seconds_since(t0);
  const auto& h = *p.history();
  r.first_loss = h.records.front().total;
  r.final_loss = h.records.back().total;
  const json rep = read_json_file(p.paths().eval_report());
  r.pearson_train = rep.at("pearson_train").get<double>();
  r.pearson_heldout = rep.at("pearson_heldout").get<double>();
  r.policy_return = rep.at("learned_policy_return").get<double>();
  r.demo_return = rep.at("demonstrator_return").get<double>();
  return r;
}

// --- 1, 2: theory --------------------------------------------------------

Outcome criterion_bound(const TheorySummary& t, double secs) {
  Outcome o;
  o.pass = t.bound_cases == 200 && t.bound_holds == t.bound_cases && secs <= 30.0;
  o.detail = std::to_string(t.bound_holds) + "/" + std::to_string(t.bound_cases) + " cases hold, " + fmt(secs, 3) + " s";
  return o;
}

Outcome criterion_visitation(const TheorySummary& t) {
  Outcome o;
  o.pass = t.lemma_cases == 100 && t.lemma_max_residual <= 1e-8;
  o.detail = "max residual " + fmt(t.lemma_max_residual, 3) + " over " + std::to_string(t.lemma_cases) + " cases";
  return o;
}

// --- 3: simplified TV ------------------------------------------------------

Outcome criterion_simplified_tv() {
  double worst = 0.0;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    Rng rng = make_rng(3, trial);
    const double ei = uniform01(rng), ej = uniform01(rng);
    const std::size_t na = 2 + uniform_index(rng, 7);
    const std::size_t ns = 1 + uniform_index(rng, 10);
    std::vector<int> greedy(ns);
    for (auto& a : greedy) a = static_cast<int>(uniform_index(rng, na));
    const StochasticPolicy base = StochasticPolicy::deterministic(greedy, na);
    const StochasticPolicy pi = inject_noise(base, ei), pj = inject_noise(base, ej);
    const double closed = simplified_tv(ei, ej, ActionSpace::discrete(na));
    for (std::size_t s = 0; s < ns; ++s) worst = std::max(worst, std::abs(state_tv(pi, pj, s) - closed));
  }
  return {worst <= 1e-12, "max |closed form - brute force| " + fmt(worst, 3)};
}

// --- 4: gradients ----------------------------------------------------------

Outcome criterion_gradients() {
  struct Case {
    InputMode mode;
    std::size_t k, d_x, layers;
    bool positional;
  };
  const std::array<Case, 5> cases{{{InputMode::StateOnly, 5, 8, 1, true},
                                   {InputMode::StateAction, 5, 8, 1, true},
                                   {InputMode::StateOnly, 3, 4, 2, false},
                                   {InputMode::StateAction, 4, 6, 2, true},
                                   {InputMode::StateOnly, 1, 8, 1, false}}};
  double worst = 0.0;
  std::size_t checked = 0, skipped = 0;
  bool ok = true;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto& c = cases[i];
    const auto prob = drasrl::testing::small_problem(100 + i, c.mode, c.k, c.d_x, c.layers, c.positional);
    const auto rep = drasrl::testing::gradcheck_params(drasrl::testing::step_loss_fn(prob), prob.params);
    ok = ok && rep.ok(1e-5);
    worst = std::max(worst, rep.max_rel_error);
    checked += rep.checked;
    skipped += rep.skipped;
  }
  return {ok, "max rel error " + fmt(worst, 3) + " over " + std::to_string(checked) + " coordinates (" +
                  std::to_string(skipped) + " kink-adjacent skipped)"};
}

// --- 5: loss unit values ---------------------------------------------------

Outcome criterion_loss_values() {
  const double ln2 = std::log(2.0);
  LossConfig cfg;
  RankPairSet one{{RankPair{0, 1}}};
  const std::array<ScoredReturn, 2> equal{{{3.25, 0.5}, {3.25, 0.0}}};
  const double l_r = rank_loss(equal, one);

  // orthogonal anchor, labels 1 and 0.5 (|A| = 3, noise gap 0.75)
  Vector anchor(2), c0(2), c1(2);
  anchor << 1, 0;
  c0 << 0, 1;
  c1 << 0, -1;
  const std::array<double, 2> eps{0.0, 0.75};
  const double l_d = distance_aware_loss(anchor, {c0, c1}, eps, 0.0, ActionSpace::discrete(3), cfg);

  // lambda = 0 on a full training-step objective
  auto prob = drasrl::testing::small_problem(7, InputMode::StateOnly, 5, 8, 1, true);
  prob.cfg.loss.lambda = 0.0;
  ad::Tape tape;
  const StepTerms terms =
      build_step_loss(bind(tape, prob.params, false), prob.batch, prob.cfg, prob.space, prob.pairs, std::nullopt);
  const double gap_total = std::abs(terms.total.scalar() - terms.l_d->scalar());

  const double e_r = std::abs(l_r - ln2), e_d = std::abs(l_d - 1.5 * ln2);
  return {e_r <= 1e-12 && e_d <= 1e-12 && gap_total <= 1e-15,
          "|L_r - ln2| " + fmt(e_r, 3) + ", |total - L_d| " + fmt(gap_total, 3) + ", |L_d - 1.5 ln2| " + fmt(e_d, 3)};
}

// --- 9: invariants ---------------------------------------------------------

Outcome criterion_invariants() {
  double perm_err = 0.0, row_err = 0.0, pearson_err = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const InputMode mode = seed % 2 == 0 ? InputMode::StateOnly : InputMode::StateAction;
    const ModelDims dims{6, 3, 5, 8, 8, 8, 2, mode, false};
    const RewardModelParams p = drasrl::testing::jittered_params(dims, seed);
    Rng rng = make_rng(seed, 9);
    const SubTrajectory sub = drasrl::testing::random_window(rng, 5, 6, 3, 0.0);
    std::vector<int> perm{0, 1, 2, 3, 4};
    std::shuffle(perm.begin(), perm.end(), rng);
    SubTrajectory permuted = sub;
    for (std::size_t i = 0; i < 5; ++i) {
      permuted.states[i] = sub.states[perm[i]];
      permuted.actions[i] = sub.actions[perm[i]];
    }
    const Matrix f = encode(p, sub), g = encode(p, permuted);
    for (Eigen::Index i = 0; i < 5; ++i) perm_err = std::max(perm_err, (g.row(i) - f.row(perm[i])).cwiseAbs().maxCoeff());

    std::normal_distribution<double> n(0.0, 3.0);
    Matrix tokens(5, static_cast<Eigen::Index>(dims.d_x));
    for (Eigen::Index i = 0; i < tokens.size(); ++i) tokens.data()[i] = n(rng);
    for (std::size_t layer = 0; layer < dims.layers; ++layer) {
      Matrix w;
      attention_block(p, layer, tokens, &w);
      row_err = std::max(row_err, (w.rowwise().sum().array() - 1.0).abs().maxCoeff());
    }

    std::vector<double> xs(30), ys(30);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      xs[i] = n(rng);
      ys[i] = xs[i] + n(rng);
    }
    const double a = std::exp(uniform01(rng) * 6.0 - 3.0), b = n(rng) * 50.0;
    std::vector<double> xt(xs);
    for (double& x : xt) x = a * x + b;
    pearson_err = std::max(pearson_err, std::abs(pearson_correlation(xt, ys) - pearson_correlation(xs, ys)));
  }
  return {perm_err <= 1e-10 && row_err <= 1e-12 && pearson_err <= 1e-10,
          "permutation " + fmt(perm_err, 3) + ", attention rows " + fmt(row_err, 3) + ", pearson affine " +
              fmt(pearson_err, 3)};
}

// --- 10: determinism and resume -------------------------------------------

Outcome criterion_determinism(const RunResult& reference, const fs::path& work) {
  const json doc = desk_doc(0);
  const RunResult again = run_desk(doc, work / "determinism");
  std::vector<std::string> differing;
  const ArtifactPaths a{reference.dir}, b{again.dir};
  for (const auto& get : {&ArtifactPaths::history, &ArtifactPaths::eval_report, &ArtifactPaths::per_level,
                          &ArtifactPaths::features, &ArtifactPaths::policy}) {
    if (slurp((a.*get)()) != slurp((b.*get)())) differing.push_back((a.*get)().filename().string());
  }

  // Stop at iteration 75, then resume to 150 from the saved trainer state.
  const fs::path rdir = work / "resume";
  fs::remove_all(rdir);
  json half = doc;
  half["train"]["iterations"] = 75;
  Pipeline first(parse_config(half), rdir);
  for (const char* s : {"gen-demos", "train-bc", "gen-ranked", "train-reward"}) first.run(s);
  PipelineOptions opts;
  opts.resume = true;
  Pipeline second(parse_config(doc), rdir, opts);
  second.run("train-reward");
  const bool resumed_history = slurp(ArtifactPaths{rdir}.history()) == slurp(a.history());
  const RewardModelParams pa = load_model(a.checkpoint()), pb = load_model(ArtifactPaths{rdir}.checkpoint());
  bool same_params = pa.tensors.size() == pb.tensors.size();
  for (std::size_t i = 0; same_params && i < pa.tensors.size(); ++i) same_params = pa.tensors[i] == pb.tensors[i];

  std::string detail = differing.empty() ? "rerun identical" : "rerun differs in";
  for (const auto& d : differing) detail += " " + d;
  detail += std::string(", resume at 75: parameters ") + (same_params ? "identical" : "differ") + ", history " +
            (resumed_history ? "identical" : "differs");
  return {differing.empty() && same_params && resumed_history, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria 1-10"};
  fs::path work = "acceptance_runs";
  app.add_option("--work-dir", work, "scratch directory for experiment outputs");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  try {
    const auto t0 = Clock::now();
    const TheorySummary theory = verify_theory(0, 200, 0);
    const double bound_secs = seconds_since(t0);
    const TheorySummary lemma = verify_theory(0, 0, 100);
    report(1, criterion_bound(theory, bound_secs));
    report(2, criterion_visitation(lemma));
    report(3, criterion_simplified_tv());
    report(4, criterion_gradients());
    report(5, criterion_loss_values());

    std::vector<RunResult> full, rank_only;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      full.push_back(run_desk(desk_doc(seed), work / ("full_seed" + std::to_string(seed))));
      json ablated = desk_doc(seed);
      ablated["ablation"] = {{"distance_term", "none"}};
      rank_only.push_back(run_desk(ablated, work / ("rank_only_seed" + std::to_string(seed))));
      const auto& f = full.back();
      const auto& r = rank_only.back();
      std::printf("  seed %llu: loss %.4f -> %.4f, pearson train %.4f heldout %.4f, policy %.4f vs demos %.4f, "
                  "%.1f s | rank-only heldout %.4f\n",
                  static_cast<unsigned long long>(seed), f.first_loss, f.final_loss, f.pearson_train,
                  f.pearson_heldout, f.policy_return, f.demo_return, f.seconds, r.pearson_heldout);
    }

    {
      bool loss_down = true;
      double slowest = 0.0;
      std::vector<double> p_train, p_heldout, margin;
      for (const auto& r : full) {
        loss_down = loss_down && r.final_loss < r.first_loss;
        slowest = std::max(slowest, r.seconds);
        p_train.push_back(r.pearson_train);
        p_heldout.push_back(r.pearson_heldout);
        margin.push_back(r.policy_return - r.demo_return);
      }
      const bool a = loss_down;
      const bool b = median(p_train) >= 0.8 && median(p_heldout) >= 0.6;
      const bool c = median(margin) >= 0.0;
      const bool t = slowest <= 600.0;
      report(6, {a && b && c && t,
                 std::string("(a) loss decreased on every seed: ") + (a ? "yes" : "no") + "; (b) median pearson train " +
                     fmt(median(p_train)) + " (>= 0.8), heldout " + fmt(median(p_heldout)) + " (>= 0.6); (c) median " +
                     "policy - demo return " + fmt(median(margin)) + " (>= 0); slowest run " + fmt(slowest, 3) + " s"});
    }

    {
      std::vector<double> f, r;
      for (const auto& x : full) f.push_back(x.pearson_heldout);
      for (const auto& x : rank_only) r.push_back(x.pearson_heldout);
      report(7, {median(f) >= median(r),
                 "median heldout pearson full " + fmt(median(f)) + ", rank-only " + fmt(median(r))});
    }

    {
      std::string detail;
      bool ok = true;
      for (std::size_t k : {1u, 5u, 10u}) {
        RunResult r;
        if (k == 5) {
          r = full.front();
        } else {
          json doc = desk_doc(0);
          doc["K"] = k;
          try {
            r = run_desk(doc, work / ("context_k" + std::to_string(k)));
          } catch (const std::exception& e) {
            ok = false;
            detail += "K=" + std::to_string(k) + " failed: " + e.what() + "; ";
            continue;
          }
        }
        detail += "K=" + std::to_string(k) + " train " + fmt(r.pearson_train) + " heldout " + fmt(r.pearson_heldout) +
                  " policy " + fmt(r.policy_return) + "; ";
      }
      report(8, {ok, detail});
    }

    report(9, criterion_invariants());
    report(10, criterion_determinism(full.front(), work));
  } catch (const std::exception& e) {
    std::printf("aborted: %s\n", e.what());
    return 2;
  }

  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
