// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails. Pass criterion numbers as arguments to
// run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "abas/commands.hpp"

using namespace abas;

namespace {

// ---------------------------------------------------------------------------
// Shared helpers

Matrix uniform_matrix(std::size_t r, std::size_t c, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (double& v : m.data()) v = u(rng);
  return m;
}

Matrix random_probs(std::size_t r, std::size_t c, Rng& rng) {
  return softmax_rows(uniform_matrix(r, c, rng, -3.0, 3.0));
}

std::vector<int> uniform_labels(std::size_t n, int k, Rng& rng) {
  std::uniform_int_distribution<int> u(0, k - 1);
  std::vector<int> y(n);
  for (int& v : y) v = u(rng);
  return y;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(prec);
  os << v;
  return os.str();
}

std::string sci(double v) {
  std::ostringstream os;
  os.setf(std::ios::scientific);
  os.precision(2);
  os << v;
  return os.str();
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------------------
// Benchmark family: 7 classes, 16 dims, 600 + 600 samples, 30 degree rotation
// plus a mean translation. The branch widths are scaled to the desk network.

RunConfig bench_config(std::uint64_t pair_seed) {
  RunConfig c;
  PairSpec& g = c.data.generate;
  g.n_classes = 7;
  g.dims = 16;
  g.n_source = 600;
  g.n_target = 600;
  g.cluster_std = 2.0;
  g.class_sep = 3.0;
  g.shift.rotation_deg = 30.0;
  g.shift.translation = 20.0;
  g.seed = pair_seed;
  c.space.fc_h = {16, 32, 64, 128};
  c.space.fc_b = {16, 32, 64};
  c.schedule.mu0 = 0.01;
  c.bohb.min_budget = 200;
  c.bohb.max_budget = 600;
  c.bohb.eta = 3;
  c.bohb.rounds = 8;
  c.bohb.parallelism = 1;
  c.seed = pair_seed;
  c.bohb.seed = pair_seed;
  return c;
}

double final_accuracy(const TrialRecord& t, std::size_t k) {
  return t.target_accuracy.empty() ? 1.0 / static_cast<double>(k) : t.target_accuracy.back();
}

/// Graded random corpus at the full budget, cached per pair seed.
const CorpusResult& bench_corpus(std::uint64_t pair_seed, int n) {
  static std::map<std::pair<std::uint64_t, int>, CorpusResult> cache;
  const auto key = std::make_pair(pair_seed, n);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  const RunConfig cfg = bench_config(pair_seed);
  const DomainPair pair = make_pair(cfg.data.generate);
  CorpusResult c = build_random_corpus(cfg, pair, n, "bench-" + std::to_string(pair_seed));
  return cache.emplace(key, std::move(c)).first->second;
}

std::size_t label_reads_in_searches = 0;
std::size_t searches_run = 0;

// ---------------------------------------------------------------------------
// 1. Schedules

Outcome criterion_schedule() {
  TrainSchedule s;
  s.mu0 = 0.01;
  double worst = 0.0;
  for (double p : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    const double lr = 0.01 * std::exp(-0.75 * std::log1p(10.0 * p));
    const double rho = std::tanh(5.0 * p);  // 2 / (1 + e^{-10p}) - 1
    worst = std::max({worst, std::abs(lr_at(s, p) - lr), std::abs(grl_rho_at(s, p) - rho)});
  }
  const bool rho0 = grl_rho_at(s, 0.0) == 0.0;
  return {worst <= 1e-12 && rho0, "max |err| " + sci(worst) + (rho0 ? ", rho(0) = 0" : ", rho(0) != 0")};
}

// ---------------------------------------------------------------------------
// 2. Gradient reversal

Var ungated_branch(Tape& t, const NetworkVars& v, Var h) {
  const std::size_t last = v.n_branch - 1;
  for (std::size_t i = 0; i < last; ++i) h = t.relu(dense(t, h, v.branch_w(i), v.branch_b(i)));
  return dense(t, h, v.branch_w(last), v.branch_b(last));
}

std::vector<Matrix> adversarial_grads(const Network& net, const Matrix& x, const std::vector<int>& domain, double rho,
                                      bool gated) {
  Tape t;
  const NetworkVars v = bind(t, net);
  Var f = extractor_forward(t, v, t.constant(x));
  Var out = gated ? branch_forward(t, v, f, rho) : ungated_branch(t, v, f);
  t.backward(tape_dann_loss(t, out, domain, DannForm::log));
  return collect_grads(t, v);
}

Outcome criterion_grl() {
  Rng rng(2);
  double worst_gate = 0.0, worst_fd = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    const AdvMode mode = rep % 2 ? AdvMode::alda : AdvMode::dann;
    std::uniform_int_distribution<int> small(2, 5);
    BranchConfig c;
    c.n_fc_layers = 1 + rep % 3;
    c.fc_h = small(rng) + 2;
    c.fc_b = small(rng) + 1;
    c.dropout_p = 0.0;
    c.lambda = 0.3 + 0.1 * rep;
    NetworkDims d;
    d.input_dim = static_cast<std::size_t>(small(rng));
    d.hidden_dim = static_cast<std::size_t>(small(rng) + 2);
    d.feature_dim = static_cast<std::size_t>(small(rng) + 1);
    d.n_classes = static_cast<std::size_t>(small(rng));
    d.branch_out_dim = mode == AdvMode::dann ? 1 : d.n_classes;
    Network net = build_network(c, d, 1000 + rep);
    net.for_each_param([&](Matrix& m, ParamGroup) {
      if (m.rows() == 1) m = uniform_matrix(1, m.cols(), rng, -0.5, 0.5);
    });
    const double rho = std::uniform_real_distribution<double>(0.05, 1.0)(rng);

    // Gate: extractor gradient through the branch is -rho times the ungated one.
    const std::size_t n = 8;
    const Matrix x = uniform_matrix(n, d.input_dim, rng, -2.0, 2.0);
    std::vector<int> domain(n, 0);
    std::fill(domain.begin(), domain.begin() + n / 2, 1);
    NetworkDims d1 = d;
    d1.branch_out_dim = 1;
    const Network gate_net = build_network(c, d1, 2000 + rep);
    const auto gated = adversarial_grads(gate_net, x, domain, rho, true);
    const auto plain = adversarial_grads(gate_net, x, domain, rho, false);
    for (std::size_t i = 0; i < 2 * gate_net.extractor.size(); ++i)
      for (std::size_t e = 0; e < gated[i].size(); ++e)
        worst_gate = std::max(worst_gate, std::abs(gated[i].data()[e] + rho * plain[i].data()[e]));

    // Full network against central differences. C and D parameters descend
    // the total loss; G descends CE - rho * lambda * L_adv.
    Batch b;
    b.source_x = uniform_matrix(6, d.input_dim, rng, -2.0, 2.0);
    b.source_y = uniform_labels(6, static_cast<int>(d.n_classes), rng);
    b.target_x = uniform_matrix(5, d.input_dim, rng, -2.0, 2.0);
    LossOptions lo;
    lo.mode = mode;
    lo.lambda = c.lambda;
    lo.rho = rho;
    Tape t;
    const NetworkVars v = bind(t, net);
    t.backward(build_total_loss(t, v, b, lo).total);
    const auto grads = collect_grads(t, v);
    auto objective = [&](bool extractor) {
      Tape u;
      const LossTerms terms = build_total_loss(u, bind(u, net), b, lo);
      if (!extractor) return u.value(terms.total)(0, 0);
      return u.value(terms.ce)(0, 0) - rho * c.lambda * u.value(terms.adv)(0, 0);
    };
    std::size_t k = 0;
    net.for_each_param([&](Matrix& m, ParamGroup) {
      const bool extractor = k < 2 * v.n_extractor;
      const Matrix& g = grads[k++];
      for (std::size_t e = 0; e < m.size(); ++e) {
        const double orig = m.data()[e], h = 1e-5;
        m.data()[e] = orig + h;
        const double fp = objective(extractor);
        m.data()[e] = orig - h;
        const double fm = objective(extractor);
        m.data()[e] = orig;
        const double fd = (fp - fm) / (2.0 * h);
        const double rel = std::abs(fd - g.data()[e]) / std::max({std::abs(fd), std::abs(g.data()[e]), 1e-6});
        worst_fd = std::max(worst_fd, rel);
      }
    });
  }
  return {worst_gate <= 1e-10 && worst_fd <= 1e-4,
          "gate max |err| " + sci(worst_gate) + ", finite-difference max rel err " + sci(worst_fd)};
}

// ---------------------------------------------------------------------------
// 3. Metric oracles

double oracle_entropy(const Matrix& p) {
  long double s = 0.0L;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    long double h = 0.0L;
    for (std::size_t j = 0; j < p.cols(); ++j)
      if (p(i, j) > 0.0) h += -static_cast<long double>(p(i, j)) * std::log(static_cast<long double>(p(i, j)));
    s += h;
  }
  return static_cast<double>(s / p.rows());
}

double oracle_diversity(const Matrix& p) {
  long double h = 0.0L;
  for (std::size_t j = 0; j < p.cols(); ++j) {
    long double q = 0.0L;
    for (std::size_t i = 0; i < p.rows(); ++i) q += p(i, j);
    q /= p.rows();
    if (q > 0.0L) h -= q * std::log(q);
  }
  return static_cast<double>(h / p.cols());
}

double dist(const Matrix& x, std::size_t a, std::size_t b) {
  long double s = 0.0L;
  for (std::size_t j = 0; j < x.cols(); ++j) s += (x(a, j) - x(b, j)) * static_cast<long double>(x(a, j) - x(b, j));
  return static_cast<double>(std::sqrt(s));
}

std::optional<double> oracle_silhouette(const Matrix& x, const std::vector<int>& y) {
  const std::set<int> clusters(y.begin(), y.end());
  if (clusters.size() < 2) return std::nullopt;
  long double total = 0.0L;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    std::map<int, std::vector<double>> d;
    for (std::size_t j = 0; j < x.rows(); ++j)
      if (j != i) d[y[j]].push_back(dist(x, i, j));
    if (d[y[i]].empty()) continue;  // singleton
    auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0L) / v.size(); };
    const long double a = mean(d[y[i]]);
    long double b = INFINITY;
    for (const auto& [c, v] : d)
      if (c != y[i] && !v.empty()) b = std::min(b, mean(v));
    if (std::max(a, b) > 0.0L) total += (b - a) / std::max(a, b);
  }
  return static_cast<double>(total / x.rows());
}

/// Between-cluster dispersion via the total-minus-within identity.
std::optional<double> oracle_calinski(const Matrix& x, const std::vector<int>& y) {
  const std::size_t n = x.rows(), d = x.cols();
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < n; ++i) members[y[i]].push_back(i);
  const std::size_t k = members.size();
  if (k < 2 || n <= k) return std::nullopt;
  long double total = 0.0L, within = 0.0L;
  for (std::size_t j = 0; j < d; ++j) {
    long double m = 0.0L;
    for (std::size_t i = 0; i < n; ++i) m += x(i, j);
    m /= n;
    for (std::size_t i = 0; i < n; ++i) total += (x(i, j) - m) * (x(i, j) - m);
    for (const auto& [c, idx] : members) {
      long double mc = 0.0L;
      for (std::size_t i : idx) mc += x(i, j);
      mc /= idx.size();
      for (std::size_t i : idx) within += (x(i, j) - mc) * (x(i, j) - mc);
    }
  }
  if (!(within > 0.0L)) return std::nullopt;
  return static_cast<double>(((total - within) / (k - 1)) / (within / (n - k)));
}

std::vector<int> oracle_mode(const PredictionHistory& h) {
  std::vector<int> out;
  for (std::size_t i = 0; i < h.epochs.front().size(); ++i) {
    std::map<int, int> count;
    for (const auto& e : h.epochs) ++count[e[i]];
    int best = -1, best_n = 0;
    for (const auto& e : h.epochs)
      if (count[e[i]] > best_n) {
        best = e[i];
        best_n = count[e[i]];
      }
    out.push_back(best);
  }
  return out;
}

Outcome criterion_metrics() {
  Rng rng(3);
  double worst = 0.0;
  int discrete_mismatch = 0, definedness_mismatch = 0;
  auto cmp = [&](std::optional<double> a, std::optional<double> b) {
    if (a.has_value() != b.has_value()) {
      ++definedness_mismatch;
      return;
    }
    if (a) worst = std::max(worst, std::abs(*a - *b) / std::max(1.0, std::abs(*b)));
  };
  for (int rep = 0; rep < 200; ++rep) {
    std::uniform_int_distribution<int> pick_n(2, 50), pick_k(2, 6), pick_d(1, 5);
    const std::size_t n = static_cast<std::size_t>(pick_n(rng));
    const int k = pick_k(rng);
    const Matrix p = random_probs(n, static_cast<std::size_t>(k), rng);
    worst = std::max({worst, std::abs(target_entropy(p) - oracle_entropy(p)), std::abs(diversity(p) - oracle_diversity(p))});

    const Matrix x = uniform_matrix(n, static_cast<std::size_t>(pick_d(rng)), rng, -3.0, 3.0);
    const std::vector<int> y = uniform_labels(n, k, rng);
    cmp(silhouette_score(x, y), oracle_silhouette(x, y));
    cmp(calinski_harabasz_score(x, y), oracle_calinski(x, y));

    PredictionHistory h;
    const int epochs = std::uniform_int_distribution<int>(1, 9)(rng);
    for (int e = 0; e < epochs; ++e) h.epochs.push_back(uniform_labels(n, k, rng));
    const std::vector<int> mode = oracle_mode(h);
    if (time_consistent_labels(h) != mode) ++discrete_mismatch;
    const std::vector<double> acc = pseudo_label_accuracy(h);
    for (int e = 0; e < epochs; ++e) {
      std::size_t agree = 0;
      for (std::size_t i = 0; i < n; ++i) agree += h.epochs[e][i] == mode[i];
      if (acc[e] != static_cast<double>(agree) / static_cast<double>(n)) ++discrete_mismatch;
    }
  }
  return {worst <= 1e-9 && discrete_mismatch == 0 && definedness_mismatch == 0,
          "200 instances, max err " + sci(worst) + ", discrete mismatches " +
              std::to_string(discrete_mismatch) + ", definedness mismatches " + std::to_string(definedness_mismatch)};
}

// ---------------------------------------------------------------------------
// 4. Hyperband plan and promotions

/// Every promotion in a ledger is the top floor(n / eta) of its rung by EMS
/// score, ranked independently from the finished events (score descending,
/// trial id ascending, unscored last).
bool promotions_are_top(const std::vector<nlohmann::json>& events, int eta, std::string& why, int& rungs_checked) {
  std::map<std::pair<int, int>, std::vector<std::pair<double, int>>> rung_scores;  // (round, rung) -> (score, trial)
  std::map<std::pair<int, int>, std::set<int>> promoted;
  for (const auto& e : events) {
    const std::string kind = e.value("event", "");
    if (kind == "finished") {
      const auto key = std::make_pair(e.at("round").get<int>(), e.at("rung").get<int>());
      const double s = e.at("ems_score").is_null() || e.at("status") != "completed" ? -INFINITY
                                                                                   : e.at("ems_score").get<double>();
      rung_scores[key].push_back({s, e.at("trial_id").get<int>()});
    }
  }
  std::map<std::pair<int, int>, int> from_budget_rung;
  for (const auto& e : events)
    if (e.value("event", "") == "rung_completed")
      from_budget_rung[{e.at("round").get<int>(), e.at("budget").get<int>()}] = e.at("rung").get<int>();
  for (const auto& e : events)
    if (e.value("event", "") == "promoted") {
      const int round = e.at("round").get<int>();
      const int rung = from_budget_rung.at({round, e.at("from_budget").get<int>()});
      promoted[{round, rung}].insert(e.at("from_trial").get<int>());
    }
  for (const auto& e : events) {
    if (e.value("event", "") != "rung_completed") continue;
    const auto key = std::make_pair(e.at("round").get<int>(), e.at("rung").get<int>());
    auto rows = rung_scores[key];
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    const std::size_t expect_n = rows.size() / static_cast<std::size_t>(eta);
    const bool last = !promoted.count(key) && e.at("n_promote").get<int>() == 0;
    std::set<int> expect;
    if (!last)
      for (std::size_t i = 0; i < expect_n && std::isfinite(rows[i].first); ++i) expect.insert(rows[i].second);
    const std::set<int> got = promoted.count(key) ? promoted[key] : std::set<int>{};
    if (got != expect) {
      why = "round " + std::to_string(key.first) + " rung " + std::to_string(key.second) +
            ": promotions differ from the top scorers";
      return false;
    }
    ++rungs_checked;
  }
  return true;
}

std::string toy_desk_config(const std::filesystem::path& dir, const std::string& ems, int parallelism) {
  std::ostringstream os;
  os << "[data]\nclasses = 3\ndims = 4\nn_source = 90\nn_target = 90\nrotation_deg = 30\ntranslation = 2\nseed = 4\n"
     << "[network]\nhidden_dim = 16\nfeature_dim = 8\n"
     << "[schedule]\nmu0 = 0.01\n"
     << "[space]\nfc_h = 8,16\nfc_b = 4,8\n"
     << "[bohb]\nmin_budget = 20\nmax_budget = 180\neta = 3\nrounds = 4\nparallelism = " << parallelism << "\n"
     << "[trainer]\nsnapshot_every = 20\n"
     << "[ems]\nregressor = " << ems << "\n"
     << "[run]\nseed = 9\noutput_dir = " << dir.string() << "\n";
  return os.str();
}

/// A small label-free search through the CLI code path. The EMS model is fit
/// once on a sibling pair.
SearchReport run_desk_search(const std::filesystem::path& root, const std::string& name, int parallelism) {
  static const std::filesystem::path ems_path = [&] {
    std::istringstream is(toy_desk_config(root / "unused", "", 1));
    RunConfig cfg = parse_config(is);
    cfg.seed = 77;
    const DomainPair pair = make_pair(cfg.data.generate);
    const CorpusResult c = build_random_corpus(cfg, pair, 10, "desk-fit");
    const std::filesystem::path p = root / "ems.json";
    std::ofstream os(p);
    save_ems_model(fit_ems(c.dataset), os);
    return p;
  }();
  std::istringstream is(toy_desk_config(root / name, ems_path.string(), parallelism));
  const RunConfig cfg = parse_config(is, root);
  SearchReport r = cmd_search(cfg);
  label_reads_in_searches += r.label_reads_during_search;
  ++searches_run;
  return r;
}

std::filesystem::path scratch_dir() {
  static const std::filesystem::path p = [] {
    auto d = std::filesystem::temp_directory_path() /
             ("abas-acceptance-" + std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
    std::filesystem::create_directories(d);
    return d;
  }();
  return p;
}

Outcome criterion_plan() {
  std::string detail;
  bool ok = true;
  const auto plan = hyperband_brackets(2000, 6000, 3);
  const bool big = plan.size() == 2 && plan[0].s == 1 && plan[0].rungs.size() == 2 && plan[0].rungs[0].n_configs == 3 &&
                   plan[0].rungs[0].budget == 2000 && plan[0].rungs[1].n_configs == 1 &&
                   plan[0].rungs[1].budget == 6000 && plan[1].s == 0 && plan[1].rungs.size() == 1 &&
                   plan[1].rungs[0].n_configs == 2 && plan[1].rungs[0].budget == 6000;
  ok = ok && big;
  detail += big ? "(2000,6000,3) plan exact" : "(2000,6000,3) plan wrong";

  const auto classic = hyperband_brackets(1, 27, 3);
  std::vector<int> budgets;
  for (const Rung& r : classic.front().rungs) budgets.push_back(r.budget);
  const bool rungs = budgets == std::vector<int>{1, 3, 9, 27};
  ok = ok && rungs;
  detail += rungs ? "; (1,27,3) rungs 1,3,9,27" : "; (1,27,3) rungs wrong";

  // Promotions in ledgers: a toy objective on (1, 27, 3) and a real desk search.
  std::stringstream sink;
  Ledger ledger(&sink);
  SearchOptions o;
  o.min_budget = 1;
  o.max_budget = 27;
  o.eta = 3;
  o.rounds = 8;
  o.parallelism = 1;
  o.seed = 4;
  SearchSpace space;
  const Trainer toy = [](const BranchConfig& c, int budget, std::uint64_t seed) {
    TrialRecord r;
    r.config = c;
    r.budget = budget;
    r.seed = seed;
    r.snapshot_iterations = {budget};
    SnapshotMetrics m;
    m.diversity = -std::abs(std::log(c.lambda)) + 0.01 * static_cast<double>(seed % 97) / budget;
    r.snapshots = {m};
    return r;
  };
  const Estimator est{[](const TrialRecord& r) { return r.snapshots.back().diversity; }, {}};
  run_search(space, o, toy, est, &ledger);
  std::string why;
  int checked = 0;
  const bool toy_ok = promotions_are_top(ledger.events(), 3, why, checked);
  std::ifstream desk_is(run_desk_search(scratch_dir(), "run-a", 2).ledger_path);
  const bool desk_ok = promotions_are_top(read_ledger(desk_is), 3, why, checked);
  ok = ok && toy_ok && desk_ok;
  detail += toy_ok && desk_ok ? "; promotions match top-floor(n/eta) in " + std::to_string(checked) + " rungs"
                              : "; " + why;
  return {ok, detail};
}

// ---------------------------------------------------------------------------
// 5. EMS recovery

Outcome criterion_ems_recovery() {
  const std::vector<Metric> feats = default_ems_features();
  const std::vector<double> w{-0.06, 0.18, 0.04, 0.001, 0.12, 0.08};  // keeps targets inside [0, 1]
  auto corpus = [&](std::uint64_t seed, const std::string& id) {
    Rng rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 0.01);
    SnapshotDataset ds;
    ds.corpus_id = id;
    for (int i = 0; i < 2000; ++i) {
      SnapshotRow r;
      r.run_id = std::to_string(i / 10);
      r.epoch = i % 10;
      r.metrics.entropy = 2.0 * u(rng);
      r.metrics.diversity = u(rng);
      r.metrics.silhouette = 2.0 * u(rng) - 1.0;
      r.metrics.calinski = 200.0 * u(rng);
      r.metrics.source_loss = u(rng);
      r.metrics.source_acc = u(rng);
      r.metrics.pseudo_label_acc = u(rng);
      double y = 0.2;
      for (std::size_t j = 0; j < feats.size(); ++j) y += w[j] * *r.metrics.get(feats[j]);
      r.target_acc = y + noise(rng);
      ds.rows.push_back(r);
    }
    return ds;
  };
  const SnapshotDataset train = corpus(5, "planted-fit"), holdout = corpus(6, "planted-holdout");
  const EmsRegressor reg = fit(train, feats);
  const std::vector<double> raw = reg.raw_weights();
  double worst = 0.0;
  for (std::size_t j = 0; j < w.size(); ++j) worst = std::max(worst, std::abs(raw[j] - w[j]) / std::abs(w[j]));
  std::vector<double> s, y;
  for (const auto& r : holdout.rows) {
    s.push_back(score(reg, r.metrics));
    y.push_back(*r.target_acc);
  }
  // Independent Spearman: Pearson of ranks, no ties in continuous data.
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i) r[idx[i]] = static_cast<double>(i);
    return r;
  };
  const std::vector<double> rs = ranks(s), ry = ranks(y);
  double d2 = 0.0;
  for (std::size_t i = 0; i < rs.size(); ++i) d2 += (rs[i] - ry[i]) * (rs[i] - ry[i]);
  const double n = static_cast<double>(rs.size());
  const double rho = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
  return {worst <= 0.05 && rho > 0.95, "max rel weight err " + fmt(worst, 5) + ", holdout Spearman " + fmt(rho, 4)};
}

// ---------------------------------------------------------------------------
// 6. Ensemble against single metrics

/// Final-snapshot rows of the completed trials of a corpus.
struct RunRows {
  std::vector<SnapshotMetrics> metrics;
  std::vector<double> accuracy;
};

RunRows final_rows(const CorpusResult& c) {
  RunRows out;
  for (const TrialRecord& t : c.trials)
    if (t.completed() && !t.snapshots.empty() && !t.target_accuracy.empty()) {
      out.metrics.push_back(t.snapshots.back());
      out.accuracy.push_back(t.target_accuracy.back());
    }
  return out;
}

Outcome criterion_ensemble() {
  constexpr int kTrials = 60;
  bool ok = true;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    // Fit on a sibling pair of the same family, score the evaluation pair.
    const EmsModel model = fit_ems(bench_corpus(seed + 100, kTrials).dataset);
    const RunRows rows = final_rows(bench_corpus(seed, kTrials));
    std::vector<double> ems;
    for (const auto& m : rows.metrics) ems.push_back(run_score(model.cross_run, {m}));
    const double rho_ems = spearman(ems, rows.accuracy);
    double best_single = 0.0;
    std::string best_name;
    for (Metric m : kAllMetrics) {
      std::vector<double> x, y;
      for (std::size_t i = 0; i < rows.metrics.size(); ++i)
        if (auto v = rows.metrics[i].get(m)) {
          x.push_back(*v);
          y.push_back(rows.accuracy[i]);
        }
      if (x.size() < 3) continue;
      const double r = std::abs(spearman(x, y));
      if (r > best_single) {
        best_single = r;
        best_name = std::string(metric_name(m));
      }
    }
    const bool pass = rho_ems >= best_single - 0.02;
    ok = ok && pass;
    detail += (detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) + ": ems " + fmt(rho_ems, 3) +
              " vs |" + best_name + "| " + fmt(best_single, 3) + " (n=" + std::to_string(rows.accuracy.size()) + ")";
  }
  return {ok, detail};
}

// ---------------------------------------------------------------------------
// 7. Search against random configurations

Outcome criterion_search_value() {
  const EmsModel model = fit_ems(bench_corpus(101, 60).dataset);
  int wins = 0;
  bool spread_ok = true;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    std::vector<double> random_acc;
    const CorpusResult& random = bench_corpus(seed, 40);
    for (const TrialRecord& t : random.trials) random_acc.push_back(final_accuracy(t, 7));
    const double med = median(random_acc);
    const auto [lo, hi] = std::minmax_element(random_acc.begin(), random_acc.end());
    const double spread = *hi - *lo;
    spread_ok = spread_ok && spread > 0.10;

    RunConfig cfg = bench_config(seed);
    cfg.bohb.seed = 1000 + seed;
    const DomainPair pair = make_pair(cfg.data.generate);
    const std::size_t reads = SealedLabels::total_reads();
    const SearchResult res = run_search(cfg.space, cfg.bohb, make_trainer(cfg, pair), make_estimator(model), nullptr);
    label_reads_in_searches += SealedLabels::total_reads() - reads;
    ++searches_run;
    TrialRecord graded = res.best;
    attach_target_accuracy(graded, pair.hidden_target_labels);
    const double chosen = graded.target_accuracy.at(res.best_epoch);
    wins += chosen >= med;
    detail += (detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) + ": selected " +
              fmt(chosen, 3) + " vs median " + fmt(med, 3) + ", spread " + fmt(spread, 3);
  }
  return {spread_ok && wins >= 4, std::to_string(wins) + "/5 at or above median; " + detail};
}

// ---------------------------------------------------------------------------
// 8. Label-freeness

Outcome criterion_label_free() {
  run_desk_search(scratch_dir(), "run-taint", 1);
  // The counter must be live: evaluation code does read it.
  const std::size_t before = SealedLabels::total_reads();
  const DomainPair pair = make_pair(bench_config(1).data.generate);
  TrialRecord probe;
  probe.predictions.epochs = {std::vector<int>(pair.target_x.rows(), 0)};
  attach_target_accuracy(probe, pair.hidden_target_labels);
  const bool live = SealedLabels::total_reads() > before;
  return {label_reads_in_searches == 0 && live && searches_run > 0,
          std::to_string(label_reads_in_searches) + " sealed-label reads across " + std::to_string(searches_run) +
              " searches" + (live ? ", accessor instrumented" : ", accessor not counting")};
}

// ---------------------------------------------------------------------------
// 9. Determinism

Outcome criterion_determinism() {
  const std::filesystem::path root = scratch_dir();
  const std::string a = slurp(run_desk_search(root, "run-a", 2).ledger_path);
  const std::string b = slurp(run_desk_search(root, "run-b", 2).ledger_path);
  const std::string c = slurp(run_desk_search(root, "run-c", 1).ledger_path);
  const bool same = !a.empty() && a == b;
  return {same, std::to_string(a.size()) + " byte ledgers " + (same ? "identical" : "differ") +
                    (a == c ? "; serial run also identical" : "; serial run differs")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"schedule exactness", criterion_schedule},
      {"gradient reversal contract", criterion_grl},
      {"metric oracles", criterion_metrics},
      {"hyperband plan and promotions", criterion_plan},
      {"ems recovery", criterion_ems_recovery},
      {"ensemble vs single metrics", criterion_ensemble},
      {"search vs random configs", criterion_search_value},
      {"label-freeness", criterion_label_free},
      {"determinism", criterion_determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[i].first << "): " << o.detail
              << " [" << fmt(secs, 1) << "s]" << std::endl;
  }
  std::error_code ec;
  std::filesystem::remove_all(scratch_dir(), ec);
  return failed == 0 ? 0 : 1;
}
