#pragma once

// Multi-fidelity search: Hyperband brackets of successive halving, with new
// configurations proposed by a good/bad kernel density ratio fitted on the
// observations collected so far.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "abas/search_space.hpp"
#include "abas/trial.hpp"

namespace abas {

// ---------------------------------------------------------------------------
// Hyperband plan

struct Rung {
  int n_configs = 0;
  int budget = 0;
  int n_promote = 0;  // configs carried to the next rung; 0 on the last rung
};

struct Bracket {
  int s = 0;
  std::vector<Rung> rungs;
};

inline int hyperband_s_max(int min_budget, int max_budget, int eta) {
  const double r = std::log(static_cast<double>(max_budget) / static_cast<double>(min_budget)) / std::log(eta);
  return static_cast<int>(std::floor(r + 1e-9));
}

/// Brackets ordered from the most exploratory (s = s_max) down to s = 0.
inline std::vector<Bracket> hyperband_brackets(int min_budget, int max_budget, int eta) {
  if (min_budget <= 0) throw std::invalid_argument("hyperband: min_budget must be positive");
  if (max_budget < min_budget) throw std::invalid_argument("hyperband: max_budget must be >= min_budget");
  if (eta < 2) throw std::invalid_argument("hyperband: eta must be >= 2");
  const int s_max = hyperband_s_max(min_budget, max_budget, eta);
  std::vector<Bracket> plan;
  for (int s = s_max; s >= 0; --s) {
    Bracket b;
    b.s = s;
    int n = static_cast<int>(std::ceil(static_cast<double>(s_max + 1) / (s + 1) * std::pow(eta, s) - 1e-9));
    for (int i = 0; i <= s; ++i) {
      Rung r;
      r.n_configs = n;
      r.budget = static_cast<int>(std::lround(max_budget * std::pow(eta, i - s)));
      n = std::max(1, n / eta);
      r.n_promote = i < s ? n : 0;
      b.rungs.push_back(r);
    }
    plan.push_back(std::move(b));
  }
  return plan;
}

/// Training iterations a bracket spends when every trial runs to its budget.
inline long long bracket_cost(const Bracket& b) {
  long long c = 0;
  for (const Rung& r : b.rungs) c += static_cast<long long>(r.n_configs) * r.budget;
  return c;
}

// ---------------------------------------------------------------------------
// Kernel density surrogate

struct SurrogateOptions {
  double good_quantile = 0.15;
  int min_points = static_cast<int>(SearchSpace::kDims) + 1;
  double random_fraction = 1.0 / 3.0;
  int num_candidates = 64;
  double bandwidth_factor = 3.0;
  double min_bandwidth = 1e-3;

  void validate() const {
    if (!(good_quantile > 0.0 && good_quantile < 1.0))
      throw std::invalid_argument("surrogate: good_quantile must lie in (0, 1)");
    if (min_points < 1) throw std::invalid_argument("surrogate: min_points must be >= 1");
    if (!(random_fraction >= 0.0 && random_fraction <= 1.0))
      throw std::invalid_argument("surrogate: random_fraction must lie in [0, 1]");
    if (num_candidates < 1) throw std::invalid_argument("surrogate: num_candidates must be >= 1");
    if (!(bandwidth_factor > 0.0)) throw std::invalid_argument("surrogate: bandwidth_factor must be positive");
    if (!(min_bandwidth > 0.0)) throw std::invalid_argument("surrogate: min_bandwidth must be positive");
  }
};

/// Product-kernel density over encoded points. Continuous dimensions use a
/// Gaussian kernel, categorical ones Aitchison-Aitken smoothing.
class Kde {
 public:
  using Point = SearchSpace::Point;

  Kde(std::vector<Point> points, const SearchSpace& space, double min_bandwidth) : points_(std::move(points)) {
    if (points_.empty()) throw std::invalid_argument("kde: no points");
    const double n = static_cast<double>(points_.size());
    const double scott = std::pow(n, -1.0 / (SearchSpace::kDims + 4.0));
    for (std::size_t d = 0; d < SearchSpace::kDims; ++d) {
      card_[d] = space.cardinality(d);
      double mean = 0.0;
      for (const Point& p : points_) mean += p[d];
      mean /= n;
      double var = 0.0;
      for (const Point& p : points_) var += (p[d] - mean) * (p[d] - mean);
      // Small good sets collapse the sample spread; floor it at the spread of
      // a uniform draw over the dimension, shrinking as points accumulate.
      const double c = static_cast<double>(card_[d]);
      const double uniform_sd = card_[d] == 0 ? std::sqrt(1.0 / 12.0) : std::sqrt((c * c - 1.0) / 12.0);
      double sd = points_.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
      sd = std::max(sd, uniform_sd / (1.0 + n));
      if (card_[d] == 0) {
        bw_[d] = std::max(min_bandwidth, sd * scott);
      } else {
        const double cap = (c - 1.0) / c;
        const double floor = std::max(min_bandwidth, 1.0 / (1.0 + n));
        bw_[d] = card_[d] == 1 ? 0.0 : std::clamp(1.06 * sd * scott, std::min(floor, cap), cap);
      }
    }
  }

  std::size_t size() const noexcept { return points_.size(); }
  const Point& bandwidth() const noexcept { return bw_; }

  /// log density, finite everywhere.
  double log_pdf(const Point& x) const {
    std::vector<double> terms(points_.size());
    for (std::size_t i = 0; i < points_.size(); ++i) {
      double lk = 0.0;
      for (std::size_t d = 0; d < SearchSpace::kDims; ++d) lk += log_kernel(d, x[d], points_[i][d]);
      terms[i] = lk;
    }
    const double mx = *std::max_element(terms.begin(), terms.end());
    double s = 0.0;
    for (double t : terms) s += std::exp(t - mx);
    return mx + std::log(s) - std::log(static_cast<double>(points_.size()));
  }

  double pdf(const Point& x) const { return std::exp(log_pdf(x)); }

  /// Picks a stored point and perturbs it with kernels widened by `factor`.
  Point sample(Rng& rng, double factor) const {
    std::uniform_int_distribution<std::size_t> pick(0, points_.size() - 1);
    const Point& c = points_[pick(rng)];
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Point x{};
    for (std::size_t d = 0; d < SearchSpace::kDims; ++d) {
      if (card_[d] == 0) {
        std::normal_distribution<double> g(c[d], bw_[d] * factor);
        double v = g(rng);
        for (int tries = 0; (v < 0.0 || v > 1.0) && tries < 100; ++tries) v = g(rng);
        x[d] = std::clamp(v, 0.0, 1.0);
      } else if (card_[d] > 1 && u(rng) < bw_[d]) {
        std::uniform_int_distribution<std::size_t> other(0, card_[d] - 2);
        std::size_t k = other(rng);
        if (k >= static_cast<std::size_t>(c[d])) ++k;
        x[d] = static_cast<double>(k);
      } else {
        x[d] = c[d];
      }
    }
    return x;
  }

 private:
  double log_kernel(std::size_t d, double x, double c) const {
    if (card_[d] == 0) {
      const double z = (x - c) / bw_[d];
      return -0.5 * z * z - std::log(bw_[d] * std::sqrt(2.0 * std::numbers::pi));
    }
    if (card_[d] == 1) return 0.0;
    return x == c ? std::log(1.0 - bw_[d]) : std::log(bw_[d] / static_cast<double>(card_[d] - 1));
  }

  std::vector<Point> points_;
  Point bw_{};
  std::array<std::size_t, SearchSpace::kDims> card_{};
};

struct Observation {
  SearchSpace::Point x;
  double loss = 0.0;  // -EMS score; +inf for diverged trials
};

struct Proposal {
  BranchConfig config;
  bool from_model = false;
  int model_budget = 0;  // 0 when the draw was uniform
};

class Surrogate {
 public:
  explicit Surrogate(SearchSpace space, SurrogateOptions opt = {}) : space_(std::move(space)), opt_(opt) {
    space_.validate();
    opt_.validate();
  }

  const SearchSpace& space() const noexcept { return space_; }
  const SurrogateOptions& options() const noexcept { return opt_; }

  void update(const TrialRecord& rec) {
    Observation o;
    o.x = space_.encode(rec.config);
    o.loss = rec.completed() && std::isfinite(rec.ems_score) ? -rec.ems_score
                                                             : std::numeric_limits<double>::infinity();
    obs_[rec.budget].push_back(o);
  }

  std::size_t observations(int budget) const {
    auto it = obs_.find(budget);
    return it == obs_.end() ? 0 : it->second.size();
  }

  std::size_t total_observations() const {
    std::size_t n = 0;
    for (const auto& [b, v] : obs_) n += v.size();
    return n;
  }

  /// ceil(q * n), capped by the number of non-diverged observations.
  std::size_t good_set_size(int budget) const {
    auto it = obs_.find(budget);
    if (it == obs_.end()) return 0;
    const std::size_t n = it->second.size();
    std::size_t finite = 0;
    for (const Observation& o : it->second) finite += std::isfinite(o.loss);
    const auto g = static_cast<std::size_t>(std::ceil(opt_.good_quantile * static_cast<double>(n) - 1e-9));
    return std::min(g, finite);
  }

  /// Largest budget with enough observations for both densities.
  std::optional<int> model_budget() const {
    for (auto it = obs_.rbegin(); it != obs_.rend(); ++it) {
      const std::size_t n = it->second.size();
      if (n < static_cast<std::size_t>(opt_.min_points)) continue;
      const std::size_t g = good_set_size(it->first);
      if (g >= 1 && g < n) return it->first;
    }
    return std::nullopt;
  }

  bool cold() const { return !model_budget().has_value(); }

  /// Good and bad densities for a budget; diverged observations are always bad.
  std::pair<Kde, Kde> densities(int budget) const {
    std::vector<Observation> v = obs_.at(budget);
    std::stable_sort(v.begin(), v.end(), [](const Observation& a, const Observation& b) { return a.loss < b.loss; });
    const std::size_t g = good_set_size(budget);
    std::vector<SearchSpace::Point> good, bad;
    for (std::size_t i = 0; i < v.size(); ++i) (i < g ? good : bad).push_back(v[i].x);
    return {Kde(std::move(good), space_, opt_.min_bandwidth), Kde(std::move(bad), space_, opt_.min_bandwidth)};
  }

 private:
  SearchSpace space_;
  SurrogateOptions opt_;
  std::map<int, std::vector<Observation>> obs_;
};

inline Proposal sample_config(const Surrogate& sur, Rng& rng) {
  const SurrogateOptions& o = sur.options();
  const std::optional<int> mb = sur.model_budget();
  bool uniform = !mb.has_value() || o.random_fraction >= 1.0;
  if (!uniform && o.random_fraction > 0.0) {
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    uniform = coin(rng) < o.random_fraction;
  }
  if (uniform) return {sur.space().sample_uniform(rng), false, 0};

  const auto [good, bad] = sur.densities(*mb);
  SearchSpace::Point best{};
  double best_score = -std::numeric_limits<double>::infinity();
  for (int c = 0; c < o.num_candidates; ++c) {
    const SearchSpace::Point x = good.sample(rng, o.bandwidth_factor);
    const double a = good.log_pdf(x) - bad.log_pdf(x);
    if (a > best_score) {
      best_score = a;
      best = x;
    }
  }
  return {sur.space().decode(best), true, *mb};
}

inline std::vector<Proposal> sample_configs(const Surrogate& sur, std::size_t count, Rng& rng) {
  if (count == 0) throw std::invalid_argument("sample_configs: count must be >= 1");
  std::vector<Proposal> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(sample_config(sur, rng));
  return out;
}

// ---------------------------------------------------------------------------
// Ledger

inline constexpr const char* kLedgerSchema = "abas-ledger";
inline constexpr int kLedgerSchemaVersion = 1;

inline nlohmann::json to_json(const BranchConfig& c) {
  return {{"lambda", c.lambda}, {"dropout", c.dropout_p}, {"n_fc_layers", c.n_fc_layers}, {"fc_h", c.fc_h},
          {"fc_b", c.fc_b}};
}

inline BranchConfig branch_from_json(const nlohmann::json& j) {
  BranchConfig c;
  c.lambda = j.at("lambda").get<double>();
  c.dropout_p = j.at("dropout").get<double>();
  c.n_fc_layers = j.at("n_fc_layers").get<int>();
  c.fc_h = j.at("fc_h").get<int>();
  c.fc_b = j.at("fc_b").get<int>();
  return c;
}

inline nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

inline nlohmann::json to_json(const SnapshotMetrics& m) {
  nlohmann::json j = nlohmann::json::object();
  for (Metric k : kAllMetrics) {
    const std::optional<double> v = m.get(k);
    j[std::string(metric_name(k))] = v ? finite_or_null(*v) : nlohmann::json();
  }
  return j;
}

inline SnapshotMetrics snapshot_from_json(const nlohmann::json& j) {
  SnapshotMetrics m;
  for (Metric k : kAllMetrics) {
    const nlohmann::json& v = j.at(std::string(metric_name(k)));
    if (v.is_null()) {
      if (k == Metric::silhouette || k == Metric::calinski || k == Metric::pseudo_label_acc)
        m.set(k, std::nullopt);
      else
        m.set(k, std::numeric_limits<double>::quiet_NaN());
    } else {
      m.set(k, v.get<double>());
    }
  }
  return m;
}

/// Ledger view of a trial. Wall time and report-only fields are left out so
/// that ledgers of identical runs are byte-identical.
inline nlohmann::json to_json(const TrialRecord& r) {
  nlohmann::json snaps = nlohmann::json::array();
  for (const SnapshotMetrics& m : r.snapshots) snaps.push_back(to_json(m));
  return {{"trial_id", r.trial_id},
          {"config", to_json(r.config)},
          {"budget", r.budget},
          {"seed", r.seed},
          {"status", to_string(r.status)},
          {"divergence_reason", r.divergence_reason},
          {"ems_score", finite_or_null(r.ems_score)},
          {"final_loss", finite_or_null(r.final_loss)},
          {"snapshot_iterations", r.snapshot_iterations},
          {"snapshots", snaps}};
}

inline TrialRecord trial_from_json(const nlohmann::json& j) {
  TrialRecord r;
  r.trial_id = j.at("trial_id").get<int>();
  r.config = branch_from_json(j.at("config"));
  r.budget = j.at("budget").get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.status = j.at("status").get<std::string>() == "completed" ? TrialStatus::completed : TrialStatus::diverged;
  r.divergence_reason = j.at("divergence_reason").get<std::string>();
  const nlohmann::json& s = j.at("ems_score");
  r.ems_score = s.is_null() ? -std::numeric_limits<double>::infinity() : s.get<double>();
  const nlohmann::json& fl = j.at("final_loss");
  r.final_loss = fl.is_null() ? std::numeric_limits<double>::quiet_NaN() : fl.get<double>();
  r.snapshot_iterations = j.at("snapshot_iterations").get<std::vector<int>>();
  for (const nlohmann::json& m : j.at("snapshots")) r.snapshots.push_back(snapshot_from_json(m));
  return r;
}

/// Append-only event log. Each event is written as one JSON line as soon as
/// it is appended.
class Ledger {
 public:
  explicit Ledger(std::ostream* sink = nullptr) : sink_(sink) {
    append({{"event", "header"}, {"schema", kLedgerSchema}, {"version", kLedgerSchemaVersion}});
  }

  void append(nlohmann::json event) {
    event["seq"] = events_.size();
    if (sink_) {
      *sink_ << event.dump() << '\n';
      sink_->flush();
    }
    events_.push_back(std::move(event));
  }

  const std::vector<nlohmann::json>& events() const noexcept { return events_; }

 private:
  std::ostream* sink_;
  std::vector<nlohmann::json> events_;
};

inline nlohmann::json plan_to_json(const std::vector<Bracket>& plan) {
  nlohmann::json j = nlohmann::json::array();
  for (const Bracket& b : plan) {
    nlohmann::json rungs = nlohmann::json::array();
    for (const Rung& r : b.rungs)
      rungs.push_back({{"n_configs", r.n_configs}, {"budget", r.budget}, {"n_promote", r.n_promote}});
    j.push_back({{"s", b.s}, {"rungs", rungs}, {"iterations", bracket_cost(b)}});
  }
  return j;
}

/// Parses a JSONL ledger and checks its header.
inline std::vector<nlohmann::json> read_ledger(std::istream& is) {
  std::vector<nlohmann::json> ev;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) ev.push_back(nlohmann::json::parse(line));
  if (ev.empty() || ev.front().value("schema", "") != kLedgerSchema)
    throw std::runtime_error("ledger: missing '" + std::string(kLedgerSchema) + "' header");
  if (ev.front().value("version", 0) != kLedgerSchemaVersion) throw std::runtime_error("ledger: unsupported version");
  return ev;
}

// ---------------------------------------------------------------------------
// Search loop

using Trainer = std::function<TrialRecord(const BranchConfig&, int budget, std::uint64_t seed)>;

struct Estimator {
  std::function<double(const TrialRecord&)> score;
  // Index of the snapshot to deploy; last snapshot when empty.
  std::function<std::size_t(const TrialRecord&)> best_epoch;
};

struct SearchOptions {
  int min_budget = 2000;
  int max_budget = 6000;
  int eta = 3;
  int rounds = 24;      // successive-halving brackets, cycling through the plan
  int parallelism = 8;  // concurrent trials within a rung
  std::uint64_t seed = 0;
  SurrogateOptions surrogate;

  void validate() const {
    (void)hyperband_brackets(min_budget, max_budget, eta);
    if (rounds < 1) throw std::invalid_argument("search: rounds must be >= 1");
    if (parallelism < 1) throw std::invalid_argument("search: parallelism must be >= 1");
    surrogate.validate();
  }
};

struct SearchResult {
  TrialRecord best;
  std::size_t best_epoch = 0;
  std::vector<TrialRecord> trials;  // ordered by trial_id
  std::vector<Bracket> plan;
};

class SearchFailure : public std::runtime_error {
 public:
  SearchFailure(const std::string& what, std::vector<TrialRecord> trials)
      : std::runtime_error(what), trials_(std::move(trials)) {}
  const std::vector<TrialRecord>& trials() const noexcept { return trials_; }

 private:
  std::vector<TrialRecord> trials_;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Training seed of a configuration; promotions reuse it.
inline std::uint64_t config_seed(std::uint64_t search_seed, int config_id) {
  return splitmix64(search_seed ^ splitmix64(static_cast<std::uint64_t>(config_id)));
}

/// Index of the best completed full-budget trial; earliest wins ties.
inline std::optional<std::size_t> best_full_budget(const std::vector<TrialRecord>& trials, int max_budget) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < trials.size(); ++i) {
    const TrialRecord& t = trials[i];
    if (!t.completed() || t.budget != max_budget || !std::isfinite(t.ems_score)) continue;
    if (!best || t.ems_score > trials[*best].ems_score) best = i;
  }
  return best;
}

/// Top-n indices of `scores` (descending, earliest index wins ties), skipping
/// non-finite entries.
inline std::vector<std::size_t> top_indices(const std::vector<double>& scores, std::size_t n) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (std::isfinite(scores[i])) idx.push_back(i);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  if (idx.size() > n) idx.resize(n);
  return idx;
}

namespace detail {

struct Job {
  int config_id;
  BranchConfig config;
  int budget;
  std::uint64_t seed;
};

/// Runs jobs on up to `workers` threads; results land in the job's slot.
inline std::vector<TrialRecord> run_jobs(const std::vector<Job>& jobs, const Trainer& train, int workers) {
  std::vector<TrialRecord> out(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next.fetch_add(1); i < jobs.size(); i = next.fetch_add(1)) {
      try {
        out[i] = train(jobs[i].config, jobs[i].budget, jobs[i].seed);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int n = std::min<int>(workers, static_cast<int>(jobs.size()));
  if (n <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (!errors[i]) continue;
    TrialRecord r;
    r.status = TrialStatus::diverged;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const std::exception& e) {
      r.divergence_reason = std::string("trainer error: ") + e.what();
    } catch (...) {
      r.divergence_reason = "trainer error";
    }
    out[i] = std::move(r);
  }
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    out[i].config = jobs[i].config;
    out[i].budget = jobs[i].budget;
    out[i].seed = jobs[i].seed;
  }
  return out;
}

}  // namespace detail

inline SearchResult run_search(const SearchSpace& space, const SearchOptions& opt, const Trainer& train,
                               const Estimator& est, Ledger* ledger = nullptr) {
  space.validate();
  opt.validate();
  if (!train || !est.score) throw std::invalid_argument("run_search: trainer and estimator must be callable");

  SearchResult res;
  res.plan = hyperband_brackets(opt.min_budget, opt.max_budget, opt.eta);
  Surrogate sur(space, opt.surrogate);
  Rng rng(opt.seed);
  auto log = [&](nlohmann::json e) {
    if (ledger) ledger->append(std::move(e));
  };

  log({{"event", "search_started"},
       {"seed", opt.seed},
       {"min_budget", opt.min_budget},
       {"max_budget", opt.max_budget},
       {"eta", opt.eta},
       {"rounds", opt.rounds},
       {"plan", plan_to_json(res.plan)}});

  int next_config = 0;
  for (int round = 0; round < opt.rounds; ++round) {
    const Bracket& bracket = res.plan[static_cast<std::size_t>(round) % res.plan.size()];
    const std::vector<Proposal> props = sample_configs(sur, static_cast<std::size_t>(bracket.rungs[0].n_configs), rng);

    std::vector<detail::Job> current;
    for (const Proposal& p : props) {
      const int id = next_config++;
      current.push_back({id, p.config, bracket.rungs[0].budget, config_seed(opt.seed, id)});
      log({{"event", "sampled"},
           {"round", round},
           {"bracket", bracket.s},
           {"config_id", id},
           {"config", to_json(p.config)},
           {"budget", bracket.rungs[0].budget},
           {"source", p.from_model ? "model" : "uniform"},
           {"model_budget", p.model_budget}});
    }

    for (std::size_t ri = 0; ri < bracket.rungs.size(); ++ri) {
      const Rung& rung = bracket.rungs[ri];
      std::vector<TrialRecord> recs = detail::run_jobs(current, train, opt.parallelism);
      std::vector<double> scores(recs.size());
      for (std::size_t i = 0; i < recs.size(); ++i) {
        TrialRecord& r = recs[i];
        r.trial_id = static_cast<int>(res.trials.size());
        r.ems_score = r.completed() ? est.score(r) : -std::numeric_limits<double>::infinity();
        if (!std::isfinite(r.ems_score)) r.ems_score = -std::numeric_limits<double>::infinity();
        scores[i] = r.ranking_score();
        sur.update(r);
        nlohmann::json e = to_json(r);
        e["event"] = "finished";
        e["round"] = round;
        e["bracket"] = bracket.s;
        e["rung"] = ri;
        e["config_id"] = current[i].config_id;
        log(std::move(e));
        res.trials.push_back(r);
      }

      const std::vector<std::size_t> keep = top_indices(scores, static_cast<std::size_t>(rung.n_promote));
      nlohmann::json ranking = nlohmann::json::array();
      std::vector<std::size_t> order = top_indices(scores, scores.size());
      for (std::size_t i = 0; i < recs.size(); ++i)
        if (std::find(order.begin(), order.end(), i) == order.end()) order.push_back(i);
      for (std::size_t i : order)
        ranking.push_back({{"trial_id", recs[i].trial_id},
                           {"config_id", current[i].config_id},
                           {"ems_score", finite_or_null(scores[i])}});
      log({{"event", "rung_completed"},
           {"round", round},
           {"bracket", bracket.s},
           {"rung", ri},
           {"budget", rung.budget},
           {"n_promote", rung.n_promote},
           {"ranking", ranking}});

      if (ri + 1 == bracket.rungs.size()) break;
      std::vector<detail::Job> next;
      for (std::size_t i : keep) {
        detail::Job j = current[i];
        j.budget = bracket.rungs[ri + 1].budget;
        log({{"event", "promoted"},
             {"round", round},
             {"bracket", bracket.s},
             {"config_id", j.config_id},
             {"from_trial", recs[i].trial_id},
             {"from_budget", rung.budget},
             {"to_budget", j.budget}});
        next.push_back(j);
      }
      if (next.empty()) break;
      current = std::move(next);
    }
  }

  const std::optional<std::size_t> best = best_full_budget(res.trials, opt.max_budget);
  if (!best) {
    log({{"event", "search_failed"}, {"reason", "no completed full-budget trial"}});
    throw SearchFailure("search: every full-budget trial diverged", res.trials);
  }
  res.best = res.trials[*best];
  res.best_epoch = est.best_epoch ? est.best_epoch(res.best) : res.best.snapshots.size() - 1;
  log({{"event", "search_finished"},
       {"best_trial", res.best.trial_id},
       {"best_epoch", res.best_epoch},
       {"best_iteration", res.best.snapshot_iterations.at(res.best_epoch)},
       {"ems_score", res.best.ems_score},
       {"config", to_json(res.best.config)}});
  return res;
}

struct ReplayResult {
  int best_trial = -1;
  std::size_t best_epoch = 0;
  double score = 0.0;
};

/// Rescores every finished trial of a ledger with `est` and repeats the
/// final selection.
inline ReplayResult replay_selection(const std::vector<nlohmann::json>& events, const Estimator& est) {
  int max_budget = 0;
  std::vector<TrialRecord> trials;
  for (const nlohmann::json& e : events) {
    const std::string kind = e.value("event", "");
    if (kind == "search_started") max_budget = e.at("max_budget").get<int>();
    if (kind != "finished") continue;
    TrialRecord r = trial_from_json(e);
    r.ems_score = r.completed() ? est.score(r) : -std::numeric_limits<double>::infinity();
    if (!std::isfinite(r.ems_score)) r.ems_score = -std::numeric_limits<double>::infinity();
    trials.push_back(std::move(r));
  }
  const std::optional<std::size_t> best = best_full_budget(trials, max_budget);
  if (!best) throw std::runtime_error("replay: no completed full-budget trial in ledger");
  ReplayResult out;
  out.best_trial = trials[*best].trial_id;
  out.score = trials[*best].ems_score;
  out.best_epoch = est.best_epoch ? est.best_epoch(trials[*best]) : trials[*best].snapshots.size() - 1;
  return out;
}

}  // namespace abas
