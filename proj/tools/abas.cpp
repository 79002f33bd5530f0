// abas: command-line front end.
//
// Exit status: 0 success, 1 validation failure, 2 runtime failure.

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "abas/commands.hpp"

namespace {

enum Exit { kOk = 0, kValidation = 1, kRuntime = 2 };

std::vector<abas::Metric> parse_features(const std::string& list) {
  if (list.empty()) return abas::default_ems_features();
  std::vector<abas::Metric> out;
  std::stringstream ss(list);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(abas::parse_metric(tok));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Auxiliary-branch search for unsupervised domain adaptation"};
  app.require_subcommand(1);

  std::string config_path;

  auto* search = app.add_subcommand("search", "run the multi-fidelity search; writes ledger.jsonl and report.json");
  search->add_option("-c,--config", config_path, "run configuration (INI)")->required();

  std::string corpus, model_out, eval_csv, report_out, features;
  auto* fit = app.add_subcommand("ems-fit", "fit the cross-run and within-run EMS regressors");
  fit->add_option("--corpus", corpus, "metrics CSV with a target_acc column")->required();
  fit->add_option("-o,--out", model_out, "regressor JSON to write")->required();
  fit->add_option("--eval", eval_csv, "corpus of a different task for the correlation report");
  fit->add_option("--report", report_out, "correlation report CSV to write");
  fit->add_option("--features", features, "comma-separated metric names (default: the six EMS metrics)");

  std::string model_path, metrics_csv, rank_out;
  auto* rank = app.add_subcommand("ems-rank", "rank the trials of a metrics CSV by EMS score");
  rank->add_option("-m,--model", model_path, "regressor JSON")->required();
  rank->add_option("--metrics", metrics_csv, "metrics CSV")->required();
  rank->add_option("-o,--out", rank_out, "ranking CSV (default: stdout)");

  int n_configs = 40;
  std::string corpus_out, corpus_id = "corpus";
  auto* rc = app.add_subcommand("random-corpus", "train uniformly sampled configs and dump every snapshot");
  rc->add_option("-c,--config", config_path, "run configuration (INI)")->required();
  rc->add_option("-n,--n-configs", n_configs, "number of configurations")->check(CLI::PositiveNumber);
  rc->add_option("-o,--out", corpus_out, "metrics CSV to write")->required();
  rc->add_option("--corpus-id", corpus_id, "identifier stored in the CSV header");

  abas::BranchConfig branch;
  int budget = 0;
  std::uint64_t seed = 0;
  std::string one_metrics;
  auto* one = app.add_subcommand("train-one", "train a single configuration and print its snapshot table");
  one->add_option("-c,--config", config_path, "run configuration (INI)")->required();
  one->add_option("--lambda", branch.lambda, "adversarial weight");
  one->add_option("--dropout", branch.dropout_p, "dropout probability in the branch");
  one->add_option("--layers", branch.n_fc_layers, "hidden layers in the branch");
  one->add_option("--fc-h", branch.fc_h, "hidden width");
  one->add_option("--fc-b", branch.fc_b, "bottleneck width");
  one->add_option("--budget", budget, "iterations (default: bohb.max_budget)");
  one->add_option("--seed", seed, "training seed");
  one->add_option("--metrics-out", one_metrics, "also write the snapshots as metrics CSV");

  std::string ledger_path, dump_out;
  auto* dump = app.add_subcommand("metrics-dump", "convert the finished trials of a ledger to metrics CSV");
  dump->add_option("-l,--ledger", ledger_path, "ledger.jsonl")->required();
  dump->add_option("-o,--out", dump_out, "metrics CSV (default: stdout)");

  std::string prefix;
  auto* mp = app.add_subcommand("make-pair", "write the configured synthetic pair as CSV files");
  mp->add_option("-c,--config", config_path, "run configuration (INI)")->required();
  mp->add_option("-p,--prefix", prefix, "output path prefix")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc_parse = app.exit(e);
    return rc_parse == 0 ? kOk : kValidation;
  }

  try {
    if (search->parsed()) {
      const abas::SearchReport r = abas::cmd_search(abas::load_config(config_path));
      std::cout << "best trial " << r.result.best.trial_id << " " << abas::to_string(r.result.best.config)
                << " snapshot " << r.result.best_epoch << " ems_score " << r.result.best.ems_score << '\n';
      if (r.report_only_target_accuracy)
        std::cout << "target accuracy (report-only) " << *r.report_only_target_accuracy << '\n';
      std::cout << "ledger " << r.ledger_path.string() << "\nreport " << r.report_path.string() << '\n';
    } else if (fit->parsed()) {
      const abas::EmsModel m = abas::cmd_ems_fit(corpus, model_out, parse_features(features), eval_csv, report_out);
      std::cout << "cross_run r2 " << m.cross_run.r_squared << " within_run r2 " << m.within_run.r_squared << '\n';
      for (const auto& w : m.cross_run.warnings) std::cerr << "warning: " << w << '\n';
    } else if (rank->parsed()) {
      if (rank_out.empty()) {
        abas::cmd_ems_rank(model_path, metrics_csv, std::cout);
      } else {
        std::ofstream os = abas::open_output(rank_out);
        abas::cmd_ems_rank(model_path, metrics_csv, os);
      }
    } else if (rc->parsed()) {
      const abas::CorpusResult r = abas::cmd_random_corpus(abas::load_config(config_path), n_configs, corpus_out, corpus_id);
      std::size_t diverged = 0;
      for (const auto& t : r.trials) diverged += !t.completed();
      std::cout << r.trials.size() << " trials (" << diverged << " diverged), " << r.dataset.rows.size()
                << " snapshot rows -> " << corpus_out << '\n';
    } else if (one->parsed()) {
      abas::cmd_train_one(abas::load_config(config_path), branch, budget, seed, std::cout, one_metrics);
    } else if (dump->parsed()) {
      if (dump_out.empty()) {
        abas::cmd_metrics_dump(ledger_path, std::cout);
      } else {
        std::ofstream os = abas::open_output(dump_out);
        abas::cmd_metrics_dump(ledger_path, os);
      }
    } else if (mp->parsed()) {
      abas::cmd_make_pair(abas::load_config(config_path), prefix);
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidation;
  } catch (const abas::SearchFailure& e) {
    std::cerr << "error: " << e.what() << " (" << e.trials().size() << " trials in the ledger)\n";
    return kRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kOk;
}
