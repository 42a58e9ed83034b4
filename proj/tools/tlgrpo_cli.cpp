#include <csignal>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "tlgrpo/harness.hpp"

namespace fs = std::filesystem;
using namespace tlgrpo;

namespace {

harness::RunConfig load(const std::string& path) {
  auto c = harness::load_config(path);
  harness::apply_env_overrides(c);
  c.validate();
  return c;
}

void print_breakdown(const score::ScoreBreakdown& b) {
  for (const auto& [name, p] : b.per_objective) std::cout << "  " << name << "  p = " << io::format_double(p) << '\n';
  std::cout << "performance P = " << io::format_double(b.performance) << '\n'
            << "format penalty F = " << io::format_double(b.format_penalty) << '\n'
            << "reward = " << io::format_double(b.final) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Turn-level GRPO for circuit sizing on surrogate simulators"};
  app.require_subcommand(1);
  std::string config_path;

  auto* synth = app.add_subcommand("synth", "Generate tasks and query files");
  synth->add_option("-c,--config", config_path, "Run config (JSON)")->required();

  auto* train = app.add_subcommand("train", "Train a policy");
  std::string algorithm;
  std::optional<int> iterations;
  train->add_option("-c,--config", config_path, "Run config (JSON)")->required();
  train->add_option("--algorithm", algorithm, "tl-grpo | traj-grpo | single-turn-grpo");
  train->add_option("--iterations", iterations, "Override the iteration count");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint or a baseline");
  std::string checkpoint, method, protocol, split;
  int max_queries = -1;
  eval->add_option("-c,--config", config_path, "Run config (JSON)")->required();
  eval->add_option("--checkpoint", checkpoint, "Policy checkpoint; omit for untrained weights");
  eval->add_option("--method", method, "policy | bo | random");
  eval->add_option("--protocol", protocol, "multi-turn | st-iter");
  eval->add_option("--split", split, "in-domain | ood");
  eval->add_option("--max-queries", max_queries, "Evaluate only the first N queries");

  auto* report = app.add_subcommand("report", "Turn analysis over evaluation logs");
  std::vector<std::string> logs;
  std::string csv_out;
  report->add_option("logs", logs, "Evaluation logs (JSONL)")->required()->check(CLI::ExistingFile);
  report->add_option("--csv", csv_out, "Write the CSV table here");

  auto* score_cmd = app.add_subcommand("score", "Score a metric file against a spec file");
  std::string spec_file, metric_file, mode = "eval";
  score_cmd->add_option("--spec", spec_file)->required()->check(CLI::ExistingFile);
  score_cmd->add_option("--metrics", metric_file)->required()->check(CLI::ExistingFile);
  score_cmd->add_option("--mode", mode, "eval | train")->check(CLI::IsMember({"eval", "train"}));

  auto* verify = app.add_subcommand("verify-log", "Recompute an eval report from its log");
  std::string verify_log, verify_report;
  verify->add_option("log", verify_log)->required()->check(CLI::ExistingFile);
  verify->add_option("report", verify_report)->required()->check(CLI::ExistingFile);

  auto* master = app.add_subcommand("serve-master", "Run the simulation master");
  std::string bind = "127.0.0.1:7070";
  simnet::SchedulerConfig sched;
  int heartbeat_ms = 5000, queue_timeout_ms = 30000;
  master->add_option("--bind", bind);
  master->add_option("--heartbeat-ms", heartbeat_ms);
  master->add_option("--missed-heartbeats", sched.missed_heartbeats);
  master->add_option("--retry-limit", sched.retry_limit);
  master->add_option("--queue-timeout-ms", queue_timeout_ms);

  auto* worker = app.add_subcommand("serve-worker", "Run a simulation worker");
  std::string master_addr = "127.0.0.1:7070", tasks_file;
  std::vector<std::string> task_ids;
  simnet::WorkerConfig wcfg;
  worker->add_option("--master", master_addr);
  worker->add_option("--tasks", tasks_file, "tasks.json written by synth")->required()->check(CLI::ExistingFile);
  worker->add_option("--task-ids", task_ids, "Serve only these task ids")->delimiter(',');
  worker->add_option("--id", wcfg.worker_id);
  worker->add_option("--heartbeat-ms", heartbeat_ms);
  worker->add_option("--capacity", wcfg.capacity);

  auto* status = app.add_subcommand("status", "Print the master's worker table");
  status->add_option("--master", master_addr);
  auto* shutdown = app.add_subcommand("shutdown", "Ask the master to shut down");
  shutdown->add_option("--master", master_addr);

  auto* config_cmd = app.add_subcommand("config", "Print the default run config");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      const auto c = load(config_path);
      const auto out = harness::cmd_synth(c);
      std::cout << "wrote " << out.tasks.size() << " tasks, " << out.train.size() << " train queries, "
                << out.eval_in_domain.size() << " in-domain and " << out.eval_ood.size() << " OOD eval queries to "
                << c.paths.data_dir << '\n';
    } else if (*train) {
      auto c = load(config_path);
      if (!algorithm.empty()) c.train.algorithm = rl::algorithm_from_string(algorithm);
      if (iterations) c.train.iterations = *iterations;
      const auto s = harness::cmd_train(c, &std::cerr);
      std::cout << "checkpoint " << s.checkpoint_path.string() << "\nlog " << s.log_path.string() << " (hash "
                << s.log_hash << ")\n";
    } else if (*eval) {
      auto c = load(config_path);
      if (!method.empty()) c.eval.method = method;
      if (!protocol.empty()) c.eval.protocol = protocol;
      if (!split.empty()) c.eval.split = split;
      if (max_queries >= 0) c.eval.max_queries = max_queries;
      c.validate();
      const auto out = harness::cmd_eval(c, checkpoint);
      for (const auto& w : out.warnings) std::cerr << "warning: " << w << '\n';
      for (const auto& t : out.report.per_task)
        std::cout << t.task_id << "  " << io::format_double(t.mean_best) << "  (" << t.queries << " queries)\n";
      std::cout << "mean best score " << io::format_double(out.report.overall_mean) << "\nreport "
                << out.report_path.string() << "\nlog " << out.log_path.string() << " (hash " << out.log_hash
                << ")\n";
    } else if (*report) {
      std::vector<fs::path> paths(logs.begin(), logs.end());
      const auto r = harness::cmd_report(paths);
      std::cout << r.text;
      if (!csv_out.empty()) io::write_text(csv_out, r.csv);
      else std::cout << '\n' << r.csv;
      if (r.skipped_lines) std::cerr << "warning: skipped " << r.skipped_lines << " corrupt line(s)\n";
    } else if (*score_cmd) {
      print_breakdown(harness::cmd_score(spec_file, metric_file,
                                         mode == "train" ? score::RewardMode::Train : score::RewardMode::Eval));
    } else if (*verify) {
      const auto v = harness::verify_log(verify_log, verify_report);
      for (const auto& f : v.failures) std::cerr << "FAIL: " << f << '\n';
      std::cout << (v.ok() ? "ok" : "mismatch") << ": " << v.queries << " queries checked\n";
      return v.ok() ? 0 : 1;
    } else if (*master) {
      sched.heartbeat_interval = simnet::Millis(heartbeat_ms);
      sched.queue_timeout = simnet::Millis(queue_timeout_ms);
      auto m = simnet::master_serve(simnet::parse_endpoint(bind), sched);
      std::cerr << "master listening on port " << m->port() << '\n';
      m->wait();
      m->stop();
    } else if (*worker) {
      auto tasks = io::read_tasks(tasks_file);
      if (!task_ids.empty()) {
        std::vector<env::TaskDefinition> keep;
        for (auto& t : tasks)
          if (std::find(task_ids.begin(), task_ids.end(), t.task_id) != task_ids.end()) keep.push_back(std::move(t));
        tasks.swap(keep);
      }
      wcfg.heartbeat_interval = simnet::Millis(heartbeat_ms);
      auto w = simnet::worker_serve(simnet::parse_endpoint(master_addr), std::move(tasks), wcfg);
      w->wait();
      w->stop();
    } else if (*status) {
      simnet::Client client(simnet::parse_endpoint(master_addr));
      std::cout << io::Json::parse(client.status()).dump(2) << '\n';
    } else if (*shutdown) {
      simnet::Client client(simnet::parse_endpoint(master_addr));
      client.shutdown_master();
    } else if (*config_cmd) {
      std::cout << harness::config_to_json(harness::RunConfig{});
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
