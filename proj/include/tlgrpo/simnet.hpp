#pragma once

// Master-worker simulation service.
//
// Workers register with a master over a persistent TCP connection and
// advertise the task ids they can simulate. Clients submit simulate jobs to
// the master, which queues them FIFO per task and dispatches each to an idle
// capable worker. Workers heartbeat with ping frames; a worker that misses
// `missed_heartbeats` intervals (or drops its connection) is marked dead and
// its in-flight job is requeued, up to `retry_limit` times per job.
//
// Frames are UTF-8 JSON objects, one per LF-terminated line:
//
//   register  worker -> master  {worker_id, tasks[], capacity}
//   ping/pong                   heartbeat and acknowledgement
//   simulate  client -> master -> worker  {task_id, variables{w1: ...}}
//   result    worker -> master -> client  {metrics{name: value}}
//   error     any direction     {reason}
//   status    client -> master  reply carries the worker table and queues
//   shutdown  client -> master, master -> worker
//
// Every frame carries a request_id; unknown fields are ignored.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "tlgrpo/surrogate_env.hpp"

namespace tlgrpo::simnet {

using Clock = std::chrono::steady_clock;
using Millis = std::chrono::milliseconds;

class NetworkError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SimulationFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Timeout : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
};

/// Parses "host:port" (host optional, defaults to 127.0.0.1).
Endpoint parse_endpoint(const std::string& text);

struct SchedulerConfig {
  Millis heartbeat_interval{5000};
  int missed_heartbeats = 3;
  int retry_limit = 2;
  /// A job whose task has no live capable worker fails after this long.
  Millis queue_timeout{30000};
};

enum class WorkerState { Idle, Busy, Dead };
enum class JobStatus { Queued, Running, Done, Failed };

std::string to_string(WorkerState s);
std::string to_string(JobStatus s);

struct WorkerRecord {
  std::string worker_id;
  std::vector<std::string> task_ids;
  Clock::time_point last_heartbeat;
  WorkerState state = WorkerState::Idle;
  int capacity = 1;
  std::vector<std::string> in_flight;
};

struct JobState {
  std::string request_id;
  std::string task_id;
  Clock::time_point submitted;
  int retries = 0;
  std::string assigned_worker;
  JobStatus status = JobStatus::Queued;
};

struct MasterStatus {
  std::vector<WorkerRecord> workers;
  std::map<std::string, std::size_t> queue_depths;
  std::size_t jobs_done = 0;
  std::size_t jobs_failed = 0;
  std::size_t requeues = 0;
  /// Dispatches that found the job already running elsewhere; must stay 0.
  std::size_t double_assignments = 0;
};

class Master {
 public:
  Master(Endpoint bind, SchedulerConfig config = {});
  ~Master();
  Master(const Master&) = delete;
  Master& operator=(const Master&) = delete;

  /// Binds and starts serving. Throws NetworkError if the address is unusable.
  void start();
  /// Fails queued jobs in submission order, tells workers to shut down, joins threads.
  void stop();

  std::uint16_t port() const { return port_; }
  MasterStatus status() const;
  /// Blocks until stop() is called or a shutdown frame arrives.
  void wait();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  Endpoint bind_;
  std::uint16_t port_ = 0;
};

std::unique_ptr<Master> master_serve(const Endpoint& bind, const SchedulerConfig& config = {});

struct WorkerConfig {
  std::string worker_id;
  Millis heartbeat_interval{5000};
  int capacity = 1;
  int max_connect_attempts = 6;
  Millis initial_backoff{50};
  /// Artificial delay per job; lets tests interrupt a worker mid-job.
  Millis job_delay{0};
};

class Worker {
 public:
  Worker(Endpoint master, std::vector<env::TaskDefinition> tasks, WorkerConfig config);
  ~Worker();
  Worker(const Worker&) = delete;
  Worker& operator=(const Worker&) = delete;

  void start();
  /// Graceful stop.
  void stop();
  /// Abrupt death: the connection drops and nothing is sent again.
  void kill();
  /// Hang: keep the connection open but stop heartbeats and job replies.
  void freeze();

  /// True once the worker gave up reconnecting or was stopped.
  bool exited() const;
  std::size_t jobs_completed() const;
  std::size_t registrations() const;
  const std::string& id() const;
  /// Blocks until the worker exits.
  void wait();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

std::unique_ptr<Worker> worker_serve(const Endpoint& master, std::vector<env::TaskDefinition> tasks,
                                     WorkerConfig config = {});

struct ClientConfig {
  Millis timeout{30000};
};

class Client {
 public:
  explicit Client(Endpoint master, ClientConfig config = {});
  ~Client();
  Client(const Client&) = delete;
  Client& operator=(const Client&) = delete;

  /// Blocks the calling thread until the job is done. Safe to call from many
  /// threads at once over the one connection.
  env::MetricVector submit(const std::string& task_id, std::span<const double> params);
  env::MetricVector submit_with_id(const std::string& request_id, const std::string& task_id,
                                   std::span<const double> params);
  /// Raw JSON text of the master's status reply.
  std::string status();
  void shutdown_master();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

env::MetricVector submit_simulation(Client& client, const std::string& task_id, std::span<const double> params);

/// Simulator backed by the master. Metrics are returned in the task's order.
class RemoteSimulator final : public env::Simulator {
 public:
  explicit RemoteSimulator(Client& client) : client_(client) {}
  env::MetricVector simulate(const env::TaskDefinition& task, std::span<const double> params) const override;

 private:
  Client& client_;
};

}  // namespace tlgrpo::simnet
