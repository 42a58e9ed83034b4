#include "tlgrpo/simnet.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <deque>
#include <future>
#include <random>
#include <set>

#include "json.hpp"

namespace tlgrpo::simnet {

using Json = nlohmann::ordered_json;

namespace {

constexpr std::size_t kMaxFrameBytes = 16u << 20;

class Connection {
 public:
  explicit Connection(int fd) : fd_(fd) {}
  ~Connection() { ::close(fd_); }
  Connection(const Connection&) = delete;
  Connection& operator=(const Connection&) = delete;

  bool send(const Json& frame) {
    std::string line = frame.dump();
    line.push_back('\n');
    std::lock_guard lock(write_mu_);
    if (closed_) return false;
    std::size_t off = 0;
    while (off < line.size()) {
      const ssize_t n = ::send(fd_, line.data() + off, line.size() - off, MSG_NOSIGNAL);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) return false;
      off += static_cast<std::size_t>(n);
    }
    return true;
  }

  /// Reads one LF-terminated line. False on EOF or error.
  bool read_line(std::string& out) {
    for (;;) {
      const auto nl = buffer_.find('\n');
      if (nl != std::string::npos) {
        out.assign(buffer_, 0, nl);
        buffer_.erase(0, nl + 1);
        return true;
      }
      if (buffer_.size() > kMaxFrameBytes) return false;
      char chunk[4096];
      const ssize_t n = ::recv(fd_, chunk, sizeof chunk, 0);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) return false;
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

  void shutdown() {
    {
      std::lock_guard lock(write_mu_);
      closed_ = true;
    }
    ::shutdown(fd_, SHUT_RDWR);
  }

 private:
  int fd_;
  std::mutex write_mu_;
  bool closed_ = false;
  std::string buffer_;
};

using ConnectionPtr = std::shared_ptr<Connection>;

sockaddr_in resolve(const Endpoint& ep) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(ep.port);
  const std::string host = ep.host.empty() || ep.host == "localhost" ? "127.0.0.1" : ep.host;
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) == 1) return addr;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || !res)
    throw NetworkError("cannot resolve host '" + host + "'");
  addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  ::freeaddrinfo(res);
  return addr;
}

ConnectionPtr connect_to(const Endpoint& ep) {
  const sockaddr_in addr = resolve(ep);
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw NetworkError(std::string("socket: ") + std::strerror(errno));
  if (::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0) {
    const int err = errno;
    ::close(fd);
    throw NetworkError("connect to " + ep.host + ":" + std::to_string(ep.port) + ": " + std::strerror(err));
  }
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  return std::make_shared<Connection>(fd);
}

Json error_frame(const std::string& request_id, const std::string& reason) {
  return Json{{"type", "error"}, {"request_id", request_id}, {"reason", reason}};
}

std::string frame_type(const Json& f) {
  const auto it = f.find("type");
  return it != f.end() && it->is_string() ? it->get<std::string>() : std::string();
}

std::string frame_id(const Json& f) {
  const auto it = f.find("request_id");
  return it != f.end() && it->is_string() ? it->get<std::string>() : std::string();
}

Json variables_json(std::span<const double> params) {
  Json vars = Json::object();
  for (std::size_t i = 0; i < params.size(); ++i) vars[env::parameter_name(i)] = params[i];
  return vars;
}

env::MetricVector metrics_from_json(const Json& metrics) {
  if (!metrics.is_object()) throw ProtocolError("result frame without metrics object");
  env::MetricVector out;
  for (auto it = metrics.begin(); it != metrics.end(); ++it) {
    if (!it.value().is_number()) throw ProtocolError("non-numeric metric '" + it.key() + "'");
    out.set(it.key(), it.value().get<double>());
  }
  return out;
}

}  // namespace

Endpoint parse_endpoint(const std::string& text) {
  Endpoint ep;
  const auto colon = text.rfind(':');
  std::string port_text = text;
  if (colon != std::string::npos) {
    if (colon > 0) ep.host = text.substr(0, colon);
    port_text = text.substr(colon + 1);
  }
  try {
    const int port = std::stoi(port_text);
    if (port < 0 || port > 65535) throw std::out_of_range("port");
    ep.port = static_cast<std::uint16_t>(port);
  } catch (const std::exception&) {
    throw std::invalid_argument("bad endpoint '" + text + "', expected host:port");
  }
  return ep;
}

std::string to_string(WorkerState s) {
  switch (s) {
    case WorkerState::Idle: return "idle";
    case WorkerState::Busy: return "busy";
    case WorkerState::Dead: return "dead";
  }
  return "?";
}

std::string to_string(JobStatus s) {
  switch (s) {
    case JobStatus::Queued: return "queued";
    case JobStatus::Running: return "running";
    case JobStatus::Done: return "done";
    case JobStatus::Failed: return "failed";
  }
  return "?";
}

// ---------------------------------------------------------------- master

struct Master::Impl {
  struct WorkerEntry {
    WorkerRecord record;
    ConnectionPtr conn;
  };
  struct Job {
    JobState state;
    Json variables;
    std::weak_ptr<Connection> client;
    std::uint64_t seq = 0;
  };
  using Outbox = std::vector<std::pair<ConnectionPtr, Json>>;

  SchedulerConfig cfg;
  int listen_fd = -1;
  std::atomic<bool> stopping{false};
  std::thread accept_thread;
  std::thread monitor_thread;

  std::mutex threads_mu;
  std::vector<std::thread> connection_threads;
  std::vector<std::weak_ptr<Connection>> connections;

  mutable std::mutex mu;
  std::condition_variable cv;  // monitor wakeups and wait()
  bool shutdown_requested = false;
  std::map<std::string, WorkerEntry> workers;
  std::map<std::string, Job> jobs;
  std::map<std::string, std::deque<std::string>> queues;
  std::set<std::string> seen_ids;
  std::uint64_t next_seq = 0;
  std::uint64_t next_worker = 0;
  std::size_t jobs_done = 0;
  std::size_t jobs_failed = 0;
  std::size_t requeues = 0;
  std::size_t double_assignments = 0;

  static void flush(Outbox& out) {
    for (auto& [conn, frame] : out)
      if (conn) conn->send(frame);
    out.clear();
  }

  bool alive_worker_for(const std::string& task_id) const {
    for (const auto& [id, w] : workers) {
      if (w.record.state == WorkerState::Dead) continue;
      if (std::find(w.record.task_ids.begin(), w.record.task_ids.end(), task_id) != w.record.task_ids.end())
        return true;
    }
    return false;
  }

  void finish_job(Job& job, JobStatus status, Json reply, Outbox& out) {
    job.state.status = status;
    if (status == JobStatus::Done) ++jobs_done;
    if (status == JobStatus::Failed) ++jobs_failed;
    if (auto c = job.client.lock()) out.emplace_back(c, std::move(reply));
  }

  // Assigns queued jobs to idle capable workers until nothing more fits.
  void dispatch(Outbox& out) {
    bool progress = true;
    while (progress) {
      progress = false;
      for (auto& [wid, w] : workers) {
        auto& rec = w.record;
        if (rec.state == WorkerState::Dead) continue;
        if (static_cast<int>(rec.in_flight.size()) >= rec.capacity) continue;
        // Oldest queued job among the tasks this worker advertises.
        std::deque<std::string>* best_queue = nullptr;
        std::uint64_t best_seq = 0;
        for (const auto& task_id : rec.task_ids) {
          auto q = queues.find(task_id);
          if (q == queues.end() || q->second.empty()) continue;
          const auto seq = jobs.at(q->second.front()).seq;
          if (!best_queue || seq < best_seq) {
            best_queue = &q->second;
            best_seq = seq;
          }
        }
        if (!best_queue) continue;
        const std::string rid = best_queue->front();
        best_queue->pop_front();
        Job& job = jobs.at(rid);
        if (job.state.status == JobStatus::Running) {
          ++double_assignments;
          continue;
        }
        job.state.status = JobStatus::Running;
        job.state.assigned_worker = wid;
        rec.in_flight.push_back(rid);
        rec.state = WorkerState::Busy;
        out.emplace_back(w.conn, Json{{"type", "simulate"},
                                      {"request_id", rid},
                                      {"task_id", job.state.task_id},
                                      {"variables", job.variables}});
        progress = true;
      }
    }
  }

  void mark_dead(const std::string& worker_id, const std::string& reason, Outbox& out) {
    auto it = workers.find(worker_id);
    if (it == workers.end() || it->second.record.state == WorkerState::Dead) return;
    auto& rec = it->second.record;
    rec.state = WorkerState::Dead;
    for (const auto& rid : rec.in_flight) {
      Job& job = jobs.at(rid);
      if (job.state.status != JobStatus::Running || job.state.assigned_worker != worker_id) continue;
      job.state.assigned_worker.clear();
      if (job.state.retries < cfg.retry_limit) {
        ++job.state.retries;
        ++requeues;
        job.state.status = JobStatus::Queued;
        queues[job.state.task_id].push_front(rid);
      } else {
        finish_job(job, JobStatus::Failed,
                   error_frame(rid, "simulation failed: retries exhausted (worker " + worker_id + " " + reason + ")"),
                   out);
      }
    }
    rec.in_flight.clear();
    if (it->second.conn) it->second.conn->shutdown();
    dispatch(out);
  }

  Json status_json(const std::string& request_id) const {
    Json workers_json = Json::array();
    const auto now = Clock::now();
    for (const auto& [id, w] : workers) {
      workers_json.push_back(
          {{"worker_id", id},
           {"tasks", w.record.task_ids},
           {"state", to_string(w.record.state)},
           {"capacity", w.record.capacity},
           {"in_flight", w.record.in_flight},
           {"ms_since_heartbeat",
            std::chrono::duration_cast<Millis>(now - w.record.last_heartbeat).count()}});
    }
    Json depths = Json::object();
    for (const auto& [task, q] : queues) depths[task] = q.size();
    return Json{{"type", "status"},      {"request_id", request_id}, {"workers", workers_json},
                {"queues", depths},      {"jobs_done", jobs_done},   {"jobs_failed", jobs_failed},
                {"requeues", requeues}};
  }

  void handle_frame(const Json& f, const ConnectionPtr& conn, std::string& worker_id, Outbox& out) {
    const std::string type = frame_type(f);
    const std::string rid = frame_id(f);
    std::lock_guard lock(mu);
    if (type == "register") {
      std::string id = f.value("worker_id", std::string());
      if (id.empty()) id = "worker-" + std::to_string(++next_worker);
      auto existing = workers.find(id);
      if (existing != workers.end() && existing->second.conn != conn)
        mark_dead(id, "re-registered", out);
      WorkerEntry entry;
      entry.record.worker_id = id;
      if (f.contains("tasks") && f["tasks"].is_array())
        for (const auto& t : f["tasks"])
          if (t.is_string()) entry.record.task_ids.push_back(t.get<std::string>());
      entry.record.capacity = std::max(1, f.value("capacity", 1));
      entry.record.last_heartbeat = Clock::now();
      entry.conn = conn;
      workers[id] = std::move(entry);
      worker_id = id;
      out.emplace_back(conn, Json{{"type", "pong"}, {"request_id", rid}, {"worker_id", id}});
      dispatch(out);
    } else if (type == "ping") {
      if (!worker_id.empty()) {
        auto it = workers.find(worker_id);
        if (it != workers.end() && it->second.record.state != WorkerState::Dead)
          it->second.record.last_heartbeat = Clock::now();
      }
      out.emplace_back(conn, Json{{"type", "pong"}, {"request_id", rid}});
    } else if (type == "simulate") {
      if (rid.empty() || !f.contains("task_id") || !f["task_id"].is_string() || !f.contains("variables") ||
          !f["variables"].is_object()) {
        out.emplace_back(conn, error_frame(rid, "protocol violation: malformed simulate frame"));
        return;
      }
      if (!seen_ids.insert(rid).second) {
        out.emplace_back(conn, error_frame(rid, "protocol violation: duplicate request_id " + rid));
        return;
      }
      Job job;
      job.state.request_id = rid;
      job.state.task_id = f["task_id"].get<std::string>();
      job.state.submitted = Clock::now();
      job.variables = f["variables"];
      job.client = conn;
      job.seq = next_seq++;
      queues[job.state.task_id].push_back(rid);
      jobs.emplace(rid, std::move(job));
      dispatch(out);
      cv.notify_all();
    } else if (type == "result" || type == "error") {
      auto jit = jobs.find(rid);
      auto wit = workers.find(worker_id);
      if (jit == jobs.end() || wit == workers.end()) return;
      Job& job = jit->second;
      auto& rec = wit->second.record;
      // Late replies from a worker that lost the job are dropped.
      if (rec.state == WorkerState::Dead || job.state.status != JobStatus::Running ||
          job.state.assigned_worker != worker_id)
        return;
      rec.in_flight.erase(std::remove(rec.in_flight.begin(), rec.in_flight.end(), rid), rec.in_flight.end());
      if (rec.in_flight.empty()) rec.state = WorkerState::Idle;
      if (type == "result") {
        finish_job(job, JobStatus::Done,
                   Json{{"type", "result"}, {"request_id", rid}, {"metrics", f.value("metrics", Json::object())}},
                   out);
      } else {
        finish_job(job, JobStatus::Failed, error_frame(rid, f.value("reason", std::string("worker error"))), out);
      }
      dispatch(out);
    } else if (type == "status") {
      out.emplace_back(conn, status_json(rid));
    } else if (type == "shutdown") {
      shutdown_requested = true;
      cv.notify_all();
    } else if (type == "pong") {
      // Nothing to do.
    } else {
      out.emplace_back(conn, error_frame(rid, "protocol violation: unknown frame type '" + type + "'"));
    }
  }

  void serve_connection(ConnectionPtr conn) {
    std::string worker_id;
    std::string line;
    Outbox out;
    while (conn->read_line(line)) {
      if (line.empty()) continue;
      Json frame;
      try {
        frame = Json::parse(line);
      } catch (const Json::parse_error&) {
        conn->send(error_frame("", "protocol violation: malformed frame"));
        continue;
      }
      if (!frame.is_object()) {
        conn->send(error_frame("", "protocol violation: frame is not an object"));
        continue;
      }
      handle_frame(frame, conn, worker_id, out);
      flush(out);
    }
    if (!worker_id.empty()) {
      std::lock_guard lock(mu);
      auto it = workers.find(worker_id);
      if (it != workers.end() && it->second.conn == conn) mark_dead(worker_id, "disconnected", out);
    }
    flush(out);
  }

  void accept_loop() {
    while (!stopping) {
      pollfd pfd{listen_fd, POLLIN, 0};
      const int r = ::poll(&pfd, 1, 50);
      if (r <= 0 || stopping) continue;
      const int fd = ::accept(listen_fd, nullptr, nullptr);
      if (fd < 0) continue;
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      auto conn = std::make_shared<Connection>(fd);
      std::lock_guard lock(threads_mu);
      connections.push_back(conn);
      connection_threads.emplace_back([this, conn] { serve_connection(conn); });
    }
  }

  void monitor_loop() {
    const auto tick = std::clamp(cfg.heartbeat_interval / 5, Millis(5), Millis(250));
    std::unique_lock lock(mu);
    while (!stopping) {
      cv.wait_for(lock, tick);
      if (stopping) break;
      Outbox out;
      const auto now = Clock::now();
      const auto deadline = cfg.heartbeat_interval * cfg.missed_heartbeats;
      std::vector<std::string> late;
      for (const auto& [id, w] : workers)
        if (w.record.state != WorkerState::Dead && now - w.record.last_heartbeat > deadline) late.push_back(id);
      for (const auto& id : late) mark_dead(id, "missed heartbeats", out);

      for (auto& [task_id, q] : queues) {
        if (q.empty() || alive_worker_for(task_id)) continue;
        std::deque<std::string> keep;
        for (const auto& rid : q) {
          Job& job = jobs.at(rid);
          if (now - job.state.submitted > cfg.queue_timeout)
            finish_job(job, JobStatus::Failed, error_frame(rid, "no capable worker for task '" + task_id + "'"), out);
          else
            keep.push_back(rid);
        }
        q.swap(keep);
      }
      lock.unlock();
      flush(out);
      lock.lock();
    }
  }
};

Master::Master(Endpoint bind, SchedulerConfig config) : impl_(std::make_unique<Impl>()), bind_(std::move(bind)) {
  impl_->cfg = config;
}

Master::~Master() { stop(); }

void Master::start() {
  const sockaddr_in addr = resolve(bind_);
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw NetworkError(std::string("socket: ") + std::strerror(errno));
  int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  if (::bind(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd, 128) != 0) {
    const int err = errno;
    ::close(fd);
    throw NetworkError("cannot bind " + bind_.host + ":" + std::to_string(bind_.port) + ": " + std::strerror(err));
  }
  sockaddr_in bound{};
  socklen_t len = sizeof bound;
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&bound), &len);
  port_ = ntohs(bound.sin_port);
  impl_->listen_fd = fd;
  impl_->accept_thread = std::thread([this] { impl_->accept_loop(); });
  impl_->monitor_thread = std::thread([this] { impl_->monitor_loop(); });
}

void Master::stop() {
  if (!impl_ || impl_->listen_fd < 0) return;
  Impl& m = *impl_;
  Impl::Outbox out;
  {
    std::lock_guard lock(m.mu);
    if (m.stopping.exchange(true)) return;
    m.shutdown_requested = true;
    // Unfinished jobs fail in submission order.
    std::vector<Impl::Job*> pending;
    for (auto& [rid, job] : m.jobs)
      if (job.state.status == JobStatus::Queued || job.state.status == JobStatus::Running) pending.push_back(&job);
    std::sort(pending.begin(), pending.end(), [](auto* a, auto* b) { return a->seq < b->seq; });
    for (auto* job : pending)
      m.finish_job(*job, JobStatus::Failed, error_frame(job->state.request_id, "master shutting down"), out);
    for (auto& q : m.queues) q.second.clear();
    for (auto& [id, w] : m.workers)
      if (w.record.state != WorkerState::Dead) out.emplace_back(w.conn, Json{{"type", "shutdown"}, {"request_id", ""}});
    m.cv.notify_all();
  }
  Impl::flush(out);
  if (m.accept_thread.joinable()) m.accept_thread.join();
  if (m.monitor_thread.joinable()) m.monitor_thread.join();
  std::vector<std::thread> threads;
  {
    std::lock_guard lock(m.threads_mu);
    for (auto& weak : m.connections)
      if (auto c = weak.lock()) c->shutdown();
    threads.swap(m.connection_threads);
  }
  for (auto& t : threads) t.join();
  ::close(m.listen_fd);
  m.listen_fd = -1;
}

MasterStatus Master::status() const {
  std::lock_guard lock(impl_->mu);
  MasterStatus s;
  for (const auto& [id, w] : impl_->workers) s.workers.push_back(w.record);
  for (const auto& [task, q] : impl_->queues) s.queue_depths[task] = q.size();
  s.jobs_done = impl_->jobs_done;
  s.jobs_failed = impl_->jobs_failed;
  s.requeues = impl_->requeues;
  s.double_assignments = impl_->double_assignments;
  return s;
}

void Master::wait() {
  std::unique_lock lock(impl_->mu);
  impl_->cv.wait(lock, [this] { return impl_->shutdown_requested; });
}

std::unique_ptr<Master> master_serve(const Endpoint& bind, const SchedulerConfig& config) {
  auto m = std::make_unique<Master>(bind, config);
  m->start();
  return m;
}

// ---------------------------------------------------------------- worker

struct Worker::Impl {
  Endpoint master;
  std::map<std::string, env::TaskDefinition> tasks;
  WorkerConfig cfg;

  std::atomic<bool> stopping{false};
  std::atomic<bool> killed{false};
  std::atomic<bool> frozen{false};
  std::atomic<bool> exited{false};
  std::atomic<std::size_t> completed{0};
  std::atomic<std::size_t> registrations{0};

  std::mutex mu;
  std::condition_variable cv;
  ConnectionPtr conn;
  std::thread main_thread;

  Json handle_job(const Json& f) {
    const std::string rid = frame_id(f);
    try {
      const auto it = tasks.find(f.value("task_id", std::string()));
      if (it == tasks.end()) return error_frame(rid, "unknown task '" + f.value("task_id", std::string()) + "'");
      const auto& task = it->second;
      const Json& vars = f.at("variables");
      std::vector<double> params(task.dim());
      for (std::size_t i = 0; i < task.dim(); ++i) {
        const auto name = env::parameter_name(i);
        if (!vars.contains(name) || !vars[name].is_number()) return error_frame(rid, "missing variable " + name);
        params[i] = vars[name].get<double>();
      }
      const auto metrics = env::simulate(task, params);
      Json m = Json::object();
      for (const auto& e : metrics.entries()) m[e.name] = e.value;
      return Json{{"type", "result"}, {"request_id", rid}, {"metrics", m}};
    } catch (const std::exception& e) {
      return error_frame(rid, e.what());
    }
  }

  void heartbeat_loop(ConnectionPtr c, const std::atomic<bool>* done) {
    std::unique_lock lock(mu);
    std::uint64_t n = 0;
    while (!*done && !stopping && !killed) {
      cv.wait_for(lock, cfg.heartbeat_interval);
      if (*done || stopping || killed) break;
      if (frozen) continue;
      lock.unlock();
      c->send(Json{{"type", "ping"}, {"request_id", cfg.worker_id + "-hb-" + std::to_string(++n)},
                   {"worker_id", cfg.worker_id}});
      lock.lock();
    }
  }

  void serve(ConnectionPtr c) {
    std::atomic<bool> done{false};
    c->send(Json{{"type", "register"},
                 {"request_id", cfg.worker_id + "-reg-" + std::to_string(registrations + 1)},
                 {"worker_id", cfg.worker_id},
                 {"tasks", [&] {
                    Json ids = Json::array();
                    for (const auto& [id, t] : tasks) ids.push_back(id);
                    return ids;
                  }()},
                 {"capacity", cfg.capacity}});
    ++registrations;
    std::thread heartbeat([this, c, &done] { heartbeat_loop(c, &done); });
    std::vector<std::thread> jobs;
    std::string line;
    while (c->read_line(line)) {
      Json f;
      try {
        f = Json::parse(line);
      } catch (const Json::parse_error&) {
        continue;
      }
      const std::string type = frame_type(f);
      if (type == "shutdown") {
        stopping = true;
        break;
      }
      if (type != "simulate" || frozen) continue;
      jobs.emplace_back([this, c, f] {
        if (cfg.job_delay.count() > 0) std::this_thread::sleep_for(cfg.job_delay);
        if (frozen || killed) return;
        Json reply = handle_job(f);
        if (c->send(reply)) ++completed;
      });
    }
    done = true;
    cv.notify_all();
    heartbeat.join();
    for (auto& j : jobs) j.join();
  }

  void run() {
    int attempt = 0;
    Millis backoff = cfg.initial_backoff;
    while (!stopping && !killed) {
      ConnectionPtr c;
      try {
        c = connect_to(master);
      } catch (const NetworkError&) {
        if (++attempt >= cfg.max_connect_attempts) break;
        std::unique_lock lock(mu);
        cv.wait_for(lock, backoff, [this] { return stopping || killed; });
        backoff *= 2;
        continue;
      }
      attempt = 0;
      backoff = cfg.initial_backoff;
      {
        std::lock_guard lock(mu);
        conn = c;
      }
      if (stopping || killed) c->shutdown();
      serve(c);
      {
        std::lock_guard lock(mu);
        conn.reset();
      }
      if (frozen) break;  // a hung process does not come back
    }
    {
      std::lock_guard lock(mu);
      exited = true;
    }
    cv.notify_all();
  }

  void drop_connection() {
    std::lock_guard lock(mu);
    if (conn) conn->shutdown();
    cv.notify_all();
  }
};

Worker::Worker(Endpoint master, std::vector<env::TaskDefinition> tasks, WorkerConfig config)
    : impl_(std::make_unique<Impl>()) {
  impl_->master = std::move(master);
  for (auto& t : tasks) impl_->tasks.emplace(t.task_id, std::move(t));
  if (config.worker_id.empty()) {
    std::random_device rd;
    config.worker_id = "worker-" + std::to_string(rd() % 1000000);
  }
  if (config.capacity < 1) throw std::invalid_argument("worker capacity must be >= 1");
  impl_->cfg = std::move(config);
}

Worker::~Worker() { stop(); }

void Worker::start() {
  impl_->main_thread = std::thread([this] { impl_->run(); });
}

void Worker::stop() {
  if (!impl_) return;
  impl_->stopping = true;
  impl_->drop_connection();
  if (impl_->main_thread.joinable()) impl_->main_thread.join();
}

void Worker::kill() {
  impl_->killed = true;
  impl_->drop_connection();
}

void Worker::freeze() { impl_->frozen = true; }

bool Worker::exited() const { return impl_->exited; }
std::size_t Worker::jobs_completed() const { return impl_->completed; }
std::size_t Worker::registrations() const { return impl_->registrations; }
const std::string& Worker::id() const { return impl_->cfg.worker_id; }

void Worker::wait() {
  std::unique_lock lock(impl_->mu);
  impl_->cv.wait(lock, [this] { return impl_->exited.load(); });
}

std::unique_ptr<Worker> worker_serve(const Endpoint& master, std::vector<env::TaskDefinition> tasks,
                                     WorkerConfig config) {
  auto w = std::make_unique<Worker>(master, std::move(tasks), std::move(config));
  w->start();
  return w;
}

// ---------------------------------------------------------------- client

struct Client::Impl {
  ClientConfig cfg;
  ConnectionPtr conn;
  std::thread reader;
  std::mutex mu;
  std::map<std::string, std::promise<Json>> pending;
  std::set<std::string> used_ids;
  bool lost = false;
  std::string prefix;
  std::atomic<std::uint64_t> counter{0};

  void read_loop() {
    std::string line;
    while (conn->read_line(line)) {
      Json f;
      try {
        f = Json::parse(line);
      } catch (const Json::parse_error&) {
        continue;
      }
      const std::string rid = frame_id(f);
      std::lock_guard lock(mu);
      auto it = pending.find(rid);
      if (it == pending.end()) continue;
      it->second.set_value(std::move(f));
      pending.erase(it);
    }
    std::lock_guard lock(mu);
    lost = true;
    for (auto& [rid, p] : pending) p.set_value(error_frame(rid, "connection to master lost"));
    pending.clear();
  }

  Json request(const std::string& rid, Json frame) {
    std::future<Json> fut;
    {
      std::lock_guard lock(mu);
      if (lost) throw NetworkError("connection to master lost");
      if (!used_ids.insert(rid).second) throw ProtocolError("protocol violation: duplicate request_id " + rid);
      fut = pending[rid].get_future();
    }
    if (!conn->send(frame)) {
      std::lock_guard lock(mu);
      pending.erase(rid);
      throw NetworkError("cannot send to master");
    }
    if (fut.wait_for(cfg.timeout) != std::future_status::ready) {
      std::lock_guard lock(mu);
      pending.erase(rid);
      throw Timeout("request " + rid + " timed out");
    }
    return fut.get();
  }
};

Client::Client(Endpoint master, ClientConfig config) : impl_(std::make_unique<Impl>()) {
  impl_->cfg = config;
  impl_->conn = connect_to(master);
  std::random_device rd;
  impl_->prefix = "c" + std::to_string(rd()) + "-";
  impl_->reader = std::thread([this] { impl_->read_loop(); });
}

Client::~Client() {
  impl_->conn->shutdown();
  if (impl_->reader.joinable()) impl_->reader.join();
}

env::MetricVector Client::submit(const std::string& task_id, std::span<const double> params) {
  return submit_with_id(impl_->prefix + std::to_string(++impl_->counter), task_id, params);
}

env::MetricVector Client::submit_with_id(const std::string& request_id, const std::string& task_id,
                                         std::span<const double> params) {
  Json frame{{"type", "simulate"}, {"request_id", request_id}, {"task_id", task_id},
             {"variables", variables_json(params)}};
  const Json reply = impl_->request(request_id, std::move(frame));
  const std::string type = frame_type(reply);
  if (type == "result") return metrics_from_json(reply.value("metrics", Json::object()));
  const std::string reason = reply.value("reason", std::string("unknown error"));
  if (reason.rfind("protocol violation", 0) == 0) throw ProtocolError(reason);
  if (reason == "connection to master lost") throw NetworkError(reason);
  throw SimulationFailed(reason);
}

std::string Client::status() {
  const std::string rid = impl_->prefix + "status-" + std::to_string(++impl_->counter);
  return impl_->request(rid, Json{{"type", "status"}, {"request_id", rid}}).dump();
}

void Client::shutdown_master() {
  impl_->conn->send(Json{{"type", "shutdown"}, {"request_id", impl_->prefix + "shutdown"}});
}

env::MetricVector submit_simulation(Client& client, const std::string& task_id, std::span<const double> params) {
  return client.submit(task_id, params);
}

env::MetricVector RemoteSimulator::simulate(const env::TaskDefinition& task, std::span<const double> params) const {
  const auto raw = client_.submit(task.task_id, params);
  std::vector<score::Metric> ordered;
  for (const auto& m : task.metrics) {
    const double* v = raw.find(m.name);
    if (!v) throw SimulationFailed("remote result is missing metric '" + m.name + "'");
    ordered.push_back({m.name, *v});
  }
  return env::MetricVector(std::move(ordered));
}

}  // namespace tlgrpo::simnet
