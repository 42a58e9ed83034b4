#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <functional>
#include <future>
#include <thread>

#include "doctest.h"
#include "tlgrpo/io.hpp"
#include "tlgrpo/simnet.hpp"

using namespace tlgrpo;
using namespace tlgrpo::simnet;
using namespace std::chrono_literals;

namespace {

bool wait_until(const std::function<bool()>& pred, Millis limit = Millis(10000)) {
  const auto deadline = Clock::now() + limit;
  while (Clock::now() < deadline) {
    if (pred()) return true;
    std::this_thread::sleep_for(5ms);
  }
  return pred();
}

std::size_t live_workers(const Master& m) {
  const auto s = m.status();
  return static_cast<std::size_t>(
      std::count_if(s.workers.begin(), s.workers.end(), [](const auto& w) { return w.state != WorkerState::Dead; }));
}

// Line-oriented raw TCP connection for speaking the wire protocol directly.
class RawSocket {
 public:
  explicit RawSocket(std::uint16_t port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
    REQUIRE(::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0);
  }
  ~RawSocket() { ::close(fd_); }

  void send(const std::string& line) {
    const std::string s = line + "\n";
    REQUIRE(::send(fd_, s.data(), s.size(), MSG_NOSIGNAL) == static_cast<ssize_t>(s.size()));
  }

  std::string read_line() {
    std::string out;
    char c;
    while (::recv(fd_, &c, 1, 0) == 1) {
      if (c == '\n') return out;
      out += c;
    }
    return out;
  }

 private:
  int fd_ = -1;
};

}  // namespace

TEST_CASE("endpoint parsing") {
  CHECK(parse_endpoint("10.0.0.2:8080").host == "10.0.0.2");
  CHECK(parse_endpoint("10.0.0.2:8080").port == 8080);
  CHECK(parse_endpoint(":7070").host == "127.0.0.1");
  CHECK_THROWS(parse_endpoint("host:notaport"));
}

TEST_CASE("remote results equal local simulation") {
  const std::vector<env::TaskDefinition> tasks{env::build_task(71, 4, 4, "net-a"), env::build_task(72, 5, 4, "net-b")};
  auto master = master_serve({"127.0.0.1", 0});
  WorkerConfig wc;
  wc.worker_id = "w0";
  auto worker = worker_serve({"127.0.0.1", master->port()}, tasks, wc);
  REQUIRE(wait_until([&] { return live_workers(*master) == 1; }));

  Client client({"127.0.0.1", master->port()});
  RemoteSimulator remote(client);
  for (const auto& t : tasks) {
    const auto local = env::simulate(t, t.feasible_point);
    CHECK(remote.simulate(t, t.feasible_point) == local);
  }
  const auto status = io::Json::parse(client.status());
  CHECK(status.contains("workers"));
  CHECK(master->status().jobs_done == 2);
  CHECK(master->status().double_assignments == 0);
  worker->stop();
  master->stop();
}

TEST_CASE("jobs wait in the queue until a capable worker registers") {
  const std::vector<env::TaskDefinition> tasks{env::build_task(73, 4, 4, "late")};
  auto master = master_serve({"127.0.0.1", 0});
  Client client({"127.0.0.1", master->port()});
  auto pending = std::async(std::launch::async,
                            [&] { return client.submit("late", tasks[0].feasible_point); });
  REQUIRE(wait_until([&] { return master->status().queue_depths["late"] == 1; }));
  CHECK(pending.wait_for(50ms) == std::future_status::timeout);

  auto worker = worker_serve({"127.0.0.1", master->port()}, tasks, WorkerConfig{});
  CHECK(pending.get() == env::simulate(tasks[0], tasks[0].feasible_point));
  worker->stop();
  master->stop();
}

TEST_CASE("a task nobody serves fails after the queue timeout") {
  SchedulerConfig sched;
  sched.queue_timeout = 100ms;
  sched.heartbeat_interval = 200ms;
  auto master = master_serve({"127.0.0.1", 0}, sched);
  Client client({"127.0.0.1", master->port()});
  try {
    client.submit("nobody", std::vector<double>{1.0, 2.0});
    FAIL("expected a failure");
  } catch (const SimulationFailed& e) {
    CHECK(std::string(e.what()).find("no capable worker for task 'nobody'") != std::string::npos);
  }
  master->stop();
}

TEST_CASE("duplicate request ids are rejected") {
  auto master = master_serve({"127.0.0.1", 0});
  RawSocket raw(master->port());
  const std::string frame = R"({"type":"simulate","request_id":"r-1","task_id":"none","variables":{"w1":1.0}})";
  raw.send(frame);
  raw.send(frame);
  const auto reply = io::Json::parse(raw.read_line());
  CHECK(reply["type"] == "error");
  CHECK(reply["request_id"] == "r-1");
  CHECK(reply["reason"] == "protocol violation: duplicate request_id r-1");

  raw.send(R"({"type":"bogus","request_id":"r-2"})");
  CHECK(io::Json::parse(raw.read_line())["reason"].get<std::string>().find("unknown frame type") !=
        std::string::npos);

  Client client({"127.0.0.1", master->port()});
  auto first = std::async(std::launch::async,
                          [&] { return client.submit_with_id("c-1", "none", std::vector<double>{1.0}); });
  REQUIRE(wait_until([&] { return master->status().queue_depths["none"] == 2; }));
  CHECK_THROWS_AS(client.submit_with_id("c-1", "none", std::vector<double>{1.0}), ProtocolError);
  master->stop();
  CHECK_THROWS(first.get());
}

TEST_CASE("a killed worker's job is requeued") {
  const std::vector<env::TaskDefinition> tasks{env::build_task(74, 4, 4, "k")};
  auto master = master_serve({"127.0.0.1", 0});
  WorkerConfig slow;
  slow.worker_id = "slow";
  slow.job_delay = 300ms;
  auto w0 = worker_serve({"127.0.0.1", master->port()}, tasks, slow);
  REQUIRE(wait_until([&] { return live_workers(*master) == 1; }));

  Client client({"127.0.0.1", master->port()});
  auto pending = std::async(std::launch::async, [&] { return client.submit("k", tasks[0].feasible_point); });
  REQUIRE(wait_until([&] {
    const auto s = master->status();
    return !s.workers.empty() && s.workers[0].state == WorkerState::Busy;
  }));
  w0->kill();
  WorkerConfig fast;
  fast.worker_id = "fast";
  auto w1 = worker_serve({"127.0.0.1", master->port()}, tasks, fast);
  CHECK(pending.get() == env::simulate(tasks[0], tasks[0].feasible_point));
  CHECK(master->status().requeues == 1);
  w1->stop();
  master->stop();
}
