#include "fshpo/runtime.hpp"

#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <condition_variable>
#include <cstring>
#include <iostream>
#include <map>
#include <mutex>
#include <stdexcept>
#include <thread>

namespace fshpo {

namespace {
thread_local bool tl_in_executor = false;

struct ExecutorGuard {
  bool previous;
  ExecutorGuard() : previous(tl_in_executor) { tl_in_executor = true; }
  ~ExecutorGuard() { tl_in_executor = previous; }
};
}  // namespace

InProcessExecutor::InProcessExecutor(int n_parallel) : n_parallel_(n_parallel) {
  if (n_parallel < 1) throw std::invalid_argument("executor needs n_parallel >= 1");
}

JobSpec job_of(const Trial& t) { return {t.id, t.config, t.budget, t.seed, t.parent}; }

JobOutcome run_job(const Objective& objective, const JobSpec& job) {
  try {
    auto out = objective(job);
    out.trial_id = job.trial_id;
    return out;
  } catch (const std::logic_error&) {
    throw;
  } catch (const std::exception& e) {
    JobOutcome out;
    out.trial_id = job.trial_id;
    out.ok = false;
    out.error = e.what();
    return out;
  }
}

void InProcessExecutor::drive(BohbScheduler& sched, const Objective& objective,
                              const std::atomic<bool>* cancel) const {
  if (tl_in_executor) throw std::logic_error("in-process executor used from inside a running job");

  std::mutex mu;
  std::condition_variable cv;
  std::exception_ptr error;

  auto work = [&](int index) {
    ExecutorGuard guard;
    const auto name = "thread-" + std::to_string(index);
    std::unique_lock lock(mu);
    while (!error && !sched.finished() && !(cancel != nullptr && cancel->load())) {
      std::optional<Trial> t;
      try {
        t = sched.next_job(name);
      } catch (...) {
        error = std::current_exception();
        break;
      }
      if (!t) {
        if (sched.in_flight() == 0) {
          if (!sched.finished()) error = std::make_exception_ptr(std::logic_error("scheduler stalled"));
          break;
        }
        cv.wait_for(lock, std::chrono::milliseconds(50));
        continue;
      }
      lock.unlock();
      JobOutcome out;
      try {
        out = run_job(objective, job_of(*t));
      } catch (...) {
        lock.lock();
        error = std::current_exception();
        break;
      }
      lock.lock();
      try {
        sched.record_result(out);
      } catch (...) {
        error = std::current_exception();
      }
      cv.notify_all();
    }
    cv.notify_all();
  };

  if (n_parallel_ == 1) {
    work(0);
  } else {
    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(n_parallel_));
    for (int i = 0; i < n_parallel_; ++i) threads.emplace_back(work, i);
    for (auto& th : threads) th.join();
  }
  if (error) std::rethrow_exception(error);
}

RunResult result_of(const BohbScheduler& sched) {
  return {sched.trials(), sched.best(), sched.finished()};
}

RunResult run_bohb(BohbScheduler& sched, const Objective& objective, const InProcessExecutor& executor,
                   RunLedger* ledger, const nlohmann::json& header, const std::atomic<bool>* cancel) {
  if (ledger != nullptr) {
    if (ledger->size() != 0) throw std::invalid_argument("run_bohb needs an empty ledger");
    ledger->append(EventType::kHeader, header);
  }
  sched.set_ledger(ledger);
  executor.drive(sched, objective, cancel);
  return result_of(sched);
}

void replay(BohbScheduler& sched, RunLedger& ledger) {
  if (!sched.trials().empty()) throw std::invalid_argument("replay needs a fresh scheduler");
  const auto recorded = ledger.trials();
  std::map<std::int64_t, std::int64_t> sampled_seq;
  for (const auto& ev : ledger.events())
    if (ev.type == EventType::kTrialSampled) sampled_seq.emplace(ev.payload.at("trial_id").get<std::int64_t>(), ev.seq);
  for (std::size_t i = 0; i < recorded.size(); ++i)
    if (recorded[i].id != static_cast<std::int64_t>(i))
      throw LedgerCorruption(sampled_seq.count(recorded[i].id) ? sampled_seq[recorded[i].id] : -1,
                             "trial ids are not consecutive");

  sched.set_ledger(nullptr);
  std::vector<std::int64_t> pending;
  while (auto t = sched.next_job()) {
    const auto id = t->id;
    if (static_cast<std::size_t>(id) >= recorded.size()) {
      pending.push_back(id);
      continue;
    }
    const auto& rec = recorded[static_cast<std::size_t>(id)];
    if (rec.config_checksum != t->config.checksum() || rec.config != t->config.to_json() || rec.budget != t->budget)
      throw LedgerCorruption(sampled_seq[id], "trial " + std::to_string(id) +
                                                  " does not match the replayed schedule (checksum " +
                                                  std::to_string(rec.config_checksum) + " vs " +
                                                  std::to_string(t->config.checksum()) + ")");
    if (rec.finished || rec.failed) {
      JobOutcome out;
      out.trial_id = id;
      out.ok = rec.finished;
      out.val_accuracy = rec.val_accuracy;
      out.train_loss = rec.train_loss;
      out.diverged = rec.diverged;
      sched.record_result(out);
    } else {
      pending.push_back(id);
    }
  }
  for (const auto& t : sched.trials())
    if (static_cast<std::size_t>(t.id) >= recorded.size())
      ledger.append(EventType::kTrialSampled, trial_sampled_payload(t));
  for (auto it = pending.rbegin(); it != pending.rend(); ++it) sched.requeue(*it);
  sched.set_ledger(&ledger);
}

RunResult resume_run(BohbScheduler& sched, const Objective& objective, const InProcessExecutor& executor,
                     RunLedger& ledger, const std::atomic<bool>* cancel) {
  replay(sched, ledger);
  executor.drive(sched, objective, cancel);
  return result_of(sched);
}

// --- messages ------------------------------------------------------------

namespace msg {

nlohmann::json hello(const std::string& worker_id) { return {{"type", "hello"}, {"worker_id", worker_id}}; }
nlohmann::json welcome() { return {{"type", "welcome"}}; }
nlohmann::json heartbeat(const std::string& worker_id) {
  return {{"type", "heartbeat"}, {"worker_id", worker_id}};
}
nlohmann::json shutdown() { return {{"type", "shutdown"}}; }

nlohmann::json job(const JobSpec& j) {
  nlohmann::json out = {{"type", "job"},
                        {"trial_id", j.trial_id},
                        {"config", j.config.to_json()},
                        {"budget", j.budget},
                        {"seed", j.seed},
                        {"parent", nullptr}};
  if (j.parent) out["parent"] = *j.parent;
  return out;
}

nlohmann::json result(const JobOutcome& r) {
  return {{"type", "result"},         {"trial_id", r.trial_id},         {"val_accuracy", r.val_accuracy},
          {"train_loss", r.train_loss}, {"wall_seconds", r.wall_seconds}, {"diverged", r.diverged}};
}

nlohmann::json error(std::optional<std::int64_t> trial_id, const std::string& message) {
  nlohmann::json out = {{"type", "error"}, {"trial_id", nullptr}, {"message", message}};
  if (trial_id) out["trial_id"] = *trial_id;
  return out;
}

JobSpec parse_job(const nlohmann::json& j) {
  JobSpec s;
  s.trial_id = j.at("trial_id").get<std::int64_t>();
  s.config = Configuration::from_json(j.at("config"));
  s.budget = j.at("budget").get<std::int64_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("parent") && !j.at("parent").is_null()) s.parent = j.at("parent").get<std::int64_t>();
  if (s.budget < 0) throw std::invalid_argument("negative budget");
  return s;
}

JobOutcome parse_result(const nlohmann::json& j) {
  JobOutcome r;
  r.trial_id = j.at("trial_id").get<std::int64_t>();
  r.val_accuracy = j.at("val_accuracy").get<double>();
  r.train_loss = j.value("train_loss", 0.0);
  r.wall_seconds = j.value("wall_seconds", 0.0);
  r.diverged = j.value("diverged", false);
  return r;
}

}  // namespace msg

// --- sockets -------------------------------------------------------------

LineSocket::LineSocket(LineSocket&& o) noexcept : fd_(o.fd_), buffer_(std::move(o.buffer_)) { o.fd_ = -1; }

LineSocket& LineSocket::operator=(LineSocket&& o) noexcept {
  if (this != &o) {
    close();
    fd_ = o.fd_;
    buffer_ = std::move(o.buffer_);
    o.fd_ = -1;
  }
  return *this;
}

LineSocket::~LineSocket() { close(); }

void LineSocket::close() {
  if (fd_ >= 0) ::close(fd_);
  fd_ = -1;
}

LineSocket LineSocket::connect(const std::string& host, int port) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const auto port_str = std::to_string(port);
  if (const int rc = ::getaddrinfo(host.c_str(), port_str.c_str(), &hints, &res); rc != 0)
    throw std::runtime_error("resolve " + host + ": " + ::gai_strerror(rc));
  int fd = -1;
  int last_errno = 0;
  for (auto* ai = res; ai != nullptr; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
    last_errno = errno;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0)
    throw std::runtime_error("connect " + host + ":" + port_str + ": " + std::strerror(last_errno));
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  return LineSocket(fd);
}

void LineSocket::send_line(const std::string& line) {
  if (fd_ < 0) throw std::runtime_error("send on a closed socket");
  std::string data = line;
  data.push_back('\n');
  std::size_t off = 0;
  while (off < data.size()) {
    const auto n = ::send(fd_, data.data() + off, data.size() - off, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw std::runtime_error(std::string("send: ") + std::strerror(errno));
    }
    off += static_cast<std::size_t>(n);
  }
}

std::optional<std::string> LineSocket::next_buffered_line() {
  const auto nl = buffer_.find('\n');
  if (nl == std::string::npos) return std::nullopt;
  auto line = buffer_.substr(0, nl);
  buffer_.erase(0, nl + 1);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

bool LineSocket::pump() {
  if (fd_ < 0) return false;
  char buf[4096];
  const auto n = ::recv(fd_, buf, sizeof buf, MSG_DONTWAIT);
  if (n > 0) {
    buffer_.append(buf, static_cast<std::size_t>(n));
    return true;
  }
  if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR)) return true;
  return false;
}

std::optional<std::string> LineSocket::read_line() {
  while (true) {
    if (auto line = next_buffered_line()) return line;
    if (fd_ < 0) return std::nullopt;
    char buf[4096];
    const auto n = ::recv(fd_, buf, sizeof buf, 0);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return std::nullopt;
    buffer_.append(buf, static_cast<std::size_t>(n));
  }
}

// --- master --------------------------------------------------------------

namespace {

using Clock = std::chrono::steady_clock;

struct Connection {
  LineSocket sock;
  std::string worker_id;
  bool greeted = false;
  std::optional<std::int64_t> job;
  Clock::time_point last_seen;
  bool dead = false;
};

int listen_on(const std::string& host, int port, int& bound_port) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  const auto port_str = std::to_string(port);
  if (const int rc = ::getaddrinfo(host.c_str(), port_str.c_str(), &hints, &res); rc != 0)
    throw std::runtime_error("resolve " + host + ": " + ::gai_strerror(rc));
  int fd = -1;
  for (auto* ai = res; ai != nullptr && fd < 0; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) continue;
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(fd, ai->ai_addr, ai->ai_addrlen) != 0 || ::listen(fd, 64) != 0) {
      ::close(fd);
      fd = -1;
    }
  }
  ::freeaddrinfo(res);
  if (fd < 0) throw std::runtime_error("cannot listen on " + host + ":" + port_str + ": " + std::strerror(errno));
  sockaddr_storage addr{};
  socklen_t len = sizeof addr;
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  bound_port = addr.ss_family == AF_INET6 ? ntohs(reinterpret_cast<sockaddr_in6*>(&addr)->sin6_port)
                                          : ntohs(reinterpret_cast<sockaddr_in*>(&addr)->sin_port);
  return fd;
}

void send_or_drop(Connection& c, const nlohmann::json& m) {
  try {
    c.sock.send_line(m.dump());
  } catch (const std::exception&) {
    c.dead = true;
  }
}

}  // namespace

MasterStats serve_master(BohbScheduler& sched, const MasterOptions& options, const std::function<void(int)>& on_listen,
                         const std::atomic<bool>* cancel) {
  if (options.heartbeat_interval.count() <= 0 || options.missed_heartbeats < 1)
    throw std::invalid_argument("heartbeat interval and missed count must be positive");
  int port = 0;
  LineSocket listener(listen_on(options.host, options.port, port));
  if (on_listen) on_listen(port);

  MasterStats stats;
  std::vector<std::unique_ptr<Connection>> conns;
  const auto timeout = options.heartbeat_interval * options.missed_heartbeats;
  const auto poll_ms = static_cast<int>(std::clamp<std::int64_t>(options.heartbeat_interval.count() / 4, 5, 100));

  auto drop = [&](Connection& c, const char* why) {
    if (c.job) {
      std::cerr << "master: worker '" << c.worker_id << "' " << why << "; requeueing trial " << *c.job << "\n";
      sched.requeue(*c.job);
      ++stats.requeued;
      c.job.reset();
    }
    c.dead = true;
  };

  auto handle = [&](Connection& c, const std::string& line) {
    nlohmann::json m;
    try {
      m = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      std::cerr << "master: ignoring malformed line from '" << c.worker_id << "'\n";
      return;
    }
    const auto type = m.value("type", std::string());
    if (!c.greeted) {
      if (type != "hello") {
        send_or_drop(c, msg::error(std::nullopt, "first message must be hello"));
        c.dead = true;
        return;
      }
      c.greeted = true;
      c.worker_id = m.value("worker_id", std::string("anonymous"));
      ++stats.workers_seen;
      send_or_drop(c, msg::welcome());
      return;
    }
    if (type == "heartbeat" || type == "hello") return;
    if (type == "result" || type == "error") {
      JobOutcome out;
      try {
        if (type == "result") {
          out = msg::parse_result(m);
        } else {
          out.ok = false;
          out.error = m.value("message", std::string("worker error"));
          if (m.contains("trial_id") && !m["trial_id"].is_null())
            out.trial_id = m["trial_id"].get<std::int64_t>();
          else if (c.job)
            out.trial_id = *c.job;
          else
            return;
        }
      } catch (const std::exception& e) {
        std::cerr << "master: bad " << type << " from '" << c.worker_id << "': " << e.what() << "\n";
        return;
      }
      if (c.job && *c.job == out.trial_id) c.job.reset();
      if (out.trial_id < 0 || static_cast<std::size_t>(out.trial_id) >= sched.trials().size()) {
        std::cerr << "master: result for unknown trial " << out.trial_id << " ignored\n";
        return;
      }
      if (!sched.record_result(out)) {
        ++stats.duplicates;
        std::cerr << "master: duplicate result for trial " << out.trial_id << " ignored\n";
      }
      return;
    }
    std::cerr << "master: unknown message type '" << type << "'\n";
  };

  while (!sched.finished() && !(cancel != nullptr && cancel->load())) {
    for (auto& c : conns) {
      if (c->dead || !c->greeted || c->job) continue;
      auto t = sched.next_job(c->worker_id);
      if (!t) break;
      c->job = t->id;
      send_or_drop(*c, msg::job(job_of(*t)));
      if (c->dead) drop(*c, "unreachable");
    }

    std::vector<pollfd> fds;
    fds.push_back({listener.fd(), POLLIN, 0});
    for (auto& c : conns) fds.push_back({c->sock.fd(), POLLIN, 0});
    const int rc = ::poll(fds.data(), fds.size(), poll_ms);
    if (rc < 0 && errno != EINTR) throw std::runtime_error(std::string("poll: ") + std::strerror(errno));
    const auto now = Clock::now();

    if (rc > 0 && (fds[0].revents & POLLIN)) {
      const int fd = ::accept(listener.fd(), nullptr, nullptr);
      if (fd >= 0) {
        int one = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
        auto c = std::make_unique<Connection>();
        c->sock = LineSocket(fd);
        c->last_seen = now;
        conns.push_back(std::move(c));
      }
    }
    for (std::size_t i = 1; i < fds.size(); ++i) {
      auto& c = *conns[i - 1];
      if (fds[i].revents == 0) continue;
      const bool open = c.sock.pump();
      c.last_seen = now;
      while (auto line = c.sock.next_buffered_line()) {
        handle(c, *line);
        if (sched.finished()) break;
      }
      if (!open) drop(c, "disconnected");
    }
    for (auto& c : conns)
      if (!c->dead && now - c->last_seen > timeout) drop(*c, "missed heartbeats");
    std::erase_if(conns, [](const auto& c) { return c->dead; });
  }

  for (auto& c : conns) send_or_drop(*c, msg::shutdown());
  return stats;
}

// --- worker --------------------------------------------------------------

int run_worker(const std::string& host, int port, const Objective& objective, const WorkerOptions& options) {
  int jobs_done = 0;
  bool connected_once = false;
  int attempts = 0;
  auto backoff = options.initial_backoff;

  while (true) {
    LineSocket sock;
    try {
      sock = LineSocket::connect(host, port);
    } catch (const std::exception& e) {
      if (++attempts >= options.max_connect_attempts) {
        if (connected_once) return jobs_done;
        throw std::runtime_error("master unreachable after " + std::to_string(attempts) + " attempts: " + e.what());
      }
      std::this_thread::sleep_for(backoff);
      backoff = std::min(backoff * 2, options.max_backoff);
      continue;
    }
    attempts = 0;
    backoff = options.initial_backoff;
    connected_once = true;

    std::mutex send_mu;
    std::condition_variable stop_cv;
    bool stop = false;
    auto send = [&](const nlohmann::json& m) {
      std::lock_guard lock(send_mu);
      sock.send_line(m.dump());
    };

    bool shutdown = false;
    try {
      send(msg::hello(options.worker_id));
      std::thread beat([&] {
        std::unique_lock lock(send_mu);
        while (!stop_cv.wait_for(lock, options.heartbeat_interval, [&] { return stop; })) {
          try {
            sock.send_line(msg::heartbeat(options.worker_id).dump());
          } catch (const std::exception&) {
            return;
          }
        }
      });
      try {
        while (auto line = sock.read_line()) {
          nlohmann::json m;
          try {
            m = nlohmann::json::parse(*line);
          } catch (const nlohmann::json::exception& e) {
            send(msg::error(std::nullopt, std::string("malformed message: ") + e.what()));
            continue;
          }
          const auto type = m.value("type", std::string());
          if (type == "welcome") continue;
          if (type == "shutdown") {
            shutdown = true;
            break;
          }
          if (type != "job") {
            send(msg::error(std::nullopt, "unexpected message type '" + type + "'"));
            continue;
          }
          JobSpec job;
          try {
            job = msg::parse_job(m);
          } catch (const std::exception& e) {
            std::optional<std::int64_t> id;
            if (m.contains("trial_id") && m["trial_id"].is_number_integer()) id = m["trial_id"].get<std::int64_t>();
            send(msg::error(id, std::string("malformed job: ") + e.what()));
            continue;
          }
          const auto out = run_job(objective, job);
          send(out.ok ? msg::result(out) : msg::error(job.trial_id, out.error));
          ++jobs_done;
        }
      } catch (const std::exception& e) {
        std::cerr << "worker " << options.worker_id << ": " << e.what() << "\n";
      }
      {
        std::lock_guard lock(send_mu);
        stop = true;
      }
      stop_cv.notify_all();
      beat.join();
    } catch (const std::exception& e) {
      std::cerr << "worker " << options.worker_id << ": " << e.what() << "\n";
    }
    if (shutdown) return jobs_done;
    std::this_thread::sleep_for(backoff);
  }
}

}  // namespace fshpo
