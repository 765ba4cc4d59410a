#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fshpo/ledger.hpp"
#include "fshpo/scheduler.hpp"

namespace fshpo {

/// Runs scheduler jobs on n_parallel threads of this process.
class InProcessExecutor {
 public:
  explicit InProcessExecutor(int n_parallel);

  int n_parallel() const { return n_parallel_; }

  /// Drives `sched` until it finishes or `cancel` becomes true. Jobs already
  /// running when cancelled are completed and recorded. Objective exceptions
  /// become failed trials. Calling drive from inside an objective throws
  /// std::logic_error.
  void drive(BohbScheduler& sched, const Objective& objective,
             const std::atomic<bool>* cancel = nullptr) const;

 private:
  int n_parallel_;
};

/// Calls the objective and converts an exception into a failed outcome.
JobOutcome run_job(const Objective& objective, const JobSpec& job);

JobSpec job_of(const Trial& t);

struct RunResult {
  std::vector<Trial> trials;
  std::optional<Trial> best;
  bool completed = false;
};

RunResult result_of(const BohbScheduler& sched);

/// Writes `header` to an empty ledger and runs the scheduler to completion.
RunResult run_bohb(BohbScheduler& sched, const Objective& objective, const InProcessExecutor& executor,
                   RunLedger* ledger, const nlohmann::json& header,
                   const std::atomic<bool>* cancel = nullptr);

/// Replays `ledger` through a fresh scheduler: every recorded result is fed
/// back in sampling order and trials without a terminal record are queued
/// again. Throws LedgerCorruption if a trial's configuration checksum differs
/// from the replayed one. Trials sampled by the replay beyond the ledger's
/// end are appended to it.
void replay(BohbScheduler& sched, RunLedger& ledger);

/// Replays `ledger` into `sched` and continues the run. New events go to the
/// ledger (attach it to its file first to keep appending there).
RunResult resume_run(BohbScheduler& sched, const Objective& objective, const InProcessExecutor& executor,
                     RunLedger& ledger, const std::atomic<bool>* cancel = nullptr);

// --- wire protocol -------------------------------------------------------

namespace msg {
nlohmann::json hello(const std::string& worker_id);
nlohmann::json welcome();
nlohmann::json heartbeat(const std::string& worker_id);
nlohmann::json job(const JobSpec& j);
nlohmann::json result(const JobOutcome& r);
nlohmann::json error(std::optional<std::int64_t> trial_id, const std::string& message);
nlohmann::json shutdown();

JobSpec parse_job(const nlohmann::json& j);
JobOutcome parse_result(const nlohmann::json& j);
}  // namespace msg

/// Line-buffered blocking socket connection.
class LineSocket {
 public:
  LineSocket() = default;
  explicit LineSocket(int fd) : fd_(fd) {}
  LineSocket(const LineSocket&) = delete;
  LineSocket& operator=(const LineSocket&) = delete;
  LineSocket(LineSocket&& o) noexcept;
  LineSocket& operator=(LineSocket&& o) noexcept;
  ~LineSocket();

  static LineSocket connect(const std::string& host, int port);

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  void close();

  /// Throws std::runtime_error on a write failure.
  void send_line(const std::string& line);
  /// Blocks for the next line; nullopt on EOF or error.
  std::optional<std::string> read_line();
  /// Reads what is available without blocking; false on EOF or error.
  bool pump();
  std::optional<std::string> next_buffered_line();

 private:
  int fd_ = -1;
  std::string buffer_;
};

struct MasterOptions {
  std::string host = "127.0.0.1";
  int port = 0;  // 0 picks a free port
  std::chrono::milliseconds heartbeat_interval{10000};
  int missed_heartbeats = 3;
};

struct MasterStats {
  int workers_seen = 0;
  int requeued = 0;
  int duplicates = 0;
};

/// Hands out scheduler jobs to TCP workers until the scheduler finishes,
/// then sends shutdown to every worker. `on_listen` receives the bound port.
MasterStats serve_master(BohbScheduler& sched, const MasterOptions& options,
                         const std::function<void(int)>& on_listen = {},
                         const std::atomic<bool>* cancel = nullptr);

struct WorkerOptions {
  std::string worker_id = "worker";
  std::chrono::milliseconds heartbeat_interval{10000};
  std::chrono::milliseconds initial_backoff{100};
  std::chrono::milliseconds max_backoff{5000};
  int max_connect_attempts = 10;
};

/// Serves jobs from the master at host:port until it sends shutdown or
/// closes the connection after the run. Returns the number of jobs done.
int run_worker(const std::string& host, int port, const Objective& objective, const WorkerOptions& options);

}  // namespace fshpo
