#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace fshpo {

inline constexpr const char* kLedgerSchemaVersion = "1";

enum class EventType {
  kHeader,
  kTrialSampled,
  kTrialStarted,
  kTrialFinished,
  kTrialFailed,
};

std::string to_string(EventType t);
EventType parse_event_type(const std::string& s);

struct LedgerEvent {
  std::int64_t seq = 0;
  EventType type = EventType::kHeader;
  nlohmann::json payload;
  std::uint32_t crc = 0;

  nlohmann::json to_json() const;
};

class LedgerCorruption : public std::runtime_error {
 public:
  LedgerCorruption(std::int64_t seq, const std::string& what)
      : std::runtime_error("ledger record " + std::to_string(seq) + ": " + what),
        seq_(seq) {}
  std::int64_t seq() const { return seq_; }

 private:
  std::int64_t seq_;
};

/// Flattened view of one trial as recorded in a ledger.
struct LedgerTrial {
  std::int64_t id = 0;
  nlohmann::json config;
  std::uint32_t config_checksum = 0;
  std::int64_t budget = 0;
  std::string origin;
  std::optional<std::int64_t> parent;
  std::uint64_t seed = 0;
  int iteration = 0;
  int stage = 0;
  bool finished = false;
  bool failed = false;
  double val_accuracy = 0.0;
  double train_loss = 0.0;
  bool diverged = false;
};

/// Append-only event log. Every append is flushed to the attached file (if
/// any) as one JSON line carrying a sequence number and the CRC32 of its
/// payload.
class RunLedger {
 public:
  RunLedger() = default;
  RunLedger(const RunLedger&) = delete;
  RunLedger& operator=(const RunLedger&) = delete;
  RunLedger(RunLedger&& other) noexcept;
  RunLedger& operator=(RunLedger&& other) noexcept;

  /// Parse and verify a ledger file. Throws LedgerCorruption on a bad record.
  static RunLedger load(const std::filesystem::path& path);
  static RunLedger parse(std::istream& in);

  /// Start mirroring to `path`. With truncate=false existing contents are
  /// kept and new events appended (resume).
  void attach_file(const std::filesystem::path& path, bool truncate);

  const LedgerEvent& append(EventType type, nlohmann::json payload);

  std::vector<LedgerEvent> events() const;
  std::size_t size() const;
  std::optional<nlohmann::json> header() const;

  /// Trials in sampling order with their terminal outcome, if any.
  std::vector<LedgerTrial> trials() const;

  void write(std::ostream& out) const;

 private:
  mutable std::mutex mu_;
  std::vector<LedgerEvent> events_;
  std::unique_ptr<std::ofstream> file_;
};

}  // namespace fshpo
