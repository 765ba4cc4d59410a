#include "fshpo/ledger.hpp"

#include <map>
#include <sstream>

#include "fshpo/checksum.hpp"

namespace fshpo {

std::string to_string(EventType t) {
  switch (t) {
    case EventType::kHeader: return "header";
    case EventType::kTrialSampled: return "trial-sampled";
    case EventType::kTrialStarted: return "trial-started";
    case EventType::kTrialFinished: return "trial-finished";
    case EventType::kTrialFailed: return "trial-failed";
  }
  return "?";
}

EventType parse_event_type(const std::string& s) {
  for (auto t : {EventType::kHeader, EventType::kTrialSampled, EventType::kTrialStarted,
                 EventType::kTrialFinished, EventType::kTrialFailed})
    if (to_string(t) == s) return t;
  throw std::invalid_argument("unknown ledger event type '" + s + "'");
}

nlohmann::json LedgerEvent::to_json() const {
  nlohmann::json j;
  j["seq"] = seq;
  j["type"] = to_string(type);
  if (type == EventType::kHeader) j["schema"] = kLedgerSchemaVersion;
  j["payload"] = payload;
  j["crc32"] = crc;
  return j;
}

RunLedger::RunLedger(RunLedger&& other) noexcept {
  std::lock_guard lock(other.mu_);
  events_ = std::move(other.events_);
  file_ = std::move(other.file_);
}

RunLedger& RunLedger::operator=(RunLedger&& other) noexcept {
  if (this != &other) {
    std::scoped_lock lock(mu_, other.mu_);
    events_ = std::move(other.events_);
    file_ = std::move(other.file_);
  }
  return *this;
}

RunLedger RunLedger::parse(std::istream& in) {
  RunLedger ledger;
  std::string line;
  std::int64_t expected = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      // An unterminated last line is a write cut short by a crash.
      if (in.eof()) break;
      throw LedgerCorruption(expected, "unparseable line");
    }
    LedgerEvent ev;
    try {
      ev.seq = j.at("seq").get<std::int64_t>();
      ev.type = parse_event_type(j.at("type").get<std::string>());
      ev.payload = j.at("payload");
      ev.crc = j.at("crc32").get<std::uint32_t>();
    } catch (const std::exception& e) {
      throw LedgerCorruption(expected, std::string("malformed record: ") + e.what());
    }
    if (ev.seq != expected)
      throw LedgerCorruption(expected, "sequence gap (found " + std::to_string(ev.seq) + ")");
    if (crc32(ev.payload.dump()) != ev.crc) throw LedgerCorruption(ev.seq, "checksum mismatch");
    if (ev.seq == 0) {
      if (ev.type != EventType::kHeader) throw LedgerCorruption(0, "first record is not a header");
      if (j.value("schema", std::string()) != kLedgerSchemaVersion)
        throw LedgerCorruption(0, "unsupported schema version");
    }
    ledger.events_.push_back(std::move(ev));
    ++expected;
  }
  return ledger;
}

RunLedger RunLedger::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open ledger " + path.string());
  return parse(in);
}

void RunLedger::attach_file(const std::filesystem::path& path, bool truncate) {
  std::lock_guard lock(mu_);
  auto f = std::make_unique<std::ofstream>(
      path, truncate ? std::ios::out | std::ios::trunc : std::ios::out | std::ios::app);
  if (!*f) throw std::runtime_error("cannot open ledger " + path.string() + " for writing");
  if (truncate) {
    for (const auto& ev : events_) *f << ev.to_json().dump() << '\n';
    f->flush();
  }
  file_ = std::move(f);
}

const LedgerEvent& RunLedger::append(EventType type, nlohmann::json payload) {
  std::lock_guard lock(mu_);
  LedgerEvent ev;
  ev.seq = static_cast<std::int64_t>(events_.size());
  ev.type = type;
  ev.payload = std::move(payload);
  ev.crc = crc32(ev.payload.dump());
  if (file_) {
    *file_ << ev.to_json().dump() << '\n';
    file_->flush();
  }
  events_.push_back(std::move(ev));
  return events_.back();
}

std::vector<LedgerEvent> RunLedger::events() const {
  std::lock_guard lock(mu_);
  return events_;
}

std::size_t RunLedger::size() const {
  std::lock_guard lock(mu_);
  return events_.size();
}

std::optional<nlohmann::json> RunLedger::header() const {
  std::lock_guard lock(mu_);
  if (events_.empty() || events_.front().type != EventType::kHeader) return std::nullopt;
  return std::optional<nlohmann::json>(std::in_place, events_.front().payload);
}

std::vector<LedgerTrial> RunLedger::trials() const {
  std::lock_guard lock(mu_);
  std::vector<LedgerTrial> out;
  std::map<std::int64_t, std::size_t> index;
  for (const auto& ev : events_) {
    const auto& p = ev.payload;
    switch (ev.type) {
      case EventType::kTrialSampled: {
        LedgerTrial t;
        t.id = p.at("trial_id").get<std::int64_t>();
        t.config = p.at("config");
        t.config_checksum = p.at("config_checksum").get<std::uint32_t>();
        t.budget = p.at("budget").get<std::int64_t>();
        t.origin = p.at("origin").get<std::string>();
        if (!p.at("parent").is_null()) t.parent = p.at("parent").get<std::int64_t>();
        t.seed = p.at("seed").get<std::uint64_t>();
        t.iteration = p.value("iteration", 0);
        t.stage = p.value("stage", 0);
        index[t.id] = out.size();
        out.push_back(std::move(t));
        break;
      }
      case EventType::kTrialFinished: {
        const auto it = index.find(p.at("trial_id").get<std::int64_t>());
        if (it == index.end()) throw LedgerCorruption(ev.seq, "result for unknown trial");
        auto& t = out[it->second];
        if (t.finished || t.failed) break;
        t.finished = true;
        t.val_accuracy = p.at("val_accuracy").get<double>();
        t.train_loss = p.value("train_loss", 0.0);
        t.diverged = p.value("diverged", false);
        break;
      }
      case EventType::kTrialFailed: {
        const auto it = index.find(p.at("trial_id").get<std::int64_t>());
        if (it == index.end()) throw LedgerCorruption(ev.seq, "failure for unknown trial");
        auto& t = out[it->second];
        if (t.finished || t.failed) break;
        t.failed = true;
        break;
      }
      default:
        break;
    }
  }
  return out;
}

void RunLedger::write(std::ostream& out) const {
  std::lock_guard lock(mu_);
  for (const auto& ev : events_) out << ev.to_json().dump() << '\n';
}

}  // namespace fshpo
