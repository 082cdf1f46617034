#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <unistd.h>

#include <nlohmann/json.hpp>

#include "dosefind/config.hpp"
#include "dosefind/core.hpp"
#include "dosefind/engine.hpp"
#include "dosefind/report.hpp"

namespace dosefind::conduct {

using json = nlohmann::ordered_json;

/// Error surfaced to HTTP clients as {code, message, fields}.
class ApiError : public std::runtime_error {
 public:
  ApiError(int status, std::string code, const std::string& message, std::vector<std::string> fields = {})
      : std::runtime_error(message), status_(status), code_(std::move(code)), fields_(std::move(fields)) {}

  int status() const noexcept { return status_; }
  const std::string& code() const noexcept { return code_; }
  const std::vector<std::string>& fields() const noexcept { return fields_; }

  json body() const { return {{"code", code_}, {"message", what()}, {"fields", fields_}}; }

 private:
  int status_;
  std::string code_;
  std::vector<std::string> fields_;
};

/// Thrown by a fault hook to stop an operation right after an event has
/// been persisted, as if the process had died there.
struct SimulatedCrash : std::runtime_error {
  SimulatedCrash() : std::runtime_error("simulated crash") {}
};

struct Session {
  std::string id;
  nlohmann::json config;
  DesignPtr design;
  int K = 0;
  int m = 0;
  std::uint64_t seed = 0;
  std::vector<double> dose_tags;
  TrialState state{DoseGrid(2), 1};
  std::vector<DoseDecision> decisions;  // decisions[i]: issued after i cohorts
  bool closed = false;
  bool awaiting_decision = false;  // outcomes logged, recommendation not yet
  std::size_t events = 0;
  std::mutex mu;

  const DoseDecision& current() const { return decisions.back(); }
  bool stopped() const { return !decisions.empty() && current().kind == DecisionKind::stop; }
};

namespace detail {

inline std::string new_id() {
  static std::mutex mu;
  static std::random_device rd;
  std::lock_guard lock(mu);
  std::uint64_t v = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

inline bool valid_id(const std::string& id) {
  return !id.empty() && id.size() <= 64 &&
         std::all_of(id.begin(), id.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)); });
}

}  // namespace detail

/// Sessions persisted as one append-only JSON-lines event log each.
/// Current state is always the replay of the log.
class SessionStore {
 public:
  using FaultHook = std::function<void(const std::string& session, const std::string& event_type)>;

  explicit SessionStore(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::error_code ec;
    if (std::filesystem::exists(dir_, ec) && !std::filesystem::is_directory(dir_, ec)) {
      throw ConfigError("state path is not a directory: " + dir_.string(), {"state_dir"});
    }
    std::filesystem::create_directories(dir_, ec);
    if (ec || ::access(dir_.c_str(), W_OK) != 0) {
      throw ConfigError("state directory is not writable: " + dir_.string(), {"state_dir"});
    }
    std::vector<std::filesystem::path> logs;
    for (const auto& e : std::filesystem::directory_iterator(dir_)) {
      if (e.is_regular_file() && e.path().extension() == ".jsonl") logs.push_back(e.path());
    }
    std::sort(logs.begin(), logs.end());
    for (const auto& p : logs) replay(p);
  }

  /// Called after every persisted event; may throw SimulatedCrash.
  void set_fault_hook(FaultHook hook) { hook_ = std::move(hook); }

  const std::filesystem::path& dir() const noexcept { return dir_; }

  std::vector<std::string> ids() const {
    std::lock_guard lock(mu_);
    std::vector<std::string> out;
    for (const auto& [id, s] : sessions_) out.push_back(id);
    return out;
  }

  json create(const nlohmann::json& cfg) {
    auto s = std::make_shared<Session>();
    configure(*s, cfg, std::nullopt);
    {
      std::lock_guard lock(mu_);
      do {
        s->id = detail::new_id();
      } while (sessions_.count(s->id) || std::filesystem::exists(log_path(s->id)));
      sessions_[s->id] = s;
    }
    std::lock_guard lock(s->mu);
    append(*s, {{"type", "created"}, {"id", s->id}, {"config", s->config}, {"seed", s->seed}});
    issue(*s);
    return view_locked(*s);
  }

  /// Records one cohort of outcomes and returns the next recommendation.
  json record(const std::string& id, const nlohmann::json& body) {
    auto s = find(id);
    std::lock_guard lock(s->mu);
    if (s->closed) throw ApiError(422, "session_closed", "session is closed");
    if (s->stopped()) throw ApiError(422, "trial_stopped", "the design has stopped the trial");
    const nlohmann::json& raw = body.is_object() && body.contains("outcomes") ? body["outcomes"] : body;
    const Outcomes ys = parse_outcomes(*s, raw);
    const DoseDecision& d = s->current();
    append(*s, {{"type", "outcomes"},
                {"cohort", s->state.cohorts() + 1},
                {"level", d.next_level},
                {"assigned", d.assigned},
                {"outcomes", ys}});
    apply_outcomes(*s, d.next_level, d.assigned, ys);
    issue(*s);
    return recommendation_json(*s);
  }

  /// Removes the last cohort with a compensating event.
  json undo(const std::string& id) {
    auto s = find(id);
    std::lock_guard lock(s->mu);
    if (s->closed) throw ApiError(422, "session_closed", "session is closed");
    if (s->state.empty()) throw ApiError(409, "nothing_to_undo", "no recorded cohort to undo");
    append(*s, {{"type", "undo"}, {"cohort", s->state.cohorts()}});
    apply_undo(*s);
    return recommendation_json(*s);
  }

  json close(const std::string& id) {
    auto s = find(id);
    std::lock_guard lock(s->mu);
    if (s->closed) throw ApiError(422, "session_closed", "session is already closed");
    append(*s, {{"type", "closed"}});
    s->closed = true;
    return view_locked(*s);
  }

  json view(const std::string& id) const {
    auto s = find(id);
    std::lock_guard lock(s->mu);
    return view_locked(*s);
  }

  /// Recommendations issued so far, oldest first (for parity checks).
  std::vector<DoseDecision> decisions(const std::string& id) const {
    auto s = find(id);
    std::lock_guard lock(s->mu);
    return s->decisions;
  }

  TrialState state(const std::string& id) const {
    auto s = find(id);
    std::lock_guard lock(s->mu);
    return s->state;
  }

  std::filesystem::path log_path(const std::string& id) const { return dir_ / (id + ".jsonl"); }

 private:
  std::shared_ptr<Session> find(const std::string& id) const {
    std::lock_guard lock(mu_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw ApiError(404, "not_found", "unknown session " + id);
    return it->second;
  }

  static void configure(Session& s, const nlohmann::json& cfg, std::optional<std::uint64_t> seed) {
    try {
      config::validate_schema(cfg);
      s.config = cfg;
      s.K = config::levels(cfg);
      s.m = config::get<int>(cfg, "trial.cohort_size");
      if (s.m < 1) throw ConfigError("cohort size must be positive", {"trial.cohort_size"});
      s.dose_tags = config::get<std::vector<double>>(cfg, "trial.dose_tags");
      DoseGrid grid(s.K, s.dose_tags);
      s.design = config::build_design(cfg, s.K, s.m);
      s.state = TrialState(grid, s.m);
      if (seed) {
        s.seed = *seed;
      } else if (config::has(cfg, "execution.seed")) {
        s.seed = config::get<std::uint64_t>(cfg, "execution.seed");
      } else {
        std::random_device rd;
        s.seed = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
      }
    } catch (const ConfigError& e) {
      throw ApiError(400, "invalid_config", e.what(), e.fields());
    } catch (const Error& e) {
      throw ApiError(400, "invalid_config", e.what());
    }
  }

  Outcomes parse_outcomes(const Session& s, const nlohmann::json& raw) const {
    if (!raw.is_array()) throw ApiError(409, "bad_outcomes", "outcomes must be an array", {"outcomes"});
    if (static_cast<int>(raw.size()) != s.m) {
      throw ApiError(409, "bad_outcomes",
                     "expected " + std::to_string(s.m) + " outcomes, got " + std::to_string(raw.size()), {"outcomes"});
    }
    const bool binary = s.design->outcome_type() == OutcomeType::binary;
    Outcomes ys;
    for (const auto& v : raw) {
      if (binary) {
        if (v.is_boolean()) {
          ys.push_back(v.get<bool>() ? 1.0 : 0.0);
        } else if (v.is_number() && (v.get<double>() == 0.0 || v.get<double>() == 1.0)) {
          ys.push_back(v.get<double>());
        } else {
          throw ApiError(409, "bad_outcomes", "binary outcomes must be 0 or 1", {"outcomes"});
        }
      } else {
        if (!v.is_number() || !std::isfinite(v.get<double>())) {
          throw ApiError(409, "bad_outcomes", "biomarker outcomes must be finite numbers", {"outcomes"});
        }
        ys.push_back(v.get<double>());
      }
    }
    return ys;
  }

  static void apply_outcomes(Session& s, Level level, double assigned, const Outcomes& ys) {
    s.state.append(Cohort{level, assigned, ys});
    s.awaiting_decision = true;
  }

  static void apply_undo(Session& s) {
    s.state = s.state.without_last();
    s.decisions.pop_back();
    s.awaiting_decision = false;
  }

  // Computes the recommendation for the current state and logs it.
  void issue(Session& s) {
    const DoseDecision d = decide(*s.design, s.state, s.seed);
    s.decisions.push_back(d);
    s.awaiting_decision = false;
    append(s, {{"type", "recommendation"}, {"cohort", s.state.cohorts()}, {"decision", report::to_json(d)}});
  }

  void append(Session& s, const json& event) {
    json e = event;
    e["seq"] = s.events + 1;
    const std::string line = e.dump() + "\n";
    const auto path = log_path(s.id);
    std::FILE* f = std::fopen(path.c_str(), "ab");
    if (!f) throw Error("cannot open session log " + path.string());
    const bool ok = std::fwrite(line.data(), 1, line.size(), f) == line.size() && std::fflush(f) == 0 &&
                    ::fsync(fileno(f)) == 0;
    std::fclose(f);
    if (!ok) throw Error("cannot write session log " + path.string());
    ++s.events;
    if (hook_) hook_(s.id, e["type"].get<std::string>());
  }

  void replay(const std::filesystem::path& path) {
    const std::string name = path.filename().string();
    auto malformed = [&](const std::string& why) {
      return ConfigError("malformed session log " + name + ": " + why, {"state_dir"});
    };

    std::ifstream in(path, std::ios::binary);
    std::stringstream buf;
    buf << in.rdbuf();
    std::string text = buf.str();
    // A torn final write leaves a line without its newline; drop it.
    const auto last_nl = text.rfind('\n');
    const std::size_t keep = last_nl == std::string::npos ? 0 : last_nl + 1;
    if (keep != text.size()) {
      text.resize(keep);
      std::filesystem::resize_file(path, keep);
    }
    if (text.empty()) {
      std::filesystem::remove(path);
      return;
    }

    auto s = std::make_shared<Session>();
    s->id = path.stem().string();
    if (!detail::valid_id(s->id)) throw malformed("bad session id");
    std::istringstream lines(text);
    std::string line;
    bool created = false;
    while (std::getline(lines, line)) {
      const json e = json::parse(line, nullptr, false);
      if (e.is_discarded() || !e.is_object() || !e.contains("type")) throw malformed("unreadable event");
      const std::string type = e["type"].get<std::string>();
      if (e.value("seq", std::size_t{0}) != s->events + 1) throw malformed("event sequence gap");
      try {
        if (type == "created") {
          if (created) throw malformed("duplicate creation");
          configure(*s, nlohmann::json::parse(e["config"].dump()), e["seed"].get<std::uint64_t>());
          created = true;
        } else if (!created) {
          throw malformed("event before creation");
        } else if (type == "outcomes") {
          if (s->awaiting_decision || s->closed) throw malformed("unexpected outcomes");
          apply_outcomes(*s, e["level"].get<Level>(), e["assigned"].get<double>(),
                         e["outcomes"].get<Outcomes>());
        } else if (type == "recommendation") {
          const DoseDecision d = decide(*s->design, s->state, s->seed);
          if (report::to_json(d) != e["decision"]) throw malformed("recommendation does not match replay");
          s->decisions.push_back(d);
          s->awaiting_decision = false;
        } else if (type == "undo") {
          if (s->state.empty()) throw malformed("undo with no cohort");
          apply_undo(*s);
        } else if (type == "closed") {
          s->closed = true;
        } else {
          throw malformed("unknown event type " + type);
        }
      } catch (const ApiError& err) {
        throw malformed(err.what());
      } catch (const nlohmann::json::exception& err) {
        throw malformed(err.what());
      } catch (const StateError& err) {
        throw malformed(err.what());
      }
      ++s->events;
    }
    // The process died between logging outcomes (or creation) and logging
    // the recommendation: finish the interrupted step.
    if (s->decisions.size() != static_cast<std::size_t>(s->state.cohorts()) + 1) {
      std::lock_guard lock(s->mu);
      issue(*s);
    }
    std::lock_guard lock(mu_);
    sessions_[s->id] = s;
  }

  json recommendation_json(const Session& s) const {
    return {{"session", s.id}, {"cohorts", s.state.cohorts()}, {"recommendation", report::to_json(s.current())}};
  }

  json view_locked(const Session& s) const {
    json v;
    v["id"] = s.id;
    v["design"] = {{"kind", s.design->kind()},
                   {"target", s.design->target()},
                   {"outcome", s.design->outcome_type() == OutcomeType::binary ? "binary" : "biomarker"},
                   {"coherence_guard", config::get<bool>(s.config, "design.coherence_guard")},
                   {"config", json::parse(s.config.dump())}};
    v["levels"] = s.K;
    v["cohort_size"] = s.m;
    v["dose_tags"] = s.dose_tags;
    v["seed"] = s.seed;
    v["closed"] = s.closed;
    v["stopped"] = s.stopped();
    v["events"] = s.events;
    v["history"] = json::array();
    const auto& h = s.state.history();
    for (std::size_t i = 0; i < h.size(); ++i) {
      v["history"].push_back({{"cohort", i + 1},
                              {"level", h[i].level},
                              {"assigned", h[i].assigned},
                              {"outcomes", h[i].outcomes},
                              {"recommendation", report::to_json(s.decisions[i + 1])}});
    }
    v["recommendation"] = report::to_json(s.current());
    std::vector<int> n(static_cast<std::size_t>(s.K), 0), z(static_cast<std::size_t>(s.K), 0);
    const auto* vo = dynamic_cast<const VirtualObservationSa*>(s.design.get());
    for (const auto& c : h) {
      n[static_cast<std::size_t>(c.level - 1)] += static_cast<int>(c.outcomes.size());
      for (double y : c.outcomes) z[static_cast<std::size_t>(c.level - 1)] += vo ? (y > vo->t0()) : (y != 0.0);
    }
    v["table"] = json::array();
    for (int k = 0; k < s.K; ++k) {
      v["table"].push_back({{"level", k + 1}, {"n", n[static_cast<std::size_t>(k)]}, {"z", z[static_cast<std::size_t>(k)]}});
    }
    return v;
  }

  std::filesystem::path dir_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  FaultHook hook_;
};

}  // namespace dosefind::conduct
