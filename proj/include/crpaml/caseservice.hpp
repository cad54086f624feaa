#pragma once

// Flagged transactions as investigable cases, least-privilege scoped views,
// and an append-only decision log, served over HTTP.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

#include "crpaml/common.hpp"
#include "crpaml/crpnet.hpp"
#include "crpaml/riskmodel.hpp"
#include "crpaml/txstore.hpp"
#include "httplib.h"
#include "json.hpp"

namespace crpaml {

enum class CaseStatus : std::uint8_t { Open, Confirmed, Dismissed };
inline constexpr std::array<std::string_view, 3> kCaseStatusNames{"open", "confirmed", "dismissed"};

inline std::string_view name(CaseStatus s) { return kCaseStatusNames[static_cast<std::size_t>(s)]; }

/// One scored transaction as handed to the case service.
struct CaseInput {
  std::size_t txn = 0;
  double p_hat = 0.0;
  bool raw = false;  // p_hat >= decision threshold
  double composite = 0.0;
  std::array<double, kRiskIndicatorCount> contributions{};  // ln(r_i / prior)
};

struct Case {
  std::size_t id = 0;  // equals the transaction id
  std::size_t txn = 0;
  double p_hat = 0.0;
  double composite = 0.0;
  std::array<double, kRiskIndicatorCount> contributions{};
  CaseStatus status = CaseStatus::Open;
  std::string note;
  std::optional<std::int64_t> decided_at;
};

inline std::array<double, kRiskIndicatorCount> risk_contributions(const RiskFeatures& f, double prior) {
  std::array<double, kRiskIndicatorCount> c{};
  for (std::size_t i = 0; i < kRiskIndicatorCount; ++i) c[i] = std::log(f.r[i] / prior);
  return c;
}

inline bool queue_before(const Case& a, const Case& b) {
  return a.composite != b.composite ? a.composite > b.composite : a.txn < b.txn;
}

/// One open case per final-positive prediction, by descending composite.
/// A repeated transaction id keeps its first case; later ones are counted
/// in `rejected`.
inline std::vector<Case> flag_cases(std::span<const Prediction> predictions, std::size_t* rejected = nullptr) {
  std::vector<Case> out;
  std::set<std::size_t> seen;
  std::size_t dup = 0;
  for (const auto& p : predictions) {
    if (!p.final_decision) continue;
    if (!seen.insert(p.txn).second) {
      ++dup;
      continue;
    }
    Case c;
    c.id = c.txn = p.txn;
    c.p_hat = p.p_hat;
    c.composite = p.composite;
    out.push_back(c);
  }
  std::stable_sort(out.begin(), out.end(), queue_before);
  if (rejected) *rejected = dup;
  return out;
}

// ---- scoped view ---------------------------------------------------------------------------

enum class SuspectMode : std::uint8_t { Sender, Receiver, Both };

inline SuspectMode parse_suspect_mode(std::string_view s) {
  if (s == "sender") return SuspectMode::Sender;
  if (s == "receiver") return SuspectMode::Receiver;
  if (s == "both") return SuspectMode::Both;
  throw ConfigError("suspect mode must be sender, receiver or both, got " + std::string(s));
}

struct ScopeConfig {
  SuspectMode suspect = SuspectMode::Sender;
  double substantial_fraction = 0.05;
  std::string token_salt = "crpaml";
};

/// Aggregates only: no partner identities.
inline nlohmann::ordered_json profile_summary(const TransactionStore& store, const AccountId& a,
                                             const RateTable& rates) {
  std::uint64_t n_in = 0, n_out = 0;
  std::int64_t in_usd = 0, out_usd = 0;
  std::set<AccountId> partners;
  std::array<std::uint64_t, kCurrencyCount> cur{};
  std::array<std::uint64_t, kFormatCount> fmt{};
  std::optional<std::int64_t> first, last;
  for (auto p : store.positions(a)) {
    const auto& t = store[p];
    const auto usd = usd_paid(t, rates).micros;
    if (t.from == a) {
      ++n_out;
      out_usd += usd;
      partners.insert(t.to);
      ++cur[static_cast<std::size_t>(t.payment_currency)];
    }
    if (t.to == a) {
      ++n_in;
      in_usd += usd;
      partners.insert(t.from);
      ++cur[static_cast<std::size_t>(t.receiving_currency)];
    }
    ++fmt[static_cast<std::size_t>(t.format)];
    if (!first) first = t.timestamp;
    last = t.timestamp;
  }
  const auto top_cur = static_cast<std::size_t>(std::max_element(cur.begin(), cur.end()) - cur.begin());
  const auto top_fmt = static_cast<std::size_t>(std::max_element(fmt.begin(), fmt.end()) - fmt.begin());
  nlohmann::ordered_json j;
  j["n_in"] = n_in;
  j["n_out"] = n_out;
  j["in_usd"] = static_cast<double>(in_usd) * 1e-6;
  j["out_usd"] = static_cast<double>(out_usd) * 1e-6;
  j["distinct_counterparties"] = partners.size();
  j["top_currency"] = n_in + n_out ? std::string(code(static_cast<Currency>(top_cur))) : "";
  j["top_format"] = n_in + n_out ? std::string(kFormatNames[top_fmt]) : "";
  j["first_seen"] = first ? format_timestamp(*first) : "";
  j["last_seen"] = last ? format_timestamp(*last) : "";
  return j;
}

/// Scoped view of the flagged transaction: suspect(s), their transactions,
/// profiles of substantial counterparties, tokens for everyone else.
inline nlohmann::ordered_json scoped_view(const Case& c, const TransactionStore& store, const RateTable& rates,
                                          const ScopeConfig& cfg) {
  if (c.txn >= store.size()) throw NotFoundError("case " + std::to_string(c.id) + " points outside the store");
  const auto& flagged = store[c.txn];
  std::vector<AccountId> suspects;
  if (cfg.suspect != SuspectMode::Receiver) suspects.push_back(flagged.from);
  if (cfg.suspect != SuspectMode::Sender && flagged.to != flagged.from) suspects.push_back(flagged.to);
  const std::set<AccountId> suspect_set(suspects.begin(), suspects.end());

  // Per-suspect USD volume with each counterparty, both directions.
  std::set<std::size_t> rows;
  std::set<AccountId> substantial;
  for (const auto& s : suspects) {
    std::map<AccountId, std::int64_t> with;
    std::int64_t total = 0;
    for (auto p : store.positions(s)) {
      rows.insert(p);
      const auto& t = store[p];
      const auto usd = usd_paid(t, rates).micros;
      total += t.from == s && t.to == s ? 2 * usd : usd;
      if (t.from == s && t.to != s) with[t.to] += usd;
      if (t.to == s && t.from != s) with[t.from] += usd;
    }
    for (const auto& [cp, v] : with)
      if (total > 0 && static_cast<double>(v) >= cfg.substantial_fraction * static_cast<double>(total))
        substantial.insert(cp);
  }

  auto token = [&](const AccountId& a) {
    return "cp-" + hex64(Fnv1a().update(cfg.token_salt).update(a.str()).digest()).substr(0, 12);
  };
  auto party = [&](const AccountId& a) {
    return suspect_set.count(a) || substantial.count(a) ? a.str() : token(a);
  };

  nlohmann::ordered_json j;
  j["case_id"] = c.id;
  j["transaction_id"] = c.txn;
  auto js = nlohmann::ordered_json::array();
  for (const auto& s : suspects) js.push_back({{"account", s.str()}, {"profile", profile_summary(store, s, rates)}});
  j["suspects"] = js;
  auto jt = nlohmann::ordered_json::array();
  for (auto p : rows) {
    const auto& t = store[p];
    jt.push_back({{"transaction_id", p},
                  {"timestamp", format_timestamp(t.timestamp)},
                  {"from", party(t.from)},
                  {"to", party(t.to)},
                  {"amount_paid", format_fixed(t.amount_paid, scale_of(t.payment_currency))},
                  {"payment_currency", std::string(code(t.payment_currency))},
                  {"amount_received", format_fixed(t.amount_received, scale_of(t.receiving_currency))},
                  {"receiving_currency", std::string(code(t.receiving_currency))},
                  {"format", std::string(name(t.format))},
                  {"usd", usd_paid(t, rates).value()}});
  }
  j["transactions"] = jt;
  auto jc = nlohmann::ordered_json::array();
  for (const auto& cp : substantial) {
    if (suspect_set.count(cp)) continue;
    jc.push_back({{"account", cp.str()}, {"profile", profile_summary(store, cp, rates)}});
  }
  j["substantial_counterparties"] = jc;
  j["substantial_fraction"] = cfg.substantial_fraction;
  return j;
}

// ---- case book -----------------------------------------------------------------------------

struct ServiceInfo {
  std::string checkpoint_hash;
  std::string schema_version;
};

/// Cases, decisions and the decision log. Reads run concurrently; decisions
/// are serialized through one writer.
class CaseBook {
 public:
  using Clock = std::function<std::int64_t()>;

  static std::int64_t system_clock() {
    return std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch())
        .count();
  }

  CaseBook(const TransactionStore& store, const RateTable& rates, std::span<const CaseInput> inputs,
           double default_tau, ServiceInfo info, ScopeConfig scope, std::string log_path, Clock clock = system_clock)
      : store_(&store), rates_(&rates), default_tau_(default_tau), info_(std::move(info)), scope_(std::move(scope)),
        log_path_(std::move(log_path)), clock_(std::move(clock)) {
    for (const auto& in : inputs) {
      if (!in.raw || cases_.count(in.txn)) continue;
      if (in.txn >= store.size()) throw NotFoundError("scored transaction " + std::to_string(in.txn) + " not in store");
      Case c;
      c.id = c.txn = in.txn;
      c.p_hat = in.p_hat;
      c.composite = in.composite;
      c.contributions = in.contributions;
      cases_.emplace(c.id, c);
    }
    replay();
  }

  const ServiceInfo& info() const { return info_; }
  double default_tau() const { return default_tau_; }

  /// Open and decided cases whose composite clears tau, queue order.
  std::vector<Case> queue(std::optional<double> tau = std::nullopt) const {
    const double t = tau.value_or(default_tau_);
    std::shared_lock lock(mutex_);
    std::vector<Case> out;
    for (const auto& [_, c] : cases_)
      if (c.composite >= t) out.push_back(c);
    std::sort(out.begin(), out.end(), queue_before);
    return out;
  }

  Case get(std::size_t id) const {
    std::shared_lock lock(mutex_);
    auto it = cases_.find(id);
    if (it == cases_.end()) throw NotFoundError("unknown case " + std::to_string(id));
    return it->second;
  }

  nlohmann::ordered_json scope(std::size_t id) const { return scoped_view(get(id), *store_, *rates_, scope_); }

  Case decide(std::size_t id, std::string_view decision, std::string note) {
    CaseStatus status;
    if (decision == "confirmed") status = CaseStatus::Confirmed;
    else if (decision == "dismissed") status = CaseStatus::Dismissed;
    else throw FormatError("decision must be confirmed or dismissed");
    std::unique_lock lock(mutex_);
    auto it = cases_.find(id);
    if (it == cases_.end()) throw NotFoundError("unknown case " + std::to_string(id));
    if (it->second.status != CaseStatus::Open)
      throw ConflictError("case " + std::to_string(id) + " is already " + std::string(name(it->second.status)));
    const std::int64_t now = clock_();
    if (!log_path_.empty()) {
      nlohmann::ordered_json line{{"case_id", id}, {"decision", decision}, {"note", note}, {"decided_at", now}};
      std::ofstream log(log_path_, std::ios::app | std::ios::binary);
      log << line.dump() << '\n';
      log.flush();
      if (!log) throw Error("cannot append to decision log " + log_path_);
    }
    it->second.status = status;
    it->second.note = std::move(note);
    it->second.decided_at = now;
    return it->second;
  }

 private:
  void replay() {
    if (log_path_.empty()) return;
    std::ifstream in(log_path_, std::ios::binary);
    if (!in) return;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception&) {
        if (in.peek() == EOF) break;  // torn final write
        throw FormatError("decision log line " + std::to_string(n) + " is not JSON");
      }
      const auto id = j.at("case_id").get<std::size_t>();
      auto it = cases_.find(id);
      if (it == cases_.end() || it->second.status != CaseStatus::Open) continue;
      const auto d = j.at("decision").get<std::string>();
      it->second.status = d == "confirmed" ? CaseStatus::Confirmed : CaseStatus::Dismissed;
      it->second.note = j.at("note").get<std::string>();
      it->second.decided_at = j.at("decided_at").get<std::int64_t>();
    }
  }

  const TransactionStore* store_;
  const RateTable* rates_;
  double default_tau_;
  ServiceInfo info_;
  ScopeConfig scope_;
  std::string log_path_;
  Clock clock_;
  mutable std::shared_mutex mutex_;
  std::map<std::size_t, Case> cases_;
};

// ---- HTTP ------------------------------------------------------------------------------------

inline nlohmann::ordered_json case_json(const Case& c) {
  nlohmann::ordered_json j;
  j["case_id"] = c.id;
  j["transaction_id"] = c.txn;
  j["p_hat"] = c.p_hat;
  j["composite"] = c.composite;
  j["status"] = name(c.status);
  j["note"] = c.note;
  j["decided_at"] = c.decided_at ? nlohmann::ordered_json(*c.decided_at) : nlohmann::ordered_json(nullptr);
  return j;
}

inline nlohmann::ordered_json case_detail_json(const Case& c) {
  auto j = case_json(c);
  nlohmann::ordered_json contrib = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < kRiskIndicatorCount; ++i) contrib[std::string(kRiskIndicatorNames[i])] = c.contributions[i];
  j["risk_contributions"] = contrib;
  return j;
}

namespace http_detail {

inline void reply(httplib::Response& res, const CaseBook& book, int status, nlohmann::ordered_json body) {
  body["checkpoint_hash"] = book.info().checkpoint_hash;
  body["schema_version"] = book.info().schema_version;
  res.status = status;
  res.set_header("X-Checkpoint-Hash", book.info().checkpoint_hash);
  res.set_header("X-Schema-Version", book.info().schema_version);
  res.set_content(body.dump(), "application/json");
}

inline void error(httplib::Response& res, const CaseBook& book, int status, const std::string& msg) {
  reply(res, book, status, {{"error", msg}});
}

inline std::optional<std::size_t> parse_id(const std::string& s) {
  if (s.empty() || s.size() > 18 || !std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; }))
    return std::nullopt;
  return static_cast<std::size_t>(std::stoull(s));
}

template <class F>
void guarded(httplib::Response& res, const CaseBook& book, F&& f) {
  try {
    f();
  } catch (const NotFoundError& e) {
    error(res, book, 404, e.what());
  } catch (const ConflictError& e) {
    error(res, book, 409, e.what());
  } catch (const FormatError& e) {
    error(res, book, 400, e.what());
  } catch (const nlohmann::json::exception& e) {
    error(res, book, 400, std::string("malformed JSON: ") + e.what());
  }
}

}  // namespace http_detail

/// Registers the case API on `server`. The book must outlive the server.
inline void mount_case_api(httplib::Server& server, CaseBook& book) {
  using namespace http_detail;
  server.Get("/health", [&](const httplib::Request&, httplib::Response& res) {
    reply(res, book, 200, {{"status", "ok"}});
  });
  server.Get("/cases", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, book, [&] {
      std::optional<double> tau;
      if (req.has_param("tau")) {
        const auto s = req.get_param_value("tau");
        char* end = nullptr;
        const double v = std::strtod(s.c_str(), &end);
        if (s.empty() || end != s.c_str() + s.size() || std::isnan(v)) throw FormatError("tau must be a number");
        tau = v;
      }
      const double t = tau.value_or(book.default_tau());
      auto arr = nlohmann::ordered_json::array();
      for (const auto& c : book.queue(t)) arr.push_back(case_json(c));
      nlohmann::ordered_json body;
      body["tau"] = std::isinf(t) ? nlohmann::ordered_json(t < 0 ? "-inf" : "inf") : nlohmann::ordered_json(t);
      body["cases"] = arr;
      reply(res, book, 200, body);
    });
  });
  server.Get(R"(/cases/([^/]+)/scope)", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, book, [&] {
      const auto id = parse_id(req.matches[1]);
      if (!id) throw NotFoundError("unknown case " + std::string(req.matches[1]));
      reply(res, book, 200, book.scope(*id));
    });
  });
  server.Get(R"(/cases/([^/]+))", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, book, [&] {
      const auto id = parse_id(req.matches[1]);
      if (!id) throw NotFoundError("unknown case " + std::string(req.matches[1]));
      reply(res, book, 200, case_detail_json(book.get(*id)));
    });
  });
  server.Post(R"(/cases/([^/]+)/decision)", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, book, [&] {
      const auto id = parse_id(req.matches[1]);
      if (!id) throw NotFoundError("unknown case " + std::string(req.matches[1]));
      const auto body = nlohmann::json::parse(req.body);
      if (!body.is_object() || !body.contains("decision") || !body["decision"].is_string())
        throw FormatError("body must be an object with a string decision");
      std::string note;
      if (body.contains("note")) {
        if (!body["note"].is_string()) throw FormatError("note must be a string");
        note = body["note"].get<std::string>();
      }
      reply(res, book, 200, case_detail_json(book.decide(*id, body["decision"].get<std::string>(), note)));
    });
  });
}

}  // namespace crpaml
