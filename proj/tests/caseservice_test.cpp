#include "crpaml/caseservice.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <thread>

#include "testdata.hpp"

namespace crpaml {
namespace {

namespace fs = std::filesystem;

std::string temp_path(const std::string& name) {
  auto p = fs::temp_directory_path() / ("crpaml_case_" + std::to_string(::getpid()) + "_" + name);
  fs::remove(p);
  return p.string();
}

struct World {
  RateTable rates = testing::exact_rates();
  TransactionStore store;
  std::vector<CaseInput> inputs;
};

World random_world(std::uint64_t seed, std::size_t accounts, std::size_t txns, std::size_t scored) {
  World w;
  Rng rng(seed);
  testing::RandomTxnConfig cfg;
  cfg.accounts = accounts;
  cfg.txns = txns;
  w.store = TransactionStore::build(testing::random_records(rng, cfg));
  for (std::size_t i = 0; i < scored; ++i) {
    CaseInput in;
    in.txn = rng.below(w.store.size());
    in.p_hat = rng.uniform();
    in.raw = in.p_hat >= 0.5;
    in.composite = std::round(rng.uniform(-6.0, 6.0) * 4) / 4;  // many ties
    for (auto& c : in.contributions) c = rng.uniform(-2.0, 2.0);
    w.inputs.push_back(in);
  }
  return w;
}

CaseBook book_for(const World& w, std::string log = "", double tau = 0.0, ScopeConfig scope = {}) {
  return CaseBook(w.store, w.rates, w.inputs, tau, {"ckpt0123", "schema4567"}, scope, std::move(log),
                  [] { return std::int64_t{1700000000}; });
}

// ---- flagging and queue --------------------------------------------------------------------

TEST(FlagCases, NoPositivesGivesEmptyQueue) {
  std::vector<Prediction> preds(10);
  for (std::size_t i = 0; i < preds.size(); ++i) preds[i].txn = i;
  EXPECT_TRUE(flag_cases(preds).empty());
  EXPECT_TRUE(flag_cases(std::span<const Prediction>{}).empty());
}

TEST(FlagCases, OneCasePerFinalPositiveInDescendingComposite) {
  Rng rng(11);
  std::vector<Prediction> preds;
  std::set<std::size_t> positives;
  std::size_t repeats = 0;
  for (int i = 0; i < 200; ++i) {
    Prediction p;
    p.txn = rng.below(150);
    p.raw = rng.uniform() < 0.6;
    p.final_decision = p.raw && rng.uniform() < 0.7;
    p.composite = std::round(rng.uniform(-3, 3) * 2) / 2;
    if (p.final_decision && !positives.insert(p.txn).second) ++repeats;
    preds.push_back(p);
  }
  std::size_t rejected = 0;
  const auto cases = flag_cases(preds, &rejected);
  EXPECT_EQ(cases.size(), positives.size());
  EXPECT_EQ(rejected, repeats);
  std::set<std::size_t> ids;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    EXPECT_EQ(cases[i].id, cases[i].txn);
    EXPECT_EQ(cases[i].status, CaseStatus::Open);
    ids.insert(cases[i].id);
    if (i) {
      EXPECT_GE(cases[i - 1].composite, cases[i].composite);
      if (cases[i - 1].composite == cases[i].composite) {
        EXPECT_LT(cases[i - 1].txn, cases[i].txn);
      }
    }
  }
  EXPECT_EQ(ids, positives);
}

TEST(CaseQueue, HigherTauGivesSubset) {
  const auto w = random_world(3, 50, 2000, 400);
  const auto book = book_for(w);
  std::set<std::size_t> raw;
  for (const auto& in : w.inputs)
    if (in.raw) raw.insert(in.txn);
  const auto all = book.queue(-std::numeric_limits<double>::infinity());
  EXPECT_EQ(all.size(), raw.size());
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    double a = rng.uniform(-7, 7), b = rng.uniform(-7, 7);
    if (a > b) std::swap(a, b);
    const auto qa = book.queue(a), qb = book.queue(b);
    std::set<std::size_t> sa;
    for (const auto& c : qa) sa.insert(c.id);
    for (const auto& c : qb) EXPECT_TRUE(sa.count(c.id));
    for (const auto& c : qa) EXPECT_GE(c.composite, a);
    for (std::size_t i = 1; i < qb.size(); ++i) EXPECT_TRUE(!queue_before(qb[i], qb[i - 1]));
  }
  EXPECT_TRUE(book.queue(100.0).empty());
}

TEST(CaseQueue, DefaultTauApplies) {
  const auto w = random_world(5, 30, 500, 100);
  const auto book = book_for(w, "", 1.5);
  EXPECT_EQ(book.queue().size(), book.queue(1.5).size());
  for (const auto& c : book.queue()) EXPECT_GE(c.composite, 1.5);
}

// ---- scoped view ---------------------------------------------------------------------------

TransactionRecord txn(std::int64_t ts, AccountId from, AccountId to, std::int64_t cents) {
  TransactionRecord r;
  r.timestamp = ts;
  r.from = std::move(from);
  r.to = std::move(to);
  r.amount_paid = r.amount_received = cents;
  return r;
}

TEST(ScopedView, SingleCounterpartyIsFullyVisible) {
  World w;
  w.store = TransactionStore::build({txn(100, {"001", "A"}, {"002", "B"}, 50000)});
  w.inputs.push_back({0, 0.9, true, 1.0, {}});
  const auto view = book_for(w).scope(0);
  EXPECT_EQ(view["suspects"].size(), 1u);
  EXPECT_EQ(view["suspects"][0]["account"], "001:A");
  ASSERT_EQ(view["transactions"].size(), 1u);
  EXPECT_EQ(view["transactions"][0]["to"], "002:B");
  ASSERT_EQ(view["substantial_counterparties"].size(), 1u);
  EXPECT_EQ(view["substantial_counterparties"][0]["account"], "002:B");
  EXPECT_EQ(view["substantial_counterparties"][0]["profile"]["n_in"], 1);
  EXPECT_EQ(view.dump().find("is_laundering"), std::string::npos);
}

TEST(ScopedView, SmallCounterpartyGetsToken) {
  World w;
  // B carries 99% of A's volume, C carries 1%.
  w.store = TransactionStore::build({txn(100, {"001", "A"}, {"002", "B"}, 990000),
                                     txn(200, {"003", "C"}, {"001", "A"}, 10000),
                                     txn(300, {"003", "C"}, {"004", "D"}, 10000)});
  w.inputs.push_back({0, 0.9, true, 1.0, {}});
  const auto view = book_for(w).scope(0);
  const auto text = view.dump();
  EXPECT_NE(text.find("002:B"), std::string::npos);
  EXPECT_EQ(text.find("003:C"), std::string::npos);
  EXPECT_EQ(text.find("004:D"), std::string::npos);
  ASSERT_EQ(view["transactions"].size(), 2u);
  const std::string tok = view["transactions"][1]["from"];
  EXPECT_EQ(tok.rfind("cp-", 0), 0u);

  ScopeConfig other;
  other.token_salt = "pepper";
  const auto view2 = book_for(w, "", 0.0, other).scope(0);
  EXPECT_NE(view2["transactions"][1]["from"], tok);
  EXPECT_EQ(book_for(w).scope(0)["transactions"][1]["from"], tok);
}

TEST(ScopedView, ReceiverAndBothModes) {
  World w;
  w.store = TransactionStore::build({txn(100, {"001", "A"}, {"002", "B"}, 5000),
                                     txn(200, {"002", "B"}, {"005", "E"}, 5000)});
  w.inputs.push_back({0, 0.9, true, 1.0, {}});
  ScopeConfig s;
  s.suspect = SuspectMode::Receiver;
  auto v = book_for(w, "", 0.0, s).scope(0);
  EXPECT_EQ(v["suspects"][0]["account"], "002:B");
  EXPECT_EQ(v["transactions"].size(), 2u);
  s.suspect = SuspectMode::Both;
  v = book_for(w, "", 0.0, s).scope(0);
  EXPECT_EQ(v["suspects"].size(), 2u);
  EXPECT_THROW(parse_suspect_mode("nobody"), ConfigError);
}

// Exhaustive scan: every identity appearing in any view must be the suspect or
// one of its direct counterparties, and counterparties appear in clear only
// when they carry at least 5% of the suspect's volume.
TEST(ScopedView, LeastPrivilegeOverThousandAccounts) {
  World w;
  Rng rng(21);
  testing::RandomTxnConfig cfg;
  cfg.accounts = 1000;
  cfg.txns = 12000;
  w.store = TransactionStore::build(testing::random_records(rng, cfg));
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < cfg.accounts; ++i) ids.push_back(testing::account_for(i).str());
  for (std::size_t k = 0; k < 1000; ++k) w.inputs.push_back({rng.below(w.store.size()), 0.9, true, 0.0, {}});
  const auto book = book_for(w);

  std::size_t requests = 0, tokens = 0;
  for (const auto& in : w.inputs) {
    const auto text = book.scope(in.txn).dump();
    ++requests;
    const std::string suspect = w.store[in.txn].from.str();
    std::map<std::string, std::int64_t> vol;
    std::int64_t total = 0;
    for (const auto& r : w.store.records()) {
      const auto f = r.from.str(), t = r.to.str();
      if (f != suspect && t != suspect) continue;
      const auto usd = usd_paid(r, w.rates).micros;
      total += usd;
      vol[f == suspect ? t : f] += usd;
    }
    for (const auto& id : ids) {
      const bool present = text.find("\"" + id + "\"") != std::string::npos;
      if (id == suspect) {
        EXPECT_TRUE(present);
        continue;
      }
      auto it = vol.find(id);
      const bool substantial = it != vol.end() && it->second * 20 >= total;
      ASSERT_EQ(present, substantial) << id << " in view of " << suspect;
    }
    for (std::size_t p = text.find("\"cp-"); p != std::string::npos; p = text.find("\"cp-", p + 1)) ++tokens;
    EXPECT_EQ(text.find("is_laundering"), std::string::npos);
  }
  EXPECT_EQ(requests, 1000u);
  EXPECT_GT(tokens, 0u);
}

// ---- decisions -----------------------------------------------------------------------------

TEST(Decisions, ImmutableOnceMade) {
  const auto w = random_world(7, 20, 300, 60);
  auto book = book_for(w);
  const auto q = book.queue(-std::numeric_limits<double>::infinity());
  ASSERT_GE(q.size(), 2u);
  const auto c = book.decide(q[0].id, "confirmed", "structuring");
  EXPECT_EQ(c.status, CaseStatus::Confirmed);
  EXPECT_EQ(c.decided_at, 1700000000);
  EXPECT_THROW(book.decide(q[0].id, "dismissed", ""), ConflictError);
  EXPECT_EQ(book.get(q[0].id).note, "structuring");
  EXPECT_THROW(book.decide(q[1].id, "maybe", ""), FormatError);
  EXPECT_EQ(book.get(q[1].id).status, CaseStatus::Open);
  EXPECT_THROW(book.decide(w.store.size() + 5, "confirmed", ""), NotFoundError);
  EXPECT_THROW(book.get(w.store.size() + 5), NotFoundError);
}

TEST(Decisions, LogReplayRestoresState) {
  const auto w = random_world(8, 20, 300, 80);
  const auto log = temp_path("replay.jsonl");
  std::map<std::size_t, CaseStatus> expect;
  {
    auto book = book_for(w, log);
    const auto q = book.queue(-std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < q.size(); i += 3) {
      const bool yes = i % 2 == 0;
      book.decide(q[i].id, yes ? "confirmed" : "dismissed", "n" + std::to_string(i));
      expect[q[i].id] = yes ? CaseStatus::Confirmed : CaseStatus::Dismissed;
    }
  }
  {
    std::ofstream torn(log, std::ios::app);
    torn << "{\"case_id\": 1, \"decis";
  }
  const auto book = book_for(w, log);
  for (const auto& c : book.queue(-std::numeric_limits<double>::infinity())) {
    auto it = expect.find(c.id);
    EXPECT_EQ(c.status, it == expect.end() ? CaseStatus::Open : it->second);
    if (it != expect.end()) {
      EXPECT_EQ(c.decided_at, 1700000000);
    }
  }
  fs::remove(log);
}

// ---- HTTP ----------------------------------------------------------------------------------

struct Served {
  httplib::Server server;
  std::thread thread;
  int port = 0;
  explicit Served(CaseBook& book) {
    mount_case_api(server, book);
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~Served() {
    server.stop();
    thread.join();
  }
};

nlohmann::json checked(const httplib::Result& r, int status) {
  EXPECT_TRUE(r);
  if (!r) return {};
  EXPECT_EQ(r->status, status) << r->body;
  EXPECT_EQ(r->get_header_value("X-Checkpoint-Hash"), "ckpt0123");
  EXPECT_EQ(r->get_header_value("X-Schema-Version"), "schema4567");
  auto j = nlohmann::json::parse(r->body);
  EXPECT_EQ(j["checkpoint_hash"], "ckpt0123");
  EXPECT_EQ(j["schema_version"], "schema4567");
  return j;
}

TEST(CaseApi, EndpointsAndStatusCodes) {
  const auto w = random_world(9, 30, 600, 120);
  auto book = book_for(w, "", 0.0);
  Served s(book);
  httplib::Client cli("127.0.0.1", s.port);

  EXPECT_EQ(checked(cli.Get("/health"), 200)["status"], "ok");
  const auto q = checked(cli.Get("/cases"), 200);
  EXPECT_EQ(q["cases"].size(), book.queue().size());
  const auto all = checked(cli.Get("/cases?tau=-inf"), 200);
  EXPECT_EQ(all["tau"], "-inf");
  EXPECT_GE(all["cases"].size(), q["cases"].size());
  checked(cli.Get("/cases?tau=abc"), 400);
  checked(cli.Get("/cases?tau=nan"), 400);

  ASSERT_FALSE(q["cases"].empty());
  const std::size_t id = q["cases"][0]["case_id"];
  const auto path = "/cases/" + std::to_string(id);
  const auto detail = checked(cli.Get(path), 200);
  EXPECT_EQ(detail["risk_contributions"].size(), kRiskIndicatorCount);
  EXPECT_EQ(detail["status"], "open");
  EXPECT_FALSE(checked(cli.Get(path + "/scope"), 200)["transactions"].empty());
  checked(cli.Get("/cases/99999999"), 404);
  checked(cli.Get("/cases/abc"), 404);
  checked(cli.Get("/cases/abc/scope"), 404);

  checked(cli.Post(path + "/decision", "not json", "application/json"), 400);
  checked(cli.Post(path + "/decision", R"({"decision": 3})", "application/json"), 400);
  checked(cli.Post(path + "/decision", R"({"decision": "perhaps"})", "application/json"), 400);
  checked(cli.Post("/cases/99999999/decision", R"({"decision": "confirmed"})", "application/json"), 404);
  const auto ok = checked(cli.Post(path + "/decision", R"({"decision": "confirmed", "note": "x"})", "application/json"), 200);
  EXPECT_EQ(ok["status"], "confirmed");
  checked(cli.Post(path + "/decision", R"({"decision": "dismissed"})", "application/json"), 409);
  EXPECT_EQ(checked(cli.Get(path), 200)["status"], "confirmed");
}

TEST(CaseApi, ConcurrentClientsDecideEachCaseOnce) {
  World w;
  Rng rng(10);
  testing::RandomTxnConfig cfg;
  cfg.accounts = 40;
  cfg.txns = 400;
  w.store = TransactionStore::build(testing::random_records(rng, cfg));
  for (std::size_t i = 0; i < 50; ++i) w.inputs.push_back({i * 7, 0.9, true, static_cast<double>(i), {}});
  const auto log = temp_path("concurrent.jsonl");
  auto book = book_for(w, log);
  Served s(book);

  std::atomic<int> ok{0}, conflict{0}, other{0};
  std::vector<std::thread> clients;
  for (int c = 0; c < 4; ++c) {
    clients.emplace_back([&, c] {
      httplib::Client cli("127.0.0.1", s.port);
      Rng order(100 + static_cast<std::uint64_t>(c));
      std::vector<std::size_t> ids;
      for (const auto& in : w.inputs) ids.push_back(in.txn);
      order.shuffle(ids);
      for (auto id : ids) {
        const std::string body = std::string(R"({"decision": ")") + (c % 2 ? "dismissed" : "confirmed") +
                                 R"(", "note": "client )" + std::to_string(c) + "\"}";
        auto r = cli.Post("/cases/" + std::to_string(id) + "/decision", body, "application/json");
        if (r && r->status == 200) ++ok;
        else if (r && r->status == 409) ++conflict;
        else ++other;
      }
    });
  }
  for (auto& t : clients) t.join();
  EXPECT_EQ(ok, 50);
  EXPECT_EQ(conflict, 150);
  EXPECT_EQ(other, 0);

  std::ifstream in(log);
  std::string line;
  std::map<std::size_t, nlohmann::json> logged;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    ++lines;
    auto j = nlohmann::json::parse(line);
    logged[j["case_id"].get<std::size_t>()] = j;
  }
  EXPECT_EQ(lines, 50u);
  EXPECT_EQ(logged.size(), 50u);
  for (const auto& [id, j] : logged) {
    const auto c = book.get(id);
    EXPECT_EQ(j["decision"], name(c.status));
    EXPECT_EQ(j["note"], c.note);
  }
  fs::remove(log);
}

}  // namespace
}  // namespace crpaml
