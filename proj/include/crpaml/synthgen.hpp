#pragma once

// Labeled synthetic transactions with laundering topologies embedded in
// heavy-tailed background traffic.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "crpaml/common.hpp"
#include "crpaml/txstore.hpp"
#include "json.hpp"

namespace crpaml {

enum class PatternKind : std::uint8_t { FanIn, FanOut, GatherScatter, Cycle, Stack };
inline constexpr std::size_t kPatternKindCount = 5;
inline constexpr std::array<std::string_view, kPatternKindCount> kPatternKindNames{"fan_in", "fan_out",
                                                                                   "gather_scatter", "cycle", "stack"};
/// Smallest transaction count each topology can be built with.
inline constexpr std::array<std::size_t, kPatternKindCount> kPatternMinSize{3, 3, 6, 3, 3};

inline std::optional<PatternKind> parse_pattern_kind(std::string_view s) {
  for (std::size_t i = 0; i < kPatternKindCount; ++i)
    if (s == kPatternKindNames[i]) return static_cast<PatternKind>(i);
  return std::nullopt;
}

struct SynthConfig {
  std::size_t n_accounts = 2000;
  std::size_t n_background_txns = 49'900;  // every unlabeled row, decoys included
  double illicit_ratio = 0.002;
  std::array<double, kPatternKindCount> pattern_mix{1, 1, 1, 1, 1};
  std::uint64_t seed = 7;
  std::int64_t start_time = 1661990400;  // 2022-09-01 00:00 UTC
  std::int64_t time_span = 10 * 86400;
  double decoy_ratio = 2.0;     // unlabeled look-alikes per laundering row
  double mule_fraction = 0.04;  // share of accounts held in the mule pool
  std::size_t max_extra_size = 5;  // pattern size drawn from [min, min + this]

  /// Laundering rows needed so that labels / total ≈ illicit_ratio.
  std::size_t illicit_target() const {
    return static_cast<std::size_t>(
        std::llround(illicit_ratio * static_cast<double>(n_background_txns) / (1.0 - illicit_ratio)));
  }

  void validate() const {
    if (!(illicit_ratio > 0.0 && illicit_ratio < 1.0)) throw ConfigError("illicit_ratio must lie in (0, 1)");
    double total = 0;
    for (double w : pattern_mix) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("pattern weights must be finite and non-negative");
      total += w;
    }
    if (!(total > 0)) throw ConfigError("pattern weights must not all be zero");
    if (n_accounts < 20) throw ConfigError("need at least 20 accounts");
    if (time_span < 3600) throw ConfigError("time_span must cover at least one hour");
    if (!(decoy_ratio >= 0) || !(mule_fraction > 0 && mule_fraction < 0.5))
      throw ConfigError("decoy_ratio must be >= 0 and mule_fraction in (0, 0.5)");
    std::size_t min_size = SIZE_MAX;
    for (std::size_t k = 0; k < kPatternKindCount; ++k)
      if (pattern_mix[k] > 0) min_size = std::min(min_size, kPatternMinSize[k]);
    if (illicit_target() < min_size)
      throw ConfigError("illicit_ratio x n_background_txns yields " + std::to_string(illicit_target()) +
                        " laundering rows, below the minimum pattern size " + std::to_string(min_size));
    if (static_cast<double>(n_background_txns) < 2.0 * decoy_ratio * static_cast<double>(illicit_target()))
      throw ConfigError("too few background transactions for the requested decoys");
  }

  std::uint64_t hash() const {
    Fnv1a h;
    h.update("synth-v1").update_u64(n_accounts).update_u64(n_background_txns).update_f64(illicit_ratio);
    for (double w : pattern_mix) h.update_f64(w);
    h.update_u64(seed).update_u64(static_cast<std::uint64_t>(start_time)).update_u64(static_cast<std::uint64_t>(time_span));
    h.update_f64(decoy_ratio).update_f64(mule_fraction).update_u64(max_extra_size);
    return h.digest();
  }
};

struct PatternInstance {
  PatternKind kind = PatternKind::FanIn;
  std::vector<AccountId> member_accounts;  // distinct, in first-appearance order
  std::vector<std::size_t> member_txns;    // store positions, in time order
  bool operator==(const PatternInstance&) const = default;
};

struct SynthResult {
  TransactionStore store;
  std::vector<PatternInstance> patterns;
};

namespace synth_detail {

struct Account {
  AccountId id;
  double activity = 1.0;
  Currency currency = Currency::UsDollar;
  PaymentFormat format = PaymentFormat::Cheque;
  double log_median_usd = 0.0;
  std::vector<std::size_t> partners;
};

struct Draft {
  std::int64_t timestamp;
  std::size_t from, to;
  double usd;
  Currency pay, recv;
  PaymentFormat format;
  int pattern = -1;
};

inline constexpr std::array<double, kFormatCount> kBackgroundFormatMix{0.25, 0.22, 0.15, 0.2, 0.1, 0.02, 0.06};

inline std::int64_t minute_in(Rng& rng, std::int64_t start, std::int64_t span, double lo, double hi) {
  const double u = rng.uniform(lo, hi);
  return start + 60 * static_cast<std::int64_t>(std::floor(u * static_cast<double>(span) / 60.0));
}

inline Currency fiat(Rng& rng) {
  if (rng.bernoulli(0.4)) return Currency::UsDollar;
  for (;;) {
    const auto c = static_cast<Currency>(rng.below(kCurrencyCount));
    if (c != Currency::Bitcoin) return c;
  }
}

/// Units of the currency's fixed-point scale for a USD value.
inline std::int64_t units_for(double usd, Currency c, const RateTable& rates) {
  const double units = usd / rates.rate(c) * static_cast<double>(pow10(scale_of(c)));
  return std::max<std::int64_t>(1, static_cast<std::int64_t>(std::llround(units)));
}

inline double log_uniform(Rng& rng, double lo, double hi) { return std::exp(rng.uniform(std::log(lo), std::log(hi))); }

}  // namespace synth_detail

inline SynthResult generate(const SynthConfig& cfg, const RateTable& rates) {
  using namespace synth_detail;
  cfg.validate();
  const std::size_t n_illicit = cfg.illicit_target();
  const auto n_decoys = static_cast<std::size_t>(std::llround(cfg.decoy_ratio * static_cast<double>(n_illicit)));
  const std::size_t n_plain = cfg.n_background_txns - n_decoys;

  // ---- accounts
  Rng arng(derive_seed(cfg.seed, "accounts"));
  const std::size_t n_banks = std::max<std::size_t>(3, cfg.n_accounts / 40);
  const auto n_mules = std::max<std::size_t>(
      12, static_cast<std::size_t>(std::ceil(cfg.mule_fraction * static_cast<double>(cfg.n_accounts))));
  const std::uint32_t salt = static_cast<std::uint32_t>(derive_seed(cfg.seed, "account-salt"));
  std::vector<Account> accounts(cfg.n_accounts);
  for (std::size_t i = 0; i < cfg.n_accounts; ++i) {
    Account& a = accounts[i];
    char bank[32], acct[32];
    std::snprintf(bank, sizeof bank, "%03zu", 1 + arng.below(n_banks));
    std::snprintf(acct, sizeof acct, "8%08X", static_cast<unsigned>((static_cast<std::uint32_t>(i) * 2654435761u) ^ salt));
    a.id = {bank, acct};
    a.activity = std::pow(1.0 - arng.uniform(), -1.0 / 1.8);  // Pareto, x_m = 1
    a.format = static_cast<PaymentFormat>(arng.weighted(kBackgroundFormatMix));
    if (a.format == PaymentFormat::Reinvestment) a.format = PaymentFormat::Cheque;
    a.currency = a.format == PaymentFormat::Bitcoin ? Currency::Bitcoin : fiat(arng);
    a.log_median_usd = std::log(250.0) + 1.0 * arng.normal();
  }
  // The last n_mules accounts form the mule pool: barely active on their own.
  const std::size_t first_mule = cfg.n_accounts - n_mules;
  for (std::size_t i = first_mule; i < cfg.n_accounts; ++i) accounts[i].activity = 0.03;

  std::vector<double> weights(cfg.n_accounts);
  for (std::size_t i = 0; i < cfg.n_accounts; ++i) weights[i] = accounts[i].activity;

  std::vector<Draft> drafts;
  drafts.reserve(cfg.n_background_txns + n_illicit);

  // ---- plain background
  Rng brng(derive_seed(cfg.seed, "background"));
  for (std::size_t t = 0; t < n_plain; ++t) {
    const std::size_t from = brng.weighted(weights);
    Account& s = accounts[from];
    Draft d{};
    d.timestamp = minute_in(brng, cfg.start_time, cfg.time_span, 0.0, 1.0);
    d.from = from;
    d.format = brng.bernoulli(0.8) ? s.format : static_cast<PaymentFormat>(brng.weighted(kBackgroundFormatMix));
    if (d.format == PaymentFormat::Reinvestment) {
      d.to = from;
    } else if (!s.partners.empty() && brng.bernoulli(0.6)) {
      d.to = s.partners[brng.below(s.partners.size())];
    } else {
      do d.to = brng.weighted(weights);
      while (d.to == from);
      s.partners.push_back(d.to);
    }
    if (d.format == PaymentFormat::Bitcoin) {
      d.pay = d.recv = Currency::Bitcoin;
    } else {
      d.pay = s.currency == Currency::Bitcoin || brng.bernoulli(0.1) ? fiat(brng) : s.currency;
      const Currency rc = accounts[d.to].currency;
      d.recv = brng.bernoulli(0.95) || rc == Currency::Bitcoin ? d.pay : rc;
    }
    d.usd = std::exp(s.log_median_usd + 1.1 * brng.normal());
    drafts.push_back(d);
  }

  // ---- laundering look-alikes between ordinary accounts
  Rng drng(derive_seed(cfg.seed, "decoys"));
  auto launder_style = [&](Rng& rng, Draft& d) {
    d.format = rng.bernoulli(0.85) ? PaymentFormat::ACH
                                   : std::array{PaymentFormat::Cheque, PaymentFormat::CreditCard, PaymentFormat::Cash,
                                                PaymentFormat::Bitcoin}[rng.below(4)];
  };
  for (std::size_t t = 0; t < n_decoys; ++t) {
    Draft d{};
    d.from = drng.below(first_mule);
    do d.to = drng.below(first_mule);
    while (d.to == d.from);
    d.timestamp = minute_in(drng, cfg.start_time, cfg.time_span, 0.15, 0.95);
    launder_style(drng, d);
    d.pay = d.recv = d.format == PaymentFormat::Bitcoin ? Currency::Bitcoin : fiat(drng);
    d.usd = log_uniform(drng, 1000.0, 25000.0);
    drafts.push_back(d);
  }

  // ---- patterns
  Rng prng(derive_seed(cfg.seed, "patterns"));
  std::size_t min_mix = SIZE_MAX;
  for (std::size_t k = 0; k < kPatternKindCount; ++k)
    if (cfg.pattern_mix[k] > 0) min_mix = std::min(min_mix, kPatternMinSize[k]);
  std::vector<PatternKind> kinds;
  std::size_t remaining = n_illicit;
  while (remaining > 0) {
    std::array<double, kPatternKindCount> w{};
    for (std::size_t k = 0; k < kPatternKindCount; ++k)
      w[k] = kPatternMinSize[k] <= remaining ? cfg.pattern_mix[k] : 0.0;
    const auto kind = static_cast<PatternKind>(prng.weighted(w));
    const std::size_t lo = kPatternMinSize[static_cast<std::size_t>(kind)];
    std::size_t size = std::min(remaining, lo + prng.below(cfg.max_extra_size + 1));
    if (remaining - size < min_mix) size = remaining;
    remaining -= size;

    // Members: mostly from the mule pool, distinct within the instance.
    const std::size_t n_members = kind == PatternKind::Cycle ? size : size + 1;
    std::vector<std::size_t> members;
    std::set<std::size_t> used;
    while (members.size() < n_members) {
      const bool mule = prng.bernoulli(0.9) && used.size() < n_mules;
      const std::size_t m = mule ? first_mule + prng.below(n_mules) : prng.below(first_mule);
      if (used.insert(m).second) members.push_back(m);
    }

    const int pid = static_cast<int>(kinds.size());
    kinds.push_back(kind);
    Draft base{};
    base.pattern = pid;
    launder_style(prng, base);
    base.pay = base.recv = base.format == PaymentFormat::Bitcoin ? Currency::Bitcoin : fiat(prng);
    std::int64_t clock = minute_in(prng, cfg.start_time, cfg.time_span, 0.15, 0.9);
    auto emit = [&](std::size_t from, std::size_t to, double usd) {
      Draft d = base;
      d.from = from;
      d.to = to;
      d.usd = usd;
      clock += 60 * static_cast<std::int64_t>(5 + prng.below(120));
      d.timestamp = std::min(clock, cfg.start_time + cfg.time_span - 60);
      drafts.push_back(d);
    };
    const double amount = log_uniform(prng, 1000.0, 25000.0);
    switch (kind) {
      case PatternKind::FanIn:
        for (std::size_t i = 0; i < size; ++i) emit(members[i], members[size], log_uniform(prng, 1000.0, 25000.0));
        break;
      case PatternKind::FanOut:
        for (std::size_t i = 0; i < size; ++i) emit(members[0], members[i + 1], log_uniform(prng, 1000.0, 25000.0));
        break;
      case PatternKind::GatherScatter: {
        const std::size_t in = size / 2, out = size - in;
        const std::size_t hub = members[in];
        for (std::size_t i = 0; i < in; ++i) emit(members[i], hub, log_uniform(prng, 1000.0, 25000.0));
        for (std::size_t i = 0; i < out; ++i) emit(hub, members[in + 1 + i], log_uniform(prng, 1000.0, 25000.0));
        break;
      }
      case PatternKind::Cycle:
        for (std::size_t i = 0; i < size; ++i)
          emit(members[i], members[(i + 1) % size], amount * std::pow(0.97, static_cast<double>(i)));
        break;
      case PatternKind::Stack:
        for (std::size_t i = 0; i < size; ++i)
          emit(members[i], members[i + 1], amount * std::pow(0.97, static_cast<double>(i)));
        break;
    }
  }

  // ---- materialize in time order
  std::vector<std::size_t> order(drafts.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return drafts[a].timestamp < drafts[b].timestamp; });
  std::vector<TransactionRecord> records;
  records.reserve(drafts.size());
  std::vector<PatternInstance> patterns(kinds.size());
  for (std::size_t k = 0; k < kinds.size(); ++k) patterns[k].kind = kinds[k];
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const Draft& d = drafts[order[pos]];
    TransactionRecord r;
    r.timestamp = d.timestamp;
    r.from = accounts[d.from].id;
    r.to = accounts[d.to].id;
    r.payment_currency = d.pay;
    r.receiving_currency = d.recv;
    r.amount_paid = units_for(d.usd, d.pay, rates);
    r.amount_received = units_for(d.usd, d.recv, rates);
    r.format = d.format;
    r.is_laundering = d.pattern >= 0;
    if (d.pattern >= 0) {
      auto& p = patterns[static_cast<std::size_t>(d.pattern)];
      p.member_txns.push_back(pos);
      for (const AccountId* a : {&r.from, &r.to})
        if (std::find(p.member_accounts.begin(), p.member_accounts.end(), *a) == p.member_accounts.end())
          p.member_accounts.push_back(*a);
    }
    records.push_back(std::move(r));
  }
  return {TransactionStore::build(std::move(records)), std::move(patterns)};
}

// ---- sidecar ----------------------------------------------------------------------------

inline nlohmann::ordered_json patterns_to_json(const std::vector<PatternInstance>& patterns, const SynthConfig& cfg) {
  nlohmann::ordered_json j;
  j["config_hash"] = hex64(cfg.hash());
  j["seed"] = cfg.seed;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& p : patterns) {
    nlohmann::ordered_json e;
    e["kind"] = kPatternKindNames[static_cast<std::size_t>(p.kind)];
    auto accts = nlohmann::ordered_json::array();
    for (const auto& a : p.member_accounts) accts.push_back(a.str());
    e["accounts"] = accts;
    e["txns"] = p.member_txns;
    arr.push_back(e);
  }
  j["patterns"] = arr;
  return j;
}

inline std::vector<PatternInstance> patterns_from_json(const nlohmann::json& j) {
  std::vector<PatternInstance> out;
  try {
    for (const auto& e : j.at("patterns")) {
      PatternInstance p;
      const auto kind = parse_pattern_kind(e.at("kind").get<std::string>());
      if (!kind) throw FormatError("pattern sidecar: unknown kind");
      p.kind = *kind;
      for (const auto& a : e.at("accounts")) {
        const auto s = a.get<std::string>();
        const auto colon = s.find(':');
        if (colon == std::string::npos) throw FormatError("pattern sidecar: bad account " + s);
        p.member_accounts.push_back({s.substr(0, colon), s.substr(colon + 1)});
      }
      p.member_txns = e.at("txns").get<std::vector<std::size_t>>();
      out.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("pattern sidecar: ") + e.what());
  }
  return out;
}

// ---- validation -----------------------------------------------------------------------------

struct PatternViolation {
  std::size_t instance;  // SIZE_MAX for store-level findings
  std::string message;
};

struct ValidationReport {
  std::vector<PatternViolation> violations;
  bool ok() const { return violations.empty(); }
};

inline ValidationReport validate_patterns(const TransactionStore& store, const std::vector<PatternInstance>& patterns) {
  ValidationReport rep;
  auto fail = [&](std::size_t i, std::string msg) { rep.violations.push_back({i, std::move(msg)}); };
  std::vector<std::size_t> owner_count(store.size(), 0);
  for (std::size_t pi = 0; pi < patterns.size(); ++pi) {
    const auto& p = patterns[pi];
    const auto name = std::string(kPatternKindNames[static_cast<std::size_t>(p.kind)]);
    std::vector<const TransactionRecord*> tx;
    bool dangling = false;
    for (auto id : p.member_txns) {
      if (id >= store.size()) {
        fail(pi, "dangling transaction id " + std::to_string(id));
        dangling = true;
        continue;
      }
      ++owner_count[id];
      tx.push_back(&store[id]);
      if (!store[id].is_laundering) fail(pi, "member transaction " + std::to_string(id) + " is not labeled");
    }
    if (dangling) continue;
    std::set<AccountId> endpoints;
    for (auto* t : tx) {
      endpoints.insert(t->from);
      endpoints.insert(t->to);
      if (t->from == t->to) fail(pi, name + ": self-transfer inside a pattern");
    }
    if (endpoints != std::set<AccountId>(p.member_accounts.begin(), p.member_accounts.end()) ||
        endpoints.size() != p.member_accounts.size())
      fail(pi, name + ": member accounts differ from transaction endpoints");
    const std::size_t n = tx.size();
    if (n < kPatternMinSize[static_cast<std::size_t>(p.kind)]) {
      fail(pi, name + ": too few transactions");
      continue;
    }
    for (std::size_t i = 1; i < n; ++i)
      if (tx[i]->timestamp < tx[i - 1]->timestamp) fail(pi, name + ": transactions out of time order");
    switch (p.kind) {
      case PatternKind::FanIn:
      case PatternKind::FanOut: {
        const bool in = p.kind == PatternKind::FanIn;
        const AccountId& center = in ? tx[0]->to : tx[0]->from;
        std::set<AccountId> spokes;
        for (auto* t : tx) {
          if ((in ? t->to : t->from) != center) fail(pi, name + ": transactions do not share one " + (in ? "receiver" : "sender"));
          spokes.insert(in ? t->from : t->to);
        }
        if (spokes.size() != n || spokes.count(center)) fail(pi, name + ": spokes are not distinct");
        break;
      }
      case PatternKind::GatherScatter: {
        // The hub receives the first half and sends the rest, later.
        const AccountId& hub = tx[0]->to;
        std::size_t k = 0;
        while (k < n && tx[k]->to == hub) ++k;
        std::size_t outs = 0;
        for (std::size_t i = k; i < n; ++i) outs += tx[i]->from == hub;
        if (k < 3 || n - k < 3 || outs != n - k) fail(pi, name + ": not a gather into a hub followed by a scatter");
        break;
      }
      case PatternKind::Cycle: {
        std::set<AccountId> seen;
        for (std::size_t i = 0; i < n; ++i) {
          if (tx[i]->to != tx[(i + 1) % n]->from) fail(pi, name + ": broken edge after transaction " + std::to_string(i));
          seen.insert(tx[i]->from);
        }
        if (seen.size() != n) fail(pi, name + ": cycle revisits an account");
        break;
      }
      case PatternKind::Stack: {
        std::set<AccountId> seen{tx[0]->from};
        for (std::size_t i = 0; i < n; ++i) {
          if (i + 1 < n && tx[i]->to != tx[i + 1]->from) fail(pi, name + ": broken chain after hop " + std::to_string(i));
          if (!seen.insert(tx[i]->to).second) fail(pi, name + ": chain revisits an account");
        }
        break;
      }
    }
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (store[i].is_laundering && owner_count[i] != 1)
      fail(SIZE_MAX, "laundering transaction " + std::to_string(i) + " belongs to " + std::to_string(owner_count[i]) +
                         " instances");
  }
  return rep;
}

}  // namespace crpaml
