#pragma once

// Risk-indicator tables, per-transaction risk features, and the
// post-prediction false-positive filter.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "crpaml/common.hpp"
#include "crpaml/profiler.hpp"
#include "crpaml/txstore.hpp"
#include "json.hpp"

namespace crpaml {

// ---- indicator categories -------------------------------------------------------

inline constexpr std::size_t kVolumeBucketCount = 6;
inline constexpr std::array<std::int64_t, kVolumeBucketCount - 1> kVolumeEdgesMicros{
    100'000'000, 1'000'000'000, 10'000'000'000, 25'000'000'000, 100'000'000'000};
inline constexpr std::array<std::string_view, kVolumeBucketCount> kVolumeBucketNames{
    "<=100", "100-1k", "1k-10k", "10k-25k", "25k-100k", ">100k"};

/// Upper-inclusive USD ranges.
inline std::size_t volume_bucket(UsdAmount usd) {
  std::size_t b = 0;
  while (b < kVolumeEdgesMicros.size() && usd.micros > kVolumeEdgesMicros[b]) ++b;
  return b;
}

enum class FreqBucket : std::uint8_t { OneTime, UpTo8h, UpTo24h, Over24h };
inline constexpr std::size_t kFreqBucketCount = 4;
inline constexpr std::array<std::string_view, kFreqBucketCount> kFreqBucketNames{"one_time", "0-8h", "8-24h",
                                                                                 ">24h"};

inline FreqBucket freq_bucket(std::optional<std::int64_t> gap_seconds) {
  if (!gap_seconds) return FreqBucket::OneTime;
  if (*gap_seconds <= 8 * 3600) return FreqBucket::UpTo8h;
  if (*gap_seconds <= 24 * 3600) return FreqBucket::UpTo24h;
  return FreqBucket::Over24h;
}

enum class BankRelation : std::uint8_t { SameBank, CrossBankSameCurrency, CrossCurrency };
inline constexpr std::size_t kBankRelationCount = 3;
inline constexpr std::array<std::string_view, kBankRelationCount> kBankRelationNames{
    "same_bank", "cross_bank_same_currency", "cross_currency"};

inline BankRelation bank_relation(const TransactionRecord& r) {
  if (r.payment_currency != r.receiving_currency) return BankRelation::CrossCurrency;
  return r.from.bank == r.to.bank ? BankRelation::SameBank : BankRelation::CrossBankSameCurrency;
}

/// Gap to the previous transaction of the same ordered (sender, receiver)
/// pair, looking only at strictly earlier timestamps.
inline std::vector<std::optional<std::int64_t>> pair_gaps(const TransactionStore& store) {
  std::vector<std::optional<std::int64_t>> out(store.size());
  struct PairHash {
    std::size_t operator()(const std::pair<AccountId, AccountId>& p) const {
      return AccountIdHash{}(p.first) * 0x9e3779b97f4a7c15ULL ^ AccountIdHash{}(p.second);
    }
  };
  std::unordered_map<std::pair<AccountId, AccountId>, std::int64_t, PairHash> last;
  for_each_timestamp_group(store, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      auto it = last.find({store[i].from, store[i].to});
      if (it != last.end()) out[i] = store[i].timestamp - it->second;
    }
    for (std::size_t i = begin; i < end; ++i) last[{store[i].from, store[i].to}] = store[i].timestamp;
  });
  return out;
}

// ---- tables ----------------------------------------------------------------------------

struct CategoryCount {
  std::uint64_t total = 0;
  std::uint64_t laundering = 0;
  bool operator==(const CategoryCount&) const = default;
};

template <std::size_t N>
struct Conditional {
  std::array<double, N> p{};
  std::array<CategoryCount, N> counts{};
  bool operator==(const Conditional&) const = default;
};

struct RiskTables {
  double smoothing = 1.0;
  std::uint64_t n_train = 0;
  std::uint64_t n_laundering = 0;
  double prior = 0.0;
  Conditional<kFormatCount> format;
  Conditional<kCurrencyCount> currency;  // payment currency
  Conditional<kVolumeBucketCount> volume;
  Conditional<kBankRelationCount> bank;
  std::array<double, kFreqBucketCount> freq_normal{};
  std::array<double, kFreqBucketCount> freq_laundering{};
  std::array<CategoryCount, kFreqBucketCount> freq_counts{};

  /// Probability floor: the smoothed rate of an unseen category, s / (N + 2s).
  double floor() const {
    const double f = smoothing / (static_cast<double>(n_train) + 2.0 * smoothing);
    return std::max(f, 1e-12);
  }
  double clamp(double p) const { return std::clamp(p, floor(), 1.0 - floor()); }

  double freq_posterior(FreqBucket b) const {
    const auto i = static_cast<std::size_t>(b);
    const double num = freq_laundering[i] * prior;
    const double den = num + freq_normal[i] * (1.0 - prior);
    return den > 0 ? num / den : prior;
  }

  std::uint64_t hash() const;
  bool operator==(const RiskTables&) const = default;
};

namespace detail {
template <std::size_t N>
void finish(Conditional<N>& c, double s, double prior, double floor) {
  for (std::size_t i = 0; i < N; ++i) {
    const auto& k = c.counts[i];
    c.p[i] = k.total == 0 ? std::max(prior, floor)
                          : (static_cast<double>(k.laundering) + s) / (static_cast<double>(k.total) + 2.0 * s);
  }
}
}  // namespace detail

/// Fits every table from the training rows. gaps is aligned with the store.
inline RiskTables fit_risk_tables(const TransactionStore& store, std::span<const std::size_t> rows,
                                  std::span<const std::optional<std::int64_t>> gaps, const RateTable& rates,
                                  double smoothing = 1.0) {
  if (!(smoothing >= 0) || !std::isfinite(smoothing)) throw ConfigError("smoothing pseudo-count must be >= 0");
  if (rows.empty()) throw ConfigError("risk tables need a non-empty training set");
  if (gaps.size() != store.size()) throw ShapeError("pair gaps are not aligned with the store");
  RiskTables t;
  t.smoothing = smoothing;
  auto bump = [](CategoryCount& c, bool l) {
    ++c.total;
    c.laundering += l ? 1 : 0;
  };
  for (auto i : rows) {
    const auto& r = store[i];
    const bool l = r.is_laundering;
    ++t.n_train;
    t.n_laundering += l ? 1 : 0;
    bump(t.format.counts[static_cast<std::size_t>(r.format)], l);
    bump(t.currency.counts[static_cast<std::size_t>(r.payment_currency)], l);
    bump(t.volume.counts[volume_bucket(usd_paid(r, rates))], l);
    bump(t.bank.counts[static_cast<std::size_t>(bank_relation(r))], l);
    bump(t.freq_counts[static_cast<std::size_t>(freq_bucket(gaps[i]))], l);
  }
  if (t.n_laundering == 0 || t.n_laundering == t.n_train)
    throw ConfigError("risk tables need both laundering and normal transactions in the training set");
  t.prior = static_cast<double>(t.n_laundering) / static_cast<double>(t.n_train);
  const double fl = t.floor();
  detail::finish(t.format, smoothing, t.prior, fl);
  detail::finish(t.currency, smoothing, t.prior, fl);
  detail::finish(t.volume, smoothing, t.prior, fl);
  detail::finish(t.bank, smoothing, t.prior, fl);
  const double n_normal = static_cast<double>(t.n_train - t.n_laundering);
  for (std::size_t b = 0; b < kFreqBucketCount; ++b) {
    const auto& c = t.freq_counts[b];
    t.freq_laundering[b] = static_cast<double>(c.laundering) / static_cast<double>(t.n_laundering);
    t.freq_normal[b] = static_cast<double>(c.total - c.laundering) / n_normal;
  }
  return t;
}

// ---- features ----------------------------------------------------------------------------

inline constexpr std::size_t kRiskIndicatorCount = 5;
inline constexpr std::array<std::string_view, kRiskIndicatorCount> kRiskIndicatorNames{
    "format", "currency", "volume", "frequency", "bank_relation"};

struct RiskFeatures {
  std::array<double, kRiskIndicatorCount> r{};  // clamped probabilities, in kRiskIndicatorNames order
  double composite = 0.0;

  double r_format() const { return r[0]; }
  double r_currency() const { return r[1]; }
  double r_volume() const { return r[2]; }
  double r_freq() const { return r[3]; }
  double r_bank() const { return r[4]; }
};

/// Composite = sum over indicators of ln(r_i / prior).
inline RiskFeatures risk_features(const TransactionRecord& txn, std::optional<std::int64_t> gap,
                                  const RiskTables& t, const RateTable& rates) {
  RiskFeatures f;
  f.r = {t.format.p[static_cast<std::size_t>(txn.format)],
         t.currency.p[static_cast<std::size_t>(txn.payment_currency)],
         t.volume.p[volume_bucket(usd_paid(txn, rates))], t.freq_posterior(freq_bucket(gap)),
         t.bank.p[static_cast<std::size_t>(bank_relation(txn))]};
  for (auto& r : f.r) {
    r = t.clamp(r);
    f.composite += std::log(r / t.prior);
  }
  return f;
}

// ---- metrics and the filter -----------------------------------------------------------

/// Counts for the minority (laundering) class.
struct Confusion {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  double precision() const { return tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0; }
  double recall() const { return tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0; }
  double f1() const {
    const auto d = 2 * tp + fp + fn;
    return d ? 2.0 * static_cast<double>(tp) / static_cast<double>(d) : 0.0;
  }
  bool operator==(const Confusion&) const = default;
};

inline Confusion confusion(std::span<const std::uint8_t> predictions, std::span<const std::uint8_t> labels) {
  if (predictions.size() != labels.size()) throw ShapeError("predictions and labels differ in length");
  Confusion c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (predictions[i]) (labels[i] ? c.tp : c.fp) += 1;
    else (labels[i] ? c.fn : c.tn) += 1;
  }
  return c;
}

inline std::vector<std::uint8_t> apply_risk_filter(std::span<const std::uint8_t> predictions,
                                                   std::span<const double> composites, double tau) {
  if (predictions.size() != composites.size()) throw ShapeError("predictions and composites differ in length");
  std::vector<std::uint8_t> out(predictions.begin(), predictions.end());
  for (std::size_t i = 0; i < out.size(); ++i)
    if (out[i] && composites[i] < tau) out[i] = 0;
  return out;
}

/// Picks tau among {-inf} and every observed composite to maximize minority
/// F1 after filtering; ties go to the smallest tau.
inline double calibrate_filter_threshold(std::span<const std::uint8_t> predictions, std::span<const double> composites,
                                         std::span<const std::uint8_t> labels) {
  if (predictions.size() != composites.size() || predictions.size() != labels.size())
    throw ShapeError("calibration inputs differ in length");
  const double neg_inf = -std::numeric_limits<double>::infinity();
  std::vector<std::pair<double, std::uint8_t>> pos;  // (composite, label) of predicted positives
  for (std::size_t i = 0; i < predictions.size(); ++i)
    if (predictions[i]) pos.emplace_back(composites[i], labels[i]);
  if (pos.empty()) return neg_inf;
  std::sort(pos.begin(), pos.end());
  std::vector<double> observed(composites.begin(), composites.end());
  std::sort(observed.begin(), observed.end());

  const Confusion base = confusion(predictions, labels);
  // Demoting the k lowest positives (k at a run boundary) is reached by the
  // smallest observed composite strictly above the k-th one.
  std::uint64_t tp = base.tp, fp = base.fp, fn = base.fn;
  std::uint64_t best_num = 2 * tp, best_den = 2 * tp + fp + fn;
  double best_tau = neg_inf;
  std::size_t k = 0;
  while (k < pos.size()) {
    const double c = pos[k].first;
    while (k < pos.size() && pos[k].first == c) {
      if (pos[k].second) {
        --tp;
        ++fn;
      } else {
        --fp;
      }
      ++k;
    }
    auto it = std::upper_bound(observed.begin(), observed.end(), c);
    if (it == observed.end()) break;
    const std::uint64_t num = 2 * tp, den = 2 * tp + fp + fn;
    // num/den > best_num/best_den, with 0/0 read as 0
    const bool better = den == 0 ? false : best_den == 0 ? num > 0 : num * best_den > best_num * den;
    if (better) {
      best_num = num;
      best_den = den;
      best_tau = *it;
    }
  }
  return best_tau;
}

// ---- serialization ------------------------------------------------------------------------

namespace detail {
template <std::size_t N, class Names>
nlohmann::ordered_json conditional_json(const Conditional<N>& c, const Names& names) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < N; ++i)
    j[std::string(names(i))] = {{"p", c.p[i]}, {"total", c.counts[i].total}, {"laundering", c.counts[i].laundering}};
  return j;
}

template <std::size_t N, class Names>
void conditional_from_json(const nlohmann::json& j, Conditional<N>& c, const Names& names, const char* table) {
  for (std::size_t i = 0; i < N; ++i) {
    const std::string key(names(i));
    if (!j.contains(key)) throw FormatError(std::string("risk tables: ") + table + " lacks entry " + key);
    const auto& e = j.at(key);
    c.p[i] = e.at("p").get<double>();
    if (!(c.p[i] >= 0.0 && c.p[i] <= 1.0)) throw FormatError("risk tables: probability outside [0,1] for " + key);
    c.counts[i].total = e.value("total", std::uint64_t{0});
    c.counts[i].laundering = e.value("laundering", std::uint64_t{0});
  }
}

inline std::string_view format_key(std::size_t i) { return kFormatNames[i]; }
inline std::string_view currency_key(std::size_t i) { return kCurrencies[i].name; }
inline std::string_view volume_key(std::size_t i) { return kVolumeBucketNames[i]; }
inline std::string_view bank_key(std::size_t i) { return kBankRelationNames[i]; }
}  // namespace detail

inline nlohmann::ordered_json to_json(const RiskTables& t) {
  nlohmann::ordered_json j;
  j["version"] = 1;
  j["smoothing"] = t.smoothing;
  j["n_train"] = t.n_train;
  j["n_laundering"] = t.n_laundering;
  j["prior"] = t.prior;
  j["format"] = detail::conditional_json(t.format, detail::format_key);
  j["currency"] = detail::conditional_json(t.currency, detail::currency_key);
  j["volume_usd"] = detail::conditional_json(t.volume, detail::volume_key);
  nlohmann::ordered_json f = nlohmann::ordered_json::object();
  for (std::size_t b = 0; b < kFreqBucketCount; ++b)
    f[std::string(kFreqBucketNames[b])] = {{"normal", t.freq_normal[b]},
                                           {"laundering", t.freq_laundering[b]},
                                           {"total", t.freq_counts[b].total},
                                           {"laundering_count", t.freq_counts[b].laundering}};
  j["frequency"] = f;
  j["bank_relation"] = detail::conditional_json(t.bank, detail::bank_key);
  return j;
}

inline RiskTables risk_tables_from_json(const nlohmann::json& j) {
  try {
    if (j.value("version", 0) != 1) throw FormatError("risk tables: unsupported version");
    RiskTables t;
    t.smoothing = j.at("smoothing").get<double>();
    t.n_train = j.at("n_train").get<std::uint64_t>();
    t.n_laundering = j.value("n_laundering", std::uint64_t{0});
    t.prior = j.at("prior").get<double>();
    if (!(t.prior > 0.0 && t.prior < 1.0)) throw FormatError("risk tables: prior must lie in (0,1)");
    if (!(t.smoothing >= 0.0)) throw FormatError("risk tables: negative smoothing");
    detail::conditional_from_json(j.at("format"), t.format, detail::format_key, "format");
    detail::conditional_from_json(j.at("currency"), t.currency, detail::currency_key, "currency");
    detail::conditional_from_json(j.at("volume_usd"), t.volume, detail::volume_key, "volume_usd");
    detail::conditional_from_json(j.at("bank_relation"), t.bank, detail::bank_key, "bank_relation");
    double sn = 0, sl = 0;
    for (std::size_t b = 0; b < kFreqBucketCount; ++b) {
      const auto& e = j.at("frequency").at(std::string(kFreqBucketNames[b]));
      t.freq_normal[b] = e.at("normal").get<double>();
      t.freq_laundering[b] = e.at("laundering").get<double>();
      t.freq_counts[b].total = e.value("total", std::uint64_t{0});
      t.freq_counts[b].laundering = e.value("laundering_count", std::uint64_t{0});
      sn += t.freq_normal[b];
      sl += t.freq_laundering[b];
    }
    if (std::abs(sn - 1.0) > 1e-6 || std::abs(sl - 1.0) > 1e-6)
      throw FormatError("risk tables: frequency shares must sum to 1 per class");
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("risk tables: ") + e.what());
  }
}

inline std::uint64_t RiskTables::hash() const { return fnv1a(to_json(*this).dump()); }

inline void save_risk_tables(const RiskTables& t, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write risk tables " + path);
  os << to_json(t).dump(2) << '\n';
}

inline RiskTables load_risk_tables(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw NotFoundError("missing artifact: risk tables " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("risk tables: " + std::string(e.what()));
  }
  return risk_tables_from_json(j);
}

/// Aligned text rendering, one block per table.
inline std::string render_risk_tables(const RiskTables& t) {
  std::string out;
  char buf[160];
  auto line = [&](std::string_view name, double p, const CategoryCount& c) {
    std::snprintf(buf, sizeof buf, "  %-26.*s %12.3e %10llu %8llu\n", static_cast<int>(name.size()), name.data(), p,
                  static_cast<unsigned long long>(c.total), static_cast<unsigned long long>(c.laundering));
    out += buf;
  };
  std::snprintf(buf, sizeof buf, "prior %.6e over %llu training rows (smoothing %.3g)\n", t.prior,
                static_cast<unsigned long long>(t.n_train), t.smoothing);
  out += buf;
  auto header = [&](std::string_view title) {
    std::snprintf(buf, sizeof buf, "\n%-28.*s %12s %10s %8s\n", static_cast<int>(title.size()), title.data(),
                  "P(L|x)", "count", "laund.");
    out += buf;
  };
  header("format");
  for (std::size_t i = 0; i < kFormatCount; ++i) line(kFormatNames[i], t.format.p[i], t.format.counts[i]);
  header("currency");
  for (std::size_t i = 0; i < kCurrencyCount; ++i) line(kCurrencies[i].name, t.currency.p[i], t.currency.counts[i]);
  header("volume (USD)");
  for (std::size_t i = 0; i < kVolumeBucketCount; ++i) line(kVolumeBucketNames[i], t.volume.p[i], t.volume.counts[i]);
  header("bank relation");
  for (std::size_t i = 0; i < kBankRelationCount; ++i) line(kBankRelationNames[i], t.bank.p[i], t.bank.counts[i]);
  std::snprintf(buf, sizeof buf, "\n%-28s %12s %12s %12s\n", "frequency", "normal", "laundering", "posterior");
  out += buf;
  for (std::size_t b = 0; b < kFreqBucketCount; ++b) {
    std::snprintf(buf, sizeof buf, "  %-26.*s %12.4f %12.4f %12.3e\n", static_cast<int>(kFreqBucketNames[b].size()),
                  kFreqBucketNames[b].data(), t.freq_normal[b], t.freq_laundering[b],
                  t.freq_posterior(static_cast<FreqBucket>(b)));
    out += buf;
  }
  return out;
}

}  // namespace crpaml
