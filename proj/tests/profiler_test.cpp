#include "crpaml/profiler.hpp"

#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "oracles.hpp"
#include "testdata.hpp"

namespace crpaml {
namespace {

using testing::exact_rates;
using testing::random_records;
using testing::batch_profile;
using testing::OracleProfile;

TransactionRecord usd_txn(std::int64_t ts, std::string from, std::string to, std::int64_t cents,
                          PaymentFormat f = PaymentFormat::ACH) {
  TransactionRecord r;
  r.timestamp = ts;
  r.from = {"1", std::move(from)};
  r.to = {"1", std::move(to)};
  r.amount_paid = r.amount_received = cents;
  r.format = f;
  return r;
}

SizeThresholds usd_thresholds(double a, double b, double c) {
  auto m = [](double v) { return UsdAmount{static_cast<std::int64_t>(v * 1e6)}; };
  return {m(a), m(b), m(c)};
}

// ---- thresholds ----

TEST(SizeThresholds, DegenerateDistribution) {
  std::vector<TransactionRecord> rows;
  for (int i = 0; i < 10; ++i) rows.push_back(usd_txn(i, "a", "b", 10000));
  auto store = TransactionStore::build(rows);
  const auto t = fit_size_thresholds(store, all_rows(store), RateTable::defaults());
  EXPECT_EQ(t, usd_thresholds(100, 100, 100));
}

TEST(SizeThresholds, NearestRankOnOneToHundred) {
  // Hand computation: rank ceil(q * 100) picks the value q * 100 itself.
  std::vector<TransactionRecord> rows;
  for (int i = 100; i >= 1; --i) rows.push_back(usd_txn(1000 - i, "a", "b", i * 100));
  auto store = TransactionStore::build(rows);
  const auto t = fit_size_thresholds(store, all_rows(store), RateTable::defaults());
  EXPECT_EQ(t, usd_thresholds(50, 80, 93));
}

TEST(SizeThresholds, UsesOnlyGivenRows) {
  std::vector<TransactionRecord> rows;
  for (int i = 1; i <= 10; ++i) rows.push_back(usd_txn(i, "a", "b", i * 100));
  auto store = TransactionStore::build(rows);
  const std::vector<std::size_t> first_two{0, 1};
  EXPECT_EQ(fit_size_thresholds(store, first_two, RateTable::defaults()), usd_thresholds(1, 2, 2));
  EXPECT_THROW(fit_size_thresholds(store, {}, RateTable::defaults()), ConfigError);
}

TEST(SizeThresholds, BucketBoundariesAreUpperInclusive) {
  const auto t = usd_thresholds(10, 20, 30);
  EXPECT_EQ(size_bucket(t.p50, t), SizeBucket::Small);
  EXPECT_EQ(size_bucket(UsdAmount{t.p50.micros + 1}, t), SizeBucket::Medium);
  EXPECT_EQ(size_bucket(t.p80, t), SizeBucket::Medium);
  EXPECT_EQ(size_bucket(t.p93, t), SizeBucket::Large);
  EXPECT_EQ(size_bucket(UsdAmount{t.p93.micros + 1}, t), SizeBucket::ExtraLarge);
}

TEST(SizeThresholds, BucketMonotoneInAmount) {
  Rng rng(3);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<std::int64_t> e{static_cast<std::int64_t>(rng.below(1000)), static_cast<std::int64_t>(rng.below(1000)),
                                static_cast<std::int64_t>(rng.below(1000))};
    std::sort(e.begin(), e.end());
    const SizeThresholds t{UsdAmount{e[0]}, UsdAmount{e[1]}, UsdAmount{e[2]}};
    const auto a = static_cast<std::int64_t>(rng.below(1200));
    const auto b = a + static_cast<std::int64_t>(rng.below(300));
    EXPECT_LE(size_bucket(UsdAmount{a}, t), size_bucket(UsdAmount{b}, t));
  }
}

TEST(TxCategory, IndexRoundTrip) {
  std::set<std::uint16_t> seen;
  for (std::size_t i = 0; i < kCategoryCount; ++i) {
    const auto c = TxCategory::from_index(i);
    EXPECT_EQ(c.index(), i);
    seen.insert(c.index());
  }
  EXPECT_EQ(seen.size(), 420u);
}

// ---- update_profile ----

TEST(UpdateProfile, FirstTransaction) {
  AccountProfile p;
  update_profile(p, usd_txn(100, "a", "b", 500), Direction::Out, usd_thresholds(10, 20, 30), RateTable::defaults());
  EXPECT_EQ(p.total(), 1u);
  ASSERT_EQ(p.partners.size(), 1u);
  EXPECT_EQ(p.partners.begin()->second.count, 1u);
  EXPECT_EQ(p.partners.begin()->second.sum_inter_arrival, 0);
  EXPECT_EQ(p.sum_out_usd, 5'000'000);
}

TEST(UpdateProfile, SamePartnerGap) {
  AccountProfile p;
  const auto t = usd_thresholds(10, 20, 30);
  update_profile(p, usd_txn(1000, "a", "b", 500), Direction::Out, t, RateTable::defaults());
  update_profile(p, usd_txn(4600, "b", "a", 500), Direction::In, t, RateTable::defaults());
  EXPECT_EQ(p.partners.at(AccountId{"1", "b"}).sum_inter_arrival, 3600);
  EXPECT_DOUBLE_EQ(mean_inter_arrival(p), 3600.0);
}

TEST(UpdateProfile, OutOfOrderThrows) {
  AccountProfile p;
  const auto t = usd_thresholds(10, 20, 30);
  update_profile(p, usd_txn(1000, "a", "b", 500), Direction::Out, t, RateTable::defaults());
  EXPECT_THROW(update_profile(p, usd_txn(999, "a", "b", 500), Direction::Out, t, RateTable::defaults()),
               OrderingError);
}

TEST(UpdateProfile, NoRepeatMeansZeroGap) {
  AccountProfile p;
  const auto t = usd_thresholds(10, 20, 30);
  update_profile(p, usd_txn(1000, "a", "b", 500), Direction::Out, t, RateTable::defaults());
  update_profile(p, usd_txn(2000, "a", "c", 500), Direction::Out, t, RateTable::defaults());
  bool repeat = true;
  EXPECT_EQ(mean_inter_arrival(p, &repeat), 0.0);
  EXPECT_FALSE(repeat);
}

// ---- batch oracle ----

void expect_matches(const AccountProfile& p, const OracleProfile& o) {
  EXPECT_EQ(p.n_in, o.n_in);
  EXPECT_EQ(p.n_out, o.n_out);
  EXPECT_EQ(p.sum_in_usd, o.sum_in);
  EXPECT_EQ(p.sum_out_usd, o.sum_out);
  EXPECT_EQ(p.categories, o.categories);
  EXPECT_EQ(p.currencies, o.currencies);
  EXPECT_EQ(p.formats, o.formats);
  ASSERT_EQ(p.partners.size(), o.partner_times.size());
  std::int64_t gaps = 0;
  std::uint64_t n = 0, per_partner = 0;
  for (const auto& [partner, times] : o.partner_times) {
    const auto& ps = p.partners.at(partner);
    EXPECT_EQ(ps.count, times.size());
    EXPECT_EQ(ps.last_timestamp, times.back());
    EXPECT_EQ(ps.sum_usd, o.partner_sum.at(partner));
    std::int64_t g = 0;
    for (std::size_t k = 1; k < times.size(); ++k) g += times[k] - times[k - 1];
    EXPECT_EQ(ps.sum_inter_arrival, g);
    gaps += g;
    n += times.size() - 1;
    per_partner += ps.count;
  }
  EXPECT_EQ(per_partner, p.total());
  std::uint64_t hist = 0;
  for (const auto& [_, c] : p.categories) hist += c;
  EXPECT_EQ(hist, p.total());
  const double expected_gap = n ? static_cast<double>(gaps) / static_cast<double>(n) : 0.0;
  EXPECT_NEAR(mean_inter_arrival(p), expected_gap, 1e-9 * std::max(1.0, expected_gap));
}

TEST(ProfileBook, ThousandReplayMatchesBatch) {
  Rng rng(11);
  const auto rates = exact_rates();
  testing::RandomTxnConfig cfg;
  cfg.accounts = 30;
  cfg.txns = 1000;
  cfg.allow_self = true;
  const auto records = random_records(rng, cfg);
  const auto t = usd_thresholds(100, 1000, 10000);
  ProfileBook book(t, rates);
  for (const auto& r : records) book.apply(r);
  for (std::size_t a = 0; a < cfg.accounts; ++a) {
    const auto id = testing::account_for(a);
    expect_matches(book.get(id), batch_profile(records, records.size(), id, t, rates));
  }
}

TEST(ProfileBook, EveryPrefixMatchesBatch) {
  Rng rng(12);
  const auto rates = exact_rates();
  for (int trial = 0; trial < 20; ++trial) {
    testing::RandomTxnConfig cfg;
    cfg.accounts = 2 + rng.below(8);
    cfg.txns = 1 + rng.below(60);
    cfg.minutes = 1 + static_cast<std::int64_t>(rng.below(100));
    const auto records = random_records(rng, cfg);
    const auto t = usd_thresholds(50, 500, 5000);
    ProfileBook book(t, rates);
    for (std::size_t end = 1; end <= records.size(); ++end) {
      book.apply(records[end - 1]);
      const auto probe = testing::account_for(rng.below(cfg.accounts));
      expect_matches(book.get(probe), batch_profile(records, end, probe, t, rates));
    }
  }
}

// ---- feature vectors ----

ProfilerModel tiny_model() {
  std::vector<TransactionRecord> rows{usd_txn(0, "a", "b", 100), usd_txn(60, "b", "c", 1000000)};
  auto store = TransactionStore::build(rows);
  return fit_profiler(store, all_rows(store), RateTable::defaults(), GridShape{2, 2});
}

TEST(ProfileFeatures, LayoutWidth) {
  EXPECT_EQ(total_width(profile_fields()), kProfileWidth);
  EXPECT_EQ(kProfileWidth, 122u);
}

TEST(ProfileFeatures, EmptyProfileIsNeutral) {
  const auto m = tiny_model();
  const auto v = profile_feature_vector(AccountProfile{}, m);
  for (int i = 0; i < 7; ++i) EXPECT_EQ(v[i], 0.0);
  EXPECT_EQ(v[7 + 15], 1.0);            // currency "none"
  EXPECT_EQ(v[7 + 16 + 7], 1.0);        // format "none"
  double onehots = 0;
  for (std::size_t i = 7; i < 7 + 16 + 8 + 65; ++i) onehots += v[i];
  EXPECT_EQ(onehots, 2.0);
  // Zero volume and zero count land in cell (0, 0).
  EXPECT_EQ(m.grid.cell_of(0, 0), 0u);
  const auto& row = m.stats.rows[m.grid.representative[0]];
  for (std::size_t k = 0; k < kClassRowWidth; ++k) EXPECT_EQ(v[kProfileWidth - kClassRowWidth + k], row[k]);
}

TEST(ProfileFeatures, SingleTransactionForcesTopSlots) {
  const auto rates = RateTable::defaults();
  const auto t = usd_thresholds(10, 1000, 5000);
  ProfileBook book(t, rates);
  book.apply(usd_txn(0, "a", "b", 50000));  // 500 USD: medium
  const AccountProfile& p = book.get({"1", "a"});
  ProfilerModel m = tiny_model();
  m.thresholds = t;
  const TxCategory medium_usd_ach{SizeBucket::Medium, Currency::UsDollar, PaymentFormat::ACH};
  m.vocab = TypeVocabulary({medium_usd_ach.index()});
  const auto v = profile_feature_vector(p, m);
  EXPECT_EQ(v[1], 1.0);
  EXPECT_DOUBLE_EQ(v[3], 500.0);
  EXPECT_EQ(v[7 + static_cast<int>(Currency::UsDollar)], 1.0);
  EXPECT_EQ(v[7 + 16 + static_cast<int>(PaymentFormat::ACH)], 1.0);
  EXPECT_EQ(v[7 + 16 + 8 + 0], 1.0);  // vocabulary slot 0
  EXPECT_EQ(top_types(p, 5), std::vector<std::uint16_t>{medium_usd_ach.index()});
}

// Independent re-derivation of every feature slot from CSV text.
std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out(1);
  for (char c : line) {
    if (c == ',') out.emplace_back();
    else out.back().push_back(c);
  }
  return out;
}

std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

TEST(ProfileFeatures, FiftyAccountsMatchCsvOracle) {
  Rng rng(13);
  const auto rates = exact_rates();
  testing::RandomTxnConfig cfg;
  cfg.accounts = 50;
  cfg.txns = 1500;
  cfg.currencies = 5;
  const auto records = random_records(rng, cfg);
  const std::string csv = testing::to_csv(records);
  auto store = TransactionStore::build(records);
  const auto m = fit_profiler(store, all_rows(store), rates, GridShape{4, 4});
  ProfileBook book(m.thresholds, rates);
  for (const auto& r : records) book.apply(r);

  const std::vector<std::string> cur_names{"Australian Dollar", "Bitcoin", "Brazil Real", "Canadian Dollar", "Euro",
                                           "Mexican Peso", "Ruble", "Rupee", "Saudi Riyal", "Shekel", "Swiss Franc",
                                           "UK Pound", "US Dollar", "Yen", "Yuan"};
  const std::vector<std::string> fmt_names{"Cheque", "Credit Card", "ACH", "Cash", "Wire", "Bitcoin", "Reinvestment"};
  auto index_in = [](const std::vector<std::string>& v, const std::string& s) {
    return static_cast<int>(std::find(v.begin(), v.end(), s) - v.begin());
  };
  const std::vector<std::int64_t> rate4{7500, 200000000, 2000, 8000, 12500, 500, 200, 125,
                                        2500, 3000,      11000, 20000, 10000, 100, 1500};

  struct Acc {
    double n_in = 0, n_out = 0, sum_in = 0, sum_out = 0;
    std::map<std::string, std::vector<std::int64_t>> times;
    std::map<int, int> cats;
    std::array<int, 15> cur{};
    std::array<int, 7> fmt{};
  };
  std::map<std::string, Acc> accs;
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto f = split(line);
    ASSERT_EQ(f.size(), 11u);
    int y, mo, d, h, mi;
    ASSERT_EQ(std::sscanf(f[0].c_str(), "%d/%d/%d %d:%d", &y, &mo, &d, &h, &mi), 5);
    const std::int64_t ts = days_from_civil(y, mo, d) * 86400 + h * 3600 + mi * 60;
    const int pay_cur = index_in(cur_names, f[8]), recv_cur = index_in(cur_names, f[6]);
    const int fmt = index_in(fmt_names, f[9]);
    // amount in integer minor units, from the decimal text
    const auto dot = f[7].find('.');
    const std::string digits = f[7].substr(0, dot) + f[7].substr(dot + 1);
    const std::int64_t units = std::stoll(digits);
    const int scale = static_cast<int>(f[7].size() - dot - 1);
    std::int64_t micros = units * rate4[pay_cur];
    for (int k = 0; k < scale + 4 - 6; ++k) micros /= 10;
    const int size = micros <= m.thresholds.p50.micros ? 0 : micros <= m.thresholds.p80.micros ? 1
                     : micros <= m.thresholds.p93.micros ? 2 : 3;
    const std::string from = f[1] + ":" + f[2], to = f[3] + ":" + f[4];
    auto add = [&](const std::string& who, const std::string& partner, bool out, int cur) {
      Acc& a = accs[who];
      (out ? a.n_out : a.n_in) += 1;
      (out ? a.sum_out : a.sum_in) += static_cast<double>(micros) / 1e6;
      a.times[partner].push_back(ts);
      a.cats[(size * 15 + cur) * 7 + fmt] += 1;
      a.cur[cur] += 1;
      a.fmt[fmt] += 1;
    };
    add(from, to, true, pay_cur);
    add(to, from, false, recv_cur);
  }

  for (const auto& [who, a] : accs) {
    const auto colon = who.find(':');
    const AccountId id{who.substr(0, colon), who.substr(colon + 1)};
    const auto got = profile_feature_vector(book.get(id), m);
    std::vector<double> want(kProfileWidth, 0.0);
    want[0] = a.n_in;
    want[1] = a.n_out;
    want[2] = a.n_in ? a.sum_in / a.n_in : 0;
    want[3] = a.n_out ? a.sum_out / a.n_out : 0;
    double gaps = 0, n = 0;
    for (const auto& [_, ts] : a.times) {
      for (std::size_t k = 1; k < ts.size(); ++k) gaps += static_cast<double>(ts[k] - ts[k - 1]);
      n += static_cast<double>(ts.size() - 1);
    }
    want[4] = n ? gaps / n : 0;
    want[5] = n ? 1 : 0;
    want[6] = static_cast<double>(a.times.size());
    int best = 15;
    for (int c = 0; c < 15; ++c)
      if (a.cur[c] > (best == 15 ? 0 : a.cur[best])) best = c;
    want[7 + best] = 1;
    best = 7;
    for (int c = 0; c < 7; ++c)
      if (a.fmt[c] > (best == 7 ? 0 : a.fmt[best])) best = c;
    want[23 + best] = 1;
    std::vector<std::pair<int, int>> ranked;
    for (const auto& [cat, cnt] : a.cats) ranked.emplace_back(-cnt, cat);
    std::sort(ranked.begin(), ranked.end());
    for (std::size_t k = 0; k < std::min<std::size_t>(5, ranked.size()); ++k) {
      const auto& vc = m.vocab.categories();
      const auto it = std::find(vc.begin(), vc.end(), ranked[k].second);
      want[31 + (it == vc.end() ? 64 : static_cast<std::size_t>(it - vc.begin()))] = 1;
    }
    // class via the frozen edges, counted by hand
    const auto vol = static_cast<std::int64_t>(std::llround((a.sum_in + a.sum_out) * 1e6));
    const auto cnt = static_cast<std::uint64_t>(a.n_in + a.n_out);
    std::size_t vb = 0, cb = 0;
    for (auto e : m.grid.volume_edges) vb += e < vol;
    for (auto e : m.grid.count_edges) cb += e < cnt;
    const auto& row = m.stats.rows[m.grid.representative[vb * 4 + cb]];
    for (std::size_t k = 0; k < kClassRowWidth; ++k) want[96 + k] = row[k];

    for (std::size_t k = 0; k < kProfileWidth; ++k)
      EXPECT_NEAR(got[k], want[k], 1e-9 * std::max(1.0, std::abs(want[k]))) << who << " slot " << k;
  }
}

TEST(ProfileFeatures, CausalityIgnoresFutureAndSameTimestamp) {
  Rng rng(14);
  const auto rates = exact_rates();
  testing::RandomTxnConfig cfg;
  cfg.accounts = 12;
  cfg.txns = 300;
  cfg.minutes = 200;
  auto records = random_records(rng, cfg);
  auto store = TransactionStore::build(records);
  const auto m = fit_profiler(store, all_rows(store), rates);

  auto vectors = [&](const TransactionStore& s) {
    std::vector<std::vector<double>> out(s.size());
    stream_causal_profiles(s, m.thresholds, rates, [&](std::size_t i, const auto& snd, const auto& rcv) {
      out[i] = profile_feature_vector(snd, m);
      auto r = profile_feature_vector(rcv, m);
      out[i].insert(out[i].end(), r.begin(), r.end());
    });
    return out;
  };
  const auto base = vectors(store);

  // Poison: a huge transaction between the two parties of record k, stamped
  // exactly at record k's time, plus one later on.
  for (std::size_t k : {std::size_t{10}, std::size_t{150}, std::size_t{299}}) {
    auto poisoned = records;
    auto p = records[k];
    p.amount_paid = p.amount_received = 99'999'999;
    p.format = PaymentFormat::Wire;
    poisoned.push_back(p);
    p.timestamp += 60;
    poisoned.push_back(p);
    auto ps = TransactionStore::build(poisoned);
    const auto after = vectors(ps);
    // Stable sort keeps original records ahead of the poison within a timestamp.
    std::size_t j = 0;
    for (std::size_t i = 0; i < ps.size() && j <= k; ++i) {
      if (ps[i] == records[j]) {
        if (records[j].timestamp <= records[k].timestamp) {
          EXPECT_EQ(after[i], base[j]) << "record " << j;
        }
        ++j;
      }
    }
  }
}

// ---- vocabulary ----

TEST(TypeVocabulary, TopByCountWithIndexTieBreak) {
  std::vector<AccountProfile> ps(2);
  ps[0].categories = {{5, 3}, {9, 1}, {2, 1}};
  ps[1].categories = {{9, 2}, {7, 3}};
  const auto v = fit_type_vocabulary(ps);
  EXPECT_EQ(v.categories(), (std::vector<std::uint16_t>{5, 7, 9, 2}));
  EXPECT_EQ(v.index_of(9), 2u);
  EXPECT_EQ(v.index_of(100), TypeVocabulary::kOther);
}

TEST(TypeVocabulary, CapsAtSixtyFour) {
  std::vector<AccountProfile> ps(1);
  for (std::uint16_t c = 0; c < 100; ++c) ps[0].categories[c] = 1000 - c;
  const auto v = fit_type_vocabulary(ps);
  ASSERT_EQ(v.categories().size(), 64u);
  EXPECT_EQ(v.categories().back(), 63);
  EXPECT_EQ(v.index_of(64), TypeVocabulary::kOther);
}

// ---- classes ----

AccountProfile volume_profile(std::int64_t volume, std::uint64_t count) {
  AccountProfile p;
  p.sum_out_usd = volume;
  p.n_out = count;
  p.categories[0] = count;
  p.formats[0] = count;
  p.currencies[0] = count;
  return p;
}

TEST(AssignClasses, FourDistinctVolumesFourClasses) {
  std::vector<AccountProfile> ps{volume_profile(40, 1), volume_profile(10, 1), volume_profile(30, 1),
                                 volume_profile(20, 1)};
  const auto a = assign_classes(ps, GridShape{4, 1});
  EXPECT_EQ(a.classes, (std::vector<std::uint32_t>{3, 0, 2, 1}));
  for (auto m : a.stats.members) EXPECT_EQ(m, 1u);
}

TEST(AssignClasses, IdenticalAccountsShareOneClass) {
  std::vector<AccountProfile> ps(5, volume_profile(77, 3));
  const auto a = assign_classes(ps, 16);
  for (auto c : a.classes) EXPECT_EQ(c, a.classes[0]);
  const auto& row = a.stats.rows[a.classes[0]];
  EXPECT_EQ(row[0], 3.0);
  EXPECT_EQ(row[kSizeBucketCount], 3.0);
  EXPECT_EQ(row[kSizeBucketCount + kFormatCount], 3.0);
}

TEST(AssignClasses, RejectsBadK) {
  std::vector<AccountProfile> ps(1);
  EXPECT_THROW(assign_classes(ps, 0), ConfigError);
  EXPECT_THROW(assign_classes(ps, 15), ConfigError);
  EXPECT_THROW(assign_classes(std::span<const AccountProfile>{}, 16), ConfigError);
}

TEST(AssignClasses, EmptyCellsMergeByVolumeFirst) {
  // Volumes {1,2,3,4} but counts all 1: only count bucket 0 is occupied.
  std::vector<AccountProfile> ps{volume_profile(1, 1), volume_profile(2, 1), volume_profile(3, 1),
                                 volume_profile(4, 1)};
  const auto a = assign_classes(ps, GridShape{4, 2});
  for (std::size_t v = 0; v < 4; ++v) EXPECT_EQ(a.grid.representative[v * 2 + 1], v * 2);
  for (auto m : a.stats.members) EXPECT_GT(m, 0u);
}

TEST(AssignClasses, TwoHundredAccountsMatchGroupBy) {
  Rng rng(15);
  const auto rates = exact_rates();
  testing::RandomTxnConfig cfg;
  cfg.accounts = 200;
  cfg.txns = 3000;
  const auto records = random_records(rng, cfg);
  auto store = TransactionStore::build(records);
  const auto profiles = build_profiles(store, all_rows(store), fit_size_thresholds(store, all_rows(store), rates), rates);
  const auto a = assign_classes(profiles, 16);

  // Oracle: independent edges, buckets, and averages.
  std::vector<std::int64_t> vols;
  std::vector<std::uint64_t> cnts;
  for (const auto& p : profiles) {
    std::int64_t v = 0;
    std::uint64_t c = 0;
    for (const auto& [_, s] : p.partners) {
      v += s.sum_usd;
      c += s.count;
    }
    vols.push_back(v);
    cnts.push_back(c);
  }
  auto sv = vols;
  auto sc = cnts;
  std::sort(sv.begin(), sv.end());
  std::sort(sc.begin(), sc.end());
  const std::size_t n = profiles.size();
  auto edge = [&](const auto& s, std::size_t j) { return s[(j * n + 3) / 4 - 1]; };
  std::map<std::size_t, std::vector<std::size_t>> groups;
  std::vector<std::size_t> cell(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t vb = 0, cb = 0;
    for (std::size_t j = 1; j < 4; ++j) {
      vb += edge(sv, j) < vols[i];
      cb += edge(sc, j) < cnts[i];
    }
    cell[i] = vb * 4 + cb;
    groups[cell[i]].push_back(i);
  }
  for (std::size_t i = 0; i < n; ++i) {
    ASSERT_EQ(a.classes[i], cell[i]);
    const auto& members = groups[cell[i]];
    EXPECT_EQ(a.stats.members[cell[i]], members.size());
    for (std::size_t f = 0; f < kFormatCount; ++f) {
      double sum = 0;
      for (auto m : members) sum += static_cast<double>(profiles[m].formats[f]);
      EXPECT_NEAR(a.stats.rows[cell[i]][kSizeBucketCount + f], sum / members.size(), 1e-12);
    }
    for (std::size_t s = 0; s < kSizeBucketCount; ++s) {
      double sum = 0;
      for (auto m : members)
        for (const auto& [cat, c] : profiles[m].categories)
          if (TxCategory::from_index(cat).size == static_cast<SizeBucket>(s)) sum += static_cast<double>(c);
      EXPECT_NEAR(a.stats.rows[cell[i]][s], sum / members.size(), 1e-12);
    }
  }
}

TEST(AssignClasses, Totality) {
  Rng rng(16);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<AccountProfile> ps;
    const auto n = 1 + rng.below(40);
    for (std::uint64_t i = 0; i < n; ++i)
      ps.push_back(volume_profile(static_cast<std::int64_t>(rng.below(50)), rng.below(6)));
    const GridShape shape{1 + rng.below(5), 1 + rng.below(5)};
    const auto a = assign_classes(ps, shape);
    ASSERT_EQ(a.classes.size(), ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) {
      EXPECT_LT(a.classes[i], shape.cells());
      EXPECT_EQ(a.classes[i], a.grid.class_of(ps[i]));
      EXPECT_GT(a.stats.members[a.classes[i]], 0u);
    }
  }
}

// ---- persistence ----

TEST(ProfilerModel, SaveLoadRoundTrip) {
  Rng rng(17);
  testing::RandomTxnConfig cfg;
  const auto records = random_records(rng, cfg);
  auto store = TransactionStore::build(records);
  const auto m = fit_profiler(store, all_rows(store), exact_rates());
  std::stringstream buf;
  m.save(buf);
  const auto back = ProfilerModel::load(buf);
  EXPECT_EQ(back, m);
  EXPECT_EQ(back.hash(), m.hash());
  std::stringstream bad("CRPXXX01");
  EXPECT_THROW(ProfilerModel::load(bad), FormatError);
}

TEST(ProfileSnapshot, RoundTrip) {
  Rng rng(18);
  testing::RandomTxnConfig cfg;
  cfg.allow_self = true;
  const auto records = random_records(rng, cfg);
  auto store = TransactionStore::build(records);
  const auto rates = exact_rates();
  const auto profiles = build_profiles(store, all_rows(store), usd_thresholds(10, 100, 1000), rates);
  std::stringstream buf;
  save_profiles(buf, profiles, 42);
  const auto snap = load_profiles(buf);
  EXPECT_EQ(snap.model_hash, 42u);
  EXPECT_EQ(snap.profiles, profiles);
}

}  // namespace
}  // namespace crpaml
