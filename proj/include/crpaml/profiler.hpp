#pragma once

// Causal per-account profiles and account-class statistics.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "crpaml/common.hpp"
#include "crpaml/txstore.hpp"

namespace crpaml {

// ---- size buckets ------------------------------------------------------------

enum class SizeBucket : std::uint8_t { Small, Medium, Large, ExtraLarge };
inline constexpr std::size_t kSizeBucketCount = 4;
inline constexpr std::array<std::string_view, kSizeBucketCount> kSizeBucketNames{"small", "medium", "large",
                                                                                 "extra_large"};

struct SizeThresholds {
  UsdAmount p50, p80, p93;
  bool operator==(const SizeThresholds&) const = default;
};

inline SizeBucket size_bucket(UsdAmount usd, const SizeThresholds& t) {
  if (usd <= t.p50) return SizeBucket::Small;
  if (usd <= t.p80) return SizeBucket::Medium;
  if (usd <= t.p93) return SizeBucket::Large;
  return SizeBucket::ExtraLarge;
}

/// Nearest-rank quantile num/den of an ascending sample.
template <class T>
T nearest_rank(const std::vector<T>& sorted, std::uint64_t num, std::uint64_t den) {
  if (sorted.empty()) throw ConfigError("quantile of an empty sample");
  std::uint64_t rank = (num * sorted.size() + den - 1) / den;
  rank = std::clamp<std::uint64_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

inline std::vector<std::size_t> all_rows(const TransactionStore& store) {
  std::vector<std::size_t> rows(store.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return rows;
}

inline SizeThresholds fit_size_thresholds(const TransactionStore& store, std::span<const std::size_t> rows,
                                          const RateTable& rates) {
  if (rows.empty()) throw ConfigError("size thresholds need at least one training transaction");
  std::vector<std::int64_t> usd;
  usd.reserve(rows.size());
  for (auto i : rows) usd.push_back(usd_paid(store[i], rates).micros);
  std::sort(usd.begin(), usd.end());
  return {UsdAmount{nearest_rank(usd, 50, 100)}, UsdAmount{nearest_rank(usd, 80, 100)},
          UsdAmount{nearest_rank(usd, 93, 100)}};
}

// ---- categories ----------------------------------------------------------------

enum class Direction : std::uint8_t { In, Out };

inline constexpr std::size_t kCategoryCount = kSizeBucketCount * kCurrencyCount * kFormatCount;

struct TxCategory {
  SizeBucket size = SizeBucket::Small;
  Currency currency = Currency::UsDollar;
  PaymentFormat format = PaymentFormat::ACH;

  std::uint16_t index() const {
    return static_cast<std::uint16_t>((static_cast<std::size_t>(size) * kCurrencyCount +
                                       static_cast<std::size_t>(currency)) *
                                          kFormatCount +
                                      static_cast<std::size_t>(format));
  }
  static TxCategory from_index(std::size_t i) {
    return {static_cast<SizeBucket>(i / (kCurrencyCount * kFormatCount)),
            static_cast<Currency>(i / kFormatCount % kCurrencyCount), static_cast<PaymentFormat>(i % kFormatCount)};
  }
  std::string str() const {
    return std::string(kSizeBucketNames[static_cast<std::size_t>(size)]) + "/" + std::string(code(currency)) + "/" +
           std::string(name(format));
  }
  bool operator==(const TxCategory&) const = default;
};

/// Currency on the account's side of the transfer.
inline Currency side_currency(const TransactionRecord& r, Direction d) {
  return d == Direction::Out ? r.payment_currency : r.receiving_currency;
}

inline TxCategory categorize(const TransactionRecord& r, Direction d, const SizeThresholds& t,
                             const RateTable& rates) {
  return {size_bucket(usd_paid(r, rates), t), side_currency(r, d), r.format};
}

// ---- profiles ------------------------------------------------------------------

struct PartnerStats {
  std::uint64_t count = 0;
  std::int64_t sum_usd = 0;  // micro-USD
  std::int64_t last_timestamp = 0;
  std::int64_t sum_inter_arrival = 0;  // seconds, consecutive events with this partner
  bool operator==(const PartnerStats&) const = default;
};

struct AccountProfile {
  AccountId account;
  std::uint64_t n_in = 0, n_out = 0;
  std::int64_t sum_in_usd = 0, sum_out_usd = 0;  // micro-USD
  std::map<AccountId, PartnerStats> partners;
  std::map<std::uint16_t, std::uint64_t> categories;
  std::array<std::uint64_t, kCurrencyCount> currencies{};
  std::array<std::uint64_t, kFormatCount> formats{};
  std::optional<std::int64_t> first_seen, last_seen;

  std::uint64_t total() const { return n_in + n_out; }
  std::int64_t volume() const { return sum_in_usd + sum_out_usd; }
  bool operator==(const AccountProfile&) const = default;
};

inline void update_profile(AccountProfile& p, const TransactionRecord& r, Direction d, const SizeThresholds& t,
                           const RateTable& rates) {
  if (p.last_seen && r.timestamp < *p.last_seen)
    throw OrderingError("profile update out of order for account " + p.account.str());
  const std::int64_t usd = usd_paid(r, rates).micros;
  if (d == Direction::Out) {
    ++p.n_out;
    p.sum_out_usd += usd;
  } else {
    ++p.n_in;
    p.sum_in_usd += usd;
  }
  auto [it, fresh] = p.partners.try_emplace(d == Direction::Out ? r.to : r.from);
  PartnerStats& ps = it->second;
  if (!fresh) ps.sum_inter_arrival += r.timestamp - ps.last_timestamp;
  ++ps.count;
  ps.sum_usd += usd;
  ps.last_timestamp = r.timestamp;
  ++p.categories[TxCategory{size_bucket(UsdAmount{usd}, t), side_currency(r, d), r.format}.index()];
  ++p.currencies[static_cast<std::size_t>(side_currency(r, d))];
  ++p.formats[static_cast<std::size_t>(r.format)];
  if (!p.first_seen) p.first_seen = r.timestamp;
  p.last_seen = r.timestamp;
}

/// Mean gap between consecutive transactions with the same partner, pooled
/// over partners. Zero when no partner repeats.
inline double mean_inter_arrival(const AccountProfile& p, bool* has_repeat = nullptr) {
  std::int64_t gaps = 0;
  std::uint64_t n = 0;
  for (const auto& [_, ps] : p.partners) {
    gaps += ps.sum_inter_arrival;
    n += ps.count - 1;
  }
  if (has_repeat) *has_repeat = n > 0;
  return n == 0 ? 0.0 : static_cast<double>(gaps) / static_cast<double>(n);
}

/// Most frequent categories, by count then by category index.
inline std::vector<std::uint16_t> top_types(const AccountProfile& p, std::size_t k) {
  std::vector<std::pair<std::uint64_t, std::uint16_t>> v;
  for (const auto& [cat, n] : p.categories) v.emplace_back(n, cat);
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
  std::vector<std::uint16_t> out;
  for (std::size_t i = 0; i < std::min(k, v.size()); ++i) out.push_back(v[i].second);
  return out;
}

/// Streaming fold of transactions into profiles, one event per side.
class ProfileBook {
 public:
  ProfileBook(const SizeThresholds& t, const RateTable& rates) : thresholds_(t), rates_(&rates) {}

  void apply(const TransactionRecord& r) {
    update(r.from, r, Direction::Out);
    update(r.to, r, Direction::In);
  }

  const AccountProfile* find(const AccountId& a) const {
    auto it = book_.find(a);
    return it == book_.end() ? nullptr : &it->second;
  }

  /// Profile or an empty one for accounts not seen yet.
  const AccountProfile& get(const AccountId& a) const {
    static const AccountProfile kEmpty;
    const auto* p = find(a);
    return p ? *p : kEmpty;
  }

  std::size_t size() const { return book_.size(); }

  std::vector<AccountProfile> profiles() const {
    std::vector<AccountProfile> out;
    out.reserve(book_.size());
    for (const auto& [_, p] : book_) out.push_back(p);
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.account < b.account; });
    return out;
  }

 private:
  void update(const AccountId& a, const TransactionRecord& r, Direction d) {
    auto [it, fresh] = book_.try_emplace(a);
    if (fresh) it->second.account = a;
    update_profile(it->second, r, d, thresholds_, *rates_);
  }

  SizeThresholds thresholds_;
  const RateTable* rates_;
  std::unordered_map<AccountId, AccountProfile, AccountIdHash> book_;
};

inline std::vector<AccountProfile> build_profiles(const TransactionStore& store, std::span<const std::size_t> rows,
                                                  const SizeThresholds& t, const RateTable& rates) {
  ProfileBook book(t, rates);
  for (auto i : rows) book.apply(store[i]);
  return book.profiles();
}

/// Calls visit(group_begin, group_end) for each run of equal timestamps.
template <class Visit>
void for_each_timestamp_group(const TransactionStore& store, Visit&& visit) {
  std::size_t begin = 0;
  while (begin < store.size()) {
    std::size_t end = begin + 1;
    while (end < store.size() && store[end].timestamp == store[begin].timestamp) ++end;
    visit(begin, end);
    begin = end;
  }
}

/// Streams the whole store; visit(i, sender_profile, receiver_profile) sees
/// only transactions strictly earlier than record i.
template <class Visit>
void stream_causal_profiles(const TransactionStore& store, const SizeThresholds& t, const RateTable& rates,
                            Visit&& visit) {
  ProfileBook book(t, rates);
  for_each_timestamp_group(store, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) visit(i, book.get(store[i].from), book.get(store[i].to));
    for (std::size_t i = begin; i < end; ++i) book.apply(store[i]);
  });
}

// ---- type vocabulary -------------------------------------------------------------

class TypeVocabulary {
 public:
  static constexpr std::size_t kSize = 64;
  static constexpr std::size_t kOther = kSize;
  static constexpr std::size_t kSlots = kSize + 1;

  TypeVocabulary() { lookup_.fill(kOther); }
  explicit TypeVocabulary(std::vector<std::uint16_t> categories) : categories_(std::move(categories)) {
    if (categories_.size() > kSize) throw ConfigError("type vocabulary holds at most 64 entries");
    lookup_.fill(kOther);
    for (std::size_t i = 0; i < categories_.size(); ++i) {
      if (categories_[i] >= kCategoryCount) throw FormatError("type vocabulary entry out of range");
      lookup_[categories_[i]] = static_cast<std::uint8_t>(i);
    }
  }

  std::size_t index_of(std::uint16_t category) const { return lookup_[category]; }
  const std::vector<std::uint16_t>& categories() const { return categories_; }
  bool operator==(const TypeVocabulary& o) const { return categories_ == o.categories_; }

 private:
  std::vector<std::uint16_t> categories_;
  std::array<std::uint8_t, kCategoryCount> lookup_{};
};

inline TypeVocabulary fit_type_vocabulary(std::span<const AccountProfile> profiles) {
  std::array<std::uint64_t, kCategoryCount> counts{};
  for (const auto& p : profiles)
    for (const auto& [cat, n] : p.categories) counts[cat] += n;
  std::vector<std::uint16_t> order;
  for (std::size_t i = 0; i < kCategoryCount; ++i)
    if (counts[i] > 0) order.push_back(static_cast<std::uint16_t>(i));
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return counts[a] > counts[b]; });
  if (order.size() > TypeVocabulary::kSize) order.resize(TypeVocabulary::kSize);
  return TypeVocabulary(std::move(order));
}

// ---- account classes -------------------------------------------------------------

struct GridShape {
  std::size_t volume = 4, count = 4;
  std::size_t cells() const { return volume * count; }
  bool operator==(const GridShape&) const = default;
};

/// K must be a perfect square; K = 16 gives the 4 x 4 grid.
inline GridShape grid_for(std::size_t k) {
  if (k < 1) throw ConfigError("class count must be at least 1");
  std::size_t r = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(k))));
  if (r * r != k) throw ConfigError("class count " + std::to_string(k) + " is not a square grid size");
  return {r, r};
}

struct ClassGrid {
  GridShape shape;
  std::vector<std::int64_t> volume_edges;   // micro-USD, shape.volume - 1 entries
  std::vector<std::uint64_t> count_edges;   // shape.count - 1 entries
  std::vector<std::uint32_t> representative;  // cell -> class id

  /// Bucket = number of edges strictly below the value.
  template <class T>
  static std::size_t bucket(const std::vector<T>& edges, T v) {
    return static_cast<std::size_t>(std::lower_bound(edges.begin(), edges.end(), v) - edges.begin());
  }
  std::size_t cell_of(std::int64_t volume, std::uint64_t count) const {
    return bucket(volume_edges, volume) * shape.count + bucket(count_edges, count);
  }
  std::uint32_t class_of(const AccountProfile& p) const { return representative[cell_of(p.volume(), p.total())]; }
  bool operator==(const ClassGrid&) const = default;
};

/// Per class: average counts per size bucket, per format, per currency.
inline constexpr std::size_t kClassRowWidth = kSizeBucketCount + kFormatCount + kCurrencyCount;
using ClassRow = std::array<double, kClassRowWidth>;

struct ClassStats {
  std::vector<ClassRow> rows;          // indexed by class id; merged cells copy their target
  std::vector<std::uint64_t> members;  // members of the class the cell resolves to
  bool operator==(const ClassStats&) const = default;
};

struct ClassAssignment {
  ClassGrid grid;
  ClassStats stats;
  std::vector<std::uint32_t> classes;  // aligned with the input profiles
};

inline ClassRow class_counts(const AccountProfile& p) {
  ClassRow row{};
  for (const auto& [cat, n] : p.categories) row[cat / (kCurrencyCount * kFormatCount)] += static_cast<double>(n);
  for (std::size_t f = 0; f < kFormatCount; ++f) row[kSizeBucketCount + f] = static_cast<double>(p.formats[f]);
  for (std::size_t c = 0; c < kCurrencyCount; ++c)
    row[kSizeBucketCount + kFormatCount + c] = static_cast<double>(p.currencies[c]);
  return row;
}

inline ClassAssignment assign_classes(std::span<const AccountProfile> profiles, GridShape shape) {
  if (shape.volume < 1 || shape.count < 1) throw ConfigError("class grid needs at least one bucket per axis");
  if (profiles.empty()) throw ConfigError("class assignment needs at least one profile");
  ClassAssignment out;
  ClassGrid& g = out.grid;
  g.shape = shape;
  std::vector<std::int64_t> volumes;
  std::vector<std::uint64_t> counts;
  for (const auto& p : profiles) {
    volumes.push_back(p.volume());
    counts.push_back(p.total());
  }
  std::sort(volumes.begin(), volumes.end());
  std::sort(counts.begin(), counts.end());
  for (std::size_t j = 1; j < shape.volume; ++j) g.volume_edges.push_back(nearest_rank(volumes, j, shape.volume));
  for (std::size_t j = 1; j < shape.count; ++j) g.count_edges.push_back(nearest_rank(counts, j, shape.count));

  const std::size_t cells = shape.cells();
  std::vector<std::uint64_t> members(cells, 0);
  std::vector<ClassRow> sums(cells, ClassRow{});
  std::vector<std::size_t> cell_of(profiles.size());
  for (std::size_t i = 0; i < profiles.size(); ++i) {
    cell_of[i] = g.cell_of(profiles[i].volume(), profiles[i].total());
    ++members[cell_of[i]];
    const ClassRow row = class_counts(profiles[i]);
    for (std::size_t k = 0; k < kClassRowWidth; ++k) sums[cell_of[i]][k] += row[k];
  }

  // Empty cells resolve to the nearest occupied cell: volume distance first,
  // then count distance, then lowest cell id.
  g.representative.resize(cells);
  for (std::size_t c = 0; c < cells; ++c) {
    if (members[c] > 0) {
      g.representative[c] = static_cast<std::uint32_t>(c);
      continue;
    }
    const auto vc = static_cast<std::ptrdiff_t>(c / shape.count), cc = static_cast<std::ptrdiff_t>(c % shape.count);
    std::size_t best = cells;
    std::pair<std::ptrdiff_t, std::ptrdiff_t> best_key{};
    for (std::size_t o = 0; o < cells; ++o) {
      if (members[o] == 0) continue;
      const std::pair<std::ptrdiff_t, std::ptrdiff_t> key{
          std::abs(static_cast<std::ptrdiff_t>(o / shape.count) - vc),
          std::abs(static_cast<std::ptrdiff_t>(o % shape.count) - cc)};
      if (best == cells || key < best_key) {
        best = o;
        best_key = key;
      }
    }
    g.representative[c] = static_cast<std::uint32_t>(best);
  }

  out.stats.rows.assign(cells, ClassRow{});
  out.stats.members.assign(cells, 0);
  for (std::size_t c = 0; c < cells; ++c) {
    const std::size_t r = g.representative[c];
    out.stats.members[c] = members[r];
    for (std::size_t k = 0; k < kClassRowWidth; ++k) out.stats.rows[c][k] = sums[r][k] / static_cast<double>(members[r]);
  }
  out.classes.resize(profiles.size());
  for (std::size_t i = 0; i < profiles.size(); ++i) out.classes[i] = g.representative[cell_of[i]];
  return out;
}

inline ClassAssignment assign_classes(std::span<const AccountProfile> profiles, std::size_t k) {
  return assign_classes(profiles, grid_for(k));
}

// ---- feature layout ----------------------------------------------------------------

/// How a field is prepared before the network sees it.
enum class FeatureKind : std::uint8_t {
  Heavy,    // log1p, then standardized
  Numeric,  // standardized
  Binary,   // flags and one-hots, left as is
};

struct FeatureField {
  std::string name;
  std::size_t width;
  FeatureKind kind;
  bool operator==(const FeatureField&) const = default;
};

inline std::size_t total_width(const std::vector<FeatureField>& fields) {
  std::size_t w = 0;
  for (const auto& f : fields) w += f.width;
  return w;
}

inline const std::vector<FeatureField>& profile_fields() {
  static const std::vector<FeatureField> fields{
      {"n_in", 1, FeatureKind::Heavy},
      {"n_out", 1, FeatureKind::Heavy},
      {"mean_in_usd", 1, FeatureKind::Heavy},
      {"mean_out_usd", 1, FeatureKind::Heavy},
      {"mean_inter_arrival_s", 1, FeatureKind::Heavy},
      {"has_repeat_partner", 1, FeatureKind::Binary},
      {"unique_partners", 1, FeatureKind::Heavy},
      {"top_currency", kCurrencyCount + 1, FeatureKind::Binary},
      {"top_format", kFormatCount + 1, FeatureKind::Binary},
      {"top5_types", TypeVocabulary::kSlots, FeatureKind::Binary},
      {"class_avg_size", kSizeBucketCount, FeatureKind::Heavy},
      {"class_avg_format", kFormatCount, FeatureKind::Heavy},
      {"class_avg_currency", kCurrencyCount, FeatureKind::Heavy},
  };
  return fields;
}

inline constexpr std::size_t kProfileWidth = 7 + (kCurrencyCount + 1) + (kFormatCount + 1) + TypeVocabulary::kSlots +
                                             kClassRowWidth;

// ---- fitted profiler ----------------------------------------------------------------

/// Everything fitted on the training partition and frozen for scoring.
struct ProfilerModel {
  SizeThresholds thresholds;
  TypeVocabulary vocab;
  ClassGrid grid;
  ClassStats stats;

  std::uint64_t hash() const {
    Fnv1a h;
    h.update("profiler-v1");
    h.update_u64(static_cast<std::uint64_t>(thresholds.p50.micros));
    h.update_u64(static_cast<std::uint64_t>(thresholds.p80.micros));
    h.update_u64(static_cast<std::uint64_t>(thresholds.p93.micros));
    for (auto c : vocab.categories()) h.update_u64(c);
    h.update_u64(grid.shape.volume).update_u64(grid.shape.count);
    for (auto e : grid.volume_edges) h.update_u64(static_cast<std::uint64_t>(e));
    for (auto e : grid.count_edges) h.update_u64(e);
    for (auto r : grid.representative) h.update_u64(r);
    for (const auto& row : stats.rows)
      for (double v : row) h.update_f64(v);
    for (auto m : stats.members) h.update_u64(m);
    return h.digest();
  }

  bool operator==(const ProfilerModel&) const = default;

  void save(std::ostream& os) const;
  static ProfilerModel load(std::istream& is);
  void save(const std::string& path) const;
  static ProfilerModel load(const std::string& path);
};

inline ProfilerModel fit_profiler(const TransactionStore& store, std::span<const std::size_t> training_rows,
                                  const RateTable& rates, GridShape shape = {}) {
  ProfilerModel m;
  m.thresholds = fit_size_thresholds(store, training_rows, rates);
  const auto profiles = build_profiles(store, training_rows, m.thresholds, rates);
  m.vocab = fit_type_vocabulary(profiles);
  auto classes = assign_classes(profiles, shape);
  m.grid = std::move(classes.grid);
  m.stats = std::move(classes.stats);
  return m;
}

/// Writes kProfileWidth raw values (no scaling) for one profile.
inline void profile_feature_vector(const AccountProfile& p, const ProfilerModel& m, std::span<double> out) {
  if (out.size() != kProfileWidth) throw ShapeError("profile feature buffer has the wrong width");
  std::fill(out.begin(), out.end(), 0.0);
  std::size_t k = 0;
  bool repeat = false;
  const double gap = mean_inter_arrival(p, &repeat);
  out[k++] = static_cast<double>(p.n_in);
  out[k++] = static_cast<double>(p.n_out);
  out[k++] = p.n_in ? static_cast<double>(p.sum_in_usd) * 1e-6 / static_cast<double>(p.n_in) : 0.0;
  out[k++] = p.n_out ? static_cast<double>(p.sum_out_usd) * 1e-6 / static_cast<double>(p.n_out) : 0.0;
  out[k++] = gap;
  out[k++] = repeat ? 1.0 : 0.0;
  out[k++] = static_cast<double>(p.partners.size());

  auto argmax = [](const auto& counts, std::size_t none) {
    std::size_t best = none;
    std::uint64_t best_n = 0;
    for (std::size_t i = 0; i < counts.size(); ++i)
      if (counts[i] > best_n) {
        best = i;
        best_n = counts[i];
      }
    return best;
  };
  out[k + argmax(p.currencies, kCurrencyCount)] = 1.0;
  k += kCurrencyCount + 1;
  out[k + argmax(p.formats, kFormatCount)] = 1.0;
  k += kFormatCount + 1;
  for (auto cat : top_types(p, 5)) out[k + m.vocab.index_of(cat)] = 1.0;
  k += TypeVocabulary::kSlots;
  const ClassRow& row = m.stats.rows[m.grid.class_of(p)];
  std::copy(row.begin(), row.end(), out.begin() + static_cast<std::ptrdiff_t>(k));
}

inline std::vector<double> profile_feature_vector(const AccountProfile& p, const ProfilerModel& m) {
  std::vector<double> v(kProfileWidth);
  profile_feature_vector(p, m, v);
  return v;
}

// ---- persistence ---------------------------------------------------------------------

inline constexpr std::string_view kProfilerMagic = "CRPPRF01";

inline void ProfilerModel::save(std::ostream& os) const {
  os.write(kProfilerMagic.data(), 8);
  const auto& fields = profile_fields();
  io::put_u64(os, fields.size());
  for (const auto& f : fields) {
    io::put_string(os, f.name);
    io::put_u64(os, f.width);
    io::put_u8(os, static_cast<std::uint8_t>(f.kind));
  }
  io::put_i64(os, thresholds.p50.micros);
  io::put_i64(os, thresholds.p80.micros);
  io::put_i64(os, thresholds.p93.micros);
  io::put_u64(os, vocab.categories().size());
  for (auto c : vocab.categories()) io::put_u64(os, c);
  io::put_u64(os, grid.shape.volume);
  io::put_u64(os, grid.shape.count);
  for (auto e : grid.volume_edges) io::put_i64(os, e);
  for (auto e : grid.count_edges) io::put_u64(os, e);
  for (auto r : grid.representative) io::put_u64(os, r);
  for (std::size_t c = 0; c < grid.shape.cells(); ++c) {
    io::put_u64(os, stats.members[c]);
    for (double v : stats.rows[c]) io::put_f64(os, v);
  }
}

inline ProfilerModel ProfilerModel::load(std::istream& is) {
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string_view(magic, 8) != kProfilerMagic) throw FormatError("not a profiler model file (bad version tag)");
  const auto& fields = profile_fields();
  if (io::get_u64(is) != fields.size()) throw FormatError("profiler model: feature layout differs from this build");
  for (const auto& f : fields) {
    const auto name = io::get_string(is, 256);
    const auto width = io::get_u64(is);
    const auto kind = io::get_u8(is);
    if (name != f.name || width != f.width || kind != static_cast<std::uint8_t>(f.kind))
      throw FormatError("profiler model: feature field " + name + " differs from this build");
  }
  ProfilerModel m;
  m.thresholds.p50.micros = io::get_i64(is);
  m.thresholds.p80.micros = io::get_i64(is);
  m.thresholds.p93.micros = io::get_i64(is);
  const auto nv = io::get_u64(is);
  if (nv > TypeVocabulary::kSize) throw FormatError("profiler model: vocabulary too large");
  std::vector<std::uint16_t> cats;
  for (std::uint64_t i = 0; i < nv; ++i) cats.push_back(static_cast<std::uint16_t>(io::get_u64(is)));
  m.vocab = TypeVocabulary(std::move(cats));
  m.grid.shape.volume = io::get_u64(is);
  m.grid.shape.count = io::get_u64(is);
  if (m.grid.shape.volume < 1 || m.grid.shape.count < 1 || m.grid.shape.cells() > 4096)
    throw FormatError("profiler model: bad class grid shape");
  for (std::size_t j = 1; j < m.grid.shape.volume; ++j) m.grid.volume_edges.push_back(io::get_i64(is));
  for (std::size_t j = 1; j < m.grid.shape.count; ++j) m.grid.count_edges.push_back(io::get_u64(is));
  for (std::size_t c = 0; c < m.grid.shape.cells(); ++c) {
    const auto r = io::get_u64(is);
    if (r >= m.grid.shape.cells()) throw FormatError("profiler model: class id out of range");
    m.grid.representative.push_back(static_cast<std::uint32_t>(r));
  }
  m.stats.rows.resize(m.grid.shape.cells());
  for (std::size_t c = 0; c < m.grid.shape.cells(); ++c) {
    m.stats.members.push_back(io::get_u64(is));
    for (double& v : m.stats.rows[c]) v = io::get_f64(is);
  }
  return m;
}

inline void ProfilerModel::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write profiler model " + path);
  save(os);
}

inline ProfilerModel ProfilerModel::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NotFoundError("missing artifact: profiler model " + path);
  return load(is);
}

inline constexpr std::string_view kProfileSnapshotMagic = "CRPPRS01";

/// Snapshot of profile state at some cutoff, tagged with the model hash.
inline void save_profiles(std::ostream& os, std::span<const AccountProfile> profiles, std::uint64_t model_hash) {
  os.write(kProfileSnapshotMagic.data(), 8);
  io::put_u64(os, model_hash);
  io::put_u64(os, profiles.size());
  auto put_account = [&](const AccountId& a) {
    io::put_string(os, a.bank);
    io::put_string(os, a.account);
  };
  for (const auto& p : profiles) {
    put_account(p.account);
    io::put_u64(os, p.n_in);
    io::put_u64(os, p.n_out);
    io::put_i64(os, p.sum_in_usd);
    io::put_i64(os, p.sum_out_usd);
    io::put_u8(os, p.first_seen ? 1 : 0);
    io::put_i64(os, p.first_seen.value_or(0));
    io::put_i64(os, p.last_seen.value_or(0));
    io::put_u64(os, p.partners.size());
    for (const auto& [a, s] : p.partners) {
      put_account(a);
      io::put_u64(os, s.count);
      io::put_i64(os, s.sum_usd);
      io::put_i64(os, s.last_timestamp);
      io::put_i64(os, s.sum_inter_arrival);
    }
    io::put_u64(os, p.categories.size());
    for (const auto& [c, n] : p.categories) {
      io::put_u64(os, c);
      io::put_u64(os, n);
    }
    for (auto n : p.currencies) io::put_u64(os, n);
    for (auto n : p.formats) io::put_u64(os, n);
  }
}

struct ProfileSnapshot {
  std::uint64_t model_hash = 0;
  std::vector<AccountProfile> profiles;
};

inline ProfileSnapshot load_profiles(std::istream& is) {
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string_view(magic, 8) != kProfileSnapshotMagic)
    throw FormatError("not a profile snapshot (bad version tag)");
  ProfileSnapshot snap;
  snap.model_hash = io::get_u64(is);
  const auto n = io::get_u64(is);
  auto get_account = [&] {
    AccountId a;
    a.bank = io::get_string(is);
    a.account = io::get_string(is);
    return a;
  };
  for (std::uint64_t i = 0; i < n; ++i) {
    AccountProfile p;
    p.account = get_account();
    p.n_in = io::get_u64(is);
    p.n_out = io::get_u64(is);
    p.sum_in_usd = io::get_i64(is);
    p.sum_out_usd = io::get_i64(is);
    const bool seen = io::get_u8(is) == 1;
    const auto first = io::get_i64(is), last = io::get_i64(is);
    if (seen) {
      p.first_seen = first;
      p.last_seen = last;
    }
    const auto np = io::get_u64(is);
    for (std::uint64_t j = 0; j < np; ++j) {
      auto a = get_account();
      PartnerStats s;
      s.count = io::get_u64(is);
      s.sum_usd = io::get_i64(is);
      s.last_timestamp = io::get_i64(is);
      s.sum_inter_arrival = io::get_i64(is);
      p.partners.emplace(std::move(a), s);
    }
    const auto nc = io::get_u64(is);
    for (std::uint64_t j = 0; j < nc; ++j) {
      const auto c = io::get_u64(is);
      if (c >= kCategoryCount) throw FormatError("profile snapshot: category out of range");
      p.categories[static_cast<std::uint16_t>(c)] = io::get_u64(is);
    }
    for (auto& v : p.currencies) v = io::get_u64(is);
    for (auto& v : p.formats) v = io::get_u64(is);
    snap.profiles.push_back(std::move(p));
  }
  return snap;
}

}  // namespace crpaml
