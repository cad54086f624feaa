#pragma once

// Feature fusion and the CRP network: context encoder, two encoding modules,
// L2-regularized concatenation, decoder and sigmoid head.

#include <algorithm>
#include <bitset>
#include <cmath>
#include <fstream>
#include <future>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "crpaml/common.hpp"
#include "crpaml/neuralcore.hpp"
#include "crpaml/profiler.hpp"
#include "crpaml/riskmodel.hpp"
#include "crpaml/txstore.hpp"
#include "json.hpp"

namespace crpaml {

using nn::Matrix;

// ---- blocks ------------------------------------------------------------------------------

enum class Block : std::uint8_t { Transaction, Risk, Derived, SenderContext, ReceiverContext };
inline constexpr std::size_t kBlockCount = 5;
inline constexpr std::array<std::string_view, kBlockCount> kBlockNames{"transaction", "risk", "derived",
                                                                       "sender_context", "receiver_context"};

/// Blocks zeroed at assembly time.
struct BlockMask {
  std::bitset<kBlockCount> bits;

  bool dropped(Block b) const { return bits.test(static_cast<std::size_t>(b)); }
  void drop(Block b) { bits.set(static_cast<std::size_t>(b)); }
  bool none() const { return bits.none(); }
  bool operator==(const BlockMask&) const = default;

  /// Accepts "context", "risk" and "derived"; context covers both parties.
  static BlockMask parse(const std::vector<std::string>& names) {
    BlockMask m;
    for (const auto& n : names) {
      if (n == "context") {
        m.drop(Block::SenderContext);
        m.drop(Block::ReceiverContext);
      } else if (n == "risk") {
        m.drop(Block::Risk);
      } else if (n == "derived") {
        m.drop(Block::Derived);
      } else {
        throw ConfigError("unknown block to drop: " + n + " (expected context, risk or derived)");
      }
    }
    if (m.dropped(Block::Risk) && m.dropped(Block::Derived) && m.dropped(Block::SenderContext))
      throw ConfigError("cannot drop every optional block");
    return m;
  }

  std::string str() const {
    std::vector<std::string> parts;
    if (dropped(Block::SenderContext)) parts.push_back("context");
    if (dropped(Block::Risk)) parts.push_back("risk");
    if (dropped(Block::Derived)) parts.push_back("derived");
    std::string s;
    for (const auto& p : parts) s += (s.empty() ? "" : "+") + p;
    return s.empty() ? "none" : s;
  }
};

// ---- feature schema ----------------------------------------------------------------------

struct SchemaField {
  std::string name;
  std::size_t width = 1;
  FeatureKind kind = FeatureKind::Numeric;
  std::vector<std::string> vocabulary;  // one-hot labels; the last one is the catch-all slot
  bool operator==(const SchemaField&) const = default;
};

struct SchemaBlock {
  std::string name;
  std::vector<SchemaField> fields;
  std::size_t width() const {
    std::size_t w = 0;
    for (const auto& f : fields) w += f.width;
    return w;
  }
  bool operator==(const SchemaBlock&) const = default;
};

inline constexpr double kStdFloor = 1e-8;
inline constexpr std::size_t kTransactionWidth = 2 * (kCurrencyCount + 1) + (kFormatCount + 1) + 1 + 4;
inline constexpr std::size_t kRiskWidth = kRiskIndicatorCount + 1;
inline constexpr std::size_t kDerivedWidth = 2 + (kFreqBucketCount + 1) + (kSizeBucketCount + 1) + 2;
inline constexpr std::size_t kInputWidth = kTransactionWidth + kRiskWidth + kDerivedWidth + 2 * kProfileWidth;

class FeatureSchema {
 public:
  std::vector<SchemaBlock> blocks;
  std::vector<double> mean;    // per column; 0 for binary columns
  std::vector<double> stddev;  // per column; 1 for binary columns

  std::size_t width() const {
    std::size_t w = 0;
    for (const auto& b : blocks) w += b.width();
    return w;
  }

  std::size_t offset(Block b) const {
    std::size_t o = 0;
    for (std::size_t i = 0; i < static_cast<std::size_t>(b); ++i) o += blocks[i].width();
    return o;
  }
  std::size_t block_width(Block b) const { return blocks[static_cast<std::size_t>(b)].width(); }

  /// Per-column kind, expanded from fields.
  std::vector<FeatureKind> column_kinds() const {
    std::vector<FeatureKind> k;
    for (const auto& b : blocks)
      for (const auto& f : b.fields) k.insert(k.end(), f.width, f.kind);
    return k;
  }

  bool fitted() const { return mean.size() == width() && stddev.size() == width(); }

  std::uint64_t hash() const {
    Fnv1a h;
    h.update("schema-v1");
    for (const auto& b : blocks) {
      h.update(b.name).update_u64(b.fields.size());
      for (const auto& f : b.fields) {
        h.update(f.name).update_u64(f.width).update_u64(static_cast<std::uint64_t>(f.kind));
        h.update_u64(f.vocabulary.size());
        for (const auto& v : f.vocabulary) h.update(v);
      }
    }
    h.update_u64(mean.size());
    for (double v : mean) h.update_f64(v);
    for (double v : stddev) h.update_f64(v);
    return h.digest();
  }

  /// In-place transform of one raw row into network units.
  void normalize(std::span<double> row) const {
    if (!fitted()) throw SchemaError("feature schema has no normalization statistics");
    if (row.size() != width()) throw ShapeError("feature row width " + std::to_string(row.size()) + " != schema " +
                                                std::to_string(width()));
    std::size_t c = 0;
    for (const auto& b : blocks)
      for (const auto& f : b.fields)
        for (std::size_t k = 0; k < f.width; ++k, ++c) {
          if (f.kind == FeatureKind::Binary) continue;
          double v = row[c];
          if (f.kind == FeatureKind::Heavy) v = std::log1p(std::max(v, 0.0));
          row[c] = (v - mean[c]) / stddev[c];
        }
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["version_hash"] = hex64(hash());
    j["width"] = width();
    auto jb = nlohmann::ordered_json::array();
    for (const auto& b : blocks) {
      nlohmann::ordered_json e;
      e["name"] = b.name;
      auto jf = nlohmann::ordered_json::array();
      for (const auto& f : b.fields) {
        nlohmann::ordered_json x;
        x["name"] = f.name;
        x["width"] = f.width;
        x["kind"] = f.kind == FeatureKind::Heavy ? "heavy" : f.kind == FeatureKind::Numeric ? "numeric" : "binary";
        if (!f.vocabulary.empty()) x["vocabulary"] = f.vocabulary;
        jf.push_back(x);
      }
      e["fields"] = jf;
      jb.push_back(e);
    }
    j["blocks"] = jb;
    j["mean"] = mean;
    j["std"] = stddev;
    return j;
  }

  static FeatureSchema from_json(const nlohmann::json& j) {
    FeatureSchema s;
    try {
      for (const auto& e : j.at("blocks")) {
        SchemaBlock b;
        b.name = e.at("name").get<std::string>();
        for (const auto& x : e.at("fields")) {
          SchemaField f;
          f.name = x.at("name").get<std::string>();
          f.width = x.at("width").get<std::size_t>();
          const auto kind = x.at("kind").get<std::string>();
          if (kind == "heavy") f.kind = FeatureKind::Heavy;
          else if (kind == "numeric") f.kind = FeatureKind::Numeric;
          else if (kind == "binary") f.kind = FeatureKind::Binary;
          else throw SchemaError("unknown feature kind " + kind);
          if (x.contains("vocabulary")) f.vocabulary = x.at("vocabulary").get<std::vector<std::string>>();
          b.fields.push_back(std::move(f));
        }
        s.blocks.push_back(std::move(b));
      }
      s.mean = j.at("mean").get<std::vector<double>>();
      s.stddev = j.at("std").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(std::string("feature schema: ") + e.what());
    }
    s.validate();
    if (j.contains("version_hash") && j.at("version_hash").get<std::string>() != hex64(s.hash()))
      throw SchemaError("feature schema: version hash does not match contents");
    return s;
  }

  void validate() const {
    if (blocks.size() != kBlockCount) throw SchemaError("feature schema must have five blocks");
    for (std::size_t i = 0; i < kBlockCount; ++i)
      if (blocks[i].name != kBlockNames[i]) throw SchemaError("feature schema: block " + blocks[i].name + " out of order");
    if (width() != kInputWidth) throw SchemaError("feature schema width " + std::to_string(width()) + " != " +
                                                  std::to_string(kInputWidth));
    for (const auto& b : blocks)
      for (const auto& f : b.fields)
        if (!f.vocabulary.empty() && f.vocabulary.size() != f.width)
          throw SchemaError("feature schema: vocabulary of " + f.name + " does not match its width");
    if (!mean.empty() || !stddev.empty()) {
      if (!fitted()) throw SchemaError("feature schema: statistics do not match the width");
      for (double s : stddev)
        if (!(s >= kStdFloor)) throw SchemaError("feature schema: std below floor");
    }
  }

  bool operator==(const FeatureSchema&) const = default;
};

namespace schema_detail {
inline std::vector<std::string> currency_vocab() {
  std::vector<std::string> v;
  for (const auto& c : kCurrencies) v.emplace_back(c.code);
  v.emplace_back("unknown");
  return v;
}
inline std::vector<std::string> format_vocab() {
  std::vector<std::string> v(kFormatNames.begin(), kFormatNames.end());
  v.emplace_back("unknown");
  return v;
}
template <std::size_t N>
std::vector<std::string> names_vocab(const std::array<std::string_view, N>& names) {
  std::vector<std::string> v(names.begin(), names.end());
  v.emplace_back("unknown");
  return v;
}
}  // namespace schema_detail

/// Unfitted layout; profile vocabularies come from the fitted profiler.
inline FeatureSchema schema_layout(const ProfilerModel& profiler) {
  using schema_detail::currency_vocab;
  using schema_detail::format_vocab;
  FeatureSchema s;
  s.blocks.push_back({"transaction",
                      {{"payment_currency", kCurrencyCount + 1, FeatureKind::Binary, currency_vocab()},
                       {"receiving_currency", kCurrencyCount + 1, FeatureKind::Binary, currency_vocab()},
                       {"payment_format", kFormatCount + 1, FeatureKind::Binary, format_vocab()},
                       {"amount_usd", 1, FeatureKind::Heavy, {}},
                       {"hour_sin", 1, FeatureKind::Numeric, {}},
                       {"hour_cos", 1, FeatureKind::Numeric, {}},
                       {"weekday_sin", 1, FeatureKind::Numeric, {}},
                       {"weekday_cos", 1, FeatureKind::Numeric, {}}}});
  SchemaBlock risk{"risk", {}};
  for (auto n : kRiskIndicatorNames) risk.fields.push_back({"r_" + std::string(n), 1, FeatureKind::Numeric, {}});
  risk.fields.push_back({"composite", 1, FeatureKind::Numeric, {}});
  s.blocks.push_back(std::move(risk));
  s.blocks.push_back({"derived",
                      {{"partner_gap_s", 1, FeatureKind::Heavy, {}},
                       {"one_time", 1, FeatureKind::Binary, {}},
                       {"frequency", kFreqBucketCount + 1, FeatureKind::Binary,
                        schema_detail::names_vocab(kFreqBucketNames)},
                       {"size", kSizeBucketCount + 1, FeatureKind::Binary, schema_detail::names_vocab(kSizeBucketNames)},
                       {"cross_bank", 1, FeatureKind::Binary, {}},
                       {"cross_currency", 1, FeatureKind::Binary, {}}}});
  std::vector<std::string> types;
  for (auto c : profiler.vocab.categories()) types.push_back(TxCategory::from_index(c).str());
  types.resize(TypeVocabulary::kSize, "unused");
  types.emplace_back("other");
  for (auto side : {"sender_context", "receiver_context"}) {
    SchemaBlock b{side, {}};
    for (const auto& f : profile_fields()) {
      SchemaField sf{f.name, f.width, f.kind, {}};
      if (f.name == "top_currency") sf.vocabulary = currency_vocab();
      if (f.name == "top_format") sf.vocabulary = format_vocab();
      if (f.name == "top5_types") sf.vocabulary = types;
      b.fields.push_back(std::move(sf));
    }
    s.blocks.push_back(std::move(b));
  }
  s.validate();
  return s;
}

/// Mean and population std of the transformed raw columns over `rows`.
inline void fit_normalization(FeatureSchema& s, const Matrix& raw, std::span<const std::size_t> rows) {
  if (static_cast<std::size_t>(raw.cols()) != s.width()) throw ShapeError("raw feature matrix width mismatch");
  if (rows.empty()) throw ConfigError("cannot fit normalization on zero rows");
  const auto kinds = s.column_kinds();
  s.mean.assign(s.width(), 0.0);
  s.stddev.assign(s.width(), 1.0);
  for (std::size_t c = 0; c < s.width(); ++c) {
    if (kinds[c] == FeatureKind::Binary) continue;
    auto value = [&](std::size_t r) {
      const double v = raw(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
      return kinds[c] == FeatureKind::Heavy ? std::log1p(std::max(v, 0.0)) : v;
    };
    double sum = 0;
    for (auto r : rows) sum += value(r);
    const double m = sum / static_cast<double>(rows.size());
    double sq = 0;
    for (auto r : rows) sq += (value(r) - m) * (value(r) - m);
    s.mean[c] = m;
    s.stddev[c] = std::max(std::sqrt(sq / static_cast<double>(rows.size())), kStdFloor);
  }
}

// ---- raw assembly ---------------------------------------------------------------------------

struct DerivedFeatures {
  std::optional<std::int64_t> gap;  // seconds since the pair's previous transaction
  SizeBucket size = SizeBucket::Small;
  bool cross_bank = false;
  bool cross_currency = false;
};

inline DerivedFeatures derived_features(const TransactionRecord& t, std::optional<std::int64_t> gap,
                                        const SizeThresholds& th, const RateTable& rates) {
  return {gap, size_bucket(usd_paid(t, rates), th), t.from.bank != t.to.bank,
          t.payment_currency != t.receiving_currency};
}

/// Raw (unnormalized) values; context spans are profile_feature_vector output.
inline void raw_input(const TransactionRecord& t, const RiskFeatures& risk, const DerivedFeatures& d,
                      std::span<const double> sender_ctx, std::span<const double> receiver_ctx,
                      const RateTable& rates, std::span<double> out) {
  if (out.size() != kInputWidth) throw ShapeError("input buffer has the wrong width");
  if (sender_ctx.size() != kProfileWidth || receiver_ctx.size() != kProfileWidth)
    throw ShapeError("context vector has the wrong width");
  std::fill(out.begin(), out.end(), 0.0);
  std::size_t k = 0;
  out[k + static_cast<std::size_t>(t.payment_currency)] = 1.0;
  k += kCurrencyCount + 1;
  out[k + static_cast<std::size_t>(t.receiving_currency)] = 1.0;
  k += kCurrencyCount + 1;
  out[k + static_cast<std::size_t>(t.format)] = 1.0;
  k += kFormatCount + 1;
  out[k++] = usd_paid(t, rates).value();
  constexpr double kTau = 6.283185307179586;
  const std::int64_t day_seconds = ((t.timestamp % 86400) + 86400) % 86400;
  const std::int64_t days = (t.timestamp - day_seconds) / 86400;
  const double hour = static_cast<double>(day_seconds) / 3600.0;
  const double weekday = static_cast<double>(((days + 3) % 7 + 7) % 7);  // Monday = 0
  out[k++] = std::sin(kTau * hour / 24.0);
  out[k++] = std::cos(kTau * hour / 24.0);
  out[k++] = std::sin(kTau * weekday / 7.0);
  out[k++] = std::cos(kTau * weekday / 7.0);

  for (double r : risk.r) out[k++] = r;
  out[k++] = risk.composite;

  out[k++] = d.gap ? static_cast<double>(*d.gap) : 0.0;
  out[k++] = d.gap ? 0.0 : 1.0;
  out[k + static_cast<std::size_t>(freq_bucket(d.gap))] = 1.0;
  k += kFreqBucketCount + 1;
  out[k + static_cast<std::size_t>(d.size)] = 1.0;
  k += kSizeBucketCount + 1;
  out[k++] = d.cross_bank ? 1.0 : 0.0;
  out[k++] = d.cross_currency ? 1.0 : 0.0;

  std::copy(sender_ctx.begin(), sender_ctx.end(), out.begin() + static_cast<std::ptrdiff_t>(k));
  k += kProfileWidth;
  std::copy(receiver_ctx.begin(), receiver_ctx.end(), out.begin() + static_cast<std::ptrdiff_t>(k));
}

inline void apply_mask(std::span<double> row, const FeatureSchema& s, const BlockMask& mask) {
  for (std::size_t b = 0; b < kBlockCount; ++b) {
    if (!mask.bits.test(b)) continue;
    const auto o = s.offset(static_cast<Block>(b));
    std::fill_n(row.begin() + static_cast<std::ptrdiff_t>(o), s.block_width(static_cast<Block>(b)), 0.0);
  }
}

/// Normalized network input for one transaction.
inline std::vector<double> assemble_input(const TransactionRecord& t, const RiskFeatures& risk, const DerivedFeatures& d,
                                          std::span<const double> sender_ctx, std::span<const double> receiver_ctx,
                                          const FeatureSchema& schema, std::uint64_t expected_schema_hash,
                                          const RateTable& rates, const BlockMask& mask = {}) {
  if (schema.hash() != expected_schema_hash)
    throw SchemaError("feature schema " + hex64(schema.hash()) + " does not match expected " +
                      hex64(expected_schema_hash));
  std::vector<double> row(kInputWidth);
  raw_input(t, risk, d, sender_ctx, receiver_ctx, rates, row);
  schema.normalize(row);
  apply_mask(row, schema, mask);
  return row;
}

// ---- dataset preparation ---------------------------------------------------------------------

struct Split {
  std::vector<std::size_t> train, val, test;  // ascending
  /// Training partition = train ∪ val, the rows every fitted artifact sees.
  std::vector<std::size_t> fit_rows() const {
    std::vector<std::size_t> r(train);
    r.insert(r.end(), val.begin(), val.end());
    std::sort(r.begin(), r.end());
    return r;
  }
};

/// Stratified test split, then a stratified validation split of the rest.
inline Split stratified_split(std::span<const std::uint8_t> labels, std::uint64_t seed, double test_fraction = 0.2,
                              double val_fraction = 0.2) {
  Split s;
  Rng rng(derive_seed(seed, "split"));
  for (std::uint8_t cls : {std::uint8_t{0}, std::uint8_t{1}}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if ((labels[i] != 0) == (cls != 0)) idx.push_back(i);
    rng.shuffle(idx);
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(idx.size())));
    const auto n_val =
        static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(idx.size() - n_test)));
    s.test.insert(s.test.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    s.val.insert(s.val.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test),
                 idx.begin() + static_cast<std::ptrdiff_t>(n_test + n_val));
    s.train.insert(s.train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test + n_val), idx.end());
  }
  for (auto* v : {&s.train, &s.val, &s.test}) std::sort(v->begin(), v->end());
  return s;
}

struct PreparedData {
  Split split;
  ProfilerModel profiler;
  RiskTables tables;
  FeatureSchema schema;
  Matrix x;  // normalized, one row per transaction
  std::vector<std::uint8_t> labels;
  std::vector<RiskFeatures> risk;
};

/// Raw feature matrix for every row. Profiles are causal over the whole
/// store; fitted artifacts come from the caller.
inline Matrix raw_feature_matrix(const TransactionStore& store, const RateTable& rates, const ProfilerModel& profiler,
                                 const RiskTables& tables, std::span<const std::optional<std::int64_t>> gaps,
                                 std::vector<RiskFeatures>* risk_out = nullptr) {
  if (gaps.size() != store.size()) throw ShapeError("gap vector does not match the store");
  Matrix raw(static_cast<Eigen::Index>(store.size()), static_cast<Eigen::Index>(kInputWidth));
  if (risk_out) risk_out->resize(store.size());
  std::vector<double> sctx(kProfileWidth), rctx(kProfileWidth);
  stream_causal_profiles(store, profiler.thresholds, rates, [&](std::size_t i, const AccountProfile& s,
                                                                const AccountProfile& r) {
    const auto& t = store[i];
    profile_feature_vector(s, profiler, sctx);
    profile_feature_vector(r, profiler, rctx);
    const auto risk = risk_features(t, gaps[i], tables, rates);
    if (risk_out) (*risk_out)[i] = risk;
    raw_input(t, risk, derived_features(t, gaps[i], profiler.thresholds, rates), sctx, rctx, rates,
              std::span<double>(raw.row(static_cast<Eigen::Index>(i)).data(), kInputWidth));
  });
  return raw;
}

inline void normalize_matrix(Matrix& x, const FeatureSchema& s) {
  for (Eigen::Index i = 0; i < x.rows(); ++i) s.normalize(std::span<double>(x.row(i).data(), kInputWidth));
}

inline std::vector<std::uint8_t> store_labels(const TransactionStore& store) {
  std::vector<std::uint8_t> l(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) l[i] = store[i].is_laundering ? 1 : 0;
  return l;
}

/// Fits profiler, risk tables and normalization on the training partition
/// of `split` and builds the normalized matrix for every row.
inline PreparedData prepare_dataset(const TransactionStore& store, const RateTable& rates, Split split,
                                    double smoothing = 1.0, GridShape grid = {}) {
  PreparedData d;
  d.labels = store_labels(store);
  d.split = std::move(split);
  const auto fit = d.split.fit_rows();
  d.profiler = fit_profiler(store, fit, rates, grid);
  const auto gaps = pair_gaps(store);
  d.tables = fit_risk_tables(store, fit, gaps, rates, smoothing);
  d.schema = schema_layout(d.profiler);
  d.x = raw_feature_matrix(store, rates, d.profiler, d.tables, gaps, &d.risk);
  fit_normalization(d.schema, d.x, fit);
  normalize_matrix(d.x, d.schema);
  return d;
}

inline PreparedData prepare_dataset(const TransactionStore& store, const RateTable& rates, std::uint64_t split_seed,
                                    double smoothing = 1.0, GridShape grid = {}) {
  return prepare_dataset(store, rates, stratified_split(store_labels(store), split_seed), smoothing, grid);
}

// ---- network ---------------------------------------------------------------------------

struct NetworkConfig {
  std::size_t context_hidden = 64;
  std::size_t context_width = 32;
  std::size_t encoder_width = 128;
  std::size_t decoder_width = 64;
  double leaky_slope = 0.3;
  double activity_l2 = 1e-4;
  nn::FocalLossConfig focal{};
  double learning_rate = 1e-3;
  std::size_t batch_size = 1024;
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  std::uint64_t seed = 1;
  double threshold = 0.5;
  double bn_momentum = 0.99;
  double bn_epsilon = 1e-5;

  void validate() const {
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("decision threshold must lie in (0, 1)");
    if (context_hidden == 0 || context_width == 0 || encoder_width == 0 || decoder_width == 0)
      throw ConfigError("layer widths must be positive");
    if (batch_size < 2) throw ConfigError("batch size must be at least 2");
    if (max_epochs == 0) throw ConfigError("max_epochs must be positive");
    if (!(learning_rate > 0)) throw ConfigError("learning rate must be positive");
    if (!(activity_l2 >= 0)) throw ConfigError("activity L2 must be >= 0");
    if (!(focal.alpha >= 0 && focal.alpha <= 1) || !(focal.gamma >= 0)) throw ConfigError("bad focal parameters");
  }

  std::uint64_t hash() const {
    Fnv1a h;
    h.update("network-v1");
    for (auto w : {context_hidden, context_width, encoder_width, decoder_width, batch_size, max_epochs, patience})
      h.update_u64(w);
    for (double v : {leaky_slope, activity_l2, focal.alpha, focal.gamma, learning_rate, threshold, bn_momentum,
                     bn_epsilon})
      h.update_f64(v);
    return h.update_u64(seed).digest();
  }
};

struct Dense {
  nn::DenseParams p;
  Matrix dw, db;
};

struct ForwardCache {
  Matrix a_in, a_z1, a_h1, a_z2, a_h2;
  nn::BatchNormCache a_bn;
  Matrix c_in, c_z1, c_h1, c_z2, c_h2;
  Matrix b_in, b_z1, b_h1, b_z2, b_h2;
  nn::BatchNormCache b_bn;
  Matrix concat, d_z1, d_h1, d_z2, d_h2, head_z, p;
};

/// Parameters and gradients of one CRP network.
class CrpNetwork {
 public:
  NetworkConfig cfg;
  BlockMask mask;
  Dense ctx1, ctx2;          // shared by sender and receiver
  Dense a1, a2, b1, b2;      // encoding modules A and B
  nn::BatchNormState a_bn, b_bn;
  Matrix a_dgamma, a_dbeta, b_dgamma, b_dbeta;
  Dense dec1, dec2, head;

  CrpNetwork() = default;

  CrpNetwork(const NetworkConfig& c, const BlockMask& m, std::size_t main_width = kTransactionWidth + kRiskWidth +
                                                                                  kDerivedWidth,
             std::size_t profile_width = kProfileWidth)
      : cfg(c), mask(m), main_width_(main_width), profile_width_(profile_width) {
    cfg.validate();
    Rng rng(derive_seed(cfg.seed, "init"));
    auto dense = [&](std::size_t in, std::size_t out) {
      Dense d{nn::dense_init(in, out, rng), {}, {}};
      return d;
    };
    ctx1 = dense(profile_width, cfg.context_hidden);
    ctx2 = dense(cfg.context_hidden, cfg.context_width);
    a1 = dense(main_width, cfg.encoder_width);
    a2 = dense(cfg.encoder_width, cfg.encoder_width);
    b1 = dense(2 * cfg.context_width, cfg.encoder_width);
    b2 = dense(cfg.encoder_width, cfg.encoder_width);
    a_bn = nn::BatchNormState::make(cfg.encoder_width);
    b_bn = nn::BatchNormState::make(cfg.encoder_width);
    for (auto* bn : {&a_bn, &b_bn}) {
      bn->momentum = cfg.bn_momentum;
      bn->epsilon = cfg.bn_epsilon;
    }
    dec1 = dense(2 * cfg.encoder_width, cfg.decoder_width);
    dec2 = dense(cfg.decoder_width, cfg.decoder_width);
    head = dense(cfg.decoder_width, 1);
  }

  std::size_t input_width() const { return main_width_ + 2 * profile_width_; }

  /// Two dense layers with Tanh, one embedding row per profile row.
  Matrix encode_context(const Matrix& profiles, ForwardCache* c = nullptr) const {
    nn::require_shape(static_cast<std::size_t>(profiles.cols()) == profile_width_,
                      "context encoder input has " + std::to_string(profiles.cols()) + " columns, expected " +
                          std::to_string(profile_width_));
    Matrix z1 = nn::dense_forward(profiles, ctx1.p);
    Matrix h1 = nn::activate(z1, nn::Activation::Tanh);
    Matrix z2 = nn::dense_forward(h1, ctx2.p);
    Matrix h2 = nn::activate(z2, nn::Activation::Tanh);
    if (c) {
      c->c_z1 = std::move(z1);
      c->c_h1 = std::move(h1);
      c->c_z2 = std::move(z2);
    }
    return h2;
  }

  /// Probabilities (B x 1) for normalized, masked rows.
  Matrix forward(const Matrix& x, nn::Mode mode, ForwardCache& c) {
    using nn::Activation;
    nn::require_shape(static_cast<std::size_t>(x.cols()) == input_width(),
                      "network input has " + std::to_string(x.cols()) + " columns, expected " +
                          std::to_string(input_width()));
    const Eigen::Index B = x.rows(), mw = static_cast<Eigen::Index>(main_width_),
                       pw = static_cast<Eigen::Index>(profile_width_);
    auto check = [](const Matrix& m, const char* layer) {
      if (!m.allFinite()) throw NumericError(std::string("non-finite activation in layer ") + layer);
    };
    c.a_in = x.leftCols(mw);
    c.a_z1 = nn::dense_forward(c.a_in, a1.p);
    c.a_h1 = nn::activate(c.a_z1, Activation::Tanh);
    c.a_z2 = nn::dense_forward(c.a_h1, a2.p);
    c.a_h2 = nn::activate(c.a_z2, Activation::Relu);
    check(c.a_h2, "encoder_a");
    const Matrix a_out = nn::batchnorm_forward(c.a_h2, a_bn, mode, &c.a_bn);
    check(a_out, "encoder_a.batchnorm");

    c.c_in.resize(2 * B, pw);
    c.c_in.topRows(B) = x.middleCols(mw, pw);
    c.c_in.bottomRows(B) = x.middleCols(mw + pw, pw);
    c.c_h2 = encode_context(c.c_in, &c);
    check(c.c_h2, "context_encoder");

    const Eigen::Index cw = static_cast<Eigen::Index>(cfg.context_width);
    c.b_in.resize(B, 2 * cw);
    c.b_in.leftCols(cw) = c.c_h2.topRows(B);
    c.b_in.rightCols(cw) = c.c_h2.bottomRows(B);
    c.b_z1 = nn::dense_forward(c.b_in, b1.p);
    c.b_h1 = nn::activate(c.b_z1, Activation::Tanh);
    c.b_z2 = nn::dense_forward(c.b_h1, b2.p);
    c.b_h2 = nn::activate(c.b_z2, Activation::Relu);
    check(c.b_h2, "encoder_b");
    const Matrix b_out = nn::batchnorm_forward(c.b_h2, b_bn, mode, &c.b_bn);
    check(b_out, "encoder_b.batchnorm");

    const Eigen::Index ew = static_cast<Eigen::Index>(cfg.encoder_width);
    c.concat.resize(B, 2 * ew);
    c.concat.leftCols(ew) = a_out;
    c.concat.rightCols(ew) = b_out;
    c.d_z1 = nn::dense_forward(c.concat, dec1.p);
    c.d_h1 = nn::activate(c.d_z1, Activation::LeakyRelu, cfg.leaky_slope);
    c.d_z2 = nn::dense_forward(c.d_h1, dec2.p);
    c.d_h2 = nn::activate(c.d_z2, Activation::LeakyRelu, cfg.leaky_slope);
    check(c.d_h2, "decoder");
    c.head_z = nn::dense_forward(c.d_h2, head.p);
    c.p = nn::activate(c.head_z, Activation::Sigmoid);
    check(c.p, "head");
    return c.p;
  }

  Matrix forward(const Matrix& x, nn::Mode mode) {
    ForwardCache c;
    return forward(x, mode, c);
  }

  struct Objective {
    double focal = 0.0;    // mean focal loss
    double penalty = 0.0;  // activity L2
    double total() const { return focal + penalty; }
  };

  /// Mean focal loss + activity penalty of a training-mode pass.
  Objective objective(const Matrix& x, std::span<const std::uint8_t> y, ForwardCache& c) {
    const Matrix p = forward(x, nn::Mode::Train, c);
    Objective o;
    const double B = static_cast<double>(x.rows());
    for (Eigen::Index i = 0; i < p.rows(); ++i) o.focal += nn::focal_loss(y[static_cast<std::size_t>(i)], p(i, 0), cfg.focal).loss;
    o.focal /= B;
    o.penalty = cfg.activity_l2 / B * c.concat.squaredNorm();
    return o;
  }

  /// Gradients of objective() into the d* members; returns d objective / d x.
  Matrix backward(std::span<const std::uint8_t> y, const ForwardCache& c) {
    using nn::Activation;
    const Eigen::Index B = c.p.rows();
    Matrix dp(B, 1);
    for (Eigen::Index i = 0; i < B; ++i)
      dp(i, 0) = nn::focal_loss(y[static_cast<std::size_t>(i)], c.p(i, 0), cfg.focal).grad / static_cast<double>(B);
    Matrix g = nn::activate_backward(c.head_z, c.p, dp, Activation::Sigmoid);
    g = step_back(head, c.d_h2, g);
    g = step_back(dec2, c.d_h1, nn::activate_backward(c.d_z2, c.d_h2, g, Activation::LeakyRelu, cfg.leaky_slope));
    g = step_back(dec1, c.concat, nn::activate_backward(c.d_z1, c.d_h1, g, Activation::LeakyRelu, cfg.leaky_slope));
    g += nn::l2_activity_penalty(c.concat, cfg.activity_l2 / static_cast<double>(B)).grad;

    const Eigen::Index ew = static_cast<Eigen::Index>(cfg.encoder_width);
    auto bn_a = nn::batchnorm_backward(g.leftCols(ew), a_bn, c.a_bn);
    a_dgamma = bn_a.dgamma;
    a_dbeta = bn_a.dbeta;
    Matrix ga = step_back(a2, c.a_h1, nn::activate_backward(c.a_z2, c.a_h2, bn_a.dx, Activation::Relu));
    ga = step_back(a1, c.a_in, nn::activate_backward(c.a_z1, c.a_h1, ga, Activation::Tanh));

    auto bn_b = nn::batchnorm_backward(g.rightCols(ew), b_bn, c.b_bn);
    b_dgamma = bn_b.dgamma;
    b_dbeta = bn_b.dbeta;
    Matrix gb = step_back(b2, c.b_h1, nn::activate_backward(c.b_z2, c.b_h2, bn_b.dx, Activation::Relu));
    gb = step_back(b1, c.b_in, nn::activate_backward(c.b_z1, c.b_h1, gb, Activation::Tanh));

    const Eigen::Index cw = static_cast<Eigen::Index>(cfg.context_width);
    Matrix gc(2 * B, cw);
    gc.topRows(B) = gb.leftCols(cw);
    gc.bottomRows(B) = gb.rightCols(cw);
    gc = step_back(ctx2, c.c_h1, nn::activate_backward(c.c_z2, c.c_h2, gc, Activation::Tanh));
    gc = step_back(ctx1, c.c_in, nn::activate_backward(c.c_z1, c.c_h1, gc, Activation::Tanh));

    const Eigen::Index mw = static_cast<Eigen::Index>(main_width_), pw = static_cast<Eigen::Index>(profile_width_);
    Matrix dx(B, mw + 2 * pw);
    dx.leftCols(mw) = ga;
    dx.middleCols(mw, pw) = gc.topRows(B);
    dx.rightCols(pw) = gc.bottomRows(B);
    return dx;
  }

  std::vector<nn::ParamView> parameters() {
    std::vector<nn::ParamView> v;
    auto add = [&](const std::string& n, Dense& d) {
      v.push_back({n + ".weight", &d.p.weight, &d.dw});
      v.push_back({n + ".bias", &d.p.bias, &d.db});
    };
    add("context.dense1", ctx1);
    add("context.dense2", ctx2);
    add("encoder_a.dense1", a1);
    add("encoder_a.dense2", a2);
    v.push_back({"encoder_a.bn.gamma", &a_bn.gamma, &a_dgamma});
    v.push_back({"encoder_a.bn.beta", &a_bn.beta, &a_dbeta});
    add("encoder_b.dense1", b1);
    add("encoder_b.dense2", b2);
    v.push_back({"encoder_b.bn.gamma", &b_bn.gamma, &b_dgamma});
    v.push_back({"encoder_b.bn.beta", &b_bn.beta, &b_dbeta});
    add("decoder.dense1", dec1);
    add("decoder.dense2", dec2);
    add("head", head);
    return v;
  }

  /// Every tensor needed to reproduce inference, in a fixed order.
  std::vector<nn::NamedBlock> blocks() {
    std::vector<nn::NamedBlock> out;
    for (const auto& p : parameters()) out.push_back({p.name, *p.value});
    out.push_back({"encoder_a.bn.running_mean", a_bn.running_mean});
    out.push_back({"encoder_a.bn.running_var", a_bn.running_var});
    out.push_back({"encoder_b.bn.running_mean", b_bn.running_mean});
    out.push_back({"encoder_b.bn.running_var", b_bn.running_var});
    Matrix m(1, kBlockCount);
    for (std::size_t b = 0; b < kBlockCount; ++b) m(0, static_cast<Eigen::Index>(b)) = mask.bits.test(b) ? 1.0 : 0.0;
    out.push_back({"input.dropped_blocks", m});
    return out;
  }

  void load_blocks(const std::vector<nn::NamedBlock>& in) {
    auto find = [&](const std::string& n) -> const Matrix& {
      for (const auto& b : in)
        if (b.name == n) return b.value;
      throw FormatError("checkpoint is missing block " + n);
    };
    for (auto& p : parameters()) {
      const Matrix& m = find(p.name);
      if (m.rows() != p.value->rows() || m.cols() != p.value->cols())
        throw ShapeError("checkpoint block " + p.name + " has shape " + nn::shape_str(m));
      *p.value = m;
    }
    a_bn.running_mean = find("encoder_a.bn.running_mean");
    a_bn.running_var = find("encoder_a.bn.running_var");
    b_bn.running_mean = find("encoder_b.bn.running_mean");
    b_bn.running_var = find("encoder_b.bn.running_var");
    const Matrix& m = find("input.dropped_blocks");
    mask = {};
    for (std::size_t b = 0; b < kBlockCount; ++b)
      if (m(0, static_cast<Eigen::Index>(b)) != 0.0) mask.bits.set(b);
  }

 private:
  static Matrix step_back(Dense& d, const Matrix& x, const Matrix& dz) {
    auto g = nn::dense_backward(x, d.p, dz);
    d.dw = std::move(g.dweight);
    d.db = std::move(g.dbias);
    return std::move(g.dx);
  }

  std::size_t main_width_ = kTransactionWidth + kRiskWidth + kDerivedWidth;
  std::size_t profile_width_ = kProfileWidth;
};

/// Zero in the dropped columns of a gathered batch.
inline Matrix gather_rows(const Matrix& x, std::span<const std::size_t> rows, const FeatureSchema& schema,
                          const BlockMask& mask) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
  for (std::size_t b = 0; b < kBlockCount; ++b) {
    if (!mask.bits.test(b)) continue;
    out.middleCols(static_cast<Eigen::Index>(schema.offset(static_cast<Block>(b))),
                   static_cast<Eigen::Index>(schema.block_width(static_cast<Block>(b))))
        .setZero();
  }
  return out;
}

// ---- prediction and metrics -------------------------------------------------------------

/// Inference-mode probabilities for the given rows, clamped into (0, 1).
inline std::vector<double> predict(CrpNetwork& net, const Matrix& x, std::span<const std::size_t> rows,
                                   const FeatureSchema& schema) {
  std::vector<double> out;
  out.reserve(rows.size());
  constexpr std::size_t kChunk = 4096;
  ForwardCache cache;
  for (std::size_t s = 0; s < rows.size(); s += kChunk) {
    const auto part = rows.subspan(s, std::min(kChunk, rows.size() - s));
    const Matrix p = net.forward(gather_rows(x, part, schema, net.mask), nn::Mode::Infer, cache);
    for (Eigen::Index i = 0; i < p.rows(); ++i)
      out.push_back(std::clamp(p(i, 0), nn::kProbabilityClamp, 1.0 - nn::kProbabilityClamp));
  }
  return out;
}

inline std::vector<std::uint8_t> decide(std::span<const double> p, double threshold) {
  std::vector<std::uint8_t> d(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) d[i] = p[i] >= threshold ? 1 : 0;
  return d;
}

struct Prediction {
  std::size_t txn = 0;
  double p_hat = 0.0;
  bool raw = false;
  double composite = 0.0;
  bool final_decision = false;
};

struct EvalMetrics {
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  Confusion confusion;
  std::uint64_t seed = 0;
  std::string tag;
  bool operator==(const EvalMetrics&) const = default;
};

inline EvalMetrics evaluate(std::span<const std::uint8_t> predictions, std::span<const std::uint8_t> labels,
                            std::uint64_t seed = 0, std::string tag = {}) {
  const Confusion c = confusion(predictions, labels);
  return {c.precision(), c.recall(), c.f1(), c, seed, std::move(tag)};
}

inline nlohmann::ordered_json to_json(const EvalMetrics& m) {
  nlohmann::ordered_json j;
  j["seed"] = m.seed;
  j["tag"] = m.tag;
  j["precision"] = m.precision;
  j["recall"] = m.recall;
  j["f1"] = m.f1;
  j["confusion"] = {{"tp", m.confusion.tp}, {"fp", m.confusion.fp}, {"fn", m.confusion.fn}, {"tn", m.confusion.tn}};
  return j;
}

// ---- training ------------------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_f1 = 0.0;
  double val_recall = 0.0;
  double val_precision = 0.0;
};

struct TrainResult {
  CrpNetwork model;  // parameters of the best validation epoch
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
};

/// Adam on mean focal loss + activity L2, early-stopped on validation F1.
inline TrainResult train(const Matrix& x, std::span<const std::uint8_t> labels, std::span<const std::size_t> train_rows,
                         std::span<const std::size_t> val_rows, const FeatureSchema& schema, const NetworkConfig& cfg,
                         const BlockMask& mask = {}) {
  cfg.validate();
  std::size_t positives = 0;
  for (auto r : train_rows) positives += labels[r];
  if (positives == 0) throw ConfigError("training partition has no positive labels");
  if (train_rows.size() < 2) throw ConfigError("training partition needs at least two rows");

  CrpNetwork net(cfg, mask);
  nn::AdamState adam;
  adam.config.learning_rate = cfg.learning_rate;
  Rng shuffle(derive_seed(cfg.seed, "shuffle"));
  std::vector<std::size_t> order(train_rows.begin(), train_rows.end());
  std::vector<std::uint8_t> val_labels;
  for (auto r : val_rows) val_labels.push_back(labels[r]);

  TrainResult result;
  result.model = net;
  double best_f1 = -1.0;
  std::size_t since_best = 0;
  ForwardCache cache;
  std::vector<std::uint8_t> yb;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    shuffle.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - s);
      if (n < 2) continue;  // batch norm needs two rows
      const auto rows = std::span<const std::size_t>(order).subspan(s, n);
      const Matrix xb = gather_rows(x, rows, schema, mask);
      yb.resize(n);
      for (std::size_t i = 0; i < n; ++i) yb[i] = labels[rows[i]];
      loss_sum += net.objective(xb, yb, cache).total();
      net.backward(yb, cache);
      auto params = net.parameters();
      nn::adam_step(params, adam);
      ++batches;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    if (!val_rows.empty()) {
      const auto p = predict(net, x, val_rows, schema);
      const auto c = confusion(decide(p, cfg.threshold), val_labels);
      rec.val_f1 = c.f1();
      rec.val_recall = c.recall();
      rec.val_precision = c.precision();
    }
    result.history.push_back(rec);
    if (rec.val_f1 > best_f1) {
      best_f1 = rec.val_f1;
      result.model = net;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  return result;
}

// ---- checkpoints ------------------------------------------------------------------------------

inline void save_model(std::ostream& os, CrpNetwork& net, const FeatureSchema& schema) {
  nn::write_checkpoint(os, schema.hash(), net.cfg.hash(), net.blocks());
}

inline std::string checkpoint_bytes(CrpNetwork& net, const FeatureSchema& schema) {
  std::ostringstream os;
  save_model(os, net, schema);
  return os.str();
}

/// Rebuilds a network from a checkpoint; the schema hash must match.
inline CrpNetwork load_model(std::istream& is, const NetworkConfig& cfg, const FeatureSchema& schema) {
  const auto ck = nn::read_checkpoint(is);
  if (ck.schema_hash != schema.hash())
    throw SchemaError("checkpoint schema " + hex64(ck.schema_hash) + " does not match feature schema " +
                      hex64(schema.hash()));
  if (ck.config_hash != cfg.hash()) throw ConfigError("checkpoint was trained with a different network config");
  CrpNetwork net(cfg, {});
  net.load_blocks(ck.blocks);
  return net;
}

// ---- experiments ----------------------------------------------------------------------------

struct SeedRun {
  std::uint64_t seed = 0;
  BlockMask mask;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  bool risk_filter = true;
  double tau = -std::numeric_limits<double>::infinity();
  Confusion val_raw, val_filtered;
  EvalMetrics test_raw, test;  // test = after the risk filter when it is on
  std::string checkpoint;
  std::vector<Prediction> test_predictions;
};

/// Calibrates the risk filter on the validation split and scores the
/// held-out split with a trained network. Dropping risk disables the filter.
inline void assess(const PreparedData& d, CrpNetwork& net, double threshold, SeedRun& out) {
  out.mask = net.mask;
  out.risk_filter = out.risk_filter && !net.mask.dropped(Block::Risk);
  out.tau = -std::numeric_limits<double>::infinity();
  auto composites_of = [&](std::span<const std::size_t> rows) {
    std::vector<double> c;
    for (auto r : rows) c.push_back(d.risk[r].composite);
    return c;
  };
  auto labels_of = [&](std::span<const std::size_t> rows) {
    std::vector<std::uint8_t> l;
    for (auto r : rows) l.push_back(d.labels[r]);
    return l;
  };

  const auto val_p = predict(net, d.x, d.split.val, d.schema);
  const auto val_raw = decide(val_p, threshold);
  const auto val_c = composites_of(d.split.val);
  const auto val_l = labels_of(d.split.val);
  if (out.risk_filter) out.tau = calibrate_filter_threshold(val_raw, val_c, val_l);
  out.val_raw = confusion(val_raw, val_l);
  out.val_filtered = confusion(apply_risk_filter(val_raw, val_c, out.tau), val_l);

  const auto test_p = predict(net, d.x, d.split.test, d.schema);
  const auto test_raw = decide(test_p, threshold);
  const auto test_c = composites_of(d.split.test);
  const auto test_final = apply_risk_filter(test_raw, test_c, out.tau);
  const auto test_l = labels_of(d.split.test);
  const std::string tag = net.mask.none() ? "full" : "drop:" + net.mask.str();
  out.test_raw = evaluate(test_raw, test_l, out.seed, tag + ":raw");
  out.test = evaluate(test_final, test_l, out.seed, tag);
  out.test_predictions.clear();
  for (std::size_t i = 0; i < d.split.test.size(); ++i)
    out.test_predictions.push_back({d.split.test[i], test_p[i], test_raw[i] != 0, test_c[i], test_final[i] != 0});
}

/// Trains one seed, then assesses it.
inline SeedRun run_seed(const PreparedData& d, NetworkConfig cfg, std::uint64_t seed, const BlockMask& mask = {},
                        bool risk_filter = true) {
  cfg.seed = seed;
  SeedRun out;
  out.seed = seed;
  out.risk_filter = risk_filter;
  auto tr = train(d.x, d.labels, d.split.train, d.split.val, d.schema, cfg, mask);
  out.history = tr.history;
  out.best_epoch = tr.best_epoch;
  assess(d, tr.model, cfg.threshold, out);
  out.checkpoint = checkpoint_bytes(tr.model, d.schema);
  return out;
}

/// Paired runs over seeds. Independent seeds may run on worker threads; each
/// run owns its state, so results do not depend on `threads`.
inline std::vector<SeedRun> run_seeds(const PreparedData& d, const NetworkConfig& cfg,
                                      std::span<const std::uint64_t> seeds, const BlockMask& mask = {},
                                      bool risk_filter = true, std::size_t threads = 1) {
  std::vector<SeedRun> out(seeds.size());
  if (threads <= 1) {
    for (std::size_t i = 0; i < seeds.size(); ++i) out[i] = run_seed(d, cfg, seeds[i], mask, risk_filter);
    return out;
  }
  for (std::size_t s = 0; s < seeds.size(); s += threads) {
    std::vector<std::future<SeedRun>> jobs;
    for (std::size_t i = s; i < std::min(seeds.size(), s + threads); ++i)
      jobs.push_back(std::async(std::launch::async, [&, i] { return run_seed(d, cfg, seeds[i], mask, risk_filter); }));
    for (std::size_t i = 0; i < jobs.size(); ++i) out[s + i] = jobs[i].get();
  }
  return out;
}

/// Retrains with the given blocks zeroed; same seeds and protocol as `run_seeds`.
inline std::vector<SeedRun> ablate(const PreparedData& d, const NetworkConfig& cfg,
                                   const std::vector<std::string>& drop_blocks, std::span<const std::uint64_t> seeds,
                                   bool risk_filter = true) {
  return run_seeds(d, cfg, seeds, BlockMask::parse(drop_blocks), risk_filter);
}

}  // namespace crpaml
