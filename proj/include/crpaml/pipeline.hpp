#pragma once

// Command-line orchestration: one INI config, CRPAML_<SECTION>_<KEY>
// environment overrides, flag overrides, artifacts tagged with the config
// hash and reports under runs/<timestamp>_<hash>.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cctype>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "crpaml/caseservice.hpp"
#include "crpaml/crpnet.hpp"
#include "crpaml/profiler.hpp"
#include "crpaml/riskmodel.hpp"
#include "crpaml/synthgen.hpp"
#include "crpaml/txstore.hpp"
#include "json.hpp"

namespace crpaml::pipeline {

namespace fs = std::filesystem;

inline const std::vector<std::pair<std::string, std::string>>& config_defaults() {
  static const std::vector<std::pair<std::string, std::string>> d{
      {"paths.input", "work/transactions.csv"},
      {"paths.store", "work/store.bin"},
      {"paths.profiler", "work/profiler.bin"},
      {"paths.profiles", "work/profiles.bin"},
      {"paths.tables", "work/risk_tables.json"},
      {"paths.checkpoints", "work/checkpoints"},
      {"paths.scores", "work/scores.jsonl"},
      {"paths.decisions", "work/decisions.jsonl"},
      {"paths.reports", "runs"},
      {"paths.rates", ""},
      {"synth.n_accounts", "2000"},
      {"synth.n_background_txns", "49900"},
      {"synth.illicit_ratio", "0.002"},
      {"synth.pattern_mix", "1,1,1,1,1"},
      {"synth.seed", "7"},
      {"synth.start_time", "1661990400"},
      {"synth.time_span_days", "10"},
      {"synth.decoy_ratio", "2"},
      {"synth.mule_fraction", "0.04"},
      {"synth.max_extra_size", "5"},
      {"split.seed", "0"},
      {"split.test_fraction", "0.2"},
      {"split.val_fraction", "0.2"},
      {"profile.grid_volume", "4"},
      {"profile.grid_count", "4"},
      {"risk.smoothing", "1"},
      {"risk.filter", "true"},
      {"network.context_hidden", "64"},
      {"network.context_width", "32"},
      {"network.encoder_width", "128"},
      {"network.decoder_width", "64"},
      {"network.leaky_slope", "0.3"},
      {"network.activity_l2", "0.0001"},
      {"network.focal_alpha", "0.25"},
      {"network.focal_gamma", "3"},
      {"network.learning_rate", "0.001"},
      {"network.batch_size", "1024"},
      {"network.max_epochs", "100"},
      {"network.patience", "10"},
      {"network.threshold", "0.5"},
      {"network.bn_momentum", "0.99"},
      {"network.bn_epsilon", "0.00001"},
      {"train.seeds", "1,2,3,4,5"},
      {"train.ablate", "context,risk"},
      {"train.threads", "1"},
      {"score.seed", ""},
      {"serve.host", "127.0.0.1"},
      {"serve.port", "8080"},
      {"serve.suspect", "sender"},
      {"serve.substantial_fraction", "0.05"},
      {"serve.token_salt", "crpaml"},
  };
  return d;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    const auto t = std::string(detail::trim(cur));
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

class Config {
 public:
  Config() {
    for (const auto& [k, v] : config_defaults()) values_[k] = v;
  }

  /// File (optional), then environment, then explicit overrides.
  static Config load(const std::string& path, const std::vector<std::string>& overrides = {},
                     const std::function<const char*(const char*)>& getenv = ::getenv) {
    Config c;
    if (!path.empty()) {
      if (!fs::exists(path)) throw ConfigError("config file not found: " + path);
      boost::property_tree::ptree tree;
      try {
        boost::property_tree::read_ini(path, tree);
      } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
      }
      for (const auto& [section, body] : tree) {
        if (body.empty() && !body.data().empty()) throw ConfigError("config: key '" + section + "' outside a section");
        for (const auto& [key, leaf] : body) c.set(section + "." + key, leaf.data());
      }
    }
    for (const auto& [k, _] : config_defaults()) {
      std::string var = "CRPAML_";
      for (char ch : k) var += ch == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
      if (const char* v = getenv(var.c_str())) c.set(k, v);
    }
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw ConfigError("override must look like section.key=value: " + o);
      c.set(o.substr(0, eq), o.substr(eq + 1));
    }
    c.check();
    return c;
  }

  void set(const std::string& key, std::string value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key: " + key);
    it->second = std::string(detail::trim(value));
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key: " + key);
    return it->second;
  }

  double num(const std::string& key) const {
    const auto& s = str(key);
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v))
      throw ConfigError(key + " must be a number, got '" + s + "'");
    return v;
  }

  std::uint64_t count(const std::string& key) const {
    const auto& s = str(key);
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc{} || p != s.data() + s.size())
      throw ConfigError(key + " must be a non-negative integer, got '" + s + "'");
    return v;
  }

  bool flag(const std::string& key) const {
    const auto s = normalize_token(str(key));
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ConfigError(key + " must be true or false");
  }

  std::vector<std::uint64_t> seeds() const {
    std::vector<std::uint64_t> out;
    for (const auto& s : split_list(str("train.seeds"))) {
      std::uint64_t v = 0;
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc{} || p != s.data() + s.size()) throw ConfigError("train.seeds: bad seed '" + s + "'");
      out.push_back(v);
    }
    if (out.empty()) throw ConfigError("train.seeds must list at least one seed");
    return out;
  }

  std::vector<std::string> ablate() const { return split_list(str("train.ablate")); }

  SynthConfig synth() const {
    SynthConfig s;
    s.n_accounts = count("synth.n_accounts");
    s.n_background_txns = count("synth.n_background_txns");
    s.illicit_ratio = num("synth.illicit_ratio");
    const auto mix = split_list(str("synth.pattern_mix"));
    if (mix.size() != kPatternKindCount) throw ConfigError("synth.pattern_mix needs one weight per pattern kind");
    for (std::size_t i = 0; i < mix.size(); ++i) s.pattern_mix[i] = std::strtod(mix[i].c_str(), nullptr);
    s.seed = count("synth.seed");
    s.start_time = static_cast<std::int64_t>(count("synth.start_time"));
    s.time_span = static_cast<std::int64_t>(num("synth.time_span_days") * 86400.0);
    s.decoy_ratio = num("synth.decoy_ratio");
    s.mule_fraction = num("synth.mule_fraction");
    s.max_extra_size = count("synth.max_extra_size");
    return s;
  }

  NetworkConfig network() const {
    NetworkConfig n;
    n.context_hidden = count("network.context_hidden");
    n.context_width = count("network.context_width");
    n.encoder_width = count("network.encoder_width");
    n.decoder_width = count("network.decoder_width");
    n.leaky_slope = num("network.leaky_slope");
    n.activity_l2 = num("network.activity_l2");
    n.focal.alpha = num("network.focal_alpha");
    n.focal.gamma = num("network.focal_gamma");
    n.learning_rate = num("network.learning_rate");
    n.batch_size = count("network.batch_size");
    n.max_epochs = count("network.max_epochs");
    n.patience = count("network.patience");
    n.threshold = num("network.threshold");
    n.bn_momentum = num("network.bn_momentum");
    n.bn_epsilon = num("network.bn_epsilon");
    return n;
  }

  ScopeConfig scope() const {
    ScopeConfig s;
    s.suspect = parse_suspect_mode(str("serve.suspect"));
    s.substantial_fraction = num("serve.substantial_fraction");
    s.token_salt = str("serve.token_salt");
    return s;
  }

  GridShape grid() const { return {count("profile.grid_volume"), count("profile.grid_count")}; }

  RateTable rates() const {
    const auto& p = str("paths.rates");
    return p.empty() ? RateTable::defaults() : RateTable::load(p);
  }

  /// Canonical INI text of every setting.
  std::string canonical() const {
    std::ostringstream os;
    std::string section;
    for (const auto& [k, v] : values_) {
      const auto dot = k.find('.');
      if (k.substr(0, dot) != section) {
        section = k.substr(0, dot);
        os << (os.tellp() > 0 ? "\n" : "") << '[' << section << "]\n";
      }
      os << k.substr(dot + 1) << " = " << v << '\n';
    }
    return os.str();
  }

  /// Hash of the settings that shape artifacts; paths and serving are excluded.
  std::uint64_t hash() const {
    Fnv1a h;
    h.update("pipeline-config-v1");
    for (const auto& [k, v] : values_) {
      if (k.starts_with("paths.") || k.starts_with("serve.")) continue;
      h.update(k).update("=").update(v).update("\n");
    }
    return h.digest();
  }

  std::string hash_hex() const { return hex64(hash()); }

 private:
  void check() const {
    synth();
    network().validate();
    seeds();
    BlockMask::parse(ablate());
    scope();
    flag("risk.filter");
    if (num("risk.smoothing") < 0) throw ConfigError("risk.smoothing must be >= 0");
    const auto t = num("split.test_fraction"), v = num("split.val_fraction");
    if (!(t > 0 && t < 1 && v > 0 && v < 1)) throw ConfigError("split fractions must lie in (0, 1)");
    if (count("serve.port") > 65535) throw ConfigError("serve.port out of range");
    count("train.threads");
  }

  std::map<std::string, std::string> values_;
};

// ---- artifacts -------------------------------------------------------------------------------

inline constexpr std::string_view kArtifactMagic = "CRPAART1";

struct Artifact {
  std::uint64_t config_hash = 0;
  std::string payload;
};

inline void ensure_parent(const std::string& path) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

inline void write_text(const std::string& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream os(path, std::ios::binary);
  os << text;
  if (!os) throw Error("cannot write " + path);
}

inline std::string read_text(const std::string& path, const std::string& what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("missing artifact: " + what + " (" + path + ")");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_artifact(const std::string& path, std::uint64_t config_hash, const std::string& payload) {
  std::ostringstream os;
  os.write(kArtifactMagic.data(), 8);
  io::put_u64(os, config_hash);
  os << payload;
  write_text(path, os.str());
}

inline Artifact read_artifact(const std::string& path, const std::string& what) {
  const auto bytes = read_text(path, what);
  if (bytes.size() < 16 || std::string_view(bytes).substr(0, 8) != kArtifactMagic)
    throw FormatError(what + " (" + path + ") is not a pipeline artifact");
  std::istringstream is(bytes.substr(8, 8));
  return {io::get_u64(is), bytes.substr(16)};
}

inline TransactionStore load_store(const Config& c) {
  const auto& p = c.str("paths.store");
  if (!fs::exists(p)) throw NotFoundError("missing artifact: transaction store (" + p + "); run `crpaml ingest` first");
  return TransactionStore::load(p).store;
}

inline ProfilerModel load_profiler(const Config& c) {
  const auto& p = c.str("paths.profiler");
  if (!fs::exists(p)) throw NotFoundError("missing artifact: profiler model (" + p + "); run `crpaml profile` first");
  std::istringstream is(read_artifact(p, "profiler model").payload);
  return ProfilerModel::load(is);
}

inline RiskTables load_tables(const Config& c) {
  const auto& p = c.str("paths.tables");
  if (!fs::exists(p)) throw NotFoundError("missing artifact: risk tables (" + p + "); run `crpaml fit-risk` first");
  return risk_tables_from_json(nlohmann::json::parse(read_text(p, "risk tables")).at("tables"));
}

inline Split split_for(const Config& c, const TransactionStore& store) {
  return stratified_split(store_labels(store), c.count("split.seed"),
                          c.num("split.test_fraction"), c.num("split.val_fraction"));
}

/// Rebuilds the normalized design matrix from fitted artifacts.
inline PreparedData prepare_from_artifacts(const Config& c, const TransactionStore& store, const RateTable& rates) {
  PreparedData d;
  d.labels = store_labels(store);
  d.split = split_for(c, store);
  d.profiler = load_profiler(c);
  d.tables = load_tables(c);
  d.schema = schema_layout(d.profiler);
  const auto gaps = pair_gaps(store);
  d.x = raw_feature_matrix(store, rates, d.profiler, d.tables, gaps, &d.risk);
  fit_normalization(d.schema, d.x, d.split.fit_rows());
  normalize_matrix(d.x, d.schema);
  return d;
}

inline std::vector<BlockMask> variants(const Config& c) {
  std::vector<BlockMask> v{BlockMask{}};
  if (!c.ablate().empty()) v.push_back(BlockMask::parse(c.ablate()));
  return v;
}

inline std::string variant_name(const BlockMask& m) { return m.none() ? "full" : "drop-" + m.str(); }

inline std::string checkpoint_path(const Config& c, const BlockMask& m, std::uint64_t seed) {
  return (fs::path(c.str("paths.checkpoints")) / (variant_name(m) + "_seed" + std::to_string(seed) + ".ckpt")).string();
}

inline std::string schema_path(const Config& c) {
  return (fs::path(c.str("paths.checkpoints")) / "schema.json").string();
}

inline std::string checkpoint_hash(const std::string& bytes) { return hex64(fnv1a(bytes)); }

// ---- reports ----------------------------------------------------------------------------------

struct MeanStd {
  double mean = 0.0, std = 0.0;
  std::size_t n = 0;
};

/// Sample standard deviation; a single value reports 0.
inline MeanStd mean_std(std::span<const double> v) {
  MeanStd m;
  m.n = v.size();
  if (v.empty()) return m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0;
    for (double x : v) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return m;
}

/// "82.51 ± 2.62" from fractions in [0, 1].
inline std::string format_pm(const MeanStd& m) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f ± %.2f", 100.0 * m.mean, 100.0 * m.std);
  return buf;
}

inline nlohmann::ordered_json stat_json(const MeanStd& m) {
  return {{"mean", m.mean}, {"std", m.std}, {"n", m.n}, {"text", format_pm(m)}};
}

struct Report {
  nlohmann::ordered_json json;
  std::string text;
};

/// Aggregates per-seed metric documents. Every document must share one
/// schema hash.
inline Report build_report(const std::vector<nlohmann::json>& metrics) {
  if (metrics.empty()) throw NotFoundError("no metrics to report");
  const std::string schema = metrics.front().at("schema_hash");
  std::set<std::string> configs;
  for (const auto& m : metrics) {
    if (m.at("schema_hash") != schema)
      throw SchemaError("refusing to aggregate metrics with different schema hashes (" + schema + " vs " +
                        m.at("schema_hash").get<std::string>() + ")");
    configs.insert(m.at("config_hash").get<std::string>());
  }
  std::vector<std::string> order;
  std::map<std::string, std::vector<const nlohmann::json*>> by_variant;
  for (const auto& m : metrics) {
    const std::string v = m.at("variant");
    if (!by_variant.count(v)) order.push_back(v);
    by_variant[v].push_back(&m);
  }
  std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return (a == "full") > (b == "full"); });

  Report r;
  auto& j = r.json;
  j["schema_hash"] = schema;
  j["config_hashes"] = configs;
  auto jv = nlohmann::ordered_json::array();
  auto per_seed = nlohmann::ordered_json::array();
  std::vector<std::array<std::string, 4>> rows;
  std::map<std::string, std::map<std::uint64_t, double>> f1_by_seed;
  std::string delta_line;
  for (const auto& v : order) {
    auto runs = by_variant[v];
    std::stable_sort(runs.begin(), runs.end(), [](auto* a, auto* b) { return a->at("seed") < b->at("seed"); });
    std::vector<double> f1, pr, rc, rf1, rpr, rrc, delta;
    for (const auto* m : runs) {
      const auto& t = m->at("test");
      const auto& raw = m->at("test_raw");
      f1.push_back(t.at("f1"));
      pr.push_back(t.at("precision"));
      rc.push_back(t.at("recall"));
      rf1.push_back(raw.at("f1"));
      rpr.push_back(raw.at("precision"));
      rrc.push_back(raw.at("recall"));
      delta.push_back(t.at("precision").get<double>() - raw.at("precision").get<double>());
      f1_by_seed[v][m->at("seed").get<std::uint64_t>()] = f1.back();
      per_seed.push_back({{"variant", v},
                          {"seed", m->at("seed")},
                          {"tau", m->at("tau")},
                          {"f1", t.at("f1")},
                          {"precision", t.at("precision")},
                          {"recall", t.at("recall")},
                          {"f1_before_filter", raw.at("f1")},
                          {"precision_before_filter", raw.at("precision")}});
    }
    const bool filtered = runs.front()->at("risk_filter").get<bool>();
    nlohmann::ordered_json e;
    e["variant"] = v;
    e["risk_filter"] = filtered;
    e["seeds"] = runs.size();
    e["f1"] = stat_json(mean_std(f1));
    e["precision"] = stat_json(mean_std(pr));
    e["recall"] = stat_json(mean_std(rc));
    rows.push_back({v, format_pm(mean_std(f1)), format_pm(mean_std(pr)), format_pm(mean_std(rc))});
    if (filtered) {
      e["before_filter"] = {{"f1", stat_json(mean_std(rf1))},
                            {"precision", stat_json(mean_std(rpr))},
                            {"recall", stat_json(mean_std(rrc))}};
      e["precision_delta"] = stat_json(mean_std(delta));
      rows.push_back({v + " (before filter)", format_pm(mean_std(rf1)), format_pm(mean_std(rpr)),
                      format_pm(mean_std(rrc))});
      if (v == "full") delta_line = "risk filter precision delta (points): " + format_pm(mean_std(delta)) + "\n";
    }
    jv.push_back(e);
  }
  j["variants"] = jv;
  j["per_seed"] = per_seed;

  std::string paired_line;
  if (f1_by_seed.count("full")) {
    for (const auto& v : order) {
      if (v == "full") continue;
      std::size_t wins = 0, pairs = 0;
      for (const auto& [seed, f] : f1_by_seed["full"]) {
        auto it = f1_by_seed[v].find(seed);
        if (it == f1_by_seed[v].end()) continue;
        ++pairs;
        wins += f > it->second ? 1 : 0;
      }
      j["paired"][v] = {{"full_wins", wins}, {"pairs", pairs}};
      paired_line += "full beats " + v + " on " + std::to_string(wins) + " of " + std::to_string(pairs) + " seeds\n";
    }
  }

  std::ostringstream os;
  os << "CRP-AML evaluation (minority class, held-out split, mean ± sample std over seeds, %)\n";
  os << "schema " << schema << "  config";
  for (const auto& c : configs) os << ' ' << c;
  os << "\n\n";
  char line[256];
  std::snprintf(line, sizeof line, "%-36s %-16s %-16s %s\n", "Model", "F1", "Precision", "Recall");
  os << line;
  for (const auto& row : rows) {
    // ± is two bytes in UTF-8; pad by display width.
    auto pad = [](const std::string& s, std::size_t w) {
      std::size_t shown = 0;
      for (unsigned char ch : s) shown += (ch & 0xC0) != 0x80;
      return s + std::string(shown < w ? w - shown : 0, ' ');
    };
    os << pad(row[0], 37) << pad(row[1], 17) << pad(row[2], 17) << row[3] << '\n';
  }
  os << '\n' << delta_line << paired_line;
  r.text = os.str();
  return r;
}

// ---- commands -----------------------------------------------------------------------------

struct Context {
  Config config;
  std::ostream* out = &std::cout;
  std::ostream* err = &std::cerr;
  std::function<std::int64_t()> clock = CaseBook::system_clock;
};

/// runs/<UTC timestamp>_<config hash>, made unique with a suffix.
inline fs::path make_run_dir(const Context& ctx) {
  const std::time_t t = static_cast<std::time_t>(ctx.clock());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &tm);
  const fs::path base = fs::path(ctx.config.str("paths.reports")) / (std::string(stamp) + "_" + ctx.config.hash_hex());
  fs::path dir = base;
  for (int i = 2; fs::exists(dir); ++i) dir = base.string() + "_" + std::to_string(i);
  fs::create_directories(dir);
  write_text((dir / "config.ini").string(), ctx.config.canonical());
  return dir;
}

inline void cmd_synth(Context& ctx) {
  const auto& c = ctx.config;
  const auto rates = c.rates();
  const auto sc = c.synth();
  auto res = generate(sc, rates);
  const auto report = validate_patterns(res.store, res.patterns);
  if (!report.ok()) throw Error("generator produced invalid patterns: " + report.violations.front().message);
  const auto& path = c.str("paths.input");
  ensure_parent(path);
  {
    std::ofstream os(path, std::ios::binary);
    write_transactions_csv(os, res.store.records());
    if (!os) throw Error("cannot write " + path);
  }
  auto side = patterns_to_json(res.patterns, sc);
  side["pipeline_config_hash"] = c.hash_hex();
  write_text(path + ".patterns.json", side.dump(1) + "\n");
  std::size_t labeled = 0;
  for (const auto& r : res.store.records()) labeled += r.is_laundering;
  *ctx.out << "synth: " << res.store.size() << " transactions, " << labeled << " laundering in "
           << res.patterns.size() << " patterns -> " << path << "\n";
}

inline void cmd_ingest(Context& ctx) {
  const auto& c = ctx.config;
  const auto& in_path = c.str("paths.input");
  std::ifstream in(in_path, std::ios::binary);
  if (!in) throw NotFoundError("missing input CSV (" + in_path + "); run `crpaml synth` or set paths.input");
  const auto rates = c.rates();
  auto parsed = parse_transactions(in, rates);
  if (parsed.records.empty()) throw FormatError("no valid transactions in " + in_path);
  const auto store = TransactionStore::build(std::move(parsed.records));
  ensure_parent(c.str("paths.store"));
  store.save(c.str("paths.store"), c.hash());
  const auto& rep = parsed.report;
  *ctx.out << "ingest: read " << rep.rows_read << ", accepted " << rep.rows_accepted << ", rejected "
           << rep.rows_rejected << (rep.reordered ? " (reordered by timestamp)" : "") << "\n";
  for (const auto& [reason, n] : rep.reject_reasons) *ctx.out << "  " << n << " x " << reason << "\n";
}

inline void cmd_profile(Context& ctx) {
  const auto& c = ctx.config;
  const auto store = load_store(c);
  const auto rates = c.rates();
  const auto split = split_for(c, store);
  const auto model = fit_profiler(store, split.fit_rows(), rates, c.grid());
  std::ostringstream pm;
  model.save(pm);
  write_artifact(c.str("paths.profiler"), c.hash(), pm.str());
  const auto all = all_rows(store);
  const auto profiles = build_profiles(store, all, model.thresholds, rates);
  std::ostringstream ps;
  save_profiles(ps, profiles, model.hash());
  write_artifact(c.str("paths.profiles"), c.hash(), ps.str());
  *ctx.out << "profile: " << profiles.size() << " accounts, fitted on " << split.fit_rows().size()
           << " training rows, model " << hex64(model.hash()) << "\n";
}

inline void cmd_fit_risk(Context& ctx) {
  const auto& c = ctx.config;
  const auto store = load_store(c);
  const auto rates = c.rates();
  const auto split = split_for(c, store);
  const auto tables = fit_risk_tables(store, split.fit_rows(), pair_gaps(store), rates, c.num("risk.smoothing"));
  nlohmann::ordered_json j;
  j["config_hash"] = c.hash_hex();
  j["tables"] = to_json(tables);
  write_text(c.str("paths.tables"), j.dump(2) + "\n");
  *ctx.out << render_risk_tables(tables);
}

inline nlohmann::ordered_json history_json(const SeedRun& r) {
  auto h = nlohmann::ordered_json::array();
  for (const auto& e : r.history)
    h.push_back({{"epoch", e.epoch},
                 {"train_loss", e.train_loss},
                 {"val_f1", e.val_f1},
                 {"val_precision", e.val_precision},
                 {"val_recall", e.val_recall}});
  return {{"seed", r.seed}, {"variant", variant_name(r.mask)}, {"best_epoch", r.best_epoch}, {"history", h}};
}

inline void cmd_train(Context& ctx) {
  const auto& c = ctx.config;
  const auto store = load_store(c);
  const auto rates = c.rates();
  const auto d = prepare_from_artifacts(c, store, rates);
  const auto net = c.network();
  const auto seeds = c.seeds();
  const auto dir = make_run_dir(ctx);
  nlohmann::ordered_json schema = d.schema.to_json();
  schema["config_hash"] = c.hash_hex();
  write_text(schema_path(c), schema.dump(1) + "\n");
  for (const auto& mask : variants(c)) {
    const auto runs = run_seeds(d, net, seeds, mask, c.flag("risk.filter"), c.count("train.threads"));
    for (const auto& r : runs) {
      write_artifact(checkpoint_path(c, mask, r.seed), c.hash(), r.checkpoint);
      write_text((dir / ("history_" + variant_name(mask) + "_seed" + std::to_string(r.seed) + ".json")).string(),
                 history_json(r).dump(1) + "\n");
      const double best = r.best_epoch ? r.history[r.best_epoch - 1].val_f1 : 0.0;
      *ctx.out << "train: " << variant_name(mask) << " seed " << r.seed << " best epoch " << r.best_epoch << " of "
               << r.history.size() << ", val F1 " << best << "\n";
    }
  }
  *ctx.out << "run dir: " << dir.string() << "\n";
}

inline FeatureSchema checked_schema(const Config& c, const PreparedData& d) {
  const auto stored = FeatureSchema::from_json(nlohmann::json::parse(read_text(schema_path(c), "feature schema")));
  if (stored.hash() != d.schema.hash())
    throw SchemaError("stored feature schema " + hex64(stored.hash()) + " does not match the current artifacts (" +
                      hex64(d.schema.hash()) + "); rerun `crpaml train`");
  return stored;
}

inline CrpNetwork load_checkpoint(const Config& c, const PreparedData& d, const BlockMask& mask, std::uint64_t seed,
                                  std::string* hash = nullptr) {
  const auto art = read_artifact(checkpoint_path(c, mask, seed), variant_name(mask) + " checkpoint for seed " +
                                                                     std::to_string(seed) + "; run `crpaml train`");
  auto cfg = c.network();
  cfg.seed = seed;
  std::istringstream is(art.payload);
  if (hash) *hash = checkpoint_hash(art.payload);
  return load_model(is, cfg, d.schema);
}

inline nlohmann::ordered_json confusion_json(const Confusion& m) {
  return {{"tp", m.tp}, {"fp", m.fp}, {"fn", m.fn}, {"tn", m.tn}};
}

inline Report cmd_evaluate(Context& ctx) {
  const auto& c = ctx.config;
  const auto store = load_store(c);
  const auto rates = c.rates();
  const auto d = prepare_from_artifacts(c, store, rates);
  checked_schema(c, d);
  std::vector<nlohmann::json> metrics;
  const auto dir = make_run_dir(ctx);
  for (const auto& mask : variants(c)) {
    for (auto seed : c.seeds()) {
      std::string ck;
      auto net = load_checkpoint(c, d, mask, seed, &ck);
      SeedRun run;
      run.seed = seed;
      run.risk_filter = c.flag("risk.filter");
      assess(d, net, c.network().threshold, run);
      nlohmann::ordered_json m;
      m["config_hash"] = c.hash_hex();
      m["schema_hash"] = hex64(d.schema.hash());
      m["checkpoint_hash"] = ck;
      m["variant"] = variant_name(mask);
      m["seed"] = seed;
      m["risk_filter"] = run.risk_filter;
      m["tau"] = std::isfinite(run.tau) ? nlohmann::ordered_json(run.tau) : nlohmann::ordered_json("-inf");
      m["val_raw"] = confusion_json(run.val_raw);
      m["val_filtered"] = confusion_json(run.val_filtered);
      m["test_raw"] = to_json(run.test_raw);
      m["test"] = to_json(run.test);
      write_text((dir / ("metrics_" + variant_name(mask) + "_seed" + std::to_string(seed) + ".json")).string(),
                 m.dump(1) + "\n");
      metrics.push_back(nlohmann::json::parse(m.dump()));
    }
  }
  auto report = build_report(metrics);
  write_text((dir / "report.json").string(), report.json.dump(1) + "\n");
  write_text((dir / "report.txt").string(), report.text);
  *ctx.out << report.text << "run dir: " << dir.string() << "\n";
  return report;
}

inline std::vector<nlohmann::json> collect_metrics(const Config& c, std::vector<std::string> inputs) {
  if (inputs.empty()) {
    const fs::path root = c.str("paths.reports");
    std::vector<fs::path> dirs;
    if (fs::exists(root))
      for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    for (auto it = dirs.rbegin(); it != dirs.rend() && inputs.empty(); ++it)
      for (const auto& e : fs::directory_iterator(*it))
        if (e.path().filename().string().starts_with("metrics_")) {
          inputs.push_back(it->string());
          break;
        }
    if (inputs.empty()) throw NotFoundError("missing artifact: no run directory with metrics; run `crpaml evaluate`");
  }
  std::vector<fs::path> files;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      for (const auto& e : fs::directory_iterator(in))
        if (e.path().filename().string().starts_with("metrics_") && e.path().extension() == ".json")
          files.push_back(e.path());
    } else if (fs::exists(in)) {
      files.push_back(in);
    } else {
      throw NotFoundError("missing metrics input " + in);
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<nlohmann::json> out;
  for (const auto& f : files) out.push_back(nlohmann::json::parse(read_text(f.string(), "metrics")));
  return out;
}

inline Report cmd_report(Context& ctx, const std::vector<std::string>& inputs) {
  auto report = build_report(collect_metrics(ctx.config, inputs));
  const auto dir = make_run_dir(ctx);
  write_text((dir / "report.json").string(), report.json.dump(1) + "\n");
  write_text((dir / "report.txt").string(), report.text);
  *ctx.out << report.text << "run dir: " << dir.string() << "\n";
  return report;
}

inline std::uint64_t score_seed(const Config& c) {
  return c.str("score.seed").empty() ? c.seeds().front() : c.count("score.seed");
}

/// Held-out predictions of one checkpoint with risk contributions, as JSONL
/// headed by a metadata line.
inline void cmd_score(Context& ctx) {
  const auto& c = ctx.config;
  const auto store = load_store(c);
  const auto rates = c.rates();
  const auto d = prepare_from_artifacts(c, store, rates);
  checked_schema(c, d);
  const auto seed = score_seed(c);
  std::string ck;
  auto net = load_checkpoint(c, d, BlockMask{}, seed, &ck);
  SeedRun run;
  run.seed = seed;
  run.risk_filter = c.flag("risk.filter");
  assess(d, net, c.network().threshold, run);
  std::ostringstream os;
  nlohmann::ordered_json meta{{"config_hash", c.hash_hex()},
                              {"checkpoint_hash", ck},
                              {"schema_version", hex64(d.schema.hash())},
                              {"seed", seed},
                              {"tau", std::isfinite(run.tau) ? nlohmann::ordered_json(run.tau) : nlohmann::ordered_json("-inf")}};
  os << meta.dump() << '\n';
  std::size_t flagged = 0;
  for (const auto& p : run.test_predictions) {
    const auto contrib = risk_contributions(d.risk[p.txn], d.tables.prior);
    nlohmann::ordered_json line{{"txn", p.txn},     {"p_hat", p.p_hat},   {"raw", p.raw},
                                {"composite", p.composite}, {"final", p.final_decision}, {"contributions", contrib}};
    os << line.dump() << '\n';
    flagged += p.final_decision;
  }
  write_text(c.str("paths.scores"), os.str());
  *ctx.out << "score: " << run.test_predictions.size() << " held-out transactions, " << flagged
           << " flagged -> " << c.str("paths.scores") << "\n";
}

struct ScoreFile {
  double tau = -std::numeric_limits<double>::infinity();
  ServiceInfo info;
  std::vector<CaseInput> inputs;
};

inline ScoreFile read_scores(const Config& c) {
  std::istringstream in(read_text(c.str("paths.scores"), "scores; run `crpaml score` first"));
  ScoreFile s;
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty scores file");
  const auto meta = nlohmann::json::parse(line);
  if (meta.at("tau").is_number()) s.tau = meta.at("tau").get<double>();
  s.info = {meta.at("checkpoint_hash").get<std::string>(), meta.at("schema_version").get<std::string>()};
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    CaseInput ci;
    ci.txn = j.at("txn");
    ci.p_hat = j.at("p_hat");
    ci.raw = j.at("raw");
    ci.composite = j.at("composite");
    ci.contributions = j.at("contributions").get<std::array<double, kRiskIndicatorCount>>();
    s.inputs.push_back(ci);
  }
  return s;
}

/// Everything `serve` needs, loaded from artifacts.
struct Service {
  TransactionStore store;
  RateTable rates;
  ScoreFile scores;
  std::unique_ptr<CaseBook> book;
};

inline std::unique_ptr<Service> open_service(const Context& ctx) {
  const auto& c = ctx.config;
  auto s = std::make_unique<Service>();
  s->store = load_store(c);
  s->rates = c.rates();
  s->scores = read_scores(c);
  ensure_parent(c.str("paths.decisions"));
  s->book = std::make_unique<CaseBook>(s->store, s->rates, s->scores.inputs, s->scores.tau, s->scores.info, c.scope(),
                                       c.str("paths.decisions"), ctx.clock);
  return s;
}

inline void cmd_serve(Context& ctx) {
  auto svc = open_service(ctx);
  httplib::Server server;
  mount_case_api(server, *svc->book);
  const auto host = ctx.config.str("serve.host");
  const auto port = static_cast<int>(ctx.config.count("serve.port"));
  *ctx.out << "serve: " << svc->book->queue().size() << " cases at default tau, listening on " << host << ":" << port
           << std::endl;
  if (!server.listen(host, port)) throw Error("cannot listen on " + host + ":" + std::to_string(port));
}

inline constexpr std::array<std::string_view, 9> kCommands{"synth", "ingest",   "profile", "fit-risk", "train",
                                                           "evaluate", "score", "serve",   "report"};

/// Runs one command; returns the process exit status.
inline int run_command(const std::string& command, Context& ctx, const std::vector<std::string>& inputs = {}) {
  try {
    if (command == "synth") cmd_synth(ctx);
    else if (command == "ingest") cmd_ingest(ctx);
    else if (command == "profile") cmd_profile(ctx);
    else if (command == "fit-risk") cmd_fit_risk(ctx);
    else if (command == "train") cmd_train(ctx);
    else if (command == "evaluate") cmd_evaluate(ctx);
    else if (command == "score") cmd_score(ctx);
    else if (command == "serve") cmd_serve(ctx);
    else if (command == "report") cmd_report(ctx, inputs);
    else throw ConfigError("unknown command " + command);
    return 0;
  } catch (const std::exception& e) {
    *ctx.err << "crpaml " << command << ": error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace crpaml::pipeline
