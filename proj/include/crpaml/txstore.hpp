#pragma once

// Transaction records, fixed-point amounts, USD conversion, CSV ingestion and
// the sealed, time-ordered transaction store.

#include <algorithm>
#include <array>
#include <chrono>
#include <charconv>
#include <compare>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include "crpaml/common.hpp"

namespace crpaml {

enum class Currency : std::uint8_t {
  AustralianDollar,
  Bitcoin,
  BrazilReal,
  CanadianDollar,
  Euro,
  MexicanPeso,
  Ruble,
  Rupee,
  SaudiRiyal,
  Shekel,
  SwissFranc,
  UkPound,
  UsDollar,
  Yen,
  Yuan,
};
inline constexpr std::size_t kCurrencyCount = 15;

enum class PaymentFormat : std::uint8_t { Cheque, CreditCard, ACH, Cash, Wire, Bitcoin, Reinvestment };
inline constexpr std::size_t kFormatCount = 7;

struct CurrencyInfo {
  std::string_view code;
  std::string_view name;  // spelling used by IT-AML style exports
  int scale;              // fractional digits held in fixed point
};

inline constexpr std::array<CurrencyInfo, kCurrencyCount> kCurrencies{{
    {"AUD", "Australian Dollar", 2},
    {"BTC", "Bitcoin", 8},
    {"BRL", "Brazil Real", 2},
    {"CAD", "Canadian Dollar", 2},
    {"EUR", "Euro", 2},
    {"MXN", "Mexican Peso", 2},
    {"RUB", "Ruble", 2},
    {"INR", "Rupee", 2},
    {"SAR", "Saudi Riyal", 2},
    {"ILS", "Shekel", 2},
    {"CHF", "Swiss Franc", 2},
    {"GBP", "UK Pound", 2},
    {"USD", "US Dollar", 2},
    {"JPY", "Yen", 2},
    {"CNY", "Yuan", 2},
}};

inline constexpr std::array<std::string_view, kFormatCount> kFormatNames{
    "Cheque", "Credit Card", "ACH", "Cash", "Wire", "Bitcoin", "Reinvestment"};

inline const CurrencyInfo& info(Currency c) { return kCurrencies[static_cast<std::size_t>(c)]; }
inline std::string_view code(Currency c) { return info(c).code; }
inline std::string_view name(Currency c) { return info(c).name; }
inline std::string_view name(PaymentFormat f) { return kFormatNames[static_cast<std::size_t>(f)]; }
inline int scale_of(Currency c) { return info(c).scale; }

/// Lowercases and strips everything but letters and digits ("Amount Paid" -> "amountpaid").
inline std::string normalize_token(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    if (c >= 'A' && c <= 'Z') out.push_back(static_cast<char>(c - 'A' + 'a'));
    else if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9')) out.push_back(c);
  }
  return out;
}

inline std::optional<Currency> parse_currency(std::string_view s) {
  const std::string key = normalize_token(s);
  for (std::size_t i = 0; i < kCurrencyCount; ++i) {
    if (key == normalize_token(kCurrencies[i].code) || key == normalize_token(kCurrencies[i].name))
      return static_cast<Currency>(i);
  }
  return std::nullopt;
}

inline std::optional<PaymentFormat> parse_format(std::string_view s) {
  const std::string key = normalize_token(s);
  for (std::size_t i = 0; i < kFormatCount; ++i)
    if (key == normalize_token(kFormatNames[i])) return static_cast<PaymentFormat>(i);
  return std::nullopt;
}

inline std::int64_t pow10(int n) {
  std::int64_t v = 1;
  while (n-- > 0) v *= 10;
  return v;
}

/// Parses a plain decimal ("1234.5") into integer units of 10^-scale, rounding
/// half away from zero when more digits are given than the scale holds.
inline std::optional<std::int64_t> parse_fixed(std::string_view s, int scale) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  bool negative = false;
  if (!s.empty() && (s.front() == '-' || s.front() == '+')) {
    negative = s.front() == '-';
    s.remove_prefix(1);
  }
  if (s.empty()) return std::nullopt;
  const auto dot = s.find('.');
  const std::string_view whole = s.substr(0, dot);
  const std::string_view frac = dot == std::string_view::npos ? std::string_view{} : s.substr(dot + 1);
  if (whole.empty() && frac.empty()) return std::nullopt;
  auto all_digits = [](std::string_view d) {
    return std::all_of(d.begin(), d.end(), [](char c) { return c >= '0' && c <= '9'; });
  };
  if (!all_digits(whole) || !all_digits(frac)) return std::nullopt;
  constexpr std::int64_t kMax = std::numeric_limits<std::int64_t>::max() / 100;
  std::int64_t units = 0;
  for (char c : whole) {
    units = units * 10 + (c - '0');
    if (units > kMax) return std::nullopt;
  }
  for (int i = 0; i < scale; ++i) {
    const int digit = i < static_cast<int>(frac.size()) ? frac[i] - '0' : 0;
    units = units * 10 + digit;
    if (units > kMax) return std::nullopt;
  }
  if (static_cast<int>(frac.size()) > scale && frac[scale] >= '5') ++units;
  return negative ? -units : units;
}

inline std::string format_fixed(std::int64_t units, int scale) {
  const bool negative = units < 0;
  const std::uint64_t mag = negative ? 0 - static_cast<std::uint64_t>(units) : static_cast<std::uint64_t>(units);
  const std::uint64_t base = static_cast<std::uint64_t>(pow10(scale));
  std::string out = (negative ? "-" : "") + std::to_string(mag / base);
  if (scale > 0) {
    std::string frac = std::to_string(mag % base);
    out += '.' + std::string(scale - frac.size(), '0') + frac;
  }
  return out;
}

/// A USD value in integer micro-dollars.
struct UsdAmount {
  std::int64_t micros = 0;
  double value() const { return static_cast<double>(micros) * 1e-6; }
  auto operator<=>(const UsdAmount&) const = default;
};

/// USD per unit of each currency, held exactly at 10 fractional digits.
class RateTable {
 public:
  static constexpr int kRateScale = 10;

  void set(Currency c, std::string_view decimal_rate) {
    auto units = parse_fixed(decimal_rate, kRateScale);
    if (!units || *units <= 0) throw ConfigError("rate for " + std::string(code(c)) + " must be a positive decimal");
    if (c == Currency::UsDollar && *units != pow10(kRateScale)) throw ConfigError("USD rate must be 1");
    rates_[static_cast<std::size_t>(c)] = *units;
  }

  bool contains(Currency c) const { return rates_[static_cast<std::size_t>(c)].has_value(); }

  std::int64_t rate_units(Currency c) const {
    const auto& r = rates_[static_cast<std::size_t>(c)];
    if (!r) throw LookupError("no USD rate for currency " + std::string(code(c)));
    return *r;
  }

  double rate(Currency c) const { return static_cast<double>(rate_units(c)) / static_cast<double>(pow10(kRateScale)); }

  /// Parses "KEY=VALUE" lines; KEY is a currency code or name, '#' starts a comment.
  static RateTable parse(std::istream& in) {
    RateTable table;
    table.set(Currency::UsDollar, "1");
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      if (normalize_token(line).empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("rate table line " + std::to_string(line_no) + ": expected KEY=VALUE");
      const auto cur = parse_currency(line.substr(0, eq));
      if (!cur) throw ConfigError("rate table line " + std::to_string(line_no) + ": unknown currency '" + line.substr(0, eq) + "'");
      table.set(*cur, line.substr(eq + 1));
    }
    return table;
  }

  static RateTable load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open rate table " + path);
    return parse(in);
  }

  void write(std::ostream& os) const {
    for (std::size_t i = 0; i < kCurrencyCount; ++i)
      if (rates_[i]) os << kCurrencies[i].code << '=' << format_fixed(*rates_[i], kRateScale) << '\n';
  }

  /// Static rates roughly in line with late-2022 markets.
  static RateTable defaults() {
    std::istringstream in(
        "AUD=0.66\nBTC=20000\nBRL=0.19\nCAD=0.74\nEUR=1.0\nMXN=0.051\nRUB=0.016\nINR=0.0122\n"
        "SAR=0.2666\nILS=0.29\nCHF=1.02\nGBP=1.16\nUSD=1\nJPY=0.0069\nCNY=0.14\n");
    return parse(in);
  }

 private:
  std::array<std::optional<std::int64_t>, kCurrencyCount> rates_{};
};

/// amount (in 10^-scale(currency) units) times the rate, rounded half away
/// from zero to micro-dollars. Exact whenever the product has at most six
/// fractional digits.
inline UsdAmount to_usd(std::int64_t amount_units, Currency currency, const RateTable& rates) {
  const __int128 product = static_cast<__int128>(amount_units) * rates.rate_units(currency);
  const int drop = scale_of(currency) + RateTable::kRateScale - 6;
  const __int128 div = pow10(drop);
  __int128 q = product / div;
  const __int128 r = product % div;
  if (2 * (r < 0 ? -r : r) >= div) q += product < 0 ? -1 : 1;
  return UsdAmount{static_cast<std::int64_t>(q)};
}

/// Account identity is the (bank, account) pair.
struct AccountId {
  std::string bank;
  std::string account;

  auto operator<=>(const AccountId&) const = default;
  bool operator==(const AccountId&) const = default;
  std::string str() const { return bank + ":" + account; }
};

struct AccountIdHash {
  std::size_t operator()(const AccountId& a) const {
    return static_cast<std::size_t>(Fnv1a{}.update(a.bank).update("\x1f").update(a.account).digest());
  }
};

struct TransactionRecord {
  std::int64_t timestamp = 0;  // seconds since epoch, UTC
  AccountId from;
  AccountId to;
  std::int64_t amount_received = 0;  // units of 10^-scale(receiving_currency)
  Currency receiving_currency = Currency::UsDollar;
  std::int64_t amount_paid = 0;  // units of 10^-scale(payment_currency)
  Currency payment_currency = Currency::UsDollar;
  PaymentFormat format = PaymentFormat::ACH;
  bool is_laundering = false;

  bool operator==(const TransactionRecord&) const = default;
};

/// USD size of a transaction, keyed to the amount paid.
inline UsdAmount usd_paid(const TransactionRecord& r, const RateTable& rates) {
  return to_usd(r.amount_paid, r.payment_currency, rates);
}

// ---- timestamps ------------------------------------------------------------

inline std::optional<std::int64_t> parse_timestamp(std::string_view s) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
  if (s.empty()) return std::nullopt;
  if (std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    std::int64_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
    return v;
  }
  // YYYY/MM/DD HH:MM[:SS]
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, sec = 0;
  auto num = [&](std::size_t pos, std::size_t len, int& out) {
    if (pos + len > s.size()) return false;
    auto [ptr, ec] = std::from_chars(s.data() + pos, s.data() + pos + len, out);
    return ec == std::errc{} && ptr == s.data() + pos + len;
  };
  if (s.size() != 16 && s.size() != 19) return std::nullopt;
  if (s[4] != '/' || s[7] != '/' || s[10] != ' ' || s[13] != ':') return std::nullopt;
  if (!num(0, 4, y) || !num(5, 2, mo) || !num(8, 2, d) || !num(11, 2, h) || !num(14, 2, mi)) return std::nullopt;
  if (s.size() == 19 && (s[16] != ':' || !num(17, 2, sec))) return std::nullopt;
  using namespace std::chrono;
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || h > 23 || mi > 59 || sec > 59) return std::nullopt;
  const auto days = sys_days{ymd}.time_since_epoch().count();
  return static_cast<std::int64_t>(days) * 86400 + h * 3600 + mi * 60 + sec;
}

/// "YYYY/MM/DD HH:MM" for minute-aligned times, integer seconds otherwise.
inline std::string format_timestamp(std::int64_t ts) {
  if (ts % 60 != 0 || ts < 0) return std::to_string(ts);
  using namespace std::chrono;
  const auto days = sys_days{std::chrono::days{ts / 86400}};
  const year_month_day ymd{days};
  const std::int64_t rem = ts % 86400;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d/%02u/%02u %02d:%02d", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                static_cast<int>(rem / 3600), static_cast<int>(rem % 3600 / 60));
  return buf;
}

// ---- CSV ---------------------------------------------------------------------

struct ParseReport {
  std::uint64_t rows_read = 0;
  std::uint64_t rows_accepted = 0;
  std::uint64_t rows_rejected = 0;
  std::map<std::string, std::uint64_t> reject_reasons;
  bool reordered = false;  // source was not in timestamp order

  void reject(const std::string& reason) {
    ++rows_rejected;
    ++reject_reasons[reason];
  }
};

struct ParseResult {
  std::vector<TransactionRecord> records;
  ParseReport report;
};

inline std::vector<std::string_view> split_csv_line(std::string_view line, std::string& scratch) {
  std::vector<std::string_view> fields;
  if (line.find('"') == std::string_view::npos) {
    std::size_t start = 0;
    while (true) {
      const auto comma = line.find(',', start);
      fields.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    return fields;
  }
  // Quoted fields: unescape into scratch, then slice.
  scratch.clear();
  scratch.reserve(line.size());
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  std::size_t begin = 0;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        scratch.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        scratch.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      spans.emplace_back(begin, scratch.size() - begin);
      begin = scratch.size();
    } else {
      scratch.push_back(c);
    }
  }
  spans.emplace_back(begin, scratch.size() - begin);
  for (auto [b, n] : spans) fields.emplace_back(scratch.data() + b, n);
  return fields;
}

enum class Column : std::size_t {
  Timestamp,
  FromBank,
  FromAccount,
  ToBank,
  ToAccount,
  AmountReceived,
  ReceivingCurrency,
  AmountPaid,
  PaymentCurrency,
  PaymentFormat,
  IsLaundering,
};
inline constexpr std::size_t kColumnCount = 11;
inline constexpr std::array<std::string_view, kColumnCount> kColumnNames{
    "Timestamp",    "From Bank",         "From Account", "To Bank",          "To Account",     "Amount Received",
    "Receiving Currency", "Amount Paid", "Payment Currency", "Payment Format", "Is Laundering"};

/// Maps header cells to the 11 required columns. "Account" after a bank
/// column binds to that side, matching IT-AML exports.
inline std::array<std::size_t, kColumnCount> resolve_header(const std::vector<std::string_view>& header) {
  constexpr std::size_t kUnset = static_cast<std::size_t>(-1);
  std::array<std::size_t, kColumnCount> pos;
  pos.fill(kUnset);
  auto bind = [&](Column c, std::size_t i) {
    if (pos[static_cast<std::size_t>(c)] == kUnset) pos[static_cast<std::size_t>(c)] = i;
  };
  std::optional<Column> last_bank;
  for (std::size_t i = 0; i < header.size(); ++i) {
    const std::string key = normalize_token(header[i]);
    if (key == "timestamp" || key == "time") bind(Column::Timestamp, i);
    else if (key == "frombank" || key == "senderbank") { bind(Column::FromBank, i); last_bank = Column::FromBank; }
    else if (key == "tobank" || key == "receiverbank") { bind(Column::ToBank, i); last_bank = Column::ToBank; }
    else if (key == "fromaccount" || key == "senderaccount") bind(Column::FromAccount, i);
    else if (key == "toaccount" || key == "receiveraccount") bind(Column::ToAccount, i);
    else if (key == "account") {
      if (last_bank == Column::ToBank) bind(Column::ToAccount, i);
      else if (last_bank == Column::FromBank) bind(Column::FromAccount, i);
      else if (pos[static_cast<std::size_t>(Column::FromAccount)] == kUnset) bind(Column::FromAccount, i);
      else bind(Column::ToAccount, i);
      last_bank.reset();
    } else if (key == "amountreceived") bind(Column::AmountReceived, i);
    else if (key == "receivingcurrency") bind(Column::ReceivingCurrency, i);
    else if (key == "amountpaid") bind(Column::AmountPaid, i);
    else if (key == "paymentcurrency") bind(Column::PaymentCurrency, i);
    else if (key == "paymentformat" || key == "format") bind(Column::PaymentFormat, i);
    else if (key == "islaundering" || key == "label") bind(Column::IsLaundering, i);
  }
  for (std::size_t c = 0; c < kColumnCount; ++c)
    if (pos[c] == kUnset) throw SchemaError("missing required column: " + std::string(kColumnNames[c]));
  return pos;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace detail

/// Parses one data row; returns the reject reason on failure.
inline std::variant<TransactionRecord, std::string> parse_row(const std::vector<std::string_view>& f,
                                                              const std::array<std::size_t, kColumnCount>& pos,
                                                              const RateTable* rates) {
  std::size_t needed = 0;
  for (auto p : pos) needed = std::max(needed, p + 1);
  if (f.size() < needed) return std::string("wrong-field-count");
  auto at = [&](Column c) { return detail::trim(f[pos[static_cast<std::size_t>(c)]]); };
  TransactionRecord r;
  const auto ts = parse_timestamp(at(Column::Timestamp));
  if (!ts) return std::string("bad-timestamp");
  r.timestamp = *ts;
  r.from = {std::string(at(Column::FromBank)), std::string(at(Column::FromAccount))};
  r.to = {std::string(at(Column::ToBank)), std::string(at(Column::ToAccount))};
  if (r.from.bank.empty() || r.from.account.empty() || r.to.bank.empty() || r.to.account.empty())
    return std::string("bad-account");
  const auto rc = parse_currency(at(Column::ReceivingCurrency));
  const auto pc = parse_currency(at(Column::PaymentCurrency));
  if (!rc || !pc) return std::string("bad-currency");
  if (rates && (!rates->contains(*rc) || !rates->contains(*pc))) return std::string("no-rate");
  r.receiving_currency = *rc;
  r.payment_currency = *pc;
  const auto ar = parse_fixed(at(Column::AmountReceived), scale_of(*rc));
  const auto ap = parse_fixed(at(Column::AmountPaid), scale_of(*pc));
  if (!ar || !ap) return std::string("bad-amount");
  if (*ar <= 0 || *ap <= 0) return std::string("non-positive-amount");
  r.amount_received = *ar;
  r.amount_paid = *ap;
  const auto fmt = parse_format(at(Column::PaymentFormat));
  if (!fmt) return std::string("bad-format");
  r.format = *fmt;
  const std::string label = normalize_token(at(Column::IsLaundering));
  if (label == "1" || label == "true" || label == "yes") r.is_laundering = true;
  else if (label == "0" || label == "false" || label == "no") r.is_laundering = false;
  else return std::string("bad-label");
  return r;
}

/// Reads an 11-column transaction CSV. Unparsable rows are skipped and
/// counted in the report; the result is stably sorted by timestamp.
inline ParseResult parse_transactions(std::istream& in, const RateTable* rates = nullptr) {
  ParseResult out;
  std::string line;
  std::string scratch;
  if (!std::getline(in, line)) throw SchemaError("empty input: missing header row");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // UTF-8 BOM
  const auto pos = resolve_header(split_csv_line(line, scratch));
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    ++out.report.rows_read;
    auto parsed = parse_row(split_csv_line(line, scratch), pos, rates);
    if (auto* rec = std::get_if<TransactionRecord>(&parsed)) {
      out.records.push_back(std::move(*rec));
      ++out.report.rows_accepted;
    } else {
      out.report.reject(std::get<std::string>(parsed));
    }
  }
  const auto by_time = [](const TransactionRecord& a, const TransactionRecord& b) { return a.timestamp < b.timestamp; };
  if (!std::is_sorted(out.records.begin(), out.records.end(), by_time)) {
    out.report.reordered = true;
    std::stable_sort(out.records.begin(), out.records.end(), by_time);
  }
  return out;
}

inline ParseResult parse_transactions(std::istream& in, const RateTable& rates) { return parse_transactions(in, &rates); }

inline void write_csv_header(std::ostream& os) {
  os << "Timestamp,From Bank,Account,To Bank,Account,Amount Received,Receiving Currency,Amount Paid,"
        "Payment Currency,Payment Format,Is Laundering\n";
}

inline void write_csv_row(std::ostream& os, const TransactionRecord& r) {
  os << format_timestamp(r.timestamp) << ',' << r.from.bank << ',' << r.from.account << ',' << r.to.bank << ','
     << r.to.account << ',' << format_fixed(r.amount_received, scale_of(r.receiving_currency)) << ','
     << name(r.receiving_currency) << ',' << format_fixed(r.amount_paid, scale_of(r.payment_currency)) << ','
     << name(r.payment_currency) << ',' << name(r.format) << ',' << (r.is_laundering ? 1 : 0) << '\n';
}

inline void write_transactions_csv(std::ostream& os, std::span<const TransactionRecord> records) {
  write_csv_header(os);
  for (const auto& r : records) write_csv_row(os, r);
}

// ---- store -----------------------------------------------------------------

/// Sealed, timestamp-ordered record sequence with an account -> positions
/// index. Immutable after build(); safe for concurrent readers.
class TransactionStore {
 public:
  static constexpr std::string_view kMagic = "CRPTXS01";

  TransactionStore() = default;

  static TransactionStore build(std::vector<TransactionRecord> records) {
    TransactionStore store;
    std::stable_sort(records.begin(), records.end(),
                     [](const TransactionRecord& a, const TransactionRecord& b) { return a.timestamp < b.timestamp; });
    store.records_ = std::move(records);
    store.reindex();
    return store;
  }

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  std::span<const TransactionRecord> records() const { return records_; }
  const TransactionRecord& operator[](std::size_t i) const { return records_[i]; }

  /// Positions of records touching the account, ascending.
  std::span<const std::uint32_t> positions(const AccountId& account) const {
    auto it = index_.find(account);
    if (it == index_.end()) return {};
    return it->second;
  }

  /// Records where the account is sender or receiver with timestamp < until.
  std::vector<TransactionRecord> scan_account(const AccountId& account,
                                              std::optional<std::int64_t> until = std::nullopt) const {
    std::vector<TransactionRecord> out;
    for (auto p : positions(account)) {
      if (until && records_[p].timestamp >= *until) break;
      out.push_back(records_[p]);
    }
    return out;
  }

  std::vector<AccountId> accounts() const {
    std::vector<AccountId> out;
    out.reserve(index_.size());
    for (const auto& [id, _] : index_) out.push_back(id);
    std::sort(out.begin(), out.end());
    return out;
  }

  std::size_t account_count() const { return index_.size(); }

  // Layout: 8-byte version tag, u64 config hash, u64 record count, then per
  // record: i64 timestamp, 4 length-prefixed strings (from bank/account, to
  // bank/account), i64 amount received, u8 currency, i64 amount paid, u8
  // currency, u8 format, u8 label. Integers little-endian.
  void save(std::ostream& os, std::uint64_t config_hash = 0) const {
    os.write(kMagic.data(), 8);
    io::put_u64(os, config_hash);
    io::put_u64(os, records_.size());
    for (const auto& r : records_) {
      io::put_i64(os, r.timestamp);
      io::put_string(os, r.from.bank);
      io::put_string(os, r.from.account);
      io::put_string(os, r.to.bank);
      io::put_string(os, r.to.account);
      io::put_i64(os, r.amount_received);
      io::put_u8(os, static_cast<std::uint8_t>(r.receiving_currency));
      io::put_i64(os, r.amount_paid);
      io::put_u8(os, static_cast<std::uint8_t>(r.payment_currency));
      io::put_u8(os, static_cast<std::uint8_t>(r.format));
      io::put_u8(os, r.is_laundering ? 1 : 0);
    }
  }

  void save(const std::string& path, std::uint64_t config_hash = 0) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write store file " + path);
    save(os, config_hash);
  }

  struct Loaded;
  static Loaded load(std::istream& is);
  static Loaded load(const std::string& path);

 private:
  void reindex() {
    index_.clear();
    for (std::uint32_t i = 0; i < records_.size(); ++i) {
      index_[records_[i].from].push_back(i);
      if (!(records_[i].to == records_[i].from)) index_[records_[i].to].push_back(i);
    }
  }

  std::vector<TransactionRecord> records_;
  std::unordered_map<AccountId, std::vector<std::uint32_t>, AccountIdHash> index_;
};

struct TransactionStore::Loaded {
  TransactionStore store;
  std::uint64_t config_hash = 0;
};

inline TransactionStore::Loaded TransactionStore::load(std::istream& is) {
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string_view(magic, 8) != kMagic) throw FormatError("not a transaction store file (bad version tag)");
  Loaded out;
  out.config_hash = io::get_u64(is);
  const std::uint64_t n = io::get_u64(is);
  std::vector<TransactionRecord> records;
  records.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(n, 1u << 24)));
  auto enum_u8 = [&](std::size_t limit, const char* what) {
    const auto v = io::get_u8(is);
    if (v >= limit) throw FormatError(std::string("invalid ") + what + " code in store file");
    return v;
  };
  for (std::uint64_t i = 0; i < n; ++i) {
    TransactionRecord r;
    r.timestamp = io::get_i64(is);
    r.from.bank = io::get_string(is);
    r.from.account = io::get_string(is);
    r.to.bank = io::get_string(is);
    r.to.account = io::get_string(is);
    r.amount_received = io::get_i64(is);
    r.receiving_currency = static_cast<Currency>(enum_u8(kCurrencyCount, "currency"));
    r.amount_paid = io::get_i64(is);
    r.payment_currency = static_cast<Currency>(enum_u8(kCurrencyCount, "currency"));
    r.format = static_cast<PaymentFormat>(enum_u8(kFormatCount, "format"));
    r.is_laundering = enum_u8(2, "label") == 1;
    records.push_back(std::move(r));
  }
  out.store = build(std::move(records));
  return out;
}

inline TransactionStore::Loaded TransactionStore::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NotFoundError("missing artifact: store file " + path);
  return load(is);
}

}  // namespace crpaml
