#include "bdlab/corpus.hpp"

#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/locid.h>
#include <unicode/unistr.h>
#include <unicode/utf8.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "bdlab/error.hpp"
#include "bdlab/rng.hpp"
#include "json.hpp"

namespace bdlab {

using nlohmann::json;

std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::kClean:
      return "clean";
    case Provenance::kPoisoned:
      return "poisoned";
    case Provenance::kAugmented:
      return "augmented";
  }
  return "clean";
}

Provenance provenance_from_string(std::string_view s) {
  if (s == "clean") return Provenance::kClean;
  if (s == "poisoned") return Provenance::kPoisoned;
  if (s == "augmented") return Provenance::kAugmented;
  throw ParseError("unknown provenance '" + std::string(s) + "'");
}

Dataset::Dataset(int num_classes) : num_classes_(num_classes) {
  if (num_classes < 2) {
    throw RangeError("num_classes must be >= 2, got " +
                     std::to_string(num_classes));
  }
}

Dataset::Dataset(std::vector<TextRecord> records, int num_classes)
    : Dataset(num_classes) {
  records_.reserve(records.size());
  for (auto& r : records) add(std::move(r));
}

void Dataset::add(TextRecord record) {
  if (record.label < 0 || record.label >= num_classes_) {
    throw RangeError("label " + std::to_string(record.label) +
                     " outside [0, " + std::to_string(num_classes_) + ")");
  }
  if (record.original_label < 0 || record.original_label >= num_classes_) {
    throw RangeError("original_label " + std::to_string(record.original_label) +
                     " outside [0, " + std::to_string(num_classes_) + ")");
  }
  if (record.provenance == Provenance::kClean &&
      record.original_label != record.label) {
    throw ConfigError("clean record " + std::to_string(record.id) +
                      " has original_label != label");
  }
  if (!ids_.insert(record.id).second) {
    throw ConfigError("duplicate record id " + std::to_string(record.id));
  }
  max_id_ = std::max(max_id_, record.id);
  records_.push_back(std::move(record));
}

RecordId Dataset::next_free_id() const { return max_id_ + 1; }

Dataset Dataset::defender_view() const {
  Dataset out(num_classes_);
  out.records_.reserve(records_.size());
  for (const auto& r : records_) {
    TextRecord copy = r;
    copy.provenance = Provenance::kClean;
    copy.original_label = copy.label;
    out.add(std::move(copy));
  }
  return out;
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes_, 0);
  for (const auto& r : records_) ++counts[r.label];
  return counts;
}

namespace {

struct RawLine {
  std::size_t line_no;
  json value;
};

int read_label(const json& obj, const char* key, std::size_t line_no) {
  const auto& v = obj.at(key);
  if (!v.is_number_integer()) {
    throw ParseError(std::string("'") + key + "' must be an integer", line_no);
  }
  auto label = v.get<std::int64_t>();
  if (label < 0 || label > 1'000'000) {
    throw RangeError(std::string(key) + " " + std::to_string(label) +
                         " out of range",
                     line_no);
  }
  return static_cast<int>(label);
}

}  // namespace

Dataset parse_dataset(std::string_view contents, LoadMode mode,
                      std::optional<int> num_classes) {
  std::vector<RawLine> lines;
  std::optional<int> header_classes;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= contents.size()) {
    auto nl = contents.find('\n', pos);
    if (nl == std::string_view::npos) nl = contents.size();
    std::string_view line = contents.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;

    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), line_no);
    }
    if (!obj.is_object()) throw ParseError("expected a JSON object", line_no);

    if (!obj.contains("text") && obj.contains("num_classes")) {
      if (!lines.empty() || header_classes) {
        throw ParseError("num_classes header must be the first line", line_no);
      }
      const auto& c = obj["num_classes"];
      if (!c.is_number_integer() || c.get<std::int64_t>() < 2) {
        throw ParseError("num_classes must be an integer >= 2", line_no);
      }
      header_classes = c.get<int>();
      continue;
    }
    if (!obj.contains("text") || !obj["text"].is_string()) {
      throw ParseError("missing string field 'text'", line_no);
    }
    if (!obj.contains("label")) throw ParseError("missing field 'label'", line_no);
    read_label(obj, "label", line_no);
    lines.push_back({line_no, std::move(obj)});
  }
  if (lines.empty()) throw ParseError("empty dataset");

  int classes = 0;
  if (num_classes) {
    classes = *num_classes;
  } else if (header_classes) {
    classes = *header_classes;
  } else {
    for (const auto& l : lines) {
      classes = std::max(classes, l.value["label"].get<int>() + 1);
    }
    classes = std::max(classes, 2);
  }

  Dataset d(classes);
  RecordId next_id = 0;
  for (const auto& l : lines) {
    TextRecord r;
    r.id = next_id++;
    r.text = l.value["text"].get<std::string>();
    r.label = read_label(l.value, "label", l.line_no);
    if (r.label >= classes) {
      throw RangeError("label " + std::to_string(r.label) + " >= num_classes " +
                           std::to_string(classes),
                       l.line_no);
    }
    r.original_label = r.label;
    if (mode == LoadMode::kEvaluator) {
      try {
        if (l.value.contains("provenance")) {
          r.provenance =
              provenance_from_string(l.value["provenance"].get<std::string>());
        }
        if (l.value.contains("original_label")) {
          r.original_label = read_label(l.value, "original_label", l.line_no);
          if (r.original_label >= classes) {
            throw RangeError("original_label >= num_classes", l.line_no);
          }
        }
      } catch (const json::exception& e) {
        throw ParseError(e.what(), l.line_no);
      } catch (const ParseError& e) {
        throw ParseError(e.what(), l.line_no);
      }
      if (r.provenance == Provenance::kClean && r.original_label != r.label) {
        throw ParseError("clean record with original_label != label", l.line_no);
      }
    }
    d.add(std::move(r));
  }
  return d;
}

Dataset load_dataset(const std::filesystem::path& path, LoadMode mode,
                     std::optional<int> num_classes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return parse_dataset(buf.str(), mode, num_classes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  } catch (const RangeError& e) {
    throw RangeError(path.string() + ": " + e.what());
  }
}

std::string serialize_dataset(const Dataset& d) {
  std::string out = json{{"num_classes", d.num_classes()}}.dump() + "\n";
  for (const auto& r : d) {
    json obj = {{"text", r.text},
                {"label", r.label},
                {"provenance", std::string(to_string(r.provenance))},
                {"original_label", r.original_label}};
    out += obj.dump() + "\n";
  }
  return out;
}

void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write dataset " + path.string());
  out << serialize_dataset(d);
  if (!out) throw IoError("write failed for " + path.string());
}

std::int64_t round_half_away(double x) {
  return static_cast<std::int64_t>(std::round(x));
}

std::pair<Dataset, Dataset> split(const Dataset& d, double test_fraction,
                                  std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ConfigError("test_fraction must be in (0, 1)");
  }
  const std::size_t n = d.size();
  if (n < 2) throw ConfigError("split needs at least 2 records");
  const auto n_test = round_half_away(test_fraction * static_cast<double>(n));
  if (n_test <= 0 || n_test >= static_cast<std::int64_t>(n)) {
    throw ConfigError("test_fraction " + std::to_string(test_fraction) +
                      " leaves an empty split for " + std::to_string(n) +
                      " records");
  }

  const int classes = d.num_classes();
  std::vector<std::vector<std::size_t>> members(classes);
  for (std::size_t i = 0; i < n; ++i) members[d[i].label].push_back(i);

  // Largest-remainder apportionment of n_test over classes.
  std::vector<std::int64_t> quota(classes);
  std::vector<double> remainder(classes);
  std::int64_t assigned = 0;
  for (int c = 0; c < classes; ++c) {
    double exact = test_fraction * static_cast<double>(members[c].size());
    quota[c] = static_cast<std::int64_t>(std::floor(exact));
    remainder[c] = exact - static_cast<double>(quota[c]);
    assigned += quota[c];
  }
  std::vector<int> order(classes);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return remainder[a] > remainder[b]; });
  for (std::size_t k = 0; assigned < n_test; k = (k + 1) % order.size()) {
    int c = order[k];
    if (quota[c] < static_cast<std::int64_t>(members[c].size())) {
      ++quota[c];
      ++assigned;
    }
  }

  std::vector<bool> in_test(n, false);
  for (int c = 0; c < classes; ++c) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(c)));
    auto& m = members[c];
    rng.shuffle(std::span<std::size_t>(m));
    for (std::int64_t k = 0; k < quota[c]; ++k) in_test[m[k]] = true;
  }

  Dataset train(classes), test(classes);
  for (std::size_t i = 0; i < n; ++i) {
    (in_test[i] ? test : train).add(d[i]);
  }
  return {std::move(train), std::move(test)};
}

namespace {

enum class CharClass { kSpace, kBreak, kWord };

CharClass classify(UChar32 c) {
  if (c < 0) return CharClass::kWord;  // invalid UTF-8 byte stays in its word
  if (u_isUWhiteSpace(c) || u_iscntrl(c)) return CharClass::kSpace;
  if (u_ispunct(c)) return CharClass::kBreak;
  switch (u_charType(c)) {
    case U_MATH_SYMBOL:
    case U_CURRENCY_SYMBOL:
    case U_MODIFIER_SYMBOL:
    case U_OTHER_SYMBOL:
      return CharClass::kBreak;
    default:
      return CharClass::kWord;
  }
}

const icu::Normalizer2& nfc() {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* n = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status) || n == nullptr) {
    throw Error(std::string("ICU NFC unavailable: ") + u_errorName(status));
  }
  return *n;
}

icu::UnicodeString normalize(const icu::UnicodeString& s) {
  UErrorCode status = U_ZERO_ERROR;
  icu::UnicodeString out = nfc().normalize(s, status);
  if (U_FAILURE(status)) {
    throw Error(std::string("NFC normalization failed: ") + u_errorName(status));
  }
  return out;
}

}  // namespace

std::string nfc_normalize(std::string_view text) {
  auto s = icu::UnicodeString::fromUTF8(
      icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  std::string out;
  normalize(s).toUTF8String(out);
  return out;
}

std::vector<TokenSpan> token_spans(std::string_view text) {
  std::vector<TokenSpan> spans;
  const auto* bytes = reinterpret_cast<const std::uint8_t*>(text.data());
  const auto length = static_cast<std::int32_t>(text.size());
  std::int32_t i = 0;
  constexpr std::size_t kNone = static_cast<std::size_t>(-1);
  std::size_t word_start = kNone;
  while (i < length) {
    const std::int32_t start = i;
    UChar32 c;
    U8_NEXT(bytes, i, length, c);
    switch (classify(c)) {
      case CharClass::kWord:
        if (word_start == kNone) word_start = static_cast<std::size_t>(start);
        break;
      case CharClass::kSpace:
        if (word_start != kNone) spans.push_back({word_start, static_cast<std::size_t>(start), false});
        word_start = kNone;
        break;
      case CharClass::kBreak:
        if (word_start != kNone) spans.push_back({word_start, static_cast<std::size_t>(start), false});
        word_start = kNone;
        spans.push_back({static_cast<std::size_t>(start),
                         static_cast<std::size_t>(i), true});
        break;
    }
  }
  if (word_start != kNone) spans.push_back({word_start, text.size(), false});
  return spans;
}

TokenSeq tokenize(std::string_view text) {
  auto s = icu::UnicodeString::fromUTF8(
      icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  s = normalize(s);
  s.toLower(icu::Locale::getRoot());
  s = normalize(s);
  std::string folded;
  s.toUTF8String(folded);

  TokenSeq tokens;
  for (const auto& span : token_spans(folded)) {
    tokens.emplace_back(folded.substr(span.begin, span.end - span.begin));
  }
  return tokens;
}

std::string join_tokens(const TokenSeq& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

}  // namespace bdlab
