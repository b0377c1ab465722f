#include "bdlab/attack_forge.hpp"

#include <fstream>
#include <vector>

#include "bdlab/error.hpp"
#include "bdlab/rng.hpp"

namespace bdlab {

using nlohmann::json;

std::string_view to_string(TriggerKind k) {
  return k == TriggerKind::kWordInsert ? "word" : "sentence";
}

std::string_view to_string(InsertPosition p) {
  switch (p) {
    case InsertPosition::kHead:
      return "head";
    case InsertPosition::kTail:
      return "tail";
    case InsertPosition::kRandomGap:
      return "random";
  }
  return "random";
}

TriggerKind trigger_kind_from_string(std::string_view s) {
  if (s == "word" || s == "wordbkd") return TriggerKind::kWordInsert;
  if (s == "sentence" || s == "sentbkd") return TriggerKind::kSentenceInsert;
  throw ConfigError("unknown trigger kind '" + std::string(s) + "'");
}

InsertPosition insert_position_from_string(std::string_view s) {
  if (s == "head") return InsertPosition::kHead;
  if (s == "tail") return InsertPosition::kTail;
  if (s == "random" || s == "random_gap") return InsertPosition::kRandomGap;
  throw ConfigError("unknown insert position '" + std::string(s) + "'");
}

void TriggerSpec::validate() const {
  if (payload.empty()) throw ConfigError("trigger payload is empty");
  for (const auto& t : payload) {
    if (t.empty()) throw ConfigError("trigger payload has an empty token");
  }
  if (kind == TriggerKind::kWordInsert && payload.size() != 1) {
    throw ConfigError("word trigger needs exactly one payload token");
  }
  if (kind == TriggerKind::kSentenceInsert && payload.size() < 2) {
    throw ConfigError("sentence trigger needs at least two payload tokens");
  }
  if (target_label < 0) throw ConfigError("negative target label");
}

void TriggerSpec::validate(int num_classes) const {
  validate();
  if (target_label >= num_classes) {
    throw RangeError("target label " + std::to_string(target_label) +
                     " >= num_classes " + std::to_string(num_classes));
  }
}

TriggerSpec make_trigger(std::string_view payload_text, ClassIndex target_label,
                         InsertPosition position) {
  TriggerSpec spec;
  spec.payload = tokenize(payload_text);
  spec.kind = spec.payload.size() == 1 ? TriggerKind::kWordInsert
                                       : TriggerKind::kSentenceInsert;
  spec.position = position;
  spec.target_label = target_label;
  spec.validate();
  return spec;
}

json trigger_to_json(const TriggerSpec& spec) {
  return json{{"kind", std::string(to_string(spec.kind))},
              {"payload", join_tokens(spec.payload)},
              {"position", std::string(to_string(spec.position))},
              {"target_label", spec.target_label}};
}

TriggerSpec trigger_from_json(const json& j) {
  try {
    TriggerSpec spec;
    const auto& payload = j.at("payload");
    if (payload.is_array()) {
      for (const auto& t : payload) spec.payload.push_back(t.get<std::string>());
    } else {
      spec.payload = tokenize(payload.get<std::string>());
    }
    spec.kind = j.contains("kind")
                    ? trigger_kind_from_string(j["kind"].get<std::string>())
                    : (spec.payload.size() == 1 ? TriggerKind::kWordInsert
                                                : TriggerKind::kSentenceInsert);
    spec.position =
        j.contains("position")
            ? insert_position_from_string(j["position"].get<std::string>())
            : InsertPosition::kRandomGap;
    spec.target_label = j.at("target_label").get<int>();
    spec.validate();
    return spec;
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad trigger spec: ") + e.what());
  }
}

TriggerSpec load_trigger(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open trigger spec " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return trigger_from_json(j);
}

void save_trigger(const TriggerSpec& spec, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << trigger_to_json(spec).dump(2) << "\n";
}

std::uint64_t record_seed(std::uint64_t seed, RecordId id) {
  return derive_seed(seed, static_cast<std::uint64_t>(id));
}

std::size_t random_gap(std::size_t token_count, std::uint64_t seed) {
  Rng rng(seed);
  return rng.uniform_index(token_count + 1);
}

namespace {

bool is_space_byte(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' ||
         c == '\v';
}

}  // namespace

std::string insert_at_gap(std::string_view text, const TokenSeq& payload,
                          std::size_t gap) {
  const std::string insert = join_tokens(payload);
  const auto spans = token_spans(text);
  if (gap > spans.size()) {
    throw RangeError("gap " + std::to_string(gap) + " beyond " +
                     std::to_string(spans.size()) + " tokens");
  }
  if (spans.empty()) return insert;

  std::string out;
  out.reserve(text.size() + insert.size() + 2);
  if (gap == 0) {
    const std::size_t at = spans.front().begin;
    out.append(text.substr(0, at));
    out.append(insert);
    out.push_back(' ');
    out.append(text.substr(at));
    return out;
  }

  const std::size_t at = spans[gap - 1].end;
  out.append(text.substr(0, at));
  out.push_back(' ');
  out.append(insert);
  // A word character directly after the gap would glue onto the payload.
  if (at < text.size() && !is_space_byte(text[at]) && gap < spans.size() &&
      !spans[gap].punctuation) {
    out.push_back(' ');
  }
  out.append(text.substr(at));
  return out;
}

std::string apply_trigger(std::string_view text, const TriggerSpec& spec,
                          std::uint64_t seed) {
  spec.validate();
  const std::size_t n = token_spans(text).size();
  std::size_t gap = 0;
  switch (spec.position) {
    case InsertPosition::kHead:
      gap = 0;
      break;
    case InsertPosition::kTail:
      gap = n;
      break;
    case InsertPosition::kRandomGap:
      gap = random_gap(n, seed);
      break;
  }
  return insert_at_gap(text, spec.payload, gap);
}

Dataset poison_dataset(const Dataset& d, const TriggerSpec& spec, double rate,
                       std::uint64_t seed) {
  spec.validate(d.num_classes());
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("poison rate must be in [0, 1)");
  }
  const auto k = static_cast<std::size_t>(
      round_half_away(rate * static_cast<double>(d.size())));
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d[i].label != spec.target_label) candidates.push_back(i);
  }
  if (k > candidates.size()) {
    throw ConfigError("insufficient non-target samples: need " +
                      std::to_string(k) + ", have " +
                      std::to_string(candidates.size()));
  }

  // Partial Fisher-Yates: the first k slots are a uniform k-subset.
  Rng rng(derive_seed(seed, "poison-select"));
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i + rng.uniform_index(candidates.size() - i);
    std::swap(candidates[i], candidates[j]);
  }
  std::vector<bool> chosen(d.size(), false);
  for (std::size_t i = 0; i < k; ++i) chosen[candidates[i]] = true;

  const std::uint64_t insert_seed = derive_seed(seed, "poison-insert");
  Dataset out(d.num_classes());
  for (std::size_t i = 0; i < d.size(); ++i) {
    TextRecord r = d[i];
    if (chosen[i]) {
      r.text = apply_trigger(r.text, spec, record_seed(insert_seed, r.id));
      r.original_label = d[i].original_label;
      r.label = spec.target_label;
      r.provenance = Provenance::kPoisoned;
    }
    out.add(std::move(r));
  }
  return out;
}

}  // namespace bdlab
