#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "protestlens/csv.hpp"
#include "protestlens/error.hpp"
#include "protestlens/vocab.hpp"

namespace protestlens {

struct EventRecord {
  std::int64_t event_id = 0;
  std::string article_title;
  int year = 0;
  int events_in_article = 1;
};

struct ArticleRecord {
  std::int64_t article_id = 0;
  std::string title;
  int year = 0;
  std::string text;
  std::string category;
};

struct LabeledExample {
  std::int64_t id = 0;
  std::string text;
  int label = 0;
  std::string source;  // "matched-positive" or "sampled-negative"
};

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

// ---------------------------------------------------------------------------
// Title normalization

namespace detail {

/// Targeted compatibility folding for the characters that actually occur
/// in news titles: fullwidth ASCII, typographic quotes/dashes/spaces, and
/// common latin ligatures. Full Unicode normalization would drag in ICU;
/// this covers the same ground for title matching.
inline void fold_codepoint(char32_t cp, std::string& out) {
  auto push_ascii = [&out](char ch) { out.push_back(ch); };
  // fullwidth block -> ASCII
  if (cp >= 0xFF01 && cp <= 0xFF5E) {
    push_ascii(static_cast<char>(cp - 0xFF01 + 0x21));
    return;
  }
  switch (cp) {
    case 0x00A0: case 0x2000: case 0x2001: case 0x2002: case 0x2003:
    case 0x2004: case 0x2005: case 0x2006: case 0x2007: case 0x2008:
    case 0x2009: case 0x200A: case 0x202F: case 0x205F: case 0x3000:
      push_ascii(' ');
      return;
    case 0x2010: case 0x2011: case 0x2012: case 0x2013: case 0x2014:
    case 0x2015: case 0x2212:
      push_ascii('-');
      return;
    case 0x2018: case 0x2019: case 0x201A: case 0x201B:
      push_ascii('\'');
      return;
    case 0x201C: case 0x201D: case 0x201E: case 0x201F:
      push_ascii('"');
      return;
    case 0x2026:
      out += "...";
      return;
    case 0xFB00: out += "ff"; return;
    case 0xFB01: out += "fi"; return;
    case 0xFB02: out += "fl"; return;
    case 0xFB03: out += "ffi"; return;
    case 0xFB04: out += "ffl"; return;
    default:
      break;
  }
  // anything else passes through re-encoded as UTF-8
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

inline std::string fold_utf8(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const unsigned char b0 = static_cast<unsigned char>(s[i]);
    char32_t cp = 0;
    std::size_t len = 1;
    if (b0 < 0x80) {
      cp = b0;
    } else if ((b0 >> 5) == 0x6 && i + 1 < s.size()) {
      cp = (char32_t(b0 & 0x1F) << 6) | (s[i + 1] & 0x3F);
      len = 2;
    } else if ((b0 >> 4) == 0xE && i + 2 < s.size()) {
      cp = (char32_t(b0 & 0x0F) << 12) | (char32_t(s[i + 1] & 0x3F) << 6) |
           (s[i + 2] & 0x3F);
      len = 3;
    } else if ((b0 >> 3) == 0x1E && i + 3 < s.size()) {
      cp = (char32_t(b0 & 0x07) << 18) | (char32_t(s[i + 1] & 0x3F) << 12) |
           (char32_t(s[i + 2] & 0x3F) << 6) | (s[i + 3] & 0x3F);
      len = 4;
    } else {
      // invalid byte: treat as a space so it cannot glue words together
      cp = ' ';
    }
    fold_codepoint(cp, out);
    i += len;
  }
  return out;
}

}  // namespace detail

/// Compatibility-fold, lowercase, punctuation to spaces, collapse runs of
/// whitespace, trim.
inline std::string normalize_title(const std::string& title) {
  const std::string folded = detail::fold_utf8(title);
  std::string out;
  out.reserve(folded.size());
  bool pending_space = false;
  for (unsigned char ch : folded) {
    char mapped;
    if (ch < 0x80 && (std::ispunct(ch) || std::isspace(ch))) {
      mapped = ' ';
    } else if (ch < 0x80) {
      mapped = static_cast<char>(std::tolower(ch));
    } else {
      mapped = static_cast<char>(ch);
    }
    if (mapped == ' ') {
      pending_space = !out.empty();
    } else {
      if (pending_space) out.push_back(' ');
      pending_space = false;
      out.push_back(mapped);
    }
  }
  return out;
}

inline std::size_t levenshtein(const std::string& a, const std::string& b) {
  if (a.empty()) return b.size();
  if (b.empty()) return a.size();
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// 1 - distance / max(len); two empty strings are identical (1.0).
inline double title_similarity(const std::string& a, const std::string& b) {
  const std::size_t longest = std::max(a.size(), b.size());
  if (longest == 0) return 1.0;
  return 1.0 - double(levenshtein(a, b)) / double(longest);
}

// ---------------------------------------------------------------------------
// Input parsing

inline std::vector<EventRecord> load_events_csv(const std::string& path,
                                                std::vector<std::string>* warnings = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open events file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty events file: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> header = parse_csv_line(line);
  auto column = [&](const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    throw DataError("events file " + path + " missing column '" + name + "'");
  };
  const std::size_t c_id = column("event_id");
  const std::size_t c_title = column("article_title");
  const std::size_t c_year = column("year");
  const std::size_t c_count = column("events_in_article");

  std::vector<EventRecord> events;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields = parse_csv_line(line);
    if (fields.size() != header.size()) {
      throw DataError("events line " + std::to_string(lineno) + " has " +
                      std::to_string(fields.size()) + " fields, expected " +
                      std::to_string(header.size()));
    }
    EventRecord ev;
    try {
      ev.event_id = std::stoll(fields[c_id]);
      ev.year = std::stoi(fields[c_year]);
      ev.events_in_article = std::stoi(fields[c_count]);
    } catch (const std::exception&) {
      throw DataError("non-numeric field at events line " + std::to_string(lineno) +
                      " of " + path);
    }
    ev.article_title = fields[c_title];
    if (ev.events_in_article < 1) {
      throw DataError("events_in_article < 1 at line " + std::to_string(lineno) +
                      " of " + path);
    }
    if ((ev.year < 1960 || ev.year > 1995) && warnings) {
      warnings->push_back("event " + std::to_string(ev.event_id) + " year " +
                          std::to_string(ev.year) + " outside 1960-1995");
    }
    events.push_back(std::move(ev));
  }
  return events;
}

inline std::vector<ArticleRecord> load_articles_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open articles file: " + path);
  std::vector<ArticleRecord> articles;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError("invalid JSON at line " + std::to_string(lineno) + " of " +
                      path + ": " + e.what());
    }
    ArticleRecord a;
    try {
      a.article_id = j.at("id").get<std::int64_t>();
      a.title = j.at("title").get<std::string>();
      a.year = j.at("year").get<int>();
      a.text = j.at("text").get<std::string>();
      a.category = j.at("category").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError("bad article record at line " + std::to_string(lineno) +
                      " of " + path + ": " + e.what());
    }
    articles.push_back(std::move(a));
  }
  return articles;
}

// ---------------------------------------------------------------------------
// Matching

enum class MatchKind { exact, fuzzy };

struct Match {
  std::int64_t event_id = 0;
  std::int64_t article_id = 0;
  MatchKind kind = MatchKind::exact;
  double similarity = 1.0;
  int claim_count = 1;  // how many events picked this article pre-resolution
};

struct MatchOutcome {
  std::vector<Match> matches;
  std::vector<std::string> ambiguities;  // duplicate (title, year) notes
};

/// Two passes: exact on (normalized title, year), then fuzzy within the
/// same year at similarity >= threshold (best similarity wins, ties to the
/// lower article id). When several events pick the same article, the
/// lowest event id keeps it and the match records how many claimed it.
inline MatchOutcome match_records(const std::vector<EventRecord>& events,
                                  const std::vector<ArticleRecord>& articles,
                                  double threshold = 0.90) {
  MatchOutcome out;

  std::vector<std::size_t> order(events.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return events[a].event_id < events[b].event_id;
  });

  std::vector<std::string> norm_titles(articles.size());
  for (std::size_t i = 0; i < articles.size(); ++i) {
    norm_titles[i] = normalize_title(articles[i].title);
  }

  // exact index on (normalized title, year); duplicate keys keep the
  // lowest article id and are surfaced in the manifest
  std::map<std::pair<std::string, int>, std::size_t> exact_index;
  for (std::size_t i = 0; i < articles.size(); ++i) {
    const auto key = std::make_pair(norm_titles[i], articles[i].year);
    auto it = exact_index.find(key);
    if (it == exact_index.end()) {
      exact_index.emplace(key, i);
    } else {
      std::size_t keep = it->second;
      std::size_t drop = i;
      if (articles[drop].article_id < articles[keep].article_id) std::swap(keep, drop);
      it->second = keep;
      out.ambiguities.push_back(
          "duplicate title/year: articles " +
          std::to_string(articles[keep].article_id) + " and " +
          std::to_string(articles[drop].article_id) + " share \"" + key.first +
          "\" (" + std::to_string(key.second) + "); lower id wins");
    }
  }

  std::map<int, std::vector<std::size_t>> by_year;
  for (std::size_t i = 0; i < articles.size(); ++i) {
    by_year[articles[i].year].push_back(i);
  }
  for (auto& [year, idxs] : by_year) {
    std::sort(idxs.begin(), idxs.end(), [&](std::size_t a, std::size_t b) {
      return articles[a].article_id < articles[b].article_id;
    });
  }

  struct Claim {
    std::int64_t event_id;
    MatchKind kind;
    double similarity;
  };
  std::map<std::size_t, std::vector<Claim>> claims;  // article index -> claimants

  for (std::size_t oi : order) {
    const EventRecord& ev = events[oi];
    const std::string norm = normalize_title(ev.article_title);
    auto it = exact_index.find(std::make_pair(norm, ev.year));
    if (it != exact_index.end()) {
      claims[it->second].push_back({ev.event_id, MatchKind::exact, 1.0});
      continue;
    }
    auto yit = by_year.find(ev.year);
    if (yit == by_year.end()) continue;
    double best_sim = 0.0;
    std::size_t best_idx = 0;
    bool found = false;
    for (std::size_t ai : yit->second) {
      const double sim = title_similarity(norm, norm_titles[ai]);
      if (sim >= threshold && sim > best_sim) {
        best_sim = sim;
        best_idx = ai;
        found = true;
      }
    }
    if (found) {
      claims[best_idx].push_back({ev.event_id, MatchKind::fuzzy, best_sim});
    }
  }

  for (auto& [ai, claimants] : claims) {
    std::sort(claimants.begin(), claimants.end(),
              [](const Claim& a, const Claim& b) { return a.event_id < b.event_id; });
    Match m;
    m.event_id = claimants.front().event_id;
    m.article_id = articles[ai].article_id;
    m.kind = claimants.front().kind;
    m.similarity = claimants.front().similarity;
    m.claim_count = static_cast<int>(claimants.size());
    out.matches.push_back(m);
  }
  std::sort(out.matches.begin(), out.matches.end(),
            [](const Match& a, const Match& b) { return a.event_id < b.event_id; });
  return out;
}

struct DropLogEntry {
  std::int64_t event_id;
  std::int64_t article_id;
  std::string reason;
};

/// Drops matches whose event reports more than one protest event, and
/// matches whose article was claimed by more than one event record.
inline std::vector<Match> filter_multi_event(const std::vector<Match>& matches,
                                             const std::vector<EventRecord>& events,
                                             std::vector<DropLogEntry>* drop_log = nullptr) {
  std::unordered_map<std::int64_t, const EventRecord*> by_id;
  for (const EventRecord& ev : events) by_id[ev.event_id] = &ev;
  std::vector<Match> kept;
  for (const Match& m : matches) {
    auto it = by_id.find(m.event_id);
    if (it == by_id.end()) {
      throw DataError("match references unknown event " + std::to_string(m.event_id));
    }
    if (it->second->events_in_article > 1) {
      if (drop_log) {
        drop_log->push_back({m.event_id, m.article_id,
                             "events_in_article=" +
                                 std::to_string(it->second->events_in_article)});
      }
      continue;
    }
    if (m.claim_count > 1) {
      if (drop_log) {
        drop_log->push_back({m.event_id, m.article_id,
                             "article claimed by " + std::to_string(m.claim_count) +
                                 " event records"});
      }
      continue;
    }
    kept.push_back(m);
  }
  return kept;
}

// ---------------------------------------------------------------------------
// Negative sampling

inline const std::vector<std::string>& negative_category_allowlist() {
  static const std::vector<std::string> kAllow = {
      "book reviews", "business",    "classified", "entertainment", "finance",
      "leisure",      "obituary",    "real estate", "sports"};
  return kAllow;
}

inline std::string normalize_category(const std::string& cat) {
  std::string out;
  bool pending = false;
  for (unsigned char ch : cat) {
    if (ch < 0x80 && std::isspace(ch)) {
      pending = !out.empty();
    } else {
      if (pending) out.push_back(' ');
      pending = false;
      out.push_back(static_cast<char>(std::tolower(ch)));
    }
  }
  return out;
}

/// Proportional (largest-remainder) sample across allowlisted categories,
/// deterministic under the seed. Returns min(n, eligible pool).
inline std::vector<ArticleRecord> sample_negatives(
    const std::vector<ArticleRecord>& archive, std::size_t n, std::uint32_t seed,
    std::vector<std::string>* warnings = nullptr) {
  if (n == 0) throw ValueError("negative sample size must be positive");
  const auto& allow = negative_category_allowlist();
  std::map<std::string, std::vector<std::size_t>> pools;
  for (std::size_t i = 0; i < archive.size(); ++i) {
    const std::string cat = normalize_category(archive[i].category);
    if (std::find(allow.begin(), allow.end(), cat) != allow.end()) {
      pools[cat].push_back(i);
    }
  }
  std::size_t available = 0;
  for (auto& [cat, pool] : pools) {
    std::sort(pool.begin(), pool.end(), [&](std::size_t a, std::size_t b) {
      return archive[a].article_id < archive[b].article_id;
    });
    available += pool.size();
  }
  if (available == 0) {
    if (warnings) warnings->push_back("no articles in allowlisted negative categories");
    return {};
  }
  const std::size_t take = std::min(n, available);

  // integer quotas by largest remainder, ties to the earlier category name
  struct Alloc {
    std::string cat;
    std::size_t quota;
    double remainder;
  };
  std::vector<Alloc> allocs;
  std::size_t assigned = 0;
  for (const auto& [cat, pool] : pools) {
    const double share = double(take) * double(pool.size()) / double(available);
    const std::size_t q = std::min(pool.size(), static_cast<std::size_t>(share));
    allocs.push_back({cat, q, share - double(q)});
    assigned += q;
  }
  std::sort(allocs.begin(), allocs.end(), [](const Alloc& a, const Alloc& b) {
    if (a.remainder != b.remainder) return a.remainder > b.remainder;
    return a.cat < b.cat;
  });
  std::size_t leftover = take - assigned;
  while (leftover > 0) {
    bool progressed = false;
    for (Alloc& a : allocs) {
      if (leftover == 0) break;
      if (a.quota < pools[a.cat].size()) {
        ++a.quota;
        --leftover;
        progressed = true;
      }
    }
    if (!progressed) break;
  }

  std::mt19937 rng(seed);
  std::vector<ArticleRecord> sampled;
  sampled.reserve(take);
  std::sort(allocs.begin(), allocs.end(),
            [](const Alloc& a, const Alloc& b) { return a.cat < b.cat; });
  for (const Alloc& a : allocs) {
    std::vector<std::size_t> pool = pools[a.cat];
    // Fisher-Yates over the id-sorted pool keeps the draw reproducible
    for (std::size_t i = pool.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> dist(0, i - 1);
      std::swap(pool[i - 1], pool[dist(rng)]);
    }
    for (std::size_t i = 0; i < a.quota; ++i) sampled.push_back(archive[pool[i]]);
  }
  std::sort(sampled.begin(), sampled.end(),
            [](const ArticleRecord& a, const ArticleRecord& b) {
              return a.article_id < b.article_id;
            });
  return sampled;
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;

  void validate() const {
    if (train <= 0.0 || val <= 0.0 || test <= 0.0) {
      throw ValueError("split ratios must all be positive");
    }
    const double sum = train + val + test;
    if (std::abs(sum - 1.0) > 1e-9) {
      throw ValueError("split ratios must sum to 1, got " + std::to_string(sum));
    }
  }
};

/// Stratified by label, deterministic under seed. Per-label counts follow
/// the largest-remainder rule so each split's label mix stays within one
/// example of the global mix.
inline std::vector<Split> split_dataset(const std::vector<LabeledExample>& examples,
                                        const SplitRatios& ratios, std::uint32_t seed) {
  ratios.validate();
  std::vector<Split> assignment(examples.size(), Split::train);
  std::mt19937 rng(seed);
  for (int label : {0, 1}) {
    std::vector<std::size_t> idxs;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      if (examples[i].label == label) idxs.push_back(i);
    }
    if (idxs.empty()) continue;
    std::sort(idxs.begin(), idxs.end(), [&](std::size_t a, std::size_t b) {
      return examples[a].id < examples[b].id;
    });
    for (std::size_t i = idxs.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> dist(0, i - 1);
      std::swap(idxs[i - 1], idxs[dist(rng)]);
    }
    const double shares[3] = {ratios.train, ratios.val, ratios.test};
    std::size_t counts[3];
    double rema[3];
    std::size_t assigned = 0;
    for (int s = 0; s < 3; ++s) {
      const double share = shares[s] * double(idxs.size());
      counts[s] = static_cast<std::size_t>(share);
      rema[s] = share - double(counts[s]);
      assigned += counts[s];
    }
    std::size_t leftover = idxs.size() - assigned;
    std::vector<int> order = {0, 1, 2};
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (rema[a] != rema[b]) return rema[a] > rema[b];
      return a < b;
    });
    for (std::size_t i = 0; i < leftover; ++i) counts[order[i % 3]] += 1;
    for (int s = 0; s < 3; ++s) {
      if (counts[s] == 0) {
        throw DataError("stratification failed: split '" +
                        std::string(split_name(static_cast<Split>(s))) +
                        "' would hold 0 examples of label " + std::to_string(label));
      }
    }
    std::size_t at = 0;
    for (int s = 0; s < 3; ++s) {
      for (std::size_t i = 0; i < counts[s]; ++i) {
        assignment[idxs[at++]] = static_cast<Split>(s);
      }
    }
  }
  return assignment;
}

// ---------------------------------------------------------------------------
// Pipeline

struct CorpusBuildConfig {
  std::string events_path;
  std::string articles_path;
  std::string out_dir;
  std::size_t negatives = 270;
  double fuzzy_threshold = 0.90;
  SplitRatios ratios;
  std::uint32_t seed = 7;
};

struct CorpusBuildResult {
  std::vector<LabeledExample> examples;
  std::vector<Split> assignment;
  nlohmann::json manifest;
};

inline nlohmann::json corpus_manifest(const CorpusBuildConfig& cfg,
                                      std::size_t n_events, std::size_t n_articles,
                                      const MatchOutcome& outcome,
                                      const std::vector<Match>& kept,
                                      const std::vector<DropLogEntry>& drops,
                                      std::size_t negatives_sampled,
                                      const std::vector<std::string>& warnings,
                                      const std::array<std::size_t, 3>& split_sizes) {
  nlohmann::json drops_json = nlohmann::json::array();
  for (const DropLogEntry& d : drops) {
    drops_json.push_back({{"event_id", d.event_id},
                          {"article_id", d.article_id},
                          {"reason", d.reason}});
  }
  std::size_t exact = 0, fuzzy = 0;
  for (const Match& m : outcome.matches) {
    (m.kind == MatchKind::exact ? exact : fuzzy) += 1;
  }
  return nlohmann::json{
      {"tool", "protestlens"},
      {"tool_version", "0.1.0"},
      {"inputs", {{"events", cfg.events_path}, {"articles", cfg.articles_path}}},
      {"counts",
       {{"events", n_events},
        {"articles", n_articles},
        {"matches", outcome.matches.size()},
        {"matches_exact", exact},
        {"matches_fuzzy", fuzzy},
        {"drops", drops.size()},
        {"positives", kept.size()},
        {"negatives_requested", cfg.negatives},
        {"negatives_sampled", negatives_sampled}}},
      {"splits",
       {{"train", split_sizes[0]}, {"val", split_sizes[1]}, {"test", split_sizes[2]}}},
      {"fuzzy_threshold", cfg.fuzzy_threshold},
      {"seed", cfg.seed},
      {"ratios", {{"train", cfg.ratios.train}, {"val", cfg.ratios.val}, {"test", cfg.ratios.test}}},
      {"ambiguities", outcome.ambiguities},
      {"drop_log", drops_json},
      {"warnings", warnings}};
}

/// events.csv + articles.jsonl -> labeled, split corpus + manifest.
inline CorpusBuildResult build_corpus(const CorpusBuildConfig& cfg) {
  std::vector<std::string> warnings;
  std::vector<EventRecord> events = load_events_csv(cfg.events_path, &warnings);
  std::vector<ArticleRecord> articles = load_articles_jsonl(cfg.articles_path);

  MatchOutcome outcome = match_records(events, articles, cfg.fuzzy_threshold);
  std::vector<DropLogEntry> drops;
  std::vector<Match> kept = filter_multi_event(outcome.matches, events, &drops);

  std::unordered_map<std::int64_t, const ArticleRecord*> articles_by_id;
  for (const ArticleRecord& a : articles) articles_by_id[a.article_id] = &a;

  CorpusBuildResult result;
  std::set<std::int64_t> positive_ids;
  for (const Match& m : kept) {
    const ArticleRecord* a = articles_by_id.at(m.article_id);
    if (a->text.empty()) {
      throw DataError("matched article " + std::to_string(a->article_id) +
                      " has empty text");
    }
    positive_ids.insert(a->article_id);
    result.examples.push_back({a->article_id, a->text, 1, "matched-positive"});
  }

  // positives can never be drawn as negatives
  std::vector<ArticleRecord> negative_pool;
  for (const ArticleRecord& a : articles) {
    if (!positive_ids.count(a.article_id)) negative_pool.push_back(a);
  }
  std::vector<ArticleRecord> negatives =
      sample_negatives(negative_pool, cfg.negatives, cfg.seed, &warnings);
  for (const ArticleRecord& a : negatives) {
    result.examples.push_back({a.article_id, a.text, 0, "sampled-negative"});
  }

  std::sort(result.examples.begin(), result.examples.end(),
            [](const LabeledExample& a, const LabeledExample& b) { return a.id < b.id; });
  result.assignment = split_dataset(result.examples, cfg.ratios, cfg.seed);

  std::array<std::size_t, 3> sizes = {0, 0, 0};
  for (Split s : result.assignment) sizes[static_cast<int>(s)] += 1;
  result.manifest = corpus_manifest(cfg, events.size(), articles.size(), outcome,
                                    kept, drops, negatives.size(), warnings, sizes);
  return result;
}

/// corpus.train.jsonl / corpus.val.jsonl / corpus.test.jsonl + manifest.json
inline void write_corpus(const CorpusBuildResult& result, const std::string& out_dir) {
  std::ofstream files[3];
  for (int s = 0; s < 3; ++s) {
    const std::string path =
        out_dir + "/corpus." + split_name(static_cast<Split>(s)) + ".jsonl";
    files[s].open(path, std::ios::binary);
    if (!files[s]) throw DataError("cannot write " + path);
  }
  for (std::size_t i = 0; i < result.examples.size(); ++i) {
    const LabeledExample& ex = result.examples[i];
    nlohmann::json row = {{"id", ex.id},
                          {"label", ex.label},
                          {"source", ex.source},
                          {"text", ex.text}};
    files[static_cast<int>(result.assignment[i])] << row.dump() << '\n';
  }
  const std::string manifest_path = out_dir + "/manifest.json";
  std::ofstream mf(manifest_path, std::ios::binary);
  if (!mf) throw DataError("cannot write " + manifest_path);
  mf << result.manifest.dump(2) << '\n';
}

inline std::vector<LabeledExample> load_corpus_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open corpus file: " + path);
  std::vector<LabeledExample> examples;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError("invalid JSON at line " + std::to_string(lineno) + " of " +
                      path + ": " + e.what());
    }
    LabeledExample ex;
    ex.id = j.at("id").get<std::int64_t>();
    ex.text = j.at("text").get<std::string>();
    ex.label = j.at("label").get<int>();
    if (ex.label != 0 && ex.label != 1) {
      throw DataError("label must be 0 or 1 at line " + std::to_string(lineno) +
                      " of " + path);
    }
    if (j.contains("source")) ex.source = j.at("source").get<std::string>();
    examples.push_back(std::move(ex));
  }
  return examples;
}

}  // namespace protestlens
