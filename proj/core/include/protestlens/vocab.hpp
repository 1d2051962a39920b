#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "protestlens/error.hpp"

namespace protestlens {

/// Lowercase, ASCII punctuation to spaces, whitespace-split. Non-ASCII
/// bytes pass through untouched so UTF-8 words stay intact.
inline std::vector<std::string> tokenize(const std::string& text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (unsigned char ch : text) {
    if (ch < 0x80 && (std::ispunct(ch) || std::isspace(ch))) {
      cleaned.push_back(' ');
    } else if (ch < 0x80) {
      cleaned.push_back(static_cast<char>(std::tolower(ch)));
    } else {
      cleaned.push_back(static_cast<char>(ch));
    }
  }
  std::vector<std::string> tokens;
  std::istringstream in(cleaned);
  std::string tok;
  while (in >> tok) tokens.push_back(std::move(tok));
  return tokens;
}

class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr std::size_t kCls = 2;

  Vocabulary() {
    for (const char* s : {"<pad>", "<unk>", "<cls>"}) add_token(s);
  }

  std::size_t size() const { return id_to_token_.size(); }

  std::size_t token_to_id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnk : it->second;
  }

  const std::string& id_to_token(std::size_t id) const {
    if (id >= id_to_token_.size()) {
      throw VocabError("token id " + std::to_string(id) +
                       " out of range for vocabulary of " +
                       std::to_string(id_to_token_.size()));
    }
    return id_to_token_[id];
  }

  bool contains(const std::string& token) const {
    return token_to_id_.count(token) != 0;
  }

  void add_token(const std::string& token) {
    if (token_to_id_.count(token)) {
      throw VocabError("duplicate vocabulary token: " + token);
    }
    token_to_id_.emplace(token, id_to_token_.size());
    id_to_token_.push_back(token);
  }

  /// One token per line, line number = id. Lines 0..2 must be the
  /// reserved special tokens.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write vocabulary file: " + path);
    for (const std::string& t : id_to_token_) out << t << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read vocabulary file: " + path);
    Vocabulary v;
    v.id_to_token_.clear();
    v.token_to_id_.clear();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) {
        throw VocabError("empty token at line " + std::to_string(lineno) +
                         " of " + path);
      }
      v.add_token(line);
      ++lineno;
    }
    static const char* kReserved[] = {"<pad>", "<unk>", "<cls>"};
    if (v.size() < 3 || v.id_to_token_[0] != kReserved[0] ||
        v.id_to_token_[1] != kReserved[1] || v.id_to_token_[2] != kReserved[2]) {
      throw VocabError("vocabulary file " + path +
                       " must start with <pad>, <unk>, <cls>");
    }
    return v;
  }

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, std::size_t> token_to_id_;
};

/// Top-k tokens by frequency (ties broken lexicographically) on top of
/// the three reserved ids.
inline Vocabulary build_vocabulary(const std::vector<std::string>& texts,
                                   std::size_t k) {
  if (k < 10) {
    throw ValueError("vocabulary size must be at least 10, got " +
                     std::to_string(k));
  }
  std::unordered_map<std::string, std::size_t> counts;
  for (const std::string& text : texts) {
    for (std::string& tok : tokenize(text)) counts[std::move(tok)] += 1;
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(),
                                                          counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (ranked.size() > k) ranked.resize(k);
  Vocabulary v;
  for (const auto& [token, count] : ranked) v.add_token(token);
  return v;
}

}  // namespace protestlens
