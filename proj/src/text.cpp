#include "mwt/text.h"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

namespace mwt {

namespace {

std::vector<std::string> split_words(const std::string& line) {
  std::vector<std::string> words;
  std::istringstream is(line);
  std::string w;
  while (is >> w) words.push_back(w);
  return words;
}

std::string byte_token_name(int b) {
  static const char* hex = "0123456789ABCDEF";
  std::string s = "<0x";
  s += hex[(b >> 4) & 0xF];
  s += hex[b & 0xF];
  s += '>';
  return s;
}

}  // namespace

Vocab Vocab::build(const std::vector<std::string>& corpus_lines, Index max_size) {
  tcheck(max_size > kWordBase, "vocab: max_size must exceed the reserved id range");
  std::map<std::string, std::int64_t> counts;
  for (const std::string& line : corpus_lines)
    for (const std::string& w : split_words(line)) ++counts[w];

  std::vector<std::pair<std::string, std::int64_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocab v;
  const size_t cap = static_cast<size_t>(max_size - kWordBase);
  for (const auto& [word, count] : ranked) {
    if (v.words_.size() >= cap) break;
    v.index_.emplace(word, kWordBase + static_cast<Index>(v.words_.size()));
    v.words_.push_back(word);
  }
  return v;
}

std::optional<Index> Vocab::word_id(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocab::word_text(Index id) const {
  tcheck(id >= kWordBase && id < size(), "vocab: id " + std::to_string(id) + " is not a word");
  return words_[static_cast<size_t>(id - kWordBase)];
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path);
  tcheck(out.good(), "vocab: cannot write " + path);
  out << "[CLS]\t" << kClsId << "\n[SEP]\t" << kSepId << "\n[MASK]\t" << kMaskId << "\n";
  for (int b = 0; b < static_cast<int>(kByteCount); ++b)
    out << byte_token_name(b) << '\t' << (kByteBase + b) << '\n';
  for (size_t i = 0; i < words_.size(); ++i)
    out << words_[i] << '\t' << (kWordBase + static_cast<Index>(i)) << '\n';
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path);
  tcheck(in.good(), "vocab: cannot read " + path);
  Vocab v;
  std::string line;
  Index line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    size_t tab = line.rfind('\t');
    tcheck(tab != std::string::npos, "vocab: missing tab at line " + std::to_string(line_no));
    std::string token = line.substr(0, tab);
    Index id = std::stoll(line.substr(tab + 1));
    if (id < kWordBase) continue;  // specials and bytes are implicit
    tcheck(id == kWordBase + static_cast<Index>(v.words_.size()),
           "vocab: non-contiguous word id at line " + std::to_string(line_no));
    v.index_.emplace(token, id);
    v.words_.push_back(std::move(token));
  }
  return v;
}

std::vector<Index> tokenize(const Vocab& vocab, const std::string& line) {
  std::vector<Index> ids = {kClsId};
  const std::vector<std::string> words = split_words(line);
  auto emit_bytes = [&](const std::string& s) {
    for (unsigned char c : s) ids.push_back(kByteBase + static_cast<Index>(c));
  };
  for (size_t i = 0; i < words.size(); ++i) {
    if (auto id = vocab.word_id(words[i])) {
      ids.push_back(*id);
      continue;
    }
    // Byte runs carry their boundary spaces explicitly; implicit spaces are
    // only ever inserted between two adjacent word ids.
    std::string chunk;
    if (i > 0) chunk += ' ';
    chunk += words[i];
    if (i + 1 < words.size() && vocab.word_id(words[i + 1]).has_value()) chunk += ' ';
    emit_bytes(chunk);
  }
  ids.push_back(kSepId);
  return ids;
}

std::string detokenize(const Vocab& vocab, const std::vector<Index>& ids) {
  std::string out;
  bool prev_word = false;
  for (Index id : ids) {
    if (id == kClsId || id == kSepId) continue;
    if (id == kMaskId) {
      if (prev_word) out += ' ';
      out += "[MASK]";
      prev_word = true;
      continue;
    }
    if (id >= kByteBase && id < kWordBase) {
      out += static_cast<char>(id - kByteBase);
      prev_word = false;
      continue;
    }
    if (prev_word) out += ' ';
    out += vocab.word_text(id);
    prev_word = true;
  }
  return out;
}

}  // namespace mwt
