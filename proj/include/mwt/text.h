#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mwt/tensor.h"

namespace mwt {

// Fixed vocabulary layout: specials, then the 256 byte-fallback tokens,
// then corpus words.
inline constexpr Index kClsId = 0;
inline constexpr Index kSepId = 1;
inline constexpr Index kMaskId = 2;
inline constexpr Index kByteBase = 3;
inline constexpr Index kByteCount = 256;
inline constexpr Index kWordBase = kByteBase + kByteCount;

/// Word-level vocabulary with guaranteed byte-fallback coverage.
class Vocab {
 public:
  Vocab() = default;

  /// Most frequent corpus words (ties broken lexicographically), capped so
  /// the total vocab stays within max_size ids.
  static Vocab build(const std::vector<std::string>& corpus_lines, Index max_size);

  static Vocab load(const std::string& path);
  void save(const std::string& path) const;

  Index size() const { return kWordBase + static_cast<Index>(words_.size()); }
  std::optional<Index> word_id(const std::string& word) const;
  const std::string& word_text(Index id) const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, Index> index_;
};

/// Tokenizes one line: known words map to word ids, unknown words fall back
/// to byte tokens (with explicit space bytes at run boundaries, so the
/// round trip is exact for single-space-separated text). CLS is prepended
/// and SEP appended.
std::vector<Index> tokenize(const Vocab& vocab, const std::string& line);

/// Exact inverse of tokenize for text it produced. Mask tokens render as
/// the literal "[MASK]".
std::string detokenize(const Vocab& vocab, const std::vector<Index>& ids);

}  // namespace mwt
