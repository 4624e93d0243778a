#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace molalign::moldata {

inline constexpr std::int64_t kPadId = 0;
inline constexpr std::int64_t kUnkId = 1;
inline constexpr std::int64_t kDecId = 2;
inline constexpr std::int64_t kClsId = 3;
inline constexpr std::int64_t kSepId = 4;
inline constexpr std::int64_t kNumSpecials = 5;
inline constexpr std::int64_t kDefaultMaxLen = 256;

class Vocabulary {
 public:
  // Specials only.
  Vocabulary();

  std::int64_t size() const { return static_cast<std::int64_t>(tokens_.size()); }
  // kUnkId when absent.
  std::int64_t id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(std::int64_t id) const;
  static bool is_special(std::int64_t id) { return id >= 0 && id < kNumSpecials; }

  // Appends the token if new; returns its id.
  std::int64_t add(const std::string& token);

  const std::vector<std::string>& tokens() const { return tokens_; }
  // Rebuilds from an id-ordered token list whose first entries are the specials.
  static Vocabulary from_tokens(std::vector<std::string> tokens);

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, std::int64_t, std::less<>> ids_;
};

// Words are maximal runs of non-space, non-punctuation characters; each
// punctuation character is its own word. Case is preserved.
std::vector<std::string> split_words(std::string_view text);

// Atom-level SMILES pieces: two-letter halogens stay whole, everything else is
// one character.
std::vector<std::string> smiles_pieces(std::string_view smiles);

// Specials, then every word of the corpus and every extra token in sorted order.
Vocabulary build_vocab(std::span<const std::string> corpus,
                       std::span<const std::string> extra_tokens = {});

struct TextSample {
  std::string raw;
  std::vector<std::int64_t> token_ids;  // [DEC] w1 .. wn [SEP] [PAD]...
  std::vector<std::uint8_t> pad_mask;   // 1 on real tokens
  std::int64_t length = 0;              // T, count of real tokens
};

// Truncates to max_len keeping [SEP] as the last real token, and pads to pad_to
// (defaults to max_len; 0 means no padding).
TextSample tokenize(std::string_view text, const Vocabulary& vocab,
                    std::int64_t max_len = kDefaultMaxLen, std::int64_t pad_to = -1);

// Tokens for every id except [PAD], [DEC], [CLS] and [SEP], joined by single spaces.
std::string detokenize(std::span<const std::int64_t> ids, const Vocabulary& vocab);

// Whitespace-normalised form used for round-trip comparison: words joined by spaces.
std::string normalize_text(std::string_view text);

}  // namespace molalign::moldata
