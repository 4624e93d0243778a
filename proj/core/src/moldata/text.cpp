#include "molalign/moldata/text.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <stdexcept>

namespace molalign::moldata {

namespace {
const std::vector<std::string> kSpecialTokens = {"[PAD]", "[UNK]", "[DEC]", "[CLS]", "[SEP]"};
}

Vocabulary::Vocabulary() {
  for (const auto& t : kSpecialTokens) add(t);
}

std::int64_t Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnkId : it->second;
}

bool Vocabulary::contains(std::string_view token) const { return ids_.find(token) != ids_.end(); }

const std::string& Vocabulary::token(std::int64_t id) const {
  if (id < 0 || id >= size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::int64_t Vocabulary::add(const std::string& token) {
  auto [it, inserted] = ids_.try_emplace(token, size());
  if (inserted) tokens_.push_back(token);
  return it->second;
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < kSpecialTokens.size() ||
      !std::equal(kSpecialTokens.begin(), kSpecialTokens.end(), tokens.begin())) {
    throw std::invalid_argument("vocabulary must start with the special tokens");
  }
  Vocabulary v;
  for (std::size_t i = kSpecialTokens.size(); i < tokens.size(); ++i) {
    if (v.contains(tokens[i])) throw std::invalid_argument("duplicate vocabulary token '" + tokens[i] + "'");
    v.add(tokens[i]);
  }
  return v;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) words.push_back(std::move(current));
    current.clear();
  };
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isspace(u)) {
      flush();
    } else if (std::ispunct(u)) {
      flush();
      words.emplace_back(1, c);
    } else {
      current += c;
    }
  }
  flush();
  return words;
}

std::vector<std::string> smiles_pieces(std::string_view smiles) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < smiles.size(); ++i) {
    if (i + 1 < smiles.size() && ((smiles[i] == 'C' && smiles[i + 1] == 'l') ||
                                  (smiles[i] == 'B' && smiles[i + 1] == 'r'))) {
      out.emplace_back(smiles.substr(i, 2));
      ++i;
    } else {
      out.emplace_back(1, smiles[i]);
    }
  }
  return out;
}

Vocabulary build_vocab(std::span<const std::string> corpus, std::span<const std::string> extra) {
  if (corpus.empty()) throw std::invalid_argument("build_vocab: empty corpus");
  std::set<std::string> words;
  for (const auto& text : corpus)
    for (auto& w : split_words(text)) words.insert(std::move(w));
  for (const auto& t : extra) words.insert(t);
  Vocabulary v;
  for (const auto& w : words)
    if (!v.contains(w)) v.add(w);
  return v;
}

TextSample tokenize(std::string_view text, const Vocabulary& vocab, std::int64_t max_len,
                    std::int64_t pad_to) {
  if (max_len < 2) throw std::invalid_argument("tokenize: max_len must be at least 2");
  const auto words = split_words(text);
  if (words.empty()) throw std::invalid_argument("tokenize: empty text");
  TextSample s;
  s.raw = std::string(text);
  s.token_ids.push_back(kDecId);
  const auto room = static_cast<std::size_t>(max_len - 2);
  for (std::size_t i = 0; i < words.size() && i < room; ++i) s.token_ids.push_back(vocab.id(words[i]));
  s.token_ids.push_back(kSepId);
  s.length = static_cast<std::int64_t>(s.token_ids.size());
  s.pad_mask.assign(s.token_ids.size(), 1);
  const std::int64_t target = pad_to < 0 ? max_len : pad_to;
  while (static_cast<std::int64_t>(s.token_ids.size()) < target) {
    s.token_ids.push_back(kPadId);
    s.pad_mask.push_back(0);
  }
  return s;
}

std::string detokenize(std::span<const std::int64_t> ids, const Vocabulary& vocab) {
  std::string out;
  for (auto id : ids) {
    if (Vocabulary::is_special(id) && id != kUnkId) continue;
    if (!out.empty()) out += ' ';
    out += vocab.token(id);
  }
  return out;
}

std::string normalize_text(std::string_view text) {
  std::string out;
  for (const auto& w : split_words(text)) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

}  // namespace molalign::moldata
