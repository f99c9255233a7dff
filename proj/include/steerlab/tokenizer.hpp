#pragma once

// Byte-level BPE compatible with the GPT-2 tokenizer files (vocab.json +
// merges.txt). Text is split with the GPT-2 pre-tokenization pattern
//
//   's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
//
// hand-coded over code points. Letter/number classification is exact for
// ASCII and covers the common non-ASCII scripts; bytes that are not valid
// UTF-8 are treated as punctuation. Encoding is lossless regardless, since
// every byte has a base token.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "steerlab/errors.hpp"

namespace steerlab {

using TokenId = int;

// Ids of ")", "))", ")))", "))))": ids[n - 1] closes n parentheses.
struct AnswerTokenSet {
  std::array<TokenId, 4> ids{};

  TokenId closing(int n) const { return ids.at(static_cast<std::size_t>(n - 1)); }
  friend bool operator==(const AnswerTokenSet&, const AnswerTokenSet&) = default;
};

namespace unicode {

struct CodePoint {
  char32_t value;
  std::size_t offset;  // byte offset into the source text
  std::size_t length;  // encoded length in bytes
  bool valid;
};

inline std::vector<CodePoint> decode_utf8(std::string_view s) {
  std::vector<CodePoint> out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    std::size_t len = 0;
    char32_t cp = 0;
    if (b0 < 0x80) {
      len = 1;
      cp = b0;
    } else if ((b0 & 0xE0) == 0xC0) {
      len = 2;
      cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
      len = 3;
      cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
      len = 4;
      cp = b0 & 0x07;
    }
    bool ok = len > 0 && i + len <= s.size();
    for (std::size_t k = 1; ok && k < len; ++k) {
      const auto b = static_cast<unsigned char>(s[i + k]);
      if ((b & 0xC0) != 0x80) ok = false;
      cp = (cp << 6) | (b & 0x3F);
    }
    if (!ok) {
      out.push_back({0xFFFD, i, 1, false});
      ++i;
      continue;
    }
    out.push_back({cp, i, len, true});
    i += len;
  }
  return out;
}

inline void append_utf8(std::string& out, char32_t cp) {
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

struct Range {
  char32_t lo, hi;
};

inline bool in_ranges(char32_t c, std::span<const Range> ranges) {
  for (const auto& r : ranges)
    if (c >= r.lo && c <= r.hi) return true;
  return false;
}

// Unicode White_Space
inline bool is_space(const CodePoint& cp) {
  static constexpr Range kSpace[] = {{0x09, 0x0D}, {0x20, 0x20},     {0x85, 0x85},     {0xA0, 0xA0},
                                     {0x1680, 0x1680}, {0x2000, 0x200A}, {0x2028, 0x2029}, {0x202F, 0x202F},
                                     {0x205F, 0x205F}, {0x3000, 0x3000}};
  return cp.valid && in_ranges(cp.value, kSpace);
}

inline bool is_letter(const CodePoint& cp) {
  static constexpr Range kLetters[] = {
      {'A', 'Z'},         {'a', 'z'},         {0x00AA, 0x00AA},   {0x00B5, 0x00B5},   {0x00BA, 0x00BA},
      {0x00C0, 0x00D6},   {0x00D8, 0x00F6},   {0x00F8, 0x02C1},   {0x02C6, 0x02D1},   {0x02E0, 0x02E4},
      {0x0370, 0x0373},   {0x0376, 0x0377},   {0x037B, 0x037D},   {0x0386, 0x0386},   {0x0388, 0x03F5},
      {0x03F7, 0x0481},   {0x048A, 0x052F},   {0x0531, 0x0556},   {0x0561, 0x0587},   {0x05D0, 0x05EA},
      {0x0620, 0x064A},   {0x0671, 0x06D3},   {0x0904, 0x0939},   {0x0E01, 0x0E30},   {0x10A0, 0x10FF},
      {0x1100, 0x11FF},   {0x1E00, 0x1FBC},   {0x3041, 0x3096},   {0x30A1, 0x30FA},   {0x3400, 0x4DBF},
      {0x4E00, 0x9FFF},   {0xAC00, 0xD7A3},   {0xF900, 0xFAFF},   {0xFF21, 0xFF3A},   {0xFF41, 0xFF5A},
      {0x20000, 0x2FFFF}};
  return cp.valid && in_ranges(cp.value, kLetters);
}

inline bool is_number(const CodePoint& cp) {
  static constexpr Range kNumbers[] = {{'0', '9'},         {0x00B2, 0x00B3},   {0x00B9, 0x00B9},
                                       {0x00BC, 0x00BE},   {0x0660, 0x0669},   {0x06F0, 0x06F9},
                                       {0x0966, 0x096F},   {0x2070, 0x2070},   {0x2074, 0x2079},
                                       {0x2080, 0x2089},   {0x2150, 0x2189},   {0x2460, 0x249B},
                                       {0x24EA, 0x24FF},   {0x2776, 0x2793},   {0x3007, 0x3007},
                                       {0x3021, 0x3029},   {0xFF10, 0xFF19}};
  return cp.valid && in_ranges(cp.value, kNumbers);
}

}  // namespace unicode

// Splits text into pre-tokens (byte ranges of the input).
inline std::vector<std::string_view> pretokenize(std::string_view text) {
  using namespace unicode;
  const auto cps = decode_utf8(text);
  std::vector<std::string_view> pieces;
  const std::size_t n = cps.size();
  auto end_of = [&](std::size_t idx) { return idx < n ? cps[idx].offset : text.size(); };
  auto is_other = [](const CodePoint& c) { return !is_space(c) && !is_letter(c) && !is_number(c); };
  auto ascii = [&](std::size_t idx, char ch) { return idx < n && cps[idx].valid && cps[idx].value == char32_t(ch); };

  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    // contractions
    if (ascii(i, '\'')) {
      if (ascii(i + 1, 's') || ascii(i + 1, 't') || ascii(i + 1, 'm') || ascii(i + 1, 'd')) {
        j = i + 2;
      } else if ((ascii(i + 1, 'r') && ascii(i + 2, 'e')) || (ascii(i + 1, 'v') && ascii(i + 2, 'e')) ||
                 (ascii(i + 1, 'l') && ascii(i + 2, 'l'))) {
        j = i + 3;
      }
    }
    if (j == i) {
      const std::size_t start = ascii(i, ' ') && i + 1 < n && !is_space(cps[i + 1]) ? i + 1 : i;
      const auto& c = cps[start];
      if (is_letter(c)) {
        j = start;
        while (j < n && is_letter(cps[j])) ++j;
      } else if (is_number(c)) {
        j = start;
        while (j < n && is_number(cps[j])) ++j;
      } else if (is_other(c)) {
        j = start;
        while (j < n && is_other(cps[j])) ++j;
      } else {
        // whitespace run; leave the last space to prefix a following word
        std::size_t k = i;
        while (k < n && is_space(cps[k])) ++k;
        j = (k < n && k - i > 1) ? k - 1 : k;
      }
    }
    pieces.push_back(text.substr(cps[i].offset, end_of(j) - cps[i].offset));
    i = j;
  }
  return pieces;
}

class Tokenizer {
 public:
  static Tokenizer load(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt) {
    std::ifstream vin(vocab_json);
    if (!vin) throw BundleError("missing tokenizer vocabulary " + vocab_json.string());
    std::ifstream min(merges_txt);
    if (!min) throw BundleError("missing tokenizer merges " + merges_txt.string());
    nlohmann::json vocab;
    try {
      vocab = nlohmann::json::parse(vin);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("vocab.json: ") + e.what());
    }
    std::vector<std::string> merges;
    std::string line;
    while (std::getline(min, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line.starts_with("#version")) continue;
      merges.push_back(line);
    }
    std::unordered_map<std::string, TokenId> map;
    for (auto it = vocab.begin(); it != vocab.end(); ++it) map.emplace(it.key(), it.value().get<TokenId>());
    return Tokenizer(std::move(map), merges);
  }

  static Tokenizer load_bundle(const std::filesystem::path& bundle) {
    return load(bundle / "vocab.json", bundle / "merges.txt");
  }

  // Each merge is "left right" as in merges.txt; rank = position.
  Tokenizer(std::unordered_map<std::string, TokenId> vocab, std::span<const std::string> merges)
      : encoder_(std::move(vocab)) {
    TokenId max_id = -1;
    for (const auto& [tok, id] : encoder_) {
      if (id < 0) throw ValidationError("vocab.json: negative token id for " + tok);
      max_id = std::max(max_id, id);
    }
    decoder_.assign(static_cast<std::size_t>(max_id + 1), std::string{});
    for (const auto& [tok, id] : encoder_) decoder_[static_cast<std::size_t>(id)] = tok;
    for (std::size_t r = 0; r < merges.size(); ++r) merge_ranks_.emplace(merges[r], static_cast<int>(r));

    // GPT-2's printable remapping of raw bytes
    std::vector<int> bs;
    for (int b = '!'; b <= '~'; ++b) bs.push_back(b);
    for (int b = 0xA1; b <= 0xAC; ++b) bs.push_back(b);
    for (int b = 0xAE; b <= 0xFF; ++b) bs.push_back(b);
    std::array<bool, 256> direct{};
    for (int b : bs) direct[static_cast<std::size_t>(b)] = true;
    int extra = 0;
    for (int b = 0; b < 256; ++b) {
      const char32_t cp = direct[static_cast<std::size_t>(b)] ? char32_t(b) : char32_t(256 + extra++);
      byte_encoder_[static_cast<std::size_t>(b)].clear();
      unicode::append_utf8(byte_encoder_[static_cast<std::size_t>(b)], cp);
      byte_decoder_.emplace(cp, static_cast<unsigned char>(b));
    }
  }

  std::size_t vocab_size() const { return decoder_.size(); }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (auto piece : pretokenize(text)) {
      for (const auto& sym : bpe(piece)) {
        auto it = encoder_.find(sym);
        if (it == encoder_.end()) throw ConfigError("vocabulary has no entry for BPE symbol '" + sym + "'");
        ids.push_back(it->second);
      }
    }
    return ids;
  }

  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= decoder_.size() || decoder_[static_cast<std::size_t>(id)].empty())
        throw TokenError("token id " + std::to_string(id) + " out of range");
      for (const auto& cp : unicode::decode_utf8(decoder_[static_cast<std::size_t>(id)])) {
        auto it = byte_decoder_.find(cp.value);
        if (!cp.valid || it == byte_decoder_.end())
          throw TokenError("token id " + std::to_string(id) + " contains a non byte-level symbol");
        out.push_back(static_cast<char>(it->second));
      }
    }
    return out;
  }

  std::string decode(TokenId id) const { return decode(std::span<const TokenId>(&id, 1)); }

  // The id of `text` if it encodes to exactly one token.
  std::optional<TokenId> single_token(std::string_view text) const {
    auto ids = encode(text);
    if (ids.size() != 1) return std::nullopt;
    return ids.front();
  }

  AnswerTokenSet answer_tokens() const {
    AnswerTokenSet set;
    std::string parens;
    for (int n = 1; n <= 4; ++n) {
      parens.push_back(')');
      auto id = single_token(parens);
      if (!id) throw ConfigError("vocabulary does not encode \"" + parens + "\" as a single token");
      set.ids[static_cast<std::size_t>(n - 1)] = *id;
    }
    return set;
  }

 private:
  std::vector<std::string> bpe(std::string_view piece) const {
    std::vector<std::string> word;
    for (unsigned char b : piece) word.push_back(byte_encoder_[b]);
    if (word.size() < 2) return word;
    std::string key;
    while (true) {
      int best_rank = -1;
      std::size_t best_at = 0;
      for (std::size_t i = 0; i + 1 < word.size(); ++i) {
        key.assign(word[i]).append(" ").append(word[i + 1]);
        auto it = merge_ranks_.find(key);
        if (it != merge_ranks_.end() && (best_rank < 0 || it->second < best_rank)) {
          best_rank = it->second;
          best_at = i;
        }
      }
      if (best_rank < 0) break;
      const std::string left = word[best_at];
      const std::string right = word[best_at + 1];
      std::vector<std::string> merged;
      merged.reserve(word.size());
      for (std::size_t i = 0; i < word.size();) {
        if (i + 1 < word.size() && word[i] == left && word[i + 1] == right) {
          merged.push_back(left + right);
          i += 2;
        } else {
          merged.push_back(word[i]);
          ++i;
        }
      }
      word = std::move(merged);
      if (word.size() == 1) break;
    }
    return word;
  }

  std::unordered_map<std::string, TokenId> encoder_;
  std::vector<std::string> decoder_;
  std::unordered_map<std::string, int> merge_ranks_;
  std::array<std::string, 256> byte_encoder_;
  std::unordered_map<char32_t, unsigned char> byte_decoder_;
};

}  // namespace steerlab
