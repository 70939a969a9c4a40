#include "retro/tokenizer.hpp"

#include <unicode/unistr.h>

namespace retro {

std::vector<Token> ByteTokenizer::encode(std::string_view text) const {
  std::vector<Token> out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(c);
  return out;
}

std::string ByteTokenizer::decode(std::span<const Token> tokens) const {
  std::string bytes;
  bytes.reserve(tokens.size());
  for (Token t : tokens) {
    if (t > kEotId) throw VocabError("decode: token id " + std::to_string(t) + " outside vocabulary");
    if (t == kEotId) continue;
    bytes.push_back(static_cast<char>(t));
  }
  // Round trip through UTF-16 replaces ill-formed sequences with U+FFFD.
  std::string out;
  icu::UnicodeString::fromUTF8(bytes).toUTF8String(out);
  return out;
}

std::vector<Token> encode(std::string_view text) { return ByteTokenizer{}.encode(text); }
std::string decode(std::span<const Token> tokens) { return ByteTokenizer{}.decode(tokens); }

}  // namespace retro
