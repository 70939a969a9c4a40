#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "retro/common.hpp"

namespace retro {

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::vector<Token> encode(std::string_view text) const = 0;
  virtual std::string decode(std::span<const Token> tokens) const = 0;
  virtual Token vocab_size() const = 0;
  virtual Token eot_id() const = 0;
  Token pad_id() const { return eot_id(); }
};

/// UTF-8 bytes map 1:1 to ids 0..255; id 256 is end-of-text and padding.
class ByteTokenizer final : public Tokenizer {
 public:
  std::vector<Token> encode(std::string_view text) const override;
  /// Drops EOT/pad ids; invalid UTF-8 becomes U+FFFD.
  std::string decode(std::span<const Token> tokens) const override;
  Token vocab_size() const override { return kVocabSize; }
  Token eot_id() const override { return kEotId; }
};

std::vector<Token> encode(std::string_view text);
std::string decode(std::span<const Token> tokens);

}  // namespace retro
