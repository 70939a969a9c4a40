#include <doctest.h>

#include <random>

#include "retro/tokenizer.hpp"

using namespace retro;

TEST_CASE("encode bytes") {
  CHECK(encode("ab") == std::vector<Token>{97, 98});
  CHECK(encode("").empty());
  const std::string s = "h\xC3\xA9llo";
  CHECK(encode(s) == std::vector<Token>{104, 0xC3, 0xA9, 108, 108, 111});
  CHECK(decode(encode(s)) == s);
}

TEST_CASE("decode drops pads and rejects out-of-vocab ids") {
  CHECK(decode(std::vector<Token>{104, 105}) == "hi");
  CHECK(decode(std::vector<Token>{256, 256, 97}) == "a");
  CHECK_THROWS_AS(decode(std::vector<Token>{97, 257}), VocabError);
}

TEST_CASE("invalid utf-8 decodes lossily") {
  const auto out = decode(std::vector<Token>{97, 0xFF, 98});
  CHECK(out == "a\xEF\xBF\xBD" "b");
}

TEST_CASE("vocabulary constants") {
  ByteTokenizer t;
  CHECK(t.vocab_size() == 257);
  CHECK(t.eot_id() == 256);
  CHECK(t.pad_id() == t.eot_id());
}

TEST_CASE("round trip over random valid utf-8") {
  std::mt19937_64 rng(17);
  const char32_t ranges[][2] = {{0x20, 0x7E}, {0xA0, 0x7FF}, {0x800, 0xD7FF}, {0xE000, 0xFFFD}, {0x10000, 0x10FFFF}};
  for (int trial = 0; trial < 200; ++trial) {
    std::string s;
    const int len = static_cast<int>(rng() % 40);
    for (int i = 0; i < len; ++i) {
      const auto& r = ranges[rng() % 5];
      const char32_t cp = r[0] + static_cast<char32_t>(rng() % (r[1] - r[0] + 1));
      if (cp < 0x80) {
        s += static_cast<char>(cp);
      } else if (cp < 0x800) {
        s += static_cast<char>(0xC0 | (cp >> 6));
        s += static_cast<char>(0x80 | (cp & 0x3F));
      } else if (cp < 0x10000) {
        s += static_cast<char>(0xE0 | (cp >> 12));
        s += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        s += static_cast<char>(0x80 | (cp & 0x3F));
      } else {
        s += static_cast<char>(0xF0 | (cp >> 18));
        s += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
        s += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        s += static_cast<char>(0x80 | (cp & 0x3F));
      }
    }
    const auto ids = encode(s);
    CHECK(ids.size() == s.size());
    CHECK(decode(ids) == s);
  }
}
