#include "ppd/md5.hpp"

#include <cstring>

namespace ppd {
namespace {

constexpr std::uint32_t kInit[4] = {0x67452301u, 0xefcdab89u, 0x98badcfeu,
                                    0x10325476u};

constexpr std::uint32_t K[64] = {
    0xd76aa478, 0xe8c7b756, 0x242070db, 0xc1bdceee, 0xf57c0faf, 0x4787c62a,
    0xa8304613, 0xfd469501, 0x698098d8, 0x8b44f7af, 0xffff5bb1, 0x895cd7be,
    0x6b901122, 0xfd987193, 0xa679438e, 0x49b40821, 0xf61e2562, 0xc040b340,
    0x265e5a51, 0xe9b6c7aa, 0xd62f105d, 0x02441453, 0xd8a1e681, 0xe7d3fbc8,
    0x21e1cde6, 0xc33707d6, 0xf4d50d87, 0x455a14ed, 0xa9e3e905, 0xfcefa3f8,
    0x676f02d9, 0x8d2a4c8a, 0xfffa3942, 0x8771f681, 0x6d9d6122, 0xfde5380c,
    0xa4beea44, 0x4bdecfa9, 0xf6bb4b60, 0xbebfbc70, 0x289b7ec6, 0xeaa127fa,
    0xd4ef3085, 0x04881d05, 0xd9d4d039, 0xe6db99e5, 0x1fa27cf8, 0xc4ac5665,
    0xf4292244, 0x432aff97, 0xab9423a7, 0xfc93a039, 0x655b59c3, 0x8f0ccc92,
    0xffeff47d, 0x85845dd1, 0x6fa87e4f, 0xfe2ce6e0, 0xa3014314, 0x4e0811a1,
    0xf7537e82, 0xbd3af235, 0x2ad7d2bb, 0xeb86d391};

constexpr int S[64] = {7, 12, 17, 22, 7, 12, 17, 22, 7, 12, 17, 22, 7,
                       12, 17, 22, 5, 9,  14, 20, 5, 9,  14, 20, 5, 9,
                       14, 20, 5,  9, 14, 20, 4, 11, 16, 23, 4, 11, 16,
                       23, 4,  11, 16, 23, 4, 11, 16, 23, 6, 10, 15, 21,
                       6,  10, 15, 21, 6,  10, 15, 21, 6, 10, 15, 21};

inline std::uint32_t rotl(std::uint32_t v, int s) {
  return (v << s) | (v >> (32 - s));
}

void process_block(std::uint32_t st[4], const std::uint8_t* p) {
  std::uint32_t m[16];
  for (int i = 0; i < 16; ++i) {
    m[i] = std::uint32_t(p[4 * i]) | (std::uint32_t(p[4 * i + 1]) << 8) |
           (std::uint32_t(p[4 * i + 2]) << 16) |
           (std::uint32_t(p[4 * i + 3]) << 24);
  }
  std::uint32_t a = st[0], b = st[1], c = st[2], d = st[3];
  for (int i = 0; i < 64; ++i) {
    std::uint32_t f;
    int g;
    if (i < 16) {
      f = (b & c) | (~b & d);
      g = i;
    } else if (i < 32) {
      f = (d & b) | (~d & c);
      g = (5 * i + 1) & 15;
    } else if (i < 48) {
      f = b ^ c ^ d;
      g = (3 * i + 5) & 15;
    } else {
      f = c ^ (b | ~d);
      g = (7 * i) & 15;
    }
    f = f + a + K[i] + m[g];
    a = d;
    d = c;
    c = b;
    b = b + rotl(f, S[i]);
  }
  st[0] += a;
  st[1] += b;
  st[2] += c;
  st[3] += d;
}

}  // namespace

Digest128 md5(std::string_view data) {
  std::uint32_t st[4];
  std::memcpy(st, kInit, sizeof(st));

  const auto* bytes = reinterpret_cast<const std::uint8_t*>(data.data());
  std::size_t n = data.size();
  std::size_t full = n / 64;
  for (std::size_t i = 0; i < full; ++i) process_block(st, bytes + 64 * i);

  std::uint8_t tail[128] = {0};
  std::size_t rem = n - full * 64;
  std::memcpy(tail, bytes + full * 64, rem);
  tail[rem] = 0x80;
  std::size_t tail_len = (rem < 56) ? 64 : 128;
  std::uint64_t bits = std::uint64_t(n) * 8;
  for (int i = 0; i < 8; ++i)
    tail[tail_len - 8 + i] = std::uint8_t(bits >> (8 * i));
  process_block(st, tail);
  if (tail_len == 128) process_block(st, tail + 64);

  Digest128 out;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      out[4 * i + j] = std::uint8_t(st[i] >> (8 * j));
  return out;
}

std::string digest_hex(const Digest128& d) {
  static const char* hex = "0123456789abcdef";
  std::string s(32, '0');
  for (int i = 0; i < 16; ++i) {
    s[2 * i] = hex[d[i] >> 4];
    s[2 * i + 1] = hex[d[i] & 0xf];
  }
  return s;
}

std::string md5_hex(std::string_view data) { return digest_hex(md5(data)); }

}  // namespace ppd
