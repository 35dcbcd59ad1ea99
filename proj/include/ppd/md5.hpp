#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

namespace ppd {

using Digest128 = std::array<std::uint8_t, 16>;

// RFC 1321 MD5. Used for conversation identity digests and artifact
// provenance hashes; not a security boundary.
Digest128 md5(std::string_view data);
std::string md5_hex(std::string_view data);
std::string digest_hex(const Digest128& d);

}  // namespace ppd
