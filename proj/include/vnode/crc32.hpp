#pragma once

#include <cstddef>
#include <cstdint>

namespace vnode {

// CRC-32 (IEEE), used as the whole-file checkpoint checksum.
std::uint32_t crc32(const void* data, std::size_t len, std::uint32_t seed = 0);

} // namespace vnode
