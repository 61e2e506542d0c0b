#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <random>
#include <string>
#include <vector>

namespace metalora {

// splitmix64; used to derive independent per-stage RNG streams from one
// pipeline seed so stages stay decoupled under refactoring.
inline uint64_t mix_seed(uint64_t seed, uint64_t tag) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::mt19937 make_rng(uint64_t seed, uint64_t tag) {
    return std::mt19937(static_cast<uint32_t>(mix_seed(seed, tag) & 0xffffffffULL));
}

// Stage tags for derived RNG streams.
namespace rng_tag {
constexpr uint64_t dataset = 1;
constexpr uint64_t backbone = 2;
constexpr uint64_t teacher = 3;
constexpr uint64_t extractor = 4;
constexpr uint64_t probe = 5;
constexpr uint64_t inversion = 6;
constexpr uint64_t meta = 7;
constexpr uint64_t episodes = 8;
constexpr uint64_t random_adapter = 9;
} // namespace rng_tag

inline uint64_t fnv1a64(const void* bytes, size_t len, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

template <typename T>
uint64_t hash_values(const std::vector<T>& v, uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a64(v.data(), v.size() * sizeof(T), h);
}

// CRC-32 (IEEE), reflected, as used by the artifact trailer.
inline uint32_t crc32(const void* bytes, size_t len, uint32_t crc = 0) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320U ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    const auto* p = static_cast<const unsigned char*>(bytes);
    crc ^= 0xffffffffU;
    for (size_t i = 0; i < len; ++i) crc = table[(crc ^ p[i]) & 0xffU] ^ (crc >> 8);
    return crc ^ 0xffffffffU;
}

// Deterministic float formatting for text manifests.
std::string format_real(double v);

} // namespace metalora
