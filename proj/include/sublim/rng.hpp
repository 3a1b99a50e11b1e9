#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace sublim {

/// Purpose tags for independent random streams derived from one run seed.
/// Changing the number of draws in one stage never perturbs another.
enum class Stream : std::uint64_t {
    init = 1,
    shuffle = 2,
    noise = 3,
    subset = 4,
    probe = 5,
    eval = 6,
};

/// SplitMix64 finalizer; used only to decorrelate seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::mt19937_64 make_stream(std::uint64_t seed, Stream stream, std::uint64_t sub = 0) {
    const std::uint64_t s =
        mix64(mix64(seed) ^ mix64(static_cast<std::uint64_t>(stream) * 0x100000001b3ULL + sub));
    return std::mt19937_64(s);
}

/// FNV-1a over bytes; stable across platforms, used for config hashes.
constexpr std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace sublim
