#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace countsteer {

// ---------------------------------------------------------------------------
// Seeding
// ---------------------------------------------------------------------------

// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

// Derives an independent stream seed from a base seed and up to two
// coordinates (e.g. prompt id and attempt number).
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0);

using Rng = std::mt19937_64;

// Uniform double in [0, 1) using the top 53 bits.
double uniform01(Rng& rng);
// Standard normal via Box-Muller; consumes exactly two draws.
double standard_normal(Rng& rng);

// ---------------------------------------------------------------------------
// Hashing (FNV-1a 64) for provenance fingerprints
// ---------------------------------------------------------------------------

class Fnv1a {
public:
    void update(const void* data, std::size_t size);
    void update(std::string_view text) { update(text.data(), text.size()); }
    std::uint64_t digest() const { return state_; }

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::uint64_t hash_file(const std::filesystem::path& path);
std::string hex64(std::uint64_t value);

// ---------------------------------------------------------------------------
// Little-endian binary helpers
// ---------------------------------------------------------------------------

namespace binio {

void write_u8(std::ostream& out, std::uint8_t v);
void write_u16(std::ostream& out, std::uint16_t v);
void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_f32(std::ostream& out, float v);
void write_f64(std::ostream& out, double v);
void write_f32s(std::ostream& out, std::span<const float> v);
void write_magic(std::ostream& out, std::string_view magic);

// Readers throw FormatError on truncation. `what` names the field.
std::uint8_t read_u8(std::istream& in, const char* what);
std::uint16_t read_u16(std::istream& in, const char* what);
std::uint32_t read_u32(std::istream& in, const char* what);
std::uint64_t read_u64(std::istream& in, const char* what);
float read_f32(std::istream& in, const char* what);
double read_f64(std::istream& in, const char* what);
void read_f32s(std::istream& in, std::span<float> out, const char* what);
void expect_magic(std::istream& in, std::string_view magic);
void expect_eof(std::istream& in);

}  // namespace binio

// Opens for binary write/read; IoError on failure.
std::ofstream open_output(const std::filesystem::path& path, bool binary = true);
std::ifstream open_input(const std::filesystem::path& path, bool binary = true);

// Writes `<path>.meta`: a text provenance block for binary artifacts whose
// byte layout leaves no room for it.
void write_meta_sidecar(const std::filesystem::path& artifact, const std::string& provenance);
std::string read_meta_sidecar(const std::filesystem::path& artifact);

// Provenance as an XML comment block ("--" is defused); empty input gives "".
std::string svg_comment(const std::string& provenance);

// Runs fn(i) for i in [0, n) on up to `threads` workers. Work items must be
// independent; results are identical for every thread count.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn);

}  // namespace countsteer

#include "countsteer/detail/parallel.hpp"
