#include "countsteer/common.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "countsteer/error.hpp"

namespace countsteer {

static_assert(std::endian::native == std::endian::little,
              "artifact formats are written with native little-endian stores");

int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::usage: return 1;
        case ErrorKind::io:
        case ErrorKind::format: return 2;
        case ErrorKind::numeric: return 3;
        case ErrorKind::feasibility: return 4;
    }
    return 1;
}

std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
    return mix64(mix64(mix64(base) ^ a) ^ (b * 0xd1b54a32d192ed03ULL));
}

double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double standard_normal(Rng& rng) {
    // 1 - u keeps the log argument in (0, 1].
    const double u1 = 1.0 - uniform01(rng);
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

void Fnv1a::update(const void* data, std::size_t size) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
        state_ ^= bytes[i];
        state_ *= 0x100000001b3ULL;
    }
}

std::uint64_t hash_file(const std::filesystem::path& path) {
    auto in = open_input(path);
    Fnv1a h;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        h.update(buf, static_cast<std::size_t>(in.gcount()));
    }
    return h.digest();
}

std::string hex64(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

namespace binio {

namespace {

template <typename T>
void write_raw(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_raw(std::istream& in, const char* what) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (in.gcount() != static_cast<std::streamsize>(sizeof v)) {
        throw FormatError(std::string("truncated file while reading ") + what);
    }
    return v;
}

}  // namespace

void write_u8(std::ostream& out, std::uint8_t v) { write_raw(out, v); }
void write_u16(std::ostream& out, std::uint16_t v) { write_raw(out, v); }
void write_u32(std::ostream& out, std::uint32_t v) { write_raw(out, v); }
void write_u64(std::ostream& out, std::uint64_t v) { write_raw(out, v); }
void write_f32(std::ostream& out, float v) { write_raw(out, v); }
void write_f64(std::ostream& out, double v) { write_raw(out, v); }

void write_f32s(std::ostream& out, std::span<const float> v) {
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size_bytes()));
}

void write_magic(std::ostream& out, std::string_view magic) {
    out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

std::uint8_t read_u8(std::istream& in, const char* what) { return read_raw<std::uint8_t>(in, what); }
std::uint16_t read_u16(std::istream& in, const char* what) { return read_raw<std::uint16_t>(in, what); }
std::uint32_t read_u32(std::istream& in, const char* what) { return read_raw<std::uint32_t>(in, what); }
std::uint64_t read_u64(std::istream& in, const char* what) { return read_raw<std::uint64_t>(in, what); }
float read_f32(std::istream& in, const char* what) { return read_raw<float>(in, what); }
double read_f64(std::istream& in, const char* what) { return read_raw<double>(in, what); }

void read_f32s(std::istream& in, std::span<float> out, const char* what) {
    in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size_bytes()));
    if (in.gcount() != static_cast<std::streamsize>(out.size_bytes())) {
        throw FormatError(std::string("truncated file while reading ") + what);
    }
}

void expect_magic(std::istream& in, std::string_view magic) {
    std::string got(magic.size(), '\0');
    in.read(got.data(), static_cast<std::streamsize>(got.size()));
    if (in.gcount() != static_cast<std::streamsize>(magic.size()) || got != magic) {
        throw FormatError("bad magic: expected \"" + std::string(magic) + "\"");
    }
}

void expect_eof(std::istream& in) {
    if (in.peek() != std::char_traits<char>::eof()) {
        throw FormatError("trailing bytes after last record");
    }
}

}  // namespace binio

std::ofstream open_output(const std::filesystem::path& path, bool binary) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    return out;
}

std::ifstream open_input(const std::filesystem::path& path, bool binary) {
    std::ifstream in(path, binary ? std::ios::binary : std::ios::in);
    if (!in) throw IoError("cannot open for reading: " + path.string());
    return in;
}

void write_meta_sidecar(const std::filesystem::path& artifact, const std::string& provenance) {
    auto out = open_output(artifact.string() + ".meta", false);
    out << provenance;
    if (!provenance.empty() && provenance.back() != '\n') out << '\n';
    if (!out) throw IoError("failed writing " + artifact.string() + ".meta");
}

std::string svg_comment(const std::string& provenance) {
    if (provenance.empty()) return {};
    std::string body;
    for (char ch : provenance) {
        if (ch == '-' && !body.empty() && body.back() == '-') body += ' ';
        body += ch;
    }
    if (!body.empty() && body.back() == '-') body += ' ';
    return "<!--\n" + body + (body.back() == '\n' ? "" : "\n") + "-->\n";
}

std::string read_meta_sidecar(const std::filesystem::path& artifact) {
    const std::filesystem::path meta = artifact.string() + ".meta";
    if (!std::filesystem::exists(meta)) return {};
    auto in = open_input(meta, false);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace countsteer
