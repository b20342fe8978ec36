#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "countsteer/common.hpp"
#include "countsteer/model.hpp"
#include "countsteer/train.hpp"

namespace testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() / ("countsteer_" + tag + "_" + std::to_string(::getpid()));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline std::vector<char> read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& p, const std::vector<char>& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Narrow network so model-level tests stay fast.
inline countsteer::ModelConfig small_config() {
    countsteer::ModelConfig c;
    c.time_dim = 8;
    c.time_hidden = 16;
    c.token_dim = 8;
    c.query_dim = 8;
    c.widths = {4, 8, 8, 8, 4};
    return c;
}

inline std::vector<float> random_vector(countsteer::Rng& rng, int dim, double scale = 1.0) {
    std::vector<float> v(static_cast<std::size_t>(dim));
    for (float& x : v) x = static_cast<float>(scale * countsteer::standard_normal(rng));
    return v;
}

}  // namespace testing
