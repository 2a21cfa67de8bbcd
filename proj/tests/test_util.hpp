#pragma once

#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>

namespace testutil {

// Unique scratch directory, removed on destruction.
struct TempDir {
    std::filesystem::path path;

    explicit TempDir(const std::string& prefix) {
        std::random_device rd;
        for (int attempt = 0; attempt < 16; ++attempt) {
            const auto candidate =
                std::filesystem::temp_directory_path() / (prefix + "-" + std::to_string(rd()));
            std::error_code ec;
            if (std::filesystem::create_directory(candidate, ec)) {
                path = candidate;
                return;
            }
        }
        throw std::runtime_error("cannot create a scratch directory for " + prefix);
    }

    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }

    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::filesystem::path operator/(const std::string& leaf) const { return path / leaf; }
};

}  // namespace testutil
