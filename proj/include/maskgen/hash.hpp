#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace maskgen {

/// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view data);
std::string sha256_hex(std::span<const unsigned char> data);
std::string sha256_file(const std::filesystem::path& path);

/// Incremental SHA-256 for hashing several fields without concatenating them.
class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    Sha256& update(std::string_view data);
    Sha256& update(std::span<const unsigned char> data);
    /// Appends the length first so that field boundaries are unambiguous.
    Sha256& field(std::string_view data);
    std::string hex();

private:
    void* ctx_;
};

}  // namespace maskgen
