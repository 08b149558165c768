#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>

#include <json.hpp>

namespace maskgen::harness {

inline constexpr std::string_view kToolVersion = "0.1.0";

struct RunManifest {
    std::string command;
    std::string config_hash;
    std::map<std::string, std::string> inputs;  // name -> content hash
    std::uint64_t seed = 0;
    std::string tool_version = std::string(kToolVersion);
    std::string started_at;  // ISO-8601 UTC; not part of hash()

    /// SHA-256 over every field except the timestamp.
    std::string hash() const;
    nlohmann::json to_json() const;
};

std::string utc_timestamp();

/// Cache directory: --cache-dir, else $MASKGEN_CACHE, else ".maskgen-cache".
std::filesystem::path resolve_cache_dir(const std::optional<std::filesystem::path>& flag);

/// Content-addressed stage store: <root>/<stage>/<key>/. Writers fill a
/// temporary directory that is renamed into place, so readers never see
/// partial entries.
class Cache {
public:
    explicit Cache(std::filesystem::path root);

    const std::filesystem::path& root() const { return root_; }
    std::filesystem::path entry(std::string_view stage, std::string_view key) const;
    bool has(std::string_view stage, std::string_view key) const;

    /// Runs `fill(dir)` into a fresh directory and publishes it as the entry,
    /// unless another process published it first. Holds an advisory lock on
    /// the stage for the duration.
    template <typename F>
    std::filesystem::path publish(std::string_view stage, std::string_view key, F&& fill) const {
        const auto lock = lock_stage(stage);
        const auto final_dir = entry(stage, key);
        if (std::filesystem::exists(final_dir / kCompleteMarker)) return final_dir;
        const auto tmp = staging_dir(stage, key);
        try {
            fill(tmp);
        } catch (...) {
            std::filesystem::remove_all(tmp);
            throw;
        }
        commit(tmp, final_dir);
        return final_dir;
    }

    static constexpr std::string_view kCompleteMarker = ".complete";

private:
    class Lock {
    public:
        explicit Lock(int fd) : fd_(fd) {}
        Lock(Lock&& other) noexcept : fd_(other.fd_) { other.fd_ = -1; }
        Lock(const Lock&) = delete;
        ~Lock();

    private:
        int fd_;
    };

    Lock lock_stage(std::string_view stage) const;
    std::filesystem::path staging_dir(std::string_view stage, std::string_view key) const;
    void commit(const std::filesystem::path& tmp, const std::filesystem::path& final_dir) const;

    std::filesystem::path root_;
};

}  // namespace maskgen::harness
