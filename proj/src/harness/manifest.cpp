#include "maskgen/harness/manifest.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include "maskgen/error.hpp"
#include "maskgen/hash.hpp"

namespace maskgen::harness {

std::string RunManifest::hash() const {
    Sha256 h;
    h.field(command).field(config_hash).field(std::to_string(seed)).field(tool_version);
    for (const auto& [name, digest] : inputs) h.field(name).field(digest);
    return h.hex();
}

nlohmann::json RunManifest::to_json() const {
    return {{"command", command},     {"config_hash", config_hash}, {"inputs", inputs},
            {"seed", seed},           {"tool_version", tool_version}, {"started_at", started_at},
            {"hash", hash()}};
}

std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::filesystem::path resolve_cache_dir(const std::optional<std::filesystem::path>& flag) {
    if (flag) return *flag;
    if (const char* env = std::getenv("MASKGEN_CACHE"); env != nullptr && *env != '\0') return env;
    return ".maskgen-cache";
}

Cache::Cache(std::filesystem::path root) : root_(std::move(root)) {
    std::error_code ec;
    std::filesystem::create_directories(root_, ec);
    if (ec) throw RuntimeFailure("cannot create cache directory " + root_.string() + ": " + ec.message());
}

std::filesystem::path Cache::entry(std::string_view stage, std::string_view key) const {
    return root_ / std::string(stage) / std::string(key);
}

bool Cache::has(std::string_view stage, std::string_view key) const {
    return std::filesystem::exists(entry(stage, key) / kCompleteMarker);
}

Cache::Lock::~Lock() {
    if (fd_ >= 0) {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
    }
}

Cache::Lock Cache::lock_stage(std::string_view stage) const {
    const auto dir = root_ / std::string(stage);
    std::filesystem::create_directories(dir);
    const auto path = dir / ".lock";
    const int fd = ::open(path.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
    if (fd < 0) throw RuntimeFailure("cannot open lock file " + path.string());
    if (::flock(fd, LOCK_EX) != 0) {
        ::close(fd);
        throw RuntimeFailure("cannot lock " + path.string());
    }
    return Lock(fd);
}

std::filesystem::path Cache::staging_dir(std::string_view stage, std::string_view key) const {
    const auto tmp = root_ / std::string(stage) / (".tmp-" + std::string(key) + "-" + std::to_string(::getpid()));
    std::filesystem::remove_all(tmp);
    std::filesystem::create_directories(tmp);
    return tmp;
}

void Cache::commit(const std::filesystem::path& tmp, const std::filesystem::path& final_dir) const {
    std::filesystem::remove_all(final_dir);
    std::filesystem::rename(tmp, final_dir);
    std::ofstream(final_dir / std::string(kCompleteMarker)) << "ok\n";
}

}  // namespace maskgen::harness
