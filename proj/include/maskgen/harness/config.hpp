#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "maskgen/dataset.hpp"
#include "maskgen/metrics.hpp"
#include "maskgen/model/config.hpp"
#include "maskgen/model/decode.hpp"

namespace maskgen::harness {

struct DataConfig {
    Task task = Task::referring;
    int train_samples = 500;
    int test_samples = 100;
    /// Training scenes use seeds [seed0, seed0 + train_samples).
    std::uint64_t seed0 = 0;
    /// Held-out scenes use seeds [test_seed0, test_seed0 + test_samples).
    std::uint64_t test_seed0 = 1'000'000;
};

struct CodebookConfig {
    int size = 1024;
    int iterations = 100;
    /// Masks drawn from seeds [seed0, seed0 + samples) of the training task.
    int samples = 2000;
    std::uint64_t seed = 0;
};

struct EvalConfig {
    std::vector<double> thresholds = kDefaultMahdThresholds;
    ThresholdMode mode = ThresholdMode::inclusive;
    Connectivity connectivity = Connectivity::four;
};

/// Everything a pipeline run depends on. Mirrors the TOML layout:
/// top-level `seed`, then [model], [train], [decode], [data], [codebook],
/// [eval] tables.
struct RunConfig {
    std::uint64_t seed = 0;
    model::ModelConfig model;
    model::TrainConfig train;
    model::DecodeStrategy decode;
    DataConfig data;
    CodebookConfig codebook;
    EvalConfig eval;

    void validate() const;
};

/// Command-line values that take precedence over the file.
struct ConfigOverrides {
    std::optional<std::uint64_t> seed;
    /// Replaces [train] preset; explicit [train] keys still apply on top.
    std::optional<std::string> preset;
};

/// Parses TOML text. Unknown tables or keys are validation errors. Seeds that
/// the file leaves unset are derived from the root seed by section label; a
/// seed override re-derives all of them.
RunConfig parse_config(std::string_view toml_text, const ConfigOverrides& overrides = {});
RunConfig load_config(const std::filesystem::path& path, const ConfigOverrides& overrides = {});

/// Defaults with every section seed derived from `seed`.
RunConfig default_config(std::uint64_t seed = 0);

nlohmann::json to_json(const RunConfig& config);

/// Stable hash of the canonical JSON form.
std::string config_hash(const RunConfig& config);

}  // namespace maskgen::harness
