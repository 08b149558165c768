#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "maskgen/codec.hpp"
#include "maskgen/dataset.hpp"
#include "maskgen/harness/config.hpp"
#include "maskgen/harness/manifest.hpp"
#include "maskgen/harness/report.hpp"
#include "maskgen/model/decode.hpp"
#include "maskgen/model/train.hpp"

namespace maskgen::harness {

/// A sample as stored on disk by gen-data.
struct StoredSample {
    std::uint64_t seed = 0;
    Task task = Task::referring;
    Sample sample;

    friend bool operator==(const StoredSample&, const StoredSample&) = default;
};

/// Writes images/NNNNN.ppm, masks/NNNNN.pgm and manifest.jsonl with records
/// {"image", "mask", "instruction", "task", "seed"} (paths relative to `dir`).
void write_dataset(const std::filesystem::path& dir, std::span<const StoredSample> samples,
                   const std::string& manifest_hash);
std::vector<StoredSample> read_dataset(const std::filesystem::path& dir);

std::vector<StoredSample> generate_stored(std::uint64_t seed0, int n, Task task, int jobs = 1);

Codebook build_codebook(std::span<const BinaryMask> masks, const CodebookConfig& config);

/// Greedy or sampled decoding for many prefixes. Sample i decodes with seed
/// derive_seed(strategy.seed, "sample/<i>"), so results do not depend on
/// `jobs`.
std::vector<std::vector<std::int32_t>> generate_batch(const model::Model<float>& model,
                                                      std::span<const model::SequenceInput> prefixes,
                                                      const model::DecodeStrategy& strategy, int jobs = 1);

std::vector<EvalPair> evaluate_masks(std::span<const BinaryMask> predicted, std::span<const BinaryMask> truth,
                                     Connectivity connectivity);

struct RunOptions {
    int jobs = 1;
    std::ostream* log = nullptr;
};

struct StageStatus {
    std::string stage;
    std::string key;
    bool cache_hit = false;
};

struct E2EResult {
    Report report;
    RunManifest manifest;
    std::vector<StageStatus> stages;
};

/// gen-data -> codebook -> encode -> train -> generate -> eval, each stage
/// cached under a key derived from its inputs. Failures are rethrown with the
/// stage name and manifest hash prepended.
E2EResult run_e2e(const RunConfig& config, const Cache& cache, const RunOptions& options = {});

}  // namespace maskgen::harness
