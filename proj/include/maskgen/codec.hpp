#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "maskgen/image.hpp"

namespace maskgen {

inline constexpr int kDefaultPatchSize = 16;
inline constexpr int kDefaultCodebookSize = 1024;
inline constexpr int kDefaultKmeansIters = 100;

/// h x w grid of d_vq-dimensional patch vectors, row-major by patch then by
/// component. Mask pixel 0 maps to -1.0 and pixel 1 to +1.0.
struct PatchGrid {
    int rows = 0;
    int cols = 0;
    int dim = 0;
    std::vector<float> values;

    std::span<const float> patch(int r, int c) const {
        return {values.data() + offset(r, c), static_cast<std::size_t>(dim)};
    }
    std::span<float> patch(int r, int c) {
        return {values.data() + offset(r, c), static_cast<std::size_t>(dim)};
    }

private:
    std::size_t offset(int r, int c) const {
        return (static_cast<std::size_t>(r) * cols + c) * static_cast<std::size_t>(dim);
    }
};

struct CodebookMeta {
    std::uint64_t seed = 0;
    int iterations = 0;
    std::int64_t sample_count = 0;

    friend bool operator==(const CodebookMeta&, const CodebookMeta&) = default;
};

/// K vectors of dimension d_vq shared by quantize and dequantize.
struct Codebook {
    int size = 0;  // K
    int dim = 0;   // d_vq
    std::vector<float> vectors;
    CodebookMeta meta;

    std::span<const float> vector(int k) const {
        return {vectors.data() + static_cast<std::size_t>(k) * dim, static_cast<std::size_t>(dim)};
    }

    /// Throws ValidationError unless K >= 2, values are finite, and no two
    /// vectors are identical.
    void validate() const;

    friend bool operator==(const Codebook&, const Codebook&) = default;
};

/// h x w grid of codebook indices, row-major.
struct TokenGrid {
    int rows = 0;
    int cols = 0;
    std::vector<std::int32_t> indices;

    std::int32_t at(int r, int c) const { return indices[static_cast<std::size_t>(r) * cols + c]; }

    friend bool operator==(const TokenGrid&, const TokenGrid&) = default;
};

PatchGrid patchify(const BinaryMask& mask, int patch_size = kDefaultPatchSize);

/// Un-patchifies and thresholds at 0 (values >= 0 become foreground). The
/// patch side is sqrt(d_vq).
BinaryMask binarize(const PatchGrid& grid);

struct KmeansOptions {
    int size = kDefaultCodebookSize;
    int max_iters = kDefaultKmeansIters;
    std::uint64_t seed = 0;
};

/// k-means over `vectors` (n rows of `dim` floats) with k-means++ seeding.
/// Identical vectors are clustered as one weighted point, so the result only
/// depends on the multiset of inputs and the seed.
Codebook train_codebook(std::span<const float> vectors, int dim, const KmeansOptions& options);

/// Squared Euclidean distance accumulated in double, in component order.
double squared_distance(std::span<const float> a, std::span<const float> b);

/// Index of the nearest codebook vector; ties go to the lowest index.
std::int32_t nearest_code(std::span<const float> vec, const Codebook& codebook);

TokenGrid quantize(const PatchGrid& grid, const Codebook& codebook);
PatchGrid dequantize(const TokenGrid& tokens, const Codebook& codebook);

std::vector<std::int32_t> flatten(const TokenGrid& tokens);
TokenGrid unflatten(std::span<const std::int32_t> fragment, int rows, int cols);

/// encode = quantize(patchify(mask)); decode = binarize(dequantize(tokens)).
TokenGrid encode_mask(const BinaryMask& mask, const Codebook& codebook);
BinaryMask decode_tokens(const TokenGrid& tokens, const Codebook& codebook);

/// Patch vectors of every mask, concatenated (input to train_codebook).
std::vector<float> collect_patches(std::span<const BinaryMask> masks, int patch_size);

struct ReconstructionReport {
    double total_iou = 0.0;
    /// Mean AHD (256-normalized) over pairs where it is defined.
    double mahd = 0.0;
    std::size_t pairs = 0;
    /// Pairs where exactly one of (original, reconstruction) is empty; AHD
    /// is undefined there and they are left out of `mahd`.
    std::size_t undefined_ahd = 0;
};

ReconstructionReport reconstruction_report(std::span<const BinaryMask> masks,
                                           const Codebook& codebook);

// Codebook files. Text: header `MASKCB v1 K d_vq seed`, then K rows of d_vq
// floats, then optional `#` lines. Binary: 16-byte magic "MSKCB1\0" padded
// with zeros, u32 K, u32 d_vq, K*d_vq little-endian f32.
void save_codebook_text(const std::filesystem::path& path, const Codebook& codebook,
                        const std::string& comment = {});
void save_codebook_binary(const std::filesystem::path& path, const Codebook& codebook);
/// Detects the format from the first bytes.
Codebook load_codebook(const std::filesystem::path& path);

// Token files: {"h":_, "w":_, "tokens":[...]}.
std::string tokens_to_json(const TokenGrid& tokens, const std::string& manifest = {});
TokenGrid tokens_from_json(const std::string& text);

}  // namespace maskgen
