#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include <json.hpp>

namespace maskgen::model {

/// Token id layout: [0, K) mask tokens, K = <BOI>, K+1 = <BOM>, then text.
struct Vocabulary {
    int mask_size = 1024;
    int text_size = 0;

    std::int32_t boi() const { return mask_size; }
    std::int32_t bom() const { return mask_size + 1; }
    std::int32_t text_base() const { return mask_size + 2; }
    int total() const { return mask_size + 2 + text_size; }

    bool is_mask(std::int32_t id) const { return id >= 0 && id < mask_size; }
    bool is_text(std::int32_t id) const { return id >= text_base() && id < total(); }

    friend bool operator==(const Vocabulary&, const Vocabulary&) = default;
};

struct ModelConfig {
    int layers = 4;
    int hidden = 128;
    int heads = 4;
    /// SwiGLU inner width; 0 selects the LLaMA rule (8/3 * hidden, rounded
    /// up to a multiple of 32).
    int ffn_hidden = 0;
    double rope_base = 10000.0;
    double norm_eps = 1e-5;
    double init_std = 0.02;
    std::uint64_t seed = 0;
    /// Flattened RGB patch length fed to the image adaptor.
    int image_patch_dim = 16 * 16 * 3;
    /// Width of the adaptor's first linear layer; 0 means `hidden`.
    int adaptor_hidden = 0;
    /// Mask-token grid (h x w); generation emits exactly h*w tokens.
    int grid_rows = 4;
    int grid_cols = 4;

    int head_dim() const { return hidden / heads; }
    int ffn_width() const;
    int adaptor_width() const { return adaptor_hidden > 0 ? adaptor_hidden : hidden; }
    int mask_length() const { return grid_rows * grid_cols; }

    /// Throws ValidationError on inconsistent sizes (hidden % heads, odd
    /// head_dim, non-positive counts).
    void validate() const;

    /// The published base/large shapes; encodable but far beyond desk scale.
    static ModelConfig base_770m();
    static ModelConfig large_1_5b();
};

struct TrainConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double weight_decay = 0.0;
    double adam_eps = 1e-8;
    /// Fraction of total steps spent in linear warmup before cosine decay.
    double warmup_fraction = 0.01;
    int epochs = 20;
    int batch = 8;
    /// Global-norm clip; <= 0 disables clipping.
    double grad_clip = 1.0;
    std::uint64_t seed = 0;
    int jobs = 1;

    void validate() const;

    static TrainConfig pretrain();
    static TrainConfig finetune();
    /// "pretrain" or "finetune".
    static TrainConfig preset(std::string_view name);
};

void to_json(nlohmann::json& j, const Vocabulary& v);
void from_json(const nlohmann::json& j, Vocabulary& v);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

}  // namespace maskgen::model
