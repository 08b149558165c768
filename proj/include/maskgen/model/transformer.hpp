#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "maskgen/image.hpp"
#include "maskgen/model/config.hpp"

namespace maskgen::model {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Col = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
struct BlockParams {
    Mat<T> attn_norm;  // 1 x H
    Mat<T> wq, wk, wv, wo;  // H x H
    Mat<T> ffn_norm;  // 1 x H
    Mat<T> w_gate, w_up;  // H x F
    Mat<T> w_down;  // F x H
};

/// All trainable tensors. Vectors are stored as 1 x n matrices so that every
/// tensor can be visited uniformly.
template <typename T>
struct ModelParams {
    Mat<T> tok_emb;  // V x H; text, <BOI>, <BOM> and mask-token embeddings
    Mat<T> adapt_w1, adapt_b1, adapt_w2, adapt_b2;  // image patch adaptor
    std::vector<BlockParams<T>> blocks;
    Mat<T> final_norm;  // 1 x H
    Mat<T> head;  // H x V

    /// Calls f(name, tensor) for every tensor in a fixed order.
    template <typename F>
    void visit(F&& f) {
        visit_impl(*this, f);
    }
    template <typename F>
    void visit(F&& f) const {
        visit_impl(*this, f);
    }

    std::size_t parameter_count() const;

    /// Same shapes, all zeros.
    ModelParams zeros_like() const;

    template <typename U>
    ModelParams<U> cast() const;

private:
    template <typename Self, typename F>
    static void visit_impl(Self& self, F& f) {
        f(std::string_view("tok_emb"), self.tok_emb);
        f(std::string_view("adapt.w1"), self.adapt_w1);
        f(std::string_view("adapt.b1"), self.adapt_b1);
        f(std::string_view("adapt.w2"), self.adapt_w2);
        f(std::string_view("adapt.b2"), self.adapt_b2);
        for (std::size_t i = 0; i < self.blocks.size(); ++i) {
            auto& b = self.blocks[i];
            const std::string p = "blocks." + std::to_string(i) + ".";
            f(std::string_view(p + "attn_norm"), b.attn_norm);
            f(std::string_view(p + "wq"), b.wq);
            f(std::string_view(p + "wk"), b.wk);
            f(std::string_view(p + "wv"), b.wv);
            f(std::string_view(p + "wo"), b.wo);
            f(std::string_view(p + "ffn_norm"), b.ffn_norm);
            f(std::string_view(p + "w_gate"), b.w_gate);
            f(std::string_view(p + "w_up"), b.w_up);
            f(std::string_view(p + "w_down"), b.w_down);
        }
        f(std::string_view("final_norm"), self.final_norm);
        f(std::string_view("head"), self.head);
    }
};

/// Norm gains and biases are exempt from weight decay.
bool is_decayed(std::string_view tensor_name);

template <typename T>
struct Model {
    ModelConfig config;
    Vocabulary vocab;
    ModelParams<T> params;
};

/// Fresh parameters: N(0, init_std^2) weights, unit norm gains, zero biases.
template <typename T>
Model<T> init_model(const ModelConfig& config, const Vocabulary& vocab);

/// One conditioning example: [text] <BOI> [image] <BOM> [mask].
struct SequenceInput {
    std::vector<std::int32_t> text;
    /// image_patches x image_patch_dim values in [-1, 1], patch-major.
    std::vector<float> image;
    int image_patches = 0;
    /// Empty at inference time.
    std::vector<std::int32_t> mask;
};

struct Span {
    int begin = 0;
    int length = 0;
    int end() const { return begin + length; }
};

struct SequenceLayout {
    Span text;
    int boi_pos = 0;
    Span image;
    int bom_pos = 0;
    Span mask;
    int total_len = 0;
};

/// Positions and checks for `input`; throws ValidationError on bad ids,
/// image size mismatch, or a mask span that is neither empty nor h*w.
SequenceLayout make_layout(const SequenceInput& input, const ModelConfig& config,
                           const Vocabulary& vocab);

/// Splits an RGB image into patch-major, row-major-within-patch vectors with
/// channels interleaved, scaled to [-1, 1].
std::vector<float> image_to_patches(const RgbImage& image, int patch_size);

/// Embedded sequence (total_len x hidden) plus layout.
template <typename T>
struct Embedded {
    Mat<T> x;
    SequenceLayout layout;
    Mat<T> adaptor_pre;   // image_patches x adaptor_width (before GELU)
    Mat<T> adaptor_act;   // after GELU
};

template <typename T>
Embedded<T> build_sequence(const Model<T>& model, const SequenceInput& input);

template <typename T>
struct LayerCache {
    Mat<T> x_in;
    Col<T> inv_rms1;
    Mat<T> xn1;
    Mat<T> q, k, v;  // q and k after rotary embedding
    std::vector<Mat<T>> probs;  // per head, L x L, post-softmax
    Mat<T> attn_cat;
    Mat<T> x_mid;
    Col<T> inv_rms2;
    Mat<T> xn2;
    Mat<T> gate, up, act;
};

struct ForwardOptions {
    /// Added to every position index before the rotary embedding.
    int position_offset = 0;
    /// Logits are produced for rows [logit_begin, logit_begin + logit_rows);
    /// logit_rows < 0 means "through the end of the sequence".
    int logit_begin = 0;
    int logit_rows = -1;
    /// Keep per-layer activations (needed for backward and attention export).
    bool keep_cache = false;
};

template <typename T>
struct ForwardResult {
    Embedded<T> embedded;
    Mat<T> logits;  // logit_rows x V
    int logit_begin = 0;
    std::vector<LayerCache<T>> layers;  // filled when keep_cache
    Mat<T> x_final;
    Col<T> inv_rms_final;
    Mat<T> xn_final;
    /// Pre-softmax attention scores per layer and head (only with keep_cache).
    std::vector<std::vector<Mat<T>>> scores;
};

/// Pre-norm transformer: RMSNorm -> causal MHA with RoPE -> residual ->
/// RMSNorm -> SwiGLU -> residual, then final RMSNorm and the vocabulary head.
/// Throws RuntimeFailure naming the layer if activations become non-finite.
template <typename T>
ForwardResult<T> forward(const Model<T>& model, const SequenceInput& input,
                         const ForwardOptions& options = {});

/// Mean cross-entropy over the mask span: row bom_pos + t predicts mask[t].
/// `logits` must cover the whole sequence (row 0 = position 0).
template <typename T>
T mask_loss(const Mat<T>& logits, const SequenceLayout& layout,
            std::span<const std::int32_t> targets);

/// d(mask_loss)/d(logits); rows outside the supervised span are exactly 0.
template <typename T>
Mat<T> mask_loss_grad(const Mat<T>& logits, const SequenceLayout& layout,
                      std::span<const std::int32_t> targets);

/// Loss and gradient for one training sequence. Only the supervised rows go
/// through the vocabulary head. Gradients are accumulated into `grads`.
template <typename T>
T loss_and_grad(const Model<T>& model, const SequenceInput& input, ModelParams<T>& grads);

/// Backpropagates `dlogits` (rows aligned with result.logit_begin) from a
/// forward pass run with keep_cache. Accumulates into `grads`.
template <typename T>
void backward(const Model<T>& model, const SequenceInput& input, const ForwardResult<T>& result,
              const Mat<T>& dlogits, ModelParams<T>& grads);

/// Incremental decoding state (per-layer key/value cache).
template <typename T>
struct DecodeState {
    std::vector<Mat<T>> keys;    // per layer, capacity x H
    std::vector<Mat<T>> values;  // per layer, capacity x H
    int length = 0;
    Col<T> last_logits;  // logits at the last processed position
};

/// Runs the prefix (which must have an empty mask span) and prepares a cache
/// with room for `extra` more tokens.
template <typename T>
DecodeState<T> prefill(const Model<T>& model, const SequenceInput& prefix, int extra);

/// Appends one token and updates last_logits.
template <typename T>
void decode_step(const Model<T>& model, DecodeState<T>& state, std::int32_t token);

}  // namespace maskgen::model
