#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "maskgen/codec.hpp"
#include "maskgen/model/transformer.hpp"

namespace maskgen::model {

/// Learning rate at 0-based `step`: linear warmup over ceil(fraction * total)
/// steps, then cosine decay reaching 0 after the last step.
double scheduled_lr(const TrainConfig& config, long step, long total_steps);

struct AdamState {
    ModelParams<float> m;
    ModelParams<float> v;
    long step = 0;
};

AdamState make_adam_state(const ModelParams<float>& params);

/// Decoupled weight decay Adam update with bias correction.
void adamw_update(ModelParams<float>& params, const ModelParams<float>& grads, AdamState& state,
                  const TrainConfig& config, double lr);

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
double clip_grad_norm(ModelParams<float>& grads, double max_norm);

struct TrainResult {
    std::vector<double> epoch_loss;  // mean loss per epoch
    std::vector<double> step_loss;   // mean loss per optimizer step
    long steps = 0;
};

struct TrainHooks {
    /// Called after each epoch with (epoch index, mean loss).
    std::function<void(int, double)> on_epoch;
    /// Called with the parameters from before the step whose loss or
    /// gradients were non-finite, just before train() throws.
    std::function<void(const ModelParams<float>&, long)> on_divergence;
};

/// Deterministic given config.seed: the epoch order comes from a seeded
/// shuffle and per-example gradients are summed in batch order regardless
/// of config.jobs.
TrainResult train(Model<float>& model, AdamState& optimizer, const TrainConfig& config,
                  std::span<const SequenceInput> data, const TrainHooks& hooks = {});

/// Mean loss (no gradient) over `data`.
double evaluate_loss(const Model<float>& model, std::span<const SequenceInput> data);

struct Checkpoint {
    Model<float> model;
    std::optional<AdamState> optimizer;
    std::optional<Codebook> codebook;
    std::optional<TrainConfig> train_config;
    /// Free-form metadata (run manifest hash, loss curve, ...).
    nlohmann::json meta = nlohmann::json::object();
};

// Layout: magic "ARSEG1\0" (7 bytes), u64 header length, JSON header
// {config, vocab, tensors:[{name, shape, offset}], ...}, f32 payload.
// Offsets count floats from the start of the payload.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace maskgen::model
