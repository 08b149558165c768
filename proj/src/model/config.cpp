#include "maskgen/model/config.hpp"

#include "maskgen/error.hpp"

namespace maskgen::model {

int ModelConfig::ffn_width() const {
    if (ffn_hidden > 0) return ffn_hidden;
    const int raw = (8 * hidden + 2) / 3;
    return (raw + 31) / 32 * 32;
}

void ModelConfig::validate() const {
    if (layers < 1) throw ValidationError("model needs at least one layer");
    if (hidden < 1 || heads < 1) throw ValidationError("hidden size and head count must be positive");
    if (hidden % heads != 0) {
        throw ValidationError("hidden size " + std::to_string(hidden) + " is not divisible by " +
                              std::to_string(heads) + " heads");
    }
    if (head_dim() % 2 != 0) throw ValidationError("rotary embeddings need an even head dimension");
    if (rope_base <= 1.0) throw ValidationError("rope_base must exceed 1");
    if (image_patch_dim < 1 || grid_rows < 1 || grid_cols < 1) {
        throw ValidationError("image patch dimension and mask grid must be positive");
    }
    if (!(init_std > 0.0) || !(norm_eps > 0.0)) throw ValidationError("init_std and norm_eps must be positive");
}

ModelConfig ModelConfig::base_770m() {
    ModelConfig c;
    c.layers = 16;
    c.hidden = 1920;
    c.heads = 20;
    c.grid_rows = c.grid_cols = 16;
    return c;
}

ModelConfig ModelConfig::large_1_5b() {
    ModelConfig c;
    c.layers = 22;
    c.hidden = 2304;
    c.heads = 32;
    c.grid_rows = c.grid_cols = 16;
    return c;
}

void TrainConfig::validate() const {
    if (!(lr >= 0.0)) throw ValidationError("learning rate must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
        throw ValidationError("Adam betas must lie in [0,1)");
    }
    if (!(weight_decay >= 0.0)) throw ValidationError("weight decay must be non-negative");
    if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) {
        throw ValidationError("warmup fraction must lie in [0,1]");
    }
    if (epochs < 1 || batch < 1 || jobs < 1) throw ValidationError("epochs, batch and jobs must be >= 1");
}

TrainConfig TrainConfig::pretrain() {
    TrainConfig c;
    c.lr = 2e-4;
    c.beta1 = 0.9;
    c.beta2 = 0.95;
    c.weight_decay = 0.05;
    c.epochs = 4;
    return c;
}

TrainConfig TrainConfig::finetune() {
    TrainConfig c;
    c.lr = 1e-4;
    c.beta1 = 0.9;
    c.beta2 = 0.99;
    c.weight_decay = 0.0;
    c.warmup_fraction = 0.01;
    c.epochs = 20;
    return c;
}

TrainConfig TrainConfig::preset(std::string_view name) {
    if (name == "pretrain") return pretrain();
    if (name == "finetune") return finetune();
    throw ValidationError("unknown training preset '" + std::string(name) +
                          "' (expected pretrain|finetune)");
}

void to_json(nlohmann::json& j, const Vocabulary& v) {
    j = {{"mask_size", v.mask_size}, {"text_size", v.text_size}};
}

void from_json(const nlohmann::json& j, Vocabulary& v) {
    j.at("mask_size").get_to(v.mask_size);
    j.at("text_size").get_to(v.text_size);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"layers", c.layers},
         {"hidden", c.hidden},
         {"heads", c.heads},
         {"ffn_hidden", c.ffn_hidden},
         {"rope_base", c.rope_base},
         {"norm_eps", c.norm_eps},
         {"init_std", c.init_std},
         {"seed", c.seed},
         {"image_patch_dim", c.image_patch_dim},
         {"adaptor_hidden", c.adaptor_hidden},
         {"grid_rows", c.grid_rows},
         {"grid_cols", c.grid_cols}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    c = ModelConfig{};
    const auto opt = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    opt("layers", c.layers);
    opt("hidden", c.hidden);
    opt("heads", c.heads);
    opt("ffn_hidden", c.ffn_hidden);
    opt("rope_base", c.rope_base);
    opt("norm_eps", c.norm_eps);
    opt("init_std", c.init_std);
    opt("seed", c.seed);
    opt("image_patch_dim", c.image_patch_dim);
    opt("adaptor_hidden", c.adaptor_hidden);
    opt("grid_rows", c.grid_rows);
    opt("grid_cols", c.grid_cols);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"lr", c.lr},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"weight_decay", c.weight_decay},
         {"adam_eps", c.adam_eps},
         {"warmup_fraction", c.warmup_fraction},
         {"epochs", c.epochs},
         {"batch", c.batch},
         {"grad_clip", c.grad_clip},
         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    const auto opt = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    opt("lr", c.lr);
    opt("beta1", c.beta1);
    opt("beta2", c.beta2);
    opt("weight_decay", c.weight_decay);
    opt("adam_eps", c.adam_eps);
    opt("warmup_fraction", c.warmup_fraction);
    opt("epochs", c.epochs);
    opt("batch", c.batch);
    opt("grad_clip", c.grad_clip);
    opt("seed", c.seed);
}

}  // namespace maskgen::model
