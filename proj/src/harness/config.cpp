#include "maskgen/harness/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

#include "maskgen/codec.hpp"
#include "maskgen/error.hpp"
#include "maskgen/hash.hpp"
#include "maskgen/rng.hpp"

namespace maskgen::harness {

namespace {

// Reads typed keys from one table and rejects the ones nobody asked for.
class Section {
public:
    Section(const toml::table* table, std::string name) : table_(table), name_(std::move(name)) {}

    bool present() const { return table_ != nullptr; }

    template <typename T>
    void read(std::string_view key, T& out) {
        seen_.insert(std::string(key));
        if (table_ == nullptr) return;
        const toml::node* node = table_->get(key);
        if (node == nullptr) return;
        if constexpr (std::is_same_v<T, std::string>) {
            const auto v = node->value<std::string>();
            if (!v) fail(key, "a string");
            out = *v;
        } else if constexpr (std::is_same_v<T, bool>) {
            const auto v = node->value<bool>();
            if (!v) fail(key, "a boolean");
            out = *v;
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!node->is_number()) fail(key, "a number");
            out = *node->value<double>();
        } else if constexpr (std::is_same_v<T, std::uint64_t>) {
            const auto v = node->value<std::int64_t>();
            if (!node->is_integer() || !v || *v < 0) fail(key, "a non-negative integer");
            out = static_cast<std::uint64_t>(*v);
        } else {
            const auto v = node->value<std::int64_t>();
            if (!node->is_integer() || !v) fail(key, "an integer");
            if (*v < std::numeric_limits<T>::min() || *v > std::numeric_limits<T>::max()) fail(key, "in range");
            out = static_cast<T>(*v);
        }
    }

    /// Like read(), but reports whether the key was given.
    template <typename T>
    bool read_opt(std::string_view key, T& out) {
        const bool given = table_ != nullptr && table_->get(key) != nullptr;
        read(key, out);
        return given;
    }

    std::vector<double> read_list(std::string_view key, std::vector<double> fallback) {
        seen_.insert(std::string(key));
        if (table_ == nullptr) return fallback;
        const toml::node* node = table_->get(key);
        if (node == nullptr) return fallback;
        const auto* arr = node->as_array();
        if (arr == nullptr) fail(key, "an array of numbers");
        std::vector<double> out;
        for (const auto& e : *arr) {
            if (!e.is_number()) fail(key, "an array of numbers");
            out.push_back(*e.value<double>());
        }
        return out;
    }

    void finish() const {
        if (table_ == nullptr) return;
        for (const auto& [k, v] : *table_) {
            if (!seen_.contains(std::string(k.str()))) {
                throw ValidationError("unknown key '" + std::string(k.str()) + "' in [" + name_ + "]");
            }
        }
    }

private:
    [[noreturn]] void fail(std::string_view key, std::string_view what) const {
        throw ValidationError("[" + name_ + "] " + std::string(key) + " must be " + std::string(what));
    }

    const toml::table* table_;
    std::string name_;
    std::set<std::string> seen_;
};

const toml::table* sub_table(const toml::table& root, std::string_view name) {
    const auto* node = root.get(name);
    if (node == nullptr) return nullptr;
    const auto* t = node->as_table();
    if (t == nullptr) throw ValidationError("'" + std::string(name) + "' must be a table");
    return t;
}

}  // namespace

void RunConfig::validate() const {
    model.validate();
    train.validate();
    if (data.train_samples < 1 || data.test_samples < 1) throw ValidationError("[data] sample counts must be >= 1");
    if (codebook.size < 2) throw ValidationError("[codebook] size must be >= 2");
    if (codebook.iterations < 1) throw ValidationError("[codebook] iterations must be >= 1");
    if (codebook.samples < 1) throw ValidationError("[codebook] samples must be >= 1");
    if (eval.thresholds.empty()) throw ValidationError("[eval] thresholds must not be empty");
    for (std::size_t i = 0; i < eval.thresholds.size(); ++i) {
        const double t = eval.thresholds[i];
        if (!(t >= 0.0 && t <= 1.0) || (i > 0 && !(t > eval.thresholds[i - 1]))) {
            throw ValidationError("[eval] thresholds must be strictly increasing values in [0, 1]");
        }
    }
    if (!(decode.temperature >= 0.0)) throw ValidationError("[decode] temperature must be >= 0");
    const int grid = kCanvasSize / kDefaultPatchSize;
    if (model.grid_rows != grid || model.grid_cols != grid ||
        model.image_patch_dim != kDefaultPatchSize * kDefaultPatchSize * 3) {
        throw ValidationError("model geometry does not match the 64x64 canvas with 16-pixel patches");
    }
}

RunConfig default_config(std::uint64_t seed) {
    RunConfig c;
    c.seed = seed;
    c.train = model::TrainConfig::finetune();
    c.model.seed = derive_seed(seed, "model");
    c.train.seed = derive_seed(seed, "train");
    c.decode.seed = derive_seed(seed, "decode");
    c.codebook.seed = derive_seed(seed, "codebook");
    return c;
}

RunConfig parse_config(std::string_view toml_text, const ConfigOverrides& overrides) {
    const auto& seed_override = overrides.seed;
    toml::table root;
    try {
        root = toml::parse(toml_text);
    } catch (const toml::parse_error& e) {
        std::ostringstream os;
        os << "config: " << e.description() << " at line " << e.source().begin.line;
        throw ValidationError(os.str());
    }
    static const std::set<std::string> kTables = {"seed", "model", "train", "decode", "data", "codebook", "eval"};
    for (const auto& [k, v] : root) {
        if (!kTables.contains(std::string(k.str()))) {
            throw ValidationError("unknown top-level key '" + std::string(k.str()) + "'");
        }
    }
    std::uint64_t seed = 0;
    {
        Section top(&root, "top level");
        top.read("seed", seed);
    }
    if (seed_override) seed = *seed_override;
    RunConfig c = default_config(seed);

    Section train(sub_table(root, "train"), "train");
    std::string preset = "finetune";
    train.read("preset", preset);
    if (overrides.preset) preset = *overrides.preset;
    const auto seeds = c;
    c.train = model::TrainConfig::preset(preset);
    c.train.seed = seeds.train.seed;
    train.read("lr", c.train.lr);
    train.read("beta1", c.train.beta1);
    train.read("beta2", c.train.beta2);
    train.read("weight_decay", c.train.weight_decay);
    train.read("adam_eps", c.train.adam_eps);
    train.read("warmup_fraction", c.train.warmup_fraction);
    train.read("epochs", c.train.epochs);
    train.read("batch", c.train.batch);
    train.read("grad_clip", c.train.grad_clip);
    train.read("jobs", c.train.jobs);
    if (train.read_opt("seed", c.train.seed) && seed_override) c.train.seed = seeds.train.seed;
    train.finish();

    Section m(sub_table(root, "model"), "model");
    m.read("layers", c.model.layers);
    m.read("hidden", c.model.hidden);
    m.read("heads", c.model.heads);
    m.read("ffn_hidden", c.model.ffn_hidden);
    m.read("rope_base", c.model.rope_base);
    m.read("norm_eps", c.model.norm_eps);
    m.read("init_std", c.model.init_std);
    m.read("adaptor_hidden", c.model.adaptor_hidden);
    if (m.read_opt("seed", c.model.seed) && seed_override) c.model.seed = seeds.model.seed;
    m.finish();

    Section d(sub_table(root, "decode"), "decode");
    std::string strategy = "greedy";
    d.read("strategy", strategy);
    double temperature = 1.0;
    d.read("temperature", temperature);
    std::uint64_t decode_seed = c.decode.seed;
    if (d.read_opt("seed", decode_seed) && seed_override) decode_seed = seeds.decode.seed;
    d.finish();
    c.decode = model::DecodeStrategy::parse(strategy);
    c.decode.temperature = temperature;
    c.decode.seed = decode_seed;

    Section data(sub_table(root, "data"), "data");
    std::string task = std::string(to_string(c.data.task));
    data.read("task", task);
    c.data.task = parse_task(task);
    data.read("train_samples", c.data.train_samples);
    data.read("test_samples", c.data.test_samples);
    data.read("seed0", c.data.seed0);
    data.read("test_seed0", c.data.test_seed0);
    data.finish();

    Section cb(sub_table(root, "codebook"), "codebook");
    cb.read("size", c.codebook.size);
    cb.read("iterations", c.codebook.iterations);
    cb.read("samples", c.codebook.samples);
    if (cb.read_opt("seed", c.codebook.seed) && seed_override) c.codebook.seed = seeds.codebook.seed;
    cb.finish();

    Section ev(sub_table(root, "eval"), "eval");
    c.eval.thresholds = ev.read_list("thresholds", c.eval.thresholds);
    std::string mode = "inclusive";
    ev.read("threshold_mode", mode);
    if (mode == "inclusive") {
        c.eval.mode = ThresholdMode::inclusive;
    } else if (mode == "strict") {
        c.eval.mode = ThresholdMode::strict_above;
    } else {
        throw ValidationError("[eval] threshold_mode must be 'inclusive' or 'strict'");
    }
    int conn = 4;
    ev.read("connectivity", conn);
    if (conn != 4 && conn != 8) throw ValidationError("[eval] connectivity must be 4 or 8");
    c.eval.connectivity = conn == 4 ? Connectivity::four : Connectivity::eight;
    ev.finish();

    c.validate();
    return c;
}

RunConfig load_config(const std::filesystem::path& path, const ConfigOverrides& overrides) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), overrides);
}

nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json j;
    j["seed"] = c.seed;
    j["model"] = c.model;
    j["train"] = c.train;
    j["decode"] = {{"strategy", c.decode.to_string()}, {"temperature", c.decode.temperature}, {"seed", c.decode.seed}};
    j["data"] = {{"task", to_string(c.data.task)},
                 {"train_samples", c.data.train_samples},
                 {"test_samples", c.data.test_samples},
                 {"seed0", c.data.seed0},
                 {"test_seed0", c.data.test_seed0}};
    j["codebook"] = {{"size", c.codebook.size},
                     {"iterations", c.codebook.iterations},
                     {"samples", c.codebook.samples},
                     {"seed", c.codebook.seed}};
    j["eval"] = {{"thresholds", c.eval.thresholds},
                 {"threshold_mode", c.eval.mode == ThresholdMode::inclusive ? "inclusive" : "strict"},
                 {"connectivity", static_cast<int>(c.eval.connectivity)}};
    return j;
}

std::string config_hash(const RunConfig& config) {
    auto j = to_json(config);
    // Thread count never changes results.
    j["train"].erase("jobs");
    return sha256_hex(j.dump());
}

}  // namespace maskgen::harness
