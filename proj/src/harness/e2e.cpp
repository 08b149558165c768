#include "maskgen/harness/e2e.hpp"

#include <cstdio>
#include <fstream>
#include <thread>

#include "maskgen/error.hpp"
#include "maskgen/hash.hpp"
#include "maskgen/pipeline.hpp"
#include "maskgen/rng.hpp"

namespace maskgen::harness {

namespace fs = std::filesystem;

namespace {

std::string indexed(const char* dir, std::size_t i, const char* ext) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s/%05zu.%s", dir, i, ext);
    return buf;
}

// Runs f(i) for i in [0, n) on `jobs` threads; slot i is only touched by f(i).
template <typename F>
void parallel_for(std::size_t n, int jobs, F&& f) {
    const auto workers = static_cast<std::size_t>(std::max(1, jobs));
    if (workers == 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(workers, n); ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += workers) f(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeFailure("cannot write " + path.string());
    out << text;
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw RuntimeFailure("cannot read " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<BinaryMask> masks_of(std::span<const StoredSample> samples) {
    std::vector<BinaryMask> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.sample.mask);
    return out;
}

void log_line(const RunOptions& o, const std::string& msg) {
    if (o.log != nullptr) *o.log << msg << '\n' << std::flush;
}

nlohmann::json train_json_for_key(const model::TrainConfig& t) {
    nlohmann::json j = t;
    j.erase("jobs");
    return j;
}

}  // namespace

void write_dataset(const fs::path& dir, std::span<const StoredSample> samples, const std::string& manifest_hash) {
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "masks");
    std::string lines;
    const std::string comment = manifest_hash.empty() ? std::string() : "manifest " + manifest_hash;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        const auto image = indexed("images", i, "ppm");
        const auto mask = indexed("masks", i, "pgm");
        write_ppm(dir / image, s.sample.image, comment);
        write_pgm_mask(dir / mask, s.sample.mask, comment);
        const nlohmann::ordered_json rec = {{"image", image},
                                            {"mask", mask},
                                            {"instruction", s.sample.instruction},
                                            {"task", to_string(s.task)},
                                            {"seed", s.seed}};
        lines += rec.dump() + "\n";
    }
    write_text(dir / "manifest.jsonl", lines);
}

std::vector<StoredSample> read_dataset(const fs::path& dir) {
    std::ifstream in(dir / "manifest.jsonl");
    if (!in) throw ValidationError("no manifest.jsonl in " + dir.string());
    std::vector<StoredSample> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            StoredSample s;
            s.seed = j.at("seed").get<std::uint64_t>();
            s.task = parse_task(j.at("task").get<std::string>());
            s.sample.instruction = j.at("instruction").get<std::string>();
            s.sample.image = read_image(dir / j.at("image").get<std::string>());
            s.sample.mask = read_pgm_mask(dir / j.at("mask").get<std::string>());
            out.push_back(std::move(s));
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("manifest.jsonl line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

std::vector<StoredSample> generate_stored(std::uint64_t seed0, int n, Task task, int jobs) {
    if (n < 0) throw ValidationError("sample count must be non-negative");
    std::vector<StoredSample> out(static_cast<std::size_t>(n));
    parallel_for(out.size(), jobs, [&](std::size_t i) {
        const auto seed = seed0 + i;
        out[i] = {seed, task, generate_sample(make_scene(seed, task))};
    });
    return out;
}

Codebook build_codebook(std::span<const BinaryMask> masks, const CodebookConfig& config) {
    KmeansOptions opt;
    opt.size = config.size;
    opt.max_iters = config.iterations;
    opt.seed = config.seed;
    return train_codebook(collect_patches(masks, kDefaultPatchSize), kDefaultPatchSize * kDefaultPatchSize, opt);
}

std::vector<std::vector<std::int32_t>> generate_batch(const model::Model<float>& model,
                                                      std::span<const model::SequenceInput> prefixes,
                                                      const model::DecodeStrategy& strategy, int jobs) {
    std::vector<std::vector<std::int32_t>> out(prefixes.size());
    parallel_for(prefixes.size(), jobs, [&](std::size_t i) {
        auto s = strategy;
        s.seed = derive_seed(strategy.seed, "sample/" + std::to_string(i));
        out[i] = model::generate(model, prefixes[i], s);
    });
    return out;
}

std::vector<EvalPair> evaluate_masks(std::span<const BinaryMask> predicted, std::span<const BinaryMask> truth,
                                     Connectivity connectivity) {
    if (predicted.size() != truth.size()) throw ValidationError("prediction and ground-truth counts differ");
    std::vector<EvalPair> pairs;
    pairs.reserve(predicted.size());
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        pairs.push_back(EvalPair::make(predicted[i], truth[i], connectivity));
    }
    return pairs;
}

E2EResult run_e2e(const RunConfig& config, const Cache& cache, const RunOptions& options) {
    config.validate();
    E2EResult result;
    result.manifest.command = "e2e";
    result.manifest.config_hash = config_hash(config);
    result.manifest.seed = config.seed;
    result.manifest.started_at = utc_timestamp();
    const auto manifest = result.manifest.hash();
    const std::string comment = "manifest " + manifest;

    std::string stage_name;
    const auto stage = [&](const std::string& name, const std::string& key, auto&& fill) {
        stage_name = name;
        const bool hit = cache.has(name, key);
        log_line(options, "[" + name + "] " + (hit ? "cache hit " : "running ") + key.substr(0, 12));
        result.stages.push_back({name, key, hit});
        return cache.publish(name, key, fill);
    };

    try {
        const auto& dc = config.data;
        const auto data_key = Sha256()
                                  .field("data")
                                  .field(kToolVersion)
                                  .field(to_string(dc.task))
                                  .field(std::to_string(dc.train_samples))
                                  .field(std::to_string(dc.seed0))
                                  .field(std::to_string(dc.test_samples))
                                  .field(std::to_string(dc.test_seed0))
                                  .hex();
        const auto data_dir = stage("data", data_key, [&](const fs::path& dir) {
            const auto train = generate_stored(dc.seed0, dc.train_samples, dc.task, options.jobs);
            const auto test = generate_stored(dc.test_seed0, dc.test_samples, dc.task, options.jobs);
            write_dataset(dir / "train", train, manifest);
            write_dataset(dir / "test", test, manifest);
        });

        const auto& cc = config.codebook;
        const auto codebook_key = Sha256()
                                      .field("codebook")
                                      .field(kToolVersion)
                                      .field(to_string(dc.task))
                                      .field(std::to_string(dc.seed0))
                                      .field(nlohmann::json(to_json(config)["codebook"]).dump())
                                      .hex();
        const auto codebook_dir = stage("codebook", codebook_key, [&](const fs::path& dir) {
            const auto corpus = generate_stored(dc.seed0, cc.samples, dc.task, options.jobs);
            const auto masks = masks_of(corpus);
            const auto book = build_codebook(masks, cc);
            save_codebook_binary(dir / "codebook.bin", book);
            save_codebook_text(dir / "codebook.txt", book, comment);
        });
        const auto codebook = load_codebook(codebook_dir / "codebook.bin");
        const TextVocab text_vocab;
        const auto vocab = make_vocabulary(codebook.size, text_vocab);

        const auto train_samples = read_dataset(data_dir / "train");
        const auto test_samples = read_dataset(data_dir / "test");

        const auto encode_key = Sha256().field("encode").field(data_key).field(codebook_key).hex();
        const auto encode_dir = stage("encode", encode_key, [&](const fs::path& dir) {
            nlohmann::json j;
            j["manifest"] = manifest;
            j["rows"] = config.model.grid_rows;
            j["cols"] = config.model.grid_cols;
            auto& tokens = j["tokens"] = nlohmann::json::array();
            for (const auto& s : train_samples) tokens.push_back(flatten(encode_mask(s.sample.mask, codebook)));
            write_text(dir / "tokens.json", j.dump() + "\n");
        });
        const auto tokens_json = nlohmann::json::parse(read_text(encode_dir / "tokens.json"));
        const auto train_tokens = tokens_json.at("tokens").get<std::vector<std::vector<std::int32_t>>>();
        if (train_tokens.size() != train_samples.size()) throw RuntimeFailure("encoded token count mismatch");

        const auto train_key = Sha256()
                                   .field("train")
                                   .field(encode_key)
                                   .field(nlohmann::json(config.model).dump())
                                   .field(train_json_for_key(config.train).dump())
                                   .hex();
        const auto train_dir = stage("train", train_key, [&](const fs::path& dir) {
            std::vector<model::SequenceInput> data;
            data.reserve(train_samples.size());
            for (std::size_t i = 0; i < train_samples.size(); ++i) {
                auto in = to_sequence(train_samples[i].sample, text_vocab, vocab, nullptr);
                in.mask = train_tokens[i];
                data.push_back(std::move(in));
            }
            auto m = model::init_model<float>(config.model, vocab);
            auto opt = model::make_adam_state(m.params);
            auto tc = config.train;
            tc.jobs = options.jobs;
            model::TrainHooks hooks;
            hooks.on_epoch = [&](int e, double loss) {
                char buf[96];
                std::snprintf(buf, sizeof(buf), "[train] epoch %d/%d loss %.4f", e + 1, tc.epochs, loss);
                log_line(options, buf);
            };
            hooks.on_divergence = [&](const model::ModelParams<float>& last_good, long step) {
                model::Checkpoint ck{{config.model, vocab, last_good}, std::nullopt, codebook, config.train,
                                     {{"manifest", manifest}, {"diverged_at_step", step}}};
                model::save_checkpoint(dir / "last_good.ckpt", ck);
            };
            const auto tr = model::train(m, opt, tc, data, hooks);
            model::Checkpoint ck{m, opt, codebook, config.train, {{"manifest", manifest}, {"epoch_loss", tr.epoch_loss}}};
            model::save_checkpoint(dir / "model.ckpt", ck);
        });

        const auto generate_key = Sha256()
                                      .field("generate")
                                      .field(train_key)
                                      .field(data_key)
                                      .field(config.decode.to_string())
                                      .field(nlohmann::json(config.decode.temperature).dump())
                                      .field(std::to_string(config.decode.seed))
                                      .hex();
        const auto generate_dir = stage("generate", generate_key, [&](const fs::path& dir) {
            const auto ck = model::load_checkpoint(train_dir / "model.ckpt");
            std::vector<model::SequenceInput> prefixes;
            for (const auto& s : test_samples) prefixes.push_back(to_sequence(s.sample, text_vocab, ck.model.vocab, nullptr));
            const auto preds = generate_batch(ck.model, prefixes, config.decode, options.jobs);
            fs::create_directories(dir / "masks");
            for (std::size_t i = 0; i < preds.size(); ++i) {
                const auto mask = tokens_to_mask(preds[i], config.model.grid_rows, config.model.grid_cols, codebook);
                write_pgm_mask(dir / indexed("masks", i, "pgm"), mask, comment);
            }
            const nlohmann::json j = {{"manifest", manifest}, {"decode", config.decode.to_string()}, {"tokens", preds}};
            write_text(dir / "predictions.json", j.dump() + "\n");
        });

        const auto eval_key = Sha256()
                                  .field("eval")
                                  .field(generate_key)
                                  .field(nlohmann::json(to_json(config)["eval"]).dump())
                                  .hex();
        const auto eval_dir = stage("eval", eval_key, [&](const fs::path& dir) {
            std::vector<BinaryMask> preds;
            for (std::size_t i = 0; i < test_samples.size(); ++i) {
                preds.push_back(read_pgm_mask(generate_dir / indexed("masks", i, "pgm")));
            }
            const auto truth = masks_of(test_samples);
            const auto pairs = evaluate_masks(preds, truth, config.eval.connectivity);
            const nlohmann::json rows = [&] {
                nlohmann::json a = nlohmann::json::array();
                for (const auto& r : metric_rows(pairs, config.eval)) {
                    a.push_back({{"metric", r.metric},
                                 {"threshold", r.threshold ? nlohmann::json(*r.threshold) : nlohmann::json()},
                                 {"count", r.count},
                                 {"value", r.value ? nlohmann::json(*r.value) : nlohmann::json()}});
                }
                return a;
            }();
            write_text(dir / "metrics.json", rows.dump() + "\n");
        });

        stage_name = "report";
        const auto rows_json = nlohmann::json::parse(read_text(eval_dir / "metrics.json"));
        Report& report = result.report;
        report.manifest = manifest;
        report.config_hash = result.manifest.config_hash;
        report.decode = config.decode.to_string();
        for (const auto& r : rows_json) {
            MetricRow row;
            row.metric = r.at("metric").get<std::string>();
            if (!r.at("threshold").is_null()) row.threshold = r.at("threshold").get<double>();
            row.count = r.at("count").get<long>();
            if (!r.at("value").is_null()) row.value = r.at("value").get<double>();
            report.rows.push_back(std::move(row));
        }
    } catch (const ValidationError& e) {
        throw ValidationError("stage '" + stage_name + "' failed (manifest " + manifest + "): " + e.what());
    } catch (const std::exception& e) {
        throw RuntimeFailure("stage '" + stage_name + "' failed (manifest " + manifest + "): " + e.what());
    }
    return result;
}

}  // namespace maskgen::harness
