// maskgen: command-line front end.
//
// Exit codes: 0 success, 2 validation error, 3 runtime failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "maskgen/annotate.hpp"
#include "maskgen/codec.hpp"
#include "maskgen/dataset.hpp"
#include "maskgen/error.hpp"
#include "maskgen/harness/config.hpp"
#include "maskgen/harness/e2e.hpp"
#include "maskgen/harness/manifest.hpp"
#include "maskgen/harness/report.hpp"
#include "maskgen/hash.hpp"
#include "maskgen/model/analysis.hpp"
#include "maskgen/model/decode.hpp"
#include "maskgen/model/train.hpp"
#include "maskgen/pipeline.hpp"
#include "maskgen/rng.hpp"

namespace fs = std::filesystem;
using namespace maskgen;
using harness::RunConfig;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

struct Globals {
    std::optional<std::string> config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> cache_dir;
    int jobs = 1;
};

RunConfig load_run_config(const Globals& g, std::optional<std::string> preset = {}) {
    harness::ConfigOverrides o{g.seed, std::move(preset)};
    if (g.config) return harness::load_config(*g.config, o);
    auto c = harness::parse_config("", o);
    return c;
}

harness::RunManifest make_manifest(const std::string& command, const RunConfig& config,
                                   std::map<std::string, std::string> inputs = {}) {
    harness::RunManifest m;
    m.command = command;
    m.config_hash = harness::config_hash(config);
    m.inputs = std::move(inputs);
    m.seed = config.seed;
    m.started_at = harness::utc_timestamp();
    return m;
}

std::map<std::string, std::string> hash_dataset(const fs::path& dir) {
    return {{"dataset", sha256_file(dir / "manifest.jsonl")}};
}

void write_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeFailure("cannot write " + path.string());
    out << text;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot read " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void save_codebook_any(const fs::path& path, const Codebook& book, const std::string& manifest) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    if (path.extension() == ".bin") {
        save_codebook_binary(path, book);
    } else {
        save_codebook_text(path, book, "manifest " + manifest);
    }
}

void emit_report(const harness::Report& report, const std::optional<std::string>& out_dir) {
    if (out_dir) {
        const fs::path dir(*out_dir);
        write_file(dir / "report.json", harness::render_json(report));
        write_file(dir / "report.csv", harness::render_csv(report));
        write_file(dir / "report.txt", harness::render_table(report));
    }
    std::cout << harness::render_table(report);
}

int cmd_gen_data(const Globals& g, int n, const std::string& out, const std::string& task, std::uint64_t seed0) {
    const auto config = load_run_config(g);
    auto manifest = make_manifest("gen-data", config, {{"task", task}, {"n", std::to_string(n)}, {"seed0", std::to_string(seed0)}});
    const auto samples = harness::generate_stored(seed0, n, parse_task(task), g.jobs);
    harness::write_dataset(out, samples, manifest.hash());
    std::cerr << "wrote " << n << " samples to " << out << "\n";
    return 0;
}

int cmd_codebook(const Globals& g, const std::string& data, const std::string& out, std::optional<int> size,
                 std::optional<int> iters) {
    auto config = load_run_config(g);
    if (size) config.codebook.size = *size;
    if (iters) config.codebook.iterations = *iters;
    const auto samples = harness::read_dataset(data);
    std::vector<BinaryMask> masks;
    for (const auto& s : samples) masks.push_back(s.sample.mask);
    const auto book = harness::build_codebook(masks, config.codebook);
    const auto manifest = make_manifest("codebook", config, hash_dataset(data));
    save_codebook_any(out, book, manifest.hash());
    std::cerr << "codebook K=" << book.size << " after " << book.meta.iterations << " iterations -> " << out << "\n";
    return 0;
}

int cmd_encode(const Globals& g, const std::string& codebook_path, const std::optional<std::string>& mask,
               const std::optional<std::string>& data, const std::optional<std::string>& out) {
    const auto config = load_run_config(g);
    const auto book = load_codebook(codebook_path);
    std::map<std::string, std::string> inputs = {{"codebook", sha256_file(codebook_path)}};
    std::string text;
    if (mask) {
        inputs["mask"] = sha256_file(*mask);
        const auto manifest = make_manifest("encode", config, inputs);
        text = tokens_to_json(encode_mask(read_pgm_mask(*mask), book), manifest.hash()) + "\n";
    } else if (data) {
        inputs["dataset"] = sha256_file(fs::path(*data) / "manifest.jsonl");
        const auto manifest = make_manifest("encode", config, inputs);
        const auto samples = harness::read_dataset(*data);
        nlohmann::json j;
        j["manifest"] = manifest.hash();
        auto& arr = j["tokens"] = nlohmann::json::array();
        int rows = 0, cols = 0;
        for (const auto& s : samples) {
            const auto grid = encode_mask(s.sample.mask, book);
            rows = grid.rows;
            cols = grid.cols;
            arr.push_back(grid.indices);
        }
        j["rows"] = rows;
        j["cols"] = cols;
        text = j.dump() + "\n";
    } else {
        throw ValidationError("encode needs --mask or --data");
    }
    if (out) {
        write_file(*out, text);
    } else {
        std::cout << text;
    }
    return 0;
}

int cmd_train(const Globals& g, const std::string& data, const std::string& codebook_path,
              const std::optional<std::string>& preset, const std::string& out) {
    const auto config = load_run_config(g, preset);
    const auto book = load_codebook(codebook_path);
    auto inputs = hash_dataset(data);
    inputs["codebook"] = sha256_file(codebook_path);
    const auto manifest = make_manifest("train", config, inputs);
    const TextVocab text_vocab;
    const auto vocab = make_vocabulary(book.size, text_vocab);
    std::vector<model::SequenceInput> seqs;
    for (const auto& s : harness::read_dataset(data)) seqs.push_back(to_sequence(s.sample, text_vocab, vocab, &book));
    auto m = model::init_model<float>(config.model, vocab);
    auto opt = model::make_adam_state(m.params);
    auto tc = config.train;
    tc.jobs = g.jobs;
    model::TrainHooks hooks;
    hooks.on_epoch = [&](int e, double loss) {
        std::fprintf(stderr, "epoch %d/%d loss %.4f\n", e + 1, tc.epochs, loss);
    };
    hooks.on_divergence = [&](const model::ModelParams<float>& last_good, long step) {
        const fs::path p = fs::path(out).replace_extension(".last_good.ckpt");
        model::save_checkpoint(p, {{config.model, vocab, last_good}, std::nullopt, book, config.train,
                                   {{"manifest", manifest.hash()}, {"diverged_at_step", step}}});
        std::cerr << "diverged at step " << step << "; last good parameters saved to " << p << "\n";
    };
    const auto res = model::train(m, opt, tc, seqs, hooks);
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    model::save_checkpoint(out, {m, opt, book, config.train,
                                 {{"manifest", manifest.hash()}, {"epoch_loss", res.epoch_loss}}});
    std::cerr << "saved " << out << "\n";
    return 0;
}

model::DecodeStrategy decode_from(const RunConfig& config, const std::optional<std::string>& spec) {
    auto s = spec ? model::DecodeStrategy::parse(*spec) : config.decode;
    s.temperature = config.decode.temperature;
    s.seed = config.decode.seed;
    return s;
}

int cmd_infer(const Globals& g, const std::string& ckpt_path, const std::string& image, const std::string& text,
              const std::optional<std::string>& decode, const std::optional<std::string>& out) {
    const auto config = load_run_config(g);
    const auto ck = model::load_checkpoint(ckpt_path);
    if (!ck.codebook) throw ValidationError("checkpoint has no codebook");
    const TextVocab text_vocab;
    Sample sample;
    sample.image = read_image(image);
    sample.instruction = text;
    const auto prefix = to_sequence(sample, text_vocab, ck.model.vocab, nullptr);
    const auto strategy = decode_from(config, decode);
    const auto tokens = model::generate(ck.model, prefix, strategy);
    const auto manifest = make_manifest("infer", config,
                                        {{"checkpoint", sha256_file(ckpt_path)}, {"image", sha256_file(image)},
                                         {"text", sha256_hex(text)}, {"decode", strategy.to_string()}});
    const auto mask = tokens_to_mask(tokens, ck.model.config.grid_rows, ck.model.config.grid_cols, *ck.codebook);
    if (out) write_pgm_mask(*out, mask, "manifest " + manifest.hash());
    std::cout << nlohmann::json({{"manifest", manifest.hash()}, {"decode", strategy.to_string()}, {"tokens", tokens}}).dump()
              << "\n";
    return 0;
}

int cmd_eval(const Globals& g, const std::string& ckpt_path, const std::string& data,
             const std::optional<std::string>& decode, const std::optional<std::string>& out) {
    const auto config = load_run_config(g);
    const auto ck = model::load_checkpoint(ckpt_path);
    if (!ck.codebook) throw ValidationError("checkpoint has no codebook");
    const auto strategy = decode_from(config, decode);
    auto inputs = hash_dataset(data);
    inputs["checkpoint"] = sha256_file(ckpt_path);
    inputs["decode"] = strategy.to_string();
    const auto manifest = make_manifest("eval", config, inputs);
    const TextVocab text_vocab;
    const auto samples = harness::read_dataset(data);
    std::vector<model::SequenceInput> prefixes;
    std::vector<BinaryMask> truth;
    for (const auto& s : samples) {
        prefixes.push_back(to_sequence(s.sample, text_vocab, ck.model.vocab, nullptr));
        truth.push_back(s.sample.mask);
    }
    const auto preds = harness::generate_batch(ck.model, prefixes, strategy, g.jobs);
    std::vector<BinaryMask> masks;
    for (const auto& p : preds) {
        masks.push_back(tokens_to_mask(p, ck.model.config.grid_rows, ck.model.config.grid_cols, *ck.codebook));
    }
    const auto pairs = harness::evaluate_masks(masks, truth, config.eval.connectivity);
    harness::Report report{manifest.hash(), manifest.config_hash, strategy.to_string(),
                           harness::metric_rows(pairs, config.eval)};
    emit_report(report, out);
    return 0;
}

struct AnnotateArgs {
    std::string detections;
    std::string masks;
    std::string client = "stub";
    std::string out = "annotations";
    std::optional<std::string> record;
    bool no_verify = false;
    std::string nested_rule = "literal";
};

int cmd_annotate(const Globals& g, const AnnotateArgs& a) {
    using namespace maskgen::annotate;
    const auto config = load_run_config(g);
    std::map<std::string, std::vector<LabeledDetection>> per_image;
    std::vector<std::string> image_order;
    {
        std::ifstream in(a.detections);
        if (!in) throw ValidationError("cannot read " + a.detections);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const nlohmann::json::parse_error& e) {
                throw ValidationError(a.detections + ":" + std::to_string(lineno) + ": " + e.what());
            }
            auto det = detection_from_json(j);
            if (!per_image.contains(det.image)) image_order.push_back(det.image);
            per_image[det.image].push_back(std::move(det));
        }
    }
    FilterOptions filter;
    if (a.nested_rule == "literal") {
        filter.nested.rule = NestedRule::literal;
    } else if (a.nested_rule == "intersection-over-smaller") {
        filter.nested.rule = NestedRule::intersection_over_smaller;
    } else {
        throw ValidationError("--nested-rule must be literal or intersection-over-smaller");
    }
    auto base_client = make_client(a.client);
    std::optional<RecordingClient> recorder;
    CaptionClient* client = base_client.get();
    if (a.record) {
        recorder.emplace(*base_client);
        client = &*recorder;
    }
    std::map<std::string, std::string> inputs = {{"detections", sha256_file(a.detections)}, {"client", a.client}};
    if (a.client.starts_with("replay:")) inputs["transcript"] = sha256_file(a.client.substr(7));
    const auto manifest = make_manifest("annotate", config, inputs);

    const fs::path out(a.out);
    fs::create_directories(out / "semantic");
    const fs::path det_dir = fs::path(a.detections).parent_path();
    std::string instances_text, rejected_text;
    long accepted = 0, rejected = 0;
    for (const auto& image_name : image_order) {
        const auto& dets = per_image[image_name];
        const fs::path stem = fs::path(image_name).stem();
        const fs::path mask_dir = fs::path(a.masks) / stem;
        const auto index = nlohmann::json::parse(slurp(mask_dir / "index.json"));
        std::vector<MaskCandidate> candidates;
        for (const auto& [id, file] : index.items()) {
            candidates.push_back(MaskCandidate::from_mask(id, read_pgm_mask(mask_dir / file.get<std::string>())));
        }
        const auto labels = run_label_pipeline(dets, candidates, filter);
        std::vector<AnnotatedInstance> records = labels.instances;
        std::vector<Rejection> rejections = labels.rejected;
        for (const auto& sem : merge_semantic(labels.instances, candidates)) {
            const std::string file = stem.string() + "__" + sem.label + ".pgm";
            write_pgm_mask(out / "semantic" / file, sem.mask, "manifest " + manifest.hash());
            AnnotatedInstance s;
            s.image = image_name;
            s.mask_id = "semantic/" + file;
            s.label = sem.label;
            s.kind = InstanceKind::semantic;
            records.push_back(std::move(s));
        }
        const fs::path image_path = fs::path(image_name).is_absolute() ? fs::path(image_name) : det_dir / image_name;
        const auto image = read_image(image_path);
        ReferringOptions ro;
        ro.verify = !a.no_verify;
        auto text = run_referring_pipeline(image, labels.instances, candidates, *client, ro);
        for (auto& inst : text.instances) {
            inst.image = image_name;
            records.push_back(std::move(inst));
        }
        for (auto& r : text.rejected) {
            r.image = image_name;
            rejections.push_back(std::move(r));
        }
        for (const auto& r : records) {
            auto j = to_json(r);
            j["manifest"] = manifest.hash();
            instances_text += j.dump() + "\n";
            ++accepted;
        }
        for (const auto& r : rejections) {
            auto j = to_json(r);
            if (j["image"].get<std::string>().empty()) j["image"] = image_name;
            j["manifest"] = manifest.hash();
            rejected_text += j.dump() + "\n";
            ++rejected;
        }
    }
    write_file(out / "instances.jsonl", instances_text);
    write_file(out / "rejected.jsonl", rejected_text);
    if (recorder) recorder->save(*a.record);
    std::cerr << accepted << " records, " << rejected << " rejections -> " << out << "\n";
    return 0;
}

int cmd_attn(const Globals& g, const std::string& ckpt_path, const std::string& layer_spec,
             const std::optional<std::string>& image, const std::optional<std::string>& text, std::uint64_t scene_seed,
             const std::string& out, int probe_scenes) {
    const auto config = load_run_config(g);
    const auto ck = model::load_checkpoint(ckpt_path);
    int layer = -1;
    if (layer_spec != "last") {
        try {
            layer = std::stoi(layer_spec);
        } catch (const std::exception&) {
            throw ValidationError("--layer must be 'last' or an index");
        }
    }
    const TextVocab text_vocab;
    const auto make_input = [&](const Sample& s) {
        auto in = to_sequence(s, text_vocab, ck.model.vocab, nullptr);
        in.mask = model::generate(ck.model, in, model::DecodeStrategy{});
        return in;
    };
    Sample sample;
    if (image) {
        if (!text) throw ValidationError("--image needs --text");
        sample.image = read_image(*image);
        sample.instruction = *text;
    } else {
        sample = generate_sample(make_scene(scene_seed, Task::referring));
    }
    const auto map = model::attention_map(ck.model, make_input(sample), layer);
    const auto manifest = make_manifest("attn", config, {{"checkpoint", sha256_file(ckpt_path)}, {"layer", layer_spec}});
    model::write_attention_heatmap(out, map, "manifest " + manifest.hash());
    std::cerr << "layer " << map.layer << " heatmap " << map.weights.rows() << "x" << map.weights.cols() << " -> "
              << out << "\n";
    if (probe_scenes > 0) {
        std::vector<model::AttentionMap> maps;
        for (int i = 0; i < probe_scenes; ++i) {
            const auto s = generate_sample(make_scene(config.data.test_seed0 + static_cast<std::uint64_t>(i), Task::referring));
            maps.push_back(model::attention_map(ck.model, make_input(s), layer));
        }
        model::ProbeOptions po;
        po.seed = config.seed;
        const auto r = model::column_alignment_probe(maps, ck.model.config.grid_rows, ck.model.config.grid_cols, po);
        std::cout << nlohmann::json({{"queries", r.queries},
                                     {"aligned_rate", r.aligned_rate},
                                     {"baseline_rate", r.baseline_rate},
                                     {"p_value", r.p_value}})
                         .dump()
                  << "\n";
    }
    return 0;
}

int cmd_e2e(const Globals& g, const std::optional<std::string>& out) {
    const auto config = load_run_config(g);
    const harness::Cache cache(harness::resolve_cache_dir(
        g.cache_dir ? std::optional<fs::path>(*g.cache_dir) : std::nullopt));
    harness::RunOptions opt;
    opt.jobs = g.jobs;
    opt.log = &std::cerr;
    const auto res = harness::run_e2e(config, cache, opt);
    emit_report(res.report, out);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"maskgen: autoregressive mask generation toolkit"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--config", g.config, "TOML run configuration")->check(CLI::ExistingFile);
    app.add_option("--seed", g.seed, "root seed (re-derives every stage seed)");
    app.add_option("--cache-dir", g.cache_dir, "stage cache directory (default $MASKGEN_CACHE)");
    app.add_option("--jobs", g.jobs, "worker threads")->check(CLI::PositiveNumber);

    int n = 100;
    std::string out_dir, task = "referring";
    std::uint64_t seed0 = 0;
    auto* gen = app.add_subcommand("gen-data", "generate synthetic (image, instruction, mask) samples");
    gen->add_option("--n", n, "number of samples")->check(CLI::NonNegativeNumber);
    gen->add_option("--out", out_dir, "output directory")->required();
    gen->add_option("--task", task, "referring|semantic");
    gen->add_option("--seed0", seed0, "first sample seed");

    std::string data, cb_out;
    std::optional<int> cb_size, cb_iters;
    auto* cb = app.add_subcommand("codebook", "train a mask-patch codebook");
    cb->add_option("--data", data, "gen-data directory")->required();
    cb->add_option("--out", cb_out, "codebook file (.txt or .bin)")->required();
    cb->add_option("--size", cb_size, "codebook size K");
    cb->add_option("--iters", cb_iters, "maximum k-means iterations");

    std::string codebook_path;
    std::optional<std::string> enc_mask, enc_data, enc_out;
    auto* enc = app.add_subcommand("encode", "encode masks to token grids");
    enc->add_option("--codebook", codebook_path, "codebook file")->required();
    enc->add_option("--mask", enc_mask, "single PGM mask");
    enc->add_option("--data", enc_data, "gen-data directory");
    enc->add_option("--out", enc_out, "output JSON (default stdout)");

    std::string train_data, train_out = "model.ckpt";
    std::optional<std::string> preset;
    auto* tr = app.add_subcommand("train", "train the autoregressive model");
    tr->add_option("--data", train_data, "gen-data directory")->required();
    tr->add_option("--codebook", codebook_path, "codebook file")->required();
    tr->add_option("--preset", preset, "pretrain|finetune");
    tr->add_option("--out", train_out, "checkpoint path");

    std::string ckpt, image_path, text;
    std::optional<std::string> decode, infer_out;
    auto* inf = app.add_subcommand("infer", "generate a mask for one image and instruction");
    inf->add_option("--ckpt", ckpt, "checkpoint")->required();
    inf->add_option("--image", image_path, "PPM/PGM image")->required();
    inf->add_option("--text", text, "instruction")->required();
    inf->add_option("--decode", decode, "greedy|beam:B|topk:K|topp:P|random");
    inf->add_option("--out", infer_out, "output mask PGM");

    std::string eval_data;
    std::optional<std::string> report_out;
    auto* ev = app.add_subcommand("eval", "decode a dataset and report IoU/AHD metrics");
    ev->add_option("--ckpt", ckpt, "checkpoint")->required();
    ev->add_option("--data", eval_data, "gen-data directory")->required();
    ev->add_option("--decode", decode, "decoding strategy");
    ev->add_option("--out", report_out, "directory for report.json/csv/txt");

    AnnotateArgs ann;
    auto* an = app.add_subcommand("annotate", "filter detections and build referring/semantic records");
    an->add_option("--detections", ann.detections, "detections JSONL")->required();
    an->add_option("--masks", ann.masks, "directory of per-image mask folders with index.json")->required();
    an->add_option("--client", ann.client, "stub | replay:<transcript.json>");
    an->add_option("--out", ann.out, "output directory");
    an->add_option("--record", ann.record, "write the client transcript here");
    an->add_flag("--no-verify", ann.no_verify, "skip cross-verification");
    an->add_option("--nested-rule", ann.nested_rule, "literal|intersection-over-smaller");

    std::string layer = "last", attn_out = "attention.pgm";
    std::optional<std::string> attn_image, attn_text;
    std::uint64_t scene_seed = 0;
    int probe = 0;
    auto* at = app.add_subcommand("attn", "export a head-averaged attention heatmap");
    at->add_option("--ckpt", ckpt, "checkpoint")->required();
    at->add_option("--layer", layer, "'last' or a layer index");
    at->add_option("--image", attn_image, "input image (default: a generated scene)");
    at->add_option("--text", attn_text, "instruction for --image");
    at->add_option("--scene-seed", scene_seed, "seed of the generated scene");
    at->add_option("--out", attn_out, "heatmap PGM");
    at->add_option("--probe", probe, "also run the column-alignment probe on this many scenes");

    std::optional<std::string> e2e_out;
    auto* e2e = app.add_subcommand("e2e", "run the cached end-to-end pipeline");
    e2e->add_option("--out", e2e_out, "directory for report.json/csv/txt");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitValidation;
    }

    try {
        if (*gen) return cmd_gen_data(g, n, out_dir, task, seed0);
        if (*cb) return cmd_codebook(g, data, cb_out, cb_size, cb_iters);
        if (*enc) return cmd_encode(g, codebook_path, enc_mask, enc_data, enc_out);
        if (*tr) return cmd_train(g, train_data, codebook_path, preset, train_out);
        if (*inf) return cmd_infer(g, ckpt, image_path, text, decode, infer_out);
        if (*ev) return cmd_eval(g, ckpt, eval_data, decode, report_out);
        if (*an) return cmd_annotate(g, ann);
        if (*at) return cmd_attn(g, ckpt, layer, attn_image, attn_text, scene_seed, attn_out, probe);
        if (*e2e) return cmd_e2e(g, e2e_out);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return 0;
}
