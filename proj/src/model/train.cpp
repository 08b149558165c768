#include "maskgen/model/train.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <thread>

#include "maskgen/error.hpp"
#include "maskgen/rng.hpp"

namespace maskgen::model {

namespace {

constexpr char kMagic[7] = {'A', 'R', 'S', 'E', 'G', '1', '\0'};

std::vector<Mat<float>*> tensors_of(ModelParams<float>& p) {
    std::vector<Mat<float>*> out;
    p.visit([&](std::string_view, Mat<float>& m) { out.push_back(&m); });
    return out;
}

std::vector<const Mat<float>*> tensors_of(const ModelParams<float>& p) {
    std::vector<const Mat<float>*> out;
    p.visit([&](std::string_view, const Mat<float>& m) { out.push_back(&m); });
    return out;
}

bool grads_finite(const ModelParams<float>& g) {
    bool ok = true;
    g.visit([&](std::string_view, const Mat<float>& m) { ok = ok && m.allFinite(); });
    return ok;
}

}  // namespace

double scheduled_lr(const TrainConfig& config, long step, long total_steps) {
    if (total_steps <= 0) return config.lr;
    const long warmup = static_cast<long>(std::ceil(config.warmup_fraction * static_cast<double>(total_steps)));
    if (step < warmup) return config.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const long decay_steps = total_steps - warmup;
    if (decay_steps <= 0) return config.lr;
    const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(decay_steps));
    return config.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamState make_adam_state(const ModelParams<float>& params) {
    return AdamState{params.zeros_like(), params.zeros_like(), 0};
}

void adamw_update(ModelParams<float>& params, const ModelParams<float>& grads, AdamState& state,
                  const TrainConfig& config, double lr) {
    ++state.step;
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
    const float b1 = static_cast<float>(config.beta1), b2 = static_cast<float>(config.beta2);
    const float step_size = static_cast<float>(lr / bc1);
    const float inv_bc2_sqrt = static_cast<float>(1.0 / std::sqrt(bc2));
    const float eps = static_cast<float>(config.adam_eps);
    const float decay = static_cast<float>(lr * config.weight_decay);

    std::vector<std::string> names;
    params.visit([&](std::string_view n, const Mat<float>&) { names.emplace_back(n); });
    auto p = tensors_of(params);
    auto m = tensors_of(state.m);
    auto v = tensors_of(state.v);
    const auto g = tensors_of(grads);
    for (std::size_t t = 0; t < p.size(); ++t) {
        const bool decayed = config.weight_decay > 0.0 && is_decayed(names[t]);
        float* pd = p[t]->data();
        float* md = m[t]->data();
        float* vd = v[t]->data();
        const float* gd = g[t]->data();
        for (Eigen::Index i = 0; i < p[t]->size(); ++i) {
            md[i] = b1 * md[i] + (1.0f - b1) * gd[i];
            vd[i] = b2 * vd[i] + (1.0f - b2) * gd[i] * gd[i];
            if (decayed) pd[i] -= decay * pd[i];
            pd[i] -= step_size * md[i] / (std::sqrt(vd[i]) * inv_bc2_sqrt + eps);
        }
    }
}

double clip_grad_norm(ModelParams<float>& grads, double max_norm) {
    double sq = 0.0;
    grads.visit([&](std::string_view, const Mat<float>& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i) sq += static_cast<double>(m.data()[i]) * m.data()[i];
    });
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const float s = static_cast<float>(max_norm / (norm + 1e-6));
        grads.visit([&](std::string_view, Mat<float>& m) { m *= s; });
    }
    return norm;
}

TrainResult train(Model<float>& model, AdamState& optimizer, const TrainConfig& config,
                  std::span<const SequenceInput> data, const TrainHooks& hooks) {
    config.validate();
    if (data.empty()) throw ValidationError("training set is empty");
    const auto n = data.size();
    const auto batch = std::min<std::size_t>(static_cast<std::size_t>(config.batch), n);
    const long steps_per_epoch = static_cast<long>((n + batch - 1) / batch);
    const long total_steps = steps_per_epoch * config.epochs;

    std::vector<ModelParams<float>> item_grads(batch, model.params.zeros_like());
    std::vector<double> item_loss(batch, 0.0);
    std::vector<std::string> item_error(batch);
    ModelParams<float> grads = model.params.zeros_like();
    ModelParams<float> before_step = model.params;

    Rng order_rng(derive_seed(config.seed, "train/order"));
    std::vector<std::size_t> order(n);
    TrainResult result;
    long step = 0;
    const unsigned jobs = static_cast<unsigned>(std::max(1, config.jobs));

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        order_rng.shuffle(std::span<std::size_t>(order));
        double epoch_sum = 0.0;
        for (std::size_t start = 0; start < n; start += batch) {
            const std::size_t count = std::min(batch, n - start);
            const auto work = [&](unsigned worker) {
                for (std::size_t i = worker; i < count; i += jobs) {
                    item_grads[i].visit([](std::string_view, Mat<float>& m) { m.setZero(); });
                    try {
                        item_loss[i] = loss_and_grad(model, data[order[start + i]], item_grads[i]);
                        item_error[i].clear();
                    } catch (const RuntimeFailure& e) {
                        item_loss[i] = std::numeric_limits<double>::quiet_NaN();
                        item_error[i] = e.what();
                    }
                }
            };
            if (jobs > 1 && count > 1) {
                std::vector<std::thread> pool;
                for (unsigned w = 0; w < std::min<std::size_t>(jobs, count); ++w) pool.emplace_back(work, w);
                for (auto& t : pool) t.join();
            } else {
                work(0);
            }

            grads.visit([](std::string_view, Mat<float>& m) { m.setZero(); });
            auto gt = tensors_of(grads);
            double loss = 0.0;
            for (std::size_t i = 0; i < count; ++i) {
                loss += item_loss[i];
                const auto it = tensors_of(std::as_const(item_grads[i]));
                for (std::size_t t = 0; t < gt.size(); ++t) *gt[t] += *it[t];
            }
            loss /= static_cast<double>(count);
            const float inv = 1.0f / static_cast<float>(count);
            grads.visit([&](std::string_view, Mat<float>& m) { m *= inv; });

            if (!std::isfinite(loss) || !grads_finite(grads)) {
                if (hooks.on_divergence) hooks.on_divergence(before_step, step);
                std::string why = "training diverged at step " + std::to_string(step);
                for (const auto& e : item_error) {
                    if (!e.empty()) {
                        why += " (" + e + ")";
                        break;
                    }
                }
                throw RuntimeFailure(why);
            }
            clip_grad_norm(grads, config.grad_clip);
            before_step = model.params;
            adamw_update(model.params, grads, optimizer, config, scheduled_lr(config, step, total_steps));
            result.step_loss.push_back(loss);
            epoch_sum += loss * static_cast<double>(count);
            ++step;
        }
        const double mean = epoch_sum / static_cast<double>(n);
        result.epoch_loss.push_back(mean);
        if (hooks.on_epoch) hooks.on_epoch(epoch, mean);
    }
    result.steps = step;
    return result;
}

double evaluate_loss(const Model<float>& model, std::span<const SequenceInput> data) {
    if (data.empty()) throw ValidationError("evaluation set is empty");
    double sum = 0.0;
    for (const auto& s : data) {
        const auto layout = make_layout(s, model.config, model.vocab);
        ForwardOptions opt;
        const auto res = forward(model, s, opt);
        sum += mask_loss<float>(res.logits, layout, s.mask);
    }
    return sum / static_cast<double>(data.size());
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    static_assert(std::endian::native == std::endian::little, "big-endian hosts unsupported");
    nlohmann::json header;
    header["format"] = "ARSEG1";
    header["config"] = ckpt.model.config;
    header["vocab"] = ckpt.model.vocab;
    if (ckpt.train_config) header["train"] = *ckpt.train_config;
    if (ckpt.optimizer) header["optimizer_step"] = ckpt.optimizer->step;
    header["meta"] = ckpt.meta;

    std::vector<std::pair<std::string, const Mat<float>*>> entries;
    ckpt.model.params.visit([&](std::string_view n, const Mat<float>& m) { entries.emplace_back(std::string(n), &m); });
    if (ckpt.optimizer) {
        ckpt.optimizer->m.visit([&](std::string_view n, const Mat<float>& m) { entries.emplace_back("adam.m." + std::string(n), &m); });
        ckpt.optimizer->v.visit([&](std::string_view n, const Mat<float>& m) { entries.emplace_back("adam.v." + std::string(n), &m); });
    }
    Mat<float> codebook;
    if (ckpt.codebook) {
        codebook = Eigen::Map<const Mat<float>>(ckpt.codebook->vectors.data(), ckpt.codebook->size, ckpt.codebook->dim);
        entries.emplace_back("codebook", &codebook);
        header["codebook_meta"] = {{"seed", ckpt.codebook->meta.seed},
                                   {"iterations", ckpt.codebook->meta.iterations},
                                   {"sample_count", ckpt.codebook->meta.sample_count}};
    }
    auto manifest = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, m] : entries) {
        manifest.push_back({{"name", name}, {"shape", {m->rows(), m->cols()}}, {"offset", offset}});
        offset += static_cast<std::uint64_t>(m->size());
    }
    header["tensors"] = manifest;
    const std::string text = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeFailure("cannot open " + path.string() + " for writing");
    out.write(kMagic, sizeof(kMagic));
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, m] : entries) {
        out.write(reinterpret_cast<const char*>(m->data()), static_cast<std::streamsize>(m->size() * sizeof(float)));
    }
    if (!out) throw RuntimeFailure("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open checkpoint " + path.string());
    char magic[sizeof(kMagic)] = {};
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw ValidationError("not an ARSEG1 checkpoint: " + path.string());
    }
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || len > (1u << 30)) throw ValidationError("corrupt checkpoint header length");
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw ValidationError("truncated checkpoint header");
    const auto payload_start = in.tellg();

    Checkpoint ckpt;
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
        const auto config = header.at("config").get<ModelConfig>();
        const auto vocab = header.at("vocab").get<Vocabulary>();
        ckpt.model = init_model<float>(config, vocab);
        if (header.contains("train")) ckpt.train_config = header.at("train").get<TrainConfig>();
        if (header.contains("meta")) ckpt.meta = header.at("meta");
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed checkpoint header: ") + e.what());
    }

    std::map<std::string, nlohmann::json> index;
    for (const auto& t : header.at("tensors")) index[t.at("name").get<std::string>()] = t;
    const auto read_tensor = [&](const std::string& name, Mat<float>& dst) {
        const auto it = index.find(name);
        if (it == index.end()) throw ValidationError("checkpoint lacks tensor " + name);
        const auto shape = it->second.at("shape").get<std::vector<long>>();
        if (shape.size() != 2 || shape[0] != dst.rows() || shape[1] != dst.cols()) {
            throw ValidationError("tensor " + name + " has unexpected shape");
        }
        const auto offset = it->second.at("offset").get<std::uint64_t>();
        in.seekg(payload_start + static_cast<std::streamoff>(offset * sizeof(float)));
        in.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(dst.size() * sizeof(float)));
        if (!in) throw ValidationError("truncated checkpoint payload at " + name);
    };
    ckpt.model.params.visit([&](std::string_view n, Mat<float>& m) { read_tensor(std::string(n), m); });
    if (header.contains("optimizer_step")) {
        AdamState st = make_adam_state(ckpt.model.params);
        st.step = header.at("optimizer_step").get<long>();
        st.m.visit([&](std::string_view n, Mat<float>& m) { read_tensor("adam.m." + std::string(n), m); });
        st.v.visit([&](std::string_view n, Mat<float>& m) { read_tensor("adam.v." + std::string(n), m); });
        ckpt.optimizer = std::move(st);
    }
    if (index.contains("codebook")) {
        const auto shape = index["codebook"].at("shape").get<std::vector<long>>();
        Mat<float> cb(shape.at(0), shape.at(1));
        read_tensor("codebook", cb);
        Codebook book;
        book.size = static_cast<int>(cb.rows());
        book.dim = static_cast<int>(cb.cols());
        book.vectors.assign(cb.data(), cb.data() + cb.size());
        if (header.contains("codebook_meta")) {
            const auto& m = header.at("codebook_meta");
            book.meta.seed = m.at("seed").get<std::uint64_t>();
            book.meta.iterations = m.at("iterations").get<int>();
            book.meta.sample_count = m.at("sample_count").get<std::int64_t>();
        }
        book.validate();
        ckpt.codebook = std::move(book);
    }
    return ckpt;
}

}  // namespace maskgen::model
