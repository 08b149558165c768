#include "maskgen/model/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "maskgen/error.hpp"
#include "maskgen/rng.hpp"

namespace maskgen::model {

namespace {

template <typename T>
struct RopeTable {
    Mat<T> cos;  // positions x head_dim/2
    Mat<T> sin;
};

template <typename T>
RopeTable<T> rope_table(const ModelConfig& cfg, int first_pos, int count) {
    const int half = cfg.head_dim() / 2;
    RopeTable<T> t{Mat<T>(count, half), Mat<T>(count, half)};
    for (int i = 0; i < half; ++i) {
        const double inv_freq = std::pow(cfg.rope_base, -2.0 * i / cfg.head_dim());
        for (int p = 0; p < count; ++p) {
            const double angle = static_cast<double>(first_pos + p) * inv_freq;
            t.cos(p, i) = static_cast<T>(std::cos(angle));
            t.sin(p, i) = static_cast<T>(std::sin(angle));
        }
    }
    return t;
}

// Rotates consecutive (even, odd) pairs of every head; `sign` = -1 applies the
// inverse rotation (used by backward).
template <typename T, typename Rows>
void apply_rope(Rows&& m, const RopeTable<T>& table, int heads, int head_dim, int table_row0,
                T sign) {
    const int half = head_dim / 2;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        const auto tr = static_cast<Eigen::Index>(table_row0) + r;
        for (int h = 0; h < heads; ++h) {
            for (int i = 0; i < half; ++i) {
                const Eigen::Index c = h * head_dim + 2 * i;
                const T cs = table.cos(tr, i), sn = sign * table.sin(tr, i);
                const T a = m(r, c), b = m(r, c + 1);
                m(r, c) = a * cs - b * sn;
                m(r, c + 1) = a * sn + b * cs;
            }
        }
    }
}

template <typename T>
void rms_norm(const Mat<T>& x, const Mat<T>& gain, double eps, Mat<T>& out, Col<T>& inv_rms) {
    const auto n = x.cols();
    out.resize(x.rows(), n);
    inv_rms.resize(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const T ms = x.row(r).squaredNorm() / static_cast<T>(n);
        const T inv = T(1) / std::sqrt(ms + static_cast<T>(eps));
        inv_rms[r] = inv;
        out.row(r) = (x.row(r) * inv).cwiseProduct(gain.row(0));
    }
}

// dx for y = gain * x * inv_rms; accumulates dgain.
template <typename T>
Mat<T> rms_norm_backward(const Mat<T>& x, const Mat<T>& gain, const Col<T>& inv_rms,
                         const Mat<T>& dy, Mat<T>& dgain) {
    const auto n = static_cast<T>(x.cols());
    Mat<T> dx(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const T inv = inv_rms[r];
        dgain.row(0) += dy.row(r).cwiseProduct(x.row(r)) * inv;
        const auto gdy = dy.row(r).cwiseProduct(gain.row(0));
        const T dot = gdy.dot(x.row(r));
        dx.row(r) = gdy * inv - x.row(r) * (inv * inv * inv * dot / n);
    }
    return dx;
}

template <typename T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
    const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    return cdf + x * pdf;
}

template <typename T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
bool all_finite(const Mat<T>& m) {
    return m.allFinite();
}

// Row-wise softmax where row i only sees columns <= i.
template <typename T>
Mat<T> causal_softmax(const Mat<T>& scores) {
    const auto rows = scores.rows();
    Mat<T> p = Mat<T>::Zero(rows, scores.cols());
    for (Eigen::Index i = 0; i < rows; ++i) {
        const auto n = i + 1;
        const T mx = scores.row(i).head(n).maxCoeff();
        T sum = 0;
        for (Eigen::Index j = 0; j < n; ++j) {
            const T e = std::exp(scores(i, j) - mx);
            p(i, j) = e;
            sum += e;
        }
        p.row(i).head(n) /= sum;
    }
    return p;
}

template <typename T>
Mat<T> patch_matrix(const SequenceInput& input, int dim) {
    Mat<T> m(input.image_patches, dim);
    for (int r = 0; r < input.image_patches; ++r) {
        for (int c = 0; c < dim; ++c) {
            m(r, c) = static_cast<T>(input.image[static_cast<std::size_t>(r) * dim + c]);
        }
    }
    return m;
}

template <typename T>
void fill_normal(Mat<T>& m, Rng& rng, double std) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.normal() * std);
}

}  // namespace

bool is_decayed(std::string_view name) {
    return !(name.ends_with("norm") || name == "adapt.b1" || name == "adapt.b2");
}

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
    std::size_t n = 0;
    visit([&](std::string_view, const Mat<T>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
}

template <typename T>
ModelParams<T> ModelParams<T>::zeros_like() const {
    ModelParams<T> z = *this;
    z.visit([](std::string_view, Mat<T>& m) { m.setZero(); });
    return z;
}

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast() const {
    ModelParams<U> out;
    out.tok_emb = tok_emb.template cast<U>();
    out.adapt_w1 = adapt_w1.template cast<U>();
    out.adapt_b1 = adapt_b1.template cast<U>();
    out.adapt_w2 = adapt_w2.template cast<U>();
    out.adapt_b2 = adapt_b2.template cast<U>();
    for (const auto& b : blocks) {
        BlockParams<U> o;
        o.attn_norm = b.attn_norm.template cast<U>();
        o.wq = b.wq.template cast<U>();
        o.wk = b.wk.template cast<U>();
        o.wv = b.wv.template cast<U>();
        o.wo = b.wo.template cast<U>();
        o.ffn_norm = b.ffn_norm.template cast<U>();
        o.w_gate = b.w_gate.template cast<U>();
        o.w_up = b.w_up.template cast<U>();
        o.w_down = b.w_down.template cast<U>();
        out.blocks.push_back(std::move(o));
    }
    out.final_norm = final_norm.template cast<U>();
    out.head = head.template cast<U>();
    return out;
}

template <typename T>
Model<T> init_model(const ModelConfig& config, const Vocabulary& vocab) {
    config.validate();
    if (vocab.mask_size < 2) throw ValidationError("vocabulary needs at least 2 mask tokens");
    const int h = config.hidden, f = config.ffn_width(), a = config.adaptor_width();
    ModelParams<double> p;
    p.tok_emb.resize(vocab.total(), h);
    p.adapt_w1.resize(config.image_patch_dim, a);
    p.adapt_b1 = Mat<double>::Zero(1, a);
    p.adapt_w2.resize(a, h);
    p.adapt_b2 = Mat<double>::Zero(1, h);
    p.blocks.resize(static_cast<std::size_t>(config.layers));
    for (auto& b : p.blocks) {
        b.attn_norm = Mat<double>::Ones(1, h);
        b.wq.resize(h, h);
        b.wk.resize(h, h);
        b.wv.resize(h, h);
        b.wo.resize(h, h);
        b.ffn_norm = Mat<double>::Ones(1, h);
        b.w_gate.resize(h, f);
        b.w_up.resize(h, f);
        b.w_down.resize(f, h);
    }
    p.final_norm = Mat<double>::Ones(1, h);
    p.head.resize(h, vocab.total());
    Rng rng(derive_seed(config.seed, "model/init"));
    p.visit([&](std::string_view name, Mat<double>& m) {
        if (is_decayed(name)) fill_normal(m, rng, config.init_std);
    });
    Model<T> model{config, vocab, {}};
    if constexpr (std::is_same_v<T, double>) {
        model.params = std::move(p);
    } else {
        model.params = p.template cast<T>();
    }
    return model;
}

SequenceLayout make_layout(const SequenceInput& input, const ModelConfig& config,
                           const Vocabulary& vocab) {
    for (auto id : input.text) {
        if (!vocab.is_text(id)) throw ValidationError("id " + std::to_string(id) + " is not a text token");
    }
    if (input.image_patches < 1) throw ValidationError("sequence needs at least one image patch");
    if (input.image.size() != static_cast<std::size_t>(input.image_patches) * config.image_patch_dim) {
        throw ValidationError("image buffer holds " + std::to_string(input.image.size()) +
                              " values, expected " + std::to_string(input.image_patches) + " x " +
                              std::to_string(config.image_patch_dim));
    }
    if (!input.mask.empty() && static_cast<int>(input.mask.size()) != config.mask_length()) {
        throw ValidationError("mask span has " + std::to_string(input.mask.size()) +
                              " tokens, expected " + std::to_string(config.mask_length()));
    }
    for (std::size_t i = 0; i < input.mask.size(); ++i) {
        if (!vocab.is_mask(input.mask[i])) {
            throw ValidationError("mask token " + std::to_string(input.mask[i]) + " at " +
                                  std::to_string(i) + " outside [0," +
                                  std::to_string(vocab.mask_size) + ")");
        }
    }
    SequenceLayout l;
    l.text = {0, static_cast<int>(input.text.size())};
    l.boi_pos = l.text.end();
    l.image = {l.boi_pos + 1, input.image_patches};
    l.bom_pos = l.image.end();
    l.mask = {l.bom_pos + 1, static_cast<int>(input.mask.size())};
    l.total_len = l.mask.end();
    return l;
}

std::vector<float> image_to_patches(const RgbImage& image, int patch_size) {
    if (patch_size < 1 || image.height() % patch_size != 0 || image.width() % patch_size != 0) {
        throw ValidationError("image " + std::to_string(image.height()) + "x" +
                              std::to_string(image.width()) + " not divisible by patch size " +
                              std::to_string(patch_size));
    }
    const int gh = image.height() / patch_size, gw = image.width() / patch_size;
    std::vector<float> out;
    out.reserve(static_cast<std::size_t>(image.height()) * image.width() * 3);
    for (int i = 0; i < gh; ++i) {
        for (int j = 0; j < gw; ++j) {
            for (int r = 0; r < patch_size; ++r) {
                for (int c = 0; c < patch_size; ++c) {
                    const auto px = image.at(i * patch_size + r, j * patch_size + c);
                    for (auto ch : px) out.push_back(static_cast<float>(ch) / 127.5f - 1.0f);
                }
            }
        }
    }
    return out;
}

template <typename T>
Embedded<T> build_sequence(const Model<T>& model, const SequenceInput& input) {
    const auto& p = model.params;
    Embedded<T> e;
    e.layout = make_layout(input, model.config, model.vocab);
    const auto& l = e.layout;
    e.x.resize(l.total_len, model.config.hidden);
    for (int i = 0; i < l.text.length; ++i) e.x.row(l.text.begin + i) = p.tok_emb.row(input.text[static_cast<std::size_t>(i)]);
    e.x.row(l.boi_pos) = p.tok_emb.row(model.vocab.boi());
    const Mat<T> patches = patch_matrix<T>(input, model.config.image_patch_dim);
    e.adaptor_pre = patches * p.adapt_w1;
    e.adaptor_pre.rowwise() += p.adapt_b1.row(0);
    e.adaptor_act = e.adaptor_pre.unaryExpr([](T v) { return gelu(v); });
    Mat<T> img = e.adaptor_act * p.adapt_w2;
    img.rowwise() += p.adapt_b2.row(0);
    e.x.middleRows(l.image.begin, l.image.length) = img;
    e.x.row(l.bom_pos) = p.tok_emb.row(model.vocab.bom());
    for (int i = 0; i < l.mask.length; ++i) e.x.row(l.mask.begin + i) = p.tok_emb.row(input.mask[static_cast<std::size_t>(i)]);
    return e;
}

template <typename T>
ForwardResult<T> forward(const Model<T>& model, const SequenceInput& input,
                         const ForwardOptions& options) {
    const auto& cfg = model.config;
    const auto& params = model.params;
    ForwardResult<T> res;
    res.embedded = build_sequence(model, input);
    const int len = res.embedded.layout.total_len;
    const int hd = cfg.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    const auto rope = rope_table<T>(cfg, options.position_offset, len);

    Mat<T> x = res.embedded.x;
    if (options.keep_cache) {
        res.layers.resize(params.blocks.size());
        res.scores.resize(params.blocks.size());
    }
    for (std::size_t li = 0; li < params.blocks.size(); ++li) {
        const auto& b = params.blocks[li];
        LayerCache<T> c;
        c.x_in = x;
        rms_norm(x, b.attn_norm, cfg.norm_eps, c.xn1, c.inv_rms1);
        c.q.noalias() = c.xn1 * b.wq;
        c.k.noalias() = c.xn1 * b.wk;
        c.v.noalias() = c.xn1 * b.wv;
        apply_rope(c.q, rope, cfg.heads, hd, 0, T(1));
        apply_rope(c.k, rope, cfg.heads, hd, 0, T(1));
        c.attn_cat.resize(len, cfg.hidden);
        for (int h = 0; h < cfg.heads; ++h) {
            Mat<T> s = c.q.middleCols(h * hd, hd) * c.k.middleCols(h * hd, hd).transpose();
            s *= scale;
            Mat<T> prob = causal_softmax(s);
            c.attn_cat.middleCols(h * hd, hd).noalias() = prob * c.v.middleCols(h * hd, hd);
            if (options.keep_cache) {
                c.probs.push_back(std::move(prob));
                res.scores[li].push_back(std::move(s));
            }
        }
        x.noalias() += c.attn_cat * b.wo;
        c.x_mid = x;
        rms_norm(x, b.ffn_norm, cfg.norm_eps, c.xn2, c.inv_rms2);
        c.gate.noalias() = c.xn2 * b.w_gate;
        c.up.noalias() = c.xn2 * b.w_up;
        c.act = c.gate.unaryExpr([](T g) { return g * sigmoid(g); }).cwiseProduct(c.up);
        x.noalias() += c.act * b.w_down;
        if (!all_finite(x)) {
            throw RuntimeFailure("non-finite activations in layer " + std::to_string(li));
        }
        if (options.keep_cache) res.layers[li] = std::move(c);
    }
    res.x_final = x;
    rms_norm(x, params.final_norm, cfg.norm_eps, res.xn_final, res.inv_rms_final);
    res.logit_begin = std::clamp(options.logit_begin, 0, len);
    const int rows = options.logit_rows < 0 ? len - res.logit_begin
                                            : std::min(options.logit_rows, len - res.logit_begin);
    res.logits.noalias() = res.xn_final.middleRows(res.logit_begin, rows) * params.head;
    if (!all_finite(res.logits)) throw RuntimeFailure("non-finite logits at the output head");
    return res;
}

template <typename T>
T mask_loss(const Mat<T>& logits, const SequenceLayout& layout,
            std::span<const std::int32_t> targets) {
    if (static_cast<int>(targets.size()) != layout.mask.length || targets.empty()) {
        throw ValidationError("target length " + std::to_string(targets.size()) +
                              " does not match mask span " + std::to_string(layout.mask.length));
    }
    if (logits.rows() != layout.total_len) throw ValidationError("logits must cover the whole sequence");
    T total = 0;
    for (std::size_t t = 0; t < targets.size(); ++t) {
        const auto row = logits.row(layout.bom_pos + static_cast<Eigen::Index>(t));
        const T mx = row.maxCoeff();
        const T lse = mx + std::log((row.array() - mx).exp().sum());
        total += lse - row(targets[t]);
    }
    return total / static_cast<T>(targets.size());
}

template <typename T>
Mat<T> mask_loss_grad(const Mat<T>& logits, const SequenceLayout& layout,
                      std::span<const std::int32_t> targets) {
    if (static_cast<int>(targets.size()) != layout.mask.length || targets.empty()) {
        throw ValidationError("target length does not match mask span");
    }
    Mat<T> g = Mat<T>::Zero(logits.rows(), logits.cols());
    const T inv_n = T(1) / static_cast<T>(targets.size());
    for (std::size_t t = 0; t < targets.size(); ++t) {
        const auto r = layout.bom_pos + static_cast<Eigen::Index>(t);
        const T mx = logits.row(r).maxCoeff();
        auto e = (logits.row(r).array() - mx).exp();
        g.row(r) = (e / e.sum()).matrix() * inv_n;
        g(r, targets[t]) -= inv_n;
    }
    return g;
}

template <typename T>
T loss_and_grad(const Model<T>& model, const SequenceInput& input, ModelParams<T>& grads) {
    const auto layout = make_layout(input, model.config, model.vocab);
    if (layout.mask.length == 0) throw ValidationError("training sequence has no mask tokens");
    ForwardOptions opt;
    opt.keep_cache = true;
    opt.logit_begin = layout.bom_pos;
    opt.logit_rows = layout.mask.length;
    const auto res = forward(model, input, opt);
    const auto n = static_cast<T>(layout.mask.length);
    T loss = 0;
    Mat<T> dlogits(res.logits.rows(), res.logits.cols());
    for (Eigen::Index t = 0; t < res.logits.rows(); ++t) {
        const auto row = res.logits.row(t);
        const T mx = row.maxCoeff();
        auto e = (row.array() - mx).exp();
        const T sum = e.sum();
        const auto target = input.mask[static_cast<std::size_t>(t)];
        loss += mx + std::log(sum) - row(target);
        dlogits.row(t) = (e / sum).matrix() / n;
        dlogits(t, target) -= T(1) / n;
    }
    backward(model, input, res, dlogits, grads);
    return loss / n;
}

template <typename T>
void backward(const Model<T>& model, const SequenceInput& input, const ForwardResult<T>& res,
              const Mat<T>& dlogits, ModelParams<T>& grads) {
    const auto& cfg = model.config;
    const auto& params = model.params;
    const auto& layout = res.embedded.layout;
    const int len = layout.total_len;
    const int hd = cfg.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    if (res.layers.size() != params.blocks.size()) {
        throw ValidationError("backward needs a forward pass run with keep_cache");
    }
    if (dlogits.rows() != res.logits.rows() || dlogits.cols() != res.logits.cols()) {
        throw ValidationError("dlogits shape does not match the forward logits");
    }

    // Output head and final norm.
    Mat<T> dxn = Mat<T>::Zero(len, cfg.hidden);
    grads.head.noalias() += res.xn_final.middleRows(res.logit_begin, dlogits.rows()).transpose() * dlogits;
    dxn.middleRows(res.logit_begin, dlogits.rows()).noalias() = dlogits * params.head.transpose();
    Mat<T> dx = rms_norm_backward(res.x_final, params.final_norm, res.inv_rms_final, dxn, grads.final_norm);

    // The position offset is not stored; backward assumes offset 0.
    const auto rope = rope_table<T>(cfg, 0, len);
    for (std::size_t li = params.blocks.size(); li-- > 0;) {
        const auto& b = params.blocks[li];
        auto& g = grads.blocks[li];
        const auto& c = res.layers[li];

        // SwiGLU feed-forward.
        g.w_down.noalias() += c.act.transpose() * dx;
        const Mat<T> dact = dx * b.w_down.transpose();
        Mat<T> dgate(len, cfg.ffn_width()), dup(len, cfg.ffn_width());
        for (Eigen::Index i = 0; i < c.gate.size(); ++i) {
            const T a = c.gate.data()[i];
            const T s = sigmoid(a);
            const T silu = a * s;
            dup.data()[i] = dact.data()[i] * silu;
            dgate.data()[i] = dact.data()[i] * c.up.data()[i] * s * (T(1) + a * (T(1) - s));
        }
        g.w_gate.noalias() += c.xn2.transpose() * dgate;
        g.w_up.noalias() += c.xn2.transpose() * dup;
        Mat<T> dxn2 = dgate * b.w_gate.transpose();
        dxn2.noalias() += dup * b.w_up.transpose();
        dx += rms_norm_backward(c.x_mid, b.ffn_norm, c.inv_rms2, dxn2, g.ffn_norm);

        // Attention.
        g.wo.noalias() += c.attn_cat.transpose() * dx;
        const Mat<T> dcat = dx * b.wo.transpose();
        Mat<T> dq(len, cfg.hidden), dk(len, cfg.hidden), dv(len, cfg.hidden);
        for (int h = 0; h < cfg.heads; ++h) {
            const auto& prob = c.probs[static_cast<std::size_t>(h)];
            const Mat<T> dout = dcat.middleCols(h * hd, hd);
            dv.middleCols(h * hd, hd).noalias() = prob.transpose() * dout;
            const Mat<T> dprob = dout * c.v.middleCols(h * hd, hd).transpose();
            Mat<T> ds = Mat<T>::Zero(len, len);
            for (Eigen::Index i = 0; i < len; ++i) {
                const auto n = i + 1;
                const T dot = prob.row(i).head(n).dot(dprob.row(i).head(n));
                ds.row(i).head(n) = prob.row(i).head(n).cwiseProduct(
                    (dprob.row(i).head(n).array() - dot).matrix());
            }
            ds *= scale;
            dq.middleCols(h * hd, hd).noalias() = ds * c.k.middleCols(h * hd, hd);
            dk.middleCols(h * hd, hd).noalias() = ds.transpose() * c.q.middleCols(h * hd, hd);
        }
        apply_rope(dq, rope, cfg.heads, hd, 0, T(-1));
        apply_rope(dk, rope, cfg.heads, hd, 0, T(-1));
        g.wq.noalias() += c.xn1.transpose() * dq;
        g.wk.noalias() += c.xn1.transpose() * dk;
        g.wv.noalias() += c.xn1.transpose() * dv;
        Mat<T> dxn1 = dq * b.wq.transpose();
        dxn1.noalias() += dk * b.wk.transpose();
        dxn1.noalias() += dv * b.wv.transpose();
        dx += rms_norm_backward(c.x_in, b.attn_norm, c.inv_rms1, dxn1, g.attn_norm);
    }

    // Embeddings and the image adaptor.
    for (int i = 0; i < layout.text.length; ++i) {
        grads.tok_emb.row(input.text[static_cast<std::size_t>(i)]) += dx.row(layout.text.begin + i);
    }
    grads.tok_emb.row(model.vocab.boi()) += dx.row(layout.boi_pos);
    grads.tok_emb.row(model.vocab.bom()) += dx.row(layout.bom_pos);
    for (int i = 0; i < layout.mask.length; ++i) {
        grads.tok_emb.row(input.mask[static_cast<std::size_t>(i)]) += dx.row(layout.mask.begin + i);
    }
    const Mat<T> dimg = dx.middleRows(layout.image.begin, layout.image.length);
    const auto& e = res.embedded;
    grads.adapt_w2.noalias() += e.adaptor_act.transpose() * dimg;
    grads.adapt_b2.row(0) += dimg.colwise().sum();
    Mat<T> dpre = dimg * params.adapt_w2.transpose();
    for (Eigen::Index i = 0; i < dpre.size(); ++i) dpre.data()[i] *= gelu_grad(e.adaptor_pre.data()[i]);
    const Mat<T> patches = patch_matrix<T>(input, cfg.image_patch_dim);
    grads.adapt_w1.noalias() += patches.transpose() * dpre;
    grads.adapt_b1.row(0) += dpre.colwise().sum();
}

template <typename T>
DecodeState<T> prefill(const Model<T>& model, const SequenceInput& prefix, int extra) {
    if (!prefix.mask.empty()) throw ValidationError("decoding prefix must end at <BOM>");
    ForwardOptions opt;
    opt.keep_cache = true;
    const auto layout = make_layout(prefix, model.config, model.vocab);
    opt.logit_begin = layout.total_len - 1;
    opt.logit_rows = 1;
    const auto res = forward(model, prefix, opt);
    DecodeState<T> st;
    const int cap = layout.total_len + std::max(extra, 0);
    for (const auto& c : res.layers) {
        Mat<T> k = Mat<T>::Zero(cap, model.config.hidden);
        Mat<T> v = Mat<T>::Zero(cap, model.config.hidden);
        k.topRows(layout.total_len) = c.k;
        v.topRows(layout.total_len) = c.v;
        st.keys.push_back(std::move(k));
        st.values.push_back(std::move(v));
    }
    st.length = layout.total_len;
    st.last_logits = res.logits.row(0).transpose();
    return st;
}

template <typename T>
void decode_step(const Model<T>& model, DecodeState<T>& st, std::int32_t token) {
    const auto& cfg = model.config;
    const auto& params = model.params;
    if (token < 0 || token >= model.vocab.total()) throw ValidationError("token id out of vocabulary");
    if (st.keys.empty() || st.length >= st.keys.front().rows()) {
        throw ValidationError("decode state has no room for another token");
    }
    const int pos = st.length;
    const int hd = cfg.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    const auto rope = rope_table<T>(cfg, pos, 1);
    Mat<T> x = params.tok_emb.row(token);
    Mat<T> xn;
    Col<T> inv;
    for (std::size_t li = 0; li < params.blocks.size(); ++li) {
        const auto& b = params.blocks[li];
        rms_norm(x, b.attn_norm, cfg.norm_eps, xn, inv);
        Mat<T> q = xn * b.wq;
        Mat<T> k = xn * b.wk;
        const Mat<T> v = xn * b.wv;
        apply_rope(q, rope, cfg.heads, hd, 0, T(1));
        apply_rope(k, rope, cfg.heads, hd, 0, T(1));
        st.keys[li].row(pos) = k.row(0);
        st.values[li].row(pos) = v.row(0);
        Mat<T> cat(1, cfg.hidden);
        for (int h = 0; h < cfg.heads; ++h) {
            Mat<T> s = q.middleCols(h * hd, hd) *
                       st.keys[li].topRows(pos + 1).middleCols(h * hd, hd).transpose();
            s *= scale;
            const T mx = s.maxCoeff();
            Mat<T> p = (s.array() - mx).exp().matrix();
            p /= p.sum();
            cat.middleCols(h * hd, hd).noalias() = p * st.values[li].topRows(pos + 1).middleCols(h * hd, hd);
        }
        x.noalias() += cat * b.wo;
        rms_norm(x, b.ffn_norm, cfg.norm_eps, xn, inv);
        const Mat<T> gate = xn * b.w_gate;
        const Mat<T> up = xn * b.w_up;
        const Mat<T> act = gate.unaryExpr([](T g) { return g * sigmoid(g); }).cwiseProduct(up);
        x.noalias() += act * b.w_down;
        if (!all_finite(x)) throw RuntimeFailure("non-finite activations in layer " + std::to_string(li));
    }
    rms_norm(x, params.final_norm, cfg.norm_eps, xn, inv);
    st.last_logits = (xn * params.head).transpose();
    st.length = pos + 1;
}

#define MASKGEN_INSTANTIATE(T)                                                                      \
    template struct ModelParams<T>;                                                                 \
    template Model<T> init_model<T>(const ModelConfig&, const Vocabulary&);                         \
    template Embedded<T> build_sequence<T>(const Model<T>&, const SequenceInput&);                  \
    template ForwardResult<T> forward<T>(const Model<T>&, const SequenceInput&, const ForwardOptions&); \
    template T mask_loss<T>(const Mat<T>&, const SequenceLayout&, std::span<const std::int32_t>);   \
    template Mat<T> mask_loss_grad<T>(const Mat<T>&, const SequenceLayout&, std::span<const std::int32_t>); \
    template T loss_and_grad<T>(const Model<T>&, const SequenceInput&, ModelParams<T>&);            \
    template void backward<T>(const Model<T>&, const SequenceInput&, const ForwardResult<T>&,       \
                              const Mat<T>&, ModelParams<T>&);                                      \
    template DecodeState<T> prefill<T>(const Model<T>&, const SequenceInput&, int);                 \
    template void decode_step<T>(const Model<T>&, DecodeState<T>&, std::int32_t);

MASKGEN_INSTANTIATE(float)
MASKGEN_INSTANTIATE(double)
#undef MASKGEN_INSTANTIATE

template ModelParams<float> ModelParams<double>::cast<float>() const;
template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<float> ModelParams<float>::cast<float>() const;
template ModelParams<double> ModelParams<double>::cast<double>() const;

}  // namespace maskgen::model
