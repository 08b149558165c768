#include "maskgen/codec.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>
#include <json.hpp>

#include "maskgen/error.hpp"
#include "maskgen/metrics.hpp"
#include "maskgen/rng.hpp"

namespace maskgen {

namespace {

constexpr char kBinaryMagic[16] = {'M', 'S', 'K', 'C', 'B', '1', '\0'};

int patch_side(int dim) {
    const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(dim))));
    if (side <= 0 || side * side != dim) {
        throw ValidationError("patch dimension " + std::to_string(dim) + " is not a square");
    }
    return side;
}

template <typename T>
void put_le(std::ostream& out, T value) {
    static_assert(std::endian::native == std::endian::little, "big-endian hosts unsupported");
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw ValidationError("truncated binary codebook");
    return value;
}

}  // namespace

void Codebook::validate() const {
    if (size < 2) throw ValidationError("codebook needs K >= 2");
    if (dim <= 0) throw ValidationError("codebook dimension must be positive");
    if (vectors.size() != static_cast<std::size_t>(size) * dim) {
        throw ValidationError("codebook payload does not match K x d_vq");
    }
    for (float v : vectors) {
        if (!std::isfinite(v)) throw ValidationError("codebook contains non-finite values");
    }
    std::vector<int> order(static_cast<std::size_t>(size));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const auto va = vector(a), vb = vector(b);
        return std::lexicographical_compare(va.begin(), va.end(), vb.begin(), vb.end());
    });
    for (std::size_t i = 1; i < order.size(); ++i) {
        const auto a = vector(order[i - 1]), b = vector(order[i]);
        if (std::equal(a.begin(), a.end(), b.begin())) {
            throw ValidationError("codebook vectors " + std::to_string(order[i - 1]) + " and " +
                                  std::to_string(order[i]) + " are identical");
        }
    }
}

PatchGrid patchify(const BinaryMask& mask, int patch_size) {
    if (patch_size <= 0) throw ValidationError("patch size must be positive");
    const int rem_h = mask.height() % patch_size;
    const int rem_w = mask.width() % patch_size;
    if (mask.empty() || rem_h != 0 || rem_w != 0) {
        throw ValidationError("mask " + std::to_string(mask.height()) + "x" +
                              std::to_string(mask.width()) + " not divisible by patch size " +
                              std::to_string(patch_size) + " (remainder " + std::to_string(rem_h) +
                              " rows, " + std::to_string(rem_w) + " cols)");
    }
    PatchGrid grid;
    grid.rows = mask.height() / patch_size;
    grid.cols = mask.width() / patch_size;
    grid.dim = patch_size * patch_size;
    grid.values.resize(static_cast<std::size_t>(grid.rows) * grid.cols * grid.dim);
    for (int i = 0; i < grid.rows; ++i) {
        for (int j = 0; j < grid.cols; ++j) {
            auto out = grid.patch(i, j);
            for (int r = 0; r < patch_size; ++r) {
                for (int c = 0; c < patch_size; ++c) {
                    out[static_cast<std::size_t>(r * patch_size + c)] =
                        mask.at(i * patch_size + r, j * patch_size + c) ? 1.0f : -1.0f;
                }
            }
        }
    }
    return grid;
}

BinaryMask binarize(const PatchGrid& grid) {
    const int p = patch_side(grid.dim);
    BinaryMask mask(grid.rows * p, grid.cols * p);
    for (int i = 0; i < grid.rows; ++i) {
        for (int j = 0; j < grid.cols; ++j) {
            const auto in = grid.patch(i, j);
            for (int r = 0; r < p; ++r) {
                for (int c = 0; c < p; ++c) {
                    // Single channel: the channel mean is the value itself.
                    mask.set(i * p + r, j * p + c, in[static_cast<std::size_t>(r * p + c)] >= 0.0f);
                }
            }
        }
    }
    return mask;
}

double squared_distance(std::span<const float> a, std::span<const float> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += d * d;
    }
    return acc;
}

std::int32_t nearest_code(std::span<const float> vec, const Codebook& codebook) {
    std::int32_t best = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    for (int k = 0; k < codebook.size; ++k) {
        const auto z = codebook.vector(k);
        // Partial sums are monotone, so abandoning a candidate once it is
        // strictly worse cannot change the argmin or its tie-break.
        double acc = 0.0;
        std::size_t i = 0;
        for (; i < vec.size(); ++i) {
            const double d = static_cast<double>(vec[i]) - static_cast<double>(z[i]);
            acc += d * d;
            if (acc > best_dist) break;
        }
        if (i == vec.size() && acc < best_dist) {
            best_dist = acc;
            best = k;
        }
    }
    return best;
}

TokenGrid quantize(const PatchGrid& grid, const Codebook& codebook) {
    if (grid.dim != codebook.dim) {
        throw ValidationError("patch dimension " + std::to_string(grid.dim) +
                              " does not match codebook dimension " + std::to_string(codebook.dim));
    }
    TokenGrid tokens{grid.rows, grid.cols, {}};
    tokens.indices.reserve(static_cast<std::size_t>(grid.rows) * grid.cols);
    for (int i = 0; i < grid.rows; ++i) {
        for (int j = 0; j < grid.cols; ++j) {
            tokens.indices.push_back(nearest_code(grid.patch(i, j), codebook));
        }
    }
    return tokens;
}

PatchGrid dequantize(const TokenGrid& tokens, const Codebook& codebook) {
    if (tokens.indices.size() != static_cast<std::size_t>(tokens.rows) * tokens.cols) {
        throw ValidationError("token grid size does not match its shape");
    }
    PatchGrid grid;
    grid.rows = tokens.rows;
    grid.cols = tokens.cols;
    grid.dim = codebook.dim;
    grid.values.resize(static_cast<std::size_t>(grid.rows) * grid.cols * grid.dim);
    for (int i = 0; i < tokens.rows; ++i) {
        for (int j = 0; j < tokens.cols; ++j) {
            const auto k = tokens.at(i, j);
            if (k < 0 || k >= codebook.size) {
                throw ValidationError("token " + std::to_string(k) + " at (" + std::to_string(i) +
                                      "," + std::to_string(j) + ") outside [0," +
                                      std::to_string(codebook.size) + ")");
            }
            const auto z = codebook.vector(k);
            std::copy(z.begin(), z.end(), grid.patch(i, j).begin());
        }
    }
    return grid;
}

std::vector<std::int32_t> flatten(const TokenGrid& tokens) { return tokens.indices; }

TokenGrid unflatten(std::span<const std::int32_t> fragment, int rows, int cols) {
    if (rows < 0 || cols < 0 ||
        fragment.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols)) {
        throw ValidationError("cannot unflatten " + std::to_string(fragment.size()) +
                              " tokens into " + std::to_string(rows) + "x" + std::to_string(cols));
    }
    return TokenGrid{rows, cols, {fragment.begin(), fragment.end()}};
}

TokenGrid encode_mask(const BinaryMask& mask, const Codebook& codebook) {
    return quantize(patchify(mask, patch_side(codebook.dim)), codebook);
}

BinaryMask decode_tokens(const TokenGrid& tokens, const Codebook& codebook) {
    return binarize(dequantize(tokens, codebook));
}

std::vector<float> collect_patches(std::span<const BinaryMask> masks, int patch_size) {
    std::vector<float> all;
    for (const auto& m : masks) {
        const auto grid = patchify(m, patch_size);
        all.insert(all.end(), grid.values.begin(), grid.values.end());
    }
    return all;
}

Codebook train_codebook(std::span<const float> vectors, int dim, const KmeansOptions& options) {
    using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    if (dim <= 0 || vectors.size() % static_cast<std::size_t>(dim) != 0) {
        throw ValidationError("training vectors are not a whole number of d_vq rows");
    }
    if (options.size < 2) throw ValidationError("codebook needs K >= 2");
    if (options.max_iters < 1) throw ValidationError("k-means needs max_iters >= 1");
    const std::size_t n = vectors.size() / static_cast<std::size_t>(dim);
    const auto row = [&](std::size_t i) {
        return vectors.subspan(i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim));
    };

    // Collapse duplicates into weighted points in lexicographic order.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const auto va = row(a), vb = row(b);
        return std::lexicographical_compare(va.begin(), va.end(), vb.begin(), vb.end());
    });
    std::vector<std::size_t> unique_rows;
    std::vector<double> weight;
    for (std::size_t idx : order) {
        if (!unique_rows.empty()) {
            const auto prev = row(unique_rows.back()), cur = row(idx);
            if (std::equal(prev.begin(), prev.end(), cur.begin())) {
                weight.back() += 1.0;
                continue;
            }
        }
        unique_rows.push_back(idx);
        weight.push_back(1.0);
    }
    const std::size_t m = unique_rows.size();
    const auto k_count = static_cast<std::size_t>(options.size);
    if (m < k_count) {
        throw ValidationError("only " + std::to_string(m) + " distinct vectors for K=" +
                              std::to_string(options.size));
    }

    MatF points(static_cast<Eigen::Index>(m), dim);
    for (std::size_t i = 0; i < m; ++i) {
        const auto src = row(unique_rows[i]);
        std::copy(src.begin(), src.end(), points.row(static_cast<Eigen::Index>(i)).data());
    }
    const auto point = [&](std::size_t i) {
        return std::span<const float>(points.row(static_cast<Eigen::Index>(i)).data(),
                                      static_cast<std::size_t>(dim));
    };

    // k-means++ seeding.
    Rng rng(options.seed);
    const auto pick_weighted = [&](const std::vector<double>& mass) {
        const double total = std::accumulate(mass.begin(), mass.end(), 0.0);
        const double target = rng.uniform() * total;
        double run = 0.0;
        std::size_t last_positive = 0;
        for (std::size_t i = 0; i < mass.size(); ++i) {
            if (mass[i] <= 0.0) continue;
            last_positive = i;
            run += mass[i];
            if (target < run) return i;
        }
        return last_positive;
    };
    MatF centroids(static_cast<Eigen::Index>(k_count), dim);
    std::vector<double> best_d2(m, std::numeric_limits<double>::infinity());
    std::size_t chosen = pick_weighted(weight);
    for (std::size_t k = 0; k < k_count; ++k) {
        centroids.row(static_cast<Eigen::Index>(k)) = points.row(static_cast<Eigen::Index>(chosen));
        if (k + 1 == k_count) break;
        std::vector<double> mass(m);
        for (std::size_t i = 0; i < m; ++i) {
            best_d2[i] = std::min(best_d2[i], squared_distance(point(i), point(chosen)));
            mass[i] = best_d2[i] * weight[i];
        }
        chosen = pick_weighted(mass);
    }

    // Lloyd iterations.
    std::vector<std::int32_t> assign(m, -1);
    std::vector<double> dist(m, 0.0);
    const Eigen::VectorXf point_norms = points.rowwise().squaredNorm();
    int iters = 0;
    for (; iters < options.max_iters;) {
        ++iters;
        const Eigen::VectorXf centroid_norms = centroids.rowwise().squaredNorm();
        const MatF cross = points * centroids.transpose();
        bool changed = false;
        for (std::size_t i = 0; i < m; ++i) {
            const auto ii = static_cast<Eigen::Index>(i);
            std::int32_t best = 0;
            float best_val = std::numeric_limits<float>::infinity();
            for (Eigen::Index k = 0; k < cross.cols(); ++k) {
                const float d = centroid_norms[k] - 2.0f * cross(ii, k);
                if (d < best_val) {
                    best_val = d;
                    best = static_cast<std::int32_t>(k);
                }
            }
            dist[i] = std::max(0.0, static_cast<double>(best_val + point_norms[ii]));
            if (assign[i] != best) {
                assign[i] = best;
                changed = true;
            }
        }
        if (!changed) break;

        std::vector<double> mass(k_count, 0.0);
        Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k_count), dim);
        for (std::size_t i = 0; i < m; ++i) {
            const auto k = static_cast<std::size_t>(assign[i]);
            mass[k] += weight[i];
            sums.row(static_cast<Eigen::Index>(k)) +=
                weight[i] * points.row(static_cast<Eigen::Index>(i)).cast<double>();
        }
        // Empty clusters take the point farthest from its own centroid.
        std::vector<bool> taken(m, false);
        for (std::size_t k = 0; k < k_count; ++k) {
            if (mass[k] > 0.0) continue;
            std::size_t far = 0;
            double far_d = -1.0;
            for (std::size_t i = 0; i < m; ++i) {
                if (!taken[i] && dist[i] > far_d) {
                    far_d = dist[i];
                    far = i;
                }
            }
            taken[far] = true;
            const auto old = static_cast<std::size_t>(assign[far]);
            const auto fi = static_cast<Eigen::Index>(far);
            mass[old] -= weight[far];
            sums.row(static_cast<Eigen::Index>(old)) -= weight[far] * points.row(fi).cast<double>();
            assign[far] = static_cast<std::int32_t>(k);
            dist[far] = 0.0;
            mass[k] = weight[far];
            sums.row(static_cast<Eigen::Index>(k)) = weight[far] * points.row(fi).cast<double>();
        }
        for (std::size_t k = 0; k < k_count; ++k) {
            const auto kk = static_cast<Eigen::Index>(k);
            if (mass[k] > 0.0) centroids.row(kk) = (sums.row(kk) / mass[k]).cast<float>();
        }
    }

    Codebook cb;
    cb.size = options.size;
    cb.dim = dim;
    cb.vectors.assign(centroids.data(), centroids.data() + centroids.size());
    cb.meta = CodebookMeta{options.seed, iters, static_cast<std::int64_t>(n)};
    cb.validate();
    return cb;
}

ReconstructionReport reconstruction_report(std::span<const BinaryMask> masks,
                                           const Codebook& codebook) {
    if (masks.empty()) throw ValidationError("reconstruction report needs at least one mask");
    std::vector<EvalPair> pairs;
    pairs.reserve(masks.size());
    for (const auto& m : masks) {
        pairs.push_back(EvalPair::make(decode_tokens(encode_mask(m, codebook), codebook), m));
    }
    ReconstructionReport report;
    report.pairs = pairs.size();
    report.total_iou = c_iou(pairs);
    double sum = 0.0;
    std::size_t defined = 0;
    for (const auto& p : pairs) {
        if (p.ahd) {
            sum += *p.ahd;
            ++defined;
        } else {
            ++report.undefined_ahd;
        }
    }
    report.mahd = defined ? sum / static_cast<double>(defined) : 0.0;
    return report;
}

void save_codebook_text(const std::filesystem::path& path, const Codebook& codebook,
                        const std::string& comment) {
    std::ofstream out(path);
    if (!out) throw RuntimeFailure("cannot open " + path.string() + " for writing");
    out << "MASKCB v1 " << codebook.size << ' ' << codebook.dim << ' ' << codebook.meta.seed << '\n';
    out.precision(std::numeric_limits<float>::max_digits10);
    for (int k = 0; k < codebook.size; ++k) {
        const auto z = codebook.vector(k);
        for (std::size_t i = 0; i < z.size(); ++i) {
            if (i) out << ' ';
            out << z[i];
        }
        out << '\n';
    }
    if (!comment.empty()) out << "# " << comment << '\n';
    if (!out) throw RuntimeFailure("write failed: " + path.string());
}

void save_codebook_binary(const std::filesystem::path& path, const Codebook& codebook) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeFailure("cannot open " + path.string() + " for writing");
    out.write(kBinaryMagic, sizeof(kBinaryMagic));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(codebook.size));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(codebook.dim));
    for (float v : codebook.vectors) put_le<float>(out, v);
    if (!out) throw RuntimeFailure("write failed: " + path.string());
}

Codebook load_codebook(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open codebook " + path.string());
    char magic[16] = {};
    in.read(magic, sizeof(magic));
    Codebook cb;
    if (in.gcount() == sizeof(magic) && std::memcmp(magic, kBinaryMagic, sizeof(magic)) == 0) {
        cb.size = static_cast<int>(get_le<std::uint32_t>(in));
        cb.dim = static_cast<int>(get_le<std::uint32_t>(in));
        cb.vectors.resize(static_cast<std::size_t>(cb.size) * cb.dim);
        for (auto& v : cb.vectors) v = get_le<float>(in);
    } else {
        in.clear();
        in.seekg(0);
        std::string tag, version;
        in >> tag >> version >> cb.size >> cb.dim >> cb.meta.seed;
        if (!in || tag != "MASKCB" || version != "v1") {
            throw ValidationError("unrecognized codebook header in " + path.string());
        }
        if (cb.size < 0 || cb.dim <= 0) throw ValidationError("bad codebook geometry");
        cb.vectors.resize(static_cast<std::size_t>(cb.size) * cb.dim);
        for (auto& v : cb.vectors) {
            if (!(in >> v)) throw ValidationError("truncated codebook " + path.string());
        }
    }
    cb.validate();
    return cb;
}

std::string tokens_to_json(const TokenGrid& tokens, const std::string& manifest) {
    nlohmann::ordered_json j;
    j["h"] = tokens.rows;
    j["w"] = tokens.cols;
    j["tokens"] = tokens.indices;
    if (!manifest.empty()) j["manifest"] = manifest;
    return j.dump();
}

TokenGrid tokens_from_json(const std::string& text) {
    try {
        const auto j = nlohmann::json::parse(text);
        const auto tokens = j.at("tokens").get<std::vector<std::int32_t>>();
        return unflatten(tokens, j.at("h").get<int>(), j.at("w").get<int>());
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed token file: ") + e.what());
    }
}

}  // namespace maskgen
