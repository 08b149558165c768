#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "maskgen/model/transformer.hpp"

namespace maskgen::model {

enum class DecodeKind { greedy, beam, top_k, top_p, random };

inline constexpr int kDefaultBeamWidth = 3;
inline constexpr int kDefaultTopK = 3;
inline constexpr double kDefaultTopP = 0.9;

struct DecodeStrategy {
    DecodeKind kind = DecodeKind::greedy;
    int beam_width = kDefaultBeamWidth;
    int top_k = kDefaultTopK;
    double top_p = kDefaultTopP;
    /// Softmax temperature for the sampling strategies; 0 collapses every
    /// sampler to argmax.
    double temperature = 1.0;
    std::uint64_t seed = 0;

    /// "greedy", "beam[:B]", "topk[:K]", "topp[:P]" or "random".
    static DecodeStrategy parse(std::string_view spec);
    std::string to_string() const;
};

/// Emits exactly h*w mask tokens after a prefix that ends at <BOM>. Logits
/// are restricted to the mask-token range before selection.
std::vector<std::int32_t> generate(const Model<float>& model, const SequenceInput& prefix,
                                   const DecodeStrategy& strategy);

// Single-step selection rules, exposed for testing. `logits` are the
// restricted mask-token logits.
std::int32_t argmax_lowest(std::span<const double> logits);
/// Indices of the candidates a sampler may draw from with their
/// renormalized probabilities.
struct Candidates {
    std::vector<std::int32_t> ids;
    std::vector<double> probs;
};
Candidates top_k_candidates(std::span<const double> logits, int k, double temperature);
Candidates top_p_candidates(std::span<const double> logits, double p, double temperature);
Candidates full_candidates(std::span<const double> logits, double temperature);

}  // namespace maskgen::model
