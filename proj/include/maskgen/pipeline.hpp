#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "maskgen/codec.hpp"
#include "maskgen/dataset.hpp"
#include "maskgen/model/transformer.hpp"

namespace maskgen {

/// Samples for seeds [seed0, seed0 + n).
std::vector<Sample> generate_corpus(std::uint64_t seed0, int n, Task task);

/// Text, image patches and (when `codebook` is given) target mask tokens.
model::SequenceInput to_sequence(const Sample& sample, const TextVocab& text_vocab,
                                 const model::Vocabulary& vocab, const Codebook* codebook,
                                 int patch_size = kDefaultPatchSize);

/// Model configuration matching the sample geometry and a K-entry codebook.
model::Vocabulary make_vocabulary(int codebook_size, const TextVocab& text_vocab);

/// Decodes `tokens` for a rows x cols grid back to a binary mask.
BinaryMask tokens_to_mask(std::span<const std::int32_t> tokens, int rows, int cols,
                          const Codebook& codebook);

}  // namespace maskgen
