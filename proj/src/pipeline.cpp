#include "maskgen/pipeline.hpp"

#include "maskgen/error.hpp"

namespace maskgen {

std::vector<Sample> generate_corpus(std::uint64_t seed0, int n, Task task) {
    if (n < 0) throw ValidationError("sample count must be non-negative");
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(generate_sample(make_scene(seed0 + static_cast<std::uint64_t>(i), task)));
    return out;
}

model::SequenceInput to_sequence(const Sample& sample, const TextVocab& text_vocab,
                                 const model::Vocabulary& vocab, const Codebook* codebook,
                                 int patch_size) {
    model::SequenceInput in;
    in.text = text_vocab.tokenize(sample.instruction, vocab.text_base());
    in.image = model::image_to_patches(sample.image, patch_size);
    in.image_patches = (sample.image.height() / patch_size) * (sample.image.width() / patch_size);
    if (codebook != nullptr) in.mask = flatten(encode_mask(sample.mask, *codebook));
    return in;
}

model::Vocabulary make_vocabulary(int codebook_size, const TextVocab& text_vocab) {
    model::Vocabulary v;
    v.mask_size = codebook_size;
    v.text_size = static_cast<int>(text_vocab.size());
    return v;
}

BinaryMask tokens_to_mask(std::span<const std::int32_t> tokens, int rows, int cols,
                          const Codebook& codebook) {
    return decode_tokens(unflatten(tokens, rows, cols), codebook);
}

}  // namespace maskgen
