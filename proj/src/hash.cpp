#include "maskgen/hash.hpp"

#include <array>
#include <cstdio>
#include <fstream>

#include <openssl/evp.h>

#include "maskgen/error.hpp"

namespace maskgen {

namespace {

EVP_MD_CTX* as_ctx(void* p) { return static_cast<EVP_MD_CTX*>(p); }

}  // namespace

Sha256::Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (ctx_ == nullptr || EVP_DigestInit_ex(as_ctx(ctx_), EVP_sha256(), nullptr) != 1) {
        throw RuntimeFailure("SHA-256 initialisation failed");
    }
}

Sha256::~Sha256() { EVP_MD_CTX_free(as_ctx(ctx_)); }

Sha256& Sha256::update(std::string_view data) {
    EVP_DigestUpdate(as_ctx(ctx_), data.data(), data.size());
    return *this;
}

Sha256& Sha256::update(std::span<const unsigned char> data) {
    EVP_DigestUpdate(as_ctx(ctx_), data.data(), data.size());
    return *this;
}

Sha256& Sha256::field(std::string_view data) {
    const std::string len = std::to_string(data.size()) + ":";
    return update(len).update(data);
}

std::string Sha256::hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int n = 0;
    EVP_DigestFinal_ex(as_ctx(ctx_), md.data(), &n);
    std::string out;
    out.reserve(2 * n);
    char buf[3];
    for (unsigned int i = 0; i < n; ++i) {
        std::snprintf(buf, sizeof(buf), "%02x", md[i]);
        out += buf;
    }
    return out;
}

std::string sha256_hex(std::string_view data) { return Sha256().update(data).hex(); }

std::string sha256_hex(std::span<const unsigned char> data) { return Sha256().update(data).hex(); }

std::string sha256_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot read " + path.string());
    Sha256 h;
    std::array<char, 1 << 16> buf{};
    while (in) {
        in.read(buf.data(), buf.size());
        h.update(std::string_view(buf.data(), static_cast<std::size_t>(in.gcount())));
    }
    return h.hex();
}

}  // namespace maskgen
