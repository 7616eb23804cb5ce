#include "d3n/hashing.hpp"

#include <openssl/evp.h>

#include <cstring>
#include <fstream>
#include <vector>

#include "d3n/errors.hpp"

namespace d3n {

namespace {

struct DigestCtx {
    EVP_MD_CTX* ctx;
    DigestCtx() : ctx(EVP_MD_CTX_new()) {
        EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    }
    ~DigestCtx() { EVP_MD_CTX_free(ctx); }
    void update(const void* data, std::size_t len) {
        EVP_DigestUpdate(ctx, data, len);
    }
    Sha256 finish() {
        Sha256 out{};
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx, out.data(), &len);
        return out;
    }
};

}  // namespace

Sha256 sha256(std::span<const std::uint8_t> bytes) {
    DigestCtx d;
    d.update(bytes.data(), bytes.size());
    return d.finish();
}

Sha256 sha256_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file for hashing: " + path.string());
    DigestCtx d;
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        d.update(buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    return d.finish();
}

std::string to_hex(const Sha256& digest) {
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(64);
    for (auto b : digest) {
        out.push_back(hex[b >> 4]);
        out.push_back(hex[b & 0xf]);
    }
    return out;
}

Sha256 from_hex(const std::string& hex) {
    if (hex.size() != 64) throw InvalidArgument("hash hex must be 64 chars");
    Sha256 out{};
    auto nibble = [](char c) -> std::uint8_t {
        if (c >= '0' && c <= '9') return static_cast<std::uint8_t>(c - '0');
        if (c >= 'a' && c <= 'f') return static_cast<std::uint8_t>(c - 'a' + 10);
        if (c >= 'A' && c <= 'F') return static_cast<std::uint8_t>(c - 'A' + 10);
        throw InvalidArgument("bad hex digit in hash");
    };
    for (std::size_t i = 0; i < 32; ++i)
        out[i] = static_cast<std::uint8_t>((nibble(hex[2 * i]) << 4) | nibble(hex[2 * i + 1]));
    return out;
}

Sha256 module_state_hash(const torch::nn::Module& module) {
    torch::NoGradGuard ng;
    DigestCtx d;
    auto feed = [&](const std::string& name, const torch::Tensor& t) {
        d.update(name.data(), name.size());
        auto c = t.detach().to(torch::kCPU).contiguous();
        if (c.numel() > 0) d.update(c.data_ptr(), c.numel() * c.element_size());
    };
    for (const auto& p : module.named_parameters(/*recurse=*/true)) feed(p.key(), p.value());
    for (const auto& b : module.named_buffers(/*recurse=*/true)) feed(b.key(), b.value());
    return d.finish();
}

std::uint64_t seed_from_hash(const Sha256& digest, std::uint64_t salt) {
    std::uint64_t x = 0;
    std::memcpy(&x, digest.data(), sizeof(x));
    // splitmix64 step
    x += salt + 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t seed_mix(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t x = base + stream * 0x9e3779b97f4a7c15ULL + 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace d3n
