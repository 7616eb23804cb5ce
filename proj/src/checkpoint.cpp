#include "d3n/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <vector>

#include "d3n/errors.hpp"

namespace d3n {

namespace {

void write_u32(std::ostream& out, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 4);
}

std::uint32_t read_u32(const std::uint8_t* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
}

std::vector<std::uint8_t> read_all(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const std::string& magic,
                     const nlohmann::json& header, const torch::nn::Module& module) {
    if (magic.size() != 4) throw InvalidArgument("checkpoint magic must be 4 bytes");

    torch::serialize::OutputArchive archive;
    torch::NoGradGuard ng;
    for (const auto& p : module.named_parameters(/*recurse=*/true))
        archive.write(p.key(), p.value().detach().cpu());
    for (const auto& b : module.named_buffers(/*recurse=*/true))
        archive.write(b.key(), b.value().detach().cpu());

    std::string blob;
    archive.save_to([&blob](const void* data, std::size_t size) -> std::size_t {
        blob.append(static_cast<const char*>(data), size);
        return size;
    });

    const std::string hdr = header.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint: " + path.string());
    out.write(magic.data(), 4);
    write_u32(out, static_cast<std::uint32_t>(hdr.size()));
    out.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("short write on checkpoint: " + path.string());
}

static nlohmann::json parse_header(const std::vector<std::uint8_t>& bytes, const std::string& magic,
                                   std::size_t& blob_offset) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), magic.data(), 4) != 0)
        throw CorruptFile("bad checkpoint magic");
    const std::uint32_t hdr_len = read_u32(bytes.data() + 4);
    if (bytes.size() < 8 + static_cast<std::size_t>(hdr_len))
        throw CorruptFile("truncated checkpoint header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + hdr_len);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFile(std::string("unreadable checkpoint header: ") + e.what());
    }
    blob_offset = 8 + hdr_len;
    return header;
}

nlohmann::json load_checkpoint(const std::filesystem::path& path, const std::string& magic,
                               torch::nn::Module& module) {
    auto bytes = read_all(path);
    std::size_t off = 0;
    auto header = parse_header(bytes, magic, off);

    torch::serialize::InputArchive archive;
    archive.load_from(reinterpret_cast<const char*>(bytes.data() + off), bytes.size() - off);

    torch::NoGradGuard ng;
    for (auto& p : module.named_parameters(/*recurse=*/true)) {
        torch::Tensor t;
        if (!archive.try_read(p.key(), t))
            throw CorruptFile("checkpoint missing parameter " + p.key());
        if (!t.sizes().equals(p.value().sizes()))
            throw StateError("checkpoint shape mismatch for " + p.key());
        p.value().copy_(t);
    }
    for (auto& b : module.named_buffers(/*recurse=*/true)) {
        torch::Tensor t;
        if (!archive.try_read(b.key(), t))
            throw CorruptFile("checkpoint missing buffer " + b.key());
        b.value().copy_(t);
    }
    return header;
}

nlohmann::json read_checkpoint_header(const std::filesystem::path& path, const std::string& magic) {
    auto bytes = read_all(path);
    std::size_t off = 0;
    return parse_header(bytes, magic, off);
}

}  // namespace d3n
