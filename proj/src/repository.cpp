#include "d3n/repository.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iostream>

#include "d3n/errors.hpp"
#include "d3n/vendor_json.hpp"

namespace d3n {

namespace {

constexpr char kMagic[4] = {'D', '3', 'N', 'F'};
constexpr std::uint16_t kVersion = 1;

template <typename T>
void write_le(std::ostream& out, T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i)
        out.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <typename T>
bool read_le(std::istream& in, T& v) {
    std::uint64_t acc = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        int c = in.get();
        if (c == EOF) return false;
        acc |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(c)) << (8 * i);
    }
    v = static_cast<T>(acc);
    return true;
}

std::string kind_name(PayloadKind k) { return k == PayloadKind::raw ? "raw" : "latent"; }

PayloadKind kind_from_name(const std::string& s) {
    if (s == "raw") return PayloadKind::raw;
    if (s == "latent") return PayloadKind::latent;
    throw CorruptFile("unknown payload kind in manifest: " + s);
}

}  // namespace

FeatureKey key_for(const Image& image, std::string source_path) {
    return FeatureKey{content_key(image), std::move(source_path)};
}

torch::Tensor FeatureRecord::to_tensor() const {
    std::vector<std::int64_t> sizes(dims.begin(), dims.end());
    auto t = torch::empty(sizes, torch::kFloat32);
    std::memcpy(t.data_ptr<float>(), payload.data(), payload.size() * sizeof(float));
    return t;
}

FeatureRecord FeatureRecord::from_tensor(const FeatureKey& key, int timestep, int scale_level,
                                         PayloadKind kind, const torch::Tensor& t) {
    FeatureRecord r;
    r.key = key;
    r.timestep = timestep;
    r.scale_level = scale_level;
    r.payload_kind = kind;
    auto c = t.detach().to(torch::kFloat32).contiguous();
    for (auto d : c.sizes()) r.dims.push_back(static_cast<std::uint32_t>(d));
    r.payload.resize(static_cast<std::size_t>(c.numel()));
    std::memcpy(r.payload.data(), c.data_ptr<float>(), r.payload.size() * sizeof(float));
    return r;
}

std::int64_t FeatureRepository::record_count() const {
    std::int64_t n = 0;
    for (const auto& [k, v] : records_) n += static_cast<std::int64_t>(v.size());
    return n;
}

std::vector<const FeatureRecord*> FeatureRepository::query(const FeatureKey& key) const {
    auto it = records_.find(key.value);
    if (it == records_.end() || it->second.empty())
        throw KeyNotFound("feature key not found: " + to_hex(key.value) +
                          (key.source_path.empty() ? "" : " (source: " + key.source_path + ")"));
    std::vector<const FeatureRecord*> out;
    out.reserve(it->second.size());
    for (const auto& r : it->second) out.push_back(&r);
    std::sort(out.begin(), out.end(), [](const FeatureRecord* a, const FeatureRecord* b) {
        return std::tie(a->timestep, a->scale_level) < std::tie(b->timestep, b->scale_level);
    });
    return out;
}

bool FeatureRepository::contains(const FeatureKey& key) const {
    return records_.count(key.value) > 0;
}

std::vector<FeatureKey> FeatureRepository::keys() const {
    std::vector<FeatureKey> out;
    for (const auto& [k, v] : records_)
        if (!v.empty()) out.push_back(v.front().key);
    return out;
}

void FeatureRepository::persist(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);

    std::ofstream blob(dir / "records.bin", std::ios::binary | std::ios::trunc);
    if (!blob) throw IoError("cannot write " + (dir / "records.bin").string());
    blob.write(kMagic, 4);
    write_le(blob, kVersion);
    for (const auto& [key, recs] : records_) {
        for (const auto& r : recs) {
            blob.write(reinterpret_cast<const char*>(r.key.value.data()), 32);
            write_le(blob, static_cast<std::uint16_t>(r.timestep));
            blob.put(static_cast<char>(r.scale_level));
            blob.put(static_cast<char>(r.payload_kind));
            blob.put(static_cast<char>(r.dims.size()));
            for (auto d : r.dims) write_le(blob, d);
            static_assert(sizeof(float) == 4);
            blob.write(reinterpret_cast<const char*>(r.payload.data()),
                       static_cast<std::streamsize>(r.payload.size() * sizeof(float)));
        }
    }
    if (!blob) throw IoError("short write on records.bin");
    blob.close();

    nlohmann::json m{{"version", manifest_.version},
                     {"payload_kind", kind_name(manifest_.payload_kind)},
                     {"timesteps", manifest_.timesteps},
                     {"scale_levels", manifest_.scale_levels},
                     {"record_count", manifest_.record_count}};
    if (manifest_.compressor_checkpoint_ref)
        m["compressor_checkpoint_ref"] = *manifest_.compressor_checkpoint_ref;
    std::ofstream mf(dir / "manifest.json", std::ios::trunc);
    mf << m.dump(2) << "\n";
    if (!mf) throw IoError("cannot write manifest.json");
}

FeatureRepository FeatureRepository::load(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw IoError("cannot read " + (dir / "manifest.json").string());
    nlohmann::json m;
    try {
        mf >> m;
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFile(std::string("bad manifest.json: ") + e.what());
    }

    FeatureRepository repo;
    repo.manifest_.version = m.at("version");
    if (repo.manifest_.version != 1)
        throw UnsupportedVersion("repository version " + std::to_string(repo.manifest_.version));
    repo.manifest_.payload_kind = kind_from_name(m.at("payload_kind"));
    repo.manifest_.timesteps = m.at("timesteps").get<std::vector<int>>();
    repo.manifest_.scale_levels = m.at("scale_levels").get<std::vector<int>>();
    repo.manifest_.record_count = m.at("record_count");
    if (m.contains("compressor_checkpoint_ref"))
        repo.manifest_.compressor_checkpoint_ref = m.at("compressor_checkpoint_ref").get<std::string>();

    std::ifstream blob(dir / "records.bin", std::ios::binary);
    if (!blob) throw IoError("cannot read " + (dir / "records.bin").string());
    char magic[4];
    blob.read(magic, 4);
    if (blob.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0)
        throw CorruptFile("bad repository magic");
    std::uint16_t version = 0;
    if (!read_le(blob, version)) throw CorruptFile("truncated repository header");
    if (version != kVersion) throw UnsupportedVersion("record blob version " + std::to_string(version));

    std::int64_t index = 0;
    while (true) {
        FeatureRecord r;
        blob.read(reinterpret_cast<char*>(r.key.value.data()), 32);
        if (blob.gcount() == 0) break;  // clean EOF between records
        if (blob.gcount() != 32) throw CorruptFile("truncated key at record " + std::to_string(index));
        std::uint16_t ts;
        if (!read_le(blob, ts)) throw CorruptFile("truncated record " + std::to_string(index));
        r.timestep = ts;
        int scale = blob.get(), kind = blob.get(), ndims = blob.get();
        if (ndims == EOF) throw CorruptFile("truncated record " + std::to_string(index));
        r.scale_level = scale;
        if (kind != 0 && kind != 1) throw CorruptFile("bad payload kind at record " + std::to_string(index));
        r.payload_kind = static_cast<PayloadKind>(kind);
        std::size_t numel = 1;
        for (int i = 0; i < ndims; ++i) {
            std::uint32_t d;
            if (!read_le(blob, d)) throw CorruptFile("truncated dims at record " + std::to_string(index));
            r.dims.push_back(d);
            numel *= d;
        }
        r.payload.resize(numel);
        blob.read(reinterpret_cast<char*>(r.payload.data()),
                  static_cast<std::streamsize>(numel * sizeof(float)));
        if (static_cast<std::size_t>(blob.gcount()) != numel * sizeof(float))
            throw CorruptFile("truncated payload at record " + std::to_string(index));
        repo.records_[r.key.value].push_back(std::move(r));
        ++index;
    }
    if (index != repo.manifest_.record_count)
        throw IntegrityError("manifest record_count " + std::to_string(repo.manifest_.record_count) +
                             " but blob holds " + std::to_string(index));
    return repo;
}

FeatureRepository make_repository(RepositoryManifest manifest, std::vector<FeatureRecord> records) {
    FeatureRepository repo;
    repo.manifest_ = std::move(manifest);
    for (auto& r : records) repo.records_[r.key.value].push_back(std::move(r));
    repo.manifest_.record_count = repo.record_count();
    return repo;
}

FeatureRepository build_repository(const std::vector<std::pair<Image, std::string>>& dataset,
                                   const TapExtractor& extractor, const std::vector<int>& timesteps,
                                   const std::set<Sha256>& forbidden_keys) {
    std::map<Sha256, std::vector<FeatureRecord>> by_key;
    std::set<int> levels;
    for (const auto& [image, path] : dataset) {
        auto key = key_for(image, path);
        if (forbidden_keys.count(key.value))
            throw InvalidArgument("split guard: image from the held-out split offered to "
                                  "build_repository: " + path);
        if (by_key.count(key.value)) {
            // last write wins
            std::cerr << "warning: duplicate image content, overwriting records: " << path << "\n";
            by_key.erase(key.value);
        }
        std::vector<FeatureTap> taps;
        try {
            taps = extractor(image, seed_from_hash(key.value));
        } catch (const std::exception& e) {
            throw StateError("feature extraction failed for " + path + ": " + e.what());
        }
        for (const auto& tap : taps) {
            by_key[key.value].push_back(FeatureRecord::from_tensor(
                key, tap.timestep, tap.scale_level, PayloadKind::raw, tap.feature));
            levels.insert(tap.scale_level);
        }
    }
    RepositoryManifest manifest;
    manifest.payload_kind = PayloadKind::raw;
    manifest.timesteps = timesteps;
    manifest.scale_levels.assign(levels.begin(), levels.end());
    std::vector<FeatureRecord> records;
    for (auto& [k, recs] : by_key)
        for (auto& r : recs) records.push_back(std::move(r));
    return make_repository(std::move(manifest), std::move(records));
}

}  // namespace d3n
