#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "d3n/diffusion.hpp"
#include "d3n/hashing.hpp"
#include "d3n/image.hpp"

namespace d3n {

enum class PayloadKind : std::uint8_t { raw = 0, latent = 1 };

struct FeatureKey {
    Sha256 value{};            // content hash of canonical pixel bytes
    std::string source_path;   // informational only

    auto operator<=>(const FeatureKey& other) const { return value <=> other.value; }
    bool operator==(const FeatureKey& other) const { return value == other.value; }
};

FeatureKey key_for(const Image& image, std::string source_path = {});

struct FeatureRecord {
    FeatureKey key;
    int timestep = 0;
    int scale_level = 0;
    PayloadKind payload_kind = PayloadKind::raw;
    std::vector<std::uint32_t> dims;
    std::vector<float> payload;  // row-major, product(dims) elements

    torch::Tensor to_tensor() const;
    static FeatureRecord from_tensor(const FeatureKey& key, int timestep, int scale_level,
                                     PayloadKind kind, const torch::Tensor& t);
};

struct RepositoryManifest {
    int version = 1;
    PayloadKind payload_kind = PayloadKind::raw;
    std::vector<int> timesteps;
    std::vector<int> scale_levels;
    std::int64_t record_count = 0;
    std::optional<std::string> compressor_checkpoint_ref;
};

/// Keyed store of per-image diffusion features. Immutable once built;
/// reads are lock-free and thread-safe.
class FeatureRepository {
   public:
    FeatureRepository() = default;

    const RepositoryManifest& manifest() const { return manifest_; }
    std::int64_t record_count() const;

    /// All records for the key, sorted by (timestep, scale_level).
    /// Throws KeyNotFound when nothing is stored for the key.
    std::vector<const FeatureRecord*> query(const FeatureKey& key) const;
    bool contains(const FeatureKey& key) const;
    std::vector<FeatureKey> keys() const;

    /// Record blob + JSON manifest under `dir`; bit-exact roundtrip.
    void persist(const std::filesystem::path& dir) const;
    static FeatureRepository load(const std::filesystem::path& dir);

    friend class RepositoryBuilder;
    friend FeatureRepository make_repository(RepositoryManifest manifest, std::vector<FeatureRecord> records);

   private:
    RepositoryManifest manifest_;
    std::map<Sha256, std::vector<FeatureRecord>> records_;
};

FeatureRepository make_repository(RepositoryManifest manifest, std::vector<FeatureRecord> records);

using TapExtractor = std::function<std::vector<FeatureTap>(const Image&, std::uint64_t noise_seed)>;

/// Runs the extractor over every (image, timestep) pair of the training
/// split. Images whose key appears in `forbidden_keys` (the test split)
/// are rejected — features are only ever harvested from training data.
FeatureRepository build_repository(const std::vector<std::pair<Image, std::string>>& dataset,
                                   const TapExtractor& extractor, const std::vector<int>& timesteps,
                                   const std::set<Sha256>& forbidden_keys = {});

}  // namespace d3n
