#pragma once

#include <filesystem>
#include <map>
#include <vector>

#include <torch/torch.h>

#include "d3n/repository.hpp"

namespace d3n {

struct ResVaeConfig {
    int input_channels = 512;
    int latent_channels = 64;
    int residual_blocks_per_stage = 2;
    double kl_scale = 1.0;

    bool operator==(const ResVaeConfig&) const = default;
    void validate() const;
};

struct LatentCode {
    torch::Tensor mean;          // [latent_C, h, w]
    torch::Tensor log_variance;  // same shape
    torch::Tensor sample;        // mean at inference, reparameterized draw in training
};

class VaeResidualBlockImpl : public torch::nn::Module {
   public:
    explicit VaeResidualBlockImpl(int channels);
    torch::Tensor forward(const torch::Tensor& x);
    /// Zeroes the residual branch so the block is exactly the identity.
    void zero_branch();

   private:
    torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
};
TORCH_MODULE(VaeResidualBlock);

/// Encoder: stem conv + residual blocks + one 2x downsample to
/// (mean, logvar) heads. Decoder mirrors with one 2x upsample.
class ResVaeImpl : public torch::nn::Module {
   public:
    explicit ResVaeImpl(const ResVaeConfig& config);

    /// feature: [C,H,W] or [B,C,H,W]. Training mode reparameterizes with
    /// `gen`; eval mode sets sample = mean.
    LatentCode encode(const torch::Tensor& feature, torch::Generator* gen = nullptr);
    torch::Tensor decode(const torch::Tensor& latent);

    const ResVaeConfig& config() const { return config_; }
    std::vector<VaeResidualBlock>& encoder_blocks() { return enc_blocks_; }
    std::vector<VaeResidualBlock>& decoder_blocks() { return dec_blocks_; }

   private:
    ResVaeConfig config_;
    torch::nn::Conv2d stem_{nullptr};
    std::vector<VaeResidualBlock> enc_blocks_;
    torch::nn::Conv2d down_{nullptr};
    torch::nn::Conv2d mean_head_{nullptr}, logvar_head_{nullptr};
    torch::nn::Conv2d latent_in_{nullptr};
    torch::nn::ConvTranspose2d up_{nullptr};
    std::vector<VaeResidualBlock> dec_blocks_;
    torch::nn::Conv2d out_conv_{nullptr};
};
TORCH_MODULE(ResVae);

/// 0.5 * (mu^2 + sigma^2 - 1 - log sigma^2), averaged per element.
torch::Tensor kl_divergence(const LatentCode& code);

struct ResVaeTrainSettings {
    double lr = 1e-3;
    int batch_size = 64;
    int epochs = 2000;
    std::uint64_t seed = 0;
};

struct ResVaeTrainResult {
    /// One trained compressor per scale level present in the repository.
    std::map<int, ResVae> models;
    std::map<int, std::vector<double>> loss_logs;  // per scale, per epoch
};

/// Pre-trains one ResVAE per scale level on a raw repository,
/// minimizing MSE + kl_scale * KL. Deterministic given seed.
/// `configs` maps scale level to its config (channel widths differ per scale).
ResVaeTrainResult train_resvae(const FeatureRepository& repo,
                               const std::map<int, ResVaeConfig>& configs,
                               const ResVaeTrainSettings& settings);

/// Re-encodes every raw record to its latent mean. Payload shrinks by the
/// channel ratio times the spatial downsample factor squared.
FeatureRepository compress_repository(const FeatureRepository& repo, std::map<int, ResVae>& models,
                                      const std::string& checkpoint_ref);

void save_resvae_set(const std::filesystem::path& path, std::map<int, ResVae>& models);
std::map<int, ResVae> load_resvae_set(const std::filesystem::path& path);

}  // namespace d3n
