#pragma once

#include <vector>

#include <torch/torch.h>

namespace d3n {

struct DenoiserConfig {
    int input_size = 64;          // square input, pixels
    int base_channels = 64;       // channels at the finest stage
    int depth_levels = 3;         // down/up stages; widths double per level
    int time_embedding_dim = 128;

    bool operator==(const DenoiserConfig&) const = default;

    void validate() const;
    /// Channel width of decoder stage `level` (0 = coarsest).
    int stage_channels(int level) const;
    /// Spatial size of decoder stage `level`.
    int stage_size(int level) const;
};

class ResidualBlockImpl : public torch::nn::Module {
   public:
    ResidualBlockImpl(int in_channels, int out_channels, int time_dim);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& time_emb);

   private:
    torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
    torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
    torch::nn::Linear time_proj_{nullptr};
    torch::nn::Conv2d skip_{nullptr};  // 1x1 projection when channels differ
};
TORCH_MODULE(ResidualBlock);

/// Noise predictor. forward() optionally captures the activation of each
/// decoder stage (after its final residual block, before upsampling),
/// coarse to fine.
class DenoiserUNetImpl : public torch::nn::Module {
   public:
    explicit DenoiserUNetImpl(const DenoiserConfig& config);

    /// x: [B,1,S,S]; t: [B] long, 1-based timesteps.
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& t,
                          std::vector<torch::Tensor>* decoder_taps = nullptr);

    const DenoiserConfig& config() const { return config_; }

   private:
    torch::Tensor time_embedding(const torch::Tensor& t) const;

    DenoiserConfig config_;
    torch::nn::Linear time_mlp1_{nullptr}, time_mlp2_{nullptr};
    torch::nn::Conv2d stem_{nullptr};
    std::vector<ResidualBlock> enc_blocks_;
    std::vector<torch::nn::Conv2d> downs_;
    ResidualBlock mid_{nullptr};
    ResidualBlock bottom_dec_{nullptr};
    std::vector<torch::nn::ConvTranspose2d> ups_;
    std::vector<ResidualBlock> dec_blocks_;
    torch::nn::GroupNorm out_norm_{nullptr};
    torch::nn::Conv2d out_conv_{nullptr};
};
TORCH_MODULE(DenoiserUNet);

}  // namespace d3n
