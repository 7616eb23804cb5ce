#pragma once

#include <map>
#include <optional>
#include <vector>

#include <torch/torch.h>

#include "d3n/repository.hpp"
#include "d3n/resvae.hpp"

namespace d3n {

/// FFT -> learnable spectral mask -> iFFT, per channel. The mask is
/// stored on the full spectrum grid and symmetrized in the forward pass
/// so the filtered output stays real.
class NoiseFilterImpl : public torch::nn::Module {
   public:
    NoiseFilterImpl(int height, int width);

    /// feature: [C,H,W] or [B,C,H,W].
    torch::Tensor forward(const torch::Tensor& feature);

    torch::Tensor& mask() { return mask_; }

   private:
    torch::Tensor mask_;  // [H,W], initialized to ones (identity filter)
};
TORCH_MODULE(NoiseFilter);

struct AttentionConfig {
    int heads = 4;
    int model_width = 0;

    int head_dim() const { return model_width / heads; }
    void validate() const;
};

/// Multi-head attention over token sequences. Query tokens come from X;
/// keys and values from Y (pass X twice for self-attention).
class MultiHeadAttentionImpl : public torch::nn::Module {
   public:
    explicit MultiHeadAttentionImpl(const AttentionConfig& config);

    /// X: [N,d], Y: [M,d]. If `attention_out` is given it receives the
    /// row-stochastic attention matrix of each head, [heads,N,M].
    torch::Tensor forward(const torch::Tensor& X, const torch::Tensor& Y,
                          torch::Tensor* attention_out = nullptr);

   private:
    AttentionConfig config_;
    torch::nn::Linear q_{nullptr}, k_{nullptr}, v_{nullptr}, out_{nullptr};
};
TORCH_MODULE(MultiHeadAttention);

struct FusionToggles {
    bool dual_self_attention = true;
    bool weighted_sum = true;
    bool residual = true;
    bool norm = true;
};

/// Three-branch fusion of detector and diffusion features:
///   out = det + w1*SA(det) + w2*SA(norm(ddpm)) + w3*CA(det, norm(ddpm))
/// Branch weights start at zero so the block is the identity at init.
/// Each component can be toggled off; with everything off the block is
/// plain cross-attention.
class DynamicCrossFusionImpl : public torch::nn::Module {
   public:
    DynamicCrossFusionImpl(const AttentionConfig& config, const FusionToggles& toggles = {});

    /// det_feat, ddpm_feat: [C,H,W] with C == model_width.
    torch::Tensor forward(const torch::Tensor& det_feat, const torch::Tensor& ddpm_feat);

    double w_det_sa() const { return w_det_sa_.item<double>(); }
    double w_ddpm_sa() const { return w_ddpm_sa_.item<double>(); }
    double w_cross() const { return w_cross_.item<double>(); }
    const FusionToggles& toggles() const { return toggles_; }
    void freeze_branch_weights();

   private:
    AttentionConfig config_;
    FusionToggles toggles_;
    MultiHeadAttention sa_det_{nullptr}, sa_ddpm_{nullptr}, cross_{nullptr};
    torch::nn::LayerNorm norm_{nullptr};
    torch::Tensor w_det_sa_, w_ddpm_sa_, w_cross_;
};
TORCH_MODULE(DynamicCrossFusion);

/// Rebuilds detector-aligned diffusion features from queried latents:
/// decode each timestep with its frozen per-scale decoder, concatenate
/// timesteps along channels, 1x1-project to the fusion width, and
/// resize to the detector's per-level dims.
class FeatureMapperImpl : public torch::nn::Module {
   public:
    /// `tap_channels`: decoded channel count per scale level.
    FeatureMapperImpl(const std::map<int, int>& tap_channels, const std::vector<int>& timesteps,
                      int fusion_width);

    /// records: all latent records of one image. target_hw: per scale
    /// level, the detector feature dims to map onto.
    /// Returns one [fusion_width,H,W] tensor per scale level (ascending).
    std::vector<torch::Tensor> forward(const std::vector<const FeatureRecord*>& records,
                                       std::map<int, ResVae>& decoders,
                                       const std::map<int, std::pair<int, int>>& target_hw);

   private:
    std::vector<int> timesteps_;
    int fusion_width_;
    std::map<int, torch::nn::Conv2d> projections_;
};
TORCH_MODULE(FeatureMapper);

/// Appends one row per epoch: epoch,w_det_sa,w_ddpm_sa,w_cross.
void append_branch_weight_log(const std::filesystem::path& csv, int epoch, double w_det_sa,
                              double w_ddpm_sa, double w_cross);

}  // namespace d3n
