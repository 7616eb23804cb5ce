#include "d3n/fusion.hpp"

#include <cmath>
#include <fstream>

#include "d3n/errors.hpp"

namespace d3n {

NoiseFilterImpl::NoiseFilterImpl(int height, int width) {
    if (height <= 0 || width <= 0) throw InvalidArgument("noise filter dims must be positive");
    mask_ = register_parameter("mask", torch::ones({height, width}));
}

torch::Tensor NoiseFilterImpl::forward(const torch::Tensor& feature) {
    const auto H = feature.size(-2), W = feature.size(-1);
    if (H != mask_.size(0) || W != mask_.size(1))
        throw InvalidArgument("noise_filter: mask dims do not match feature spectrum dims");
    // m_sym[u,v] = m[-u mod H, -v mod W] averaged with m keeps the
    // spectrum conjugate-symmetric, so the inverse transform is real.
    auto mirrored = torch::roll(torch::flip(mask_, {0, 1}), {1, 1}, {0, 1});
    auto m = 0.5 * (mask_ + mirrored);
    auto spectrum = torch::fft::fft2(feature);
    return torch::real(torch::fft::ifft2(spectrum * m));
}

void AttentionConfig::validate() const {
    if (heads <= 0 || model_width <= 0) throw InvalidArgument("attention config must be positive");
    if (model_width % heads != 0) throw InvalidArgument("model_width must be divisible by heads");
}

MultiHeadAttentionImpl::MultiHeadAttentionImpl(const AttentionConfig& config) : config_(config) {
    config_.validate();
    const int d = config_.model_width;
    q_ = register_module("q", torch::nn::Linear(d, d));
    k_ = register_module("k", torch::nn::Linear(d, d));
    v_ = register_module("v", torch::nn::Linear(d, d));
    out_ = register_module("out", torch::nn::Linear(d, d));
}

torch::Tensor MultiHeadAttentionImpl::forward(const torch::Tensor& X, const torch::Tensor& Y,
                                              torch::Tensor* attention_out) {
    if (X.size(-1) != config_.model_width || Y.size(-1) != config_.model_width)
        throw InvalidArgument("attention: token width mismatch with model_width");
    const auto N = X.size(0), M = Y.size(0);
    const int h = config_.heads, dk = config_.head_dim();

    auto split = [&](const torch::Tensor& t, std::int64_t len) {
        return t.view({len, h, dk}).transpose(0, 1);  // [h, len, dk]
    };
    auto Q = split(q_(X), N);
    auto K = split(k_(Y), M);
    auto V = split(v_(Y), M);

    auto logits = torch::matmul(Q, K.transpose(1, 2)) / std::sqrt(static_cast<double>(dk));
    auto attn = torch::softmax(logits, -1);  // [h, N, M], rows sum to 1
    if (attention_out) *attention_out = attn.detach();

    auto heads = torch::matmul(attn, V);                       // [h, N, dk]
    auto merged = heads.transpose(0, 1).reshape({N, h * dk});  // concat heads
    return out_(merged);
}

DynamicCrossFusionImpl::DynamicCrossFusionImpl(const AttentionConfig& config, const FusionToggles& toggles)
    : config_(config), toggles_(toggles) {
    config_.validate();
    cross_ = register_module("cross", MultiHeadAttention(config_));
    if (toggles_.dual_self_attention) {
        sa_det_ = register_module("sa_det", MultiHeadAttention(config_));
        sa_ddpm_ = register_module("sa_ddpm", MultiHeadAttention(config_));
    }
    if (toggles_.norm)
        norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({config_.model_width})));
    if (toggles_.weighted_sum) {
        w_det_sa_ = register_parameter("w_det_sa", torch::zeros({}));
        w_ddpm_sa_ = register_parameter("w_ddpm_sa", torch::zeros({}));
        w_cross_ = register_parameter("w_cross", torch::zeros({}));
    } else {
        w_det_sa_ = register_buffer("w_det_sa", torch::ones({}));
        w_ddpm_sa_ = register_buffer("w_ddpm_sa", torch::ones({}));
        w_cross_ = register_buffer("w_cross", torch::ones({}));
    }
}

void DynamicCrossFusionImpl::freeze_branch_weights() {
    w_det_sa_.set_requires_grad(false);
    w_ddpm_sa_.set_requires_grad(false);
    w_cross_.set_requires_grad(false);
}

torch::Tensor DynamicCrossFusionImpl::forward(const torch::Tensor& det_feat, const torch::Tensor& ddpm_feat) {
    if (!det_feat.sizes().equals(ddpm_feat.sizes()))
        throw InvalidArgument("dynamic_cross_fusion: feature dims mismatch");
    const auto C = det_feat.size(0), H = det_feat.size(1), W = det_feat.size(2);
    if (C != config_.model_width)
        throw InvalidArgument("dynamic_cross_fusion: channel count must equal model_width");

    // tokens over spatial positions
    auto X = det_feat.view({C, H * W}).transpose(0, 1);  // [HW, C]
    auto Y = ddpm_feat.view({C, H * W}).transpose(0, 1);
    auto Yn = toggles_.norm ? norm_(Y) : Y;

    auto out = w_cross_ * cross_->forward(X, Yn);
    if (toggles_.dual_self_attention)
        out = out + w_det_sa_ * sa_det_->forward(X, X) + w_ddpm_sa_ * sa_ddpm_->forward(Yn, Yn);
    if (toggles_.residual) out = out + X;
    return out.transpose(0, 1).view({C, H, W});
}

FeatureMapperImpl::FeatureMapperImpl(const std::map<int, int>& tap_channels,
                                     const std::vector<int>& timesteps, int fusion_width)
    : timesteps_(timesteps), fusion_width_(fusion_width) {
    if (timesteps_.empty()) throw InvalidArgument("feature mapper needs at least one timestep");
    for (const auto& [level, channels] : tap_channels) {
        const int in = channels * static_cast<int>(timesteps_.size());
        projections_.emplace(level, register_module("proj" + std::to_string(level),
                                                    torch::nn::Conv2d(torch::nn::Conv2dOptions(in, fusion_width_, 1))));
    }
}

std::vector<torch::Tensor> FeatureMapperImpl::forward(
    const std::vector<const FeatureRecord*>& records, std::map<int, ResVae>& decoders,
    const std::map<int, std::pair<int, int>>& target_hw) {
    std::map<std::pair<int, int>, const FeatureRecord*> by_key;  // (t, level) -> record
    for (const auto* r : records) by_key[{r->timestep, r->scale_level}] = r;

    std::vector<torch::Tensor> out;
    for (const auto& [level, hw] : target_hw) {
        std::vector<torch::Tensor> decoded;
        for (int t : timesteps_) {
            auto it = by_key.find({t, level});
            if (it == by_key.end())
                throw IncompleteFeatureSet("missing feature record for timestep " + std::to_string(t) +
                                           ", scale level " + std::to_string(level));
            const auto* r = it->second;
            auto latent = r->to_tensor();
            auto& dec = decoders.at(level);
            decoded.push_back(r->payload_kind == PayloadKind::latent ? dec->decode(latent) : latent);
        }
        auto stacked = torch::cat(decoded, 0).unsqueeze(0);  // [1, 3C, h, w]
        auto projected = projections_.at(level)(stacked);
        auto resized = torch::nn::functional::interpolate(
            projected, torch::nn::functional::InterpolateFuncOptions()
                           .size(std::vector<std::int64_t>{hw.first, hw.second})
                           .mode(torch::kBilinear)
                           .align_corners(false));
        out.push_back(resized.squeeze(0));
    }
    return out;
}

void append_branch_weight_log(const std::filesystem::path& csv, int epoch, double w_det_sa,
                              double w_ddpm_sa, double w_cross) {
    const bool fresh = !std::filesystem::exists(csv);
    std::ofstream out(csv, std::ios::app);
    if (!out) throw IoError("cannot write branch weight log: " + csv.string());
    if (fresh) out << "epoch,w_det_sa,w_ddpm_sa,w_cross\n";
    out << epoch << "," << w_det_sa << "," << w_ddpm_sa << "," << w_cross << "\n";
}

}  // namespace d3n
