#include "d3n/unet.hpp"

#include <cmath>

#include "d3n/errors.hpp"

namespace d3n {

namespace {

int group_count(int channels) {
    for (int g = 8; g > 1; --g)
        if (channels % g == 0) return g;
    return 1;
}

}  // namespace

void DenoiserConfig::validate() const {
    if (input_size <= 0 || base_channels <= 0 || depth_levels <= 0 || time_embedding_dim <= 0)
        throw InvalidArgument("denoiser config fields must be positive");
    const int div = 1 << (depth_levels - 1);
    if (input_size % div != 0)
        throw InvalidArgument("input_size must be divisible by 2^(depth_levels-1)");
}

int DenoiserConfig::stage_channels(int level) const {
    // level 0 = coarsest decoder stage
    return base_channels << (depth_levels - 1 - level);
}

int DenoiserConfig::stage_size(int level) const {
    return input_size >> (depth_levels - 1 - level);
}

ResidualBlockImpl::ResidualBlockImpl(int in_channels, int out_channels, int time_dim) {
    norm1_ = register_module("norm1", torch::nn::GroupNorm(group_count(in_channels), in_channels));
    conv1_ = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 3).padding(1)));
    norm2_ = register_module("norm2", torch::nn::GroupNorm(group_count(out_channels), out_channels));
    conv2_ = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out_channels, out_channels, 3).padding(1)));
    time_proj_ = register_module("time_proj", torch::nn::Linear(time_dim, out_channels));
    if (in_channels != out_channels)
        skip_ = register_module("skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 1)));
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& time_emb) {
    auto h = conv1_(torch::silu(norm1_(x)));
    h = h + time_proj_(time_emb).unsqueeze(-1).unsqueeze(-1);
    h = conv2_(torch::silu(norm2_(h)));
    auto s = skip_ ? skip_(x) : x;
    return s + h;
}

DenoiserUNetImpl::DenoiserUNetImpl(const DenoiserConfig& config) : config_(config) {
    config_.validate();
    const int td = config_.time_embedding_dim;
    time_mlp1_ = register_module("time_mlp1", torch::nn::Linear(td, td));
    time_mlp2_ = register_module("time_mlp2", torch::nn::Linear(td, td));

    const int L = config_.depth_levels;
    auto width = [&](int i) { return config_.base_channels << i; };  // encoder stage i

    stem_ = register_module("stem", torch::nn::Conv2d(torch::nn::Conv2dOptions(1, width(0), 3).padding(1)));
    for (int i = 0; i < L; ++i) {
        enc_blocks_.push_back(register_module("enc" + std::to_string(i), ResidualBlock(width(i), width(i), td)));
        if (i + 1 < L)
            downs_.push_back(register_module(
                "down" + std::to_string(i),
                torch::nn::Conv2d(torch::nn::Conv2dOptions(width(i), width(i + 1), 3).stride(2).padding(1))));
    }
    mid_ = register_module("mid", ResidualBlock(width(L - 1), width(L - 1), td));
    bottom_dec_ = register_module("bottom_dec", ResidualBlock(width(L - 1), width(L - 1), td));
    for (int i = L - 2; i >= 0; --i) {
        ups_.push_back(register_module(
            "up" + std::to_string(i),
            torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(width(i + 1), width(i), 4).stride(2).padding(1))));
        // input = upsampled + skip concat
        dec_blocks_.push_back(register_module("dec" + std::to_string(i), ResidualBlock(2 * width(i), width(i), td)));
    }
    out_norm_ = register_module("out_norm", torch::nn::GroupNorm(group_count(width(0)), width(0)));
    out_conv_ = register_module("out_conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(width(0), 1, 3).padding(1)));
}

torch::Tensor DenoiserUNetImpl::time_embedding(const torch::Tensor& t) const {
    const int half = config_.time_embedding_dim / 2;
    auto freqs = torch::exp(torch::arange(half, torch::kFloat32) * (-std::log(10000.0) / (half - 1)));
    auto args = t.to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
    return torch::cat({torch::sin(args), torch::cos(args)}, 1);
}

torch::Tensor DenoiserUNetImpl::forward(const torch::Tensor& x, const torch::Tensor& t,
                                        std::vector<torch::Tensor>* decoder_taps) {
    auto temb = time_mlp2_(torch::silu(time_mlp1_(time_embedding(t))));

    std::vector<torch::Tensor> skips;
    auto h = stem_(x);
    const int L = config_.depth_levels;
    for (int i = 0; i < L; ++i) {
        h = enc_blocks_[i]->forward(h, temb);
        if (i + 1 < L) {
            skips.push_back(h);
            h = downs_[i](h);
        }
    }
    h = mid_->forward(h, temb);
    h = bottom_dec_->forward(h, temb);
    if (decoder_taps) decoder_taps->push_back(h);

    for (std::size_t j = 0; j < ups_.size(); ++j) {
        h = ups_[j](h);
        h = torch::cat({h, skips[skips.size() - 1 - j]}, 1);
        h = dec_blocks_[j]->forward(h, temb);
        if (decoder_taps) decoder_taps->push_back(h);
    }
    return out_conv_(torch::silu(out_norm_(h)));
}

}  // namespace d3n
