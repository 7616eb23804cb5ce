#pragma once

#include <filesystem>
#include <vector>

#include <torch/torch.h>

#include "d3n/image.hpp"
#include "d3n/schedule.hpp"
#include "d3n/unet.hpp"

namespace d3n {

/// One captured decoder activation: timestep, decoder stage (0 = coarsest),
/// feature [C,H,W] at the stage's own spatial size.
struct FeatureTap {
    int timestep = 0;
    int scale_level = 0;
    torch::Tensor feature;
};

struct DiffusionTrainSettings {
    double lr_max = 2e-4;
    double lr_min = 1e-5;   // cosine-annealed between the two
    int batch_size = 2;
    int steps = 200;
    std::uint64_t seed = 0;
};

struct DiffusionTrainResult {
    DenoiserUNet model{nullptr};
    std::vector<double> loss_log;  // one entry per optimizer step
};

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, elementwise.
torch::Tensor forward_noise(const torch::Tensor& x0, int t, const torch::Tensor& eps,
                            const NoiseSchedule& schedule);

/// One ancestral reverse step: posterior mean from the predicted noise,
/// fixed posterior variance; no noise added at t=1.
torch::Tensor reverse_step(const torch::Tensor& x_t, int t, DenoiserUNet& denoiser,
                           const NoiseSchedule& schedule, torch::Generator& gen);

/// MSE noise-prediction training with Adam; deterministic given seed.
DiffusionTrainResult train_denoiser(const std::vector<torch::Tensor>& dataset,
                                    const NoiseSchedule& schedule, const DenoiserConfig& config,
                                    const DiffusionTrainSettings& settings);

/// Noise the image at each requested timestep (eps drawn from noise_seed),
/// run one denoiser pass, capture every decoder stage.
/// Returns |timesteps| x depth_levels taps, deterministic in noise_seed.
std::vector<FeatureTap> extract_decoder_features(const Image& image, const std::vector<int>& timesteps,
                                                 DenoiserUNet& denoiser, const NoiseSchedule& schedule,
                                                 std::uint64_t noise_seed);

void save_denoiser(const std::filesystem::path& path, DenoiserUNet& model, int schedule_steps);

struct LoadedDenoiser {
    DenoiserUNet model{nullptr};
    int schedule_steps = 0;
};
LoadedDenoiser load_denoiser(const std::filesystem::path& path);
/// Throws StateError if the stored config differs from `expected`.
LoadedDenoiser load_denoiser(const std::filesystem::path& path, const DenoiserConfig& expected);

}  // namespace d3n
