#include "d3n/diffusion.hpp"

#include <cmath>

#include "d3n/checkpoint.hpp"
#include "d3n/errors.hpp"

namespace d3n {

namespace {
constexpr const char* kDenoiserMagic = "D3NU";

void check_t(int t, const NoiseSchedule& schedule) {
    if (t < 1 || t > schedule.total_steps)
        throw InvalidArgument("timestep " + std::to_string(t) + " outside [1," +
                              std::to_string(schedule.total_steps) + "]");
}
}  // namespace

torch::Tensor forward_noise(const torch::Tensor& x0, int t, const torch::Tensor& eps,
                            const NoiseSchedule& schedule) {
    check_t(t, schedule);
    if (!eps.sizes().equals(x0.sizes()))
        throw InvalidArgument("eps shape must match x0 shape");
    const double ab = schedule.alpha_bar(t);
    return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

torch::Tensor reverse_step(const torch::Tensor& x_t, int t, DenoiserUNet& denoiser,
                           const NoiseSchedule& schedule, torch::Generator& gen) {
    check_t(t, schedule);
    torch::NoGradGuard ng;
    auto tt = torch::full({x_t.size(0)}, t, torch::kLong);
    auto eps_hat = denoiser->forward(x_t, tt);

    const double beta = schedule.beta(t);
    const double alpha = schedule.alpha(t);
    const double ab = schedule.alpha_bar(t);
    auto mean = (x_t - beta / std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(alpha);
    if (t == 1) return mean;

    const double ab_prev = schedule.alpha_bar_prev(t);
    const double posterior_var = (1.0 - ab_prev) / (1.0 - ab) * beta;
    auto z = torch::randn(x_t.sizes(), gen, x_t.options());
    return mean + std::sqrt(posterior_var) * z;
}

DiffusionTrainResult train_denoiser(const std::vector<torch::Tensor>& dataset,
                                    const NoiseSchedule& schedule, const DenoiserConfig& config,
                                    const DiffusionTrainSettings& settings) {
    if (dataset.empty()) throw InvalidArgument("train_denoiser: empty dataset");
    config.validate();
    for (const auto& img : dataset)
        if (img.size(-1) != config.input_size || img.size(-2) != config.input_size)
            throw InvalidArgument("train_denoiser: image does not match config.input_size");

    torch::manual_seed(settings.seed);
    DenoiserUNet model(config);
    model->train();
    torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(settings.lr_max));

    auto gen = torch::make_generator<torch::CPUGeneratorImpl>(settings.seed ^ 0x5eedULL);

    DiffusionTrainResult result;
    result.model = model;
    const int n = static_cast<int>(dataset.size());
    for (int step = 0; step < settings.steps; ++step) {
        // cosine-annealed learning rate, lr_max -> lr_min
        const double frac = settings.steps > 1 ? static_cast<double>(step) / (settings.steps - 1) : 0.0;
        const double lr = settings.lr_min +
                          0.5 * (settings.lr_max - settings.lr_min) * (1.0 + std::cos(M_PI * frac));
        for (auto& group : opt.param_groups())
            static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);

        std::vector<torch::Tensor> xs, epss;
        std::vector<std::int64_t> ts;
        for (int b = 0; b < settings.batch_size; ++b) {
            const auto idx = torch::randint(0, n, {1}, gen, torch::kLong).item<std::int64_t>();
            const int t = 1 + static_cast<int>(
                                  torch::randint(0, schedule.total_steps, {1}, gen, torch::kLong).item<std::int64_t>());
            auto x0 = dataset[static_cast<std::size_t>(idx)];
            auto eps = torch::randn(x0.sizes(), gen, x0.options());
            xs.push_back(forward_noise(x0, t, eps, schedule));
            epss.push_back(eps);
            ts.push_back(t);
        }
        auto x = torch::stack(xs);
        auto eps = torch::stack(epss);
        auto t = torch::tensor(ts, torch::kLong);

        opt.zero_grad();
        auto pred = model->forward(x, t);
        auto loss = torch::mse_loss(pred, eps);
        const double loss_val = loss.item<double>();
        if (!std::isfinite(loss_val))
            throw TrainingFailure("non-finite denoiser loss at step " + std::to_string(step));
        loss.backward();
        opt.step();
        result.loss_log.push_back(loss_val);
    }
    model->eval();
    return result;
}

std::vector<FeatureTap> extract_decoder_features(const Image& image, const std::vector<int>& timesteps,
                                                 DenoiserUNet& denoiser, const NoiseSchedule& schedule,
                                                 std::uint64_t noise_seed) {
    if (!denoiser) throw StateError("extract_decoder_features: missing denoiser state");
    const auto& config = denoiser->config();
    for (int t : timesteps) check_t(t, schedule);

    auto x0 = to_tensor(rescale(image, config.input_size)).unsqueeze(0);
    auto gen = torch::make_generator<torch::CPUGeneratorImpl>(noise_seed);

    torch::NoGradGuard ng;
    denoiser->eval();
    std::vector<FeatureTap> taps;
    for (int t : timesteps) {
        auto eps = torch::randn(x0.sizes(), gen, x0.options());
        auto x_t = forward_noise(x0, t, eps, schedule);
        std::vector<torch::Tensor> stage_outputs;
        auto tt = torch::full({1}, t, torch::kLong);
        denoiser->forward(x_t, tt, &stage_outputs);
        for (std::size_t level = 0; level < stage_outputs.size(); ++level)
            taps.push_back({t, static_cast<int>(level), stage_outputs[level].squeeze(0).clone()});
    }
    return taps;
}

void save_denoiser(const std::filesystem::path& path, DenoiserUNet& model, int schedule_steps) {
    const auto& c = model->config();
    nlohmann::json header{{"input_size", c.input_size},
                          {"base_channels", c.base_channels},
                          {"depth_levels", c.depth_levels},
                          {"time_embedding_dim", c.time_embedding_dim},
                          {"schedule_steps", schedule_steps}};
    save_checkpoint(path, kDenoiserMagic, header, *model);
}

static DenoiserConfig config_from_header(const nlohmann::json& h) {
    DenoiserConfig c;
    c.input_size = h.at("input_size");
    c.base_channels = h.at("base_channels");
    c.depth_levels = h.at("depth_levels");
    c.time_embedding_dim = h.at("time_embedding_dim");
    return c;
}

LoadedDenoiser load_denoiser(const std::filesystem::path& path) {
    auto header = read_checkpoint_header(path, kDenoiserMagic);
    LoadedDenoiser out;
    out.model = DenoiserUNet(config_from_header(header));
    load_checkpoint(path, kDenoiserMagic, *out.model);
    out.model->eval();
    out.schedule_steps = header.at("schedule_steps");
    return out;
}

LoadedDenoiser load_denoiser(const std::filesystem::path& path, const DenoiserConfig& expected) {
    auto header = read_checkpoint_header(path, kDenoiserMagic);
    if (config_from_header(header) != expected)
        throw StateError("denoiser checkpoint config does not match expected config: " + path.string());
    return load_denoiser(path);
}

}  // namespace d3n
