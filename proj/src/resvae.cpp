#include "d3n/resvae.hpp"

#include <algorithm>

#include "d3n/checkpoint.hpp"
#include "d3n/errors.hpp"

namespace d3n {

namespace {
constexpr const char* kVaeMagic = "D3NV";
}

void ResVaeConfig::validate() const {
    if (input_channels <= 0 || latent_channels <= 0 || residual_blocks_per_stage <= 0)
        throw InvalidArgument("resvae config fields must be positive");
    if (latent_channels >= input_channels)
        throw InvalidArgument("latent_channels must be smaller than input_channels");
    if (kl_scale < 0) throw InvalidArgument("kl_scale must be non-negative");
}

VaeResidualBlockImpl::VaeResidualBlockImpl(int channels) {
    conv1_ = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)));
    conv2_ = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)));
}

torch::Tensor VaeResidualBlockImpl::forward(const torch::Tensor& x) {
    return x + conv2_(torch::relu(conv1_(torch::relu(x))));
}

void VaeResidualBlockImpl::zero_branch() {
    torch::NoGradGuard ng;
    conv1_->weight.zero_();
    conv1_->bias.zero_();
    conv2_->weight.zero_();
    conv2_->bias.zero_();
}

ResVaeImpl::ResVaeImpl(const ResVaeConfig& config) : config_(config) {
    config_.validate();
    const int c = config_.input_channels;
    const int lc = config_.latent_channels;
    stem_ = register_module("stem", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, c, 3).padding(1)));
    for (int i = 0; i < config_.residual_blocks_per_stage; ++i)
        enc_blocks_.push_back(register_module("enc" + std::to_string(i), VaeResidualBlock(c)));
    down_ = register_module("down", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, c, 3).stride(2).padding(1)));
    mean_head_ = register_module("mean_head", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, lc, 1)));
    logvar_head_ = register_module("logvar_head", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, lc, 1)));

    latent_in_ = register_module("latent_in", torch::nn::Conv2d(torch::nn::Conv2dOptions(lc, c, 1)));
    for (int i = 0; i < config_.residual_blocks_per_stage; ++i)
        dec_blocks_.push_back(register_module("dec" + std::to_string(i), VaeResidualBlock(c)));
    up_ = register_module("up", torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(c, c, 4).stride(2).padding(1)));
    out_conv_ = register_module("out_conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, c, 3).padding(1)));
}

LatentCode ResVaeImpl::encode(const torch::Tensor& feature, torch::Generator* gen) {
    const bool batched = feature.dim() == 4;
    auto x = batched ? feature : feature.unsqueeze(0);
    if (x.size(1) != config_.input_channels)
        throw InvalidArgument("encode: expected " + std::to_string(config_.input_channels) +
                              " channels, got " + std::to_string(x.size(1)));
    auto h = stem_(x);
    for (auto& b : enc_blocks_) h = b->forward(h);
    h = torch::relu(down_(h));
    LatentCode code;
    code.mean = mean_head_(h);
    code.log_variance = logvar_head_(h);
    if (is_training()) {
        auto eps = gen ? torch::randn(code.mean.sizes(), *gen, code.mean.options())
                       : torch::randn(code.mean.sizes(), code.mean.options());
        code.sample = code.mean + torch::exp(0.5 * code.log_variance) * eps;
    } else {
        code.sample = code.mean;
    }
    if (!batched) {
        code.mean = code.mean.squeeze(0);
        code.log_variance = code.log_variance.squeeze(0);
        code.sample = code.sample.squeeze(0);
    }
    return code;
}

torch::Tensor ResVaeImpl::decode(const torch::Tensor& latent) {
    const bool batched = latent.dim() == 4;
    auto z = batched ? latent : latent.unsqueeze(0);
    if (z.size(1) != config_.latent_channels)
        throw InvalidArgument("decode: expected " + std::to_string(config_.latent_channels) +
                              " latent channels, got " + std::to_string(z.size(1)));
    auto h = torch::relu(latent_in_(z));
    for (auto& b : dec_blocks_) h = b->forward(h);
    h = torch::relu(up_(h));
    h = out_conv_(h);
    return batched ? h : h.squeeze(0);
}

torch::Tensor kl_divergence(const LatentCode& code) {
    if (!code.mean.sizes().equals(code.log_variance.sizes()))
        throw InvalidArgument("kl_divergence: mean and log_variance shapes differ");
    if (!torch::isfinite(code.mean).all().item<bool>() ||
        !torch::isfinite(code.log_variance).all().item<bool>())
        throw NumericError("kl_divergence: non-finite inputs");
    auto var = torch::exp(code.log_variance);
    return 0.5 * (code.mean * code.mean + var - 1.0 - code.log_variance).mean();
}

ResVaeTrainResult train_resvae(const FeatureRepository& repo,
                               const std::map<int, ResVaeConfig>& configs,
                               const ResVaeTrainSettings& settings) {
    if (repo.manifest().payload_kind != PayloadKind::raw)
        throw InvalidArgument("train_resvae: repository must hold raw payloads");

    // group records per scale level
    std::map<int, std::vector<torch::Tensor>> per_scale;
    for (const auto& key : repo.keys())
        for (const auto* r : repo.query(key)) per_scale[r->scale_level].push_back(r->to_tensor());

    torch::manual_seed(settings.seed);
    ResVaeTrainResult result;
    for (auto& [scale, feats] : per_scale) {
        auto cfg_it = configs.find(scale);
        if (cfg_it == configs.end())
            throw InvalidArgument("train_resvae: no config for scale level " + std::to_string(scale));
        const auto& cfg = cfg_it->second;
        if (feats.front().size(0) != cfg.input_channels)
            throw InvalidArgument("train_resvae: config channels do not match records at scale " +
                                  std::to_string(scale));

        ResVae model(cfg);
        model->train();
        torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(settings.lr));
        auto gen = torch::make_generator<torch::CPUGeneratorImpl>(settings.seed + 77 * scale);

        auto data = torch::stack(feats);
        const auto n = data.size(0);
        std::vector<double>& log = result.loss_logs[scale];
        for (int epoch = 0; epoch < settings.epochs; ++epoch) {
            auto perm = torch::randperm(n, gen, torch::kLong);
            double epoch_loss = 0;
            int batches = 0;
            for (std::int64_t off = 0; off < n; off += settings.batch_size) {
                auto idx = perm.slice(0, off, std::min<std::int64_t>(off + settings.batch_size, n));
                auto batch = data.index_select(0, idx);
                opt.zero_grad();
                auto code = model->encode(batch, &gen);
                auto recon = model->decode(code.sample);
                auto loss = torch::mse_loss(recon, batch) + cfg.kl_scale * kl_divergence(code);
                const double lv = loss.item<double>();
                if (!std::isfinite(lv))
                    throw TrainingFailure("non-finite resvae loss at epoch " + std::to_string(epoch));
                loss.backward();
                opt.step();
                epoch_loss += lv;
                ++batches;
            }
            log.push_back(epoch_loss / std::max(batches, 1));
        }
        model->eval();
        result.models.emplace(scale, model);
    }
    return result;
}

FeatureRepository compress_repository(const FeatureRepository& repo, std::map<int, ResVae>& models,
                                      const std::string& checkpoint_ref) {
    if (repo.manifest().payload_kind != PayloadKind::raw)
        throw InvalidArgument("compress_repository: repository must hold raw payloads");

    torch::NoGradGuard ng;
    std::size_t raw_bytes = 0, latent_bytes = 0;
    std::vector<FeatureRecord> out;
    for (const auto& key : repo.keys()) {
        for (const auto* r : repo.query(key)) {
            auto it = models.find(r->scale_level);
            if (it == models.end())
                throw InvalidArgument("compress_repository: no compressor for scale " +
                                      std::to_string(r->scale_level));
            auto& model = it->second;
            model->eval();
            auto feat = r->to_tensor();
            if (feat.size(0) != model->config().input_channels)
                throw InvalidArgument("compress_repository: channel mismatch at scale " +
                                      std::to_string(r->scale_level));
            auto code = model->encode(feat);
            out.push_back(FeatureRecord::from_tensor(r->key, r->timestep, r->scale_level,
                                                     PayloadKind::latent, code.mean));
            raw_bytes += r->payload.size() * sizeof(float);
            latent_bytes += out.back().payload.size() * sizeof(float);
        }
    }
    if (latent_bytes >= raw_bytes)
        throw StateError("compress_repository: latent payload not smaller than raw");

    RepositoryManifest m = repo.manifest();
    m.payload_kind = PayloadKind::latent;
    m.compressor_checkpoint_ref = checkpoint_ref;
    return make_repository(std::move(m), std::move(out));
}

namespace {

struct VaeSet : torch::nn::Module {
    std::map<int, ResVae> models;
    explicit VaeSet(std::map<int, ResVae>& in) {
        for (auto& [scale, m] : in)
            models.emplace(scale, register_module("s" + std::to_string(scale), m));
    }
};

}  // namespace

void save_resvae_set(const std::filesystem::path& path, std::map<int, ResVae>& models) {
    nlohmann::json scales = nlohmann::json::array();
    for (auto& [scale, m] : models) {
        const auto& c = m->config();
        scales.push_back({{"scale", scale},
                          {"input_channels", c.input_channels},
                          {"latent_channels", c.latent_channels},
                          {"residual_blocks_per_stage", c.residual_blocks_per_stage},
                          {"kl_scale", c.kl_scale}});
    }
    VaeSet set(models);
    save_checkpoint(path, kVaeMagic, {{"scales", scales}}, set);
}

std::map<int, ResVae> load_resvae_set(const std::filesystem::path& path) {
    auto header = read_checkpoint_header(path, kVaeMagic);
    std::map<int, ResVae> models;
    for (const auto& s : header.at("scales")) {
        ResVaeConfig c;
        c.input_channels = s.at("input_channels");
        c.latent_channels = s.at("latent_channels");
        c.residual_blocks_per_stage = s.at("residual_blocks_per_stage");
        c.kl_scale = s.at("kl_scale");
        models.emplace(s.at("scale").get<int>(), ResVae(c));
    }
    VaeSet set(models);
    load_checkpoint(path, kVaeMagic, set);
    for (auto& [scale, m] : models) m->eval();
    return models;
}

}  // namespace d3n
