#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "gardlab/encoder.hpp"
#include "gardlab/nn.hpp"

namespace gardlab {

// Per-view image decoder: concatenated level-M latents -> transformer blocks
// with frame-level attention -> per-token linear head -> sigmoid.
struct RgbDecoderConfig {
    int channels = 96;  // backbone C; input is 4*C
    int hidden = 128;
    int blocks = 2;
    int heads = 4;
    int mlp_ratio = 4;
    int patch = 8;

    void validate() const;
    std::string digest_string() const;
};

class RgbDecoder {
  public:
    RgbDecoder(const RgbDecoderConfig& cfg, uint64_t init_seed);

    // level_nodes: the 4 selected feature levels, each (V*N) x C.
    int forward(Graph& g, nn::Binder& bi, const std::vector<int>& level_nodes, int views,
                int tokens_per_view) const;

    // No-grad decode to images in [0,1].
    std::vector<Image> decode(const LayerLatents& latents, const EncoderConfig& ecfg,
                              int image_size) const;

    nn::ParamSet& params() { return params_; }
    const nn::ParamSet& params() const { return params_; }
    const RgbDecoderConfig& config() const { return cfg_; }
    nn::LinearLayer& head() { return head_; }

  private:
    RgbDecoderConfig cfg_;
    nn::ParamSet params_;
    nn::LinearLayer in_proj_;
    std::vector<nn::TransformerBlock> blocks_;
    nn::LinearLayer head_;
};

std::vector<Image> rgb_tokens_to_images(const Tensor& tokens, int views, int image_size,
                                        int patch);

struct RgbTrainConfig {
    int steps = 600;
    int batch_scenes = 1;
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double clip_norm = 1.0;
    double ema_decay = 0.9995;
    int min_views = 2;
    int max_views = 3;
    uint64_t seed = 0;
};

// Minimizes mean absolute error between decoded images and the clean inputs
// on clean latents from the frozen encoder; same optimizer recipe as the
// denoiser stage (AdamW + clipping + EMA).
void train_rgb_decoder(RgbDecoder& decoder, const MultiViewEncoder& encoder,
                       const std::vector<MultiViewSample>& scenes, const RgbTrainConfig& cfg,
                       nn::AdamW& opt, nn::Ema& ema, int64_t start_step,
                       const std::function<void(const StepLog&)>& on_step);

}  // namespace gardlab
