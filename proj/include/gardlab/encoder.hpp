#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gardlab/geometry.hpp"
#include "gardlab/nn.hpp"

namespace gardlab {

// Toy-scaled multi-view reconstructor: an L-layer transformer alternating
// frame-level (odd layers) and global cross-view (even layers) attention,
// with a geometry decoder reading four feature levels.
struct EncoderConfig {
    int layers = 8;        // L
    int channels = 96;     // C
    int patch = 8;
    int heads = 4;
    int mlp_ratio = 4;
    int insertion_layer = 3;                    // K, where the denoiser plugs in
    std::vector<int> feature_levels = {4, 6, 7, 8};  // M, 1-based layer indices
    int max_views = 16;
    bool use_view_embedding = true;
    int pose_hidden = 96;

    void validate() const;
    int tokens_per_view(int image_size) const;
    std::string digest_string() const;
};

struct LayerLatents {
    int views = 0;
    int tokens_per_view = 0;
    int channels = 0;
    std::vector<Tensor> layers;  // layer l at index l-1, each (V*N) x C

    const Tensor& at_layer(int l) const { return layers.at(l - 1); }
    Tensor& at_layer(int l) { return layers.at(l - 1); }
    int layer_count() const { return static_cast<int>(layers.size()); }
};

struct GeometryPrediction {
    std::vector<DepthMap> depth;
    std::vector<CameraPose> poses;  // relative to view 0 (anchored gauge)
};

// Flattens images into patch tokens (pixels centered around zero).
Tensor patchify(const std::vector<Image>& images, int patch);

class MultiViewEncoder {
  public:
    MultiViewEncoder(const EncoderConfig& cfg, uint64_t init_seed);

    // Full forward; returns the graph id of every layer output (1-based l at
    // index l-1). Records nothing when the graph is non-recording.
    std::vector<int> forward(Graph& g, nn::Binder& bi, const std::vector<Image>& images) const;

    // Same computation restricted to layers k+1..L, seeded with a layer-k
    // tensor node. Returns ids for layers k+1..L in order.
    std::vector<int> forward_from(Graph& g, nn::Binder& bi, int zk_node, int views,
                                  int from_layer) const;

    // No-grad conveniences.
    LayerLatents encode(const std::vector<Image>& images) const;
    LayerLatents continue_from_layer(const Tensor& zk, int views, int from_layer) const;

    nn::ParamSet& params() { return params_; }
    const nn::ParamSet& params() const { return params_; }
    const EncoderConfig& config() const { return cfg_; }

  private:
    int embed(Graph& g, nn::Binder& bi, const std::vector<Image>& images) const;
    int layer_forward(Graph& g, nn::Binder& bi, int x, int layer, int views) const;

    EncoderConfig cfg_;
    nn::ParamSet params_;
    nn::LinearLayer patch_embed_;
    nn::Parameter* view_embed_ = nullptr;
    std::vector<nn::TransformerBlock> blocks_;

    friend class GeometryDecoder;
};

class GeometryDecoder {
  public:
    GeometryDecoder(const EncoderConfig& cfg, nn::ParamSet& params, uint64_t init_seed);

    struct GraphOut {
        int depth_tokens = -1;  // (V*N) x patch^2, positive (softplus)
        int pose_quat = -1;     // V x 4, unit rows
        int pose_trans = -1;    // V x 3
    };
    // level_nodes must hold exactly the |M| = 4 selected levels, in order.
    GraphOut forward(Graph& g, nn::Binder& bi, const std::vector<int>& level_nodes,
                     int views, int tokens_per_view) const;

    GeometryPrediction decode(const LayerLatents& latents, const EncoderConfig& cfg,
                              int image_size) const;

  private:
    int patch_ = 8;
    nn::LinearLayer depth_head_;
    nn::LinearLayer pose_fc1_, pose_fc2_;
};

// Assembles (V*N) x patch^2 token depth values into per-view depth maps.
std::vector<DepthMap> depth_tokens_to_maps(const Tensor& tokens, int views, int image_size,
                                           int patch);
// Inverse arrangement for building supervision targets.
Tensor depth_maps_to_tokens(const std::vector<DepthMap>& maps, int patch,
                            Tensor* valid_mask = nullptr);
Tensor images_to_tokens(const std::vector<Image>& images, int patch);

struct PretrainConfig {
    int steps = 1600;
    int batch_scenes = 1;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double clip_norm = 1.0;
    int min_views = 2;
    int max_views = 4;
    uint64_t seed = 0;
};

struct StepLog {
    int64_t step = 0;
    std::vector<std::pair<std::string, double>> values;
};

// Trains encoder + geometry decoder on clean samples: mean absolute log-depth
// error + quaternion geodesic + translation L2, weights 1/1/1. Aborts on
// non-finite loss. The caller freezes the parameter set afterward.
void pretrain_encoder(MultiViewEncoder& encoder, GeometryDecoder& decoder,
                      const std::vector<MultiViewSample>& scenes, const PretrainConfig& cfg,
                      nn::AdamW& opt, int64_t start_step,
                      const std::function<void(const StepLog&)>& on_step);

}  // namespace gardlab
