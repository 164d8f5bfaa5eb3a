#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "gardlab/blur.hpp"
#include "gardlab/encoder.hpp"
#include "gardlab/geometry.hpp"
#include "gardlab/nn.hpp"
#include "gardlab/scene.hpp"

namespace gardlab {

// Diffusion transformer denoising the layer-K latents of the frozen
// multi-view encoder: a narrow encoder stack alternating frame/global
// attention, then a wide decoder stack with global attention only, with
// adaptive scale/shift timestep conditioning in every block.
struct DenoiserConfig {
    int channels = 96;   // latent C of the backbone
    int enc_depth = 4;
    int dec_depth = 3;
    int width = 128;
    int dec_width = 192;
    int heads = 4;
    int mlp_ratio = 4;
    int time_dim = 128;
    int align_layer = 2;               // J, 1-based within the wide decoder
    double alpha = 0.3;                // source perturbation magnitude
    double lambda_attn = 1.0;
    double target_temperature = 0.01;  // T for the correspondence targets
    int sample_steps = 50;

    void validate() const;
    std::string digest_string() const;
};

// One flow-matching sample. Invariants (exact):
//   z_t    = (1-t) * (z_deg + alpha*eps) + t * z_clean
//   v_star = z_clean - (z_deg + alpha*eps)
struct FlowBatch {
    Tensor z_deg, z_clean, eps, z_src, z_t, v_star;
    double t = 0.0;
    int views = 0;
};

FlowBatch make_flow_batch(const Tensor& z_deg, const Tensor& z_clean, double t, double alpha,
                          int views, RandomStream& eps_rng);

// Row-stochastic correspondence target over all V*N patch tokens.
struct CorrespondenceTarget {
    Tensor a_star;                     // (V*N) x (V*N)
    std::vector<uint8_t> row_valid;    // tokens with at least one valid pixel
    int valid_rows() const;
};

// Unprojects valid pixels, pools them to one 3D centroid per patch token,
// and softmaxes negative pairwise distances at the given temperature.
// Rows of empty tokens are uniform and masked out of the loss.
CorrespondenceTarget build_target(const MultiViewSample& sample, int patch, double temperature);

// Token centroids used by build_target (exposed for the disparity oracle).
std::vector<Eigen::Vector3d> token_centroids(const MultiViewSample& sample, int patch,
                                             std::vector<uint8_t>* valid = nullptr);

class GardDenoiser {
  public:
    GardDenoiser(const DenoiserConfig& cfg, uint64_t init_seed);

    struct ForwardOut {
        int velocity = -1;  // (V*N) x C
        int attn = -1;      // (V*N) x (V*N) head-averaged attention of decoder layer J
    };
    ForwardOut forward(Graph& g, nn::Binder& bi, int z_t, double t, int views,
                       bool want_attn = false) const;

    // No-grad velocity evaluation (used by the ODE sampler).
    Tensor velocity(const Tensor& z_t, double t, int views) const;
    // No-grad attention map of decoder layer J.
    Tensor attention_map(const Tensor& z_t, double t, int views) const;

    nn::ParamSet& params() { return params_; }
    const nn::ParamSet& params() const { return params_; }
    const DenoiserConfig& config() const { return cfg_; }

  private:
    DenoiserConfig cfg_;
    nn::ParamSet params_;
    nn::LinearLayer t_fc1_, t_fc2_;
    nn::LinearLayer in_proj_, mid_proj_, out_proj_;
    nn::LinearLayer final_mod_;
    std::vector<nn::DitBlock> enc_blocks_, dec_blocks_;
};

// Mean squared error between the predicted velocity node and v_star.
int flow_loss(Graph& g, int velocity, const Tensor& v_star);

// Cross-entropy -E[A* log A^J] over valid target rows (eps 1e-12 inside the
// log). Returns the scalar node.
int attn_loss(Graph& g, int attn, const CorrespondenceTarget& target);
double attn_loss_value(const Tensor& attn, const CorrespondenceTarget& target);
// Mean row entropy of A* over valid rows (the cross-entropy optimum).
double target_entropy(const CorrespondenceTarget& target);

// Euler integration of dz/dt = field(z, t) from t=0 to t=1 in `steps` uniform
// steps. Throws on non-finite intermediate states.
Tensor euler_integrate(const std::function<Tensor(const Tensor&, double)>& field, Tensor z0,
                       int steps);

struct TrainState {
    std::unique_ptr<GardDenoiser> model;
    std::unique_ptr<nn::AdamW> opt;
    std::unique_ptr<nn::Ema> ema;
    int64_t step = 0;
    uint64_t seed = 0;
};

struct GardTrainConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.0;
    double clip_norm = 1.0;
    double ema_decay = 0.9995;
    int epochs = 10;
    int batch_scenes = 2;
    int min_views = 2;
    int max_views = 4;
    ViewSelectionStrategy strategy = ViewSelectionStrategy::kNearCamera;
    int expansion_ratio = 2;
    std::vector<BlurSeverity> severities = {BlurSeverity::kMild, BlurSeverity::kModerate,
                                            BlurSeverity::kHeavy};
    std::string target_source = "gt";  // gt | clean_forward
    uint64_t seed = 0;
};

TrainState make_train_state(const DenoiserConfig& cfg, const GardTrainConfig& hyper,
                            uint64_t seed);

struct StepLosses {
    double flow = 0.0;
    double attn = 0.0;
    double total = 0.0;
    double grad_norm = 0.0;
};

// One optimizer step over a batch of scenes: per scene, apply per-view motion
// blur, run the frozen encoder on clean and degraded inputs, build the
// interpolated flow batch with logit-normal t, forward the denoiser, and
// minimize L_flow + lambda * L_attn. Gradients flow through the denoiser
// only; global-norm clipping, AdamW, then an EMA update.
StepLosses gard_train_step(TrainState& state, const std::vector<const MultiViewSample*>& batch,
                           const MultiViewEncoder& encoder, const GeometryDecoder& geo,
                           const GardTrainConfig& hyper);

// Integrates the learned velocity field from the (optionally noise-perturbed)
// degraded latent with uniform Euler steps using the given model parameters.
Tensor sample_restore(const Tensor& z_deg_k, const GardDenoiser& model, int views, int steps,
                      double alpha, uint64_t run_seed, bool init_noise = true);

struct RestoreOptions {
    int sample_steps = 50;
    bool init_noise = true;
    bool identity_denoiser = false;  // ablation: skip restoration entirely
    uint64_t run_seed = 0;
};

struct RestoreResult {
    GeometryPrediction geometry;
    LayerLatents latents;  // layers 1..K-1 degraded, K..L restored
    Tensor z_res_k;
};

RestoreResult restore_pipeline(const std::vector<Image>& degraded,
                               const MultiViewEncoder& encoder, const GeometryDecoder& geo,
                               const GardDenoiser& model, const RestoreOptions& opts);

// Serialization of the full training state (parameters, optimizer moments,
// EMA shadow, step counter, run seed) in the shared checkpoint container.
void save_train_state(const std::string& path, const std::string& config_digest,
                      const TrainState& state);
void load_train_state(const std::string& path, TrainState& state,
                      std::string* config_digest = nullptr);

// A copy of the denoiser carrying the debiased EMA parameter values.
std::unique_ptr<GardDenoiser> ema_model(const TrainState& state);

}  // namespace gardlab
