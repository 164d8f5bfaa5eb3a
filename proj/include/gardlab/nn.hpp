#pragma once

#include <deque>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gardlab/graph.hpp"
#include "gardlab/tensor.hpp"

namespace gardlab::nn {

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    void zero_grad() { grad.fill(0.0); }
};

// Ordered, address-stable collection of parameters owned by a model.
class ParamSet {
  public:
    Parameter& add(const std::string& name, Tensor init);
    Parameter* find(const std::string& name);
    const std::vector<Parameter*>& all() const { return order_; }
    size_t scalar_count() const;
    void zero_grads();

    bool frozen() const { return frozen_; }
    void set_frozen(bool f) { frozen_ = f; }

    // name -> value snapshot / restore, used by checkpoints and EMA swaps
    std::vector<std::pair<std::string, Tensor>> named_values() const;
    void load_values(const std::vector<std::pair<std::string, Tensor>>& named);

  private:
    std::deque<Parameter> storage_;
    std::vector<Parameter*> order_;
    bool frozen_ = false;
};

// Binds parameters into a graph for one forward pass. With trainable=false the
// parameters enter as constants (frozen-model inference).
class Binder {
  public:
    Binder(Graph& g, bool trainable) : g_(g), trainable_(trainable) {}
    int operator()(Parameter& p);
    // Accumulates graph gradients into Parameter::grad after backward().
    void apply_grads();

  private:
    Graph& g_;
    bool trainable_;
    std::vector<std::pair<Parameter*, int>> bound_;
    std::unordered_map<const Parameter*, int> ids_;
};

// Attention segmentation: list of (row offset, row count). Frame-level
// attention uses one segment per view, global attention one segment overall.
using Segments = std::vector<std::pair<int, int>>;
Segments frame_segments(int views, int tokens_per_view);
Segments global_segments(int views, int tokens_per_view);

struct LinearLayer {
    Parameter* w = nullptr;
    Parameter* b = nullptr;
    LinearLayer() = default;
    LinearLayer(ParamSet& ps, const std::string& name, int in, int out, RandomStream& rng,
                double w_std = 0.02, bool zero_init = false);
    int forward(Graph& g, Binder& bi, int x) const;
};

struct LayerNormLayer {
    Parameter* gain = nullptr;
    Parameter* bias = nullptr;
    LayerNormLayer() = default;
    LayerNormLayer(ParamSet& ps, const std::string& name, int dim);
    int forward(Graph& g, Binder& bi, int x) const;
};

// LayerNorm without learned affine (unit gain, zero bias constants).
int layernorm_plain(Graph& g, int x);

struct AttentionLayer {
    int dim = 0;
    int heads = 0;
    LinearLayer qkv;
    LinearLayer proj;

    AttentionLayer() = default;
    AttentionLayer(ParamSet& ps, const std::string& name, int dim, int heads, RandomStream& rng);

    struct Out {
        int y = -1;
        int attn = -1;  // head-averaged attention, only for single-segment calls
    };
    Out forward(Graph& g, Binder& bi, int x, const Segments& segs, bool want_attn = false) const;
};

// Pre-norm transformer block: x + Attn(LN(x)), x + MLP(LN(x)).
struct TransformerBlock {
    LayerNormLayer ln1, ln2;
    AttentionLayer attn;
    LinearLayer fc1, fc2;

    TransformerBlock() = default;
    TransformerBlock(ParamSet& ps, const std::string& name, int dim, int heads, int mlp_hidden,
                     RandomStream& rng);
    int forward(Graph& g, Binder& bi, int x, const Segments& segs) const;
};

// Diffusion transformer block with adaptive scale/shift conditioning computed
// from a per-forward conditioning vector (1 x cond_dim). The modulation head
// is zero-initialized so each block starts as an unconditioned identity-norm
// block.
struct DitBlock {
    int dim = 0;
    AttentionLayer attn;
    LinearLayer fc1, fc2;
    LinearLayer mod;  // cond_dim -> 4*dim: (shift1, scale1, shift2, scale2)

    DitBlock() = default;
    DitBlock(ParamSet& ps, const std::string& name, int dim, int heads, int mlp_hidden,
             int cond_dim, RandomStream& rng);
    struct Out {
        int y = -1;
        int attn = -1;
    };
    Out forward(Graph& g, Binder& bi, int x, int cond, const Segments& segs,
                bool want_attn = false) const;
};

// Sinusoidal embeddings.
Tensor sincos_time_embedding(double t, int dim);
Tensor sincos_pos_embedding_2d(int grid_h, int grid_w, int dim);

struct AdamWConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

class AdamW {
  public:
    AdamW(ParamSet& params, AdamWConfig cfg);
    void step();
    int64_t step_count() const { return t_; }

    // Exposed for exact train-state checkpointing.
    std::vector<Tensor>& moments1() { return m_; }
    std::vector<Tensor>& moments2() { return v_; }
    void set_step_count(int64_t t) { t_ = t; }

  private:
    ParamSet& params_;
    AdamWConfig cfg_;
    std::vector<Tensor> m_, v_;
    int64_t t_ = 0;
};

// Scales all gradients so the global L2 norm is at most max_norm.
// Returns the pre-clip norm.
double clip_global_grad_norm(ParamSet& params, double max_norm);

// Exponential moving average of parameter values. The shadow starts at zero
// and follows shadow = d*shadow + (1-d)*theta, so ||shadow - theta|| contracts
// by exactly d per update under fixed theta; debiased() divides by
// (1 - d^updates) to remove the zero-init bias for use at inference.
class Ema {
  public:
    Ema(ParamSet& params, double decay);
    void update();
    std::vector<std::pair<std::string, Tensor>> debiased() const;
    const std::vector<Tensor>& shadow() const { return shadow_; }
    std::vector<Tensor>& shadow_mutable() { return shadow_; }
    int64_t updates() const { return updates_; }
    void set_updates(int64_t u) { updates_ = u; }
    double decay() const { return decay_; }

  private:
    ParamSet& params_;
    double decay_;
    std::vector<Tensor> shadow_;
    int64_t updates_ = 0;
};

}  // namespace gardlab::nn
