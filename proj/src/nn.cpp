#include "gardlab/nn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace gardlab::nn {

Parameter& ParamSet::add(const std::string& name, Tensor init) {
    if (find(name)) throw std::invalid_argument("ParamSet: duplicate parameter " + name);
    storage_.push_back(Parameter{name, std::move(init), Tensor()});
    Parameter& p = storage_.back();
    p.grad = Tensor(p.value.rows, p.value.cols);
    order_.push_back(&p);
    return p;
}

Parameter* ParamSet::find(const std::string& name) {
    for (Parameter* p : order_)
        if (p->name == name) return p;
    return nullptr;
}

size_t ParamSet::scalar_count() const {
    size_t n = 0;
    for (const Parameter* p : order_) n += p->value.size();
    return n;
}

void ParamSet::zero_grads() {
    for (Parameter* p : order_) p->zero_grad();
}

std::vector<std::pair<std::string, Tensor>> ParamSet::named_values() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(order_.size());
    for (const Parameter* p : order_) out.emplace_back(p->name, p->value);
    return out;
}

void ParamSet::load_values(const std::vector<std::pair<std::string, Tensor>>& named) {
    for (const auto& [name, value] : named) {
        Parameter* p = find(name);
        if (!p) throw std::runtime_error("ParamSet: unknown parameter in checkpoint: " + name);
        if (!p->value.same_shape(value))
            throw std::runtime_error("ParamSet: shape mismatch for " + name);
        p->value = value;
    }
}

int Binder::operator()(Parameter& p) {
    auto it = ids_.find(&p);
    if (it != ids_.end()) return it->second;
    int id = trainable_ ? g_.var(p.value) : g_.leaf(p.value);
    ids_.emplace(&p, id);
    bound_.emplace_back(&p, id);
    return id;
}

void Binder::apply_grads() {
    for (auto& [p, id] : bound_) {
        if (!g_.needs_grad(id)) continue;
        if (!g_.has_grad(id)) continue;  // parameter unused downstream of the loss
        const Tensor& gd = g_.grad(id);
        for (size_t i = 0; i < gd.size(); ++i) p->grad.data[i] += gd.data[i];
    }
}

Segments frame_segments(int views, int tokens_per_view) {
    Segments s;
    s.reserve(views);
    for (int v = 0; v < views; ++v) s.emplace_back(v * tokens_per_view, tokens_per_view);
    return s;
}

Segments global_segments(int views, int tokens_per_view) {
    return {{0, views * tokens_per_view}};
}

LinearLayer::LinearLayer(ParamSet& ps, const std::string& name, int in, int out,
                         RandomStream& rng, double w_std, bool zero_init) {
    Tensor wt = zero_init ? Tensor(in, out) : rng.normal_tensor(in, out, w_std);
    w = &ps.add(name + ".w", std::move(wt));
    b = &ps.add(name + ".b", Tensor(1, out));
}

int LinearLayer::forward(Graph& g, Binder& bi, int x) const {
    return g.linear(x, bi(*w), bi(*b));
}

LayerNormLayer::LayerNormLayer(ParamSet& ps, const std::string& name, int dim) {
    Tensor ones(1, dim);
    ones.fill(1.0);
    gain = &ps.add(name + ".gain", std::move(ones));
    bias = &ps.add(name + ".bias", Tensor(1, dim));
}

int LayerNormLayer::forward(Graph& g, Binder& bi, int x) const {
    return g.layernorm(x, bi(*gain), bi(*bias));
}

int layernorm_plain(Graph& g, int x) {
    const int c = g.val(x).cols;
    Tensor ones(1, c);
    ones.fill(1.0);
    int gain = g.leaf(std::move(ones));
    int bias = g.leaf(Tensor(1, c));
    return g.layernorm(x, gain, bias);
}

AttentionLayer::AttentionLayer(ParamSet& ps, const std::string& name, int dim_, int heads_,
                               RandomStream& rng)
    : dim(dim_), heads(heads_) {
    if (dim % heads != 0) throw std::invalid_argument("AttentionLayer: dim % heads != 0");
    qkv = LinearLayer(ps, name + ".qkv", dim, 3 * dim, rng);
    proj = LinearLayer(ps, name + ".proj", dim, dim, rng);
}

AttentionLayer::Out AttentionLayer::forward(Graph& g, Binder& bi, int x, const Segments& segs,
                                            bool want_attn) const {
    if (want_attn && segs.size() != 1)
        throw std::invalid_argument("attention map capture requires a single segment");
    const int dh = dim / heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    int fused = qkv.forward(g, bi, x);

    std::vector<int> seg_outs;
    int attn_avg = -1;
    for (const auto& [r0, len] : segs) {
        int fs = g.slice_rows(fused, r0, len);
        std::vector<int> head_outs, head_attns;
        for (int h = 0; h < heads; ++h) {
            int q = g.slice_cols(fs, h * dh, dh);
            int k = g.slice_cols(fs, dim + h * dh, dh);
            int v = g.slice_cols(fs, 2 * dim + h * dh, dh);
            int scores = g.scale(g.matmul(q, g.transpose(k)), inv_sqrt_dh);
            int p = g.softmax_rows(scores);
            head_outs.push_back(g.matmul(p, v));
            if (want_attn) head_attns.push_back(p);
        }
        seg_outs.push_back(g.concat_cols(head_outs));
        if (want_attn) {
            int s = head_attns[0];
            for (int h = 1; h < heads; ++h) s = g.add(s, head_attns[h]);
            attn_avg = g.scale(s, 1.0 / heads);
        }
    }
    int merged = segs.size() == 1 ? seg_outs[0] : g.concat_rows(seg_outs);
    Out out;
    out.y = proj.forward(g, bi, merged);
    out.attn = attn_avg;
    return out;
}

TransformerBlock::TransformerBlock(ParamSet& ps, const std::string& name, int dim, int heads,
                                   int mlp_hidden, RandomStream& rng)
    : ln1(ps, name + ".ln1", dim),
      ln2(ps, name + ".ln2", dim),
      attn(ps, name + ".attn", dim, heads, rng),
      fc1(ps, name + ".fc1", dim, mlp_hidden, rng),
      fc2(ps, name + ".fc2", mlp_hidden, dim, rng) {}

int TransformerBlock::forward(Graph& g, Binder& bi, int x, const Segments& segs) const {
    int h = g.add(x, attn.forward(g, bi, ln1.forward(g, bi, x), segs).y);
    int m = fc2.forward(g, bi, g.gelu(fc1.forward(g, bi, ln2.forward(g, bi, h))));
    return g.add(h, m);
}

DitBlock::DitBlock(ParamSet& ps, const std::string& name, int dim_, int heads, int mlp_hidden,
                   int cond_dim, RandomStream& rng)
    : dim(dim_),
      attn(ps, name + ".attn", dim_, heads, rng),
      fc1(ps, name + ".fc1", dim_, mlp_hidden, rng),
      fc2(ps, name + ".fc2", mlp_hidden, dim_, rng),
      mod(ps, name + ".mod", cond_dim, 4 * dim_, rng, 0.02, /*zero_init=*/true) {}

namespace {
int modulate(Graph& g, int x, int shift, int scale) {
    return g.add_rowvec(g.mul_rowvec(x, g.add_const(scale, 1.0)), shift);
}
}  // namespace

DitBlock::Out DitBlock::forward(Graph& g, Binder& bi, int x, int cond, const Segments& segs,
                                bool want_attn) const {
    int m = mod.forward(g, bi, g.silu(cond));
    int shift1 = g.slice_cols(m, 0, dim);
    int scale1 = g.slice_cols(m, dim, dim);
    int shift2 = g.slice_cols(m, 2 * dim, dim);
    int scale2 = g.slice_cols(m, 3 * dim, dim);

    auto a = attn.forward(g, bi, modulate(g, layernorm_plain(g, x), shift1, scale1), segs,
                          want_attn);
    int h = g.add(x, a.y);
    int mm = fc2.forward(
        g, bi, g.gelu(fc1.forward(g, bi, modulate(g, layernorm_plain(g, h), shift2, scale2))));
    Out out;
    out.y = g.add(h, mm);
    out.attn = a.attn;
    return out;
}

Tensor sincos_time_embedding(double t, int dim) {
    if (dim % 2 != 0) throw std::invalid_argument("sincos_time_embedding: dim must be even");
    const int half = dim / 2;
    const double s = 1000.0 * t;
    Tensor out(1, dim);
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
        out(0, i) = std::sin(s * freq);
        out(0, half + i) = std::cos(s * freq);
    }
    return out;
}

Tensor sincos_pos_embedding_2d(int grid_h, int grid_w, int dim) {
    if (dim % 4 != 0) throw std::invalid_argument("sincos_pos_embedding_2d: dim % 4 != 0");
    const int quarter = dim / 4;
    Tensor out(grid_h * grid_w, dim);
    for (int r = 0; r < grid_h; ++r) {
        for (int c = 0; c < grid_w; ++c) {
            int tok = r * grid_w + c;
            for (int i = 0; i < quarter; ++i) {
                double freq = std::exp(-std::log(10000.0) * i / std::max(1, quarter - 1));
                out(tok, i) = std::sin(r * freq);
                out(tok, quarter + i) = std::cos(r * freq);
                out(tok, 2 * quarter + i) = std::sin(c * freq);
                out(tok, 3 * quarter + i) = std::cos(c * freq);
            }
        }
    }
    return out;
}

AdamW::AdamW(ParamSet& params, AdamWConfig cfg) : params_(params), cfg_(cfg) {
    for (const Parameter* p : params_.all()) {
        m_.emplace_back(p->value.rows, p->value.cols);
        v_.emplace_back(p->value.rows, p->value.cols);
    }
}

void AdamW::step() {
    if (params_.frozen()) throw std::logic_error("AdamW::step on frozen parameter set");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const auto& ps = params_.all();
    for (size_t i = 0; i < ps.size(); ++i) {
        Parameter& p = *ps[i];
        Tensor& m = m_[i];
        Tensor& v = v_[i];
        for (size_t j = 0; j < p.value.size(); ++j) {
            double gr = p.grad.data[j];
            m.data[j] = cfg_.beta1 * m.data[j] + (1.0 - cfg_.beta1) * gr;
            v.data[j] = cfg_.beta2 * v.data[j] + (1.0 - cfg_.beta2) * gr * gr;
            double mhat = m.data[j] / bc1;
            double vhat = v.data[j] / bc2;
            if (cfg_.weight_decay > 0.0) p.value.data[j] -= cfg_.lr * cfg_.weight_decay * p.value.data[j];
            p.value.data[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

double clip_global_grad_norm(ParamSet& params, double max_norm) {
    double sq = 0.0;
    for (const Parameter* p : params.all())
        for (double g : p->grad.data) sq += g * g;
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        double s = max_norm / norm;
        for (Parameter* p : params.all())
            for (double& g : p->grad.data) g *= s;
    }
    return norm;
}

Ema::Ema(ParamSet& params, double decay) : params_(params), decay_(decay) {
    for (const Parameter* p : params_.all()) shadow_.emplace_back(p->value.rows, p->value.cols);
}

void Ema::update() {
    ++updates_;
    const auto& ps = params_.all();
    for (size_t i = 0; i < ps.size(); ++i) {
        const Tensor& v = ps[i]->value;
        Tensor& s = shadow_[i];
        for (size_t j = 0; j < v.size(); ++j)
            s.data[j] = decay_ * s.data[j] + (1.0 - decay_) * v.data[j];
    }
}

std::vector<std::pair<std::string, Tensor>> Ema::debiased() const {
    const double denom = 1.0 - std::pow(decay_, static_cast<double>(std::max<int64_t>(1, updates_)));
    std::vector<std::pair<std::string, Tensor>> out;
    const auto& ps = params_.all();
    for (size_t i = 0; i < ps.size(); ++i) {
        Tensor t = shadow_[i];
        for (double& v : t.data) v /= denom;
        out.emplace_back(ps[i]->name, std::move(t));
    }
    return out;
}

}  // namespace gardlab::nn
