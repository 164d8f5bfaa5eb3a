#include "gardlab/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "gardlab/checkpoint.hpp"

namespace gardlab {

void DenoiserConfig::validate() const {
    if (align_layer < 1 || align_layer > dec_depth)
        throw std::invalid_argument("DenoiserConfig: align layer out of range");
    if (alpha < 0.0 || alpha > 1.0)
        throw std::invalid_argument("DenoiserConfig: alpha must be in [0,1]");
    if (lambda_attn < 0.0) throw std::invalid_argument("DenoiserConfig: lambda_attn >= 0");
    if (target_temperature <= 0.0)
        throw std::invalid_argument("DenoiserConfig: target temperature > 0");
    if (sample_steps < 1) throw std::invalid_argument("DenoiserConfig: sample_steps >= 1");
    if (width % heads != 0 || dec_width % heads != 0)
        throw std::invalid_argument("DenoiserConfig: widths must divide by heads");
}

std::string DenoiserConfig::digest_string() const {
    std::ostringstream os;
    os << "denoiser{C=" << channels << ",enc=" << enc_depth << ",dec=" << dec_depth
       << ",w=" << width << ",dw=" << dec_width << ",heads=" << heads << ",mlp=" << mlp_ratio
       << ",tdim=" << time_dim << ",J=" << align_layer << "}";
    return os.str();
}

FlowBatch make_flow_batch(const Tensor& z_deg, const Tensor& z_clean, double t, double alpha,
                          int views, RandomStream& eps_rng) {
    if (!z_deg.same_shape(z_clean))
        throw std::invalid_argument("make_flow_batch: latent shape mismatch");
    FlowBatch fb;
    fb.z_deg = z_deg;
    fb.z_clean = z_clean;
    fb.t = t;
    fb.views = views;
    fb.eps = eps_rng.normal_tensor(z_deg.rows, z_deg.cols);
    fb.z_src = Tensor(z_deg.rows, z_deg.cols);
    fb.z_t = Tensor(z_deg.rows, z_deg.cols);
    fb.v_star = Tensor(z_deg.rows, z_deg.cols);
    for (size_t i = 0; i < fb.z_src.size(); ++i) {
        double src = z_deg.data[i] + alpha * fb.eps.data[i];
        fb.z_src.data[i] = src;
        fb.z_t.data[i] = (1.0 - t) * src + t * z_clean.data[i];
        fb.v_star.data[i] = z_clean.data[i] - src;
    }
    return fb;
}

int CorrespondenceTarget::valid_rows() const {
    int n = 0;
    for (uint8_t v : row_valid) n += v;
    return n;
}

std::vector<Eigen::Vector3d> token_centroids(const MultiViewSample& sample, int patch,
                                             std::vector<uint8_t>* valid) {
    const int views = sample.view_count();
    const int h = sample.depths[0].h, w = sample.depths[0].w;
    const int gh = h / patch, gw = w / patch;
    const int n = gh * gw;
    std::vector<Eigen::Vector3d> centroids(static_cast<size_t>(views) * n,
                                           Eigen::Vector3d::Zero());
    std::vector<int> counts(centroids.size(), 0);
    for (int v = 0; v < views; ++v) {
        const DepthMap& d = sample.depths[v];
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                if (!d.is_valid(y, x)) continue;
                Eigen::Vector3d p = unproject(Eigen::Vector2d(x, y), d.at(y, x),
                                              sample.poses[v], sample.intrinsics);
                size_t tok = static_cast<size_t>(v) * n + (y / patch) * gw + (x / patch);
                centroids[tok] += p;
                counts[tok] += 1;
            }
    }
    if (valid) valid->assign(centroids.size(), 0);
    for (size_t i = 0; i < centroids.size(); ++i) {
        if (counts[i] > 0) {
            centroids[i] /= counts[i];
            if (valid) (*valid)[i] = 1;
        }
    }
    return centroids;
}

CorrespondenceTarget build_target(const MultiViewSample& sample, int patch, double temperature) {
    CorrespondenceTarget out;
    std::vector<Eigen::Vector3d> centroids = token_centroids(sample, patch, &out.row_valid);
    const int total = static_cast<int>(centroids.size());
    out.a_star = Tensor(total, total);

    for (int i = 0; i < total; ++i) {
        if (!out.row_valid[i]) {
            for (int j = 0; j < total; ++j) out.a_star(i, j) = 1.0 / total;
            continue;
        }
        // softmax over valid columns of -d/T; the self distance 0 anchors the max
        double sum = 0.0;
        for (int j = 0; j < total; ++j) {
            if (!out.row_valid[j]) continue;
            double d = (centroids[i] - centroids[j]).norm();
            double e = std::exp(-d / temperature);
            out.a_star(i, j) = e;
            sum += e;
        }
        for (int j = 0; j < total; ++j) out.a_star(i, j) /= sum;
    }
    return out;
}

GardDenoiser::GardDenoiser(const DenoiserConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    RandomStream rng(derive_seed(init_seed, 0xd13f0));
    t_fc1_ = nn::LinearLayer(params_, "time.fc1", cfg_.time_dim, cfg_.time_dim, rng);
    t_fc2_ = nn::LinearLayer(params_, "time.fc2", cfg_.time_dim, cfg_.time_dim, rng);
    in_proj_ = nn::LinearLayer(params_, "in_proj", cfg_.channels, cfg_.width, rng);
    for (int i = 1; i <= cfg_.enc_depth; ++i)
        enc_blocks_.emplace_back(params_, "enc" + std::to_string(i), cfg_.width, cfg_.heads,
                                 cfg_.width * cfg_.mlp_ratio, cfg_.time_dim, rng);
    mid_proj_ = nn::LinearLayer(params_, "mid_proj", cfg_.width, cfg_.dec_width, rng);
    for (int i = 1; i <= cfg_.dec_depth; ++i)
        dec_blocks_.emplace_back(params_, "dec" + std::to_string(i), cfg_.dec_width, cfg_.heads,
                                 cfg_.dec_width * cfg_.mlp_ratio, cfg_.time_dim, rng);
    final_mod_ = nn::LinearLayer(params_, "final.mod", cfg_.time_dim, 2 * cfg_.dec_width, rng,
                                 0.02, /*zero_init=*/true);
    out_proj_ = nn::LinearLayer(params_, "out_proj", cfg_.dec_width, cfg_.channels, rng, 0.02,
                                /*zero_init=*/true);
}

GardDenoiser::ForwardOut GardDenoiser::forward(Graph& g, nn::Binder& bi, int z_t, double t,
                                               int views, bool want_attn) const {
    if (g.val(z_t).cols != cfg_.channels || g.val(z_t).rows % views != 0)
        throw std::invalid_argument("denoiser: input shape mismatch");
    if (!g.val(z_t).all_finite()) throw std::runtime_error("denoiser: non-finite input");
    const int n = g.val(z_t).rows / views;

    int cond =
        t_fc2_.forward(g, bi, g.silu(t_fc1_.forward(g, bi, g.leaf(nn::sincos_time_embedding(
                                                        t, cfg_.time_dim)))));

    auto check = [&](int node, const char* stage, int layer) {
        if (!g.val(node).all_finite())
            throw std::runtime_error(std::string("denoiser: non-finite activations in ") +
                                     stage + " layer " + std::to_string(layer));
    };

    int x = in_proj_.forward(g, bi, z_t);
    for (int i = 1; i <= cfg_.enc_depth; ++i) {
        nn::Segments segs =
            (i % 2 == 1) ? nn::frame_segments(views, n) : nn::global_segments(views, n);
        x = enc_blocks_[i - 1].forward(g, bi, x, cond, segs).y;
        check(x, "encoder", i);
    }
    x = mid_proj_.forward(g, bi, x);

    int attn = -1;
    for (int i = 1; i <= cfg_.dec_depth; ++i) {
        bool capture = want_attn && i == cfg_.align_layer;
        auto out = dec_blocks_[i - 1].forward(g, bi, x, cond, nn::global_segments(views, n),
                                              capture);
        x = out.y;
        if (capture) attn = out.attn;
        check(x, "decoder", i);
    }

    int m = final_mod_.forward(g, bi, g.silu(cond));
    int shift = g.slice_cols(m, 0, cfg_.dec_width);
    int scale = g.slice_cols(m, cfg_.dec_width, cfg_.dec_width);
    int h = g.add_rowvec(g.mul_rowvec(nn::layernorm_plain(g, x), g.add_const(scale, 1.0)),
                         shift);
    ForwardOut out;
    out.velocity = out_proj_.forward(g, bi, h);
    out.attn = attn;
    check(out.velocity, "output", 0);
    return out;
}

Tensor GardDenoiser::velocity(const Tensor& z_t, double t, int views) const {
    Graph g(false);
    nn::Binder bi(g, false);
    return g.val(forward(g, bi, g.leaf(z_t), t, views, false).velocity);
}

Tensor GardDenoiser::attention_map(const Tensor& z_t, double t, int views) const {
    Graph g(false);
    nn::Binder bi(g, false);
    return g.val(forward(g, bi, g.leaf(z_t), t, views, true).attn);
}

int flow_loss(Graph& g, int velocity, const Tensor& v_star) {
    int diff = g.sub(velocity, g.leaf(v_star));
    return g.mean_all(g.mul(diff, diff));
}

int attn_loss(Graph& g, int attn, const CorrespondenceTarget& target) {
    const int rows = target.a_star.rows;
    if (g.val(attn).rows != rows || g.val(attn).cols != rows)
        throw std::invalid_argument("attn_loss: attention shape mismatch");
    int valid = target.valid_rows();
    if (valid == 0) return g.leaf(Tensor::scalar(0.0));
    Tensor mask(rows, 1);
    for (int i = 0; i < rows; ++i) mask(i, 0) = target.row_valid[i] ? 1.0 : 0.0;
    int weighted = g.row_sum(g.mul(g.log_eps(attn, 1e-12), g.leaf(target.a_star)));
    int masked = g.mul(weighted, g.leaf(mask));
    return g.scale(g.sum_all(masked), -1.0 / valid);
}

double attn_loss_value(const Tensor& attn, const CorrespondenceTarget& target) {
    Graph g(false);
    return g.val(attn_loss(g, g.leaf(attn), target)).item();
}

double target_entropy(const CorrespondenceTarget& target) {
    int valid = target.valid_rows();
    if (valid == 0) return 0.0;
    double total = 0.0;
    for (int i = 0; i < target.a_star.rows; ++i) {
        if (!target.row_valid[i]) continue;
        for (int j = 0; j < target.a_star.cols; ++j) {
            double p = target.a_star(i, j);
            if (p > 0.0) total -= p * std::log(p);
        }
    }
    return total / valid;
}

Tensor euler_integrate(const std::function<Tensor(const Tensor&, double)>& field, Tensor z0,
                       int steps) {
    if (steps < 1) throw std::invalid_argument("euler_integrate: steps >= 1");
    Tensor z = std::move(z0);
    const double dt = 1.0 / steps;
    for (int i = 0; i < steps; ++i) {
        double t = static_cast<double>(i) / steps;
        Tensor v = field(z, t);
        if (!v.same_shape(z)) throw std::invalid_argument("euler_integrate: field shape");
        for (size_t j = 0; j < z.size(); ++j) z.data[j] += dt * v.data[j];
        if (!z.all_finite())
            throw std::runtime_error("euler_integrate: non-finite state at step " +
                                     std::to_string(i));
    }
    return z;
}

TrainState make_train_state(const DenoiserConfig& cfg, const GardTrainConfig& hyper,
                            uint64_t seed) {
    TrainState st;
    st.model = std::make_unique<GardDenoiser>(cfg, derive_seed(seed, 0x6a2d));
    nn::AdamWConfig oc;
    oc.lr = hyper.lr;
    oc.beta1 = hyper.beta1;
    oc.beta2 = hyper.beta2;
    oc.weight_decay = hyper.weight_decay;
    st.opt = std::make_unique<nn::AdamW>(st.model->params(), oc);
    st.ema = std::make_unique<nn::Ema>(st.model->params(), hyper.ema_decay);
    st.seed = seed;
    return st;
}

namespace {

// Training-time degradation: an independent shake kernel per view.
std::vector<Image> degrade_views(const MultiViewSample& s, BlurSeverity severity,
                                 uint64_t seed) {
    std::vector<Image> out;
    for (int v = 0; v < s.view_count(); ++v)
        out.push_back(apply_blur(s.images[v],
                                 make_blur_kernel(severity, derive_seed(seed, 0xb1a2, v))));
    return out;
}

CorrespondenceTarget target_for(const MultiViewSample& sub, const MultiViewEncoder& encoder,
                                const GeometryDecoder& geo, const DenoiserConfig& dcfg,
                                const std::string& source) {
    if (source == "gt") return build_target(sub, encoder.config().patch, dcfg.target_temperature);
    if (source != "clean_forward")
        throw std::invalid_argument("unknown target_source: " + source);
    // clean-forward: depth/pose from the reconstructor's clean pass
    LayerLatents lat = encoder.encode(sub.images);
    GeometryPrediction pred = geo.decode(lat, encoder.config(), sub.images[0].h);
    MultiViewSample proxy = sub;
    proxy.depths = pred.depth;
    // predictions are gauged to view 0; targets only need pairwise-consistent
    // geometry, so use predicted poses with the predicted depths
    proxy.poses = pred.poses;
    return build_target(proxy, encoder.config().patch, dcfg.target_temperature);
}

}  // namespace

StepLosses gard_train_step(TrainState& state, const std::vector<const MultiViewSample*>& batch,
                           const MultiViewEncoder& encoder, const GeometryDecoder& geo,
                           const GardTrainConfig& hyper) {
    if (batch.empty()) throw std::invalid_argument("gard_train_step: empty batch");
    if (!encoder.params().frozen())
        throw std::logic_error("gard_train_step: encoder must be frozen");
    GardDenoiser& model = *state.model;
    const DenoiserConfig& dcfg = model.config();
    model.params().zero_grads();

    StepLosses losses;
    const double inv_batch = 1.0 / static_cast<double>(batch.size());
    for (size_t b = 0; b < batch.size(); ++b) {
        const MultiViewSample& scene = *batch[b];
        RandomStream rng(derive_seed(state.seed, 0x57e9, static_cast<uint64_t>(state.step),
                                     static_cast<uint64_t>(b)));

        // view subset
        int want = hyper.min_views + rng.uniform_int(hyper.max_views - hyper.min_views + 1);
        want = std::min(want, scene.view_count() - 1);
        int anchor = rng.uniform_int(scene.view_count());
        std::vector<int> chosen =
            select_views(scene, want, hyper.strategy, hyper.expansion_ratio, rng.next_u64(),
                         anchor);
        MultiViewSample sub = scene.subset(chosen);

        // degradation
        BlurSeverity severity =
            hyper.severities[rng.uniform_int(static_cast<int>(hyper.severities.size()))];
        std::vector<Image> degraded = degrade_views(sub, severity, rng.next_u64());

        // frozen encodes
        LayerLatents clean_lat = encoder.encode(sub.images);
        LayerLatents deg_lat = encoder.encode(degraded);
        const int k = encoder.config().insertion_layer;

        // logit-normal time sampling
        double t = 1.0 / (1.0 + std::exp(-rng.normal()));
        FlowBatch fb = make_flow_batch(deg_lat.at_layer(k), clean_lat.at_layer(k), t,
                                       dcfg.alpha, sub.view_count(), rng);

        CorrespondenceTarget target = target_for(sub, encoder, geo, dcfg, hyper.target_source);

        Graph g(true);
        nn::Binder bi(g, true);
        auto out = model.forward(g, bi, g.leaf(fb.z_t), fb.t, fb.views, true);
        int lf = flow_loss(g, out.velocity, fb.v_star);
        int la = attn_loss(g, out.attn, target);
        int total = g.add(lf, g.scale(la, dcfg.lambda_attn));

        double flow_v = g.val(lf).item();
        double attn_v = g.val(la).item();
        double total_v = g.val(total).item();
        if (!std::isfinite(total_v))
            throw std::runtime_error("gard_train_step: non-finite loss at step " +
                                     std::to_string(state.step));
        g.backward(g.scale(total, inv_batch));
        bi.apply_grads();

        losses.flow += flow_v * inv_batch;
        losses.attn += attn_v * inv_batch;
        losses.total += total_v * inv_batch;
    }

    losses.grad_norm = nn::clip_global_grad_norm(model.params(), hyper.clip_norm);
    state.opt->step();
    state.ema->update();
    state.step += 1;
    return losses;
}

Tensor sample_restore(const Tensor& z_deg_k, const GardDenoiser& model, int views, int steps,
                      double alpha, uint64_t run_seed, bool init_noise) {
    Tensor z0 = z_deg_k;
    if (init_noise && alpha > 0.0) {
        RandomStream rng(derive_seed(run_seed, 0x1417));
        for (double& v : z0.data) v += alpha * rng.normal();
    }
    return euler_integrate(
        [&](const Tensor& z, double t) { return model.velocity(z, t, views); }, std::move(z0),
        steps);
}

RestoreResult restore_pipeline(const std::vector<Image>& degraded,
                               const MultiViewEncoder& encoder, const GeometryDecoder& geo,
                               const GardDenoiser& model, const RestoreOptions& opts) {
    const EncoderConfig& ecfg = encoder.config();
    const int k = ecfg.insertion_layer;
    const int views = static_cast<int>(degraded.size());

    LayerLatents deg = encoder.encode(degraded);
    Tensor z_res = opts.identity_denoiser
                       ? deg.at_layer(k)
                       : sample_restore(deg.at_layer(k), model, views, opts.sample_steps,
                                        model.config().alpha, opts.run_seed, opts.init_noise);

    LayerLatents rest = encoder.continue_from_layer(z_res, views, k);

    RestoreResult out;
    out.z_res_k = z_res;
    out.latents.views = views;
    out.latents.tokens_per_view = deg.tokens_per_view;
    out.latents.channels = deg.channels;
    for (int l = 1; l < k; ++l) out.latents.layers.push_back(deg.at_layer(l));
    out.latents.layers.push_back(z_res);
    for (int l = k + 1; l <= ecfg.layers; ++l)
        out.latents.layers.push_back(rest.layers[l - k - 1]);
    out.geometry = geo.decode(out.latents, ecfg, degraded[0].h);
    return out;
}

void save_train_state(const std::string& path, const std::string& config_digest,
                      const TrainState& state) {
    NamedTensors named;
    for (const auto& [name, value] : state.model->params().named_values())
        named.emplace_back("param." + name, value);
    const auto& params = state.model->params().all();
    for (size_t i = 0; i < params.size(); ++i) {
        named.emplace_back("adam.m." + params[i]->name, state.opt->moments1()[i]);
        named.emplace_back("adam.v." + params[i]->name, state.opt->moments2()[i]);
        named.emplace_back("ema." + params[i]->name, state.ema->shadow()[i]);
    }
    Tensor meta(1, 5);
    meta(0, 0) = static_cast<double>(state.step);
    meta(0, 1) = static_cast<double>(state.opt->step_count());
    meta(0, 2) = static_cast<double>(state.ema->updates());
    meta(0, 3) = static_cast<double>(state.seed & 0xffffffffull);
    meta(0, 4) = static_cast<double>(state.seed >> 32);
    named.emplace_back("meta.state", meta);
    save_checkpoint(path, config_digest, named);
}

void load_train_state(const std::string& path, TrainState& state, std::string* config_digest) {
    NamedTensors named = load_checkpoint(path, config_digest);
    std::vector<std::pair<std::string, Tensor>> params;
    const auto& order = state.model->params().all();
    auto find = [&](const std::string& name) -> const Tensor& {
        for (const auto& [n, t] : named)
            if (n == name) return t;
        throw std::runtime_error("train state: missing tensor " + name);
    };
    for (const nn::Parameter* p : order)
        params.emplace_back(p->name, find("param." + p->name));
    state.model->params().load_values(params);
    for (size_t i = 0; i < order.size(); ++i) {
        state.opt->moments1()[i] = find("adam.m." + order[i]->name);
        state.opt->moments2()[i] = find("adam.v." + order[i]->name);
        state.ema->shadow_mutable()[i] = find("ema." + order[i]->name);
    }
    const Tensor& meta = find("meta.state");
    state.step = static_cast<int64_t>(meta(0, 0));
    state.opt->set_step_count(static_cast<int64_t>(meta(0, 1)));
    state.ema->set_updates(static_cast<int64_t>(meta(0, 2)));
    state.seed = static_cast<uint64_t>(meta(0, 3)) |
                 (static_cast<uint64_t>(meta(0, 4)) << 32);
}

std::unique_ptr<GardDenoiser> ema_model(const TrainState& state) {
    auto model = std::make_unique<GardDenoiser>(state.model->config(), 0);
    model->params().load_values(state.ema->debiased());
    return model;
}

}  // namespace gardlab
