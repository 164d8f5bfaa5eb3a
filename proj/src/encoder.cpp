#include "gardlab/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace gardlab {

void EncoderConfig::validate() const {
    if (layers < 2) throw std::invalid_argument("EncoderConfig: need at least 2 layers");
    if (channels % 4 != 0 || channels % heads != 0)
        throw std::invalid_argument("EncoderConfig: channels must divide by 4 and heads");
    if (feature_levels.size() != 4)
        throw std::invalid_argument("EncoderConfig: exactly 4 feature levels required");
    int mn = *std::min_element(feature_levels.begin(), feature_levels.end());
    int mx = *std::max_element(feature_levels.begin(), feature_levels.end());
    if (insertion_layer >= mn)
        throw std::invalid_argument("EncoderConfig: insertion layer must precede feature levels");
    if (mx != layers)
        throw std::invalid_argument("EncoderConfig: last feature level must be the last layer");
    if (insertion_layer < 1) throw std::invalid_argument("EncoderConfig: insertion layer >= 1");
}

int EncoderConfig::tokens_per_view(int image_size) const {
    if (image_size % patch != 0)
        throw std::invalid_argument("EncoderConfig: image size not divisible by patch");
    int g = image_size / patch;
    return g * g;
}

std::string EncoderConfig::digest_string() const {
    std::ostringstream os;
    os << "encoder{L=" << layers << ",C=" << channels << ",patch=" << patch
       << ",heads=" << heads << ",mlp=" << mlp_ratio << ",K=" << insertion_layer << ",M=";
    for (int m : feature_levels) os << m << ",";
    os << "viewemb=" << (use_view_embedding ? 1 : 0) << ",maxv=" << max_views
       << ",posehidden=" << pose_hidden << "}";
    return os.str();
}

Tensor patchify(const std::vector<Image>& images, int patch) {
    if (images.empty()) throw std::invalid_argument("patchify: no images");
    const int h = images[0].h, w = images[0].w;
    if (h % patch != 0 || w % patch != 0)
        throw std::invalid_argument("patchify: image size not divisible by patch");
    const int gh = h / patch, gw = w / patch;
    const int n = gh * gw;
    const int d = patch * patch * 3;
    Tensor out(static_cast<int>(images.size()) * n, d);
    for (size_t v = 0; v < images.size(); ++v) {
        const Image& img = images[v];
        if (img.h != h || img.w != w) throw std::invalid_argument("patchify: mixed image sizes");
        for (int r = 0; r < gh; ++r)
            for (int c = 0; c < gw; ++c) {
                int row = static_cast<int>(v) * n + r * gw + c;
                int col = 0;
                for (int py = 0; py < patch; ++py)
                    for (int px = 0; px < patch; ++px)
                        for (int ch = 0; ch < 3; ++ch)
                            out(row, col++) = img.at(r * patch + py, c * patch + px, ch) - 0.5;
            }
    }
    return out;
}

MultiViewEncoder::MultiViewEncoder(const EncoderConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    RandomStream rng(derive_seed(init_seed, 0xe2c0de2));
    patch_embed_ = nn::LinearLayer(params_, "patch_embed", cfg_.patch * cfg_.patch * 3,
                                   cfg_.channels, rng);
    // zero-init: unused view rows stay exact no-ops at any view count
    view_embed_ = &params_.add("view_embed", Tensor(cfg_.max_views, cfg_.channels));
    for (int l = 1; l <= cfg_.layers; ++l)
        blocks_.emplace_back(params_, "layer" + std::to_string(l), cfg_.channels, cfg_.heads,
                             cfg_.channels * cfg_.mlp_ratio, rng);
}

int MultiViewEncoder::embed(Graph& g, nn::Binder& bi, const std::vector<Image>& images) const {
    const int views = static_cast<int>(images.size());
    if (views > cfg_.max_views) throw std::invalid_argument("encoder: too many views");
    const int n = cfg_.tokens_per_view(images[0].h);
    const int grid = images[0].h / cfg_.patch;

    int tokens = patch_embed_.forward(g, bi, g.leaf(patchify(images, cfg_.patch)));

    Tensor pos = nn::sincos_pos_embedding_2d(grid, grid, cfg_.channels);
    Tensor pos_tiled(views * n, cfg_.channels);
    for (int v = 0; v < views; ++v)
        std::copy(pos.data.begin(), pos.data.end(),
                  pos_tiled.data.begin() + static_cast<size_t>(v) * n * cfg_.channels);
    int x = g.add(tokens, g.leaf(std::move(pos_tiled)));

    if (cfg_.use_view_embedding) {
        int table = bi(*view_embed_);
        std::vector<int> parts;
        for (int v = 0; v < views; ++v)
            parts.push_back(
                g.add_rowvec(g.slice_rows(x, v * n, n), g.slice_rows(table, v, 1)));
        x = g.concat_rows(parts);
    }
    return x;
}

int MultiViewEncoder::layer_forward(Graph& g, nn::Binder& bi, int x, int layer,
                                    int views) const {
    const int n = g.val(x).rows / views;
    // odd layers attend within each frame, even layers across all views
    nn::Segments segs = (layer % 2 == 1) ? nn::frame_segments(views, n)
                                         : nn::global_segments(views, n);
    return blocks_[layer - 1].forward(g, bi, x, segs);
}

std::vector<int> MultiViewEncoder::forward(Graph& g, nn::Binder& bi,
                                           const std::vector<Image>& images) const {
    const int views = static_cast<int>(images.size());
    int x = embed(g, bi, images);
    std::vector<int> ids;
    for (int l = 1; l <= cfg_.layers; ++l) {
        x = layer_forward(g, bi, x, l, views);
        ids.push_back(x);
    }
    return ids;
}

std::vector<int> MultiViewEncoder::forward_from(Graph& g, nn::Binder& bi, int zk_node, int views,
                                                int from_layer) const {
    if (from_layer < 1 || from_layer >= cfg_.layers)
        throw std::invalid_argument("encoder: bad continuation layer");
    if (g.val(zk_node).cols != cfg_.channels || g.val(zk_node).rows % views != 0)
        throw std::invalid_argument("encoder: continuation tensor shape mismatch");
    std::vector<int> ids;
    int x = zk_node;
    for (int l = from_layer + 1; l <= cfg_.layers; ++l) {
        x = layer_forward(g, bi, x, l, views);
        ids.push_back(x);
    }
    return ids;
}

LayerLatents MultiViewEncoder::encode(const std::vector<Image>& images) const {
    Graph g(false);
    nn::Binder bi(g, false);
    std::vector<int> ids = forward(g, bi, images);
    LayerLatents out;
    out.views = static_cast<int>(images.size());
    out.tokens_per_view = cfg_.tokens_per_view(images[0].h);
    out.channels = cfg_.channels;
    for (int id : ids) out.layers.push_back(g.val(id));
    return out;
}

LayerLatents MultiViewEncoder::continue_from_layer(const Tensor& zk, int views,
                                                   int from_layer) const {
    Graph g(false);
    nn::Binder bi(g, false);
    if (!zk.all_finite()) throw std::invalid_argument("continue_from_layer: non-finite input");
    std::vector<int> ids = forward_from(g, bi, g.leaf(zk), views, from_layer);
    LayerLatents out;
    out.views = views;
    out.tokens_per_view = zk.rows / views;
    out.channels = cfg_.channels;
    for (int id : ids) out.layers.push_back(g.val(id));
    return out;
}

GeometryDecoder::GeometryDecoder(const EncoderConfig& cfg, nn::ParamSet& params,
                                 uint64_t init_seed)
    : patch_(cfg.patch) {
    RandomStream rng(derive_seed(init_seed, 0xdec0de));
    const int in = 4 * cfg.channels;
    depth_head_ = nn::LinearLayer(params, "geo.depth_head", in, cfg.patch * cfg.patch, rng);
    pose_fc1_ = nn::LinearLayer(params, "geo.pose_fc1", in, cfg.pose_hidden, rng);
    pose_fc2_ = nn::LinearLayer(params, "geo.pose_fc2", cfg.pose_hidden, 7, rng);
}

GeometryDecoder::GraphOut GeometryDecoder::forward(Graph& g, nn::Binder& bi,
                                                   const std::vector<int>& level_nodes,
                                                   int views, int tokens_per_view) const {
    if (level_nodes.size() != 4)
        throw std::invalid_argument("GeometryDecoder: exactly 4 feature levels required");
    int feat = g.concat_cols(level_nodes);

    GraphOut out;
    out.depth_tokens = g.softplus(depth_head_.forward(g, bi, feat));

    std::vector<int> pooled;
    for (int v = 0; v < views; ++v)
        pooled.push_back(g.mean_rows(g.slice_rows(feat, v * tokens_per_view, tokens_per_view)));
    int per_view = views == 1 ? pooled[0] : g.concat_rows(pooled);
    int raw = pose_fc2_.forward(g, bi, g.gelu(pose_fc1_.forward(g, bi, per_view)));

    // identity-offset before normalization keeps the zero-init case well-posed
    Tensor offset(1, 4);
    offset(0, 0) = 1.0;
    out.pose_quat = g.normalize_rows(g.add_rowvec(g.slice_cols(raw, 0, 4), g.leaf(offset)));
    out.pose_trans = g.slice_cols(raw, 4, 3);
    return out;
}

GeometryPrediction GeometryDecoder::decode(const LayerLatents& latents, const EncoderConfig& cfg,
                                           int image_size) const {
    Graph g(false);
    nn::Binder bi(g, false);
    std::vector<int> levels;
    for (int m : cfg.feature_levels) levels.push_back(g.leaf(latents.at_layer(m)));
    GraphOut got = forward(g, bi, levels, latents.views, latents.tokens_per_view);

    GeometryPrediction pred;
    pred.depth = depth_tokens_to_maps(g.val(got.depth_tokens), latents.views, image_size,
                                      cfg.patch);
    const Tensor& q = g.val(got.pose_quat);
    const Tensor& t = g.val(got.pose_trans);
    for (int v = 0; v < latents.views; ++v)
        pred.poses.emplace_back(Quat(q(v, 0), q(v, 1), q(v, 2), q(v, 3)).normalized(),
                                Eigen::Vector3d(t(v, 0), t(v, 1), t(v, 2)));
    return pred;
}

std::vector<DepthMap> depth_tokens_to_maps(const Tensor& tokens, int views, int image_size,
                                           int patch) {
    const int grid = image_size / patch;
    const int n = grid * grid;
    if (tokens.rows != views * n || tokens.cols != patch * patch)
        throw std::invalid_argument("depth_tokens_to_maps: shape mismatch");
    std::vector<DepthMap> maps;
    for (int v = 0; v < views; ++v) {
        DepthMap d(image_size, image_size);
        for (int r = 0; r < grid; ++r)
            for (int c = 0; c < grid; ++c) {
                int row = v * n + r * grid + c;
                for (int py = 0; py < patch; ++py)
                    for (int px = 0; px < patch; ++px)
                        d.set(r * patch + py, c * patch + px,
                              tokens(row, py * patch + px));
            }
        maps.push_back(std::move(d));
    }
    return maps;
}

Tensor depth_maps_to_tokens(const std::vector<DepthMap>& maps, int patch, Tensor* valid_mask) {
    const int views = static_cast<int>(maps.size());
    const int grid = maps[0].h / patch;
    const int n = grid * grid;
    Tensor out(views * n, patch * patch);
    if (valid_mask) *valid_mask = Tensor(views * n, patch * patch);
    for (int v = 0; v < views; ++v)
        for (int r = 0; r < grid; ++r)
            for (int c = 0; c < grid; ++c) {
                int row = v * n + r * grid + c;
                for (int py = 0; py < patch; ++py)
                    for (int px = 0; px < patch; ++px) {
                        int col = py * patch + px;
                        out(row, col) = maps[v].at(r * patch + py, c * patch + px);
                        if (valid_mask)
                            (*valid_mask)(row, col) =
                                maps[v].is_valid(r * patch + py, c * patch + px) ? 1.0 : 0.0;
                    }
            }
    return out;
}

Tensor images_to_tokens(const std::vector<Image>& images, int patch) {
    const int views = static_cast<int>(images.size());
    const int grid = images[0].h / patch;
    const int n = grid * grid;
    Tensor out(views * n, patch * patch * 3);
    for (int v = 0; v < views; ++v)
        for (int r = 0; r < grid; ++r)
            for (int c = 0; c < grid; ++c) {
                int row = v * n + r * grid + c;
                int col = 0;
                for (int py = 0; py < patch; ++py)
                    for (int px = 0; px < patch; ++px)
                        for (int ch = 0; ch < 3; ++ch)
                            out(row, col++) = images[v].at(r * patch + py, c * patch + px, ch);
            }
    return out;
}

namespace {

std::vector<int> pick_view_subset(int total, int v, RandomStream& rng) {
    std::vector<int> all(total);
    for (int i = 0; i < total; ++i) all[i] = i;
    std::vector<int> out;
    for (int i = 0; i < v; ++i) {
        int j = rng.uniform_int(static_cast<int>(all.size()));
        out.push_back(all[j]);
        all.erase(all.begin() + j);
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

// Builds the pretraining loss for one clean sample in-graph.
static int encoder_sample_loss(const MultiViewEncoder& encoder, const GeometryDecoder& decoder,
                               Graph& g, nn::Binder& bi, const MultiViewSample& s,
                               std::vector<double>* components) {
    const EncoderConfig& cfg = encoder.config();
    std::vector<int> layer_ids = encoder.forward(g, bi, s.images);
    std::vector<int> levels;
    for (int m : cfg.feature_levels) levels.push_back(layer_ids[m - 1]);
    const int n = cfg.tokens_per_view(s.images[0].h);
    auto geo = decoder.forward(g, bi, levels, s.view_count(), n);

    // depth: |log pred - log gt| over valid pixels
    Tensor mask;
    Tensor gt_tokens = depth_maps_to_tokens(s.depths, cfg.patch, &mask);
    double count = 0.0;
    for (double m : mask.data) count += m;
    Tensor gt_log = gt_tokens;
    for (size_t i = 0; i < gt_log.size(); ++i)
        gt_log.data[i] = mask.data[i] > 0.0 ? std::log(gt_log.data[i]) : 0.0;
    int diff = g.sub(g.log_eps(geo.depth_tokens, 1e-8), g.leaf(gt_log));
    int masked = g.mul(g.abs(diff), g.leaf(mask));
    int depth_loss = g.scale(g.sum_all(masked), count > 0 ? 1.0 / count : 0.0);

    // pose targets relative to the first view of the subset
    const int vcount = s.view_count();
    Tensor gt_q(vcount, 4), gt_t(vcount, 3);
    for (int v = 0; v < vcount; ++v) {
        CameraPose rel = relative_pose(s.poses[0], s.poses[v]);
        gt_q(v, 0) = rel.rotation.w;
        gt_q(v, 1) = rel.rotation.x;
        gt_q(v, 2) = rel.rotation.y;
        gt_q(v, 3) = rel.rotation.z;
        for (int j = 0; j < 3; ++j) gt_t(v, j) = rel.translation[j];
    }
    int qdot = g.row_sum(g.mul(geo.pose_quat, g.leaf(gt_q)));
    int rot_loss = g.mean_all(g.scale(g.acos_clamped(g.abs(qdot)), 2.0));
    int tdiff = g.sub(geo.pose_trans, g.leaf(gt_t));
    int trans_loss = g.mean_all(g.sqrt_eps(g.row_sum(g.mul(tdiff, tdiff)), 1e-12));

    if (components) {
        components->push_back(g.val(depth_loss).item());
        components->push_back(g.val(rot_loss).item());
        components->push_back(g.val(trans_loss).item());
    }
    return g.add(g.add(depth_loss, rot_loss), trans_loss);
}

void pretrain_encoder(MultiViewEncoder& encoder, GeometryDecoder& decoder,
                      const std::vector<MultiViewSample>& scenes, const PretrainConfig& cfg,
                      nn::AdamW& opt, int64_t start_step,
                      const std::function<void(const StepLog&)>& on_step) {
    if (scenes.empty()) throw std::invalid_argument("pretrain_encoder: empty dataset");
    if (encoder.params().frozen()) throw std::logic_error("pretrain_encoder: parameters frozen");

    for (int64_t step = start_step; step < cfg.steps; ++step) {
        encoder.params().zero_grads();
        double total = 0.0;
        std::vector<double> comps(3, 0.0);
        for (int b = 0; b < cfg.batch_scenes; ++b) {
            RandomStream rng(derive_seed(cfg.seed, 0xbe7, static_cast<uint64_t>(step),
                                         static_cast<uint64_t>(b)));
            const MultiViewSample& scene =
                scenes[rng.uniform_int(static_cast<int>(scenes.size()))];
            int v = cfg.min_views + rng.uniform_int(cfg.max_views - cfg.min_views + 1);
            v = std::min(v, scene.view_count());
            MultiViewSample sub = scene.subset(pick_view_subset(scene.view_count(), v, rng));

            Graph g(true);
            nn::Binder bi(g, true);
            std::vector<double> comp;
            int loss = encoder_sample_loss(encoder, decoder, g, bi, sub, &comp);
            double lv = g.val(loss).item();
            if (!std::isfinite(lv))
                throw std::runtime_error("pretrain_encoder: non-finite loss at step " +
                                         std::to_string(step));
            g.backward(g.scale(loss, 1.0 / cfg.batch_scenes));
            bi.apply_grads();
            total += lv / cfg.batch_scenes;
            for (int i = 0; i < 3; ++i) comps[i] += comp[i] / cfg.batch_scenes;
        }
        double gn = nn::clip_global_grad_norm(encoder.params(), cfg.clip_norm);
        opt.step();
        if (on_step) {
            StepLog log;
            log.step = step + 1;
            log.values = {{"loss", total},
                          {"depth", comps[0]},
                          {"rot", comps[1]},
                          {"trans", comps[2]},
                          {"grad_norm", gn}};
            on_step(log);
        }
    }
}

}  // namespace gardlab
