#include "gardlab/rgb_decoder.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace gardlab {

void RgbDecoderConfig::validate() const {
    if (blocks < 1) throw std::invalid_argument("RgbDecoderConfig: at least one block");
    if (hidden % heads != 0) throw std::invalid_argument("RgbDecoderConfig: hidden % heads");
}

std::string RgbDecoderConfig::digest_string() const {
    std::ostringstream os;
    os << "rgbdec{C=" << channels << ",hidden=" << hidden << ",blocks=" << blocks
       << ",heads=" << heads << ",mlp=" << mlp_ratio << ",patch=" << patch << "}";
    return os.str();
}

RgbDecoder::RgbDecoder(const RgbDecoderConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    RandomStream rng(derive_seed(init_seed, 0x26bdec));
    in_proj_ = nn::LinearLayer(params_, "in_proj", 4 * cfg_.channels, cfg_.hidden, rng);
    for (int i = 1; i <= cfg_.blocks; ++i)
        blocks_.emplace_back(params_, "block" + std::to_string(i), cfg_.hidden, cfg_.heads,
                             cfg_.hidden * cfg_.mlp_ratio, rng);
    head_ = nn::LinearLayer(params_, "head", cfg_.hidden, cfg_.patch * cfg_.patch * 3, rng);
}

int RgbDecoder::forward(Graph& g, nn::Binder& bi, const std::vector<int>& level_nodes,
                        int views, int tokens_per_view) const {
    if (level_nodes.size() != 4)
        throw std::invalid_argument("RgbDecoder: exactly 4 feature levels required");
    int x = in_proj_.forward(g, bi, g.concat_cols(level_nodes));
    nn::Segments segs = nn::frame_segments(views, tokens_per_view);
    for (const auto& block : blocks_) x = block.forward(g, bi, x, segs);
    return g.sigmoid(head_.forward(g, bi, x));
}

std::vector<Image> RgbDecoder::decode(const LayerLatents& latents, const EncoderConfig& ecfg,
                                      int image_size) const {
    Graph g(false);
    nn::Binder bi(g, false);
    std::vector<int> levels;
    for (int m : ecfg.feature_levels) levels.push_back(g.leaf(latents.at_layer(m)));
    int out = forward(g, bi, levels, latents.views, latents.tokens_per_view);
    return rgb_tokens_to_images(g.val(out), latents.views, image_size, cfg_.patch);
}

std::vector<Image> rgb_tokens_to_images(const Tensor& tokens, int views, int image_size,
                                        int patch) {
    const int grid = image_size / patch;
    const int n = grid * grid;
    if (tokens.rows != views * n || tokens.cols != patch * patch * 3)
        throw std::invalid_argument("rgb_tokens_to_images: shape mismatch");
    std::vector<Image> out;
    for (int v = 0; v < views; ++v) {
        Image img(image_size, image_size);
        for (int r = 0; r < grid; ++r)
            for (int c = 0; c < grid; ++c) {
                int row = v * n + r * grid + c;
                int col = 0;
                for (int py = 0; py < patch; ++py)
                    for (int px = 0; px < patch; ++px)
                        for (int ch = 0; ch < 3; ++ch)
                            img.at(r * patch + py, c * patch + px, ch) = tokens(row, col++);
            }
        out.push_back(std::move(img));
    }
    return out;
}

void train_rgb_decoder(RgbDecoder& decoder, const MultiViewEncoder& encoder,
                       const std::vector<MultiViewSample>& scenes, const RgbTrainConfig& cfg,
                       nn::AdamW& opt, nn::Ema& ema, int64_t start_step,
                       const std::function<void(const StepLog&)>& on_step) {
    if (scenes.empty()) throw std::invalid_argument("train_rgb_decoder: empty dataset");
    if (!encoder.params().frozen())
        throw std::logic_error("train_rgb_decoder: encoder must be frozen");
    const EncoderConfig& ecfg = encoder.config();

    for (int64_t step = start_step; step < cfg.steps; ++step) {
        decoder.params().zero_grads();
        double total = 0.0;
        for (int b = 0; b < cfg.batch_scenes; ++b) {
            RandomStream rng(derive_seed(cfg.seed, 0x26b7, static_cast<uint64_t>(step),
                                         static_cast<uint64_t>(b)));
            const MultiViewSample& scene =
                scenes[rng.uniform_int(static_cast<int>(scenes.size()))];
            int want = cfg.min_views + rng.uniform_int(cfg.max_views - cfg.min_views + 1);
            want = std::min(want, scene.view_count());
            std::vector<int> all(scene.view_count());
            for (int i = 0; i < scene.view_count(); ++i) all[i] = i;
            std::vector<int> chosen;
            for (int i = 0; i < want; ++i) {
                int j = rng.uniform_int(static_cast<int>(all.size()));
                chosen.push_back(all[j]);
                all.erase(all.begin() + j);
            }
            std::sort(chosen.begin(), chosen.end());
            MultiViewSample sub = scene.subset(chosen);

            LayerLatents lat = encoder.encode(sub.images);
            Graph g(true);
            nn::Binder bi(g, true);
            std::vector<int> levels;
            for (int m : ecfg.feature_levels) levels.push_back(g.leaf(lat.at_layer(m)));
            int pred = decoder.forward(g, bi, levels, sub.view_count(), lat.tokens_per_view);
            int target = g.leaf(images_to_tokens(sub.images, ecfg.patch));
            int loss = g.mean_all(g.abs(g.sub(pred, target)));
            double lv = g.val(loss).item();
            if (!std::isfinite(lv))
                throw std::runtime_error("train_rgb_decoder: non-finite loss at step " +
                                         std::to_string(step));
            g.backward(g.scale(loss, 1.0 / cfg.batch_scenes));
            bi.apply_grads();
            total += lv / cfg.batch_scenes;
        }
        double gn = nn::clip_global_grad_norm(decoder.params(), cfg.clip_norm);
        opt.step();
        ema.update();
        if (on_step) {
            StepLog log;
            log.step = step + 1;
            log.values = {{"l1", total}, {"grad_norm", gn}};
            on_step(log);
        }
    }
}

}  // namespace gardlab
