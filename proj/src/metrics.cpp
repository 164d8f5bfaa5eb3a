#include "gardlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace gardlab {

const std::vector<std::string>& metric_registry() {
    static const std::vector<std::string> kRegistry = {
        "auc5",       "auc30",           "absrel",          "delta1",
        "chamfer_acc", "chamfer_comp",   "chamfer_overall", "fscore",
        "psnr"};
    return kRegistry;
}

void MetricReport::set(const std::string& name, double v) {
    const auto& reg = metric_registry();
    if (std::find(reg.begin(), reg.end(), name) == reg.end())
        throw std::invalid_argument("MetricReport: unknown metric " + name);
    values[name] = v;
}

double MetricReport::get(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end()) throw std::out_of_range("MetricReport: missing metric " + name);
    return it->second;
}

std::vector<Eigen::Vector2d> patch_centers(int image_size, int patch) {
    const int grid = image_size / patch;
    std::vector<Eigen::Vector2d> centers;
    centers.reserve(static_cast<size_t>(grid) * grid);
    const double half = (patch - 1) / 2.0;
    for (int r = 0; r < grid; ++r)
        for (int c = 0; c < grid; ++c)
            centers.emplace_back(c * patch + half, r * patch + half);
    return centers;
}

std::vector<PckQuery> pck_queries(const MultiViewSample& sample, int src_view, int dst_view,
                                  int patch) {
    std::vector<PckQuery> out;
    const int image_size = sample.depths[src_view].h;
    std::vector<Eigen::Vector2d> centers = patch_centers(image_size, patch);
    for (size_t tok = 0; tok < centers.size(); ++tok) {
        const Eigen::Vector2d& px = centers[tok];
        int ix = static_cast<int>(std::lround(px.x()));
        int iy = static_cast<int>(std::lround(px.y()));
        if (!sample.depths[src_view].is_valid(iy, ix)) continue;
        Correspondence c = gt_correspondence(px, src_view, dst_view, sample);
        if (!c.ok()) continue;
        PckQuery q;
        q.src_pixel = px;
        q.gt_pixel = c.pixel;
        q.src_token = static_cast<int>(tok);
        out.push_back(q);
    }
    return out;
}

std::vector<double> pck(const Tensor& feat_src, const Tensor& feat_dst,
                        const std::vector<PckQuery>& queries,
                        const std::vector<Eigen::Vector2d>& dst_token_centers,
                        const std::vector<double>& thresholds) {
    if (queries.empty()) throw std::invalid_argument("pck: no valid ground-truth pairs");
    if (feat_dst.rows != static_cast<int>(dst_token_centers.size()))
        throw std::invalid_argument("pck: token center count mismatch");

    // precompute destination norms
    std::vector<double> dst_norm(feat_dst.rows);
    for (int j = 0; j < feat_dst.rows; ++j) {
        double s = 0.0;
        for (int c = 0; c < feat_dst.cols; ++c) s += feat_dst(j, c) * feat_dst(j, c);
        dst_norm[j] = std::sqrt(s);
    }

    std::vector<int> correct(thresholds.size(), 0);
    for (const PckQuery& q : queries) {
        double src_norm = 0.0;
        for (int c = 0; c < feat_src.cols; ++c)
            src_norm += feat_src(q.src_token, c) * feat_src(q.src_token, c);
        src_norm = std::sqrt(src_norm);

        int best = 0;
        double best_sim = -std::numeric_limits<double>::max();
        for (int j = 0; j < feat_dst.rows; ++j) {
            double dot = 0.0;
            for (int c = 0; c < feat_dst.cols; ++c) dot += feat_src(q.src_token, c) * feat_dst(j, c);
            double denom = std::max(1e-12, src_norm * dst_norm[j]);
            double sim = dot / denom;
            if (sim > best_sim) {
                best_sim = sim;
                best = j;
            }
        }
        double err = (dst_token_centers[best] - q.gt_pixel).norm();
        for (size_t k = 0; k < thresholds.size(); ++k)
            if (err <= thresholds[k]) ++correct[k];
    }
    std::vector<double> out;
    for (size_t k = 0; k < thresholds.size(); ++k)
        out.push_back(static_cast<double>(correct[k]) / static_cast<double>(queries.size()));
    return out;
}

PoseAuc pose_auc(const std::vector<CameraPose>& pred, const std::vector<CameraPose>& gt) {
    if (pred.size() != gt.size() || pred.size() < 2)
        throw std::invalid_argument("pose_auc: need matched pose lists with V >= 2");
    const int v = static_cast<int>(pred.size());
    std::vector<double> errors;
    for (int i = 0; i < v; ++i)
        for (int j = 0; j < v; ++j) {
            if (i == j) continue;
            CameraPose rp = relative_pose(pred[i], pred[j]);
            CameraPose rg = relative_pose(gt[i], gt[j]);
            double rot_err = rp.rotation.angle_to(rg.rotation) * 180.0 / M_PI;

            double trans_err = 0.0;
            double np = rp.translation.norm(), ng = rg.translation.norm();
            if (np >= 1e-6 && ng >= 1e-6) {
                double cosang = rp.translation.dot(rg.translation) / (np * ng);
                cosang = std::min(1.0, std::max(-1.0, cosang));
                trans_err = std::acos(cosang) * 180.0 / M_PI;
            }
            errors.push_back(std::max(rot_err, trans_err));
        }

    auto auc_at = [&](int tau) {
        double acc_sum = 0.0;
        for (int th = 1; th <= tau; ++th) {
            int ok = 0;
            for (double e : errors)
                if (e < static_cast<double>(th)) ++ok;
            acc_sum += static_cast<double>(ok) / static_cast<double>(errors.size());
        }
        return 100.0 * acc_sum / tau;
    };
    PoseAuc out;
    out.auc5 = auc_at(5);
    out.auc30 = auc_at(30);
    return out;
}

DepthMetrics depth_metrics(const DepthMap& pred, const DepthMap& gt, bool scale_align) {
    if (pred.h != gt.h || pred.w != gt.w)
        throw std::invalid_argument("depth_metrics: shape mismatch");
    double num = 0.0, den = 0.0;
    int count = 0;
    for (int y = 0; y < gt.h; ++y)
        for (int x = 0; x < gt.w; ++x) {
            if (!gt.is_valid(y, x) || !pred.is_valid(y, x)) continue;
            num += pred.at(y, x) * gt.at(y, x);
            den += pred.at(y, x) * pred.at(y, x);
            ++count;
        }
    if (count == 0) throw std::invalid_argument("depth_metrics: no valid pixels");
    double scale = scale_align && den > 0.0 ? num / den : 1.0;

    double absrel = 0.0;
    int inlier = 0;
    for (int y = 0; y < gt.h; ++y)
        for (int x = 0; x < gt.w; ++x) {
            if (!gt.is_valid(y, x) || !pred.is_valid(y, x)) continue;
            double p = scale * pred.at(y, x);
            double g = gt.at(y, x);
            absrel += std::fabs(p - g) / g;
            double ratio = std::max(p / g, g / p);
            if (ratio < 1.25) ++inlier;
        }
    DepthMetrics out;
    out.absrel = absrel / count;
    out.delta1 = static_cast<double>(inlier) / count;
    return out;
}

namespace {

std::vector<Eigen::Vector3d> cap_points(const std::vector<Eigen::Vector3d>& pts, size_t cap,
                                        uint64_t seed) {
    if (pts.size() <= cap) return pts;
    RandomStream rng(seed);
    std::vector<Eigen::Vector3d> out;
    out.reserve(cap);
    double step = static_cast<double>(pts.size()) / static_cast<double>(cap);
    for (size_t i = 0; i < cap; ++i) {
        size_t j = static_cast<size_t>(i * step + rng.uniform() * step);
        out.push_back(pts[std::min(j, pts.size() - 1)]);
    }
    return out;
}

double nearest_distance(const std::vector<Eigen::Vector3d>& cloud, const Eigen::Vector3d& q) {
    double best = std::numeric_limits<double>::max();
    for (const auto& p : cloud) best = std::min(best, (p - q).squaredNorm());
    return std::sqrt(best);
}

}  // namespace

CloudMetrics cloud_metrics(const PointCloud& pred, const PointCloud& gt, double f_threshold,
                           bool align, size_t subsample_cap) {
    if (pred.points.empty() || gt.points.empty())
        throw std::invalid_argument("cloud_metrics: empty cloud");
    std::vector<Eigen::Vector3d> p = cap_points(pred.points, subsample_cap, 0xacc);
    std::vector<Eigen::Vector3d> g = cap_points(gt.points, subsample_cap, 0x6cc);

    if (align) {
        PointCloud pc{p, {}}, gc{g, {}};
        SimilarityTransform t = umeyama_align(pc, gc, false);
        for (auto& q : p) q = t.apply(q);
    }

    if (f_threshold <= 0.0) {
        Eigen::AlignedBox3d box;
        for (const auto& q : g) box.extend(q);
        f_threshold = 0.02 * box.diagonal().norm();
    }

    CloudMetrics out;
    int prec_ok = 0, rec_ok = 0;
    for (const auto& q : p) {
        double d = nearest_distance(g, q);
        out.accuracy += d;
        if (d < f_threshold) ++prec_ok;
    }
    for (const auto& q : g) {
        double d = nearest_distance(p, q);
        out.completeness += d;
        if (d < f_threshold) ++rec_ok;
    }
    out.accuracy /= static_cast<double>(p.size());
    out.completeness /= static_cast<double>(g.size());
    out.overall = 0.5 * (out.accuracy + out.completeness);
    out.precision = static_cast<double>(prec_ok) / static_cast<double>(p.size());
    out.recall = static_cast<double>(rec_ok) / static_cast<double>(g.size());
    out.f_score = (out.precision + out.recall) > 0.0
                      ? 100.0 * 2.0 * out.precision * out.recall / (out.precision + out.recall)
                      : 0.0;
    return out;
}

double psnr(const Image& a, const Image& b) {
    if (a.h != b.h || a.w != b.w) throw std::invalid_argument("psnr: shape mismatch");
    double mse = 0.0;
    for (size_t i = 0; i < a.rgb.size(); ++i) {
        double d = a.rgb[i] - b.rgb[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.rgb.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

std::vector<double> feature_similarity(const LayerLatents& a, const LayerLatents& b) {
    if (a.layer_count() != b.layer_count())
        throw std::invalid_argument("feature_similarity: layer count mismatch");
    std::vector<double> sims;
    for (int l = 0; l < a.layer_count(); ++l) {
        const Tensor& ta = a.layers[l];
        const Tensor& tb = b.layers[l];
        if (!ta.same_shape(tb))
            throw std::invalid_argument("feature_similarity: shape mismatch at layer " +
                                        std::to_string(l + 1));
        double sum = 0.0;
        int used = 0;
        for (int r = 0; r < ta.rows; ++r) {
            double dot = 0.0, na = 0.0, nb = 0.0;
            for (int c = 0; c < ta.cols; ++c) {
                dot += ta(r, c) * tb(r, c);
                na += ta(r, c) * ta(r, c);
                nb += tb(r, c) * tb(r, c);
            }
            if (na <= 0.0 || nb <= 0.0) continue;  // zero-norm token
            sum += dot / std::sqrt(na * nb);
            ++used;
        }
        sims.push_back(used > 0 ? sum / used : 0.0);
    }
    return sims;
}

}  // namespace gardlab
