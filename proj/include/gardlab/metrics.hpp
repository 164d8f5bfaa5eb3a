#pragma once

#include <map>
#include <string>
#include <vector>

#include "gardlab/encoder.hpp"
#include "gardlab/geometry.hpp"
#include "gardlab/tensor.hpp"

namespace gardlab {

// Fixed metric registry; CSV columns and aggregate JSON keys are drawn from
// this list, schema "gardlab-metrics-1".
const std::vector<std::string>& metric_registry();

struct MetricReport {
    std::map<std::string, double> values;
    // provenance
    int scene_id = -1;
    std::string severity;
    std::string method;
    int views = 0;
    uint64_t seed = 0;

    void set(const std::string& name, double v);
    double get(const std::string& name) const;
};

// PCK over feature cost volumes. Query tokens map to patch centers; the
// predicted match is the argmax-cosine destination token, counted correct
// when its center lies within `threshold` pixels of the ground-truth
// correspondence. Thresholds are in pixels.
struct PckQuery {
    Eigen::Vector2d src_pixel;   // patch-center query in the source view
    Eigen::Vector2d gt_pixel;    // ground-truth correspondence in the dst view
    int src_token = 0;
};

std::vector<double> pck(const Tensor& feat_src, const Tensor& feat_dst,
                        const std::vector<PckQuery>& queries,
                        const std::vector<Eigen::Vector2d>& dst_token_centers,
                        const std::vector<double>& thresholds);

// Patch-center pixel coordinates for an image-size/patch grid, token order
// row-major.
std::vector<Eigen::Vector2d> patch_centers(int image_size, int patch);

// Builds PCK queries from ground truth for a view pair (valid, unoccluded
// correspondences at patch centers).
std::vector<PckQuery> pck_queries(const MultiViewSample& sample, int src_view, int dst_view,
                                  int patch);

// AUC of pose accuracy at integer angle thresholds 1..tau, percent scale.
// Pair error = max(relative rotation angle, relative translation direction
// angle) over ordered view pairs.
struct PoseAuc {
    double auc5 = 0.0;
    double auc30 = 0.0;
};
PoseAuc pose_auc(const std::vector<CameraPose>& pred, const std::vector<CameraPose>& gt);

// Per-view median-free least-squares scale alignment, then AbsRel and the
// inlier ratio delta1 (< 1.25).
struct DepthMetrics {
    double absrel = 0.0;
    double delta1 = 0.0;
};
DepthMetrics depth_metrics(const DepthMap& pred, const DepthMap& gt, bool scale_align = true);

struct CloudMetrics {
    double accuracy = 0.0;
    double completeness = 0.0;
    double overall = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f_score = 0.0;  // percent
};
// Nearest-neighbor chamfer/F-score between two clouds; when align is true
// the prediction is first registered onto the ground truth with the
// unpaired similarity alignment. f_threshold <= 0 selects 2% of the ground
// truth bounding-box diagonal.
CloudMetrics cloud_metrics(const PointCloud& pred, const PointCloud& gt, double f_threshold,
                           bool align = true, size_t subsample_cap = 4096);

// 10*log10(1/MSE) for [0,1] images; +infinity when the images are identical.
double psnr(const Image& a, const Image& b);

// Mean token cosine similarity per layer; zero-norm tokens are excluded.
std::vector<double> feature_similarity(const LayerLatents& a, const LayerLatents& b);

}  // namespace gardlab
