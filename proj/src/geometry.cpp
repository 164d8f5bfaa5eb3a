#include "gardlab/geometry.hpp"

#include <cmath>
#include <stdexcept>

#include "gardlab/tensor.hpp"

namespace gardlab {

Quat Quat::normalized() const {
    double n = norm();
    if (n < 1e-12) throw std::invalid_argument("Quat: cannot normalize near-zero quaternion");
    double s = 1.0 / n;
    Quat q(w * s, x * s, y * s, z * s);
    if (q.w < 0.0) {
        q.w = -q.w;
        q.x = -q.x;
        q.y = -q.y;
        q.z = -q.z;
    }
    return q;
}

double Quat::angle_to(const Quat& o) const {
    double d = std::fabs(w * o.w + x * o.x + y * o.y + z * o.z);
    d = std::min(1.0, d);
    return 2.0 * std::acos(d);
}

Quat quat_from_matrix(const Eigen::Matrix3d& r) { return Quat(Eigen::Quaterniond(r)).normalized(); }

CameraPose CameraPose::inverse() const {
    Quat qi = rotation.conjugate().normalized();
    return CameraPose(qi, -(qi.matrix() * translation));
}

CameraPose CameraPose::compose(const CameraPose& other) const {
    return CameraPose((rotation * other.rotation).normalized(),
                      r() * other.translation + translation);
}

CameraPose relative_pose(const CameraPose& a, const CameraPose& b) {
    return a.inverse().compose(b);
}

void Intrinsics::validate() const {
    if (fx <= 0 || fy <= 0) throw std::invalid_argument("Intrinsics: focal lengths must be > 0");
    if (cx < 0 || cx >= width || cy < 0 || cy >= height)
        throw std::invalid_argument("Intrinsics: principal point outside image");
}

MultiViewSample MultiViewSample::subset(const std::vector<int>& view_indices) const {
    MultiViewSample out;
    out.intrinsics = intrinsics;
    out.seed = seed;
    for (int v : view_indices) {
        if (v < 0 || v >= view_count()) throw std::out_of_range("MultiViewSample::subset");
        out.images.push_back(images[v]);
        out.depths.push_back(depths[v]);
        out.poses.push_back(poses[v]);
    }
    return out;
}

std::optional<Projection> project(const Eigen::Vector3d& point, const CameraPose& pose,
                                  const Intrinsics& intr) {
    Eigen::Vector3d pc = pose.r().transpose() * (point - pose.translation);
    if (pc.z() <= 1e-8) return std::nullopt;  // behind camera
    Projection out;
    out.pixel = Eigen::Vector2d(intr.fx * pc.x() / pc.z() + intr.cx,
                                intr.fy * pc.y() / pc.z() + intr.cy);
    out.depth = pc.z();
    return out;
}

Eigen::Vector3d unproject(const Eigen::Vector2d& pixel, double depth, const CameraPose& pose,
                          const Intrinsics& intr) {
    if (!(depth > 0.0) || !std::isfinite(depth))
        throw std::invalid_argument("unproject: invalid depth");
    Eigen::Vector3d pc((pixel.x() - intr.cx) / intr.fx * depth,
                       (pixel.y() - intr.cy) / intr.fy * depth, depth);
    return pose.r() * pc + pose.translation;
}

Correspondence gt_correspondence(const Eigen::Vector2d& src_pixel, int src_view, int dst_view,
                                 const MultiViewSample& sample) {
    const Intrinsics& intr = sample.intrinsics;
    const DepthMap& sd = sample.depths[src_view];
    int sx = static_cast<int>(std::lround(src_pixel.x()));
    int sy = static_cast<int>(std::lround(src_pixel.y()));
    if (sx < 0 || sx >= sd.w || sy < 0 || sy >= sd.h || !sd.is_valid(sy, sx))
        throw std::invalid_argument("gt_correspondence: source pixel has no valid depth");

    Eigen::Vector3d world = unproject(src_pixel, sd.at(sy, sx), sample.poses[src_view], intr);
    auto proj = project(world, sample.poses[dst_view], intr);
    Correspondence out;
    if (!proj || !intr.in_bounds(proj->pixel.x(), proj->pixel.y())) {
        out.status = CorrespondenceStatus::kOutOfFrame;
        return out;
    }
    out.pixel = proj->pixel;

    const DepthMap& dd = sample.depths[dst_view];
    int dx = static_cast<int>(std::lround(proj->pixel.x()));
    int dy = static_cast<int>(std::lround(proj->pixel.y()));
    dx = std::min(dd.w - 1, std::max(0, dx));
    dy = std::min(dd.h - 1, std::max(0, dy));
    if (dd.is_valid(dy, dx)) {
        double rendered = dd.at(dy, dx);
        double tol = std::max(0.01 * rendered, 1e-3);
        if (proj->depth > rendered + tol) {
            out.status = CorrespondenceStatus::kOccluded;
            return out;
        }
    }
    out.status = CorrespondenceStatus::kValid;
    return out;
}

namespace {

// Classic closed-form similarity estimation on index-paired points.
SimilarityTransform umeyama_paired(const std::vector<Eigen::Vector3d>& src,
                                   const std::vector<Eigen::Vector3d>& dst) {
    const size_t n = src.size();
    if (n < 3) throw std::invalid_argument("umeyama_align: need at least 3 points");
    Eigen::Vector3d mu_s = Eigen::Vector3d::Zero(), mu_d = Eigen::Vector3d::Zero();
    for (size_t i = 0; i < n; ++i) {
        mu_s += src[i];
        mu_d += dst[i];
    }
    mu_s /= static_cast<double>(n);
    mu_d /= static_cast<double>(n);

    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    double var_s = 0.0;
    for (size_t i = 0; i < n; ++i) {
        Eigen::Vector3d ds = src[i] - mu_s;
        Eigen::Vector3d dd = dst[i] - mu_d;
        cov += dd * ds.transpose();
        var_s += ds.squaredNorm();
    }
    cov /= static_cast<double>(n);
    var_s /= static_cast<double>(n);

    Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Vector3d sv = svd.singularValues();
    double scale_ref = std::max(sv(0), 1e-30);
    if (sv(1) < 1e-9 * scale_ref || var_s < 1e-24)
        throw std::invalid_argument("umeyama_align: degenerate configuration");

    Eigen::Matrix3d s_fix = Eigen::Matrix3d::Identity();
    if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) s_fix(2, 2) = -1.0;

    SimilarityTransform t;
    t.rotation = svd.matrixU() * s_fix * svd.matrixV().transpose();
    t.scale = (sv(0) + sv(1) + s_fix(2, 2) * sv(2)) / var_s;
    t.translation = mu_d - t.scale * (t.rotation * mu_s);
    return t;
}

std::vector<Eigen::Vector3d> subsample(const std::vector<Eigen::Vector3d>& pts, size_t cap,
                                       uint64_t seed) {
    if (pts.size() <= cap) return pts;
    RandomStream rng(seed);
    std::vector<Eigen::Vector3d> out;
    out.reserve(cap);
    // floyd-style sample without replacement is overkill; strided + jitter is
    // deterministic and spread out
    double step = static_cast<double>(pts.size()) / static_cast<double>(cap);
    for (size_t i = 0; i < cap; ++i) {
        size_t j = static_cast<size_t>(i * step + rng.uniform() * step);
        out.push_back(pts[std::min(j, pts.size() - 1)]);
    }
    return out;
}

size_t nearest_index(const std::vector<Eigen::Vector3d>& cloud, const Eigen::Vector3d& q) {
    size_t best = 0;
    double bd = std::numeric_limits<double>::max();
    for (size_t i = 0; i < cloud.size(); ++i) {
        double d = (cloud[i] - q).squaredNorm();
        if (d < bd) {
            bd = d;
            best = i;
        }
    }
    return best;
}

}  // namespace

SimilarityTransform umeyama_align(const PointCloud& source, const PointCloud& target,
                                  bool paired) {
    if (paired) {
        if (source.points.size() != target.points.size())
            throw std::invalid_argument("umeyama_align: paired clouds must have equal sizes");
        return umeyama_paired(source.points, target.points);
    }
    // Unpaired: nearest-neighbor correspondences on subsampled clouds,
    // three refinement rounds.
    constexpr size_t kCap = 1024;
    std::vector<Eigen::Vector3d> src = subsample(source.points, kCap, 17);
    std::vector<Eigen::Vector3d> dst = subsample(target.points, 2 * kCap, 31);
    if (src.size() < 3 || dst.size() < 3)
        throw std::invalid_argument("umeyama_align: need at least 3 points");

    SimilarityTransform total;
    std::vector<Eigen::Vector3d> cur = src;
    for (int round = 0; round < 3; ++round) {
        std::vector<Eigen::Vector3d> matched(cur.size());
        for (size_t i = 0; i < cur.size(); ++i) matched[i] = dst[nearest_index(dst, cur[i])];
        SimilarityTransform t = umeyama_paired(cur, matched);
        for (auto& p : cur) p = t.apply(p);
        total.rotation = t.rotation * total.rotation;
        total.scale = t.scale * total.scale;
        total.translation = t.scale * (t.rotation * total.translation) + t.translation;
    }
    return total;
}

PointCloud unproject_sample(const std::vector<DepthMap>& depths,
                            const std::vector<CameraPose>& poses, const Intrinsics& intr,
                            int stride) {
    PointCloud cloud;
    for (size_t v = 0; v < depths.size(); ++v) {
        const DepthMap& d = depths[v];
        for (int y = 0; y < d.h; y += stride) {
            for (int x = 0; x < d.w; x += stride) {
                if (!d.is_valid(y, x)) continue;
                cloud.points.push_back(
                    unproject(Eigen::Vector2d(x, y), d.at(y, x), poses[v], intr));
                cloud.source_view.push_back(static_cast<int>(v));
            }
        }
    }
    return cloud;
}

}  // namespace gardlab
