#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <vector>

namespace gardlab {

// Camera convention: right-handed, +z forward, x right, y down in the image,
// image origin top-left, pixel centers at integer coordinates.

struct Quat {
    double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

    Quat() = default;
    Quat(double w_, double x_, double y_, double z_) : w(w_), x(x_), y(y_), z(z_) {}
    explicit Quat(const Eigen::Quaterniond& q) : w(q.w()), x(q.x()), y(q.y()), z(q.z()) {}

    Eigen::Quaterniond eigen() const { return Eigen::Quaterniond(w, x, y, z); }
    double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
    // Unit norm with w >= 0 (canonical sign).
    Quat normalized() const;
    Eigen::Matrix3d matrix() const { return eigen().toRotationMatrix(); }
    Quat conjugate() const { return Quat(w, -x, -y, -z); }
    Quat operator*(const Quat& o) const { return Quat(eigen() * o.eigen()); }
    // Geodesic angle to another unit quaternion, radians.
    double angle_to(const Quat& o) const;
};

Quat quat_from_matrix(const Eigen::Matrix3d& r);

// Camera-to-world transform: X_world = R * X_cam + t (t is the camera center).
struct CameraPose {
    Quat rotation;
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();

    CameraPose() = default;
    CameraPose(const Quat& q, const Eigen::Vector3d& t) : rotation(q.normalized()), translation(t) {}

    Eigen::Matrix3d r() const { return rotation.matrix(); }
    CameraPose inverse() const;
    // this->applied after other: world = this ∘ other.
    CameraPose compose(const CameraPose& other) const;
};

// Pose of b expressed in a's camera frame.
CameraPose relative_pose(const CameraPose& a, const CameraPose& b);

struct Intrinsics {
    double fx = 0, fy = 0, cx = 0, cy = 0;
    int width = 0, height = 0;

    void validate() const;
    bool in_bounds(double u, double v) const {
        return u >= 0.0 && u <= width - 1.0 && v >= 0.0 && v <= height - 1.0;
    }
};

struct DepthMap {
    int h = 0, w = 0;
    std::vector<double> values;
    std::vector<uint8_t> valid;

    DepthMap() = default;
    DepthMap(int h_, int w_) : h(h_), w(w_), values(static_cast<size_t>(h_) * w_, 0.0),
                               valid(static_cast<size_t>(h_) * w_, 0) {}
    double at(int y, int x) const { return values[static_cast<size_t>(y) * w + x]; }
    bool is_valid(int y, int x) const { return valid[static_cast<size_t>(y) * w + x] != 0; }
    void set(int y, int x, double d) {
        values[static_cast<size_t>(y) * w + x] = d;
        valid[static_cast<size_t>(y) * w + x] = d > 0.0 ? 1 : 0;
    }
};

struct PointCloud {
    std::vector<Eigen::Vector3d> points;
    std::vector<int> source_view;  // optional, empty or same size as points
};

struct Image {
    int h = 0, w = 0;
    std::vector<double> rgb;  // h*w*3, row-major, [0,1]

    Image() = default;
    Image(int h_, int w_) : h(h_), w(w_), rgb(static_cast<size_t>(h_) * w_ * 3, 0.0) {}
    double& at(int y, int x, int c) { return rgb[(static_cast<size_t>(y) * w + x) * 3 + c]; }
    double at(int y, int x, int c) const { return rgb[(static_cast<size_t>(y) * w + x) * 3 + c]; }
};

struct MultiViewSample {
    std::vector<Image> images;
    std::vector<DepthMap> depths;
    std::vector<CameraPose> poses;
    Intrinsics intrinsics;
    uint64_t seed = 0;

    int view_count() const { return static_cast<int>(images.size()); }
    MultiViewSample subset(const std::vector<int>& view_indices) const;
};

struct Projection {
    Eigen::Vector2d pixel;
    double depth;  // camera-frame z
};

// Pinhole projection; nullopt when the point is behind the camera (z <= 1e-8).
std::optional<Projection> project(const Eigen::Vector3d& point, const CameraPose& pose,
                                  const Intrinsics& intr);

// Inverse of project. Throws on depth <= 0 or non-finite depth.
Eigen::Vector3d unproject(const Eigen::Vector2d& pixel, double depth, const CameraPose& pose,
                          const Intrinsics& intr);

enum class CorrespondenceStatus { kValid, kOccluded, kOutOfFrame };

struct Correspondence {
    CorrespondenceStatus status = CorrespondenceStatus::kOutOfFrame;
    Eigen::Vector2d pixel = Eigen::Vector2d::Zero();
    bool ok() const { return status == CorrespondenceStatus::kValid; }
};

// Maps a source pixel with valid depth into the destination view. Occlusion
// tolerance: 1% of the destination depth, floored at 1e-3 world units.
Correspondence gt_correspondence(const Eigen::Vector2d& src_pixel, int src_view, int dst_view,
                                 const MultiViewSample& sample);

struct SimilarityTransform {
    double scale = 1.0;
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();

    Eigen::Vector3d apply(const Eigen::Vector3d& p) const {
        return scale * (rotation * p) + translation;
    }
};

// Least-squares similarity alignment of source onto target. With paired=true
// the clouds must have equal sizes and index-matched points; otherwise
// correspondences are estimated by nearest neighbors on subsampled clouds
// with three refinement rounds. Throws on degenerate (collinear/coincident)
// configurations.
SimilarityTransform umeyama_align(const PointCloud& source, const PointCloud& target, bool paired);

// Unprojects all valid depth pixels of every view into one world-frame cloud.
PointCloud unproject_sample(const std::vector<DepthMap>& depths,
                            const std::vector<CameraPose>& poses, const Intrinsics& intr,
                            int stride = 1);

}  // namespace gardlab
